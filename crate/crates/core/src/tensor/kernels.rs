//! Plain-loop numeric kernels over row-major slices.

use super::Scalar;

/// `c[m,n] += a[m,k] * b[k,n]`
pub fn gemm_nn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m,k] += a[m,n] * b[k,n]^T`
pub fn gemm_nt<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            c[i * k + p] += acc;
        }
    }
}

/// `c[k,n] += a[m,k]^T * b[m,n]`
pub fn gemm_tn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Output axis `i` is input axis `perm[i]`.
pub fn permute<T: Scalar>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<T>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let rank = shape.len();
    let inner = out_shape[rank - 1];
    let inner_stride = src_strides[rank - 1];
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank.saturating_sub(1)];
    let outer: usize = out_shape[..rank - 1].iter().product();
    for _ in 0..outer {
        let base: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        for j in 0..inner {
            out.push(data[base + j * inner_stride]);
        }
        for ax in (0..rank - 1).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    (out_shape, out)
}

pub fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Row-wise normalization. Returns (x_hat, rstd).
pub fn layernorm_rows<T: Scalar>(x: &[T], d: usize, eps: T) -> (Vec<T>, Vec<T>) {
    let rows = x.len() / d;
    let mut xhat = Vec::with_capacity(x.len());
    let mut rstd = Vec::with_capacity(rows);
    let inv_d = T::one() / T::from_f64(d as f64);
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mut mean = T::zero();
        for &v in row {
            mean += v;
        }
        mean *= inv_d;
        let mut var = T::zero();
        for &v in row {
            let c = v - mean;
            var += c * c;
        }
        var *= inv_d;
        let rs = T::one() / (var + eps).sqrt();
        rstd.push(rs);
        xhat.extend(row.iter().map(|&v| (v - mean) * rs));
    }
    (xhat, rstd)
}

pub fn softmax_rows<T: Scalar>(x: &[T], d: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks_exact(d) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let start = out.len();
        let mut sum = T::zero();
        for &v in row {
            let e = (v - max).exp();
            sum += e;
            out.push(e);
        }
        let inv = T::one() / sum;
        for v in &mut out[start..] {
            *v *= inv;
        }
    }
    out
}

pub fn gelu<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
    half * x * (T::one() + (x * inv_sqrt2).erf())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
    let inv_sqrt_2pi = T::from_f64(0.398_942_280_401_432_7);
    let cdf = half * (T::one() + (x * inv_sqrt2).erf());
    let pdf = inv_sqrt_2pi * (-(x * x) * half).exp();
    cdf + x * pdf
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_variants_agree() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect(); // [2,3]
        let b: Vec<f64> = (0..12).map(|v| v as f64 * 0.5).collect(); // [3,4]
        let mut c = vec![0.0; 8];
        gemm_nn(&a, &b, &mut c, 2, 3, 4);
        assert_eq!(c, vec![10.0, 11.5, 13.0, 14.5, 28.0, 34.0, 40.0, 46.0]);

        // (a b) b^T via gemm_nt against explicit transpose
        let (_, bt) = permute(&b, &[3, 4], &[1, 0]);
        let mut d1 = vec![0.0; 6];
        gemm_nt(&c, &b, &mut d1, 2, 4, 3);
        let mut d2 = vec![0.0; 6];
        gemm_nn(&c, &bt, &mut d2, 2, 4, 3);
        assert_eq!(d1, d2);

        let (_, at) = permute(&a, &[2, 3], &[1, 0]);
        let mut e1 = vec![0.0; 12];
        gemm_tn(&a, &c, &mut e1, 2, 3, 4);
        let mut e2 = vec![0.0; 12];
        gemm_nn(&at, &c, &mut e2, 3, 2, 4);
        assert_eq!(e1, e2);
    }

    #[test]
    fn permute_3d() {
        let x: Vec<f64> = (0..24).map(|v| v as f64).collect();
        let (s, y) = permute(&x, &[2, 3, 4], &[2, 0, 1]);
        assert_eq!(s, vec![4, 2, 3]);
        // y[k,i,j] == x[i,j,k]
        for i in 0..2 {
            for j in 0..3 {
                for k in 0..4 {
                    assert_eq!(y[k * 6 + i * 3 + j], x[i * 12 + j * 4 + k]);
                }
            }
        }
        let inv = inverse_perm(&[2, 0, 1]);
        let (s2, z) = permute(&y, &s, &inv);
        assert_eq!(s2, vec![2, 3, 4]);
        assert_eq!(z, x);
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu(0.0f64), 0.0);
        assert!((gelu(1.0f64) - 0.841_344_746_068_542_9).abs() < 1e-12);
        assert!((gelu_grad(0.0f64) - 0.5).abs() < 1e-15);
    }
}

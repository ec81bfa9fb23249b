use super::layers::Linear;
use super::mask::MaskState;
use super::{ModelSpec, ParamStore};
use crate::error::{dim_err, BimError, Result};
use crate::rng::SplitMix64;
use crate::tensor::{Graph, NodeId, Scalar, Tensor};

/// Fixed 2D sin-cos position table `[grid_side^2, dim]`.
///
/// The first half of each row encodes the column, the second half the row;
/// each half is `[sin(pos * w_i), cos(pos * w_i)]` with
/// `w_i = 10000^(-i / (dim/4))`.
pub fn sincos_pos_embed<T: Scalar>(grid_side: usize, dim: usize) -> Result<Tensor<T>> {
    if dim == 0 || !dim.is_multiple_of(4) {
        return Err(BimError::Contract(format!(
            "sin-cos embedding width must be divisible by 4, got {dim}"
        )));
    }
    if grid_side == 0 {
        return Err(BimError::Contract("grid side must be positive".into()));
    }
    let quarter = dim / 4;
    let omega: Vec<f64> = (0..quarter)
        .map(|i| 1.0 / 10000f64.powf(i as f64 / quarter as f64))
        .collect();
    let mut data = Vec::with_capacity(grid_side * grid_side * dim);
    for row in 0..grid_side {
        for col in 0..grid_side {
            for pos in [col as f64, row as f64] {
                data.extend(omega.iter().map(|w| T::from_f64((pos * w).sin())));
                data.extend(omega.iter().map(|w| T::from_f64((pos * w).cos())));
            }
        }
    }
    Tensor::new(vec![grid_side * grid_side, dim], data)
}

/// `[B, C, H, W] -> [B, N, p*p*C]`, patches in row-major grid order and
/// pixels within a patch ordered (row, column, channel).
pub fn patchify<T: Scalar>(images: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let s = images.shape();
    if s.len() != 4 || s[2] != s[3] || !s[2].is_multiple_of(patch) {
        return Err(dim_err(
            "patchify",
            format!("expected [B, C, S, S] with S divisible by {patch}, got {s:?}"),
        ));
    }
    let (b, c, side) = (s[0], s[1], s[2]);
    let g = side / patch;
    let pp = patch * patch * c;
    let src = images.data();
    let mut out = Vec::with_capacity(images.numel());
    for bi in 0..b {
        for gy in 0..g {
            for gx in 0..g {
                for py in 0..patch {
                    for px in 0..patch {
                        for ci in 0..c {
                            let y = gy * patch + py;
                            let x = gx * patch + px;
                            out.push(src[((bi * c + ci) * side + y) * side + x]);
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, g * g, pp], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Scalar>(patches: &Tensor<T>, patch: usize, channels: usize) -> Result<Tensor<T>> {
    let s = patches.shape();
    let g = (s.get(1).copied().unwrap_or(0) as f64).sqrt() as usize;
    if s.len() != 3 || g * g != s[1] || s[2] != patch * patch * channels {
        return Err(dim_err("unpatchify", format!("unexpected patch tensor {s:?}")));
    }
    let (b, side) = (s[0], g * patch);
    let src = patches.data();
    let mut out = vec![T::zero(); b * channels * side * side];
    let mut k = 0;
    for bi in 0..b {
        for gy in 0..g {
            for gx in 0..g {
                for py in 0..patch {
                    for px in 0..patch {
                        for ci in 0..channels {
                            let y = gy * patch + py;
                            let x = gx * patch + px;
                            out[((bi * channels + ci) * side + y) * side + x] = src[k];
                            k += 1;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, channels, side, side], out)
}

/// Linear patch projection plus fixed sin-cos positions.
#[derive(Debug, Clone)]
pub struct PatchEmbed<T> {
    pub proj: Linear,
    pub pos: Tensor<T>,
    patch: usize,
    image_size: usize,
}

impl<T: Scalar> PatchEmbed<T> {
    pub fn new(spec: &ModelSpec, store: &mut ParamStore<T>, rng: &mut SplitMix64) -> Result<Self> {
        Ok(Self {
            proj: Linear::new(store, "embed.proj", spec.patch_pixels(), spec.embed_dim, 0, rng),
            pos: sincos_pos_embed(spec.grid_side(), spec.embed_dim)?,
            patch: spec.patch_size,
            image_size: spec.image_size,
        })
    }

    fn check(&self, images: &Tensor<T>) -> Result<()> {
        let s = images.shape();
        if s.len() != 4 || s[2] != self.image_size || s[3] != self.image_size {
            return Err(dim_err(
                "patch_embed",
                format!("expected [B, C, {0}, {0}] images, got {s:?}", self.image_size),
            ));
        }
        Ok(())
    }

    /// All tokens: `[B, C, H, W] -> [B, N, D]`.
    pub fn forward(&self, g: &mut Graph<T>, store: &ParamStore<T>, images: &Tensor<T>) -> Result<NodeId> {
        self.check(images)?;
        let patches = g.constant(patchify(images, self.patch)?);
        let x = self.proj.forward(g, store, patches)?;
        let pos = g.constant(self.pos.clone());
        g.add(x, pos)
    }

    /// Only the visible tokens of each sample, in `kept_ids` order:
    /// `[B, n_visible, D]`. Row-for-row identical to `forward` followed by
    /// masking, but the projection only touches (and saves) visible patches.
    pub fn forward_visible(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        images: &Tensor<T>,
        masks: &[MaskState],
    ) -> Result<NodeId> {
        self.check(images)?;
        let patches = patchify(images, self.patch)?;
        let (b, n, pp) = (patches.shape()[0], patches.shape()[1], patches.shape()[2]);
        if masks.len() != b {
            return Err(dim_err("patch_embed", format!("{} masks for batch {b}", masks.len())));
        }
        let n_vis = masks[0].kept_ids.len();
        let d = self.pos.last_dim();
        let mut vis = Vec::with_capacity(b * n_vis * pp);
        let mut pos = Vec::with_capacity(b * n_vis * d);
        for (bi, m) in masks.iter().enumerate() {
            if m.kept_ids.len() != n_vis || m.num_patches() != n {
                return Err(BimError::Contract("mask states disagree on visible count".into()));
            }
            for &p in &m.kept_ids {
                vis.extend_from_slice(patches.row(bi * n + p));
                pos.extend_from_slice(self.pos.row(p));
            }
        }
        let vis = g.constant(Tensor::new(vec![b, n_vis, pp], vis)?);
        let x = self.proj.forward(g, store, vis)?;
        let pos = g.constant(Tensor::new(vec![b, n_vis, d], pos)?);
        g.add(x, pos)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn origin_is_sin_zero_cos_one() {
        let pe = sincos_pos_embed::<f64>(4, 16).unwrap();
        let row = pe.row(0);
        for half in 0..2 {
            let base = half * 8;
            assert!(row[base..base + 4].iter().all(|&v| v == 0.0));
            assert!(row[base + 4..base + 8].iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn pure_and_collision_free() {
        for side in 1..=16 {
            let a = sincos_pos_embed::<f64>(side, 32).unwrap();
            let b = sincos_pos_embed::<f64>(side, 32).unwrap();
            assert!(a.bitwise_eq(&b));
            let n = side * side;
            for i in 0..n {
                for j in i + 1..n {
                    let dist: f64 = a.row(i).iter().zip(a.row(j)).map(|(x, y)| (x - y).abs()).sum();
                    assert!(dist > 1e-9, "rows {i} and {j} collide at side {side}");
                }
            }
        }
    }

    #[test]
    fn indivisible_width_rejected() {
        assert!(sincos_pos_embed::<f64>(4, 6).is_err());
    }

    #[test]
    fn patchify_round_trip() {
        let data: Vec<f64> = (0..2 * 3 * 8 * 8).map(|v| v as f64).collect();
        let img = Tensor::new(vec![2, 3, 8, 8], data).unwrap();
        let p = patchify(&img, 4).unwrap();
        assert_eq!(p.shape(), &[2, 4, 48]);
        let back = unpatchify(&p, 4, 3).unwrap();
        assert!(back.bitwise_eq(&img));
    }

    #[test]
    fn token_count_for_toy_image() {
        let spec = ModelSpec::toy();
        let mut store = ParamStore::<f64>::new();
        let embed = PatchEmbed::new(&spec, &mut store, &mut SplitMix64::new(0)).unwrap();
        let mut g = Graph::new();
        let img = Tensor::zeros(&[1, 3, 32, 32]);
        let t = embed.forward(&mut g, &store, &img).unwrap();
        assert_eq!(g.shape(t).unwrap(), &[1, 64, 64]);
        // zero image and zero bias: tokens are the positional table
        let v = g.value(t).unwrap();
        assert!(v.reshaped(&[64, 64]).unwrap().bitwise_eq(&embed.pos));

        let bad = Tensor::zeros(&[1, 3, 28, 28]);
        assert!(embed.forward(&mut g, &store, &bad).is_err());
    }
}

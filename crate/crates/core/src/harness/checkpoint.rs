//! `BIMC` checkpoints.
//!
//! Layout (little-endian): `"BIMC"`, u32 version, u32 tensor count, then per
//! tensor: u32 name length, UTF-8 name, u32 rank, `rank` u32 dims, payload.
//! Version 1 payloads are f32; version 2 payloads are f64 so double-precision
//! runs resume bit-for-bit. Optimizer moments are stored as tensors named
//! `adam.m/<param>`, `adam.v/<param>`, `adam.t/<param>`; run metadata uses
//! the `meta/` prefix.

use std::path::Path;

use crate::engine::Model;
use crate::error::{BimError, Result};
use crate::harness::optim::{AdamW, MomentState};
use crate::tensor::{DType, Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"BIMC";
pub const VERSION_F32: u32 = 1;
pub const VERSION_F64: u32 = 2;

pub const MOMENT1_PREFIX: &str = "adam.m/";
pub const MOMENT2_PREFIX: &str = "adam.v/";
pub const STEP_COUNT_PREFIX: &str = "adam.t/";
pub const META_PREFIX: &str = "meta/";

const MAX_RANK: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Widened to f64; exact for both payload types.
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub dtype: DType,
    pub entries: Vec<Entry>,
}

fn version_of(dtype: DType) -> u32 {
    match dtype {
        DType::F32 => VERSION_F32,
        DType::F64 => VERSION_F64,
    }
}

impl Checkpoint {
    pub fn new(dtype: DType) -> Self {
        Self {
            dtype,
            entries: Vec::new(),
        }
    }

    pub fn push<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.entries.push(Entry {
            name: name.into(),
            shape: t.shape().to_vec(),
            data: t.to_f64_vec(),
        });
    }

    pub fn push_meta(&mut self, key: &str, value: f64) {
        self.entries.push(Entry {
            name: format!("{META_PREFIX}{key}"),
            shape: vec![1],
            data: vec![value],
        });
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn meta(&self, key: &str) -> Option<f64> {
        self.get(&format!("{META_PREFIX}{key}")).map(|e| e.data[0])
    }

    pub fn tensor<T: Scalar>(&self, name: &str) -> Result<Option<Tensor<T>>> {
        self.get(name).map(|e| Tensor::from_f64(&e.shape, &e.data)).transpose()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&version_of(self.dtype).to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for &d in &e.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            match self.dtype {
                DType::F32 => e
                    .data
                    .iter()
                    .for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
                DType::F64 => e.data.iter().for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(BimError::Format {
                offset: 0,
                detail: "missing BIMC magic".into(),
            });
        }
        r.pos = 4;
        let version = r.u32("header")?;
        let dtype = match version {
            VERSION_F32 => DType::F32,
            VERSION_F64 => DType::F64,
            v => {
                return Err(BimError::Incompatible(format!(
                    "checkpoint version {v}; this build reads versions {VERSION_F32} and {VERSION_F64}"
                )))
            }
        };
        let count = r.u32("header")? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for i in 0..count {
            let at = format!("tensor #{i}");
            let name_len = r.u32(&at)? as usize;
            let name_bytes = r.take(name_len, &at)?;
            let name = String::from_utf8(name_bytes.to_vec()).map_err(|_| BimError::Format {
                offset: (r.pos - name_len) as u64,
                detail: format!("{at}: name is not UTF-8"),
            })?;
            let at = format!("tensor '{name}'");
            let rank = r.u32(&at)? as usize;
            if rank == 0 || rank > MAX_RANK {
                return Err(BimError::Format {
                    offset: (r.pos - 4) as u64,
                    detail: format!("{at}: rank {rank} outside 1..={MAX_RANK}"),
                });
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32(&at)? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n > 0);
            let numel = numel.ok_or_else(|| BimError::Format {
                offset: r.pos as u64,
                detail: format!("{at}: invalid dims {shape:?}"),
            })?;
            let width = dtype.size_bytes();
            let payload = r.take(numel.saturating_mul(width), &at)?;
            let data = match dtype {
                DType::F32 => payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
                DType::F64 => payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            };
            entries.push(Entry { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(BimError::Format {
                offset: r.pos as u64,
                detail: format!("{} trailing bytes after {count} tensors", bytes.len() - r.pos),
            });
        }
        Ok(Self { dtype, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, at: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(BimError::Format {
                offset: self.pos as u64,
                detail: format!("{at}: needs {n} bytes, only {} remain", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, at: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, at)?.try_into().unwrap()))
    }
}

/// Parameters, optimizer moments and the global step of a run.
pub fn snapshot<T: Scalar>(model: &Model<T>, opt: &AdamW<T>, step: u64) -> Checkpoint {
    let mut c = Checkpoint::new(T::DTYPE);
    for (_, p) in model.store.iter() {
        c.push(p.name.clone(), &p.value);
    }
    for (id, st) in opt.states() {
        let name = &model.store.get(id).name;
        c.push(format!("{MOMENT1_PREFIX}{name}"), &st.m);
        c.push(format!("{MOMENT2_PREFIX}{name}"), &st.v);
        c.entries.push(Entry {
            name: format!("{STEP_COUNT_PREFIX}{name}"),
            shape: vec![1],
            data: vec![st.t as f64],
        });
    }
    c.push_meta("step", step as f64);
    c.push_meta("num_blocks", model.num_blocks() as f64);
    c
}

pub fn save_checkpoint<T: Scalar>(model: &Model<T>, opt: &AdamW<T>, step: u64, path: &Path) -> Result<()> {
    snapshot(model, opt, step).save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path)
}

fn check_dtype<T: Scalar>(c: &Checkpoint) -> Result<()> {
    if c.dtype != T::DTYPE {
        return Err(BimError::Incompatible(format!(
            "checkpoint holds {} tensors, run uses {}",
            c.dtype.name(),
            T::DTYPE.name()
        )));
    }
    Ok(())
}

/// Overwrite the parameters named in `c` (every name must exist in the
/// model with the same shape). Returns how many were set.
pub fn load_parameters<T: Scalar>(c: &Checkpoint, model: &mut Model<T>) -> Result<usize> {
    check_dtype::<T>(c)?;
    let mut n = 0;
    for e in &c.entries {
        if e.name.starts_with("adam.") || e.name.starts_with(META_PREFIX) {
            continue;
        }
        let id = model
            .store
            .find(&e.name)
            .ok_or_else(|| BimError::Incompatible(format!("checkpoint tensor '{}' not in model", e.name)))?;
        if model.store.value(id).shape() != e.shape.as_slice() {
            return Err(BimError::Incompatible(format!(
                "'{}' has shape {:?}, model expects {:?}",
                e.name,
                e.shape,
                model.store.value(id).shape()
            )));
        }
        *model.store.value_mut(id) = Tensor::from_f64(&e.shape, &e.data)?;
        n += 1;
    }
    Ok(n)
}

/// Restore a full training state written by [`snapshot`]; returns the step.
pub fn restore<T: Scalar>(c: &Checkpoint, model: &mut Model<T>, opt: &mut AdamW<T>) -> Result<u64> {
    let set = load_parameters(c, model)?;
    if set != model.store.len() {
        return Err(BimError::Incompatible(format!(
            "checkpoint has {set} of the model's {} parameters",
            model.store.len()
        )));
    }
    let ids: Vec<_> = model.store.iter().map(|(id, p)| (id, p.name.clone())).collect();
    for (id, name) in ids {
        let m = c.tensor::<T>(&format!("{MOMENT1_PREFIX}{name}"))?;
        let v = c.tensor::<T>(&format!("{MOMENT2_PREFIX}{name}"))?;
        let t = c.get(&format!("{STEP_COUNT_PREFIX}{name}"));
        match (m, v, t) {
            (Some(m), Some(v), Some(t)) => opt.insert_state(
                id,
                MomentState {
                    m,
                    v,
                    t: t.data[0] as u64,
                },
            ),
            (None, None, None) => {}
            _ => {
                return Err(BimError::Incompatible(format!(
                    "incomplete optimizer state for '{name}'"
                )))
            }
        }
    }
    c.meta("step")
        .map(|s| s as u64)
        .ok_or_else(|| BimError::Incompatible("checkpoint has no meta/step".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{bim_train_step, BimPlan, StepContext};
    use crate::harness::optim::AdamWConfig;
    use crate::vit::ModelSpec;

    fn trained() -> (Model<f64>, AdamW<f64>) {
        let spec = ModelSpec::tiny();
        let mut m = Model::<f64>::new(&spec, 2, 1).unwrap();
        let mut o = AdamW::new(AdamWConfig::default());
        let x = Tensor::full(&[2, 1, 8, 8], 0.3);
        let plan = BimPlan::uniform(&spec, 2, 0.5).unwrap();
        bim_train_step(&mut m, &x, &plan, &mut o, 1e-3, StepContext { seed: 0, step: 0 }).unwrap();
        (m, o)
    }

    #[test]
    fn round_trip_is_bitwise() {
        let (m, o) = trained();
        let c = snapshot(&m, &o, 7);
        let bytes = c.to_bytes();
        assert_eq!(&bytes[..4], b"BIMC");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), VERSION_F64);
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        let mut m2 = Model::<f64>::new(&m.spec, 2, 99).unwrap();
        let mut o2 = AdamW::new(AdamWConfig::default());
        assert_eq!(restore(&back, &mut m2, &mut o2).unwrap(), 7);
        for ((_, a), (_, b)) in m.store.iter().zip(m2.store.iter()) {
            assert!(a.value.bitwise_eq(&b.value));
        }
        for ((ia, a), (ib, b)) in o.states().zip(o2.states()) {
            assert_eq!(ia, ib);
            assert!(a.m.bitwise_eq(&b.m) && a.v.bitwise_eq(&b.v));
            assert_eq!(a.t, b.t);
        }
    }

    #[test]
    fn f32_payload_layout() {
        let mut c = Checkpoint::new(DType::F32);
        c.push("w", &Tensor::<f32>::from_f64(&[2], &[1.5, -2.0]).unwrap());
        let b = c.to_bytes();
        let mut expect = b"BIMC".to_vec();
        for v in [1u32, 1, 1] {
            expect.extend_from_slice(&v.to_le_bytes());
        }
        expect.push(b'w');
        for v in [1u32, 2] {
            expect.extend_from_slice(&v.to_le_bytes());
        }
        expect.extend_from_slice(&1.5f32.to_le_bytes());
        expect.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(b, expect);
    }

    #[test]
    fn corruption_is_reported() {
        let (m, o) = trained();
        let bytes = snapshot(&m, &o, 1).to_bytes();
        let mut bad = bytes.clone();
        bad[4..8].copy_from_slice(&9u32.to_le_bytes());
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(BimError::Incompatible(_))));

        // Enlarge the first tensor's first dim: its payload now overruns.
        let mut long = bytes.clone();
        let name_len = u32::from_le_bytes(long[12..16].try_into().unwrap()) as usize;
        let name = String::from_utf8(long[16..16 + name_len].to_vec()).unwrap();
        let dim_at = 16 + name_len + 4;
        long[dim_at..dim_at + 4].copy_from_slice(&100_000u32.to_le_bytes());
        match Checkpoint::from_bytes(&long) {
            Err(BimError::Format { detail, .. }) => assert!(detail.contains(&name), "{detail}"),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 1]),
            Err(BimError::Format { .. })
        ));
    }

    #[test]
    fn dtype_mismatch_is_incompatible() {
        let (m, o) = trained();
        let c = snapshot(&m, &o, 0);
        let mut m32 = Model::<f32>::new(&m.spec, 2, 0).unwrap();
        let mut o32 = AdamW::new(AdamWConfig::default());
        assert!(matches!(
            restore(&c, &mut m32, &mut o32),
            Err(BimError::Incompatible(_))
        ));
    }
}

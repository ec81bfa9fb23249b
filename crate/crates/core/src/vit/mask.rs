use crate::error::{dim_err, BimError, Result};
use crate::rng::{argsort, SplitMix64};
use crate::tensor::{Graph, NodeId, Scalar};

/// Visible/masked partition of one sample's patches.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskState {
    /// Visible patch indices, in token order.
    pub kept_ids: Vec<usize>,
    /// `1` = masked, over all patches in grid order.
    pub mask: Vec<u8>,
    /// `restore_perm[p]` is the position of patch `p` in the sequence
    /// `kept_ids ++ masked ids (ascending)` that decoders unshuffle.
    pub restore_perm: Vec<usize>,
}

/// `floor(n * (1 - ratio))`, with a small guard against representation
/// error in `1 - ratio` (e.g. `1 - 0.8 = 0.19999999999999996`).
pub fn keep_count(n: usize, ratio: f64) -> usize {
    ((n as f64) * (1.0 - ratio) + 1e-9).floor() as usize
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(BimError::Contract(format!(
            "masking ratio must lie in [0, 1), got {ratio}"
        )));
    }
    Ok(())
}

impl MaskState {
    pub fn from_kept(num_patches: usize, kept_ids: Vec<usize>) -> Result<Self> {
        let mut mask = vec![1u8; num_patches];
        for &k in &kept_ids {
            if k >= num_patches || mask[k] == 0 {
                return Err(BimError::Contract(format!(
                    "kept id {k} out of range or repeated (N = {num_patches})"
                )));
            }
            mask[k] = 0;
        }
        let mut restore_perm = vec![0; num_patches];
        for (pos, &k) in kept_ids.iter().enumerate() {
            restore_perm[k] = pos;
        }
        let mut pos = kept_ids.len();
        for (p, &m) in mask.iter().enumerate() {
            if m == 1 {
                restore_perm[p] = pos;
                pos += 1;
            }
        }
        Ok(Self {
            kept_ids,
            mask,
            restore_perm,
        })
    }

    /// Draw `N` uniforms, argsort ascending (ties by index), keep the first
    /// `floor(N (1 - ratio))`.
    pub fn sample(num_patches: usize, ratio: f64, rng: &mut SplitMix64) -> Result<Self> {
        check_ratio(ratio)?;
        let noise: Vec<f64> = (0..num_patches).map(|_| rng.uniform()).collect();
        let order = argsort(&noise);
        let keep = keep_count(num_patches, ratio);
        Self::from_kept(num_patches, order[..keep].to_vec())
    }

    pub fn num_patches(&self) -> usize {
        self.mask.len()
    }

    pub fn num_visible(&self) -> usize {
        self.kept_ids.len()
    }

    pub fn num_masked(&self) -> usize {
        self.mask.len() - self.kept_ids.len()
    }

    pub fn masked_ids(&self) -> Vec<usize> {
        (0..self.mask.len()).filter(|&p| self.mask[p] == 1).collect()
    }

    /// Keep the tokens at `positions` (indices into `kept_ids`).
    fn subset(&self, positions: &[usize]) -> Result<Self> {
        let kept = positions.iter().map(|&i| self.kept_ids[i]).collect();
        Self::from_kept(self.num_patches(), kept)
    }

    pub fn check(&self) -> Result<()> {
        let again = Self::from_kept(self.num_patches(), self.kept_ids.clone())?;
        if again != *self {
            return Err(BimError::Contract("inconsistent mask state".into()));
        }
        Ok(())
    }
}

/// Visible tokens `[B, n_visible, D]` with one mask state per sample.
#[derive(Debug, Clone)]
pub struct PatchBatch {
    pub tokens: NodeId,
    pub masks: Vec<MaskState>,
}

impl PatchBatch {
    pub fn num_visible(&self) -> usize {
        self.masks.first().map_or(0, |m| m.num_visible())
    }
}

pub fn sample_masks(batch: usize, num_patches: usize, ratio: f64, rng: &mut SplitMix64) -> Result<Vec<MaskState>> {
    (0..batch).map(|_| MaskState::sample(num_patches, ratio, rng)).collect()
}

/// Randomly keep `floor(N (1 - ratio))` tokens per sample.
pub fn random_mask<T: Scalar>(
    g: &mut Graph<T>,
    tokens: NodeId,
    ratio: f64,
    rng: &mut SplitMix64,
) -> Result<PatchBatch> {
    check_ratio(ratio)?;
    let s = g.shape(tokens)?.to_vec();
    if s.len() != 3 {
        return Err(dim_err("random_mask", format!("expected [B, N, D], got {s:?}")));
    }
    let (b, n, d) = (s[0], s[1], s[2]);
    if keep_count(n, ratio) == 0 {
        return Err(BimError::Contract(format!("ratio {ratio} keeps no token out of {n}")));
    }
    let masks = sample_masks(b, n, ratio, rng)?;
    let keep = masks[0].num_visible();
    let ids: Vec<usize> = masks
        .iter()
        .enumerate()
        .flat_map(|(bi, m)| m.kept_ids.iter().map(move |&k| bi * n + k))
        .collect();
    let rows = g.gather_rows(tokens, &ids)?;
    let tokens = g.reshape(rows, &[b, keep, d])?;
    Ok(PatchBatch { tokens, masks })
}

/// Drop further tokens so that `floor(N (1 - target_ratio))` remain; the
/// survivors are a uniformly drawn subset of the currently visible tokens,
/// kept in their current relative order.
pub fn incremental_drop<T: Scalar>(
    g: &mut Graph<T>,
    batch: PatchBatch,
    target_ratio: f64,
    rng: &mut SplitMix64,
) -> Result<PatchBatch> {
    check_ratio(target_ratio)?;
    let n = batch.masks.first().map_or(0, |m| m.num_patches());
    let current = batch.num_visible();
    let target = keep_count(n, target_ratio);
    if target > current {
        return Err(BimError::Schedule(format!(
            "ratio {target_ratio} keeps {target} tokens but only {current} are visible"
        )));
    }
    if target == 0 {
        return Err(BimError::Schedule(format!(
            "ratio {target_ratio} keeps no token out of {n}"
        )));
    }
    if target == current {
        return Ok(batch);
    }
    let s = g.shape(batch.tokens)?.to_vec();
    let (b, d) = (s[0], s[2]);
    let mut ids = Vec::with_capacity(b * target);
    let mut masks = Vec::with_capacity(b);
    for (bi, m) in batch.masks.iter().enumerate() {
        let noise: Vec<f64> = (0..current).map(|_| rng.uniform()).collect();
        let mut chosen = argsort(&noise)[..target].to_vec();
        chosen.sort_unstable();
        ids.extend(chosen.iter().map(|&c| bi * current + c));
        masks.push(m.subset(&chosen)?);
    }
    let rows = g.gather_rows(batch.tokens, &ids)?;
    let tokens = g.reshape(rows, &[b, target, d])?;
    Ok(PatchBatch { tokens, masks })
}

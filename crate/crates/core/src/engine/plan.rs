use crate::error::{BimError, Result};
use crate::vit::{keep_count, ModelSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Bim,
    Mae,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Bim => "bim",
            Mode::Mae => "mae",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bim" => Some(Mode::Bim),
            "mae" => Some(Mode::Mae),
            _ => None,
        }
    }
}

/// Block partition and masking schedule. In MAE mode the plan has one block
/// and `mask_schedule[0]` is the global ratio.
#[derive(Debug, Clone, PartialEq)]
pub struct BimPlan {
    pub num_blocks: usize,
    pub layers_per_block: usize,
    pub mask_schedule: Vec<f64>,
    pub mode: Mode,
}

impl BimPlan {
    /// `B` blocks with the same ratio everywhere.
    pub fn uniform(spec: &ModelSpec, num_blocks: usize, ratio: f64) -> Result<Self> {
        Self::with_schedule(spec, vec![ratio; num_blocks])
    }

    /// One block per schedule entry.
    pub fn with_schedule(spec: &ModelSpec, schedule: Vec<f64>) -> Result<Self> {
        let b = schedule.len();
        if b == 0 || !spec.depth.is_multiple_of(b) {
            return Err(BimError::Config(format!(
                "encoder depth {} cannot be split into {b} equal blocks",
                spec.depth
            )));
        }
        let plan = Self {
            num_blocks: b,
            layers_per_block: spec.depth / b,
            mask_schedule: schedule,
            mode: Mode::Bim,
        };
        plan.validate(spec)?;
        Ok(plan)
    }

    pub fn mae(spec: &ModelSpec, ratio: f64) -> Result<Self> {
        let plan = Self {
            num_blocks: 1,
            layers_per_block: spec.depth,
            mask_schedule: vec![ratio],
            mode: Mode::Mae,
        };
        plan.validate(spec)?;
        Ok(plan)
    }

    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        if self.num_blocks == 0 || self.num_blocks * self.layers_per_block != spec.depth {
            return Err(BimError::Config(format!(
                "{} blocks of {} layers do not cover encoder depth {}",
                self.num_blocks, self.layers_per_block, spec.depth
            )));
        }
        if self.mask_schedule.len() != self.num_blocks {
            return Err(BimError::Config(format!(
                "mask schedule has {} entries for {} blocks",
                self.mask_schedule.len(),
                self.num_blocks
            )));
        }
        if let Some(r) = self.mask_schedule.iter().find(|r| !(0.0..1.0).contains(*r)) {
            return Err(BimError::Schedule(format!("mask ratio {r} outside [0, 1)")));
        }
        if self.mask_schedule.windows(2).any(|w| w[1] < w[0]) {
            return Err(BimError::Schedule(format!(
                "mask schedule {:?} must be non-decreasing",
                self.mask_schedule
            )));
        }
        if let Some(r) = self
            .mask_schedule
            .first()
            .filter(|&&r| keep_count(spec.num_patches(), r) == spec.num_patches())
        {
            return Err(BimError::Schedule(format!(
                "mask ratio {r} masks none of {} patches, leaving nothing to reconstruct",
                spec.num_patches()
            )));
        }
        if let Some(r) = self
            .mask_schedule
            .last()
            .filter(|&&r| keep_count(spec.num_patches(), r) == 0)
        {
            return Err(BimError::Schedule(format!(
                "mask ratio {r} leaves no visible token out of {}",
                spec.num_patches()
            )));
        }
        if self.mode == Mode::Mae && self.num_blocks != 1 {
            return Err(BimError::Config("an MAE plan has a single block".into()));
        }
        Ok(())
    }

    /// Mean of `1 - r_i`.
    pub fn mean_visible_fraction(&self) -> f64 {
        self.mask_schedule.iter().map(|r| 1.0 - r).sum::<f64>() / self.num_blocks as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_shapes() {
        let s = ModelSpec::toy();
        let p = BimPlan::uniform(&s, 4, 0.75).unwrap();
        assert_eq!(p.layers_per_block, 2);
        let mut s7 = s.clone();
        s7.depth = 7;
        assert!(matches!(BimPlan::uniform(&s7, 4, 0.75), Err(BimError::Config(_))));
    }

    #[test]
    fn schedule_must_be_non_decreasing() {
        let s = ModelSpec::toy();
        assert!(BimPlan::with_schedule(&s, vec![0.65, 0.70, 0.80, 0.85]).is_ok());
        assert!(matches!(
            BimPlan::with_schedule(&s, vec![0.8, 0.7, 0.8, 0.9]),
            Err(BimError::Schedule(_))
        ));
        assert!(BimPlan::with_schedule(&s, vec![0.75, 0.8, 0.9, 1.0]).is_err());
        // 64 patches at 0.99 keep none
        assert!(matches!(BimPlan::mae(&s, 0.99), Err(BimError::Schedule(_))));
        assert!(matches!(BimPlan::mae(&s, 0.0), Err(BimError::Schedule(_))));
    }
}

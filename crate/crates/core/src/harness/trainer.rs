//! The pretraining loop shared by the block-wise and end-to-end commands.

use std::io::Write;

use crate::engine::{train_step, BimPlan, Mode, Model, StepContext, StepReport};
use crate::error::{BimError, Result};
use crate::harness::checkpoint::{restore, snapshot, Checkpoint};
use crate::harness::config::{DataSource, TrainConfig};
use crate::harness::data::{epoch_order, gen_synthetic_dataset, Dataset};
use crate::harness::metrics::{MetricsRow, MetricsWriter, AGGREGATE_BLOCK};
use crate::harness::optim::{AdamW, LrSchedule};
use crate::memory::analytic_peak;
use crate::tensor::Scalar;

/// Allowed gap between the measured and the analytic step peak.
pub const PEAK_TOLERANCE: f64 = 0.10;

pub fn load_dataset(cfg: &TrainConfig) -> Result<Dataset> {
    let data = match &cfg.dataset {
        DataSource::Synthetic { count, seed } => gen_synthetic_dataset(&cfg.model, *count, *seed),
        DataSource::File(p) => Dataset::load(p)?,
    };
    data.check_spec(&cfg.model)?;
    Ok(data)
}

pub struct Trainer<T> {
    pub cfg: TrainConfig,
    pub plan: BimPlan,
    pub model: Model<T>,
    pub opt: AdamW<T>,
    pub data: Dataset,
    pub schedule: LrSchedule,
    pub steps_per_epoch: usize,
    /// Steps completed so far.
    pub step: u64,
    analytic_peak: usize,
    order: Option<(u64, Vec<usize>)>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        let data = load_dataset(&cfg)?;
        Self::with_dataset(cfg, data)
    }

    /// Batches are drawn without replacement; a trailing partial batch is
    /// dropped so every step sees `batch_size` images.
    pub fn with_dataset(cfg: TrainConfig, data: Dataset) -> Result<Self> {
        cfg.validate()?;
        data.check_spec(&cfg.model)?;
        let plan = cfg.plan()?;
        let steps_per_epoch = data.count / cfg.batch_size;
        if steps_per_epoch == 0 {
            return Err(BimError::Config(format!(
                "batch_size {} exceeds the {} images available",
                cfg.batch_size, data.count
            )));
        }
        let model = Model::new(&cfg.model, plan.num_blocks, cfg.seed)?;
        let analytic_peak = analytic_peak(&cfg.model, &plan, cfg.batch_size, T::DTYPE)?;
        Ok(Self {
            schedule: cfg.schedule(steps_per_epoch),
            opt: AdamW::new(cfg.adamw()),
            plan,
            model,
            data,
            steps_per_epoch,
            step: 0,
            analytic_peak,
            order: None,
            cfg,
        })
    }

    pub fn total_steps(&self) -> u64 {
        let full = (self.cfg.epochs * self.steps_per_epoch) as u64;
        if self.cfg.max_steps > 0 {
            full.min(self.cfg.max_steps)
        } else {
            full
        }
    }

    pub fn epoch_of(&self, step: u64) -> u64 {
        step / self.steps_per_epoch as u64
    }

    pub fn analytic_peak(&self) -> usize {
        self.analytic_peak
    }

    fn batch_indices(&mut self, step: u64) -> Vec<usize> {
        let epoch = self.epoch_of(step);
        if self.order.as_ref().map(|(e, _)| *e) != Some(epoch) {
            self.order = Some((epoch, epoch_order(self.data.count, self.cfg.seed, epoch)));
        }
        let order = &self.order.as_ref().unwrap().1;
        let j = (step % self.steps_per_epoch as u64) as usize * self.cfg.batch_size;
        order[j..j + self.cfg.batch_size].to_vec()
    }

    /// One optimizer step; checks the measured peak against the analytic
    /// model.
    pub fn step_once(&mut self) -> Result<(StepReport, f64)> {
        let step = self.step;
        let lr = self.schedule.lr_at(step);
        let idx = self.batch_indices(step);
        let images = self.data.batch::<T>(&idx)?;
        let ctx = StepContext {
            seed: self.cfg.seed,
            step,
        };
        let report = train_step(&mut self.model, &images, &self.plan, &mut self.opt, lr, ctx)?;
        let gap = (report.peak_bytes as f64 - self.analytic_peak as f64).abs() / self.analytic_peak as f64;
        if gap > PEAK_TOLERANCE {
            return Err(BimError::Contract(format!(
                "step {step}: measured peak {} B is {:.1}% away from the analytic {} B",
                report.peak_bytes,
                gap * 100.0,
                self.analytic_peak
            )));
        }
        self.step += 1;
        Ok((report, lr))
    }

    pub fn rows(&self, step: u64, report: &StepReport, lr: f64) -> Vec<MetricsRow> {
        let epoch = self.epoch_of(step);
        let mut rows: Vec<MetricsRow> = (0..report.block_losses.len())
            .map(|i| MetricsRow {
                step,
                epoch,
                block_id: i as i64,
                loss: report.block_losses[i],
                lr,
                live_bytes: report.live_after_release[i],
                peak_bytes: report.block_peak_bytes[i],
            })
            .collect();
        rows.push(MetricsRow {
            step,
            epoch,
            block_id: AGGREGATE_BLOCK,
            loss: report.mean_loss,
            lr,
            live_bytes: *report.live_after_release.last().unwrap_or(&0),
            peak_bytes: report.peak_bytes,
        });
        rows
    }

    /// Train until `until` steps are complete (capped by the schedule),
    /// writing metrics rows and calling `on_epoch_end` after each full epoch.
    pub fn run<W: Write>(
        &mut self,
        metrics: &mut MetricsWriter<W>,
        until: u64,
        mut on_epoch_end: impl FnMut(&Self, u64) -> Result<()>,
    ) -> Result<Vec<StepReport>> {
        let until = until.min(self.total_steps());
        let mut reports = Vec::new();
        while self.step < until {
            let step = self.step;
            let (report, lr) = self.step_once()?;
            for row in self.rows(step, &report, lr) {
                metrics.write(&row)?;
            }
            reports.push(report);
            if self.step.is_multiple_of(self.steps_per_epoch as u64) {
                on_epoch_end(self, self.epoch_of(self.step - 1))?;
            }
        }
        metrics.flush()?;
        Ok(reports)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        snapshot(&self.model, &self.opt, self.step)
    }

    pub fn resume_from(&mut self, c: &Checkpoint) -> Result<()> {
        if let Some(b) = c.meta("num_blocks") {
            if b as usize != self.model.num_blocks() {
                return Err(BimError::Incompatible(format!(
                    "checkpoint has {b} blocks, config has {}",
                    self.model.num_blocks()
                )));
            }
        }
        self.opt = AdamW::new(self.cfg.adamw());
        self.step = restore(c, &mut self.model, &mut self.opt)?;
        Ok(())
    }

    pub fn mode(&self) -> Mode {
        self.plan.mode
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::DType;

    fn cfg() -> TrainConfig {
        TrainConfig::parse(
            "preset=tiny\nnum_blocks=2\nmask_schedule=0.5,0.75\nbatch_size=4\ndataset_size=16\n\
             epochs=3\nwarmup_epochs=1\nbase_lr=0.05\ndtype=f64\nseed=3\n",
        )
        .unwrap()
    }

    #[test]
    fn resume_replays_bitwise() {
        let mut full = Trainer::<f64>::new(cfg()).unwrap();
        let mut sink = MetricsWriter::new(Vec::new()).unwrap();
        full.run(&mut sink, 10, |_, _| Ok(())).unwrap();

        let mut first = Trainer::<f64>::new(cfg()).unwrap();
        let mut s1 = MetricsWriter::new(Vec::new()).unwrap();
        first.run(&mut s1, 5, |_, _| Ok(())).unwrap();
        let bytes = first.checkpoint().to_bytes();

        let mut second = Trainer::<f64>::new(cfg()).unwrap();
        second.resume_from(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(second.step, 5);
        let mut s2 = MetricsWriter::new(Vec::new()).unwrap();
        second.run(&mut s2, 10, |_, _| Ok(())).unwrap();

        for ((_, a), (_, b)) in full.model.store.iter().zip(second.model.store.iter()) {
            assert!(a.value.bitwise_eq(&b.value), "{}", a.name);
        }
        let tail = |w: MetricsWriter<Vec<u8>>| String::from_utf8(w.into_inner()).unwrap();
        let full_text = tail(sink);
        let resumed = tail(s2);
        assert!(full_text.ends_with(resumed.split_once('\n').unwrap().1));
    }

    #[test]
    fn epochs_and_rows() {
        let mut t = Trainer::<f64>::new(cfg()).unwrap();
        assert_eq!(t.steps_per_epoch, 4);
        assert_eq!(t.total_steps(), 12);
        let mut ends = Vec::new();
        let mut sink = MetricsWriter::new(Vec::new()).unwrap();
        t.run(&mut sink, u64::MAX, |_, e| {
            ends.push(e);
            Ok(())
        })
        .unwrap();
        assert_eq!(ends, vec![0, 1, 2]);
        assert_eq!(sink.rows(), 12 * 3);
        assert_eq!(
            t.analytic_peak(),
            analytic_peak(&t.cfg.model, &t.plan, 4, DType::F64).unwrap()
        );
    }

    #[test]
    fn oversized_batch_is_rejected() {
        let mut c = cfg();
        c.batch_size = 32;
        assert!(matches!(Trainer::<f64>::new(c), Err(BimError::Config(_))));
    }
}

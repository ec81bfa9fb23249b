//! Command pipelines behind the `bim` binary. Every command writes its
//! outputs under one directory and fails on the first broken invariant.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use crate::engine::{Mode, Model};
use crate::error::{BimError, Result};
use crate::harness::checkpoint::{load_parameters, Checkpoint, META_PREFIX};
use crate::harness::config::TrainConfig;
use crate::harness::metrics::MetricsWriter;
use crate::harness::trainer::{load_dataset, Trainer, PEAK_TOLERANCE};
use crate::memory::{compare_peak, depth_trend, flop_estimate, FlopReport, MemoryReport};
use crate::ofa::{linear_probe, truncate_backbone, ProbeResult};
use crate::tensor::{DType, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Pretrain,
    BaselineMae,
    Probe,
    ExportBackbone,
    MemReport,
    FlopReport,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Pretrain => "pretrain",
            Command::BaselineMae => "baseline-mae",
            Command::Probe => "probe",
            Command::ExportBackbone => "export-backbone",
            Command::MemReport => "mem-report",
            Command::FlopReport => "flop-report",
        }
    }
}

pub const PROBE_HEADER: &str = "depth_index,train_accuracy,val_accuracy,epochs,config_hash";
pub const MEMORY_HEADER: &str =
    "mode,num_blocks,batch,analytic_peak_bytes,measured_peak_bytes,param_bytes,grad_bytes,optimizer_state_bytes,ratio_vs_mae";
pub const TREND_HEADER: &str = "depth,num_blocks,measured_ratio,analytic_ratio";
pub const FLOP_HEADER: &str =
    "block_id,mask_ratio,visible_fraction,linear_units,attention_units,encoder_flops,decoder_flops,linear_saving";

/// Files written by a command plus the in-memory results behind them.
#[derive(Debug, Clone, Default)]
pub struct RunArtifacts {
    pub out_dir: PathBuf,
    pub metrics: Option<PathBuf>,
    pub checkpoints: Vec<PathBuf>,
    pub reports: Vec<PathBuf>,
    /// Aggregate loss of every step run.
    pub losses: Vec<f64>,
    pub memory: Option<MemoryReport>,
    pub trend: Vec<MemoryReport>,
    pub flops: Option<FlopReport>,
    pub probes: Vec<ProbeResult>,
}

impl RunArtifacts {
    fn new(out: &Path) -> Self {
        Self {
            out_dir: out.to_path_buf(),
            ..Self::default()
        }
    }

    pub fn files(&self) -> impl Iterator<Item = &PathBuf> {
        self.metrics.iter().chain(&self.checkpoints).chain(&self.reports)
    }
}

pub fn run(cmd: Command, cfg: &TrainConfig, out: &Path) -> Result<RunArtifacts> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.txt"), cfg.to_text())?;
    let arts = match (cmd, cfg.dtype) {
        (Command::Pretrain, DType::F32) => pretrain::<f32>(cfg.clone(), out)?,
        (Command::Pretrain, DType::F64) => pretrain::<f64>(cfg.clone(), out)?,
        (Command::BaselineMae, dt) => {
            let mae = TrainConfig {
                mode: Mode::Mae,
                num_blocks: 1,
                ..cfg.clone()
            };
            match dt {
                DType::F32 => pretrain::<f32>(mae, out)?,
                DType::F64 => pretrain::<f64>(mae, out)?,
            }
        }
        (Command::ExportBackbone, DType::F32) => export_backbone::<f32>(cfg, out)?,
        (Command::ExportBackbone, DType::F64) => export_backbone::<f64>(cfg, out)?,
        (Command::Probe, DType::F32) => probe::<f32>(cfg, out)?,
        (Command::Probe, DType::F64) => probe::<f64>(cfg, out)?,
        (Command::MemReport, _) => mem_report(cfg, out)?,
        (Command::FlopReport, _) => flop_report(cfg, out)?,
    };
    if let Some(missing) = arts.files().find(|p| !p.exists()) {
        return Err(BimError::Contract(format!(
            "artifact {} was not written",
            missing.display()
        )));
    }
    Ok(arts)
}

fn pretrain<T: Scalar>(cfg: TrainConfig, out: &Path) -> Result<RunArtifacts> {
    let mut arts = RunArtifacts::new(out);
    let mut trainer = Trainer::<T>::new(cfg.clone())?;
    if let Some(path) = &cfg.resume {
        let c = Checkpoint::load(path)?;
        trainer.resume_from(&c)?;
    }
    let metrics_path = out.join("metrics.csv");
    let mut metrics = MetricsWriter::new(BufWriter::new(File::create(&metrics_path)?))?;
    let every = cfg.checkpoint_every;
    let mut saved = Vec::new();
    let reports = trainer.run(&mut metrics, u64::MAX, |t, epoch| {
        if every > 0 && (epoch + 1) % every as u64 == 0 {
            let p = out.join(format!("ckpt_epoch{epoch:04}.bimc"));
            t.checkpoint().save(&p)?;
            saved.push(p);
        }
        Ok(())
    })?;
    metrics.flush()?;
    arts.metrics = Some(metrics_path);
    arts.checkpoints = saved;
    arts.losses = reports.iter().map(|r| r.mean_loss).collect();

    let final_path = out.join("final.bimc");
    trainer.checkpoint().save(&final_path)?;
    arts.checkpoints.push(final_path);

    let flops = flop_estimate(&cfg.model, &trainer.plan, cfg.baseline_ratio)?;
    arts.reports.push(write_flop_csv(&flops, &out.join("flop_report.csv"))?);
    arts.flops = Some(flops);

    let mem = compare_peak(&cfg.model, &trainer.plan, cfg.batch_size)?;
    check_memory(&mem, false)?;
    arts.reports.push(write_memory_csv(
        &mem,
        trainer.plan.num_blocks,
        &out.join("memory_report.csv"),
    )?);
    arts.memory = Some(mem);
    Ok(arts)
}

fn export_backbone<T: Scalar>(cfg: &TrainConfig, out: &Path) -> Result<RunArtifacts> {
    let path = cfg
        .checkpoint
        .as_ref()
        .ok_or_else(|| BimError::Config("export-backbone needs checkpoint=<path>".into()))?;
    if cfg.prefix_blocks.is_empty() {
        return Err(BimError::Config(
            "export-backbone needs prefix_blocks=<k>[,k...]".into(),
        ));
    }
    let model = model_from_checkpoint::<T>(cfg, &Checkpoint::load(path)?)?;
    let mut arts = RunArtifacts::new(out);
    for &k in &cfg.prefix_blocks {
        let prefix = truncate_backbone(&model, k)?;
        let mut c = Checkpoint::new(T::DTYPE);
        for id in prefix.params() {
            let p = prefix.store.get(id);
            c.push(p.name.clone(), &p.value);
        }
        c.push_meta("prefix_blocks", k as f64);
        c.push_meta("num_blocks", model.num_blocks() as f64);
        let p = out.join(format!("backbone_k{k}.bimc"));
        c.save(&p)?;
        arts.checkpoints.push(p);
    }
    Ok(arts)
}

fn model_from_checkpoint<T: Scalar>(cfg: &TrainConfig, c: &Checkpoint) -> Result<Model<T>> {
    let blocks = c.meta("num_blocks").map_or(cfg.num_blocks, |b| b as usize);
    let mut model = Model::<T>::new(&cfg.model, blocks, cfg.seed)?;
    load_parameters(c, &mut model)?;
    Ok(model)
}

fn probe<T: Scalar>(cfg: &TrainConfig, out: &Path) -> Result<RunArtifacts> {
    let (model, depths) = match (&cfg.backbone, &cfg.checkpoint) {
        (Some(path), _) => {
            let c = Checkpoint::load(path)?;
            let k = c.meta("prefix_blocks").ok_or_else(|| {
                BimError::Incompatible(format!("{} has no {META_PREFIX}prefix_blocks", path.display()))
            })? as usize;
            (model_from_checkpoint::<T>(cfg, &c)?, vec![k])
        }
        (None, Some(path)) => {
            let model = model_from_checkpoint::<T>(cfg, &Checkpoint::load(path)?)?;
            let depths = if cfg.prefix_blocks.is_empty() {
                (1..=model.num_blocks()).collect()
            } else {
                cfg.prefix_blocks.clone()
            };
            (model, depths)
        }
        (None, None) => {
            return Err(BimError::Config(
                "probe needs backbone=<path> or checkpoint=<path>".into(),
            ))
        }
    };
    let data = load_dataset(cfg)?;
    let mut arts = RunArtifacts::new(out);
    let mut text = String::from(PROBE_HEADER);
    text.push('\n');
    for k in depths {
        let r = linear_probe(&truncate_backbone(&model, k)?, &data, &cfg.probe)?;
        for v in [r.train_accuracy, r.val_accuracy] {
            finite("probe accuracy", v)?;
        }
        writeln!(
            text,
            "{},{},{},{},{:016x}",
            r.depth_index, r.train_accuracy, r.val_accuracy, r.epochs, r.config_hash
        )
        .unwrap();
        arts.probes.push(r);
    }
    let p = out.join("probe.csv");
    fs::write(&p, text)?;
    arts.reports.push(p);
    Ok(arts)
}

fn mem_report(cfg: &TrainConfig, out: &Path) -> Result<RunArtifacts> {
    let plan = cfg.plan()?;
    let mut arts = RunArtifacts::new(out);
    let mem = compare_peak(&cfg.model, &plan, cfg.batch_size)?;
    check_memory(&mem, plan.mode == Mode::Bim && plan.num_blocks > 1)?;
    arts.reports
        .push(write_memory_csv(&mem, plan.num_blocks, &out.join("mem_report.csv"))?);
    arts.memory = Some(mem);
    if !cfg.trend_depths.is_empty() {
        let trend = depth_trend(
            &cfg.model,
            &cfg.trend_depths,
            plan.num_blocks,
            plan.mask_schedule[0],
            cfg.batch_size,
        )?;
        let mut text = String::from(TREND_HEADER);
        text.push('\n');
        for (d, r) in cfg.trend_depths.iter().zip(&trend) {
            check_memory(r, false)?;
            writeln!(
                text,
                "{d},{},{},{}",
                plan.num_blocks, r.ratio_vs_mae, r.analytic_ratio_vs_mae
            )
            .unwrap();
        }
        if plan.num_blocks > 1 && trend.windows(2).any(|w| w[1].ratio_vs_mae >= w[0].ratio_vs_mae) {
            return Err(BimError::Contract(format!(
                "peak ratio does not decrease with depth over {:?}",
                cfg.trend_depths
            )));
        }
        let p = out.join("mem_trend.csv");
        fs::write(&p, text)?;
        arts.reports.push(p);
        arts.trend = trend;
    }
    Ok(arts)
}

fn flop_report(cfg: &TrainConfig, out: &Path) -> Result<RunArtifacts> {
    let plan = cfg.plan()?;
    let flops = flop_estimate(&cfg.model, &plan, cfg.baseline_ratio)?;
    let mut arts = RunArtifacts::new(out);
    arts.reports.push(write_flop_csv(&flops, &out.join("flop_report.csv"))?);
    arts.flops = Some(flops);
    Ok(arts)
}

fn finite(what: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(BimError::Numeric(format!("{what} is {v}")))
    }
}

/// Analytic and measured peaks must agree; a multi-block plan must also
/// beat the end-to-end baseline when `require_saving` is set.
fn check_memory(m: &MemoryReport, require_saving: bool) -> Result<()> {
    for row in [&m.plan, &m.mae] {
        if row.relative_gap() > PEAK_TOLERANCE {
            return Err(BimError::Contract(format!(
                "{} analytic peak {} B is {:.1}% off the measured {} B",
                row.mode.name(),
                row.analytic_peak_bytes,
                row.relative_gap() * 100.0,
                row.measured_peak_bytes
            )));
        }
    }
    if require_saving && m.ratio_vs_mae >= 1.0 {
        return Err(BimError::Contract(format!(
            "block-wise peak is {:.3}x the end-to-end peak",
            m.ratio_vs_mae
        )));
    }
    Ok(())
}

fn write_memory_csv(m: &MemoryReport, blocks: usize, path: &Path) -> Result<PathBuf> {
    let mut text = String::from(MEMORY_HEADER);
    text.push('\n');
    for (row, b, ratio) in [(&m.plan, blocks, m.ratio_vs_mae), (&m.mae, 1, 1.0)] {
        writeln!(
            text,
            "{},{b},{},{},{},{},{},{},{ratio}",
            row.mode.name(),
            m.batch,
            row.analytic_peak_bytes,
            row.measured_peak_bytes,
            row.param_bytes,
            row.grad_bytes,
            row.optimizer_state_bytes
        )
        .unwrap();
    }
    fs::write(path, text)?;
    Ok(path.to_path_buf())
}

fn write_flop_csv(f: &FlopReport, path: &Path) -> Result<PathBuf> {
    let mut text = String::from(FLOP_HEADER);
    text.push('\n');
    let blocks = f.schedule.len();
    let layers = f.encoder_linear_units / f.block_units.max(f64::MIN_POSITIVE);
    for i in 0..blocks {
        let vis = f.visible_fractions[i];
        writeln!(
            text,
            "{i},{},{vis},{},{},{},{},",
            f.schedule[i],
            layers * vis,
            layers * vis * vis,
            f.block_encoder_flops[i],
            f.block_decoder_flops[i]
        )
        .unwrap();
    }
    writeln!(
        text,
        "-1,,{},{},{},{},{},{}",
        f.block_units / blocks as f64,
        f.encoder_linear_units,
        f.encoder_attention_units,
        f.encoder_linear_flops + f.encoder_attention_flops,
        f.decoder_flops,
        f.linear_saving
    )
    .unwrap();
    fs::write(path, text)?;
    Ok(path.to_path_buf())
}

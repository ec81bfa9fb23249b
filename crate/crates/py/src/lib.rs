//! Python bindings: configuration checks, the harness subcommands, and the
//! analytic memory and compute models.

use pyo3::prelude::*;

#[pymodule]
pub mod bim_lab {
    use std::path::Path;

    use bim_core::engine::BimPlan;
    use bim_core::harness::config::{valid_keys as config_keys, TrainConfig};
    use bim_core::harness::run::{run as run_command, Command};
    use bim_core::memory::{analytic_peak as peak, flop_estimate};
    use bim_core::ofa;
    use bim_core::tensor::DType;
    use bim_core::vit::ModelSpec;
    use bim_core::BimError;
    use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
    use pyo3::prelude::*;

    const COMMANDS: [Command; 6] = [
        Command::Pretrain,
        Command::BaselineMae,
        Command::Probe,
        Command::ExportBackbone,
        Command::MemReport,
        Command::FlopReport,
    ];

    fn py_err(e: BimError) -> PyErr {
        let msg = e.to_string();
        match e {
            BimError::Config(_) | BimError::Schedule(_) | BimError::Dimension { .. } | BimError::Contract(_) => {
                PyValueError::new_err(msg)
            }
            BimError::Io(_) | BimError::Format { .. } | BimError::Incompatible(_) => PyIOError::new_err(msg),
            _ => PyRuntimeError::new_err(msg),
        }
    }

    fn spec(preset: &str) -> PyResult<ModelSpec> {
        ModelSpec::preset(preset).ok_or_else(|| PyValueError::new_err(format!("unknown preset {preset:?}")))
    }

    /// Files and headline numbers of one subcommand run.
    #[pyclass(frozen, get_all)]
    struct Artifacts {
        out_dir: String,
        files: Vec<String>,
        losses: Vec<f64>,
        memory_ratio: Option<f64>,
        linear_saving: Option<f64>,
        /// `(depth_index, val_accuracy)` per probed prefix.
        probes: Vec<(usize, f64)>,
    }

    #[pyfunction]
    fn valid_keys() -> Vec<&'static str> {
        config_keys()
    }

    /// Parses and validates a key=value config, returning its canonical text.
    #[pyfunction]
    fn normalize_config(text: &str) -> PyResult<String> {
        let cfg = TrainConfig::parse(text).map_err(py_err)?;
        cfg.validate().map_err(py_err)?;
        Ok(cfg.to_text())
    }

    #[pyfunction]
    #[pyo3(signature = (command, config, out_dir, seed=None))]
    fn run(py: Python<'_>, command: &str, config: &str, out_dir: &str, seed: Option<u64>) -> PyResult<Artifacts> {
        let cmd = COMMANDS
            .into_iter()
            .find(|c| c.name() == command)
            .ok_or_else(|| PyValueError::new_err(format!("unknown command {command:?}")))?;
        let mut cfg = TrainConfig::parse(config).map_err(py_err)?;
        if let Some(s) = seed {
            cfg = cfg.with_seed(s);
        }
        let arts = py
            .detach(|| run_command(cmd, &cfg, Path::new(out_dir)))
            .map_err(py_err)?;
        Ok(Artifacts {
            out_dir: arts.out_dir.display().to_string(),
            files: arts.files().map(|p| p.display().to_string()).collect(),
            losses: arts.losses.clone(),
            memory_ratio: arts.memory.as_ref().map(|m| m.ratio_vs_mae),
            linear_saving: arts.flops.as_ref().map(|f| f.linear_saving),
            probes: arts.probes.iter().map(|p| (p.depth_index, p.val_accuracy)).collect(),
        })
    }

    /// Analytic peak activation bytes of one step under a mask schedule
    /// (one ratio per block).
    #[pyfunction]
    #[pyo3(signature = (preset, schedule, batch, dtype="f32"))]
    fn analytic_peak(preset: &str, schedule: Vec<f64>, batch: usize, dtype: &str) -> PyResult<usize> {
        let s = spec(preset)?;
        let dt = match dtype {
            "f32" => DType::F32,
            "f64" => DType::F64,
            other => {
                return Err(PyValueError::new_err(format!(
                    "dtype must be f32 or f64, got {other:?}"
                )))
            }
        };
        let plan = BimPlan::with_schedule(&s, schedule).map_err(py_err)?;
        peak(&s, &plan, batch, dt).map_err(py_err)
    }

    /// Encoder linear-term saving of `schedule` against a fixed ratio.
    #[pyfunction]
    fn linear_saving(preset: &str, schedule: Vec<f64>, baseline_ratio: f64) -> PyResult<f64> {
        let s = spec(preset)?;
        let plan = BimPlan::with_schedule(&s, schedule).map_err(py_err)?;
        Ok(flop_estimate(&s, &plan, baseline_ratio).map_err(py_err)?.linear_saving)
    }

    /// Saving of one joint run over independent runs at every block boundary.
    #[pyfunction]
    #[pyo3(signature = (preset, num_blocks, mask_ratio, include_decoder=false))]
    fn training_cost_saving(preset: &str, num_blocks: usize, mask_ratio: f64, include_decoder: bool) -> PyResult<f64> {
        let s = spec(preset)?;
        let plan = BimPlan::uniform(&s, num_blocks, mask_ratio).map_err(py_err)?;
        let depths: Vec<usize> = (1..=num_blocks).map(|k| k * plan.layers_per_block).collect();
        ofa::training_cost_saving(&s, &depths, &plan, include_decoder).map_err(py_err)
    }
}

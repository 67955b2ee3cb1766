//! Python bindings for the driving stack: scenario simulation, the expert,
//! penalty evaluation, metrics, and the full pipeline commands.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use std::path::PathBuf;
use towndrive::attacks::DotPattern;
use towndrive::config::RunConfig;
use towndrive::expert::{self, ExpertConfig};
use towndrive::losses::{self, PenaltyContext};
use towndrive::metrics::{self, InfractionCounts, RouteResult};
use towndrive::model::Model;
use towndrive::runner::{self, AttackKind};
use towndrive::townsim;

fn runtime_err<E: std::fmt::Display>(e: E) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn parse_waypoints(wps: Vec<(f64, f64)>) -> Vec<[f64; 2]> {
    wps.into_iter().map(|(x, y)| [x, y]).collect()
}

fn context(is_red: bool, y_stop: f64, is_stop_sign: bool, delta_heading: f64) -> PenaltyContext {
    PenaltyContext {
        is_red: if is_red { 1.0 } else { 0.0 },
        y_stop,
        is_stop_sign: if is_stop_sign { 1.0 } else { 0.0 },
        delta_heading,
        ..PenaltyContext::default()
    }
}

/// Exact penalty values for four ego-frame waypoints.
#[pyfunction]
#[pyo3(signature = (waypoints, is_red=false, y_stop=f64::INFINITY, is_stop_sign=false, delta_heading=0.0))]
fn penalties(
    waypoints: Vec<(f64, f64)>,
    is_red: bool,
    y_stop: f64,
    is_stop_sign: bool,
    delta_heading: f64,
) -> PyResult<(f64, f64, f64)> {
    let wps = parse_waypoints(waypoints);
    if wps.len() < 2 {
        return Err(PyValueError::new_err("need at least two waypoints"));
    }
    let mut ctx = context(is_red, y_stop, is_stop_sign, delta_heading);
    ctx.c = vec![1.0 / wps.len() as f64; wps.len()];
    Ok((
        losses::red_light_penalty_value(&wps, &ctx),
        losses::stop_sign_penalty_value(&wps, &ctx),
        losses::curvature_speed_penalty_value(&wps, &ctx),
    ))
}

/// Symmetric KL divergence between diagonal Gaussians (means, variances).
#[pyfunction]
fn sym_kl(mu1: Vec<f64>, var1: Vec<f64>, mu2: Vec<f64>, var2: Vec<f64>) -> PyResult<f64> {
    if mu1.len() != mu2.len() || var1.len() != var2.len() || mu1.len() != var1.len() {
        return Err(PyValueError::new_err("dimension mismatch"));
    }
    if var1.iter().chain(&var2).any(|v| *v <= 0.0) {
        return Err(PyValueError::new_err("variances must be positive"));
    }
    Ok(losses::sym_kl_value(&mu1, &var1, &mu2, &var2))
}

/// Infraction score from (n_ped, n_veh, n_stat, n_red, n_stop).
#[pyfunction]
fn infraction_score(n_ped: u32, n_veh: u32, n_stat: u32, n_red: u32, n_stop: u32) -> f64 {
    metrics::infraction_score(&InfractionCounts {
        n_ped,
        n_veh,
        n_stat,
        n_red,
        n_stop,
    })
}

/// Driving score (%) from [(completion, (n_ped, n_veh, n_stat, n_red, n_stop))].
#[pyfunction]
fn driving_score(routes: Vec<(f64, (u32, u32, u32, u32, u32))>) -> PyResult<f64> {
    if routes.is_empty() {
        return Err(PyValueError::new_err("need at least one route"));
    }
    let results: Vec<RouteResult> = routes
        .into_iter()
        .map(|(c, (p, v, s, r, st))| {
            if !(0.0..=1.0).contains(&c) {
                return Err(PyValueError::new_err("completion must lie in [0,1]"));
            }
            Ok(RouteResult::new(
                c,
                InfractionCounts {
                    n_ped: p,
                    n_veh: v,
                    n_stat: s,
                    n_red: r,
                    n_stop: st,
                },
            ))
        })
        .collect::<PyResult<_>>()?;
    Ok(metrics::driving_score(&results))
}

/// Run the expert on one scenario file; returns (completion, n_infractions,
/// n_frames, rejected).
#[pyfunction]
#[pyo3(signature = (scenario_path, seed=0))]
fn run_expert(scenario_path: PathBuf, seed: u64) -> PyResult<(f64, usize, usize, bool)> {
    let sc = townsim::load_scenario(&scenario_path).map_err(runtime_err)?;
    let ep = expert::collect_episode(&sc, &ExpertConfig::default(), seed);
    Ok((ep.completion, ep.events.len(), ep.frames.len(), ep.rejected))
}

#[pyclass(name = "Pipeline")]
struct Pipeline {
    cfg: RunConfig,
}

#[pymethods]
impl Pipeline {
    #[new]
    #[pyo3(signature = (config_path=None))]
    fn new(config_path: Option<PathBuf>) -> PyResult<Self> {
        let cfg = match config_path {
            Some(p) => RunConfig::load(&p).map_err(runtime_err)?,
            None => RunConfig::default(),
        };
        cfg.validate().map_err(runtime_err)?;
        Ok(Self { cfg })
    }

    fn set(&mut self, text: &str) -> PyResult<()> {
        let merged = format!("{}{}\n", self.cfg.serialize(), text);
        self.cfg = RunConfig::parse(&merged).map_err(runtime_err)?;
        Ok(())
    }

    fn config(&self) -> String {
        self.cfg.serialize()
    }

    fn collect(&self) -> PyResult<String> {
        Ok(runner::cmd_collect(&self.cfg)
            .map_err(runtime_err)?
            .render())
    }

    fn train(&self) -> PyResult<String> {
        Ok(runner::cmd_train(&self.cfg)
            .map_err(runtime_err)?
            .display()
            .to_string())
    }

    #[pyo3(signature = (checkpoint=None))]
    fn eval(&self, checkpoint: Option<PathBuf>) -> PyResult<String> {
        let ckpt = checkpoint.unwrap_or_else(|| self.cfg.out_dir.join("model.ckpt"));
        runner::cmd_eval(&self.cfg, &ckpt).map_err(runtime_err)
    }

    #[pyo3(signature = (kind, checkpoint=None))]
    fn attack(&self, kind: &str, checkpoint: Option<PathBuf>) -> PyResult<String> {
        let ckpt = checkpoint.unwrap_or_else(|| self.cfg.out_dir.join("model.ckpt"));
        let kind = match kind {
            "fgsm" => AttackKind::Fgsm,
            "dot" => AttackKind::Dot,
            other => {
                return Err(PyValueError::new_err(format!(
                    "unknown attack kind '{other}'; expected fgsm or dot"
                )))
            }
        };
        runner::cmd_attack(&self.cfg, &ckpt, kind).map_err(runtime_err)
    }

    fn score(&self, files: Vec<PathBuf>) -> PyResult<String> {
        runner::cmd_score(&files).map_err(runtime_err)
    }

    /// Parameter count of the configured model.
    fn param_count(&self) -> usize {
        self.cfg.model_config().param_count()
    }

    /// Initialize (or load) a model and report whether a checkpoint exists.
    fn checkpoint_exists(&self) -> bool {
        self.cfg.out_dir.join("model.ckpt").exists()
    }
}

/// Load a checkpoint and report its parameter count (sanity hook for tests).
#[pyfunction]
fn checkpoint_param_count(path: PathBuf) -> PyResult<usize> {
    let model = Model::load(&path, RunConfig::default().model_config()).map_err(runtime_err)?;
    Ok(model.params.iter().map(|p| p.len()).sum())
}

/// Number of dots in a saved pattern file.
#[pyfunction]
fn dot_count(path: PathBuf) -> PyResult<usize> {
    Ok(DotPattern::load(&path).map_err(runtime_err)?.dots.len())
}

#[pymodule]
fn towndrive_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(penalties, m)?)?;
    m.add_function(wrap_pyfunction!(sym_kl, m)?)?;
    m.add_function(wrap_pyfunction!(infraction_score, m)?)?;
    m.add_function(wrap_pyfunction!(driving_score, m)?)?;
    m.add_function(wrap_pyfunction!(run_expert, m)?)?;
    m.add_function(wrap_pyfunction!(checkpoint_param_count, m)?)?;
    m.add_function(wrap_pyfunction!(dot_count, m)?)?;
    m.add_class::<Pipeline>()?;
    Ok(())
}

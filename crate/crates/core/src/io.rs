//! Experiment configs and CSV/JSON persistence.
//!
//! Matrix CSV: a `rows,cols` header line, then one line per row with values
//! in `{:.16e}` (17 significant digits, lossless for `f64`).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{tau_threshold, DatasetConfig, DatasetSpec, StepImbalanceSpec, Temperature};
use crate::ufm_solver::SolverConfig;

/// Floor of the default temperature.
pub const DEFAULT_TAU_FLOOR: f64 = 2.0;
/// Default temperature as a multiple of the collapse threshold.
pub const DEFAULT_TAU_FACTOR: f64 = 1.1;

/// Experiment description read by every solving subcommand.
///
/// Defaults: `tau = max(2, 1.1 * collapse threshold)`, `d = k + 1`,
/// `restarts = 1`, solver settings from [`SolverConfig::default`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d: Option<usize>,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
}

fn default_restarts() -> usize {
    1
}

/// A config with every default filled in, plus the objects it describes.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub dataset: DatasetSpec,
    pub step: Option<StepImbalanceSpec>,
    pub tau: Temperature,
    pub d: usize,
}

fn at(prefix: &str, e: Error) -> Error {
    match e {
        Error::Config { path, message } => Error::Config {
            path: if path.is_empty() {
                prefix.to_string()
            } else {
                format!("{prefix}.{path}")
            },
            message,
        },
        Error::InvalidSpec { field, reason } => Error::Config {
            path: format!("{prefix}.{field}"),
            message: reason,
        },
        Error::InvalidDataset { violations } => Error::Config {
            path: prefix.to_string(),
            message: violations.join("; "),
        },
        other => other,
    }
}

fn config_err(path: &str, message: impl Into<String>) -> Error {
    Error::Config {
        path: path.to_string(),
        message: message.into(),
    }
}

impl ExperimentConfig {
    pub fn new(dataset: DatasetConfig) -> Self {
        Self {
            dataset,
            tau: None,
            d: None,
            solver: SolverConfig::default(),
            restarts: 1,
        }
    }

    /// Parses JSON; errors carry the JSON path of the offending value.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            config_err(&path, e.into_inner().to_string())
        })
    }

    /// Pretty JSON with a trailing newline. Loading and saving again gives
    /// the same bytes.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    /// Validates the config and materializes the defaults.
    pub fn resolve(&self) -> Result<Experiment> {
        let dataset = self.dataset.resolve().map_err(|e| at("dataset", e))?;
        dataset.ensure_valid().map_err(|e| at("dataset", e))?;
        if dataset.k() < 2 {
            return Err(config_err("dataset.k", "need at least 2 classes"));
        }
        let tau = match self.tau {
            Some(t) => Temperature::new(t).map_err(|e| match e {
                Error::InvalidSpec { reason, .. } => config_err("tau", reason),
                other => other,
            })?,
            None => {
                let threshold = tau_threshold(&dataset)?;
                let t = DEFAULT_TAU_FLOOR.max(DEFAULT_TAU_FACTOR * threshold);
                log::info!(
                    "tau not given: using max({DEFAULT_TAU_FLOOR}, {DEFAULT_TAU_FACTOR} x threshold {threshold:.6}) = {t:.6}"
                );
                Temperature::new(t)?
            }
        };
        let d = self.d.unwrap_or(dataset.k() + 1);
        if d == 0 {
            return Err(config_err("d", "must be at least 1"));
        }
        self.solver.check().map_err(|e| at("solver", e))?;
        if self.restarts == 0 {
            return Err(config_err("restarts", "must be at least 1"));
        }
        let config = ExperimentConfig {
            tau: Some(tau.value()),
            d: Some(d),
            ..self.clone()
        };
        Ok(Experiment {
            step: self.dataset.step_spec(),
            config,
            dataset,
            tau,
            d,
        })
    }
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })?;
    ExperimentConfig::from_json(&text)
}

pub fn save_config(config: &ExperimentConfig, path: &Path) -> Result<()> {
    fs::write(path, config.to_json())?;
    Ok(())
}

pub fn matrix_to_csv(m: &DMatrix<f64>) -> String {
    let mut out = format!("{},{}\n", m.nrows(), m.ncols());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if j > 0 {
                out.push(',');
            }
            write!(out, "{:.16e}", m[(i, j)]).expect("write to string");
        }
        out.push('\n');
    }
    out
}

pub fn matrix_from_csv(text: &str) -> Result<DMatrix<f64>> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Csv("empty input".to_string()))?;
    let dims: Vec<usize> = header
        .split(',')
        .map(|s| s.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Csv(format!("line 1: bad header `{header}`: {e}")))?;
    let [rows, cols] = dims[..] else {
        return Err(Error::Csv(format!(
            "line 1: expected `rows,cols`, got `{header}`"
        )));
    };
    let mut values = Vec::with_capacity(rows * cols);
    let mut seen = 0;
    for (idx, line) in lines {
        let lineno = idx + 1;
        let row: Vec<f64> = line
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Csv(format!("line {lineno}: {e}")))?;
        if row.len() != cols {
            return Err(Error::Csv(format!(
                "line {lineno}: expected {cols} values, got {}",
                row.len()
            )));
        }
        values.extend(row);
        seen += 1;
    }
    if seen != rows {
        return Err(Error::Csv(format!("expected {rows} rows, got {seen}")));
    }
    Ok(DMatrix::from_row_slice(rows, cols, &values))
}

pub fn write_matrix(m: &DMatrix<f64>, path: &Path) -> Result<()> {
    fs::write(path, matrix_to_csv(m))?;
    Ok(())
}

pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let text = fs::read_to_string(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })?;
    matrix_from_csv(&text)
}

/// `iter,loss,proj_grad_norm` rows; a missing norm is written as an empty
/// field.
pub fn trace_csv(loss: &[f64], pg: Option<&[f64]>) -> String {
    let mut out = String::from("iter,loss,proj_grad_norm\n");
    for (i, l) in loss.iter().enumerate() {
        match pg.and_then(|p| p.get(i)) {
            Some(g) => writeln!(out, "{i},{l:.16e},{g:.16e}"),
            None => writeln!(out, "{i},{l:.16e},"),
        }
        .expect("write to string");
    }
    out
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

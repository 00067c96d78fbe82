//! Artifacts: atomic writes, CSV matrices, the report and the model file.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use hetfactor::baselines::{EwmaModel, NonFactorModel};
use hetfactor::{FactorModelParams, Family, FitReport, SpatioTemporalParams};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::config::{ModelKind, RunConfig};
use crate::error::{CliError, Result};

/// Writes through a temporary file in the target directory, then renames.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| CliError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| CliError::io(tmp.path(), e))?;
    tmp.as_file().sync_all().map_err(|e| CliError::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| CliError::io(path, e.error))?;
    Ok(())
}

/// Collects the artifacts of one command in an output directory.
pub struct OutputDir {
    dir: PathBuf,
    written: Vec<String>,
}

impl OutputDir {
    pub fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        atomic_write(&self.dir.join(name), bytes)?;
        self.written.push(name.to_string());
        Ok(())
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_vec_pretty(value).map_err(|e| CliError::Numeric(e.to_string()))?;
        text.push(b'\n');
        self.write(name, &text)
    }

    pub fn table(&mut self, name: &str, header: &[String], rows: &[Vec<String>]) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| CliError::Data(e.to_string());
        w.write_record(header).map_err(err)?;
        for r in rows {
            w.write_record(r).map_err(err)?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::Data(e.to_string()))?;
        self.write(name, &bytes)
    }

    /// A matrix with labelled rows and columns.
    pub fn matrix(&mut self, name: &str, corner: &str, rows: &[String], cols: &[String], m: &DMatrix<f64>) -> Result<()> {
        let header: Vec<String> = std::iter::once(corner.to_string()).chain(cols.iter().cloned()).collect();
        let body: Vec<Vec<String>> = (0..m.nrows())
            .map(|i| std::iter::once(rows[i].clone()).chain(m.row(i).iter().map(|v| v.to_string())).collect())
            .collect();
        self.table(name, &header, &body)
    }

    pub fn written(&self) -> &[String] {
        &self.written
    }
}

pub fn labels(prefix: &str, n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("{prefix}{i}")).collect()
}

/// Fitted model as stored in `model.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelFile {
    Factor {
        model: ModelKind,
        family: Family,
        names: Vec<String>,
        params: FactorModelParams,
    },
    SpatioTemporal {
        model: ModelKind,
        q_labels: Vec<String>,
        p_labels: Vec<String>,
        params: SpatioTemporalParams,
    },
    Ewma {
        names: Vec<String>,
        times: Vec<f64>,
        model: EwmaModel,
    },
    Nonfactor {
        names: Vec<String>,
        model: NonFactorModel,
    },
}

impl ModelFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }
}

/// `report.json`. Every field is always present; inapplicable ones are
/// null or empty.
#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub command: String,
    pub model: Option<ModelKind>,
    pub n: usize,
    pub q: usize,
    pub p: Option<usize>,
    pub k: Option<usize>,
    pub k_hat: Option<usize>,
    pub h_hat: Option<f64>,
    /// (K, mean validation score)
    pub v_table: Vec<(usize, f64)>,
    /// (K, score of each split; null where the fit failed)
    pub split_scores: Vec<(usize, Vec<Option<f64>>)>,
    pub trace: Vec<f64>,
    pub bandwidth_trace: Vec<f64>,
    pub iterations: Option<usize>,
    pub converged: Option<bool>,
    pub final_objective: Option<f64>,
    pub metrics: BTreeMap<String, f64>,
    pub warnings: Vec<String>,
    pub config: RunConfig,
    pub outputs: Vec<String>,
}

impl Report {
    pub fn new(command: &str, config: &RunConfig) -> Self {
        Self {
            command: command.to_string(),
            model: None,
            n: 0,
            q: 0,
            p: None,
            k: None,
            k_hat: None,
            h_hat: None,
            v_table: Vec::new(),
            split_scores: Vec::new(),
            trace: Vec::new(),
            bandwidth_trace: Vec::new(),
            iterations: None,
            converged: None,
            final_objective: None,
            metrics: BTreeMap::new(),
            warnings: Vec::new(),
            config: config.clone(),
            outputs: Vec::new(),
        }
    }

    pub fn with_fit(&mut self, r: &FitReport) {
        self.trace = r.trace.clone();
        self.bandwidth_trace = r.bandwidth_trace.clone();
        self.iterations = Some(r.iterations);
        self.converged = Some(r.converged);
        self.final_objective = Some(r.final_objective());
    }

    /// Writes `report.json` last, listing everything written before it.
    pub fn finish(mut self, out: &mut OutputDir, seconds: f64) -> Result<()> {
        out.json("timings.json", &BTreeMap::from([("total_seconds", seconds)]))?;
        self.outputs = out.written().to_vec();
        self.outputs.push("report.json".into());
        out.json("report.json", &self)
    }
}

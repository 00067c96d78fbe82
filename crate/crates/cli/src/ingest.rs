//! CSV input in the wide (`t,<names>`) and long (`t,p,q,value`) layouts.
//! Long-layout labels keep their order of first appearance.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use hetfactor::{MatrixObservations, Observations, TimePoints};
use nalgebra::DMatrix;

use crate::config::Layout;
use crate::error::{CliError, Result};

/// Data ready for fitting. For the long layout `panel` holds the Q×P
/// matrices and `obs` their column-major flattening.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub names: Vec<String>,
    pub times: TimePoints,
    pub obs: Observations,
    pub panel: Option<Panel>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    pub q_labels: Vec<String>,
    pub p_labels: Vec<String>,
    pub y: MatrixObservations,
}

fn reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    let file = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    Ok(csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file))
}

fn parse(field: &str, what: &str, line: u64) -> Result<f64> {
    let v: f64 = field
        .parse()
        .map_err(|_| CliError::Data(format!("line {line}: {what} `{field}` is not a number")))?;
    if !v.is_finite() {
        return Err(CliError::Data(format!("line {line}: {what} is not finite")));
    }
    Ok(v)
}

fn csv_error(path: &Path, e: csv::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

pub fn read(path: &Path, layout: Layout) -> Result<Dataset> {
    match layout {
        Layout::Wide => read_wide(path),
        Layout::Long => read_long(path),
    }
}

pub fn read_wide(path: &Path) -> Result<Dataset> {
    let mut rdr = reader(path)?;
    let header = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
    if header.get(0) != Some("t") || header.len() < 2 {
        return Err(CliError::Data(format!(
            "{}: wide layout needs a header `t,<name1>,...`",
            path.display()
        )));
    }
    let names: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    check_names(&names)?;
    let mut rows: Vec<(f64, Vec<f64>)> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != header.len() {
            return Err(CliError::Data(format!("line {line}: expected {} cells", header.len())));
        }
        let t = parse(&rec[0], "t", line)?;
        let values = (1..rec.len())
            .map(|j| parse(&rec[j], &names[j - 1], line))
            .collect::<Result<Vec<_>>>()?;
        rows.push((t, values));
    }
    if rows.is_empty() {
        return Err(CliError::Data(format!("{}: no data rows", path.display())));
    }
    let mut warnings = Vec::new();
    if rows.windows(2).any(|w| w[1].0 < w[0].0) {
        warnings.push("time column is not sorted; rows were reordered".to_string());
        rows.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    if let Some(w) = rows.windows(2).find(|w| w[1].0 == w[0].0) {
        return Err(CliError::Data(format!("duplicate time point t = {}", w[0].0)));
    }
    let y = DMatrix::from_fn(rows.len(), names.len(), |n, q| rows[n].1[q]);
    Ok(Dataset {
        names,
        times: TimePoints::new(rows.iter().map(|r| r.0).collect())?,
        obs: Observations::new(y)?,
        panel: None,
        warnings,
    })
}

fn intern(labels: &mut Vec<String>, index: &mut HashMap<String, usize>, label: &str) -> usize {
    *index.entry(label.to_string()).or_insert_with(|| {
        labels.push(label.to_string());
        labels.len() - 1
    })
}

pub fn read_long(path: &Path) -> Result<Dataset> {
    let mut rdr = reader(path)?;
    let header = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
    if header.iter().collect::<Vec<_>>() != ["t", "p", "q", "value"] {
        return Err(CliError::Data(format!("{}: long layout needs the header `t,p,q,value`", path.display())));
    }
    let (mut p_labels, mut q_labels) = (Vec::new(), Vec::new());
    let (mut p_index, mut q_index) = (HashMap::new(), HashMap::new());
    let mut cells: Vec<(f64, usize, usize, f64, u64)> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        let t = parse(&rec[0], "t", line)?;
        let p = intern(&mut p_labels, &mut p_index, &rec[1]);
        let q = intern(&mut q_labels, &mut q_index, &rec[2]);
        cells.push((t, p, q, parse(&rec[3], "value", line)?, line));
    }
    if cells.is_empty() {
        return Err(CliError::Data(format!("{}: no data rows", path.display())));
    }
    let mut times: Vec<f64> = cells.iter().map(|c| c.0).collect();
    times.sort_by(f64::total_cmp);
    times.dedup();
    let (qn, pn) = (q_labels.len(), p_labels.len());
    let mut panel: Vec<DMatrix<Option<f64>>> = vec![DMatrix::from_element(qn, pn, None); times.len()];
    for &(t, p, q, v, line) in &cells {
        let n = times.partition_point(|&s| s < t);
        if panel[n][(q, p)].replace(v).is_some() {
            return Err(CliError::Data(format!(
                "line {line}: duplicate cell t = {t}, p = {}, q = {}",
                p_labels[p], q_labels[q]
            )));
        }
    }
    let mut gaps = Vec::new();
    for (n, m) in panel.iter().enumerate() {
        for p in 0..pn {
            for q in 0..qn {
                if m[(q, p)].is_none() {
                    gaps.push(format!("(t = {}, p = {}, q = {})", times[n], p_labels[p], q_labels[q]));
                }
            }
        }
    }
    if !gaps.is_empty() {
        let shown = gaps.iter().take(10).cloned().collect::<Vec<_>>().join(", ");
        let more = if gaps.len() > 10 { format!(" and {} more", gaps.len() - 10) } else { String::new() };
        return Err(CliError::Data(format!("{} missing cells: {shown}{more}", gaps.len())));
    }
    let mats: Vec<DMatrix<f64>> = panel.into_iter().map(|m| m.map(|v| v.expect("checked"))).collect();
    assemble(times, q_labels, p_labels, mats, Vec::new())
}

fn flat_names(q_labels: &[String], p_labels: &[String]) -> Vec<String> {
    if p_labels.len() == 1 {
        return q_labels.to_vec();
    }
    let mut out = Vec::with_capacity(q_labels.len() * p_labels.len());
    for p in p_labels {
        for q in q_labels {
            out.push(format!("{q}@{p}"));
        }
    }
    out
}

fn assemble(
    times: Vec<f64>,
    q_labels: Vec<String>,
    p_labels: Vec<String>,
    mats: Vec<DMatrix<f64>>,
    warnings: Vec<String>,
) -> Result<Dataset> {
    let y = MatrixObservations::new(mats)?;
    Ok(Dataset {
        names: flat_names(&q_labels, &p_labels),
        times: TimePoints::new(times)?,
        obs: Observations::new(y.flattened())?,
        panel: Some(Panel { q_labels, p_labels, y }),
        warnings,
    })
}

/// r_n = log(s_n / s_{n-1}), stamped with the later time.
pub fn log_returns(ds: Dataset) -> Result<Dataset> {
    let y = ds.obs.y();
    let n = y.nrows();
    if n < 2 {
        return Err(CliError::Data("log-returns need at least two rows".into()));
    }
    if y.iter().any(|v| *v <= 0.0) {
        return Err(CliError::Data("log-returns need strictly positive prices".into()));
    }
    let r = DMatrix::from_fn(n - 1, y.ncols(), |i, j| (y[(i + 1, j)] / y[(i, j)]).ln());
    let times = ds.times.as_slice()[1..].to_vec();
    rebuild(ds, times, r)
}

/// Clamps every series to ±k standard deviations estimated on `rows`.
pub fn trim(ds: Dataset, k: f64, rows: usize) -> Result<Dataset> {
    let y = ds.obs.y();
    let rows = rows.min(y.nrows());
    if rows < 2 {
        return Err(CliError::Data("trimming needs at least two training rows".into()));
    }
    let mut out = y.clone();
    for j in 0..y.ncols() {
        let col = y.column(j).rows(0, rows).into_owned();
        let mean = col.mean();
        let sd = (col.map(|v| (v - mean).powi(2)).sum() / (rows - 1) as f64).sqrt();
        let bound = k * sd;
        for v in out.column_mut(j).iter_mut() {
            *v = v.clamp(-bound, bound);
        }
    }
    let times = ds.times.as_slice().to_vec();
    rebuild(ds, times, out)
}

fn rebuild(ds: Dataset, times: Vec<f64>, y: DMatrix<f64>) -> Result<Dataset> {
    match ds.panel {
        None => Ok(Dataset {
            names: ds.names,
            times: TimePoints::new(times)?,
            obs: Observations::new(y)?,
            panel: None,
            warnings: ds.warnings,
        }),
        Some(p) => {
            let (qn, pn) = (p.q_labels.len(), p.p_labels.len());
            let mats = (0..y.nrows())
                .map(|n| DMatrix::from_column_slice(qn, pn, y.row(n).transpose().as_slice()))
                .collect();
            assemble(times, p.q_labels, p.p_labels, mats, ds.warnings)
        }
    }
}

/// Wide-layout text of `obs`; floats use the shortest exact representation.
pub fn wide_csv(names: &[String], times: &TimePoints, obs: &Observations) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let head: Vec<&str> = std::iter::once("t").chain(names.iter().map(String::as_str)).collect();
    w.write_record(&head).map_err(|e| CliError::Data(e.to_string()))?;
    for (n, t) in times.as_slice().iter().enumerate() {
        let row: Vec<String> = std::iter::once(t.to_string())
            .chain(obs.y().row(n).iter().map(|v| v.to_string()))
            .collect();
        w.write_record(&row).map_err(|e| CliError::Data(e.to_string()))?;
    }
    w.into_inner().map_err(|e| CliError::Data(e.to_string()))
}

/// Checks that names are unique so pairs can refer to them.
pub fn check_names(names: &[String]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for n in names {
        if !seen.insert(n) {
            return Err(CliError::Data(format!("duplicate column name `{n}`")));
        }
    }
    Ok(())
}

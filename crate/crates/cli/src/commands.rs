//! One function per subcommand.

use std::path::Path;

use hetfactor::baselines::{ewma_select, nonfactor_map, EwmaModel};
use hetfactor::em::spatiotemporal::fit_st;
use hetfactor::{
    average_kl, ewma_fit, ewma_forecast, identify, marginal_covariance, run_forecast, select_k,
    simulate, time_varying_loadings, FactorModelParams, FitReport, ForecastConfig, ForecastState,
    IdentifyConfig, ModelSpec, SchemeTemplate, Sigma, SimulationSpec, StVariant, TimePoints,
    WeightScheme,
};
use nalgebra::{DMatrix, DVector};

use crate::config::{ModelKind, RunConfig};
use crate::error::{CliError, Result};
use crate::ingest::{self, Dataset};
use crate::output::{labels, ModelFile, OutputDir, Report};

fn seed(cfg: &RunConfig, stage: &str) -> u64 {
    hetfactor::rng::derive_seed(cfg.seed, stage, 0)
}

/// Reads the data and applies the configured preprocessing. Trimming uses
/// the first `train` rows (all rows when None).
pub fn load(path: &Path, cfg: &RunConfig, train: Option<usize>) -> Result<Dataset> {
    let mut ds = ingest::read(path, cfg.layout)?;
    if cfg.log_returns {
        ds = ingest::log_returns(ds)?;
    }
    if let Some(k) = cfg.trim_k {
        let rows = train.unwrap_or(ds.obs.n());
        ds = ingest::trim(ds, k, rows)?;
    }
    for w in &ds.warnings {
        eprintln!("warning: {w}");
    }
    Ok(ds)
}

fn describe(report: &mut Report, ds: &Dataset) {
    report.n = ds.obs.n();
    report.q = ds.panel.as_ref().map_or(ds.obs.q(), |p| p.q_labels.len());
    report.p = ds.panel.as_ref().map(|p| p.p_labels.len());
    report.warnings.extend(ds.warnings.iter().cloned());
}

// ---------------------------------------------------------------------------
// Plot data

fn resolve_coordinate(names: &[String], token: &str) -> Result<usize> {
    if let Some(i) = names.iter().position(|n| n == token) {
        return Ok(i);
    }
    match token.parse::<usize>() {
        Ok(i) if (1..=names.len()).contains(&i) => Ok(i - 1),
        _ => Err(CliError::Config(format!("unknown coordinate `{token}` in pairs"))),
    }
}

fn pairs(cfg: &RunConfig, names: &[String]) -> Result<Vec<(usize, usize)>> {
    if cfg.pairs.is_empty() {
        return Ok((1..names.len().min(4)).map(|j| (0, j)).collect());
    }
    cfg.pairs
        .iter()
        .map(|p| {
            let (a, b) = p
                .split_once(':')
                .ok_or_else(|| CliError::Config(format!("pair `{p}` is not of the form a:b")))?;
            Ok((resolve_coordinate(names, a)?, resolve_coordinate(names, b)?))
        })
        .collect()
}

fn linspace(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    (0..count)
        .map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64)
        .collect()
}

fn time_grid(cfg: &RunConfig, times: &TimePoints) -> Vec<f64> {
    let t = times.as_slice();
    linspace(t[0], t[t.len() - 1], cfg.plot_points)
}

/// `plotdata_correlation.csv` and `plotdata_volatility.csv` from the
/// model covariance along `grid`.
fn plot_covariances(
    out: &mut OutputDir,
    cfg: &RunConfig,
    names: &[String],
    grid: &[f64],
    cov: impl Fn(usize, f64) -> hetfactor::Result<DMatrix<f64>>,
) -> Result<()> {
    let pairs = pairs(cfg, names)?;
    let mut coords: Vec<usize> = pairs.iter().flat_map(|&(a, b)| [a, b]).collect();
    coords.sort_unstable();
    coords.dedup();
    let mut corr_rows = Vec::with_capacity(grid.len());
    let mut vol_rows = Vec::with_capacity(grid.len());
    for (i, &t) in grid.iter().enumerate() {
        let m = cov(i, t)?;
        let mut c = vec![t.to_string()];
        c.extend(pairs.iter().map(|&(a, b)| (m[(a, b)] / (m[(a, a)] * m[(b, b)]).sqrt()).to_string()));
        corr_rows.push(c);
        let mut v = vec![t.to_string()];
        v.extend(coords.iter().map(|&a| m[(a, a)].sqrt().to_string()));
        vol_rows.push(v);
    }
    let mut head = vec!["t".to_string()];
    head.extend(pairs.iter().map(|&(a, b)| format!("{}~{}", names[a], names[b])));
    out.table("plotdata_correlation.csv", &head, &corr_rows)?;
    let mut head = vec!["t".to_string()];
    head.extend(coords.iter().map(|&a| names[a].clone()));
    out.table("plotdata_volatility.csv", &head, &vol_rows)
}

// ---------------------------------------------------------------------------
// Parameter files

fn write_bases(out: &mut OutputDir, prefix: &str, lambdas: &[DMatrix<f64>], factor: &str) -> Result<()> {
    for (d, l) in lambdas.iter().enumerate() {
        let f = labels(factor, l.nrows());
        out.matrix(&format!("{prefix}_{}.csv", d + 1), "factor", &f, &f, l)?;
    }
    Ok(())
}

fn write_sigma(out: &mut OutputDir, names: &[String], sigma: &Sigma) -> Result<()> {
    match sigma {
        Sigma::Constant(s) => out.matrix("Sigma.csv", "name", names, &["sigma".into()], &DMatrix::from_column_slice(s.len(), 1, s.as_slice())),
        Sigma::TimeVarying(tv) => {
            let d = tv.scalars.iter().map(|v| v.len()).max().unwrap_or(0);
            let m = DMatrix::from_fn(names.len(), d, |q, j| tv.scalars[q].get(j).copied().unwrap_or(f64::NAN));
            out.matrix("Sigma.csv", "name", names, &labels("nu_", d), &m)
        }
    }
}

fn write_factor(out: &mut OutputDir, names: &[String], params: &FactorModelParams) -> Result<()> {
    out.matrix("B.csv", "name", names, &labels("f", params.k()), &params.b)?;
    write_sigma(out, names, &params.sigma)?;
    write_bases(out, "lambda", &params.basis.lambdas, "f")
}

fn scheme_span(scheme: &WeightScheme) -> Option<(f64, f64)> {
    let lo = scheme.centers.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scheme.centers.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (hi > lo).then_some((lo, hi))
}

// ---------------------------------------------------------------------------
// Fitting

fn factor_spec(cfg: &RunConfig, times: &TimePoints) -> Result<ModelSpec> {
    let (scheme, bandwidth) = if cfg.model.is_heteroscedastic() {
        let (h0, search) = cfg.bandwidth(times)?;
        (SchemeTemplate::AtTimes { h0 }, search)
    } else {
        (SchemeTemplate::Homoscedastic, None)
    };
    Ok(ModelSpec {
        fit: cfg.fit_config(1),
        family: cfg.family(),
        scheme,
        bandwidth,
    })
}

fn shared_bandwidth(params: &FactorModelParams) -> Option<f64> {
    (params.weights.n_bases() > 1).then(|| params.weights.bandwidth(0))
}

fn finish_factor(
    out: &mut OutputDir,
    report: &mut Report,
    cfg: &RunConfig,
    ds: &Dataset,
    params: &FactorModelParams,
    fit: &FitReport,
) -> Result<()> {
    report.k = Some(params.k());
    report.h_hat = shared_bandwidth(params);
    report.with_fit(fit);
    write_factor(out, &ds.names, params)?;
    let grid = time_grid(cfg, &ds.times);
    plot_covariances(out, cfg, &ds.names, &grid, |_, t| marginal_covariance(t, params))?;
    out.json(
        "model.json",
        &ModelFile::Factor {
            model: cfg.model,
            family: cfg.family(),
            names: ds.names.clone(),
            params: params.clone(),
        },
    )
}

fn finish_ewma(out: &mut OutputDir, report: &mut Report, cfg: &RunConfig, ds: &Dataset, model: &EwmaModel) -> Result<()> {
    report.k = Some(model.k());
    report.metrics.insert("alpha".into(), model.alpha);
    out.matrix("B.csv", "name", &ds.names, &labels("f", model.k()), &model.w_k)?;
    write_sigma(out, &ds.names, &Sigma::Constant(model.sigma.clone()))?;
    plot_covariances(out, cfg, &ds.names, ds.times.as_slice(), |i, _| model.covariance_at((i + 1) as f64))?;
    out.json(
        "model.json",
        &ModelFile::Ewma {
            names: ds.names.clone(),
            times: ds.times.as_slice().to_vec(),
            model: model.clone(),
        },
    )
}

fn ewma_candidates(cfg: &RunConfig) -> Vec<usize> {
    cfg.k.map_or_else(|| cfg.k_candidates.clone(), |k| vec![k])
}

fn run_ewma(out: &mut OutputDir, report: &mut Report, cfg: &RunConfig, ds: &Dataset, ks: &[usize]) -> Result<()> {
    let sel = ewma_select(&ds.obs, ks, &cfg.alphas)?;
    for &k in ks {
        let best = sel
            .scores
            .iter()
            .filter(|s| s.0 == k)
            .map(|s| s.2)
            .fold(f64::NEG_INFINITY, f64::max);
        report.v_table.push((k, best));
    }
    report.k_hat = Some(sel.model.k());
    finish_ewma(out, report, cfg, ds, &sel.model)
}

fn run_st(out: &mut OutputDir, report: &mut Report, cfg: &RunConfig, ds: &Dataset) -> Result<()> {
    let panel = ds
        .panel
        .as_ref()
        .ok_or_else(|| CliError::Config("matrix models need the long layout (--layout long)".into()))?;
    let k = cfg.require_k()?;
    let (h0, search) = cfg.bandwidth(&ds.times)?;
    if search.is_some() {
        report.warnings.push(format!("matrix models keep the bandwidth fixed at h0 = {h0}"));
    }
    let omega = WeightScheme::at_times(&ds.times, h0)?;
    let (variant, rho) = match cfg.model {
        ModelKind::StA => (StVariant::A, None),
        _ => (StVariant::B, Some(omega.clone())),
    };
    let (params, fit) = fit_st(&panel.y, &ds.times, &omega, rho.as_ref(), cfg.k_p, &cfg.fit_config(k), variant)?;
    report.k = Some(k);
    report.h_hat = Some(h0);
    report.with_fit(&fit);
    out.matrix("B.csv", "name", &panel.q_labels, &labels("f", params.k_q()), &params.b)?;
    out.matrix("C.csv", "name", &panel.p_labels, &labels("g", params.k_p()), &params.c)?;
    let column = |v: &DVector<f64>| DMatrix::from_column_slice(v.len(), 1, v.as_slice());
    out.matrix("Sigma.csv", "name", &panel.q_labels, &["sigma".into()], &column(&params.sigma))?;
    out.matrix("Phi.csv", "name", &panel.p_labels, &["phi".into()], &column(&params.phi))?;
    write_bases(out, "lambda", &params.basis.lambdas, "f")?;
    if let Some(g) = &params.gamma {
        write_bases(out, "gamma", &g.lambdas, "g")?;
    }
    let grid = time_grid(cfg, &ds.times);
    plot_covariances(out, cfg, &ds.names, &grid, |_, t| params.marginal_covariance(t))?;
    out.json(
        "model.json",
        &ModelFile::SpatioTemporal {
            model: cfg.model,
            q_labels: panel.q_labels.clone(),
            p_labels: panel.p_labels.clone(),
            params,
        },
    )
}

fn run_nonfactor(out: &mut OutputDir, report: &mut Report, cfg: &RunConfig, ds: &Dataset) -> Result<()> {
    let (h0, _) = cfg.bandwidth(&ds.times)?;
    let model = nonfactor_map(&ds.obs, &ds.times, &WeightScheme::at_times(&ds.times, h0)?)?;
    report.h_hat = Some(h0);
    for (d, l) in model.basis.lambdas.iter().enumerate() {
        out.matrix(&format!("lambda_{}.csv", d + 1), "name", &ds.names, &ds.names, l)?;
    }
    let grid = time_grid(cfg, &ds.times);
    plot_covariances(out, cfg, &ds.names, &grid, |_, t| model.lambda_at(t))?;
    out.json(
        "model.json",
        &ModelFile::Nonfactor {
            names: ds.names.clone(),
            model,
        },
    )
}

pub fn fit(cfg: &RunConfig, data: &Path, out: &mut OutputDir, report: &mut Report) -> Result<()> {
    let ds = load(data, cfg, None)?;
    describe(report, &ds);
    report.model = Some(cfg.model);
    match cfg.model {
        ModelKind::StA | ModelKind::StB => run_st(out, report, cfg, &ds),
        ModelKind::Ewma => run_ewma(out, report, cfg, &ds, &ewma_candidates(cfg)),
        ModelKind::Nonfactor => run_nonfactor(out, report, cfg, &ds),
        _ => {
            let k = cfg.require_k()?;
            let (params, fit) = factor_spec(cfg, &ds.times)?.fit_k(&ds.obs, &ds.times, k, 0)?;
            finish_factor(out, report, cfg, &ds, &params, &fit)
        }
    }
}

pub fn select(cfg: &RunConfig, data: &Path, out: &mut OutputDir, report: &mut Report) -> Result<()> {
    let ds = load(data, cfg, None)?;
    describe(report, &ds);
    report.model = Some(cfg.model);
    if cfg.model == ModelKind::Ewma {
        return run_ewma(out, report, cfg, &ds, &cfg.k_candidates);
    }
    if !cfg.model.is_factor() {
        return Err(CliError::Config("select supports ghofm, ghefm, rhofm, rhefm and ewma".into()));
    }
    let spec = factor_spec(cfg, &ds.times)?;
    let r = select_k(&ds.obs, &ds.times, &cfg.k_candidates, &cfg.split_plan(), &spec)?;
    report.k_hat = Some(r.k_hat);
    report.v_table = r.v_table.clone();
    report.split_scores = r.split_scores.clone();
    finish_factor(out, report, cfg, &ds, &r.params, &r.report)
}

// ---------------------------------------------------------------------------
// Post-processing of a fitted factor model

fn load_factor(path: &Path) -> Result<(ModelKind, hetfactor::Family, Vec<String>, FactorModelParams)> {
    match ModelFile::load(path)? {
        ModelFile::Factor {
            model,
            family,
            names,
            params,
        } => {
            params.validate()?;
            if names.len() != params.q() {
                return Err(CliError::Data("model file names disagree with the loadings".into()));
            }
            Ok((model, family, names, params))
        }
        _ => Err(CliError::Config(
            "this command needs a factor model (ghofm, ghefm, rhofm or rhefm)".into(),
        )),
    }
}

pub fn identify_cmd(cfg: &RunConfig, fitted: &Path, out: &mut OutputDir, report: &mut Report) -> Result<()> {
    let (model, family, names, params) = load_factor(fitted)?;
    report.model = Some(model);
    report.q = params.q();
    report.k = Some(params.k());
    report.h_hat = shared_bandwidth(&params);
    let r = identify(&params, &IdentifyConfig::default())?;
    report.metrics.insert("tau".into(), r.tau);
    report.metrics.insert("steps".into(), r.steps as f64);
    report.metrics.insert("objective".into(), r.objective);
    let f = labels("f", params.k());
    out.matrix("A.csv", "factor", &f, &f, &r.a)?;
    write_factor(out, &names, &r.params)?;
    if let Some((lo, hi)) = scheme_span(&r.params.weights) {
        let grid = linspace(lo, hi, cfg.plot_points);
        plot_covariances(out, cfg, &names, &grid, |_, t| marginal_covariance(t, &r.params))?;
    }
    out.json(
        "model.json",
        &ModelFile::Factor {
            model,
            family,
            names,
            params: r.params,
        },
    )
}

pub fn similarity(cfg: &RunConfig, fitted: &Path, out: &mut OutputDir, report: &mut Report) -> Result<()> {
    let (model, _, names, params) = load_factor(fitted)?;
    report.model = Some(model);
    report.q = params.q();
    report.k = Some(params.k());
    let b = match cfg.at {
        Some(t) => time_varying_loadings(&params, t)?,
        None => params.b.clone(),
    };
    let sim = hetfactor::identify::similarity_matrix(&b)?;
    out.matrix("similarity.csv", "name", &names, &names, &sim)?;
    let pairs = pairs(cfg, &names)?;
    let mut rows = Vec::new();
    if let Some((lo, hi)) = scheme_span(&params.weights) {
        for t in linspace(lo, hi, cfg.plot_points) {
            let bt = time_varying_loadings(&params, t)?;
            let mut row = vec![t.to_string()];
            for &(a, c) in &pairs {
                row.push(hetfactor::cosine_similarity(&bt, a, c)?.to_string());
            }
            rows.push(row);
        }
    }
    let mut head = vec!["t".to_string()];
    head.extend(pairs.iter().map(|&(a, c)| format!("{}~{}", names[a], names[c])));
    out.table("plotdata_similarity.csv", &head, &rows)
}

// ---------------------------------------------------------------------------
// Forecasting and simulation

pub fn forecast(cfg: &RunConfig, data: &Path, out: &mut OutputDir, report: &mut Report) -> Result<()> {
    let raw = load(data, &RunConfig { trim_k: None, ..cfg.clone() }, None)?;
    let n = raw.obs.n();
    let train = cfg.train.unwrap_or(n * 4 / 5);
    if train < 2 || train >= n {
        return Err(CliError::Config(format!(
            "forecast needs 2 <= train < {n} so the test range is non-empty, got {train}"
        )));
    }
    let ds = match cfg.trim_k {
        Some(k) => ingest::trim(raw, k, train)?,
        None => raw,
    };
    describe(report, &ds);
    report.model = Some(cfg.model);
    let k = cfg.require_k()?;
    let (tr_idx, te_idx): (Vec<usize>, Vec<usize>) = ((0..train).collect(), (train..n).collect());
    let (tr, tt) = (ds.obs.subset(&tr_idx), ds.times.subset(&tr_idx));
    let (te, tet) = (ds.obs.subset(&te_idx), ds.times.subset(&te_idx));
    let result = match cfg.model {
        ModelKind::Ewma => {
            let sel = ewma_select(&tr, &[k], &cfg.alphas)?;
            report.metrics.insert("alpha".into(), sel.model.alpha);
            ewma_forecast(&tr, &te, k, sel.model.alpha)?
        }
        m if m.is_factor() => {
            let (params, fit) = factor_spec(cfg, &tt)?.fit_k(&tr, &tt, k, 0)?;
            report.k = Some(k);
            report.h_hat = shared_bandwidth(&params);
            report.with_fit(&fit);
            let mut state = ForecastState::new(params, tr.clone(), tt)?;
            let fc = ForecastConfig {
                fit: cfg.fit_config(k),
                family: cfg.family(),
                perturbation: cfg.perturbation,
                seed: seed(cfg, "forecast"),
            };
            run_forecast(&mut state, &te, &tet, &fc)?
        }
        _ => {
            return Err(CliError::Config(
                "forecast supports ghofm, ghefm, rhofm, rhefm and ewma".into(),
            ))
        }
    };
    report.k = Some(k);
    let total = result.cumulative.last().copied().unwrap_or(0.0);
    report.metrics.insert("cumulative".into(), total);
    let baseline = if cfg.compare_ewma && cfg.model != ModelKind::Ewma {
        let mut best: Option<(f64, hetfactor::ForecastResult)> = None;
        for &a in &cfg.alphas {
            let r = ewma_forecast(&tr, &te, k, a)?;
            let s = r.cumulative.last().copied().unwrap_or(f64::NEG_INFINITY);
            if best.as_ref().is_none_or(|b| s > *b.1.cumulative.last().unwrap_or(&f64::NEG_INFINITY)) {
                best = Some((a, r));
            }
        }
        best
    } else {
        None
    };
    let mut head: Vec<String> = ["t", "score", "cumulative"].map(String::from).to_vec();
    if let Some((a, b)) = &baseline {
        head.extend(["ewma_score", "ewma_cumulative"].map(String::from));
        let ahead = result.cumulative.iter().zip(&b.cumulative).filter(|(x, y)| x > y).count();
        report.metrics.insert("ewma_alpha".into(), *a);
        report.metrics.insert("ewma_cumulative".into(), *b.cumulative.last().unwrap_or(&0.0));
        report.metrics.insert("share_ahead_of_ewma".into(), ahead as f64 / result.scores.len() as f64);
    }
    let rows: Vec<Vec<String>> = (0..result.scores.len())
        .map(|i| {
            let mut r = vec![
                result.times[i].to_string(),
                result.scores[i].to_string(),
                result.cumulative[i].to_string(),
            ];
            if let Some((_, b)) = &baseline {
                r.push(b.scores[i].to_string());
                r.push(b.cumulative[i].to_string());
            }
            r
        })
        .collect();
    out.table("plotdata_forecast.csv", &head, &rows)
}

fn simulation_spec(cfg: &RunConfig) -> SimulationSpec {
    SimulationSpec {
        n: cfg.n,
        q: cfg.q,
        k: cfg.k.unwrap_or(5),
        gamma: cfg.gamma,
        s2: cfg.s2,
        noise: cfg.noise_family(),
        seed: cfg.seed,
    }
}

pub fn simulate_cmd(cfg: &RunConfig, out: &mut OutputDir, report: &mut Report) -> Result<()> {
    let spec = simulation_spec(cfg);
    let sim = simulate(&spec)?;
    let names = labels("y", spec.q);
    report.n = spec.n;
    report.q = spec.q;
    report.k = Some(spec.k);
    out.write("data.csv", &ingest::wide_csv(&names, &sim.times, &sim.obs)?)?;
    out.matrix("B.csv", "name", &names, &labels("f", spec.k), &sim.truth.b)?;
    write_sigma(out, &names, &Sigma::Constant(sim.truth.sigma.clone()))?;
    plot_covariances(out, cfg, &names, sim.times.as_slice(), |i, _| Ok(sim.truth.covariance(i)))?;
    out.json("truth.json", &sim.truth)
}

pub fn kl_compare(cfg: &RunConfig, out: &mut OutputDir, report: &mut Report) -> Result<()> {
    let spec = simulation_spec(cfg);
    let sim = simulate(&spec)?;
    report.n = spec.n;
    report.q = spec.q;
    report.k = Some(spec.k);
    let t = sim.times.as_slice();
    let robust = cfg.model.is_robust();
    let mut rows: Vec<(String, f64)> = Vec::new();
    for (name, model) in [
        ("heteroscedastic", if robust { ModelKind::Rhefm } else { ModelKind::Ghefm }),
        ("homoscedastic", if robust { ModelKind::Rhofm } else { ModelKind::Ghofm }),
    ] {
        let spec_m = factor_spec(&RunConfig { model, ..cfg.clone() }, &sim.times)?;
        let (params, fit) = spec_m.fit_k(&sim.obs, &sim.times, spec.k, 0)?;
        if model.is_heteroscedastic() {
            report.h_hat = shared_bandwidth(&params);
            report.with_fit(&fit);
        }
        rows.push((name.into(), average_kl(&sim.truth, |n| marginal_covariance(t[n], &params))?));
    }
    for &a in &cfg.alphas {
        let m = ewma_fit(&sim.obs, spec.k, a)?;
        rows.push((format!("ewma_{a}"), average_kl(&sim.truth, |n| m.covariance_at((n + 1) as f64))?));
    }
    for (name, kl) in &rows {
        report.metrics.insert(format!("kl_{name}"), *kl);
    }
    let body: Vec<Vec<String>> = rows.iter().map(|(m, kl)| vec![m.clone(), kl.to_string()]).collect();
    out.table("plotdata_kl.csv", &["model".into(), "kl".into()], &body)
}

//! Built-in demos. Each writes its config, the fit artifacts and plot data
//! (CSV first, SVG as a convenience) into one directory.

use std::path::{Path, PathBuf};

use mbll_core::data::{interp_mean, interp_scale, INTERP_CENTERS};
use mbll_core::em::EmTrace;
use nalgebra::DMatrix;
use serde::Serialize;

use crate::commands::{predict_raw, write_fit, PredictionTable};
use crate::config::RunConfig;
use crate::error::CliError;
use crate::io::{csv_writer, fmt, write_json};
use crate::pipeline::{fit, FitOutput, FitSummary, ModelArtifact};
use crate::svg::{Band, Line, Plot};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum DemoName {
    Interp,
    DegenerateEm,
    VarxBeijing,
    Transfer,
}

pub const GRID_LO: f64 = -10.0;
pub const GRID_HI: f64 = 10.0;
pub const GRID_N: usize = 1001;
/// Open gaps between the training intervals.
pub const GAPS: [(f64, f64); 3] = [(-3.0, -2.0), (-1.0, 1.0), (2.0, 3.0)];
pub const FAR_X: f64 = 8.0;

const PRETRAIN_INTERP: &str = r#"{"sgd": {"optimizer": "adam_w", "learning_rate": 1e-3, "weight_decay": 0.0,
                                  "grad_clip": 1.0, "batch_size": 64, "epochs": 1000, "seed": 0},
                          "patience": 200, "plateau_patience": 50, "plateau_factor": 0.5}"#;

/// Density-network warm start, then EM trains backbone and σ head with
/// `M = 0` fixed and isotropic `K`.
pub fn interp_config(seed: u64) -> RunConfig {
    let s = format!(
        r#"{{
        "version": 1, "model_kind": "normal",
        "data": {{"source": "interp", "n": 500}},
        "features": {{"kind": "network", "hidden": [64, 64, 64, 64], "activation": "softplus",
                     "pretrain": {PRETRAIN_INTERP}}},
        "hyperprior": {{"lambda": 0.1, "kappa": 1.0}},
        "em": {{"mode": "fixed_m_hyperprior", "k_constraint": "isotropic", "max_iter": 200, "rel_tol": 1e-3,
               "lr_decay": 0.1,
               "sgd": {{"optimizer": "adam_w", "learning_rate": 1e-4, "weight_decay": 0.0,
                       "grad_clip": 1.0, "batch_size": 64, "epochs": 5, "seed": 0}}}}
    }}"#
    );
    with_seed(&s, seed)
}

/// Density-network pretraining with a constant σ, then EM on the last layer
/// of the frozen map with closed-form σ updates.
pub fn transfer_config(seed: u64) -> RunConfig {
    let s = format!(
        r#"{{
        "version": 1, "model_kind": "normal",
        "data": {{"source": "interp", "n": 500}},
        "features": {{"kind": "network", "hidden": [64, 64, 64, 64], "activation": "softplus",
                     "sigma": "constant", "pretrain": {PRETRAIN_INTERP}, "trainable": []}},
        "em": {{"mode": "fixed_m_only", "k_constraint": "isotropic", "max_iter": 200, "rel_tol": 1e-3,
               "learn_sigma": true}}
    }}"#
    );
    with_seed(&s, seed)
}

/// Linear features on low-noise synthetic data with a correctly specified
/// noise level. `hyperprior` selects the regularized joint scheme,
/// otherwise the unregularized one.
pub fn degenerate_config(seed: u64, hyperprior: bool) -> RunConfig {
    let (mode, hp, iters) = if hyperprior {
        ("joint_hyperprior", r#""hyperprior": {"lambda": 1.0, "kappa": 1.0},"#, 500)
    } else {
        ("degenerate_joint", "", 200)
    };
    let s = format!(
        r#"{{
        "version": 1, "model_kind": "normal",
        "data": {{"source": "linear", "p": 2, "d_x": 4, "n": 1000, "noise": 0.01}},
        "features": {{"kind": "linear", "bias": false, "sigma2": 0.01}},
        {hp}
        "em": {{"mode": "{mode}", "max_iter": {iters}, "rel_tol": 0.0}}
    }}"#
    );
    with_seed(&s, seed)
}

pub fn varx_config(seed: u64, path: &Path) -> RunConfig {
    let s = r#"{
        "version": 1, "model_kind": "t",
        "data": {"source": "varx", "path": "", "p_lag": 1, "q_lag": 2, "split": [0.72, 0.18, 0.10]},
        "features": {"kind": "network", "hidden": [50, 50], "activation": "leaky_relu",
                     "pretrain": {"sgd": {"optimizer": "adam_w", "learning_rate": 1e-3, "weight_decay": 0.01,
                                          "grad_clip": 1.0, "batch_size": 256, "epochs": 60, "seed": 0},
                                  "patience": 10, "plateau_patience": 5, "plateau_factor": 0.5},
                     "trainable": []},
        "hyperprior": {"lambda": 0.01, "kappa": 1.0},
        "em": {"mode": "fixed_m_hyperprior", "k_constraint": "isotropic", "max_iter": 200, "rel_tol": 1e-3}
    }"#;
    let mut c = with_seed(s, seed);
    if let crate::config::DataSpec::Varx { path: p, .. } = &mut c.data {
        *p = path.to_path_buf();
    }
    c
}

fn with_seed(s: &str, seed: u64) -> RunConfig {
    let mut c = RunConfig::from_json(s).expect("built-in demo config is valid");
    c.seed = seed;
    c
}

pub fn grid() -> DMatrix<f64> {
    let step = (GRID_HI - GRID_LO) / (GRID_N - 1) as f64;
    DMatrix::from_fn(1, GRID_N, |_, j| GRID_LO + step * j as f64)
}

fn in_data(x: f64) -> bool {
    INTERP_CENTERS.iter().any(|c| (x - c).abs() <= 0.5)
}

fn in_gap(x: f64) -> bool {
    GAPS.iter().any(|&(a, b)| x > a && x < b)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Epistemic profile statistics of an interpolation fit.
#[derive(Clone, Debug, Serialize)]
pub struct InterpStats {
    pub data_median: f64,
    pub gap_median: f64,
    /// Smaller of the epistemic traces at `±FAR_X`.
    pub far: f64,
    pub gap_ratio: f64,
    pub far_ratio: f64,
}

pub fn interp_stats(a: &ModelArtifact) -> Result<InterpStats, CliError> {
    let xs: Vec<f64> = [-FAR_X, FAR_X].into_iter().chain(grid().iter().copied()).collect();
    let x = DMatrix::from_row_slice(1, xs.len(), &xs);
    let t = predict_raw(a, &x)?;
    let pick = |f: fn(f64) -> bool| xs[2..].iter().zip(&t.epistemic[2..]).filter(|(x, _)| f(**x)).map(|(_, e)| *e).collect();
    let data_median = median(pick(in_data));
    let gap_median = median(pick(in_gap));
    let far = t.epistemic[0].min(t.epistemic[1]);
    Ok(InterpStats { data_median, gap_median, far, gap_ratio: gap_median / data_median, far_ratio: far / data_median })
}

#[derive(Serialize)]
struct InterpDemoSummary<'a> {
    demo: &'a str,
    fit: &'a FitSummary,
    stats: InterpStats,
}

fn write_profiles(out: &Path, a: &ModelArtifact, res: &FitOutput) -> Result<InterpStats, CliError> {
    let x = grid();
    let t: PredictionTable = predict_raw(a, &x)?;
    let total = t.total();
    let xs: Vec<f64> = x.iter().copied().collect();

    let header: Vec<String> = ["x", "truth", "mean", "lo1", "hi1", "lo2", "hi2", "lo3", "hi3"].map(String::from).into();
    let mut wr = csv_writer(&out.join("bands.csv"), "mbll-bands", &header)?;
    for (j, &xj) in xs.iter().enumerate() {
        let (m, s) = (t.mean[(0, j)], total[j].sqrt());
        let mut row = vec![fmt(xj), fmt(interp_mean(xj)), fmt(m)];
        for k in 1..=3 {
            row.push(fmt(m - k as f64 * s));
            row.push(fmt(m + k as f64 * s));
        }
        wr.write_record(&row)?;
    }
    wr.flush()?;

    let header: Vec<String> = ["x", "truth_aleatoric", "aleatoric", "epistemic", "total"].map(String::from).into();
    let mut wr = csv_writer(&out.join("profile.csv"), "mbll-profile", &header)?;
    for (j, &xj) in xs.iter().enumerate() {
        let row = [xj, interp_scale(xj).powi(2), t.aleatoric[j], t.epistemic[j], total[j]];
        wr.write_record(row.map(fmt))?;
    }
    wr.flush()?;

    let pts = |v: &[f64]| xs.iter().copied().zip(v.iter().copied()).collect::<Vec<_>>();
    let mean: Vec<f64> = t.mean.row(0).iter().copied().collect();
    let bands = (1..=3)
        .rev()
        .map(|k| {
            let lo: Vec<f64> = mean.iter().zip(&total).map(|(m, v)| m - k as f64 * v.sqrt()).collect();
            let hi: Vec<f64> = mean.iter().zip(&total).map(|(m, v)| m + k as f64 * v.sqrt()).collect();
            Band { lo: pts(&lo), hi: pts(&hi), opacity: 0.15 }
        })
        .collect();
    let train = a.x_scaler.invert(&res.data.train.x)?;
    let train_y = a.y_scaler.invert(&res.data.train.y)?;
    let plot = Plot {
        title: "Predictive mean with 1/2/3 sigma bands".into(),
        x_label: "x".into(),
        y_label: "y".into(),
        lines: vec![
            Line { label: "mean".into(), points: pts(&mean) },
            Line { label: "truth".into(), points: xs.iter().map(|&x| (x, interp_mean(x))).collect() },
        ],
        bands,
        scatter: train.iter().copied().zip(train_y.iter().copied()).collect(),
        ..Plot::default()
    };
    std::fs::write(out.join("bands.svg"), plot.render())?;
    let plot = Plot {
        title: "Uncertainty profile".into(),
        x_label: "x".into(),
        y_label: "variance".into(),
        lines: vec![
            Line { label: "aleatoric".into(), points: pts(&t.aleatoric) },
            Line { label: "epistemic".into(), points: pts(&t.epistemic) },
            Line { label: "total".into(), points: pts(&total) },
        ],
        log_y: true,
        ..Plot::default()
    };
    std::fs::write(out.join("profile.svg"), plot.render())?;
    std::fs::write(out.join("trace.svg"), trace_plot(&[("log-MAP", &res.trace)], |r| r.log_map, false).render())?;
    interp_stats(a)
}

fn trace_plot(traces: &[(&str, &EmTrace)], f: fn(&mbll_core::em::EmRecord) -> f64, log_y: bool) -> Plot {
    Plot {
        title: "EM trace".into(),
        x_label: "iteration".into(),
        y_label: String::new(),
        lines: traces
            .iter()
            .map(|(l, t)| Line { label: l.to_string(), points: t.records.iter().map(|r| (r.iteration as f64, f(r))).collect() })
            .collect(),
        log_y,
        ..Plot::default()
    }
}

pub fn run_interp(cfg: &RunConfig, out: &Path, name: &str) -> Result<InterpStats, CliError> {
    let res = fit(cfg)?;
    write_fit(out, cfg, &res)?;
    let stats = write_profiles(out, &res.artifact, &res)?;
    write_json(&out.join("demo_summary.json"), &InterpDemoSummary { demo: name, fit: &res.summary, stats: stats.clone() })?;
    Ok(stats)
}

/// Unregularized and hyperprior-regularized joint EM on the same design.
pub struct DegenerateRuns {
    pub unreg: FitOutput,
    pub reg: FitOutput,
    /// `ΦD⁻¹Φᵀ` and `K₀` of the shared design, for the `1/n` law.
    pub gram: DMatrix<f64>,
    pub k0: DMatrix<f64>,
    /// `minEig(Λ)/(p+κ)` of the regularized run.
    pub hyperprior_floor: f64,
}

impl DegenerateRuns {
    /// `tr (K₀⁻¹ + nG)⁻¹`, the iterate of the unregularized scheme.
    pub fn law_trace(&self, n: usize) -> f64 {
        let k0_inv = self.k0.clone().try_inverse().expect("K0 is positive definite");
        (k0_inv + &self.gram * n as f64).try_inverse().map(|m| m.trace()).unwrap_or(f64::NAN)
    }

    /// `tr G⁻¹`, the constant of the asymptotic `trace(K_n) ≈ tr G⁻¹ / n`.
    pub fn asymptotic_const(&self) -> f64 {
        self.gram.clone().try_inverse().map(|m| m.trace()).unwrap_or(f64::NAN)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DegenerateSummary {
    pub demo: &'static str,
    pub iterations_unreg: usize,
    /// Largest relative gap between `trace(K_n)` and the `1/n` law for `n ≥ 20`.
    pub max_law_rel_err: f64,
    /// `n · trace(K_n)` at the last iterate against `tr G⁻¹`.
    pub n_trace_k_final: f64,
    pub asymptotic_const: f64,
    pub m_rel_err_final_unreg: f64,
    pub trace_k_final_hyperprior: f64,
    /// `minEig(Λ)/(p+κ)`, the floor the hyperprior keeps `K` above.
    pub hyperprior_floor: f64,
}

impl DegenerateRuns {
    pub fn summary(&self) -> DegenerateSummary {
        let u = &self.unreg.trace.records;
        let max_law_rel_err = u
            .iter()
            .filter(|r| r.iteration >= 20)
            .map(|r| ((r.trace_k - self.law_trace(r.iteration)) / self.law_trace(r.iteration)).abs())
            .fold(0.0, f64::max);
        let last = u.last();
        DegenerateSummary {
            demo: "degenerate_em",
            iterations_unreg: last.map(|r| r.iteration).unwrap_or(0),
            max_law_rel_err,
            n_trace_k_final: last.map(|r| r.trace_k * r.iteration as f64).unwrap_or(f64::NAN),
            asymptotic_const: self.asymptotic_const(),
            m_rel_err_final_unreg: last.map(|r| r.m_rel_err).unwrap_or(f64::NAN),
            trace_k_final_hyperprior: self.reg.trace.records.last().map(|r| r.trace_k).unwrap_or(f64::NAN),
            hyperprior_floor: self.hyperprior_floor,
        }
    }
}

pub fn degenerate_runs(seed: u64) -> Result<DegenerateRuns, CliError> {
    let c_unreg = degenerate_config(seed, false);
    let c_reg = degenerate_config(seed, true);
    let unreg = fit(&c_unreg)?;
    let reg = fit(&c_reg)?;
    let phi = unreg.artifact.features.phi(&unreg.data.train.x)?;
    let sigma2 = match unreg.artifact.noise {
        crate::pipeline::NoiseModel::Constant { sigma2 } => sigma2,
        crate::pipeline::NoiseModel::Network => unreachable!("fixed basis has constant noise"),
    };
    let gram = &phi * phi.transpose() / sigma2;
    let d_t = gram.nrows();
    let k0 = DMatrix::identity(d_t, d_t) * c_unreg.prior.k0;
    let hyperprior_floor = c_reg.hyperprior.as_ref().map(|h| h.lambda / (reg.artifact.p() as f64 + h.kappa)).unwrap_or(0.0);
    Ok(DegenerateRuns { unreg, reg, gram, k0, hyperprior_floor })
}

pub fn run_degenerate(seed: u64, out: &Path) -> Result<DegenerateRuns, CliError> {
    let runs = degenerate_runs(seed)?;
    write_fit(&out.join("unregularized"), &degenerate_config(seed, false), &runs.unreg)?;
    write_fit(&out.join("hyperprior"), &degenerate_config(seed, true), &runs.reg)?;
    let header: Vec<String> = [
        "iteration",
        "trace_k_unreg",
        "trace_k_law",
        "m_rel_err_unreg",
        "log_map_unreg",
        "trace_k_hyperprior",
        "m_rel_err_hyperprior",
        "log_map_hyperprior",
    ]
    .map(String::from)
    .into();
    let mut wr = csv_writer(&out.join("degenerate_trace.csv"), "mbll-degenerate-trace", &header)?;
    let (u, r) = (&runs.unreg.trace.records, &runs.reg.trace.records);
    for i in 0..u.len().max(r.len()) {
        let mut row = vec![i.to_string()];
        match u.get(i) {
            Some(x) => row.extend([fmt(x.trace_k), fmt(runs.law_trace(x.iteration)), fmt(x.m_rel_err), fmt(x.log_map)]),
            None => row.extend(std::iter::repeat_n(String::new(), 4)),
        }
        match r.get(i) {
            Some(x) => row.extend([fmt(x.trace_k), fmt(x.m_rel_err), fmt(x.log_map)]),
            None => row.extend(std::iter::repeat_n(String::new(), 3)),
        }
        wr.write_record(&row)?;
    }
    wr.flush()?;
    let tr = [("unregularized", &runs.unreg.trace), ("hyperprior", &runs.reg.trace)];
    let mut p = trace_plot(&tr, |r| r.trace_k, true);
    p.y_label = "trace K".into();
    std::fs::write(out.join("trace_k.svg"), p.render())?;
    let mut p = trace_plot(&tr, |r| r.m_rel_err, true);
    p.y_label = "relative distance of M to least squares".into();
    std::fs::write(out.join("m_err.svg"), p.render())?;
    write_json(&out.join("demo_summary.json"), &runs.summary())?;
    Ok(runs)
}

#[derive(Serialize)]
struct VarxDemoSummary<'a> {
    demo: &'a str,
    embedded_dim: Option<usize>,
    fit: &'a FitSummary,
    test: &'a mbll_core::metrics::EvalReport,
}

pub fn run_varx(cfg: &RunConfig, out: &Path) -> Result<FitSummary, CliError> {
    if let crate::config::DataSpec::Varx { path, .. } = &cfg.data {
        if !path.is_file() {
            return Err(CliError::Config(format!("air-quality file {} not found", path.display())));
        }
    }
    let res = fit(cfg)?;
    write_fit(out, cfg, &res)?;
    let a = &res.artifact;
    let x_raw = a.x_scaler.invert(&res.data.test.x)?;
    let y_raw = a.y_scaler.invert(&res.data.test.y)?;
    let report = crate::commands::evaluate_raw(a, &x_raw, &y_raw)?;
    crate::commands::write_report(out, &report)?;

    let pred = a.predict_std(&res.data.test.x)?;
    let points = pred.points()?;
    let mut header = vec!["t".to_string()];
    for n in &a.y_names {
        header.extend(["obs", "mean", "lo95", "hi95"].map(|s| format!("{s}_{n}")));
    }
    let mut wr = csv_writer(&out.join("forecast.csv"), "mbll-forecast", &header)?;
    let mut series: Vec<Vec<(f64, f64)>> = vec![Vec::new(); 2 * a.p()];
    for (j, pt) in points.iter().enumerate() {
        let mut row = vec![j.to_string()];
        let m = pt.mean();
        for i in 0..a.p() {
            let (lo, hi) = pt.central_interval(i, 0.95)?;
            let (c, s) = (a.y_scaler.mean[i], a.y_scaler.scale[i]);
            row.extend([y_raw[(i, j)], c + s * m[i], c + s * lo, c + s * hi].map(fmt));
            series[2 * i].push((j as f64, y_raw[(i, j)]));
            series[2 * i + 1].push((j as f64, c + s * m[i]));
        }
        wr.write_record(&row)?;
    }
    wr.flush()?;
    let show = points.len().min(500);
    let plot = Plot {
        title: format!("{}: test forecasts (first {show} steps)", a.y_names.first().map(String::as_str).unwrap_or("")),
        x_label: "step".into(),
        y_label: a.y_names.first().cloned().unwrap_or_default(),
        lines: vec![
            Line { label: "observed".into(), points: series[0][..show].to_vec() },
            Line { label: "mean".into(), points: series[1][..show].to_vec() },
        ],
        ..Plot::default()
    };
    std::fs::write(out.join("forecast.svg"), plot.render())?;
    write_json(
        &out.join("demo_summary.json"),
        &VarxDemoSummary { demo: "varx_beijing", embedded_dim: res.summary.embedded_dim, fit: &res.summary, test: &report },
    )?;
    Ok(res.summary)
}

/// Runs a demo. `config` replaces the built-in run config (not available
/// for `degenerate-em`, which pairs two fixed configs).
pub fn run(name: DemoName, seed: u64, data: Option<&PathBuf>, config: Option<RunConfig>, out: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(out)?;
    match name {
        DemoName::Interp => run_interp(&config.unwrap_or_else(|| interp_config(seed)), out, "interp").map(drop),
        DemoName::Transfer => run_interp(&config.unwrap_or_else(|| transfer_config(seed)), out, "transfer").map(drop),
        DemoName::DegenerateEm => {
            if config.is_some() {
                return Err(CliError::Config("degenerate-em does not take --config".into()));
            }
            run_degenerate(seed, out).map(drop)
        }
        DemoName::VarxBeijing => {
            let data = data.ok_or_else(|| CliError::Config("varx-beijing needs --data <station csv>".into()))?;
            let cfg = match config {
                Some(mut c) => {
                    if let crate::config::DataSpec::Varx { path, .. } = &mut c.data {
                        *path = data.clone();
                    } else {
                        return Err(CliError::Config("varx-beijing needs a varx data source".into()));
                    }
                    c
                }
                None => varx_config(seed, data),
            };
            run_varx(&cfg, out).map(drop)
        }
    }
}

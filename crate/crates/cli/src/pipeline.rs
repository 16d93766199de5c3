//! Data loading, feature maps, EM fitting and the model artifact.

use std::path::Path;
use std::time::Instant;

use mbll_core::bll_normal::{Design, HyperPrior, NormalHyper};
use mbll_core::bll_t::THyper;
use mbll_core::data::{
    gen_interp1d, gen_linear_mvn, load_beijing, load_csv, split_sizes, varx_embed_valid, Dataset,
    LinearSpec, Scaler, VarxSpec,
};
use mbll_core::em::{log_evidence, run_em, EmTrace, FeatureSource, FittedPosterior, ModelHyper, Prediction};
use mbll_core::nn::{pretrain_pdn, FeatureModel, PretrainReport};
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{DataSpec, FeatureSpec, ModelKind, RunConfig, SigmaKind};
use crate::error::CliError;

pub const ARTIFACT_VERSION: u32 = 1;

/// Standardized splits plus the maps back to data units.
#[derive(Clone, Debug)]
pub struct DataBundle {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub x_scaler: Scaler,
    pub y_scaler: Scaler,
    pub varx: Option<VarxSpec>,
}

fn strip_scalers(mut d: Dataset) -> Dataset {
    d.x_scaler = None;
    d.y_scaler = None;
    d
}

fn random_split(all: &Dataset, split: [f64; 3], seed: u64) -> Result<(Dataset, Dataset, Dataset), CliError> {
    let (n_tr, n_va, _) = split_sizes(all.n(), (split[0], split[1], split[2]))?;
    let mut idx: Vec<usize> = (0..all.n()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok((all.select(&idx[..n_tr]), all.select(&idx[n_tr..n_tr + n_va]), all.select(&idx[n_tr + n_va..])))
}

pub fn load_data(spec: &DataSpec, seed: u64) -> Result<DataBundle, CliError> {
    match spec {
        DataSpec::Interp { n, split } => {
            let all = gen_interp1d(*n, seed)?;
            let (train, val, test) = random_split(&all, *split, seed)?;
            Ok(DataBundle { train, val, test, x_scaler: Scaler::identity(1), y_scaler: Scaler::identity(1), varx: None })
        }
        DataSpec::Linear { p, d_x, n, noise, hetero, split } => {
            let lspec = LinearSpec {
                m: DMatrix::zeros(*p, *d_x),
                k: DMatrix::identity(*d_x, *d_x),
                v: DMatrix::identity(*p, *p) * *noise,
                sigma2: 1.0,
                hetero: *hetero,
            };
            let draw = gen_linear_mvn(&lspec, *n, seed)?;
            let all = Dataset::new(draw.design.phi, draw.design.y)?;
            let (train, val, test) = random_split(&all, *split, seed)?;
            Ok(DataBundle {
                train,
                val,
                test,
                x_scaler: Scaler::identity(*d_x),
                y_scaler: Scaler::identity(*p),
                varx: None,
            })
        }
        DataSpec::Csv { path, targets, split } => {
            let s = load_csv(path, targets, (split[0], split[1], split[2]), seed)?;
            let xs = s.train.x_scaler.clone().expect("standardized");
            let ys = s.train.y_scaler.clone().expect("standardized");
            Ok(DataBundle {
                train: strip_scalers(s.train),
                val: strip_scalers(s.val),
                test: strip_scalers(s.test),
                x_scaler: xs,
                y_scaler: ys,
                varx: None,
            })
        }
        DataSpec::Varx { path, p_lag, q_lag, split } => {
            let series = load_beijing(path)?;
            let vs = VarxSpec::new(*p_lag, *q_lag)?;
            let raw = varx_embed_valid(&series.u, &series.y, &series.valid, vs)?;
            let (n_tr, n_va, _) = split_sizes(raw.n(), (split[0], split[1], split[2]))?;
            let idx: Vec<usize> = (0..raw.n()).collect();
            let tr = raw.select(&idx[..n_tr]);
            // lagged outputs share the output scaler
            let us = Scaler::fit(&tr.x.rows(0, vs.p_lag * series.u.nrows()).into_owned())?;
            let ys = Scaler::fit(&tr.y)?;
            let d_u = series.u.nrows();
            let mut xs = Scaler { mean: Vec::new(), scale: Vec::new() };
            for l in 0..vs.p_lag {
                xs.mean.extend_from_slice(&us.mean[l * d_u..(l + 1) * d_u]);
                xs.scale.extend_from_slice(&us.scale[l * d_u..(l + 1) * d_u]);
            }
            for _ in 0..vs.q_lag {
                xs.mean.extend_from_slice(&ys.mean);
                xs.scale.extend_from_slice(&ys.scale);
            }
            let std = |d: Dataset| -> Result<Dataset, CliError> { Ok(strip_scalers(d.standardized(&xs, &ys)?)) };
            Ok(DataBundle {
                train: std(tr)?,
                val: std(raw.select(&idx[n_tr..n_tr + n_va]))?,
                test: std(raw.select(&idx[n_tr + n_va..]))?,
                x_scaler: xs,
                y_scaler: ys,
                varx: Some(vs),
            })
        }
    }
}

/// Deterministic part of the feature map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureMap {
    Linear { bias: bool },
    Rbf { centers: Vec<f64>, width: f64 },
    Network { model: FeatureModel },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseModel {
    Constant { sigma2: f64 },
    /// σ²(x) from the network's scale head.
    Network,
}

impl FeatureMap {
    pub fn phi(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>, CliError> {
        match self {
            FeatureMap::Linear { bias } => {
                let (d, n) = x.shape();
                Ok(DMatrix::from_fn(d + usize::from(*bias), n, |i, j| if i < d { x[(i, j)] } else { 1.0 }))
            }
            FeatureMap::Rbf { centers, width } => {
                if x.nrows() != 1 {
                    return Err(CliError::Input(format!("rbf features need scalar inputs, got {}", x.nrows())));
                }
                let c = centers.len();
                Ok(DMatrix::from_fn(c + 1, x.ncols(), |i, j| {
                    if i < c {
                        (-(x[(0, j)] - centers[i]).powi(2) / (2.0 * width * width)).exp()
                    } else {
                        1.0
                    }
                }))
            }
            FeatureMap::Network { model } => Ok(model.forward(x)?.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelArtifact {
    pub format_version: u32,
    pub model_kind: ModelKind,
    pub features: FeatureMap,
    pub noise: NoiseModel,
    pub hyper: ModelHyper,
    pub posterior: FittedPosterior,
    pub x_scaler: Scaler,
    pub y_scaler: Scaler,
    pub x_names: Vec<String>,
    pub y_names: Vec<String>,
    pub varx: Option<VarxSpec>,
}

impl ModelArtifact {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let s = std::fs::read_to_string(path)
            .map_err(|e| CliError::Input(format!("cannot read model {}: {e}", path.display())))?;
        let a: ModelArtifact = serde_json::from_str(&s).map_err(|e| CliError::Input(format!("bad model file: {e}")))?;
        if a.format_version != ARTIFACT_VERSION {
            return Err(CliError::Input(format!("unsupported model format {}", a.format_version)));
        }
        Ok(a)
    }

    pub fn to_json(&self) -> Result<String, CliError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn d_x(&self) -> usize {
        self.x_names.len()
    }
    pub fn p(&self) -> usize {
        self.y_names.len()
    }

    /// `(Φ, D)` for standardized inputs.
    pub fn design_inputs(&self, x_std: &DMatrix<f64>) -> Result<(DMatrix<f64>, DVector<f64>), CliError> {
        if x_std.nrows() != self.d_x() {
            return Err(CliError::Input(format!("model expects {} inputs, got {}", self.d_x(), x_std.nrows())));
        }
        match (&self.features, &self.noise) {
            (FeatureMap::Network { model }, NoiseModel::Network) => Ok(model.forward(x_std)?),
            (f, NoiseModel::Constant { sigma2 }) => Ok((f.phi(x_std)?, DVector::from_element(x_std.ncols(), *sigma2))),
            (_, NoiseModel::Network) => Err(CliError::Input("network noise model needs network features".into())),
        }
    }

    /// Predictive in standardized units.
    pub fn predict_std(&self, x_std: &DMatrix<f64>) -> Result<Prediction, CliError> {
        let (phi, d) = self.design_inputs(x_std)?;
        Ok(self.posterior.predict(&self.hyper, &phi, &d)?)
    }

    /// `Σᵢ sᵢ² Uᵢᵢ`: trace of a standardized-unit covariance `U` in data
    /// units.
    pub fn raw_trace(&self, u: &DMatrix<f64>) -> f64 {
        (0..u.nrows()).map(|i| self.y_scaler.scale[i].powi(2) * u[(i, i)]).sum()
    }

    /// Per-point `(aleatoric, epistemic)` traces in data units; `NaN` when
    /// the predictive has no finite variance.
    pub fn raw_point_traces(&self, pred: &Prediction) -> Vec<(f64, f64)> {
        let (unit, al, ep) = match pred {
            Prediction::Normal(p) => (self.raw_trace(&p.row_cov), &p.aleatoric_factors, &p.epistemic_factors),
            Prediction::T(p) => {
                let u = if p.dof > 2.0 { self.raw_trace(&p.row_scale) / (p.dof - 2.0) } else { f64::NAN };
                (u, &p.aleatoric_factors, &p.epistemic_factors)
            }
        };
        al.iter().zip(ep).map(|(a, e)| (a * unit, e * unit)).collect()
    }

    /// `ln p(Y | θ)` of a standardized data set under the fitted prior.
    pub fn log_evidence_std(&self, x_std: &DMatrix<f64>, y_std: &DMatrix<f64>) -> Result<f64, CliError> {
        let (phi, d) = self.design_inputs(x_std)?;
        Ok(log_evidence(&Design::new(phi, y_std.clone(), d)?, &self.hyper)?)
    }

    /// `Σᵢ ln sᵢ`: per-sample log-Jacobian from standardized to data units.
    pub fn log_jacobian(&self) -> f64 {
        self.y_scaler.scale.iter().map(|s| s.ln()).sum()
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct FitSummary {
    pub model_kind: ModelKind,
    pub n_train: usize,
    pub d_x: usize,
    pub d_t: usize,
    pub p: usize,
    pub iterations: usize,
    pub converged: bool,
    pub log_evidence: f64,
    pub log_map: f64,
    /// `-ln p(Y_train | θ) / N` in data units.
    pub nlev_train: f64,
    pub embedded_dim: Option<usize>,
    pub pretrain_best_epoch: Option<usize>,
}

#[derive(Clone, Debug, Serialize)]
pub struct Timings {
    pub pretrain_ms: f64,
    pub em_ms: f64,
    pub total_ms: f64,
    pub iteration_ms: Vec<f64>,
}

pub struct FitOutput {
    pub artifact: ModelArtifact,
    pub trace: EmTrace,
    pub summary: FitSummary,
    pub timings: Timings,
    pub pretrain: Option<PretrainReport>,
    pub data: DataBundle,
}

fn initial_hyper(cfg: &RunConfig, p: usize, d_t: usize) -> Result<ModelHyper, CliError> {
    let kc = cfg.em.k_constraint;
    let k = DMatrix::identity(d_t, d_t) * cfg.prior.k0;
    let m = DMatrix::zeros(p, d_t);
    Ok(match cfg.model_kind {
        ModelKind::Normal => ModelHyper::Normal {
            hyper: NormalHyper::new(m, k, kc)?,
            v: DMatrix::identity(p, p) * cfg.prior.v,
        },
        ModelKind::T => ModelHyper::T {
            hyper: THyper::new(
                m,
                k,
                DMatrix::identity(p, p) * cfg.prior.psi0,
                cfg.prior.nu.unwrap_or_else(|| THyper::default_nu(p)),
                kc,
                cfg.em.psi_constraint,
            )?,
        },
    })
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.5 * (lo + hi)];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

/// Runs the full fitting pipeline of a config.
pub fn fit(cfg: &RunConfig) -> Result<FitOutput, CliError> {
    cfg.validate()?;
    let start = Instant::now();
    let data = load_data(&cfg.data, cfg.seed)?;
    let (train, val) = (&data.train, &data.val);
    let p = train.p();
    let mut em = cfg.em.clone();
    em.seed = cfg.seed;
    em.sgd.seed = cfg.seed;

    let mut pretrain_report = None;
    let mut pretrain_ms = 0.0;
    let (source, features, noise_is_network) = match &cfg.features {
        FeatureSpec::Linear { bias, sigma2 } => {
            let f = FeatureMap::Linear { bias: *bias };
            let d = Design::homoscedastic(f.phi(&train.x)?, train.y.clone(), *sigma2)?;
            (FeatureSource::Fixed(d), f, false)
        }
        FeatureSpec::Rbf { centers, lo, hi, width, sigma2 } => {
            let f = FeatureMap::Rbf { centers: linspace(*lo, *hi, *centers), width: *width };
            let d = Design::homoscedastic(f.phi(&train.x)?, train.y.clone(), *sigma2)?;
            (FeatureSource::Fixed(d), f, false)
        }
        FeatureSpec::Network { hidden, activation, bias_feature, sigma, pretrain, trainable } => {
            let mut model = FeatureModel::new(train.d_x(), hidden, *activation, *bias_feature, cfg.seed);
            model = match sigma {
                SigmaKind::Shared => model,
                SigmaKind::Separate => model.with_separate_sigma(hidden, cfg.seed.wrapping_add(1)),
                SigmaKind::Constant => model.with_constant_sigma(1.0),
            };
            if let Some(pc) = pretrain {
                let mut pc = pc.clone();
                pc.sgd.seed = cfg.seed;
                let t0 = Instant::now();
                let with_head = model.with_head(p, cfg.seed.wrapping_add(2));
                let (m, rep) = pretrain_pdn(&with_head, (&train.x, &train.y), (&val.x, &val.y), &pc, &DMatrix::identity(p, p))?;
                pretrain_ms = t0.elapsed().as_secs_f64() * 1e3;
                pretrain_report = Some(rep);
                model = m;
            }
            if trainable.is_empty() {
                let (phi, s2) = model.forward(&train.x)?;
                let d = if em.learn_sigma {
                    DVector::from_element(s2.len(), s2.mean())
                } else {
                    s2
                };
                (FeatureSource::Fixed(Design::new(phi, train.y.clone(), d)?), FeatureMap::Network { model }, !em.learn_sigma)
            } else {
                (
                    FeatureSource::Network {
                        model: model.clone(),
                        x: train.x.clone(),
                        y: train.y.clone(),
                        trainable: trainable.clone(),
                    },
                    FeatureMap::Network { model },
                    true,
                )
            }
        }
    };

    let d_t = source.design()?.d_t();
    let init = initial_hyper(cfg, p, d_t)?;
    em.hyperprior = match (&cfg.hyperprior, &cfg.em.hyperprior) {
        (Some(h), _) => Some(HyperPrior::new(DMatrix::identity(d_t, d_t) * h.lambda, h.kappa)?),
        (None, hp) => hp.clone(),
    };
    let t0 = Instant::now();
    let res = run_em(source, init, &em)?;
    let em_ms = t0.elapsed().as_secs_f64() * 1e3;

    let final_design = res.source.design()?;
    let (features, noise) = match (res.source, features) {
        (FeatureSource::Network { model, .. }, _) => (FeatureMap::Network { model }, NoiseModel::Network),
        (FeatureSource::Fixed(_), f) if noise_is_network => (f, NoiseModel::Network),
        (FeatureSource::Fixed(d), f) => (f, NoiseModel::Constant { sigma2: d.d[0] }),
    };
    let posterior = FittedPosterior::compute(&final_design, &res.hyper)?;
    let artifact = ModelArtifact {
        format_version: ARTIFACT_VERSION,
        model_kind: cfg.model_kind,
        features,
        noise,
        hyper: res.hyper,
        posterior,
        x_scaler: data.x_scaler.clone(),
        y_scaler: data.y_scaler.clone(),
        x_names: train.x_names.clone(),
        y_names: train.y_names.clone(),
        varx: data.varx,
    };
    let last = res.trace.records.last().expect("trace has the initial record");
    let summary = FitSummary {
        model_kind: cfg.model_kind,
        n_train: train.n(),
        d_x: train.d_x(),
        d_t,
        p,
        iterations: res.trace.records.len() - 1,
        converged: res.converged,
        log_evidence: last.log_evidence,
        log_map: last.log_map,
        nlev_train: -last.log_evidence / train.n() as f64 + artifact.log_jacobian(),
        embedded_dim: data.varx.map(|v| v.embedded_dim(train.d_x() - v.q_lag * p, p)),
        pretrain_best_epoch: pretrain_report.as_ref().map(|r| r.best_epoch),
    };
    let timings = Timings {
        pretrain_ms,
        em_ms,
        total_ms: start.elapsed().as_secs_f64() * 1e3,
        iteration_ms: res.trace.records.iter().map(|r| r.wall_ms).collect(),
    };
    Ok(FitOutput { artifact, trace: res.trace, summary, timings, pretrain: pretrain_report, data })
}

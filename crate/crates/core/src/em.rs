//! Expectation-maximization for the Bayesian last layer.
//!
//! Each iteration freezes `ξ̃`, builds the surrogate `Q = Q1 - Q2 + ln π`,
//! then raises `Q1` over the feature weights (SGD or a closed-form constant
//! noise scale) and minimizes `Q2 - ln π` over the prior parameters in
//! closed form. The log posterior of the hyperparameters is non-decreasing;
//! an SGD step that would break this is retried with a smaller step.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bll_normal::{
    least_squares, log_evidence_from, predict_parts, Design, HyperPrior, NormalHyper, PredictiveNormal, SuffStats,
};
use crate::bll_t::{t_log_evidence_from, t_predict_parts, PredictiveT, THyper, TSuffStats};
use crate::metrics::PointPredictive;
use crate::error::{check_dims, MbllError, Result};
use crate::linalg::{rel_frobenius, rowmajor, scale_columns, symmetrize, Chol, Structure};
use crate::nn::{FeatureModel, Objective, Optimizer, ParamGroup, SgdConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EmMode {
    /// `M` held at its initial value, hyperprior on `K`.
    FixedMHyperprior,
    /// `M` updated to the posterior mean, hyperprior on `K`.
    JointHyperprior,
    /// `M` held fixed, no hyperprior. The default, since it is the only
    /// mode that runs without a hyperprior.
    #[default]
    FixedMOnly,
    /// Unregularized joint update. Converges to the degenerate maximizer;
    /// provided for verification only.
    DegenerateJoint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmConfig {
    pub mode: EmMode,
    pub hyperprior: Option<HyperPrior>,
    pub k_constraint: Structure,
    pub psi_constraint: Structure,
    pub max_iter: usize,
    pub rel_tol: f64,
    pub sgd: SgdConfig,
    pub seed: u64,
    /// Closed-form update of a constant noise scale (fixed features only).
    pub learn_sigma: bool,
    /// Halvings of the learning rate tried before aborting.
    pub max_retries: usize,
    /// Largest tolerated decrease of the log posterior per iteration.
    pub guard_tol: f64,
    /// M-step learning rate at iteration `t` is `lr / (1 + lr_decay (t - 1))`.
    pub lr_decay: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            mode: EmMode::FixedMOnly,
            hyperprior: None,
            k_constraint: Structure::Full,
            psi_constraint: Structure::Full,
            max_iter: 200,
            rel_tol: 1e-3,
            sgd: SgdConfig::default(),
            seed: 0,
            learn_sigma: false,
            max_retries: 3,
            guard_tol: 1e-8,
            lr_decay: 0.0,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rel_tol >= 0.0) {
            return Err(MbllError::InvalidParameter("rel_tol must be >= 0".into()));
        }
        let needs_hp = matches!(self.mode, EmMode::FixedMHyperprior | EmMode::JointHyperprior);
        if needs_hp && self.hyperprior.is_none() {
            return Err(MbllError::InvalidParameter(format!("mode {:?} needs a hyperprior", self.mode)));
        }
        if !(self.lr_decay >= 0.0) {
            return Err(MbllError::InvalidParameter("lr_decay must be >= 0".into()));
        }
        Ok(())
    }
}

/// Prior parameters of either model family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ModelHyper {
    Normal {
        hyper: NormalHyper,
        #[serde(with = "rowmajor")]
        v: DMatrix<f64>,
    },
    T { hyper: THyper },
}

impl ModelHyper {
    pub fn m(&self) -> &DMatrix<f64> {
        match self {
            ModelHyper::Normal { hyper, .. } => &hyper.m,
            ModelHyper::T { hyper } => &hyper.m,
        }
    }
    pub fn k(&self) -> &DMatrix<f64> {
        match self {
            ModelHyper::Normal { hyper, .. } => &hyper.k,
            ModelHyper::T { hyper } => &hyper.k,
        }
    }
    pub fn psi(&self) -> Option<&DMatrix<f64>> {
        match self {
            ModelHyper::Normal { .. } => None,
            ModelHyper::T { hyper } => Some(&hyper.psi),
        }
    }
}

/// `ln p(Y | θ)`.
pub fn log_evidence(data: &Design, h: &ModelHyper) -> Result<f64> {
    match h {
        ModelHyper::Normal { hyper, v } => log_evidence_from(&SuffStats::compute(data, &hyper.m, &hyper.k)?, v),
        ModelHyper::T { hyper } => t_log_evidence_from(&TSuffStats::compute(data, hyper)?, hyper),
    }
}

/// `ln p(Y | θ) - (κ/2) ln|K| - ½ tr(K⁻¹Λ)` (improper hyperprior, no
/// normalizer).
pub fn log_map(data: &Design, h: &ModelHyper, hp: Option<&HyperPrior>) -> Result<f64> {
    let mut v = log_evidence(data, h)?;
    if let Some(hp) = hp {
        v += hp.log_density(h.k())?;
    }
    Ok(v)
}

/// Frozen E-step quantities computed at `ξ̃`.
#[derive(Clone, Debug)]
pub struct QContext {
    pub design: Design,
    pub m_tilde: DMatrix<f64>,
    pub k_tilde: DMatrix<f64>,
    /// `S̃_yx S̃_xx⁻¹`.
    pub m_post: DMatrix<f64>,
    pub sxx_inv: DMatrix<f64>,
    /// Weight of the residual quadratic form in `Q1`: `V⁻¹`, or
    /// `(ν'+N)(Ψ̃ + S̃_y·x)⁻¹` when `V` is unknown.
    pub precision: DMatrix<f64>,
    /// `Ψ̃ + S̃_y·x` (unknown-`V` case).
    pub h: Option<DMatrix<f64>>,
    pub nu_prime: Option<f64>,
}

impl QContext {
    pub fn build(design: &Design, h: &ModelHyper) -> Result<Self> {
        match h {
            ModelHyper::Normal { hyper, v } => {
                let s = SuffStats::compute(design, &hyper.m, &hyper.k)?;
                let precision = Chol::new(v, "noise covariance V")?.inverse();
                Ok(Self {
                    design: design.clone(),
                    m_tilde: hyper.m.clone(),
                    k_tilde: hyper.k.clone(),
                    m_post: s.post_mean,
                    sxx_inv: s.sxx_inv,
                    precision,
                    h: None,
                    nu_prime: None,
                })
            }
            ModelHyper::T { hyper } => {
                let s = TSuffStats::compute(design, hyper)?;
                let c = hyper.nu_prime() + design.n() as f64;
                Ok(Self {
                    design: design.clone(),
                    m_tilde: hyper.m.clone(),
                    k_tilde: hyper.k.clone(),
                    m_post: s.base.post_mean,
                    sxx_inv: s.base.sxx_inv,
                    precision: s.h_chol.inverse() * c,
                    h: Some(s.h),
                    nu_prime: Some(hyper.nu_prime()),
                })
            }
        }
    }

    pub fn p(&self) -> usize {
        self.m_post.nrows()
    }

    /// `Ẽ = Y - M̃_post Φ`.
    pub fn residuals(&self) -> DMatrix<f64> {
        &self.design.y - &self.m_post * &self.design.phi
    }

    /// Per-sample `ẽᵢᵀPẽᵢ + p φᵢᵀS̃_xx⁻¹φᵢ`.
    fn quad_terms(&self, phi: &DMatrix<f64>, y: &DMatrix<f64>) -> Vec<f64> {
        let p = self.p() as f64;
        let e = y - &self.m_post * phi;
        let pe = &self.precision * &e;
        let sphi = &self.sxx_inv * phi;
        (0..phi.ncols())
            .map(|i| e.column(i).dot(&pe.column(i)) + p * phi.column(i).dot(&sphi.column(i)))
            .collect()
    }
}

/// Mean of `½[p ln σ²ᵢ + σᵢ⁻²(ẽᵢᵀPẽᵢ + p φᵢᵀS̃_xx⁻¹φᵢ)]` over `batch`, for the
/// features and noise scales in `data`. With a known-`V` context this is the
/// Normal-case `-Q1`, with an unknown-`V` context the matrix-T one.
pub fn q1_loss(ctx: &QContext, data: &Design, batch: &[usize]) -> Result<f64> {
    if batch.is_empty() {
        return Err(MbllError::InvalidParameter("empty batch".into()));
    }
    check_dims("Q1 features", (ctx.sxx_inv.nrows(), data.n()), data.phi.shape())?;
    let sub = data.select(batch);
    let q = ctx.quad_terms(&sub.phi, &sub.y);
    let p = ctx.p() as f64;
    let total: f64 = q.iter().zip(sub.d.iter()).map(|(qi, s)| 0.5 * (p * s.ln() + qi / s)).sum();
    Ok(total / batch.len() as f64)
}

/// Closed-form maximizer of `Q1` over a constant `σ²`:
/// `(1/(pN)) Σᵢ (ẽᵢᵀPẽᵢ + p φᵢᵀS̃_xx⁻¹φᵢ)` with the features of `ctx`.
pub fn update_sigma_const(ctx: &QContext) -> Result<f64> {
    let n = ctx.design.n();
    if n == 0 {
        return Err(MbllError::InvalidParameter("no data for the noise update".into()));
    }
    let q = ctx.quad_terms(&ctx.design.phi, &ctx.design.y);
    let s2 = q.iter().sum::<f64>() / (ctx.p() * n) as f64;
    if !(s2 > 0.0) {
        return Err(MbllError::InvalidParameter("degenerate noise update (zero residuals)".into()));
    }
    Ok(s2)
}

fn constrained_k(b: &DMatrix<f64>, c: Structure) -> DMatrix<f64> {
    c.project(&symmetrize(b))
}

/// Exact minimizer of `-(ν'/2) ln|Ψ| + (c/2) tr(H̃⁻¹Ψ)` under the constraint.
fn constrained_psi(h_tilde: &DMatrix<f64>, nu_prime: f64, c: f64, s: Structure) -> Result<DMatrix<f64>> {
    let p = h_tilde.nrows();
    Ok(match s {
        Structure::Full => symmetrize(h_tilde) * (nu_prime / c),
        Structure::Diagonal => {
            let hinv = Chol::new(h_tilde, "Psi + S_y.x")?.inverse();
            DMatrix::from_fn(p, p, |i, j| if i == j { nu_prime / (c * hinv[(i, i)]) } else { 0.0 })
        }
        Structure::Isotropic => {
            let hinv = Chol::new(h_tilde, "Psi + S_y.x")?.inverse();
            DMatrix::identity(p, p) * (nu_prime * p as f64 / (c * hinv.trace()))
        }
    })
}

/// `(M, K)` for the known-`V` model.
pub fn update_hyper_normal(ctx: &QContext, cfg: &EmConfig) -> Result<NormalHyper> {
    let p = ctx.p() as f64;
    let hp = cfg.hyperprior.as_ref();
    let fvf = |m: &DMatrix<f64>| {
        let f = m - &ctx.m_post;
        f.transpose() * &ctx.precision * f
    };
    let (m, b) = match cfg.mode {
        EmMode::FixedMOnly => (ctx.m_tilde.clone(), (&ctx.sxx_inv * p + fvf(&ctx.m_tilde)) / p),
        EmMode::FixedMHyperprior => {
            let hp = hp.ok_or_else(|| MbllError::InvalidParameter("hyperprior required".into()))?;
            (
                ctx.m_tilde.clone(),
                (&ctx.sxx_inv * p + fvf(&ctx.m_tilde) + &hp.lambda) / (p + hp.kappa),
            )
        }
        EmMode::JointHyperprior => {
            let hp = hp.ok_or_else(|| MbllError::InvalidParameter("hyperprior required".into()))?;
            (ctx.m_post.clone(), (&ctx.sxx_inv * p + &hp.lambda) / (p + hp.kappa))
        }
        EmMode::DegenerateJoint => (ctx.m_post.clone(), ctx.sxx_inv.clone()),
    };
    NormalHyper::new(m, constrained_k(&b, cfg.k_constraint), cfg.k_constraint)
}

/// `(M, K, Ψ)` for the unknown-`V` model; `ν` is kept.
pub fn update_hyper_t(ctx: &QContext, nu: f64, cfg: &EmConfig) -> Result<THyper> {
    let h_tilde = ctx.h.as_ref().ok_or_else(|| {
        MbllError::InvalidParameter("context was built for the known-V model".into())
    })?;
    let nu_prime = ctx.nu_prime.expect("set together with h");
    let p = ctx.p() as f64;
    let c = nu_prime + ctx.design.n() as f64;
    // ctx.precision = c H̃⁻¹
    let fpf = |m: &DMatrix<f64>| {
        let f = m - &ctx.m_post;
        f.transpose() * &ctx.precision * f
    };
    let hp = cfg.hyperprior.as_ref();
    let (m, b) = match cfg.mode {
        EmMode::FixedMOnly => (ctx.m_tilde.clone(), &ctx.sxx_inv + fpf(&ctx.m_tilde) / p),
        EmMode::FixedMHyperprior => {
            let hp = hp.ok_or_else(|| MbllError::InvalidParameter("hyperprior required".into()))?;
            (
                ctx.m_tilde.clone(),
                (&ctx.sxx_inv * p + fpf(&ctx.m_tilde) + &hp.lambda) / (p + hp.kappa),
            )
        }
        EmMode::JointHyperprior => {
            let hp = hp.ok_or_else(|| MbllError::InvalidParameter("hyperprior required".into()))?;
            (ctx.m_post.clone(), (&ctx.sxx_inv * p + &hp.lambda) / (p + hp.kappa))
        }
        EmMode::DegenerateJoint => (ctx.m_post.clone(), ctx.sxx_inv.clone()),
    };
    let psi = constrained_psi(h_tilde, nu_prime, c, cfg.psi_constraint)?;
    THyper::new(
        m,
        constrained_k(&b, cfg.k_constraint),
        psi,
        nu,
        cfg.k_constraint,
        cfg.psi_constraint,
    )
}

/// Where the features `Φ` and noise scales `D` come from.
#[derive(Clone, Debug)]
pub enum FeatureSource {
    /// Precomputed `Φ` and `D`. With `learn_sigma`, `D` is replaced by the
    /// re-estimated `σ²I` each iteration.
    Fixed(Design),
    /// A network evaluated on `x`; parameters in `trainable` groups are
    /// updated by SGD on `Q1`.
    Network {
        model: FeatureModel,
        x: DMatrix<f64>,
        y: DMatrix<f64>,
        trainable: Vec<ParamGroup>,
    },
}

impl FeatureSource {
    pub fn design(&self) -> Result<Design> {
        match self {
            FeatureSource::Fixed(d) => Ok(d.clone()),
            FeatureSource::Network { model, x, y, .. } => {
                let (phi, s2) = model.forward(x)?;
                Design::new(phi, y.clone(), s2)
            }
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EmRecord {
    pub iteration: usize,
    pub log_evidence: f64,
    pub log_map: f64,
    pub trace_k: f64,
    /// `‖M - M̂‖/‖M̂‖` with `M̂` the weighted least-squares fit; `NaN` when
    /// the design is rank deficient.
    pub m_rel_err: f64,
    /// Full-data mean `-Q1` at the new weights, under the frozen context.
    pub neg_q1: f64,
    /// Mean `σ²(xᵢ)` over the data.
    pub sigma2_mean: f64,
    pub trace_psi: f64,
    pub lr_halvings: usize,
    #[serde(skip)]
    pub wall_ms: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct EmTrace {
    pub records: Vec<EmRecord>,
}

impl EmTrace {
    /// Largest decrease of the log posterior between consecutive records.
    pub fn max_log_map_drop(&self) -> f64 {
        self.records
            .windows(2)
            .map(|w| w[0].log_map - w[1].log_map)
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug)]
pub struct EmResult {
    pub hyper: ModelHyper,
    pub source: FeatureSource,
    pub trace: EmTrace,
    pub converged: bool,
}

fn record(
    iteration: usize,
    design: &Design,
    h: &ModelHyper,
    hp: Option<&HyperPrior>,
    neg_q1: f64,
    lr_halvings: usize,
    start: Instant,
) -> Result<EmRecord> {
    let le = log_evidence(design, h)?;
    let lm = match hp {
        Some(hp) => le + hp.log_density(h.k())?,
        None => le,
    };
    let m_rel_err = match least_squares(design) {
        Ok(m_hat) => {
            let nrm = m_hat.norm();
            if nrm > 0.0 {
                (h.m() - &m_hat).norm() / nrm
            } else {
                f64::NAN
            }
        }
        Err(_) => f64::NAN,
    };
    Ok(EmRecord {
        iteration,
        log_evidence: le,
        log_map: lm,
        trace_k: h.k().trace(),
        m_rel_err,
        neg_q1,
        sigma2_mean: design.d.mean(),
        trace_psi: h.psi().map_or(f64::NAN, |p| p.trace()),
        lr_halvings,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

fn update_hyper(ctx: &QContext, h: &ModelHyper, cfg: &EmConfig) -> Result<ModelHyper> {
    Ok(match h {
        ModelHyper::Normal { v, .. } => ModelHyper::Normal {
            hyper: update_hyper_normal(ctx, cfg)?,
            v: v.clone(),
        },
        ModelHyper::T { hyper } => ModelHyper::T {
            hyper: update_hyper_t(ctx, hyper.nu, cfg)?,
        },
    })
}

fn rel_change(new: f64, old: f64) -> f64 {
    (new - old).abs() / old.abs().max(f64::MIN_POSITIVE)
}

/// Runs EM from `init`. Iteration 0 of the trace is the initial state.
pub fn run_em(source: FeatureSource, init: ModelHyper, cfg: &EmConfig) -> Result<EmResult> {
    cfg.validate()?;
    if matches!(cfg.mode, EmMode::DegenerateJoint) {
        log::warn!("degenerate_joint mode converges to K = 0; use for verification only");
    }
    let start = Instant::now();
    let hp = cfg.hyperprior.as_ref();
    let mut source = source;
    let mut h = init;
    let mut design = source.design()?;
    check_dims("prior mean M", (design.p(), design.d_t()), h.m().shape())?;
    if let FeatureSource::Network { .. } = source {
        if cfg.learn_sigma {
            return Err(MbllError::InvalidParameter(
                "closed-form noise update needs fixed features; train the sigma head instead".into(),
            ));
        }
    }
    let ctx0 = QContext::build(&design, &h)?;
    let all: Vec<usize> = (0..design.n()).collect();
    let q0 = if all.is_empty() { 0.0 } else { q1_loss(&ctx0, &design, &all)? };
    let mut trace = EmTrace {
        records: vec![record(0, &design, &h, hp, q0, 0, start)?],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = match &source {
        FeatureSource::Network { model, .. } => Some(Optimizer::new(&cfg.sgd, model.n_params())),
        FeatureSource::Fixed(_) => None,
    };
    let mut converged = false;

    for it in 1..=cfg.max_iter {
        let ctx = QContext::build(&design, &h)?;
        let prev = trace.records.last().expect("initial record").clone();
        let h_new = update_hyper(&ctx, &h, cfg)?;

        let (new_source, new_design, halvings) = match &source {
            FeatureSource::Fixed(d) => {
                if cfg.learn_sigma {
                    let s2 = update_sigma_const(&ctx)?;
                    let d_new = Design::new(d.phi.clone(), d.y.clone(), d.d.map(|_| s2))?;
                    (FeatureSource::Fixed(d_new.clone()), d_new, 0)
                } else {
                    (source.clone(), design.clone(), 0)
                }
            }
            FeatureSource::Network { model, x, y, trainable } => {
                let groups = model.param_groups();
                let mask: Vec<bool> = groups.iter().map(|g| trainable.contains(g)).collect();
                let opt_ref = opt.as_mut().expect("network source has an optimizer");
                let obj = Objective::Q1 {
                    y,
                    m_post: &ctx.m_post,
                    precision: &ctx.precision,
                    sxx_inv: &ctx.sxx_inv,
                };
                let lr_it = cfg.sgd.learning_rate / (1.0 + cfg.lr_decay * (it - 1) as f64);
                let mut accepted = None;
                for attempt in 0..=cfg.max_retries {
                    let mut trial = model.clone();
                    let mut trial_opt = opt_ref.clone();
                    trial_opt.learning_rate = lr_it / 2f64.powi(attempt as i32);
                    if mask.iter().any(|&m| m) {
                        for _ in 0..cfg.sgd.epochs {
                            crate::nn::train_epoch(&mut trial, &obj, x, cfg.sgd.batch_size, &mut trial_opt, &mask, &mut rng)?;
                        }
                    }
                    let (phi, s2) = trial.forward(x)?;
                    let d_new = Design::new(phi, y.clone(), s2)?;
                    let lm = log_map(&d_new, &h_new, hp)?;
                    if log::log_enabled!(log::Level::Trace) {
                        let q_new = q1_loss(&ctx, &d_new, &all)?;
                        let q_old = q1_loss(&ctx, &design, &all)?;
                        log::trace!("iteration {it} attempt {attempt}: -Q1 {q_old} -> {q_new}, log posterior {} -> {lm}", prev.log_map);
                    }
                    if lm >= prev.log_map - cfg.guard_tol {
                        trial_opt.learning_rate = cfg.sgd.learning_rate;
                        *opt_ref = trial_opt;
                        accepted = Some((trial, d_new, attempt));
                        break;
                    }
                    if log::log_enabled!(log::Level::Debug) {
                        let q_new = q1_loss(&ctx, &d_new, &all)?;
                        let q_old = q1_loss(&ctx, &design, &all)?;
                        log::debug!(
                            "iteration {it}: log posterior fell to {lm} from {} (mean -Q1 {q_old} -> {q_new}); retrying",
                            prev.log_map
                        );
                    }
                }
                let (model_new, d_new, attempt) = accepted.ok_or_else(|| MbllError::Diverged {
                    iteration: it,
                    detail: format!(
                        "log posterior decreased after {} learning-rate halvings (from {:.6e})",
                        cfg.max_retries, prev.log_map
                    ),
                })?;
                (
                    FeatureSource::Network {
                        model: model_new,
                        x: x.clone(),
                        y: y.clone(),
                        trainable: trainable.clone(),
                    },
                    d_new,
                    attempt,
                )
            }
        };

        let neg_q1 = if all.is_empty() { 0.0 } else { q1_loss(&ctx, &new_design, &all)? };
        let rec = record(it, &new_design, &h_new, hp, neg_q1, halvings, start)?;
        if rec.log_map < prev.log_map - cfg.guard_tol {
            return Err(MbllError::Diverged {
                iteration: it,
                detail: format!("log posterior decreased from {:.12e} to {:.12e}", prev.log_map, rec.log_map),
            });
        }
        let dk = rel_frobenius(h_new.k(), h.k());
        let dle = rel_change(rec.log_evidence, prev.log_evidence);
        let dpsi = match (h_new.psi(), h.psi()) {
            (Some(a), Some(b)) => rel_frobenius(a, b),
            _ => 0.0,
        };
        trace.records.push(rec);
        source = new_source;
        design = new_design;
        h = h_new;
        if dk < cfg.rel_tol && dle < cfg.rel_tol && dpsi < cfg.rel_tol {
            converged = true;
            break;
        }
    }
    Ok(EmResult {
        hyper: h,
        source,
        trace,
        converged,
    })
}

/// `Λ = (εI + ΦD⁻¹Φᵀ)⁻¹`, a data-scaled hyperprior location for `K`.
pub fn data_scaled_lambda(design: &Design, eps: f64) -> Result<DMatrix<f64>> {
    let d_t = design.d_t();
    let g = scale_columns(&design.phi, &design.d_inv()) * design.phi.transpose();
    Ok(Chol::new(&(symmetrize(&g) + DMatrix::identity(d_t, d_t) * eps), "eps I + Phi D^-1 Phi^T")?.inverse())
}

/// Initial noise scale from the target variance, averaged over outputs.
pub fn sigma2_from_data(y: &DMatrix<f64>) -> f64 {
    let n = y.ncols().max(1) as f64;
    let var: f64 = y
        .row_iter()
        .map(|r| {
            let m = r.mean();
            r.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n
        })
        .sum::<f64>()
        / y.nrows().max(1) as f64;
    var.max(1e-6)
}

/// Homoscedastic design helper.
pub fn constant_design(phi: DMatrix<f64>, y: DMatrix<f64>, sigma2: f64) -> Result<Design> {
    let n = phi.ncols();
    Design::new(phi, y, DVector::from_element(n, sigma2))
}

/// Posterior summary sufficient for prediction, so fitted models need not
/// carry their training data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FittedPosterior {
    #[serde(with = "rowmajor")]
    pub post_mean: DMatrix<f64>,
    #[serde(with = "rowmajor")]
    pub sxx_inv: DMatrix<f64>,
    /// `Ψ + S_y·x` (unknown-`V` model).
    #[serde(default, with = "crate::linalg::opt_rowmajor")]
    pub h: Option<DMatrix<f64>>,
    pub n: usize,
    pub log_evidence: f64,
}

/// Predictive law of either model family.
#[derive(Clone, Debug)]
pub enum Prediction {
    Normal(PredictiveNormal),
    T(PredictiveT),
}

impl Prediction {
    pub fn mean(&self) -> &DMatrix<f64> {
        match self {
            Prediction::Normal(p) => &p.mean,
            Prediction::T(p) => &p.mean,
        }
    }

    /// Per-point `(aleatoric, epistemic)` covariance traces; `None` for a
    /// matrix-T predictive without a finite variance.
    pub fn point_traces(&self) -> Option<Vec<(f64, f64)>> {
        let (unit, al, ep) = match self {
            Prediction::Normal(p) => (p.row_cov.trace(), &p.aleatoric_factors, &p.epistemic_factors),
            Prediction::T(p) => {
                if p.dof <= 2.0 {
                    return None;
                }
                (p.row_scale.trace() / (p.dof - 2.0), &p.aleatoric_factors, &p.epistemic_factors)
            }
        };
        Some(al.iter().zip(ep).map(|(a, e)| (a * unit, e * unit)).collect())
    }

    pub fn dof(&self) -> Option<f64> {
        match self {
            Prediction::Normal(_) => None,
            Prediction::T(p) => Some(p.dof),
        }
    }

    pub fn points(&self) -> Result<Vec<PointPredictive>> {
        match self {
            Prediction::Normal(p) => PointPredictive::from_normal(p),
            Prediction::T(p) => PointPredictive::from_t(p),
        }
    }
}

impl FittedPosterior {
    pub fn compute(design: &Design, h: &ModelHyper) -> Result<Self> {
        match h {
            ModelHyper::Normal { hyper, v } => {
                let s = SuffStats::compute(design, &hyper.m, &hyper.k)?;
                let log_evidence = log_evidence_from(&s, v)?;
                Ok(Self { post_mean: s.post_mean, sxx_inv: s.sxx_inv, h: None, n: s.n, log_evidence })
            }
            ModelHyper::T { hyper } => {
                let s = TSuffStats::compute(design, hyper)?;
                let log_evidence = t_log_evidence_from(&s, hyper)?;
                let n = s.n();
                Ok(Self { post_mean: s.base.post_mean, sxx_inv: s.base.sxx_inv, h: Some(s.h), n, log_evidence })
            }
        }
    }

    pub fn predict(&self, hyper: &ModelHyper, phi_star: &DMatrix<f64>, dstar: &DVector<f64>) -> Result<Prediction> {
        match hyper {
            ModelHyper::Normal { v, .. } => Ok(Prediction::Normal(predict_parts(&self.post_mean, &self.sxx_inv, v, phi_star, dstar)?)),
            ModelHyper::T { hyper } => {
                let h = self.h.as_ref().ok_or_else(|| MbllError::InvalidParameter("posterior lacks Psi + S_y.x".into()))?;
                Ok(Prediction::T(t_predict_parts(&self.post_mean, &self.sxx_inv, h, self.n, hyper, phi_star, dstar)?))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vecform::{elbo_update_posterior, elbo_update_prior};
    use rand::Rng;
    use proptest::prelude::*;

    fn eye(n: usize) -> DMatrix<f64> {
        DMatrix::identity(n, n)
    }

    fn rand_mat(r: usize, c: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn scalar_design(y: f64) -> Design {
        Design::homoscedastic(DMatrix::from_element(1, 1, 1.0), DMatrix::from_element(1, 1, y), 1.0).unwrap()
    }

    fn ctx_with(m_post: f64, sxx_inv: f64, precision: f64, design: Design, m_tilde: f64) -> QContext {
        QContext {
            design,
            m_tilde: DMatrix::from_element(1, 1, m_tilde),
            k_tilde: eye(1),
            m_post: DMatrix::from_element(1, 1, m_post),
            sxx_inv: DMatrix::from_element(1, 1, sxx_inv),
            precision: DMatrix::from_element(1, 1, precision),
            h: None,
            nu_prime: None,
        }
    }

    #[test]
    fn q1_trivial_and_plugin() {
        let ctx = ctx_with(0.0, 0.0, 1.0, scalar_design(0.0), 0.0);
        assert_eq!(q1_loss(&ctx, &ctx.design, &[0]).unwrap(), 0.0);
        // ẽ = 2, φᵀSφ = 0.5
        let ctx = ctx_with(0.0, 0.5, 1.0, scalar_design(2.0), 0.0);
        assert!((q1_loss(&ctx, &ctx.design, &[0]).unwrap() - 2.25).abs() < 1e-15);
    }

    #[test]
    fn q1_t_plugin_and_reduction() {
        // ν' = 4, N = 1, H = 5: P = 5 · (1/5) = 1
        let ctx = ctx_with(0.0, 0.0, 5.0 / 5.0, scalar_design(1.0), 0.0);
        assert!((q1_loss(&ctx, &ctx.design, &[0]).unwrap() - 0.5).abs() < 1e-15);
        // H = (ν'+N)V recovers the Normal case
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let design = Design::new(rand_mat(3, 6, &mut rng), rand_mat(2, 6, &mut rng), DVector::from_element(6, 0.7)).unwrap();
        let v = rand_mat(2, 2, &mut rng);
        let v = &v * v.transpose() + eye(2);
        let m = rand_mat(2, 3, &mut rng);
        let nh = ModelHyper::Normal { hyper: NormalHyper::new(m.clone(), eye(3), Structure::Full).unwrap(), v: v.clone() };
        let cn = QContext::build(&design, &nh).unwrap();
        let mut ct = cn.clone();
        let c = 4.0 + 6.0;
        ct.h = Some(&v * c);
        ct.precision = Chol::new(&(&v * c), "h").unwrap().inverse() * c;
        let all: Vec<usize> = (0..6).collect();
        assert!((q1_loss(&cn, &design, &all).unwrap() - q1_loss(&ct, &design, &all).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn q1_singleton_batches_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let design = Design::new(rand_mat(3, 7, &mut rng), rand_mat(2, 7, &mut rng), DVector::from_fn(7, |i, _| 0.5 + i as f64 * 0.1)).unwrap();
        let h = ModelHyper::Normal { hyper: NormalHyper::new(rand_mat(2, 3, &mut rng), eye(3), Structure::Full).unwrap(), v: eye(2) };
        let ctx = QContext::build(&design, &h).unwrap();
        let all: Vec<usize> = (0..7).collect();
        let full = q1_loss(&ctx, &design, &all).unwrap();
        let mean = (0..7).map(|i| q1_loss(&ctx, &design, &[i]).unwrap()).sum::<f64>() / 7.0;
        assert!((full - mean).abs() < 1e-12);
    }

    #[test]
    fn fixed_m_hyperprior_scalar_update() {
        // M = 0, Λ = 1, κ = 1, S̃ = 0.5, F̃ = -1 (M̃_post = 1), V = 1
        let ctx = ctx_with(1.0, 0.5, 1.0, scalar_design(2.0), 0.0);
        let cfg = EmConfig {
            mode: EmMode::FixedMHyperprior,
            hyperprior: Some(HyperPrior::new(eye(1), 1.0).unwrap()),
            ..EmConfig::default()
        };
        let h = update_hyper_normal(&ctx, &cfg).unwrap();
        assert!((h.k[(0, 0)] - 1.25).abs() < 1e-15);
        assert_eq!(h.m[(0, 0)], 0.0);
        // numerical minimization of the printed Q2 + hyperprior in k
        let obj = |k: f64| 0.5 * k.ln() + 0.5 * 0.5 / k + 0.5 * 1.0 / k + 0.5 * k.ln() + 0.5 / k;
        let (mut lo, mut hi) = (0.01, 10.0);
        for _ in 0..200 {
            let (a, b) = (lo + (hi - lo) / 3.0, hi - (hi - lo) / 3.0);
            if obj(a) < obj(b) { hi = b } else { lo = a }
        }
        assert!((0.5 * (lo + hi) - 1.25).abs() < 1e-6);
    }

    #[test]
    fn huge_lambda_dominates() {
        let ctx = ctx_with(1.0, 0.5, 1.0, scalar_design(2.0), 0.0);
        let cfg = EmConfig {
            mode: EmMode::JointHyperprior,
            hyperprior: Some(HyperPrior::new(eye(1) * 1e6, 1.0).unwrap()),
            ..EmConfig::default()
        };
        let h = update_hyper_normal(&ctx, &cfg).unwrap();
        assert!((h.k[(0, 0)] / 5e5 - 1.0).abs() < 1e-5);
    }

    #[test]
    fn degenerate_scalar_sequence() {
        let design = scalar_design(2.0);
        let cfg = EmConfig { mode: EmMode::DegenerateJoint, max_iter: 10, rel_tol: 0.0, ..EmConfig::default() };
        let init = ModelHyper::Normal { hyper: NormalHyper::isotropic(1, 1, 1.0).unwrap(), v: eye(1) };
        let res = run_em(FeatureSource::Fixed(design), init, &cfg).unwrap();
        for r in &res.trace.records {
            assert!((r.trace_k - 1.0 / (r.iteration as f64 + 1.0)).abs() < 1e-14);
            // M̂ = 2, M₀ = 0: M_n - M̂ = (M₀ - M̂) K_n/K₀
            assert!((r.m_rel_err - r.trace_k).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_step_equals_elbo_updates() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let design = Design::new(rand_mat(3, 8, &mut rng), rand_mat(2, 8, &mut rng), DVector::from_element(8, 0.5)).unwrap();
        let nh = NormalHyper::new(rand_mat(2, 3, &mut rng), eye(3) * 2.0, Structure::Full).unwrap();
        let ctx = QContext::build(&design, &ModelHyper::Normal { hyper: nh.clone(), v: eye(2) }).unwrap();
        let cfg = EmConfig { mode: EmMode::DegenerateJoint, ..EmConfig::default() };
        let em = update_hyper_normal(&ctx, &cfg).unwrap();
        let (mq, kq) = elbo_update_posterior(&design, &nh).unwrap();
        let (m, k) = elbo_update_prior(&mq, &kq);
        assert_eq!(em.m, m);
        assert_eq!(em.k, symmetrize(&k));
    }

    fn q2_normal(k: &DMatrix<f64>, ctx: &QContext, m: &DMatrix<f64>, hp: Option<&HyperPrior>) -> f64 {
        let p = ctx.p() as f64;
        let kc = Chol::new(k, "k").unwrap();
        let f = m - &ctx.m_post;
        let mut v = 0.5 * p * kc.logdet() + 0.5 * p * kc.solve(&ctx.sxx_inv).trace()
            + 0.5 * (&ctx.precision * &f * kc.solve(&f.transpose())).trace();
        if let Some(hp) = hp {
            v -= hp.log_density(k).unwrap();
        }
        v
    }

    #[test]
    fn k_update_minimizes_q2() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let design = Design::new(rand_mat(3, 9, &mut rng), rand_mat(2, 9, &mut rng), DVector::from_element(9, 0.4)).unwrap();
        let v = rand_mat(2, 2, &mut rng);
        let v = &v * v.transpose() + eye(2);
        let lam = rand_mat(3, 3, &mut rng);
        let hp = HyperPrior::new(&lam * lam.transpose() + eye(3), 1.5).unwrap();
        let nh = NormalHyper::new(rand_mat(2, 3, &mut rng), eye(3), Structure::Full).unwrap();
        let ctx = QContext::build(&design, &ModelHyper::Normal { hyper: nh.clone(), v }).unwrap();
        for (mode, hpo) in [(EmMode::FixedMOnly, None), (EmMode::FixedMHyperprior, Some(hp.clone())), (EmMode::JointHyperprior, Some(hp.clone()))] {
            let cfg = EmConfig { mode, hyperprior: hpo.clone(), ..EmConfig::default() };
            let upd = update_hyper_normal(&ctx, &cfg).unwrap();
            let base = q2_normal(&upd.k, &ctx, &upd.m, hpo.as_ref());
            for _ in 0..20 {
                let d = rand_mat(3, 3, &mut rng);
                let d = (&d + d.transpose()) * 1e-3;
                let kp = &upd.k + &d;
                assert!(q2_normal(&kp, &ctx, &upd.m, hpo.as_ref()) > base - 1e-14, "{mode:?}");
            }
        }
    }

    #[test]
    fn t_updates_scalar_and_zero_shift() {
        // F̃ = 0 gives K = S̃
        let mut ctx = ctx_with(0.0, 0.5, 1.0, scalar_design(2.0), 0.0);
        ctx.h = Some(DMatrix::from_element(1, 1, 3.0));
        ctx.nu_prime = Some(4.0);
        ctx.precision = DMatrix::from_element(1, 1, 5.0 / 3.0);
        let cfg = EmConfig { mode: EmMode::FixedMOnly, ..EmConfig::default() };
        let h = update_hyper_t(&ctx, 6.0, &cfg).unwrap();
        assert!((h.k[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((h.psi[(0, 0)] - 2.4).abs() < 1e-14);
    }

    fn q2_t(k: &DMatrix<f64>, psi: &DMatrix<f64>, ctx: &QContext, m: &DMatrix<f64>) -> f64 {
        let p = ctx.p() as f64;
        let nu_p = ctx.nu_prime.unwrap();
        let kc = Chol::new(k, "k").unwrap();
        let f = m - &ctx.m_post;
        // ctx.precision = (ν'+N) H̃⁻¹
        0.5 * p * kc.logdet() + 0.5 * p * kc.solve(&ctx.sxx_inv).trace()
            - 0.5 * nu_p * Chol::new(psi, "psi").unwrap().logdet()
            + 0.5 * (&ctx.precision * (&f * kc.solve(&f.transpose()) + psi)).trace()
    }

    #[test]
    fn t_updates_minimize_q2_under_constraints() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let design = Design::new(rand_mat(3, 9, &mut rng), rand_mat(2, 9, &mut rng), DVector::from_element(9, 0.4)).unwrap();
        let th = THyper::new(rand_mat(2, 3, &mut rng), eye(3), eye(2) * 0.7, 7.0, Structure::Full, Structure::Full).unwrap();
        let ctx = QContext::build(&design, &ModelHyper::T { hyper: th.clone() }).unwrap();
        for (kc, pc) in [
            (Structure::Full, Structure::Full),
            (Structure::Diagonal, Structure::Diagonal),
            (Structure::Isotropic, Structure::Isotropic),
        ] {
            let cfg = EmConfig { mode: EmMode::FixedMOnly, k_constraint: kc, psi_constraint: pc, ..EmConfig::default() };
            let upd = update_hyper_t(&ctx, th.nu, &cfg).unwrap();
            let base = q2_t(&upd.k, &upd.psi, &ctx, &upd.m);
            for _ in 0..30 {
                let dk = kc.project(&{ let a = rand_mat(3, 3, &mut rng); &a + a.transpose() }) * 1e-3;
                let dp = pc.project(&{ let a = rand_mat(2, 2, &mut rng); &a + a.transpose() }) * 1e-3;
                assert!(q2_t(&(&upd.k + &dk), &upd.psi, &ctx, &upd.m) > base - 1e-14);
                assert!(q2_t(&upd.k, &(&upd.psi + &dp), &ctx, &upd.m) > base - 1e-14);
            }
        }
    }

    #[test]
    fn sigma_update_scalar_and_argmin() {
        let ctx = ctx_with(0.0, 0.5, 1.0, scalar_design(2.0), 0.0);
        assert!((update_sigma_const(&ctx).unwrap() - 4.5).abs() < 1e-14);
        let zero = ctx_with(2.0, 0.0, 1.0, scalar_design(2.0), 0.0);
        assert!(update_sigma_const(&zero).is_err());
        // random instance: closed form equals numerical argmin of -Q1 over σ²
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let design = Design::homoscedastic(rand_mat(3, 12, &mut rng), rand_mat(2, 12, &mut rng), 0.8).unwrap();
        let h = ModelHyper::Normal { hyper: NormalHyper::new(DMatrix::zeros(2, 3), eye(3), Structure::Full).unwrap(), v: eye(2) };
        let ctx = QContext::build(&design, &h).unwrap();
        let s_star = update_sigma_const(&ctx).unwrap();
        let all: Vec<usize> = (0..12).collect();
        let f = |s: f64| {
            let mut d = design.clone();
            d.d.fill(s);
            q1_loss(&ctx, &d, &all).unwrap()
        };
        let (mut lo, mut hi) = (1e-3, 20.0);
        for _ in 0..300 {
            let (a, b) = (lo + (hi - lo) / 3.0, hi - (hi - lo) / 3.0);
            if f(a) < f(b) { hi = b } else { lo = a }
        }
        assert!((0.5 * (lo + hi) - s_star).abs() < 1e-6);
    }

    #[test]
    fn config_validation() {
        let cfg = EmConfig { mode: EmMode::JointHyperprior, hyperprior: None, ..EmConfig::default() };
        assert!(cfg.validate().is_err());
        let js = r#"{"mode":"fixed_m_only","bogus":1}"#;
        assert!(serde_json::from_str::<EmConfig>(js).is_err());
    }

    #[test]
    fn fixed_basis_em_is_monotone_and_terminates() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let centers: Vec<f64> = (0..12).map(|i| -4.0 + i as f64 * 8.0 / 11.0).collect();
        let xs: Vec<f64> = (0..80).map(|_| rng.random_range(-4.0..4.0)).collect();
        let phi = DMatrix::from_fn(13, 80, |j, i| if j == 12 { 1.0 } else { (-(xs[i] - centers[j]).powi(2)).exp() });
        let y = DMatrix::from_fn(1, 80, |_, i| xs[i].sin() + 0.1 * rng.random_range(-1.0..1.0));
        let design = constant_design(phi, y, 0.5).unwrap();
        let init = ModelHyper::Normal { hyper: NormalHyper::isotropic(1, 13, 1.0).unwrap(), v: eye(1) };
        let cfg = EmConfig { mode: EmMode::FixedMOnly, k_constraint: Structure::Isotropic, learn_sigma: true, ..EmConfig::default() };
        let res = run_em(FeatureSource::Fixed(design), init, &cfg).unwrap();
        assert!(res.converged);
        assert!(res.trace.max_log_map_drop() <= 1e-8);
    }

    #[test]
    fn t_em_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let design = Design::new(rand_mat(4, 40, &mut rng), rand_mat(2, 40, &mut rng), DVector::from_fn(40, |_, _| rng.random_range(0.5..1.5))).unwrap();
        let init = ModelHyper::T { hyper: THyper::new(DMatrix::zeros(2, 4), eye(4), eye(2), 7.0, Structure::Full, Structure::Full).unwrap() };
        let hp = HyperPrior::new(eye(4) * 0.1, 1.0).unwrap();
        for (mode, hpo) in [(EmMode::FixedMOnly, None), (EmMode::FixedMHyperprior, Some(hp.clone())), (EmMode::JointHyperprior, Some(hp))] {
            let cfg = EmConfig { mode, hyperprior: hpo, max_iter: 100, ..EmConfig::default() };
            let res = run_em(FeatureSource::Fixed(design.clone()), init.clone(), &cfg).unwrap();
            assert!(res.trace.max_log_map_drop() <= 1e-8, "{mode:?}");
        }
    }

    #[test]
    fn network_em_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = DMatrix::from_fn(1, 60, |_, _| rng.random_range(-2.0..2.0));
        let y = x.map(|v: f64| v.sin()) + DMatrix::from_fn(1, 60, |_, _| 0.1 * rng.random_range(-1.0..1.0));
        let model = FeatureModel::new(1, &[8, 8], crate::nn::Activation::Softplus, true, 10);
        let d_t = model.phi_dim();
        let init = ModelHyper::Normal { hyper: NormalHyper::isotropic(1, d_t, 1.0).unwrap(), v: eye(1) };
        let cfg = EmConfig {
            mode: EmMode::FixedMOnly,
            k_constraint: Structure::Isotropic,
            max_iter: 15,
            sgd: SgdConfig { epochs: 2, batch_size: 16, learning_rate: 5e-3, ..SgdConfig::default() },
            ..EmConfig::default()
        };
        let src = FeatureSource::Network { model, x, y, trainable: vec![ParamGroup::Backbone, ParamGroup::Sigma] };
        let res = run_em(src, init, &cfg).unwrap();
        assert!(res.trace.max_log_map_drop() <= 1e-8);
        assert!(res.trace.records.last().unwrap().log_map > res.trace.records[0].log_map);
    }

    #[test]
    fn runs_are_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = DMatrix::from_fn(1, 30, |_, _| rng.random_range(-2.0..2.0));
        let y = x.map(|v: f64| v.cos());
        let model = FeatureModel::new(1, &[6], crate::nn::Activation::Softplus, true, 12);
        let init = ModelHyper::Normal { hyper: NormalHyper::isotropic(1, 7, 1.0).unwrap(), v: eye(1) };
        let cfg = EmConfig { mode: EmMode::FixedMOnly, k_constraint: Structure::Isotropic, max_iter: 5, ..EmConfig::default() };
        let run = || {
            let src = FeatureSource::Network { model: model.clone(), x: x.clone(), y: y.clone(), trainable: vec![ParamGroup::Backbone, ParamGroup::Sigma] };
            run_em(src, init.clone(), &cfg).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.hyper, b.hyper);
        let strip = |t: &EmTrace| t.records.iter().map(|r| (r.log_map, r.trace_k)).collect::<Vec<_>>();
        assert_eq!(strip(&a.trace), strip(&b.trace));
    }

    #[test]
    fn fitted_posterior_matches_direct_prediction() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let design = Design::new(rand_mat(3, 10, &mut rng), rand_mat(2, 10, &mut rng), DVector::from_element(10, 0.6)).unwrap();
        let phi_star = rand_mat(3, 4, &mut rng);
        let dstar = DVector::from_element(4, 0.6);
        let th = THyper::new(rand_mat(2, 3, &mut rng), eye(3), eye(2), 7.0, Structure::Full, Structure::Full).unwrap();
        let mt = ModelHyper::T { hyper: th.clone() };
        let fp = FittedPosterior::compute(&design, &mt).unwrap();
        let Prediction::T(a) = fp.predict(&mt, &phi_star, &dstar).unwrap() else { panic!() };
        let b = crate::bll_t::t_predict(&design, &th, &phi_star, &dstar).unwrap();
        assert_eq!(a.mean, b.mean);
        assert_eq!(a.dof, b.dof);
        let js = serde_json::to_string(&fp).unwrap();
        assert_eq!(serde_json::from_str::<FittedPosterior>(&js).unwrap(), fp);
        let mn = ModelHyper::Normal { hyper: NormalHyper::isotropic(2, 3, 1.0).unwrap(), v: eye(2) };
        let fp = FittedPosterior::compute(&design, &mn).unwrap();
        let pr = fp.predict(&mn, &phi_star, &dstar).unwrap();
        for (al, ep) in pr.point_traces().unwrap() {
            assert!((al - 1.2).abs() < 1e-12 && ep > 0.0);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn fixed_feature_em_is_monotone(p in 1usize..3, d_t in 1usize..5, n in 3usize..30, seed in 0u64..10_000, mode in 0usize..3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let design = Design::new(
                rand_mat(d_t, n, &mut rng),
                rand_mat(p, n, &mut rng) * 2.0,
                DVector::from_fn(n, |_, _| rng.random_range(0.3..2.0)),
            )
            .unwrap();
            let init = ModelHyper::Normal { hyper: NormalHyper::isotropic(p, d_t, 1.0).unwrap(), v: eye(p) };
            let (mode, hyperprior) = match mode {
                0 => (EmMode::FixedMOnly, None),
                1 => (EmMode::FixedMHyperprior, Some(HyperPrior::new(eye(d_t) * 0.1, 1.0).unwrap())),
                _ => (EmMode::JointHyperprior, Some(HyperPrior::new(eye(d_t) * 0.1, 1.0).unwrap())),
            };
            let cfg = EmConfig { mode, hyperprior, max_iter: 15, rel_tol: 0.0, ..EmConfig::default() };
            let res = run_em(FeatureSource::Fixed(design), init, &cfg).unwrap();
            let scale = 1.0 + res.trace.records[0].log_map.abs();
            prop_assert!(res.trace.max_log_map_drop() <= 1e-10 * scale);
        }
    }
}

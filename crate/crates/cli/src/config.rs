//! Run configuration. A single JSON document, validated before any
//! computation; unknown keys are rejected.

use std::path::{Path, PathBuf};

use mbll_core::em::EmConfig;
use mbll_core::nn::{Activation, ParamGroup, PretrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Known noise covariance `V`.
    Normal,
    /// Inverse-Wishart prior on `V`.
    T,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSpec {
    /// 1-D interpolation task on four unit intervals.
    Interp {
        #[serde(default = "default_interp_n")]
        n: usize,
        #[serde(default = "default_interp_split")]
        split: [f64; 3],
    },
    /// Draw from the linear model itself with `x ~ N(0, I)`.
    Linear {
        p: usize,
        d_x: usize,
        n: usize,
        #[serde(default = "one")]
        noise: f64,
        #[serde(default)]
        hetero: bool,
        #[serde(default = "default_split")]
        split: [f64; 3],
    },
    Csv {
        path: PathBuf,
        targets: Vec<String>,
        #[serde(default = "default_split")]
        split: [f64; 3],
    },
    /// Hourly air-quality station file, embedded with lags.
    Varx {
        path: PathBuf,
        #[serde(default = "one_usize")]
        p_lag: usize,
        #[serde(default = "two_usize")]
        q_lag: usize,
        /// Chronological split.
        #[serde(default = "default_split")]
        split: [f64; 3],
    },
}

fn default_interp_n() -> usize {
    500
}
fn default_interp_split() -> [f64; 3] {
    [0.8, 0.1, 0.1]
}
fn default_split() -> [f64; 3] {
    [0.72, 0.18, 0.10]
}
fn one() -> f64 {
    1.0
}
fn one_usize() -> usize {
    1
}
fn two_usize() -> usize {
    2
}
fn yes() -> bool {
    true
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SigmaKind {
    /// σ head on the shared backbone.
    #[default]
    Shared,
    /// Independent σ network with the backbone's widths.
    Separate,
    /// Input-independent σ.
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FeatureSpec {
    /// `φ(x) = [x; 1]`.
    Linear {
        #[serde(default = "yes")]
        bias: bool,
        #[serde(default = "one")]
        sigma2: f64,
    },
    /// Gaussian bumps on an even grid over `[lo, hi]` plus a constant, for
    /// scalar inputs.
    Rbf {
        centers: usize,
        lo: f64,
        hi: f64,
        width: f64,
        #[serde(default = "one")]
        sigma2: f64,
    },
    Network {
        hidden: Vec<usize>,
        #[serde(default = "default_activation")]
        activation: Activation,
        #[serde(default = "yes")]
        bias_feature: bool,
        #[serde(default)]
        sigma: SigmaKind,
        /// Density-network pretraining before EM.
        #[serde(default)]
        pretrain: Option<PretrainConfig>,
        /// Groups updated during EM. Empty freezes the network.
        #[serde(default = "default_trainable")]
        trainable: Vec<ParamGroup>,
    },
}

fn default_activation() -> Activation {
    Activation::Softplus
}
fn default_trainable() -> Vec<ParamGroup> {
    vec![ParamGroup::Backbone, ParamGroup::Sigma]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorSpec {
    /// `K₀ = k0 I`.
    pub k0: f64,
    /// `V = v I` (Normal model).
    pub v: f64,
    /// `Ψ₀ = psi0 I` (T model).
    pub psi0: f64,
    /// Inverse-Wishart dof; default `2p + 3`.
    pub nu: Option<f64>,
}

impl Default for PriorSpec {
    fn default() -> Self {
        Self { k0: 1.0, v: 1.0, psi0: 1.0, nu: None }
    }
}

/// Inverse-Wishart hyperprior `IW(λI, κ)` on `K`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperPriorSpec {
    pub lambda: f64,
    pub kappa: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub model_kind: ModelKind,
    #[serde(default)]
    pub seed: u64,
    pub data: DataSpec,
    pub features: FeatureSpec,
    #[serde(default)]
    pub prior: PriorSpec,
    #[serde(default)]
    pub hyperprior: Option<HyperPriorSpec>,
    #[serde(default)]
    pub em: EmConfig,
}

impl RunConfig {
    pub fn from_json(s: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = serde_json::from_str(s).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let s = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&s)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.version != CONFIG_VERSION {
            return bad(format!("unsupported config version {} (expected {CONFIG_VERSION})", self.version));
        }
        let split = match &self.data {
            DataSpec::Interp { n, split } => {
                if *n < 4 {
                    return bad("interp data needs n >= 4".into());
                }
                split
            }
            DataSpec::Linear { p, d_x, n, noise, split, .. } => {
                if *p == 0 || *d_x == 0 || *n == 0 || !(*noise > 0.0) {
                    return bad("linear data needs p, d_x, n >= 1 and noise > 0".into());
                }
                split
            }
            DataSpec::Csv { targets, split, .. } => {
                if targets.is_empty() {
                    return bad("csv data needs at least one target column".into());
                }
                split
            }
            DataSpec::Varx { p_lag, q_lag, split, .. } => {
                if *p_lag == 0 || *q_lag == 0 {
                    return bad("varx lag orders must be >= 1".into());
                }
                split
            }
        };
        if split.iter().any(|f| !(0.0..=1.0).contains(f)) || (split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad(format!("split fractions {split:?} must be in [0, 1] and sum to 1"));
        }
        match &self.features {
            FeatureSpec::Linear { sigma2, .. } if !(*sigma2 > 0.0) => return bad("sigma2 must be > 0".into()),
            FeatureSpec::Rbf { centers, lo, hi, width, sigma2 } => {
                if *centers == 0 || !(hi > lo) || !(*width > 0.0) || !(*sigma2 > 0.0) {
                    return bad("rbf needs centers >= 1, hi > lo, width > 0, sigma2 > 0".into());
                }
            }
            FeatureSpec::Network { hidden, trainable, pretrain, sigma, .. } => {
                if hidden.is_empty() || hidden.contains(&0) {
                    return bad("network needs at least one non-empty hidden layer".into());
                }
                if trainable.contains(&ParamGroup::Head) {
                    return bad("the output layer is not part of the feature map and cannot be trained by EM".into());
                }
                if pretrain.is_some() && *sigma == SigmaKind::Constant && trainable.is_empty() && !self.em.learn_sigma {
                    log::warn!("constant sigma is frozen at its pretrained value");
                }
                if !trainable.is_empty() && self.em.learn_sigma {
                    return bad("em.learn_sigma needs a frozen feature map (trainable = [])".into());
                }
            }
            _ => {}
        }
        let p = &self.prior;
        if !(p.k0 > 0.0 && p.v > 0.0 && p.psi0 > 0.0) {
            return bad("prior scales k0, v, psi0 must be > 0".into());
        }
        if let Some(hp) = &self.hyperprior {
            if !(hp.lambda > 0.0) || !(hp.kappa >= 0.0) {
                return bad("hyperprior needs lambda > 0 and kappa >= 0".into());
            }
            if self.em.hyperprior.is_some() {
                return bad("give the hyperprior either at top level or inside em, not both".into());
            }
        }
        let em_has_hp = self.hyperprior.is_some() || self.em.hyperprior.is_some();
        let mut em = self.em.clone();
        if em_has_hp && em.hyperprior.is_none() {
            em.hyperprior = Some(mbll_core::bll_normal::HyperPrior::new(nalgebra::DMatrix::identity(1, 1), 1.0).map_err(CliError::from)?);
        }
        em.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(())
    }
}

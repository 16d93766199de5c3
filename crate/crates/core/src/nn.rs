//! Feature networks `x ↦ (φ(x), σ²(x))` with hand-written reverse-mode
//! gradients, first-order optimizers and density-network pretraining.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dims, MbllError, Result};
use crate::linalg::{plainvec, rowmajor, Chol};

pub const MODEL_FORMAT_VERSION: u32 = 1;
const LEAKY_SLOPE: f64 = 0.01;

pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Softplus,
    LeakyRelu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Softplus => softplus(z),
            Activation::LeakyRelu => {
                if z > 0.0 {
                    z
                } else {
                    LEAKY_SLOPE * z
                }
            }
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Softplus => sigmoid(z),
            Activation::LeakyRelu => {
                if z > 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    #[serde(with = "rowmajor")]
    pub w: DMatrix<f64>,
    #[serde(with = "plainvec")]
    pub b: DVector<f64>,
}

impl Dense {
    /// Uniform on `±1/√fan_in` for weights and biases.
    pub fn init<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        Self {
            w: DMatrix::from_fn(fan_out, fan_in, |_, _| rng.random_range(-bound..bound)),
            b: DVector::from_fn(fan_out, |_, _| rng.random_range(-bound..bound)),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            w: DMatrix::zeros(self.w.nrows(), self.w.ncols()),
            b: DVector::zeros(self.b.len()),
        }
    }

    fn affine(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = &self.w * a;
        for mut col in z.column_iter_mut() {
            col += &self.b;
        }
        z
    }
}

/// Stack of dense layers, each followed by the activation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub activation: Activation,
}

struct MlpCache {
    /// `a_0 = x, a_1, …, a_L`.
    acts: Vec<DMatrix<f64>>,
    pre: Vec<DMatrix<f64>>,
}

impl Mlp {
    /// `sizes = [d_x, h_1, …, h_L]`.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], activation: Activation, rng: &mut R) -> Self {
        let layers = sizes.windows(2).map(|w| Dense::init(rng, w[0], w[1])).collect();
        Self { layers, activation }
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.w.ncols())
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.w.nrows())
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.layers.iter().fold(x.clone(), |a, l| l.affine(&a).map(|z| self.activation.apply(z)))
    }

    fn forward_cached(&self, x: &DMatrix<f64>) -> MlpCache {
        let mut acts = vec![x.clone()];
        let mut pre = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let z = l.affine(acts.last().expect("input pushed first"));
            acts.push(z.map(|v| self.activation.apply(v)));
            pre.push(z);
        }
        MlpCache { acts, pre }
    }

    /// Accumulates parameter gradients given `∂L/∂a_L`.
    fn backward(&self, cache: &MlpCache, d_out: DMatrix<f64>, grad: &mut Mlp) {
        let mut da = d_out;
        for (i, l) in self.layers.iter().enumerate().rev() {
            let dz = da.zip_map(&cache.pre[i], |g, z| g * self.activation.derivative(z));
            grad.layers[i].w += &dz * cache.acts[i].transpose();
            grad.layers[i].b += dz.column_sum();
            if i > 0 {
                da = l.w.transpose() * &dz;
            } else {
                break;
            }
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.iter().map(Dense::zeros_like).collect(),
            activation: self.activation,
        }
    }

    fn visit(&self, f: &mut dyn FnMut(f64)) {
        for l in &self.layers {
            l.w.iter().for_each(|&v| f(v));
            l.b.iter().for_each(|&v| f(v));
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut f64)) {
        for l in &mut self.layers {
            l.w.iter_mut().for_each(|v| f(v));
            l.b.iter_mut().for_each(|v| f(v));
        }
    }
}

/// Positive noise-scale head: `σ(x) = softplus(z(x)) + σ_floor`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SigmaHead {
    /// `z = wᵀh(x) + b` on the shared backbone output.
    Shared {
        #[serde(with = "plainvec")]
        w: DVector<f64>,
        b: f64,
    },
    /// `z = b`: homoscedastic.
    Constant { b: f64 },
    /// `z = wᵀg(x) + b` with an independent network `g`.
    Separate {
        net: Mlp,
        #[serde(with = "plainvec")]
        w: DVector<f64>,
        b: f64,
    },
}

/// Parameter groups, for freezing parts of a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Backbone,
    Sigma,
    Head,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureModel {
    pub version: u32,
    pub backbone: Mlp,
    pub include_bias_feature: bool,
    /// Appends `h(-x)` to the features.
    #[serde(default)]
    pub mirrored: bool,
    pub sigma_head: SigmaHead,
    pub sigma_floor: f64,
    /// Linear output layer `μ(x) = W φ(x)` of a density network. Not part
    /// of the feature map.
    #[serde(default, with = "crate::linalg::opt_rowmajor")]
    pub head: Option<DMatrix<f64>>,
}

/// Per-sample objectives whose gradients flow into the network.
pub enum Objective<'a> {
    /// `½[p ln s + s⁻¹(ẽᵀPẽ + p φᵀSφ)]` with `ẽ = y - M̃ φ`.
    /// `P = V⁻¹` (known `V`) or `(ν'+N)(Ψ̃+S̃_y·x)⁻¹` (unknown `V`).
    Q1 {
        y: &'a DMatrix<f64>,
        m_post: &'a DMatrix<f64>,
        precision: &'a DMatrix<f64>,
        sxx_inv: &'a DMatrix<f64>,
    },
    /// `s⁻¹(y - Wφ)ᵀV₀⁻¹(y - Wφ) + ln s`, using the model head `W`.
    Pdn {
        y: &'a DMatrix<f64>,
        v0_inv: &'a DMatrix<f64>,
    },
}

struct Forward {
    trunk: MlpCache,
    mirror: Option<MlpCache>,
    sigma_net: Option<MlpCache>,
    phi: DMatrix<f64>,
    z_sigma: DVector<f64>,
    sigma2: DVector<f64>,
}

impl FeatureModel {
    /// Backbone `d_x → hidden[0] → … → hidden[L-1]` with a shared σ head.
    pub fn new(
        d_x: usize,
        hidden: &[usize],
        activation: Activation,
        include_bias_feature: bool,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sizes = vec![d_x];
        sizes.extend_from_slice(hidden);
        let backbone = Mlp::new(&sizes, activation, &mut rng);
        let h = backbone.out_dim();
        let w = DVector::from_fn(h, |_, _| rng.random_range(-0.1..0.1) / (h.max(1) as f64).sqrt());
        Self {
            version: MODEL_FORMAT_VERSION,
            backbone,
            include_bias_feature,
            mirrored: false,
            sigma_head: SigmaHead::Shared { w, b: softplus_inv(1.0) },
            sigma_floor: 1e-6,
            head: None,
        }
    }

    /// Replaces the σ head by an independent network of the given widths.
    pub fn with_separate_sigma(mut self, hidden: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sizes = vec![self.backbone.in_dim()];
        sizes.extend_from_slice(hidden);
        let net = Mlp::new(&sizes, self.backbone.activation, &mut rng);
        let h = net.out_dim();
        self.sigma_head = SigmaHead::Separate {
            net,
            w: DVector::from_fn(h, |_, _| rng.random_range(-0.1..0.1) / (h.max(1) as f64).sqrt()),
            b: softplus_inv(1.0),
        };
        self
    }

    /// Homoscedastic `σ² = sigma2`.
    pub fn with_constant_sigma(mut self, sigma2: f64) -> Self {
        self.sigma_head = SigmaHead::Constant { b: 0.0 };
        self.set_constant_sigma2(sigma2);
        self
    }

    /// Adds a zero-initialized `p×d_t` output layer for density-network training.
    pub fn with_head(mut self, p: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d_t = self.phi_dim();
        let bound = 1.0 / (d_t.max(1) as f64).sqrt();
        self.head = Some(DMatrix::from_fn(p, d_t, |_, _| rng.random_range(-bound..bound)));
        self
    }

    pub fn input_dim(&self) -> usize {
        self.backbone.in_dim()
    }

    pub fn phi_dim(&self) -> usize {
        let h = self.backbone.out_dim();
        h * if self.mirrored { 2 } else { 1 } + usize::from(self.include_bias_feature)
    }

    /// Sets a constant head so that `σ² = sigma2`. Only valid for
    /// [`SigmaHead::Constant`].
    pub fn set_constant_sigma2(&mut self, sigma2: f64) {
        if let SigmaHead::Constant { b } = &mut self.sigma_head {
            let target = (sigma2.sqrt() - self.sigma_floor).max(1e-12);
            *b = softplus_inv(target);
        }
    }

    fn run(&self, x: &DMatrix<f64>) -> Result<Forward> {
        check_dims("network input", (self.input_dim(), x.ncols()), x.shape())?;
        let b = x.ncols();
        let trunk = self.backbone.forward_cached(x);
        let mirror = self.mirrored.then(|| self.backbone.forward_cached(&(-x)));
        let h = trunk.acts.last().expect("cache holds the input");
        let mut rows: Vec<&DMatrix<f64>> = vec![h];
        if let Some(m) = &mirror {
            rows.push(m.acts.last().expect("cache holds the input"));
        }
        let hdim = self.backbone.out_dim();
        let mut phi = DMatrix::zeros(self.phi_dim(), b);
        for (k, r) in rows.iter().enumerate() {
            phi.rows_mut(k * hdim, hdim).copy_from(*r);
        }
        if self.include_bias_feature {
            phi.row_mut(self.phi_dim() - 1).fill(1.0);
        }
        let (z_sigma, sigma_net) = match &self.sigma_head {
            SigmaHead::Shared { w, b: bias } => ((h.transpose() * w).add_scalar(*bias), None),
            SigmaHead::Constant { b: bias } => (DVector::from_element(b, *bias), None),
            SigmaHead::Separate { net, w, b: bias } => {
                let c = net.forward_cached(x);
                let z = (c.acts.last().expect("cache holds the input").transpose() * w).add_scalar(*bias);
                (z, Some(c))
            }
        };
        let sigma2 = z_sigma.map(|z| (softplus(z) + self.sigma_floor).powi(2));
        Ok(Forward {
            trunk,
            mirror,
            sigma_net,
            phi,
            z_sigma,
            sigma2,
        })
    }

    /// `(Φ, σ²)` for the columns of `x`.
    pub fn forward(&self, x: &DMatrix<f64>) -> Result<(DMatrix<f64>, DVector<f64>)> {
        let f = self.run(x)?;
        if f.phi.iter().chain(f.sigma2.iter()).any(|v| !v.is_finite()) {
            return Err(MbllError::NonFinite("network forward pass".into()));
        }
        Ok((f.phi, f.sigma2))
    }

    /// `μ(x) = W φ(x)` of a density network.
    pub fn predict_mean(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let w = self
            .head
            .as_ref()
            .ok_or_else(|| MbllError::InvalidParameter("model has no output layer".into()))?;
        Ok(w * self.forward(x)?.0)
    }

    fn zeros_like(&self) -> Self {
        let sigma_head = match &self.sigma_head {
            SigmaHead::Shared { w, .. } => SigmaHead::Shared { w: DVector::zeros(w.len()), b: 0.0 },
            SigmaHead::Constant { .. } => SigmaHead::Constant { b: 0.0 },
            SigmaHead::Separate { net, w, .. } => SigmaHead::Separate {
                net: net.zeros_like(),
                w: DVector::zeros(w.len()),
                b: 0.0,
            },
        };
        Self {
            version: self.version,
            backbone: self.backbone.zeros_like(),
            include_bias_feature: self.include_bias_feature,
            mirrored: self.mirrored,
            sigma_head,
            sigma_floor: self.sigma_floor,
            head: self.head.as_ref().map(|h| DMatrix::zeros(h.nrows(), h.ncols())),
        }
    }

    fn visit(&self, f: &mut dyn FnMut(f64, ParamGroup)) {
        self.backbone.visit(&mut |v| f(v, ParamGroup::Backbone));
        match &self.sigma_head {
            SigmaHead::Shared { w, b } => {
                w.iter().for_each(|&v| f(v, ParamGroup::Sigma));
                f(*b, ParamGroup::Sigma);
            }
            SigmaHead::Constant { b } => f(*b, ParamGroup::Sigma),
            SigmaHead::Separate { net, w, b } => {
                net.visit(&mut |v| f(v, ParamGroup::Sigma));
                w.iter().for_each(|&v| f(v, ParamGroup::Sigma));
                f(*b, ParamGroup::Sigma);
            }
        }
        if let Some(h) = &self.head {
            h.iter().for_each(|&v| f(v, ParamGroup::Head));
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut f64)) {
        self.backbone.visit_mut(f);
        match &mut self.sigma_head {
            SigmaHead::Shared { w, b } => {
                w.iter_mut().for_each(|v| f(v));
                f(b);
            }
            SigmaHead::Constant { b } => f(b),
            SigmaHead::Separate { net, w, b } => {
                net.visit_mut(f);
                w.iter_mut().for_each(|v| f(v));
                f(b);
            }
        }
        if let Some(h) = &mut self.head {
            h.iter_mut().for_each(|v| f(v));
        }
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit(&mut |v, _| out.push(v));
        out
    }

    pub fn param_groups(&self) -> Vec<ParamGroup> {
        let mut out = Vec::new();
        self.visit(&mut |_, g| out.push(g));
        out
    }

    pub fn n_params(&self) -> usize {
        self.params().len()
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        let n = self.n_params();
        if params.len() != n {
            return Err(MbllError::DimensionMismatch {
                context: "parameter vector",
                expected: n.to_string(),
                got: params.len().to_string(),
            });
        }
        let mut it = params.iter();
        self.visit_mut(&mut |v| *v = *it.next().expect("length checked"));
        Ok(())
    }

    /// Mean objective over the columns `idx` of `x`.
    pub fn loss(&self, obj: &Objective, x: &DMatrix<f64>, idx: &[usize]) -> Result<f64> {
        Ok(self.loss_impl(obj, x, idx, false)?.0)
    }

    /// Mean objective and its gradient, in [`FeatureModel::params`] order.
    pub fn loss_and_grad(&self, obj: &Objective, x: &DMatrix<f64>, idx: &[usize]) -> Result<(f64, Vec<f64>)> {
        let (l, g) = self.loss_impl(obj, x, idx, true)?;
        Ok((l, g.expect("gradient requested")))
    }

    fn loss_impl(
        &self,
        obj: &Objective,
        x: &DMatrix<f64>,
        idx: &[usize],
        want_grad: bool,
    ) -> Result<(f64, Option<Vec<f64>>)> {
        if idx.is_empty() {
            return Err(MbllError::InvalidParameter("empty batch".into()));
        }
        let xb = x.select_columns(idx);
        let fwd = self.run(&xb)?;
        let bsz = idx.len() as f64;
        let d_t = self.phi_dim();
        let mut dphi = DMatrix::zeros(d_t, idx.len());
        let mut ds = DVector::zeros(idx.len());
        let mut dhead = self.head.as_ref().map(|h| DMatrix::zeros(h.nrows(), h.ncols()));
        let mut total = 0.0;
        match obj {
            Objective::Q1 { y, m_post, precision, sxx_inv } => {
                let p = y.nrows() as f64;
                check_dims("Q1 posterior mean", (y.nrows(), d_t), m_post.shape())?;
                for (j, &i) in idx.iter().enumerate() {
                    let phi = fwd.phi.column(j);
                    let s = fwd.sigma2[j];
                    let e = y.column(i) - *m_post * phi;
                    let pe = *precision * &e;
                    let sphi = *sxx_inv * phi;
                    let quad = e.dot(&pe) + p * phi.dot(&sphi);
                    total += 0.5 * (p * s.ln() + quad / s);
                    if want_grad {
                        let g = (-(m_post.transpose() * &pe) + &sphi * p) / (s * bsz);
                        dphi.set_column(j, &g);
                        ds[j] = 0.5 * (p / s - quad / (s * s)) / bsz;
                    }
                }
            }
            Objective::Pdn { y, v0_inv } => {
                let w = self
                    .head
                    .as_ref()
                    .ok_or_else(|| MbllError::InvalidParameter("density network needs an output layer".into()))?;
                check_dims("output layer", (y.nrows(), d_t), w.shape())?;
                for (j, &i) in idx.iter().enumerate() {
                    let phi = fwd.phi.column(j);
                    let s = fwd.sigma2[j];
                    let r = y.column(i) - w * phi;
                    let vr = *v0_inv * &r;
                    let quad = r.dot(&vr);
                    total += quad / s + s.ln();
                    if want_grad {
                        dphi.set_column(j, &(-(w.transpose() * &vr) * (2.0 / (s * bsz))));
                        ds[j] = (1.0 / s - quad / (s * s)) / bsz;
                        if let Some(dh) = dhead.as_mut() {
                            *dh -= &vr * phi.transpose() * (2.0 / (s * bsz));
                        }
                    }
                }
            }
        }
        let loss = total / bsz;
        if !loss.is_finite() {
            return Err(MbllError::NonFinite("training objective".into()));
        }
        if !want_grad {
            return Ok((loss, None));
        }
        let mut grad = self.zeros_like();
        grad.head = dhead;
        // σ² = (softplus(z) + floor)²
        let dz = DVector::from_fn(idx.len(), |j, _| {
            let z = fwd.z_sigma[j];
            ds[j] * 2.0 * (softplus(z) + self.sigma_floor) * sigmoid(z)
        });
        let hdim = self.backbone.out_dim();
        let mut dh = dphi.rows(0, hdim).into_owned();
        match (&self.sigma_head, &mut grad.sigma_head) {
            (SigmaHead::Shared { w, .. }, SigmaHead::Shared { w: gw, b: gb }) => {
                let h = fwd.trunk.acts.last().expect("cache holds the input");
                *gw = h * &dz;
                *gb = dz.sum();
                dh += w * dz.transpose();
            }
            (SigmaHead::Constant { .. }, SigmaHead::Constant { b: gb }) => *gb = dz.sum(),
            (SigmaHead::Separate { net, w, .. }, SigmaHead::Separate { net: gnet, w: gw, b: gb }) => {
                let cache = fwd.sigma_net.as_ref().expect("separate head cached");
                let h = cache.acts.last().expect("cache holds the input");
                *gw = h * &dz;
                *gb = dz.sum();
                net.backward(cache, w * dz.transpose(), gnet);
            }
            _ => unreachable!("gradient mirrors the model structure"),
        }
        self.backbone.backward(&fwd.trunk, dh, &mut grad.backbone);
        if let Some(mc) = &fwd.mirror {
            // h(-x): the chain rule through the input sign leaves parameter
            // gradients unchanged in form
            let dm = dphi.rows(hdim, hdim).into_owned();
            self.backbone.backward(mc, dm, &mut grad.backbone);
        }
        Ok((loss, Some(grad.params())))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: FeatureModel = serde_json::from_str(s)?;
        if m.version != MODEL_FORMAT_VERSION {
            return Err(MbllError::InvalidParameter(format!(
                "unsupported model format version {}",
                m.version
            )));
        }
        Ok(m)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    AdamW,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Elementwise gradient clipping threshold; `0` disables it.
    pub grad_clip: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::AdamW,
            learning_rate: 1e-3,
            weight_decay: 0.01,
            grad_clip: 1.0,
            batch_size: 64,
            epochs: 5,
            seed: 0,
        }
    }
}

/// SGD or AdamW with decoupled weight decay. `mask[i] = false` freezes
/// parameter `i`.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Optimizer {
    pub fn new(cfg: &SgdConfig, n_params: usize) -> Self {
        Self {
            kind: cfg.optimizer,
            learning_rate: cfg.learning_rate,
            weight_decay: cfg.weight_decay,
            grad_clip: cfg.grad_clip,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], mask: &[bool]) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let (c1, c2) = (1.0 - B1.powi(self.t), 1.0 - B2.powi(self.t));
        let lr = self.learning_rate;
        for i in 0..params.len() {
            if !mask[i] {
                continue;
            }
            let mut g = grad[i];
            if self.grad_clip > 0.0 {
                g = g.clamp(-self.grad_clip, self.grad_clip);
            }
            params[i] -= lr * self.weight_decay * params[i];
            match self.kind {
                OptimizerKind::Sgd => params[i] -= lr * g,
                OptimizerKind::AdamW => {
                    self.m[i] = B1 * self.m[i] + (1.0 - B1) * g;
                    self.v[i] = B2 * self.v[i] + (1.0 - B2) * g * g;
                    params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + EPS);
                }
            }
        }
    }
}

/// One pass over shuffled mini-batches. Returns the mean batch loss.
pub fn train_epoch(
    model: &mut FeatureModel,
    obj: &Objective,
    x: &DMatrix<f64>,
    batch_size: usize,
    opt: &mut Optimizer,
    mask: &[bool],
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut order: Vec<usize> = (0..x.ncols()).collect();
    order.shuffle(rng);
    let mut params = model.params();
    let mut acc = 0.0;
    let mut batches = 0;
    for chunk in order.chunks(batch_size.max(1)) {
        let (l, g) = model.loss_and_grad(obj, x, chunk)?;
        opt.step(&mut params, &g, mask);
        model.set_params(&params)?;
        acc += l;
        batches += 1;
    }
    Ok(acc / batches.max(1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub sgd: SgdConfig,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Epochs without improvement before the learning rate is halved.
    pub plateau_patience: usize,
    pub plateau_factor: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            sgd: SgdConfig {
                epochs: 200,
                ..SgdConfig::default()
            },
            patience: 30,
            plateau_patience: 10,
            plateau_factor: 0.5,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct PretrainReport {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

/// Trains `(φ, σ, W)` on the density-network loss with early stopping on the
/// validation loss. Returns the best-validation weights.
pub fn pretrain_pdn(
    model: &FeatureModel,
    train: (&DMatrix<f64>, &DMatrix<f64>),
    val: (&DMatrix<f64>, &DMatrix<f64>),
    cfg: &PretrainConfig,
    v0: &DMatrix<f64>,
) -> Result<(FeatureModel, PretrainReport)> {
    let p = train.1.nrows();
    if model.head.is_none() {
        return Err(MbllError::InvalidParameter("density network needs an output layer".into()));
    }
    let v0_inv = Chol::new(v0, "baseline covariance V0")?.inverse();
    let mut model = model.clone();
    check_dims("output layer", (p, model.phi_dim()), model.head.as_ref().map(|h| h.shape()).unwrap_or_default())?;
    let train_obj = Objective::Pdn { y: train.1, v0_inv: &v0_inv };
    let val_obj = Objective::Pdn { y: val.1, v0_inv: &v0_inv };
    let val_idx: Vec<usize> = (0..val.0.ncols()).collect();
    let mut opt = Optimizer::new(&cfg.sgd, model.n_params());
    let mask = vec![true; model.n_params()];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.sgd.seed);
    let mut best = model.clone();
    let mut best_val = model.loss(&val_obj, val.0, &val_idx)?;
    let mut report = PretrainReport {
        train_loss: Vec::new(),
        val_loss: Vec::new(),
        best_epoch: 0,
        best_val_loss: best_val,
    };
    let mut since_best = 0;
    let mut since_plateau = 0;
    for epoch in 1..=cfg.sgd.epochs {
        let tl = train_epoch(&mut model, &train_obj, train.0, cfg.sgd.batch_size, &mut opt, &mask, &mut rng)?;
        let vl = model.loss(&val_obj, val.0, &val_idx)?;
        report.train_loss.push(tl);
        report.val_loss.push(vl);
        if vl < best_val {
            best_val = vl;
            best = model.clone();
            report.best_epoch = epoch;
            since_best = 0;
            since_plateau = 0;
        } else {
            since_best += 1;
            since_plateau += 1;
            if since_plateau >= cfg.plateau_patience {
                opt.learning_rate *= cfg.plateau_factor;
                since_plateau = 0;
            }
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    report.best_val_loss = best_val;
    Ok((best, report))
}

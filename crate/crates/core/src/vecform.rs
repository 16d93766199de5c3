//! Dense vectorized Bayesian regression with a noise covariance `U` that is
//! unrelated to the prior row covariance `V`. Used as an oracle for the
//! matrix-variate closed forms, so every size is capped.

use nalgebra::{DMatrix, DVector};

use crate::bll_normal::{Design, DesignBlock, NormalHyper, SuffStats};
use crate::error::{check_dims, MbllError, Result};
use crate::linalg::{kron, scale_columns, symmetrize, unvec, vec, Chol};
use crate::matvar::{kl_matnormal, mvn_logpdf, MatNormal};

/// Largest vector dimension (`pN`, `p·d_t`, `pL`) the dense oracle accepts.
pub const MAX_DENSE: usize = 128;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

fn guard(size: usize) -> Result<()> {
    if size > MAX_DENSE {
        return Err(MbllError::TooLarge { size, limit: MAX_DENSE });
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct VecGaussian {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl VecGaussian {
    pub fn logpdf(&self, x: &DVector<f64>) -> Result<f64> {
        mvn_logpdf(x, &self.mean, &self.cov)
    }

    /// Reshapes the mean back to a `rows×cols` matrix (column-major).
    pub fn mean_matrix(&self, rows: usize, cols: usize) -> DMatrix<f64> {
        unvec(&self.mean, rows, cols)
    }
}

struct Parts {
    s_chol: Chol,
    s: DMatrix<f64>,
    b: DMatrix<f64>,
    e: DVector<f64>,
}

fn parts(block: &DesignBlock, h: &NormalHyper, u: &DMatrix<f64>) -> Result<Parts> {
    let (p, d_t, n) = (block.p(), block.d_t(), block.n());
    guard(p * n)?;
    guard(p * d_t)?;
    check_dims("noise covariance U", (p, p), u.shape())?;
    check_dims("prior mean M", (p, d_t), h.m.shape())?;
    let phit_k = block.phi.transpose() * &h.k;
    let s = symmetrize(
        &(kron(&DMatrix::from_diagonal(&block.d), u) + kron(&(&phit_k * &block.phi), &block.v)),
    );
    let b = kron(&phit_k, &block.v);
    let s_chol = Chol::new(&s, "vectorized evidence covariance S")?;
    let e = vec(&(&block.y - &h.m * &block.phi));
    Ok(Parts { s_chol, s, b, e })
}

/// `vec(Y) ~ N(vec(MΦ), S)`, `S = D⊗U + (ΦᵀKΦ)⊗V`.
pub fn vec_evidence(block: &DesignBlock, h: &NormalHyper, u: &DMatrix<f64>) -> Result<VecGaussian> {
    let pr = parts(block, h, u)?;
    Ok(VecGaussian {
        mean: vec(&(&h.m * &block.phi)),
        cov: pr.s,
    })
}

/// `vec(A) | Y ~ N(vec(M) + BᵀS⁻¹vec(E), K⊗V - BᵀS⁻¹B)`.
pub fn vec_posterior(block: &DesignBlock, h: &NormalHyper, u: &DMatrix<f64>) -> Result<VecGaussian> {
    let pr = parts(block, h, u)?;
    let e = DMatrix::from_column_slice(pr.e.len(), 1, pr.e.as_slice());
    let mean = vec(&h.m) + (pr.b.transpose() * pr.s_chol.solve(&e)).column(0);
    let cov = symmetrize(&(kron(&h.k, &block.v) - pr.s_chol.quad_form(&pr.b)));
    Ok(VecGaussian { mean, cov })
}

/// Posterior predictive of `vec(Y*)` at features `Φ*` with noise scales `D*`.
pub fn vec_predictive(
    block: &DesignBlock,
    h: &NormalHyper,
    u: &DMatrix<f64>,
    phi_star: &DMatrix<f64>,
    dstar: &DVector<f64>,
) -> Result<VecGaussian> {
    let l = phi_star.ncols();
    guard(block.p() * l)?;
    check_dims("prediction features", (block.d_t(), l), phi_star.shape())?;
    check_dims("prediction noise scales", (l, 1), (dstar.len(), 1))?;
    let pr = parts(block, h, u)?;
    let cross = kron(&(phi_star.transpose() * &h.k * &block.phi), &block.v);
    let e = DMatrix::from_column_slice(pr.e.len(), 1, pr.e.as_slice());
    let mean = vec(&(&h.m * phi_star)) + (&cross * pr.s_chol.solve(&e)).column(0);
    let cov = symmetrize(
        &(kron(&DMatrix::from_diagonal(dstar), u)
            + kron(&(phi_star.transpose() * &h.k * phi_star), &block.v)
            - pr.s_chol.quad_form(&cross.transpose())),
    );
    Ok(VecGaussian { mean, cov })
}

/// Evidence lower bound `E_q[ln p(Y|A)] - KL(q ‖ π)` for the likelihood
/// `y_i ~ N(Aφ_i, σ_i² U)`, prior `π = MN(M, V, K)` and variational
/// posterior `q = MN(M̃, Ṽ, K̃)`. All constants are included, so the bound
/// is tight at the exact posterior when `U = V`.
pub fn elbo(data: &Design, prior: &MatNormal, q: &MatNormal, u: &DMatrix<f64>) -> Result<f64> {
    let (p, d_t, n) = (data.p(), data.d_t(), data.n());
    check_dims("variational posterior", (p, d_t), q.shape())?;
    check_dims("noise covariance U", (p, p), u.shape())?;
    let uc = Chol::new(u, "noise covariance U")?;
    let r = &data.y - q.mean() * &data.phi;
    let rdr = scale_columns(&r, &data.d_inv()) * r.transpose();
    let logdet_d: f64 = data.d.iter().map(|s| s.ln()).sum();
    let expected_loglik = -0.5 * (p * n) as f64 * LN_2PI
        - 0.5 * p as f64 * logdet_d
        - 0.5 * n as f64 * uc.logdet()
        - 0.5 * uc.solve(&rdr).trace()
        - 0.5 * (data.gram() * q.col_cov()).trace() * uc.solve(q.row_cov()).trace();
    Ok(expected_loglik - kl_matnormal(q, prior)?)
}

/// Optimal variational posterior for fixed prior and `U = V`:
/// `M̃ = S_yx S_xx⁻¹`, `K̃ = S_xx⁻¹`.
pub fn elbo_update_posterior(data: &Design, h: &NormalHyper) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let s = SuffStats::compute(data, &h.m, &h.k)?;
    Ok((s.post_mean, s.sxx_inv))
}

/// Optimal prior for a fixed variational posterior: `M = M̃`, `K = K̃`.
pub fn elbo_update_prior(q_mean: &DMatrix<f64>, q_col_cov: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    (q_mean.clone(), q_col_cov.clone())
}

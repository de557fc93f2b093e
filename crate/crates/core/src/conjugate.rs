//! Exact conjugate inference: the Gaussian linear model, multivariate
//! Bayesian linear regression with known column scale, and the
//! matrix-normal inverse-Wishart (MNIW) layer posterior with its mode and
//! sampler.
//!
//! The quadratic prior/posterior terms M₀ᵀR₀⁻¹M₀ and MᵀR⁻¹M are always
//! computed through Cholesky half-solves or triangular products, never
//! through explicit inverses of R: the subtraction in the scale update is the
//! main cancellation risk and the triangular route keeps both terms
//! symmetric PSD by construction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{cholesky, sample_gaussian, CholeskyFactor, Matrix, RngStream, SYMMETRY_TOL};

fn check_symmetric(m: &Matrix, context: &'static str) -> Result<()> {
    if m.rows() != m.cols() {
        return Err(Error::Shape { context, detail: format!("{}x{} not square", m.rows(), m.cols()) });
    }
    let scale = m.max_abs().max(1e-300);
    let mut max_asym = 0.0_f64;
    for i in 0..m.rows() {
        for j in 0..i {
            max_asym = max_asym.max((m.get(i, j) - m.get(j, i)).abs());
        }
    }
    if max_asym > SYMMETRY_TOL * scale {
        return Err(Error::NotSymmetric { max_asym, tol: SYMMETRY_TOL * scale });
    }
    Ok(())
}

/// Matrix-variate Gaussian over Dx×Dy weight matrices:
/// cov(vec W) = col_scale ⊗ row_scale (column stacking).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixNormal {
    mean: Matrix,
    row_scale: Matrix,
    col_scale: Matrix,
}

impl MatrixNormal {
    pub fn new(mean: Matrix, row_scale: Matrix, col_scale: Matrix) -> Result<Self> {
        check_symmetric(&row_scale, "MatrixNormal row_scale")?;
        check_symmetric(&col_scale, "MatrixNormal col_scale")?;
        if row_scale.rows() != mean.rows() || col_scale.rows() != mean.cols() {
            return Err(Error::Shape {
                context: "MatrixNormal::new",
                detail: format!(
                    "mean {}x{}, row_scale {}, col_scale {}",
                    mean.rows(),
                    mean.cols(),
                    row_scale.rows(),
                    col_scale.rows()
                ),
            });
        }
        Ok(MatrixNormal { mean, row_scale, col_scale })
    }

    pub fn mean(&self) -> &Matrix {
        &self.mean
    }

    pub fn row_scale(&self) -> &Matrix {
        &self.row_scale
    }

    pub fn col_scale(&self) -> &Matrix {
        &self.col_scale
    }
}

/// Inverse-Wishart over SPD Dy×Dy matrices; dof must exceed Dy−1 so the
/// distribution is proper, which is checked at construction and keeps the
/// mode denominator positive everywhere downstream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InverseWishart {
    scale: Matrix,
    dof: f64,
}

impl InverseWishart {
    pub fn new(scale: Matrix, dof: f64) -> Result<Self> {
        check_symmetric(&scale, "InverseWishart scale")?;
        let min = scale.rows() as f64 - 1.0;
        if !(dof > min) {
            return Err(Error::InvalidDof { dof, min });
        }
        Ok(InverseWishart { scale, dof })
    }

    pub fn scale(&self) -> &Matrix {
        &self.scale
    }

    pub fn dof(&self) -> f64 {
        self.dof
    }
}

/// Matrix-normal inverse-Wishart parameters (M, R, U, u). The same shape
/// serves as prior and posterior; the type aliases mark intent at call sites.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mniw {
    mean: Matrix,
    row_scale: Matrix,
    u_scale: Matrix,
    dof: f64,
}

pub type MniwPrior = Mniw;
pub type MniwPosterior = Mniw;

impl Mniw {
    pub fn new(mean: Matrix, row_scale: Matrix, u_scale: Matrix, dof: f64) -> Result<Self> {
        check_symmetric(&row_scale, "Mniw row_scale")?;
        check_symmetric(&u_scale, "Mniw u_scale")?;
        if row_scale.rows() != mean.rows() || u_scale.rows() != mean.cols() {
            return Err(Error::Shape {
                context: "Mniw::new",
                detail: format!(
                    "mean {}x{}, row_scale {}, u_scale {}",
                    mean.rows(),
                    mean.cols(),
                    row_scale.rows(),
                    u_scale.rows()
                ),
            });
        }
        let min = u_scale.rows() as f64 - 1.0;
        if !(dof > min) {
            return Err(Error::InvalidDof { dof, min });
        }
        Ok(Mniw { mean, row_scale, u_scale, dof })
    }

    /// Isotropic prior: M₀ = 0, R₀ = σ_r²·I, U₀ = σ_u²·I.
    pub fn isotropic_prior(dx: usize, dy: usize, sigma_r_sq: f64, sigma_u_sq: f64, dof: f64) -> Result<Self> {
        Mniw::new(
            Matrix::zeros(dx, dy),
            Matrix::scaled_identity(dx, sigma_r_sq),
            Matrix::scaled_identity(dy, sigma_u_sq),
            dof,
        )
    }

    pub fn mean(&self) -> &Matrix {
        &self.mean
    }

    pub fn row_scale(&self) -> &Matrix {
        &self.row_scale
    }

    pub fn u_scale(&self) -> &Matrix {
        &self.u_scale
    }

    pub fn dof(&self) -> f64 {
        self.dof
    }

    pub fn in_dim(&self) -> usize {
        self.mean.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.mean.cols()
    }

    pub fn noise(&self) -> InverseWishart {
        InverseWishart { scale: self.u_scale.clone(), dof: self.dof }
    }

    /// Weight distribution at a fixed column scale Σ.
    pub fn matrix_normal(&self, sigma: &Matrix) -> Result<MatrixNormal> {
        MatrixNormal::new(self.mean.clone(), self.row_scale.clone(), sigma.clone())
    }
}

/// Gaussian posterior over a weight vector.
#[derive(Clone, Debug, PartialEq)]
pub struct GlmPosterior {
    mean: Vec<f64>,
    cov: Matrix,
}

impl GlmPosterior {
    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn cov(&self) -> &Matrix {
        &self.cov
    }
}

/// Gaussian linear model update by natural-parameter addition:
/// V⁻¹ = V₀⁻¹ + XᵀΣ⁻¹X and m = V(V₀⁻¹m₀ + XᵀΣ⁻¹y), with Σ the N×N
/// observation noise covariance.
pub fn glm_posterior(
    x: &Matrix,
    y: &[f64],
    m0: &[f64],
    v0: &Matrix,
    sigma: &Matrix,
) -> Result<GlmPosterior> {
    let n = x.rows();
    let d = x.cols();
    if y.len() != n || m0.len() != d || v0.rows() != d || sigma.rows() != n {
        return Err(Error::Shape {
            context: "glm_posterior",
            detail: format!(
                "X {}x{}, y {}, m0 {}, V0 {}, Sigma {}",
                n,
                d,
                y.len(),
                m0.len(),
                v0.rows(),
                sigma.rows()
            ),
        });
    }
    let v0_chol = cholesky(v0, 0.0)?;
    let mut prec = v0_chol.inverse();
    let mut eta = v0_chol.solve_vec(m0);
    if n > 0 {
        let sigma_chol = cholesky(sigma, 0.0)?;
        let sig_inv_x = sigma_chol.solve_mat(x);
        prec.add_in_place(&x.tr_matmul(&sig_inv_x));
        let sig_inv_y = sigma_chol.solve_vec(y);
        for (e, v) in eta.iter_mut().zip(x.tr_matvec(&sig_inv_y)) {
            *e += v;
        }
    }
    let prec = prec.symmetrized();
    let prec_chol = cholesky(&prec, 0.0)?;
    let cov = prec_chol.inverse();
    let mean = prec_chol.solve_vec(&eta);
    Ok(GlmPosterior { mean, cov })
}

/// Posterior predictive at a test input: N(x*ᵀm, x*ᵀVx* + σ*²).
pub fn glm_predictive(post: &GlmPosterior, x_star: &[f64], noise_var: f64) -> Result<(f64, f64)> {
    if x_star.len() != post.mean.len() {
        return Err(Error::Shape {
            context: "glm_predictive",
            detail: format!("x* {}, posterior dim {}", x_star.len(), post.mean.len()),
        });
    }
    let mean = x_star.iter().zip(&post.mean).map(|(a, b)| a * b).sum::<f64>();
    let vx = post.cov.matvec(x_star);
    let var = x_star.iter().zip(&vx).map(|(a, b)| a * b).sum::<f64>() + noise_var;
    Ok((mean, var))
}

/// Multivariate Bayesian linear regression with known column scale Σ:
/// R = (R₀⁻¹+XᵀX)⁻¹, M = R(R₀⁻¹M₀+XᵀY). The conjugate form requires the
/// prior column scale to equal Σ, which is validated here rather than
/// trusted; the posterior mean is independent of Σ by construction.
pub fn mvblr_posterior(
    x: &Matrix,
    y: &Matrix,
    prior: &MatrixNormal,
    sigma: &Matrix,
) -> Result<MatrixNormal> {
    let dx = prior.mean.rows();
    let dy = prior.mean.cols();
    if x.cols() != dx || y.cols() != dy || x.rows() != y.rows() {
        return Err(Error::Shape {
            context: "mvblr_posterior",
            detail: format!("X {}x{}, Y {}x{}, prior {}x{}", x.rows(), x.cols(), y.rows(), y.cols(), dx, dy),
        });
    }
    let scale = prior.col_scale.max_abs().max(1e-300);
    if prior.col_scale.max_abs_diff(sigma) > 1e-12 * scale {
        return Err(Error::InvalidConfig(
            "mvblr_posterior: prior column scale must equal the noise covariance".into(),
        ));
    }
    let r0_chol = cholesky(&prior.row_scale, 0.0)?;
    let prec = r0_chol.inverse().add(&x.tr_matmul(x)).symmetrized();
    let prec_chol = cholesky(&prec, 0.0)?;
    let row_scale = prec_chol.inverse();
    let rhs = r0_chol.solve_mat(&prior.mean).add(&x.tr_matmul(y));
    let mean = prec_chol.solve_mat(&rhs);
    MatrixNormal::new(mean, row_scale, sigma.clone())
}

/// Prior quantities reused across MNIW updates: R₀⁻¹, R₀⁻¹M₀, and
/// U₀ + M₀ᵀR₀⁻¹M₀, all computed once from the prior.
#[derive(Clone, Debug)]
pub struct MniwPriorTerms {
    mean0: Matrix,
    row_prec: Matrix,
    row_prec_mean: Matrix,
    u_base: Matrix,
    dof0: f64,
}

impl MniwPriorTerms {
    pub fn from_prior(prior: &Mniw) -> Result<Self> {
        let r0_chol = cholesky(&prior.row_scale, 0.0)?;
        let row_prec = r0_chol.inverse();
        let row_prec_mean = r0_chol.solve_mat(&prior.mean);
        // M₀ᵀR₀⁻¹M₀ = (L₀⁻¹M₀)ᵀ(L₀⁻¹M₀), symmetric PSD by construction.
        let half = r0_chol.half_solve_mat(&prior.mean);
        let u_base = prior.u_scale.add(&half.tr_matmul(&half));
        Ok(MniwPriorTerms {
            mean0: prior.mean.clone(),
            row_prec,
            row_prec_mean,
            u_base,
            dof0: prior.dof,
        })
    }

    /// Raw terms for improper or degenerate priors (tests and limits).
    pub fn from_raw(mean0: Matrix, row_prec: Matrix, u_base: Matrix, dof0: f64) -> Self {
        let row_prec_mean = row_prec.matmul(&mean0);
        MniwPriorTerms { mean0, row_prec, row_prec_mean, u_base, dof0 }
    }

    pub fn mean0(&self) -> &Matrix {
        &self.mean0
    }

    pub fn row_prec(&self) -> &Matrix {
        &self.row_prec
    }

    pub fn dof0(&self) -> f64 {
        self.dof0
    }
}

/// MNIW posterior together with the Cholesky factors produced on the way:
/// the factor of the posterior row precision (R⁻¹) and of the posterior
/// scale U. Callers that sample repeatedly reuse the factors.
#[derive(Clone, Debug)]
pub struct MniwUpdate {
    pub posterior: Mniw,
    pub prec_chol: CholeskyFactor,
    pub u_chol: CholeskyFactor,
}

/// Core MNIW update from sufficient statistics Sxx = XᵀX, Sxy = XᵀY,
/// Syy = YᵀY and example count n:
///
/// R = (R₀⁻¹+Sxx)⁻¹, M = R(R₀⁻¹M₀+Sxy),
/// U = U₀ + M₀ᵀR₀⁻¹M₀ − MᵀR⁻¹M + Syy, u = u₀+n.
///
/// U is symmetrized after assembly and checked SPD (jitter policy first);
/// failure signals numerically inconsistent statistics.
pub fn mniw_posterior_from_stats(
    prior: &MniwPriorTerms,
    sxx: &Matrix,
    sxy: &Matrix,
    syy: &Matrix,
    n: f64,
) -> Result<MniwUpdate> {
    let prec = prior.row_prec.add(sxx).symmetrized();
    let prec_chol = cholesky(&prec, 0.0)?;
    let row_scale = prec_chol.inverse();
    let rhs = prior.row_prec_mean.add(sxy);
    let mean = prec_chol.solve_mat(&rhs);
    // MᵀR⁻¹M = Mᵀ(R⁻¹)M = (LᵀM)ᵀ(LᵀM) with L the factor of the precision.
    let t = prec_chol.tr_mul_mat(&mean);
    let u_scale = prior.u_base.add(syy).sub(&t.tr_matmul(&t)).symmetrized();
    let u_chol = cholesky(&u_scale, 0.0)?;
    let dof = prior.dof0 + n;
    let posterior = Mniw::new(mean, row_scale, u_scale, dof)?;
    Ok(MniwUpdate { posterior, prec_chol, u_chol })
}

/// MNIW posterior from raw data (X, Y).
pub fn mniw_posterior(x: &Matrix, y: &Matrix, prior: &Mniw) -> Result<Mniw> {
    if x.cols() != prior.in_dim() || y.cols() != prior.out_dim() || x.rows() != y.rows() {
        return Err(Error::Shape {
            context: "mniw_posterior",
            detail: format!(
                "X {}x{}, Y {}x{}, prior {}x{}",
                x.rows(),
                x.cols(),
                y.rows(),
                y.cols(),
                prior.in_dim(),
                prior.out_dim()
            ),
        });
    }
    let terms = MniwPriorTerms::from_prior(prior)?;
    let sxx = x.tr_matmul(x);
    let sxy = x.tr_matmul(y);
    let syy = y.tr_matmul(y);
    Ok(mniw_posterior_from_stats(&terms, &sxx, &sxy, &syy, x.rows() as f64)?.posterior)
}

/// Inverse-Wishart mode: Σ = U/(u + Dy + 1). Validity of the denominator is
/// guaranteed by the construction invariant u > Dy − 1.
pub fn iw_mode(iw: &InverseWishart) -> Matrix {
    let dy = iw.scale.rows() as f64;
    iw.scale.scale(1.0 / (iw.dof + dy + 1.0))
}

/// Draws W = M + L_R·A·L_Sᵀ with A i.i.d. standard normal and
/// L_R·L_Rᵀ = row_scale, L_S·L_Sᵀ = col_scale.
pub fn sample_matrix_normal(mn: &MatrixNormal, rng: &mut RngStream) -> Result<Matrix> {
    let l_r = cholesky(&mn.row_scale, 0.0)?;
    let l_s = cholesky(&mn.col_scale, 0.0)?;
    let a = sample_gaussian(rng, mn.mean.rows(), mn.mean.cols());
    Ok(mn.mean.add(&l_s.mul_tr_right(&l_r.mul_mat(&a))))
}

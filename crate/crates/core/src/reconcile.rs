//! Reconciliation weight estimation: minimum-trace weights, the equivalent
//! linear-model fit, shrinkage/MAP fits, and reconciled-error covariances.

use serde::Serialize;

use crate::error::{shape, Error, Result};
use crate::glm_core::{build_design_shared, fit_shared, SigmaKind, SigmaR};
use crate::hierarchy::Hierarchy;
use crate::matops::{inv_spd, solve_spd, symmetrize, Mat, Vector};

/// Observations `Y` (T × m) aligned with base forecasts `Ŷ` (T × n).
#[derive(Clone, Debug)]
pub struct ForecastPanel {
    y: Mat,
    yhat: Mat,
    times: Vec<String>,
}

impl ForecastPanel {
    pub fn new(y: Mat, yhat: Mat, times: Option<Vec<String>>) -> Result<Self> {
        if y.nrows() != yhat.nrows() {
            return Err(shape("panel rows", (y.nrows(), yhat.ncols()), yhat.shape()));
        }
        if y.nrows() == 0 {
            return Err(Error::InvalidParameter("panel has no rows".into()));
        }
        if y.iter().chain(yhat.iter()).any(|x| !x.is_finite()) {
            return Err(Error::InvalidParameter("panel contains non-finite values".into()));
        }
        let times = match times {
            Some(t) if t.len() == y.nrows() => t,
            Some(t) => return Err(shape("time labels", (y.nrows(), 1), (t.len(), 1))),
            None => (0..y.nrows()).map(|i| i.to_string()).collect(),
        };
        Ok(Self { y, yhat, times })
    }

    pub fn y(&self) -> &Mat {
        &self.y
    }

    pub fn yhat(&self) -> &Mat {
        &self.yhat
    }

    pub fn times(&self) -> &[String] {
        &self.times
    }

    pub fn t(&self) -> usize {
        self.y.nrows()
    }

    pub fn check_against(&self, h: &Hierarchy) -> Result<()> {
        if self.y.ncols() != h.m() {
            return Err(shape("observations", (self.t(), h.m()), self.y.shape()));
        }
        if self.yhat.ncols() != h.n() {
            return Err(shape("base forecasts", (self.t(), h.n()), self.yhat.shape()));
        }
        Ok(())
    }

    /// Base-forecast errors at every node, `Y Sᵀ − Ŷ`.
    pub fn base_errors(&self, h: &Hierarchy) -> Result<Mat> {
        self.check_against(h)?;
        Ok(&self.y * h.s().transpose() - &self.yhat)
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            y: &self.y * c,
            yhat: &self.yhat * c,
            times: self.times.clone(),
        }
    }
}

/// Which covariance produced a set of weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SigmaSource {
    /// Supplied by the caller.
    Supplied,
    /// Sample covariance of the panel's base errors.
    Sample,
    /// Sample covariance shrunk toward its diagonal.
    Shrunk,
    /// Ridge penalty toward bottom-up weights.
    Ridge,
}

#[derive(Clone, Debug, Serialize)]
pub struct ReconWeights {
    /// `m × n` weight matrix with `P S = I`.
    pub p: Mat,
    pub lambda: f64,
    pub sigma_source: SigmaSource,
    /// Free block `β_T^m`, `(n − m) × m`; `Pᵀ = [β; I − S_Tᵀ β]`.
    pub beta_t: Mat,
}

/// Shrinkage targets. Only the diagonal target corresponds to shrinking `Σ_h`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShrinkTarget {
    Diagonal,
    Ridge,
}

/// `P = J + βᵀ Uᵀ`.
pub fn weights_from_beta(h: &Hierarchy, beta_t: &Mat) -> Result<Mat> {
    if beta_t.shape() != (h.k(), h.m()) {
        return Err(shape("beta_t", (h.k(), h.m()), beta_t.shape()));
    }
    Ok(h.j() + beta_t.transpose() * h.u().transpose())
}

/// Recover the free block from a weight matrix (its first `n − m` columns).
pub fn beta_from_weights(h: &Hierarchy, p: &Mat) -> Result<Mat> {
    if p.shape() != (h.m(), h.n()) {
        return Err(shape("weight matrix", (h.m(), h.n()), p.shape()));
    }
    Ok(p.columns(0, h.k()).transpose())
}

/// `(1/T)(Y Sᵀ − Ŷ)ᵀ(Y Sᵀ − Ŷ)`.
pub fn sample_cov_base(panel: &ForecastPanel, h: &Hierarchy) -> Result<Mat> {
    let e = panel.base_errors(h)?;
    Ok(e.transpose() * &e / panel.t() as f64)
}

/// `(1 − λ) Σ + λ diag(Σ)`.
pub fn shrink_cov(sigma: &Mat, lambda: f64) -> Result<Mat> {
    check_unit(lambda)?;
    let mut out = sigma * (1.0 - lambda);
    for i in 0..sigma.nrows() {
        out[(i, i)] = sigma[(i, i)];
    }
    Ok(out)
}

fn check_unit(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) || !lambda.is_finite() {
        return Err(Error::InvalidParameter(format!("lambda = {lambda} is outside [0, 1]")));
    }
    Ok(())
}

/// Correlation-shrinkage intensity estimated from the data (Schäfer–Strimmer),
/// clipped to `[0, 1]`.
pub fn lambda_opt(errors: &Mat) -> Result<f64> {
    let t = errors.nrows();
    let p = errors.ncols();
    if t < 3 {
        return Err(Error::InvalidParameter(format!("lambda_opt needs T >= 3, got {t}")));
    }
    let tf = t as f64;
    let mut xs = errors.clone();
    for (j, mut col) in xs.column_iter_mut().enumerate() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
        let sd = (col.norm_squared() / (tf - 1.0)).sqrt();
        if sd <= 1e-300 || !sd.is_finite() {
            return Err(Error::Degenerate(format!("column {j} has zero variance")));
        }
        col /= sd;
    }
    // w̄_ij = mean_k x_ki x_kj and mean_k (x_ki x_kj)²
    let wbar = xs.transpose() * &xs / tf;
    let sq = xs.component_mul(&xs);
    let w2bar = sq.transpose() * &sq / tf;
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..p {
        for j in 0..p {
            if i != j {
                num += w2bar[(i, j)] - wbar[(i, j)].powi(2);
                den += wbar[(i, j)].powi(2);
            }
        }
    }
    if den <= 0.0 {
        return Ok(1.0);
    }
    Ok((num / ((tf - 1.0) * den)).clamp(0.0, 1.0))
}

/// Minimum-trace weights computed through the null-space form
/// `P = J − J Σ U (Uᵀ Σ U)⁻¹ Uᵀ`.
pub fn weights_mint(h: &Hierarchy, sigma: &Mat) -> Result<ReconWeights> {
    if sigma.shape() != (h.n(), h.n()) {
        return Err(shape("sigma", (h.n(), h.n()), sigma.shape()));
    }
    let u = h.u();
    let utsu = u.transpose() * sigma * &u;
    let utsj = u.transpose() * sigma * h.j().transpose();
    let beta_t = -solve_spd(&symmetrize(&utsu), &utsj)?;
    Ok(ReconWeights {
        p: weights_from_beta(h, &beta_t)?,
        lambda: 0.0,
        sigma_source: SigmaSource::Supplied,
        beta_t,
    })
}

/// Generalised least-squares weights `(Sᵀ Σ⁻¹ S)⁻¹ Sᵀ Σ⁻¹`, kept as a cross-check.
pub fn weights_mint_direct(h: &Hierarchy, sigma: &Mat) -> Result<Mat> {
    let sinv = inv_spd(sigma)?;
    let s = h.s();
    let a = s.transpose() * &sinv * s;
    solve_spd(&a, &(s.transpose() * sinv))
}

/// Weights from the shared linear model fitted by least squares.
pub fn fit_glm_recon(panel: &ForecastPanel, h: &Hierarchy) -> Result<ReconWeights> {
    panel.check_against(h)?;
    if panel.t() <= h.k() {
        return Err(Error::Degenerate(format!(
            "T = {} must exceed n - m = {}",
            panel.t(),
            h.k()
        )));
    }
    let (d, z) = build_design_shared(panel, h, false)?;
    let beta_t = fit_shared(&d, &z)?.matrix().expect("shared fit has matrix layout");
    Ok(ReconWeights {
        p: weights_from_beta(h, &beta_t)?,
        lambda: 0.0,
        sigma_source: SigmaSource::Sample,
        beta_t,
    })
}

/// Gaussian prior on the free block and inverse-Wishart prior on `Σ_r` whose
/// posterior mode coincides with diagonal-target shrinkage.
#[derive(Clone, Debug, Serialize)]
pub struct MapPrior {
    /// Prior mean of `β_T^m`, `(n − m) × m`.
    pub beta0_t: Mat,
    /// `Σ_{β,0} = (1 − λ)/(λT) · D⁻¹`.
    pub sigma_beta0: Mat,
    /// `D = Σ^d_T + S_T Σ^d_B S_Tᵀ`.
    pub d: Mat,
    pub psi: Mat,
    pub v: f64,
    pub lambda: f64,
    pub t: usize,
}

impl MapPrior {
    /// `Σ_{β,0}⁻¹ = λT/(1 − λ) · D`, formed without inverting.
    pub fn precision(&self) -> Mat {
        &self.d * (self.lambda * self.t as f64 / (1.0 - self.lambda))
    }
}

fn split_diag(h: &Hierarchy, diag: &Vector) -> Result<(Vector, Vector)> {
    if diag.len() != h.n() {
        return Err(shape("variance diagonal", (h.n(), 1), (diag.len(), 1)));
    }
    if diag.iter().any(|d| !(*d > 0.0) || !d.is_finite()) {
        return Err(Error::InvalidParameter("variance diagonal must be positive".into()));
    }
    Ok((diag.rows(0, h.k()).into_owned(), diag.rows(h.k(), h.m()).into_owned()))
}

/// `D = Σ^d_T + S_T Σ^d_B S_Tᵀ`.
pub fn prior_d(h: &Hierarchy, diag: &Vector) -> Result<Mat> {
    let (dt, db) = split_diag(h, diag)?;
    let st = h.s_top();
    Ok(Mat::from_diagonal(&dt) + &st * Mat::from_diagonal(&db) * st.transpose())
}

/// `V_1 = ((Σ^d_B)⁻¹ + S_Tᵀ (Σ^d_T)⁻¹ S_T)⁻¹`, the reconciled covariance under a
/// diagonal base covariance.
pub fn v1_matrix(h: &Hierarchy, diag: &Vector) -> Result<Mat> {
    let (dt, db) = split_diag(h, diag)?;
    let st = h.s_top();
    let a = Mat::from_diagonal(&db.map(|x| 1.0 / x))
        + st.transpose() * Mat::from_diagonal(&dt.map(|x| 1.0 / x)) * &st;
    inv_spd(&a)
}

pub fn map_priors(h: &Hierarchy, diag: &Vector, lambda: f64, t: usize) -> Result<MapPrior> {
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "priors need 0 < lambda < 1, got {lambda}"
        )));
    }
    let (_, db) = split_diag(h, diag)?;
    let d = prior_d(h, diag)?;
    let beta0_t = solve_spd(&d, &(h.s_top() * Mat::from_diagonal(&db)))?;
    let a = lambda * t as f64 / (1.0 - lambda);
    let sigma_beta0 = inv_spd(&d)? / a;
    let psi = v1_matrix(h, diag)? * a;
    Ok(MapPrior {
        beta0_t,
        sigma_beta0,
        d,
        psi,
        v: a - (h.n() as f64 + 1.0),
        lambda,
        t,
    })
}

/// Posterior-mode weights for shrinkage intensity `λ`; `λ = 0` is the plain fit.
pub fn fit_map(panel: &ForecastPanel, h: &Hierarchy, lambda: f64) -> Result<ReconWeights> {
    fit_map_target(panel, h, lambda, ShrinkTarget::Diagonal)
}

pub fn fit_map_target(
    panel: &ForecastPanel,
    h: &Hierarchy,
    lambda: f64,
    target: ShrinkTarget,
) -> Result<ReconWeights> {
    if !(0.0..1.0).contains(&lambda) {
        return Err(Error::InvalidParameter(format!("lambda = {lambda} must lie in [0, 1)")));
    }
    if lambda == 0.0 {
        return fit_glm_recon(panel, h);
    }
    let (d, z) = build_design_shared(panel, h, false)?;
    let x1 = d.x1();
    let t = panel.t() as f64;
    let (lhs, rhs, source) = match target {
        ShrinkTarget::Diagonal => {
            let diag = sample_cov_base(panel, h)?.diagonal();
            let dmat = prior_d(h, &diag)?;
            let (_, db) = split_diag(h, &diag)?;
            let lhs = x1.transpose() * x1 * (1.0 - lambda) + dmat * (lambda * t);
            let rhs = x1.transpose() * &z * (1.0 - lambda)
                + h.s_top() * Mat::from_diagonal(&db) * (lambda * t);
            (lhs, rhs, SigmaSource::Shrunk)
        }
        ShrinkTarget::Ridge => {
            let lhs = x1.transpose() * x1 + Mat::identity(h.k(), h.k()) * lambda;
            (lhs, x1.transpose() * &z, SigmaSource::Ridge)
        }
    };
    let beta_t = solve_spd(&symmetrize(&lhs), &rhs)?;
    Ok(ReconWeights {
        p: weights_from_beta(h, &beta_t)?,
        lambda,
        sigma_source: source,
        beta_t,
    })
}

/// Reconciled-error covariance of the requested kind.
pub fn sigma_recon(
    panel: &ForecastPanel,
    h: &Hierarchy,
    weights: &ReconWeights,
    kind: SigmaKind,
) -> Result<SigmaR> {
    panel.check_against(h)?;
    let t = panel.t();
    let tf = t as f64;
    let k = h.k() as f64;
    let lambda = weights.lambda;
    let p = &weights.p;
    let e = panel.y() - panel.yhat() * p.transpose();
    let pspt = || -> Result<Mat> {
        let sh = sample_cov_base(panel, h)?;
        let ss = shrink_cov(&sh, lambda)?;
        Ok(symmetrize(&(p * ss * p.transpose())))
    };
    let value = match kind {
        SigmaKind::Ml => e.transpose() * &e / tf,
        SigmaKind::Reml => {
            if tf <= k {
                return Err(Error::Degenerate(format!("REML needs T > n - m, got T = {t}")));
            }
            e.transpose() * &e / (tf - k)
        }
        SigmaKind::Map => {
            if lambda >= 1.0 {
                return Err(Error::InvalidParameter("MAP covariance needs lambda < 1".into()));
            }
            let mut inner = pspt()?;
            if lambda > 0.0 {
                let diag = sample_cov_base(panel, h)?.diagonal();
                inner -= v1_matrix(h, &diag)? * lambda;
            }
            inner * ((tf / (1.0 - lambda)) / (tf + k))
        }
        SigmaKind::Shrink => pspt()?,
        SigmaKind::Sreml => {
            let den = tf - k * (1.0 - lambda);
            if den <= 0.0 {
                return Err(Error::Degenerate(format!(
                    "T - (n - m)(1 - lambda) = {den} is not positive"
                )));
            }
            pspt()? * (tf / den)
        }
    };
    Ok(SigmaR {
        value: symmetrize(&value),
        kind,
        t,
        n: h.n(),
        m: h.m(),
        lambda,
    })
}

/// Reconciled bottom forecasts `Ỹ = Ŷ Pᵀ` and their coherent expansion `Ỹ Sᵀ`.
pub fn reconcile_points(h: &Hierarchy, p: &Mat, yhat: &Mat) -> Result<(Mat, Mat)> {
    if p.shape() != (h.m(), h.n()) {
        return Err(shape("weight matrix", (h.m(), h.n()), p.shape()));
    }
    if yhat.ncols() != h.n() {
        return Err(shape("base forecasts", (yhat.nrows(), h.n()), yhat.shape()));
    }
    let yt = yhat * p.transpose();
    let full = &yt * h.s().transpose();
    Ok((yt, full))
}

//! Multivariate linear model `y_t = X_t β + ε_t`, `ε_t ~ N(0, Σ_r)`.
//!
//! The shared design (every bottom series uses the same regressors) is the
//! reconciliation model; the general design allows a separate block of
//! regressors per series.

use serde::Serialize;

use crate::error::{shape, Error, Result};
use crate::hierarchy::Hierarchy;
use crate::matops::{dependent_columns, inv_spd, log_det_spd, max_abs, rank, solve_spd, Mat, Vector};
use crate::reconcile::ForecastPanel;

/// Relative singular value threshold for rank checks.
pub const RANK_TOL: f64 = 1e-10;

/// Smallest admissible eigenvalue of an iterated `Σ_r`, relative to the
/// response variance.
pub const COLLAPSE_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug)]
pub struct IterOpts {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for IterOpts {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 100,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DesignShared {
    x1: Mat,
    intercept: bool,
    m: usize,
}

impl DesignShared {
    pub fn new(x1: Mat, m: usize, intercept: bool) -> Self {
        Self { x1, intercept, m }
    }

    pub fn x1(&self) -> &Mat {
        &self.x1
    }

    pub fn intercept(&self) -> bool {
        self.intercept
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn t(&self) -> usize {
        self.x1.nrows()
    }

    /// Number of regressors per series.
    pub fn pbar(&self) -> usize {
        self.x1.ncols()
    }

    pub fn gram(&self) -> Mat {
        self.x1.transpose() * &self.x1
    }
}

/// Regressor row `ŷ_T − S_T ŷ_B` for a single vector of base forecasts.
pub fn design_row(yhat: &Vector, h: &Hierarchy) -> Result<Vector> {
    if yhat.len() != h.n() {
        return Err(shape("base forecast vector", (h.n(), 1), (yhat.len(), 1)));
    }
    let k = h.k();
    Ok(yhat.rows(0, k).into_owned() - h.s_top() * yhat.rows(k, h.m()))
}

/// Shared design `X1` (rows `ŷ_{T,t}ᵀ − ŷ_{B,t}ᵀ S_Tᵀ`) and response `Z = Y − Ŷ_B`.
pub fn build_design_shared(
    panel: &ForecastPanel,
    h: &Hierarchy,
    intercept: bool,
) -> Result<(DesignShared, Mat)> {
    panel.check_against(h)?;
    let k = h.k();
    let yhat_t = panel.yhat().columns(0, k);
    let yhat_b = panel.yhat().columns(k, h.m());
    let x = yhat_t - yhat_b * h.s_top().transpose();
    let x1 = if intercept {
        let mut with = Mat::from_element(x.nrows(), k + 1, 1.0);
        with.view_mut((0, 1), (x.nrows(), k)).copy_from(&x);
        with
    } else {
        x
    };
    let z = panel.y() - yhat_b;
    Ok((DesignShared::new(x1, h.m(), intercept), z))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum BetaLayout {
    /// `rows × cols` matrix whose column `i` holds the coefficients of series `i`.
    Matrix { rows: usize, cols: usize },
    /// Per-series coefficient counts.
    Ragged(Vec<usize>),
}

#[derive(Clone, Debug)]
pub struct BetaEstimate {
    /// Coefficients of all series stacked series by series (column-major for
    /// the matrix layout).
    pub coef: Vector,
    pub layout: BetaLayout,
}

impl BetaEstimate {
    pub fn from_matrix(b: &Mat) -> Self {
        Self {
            coef: crate::matops::vec(b),
            layout: BetaLayout::Matrix {
                rows: b.nrows(),
                cols: b.ncols(),
            },
        }
    }

    pub fn matrix(&self) -> Option<Mat> {
        match self.layout {
            BetaLayout::Matrix { rows, cols } => crate::matops::unvec(&self.coef, rows, cols).ok(),
            BetaLayout::Ragged(ref p) => {
                let first = *p.first()?;
                if p.iter().all(|&x| x == first) {
                    crate::matops::unvec(&self.coef, first, p.len()).ok()
                } else {
                    None
                }
            }
        }
    }

    fn sizes(&self) -> Vec<usize> {
        match &self.layout {
            BetaLayout::Matrix { rows, cols } => vec![*rows; *cols],
            BetaLayout::Ragged(p) => p.clone(),
        }
    }

    pub fn block(&self, i: usize) -> Vector {
        let sizes = self.sizes();
        let off: usize = sizes[..i].iter().sum();
        self.coef.rows(off, sizes[i]).into_owned()
    }
}

/// Least-squares fit of the shared design. The estimate does not depend on `Σ_r`.
pub fn fit_shared(d: &DesignShared, z: &Mat) -> Result<BetaEstimate> {
    if z.nrows() != d.t() || z.ncols() != d.m() {
        return Err(shape("response", (d.t(), d.m()), z.shape()));
    }
    check_full_rank(d.x1())?;
    let b = solve_spd(&d.gram(), &(d.x1().transpose() * z))?;
    Ok(BetaEstimate::from_matrix(&b))
}

pub(crate) fn check_full_rank(x: &Mat) -> Result<()> {
    if x.ncols() == 0 {
        return Ok(());
    }
    if x.nrows() < x.ncols() || rank(x, RANK_TOL) < x.ncols() {
        let mut columns = dependent_columns(x, RANK_TOL);
        if columns.is_empty() {
            columns = (x.nrows()..x.ncols()).collect();
        }
        return Err(Error::RankDeficient { columns });
    }
    Ok(())
}

/// Design with a separate regressor block per bottom series.
#[derive(Clone, Debug)]
pub struct DesignGeneral {
    blocks: Vec<Mat>,
    offsets: Vec<usize>,
}

impl DesignGeneral {
    pub fn new(blocks: Vec<Mat>) -> Result<Self> {
        let t = blocks
            .first()
            .ok_or_else(|| Error::InvalidParameter("design has no blocks".into()))?
            .nrows();
        let mut offsets = Vec::with_capacity(blocks.len());
        let mut off = 0;
        for (i, b) in blocks.iter().enumerate() {
            if b.nrows() != t {
                return Err(shape(&format!("design block {i}"), (t, b.ncols()), b.shape()));
            }
            offsets.push(off);
            off += b.ncols();
        }
        Ok(Self { blocks, offsets })
    }

    pub fn from_shared(d: &DesignShared) -> Self {
        Self::new(vec![d.x1().clone(); d.m()]).expect("shared blocks share row count")
    }

    pub fn m(&self) -> usize {
        self.blocks.len()
    }

    pub fn t(&self) -> usize {
        self.blocks[0].nrows()
    }

    pub fn p(&self) -> usize {
        self.blocks.iter().map(|b| b.ncols()).sum()
    }

    pub fn block(&self, i: usize) -> &Mat {
        &self.blocks[i]
    }

    pub fn offset(&self, i: usize) -> usize {
        self.offsets[i]
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.ncols()).collect()
    }

    /// `Xᵀ(I_T ⊗ Σ⁻¹)X` assembled block by block as `σ^{ij} X_iᵀ X_j`.
    pub fn gram(&self, sigma_inv: &Mat) -> Mat {
        let p = self.p();
        let mut g = Mat::zeros(p, p);
        for i in 0..self.m() {
            for j in 0..self.m() {
                let s = sigma_inv[(i, j)];
                if s == 0.0 {
                    continue;
                }
                let blk = self.blocks[i].transpose() * &self.blocks[j] * s;
                g.view_mut((self.offsets[i], self.offsets[j]), blk.shape())
                    .copy_from(&blk);
            }
        }
        g
    }

    /// Fitted values `T × m`.
    pub fn fitted(&self, beta: &BetaEstimate) -> Mat {
        let mut f = Mat::zeros(self.t(), self.m());
        for i in 0..self.m() {
            f.set_column(i, &(&self.blocks[i] * beta.block(i)));
        }
        f
    }
}

/// GLS estimate for a general design and given `Σ_r`.
pub fn fit_general(d: &DesignGeneral, z: &Mat, sigma_r: &Mat) -> Result<BetaEstimate> {
    if z.shape() != (d.t(), d.m()) {
        return Err(shape("response", (d.t(), d.m()), z.shape()));
    }
    if sigma_r.shape() != (d.m(), d.m()) {
        return Err(shape("sigma_r", (d.m(), d.m()), sigma_r.shape()));
    }
    let sinv = inv_spd(sigma_r)?;
    let g = d.gram(&sinv);
    // right-hand side Σ_j σ^{ij} X_iᵀ z_j
    let zs = z * &sinv;
    let mut rhs = Vector::zeros(d.p());
    for i in 0..d.m() {
        let r = d.block(i).transpose() * zs.column(i);
        rhs.rows_mut(d.offset(i), r.len()).copy_from(&r);
    }
    let coef = solve_spd(&g, &Mat::from_column_slice(d.p(), 1, rhs.as_slice()))
        .map_err(|_| Error::Degenerate("block Gram matrix is singular".into()))?;
    Ok(BetaEstimate {
        coef: coef.column(0).into_owned(),
        layout: BetaLayout::Ragged(d.sizes()),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SigmaKind {
    Ml,
    Reml,
    Map,
    Shrink,
    Sreml,
}

impl SigmaKind {
    pub fn name(&self) -> &'static str {
        match self {
            SigmaKind::Ml => "ml",
            SigmaKind::Reml => "reml",
            SigmaKind::Map => "map",
            SigmaKind::Shrink => "shrink",
            SigmaKind::Sreml => "sreml",
        }
    }
}

/// Residual covariance estimate together with the sizes it was computed from.
#[derive(Clone, Debug, Serialize)]
pub struct SigmaR {
    pub value: Mat,
    pub kind: SigmaKind,
    pub t: usize,
    pub n: usize,
    pub m: usize,
    pub lambda: f64,
}

impl SigmaR {
    pub fn is_pd(&self) -> bool {
        crate::matops::spd_factor(&self.value).is_ok()
    }
}

pub fn sigma_ml(residuals: &Mat) -> SigmaR {
    let t = residuals.nrows();
    let m = residuals.ncols();
    let value = residuals.transpose() * residuals / t.max(1) as f64;
    SigmaR {
        value,
        kind: SigmaKind::Ml,
        t,
        n: m,
        m,
        lambda: 0.0,
    }
}

/// `EᵀE / (T − p̄)` for a shared design with `p̄` regressors per series.
pub fn sigma_reml_shared(residuals: &Mat, pbar: usize) -> Result<SigmaR> {
    let t = residuals.nrows();
    if t <= pbar {
        return Err(Error::Degenerate(format!(
            "REML needs T > p̄, got T = {t}, p̄ = {pbar}"
        )));
    }
    let m = residuals.ncols();
    Ok(SigmaR {
        value: residuals.transpose() * residuals / (t - pbar) as f64,
        kind: SigmaKind::Reml,
        t,
        n: m + pbar,
        m,
        lambda: 0.0,
    })
}

/// REML covariance for a general design by fixed-point iteration of
/// `Σ = (EᵀE + C(Σ)) / T` where `C_ij = Tr((XᵀΣ⁻¹X)⁻¹_{I_j,I_i} X_iᵀ X_j)`.
pub fn sigma_reml_general(d: &DesignGeneral, residuals: &Mat, opts: &IterOpts) -> Result<SigmaR> {
    if residuals.shape() != (d.t(), d.m()) {
        return Err(shape("residuals", (d.t(), d.m()), residuals.shape()));
    }
    let t = d.t() as f64;
    let m = d.m();
    let ete = residuals.transpose() * residuals;
    let cross: Vec<Vec<Mat>> = (0..m)
        .map(|i| (0..m).map(|j| d.block(i).transpose() * d.block(j)).collect())
        .collect();
    let sizes = d.sizes();
    let correction = |sigma: &Mat| -> Result<Mat> {
        let g = d.gram(&inv_spd(sigma)?);
        let ginv = inv_spd(&g)?;
        let mut c = Mat::zeros(m, m);
        for i in 0..m {
            for j in 0..m {
                let blk = ginv.view((d.offset(j), d.offset(i)), (sizes[j], sizes[i]));
                c[(i, j)] = (blk * &cross[i][j]).trace();
            }
        }
        Ok(c)
    };

    let mut sigma = &ete / t;
    let mut damp = false;
    let mut prev_sign = 0.0;
    let mut change = f64::INFINITY;
    for _ in 0..opts.max_iter {
        let update = (&ete + correction(&sigma)?) / t;
        let delta = &update - &sigma;
        let (imax, _) = delta
            .iter()
            .enumerate()
            .fold((0, 0.0), |acc, (i, v)| if v.abs() > acc.1 { (i, v.abs()) } else { acc });
        let sign = delta.as_slice()[imax].signum();
        if prev_sign != 0.0 && sign != prev_sign {
            damp = true;
        }
        prev_sign = sign;
        let next = if damp { &sigma * 0.5 + &update * 0.5 } else { update };
        change = max_abs(&(&next - &sigma));
        sigma = crate::matops::symmetrize(&next);
        if change <= opts.tol * max_abs(&sigma).max(1.0) {
            return Ok(SigmaR {
                value: sigma,
                kind: SigmaKind::Reml,
                t: d.t(),
                n: m,
                m,
                lambda: 0.0,
            });
        }
    }
    Err(Error::NonConvergence {
        iterations: opts.max_iter,
        last_change: change,
        last: Box::new(sigma),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VarianceMode {
    Ml,
    Reml,
}

#[derive(Clone, Debug)]
pub struct RelaxationFit {
    pub beta: BetaEstimate,
    pub sigma: SigmaR,
    pub iterations: usize,
    /// Objective after each outer iteration (ML or restricted log-likelihood).
    pub objective: Vec<f64>,
}

/// Gaussian log-likelihood of the residuals, plus the restricted term for REML.
pub fn log_likelihood(d: &DesignGeneral, residuals: &Mat, sigma: &Mat, mode: VarianceMode) -> Result<f64> {
    let t = d.t() as f64;
    let m = d.m() as f64;
    let sinv = inv_spd(sigma)?;
    let quad = (residuals * &sinv).component_mul(residuals).sum();
    let mut ll = -0.5 * t * m * (2.0 * std::f64::consts::PI).ln() - 0.5 * t * log_det_spd(sigma)? - 0.5 * quad;
    if mode == VarianceMode::Reml {
        ll -= 0.5 * log_det_spd(&d.gram(&sinv))?;
    }
    Ok(ll)
}

/// Alternate GLS mean estimation and covariance estimation until both settle.
pub fn relaxation_fit(d: &DesignGeneral, z: &Mat, mode: VarianceMode, opts: &IterOpts) -> Result<RelaxationFit> {
    let max_p = d.sizes().into_iter().max().unwrap_or(0);
    if d.t() <= max_p {
        return Err(Error::Degenerate(format!(
            "T = {} must exceed the largest block width {max_p}",
            d.t()
        )));
    }
    let estimate = |beta: &BetaEstimate| -> Result<SigmaR> {
        let e = z - d.fitted(beta);
        match mode {
            VarianceMode::Ml => Ok(sigma_ml(&e)),
            VarianceMode::Reml => sigma_reml_general(d, &e, opts),
        }
    };
    // response scale for the collapse guard
    let zscale = (z.transpose() * z).diagonal().mean() / d.t() as f64;
    let guard = |s: &SigmaR| -> Result<()> {
        if crate::matops::min_eigenvalue(&s.value) <= COLLAPSE_TOL * zscale.max(f64::MIN_POSITIVE) {
            return Err(Error::NotPositiveDefinite(
                "residual covariance collapsed to (near) zero".into(),
            ));
        }
        Ok(())
    };
    let eye = Mat::identity(d.m(), d.m());
    let mut beta = fit_general(d, z, &eye)?;
    let mut sigma = estimate(&beta)?;
    guard(&sigma)?;
    let mut objective = Vec::new();
    for it in 1..=opts.max_iter {
        let nb = fit_general(d, z, &sigma.value).map_err(near_singular)?;
        let ns = estimate(&nb)?;
        guard(&ns)?;
        let db = (&nb.coef - &beta.coef).amax();
        let ds = max_abs(&(&ns.value - &sigma.value));
        let scale_b = beta.coef.amax().max(1.0);
        let scale_s = max_abs(&sigma.value).max(1.0);
        beta = nb;
        sigma = ns;
        let e = z - d.fitted(&beta);
        objective.push(log_likelihood(d, &e, &sigma.value, mode).map_err(near_singular)?);
        if db <= opts.tol * scale_b && ds <= opts.tol * scale_s {
            return Ok(RelaxationFit {
                beta,
                sigma,
                iterations: it,
                objective,
            });
        }
    }
    Err(Error::NonConvergence {
        iterations: opts.max_iter,
        last_change: f64::NAN,
        last: Box::new(sigma.value),
    })
}

fn near_singular(e: Error) -> Error {
    match e {
        Error::NotPositiveDefinite(msg) => {
            Error::NotPositiveDefinite(format!("residual covariance collapsed ({msg})"))
        }
        other => other,
    }
}

//! Parameter and weight covariances, forecast covariance with parameter
//! uncertainty, Wald and F statistics, and variance-separation tables.

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, FisherSnedecor};

use crate::error::{shape, Error, Result};
use crate::glm_core::{check_full_rank, DesignGeneral};
use crate::hierarchy::{Hierarchy, Level, NodeSelection};
use crate::matops::{inv_spd, kron, symmetrize, Mat, Vector};
use crate::reconcile::{reconcile_points, ForecastPanel, MapPrior, ReconWeights};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaCovFlavor {
    PlainShared,
    PlainGeneral,
    Map,
}

/// How the `(X1ᵀX1 + ·)` sandwich for the MAP covariance is formed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum MapCovForm {
    /// `(G + Σ_{β,0}⁻¹)⁻¹ G (G + Σ_{β,0}⁻¹)⁻¹`, consistent with the MAP estimator.
    #[default]
    Precision,
    /// `(G + Σ_{β,0})⁻¹ G (G + Σ_{β,0})⁻¹`, kept for compatibility.
    Literal,
}

#[derive(Clone, Debug)]
pub enum CovRepr {
    /// `Σ_r ⊗ inner`, never materialised unless asked.
    Kron { sigma_r: Mat, inner: Mat },
    Dense(Mat),
}

/// Covariance of `vec(β̂)` in the column-stacking layout.
#[derive(Clone, Debug)]
pub struct BetaCov {
    pub flavor: BetaCovFlavor,
    pub repr: CovRepr,
}

impl BetaCov {
    pub fn dim(&self) -> usize {
        match &self.repr {
            CovRepr::Kron { sigma_r, inner } => sigma_r.nrows() * inner.nrows(),
            CovRepr::Dense(v) => v.nrows(),
        }
    }

    pub fn dense(&self) -> Mat {
        match &self.repr {
            CovRepr::Kron { sigma_r, inner } => kron(sigma_r, inner),
            CovRepr::Dense(v) => v.clone(),
        }
    }

    pub fn diag(&self) -> Vector {
        match &self.repr {
            CovRepr::Kron { sigma_r, inner } => {
                let p = inner.nrows();
                Vector::from_fn(self.dim(), |r, _| sigma_r[(r / p, r / p)] * inner[(r % p, r % p)])
            }
            CovRepr::Dense(v) => v.diagonal(),
        }
    }
}

/// `Σ_r ⊗ (X1ᵀX1)⁻¹`.
pub fn beta_cov_shared(x1: &Mat, sigma_r: &Mat) -> Result<BetaCov> {
    check_full_rank(x1)?;
    Ok(BetaCov {
        flavor: BetaCovFlavor::PlainShared,
        repr: CovRepr::Kron {
            sigma_r: sigma_r.clone(),
            inner: inv_spd(&(x1.transpose() * x1))?,
        },
    })
}

/// `(Xᵀ(I_T ⊗ Σ_r⁻¹)X)⁻¹` for a general design.
pub fn beta_cov_general(d: &DesignGeneral, sigma_r: &Mat) -> Result<BetaCov> {
    let g = d.gram(&inv_spd(sigma_r)?);
    let v = inv_spd(&g).map_err(|_| Error::Degenerate("block Gram matrix is singular".into()))?;
    Ok(BetaCov {
        flavor: BetaCovFlavor::PlainGeneral,
        repr: CovRepr::Dense(v),
    })
}

/// Sandwich covariance of a penalised estimate `(G + Q)⁻¹ X1ᵀ Z`.
pub fn beta_cov_penalized(x1: &Mat, sigma_r: &Mat, penalty: &Mat) -> Result<BetaCov> {
    let g = x1.transpose() * x1;
    if penalty.shape() != g.shape() {
        return Err(shape("penalty", g.shape(), penalty.shape()));
    }
    let c = inv_spd(&symmetrize(&(&g + penalty)))?;
    Ok(BetaCov {
        flavor: BetaCovFlavor::Map,
        repr: CovRepr::Kron {
            sigma_r: sigma_r.clone(),
            inner: symmetrize(&(&c * g * &c)),
        },
    })
}

pub fn beta_cov_map(x1: &Mat, sigma_r: &Mat, prior: &MapPrior, form: MapCovForm) -> Result<BetaCov> {
    match form {
        MapCovForm::Precision => beta_cov_penalized(x1, sigma_r, &prior.precision()),
        MapCovForm::Literal => beta_cov_penalized(x1, sigma_r, &prior.sigma_beta0),
    }
}

/// Covariance of `vec(Pᵀ)` with standard errors laid out like `P`.
#[derive(Clone, Debug, Serialize)]
pub struct WeightCov {
    pub v: Mat,
    pub se: Mat,
    pub m: usize,
    pub n: usize,
}

impl WeightCov {
    /// Position of `P[i, k]` in `vec(Pᵀ)`.
    pub fn index(&self, i: usize, k: usize) -> usize {
        i * self.n + k
    }

    pub fn cov(&self, a: (usize, usize), b: (usize, usize)) -> f64 {
        self.v[(self.index(a.0, a.1), self.index(b.0, b.1))]
    }

    pub fn corr(&self, a: (usize, usize), b: (usize, usize)) -> f64 {
        let va = self.cov(a, a);
        let vb = self.cov(b, b);
        if va <= 0.0 || vb <= 0.0 {
            return f64::NAN;
        }
        self.cov(a, b) / (va * vb).sqrt()
    }

    pub fn corr_matrix(&self) -> Mat {
        let d = self.v.diagonal().map(|x| if x > 0.0 { 1.0 / x.sqrt() } else { f64::NAN });
        Mat::from_diagonal(&d) * &self.v * Mat::from_diagonal(&d)
    }
}

/// `V_P = (I_m ⊗ U) V_β (I_m ⊗ U)ᵀ` with `U = [I; −S_Tᵀ]`, since `Pᵀ = Jᵀ + U β`.
pub fn weight_cov(bcov: &BetaCov, h: &Hierarchy) -> Result<WeightCov> {
    let (m, n, k) = (h.m(), h.n(), h.k());
    if bcov.dim() != m * k {
        return Err(Error::Unsupported(format!(
            "weight covariance needs {} free parameters, got {}",
            m * k,
            bcov.dim()
        )));
    }
    let u = h.u();
    let v = match &bcov.repr {
        CovRepr::Kron { sigma_r, inner } => kron(sigma_r, &(&u * inner * u.transpose())),
        CovRepr::Dense(vb) => {
            let mut out = Mat::zeros(m * n, m * n);
            for i in 0..m {
                for j in 0..m {
                    let blk = &u * vb.view((i * k, j * k), (k, k)) * u.transpose();
                    out.view_mut((i * n, j * n), (n, n)).copy_from(&blk);
                }
            }
            out
        }
    };
    let v = symmetrize(&v);
    let se = Mat::from_fn(m, n, |i, c| v[(i * n + c, i * n + c)].max(0.0).sqrt());
    Ok(WeightCov { v, se, m, n })
}

/// `Σ_par = X_t V[β̂] X_tᵀ + Σ` with `X_t = I_m ⊗ x_tᵀ`.
pub fn forecast_cov(x: &Vector, bcov: &BetaCov, sigma: &Mat) -> Result<Mat> {
    let m = sigma.nrows();
    let param = match &bcov.repr {
        CovRepr::Kron { sigma_r, inner } => {
            if x.len() != inner.nrows() {
                return Err(shape("design row", (inner.nrows(), 1), (x.len(), 1)));
            }
            sigma_r * (x.transpose() * inner * x)[(0, 0)]
        }
        CovRepr::Dense(v) => {
            let k = x.len();
            if v.nrows() != m * k {
                return Err(shape("design row", (v.nrows() / m.max(1), 1), (k, 1)));
            }
            Mat::from_fn(m, m, |i, j| {
                (x.transpose() * v.view((i * k, j * k), (k, k)) * x)[(0, 0)]
            })
        }
    };
    if param.shape() != sigma.shape() {
        return Err(shape("sigma", param.shape(), sigma.shape()));
    }
    Ok(symmetrize(&(param + sigma)))
}

/// Wald statistics `β / se`, laid out like `β_T^m`.
pub fn wald(beta_t: &Mat, bcov: &BetaCov) -> Result<Mat> {
    let d = bcov.diag();
    if d.len() != beta_t.len() {
        return Err(shape("beta covariance", (beta_t.len(), beta_t.len()), (d.len(), d.len())));
    }
    let (k, m) = beta_t.shape();
    let mut z = Mat::zeros(k, m);
    for i in 0..m {
        for r in 0..k {
            let v = d[i * k + r];
            if !(v > 0.0) {
                return Err(Error::Degenerate(format!(
                    "zero variance for coefficient ({r}, {i})"
                )));
            }
            z[(r, i)] = beta_t[(r, i)] / v.sqrt();
        }
    }
    Ok(z)
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct FTest {
    pub f: f64,
    pub df1: usize,
    pub df2: usize,
    pub p_value: f64,
}

/// Ratio of summed model and residual sums of squares over the nodes in `sel`.
pub fn f_test(
    panel: &ForecastPanel,
    h: &Hierarchy,
    weights: &ReconWeights,
    sel: &NodeSelection,
) -> Result<FTest> {
    let t = panel.t();
    let df1 = h.k();
    if t <= df1 {
        return Err(Error::Degenerate(format!(
            "residual degrees of freedom T - (n - m) = {} - {df1} is not positive",
            t
        )));
    }
    let df2 = t - df1;
    let (yt, full) = reconcile_points(h, &weights.p, panel.yhat())?;
    let ones_i = Vector::from_element(sel.q(), 1.0);
    let modl = (full - panel.yhat()).select_columns(&sel.indices) * &ones_i;
    let resid = (panel.y() - yt) * (sel.s_i.transpose() * &ones_i);
    let den = resid.norm_squared() / df2 as f64;
    let num = modl.norm_squared() / df1 as f64;
    // a perfect fit gives F = ∞, or NaN when nothing moved either
    let f = if den > 0.0 {
        num / den
    } else if num > 0.0 {
        f64::INFINITY
    } else {
        f64::NAN
    };
    let dist = FisherSnedecor::new(df1 as f64, df2 as f64)
        .map_err(|e| Error::InvalidParameter(e.to_string()))?;
    Ok(FTest {
        f,
        df1,
        df2,
        p_value: if f.is_nan() { f64::NAN } else { 1.0 - dist.cdf(f) },
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct SeparationRow {
    pub label: String,
    /// `‖y_I − ŷ_I‖² / T`
    pub sse_base: f64,
    /// `‖y_I − ỹ_I‖² / T`
    pub sse_recon: f64,
    /// `‖ỹ_I − ŷ_I‖² / T`
    pub ss_mod: f64,
    pub f: f64,
    /// `‖y_I − ỹ^λ_I‖² / T`
    pub sse_shrunk: f64,
    /// `‖ỹ^λ_I − ŷ_I‖² / T`
    pub ss_mod_shrunk: f64,
    /// `2 (y_I − ỹ^λ_I)ᵀ(ỹ^λ_I − ŷ_I) / T`
    pub cross: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SeparationTable {
    pub rows: Vec<SeparationRow>,
    pub total: SeparationRow,
    pub lambda: f64,
    pub df1: usize,
    pub df2: usize,
    /// The F column lacks its reference distribution when the unshrunk fit
    /// was itself shrunk.
    pub f_nominal: bool,
}

pub const SEPARATION_HEADER: [&str; 8] = [
    "level",
    "sse_base",
    "sse_recon",
    "ss_recon_base",
    "f",
    "sse_shrunk",
    "ss_shrunk_base",
    "cross",
];

impl SeparationRow {
    pub fn values(&self) -> [f64; 7] {
        [
            self.sse_base,
            self.sse_recon,
            self.ss_mod,
            self.f,
            self.sse_shrunk,
            self.ss_mod_shrunk,
            self.cross,
        ]
    }
}

impl SeparationTable {
    pub fn to_csv(&self) -> String {
        let mut out = SEPARATION_HEADER.join(",");
        out.push('\n');
        for r in self.rows.iter().chain(std::iter::once(&self.total)) {
            out.push_str(&r.label);
            for v in r.values() {
                out.push(',');
                out.push_str(&format!("{v:e}"));
            }
            out.push('\n');
        }
        out
    }
}

pub fn separation_table(
    panel: &ForecastPanel,
    h: &Hierarchy,
    unshrunk: &ReconWeights,
    shrunk: &ReconWeights,
    levels: &[Level],
) -> Result<SeparationTable> {
    let tf = panel.t() as f64;
    let obs = panel.y() * h.s().transpose();
    let (_, full0) = reconcile_points(h, &unshrunk.p, panel.yhat())?;
    let (_, full_l) = reconcile_points(h, &shrunk.p, panel.yhat())?;
    let base_err = &obs - panel.yhat();
    let rec_err = &obs - &full0;
    let mod0 = &full0 - panel.yhat();
    let rec_err_l = &obs - &full_l;
    let mod_l = &full_l - panel.yhat();
    let sq = |m: &Mat, cols: &[usize]| m.select_columns(cols).norm_squared() / tf;
    let row = |label: &str, cols: &[usize]| -> Result<SeparationRow> {
        let sel = h.select(&sorted(cols))?;
        let f = if panel.t() > h.k() { f_test(panel, h, unshrunk, &sel)?.f } else { f64::NAN };
        let a = rec_err_l.select_columns(cols);
        let b = mod_l.select_columns(cols);
        Ok(SeparationRow {
            label: label.to_string(),
            sse_base: sq(&base_err, cols),
            sse_recon: sq(&rec_err, cols),
            ss_mod: sq(&mod0, cols),
            f,
            sse_shrunk: sq(&rec_err_l, cols),
            ss_mod_shrunk: sq(&mod_l, cols),
            cross: 2.0 * a.dot(&b) / tf,
        })
    };
    let mut rows = Vec::with_capacity(levels.len());
    for l in levels {
        rows.push(row(&l.label, &l.nodes)?);
    }
    let all: Vec<usize> = (0..h.n()).collect();
    let mut total = row("Total", &all)?;
    let sum = |f: fn(&SeparationRow) -> f64| rows.iter().map(f).sum::<f64>();
    total.sse_base = sum(|r| r.sse_base);
    total.sse_recon = sum(|r| r.sse_recon);
    total.ss_mod = sum(|r| r.ss_mod);
    total.sse_shrunk = sum(|r| r.sse_shrunk);
    total.ss_mod_shrunk = sum(|r| r.ss_mod_shrunk);
    total.cross = sum(|r| r.cross);
    Ok(SeparationTable {
        rows,
        total,
        lambda: shrunk.lambda,
        df1: h.k(),
        df2: panel.t().saturating_sub(h.k()),
        f_nominal: unshrunk.lambda > 0.0,
    })
}

fn sorted(cols: &[usize]) -> Vec<usize> {
    let mut c = cols.to_vec();
    c.sort_unstable();
    c.dedup();
    c
}

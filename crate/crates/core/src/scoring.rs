//! Gaussian log-score, order-2 variogram score, and relative point and
//! probabilistic summaries.

use std::f64::consts::PI;

use serde::Serialize;

use crate::error::{shape, Error, Result};
use crate::matops::{Mat, SpdMat, Vector};

#[derive(Clone, Debug)]
pub struct GaussianForecast {
    pub mean: Vector,
    pub cov: SpdMat,
}

impl GaussianForecast {
    pub fn new(mean: Vector, cov: Mat) -> Result<Self> {
        if cov.nrows() != mean.len() {
            return Err(shape("forecast covariance", (mean.len(), mean.len()), cov.shape()));
        }
        Ok(Self {
            mean,
            cov: SpdMat::new(cov)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `-log φ(y; μ, Σ)`.
    pub fn neg_log_density(&self, y: &Vector) -> Result<f64> {
        if y.len() != self.dim() {
            return Err(shape("observation", (self.dim(), 1), (y.len(), 1)));
        }
        let r = y - &self.mean;
        let q = r.dot(&self.cov.solve_vec(&r));
        Ok(0.5 * (self.dim() as f64 * (2.0 * PI).ln() + self.cov.log_det() + q))
    }
}

/// Sum of negative log densities; row `t` of `obs` is scored by `forecasts[t]`.
pub fn log_score(forecasts: &[GaussianForecast], obs: &Mat) -> Result<f64> {
    if forecasts.len() != obs.nrows() {
        return Err(shape("observations", (forecasts.len(), obs.ncols()), obs.shape()));
    }
    let mut total = 0.0;
    for (t, f) in forecasts.iter().enumerate() {
        total += f.neg_log_density(&obs.row(t).transpose())?;
    }
    Ok(total)
}

/// Variogram score of order `p` over unordered pairs `i < j`.
///
/// Only `p = 2` is supported since it has a closed form under normality.
pub fn variogram_score(f: &GaussianForecast, y: &Vector, p: f64, weights: Option<&Mat>) -> Result<f64> {
    if p != 2.0 {
        return Err(Error::Unsupported(format!("variogram order {p}; only 2 is available")));
    }
    let m = f.dim();
    if y.len() != m {
        return Err(shape("observation", (m, 1), (y.len(), 1)));
    }
    if let Some(w) = weights {
        if w.shape() != (m, m) {
            return Err(shape("variogram weights", (m, m), w.shape()));
        }
        if w.iter().any(|x| *x < 0.0) {
            return Err(Error::InvalidParameter("variogram weights must be non-negative".into()));
        }
    }
    let s = f.cov.as_mat();
    let mu = &f.mean;
    let mut total = 0.0;
    for i in 0..m {
        for j in i + 1..m {
            let w = weights.map_or(1.0, |w| w[(i, j)]);
            let expected = (mu[i] - mu[j]).powi(2) + s[(i, i)] + s[(j, j)] - 2.0 * s[(i, j)];
            total += w * ((y[i] - y[j]).powi(2) - expected).powi(2);
        }
    }
    Ok(total)
}

/// Order-2 variogram score summed over time steps.
pub fn variogram_total(forecasts: &[GaussianForecast], obs: &Mat) -> Result<f64> {
    if forecasts.len() != obs.nrows() {
        return Err(shape("observations", (forecasts.len(), obs.ncols()), obs.shape()));
    }
    let mut total = 0.0;
    for (t, f) in forecasts.iter().enumerate() {
        total += variogram_score(f, &obs.row(t).transpose(), 2.0, None)?;
    }
    Ok(total)
}

pub fn rmse(errs: &Mat) -> f64 {
    if errs.is_empty() {
        return 0.0;
    }
    (errs.norm_squared() / errs.len() as f64).sqrt()
}

/// Percentage change of reconciled RMSE against base RMSE.
pub fn rrmse(base_errs: &Mat, recon_errs: &Mat) -> Result<f64> {
    if base_errs.shape() != recon_errs.shape() {
        return Err(shape("reconciled errors", base_errs.shape(), recon_errs.shape()));
    }
    let b = rmse(base_errs);
    if !(b > 0.0) {
        return Err(Error::Degenerate("base RMSE is zero".into()));
    }
    Ok((rmse(recon_errs) - b) / b * 100.0)
}

pub fn rel_vs(vs_model: f64, vs_base: f64) -> Result<f64> {
    if !(vs_base > 0.0) {
        return Err(Error::Degenerate("base variogram score is zero".into()));
    }
    Ok((vs_model - vs_base) / vs_base * 100.0)
}

/// Scores of one reconciled variance model.
#[derive(Clone, Debug, Serialize)]
pub struct KindScore {
    pub kind: String,
    pub log_score: f64,
    /// Difference to the base log-score.
    pub rel_log_score: f64,
    pub vs: f64,
    /// Percentage change of the variogram score against base.
    pub rel_vs: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ScoreReport {
    pub labels: Vec<String>,
    pub steps: usize,
    pub rmse_base_node: Vec<f64>,
    pub rmse_recon_node: Vec<f64>,
    pub rrmse_node: Vec<f64>,
    pub rmse_base: f64,
    pub rrmse: f64,
    pub log_score_base: f64,
    pub vs_base: f64,
    pub kinds: Vec<KindScore>,
}

impl ScoreReport {
    /// `obs`, `base` and `recon` are `N × m` bottom-level panels.
    pub fn build(
        labels: Vec<String>,
        obs: &Mat,
        base: &[GaussianForecast],
        recon_mean: &Mat,
        kinds: &[(String, Vec<GaussianForecast>)],
    ) -> Result<Self> {
        let n = obs.nrows();
        let base_mean = Mat::from_fn(n, obs.ncols(), |t, i| base.get(t).map_or(f64::NAN, |f| f.mean[i]));
        if base.len() != n || recon_mean.shape() != obs.shape() || labels.len() != obs.ncols() {
            return Err(shape("score inputs", obs.shape(), recon_mean.shape()));
        }
        let eb = obs - &base_mean;
        let er = obs - recon_mean;
        let col_rmse = |e: &Mat| -> Vec<f64> { e.column_iter().map(|c| (c.norm_squared() / n as f64).sqrt()).collect() };
        let rb = col_rmse(&eb);
        let rr = col_rmse(&er);
        let rrmse_node = rb
            .iter()
            .zip(&rr)
            .map(|(b, r)| if *b > 0.0 { (r - b) / b * 100.0 } else { f64::NAN })
            .collect();
        let log_score_base = log_score(base, obs)?;
        let vs_base = variogram_total(base, obs)?;
        let mut ks = Vec::with_capacity(kinds.len());
        for (name, fc) in kinds {
            let ls = log_score(fc, obs)?;
            let vs = variogram_total(fc, obs)?;
            ks.push(KindScore {
                kind: name.clone(),
                log_score: ls,
                rel_log_score: ls - log_score_base,
                vs,
                rel_vs: rel_vs(vs, vs_base)?,
            });
        }
        Ok(Self {
            labels,
            steps: n,
            rmse_base_node: rb,
            rmse_recon_node: rr,
            rrmse_node,
            rmse_base: rmse(&eb),
            rrmse: rrmse(&eb, &er)?,
            log_score_base,
            vs_base,
            kinds: ks,
        })
    }

    /// `(statistic, value)` rows in summary-table order.
    pub fn table_rows(&self) -> Vec<(String, f64)> {
        let mut rows = vec![
            ("RMSE(base)".to_string(), self.rmse_base),
            ("RRMSE(reconciled)".to_string(), self.rrmse),
            ("LogS(base)".to_string(), self.log_score_base),
        ];
        rows.extend(self.kinds.iter().map(|k| (format!("relLogS({})", k.kind), k.rel_log_score)));
        rows.push(("Vs(base)".to_string(), self.vs_base));
        rows.extend(self.kinds.iter().map(|k| (format!("relVs({})", k.kind), k.rel_vs)));
        rows
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("statistic,value\n");
        for (k, v) in self.table_rows() {
            out.push_str(&format!("{k},{v:e}\n"));
        }
        out
    }
}

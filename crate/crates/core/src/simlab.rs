//! Monte Carlo study: VAR(1) bottom series, AR(1) base forecasts per node,
//! shrinkage reconciliation and out-of-sample log-scores of competing
//! forecast covariances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{shape, Error, Result};
use crate::glm_core::{build_design_shared, design_row, SigmaKind};
use crate::hierarchy::{Hierarchy, HierarchySpec};
use crate::matops::{spd_factor, Mat, Vector};
use crate::reconcile::{
    fit_map, lambda_opt, map_priors, sample_cov_base, sigma_recon, ForecastPanel,
};
use crate::scoring::{log_score, GaussianForecast};
use crate::uncertainty::{beta_cov_map, beta_cov_shared, forecast_cov, MapCovForm};

pub const BURN_IN: usize = 500;

/// Upper bound for the estimated shrinkage intensity; the posterior-mode fit
/// needs `λ < 1`.
pub const LAMBDA_MAX: f64 = 1.0 - 1e-6;

#[derive(Clone, Debug)]
pub struct Var1Config {
    pub a: Mat,
    pub sigma_eps: Mat,
    pub t_train: usize,
    pub t_test: usize,
    pub seed: u64,
    pub reps: usize,
}

impl Var1Config {
    /// Four bottom series, `A_ii = 0.6`, `A_ij = 0.1`, unit innovations.
    pub fn study_default(t_train: usize, reps: usize, seed: u64) -> Self {
        Self {
            a: Mat::from_fn(4, 4, |i, j| if i == j { 0.6 } else { 0.1 }),
            sigma_eps: Mat::identity(4, 4),
            t_train,
            t_test: t_train,
            seed,
            reps,
        }
    }

    pub fn m(&self) -> usize {
        self.a.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.m();
        if !self.a.is_square() || self.sigma_eps.shape() != (m, m) {
            return Err(shape("innovation covariance", (m, m), self.sigma_eps.shape()));
        }
        if self.reps == 0 {
            return Err(Error::InvalidParameter("reps must be at least 1".into()));
        }
        let rho = spectral_radius(&self.a);
        if !(rho < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "VAR(1) coefficient matrix has spectral radius {rho} >= 1"
            )));
        }
        spd_factor(&self.sigma_eps)?;
        Ok(())
    }
}

pub fn spectral_radius(a: &Mat) -> f64 {
    a.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Generator for replicate `rep`: the seed picks the key, the replicate picks the stream.
pub fn rep_rng(seed: u64, rep: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rep as u64);
    rng
}

/// `t × m` draws of `y_t = A y_{t−1} + ε_t` after [`BURN_IN`] discarded steps from zero.
pub fn var1_path(a: &Mat, sigma_eps: &Mat, t: usize, rng: &mut impl Rng) -> Result<Mat> {
    let m = a.nrows();
    let l = spd_factor(sigma_eps)?.l();
    let mut y = Vector::zeros(m);
    let mut out = Mat::zeros(t, m);
    for step in 0..BURN_IN + t {
        let z = Vector::from_fn(m, |_, _| rng.sample(StandardNormal));
        y = a * &y + &l * z;
        if step >= BURN_IN {
            out.set_row(step - BURN_IN, &y.transpose());
        }
    }
    Ok(out)
}

/// Bottom-level path of length `1 + t_train + t_test` for replicate `rep`.
pub fn var1_simulate(cfg: &Var1Config, rep: usize) -> Result<Mat> {
    cfg.validate()?;
    let mut rng = rep_rng(cfg.seed, rep);
    var1_path(&cfg.a, &cfg.sigma_eps, 1 + cfg.t_train + cfg.t_test, &mut rng)
}

#[derive(Clone, Debug)]
pub struct Ar1Fit {
    /// `(intercept, slope)` per node.
    pub coef: Vec<(f64, f64)>,
    /// Row `t − 1` holds the one-step forecast of row `t` of the input.
    pub forecasts: Mat,
}

/// Least-squares AR(1) with intercept per column, estimated on the first
/// `n_train` rows and applied one step ahead over the whole panel.
pub fn ar1_base_forecasts(series: &Mat, n_train: usize) -> Result<Ar1Fit> {
    if n_train < 3 || n_train > series.nrows() {
        return Err(Error::InvalidParameter(format!(
            "AR(1) needs 3 <= training rows <= {}, got {n_train}",
            series.nrows()
        )));
    }
    let (t, n) = series.shape();
    let mut coef = Vec::with_capacity(n);
    let mut forecasts = Mat::zeros(t - 1, n);
    for j in 0..n {
        let col = series.column(j);
        let x = col.rows(0, n_train - 1);
        let y = col.rows(1, n_train - 1);
        let xm = x.mean();
        let ym = y.mean();
        let sxx: f64 = x.iter().map(|v| (v - xm).powi(2)).sum();
        if !(sxx > 1e-300) {
            return Err(Error::Degenerate(format!("series {j} is constant")));
        }
        let sxy: f64 = x.iter().zip(y.iter()).map(|(a, b)| (a - xm) * (b - ym)).sum();
        let phi = sxy / sxx;
        let c = ym - phi * xm;
        coef.push((c, phi));
        for r in 0..t - 1 {
            forecasts[(r, j)] = c + phi * col[r];
        }
    }
    Ok(Ar1Fit { coef, forecasts })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    Shrink,
    Sreml,
    Par,
    Base,
}

impl Estimator {
    pub const ALL: [Estimator; 4] = [Self::Shrink, Self::Sreml, Self::Par, Self::Base];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Shrink => "shrink",
            Self::Sreml => "sreml",
            Self::Par => "par",
            Self::Base => "base",
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct StudyRecord {
    pub t: usize,
    pub rep: usize,
    pub estimator: Estimator,
    /// Mean one-step negative log density over the test window.
    pub logscore: f64,
    pub lambda: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct StudySummary {
    pub t: usize,
    pub estimator: Estimator,
    pub mean_logscore: f64,
    /// Mean of per-replicate differences to the shrinkage estimator.
    pub mean_rel: f64,
    pub se_rel: f64,
    pub reps: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct StudyResult {
    pub records: Vec<StudyRecord>,
    pub summary: Vec<StudySummary>,
}

impl StudyResult {
    pub fn summary_for(&self, t: usize, e: Estimator) -> Option<&StudySummary> {
        self.summary.iter().find(|s| s.t == t && s.estimator == e)
    }

    pub fn raw_csv(&self) -> String {
        let mut out = String::from("T,rep,estimator,logscore,lambda\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{:e},{:e}\n",
                r.t,
                r.rep,
                r.estimator.name(),
                r.logscore,
                r.lambda
            ));
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("T,estimator,mean_logscore,mean_rel_logscore,se_rel_logscore,reps\n");
        for s in &self.summary {
            out.push_str(&format!(
                "{},{},{:e},{:e},{:e},{}\n",
                s.t,
                s.estimator.name(),
                s.mean_logscore,
                s.mean_rel,
                s.se_rel,
                s.reps
            ));
        }
        out
    }
}

/// Two-level grouping of four series: total, two pairs, four bottom series.
pub fn default_hierarchy() -> Hierarchy {
    let bottom: Vec<String> = (1..=4).map(|i| format!("b{i}")).collect();
    let labels = ["total".to_string(), "pair1".to_string(), "pair2".to_string()];
    Hierarchy::structural(&[vec![0, 1, 2, 3], vec![0, 1], vec![2, 3]], Some(&labels), &bottom)
        .expect("fixed hierarchy is valid")
}

/// Log-scores for one replicate at training length `cfg.t_train`.
pub fn run_replicate(
    cfg: &Var1Config,
    h: &Hierarchy,
    rep: usize,
    estimators: &[Estimator],
) -> Result<(f64, Vec<(Estimator, f64)>)> {
    if h.m() != cfg.m() {
        return Err(shape("hierarchy bottom level", (cfg.m(), 1), (h.m(), 1)));
    }
    let yb = var1_simulate(cfg, rep)?;
    let all = &yb * h.s().transpose();
    let (tr, te) = (cfg.t_train, cfg.t_test);
    let fit = ar1_base_forecasts(&all, tr + 1)?;
    // forecasts row r targets series row r + 1
    let panel = ForecastPanel::new(
        yb.rows(1, tr).into_owned(),
        fit.forecasts.rows(0, tr).into_owned(),
        None,
    )?;
    let y_test = yb.rows(1 + tr, te).into_owned();
    let yhat_test = fit.forecasts.rows(tr, te).into_owned();

    let lambda = lambda_opt(&panel.base_errors(h)?)?.min(LAMBDA_MAX);
    let w = fit_map(&panel, h, lambda)?;
    let recon_mean = &yhat_test * w.p.transpose();
    let mut out = Vec::with_capacity(estimators.len());
    for &e in estimators {
        let fc: Vec<GaussianForecast> = match e {
            Estimator::Shrink | Estimator::Sreml => {
                let kind = if e == Estimator::Shrink { SigmaKind::Shrink } else { SigmaKind::Sreml };
                let s = sigma_recon(&panel, h, &w, kind)?.value;
                (0..te)
                    .map(|t| GaussianForecast::new(recon_mean.row(t).transpose(), s.clone()))
                    .collect::<Result<_>>()?
            }
            Estimator::Par => {
                let s = sigma_recon(&panel, h, &w, SigmaKind::Sreml)?.value;
                let (d, _) = build_design_shared(&panel, h, false)?;
                let bcov = if lambda > 0.0 {
                    let diag = sample_cov_base(&panel, h)?.diagonal();
                    let prior = map_priors(h, &diag, lambda, tr)?;
                    beta_cov_map(d.x1(), &s, &prior, MapCovForm::Precision)?
                } else {
                    beta_cov_shared(d.x1(), &s)?
                };
                (0..te)
                    .map(|t| {
                        let x = design_row(&yhat_test.row(t).transpose(), h)?;
                        GaussianForecast::new(recon_mean.row(t).transpose(), forecast_cov(&x, &bcov, &s)?)
                    })
                    .collect::<Result<_>>()?
            }
            Estimator::Base => {
                let sh = sample_cov_base(&panel, h)?;
                let sb = sh.view((h.k(), h.k()), (h.m(), h.m())).into_owned();
                (0..te)
                    .map(|t| {
                        let mu = yhat_test.row(t).columns(h.k(), h.m()).transpose();
                        GaussianForecast::new(mu, sb.clone())
                    })
                    .collect::<Result<_>>()?
            }
        };
        out.push((e, log_score(&fc, &y_test)? / te as f64));
    }
    Ok((lambda, out))
}

/// Runs every `(T, rep)` cell; results do not depend on thread scheduling.
pub fn run_study(
    base: &Var1Config,
    h: &Hierarchy,
    t_grid: &[usize],
    t_test: Option<usize>,
    estimators: &[Estimator],
) -> Result<StudyResult> {
    if t_grid.is_empty() || estimators.is_empty() {
        return Err(Error::InvalidParameter("empty T grid or estimator list".into()));
    }
    base.validate()?;
    let mut wanted: Vec<Estimator> = estimators.to_vec();
    wanted.dedup();
    // the reference estimator is always evaluated
    let mut eval = wanted.clone();
    if !eval.contains(&Estimator::Shrink) {
        eval.push(Estimator::Shrink);
    }
    let cells: Vec<(usize, usize)> = t_grid
        .iter()
        .flat_map(|&t| (0..base.reps).map(move |r| (t, r)))
        .collect();
    let results: Vec<(usize, usize, f64, Vec<(Estimator, f64)>)> = cells
        .par_iter()
        .map(|&(t, rep)| {
            let cfg = Var1Config {
                t_train: t,
                t_test: t_test.unwrap_or(t),
                ..base.clone()
            };
            run_replicate(&cfg, h, rep, &eval).map(|(l, s)| (t, rep, l, s))
        })
        .collect::<Result<_>>()?;

    let mut records = Vec::new();
    let mut summary = Vec::new();
    for &t in t_grid {
        let cell: Vec<_> = results.iter().filter(|r| r.0 == t).collect();
        for &e in &wanted {
            let mut ls = Vec::with_capacity(cell.len());
            let mut rel = Vec::with_capacity(cell.len());
            for (_, rep, lambda, scores) in &cell {
                let v = lookup(scores, e);
                let r = v - lookup(scores, Estimator::Shrink);
                records.push(StudyRecord {
                    t,
                    rep: *rep,
                    estimator: e,
                    logscore: v,
                    lambda: *lambda,
                });
                ls.push(v);
                rel.push(r);
            }
            let (mean_rel, se_rel) = mean_se(&rel);
            summary.push(StudySummary {
                t,
                estimator: e,
                mean_logscore: mean_se(&ls).0,
                mean_rel,
                se_rel,
                reps: cell.len(),
            });
        }
    }
    Ok(StudyResult { records, summary })
}

fn lookup(scores: &[(Estimator, f64)], e: Estimator) -> f64 {
    scores.iter().find(|(k, _)| *k == e).map(|(_, v)| *v).unwrap_or(f64::NAN)
}

fn mean_se(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    if x.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// JSON study configuration. Missing fields fall back to the four-series default.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct StudyConfig {
    pub a: Option<Vec<Vec<f64>>>,
    pub sigma_eps: Option<Vec<Vec<f64>>>,
    pub hierarchy: Option<HierarchySpec>,
    pub t_grid: Vec<usize>,
    pub t_test: Option<usize>,
    pub reps: usize,
    pub seed: u64,
    pub estimators: Vec<Estimator>,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            a: None,
            sigma_eps: None,
            hierarchy: None,
            t_grid: vec![24, 60, 120, 240],
            t_test: None,
            reps: 50,
            seed: 1,
            estimators: Estimator::ALL.to_vec(),
        }
    }
}

fn rows_to_mat(name: &str, rows: &[Vec<f64>]) -> Result<Mat> {
    let r = rows.len();
    let c = rows.first().map_or(0, |x| x.len());
    if r == 0 || rows.iter().any(|x| x.len() != c) {
        return Err(Error::InvalidParameter(format!("{name} must be a non-empty rectangular array")));
    }
    Ok(Mat::from_fn(r, c, |i, j| rows[i][j]))
}

impl StudyConfig {
    pub fn resolve(&self) -> Result<(Var1Config, Hierarchy)> {
        let mut cfg = Var1Config::study_default(self.t_grid.first().copied().unwrap_or(1), self.reps, self.seed);
        if let Some(a) = &self.a {
            cfg.a = rows_to_mat("a", a)?;
            cfg.sigma_eps = Mat::identity(cfg.a.nrows(), cfg.a.nrows());
        }
        if let Some(s) = &self.sigma_eps {
            cfg.sigma_eps = rows_to_mat("sigma_eps", s)?;
        }
        cfg.validate()?;
        let h = match &self.hierarchy {
            Some(spec) => Hierarchy::from_spec(spec)?,
            None if cfg.m() == 4 => default_hierarchy(),
            None => {
                return Err(Error::InvalidParameter(
                    "a hierarchy is required when the bottom level is not four series".into(),
                ))
            }
        };
        Ok((cfg, h))
    }

    pub fn run(&self) -> Result<StudyResult> {
        let (cfg, h) = self.resolve()?;
        run_study(&cfg, &h, &self.t_grid, self.t_test, &self.estimators)
    }
}

//! Command-line front end: CSV panels in, CSV and JSON reports out.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use crate::error::{Error, Result};
use crate::glm_core::{build_design_shared, design_row, SigmaKind};
use crate::hierarchy::{Hierarchy, HierarchySpec};
use crate::matops::{Mat, Vector};
use crate::reconcile::{
    fit_map, lambda_opt, map_priors, sample_cov_base, shrink_cov, sigma_recon, weights_mint,
    ForecastPanel, ReconWeights,
};
use crate::scoring::{GaussianForecast, ScoreReport};
use crate::simlab::{Estimator, StudyConfig, LAMBDA_MAX};
use crate::uncertainty::{
    beta_cov_map, beta_cov_shared, f_test, forecast_cov, separation_table, wald, weight_cov, BetaCov,
    MapCovForm,
};

#[derive(Parser, Debug)]
#[command(name = "reconglm", version, about = "Forecast reconciliation as a general linear model")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Estimate weights, their standard errors and forecast covariances.
    Fit(FitArgs),
    /// Variance-separation table per hierarchy level.
    Anova(DataArgs),
    /// Score base and reconciled forecasts on a held-out panel.
    Score(ScoreArgs),
    /// Run the VAR(1) simulation study.
    Simulate(SimArgs),
    /// Weights from a supplied covariance or from data.
    Weights(WeightsArgs),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LambdaArg {
    Auto,
    Fixed(f64),
}

pub fn parse_lambda(s: &str) -> std::result::Result<LambdaArg, String> {
    if s.eq_ignore_ascii_case("auto") {
        return Ok(LambdaArg::Auto);
    }
    let v: f64 = s.parse().map_err(|_| format!("expected 'auto' or a number, got '{s}'"))?;
    if !(0.0..1.0).contains(&v) {
        return Err(format!("lambda must lie in [0, 1), got {v}"));
    }
    Ok(LambdaArg::Fixed(v))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum VarKind {
    Ml,
    Reml,
    Map,
    Shrink,
    Sreml,
    Par,
}

impl VarKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Ml => "ml",
            Self::Reml => "reml",
            Self::Map => "map",
            Self::Shrink => "shrink",
            Self::Sreml => "sreml",
            Self::Par => "par",
        }
    }

    fn sigma_kind(&self) -> Option<SigmaKind> {
        match self {
            Self::Ml => Some(SigmaKind::Ml),
            Self::Reml => Some(SigmaKind::Reml),
            Self::Map => Some(SigmaKind::Map),
            Self::Shrink => Some(SigmaKind::Shrink),
            Self::Sreml => Some(SigmaKind::Sreml),
            Self::Par => None,
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// Observations: header `time,<bottom labels>`.
    #[arg(long)]
    pub obs: PathBuf,
    /// Base forecasts: header `time,<all node labels>`.
    #[arg(long)]
    pub base: PathBuf,
    /// Hierarchy description (JSON).
    #[arg(long)]
    pub hierarchy: PathBuf,
    /// Shrinkage intensity: `auto` or a value in [0, 1).
    #[arg(long, default_value = "0", value_parser = parse_lambda)]
    pub lambda: LambdaArg,
    /// Convergence tolerance for iterative estimators.
    #[arg(long, default_value_t = 1e-8)]
    pub tol: f64,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Covariance estimates to write; repeatable.
    #[arg(long = "variance", value_enum)]
    pub variance: Vec<VarKind>,
    /// Use `(G + Σ_{β,0})⁻¹` instead of the precision form for parameter covariance.
    #[arg(long)]
    pub literal_prior_cov: bool,
}

#[derive(Args, Debug)]
pub struct ScoreArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub test_obs: PathBuf,
    #[arg(long)]
    pub test_base: PathBuf,
    #[arg(long = "variance", value_enum)]
    pub variance: Vec<VarKind>,
}

#[derive(Args, Debug)]
pub struct SimArgs {
    /// Study configuration (JSON); flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub reps: Option<usize>,
    /// Comma-separated training lengths.
    #[arg(long, value_delimiter = ',')]
    pub t_grid: Option<Vec<usize>>,
    #[arg(long)]
    pub t_test: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct WeightsArgs {
    #[arg(long)]
    pub hierarchy: PathBuf,
    /// Full base-error covariance: header `node,<all labels>`.
    #[arg(long, conflicts_with = "diag")]
    pub sigma: Option<PathBuf>,
    /// Comma-separated base-error variances in hierarchy order.
    #[arg(long, value_delimiter = ',')]
    pub diag: Option<Vec<f64>>,
    #[arg(long)]
    pub obs: Option<PathBuf>,
    #[arg(long)]
    pub base: Option<PathBuf>,
    #[arg(long, default_value = "0", value_parser = parse_lambda)]
    pub lambda: LambdaArg,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Fit(a) => cmd_fit(&a).map(|_| ()),
        Command::Anova(a) => cmd_anova(&a).map(|_| ()),
        Command::Score(a) => cmd_score(&a).map(|_| ()),
        Command::Simulate(a) => cmd_simulate(&a).map(|_| ()),
        Command::Weights(a) => cmd_weights(&a).map(|_| ()),
    }
}

/// 17 significant digits, enough to round-trip any `f64`.
pub fn fmt_num(x: f64) -> String {
    format!("{x:.16e}")
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Input(format!("{}: {e}", path.display()))
}

pub fn load_hierarchy(path: &Path) -> Result<Hierarchy> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let spec: HierarchySpec = serde_json::from_str(&text).map_err(|e| io_err(path, e))?;
    Hierarchy::from_spec(&spec)
}

/// Keyed table read from a CSV whose first column is an opaque key.
#[derive(Clone, Debug)]
pub struct Table {
    pub keys: Vec<String>,
    pub columns: Vec<String>,
    pub values: Mat,
}

pub fn read_table(path: &Path) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| io_err(path, e))?;
    let header = rdr.headers().map_err(|e| io_err(path, e))?.clone();
    if header.len() < 2 {
        return Err(io_err(path, "need a key column and at least one value column"));
    }
    let columns: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut keys = Vec::new();
    let mut data = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| io_err(path, e))?;
        if rec.len() != header.len() {
            return Err(io_err(path, format!("row {} has {} fields, expected {}", r + 2, rec.len(), header.len())));
        }
        keys.push(rec[0].to_string());
        for (c, f) in rec.iter().skip(1).enumerate() {
            let v: f64 = f.parse().map_err(|_| {
                io_err(path, format!("row {}, column '{}': cannot parse '{f}'", r + 2, columns[c]))
            })?;
            data.push(v);
        }
    }
    let values = Mat::from_row_slice(keys.len(), columns.len(), &data);
    Ok(Table { keys, columns, values })
}

impl Table {
    /// Columns reordered to `labels`; a missing label is an error naming it.
    pub fn select(&self, labels: &[String], path: &Path) -> Result<Mat> {
        let pos: HashMap<&str, usize> = self.columns.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
        let mut idx = Vec::with_capacity(labels.len());
        for l in labels {
            match pos.get(l.as_str()) {
                Some(i) => idx.push(*i),
                None => return Err(io_err(path, format!("missing column for node '{l}'"))),
            }
        }
        Ok(self.values.select_columns(&idx))
    }
}

pub fn write_matrix(path: &Path, key: &str, row_labels: &[String], col_labels: &[String], m: &Mat) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    let mut head = vec![key.to_string()];
    head.extend(col_labels.iter().cloned());
    w.write_record(&head).map_err(|e| io_err(path, e))?;
    for (i, l) in row_labels.iter().enumerate() {
        let mut rec = vec![l.clone()];
        rec.extend(m.row(i).iter().map(|x| fmt_num(*x)));
        w.write_record(&rec).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    let s = serde_json::to_string_pretty(v).map_err(|e| io_err(path, e))?;
    write_text(path, &s)
}

fn rows_of(m: &Mat) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Observation and base panels joined on the time key, in base-file order.
pub fn load_panel(obs: &Path, base: &Path, h: &Hierarchy) -> Result<ForecastPanel> {
    let o = read_table(obs)?;
    let b = read_table(base)?;
    let y = o.select(h.bottom_labels(), obs)?;
    let yh = b.select(h.labels(), base)?;
    let mut pos = HashMap::with_capacity(o.keys.len());
    for (i, k) in o.keys.iter().enumerate() {
        if pos.insert(k.as_str(), i).is_some() {
            return Err(io_err(obs, format!("duplicate time key '{k}'")));
        }
    }
    let mut rows_o = Vec::new();
    let mut rows_b = Vec::new();
    let mut times = Vec::new();
    for (i, k) in b.keys.iter().enumerate() {
        if let Some(&j) = pos.get(k.as_str()) {
            rows_o.push(j);
            rows_b.push(i);
            times.push(k.clone());
        }
    }
    if times.is_empty() {
        return Err(Error::Input(format!(
            "{} and {} share no time keys",
            obs.display(),
            base.display()
        )));
    }
    ForecastPanel::new(y.select_rows(&rows_o), yh.select_rows(&rows_b), Some(times))
}

pub fn resolve_lambda(arg: LambdaArg, panel: &ForecastPanel, h: &Hierarchy) -> Result<f64> {
    match arg {
        LambdaArg::Fixed(v) => Ok(v),
        LambdaArg::Auto => Ok(lambda_opt(&panel.base_errors(h)?)?.min(LAMBDA_MAX)),
    }
}

/// Everything derived from one training panel.
pub struct FitBundle {
    pub h: Hierarchy,
    pub panel: ForecastPanel,
    pub weights: ReconWeights,
    /// Covariance used for parameter uncertainty: the shrinkage REML estimate.
    pub sigma_par: Mat,
    pub bcov: BetaCov,
}

pub fn fit_bundle(d: &DataArgs, literal: bool) -> Result<FitBundle> {
    let h = load_hierarchy(&d.hierarchy)?;
    let panel = load_panel(&d.obs, &d.base, &h)?;
    let lambda = resolve_lambda(d.lambda, &panel, &h)?;
    let weights = fit_map(&panel, &h, lambda)?;
    let sigma_par = sigma_recon(&panel, &h, &weights, SigmaKind::Sreml)?.value;
    let (design, _) = build_design_shared(&panel, &h, false)?;
    let bcov = if lambda > 0.0 {
        let diag = sample_cov_base(&panel, &h)?.diagonal();
        let prior = map_priors(&h, &diag, lambda, panel.t())?;
        let form = if literal { MapCovForm::Literal } else { MapCovForm::Precision };
        beta_cov_map(design.x1(), &sigma_par, &prior, form)?
    } else {
        beta_cov_shared(design.x1(), &sigma_par)?
    };
    Ok(FitBundle {
        h,
        panel,
        weights,
        sigma_par,
        bcov,
    })
}

impl FitBundle {
    /// Reconciled forecast covariance of the given kind at base forecast `yhat`.
    pub fn covariance(&self, kind: VarKind, yhat: &Vector) -> Result<Mat> {
        match kind.sigma_kind() {
            Some(k) => Ok(sigma_recon(&self.panel, &self.h, &self.weights, k)?.value),
            None => forecast_cov(&design_row(yhat, &self.h)?, &self.bcov, &self.sigma_par),
        }
    }
}

#[derive(Serialize)]
pub struct FitReport {
    pub lambda: f64,
    pub lambda_auto: bool,
    pub n: usize,
    pub m: usize,
    pub t: usize,
    pub coherency_error: f64,
    pub labels: Vec<String>,
    pub weights: Vec<Vec<f64>>,
    pub weights_se: Vec<Vec<f64>>,
    pub wald: Vec<Vec<f64>>,
    pub f_test: Option<crate::uncertainty::FTest>,
    pub sigma: HashMap<String, Vec<Vec<f64>>>,
    pub files: Vec<String>,
}

pub fn cmd_fit(a: &FitArgs) -> Result<FitReport> {
    let b = fit_bundle(&a.data, a.literal_prior_cov)?;
    let out = &a.data.out;
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let h = &b.h;
    let wc = weight_cov(&b.bcov, h)?;
    let mut files = vec!["weights.csv".to_string(), "weights_se.csv".to_string()];
    let wpath = out.join("weights.csv");
    write_matrix(&wpath, "node", h.bottom_labels(), h.labels(), &b.weights.p)?;
    write_matrix(&out.join("weights_se.csv"), "node", h.bottom_labels(), h.labels(), &wc.se)?;
    let reread = read_table(&wpath)?.select(h.labels(), &wpath)?;
    if !h.check_coherency(&reread, 1e-9)? {
        return Err(Error::Degenerate("written weights violate P S = I".into()));
    }
    let last = b.panel.yhat().row(b.panel.t() - 1).transpose();
    let mut sigma = HashMap::new();
    let mut kinds = a.variance.clone();
    kinds.dedup();
    for k in kinds {
        let s = b.covariance(k, &last)?;
        let name = format!("sigma_{}.csv", k.name());
        write_matrix(&out.join(&name), "node", h.bottom_labels(), h.bottom_labels(), &s)?;
        files.push(name);
        sigma.insert(k.name().to_string(), rows_of(&s));
    }
    let f = if b.panel.t() > h.k() {
        Some(f_test(&b.panel, h, &b.weights, &h.select_all())?)
    } else {
        None
    };
    files.push("fit.json".into());
    let report = FitReport {
        lambda: b.weights.lambda,
        lambda_auto: a.data.lambda == LambdaArg::Auto,
        n: h.n(),
        m: h.m(),
        t: b.panel.t(),
        coherency_error: h.coherency_error(&b.weights.p)?,
        labels: h.labels().to_vec(),
        weights: rows_of(&b.weights.p),
        weights_se: rows_of(&wc.se),
        wald: rows_of(&wald(&b.weights.beta_t, &b.bcov)?),
        f_test: f,
        sigma,
        files,
    };
    write_json(&out.join("fit.json"), &report)?;
    Ok(report)
}

pub fn cmd_anova(d: &DataArgs) -> Result<crate::uncertainty::SeparationTable> {
    let h = load_hierarchy(&d.hierarchy)?;
    let panel = load_panel(&d.obs, &d.base, &h)?;
    let lambda = resolve_lambda(d.lambda, &panel, &h)?;
    let w0 = fit_map(&panel, &h, 0.0)?;
    let wl = if lambda > 0.0 { fit_map(&panel, &h, lambda)? } else { w0.clone() };
    let tab = separation_table(&panel, &h, &w0, &wl, h.levels())?;
    fs::create_dir_all(&d.out).map_err(|e| io_err(&d.out, e))?;
    write_text(&d.out.join("anova.csv"), &tab.to_csv())?;
    write_json(&d.out.join("anova.json"), &tab)?;
    Ok(tab)
}

pub fn cmd_score(a: &ScoreArgs) -> Result<ScoreReport> {
    let b = fit_bundle(&a.data, false)?;
    let h = &b.h;
    let test = load_panel(&a.test_obs, &a.test_base, h)?;
    let (k, m) = (h.k(), h.m());
    let sh = sample_cov_base(&b.panel, h)?;
    let sb = sh.view((k, k), (m, m)).into_owned();
    let base: Vec<GaussianForecast> = (0..test.t())
        .map(|t| GaussianForecast::new(test.yhat().row(t).columns(k, m).transpose(), sb.clone()))
        .collect::<Result<_>>()?;
    let recon = test.yhat() * b.weights.p.transpose();
    let mut kinds = Vec::new();
    let mut wanted = a.variance.clone();
    wanted.dedup();
    for kind in wanted {
        let fc = (0..test.t())
            .map(|t| {
                let cov = b.covariance(kind, &test.yhat().row(t).transpose())?;
                GaussianForecast::new(recon.row(t).transpose(), cov)
            })
            .collect::<Result<Vec<_>>>()?;
        kinds.push((kind.name().to_string(), fc));
    }
    let report = ScoreReport::build(h.bottom_labels().to_vec(), test.y(), &base, &recon, &kinds)?;
    let out = &a.data.out;
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    write_text(&out.join("score.csv"), &report.to_csv())?;
    write_json(&out.join("score.json"), &report)?;
    Ok(report)
}

pub fn cmd_simulate(a: &SimArgs) -> Result<crate::simlab::StudyResult> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| io_err(p, e))?;
            serde_json::from_str::<StudyConfig>(&text).map_err(|e| io_err(p, e))?
        }
        None => StudyConfig::default(),
    };
    if let Some(r) = a.reps {
        cfg.reps = r;
    }
    if let Some(g) = &a.t_grid {
        cfg.t_grid = g.clone();
    }
    if a.t_test.is_some() {
        cfg.t_test = a.t_test;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if cfg.estimators.is_empty() {
        cfg.estimators = Estimator::ALL.to_vec();
    }
    let res = cfg.run()?;
    fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
    write_text(&a.out.join("study_raw.csv"), &res.raw_csv())?;
    write_text(&a.out.join("study_summary.csv"), &res.summary_csv())?;
    write_json(&a.out.join("study.json"), &json!({ "config": cfg, "result": res }))?;
    Ok(res)
}

pub fn cmd_weights(a: &WeightsArgs) -> Result<ReconWeights> {
    let h = load_hierarchy(&a.hierarchy)?;
    let w = if let Some(p) = &a.sigma {
        let t = read_table(p)?;
        let cols = t.select(h.labels(), p)?;
        let pos: HashMap<&str, usize> = t.keys.iter().enumerate().map(|(i, k)| (k.as_str(), i)).collect();
        let mut rows = Vec::with_capacity(h.n());
        for l in h.labels() {
            rows.push(*pos.get(l.as_str()).ok_or_else(|| io_err(p, format!("missing row for node '{l}'")))?);
        }
        let sigma = shrink_cov(&cols.select_rows(&rows), lambda_fixed(a.lambda)?)?;
        weights_mint(&h, &sigma)?
    } else if let Some(d) = &a.diag {
        if d.len() != h.n() {
            return Err(Error::Input(format!("--diag needs {} values, got {}", h.n(), d.len())));
        }
        weights_mint(&h, &Mat::from_diagonal(&Vector::from_column_slice(d)))?
    } else if let (Some(o), Some(b)) = (&a.obs, &a.base) {
        let panel = load_panel(o, b, &h)?;
        let lambda = resolve_lambda(a.lambda, &panel, &h)?;
        fit_map(&panel, &h, lambda)?
    } else {
        return Err(Error::Input("weights needs --sigma, --diag, or --obs with --base".into()));
    };
    fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
    write_matrix(&a.out.join("weights.csv"), "node", h.bottom_labels(), h.labels(), &w.p)?;
    Ok(w)
}

fn lambda_fixed(l: LambdaArg) -> Result<f64> {
    match l {
        LambdaArg::Fixed(v) => Ok(v),
        LambdaArg::Auto => Err(Error::InvalidParameter(
            "lambda 'auto' needs data; give a number with --sigma".into(),
        )),
    }
}

//! Acceptance suite: one PASS/FAIL line per criterion with its runtime.

use std::time::{Duration, Instant};

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{Continuous, ContinuousCDF, FisherSnedecor, MultivariateNormal};

use reconglm::glm_core::{build_design_shared, SigmaKind};
use reconglm::hierarchy::Hierarchy;
use reconglm::matops::{kron, solve_spd, unvec, vec, Mat, Vector};
use reconglm::reconcile::{
    fit_glm_recon, fit_map, lambda_opt, map_priors, sigma_recon, weights_from_beta, ForecastPanel,
};
use reconglm::scoring::{log_score, rel_vs, rrmse, variogram_score, GaussianForecast};
use reconglm::simlab::{default_hierarchy, run_study, Estimator, Var1Config, LAMBDA_MAX};
use reconglm::uncertainty::{beta_cov_shared, f_test, separation_table, wald};

type Check = std::result::Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> std::result::Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
    Mat::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal))
}

fn max_abs(m: &Mat) -> f64 {
    m.iter().fold(0.0, |a, x| a.max(x.abs()))
}

/// Base forecasts with node-specific scale and correlated errors.
fn random_panel(rng: &mut ChaCha8Rng, h: &Hierarchy, t: usize) -> ForecastPanel {
    let y = randn(rng, t, h.m());
    let mix = randn(rng, h.n(), h.n()) * 0.4 + Mat::identity(h.n(), h.n());
    let scale = Mat::from_diagonal(&Vector::from_fn(h.n(), |_, _| 0.5 + rng.random::<f64>()));
    let yhat = &y * h.s().transpose() + randn(rng, t, h.n()) * mix * scale;
    ForecastPanel::new(y, yhat, None).unwrap()
}

/// `(Sᵀ W⁻¹ S)⁻¹ Sᵀ W⁻¹` with general LU inverses.
fn mint_oracle(s: &Mat, w: &Mat) -> Mat {
    let wi = w.clone().lu().try_inverse().unwrap();
    let a = (s.transpose() * &wi * s).lu().try_inverse().unwrap();
    a * s.transpose() * wi
}

fn sample_cov(panel: &ForecastPanel, h: &Hierarchy) -> Mat {
    let e = panel.y() * h.s().transpose() - panel.yhat();
    e.transpose() * &e / panel.t() as f64
}

fn shrink(s: &Mat, lambda: f64) -> Mat {
    Mat::from_fn(s.nrows(), s.ncols(), |i, j| {
        if i == j {
            s[(i, j)]
        } else {
            (1.0 - lambda) * s[(i, j)]
        }
    })
}

fn random_structural(rng: &mut ChaCha8Rng) -> Hierarchy {
    let m = rng.random_range(3..7);
    let bottom: Vec<String> = (0..m).map(|i| format!("s{i}")).collect();
    let mut rows = vec![(0..m).collect::<Vec<_>>()];
    let cut = rng.random_range(1..m - 1);
    rows.push((0..=cut).collect());
    if m - cut - 1 >= 2 {
        rows.push((cut + 1..m).collect());
    }
    Hierarchy::structural(&rows, None, &bottom).unwrap()
}

fn c1_coherency() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0_f64;
    for i in 0..100 {
        let h = match i % 3 {
            0 => default_hierarchy(),
            1 => Hierarchy::temporal(12, &[12, 6, 4, 3, 2, 1]).unwrap(),
            _ => random_structural(&mut rng),
        };
        let panel = random_panel(&mut rng, &h, 60);
        let auto = lambda_opt(&panel.base_errors(&h).unwrap()).unwrap().min(LAMBDA_MAX);
        for lambda in [0.0, auto, 0.3, 0.9] {
            let w = fit_map(&panel, &h, lambda).map_err(|e| format!("panel {i}, lambda {lambda}: {e}"))?;
            let err = max_abs(&(&w.p * h.s() - Mat::identity(h.m(), h.m())));
            worst = worst.max(err);
        }
    }
    ensure(worst <= 1e-9, format!("max |PS - I| = {worst:e}"))?;
    Ok(format!("max |PS - I| = {worst:.2e} over 400 fits"))
}

fn c2_glm_equals_mint() -> Check {
    let h = default_hierarchy();
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut worst = 0.0_f64;
    for _ in 0..100 {
        let panel = random_panel(&mut rng, &h, 200);
        let w = fit_glm_recon(&panel, &h).map_err(|e| e.to_string())?;
        let oracle = mint_oracle(h.s(), &sample_cov(&panel, &h));
        worst = worst.max(max_abs(&(&w.p - oracle)));
    }
    ensure(worst <= 1e-8, format!("max diff {worst:e}"))?;
    Ok(format!("max diff {worst:.2e}"))
}

fn c3_map_equals_shrunk_mint() -> Check {
    let h = default_hierarchy();
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let mut worst = 0.0_f64;
    for _ in 0..25 {
        let panel = random_panel(&mut rng, &h, 200);
        let sh = sample_cov(&panel, &h);
        for lambda in [0.01, 0.1, 0.3, 0.9] {
            let w = fit_map(&panel, &h, lambda).map_err(|e| e.to_string())?;
            let oracle = mint_oracle(h.s(), &shrink(&sh, lambda));
            worst = worst.max(max_abs(&(&w.p - oracle)));
        }
    }
    ensure(worst <= 1e-8, format!("max diff {worst:e}"))?;
    Ok(format!("max diff {worst:.2e}"))
}

fn c4_variance_identities() -> Check {
    let h = default_hierarchy();
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let (mut w_ml, mut w_sr) = (0.0_f64, 0.0_f64);
    for _ in 0..50 {
        let panel = random_panel(&mut rng, &h, 80);
        let t = panel.t() as f64;
        let sh = sample_cov(&panel, &h);
        let w0 = fit_glm_recon(&panel, &h).map_err(|e| e.to_string())?;
        let ml = sigma_recon(&panel, &h, &w0, SigmaKind::Ml).map_err(|e| e.to_string())?.value;
        let e = panel.y() - panel.yhat() * w0.p.transpose();
        let direct = e.transpose() * &e / t;
        w_ml = w_ml.max(max_abs(&(&w0.p * &sh * w0.p.transpose() - &ml)));
        w_ml = w_ml.max(max_abs(&(direct - &ml)));
        for lambda in [0.0, 0.2, 0.7] {
            let w = fit_map(&panel, &h, lambda).map_err(|e| e.to_string())?;
            let s = sigma_recon(&panel, &h, &w, SigmaKind::Sreml).map_err(|e| e.to_string())?.value;
            let oracle = &w.p * shrink(&sh, lambda) * w.p.transpose() * (t / (t - 3.0 * (1.0 - lambda)));
            w_sr = w_sr.max(max_abs(&(s - &oracle)) / max_abs(&oracle).max(1.0));
        }
    }
    ensure(w_ml <= 1e-8, format!("P Sigma_h P' vs ML: {w_ml:e}"))?;
    ensure(w_sr <= 1e-10, format!("sREML scaling: {w_sr:e}"))?;
    Ok(format!("ML identity {w_ml:.2e}, sREML scaling {w_sr:.2e}"))
}

/// Inverse of a symmetric matrix through its eigendecomposition.
fn eig_inverse(a: &Mat) -> Mat {
    let e = a.clone().symmetric_eigen();
    let d = Mat::from_diagonal(&e.eigenvalues.map(|x| 1.0 / x));
    &e.eigenvectors * d * e.eigenvectors.transpose()
}

fn c5_prior_closed_forms() -> Check {
    let h = default_hierarchy();
    let diag = Vector::from_vec(vec![4., 2., 2., 1., 1., 1., 1.]);
    let (lambda, t) = (0.3, 50);
    let pr = map_priors(&h, &diag, lambda, t).map_err(|e| e.to_string())?;
    let p0 = weights_from_beta(&h, &pr.beta0_t).map_err(|e| e.to_string())?;

    let s = h.s();
    let wi = Mat::from_diagonal(&diag.map(|x| 1.0 / x));
    let oracle = eig_inverse(&(s.transpose() * &wi * s)) * s.transpose() * &wi;
    let d_p = max_abs(&(&p0 - &oracle));
    ensure(d_p <= 1e-10, format!("P(0) vs eigen oracle {d_p:e}"))?;
    let exact = [1.0 / 12.0, 5.0 / 24.0, -1.0 / 24.0, 17.0 / 24.0, -7.0 / 24.0];
    for (c, v) in exact.iter().enumerate() {
        ensure((p0[(0, c)] - v).abs() <= 1e-10, format!("P(0)[0,{c}] = {} vs {v}", p0[(0, c)]))?;
    }
    let printed_p = Mat::from_row_slice(
        4,
        7,
        &[
            0.09, 0.20, -0.04, 0.72, -0.28, -0.05, -0.05, //
            0.09, 0.20, -0.04, -0.28, 0.72, -0.05, -0.05, //
            0.09, -0.04, 0.20, -0.05, -0.05, 0.72, -0.28, //
            0.09, -0.04, 0.20, -0.05, -0.05, -0.28, 0.72,
        ],
    );
    let pp = max_abs(&(&p0 - &printed_p));
    ensure(pp <= 0.02, format!("P(0) vs printed {pp}"))?;

    let a = lambda * t as f64 / (1.0 - lambda);
    let core_b = &pr.sigma_beta0 * a;
    let exact_b = Mat::from_row_slice(3, 3, &[16., -8., -8., -8., 28., 4., -8., 4., 28.]) / 96.0;
    let st = h.s_top();
    let d = Mat::from_diagonal(&diag.rows(0, 3)) + &st * Mat::from_diagonal(&diag.rows(3, 4)) * st.transpose();
    let db = max_abs(&(&core_b - eig_inverse(&d))).max(max_abs(&(&core_b - &exact_b)));
    ensure(db <= 1e-10, format!("prior beta covariance core {db:e}"))?;
    let printed_b = Mat::from_row_slice(3, 3, &[0.16, -0.08, -0.08, -0.08, 0.28, 0.04, -0.08, 0.04, 0.28]);
    let pb = max_abs(&(&core_b - printed_b));
    ensure(pb <= 0.02, format!("beta core vs printed {pb}"))?;

    let core_psi = &pr.psi / a;
    let v1 = eig_inverse(
        &(Mat::from_diagonal(&diag.rows(3, 4).map(|x| 1.0 / x))
            + st.transpose() * Mat::from_diagonal(&diag.rows(0, 3).map(|x| 1.0 / x)) * &st),
    );
    let dpsi = max_abs(&(&core_psi - v1));
    ensure(dpsi <= 1e-10, format!("Psi core {dpsi:e}"))?;
    let printed_psi = printed_p.columns(3, 4).into_owned();
    let ppsi = max_abs(&(&core_psi - printed_psi));
    ensure(ppsi <= 0.02, format!("Psi core vs printed {ppsi}"))?;
    Ok(format!(
        "exact {:.1e}/{db:.1e}/{dpsi:.1e}; printed within {:.3}",
        d_p,
        pp.max(pb).max(ppsi)
    ))
}

fn c6_separation() -> Check {
    let h = Hierarchy::temporal(24, &[24, 12, 8, 6, 4, 3, 2, 1]).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    let panel = random_panel(&mut rng, &h, 365);
    let w = fit_glm_recon(&panel, &h).map_err(|e| e.to_string())?;
    let tab = separation_table(&panel, &h, &w, &w, h.levels()).map_err(|e| e.to_string())?;
    let (mut rel, mut cross) = (0.0_f64, 0.0_f64);
    for r in tab.rows.iter().chain(std::iter::once(&tab.total)) {
        rel = rel.max((r.sse_base - r.sse_recon - r.ss_mod).abs() / r.sse_base);
        cross = cross.max(r.cross.abs());
    }
    ensure(tab.rows.len() == 8, "expected 8 level rows")?;
    ensure(rel <= 1e-8, format!("col1 - col2 - col3 relative {rel:e}"))?;
    ensure(cross <= 1e-8, format!("cross term {cross:e}"))?;
    let f = f_test(&panel, &h, &w, &h.select_all()).map_err(|e| e.to_string())?;
    ensure((h.n(), h.m()) == (60, 24), "hierarchy size")?;
    ensure((f.df1, f.df2) == (36, 329), format!("df = ({}, {})", f.df1, f.df2))?;
    Ok(format!("identity {rel:.1e}, cross {cross:.1e}, df (36, 329)"))
}

/// Asymptotic Kolmogorov p-value for statistic `d` with `n` samples.
fn ks_pvalue(d: f64, n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    let x = (sn + 0.12 + 0.11 / sn) * d;
    let mut p = 0.0;
    for j in 1..=100 {
        let jf = j as f64;
        p += 2.0 * (-1.0f64).powi(j - 1) * (-2.0 * jf * jf * x * x).exp();
    }
    p.clamp(0.0, 1.0)
}

fn c7_distributions() -> Check {
    let h = default_hierarchy();
    let (t, reps) = (60, 2000);
    let mut rng = ChaCha8Rng::seed_from_u64(107);
    let yhat = randn(&mut rng, t, h.n()) * 2.0;
    let x1 = yhat.columns(0, 3) - yhat.columns(3, 4) * h.s_top().transpose();
    let beta = randn(&mut rng, 3, 4) * 0.3;
    let a = randn(&mut rng, 4, 4);
    let sigma = &a * a.transpose() / 4.0 + Mat::identity(4, 4);
    let l = sigma.clone().cholesky().unwrap().l();

    let mut sum = Mat::zeros(4, 4);
    let mut sumsq = Mat::zeros(4, 4);
    let mut fs = Vec::with_capacity(reps);
    let (mut rejections, mut total) = (0usize, 0usize);
    let bottom = h.select(&[3, 4, 5, 6]).map_err(|e| e.to_string())?;
    for _ in 0..reps {
        let e = randn(&mut rng, t, 4) * l.transpose();
        let yb = yhat.columns(3, 4);
        // REML centrality with a non-zero slope
        let p = ForecastPanel::new(yb + &x1 * &beta + &e, yhat.clone(), None).unwrap();
        let w = fit_glm_recon(&p, &h).map_err(|e| e.to_string())?;
        let s = sigma_recon(&p, &h, &w, SigmaKind::Reml).map_err(|e| e.to_string())?.value;
        sum += &s;
        sumsq += s.component_mul(&s);
        // null slope for the test statistics
        let p0 = ForecastPanel::new(yb + &e, yhat.clone(), None).unwrap();
        let w0 = fit_glm_recon(&p0, &h).map_err(|e| e.to_string())?;
        fs.push(f_test(&p0, &h, &w0, &bottom).map_err(|e| e.to_string())?.f);
        let s0 = sigma_recon(&p0, &h, &w0, SigmaKind::Reml).map_err(|e| e.to_string())?.value;
        let (d, _) = build_design_shared(&p0, &h, false).map_err(|e| e.to_string())?;
        let z = wald(&w0.beta_t, &beta_cov_shared(d.x1(), &s0).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
        rejections += z.iter().filter(|v| v.abs() > 1.96).count();
        total += z.len();
    }
    let n = reps as f64;
    let mean = &sum / n;
    let mut worst_z = 0.0_f64;
    for i in 0..4 {
        for j in 0..4 {
            let var = (sumsq[(i, j)] / n - mean[(i, j)].powi(2)) * n / (n - 1.0);
            let se = (var / n).sqrt();
            worst_z = worst_z.max((mean[(i, j)] - sigma[(i, j)]).abs() / se);
        }
    }
    ensure(worst_z <= 3.0, format!("REML mean off by {worst_z:.2} SE"))?;

    let dist = FisherSnedecor::new(3.0, (t - 3) as f64).unwrap();
    fs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut d = 0.0_f64;
    for (i, f) in fs.iter().enumerate() {
        let c = dist.cdf(*f);
        d = d.max((c - i as f64 / n).abs()).max(((i + 1) as f64 / n - c).abs());
    }
    let p = ks_pvalue(d, reps);
    ensure(p > 0.01, format!("KS p-value {p:.4}"))?;

    let rate = rejections as f64 / total as f64;
    ensure((rate - 0.05).abs() <= 0.02, format!("Wald rejection rate {rate:.4}"))?;
    Ok(format!("REML max {worst_z:.2} SE; KS p = {p:.3}; Wald rate {rate:.4}"))
}

fn c8_simulation_directions() -> Check {
    let cfg = Var1Config::study_default(24, 50, 2024);
    let r = run_study(&cfg, &default_hierarchy(), &[24, 60, 120, 240], None, &Estimator::ALL)
        .map_err(|e| e.to_string())?;
    let get = |t, e| r.summary_for(t, e).unwrap();
    let par = get(120, Estimator::Par).mean_rel;
    let sreml = get(120, Estimator::Sreml).mean_rel;
    let mut fails = Vec::new();
    if !(par < sreml && sreml < 0.0) {
        fails.push(format!("T=120 ordering: par {par:.4}, sreml {sreml:.4}, shrink 0"));
    }
    let base = get(24, Estimator::Base).mean_logscore;
    let best_recon = [Estimator::Shrink, Estimator::Sreml, Estimator::Par]
        .iter()
        .map(|e| get(24, *e).mean_logscore)
        .fold(f64::INFINITY, f64::min);
    if !(base < best_recon) {
        fails.push(format!("T=24: base {base:.4} vs best reconciled {best_recon:.4}"));
    }
    let g: Vec<f64> = [60, 120, 240].iter().map(|t| get(*t, Estimator::Sreml).mean_rel.abs()).collect();
    if !(g[0] >= g[1] && g[1] >= g[2]) {
        fails.push(format!("|sREML gain| not non-increasing: {g:?}"));
    }
    let detail = format!(
        "T=120 par {par:.4} < sreml {sreml:.4} < 0; T=24 base {base:.4} vs {best_recon:.4}; |gain| {:.4} {:.4} {:.4}",
        g[0], g[1], g[2]
    );
    if fails.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{}; {detail}", fails.join("; ")))
    }
}

fn c9_scoring() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(109);
    let mut worst = 0.0_f64;
    for m in 1..6 {
        let mut fc = Vec::new();
        let obs = randn(&mut rng, 5, m);
        let mut oracle = 0.0;
        for t in 0..5 {
            let a = randn(&mut rng, m, m);
            let cov = &a * a.transpose() + Mat::identity(m, m) * 0.5;
            let mu: Vec<f64> = (0..m).map(|_| rng.sample(StandardNormal)).collect();
            let mvn = MultivariateNormal::new(mu.clone(), cov.as_slice().to_vec()).unwrap();
            oracle -= mvn.ln_pdf(&DVector::from_fn(m, |i, _| obs[(t, i)]));
            fc.push(GaussianForecast::new(Vector::from_vec(mu), cov).unwrap());
        }
        let ls = log_score(&fc, &obs).map_err(|e| e.to_string())?;
        worst = worst.max((ls - oracle).abs() / oracle.abs().max(1.0));
    }
    ensure(worst <= 1e-10, format!("log-score vs density oracle {worst:e}"))?;

    let unit = GaussianForecast::new(Vector::from_element(1, 0.0), Mat::identity(1, 1)).unwrap();
    let l1 = log_score(&[unit.clone()], &Mat::zeros(1, 1)).unwrap();
    ensure((l1 - 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12, "standard normal at mode")?;
    let two = GaussianForecast::new(Vector::from_vec(vec![1.0, 4.0]), Mat::identity(2, 2)).unwrap();
    let l2 = log_score(&[two.clone()], &Mat::from_row_slice(1, 2, &[1.0, 4.0])).unwrap();
    ensure((l2 - (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12, "bivariate at mode")?;
    ensure(variogram_score(&unit, &Vector::from_element(1, 3.0), 2.0, None).unwrap() == 0.0, "m=1 variogram")?;
    ensure(
        (variogram_score(&two, &Vector::from_vec(vec![1.0, 4.0]), 2.0, None).unwrap() - 4.0).abs() < 1e-12,
        "m=2 variogram",
    )?;

    // closed-form pair expectations against sampling
    let m = 4;
    let a = randn(&mut rng, m, m);
    let cov = &a * a.transpose() + Mat::identity(m, m);
    let mu = Vector::from_fn(m, |_, _| rng.sample(StandardNormal));
    let l = cov.clone().cholesky().unwrap().l();
    let draws = 1_000_000;
    let npairs = m * (m - 1) / 2;
    let mut s1 = vec![0.0; npairs];
    let mut s2 = vec![0.0; npairs];
    for _ in 0..draws {
        let z = Vector::from_fn(m, |_, _| rng.sample(StandardNormal));
        let y = &mu + &l * z;
        let mut k = 0;
        for i in 0..m {
            for j in i + 1..m {
                let d = (y[i] - y[j]).powi(2);
                s1[k] += d;
                s2[k] += d * d;
                k += 1;
            }
        }
    }
    let nd = draws as f64;
    let mut worst_se = 0.0_f64;
    let mut k = 0;
    for i in 0..m {
        for j in i + 1..m {
            let closed = (mu[i] - mu[j]).powi(2) + cov[(i, i)] + cov[(j, j)] - 2.0 * cov[(i, j)];
            let mean = s1[k] / nd;
            let se = ((s2[k] / nd - mean * mean) / nd).sqrt();
            worst_se = worst_se.max((mean - closed).abs() / se);
            k += 1;
        }
    }
    ensure(worst_se <= 3.0, format!("variogram expectation off by {worst_se:.2} SE"))?;

    let e = Mat::from_row_slice(2, 2, &[1.0, -2.0, 0.5, 3.0]);
    ensure(rrmse(&e, &e).unwrap() == 0.0, "rrmse identical")?;
    ensure(rrmse(&e, &Mat::zeros(2, 2)).unwrap() == -100.0, "rrmse perfect")?;
    ensure((rrmse(&e, &(&e * 0.5)).unwrap() + 50.0).abs() < 1e-12, "rrmse half")?;
    ensure(rel_vs(2.0, 2.0).unwrap() == 0.0, "relVs same")?;
    ensure(rel_vs(1.0, 2.0).unwrap() == -50.0, "relVs half")?;
    ensure(rel_vs(4.0, 2.0).unwrap() == 100.0, "relVs double")?;
    Ok(format!("density {worst:.1e}; variogram max {worst_se:.2} SE"))
}

fn c10_matops() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(110);
    let mut worst = [0.0_f64; 6];
    for _ in 0..120 {
        let (p, q, r, s) = (
            rng.random_range(1..6),
            rng.random_range(1..6),
            rng.random_range(1..6),
            rng.random_range(1..6),
        );
        let a = randn(&mut rng, p, q);
        let b = randn(&mut rng, q, r);
        let c = randn(&mut rng, r, s);
        let lhs = vec(&(&a * &b * &c));
        let rhs = kron(&c.transpose(), &a) * vec(&b);
        worst[0] = worst[0].max((&lhs - &rhs).amax() / lhs.amax().max(1.0));

        let m = randn(&mut rng, p, s);
        if unvec(&vec(&m), p, s).unwrap() != m {
            return Err("unvec(vec(M)) != M".into());
        }

        let b2 = randn(&mut rng, p, q);
        let dot = vec(&a).dot(&vec(&b2));
        let tr = (a.transpose() * &b2).trace();
        worst[1] = worst[1].max((dot - tr).abs() / dot.abs().max(1.0));

        let sa = randn(&mut rng, q, q) + Mat::identity(q, q) * 3.0;
        let sb = randn(&mut rng, r, r) + Mat::identity(r, r) * 3.0;
        let inv = kron(&sa, &sb).try_inverse().unwrap();
        let kinv = kron(&sa.clone().try_inverse().unwrap(), &sb.clone().try_inverse().unwrap());
        worst[2] = worst[2].max((&inv - &kinv).amax() / inv.amax().max(1.0));

        let ca = randn(&mut rng, q, q);
        let cb = randn(&mut rng, r, r);
        let cc = randn(&mut rng, q, q);
        let cd = randn(&mut rng, r, r);
        let mp = kron(&ca, &cb) * kron(&cc, &cd);
        let mq = kron(&(&ca * &cc), &(&cb * &cd));
        worst[3] = worst[3].max((&mp - &mq).amax() / mp.amax().max(1.0));

        let ga = randn(&mut rng, s, s);
        let sig = &ga * ga.transpose() + Mat::identity(s, s);
        let go = randn(&mut rng, q, q);
        let om = &go * go.transpose() + Mat::identity(q, q);
        let y = Vector::from_fn(q * s, |_, _| rng.sample(StandardNormal));
        let ym = unvec(&y, q, s).unwrap();
        let si = sig.clone().try_inverse().unwrap();
        let oi = om.clone().try_inverse().unwrap();
        let quad = (y.transpose() * kron(&si, &oi) * &y)[(0, 0)];
        let trq = (ym.transpose() * &oi * &ym * &si).trace();
        worst[4] = worst[4].max((quad - trq).abs() / quad.abs().max(1.0));

        let da = randn(&mut rng, p, p);
        let db = randn(&mut rng, s, s);
        let det = kron(&da, &db).determinant();
        let dd = da.determinant().powi(s as i32) * db.determinant().powi(p as i32);
        worst[5] = worst[5].max((det - dd).abs() / dd.abs().max(1.0));

        let x = solve_spd(&sig, &m.transpose()).unwrap();
        let res = max_abs(&(&sig * x - m.transpose()));
        if res > 1e-9 * max_abs(&m).max(f64::MIN_POSITIVE) {
            return Err(format!("solve_spd residual {res:e}"));
        }
    }
    let tol = [1e-12, 1e-12, 1e-10, 1e-12, 1e-10, 1e-10];
    let names = ["vec(ABC)", "vec·vec = tr", "kron inverse", "mixed product", "quadratic form", "kron det"];
    for i in 0..6 {
        ensure(worst[i] <= tol[i], format!("{}: {:e} > {:e}", names[i], worst[i], tol[i]))?;
    }
    Ok(format!("worst relative errors {:.1e}", worst.iter().fold(0.0_f64, |a, b| a.max(*b))))
}

fn main() {
    let criteria: [(&str, Option<u64>, fn() -> Check); 10] = [
        ("coherency of fitted weights", Some(5), c1_coherency),
        ("GLM fit equals minT with sample covariance", Some(5), c2_glm_equals_mint),
        ("MAP fit equals minT with shrunk covariance", Some(5), c3_map_equals_shrunk_mint),
        ("reconciled covariance identities", None, c4_variance_identities),
        ("diagonal-prior closed forms", Some(1), c5_prior_closed_forms),
        ("variance separation by level", Some(10), c6_separation),
        ("REML centrality, F and Wald null distributions", Some(60), c7_distributions),
        ("simulation study directions", Some(120), c8_simulation_directions),
        ("scoring oracles", None, c9_scoring),
        ("vectorisation and Kronecker identities", Some(2), c10_matops),
    ];
    let mut failed = 0;
    for (i, (name, budget, f)) in criteria.iter().enumerate() {
        let t0 = Instant::now();
        let outcome = f();
        let el = t0.elapsed();
        let over = budget.is_some_and(|b| el > Duration::from_secs(b));
        let budget_txt = budget.map_or("no budget".to_string(), |b| format!("budget {b}s"));
        let (status, detail) = match (&outcome, over) {
            (Ok(d), false) => ("PASS", d.clone()),
            (Ok(d), true) => ("FAIL", format!("over time; {d}")),
            (Err(e), _) => ("FAIL", e.clone()),
        };
        if status == "FAIL" {
            failed += 1;
        }
        println!(
            "{status} [{:>2}] {name} ({:.2}s, {budget_txt}): {detail}",
            i + 1,
            el.as_secs_f64()
        );
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

//! Rate tables, log-log rate fits and deterministic CSV emission.
//!
//! All numbers are written with 17 significant digits (`{:.16e}`), so reruns
//! with identical inputs produce byte-identical artifacts.

use crate::error::{Error, Result};

/// One rung of a noise ladder: a reconstruction error against its predicted
/// rate bound.
#[derive(Debug, Clone)]
pub struct RateRow {
    pub delta: f64,
    pub alpha: f64,
    pub nu_delta: f64,
    pub tau: f64,
    pub c: f64,
    /// `H^{1,0}(Q_T tau)` reconstruction error (absolute).
    pub error_h10: f64,
    /// Relative version, against the truth norm on the same window.
    pub rel_error_h10: f64,
    pub bound: f64,
    pub implied_c: f64,
    pub seed: u64,
    pub cg_iters: usize,
}

/// Noiseless baseline rung (`delta = 0`): no rate bound applies, the error is
/// pure discretization bias.
#[derive(Debug, Clone)]
pub struct BaselineRow {
    pub alpha: f64,
    pub tau: f64,
    pub error_h10: f64,
    pub rel_error_h10: f64,
    pub cg_iters: usize,
}

/// Ladder output: noisy rungs sorted by delta descending, plus optional
/// noiseless baselines and per-rung failures that did not abort the ladder.
#[derive(Debug, Clone, Default)]
pub struct RateTable {
    pub rows: Vec<RateRow>,
    pub baselines: Vec<BaselineRow>,
    pub failures: Vec<String>,
}

impl RateTable {
    pub fn sort(&mut self) {
        self.rows.sort_by(|a, b| {
            b.delta
                .partial_cmp(&a.delta)
                .unwrap()
                .then(a.tau.partial_cmp(&b.tau).unwrap())
                .then(a.seed.cmp(&b.seed))
        });
    }

    /// CSV with one row per rung; baselines get delta = 0 and empty
    /// bound/implied columns semantics (written as 0).
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "delta,alpha,nu_delta,tau,c,error_h10,rel_error_h10,bound,implied_C,seed,cg_iters\n",
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{},{}\n",
                r.delta,
                r.alpha,
                r.nu_delta,
                r.tau,
                r.c,
                r.error_h10,
                r.rel_error_h10,
                r.bound,
                r.implied_c,
                r.seed,
                r.cg_iters
            ));
        }
        for b in &self.baselines {
            s.push_str(&format!(
                "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{},{}\n",
                0.0, b.alpha, 0.0, b.tau, 0.0, b.error_h10, b.rel_error_h10, 0.0, 0.0, 0, b.cg_iters
            ));
        }
        s
    }
}

/// Least-squares fit of `log(error)` against `log(bound)`.
#[derive(Debug, Clone, Copy)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    /// max/min of the implied constants `error / bound`.
    pub spread: f64,
    pub n_points: usize,
}

/// Fit the rate model on the noisy rungs. Requires at least 3 rows; rejects
/// non-finite entries.
pub fn fit_rate(table: &RateTable) -> Result<RateFit> {
    let rows: Vec<&RateRow> = table.rows.iter().collect();
    if rows.len() < 3 {
        return Err(Error::InvalidParam(format!("need >= 3 rows, got {}", rows.len())));
    }
    for r in &rows {
        if !(r.error_h10.is_finite() && r.bound.is_finite() && r.implied_c.is_finite()) {
            return Err(Error::NonFinite("rate table row".into()));
        }
        if !(r.error_h10 > 0.0 && r.bound > 0.0) {
            return Err(Error::InvalidParam("rate rows must have positive error and bound".into()));
        }
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.bound.ln()).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.error_h10.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for i in 0..xs.len() {
        sxx += (xs[i] - mx) * (xs[i] - mx);
        sxy += (xs[i] - mx) * (ys[i] - my);
    }
    if sxx == 0.0 {
        return Err(Error::InvalidParam("all bounds identical; slope undefined".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let mut cmin = f64::INFINITY;
    let mut cmax = f64::NEG_INFINITY;
    for r in &rows {
        cmin = cmin.min(r.implied_c);
        cmax = cmax.max(r.implied_c);
    }
    Ok(RateFit { slope, intercept, spread: cmax / cmin, n_points: rows.len() })
}

/// Two-column `(log bound, log error)` plot file for the noisy rungs.
pub fn plot_data(table: &RateTable) -> String {
    let mut s = String::from("log_bound,log_error\n");
    for r in &table.rows {
        s.push_str(&format!("{:.16e},{:.16e}\n", r.bound.ln(), r.error_h10.ln()));
    }
    s
}

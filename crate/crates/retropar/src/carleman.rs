//! Carleman weight, the `nu(delta)` / rate-exponent calculus, and an empirical
//! verifier for the weighted energy inequality.
//!
//! The weight is `exp(2(t+1)^nu)`. Raw weights overflow quickly, so they are
//! only ever assembled in anchored form `exp(2(t+1)^nu - 2(anchor+1)^nu)`;
//! multiplying both sides of the inequality by the same positive anchor factor
//! leaves it intact. The guard `2(T+1)^nu <= 700` bounds every exponent that
//! can appear with `anchor = T`; log-domain quantities remain computable for
//! any `nu`.

use crate::error::{Error, Result};
use crate::grid::{diff, space_deriv_csr, Deriv, Field, Grid};
use crate::model::{apply_l, CoefficientSet};

/// Parameters of the weight and of the rate formulas.
#[derive(Debug, Clone, PartialEq)]
pub struct CarlemanParams {
    pub nu: f64,
    pub tau: f64,
    pub t_final: f64,
    /// The `k` of the calibration `exp(k(T+1)^nu) = 1/delta`: 3 for the
    /// stability estimate, 2 for quasi-reversibility and convexification.
    pub k_base: f64,
    /// Time at which the assembled weight equals one.
    pub anchor: f64,
}

/// Largest admissible `2(T+1)^nu`; beyond this the anchored weight at `t = T`
/// with `anchor = 0` would overflow `f64`.
pub const OVERFLOW_GUARD: f64 = 700.0;

impl CarlemanParams {
    pub fn new(nu: f64, tau: f64, t_final: f64, k_base: f64, anchor: f64) -> Result<CarlemanParams> {
        if !(nu >= 1.0) {
            return Err(Error::InvalidParam(format!("nu = {nu} must be >= 1")));
        }
        if !(tau > 0.0 && tau < t_final) {
            return Err(Error::InvalidParam(format!("tau = {tau} outside (0, {t_final})")));
        }
        if !(k_base > 0.0) {
            return Err(Error::InvalidParam("k_base must be positive".into()));
        }
        if !(0.0..=t_final).contains(&anchor) {
            return Err(Error::InvalidParam(format!("anchor = {anchor} outside [0, {t_final}]")));
        }
        if cwf_log(t_final, nu) > OVERFLOW_GUARD {
            return Err(Error::OverflowGuard(format!(
                "2(T+1)^nu = {:.3e} exceeds {OVERFLOW_GUARD}",
                cwf_log(t_final, nu)
            )));
        }
        Ok(CarlemanParams { nu, tau, t_final, k_base, anchor })
    }

    /// `{1, 2, ..., 10}` intersected with the overflow guard.
    pub fn default_nu_grid(t_final: f64) -> Vec<f64> {
        (1..=10)
            .map(|k| k as f64)
            .filter(|&nu| cwf_log(t_final, nu) <= OVERFLOW_GUARD)
            .collect()
    }
}

/// Logarithm of the Carleman weight: `2(t+1)^nu`.
pub fn cwf_log(t: f64, nu: f64) -> f64 {
    2.0 * (t + 1.0).powf(nu)
}

/// Weight normalized to equal one at the anchor time:
/// `exp(2(t+1)^nu - 2(anchor+1)^nu)`. With `anchor = T` all weights are <= 1.
pub fn anchored_weight(t: f64, params: &CarlemanParams) -> f64 {
    (cwf_log(t, params.nu) - cwf_log(params.anchor, params.nu)).exp()
}

/// `nu(delta)` solving `exp(k(T+1)^nu) = 1/delta`.
///
/// Requires `ln(delta^{-1/k}) > 1`, otherwise the defining equation has no
/// admissible (positive) solution.
pub fn nu_of_delta(delta: f64, k_base: f64, t_final: f64) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidParam(format!("delta = {delta} outside (0, 1)")));
    }
    let inner = -delta.ln() / k_base; // ln(delta^{-1/k})
    if inner <= 1.0 {
        return Err(Error::InvalidParam(format!(
            "delta too large: ln(delta^(-1/k)) = {inner:.3} <= 1"
        )));
    }
    Ok(inner.ln() / (t_final + 1.0).ln())
}

/// Rate exponent `c(tau, T) = ln(tau+1) / ln(T+1)`, in `(0, 1)` for `tau < T`.
pub fn c_exponent(tau: f64, t_final: f64) -> Result<f64> {
    if !(tau > 0.0 && tau < t_final) {
        return Err(Error::InvalidParam(format!("tau = {tau} outside (0, {t_final})")));
    }
    Ok((tau + 1.0).ln() / (t_final + 1.0).ln())
}

/// Convergence-rate bound `exp(-(1/k^c) ln(1/delta)^c)`, computed in the log
/// domain.
pub fn rate_bound(delta: f64, k_base: f64, c: f64) -> f64 {
    debug_assert!(delta > 0.0 && delta < 1.0);
    let log_term = (1.0 / delta).ln().powf(c) / k_base.powf(c);
    (-log_term).exp()
}

/// One rung of the divergence/vanishing ratio ladder.
#[derive(Debug, Clone)]
pub struct Lemma31Row {
    pub delta: f64,
    pub nu: f64,
    /// `ln[ exp(-2(tau+1)^nu(delta)) / delta^y ]` — diverges to +inf.
    pub log_ratio_holder: f64,
    /// `ln[ exp(-2(tau+1)^nu(delta)) * ln(1/delta)^y ]` — sinks to -inf.
    pub log_ratio_log: f64,
    /// `-2(tau+1)^nu(delta)` evaluated directly.
    pub log_weight_direct: f64,
    /// The same number through the algebraic identity `-(2/k^c) ln(1/delta)^c`.
    pub log_weight_identity: f64,
}

/// Evaluate the two stability-ratio sequences on a decreasing delta ladder,
/// together with the identity cross-check between the two closed forms of
/// `exp(-2(tau+1)^nu(delta))`.
pub fn lemma31_ratios(
    deltas: &[f64],
    tau: f64,
    t_final: f64,
    k_base: f64,
    y: f64,
) -> Result<Vec<Lemma31Row>> {
    if !(y > 0.0) {
        return Err(Error::InvalidParam("y must be positive".into()));
    }
    for w in deltas.windows(2) {
        if !(w[1] < w[0]) {
            return Err(Error::InvalidParam("delta ladder must be strictly decreasing".into()));
        }
    }
    let c = c_exponent(tau, t_final)?;
    let mut rows = Vec::with_capacity(deltas.len());
    for &delta in deltas {
        let nu = nu_of_delta(delta, k_base, t_final)?;
        let log_inv_delta = (1.0 / delta).ln();
        let log_weight_direct = -2.0 * (tau + 1.0).powf(nu);
        let log_weight_identity = -2.0 / k_base.powf(c) * log_inv_delta.powf(c);
        rows.push(Lemma31Row {
            delta,
            nu,
            log_ratio_holder: log_weight_direct + y * log_inv_delta,
            log_ratio_log: log_weight_direct + y * log_inv_delta.ln(),
            log_weight_direct,
            log_weight_identity,
        });
    }
    Ok(rows)
}

/// Per-`nu` integrals of the weighted energy inequality.
#[derive(Debug, Clone)]
pub struct CarlemanRow {
    pub nu: f64,
    /// Weighted residual integral `int (u_t - Lu)^2 w`.
    pub lhs: f64,
    /// `int (grad u)^2 w`.
    pub grad_term: f64,
    /// `int u^2 w`.
    pub val_term: f64,
    /// `exp(3(T+1)^nu) ||u(.,T)||^2`, anchored.
    pub data_final: f64,
    /// `||grad u(.,0)||^2`, anchored.
    pub data_initial: f64,
    /// `lhs / (sqrt(nu) grad + nu^2 val + data_final + data_initial)`:
    /// a constant for which the inequality holds for this `u`.
    pub fitted_c: f64,
}

#[derive(Debug, Clone)]
pub struct CarlemanReport {
    pub rows: Vec<CarlemanRow>,
    /// Smallest grid `nu` from which `fitted_c > 0` holds onward.
    pub empirical_nu0: Option<f64>,
}

impl CarlemanReport {
    /// CSV with columns nu, lhs, grad_term, val_term, data_final, data_initial, fitted_C.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("nu,lhs,grad_term,val_term,data_final,data_initial,fitted_C\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}\n",
                r.nu, r.lhs, r.grad_term, r.val_term, r.data_final, r.data_initial, r.fitted_c
            ));
        }
        s
    }
}

/// Evaluate the four integrals of the weighted inequality for each admissible
/// `nu` in the grid, all rescaled by the common anchor factor
/// `exp(-2(anchor+1)^nu)` so nothing overflows.
///
/// `u` must vanish on the lateral boundary. Grid values of `nu` violating the
/// overflow guard (including the `exp(3(T+1)^nu)` data factor) are skipped.
pub fn verify_carleman(
    grid: &Grid,
    u: &Field,
    coeffs: &CoefficientSet,
    nu_grid: &[f64],
    anchor: f64,
) -> Result<CarlemanReport> {
    let scale = u.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut bmax: f64 = 0.0;
    for l in 0..grid.nt() {
        for s in 0..grid.n_space() {
            if grid.is_space_boundary(s) {
                bmax = bmax.max(u.values[grid.node(l, s)].abs());
            }
        }
    }
    if bmax > 1e-12 * scale.max(1.0) {
        return Err(Error::BoundaryCompat(format!(
            "u on the lateral boundary reaches {bmax:.3e}"
        )));
    }

    let t_final = grid.t_final();
    let residual = {
        let ut = diff(grid, u, Deriv::T)?;
        let lu = apply_l(coeffs, grid, u)?;
        ut.add_scaled(&lu, -1.0)
    };
    let grads: Vec<Field> =
        (0..grid.dim()).map(|i| diff(grid, u, Deriv::X(i))).collect::<Result<_>>()?;

    // ||u(., T)||^2_{L2(Omega)}
    let final_sq = {
        let sl = u.slice(grid, grid.nt() - 1);
        let n = sl.l2(grid);
        n * n
    };
    // ||grad u(., 0)||^2_{L2(Omega)}
    let init_grad_sq = {
        let sl = u.slice(grid, 0);
        let mut acc = 0.0;
        for i in 0..grid.dim() {
            let d = space_deriv_csr(grid, i, 1).matvec(&sl.values);
            for s in 0..grid.n_space() {
                acc += grid.space_weights()[s] * d[s] * d[s];
            }
        }
        acc
    };

    let mut rows = Vec::new();
    for &nu in nu_grid {
        if nu < 1.0 {
            continue;
        }
        let log_anchor = cwf_log(anchor, nu);
        // guard both the lateral weight and the final-data factor
        if cwf_log(t_final, nu) > OVERFLOW_GUARD
            || 1.5 * cwf_log(t_final, nu) - log_anchor > OVERFLOW_GUARD
        {
            continue;
        }
        let mut lhs = 0.0;
        let mut grad_term = 0.0;
        let mut val_term = 0.0;
        for l in 0..grid.nt() {
            let w_t = (cwf_log(grid.time(l), nu) - log_anchor).exp();
            for s in 0..grid.n_space() {
                let m = grid.node(l, s);
                let w = grid.node_weights()[m] * w_t;
                lhs += w * residual.values[m] * residual.values[m];
                let mut g2 = 0.0;
                for gf in &grads {
                    g2 += gf.values[m] * gf.values[m];
                }
                grad_term += w * g2;
                val_term += w * u.values[m] * u.values[m];
            }
        }
        let data_final = (1.5 * cwf_log(t_final, nu) - log_anchor).exp() * final_sq;
        let data_initial = (-log_anchor).exp() * init_grad_sq;
        let denom = nu.sqrt() * grad_term + nu * nu * val_term + data_final + data_initial;
        let fitted_c = if denom > 0.0 { lhs / denom } else { 0.0 };
        rows.push(CarlemanRow { nu, lhs, grad_term, val_term, data_final, data_initial, fitted_c });
    }
    if rows.is_empty() {
        return Err(Error::OverflowGuard("no admissible nu in the grid".into()));
    }
    // smallest nu from which fitted_c stays positive
    let mut empirical_nu0 = None;
    for i in (0..rows.len()).rev() {
        if rows[i].fitted_c > 0.0 {
            empirical_nu0 = Some(rows[i].nu);
        } else {
            break;
        }
    }
    Ok(CarlemanReport { rows, empirical_nu0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridSpec;
    use approx::assert_relative_eq;

    #[test]
    fn cwf_log_values() {
        assert_relative_eq!(cwf_log(0.0, 1.0), 2.0);
        assert_relative_eq!(cwf_log(1.0, 2.0), 8.0);
        // 2 * 1.5^3 = 6.75
        assert_relative_eq!(cwf_log(0.5, 3.0), 6.75);
    }

    #[test]
    fn anchored_weight_is_one_at_anchor_and_monotone() {
        for nu in [1.0, 2.0, 5.0] {
            let p = CarlemanParams::new(nu, 0.5, 1.0, 2.0, 1.0).unwrap();
            assert_relative_eq!(anchored_weight(p.anchor, &p), 1.0);
            let mut prev = -1.0;
            for k in 0..=50 {
                let t = k as f64 / 50.0;
                let w = anchored_weight(t, &p);
                assert!(w > prev, "weight not strictly increasing at t = {t}");
                assert!(w <= 1.0 + 1e-15);
                prev = w;
            }
        }
        // anchor = tau: weight at T is exp(2*2^3 - 2*1.5^3) = exp(9.25)
        let p = CarlemanParams::new(3.0, 0.5, 1.0, 2.0, 0.5).unwrap();
        assert_relative_eq!(anchored_weight(1.0, &p), (9.25f64).exp(), max_relative = 1e-12);
    }

    #[test]
    fn params_reject_out_of_range() {
        assert!(CarlemanParams::new(0.5, 0.5, 1.0, 2.0, 1.0).is_err());
        assert!(CarlemanParams::new(1.0, 1.5, 1.0, 2.0, 1.0).is_err());
        assert!(CarlemanParams::new(1.0, 0.5, 1.0, -1.0, 1.0).is_err());
        assert!(CarlemanParams::new(1.0, 0.5, 1.0, 2.0, 2.0).is_err());
        // 2 * 2^10 = 2048 > 700
        assert!(matches!(
            CarlemanParams::new(10.0, 0.5, 1.0, 2.0, 1.0),
            Err(Error::OverflowGuard(_))
        ));
        // guard trims the default grid: T = 1 admits nu <= 8 (2*2^8 = 512)
        let grid = CarlemanParams::default_nu_grid(1.0);
        assert_eq!(grid, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn nu_of_delta_closed_form_and_roundtrip() {
        // delta = exp(-k e), T = e - 1 -> nu = 1
        let e = std::f64::consts::E;
        for k in [2.0, 3.0] {
            let delta = (-k * e).exp();
            let nu = nu_of_delta(delta, k, e - 1.0).unwrap();
            assert_relative_eq!(nu, 1.0, max_relative = 1e-12);
        }
        // frozen: delta = 1e-6, k = 3, T = 1 -> ln(ln(100))/ln 2
        let nu = nu_of_delta(1e-6, 3.0, 1.0).unwrap();
        assert_relative_eq!(nu, 2.203254472699722, max_relative = 1e-12);
        // round-trip exp(k(T+1)^nu) * delta = 1 over a log ladder
        for m in 2..=12 {
            let delta = 10f64.powi(-m);
            for (k, t) in [(2.0, 1.0), (3.0, 2.5)] {
                let nu = nu_of_delta(delta, k, t).unwrap();
                let lhs = (k * (t + 1.0).powf(nu)).exp() * delta;
                assert!((lhs - 1.0).abs() <= 1e-10, "roundtrip {lhs} at m = {m}");
            }
        }
        // delta too large
        assert!(nu_of_delta(0.5, 2.0, 1.0).is_err());
        assert!(nu_of_delta(1.5, 2.0, 1.0).is_err());
    }

    #[test]
    fn c_exponent_closed_forms() {
        // tau = sqrt(T+1) - 1 -> c = 1/2
        let t = 3.0;
        let tau = (t + 1.0f64).sqrt() - 1.0;
        assert_relative_eq!(c_exponent(tau, t).unwrap(), 0.5, max_relative = 1e-12);
        // (tau = 1, T = 3) -> ln2/ln4 = 0.5
        assert_relative_eq!(c_exponent(1.0, 3.0).unwrap(), 0.5, max_relative = 1e-12);
        // tau -> T gives c -> 1
        assert_relative_eq!(c_exponent(1.0 - 1e-12, 1.0).unwrap(), 1.0, epsilon = 1e-9);
        assert!(c_exponent(0.0, 1.0).is_err());
        assert!(c_exponent(1.0, 1.0).is_err());
    }

    #[test]
    fn rate_bound_values_and_monotonicity() {
        // delta -> 1^- gives bound -> 1
        assert_relative_eq!(rate_bound(1.0 - 1e-12, 2.0, 0.5), 1.0, epsilon = 1e-5);
        // c = 1, k = 2: bound = sqrt(delta) exactly
        for delta in [1e-2, 1e-5, 1e-9] {
            assert_relative_eq!(rate_bound(delta, 2.0, 1.0), delta.sqrt(), max_relative = 1e-12);
        }
        // frozen: (1e-4, k = 2, c = 0.5) -> exp(-sqrt(ln(1e4)/2))
        let expect = (-((1e4f64).ln() / 2.0).sqrt()).exp();
        assert_relative_eq!(rate_bound(1e-4, 2.0, 0.5), expect, max_relative = 1e-12);
        assert!((rate_bound(1e-4, 2.0, 0.5) - 0.1169).abs() < 2e-4);
        // strictly decreasing in delta down and c up
        let mut prev = f64::INFINITY;
        for m in 1..=10 {
            let b = rate_bound(10f64.powi(-m), 2.0, 0.5);
            assert!(b < prev);
            prev = b;
        }
        let mut prev = f64::INFINITY;
        for c in [0.1, 0.3, 0.5, 0.7, 0.9] {
            let b = rate_bound(1e-4, 2.0, c);
            assert!(b < prev);
            prev = b;
        }
    }

    #[test]
    fn lemma31_identity_and_tail_monotonicity() {
        // tau = 1, T = 3 gives c = 1/2 exactly
        let deltas: Vec<f64> = (3..=12).map(|m| 10f64.powi(-m)).collect();
        let rows = lemma31_ratios(&deltas, 1.0, 3.0, 3.0, 1.0).unwrap();
        assert_eq!(rows.len(), 10);
        for r in &rows {
            // Eq-(9)-style identity between the two closed forms
            assert_relative_eq!(
                r.log_weight_direct,
                r.log_weight_identity,
                max_relative = 1e-9
            );
        }
        // final five rungs: holder ratio strictly increasing, log ratio strictly decreasing
        let tail = &rows[rows.len() - 5..];
        for w in tail.windows(2) {
            assert!(w[1].log_ratio_holder > w[0].log_ratio_holder);
            assert!(w[1].log_ratio_log < w[0].log_ratio_log);
        }
        // ladder must decrease
        assert!(lemma31_ratios(&[1e-3, 1e-2], 1.0, 3.0, 3.0, 1.0).is_err());
    }

    fn heat_grid(n: usize) -> Grid {
        Grid::build(GridSpec::new_1d(1.0, n, n, 1.0)).unwrap()
    }

    #[test]
    fn verify_zero_field_is_vacuous() {
        let g = heat_grid(9);
        let rep =
            verify_carleman(&g, &Field::zeros(&g), &CoefficientSet::heat(), &[1.0, 2.0], 1.0)
                .unwrap();
        for r in &rep.rows {
            assert_eq!(r.lhs, 0.0);
            assert_eq!(r.grad_term, 0.0);
            assert_eq!(r.val_term, 0.0);
            assert_eq!(r.fitted_c, 0.0);
        }
        assert!(rep.empirical_nu0.is_none());
    }

    #[test]
    fn verify_rejects_nonzero_lateral_boundary() {
        let g = heat_grid(9);
        let u = Field::from_fn(&g, |x, _| 1.0 + x[0]);
        assert!(verify_carleman(&g, &u, &CoefficientSet::heat(), &[1.0], 1.0).is_err());
    }

    #[test]
    fn verify_separable_test_function_positive_and_monotone() {
        let g = heat_grid(17);
        let pi = std::f64::consts::PI;
        // u = sin(pi x)(T - t): vanishes at t = T, so no final-data term
        let u = Field::from_fn(&g, |x, t| (pi * x[0]).sin() * (1.0 - t));
        let nu_grid = CarlemanParams::default_nu_grid(1.0);
        let rep = verify_carleman(&g, &u, &CoefficientSet::heat(), &nu_grid, 1.0).unwrap();
        assert!(rep.rows.iter().all(|r| r.fitted_c > 0.0));
        assert_eq!(rep.empirical_nu0, Some(1.0));
        assert!(rep.rows[0].data_final < 1e-20);
        // measured on this grid: the constant dips once between nu = 1 and 2,
        // then grows monotonically as the weight concentrates near t = T
        let active: Vec<&CarlemanRow> = rep.rows.iter().filter(|r| r.nu >= 2.0).collect();
        for w in active.windows(2) {
            assert!(
                w[1].fitted_c >= w[0].fitted_c,
                "fitted_C not non-decreasing: {} -> {}",
                w[0].fitted_c,
                w[1].fitted_c
            );
        }
    }

    #[test]
    fn verify_nonzero_final_data_keeps_constant_positive() {
        let g = heat_grid(17);
        let pi = std::f64::consts::PI;
        // u = sin(pi x) t: u(x, T) != 0, the exp(3(T+1)^nu) data weight kicks in
        let u = Field::from_fn(&g, |x, t| (pi * x[0]).sin() * t);
        let nu_grid = CarlemanParams::default_nu_grid(1.0);
        let rep = verify_carleman(&g, &u, &CoefficientSet::heat(), &nu_grid, 1.0).unwrap();
        for r in &rep.rows {
            assert!(r.data_final > 0.0);
            assert!(r.fitted_c > 0.0);
        }
        // at large nu the anchored data term dominates the denominator
        let last = rep.rows.last().unwrap();
        assert!(last.data_final > last.grad_term.max(last.val_term));
    }

    #[test]
    fn report_csv_has_header_and_rows() {
        let g = heat_grid(9);
        let pi = std::f64::consts::PI;
        let u = Field::from_fn(&g, |x, t| (pi * x[0]).sin() * (1.0 - t));
        let rep = verify_carleman(&g, &u, &CoefficientSet::heat(), &[1.0, 2.0], 1.0).unwrap();
        let csv = rep.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("nu,lhs,"));
    }
}

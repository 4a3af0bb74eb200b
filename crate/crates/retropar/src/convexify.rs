//! Carleman-weighted strictly convex functional for the quasilinear problem,
//! its exact discrete gradient, and projected gradient descent on a ball.
//!
//! The continuous functional carries the weight `exp(2(t+1)^nu)` normalized at
//! `tau`. Assembled weights here are anchored at `T` instead (so they never
//! exceed one) and the regularization parameter is rescaled by the exactly
//! compensating factor `alpha_eff = alpha * exp(2((tau+1)^nu - (T+1)^nu))`:
//! this multiplies the whole functional by one positive constant, which moves
//! no minimizer, bends no iterate and flips no convexity-defect sign.
//!
//! The descent direction is the gradient represented in the `H^k` inner
//! product (the Gram solve below); the ball, the projection and the stopping
//! rule all use that same norm.

use nalgebra::DVector;

use crate::carleman::{self, CarlemanParams};
use crate::error::{Error, Result};
use crate::grid::{discrete_norm, gram_matrix, Field, Grid, NormKind};
use crate::model::LiftedProblem;
use crate::qrm::parabolic_operator_csr;
use crate::sparse::{dot, norm2, Csr, DenseChol};

#[derive(Debug, Clone)]
pub struct ConvexConfig {
    /// Regularization parameter of the un-anchored functional.
    pub alpha: f64,
    pub nu: f64,
    pub tau: f64,
    /// Ball radius in the `H^{norm_order}` norm.
    pub radius: f64,
    /// Order of the regularizer / ball norm (2 default; 3, 4 selectable).
    pub norm_order: u32,
    /// Gradient step size.
    pub gamma: f64,
    pub max_iter: usize,
    /// Relative step-size stopping tolerance.
    pub stop_tol: f64,
    /// Empirical convexity constant feeding the alpha rule, once probed.
    pub c2_hat: Option<f64>,
}

impl ConvexConfig {
    pub fn validate(&self, t_final: f64) -> Result<CarlemanParams> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidParam(format!("alpha = {} outside (0, 1)", self.alpha)));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::InvalidParam(format!("gamma = {} outside (0, 1)", self.gamma)));
        }
        if !(2..=4).contains(&self.norm_order) {
            return Err(Error::InvalidParam("norm_order must be 2, 3 or 4".into()));
        }
        if !(self.radius > 0.0) {
            return Err(Error::InvalidParam("radius must be positive".into()));
        }
        if !(self.stop_tol > 0.0) {
            return Err(Error::InvalidParam("stop_tol must be positive".into()));
        }
        // anchor at T; this also enforces the overflow guard on nu
        CarlemanParams::new(self.nu, self.tau, t_final, 2.0, t_final)
    }
}

/// Precomputed operators for one `(problem, grid, config)` triple.
pub struct ConvexAssembly<'g, 'p> {
    pub grid: &'g Grid,
    pub problem: &'p LiftedProblem,
    /// `v -> v_t - Lv` (no lower-order part: that lives in `G`), free columns.
    lin: Csr,
    lin_t: Csr,
    /// First spatial derivatives, free columns, plus transposes.
    dx: Vec<Csr>,
    dx_t: Vec<Csr>,
    /// `w_m * phi_m` per node (trapezoid times anchored Carleman weight).
    wphi: Vec<f64>,
    pub alpha_eff: f64,
    pub gram: nalgebra::DMatrix<f64>,
    chol: DenseChol,
    pub params: CarlemanParams,
    pub norm_order: u32,
}

pub fn assemble_convex<'g, 'p>(
    problem: &'p LiftedProblem,
    grid: &'g Grid,
    cfg: &ConvexConfig,
) -> Result<ConvexAssembly<'g, 'p>> {
    let params = cfg.validate(grid.t_final())?;
    let n = grid.n_nodes();
    let lin_full = parabolic_operator_csr(grid, &problem.coeffs, false);
    let lin = lin_full.restrict_cols(grid.free_of_node(), grid.n_free());
    let lin_t = lin.transpose();
    let mut dx = Vec::new();
    let mut dx_t = Vec::new();
    for i in 0..grid.dim() {
        let d = crate::grid::deriv_csr(grid, crate::grid::Deriv::X(i))
            .restrict_cols(grid.free_of_node(), grid.n_free());
        dx_t.push(d.transpose());
        dx.push(d);
    }
    let mut wphi = vec![0.0; n];
    for l in 0..grid.nt() {
        let w = carleman::anchored_weight(grid.time(l), &params);
        for s in 0..grid.n_space() {
            let m = grid.node(l, s);
            wphi[m] = grid.node_weights()[m] * w;
        }
    }
    let alpha_eff = cfg.alpha
        * (carleman::cwf_log(cfg.tau, cfg.nu) - carleman::cwf_log(grid.t_final(), cfg.nu)).exp();
    let gram = gram_matrix(grid, cfg.norm_order);
    let chol = DenseChol::new(gram.clone())?;
    Ok(ConvexAssembly {
        grid,
        problem,
        lin,
        lin_t,
        dx,
        dx_t,
        wphi,
        alpha_eff,
        gram,
        chol,
        params,
        norm_order: cfg.norm_order,
    })
}

impl ConvexAssembly<'_, '_> {
    /// Residual `r_m = (v_t - Lv - G(grad v, v, x, t))_m` at every node.
    fn residual(&self, v_free: &[f64]) -> Vec<f64> {
        let grid = self.grid;
        let lin = self.lin.matvec(v_free);
        let grads: Vec<Vec<f64>> = self.dx.iter().map(|d| d.matvec(v_free)).collect();
        let v_full = grid.embed_free(v_free);
        let dim = grid.dim();
        let mut r = vec![0.0; grid.n_nodes()];
        let mut gv = [0.0; 2];
        for m in 0..grid.n_nodes() {
            for i in 0..dim {
                gv[i] = grads[i][m];
            }
            r[m] = lin[m] - self.problem.big_g(grid, m, &gv[..dim], v_full.values[m]);
        }
        r
    }

    /// `I(v) = sum w phi r^2 + alpha_eff v^T R v`.
    pub fn eval_i(&self, v_free: &[f64]) -> f64 {
        let r = self.residual(v_free);
        let mut acc = 0.0;
        for m in 0..r.len() {
            acc += self.wphi[m] * r[m] * r[m];
        }
        acc + self.alpha_eff * self.quad_r(v_free)
    }

    pub fn quad_r(&self, v: &[f64]) -> f64 {
        let rv = &self.gram * DVector::from_column_slice(v);
        let mut acc = 0.0;
        for i in 0..v.len() {
            acc += v[i] * rv[i];
        }
        acc
    }

    /// Norm of the ball (`H^{norm_order}`).
    pub fn ball_norm(&self, v: &[f64]) -> f64 {
        self.quad_r(v).max(0.0).sqrt()
    }

    /// Exact gradient of the discrete functional with respect to free DOFs.
    pub fn grad_i(&self, v_free: &[f64]) -> Vec<f64> {
        let grid = self.grid;
        let dim = grid.dim();
        let lin = self.lin.matvec(v_free);
        let grads: Vec<Vec<f64>> = self.dx.iter().map(|d| d.matvec(v_free)).collect();
        let v_full = grid.embed_free(v_free);
        let n = grid.n_nodes();
        let mut wr = vec![0.0; n]; // 2 w phi r
        let mut wr_fg: Vec<Vec<f64>> = vec![vec![0.0; n]; dim];
        let mut wr_fu = vec![0.0; n];
        let mut gv = [0.0; 2];
        let mut shifted = [0.0; 2];
        for m in 0..n {
            let s = grid.space_of(m);
            let t = grid.time(grid.level_of(m));
            let x = grid.x_of_space(s);
            for i in 0..dim {
                gv[i] = grads[i][m];
                shifted[i] = gv[i] + self.problem.grad_g[i].values[s];
            }
            let vg = v_full.values[m] + self.problem.g.values[s];
            let r = lin[m] - self.problem.big_g(grid, m, &gv[..dim], v_full.values[m]);
            let w2 = 2.0 * self.wphi[m] * r;
            wr[m] = w2;
            for i in 0..dim {
                wr_fg[i][m] = w2
                    * self.problem.nonlin.d_grad(
                        &self.problem.coeffs,
                        &shifted[..dim],
                        vg,
                        &x[..dim],
                        t,
                        i,
                    );
            }
            wr_fu[m] = w2
                * self
                    .problem
                    .nonlin
                    .d_u(&self.problem.coeffs, &shifted[..dim], vg, &x[..dim], t);
        }
        let mut grad = self.lin_t.matvec(&wr);
        for i in 0..dim {
            let t = self.dx_t[i].matvec(&wr_fg[i]);
            for k in 0..grad.len() {
                grad[k] -= t[k];
            }
        }
        for (k, &m) in grid.node_of_free().iter().enumerate() {
            grad[k] -= wr_fu[m];
        }
        let rv = &self.gram * DVector::from_column_slice(v_free);
        for k in 0..grad.len() {
            grad[k] += 2.0 * self.alpha_eff * rv[k];
        }
        grad
    }

    /// Riesz representative of a linear functional: solves `R x = y`, turning
    /// the Euclidean gradient into the `H^k`-metric gradient.
    pub fn riesz(&self, y: &[f64]) -> Vec<f64> {
        self.chol.solve(y)
    }

    /// Radial projection onto the closed ball of radius `r` in the ball norm.
    /// Points with norm within a relative `1e-12` of `r` are left untouched,
    /// which makes the projection exactly idempotent.
    pub fn project_ball(&self, v: &[f64], r: f64) -> Vec<f64> {
        let norm = self.ball_norm(v);
        if norm <= r * (1.0 + 1e-12) {
            v.to_vec()
        } else {
            let s = r / norm;
            v.iter().map(|x| s * x).collect()
        }
    }
}

/// Outcome of the projected gradient iteration.
#[derive(Debug, Clone)]
pub struct ConvexSolution {
    pub v_free: Vec<f64>,
    pub v_min: Field,
    pub u_rec: Field,
    pub functional_history: Vec<f64>,
    /// Ball-norm of each accepted step.
    pub step_norms: Vec<f64>,
    /// Geometric ratio fitted on the tail of `||v_n - v_inf||`.
    pub theta_hat: Option<f64>,
    pub grad_norm_final: f64,
    /// Whether any iterate was pulled back onto the ball.
    pub projection_active: bool,
    pub iters: usize,
    pub converged: bool,
    /// Step size after divergence halvings (starts at `cfg.gamma`).
    pub gamma_final: f64,
}

/// Projected gradient descent `v <- P_B(v - gamma * grad)` with halving on
/// functional increase. Aborts after 10 consecutive rejected steps.
pub fn gradient_projection(
    assembly: &ConvexAssembly,
    cfg: &ConvexConfig,
    v0: &[f64],
) -> Result<ConvexSolution> {
    let grid = assembly.grid;
    if v0.len() != grid.n_free() {
        return Err(Error::ShapeMismatch("starting point has wrong length".into()));
    }
    if assembly.ball_norm(v0) > cfg.radius * (1.0 + 1e-9) {
        return Err(Error::InvalidParam("starting point outside the ball".into()));
    }
    let mut gamma = cfg.gamma;
    let mut v = v0.to_vec();
    let mut i_cur = assembly.eval_i(&v);
    let mut history = vec![i_cur];
    let mut step_norms = Vec::new();
    let mut iterates: Vec<Vec<f64>> = vec![v.clone()];
    let mut projection_active = false;
    let mut converged = false;
    let mut rejections = 0usize;
    let mut iters = 0usize;

    'outer: while iters < cfg.max_iter {
        let grad = assembly.grad_i(&v);
        let dir = assembly.riesz(&grad);
        loop {
            let trial: Vec<f64> = v.iter().zip(&dir).map(|(a, d)| a - gamma * d).collect();
            let trial_norm = assembly.ball_norm(&trial);
            let projected = assembly.project_ball(&trial, cfg.radius);
            let step: Vec<f64> = projected.iter().zip(&v).map(|(a, b)| a - b).collect();
            let step_norm = assembly.ball_norm(&step);
            let rel_step = step_norm / assembly.ball_norm(&v).max(1e-30);
            let i_new = assembly.eval_i(&projected);
            if i_new > i_cur {
                // a proposed step already below the stopping resolution means
                // the remaining change is indistinguishable from roundoff
                if rel_step < cfg.stop_tol {
                    converged = true;
                    break 'outer;
                }
                rejections += 1;
                if rejections >= 10 {
                    return Err(Error::Divergence(format!(
                        "functional increased on 10 consecutive trials; last step size {gamma:.3e}"
                    )));
                }
                gamma *= 0.5;
                continue;
            }
            rejections = 0;
            iters += 1;
            if trial_norm > cfg.radius * (1.0 + 1e-12) {
                projection_active = true;
            }
            step_norms.push(step_norm);
            v = projected;
            i_cur = i_new;
            history.push(i_cur);
            iterates.push(v.clone());
            if rel_step < cfg.stop_tol {
                converged = true;
                break 'outer;
            }
            break;
        }
    }

    // geometric ratio on the tail of distances to the last iterate
    let theta_hat = fit_theta(assembly, &iterates);
    let grad_norm_final = norm2(&assembly.grad_i(&v));
    let v_min = grid.embed_free(&v);
    let u_rec = assembly.problem.reconstruct(grid, &v_min);
    Ok(ConvexSolution {
        v_free: v,
        v_min,
        u_rec,
        functional_history: history,
        step_norms,
        theta_hat,
        grad_norm_final,
        projection_active,
        iters,
        converged,
        gamma_final: gamma,
    })
}

fn fit_theta(assembly: &ConvexAssembly, iterates: &[Vec<f64>]) -> Option<f64> {
    if iterates.len() < 6 {
        return None;
    }
    let v_inf = iterates.last().unwrap();
    let dists: Vec<f64> = iterates[..iterates.len() - 1]
        .iter()
        .map(|v| {
            let d: Vec<f64> = v.iter().zip(v_inf).map(|(a, b)| a - b).collect();
            assembly.ball_norm(&d)
        })
        .collect();
    // drop the last couple of distances (they vanish by construction)
    let usable = dists.len().saturating_sub(2);
    let tail_start = usable.saturating_sub(20);
    let mut ratios = Vec::new();
    for i in tail_start + 1..usable {
        if dists[i - 1] > 1e-300 {
            ratios.push(dists[i] / dists[i - 1]);
        }
    }
    if ratios.len() < 3 {
        return None;
    }
    ratios.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Some(ratios[ratios.len() / 2])
}

/// One row of the convexity probe at a fixed `nu`.
#[derive(Debug, Clone)]
pub struct ProbeNuRow {
    pub nu: f64,
    pub alpha: f64,
    pub alpha_eff: f64,
    /// `min over pairs of [D - (alpha_eff/2) ||h||_order^2]` where
    /// `D = I(v2) - I(v1) - <grad I(v1), v2 - v1>`.
    pub min_defect_excess: f64,
    /// `min over pairs of excess / ||h||_{H^{1,0}(Q_T tau)}^2`.
    pub c2_hat: f64,
    pub pairs: usize,
}

#[derive(Debug, Clone)]
pub struct ProbeReport {
    pub rows: Vec<ProbeNuRow>,
    /// Smallest grid `nu` from which `c2_hat` stays positive.
    pub empirical_nu3: Option<f64>,
}

impl ProbeReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("nu,alpha,alpha_eff,c2_hat,min_defect,pairs\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{}\n",
                r.nu, r.alpha, r.alpha_eff, r.c2_hat, r.min_defect_excess, r.pairs
            ));
        }
        s
    }
}

/// Draw a smoothed Gaussian field in the closed ball: i.i.d. normals on free
/// DOFs, one neighbor-averaging sweep per unit of `norm_order`, then a radial
/// rescale to a seeded radius fraction.
pub fn random_ball_point(
    assembly: &ConvexAssembly,
    radius: f64,
    rng: &mut impl rand::Rng,
) -> Vec<f64> {
    let grid = assembly.grid;
    let mut v: Vec<f64> = (0..grid.n_free())
        .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
        .collect();
    for _ in 0..assembly.norm_order {
        v = smooth_sweep(grid, &v);
    }
    let target = radius * rng.gen_range(0.1..0.95);
    let norm = assembly.ball_norm(&v);
    if norm > 0.0 {
        let s = target / norm;
        for x in v.iter_mut() {
            *x *= s;
        }
    }
    v
}

/// One Jacobi-style neighbor averaging sweep on free DOFs (neighbors outside
/// the free set contribute zero, matching the constraints).
fn smooth_sweep(grid: &Grid, v_free: &[f64]) -> Vec<f64> {
    let full = grid.embed_free(v_free);
    let dim = grid.dim();
    let mut out = vec![0.0; grid.n_free()];
    for (k, &m) in grid.node_of_free().iter().enumerate() {
        let l = grid.level_of(m);
        let s = grid.space_of(m);
        let mut acc = full.values[m];
        let mut count = 1.0;
        // time neighbors
        if l > 0 {
            acc += full.values[grid.node(l - 1, s)];
            count += 1.0;
        }
        if l + 1 < grid.nt() {
            acc += full.values[grid.node(l + 1, s)];
            count += 1.0;
        }
        // spatial neighbors
        match dim {
            1 => {
                acc += full.values[grid.node(l, s - 1)] + full.values[grid.node(l, s + 1)];
                count += 2.0;
            }
            2 => {
                let nx1 = grid.spec.nx[1];
                for ns in [s - 1, s + 1, s - nx1, s + nx1] {
                    acc += full.values[grid.node(l, ns)];
                    count += 1.0;
                }
            }
            _ => unreachable!(),
        }
        out[k] = acc / count;
    }
    out
}

/// Convexity defect probe on random pairs in the ball, for each `nu` in the
/// grid. Reports the fitted convexity constant per `nu` and the smallest `nu`
/// from which it stays positive.
pub fn convexity_probe(
    problem: &LiftedProblem,
    grid: &Grid,
    cfg: &ConvexConfig,
    nu_grid: &[f64],
    pairs: usize,
    seed: u64,
) -> Result<ProbeReport> {
    if pairs == 0 {
        return Err(Error::InvalidParam("pairs must be >= 1".into()));
    }
    use rand::SeedableRng;
    let mut rows = Vec::new();
    for &nu in nu_grid {
        let nu_cfg = ConvexConfig { nu, ..cfg.clone() };
        if nu_cfg.validate(grid.t_final()).is_err() {
            continue; // outside the overflow guard
        }
        let assembly = assemble_convex(problem, grid, &nu_cfg)?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut min_excess = f64::INFINITY;
        let mut c2 = f64::INFINITY;
        for _ in 0..pairs {
            let v1 = random_ball_point(&assembly, cfg.radius, &mut rng);
            let v2 = random_ball_point(&assembly, cfg.radius, &mut rng);
            let h: Vec<f64> = v2.iter().zip(&v1).map(|(a, b)| a - b).collect();
            let defect = assembly.eval_i(&v2)
                - assembly.eval_i(&v1)
                - dot(&assembly.grad_i(&v1), &h);
            let excess = defect - 0.5 * assembly.alpha_eff * assembly.quad_r(&h);
            min_excess = min_excess.min(excess);
            let h_field = grid.embed_free(&h);
            let h10 = discrete_norm(grid, &h_field, NormKind::H10QtTau(cfg.tau))?;
            if h10 > 0.0 {
                c2 = c2.min(excess / (h10 * h10));
            }
        }
        rows.push(ProbeNuRow {
            nu,
            alpha: cfg.alpha,
            alpha_eff: assembly.alpha_eff,
            min_defect_excess: min_excess,
            c2_hat: c2,
            pairs,
        });
    }
    if rows.is_empty() {
        return Err(Error::OverflowGuard("no admissible nu in the grid".into()));
    }
    let mut empirical_nu3 = None;
    for i in (0..rows.len()).rev() {
        if rows[i].c2_hat > 0.0 {
            empirical_nu3 = Some(rows[i].nu);
        } else {
            break;
        }
    }
    Ok(ProbeReport { rows, empirical_nu3 })
}

/// `alpha(delta) = 2 C2_hat exp(-2(tau+1)^{nu(delta)})`, clipped into `(0, 1)`
/// with a flag when the formula leaves the admissible interval.
pub fn alpha_rule(delta: f64, c2_hat: f64, tau: f64, t_final: f64) -> Result<(f64, bool)> {
    if !(c2_hat > 0.0) {
        return Err(Error::InvalidParam("c2_hat must be positive".into()));
    }
    let nu = carleman::nu_of_delta(delta, 2.0, t_final)?;
    let log_alpha = (2.0 * c2_hat).ln() - 2.0 * (tau + 1.0).powf(nu);
    let alpha = log_alpha.exp();
    if alpha >= 1.0 {
        Ok((1.0 - 1e-9, true))
    } else if alpha <= 0.0 || !alpha.is_finite() {
        Ok((1e-300, true))
    } else {
        Ok((alpha, false))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::manufacture_data_from;
    use crate::grid::{GridSpec, SpaceField};
    use crate::model::{
        lift, CoefficientSet, LipschitzBox, NonlinPreset, Nonlinearity,
    };
    use crate::qrm::{assemble_qrm_weighted, minimize_qrm, AlphaRule, QrmConfig};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};

    fn grid_small(t_final: f64) -> Grid {
        Grid::build(GridSpec::new_1d(1.0, 9, 9, t_final)).unwrap()
    }

    fn base_cfg(t_final: f64) -> ConvexConfig {
        ConvexConfig {
            alpha: 0.5,
            nu: 1.0,
            tau: 7.0 * t_final / 8.0,
            radius: 5.0,
            norm_order: 2,
            gamma: 0.15,
            max_iter: 5000,
            stop_tol: 1e-7,
            c2_hat: None,
        }
    }

    #[test]
    fn zero_problem_gives_zero_functional() {
        let g = grid_small(0.1);
        let lifted =
            lift(&CoefficientSet::heat(), &Nonlinearity::zero(), &SpaceField::zeros(&g), &g)
                .unwrap();
        let asm = assemble_convex(&lifted, &g, &base_cfg(0.1)).unwrap();
        assert_eq!(asm.eval_i(&vec![0.0; g.n_free()]), 0.0);
    }

    #[test]
    fn config_validation_rejects_bad_parameters() {
        let mut cfg = base_cfg(1.0);
        cfg.alpha = 1.0;
        assert!(cfg.validate(1.0).is_err());
        let mut cfg = base_cfg(1.0);
        cfg.gamma = 1.0;
        assert!(cfg.validate(1.0).is_err());
        let mut cfg = base_cfg(1.0);
        cfg.nu = 12.0; // violates the overflow guard for T = 1
        assert!(cfg.validate(1.0).is_err());
        let mut cfg = base_cfg(1.0);
        cfg.norm_order = 5;
        assert!(cfg.validate(1.0).is_err());
    }

    /// With a linear nonlinearity the functional must agree with the weighted
    /// least-squares objective assembled independently by the linear pipeline.
    #[test]
    fn linear_case_matches_weighted_qrm_objective() {
        let g = grid_small(0.1);
        let pi = std::f64::consts::PI;
        let coeffs = CoefficientSet::new(
            crate::model::DiffusionPreset::Identity,
            crate::model::DriftPreset::Constant { b: vec![0.3] },
            crate::model::ReactionPreset::Constant { c: -0.2 },
            crate::model::SourcePreset::SineCos { amplitude: 0.4 },
            g.t_final(),
        )
        .unwrap();
        let bx = LipschitzBox::default_for(&g.spec.lengths, g.t_final());
        let nl = Nonlinearity::new(NonlinPreset::Linear, &coeffs, &bx);
        let gf = SpaceField::from_fn(&g, |x| 0.2 * (pi * x[0]).sin());
        let lifted = lift(&coeffs, &nl, &gf, &g).unwrap();
        let cfg = base_cfg(0.1);
        let asm = assemble_convex(&lifted, &g, &cfg).unwrap();
        let qrm_asm = assemble_qrm_weighted(&lifted, &g, cfg.alpha, &asm.params, 2).unwrap();
        assert_relative_eq!(asm.alpha_eff, qrm_asm.alpha_eff, max_relative = 1e-14);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let v: Vec<f64> = (0..g.n_free()).map(|_| rng.gen_range(-0.5..0.5)).collect();
            assert_relative_eq!(asm.eval_i(&v), qrm_asm.j_value(&v), max_relative = 1e-10);
            // gradient equals the normal-equations residual map
            let g1 = asm.grad_i(&v);
            let g2 = qrm_asm.gradient(&v);
            let num: f64 = g1.iter().zip(&g2).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            let den: f64 = g2.iter().map(|b| b * b).sum::<f64>().sqrt();
            assert!(num <= 1e-10 * den.max(1e-30), "gradient mismatch {num} vs scale {den}");
        }
    }

    /// Central finite differences of I along random directions match the
    /// assembled gradient.
    #[test]
    fn gradient_passes_finite_difference_check() {
        let g = grid_small(0.1);
        let pi = std::f64::consts::PI;
        let coeffs = CoefficientSet::heat();
        let bx = LipschitzBox::default_for(&g.spec.lengths, g.t_final());
        for preset in [
            NonlinPreset::Zero,
            NonlinPreset::SinU { scale: 0.5 },
            NonlinPreset::RationalU { scale: 1.0 },
            NonlinPreset::GradNorm { scale: 0.5, eps: 0.3 },
        ] {
            let nl = Nonlinearity::new(preset.clone(), &coeffs, &bx);
            let gf = SpaceField::from_fn(&g, |x| 0.3 * (pi * x[0]).sin());
            let lifted = lift(&coeffs, &nl, &gf, &g).unwrap();
            let asm = assemble_convex(&lifted, &g, &base_cfg(0.1)).unwrap();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
            let mut worst: f64 = 0.0;
            for _ in 0..5 {
                let v: Vec<f64> = (0..g.n_free()).map(|_| rng.gen_range(-0.3..0.3)).collect();
                let dir: Vec<f64> = (0..g.n_free()).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let analytic = dot(&asm.grad_i(&v), &dir);
                let mut best = f64::INFINITY;
                for exp in 3..=7 {
                    let h = 10f64.powi(-exp);
                    let vp: Vec<f64> = v.iter().zip(&dir).map(|(a, d)| a + h * d).collect();
                    let vm: Vec<f64> = v.iter().zip(&dir).map(|(a, d)| a - h * d).collect();
                    let fd = (asm.eval_i(&vp) - asm.eval_i(&vm)) / (2.0 * h);
                    let rel = (fd - analytic).abs() / analytic.abs().max(1e-12);
                    best = best.min(rel);
                }
                worst = worst.max(best);
            }
            assert!(worst <= 1e-6, "{preset:?}: fd relative error {worst}");
        }
    }

    #[test]
    fn projection_behaves_radially_and_idempotently() {
        let g = grid_small(0.1);
        let lifted =
            lift(&CoefficientSet::heat(), &Nonlinearity::zero(), &SpaceField::zeros(&g), &g)
                .unwrap();
        let asm = assemble_convex(&lifted, &g, &base_cfg(0.1)).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let v: Vec<f64> = (0..g.n_free()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm = asm.ball_norm(&v);
        // inside: unchanged
        let inside = asm.project_ball(&v, norm * 2.0);
        assert_eq!(inside, v);
        // at twice the radius: scaled to the boundary, direction preserved
        let r = norm / 2.0;
        let proj = asm.project_ball(&v, r);
        assert_relative_eq!(asm.ball_norm(&proj), r, max_relative = 1e-12);
        let cos: f64 = dot(&proj, &v) / (norm2(&proj) * norm2(&v));
        assert_relative_eq!(cos, 1.0, epsilon = 1e-12);
        // idempotence is exact
        let twice = asm.project_ball(&proj, r);
        assert_eq!(twice, proj);
    }

    #[test]
    fn restart_at_converged_point_stops_immediately() {
        let g = grid_small(0.1);
        let pi = std::f64::consts::PI;
        let coeffs = CoefficientSet::heat();
        let (_, data) =
            manufacture_data_from(&coeffs, &Nonlinearity::zero(), |x| 0.2 * (pi * x[0]).sin(), &g, 2)
                .unwrap();
        let lifted = lift(&coeffs, &Nonlinearity::zero(), &data, &g).unwrap();
        let cfg = base_cfg(0.1);
        let asm = assemble_convex(&lifted, &g, &cfg).unwrap();
        let sol = gradient_projection(&asm, &cfg, &vec![0.0; g.n_free()]).unwrap();
        assert!(sol.converged, "first run did not converge");
        let restart = gradient_projection(&asm, &cfg, &sol.v_free).unwrap();
        assert!(restart.iters <= 2, "restart took {} iterations", restart.iters);
    }

    /// Linear case end-to-end oracle: the projected-gradient limit agrees with
    /// the direct minimizer of the same weighted quadratic, from two starts.
    #[test]
    fn linear_gradient_projection_matches_qrm_minimizer() {
        let g = grid_small(0.1);
        let pi = std::f64::consts::PI;
        let coeffs = CoefficientSet::heat();
        let (_, data) = manufacture_data_from(
            &coeffs,
            &Nonlinearity::zero(),
            |x| 0.2 * (pi * x[0]).sin(),
            &g,
            2,
        )
        .unwrap();
        let lifted = lift(&coeffs, &Nonlinearity::zero(), &data, &g).unwrap();
        let cfg = base_cfg(0.1);
        let asm = assemble_convex(&lifted, &g, &cfg).unwrap();
        let qrm_asm = assemble_qrm_weighted(&lifted, &g, cfg.alpha, &asm.params, 2).unwrap();
        let qcfg = QrmConfig::new(cfg.alpha, 1e-12, 100_000, AlphaRule::Manual).unwrap();
        let direct = minimize_qrm(&qrm_asm, &lifted, &qcfg, None).unwrap();

        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let random_start = {
            let raw = random_ball_point(&asm, cfg.radius * 0.5, &mut rng);
            raw
        };
        for start in [vec![0.0; g.n_free()], random_start] {
            let sol = gradient_projection(&asm, &cfg, &start).unwrap();
            assert!(sol.converged);
            let d = sol.v_min.add_scaled(&direct.v_min, -1.0);
            let dn = discrete_norm(&g, &d, NormKind::H2Qt).unwrap();
            assert!(
                dn <= 10.0 * cfg.stop_tol,
                "limit differs from direct minimizer by {dn} (allowed {})",
                10.0 * cfg.stop_tol
            );
        }
    }

    #[test]
    fn quasilinear_run_contracts_with_monotone_functional() {
        let g = grid_small(0.1);
        let pi = std::f64::consts::PI;
        let coeffs = CoefficientSet::heat();
        let bx = LipschitzBox::default_for(&g.spec.lengths, g.t_final());
        let nl = Nonlinearity::new(NonlinPreset::SinU { scale: 0.5 }, &coeffs, &bx);
        let (_, data) =
            manufacture_data_from(&coeffs, &nl, |x| 0.3 * (pi * x[0]).sin(), &g, 2).unwrap();
        let lifted = lift(&coeffs, &nl, &data, &g).unwrap();
        let mut cfg = base_cfg(0.1);
        cfg.nu = 2.0;
        let asm = assemble_convex(&lifted, &g, &cfg).unwrap();
        let sol = gradient_projection(&asm, &cfg, &vec![0.0; g.n_free()]).unwrap();
        assert!(sol.converged);
        for w in sol.functional_history.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-14) + 1e-300, "functional increased");
        }
        if let Some(theta) = sol.theta_hat {
            assert!(theta < 1.0, "theta_hat = {theta}");
        }
    }

    #[test]
    fn probe_defect_zero_on_identical_pairs_and_nonneg_linear() {
        let g = grid_small(0.1);
        let pi = std::f64::consts::PI;
        let coeffs = CoefficientSet::heat();
        let (_, data) = manufacture_data_from(
            &coeffs,
            &Nonlinearity::zero(),
            |x| 0.2 * (pi * x[0]).sin(),
            &g,
            2,
        )
        .unwrap();
        let lifted = lift(&coeffs, &Nonlinearity::zero(), &data, &g).unwrap();
        let cfg = base_cfg(0.1);
        let asm = assemble_convex(&lifted, &g, &cfg).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let v = random_ball_point(&asm, cfg.radius, &mut rng);
        let zero_h = vec![0.0; g.n_free()];
        let defect = asm.eval_i(&v) - asm.eval_i(&v) - dot(&asm.grad_i(&v), &zero_h);
        assert_eq!(defect, 0.0);
        // linear case: the quadratic expansion is exact, defect >= alpha_eff ||h||^2
        for _ in 0..20 {
            let v1 = random_ball_point(&asm, cfg.radius, &mut rng);
            let v2 = random_ball_point(&asm, cfg.radius, &mut rng);
            let h: Vec<f64> = v2.iter().zip(&v1).map(|(a, b)| a - b).collect();
            let defect = asm.eval_i(&v2) - asm.eval_i(&v1) - dot(&asm.grad_i(&v1), &h);
            let floor = asm.alpha_eff * asm.quad_r(&h);
            assert!(
                defect >= floor - 1e-9 * defect.abs().max(1.0),
                "defect {defect} below quadratic floor {floor}"
            );
        }
    }

    #[test]
    fn probe_sweep_finds_positive_c2_for_sin_preset() {
        let g = grid_small(0.1);
        let pi = std::f64::consts::PI;
        let coeffs = CoefficientSet::heat();
        let bx = LipschitzBox::default_for(&g.spec.lengths, g.t_final());
        let nl = Nonlinearity::new(NonlinPreset::SinU { scale: 0.5 }, &coeffs, &bx);
        let (_, data) =
            manufacture_data_from(&coeffs, &nl, |x| 0.3 * (pi * x[0]).sin(), &g, 2).unwrap();
        let lifted = lift(&coeffs, &nl, &data, &g).unwrap();
        let cfg = base_cfg(0.1);
        let report =
            convexity_probe(&lifted, &g, &cfg, &[2.0, 3.0, 4.0], 20, 31).unwrap();
        assert_eq!(report.rows.len(), 3);
        let nu3 = report.empirical_nu3.expect("no positive-c2 nu found");
        for r in report.rows.iter().filter(|r| r.nu >= nu3) {
            assert!(r.c2_hat > 0.0);
            assert!(r.min_defect_excess >= 0.0);
        }
        let csv = report.to_csv();
        assert!(csv.starts_with("nu,alpha,alpha_eff,"));
    }

    #[test]
    fn alpha_rule_consistency_and_monotonicity() {
        let (tau, t_final) = (0.5, 1.0);
        let c2 = 0.37;
        // defining identity: alpha * exp(2(tau+1)^{nu(delta)}) = 2 c2
        for delta in [1e-3, 1e-5, 1e-8] {
            let (alpha, clipped) = alpha_rule(delta, c2, tau, t_final).unwrap();
            assert!(!clipped);
            let nu = carleman::nu_of_delta(delta, 2.0, t_final).unwrap();
            let recovered = alpha * (2.0 * (tau + 1.0f64).powf(nu)).exp();
            assert_relative_eq!(recovered, 2.0 * c2, max_relative = 1e-10);
        }
        // strictly decreasing along a decreasing delta ladder
        let mut prev = f64::INFINITY;
        for m in 2..=10 {
            let (alpha, _) = alpha_rule(10f64.powi(-m), c2, tau, t_final).unwrap();
            assert!(alpha < prev);
            prev = alpha;
        }
        // huge c2 forces the clip flag
        let (alpha, clipped) = alpha_rule(1e-2, 1e12, tau, t_final).unwrap();
        assert!(clipped && alpha < 1.0);
    }

    #[test]
    fn iterates_stay_inside_the_ball() {
        let g = grid_small(0.1);
        let pi = std::f64::consts::PI;
        let coeffs = CoefficientSet::heat();
        let (_, data) = manufacture_data_from(
            &coeffs,
            &Nonlinearity::zero(),
            |x| 0.2 * (pi * x[0]).sin(),
            &g,
            2,
        )
        .unwrap();
        let lifted = lift(&coeffs, &Nonlinearity::zero(), &data, &g).unwrap();
        // tiny radius forces the projection to engage
        let mut cfg = base_cfg(0.1);
        cfg.radius = 1e-3;
        cfg.max_iter = 200;
        let asm = assemble_convex(&lifted, &g, &cfg).unwrap();
        let sol = gradient_projection(&asm, &cfg, &vec![0.0; g.n_free()]).unwrap();
        assert!(sol.projection_active);
        assert!(asm.ball_norm(&sol.v_free) <= cfg.radius * (1.0 + 1e-9));
    }
}

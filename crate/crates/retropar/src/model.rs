//! PDE coefficients, nonlinearities and the final-data lifting.
//!
//! Coefficients are closed-form presets sampled at grid nodes during assembly;
//! there is no expression parser, which keeps every experiment reproducible
//! from a config file. The principal part is `Lu = sum a_ij u_{x_i x_j}` with
//! ellipticity bounds `mu1, mu2`; the linear lower-order part is
//! `Au = sum b_j u_{x_j} + c u`. Nonlinearities `F(grad u, u, x, t)` are
//! globally Lipschitz presets with a declared constant.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{diff, space_deriv_csr, Deriv, Field, Grid, SpaceField};

/// Principal-part presets `a_ij(x, t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiffusionPreset {
    /// `a = I`.
    Identity,
    /// `a = kappa I`, `kappa > 0`.
    Scaled { kappa: f64 },
    /// `a = (1 + rate t) I`.
    AffineT { rate: f64 },
    /// Diagonal trigonometric coefficients in `[1, 3]`:
    /// `a_11 = 2 + sin(x_1 t)` and, in 2-D, `a_22 = 2 + cos(x_2 t)`.
    Trig,
    /// `a = -I`; violates ellipticity, used to exercise the checker.
    NegativeDefinite,
}

/// First-order coefficient presets `b_j(x, t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftPreset {
    Zero,
    Constant { b: Vec<f64> },
    /// `b_j = t` for every component.
    TimeLinear,
}

/// Zero-order coefficient presets `c(x, t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReactionPreset {
    Zero,
    Constant { c: f64 },
    /// `c = x_1`.
    SpaceLinear,
}

/// Source presets `p(x, t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourcePreset {
    Zero,
    Constant { p: f64 },
    /// `p = amplitude * sin(pi x_1 / L_1) * cos(t)`.
    SineCos { amplitude: f64 },
}

/// Full coefficient set of the linear operator parts, with declared
/// ellipticity bounds `0 < mu1 <= mu2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientSet {
    pub diffusion: DiffusionPreset,
    pub drift: DriftPreset,
    pub reaction: ReactionPreset,
    pub source: SourcePreset,
    pub mu1: f64,
    pub mu2: f64,
}

impl CoefficientSet {
    /// Bounds are computed analytically from the presets on `t in [0, T]`.
    pub fn new(
        diffusion: DiffusionPreset,
        drift: DriftPreset,
        reaction: ReactionPreset,
        source: SourcePreset,
        t_final: f64,
    ) -> Result<CoefficientSet> {
        let (mu1, mu2) = match &diffusion {
            DiffusionPreset::Identity => (1.0, 1.0),
            DiffusionPreset::Scaled { kappa } => {
                if !(*kappa > 0.0) {
                    return Err(Error::InvalidParam("kappa must be positive".into()));
                }
                (*kappa, *kappa)
            }
            DiffusionPreset::AffineT { rate } => {
                let at_end = 1.0 + rate * t_final;
                if !(at_end > 0.0) {
                    return Err(Error::InvalidParam(
                        "affine-in-t diffusion loses ellipticity before T".into(),
                    ));
                }
                (at_end.min(1.0), at_end.max(1.0))
            }
            DiffusionPreset::Trig => (1.0, 3.0),
            // declared bounds kept positive so the checker reports the failure
            DiffusionPreset::NegativeDefinite => (1.0, 1.0),
        };
        Ok(CoefficientSet { diffusion, drift, reaction, source, mu1, mu2 })
    }

    /// Pure heat operator: `a = I`, no lower-order terms, no source.
    pub fn heat() -> CoefficientSet {
        CoefficientSet {
            diffusion: DiffusionPreset::Identity,
            drift: DriftPreset::Zero,
            reaction: ReactionPreset::Zero,
            source: SourcePreset::Zero,
            mu1: 1.0,
            mu2: 1.0,
        }
    }

    pub fn a(&self, x: &[f64], t: f64, i: usize, j: usize) -> f64 {
        if i != j {
            return 0.0; // all presets are diagonal
        }
        match &self.diffusion {
            DiffusionPreset::Identity => 1.0,
            DiffusionPreset::Scaled { kappa } => *kappa,
            DiffusionPreset::AffineT { rate } => 1.0 + rate * t,
            DiffusionPreset::Trig => {
                if i == 0 {
                    2.0 + (x[0] * t).sin()
                } else {
                    2.0 + (x[1] * t).cos()
                }
            }
            DiffusionPreset::NegativeDefinite => -1.0,
        }
    }

    pub fn b(&self, _x: &[f64], t: f64, j: usize) -> f64 {
        match &self.drift {
            DriftPreset::Zero => 0.0,
            DriftPreset::Constant { b } => b.get(j).copied().unwrap_or(0.0),
            DriftPreset::TimeLinear => t,
        }
    }

    pub fn c(&self, x: &[f64], _t: f64) -> f64 {
        match &self.reaction {
            ReactionPreset::Zero => 0.0,
            ReactionPreset::Constant { c } => *c,
            ReactionPreset::SpaceLinear => x[0],
        }
    }

    pub fn p(&self, x: &[f64], t: f64, lengths: &[f64]) -> f64 {
        match &self.source {
            SourcePreset::Zero => 0.0,
            SourcePreset::Constant { p } => *p,
            SourcePreset::SineCos { amplitude } => {
                amplitude * (std::f64::consts::PI * x[0] / lengths[0]).sin() * t.cos()
            }
        }
    }

    /// True when the principal part varies with time (controls LU reuse in
    /// the forward solver).
    pub fn time_dependent_diffusion(&self) -> bool {
        matches!(self.diffusion, DiffusionPreset::AffineT { .. } | DiffusionPreset::Trig)
    }
}

/// `Lu = sum_ij a_ij(x,t) u_{x_i x_j}` evaluated pointwise at every node.
pub fn apply_l(coeffs: &CoefficientSet, grid: &Grid, u: &Field) -> Result<Field> {
    let dim = grid.dim();
    let mut out = vec![0.0; grid.n_nodes()];
    for i in 0..dim {
        for j in i..dim {
            let d = diff(grid, u, Deriv::Xx(i, j))?;
            let factor = if i == j { 1.0 } else { 2.0 }; // a_ij = a_ji
            for l in 0..grid.nt() {
                let t = grid.time(l);
                for s in 0..grid.n_space() {
                    let m = grid.node(l, s);
                    let x = grid.x_of_space(s);
                    out[m] += factor * coeffs.a(&x[..dim], t, i, j) * d.values[m];
                }
            }
        }
    }
    Ok(Field { values: out })
}

/// `Au = sum_j b_j(x,t) u_{x_j} + c(x,t) u` evaluated pointwise.
pub fn apply_a(coeffs: &CoefficientSet, grid: &Grid, u: &Field) -> Result<Field> {
    let dim = grid.dim();
    let grads: Vec<Field> = (0..dim)
        .map(|i| diff(grid, u, Deriv::X(i)))
        .collect::<Result<_>>()?;
    let mut out = vec![0.0; grid.n_nodes()];
    for l in 0..grid.nt() {
        let t = grid.time(l);
        for s in 0..grid.n_space() {
            let m = grid.node(l, s);
            let x = grid.x_of_space(s);
            let mut acc = coeffs.c(&x[..dim], t) * u.values[m];
            for (j, gf) in grads.iter().enumerate() {
                acc += coeffs.b(&x[..dim], t, j) * gf.values[m];
            }
            out[m] = acc;
        }
    }
    Ok(Field { values: out })
}

/// Result of sampling the ellipticity condition over the grid.
#[derive(Debug, Clone)]
pub struct EllipticityReport {
    pub min_eig: f64,
    pub max_eig: f64,
    pub pass: bool,
    /// First node violating the declared bounds, with the offending eigenvalue.
    pub violation: Option<(usize, f64)>,
}

/// Eigenvalue range of `a(x, t)` over sampled nodes, checked against the
/// declared `mu1, mu2`.
pub fn check_ellipticity(
    coeffs: &CoefficientSet,
    grid: &Grid,
    samples: usize,
) -> Result<EllipticityReport> {
    if samples == 0 {
        return Err(Error::InvalidParam("samples must be >= 1".into()));
    }
    let n = grid.n_nodes();
    let step = (n / samples).max(1);
    let dim = grid.dim();
    let mut min_eig = f64::INFINITY;
    let mut max_eig = f64::NEG_INFINITY;
    let mut violation = None;
    let tol = 1e-12 * coeffs.mu2.abs().max(1.0);
    for m in (0..n).step_by(step) {
        let t = grid.time(grid.level_of(m));
        let x = grid.x_of_space(grid.space_of(m));
        let (lo, hi) = match dim {
            1 => {
                let a = coeffs.a(&x[..1], t, 0, 0);
                (a, a)
            }
            2 => {
                // symmetric 2x2 eigenvalues in closed form
                let a11 = coeffs.a(&x[..2], t, 0, 0);
                let a22 = coeffs.a(&x[..2], t, 1, 1);
                let a12 = coeffs.a(&x[..2], t, 0, 1);
                let mean = 0.5 * (a11 + a22);
                let r = (0.25 * (a11 - a22) * (a11 - a22) + a12 * a12).sqrt();
                (mean - r, mean + r)
            }
            _ => unreachable!(),
        };
        min_eig = min_eig.min(lo);
        max_eig = max_eig.max(hi);
        if violation.is_none() && (lo < coeffs.mu1 - tol || hi > coeffs.mu2 + tol) {
            violation = Some((m, if lo < coeffs.mu1 - tol { lo } else { hi }));
        }
    }
    Ok(EllipticityReport { min_eig, max_eig, pass: violation.is_none(), violation })
}

/// Nonlinearity presets, all globally Lipschitz with a known constant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NonlinPreset {
    Zero,
    /// `F = sum b_j u_{x_j} + c u + p`: the linear lower-order part, which
    /// reduces the quasilinear machinery to the linear case.
    Linear,
    /// `F = scale * sin(u)`.
    SinU { scale: f64 },
    /// `F = scale * u / (1 + u^2)`.
    RationalU { scale: f64 },
    /// `F = scale * sqrt(|grad u|^2 + eps^2)`, a smoothed gradient magnitude.
    GradNorm { scale: f64, eps: f64 },
}

/// Sampling box for `F(grad u, u, x, t)` arguments, used to declare and to
/// estimate Lipschitz constants.
#[derive(Debug, Clone)]
pub struct LipschitzBox {
    /// `|grad u|_i <= grad_abs`.
    pub grad_abs: f64,
    /// `|u| <= u_abs`.
    pub u_abs: f64,
    pub lengths: Vec<f64>,
    pub t_final: f64,
}

impl LipschitzBox {
    pub fn default_for(lengths: &[f64], t_final: f64) -> LipschitzBox {
        LipschitzBox { grad_abs: 2.0, u_abs: 2.0, lengths: lengths.to_vec(), t_final }
    }
}

/// A nonlinearity preset together with its declared Lipschitz constant over a
/// sampling box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Nonlinearity {
    pub preset: NonlinPreset,
    pub lipschitz_c: f64,
}

impl Nonlinearity {
    pub fn new(preset: NonlinPreset, coeffs: &CoefficientSet, bx: &LipschitzBox) -> Nonlinearity {
        let lipschitz_c = declared_lipschitz(&preset, coeffs, bx);
        Nonlinearity { preset, lipschitz_c }
    }

    pub fn zero() -> Nonlinearity {
        Nonlinearity { preset: NonlinPreset::Zero, lipschitz_c: 1e-12 }
    }

    /// True for presets handled by the linear (quasi-reversibility) pipeline.
    pub fn is_linear(&self) -> bool {
        matches!(self.preset, NonlinPreset::Zero | NonlinPreset::Linear)
    }

    pub fn eval(
        &self,
        coeffs: &CoefficientSet,
        lengths: &[f64],
        grad: &[f64],
        u: f64,
        x: &[f64],
        t: f64,
    ) -> f64 {
        match &self.preset {
            NonlinPreset::Zero => 0.0,
            NonlinPreset::Linear => {
                let mut acc = coeffs.c(x, t) * u + coeffs.p(x, t, lengths);
                for (j, g) in grad.iter().enumerate() {
                    acc += coeffs.b(x, t, j) * g;
                }
                acc
            }
            NonlinPreset::SinU { scale } => scale * u.sin(),
            NonlinPreset::RationalU { scale } => scale * u / (1.0 + u * u),
            NonlinPreset::GradNorm { scale, eps } => {
                let g2: f64 = grad.iter().map(|g| g * g).sum();
                scale * (g2 + eps * eps).sqrt()
            }
        }
    }

    /// Partial derivative with respect to the gradient component `axis`.
    pub fn d_grad(
        &self,
        coeffs: &CoefficientSet,
        grad: &[f64],
        _u: f64,
        x: &[f64],
        t: f64,
        axis: usize,
    ) -> f64 {
        match &self.preset {
            NonlinPreset::Zero | NonlinPreset::SinU { .. } | NonlinPreset::RationalU { .. } => 0.0,
            NonlinPreset::Linear => coeffs.b(x, t, axis),
            NonlinPreset::GradNorm { scale, eps } => {
                let g2: f64 = grad.iter().map(|g| g * g).sum();
                scale * grad[axis] / (g2 + eps * eps).sqrt()
            }
        }
    }

    /// Partial derivative with respect to the value `u`.
    pub fn d_u(&self, coeffs: &CoefficientSet, _grad: &[f64], u: f64, x: &[f64], t: f64) -> f64 {
        match &self.preset {
            NonlinPreset::Zero | NonlinPreset::GradNorm { .. } => 0.0,
            NonlinPreset::Linear => coeffs.c(x, t),
            NonlinPreset::SinU { scale } => scale * u.cos(),
            NonlinPreset::RationalU { scale } => {
                let d = 1.0 + u * u;
                scale * (1.0 - u * u) / (d * d)
            }
        }
    }

    /// Lipschitz constant in `(grad u, u)` alone, uniformly over `(x, t)`.
    /// This is the contraction modulus the forward solver's step bound uses.
    pub fn state_lipschitz(&self, coeffs: &CoefficientSet, bx: &LipschitzBox) -> f64 {
        match &self.preset {
            NonlinPreset::Zero => 0.0,
            NonlinPreset::SinU { scale } | NonlinPreset::RationalU { scale } => scale.abs(),
            NonlinPreset::GradNorm { scale, .. } => scale.abs(),
            NonlinPreset::Linear => {
                let n = bx.lengths.len();
                let sup_b2: f64 = match &coeffs.drift {
                    DriftPreset::Zero => 0.0,
                    DriftPreset::Constant { b } => b.iter().map(|v| v * v).sum(),
                    DriftPreset::TimeLinear => n as f64 * bx.t_final * bx.t_final,
                };
                let sup_c = match &coeffs.reaction {
                    ReactionPreset::Zero => 0.0,
                    ReactionPreset::Constant { c } => c.abs(),
                    ReactionPreset::SpaceLinear => bx.lengths[0],
                };
                (sup_b2 + sup_c * sup_c).sqrt()
            }
        }
    }
}

/// Analytic supremum of the full-argument Lipschitz quotient over the box.
fn declared_lipschitz(preset: &NonlinPreset, coeffs: &CoefficientSet, bx: &LipschitzBox) -> f64 {
    match preset {
        NonlinPreset::Zero => 1e-12,
        NonlinPreset::SinU { scale } => scale.abs(),
        NonlinPreset::RationalU { scale } => scale.abs(),
        NonlinPreset::GradNorm { scale, .. } => scale.abs(),
        NonlinPreset::Linear => {
            let n = bx.lengths.len();
            // |grad_y F|^2 = |b|^2 + c^2 + |dF/dx|^2 + |dF/dt|^2, each bounded
            // over the box using the closed-form presets.
            let sup_b2: f64 = match &coeffs.drift {
                DriftPreset::Zero => 0.0,
                DriftPreset::Constant { b } => b.iter().map(|v| v * v).sum(),
                DriftPreset::TimeLinear => n as f64 * bx.t_final * bx.t_final,
            };
            let (sup_c, sup_cx) = match &coeffs.reaction {
                ReactionPreset::Zero => (0.0, 0.0),
                ReactionPreset::Constant { c } => (c.abs(), 0.0),
                ReactionPreset::SpaceLinear => (bx.lengths[0], 1.0),
            };
            let sup_bt = match &coeffs.drift {
                DriftPreset::TimeLinear => (n as f64).sqrt(),
                _ => 0.0,
            };
            let (sup_px, sup_pt) = match &coeffs.source {
                SourcePreset::Zero | SourcePreset::Constant { .. } => (0.0, 0.0),
                SourcePreset::SineCos { amplitude } => {
                    (amplitude.abs() * std::f64::consts::PI / bx.lengths[0], amplitude.abs())
                }
            };
            let dx = sup_cx * bx.u_abs + sup_px;
            let dt = sup_bt * (n as f64).sqrt() * bx.grad_abs + sup_pt;
            (sup_b2 + sup_c * sup_c + dx * dx + dt * dt).sqrt()
        }
    }
}

/// Max sampled difference quotient of `F` over random argument pairs in the
/// box, plus steepest-direction quotients at random base points. Deterministic
/// for a fixed seed.
pub fn estimate_lipschitz(
    nonlin: &Nonlinearity,
    coeffs: &CoefficientSet,
    bx: &LipschitzBox,
    trials: usize,
    seed: u64,
) -> Result<f64> {
    if trials < 100 {
        return Err(Error::InvalidParam("trials must be >= 100".into()));
    }
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let dim = bx.lengths.len();
    let ny = dim + 1 + dim + 1; // (grad, u, x, t)
    let lo_hi = |k: usize| -> (f64, f64) {
        if k < dim {
            (-bx.grad_abs, bx.grad_abs)
        } else if k == dim {
            (-bx.u_abs, bx.u_abs)
        } else if k < 2 * dim + 1 {
            (0.0, bx.lengths[k - dim - 1])
        } else {
            (0.0, bx.t_final)
        }
    };
    let eval = |y: &[f64]| -> f64 {
        nonlin.eval(coeffs, &bx.lengths, &y[..dim], y[dim], &y[dim + 1..2 * dim + 1], y[ny - 1])
    };
    let mut best: f64 = 0.0;
    let fd_step = 1e-5;
    for _ in 0..trials {
        let y1: Vec<f64> = (0..ny)
            .map(|k| {
                let (lo, hi) = lo_hi(k);
                rng.gen_range(lo..=hi)
            })
            .collect();
        // random-pair quotient
        let y2: Vec<f64> = (0..ny)
            .map(|k| {
                let (lo, hi) = lo_hi(k);
                rng.gen_range(lo..=hi)
            })
            .collect();
        let dist: f64 = y1.iter().zip(&y2).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        if dist > 0.0 {
            best = best.max((eval(&y1) - eval(&y2)).abs() / dist);
        }
        // quotient along the finite-difference steepest direction at y1
        let mut gradf = vec![0.0; ny];
        let mut yp = y1.clone();
        for k in 0..ny {
            let (lo, hi) = lo_hi(k);
            let h = fd_step * (hi - lo).max(1e-8);
            yp[k] = y1[k] + h;
            let fp = eval(&yp);
            yp[k] = y1[k] - h;
            let fm = eval(&yp);
            yp[k] = y1[k];
            gradf[k] = (fp - fm) / (2.0 * h);
        }
        let gn: f64 = gradf.iter().map(|v| v * v).sum::<f64>().sqrt();
        if gn > 0.0 {
            let h = fd_step;
            let y2: Vec<f64> = y1.iter().zip(&gradf).map(|(a, g)| a + h * g / gn).collect();
            let dist: f64 =
                y1.iter().zip(&y2).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            if dist > 0.0 {
                best = best.max((eval(&y2) - eval(&y1)).abs() / dist);
            }
        }
    }
    Ok(best)
}

/// The problem after the substitution `v = u - g`: homogeneous final data,
/// lifted source `q` (linear case) and lifted nonlinearity `G` (quasilinear).
#[derive(Debug, Clone)]
pub struct LiftedProblem {
    pub coeffs: CoefficientSet,
    pub nonlin: Nonlinearity,
    pub g: SpaceField,
    /// `q = Lg + Ag + p` sampled at every node (the linear-case source).
    pub q: Field,
    /// `Lg` at every node (time-varying through `a_ij`).
    pub lg: Field,
    /// Spatial gradient of `g`, one field per axis.
    pub grad_g: Vec<SpaceField>,
}

/// Lift the final-data problem: requires `g = 0` on the spatial boundary
/// within `1e-12 * ||g||_{L2}`.
pub fn lift(
    coeffs: &CoefficientSet,
    nonlin: &Nonlinearity,
    g: &SpaceField,
    grid: &Grid,
) -> Result<LiftedProblem> {
    let gnorm = g.l2(grid);
    let bmax = g.boundary_max(grid);
    if bmax > 1e-12 * gnorm {
        return Err(Error::BoundaryCompat(format!(
            "g on the boundary reaches {bmax:.3e}, allowed {:.3e}",
            1e-12 * gnorm
        )));
    }
    let dim = grid.dim();
    // spatial derivatives of g
    let grad_g: Vec<SpaceField> = (0..dim)
        .map(|i| SpaceField { values: space_deriv_csr(grid, i, 1).matvec(&g.values) })
        .collect();
    let mut gxx = Vec::new(); // second derivatives per (i, j) pair, i <= j
    for i in 0..dim {
        for j in i..dim {
            let v = if i == j {
                space_deriv_csr(grid, i, 2).matvec(&g.values)
            } else {
                space_deriv_csr(grid, i, 1).matmul(&space_deriv_csr(grid, j, 1)).matvec(&g.values)
            };
            gxx.push(((i, j), v));
        }
    }
    let mut lg = vec![0.0; grid.n_nodes()];
    let mut q = vec![0.0; grid.n_nodes()];
    let lengths = &grid.spec.lengths;
    for l in 0..grid.nt() {
        let t = grid.time(l);
        for s in 0..grid.n_space() {
            let m = grid.node(l, s);
            let x = grid.x_of_space(s);
            let xr = &x[..dim];
            let mut acc = 0.0;
            for ((i, j), v) in &gxx {
                let factor = if i == j { 1.0 } else { 2.0 };
                acc += factor * coeffs.a(xr, t, *i, *j) * v[s];
            }
            lg[m] = acc;
            let mut ag = coeffs.c(xr, t) * g.values[s];
            for (j, gf) in grad_g.iter().enumerate() {
                ag += coeffs.b(xr, t, j) * gf.values[s];
            }
            q[m] = acc + ag + coeffs.p(xr, t, lengths);
        }
    }
    Ok(LiftedProblem {
        coeffs: coeffs.clone(),
        nonlin: nonlin.clone(),
        g: g.clone(),
        q: Field { values: q },
        lg: Field { values: lg },
        grad_g,
    })
}

impl LiftedProblem {
    /// `G(grad v, v, x, t) = Lg + F(grad v + grad g, v + g, x, t)` at node `m`.
    pub fn big_g(&self, grid: &Grid, m: usize, grad_v: &[f64], v: f64) -> f64 {
        let s = grid.space_of(m);
        let t = grid.time(grid.level_of(m));
        let x = grid.x_of_space(s);
        let dim = grid.dim();
        let mut shifted = [0.0; 2];
        for i in 0..dim {
            shifted[i] = grad_v[i] + self.grad_g[i].values[s];
        }
        self.lg.values[m]
            + self.nonlin.eval(
                &self.coeffs,
                &grid.spec.lengths,
                &shifted[..dim],
                v + self.g.values[s],
                &x[..dim],
                t,
            )
    }

    /// Reconstruction map `u = v + g`.
    pub fn reconstruct(&self, grid: &Grid, v: &Field) -> Field {
        let mut values = v.values.clone();
        for l in 0..grid.nt() {
            for s in 0..grid.n_space() {
                values[grid.node(l, s)] += self.g.values[s];
            }
        }
        Field { values }
    }

    /// Lifting map `v = u - g`.
    pub fn v_of(&self, grid: &Grid, u: &Field) -> Field {
        let mut values = u.values.clone();
        for l in 0..grid.nt() {
            for s in 0..grid.n_space() {
                values[grid.node(l, s)] -= self.g.values[s];
            }
        }
        Field { values }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{discrete_norm, GridSpec, NormKind};
    use approx::assert_relative_eq;

    fn grid_1d(nx: usize, nt: usize) -> Grid {
        Grid::build(GridSpec::new_1d(1.0, nx, nt, 1.0)).unwrap()
    }

    #[test]
    fn apply_l_exact_on_quadratics() {
        let g = grid_1d(9, 5);
        let u = Field::from_fn(&g, |x, _| x[0] * x[0]);
        let lu = apply_l(&CoefficientSet::heat(), &g, &u).unwrap();
        for v in &lu.values {
            assert_relative_eq!(*v, 2.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn apply_l_affine_t_coefficient() {
        // a11 = 1 + t, u = x^2/2 -> Lu = 1 + t exactly at nodes
        let g = grid_1d(9, 5);
        let coeffs = CoefficientSet::new(
            DiffusionPreset::AffineT { rate: 1.0 },
            DriftPreset::Zero,
            ReactionPreset::Zero,
            SourcePreset::Zero,
            1.0,
        )
        .unwrap();
        let u = Field::from_fn(&g, |x, _| 0.5 * x[0] * x[0]);
        let lu = apply_l(&coeffs, &g, &u).unwrap();
        for l in 0..g.nt() {
            let t = g.time(l);
            for s in 0..g.n_space() {
                assert_relative_eq!(lu.values[g.node(l, s)], 1.0 + t, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn apply_l_refinement_order_on_sine() {
        let pi = std::f64::consts::PI;
        let mut errs = Vec::new();
        for nx in [17usize, 33, 65] {
            let g = grid_1d(nx, 4);
            let u = Field::from_fn(&g, |x, _| (pi * x[0]).sin());
            let lu = apply_l(&CoefficientSet::heat(), &g, &u).unwrap();
            let mut emax: f64 = 0.0;
            for s in 1..g.n_space() - 1 {
                let exact = -pi * pi * (pi * g.x_of_space(s)[0]).sin();
                emax = emax.max((lu.values[g.node(0, s)] - exact).abs());
            }
            errs.push(emax);
        }
        let s1 = (errs[0] / errs[1]).log2();
        let s2 = (errs[1] / errs[2]).log2();
        assert!(s1 >= 1.9 && s2 >= 1.9, "slopes {s1} {s2}");
    }

    #[test]
    fn apply_a_identity_and_linear_cases() {
        let g = grid_1d(8, 5);
        // b = 0, c = 1 -> Au = u
        let coeffs = CoefficientSet::new(
            DiffusionPreset::Identity,
            DriftPreset::Zero,
            ReactionPreset::Constant { c: 1.0 },
            SourcePreset::Zero,
            1.0,
        )
        .unwrap();
        let u = Field::from_fn(&g, |x, t| (x[0] + 0.3).powi(3) * (t + 1.0));
        let au = apply_a(&coeffs, &g, &u).unwrap();
        for (a, b) in au.values.iter().zip(&u.values) {
            assert_relative_eq!(*a, *b, epsilon = 1e-12);
        }
        // b = (1), c = 0, u = x -> Au = 1 exactly
        let coeffs = CoefficientSet::new(
            DiffusionPreset::Identity,
            DriftPreset::Constant { b: vec![1.0] },
            ReactionPreset::Zero,
            SourcePreset::Zero,
            1.0,
        )
        .unwrap();
        let u = Field::from_fn(&g, |x, _| x[0]);
        let au = apply_a(&coeffs, &g, &u).unwrap();
        for v in &au.values {
            assert_relative_eq!(*v, 1.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn apply_a_variable_coefficients_converge() {
        // b = (t), c = x: Au = t pi cos(pi x) + x sin(pi x) + O(h^2)
        let pi = std::f64::consts::PI;
        let coeffs = CoefficientSet::new(
            DiffusionPreset::Identity,
            DriftPreset::TimeLinear,
            ReactionPreset::SpaceLinear,
            SourcePreset::Zero,
            1.0,
        )
        .unwrap();
        let mut errs = Vec::new();
        for nx in [17usize, 33, 65] {
            let g = grid_1d(nx, 5);
            let u = Field::from_fn(&g, |x, _| (pi * x[0]).sin());
            let au = apply_a(&coeffs, &g, &u).unwrap();
            let mut emax: f64 = 0.0;
            for l in 0..g.nt() {
                let t = g.time(l);
                for s in 0..g.n_space() {
                    let x = g.x_of_space(s)[0];
                    let exact = t * pi * (pi * x).cos() + x * (pi * x).sin();
                    emax = emax.max((au.values[g.node(l, s)] - exact).abs());
                }
            }
            errs.push(emax);
        }
        let s1 = (errs[0] / errs[1]).log2();
        let s2 = (errs[1] / errs[2]).log2();
        assert!(s1 >= 1.9 && s2 >= 1.9, "slopes {s1} {s2}");
    }

    #[test]
    fn apply_l_and_apply_a_are_linear() {
        use rand::{Rng, SeedableRng};
        let g = grid_1d(7, 5);
        let coeffs = CoefficientSet::new(
            DiffusionPreset::Trig,
            DriftPreset::TimeLinear,
            ReactionPreset::SpaceLinear,
            SourcePreset::Zero,
            1.0,
        )
        .unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let u = Field { values: (0..g.n_nodes()).map(|_| rng.gen_range(-1.0..1.0)).collect() };
            let v = Field { values: (0..g.n_nodes()).map(|_| rng.gen_range(-1.0..1.0)).collect() };
            let (a, b): (f64, f64) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
            let combo = u.scaled(a).add_scaled(&v, b);
            for op in [apply_l, apply_a] {
                let lhs = op(&coeffs, &g, &combo).unwrap();
                let rhs = op(&coeffs, &g, &u)
                    .unwrap()
                    .scaled(a)
                    .add_scaled(&op(&coeffs, &g, &v).unwrap(), b);
                for (x, y) in lhs.values.iter().zip(&rhs.values) {
                    assert_relative_eq!(*x, *y, epsilon = 1e-9, max_relative = 1e-10);
                }
            }
        }
    }

    #[test]
    fn ellipticity_identity_passes_exactly() {
        let g = grid_1d(8, 5);
        let rep = check_ellipticity(&CoefficientSet::heat(), &g, 50).unwrap();
        assert!(rep.pass);
        assert_relative_eq!(rep.min_eig, 1.0);
        assert_relative_eq!(rep.max_eig, 1.0);
    }

    #[test]
    fn ellipticity_trig_within_declared_band() {
        let g = grid_1d(12, 8);
        let coeffs = CoefficientSet::new(
            DiffusionPreset::Trig,
            DriftPreset::Zero,
            ReactionPreset::Zero,
            SourcePreset::Zero,
            1.0,
        )
        .unwrap();
        let rep = check_ellipticity(&coeffs, &g, 200).unwrap();
        assert!(rep.pass, "sampled range [{}, {}]", rep.min_eig, rep.max_eig);
        assert!(rep.min_eig >= 1.0 && rep.max_eig <= 3.0);
    }

    #[test]
    fn ellipticity_negative_definite_fails_with_node() {
        let g = grid_1d(8, 5);
        let coeffs = CoefficientSet {
            diffusion: DiffusionPreset::NegativeDefinite,
            ..CoefficientSet::heat()
        };
        let rep = check_ellipticity(&coeffs, &g, 10).unwrap();
        assert!(!rep.pass);
        let (node, eig) = rep.violation.unwrap();
        assert_eq!(node, 0);
        assert_relative_eq!(eig, -1.0);
    }

    #[test]
    fn lipschitz_estimates_match_presets() {
        let coeffs = CoefficientSet::heat();
        let bx = LipschitzBox {
            grad_abs: 2.0,
            u_abs: std::f64::consts::PI,
            lengths: vec![1.0],
            t_final: 1.0,
        };
        // F = 0
        let z = Nonlinearity::zero();
        assert_eq!(estimate_lipschitz(&z, &coeffs, &bx, 200, 1).unwrap(), 0.0);
        // F = sin(u): sup |cos| = 1 attained inside |u| <= pi
        let s = Nonlinearity::new(NonlinPreset::SinU { scale: 1.0 }, &coeffs, &bx);
        let est = estimate_lipschitz(&s, &coeffs, &bx, 10_000, 2).unwrap();
        assert!(est <= 1.0 + 1e-9 && est >= 0.95, "estimate {est}");
        // linear with coefficient vector of norm 2: quotient -> 2
        let coeffs2 = CoefficientSet::new(
            DiffusionPreset::Identity,
            DriftPreset::Constant { b: vec![1.2] },
            ReactionPreset::Constant { c: 1.6 },
            SourcePreset::Zero,
            1.0,
        )
        .unwrap();
        let lin = Nonlinearity::new(NonlinPreset::Linear, &coeffs2, &bx);
        assert_relative_eq!(lin.lipschitz_c, 2.0, epsilon = 1e-12);
        let est = estimate_lipschitz(&lin, &coeffs2, &bx, 1000, 3).unwrap();
        assert_relative_eq!(est, 2.0, epsilon = 1e-4);
    }

    #[test]
    fn declared_constants_dominate_estimates_for_all_presets() {
        let g = grid_1d(6, 5);
        let bx = LipschitzBox::default_for(&g.spec.lengths, g.t_final());
        let coeffs = CoefficientSet::new(
            DiffusionPreset::Identity,
            DriftPreset::Constant { b: vec![0.7] },
            ReactionPreset::Constant { c: -0.4 },
            SourcePreset::SineCos { amplitude: 0.5 },
            1.0,
        )
        .unwrap();
        let presets = [
            NonlinPreset::Zero,
            NonlinPreset::Linear,
            NonlinPreset::SinU { scale: 0.5 },
            NonlinPreset::RationalU { scale: 1.3 },
            NonlinPreset::GradNorm { scale: 0.8, eps: 0.2 },
        ];
        for p in presets {
            let nl = Nonlinearity::new(p.clone(), &coeffs, &bx);
            let est = estimate_lipschitz(&nl, &coeffs, &bx, 2000, 9).unwrap();
            assert!(
                est <= nl.lipschitz_c * (1.0 + 1e-9),
                "{p:?}: estimate {est} exceeds declared {}",
                nl.lipschitz_c
            );
        }
    }

    #[test]
    fn lift_with_zero_g_reduces_to_original_problem() {
        let g = grid_1d(9, 6);
        let coeffs = CoefficientSet::new(
            DiffusionPreset::Identity,
            DriftPreset::Zero,
            ReactionPreset::Zero,
            SourcePreset::SineCos { amplitude: 1.0 },
            1.0,
        )
        .unwrap();
        let nl = Nonlinearity::zero();
        let gz = SpaceField::zeros(&g);
        let lifted = lift(&coeffs, &nl, &gz, &g).unwrap();
        // q = p and u = v
        for l in 0..g.nt() {
            let t = g.time(l);
            for s in 0..g.n_space() {
                let x = g.x_of_space(s);
                let expect = coeffs.p(&x[..1], t, &g.spec.lengths);
                assert_relative_eq!(lifted.q.values[g.node(l, s)], expect, epsilon = 1e-14);
            }
        }
        let u = Field::from_fn(&g, |x, t| x[0] * t);
        assert_eq!(lifted.reconstruct(&g, &u), u);
    }

    #[test]
    fn lift_rejects_incompatible_boundary_data() {
        let g = grid_1d(9, 6);
        let bad = SpaceField::from_fn(&g, |x| 1.0 + x[0]);
        assert!(matches!(
            lift(&CoefficientSet::heat(), &Nonlinearity::zero(), &bad, &g),
            Err(Error::BoundaryCompat(_))
        ));
    }

    /// Oracle: for g = sin(pi x), a = I, A = 0, p = 0 the lifted source is
    /// q = -pi^2 sin(pi x) + O(h^2).
    #[test]
    fn lift_source_converges_to_laplacian_of_g() {
        let pi = std::f64::consts::PI;
        let mut errs = Vec::new();
        for nx in [17usize, 33, 65] {
            let g = grid_1d(nx, 4);
            let gg = SpaceField::from_fn(&g, |x| (pi * x[0]).sin());
            let lifted = lift(&CoefficientSet::heat(), &Nonlinearity::zero(), &gg, &g).unwrap();
            let mut emax: f64 = 0.0;
            for s in 1..g.n_space() - 1 {
                let exact = -pi * pi * (pi * g.x_of_space(s)[0]).sin();
                emax = emax.max((lifted.q.values[g.node(0, s)] - exact).abs());
            }
            errs.push(emax);
        }
        let s1 = (errs[0] / errs[1]).log2();
        assert!(s1 >= 1.9, "slope {s1}");
    }

    #[test]
    fn lift_and_reconstruct_roundtrip_exactly() {
        let g = grid_1d(9, 6);
        let pi = std::f64::consts::PI;
        let gg = SpaceField::from_fn(&g, |x| (pi * x[0]).sin());
        let lifted = lift(&CoefficientSet::heat(), &Nonlinearity::zero(), &gg, &g).unwrap();
        let u = Field::from_fn(&g, |x, t| (pi * x[0]).sin() * (1.0 - 0.5 * t));
        let v = lifted.v_of(&g, &u);
        assert_eq!(lifted.reconstruct(&g, &v), u);
        // final condition transport: u(x, T) = g -> v(., T) = 0 exactly
        let u_final_is_g = {
            let mut f = Field::from_fn(&g, |x, t| (pi * x[0]).sin() * (2.0 - t));
            let last = g.nt() - 1;
            for s in 0..g.n_space() {
                f.values[g.node(last, s)] = gg.values[s];
            }
            f
        };
        let v = lifted.v_of(&g, &u_final_is_g);
        for s in 0..g.n_space() {
            assert_eq!(v.values[g.node(g.nt() - 1, s)], 0.0);
        }
    }

    #[test]
    fn h2_norm_of_smooth_field_is_finite() {
        let g = grid_1d(9, 6);
        let u = Field::from_fn(&g, |x, t| x[0] * (1.0 - x[0]) * (1.0 - t));
        let n = discrete_norm(&g, &u, NormKind::H2Qt).unwrap();
        assert!(n.is_finite() && n > 0.0);
    }
}

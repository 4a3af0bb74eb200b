//! Uniform space-time tensor grids, finite-difference operators and discrete norms.
//!
//! The computational domain is `Q_T = Omega x (0, T)` with `Omega` a box in one
//! or two space dimensions. Nodes are ordered time-major: node `m = l * n_space + s`
//! where `l` is the time level and `s` the row-major spatial index (in 2-D,
//! `s = i0 * nx[1] + i1` with the second axis fastest). This ordering is fixed;
//! every sparse assembly in the crate relies on it.
//!
//! Derivatives are second-order centered stencils in the interior and
//! second-order one-sided stencils on the boundary, so Sobolev norms are
//! defined on the whole closed grid. Integrals are trapezoidal; reductions run
//! in node order so results are reproducible bit for bit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparse::Csr;

/// Geometry of a uniform space-time grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Box edge lengths per spatial axis (1 or 2 entries).
    pub lengths: Vec<f64>,
    /// Nodes per spatial axis.
    pub nx: Vec<usize>,
    /// Time levels.
    pub nt: usize,
    /// Final time `T`.
    pub t_final: f64,
}

impl GridSpec {
    pub fn new_1d(length: f64, nx: usize, nt: usize, t_final: f64) -> GridSpec {
        GridSpec { lengths: vec![length], nx: vec![nx], nt, t_final }
    }

    pub fn new_2d(lengths: [f64; 2], nx: [usize; 2], nt: usize, t_final: f64) -> GridSpec {
        GridSpec { lengths: lengths.to_vec(), nx: nx.to_vec(), nt, t_final }
    }

    pub fn dim(&self) -> usize {
        self.lengths.len()
    }

    /// Mesh width along spatial axis `i`.
    pub fn h(&self, i: usize) -> f64 {
        self.lengths[i] / (self.nx[i] - 1) as f64
    }

    pub fn dt(&self) -> f64 {
        self.t_final / (self.nt - 1) as f64
    }

    pub fn n_space(&self) -> usize {
        self.nx.iter().product()
    }

    pub fn node_count(&self) -> usize {
        self.nt * self.n_space()
    }

    /// Same box and final time with every axis refined by an integer factor:
    /// cell counts multiply, so coarse nodes are a subset of fine nodes.
    pub fn refined(&self, factor: usize) -> GridSpec {
        GridSpec {
            lengths: self.lengths.clone(),
            nx: self.nx.iter().map(|&n| (n - 1) * factor + 1).collect(),
            nt: (self.nt - 1) * factor + 1,
            t_final: self.t_final,
        }
    }

    fn validate(&self) -> Result<()> {
        let d = self.dim();
        if d != 1 && d != 2 {
            return Err(Error::InvalidGrid(format!("spatial dimension must be 1 or 2, got {d}")));
        }
        if self.nx.len() != d {
            return Err(Error::InvalidGrid("lengths and nx must have equal length".into()));
        }
        for (i, &n) in self.nx.iter().enumerate() {
            if n < 4 {
                return Err(Error::InvalidGrid(format!("nx[{i}] = {n} < 4")));
            }
            if !(self.lengths[i] > 0.0) {
                return Err(Error::InvalidGrid(format!("lengths[{i}] must be positive")));
            }
        }
        if self.nt < 4 {
            return Err(Error::InvalidGrid(format!("nt = {} < 4", self.nt)));
        }
        if !(self.t_final > 0.0) {
            return Err(Error::InvalidGrid("t_final must be positive".into()));
        }
        Ok(())
    }
}

/// A built grid: the spec plus node coordinates, index maps and quadrature weights.
#[derive(Debug, Clone)]
pub struct Grid {
    pub spec: GridSpec,
    h: Vec<f64>,
    dt: f64,
    n_space: usize,
    n_nodes: usize,
    /// Coordinates along each spatial axis.
    xs: Vec<Vec<f64>>,
    /// Time levels.
    ts: Vec<f64>,
    /// True for spatial nodes on the boundary of Omega.
    space_boundary: Vec<bool>,
    /// Trapezoidal weight per spatial node (measure of Omega).
    space_w: Vec<f64>,
    /// Trapezoidal weight per space-time node (measure of Q_T).
    node_w: Vec<f64>,
    /// node -> free DOF index, usize::MAX for constrained nodes.
    free_of_node: Vec<usize>,
    /// free DOF index -> node.
    node_of_free: Vec<usize>,
}

/// Build a grid from its spec, rejecting invalid geometry.
pub fn build_grid(spec: &GridSpec) -> Result<Grid> {
    Grid::build(spec.clone())
}

impl Grid {
    pub fn build(spec: GridSpec) -> Result<Grid> {
        spec.validate()?;
        let dim = spec.dim();
        let h: Vec<f64> = (0..dim).map(|i| spec.h(i)).collect();
        let dt = spec.dt();
        let n_space = spec.n_space();
        let n_nodes = spec.node_count();
        let xs: Vec<Vec<f64>> = (0..dim)
            .map(|i| (0..spec.nx[i]).map(|j| j as f64 * h[i]).collect())
            .collect();
        let ts: Vec<f64> = (0..spec.nt).map(|l| l as f64 * dt).collect();

        let mut space_boundary = vec![false; n_space];
        let mut space_w = vec![0.0; n_space];
        for s in 0..n_space {
            let idx = Grid::unravel_space(&spec, s);
            let mut bnd = false;
            let mut w = 1.0;
            for (i, &j) in idx.iter().enumerate() {
                if j == 0 || j == spec.nx[i] - 1 {
                    bnd = true;
                    w *= h[i] / 2.0;
                } else {
                    w *= h[i];
                }
            }
            space_boundary[s] = bnd;
            space_w[s] = w;
        }

        let mut node_w = vec![0.0; n_nodes];
        let mut free_of_node = vec![usize::MAX; n_nodes];
        let mut node_of_free = Vec::new();
        for l in 0..spec.nt {
            let wt = if l == 0 || l == spec.nt - 1 { dt / 2.0 } else { dt };
            for s in 0..n_space {
                let m = l * n_space + s;
                node_w[m] = wt * space_w[s];
                // free DOFs: spatially interior and not on the final level
                if !space_boundary[s] && l != spec.nt - 1 {
                    free_of_node[m] = node_of_free.len();
                    node_of_free.push(m);
                }
            }
        }

        Ok(Grid {
            spec,
            h,
            dt,
            n_space,
            n_nodes,
            xs,
            ts,
            space_boundary,
            space_w,
            node_w,
            free_of_node,
            node_of_free,
        })
    }

    fn unravel_space(spec: &GridSpec, s: usize) -> Vec<usize> {
        match spec.dim() {
            1 => vec![s],
            2 => vec![s / spec.nx[1], s % spec.nx[1]],
            _ => unreachable!(),
        }
    }

    pub fn dim(&self) -> usize {
        self.spec.dim()
    }

    pub fn n_space(&self) -> usize {
        self.n_space
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn n_free(&self) -> usize {
        self.node_of_free.len()
    }

    pub fn nt(&self) -> usize {
        self.spec.nt
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn h(&self, axis: usize) -> f64 {
        self.h[axis]
    }

    pub fn t_final(&self) -> f64 {
        self.spec.t_final
    }

    pub fn time(&self, level: usize) -> f64 {
        self.ts[level]
    }

    pub fn node(&self, level: usize, s: usize) -> usize {
        level * self.n_space + s
    }

    pub fn level_of(&self, node: usize) -> usize {
        node / self.n_space
    }

    pub fn space_of(&self, node: usize) -> usize {
        node % self.n_space
    }

    /// Spatial coordinates of spatial node `s`.
    pub fn x_of_space(&self, s: usize) -> [f64; 2] {
        match self.dim() {
            1 => [self.xs[0][s], 0.0],
            2 => [self.xs[0][s / self.spec.nx[1]], self.xs[1][s % self.spec.nx[1]]],
            _ => unreachable!(),
        }
    }

    pub fn is_space_boundary(&self, s: usize) -> bool {
        self.space_boundary[s]
    }

    pub fn node_weights(&self) -> &[f64] {
        &self.node_w
    }

    pub fn space_weights(&self) -> &[f64] {
        &self.space_w
    }

    pub fn free_of_node(&self) -> &[usize] {
        &self.free_of_node
    }

    pub fn node_of_free(&self) -> &[usize] {
        &self.node_of_free
    }

    /// Snap a time to the nearest grid level; returns (level, snapped time).
    pub fn snap_time(&self, t: f64) -> (usize, f64) {
        let l = (t / self.dt).round().max(0.0) as usize;
        let l = l.min(self.spec.nt - 1);
        (l, self.ts[l])
    }

    /// Embed free-DOF values into a full field (constrained nodes zero).
    pub fn embed_free(&self, v_free: &[f64]) -> Field {
        assert_eq!(v_free.len(), self.n_free());
        let mut values = vec![0.0; self.n_nodes];
        for (i, &m) in self.node_of_free.iter().enumerate() {
            values[m] = v_free[i];
        }
        Field { values }
    }

    /// Extract free-DOF values from a full field.
    pub fn extract_free(&self, f: &Field) -> Vec<f64> {
        self.node_of_free.iter().map(|&m| f.values[m]).collect()
    }
}

/// Real-valued function on all space-time nodes, stored in node order.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub values: Vec<f64>,
}

impl Field {
    pub fn new(grid: &Grid, values: Vec<f64>) -> Result<Field> {
        if values.len() != grid.n_nodes() {
            return Err(Error::ShapeMismatch(format!(
                "field has {} values, grid has {} nodes",
                values.len(),
                grid.n_nodes()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("field value at node {i}")));
        }
        Ok(Field { values })
    }

    pub fn zeros(grid: &Grid) -> Field {
        Field { values: vec![0.0; grid.n_nodes()] }
    }

    /// Sample a closed-form function of (x, t) at every node.
    pub fn from_fn(grid: &Grid, f: impl Fn(&[f64], f64) -> f64) -> Field {
        let mut values = vec![0.0; grid.n_nodes()];
        for l in 0..grid.nt() {
            let t = grid.time(l);
            for s in 0..grid.n_space() {
                let x = grid.x_of_space(s);
                values[grid.node(l, s)] = f(&x[..grid.dim()], t);
            }
        }
        Field { values }
    }

    pub fn scaled(&self, c: f64) -> Field {
        Field { values: self.values.iter().map(|v| c * v).collect() }
    }

    pub fn add_scaled(&self, other: &Field, c: f64) -> Field {
        assert_eq!(self.values.len(), other.values.len());
        Field {
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a + c * b)
                .collect(),
        }
    }

    /// Time slice as a spatial field.
    pub fn slice(&self, grid: &Grid, level: usize) -> SpaceField {
        let s0 = level * grid.n_space();
        SpaceField { values: self.values[s0..s0 + grid.n_space()].to_vec() }
    }
}

/// Real-valued function on the spatial nodes at a single time level.
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceField {
    pub values: Vec<f64>,
}

impl SpaceField {
    pub fn new(grid: &Grid, values: Vec<f64>) -> Result<SpaceField> {
        if values.len() != grid.n_space() {
            return Err(Error::ShapeMismatch(format!(
                "space field has {} values, grid has {} spatial nodes",
                values.len(),
                grid.n_space()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("space field value at node {i}")));
        }
        Ok(SpaceField { values })
    }

    pub fn zeros(grid: &Grid) -> SpaceField {
        SpaceField { values: vec![0.0; grid.n_space()] }
    }

    pub fn from_fn(grid: &Grid, f: impl Fn(&[f64]) -> f64) -> SpaceField {
        let values = (0..grid.n_space())
            .map(|s| {
                let x = grid.x_of_space(s);
                f(&x[..grid.dim()])
            })
            .collect();
        SpaceField { values }
    }

    /// Discrete `L2(Omega)` norm (trapezoidal).
    pub fn l2(&self, grid: &Grid) -> f64 {
        let mut acc = 0.0;
        for s in 0..grid.n_space() {
            acc += grid.space_weights()[s] * self.values[s] * self.values[s];
        }
        acc.sqrt()
    }

    /// Largest absolute value on the spatial boundary.
    pub fn boundary_max(&self, grid: &Grid) -> f64 {
        let mut m: f64 = 0.0;
        for s in 0..grid.n_space() {
            if grid.is_space_boundary(s) {
                m = m.max(self.values[s].abs());
            }
        }
        m
    }
}

/// Axes of the space-time tensor grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Time,
    Space(usize),
}

/// First and second derivative tags used throughout the solvers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Deriv {
    /// d/dt
    T,
    /// d2/dt2
    Tt,
    /// d/dx_i
    X(usize),
    /// d2/(dx_i dx_j)
    Xx(usize, usize),
    /// d2/(dt dx_i)
    Tx(usize),
}

/// Second-order stencil along one axis: returns (offset index, coefficient)
/// pairs for position `j` on an axis with `n` nodes and spacing `d`.
fn stencil(n: usize, d: f64, order: u32, j: usize) -> Vec<(usize, f64)> {
    match order {
        1 => {
            let c = 1.0 / (2.0 * d);
            if j == 0 {
                vec![(0, -3.0 * c), (1, 4.0 * c), (2, -c)]
            } else if j == n - 1 {
                vec![(n - 1, 3.0 * c), (n - 2, -4.0 * c), (n - 3, c)]
            } else {
                vec![(j - 1, -c), (j + 1, c)]
            }
        }
        2 => {
            let c = 1.0 / (d * d);
            if j == 0 {
                vec![(0, 2.0 * c), (1, -5.0 * c), (2, 4.0 * c), (3, -c)]
            } else if j == n - 1 {
                vec![(n - 1, 2.0 * c), (n - 2, -5.0 * c), (n - 3, 4.0 * c), (n - 4, -c)]
            } else {
                vec![(j - 1, c), (j, -2.0 * c), (j + 1, c)]
            }
        }
        _ => unreachable!("stencil only implements orders 1 and 2"),
    }
}

/// Derivative matrix along one axis of a tensor grid with row-major `dims`,
/// `spacing` along axis `axis`, derivative `order` in {1, 2}.
fn axis_deriv_matrix(dims: &[usize], spacings: &[f64], axis: usize, order: u32) -> Csr {
    let n_total: usize = dims.iter().product();
    let n_axis = dims[axis];
    assert!(n_axis >= 4, "axis too short for one-sided second-order stencils");
    // stride of the axis in the flattened index
    let stride: usize = dims[axis + 1..].iter().product();
    let mut trips: Vec<(usize, usize, f64)> = Vec::with_capacity(n_total * 3);
    for m in 0..n_total {
        let j = (m / stride) % n_axis;
        let base = m - j * stride;
        for (jj, coeff) in stencil(n_axis, spacings[axis], order, j) {
            trips.push((m, base + jj * stride, coeff));
        }
    }
    Csr::from_triplets(n_total, n_total, &mut trips)
}

fn full_dims(grid: &Grid) -> Vec<usize> {
    let mut dims = vec![grid.nt()];
    dims.extend_from_slice(&grid.spec.nx);
    dims
}

fn full_spacings(grid: &Grid) -> Vec<f64> {
    let mut sp = vec![grid.dt()];
    sp.extend(&grid.h);
    sp
}

/// Derivative matrix of order <= 4 along one axis of the full space-time grid.
/// Orders 3 and 4 are compositions of the order-1/2 stencils.
pub fn axis_deriv_csr(grid: &Grid, axis: Axis, order: u32) -> Csr {
    let dims = full_dims(grid);
    let sp = full_spacings(grid);
    let ax = match axis {
        Axis::Time => 0,
        Axis::Space(i) => 1 + i,
    };
    match order {
        1 | 2 => axis_deriv_matrix(&dims, &sp, ax, order),
        3 => axis_deriv_matrix(&dims, &sp, ax, 1).matmul(&axis_deriv_matrix(&dims, &sp, ax, 2)),
        4 => {
            let d2 = axis_deriv_matrix(&dims, &sp, ax, 2);
            d2.matmul(&d2)
        }
        _ => panic!("axis derivative order must be 1..=4"),
    }
}

/// Derivative matrix along a spatial axis acting on spatial fields only.
pub fn space_deriv_csr(grid: &Grid, axis: usize, order: u32) -> Csr {
    let dims = grid.spec.nx.clone();
    let sp = grid.h.clone();
    match order {
        1 | 2 => axis_deriv_matrix(&dims, &sp, axis, order),
        _ => panic!("space derivative order must be 1 or 2"),
    }
}

/// Matrix of the derivative `which` on the full space-time grid.
pub fn deriv_csr(grid: &Grid, which: Deriv) -> Csr {
    match which {
        Deriv::T => axis_deriv_csr(grid, Axis::Time, 1),
        Deriv::Tt => axis_deriv_csr(grid, Axis::Time, 2),
        Deriv::X(i) => axis_deriv_csr(grid, Axis::Space(i), 1),
        Deriv::Xx(i, j) => {
            if i == j {
                axis_deriv_csr(grid, Axis::Space(i), 2)
            } else {
                axis_deriv_csr(grid, Axis::Space(i), 1)
                    .matmul(&axis_deriv_csr(grid, Axis::Space(j), 1))
            }
        }
        Deriv::Tx(i) => {
            axis_deriv_csr(grid, Axis::Time, 1).matmul(&axis_deriv_csr(grid, Axis::Space(i), 1))
        }
    }
}

/// Apply a finite-difference derivative to a field.
pub fn diff(grid: &Grid, field: &Field, which: Deriv) -> Result<Field> {
    if field.values.len() != grid.n_nodes() {
        return Err(Error::ShapeMismatch("field does not match grid".into()));
    }
    if let Deriv::X(i) | Deriv::Xx(i, _) | Deriv::Tx(i) = which {
        let j = if let Deriv::Xx(_, j) = which { j.max(i) } else { i };
        if j >= grid.dim() {
            return Err(Error::ShapeMismatch(format!(
                "spatial axis {j} out of range for dimension {}",
                grid.dim()
            )));
        }
    }
    Ok(Field { values: deriv_csr(grid, which).matvec(&field.values) })
}

/// Norms available on space-time fields.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NormKind {
    /// `L2(Q_T)`.
    L2Qt,
    /// `L2(Omega)` of the final-time slice `u(., T)` (the norm the data terms
    /// are measured in).
    L2Omega,
    /// `H^{1,0}(Omega x (tau, T))`: `u` and its spatial gradient, from `tau`
    /// (snapped to the nearest time level) up to `T`.
    H10QtTau(f64),
    /// Full space-time `H^2(Q_T)`: all derivatives of total order <= 2.
    H2Qt,
    /// `H^k(Q_T)` for k in {2, 3, 4}: all space-time derivatives of total
    /// order <= k, higher orders by stencil composition.
    HkQt(u32),
}

/// All space-time multi-indices (orders per axis, time first) of total order <= k.
pub fn multi_indices(dim: usize, k: u32) -> Vec<Vec<u32>> {
    let n_axes = dim + 1;
    let mut out = Vec::new();
    let mut cur = vec![0u32; n_axes];
    fn rec(axis: usize, remaining: u32, cur: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if axis == cur.len() {
            out.push(cur.clone());
            return;
        }
        for o in 0..=remaining {
            cur[axis] = o;
            rec(axis + 1, remaining - o, cur, out);
        }
        cur[axis] = 0;
    }
    rec(0, k, &mut cur, &mut out);
    out.sort();
    out
}

/// Matrix of the composed derivative for one multi-index (time order first).
pub fn multi_index_csr(grid: &Grid, alpha: &[u32]) -> Option<Csr> {
    let mut acc: Option<Csr> = None;
    for (ax, &o) in alpha.iter().enumerate() {
        if o == 0 {
            continue;
        }
        let axis = if ax == 0 { Axis::Time } else { Axis::Space(ax - 1) };
        let m = axis_deriv_csr(grid, axis, o);
        acc = Some(match acc {
            None => m,
            Some(prev) => m.matmul(&prev),
        });
    }
    acc
}

fn weighted_sq(values: &[f64], w: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..values.len() {
        acc += w[i] * values[i] * values[i];
    }
    acc
}

/// Discrete norm of a space-time field.
///
/// For `H10QtTau` the cut time is snapped to the nearest grid level; call
/// [`Grid::snap_time`] to see the snapped value.
pub fn discrete_norm(grid: &Grid, field: &Field, kind: NormKind) -> Result<f64> {
    if field.values.len() != grid.n_nodes() {
        return Err(Error::ShapeMismatch("field does not match grid".into()));
    }
    match kind {
        NormKind::L2Qt => Ok(weighted_sq(&field.values, grid.node_weights()).sqrt()),
        NormKind::L2Omega => Ok(field.slice(grid, grid.nt() - 1).l2(grid)),
        NormKind::H10QtTau(tau) => {
            if !(tau >= 0.0 && tau < grid.t_final()) {
                return Err(Error::InvalidParam(format!(
                    "tau = {tau} outside [0, T = {})",
                    grid.t_final()
                )));
            }
            let (l0, _) = grid.snap_time(tau);
            if l0 >= grid.nt() - 1 {
                return Err(Error::InvalidParam("tau snapped to the final level".into()));
            }
            let grads: Vec<Field> = (0..grid.dim())
                .map(|i| diff(grid, field, Deriv::X(i)))
                .collect::<Result<_>>()?;
            let mut acc = 0.0;
            for l in l0..grid.nt() {
                let wt = if l == l0 || l == grid.nt() - 1 { grid.dt() / 2.0 } else { grid.dt() };
                for s in 0..grid.n_space() {
                    let m = grid.node(l, s);
                    let mut q = field.values[m] * field.values[m];
                    for gf in &grads {
                        q += gf.values[m] * gf.values[m];
                    }
                    acc += wt * grid.space_weights()[s] * q;
                }
            }
            Ok(acc.sqrt())
        }
        NormKind::H2Qt => discrete_norm(grid, field, NormKind::HkQt(2)),
        NormKind::HkQt(k) => {
            if !(2..=4).contains(&k) {
                return Err(Error::InvalidParam(format!("Hk order {k} not in 2..=4")));
            }
            let w = grid.node_weights();
            let mut acc = weighted_sq(&field.values, w);
            for alpha in multi_indices(grid.dim(), k) {
                if let Some(m) = multi_index_csr(grid, &alpha) {
                    acc += weighted_sq(&m.matvec(&field.values), w);
                }
            }
            Ok(acc.sqrt())
        }
    }
}

/// Dense Gram matrix of the `H^k(Q_T)` inner product restricted to free DOFs:
/// `v^T R v = sum_alpha integral (D^alpha v)^2` for constrained fields.
pub fn gram_matrix(grid: &Grid, order: u32) -> nalgebra::DMatrix<f64> {
    let n_free = grid.n_free();
    let mut out = nalgebra::DMatrix::zeros(n_free, n_free);
    let w = grid.node_weights();
    for alpha in multi_indices(grid.dim(), order) {
        match multi_index_csr(grid, &alpha) {
            None => {
                // zero multi-index: identity restricted to free DOFs
                for (i, &m) in grid.node_of_free().iter().enumerate() {
                    out[(i, i)] += w[m];
                }
            }
            Some(mat) => {
                let restricted = mat.restrict_cols(grid.free_of_node(), n_free);
                restricted.add_gram_to(w, &mut out);
            }
        }
    }
    out
}

//! Config schema for the command line: a single JSON file, schema-validated
//! with unknown keys rejected, mapped onto the library's preset types.

use serde::{Deserialize, Serialize};

use retropar::grid::{Grid, GridSpec, SpaceField};
use retropar::model::{
    CoefficientSet, DiffusionPreset, DriftPreset, LipschitzBox, NonlinPreset, Nonlinearity,
    ReactionPreset, SourcePreset,
};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub grid: GridConfig,
    pub problem: ProblemConfig,
    #[serde(default)]
    pub carleman: CarlemanConfig,
    /// Optional; when present it must match the subcommand.
    #[serde(default)]
    pub method: Option<String>,
    #[serde(default)]
    pub qrm: QrmSection,
    #[serde(default)]
    pub convexify: ConvexSection,
    #[serde(default)]
    pub noise: NoiseConfig,
    /// Rate CSV consumed by `fit-rate`.
    #[serde(default)]
    pub input_table: Option<String>,
    #[serde(default)]
    pub assert: AssertConfig,
    #[serde(default = "default_output")]
    pub output: String,
}

fn default_output() -> String {
    "out".into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub lengths: Vec<f64>,
    pub nx: Vec<usize>,
    pub nt: usize,
    pub t_final: f64,
}

impl GridConfig {
    pub fn build(&self) -> retropar::Result<Grid> {
        Grid::build(GridSpec {
            lengths: self.lengths.clone(),
            nx: self.nx.clone(),
            nt: self.nt,
            t_final: self.t_final,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    #[serde(default = "default_diffusion")]
    pub diffusion: DiffusionPreset,
    #[serde(default = "default_drift")]
    pub drift: DriftPreset,
    #[serde(default = "default_reaction")]
    pub reaction: ReactionPreset,
    #[serde(default = "default_source")]
    pub source: SourcePreset,
    #[serde(default = "default_nonlin")]
    pub nonlinearity: NonlinPreset,
    /// Initial condition: `u0 = sum_k amplitudes[k] sin((k+1) pi x / L)`
    /// (tensorized across axes in 2-D). Boundary-compatible by construction.
    pub initial: InitialConfig,
    /// Forward data is generated on a grid refined by this factor (>= 2).
    #[serde(default = "default_refine")]
    pub refine_factor: usize,
}

fn default_diffusion() -> DiffusionPreset {
    DiffusionPreset::Identity
}
fn default_drift() -> DriftPreset {
    DriftPreset::Zero
}
fn default_reaction() -> ReactionPreset {
    ReactionPreset::Zero
}
fn default_source() -> SourcePreset {
    SourcePreset::Zero
}
fn default_nonlin() -> NonlinPreset {
    NonlinPreset::Zero
}
fn default_refine() -> usize {
    2
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialConfig {
    pub amplitudes: Vec<f64>,
}

impl ProblemConfig {
    pub fn coefficients(&self, t_final: f64) -> retropar::Result<CoefficientSet> {
        CoefficientSet::new(
            self.diffusion.clone(),
            self.drift.clone(),
            self.reaction.clone(),
            self.source.clone(),
            t_final,
        )
    }

    pub fn nonlinearity(&self, coeffs: &CoefficientSet, grid: &Grid) -> Nonlinearity {
        let bx = LipschitzBox::default_for(&grid.spec.lengths, grid.t_final());
        Nonlinearity::new(self.nonlinearity.clone(), coeffs, &bx)
    }

    pub fn initial_field(&self, grid: &Grid) -> SpaceField {
        let amps = self.initial.amplitudes.clone();
        let lengths = grid.spec.lengths.clone();
        SpaceField::from_fn(grid, move |x| {
            let mut acc = 0.0;
            for (k, a) in amps.iter().enumerate() {
                let freq = (k + 1) as f64 * std::f64::consts::PI;
                let mut mode = (freq * x[0] / lengths[0]).sin();
                if x.len() == 2 {
                    mode *= (freq * x[1] / lengths[1]).sin();
                }
                acc += a * mode;
            }
            acc
        })
    }

    /// Closure form of the initial condition for exact sampling on the
    /// refined data-generation grid.
    pub fn initial_fn(&self, lengths: Vec<f64>) -> impl Fn(&[f64]) -> f64 {
        let amps = self.initial.amplitudes.clone();
        move |x: &[f64]| {
            let mut acc = 0.0;
            for (k, a) in amps.iter().enumerate() {
                let freq = (k + 1) as f64 * std::f64::consts::PI;
                let mut mode = (freq * x[0] / lengths[0]).sin();
                if x.len() == 2 {
                    mode *= (freq * x[1] / lengths[1]).sin();
                }
                acc += a * mode;
            }
            acc
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CarlemanConfig {
    #[serde(default = "default_tau_frac")]
    pub tau: f64,
    #[serde(default = "default_k_base")]
    pub k_base: f64,
    #[serde(default = "default_nu")]
    pub nu: f64,
    /// When absent, {1..10} intersected with the overflow guard.
    #[serde(default)]
    pub nu_grid: Option<Vec<f64>>,
    /// Anchor time of the assembled weight; defaults to the final time.
    #[serde(default)]
    pub anchor: Option<f64>,
}

impl Default for CarlemanConfig {
    fn default() -> Self {
        CarlemanConfig {
            tau: default_tau_frac(),
            k_base: default_k_base(),
            nu: default_nu(),
            nu_grid: None,
            anchor: None,
        }
    }
}

fn default_tau_frac() -> f64 {
    0.25
}
fn default_k_base() -> f64 {
    2.0
}
fn default_nu() -> f64 {
    2.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QrmSection {
    pub alpha: f64,
    pub cg_tol: f64,
    pub cg_max_iter: usize,
    pub alpha_rule: AlphaRuleConfig,
}

impl Default for QrmSection {
    fn default() -> Self {
        QrmSection {
            alpha: 1e-8,
            cg_tol: 1e-10,
            cg_max_iter: 400_000,
            alpha_rule: AlphaRuleConfig::Manual,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaRuleConfig {
    Manual,
    DeltaSquared,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvexSection {
    pub alpha: f64,
    pub radius: f64,
    pub norm_order: u32,
    pub gamma: f64,
    pub max_iter: usize,
    pub stop_tol: f64,
    #[serde(default)]
    pub c2_hat: Option<f64>,
    #[serde(default = "default_pairs")]
    pub probe_pairs: usize,
}

fn default_pairs() -> usize {
    100
}

impl Default for ConvexSection {
    fn default() -> Self {
        ConvexSection {
            alpha: 0.5,
            radius: 5.0,
            norm_order: 2,
            gamma: 0.1,
            max_iter: 20_000,
            stop_tol: 1e-6,
            c2_hat: None,
            probe_pairs: 100,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    #[serde(default)]
    pub delta: f64,
    #[serde(default)]
    pub delta_ladder: Option<Vec<f64>>,
    /// Mandatory whenever randomness is used; there is no wall-clock seeding.
    #[serde(default)]
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct AssertConfig {
    #[serde(default)]
    pub max_rel_error_h10: Option<f64>,
    #[serde(default)]
    pub slope_range: Option<[f64; 2]>,
    #[serde(default)]
    pub max_spread: Option<f64>,
    #[serde(default)]
    pub require_theta_lt_1: bool,
}

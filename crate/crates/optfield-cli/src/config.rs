//! Experiment configuration: one JSON schema shared by every subcommand.
//! Unknown keys are rejected everywhere so typos fail loudly before any
//! computation starts.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use nalgebra::{DMatrix, DVector};
use serde::Deserialize;

use optfield::conjugate::SolverSettings;
use optfield::couplings::{PathShape, PathSpec, PlanSpec};
use optfield::distributions::{Distribution, Gaussian};
use optfield::optimal_fields::OdeMethod;
use optfield::potentials::ConvexPotential;
use optfield::solver::LossKind;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub experiment: Option<String>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "defaults::n_samples")]
    pub n_samples: usize,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub conjugate: ConjugateSpec,
    /// Width of the statistical acceptance band in standard errors.
    #[serde(default = "defaults::sigma_multiplier")]
    pub sigma_multiplier: f64,
    #[serde(default)]
    pub p0: Option<DistributionSpec>,
    #[serde(default)]
    pub p1: Option<DistributionSpec>,
    #[serde(default)]
    pub bracket: Option<BracketSection>,
    #[serde(default)]
    pub theorem: Option<TheoremSection>,
    #[serde(default)]
    pub ofm: Option<OfmSection>,
    #[serde(default)]
    pub solve: Option<SolveSection>,
    #[serde(default)]
    pub push: Option<PushSection>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let cfg: Self = serde_json::from_str(&text)
            .with_context(|| format!("invalid config {}", path.display()))?;
        Ok(cfg)
    }

    pub fn conjugate_settings(&self) -> SolverSettings {
        SolverSettings {
            tol: self.conjugate.tol,
            max_iters: self.conjugate.max_iters,
        }
    }

    pub fn endpoints(&self) -> Result<(Distribution, Distribution)> {
        let p0 = self
            .p0
            .as_ref()
            .context("config needs a p0 distribution")?
            .build()?;
        let p1 = self
            .p1
            .as_ref()
            .context("config needs a p1 distribution")?
            .build()?;
        if p0.dim() != p1.dim() {
            bail!(
                "p0 and p1 have different dimensions ({} vs {})",
                p0.dim(),
                p1.dim()
            );
        }
        Ok((p0, p1))
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConjugateSpec {
    #[serde(default = "defaults::conj_tol")]
    pub tol: f64,
    #[serde(default = "defaults::conj_max_iters")]
    pub max_iters: usize,
}

impl Default for ConjugateSpec {
    fn default() -> Self {
        Self {
            tol: defaults::conj_tol(),
            max_iters: defaults::conj_max_iters(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianSpec {
    pub mean: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
}

impl GaussianSpec {
    fn build(&self) -> Result<Gaussian> {
        let d = self.mean.len();
        if self.covariance.len() != d || self.covariance.iter().any(|r| r.len() != d) {
            bail!("covariance must be {d}x{d}");
        }
        let cov = DMatrix::from_fn(d, d, |i, j| self.covariance[i][j]);
        Ok(Gaussian::new(DVector::from_vec(self.mean.clone()), cov)?)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum DistributionSpec {
    Gaussian {
        mean: Vec<f64>,
        covariance: Vec<Vec<f64>>,
    },
    GaussianMixture {
        weights: Vec<f64>,
        components: Vec<GaussianSpec>,
    },
    Uniform {
        lower: Vec<f64>,
        upper: Vec<f64>,
    },
    /// Rows inline or loaded from a headerless CSV with one point per row.
    Empirical {
        #[serde(default)]
        csv: Option<PathBuf>,
        #[serde(default)]
        points: Option<Vec<Vec<f64>>>,
    },
}

impl DistributionSpec {
    pub fn build(&self) -> Result<Distribution> {
        Ok(match self {
            Self::Gaussian { mean, covariance } => Distribution::Gaussian(
                GaussianSpec {
                    mean: mean.clone(),
                    covariance: covariance.clone(),
                }
                .build()?,
            ),
            Self::GaussianMixture {
                weights,
                components,
            } => Distribution::gaussian_mixture(
                DVector::from_vec(weights.clone()),
                components
                    .iter()
                    .map(GaussianSpec::build)
                    .collect::<Result<_>>()?,
            )?,
            Self::Uniform { lower, upper } => Distribution::uniform(
                DVector::from_vec(lower.clone()),
                DVector::from_vec(upper.clone()),
            )?,
            Self::Empirical { csv, points } => match (csv, points) {
                (Some(path), None) => Distribution::empirical_from_csv(path)
                    .with_context(|| format!("loading {}", path.display()))?,
                (None, Some(rows)) => {
                    if rows.is_empty() || rows.iter().any(|r| r.len() != rows[0].len()) {
                        bail!("empirical points must be nonempty rows of equal width");
                    }
                    let m = DMatrix::from_fn(rows.len(), rows[0].len(), |i, j| rows[i][j]);
                    Distribution::empirical(m)?
                }
                _ => bail!("empirical distribution needs exactly one of `csv` or `points`"),
            },
        })
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum PlanSpecJson {
    Independent,
    MinibatchOt { batch: usize },
    Map { potential: ConvexPotential },
}

impl PlanSpecJson {
    pub fn build(&self, p0: &Distribution, p1: &Distribution) -> Result<PlanSpec> {
        Ok(match self {
            Self::Independent => PlanSpec::independent(p0.clone(), p1.clone())?,
            Self::MinibatchOt { batch } => PlanSpec::minibatch_ot(p0.clone(), p1.clone(), *batch)?,
            Self::Map { potential } => PlanSpec::map_plan(p0.clone(), potential.clone())?,
        })
    }

    pub fn label(&self) -> String {
        match self {
            Self::Independent => "independent".into(),
            Self::MinibatchOt { batch } => format!("minibatch{batch}"),
            Self::Map { .. } => "map".into(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum PathShapeJson {
    Linear,
    CurvedSine { amplitude: f64, direction: Vec<f64> },
}

impl PathShapeJson {
    fn build(&self) -> Result<PathShape> {
        Ok(match self {
            Self::Linear => PathShape::Linear,
            Self::CurvedSine {
                amplitude,
                direction,
            } => PathShape::curved_sine(*amplitude, DVector::from_vec(direction.clone()))?,
        })
    }

    fn label(&self) -> &'static str {
        match self {
            Self::Linear => "linear",
            Self::CurvedSine { .. } => "curved-sine",
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathSpecJson {
    pub plan: PlanSpecJson,
    #[serde(default = "defaults::linear_shape")]
    pub shape: PathShapeJson,
}

impl PathSpecJson {
    pub fn build(&self, p0: &Distribution, p1: &Distribution) -> Result<PathSpec> {
        Ok(PathSpec::new(
            self.plan.build(p0, p1)?,
            self.shape.build()?,
        )?)
    }

    pub fn label(&self) -> String {
        format!("{}-{}", self.shape.label(), self.plan.label())
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilySpec {
    pub count: usize,
    pub dims: Vec<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BracketSection {
    #[serde(default)]
    pub quadratic: Option<FamilySpec>,
    #[serde(default)]
    pub max_affine: Option<FamilySpec>,
    #[serde(default = "defaults::points_per_potential")]
    pub points_per_potential: usize,
    #[serde(default = "defaults::t_range")]
    pub t_range: [f64; 2],
    #[serde(default = "defaults::analytic_tol")]
    pub analytic_tol: f64,
    #[serde(default = "defaults::fd_tol")]
    pub fd_tol: f64,
    #[serde(default)]
    pub explicit_potentials: Vec<ConvexPotential>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheoremSection {
    #[serde(default = "defaults::theorem_potentials")]
    pub n_potentials: usize,
    /// Empty means the standard trio: linear-independent,
    /// linear-minibatch(32), curved-sine-independent.
    #[serde(default)]
    pub paths: Vec<PathSpecJson>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OfmSection {
    #[serde(default = "defaults::ofm_potentials")]
    pub n_potentials: usize,
    #[serde(default)]
    pub plan: Option<PlanSpecJson>,
    /// Also check the exactly-known identity case (identity potential on a
    /// standard 1D pair: values 2 and 1, constant 0).
    #[serde(default = "defaults::yes")]
    pub identity_check: bool,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum InitSpec {
    Potential { potential: ConvexPotential },
    NoisyIdentity { noise: f64, init_seed: u64 },
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolveSection {
    pub loss_kind: LossKind,
    #[serde(default)]
    pub init: Option<InitSpec>,
    #[serde(default = "defaults::step_size")]
    pub step_size: f64,
    #[serde(default = "defaults::max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "defaults::batch")]
    pub batch: usize,
    #[serde(default = "defaults::grad_tol")]
    pub grad_tol: f64,
    #[serde(default)]
    pub plan: Option<PlanSpecJson>,
    #[serde(default)]
    pub path: Option<PathSpecJson>,
    /// Compare the recovered map against the closed-form Gaussian solution
    /// (requires Gaussian endpoints).
    #[serde(default)]
    pub compare_closed_form: bool,
    #[serde(default = "defaults::map_rel_tol")]
    pub map_rel_tol: f64,
    #[serde(default = "defaults::shift_tol")]
    pub shift_tol: f64,
    #[serde(default = "defaults::w2_rel_tol")]
    pub w2_rel_tol: f64,
    /// Sample count for the final loss / distance evaluations.
    #[serde(default = "defaults::eval_n")]
    pub eval_n: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PushSection {
    #[serde(default)]
    pub potential: Option<ConvexPotential>,
    #[serde(default)]
    pub potential_file: Option<PathBuf>,
    #[serde(default = "defaults::steps")]
    pub steps: usize,
    #[serde(default = "defaults::method")]
    pub method: OdeMethod,
    /// Compare pushed moments with the Gaussian target `p1`.
    #[serde(default)]
    pub compare_target: bool,
    #[serde(default = "defaults::mean_rel_tol")]
    pub mean_rel_tol: f64,
    #[serde(default = "defaults::var_rel_tol")]
    pub var_rel_tol: f64,
}

impl PushSection {
    pub fn potential(&self) -> Result<ConvexPotential> {
        match (&self.potential, &self.potential_file) {
            (Some(p), None) => Ok(p.clone()),
            (None, Some(path)) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("cannot read potential {}", path.display()))?;
                Ok(serde_json::from_str(&text)
                    .with_context(|| format!("invalid potential {}", path.display()))?)
            }
            _ => bail!("push needs exactly one of `potential` or `potential_file`"),
        }
    }
}

mod defaults {
    pub fn n_samples() -> usize {
        100_000
    }
    pub fn sigma_multiplier() -> f64 {
        4.0
    }
    pub fn conj_tol() -> f64 {
        1e-10
    }
    pub fn conj_max_iters() -> usize {
        500
    }
    pub fn linear_shape() -> super::PathShapeJson {
        super::PathShapeJson::Linear
    }
    pub fn points_per_potential() -> usize {
        50
    }
    pub fn t_range() -> [f64; 2] {
        [0.05, 0.95]
    }
    pub fn analytic_tol() -> f64 {
        1e-9
    }
    pub fn fd_tol() -> f64 {
        1e-3
    }
    pub fn theorem_potentials() -> usize {
        10
    }
    pub fn ofm_potentials() -> usize {
        3
    }
    pub fn yes() -> bool {
        true
    }
    pub fn step_size() -> f64 {
        0.05
    }
    pub fn max_epochs() -> usize {
        500
    }
    pub fn batch() -> usize {
        4096
    }
    pub fn grad_tol() -> f64 {
        1e-3
    }
    pub fn map_rel_tol() -> f64 {
        0.02
    }
    pub fn shift_tol() -> f64 {
        0.05
    }
    pub fn w2_rel_tol() -> f64 {
        0.02
    }
    pub fn eval_n() -> usize {
        100_000
    }
    pub fn steps() -> usize {
        10
    }
    pub fn method() -> optfield::optimal_fields::OdeMethod {
        optfield::optimal_fields::OdeMethod::Rk4
    }
    pub fn mean_rel_tol() -> f64 {
        0.03
    }
    pub fn var_rel_tol() -> f64 {
        0.05
    }
}

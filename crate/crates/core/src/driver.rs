//! Quasi-static load stepping over the decomposed domain: train, update the
//! strain history, refine, retrain, and record observables.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autodiff::{DerivativeOrder, JetTape, Objective};
use crate::error::{Error, Result};
use crate::mesh::{distance_to_segment, BoundingBox, Hole, Mesh, MeshRow, PartitionSpec, RefineReport, RefineSettings, Slit, Tensor2};
use crate::network::{init_xavier, Activation, AnsatzKind, BcAnsatz, NetworkParams};
use crate::optimize::{minimize, OptimizerConfig, Termination, TraceEntry};
use crate::physics::{
    degraded_stress, evaluate_with, history_init, history_update, split_energy, total_loss,
    BodyForce, HistorySeed, LossTerms, MaterialModel, PenaltyWeights, PhaseFieldOrder,
    PointFields,
};

/// Number of points of the 1D error-evaluation grid.
pub const ERROR_GRID_POINTS: usize = 2001;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Bar1d,
    SenTension,
    EccentricHole,
}

impl Preset {
    pub fn ansatz(self) -> AnsatzKind {
        match self {
            Preset::Bar1d => AnsatzKind::Bar1d,
            Preset::SenTension => AnsatzKind::SenTension,
            Preset::EccentricHole => AnsatzKind::EccentricHole,
        }
    }

    pub fn dim(self) -> usize {
        self.ansatz().dim()
    }
}

impl std::fmt::Display for Preset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Preset::Bar1d => "bar1d",
            Preset::SenTension => "sen_tension",
            Preset::EccentricHole => "eccentric_hole",
        })
    }
}

/// Subdomain boxes and per-subdomain discretization.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub boxes: Vec<BoundingBox>,
    pub elements: Vec<usize>,
    pub gauss: Vec<usize>,
    pub interface_points: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub scale: f64,
    /// Factor on the raw displacement outputs before the boundary ansatz.
    pub output_scale: f64,
    /// When false the activation slopes keep their initial value `1/scale`.
    pub trainable_slopes: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedAt {
    /// Distance is measured to the crack tip (`end`).
    Tip,
    /// Distance is measured to the whole segment.
    Segment,
}

/// Pre-existing crack: a segment used for the history seed and, optionally,
/// as a slit that removes interface coupling across it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CrackSpec {
    pub start: [f64; 2],
    pub end: [f64; 2],
    pub seed_at: SeedAt,
    pub slit: bool,
}

impl CrackSpec {
    pub fn distance(&self, x: &[f64]) -> f64 {
        match self.seed_at {
            SeedAt::Tip => (x[0] - self.end[0]).hypot(x[1] - self.end[1]),
            SeedAt::Segment => distance_to_segment(x, &self.start, &self.end),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefinementSpec {
    pub enabled: bool,
    pub phi_threshold: f64,
    pub rho: f64,
    pub max_level: u32,
    /// Refine-and-retrain cycles per load step, 1 to 3.
    pub cycles: usize,
    /// Gauss order per subdomain applied at the first refinement.
    pub final_gauss: Option<Vec<usize>>,
    pub point_budget: Option<Vec<usize>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Edge {
    Left,
    Right,
    Bottom,
    Top,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProblemSpec {
    pub preset: Preset,
    pub material: MaterialModel,
    pub layout: Layout,
    pub hole: Option<Hole>,
    pub crack: Option<CrackSpec>,
    pub history_seed: HistorySeed,
    /// Whether the history is updated after each load step.
    pub update_history: bool,
    pub body_force: BodyForce,
    pub network: NetworkSpec,
    /// Displacement increment per step, mm.
    pub delta_u: f64,
    pub n_steps: usize,
    pub refinement: RefinementSpec,
    pub penalties: PenaltyWeights,
    pub regularization: f64,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    pub reaction_edge: Edge,
}

fn square_grid(xs: &[f64], ys: &[f64]) -> Vec<BoundingBox> {
    let mut out = Vec::new();
    for j in 0..ys.len() - 1 {
        for i in 0..xs.len() - 1 {
            out.push(BoundingBox::new([xs[i], ys[j]], [xs[i + 1], ys[j + 1]]));
        }
    }
    out
}

impl ProblemSpec {
    /// Default problem for a preset and subdomain count.
    pub fn preset(preset: Preset, n_subdomains: usize) -> Result<ProblemSpec> {
        let bad = || {
            Error::validation(
                "subdomains",
                format!("{n_subdomains} subdomains are not available for preset {preset}"),
            )
        };
        let optimizer = OptimizerConfig::default();
        let optimizer_2d = OptimizerConfig {
            warmup_steps: 300,
            lbfgs_max_iters: 600,
            ..optimizer
        };
        match preset {
            Preset::Bar1d => {
                let (boxes, elements, refinement) = match n_subdomains {
                    2 => (
                        vec![BoundingBox::interval(-1.0, 0.0), BoundingBox::interval(0.0, 1.0)],
                        vec![400, 400],
                        RefinementSpec {
                            enabled: false,
                            phi_threshold: 0.5,
                            rho: 0.3,
                            max_level: 4,
                            cycles: 1,
                            final_gauss: None,
                            point_budget: None,
                        },
                    ),
                    4 => (
                        vec![
                            BoundingBox::interval(-1.0, -0.5),
                            BoundingBox::interval(-0.5, 0.0),
                            BoundingBox::interval(0.0, 0.5),
                            BoundingBox::interval(0.5, 1.0),
                        ],
                        vec![50, 125, 125, 50],
                        RefinementSpec {
                            enabled: true,
                            phi_threshold: 0.2,
                            rho: 0.5,
                            max_level: 7,
                            cycles: 3,
                            final_gauss: Some(vec![5, 2, 2, 5]),
                            point_budget: Some(vec![250, 600, 600, 250]),
                        },
                    ),
                    _ => return Err(bad()),
                };
                let n = boxes.len();
                Ok(ProblemSpec {
                    preset,
                    material: MaterialModel {
                        lambda: 0.0,
                        mu: 0.5,
                        gc: 1.0,
                        l0: 1.0 / 80.0,
                        order: PhaseFieldOrder::Fourth,
                    },
                    layout: Layout {
                        boxes,
                        elements,
                        gauss: vec![2; n],
                        interface_points: vec![1; n],
                    },
                    hole: None,
                    crack: Some(CrackSpec {
                        start: [0.0, 0.0],
                        end: [0.0, 0.0],
                        seed_at: SeedAt::Segment,
                        slit: false,
                    }),
                    history_seed: HistorySeed::Step { magnitude: 1000.0 },
                    update_history: false,
                    body_force: BodyForce::SineX { amplitude: 1.0 },
                    network: NetworkSpec {
                        hidden: vec![10, 10, 10],
                        activation: Activation::Tanh,
                        scale: 10.0,
                        output_scale: 1.0,
                        trainable_slopes: true,
                    },
                    delta_u: 0.0,
                    n_steps: 1,
                    refinement,
                    penalties: PenaltyWeights {
                        displacement: 1e3,
                        phase_field: 1e3,
                    },
                    regularization: 0.0,
                    optimizer: OptimizerConfig {
                        warmup_steps: 5000,
                        adam_lr: 1e-3,
                        lbfgs_max_iters: 10000,
                        ..optimizer
                    },
                    seed: 1234,
                    reaction_edge: Edge::Right,
                })
            }
            Preset::SenTension => {
                let (boxes, elements, iface) = match n_subdomains {
                    4 => (square_grid(&[0.0, 0.5, 1.0], &[0.0, 0.5, 1.0]), vec![11; 4], 1600),
                    8 => (
                        square_grid(&[0.0, 0.5, 1.0], &[0.0, 0.25, 0.5, 0.75, 1.0]),
                        vec![9, 9, 16, 16, 16, 16, 9, 9],
                        1000,
                    ),
                    12 => (
                        square_grid(&[0.0, 0.5, 0.75, 1.0], &[0.0, 0.25, 0.5, 0.75, 1.0]),
                        vec![6, 6, 6, 8, 14, 14, 8, 14, 14, 6, 6, 6],
                        800,
                    ),
                    _ => return Err(bad()),
                };
                let n = boxes.len();
                Ok(ProblemSpec {
                    preset,
                    material: MaterialModel {
                        lambda: 121.15,
                        mu: 80.77,
                        gc: 2.7e-3,
                        l0: 0.0125,
                        order: PhaseFieldOrder::Fourth,
                    },
                    layout: Layout {
                        boxes,
                        elements,
                        gauss: vec![2; n],
                        interface_points: vec![iface; n],
                    },
                    hole: None,
                    crack: Some(CrackSpec {
                        start: [0.0, 0.5],
                        end: [0.5, 0.5],
                        seed_at: SeedAt::Tip,
                        slit: true,
                    }),
                    history_seed: HistorySeed::Linear { b: 1e3 },
                    update_history: true,
                    body_force: BodyForce::None,
                    network: NetworkSpec {
                        hidden: vec![20, 20, 20],
                        activation: Activation::Tanh,
                        scale: 1.0,
                        output_scale: 1e-2,
                        trainable_slopes: true,
                    },
                    delta_u: 1e-3,
                    n_steps: 10,
                    refinement: RefinementSpec {
                        enabled: true,
                        phi_threshold: 0.5,
                        rho: 0.1,
                        max_level: 2,
                        cycles: 1,
                        final_gauss: None,
                        point_budget: None,
                    },
                    penalties: PenaltyWeights {
                        displacement: 1e4,
                        phase_field: 1.0,
                    },
                    regularization: 0.0,
                    optimizer: optimizer_2d,
                    seed: 1234,
                    reaction_edge: Edge::Top,
                })
            }
            Preset::EccentricHole => {
                let (boxes, elements) = match n_subdomains {
                    4 => (square_grid(&[0.0, 0.5, 1.0], &[0.0, 0.5, 1.0]), vec![12; 4]),
                    8 => (
                        square_grid(&[0.0, 0.5, 1.0], &[0.0, 0.25, 0.5, 0.75, 1.0]),
                        vec![8, 8, 8, 8, 14, 14, 14, 14],
                    ),
                    _ => return Err(bad()),
                };
                let n = boxes.len();
                let iface = if n == 4 { 1600 } else { 1000 };
                Ok(ProblemSpec {
                    preset,
                    material: MaterialModel {
                        lambda: 121.154,
                        mu: 80.77,
                        gc: 2.7e-3,
                        l0: 0.02,
                        order: PhaseFieldOrder::Fourth,
                    },
                    layout: Layout {
                        boxes,
                        elements,
                        gauss: vec![2; n],
                        interface_points: vec![iface; n],
                    },
                    hole: Some(Hole {
                        center: [0.6, 0.7],
                        radius: 0.15,
                    }),
                    crack: None,
                    history_seed: HistorySeed::None,
                    update_history: true,
                    body_force: BodyForce::None,
                    network: NetworkSpec {
                        hidden: vec![20, 20, 20],
                        activation: Activation::Swish,
                        scale: 1.0,
                        output_scale: 1e-2,
                        trainable_slopes: true,
                    },
                    delta_u: 1e-3,
                    n_steps: 10,
                    refinement: RefinementSpec {
                        enabled: true,
                        phi_threshold: 0.5,
                        rho: 0.1,
                        max_level: 2,
                        cycles: 1,
                        final_gauss: None,
                        point_budget: None,
                    },
                    penalties: PenaltyWeights {
                        displacement: 1e4,
                        phase_field: 1.0,
                    },
                    regularization: 0.0,
                    optimizer: optimizer_2d,
                    seed: 1234,
                    reaction_edge: Edge::Top,
                })
            }
        }
    }

    pub fn dim(&self) -> usize {
        self.preset.dim()
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let d = self.dim();
        let mut s = vec![d];
        s.extend(&self.network.hidden);
        s.push(d + 1);
        s
    }

    /// Checks every invariant that can be checked before any computation.
    pub fn validate(&self) -> Result<()> {
        self.material.validate()?;
        self.optimizer.validate()?;
        let n = self.layout.boxes.len();
        if n == 0 {
            return Err(Error::validation("layout.boxes", "at least one subdomain is required"));
        }
        for (field, len) in [
            ("layout.elements", self.layout.elements.len()),
            ("layout.gauss", self.layout.gauss.len()),
            ("layout.interface_points", self.layout.interface_points.len()),
        ] {
            if len != n {
                return Err(Error::validation(field, format!("expected {n} entries, got {len}")));
            }
        }
        if self.layout.elements.contains(&0) {
            return Err(Error::validation("layout.elements", "must be positive"));
        }
        if self.layout.gauss.iter().any(|&g| g == 0 || g > 64) {
            return Err(Error::validation("layout.gauss", "must lie in 1..=64"));
        }
        if self.dim() == 2 {
            if !(self.delta_u > 0.0 && self.delta_u.is_finite()) {
                return Err(Error::validation("delta_u", "must be positive for 2D presets"));
            }
        } else if self.n_steps != 1 {
            return Err(Error::validation("n_steps", "the 1D bar is static: exactly one step"));
        }
        if self.network.hidden.is_empty() || self.network.hidden.contains(&0) {
            return Err(Error::validation("network.hidden", "need at least one positive hidden width"));
        }
        if !(self.network.scale >= 1.0 && self.network.scale.is_finite()) {
            return Err(Error::validation("network.scale", "must be at least 1"));
        }
        if !(self.network.output_scale > 0.0 && self.network.output_scale.is_finite()) {
            return Err(Error::validation("network.output_scale", "must be positive"));
        }
        let r = &self.refinement;
        if !(0.0..=1.0).contains(&r.phi_threshold) {
            return Err(Error::validation("refinement.phi_threshold", "must lie in [0, 1]"));
        }
        if !(r.rho > 0.0 && r.rho <= 1.0) {
            return Err(Error::validation("refinement.rho", "must lie in (0, 1]"));
        }
        if !(1..=3).contains(&r.cycles) {
            return Err(Error::validation("refinement.cycles", "must lie in 1..=3"));
        }
        for (field, v) in [
            ("refinement.final_gauss", &r.final_gauss),
            ("refinement.point_budget", &r.point_budget),
        ] {
            if let Some(v) = v {
                if v.len() != n {
                    return Err(Error::validation(field, format!("expected {n} entries")));
                }
            }
        }
        if !(self.penalties.displacement >= 0.0 && self.penalties.phase_field >= 0.0) {
            return Err(Error::validation("penalties", "must be non-negative"));
        }
        if !(self.regularization >= 0.0) {
            return Err(Error::validation("regularization", "must be non-negative"));
        }
        if let Some(h) = &self.hole {
            if !(h.radius > 0.0) {
                return Err(Error::validation("hole.radius", "must be positive"));
            }
        }
        Ok(())
    }

    pub fn partition_spec(&self) -> PartitionSpec {
        PartitionSpec {
            dim: self.dim(),
            boxes: self.layout.boxes.clone(),
            elements: self.layout.elements.clone(),
            gauss: self.layout.gauss.clone(),
            interface_points: self.layout.interface_points.clone(),
            hole: self.hole,
            slit: self.crack.filter(|c| c.slit).map(|c| Slit {
                start: c.start,
                end: c.end,
            }),
        }
    }

    /// Initial history at `x`.
    pub fn initial_history(&self, x: &[f64]) -> f64 {
        match &self.crack {
            Some(c) => history_init(c.distance(x), self.history_seed, &self.material),
            None => 0.0,
        }
    }
}

/// `(u_ex, phi_ex)` of the cracked bar under `f = sin(pi x)`.
pub fn exact_bar_solution(x: f64, l0: f64) -> (f64, f64) {
    let s = (PI * x).sin() / (PI * PI);
    let u = if x < 0.0 {
        s - (1.0 + x) / PI
    } else {
        s + (1.0 - x) / PI
    };
    (u, (-x.abs() / l0).exp())
}

/// `100 |pred - exact| / |exact|` in percent.
pub fn relative_l2(pred: &[f64], exact: &[f64]) -> Result<f64> {
    if pred.len() != exact.len() {
        return Err(Error::InputShape {
            expected: exact.len(),
            got: pred.len(),
        });
    }
    let norm: f64 = exact.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 0.0) {
        return Err(Error::UndefinedMetric("exact samples have zero norm".into()));
    }
    let diff: f64 = pred
        .iter()
        .zip(exact)
        .map(|(p, e)| (p - e) * (p - e))
        .sum::<f64>()
        .sqrt();
    Ok(100.0 * diff / norm)
}

/// Uniform grid: `n` points on the 1D domain or `n x n` points (row-major,
/// `y` outer) on the 2D bounding box.
pub fn uniform_grid(domain: &BoundingBox, dim: usize, n: usize) -> Vec<[f64; 2]> {
    let lin = |k: usize, i: usize| {
        if n == 1 {
            domain.min[k]
        } else {
            domain.min[k] + domain.extent(k) * i as f64 / (n - 1) as f64
        }
    };
    if dim == 1 {
        return (0..n).map(|i| [lin(0, i), 0.0]).collect();
    }
    let mut out = Vec::with_capacity(n * n);
    for j in 0..n {
        for i in 0..n {
            out.push([lin(0, i), lin(1, j)]);
        }
    }
    out
}

/// Field values at one grid point: `x, y, u, v, phi`.
pub type FieldSample = [f64; 5];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HistoryRecord {
    pub element_id: usize,
    pub x: [f64; 2],
    pub point: usize,
    pub value: f64,
}

/// One training round: the initial round of a step or a retrain after refinement.
#[derive(Clone, Debug)]
pub struct TrainingRound {
    pub trace: Vec<TraceEntry>,
    pub termination: Termination,
}

#[derive(Clone, Debug)]
pub struct StepResult {
    pub step: usize,
    pub applied: f64,
    pub loss: f64,
    pub rounds: Vec<TrainingRound>,
    pub fields: Vec<FieldSample>,
    pub force: f64,
    /// Relative L2 errors `(u, phi)` in percent (1D only).
    pub errors: Option<(f64, f64)>,
    pub point_counts: Vec<usize>,
    pub element_count: usize,
    pub mesh: Vec<MeshRow>,
    pub refinements: Vec<RefineReport>,
    pub history: Vec<HistoryRecord>,
}

/// Results of a run; `error` is set when the run stopped early.
#[derive(Debug)]
pub struct RunOutcome {
    pub steps: Vec<StepResult>,
    pub networks: Vec<NetworkParams>,
    pub error: Option<Error>,
}

/// All networks flattened into one parameter vector for the optimizers.
pub struct SystemObjective<'a> {
    mesh: &'a Mesh,
    templates: &'a [NetworkParams],
    terms: LossTerms,
    regularization: f64,
    frozen: Vec<usize>,
    offsets: Vec<usize>,
}

impl<'a> SystemObjective<'a> {
    pub fn new(
        mesh: &'a Mesh,
        templates: &'a [NetworkParams],
        terms: LossTerms,
        regularization: f64,
        trainable_slopes: bool,
    ) -> Self {
        let mut offsets = vec![0];
        let mut frozen = Vec::new();
        for p in templates {
            let base = *offsets.last().unwrap();
            if !trainable_slopes {
                frozen.extend(p.slope_indices().into_iter().map(|i| base + i));
            }
            offsets.push(base + p.len());
        }
        Self {
            mesh,
            templates,
            terms,
            regularization,
            frozen,
            offsets,
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.templates.iter().flat_map(|p| p.values().iter().copied()).collect()
    }

    pub fn unflatten(&self, theta: &[f64]) -> Vec<NetworkParams> {
        self.templates
            .iter()
            .enumerate()
            .map(|(k, p)| {
                let mut q = p.clone();
                q.set_values(&theta[self.offsets[k]..self.offsets[k + 1]]);
                q
            })
            .collect()
    }
}

impl Objective for SystemObjective<'_> {
    fn dim(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    fn value(&self, theta: &[f64]) -> Result<f64> {
        let nets = self.unflatten(theta);
        Ok(total_loss(self.mesh, &nets, &self.terms, self.regularization, None)?.total)
    }

    fn value_and_gradient(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        let nets = self.unflatten(theta);
        let mut grads: Vec<Vec<f64>> = nets.iter().map(|p| vec![0.0; p.len()]).collect();
        let loss = total_loss(self.mesh, &nets, &self.terms, self.regularization, Some(&mut grads))?;
        let mut g: Vec<f64> = grads.into_iter().flatten().collect();
        for &i in &self.frozen {
            g[i] = 0.0;
        }
        Ok((loss.total, g))
    }
}

/// Solver state carried across load steps.
pub struct Solver {
    pub spec: ProblemSpec,
    pub mesh: Mesh,
    pub networks: Vec<NetworkParams>,
    pub applied: f64,
    /// Training rounds completed so far.
    pub rounds_trained: usize,
}

impl Solver {
    pub fn new(spec: ProblemSpec) -> Result<Self> {
        spec.validate()?;
        let mut mesh = Mesh::partition(&spec.partition_spec())?;
        for sub in &mut mesh.subdomains {
            for el in &mut sub.elements {
                for p in &mut el.points {
                    p.history = spec.initial_history(&p.x);
                }
            }
        }
        let sizes = spec.layer_sizes();
        let networks = (0..mesh.subdomains.len())
            .map(|s| {
                init_xavier(
                    &sizes,
                    spec.network.activation,
                    spec.network.scale,
                    spec.seed.wrapping_add(s as u64),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            spec,
            mesh,
            networks,
            applied: 0.0,
            rounds_trained: 0,
        })
    }

    pub fn terms(&self) -> LossTerms {
        LossTerms {
            material: self.spec.material,
            ansatz: BcAnsatz::new(self.spec.preset.ansatz(), self.applied)
                .with_scale(self.spec.network.output_scale),
            body_force: self.spec.body_force,
            penalties: self.spec.penalties,
        }
    }

    pub fn objective(&self) -> SystemObjective<'_> {
        SystemObjective::new(
            &self.mesh,
            &self.networks,
            self.terms(),
            self.spec.regularization,
            self.spec.network.trainable_slopes,
        )
    }

    pub fn loss(&self) -> Result<f64> {
        let obj = self.objective();
        obj.value(&obj.flatten())
    }

    /// Minimizes the total loss from the current parameters.
    pub fn train(&mut self) -> Result<TrainingRound> {
        let obj = self.objective();
        let theta0 = obj.flatten();
        let mut cfg = self.spec.optimizer;
        if cfg.warmup_once && self.rounds_trained > 0 {
            cfg.warmup_steps = 0;
        }
        let r = minimize(&obj, &theta0, &cfg);
        let nets = obj.unflatten(&r.theta);
        self.networks = nets;
        self.rounds_trained += 1;
        if r.termination == Termination::NumericalFailure {
            let what = r.failure.unwrap_or_else(|| "non-finite loss".into());
            return Err(Error::NumericalFailure {
                point: Vec::new(),
                what,
            });
        }
        Ok(TrainingRound {
            trace: r.trace,
            termination: r.termination,
        })
    }

    /// Constrained fields of subdomain `s`'s network at `x`.
    pub fn fields_at(&self, s: usize, x: &[f64], order: DerivativeOrder) -> Result<PointFields> {
        let p = &self.networks[self.mesh.subdomains[s].network];
        let mut tape = JetTape::new(p, order);
        evaluate_with(&mut tape, p, &self.terms().ansatz, x)
    }

    fn psi_plus_at(&self, s: usize, x: &[f64]) -> Result<f64> {
        let f = self.fields_at(s, x, DerivativeOrder::Gradient)?;
        let d = self.spec.dim();
        Ok(split_energy(&f.strain(d), d, &self.spec.material).psi_plus)
    }

    fn stress_at(&self, s: usize, x: &[f64]) -> Result<Tensor2> {
        let f = self.fields_at(s, x, DerivativeOrder::Gradient)?;
        let d = self.spec.dim();
        Ok(degraded_stress(&f.strain(d), f.phi, d, &self.spec.material))
    }

    /// `H <- max(H, psi+)` at every quadrature point.
    pub fn update_history(&mut self) -> Result<()> {
        let d = self.spec.dim();
        let ansatz = self.terms().ansatz;
        let material = self.spec.material;
        for sub in &mut self.mesh.subdomains {
            let p = &self.networks[sub.network];
            let mut tape = JetTape::new(p, DerivativeOrder::Gradient);
            for el in sub.elements.iter_mut().filter(|e| e.active) {
                for q in el.points.iter_mut().filter(|q| q.inside_domain) {
                    let f = evaluate_with(&mut tape, p, &ansatz, &q.x)?;
                    let psi = split_energy(&f.strain(d), d, &material).psi_plus;
                    if !psi.is_finite() {
                        return Err(Error::numerical(&q.x[..d], "non-finite strain energy"));
                    }
                    q.history = history_update(q.history, psi);
                }
            }
        }
        Ok(())
    }

    /// One refinement pass; the first pass also applies the configured
    /// final Gauss orders.
    pub fn refine(&mut self, first: bool) -> Result<(RefineReport, bool)> {
        let r = self.spec.refinement.clone();
        let settings = RefineSettings {
            phi_threshold: r.phi_threshold,
            rho: r.rho,
            max_level: r.max_level,
            point_budget: r.point_budget.clone(),
        };
        let failure = std::cell::RefCell::new(None);
        let note = |e: Error| {
            failure.borrow_mut().get_or_insert(e);
        };
        // with history updates off, H stays at its seed everywhere
        let history = |s: usize, x: &[f64]| {
            let seed = self.spec.initial_history(x);
            if !self.spec.update_history {
                return seed;
            }
            let psi = self.psi_plus_at(s, x).unwrap_or_else(|e| {
                note(e);
                0.0
            });
            let inherited = self.mesh.covering_history(s, x).unwrap_or(0.0);
            seed.max(psi).max(inherited)
        };
        let mut mesh = self.mesh.clone();
        let mut reordered = false;
        if first {
            if let Some(orders) = &r.final_gauss {
                for (s, &n) in orders.iter().enumerate() {
                    let before = mesh.subdomains[s].point_count();
                    mesh.set_gauss_order(s, n, &history);
                    reordered |= mesh.subdomains[s].point_count() != before;
                }
            }
        }
        let report = mesh.refine(
            &|s, x| {
                self.fields_at(s, x, DerivativeOrder::Value)
                    .map(|f| f.phi)
                    .unwrap_or_else(|e| {
                        note(e);
                        0.0
                    })
            },
            &|s, x| {
                self.stress_at(s, x).unwrap_or_else(|e| {
                    note(e);
                    [[0.0; 2]; 2]
                })
            },
            &history,
            &settings,
        );
        if let Some(e) = failure.into_inner() {
            return Err(e);
        }
        let changed = reordered || report.any_refined();
        self.mesh = mesh;
        Ok((report, changed))
    }

    /// Fields on the uniform export grid.
    pub fn sample_fields(&self, grid: usize) -> Result<Vec<FieldSample>> {
        let d = self.spec.dim();
        let pts = uniform_grid(&self.mesh.domain(), d, grid);
        let mut tapes: Vec<JetTape> = self
            .networks
            .iter()
            .map(|p| JetTape::new(p, DerivativeOrder::Value))
            .collect();
        let ansatz = self.terms().ansatz;
        pts.iter()
            .map(|x| {
                let s = self
                    .mesh
                    .locate(x)
                    .ok_or_else(|| Error::Geometry(format!("grid point {x:?} outside the domain")))?;
                let n = self.mesh.subdomains[s].network;
                let f = evaluate_with(&mut tapes[n], &self.networks[n], &ansatz, x)?;
                Ok([x[0], x[1], f.u[0], f.u[1], f.phi])
            })
            .collect()
    }

    /// Relative L2 errors of `(u, phi)` against the exact bar solution on the
    /// fixed 2001-point grid.
    pub fn bar_errors(&self) -> Result<(f64, f64)> {
        let fields = self.sample_fields(ERROR_GRID_POINTS)?;
        let l0 = self.spec.material.l0;
        let (mut up, mut ue, mut pp, mut pe) = (vec![], vec![], vec![], vec![]);
        for f in &fields {
            let (u, p) = exact_bar_solution(f[0], l0);
            up.push(f[2]);
            ue.push(u);
            pp.push(f[4]);
            pe.push(p);
        }
        Ok((relative_l2(&up, &ue)?, relative_l2(&pp, &pe)?))
    }

    pub fn edge_segment(&self, edge: Edge) -> ([f64; 2], [f64; 2]) {
        let b = self.mesh.domain();
        match edge {
            Edge::Left => ([b.min[0], b.min[1]], [b.min[0], b.max[1]]),
            Edge::Right => ([b.max[0], b.min[1]], [b.max[0], b.max[1]]),
            Edge::Bottom => ([b.min[0], b.min[1]], [b.max[0], b.min[1]]),
            Edge::Top => ([b.min[0], b.max[1]], [b.max[0], b.max[1]]),
        }
    }

    /// Normal traction integrated along a boundary segment.
    pub fn reaction_force(&self, start: [f64; 2], end: [f64; 2]) -> Result<f64> {
        reaction_force(&self.mesh, &|s, x| self.stress_at(s, x), start, end)
    }

    pub fn history_snapshot(&self) -> Vec<HistoryRecord> {
        let mut out = Vec::new();
        for sub in &self.mesh.subdomains {
            for el in sub.elements.iter().filter(|e| e.active) {
                for (i, q) in el.points.iter().enumerate() {
                    if q.inside_domain {
                        out.push(HistoryRecord {
                            element_id: el.id,
                            x: q.x,
                            point: i,
                            value: q.history,
                        });
                    }
                }
            }
        }
        out
    }

    /// Executes load step `k` (1-based).
    pub fn step(&mut self, k: usize, grid: usize) -> Result<StepResult> {
        self.applied = k as f64 * self.spec.delta_u;
        let mut rounds = vec![self.train()?];
        if self.spec.update_history {
            self.update_history()?;
        }
        let mut refinements = Vec::new();
        if self.spec.refinement.enabled {
            for cycle in 0..self.spec.refinement.cycles {
                let (report, changed) = self.refine(cycle == 0)?;
                refinements.push(report);
                if !changed {
                    break;
                }
                rounds.push(self.train()?);
            }
        }
        let loss = self.loss()?;
        let (a, b) = self.edge_segment(self.spec.reaction_edge);
        let force = self.reaction_force(a, b)?;
        let errors = if self.spec.preset == Preset::Bar1d {
            Some(self.bar_errors()?)
        } else {
            None
        };
        Ok(StepResult {
            step: k,
            applied: self.applied,
            loss,
            rounds,
            fields: self.sample_fields(grid)?,
            force,
            errors,
            point_counts: self.mesh.point_counts(),
            element_count: self.mesh.element_count(),
            mesh: self.mesh.snapshot(),
            refinements,
            history: self.history_snapshot(),
        })
    }
}

/// Line integral of `n . sigma n` along a straight boundary segment, with
/// 8-point Gauss rules on each piece owned by a different subdomain.
pub fn reaction_force(
    mesh: &Mesh,
    stress: &dyn Fn(usize, &[f64]) -> Result<Tensor2>,
    start: [f64; 2],
    end: [f64; 2],
) -> Result<f64> {
    let dom = mesh.domain();
    let tol = 1e-12;
    let dim = mesh.dim;
    if dim == 1 {
        let x = start[0];
        if (x - dom.min[0]).abs() >= tol && (x - dom.max[0]).abs() >= tol {
            return Err(Error::Geometry(format!("point {x} is not an end of the bar")));
        }
        let s = mesh.locate(&start).ok_or_else(|| Error::Geometry("edge outside domain".into()))?;
        return Ok(stress(s, &start)?[0][0]);
    }
    let on = |k: usize, v: f64| (v - dom.min[k]).abs() < tol || (v - dom.max[k]).abs() < tol;
    let (normal, along) = if (start[0] - end[0]).abs() < tol && on(0, start[0]) {
        let n = if (start[0] - dom.min[0]).abs() < tol { [-1.0, 0.0] } else { [1.0, 0.0] };
        (n, 1)
    } else if (start[1] - end[1]).abs() < tol && on(1, start[1]) {
        let n = if (start[1] - dom.min[1]).abs() < tol { [0.0, -1.0] } else { [0.0, 1.0] };
        (n, 0)
    } else {
        return Err(Error::Geometry(format!(
            "segment {start:?}-{end:?} is not on the domain boundary"
        )));
    };
    let (lo, hi) = (start[along].min(end[along]), start[along].max(end[along]));
    if lo < dom.min[along] - tol || hi > dom.max[along] + tol {
        return Err(Error::Geometry("segment leaves the domain boundary".into()));
    }
    // breakpoints at subdomain boundaries so every piece has one owner
    let mut cuts = vec![lo, hi];
    for s in &mesh.subdomains {
        for v in [s.bbox.min[along], s.bbox.max[along]] {
            if v > lo + tol && v < hi - tol {
                cuts.push(v);
            }
        }
    }
    cuts.sort_by(f64::total_cmp);
    cuts.dedup_by(|a, b| (*a - *b).abs() < tol);
    let (nodes, weights) = crate::mesh::gauss_legendre(8);
    let mut total = 0.0;
    for w in cuts.windows(2) {
        let (a, b) = (w[0], w[1]);
        let mid = {
            let mut m = start;
            m[along] = 0.5 * (a + b);
            m
        };
        let s = mesh
            .subdomains
            .iter()
            .position(|s| s.bbox.contains(&mid, 2))
            .ok_or_else(|| Error::Geometry("edge piece has no owning subdomain".into()))?;
        for (t, wt) in nodes.iter().zip(&weights) {
            let mut x = start;
            x[along] = a + 0.5 * (t + 1.0) * (b - a);
            let sig = stress(s, &x)?;
            let mut tn = 0.0;
            for i in 0..2 {
                for k in 0..2 {
                    tn += normal[i] * sig[i][k] * normal[k];
                }
            }
            total += 0.5 * (b - a) * wt * tn;
        }
    }
    Ok(total)
}

/// Runs all load steps; stops at the first failure and keeps completed steps.
pub fn run(spec: ProblemSpec, grid: usize) -> Result<RunOutcome> {
    let mut solver = Solver::new(spec)?;
    let mut steps = Vec::new();
    let mut error = None;
    for k in 1..=solver.spec.n_steps {
        match solver.step(k, grid) {
            Ok(r) => steps.push(r),
            Err(e) => {
                error = Some(e);
                break;
            }
        }
    }
    Ok(RunOutcome {
        steps,
        networks: solver.networks,
        error,
    })
}

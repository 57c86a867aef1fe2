//! Configuration files, subcommands and CSV export.
//!
//! A configuration is a TOML document. Only `preset` is required; every
//! other value falls back to the preset's defaults.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::autodiff::{fd_check_indices, Objective};
use crate::driver::{
    exact_bar_solution, run, uniform_grid, CrackSpec, Edge, Preset, ProblemSpec, RunOutcome,
    SeedAt, Solver, StepResult,
};
use crate::error::{Error, Result};
use crate::mesh::{BoundingBox, Hole};
use crate::network::Activation;
use crate::optimize::Warmup;
use crate::physics::{BodyForce, HistorySeed, PhaseFieldOrder};

/// A validated problem plus output settings.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub spec: ProblemSpec,
    pub subdomains: usize,
    pub output_dir: PathBuf,
    /// Points per axis of the exported field grid.
    pub grid: usize,
    pub verbosity: u8,
    pub checkpoints: bool,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    preset: Option<Preset>,
    subdomains: Option<usize>,
    seed: Option<u64>,
    output: Option<RawOutput>,
    material: Option<RawMaterial>,
    mesh: Option<RawMesh>,
    hole: Option<RawHole>,
    crack: Option<RawCrack>,
    history: Option<RawHistory>,
    body_force: Option<RawBodyForce>,
    network: Option<RawNetwork>,
    loading: Option<RawLoading>,
    refinement: Option<RawRefinement>,
    penalties: Option<RawPenalties>,
    optimizer: Option<RawOptimizer>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOutput {
    dir: Option<PathBuf>,
    grid: Option<usize>,
    verbosity: Option<u8>,
    checkpoints: Option<bool>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMaterial {
    lambda: Option<f64>,
    mu: Option<f64>,
    gc: Option<f64>,
    l0: Option<f64>,
    order: Option<u8>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMesh {
    /// `[xmin, xmax]` in 1D, `[xmin, ymin, xmax, ymax]` in 2D.
    boxes: Option<Vec<Vec<f64>>>,
    elements: Option<Vec<usize>>,
    gauss: Option<Vec<usize>>,
    interface_points: Option<Vec<usize>>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawHole {
    enabled: Option<bool>,
    center: Option<[f64; 2]>,
    radius: Option<f64>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCrack {
    enabled: Option<bool>,
    start: Option<[f64; 2]>,
    end: Option<[f64; 2]>,
    seed_at: Option<SeedAt>,
    slit: Option<bool>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawHistory {
    /// `none`, `step` or `linear`.
    kind: Option<String>,
    magnitude: Option<f64>,
    b: Option<f64>,
    update: Option<bool>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBodyForce {
    /// `none` or `sine_x`.
    kind: Option<String>,
    amplitude: Option<f64>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNetwork {
    hidden: Option<Vec<usize>>,
    activation: Option<Activation>,
    scale: Option<f64>,
    output_scale: Option<f64>,
    trainable_slopes: Option<bool>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLoading {
    delta_u: Option<f64>,
    n_steps: Option<usize>,
    reaction_edge: Option<Edge>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRefinement {
    enabled: Option<bool>,
    phi_threshold: Option<f64>,
    rho: Option<f64>,
    max_level: Option<u32>,
    cycles: Option<usize>,
    final_gauss: Option<Vec<usize>>,
    point_budget: Option<Vec<usize>>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPenalties {
    displacement: Option<f64>,
    phase_field: Option<f64>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOptimizer {
    warmup: Option<Warmup>,
    warmup_steps: Option<usize>,
    adam_lr: Option<f64>,
    sgd_lr: Option<f64>,
    lbfgs_max_iters: Option<usize>,
    lbfgs_memory: Option<usize>,
    grad_tol: Option<f64>,
    loss_tol: Option<f64>,
    warmup_once: Option<bool>,
    regularization: Option<f64>,
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

/// Parses and validates a configuration document.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| Error::Parse {
        line: e.span().map_or(0, |s| line_of(text, s.start)),
        message: e.message().to_string(),
    })?;
    let preset = raw
        .preset
        .ok_or_else(|| Error::validation("preset", "missing required key"))?;
    let subdomains = raw.subdomains.unwrap_or(4);
    let mut spec = ProblemSpec::preset(preset, subdomains)?;
    set(&mut spec.seed, raw.seed);
    let dim = preset.dim();

    if let Some(m) = raw.material {
        set(&mut spec.material.lambda, m.lambda);
        set(&mut spec.material.mu, m.mu);
        set(&mut spec.material.gc, m.gc);
        set(&mut spec.material.l0, m.l0);
        if let Some(o) = m.order {
            spec.material.order = PhaseFieldOrder::try_from(o)
                .map_err(|msg| Error::validation("material.order", msg))?;
        }
    }
    if let Some(m) = raw.mesh {
        if let Some(boxes) = m.boxes {
            spec.layout.boxes = boxes
                .iter()
                .map(|b| match (dim, b.as_slice()) {
                    (1, [a, c]) => Ok(BoundingBox::interval(*a, *c)),
                    (2, [x0, y0, x1, y1]) => Ok(BoundingBox::new([*x0, *y0], [*x1, *y1])),
                    _ => Err(Error::validation(
                        "mesh.boxes",
                        format!("each box needs {} numbers", 2 * dim),
                    )),
                })
                .collect::<Result<_>>()?;
        }
        set(&mut spec.layout.elements, m.elements);
        set(&mut spec.layout.gauss, m.gauss);
        set(&mut spec.layout.interface_points, m.interface_points);
    }
    if let Some(h) = raw.hole {
        if h.enabled == Some(false) {
            spec.hole = None;
        } else {
            let base = spec.hole.unwrap_or(Hole {
                center: [0.5, 0.5],
                radius: 0.1,
            });
            spec.hole = Some(Hole {
                center: h.center.unwrap_or(base.center),
                radius: h.radius.unwrap_or(base.radius),
            });
        }
    }
    if let Some(c) = raw.crack {
        if c.enabled == Some(false) {
            spec.crack = None;
        } else {
            let base = spec.crack.unwrap_or(CrackSpec {
                start: [0.0, 0.5],
                end: [0.5, 0.5],
                seed_at: SeedAt::Tip,
                slit: false,
            });
            spec.crack = Some(CrackSpec {
                start: c.start.unwrap_or(base.start),
                end: c.end.unwrap_or(base.end),
                seed_at: c.seed_at.unwrap_or(base.seed_at),
                slit: c.slit.unwrap_or(base.slit),
            });
        }
    }
    if let Some(h) = raw.history {
        let (mag, b) = match spec.history_seed {
            HistorySeed::Step { magnitude } => (magnitude, 1e3),
            HistorySeed::Linear { b } => (1e3, b),
            HistorySeed::None => (1e3, 1e3),
        };
        let kind = h.kind.as_deref().unwrap_or(match spec.history_seed {
            HistorySeed::None => "none",
            HistorySeed::Step { .. } => "step",
            HistorySeed::Linear { .. } => "linear",
        });
        spec.history_seed = match kind {
            "none" => HistorySeed::None,
            "step" => HistorySeed::Step {
                magnitude: h.magnitude.unwrap_or(mag),
            },
            "linear" => HistorySeed::Linear { b: h.b.unwrap_or(b) },
            other => {
                return Err(Error::validation(
                    "history.kind",
                    format!("expected none, step or linear, got `{other}`"),
                ))
            }
        };
        set(&mut spec.update_history, h.update);
    }
    if let Some(f) = raw.body_force {
        let amp = match spec.body_force {
            BodyForce::SineX { amplitude } => amplitude,
            BodyForce::None => 1.0,
        };
        let kind = f.kind.as_deref().unwrap_or(match spec.body_force {
            BodyForce::None => "none",
            BodyForce::SineX { .. } => "sine_x",
        });
        spec.body_force = match kind {
            "none" => BodyForce::None,
            "sine_x" => BodyForce::SineX {
                amplitude: f.amplitude.unwrap_or(amp),
            },
            other => {
                return Err(Error::validation(
                    "body_force.kind",
                    format!("expected none or sine_x, got `{other}`"),
                ))
            }
        };
    }
    if let Some(n) = raw.network {
        set(&mut spec.network.hidden, n.hidden);
        set(&mut spec.network.activation, n.activation);
        set(&mut spec.network.scale, n.scale);
        set(&mut spec.network.output_scale, n.output_scale);
        set(&mut spec.network.trainable_slopes, n.trainable_slopes);
    }
    if let Some(l) = raw.loading {
        set(&mut spec.delta_u, l.delta_u);
        set(&mut spec.n_steps, l.n_steps);
        set(&mut spec.reaction_edge, l.reaction_edge);
    }
    if let Some(r) = raw.refinement {
        let s = &mut spec.refinement;
        set(&mut s.enabled, r.enabled);
        set(&mut s.phi_threshold, r.phi_threshold);
        set(&mut s.rho, r.rho);
        set(&mut s.max_level, r.max_level);
        set(&mut s.cycles, r.cycles);
        // empty lists switch the schedule off
        if let Some(v) = r.final_gauss {
            s.final_gauss = (!v.is_empty()).then_some(v);
        }
        if let Some(v) = r.point_budget {
            s.point_budget = (!v.is_empty()).then_some(v);
        }
    }
    if let Some(p) = raw.penalties {
        set(&mut spec.penalties.displacement, p.displacement);
        set(&mut spec.penalties.phase_field, p.phase_field);
    }
    if let Some(o) = raw.optimizer {
        let c = &mut spec.optimizer;
        set(&mut c.warmup, o.warmup);
        set(&mut c.warmup_steps, o.warmup_steps);
        set(&mut c.adam_lr, o.adam_lr);
        set(&mut c.sgd_lr, o.sgd_lr);
        set(&mut c.lbfgs_max_iters, o.lbfgs_max_iters);
        set(&mut c.lbfgs_memory, o.lbfgs_memory);
        set(&mut c.grad_tol, o.grad_tol);
        set(&mut c.loss_tol, o.loss_tol);
        set(&mut c.warmup_once, o.warmup_once);
        set(&mut spec.regularization, o.regularization);
    }
    spec.validate()?;

    let out = raw.output.unwrap_or_default();
    let cfg = RunConfig {
        spec,
        subdomains,
        output_dir: out.dir.unwrap_or_else(|| PathBuf::from(format!("out/{preset}"))),
        grid: out.grid.unwrap_or(if dim == 1 { 2001 } else { 101 }),
        verbosity: out.verbosity.unwrap_or(1),
        checkpoints: out.checkpoints.unwrap_or(true),
    };
    if cfg.grid < 2 {
        return Err(Error::validation("output.grid", "need at least 2 points per axis"));
    }
    Ok(cfg)
}

/// Writes a configuration with every field spelled out.
pub fn config_to_toml(cfg: &RunConfig) -> String {
    let s = &cfg.spec;
    let dim = s.dim();
    let (kind, magnitude, b) = match s.history_seed {
        HistorySeed::None => ("none", None, None),
        HistorySeed::Step { magnitude } => ("step", Some(magnitude), None),
        HistorySeed::Linear { b } => ("linear", None, Some(b)),
    };
    let (force_kind, amplitude) = match s.body_force {
        BodyForce::None => ("none", None),
        BodyForce::SineX { amplitude } => ("sine_x", Some(amplitude)),
    };
    let raw = RawConfig {
        preset: Some(s.preset),
        subdomains: Some(cfg.subdomains),
        seed: Some(s.seed),
        output: Some(RawOutput {
            dir: Some(cfg.output_dir.clone()),
            grid: Some(cfg.grid),
            verbosity: Some(cfg.verbosity),
            checkpoints: Some(cfg.checkpoints),
        }),
        material: Some(RawMaterial {
            lambda: Some(s.material.lambda),
            mu: Some(s.material.mu),
            gc: Some(s.material.gc),
            l0: Some(s.material.l0),
            order: Some(s.material.order.into()),
        }),
        mesh: Some(RawMesh {
            boxes: Some(
                s.layout
                    .boxes
                    .iter()
                    .map(|b| {
                        if dim == 1 {
                            vec![b.min[0], b.max[0]]
                        } else {
                            vec![b.min[0], b.min[1], b.max[0], b.max[1]]
                        }
                    })
                    .collect(),
            ),
            elements: Some(s.layout.elements.clone()),
            gauss: Some(s.layout.gauss.clone()),
            interface_points: Some(s.layout.interface_points.clone()),
        }),
        hole: Some(match s.hole {
            Some(h) => RawHole {
                enabled: Some(true),
                center: Some(h.center),
                radius: Some(h.radius),
            },
            None => RawHole {
                enabled: Some(false),
                ..RawHole::default()
            },
        }),
        crack: Some(match s.crack {
            Some(c) => RawCrack {
                enabled: Some(true),
                start: Some(c.start),
                end: Some(c.end),
                seed_at: Some(c.seed_at),
                slit: Some(c.slit),
            },
            None => RawCrack {
                enabled: Some(false),
                ..RawCrack::default()
            },
        }),
        history: Some(RawHistory {
            kind: Some(kind.into()),
            magnitude,
            b,
            update: Some(s.update_history),
        }),
        body_force: Some(RawBodyForce {
            kind: Some(force_kind.into()),
            amplitude,
        }),
        network: Some(RawNetwork {
            hidden: Some(s.network.hidden.clone()),
            activation: Some(s.network.activation),
            scale: Some(s.network.scale),
            output_scale: Some(s.network.output_scale),
            trainable_slopes: Some(s.network.trainable_slopes),
        }),
        loading: Some(RawLoading {
            delta_u: Some(s.delta_u),
            n_steps: Some(s.n_steps),
            reaction_edge: Some(s.reaction_edge),
        }),
        refinement: Some(RawRefinement {
            enabled: Some(s.refinement.enabled),
            phi_threshold: Some(s.refinement.phi_threshold),
            rho: Some(s.refinement.rho),
            max_level: Some(s.refinement.max_level),
            cycles: Some(s.refinement.cycles),
            final_gauss: Some(s.refinement.final_gauss.clone().unwrap_or_default()),
            point_budget: Some(s.refinement.point_budget.clone().unwrap_or_default()),
        }),
        penalties: Some(RawPenalties {
            displacement: Some(s.penalties.displacement),
            phase_field: Some(s.penalties.phase_field),
        }),
        optimizer: Some(RawOptimizer {
            warmup: Some(s.optimizer.warmup),
            warmup_steps: Some(s.optimizer.warmup_steps),
            adam_lr: Some(s.optimizer.adam_lr),
            sgd_lr: Some(s.optimizer.sgd_lr),
            lbfgs_max_iters: Some(s.optimizer.lbfgs_max_iters),
            lbfgs_memory: Some(s.optimizer.lbfgs_memory),
            grad_tol: Some(s.optimizer.grad_tol),
            loss_tol: Some(s.optimizer.loss_tol),
            warmup_once: Some(s.optimizer.warmup_once),
            regularization: Some(s.regularization),
        }),
    };
    toml::to_string(&raw).expect("configuration is always serializable")
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

/// Seventeen significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

/// Writes `fields_<k>.csv`, `loss_<k>.csv`, `mesh_<k>.csv` per step and
/// `load_disp.csv` (plus `errors.csv` for the bar).
pub fn export_results(dir: &Path, dim: usize, steps: &[StepResult]) -> Result<()> {
    let mut load = String::from("step,u_applied,force\n");
    let mut errors = String::from("step,u_rel_l2,phi_rel_l2\n");
    for r in steps {
        let mut f = String::from(if dim == 1 { "x,u,phi\n" } else { "x,y,u,v,phi\n" });
        for s in &r.fields {
            if dim == 1 {
                let _ = writeln!(f, "{},{},{}", fmt_f64(s[0]), fmt_f64(s[2]), fmt_f64(s[4]));
            } else {
                let _ = writeln!(
                    f,
                    "{},{},{},{},{}",
                    fmt_f64(s[0]),
                    fmt_f64(s[1]),
                    fmt_f64(s[2]),
                    fmt_f64(s[3]),
                    fmt_f64(s[4])
                );
            }
        }
        write_file(&dir.join(format!("fields_{}.csv", r.step)), &f)?;

        let mut l = String::from("round,stage,iteration,loss,grad_norm\n");
        for (round, tr) in r.rounds.iter().enumerate() {
            for t in &tr.trace {
                let _ = writeln!(
                    l,
                    "{round},{},{},{},{}",
                    t.stage,
                    t.iteration,
                    fmt_f64(t.loss),
                    fmt_f64(t.grad_norm)
                );
            }
        }
        write_file(&dir.join(format!("loss_{}.csv", r.step)), &l)?;

        let mut m = String::from("element_id,subdomain_id,level,x_min,y_min,x_max,y_max,n_points\n");
        for row in &r.mesh {
            let _ = writeln!(
                m,
                "{},{},{},{},{},{},{},{}",
                row.element_id,
                row.subdomain_id,
                row.level,
                fmt_f64(row.bbox.min[0]),
                fmt_f64(row.bbox.min[1]),
                fmt_f64(row.bbox.max[0]),
                fmt_f64(row.bbox.max[1]),
                row.n_points
            );
        }
        write_file(&dir.join(format!("mesh_{}.csv", r.step)), &m)?;

        let _ = writeln!(load, "{},{},{}", r.step, fmt_f64(r.applied), fmt_f64(r.force));
        if let Some((eu, ep)) = r.errors {
            let _ = writeln!(errors, "{},{},{}", r.step, fmt_f64(eu), fmt_f64(ep));
        }
    }
    write_file(&dir.join("load_disp.csv"), &load)?;
    if dim == 1 {
        write_file(&dir.join("errors.csv"), &errors)?;
    }
    Ok(())
}

/// Closed-form bar solution on `n` uniform points of `[-1, 1]`.
pub fn exact_csv(n: usize, l0: f64) -> String {
    let mut out = String::from("x,u,phi\n");
    let dom = BoundingBox::interval(-1.0, 1.0);
    for x in uniform_grid(&dom, 1, n) {
        let (u, p) = exact_bar_solution(x[0], l0);
        let _ = writeln!(out, "{},{},{}", fmt_f64(x[0]), fmt_f64(u), fmt_f64(p));
    }
    out
}

const CONFIG_HELP: &str = "\
CONFIGURATION (TOML; only `preset` is required)
  preset = bar1d | sen_tension | eccentric_hole
  subdomains = 4          bar1d: 2|4, sen_tension: 4|8|12, eccentric_hole: 4|8
  seed = 1234
  [output]      dir = \"out/<preset>\", grid = 2001 (1D) / 101 (2D, per axis),
                verbosity = 1, checkpoints = true
  [material]    lambda, mu (kN/mm^2), gc (kN/mm), l0 (mm), order = 4 | 2
                bar1d: 0, 0.5, 1, 1/80; sen_tension: 121.15, 80.77, 2.7e-3, 0.0125;
                eccentric_hole: 121.154, 80.77, 2.7e-3, 0.02
  [mesh]        boxes = [[xmin, xmax], ..] (1D) or [[xmin, ymin, xmax, ymax], ..] (2D),
                elements (per axis), gauss (points per axis), interface_points
  [hole]        enabled, center, radius            eccentric_hole: (0.6, 0.7), 0.15
  [crack]       enabled, start, end, seed_at = tip | segment, slit
  [history]     kind = none | step | linear, magnitude (step), b (linear), update
  [body_force]  kind = none | sine_x, amplitude   bar1d: sine_x, 1
  [network]     hidden, activation = tanh | swish, scale, output_scale, trainable_slopes
  [loading]     delta_u (mm, 1e-3 for 2D), n_steps (1 for bar1d, 10 for 2D),
                reaction_edge = left | right | bottom | top
  [refinement]  enabled, phi_threshold, rho, max_level, cycles (1-3),
                final_gauss, point_budget (empty list = off)
  [penalties]   displacement, phase_field
  [optimizer]   warmup = adam | sgd, warmup_steps, adam_lr, sgd_lr (0.001, 0.09],
                lbfgs_max_iters, lbfgs_memory = 20, grad_tol, loss_tol,
                warmup_once, regularization = 0
Run `phasefield-xpinn validate-config FILE --print` to see every resolved default.

EXIT CODES
  0 success, 1 configuration/validation error, 2 I/O error, 3 numerical failure.
  The last line of output is `status=ok` or `status=error code=<code>`.";

#[derive(Debug, Parser)]
#[command(name = "phasefield-xpinn", version, about = "Domain-decomposed variational PINN solver for phase-field fracture", after_long_help = CONFIG_HELP)]
struct Cli {
    /// Worker threads for loss assembly (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run all load steps and write CSV results.
    Run {
        config: PathBuf,
        /// Overrides `output.dir`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Parse and validate a configuration.
    ValidateConfig {
        config: PathBuf,
        /// Print the fully resolved configuration.
        #[arg(long)]
        print: bool,
    },
    /// Compare the loss gradient with central finite differences at initialization.
    CheckGradients {
        config: PathBuf,
        #[arg(long, default_value_t = 1e-4)]
        step: f64,
        /// Check only this many evenly spaced parameters (default: all).
        #[arg(long)]
        params: Option<usize>,
    },
    /// Write the closed-form bar solution as CSV.
    ExportExact {
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 2001)]
        points: usize,
        #[arg(long, default_value_t = 1.0 / 80.0)]
        l0: f64,
    },
}

/// Entry point shared by the binary and tests; returns the exit code.
pub fn run_command<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            if code != 0 {
                println!("status=error code=usage");
            }
            return code;
        }
    };
    let result = match cli.threads {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build() {
            Ok(pool) => pool.install(|| dispatch(cli.command)),
            Err(e) => Err(Error::Configuration(format!("thread pool: {e}"))),
        },
        None => dispatch(cli.command),
    };
    match result {
        Ok(()) => {
            println!("status=ok");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            println!("status=error code={}", e.code());
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::ValidateConfig { config, print } => {
            let cfg = load_config(&config)?;
            if print {
                print!("{}", config_to_toml(&cfg));
            }
            Ok(())
        }
        Command::CheckGradients {
            config,
            step,
            params,
        } => {
            let cfg = load_config(&config)?;
            if !(step > 0.0) {
                return Err(Error::validation("step", "must be positive"));
            }
            let mut solver = Solver::new(cfg.spec.clone())?;
            solver.applied = cfg.spec.delta_u;
            let obj = solver.objective();
            let theta = obj.flatten();
            let n = obj.dim();
            let indices: Vec<usize> = match params {
                Some(k) if k > 0 && k < n => (0..k).map(|i| i * n / k).collect(),
                _ => (0..n).collect(),
            };
            let worst = fd_check_indices(&obj, &theta, step, &indices);
            println!("checked {} of {n} parameters", indices.len());
            println!("max relative discrepancy {worst:.3e}");
            if !worst.is_finite() {
                return Err(Error::NumericalFailure {
                    point: Vec::new(),
                    what: "gradient check produced a non-finite discrepancy".into(),
                });
            }
            Ok(())
        }
        Command::ExportExact {
            output,
            points,
            l0,
        } => {
            if points < 2 {
                return Err(Error::validation("points", "need at least 2"));
            }
            if !(l0 > 0.0) {
                return Err(Error::validation("l0", "must be positive"));
            }
            write_file(&output, &exact_csv(points, l0))
        }
        Command::Run { config, output } => {
            let mut cfg = load_config(&config)?;
            if let Some(o) = output {
                cfg.output_dir = o;
            }
            execute(&cfg)
        }
    }
}

/// Runs a configuration and writes every output file.
pub fn execute(cfg: &RunConfig) -> Result<()> {
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    // fail on unwritable directories before any compute
    let probe = dir.join(".write_test");
    fs::write(&probe, b"").map_err(|e| Error::io(&probe, e))?;
    let _ = fs::remove_file(&probe);
    write_file(&dir.join("config.toml"), &config_to_toml(cfg))?;

    let outcome: RunOutcome = run(cfg.spec.clone(), cfg.grid)?;
    if cfg.verbosity > 0 {
        for s in &outcome.steps {
            let err = s
                .errors
                .map(|(u, p)| format!(" err_u={u:.3}% err_phi={p:.3}%"))
                .unwrap_or_default();
            println!(
                "step {} u={:.4e} loss={:.6e} force={:.6e} points={}{err}",
                s.step,
                s.applied,
                s.loss,
                s.force,
                s.point_counts.iter().sum::<usize>()
            );
        }
    }
    export_results(dir, cfg.spec.dim(), &outcome.steps)?;
    if cfg.checkpoints && outcome.error.is_none() {
        for (k, p) in outcome.networks.iter().enumerate() {
            p.save(&dir.join(format!("network_{k}.txt")))?;
        }
    }
    match outcome.error {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

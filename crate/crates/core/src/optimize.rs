//! First-order warm-up (Adam or plain gradient descent) followed by L-BFGS
//! with backtracking Armijo line search.

use serde::{Deserialize, Serialize};

use crate::autodiff::Objective;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Warmup {
    Adam,
    Sgd,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub warmup: Warmup,
    pub warmup_steps: usize,
    pub adam_lr: f64,
    pub sgd_lr: f64,
    pub lbfgs_max_iters: usize,
    pub lbfgs_memory: usize,
    /// Stop once the gradient infinity norm falls below this.
    pub grad_tol: f64,
    /// Stop once the loss changes by less than this between iterations.
    pub loss_tol: f64,
    /// Run the warm-up only in a solver's first training round; later
    /// rounds go straight to L-BFGS from the previous optimum.
    #[serde(default)]
    pub warmup_once: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            warmup: Warmup::Adam,
            warmup_steps: 1000,
            adam_lr: 1e-3,
            sgd_lr: 0.01,
            lbfgs_max_iters: 500,
            lbfgs_memory: 20,
            grad_tol: 1e-9,
            loss_tol: 1e-12,
            warmup_once: false,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.adam_lr > 0.0 && self.adam_lr.is_finite()) {
            return Err(Error::validation("adam_lr", "must be positive"));
        }
        if !(self.sgd_lr > 0.001 && self.sgd_lr <= 0.09) {
            return Err(Error::validation("sgd_lr", "must lie in (0.001, 0.09]"));
        }
        if self.lbfgs_memory == 0 {
            return Err(Error::validation("lbfgs_memory", "must be positive"));
        }
        if !(self.grad_tol >= 0.0) || !(self.loss_tol >= 0.0) {
            return Err(Error::validation("tolerances", "must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Adam,
    Sgd,
    Lbfgs,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Adam => "adam",
            Stage::Sgd => "sgd",
            Stage::Lbfgs => "lbfgs",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceEntry {
    pub stage: Stage,
    pub iteration: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Termination {
    MaxIterations,
    GradientTolerance,
    LossTolerance,
    LineSearchFailed,
    /// A non-finite loss or gradient was met; the result holds the last good iterate.
    NumericalFailure,
}

#[derive(Clone, Debug)]
pub struct OptimizeResult {
    pub theta: Vec<f64>,
    pub loss: f64,
    pub trace: Vec<TraceEntry>,
    pub termination: Termination,
    /// Error behind a `NumericalFailure` termination.
    pub failure: Option<String>,
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn finite(v: f64, g: &[f64]) -> bool {
    v.is_finite() && g.iter().all(|x| x.is_finite())
}

/// Evaluation that turns both errors and non-finite output into `Err`.
fn eval<O: Objective + ?Sized>(obj: &O, theta: &[f64]) -> std::result::Result<(f64, Vec<f64>), String> {
    match obj.value_and_gradient(theta) {
        Ok((v, g)) if finite(v, &g) => Ok((v, g)),
        Ok(_) => Err("non-finite loss or gradient".into()),
        Err(e) => Err(e.to_string()),
    }
}

/// First-order warm-up stage: Adam (beta1 0.9, beta2 0.999, eps 1e-8) or plain
/// gradient descent, for `warmup_steps` iterations or until the loss change
/// drops below `loss_tol`.
pub fn warmup_minimize<O: Objective + ?Sized>(
    obj: &O,
    theta0: &[f64],
    cfg: &OptimizerConfig,
) -> OptimizeResult {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let stage = match cfg.warmup {
        Warmup::Adam => Stage::Adam,
        Warmup::Sgd => Stage::Sgd,
    };
    let mut theta = theta0.to_vec();
    let mut m = vec![0.0; theta.len()];
    let mut v = vec![0.0; theta.len()];
    let mut trace = Vec::new();
    let mut last: Option<f64> = None;
    let mut best = theta.clone();
    let mut best_loss = f64::NAN;
    for t in 1..=cfg.warmup_steps {
        let (loss, g) = match eval(obj, &theta) {
            Ok(r) => r,
            Err(msg) => {
                return OptimizeResult {
                    theta: best,
                    loss: best_loss,
                    trace,
                    termination: Termination::NumericalFailure,
                    failure: Some(msg),
                }
            }
        };
        trace.push(TraceEntry {
            stage,
            iteration: t - 1,
            loss,
            grad_norm: inf_norm(&g),
        });
        best.clone_from(&theta);
        best_loss = loss;
        if let Some(prev) = last {
            if (prev - loss).abs() < cfg.loss_tol {
                return OptimizeResult {
                    theta,
                    loss,
                    trace,
                    termination: Termination::LossTolerance,
                    failure: None,
                };
            }
        }
        last = Some(loss);
        match cfg.warmup {
            Warmup::Adam => {
                let c1 = 1.0 - b1.powi(t as i32);
                let c2 = 1.0 - b2.powi(t as i32);
                for i in 0..theta.len() {
                    m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                    v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                    theta[i] -= cfg.adam_lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                }
            }
            Warmup::Sgd => {
                for i in 0..theta.len() {
                    theta[i] -= cfg.sgd_lr * g[i];
                }
            }
        }
    }
    // loss at the final iterate
    match eval(obj, &theta) {
        Ok((loss, g)) => {
            trace.push(TraceEntry {
                stage,
                iteration: cfg.warmup_steps,
                loss,
                grad_norm: inf_norm(&g),
            });
            OptimizeResult {
                theta,
                loss,
                trace,
                termination: Termination::MaxIterations,
                failure: None,
            }
        }
        Err(msg) => OptimizeResult {
            theta: best,
            loss: best_loss,
            trace,
            termination: Termination::NumericalFailure,
            failure: Some(msg),
        },
    }
}

/// Limited-memory BFGS (two-loop recursion) with backtracking Armijo line
/// search: sufficient-decrease constant 1e-4, step halving, at most 50
/// reductions. Accepted steps never increase the loss.
pub fn lbfgs_minimize<O: Objective + ?Sized>(
    obj: &O,
    theta0: &[f64],
    cfg: &OptimizerConfig,
) -> OptimizeResult {
    const C1: f64 = 1e-4;
    const MAX_SHRINK: usize = 50;
    let mut theta = theta0.to_vec();
    let (mut f, mut g) = match eval(obj, &theta) {
        Ok(r) => r,
        Err(msg) => {
            return OptimizeResult {
                theta,
                loss: f64::NAN,
                trace: Vec::new(),
                termination: Termination::NumericalFailure,
                failure: Some(msg),
            }
        }
    };
    let mut trace = vec![TraceEntry {
        stage: Stage::Lbfgs,
        iteration: 0,
        loss: f,
        grad_norm: inf_norm(&g),
    }];
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut rho_hist: Vec<f64> = Vec::new();
    let done = |termination, theta, loss, trace, failure| OptimizeResult {
        theta,
        loss,
        trace,
        termination,
        failure,
    };

    for k in 1..=cfg.lbfgs_max_iters {
        if inf_norm(&g) < cfg.grad_tol {
            return done(Termination::GradientTolerance, theta, f, trace, None);
        }
        let mut d = two_loop(&g, &s_hist, &y_hist, &rho_hist);
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            s_hist.clear();
            y_hist.clear();
            rho_hist.clear();
            d = g.iter().map(|v| -v).collect();
            slope = dot(&g, &d);
        }
        let mut alpha = if s_hist.is_empty() {
            (1.0 / inf_norm(&g)).min(1.0)
        } else {
            1.0
        };
        let mut accepted = None;
        let mut trial = theta.clone();
        for _ in 0..=MAX_SHRINK {
            for i in 0..theta.len() {
                trial[i] = theta[i] + alpha * d[i];
            }
            if let Ok((ft, gt)) = eval(obj, &trial) {
                if ft <= f + C1 * alpha * slope {
                    accepted = Some((ft, gt));
                    break;
                }
            }
            alpha *= 0.5;
        }
        let Some((f_new, g_new)) = accepted else {
            return done(Termination::LineSearchFailed, theta, f, trace, None);
        };
        let s: Vec<f64> = trial.iter().zip(&theta).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-10 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            if s_hist.len() == cfg.lbfgs_memory {
                s_hist.remove(0);
                y_hist.remove(0);
                rho_hist.remove(0);
            }
            s_hist.push(s);
            y_hist.push(y);
            rho_hist.push(1.0 / sy);
        }
        let change = (f - f_new).abs();
        theta = trial;
        f = f_new;
        g = g_new;
        trace.push(TraceEntry {
            stage: Stage::Lbfgs,
            iteration: k,
            loss: f,
            grad_norm: inf_norm(&g),
        });
        if change < cfg.loss_tol {
            return done(Termination::LossTolerance, theta, f, trace, None);
        }
    }
    let term = if inf_norm(&g) < cfg.grad_tol {
        Termination::GradientTolerance
    } else {
        Termination::MaxIterations
    };
    done(term, theta, f, trace, None)
}

/// `-H g` with the implicit inverse-Hessian approximation of the stored pairs.
fn two_loop(g: &[f64], s: &[Vec<f64>], y: &[Vec<f64>], rho: &[f64]) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut a = vec![0.0; s.len()];
    for i in (0..s.len()).rev() {
        a[i] = rho[i] * dot(&s[i], &q);
        for (qj, yj) in q.iter_mut().zip(&y[i]) {
            *qj -= a[i] * yj;
        }
    }
    if let Some(last) = s.len().checked_sub(1) {
        let gamma = dot(&s[last], &y[last]) / dot(&y[last], &y[last]);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for i in 0..s.len() {
        let b = rho[i] * dot(&y[i], &q);
        for (qj, sj) in q.iter_mut().zip(&s[i]) {
            *qj += (a[i] - b) * sj;
        }
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

/// Warm-up followed by L-BFGS. The combined trace keeps stage labels; the
/// L-BFGS stage is skipped if the warm-up failed numerically.
pub fn minimize<O: Objective + ?Sized>(
    obj: &O,
    theta0: &[f64],
    cfg: &OptimizerConfig,
) -> OptimizeResult {
    let warm = warmup_minimize(obj, theta0, cfg);
    if warm.termination == Termination::NumericalFailure || cfg.lbfgs_max_iters == 0 {
        return warm;
    }
    let mut out = lbfgs_minimize(obj, &warm.theta, cfg);
    let mut trace = warm.trace;
    trace.append(&mut out.trace);
    out.trace = trace;
    out
}

//! Iteratively regularized Gauss–Newton with decaying Tikhonov weight,
//! backtracking under the strong Wolfe conditions, and discrepancy stopping.
//!
//! The cost at iteration `k` is
//! `J(x) = ½‖Θ(x) − g‖² + ½ α_k (x − x*)ᵀ L (x − x*)`,
//! where `x*` is the reference (background) state.

use log::{debug, info, warn};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problem::{BoxBounds, InverseModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IrgnConfig {
    pub alpha0: f64,
    /// α_k = α₀ / decay^k.
    pub decay: f64,
    /// Discrepancy factor ρ > 1.
    pub rho: f64,
    pub s_min: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub max_iterations: usize,
    pub max_backtracks: usize,
    /// Replaces the realized noise norm ξ when set.
    pub xi_override: Option<f64>,
}

impl Default for IrgnConfig {
    fn default() -> Self {
        IrgnConfig {
            alpha0: 1e-2,
            decay: 1.5,
            rho: 1.5,
            s_min: 1e-3,
            gamma1: 1e-4,
            gamma2: 0.9,
            max_iterations: 200,
            max_backtracks: 20,
            xi_override: None,
        }
    }
}

impl IrgnConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.alpha0 > 0.0) {
            return bad(format!("alpha0 must be positive, got {}", self.alpha0));
        }
        // decay = 1 would keep α_k constant and violate α_k → 0.
        if !(self.decay > 1.0 && self.decay.is_finite()) {
            return bad(format!("decay must be finite and > 1, got {}", self.decay));
        }
        if !(self.rho > 1.0) {
            return bad(format!("rho must exceed 1, got {}", self.rho));
        }
        if !(self.s_min > 0.0 && self.s_min < 1.0) {
            return bad(format!("s_min must lie in (0, 1), got {}", self.s_min));
        }
        if !(0.0 < self.gamma1 && self.gamma1 < self.gamma2 && self.gamma2 < 1.0) {
            return bad(format!(
                "Wolfe constants need 0 < γ₁ < γ₂ < 1, got ({}, {})",
                self.gamma1, self.gamma2
            ));
        }
        if let Some(xi) = self.xi_override {
            if !(xi > 0.0) {
                return bad(format!("xi_override must be positive, got {xi}"));
            }
        }
        Ok(())
    }

    pub fn alpha(&self, k: usize) -> f64 {
        self.alpha0 / self.decay.powi(k as i32)
    }

    /// Trial step sizes 1, ½, ¼, … strictly above `s_min`, at most
    /// `max_backtracks + 1` of them.
    pub fn trial_steps(&self) -> Vec<f64> {
        let mut out = Vec::new();
        let mut s = 1.0;
        while s > self.s_min && out.len() <= self.max_backtracks {
            out.push(s);
            s *= 0.5;
        }
        out
    }
}

/// Solves `(JᵀJ + αL) p = −(Jᵀr + αL·q_dev)` by Cholesky.
pub fn search_direction(
    j: &DMatrix<f64>,
    r: &[f64],
    l: &DMatrix<f64>,
    alpha: f64,
    q_dev: &[f64],
) -> Result<DVector<f64>> {
    let n = j.ncols();
    if r.len() != j.nrows() {
        return Err(Error::Dimension {
            what: "residual",
            expected: j.nrows(),
            got: r.len(),
        });
    }
    if l.nrows() != n || l.ncols() != n || q_dev.len() != n {
        return Err(Error::Dimension {
            what: "regularization operator",
            expected: n,
            got: if q_dev.len() != n { q_dev.len() } else { l.nrows() },
        });
    }
    if !(alpha > 0.0) {
        return Err(Error::InvalidArgument(format!("α must be positive, got {alpha}")));
    }
    let r = DVector::from_column_slice(r);
    let q = DVector::from_column_slice(q_dev);
    let h = j.tr_mul(j) + l * alpha;
    let rhs = -(j.tr_mul(&r) + (l * q) * alpha);
    let chol = h
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Solver("Gauss–Newton matrix is not positive definite".into()))?;
    let mut p = chol.solve(&rhs);
    // one round of iterative refinement
    let res = &rhs - &h * &p;
    p += chol.solve(&res);
    let rel = (&rhs - &h * &p).norm() / rhs.norm().max(f64::MIN_POSITIVE);
    debug!("search direction relative residual {rel:.2e}");
    Ok(p)
}

/// Outcome of a backtracking search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineSearch {
    pub step: f64,
    /// Whether a Wolfe condition was met (false means fallback).
    pub satisfied: bool,
    pub trials: usize,
}

/// Backtracks over `trials` (decreasing) and returns the first step meeting
/// sufficient decrease or the curvature condition.
///
/// `phi(s)` is the cost at step `s`; `dphi(s)` is the directional derivative
/// there. `dphi0` is the directional derivative at `s = 0`. Trials where
/// `phi` fails or is non-finite are skipped. If `dphi0 ≥ 0` or no trial is
/// accepted, the smallest trial is returned.
pub fn wolfe_backtrack(
    phi: impl Fn(f64) -> Result<f64>,
    dphi: impl Fn(f64) -> Result<f64>,
    phi0: f64,
    dphi0: f64,
    trials: &[f64],
    gamma1: f64,
    gamma2: f64,
) -> LineSearch {
    let last = *trials.last().expect("at least one trial step");
    if !(dphi0 < 0.0) {
        warn!("not a descent direction (slope {dphi0:.3e}); taking step {last}");
        return LineSearch {
            step: last,
            satisfied: false,
            trials: 0,
        };
    }
    for (i, &s) in trials.iter().enumerate() {
        let value = match phi(s) {
            Ok(v) if v.is_finite() => v,
            Ok(_) | Err(_) => continue,
        };
        if value <= phi0 + gamma1 * s * dphi0 {
            return LineSearch {
                step: s,
                satisfied: true,
                trials: i + 1,
            };
        }
        if let Ok(slope) = dphi(s) {
            if slope.abs() <= (gamma2 * dphi0).abs() {
                return LineSearch {
                    step: s,
                    satisfied: true,
                    trials: i + 1,
                };
            }
        }
    }
    LineSearch {
        step: last,
        satisfied: false,
        trials: trials.len(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    Discrepancy,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IrgnReport {
    pub x: Vec<f64>,
    /// ‖Θ(x_k) − g‖ for k = 0..=K.
    pub residual_norms: Vec<f64>,
    /// α_k used at each iteration.
    pub alphas: Vec<f64>,
    pub steps: Vec<f64>,
    /// Whether each step met a Wolfe condition.
    pub wolfe_satisfied: Vec<bool>,
    pub termination: Termination,
    /// ρξ: the bound on the squared residual.
    pub threshold: f64,
}

impl IrgnReport {
    pub fn iterations(&self) -> usize {
        self.steps.len()
    }

    pub fn final_residual(&self) -> f64 {
        *self.residual_norms.last().expect("residual history is never empty")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,residual_norm,alpha,step\n");
        for (k, r) in self.residual_norms.iter().enumerate() {
            let (a, s) = match (self.alphas.get(k), self.steps.get(k)) {
                (Some(a), Some(s)) => (format!("{a:e}"), format!("{s}")),
                _ => (String::new(), String::new()),
            };
            out.push_str(&format!("{k},{r:e},{a},{s}\n"));
        }
        out
    }
}

/// Regularization operator with its reference state.
pub struct Tikhonov<'a> {
    pub operator: &'a DMatrix<f64>,
    pub reference: &'a [f64],
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Runs IRGN from `x0` until `‖Θ(x_K) − g‖² ≤ ρξ` or the iteration cap.
pub fn run_irgn(
    model: &dyn InverseModel,
    g: &[f64],
    xi: f64,
    cfg: &IrgnConfig,
    reg: &Tikhonov,
    bounds: &BoxBounds,
    x0: &[f64],
) -> Result<IrgnReport> {
    cfg.validate()?;
    let n = model.parameter_count();
    if x0.len() != n {
        return Err(Error::Dimension {
            what: "initial iterate",
            expected: n,
            got: x0.len(),
        });
    }
    if !bounds.contains(x0) {
        return Err(Error::Bounds("initial iterate outside the box".into()));
    }
    let xi = cfg.xi_override.unwrap_or(xi);
    if !(xi > 0.0) {
        return Err(Error::InvalidArgument(format!("noise bound ξ must be positive, got {xi}")));
    }
    let threshold = cfg.rho * xi;
    let lmat = reg.operator;
    let trials = cfg.trial_steps();

    let at = |k: usize| move |e: Error| Error::Iteration {
        iteration: k,
        source: Box::new(e),
    };

    let mut x = x0.to_vec();
    let mut report = IrgnReport {
        x: Vec::new(),
        residual_norms: Vec::new(),
        alphas: Vec::new(),
        steps: Vec::new(),
        wolfe_satisfied: Vec::new(),
        termination: Termination::MaxIterations,
        threshold,
    };
    let (mut theta, mut jac) = model.linearize(&x).map_err(at(0))?;
    for k in 0..=cfg.max_iterations {
        let r = sub(&theta, g);
        let rnorm = norm(&r);
        report.residual_norms.push(rnorm);
        info!("irgn k={k} ‖r‖={rnorm:.6e} ‖r‖²/ρξ={:.3e}", rnorm * rnorm / threshold);
        if rnorm * rnorm <= threshold {
            report.termination = Termination::Discrepancy;
            break;
        }
        if k == cfg.max_iterations {
            break;
        }
        let alpha = cfg.alpha(k);
        let dev = sub(&x, reg.reference);
        let p = search_direction(&jac, &r, lmat, alpha, &dev).map_err(at(k))?;
        let p = p.as_slice();

        let ldev = lmat * DVector::from_column_slice(&dev);
        let grad = (jac.tr_mul(&DVector::from_column_slice(&r)) + &ldev * alpha).data.as_vec().clone();
        let cost = |th: &[f64], xs: &[f64]| -> f64 {
            let rr = sub(th, g);
            let d = DVector::from_column_slice(&sub(xs, reg.reference));
            0.5 * dot(&rr, &rr) + 0.5 * alpha * d.dot(&(lmat * &d))
        };
        let phi0 = cost(&theta, &x);
        let trial_point = |s: f64| -> Vec<f64> {
            let mut xt: Vec<f64> = x.iter().zip(p).map(|(a, b)| a + s * b).collect();
            bounds.project(&mut xt);
            xt
        };
        let phi = |s: f64| -> Result<f64> {
            let xt = trial_point(s);
            Ok(cost(&model.evaluate(&xt)?, &xt))
        };
        let dphi = |s: f64| -> Result<f64> {
            let xt = trial_point(s);
            let (th, jt) = model.linearize(&xt)?;
            let rt = DVector::from_column_slice(&sub(&th, g));
            let d = DVector::from_column_slice(&sub(&xt, reg.reference));
            let gt = jt.tr_mul(&rt) + (lmat * d) * alpha;
            Ok(dot(gt.as_slice(), p))
        };
        let ls = wolfe_backtrack(phi, dphi, phi0, dot(&grad, p), &trials, cfg.gamma1, cfg.gamma2);
        debug!("irgn k={k} step={} trials={} wolfe={}", ls.step, ls.trials, ls.satisfied);

        x = trial_point(ls.step);
        report.alphas.push(alpha);
        report.steps.push(ls.step);
        report.wolfe_satisfied.push(ls.satisfied);
        (theta, jac) = model.linearize(&x).map_err(at(k + 1))?;
    }
    report.x = x;
    Ok(report)
}

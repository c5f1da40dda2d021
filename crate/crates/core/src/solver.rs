//! Classical linearized ADMM for
//! `min_f ½‖y_hs − H_hs f‖² + (λ1/2)‖y_ms − H_ms f‖² + λ2‖Ψf‖₁`
//! with `Ψ` the orthonormal 3D DCT.
//!
//! Each sweep takes one proximal-gradient step on `f` against the augmented Lagrangian
//! (`α` is the majorization constant), soft-thresholds `Ψf + d` with `λ̃ = λ2/ρ` to obtain `b`,
//! then accumulates the constraint residual into the scaled multiplier `d`.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cube_io::{FeatureCube, SpectralCube};
use crate::error::{ensure_dims, Error, Result};
use crate::operator::{Measurements, Operators};
use crate::transforms::{soft_threshold_scalar, Dct3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub alpha: f64,
    pub rho: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub max_iters: usize,
    pub tol: f64,
}

pub const DEFAULT_RHO: f64 = 0.1;
pub const DEFAULT_LAMBDA1: f64 = 1.0;
pub const DEFAULT_LAMBDA2: f64 = 1e-3;
pub const DEFAULT_MAX_ITERS: usize = 500;
pub const DEFAULT_TOL: f64 = 1e-6;
const POWER_ITERS: usize = 20;

impl SolverConfig {
    /// Defaults with `α = ‖H_hsᵀH_hs + λ1 H_msᵀH_ms‖ + ρ` estimated by power iteration.
    pub fn defaults_for(ops: &Operators) -> Result<Self> {
        Self::with_params(ops, DEFAULT_RHO, DEFAULT_LAMBDA1, DEFAULT_LAMBDA2)
    }

    pub fn with_params(ops: &Operators, rho: f64, lambda1: f64, lambda2: f64) -> Result<Self> {
        let alpha = auto_alpha(ops, rho, lambda1)?;
        let cfg = Self {
            alpha,
            rho,
            lambda1,
            lambda2,
            max_iters: DEFAULT_MAX_ITERS,
            tol: DEFAULT_TOL,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(format!("solver config: {what}")));
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be positive");
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return bad("rho must be positive");
        }
        if !(self.lambda1 >= 0.0) || !(self.lambda2 >= 0.0) {
            return bad("lambdas must be nonnegative");
        }
        if self.max_iters < 1 {
            return bad("max_iters must be at least 1");
        }
        if !(self.tol >= 0.0) {
            return bad("tol must be nonnegative");
        }
        Ok(())
    }

    /// Soft threshold `λ̃ = λ2/ρ`.
    pub fn soft_lambda(&self) -> f64 {
        self.lambda2 / self.rho
    }
}

/// Majorization constant for the linearized step.
pub fn auto_alpha(ops: &Operators, rho: f64, lambda1: f64) -> Result<f64> {
    Ok(ops.gram_norm_estimate(lambda1, POWER_ITERS)? + rho)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionState {
    pub f: SpectralCube,
    pub b: FeatureCube,
    pub d: FeatureCube,
    pub objective: f64,
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub f: SpectralCube,
    pub iterations: usize,
    /// objective after each sweep
    pub objective_trace: Vec<f64>,
}

impl SolveReport {
    /// CSV with header `iteration,objective`.
    pub fn write_trace_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path.as_ref())?;
        w.write_record(["iteration", "objective"])?;
        for (k, obj) in self.objective_trace.iter().enumerate() {
            w.write_record([(k + 1).to_string(), format!("{obj:.10e}")])?;
        }
        w.flush().map_err(|e| Error::io(path.as_ref(), e))
    }
}

/// Linearized ADMM bound to one set of operators, measurements and configuration.
pub struct Ladmm<'a> {
    ops: Operators<'a>,
    y: &'a Measurements,
    cfg: SolverConfig,
    psi: Dct3,
}

impl<'a> Ladmm<'a> {
    pub fn new(ops: Operators<'a>, y: &'a Measurements, cfg: SolverConfig) -> Result<Self> {
        cfg.validate()?;
        ops.check(y)?;
        let (m, n, l) = ops.dims();
        Ok(Self {
            ops,
            y,
            cfg,
            psi: Dct3::new(m, n, l),
        })
    }

    pub fn config(&self) -> &SolverConfig {
        &self.cfg
    }

    pub fn transform(&self) -> &Dct3 {
        &self.psi
    }

    fn check_shape(&self, f: &SpectralCube) -> Result<()> {
        ensure_dims!(
            f.dims() == self.ops.dims(),
            "iterate is {:?}, operators expect {:?}",
            f.dims(),
            self.ops.dims()
        );
        Ok(())
    }

    /// `½‖y_hs − H_hs f‖² + (λ1/2)‖y_ms − H_ms f‖² + λ2‖Ψf‖₁`
    pub fn objective(&self, f: &SpectralCube) -> Result<f64> {
        self.check_shape(f)?;
        let l1: f64 = self.psi.forward(f)?.data().iter().map(|v| v.abs()).sum();
        Ok(self.ops.data_misfit(f, self.y, self.cfg.lambda1)? + self.cfg.lambda2 * l1)
    }

    /// `f − (1/α)[H_hsᵀ(H_hs f − y_hs) + λ1 H_msᵀ(H_ms f − y_ms) + ρ Ψᵀ(Ψf − b + d)]`
    pub fn gradient_step(
        &self,
        f: &SpectralCube,
        b: &FeatureCube,
        d: &FeatureCube,
    ) -> Result<SpectralCube> {
        self.check_shape(f)?;
        ensure_dims!(
            b.same_shape(f) && d.same_shape(f),
            "auxiliary variables must match the iterate shape"
        );
        let (g_hs, g_ms) = self.ops.data_gradients(f, self.y)?;
        let mut coupling = self.psi.forward(f)?;
        coupling.axpy(-1.0, b);
        coupling.axpy(1.0, d);
        let coupling = self.psi.inverse(&coupling)?;

        let mut grad = g_hs;
        grad.axpy(self.cfg.lambda1, &g_ms);
        grad.axpy(self.cfg.rho, &coupling);
        let mut out = f.clone();
        out.axpy(-1.0 / self.cfg.alpha, &grad);
        Ok(out)
    }

    /// One full sweep: gradient step on `f`, soft-threshold for `b`, multiplier update for `d`.
    pub fn iterate(&self, state: &FusionState) -> Result<FusionState> {
        let f = self.gradient_step(&state.f, &state.b, &state.d)?;
        let psi_f = self.psi.forward(&f)?;
        let lam = self.cfg.soft_lambda();
        let mut b = psi_f.clone();
        b.data_mut()
            .iter_mut()
            .zip(state.d.data())
            .for_each(|(v, d)| *v = soft_threshold_scalar(*v + d, lam));
        let mut d = state.d.clone();
        d.axpy(1.0, &psi_f);
        d.axpy(-1.0, &b);
        let objective = self.objective(&f)?;
        Ok(FusionState { f, b, d, objective })
    }

    /// State with the given iterate, `b = 0`, `d = 0`.
    pub fn initial_state(&self, f: SpectralCube) -> Result<FusionState> {
        self.check_shape(&f)?;
        let objective = self.objective(&f)?;
        let (m, n, l) = f.dims();
        Ok(FusionState {
            f,
            b: SpectralCube::zeros(m, n, l),
            d: SpectralCube::zeros(m, n, l),
            objective,
        })
    }

    /// Runs from `f⁰ = ½H_msᵀy_ms + ½H_hsᵀy_hs`, `b⁰ = d⁰ = 0` until `max_iters` sweeps or the
    /// relative iterate change drops below `tol`.
    pub fn solve(&self) -> Result<SolveReport> {
        let f0 = self.ops.initial_estimate(self.y)?;
        let mut state = self.initial_state(f0)?;
        let mut trace = Vec::new();
        let mut iterations = 0;
        for k in 1..=self.cfg.max_iters {
            let next = self.iterate(&state)?;
            iterations = k;
            if !next.f.is_finite() || !next.objective.is_finite() {
                return Err(Error::Diverged { step: k });
            }
            trace.push(next.objective);
            let prev_norm = state.f.norm();
            let change = next.f.sub(&state.f).norm();
            state = next;
            let converged = if prev_norm > 0.0 {
                change / prev_norm < self.cfg.tol
            } else {
                change == 0.0
            };
            if converged {
                break;
            }
        }
        log::debug!("ladmm stopped after {iterations} sweeps");
        Ok(SolveReport {
            f: state.f,
            iterations,
            objective_trace: trace,
        })
    }
}

/// One-call solve with the given configuration.
pub fn ladmm_solve(ops: Operators, y: &Measurements, cfg: SolverConfig) -> Result<SpectralCube> {
    Ok(Ladmm::new(ops, y, cfg)?.solve()?.f)
}

/// Writes a solver config as JSON.
pub fn write_config(cfg: &SolverConfig, mut w: impl Write) -> Result<()> {
    serde_json::to_writer_pretty(&mut w, cfg)?;
    Ok(())
}

//! Matrix-free linear operators acting on vectorized cubes.

use crate::cube_io::SpectralCube;
use crate::error::{ensure_dims, Result};

/// A linear map from an `rows × cols × bands` cube (flattened in cube order) to a measurement vector.
pub trait LinearOperator: Send + Sync {
    /// Dimensions of the cube the operator acts on.
    fn input_dims(&self) -> (usize, usize, usize);

    fn output_len(&self) -> usize;

    /// `out = H x`
    fn apply(&self, x: &[f64], out: &mut [f64]);

    /// `out = Hᵀ y`
    fn apply_adjoint(&self, y: &[f64], out: &mut [f64]);

    fn input_len(&self) -> usize {
        let (m, n, l) = self.input_dims();
        m * n * l
    }

    fn forward_vec(&self, x: &SpectralCube) -> Result<Vec<f64>> {
        ensure_dims!(
            x.dims() == self.input_dims(),
            "operator expects {:?}, cube is {:?}",
            self.input_dims(),
            x.dims()
        );
        let mut out = vec![0.0; self.output_len()];
        self.apply(x.data(), &mut out);
        Ok(out)
    }

    fn adjoint_cube(&self, y: &[f64]) -> Result<SpectralCube> {
        ensure_dims!(
            y.len() == self.output_len(),
            "operator produces {} samples, got {}",
            self.output_len(),
            y.len()
        );
        let (m, n, l) = self.input_dims();
        let mut out = SpectralCube::zeros(m, n, l);
        self.apply_adjoint(y, out.data_mut());
        Ok(out)
    }

    /// `Hᵀ(H x − y)`
    fn normal_residual(&self, x: &SpectralCube, y: &[f64]) -> Result<SpectralCube> {
        let mut r = self.forward_vec(x)?;
        ensure_dims!(
            y.len() == r.len(),
            "measurement length {} does not match operator output {}",
            y.len(),
            r.len()
        );
        r.iter_mut().zip(y).for_each(|(a, b)| *a -= b);
        self.adjoint_cube(&r)
    }

    /// `HᵀH x`
    fn gram(&self, x: &SpectralCube) -> Result<SpectralCube> {
        let hx = self.forward_vec(x)?;
        self.adjoint_cube(&hx)
    }
}

/// The data-fidelity operators of a reconstruction problem.
///
/// The dual-arm fusion problem has both arms; the single-sensor CS problem uses `hs` only
/// and leaves `ms` empty.
#[derive(Clone, Copy)]
pub struct Operators<'a> {
    pub hs: &'a dyn LinearOperator,
    pub ms: Option<&'a dyn LinearOperator>,
}

impl<'a> Operators<'a> {
    pub fn dual(hs: &'a dyn LinearOperator, ms: &'a dyn LinearOperator) -> Self {
        Self { hs, ms: Some(ms) }
    }

    pub fn single(op: &'a dyn LinearOperator) -> Self {
        Self { hs: op, ms: None }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.hs.input_dims()
    }

    pub(crate) fn check(&self, y: &Measurements) -> Result<()> {
        ensure_dims!(
            y.hs.len() == self.hs.output_len(),
            "hs measurements have {} samples, operator produces {}",
            y.hs.len(),
            self.hs.output_len()
        );
        match (self.ms, &y.ms) {
            (Some(op), Some(ms)) => {
                ensure_dims!(
                    op.input_dims() == self.hs.input_dims(),
                    "arms disagree on target dims: {:?} vs {:?}",
                    op.input_dims(),
                    self.hs.input_dims()
                );
                ensure_dims!(
                    ms.len() == op.output_len(),
                    "ms measurements have {} samples, operator produces {}",
                    ms.len(),
                    op.output_len()
                );
            }
            (None, None) => {}
            _ => {
                return Err(crate::error::Error::DimensionMismatch(
                    "ms measurements and ms operator must be given together".into(),
                ))
            }
        }
        Ok(())
    }

    /// Initial estimate: `½ H_msᵀ y_ms + ½ H_hsᵀ y_hs` for two arms, `Hᵀ y` for a single operator.
    pub fn initial_estimate(&self, y: &Measurements) -> Result<SpectralCube> {
        self.check(y)?;
        let mut f = self.hs.adjoint_cube(&y.hs)?;
        if let (Some(op), Some(ms)) = (self.ms, &y.ms) {
            f.scale(0.5);
            f.axpy(0.5, &op.adjoint_cube(ms)?);
        }
        Ok(f)
    }

    /// Gradient of the data terms, returned separately as
    /// (`H_hsᵀ(H_hs f − y_hs)`, `H_msᵀ(H_ms f − y_ms)`); the second is zero without an MS arm.
    pub fn data_gradients(
        &self,
        f: &SpectralCube,
        y: &Measurements,
    ) -> Result<(SpectralCube, SpectralCube)> {
        self.check(y)?;
        let g_hs = self.hs.normal_residual(f, &y.hs)?;
        let g_ms = match (self.ms, &y.ms) {
            (Some(op), Some(ms)) => op.normal_residual(f, ms)?,
            _ => SpectralCube::zeros(f.rows(), f.cols(), f.bands()),
        };
        Ok((g_hs, g_ms))
    }

    /// `(H_hsᵀH_hs + λ1 H_msᵀH_ms) x`
    pub fn weighted_gram(&self, x: &SpectralCube, lambda1: f64) -> Result<SpectralCube> {
        let mut out = self.hs.gram(x)?;
        if let Some(op) = self.ms {
            out.axpy(lambda1, &op.gram(x)?);
        }
        Ok(out)
    }

    /// `½‖y_hs − H_hs f‖² + (λ1/2)‖y_ms − H_ms f‖²`
    pub fn data_misfit(&self, f: &SpectralCube, y: &Measurements, lambda1: f64) -> Result<f64> {
        self.check(y)?;
        let sq = |op: &dyn LinearOperator, meas: &[f64]| -> Result<f64> {
            let hf = op.forward_vec(f)?;
            Ok(hf.iter().zip(meas).map(|(a, b)| (a - b) * (a - b)).sum())
        };
        let mut total = 0.5 * sq(self.hs, &y.hs)?;
        if let (Some(op), Some(ms)) = (self.ms, &y.ms) {
            total += 0.5 * lambda1 * sq(op, ms)?;
        }
        Ok(total)
    }

    /// Power-iteration estimate of `‖H_hsᵀH_hs + λ1 H_msᵀH_ms‖₂`.
    pub fn gram_norm_estimate(&self, lambda1: f64, iters: usize) -> Result<f64> {
        let (m, n, l) = self.dims();
        // deterministic, non-degenerate start vector
        let mut x = SpectralCube::from_fn(m, n, l, |i, j, b| {
            1.0 + 0.1 * (((i * 7 + j * 13 + b * 29) % 17) as f64 / 17.0)
        });
        let mut est = 0.0;
        for _ in 0..iters.max(1) {
            let nrm = x.norm();
            if nrm == 0.0 {
                return Ok(0.0);
            }
            x.scale(1.0 / nrm);
            let ax = self.weighted_gram(&x, lambda1)?;
            est = x.dot(&ax);
            x = ax;
        }
        Ok(est)
    }
}

/// Measurement vectors for [`Operators`].
#[derive(Debug, Clone, PartialEq)]
pub struct Measurements {
    pub hs: Vec<f64>,
    pub ms: Option<Vec<f64>>,
}

impl Measurements {
    pub fn dual(hs: Vec<f64>, ms: Vec<f64>) -> Self {
        Self { hs, ms: Some(ms) }
    }

    pub fn single(y: Vec<f64>) -> Self {
        Self { hs: y, ms: None }
    }

    /// Measurements of `f` without noise.
    pub fn observe(ops: &Operators, f: &SpectralCube) -> Result<Self> {
        Ok(Self {
            hs: ops.hs.forward_vec(f)?,
            ms: ops.ms.map(|op| op.forward_vec(f)).transpose()?,
        })
    }

    pub fn zeros_for(ops: &Operators) -> Self {
        Self {
            hs: vec![0.0; ops.hs.output_len()],
            ms: ops.ms.map(|op| vec![0.0; op.output_len()]),
        }
    }
}

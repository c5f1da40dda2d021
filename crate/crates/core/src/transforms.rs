//! Sparsifying transforms: soft-thresholding, the learnable conv–ReLU–conv transforms and the
//! fixed orthonormal 3D DCT.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cube_io::{FeatureCube, SpectralCube};
use crate::error::{ensure_dims, Error, Result};

/// `sign(x)·max(|x| − λ, 0)` with `sign(0) = 0`.
///
/// Also evaluated for negative `λ` inside the network, whose learned thresholds are unconstrained.
#[inline]
pub fn soft_threshold_scalar(x: f64, lambda: f64) -> f64 {
    if x.abs() <= lambda || x == 0.0 {
        0.0
    } else if x > 0.0 {
        x - lambda
    } else {
        x + lambda
    }
}

pub fn soft_threshold(x: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if !(lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "soft threshold must be nonnegative, got {lambda}"
        )));
    }
    Ok(x.iter()
        .map(|v| soft_threshold_scalar(*v, lambda))
        .collect())
}

/// Bias-free 3×3 convolution bank with zero "same" padding, stride 1.
/// Weights are laid out `[out][in][ky][kx]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv3x3 {
    pub out_channels: usize,
    pub in_channels: usize,
    pub weights: Vec<f64>,
}

impl Conv3x3 {
    pub fn zeros(out_channels: usize, in_channels: usize) -> Self {
        Self {
            out_channels,
            in_channels,
            weights: vec![0.0; out_channels * in_channels * 9],
        }
    }

    /// Xavier/Glorot uniform: `U(±√(6/(fan_in + fan_out)))` with fans counted over the 3×3 window.
    pub fn xavier(out_channels: usize, in_channels: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / (9 * (in_channels + out_channels)) as f64).sqrt();
        let weights = (0..out_channels * in_channels * 9)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Self {
            out_channels,
            in_channels,
            weights,
        }
    }

    #[inline]
    pub fn weight_index(&self, o: usize, c: usize, ky: usize, kx: usize) -> usize {
        ((o * self.in_channels + c) * 3 + ky) * 3 + kx
    }

    pub fn kernel(&self, o: usize, c: usize) -> &[f64] {
        let s = (o * self.in_channels + c) * 9;
        &self.weights[s..s + 9]
    }

    pub fn forward(&self, x: &SpectralCube) -> Result<FeatureCube> {
        ensure_dims!(
            x.bands() == self.in_channels,
            "conv expects {} input channels, got {}",
            self.in_channels,
            x.bands()
        );
        let (m, n) = (x.rows(), x.cols());
        let plane = m * n;
        let mut out = SpectralCube::zeros(m, n, self.out_channels);
        out.data_mut()
            .par_chunks_mut(plane)
            .enumerate()
            .for_each(|(o, dst)| {
                for c in 0..self.in_channels {
                    let src = x.band(c);
                    let k = self.kernel(o, c);
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let w = k[ky * 3 + kx];
                            if w != 0.0 {
                                shifted_axpy(dst, src, w, m, n, ky, kx);
                            }
                        }
                    }
                }
            });
        Ok(out)
    }

    /// `xᵀ`-side product: the gradient with respect to the input given the output gradient.
    pub fn backward_input(&self, grad_out: &FeatureCube) -> Result<SpectralCube> {
        ensure_dims!(
            grad_out.bands() == self.out_channels,
            "conv output gradient has {} channels, expected {}",
            grad_out.bands(),
            self.out_channels
        );
        let (m, n) = (grad_out.rows(), grad_out.cols());
        let plane = m * n;
        let mut dx = SpectralCube::zeros(m, n, self.in_channels);
        dx.data_mut()
            .par_chunks_mut(plane)
            .enumerate()
            .for_each(|(c, dst)| {
                for o in 0..self.out_channels {
                    let src = grad_out.band(o);
                    let k = self.kernel(o, c);
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let w = k[ky * 3 + kx];
                            if w != 0.0 {
                                // transpose of a shift by (ky-1, kx-1) is the opposite shift
                                shifted_axpy(dst, src, w, m, n, 2 - ky, 2 - kx);
                            }
                        }
                    }
                }
            });
        Ok(dx)
    }

    /// Accumulates `∂loss/∂weights` into `grad` given the layer input and output gradient.
    pub fn accumulate_weight_grad(
        &self,
        input: &SpectralCube,
        grad_out: &FeatureCube,
        grad: &mut [f64],
    ) {
        debug_assert_eq!(grad.len(), self.weights.len());
        let (m, n) = (input.rows(), input.cols());
        let per_out = self.in_channels * 9;
        grad.par_chunks_mut(per_out).enumerate().for_each(|(o, g)| {
            let dy = grad_out.band(o);
            for c in 0..self.in_channels {
                let src = input.band(c);
                for ky in 0..3 {
                    for kx in 0..3 {
                        g[c * 9 + ky * 3 + kx] += shifted_dot(dy, src, m, n, ky, kx);
                    }
                }
            }
        });
    }
}

/// `dst[i][j] += w · src[i + ky − 1][j + kx − 1]` over the valid region.
#[inline]
fn shifted_axpy(dst: &mut [f64], src: &[f64], w: f64, m: usize, n: usize, ky: usize, kx: usize) {
    let (i0, i1) = valid_range(m, ky);
    let (j0, j1) = valid_range(n, kx);
    for i in i0..i1 {
        let si = i + ky - 1;
        let d = &mut dst[i * n + j0..i * n + j1];
        let s = &src[si * n + j0 + kx - 1..si * n + j1 + kx - 1];
        for (a, b) in d.iter_mut().zip(s) {
            *a += w * b;
        }
    }
}

/// `Σ dy[i][j] · src[i + ky − 1][j + kx − 1]` over the valid region.
#[inline]
fn shifted_dot(dy: &[f64], src: &[f64], m: usize, n: usize, ky: usize, kx: usize) -> f64 {
    let (i0, i1) = valid_range(m, ky);
    let (j0, j1) = valid_range(n, kx);
    let mut acc = 0.0;
    for i in i0..i1 {
        let si = i + ky - 1;
        let d = &dy[i * n + j0..i * n + j1];
        let s = &src[si * n + j0 + kx - 1..si * n + j1 + kx - 1];
        acc += d.iter().zip(s).map(|(a, b)| a * b).sum::<f64>();
    }
    acc
}

/// Output rows `i` for which `i + k − 1` is inside `0..len`.
#[inline]
fn valid_range(len: usize, k: usize) -> (usize, usize) {
    match k {
        0 => (1.min(len), len),
        1 => (0, len),
        _ => (0, len.saturating_sub(1)),
    }
}

/// Two-stage conv–ReLU–conv transform: `conv1` maps `bands → feature_maps`, `conv2` maps back.
/// Used for both the forward (NFT) and inverse (NIT) network transforms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvTransformParams {
    pub conv1: Conv3x3,
    pub conv2: Conv3x3,
}

/// Intermediate values of a [`ConvTransformParams`] evaluation kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ConvTransformCache {
    pub input: SpectralCube,
    pub pre_activation: FeatureCube,
    pub hidden: FeatureCube,
}

impl ConvTransformParams {
    pub fn xavier(bands: usize, feature_maps: usize, rng: &mut impl Rng) -> Self {
        let conv1 = Conv3x3::xavier(feature_maps, bands, rng);
        let conv2 = Conv3x3::xavier(bands, feature_maps, rng);
        Self { conv1, conv2 }
    }

    pub fn xavier_seeded(bands: usize, feature_maps: usize, seed: u64) -> Self {
        Self::xavier(bands, feature_maps, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Delta kernels: `conv1` copies band `c` into feature `c` (requires `feature_maps ≥ bands`),
    /// `conv2` copies it back. The transform is the identity on nonnegative inputs.
    pub fn identity(bands: usize, feature_maps: usize) -> Result<Self> {
        if feature_maps < bands {
            return Err(Error::InvalidArgument(format!(
                "identity transform needs at least {bands} feature maps"
            )));
        }
        let mut conv1 = Conv3x3::zeros(feature_maps, bands);
        let mut conv2 = Conv3x3::zeros(bands, feature_maps);
        for c in 0..bands {
            let k = conv1.weight_index(c, c, 1, 1);
            conv1.weights[k] = 1.0;
            let k = conv2.weight_index(c, c, 1, 1);
            conv2.weights[k] = 1.0;
        }
        Ok(Self { conv1, conv2 })
    }

    pub fn bands(&self) -> usize {
        self.conv1.in_channels
    }

    pub fn feature_maps(&self) -> usize {
        self.conv1.out_channels
    }

    /// Scalar parameter count, `18·F·L`.
    pub fn parameter_count(&self) -> usize {
        self.conv1.weights.len() + self.conv2.weights.len()
    }

    pub fn is_consistent(&self) -> bool {
        self.conv1.in_channels == self.conv2.out_channels
            && self.conv1.out_channels == self.conv2.in_channels
            && self.conv1.weights.len() == self.conv1.in_channels * self.conv1.out_channels * 9
            && self.conv2.weights.len() == self.conv2.in_channels * self.conv2.out_channels * 9
            && self
                .conv1
                .weights
                .iter()
                .chain(&self.conv2.weights)
                .all(|v| v.is_finite())
    }

    pub fn apply(&self, x: &SpectralCube) -> Result<FeatureCube> {
        Ok(self.apply_cached(x)?.0)
    }

    pub fn apply_cached(&self, x: &SpectralCube) -> Result<(FeatureCube, ConvTransformCache)> {
        let pre = self.conv1.forward(x)?;
        let mut hidden = pre.clone();
        hidden.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        let out = self.conv2.forward(&hidden)?;
        Ok((
            out,
            ConvTransformCache {
                input: x.clone(),
                pre_activation: pre,
                hidden,
            },
        ))
    }

    /// Back-propagates `grad_out` through the transform, accumulating kernel gradients into
    /// `grads` and returning the input gradient. `ReLU'(0)` is taken as 0.
    pub fn backward(
        &self,
        cache: &ConvTransformCache,
        grad_out: &FeatureCube,
        grads: &mut ConvTransformParams,
    ) -> Result<SpectralCube> {
        self.conv2
            .accumulate_weight_grad(&cache.hidden, grad_out, &mut grads.conv2.weights);
        let mut g_hidden = self.conv2.backward_input(grad_out)?;
        g_hidden
            .data_mut()
            .iter_mut()
            .zip(cache.pre_activation.data())
            .for_each(|(g, z)| {
                if *z <= 0.0 {
                    *g = 0.0;
                }
            });
        self.conv1
            .accumulate_weight_grad(&cache.input, &g_hidden, &mut grads.conv1.weights);
        self.conv1.backward_input(&g_hidden)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            conv1: Conv3x3::zeros(self.conv1.out_channels, self.conv1.in_channels),
            conv2: Conv3x3::zeros(self.conv2.out_channels, self.conv2.in_channels),
        }
    }
}

/// NFT: network forward transform `𝓖`.
pub fn nft_forward(cube: &SpectralCube, params: &ConvTransformParams) -> Result<FeatureCube> {
    ensure_dims!(
        cube.bands() == params.bands(),
        "transform built for {} bands, cube has {}",
        params.bands(),
        cube.bands()
    );
    params.apply(cube)
}

/// NIT: network inverse transform `𝓖̃`.
pub fn nit_forward(features: &FeatureCube, params: &ConvTransformParams) -> Result<SpectralCube> {
    ensure_dims!(
        features.bands() == params.bands(),
        "inverse transform built for {} channels, input has {}",
        params.bands(),
        features.bands()
    );
    params.apply(features)
}

/// Orthonormal DCT-II matrix, row `k` is the `k`-th basis vector.
fn dct_matrix(n: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * n];
    for k in 0..n {
        let scale = if k == 0 {
            (1.0 / n as f64).sqrt()
        } else {
            (2.0 / n as f64).sqrt()
        };
        for t in 0..n {
            c[k * n + t] = scale
                * (std::f64::consts::PI * (2 * t + 1) as f64 * k as f64 / (2 * n) as f64).cos();
        }
    }
    c
}

/// Applies `mat` (or its transpose) along one axis of the cube.
fn transform_axis(cube: &SpectralCube, axis: usize, mat: &[f64], transpose: bool) -> SpectralCube {
    let (m, n, l) = cube.dims();
    let len = [m, n, l][axis];
    let coef = |k: usize, t: usize| {
        if transpose {
            mat[t * len + k]
        } else {
            mat[k * len + t]
        }
    };
    let mut out = SpectralCube::zeros(m, n, l);
    let src = cube.data();
    let stride = match axis {
        0 => n,
        1 => 1,
        _ => m * n,
    };
    // iterate over every line along `axis`
    let dst = out.data_mut();
    for base in 0..m * n * l {
        let pos = match axis {
            0 => (base / n) % m,
            1 => base % n,
            _ => base / (m * n),
        };
        if pos != 0 {
            continue;
        }
        for k in 0..len {
            let mut acc = 0.0;
            for t in 0..len {
                acc += coef(k, t) * src[base + t * stride];
            }
            dst[base + k * stride] = acc;
        }
    }
    out
}

/// Separable orthonormal DCT: 2D DCT-II on every band followed by a 1D DCT-II across bands.
#[derive(Debug, Clone)]
pub struct Dct3 {
    dims: (usize, usize, usize),
    mats: [Vec<f64>; 3],
}

impl Dct3 {
    pub fn new(rows: usize, cols: usize, bands: usize) -> Self {
        Self {
            dims: (rows, cols, bands),
            mats: [dct_matrix(rows), dct_matrix(cols), dct_matrix(bands)],
        }
    }

    pub fn forward(&self, cube: &SpectralCube) -> Result<FeatureCube> {
        ensure_dims!(
            cube.dims() == self.dims,
            "DCT built for {:?}, got {:?}",
            self.dims,
            cube.dims()
        );
        let a = transform_axis(cube, 1, &self.mats[1], false);
        let b = transform_axis(&a, 0, &self.mats[0], false);
        Ok(transform_axis(&b, 2, &self.mats[2], false))
    }

    pub fn inverse(&self, coeffs: &FeatureCube) -> Result<SpectralCube> {
        ensure_dims!(
            coeffs.dims() == self.dims,
            "DCT built for {:?}, got {:?}",
            self.dims,
            coeffs.dims()
        );
        let a = transform_axis(coeffs, 2, &self.mats[2], true);
        let b = transform_axis(&a, 0, &self.mats[0], true);
        Ok(transform_axis(&b, 1, &self.mats[1], true))
    }
}

pub fn dct_transform(cube: &SpectralCube) -> FeatureCube {
    let (m, n, l) = cube.dims();
    Dct3::new(m, n, l)
        .forward(cube)
        .expect("dims match by construction")
}

pub fn dct_inverse(features: &FeatureCube) -> SpectralCube {
    let (m, n, l) = features.dims();
    Dct3::new(m, n, l)
        .inverse(features)
        .expect("dims match by construction")
}

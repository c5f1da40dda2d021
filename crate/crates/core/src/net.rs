//! LADMM-Net: the linearized ADMM iteration unrolled into `K` layers.
//!
//! Layer `k` has an approximation unit (AU)
//!
//! ```text
//! f⁽ᵏ⁾ = f⁽ᵏ⁻¹⁾ − (1/α⁽ᵏ⁾)[H_hsᵀ(H_hs f⁽ᵏ⁻¹⁾ − y_hs) + λ1⁽ᵏ⁾ H_msᵀ(H_ms f⁽ᵏ⁻¹⁾ − y_ms) + ρ⁽ᵏ⁾ r⁽ᵏ⁻¹⁾]
//! ```
//!
//! followed by a refinement unit (NRU) that replaces `Ψ`/`Ψᵀ` with learned transforms `𝓖`/`𝓖̃`:
//!
//! ```text
//! b⁽ᵏ⁾ = S_λ̃(𝓖(f⁽ᵏ⁾) + d⁽ᵏ⁻¹⁾)
//! d⁽ᵏ⁾ = d⁽ᵏ⁻¹⁾ + 𝓖(f⁽ᵏ⁾) − b⁽ᵏ⁾
//! r⁽ᵏ⁾ = 𝓖̃(𝓖(f⁽ᵏ⁾) + d⁽ᵏ⁾ − b⁽ᵏ⁾)
//! ```
//!
//! The cascade starts from `f⁰ = ½H_msᵀy_ms + ½H_hsᵀy_hs` with `d⁰ = r⁰ = 0`.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cube_io::{FeatureCube, SpectralCube};
use crate::error::{ensure_dims, Error, Result};
use crate::operator::{Measurements, Operators};
use crate::transforms::{soft_threshold_scalar, ConvTransformParams, Dct3};

pub const INIT_ALPHA: f64 = 0.5;
pub const INIT_RHO: f64 = 0.1;
pub const INIT_LAMBDA1: f64 = 1.0;
pub const INIT_SOFT_LAMBDA: f64 = 0.01;
pub const DEFAULT_FEATURE_MAPS: usize = 32;

/// The four learnable scalars of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerScalars {
    pub alpha: f64,
    pub rho: f64,
    pub lambda1: f64,
    pub soft_lambda: f64,
}

impl Default for LayerScalars {
    fn default() -> Self {
        Self {
            alpha: INIT_ALPHA,
            rho: INIT_RHO,
            lambda1: INIT_LAMBDA1,
            soft_lambda: INIT_SOFT_LAMBDA,
        }
    }
}

/// Analysis/synthesis transform pair used by a refinement unit.
pub trait LayerTransform {
    /// `𝓖`
    fn analysis(&self, f: &SpectralCube) -> Result<FeatureCube>;
    /// `𝓖̃`
    fn synthesis(&self, u: &FeatureCube) -> Result<SpectralCube>;
}

impl LayerTransform for Dct3 {
    fn analysis(&self, f: &SpectralCube) -> Result<FeatureCube> {
        self.forward(f)
    }

    fn synthesis(&self, u: &FeatureCube) -> Result<SpectralCube> {
        self.inverse(u)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub alpha: f64,
    pub rho: f64,
    pub lambda1: f64,
    pub soft_lambda: f64,
    pub nft: ConvTransformParams,
    pub nit: ConvTransformParams,
}

impl LayerParams {
    pub fn scalars(&self) -> LayerScalars {
        LayerScalars {
            alpha: self.alpha,
            rho: self.rho,
            lambda1: self.lambda1,
            soft_lambda: self.soft_lambda,
        }
    }

    pub fn set_scalars(&mut self, s: LayerScalars) {
        self.alpha = s.alpha;
        self.rho = s.rho;
        self.lambda1 = s.lambda1;
        self.soft_lambda = s.soft_lambda;
    }

    pub fn parameter_count(&self) -> usize {
        4 + self.nft.parameter_count() + self.nit.parameter_count()
    }

    /// Same shapes, every entry zero. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        Self {
            alpha: 0.0,
            rho: 0.0,
            lambda1: 0.0,
            soft_lambda: 0.0,
            nft: self.nft.zeros_like(),
            nit: self.nit.zeros_like(),
        }
    }

    fn is_finite(&self) -> bool {
        [self.alpha, self.rho, self.lambda1, self.soft_lambda]
            .iter()
            .all(|v| v.is_finite())
            && self.nft.is_consistent()
            && self.nit.is_consistent()
    }
}

impl LayerTransform for LayerParams {
    fn analysis(&self, f: &SpectralCube) -> Result<FeatureCube> {
        crate::transforms::nft_forward(f, &self.nft)
    }

    fn synthesis(&self, u: &FeatureCube) -> Result<SpectralCube> {
        crate::transforms::nit_forward(u, &self.nit)
    }
}

/// Learnable set `Θ` for all `K` layers.
#[derive(Debug, Clone, PartialEq)]
pub struct LadmmNetParams {
    pub layers: Vec<LayerParams>,
    pub feature_maps: usize,
    pub dims: (usize, usize, usize),
}

/// Named slice of the flattened parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamGroup {
    pub layer: usize,
    pub name: &'static str,
    pub offset: usize,
    pub len: usize,
}

impl ParamGroup {
    pub fn label(&self) -> String {
        format!("layer{}.{}", self.layer, self.name)
    }

    pub fn is_scalar(&self) -> bool {
        self.len == 1
    }
}

impl LadmmNetParams {
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Total scalar count `K·(4 + 36·F·L)`.
    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(LayerParams::parameter_count).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidArgument(
                "network needs at least one layer".into(),
            ));
        }
        let bands = self.dims.2;
        for (k, layer) in self.layers.iter().enumerate() {
            for t in [&layer.nft, &layer.nit] {
                ensure_dims!(
                    t.bands() == bands && t.feature_maps() == self.feature_maps,
                    "layer {k} transform is {}→{} channels, network is {}→{}",
                    t.bands(),
                    t.feature_maps(),
                    bands,
                    self.feature_maps
                );
            }
            if !layer.is_finite() {
                return Err(Error::NonFinite(format!("layer {k} parameters")));
            }
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.iter().map(LayerParams::zeros_like).collect(),
            feature_maps: self.feature_maps,
            dims: self.dims,
        }
    }

    /// Layout of [`Self::to_flat`]: per layer `alpha, rho, lambda1, soft_lambda, nft.conv1,
    /// nft.conv2, nit.conv1, nit.conv2`.
    pub fn groups(&self) -> Vec<ParamGroup> {
        let mut out = Vec::new();
        let mut offset = 0;
        for (k, layer) in self.layers.iter().enumerate() {
            let sizes = [
                ("alpha", 1),
                ("rho", 1),
                ("lambda1", 1),
                ("soft_lambda", 1),
                ("nft.conv1", layer.nft.conv1.weights.len()),
                ("nft.conv2", layer.nft.conv2.weights.len()),
                ("nit.conv1", layer.nit.conv1.weights.len()),
                ("nit.conv2", layer.nit.conv2.weights.len()),
            ];
            for (name, len) in sizes {
                out.push(ParamGroup {
                    layer: k,
                    name,
                    offset,
                    len,
                });
                offset += len;
            }
        }
        out
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.parameter_count());
        for l in &self.layers {
            v.extend_from_slice(&[l.alpha, l.rho, l.lambda1, l.soft_lambda]);
            v.extend_from_slice(&l.nft.conv1.weights);
            v.extend_from_slice(&l.nft.conv2.weights);
            v.extend_from_slice(&l.nit.conv1.weights);
            v.extend_from_slice(&l.nit.conv2.weights);
        }
        v
    }

    /// Overwrites every parameter from a vector laid out as [`Self::to_flat`].
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        ensure_dims!(
            flat.len() == self.parameter_count(),
            "flat vector has {} entries, network has {}",
            flat.len(),
            self.parameter_count()
        );
        let mut it = flat.iter().copied();
        let mut fill = |dst: &mut [f64]| dst.iter_mut().for_each(|d| *d = it.next().unwrap());
        for l in &mut self.layers {
            let mut s = [0.0; 4];
            fill(&mut s);
            l.alpha = s[0];
            l.rho = s[1];
            l.lambda1 = s[2];
            l.soft_lambda = s[3];
            fill(&mut l.nft.conv1.weights);
            fill(&mut l.nft.conv2.weights);
            fill(&mut l.nit.conv1.weights);
            fill(&mut l.nit.conv2.weights);
        }
        Ok(())
    }
}

/// Fresh parameters: every layer gets `(α, ρ, λ1, λ̃) = (0.5, 0.1, 1, 0.01)` and Xavier-uniform
/// kernels drawn from one seeded stream.
pub fn init_params(
    dims: (usize, usize, usize),
    feature_maps: usize,
    depth: usize,
    seed: u64,
) -> Result<LadmmNetParams> {
    let (m, n, l) = dims;
    if depth < 1 || feature_maps < 1 || m * n * l == 0 {
        return Err(Error::InvalidArgument(format!(
            "invalid network size: dims {dims:?}, F={feature_maps}, K={depth}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = LayerScalars::default();
    let layers = (0..depth)
        .map(|_| LayerParams {
            alpha: s.alpha,
            rho: s.rho,
            lambda1: s.lambda1,
            soft_lambda: s.soft_lambda,
            nft: ConvTransformParams::xavier(l, feature_maps, &mut rng),
            nit: ConvTransformParams::xavier(l, feature_maps, &mut rng),
        })
        .collect();
    Ok(LadmmNetParams {
        layers,
        feature_maps,
        dims,
    })
}

/// `f⁰ = ½H_msᵀy_ms + ½H_hsᵀy_hs` (or `Hᵀy` for a single operator).
pub fn init_f0(y: &Measurements, ops: &Operators) -> Result<SpectralCube> {
    ops.initial_estimate(y)
}

/// Approximation unit: one linearized gradient step with the layer's scalars.
pub fn au_forward(
    f_prev: &SpectralCube,
    r_prev: &SpectralCube,
    y: &Measurements,
    ops: &Operators,
    s: &LayerScalars,
) -> Result<SpectralCube> {
    Ok(au_forward_parts(f_prev, r_prev, y, ops, s)?.0)
}

/// AU output together with the bracketed step `s` and the MS data gradient (both needed by the
/// backward pass).
pub(crate) fn au_forward_parts(
    f_prev: &SpectralCube,
    r_prev: &SpectralCube,
    y: &Measurements,
    ops: &Operators,
    s: &LayerScalars,
) -> Result<(SpectralCube, SpectralCube, SpectralCube)> {
    if s.alpha == 0.0 {
        return Err(Error::InvalidArgument(
            "step parameter alpha is zero".into(),
        ));
    }
    ensure_dims!(
        r_prev.same_shape(f_prev),
        "residual {:?} does not match iterate {:?}",
        r_prev.dims(),
        f_prev.dims()
    );
    let (g_hs, g_ms) = ops.data_gradients(f_prev, y)?;
    let mut step = g_hs;
    step.axpy(s.lambda1, &g_ms);
    step.axpy(s.rho, r_prev);
    let mut f = f_prev.clone();
    f.axpy(-1.0 / s.alpha, &step);
    if !f.is_finite() {
        return Err(Error::NonFinite("approximation unit output".into()));
    }
    Ok((f, step, g_ms))
}

/// Outputs of a refinement unit.
#[derive(Debug, Clone, PartialEq)]
pub struct NruOutput {
    pub b: FeatureCube,
    pub d: FeatureCube,
    pub r: SpectralCube,
    /// `𝓖(f⁽ᵏ⁾)`
    pub transformed: FeatureCube,
}

/// Refinement unit with the given transform pair and threshold.
pub fn nru_forward(
    f: &SpectralCube,
    d_prev: &FeatureCube,
    soft_lambda: f64,
    transform: &dyn LayerTransform,
) -> Result<NruOutput> {
    let transformed = transform.analysis(f)?;
    ensure_dims!(
        transformed.same_shape(d_prev),
        "multiplier {:?} does not match transform output {:?}",
        d_prev.dims(),
        transformed.dims()
    );
    let mut b = transformed.clone();
    b.data_mut()
        .iter_mut()
        .zip(d_prev.data())
        .for_each(|(v, d)| *v = soft_threshold_scalar(*v + d, soft_lambda));
    let mut d = d_prev.clone();
    d.axpy(1.0, &transformed);
    d.axpy(-1.0, &b);
    let mut resid = transformed.clone();
    resid.axpy(1.0, &d);
    resid.axpy(-1.0, &b);
    let r = transform.synthesis(&resid)?;
    Ok(NruOutput {
        b,
        d,
        r,
        transformed,
    })
}

/// Per-layer values kept for the invertibility loss.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    pub f: SpectralCube,
    pub transformed: FeatureCube,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetOutput {
    pub f: SpectralCube,
    pub trace: Vec<LayerTrace>,
}

/// Runs the cascade for arbitrary per-layer scalars and transforms.
pub fn unrolled_forward(
    layers: &[(LayerScalars, &dyn LayerTransform)],
    y: &Measurements,
    ops: &Operators,
) -> Result<NetOutput> {
    let mut f = init_f0(y, ops)?;
    let (m, n, l) = f.dims();
    let mut d = SpectralCube::zeros(m, n, l);
    let mut r = SpectralCube::zeros(m, n, l);
    let mut trace = Vec::with_capacity(layers.len());
    for (scalars, transform) in layers {
        f = au_forward(&f, &r, y, ops, scalars)?;
        let out = nru_forward(&f, &d, scalars.soft_lambda, *transform)?;
        d = out.d;
        r = out.r;
        trace.push(LayerTrace {
            f: f.clone(),
            transformed: out.transformed,
        });
    }
    Ok(NetOutput { f, trace })
}

/// Full LADMM-Net forward pass.
pub fn net_forward(
    params: &LadmmNetParams,
    y: &Measurements,
    ops: &Operators,
) -> Result<NetOutput> {
    params.validate()?;
    ensure_dims!(
        params.dims == ops.dims(),
        "network built for {:?}, operators act on {:?}",
        params.dims,
        ops.dims()
    );
    let layers: Vec<(LayerScalars, &dyn LayerTransform)> = params
        .layers
        .iter()
        .map(|l| (l.scalars(), l as &dyn LayerTransform))
        .collect();
    unrolled_forward(&layers, y, ops)
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"LNET";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    version: u32,
    dims: [usize; 3],
    layers: usize,
    feature_maps: usize,
    values: usize,
}

/// Writes `"LNET"`, u32 LE version, u32 LE header length, a JSON header and the flattened
/// parameters as f64 LE (layout of [`LadmmNetParams::to_flat`]).
pub fn save_checkpoint(params: &LadmmNetParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(params)?).map_err(|e| Error::io(path, e))
}

pub fn encode_checkpoint(params: &LadmmNetParams) -> Result<Vec<u8>> {
    params.validate()?;
    let flat = params.to_flat();
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        dims: [params.dims.0, params.dims.1, params.dims.2],
        layers: params.depth(),
        feature_maps: params.feature_maps,
        values: flat.len(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut bytes = Vec::with_capacity(12 + json.len() + flat.len() * 8);
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&json);
    for v in flat {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    Ok(bytes)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<LadmmNetParams> {
    let path = path.as_ref();
    decode_checkpoint(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Loads a checkpoint and checks it against the expected target dims and depth.
pub fn load_checkpoint_for(
    path: impl AsRef<Path>,
    dims: (usize, usize, usize),
    depth: Option<usize>,
) -> Result<LadmmNetParams> {
    let params = load_checkpoint(path)?;
    ensure_dims!(
        params.dims == dims,
        "checkpoint is for {:?} cubes, expected {:?}",
        params.dims,
        dims
    );
    if let Some(k) = depth {
        ensure_dims!(
            params.depth() == k,
            "checkpoint has {} layers, expected {k}",
            params.depth()
        );
    }
    Ok(params)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<LadmmNetParams> {
    if bytes.len() < 12 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::MalformedHeader("not a network checkpoint".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::MalformedHeader(format!(
            "checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let json = bytes
        .get(12..12 + hlen)
        .ok_or_else(|| Error::MalformedHeader("truncated checkpoint header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(json)?;
    if header.version != version {
        return Err(Error::MalformedHeader(
            "header version disagrees with preamble".into(),
        ));
    }
    let payload = &bytes[12 + hlen..];
    let [m, n, l] = header.dims;
    let mut params = init_params((m, n, l), header.feature_maps, header.layers, 0)?;
    ensure_dims!(
        header.values == params.parameter_count() && payload.len() == header.values * 8,
        "checkpoint declares K={} F={} dims {:?} ({} values) but carries {} values",
        header.layers,
        header.feature_maps,
        header.dims,
        params.parameter_count(),
        payload.len() / 8
    );
    let flat: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    params.assign_flat(&flat)?;
    params.validate()?;
    Ok(params)
}

//! Grayscale block compressive sensing with the same unrolled network.
//!
//! Images are cut into 33×33 blocks, each block is sampled by a column-normalized Gaussian
//! matrix, and the network (one band, single data operator) reconstructs the blocks, which
//! are reassembled into the image.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cube_io::{GrayImage, SpectralCube};
use crate::error::{ensure_dims, Error, Result};
use crate::net::{au_forward, init_params, net_forward, LadmmNetParams, LayerScalars, INIT_RHO};
use crate::operator::{LinearOperator, Measurements, Operators};
use crate::solver::auto_alpha;
use crate::training::{train, CheckpointPolicy, EpochLoss, Sample, TrainingConfig};

pub const BLOCK_EDGE: usize = 33;

/// Dense `m × n` Gaussian sampling matrix with unit-norm columns, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMatrix {
    m: usize,
    n: usize,
    seed: u64,
    entries: Vec<f64>,
    input_dims: (usize, usize, usize),
}

/// Everything needed to regenerate a [`GaussianMatrix`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixSpec {
    pub m: usize,
    pub n: usize,
    pub seed: u64,
}

impl GaussianMatrix {
    /// iid standard-normal entries (row-major draw order), then each column scaled to unit norm.
    /// When `n` is a perfect square the operator acts on `√n × √n` blocks, otherwise on `n × 1`.
    pub fn new(m: usize, n: usize, seed: u64) -> Result<Self> {
        if m < 1 || m > n {
            return Err(Error::InvalidArgument(format!(
                "sampling matrix needs 1 ≤ m ≤ n, got m={m}, n={n}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut entries: Vec<f64> = (0..m * n)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        for c in 0..n {
            let norm = (0..m)
                .map(|r| entries[r * n + c].powi(2))
                .sum::<f64>()
                .sqrt();
            for r in 0..m {
                entries[r * n + c] /= norm;
            }
        }
        let edge = (n as f64).sqrt().round() as usize;
        let input_dims = if edge * edge == n {
            (edge, edge, 1)
        } else {
            (n, 1, 1)
        };
        Ok(Self {
            m,
            n,
            seed,
            entries,
            input_dims,
        })
    }

    /// Matrix for a sampling ratio on 33×33 blocks: `m = round(ratio·1089)`.
    pub fn for_ratio(ratio: f64, seed: u64) -> Result<Self> {
        Self::new(
            measurements_for_ratio(ratio, BLOCK_EDGE * BLOCK_EDGE)?,
            BLOCK_EDGE * BLOCK_EDGE,
            seed,
        )
    }

    pub fn from_spec(spec: &MatrixSpec) -> Result<Self> {
        Self::new(spec.m, spec.n, spec.seed)
    }

    pub fn spec(&self) -> MatrixSpec {
        MatrixSpec {
            m: self.m,
            n: self.n,
            seed: self.seed,
        }
    }

    pub fn rows(&self) -> usize {
        self.m
    }

    pub fn cols(&self) -> usize {
        self.n
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.entries[r * self.n + c]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }
}

/// `m = round(ratio·n)`; rejects ratios that give `m = 0` or `m > n`.
pub fn measurements_for_ratio(ratio: f64, n: usize) -> Result<usize> {
    let m = (ratio * n as f64).round();
    if !(m >= 1.0 && m <= n as f64) {
        return Err(Error::InvalidArgument(format!(
            "sampling ratio {ratio} invalid for n={n}"
        )));
    }
    Ok(m as usize)
}

impl LinearOperator for GaussianMatrix {
    fn input_dims(&self) -> (usize, usize, usize) {
        self.input_dims
    }

    fn output_len(&self) -> usize {
        self.m
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        for (o, row) in out.iter_mut().zip(self.entries.chunks_exact(self.n)) {
            *o = crate::cube_io::dot(row, x);
        }
    }

    fn apply_adjoint(&self, y: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for (yr, row) in y.iter().zip(self.entries.chunks_exact(self.n)) {
            crate::cube_io::axpy(out, *yr, row);
        }
    }
}

/// Single-operator AU: `f − (1/α)[Hᵀ(Hf − y) + ρ r]`.
pub fn cs_au_forward(
    f_prev: &SpectralCube,
    r_prev: &SpectralCube,
    y: &[f64],
    h: &GaussianMatrix,
    s: &LayerScalars,
) -> Result<SpectralCube> {
    au_forward(
        f_prev,
        r_prev,
        &Measurements::single(y.to_vec()),
        &Operators::single(h),
        s,
    )
}

/// Blocks cut from one image plus the geometry needed to put them back.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockSet {
    pub block_edge: usize,
    pub stride: usize,
    /// original image size
    pub rows: usize,
    pub cols: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    /// row-major over the grid
    pub blocks: Vec<GrayImage>,
}

fn grid_len(len: usize, edge: usize, stride: usize) -> usize {
    (len - edge).div_ceil(stride) + 1
}

/// Tiles `image` with 33×33 blocks at `stride` (≤ 33), zero-padding past the right/bottom edge.
pub fn extract_blocks(image: &GrayImage, stride: usize) -> Result<BlockSet> {
    let edge = BLOCK_EDGE;
    if image.rows() < edge || image.cols() < edge {
        return Err(Error::InvalidArgument(format!(
            "image {}×{} is smaller than a {edge}×{edge} block",
            image.rows(),
            image.cols()
        )));
    }
    if stride < 1 || stride > edge {
        return Err(Error::InvalidArgument(format!(
            "block stride must be in 1..={edge}"
        )));
    }
    let (gr, gc) = (
        grid_len(image.rows(), edge, stride),
        grid_len(image.cols(), edge, stride),
    );
    let mut blocks = Vec::with_capacity(gr * gc);
    for bi in 0..gr {
        for bj in 0..gc {
            let mut b = GrayImage::zeros(edge, edge);
            for u in 0..edge {
                for v in 0..edge {
                    let (i, j) = (bi * stride + u, bj * stride + v);
                    if i < image.rows() && j < image.cols() {
                        b.set(u, v, image.get(i, j));
                    }
                }
            }
            blocks.push(b);
        }
    }
    Ok(BlockSet {
        block_edge: edge,
        stride,
        rows: image.rows(),
        cols: image.cols(),
        grid_rows: gr,
        grid_cols: gc,
        blocks,
    })
}

/// Inverse of [`extract_blocks`]: overlapping pixels are averaged, padding is cropped.
pub fn assemble_blocks(set: &BlockSet) -> Result<GrayImage> {
    ensure_dims!(
        set.blocks.len() == set.grid_rows * set.grid_cols,
        "block set has {} blocks for a {}×{} grid",
        set.blocks.len(),
        set.grid_rows,
        set.grid_cols
    );
    let edge = set.block_edge;
    let mut sum = vec![0.0; set.rows * set.cols];
    let mut count = vec![0u32; set.rows * set.cols];
    for (k, b) in set.blocks.iter().enumerate() {
        ensure_dims!(
            b.rows() == edge && b.cols() == edge,
            "block {k} is not {edge}×{edge}"
        );
        let (bi, bj) = (k / set.grid_cols, k % set.grid_cols);
        for u in 0..edge {
            for v in 0..edge {
                let (i, j) = (bi * set.stride + u, bj * set.stride + v);
                if i < set.rows && j < set.cols {
                    sum[i * set.cols + j] += b.get(u, v);
                    count[i * set.cols + j] += 1;
                }
            }
        }
    }
    let data = sum
        .iter()
        .zip(&count)
        .map(|(s, c)| if *c == 1 { *s } else { s / *c as f64 })
        .collect();
    GrayImage::from_vec(set.rows, set.cols, data)
}

/// Fully interior blocks at `stride`, without padding (training patches).
pub fn sample_blocks(image: &GrayImage, stride: usize) -> Result<Vec<GrayImage>> {
    let edge = BLOCK_EDGE;
    if image.rows() < edge || image.cols() < edge || stride < 1 {
        return Err(Error::InvalidArgument(
            "image too small or zero stride".into(),
        ));
    }
    let mut out = Vec::new();
    for i0 in (0..=image.rows() - edge).step_by(stride) {
        for j0 in (0..=image.cols() - edge).step_by(stride) {
            let mut b = GrayImage::zeros(edge, edge);
            for u in 0..edge {
                for v in 0..edge {
                    b.set(u, v, image.get(i0 + u, j0 + v));
                }
            }
            out.push(b);
        }
    }
    Ok(out)
}

/// Reads every PNG/PGM/PNM image in `dir` (sorted by file name) as grayscale in [0, 1].
pub fn load_image_dir(dir: impl AsRef<Path>) -> Result<Vec<GrayImage>> {
    let dir = dir.as_ref();
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "pgm" | "pnm"))
                .unwrap_or(false)
        })
        .collect();
    paths.sort();
    paths.iter().map(GrayImage::read).collect()
}

/// Per-block measurements of an image.
#[derive(Debug, Clone, PartialEq)]
pub struct CsMeasurement {
    pub rows: usize,
    pub cols: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub spec: MatrixSpec,
    pub y: Vec<Vec<f64>>,
}

/// Non-overlapping tiling followed by `y_b = H·block_b`.
pub fn cs_measure(image: &GrayImage, h: &GaussianMatrix) -> Result<CsMeasurement> {
    ensure_dims!(
        h.input_dims() == (BLOCK_EDGE, BLOCK_EDGE, 1),
        "sampling matrix does not act on {BLOCK_EDGE}×{BLOCK_EDGE} blocks"
    );
    let set = extract_blocks(image, BLOCK_EDGE)?;
    let y = set
        .blocks
        .iter()
        .map(|b| h.forward_vec(&b.to_cube()))
        .collect::<Result<_>>()?;
    Ok(CsMeasurement {
        rows: set.rows,
        cols: set.cols,
        grid_rows: set.grid_rows,
        grid_cols: set.grid_cols,
        spec: h.spec(),
        y,
    })
}

fn reassemble(meas: &CsMeasurement, blocks: Vec<SpectralCube>) -> Result<GrayImage> {
    let blocks = blocks
        .iter()
        .map(|c| GrayImage::from_cube_band(c, 0))
        .collect::<Result<_>>()?;
    assemble_blocks(&BlockSet {
        block_edge: BLOCK_EDGE,
        stride: BLOCK_EDGE,
        rows: meas.rows,
        cols: meas.cols,
        grid_rows: meas.grid_rows,
        grid_cols: meas.grid_cols,
        blocks,
    })
}

fn check_matrix(meas: &CsMeasurement, h: &GaussianMatrix) -> Result<()> {
    ensure_dims!(
        meas.spec == h.spec(),
        "measurements taken with {:?}, reconstruction matrix is {:?}",
        meas.spec,
        h.spec()
    );
    Ok(())
}

/// Block-wise network reconstruction; blocks are independent and run in parallel.
pub fn cs_reconstruct(
    meas: &CsMeasurement,
    h: &GaussianMatrix,
    params: &LadmmNetParams,
) -> Result<GrayImage> {
    check_matrix(meas, h)?;
    ensure_dims!(
        params.dims == h.input_dims(),
        "checkpoint is for {:?} blocks, matrix acts on {:?}",
        params.dims,
        h.input_dims()
    );
    let ops = Operators::single(h);
    let blocks = meas
        .y
        .par_iter()
        .map(|y| Ok(net_forward(params, &Measurements::single(y.clone()), &ops)?.f))
        .collect::<Result<Vec<_>>>()?;
    reassemble(meas, blocks)
}

/// Baseline `Hᵀy` per block.
pub fn cs_adjoint_reconstruct(meas: &CsMeasurement, h: &GaussianMatrix) -> Result<GrayImage> {
    check_matrix(meas, h)?;
    let blocks = meas
        .y
        .iter()
        .map(|y| h.adjoint_cube(y))
        .collect::<Result<_>>()?;
    reassemble(meas, blocks)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsTrainConfig {
    pub ratio: f64,
    pub matrix_seed: u64,
    pub init_seed: u64,
    pub feature_maps: usize,
    pub depth: usize,
    /// stride of interior training patches
    pub stride: usize,
    #[serde(default)]
    pub max_blocks: Option<usize>,
    /// initial α of every layer; defaults to the stable step `‖HᵀH‖ + ρ`
    #[serde(default)]
    pub alpha_init: Option<f64>,
    pub training: TrainingConfig,
}

#[derive(Debug, Clone)]
pub struct CsTrainOutcome {
    pub matrix: GaussianMatrix,
    pub params: LadmmNetParams,
    pub history: Vec<EpochLoss>,
}

/// Pairs each block with its noiseless measurement.
pub fn cs_samples(blocks: &[GrayImage], h: &GaussianMatrix) -> Result<Vec<Sample>> {
    blocks
        .iter()
        .map(|b| {
            let truth = b.to_cube();
            let y = Measurements::single(h.forward_vec(&truth)?);
            Ok(Sample { truth, y })
        })
        .collect()
}

/// Cuts training patches from every image (capped at `max_blocks`, taken in order).
pub fn training_blocks(
    images: &[GrayImage],
    stride: usize,
    max_blocks: Option<usize>,
) -> Result<Vec<GrayImage>> {
    let mut blocks = Vec::new();
    for img in images {
        blocks.extend(sample_blocks(img, stride)?);
    }
    if let Some(cap) = max_blocks {
        blocks.truncate(cap);
    }
    Ok(blocks)
}

pub fn cs_train(
    images: &[GrayImage],
    cfg: &CsTrainConfig,
    checkpoint: Option<&CheckpointPolicy>,
) -> Result<CsTrainOutcome> {
    let matrix = GaussianMatrix::for_ratio(cfg.ratio, cfg.matrix_seed)?;
    let blocks = training_blocks(images, cfg.stride, cfg.max_blocks)?;
    if blocks.len() < cfg.training.batch_size.max(1) {
        return Err(Error::InvalidArgument(format!(
            "only {} training blocks for batch size {}",
            blocks.len(),
            cfg.training.batch_size
        )));
    }
    let samples = cs_samples(&blocks, &matrix)?;
    let mut params = init_params(
        matrix.input_dims(),
        cfg.feature_maps,
        cfg.depth,
        cfg.init_seed,
    )?;
    // α = 0.5 is far below ‖HᵀH‖ ≈ (1 + √(n/m))² for column-normalized Gaussian H, which makes
    // every untrained AU step expansive; start from the majorizing step instead
    let alpha = match cfg.alpha_init {
        Some(a) => a,
        None => auto_alpha(&Operators::single(&matrix), INIT_RHO, 0.0)?,
    };
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidArgument("alpha_init must be positive".into()));
    }
    params.layers.iter_mut().for_each(|l| l.alpha = alpha);
    let out = train(
        params,
        &samples,
        &Operators::single(&matrix),
        &cfg.training,
        checkpoint,
    )?;
    Ok(CsTrainOutcome {
        matrix,
        params: out.params,
        history: out.history,
    })
}

pub fn cs_train_dir(
    dataset_dir: impl AsRef<Path>,
    cfg: &CsTrainConfig,
    checkpoint: Option<&CheckpointPolicy>,
) -> Result<CsTrainOutcome> {
    let images = load_image_dir(dataset_dir)?;
    if images.is_empty() {
        return Err(Error::InvalidArgument(
            "dataset directory contains no images".into(),
        ));
    }
    cs_train(&images, cfg, checkpoint)
}

/// Sidecar path for the matrix that goes with a checkpoint: `<ckpt>.matrix.json`.
pub fn matrix_spec_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".matrix.json");
    PathBuf::from(s)
}

pub fn write_matrix_spec(spec: &MatrixSpec, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, serde_json::to_vec_pretty(spec)?).map_err(|e| Error::io(path, e))
}

pub fn read_matrix_spec(path: impl AsRef<Path>) -> Result<MatrixSpec> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

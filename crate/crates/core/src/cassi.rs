//! Colored coded apertures and the HS/MS 3D-CASSI measurement operators.
//!
//! Each arm degrades the target cube (spatial mean pooling by `p` for the HS arm, spectral band
//! averaging by `q` for the MS arm), multiplies the result by the binary aperture of every
//! snapshot and integrates over bands onto the detector. The normalization factors `1/p²` and
//! `1/q` are part of the operator.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cube_io::{read_cube, write_cube, SpectralCube};
use crate::error::{ensure_dims, Error, Result};
use crate::operator::LinearOperator;

/// `W` binary masks of size `rows × cols × bands`.
#[derive(Debug, Clone, PartialEq)]
pub struct CodedApertureStack {
    rows: usize,
    cols: usize,
    bands: usize,
    shots: usize,
    /// layout `((w * bands + l) * rows + i) * cols + j`
    mask: Vec<u8>,
}

impl CodedApertureStack {
    pub fn from_mask(
        rows: usize,
        cols: usize,
        bands: usize,
        shots: usize,
        mask: Vec<u8>,
    ) -> Result<Self> {
        ensure_dims!(
            mask.len() == rows * cols * bands * shots,
            "mask needs {} entries, got {}",
            rows * cols * bands * shots,
            mask.len()
        );
        if mask.iter().any(|v| *v > 1) {
            return Err(Error::InvalidArgument(
                "aperture entries must be 0 or 1".into(),
            ));
        }
        Ok(Self {
            rows,
            cols,
            bands,
            shots,
            mask,
        })
    }

    /// All-ones single-shot aperture.
    pub fn open(rows: usize, cols: usize, bands: usize) -> Self {
        Self {
            rows,
            cols,
            bands,
            shots: 1,
            mask: vec![1; rows * cols * bands],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn shots(&self) -> usize {
        self.shots
    }

    #[inline]
    pub fn get(&self, w: usize, i: usize, j: usize, l: usize) -> u8 {
        self.mask[((w * self.bands + l) * self.rows + i) * self.cols + j]
    }

    /// Mask of one snapshot as a cube of 0/1 values.
    pub fn shot_cube(&self, w: usize) -> SpectralCube {
        SpectralCube::from_fn(self.rows, self.cols, self.bands, |i, j, l| {
            self.get(w, i, j, l) as f64
        })
    }

    /// Every voxel is selected by exactly one snapshot.
    pub fn is_complementary(&self) -> bool {
        let plane = self.rows * self.cols * self.bands;
        (0..plane).all(|v| {
            (0..self.shots)
                .map(|w| self.mask[w * plane + v] as usize)
                .sum::<usize>()
                == 1
        })
    }

    /// Writes one `SCUB` file per snapshot (`<stem>_shot<w>.scub`) into `dir`.
    pub fn write_shots(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for w in 0..self.shots {
            write_cube(&self.shot_cube(w), dir.join(format!("{stem}_shot{w}.scub")))?;
        }
        Ok(())
    }

    pub fn read_shots(dir: impl AsRef<Path>, stem: &str, shots: usize) -> Result<Self> {
        let dir = dir.as_ref();
        let mut mask = Vec::new();
        let mut dims = None;
        for w in 0..shots {
            let cube = read_cube(dir.join(format!("{stem}_shot{w}.scub")))?;
            match dims {
                None => dims = Some(cube.dims()),
                Some(d) => ensure_dims!(d == cube.dims(), "aperture shots differ in size"),
            }
            for v in cube.data() {
                mask.push(match *v {
                    0.0 => 0,
                    1.0 => 1,
                    other => {
                        return Err(Error::InvalidArgument(format!(
                            "aperture value {other} is not binary"
                        )))
                    }
                });
            }
        }
        let (r, c, b) = dims.ok_or_else(|| Error::InvalidArgument("zero shots".into()))?;
        Self::from_mask(r, c, b, shots, mask)
    }
}

/// Complementary random apertures: for every pixel a uniformly random permutation of the bands
/// is dealt round-robin across the `shots` snapshots, so each voxel is sensed exactly once and
/// every snapshot passes `⌊L/W⌋` or `⌈L/W⌉` bands per pixel.
pub fn design_apertures(
    rows: usize,
    cols: usize,
    bands: usize,
    shots: usize,
    seed: u64,
) -> Result<CodedApertureStack> {
    if shots < 1 || shots > bands {
        return Err(Error::InvalidArgument(format!(
            "shot count {shots} must lie in 1..={bands}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = vec![0u8; rows * cols * bands * shots];
    let mut perm: Vec<usize> = (0..bands).collect();
    for i in 0..rows {
        for j in 0..cols {
            perm.shuffle(&mut rng);
            for (k, &l) in perm.iter().enumerate() {
                let w = k % shots;
                mask[((w * bands + l) * rows + i) * cols + j] = 1;
            }
        }
    }
    CodedApertureStack::from_mask(rows, cols, bands, shots, mask)
}

/// `η = W / L`
pub fn compression_ratio(shots: usize, bands: usize) -> f64 {
    shots as f64 / bands as f64
}

/// Snapshot count for a requested ratio: `W = round(η·L)`, rejected if it falls outside `1..=L`.
pub fn shots_for_ratio(ratio: f64, bands: usize) -> Result<usize> {
    let w = (ratio * bands as f64).round();
    if !(w >= 1.0 && w <= bands as f64) {
        return Err(Error::InvalidArgument(format!(
            "ratio {ratio} over {bands} bands gives {w} shots"
        )));
    }
    Ok(w as usize)
}

/// Detector measurements of `shots` snapshots, layout `(w * rows + i) * cols + j`.
#[derive(Debug, Clone, PartialEq)]
pub struct ShotStack {
    rows: usize,
    cols: usize,
    shots: usize,
    data: Vec<f64>,
}

impl ShotStack {
    pub fn zeros(rows: usize, cols: usize, shots: usize) -> Self {
        Self {
            rows,
            cols,
            shots,
            data: vec![0.0; rows * cols * shots],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, shots: usize, data: Vec<f64>) -> Result<Self> {
        ensure_dims!(
            data.len() == rows * cols * shots,
            "{rows}x{cols}x{shots} shot stack needs {} values, got {}",
            rows * cols * shots,
            data.len()
        );
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("shot value".into()));
        }
        Ok(Self {
            rows,
            cols,
            shots,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shots(&self) -> usize {
        self.shots
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, w: usize, i: usize, j: usize) -> f64 {
        self.data[(w * self.rows + i) * self.cols + j]
    }

    /// Shots stored as a `rows × cols × shots` cube (same memory layout).
    pub fn to_cube(&self) -> SpectralCube {
        SpectralCube::from_vec(self.rows, self.cols, self.shots, self.data.clone())
            .expect("shot stack is finite")
    }

    pub fn from_cube(cube: &SpectralCube) -> Self {
        Self {
            rows: cube.rows(),
            cols: cube.cols(),
            shots: cube.bands(),
            data: cube.data().to_vec(),
        }
    }
}

/// Adds iid zero-mean Gaussian noise with variance `mean(y²) / 10^(snr/10)`.
/// An infinite SNR returns the input unchanged.
pub fn add_noise(shots: &ShotStack, snr_db: f64, seed: u64) -> Result<ShotStack> {
    let mut out = shots.clone();
    add_noise_in_place(&mut out.data, snr_db, seed)?;
    Ok(out)
}

pub(crate) fn add_noise_in_place(y: &mut [f64], snr_db: f64, seed: u64) -> Result<()> {
    if snr_db.is_infinite() && snr_db > 0.0 {
        return Ok(());
    }
    if snr_db.is_nan() {
        return Err(Error::InvalidArgument("snr is NaN".into()));
    }
    let power = y.iter().map(|v| v * v).sum::<f64>() / y.len().max(1) as f64;
    let sigma = (power / 10f64.powf(snr_db / 10.0)).sqrt();
    if sigma == 0.0 {
        return Ok(());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in y.iter_mut() {
        *v += normal.sample(&mut rng);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arm {
    Hs,
    Ms,
}

/// Matrix-free measurement operator of one arm.
#[derive(Debug, Clone)]
pub struct CassiOperator {
    arm: Arm,
    apertures: CodedApertureStack,
    p: usize,
    q: usize,
    full_dims: (usize, usize, usize),
}

impl CassiOperator {
    /// HS arm: spatial mean pooling by `p`; apertures must be `(M/p) × (N/p) × L`.
    pub fn hs(
        full_dims: (usize, usize, usize),
        p: usize,
        apertures: CodedApertureStack,
    ) -> Result<Self> {
        let (m, n, l) = full_dims;
        if p == 0 || m % p != 0 || n % p != 0 {
            return Err(Error::InvalidArgument(format!(
                "spatial factor {p} does not divide {m}x{n}"
            )));
        }
        ensure_dims!(
            (apertures.rows, apertures.cols, apertures.bands) == (m / p, n / p, l),
            "HS apertures are {}x{}x{}, expected {}x{}x{}",
            apertures.rows,
            apertures.cols,
            apertures.bands,
            m / p,
            n / p,
            l
        );
        Ok(Self {
            arm: Arm::Hs,
            apertures,
            p,
            q: 1,
            full_dims,
        })
    }

    /// MS arm: band averaging by `q`; apertures must be `M × N × (L/q)`.
    pub fn ms(
        full_dims: (usize, usize, usize),
        q: usize,
        apertures: CodedApertureStack,
    ) -> Result<Self> {
        let (m, n, l) = full_dims;
        if q == 0 || l % q != 0 {
            return Err(Error::InvalidArgument(format!(
                "spectral factor {q} does not divide {l} bands"
            )));
        }
        ensure_dims!(
            (apertures.rows, apertures.cols, apertures.bands) == (m, n, l / q),
            "MS apertures are {}x{}x{}, expected {}x{}x{}",
            apertures.rows,
            apertures.cols,
            apertures.bands,
            m,
            n,
            l / q
        );
        Ok(Self {
            arm: Arm::Ms,
            apertures,
            p: 1,
            q,
            full_dims,
        })
    }

    pub fn arm(&self) -> Arm {
        self.arm
    }

    pub fn apertures(&self) -> &CodedApertureStack {
        &self.apertures
    }

    pub fn spatial_factor(&self) -> usize {
        self.p
    }

    pub fn spectral_factor(&self) -> usize {
        self.q
    }

    pub fn full_dims(&self) -> (usize, usize, usize) {
        self.full_dims
    }

    pub fn shot_dims(&self) -> (usize, usize, usize) {
        (
            self.apertures.rows,
            self.apertures.cols,
            self.apertures.shots,
        )
    }

    pub fn forward(&self, cube: &SpectralCube) -> Result<ShotStack> {
        ensure_dims!(
            cube.dims() == self.full_dims,
            "{:?} arm expects a {:?} cube, got {:?}",
            self.arm,
            self.full_dims,
            cube.dims()
        );
        let (r, c, w) = self.shot_dims();
        let mut out = ShotStack::zeros(r, c, w);
        self.apply(cube.data(), &mut out.data);
        Ok(out)
    }

    pub fn adjoint(&self, shots: &ShotStack) -> Result<SpectralCube> {
        ensure_dims!(
            (shots.rows, shots.cols, shots.shots) == self.shot_dims(),
            "{:?} arm expects shots {:?}, got {:?}",
            self.arm,
            self.shot_dims(),
            (shots.rows, shots.cols, shots.shots)
        );
        let (m, n, l) = self.full_dims;
        let mut out = SpectralCube::zeros(m, n, l);
        self.apply_adjoint(&shots.data, out.data_mut());
        Ok(out)
    }
}

impl LinearOperator for CassiOperator {
    fn input_dims(&self) -> (usize, usize, usize) {
        self.full_dims
    }

    fn output_len(&self) -> usize {
        let (r, c, w) = self.shot_dims();
        r * c * w
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        let (m, n, l) = self.full_dims;
        let ap = &self.apertures;
        let (p, q) = (self.p, self.q);
        let weight = 1.0 / (p * p * q) as f64;
        let (ar, ac) = (ap.rows, ap.cols);
        out.iter_mut().for_each(|v| *v = 0.0);
        for w in 0..ap.shots {
            let dst = &mut out[w * ar * ac..(w + 1) * ar * ac];
            for band in 0..l {
                let coded = band / q;
                let mplane = &ap.mask
                    [(w * ap.bands + coded) * ar * ac..(w * ap.bands + coded + 1) * ar * ac];
                let src = &x[band * m * n..(band + 1) * m * n];
                for i in 0..m {
                    let row = &src[i * n..(i + 1) * n];
                    let di = (i / p) * ac;
                    for (j, v) in row.iter().enumerate() {
                        let k = di + j / p;
                        if mplane[k] != 0 {
                            dst[k] += weight * v;
                        }
                    }
                }
            }
        }
    }

    fn apply_adjoint(&self, y: &[f64], out: &mut [f64]) {
        let (m, n, l) = self.full_dims;
        let ap = &self.apertures;
        let (p, q) = (self.p, self.q);
        let weight = 1.0 / (p * p * q) as f64;
        let (ar, ac) = (ap.rows, ap.cols);
        out.iter_mut().for_each(|v| *v = 0.0);
        for w in 0..ap.shots {
            let src = &y[w * ar * ac..(w + 1) * ar * ac];
            for band in 0..l {
                let coded = band / q;
                let mplane = &ap.mask
                    [(w * ap.bands + coded) * ar * ac..(w * ap.bands + coded + 1) * ar * ac];
                let dst = &mut out[band * m * n..(band + 1) * m * n];
                for i in 0..m {
                    let di = (i / p) * ac;
                    let row = &mut dst[i * n..(i + 1) * n];
                    for (j, v) in row.iter_mut().enumerate() {
                        let k = di + j / p;
                        if mplane[k] != 0 {
                            *v += weight * src[k];
                        }
                    }
                }
            }
        }
    }
}

/// Serializable description of one arm; regenerates the apertures from the seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApertureManifest {
    pub arm: Arm,
    pub p: usize,
    pub q: usize,
    #[serde(rename = "W")]
    pub shots: usize,
    pub seed: u64,
}

impl ApertureManifest {
    pub fn build(&self, full_dims: (usize, usize, usize)) -> Result<CassiOperator> {
        let (m, n, l) = full_dims;
        match self.arm {
            Arm::Hs => {
                if self.p == 0 || m % self.p != 0 || n % self.p != 0 {
                    return Err(Error::InvalidArgument(format!(
                        "spatial factor {} does not divide {m}x{n}",
                        self.p
                    )));
                }
                let ap = design_apertures(m / self.p, n / self.p, l, self.shots, self.seed)?;
                CassiOperator::hs(full_dims, self.p, ap)
            }
            Arm::Ms => {
                if self.q == 0 || l % self.q != 0 {
                    return Err(Error::InvalidArgument(format!(
                        "spectral factor {} does not divide {l}",
                        self.q
                    )));
                }
                let ap = design_apertures(m, n, l / self.q, self.shots, self.seed)?;
                CassiOperator::ms(full_dims, self.q, ap)
            }
        }
    }
}

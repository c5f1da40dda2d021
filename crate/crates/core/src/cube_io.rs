//! Spectral cube container, the `SCUB` file format, degradation operators and image export.
//!
//! Cubes are stored band-major: band 0 as a row-major raster, then band 1, and so on.
//! The flat index of voxel `(i, j, l)` is `(l * rows + i) * cols + j`.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{ensure_dims, Error, Result};

const MAGIC: &[u8; 4] = b"SCUB";
const HEADER_LEN: usize = 16;

/// An `rows × cols × bands` volume of reals.
///
/// Also used for transform-domain images (see [`FeatureCube`]), where `bands` counts channels.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralCube {
    rows: usize,
    cols: usize,
    bands: usize,
    data: Vec<f64>,
}

/// Transform-domain image with the same layout as a [`SpectralCube`].
pub type FeatureCube = SpectralCube;

impl SpectralCube {
    pub fn zeros(rows: usize, cols: usize, bands: usize) -> Self {
        Self {
            rows,
            cols,
            bands,
            data: vec![0.0; rows * cols * bands],
        }
    }

    pub fn filled(rows: usize, cols: usize, bands: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            bands,
            data: vec![value; rows * cols * bands],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, bands: usize, data: Vec<f64>) -> Result<Self> {
        ensure_dims!(
            data.len() == rows * cols * bands,
            "{}x{}x{} cube needs {} values, got {}",
            rows,
            cols,
            bands,
            rows * cols * bands,
            data.len()
        );
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("cube entry {pos}")));
        }
        Ok(Self {
            rows,
            cols,
            bands,
            data,
        })
    }

    pub fn from_fn(
        rows: usize,
        cols: usize,
        bands: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(rows * cols * bands);
        for l in 0..bands {
            for i in 0..rows {
                for j in 0..cols {
                    data.push(f(i, j, l));
                }
            }
        }
        Self {
            rows,
            cols,
            bands,
            data,
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

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.rows, self.cols, self.bands)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, l: usize) -> usize {
        (l * self.rows + i) * self.cols + j
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, l: usize) -> f64 {
        self.data[self.index(i, j, l)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, l: usize, value: f64) {
        let idx = self.index(i, j, l);
        self.data[idx] = value;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn band(&self, l: usize) -> &[f64] {
        let plane = self.rows * self.cols;
        &self.data[l * plane..(l + 1) * plane]
    }

    pub fn band_mut(&mut self, l: usize) -> &mut [f64] {
        let plane = self.rows * self.cols;
        &mut self.data[l * plane..(l + 1) * plane]
    }

    /// Spectrum of pixel `(i, j)`.
    pub fn pixel(&self, i: usize, j: usize) -> Vec<f64> {
        (0..self.bands).map(|l| self.get(i, j, l)).collect()
    }

    pub fn same_shape(&self, other: &SpectralCube) -> bool {
        self.dims() == other.dims()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn dot(&self, other: &SpectralCube) -> f64 {
        dot(&self.data, &other.data)
    }

    pub fn norm_sq(&self) -> f64 {
        dot(&self.data, &self.data)
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &SpectralCube) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// `self += a * x`
    pub fn axpy(&mut self, a: f64, x: &SpectralCube) {
        axpy(&mut self.data, a, &x.data);
    }

    pub fn scale(&mut self, a: f64) {
        self.data.iter_mut().for_each(|v| *v *= a);
    }

    pub fn scaled(&self, a: f64) -> SpectralCube {
        let mut out = self.clone();
        out.scale(a);
        out
    }

    pub fn add(&self, other: &SpectralCube) -> SpectralCube {
        let mut out = self.clone();
        out.axpy(1.0, other);
        out
    }

    pub fn sub(&self, other: &SpectralCube) -> SpectralCube {
        let mut out = self.clone();
        out.axpy(-1.0, other);
        out
    }

    pub fn min_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Divides by the global maximum so the peak becomes 1. All-zero cubes are returned as is.
    pub fn normalized_to_unit_peak(&self) -> SpectralCube {
        let peak = self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        if peak == 0.0 {
            return self.clone();
        }
        self.scaled(1.0 / peak)
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    y.iter_mut().zip(x).for_each(|(y, x)| *y += a * x);
}

/// Single-band image.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl GrayImage {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        ensure_dims!(
            data.len() == rows * cols,
            "{}x{} image needs {} values, got {}",
            rows,
            cols,
            rows * cols,
            data.len()
        );
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image pixel".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Views the image as a one-band cube.
    pub fn to_cube(&self) -> SpectralCube {
        SpectralCube {
            rows: self.rows,
            cols: self.cols,
            bands: 1,
            data: self.data.clone(),
        }
    }

    pub fn from_cube_band(cube: &SpectralCube, band: usize) -> Result<Self> {
        if band >= cube.bands() {
            return Err(Error::InvalidArgument(format!(
                "band {band} out of range for {} bands",
                cube.bands()
            )));
        }
        Self::from_vec(cube.rows(), cube.cols(), cube.band(band).to_vec())
    }

    /// Reads an 8- or 16-bit grayscale PNG/PGM (color images are converted to luma), scaled to [0, 1].
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path.as_ref())?.into_luma16();
        let (w, h) = img.dimensions();
        let data = img.pixels().map(|p| p.0[0] as f64 / 65535.0).collect();
        Self::from_vec(h as usize, w as usize, data)
    }

    /// Writes an 8-bit grayscale image; values are clamped to [0, 1] and scaled to [0, 255].
    /// The format follows the extension (`.png` or `.pgm`).
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|v| to_u8(*v)).collect();
        let img = image::GrayImage::from_raw(self.cols as u32, self.rows as u32, bytes)
            .expect("buffer length matches dims");
        img.save(path.as_ref())?;
        Ok(())
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes `cube` in the `SCUB` format: `"SCUB"`, u32 LE rows, cols, bands, then f32 LE payload.
pub fn write_cube(cube: &SpectralCube, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if !cube.is_finite() {
        return Err(Error::NonFinite(format!(
            "refusing to write {}",
            path.display()
        )));
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut header = Vec::with_capacity(HEADER_LEN);
    header.extend_from_slice(MAGIC);
    for d in [cube.rows, cube.cols, cube.bands] {
        let d = u32::try_from(d)
            .map_err(|_| Error::InvalidArgument(format!("dimension {d} exceeds u32")))?;
        header.extend_from_slice(&d.to_le_bytes());
    }
    let mut payload = Vec::with_capacity(cube.len() * 4);
    for v in &cube.data {
        payload.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    w.write_all(&header)
        .and_then(|_| w.write_all(&payload))
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn read_cube(path: impl AsRef<Path>) -> Result<SpectralCube> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_cube(&bytes)
}

pub(crate) fn decode_cube(bytes: &[u8]) -> Result<SpectralCube> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::MalformedHeader(format!(
            "{} bytes is shorter than the 16-byte header",
            bytes.len()
        )));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::MalformedHeader("bad magic".into()));
    }
    let dim =
        |k: usize| u32::from_le_bytes(bytes[4 + 4 * k..8 + 4 * k].try_into().unwrap()) as usize;
    let (rows, cols, bands) = (dim(0), dim(1), dim(2));
    let count = rows
        .checked_mul(cols)
        .and_then(|v| v.checked_mul(bands))
        .ok_or_else(|| Error::MalformedHeader("dimensions overflow".into()))?;
    let payload = &bytes[HEADER_LEN..];
    ensure_dims!(
        payload.len() == count * 4,
        "header declares {rows}x{cols}x{bands} ({} bytes) but payload has {} bytes",
        count * 4,
        payload.len()
    );
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    SpectralCube::from_vec(rows, cols, bands, data)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CubeSidecar {
    pub wavelengths_nm: Vec<f64>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Reads the optional `<file>.json` wavelength sidecar.
pub fn read_sidecar(path: impl AsRef<Path>) -> Result<Option<CubeSidecar>> {
    let side = sidecar_path(path.as_ref());
    if !side.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    Ok(Some(serde_json::from_str(&text)?))
}

pub fn write_sidecar(path: impl AsRef<Path>, sidecar: &CubeSidecar) -> Result<()> {
    let side = sidecar_path(path.as_ref());
    fs::write(&side, serde_json::to_string_pretty(sidecar)?).map_err(|e| Error::io(&side, e))
}

/// Reads a cube and rescales it so the global peak is 1.
pub fn ingest_cube(path: impl AsRef<Path>) -> Result<SpectralCube> {
    Ok(read_cube(path)?.normalized_to_unit_peak())
}

/// Mean-pools each `p × p` spatial block, per band.
pub fn spatial_decimate(cube: &SpectralCube, p: usize) -> Result<SpectralCube> {
    if p == 0 || !cube.rows.is_multiple_of(p) || !cube.cols.is_multiple_of(p) {
        return Err(Error::InvalidArgument(format!(
            "spatial factor {p} does not divide {}x{}",
            cube.rows, cube.cols
        )));
    }
    let (mr, nc) = (cube.rows / p, cube.cols / p);
    let mut out = SpectralCube::zeros(mr, nc, cube.bands);
    let inv = 1.0 / (p * p) as f64;
    for l in 0..cube.bands {
        for i in 0..cube.rows {
            for j in 0..cube.cols {
                let idx = out.index(i / p, j / p, l);
                out.data[idx] += cube.get(i, j, l) * inv;
            }
        }
    }
    Ok(out)
}

/// Averages each run of `q` contiguous bands.
pub fn spectral_decimate(cube: &SpectralCube, q: usize) -> Result<SpectralCube> {
    if q == 0 || !cube.bands.is_multiple_of(q) {
        return Err(Error::InvalidArgument(format!(
            "spectral factor {q} does not divide {} bands",
            cube.bands
        )));
    }
    let lo = cube.bands / q;
    let plane = cube.rows * cube.cols;
    let mut out = SpectralCube::zeros(cube.rows, cube.cols, lo);
    let inv = 1.0 / q as f64;
    for l in 0..cube.bands {
        let dst = &mut out.data[(l / q) * plane..(l / q + 1) * plane];
        axpy(dst, inv, cube.band(l));
    }
    Ok(out)
}

/// Three bands of `cube`, each min-max stretched to [0, 1] (i.e. [0, 255] once exported).
/// A constant band maps to 0.
pub fn rgb_composite(
    cube: &SpectralCube,
    band_r: usize,
    band_g: usize,
    band_b: usize,
) -> Result<[GrayImage; 3]> {
    let channel = |band: usize| -> Result<GrayImage> {
        let img = GrayImage::from_cube_band(cube, band)?;
        let lo = img.data.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = img.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        let data = img
            .data
            .iter()
            .map(|v| if span > 0.0 { (v - lo) / span } else { 0.0 })
            .collect();
        GrayImage::from_vec(img.rows, img.cols, data)
    };
    Ok([channel(band_r)?, channel(band_g)?, channel(band_b)?])
}

/// Writes an 8-bit RGB PNG from three channel images with values in [0, 1].
pub fn write_rgb(channels: &[GrayImage; 3], path: impl AsRef<Path>) -> Result<()> {
    let (rows, cols) = (channels[0].rows, channels[0].cols);
    ensure_dims!(
        channels.iter().all(|c| c.rows == rows && c.cols == cols),
        "rgb channels differ in size"
    );
    let mut bytes = Vec::with_capacity(rows * cols * 3);
    for k in 0..rows * cols {
        for c in channels {
            bytes.push(to_u8(c.data[k]));
        }
    }
    let img = image::RgbImage::from_raw(cols as u32, rows as u32, bytes)
        .expect("buffer length matches dims");
    img.save(path.as_ref())?;
    Ok(())
}

//! Seeded synthetic scenes: piecewise-smooth spectral cubes and grayscale images.
//!
//! Cubes are a sum of soft-edged blobs, each carrying a smooth spectral signature (a mixture of
//! two Gaussian bumps over the band axis) on top of a weak background gradient, rescaled to a
//! unit peak. They stand in for real hyperspectral scenes in tests and demos.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cube_io::{GrayImage, SpectralCube};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub rows: usize,
    pub cols: usize,
    pub bands: usize,
    pub seed: u64,
    #[serde(default = "default_blobs")]
    pub blobs: usize,
}

fn default_blobs() -> usize {
    6
}

struct Blob {
    ci: f64,
    cj: f64,
    radius: f64,
    softness: f64,
    amplitude: f64,
    signature: Vec<f64>,
}

fn signature(bands: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let centers = [rng.random::<f64>(), rng.random::<f64>()];
    let widths = [
        0.15 + 0.35 * rng.random::<f64>(),
        0.15 + 0.35 * rng.random::<f64>(),
    ];
    let mix = rng.random::<f64>();
    (0..bands)
        .map(|l| {
            let t = if bands > 1 {
                l as f64 / (bands - 1) as f64
            } else {
                0.5
            };
            let g = |c: f64, w: f64| (-(t - c).powi(2) / (2.0 * w * w)).exp();
            0.15 + mix * g(centers[0], widths[0]) + (1.0 - mix) * g(centers[1], widths[1])
        })
        .collect()
}

/// Deterministic scene for `spec`, scaled to a unit peak.
pub fn synthetic_cube(spec: &SyntheticSpec) -> Result<SpectralCube> {
    let SyntheticSpec {
        rows,
        cols,
        bands,
        seed,
        blobs,
    } = *spec;
    if rows == 0 || cols == 0 || bands == 0 {
        return Err(Error::InvalidArgument(
            "synthetic cube needs nonzero dimensions".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = rows.min(cols) as f64;
    let blobs: Vec<Blob> = (0..blobs)
        .map(|_| Blob {
            ci: rng.random::<f64>() * rows as f64,
            cj: rng.random::<f64>() * cols as f64,
            radius: scale * (0.12 + 0.25 * rng.random::<f64>()),
            softness: 0.5 + 2.0 * rng.random::<f64>(),
            amplitude: 0.4 + 0.6 * rng.random::<f64>(),
            signature: signature(bands, &mut rng),
        })
        .collect();
    let background = signature(bands, &mut rng);
    let (gi, gj) = (rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5);
    let cube = SpectralCube::from_fn(rows, cols, bands, |i, j, l| {
        let ramp = 0.5 + gi * i as f64 / rows as f64 + gj * j as f64 / cols as f64;
        let mut v = 0.2 * background[l] * ramp.max(0.0);
        for b in &blobs {
            let dist = ((i as f64 - b.ci).powi(2) + (j as f64 - b.cj).powi(2)).sqrt();
            // logistic edge: a plateau with a soft rim
            let w = 1.0 / (1.0 + ((dist - b.radius) / b.softness).exp());
            v += b.amplitude * w * b.signature[l];
        }
        v
    });
    let peak = cube.max_value();
    Ok(if peak > 0.0 {
        cube.scaled(1.0 / peak)
    } else {
        cube
    })
}

/// `count` cubes with seeds `base_seed, base_seed + 1, …`.
pub fn synthetic_cubes(
    rows: usize,
    cols: usize,
    bands: usize,
    count: usize,
    base_seed: u64,
) -> Result<Vec<SpectralCube>> {
    (0..count as u64)
        .map(|k| {
            synthetic_cube(&SyntheticSpec {
                rows,
                cols,
                bands,
                seed: base_seed + k,
                blobs: default_blobs(),
            })
        })
        .collect()
}

/// Grayscale scene in [0, 1]: soft blobs, a few straight edges, and a mild oriented texture.
pub fn synthetic_image(rows: usize, cols: usize, seed: u64) -> Result<GrayImage> {
    let cube = synthetic_cube(&SyntheticSpec {
        rows,
        cols,
        bands: 1,
        seed,
        blobs: 8,
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0001);
    let edges: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            let theta = rng.random::<f64>() * std::f64::consts::PI;
            let offset = (rng.random::<f64>() - 0.5) * rows.min(cols) as f64;
            (
                theta.cos(),
                theta.sin(),
                offset,
                0.25 * (rng.random::<f64>() - 0.5),
            )
        })
        .collect();
    let freq = 0.2 + 0.5 * rng.random::<f64>();
    let phase = rng.random::<f64>() * std::f64::consts::TAU;
    let (ci, cj) = (rows as f64 / 2.0, cols as f64 / 2.0);
    let mut data = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            let (x, y) = (i as f64 - ci, j as f64 - cj);
            let mut v = 0.7 * cube.get(i, j, 0);
            for (c, s, off, step) in &edges {
                if c * x + s * y > *off {
                    v += step;
                }
            }
            v += 0.05 * (freq * (x + 0.5 * y) + phase).sin();
            data.push(v);
        }
    }
    let (lo, hi) = data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
            (a.min(*v), b.max(*v))
        });
    let span = if hi > lo { hi - lo } else { 1.0 };
    data.iter_mut().for_each(|v| *v = (*v - lo) / span);
    GrayImage::from_vec(rows, cols, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubes_are_deterministic_and_unit_peak() {
        let spec = SyntheticSpec {
            rows: 16,
            cols: 12,
            bands: 8,
            seed: 3,
            blobs: 4,
        };
        let a = synthetic_cube(&spec).unwrap();
        assert_eq!(a, synthetic_cube(&spec).unwrap());
        assert_eq!(a.dims(), (16, 12, 8));
        assert!((a.max_value() - 1.0).abs() < 1e-12);
        assert!(a.min_value() >= 0.0);
        assert_ne!(
            a,
            synthetic_cube(&SyntheticSpec { seed: 4, ..spec }).unwrap()
        );
    }

    #[test]
    fn spectra_vary_smoothly() {
        let c = synthetic_cube(&SyntheticSpec {
            rows: 8,
            cols: 8,
            bands: 31,
            seed: 1,
            blobs: 6,
        })
        .unwrap();
        for i in 0..8 {
            let px = c.pixel(i, i);
            let jump = px
                .windows(2)
                .map(|w| (w[1] - w[0]).abs())
                .fold(0.0, f64::max);
            assert!(jump < 0.2, "{jump}");
        }
    }

    #[test]
    fn images_span_unit_range() {
        let img = synthetic_image(40, 50, 2).unwrap();
        let (lo, hi) = img
            .data()
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
                (a.min(*v), b.max(*v))
            });
        assert_eq!((lo, hi), (0.0, 1.0));
        assert_eq!(img, synthetic_image(40, 50, 2).unwrap());
    }
}

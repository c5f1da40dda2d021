//! Reconstruction quality: PSNR (dB), SSIM (per-band mean), SAM (radians).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cube_io::{GrayImage, SpectralCube};
use crate::error::{ensure_dims, Error, Result};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// PSNR in dB over all voxels; `f64::INFINITY` when the cubes are identical.
pub fn psnr(reference: &SpectralCube, estimate: &SpectralCube, peak: f64) -> Result<f64> {
    ensure_dims!(
        reference.same_shape(estimate),
        "psnr: {:?} vs {:?}",
        reference.dims(),
        estimate.dims()
    );
    psnr_slices(reference.data(), estimate.data(), peak)
}

pub(crate) fn psnr_slices(a: &[f64], b: &[f64], peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(Error::InvalidArgument("psnr peak must be positive".into()));
    }
    if a.is_empty() {
        return Err(Error::InvalidArgument("psnr of an empty signal".into()));
    }
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut g = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (k, v) in g.iter_mut().enumerate() {
        let x = k as f64 - c;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);
    g
}

/// Separable "valid" filtering of a row-major plane.
fn filter_valid(x: &[f64], rows: usize, cols: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let w = SSIM_WINDOW;
    let (orows, ocols) = (rows - w + 1, cols - w + 1);
    let mut horiz = vec![0.0; rows * ocols];
    for i in 0..rows {
        for j in 0..ocols {
            horiz[i * ocols + j] = (0..w).map(|k| g[k] * x[i * cols + j + k]).sum();
        }
    }
    let mut out = vec![0.0; orows * ocols];
    for i in 0..orows {
        for j in 0..ocols {
            out[i * ocols + j] = (0..w).map(|k| g[k] * horiz[(i + k) * ocols + j]).sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], rows: usize, cols: usize, peak: f64) -> Result<f64> {
    if rows < SSIM_WINDOW || cols < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "ssim needs at least {SSIM_WINDOW}×{SSIM_WINDOW} pixels, got {rows}×{cols}"
        )));
    }
    if !(peak > 0.0) {
        return Err(Error::InvalidArgument("ssim peak must be positive".into()));
    }
    let g = gaussian_taps();
    let c1 = (SSIM_K1 * peak).powi(2);
    let c2 = (SSIM_K2 * peak).powi(2);
    let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> {
        a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect()
    };
    let mu_a = filter_valid(a, rows, cols, &g);
    let mu_b = filter_valid(b, rows, cols, &g);
    let e_aa = filter_valid(&prod(&|x, _| x * x), rows, cols, &g);
    let e_bb = filter_valid(&prod(&|_, y| y * y), rows, cols, &g);
    let e_ab = filter_valid(&prod(&|x, y| x * y), rows, cols, &g);
    let n = mu_a.len();
    let mut total = 0.0;
    for k in 0..n {
        let (ma, mb) = (mu_a[k], mu_b[k]);
        let va = e_aa[k] - ma * ma;
        let vb = e_bb[k] - mb * mb;
        let cov = e_ab[k] - ma * mb;
        total +=
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / n as f64)
}

/// SSIM of two grayscale images (11×11 Gaussian window, σ = 1.5, valid positions only).
pub fn ssim_band(reference: &GrayImage, estimate: &GrayImage, peak: f64) -> Result<f64> {
    ensure_dims!(
        reference.rows() == estimate.rows() && reference.cols() == estimate.cols(),
        "ssim: {}×{} vs {}×{}",
        reference.rows(),
        reference.cols(),
        estimate.rows(),
        estimate.cols()
    );
    ssim_plane(
        reference.data(),
        estimate.data(),
        reference.rows(),
        reference.cols(),
        peak,
    )
}

/// Mean of per-band SSIM.
pub fn ssim(reference: &SpectralCube, estimate: &SpectralCube, peak: f64) -> Result<f64> {
    ensure_dims!(
        reference.same_shape(estimate),
        "ssim: {:?} vs {:?}",
        reference.dims(),
        estimate.dims()
    );
    let (m, n, l) = reference.dims();
    let per_band: Vec<f64> = (0..l)
        .into_par_iter()
        .map(|b| ssim_plane(reference.band(b), estimate.band(b), m, n, peak))
        .collect::<Result<_>>()?;
    Ok(per_band.iter().sum::<f64>() / l as f64)
}

/// Mean spectral angle in radians over pixels whose spectra are nonzero in both cubes.
pub fn sam(reference: &SpectralCube, estimate: &SpectralCube) -> Result<f64> {
    ensure_dims!(
        reference.same_shape(estimate),
        "sam: {:?} vs {:?}",
        reference.dims(),
        estimate.dims()
    );
    let (m, n, l) = reference.dims();
    let plane = m * n;
    let (r, e) = (reference.data(), estimate.data());
    let mut total = 0.0;
    let mut count = 0usize;
    for px in 0..plane {
        let (mut re, mut rr, mut ee) = (0.0, 0.0, 0.0);
        for b in 0..l {
            let (x, y) = (r[b * plane + px], e[b * plane + px]);
            re += x * y;
            rr += x * x;
            ee += y * y;
        }
        if rr == 0.0 || ee == 0.0 {
            continue;
        }
        total += (re / (rr.sqrt() * ee.sqrt())).clamp(-1.0, 1.0).acos();
        count += 1;
    }
    if count == 0 {
        return Err(Error::InvalidArgument(
            "sam: every pixel has a zero spectrum".into(),
        ));
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr_db: f64,
    pub ssim: f64,
    pub sam_rad: f64,
}

impl MetricReport {
    /// All three metrics at peak 1. SSIM is skipped (NaN) for images smaller than the window;
    /// SAM is NaN when every pixel is degenerate.
    pub fn compute(reference: &SpectralCube, estimate: &SpectralCube) -> Result<Self> {
        let psnr_db = psnr(reference, estimate, 1.0)?;
        let ssim = if reference.rows() >= SSIM_WINDOW && reference.cols() >= SSIM_WINDOW {
            ssim(reference, estimate, 1.0)?
        } else {
            f64::NAN
        };
        let sam_rad = match sam(reference, estimate) {
            Ok(v) => v,
            Err(Error::InvalidArgument(_)) => f64::NAN,
            Err(e) => return Err(e),
        };
        Ok(Self {
            psnr_db,
            ssim,
            sam_rad,
        })
    }
}

/// `inf` for the exact-match sentinel, otherwise two decimals.
pub fn format_db(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else {
        format!("{v:.2}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cube(m: usize, n: usize, l: usize, seed: u64) -> SpectralCube {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SpectralCube::from_fn(m, n, l, |_, _, _| rng.random::<f64>())
    }

    /// Direct 2-D loop over every window position with explicit weighted moments.
    fn ssim_oracle(a: &[f64], b: &[f64], rows: usize, cols: usize) -> f64 {
        let w = 11usize;
        let mut win = vec![0.0; w * w];
        let mut s = 0.0;
        for u in 0..w {
            for v in 0..w {
                let (du, dv) = (u as f64 - 5.0, v as f64 - 5.0);
                win[u * w + v] = (-(du * du + dv * dv) / 4.5).exp();
                s += win[u * w + v];
            }
        }
        win.iter_mut().for_each(|x| *x /= s);
        let (c1, c2) = (1e-4, 9e-4);
        let mut acc = 0.0;
        let mut cnt = 0.0;
        for i in 0..=rows - w {
            for j in 0..=cols - w {
                let (mut ma, mut mb) = (0.0, 0.0);
                for u in 0..w {
                    for v in 0..w {
                        let k = (i + u) * cols + j + v;
                        ma += win[u * w + v] * a[k];
                        mb += win[u * w + v] * b[k];
                    }
                }
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for u in 0..w {
                    for v in 0..w {
                        let k = (i + u) * cols + j + v;
                        va += win[u * w + v] * (a[k] - ma).powi(2);
                        vb += win[u * w + v] * (b[k] - mb).powi(2);
                        cov += win[u * w + v] * (a[k] - ma) * (b[k] - mb);
                    }
                }
                acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                cnt += 1.0;
            }
        }
        acc / cnt
    }

    #[test]
    fn psnr_examples() {
        let a = random_cube(4, 4, 2, 1);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        let z = SpectralCube::zeros(4, 4, 2);
        let c = SpectralCube::filled(4, 4, 2, 0.1);
        assert_abs_diff_eq!(psnr(&z, &c, 1.0).unwrap(), 20.0, epsilon = 1e-12);
        assert!(psnr(&z, &SpectralCube::zeros(4, 4, 3), 1.0).is_err());
        assert_eq!(format_db(f64::INFINITY), "inf");
        assert_eq!(format_db(20.0), "20.00");
    }

    #[test]
    fn psnr_is_symmetric() {
        let a = random_cube(5, 5, 3, 2);
        let b = random_cube(5, 5, 3, 3);
        assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
    }

    #[test]
    fn ssim_matches_scalar_oracle() {
        let a = random_cube(19, 23, 1, 4);
        let b = random_cube(19, 23, 1, 5);
        let fast = ssim(&a, &b, 1.0).unwrap();
        let slow = ssim_oracle(a.data(), b.data(), 19, 23);
        assert_abs_diff_eq!(fast, slow, epsilon = 1e-10);
    }

    #[test]
    fn ssim_identity_inversion_and_size() {
        let a = random_cube(16, 16, 3, 6);
        assert_abs_diff_eq!(ssim(&a, &a, 1.0).unwrap(), 1.0, epsilon = 1e-12);
        let mut inv = a.clone();
        inv.data_mut().iter_mut().for_each(|v| *v = 1.0 - *v);
        let s = ssim(&a, &inv, 1.0).unwrap();
        let oracle: f64 = (0..3)
            .map(|b| ssim_oracle(a.band(b), inv.band(b), 16, 16))
            .sum::<f64>()
            / 3.0;
        assert_abs_diff_eq!(s, oracle, epsilon = 1e-10);
        assert!(s < 0.5);
        assert!(ssim(&random_cube(10, 16, 1, 1), &random_cube(10, 16, 1, 2), 1.0).is_err());
        assert!(ssim(&a, &random_cube(16, 16, 2, 1), 1.0).is_err());
    }

    #[test]
    fn ssim_band_agrees_with_cube() {
        let a = random_cube(12, 14, 1, 7);
        let b = random_cube(12, 14, 1, 8);
        let ga = GrayImage::from_cube_band(&a, 0).unwrap();
        let gb = GrayImage::from_cube_band(&b, 0).unwrap();
        assert_eq!(
            ssim_band(&ga, &gb, 1.0).unwrap(),
            ssim(&a, &b, 1.0).unwrap()
        );
    }

    #[test]
    fn sam_examples() {
        let a = random_cube(4, 5, 6, 9);
        assert_abs_diff_eq!(sam(&a, &a.scaled(3.5)).unwrap(), 0.0, epsilon = 1e-7);
        let e1 = SpectralCube::from_fn(3, 3, 2, |_, _, l| if l == 0 { 1.0 } else { 0.0 });
        let e2 = SpectralCube::from_fn(3, 3, 2, |_, _, l| if l == 1 { 2.0 } else { 0.0 });
        assert_abs_diff_eq!(
            sam(&e1, &e2).unwrap(),
            std::f64::consts::FRAC_PI_2,
            epsilon = 1e-15
        );
        let z = SpectralCube::zeros(3, 3, 2);
        assert!(sam(&z, &e1).is_err());
    }

    #[test]
    fn sam_matches_pixel_oracle_and_skips_zero_pixels() {
        let a = random_cube(6, 4, 5, 10);
        let mut b = random_cube(6, 4, 5, 11);
        for l in 0..5 {
            b.set(2, 3, l, 0.0);
        }
        let mut acc = 0.0;
        let mut cnt = 0.0;
        for i in 0..6 {
            for j in 0..4 {
                let (r, e) = (a.pixel(i, j), b.pixel(i, j));
                let ne: f64 = e.iter().map(|v| v * v).sum::<f64>().sqrt();
                if ne == 0.0 {
                    continue;
                }
                let nr: f64 = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                let d: f64 = r.iter().zip(&e).map(|(x, y)| x * y).sum();
                acc += (d / (nr * ne)).acos();
                cnt += 1.0;
            }
        }
        assert_eq!(cnt, 23.0);
        assert_abs_diff_eq!(sam(&a, &b).unwrap(), acc / cnt, epsilon = 1e-12);
    }

    #[test]
    fn report_for_identical_cubes() {
        let a = random_cube(12, 12, 2, 12);
        let r = MetricReport::compute(&a, &a).unwrap();
        assert_eq!(r.psnr_db, f64::INFINITY);
        assert_abs_diff_eq!(r.ssim, 1.0, epsilon = 1e-12);
        assert!(r.sam_rad.abs() < 1e-7);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn sam_invariant_to_positive_pixel_scaling(seed in 0u64..1000, s in 0.1f64..10.0) {
            let a = random_cube(4, 4, 3, seed);
            let b = random_cube(4, 4, 3, seed + 1);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
            let mut scaled = b.clone();
            for i in 0..4 {
                for j in 0..4 {
                    let k = s * (0.5 + rng.random::<f64>());
                    for l in 0..3 {
                        scaled.set(i, j, l, b.get(i, j, l) * k);
                    }
                }
            }
            prop_assert!((sam(&a, &b).unwrap() - sam(&a, &scaled).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn ssim_bounded_and_reflexive(seed in 0u64..1000) {
            let a = random_cube(12, 13, 1, seed);
            let b = random_cube(12, 13, 1, seed + 7);
            let s = ssim(&a, &b, 1.0).unwrap();
            prop_assert!((-1.0..=1.0).contains(&s));
            prop_assert!((ssim(&b, &b, 1.0).unwrap() - 1.0).abs() < 1e-12);
        }
    }
}

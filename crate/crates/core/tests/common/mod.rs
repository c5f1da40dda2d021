#![allow(dead_code)]

use cassi_fusion::cassi::{CassiOperator, CodedApertureStack};
use cassi_fusion::operator::LinearOperator;

/// Dense matrix in the column-major vectorization: a cube voxel `(i, j, ℓ)` of an
/// `M × N × L` cube sits at `i + jM + ℓMN`, a detector pixel `(i, j)` of shot `w` at
/// `i + j·rows + w·rows·cols`.
pub struct Dense {
    pub rows: usize,
    pub cols: usize,
    pub a: Vec<f64>,
}

impl Dense {
    fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            a: vec![0.0; rows * cols],
        }
    }

    fn add(&mut self, u: usize, v: usize, x: f64) {
        self.a[u * self.cols + v] += x;
    }

    pub fn mul(&self, x: &[f64]) -> Vec<f64> {
        (0..self.rows)
            .map(|u| {
                (0..self.cols)
                    .map(|v| self.a[u * self.cols + v] * x[v])
                    .sum()
            })
            .collect()
    }

    pub fn mul_t(&self, y: &[f64]) -> Vec<f64> {
        (0..self.cols)
            .map(|v| {
                (0..self.rows)
                    .map(|u| self.a[u * self.cols + v] * y[u])
                    .sum()
            })
            .collect()
    }
}

/// MS arm: `u = i + jM + wMN`, `v = i + jM + (ℓq + z)MN`, entry `(1/q)·B⁽ʷ⁾(i, j, ℓ)`.
pub fn dense_ms(ap: &CodedApertureStack, full: (usize, usize, usize), q: usize) -> Dense {
    let (m, n, l) = full;
    let w_count = ap.shots();
    let mut d = Dense::zeros(m * n * w_count, m * n * l);
    for w in 0..w_count {
        for i in 0..m {
            for j in 0..n {
                for lc in 0..l / q {
                    for z in 0..q {
                        let u = i + j * m + w * m * n;
                        let v = i + j * m + (lc * q + z) * m * n;
                        d.add(u, v, ap.get(w, i, j, lc) as f64 / q as f64);
                    }
                }
            }
        }
    }
    d
}

/// HS arm: `u = i + jM_hs + wM_hsN_hs`, `v = (ip + z1) + (jp + z2)M + ℓMN`, entry `(1/p²)·B⁽ʷ⁾(i, j, ℓ)`.
pub fn dense_hs(ap: &CodedApertureStack, full: (usize, usize, usize), p: usize) -> Dense {
    let (m, n, l) = full;
    let (mh, nh) = (m / p, n / p);
    let w_count = ap.shots();
    let mut d = Dense::zeros(mh * nh * w_count, m * n * l);
    for w in 0..w_count {
        for i in 0..mh {
            for j in 0..nh {
                for band in 0..l {
                    for z1 in 0..p {
                        for z2 in 0..p {
                            let u = i + j * mh + w * mh * nh;
                            let v = (i * p + z1) + (j * p + z2) * m + band * m * n;
                            d.add(u, v, ap.get(w, i, j, band) as f64 / (p * p) as f64);
                        }
                    }
                }
            }
        }
    }
    d
}

/// Column-major vector of a row-major band-planar buffer of an `rows × cols × depth` array.
pub fn to_col_major(x: &[f64], rows: usize, cols: usize, depth: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for k in 0..depth {
        for i in 0..rows {
            for j in 0..cols {
                out[i + j * rows + k * rows * cols] = x[(k * rows + i) * cols + j];
            }
        }
    }
    out
}

pub fn from_col_major(x: &[f64], rows: usize, cols: usize, depth: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for k in 0..depth {
        for i in 0..rows {
            for j in 0..cols {
                out[(k * rows + i) * cols + j] = x[i + j * rows + k * rows * cols];
            }
        }
    }
    out
}

/// SSIM by direct evaluation of every 11×11 window (Gaussian σ = 1.5, peak 1).
pub fn ssim_oracle(a: &[f64], b: &[f64], rows: usize, cols: usize) -> f64 {
    let w = 11usize;
    let mut win = vec![0.0; w * w];
    for u in 0..w {
        for v in 0..w {
            let (du, dv) = (u as f64 - 5.0, v as f64 - 5.0);
            win[u * w + v] = (-(du * du + dv * dv) / (2.0 * 1.5 * 1.5)).exp();
        }
    }
    let s: f64 = win.iter().sum();
    win.iter_mut().for_each(|x| *x /= s);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let (mut acc, mut cnt) = (0.0, 0.0);
    for i in 0..=rows - w {
        for j in 0..=cols - w {
            let at = |x: &[f64], u: usize, v: usize| x[(i + u) * cols + j + v];
            let (mut ma, mut mb) = (0.0, 0.0);
            for u in 0..w {
                for v in 0..w {
                    ma += win[u * w + v] * at(a, u, v);
                    mb += win[u * w + v] * at(b, u, v);
                }
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for u in 0..w {
                for v in 0..w {
                    let (x, y) = (at(a, u, v) - ma, at(b, u, v) - mb);
                    va += win[u * w + v] * x * x;
                    vb += win[u * w + v] * y * y;
                    cov += win[u * w + v] * x * y;
                }
            }
            acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            cnt += 1.0;
        }
    }
    acc / cnt
}

/// Largest entry-wise difference between the matrix-free operator and the dense oracle,
/// probing forward with every basis vector and the adjoint with every detector basis vector.
pub fn max_entry_diff(op: &CassiOperator, dense: &Dense, shot: (usize, usize, usize)) -> f64 {
    let (m, n, l) = op.full_dims();
    let (sr, sc, sw) = shot;
    let mut worst: f64 = 0.0;
    let mut out = vec![0.0; op.output_len()];
    for v in 0..m * n * l {
        let mut e = vec![0.0; m * n * l];
        e[v] = 1.0;
        op.apply(&from_col_major(&e, m, n, l), &mut out);
        let got = to_col_major(&out, sr, sc, sw);
        for u in 0..dense.rows {
            worst = worst.max((got[u] - dense.a[u * dense.cols + v]).abs());
        }
    }
    let mut back = vec![0.0; m * n * l];
    for u in 0..dense.rows {
        let mut e = vec![0.0; dense.rows];
        e[u] = 1.0;
        op.apply_adjoint(&from_col_major(&e, sr, sc, sw), &mut back);
        let got = to_col_major(&back, m, n, l);
        for v in 0..dense.cols {
            worst = worst.max((got[v] - dense.a[u * dense.cols + v]).abs());
        }
    }
    worst
}

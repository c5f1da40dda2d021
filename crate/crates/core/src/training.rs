//! Training for LADMM-Net: loss, reverse-mode gradients, finite-difference verification, Adam.
//!
//! The loss for a batch of `B` samples is
//!
//! ```text
//! data = (1/B) Σ_b ‖f̂_b − f_b‖²
//! inv  = (1/(BK)) Σ_b Σ_k ‖𝓖̃⁽ᵏ⁾(𝓖⁽ᵏ⁾(f_b⁽ᵏ⁾)) − f_b⁽ᵏ⁾‖²
//! total = data + γ·inv
//! ```
//!
//! Gradients come from a tape recorded per layer during the forward pass and swept backwards
//! through the NRU (inverse transform, multiplier, soft-threshold, forward transform) and the AU.
//! Subgradient conventions: `ReLU'(0) = 0`; the soft-threshold derivative is 0 on `|u| ≤ λ̃`.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cube_io::{dot, FeatureCube, SpectralCube};
use crate::error::{ensure_dims, Error, Result};
use crate::net::{au_forward_parts, init_f0, save_checkpoint, LadmmNetParams};
use crate::operator::{Measurements, Operators};
use crate::transforms::{soft_threshold_scalar, ConvTransformCache};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// weight of the invertibility term
    pub gamma: f64,
    /// seeds the per-epoch shuffle
    #[serde(rename = "shuffle_seed")]
    pub seed: u64,
    /// optional global gradient-norm clip
    #[serde(default)]
    pub grad_clip: Option<f64>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            epochs: 256,
            batch_size: 1,
            gamma: 0.1,
            seed: 0,
            grad_clip: None,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(
                "learning rate must be nonnegative".into(),
            ));
        }
        if self.batch_size < 1 {
            return Err(Error::InvalidArgument(
                "batch size must be at least 1".into(),
            ));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::InvalidArgument("gamma must be nonnegative".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::InvalidArgument("grad_clip must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Ground truth plus its measurements.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub truth: SpectralCube,
    pub y: Measurements,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub total: f64,
    pub data: f64,
    pub inv: f64,
}

impl LossParts {
    fn add_scaled(&mut self, other: &LossParts, w: f64) {
        self.total += w * other.total;
        self.data += w * other.data;
        self.inv += w * other.inv;
    }

    fn is_finite(&self) -> bool {
        self.total.is_finite() && self.data.is_finite() && self.inv.is_finite()
    }
}

/// `∂loss/∂Θ`, shape-congruent with the network parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet(pub LadmmNetParams);

impl GradientSet {
    pub fn zeros_for(params: &LadmmNetParams) -> Self {
        Self(params.zeros_like())
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.0.to_flat()
    }

    pub fn norm(&self) -> f64 {
        let v = self.to_flat();
        dot(&v, &v).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.to_flat().iter().all(|v| v.is_finite())
    }
}

struct LayerTape {
    step: SpectralCube,
    g_ms: SpectralCube,
    r_prev: SpectralCube,
    f: SpectralCube,
    nft: ConvTransformCache,
    /// `𝓖(f) + d_prev`
    shifted: FeatureCube,
    nit: ConvTransformCache,
    inv: ConvTransformCache,
    /// `𝓖̃(𝓖(f))`
    reconstructed: SpectralCube,
}

struct Tape {
    layers: Vec<LayerTape>,
    output: SpectralCube,
}

fn forward_tape(params: &LadmmNetParams, y: &Measurements, ops: &Operators) -> Result<Tape> {
    params.validate()?;
    ensure_dims!(
        params.dims == ops.dims(),
        "network built for {:?}, operators act on {:?}",
        params.dims,
        ops.dims()
    );
    let mut f = init_f0(y, ops)?;
    let (m, n, l) = f.dims();
    let mut d = SpectralCube::zeros(m, n, l);
    let mut r = SpectralCube::zeros(m, n, l);
    let mut layers = Vec::with_capacity(params.depth());
    for layer in &params.layers {
        let s = layer.scalars();
        let (f_new, step, g_ms) = au_forward_parts(&f, &r, y, ops, &s)?;
        let (transformed, nft) = layer.nft.apply_cached(&f_new)?;
        let shifted = transformed.add(&d);
        let mut b = shifted.clone();
        b.data_mut()
            .iter_mut()
            .for_each(|v| *v = soft_threshold_scalar(*v, s.soft_lambda));
        // same operation order as `nru_forward`
        let mut d_new = d.clone();
        d_new.axpy(1.0, &transformed);
        d_new.axpy(-1.0, &b);
        let mut resid = transformed.clone();
        resid.axpy(1.0, &d_new);
        resid.axpy(-1.0, &b);
        let (r_new, nit) = layer.nit.apply_cached(&resid)?;
        let (reconstructed, inv) = layer.nit.apply_cached(&transformed)?;
        if !r_new.is_finite() || !transformed.is_finite() {
            return Err(Error::NonFinite("refinement unit output".into()));
        }
        layers.push(LayerTape {
            step,
            g_ms,
            r_prev: std::mem::replace(&mut r, r_new),
            f: f_new.clone(),
            nft,
            shifted,
            nit,
            inv,
            reconstructed,
        });
        f = f_new;
        d = d_new;
    }
    Ok(Tape { layers, output: f })
}

fn tape_loss(tape: &Tape, truth: &SpectralCube, gamma: f64) -> LossParts {
    let data = tape.output.sub(truth).norm_sq();
    let k = tape.layers.len() as f64;
    let inv = tape
        .layers
        .iter()
        .map(|t| t.reconstructed.sub(&t.f).norm_sq())
        .sum::<f64>()
        / k;
    LossParts {
        total: data + gamma * inv,
        data,
        inv,
    }
}

/// Loss of one sample.
pub fn loss(
    params: &LadmmNetParams,
    sample: &Sample,
    ops: &Operators,
    gamma: f64,
) -> Result<LossParts> {
    check_sample(params, sample)?;
    let tape = forward_tape(params, &sample.y, ops)?;
    Ok(tape_loss(&tape, &sample.truth, gamma))
}

/// Mean loss over a batch.
pub fn batch_loss(
    params: &LadmmNetParams,
    batch: &[Sample],
    ops: &Operators,
    gamma: f64,
) -> Result<LossParts> {
    let mut acc = LossParts::default();
    let w = 1.0 / batch.len().max(1) as f64;
    for s in batch {
        acc.add_scaled(&loss(params, s, ops, gamma)?, w);
    }
    Ok(acc)
}

fn check_sample(params: &LadmmNetParams, sample: &Sample) -> Result<()> {
    ensure_dims!(
        sample.truth.dims() == params.dims,
        "sample truth is {:?}, network expects {:?}",
        sample.truth.dims(),
        params.dims
    );
    Ok(())
}

/// Loss and exact gradient for one sample.
pub fn loss_and_grad(
    params: &LadmmNetParams,
    sample: &Sample,
    ops: &Operators,
    gamma: f64,
) -> Result<(LossParts, GradientSet)> {
    check_sample(params, sample)?;
    let tape = forward_tape(params, &sample.y, ops)?;
    let parts = tape_loss(&tape, &sample.truth, gamma);
    if !parts.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    let grads = backward_tape(params, &tape, &sample.truth, ops, gamma)?;
    Ok((parts, grads))
}

/// Gradient of the single-sample total loss with respect to every parameter.
pub fn backward(
    params: &LadmmNetParams,
    sample: &Sample,
    ops: &Operators,
    gamma: f64,
) -> Result<GradientSet> {
    Ok(loss_and_grad(params, sample, ops, gamma)?.1)
}

fn backward_tape(
    params: &LadmmNetParams,
    tape: &Tape,
    truth: &SpectralCube,
    ops: &Operators,
    gamma: f64,
) -> Result<GradientSet> {
    let mut grads = GradientSet::zeros_for(params);
    let depth = tape.layers.len();
    let inv_weight = gamma / depth as f64;
    let (m, n, l) = truth.dims();

    let mut f_bar = tape.output.sub(truth).scaled(2.0);
    let mut d_bar = SpectralCube::zeros(m, n, l);
    let mut r_bar: Option<SpectralCube> = None;

    for k in (0..depth).rev() {
        let t = &tape.layers[k];
        let p = &params.layers[k];
        let g = &mut grads.0.layers[k];

        // invertibility term γ/K·‖𝓖̃(𝓖(f)) − f‖²
        let mut u_f_bar = SpectralCube::zeros(m, n, l);
        if inv_weight != 0.0 {
            let gi = t.reconstructed.sub(&t.f).scaled(2.0 * inv_weight);
            f_bar.axpy(-1.0, &gi);
            u_f_bar = p.nit.backward(&t.inv, &gi, &mut g.nit)?;
        }

        // r = 𝓖̃(e), e = 𝓖(f) + d − b
        let mut b_bar = SpectralCube::zeros(m, n, l);
        if let Some(rb) = r_bar.take() {
            let e_bar = p.nit.backward(&t.nit, &rb, &mut g.nit)?;
            u_f_bar.axpy(1.0, &e_bar);
            d_bar.axpy(1.0, &e_bar);
            b_bar.axpy(-1.0, &e_bar);
        }

        // d = d_prev + 𝓖(f) − b
        u_f_bar.axpy(1.0, &d_bar);
        b_bar.axpy(-1.0, &d_bar);
        let mut d_prev_bar = std::mem::replace(&mut d_bar, SpectralCube::zeros(m, n, l));

        // b = S_λ̃(u), u = 𝓖(f) + d_prev
        let lam = p.soft_lambda;
        let mut u_bar = SpectralCube::zeros(m, n, l);
        let mut lam_bar = 0.0;
        for ((ub, bb), u) in u_bar
            .data_mut()
            .iter_mut()
            .zip(b_bar.data())
            .zip(t.shifted.data())
        {
            if u.abs() > lam && *u != 0.0 {
                *ub = *bb;
                lam_bar -= bb * u.signum();
            }
        }
        g.soft_lambda += lam_bar;
        u_f_bar.axpy(1.0, &u_bar);
        d_prev_bar.axpy(1.0, &u_bar);

        // 𝓖(f)
        let nft_in_bar = p.nft.backward(&t.nft, &u_f_bar, &mut g.nft)?;
        f_bar.axpy(1.0, &nft_in_bar);

        // AU: f = f_prev − (1/α)·step, step = g_hs + λ1 g_ms + ρ r_prev
        let alpha = p.alpha;
        let step_bar = f_bar.scaled(-1.0 / alpha);
        g.alpha += f_bar.dot(&t.step) / (alpha * alpha);
        g.lambda1 += step_bar.dot(&t.g_ms);
        g.rho += step_bar.dot(&t.r_prev);

        if k > 0 {
            r_bar = Some(step_bar.scaled(p.rho));
            let mut f_prev_bar = f_bar;
            f_prev_bar.axpy(1.0, &ops.weighted_gram(&step_bar, p.lambda1)?);
            f_bar = f_prev_bar;
            d_bar = d_prev_bar;
        }
    }
    if !grads.is_finite() {
        return Err(Error::NonFinite("gradient".into()));
    }
    Ok(grads)
}

/// Result of comparing analytic and central-difference gradients for one parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupCheck {
    pub label: String,
    /// `max|analytic − numeric| / max(max|analytic|, max|numeric|, 1e-6)` over checked entries
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FiniteDiffReport {
    pub groups: Vec<GroupCheck>,
    pub passed: bool,
}

impl FiniteDiffReport {
    pub fn failing(&self) -> Vec<&GroupCheck> {
        self.groups.iter().filter(|g| !g.passed).collect()
    }

    pub fn worst(&self) -> f64 {
        self.groups
            .iter()
            .map(|g| g.max_rel_error)
            .fold(0.0, f64::max)
    }
}

const FD_SCALE_FLOOR: f64 = 1e-6;
const KINK_MARGIN: f64 = 2.0;

/// Activation pattern of every ReLU and soft-threshold in the network; constant between kinks.
fn activation_pattern(
    params: &LadmmNetParams,
    y: &Measurements,
    ops: &Operators,
) -> Result<Vec<u8>> {
    let tape = forward_tape(params, y, ops)?;
    let mut pat = Vec::new();
    for (t, p) in tape.layers.iter().zip(&params.layers) {
        for cache in [&t.nft, &t.nit, &t.inv] {
            pat.extend(cache.pre_activation.data().iter().map(|z| (*z > 0.0) as u8));
        }
        pat.extend(t.shifted.data().iter().map(|u| {
            if u.abs() <= p.soft_lambda || *u == 0.0 {
                0
            } else if *u > 0.0 {
                1
            } else {
                2
            }
        }));
    }
    Ok(pat)
}

/// Compares `analytic` against central differences of the single-sample total loss.
///
/// Parameters whose perturbation by `±2·step` changes any ReLU or soft-threshold branch are
/// skipped as kink-adjacent.
pub fn finite_diff_check_with(
    params: &LadmmNetParams,
    analytic: &GradientSet,
    sample: &Sample,
    ops: &Operators,
    gamma: f64,
    step: f64,
    tol: f64,
) -> Result<FiniteDiffReport> {
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(
            "finite-difference step must be positive".into(),
        ));
    }
    let base = params.to_flat();
    let grad = analytic.to_flat();
    ensure_dims!(
        grad.len() == base.len(),
        "gradient does not match parameters"
    );
    let base_pattern = activation_pattern(params, &sample.y, ops)?;
    let mut probe = params.clone();
    let mut eval = |flat: &[f64]| -> Result<LadmmNetParams> {
        probe.assign_flat(flat)?;
        Ok(probe.clone())
    };

    let mut groups = Vec::new();
    let mut all_passed = true;
    for group in params.groups() {
        let mut max_err: f64 = 0.0;
        let mut scale: f64 = 0.0;
        let (mut checked, mut skipped) = (0, 0);
        for idx in group.offset..group.offset + group.len {
            let mut x = base.clone();
            let mut kink = false;
            for sgn in [-KINK_MARGIN, KINK_MARGIN] {
                x[idx] = base[idx] + sgn * step;
                if activation_pattern(&eval(&x)?, &sample.y, ops)? != base_pattern {
                    kink = true;
                }
            }
            if kink {
                skipped += 1;
                continue;
            }
            x[idx] = base[idx] + step;
            let up = loss(&eval(&x)?, sample, ops, gamma)?.total;
            x[idx] = base[idx] - step;
            let down = loss(&eval(&x)?, sample, ops, gamma)?.total;
            let numeric = (up - down) / (2.0 * step);
            max_err = max_err.max((numeric - grad[idx]).abs());
            scale = scale.max(numeric.abs()).max(grad[idx].abs());
            checked += 1;
        }
        let rel = max_err / scale.max(FD_SCALE_FLOOR);
        let passed = rel <= tol;
        all_passed &= passed;
        groups.push(GroupCheck {
            label: group.label(),
            max_rel_error: rel,
            checked,
            skipped,
            passed,
        });
    }
    Ok(FiniteDiffReport {
        groups,
        passed: all_passed,
    })
}

/// Finite-difference check of [`backward`] on one sample.
pub fn finite_diff_check(
    params: &LadmmNetParams,
    sample: &Sample,
    ops: &Operators,
    gamma: f64,
    step: f64,
    tol: f64,
) -> Result<FiniteDiffReport> {
    let analytic = backward(params, sample, ops, gamma)?;
    finite_diff_check_with(params, &analytic, sample, ops, gamma, step, tol)
}

/// First and second moment estimates for Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamMoments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamMoments {
    pub fn zeros(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// One bias-corrected Adam update of `params` in place; `t` counts steps from 1.
pub fn adam_update(params: &mut [f64], grads: &[f64], moments: &mut AdamMoments, t: u64, lr: f64) {
    assert!(t >= 1, "adam step counter starts at 1");
    let bc1 = 1.0 - ADAM_BETA1.powi(t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(t as i32);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(moments.m.iter_mut())
        .zip(moments.v.iter_mut())
    {
        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
}

/// Adam step on the network parameters.
pub fn adam_step(
    params: &mut LadmmNetParams,
    grads: &GradientSet,
    moments: &mut AdamMoments,
    t: u64,
    cfg: &TrainingConfig,
) -> Result<()> {
    let mut flat = params.to_flat();
    let g = grads.to_flat();
    ensure_dims!(
        g.len() == flat.len() && moments.m.len() == flat.len(),
        "gradient/moment sizes do not match the parameters"
    );
    adam_update(&mut flat, &g, moments, t, cfg.learning_rate);
    params.assign_flat(&flat)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub data: f64,
    pub inv: f64,
    pub total: f64,
}

/// Where and how often `train` writes checkpoints.
#[derive(Debug, Clone)]
pub struct CheckpointPolicy {
    pub path: PathBuf,
    pub every: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: LadmmNetParams,
    pub history: Vec<EpochLoss>,
}

/// Mean per-sample gradient over a batch; per-sample passes run in parallel and are summed in order.
fn batch_gradient(
    params: &LadmmNetParams,
    batch: &[&Sample],
    ops: &Operators,
    gamma: f64,
) -> Result<(LossParts, GradientSet)> {
    let results: Vec<Result<(LossParts, GradientSet)>> = batch
        .par_iter()
        .map(|s| loss_and_grad(params, s, ops, gamma))
        .collect();
    let w = 1.0 / batch.len() as f64;
    let mut acc_loss = LossParts::default();
    let mut acc = vec![0.0; params.parameter_count()];
    for r in results {
        let (l, g) = r?;
        acc_loss.add_scaled(&l, w);
        crate::cube_io::axpy(&mut acc, w, &g.to_flat());
    }
    let mut grads = GradientSet::zeros_for(params);
    grads.0.assign_flat(&acc)?;
    Ok((acc_loss, grads))
}

/// Epoch loop: deterministic per-epoch shuffle from `cfg.seed`, one Adam step per batch.
/// History records the mean pre-update loss per epoch. A non-finite loss or gradient aborts
/// training; with a checkpoint policy the last good parameters are written first.
pub fn train(
    mut params: LadmmNetParams,
    dataset: &[Sample],
    ops: &Operators,
    cfg: &TrainingConfig,
    checkpoint: Option<&CheckpointPolicy>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    for s in dataset {
        check_sample(&params, s)?;
        ops.check(&s.y)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut moments = AdamMoments::zeros(params.parameter_count());
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut t = 0u64;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = LossParts::default();
        let mut count = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &dataset[i]).collect();
            let step = batch_gradient(&params, &batch, ops, cfg.gamma);
            let (l, mut grads) = match step {
                Ok(v) if v.0.is_finite() && v.1.is_finite() => v,
                _ => {
                    if let Some(policy) = checkpoint {
                        save_checkpoint(&params, &policy.path)?;
                    }
                    return Err(Error::Diverged {
                        step: t as usize + 1,
                    });
                }
            };
            if let Some(clip) = cfg.grad_clip {
                let norm = grads.norm();
                if norm > clip {
                    let mut flat = grads.to_flat();
                    flat.iter_mut().for_each(|v| *v *= clip / norm);
                    grads.0.assign_flat(&flat)?;
                }
            }
            sum.add_scaled(&l, batch.len() as f64);
            count += batch.len();
            t += 1;
            adam_step(&mut params, &grads, &mut moments, t, cfg)?;
        }
        let mean = 1.0 / count as f64;
        let rec = EpochLoss {
            epoch,
            data: sum.data * mean,
            inv: sum.inv * mean,
            total: sum.total * mean,
        };
        log::info!(
            "epoch {epoch}: total {:.6} data {:.6} inv {:.6}",
            rec.total,
            rec.data,
            rec.inv
        );
        history.push(rec);
        if let Some(policy) = checkpoint {
            if policy.every > 0 && epoch % policy.every == 0 {
                save_checkpoint(&params, &policy.path)?;
            }
        }
    }
    if let Some(policy) = checkpoint {
        save_checkpoint(&params, &policy.path)?;
    }
    Ok(TrainOutcome { params, history })
}

/// CSV with header `epoch,data_loss,inv_loss,total`.
pub fn write_history_csv(history: &[EpochLoss], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "data_loss", "inv_loss", "total"])?;
    for h in history {
        w.write_record([
            h.epoch.to_string(),
            format!("{:.10e}", h.data),
            format!("{:.10e}", h.inv),
            format!("{:.10e}", h.total),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cassi::{design_apertures, CassiOperator};
    use crate::net::{init_params, net_forward};
    use crate::transforms::ConvTransformParams;
    use rand::Rng;

    fn ops_for(dims: (usize, usize, usize), seed: u64) -> (CassiOperator, CassiOperator) {
        let (m, n, l) = dims;
        let hs = CassiOperator::hs(dims, 2, design_apertures(m / 2, n / 2, l, 2, seed).unwrap())
            .unwrap();
        let ms = CassiOperator::ms(dims, 2, design_apertures(m, n, l / 2, 1, seed + 1).unwrap())
            .unwrap();
        (hs, ms)
    }

    fn smooth_cube(dims: (usize, usize, usize), seed: u64) -> SpectralCube {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b, c): (f64, f64, f64) = (rng.random(), rng.random(), rng.random());
        SpectralCube::from_fn(dims.0, dims.1, dims.2, |i, j, l| {
            0.5 + 0.4
                * ((i as f64 * 0.7 + a * 6.0).sin() * (j as f64 * 0.5 + b * 6.0).cos())
                * (1.0 - 0.1 * (l as f64 - c * 3.0).abs())
        })
    }

    fn sample(ops: &Operators, dims: (usize, usize, usize), seed: u64) -> Sample {
        let truth = smooth_cube(dims, seed);
        let y = Measurements::observe(ops, &truth).unwrap();
        Sample { truth, y }
    }

    #[test]
    fn tape_matches_net_forward() {
        let dims = (8, 8, 4);
        let (hs, ms) = ops_for(dims, 1);
        let ops = Operators::dual(&hs, &ms);
        let p = init_params(dims, 4, 3, 7).unwrap();
        let s = sample(&ops, dims, 3);
        let tape = forward_tape(&p, &s.y, &ops).unwrap();
        let out = net_forward(&p, &s.y, &ops).unwrap();
        assert_eq!(tape.output, out.f);
        for (t, tr) in tape.layers.iter().zip(&out.trace) {
            assert_eq!(t.f, tr.f);
            assert_eq!(t.nft.hidden.dims().2, p.feature_maps);
        }
        // d⁰ = 0, so the first shifted input is the transform itself
        assert_eq!(tape.layers[0].shifted, out.trace[0].transformed);
    }

    #[test]
    fn loss_decomposition_and_limits() {
        let dims = (8, 8, 4);
        let (hs, ms) = ops_for(dims, 2);
        let ops = Operators::dual(&hs, &ms);
        let p = init_params(dims, 4, 2, 1).unwrap();
        let s = sample(&ops, dims, 4);
        let parts = loss(&p, &s, &ops, 0.1).unwrap();
        assert!(
            (parts.total - (parts.data + 0.1 * parts.inv)).abs() < 1e-12 * parts.total.max(1.0)
        );
        assert!(parts.data >= 0.0 && parts.inv >= 0.0);

        // γ = 0 and a truth equal to the network output: zero loss
        let out = net_forward(&p, &s.y, &ops).unwrap();
        let exact = Sample {
            truth: out.f,
            y: s.y.clone(),
        };
        assert_eq!(loss(&p, &exact, &ops, 0.0).unwrap().total, 0.0);

        // with identity transforms 𝓖̃∘𝓖 is a ReLU, so the inversion error is the negative part of f
        let mut id = p.clone();
        for l in &mut id.layers {
            l.nft = ConvTransformParams::identity(4, 4).unwrap();
            l.nit = ConvTransformParams::identity(4, 4).unwrap();
        }
        let out = net_forward(&id, &s.y, &ops).unwrap();
        let expected = out
            .trace
            .iter()
            .map(|t| t.f.data().iter().map(|v| v.min(0.0).powi(2)).sum::<f64>())
            .sum::<f64>()
            / 2.0;
        let got = loss(&id, &s, &ops, 0.1).unwrap().inv;
        assert!(
            (got - expected).abs() <= 1e-12 * expected.max(1e-12),
            "{got} vs {expected}"
        );
    }

    #[test]
    fn loss_matches_scalar_loop_evaluation() {
        let dims = (6, 6, 2);
        let (hs, ms) = ops_for(dims, 5);
        let ops = Operators::dual(&hs, &ms);
        let p = init_params(dims, 3, 2, 2).unwrap();
        let s = sample(&ops, dims, 6);
        let out = net_forward(&p, &s.y, &ops).unwrap();
        let mut data = 0.0;
        for k in 0..out.f.len() {
            data += (out.f.data()[k] - s.truth.data()[k]).powi(2);
        }
        let mut inv = 0.0;
        for (tr, layer) in out.trace.iter().zip(&p.layers) {
            let rec = crate::transforms::nit_forward(&tr.transformed, &layer.nit).unwrap();
            for k in 0..rec.len() {
                inv += (rec.data()[k] - tr.f.data()[k]).powi(2);
            }
        }
        inv /= 2.0;
        let parts = loss(&p, &s, &ops, 0.1).unwrap();
        assert!((parts.data - data).abs() < 1e-12 * data.max(1.0));
        assert!((parts.inv - inv).abs() < 1e-12 * inv.max(1.0));
    }

    #[test]
    fn zero_sample_has_zero_gradient() {
        let dims = (8, 8, 4);
        let (hs, ms) = ops_for(dims, 3);
        let ops = Operators::dual(&hs, &ms);
        let p = init_params(dims, 4, 2, 3).unwrap();
        let s = Sample {
            truth: SpectralCube::zeros(8, 8, 4),
            y: Measurements::zeros_for(&ops),
        };
        let g = backward(&p, &s, &ops, 0.1).unwrap();
        assert!(g.to_flat().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let dims = (8, 8, 4);
        let (hs, ms) = ops_for(dims, 4);
        let ops = Operators::dual(&hs, &ms);
        let p = init_params(dims, 4, 2, 5).unwrap();
        let s = sample(&ops, dims, 8);
        let report = finite_diff_check(&p, &s, &ops, 0.1, 1e-5, 1e-5).unwrap();
        for g in &report.groups {
            assert!(g.passed, "{g:?}");
            assert!(g.checked > 0, "{g:?}");
        }
        assert!(report.passed);
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        let dims = (6, 6, 2);
        let (hs, ms) = ops_for(dims, 6);
        let ops = Operators::dual(&hs, &ms);
        let p = init_params(dims, 3, 2, 6).unwrap();
        let s = sample(&ops, dims, 9);
        let mut g = backward(&p, &s, &ops, 0.1).unwrap();
        g.0.layers[1]
            .nit
            .conv1
            .weights
            .iter_mut()
            .for_each(|w| *w *= 2.0);
        let report = finite_diff_check_with(&p, &g, &s, &ops, 0.1, 1e-5, 1e-5).unwrap();
        assert!(!report.passed);
        let failing: Vec<&str> = report.failing().iter().map(|g| g.label.as_str()).collect();
        assert_eq!(failing, vec!["layer1.nit.conv1"]);
    }

    #[test]
    fn smaller_step_is_more_accurate_on_smooth_parameters() {
        let dims = (6, 6, 2);
        let (hs, ms) = ops_for(dims, 7);
        let ops = Operators::dual(&hs, &ms);
        let p = init_params(dims, 3, 2, 7).unwrap();
        let s = sample(&ops, dims, 10);
        let coarse = finite_diff_check(&p, &s, &ops, 0.1, 1e-3, 1.0).unwrap();
        let fine = finite_diff_check(&p, &s, &ops, 0.1, 1e-5, 1.0).unwrap();
        let pick = |r: &FiniteDiffReport, name: &str| {
            let g = r.groups.iter().find(|g| g.label == name).unwrap();
            assert!(g.checked > 0, "{name}");
            g.max_rel_error
        };
        // the 1/α step size is the most curved direction, so truncation error dominates there
        for name in ["layer0.alpha", "layer1.alpha"] {
            assert!(pick(&fine, name) < pick(&coarse, name), "{name}");
        }
    }

    #[test]
    fn dead_threshold_has_zero_lambda_gradient() {
        let dims = (6, 6, 2);
        let (hs, ms) = ops_for(dims, 8);
        let ops = Operators::dual(&hs, &ms);
        let mut p = init_params(dims, 3, 2, 8).unwrap();
        for l in &mut p.layers {
            l.soft_lambda = 1e3;
        }
        let s = sample(&ops, dims, 11);
        let g = backward(&p, &s, &ops, 0.0).unwrap();
        for l in &g.0.layers {
            assert_eq!(l.soft_lambda, 0.0);
        }
        let report = finite_diff_check(&p, &s, &ops, 0.0, 1e-5, 1e-5).unwrap();
        let lam = report
            .groups
            .iter()
            .find(|g| g.label == "layer1.soft_lambda")
            .unwrap();
        assert!(lam.passed && lam.checked == 1);
    }

    #[test]
    fn adam_first_step_and_zero_gradient() {
        let mut p = vec![1.0];
        let mut m = AdamMoments::zeros(1);
        adam_update(&mut p, &[3.0], &mut m, 1, 0.01);
        assert!(((1.0 - p[0]) - 0.01).abs() < 0.01 * 0.01);

        let mut q = vec![0.3, -2.0];
        let mut m = AdamMoments::zeros(2);
        adam_update(&mut q, &[0.0, 0.0], &mut m, 1, 0.1);
        assert_eq!(q, vec![0.3, -2.0]);
    }

    #[test]
    fn adam_descends_a_quadratic() {
        let mut theta = vec![1.0];
        let mut m = AdamMoments::zeros(1);
        let mut prev = 1.0f64;
        for t in 1..=10 {
            let g = vec![theta[0]];
            adam_update(&mut theta, &g, &mut m, t, 0.05);
            assert!(theta[0].abs() < prev);
            prev = theta[0].abs();
        }
    }

    #[test]
    fn adam_is_sign_equivariant() {
        let (mut a, mut b) = (vec![0.8], vec![-0.8]);
        let (mut ma, mut mb) = (AdamMoments::zeros(1), AdamMoments::zeros(1));
        for t in 1..=20 {
            let (ga, gb) = (vec![a[0]], vec![b[0]]);
            adam_update(&mut a, &ga, &mut ma, t, 0.03);
            adam_update(&mut b, &gb, &mut mb, t, 0.03);
            assert_eq!(a[0], -b[0]);
        }
    }

    #[test]
    fn zero_learning_rate_keeps_params_and_flat_history() {
        let dims = (8, 8, 4);
        let (hs, ms) = ops_for(dims, 9);
        let ops = Operators::dual(&hs, &ms);
        let p = init_params(dims, 4, 2, 9).unwrap();
        let data: Vec<Sample> = (0..2).map(|k| sample(&ops, dims, 20 + k)).collect();
        let cfg = TrainingConfig {
            learning_rate: 0.0,
            epochs: 3,
            ..Default::default()
        };
        let out = train(p.clone(), &data, &ops, &cfg, None).unwrap();
        assert_eq!(out.params, p);
        assert_eq!(out.history.len(), 3);
        assert!(out
            .history
            .windows(2)
            .all(|w| (w[0].total - w[1].total).abs() < 1e-12 * w[0].total));
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let dims = (16, 16, 4);
        let (hs, ms) = ops_for(dims, 10);
        let ops = Operators::dual(&hs, &ms);
        let p = init_params(dims, 4, 3, 10).unwrap();
        let data: Vec<Sample> = (0..4).map(|k| sample(&ops, dims, 30 + k)).collect();
        let cfg = TrainingConfig {
            learning_rate: 1e-3,
            epochs: 50,
            seed: 4,
            ..Default::default()
        };
        let before = batch_loss(&p, &data, &ops, cfg.gamma).unwrap().total;
        let a = train(p.clone(), &data, &ops, &cfg, None).unwrap();
        let after = batch_loss(&a.params, &data, &ops, cfg.gamma).unwrap().total;
        assert!(after < before, "{after} !< {before}");
        let b = train(p, &data, &ops, &cfg, None).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn invertibility_term_shrinks_with_training() {
        let dims = (8, 8, 2);
        let (hs, ms) = ops_for(dims, 11);
        let ops = Operators::dual(&hs, &ms);
        let p = init_params(dims, 4, 2, 11).unwrap();
        let data: Vec<Sample> = (0..2).map(|k| sample(&ops, dims, 40 + k)).collect();
        let cfg = TrainingConfig {
            learning_rate: 2e-3,
            epochs: 100,
            gamma: 1.0,
            ..Default::default()
        };
        let before = batch_loss(&p, &data, &ops, cfg.gamma).unwrap().inv;
        let out = train(p, &data, &ops, &cfg, None).unwrap();
        let after = batch_loss(&out.params, &data, &ops, cfg.gamma).unwrap().inv;
        assert!(after < 0.5 * before, "{after} vs {before}");
    }

    #[test]
    fn divergence_aborts_and_keeps_last_good_checkpoint() {
        let dims = (8, 8, 2);
        let (hs, ms) = ops_for(dims, 12);
        let ops = Operators::dual(&hs, &ms);
        let mut p = init_params(dims, 2, 2, 12).unwrap();
        p.layers[0].alpha = 1e-300;
        let data = vec![sample(&ops, dims, 50)];
        let dir = tempfile::tempdir().unwrap();
        let policy = CheckpointPolicy {
            path: dir.path().join("last.ckpt"),
            every: 1,
        };
        let err = train(
            p.clone(),
            &data,
            &ops,
            &TrainingConfig {
                epochs: 2,
                ..Default::default()
            },
            Some(&policy),
        );
        assert!(matches!(err, Err(Error::Diverged { step: 1 })));
        assert_eq!(crate::net::load_checkpoint(&policy.path).unwrap(), p);
    }

    #[test]
    fn batched_training_and_history_csv() {
        let dims = (8, 8, 2);
        let (hs, ms) = ops_for(dims, 13);
        let ops = Operators::dual(&hs, &ms);
        let p = init_params(dims, 2, 1, 13).unwrap();
        let data: Vec<Sample> = (0..3).map(|k| sample(&ops, dims, 60 + k)).collect();
        let cfg = TrainingConfig {
            epochs: 2,
            batch_size: 2,
            grad_clip: Some(1.0),
            ..Default::default()
        };
        let out = train(p, &data, &ops, &cfg, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.csv");
        write_history_csv(&out.history, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("epoch,data_loss,inv_loss,total\n"));
        assert_eq!(text.lines().count(), 3);
        assert!(train(out.params.clone(), &[], &ops, &cfg, None).is_err());
        assert!(TrainingConfig {
            batch_size: 0,
            ..cfg
        }
        .validate()
        .is_err());
    }
}

//! Denoising diffusion: noise schedule, forward noising, guided ancestral
//! sampling, the noise-prediction loss, and base-model training.

use std::collections::BTreeMap;

use ndarray::{Array3, ArrayD, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use atelier_engine::{randn, Adam, Graph, Real};

use crate::data::{images_to_batch, Dataset};
use crate::error::{CoreError, Result};
use crate::model::{Denoiser, ForwardOpts};
use crate::util::{derive_rng, derive_seed};
use crate::vocab::{Prompt, Vocabulary, UNCOND};
use crate::weights::{init_model, ArchConfig, ModelWeights};

/// Samples are produced in fixed chunks of this many images; per-sample
/// noise streams make the output independent of the chunking.
pub const SAMPLE_CHUNK: usize = 8;

// ---------------------------------------------------------------------------
// Schedule
// ---------------------------------------------------------------------------

/// Variance schedule for the diffusion process. All schedule arithmetic is
/// kept in f64 regardless of the model precision.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    t_max: usize,
    beta_min: f64,
    beta_max: f64,
    /// `betas[t-1]` is the increment at step `t`, for `t` in `1..=T`.
    betas: Vec<f64>,
    /// Cumulative products, length `T+1`, `alpha_bars[0] = 1`.
    alpha_bars: Vec<f64>,
}

/// Linear beta interpolation from `beta_min` to `beta_max` over `t_max`
/// steps (a single step uses `beta_min`).
pub fn make_schedule(t_max: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if t_max < 1 {
        return Err(CoreError::InvalidSchedule("step count must be at least 1".into()));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(CoreError::InvalidSchedule(format!(
            "need 0 < beta_min <= beta_max < 1, got ({beta_min}, {beta_max})"
        )));
    }
    let mut betas = Vec::with_capacity(t_max);
    for t in 1..=t_max {
        let b = if t_max == 1 {
            beta_min
        } else {
            beta_min + (beta_max - beta_min) * (t - 1) as f64 / (t_max - 1) as f64
        };
        betas.push(b);
    }
    let mut alpha_bars = Vec::with_capacity(t_max + 1);
    alpha_bars.push(1.0);
    for &b in &betas {
        alpha_bars.push(alpha_bars.last().unwrap() * (1.0 - b));
    }
    Ok(NoiseSchedule { t_max, beta_min, beta_max, betas, alpha_bars })
}

/// The default schedule: 50 steps, betas from 1e-4 to 2e-2.
pub fn default_schedule() -> NoiseSchedule {
    make_schedule(50, 1e-4, 2e-2).expect("default schedule parameters are valid")
}

impl NoiseSchedule {
    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn beta_range(&self) -> (f64, f64) {
        (self.beta_min, self.beta_max)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        if t < 1 || t > self.t_max {
            return Err(CoreError::TimestepOutOfRange { t, t_max: self.t_max });
        }
        Ok(self.betas[t - 1])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t > self.t_max {
            return Err(CoreError::TimestepOutOfRange { t, t_max: self.t_max });
        }
        Ok(self.alpha_bars[t])
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// Posterior noise scale at step `t`; exactly 0 at `t = 1`.
    pub fn sigma(&self, t: usize) -> Result<f64> {
        let beta = self.beta(t)?;
        let ab_t = self.alpha_bars[t];
        let ab_prev = self.alpha_bars[t - 1];
        Ok(((1.0 - ab_prev) / (1.0 - ab_t) * beta).sqrt())
    }
}

// ---------------------------------------------------------------------------
// Forward noising and the reverse update
// ---------------------------------------------------------------------------

/// `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`, exact and linear.
pub fn forward_noise<T: Real>(
    x0: &ArrayD<T>,
    t: usize,
    eps: &ArrayD<T>,
    sched: &NoiseSchedule,
) -> Result<ArrayD<T>> {
    let ab = sched.alpha_bar(t)?;
    if x0.shape() != eps.shape() {
        return Err(CoreError::ShapeMismatch {
            context: "forward_noise".into(),
            expected: format!("{:?}", x0.shape()),
            actual: format!("{:?}", eps.shape()),
        });
    }
    if t == 0 {
        return Ok(x0.clone());
    }
    let ca = T::from_f64(ab.sqrt());
    let cb = T::from_f64((1.0 - ab).sqrt());
    let mut out = x0.mapv(|v| v * ca);
    ndarray::Zip::from(&mut out).and(eps).for_each(|o, &e| *o += cb * e);
    Ok(out)
}

/// One ancestral reverse update:
/// `x_{t-1} = (x_t - beta_t / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t)
///            + sigma_t z`.
/// `sigma_1` is exactly zero, so `z` is ignored at the last step.
pub fn reverse_step<T: Real>(
    x_t: &ArrayD<T>,
    eps_hat: &ArrayD<T>,
    t: usize,
    sched: &NoiseSchedule,
    z: Option<&ArrayD<T>>,
) -> Result<ArrayD<T>> {
    let beta = sched.beta(t)?;
    let ab_t = sched.alpha_bars[t];
    if x_t.shape() != eps_hat.shape() {
        return Err(CoreError::ShapeMismatch {
            context: "reverse_step".into(),
            expected: format!("{:?}", x_t.shape()),
            actual: format!("{:?}", eps_hat.shape()),
        });
    }
    let eps_coef = T::from_f64(beta / (1.0 - ab_t).sqrt());
    let inv_sqrt_alpha = T::from_f64(1.0 / (1.0 - beta).sqrt());
    let mut out = x_t.clone();
    ndarray::Zip::from(&mut out)
        .and(eps_hat)
        .for_each(|o, &e| *o = (*o - eps_coef * e) * inv_sqrt_alpha);
    let sigma = sched.sigma(t)?;
    if sigma > 0.0 {
        let zv = z.ok_or_else(|| CoreError::ShapeMismatch {
            context: "reverse_step".into(),
            expected: format!("noise draw required at t={t}"),
            actual: "none".into(),
        })?;
        if zv.shape() != x_t.shape() {
            return Err(CoreError::ShapeMismatch {
                context: "reverse_step noise".into(),
                expected: format!("{:?}", x_t.shape()),
                actual: format!("{:?}", zv.shape()),
            });
        }
        let s = T::from_f64(sigma);
        ndarray::Zip::from(&mut out).and(zv).for_each(|o, &n| *o += s * n);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Guided sampling
// ---------------------------------------------------------------------------

/// A request for `n` images of one prompt.
#[derive(Debug, Clone)]
pub struct SampleRequest {
    pub prompt: Prompt,
    /// Negative prompt for guidance; `None` with `guidance_scale != 1`
    /// falls back to the unconditional token.
    pub negative: Option<Prompt>,
    pub guidance_scale: f64,
    pub n: usize,
    pub seed: u64,
}

/// Guided ancestral sampling. Deterministic given the request: sample `i`
/// draws its initial state and every per-step noise from the dedicated
/// stream `derive_rng(seed, "sample", i)` (first `x_T`, then `z` for
/// `t = T..2`), so results do not depend on chunking.
///
/// Guidance combines the two branches as
/// `eps = eps_neg + s (eps_cond - eps_neg)`; `s = 1` evaluates only the
/// conditional branch and `s = 0` only the negative branch. Outputs are
/// clamped to `[-1, 1]` once, at the end.
pub fn sample<T: Real>(
    den: &Denoiser<T>,
    sched: &NoiseSchedule,
    vocab: &Vocabulary,
    req: &SampleRequest,
) -> Result<Vec<Array3<f32>>> {
    if req.guidance_scale < 0.0 {
        return Err(CoreError::InvalidGuidanceScale(req.guidance_scale));
    }
    let s = req.guidance_scale;
    let need_cond = s != 0.0;
    let need_neg = s != 1.0;
    let neg_prompt = if need_neg {
        Some(match &req.negative {
            Some(p) => p.clone(),
            None => vocab.encode(UNCOND)?,
        })
    } else {
        None
    };

    let arch = den.arch();
    let (c, h, w) = (arch.in_channels, arch.image_size, arch.image_size);
    let t_max = sched.t_max();
    let mut outputs = Vec::with_capacity(req.n);

    let mut start = 0;
    while start < req.n {
        let b = SAMPLE_CHUNK.min(req.n - start);
        // Pre-draw every noise tensor from the per-sample streams.
        let mut x = ArrayD::<T>::zeros(ndarray::IxDyn(&[b, c, h, w]));
        let mut zs: Vec<ArrayD<T>> = (1..t_max)
            .map(|_| ArrayD::<T>::zeros(ndarray::IxDyn(&[b, c, h, w])))
            .collect();
        for i in 0..b {
            let mut rng = derive_rng(req.seed, "sample", (start + i) as u64);
            let xi = randn::<T, _>(&mut rng, &[c, h, w]);
            x.index_axis_mut(Axis(0), i).assign(&xi);
            // z for t = T down to 2; zs[k] holds the draw used at t = k + 2.
            for t in (2..=t_max).rev() {
                let zi = randn::<T, _>(&mut rng, &[c, h, w]);
                zs[t - 2].index_axis_mut(Axis(0), i).assign(&zi);
            }
        }

        let cond_prompts = vec![req.prompt.clone(); b];
        let neg_prompts = neg_prompt.as_ref().map(|p| vec![p.clone(); b]);

        for t in (1..=t_max).rev() {
            let ts = vec![t; b];
            let predict = |g: &mut Graph<T>, prompts: &[Prompt]| -> Result<ArrayD<T>> {
                let out = den.forward(g, x.clone(), &ts, prompts, ForwardOpts::default())?;
                Ok(g.value(out.eps).clone())
            };
            let eps_hat = if !need_neg {
                let mut g = Graph::new();
                predict(&mut g, &cond_prompts)?
            } else if !need_cond {
                let mut g = Graph::new();
                predict(&mut g, neg_prompts.as_ref().unwrap())?
            } else {
                let mut g = Graph::new();
                let e_cond = predict(&mut g, &cond_prompts)?;
                let mut g = Graph::new();
                let e_neg = predict(&mut g, neg_prompts.as_ref().unwrap())?;
                let sc = T::from_f64(s);
                let mut e = e_neg.clone();
                ndarray::Zip::from(&mut e)
                    .and(&e_cond)
                    .and(&e_neg)
                    .for_each(|o, &ec, &en| *o = en + sc * (ec - en));
                e
            };
            let z = if t >= 2 { Some(&zs[t - 2]) } else { None };
            x = reverse_step(&x, &eps_hat, t, sched, z)?;
        }

        let lo = T::from_f64(-1.0);
        let hi = T::from_f64(1.0);
        x.mapv_inplace(|v| v.maxv(lo).minv(hi));
        for i in 0..b {
            let xi = x.index_axis(Axis(0), i);
            let img = Array3::from_shape_fn((c, h, w), |(ci, yi, xi2)| {
                xi[[ci, yi, xi2]].to_f64() as f32
            });
            outputs.push(img);
        }
        start += b;
    }
    Ok(outputs)
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

/// Mean squared error between the model's noise prediction on
/// `forward_noise(x0, t, eps)` and `eps` itself, for one prompt shared by
/// the batch.
pub fn denoise_loss<T: Real>(
    den: &Denoiser<T>,
    x0: &ArrayD<T>,
    c: &Prompt,
    t: usize,
    eps: &ArrayD<T>,
    sched: &NoiseSchedule,
) -> Result<f64> {
    let (loss, _) = denoise_loss_grads(den, x0, c, t, eps, sched, ForwardOpts::default())?;
    Ok(loss)
}

/// Same loss, plus gradients for whatever `opts` marks trainable.
pub fn denoise_loss_grads<T: Real>(
    den: &Denoiser<T>,
    x0: &ArrayD<T>,
    c: &Prompt,
    t: usize,
    eps: &ArrayD<T>,
    sched: &NoiseSchedule,
    opts: ForwardOpts,
) -> Result<(f64, BTreeMap<String, ArrayD<T>>)> {
    if t < 1 {
        return Err(CoreError::TimestepOutOfRange { t, t_max: sched.t_max() });
    }
    let b = x0.shape()[0];
    let x_t = forward_noise(x0, t, eps, sched)?;
    let mut g = Graph::new();
    let out = den.forward(&mut g, x_t, &vec![t; b], &vec![c.clone(); b], opts)?;
    let loss_var = g.mse(out.eps, eps);
    let loss = g.scalar(loss_var).to_f64();
    let mut grad_map = BTreeMap::new();
    if !out.params.is_empty() {
        let mut grads = g.backward(loss_var);
        for (name, var) in &out.params {
            if let Some(gr) = grads.take(*var) {
                grad_map.insert(name.clone(), gr);
            }
        }
    }
    Ok((loss, grad_map))
}

// ---------------------------------------------------------------------------
// Base-model training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaseTrainHp {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Probability of replacing a sample's prompt with the unconditional
    /// token during training.
    pub cond_dropout: f64,
    pub seed: u64,
}

impl Default for BaseTrainHp {
    fn default() -> Self {
        BaseTrainHp { epochs: 40, lr: 2e-3, batch_size: 8, cond_dropout: 0.1, seed: 0 }
    }
}

#[derive(Debug)]
pub struct TrainedBase<T: Real> {
    pub weights: ModelWeights<T>,
    /// Mean batch loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Trains a fresh base model on a labeled corpus. Deterministic given
/// (architecture, corpus, hyperparameters).
pub fn train_base<T: Real>(
    dataset: &Dataset,
    arch: &ArchConfig,
    vocab: &Vocabulary,
    hp: &BaseTrainHp,
    sched: &NoiseSchedule,
) -> Result<TrainedBase<T>> {
    if dataset.is_empty() {
        return Err(CoreError::EmptyDataset("training corpus has no items".into()));
    }
    if hp.batch_size == 0 || !(0.0..=1.0).contains(&hp.cond_dropout) || hp.lr <= 0.0 {
        return Err(CoreError::InvalidHyperparameter(format!(
            "batch_size {}, cond_dropout {}, lr {}",
            hp.batch_size, hp.cond_dropout, hp.lr
        )));
    }
    let init = init_model::<T>(arch, vocab.hash(), derive_seed(hp.seed, "base-init", 0))?;
    let mut den = Denoiser::from_weights(&init);
    drop(init);
    let mut adam = Adam::<T>::new(hp.lr);
    let uncond = vocab.encode(UNCOND)?;
    let prompts_encoded: Vec<Prompt> = dataset
        .items
        .iter()
        .map(|it| vocab.encode(&it.prompt))
        .collect::<Result<_>>()?;

    let t_max = sched.t_max();
    let mut epoch_losses = Vec::with_capacity(hp.epochs);
    let mut global_step = 0usize;
    for epoch in 0..hp.epochs {
        let mut rng = derive_rng(hp.seed, "base-epoch", epoch as u64);
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(hp.batch_size) {
            let b = chunk.len();
            let images: Vec<_> = chunk.iter().map(|&i| dataset.items[i].image.clone()).collect();
            let x0: ArrayD<T> = images_to_batch(&images);
            let mut ts = Vec::with_capacity(b);
            let mut eps = ArrayD::<T>::zeros(ndarray::IxDyn(&[
                b,
                arch.in_channels,
                arch.image_size,
                arch.image_size,
            ]));
            let mut x_t = x0.clone();
            let mut prompts = Vec::with_capacity(b);
            for (bi, &i) in chunk.iter().enumerate() {
                let t = rng.random_range(1..=t_max);
                ts.push(t);
                let e = randn::<T, _>(
                    &mut rng,
                    &[arch.in_channels, arch.image_size, arch.image_size],
                );
                eps.index_axis_mut(Axis(0), bi).assign(&e);
                let ab = sched.alpha_bar(t)?;
                let ca = T::from_f64(ab.sqrt());
                let cb = T::from_f64((1.0 - ab).sqrt());
                let mut xi = x_t.index_axis_mut(Axis(0), bi);
                ndarray::Zip::from(&mut xi)
                    .and(&e)
                    .for_each(|o, &ev| *o = *o * ca + cb * ev);
                let dropped = rng.random::<f64>() < hp.cond_dropout;
                prompts.push(if dropped { uncond.clone() } else { prompts_encoded[i].clone() });
            }
            let mut g = Graph::new();
            let out = den.forward(
                &mut g,
                x_t,
                &ts,
                &prompts,
                ForwardOpts { train_dense: true, ..Default::default() },
            )?;
            let loss_var = g.mse(out.eps, &eps);
            let loss = g.scalar(loss_var).to_f64();
            if !loss.is_finite() {
                return Err(CoreError::Diverged { step: global_step, loss });
            }
            let mut grads = g.backward(loss_var);
            let mut grad_map = BTreeMap::new();
            for (name, var) in &out.params {
                if let Some(gr) = grads.take(*var) {
                    grad_map.insert(name.clone(), gr);
                }
            }
            adam.step(&mut den.tensors, &grad_map);
            sum += loss;
            batches += 1;
            global_step += 1;
        }
        epoch_losses.push(sum / batches as f64);
    }
    Ok(TrainedBase { weights: den.to_weights(), epoch_losses })
}

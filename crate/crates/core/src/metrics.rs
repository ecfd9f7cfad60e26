//! Distribution metrics: a frozen feature embedder, unbiased KID, a
//! perceptual distance over intermediate activations, and the
//! target/surrounding discrepancy reports used to evaluate extractions.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array2, Array3, ArrayD, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use atelier_engine::{randn, Adam, Graph, Real};

use crate::data::{images_to_batch, Dataset};
use crate::diffusion::{sample, NoiseSchedule, SampleRequest};
use crate::error::{CoreError, Result};
use crate::model::Denoiser;
use crate::util::{derive_rng, sha256_hex};
use crate::vocab::{ConceptSpec, Vocabulary};
use crate::weights::{read_archive, write_archive};

const EMB_WIDTHS: [usize; 3] = [16, 32, 64];
const EMB_GROUPS: usize = 8;
const GN_EPS: f64 = 1e-5;

// ---------------------------------------------------------------------------
// Feature embedder
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EmbedderMeta {
    class_names: Vec<String>,
    widths: [usize; 3],
}

/// A small convolutional concept classifier, trained once on the synthetic
/// corpus and then frozen. Its pooled features back KID, and its three conv
/// activations back the perceptual distance. Weights are always f32; the
/// version hash is the content hash of the canonical archive.
#[derive(Debug, Clone)]
pub struct FeatureEmbedder {
    tensors: BTreeMap<String, Arc<ArrayD<f32>>>,
    class_names: Vec<String>,
    version: String,
}

/// Everything one embedder forward pass produces.
pub struct EmbedOut {
    /// The three post-activation conv feature maps, each `[B, C, H, W]`.
    pub acts: Vec<ArrayD<f32>>,
    /// Pooled features `[B, d]` in f64 for metric arithmetic.
    pub features: Array2<f64>,
    /// Classifier logits `[B, n_classes]`.
    pub logits: Array2<f32>,
}

impl FeatureEmbedder {
    fn from_tensors(
        tensors: BTreeMap<String, Arc<ArrayD<f32>>>,
        class_names: Vec<String>,
    ) -> Result<Self> {
        let meta = EmbedderMeta { class_names: class_names.clone(), widths: EMB_WIDTHS };
        let bytes = write_archive("embedder", &meta, &tensors)?;
        let version = sha256_hex(&bytes);
        Ok(FeatureEmbedder { tensors, class_names, version })
    }

    /// Content-hash version recorded in every report.
    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn feature_dim(&self) -> usize {
        EMB_WIDTHS[2]
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta =
            EmbedderMeta { class_names: self.class_names.clone(), widths: EMB_WIDTHS };
        write_archive("embedder", &meta, &self.tensors)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (meta_val, tensors) = read_archive::<f32>(bytes, "embedder")?;
        let meta: EmbedderMeta = serde_json::from_value(meta_val)?;
        if meta.widths != EMB_WIDTHS {
            return Err(CoreError::Archive(format!(
                "embedder widths {:?} unsupported",
                meta.widths
            )));
        }
        FeatureEmbedder::from_tensors(tensors, meta.class_names)
    }

    pub fn load(path: &Path) -> Result<Self> {
        FeatureEmbedder::from_bytes(&std::fs::read(path)?)
    }

    /// One forward pass over a batch of images (chunked internally).
    pub fn forward(&self, images: &[Array3<f32>]) -> Result<EmbedOut> {
        if images.is_empty() {
            return Err(CoreError::MetricInput("embedder input is empty".into()));
        }
        let mut acts: Vec<Vec<ArrayD<f32>>> = vec![Vec::new(); 3];
        let mut features = Vec::new();
        let mut logits = Vec::new();
        for chunk in images.chunks(64) {
            let x: ArrayD<f32> = images_to_batch(chunk);
            let (a, f, l) = self.forward_graph(x, false)?.1;
            for (store, layer) in acts.iter_mut().zip(a) {
                store.push(layer);
            }
            features.push(f);
            logits.push(l);
        }
        let acts = acts
            .into_iter()
            .map(|parts| {
                let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
                ndarray::concatenate(Axis(0), &views).expect("concat activations")
            })
            .collect();
        let cat2 = |parts: Vec<Array2<f64>>| {
            let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
            ndarray::concatenate(Axis(0), &views).expect("concat features")
        };
        let catl = |parts: Vec<Array2<f32>>| {
            let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
            ndarray::concatenate(Axis(0), &views).expect("concat logits")
        };
        Ok(EmbedOut { acts, features: cat2(features), logits: catl(logits) })
    }

    /// Pooled features only.
    pub fn embed(&self, images: &[Array3<f32>]) -> Result<Array2<f64>> {
        Ok(self.forward(images)?.features)
    }

    /// Predicted class index per image.
    pub fn classify(&self, images: &[Array3<f32>]) -> Result<Vec<usize>> {
        let logits = self.forward(images)?.logits;
        Ok(logits
            .rows()
            .into_iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(i, _)| i)
                    .unwrap()
            })
            .collect())
    }

    /// Builds the conv stack in `g`; returns trainable-parameter handles and
    /// the computed (activations, features, logits) values.
    #[allow(clippy::type_complexity)]
    fn forward_graph(
        &self,
        x: ArrayD<f32>,
        train: bool,
    ) -> Result<(
        (Graph<f32>, BTreeMap<String, atelier_engine::Var>, atelier_engine::Var),
        (Vec<ArrayD<f32>>, Array2<f64>, Array2<f32>),
    )> {
        let mut g = Graph::<f32>::new();
        let mut params = BTreeMap::new();
        let leaf = |g: &mut Graph<f32>,
                        params: &mut BTreeMap<String, atelier_engine::Var>,
                        name: &str|
         -> Result<atelier_engine::Var> {
            let t = self
                .tensors
                .get(name)
                .ok_or_else(|| CoreError::UnknownLayer(name.to_string()))?;
            let v = g.leaf(Arc::clone(t), train);
            if train {
                params.insert(name.to_string(), v);
            }
            Ok(v)
        };
        let mut h = g.constant(x);
        let mut acts = Vec::with_capacity(3);
        for i in 1..=3 {
            let w = leaf(&mut g, &mut params, &format!("conv{i}.w"))?;
            let b = leaf(&mut g, &mut params, &format!("conv{i}.b"))?;
            h = g.conv2d(h, w, Some(b), 2, 1);
            let gg = leaf(&mut g, &mut params, &format!("gn{i}.g"))?;
            let gb = leaf(&mut g, &mut params, &format!("gn{i}.b"))?;
            h = g.group_norm(h, gg, gb, EMB_GROUPS, GN_EPS);
            h = g.silu(h);
            acts.push(g.value(h).clone());
        }
        let pooled = g.mean_spatial(h);
        let hw = leaf(&mut g, &mut params, "head.w")?;
        let hb = leaf(&mut g, &mut params, "head.b")?;
        let logits_var = g.linear(pooled, hw, Some(hb));
        let feats32 = g.value(pooled);
        let n = feats32.shape()[0];
        let d = feats32.shape()[1];
        let features = Array2::from_shape_fn((n, d), |(i, j)| feats32[[i, j]] as f64);
        let lv = g.value(logits_var);
        let nc = lv.shape()[1];
        let logits = Array2::from_shape_fn((n, nc), |(i, j)| lv[[i, j]]);
        Ok(((g, params, logits_var), (acts, features, logits)))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedderTrainHp {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for EmbedderTrainHp {
    fn default() -> Self {
        EmbedderTrainHp { epochs: 10, lr: 2e-3, batch_size: 16, seed: 0 }
    }
}

/// Trains the concept classifier on a labeled corpus and freezes it.
/// Deterministic given (corpus, hp).
pub fn train_embedder(ds: &Dataset, hp: &EmbedderTrainHp) -> Result<FeatureEmbedder> {
    if ds.is_empty() {
        return Err(CoreError::EmptyDataset("embedder corpus has no items".into()));
    }
    let class_names = ds.class_labels();
    let class_idx: HashMap<&str, usize> =
        class_names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();

    // He-initialized conv stack, zero biases, unit gains.
    let mut tensors: BTreeMap<String, Arc<ArrayD<f32>>> = BTreeMap::new();
    let chans = [3, EMB_WIDTHS[0], EMB_WIDTHS[1], EMB_WIDTHS[2]];
    for i in 1..=3 {
        let (cin, cout) = (chans[i - 1], chans[i]);
        let mut rng = derive_rng(hp.seed, &format!("emb-init:conv{i}"), 0);
        let mut w = randn::<f32, _>(&mut rng, &[cout, cin, 3, 3]);
        let std = (2.0 / (cin * 9) as f64).sqrt() as f32;
        w.mapv_inplace(|v| v * std);
        tensors.insert(format!("conv{i}.w"), Arc::new(w));
        tensors.insert(format!("conv{i}.b"), Arc::new(ArrayD::zeros(ndarray::IxDyn(&[cout]))));
        tensors.insert(
            format!("gn{i}.g"),
            Arc::new(ArrayD::from_elem(ndarray::IxDyn(&[cout]), 1.0f32)),
        );
        tensors.insert(format!("gn{i}.b"), Arc::new(ArrayD::zeros(ndarray::IxDyn(&[cout]))));
    }
    let mut rng = derive_rng(hp.seed, "emb-init:head", 0);
    let mut hw = randn::<f32, _>(&mut rng, &[class_names.len(), EMB_WIDTHS[2]]);
    let std = (2.0 / EMB_WIDTHS[2] as f64).sqrt() as f32;
    hw.mapv_inplace(|v| v * std);
    tensors.insert("head.w".into(), Arc::new(hw));
    tensors.insert(
        "head.b".into(),
        Arc::new(ArrayD::zeros(ndarray::IxDyn(&[class_names.len()]))),
    );

    let mut emb = FeatureEmbedder {
        tensors,
        class_names: class_names.clone(),
        version: String::new(),
    };
    let mut adam = Adam::<f32>::new(hp.lr);
    for epoch in 0..hp.epochs {
        let mut rng = derive_rng(hp.seed, "emb-epoch", epoch as u64);
        let mut order: Vec<usize> = (0..ds.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(hp.batch_size) {
            let images: Vec<_> = chunk.iter().map(|&i| ds.items[i].image.clone()).collect();
            let labels: Vec<usize> =
                chunk.iter().map(|&i| class_idx[ds.items[i].class_label().as_str()]).collect();
            let x: ArrayD<f32> = images_to_batch(&images);
            let ((mut g, params, logits_var), _) = emb.forward_graph(x, true)?;
            let loss_var = g.ce_logits(logits_var, labels);
            let loss = g.scalar(loss_var) as f64;
            if !loss.is_finite() {
                return Err(CoreError::Diverged { step: epoch, loss });
            }
            let mut grads = g.backward(loss_var);
            let mut grad_map = BTreeMap::new();
            for (name, var) in &params {
                if let Some(gr) = grads.take(*var) {
                    grad_map.insert(name.clone(), gr);
                }
            }
            adam.step(&mut emb.tensors, &grad_map);
        }
    }
    FeatureEmbedder::from_tensors(emb.tensors, class_names)
}

// ---------------------------------------------------------------------------
// KID
// ---------------------------------------------------------------------------

/// Unbiased squared MMD with the cubic polynomial kernel
/// `k(x, y) = (x.y / d + 1)^3`, in f64 throughout. The estimator is
/// unbiased and may legitimately be negative; the raw value is returned.
pub fn kid(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<f64> {
    let (m, d) = (a.nrows(), a.ncols());
    let n = b.nrows();
    if d != b.ncols() {
        return Err(CoreError::MetricInput(format!(
            "feature dims differ: {d} vs {}",
            b.ncols()
        )));
    }
    if m < 2 || n < 2 {
        return Err(CoreError::MetricInput(format!(
            "need at least 2 features per set, got {m} and {n}"
        )));
    }
    let dd = d as f64;
    let kernel = |g: f64| {
        let v = g / dd + 1.0;
        v * v * v
    };
    let kaa = a.dot(&a.t());
    let kbb = b.dot(&b.t());
    let kab = a.dot(&b.t());
    let mut sum_aa = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                sum_aa += kernel(kaa[(i, j)]);
            }
        }
    }
    let mut sum_bb = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                sum_bb += kernel(kbb[(i, j)]);
            }
        }
    }
    let mut sum_ab = 0.0;
    for i in 0..m {
        for j in 0..n {
            sum_ab += kernel(kab[(i, j)]);
        }
    }
    Ok(sum_aa / (m * (m - 1)) as f64 + sum_bb / (n * (n - 1)) as f64
        - 2.0 * sum_ab / (m * n) as f64)
}

/// KID between two image sets under one embedder.
pub fn kid_images(
    a: &[Array3<f32>],
    b: &[Array3<f32>],
    emb: &FeatureEmbedder,
) -> Result<f64> {
    let fa = emb.embed(a)?;
    let fb = emb.embed(b)?;
    kid(fa.view(), fb.view())
}

// ---------------------------------------------------------------------------
// Perceptual distance
// ---------------------------------------------------------------------------

/// Sum over layers of the mean squared difference between channel-unit-
/// normalized activations: at each spatial location the channel vector is
/// scaled to unit length (zero vectors pass through), then squared
/// differences are averaged over all elements of the layer.
pub fn perceptual_from_activations(
    acts_a: &[ArrayD<f32>],
    acts_b: &[ArrayD<f32>],
) -> Result<f64> {
    if acts_a.len() != acts_b.len() {
        return Err(CoreError::MetricInput(format!(
            "layer counts differ: {} vs {}",
            acts_a.len(),
            acts_b.len()
        )));
    }
    let mut total = 0.0f64;
    for (la, lb) in acts_a.iter().zip(acts_b.iter()) {
        if la.shape() != lb.shape() {
            return Err(CoreError::MetricInput(format!(
                "activation shapes differ: {:?} vs {:?}",
                la.shape(),
                lb.shape()
            )));
        }
        if la.ndim() != 3 {
            return Err(CoreError::MetricInput(format!(
                "per-image activations must be [C, H, W], got {:?}",
                la.shape()
            )));
        }
        let (c, h, w) = (la.shape()[0], la.shape()[1], la.shape()[2]);
        let mut layer_sum = 0.0f64;
        for y in 0..h {
            for x in 0..w {
                let mut na = 0.0f64;
                let mut nb = 0.0f64;
                for ch in 0..c {
                    na += (la[[ch, y, x]] as f64).powi(2);
                    nb += (lb[[ch, y, x]] as f64).powi(2);
                }
                let na = if na > 0.0 { na.sqrt() } else { 1.0 };
                let nb = if nb > 0.0 { nb.sqrt() } else { 1.0 };
                for ch in 0..c {
                    let va = la[[ch, y, x]] as f64 / na;
                    let vb = lb[[ch, y, x]] as f64 / nb;
                    layer_sum += (va - vb) * (va - vb);
                }
            }
        }
        total += layer_sum / (c * h * w) as f64;
    }
    Ok(total)
}

fn slice_acts(acts: &[ArrayD<f32>], i: usize) -> Vec<ArrayD<f32>> {
    acts.iter().map(|l| l.index_axis(Axis(0), i).to_owned()).collect()
}

/// Perceptual distance between two single images.
pub fn perceptual_distance(
    a: &Array3<f32>,
    b: &Array3<f32>,
    emb: &FeatureEmbedder,
) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(CoreError::MetricInput(format!(
            "image shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let oa = emb.forward(std::slice::from_ref(a))?;
    let ob = emb.forward(std::slice::from_ref(b))?;
    perceptual_from_activations(&slice_acts(&oa.acts, 0), &slice_acts(&ob.acts, 0))
}

/// Mean pairwise perceptual distance between two equally indexed sets.
pub fn perceptual_mean(
    a: &[Array3<f32>],
    b: &[Array3<f32>],
    emb: &FeatureEmbedder,
) -> Result<f64> {
    let n = a.len().min(b.len());
    if n == 0 {
        return Err(CoreError::MetricInput("no image pairs".into()));
    }
    let oa = emb.forward(&a[..n])?;
    let ob = emb.forward(&b[..n])?;
    let mut sum = 0.0;
    for i in 0..n {
        sum += perceptual_from_activations(&slice_acts(&oa.acts, i), &slice_acts(&ob.acts, i))?;
    }
    Ok(sum / n as f64)
}

// ---------------------------------------------------------------------------
// Sample cache
// ---------------------------------------------------------------------------

/// Caches generated sample sets within one evaluation run, keyed by model
/// origin, prompt pair, guidance, and seed. Because per-sample noise
/// streams are indexed, a cached longer run serves any shorter request for
/// the same key bit-exactly.
#[derive(Default)]
pub struct SampleCache {
    map: HashMap<String, Vec<Array3<f32>>>,
}

impl SampleCache {
    pub fn new() -> Self {
        Self::default()
    }

    #[allow(clippy::too_many_arguments)]
    pub fn get<T: Real>(
        &mut self,
        den: &Denoiser<T>,
        sched: &NoiseSchedule,
        vocab: &Vocabulary,
        prompt: &str,
        negative: Option<&str>,
        guidance_scale: f64,
        n: usize,
        seed: u64,
    ) -> Result<Vec<Array3<f32>>> {
        let key = format!(
            "{}|{}|{}|{}|{}",
            den.origin_hash(),
            prompt,
            negative.unwrap_or("-"),
            guidance_scale,
            seed
        );
        if let Some(cached) = self.map.get(&key) {
            if cached.len() >= n {
                return Ok(cached[..n].to_vec());
            }
        }
        let req = SampleRequest {
            prompt: vocab.encode(prompt)?,
            negative: negative.map(|p| vocab.encode(p)).transpose()?,
            guidance_scale,
            n,
            seed,
        };
        let images = sample(den, sched, vocab, &req)?;
        self.map.insert(key, images.clone());
        Ok(images)
    }
}

// ---------------------------------------------------------------------------
// Discrepancy reports
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Samples per prompt group (target / surrounding).
    pub n_per_group: usize,
    /// Guidance scale used when sampling for evaluation.
    pub guidance_scale: f64,
    /// Seed for the primary sample sets (shared between models: pairing).
    pub seed: u64,
    /// Extra seeds for the base-vs-base resampling baseline.
    pub baseline_seeds: [u64; 2],
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { n_per_group: 256, guidance_scale: 1.0, seed: 1000, baseline_seeds: [1001, 1002] }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupMetrics {
    /// Unbiased KID, reported with the x1000 convention.
    pub kid_x1000: f64,
    /// Mean pairwise perceptual distance (shared noise pairing).
    pub perceptual: f64,
    pub n: usize,
    pub prompts: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiscrepancyReport {
    pub concept: String,
    pub base_hash: String,
    pub candidate_hash: String,
    pub target: GroupMetrics,
    pub surrounding: GroupMetrics,
    /// Mean KID (x1000) between base sample sets drawn with different seeds
    /// under the surrounding prompts: the same-distribution noise floor.
    pub surrounding_baseline_x1000: f64,
    pub baseline_values_x1000: Vec<f64>,
    pub embedder_version: String,
    pub seed: u64,
    pub guidance_scale: f64,
}

/// Splits `n` samples across the group's prompts as evenly as possible.
fn per_prompt_counts(n: usize, prompts: usize) -> Vec<usize> {
    let base = n / prompts;
    let extra = n % prompts;
    (0..prompts).map(|i| base + usize::from(i < extra)).collect()
}

#[allow(clippy::too_many_arguments)]
fn group_samples<T: Real>(
    den: &Denoiser<T>,
    sched: &NoiseSchedule,
    vocab: &Vocabulary,
    cache: &mut SampleCache,
    prompts: &[String],
    guidance: f64,
    n: usize,
    seed: u64,
) -> Result<Vec<Array3<f32>>> {
    let counts = per_prompt_counts(n, prompts.len());
    let mut out = Vec::with_capacity(n);
    for (prompt, &k) in prompts.iter().zip(&counts) {
        if k == 0 {
            continue;
        }
        out.extend(cache.get(den, sched, vocab, prompt, None, guidance, k, seed)?);
    }
    Ok(out)
}

/// Compares a candidate model against the base under a concept's target and
/// surrounding prompt groups, with identical per-prompt seeds on both sides.
#[allow(clippy::too_many_arguments)]
pub fn discrepancy_report<T: Real>(
    base: &Denoiser<T>,
    candidate: &Denoiser<T>,
    cspec: &ConceptSpec,
    contents: &[String],
    vocab: &Vocabulary,
    sched: &NoiseSchedule,
    emb: &FeatureEmbedder,
    cache: &mut SampleCache,
    cfg: &EvalConfig,
) -> Result<DiscrepancyReport> {
    if cfg.n_per_group < 2 {
        return Err(CoreError::MetricInput("need n_per_group >= 2".into()));
    }
    if contents.is_empty() {
        return Err(CoreError::MetricInput("no contents for prompt groups".into()));
    }
    let target_prompts: Vec<String> =
        contents.iter().map(|c| cspec.target_prompt(c)).collect();
    let surrounding_prompts: Vec<String> =
        contents.iter().map(|c| cspec.surrounding_prompt(c)).collect();

    let mut metrics_for = |prompts: &[String]| -> Result<GroupMetrics> {
        let a = group_samples(base, sched, vocab, cache, prompts, cfg.guidance_scale, cfg.n_per_group, cfg.seed)?;
        let b = group_samples(candidate, sched, vocab, cache, prompts, cfg.guidance_scale, cfg.n_per_group, cfg.seed)?;
        Ok(GroupMetrics {
            kid_x1000: 1000.0 * kid_images(&a, &b, emb)?,
            perceptual: perceptual_mean(&a, &b, emb)?,
            n: cfg.n_per_group,
            prompts: prompts.to_vec(),
        })
    };
    let target = metrics_for(&target_prompts)?;
    let surrounding = metrics_for(&surrounding_prompts)?;

    // Base-vs-base resampling floor on the surrounding group.
    let seeds = [cfg.seed, cfg.baseline_seeds[0], cfg.baseline_seeds[1]];
    let sets: Vec<Vec<Array3<f32>>> = seeds
        .iter()
        .map(|&s| {
            group_samples(base, sched, vocab, cache, &surrounding_prompts, cfg.guidance_scale, cfg.n_per_group, s)
        })
        .collect::<Result<_>>()?;
    let mut baseline_values = Vec::new();
    for i in 0..sets.len() {
        for j in (i + 1)..sets.len() {
            baseline_values.push(1000.0 * kid_images(&sets[i], &sets[j], emb)?);
        }
    }
    let baseline = baseline_values.iter().sum::<f64>() / baseline_values.len() as f64;

    Ok(DiscrepancyReport {
        concept: cspec.id.clone(),
        base_hash: base.origin_hash().to_string(),
        candidate_hash: candidate.origin_hash().to_string(),
        target,
        surrounding,
        surrounding_baseline_x1000: baseline,
        baseline_values_x1000: baseline_values,
        embedder_version: emb.version().to_string(),
        seed: cfg.seed,
        guidance_scale: cfg.guidance_scale,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_dataset;
    use crate::diffusion::make_schedule;
    use crate::weights::{init_model, ArchConfig};

    fn probe_corpus(seed: u64, per: usize) -> (Vocabulary, Dataset) {
        let vocab = Vocabulary::standard();
        let ds = gen_dataset(
            &vocab,
            &[
                ("painting of circle by umbra".into(), per),
                ("painting of square by umbra".into(), per),
                ("painting of circle by viridian".into(), per),
                ("painting of square by viridian".into(), per),
            ],
            seed,
        )
        .unwrap();
        (vocab, ds)
    }

    fn tiny_embedder() -> FeatureEmbedder {
        let (_, ds) = probe_corpus(5, 10);
        train_embedder(&ds, &EmbedderTrainHp { epochs: 4, ..Default::default() }).unwrap()
    }

    #[test]
    fn kid_on_all_zero_sets_is_exactly_zero() {
        let a = Array2::<f64>::zeros((4, 8));
        let b = Array2::<f64>::zeros((6, 8));
        assert_eq!(kid(a.view(), b.view()).unwrap(), 0.0);
    }

    #[test]
    fn kid_matches_double_loop_oracle() {
        // Brute-force unbiased MMD^2 with scalar dot products.
        fn oracle(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
            let d = a.ncols() as f64;
            let k = |x: ndarray::ArrayView1<f64>, y: ndarray::ArrayView1<f64>| {
                let dot: f64 = x.iter().zip(y.iter()).map(|(u, v)| u * v).sum();
                (dot / d + 1.0).powi(3)
            };
            let (m, n) = (a.nrows(), b.nrows());
            let mut saa = 0.0;
            for i in 0..m {
                for j in 0..m {
                    if i != j {
                        saa += k(a.row(i), a.row(j));
                    }
                }
            }
            let mut sbb = 0.0;
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        sbb += k(b.row(i), b.row(j));
                    }
                }
            }
            let mut sab = 0.0;
            for i in 0..m {
                for j in 0..n {
                    sab += k(a.row(i), b.row(j));
                }
            }
            saa / (m * (m - 1)) as f64 + sbb / (n * (n - 1)) as f64
                - 2.0 * sab / (m * n) as f64
        }
        for case in 0..8u64 {
            let mut rng = derive_rng(case, "kid-oracle", 0);
            let a4 = randn::<f64, _>(&mut rng, &[4, 6]);
            let b4 = randn::<f64, _>(&mut rng, &[4, 6]);
            let a = Array2::from_shape_fn((4, 6), |(i, j)| a4[[i, j]]);
            let b = Array2::from_shape_fn((4, 6), |(i, j)| b4[[i, j]]);
            let got = kid(a.view(), b.view()).unwrap();
            let want = oracle(&a, &b);
            assert!((got - want).abs() <= 1e-10, "case {case}: {got} vs {want}");
        }
    }

    #[test]
    fn kid_separates_distant_masses_and_is_permutation_invariant() {
        let mut rng = derive_rng(3, "kid-sep", 0);
        let base = randn::<f64, _>(&mut rng, &[8, 5]);
        let a = Array2::from_shape_fn((8, 5), |(i, j)| base[[i, j]]);
        let far = a.mapv(|v| v + 10.0);
        let sep = kid(a.view(), far.view()).unwrap();
        // Same-distribution resample for comparison.
        let re = randn::<f64, _>(&mut rng, &[8, 5]);
        let b = Array2::from_shape_fn((8, 5), |(i, j)| re[[i, j]]);
        let same = kid(a.view(), b.view()).unwrap();
        assert!(sep > same.max(0.0) * 10.0 && sep > 100.0, "sep {sep} vs same {same}");
        // Permutation invariance.
        let mut perm = a.clone();
        let r0 = perm.row(0).to_owned();
        let r5 = perm.row(5).to_owned();
        perm.row_mut(0).assign(&r5);
        perm.row_mut(5).assign(&r0);
        let k1 = kid(a.view(), b.view()).unwrap();
        let k2 = kid(perm.view(), b.view()).unwrap();
        assert!((k1 - k2).abs() < 1e-12);
    }

    #[test]
    fn kid_on_duplicate_set_is_non_positive_and_tiny() {
        // The unbiased estimator on X vs X is <= 0 by kernel
        // Cauchy-Schwarz (cross terms include the diagonal, within terms do
        // not); it must never be clamped.
        let mut rng = derive_rng(4, "kid-dup", 0);
        let x = randn::<f64, _>(&mut rng, &[10, 6]);
        let a = Array2::from_shape_fn((10, 6), |(i, j)| x[[i, j]]);
        let v = kid(a.view(), a.view()).unwrap();
        assert!(v <= 1e-12, "kid(X,X) = {v} must be <= 0 up to rounding");
    }

    #[test]
    fn kid_rejects_bad_inputs() {
        let a = Array2::<f64>::zeros((4, 8));
        let b = Array2::<f64>::zeros((4, 7));
        assert!(kid(a.view(), b.view()).is_err());
        let tiny = Array2::<f64>::zeros((1, 8));
        assert!(kid(a.view(), tiny.view()).is_err());
        assert!(kid(tiny.view(), a.view()).is_err());
    }

    #[test]
    fn embedder_is_deterministic_and_permutation_equivariant() {
        let emb = tiny_embedder();
        let (_, ds) = probe_corpus(6, 3);
        let images: Vec<_> = ds.items.iter().map(|i| i.image.clone()).collect();
        let f1 = emb.embed(&images).unwrap();
        let f2 = emb.embed(&images).unwrap();
        assert_eq!(f1, f2);
        // Reversed batch order reverses features identically.
        let rev: Vec<_> = images.iter().rev().cloned().collect();
        let fr = emb.embed(&rev).unwrap();
        for i in 0..images.len() {
            let a = f1.row(i);
            let b = fr.row(images.len() - 1 - i);
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(x, y);
            }
        }
    }

    #[test]
    fn embedder_separates_concepts_linearly() {
        // The classifier head is a linear probe on the pooled features, so
        // held-out accuracy >= 95% certifies linear separability.
        let emb = tiny_embedder();
        let (_, eval) = probe_corpus(777, 15);
        let images: Vec<_> = eval.items.iter().map(|i| i.image.clone()).collect();
        let preds = emb.classify(&images).unwrap();
        let names = emb.class_names();
        let mut correct = 0;
        for (item, &p) in eval.items.iter().zip(&preds) {
            if names[p] == item.class_label() {
                correct += 1;
            }
        }
        let acc = correct as f64 / eval.len() as f64;
        assert!(acc >= 0.95, "held-out accuracy {acc}");
    }

    #[test]
    fn embedder_version_is_stable_and_roundtrips() {
        let emb = tiny_embedder();
        let emb2 = tiny_embedder();
        assert_eq!(emb.version(), emb2.version());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("embedder.bin");
        emb.save(&path).unwrap();
        let back = FeatureEmbedder::load(&path).unwrap();
        assert_eq!(back.version(), emb.version());
        assert_eq!(back.class_names(), emb.class_names());
    }

    #[test]
    fn perceptual_identity_and_symmetry() {
        let emb = tiny_embedder();
        let (_, ds) = probe_corpus(8, 2);
        let imgs: Vec<_> = ds.items.iter().map(|i| i.image.clone()).collect();
        assert_eq!(perceptual_distance(&imgs[0], &imgs[0], &emb).unwrap(), 0.0);
        for i in 0..imgs.len() {
            for j in (i + 1)..imgs.len() {
                let ab = perceptual_distance(&imgs[i], &imgs[j], &emb).unwrap();
                let ba = perceptual_distance(&imgs[j], &imgs[i], &emb).unwrap();
                assert!((ab - ba).abs() < 1e-15);
                assert!(ab >= 0.0);
            }
        }
    }

    #[test]
    fn perceptual_matches_frozen_hand_computation() {
        // Two-layer toy activations on 2x2 / 1x1 grids; expected value from
        // a 40-digit scalar evaluation of the normalize-then-average form.
        let l1a = ndarray::arr3(&[[[1.0f32, 2.0], [3.0, 4.0]], [[0.0, 1.0], [1.0, 0.0]]]);
        let l1b = ndarray::arr3(&[[[2.0f32, 1.0], [0.0, 1.0]], [[1.0, 1.0], [2.0, 2.0]]]);
        let l2a = ndarray::arr3(&[[[3.0f32]], [[4.0]]]);
        let l2b = ndarray::arr3(&[[[4.0f32]], [[3.0]]]);
        let a = vec![l1a.into_dyn(), l2a.into_dyn()];
        let b = vec![l1b.into_dyn(), l2b.into_dyn()];
        let d = perceptual_from_activations(&a, &b).unwrap();
        assert!((d - 0.3883620373581936).abs() < 1e-12, "{d}");
        // Mismatched shapes and layer counts are rejected.
        assert!(perceptual_from_activations(&a, &b[..1].to_vec()).is_err());
    }

    #[test]
    fn self_discrepancy_is_at_noise_floor() {
        let vocab = Vocabulary::standard();
        let arch = ArchConfig { widths: [8, 8, 8], vocab_size: vocab.len(), ..Default::default() };
        let w = init_model::<f32>(&arch, vocab.hash(), 21).unwrap();
        let den = Denoiser::from_weights(&w);
        let sched = make_schedule(6, 1e-4, 2e-2).unwrap();
        let emb = tiny_embedder();
        let cspec = vocab.concept_spec("umbra").unwrap();
        let mut cache = SampleCache::new();
        let cfg = EvalConfig { n_per_group: 6, guidance_scale: 1.0, seed: 50, baseline_seeds: [51, 52] };
        let report = discrepancy_report(
            &den,
            &den,
            &cspec,
            &["circle".into(), "square".into()],
            &vocab,
            &sched,
            &emb,
            &mut cache,
            &cfg,
        )
        .unwrap();
        // Identical model and identical seeds: both groups compare a set
        // with itself, so KID is <= 0 up to rounding, far below the
        // resampling baseline plus noise.
        assert!(report.target.kid_x1000 <= 1e-9, "{}", report.target.kid_x1000);
        assert!(report.surrounding.kid_x1000 <= 1e-9);
        assert_eq!(report.target.perceptual, 0.0);
        assert!(report.surrounding_baseline_x1000.is_finite());
        assert_eq!(report.baseline_values_x1000.len(), 3);
        assert_eq!(report.embedder_version, emb.version());
        // And the report is reproducible from the same inputs.
        let report2 = discrepancy_report(
            &den,
            &den,
            &cspec,
            &["circle".into(), "square".into()],
            &vocab,
            &sched,
            &emb,
            &mut SampleCache::new(),
            &cfg,
        )
        .unwrap();
        assert_eq!(report.target.kid_x1000, report2.target.kid_x1000);
        assert_eq!(report.surrounding_baseline_x1000, report2.surrounding_baseline_x1000);
    }

    #[test]
    fn per_prompt_counts_partition_evenly() {
        assert_eq!(per_prompt_counts(10, 3), vec![4, 3, 3]);
        assert_eq!(per_prompt_counts(6, 3), vec![2, 2, 2]);
        assert_eq!(per_prompt_counts(2, 5), vec![1, 1, 0, 0, 0]);
    }
}

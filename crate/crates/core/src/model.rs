//! The conditional denoising network.
//!
//! A small pixel-space UNet: two downsampling stages, self- and
//! cross-attention at the 16x16 and 8x8 resolutions, sinusoidal timestep
//! embedding, and prompt conditioning through a learned token table expanded
//! into a fixed number of context tokens.
//!
//! A [`Denoiser`] is built from a [`ComposedModel`]: all frozen plug-in
//! attachments are folded into dense weights up front, while at most one
//! *explicit* adapter can be kept as a live low-rank branch on every
//! attention projection — that branch is what gets trained, and what gets
//! captured for data-free distillation.

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::ArrayD;

use atelier_engine::{Graph, Real, Var};

use crate::error::{CoreError, Result};
use crate::lora::{ComposedModel, LoraLayer, LoraPlugin, PluginMeta};
use crate::util::sha256_hex;
use crate::vocab::Prompt;
use crate::weights::{ArchConfig, ModelWeights};

const GN_EPS: f64 = 1e-5;

/// What a forward pass should expose besides the prediction.
#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOpts {
    /// Make every dense tensor a trainable leaf (base-model training).
    pub train_dense: bool,
    /// Make the explicit adapter's tensors trainable leaves.
    pub train_adapter: bool,
    /// Record every adapter branch's input and output.
    pub capture: bool,
}

/// Input and output of one adapter branch during a forward pass.
#[derive(Debug, Clone)]
pub struct LayerCapture<T: Real> {
    pub layer_id: String,
    /// Projection input, `[B, L, in]`.
    pub input: Arc<ArrayD<T>>,
    /// Branch output including sign and scale, `[B, L, out]`.
    pub branch_out: Arc<ArrayD<T>>,
}

/// Handles returned by [`Denoiser::forward`].
pub struct BuiltForward<T: Real> {
    /// Predicted noise, `[B, C, H, W]`.
    pub eps: Var,
    /// Trainable leaves by parameter name (empty for pure inference).
    pub params: BTreeMap<String, Var>,
    pub captures: Vec<LayerCapture<T>>,
}

/// A live low-rank branch: the adapter currently being trained or captured.
#[derive(Debug, Clone)]
pub struct ExplicitAdapter<T: Real> {
    pub meta: PluginMeta,
    /// `{layer}.a` / `{layer}.b` tensors, updated in place by the optimizer.
    pub params: BTreeMap<String, Arc<ArrayD<T>>>,
    /// `alpha / rank`.
    pub scale: f64,
    /// +1.0 applies `w + w_L`, -1.0 applies `w - w_L`.
    pub sign: f64,
}

impl<T: Real> ExplicitAdapter<T> {
    pub fn from_plugin(plugin: &LoraPlugin<T>, sign: i8) -> Result<Self> {
        if sign != 1 && sign != -1 {
            return Err(CoreError::InvalidHyperparameter(format!(
                "adapter sign must be +1 or -1, got {sign}"
            )));
        }
        let mut params = BTreeMap::new();
        for (id, layer) in &plugin.layers {
            params.insert(format!("{id}.a"), Arc::clone(&layer.a));
            params.insert(format!("{id}.b"), Arc::clone(&layer.b));
        }
        Ok(ExplicitAdapter {
            meta: plugin.meta.clone(),
            params,
            scale: plugin.scale(),
            sign: sign as f64,
        })
    }

    /// Rebuilds a plug-in from the (possibly updated) tensors.
    pub fn to_plugin(&self) -> LoraPlugin<T> {
        let mut layers: BTreeMap<String, LoraLayer<T>> = BTreeMap::new();
        for (key, tensor) in &self.params {
            let (id, half) = key.rsplit_once('.').expect("adapter param key");
            let entry = layers.entry(id.to_string()).or_insert_with(|| LoraLayer {
                a: Arc::new(ArrayD::zeros(ndarray::IxDyn(&[0]))),
                b: Arc::new(ArrayD::zeros(ndarray::IxDyn(&[0]))),
            });
            match half {
                "a" => entry.a = Arc::clone(tensor),
                "b" => entry.b = Arc::clone(tensor),
                _ => unreachable!("adapter param suffix"),
            }
        }
        LoraPlugin { meta: self.meta.clone(), layers }
    }
}

/// A ready-to-run denoiser: folded dense weights plus an optional explicit
/// adapter branch.
#[derive(Debug, Clone)]
pub struct Denoiser<T: Real> {
    arch: ArchConfig,
    vocab_hash: String,
    /// Dense tensors; mutated only by the base-model trainer.
    pub tensors: BTreeMap<String, Arc<ArrayD<T>>>,
    pub adapter: Option<ExplicitAdapter<T>>,
    /// Identity of what this denoiser computes (for caching and manifests).
    origin_hash: String,
}

impl<T: Real> Denoiser<T> {
    /// Inference denoiser: every attachment folded into dense weights.
    pub fn from_composed(model: &ComposedModel<T>) -> Result<Self> {
        Ok(Denoiser {
            arch: model.base.arch().clone(),
            vocab_hash: model.base.vocab_hash().to_string(),
            tensors: model.fold_tensors()?,
            adapter: None,
            origin_hash: model.effective_hash(),
        })
    }

    /// Denoiser over `model` with one live adapter branch applied with
    /// `sign`. The adapter must target this composition (or its raw base)
    /// and fit the architecture.
    pub fn with_explicit_adapter(
        model: &ComposedModel<T>,
        plugin: &LoraPlugin<T>,
        sign: i8,
    ) -> Result<Self> {
        let eff = model.effective_hash();
        if plugin.meta.base_model_hash != eff
            && plugin.meta.base_model_hash != model.base.content_hash()
        {
            return Err(CoreError::BaseHashMismatch {
                expected: plugin.meta.base_model_hash.clone(),
                actual: eff,
            });
        }
        plugin.check_against_arch(model.base.arch())?;
        let adapter = ExplicitAdapter::from_plugin(plugin, sign)?;
        let origin = sha256_hex(
            format!(
                "adapter:{eff}:{}:{}",
                plugin.plugin_id()?,
                if sign >= 0 { '+' } else { '-' }
            )
            .as_bytes(),
        );
        Ok(Denoiser {
            arch: model.base.arch().clone(),
            vocab_hash: model.base.vocab_hash().to_string(),
            tensors: model.fold_tensors()?,
            adapter: Some(adapter),
            origin_hash: origin,
        })
    }

    /// Fresh trainable denoiser over raw weights (base-model training).
    pub fn from_weights(weights: &ModelWeights<T>) -> Self {
        Denoiser {
            arch: weights.arch().clone(),
            vocab_hash: weights.vocab_hash().to_string(),
            tensors: weights.tensors().clone(),
            adapter: None,
            origin_hash: weights.content_hash(),
        }
    }

    /// Snapshot of the dense tensors as a saveable model.
    pub fn to_weights(&self) -> ModelWeights<T> {
        ModelWeights::new(self.arch.clone(), self.vocab_hash.clone(), self.tensors.clone())
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn vocab_hash(&self) -> &str {
        &self.vocab_hash
    }

    pub fn origin_hash(&self) -> &str {
        &self.origin_hash
    }

    /// Builds one forward pass into `g` and returns the prediction handle.
    ///
    /// `x_t` is `[B, C, H, W]`, `ts` holds one timestep per sample, and
    /// `prompts` one encoded prompt per sample (all against this model's
    /// vocabulary).
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        x_t: ArrayD<T>,
        ts: &[usize],
        prompts: &[Prompt],
        opts: ForwardOpts,
    ) -> Result<BuiltForward<T>> {
        let b = x_t.shape().first().copied().unwrap_or(0);
        let want = [b, self.arch.in_channels, self.arch.image_size, self.arch.image_size];
        if b == 0 || x_t.shape() != want {
            return Err(CoreError::ShapeMismatch {
                context: "denoiser input".into(),
                expected: format!("{want:?} with B > 0"),
                actual: format!("{:?}", x_t.shape()),
            });
        }
        if ts.len() != b || prompts.len() != b {
            return Err(CoreError::ShapeMismatch {
                context: "denoiser timesteps/prompts".into(),
                expected: format!("{b} of each"),
                actual: format!("{} timesteps, {} prompts", ts.len(), prompts.len()),
            });
        }
        for p in prompts {
            if p.vocab_hash != self.vocab_hash {
                return Err(CoreError::VocabMismatch {
                    expected: self.vocab_hash.clone(),
                    actual: p.vocab_hash.clone(),
                });
            }
        }

        let mut nb = NetBuilder {
            g,
            den: self,
            vars: BTreeMap::new(),
            params: BTreeMap::new(),
            captures: Vec::new(),
            opts,
            tact: None,
        };

        // Timestep embedding: sinusoidal features -> two-layer MLP.
        let temb = sinusoidal_time_embedding::<T>(ts, self.arch.d_time);
        let temb = nb.g.constant(temb);
        let w1 = nb.v("time.mlp1.w")?;
        let b1 = nb.v("time.mlp1.b")?;
        let t1 = nb.g.linear(temb, w1, Some(b1));
        let t1 = nb.g.silu(t1);
        let w2 = nb.v("time.mlp2.w")?;
        let b2 = nb.v("time.mlp2.b")?;
        let t2 = nb.g.linear(t1, w2, Some(b2));
        nb.tact = Some(nb.g.silu(t2));

        // Prompt conditioning: mean token embedding -> context tokens.
        let ids: Vec<Vec<usize>> = prompts.iter().map(|p| p.ids.clone()).collect();
        let table = nb.v("cond.embed")?;
        let emb = nb.g.embed_mean(table, ids);
        let cw = nb.v("cond.ctx.w")?;
        let cb = nb.v("cond.ctx.b")?;
        let ctx = nb.g.linear(emb, cw, Some(cb));
        let ctx = nb.g.reshape(ctx, &[b, self.arch.n_ctx_tokens, self.arch.d_cond]);

        let [c0, c1, c2] = self.arch.widths;
        let s = self.arch.image_size; // 32
        let s2 = s / 2; // 16
        let s4 = s / 4; // 8

        let x = nb.g.constant(x_t);
        let (cw_in, cb_in) = (nb.v("conv_in.w")?, nb.v("conv_in.b")?);
        let h0 = nb.g.conv2d(x, cw_in, Some(cb_in), 1, 1);
        let e0 = nb.resblock("enc0", h0, c0, c0)?;
        let (dw0, db0) = (nb.v("down0.w")?, nb.v("down0.b")?);
        let d0 = nb.g.conv2d(e0, dw0, Some(db0), 2, 1);
        let mut e1 = nb.resblock("enc1", d0, c1, c1)?;
        e1 = nb.attn_block("enc_attn", "self", e1, ctx, s2, s2)?;
        e1 = nb.attn_block("enc_attn", "cross", e1, ctx, s2, s2)?;
        let (dw1, db1) = (nb.v("down1.w")?, nb.v("down1.b")?);
        let d1 = nb.g.conv2d(e1, dw1, Some(db1), 2, 1);
        let mut m = nb.resblock("mid1", d1, c2, c2)?;
        m = nb.attn_block("mid_attn", "self", m, ctx, s4, s4)?;
        m = nb.attn_block("mid_attn", "cross", m, ctx, s4, s4)?;
        m = nb.resblock("mid2", m, c2, c2)?;
        let u1 = nb.g.upsample_nearest2(m);
        let (uw1, ub1) = (nb.v("up1.w")?, nb.v("up1.b")?);
        let u1 = nb.g.conv2d(u1, uw1, Some(ub1), 1, 0);
        let cat1 = nb.g.concat_ch(u1, e1);
        let mut dd1 = nb.resblock("dec1", cat1, 2 * c1, c1)?;
        dd1 = nb.attn_block("dec_attn", "self", dd1, ctx, s2, s2)?;
        dd1 = nb.attn_block("dec_attn", "cross", dd1, ctx, s2, s2)?;
        let u0 = nb.g.upsample_nearest2(dd1);
        let (uw0, ub0) = (nb.v("up0.w")?, nb.v("up0.b")?);
        let u0 = nb.g.conv2d(u0, uw0, Some(ub0), 1, 0);
        let cat0 = nb.g.concat_ch(u0, e0);
        let dd0 = nb.resblock("dec0", cat0, 2 * c0, c0)?;
        let (hg, hb) = (nb.v("head.gn.g")?, nb.v("head.gn.b")?);
        let hn = nb.g.group_norm(dd0, hg, hb, self.arch.groups, GN_EPS);
        let hs = nb.g.silu(hn);
        let (hw, hbias) = (nb.v("head.conv.w")?, nb.v("head.conv.b")?);
        let eps = nb.g.conv2d(hs, hw, Some(hbias), 1, 1);

        Ok(BuiltForward { eps, params: nb.params, captures: nb.captures })
    }
}

/// Sinusoidal features for raw timesteps: `[sin(t f_k) .. cos(t f_k) ..]`
/// with geometrically spaced frequencies from 1 down to 1e-4.
pub fn sinusoidal_time_embedding<T: Real>(ts: &[usize], d_time: usize) -> ArrayD<T> {
    assert!(d_time >= 2 && d_time % 2 == 0, "d_time must be even and >= 2");
    let half = d_time / 2;
    let mut out = ArrayD::<T>::zeros(ndarray::IxDyn(&[ts.len(), d_time]));
    for (i, &t) in ts.iter().enumerate() {
        for k in 0..half {
            let exponent = if half > 1 { k as f64 / (half - 1) as f64 } else { 0.0 };
            let freq = (-(10000f64).ln() * exponent).exp();
            let angle = t as f64 * freq;
            out[[i, k]] = T::from_f64(angle.sin());
            out[[i, half + k]] = T::from_f64(angle.cos());
        }
    }
    out
}

struct NetBuilder<'g, 'd, T: Real> {
    g: &'g mut Graph<T>,
    den: &'d Denoiser<T>,
    /// Dense tensor leaves, created on first use.
    vars: BTreeMap<String, Var>,
    params: BTreeMap<String, Var>,
    captures: Vec<LayerCapture<T>>,
    opts: ForwardOpts,
    /// Activated time embedding `[B, time_hidden]`, set before any resblock.
    tact: Option<Var>,
}

impl<T: Real> NetBuilder<'_, '_, T> {
    /// Leaf var for a dense tensor (trainable iff `train_dense`).
    fn v(&mut self, name: &str) -> Result<Var> {
        if let Some(&var) = self.vars.get(name) {
            return Ok(var);
        }
        let tensor = self
            .den
            .tensors
            .get(name)
            .ok_or_else(|| CoreError::UnknownLayer(name.to_string()))?;
        let var = self.g.leaf(Arc::clone(tensor), self.opts.train_dense);
        self.vars.insert(name.to_string(), var);
        if self.opts.train_dense {
            self.params.insert(name.to_string(), var);
        }
        Ok(var)
    }

    fn resblock(&mut self, name: &str, x: Var, cin: usize, cout: usize) -> Result<Var> {
        let groups = self.den.arch.groups;
        let (g1g, g1b) = (self.v(&format!("{name}.gn1.g"))?, self.v(&format!("{name}.gn1.b"))?);
        let h = self.g.group_norm(x, g1g, g1b, groups, GN_EPS);
        let h = self.g.silu(h);
        let (c1w, c1b) = (self.v(&format!("{name}.conv1.w"))?, self.v(&format!("{name}.conv1.b"))?);
        let h = self.g.conv2d(h, c1w, Some(c1b), 1, 1);
        let (ew, eb) = (self.v(&format!("{name}.emb.w"))?, self.v(&format!("{name}.emb.b"))?);
        let tact = self.tact.expect("time embedding is built before resblocks");
        let e = self.g.linear(tact, ew, Some(eb));
        let h = self.g.add_channel_bias(h, e);
        let (g2g, g2b) = (self.v(&format!("{name}.gn2.g"))?, self.v(&format!("{name}.gn2.b"))?);
        let h = self.g.group_norm(h, g2g, g2b, groups, GN_EPS);
        let h = self.g.silu(h);
        let (c2w, c2b) = (self.v(&format!("{name}.conv2.w"))?, self.v(&format!("{name}.conv2.b"))?);
        let h = self.g.conv2d(h, c2w, Some(c2b), 1, 1);
        let skip = if cin == cout {
            x
        } else {
            let (sw, sb) = (self.v(&format!("{name}.skip.w"))?, self.v(&format!("{name}.skip.b"))?);
            self.g.conv2d(x, sw, Some(sb), 1, 0)
        };
        Ok(self.g.add(h, skip))
    }

    /// Attention projection with the optional live adapter branch.
    fn attn_proj(&mut self, layer_id: &str, x: Var) -> Result<Var> {
        let w = self.v(&format!("{layer_id}.w"))?;
        let main = self.g.linear(x, w, None);
        let Some(adapter) = self.den.adapter.as_ref() else {
            return Ok(main);
        };
        let (Some(a_t), Some(b_t)) = (
            adapter.params.get(&format!("{layer_id}.a")),
            adapter.params.get(&format!("{layer_id}.b")),
        ) else {
            return Ok(main);
        };
        let trainable = self.opts.train_adapter;
        let a = self.g.leaf(Arc::clone(a_t), trainable);
        let b = self.g.leaf(Arc::clone(b_t), trainable);
        if trainable {
            self.params.insert(format!("{layer_id}.a"), a);
            self.params.insert(format!("{layer_id}.b"), b);
        }
        let h = self.g.linear(x, a, None);
        let o = self.g.linear(h, b, None);
        let scaled = self.g.scale(o, T::from_f64(adapter.sign * adapter.scale));
        if self.opts.capture {
            self.captures.push(LayerCapture {
                layer_id: layer_id.to_string(),
                input: self.g.value_arc(x),
                branch_out: self.g.value_arc(scaled),
            });
        }
        Ok(self.g.add(main, scaled))
    }

    fn attn_block(
        &mut self,
        blk: &str,
        kind: &str,
        x: Var,
        ctx: Var,
        h: usize,
        w: usize,
    ) -> Result<Var> {
        let groups = self.den.arch.groups;
        let (gg, gb) =
            (self.v(&format!("{blk}.{kind}.gn.g"))?, self.v(&format!("{blk}.{kind}.gn.b"))?);
        let xn = self.g.group_norm(x, gg, gb, groups, GN_EPS);
        let tok = self.g.to_tokens(xn);
        let kv_src = if kind == "self" { tok } else { ctx };
        let q = self.attn_proj(&format!("{blk}.{kind}.q"), tok)?;
        let k = self.attn_proj(&format!("{blk}.{kind}.k"), kv_src)?;
        let v = self.attn_proj(&format!("{blk}.{kind}.v"), kv_src)?;
        let att = self.g.attention(q, k, v);
        let out = self.attn_proj(&format!("{blk}.{kind}.out"), att)?;
        let sp = self.g.from_tokens(out, h, w);
        Ok(self.g.add(x, sp))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::{init_plugin, CreationKind};
    use crate::util::derive_rng;
    use crate::vocab::Vocabulary;
    use crate::weights::init_model;
    use atelier_engine::randn;

    fn arch() -> ArchConfig {
        ArchConfig { widths: [8, 8, 8], ..ArchConfig::default() }
    }

    fn setup() -> (Vocabulary, Arc<ModelWeights<f64>>) {
        let vocab = Vocabulary::standard();
        let mut a = arch();
        a.vocab_size = vocab.len();
        let w = init_model::<f64>(&a, vocab.hash(), 7).unwrap();
        (vocab, Arc::new(w))
    }

    /// Base weights with a non-zero head so outputs respond to inputs.
    fn lively_base(seed: u64) -> (Vocabulary, Arc<ModelWeights<f64>>) {
        let (vocab, w) = setup();
        let mut tensors = w.tensors().clone();
        let shape = tensors.get("head.conv.w").unwrap().shape().to_vec();
        let mut rng = derive_rng(seed, "test-head", 0);
        let mut hw = randn::<f64, _>(&mut rng, &shape);
        hw.mapv_inplace(|v| v * 0.05);
        tensors.insert("head.conv.w".into(), Arc::new(hw));
        let w2 = ModelWeights::new(w.arch().clone(), w.vocab_hash().to_string(), tensors);
        (vocab, Arc::new(w2))
    }

    fn batch(vocab: &Vocabulary, n: usize, seed: u64) -> (ArrayD<f64>, Vec<usize>, Vec<Prompt>) {
        let mut rng = derive_rng(seed, "test-batch", 0);
        let x = randn::<f64, _>(&mut rng, &[n, 3, 32, 32]);
        let ts = (0..n).map(|i| 1 + (i * 7) % 50).collect();
        let prompts = (0..n)
            .map(|i| {
                vocab
                    .encode(if i % 2 == 0 { "painting of circle by umbra" } else { "cartoon of star" })
                    .unwrap()
            })
            .collect();
        (x, ts, prompts)
    }

    #[test]
    fn untrained_model_predicts_exactly_zero() {
        let (vocab, w) = setup();
        let den = Denoiser::from_weights(&w);
        let (x, ts, prompts) = batch(&vocab, 2, 1);
        let mut g = Graph::new();
        let out = den.forward(&mut g, x, &ts, &prompts, ForwardOpts::default()).unwrap();
        let y = g.value(out.eps);
        assert_eq!(y.shape(), &[2, 3, 32, 32]);
        assert!(y.iter().all(|&v| v == 0.0));
        assert!(out.params.is_empty());
        assert!(out.captures.is_empty());
    }

    #[test]
    fn forward_is_deterministic_and_prompt_sensitive() {
        let (vocab, w) = lively_base(2);
        let den = Denoiser::from_weights(&w);
        let (x, ts, prompts) = batch(&vocab, 2, 3);
        let run = |prompts: &[Prompt]| {
            let mut g = Graph::new();
            let out = den
                .forward(&mut g, x.clone(), &ts, prompts, ForwardOpts::default())
                .unwrap();
            g.value(out.eps).clone()
        };
        let y1 = run(&prompts);
        let y2 = run(&prompts);
        assert_eq!(y1, y2);
        let alt: Vec<Prompt> = prompts
            .iter()
            .map(|_| vocab.encode("painting of ring by viridian").unwrap())
            .collect();
        let y3 = run(&alt);
        let diff: f64 = (&y1 - &y3).iter().map(|d| d.abs()).sum();
        assert!(diff > 1e-9, "conditioning must influence the prediction");
    }

    #[test]
    fn zero_b_adapter_matches_base_bit_exactly() {
        let (vocab, w) = lively_base(4);
        let composed = ComposedModel::from_base(Arc::clone(&w));
        let plugin = init_plugin::<f64>(
            w.arch(),
            4,
            "umbra",
            &w.content_hash(),
            CreationKind::Addition,
            5,
        )
        .unwrap();
        let plain = Denoiser::from_composed(&composed).unwrap();
        let adapted = Denoiser::with_explicit_adapter(&composed, &plugin, 1).unwrap();
        let (x, ts, prompts) = batch(&vocab, 2, 6);
        let run = |d: &Denoiser<f64>| {
            let mut g = Graph::new();
            let out = d.forward(&mut g, x.clone(), &ts, &prompts, ForwardOpts::default()).unwrap();
            g.value(out.eps).clone()
        };
        assert_eq!(run(&plain), run(&adapted));
    }

    #[test]
    fn explicit_adapter_matches_folded_weights() {
        let (vocab, w) = lively_base(7);
        let composed = ComposedModel::from_base(Arc::clone(&w));
        let mut plugin = init_plugin::<f64>(
            w.arch(),
            3,
            "umbra",
            &w.content_hash(),
            CreationKind::Addition,
            8,
        )
        .unwrap();
        for (i, layer) in plugin.layers.values_mut().enumerate() {
            let mut rng = derive_rng(8, "fill-b", i as u64);
            let shape = layer.b.shape().to_vec();
            let mut b = randn::<f64, _>(&mut rng, &shape);
            b.mapv_inplace(|v| v * 0.02);
            layer.b = Arc::new(b);
        }
        let plugin = Arc::new(plugin);
        let (x, ts, prompts) = batch(&vocab, 2, 9);
        for sign in [1i8, -1] {
            let explicit = Denoiser::with_explicit_adapter(&composed, &plugin, sign).unwrap();
            let folded =
                Denoiser::from_composed(&composed.attach(Arc::clone(&plugin), sign).unwrap())
                    .unwrap();
            let run = |d: &Denoiser<f64>| {
                let mut g = Graph::new();
                let out =
                    d.forward(&mut g, x.clone(), &ts, &prompts, ForwardOpts::default()).unwrap();
                g.value(out.eps).clone()
            };
            let (ye, yf) = (run(&explicit), run(&folded));
            let max: f64 =
                (&ye - &yf).iter().map(|d| d.abs()).fold(0.0, f64::max);
            assert!(max < 1e-10, "sign {sign}: explicit vs folded max diff {max}");
        }
    }

    #[test]
    fn captures_record_branch_inputs_and_outputs() {
        let (vocab, w) = lively_base(10);
        let composed = ComposedModel::from_base(Arc::clone(&w));
        let mut plugin = init_plugin::<f64>(
            w.arch(),
            2,
            "umbra",
            &w.content_hash(),
            CreationKind::Addition,
            11,
        )
        .unwrap();
        for (i, layer) in plugin.layers.values_mut().enumerate() {
            let mut rng = derive_rng(11, "fill-b", i as u64);
            let shape = layer.b.shape().to_vec();
            layer.b = Arc::new(randn::<f64, _>(&mut rng, &shape));
        }
        let den = Denoiser::with_explicit_adapter(&composed, &plugin, -1).unwrap();
        let (x, ts, prompts) = batch(&vocab, 2, 12);
        let mut g = Graph::new();
        let out = den
            .forward(
                &mut g,
                x,
                &ts,
                &prompts,
                ForwardOpts { capture: true, ..Default::default() },
            )
            .unwrap();
        assert_eq!(out.captures.len(), w.arch().attention_layer_ids().len());
        // Recompute each branch output from its captured input.
        let scale = plugin.scale();
        for cap in &out.captures {
            let layer = plugin.layers.get(&cap.layer_id).unwrap();
            let i2 = cap
                .input
                .view()
                .into_shape_with_order((
                    cap.input.shape()[0] * cap.input.shape()[1],
                    cap.input.shape()[2],
                ))
                .unwrap();
            let a = layer.a.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            let bm = layer.b.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            let expect = i2.dot(&a.t()).dot(&bm.t()) * (-1.0 * scale);
            let got = cap
                .branch_out
                .view()
                .into_shape_with_order(expect.dim())
                .unwrap();
            let max = (&got - &expect).iter().map(|d| d.abs()).fold(0.0, f64::max);
            assert!(max < 1e-12, "{}: {max}", cap.layer_id);
        }
    }

    #[test]
    fn adapter_training_exposes_adapter_grads_only() {
        let (vocab, w) = lively_base(13);
        let composed = ComposedModel::from_base(Arc::clone(&w));
        let plugin = init_plugin::<f64>(
            w.arch(),
            2,
            "umbra",
            &w.content_hash(),
            CreationKind::Addition,
            14,
        )
        .unwrap();
        let den = Denoiser::with_explicit_adapter(&composed, &plugin, 1).unwrap();
        let (x, ts, prompts) = batch(&vocab, 2, 15);
        let mut g = Graph::new();
        let out = den
            .forward(
                &mut g,
                x.clone(),
                &ts,
                &prompts,
                ForwardOpts { train_adapter: true, ..Default::default() },
            )
            .unwrap();
        let n_layers = w.arch().attention_layer_ids().len();
        assert_eq!(out.params.len(), 2 * n_layers);
        let target = ArrayD::<f64>::zeros(ndarray::IxDyn(&[2, 3, 32, 32]));
        let loss = g.mse(out.eps, &target);
        let mut grads = g.backward(loss);
        // Every B gets a gradient (A's flow through B = 0 yields zero-valued
        // but present gradients).
        for (name, var) in &out.params {
            let gr = grads.take(*var).unwrap_or_else(|| panic!("missing grad for {name}"));
            if name.ends_with(".b") {
                assert!(gr.iter().any(|v| *v != 0.0), "B grad all-zero for {name}");
            }
        }
    }

    #[test]
    fn dense_training_exposes_every_tensor() {
        let (vocab, w) = lively_base(16);
        let den = Denoiser::from_weights(&w);
        let (x, ts, prompts) = batch(&vocab, 2, 17);
        let mut g = Graph::new();
        let out = den
            .forward(
                &mut g,
                x,
                &ts,
                &prompts,
                ForwardOpts { train_dense: true, ..Default::default() },
            )
            .unwrap();
        assert_eq!(out.params.len(), w.tensors().len());
        let target = ArrayD::<f64>::zeros(ndarray::IxDyn(&[2, 3, 32, 32]));
        let loss = g.mse(out.eps, &target);
        let mut grads = g.backward(loss);
        let head = grads.take(out.params["head.conv.b"]).unwrap();
        assert!(head.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn rejects_bad_shapes_and_foreign_vocab() {
        let (vocab, w) = setup();
        let den = Denoiser::from_weights(&w);
        let (x, ts, prompts) = batch(&vocab, 2, 18);
        let mut g = Graph::new();
        let bad = ArrayD::<f64>::zeros(ndarray::IxDyn(&[2, 3, 16, 16]));
        assert!(matches!(
            den.forward(&mut g, bad, &ts, &prompts, ForwardOpts::default()),
            Err(CoreError::ShapeMismatch { .. })
        ));
        let mut foreign = prompts.clone();
        foreign[0].vocab_hash = "deadbeef".into();
        assert!(matches!(
            den.forward(&mut g, x.clone(), &ts, &foreign, ForwardOpts::default()),
            Err(CoreError::VocabMismatch { .. })
        ));
        assert!(matches!(
            den.forward(&mut g, x, &ts[..1], &prompts, ForwardOpts::default()),
            Err(CoreError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn time_embedding_matches_direct_formula() {
        let emb = sinusoidal_time_embedding::<f64>(&[1, 25], 8);
        assert_eq!(emb.shape(), &[2, 8]);
        // k = 0 -> freq 1; last k -> freq 1e-4.
        assert!((emb[[0, 0]] - 1f64.sin()).abs() < 1e-12);
        assert!((emb[[0, 4]] - 1f64.cos()).abs() < 1e-12);
        let f3 = (-(10000f64).ln() * (3.0 / 3.0)).exp();
        assert!((f3 - 1e-4).abs() < 1e-12);
        assert!((emb[[1, 3]] - (25.0 * f3).sin()).abs() < 1e-12);
        // Distinct timesteps embed differently.
        let d: f64 = (0..8).map(|j| (emb[[0, j]] - emb[[1, j]]).abs()).sum();
        assert!(d > 1e-6);
    }
}

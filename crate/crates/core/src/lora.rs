//! Low-rank adapter plug-ins and symbolic model composition.
//!
//! A plug-in stores, per attention projection, a pair `(A [r, in], B [out, r])`
//! whose scaled product `scale * B·A` is the weight delta. Plug-ins attach to
//! a base model with a sign (+1 grants the concept, -1 removes it), and
//! attaching the same plug-in with opposite signs cancels symbolically, so
//! restoration is bit-exact by construction.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use ndarray::{ArrayD, Ix2};
use serde::{Deserialize, Serialize};

use atelier_engine::{randn, Real};

use crate::error::{CoreError, Result};
use crate::util::{derive_rng, sha256_hex};
use crate::weights::{read_archive, write_archive, ArchConfig, ModelWeights};

/// How a plug-in came to exist.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CreationKind {
    /// Trained on concept data on top of a fixed base.
    Addition,
    /// Reverse-extracted from a model that already contained the concept.
    Extraction,
    /// Distilled from several plug-ins.
    Merge { mode: String, parents: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PluginMeta {
    /// Concept token this plug-in grants/removes.
    pub concept: String,
    /// Content hash of the (possibly composed) model it was built against.
    pub base_model_hash: String,
    pub rank: usize,
    /// Branch scale numerator; effective scale is `alpha / rank`.
    pub alpha: f64,
    pub creation: CreationKind,
}

/// One adapted projection: `a` is `[rank, in]`, `b` is `[out, rank]`.
#[derive(Debug, Clone)]
pub struct LoraLayer<T: Real> {
    pub a: Arc<ArrayD<T>>,
    pub b: Arc<ArrayD<T>>,
}

#[derive(Debug, Clone)]
pub struct LoraPlugin<T: Real> {
    pub meta: PluginMeta,
    pub layers: BTreeMap<String, LoraLayer<T>>,
}

impl<T: Real> LoraPlugin<T> {
    /// Effective branch scale `alpha / rank`.
    pub fn scale(&self) -> f64 {
        self.meta.alpha / self.meta.rank as f64
    }

    /// The dense weight delta `scale * B·A` for one layer, `[out, in]`.
    pub fn delta(&self, layer_id: &str) -> Result<ArrayD<T>> {
        let layer = self
            .layers
            .get(layer_id)
            .ok_or_else(|| CoreError::UnknownLayer(layer_id.to_string()))?;
        let a = layer.a.view().into_dimensionality::<Ix2>().unwrap();
        let b = layer.b.view().into_dimensionality::<Ix2>().unwrap();
        let mut d = b.dot(&a);
        let s = T::from_f64(self.scale());
        d.mapv_inplace(|v| v * s);
        Ok(d.into_dyn())
    }

    /// Plug-in with the delta negated on every layer (B -> -B).
    /// `negate(negate(p))` equals `p` exactly.
    pub fn negate(&self) -> Self {
        let layers = self
            .layers
            .iter()
            .map(|(k, l)| {
                (
                    k.clone(),
                    LoraLayer { a: Arc::clone(&l.a), b: Arc::new(l.b.mapv(|v| -v)) },
                )
            })
            .collect();
        LoraPlugin { meta: self.meta.clone(), layers }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = BTreeMap::new();
        for (id, layer) in &self.layers {
            tensors.insert(format!("{id}.a"), Arc::clone(&layer.a));
            tensors.insert(format!("{id}.b"), Arc::clone(&layer.b));
        }
        write_archive("plugin", &self.meta, &tensors)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (meta_val, tensors) = read_archive::<T>(bytes, "plugin")?;
        let meta: PluginMeta = serde_json::from_value(meta_val)?;
        if meta.rank == 0 {
            return Err(CoreError::InvalidHyperparameter("plugin rank must be positive".into()));
        }
        let mut layers: BTreeMap<String, LoraLayer<T>> = BTreeMap::new();
        let mut halves: BTreeMap<String, (Option<Arc<ArrayD<T>>>, Option<Arc<ArrayD<T>>>)> =
            BTreeMap::new();
        for (name, tensor) in tensors {
            let (id, is_a) = match name.rsplit_once('.') {
                Some((id, "a")) => (id.to_string(), true),
                Some((id, "b")) => (id.to_string(), false),
                _ => return Err(CoreError::Archive(format!("unexpected tensor `{name}`"))),
            };
            let slot = halves.entry(id).or_default();
            if is_a {
                slot.0 = Some(tensor);
            } else {
                slot.1 = Some(tensor);
            }
        }
        for (id, (a, b)) in halves {
            let (a, b) = match (a, b) {
                (Some(a), Some(b)) => (a, b),
                _ => return Err(CoreError::Archive(format!("layer `{id}` missing a/b half"))),
            };
            if a.ndim() != 2 || b.ndim() != 2 || a.shape()[0] != meta.rank || b.shape()[1] != meta.rank
            {
                return Err(CoreError::AdapterShape {
                    layer: id,
                    detail: format!(
                        "a {:?} / b {:?} inconsistent with rank {}",
                        a.shape(),
                        b.shape(),
                        meta.rank
                    ),
                });
            }
            layers.insert(id, LoraLayer { a, b });
        }
        if layers.is_empty() {
            return Err(CoreError::Archive("plugin has no layers".into()));
        }
        Ok(LoraPlugin { meta, layers })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Content hash of the canonical archive bytes: the plug-in's identity.
    pub fn plugin_id(&self) -> Result<String> {
        Ok(sha256_hex(&self.to_bytes()?))
    }

    /// Checks layer ids and shapes against an architecture.
    pub fn check_against_arch(&self, arch: &ArchConfig) -> Result<()> {
        for (id, layer) in &self.layers {
            let (out_dim, in_dim) = arch.lora_dims(id)?;
            let a_shape = layer.a.shape();
            let b_shape = layer.b.shape();
            if a_shape != [self.meta.rank, in_dim] || b_shape != [out_dim, self.meta.rank] {
                return Err(CoreError::AdapterShape {
                    layer: id.clone(),
                    detail: format!(
                        "a {:?} (want [{}, {in_dim}]) / b {:?} (want [{out_dim}, {}])",
                        a_shape, self.meta.rank, b_shape, self.meta.rank
                    ),
                });
            }
        }
        Ok(())
    }
}

/// Fresh adapter on every attention projection: A ~ N(0, 1/in_dim), B = 0,
/// so a new plug-in is an exact no-op until trained.
pub fn init_plugin<T: Real>(
    arch: &ArchConfig,
    rank: usize,
    concept: &str,
    base_model_hash: &str,
    creation: CreationKind,
    seed: u64,
) -> Result<LoraPlugin<T>> {
    if rank == 0 {
        return Err(CoreError::InvalidHyperparameter("rank must be positive".into()));
    }
    let mut layers = BTreeMap::new();
    for id in arch.attention_layer_ids() {
        let (out_dim, in_dim) = arch.lora_dims(&id)?;
        let mut rng = derive_rng(seed, &format!("lora-init:{id}"), 0);
        let mut a = randn::<T, _>(&mut rng, &[rank, in_dim]);
        let std = T::from_f64((1.0 / in_dim as f64).sqrt());
        a.mapv_inplace(|v| v * std);
        let b = ArrayD::<T>::zeros(ndarray::IxDyn(&[out_dim, rank]));
        layers.insert(id, LoraLayer { a: Arc::new(a), b: Arc::new(b) });
    }
    Ok(LoraPlugin {
        meta: PluginMeta {
            concept: concept.to_string(),
            base_model_hash: base_model_hash.to_string(),
            rank,
            alpha: rank as f64,
            creation,
        },
        layers,
    })
}

// ---------------------------------------------------------------------------
// Composition
// ---------------------------------------------------------------------------

/// A base model plus signed plug-in attachments, represented symbolically.
/// No weights are merged until a forward pass needs them, so attach/detach
/// round-trips are exact.
#[derive(Debug, Clone)]
pub struct ComposedModel<T: Real> {
    pub base: Arc<ModelWeights<T>>,
    pub attachments: Vec<(Arc<LoraPlugin<T>>, i8)>,
}

impl<T: Real> ComposedModel<T> {
    pub fn from_base(base: Arc<ModelWeights<T>>) -> Self {
        ComposedModel { base, attachments: Vec::new() }
    }

    /// Identity of the composition: the base hash when nothing is attached,
    /// otherwise a chain hash over base and ordered signed attachments.
    pub fn effective_hash(&self) -> String {
        if self.attachments.is_empty() {
            return self.base.content_hash();
        }
        let mut acc = format!("compose:{}", self.base.content_hash());
        for (p, sign) in &self.attachments {
            acc.push(':');
            acc.push_str(&p.plugin_id().expect("serialize plugin"));
            acc.push(if *sign >= 0 { '+' } else { '-' });
        }
        sha256_hex(acc.as_bytes())
    }

    /// Attaches a plug-in with a sign. If the same plug-in is already
    /// attached with the opposite sign, the pair cancels symbolically and
    /// the result is exactly the previous composition.
    ///
    /// The plug-in must have been built against this composition (its
    /// recorded hash matches `effective_hash()`) or against the same
    /// underlying base model.
    pub fn attach(&self, plugin: Arc<LoraPlugin<T>>, sign: i8) -> Result<Self> {
        if sign != 1 && sign != -1 {
            return Err(CoreError::InvalidHyperparameter(format!(
                "attachment sign must be +1 or -1, got {sign}"
            )));
        }
        let eff = self.effective_hash();
        let base_hash = self.base.content_hash();
        if plugin.meta.base_model_hash != eff && plugin.meta.base_model_hash != base_hash {
            return Err(CoreError::BaseHashMismatch {
                expected: plugin.meta.base_model_hash.clone(),
                actual: eff,
            });
        }
        plugin.check_against_arch(self.base.arch())?;
        let mut out = self.clone();
        let pid = plugin.plugin_id()?;
        // Symbolic cancellation against an existing opposite-signed copy.
        if let Some(pos) = out
            .attachments
            .iter()
            .position(|(p, s)| *s == -sign && p.plugin_id().ok().as_deref() == Some(pid.as_str()))
        {
            out.attachments.remove(pos);
        } else {
            out.attachments.push((plugin, sign));
        }
        Ok(out)
    }

    /// Folds base weights plus all attachment deltas into a concrete tensor
    /// map (only adapted projections are copied; everything else is shared).
    pub fn fold_tensors(&self) -> Result<BTreeMap<String, Arc<ArrayD<T>>>> {
        let mut tensors = self.base.tensors().clone();
        for (plugin, sign) in &self.attachments {
            let sgn = T::from_f64(*sign as f64);
            for layer_id in plugin.layers.keys() {
                let wname = format!("{layer_id}.w");
                let cur = tensors
                    .get(&wname)
                    .ok_or_else(|| CoreError::UnknownLayer(layer_id.clone()))?;
                let delta = plugin.delta(layer_id)?;
                if cur.shape() != delta.shape() {
                    return Err(CoreError::AdapterShape {
                        layer: layer_id.clone(),
                        detail: format!("delta {:?} vs weight {:?}", delta.shape(), cur.shape()),
                    });
                }
                let mut new = cur.as_ref().clone();
                ndarray::Zip::from(&mut new).and(&delta).for_each(|w, &d| *w += sgn * d);
                tensors.insert(wname, Arc::new(new));
            }
        }
        Ok(tensors)
    }
}

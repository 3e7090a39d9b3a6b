//! Bidirectional transformer encoder with a sequence-classification head,
//! written against candle tensors so that initialization, dropout and layer
//! normalization are all differentiable and seeded.
//!
//! Parameter names follow the Hugging Face layout of each family, so a
//! compatible `model.safetensors` can be loaded over a fresh model.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Module, Tensor, Var, D};
use candle_nn::{Embedding, Linear};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tokenizer::ModelFamily;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("unknown checkpoint {0:?}")]
    UnknownCheckpoint(String),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("checkpoint does not match the model: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Candle(#[from] candle_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// How token states are reduced to one vector for the head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    /// State of the first (start) token.
    Cls,
    /// Mean of non-padding token states.
    #[default]
    Mean,
}

impl std::str::FromStr for Pooling {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "cls" => Ok(Pooling::Cls),
            "mean" => Ok(Pooling::Mean),
            other => Err(format!("unknown pooling {other:?} (expected cls or mean)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub family: ModelFamily,
    pub vocab_size: usize,
    pub hidden_size: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub intermediate_size: usize,
    pub max_position_embeddings: usize,
    pub num_labels: usize,
    pub dropout: f32,
    pub layer_norm_eps: f64,
    pub initializer_range: f64,
    pub pad_token_id: u32,
    pub pooling: Pooling,
}

/// Named encoder sizes: `(name, family, layers, hidden, heads, intermediate)`.
pub const PRESETS: [(&str, ModelFamily, usize, usize, usize, usize); 8] = [
    ("bert-tiny-uncased", ModelFamily::Bert, 2, 128, 2, 512),
    ("bert-mini-uncased", ModelFamily::Bert, 4, 256, 4, 1024),
    ("bert-small-uncased", ModelFamily::Bert, 4, 512, 8, 2048),
    ("bert-base-uncased", ModelFamily::Bert, 12, 768, 12, 3072),
    ("distilbert-tiny-uncased", ModelFamily::DistilBert, 2, 128, 2, 512),
    ("distilbert-base-uncased", ModelFamily::DistilBert, 6, 768, 12, 3072),
    ("roberta-tiny", ModelFamily::Roberta, 2, 128, 2, 512),
    ("roberta-base", ModelFamily::Roberta, 12, 768, 12, 3072),
];

/// Smallest preset that fine-tunes reliably from random initialisation at
/// the default learning rate. The 128-wide presets are for smoke tests.
pub const SMALLEST_CHECKPOINT: &str = "bert-mini-uncased";

impl EncoderConfig {
    pub fn preset(name: &str, vocab_size: usize, max_len: usize, pad_token_id: u32) -> Result<Self, ModelError> {
        let (_, family, layers, hidden, heads, inter) = PRESETS
            .iter()
            .find(|p| p.0 == name)
            .copied()
            .ok_or_else(|| ModelError::UnknownCheckpoint(name.to_string()))?;
        let max_position_embeddings = match family {
            // RoBERTa positions start after the padding index.
            ModelFamily::Roberta => max_len + pad_token_id as usize + 1,
            _ => max_len,
        };
        let cfg = EncoderConfig {
            family,
            vocab_size,
            hidden_size: hidden,
            num_layers: layers,
            num_heads: heads,
            intermediate_size: inter,
            max_position_embeddings,
            num_labels: 6,
            dropout: 0.1,
            layer_norm_eps: 1e-12,
            initializer_range: 0.02,
            pad_token_id,
            pooling: Pooling::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.hidden_size == 0 || self.num_layers == 0 || self.num_heads == 0 {
            return fail("sizes must be positive");
        }
        if self.hidden_size % self.num_heads != 0 {
            return fail("hidden_size must be divisible by num_heads");
        }
        if self.num_labels < 2 {
            return fail("need at least two labels");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout must be in [0, 1)");
        }
        Ok(())
    }

    fn prefix(&self) -> &'static str {
        match self.family {
            ModelFamily::Bert => "bert",
            ModelFamily::DistilBert => "distilbert",
            ModelFamily::Roberta => "roberta",
        }
    }
}

/// Seeded parameter store keyed by name.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    device: Device,
}

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
    std: f64,
}

impl Init<'_> {
    fn normal(&mut self, name: &str, shape: (usize, usize)) -> candle_core::Result<Tensor> {
        let dist = Normal::new(0.0f32, self.std as f32).expect("positive std");
        let data: Vec<f32> = (0..shape.0 * shape.1).map(|_| dist.sample(&mut self.rng)).collect();
        self.store.insert(name, Tensor::from_vec(data, shape, &self.store.device)?)
    }

    fn constant(&mut self, name: &str, n: usize, value: f32) -> candle_core::Result<Tensor> {
        self.store.insert(name, Tensor::full(value, n, &self.store.device)?)
    }

    fn linear(&mut self, name: &str, out_dim: usize, in_dim: usize) -> candle_core::Result<Linear> {
        let w = self.normal(&format!("{name}.weight"), (out_dim, in_dim))?;
        let b = self.constant(&format!("{name}.bias"), out_dim, 0.0)?;
        Ok(Linear::new(w, Some(b)))
    }

    fn layer_norm(&mut self, name: &str, dim: usize, eps: f64) -> candle_core::Result<LayerNorm> {
        Ok(LayerNorm {
            weight: self.constant(&format!("{name}.weight"), dim, 1.0)?,
            bias: self.constant(&format!("{name}.bias"), dim, 0.0)?,
            eps,
        })
    }

    fn embedding(&mut self, name: &str, n: usize, dim: usize) -> candle_core::Result<Embedding> {
        Ok(Embedding::new(self.normal(&format!("{name}.weight"), (n, dim))?, dim))
    }
}

impl ParamStore {
    fn new(device: &Device) -> Self {
        ParamStore {
            vars: BTreeMap::new(),
            device: device.clone(),
        }
    }

    fn insert(&mut self, name: &str, value: Tensor) -> candle_core::Result<Tensor> {
        let var = Var::from_tensor(&value)?;
        let t = var.as_tensor().clone();
        assert!(self.vars.insert(name.to_string(), var).is_none(), "duplicate parameter {name}");
        Ok(t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn vars(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_parameters(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Copies of all current values.
    pub fn snapshot(&self) -> candle_core::Result<BTreeMap<String, Tensor>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?)))
            .collect()
    }

    pub fn restore(&self, snapshot: &BTreeMap<String, Tensor>) -> candle_core::Result<()> {
        for (k, v) in &self.vars {
            if let Some(t) = snapshot.get(k) {
                v.set(t)?;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        let map: HashMap<String, Tensor> = self
            .vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect();
        candle_core::safetensors::save(&map, path)?;
        Ok(())
    }

    /// Overwrites parameters found in a safetensors file; returns how many
    /// were loaded. Missing names keep their current values.
    pub fn load_partial(&self, path: impl AsRef<Path>) -> Result<usize, ModelError> {
        let loaded = candle_core::safetensors::load(path, &self.device)?;
        let mut n = 0;
        for (name, var) in &self.vars {
            let alias = name.replace("LayerNorm.weight", "LayerNorm.gamma").replace("LayerNorm.bias", "LayerNorm.beta");
            let Some(t) = loaded.get(name).or_else(|| loaded.get(&alias)) else {
                continue;
            };
            if t.dims() != var.dims() {
                return Err(ModelError::Mismatch(format!(
                    "{name}: checkpoint {:?} vs model {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(DType::F32)?)?;
            n += 1;
        }
        Ok(n)
    }
}

struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let xn = xc.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        xn.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)
    }
}

/// Seeded inverted dropout; `None` disables it (evaluation).
pub struct DropoutRng {
    rng: ChaCha8Rng,
    p: f32,
}

impl DropoutRng {
    pub fn new(seed: u64, p: f32) -> Self {
        DropoutRng {
            rng: ChaCha8Rng::seed_from_u64(seed),
            p,
        }
    }

    fn apply(&mut self, x: &Tensor) -> candle_core::Result<Tensor> {
        if self.p <= 0.0 {
            return Ok(x.clone());
        }
        let keep = 1.0 - self.p;
        let scale = 1.0 / keep;
        let mask: Vec<f32> = (0..x.elem_count())
            .map(|_| if self.rng.random::<f32>() < keep { scale } else { 0.0 })
            .collect();
        x.mul(&Tensor::from_vec(mask, x.shape(), x.device())?)
    }
}

fn dropout(x: &Tensor, rng: &mut Option<&mut DropoutRng>) -> candle_core::Result<Tensor> {
    match rng {
        Some(r) => r.apply(x),
        None => Ok(x.clone()),
    }
}

fn softmax_last(x: &Tensor) -> candle_core::Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    e.broadcast_div(&e.sum_keepdim(D::Minus1)?)
}

struct Layer {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    attn_norm: LayerNorm,
    ffn_in: Linear,
    ffn_out: Linear,
    out_norm: LayerNorm,
}

struct Head {
    dense: Linear,
    out: Linear,
    /// tanh for BERT/RoBERTa heads, relu for DistilBERT.
    tanh: bool,
}

pub struct EncoderClassifier {
    config: EncoderConfig,
    params: ParamStore,
    word: Embedding,
    position: Embedding,
    token_type: Option<Embedding>,
    emb_norm: LayerNorm,
    layers: Vec<Layer>,
    head: Head,
}

impl EncoderClassifier {
    /// Fresh model with weights drawn from N(0, initializer_range) under `seed`,
    /// biases 0 and layer-norm scales 1.
    pub fn new(config: EncoderConfig, seed: u64, device: &Device) -> Result<Self, ModelError> {
        config.validate()?;
        let mut store = ParamStore::new(device);
        let mut init = Init {
            store: &mut store,
            rng: ChaCha8Rng::seed_from_u64(seed),
            std: config.initializer_range,
        };
        let c = &config;
        let p = c.prefix();
        let h = c.hidden_size;
        let eps = c.layer_norm_eps;
        let word = init.embedding(&format!("{p}.embeddings.word_embeddings"), c.vocab_size, h)?;
        let position = init.embedding(&format!("{p}.embeddings.position_embeddings"), c.max_position_embeddings, h)?;
        let token_type = match c.family {
            ModelFamily::DistilBert => None,
            ModelFamily::Bert => Some(init.embedding(&format!("{p}.embeddings.token_type_embeddings"), 2, h)?),
            ModelFamily::Roberta => Some(init.embedding(&format!("{p}.embeddings.token_type_embeddings"), 1, h)?),
        };
        let emb_norm = init.layer_norm(&format!("{p}.embeddings.LayerNorm"), h, eps)?;
        let mut layers = Vec::with_capacity(c.num_layers);
        for i in 0..c.num_layers {
            let layer = match c.family {
                ModelFamily::DistilBert => {
                    let l = format!("{p}.transformer.layer.{i}");
                    Layer {
                        q: init.linear(&format!("{l}.attention.q_lin"), h, h)?,
                        k: init.linear(&format!("{l}.attention.k_lin"), h, h)?,
                        v: init.linear(&format!("{l}.attention.v_lin"), h, h)?,
                        o: init.linear(&format!("{l}.attention.out_lin"), h, h)?,
                        attn_norm: init.layer_norm(&format!("{l}.sa_layer_norm"), h, eps)?,
                        ffn_in: init.linear(&format!("{l}.ffn.lin1"), c.intermediate_size, h)?,
                        ffn_out: init.linear(&format!("{l}.ffn.lin2"), h, c.intermediate_size)?,
                        out_norm: init.layer_norm(&format!("{l}.output_layer_norm"), h, eps)?,
                    }
                }
                _ => {
                    let l = format!("{p}.encoder.layer.{i}");
                    Layer {
                        q: init.linear(&format!("{l}.attention.self.query"), h, h)?,
                        k: init.linear(&format!("{l}.attention.self.key"), h, h)?,
                        v: init.linear(&format!("{l}.attention.self.value"), h, h)?,
                        o: init.linear(&format!("{l}.attention.output.dense"), h, h)?,
                        attn_norm: init.layer_norm(&format!("{l}.attention.output.LayerNorm"), h, eps)?,
                        ffn_in: init.linear(&format!("{l}.intermediate.dense"), c.intermediate_size, h)?,
                        ffn_out: init.linear(&format!("{l}.output.dense"), h, c.intermediate_size)?,
                        out_norm: init.layer_norm(&format!("{l}.output.LayerNorm"), h, eps)?,
                    }
                }
            };
            layers.push(layer);
        }
        let head = match c.family {
            ModelFamily::Bert => Head {
                dense: init.linear("bert.pooler.dense", h, h)?,
                out: init.linear("classifier", c.num_labels, h)?,
                tanh: true,
            },
            ModelFamily::DistilBert => Head {
                dense: init.linear("pre_classifier", h, h)?,
                out: init.linear("classifier", c.num_labels, h)?,
                tanh: false,
            },
            ModelFamily::Roberta => Head {
                dense: init.linear("classifier.dense", h, h)?,
                out: init.linear("classifier.out_proj", c.num_labels, h)?,
                tanh: true,
            },
        };
        Ok(EncoderClassifier {
            config,
            params: store,
            word,
            position,
            token_type,
            emb_norm,
            layers,
            head,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn device(&self) -> &Device {
        &self.params.device
    }

    /// Logits `[batch, num_labels]` for `[batch, len]` ids and 0/1 mask.
    /// Passing a dropout generator switches to training behaviour.
    pub fn forward(
        &self,
        input_ids: &Tensor,
        attention_mask: &Tensor,
        mut dropout_rng: Option<&mut DropoutRng>,
    ) -> candle_core::Result<Tensor> {
        let (b, len) = input_ids.dims2()?;
        let c = &self.config;
        let h = c.hidden_size;
        let heads = c.num_heads;
        let dh = h / heads;
        let device = input_ids.device();
        let offset = match c.family {
            ModelFamily::Roberta => c.pad_token_id + 1,
            _ => 0,
        };
        if len + offset as usize > c.max_position_embeddings {
            candle_core::bail!(
                "sequence length {len} exceeds {} positions",
                c.max_position_embeddings
            );
        }
        let positions = Tensor::arange(offset, offset + len as u32, device)?;
        let mut x = self
            .word
            .forward(input_ids)?
            .broadcast_add(&self.position.forward(&positions)?)?;
        if let Some(tt) = &self.token_type {
            let zero = Tensor::zeros(1, DType::U32, device)?;
            x = x.broadcast_add(&tt.forward(&zero)?)?;
        }
        let mut x = dropout(&self.emb_norm.forward(&x)?, &mut dropout_rng)?;
        let maskf = attention_mask.to_dtype(DType::F32)?;
        let bias = ((maskf.ones_like()? - &maskf)? * -1e4)?.reshape((b, 1, 1, len))?;
        let scale = 1.0 / (dh as f64).sqrt();
        for layer in &self.layers {
            let split = |t: Tensor| -> candle_core::Result<Tensor> {
                t.reshape((b, len, heads, dh))?.transpose(1, 2)?.contiguous()
            };
            let q = split(layer.q.forward(&x)?)?;
            let k = split(layer.k.forward(&x)?)?;
            let v = split(layer.v.forward(&x)?)?;
            let scores = (q.matmul(&k.t()?.contiguous()?)? * scale)?.broadcast_add(&bias)?;
            let probs = dropout(&softmax_last(&scores)?, &mut dropout_rng)?;
            let ctx = probs
                .matmul(&v)?
                .transpose(1, 2)?
                .contiguous()?
                .reshape((b, len, h))?;
            let attn = dropout(&layer.o.forward(&ctx)?, &mut dropout_rng)?;
            let x1 = layer.attn_norm.forward(&(attn + &x)?)?;
            let ff = layer.ffn_out.forward(&layer.ffn_in.forward(&x1)?.gelu_erf()?)?;
            let ff = dropout(&ff, &mut dropout_rng)?;
            x = layer.out_norm.forward(&(ff + x1)?)?;
        }
        let pooled = match c.pooling {
            Pooling::Cls => x.narrow(1, 0, 1)?.squeeze(1)?,
            Pooling::Mean => {
                let m = maskf.unsqueeze(2)?;
                let summed = x.broadcast_mul(&m)?.sum(1)?;
                let count = maskf.sum_keepdim(1)?.clamp(1.0, f64::MAX)?;
                summed.broadcast_div(&count)?
            }
        };
        let pooled = match c.family {
            ModelFamily::Roberta => dropout(&pooled, &mut dropout_rng)?,
            _ => pooled,
        };
        let z = self.head.dense.forward(&pooled)?;
        let z = if self.head.tanh { z.tanh()? } else { z.relu()? };
        let z = dropout(&z, &mut dropout_rng)?;
        self.head.out.forward(&z)
    }

    /// Softmax probabilities, evaluation mode.
    pub fn probabilities(&self, input_ids: &Tensor, attention_mask: &Tensor) -> candle_core::Result<Vec<Vec<f32>>> {
        let logits = self.forward(input_ids, attention_mask, None)?;
        softmax_last(&logits)?.to_vec2::<f32>()
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), ModelError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        self.params.save(dir.join("model.safetensors"))?;
        std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(&self.config)?)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>, device: &Device) -> Result<Self, ModelError> {
        let dir = dir.as_ref();
        let config: EncoderConfig = serde_json::from_str(&std::fs::read_to_string(dir.join("config.json"))?)?;
        let model = Self::new(config, 0, device)?;
        let total = model.params.vars.len();
        let n = model.params.load_partial(dir.join("model.safetensors"))?;
        if n != total {
            return Err(ModelError::Mismatch(format!("loaded {n} of {total} parameters")));
        }
        Ok(model)
    }
}

/// Builds `[batch, len]` id and mask tensors.
pub fn batch_tensors<'a, I>(rows: I, device: &Device) -> candle_core::Result<(Tensor, Tensor)>
where
    I: IntoIterator<Item = (&'a [u32], &'a [u32])>,
{
    let mut ids = Vec::new();
    let mut mask = Vec::new();
    let mut b = 0;
    let mut len = 0;
    for (i, m) in rows {
        len = i.len();
        ids.extend_from_slice(i);
        mask.extend_from_slice(m);
        b += 1;
    }
    Ok((
        Tensor::from_vec(ids, (b, len), device)?,
        Tensor::from_vec(mask, (b, len), device)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(family: ModelFamily, pooling: Pooling) -> EncoderClassifier {
        let name = match family {
            ModelFamily::Bert => "bert-tiny-uncased",
            ModelFamily::DistilBert => "distilbert-tiny-uncased",
            ModelFamily::Roberta => "roberta-tiny",
        };
        let mut cfg = EncoderConfig::preset(name, 50, 12, if family == ModelFamily::Roberta { 1 } else { 0 }).unwrap();
        cfg.pooling = pooling;
        EncoderClassifier::new(cfg, 7, &Device::Cpu).unwrap()
    }

    fn batch() -> (Tensor, Tensor) {
        let ids: Vec<u32> = vec![2, 10, 11, 12, 3, 0, 0, 0, 0, 0, 0, 0, 2, 13, 14, 15, 16, 17, 3, 0, 0, 0, 0, 0];
        let mask: Vec<u32> = vec![1, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 1, 1, 0, 0, 0, 0, 0];
        (
            Tensor::from_vec(ids, (2, 12), &Device::Cpu).unwrap(),
            Tensor::from_vec(mask, (2, 12), &Device::Cpu).unwrap(),
        )
    }

    #[test]
    fn shapes_and_probabilities() {
        for family in [ModelFamily::Bert, ModelFamily::DistilBert, ModelFamily::Roberta] {
            for pooling in [Pooling::Cls, Pooling::Mean] {
                let model = tiny(family, pooling);
                let (ids, mask) = batch();
                let probs = model.probabilities(&ids, &mask).unwrap();
                assert_eq!(probs.len(), 2);
                for p in probs {
                    assert_eq!(p.len(), 6);
                    assert!((p.iter().sum::<f32>() - 1.0).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let a = tiny(ModelFamily::Bert, Pooling::Mean);
        let b = tiny(ModelFamily::Bert, Pooling::Mean);
        let (ids, mask) = batch();
        assert_eq!(a.probabilities(&ids, &mask).unwrap(), b.probabilities(&ids, &mask).unwrap());
        assert!(a.params().names().any(|n| n == "bert.encoder.layer.1.attention.self.query.weight"));
    }

    #[test]
    fn padding_content_is_ignored() {
        let model = tiny(ModelFamily::Bert, Pooling::Mean);
        let (ids, mask) = batch();
        let p1 = model.probabilities(&ids, &mask).unwrap();
        let mut raw = ids.flatten_all().unwrap().to_vec1::<u32>().unwrap();
        raw[7] = 40;
        let ids2 = Tensor::from_vec(raw, (2, 12), &Device::Cpu).unwrap();
        let p2 = model.probabilities(&ids2, &mask).unwrap();
        for (a, b) in p1[0].iter().zip(&p2[0]) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn gradients_reach_every_parameter() {
        let model = tiny(ModelFamily::Bert, Pooling::Mean);
        let (ids, mask) = batch();
        let mut rng = DropoutRng::new(1, 0.1);
        let logits = model.forward(&ids, &mask, Some(&mut rng)).unwrap();
        let labels = Tensor::new(&[1u32, 4], &Device::Cpu).unwrap();
        let loss = candle_nn::loss::cross_entropy(&logits, &labels).unwrap();
        let grads = loss.backward().unwrap();
        for (name, var) in model.params().vars() {
            assert!(grads.get(var.as_tensor()).is_some(), "no gradient for {name}");
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let model = tiny(ModelFamily::Roberta, Pooling::Cls);
        model.save(dir.path()).unwrap();
        let back = EncoderClassifier::load(dir.path(), &Device::Cpu).unwrap();
        let (mut ids, mask) = batch();
        ids = (ids + 1.0).unwrap();
        assert_eq!(model.probabilities(&ids, &mask).unwrap(), back.probabilities(&ids, &mask).unwrap());
    }

    #[test]
    fn unknown_preset() {
        assert!(matches!(
            EncoderConfig::preset("gpt2", 10, 16, 0),
            Err(ModelError::UnknownCheckpoint(_))
        ));
    }
}

//! Pre-norm transformer encoder.
//!
//! Parameters live in a shared [`ParamStore`] under a prefix such as
//! `encoder1`, so two encoders with distinct prefixes form separate
//! freezing groups.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{affine, glorot};
use crate::tokenizer::TokenSequence;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub dropout_p: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            num_heads: 4,
            d_model: 64,
            d_ff: 128,
            max_len: 128,
            vocab_size: 8192,
            dropout_p: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_heads", self.num_heads),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("max_len", self.max_len),
            ("vocab_size", self.vocab_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("encoder {name} must be positive")));
            }
        }
        if self.d_model % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!("dropout_p {} outside [0, 1)", self.dropout_p)));
        }
        Ok(())
    }
}

/// Row `t` holds `sin(t / 10000^(2i/d))` at column `2i` and the matching cosine at `2i + 1`.
pub fn sinusoidal_table(max_len: usize, d_model: usize) -> Tensor {
    let mut data = vec![0.0; max_len * d_model];
    for t in 0..max_len {
        for i in 0..d_model {
            let pair = (i / 2) as f64;
            let angle = t as f64 / 10000f64.powf(2.0 * pair / d_model as f64);
            data[t * d_model + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![max_len, d_model], data).expect("finite table")
}

#[derive(Clone, Debug)]
struct Layer {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Debug)]
pub struct EncoderModel {
    pub config: EncoderConfig,
    prefix: String,
    seed: u64,
    word: ParamId,
    segment: ParamId,
    layers: Vec<Layer>,
    lnf_g: ParamId,
    lnf_b: ParamId,
    positions: Tensor,
}

impl EncoderModel {
    /// Registers a freshly initialised encoder under `prefix` in `store`.
    pub fn new<R: Rng + ?Sized>(
        config: EncoderConfig,
        prefix: &str,
        store: &mut ParamStore,
        seed: u64,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut add = |name: &str, t: Tensor| store.add(format!("{prefix}.{name}"), t);
        let word = add("word_emb", Tensor::randn(&[config.vocab_size, d], 0.5, rng))?;
        let segment = add("segment_emb", Tensor::randn(&[2, d], 0.5, rng))?;
        let mut layers = Vec::with_capacity(config.num_layers);
        for l in 0..config.num_layers {
            let mut p = |n: &str, t: Tensor| add(&format!("layer{l}.{n}"), t);
            layers.push(Layer {
                ln1_g: p("ln1_g", Tensor::filled(&[d], 1.0))?,
                ln1_b: p("ln1_b", Tensor::zeros(&[d]))?,
                wq: p("wq", glorot(d, d, rng))?,
                bq: p("bq", Tensor::zeros(&[d]))?,
                wk: p("wk", glorot(d, d, rng))?,
                bk: p("bk", Tensor::zeros(&[d]))?,
                wv: p("wv", glorot(d, d, rng))?,
                bv: p("bv", Tensor::zeros(&[d]))?,
                wo: p("wo", glorot(d, d, rng))?,
                bo: p("bo", Tensor::zeros(&[d]))?,
                ln2_g: p("ln2_g", Tensor::filled(&[d], 1.0))?,
                ln2_b: p("ln2_b", Tensor::zeros(&[d]))?,
                w1: p("w1", glorot(d, config.d_ff, rng))?,
                b1: p("b1", Tensor::zeros(&[config.d_ff]))?,
                w2: p("w2", glorot(config.d_ff, d, rng))?,
                b2: p("b2", Tensor::zeros(&[d]))?,
            });
        }
        let lnf_g = add("lnf_g", Tensor::filled(&[d], 1.0))?;
        let lnf_b = add("lnf_b", Tensor::zeros(&[d]))?;
        Ok(Self {
            positions: sinusoidal_table(config.max_len, d),
            config,
            prefix: prefix.to_string(),
            seed,
            word,
            segment,
            layers,
            lnf_g,
            lnf_b,
        })
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn word_embedding(&self) -> ParamId {
        self.word
    }

    pub fn segment_embedding(&self) -> ParamId {
        self.segment
    }

    pub fn positions(&self) -> &Tensor {
        &self.positions
    }

    /// Word, segment and position embeddings summed per position.
    pub fn embed(&self, tape: &Tape, seq: &TokenSequence) -> Result<Var> {
        self.embed_ids(tape, &seq.ids, &seq.segments)
    }

    pub fn embed_ids(&self, tape: &Tape, ids: &[usize], segments: &[usize]) -> Result<Var> {
        let n = ids.len();
        if n == 0 {
            return Err(Error::Dimension("cannot embed an empty sequence".into()));
        }
        if n > self.config.max_len {
            return Err(Error::Dimension(format!(
                "sequence of {n} tokens exceeds max_len {}",
                self.config.max_len
            )));
        }
        if segments.len() != n {
            return Err(Error::Dimension("ids and segments lengths differ".into()));
        }
        let d = self.config.d_model;
        let words = tape.gather_rows(tape.param(self.word), ids)?;
        let segs = tape.gather_rows(tape.param(self.segment), segments)?;
        let pos = tape.constant(vec![n, d], self.positions.data()[..n * d].to_vec())?;
        let sum = tape.add(words, segs)?;
        tape.add(sum, pos)
    }

    /// Contextual features for every position of `seq`.
    ///
    /// Without `attn_mask`, every position attends to all non-padding positions.
    pub fn encode<R: Rng + ?Sized>(
        &self,
        tape: &Tape,
        seq: &TokenSequence,
        attn_mask: Option<&Tensor>,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let n = seq.len();
        let mask = match attn_mask {
            Some(m) => {
                if m.shape() != [n, n] {
                    return Err(Error::Dimension(format!(
                        "attention mask of shape {:?} for a sequence of {n}",
                        m.shape()
                    )));
                }
                m.data().to_vec()
            }
            None => padding_mask(&seq.mask),
        };
        let x = self.embed(tape, seq)?;
        self.encode_embedded(tape, x, &mask, training, rng)
    }

    /// Runs the layer stack on precomputed embeddings with a flat n×n mask.
    pub fn encode_embedded<R: Rng + ?Sized>(
        &self,
        tape: &Tape,
        mut x: Var,
        mask: &[f64],
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let p = self.config.dropout_p;
        x = tape.dropout(x, p, training, rng)?;
        for layer in &self.layers {
            let h = tape.layer_norm(x, tape.param(layer.ln1_g), tape.param(layer.ln1_b))?;
            let q = affine(tape, h, layer.wq, layer.bq)?;
            let k = affine(tape, h, layer.wk, layer.bk)?;
            let v = affine(tape, h, layer.wv, layer.bv)?;
            let heads = multi_head(tape, q, k, v, mask, self.config.num_heads)?;
            let o = affine(tape, heads, layer.wo, layer.bo)?;
            let o = tape.dropout(o, p, training, rng)?;
            x = tape.add(x, o)?;

            let h = tape.layer_norm(x, tape.param(layer.ln2_g), tape.param(layer.ln2_b))?;
            let f = affine(tape, h, layer.w1, layer.b1)?;
            let f = tape.activation(f, Activation::Gelu)?;
            let f = affine(tape, f, layer.w2, layer.b2)?;
            let f = tape.dropout(f, p, training, rng)?;
            x = tape.add(x, f)?;
        }
        tape.layer_norm(x, tape.param(self.lnf_g), tape.param(self.lnf_b))
    }

    /// Vocabulary logits through the word-embedding table: `features · Eᵀ`.
    pub fn tied_logits(&self, tape: &Tape, features: Var) -> Result<Var> {
        tape.matmul_nt(features, tape.param(self.word))
    }

    /// This encoder's parameters, in registration order.
    pub fn param_ids(&self, store: &ParamStore) -> Vec<ParamId> {
        let head = format!("{}.", self.prefix);
        store
            .iter()
            .filter(|(_, name, _)| name.starts_with(&head))
            .map(|(id, _, _)| id)
            .collect()
    }

    /// Writes one tensor file per parameter plus `manifest.json`.
    pub fn save(&self, store: &ParamStore, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut names = Vec::new();
        for id in self.param_ids(store) {
            let name = store.name(id);
            let local = &name[self.prefix.len() + 1..];
            store.get(id).save(dir.join(format!("{local}.ftsr")))?;
            names.push(local.to_string());
        }
        let manifest = EncoderManifest {
            config: self.config.clone(),
            parameters: names,
            seed: self.seed,
        };
        std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }

    /// Rebuilds an encoder saved with [`EncoderModel::save`] under a (possibly new) prefix.
    pub fn load(dir: impl AsRef<Path>, prefix: &str, store: &mut ParamStore) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: EncoderManifest =
            serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)?;
        let mut rng = <rand::rngs::StdRng as rand::SeedableRng>::seed_from_u64(manifest.seed);
        let model = Self::new(manifest.config, prefix, store, manifest.seed, &mut rng)?;
        let expected: Vec<String> = model
            .param_ids(store)
            .iter()
            .map(|&id| store.name(id)[prefix.len() + 1..].to_string())
            .collect();
        if expected != manifest.parameters {
            return Err(Error::Format(format!(
                "encoder manifest in {} lists unexpected parameters",
                dir.display()
            )));
        }
        for local in &manifest.parameters {
            let t = Tensor::load(dir.join(format!("{local}.ftsr")))?;
            let id = store.id(&format!("{prefix}.{local}")).expect("registered above");
            let dst = store.get_mut(id);
            if dst.shape() != t.shape() {
                return Err(Error::Dimension(format!("parameter {local} has shape {:?}", t.shape())));
            }
            dst.set_data(t.into_data())?;
        }
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct EncoderManifest {
    config: EncoderConfig,
    parameters: Vec<String>,
    seed: u64,
}

/// Bidirectional mask letting every query position see every real key.
pub fn padding_mask(real: &[u8]) -> Vec<f64> {
    let n = real.len();
    let mut m = Vec::with_capacity(n * n);
    for _ in 0..n {
        m.extend(real.iter().map(|&r| f64::from(r)));
    }
    m
}

/// `softmax(q·kᵀ/√d restricted to mask)·v` for a single head.
///
/// `mask` is a flat n×m array of 0/1 entries; masked keys get zero weight.
pub fn attention(tape: &Tape, q: Var, k: Var, v: Var, mask: &[f64]) -> Result<Var> {
    let d = *tape.shape(q).last().ok_or_else(|| Error::Dimension("attention on a scalar".into()))?;
    let scores = tape.matmul_nt(q, k)?;
    let scores = tape.scale(scores, 1.0 / (d as f64).sqrt())?;
    let weights = tape.masked_softmax(scores, mask)?;
    tape.matmul(weights, v)
}

fn multi_head(tape: &Tape, q: Var, k: Var, v: Var, mask: &[f64], heads: usize) -> Result<Var> {
    if heads == 1 {
        return attention(tape, q, k, v, mask);
    }
    let d = tape.shape(q)[1];
    let dh = d / heads;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        outs.push(attention(tape, qh, kh, vh, mask)?);
    }
    tape.concat_cols(&outs)
}

/// The `[CLS]` row of a `len × d` feature matrix, as a vector of length `d`.
pub fn pooled_feature(tape: &Tape, features: Var) -> Result<Var> {
    let shape = tape.shape(features);
    if shape.len() != 2 || shape[0] == 0 {
        return Err(Error::Dimension(format!("pooled_feature on shape {shape:?}")));
    }
    let row = tape.slice_rows(features, 0, 1)?;
    tape.reshape(row, vec![shape[1]])
}

//! Sequence-to-sequence generation over bidirectional encoders via a
//! UniLM-style attention mask, and the factoid answer models built on it.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::autodiff::{argmax, ParamStore, Tape, Tensor, Var};
use crate::datasets::FactoidInstance;
use crate::encoder::{EncoderConfig, EncoderModel};
use crate::error::{Error, Result};
use crate::fusion::{cnn_weights, weighted_combine, CnnWeighter, GateConfig};
use crate::metrics::{factoid_report, BleuMode};
use crate::tokenizer::{encode_pair, TokenSequence, Vocab, SEP};
use crate::training::{map_ordered, Evaluation, Trainable};

/// `T×T` 0/1 mask over `src_len` source and `tgt_len` target positions.
#[derive(Clone, Debug, PartialEq)]
pub struct Seq2SeqMask {
    pub src_len: usize,
    pub tgt_len: usize,
    data: Vec<f64>,
}

impl Seq2SeqMask {
    pub fn size(&self) -> usize {
        self.src_len + self.tgt_len
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.data[i * self.size() + j] != 0.0
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_tensor(&self) -> Tensor {
        let t = self.size();
        Tensor::new(vec![t, t], self.data.clone()).expect("mask is finite")
    }
}

/// Source rows see the whole source; target rows see the source and the
/// targets up to themselves.
pub fn build_seq2seq_mask(src_len: usize, tgt_len: usize) -> Result<Seq2SeqMask> {
    if src_len == 0 {
        return Err(Error::Parameter("seq2seq mask needs a non-empty source".into()));
    }
    let t = src_len + tgt_len;
    let mut data = vec![0.0; t * t];
    for i in 0..t {
        let visible = if i < src_len { src_len } else { i + 1 };
        data[i * t..i * t + visible].iter_mut().for_each(|v| *v = 1.0);
    }
    Ok(Seq2SeqMask { src_len, tgt_len, data })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub max_answer_len: usize,
    pub stop_id: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            max_answer_len: 8,
            stop_id: SEP,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_answer_len == 0 {
            return Err(Error::Config("max_answer_len must be at least 1".into()));
        }
        Ok(())
    }
}

/// How the hidden states of two encoders are merged.
#[derive(Clone, Debug)]
pub enum Combiner {
    /// Constant weights.
    Fixed(f64, f64),
    /// Weights predicted from the source span by a convolutional gate.
    Gate(CnnWeighter),
}

/// One or two encoders sharing a seq2seq input, with a tied output projection.
#[derive(Clone, Debug)]
pub struct FactoidModel {
    pub encoders: Vec<EncoderModel>,
    pub combiner: Option<Combiner>,
    /// Index of the encoder whose word embedding projects onto the vocabulary.
    pub output_encoder: usize,
}

impl FactoidModel {
    pub fn single(encoder: EncoderModel) -> Self {
        Self {
            encoders: vec![encoder],
            combiner: None,
            output_encoder: 0,
        }
    }

    pub fn dual(a: EncoderModel, b: EncoderModel, combiner: Combiner) -> Result<Self> {
        if a.config.d_model != b.config.d_model || a.config.vocab_size != b.config.vocab_size {
            return Err(Error::Config("paired encoders need equal width and vocabulary".into()));
        }
        Ok(Self {
            encoders: vec![a, b],
            combiner: Some(combiner),
            output_encoder: 0,
        })
    }

    pub fn max_len(&self) -> usize {
        self.encoders.iter().map(|e| e.config.max_len).min().unwrap_or(0)
    }

    /// Ties the output projection to the first encoder that is still trainable.
    pub fn tie_to_trainable(&mut self, store: &ParamStore) {
        self.output_encoder = self
            .encoders
            .iter()
            .position(|e| store.is_trainable(e.word_embedding()))
            .unwrap_or(0);
    }

    /// Combined features for `ids` under the seq2seq mask, plus the fusion
    /// weights when two encoders are present.
    pub fn hidden<R: Rng + ?Sized>(
        &self,
        tape: &Tape,
        ids: &[usize],
        segments: &[usize],
        src_len: usize,
        training: bool,
        rng: &mut R,
    ) -> Result<(Var, Option<(Var, Var)>)> {
        if ids.len() > self.max_len() {
            return Err(Error::Dimension(format!(
                "seq2seq input of {} tokens exceeds max_len {}",
                ids.len(),
                self.max_len()
            )));
        }
        let mask = build_seq2seq_mask(src_len, ids.len().saturating_sub(src_len))?;
        let mut feats = Vec::with_capacity(self.encoders.len());
        for enc in &self.encoders {
            let x = enc.embed_ids(tape, ids, segments)?;
            feats.push(enc.encode_embedded(tape, x, mask.data(), training, rng)?);
        }
        match (&self.combiner, feats.as_slice()) {
            (None, [h]) => Ok((*h, None)),
            (Some(comb), [h1, h2]) => {
                let (w1, w2) = match comb {
                    Combiner::Fixed(a, b) => (
                        tape.constant(vec![1], vec![*a])?,
                        tape.constant(vec![1], vec![*b])?,
                    ),
                    Combiner::Gate(gate) => {
                        let s1 = tape.slice_rows(*h1, 0, src_len)?;
                        let s2 = tape.slice_rows(*h2, 0, src_len)?;
                        cnn_weights(tape, s1, s2, gate, training, rng)?
                    }
                };
                Ok((weighted_combine(tape, *h1, *h2, w1, w2)?, Some((w1, w2))))
            }
            _ => Err(Error::Config("factoid model needs one encoder, or two with a combiner".into())),
        }
    }

    /// Vocabulary logits at every position.
    pub fn position_logits<R: Rng + ?Sized>(
        &self,
        tape: &Tape,
        ids: &[usize],
        segments: &[usize],
        src_len: usize,
        rng: &mut R,
    ) -> Result<Var> {
        let (h, _) = self.hidden(tape, ids, segments, src_len, false, rng)?;
        self.encoders[self.output_encoder].tied_logits(tape, h)
    }

    /// Teacher-forced next-token cross-entropy of `answer` followed by `[SEP]`.
    pub fn loss<R: Rng + ?Sized>(
        &self,
        tape: &Tape,
        src: &TokenSequence,
        answer: &[usize],
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let src = src.unpadded();
        let src_len = src.len();
        let mut ids = src.ids.clone();
        ids.extend_from_slice(answer);
        let mut segments = src.segments.clone();
        segments.resize(ids.len(), 1);
        let (h, _) = self.hidden(tape, &ids, &segments, src_len, training, rng)?;
        let rows = tape.slice_rows(h, src_len - 1, answer.len() + 1)?;
        let logits = self.encoders[self.output_encoder].tied_logits(tape, rows)?;
        let mut targets = answer.to_vec();
        targets.push(SEP);
        tape.cross_entropy(logits, &targets)
    }

    /// Source framing used for generation, leaving room for the answer.
    pub fn frame_source(
        &self,
        question: &str,
        context: &str,
        vocab: &Vocab,
        gen: &GenerationConfig,
    ) -> Result<TokenSequence> {
        let budget = self.max_len().checked_sub(gen.max_answer_len).filter(|b| *b >= 4);
        let budget = budget.ok_or_else(|| {
            Error::Config(format!(
                "max_len {} leaves no room for answers of {} tokens",
                self.max_len(),
                gen.max_answer_len
            ))
        })?;
        Ok(encode_pair(question, context, vocab, budget)?.unpadded())
    }

    /// Greedy answer ids for a framed source, stopping at `stop_id`.
    pub fn generate_ids(
        &self,
        store: &ParamStore,
        src: &TokenSequence,
        gen: &GenerationConfig,
    ) -> Result<Vec<usize>> {
        gen.validate()?;
        let mut out = Vec::new();
        while out.len() < gen.max_answer_len {
            let next = decode_step(self, store, src, &out)?;
            if next == gen.stop_id {
                break;
            }
            out.push(next);
        }
        Ok(out)
    }
}

/// Greedy next token after `src` followed by the `generated` targets.
pub fn decode_step(
    model: &FactoidModel,
    store: &ParamStore,
    src: &TokenSequence,
    generated: &[usize],
) -> Result<usize> {
    let src = src.unpadded();
    let mut ids = src.ids.clone();
    ids.extend_from_slice(generated);
    let mut segments = src.segments.clone();
    segments.resize(ids.len(), 1);
    let tape = Tape::inference(store);
    let mut rng = StdRng::seed_from_u64(0);
    let logits = model.position_logits(&tape, &ids, &segments, src.len(), &mut rng)?;
    let last = tape.slice_rows(logits, ids.len() - 1, 1)?;
    Ok(argmax(&tape.value(last)).expect("vocabulary is non-empty"))
}

/// Greedy answer text for a question and context.
pub fn generate(
    model: &FactoidModel,
    store: &ParamStore,
    question: &str,
    context: &str,
    vocab: &Vocab,
    gen: &GenerationConfig,
) -> Result<String> {
    let size = model.encoders[model.output_encoder].config.vocab_size;
    if size != vocab.len() {
        return Err(Error::Config(format!(
            "model vocabulary of {size} does not match tokenizer vocabulary of {}",
            vocab.len()
        )));
    }
    let src = model.frame_source(question, context, vocab, gen)?;
    let ids = model.generate_ids(store, &src, gen)?;
    vocab.decode(&ids)
}

/// The factoid model line-up: which encoders, which are frozen and how they are combined.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FactoidPreset {
    pub name: String,
    /// Roles in order: `'A'` is `encoder1`, `'B'` is `encoder2`.
    pub roles: Vec<char>,
    pub frozen: Vec<char>,
    pub gate: bool,
}

pub const FACTOID_PRESETS: [&str; 8] = [
    "bertA",
    "bertB",
    "bertA+bertB",
    "bertA+bertB+mlp",
    "bertA(F)+bertB",
    "bertA(F)+bertB+mlp",
    "bertB(F)+bertA",
    "bertB(F)+bertA+mlp",
];

pub fn role_group(role: char) -> &'static str {
    if role == 'A' {
        "encoder1"
    } else {
        "encoder2"
    }
}

impl FactoidPreset {
    /// Parses names such as `bertA(F)+bertB+mlp`; `bio` is accepted in place of `bert`.
    pub fn parse(name: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown factoid preset {name:?}; expected one of {FACTOID_PRESETS:?}"));
        let mut roles = Vec::new();
        let mut frozen = Vec::new();
        let mut gate = false;
        for part in name.split('+') {
            if part == "mlp" {
                if gate {
                    return Err(bad());
                }
                gate = true;
                continue;
            }
            let body = part
                .strip_prefix("bert")
                .or_else(|| part.strip_prefix("bio"))
                .ok_or_else(bad)?;
            let (role, is_frozen) = match body {
                "A" => ('A', false),
                "B" => ('B', false),
                "A(F)" => ('A', true),
                "B(F)" => ('B', true),
                _ => return Err(bad()),
            };
            if roles.contains(&role) {
                return Err(bad());
            }
            roles.push(role);
            if is_frozen {
                frozen.push(role);
            }
        }
        let ok = match roles.len() {
            1 => !gate && frozen.is_empty(),
            2 => frozen.len() <= 1,
            _ => false,
        };
        if !ok {
            return Err(bad());
        }
        // encoder A always comes first in the model so weights read as (A, B)
        roles.sort_unstable();
        Ok(Self {
            name: name.to_string(),
            roles,
            frozen,
            gate,
        })
    }

    pub fn frozen_groups(&self) -> Vec<&'static str> {
        self.frozen.iter().map(|&r| role_group(r)).collect()
    }

    /// Registers the preset's parameters in `store`. Encoder seeds derive from `seed`.
    pub fn build<R: Rng + ?Sized>(
        &self,
        config: &EncoderConfig,
        gate: &GateConfig,
        store: &mut ParamStore,
        seed: u64,
        rng: &mut R,
    ) -> Result<FactoidModel> {
        let mut encoders = Vec::new();
        for &role in &self.roles {
            let s = encoder_seed(seed, role);
            let mut erng = StdRng::seed_from_u64(s);
            encoders.push(EncoderModel::new(config.clone(), role_group(role), store, s, &mut erng)?);
        }
        if encoders.len() == 1 {
            return Ok(FactoidModel::single(encoders.remove(0)));
        }
        let combiner = if self.gate {
            Combiner::Gate(CnnWeighter::new(gate.clone(), "gate", store, rng)?)
        } else {
            Combiner::Fixed(0.5, 0.5)
        };
        let b = encoders.pop().expect("two encoders");
        let a = encoders.pop().expect("two encoders");
        FactoidModel::dual(a, b, combiner)
    }
}

/// Seed for an encoder role, so a role initialises identically across presets.
pub fn encoder_seed(seed: u64, role: char) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(if role == 'A' { 11 } else { 29 })
}

/// A factoid record framed for teacher forcing.
#[derive(Clone, Debug, PartialEq)]
pub struct FactoidExample {
    pub id: String,
    pub src: TokenSequence,
    /// Answer ids, cut to the generation budget.
    pub answer_ids: Vec<usize>,
    pub answer: String,
}

pub fn encode_factoid(
    inst: &FactoidInstance,
    model: &FactoidModel,
    vocab: &Vocab,
    gen: &GenerationConfig,
) -> Result<FactoidExample> {
    let src = model.frame_source(&inst.question, &inst.context, vocab, gen)?;
    let mut answer_ids = vocab.encode(&inst.answer);
    answer_ids.truncate(gen.max_answer_len);
    Ok(FactoidExample {
        id: inst.id.clone(),
        src,
        answer_ids,
        answer: inst.answer.clone(),
    })
}

/// A factoid model together with the tokenizer and decoding settings it is
/// trained and evaluated with.
#[derive(Clone, Debug)]
pub struct FactoidTask {
    pub model: FactoidModel,
    pub vocab: Vocab,
    pub gen: GenerationConfig,
    /// Decodes validation answers to report token F1; otherwise only the loss.
    pub generate_in_eval: bool,
}

impl FactoidTask {
    pub fn answer(&self, store: &ParamStore, ex: &FactoidExample) -> Result<String> {
        let ids = self.model.generate_ids(store, &ex.src, &self.gen)?;
        self.vocab.decode(&ids)
    }

    pub fn answer_all(
        &self,
        store: &ParamStore,
        examples: &[FactoidExample],
        threads: usize,
    ) -> Result<Vec<String>> {
        map_ordered(examples, threads, |_, ex| self.answer(store, ex))
    }
}

impl Trainable for FactoidTask {
    type Example = FactoidExample;

    fn loss(&self, tape: &Tape, ex: &FactoidExample, rng: &mut StdRng) -> Result<Var> {
        self.model.loss(tape, &ex.src, &ex.answer_ids, true, rng)
    }

    fn evaluate(&self, store: &ParamStore, examples: &[FactoidExample], threads: usize) -> Result<Evaluation> {
        let losses = map_ordered(examples, threads, |_, ex| {
            let tape = Tape::inference(store);
            let mut rng = StdRng::seed_from_u64(0);
            let l = self.model.loss(&tape, &ex.src, &ex.answer_ids, false, &mut rng)?;
            tape.item(l)
        })?;
        let loss = losses.iter().sum::<f64>() / losses.len() as f64;
        let f1 = if self.generate_in_eval {
            let answers = self.answer_all(store, examples, threads)?;
            let gold: Vec<String> = examples.iter().map(|e| e.answer.clone()).collect();
            factoid_report(&answers, &gold, BleuMode::Sentence)?.f1
        } else {
            None
        };
        Ok(Evaluation {
            loss,
            accuracy: None,
            f1,
        })
    }
}

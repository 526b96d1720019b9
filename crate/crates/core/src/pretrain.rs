//! Toy masked-token pretraining on synthetic Markov-chain text.
//!
//! Each encoder role gets its own corpus: a sparse successor table over the
//! vocabulary words, drawn from a role-specific seed. Predicting a masked
//! token from such text needs its neighbours, so pretrained encoders start
//! fine-tuning with local-context features already in place.

use rand::rngs::StdRng;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape, Var};
use crate::encoder::{EncoderConfig, EncoderModel};
use crate::error::{Error, Result};
use crate::tokenizer::{TokenSequence, Vocab, CLS, MASK, RESERVED, SEP};
use crate::training::{train_step, Evaluation, Optimizer, OptimizerConfig, TrainConfig, Trainable};
use crate::unilm::{encoder_seed, role_group};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Words per sequence, excluding `[CLS]` and `[SEP]`.
    pub seq_len: usize,
    pub mask_prob: f64,
    /// Allowed successors per word.
    pub successors: usize,
    /// Probability of jumping to a uniformly random word instead.
    pub noise: f64,
    pub lr: f64,
    /// Global gradient-norm clip; 0 disables it.
    pub clip_norm: f64,
    pub seed: u64,
    pub threads: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 4000,
            batch_size: 16,
            seq_len: 16,
            mask_prob: 0.15,
            successors: 2,
            noise: 0.1,
            lr: 3e-3,
            clip_norm: 0.0,
            seed: 0,
            threads: 1,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.seq_len == 0 || self.successors == 0 {
            return Err(Error::Config("pretraining batch_size, seq_len and successors must be positive".into()));
        }
        if !(self.mask_prob > 0.0 && self.mask_prob <= 1.0) {
            return Err(Error::Config(format!("mask_prob {} outside (0, 1]", self.mask_prob)));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::Config(format!("noise {} outside [0, 1]", self.noise)));
        }
        Ok(())
    }
}

/// First-order Markov chain over a fixed word list.
#[derive(Clone, Debug)]
pub struct MarkovCorpus {
    words: Vec<usize>,
    next: Vec<Vec<usize>>,
    noise: f64,
}

impl MarkovCorpus {
    pub fn new(words: Vec<usize>, successors: usize, noise: f64, seed: u64) -> Result<Self> {
        if words.len() < 2 {
            return Err(Error::Config("a Markov corpus needs at least two words".into()));
        }
        let mut rng = StdRng::seed_from_u64(seed);
        let next = (0..words.len())
            .map(|_| (0..successors).map(|_| rng.random_range(0..words.len())).collect())
            .collect();
        Ok(Self { words, next, noise })
    }

    /// Every non-reserved vocabulary id.
    pub fn from_vocab(vocab: &Vocab, successors: usize, noise: f64, seed: u64) -> Result<Self> {
        Self::new((RESERVED.len()..vocab.len()).collect(), successors, noise, seed)
    }

    pub fn sample<R: Rng + ?Sized>(&self, len: usize, rng: &mut R) -> Vec<usize> {
        let mut i = rng.random_range(0..self.words.len());
        let mut out = Vec::with_capacity(len);
        for _ in 0..len {
            out.push(self.words[i]);
            i = if rng.random::<f64>() < self.noise {
                rng.random_range(0..self.words.len())
            } else {
                *self.next[i].choose(rng).expect("successor lists are non-empty")
            };
        }
        out
    }
}

/// A framed sequence with some positions replaced by `[MASK]`.
#[derive(Clone, Debug)]
pub struct MlmExample {
    pub seq: TokenSequence,
    pub positions: Vec<usize>,
    pub targets: Vec<usize>,
}

pub fn mask_sequence<R: Rng + ?Sized>(words: &[usize], mask_prob: f64, rng: &mut R) -> Result<MlmExample> {
    let mut ids = Vec::with_capacity(words.len() + 2);
    ids.push(CLS);
    ids.extend_from_slice(words);
    ids.push(SEP);
    let mut positions: Vec<usize> = (1..=words.len()).filter(|_| rng.random::<f64>() < mask_prob).collect();
    if positions.is_empty() && !words.is_empty() {
        positions.push(rng.random_range(1..=words.len()));
    }
    let targets = positions.iter().map(|&p| ids[p]).collect();
    for &p in &positions {
        ids[p] = MASK;
    }
    let n = ids.len();
    Ok(MlmExample {
        seq: TokenSequence::new(ids, vec![0; n])?,
        positions,
        targets,
    })
}

struct MlmTask<'a> {
    encoder: &'a EncoderModel,
}

impl MlmTask<'_> {
    fn example_loss(&self, tape: &Tape, ex: &MlmExample, training: bool, rng: &mut StdRng) -> Result<Var> {
        let h = self.encoder.encode(tape, &ex.seq, None, training, rng)?;
        let rows = tape.gather_rows(h, &ex.positions)?;
        let logits = self.encoder.tied_logits(tape, rows)?;
        tape.cross_entropy(logits, &ex.targets)
    }
}

impl Trainable for MlmTask<'_> {
    type Example = MlmExample;

    fn loss(&self, tape: &Tape, ex: &MlmExample, rng: &mut StdRng) -> Result<Var> {
        self.example_loss(tape, ex, true, rng)
    }

    fn evaluate(&self, store: &ParamStore, examples: &[MlmExample], _threads: usize) -> Result<Evaluation> {
        let mut rng = StdRng::seed_from_u64(0);
        let mut total = 0.0;
        for ex in examples {
            let tape = Tape::inference(store);
            let l = self.example_loss(&tape, ex, false, &mut rng)?;
            total += tape.item(l)?;
        }
        Ok(Evaluation {
            loss: total / examples.len().max(1) as f64,
            accuracy: None,
            f1: None,
        })
    }
}

/// Corpus of one encoder role: `'A'` draws its successor table from a
/// different stream than `'B'`, giving the two roles distinct "domains".
pub fn role_corpus(vocab: &Vocab, role: char, cfg: &PretrainConfig) -> Result<MarkovCorpus> {
    let salt = if role == 'A' { 0xD0_A1 } else { 0x6E_4E };
    MarkovCorpus::from_vocab(vocab, cfg.successors, cfg.noise, cfg.seed.wrapping_mul(7919) ^ salt)
}

/// Pretrains the encoder of `role` under its usual group name. The result
/// depends on `cfg` and the vocabulary only, not on any fine-tuning seed.
pub fn pretrain_role(config: &EncoderConfig, vocab: &Vocab, role: char, cfg: &PretrainConfig) -> Result<Pretrained> {
    let corpus = role_corpus(vocab, role, cfg)?;
    let cfg = PretrainConfig {
        seed: encoder_seed(cfg.seed, role),
        ..cfg.clone()
    };
    pretrain_encoder(config, role_group(role), cfg.seed, &corpus, &cfg)
}

/// A pretrained encoder in its own store, ready to copy with [`ParamStore::load_from`].
pub struct Pretrained {
    pub store: ParamStore,
    pub encoder: EncoderModel,
    /// Mean masked-token loss per step.
    pub losses: Vec<f64>,
}

/// Builds an encoder exactly as a model would (same prefix and seed) and
/// trains it on masked-token prediction over `corpus`.
pub fn pretrain_encoder(
    config: &EncoderConfig,
    prefix: &str,
    encoder_seed: u64,
    corpus: &MarkovCorpus,
    cfg: &PretrainConfig,
) -> Result<Pretrained> {
    cfg.validate()?;
    if cfg.seq_len + 2 > config.max_len {
        return Err(Error::Config(format!(
            "pretraining sequences of {} tokens exceed max_len {}",
            cfg.seq_len + 2,
            config.max_len
        )));
    }
    if let Some(&bad) = corpus.words.iter().find(|&&w| w >= config.vocab_size) {
        return Err(Error::Config(format!("corpus word id {bad} outside the encoder vocabulary")));
    }
    let mut store = ParamStore::new();
    let mut rng = StdRng::seed_from_u64(encoder_seed);
    let encoder = EncoderModel::new(config.clone(), prefix, &mut store, encoder_seed, &mut rng)?;
    let task = MlmTask { encoder: &encoder };
    let train_cfg = TrainConfig {
        optimizer: OptimizerConfig::adamw(cfg.lr, 0.01),
        seed: cfg.seed,
        threads: cfg.threads,
        clip_norm: cfg.clip_norm,
        ..TrainConfig::default()
    };
    let mut optimizer = Optimizer::new(train_cfg.optimizer.clone())?;
    let mut data_rng = StdRng::seed_from_u64(cfg.seed ^ 0x4D4C_4D00);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = (0..cfg.batch_size)
            .map(|_| mask_sequence(&corpus.sample(cfg.seq_len, &mut data_rng), cfg.mask_prob, &mut data_rng))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&MlmExample> = batch.iter().collect();
        losses.push(train_step(&task, &mut store, &mut optimizer, &refs, &train_cfg, step)?);
        if step % 250 == 0 {
            log::debug!("{prefix} pretraining step {step}: loss {:.4}", losses[step]);
        }
    }
    Ok(Pretrained { store, encoder, losses })
}

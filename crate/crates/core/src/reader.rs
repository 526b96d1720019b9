//! Cloze readers: single-encoder classifiers, the AoA pointer reader and the
//! MLP-fused reader that combines an AoA branch with a second encoder.

use std::collections::HashSet;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::aoa::{aoa, candidate_scores_var, match_matrix, pointer_loss, predict, SCORE_EPS};
use crate::autodiff::{ParamStore, Tape, Var};
use crate::datasets::{find_word_spans, ClozeInstance, MAX_CANDIDATES};
use crate::encoder::{pooled_feature, EncoderConfig, EncoderModel};
use crate::error::{Error, Result};
use crate::fusion::{select_candidate, FuserConfig, MlpFuser};
use crate::metrics::{accuracy, macro_prf};
use crate::tokenizer::{frame_pair, normalize, TokenSequence, Vocab};
use crate::training::{map_ordered, Evaluation, Trainable};
use crate::unilm::{encoder_seed, role_group};

/// A cloze instance framed as `[CLS] query [SEP] passage [SEP]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedCloze {
    pub id: String,
    pub seq: TokenSequence,
    pub query_start: usize,
    pub query_len: usize,
    pub doc_start: usize,
    pub doc_len: usize,
    /// Passage-relative token positions covered by each candidate.
    pub occurrences: Vec<Vec<usize>>,
    pub answer: usize,
}

impl EncodedCloze {
    pub fn num_candidates(&self) -> usize {
        self.occurrences.len()
    }
}

/// Tokenises and frames one instance, truncating the passage to fit `max_len`.
pub fn encode_cloze(inst: &ClozeInstance, vocab: &Vocab, max_len: usize) -> Result<EncodedCloze> {
    inst.validate()?;
    let q = vocab.encode(&inst.query);
    if q.is_empty() {
        return Err(Error::Record {
            id: inst.id.clone(),
            message: "query has no tokens".into(),
        });
    }
    let (p, word_of) = vocab.encode_with_words(&inst.passage);
    let seq = frame_pair(&q, &p, max_len)?.unpadded();
    let doc_start = q.len() + 2;
    let doc_len = seq.len() - doc_start - 1;
    if doc_len == 0 {
        return Err(Error::Record {
            id: inst.id.clone(),
            message: format!("no room for the passage within {max_len} tokens"),
        });
    }
    let words = normalize(&inst.passage);
    let occurrences = inst
        .candidates
        .iter()
        .map(|c| {
            let pattern = normalize(c);
            let covered: HashSet<usize> = find_word_spans(&words, &pattern)
                .into_iter()
                .flat_map(|s| s..s + pattern.len())
                .collect();
            (0..doc_len).filter(|t| covered.contains(&word_of[*t])).collect()
        })
        .collect();
    Ok(EncodedCloze {
        id: inst.id.clone(),
        seq,
        query_start: 1,
        query_len: q.len(),
        doc_start,
        doc_len,
        occurrences,
        answer: inst.answer_index,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClozePreset {
    #[serde(rename = "encA")]
    EncA,
    #[serde(rename = "encB")]
    EncB,
    #[serde(rename = "aoa")]
    Aoa,
    #[serde(rename = "mlp_fused")]
    MlpFused,
}

pub const CLOZE_PRESETS: [&str; 4] = ["encA", "encB", "aoa", "mlp_fused"];

impl ClozePreset {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "encA" => Ok(Self::EncA),
            "encB" => Ok(Self::EncB),
            "aoa" => Ok(Self::Aoa),
            "mlp_fused" => Ok(Self::MlpFused),
            _ => Err(Error::Config(format!(
                "unknown cloze preset {name:?}; expected one of {CLOZE_PRESETS:?}"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::EncA => "encA",
            Self::EncB => "encB",
            Self::Aoa => "aoa",
            Self::MlpFused => "mlp_fused",
        }
    }

    pub fn roles(self) -> &'static [char] {
        match self {
            Self::EncA | Self::Aoa => &['A'],
            Self::EncB => &['B'],
            Self::MlpFused => &['A', 'B'],
        }
    }
}

#[derive(Clone, Debug)]
pub enum ClozeHead {
    /// `[CLS]` feature of one encoder scored by a one-branch MLP.
    Classifier(MlpFuser),
    /// Pointer-sum over AoA position scores.
    Pointer,
    /// AoA-weighted doc embedding and the second encoder's `[CLS]` feature through the MLP.
    Fused(MlpFuser),
}

#[derive(Clone, Debug)]
pub struct ClozeModel {
    pub preset: ClozePreset,
    pub encoders: Vec<EncoderModel>,
    pub head: ClozeHead,
    /// Weight of the auxiliary pointer loss of the fused reader.
    pub pointer_weight: f64,
    /// Multiplier on matching scores before the AoA softmaxes, `1/√d` by default.
    pub match_scale: f64,
}

/// Candidate scores of one instance plus the AoA pointer scores when computed.
pub struct ClozeOutput {
    /// `1 × K` scores over the instance's candidates.
    pub scores: Var,
    pub pointer: Option<Var>,
}

impl ClozeModel {
    pub fn build(
        preset: ClozePreset,
        config: &EncoderConfig,
        store: &mut ParamStore,
        seed: u64,
    ) -> Result<Self> {
        let mut encoders = Vec::new();
        for &role in preset.roles() {
            let s = encoder_seed(seed, role);
            let mut rng = StdRng::seed_from_u64(s);
            encoders.push(EncoderModel::new(config.clone(), role_group(role), store, s, &mut rng)?);
        }
        let mut rng = StdRng::seed_from_u64(seed ^ 0x5EED_F00D);
        let d = config.d_model;
        let head = match preset {
            ClozePreset::EncA | ClozePreset::EncB => {
                ClozeHead::Classifier(MlpFuser::new(FuserConfig::new(vec![d]), "fuser", store, &mut rng)?)
            }
            ClozePreset::Aoa => ClozeHead::Pointer,
            ClozePreset::MlpFused => {
                ClozeHead::Fused(MlpFuser::new(FuserConfig::new(vec![d, d]), "fuser", store, &mut rng)?)
            }
        };
        Ok(Self {
            preset,
            encoders,
            head,
            pointer_weight: 1.0,
            match_scale: 1.0 / (d as f64).sqrt(),
        })
    }

    pub fn max_len(&self) -> usize {
        self.encoders.iter().map(|e| e.config.max_len).min().unwrap_or(0)
    }

    fn pointer_scores(&self, tape: &Tape, h: Var, ex: &EncodedCloze) -> Result<(Var, Var)> {
        let doc = tape.slice_rows(h, ex.doc_start, ex.doc_len)?;
        let qry = tape.slice_rows(h, ex.query_start, ex.query_len)?;
        let m = match_matrix(tape, doc, qry)?;
        let m = tape.scale(m, self.match_scale)?;
        let att = aoa(tape, m)?;
        let ids = &ex.seq.ids[ex.doc_start..ex.doc_start + ex.doc_len];
        let emb = tape.gather_rows(tape.param(self.encoders[0].word_embedding()), ids)?;
        Ok((candidate_scores_var(tape, att.s, &ex.occurrences)?, summary(tape, att.s, emb)?))
    }

    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &Tape,
        ex: &EncodedCloze,
        training: bool,
        rng: &mut R,
    ) -> Result<ClozeOutput> {
        let k = ex.num_candidates();
        if k == 0 || k > MAX_CANDIDATES {
            return Err(Error::Dimension(format!("{k} candidates")));
        }
        let mut hs = Vec::with_capacity(self.encoders.len());
        for enc in &self.encoders {
            hs.push(enc.encode(tape, &ex.seq, None, training, rng)?);
        }
        match &self.head {
            ClozeHead::Classifier(mlp) => {
                let f = pooled_feature(tape, hs[0])?;
                let all = mlp.scores(tape, &[f])?;
                Ok(ClozeOutput {
                    scores: tape.slice_cols(all, 0, k)?,
                    pointer: None,
                })
            }
            ClozeHead::Pointer => {
                let (scores, _) = self.pointer_scores(tape, hs[0], ex)?;
                Ok(ClozeOutput {
                    scores,
                    pointer: Some(scores),
                })
            }
            ClozeHead::Fused(mlp) => {
                let (pointer, doc_summary) = self.pointer_scores(tape, hs[0], ex)?;
                let f2 = pooled_feature(tape, hs[1])?;
                let all = mlp.scores(tape, &[doc_summary, f2])?;
                Ok(ClozeOutput {
                    scores: tape.slice_cols(all, 0, k)?,
                    pointer: Some(pointer),
                })
            }
        }
    }

    pub fn example_loss<R: Rng + ?Sized>(
        &self,
        tape: &Tape,
        ex: &EncodedCloze,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let out = self.forward(tape, ex, training, rng)?;
        match self.head {
            ClozeHead::Pointer => pointer_loss(tape, out.scores, ex.answer),
            ClozeHead::Classifier(_) => tape.cross_entropy(out.scores, &[ex.answer]),
            ClozeHead::Fused(_) => {
                let ce = tape.cross_entropy(out.scores, &[ex.answer])?;
                let p = out.pointer.expect("fused head computes pointer scores");
                let aux = pointer_loss(tape, p, ex.answer)?;
                let aux = tape.scale(aux, self.pointer_weight)?;
                tape.add(ce, aux)
            }
        }
    }

    /// Predicted candidate index and the inference loss of one instance.
    pub fn predict(&self, store: &ParamStore, ex: &EncodedCloze) -> Result<(usize, f64)> {
        let tape = Tape::inference(store);
        let mut rng = StdRng::seed_from_u64(0);
        let out = self.forward(&tape, ex, false, &mut rng)?;
        let scores = tape.value(out.scores);
        let choice = match self.head {
            ClozeHead::Pointer => predict(&scores)?,
            _ => select_candidate(&scores, &vec![true; scores.len()])?,
        };
        let loss = match self.head {
            ClozeHead::Pointer => -(scores[ex.answer] + SCORE_EPS).ln()
                + scores.iter().map(|s| s + SCORE_EPS).sum::<f64>().ln(),
            _ => {
                let ce = tape.cross_entropy(out.scores, &[ex.answer])?;
                tape.item(ce)?
            }
        };
        Ok((choice, loss))
    }

    pub fn predict_all(
        &self,
        store: &ParamStore,
        examples: &[EncodedCloze],
        threads: usize,
    ) -> Result<Vec<(usize, f64)>> {
        map_ordered(examples, threads, |_, ex| self.predict(store, ex))
    }
}

/// Doc token embeddings averaged with the AoA position scores: `sᵀ · E[doc]`, shape `1 × d`.
fn summary(tape: &Tape, s: Var, doc: Var) -> Result<Var> {
    let n = tape.shape(s).iter().product();
    let row = tape.reshape(s, vec![1, n])?;
    tape.matmul(row, doc)
}

impl Trainable for ClozeModel {
    type Example = EncodedCloze;

    fn loss(&self, tape: &Tape, ex: &EncodedCloze, rng: &mut StdRng) -> Result<Var> {
        self.example_loss(tape, ex, true, rng)
    }

    fn evaluate(&self, store: &ParamStore, examples: &[EncodedCloze], threads: usize) -> Result<Evaluation> {
        let out = self.predict_all(store, examples, threads)?;
        let preds: Vec<usize> = out.iter().map(|p| p.0).collect();
        let gold: Vec<usize> = examples.iter().map(|e| e.answer).collect();
        Ok(Evaluation {
            loss: out.iter().map(|p| p.1).sum::<f64>() / out.len() as f64,
            accuracy: Some(accuracy(&preds, &gold)?),
            f1: Some(macro_prf(&preds, &gold)?.f1),
        })
    }
}

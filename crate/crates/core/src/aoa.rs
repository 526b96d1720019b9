//! Attention-over-attention scoring with pointer-sum candidate aggregation.

use crate::autodiff::{argmax, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Floor added to candidate scores before taking logs.
pub const SCORE_EPS: f64 = 1e-9;

/// `M[i][j] = doc_i · qry_j`.
pub fn match_matrix(tape: &Tape, doc: Var, qry: Var) -> Result<Var> {
    let (ds, qs) = (tape.shape(doc), tape.shape(qry));
    if ds.len() != 2 || qs.len() != 2 || ds[1] != qs[1] {
        return Err(Error::Dimension(format!(
            "match_matrix needs n×d and m×d inputs, got {ds:?} and {qs:?}"
        )));
    }
    tape.matmul_nt(doc, qry)
}

/// Tape handles of the attention stack built on a matching matrix.
#[derive(Clone, Copy, Debug)]
pub struct AoAVars {
    /// n×m, each column a distribution over document positions.
    pub alpha: Var,
    /// n×m, each row a distribution over query positions.
    pub beta: Var,
    /// 1×m.
    pub beta_bar: Var,
    /// Length-n score per document position.
    pub s: Var,
}

pub fn aoa(tape: &Tape, m: Var) -> Result<AoAVars> {
    let shape = tape.shape(m);
    let [n, _] = shape.as_slice() else {
        return Err(Error::Dimension(format!("aoa expects a matrix, got {shape:?}")));
    };
    let n = *n;
    let alpha = tape.softmax(m, 0)?;
    let beta = tape.softmax(m, 1)?;
    let beta_bar = tape.mean_rows(beta)?;
    let s = tape.matmul_nt(alpha, beta_bar)?;
    let s = tape.reshape(s, vec![n])?;
    Ok(AoAVars {
        alpha,
        beta,
        beta_bar,
        s,
    })
}

/// Plain values of the attention stack.
#[derive(Clone, Debug, PartialEq)]
pub struct AoAState {
    pub m: Tensor,
    pub alpha: Tensor,
    pub beta_bar: Vec<f64>,
    pub s: Vec<f64>,
}

/// Evaluates [`aoa`] on a fixed matching matrix.
pub fn aoa_scores(m: &Tensor) -> Result<AoAState> {
    let tape = Tape::new();
    let mv = tape.leaf(m);
    let v = aoa(&tape, mv)?;
    Ok(AoAState {
        m: m.clone(),
        alpha: tape.tensor(v.alpha),
        beta_bar: tape.value(v.beta_bar),
        s: tape.value(v.s),
    })
}

/// `K×n` 0/1 matrix with a one wherever candidate `k` occupies position `p`.
pub fn occurrence_matrix(occurrences: &[Vec<usize>], n: usize) -> Result<Vec<f64>> {
    let mut o = vec![0.0; occurrences.len() * n];
    for (k, positions) in occurrences.iter().enumerate() {
        for &p in positions {
            if p >= n {
                return Err(Error::Index(format!(
                    "candidate {k} occurs at position {p} of a {n}-token document"
                )));
            }
            o[k * n + p] = 1.0;
        }
    }
    Ok(o)
}

/// Pointer-sum scores `score(k) = Σ s[p]` over the occurrences of each candidate.
pub fn candidate_scores_var(tape: &Tape, s: Var, occurrences: &[Vec<usize>]) -> Result<Var> {
    let n = tape.shape(s).iter().product();
    if occurrences.is_empty() {
        return Err(Error::Dimension("no candidates to score".into()));
    }
    let o = occurrence_matrix(occurrences, n)?;
    let o = tape.constant(vec![occurrences.len(), n], o)?;
    let col = tape.reshape(s, vec![n, 1])?;
    let scores = tape.matmul(o, col)?;
    tape.reshape(scores, vec![1, occurrences.len()])
}

/// Plain-value pointer-sum over a computed state.
pub fn candidate_scores(state: &AoAState, occurrences: &[Vec<usize>]) -> Result<Vec<f64>> {
    let n = state.s.len();
    occurrences
        .iter()
        .enumerate()
        .map(|(k, ps)| {
            ps.iter()
                .map(|&p| {
                    state.s.get(p).copied().ok_or_else(|| {
                        Error::Index(format!("candidate {k} occurs at position {p} of {n}"))
                    })
                })
                .sum()
        })
        .collect()
}

/// Index of the best-scoring candidate; ties go to the lowest index.
pub fn predict(scores: &[f64]) -> Result<usize> {
    argmax(scores).ok_or_else(|| Error::Contract("no candidates to choose from".into()))
}

/// `−log` of the gold score renormalised over all candidates.
pub fn pointer_loss(tape: &Tape, scores: Var, gold: usize) -> Result<Var> {
    let shifted = tape.add_scalar(scores, SCORE_EPS)?;
    let logs = tape.log(shifted)?;
    tape.cross_entropy(logs, &[gold])
}

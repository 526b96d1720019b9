//! Feature-fusion heads: the convolutional two-weight gate and the MLP
//! candidate scorer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::Linear;

/// Tolerance on `w1 + w2 = 1` accepted by [`weighted_combine`].
pub const WEIGHT_SUM_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateConfig {
    pub d_model: usize,
    pub channels: usize,
    pub kernel: usize,
    pub hidden: usize,
    pub dropout_p: f64,
}

impl GateConfig {
    pub fn new(d_model: usize) -> Self {
        Self {
            d_model,
            channels: 128,
            kernel: 3,
            hidden: 64,
            dropout_p: 0.1,
        }
    }
}

/// Two Conv1d layers with GeLU, global average pooling, a GeLU hidden layer
/// and a two-way softmax.
#[derive(Clone, Debug)]
pub struct CnnWeighter {
    pub config: GateConfig,
    pub conv1_w: ParamId,
    pub conv1_b: ParamId,
    pub conv2_w: ParamId,
    pub conv2_b: ParamId,
    pub fc: Linear,
    pub out: Linear,
}

impl CnnWeighter {
    pub fn new<R: Rng + ?Sized>(
        config: GateConfig,
        prefix: &str,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        if config.kernel % 2 == 0 || config.channels == 0 || config.hidden == 0 {
            return Err(Error::Config(
                "gate needs an odd kernel and positive widths".into(),
            ));
        }
        let (d, c, k) = (config.d_model, config.channels, config.kernel);
        let conv_std = |c_in: usize| (2.0 / ((c_in + c) * k) as f64).sqrt();
        let conv1_w = store.add(
            format!("{prefix}.conv1.w"),
            Tensor::randn(&[c, d, k], conv_std(d), rng),
        )?;
        let conv1_b = store.add(format!("{prefix}.conv1.b"), Tensor::zeros(&[c]))?;
        let conv2_w = store.add(
            format!("{prefix}.conv2.w"),
            Tensor::randn(&[c, c, k], conv_std(c), rng),
        )?;
        let conv2_b = store.add(format!("{prefix}.conv2.b"), Tensor::zeros(&[c]))?;
        let fc = Linear::new(store, &format!("{prefix}.fc"), c, config.hidden, rng)?;
        let out = Linear::new(store, &format!("{prefix}.out"), config.hidden, 2, rng)?;
        Ok(Self {
            config,
            conv1_w,
            conv1_b,
            conv2_w,
            conv2_b,
            fc,
            out,
        })
    }

    /// Two softmax logits for the stacked pair; shape `1×2`.
    pub fn logits<R: Rng + ?Sized>(
        &self,
        tape: &Tape,
        f1: Var,
        f2: Var,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let (s1, s2) = (tape.shape(f1), tape.shape(f2));
        if s1 != s2 || s1.len() != 2 {
            return Err(Error::Dimension(format!(
                "gate inputs must be equal matrices, got {s1:?} and {s2:?}"
            )));
        }
        if s1[1] != self.config.d_model {
            return Err(Error::Dimension(format!(
                "gate expects width {}, got {}",
                self.config.d_model, s1[1]
            )));
        }
        let pad = self.config.kernel / 2;
        let stacked = tape.concat_rows(&[f1, f2])?;
        let x = tape.transpose(stacked)?;
        let h = tape.conv1d(x, tape.param(self.conv1_w), Some(tape.param(self.conv1_b)), 1, pad)?;
        let h = tape.activation(h, Activation::Gelu)?;
        let h = tape.conv1d(h, tape.param(self.conv2_w), Some(tape.param(self.conv2_b)), 1, pad)?;
        let pooled = tape.global_avg_pool(h)?;
        let pooled = tape.reshape(pooled, vec![1, self.config.channels])?;
        let z = self.fc.forward(tape, pooled)?;
        let z = tape.activation(z, Activation::Gelu)?;
        let z = tape.dropout(z, self.config.dropout_p, training, rng)?;
        self.out.forward(tape, z)
    }
}

/// Importance weights `(w1, w2)` of the two feature streams, each a one-element var.
pub fn cnn_weights<R: Rng + ?Sized>(
    tape: &Tape,
    f1: Var,
    f2: Var,
    head: &CnnWeighter,
    training: bool,
    rng: &mut R,
) -> Result<(Var, Var)> {
    let logits = head.logits(tape, f1, f2, training, rng)?;
    let w = tape.softmax(logits, 1)?;
    Ok((tape.select(w, &[0])?, tape.select(w, &[1])?))
}

/// `w1·f1 + w2·f2`; the weights must sum to one.
pub fn weighted_combine(tape: &Tape, f1: Var, f2: Var, w1: Var, w2: Var) -> Result<Var> {
    if tape.shape(f1) != tape.shape(f2) {
        return Err(Error::Dimension(format!(
            "cannot combine {:?} with {:?}",
            tape.shape(f1),
            tape.shape(f2)
        )));
    }
    let (a, b) = (tape.item(w1)?, tape.item(w2)?);
    if ((a + b) - 1.0).abs() > WEIGHT_SUM_TOL {
        return Err(Error::Contract(format!("fusion weights {a} and {b} do not sum to 1")));
    }
    let x = tape.scalar_mul(w1, f1)?;
    let y = tape.scalar_mul(w2, f2)?;
    tape.add(x, y)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FuserConfig {
    /// Width of each incoming branch feature.
    pub branch_dims: Vec<usize>,
    pub proj_dim: usize,
    pub hidden: usize,
    pub num_candidates: usize,
}

impl FuserConfig {
    pub fn new(branch_dims: Vec<usize>) -> Self {
        Self {
            branch_dims,
            proj_dim: 40,
            hidden: 64,
            num_candidates: 20,
        }
    }
}

/// Per-branch projection to 40, concatenation, a 64-unit Tanh layer and 20 scores.
#[derive(Clone, Debug)]
pub struct MlpFuser {
    pub config: FuserConfig,
    pub projections: Vec<Linear>,
    pub hidden: Linear,
    pub out: Linear,
}

impl MlpFuser {
    pub fn new<R: Rng + ?Sized>(
        config: FuserConfig,
        prefix: &str,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        if config.branch_dims.is_empty() {
            return Err(Error::Config("fuser needs at least one branch".into()));
        }
        let mut projections = Vec::new();
        for (i, &d) in config.branch_dims.iter().enumerate() {
            projections.push(Linear::new(
                store,
                &format!("{prefix}.proj{i}"),
                d,
                config.proj_dim,
                rng,
            )?);
        }
        let width = config.proj_dim * config.branch_dims.len();
        let hidden = Linear::new(store, &format!("{prefix}.hidden"), width, config.hidden, rng)?;
        let out = Linear::new(
            store,
            &format!("{prefix}.out"),
            config.hidden,
            config.num_candidates,
            rng,
        )?;
        Ok(Self {
            config,
            projections,
            hidden,
            out,
        })
    }

    /// Raw candidate scores (`1 × num_candidates`) from one pooled vector per branch.
    pub fn scores(&self, tape: &Tape, branches: &[Var]) -> Result<Var> {
        if branches.len() != self.projections.len() {
            return Err(Error::Dimension(format!(
                "fuser has {} branches, got {} features",
                self.projections.len(),
                branches.len()
            )));
        }
        let mut parts = Vec::with_capacity(branches.len());
        for (proj, &f) in self.projections.iter().zip(branches) {
            let n = tape.shape(f).iter().product::<usize>();
            if n != proj.fan_in {
                return Err(Error::Dimension(format!(
                    "branch feature of {n} values for a projection from {}",
                    proj.fan_in
                )));
            }
            let row = tape.reshape(f, vec![1, n])?;
            parts.push(proj.forward(tape, row)?);
        }
        let x = if parts.len() == 1 { parts[0] } else { tape.concat_cols(&parts)? };
        let h = self.hidden.forward(tape, x)?;
        let h = tape.activation(h, Activation::Tanh)?;
        self.out.forward(tape, h)
    }
}

/// Two-branch convenience over [`MlpFuser::scores`].
pub fn mlp_scores(tape: &Tape, f1: Var, f2: Var, head: &MlpFuser) -> Result<Var> {
    head.scores(tape, &[f1, f2])
}

/// Index of the best valid score; ties go to the lowest index.
pub fn select_candidate(scores: &[f64], valid: &[bool]) -> Result<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if !valid.get(i).copied().unwrap_or(false) {
            continue;
        }
        if best.is_none_or(|b| s > scores[b]) {
            best = Some(i);
        }
    }
    best.ok_or_else(|| Error::Contract("no valid candidate to select".into()))
}

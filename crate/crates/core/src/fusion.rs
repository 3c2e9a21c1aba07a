//! Combining the two modality encoders: late combiners over pooled
//! embeddings and mid-fusion exchange of global summaries between layers.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::gnn::{gated_attention_pool, mean_pool, AttentionVars, NodeState};
use crate::params::{glorot, Bound, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Modality A alone.
    UnimodalA,
    /// Modality B alone.
    UnimodalB,
    LateConcat,
    LateAdd,
    LateHadamard,
    Kronecker,
    Gimp,
    Gaimp,
}

impl Strategy {
    pub const ALL: [Strategy; 8] = [
        Strategy::UnimodalA,
        Strategy::UnimodalB,
        Strategy::LateConcat,
        Strategy::LateAdd,
        Strategy::LateHadamard,
        Strategy::Kronecker,
        Strategy::Gimp,
        Strategy::Gaimp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::UnimodalA => "unimodal_a",
            Strategy::UnimodalB => "unimodal_b",
            Strategy::LateConcat => "late_concat",
            Strategy::LateAdd => "late_add",
            Strategy::LateHadamard => "late_hadamard",
            Strategy::Kronecker => "kronecker",
            Strategy::Gimp => "gimp",
            Strategy::Gaimp => "gaimp",
        }
    }

    pub fn is_mid(self) -> bool {
        matches!(self, Strategy::Gimp | Strategy::Gaimp)
    }

    pub fn uses_a(self) -> bool {
        self != Strategy::UnimodalB
    }

    pub fn uses_b(self) -> bool {
        self != Strategy::UnimodalA
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == norm)
            .ok_or_else(|| Error::Config(format!("unknown fusion strategy `{s}`")))
    }
}

pub fn fuse_concat(tape: &mut Tape, h: Var, t: Var) -> Result<Var> {
    Ok(tape.concat_cols(&[h, t])?)
}

/// `h W_H + t W_T` for row vectors.
pub fn fuse_add(tape: &mut Tape, h: Var, t: Var, w_h: Var, w_t: Var) -> Result<Var> {
    let ph = tape.matmul(h, w_h)?;
    let pt = tape.matmul(t, w_t)?;
    Ok(tape.add(ph, pt)?)
}

/// `(h W_H) ∘ (t W_T)` for row vectors.
pub fn fuse_hadamard(tape: &mut Tape, h: Var, t: Var, w_h: Var, w_t: Var) -> Result<Var> {
    let ph = tape.matmul(h, w_h)?;
    let pt = tape.matmul(t, w_t)?;
    Ok(tape.mul(ph, pt)?)
}

/// `[h;1] ⊗ [t;1]` flattened row-major (index `i·(d_t+1) + j`) for `1×d`
/// row vectors.
pub fn kronecker_with_ones(tape: &mut Tape, h: Var, t: Var) -> Result<Var> {
    let one = tape.constant(Tensor::scalar(1.0));
    let h1 = tape.concat_cols(&[h, one])?;
    let t1 = tape.concat_cols(&[t, one])?;
    let (dh, dt) = (tape.value(h1).cols(), tape.value(t1).cols());
    let col = tape.transpose(h1)?;
    let outer = tape.matmul(col, t1)?;
    Ok(tape.reshape(outer, 1, dh * dt)?)
}

/// Gated projection parameters of the Kronecker combiner.
#[derive(Debug, Clone, Copy)]
pub struct KroneckerVars {
    pub w_h: Var,
    pub b_h: Var,
    pub w_t: Var,
    pub b_t: Var,
    /// Gate weights: over `[h, t]`, or over the flattened outer product of
    /// the two projections when the bilinear gate is enabled.
    pub g_h: Var,
    pub gb_h: Var,
    pub g_t: Var,
    pub gb_t: Var,
    pub bilinear: bool,
}

impl KroneckerVars {
    pub fn bind(b: &Bound, bilinear: bool) -> Result<Self> {
        Ok(KroneckerVars {
            w_h: b.var("fusion.kron.w_h")?,
            b_h: b.var("fusion.kron.b_h")?,
            w_t: b.var("fusion.kron.w_t")?,
            b_t: b.var("fusion.kron.b_t")?,
            g_h: b.var("fusion.kron.g_h")?,
            gb_h: b.var("fusion.kron.gb_h")?,
            g_t: b.var("fusion.kron.g_t")?,
            gb_t: b.var("fusion.kron.gb_t")?,
            bilinear,
        })
    }
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    Ok(tape.add(y, b)?)
}

/// Gated attention fusion: `h' = σ(gate) ∘ ReLU(W_H h)`, likewise `t'`,
/// then `[h';1] ⊗ [t';1]`.
pub fn fuse_kronecker_gated(tape: &mut Tape, h: Var, t: Var, p: &KroneckerVars) -> Result<Var> {
    let ph = linear(tape, h, p.w_h, p.b_h)?;
    let ph = tape.relu(ph)?;
    let pt = linear(tape, t, p.w_t, p.b_t)?;
    let pt = tape.relu(pt)?;
    let gate_in = if p.bilinear {
        let k = tape.value(ph).cols();
        let col = tape.transpose(ph)?;
        let outer = tape.matmul(col, pt)?;
        tape.reshape(outer, 1, k * k)?
    } else {
        tape.concat_cols(&[h, t])?
    };
    let gh = linear(tape, gate_in, p.g_h, p.gb_h)?;
    let gh = tape.sigmoid(gh)?;
    let gt = linear(tape, gate_in, p.g_t, p.gb_t)?;
    let gt = tape.sigmoid(gt)?;
    let hp = tape.mul(gh, ph)?;
    let tp = tape.mul(gt, pt)?;
    kronecker_with_ones(tape, hp, tp)
}

pub fn init_kronecker<R: Rng + ?Sized>(
    store: &mut ParamStore,
    d_h: usize,
    d_t: usize,
    k: usize,
    bilinear: bool,
    rng: &mut R,
) {
    store.insert("fusion.kron.w_h", glorot(rng, d_h, k));
    store.insert("fusion.kron.b_h", Tensor::zeros(&[1, k]));
    store.insert("fusion.kron.w_t", glorot(rng, d_t, k));
    store.insert("fusion.kron.b_t", Tensor::zeros(&[1, k]));
    let gate_in = if bilinear { k * k } else { d_h + d_t };
    store.insert("fusion.kron.g_h", glorot(rng, gate_in, k));
    store.insert("fusion.kron.gb_h", Tensor::zeros(&[1, k]));
    store.insert("fusion.kron.g_t", glorot(rng, gate_in, k));
    store.insert("fusion.kron.gb_t", Tensor::zeros(&[1, k]));
}

/// Cross-modal exchange parameters for one layer. `t_to_h` maps a summary
/// of modality B into modality A's embedding space and vice versa.
#[derive(Debug, Clone, Copy)]
pub struct CrossVars {
    pub t_to_h: Var,
    pub h_to_t: Var,
}

impl CrossVars {
    pub fn bind(b: &Bound, layer: usize) -> Result<Self> {
        Ok(CrossVars {
            t_to_h: b.var(&format!("fusion.cross{layer}.t_to_h"))?,
            h_to_t: b.var(&format!("fusion.cross{layer}.h_to_t"))?,
        })
    }
}

pub fn init_cross<R: Rng + ?Sized>(store: &mut ParamStore, layer: usize, d_h: usize, d_t: usize, rng: &mut R) {
    store.insert(format!("fusion.cross{layer}.t_to_h"), glorot(rng, d_t, d_h));
    store.insert(format!("fusion.cross{layer}.h_to_t"), glorot(rng, d_h, d_t));
}

/// Dropout settings for the injected projections.
pub struct InjectDropout<'r, R: Rng + ?Sized> {
    pub p: f64,
    pub rng: Option<&'r mut R>,
}

impl<R: Rng + ?Sized> InjectDropout<'_, R> {
    pub fn none() -> Self {
        InjectDropout { p: 0.0, rng: None }
    }

    fn apply(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self.rng.as_deref_mut() {
            Some(rng) => Ok(tape.dropout(x, self.p, true, rng)?),
            None => Ok(x),
        }
    }
}

/// Adds `ReLU(summary_t W_{T→H})` to every node of `hs` and
/// `ReLU(summary_h W_{H→T})` to every node of `ts`. Both summaries are
/// taken before either update.
fn inject<R: Rng + ?Sized>(
    tape: &mut Tape,
    hs: &NodeState,
    ts: &NodeState,
    sum_h: Var,
    sum_t: Var,
    c: &CrossVars,
    drop: &mut InjectDropout<'_, R>,
) -> Result<(NodeState, NodeState)> {
    let to_h = tape.matmul(sum_t, c.t_to_h)?;
    let to_h = tape.relu(to_h)?;
    let to_h = drop.apply(tape, to_h)?;
    let to_t = tape.matmul(sum_h, c.h_to_t)?;
    let to_t = tape.relu(to_t)?;
    let to_t = drop.apply(tape, to_t)?;
    let mut h_new = hs.clone();
    h_new.h = tape.add(hs.h, to_h)?;
    let mut t_new = ts.clone();
    t_new.h = tape.add(ts.h, to_t)?;
    Ok((h_new, t_new))
}

/// Inter-message passing with mean summaries.
pub fn gimp_step<R: Rng + ?Sized>(
    tape: &mut Tape,
    hs: &NodeState,
    ts: &NodeState,
    c: &CrossVars,
    drop: &mut InjectDropout<'_, R>,
) -> Result<(NodeState, NodeState)> {
    let sum_h = mean_pool(tape, hs)?;
    let sum_t = mean_pool(tape, ts)?;
    inject(tape, hs, ts, sum_h, sum_t, c, drop)
}

/// Inter-message passing with gated-attention summaries.
#[allow(clippy::too_many_arguments)]
pub fn gaimp_step<R: Rng + ?Sized>(
    tape: &mut Tape,
    hs: &NodeState,
    ts: &NodeState,
    att_h: &AttentionVars,
    att_t: &AttentionVars,
    c: &CrossVars,
    drop: &mut InjectDropout<'_, R>,
) -> Result<(NodeState, NodeState)> {
    let sum_h = gated_attention_pool(tape, hs, att_h)?;
    let sum_t = gated_attention_pool(tape, ts, att_t)?;
    inject(tape, hs, ts, sum_h, sum_t, c, drop)
}

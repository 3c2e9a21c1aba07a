//! Feed-forward head mapping a fused representation to the latent score.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{glorot, Bound, ParamStore};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadSpec {
    pub d_in: usize,
    pub hidden: usize,
    /// Number of linear layers, the last one producing the scalar score.
    pub layers: usize,
    pub dropout: f64,
    pub batch_norm: bool,
}

impl HeadSpec {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden == 0 || self.d_in == 0 {
            return Err(Error::Config("head needs at least one layer and positive widths".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("head dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Trainable parameters go to `params`; batch-norm running statistics to
/// `buffers`.
pub fn init_head<R: Rng + ?Sized>(
    params: &mut ParamStore,
    buffers: &mut ParamStore,
    spec: &HeadSpec,
    rng: &mut R,
) {
    let mut d = spec.d_in;
    for l in 0..spec.layers - 1 {
        params.insert(format!("head.lin{l}.w"), glorot(rng, d, spec.hidden));
        params.insert(format!("head.lin{l}.b"), Tensor::zeros(&[1, spec.hidden]));
        if spec.batch_norm {
            params.insert(format!("head.bn{l}.gamma"), Tensor::full(&[1, spec.hidden], 1.0));
            params.insert(format!("head.bn{l}.beta"), Tensor::zeros(&[1, spec.hidden]));
            buffers.insert(format!("head.bn{l}.mean"), Tensor::zeros(&[1, spec.hidden]));
            buffers.insert(format!("head.bn{l}.var"), Tensor::full(&[1, spec.hidden], 1.0));
        }
        d = spec.hidden;
    }
    params.insert("head.out.w", glorot(rng, d, 1));
    params.insert("head.out.b", Tensor::zeros(&[1, 1]));
}

/// Batch statistics observed in one training forward pass.
#[derive(Debug, Clone)]
pub struct BnObservation {
    pub layer: usize,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub enum HeadMode<'a, R: Rng + ?Sized> {
    Train { rng: &'a mut R, observed: Vec<BnObservation> },
    Eval { buffers: &'a ParamStore },
}

/// `B×d_in → B×1`. Each hidden layer is linear, batch norm (optional),
/// ReLU, dropout.
pub fn head_forward<R: Rng + ?Sized>(
    tape: &mut Tape,
    b: &Bound,
    spec: &HeadSpec,
    x: Var,
    mode: &mut HeadMode<'_, R>,
) -> Result<Var> {
    let mut h = x;
    for l in 0..spec.layers - 1 {
        let w = b.var(&format!("head.lin{l}.w"))?;
        let bias = b.var(&format!("head.lin{l}.b"))?;
        let y = tape.matmul(h, w)?;
        let mut y = tape.add(y, bias)?;
        if spec.batch_norm {
            let gamma = b.var(&format!("head.bn{l}.gamma"))?;
            let beta = b.var(&format!("head.bn{l}.beta"))?;
            y = match mode {
                HeadMode::Train { observed, .. } => {
                    let (out, mean, var) = tape.batch_norm(y, gamma, beta, BN_EPS)?;
                    observed.push(BnObservation { layer: l, mean, var });
                    out
                }
                HeadMode::Eval { buffers } => {
                    let mean = buffers.require(&format!("head.bn{l}.mean"))?;
                    let var = buffers.require(&format!("head.bn{l}.var"))?;
                    let inv_std = var.map(|v| 1.0 / (v + BN_EPS).sqrt());
                    let mean = tape.constant(mean.clone());
                    let inv_std = tape.constant(inv_std);
                    let c = tape.sub(y, mean)?;
                    let n = tape.mul(c, inv_std)?;
                    let s = tape.mul(n, gamma)?;
                    tape.add(s, beta)?
                }
            };
        }
        let a = tape.relu(y)?;
        h = match mode {
            HeadMode::Train { rng, .. } => tape.dropout(a, spec.dropout, true, *rng)?,
            HeadMode::Eval { .. } => a,
        };
    }
    let w = b.var("head.out.w")?;
    let bias = b.var("head.out.b")?;
    let y = tape.matmul(h, w)?;
    Ok(tape.add(y, bias)?)
}

/// Exponential moving average update of running statistics. The variance
/// is stored unbiased (`n/(n−1)` correction) like common frameworks.
pub fn update_running_stats(
    buffers: &mut ParamStore,
    observed: &[BnObservation],
    batch: usize,
    momentum: f64,
) -> Result<()> {
    let corr = if batch > 1 { batch as f64 / (batch as f64 - 1.0) } else { 1.0 };
    for o in observed {
        let m = buffers
            .get_mut(&format!("head.bn{}.mean", o.layer))
            .ok_or_else(|| Error::Contract(format!("missing running mean for layer {}", o.layer)))?;
        for (r, &v) in m.data_mut().iter_mut().zip(&o.mean) {
            *r = (1.0 - momentum) * *r + momentum * v;
        }
        let s = buffers
            .get_mut(&format!("head.bn{}.var", o.layer))
            .ok_or_else(|| Error::Contract(format!("missing running variance for layer {}", o.layer)))?;
        for (r, &v) in s.data_mut().iter_mut().zip(&o.var) {
            *r = (1.0 - momentum) * *r + momentum * v * corr;
        }
    }
    Ok(())
}

//! Per-modality graph encoder: min-max input normalization, neighbourhood-sum
//! graph convolution, self-attention pooling and graph readouts.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph::ModalGraph;
use crate::params::{glorot, Bound, ParamStore};
use crate::tensor::Tensor;

/// Per-feature min-max scaling fitted on training graphs.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    pub clamp: bool,
}

impl Normalizer {
    /// Column-wise minimum and maximum over every node of every graph.
    pub fn fit<'a>(features: impl IntoIterator<Item = &'a Tensor>, clamp: bool) -> Result<Self> {
        let mut min: Vec<f64> = Vec::new();
        let mut max: Vec<f64> = Vec::new();
        let mut seen = false;
        for x in features {
            if !seen {
                min = vec![f64::INFINITY; x.cols()];
                max = vec![f64::NEG_INFINITY; x.cols()];
                seen = true;
            }
            if x.cols() != min.len() {
                return Err(Error::Contract(format!(
                    "normalizer fit: feature width {} differs from {}",
                    x.cols(),
                    min.len()
                )));
            }
            for r in 0..x.rows() {
                for (j, &v) in x.row_slice(r).iter().enumerate() {
                    min[j] = min[j].min(v);
                    max[j] = max[j].max(v);
                }
            }
        }
        if !seen || min.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("normalizer fit needs at least one node".into()));
        }
        Ok(Normalizer { min, max, clamp })
    }

    /// `(x − min) / (max − min)`; constant features map to 0. Values outside
    /// the fitted range pass through unless `clamp` is set.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.min.len() {
            return Err(Error::Contract(format!(
                "normalizer fitted on {} features, got {}",
                self.min.len(),
                x.cols()
            )));
        }
        let d = self.min.len();
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let j = i % d;
            let range = self.max[j] - self.min[j];
            *v = if range > 0.0 { (*v - self.min[j]) / range } else { 0.0 };
            if self.clamp {
                *v = v.clamp(0.0, 1.0);
            }
        }
        Ok(out)
    }
}

/// Normalized node features plus edge endpoints as index vectors.
#[derive(Debug, Clone)]
pub struct PreparedGraph {
    pub x: Tensor,
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
}

impl PreparedGraph {
    pub fn new(g: &ModalGraph, norm: &Normalizer, symmetric: bool) -> Result<Self> {
        let x = norm.apply(&g.features)?;
        let mut edges: Vec<(usize, usize)> = g.edges.iter().map(|&(s, d)| (s as usize, d as usize)).collect();
        if symmetric {
            edges.extend(g.edges.iter().map(|&(s, d)| (d as usize, s as usize)));
            edges.sort_unstable();
            edges.dedup();
        }
        let (src, dst) = edges.into_iter().unzip();
        Ok(PreparedGraph { x, src, dst })
    }

    pub fn num_nodes(&self) -> usize {
        self.x.rows()
    }
}

/// Node embeddings of the surviving nodes plus the induced edge list, in
/// local (row) indices.
#[derive(Debug, Clone)]
pub struct NodeState {
    pub h: Var,
    /// Original node ids of the rows of `h`, strictly increasing.
    pub active: Vec<usize>,
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
}

impl NodeState {
    pub fn input(tape: &mut Tape, g: &PreparedGraph) -> Self {
        NodeState {
            h: tape.constant(g.x.clone()),
            active: (0..g.num_nodes()).collect(),
            src: g.src.clone(),
            dst: g.dst.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.active.len()
    }

    pub fn is_empty(&self) -> bool {
        self.active.is_empty()
    }

    fn with_h(&self, h: Var) -> Self {
        NodeState {
            h,
            active: self.active.clone(),
            src: self.src.clone(),
            dst: self.dst.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConvVars {
    pub w_self: Var,
    pub w_neigh: Var,
    pub bias: Var,
}

impl ConvVars {
    pub fn bind(b: &Bound, prefix: &str) -> Result<Self> {
        Ok(ConvVars {
            w_self: b.var(&format!("{prefix}.w_self"))?,
            w_neigh: b.var(&format!("{prefix}.w_neigh"))?,
            bias: b.var(&format!("{prefix}.b"))?,
        })
    }
}

pub fn init_conv<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, d_in: usize, d_out: usize, rng: &mut R) {
    store.insert(format!("{prefix}.w_self"), glorot(rng, d_in, d_out));
    store.insert(format!("{prefix}.w_neigh"), glorot(rng, d_in, d_out));
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[1, d_out]));
}

/// `W_self h_v + W_neigh Σ_{u→v} h_u + b` without activation.
pub fn conv_linear(tape: &mut Tape, st: &NodeState, p: &ConvVars) -> Result<Var> {
    let agg = tape.scatter_add(st.h, &st.src, &st.dst, st.len())?;
    let own = tape.matmul(st.h, p.w_self)?;
    let nb = tape.matmul(agg, p.w_neigh)?;
    let sum = tape.add(own, nb)?;
    Ok(tape.add(sum, p.bias)?)
}

/// Graph convolution followed by ReLU; messages flow along `src → dst`.
pub fn graph_conv(tape: &mut Tape, st: &NodeState, p: &ConvVars) -> Result<NodeState> {
    let lin = conv_linear(tape, st, p)?;
    let h = tape.relu(lin)?;
    Ok(st.with_h(h))
}

/// Indices of the `⌈ratio·n⌉` highest scores (ties to the lower index),
/// returned in ascending index order.
pub fn top_k_indices(scores: &[f64], ratio: f64) -> Vec<usize> {
    let n = scores.len();
    let keep = ((ratio * n as f64 - 1e-9).ceil() as usize).clamp(1.min(n), n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(keep);
    order.sort_unstable();
    order
}

/// Self-attention pooling: score nodes with a one-output graph convolution,
/// keep the top fraction, scale survivors by `tanh(score)` and keep the
/// induced subgraph.
pub fn sagpool(tape: &mut Tape, st: &NodeState, p: &ConvVars, ratio: f64) -> Result<NodeState> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Contract(format!("pool ratio {ratio} outside (0, 1]")));
    }
    let score = conv_linear(tape, st, p)?;
    let keep = top_k_indices(tape.value(score).data(), ratio);
    let mut local = vec![usize::MAX; st.len()];
    for (new, &old) in keep.iter().enumerate() {
        local[old] = new;
    }
    let h_kept = tape.gather_rows(st.h, &keep)?;
    let s_kept = tape.gather_rows(score, &keep)?;
    let gate = tape.tanh(s_kept)?;
    let h = tape.mul(h_kept, gate)?;
    let (mut src, mut dst) = (Vec::new(), Vec::new());
    for (&s, &d) in st.src.iter().zip(&st.dst) {
        if local[s] != usize::MAX && local[d] != usize::MAX {
            src.push(local[s]);
            dst.push(local[d]);
        }
    }
    Ok(NodeState {
        h,
        active: keep.iter().map(|&i| st.active[i]).collect(),
        src,
        dst,
    })
}

/// Column mean of the node embeddings (`1×d`).
pub fn mean_pool(tape: &mut Tape, st: &NodeState) -> Result<Var> {
    if st.is_empty() {
        return Err(Error::Contract("mean pool over an empty graph".into()));
    }
    Ok(tape.mean_rows(st.h)?)
}

/// Gate network `d→1` (sigmoid) and projection `d→d` (ReLU).
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl AttentionVars {
    pub fn bind(b: &Bound, prefix: &str) -> Result<Self> {
        Ok(AttentionVars {
            w1: b.var(&format!("{prefix}.w1"))?,
            b1: b.var(&format!("{prefix}.b1"))?,
            w2: b.var(&format!("{prefix}.w2"))?,
            b2: b.var(&format!("{prefix}.b2"))?,
        })
    }
}

pub fn init_attention<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut R) {
    store.insert(format!("{prefix}.w1"), glorot(rng, d, 1));
    store.insert(format!("{prefix}.b1"), Tensor::zeros(&[1, 1]));
    store.insert(format!("{prefix}.w2"), glorot(rng, d, d));
    store.insert(format!("{prefix}.b2"), Tensor::zeros(&[1, d]));
}

/// `tanh(Σ_v σ(f1(h_v)) · ReLU(f2(h_v)))` as a `1×d` row.
pub fn gated_attention_pool(tape: &mut Tape, st: &NodeState, a: &AttentionVars) -> Result<Var> {
    if st.is_empty() {
        return Err(Error::Contract("attention pool over an empty graph".into()));
    }
    let g = tape.matmul(st.h, a.w1)?;
    let g = tape.add(g, a.b1)?;
    let gate = tape.sigmoid(g)?;
    let p = tape.matmul(st.h, a.w2)?;
    let p = tape.add(p, a.b2)?;
    let proj = tape.relu(p)?;
    let weighted = tape.mul(proj, gate)?;
    let sum = tape.sum_rows(weighted)?;
    Ok(tape.tanh(sum)?)
}

/// Encoder hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderSpec {
    pub d_in: usize,
    pub hidden: usize,
    pub layers: usize,
    pub pool_ratio: f64,
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.layers) {
            return Err(Error::Config(format!("conv layers must be 1 or 2, got {}", self.layers)));
        }
        if self.hidden == 0 || self.d_in == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        if !(self.pool_ratio > 0.0 && self.pool_ratio <= 1.0) {
            return Err(Error::Config(format!("pool ratio {} outside (0, 1]", self.pool_ratio)));
        }
        Ok(())
    }

    /// Width of the jumping-knowledge output.
    pub fn output_dim(&self) -> usize {
        self.layers * self.hidden
    }
}

pub fn init_encoder<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, spec: &EncoderSpec, rng: &mut R) {
    init_conv(store, &format!("{prefix}.conv0"), spec.d_in, spec.hidden, rng);
    for l in 1..spec.layers {
        init_conv(store, &format!("{prefix}.pool{}", l - 1), spec.hidden, 1, rng);
        init_conv(store, &format!("{prefix}.conv{l}"), spec.hidden, spec.hidden, rng);
    }
}

/// Bound encoder parameters: one convolution per layer and one pooling
/// scorer between consecutive layers.
#[derive(Debug, Clone)]
pub struct EncoderVars {
    pub convs: Vec<ConvVars>,
    pub pools: Vec<ConvVars>,
    pub pool_ratio: f64,
}

impl EncoderVars {
    pub fn bind(b: &Bound, prefix: &str, spec: &EncoderSpec) -> Result<Self> {
        let convs = (0..spec.layers)
            .map(|l| ConvVars::bind(b, &format!("{prefix}.conv{l}")))
            .collect::<Result<_>>()?;
        let pools = (1..spec.layers)
            .map(|l| ConvVars::bind(b, &format!("{prefix}.pool{}", l - 1)))
            .collect::<Result<_>>()?;
        Ok(EncoderVars {
            convs,
            pools,
            pool_ratio: spec.pool_ratio,
        })
    }

    pub fn layers(&self) -> usize {
        self.convs.len()
    }

    /// Layer `l` of message passing: pooling (for `l > 0`) then convolution.
    pub fn step(&self, tape: &mut Tape, st: &NodeState, l: usize) -> Result<NodeState> {
        let pooled;
        let st = if l > 0 {
            pooled = sagpool(tape, st, &self.pools[l - 1], self.pool_ratio)?;
            &pooled
        } else {
            st
        };
        graph_conv(tape, st, &self.convs[l])
    }
}

pub enum Readout<'a> {
    Mean,
    /// One attention block per layer.
    Attention(&'a [AttentionVars]),
}

impl Readout<'_> {
    pub fn apply(&self, tape: &mut Tape, st: &NodeState, layer: usize) -> Result<Var> {
        match self {
            Readout::Mean => mean_pool(tape, st),
            Readout::Attention(a) => gated_attention_pool(tape, st, &a[layer]),
        }
    }
}

/// Runs every layer and concatenates the per-layer readouts (jumping
/// knowledge). Also returns the node state after each layer.
pub fn encode(
    tape: &mut Tape,
    g: &PreparedGraph,
    enc: &EncoderVars,
    readout: &Readout<'_>,
) -> Result<(Var, Vec<NodeState>)> {
    let mut st = NodeState::input(tape, g);
    let mut states = Vec::with_capacity(enc.layers());
    let mut outs = Vec::with_capacity(enc.layers());
    for l in 0..enc.layers() {
        st = enc.step(tape, &st, l)?;
        outs.push(readout.apply(tape, &st, l)?);
        states.push(st.clone());
    }
    Ok((tape.concat_cols(&outs)?, states))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn state(tape: &mut Tape, x: Tensor, edges: &[(usize, usize)]) -> NodeState {
        let n = x.rows();
        NodeState {
            h: tape.constant(x),
            active: (0..n).collect(),
            src: edges.iter().map(|e| e.0).collect(),
            dst: edges.iter().map(|e| e.1).collect(),
        }
    }

    fn conv(tape: &mut Tape, ws: Tensor, wn: Tensor, b: Tensor) -> ConvVars {
        ConvVars {
            w_self: tape.constant(ws),
            w_neigh: tape.constant(wn),
            bias: tape.constant(b),
        }
    }

    #[test]
    fn normalizer_ranges() {
        let a = Tensor::from_rows(&[vec![2.0, 5.0], vec![4.0, 5.0]]).unwrap();
        let n = Normalizer::fit([&a], false).unwrap();
        let t = Tensor::from_rows(&[vec![3.0, 5.0], vec![7.0, 1.0]]).unwrap();
        assert_eq!(n.apply(&t).unwrap().data(), &[0.5, 0.0, 2.5, 0.0]);
        let c = Normalizer { clamp: true, ..n };
        assert_eq!(c.apply(&t).unwrap().data(), &[0.5, 0.0, 1.0, 0.0]);
        assert!(matches!(c.apply(&Tensor::zeros(&[1, 3])), Err(Error::Contract(_))));
    }

    #[test]
    fn isolated_node_conv_is_relu() {
        let mut tape = Tape::new();
        let st = state(&mut tape, Tensor::row(&[1.0, -2.0]), &[]);
        let p = conv(&mut tape, Tensor::identity(2), Tensor::identity(2), Tensor::zeros(&[1, 2]));
        let out = graph_conv(&mut tape, &st, &p).unwrap();
        assert_eq!(tape.value(out.h).data(), &[1.0, 0.0]);
    }

    #[test]
    fn two_cycle_doubles() {
        let mut tape = Tape::new();
        let x = Tensor::from_rows(&[vec![0.5, 1.5], vec![0.5, 1.5]]).unwrap();
        let st = state(&mut tape, x, &[(0, 1), (1, 0)]);
        let p = conv(&mut tape, Tensor::identity(2), Tensor::identity(2), Tensor::zeros(&[1, 2]));
        let out = conv_linear(&mut tape, &st, &p).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 3.0, 1.0, 3.0]);
    }

    #[test]
    fn messages_flow_src_to_dst() {
        let mut tape = Tape::new();
        let st = state(&mut tape, Tensor::column(&[1.0, 10.0]), &[(0, 1)]);
        let p = conv(&mut tape, Tensor::zeros(&[1, 1]), Tensor::identity(1), Tensor::zeros(&[1, 1]));
        let out = conv_linear(&mut tape, &st, &p).unwrap();
        assert_eq!(tape.value(out).data(), &[0.0, 1.0]);
    }

    #[test]
    fn top_k_definition() {
        assert_eq!(top_k_indices(&[3.0, 1.0, 2.0, 0.0], 0.5), vec![0, 2]);
        assert_eq!(top_k_indices(&[1.0, 1.0, 1.0], 0.5), vec![0, 1]);
        assert_eq!(top_k_indices(&[0.2; 10], 0.3), vec![0, 1, 2]);
        assert_eq!(top_k_indices(&[5.0], 0.1), vec![0]);
    }

    #[test]
    fn sagpool_keeps_induced_subgraph() {
        let mut tape = Tape::new();
        // Score = own feature (w_self = 1): nodes 0 and 2 survive.
        let x = Tensor::column(&[3.0, 1.0, 2.0, 0.0]);
        let st = state(&mut tape, x, &[(0, 1), (0, 2), (2, 0), (3, 2)]);
        let p = conv(&mut tape, Tensor::identity(1), Tensor::zeros(&[1, 1]), Tensor::zeros(&[1, 1]));
        let out = sagpool(&mut tape, &st, &p, 0.5).unwrap();
        assert_eq!(out.active, vec![0, 2]);
        assert_eq!((out.src.clone(), out.dst.clone()), (vec![0, 1], vec![1, 0]));
        let h = tape.value(out.h).data().to_vec();
        assert_eq!(h, vec![3.0 * 3f64.tanh(), 2.0 * 2f64.tanh()]);
    }

    #[test]
    fn pools() {
        let mut tape = Tape::new();
        let st = state(&mut tape, Tensor::from_rows(&[vec![1.0, -2.0], vec![-1.0, 2.0]]).unwrap(), &[]);
        let m = mean_pool(&mut tape, &st).unwrap();
        assert_eq!(tape.value(m).data(), &[0.0, 0.0]);

        let st = state(&mut tape, Tensor::row(&[0.4, 1.2]), &[]);
        let a = AttentionVars {
            w1: tape.constant(Tensor::zeros(&[2, 1])),
            b1: tape.constant(Tensor::zeros(&[1, 1])),
            w2: tape.constant(Tensor::identity(2)),
            b2: tape.constant(Tensor::zeros(&[1, 2])),
        };
        let out = gated_attention_pool(&mut tape, &st, &a).unwrap();
        assert_eq!(tape.value(out).data(), &[0.2f64.tanh(), 0.6f64.tanh()]);

        let empty = NodeState {
            h: st.h,
            active: vec![],
            src: vec![],
            dst: vec![],
        };
        assert!(matches!(mean_pool(&mut tape, &empty), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_input_zero_embedding() {
        let spec = EncoderSpec {
            d_in: 3,
            hidden: 4,
            layers: 2,
            pool_ratio: 0.5,
        };
        let mut store = ParamStore::new();
        init_encoder(&mut store, "e", &spec, &mut ChaCha8Rng::seed_from_u64(1));
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let enc = EncoderVars::bind(&b, "e", &spec).unwrap();
        let g = PreparedGraph {
            x: Tensor::zeros(&[5, 3]),
            src: vec![0, 1, 2, 3, 4],
            dst: vec![1, 2, 3, 4, 0],
        };
        let (z, states) = encode(&mut tape, &g, &enc, &Readout::Mean).unwrap();
        assert_eq!(tape.value(z).shape(), &[1, 8]);
        assert!(tape.value(z).data().iter().all(|&v| v == 0.0));
        assert_eq!(states[1].len(), 3);
    }
}

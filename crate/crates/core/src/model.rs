//! Full model: two encoders, a fusion strategy, the feed-forward head and the
//! cumulative-link output, plus checkpoint conversion.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::format::checkpoint::Checkpoint;
use crate::fusion::{
    fuse_add, fuse_concat, fuse_hadamard, fuse_kronecker_gated, gaimp_step, gimp_step, init_cross, init_kronecker,
    CrossVars, InjectDropout, KroneckerVars, Strategy,
};
use crate::gnn::{
    encode, init_attention, init_encoder, mean_pool, AttentionVars, EncoderSpec, EncoderVars, NodeState, Normalizer,
    PreparedGraph, Readout,
};
use crate::graph::{Endpoint, Modality, PairedSample};
use crate::head::{head_forward, init_head, update_running_stats, BnObservation, HeadMode, HeadSpec};
use crate::ordinal::{self, RaterIndex};
use crate::params::{glorot, Bound, ParamStore};
use crate::tensor::Tensor;

pub const RAW_THRESHOLDS: &str = "ordinal.raw_thresholds";
pub const RATER_BIAS: &str = "ordinal.rater_bias";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub strategy: Strategy,
    /// Kronecker only: gate from a bilinear score of the two projections
    /// instead of a linear map over `[h, t]`.
    pub bilinear_gate: bool,
    pub hidden: usize,
    pub conv_layers: usize,
    pub pool_ratio: f64,
    /// Add the reverse of every kNN edge.
    pub symmetric_edges: bool,
    pub clamp_normalizer: bool,
    /// Projection width for late addition / Hadamard; defaults to `hidden`.
    pub fusion_dim: Option<usize>,
    /// Width of each gated projection before the Kronecker product.
    pub kronecker_dim: usize,
    pub head_layers: Option<usize>,
    pub head_hidden: Option<usize>,
    pub head_dropout: Option<f64>,
    /// Dropout on the injected cross-modal projection (mid fusion).
    pub mid_dropout: Option<f64>,
    pub bn_momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            strategy: Strategy::LateConcat,
            bilinear_gate: false,
            hidden: 128,
            conv_layers: 2,
            pool_ratio: 0.5,
            symmetric_edges: false,
            clamp_normalizer: false,
            fusion_dim: None,
            kronecker_dim: 32,
            head_layers: None,
            head_hidden: None,
            head_dropout: None,
            mid_dropout: None,
            bn_momentum: 0.1,
        }
    }
}

impl ModelConfig {
    /// Row label used in reports.
    pub fn label(&self) -> String {
        match (self.strategy, self.bilinear_gate) {
            (Strategy::Kronecker, true) => "kronecker_bilinear".into(),
            (s, _) => s.name().into(),
        }
    }

    pub fn encoder_spec(&self, d_in: usize) -> EncoderSpec {
        EncoderSpec {
            d_in,
            hidden: self.hidden,
            layers: self.conv_layers,
            pool_ratio: self.pool_ratio,
        }
    }

    fn jk_dim(&self) -> usize {
        self.hidden * self.conv_layers
    }

    pub fn mid_dropout(&self) -> f64 {
        self.mid_dropout.unwrap_or(match self.strategy {
            Strategy::Gimp => 0.4,
            Strategy::Gaimp => 0.2,
            _ => 0.0,
        })
    }

    pub fn head_spec(&self) -> HeadSpec {
        let jk = self.jk_dim();
        let (d_in, layers, hidden, dropout, batch_norm) = match self.strategy {
            Strategy::UnimodalA | Strategy::UnimodalB => (jk, 2, self.hidden, 0.5, false),
            Strategy::Kronecker => ((self.kronecker_dim + 1).pow(2), 3, 64, 0.5, false),
            Strategy::LateAdd | Strategy::LateHadamard => (self.fusion_dim.unwrap_or(self.hidden), 3, self.hidden, 0.1, true),
            Strategy::LateConcat | Strategy::Gimp | Strategy::Gaimp => (2 * jk, 3, self.hidden, 0.1, true),
        };
        HeadSpec {
            d_in,
            hidden: self.head_hidden.unwrap_or(hidden),
            layers: self.head_layers.unwrap_or(layers),
            dropout: self.head_dropout.unwrap_or(dropout),
            batch_norm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder_spec(1).validate()?;
        self.head_spec().validate()?;
        if self.kronecker_dim == 0 || self.fusion_dim == Some(0) {
            return Err(Error::Config("fusion widths must be positive".into()));
        }
        if self.bilinear_gate && self.strategy != Strategy::Kronecker {
            return Err(Error::Config("bilinear_gate applies only to the kronecker strategy".into()));
        }
        if !(0.0..1.0).contains(&self.mid_dropout()) {
            return Err(Error::Config("mid_dropout outside [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config("bn_momentum outside [0, 1]".into()));
        }
        Ok(())
    }
}

/// Normalized graphs of one sample, ready for repeated forward passes.
#[derive(Debug, Clone)]
pub struct PreparedPair {
    pub a: Option<PreparedGraph>,
    pub b: Option<PreparedGraph>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub endpoint: Endpoint,
    pub d_a: usize,
    pub d_b: usize,
    pub params: ParamStore,
    /// Non-trainable state (batch-norm running statistics).
    pub buffers: ParamStore,
    pub norm_a: Option<Normalizer>,
    pub norm_b: Option<Normalizer>,
    pub raters: RaterIndex,
}

/// Parameters bound to one tape, grouped by component.
struct BoundModel {
    bound: Bound,
    enc_a: Option<EncoderVars>,
    enc_b: Option<EncoderVars>,
}

impl Model {
    pub fn new(
        config: ModelConfig,
        endpoint: Endpoint,
        d_a: usize,
        d_b: usize,
        raters: RaterIndex,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut buffers = ParamStore::new();
        let st = config.strategy;
        let spec_a = config.encoder_spec(d_a);
        let spec_b = config.encoder_spec(d_b);
        if st.uses_a() {
            init_encoder(&mut params, "enc_a", &spec_a, &mut rng);
        }
        if st.uses_b() {
            init_encoder(&mut params, "enc_b", &spec_b, &mut rng);
        }
        let jk = spec_a.output_dim();
        match st {
            Strategy::LateAdd | Strategy::LateHadamard => {
                let d = config.fusion_dim.unwrap_or(config.hidden);
                params.insert("fusion.w_h", glorot(&mut rng, jk, d));
                params.insert("fusion.w_t", glorot(&mut rng, jk, d));
            }
            Strategy::Kronecker => {
                init_kronecker(&mut params, jk, jk, config.kronecker_dim, config.bilinear_gate, &mut rng);
            }
            Strategy::Gimp | Strategy::Gaimp => {
                for l in 0..config.conv_layers {
                    init_cross(&mut params, l, config.hidden, config.hidden, &mut rng);
                    if st == Strategy::Gaimp {
                        init_attention(&mut params, &format!("fusion.att_a{l}"), config.hidden, &mut rng);
                        init_attention(&mut params, &format!("fusion.att_b{l}"), config.hidden, &mut rng);
                    }
                }
            }
            _ => {}
        }
        init_head(&mut params, &mut buffers, &config.head_spec(), &mut rng);
        let uniform = vec![1; endpoint.num_classes()];
        params.insert(RAW_THRESHOLDS, Tensor::row(&ordinal::raw_from_thresholds(&ordinal::init_thresholds(&uniform))));
        params.insert(RATER_BIAS, Tensor::zeros(&[1, raters.len().max(1)]));
        Ok(Model {
            config,
            endpoint,
            d_a,
            d_b,
            params,
            buffers,
            norm_a: None,
            norm_b: None,
            raters,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.endpoint.num_classes()
    }

    /// Fits both normalizers on the given (training) samples.
    pub fn fit_normalizers(&mut self, train: &[&PairedSample]) -> Result<()> {
        let clamp = self.config.clamp_normalizer;
        self.norm_a = Some(Normalizer::fit(train.iter().map(|s| &s.graph(Modality::A).features), clamp)?);
        self.norm_b = Some(Normalizer::fit(train.iter().map(|s| &s.graph(Modality::B).features), clamp)?);
        Ok(())
    }

    /// Sets thresholds from the training label counts per class.
    pub fn init_thresholds(&mut self, counts: &[usize]) -> Result<()> {
        if counts.len() != self.num_classes() {
            return Err(Error::Contract("label count vector has the wrong length".into()));
        }
        let raw = ordinal::raw_from_thresholds(&ordinal::init_thresholds(counts));
        self.params.insert(RAW_THRESHOLDS, Tensor::row(&raw));
        Ok(())
    }

    pub fn alpha(&self) -> Result<Vec<f64>> {
        Ok(ordinal::thresholds_value(self.params.require(RAW_THRESHOLDS)?.data()))
    }

    pub fn rater_biases(&self) -> Result<&[f64]> {
        Ok(self.params.require(RATER_BIAS)?.data())
    }

    pub fn prepare(&self, s: &PairedSample) -> Result<PreparedPair> {
        let st = self.config.strategy;
        let sym = self.config.symmetric_edges;
        let prep = |norm: &Option<Normalizer>, m: Modality| -> Result<PreparedGraph> {
            let norm = norm
                .as_ref()
                .ok_or_else(|| Error::Contract("normalizer applied before it was fitted".into()))?;
            PreparedGraph::new(s.graph(m), norm, sym)
        };
        Ok(PreparedPair {
            a: if st.uses_a() { Some(prep(&self.norm_a, Modality::A)?) } else { None },
            b: if st.uses_b() { Some(prep(&self.norm_b, Modality::B)?) } else { None },
        })
    }

    fn bind(&self, tape: &mut Tape) -> Result<BoundModel> {
        let bound = self.params.bind(tape);
        let st = self.config.strategy;
        let enc_a = if st.uses_a() {
            Some(EncoderVars::bind(&bound, "enc_a", &self.config.encoder_spec(self.d_a))?)
        } else {
            None
        };
        let enc_b = if st.uses_b() {
            Some(EncoderVars::bind(&bound, "enc_b", &self.config.encoder_spec(self.d_b))?)
        } else {
            None
        };
        Ok(BoundModel { bound, enc_a, enc_b })
    }

    /// Fused representation of one sample (`1×D`).
    fn fused<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        bm: &BoundModel,
        pair: &PreparedPair,
        rng: Option<&mut R>,
    ) -> Result<Var> {
        let missing = || Error::Contract("sample was prepared for a different strategy".into());
        let ga = || pair.a.as_ref().ok_or_else(missing);
        let gb = || pair.b.as_ref().ok_or_else(missing);
        let b = &bm.bound;
        let st = self.config.strategy;
        let enc = |tape: &mut Tape, g: &PreparedGraph, e: &Option<EncoderVars>| -> Result<Var> {
            Ok(encode(tape, g, e.as_ref().ok_or_else(missing)?, &Readout::Mean)?.0)
        };
        match st {
            Strategy::UnimodalA => enc(tape, ga()?, &bm.enc_a),
            Strategy::UnimodalB => enc(tape, gb()?, &bm.enc_b),
            Strategy::LateConcat | Strategy::LateAdd | Strategy::LateHadamard | Strategy::Kronecker => {
                let h = enc(tape, ga()?, &bm.enc_a)?;
                let t = enc(tape, gb()?, &bm.enc_b)?;
                match st {
                    Strategy::LateConcat => fuse_concat(tape, h, t),
                    Strategy::LateAdd => fuse_add(tape, h, t, b.var("fusion.w_h")?, b.var("fusion.w_t")?),
                    Strategy::LateHadamard => fuse_hadamard(tape, h, t, b.var("fusion.w_h")?, b.var("fusion.w_t")?),
                    _ => fuse_kronecker_gated(tape, h, t, &KroneckerVars::bind(b, self.config.bilinear_gate)?),
                }
            }
            Strategy::Gimp | Strategy::Gaimp => {
                let ea = bm.enc_a.as_ref().ok_or_else(missing)?;
                let eb = bm.enc_b.as_ref().ok_or_else(missing)?;
                let mut drop = InjectDropout {
                    p: self.config.mid_dropout(),
                    rng,
                };
                let mut sa = NodeState::input(tape, ga()?);
                let mut sb = NodeState::input(tape, gb()?);
                let (mut outs_a, mut outs_b) = (Vec::new(), Vec::new());
                for l in 0..ea.layers() {
                    sa = ea.step(tape, &sa, l)?;
                    sb = eb.step(tape, &sb, l)?;
                    let cross = CrossVars::bind(b, l)?;
                    (sa, sb) = if st == Strategy::Gimp {
                        gimp_step(tape, &sa, &sb, &cross, &mut drop)?
                    } else {
                        let att_a = AttentionVars::bind(b, &format!("fusion.att_a{l}"))?;
                        let att_b = AttentionVars::bind(b, &format!("fusion.att_b{l}"))?;
                        gaimp_step(tape, &sa, &sb, &att_a, &att_b, &cross, &mut drop)?
                    };
                    outs_a.push(mean_pool(tape, &sa)?);
                    outs_b.push(mean_pool(tape, &sb)?);
                }
                let ja = tape.concat_cols(&outs_a)?;
                let jb = tape.concat_cols(&outs_b)?;
                fuse_concat(tape, ja, jb)
            }
        }
    }

    /// Latent scores `B×1` for a batch, before any rater bias.
    fn forward_bound<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        bm: &BoundModel,
        batch: &[&PreparedPair],
        mode: &mut HeadMode<'_, R>,
    ) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let mut rows = Vec::with_capacity(batch.len());
        for pair in batch {
            let rng = match mode {
                HeadMode::Train { rng, .. } => Some(&mut **rng),
                HeadMode::Eval { .. } => None,
            };
            rows.push(self.fused(tape, bm, pair, rng)?);
        }
        let x = tape.concat_rows(&rows)?;
        head_forward(tape, &bm.bound, &self.config.head_spec(), x, mode)
    }

    /// Inference-path latent scores (no rater bias, no dropout, running
    /// batch-norm statistics).
    pub fn latent_scores(&self, pairs: &[&PreparedPair]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(pairs.len());
        for pair in pairs {
            let mut tape = Tape::new();
            let bm = self.bind(&mut tape)?;
            let mut mode: HeadMode<'_, ChaCha8Rng> = HeadMode::Eval { buffers: &self.buffers };
            let s = self.forward_bound(&mut tape, &bm, &[pair], &mut mode)?;
            out.push(tape.value(s).item());
        }
        Ok(out)
    }

    pub fn predict(&self, pairs: &[&PreparedPair]) -> Result<Vec<usize>> {
        let alpha = self.alpha()?;
        self.latent_scores(pairs)?
            .into_iter()
            .map(|s| ordinal::predict(s, &alpha))
            .collect()
    }

    /// Mean cumulative-link NLL over `(batch row, rater, label)` triples on a
    /// fresh tape. `train` enables dropout and batch statistics; rater
    /// biases are applied when `with_bias` is set.
    pub fn loss_tape<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        batch: &[&PreparedPair],
        targets: &[Target],
        train: Option<&mut R>,
        with_bias: bool,
    ) -> Result<LossOutput> {
        if targets.is_empty() {
            return Err(Error::Contract("loss needs at least one label".into()));
        }
        let bm = self.bind(tape)?;
        let (s, observed) = match train {
            Some(rng) => {
                let mut mode = HeadMode::Train {
                    rng,
                    observed: Vec::new(),
                };
                let s = self.forward_bound(tape, &bm, batch, &mut mode)?;
                let HeadMode::Train { observed, .. } = mode else { unreachable!() };
                (s, observed)
            }
            None => {
                let mut mode: HeadMode<'_, R> = HeadMode::Eval { buffers: &self.buffers };
                (self.forward_bound(tape, &bm, batch, &mut mode)?, Vec::new())
            }
        };
        let rows: Vec<usize> = targets.iter().map(|t| t.row).collect();
        let mut s_rows = tape.gather_rows(s, &rows)?;
        if with_bias {
            let raters: Vec<usize> = targets.iter().map(|t| t.rater).collect();
            s_rows = ordinal::add_rater_bias(tape, s_rows, bm.bound.var(RATER_BIAS)?, &raters)?;
        }
        let alpha = ordinal::thresholds(tape, bm.bound.var(RAW_THRESHOLDS)?)?;
        let labels: Vec<usize> = targets.iter().map(|t| t.label).collect();
        let nll = tape.ordinal_nll(s_rows, alpha, &labels)?;
        let total = tape.sum_all(nll)?;
        let loss = tape.scale(total, 1.0 / targets.len() as f64)?;
        Ok(LossOutput {
            loss,
            bound: bm.bound,
            observed,
        })
    }

    pub fn update_running_stats(&mut self, observed: &[BnObservation], batch: usize) -> Result<()> {
        update_running_stats(&mut self.buffers, observed, batch, self.config.bn_momentum)
    }

    pub fn to_checkpoint(&self, extra: serde_json::Value) -> Result<Checkpoint> {
        let norm = |n: &Option<Normalizer>| {
            n.as_ref()
                .map(|n| serde_json::json!({"min": n.min, "max": n.max, "clamp": n.clamp}))
        };
        let metadata = serde_json::json!({
            "model": self.config,
            "endpoint": self.endpoint,
            "d_a": self.d_a,
            "d_b": self.d_b,
            "raters": self.raters.ids(),
            "norm_a": norm(&self.norm_a),
            "norm_b": norm(&self.norm_b),
            "extra": extra,
        });
        let mut tensors = BTreeMap::new();
        for (k, v) in self.params.iter() {
            tensors.insert(format!("param/{k}"), v.clone());
        }
        for (k, v) in self.buffers.iter() {
            tensors.insert(format!("buffer/{k}"), v.clone());
        }
        Ok(Checkpoint { metadata, tensors })
    }

    /// Rebuilds a model; every stored tensor must match the shape the
    /// recorded configuration implies. Returns the `extra` metadata too.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Model, serde_json::Value)> {
        #[derive(Deserialize)]
        struct Meta {
            model: ModelConfig,
            endpoint: Endpoint,
            d_a: usize,
            d_b: usize,
            raters: Vec<String>,
            norm_a: Option<NormMeta>,
            norm_b: Option<NormMeta>,
            #[serde(default)]
            extra: serde_json::Value,
        }
        #[derive(Deserialize)]
        struct NormMeta {
            min: Vec<f64>,
            max: Vec<f64>,
            clamp: bool,
        }
        let meta: Meta =
            serde_json::from_value(ck.metadata.clone()).map_err(|e| Error::Config(format!("checkpoint metadata: {e}")))?;
        let mut model = Model::new(meta.model, meta.endpoint, meta.d_a, meta.d_b, RaterIndex::new(meta.raters), 0)?;
        let mut diffs = Vec::new();
        let mut fill = |store: &mut ParamStore, prefix: &str| {
            let names: Vec<String> = store.names().cloned().collect();
            for name in names {
                let key = format!("{prefix}/{name}");
                let want = store.get(&name).map(|t| t.shape().to_vec()).unwrap_or_default();
                match ck.tensors.get(&key) {
                    Some(t) if t.shape() == want.as_slice() => store.insert(name, t.clone()),
                    Some(t) => diffs.push(format!("{key}: expected {want:?}, found {:?}", t.shape())),
                    None => diffs.push(format!("{key}: missing (expected {want:?})")),
                }
            }
        };
        fill(&mut model.params, "param");
        fill(&mut model.buffers, "buffer");
        let expected = model.params.len() + model.buffers.len();
        if ck.tensors.len() != expected {
            for k in ck.tensors.keys() {
                let known = k
                    .strip_prefix("param/")
                    .map(|n| model.params.contains(n))
                    .or_else(|| k.strip_prefix("buffer/").map(|n| model.buffers.contains(n)))
                    .unwrap_or(false);
                if !known {
                    diffs.push(format!("{k}: unexpected tensor"));
                }
            }
        }
        if !diffs.is_empty() {
            return Err(Error::Config(format!("checkpoint does not match its configuration: {}", diffs.join("; "))));
        }
        let to_norm = |n: Option<NormMeta>| n.map(|n| Normalizer { min: n.min, max: n.max, clamp: n.clamp });
        model.norm_a = to_norm(meta.norm_a);
        model.norm_b = to_norm(meta.norm_b);
        Ok((model, meta.extra))
    }
}

/// One supervised target: the batch row it belongs to, the rater index and
/// the 0-based class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Target {
    pub row: usize,
    pub rater: usize,
    pub label: usize,
}

pub struct LossOutput {
    pub loss: Var,
    pub bound: Bound,
    pub observed: Vec<BnObservation>,
}

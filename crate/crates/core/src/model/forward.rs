//! Tangled blocks, the layer stack and the task heads.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::model::params::{AttentionWeights, CrossAttention, KvGenerator, StreamLayer, TangledLayer};
use crate::model::ModelParams;
use crate::numerics::{ops, KvSource, ParamId, ParamStore, Tape, Tensor, Var};
use crate::sequence::{embed_batch, InputSequence, Stream};

/// Whether generated key-value pairs are stacked onto the native ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Coupling {
    #[default]
    Tangled,
    /// Stacked pairs omitted; each stream is a plain transformer layer.
    Decoupled,
}

/// Row bookkeeping for a batch laid out stream by stream.
#[derive(Debug, Clone)]
pub struct BatchLayout {
    /// Rows of the concatenated embedding feeding each stream, sample-major.
    pub stream_rows: [Vec<usize>; 3],
    /// Per-sample row ranges inside each stream matrix.
    pub groups: [Vec<Range<usize>>; 3],
    /// `[CLS]` row of each sample inside the text stream matrix.
    pub cls_rows: Vec<usize>,
    /// For each sample, the stream-matrix row of every sequence position.
    pub position_rows: Vec<Vec<usize>>,
}

const TEXT: usize = 0;
const ACTION: usize = 1;
const REGION: usize = 2;

fn slot(s: Stream) -> usize {
    match s {
        Stream::Text => TEXT,
        Stream::Action => ACTION,
        Stream::Region => REGION,
    }
}

impl BatchLayout {
    pub fn new(seqs: &[&InputSequence]) -> Self {
        let mut stream_rows: [Vec<usize>; 3] = Default::default();
        let mut groups: [Vec<Range<usize>>; 3] = Default::default();
        let mut cls_rows = Vec::with_capacity(seqs.len());
        let mut position_rows = Vec::with_capacity(seqs.len());
        let mut offset = 0;
        for seq in seqs {
            let starts = [0, 1, 2].map(|s| stream_rows[s].len());
            let mut rows = Vec::with_capacity(seq.len());
            for (i, e) in seq.elements.iter().enumerate() {
                let s = slot(e.stream);
                rows.push(stream_rows[s].len());
                stream_rows[s].push(offset + i);
            }
            for s in 0..3 {
                groups[s].push(starts[s]..stream_rows[s].len());
            }
            cls_rows.push(starts[TEXT]);
            position_rows.push(rows);
            offset += seq.len();
        }
        Self { stream_rows, groups, cls_rows, position_rows }
    }

    pub fn batch_size(&self) -> usize {
        self.cls_rows.len()
    }

    pub fn groups(&self, stream: Stream) -> &[Range<usize>] {
        &self.groups[slot(stream)]
    }
}

/// Hidden states of the three streams on a tape.
#[derive(Debug, Clone, Copy)]
pub struct StreamVars {
    pub text: Var,
    pub action: Var,
    pub region: Var,
}

/// Keys seen by each stream's attention, per sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyCounts {
    pub text: Vec<usize>,
    pub action: Vec<usize>,
    pub region: Vec<usize>,
}

struct Lin<'a> {
    tape: &'a mut Tape,
    store: &'a ParamStore,
}

impl Lin<'_> {
    fn apply(&mut self, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
        let w = self.tape.param(self.store, w);
        let b = self.tape.param(self.store, b);
        self.tape.linear(x, w, b)
    }
}

/// Projects `q_in`/`kv_in`, attends (with any extra stacked sources), and
/// applies the output projection.
#[allow(clippy::too_many_arguments)]
fn attend(
    tape: &mut Tape,
    store: &ParamStore,
    w: &AttentionWeights,
    heads: usize,
    q_in: Var,
    q_groups: &[Range<usize>],
    kv_in: Var,
    kv_groups: &[Range<usize>],
    stacked: Option<KvSource>,
) -> Result<Var> {
    let mut lin = Lin { tape, store };
    let q = lin.apply(q_in, w.q_weight, w.q_bias)?;
    let k = lin.apply(kv_in, w.k_weight, w.k_bias)?;
    let v = lin.apply(kv_in, w.v_weight, w.v_bias)?;
    let mut sources = vec![KvSource { keys: k, values: v, groups: kv_groups.to_vec() }];
    sources.extend(stacked);
    let a = tape.attention(q, q_groups, &sources, heads)?;
    Lin { tape, store }.apply(a, w.out_weight, w.out_bias)
}

fn stream_update(
    tape: &mut Tape,
    store: &ParamStore,
    layer: &StreamLayer,
    heads: usize,
    h: Var,
    groups: &[Range<usize>],
    stacked: Option<KvSource>,
) -> Result<Var> {
    let attn = attend(tape, store, &layer.attention, heads, h, groups, h, groups, stacked)?;
    let x = tape.add(h, attn)?;
    let (g1, b1) = (tape.param(store, layer.norm1_gain), tape.param(store, layer.norm1_bias));
    let x = tape.layer_norm(x, g1, b1)?;
    let mut lin = Lin { tape, store };
    let f = lin.apply(x, layer.ff1_weight, layer.ff1_bias)?;
    let f = lin.tape.gelu(f);
    let f = lin.apply(f, layer.ff2_weight, layer.ff2_bias)?;
    let y = tape.add(x, f)?;
    let (g2, b2) = (tape.param(store, layer.norm2_gain), tape.param(store, layer.norm2_bias));
    tape.layer_norm(y, g2, b2)
}

/// `Multihead(W_q h_a, W_k h_x, W_v h_x)` before any output projection.
#[allow(clippy::too_many_arguments)]
fn action_queried(
    tape: &mut Tape,
    store: &ParamStore,
    cross: &CrossAttention,
    heads: usize,
    h_action: Var,
    action_groups: &[Range<usize>],
    h_other: Var,
    other_groups: &[Range<usize>],
) -> Result<Var> {
    let mut lin = Lin { tape, store };
    let q = lin.apply(h_action, cross.q_weight, cross.q_bias)?;
    let k = lin.apply(h_other, cross.k_weight, cross.k_bias)?;
    let v = lin.apply(h_other, cross.v_weight, cross.v_bias)?;
    tape.attention(q, action_groups, &[KvSource { keys: k, values: v, groups: other_groups.to_vec() }], heads)
}

fn generate_kv(
    tape: &mut Tape,
    store: &ParamStore,
    gen: &KvGenerator,
    blended: Var,
    action_groups: &[Range<usize>],
) -> Result<KvSource> {
    let mut lin = Lin { tape, store };
    let keys = lin.apply(blended, gen.k_weight, gen.k_bias)?;
    let values = lin.apply(blended, gen.v_weight, gen.v_bias)?;
    Ok(KvSource { keys, values, groups: action_groups.to_vec() })
}

/// One tangled block over all three streams.
///
/// The action stream queries text (`c_w`) and regions (`c_r`) from the
/// layer inputs. Keys/values generated from `c_w` are appended to the
/// action and region streams' own; those from `c_r` are appended to the
/// text stream's. Each stream then runs attention, residual, norm,
/// feed-forward, residual, norm.
pub fn tangled_block_vars(
    tape: &mut Tape,
    params: &ModelParams,
    layer: &TangledLayer,
    states: StreamVars,
    layout: &BatchLayout,
    coupling: Coupling,
) -> Result<(StreamVars, KeyCounts)> {
    let store = &params.store;
    let heads = params.config.num_heads;
    let [wg, ag, rg] = &layout.groups;
    let (to_text, to_visual) = match coupling {
        Coupling::Decoupled => (None, None),
        Coupling::Tangled => {
            let c_w = action_queried(tape, store, &layer.text_cross, heads, states.action, ag, states.text, wg)?;
            let c_r = action_queried(tape, store, &layer.region_cross, heads, states.action, ag, states.region, rg)?;
            let from_text = generate_kv(tape, store, &layer.text_kv, c_w, ag)?;
            let from_region = generate_kv(tape, store, &layer.region_kv, c_r, ag)?;
            (Some(from_region), Some(from_text))
        }
    };
    let count = |native: &[Range<usize>], extra: &Option<KvSource>| -> Vec<usize> {
        native
            .iter()
            .enumerate()
            .map(|(b, g)| g.len() + extra.as_ref().map_or(0, |s| s.groups[b].len()))
            .collect()
    };
    let counts = KeyCounts {
        text: count(wg, &to_text),
        action: count(ag, &to_visual),
        region: count(rg, &to_visual),
    };
    let text = stream_update(tape, store, &layer.text, heads, states.text, wg, to_text)?;
    let action = stream_update(tape, store, &layer.action, heads, states.action, ag, to_visual.clone())?;
    let region = stream_update(tape, store, &layer.region, heads, states.region, rg, to_visual)?;
    Ok((StreamVars { text, action, region }, counts))
}

/// Splits a concatenated `[sum T, d]` embedding into the three streams.
pub fn partition_vars(tape: &mut Tape, embedded: Var, layout: &BatchLayout) -> Result<StreamVars> {
    Ok(StreamVars {
        text: tape.gather_rows(embedded, &layout.stream_rows[TEXT])?,
        action: tape.gather_rows(embedded, &layout.stream_rows[ACTION])?,
        region: tape.gather_rows(embedded, &layout.stream_rows[REGION])?,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub states: StreamVars,
    /// `tanh(W h_cls + b)`, one row per sample.
    pub pooled: Var,
}

pub fn forward_vars(
    tape: &mut Tape,
    params: &ModelParams,
    embedded: Var,
    layout: &BatchLayout,
    coupling: Coupling,
) -> Result<ForwardVars> {
    let mut states = partition_vars(tape, embedded, layout)?;
    for layer in &params.layers {
        states = tangled_block_vars(tape, params, layer, states, layout, coupling)?.0;
    }
    let cls = tape.gather_rows(states.text, &layout.cls_rows)?;
    let h = &params.heads;
    let pooled = Lin { tape, store: &params.store }.apply(cls, h.pool_weight, h.pool_bias)?;
    let pooled = tape.tanh(pooled);
    Ok(ForwardVars { states, pooled })
}

#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub mlm_logits: Var,
    pub action_logits: Var,
    pub object_logits: Var,
    /// `[batch, 1]`, before clamping and sigmoid.
    pub match_logits: Var,
}

pub fn match_logits_var(tape: &mut Tape, params: &ModelParams, pooled: Var) -> Result<Var> {
    let h = &params.heads;
    Lin { tape, store: &params.store }.apply(pooled, h.match_weight, h.match_bias)
}

pub fn heads_vars(tape: &mut Tape, params: &ModelParams, fwd: &ForwardVars) -> Result<HeadVars> {
    let h = &params.heads;
    let mut lin = Lin { tape, store: &params.store };
    let mlm_logits = lin.apply(fwd.states.text, h.mlm_weight, h.mlm_bias)?;
    let action_logits = lin.apply(fwd.states.action, h.action_weight, h.action_bias)?;
    let object_logits = lin.apply(fwd.states.region, h.object_weight, h.object_bias)?;
    let match_logits = lin.apply(fwd.pooled, h.match_weight, h.match_bias)?;
    Ok(HeadVars { mlm_logits, action_logits, object_logits, match_logits })
}

/// Embeds and encodes a batch in one tape.
pub fn encode_batch(
    tape: &mut Tape,
    params: &ModelParams,
    seqs: &[&InputSequence],
    coupling: Coupling,
) -> Result<(BatchLayout, ForwardVars)> {
    let layout = BatchLayout::new(seqs);
    let embedded = embed_batch(tape, &params.store, &params.embeddings, seqs)?;
    let fwd = forward_vars(tape, params, embedded, &layout, coupling)?;
    Ok((layout, fwd))
}

/// Match probabilities of several sequences, evaluated in one pass.
pub fn match_scores(params: &ModelParams, seqs: &[&InputSequence]) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let (_, fwd) = encode_batch(&mut tape, params, seqs, Coupling::Tangled)?;
    let logits = match_logits_var(&mut tape, params, fwd.pooled)?;
    Ok(tape.value(logits).data().iter().map(|&z| ops::sigmoid(z)).collect())
}

/// Eager per-sample hidden states.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamStates {
    pub text: Tensor,
    pub action: Tensor,
    pub region: Tensor,
}

impl StreamStates {
    pub fn total_len(&self) -> usize {
        self.text.rows() + self.action.rows() + self.region.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutputs {
    pub mlm_logits: Tensor,
    pub action_logits: Tensor,
    pub object_logits: Tensor,
    pub match_score: f64,
}

fn single_layout(states: &StreamStates) -> BatchLayout {
    let (w, a, r) = (states.text.rows(), states.action.rows(), states.region.rows());
    BatchLayout {
        stream_rows: Default::default(),
        groups: [vec![0..w], vec![0..a], vec![0..r]],
        cls_rows: vec![0],
        position_rows: vec![],
    }
}

fn constant_states(tape: &mut Tape, states: &StreamStates) -> StreamVars {
    StreamVars {
        text: tape.constant(states.text.clone()),
        action: tape.constant(states.action.clone()),
        region: tape.constant(states.region.clone()),
    }
}

fn read_states(tape: &Tape, v: &StreamVars) -> StreamStates {
    StreamStates {
        text: tape.value(v.text).clone(),
        action: tape.value(v.action).clone(),
        region: tape.value(v.region).clone(),
    }
}

/// `softmax(Q_h K_h^T / sqrt(d_h)) V_h` per head, concatenated, then projected.
pub fn multihead_attention(
    store: &ParamStore,
    weights: &AttentionWeights,
    num_heads: usize,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
) -> Result<Tensor> {
    if k.rows() == 0 || k.shape().len() != 2 {
        return Err(Error::Validation("attention needs at least one key".into()));
    }
    if k.shape() != v.shape() {
        return Err(Error::dim("multihead_attention", k.shape(), v.shape()));
    }
    let mut tape = Tape::new();
    let (qv, kv) = (tape.constant(q.clone()), tape.constant(k.clone()));
    let mut lin = Lin { tape: &mut tape, store };
    let qp = lin.apply(qv, weights.q_weight, weights.q_bias)?;
    let kp = lin.apply(kv, weights.k_weight, weights.k_bias)?;
    let vv = lin.tape.constant(v.clone());
    let vp = lin.apply(vv, weights.v_weight, weights.v_bias)?;
    let a = tape.attention(qp, &[0..q.rows()], &[KvSource { keys: kp, values: vp, groups: vec![0..k.rows()] }], num_heads)?;
    let out = Lin { tape: &mut tape, store }.apply(a, weights.out_weight, weights.out_bias)?;
    Ok(tape.value(out).clone())
}

/// Eager single-sample tangled block.
pub fn tangled_block(
    params: &ModelParams,
    layer: usize,
    states: &StreamStates,
    coupling: Coupling,
) -> Result<(StreamStates, KeyCounts)> {
    let layer = params.layers.get(layer).ok_or(Error::Index {
        context: "tangled_block layer",
        index: layer,
        bound: params.layers.len(),
    })?;
    let mut tape = Tape::new();
    let vars = constant_states(&mut tape, states);
    let layout = single_layout(states);
    let (out, counts) = tangled_block_vars(&mut tape, params, layer, vars, &layout, coupling)?;
    Ok((read_states(&tape, &out), counts))
}

/// Full stack over an embedded sequence; returns final states and the
/// pooled `[CLS]` vector.
pub fn forward(
    params: &ModelParams,
    seq: &InputSequence,
    embedded: &Tensor,
    coupling: Coupling,
) -> Result<(StreamStates, Tensor)> {
    if embedded.rows() != seq.len() || embedded.cols() != params.config.hidden {
        return Err(Error::dim("forward", embedded.shape(), &[seq.len(), params.config.hidden]));
    }
    let mut tape = Tape::new();
    let e = tape.constant(embedded.clone());
    let layout = BatchLayout::new(&[seq]);
    let fwd = forward_vars(&mut tape, params, e, &layout, coupling)?;
    let pooled = tape.value(fwd.pooled).clone().reshape(vec![params.config.hidden])?;
    Ok((read_states(&tape, &fwd.states), pooled))
}

/// All four task heads for one sample.
pub fn heads(params: &ModelParams, states: &StreamStates, pooled: &Tensor) -> Result<HeadOutputs> {
    let mut tape = Tape::new();
    let vars = constant_states(&mut tape, states);
    let p = tape.constant(pooled.clone().reshape(vec![1, params.config.hidden])?);
    let out = heads_vars(&mut tape, params, &ForwardVars { states: vars, pooled: p })?;
    Ok(HeadOutputs {
        mlm_logits: tape.value(out.mlm_logits).clone(),
        action_logits: tape.value(out.action_logits).clone(),
        object_logits: tape.value(out.object_logits).clone(),
        match_score: ops::sigmoid(tape.value(out.match_logits).data()[0]),
    })
}

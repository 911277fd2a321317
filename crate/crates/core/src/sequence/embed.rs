use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, Rng, Tape, Tensor, Var};
use crate::sequence::layout::{InputSequence, Modality};

/// Sizes of the embedding tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmbeddingDims {
    pub hidden: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub max_segments: usize,
    pub action_feature_dim: usize,
    pub region_feature_dim: usize,
}

/// Position, segment, token and visual embedding parameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmbeddingTables {
    pub dims: EmbeddingDims,
    pub position: ParamId,
    pub segment: ParamId,
    pub token: ParamId,
    pub action_weight: ParamId,
    pub action_bias: ParamId,
    pub region_weight: ParamId,
    pub region_bias: ParamId,
    pub spatial_weight: ParamId,
    pub spatial_bias: ParamId,
}

impl EmbeddingTables {
    pub fn init(store: &mut ParamStore, dims: EmbeddingDims, init_std: f64, rng: &mut Rng) -> Self {
        let d = dims.hidden;
        Self {
            dims,
            position: store.add_normal("embed.position", &[dims.max_positions, d], init_std, rng),
            segment: store.add_normal("embed.segment", &[dims.max_segments, d], init_std, rng),
            token: store.add_normal("embed.token", &[dims.vocab_size, d], init_std, rng),
            action_weight: store.add_normal("embed.action.weight", &[dims.action_feature_dim, d], init_std, rng),
            action_bias: store.add("embed.action.bias", Tensor::zeros(&[d])),
            region_weight: store.add_normal("embed.region.weight", &[dims.region_feature_dim, d], init_std, rng),
            region_bias: store.add("embed.region.bias", Tensor::zeros(&[d])),
            spatial_weight: store.add_normal("embed.spatial.weight", &[5, d], init_std, rng),
            spatial_bias: store.add("embed.spatial.bias", Tensor::zeros(&[d])),
        }
    }

    pub fn param_ids(&self) -> [ParamId; 9] {
        [
            self.position,
            self.segment,
            self.token,
            self.action_weight,
            self.action_bias,
            self.region_weight,
            self.region_bias,
            self.spatial_weight,
            self.spatial_bias,
        ]
    }
}

fn payload_matrix(rows: &[&Tensor], dim: usize, what: &'static str) -> Result<Tensor> {
    let mut data = Vec::with_capacity(rows.len() * dim);
    for r in rows {
        if r.len() != dim {
            return Err(Error::dim(what, &[dim], r.shape()));
        }
        data.extend_from_slice(r.data());
    }
    Tensor::new(vec![rows.len(), dim], data)
}

/// Embeds several sequences into one `[sum T, d]` matrix, rows in order.
///
/// Each row is `position + segment + token + visual`, where the visual term
/// is a projected action feature, a projected region feature plus the
/// projected box descriptor, or zero for text and special tokens.
pub fn embed_batch(
    tape: &mut Tape,
    store: &ParamStore,
    tables: &EmbeddingTables,
    seqs: &[&InputSequence],
) -> Result<Var> {
    let dims = tables.dims;
    let total: usize = seqs.iter().map(|s| s.len()).sum();
    let mut pos = Vec::with_capacity(total);
    let mut seg = Vec::with_capacity(total);
    let mut tok = Vec::with_capacity(total);
    let mut action_rows = Vec::new();
    let mut action_feats = Vec::new();
    let mut region_rows = Vec::new();
    let mut region_feats = Vec::new();
    let mut spatials = Vec::new();
    for e in seqs.iter().flat_map(|s| &s.elements) {
        if e.position_index >= dims.max_positions {
            return Err(Error::Capacity {
                what: "position index",
                requested: e.position_index,
                capacity: dims.max_positions,
            });
        }
        if e.segment_index >= dims.max_segments {
            return Err(Error::Capacity {
                what: "segment index",
                requested: e.segment_index,
                capacity: dims.max_segments,
            });
        }
        if e.token_id as usize >= dims.vocab_size {
            return Err(Error::Index {
                context: "token embedding",
                index: e.token_id as usize,
                bound: dims.vocab_size,
            });
        }
        let row = pos.len();
        pos.push(e.position_index);
        seg.push(e.segment_index);
        tok.push(e.token_id as usize);
        match (e.modality, &e.visual) {
            (Modality::Action, Some(f)) => {
                action_rows.push(row);
                action_feats.push(f);
            }
            (Modality::Region, Some(f)) => {
                region_rows.push(row);
                region_feats.push(f);
                spatials.push(e.spatial.as_ref().ok_or_else(|| {
                    Error::Validation(format!("region at row {row} lacks a spatial vector"))
                })?);
            }
            (Modality::Action | Modality::Region, None) => {
                return Err(Error::Validation(format!("visual element at row {row} has no payload")))
            }
            _ => {}
        }
    }

    let p = tape.param(store, tables.position);
    let s = tape.param(store, tables.segment);
    let t = tape.param(store, tables.token);
    let pe = tape.gather_rows(p, &pos)?;
    let se = tape.gather_rows(s, &seg)?;
    let te = tape.gather_rows(t, &tok)?;
    let mut out = tape.add(pe, se)?;
    out = tape.add(out, te)?;

    if !action_rows.is_empty() {
        let x = tape.constant(payload_matrix(&action_feats, dims.action_feature_dim, "action feature")?);
        let w = tape.param(store, tables.action_weight);
        let b = tape.param(store, tables.action_bias);
        let proj = tape.linear(x, w, b)?;
        let placed = tape.scatter_rows(proj, &action_rows, total)?;
        out = tape.add(out, placed)?;
    }
    if !region_rows.is_empty() {
        let x = tape.constant(payload_matrix(&region_feats, dims.region_feature_dim, "region feature")?);
        let w = tape.param(store, tables.region_weight);
        let b = tape.param(store, tables.region_bias);
        let feat = tape.linear(x, w, b)?;
        let sp = tape.constant(payload_matrix(&spatials, 5, "spatial vector")?);
        let sw = tape.param(store, tables.spatial_weight);
        let sb = tape.param(store, tables.spatial_bias);
        let box_embed = tape.linear(sp, sw, sb)?;
        let visual = tape.add(feat, box_embed)?;
        let placed = tape.scatter_rows(visual, &region_rows, total)?;
        out = tape.add(out, placed)?;
    }
    Ok(out)
}

/// Eager `[T, d]` embedding of one sequence.
pub fn embed_sequence(seq: &InputSequence, tables: &EmbeddingTables, store: &ParamStore) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = embed_batch(&mut tape, store, tables, &[seq])?;
    Ok(tape.value(v).clone())
}

//! Masking, the four pre-training losses, and the training step.

use crate::error::{Error, Result};
use crate::model::{encode_batch, heads_vars, BatchLayout, Coupling, HeadVars, ModelParams};
use crate::numerics::{self, adam_step, AdamConfig, Rng, Tape, Tensor, Var};
use crate::sequence::{build_sequence, InputSequence, Modality, Source, SpecialToken, Stream, VideoTextSample};

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedWord {
    pub position: usize,
    /// Row inside the text stream.
    pub stream_row: usize,
    pub word_id: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedAction {
    pub position: usize,
    pub stream_row: usize,
    pub label: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedRegion {
    pub position: usize,
    pub stream_row: usize,
    pub teacher: Tensor,
}

/// Masked positions of one sequence and what each should predict.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MaskingPlan {
    pub words: Vec<MaskedWord>,
    pub actions: Vec<MaskedAction>,
    pub regions: Vec<MaskedRegion>,
}

impl MaskingPlan {
    pub fn num_masked(&self) -> usize {
        self.words.len() + self.actions.len() + self.regions.len()
    }
}

/// Masks each word, action and region independently with probability
/// `rate`.
///
/// Masked words become `[MASK]`. Masked actions and regions keep their
/// `[ACT]`/`[REGION]` token but their feature is zeroed; a region keeps its
/// box descriptor. Structural tokens are never touched.
pub fn apply_masking(
    sample: &VideoTextSample,
    seq: &InputSequence,
    rate: f64,
    rng: &mut Rng,
) -> Result<(InputSequence, MaskingPlan)> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Validation(format!("mask rate {rate} outside [0, 1]")));
    }
    let rows = seq.stream_rows();
    let mut out = seq.clone();
    let mut plan = MaskingPlan::default();
    for (i, e) in out.elements.iter_mut().enumerate() {
        if e.modality == Modality::Special || !rng.bernoulli(rate) {
            continue;
        }
        match e.source {
            Source::Word(w) => {
                plan.words.push(MaskedWord { position: i, stream_row: rows[i], word_id: sample.word_ids[w] });
                e.token_id = SpecialToken::Mask.id();
            }
            Source::Action(c) => {
                plan.actions.push(MaskedAction { position: i, stream_row: rows[i], label: sample.clips[c].action_label });
                zero_payload(e);
            }
            Source::Region { clip, frame, index } => {
                let teacher = sample.clips[clip].frames[frame][index].teacher.clone();
                plan.regions.push(MaskedRegion { position: i, stream_row: rows[i], teacher });
                zero_payload(e);
            }
            _ => unreachable!("non-special element with structural source"),
        }
    }
    Ok((out, plan))
}

fn zero_payload(e: &mut crate::sequence::Element) {
    if let Some(v) = e.visual.as_mut() {
        v.data_mut().fill(0.0);
    }
}

/// Cross-entropy over masked words; 0 when none are masked.
pub fn mlm_loss(mlm_logits: &Tensor, plan: &MaskingPlan) -> Result<f64> {
    let rows: Vec<usize> = plan.words.iter().map(|m| m.stream_row).collect();
    let targets: Vec<usize> = plan.words.iter().map(|m| m.word_id as usize).collect();
    numerics::cross_entropy(&mlm_logits.gather_rows(&rows), &targets)
}

/// Cross-entropy over masked action labels; 0 when none are masked.
pub fn action_loss(action_logits: &Tensor, plan: &MaskingPlan) -> Result<f64> {
    let rows: Vec<usize> = plan.actions.iter().map(|m| m.stream_row).collect();
    let targets: Vec<usize> = plan.actions.iter().map(|m| m.label as usize).collect();
    numerics::cross_entropy(&action_logits.gather_rows(&rows), &targets)
}

/// Mean KL from each masked region's teacher distribution to the predicted
/// one; 0 when none are masked.
pub fn object_loss(object_logits: &Tensor, plan: &MaskingPlan) -> Result<f64> {
    if plan.regions.is_empty() {
        return Ok(0.0);
    }
    let rows: Vec<usize> = plan.regions.iter().map(|m| m.stream_row).collect();
    let teacher = stack_rows(plan.regions.iter().map(|m| &m.teacher), object_logits.cols())?;
    numerics::kl_divergence(&teacher, &object_logits.gather_rows(&rows))
}

pub fn matching_loss(match_score: f64, match_label: u8) -> f64 {
    numerics::binary_cross_entropy(match_score, match_label)
}

fn stack_rows<'a>(rows: impl Iterator<Item = &'a Tensor>, cols: usize) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut n = 0;
    for r in rows {
        if r.len() != cols {
            return Err(Error::dim("teacher distribution", &[cols], r.shape()));
        }
        data.extend_from_slice(r.data());
        n += 1;
    }
    Tensor::new(vec![n, cols], data)
}

/// Replaces the text of roughly half the batch with another sample's.
///
/// Each sample is selected with probability `rate`. Selected samples
/// exchange texts along a random cycle, so none keeps its own; a lone
/// selected sample borrows the text of a random other one. A sample whose
/// final text differs from its original gets label 0, every other sample 1.
pub fn make_negative_pairs(batch: &[VideoTextSample], rate: f64, rng: &mut Rng) -> Result<Vec<VideoTextSample>> {
    if batch.len() < 2 {
        return Err(Error::Validation("negative pairs need a batch of at least two samples".into()));
    }
    let selected: Vec<usize> = (0..batch.len()).filter(|_| rng.bernoulli(rate)).collect();
    let mut text_source: Vec<usize> = (0..batch.len()).collect();
    match selected.len() {
        0 => {}
        1 => {
            let s = selected[0];
            let mut other = rng.below(batch.len() - 1);
            if other >= s {
                other += 1;
            }
            text_source[s] = other;
        }
        _ => {
            let mut order = selected.clone();
            rng.shuffle(&mut order);
            for (i, &s) in order.iter().enumerate() {
                text_source[s] = order[(i + 1) % order.len()];
            }
        }
    }
    Ok(batch
        .iter()
        .zip(&text_source)
        .map(|(sample, &src)| {
            let mut out = sample.clone();
            out.match_label = 1;
            let donor = &batch[src];
            if donor.word_ids != sample.word_ids {
                out.word_ids = donor.word_ids.clone();
                out.word_segments = donor.word_segments.clone();
                out.sentence_breaks = donor.sentence_breaks.clone();
                out.match_label = 0;
            }
            out
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskWeights {
    pub mlm: f64,
    pub action: f64,
    pub object: f64,
    pub matching: f64,
}

impl Default for TaskWeights {
    fn default() -> Self {
        Self { mlm: 1.0, action: 1.0, object: 1.0, matching: 1.0 }
    }
}

/// Per-task losses of one step.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossBreakdown {
    pub mlm: f64,
    pub action: f64,
    pub object: f64,
    pub matching: f64,
    pub total: f64,
    pub masked_words: usize,
    pub masked_actions: usize,
    pub masked_regions: usize,
    pub pairs: usize,
}

impl LossBreakdown {
    /// `step<TAB>mlm<TAB>action<TAB>object<TAB>match<TAB>total`
    pub fn log_line(&self, step: usize) -> String {
        format!(
            "{step}\t{:.10}\t{:.10}\t{:.10}\t{:.10}\t{:.10}",
            self.mlm, self.action, self.object, self.matching, self.total
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub weights: TaskWeights,
    pub adam: AdamConfig,
    /// Probability that a sample is turned into a negative pair.
    pub negative_rate: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 8,
            weights: TaskWeights::default(),
            adam: AdamConfig::default(),
            negative_rate: 0.5,
        }
    }
}

/// Loss terms recorded on a tape for a masked batch.
pub struct ObjectiveVars {
    pub mlm: Var,
    pub action: Var,
    pub object: Var,
    pub matching: Var,
    pub total: Var,
}

/// Builds all four losses over one forward pass of a batch.
pub fn objective_vars(
    tape: &mut Tape,
    heads: &HeadVars,
    layout: &BatchLayout,
    plans: &[MaskingPlan],
    match_labels: &[u8],
    weights: &TaskWeights,
) -> Result<ObjectiveVars> {
    let text_start = |b: usize| layout.groups(Stream::Text)[b].start;
    let action_start = |b: usize| layout.groups(Stream::Action)[b].start;
    let region_start = |b: usize| layout.groups(Stream::Region)[b].start;

    let (mut rows, mut targets) = (Vec::new(), Vec::new());
    for (b, p) in plans.iter().enumerate() {
        for m in &p.words {
            rows.push(text_start(b) + m.stream_row);
            targets.push(m.word_id as usize);
        }
    }
    let picked = tape.gather_rows(heads.mlm_logits, &rows)?;
    let mlm = tape.cross_entropy(picked, &targets)?;

    let (mut rows, mut targets) = (Vec::new(), Vec::new());
    for (b, p) in plans.iter().enumerate() {
        for m in &p.actions {
            rows.push(action_start(b) + m.stream_row);
            targets.push(m.label as usize);
        }
    }
    let picked = tape.gather_rows(heads.action_logits, &rows)?;
    let action = tape.cross_entropy(picked, &targets)?;

    let mut rows = Vec::new();
    for (b, p) in plans.iter().enumerate() {
        rows.extend(p.regions.iter().map(|m| region_start(b) + m.stream_row));
    }
    let classes = tape.value(heads.object_logits).cols();
    let teacher = stack_rows(plans.iter().flat_map(|p| p.regions.iter().map(|m| &m.teacher)), classes)?;
    let picked = tape.gather_rows(heads.object_logits, &rows)?;
    let object = tape.kl_divergence(&teacher, picked)?;

    let matching = tape.bce_with_logits(heads.match_logits, match_labels)?;
    let total = tape.weighted_sum(&[
        (mlm, weights.mlm),
        (action, weights.action),
        (object, weights.object),
        (matching, weights.matching),
    ])?;
    Ok(ObjectiveVars { mlm, action, object, matching, total })
}

/// Builds negatives, masks, runs one forward/backward pass and one Adam
/// update.
pub fn pretrain_step(
    batch: &[VideoTextSample],
    params: &mut ModelParams,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::Validation("empty training batch".into()));
    }
    let paired = if batch.len() >= 2 {
        make_negative_pairs(batch, cfg.negative_rate, rng)?
    } else {
        batch.to_vec()
    };
    let mut seqs = Vec::with_capacity(paired.len());
    let mut plans = Vec::with_capacity(paired.len());
    for s in &paired {
        let seq = build_sequence(s)?;
        let (masked, plan) = apply_masking(s, &seq, params.config.mask_rate, rng)?;
        seqs.push(masked);
        plans.push(plan);
    }
    let labels: Vec<u8> = paired.iter().map(|s| s.match_label).collect();
    let refs: Vec<&InputSequence> = seqs.iter().collect();

    let mut tape = Tape::new();
    let (layout, fwd) = encode_batch(&mut tape, params, &refs, Coupling::Tangled)?;
    let heads = heads_vars(&mut tape, params, &fwd)?;
    let obj = objective_vars(&mut tape, &heads, &layout, &plans, &labels, &cfg.weights)?;
    tape.backward(obj.total, &mut params.store)?;
    adam_step(&mut params.store, &cfg.adam);

    let scalar = |v: Var| tape.value(v).data()[0];
    Ok(LossBreakdown {
        mlm: scalar(obj.mlm),
        action: scalar(obj.action),
        object: scalar(obj.object),
        matching: scalar(obj.matching),
        total: scalar(obj.total),
        masked_words: plans.iter().map(|p| p.words.len()).sum(),
        masked_actions: plans.iter().map(|p| p.actions.len()).sum(),
        masked_regions: plans.iter().map(|p| p.regions.len()).sum(),
        pairs: labels.len(),
    })
}

/// Runs `cfg.steps` steps over `train`, drawing batches from a reshuffled
/// pass over the data. Step `t` uses the substream `rng.fork(t)`.
pub fn pretrain(
    params: &mut ModelParams,
    train: &[VideoTextSample],
    cfg: &TrainConfig,
    rng: &Rng,
    mut on_step: impl FnMut(usize, &LossBreakdown),
) -> Result<Vec<LossBreakdown>> {
    if train.is_empty() && cfg.steps > 0 {
        return Err(Error::Validation("no training samples".into()));
    }
    let mut order_rng = rng.fork(u64::MAX);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if cursor == order.len() {
                order = (0..train.len()).collect();
                order_rng.shuffle(&mut order);
                cursor = 0;
            }
            batch.push(train[order[cursor]].clone());
            cursor += 1;
        }
        let mut step_rng = rng.fork(step as u64);
        let loss = pretrain_step(&batch, params, cfg, &mut step_rng)?;
        on_step(step, &loss);
        history.push(loss);
    }
    Ok(history)
}

#![allow(dead_code)]

pub mod layout;
pub mod oracle;

use tangled::corpus::{generate, Dataset, Split, WorldSpec};
use tangled::model::ModelConfig;
use tangled::numerics::{Rng, Tensor};
use tangled::sequence::{BoundingBox, Clip, Region, VideoTextSample};

/// Two layers, width 16, two heads; small vocabulary and class counts.
pub fn tiny_world() -> WorldSpec {
    WorldSpec {
        num_actions: 4,
        num_object_classes: 8,
        vocab_words: 27,
        action_feature_dim: 6,
        region_feature_dim: 5,
        clips_per_sample: 2,
        frames_per_clip: 2,
        regions_per_frame: 2,
        objects_per_clip: 2,
        words_per_clip: 3,
        num_train: 16,
        num_val: 8,
        seed: 3,
        ..WorldSpec::default()
    }
}

pub fn tiny_config(world: &WorldSpec) -> ModelConfig {
    ModelConfig {
        num_layers: 2,
        hidden: 16,
        num_heads: 2,
        ff_width: 32,
        vocab_size: world.vocab_size(),
        num_actions: world.num_actions,
        num_object_classes: world.num_object_classes,
        max_positions: 64,
        max_segments: 8,
        action_feature_dim: world.action_feature_dim,
        region_feature_dim: world.region_feature_dim,
        ..ModelConfig::default()
    }
}

pub fn tiny_dataset() -> Dataset {
    generate(&tiny_world()).unwrap()
}

pub fn tiny_samples(split: Split) -> Vec<VideoTextSample> {
    tiny_dataset().samples(split)
}

/// Random well-formed sample with arbitrary block sizes.
pub fn random_sample(rng: &mut Rng, d_a: usize, d_r: usize, classes: usize) -> VideoTextSample {
    let n = 1 + rng.below(8);
    let s = 1 + rng.below(4);
    let word_ids = (0..n).map(|_| 5 + rng.below(20) as u32).collect();
    let mut word_segments: Vec<u32> = (0..n).map(|_| rng.below(s) as u32).collect();
    word_segments.sort_unstable();
    let sentence_breaks = (0..n.saturating_sub(1)).filter(|_| rng.bernoulli(0.3)).collect();
    let clips = (0..s)
        .map(|_| Clip {
            action_feature: vec_of(rng, d_a),
            action_label: 0,
            frames: (0..rng.below(3))
                .map(|_| (0..rng.below(6)).map(|_| random_region(rng, d_r, classes)).collect())
                .collect(),
        })
        .collect();
    VideoTextSample { id: 0, word_ids, word_segments, sentence_breaks, clips, match_label: 1 }
}

pub fn random_region(rng: &mut Rng, d_r: usize, classes: usize) -> Region {
    let x1 = rng.below(50) as f64;
    let y1 = rng.below(50) as f64;
    let mut teacher: Vec<f64> = (0..classes).map(|_| rng.uniform() + 0.01).collect();
    let z: f64 = teacher.iter().sum();
    teacher.iter_mut().for_each(|t| *t /= z);
    Region {
        feature: vec_of(rng, d_r),
        bbox: BoundingBox {
            x1,
            y1,
            x2: x1 + 1.0 + rng.below(40) as f64,
            y2: y1 + 1.0 + rng.below(40) as f64,
            frame_width: 100.0,
            frame_height: 100.0,
        },
        teacher: Tensor::vector(teacher),
        object_label: 0,
    }
}

pub fn vec_of(rng: &mut Rng, n: usize) -> Tensor {
    Tensor::vector((0..n).map(|_| rng.normal()).collect())
}

use tangled::model::{encode_batch, heads_vars, Coupling, ModelParams};
use tangled::numerics::Tape;
use tangled::objectives::{apply_masking, make_negative_pairs, objective_vars, MaskingPlan, TaskWeights};
use tangled::sequence::{build_sequence, InputSequence};

/// A fixed masked batch with negatives, so the loss is a pure function of
/// the parameters.
pub struct MaskedBatch {
    pub seqs: Vec<InputSequence>,
    pub plans: Vec<MaskingPlan>,
    pub labels: Vec<u8>,
}

pub fn masked_batch(samples: &[VideoTextSample], rate: f64, seed: u64) -> MaskedBatch {
    let mut rng = Rng::new(seed);
    let paired = make_negative_pairs(samples, 0.5, &mut rng).unwrap();
    let (mut seqs, mut plans) = (vec![], vec![]);
    for s in &paired {
        let (seq, plan) = apply_masking(s, &build_sequence(s).unwrap(), rate, &mut rng).unwrap();
        seqs.push(seq);
        plans.push(plan);
    }
    MaskedBatch { seqs, plans, labels: paired.iter().map(|s| s.match_label).collect() }
}

/// Total loss; when `store_grads` is set, gradients are left in the store.
pub fn batch_loss(params: &mut ModelParams, batch: &MaskedBatch, weights: &TaskWeights, store_grads: bool) -> f64 {
    let refs: Vec<&InputSequence> = batch.seqs.iter().collect();
    let mut tape = Tape::new();
    let (layout, fwd) = encode_batch(&mut tape, params, &refs, Coupling::Tangled).unwrap();
    let hv = heads_vars(&mut tape, params, &fwd).unwrap();
    let obj = objective_vars(&mut tape, &hv, &layout, &batch.plans, &batch.labels, weights).unwrap();
    if store_grads {
        tape.backward(obj.total, &mut params.store).unwrap();
    }
    tape.value(obj.total).data()[0]
}

/// Tiny model for finite-difference checks: weights near 0.2 in scale so
/// every path carries a visible gradient while the loss stays smooth.
pub fn gradcheck_params() -> ModelParams {
    let cfg = ModelConfig { init_std: 0.02, ..tiny_config(&tiny_world()) };
    let mut params = ModelParams::init(&cfg, &mut Rng::new(17)).unwrap();
    for p in params.store.iter_mut() {
        if p.name.ends_with("weight") || p.name.starts_with("embed.") {
            p.value = p.value.scale(10.0);
        }
    }
    params
}

/// Denominator floor for relative gradient error. Central differences at
/// h = 1e-5 on a loss near 10 carry about 1e-10 of roundoff, so gradients
/// smaller than this are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-5;

/// Largest relative error between analytic and central-difference
/// gradients over every scalar parameter.
pub fn max_gradient_error(params: &mut ModelParams, batch: &MaskedBatch, weights: &TaskWeights) -> (f64, String) {
    batch_loss(params, batch, weights, true);
    let h = 1e-5;
    let ids: Vec<_> = params.store.iter().map(|(id, _)| id).collect();
    let mut worst = (0.0, String::new());
    for id in ids {
        for k in 0..params.store.get(id).value.len() {
            let orig = params.store.get(id).value.data()[k];
            params.store.get_mut(id).value.data_mut()[k] = orig + h;
            let up = batch_loss(params, batch, weights, false);
            params.store.get_mut(id).value.data_mut()[k] = orig - h;
            let down = batch_loss(params, batch, weights, false);
            params.store.get_mut(id).value.data_mut()[k] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = params.store.get(id).gradient.data()[k];
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(REL_FLOOR);
            if rel > worst.0 {
                worst = (rel, format!("{}[{k}] analytic {an:e} numeric {fd:e}", params.store.get(id).name));
            }
        }
    }
    worst
}

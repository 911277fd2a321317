//! Retrieval metrics, relevance scoring and step localization.

use std::fmt::Write as _;

use crate::corpus::WorldSpec;
use crate::error::{Error, Result};
use crate::model::{encode_batch, heads_vars, match_scores, Coupling, ModelParams};
use crate::numerics::{Tape, Tensor};
use crate::sequence::{build_sequence, InputSequence, Stream, VideoTextSample};

/// Relevance of `Q` text queries against `G` gallery items.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub scores: Tensor,
    pub ground_truth: Vec<usize>,
}

impl ScoreMatrix {
    pub fn new(scores: Tensor, ground_truth: Vec<usize>) -> Result<Self> {
        if scores.shape().len() != 2 || scores.shape()[0] != ground_truth.len() {
            return Err(Error::dim("ScoreMatrix", scores.shape(), &[ground_truth.len()]));
        }
        let g = scores.shape()[1];
        if let Some(&bad) = ground_truth.iter().find(|&&t| t >= g) {
            return Err(Error::Index { context: "ground truth", index: bad, bound: g });
        }
        Ok(Self { scores, ground_truth })
    }

    pub fn num_queries(&self) -> usize {
        self.ground_truth.len()
    }

    pub fn gallery_size(&self) -> usize {
        self.scores.shape()[1]
    }

    /// 1-based rank of each query's correct item. Items scoring strictly
    /// higher rank ahead, and so do equal-scoring items with a smaller index.
    pub fn ranks(&self) -> Vec<usize> {
        self.ground_truth
            .iter()
            .enumerate()
            .map(|(q, &gt)| {
                let row = self.scores.row(q);
                let s = row[gt];
                1 + row
                    .iter()
                    .enumerate()
                    .filter(|&(j, &x)| x > s || (x == s && j < gt))
                    .count()
            })
            .collect()
    }
}

/// Fraction of queries whose correct item ranks within the top `k`.
pub fn recall_at_k(sm: &ScoreMatrix, k: usize) -> Result<f64> {
    if k == 0 || k > sm.gallery_size() {
        return Err(Error::Validation(format!("k = {k} outside 1..={}", sm.gallery_size())));
    }
    let ranks = sm.ranks();
    if ranks.is_empty() {
        return Ok(0.0);
    }
    Ok(ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64)
}

/// Lower median of the ranks.
pub fn median_rank(sm: &ScoreMatrix) -> Result<f64> {
    let mut ranks = sm.ranks();
    if ranks.is_empty() {
        return Err(Error::Validation("median rank of an empty query set".into()));
    }
    ranks.sort_unstable();
    Ok(ranks[(ranks.len() - 1) / 2] as f64)
}

/// Ordered `(name, value)` metrics for a key-value report.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Report {
    pub entries: Vec<(String, f64)>,
}

impl Report {
    pub fn push(&mut self, name: impl Into<String>, value: f64) {
        self.entries.push((name.into(), value));
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.entries.iter().find(|(n, _)| n == name).map(|&(_, v)| v)
    }

    /// One `name=value` line per metric.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for (n, v) in &self.entries {
            writeln!(s, "{n}={v:.6}").unwrap();
        }
        s
    }
}

/// R@1, R@5, R@10 (where the gallery is large enough) and the median rank.
pub fn retrieval_report(sm: &ScoreMatrix) -> Result<Report> {
    let mut r = Report::default();
    for k in [1, 5, 10] {
        if k <= sm.gallery_size() {
            r.push(format!("R@{k}"), recall_at_k(sm, k)?);
        }
    }
    r.push("MedianR", median_rank(sm)?);
    r.push("queries", sm.num_queries() as f64);
    r.push("gallery", sm.gallery_size() as f64);
    Ok(r)
}

/// The text half of a sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Narration {
    pub word_ids: Vec<u32>,
    pub word_segments: Vec<u32>,
    pub sentence_breaks: Vec<usize>,
}

impl Narration {
    pub fn of(sample: &VideoTextSample) -> Self {
        Self {
            word_ids: sample.word_ids.clone(),
            word_segments: sample.word_segments.clone(),
            sentence_breaks: sample.sentence_breaks.clone(),
        }
    }

    /// `clips` paired with this text.
    pub fn pair_with(&self, clips: &VideoTextSample) -> VideoTextSample {
        VideoTextSample {
            id: clips.id,
            word_ids: self.word_ids.clone(),
            word_segments: self.word_segments.clone(),
            sentence_breaks: self.sentence_breaks.clone(),
            clips: clips.clips.clone(),
            match_label: u8::from(self.word_ids == clips.word_ids),
        }
    }
}

const SCORE_CHUNK: usize = 32;

fn score_samples(params: &ModelParams, pairs: &[VideoTextSample]) -> Result<Vec<f64>> {
    let seqs = pairs.iter().map(build_sequence).collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(seqs.len());
    for chunk in seqs.chunks(SCORE_CHUNK) {
        let refs: Vec<&InputSequence> = chunk.iter().collect();
        out.extend(match_scores(params, &refs)?);
    }
    Ok(out)
}

/// `scores[i][j]` is the match score of text `i` with the clips of
/// `clipsets[j]`; the correct item of query `i` is gallery item `i`.
pub fn score_pairs(params: &ModelParams, texts: &[Narration], clipsets: &[VideoTextSample]) -> Result<ScoreMatrix> {
    if texts.len() > clipsets.len() {
        return Err(Error::Validation("more queries than gallery items".into()));
    }
    let g = clipsets.len();
    let mut scores = Vec::with_capacity(texts.len() * g);
    for t in texts {
        let pairs: Vec<_> = clipsets.iter().map(|c| t.pair_with(c)).collect();
        scores.extend(score_samples(params, &pairs)?);
    }
    ScoreMatrix::new(Tensor::new(vec![texts.len(), g], scores)?, (0..texts.len()).collect())
}

/// Index of the candidate text with the highest relevance to `clips`;
/// ties go to the smallest index.
pub fn localize_steps(params: &ModelParams, candidates: &[Narration], clips: &VideoTextSample) -> Result<usize> {
    if candidates.is_empty() {
        return Err(Error::Validation("no candidate steps".into()));
    }
    let pairs: Vec<_> = candidates.iter().map(|c| c.pair_with(clips)).collect();
    Ok(argmax_first(&score_samples(params, &pairs)?))
}

pub fn argmax_first(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// One candidate step text per action: that action's verb on its own.
/// Candidate `a` describes action `a`.
pub fn step_candidates(world: &WorldSpec) -> Vec<Narration> {
    (0..world.num_actions)
        .map(|a| Narration { word_ids: vec![world.verb_word(a)], word_segments: vec![0], sentence_breaks: vec![] })
        .collect()
}

/// Clip `clip` of `sample` as a one-clip video with no text.
pub fn clip_video(sample: &VideoTextSample, clip: usize) -> Result<VideoTextSample> {
    let c = sample.clips.get(clip).ok_or(Error::Index { context: "clip_video", index: clip, bound: sample.clips.len() })?;
    Ok(VideoTextSample {
        id: sample.id,
        word_ids: vec![],
        word_segments: vec![],
        sentence_breaks: vec![],
        clips: vec![c.clone()],
        match_label: 0,
    })
}

/// Fraction of clips whose own action's step text scores highest against
/// the clip alone.
pub fn localization_accuracy(params: &ModelParams, world: &WorldSpec, samples: &[VideoTextSample]) -> Result<f64> {
    let cands = step_candidates(world);
    let mut hits = 0;
    let mut total = 0;
    for s in samples {
        for (ci, clip) in s.clips.iter().enumerate() {
            let video = clip_video(s, ci)?;
            hits += usize::from(localize_steps(params, &cands, &video)? == clip.action_label as usize);
            total += 1;
        }
    }
    Ok(if total == 0 { 0.0 } else { hits as f64 / total as f64 })
}

/// Accuracy of the action head when each action is masked on its own.
pub fn masked_action_accuracy(params: &ModelParams, samples: &[VideoTextSample]) -> Result<f64> {
    let mut hits = 0;
    let mut total = 0;
    for s in samples {
        let seq = build_sequence(s)?;
        let actions = seq.stream_positions(Stream::Action);
        let rows = seq.stream_rows();
        let mut seqs = Vec::new();
        let mut targets = Vec::new();
        for (ci, clip) in s.clips.iter().enumerate() {
            let pos = actions[ci];
            let mut masked = seq.clone();
            if let Some(v) = masked.elements[pos].visual.as_mut() {
                v.data_mut().fill(0.0);
            }
            seqs.push(masked);
            targets.push((rows[pos], clip.action_label as usize));
        }
        let refs: Vec<&InputSequence> = seqs.iter().collect();
        let mut tape = Tape::new();
        let (layout, fwd) = encode_batch(&mut tape, params, &refs, Coupling::Tangled)?;
        let heads = heads_vars(&mut tape, params, &fwd)?;
        let logits = tape.value(heads.action_logits);
        for (b, &(row, label)) in targets.iter().enumerate() {
            let r = layout.groups(Stream::Action)[b].start + row;
            hits += usize::from(argmax_first(logits.row(r)) == label);
            total += 1;
        }
    }
    Ok(if total == 0 { 0.0 } else { hits as f64 / total as f64 })
}

/// Accuracy at threshold 0.5 over each sample's true pair plus one
/// negative pairing its clips with the next sample's text.
pub fn matching_accuracy(params: &ModelParams, samples: &[VideoTextSample]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::Validation("matching accuracy needs at least two samples".into()));
    }
    let n = samples.len();
    let mut pairs = Vec::with_capacity(2 * n);
    for (i, s) in samples.iter().enumerate() {
        pairs.push(s.clone());
        pairs.push(Narration::of(&samples[(i + 1) % n]).pair_with(s));
    }
    let scores = score_samples(params, &pairs)?;
    let hits = pairs
        .iter()
        .zip(&scores)
        .filter(|(p, &s)| (s > 0.5) == (p.match_label == 1))
        .count();
    Ok(hits as f64 / pairs.len() as f64)
}

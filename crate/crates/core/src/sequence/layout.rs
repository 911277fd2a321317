use crate::error::Result;
use crate::numerics::Tensor;
use crate::sequence::sample::{spatial_position_vector, SpecialToken, VideoTextSample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    Text,
    Action,
    Region,
    Special,
}

/// Which of the three transformers processes a position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stream {
    Text,
    Action,
    Region,
}

/// Where a sequence element came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Source {
    Cls,
    Word(usize),
    /// `[SEP]` following word `i` between two sentences.
    SentenceSep(usize),
    TextSep,
    Action(usize),
    ActionSep,
    Region { clip: usize, frame: usize, index: usize },
    /// `[SEP]` following the region run of clip `i`.
    ClipSep(usize),
    FinalSep,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Element {
    pub token_id: u32,
    pub modality: Modality,
    pub stream: Stream,
    pub position_index: usize,
    pub segment_index: usize,
    /// Action or region feature.
    pub visual: Option<Tensor>,
    /// 5-D box descriptor, regions only.
    pub spatial: Option<Tensor>,
    pub source: Source,
}

/// Unified `[CLS] text [SEP] actions [SEP] regions [SEP]` stream.
#[derive(Debug, Clone, PartialEq)]
pub struct InputSequence {
    pub elements: Vec<Element>,
}

impl InputSequence {
    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn token_ids(&self) -> Vec<u32> {
        self.elements.iter().map(|e| e.token_id).collect()
    }

    /// Positions belonging to `stream`, in sequence order.
    pub fn stream_positions(&self, stream: Stream) -> Vec<usize> {
        self.elements
            .iter()
            .enumerate()
            .filter(|(_, e)| e.stream == stream)
            .map(|(i, _)| i)
            .collect()
    }

    /// Row of each position inside its own stream.
    pub fn stream_rows(&self) -> Vec<usize> {
        let mut counts = [0usize; 3];
        self.elements
            .iter()
            .map(|e| {
                let c = &mut counts[stream_slot(e.stream)];
                *c += 1;
                *c - 1
            })
            .collect()
    }

    pub fn stream_len(&self, stream: Stream) -> usize {
        self.elements.iter().filter(|e| e.stream == stream).count()
    }
}

pub(crate) fn stream_slot(s: Stream) -> usize {
    match s {
        Stream::Text => 0,
        Stream::Action => 1,
        Stream::Region => 2,
    }
}

struct Builder {
    elements: Vec<Element>,
    next_position: usize,
}

impl Builder {
    fn special(&mut self, token: SpecialToken, stream: Stream, segment: usize, source: Source) {
        let position_index = self.next_position;
        self.next_position += 1;
        self.elements.push(Element {
            token_id: token.id(),
            modality: Modality::Special,
            stream,
            position_index,
            segment_index: segment,
            visual: None,
            spatial: None,
            source,
        });
    }
}

/// Lays out a sample as
/// `[CLS] w.. [SEP] a.. [SEP] r.. [SEP]`, with `[SEP]`s between sentences
/// and between the region runs of consecutive clips.
///
/// Every element consumes its own position index except regions, which
/// share one index per frame.
pub fn build_sequence(sample: &VideoTextSample) -> Result<InputSequence> {
    sample.validate()?;
    let mut b = Builder {
        elements: Vec::with_capacity(
            sample.word_ids.len() + sample.sentence_breaks.len() + sample.clips.len() + sample.num_regions() + 8,
        ),
        next_position: 0,
    };
    b.special(SpecialToken::Cls, Stream::Text, 0, Source::Cls);

    let mut breaks = sample.sentence_breaks.iter().peekable();
    for (i, (&w, &seg)) in sample.word_ids.iter().zip(&sample.word_segments).enumerate() {
        let position_index = b.next_position;
        b.next_position += 1;
        b.elements.push(Element {
            token_id: w,
            modality: Modality::Text,
            stream: Stream::Text,
            position_index,
            segment_index: seg as usize,
            visual: None,
            spatial: None,
            source: Source::Word(i),
        });
        if breaks.peek() == Some(&&i) {
            breaks.next();
            b.special(SpecialToken::Sep, Stream::Text, seg as usize, Source::SentenceSep(i));
        }
    }
    let last_text_segment = *sample.word_segments.last().unwrap_or(&0) as usize;
    b.special(SpecialToken::Sep, Stream::Text, last_text_segment, Source::TextSep);

    for (ci, clip) in sample.clips.iter().enumerate() {
        let position_index = b.next_position;
        b.next_position += 1;
        b.elements.push(Element {
            token_id: SpecialToken::Act.id(),
            modality: Modality::Action,
            stream: Stream::Action,
            position_index,
            segment_index: ci,
            visual: Some(clip.action_feature.clone()),
            spatial: None,
            source: Source::Action(ci),
        });
    }
    let last_clip = sample.clips.len() - 1;
    b.special(SpecialToken::Sep, Stream::Action, last_clip, Source::ActionSep);

    let mut previous_run: Option<usize> = None;
    for (ci, clip) in sample.clips.iter().enumerate() {
        if clip.num_regions() == 0 {
            continue;
        }
        if let Some(prev) = previous_run {
            b.special(SpecialToken::Sep, Stream::Region, prev, Source::ClipSep(prev));
        }
        previous_run = Some(ci);
        for (fi, frame) in clip.frames.iter().enumerate() {
            if frame.is_empty() {
                continue;
            }
            let position_index = b.next_position;
            b.next_position += 1;
            for (ri, region) in frame.iter().enumerate() {
                b.elements.push(Element {
                    token_id: SpecialToken::Region.id(),
                    modality: Modality::Region,
                    stream: Stream::Region,
                    position_index,
                    segment_index: ci,
                    visual: Some(region.feature.clone()),
                    spatial: Some(spatial_position_vector(&region.bbox)?),
                    source: Source::Region { clip: ci, frame: fi, index: ri },
                });
            }
        }
    }
    b.special(SpecialToken::Sep, Stream::Region, last_clip, Source::FinalSep);

    Ok(InputSequence { elements: b.elements })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sequence::sample::{BoundingBox, Clip, Region};

    fn region() -> Region {
        Region {
            feature: Tensor::vector(vec![0.5, -0.5]),
            bbox: BoundingBox { x1: 1.0, y1: 2.0, x2: 5.0, y2: 6.0, frame_width: 10.0, frame_height: 10.0 },
            teacher: Tensor::vector(vec![0.25, 0.75]),
            object_label: 1,
        }
    }

    fn clip(frames: Vec<Vec<Region>>) -> Clip {
        Clip { action_feature: Tensor::vector(vec![1.0, 2.0]), action_label: 0, frames }
    }

    fn sample(words: usize, clips: Vec<Clip>) -> VideoTextSample {
        VideoTextSample {
            id: 0,
            word_ids: (0..words as u32).map(|w| w + 5).collect(),
            word_segments: vec![0; words],
            sentence_breaks: vec![],
            clips,
            match_label: 1,
        }
    }

    use SpecialToken as T;

    #[test]
    fn minimal_layout() {
        let s = sample(2, vec![clip(vec![vec![region(), region()]])]);
        let seq = build_sequence(&s).unwrap();
        let ids = seq.token_ids();
        assert_eq!(ids, vec![T::Cls.id(), 5, 6, T::Sep.id(), T::Act.id(), T::Sep.id(), T::Region.id(), T::Region.id(), T::Sep.id()]);
        assert_eq!(seq.len(), 9);
        // both regions of the frame share one position index
        assert_eq!(seq.elements[6].position_index, seq.elements[7].position_index);
        assert_eq!(seq.elements[8].position_index, seq.elements[6].position_index + 1);
    }

    #[test]
    fn empty_region_block_keeps_terminal_sep() {
        let s = sample(1, vec![clip(vec![vec![]]), clip(vec![])]);
        let ids = build_sequence(&s).unwrap().token_ids();
        assert_eq!(ids, vec![T::Cls.id(), 5, T::Sep.id(), T::Act.id(), T::Act.id(), T::Sep.id(), T::Sep.id()]);
    }

    #[test]
    fn one_sep_between_two_clips_of_regions() {
        let s = sample(1, vec![clip(vec![vec![region()]]), clip(vec![vec![region()], vec![region()]])]);
        let seq = build_sequence(&s).unwrap();
        let region_block: Vec<_> = seq.elements[6..].iter().map(|e| e.source).collect();
        assert_eq!(
            region_block,
            vec![
                Source::Region { clip: 0, frame: 0, index: 0 },
                Source::ClipSep(0),
                Source::Region { clip: 1, frame: 0, index: 0 },
                Source::Region { clip: 1, frame: 1, index: 0 },
                Source::FinalSep,
            ]
        );
        let p: Vec<_> = seq.elements[6..].iter().map(|e| e.position_index).collect();
        assert_eq!(p, vec![6, 7, 8, 9, 10]);
    }

    #[test]
    fn sentence_breaks_insert_text_seps() {
        let mut s = sample(3, vec![clip(vec![])]);
        s.sentence_breaks = vec![0];
        let ids = build_sequence(&s).unwrap().token_ids();
        assert_eq!(&ids[..6], &[T::Cls.id(), 5, T::Sep.id(), 6, 7, T::Sep.id()]);
    }

    #[test]
    fn empty_inputs_are_rejected() {
        assert!(build_sequence(&sample(0, vec![clip(vec![])])).is_err());
        assert!(build_sequence(&sample(2, vec![])).is_err());
    }

    #[test]
    fn stream_rows_index_within_streams() {
        let s = sample(2, vec![clip(vec![vec![region()]])]);
        let seq = build_sequence(&s).unwrap();
        assert_eq!(seq.stream_rows(), vec![0, 1, 2, 3, 0, 1, 0, 1]);
        assert_eq!(seq.stream_len(Stream::Text), 4);
        assert_eq!(seq.stream_len(Stream::Action), 2);
        assert_eq!(seq.stream_len(Stream::Region), 2);
    }
}

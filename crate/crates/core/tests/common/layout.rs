use tangled::sequence::{InputSequence, Source, SpecialToken, VideoTextSample};

/// Grammar check: `[CLS] text [SEP] actions [SEP] regions [SEP]`.
pub fn assert_grammar(sample: &VideoTextSample, seq: &InputSequence) {
    let sep = SpecialToken::Sep.id();
    let e = &seq.elements;
    assert_eq!(e[0].token_id, SpecialToken::Cls.id());
    let mut i = 1;
    for (w, &word) in sample.word_ids.iter().enumerate() {
        assert_eq!(e[i].token_id, word);
        assert_eq!(e[i].source, Source::Word(w));
        i += 1;
        if sample.sentence_breaks.contains(&w) {
            assert_eq!(e[i].token_id, sep);
            i += 1;
        }
    }
    assert_eq!(e[i].token_id, sep);
    i += 1;
    for _ in &sample.clips {
        assert_eq!(e[i].token_id, SpecialToken::Act.id());
        i += 1;
    }
    assert_eq!(e[i].token_id, sep);
    i += 1;
    let runs: Vec<usize> = sample.clips.iter().map(|c| c.num_regions()).filter(|&n| n > 0).collect();
    for (k, &n) in runs.iter().enumerate() {
        if k > 0 {
            assert_eq!(e[i].token_id, sep, "clip boundary");
            i += 1;
        }
        for _ in 0..n {
            assert_eq!(e[i].token_id, SpecialToken::Region.id());
            i += 1;
        }
    }
    assert_eq!(e[i].token_id, sep);
    assert_eq!(i + 1, e.len());
    let expected = 1 + sample.word_ids.len() + sample.sentence_breaks.len() + 1 + sample.clips.len() + 1
        + sample.num_regions()
        + runs.len().saturating_sub(1)
        + 1;
    assert_eq!(e.len(), expected);
}

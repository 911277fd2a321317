mod common;

use tangled::corpus::{generate, Split, World, WorldSpec, FRAME_SIZE};
use tangled::numerics::Tensor;

fn world(num: usize, sigma: f64) -> (World, Vec<tangled::sequence::VideoTextSample>) {
    let spec = WorldSpec { num_train: num, num_val: 0, noise_sigma: sigma, ..WorldSpec::default() };
    let ds = generate(&spec).unwrap();
    (World::new(&spec).unwrap(), ds.samples(Split::Train))
}

#[test]
fn samples_are_well_formed() {
    let (w, samples) = world(300, 0.1);
    let spec = &w.spec;
    for (i, s) in samples.iter().enumerate() {
        s.validate().unwrap();
        assert_eq!(s.id, i as u64);
        assert_eq!(s.match_label, 1);
        assert_eq!(s.clips.len(), spec.clips_per_sample);
        assert_eq!(s.word_ids.len(), spec.clips_per_sample * spec.words_per_clip);
        for (ci, clip) in s.clips.iter().enumerate() {
            let window: Vec<u32> =
                s.word_ids.iter().zip(&s.word_segments).filter(|(_, &g)| g as usize == ci).map(|(&w, _)| w).collect();
            assert_eq!(window.len(), spec.words_per_clip);
            assert!(window.contains(&spec.verb_word(clip.action_label as usize)));
            assert_eq!(clip.frames.len(), spec.frames_per_clip);
            for frame in &clip.frames {
                assert_eq!(frame.len(), spec.regions_per_frame);
                for r in frame {
                    assert!(window.contains(&spec.noun_word(r.object_label as usize)));
                    let b = &r.bbox;
                    assert_eq!((b.frame_width, b.frame_height), (FRAME_SIZE, FRAME_SIZE));
                    assert!(0.0 <= b.x1 && b.x1 < b.x2 && b.x2 <= FRAME_SIZE);
                    assert!(0.0 <= b.y1 && b.y1 < b.y2 && b.y2 <= FRAME_SIZE);
                    assert!((r.teacher.sum() - 1.0).abs() < 1e-9);
                }
            }
        }
        assert_eq!(s.sentence_breaks.len(), spec.clips_per_sample - 1);
    }
}

#[test]
fn zero_noise_repeats_prototypes() {
    let (w, samples) = world(200, 0.0);
    let mut seen: Vec<Option<Tensor>> = vec![None; w.spec.num_actions];
    for clip in samples.iter().flat_map(|s| &s.clips) {
        let slot = &mut seen[clip.action_label as usize];
        match slot {
            Some(f) => assert_eq!(f, &clip.action_feature),
            None => *slot = Some(clip.action_feature.clone()),
        }
        assert_eq!(clip.action_feature.data(), w.action_prototypes.row(clip.action_label as usize));
        for r in clip.frames.iter().flatten() {
            assert_eq!(r.feature.data(), w.object_prototypes.row(r.object_label as usize));
        }
    }
    assert!(seen.iter().all(Option::is_some));
}

#[test]
fn teacher_is_peaked_on_the_true_object() {
    let (_, samples) = world(2000, 0.1);
    let regions: Vec<_> = samples.iter().flat_map(|s| &s.clips).flat_map(|c| c.frames.iter().flatten()).collect();
    assert!(regions.len() >= 10_000);
    let regions = &regions[..10_000];
    let argmax_hits = regions
        .iter()
        .filter(|r| tangled::eval::argmax_first(r.teacher.data()) == r.object_label as usize)
        .count();
    assert!(argmax_hits as f64 / 1e4 >= 0.99, "argmax agreement {argmax_hits}/10000");
    let peaked = regions.iter().filter(|r| r.teacher.data()[r.object_label as usize] >= 0.8).count();
    assert!(peaked as f64 / 1e4 >= 0.99, "mass >= 0.8 on {peaked}/10000");
}

/// Softmax regression on prototype affinities, fit by full-batch gradient
/// descent.
#[test]
fn action_identity_is_linearly_recoverable() {
    let (w, samples) = world(1200, 0.1);
    let a = w.spec.num_actions;
    let features = |f: &Tensor| -> Vec<f64> {
        (0..a)
            .map(|k| -f.data().iter().zip(w.action_prototypes.row(k)).map(|(x, p)| (x - p).powi(2)).sum::<f64>())
            .chain([1.0])
            .collect()
    };
    let data: Vec<(Vec<f64>, usize)> =
        samples.iter().flat_map(|s| &s.clips).map(|c| (features(&c.action_feature), c.action_label as usize)).collect();
    let (train, test) = data.split_at(data.len() / 2);
    let dim = a + 1;
    let mut wts = vec![vec![0.0; dim]; a];
    for _ in 0..300 {
        let mut grad = vec![vec![0.0; dim]; a];
        for (x, y) in train {
            let logits: Vec<f64> = wts.iter().map(|r| r.iter().zip(x).map(|(p, q)| p * q).sum()).collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            for k in 0..a {
                let p = (logits[k] - m).exp() / z - f64::from(k == *y);
                for j in 0..dim {
                    grad[k][j] += p * x[j] / train.len() as f64;
                }
            }
        }
        for k in 0..a {
            for j in 0..dim {
                wts[k][j] -= 0.5 * grad[k][j];
            }
        }
    }
    let correct = test
        .iter()
        .filter(|(x, y)| {
            let logits: Vec<f64> = wts.iter().map(|r| r.iter().zip(x).map(|(p, q)| p * q).sum()).collect();
            tangled::eval::argmax_first(&logits) == *y
        })
        .count();
    let acc = correct as f64 / test.len() as f64;
    assert!(acc > 0.95, "probe accuracy {acc}");
}

#[test]
fn invalid_specs_are_rejected() {
    for bad in [
        WorldSpec { num_actions: 0, ..WorldSpec::default() },
        WorldSpec { regions_per_frame: 6, ..WorldSpec::default() },
        WorldSpec { vocab_words: 20, ..WorldSpec::default() },
        WorldSpec { objects_per_clip: 0, ..WorldSpec::default() },
        WorldSpec { noise_sigma: -1.0, ..WorldSpec::default() },
        WorldSpec { objects_per_clip: 3, ..WorldSpec::default() },
        WorldSpec { task_persistence: 1.5, ..WorldSpec::default() },
    ] {
        assert!(generate(&bad).is_err(), "{bad:?}");
    }
}

#[test]
fn spec_keys_round_trip() {
    let spec = WorldSpec { seed: 77, noise_sigma: 0.25, ..WorldSpec::default() };
    let mut back = WorldSpec::default();
    for (k, v) in spec.to_pairs() {
        back.set(k, &v).unwrap();
    }
    assert_eq!(back, spec);
    let err = back.set("colour", "1").unwrap_err();
    assert!(err.to_string().contains("colour"));
    assert!(back.set("seed", "x").is_err());
}

#[test]
fn objects_and_fillers_follow_the_action() {
    let (w, samples) = world(300, 0.1);
    let spec = &w.spec;
    let first_filler = spec.first_filler_word();
    for s in &samples {
        for (ci, clip) in s.clips.iter().enumerate() {
            let a = clip.action_label as usize;
            for r in clip.frames.iter().flatten() {
                assert_eq!(r.object_label as usize % spec.num_actions, a);
            }
            for (&word, &g) in s.word_ids.iter().zip(&s.word_segments) {
                if g as usize == ci && word >= first_filler {
                    assert_eq!((word - first_filler) as usize % spec.num_actions, a);
                }
            }
        }
    }
    assert_eq!(spec.objects_of(3), vec![3, 11]);
}

#[test]
fn task_persistence_sets_clip_agreement() {
    let p: f64 = WorldSpec::default().task_persistence;
    let a = WorldSpec::default().num_actions as f64;
    let (_, samples) = world(3000, 0.1);
    let (mut same, mut pairs) = (0, 0);
    for s in &samples {
        for w in s.clips.windows(2) {
            same += usize::from(w[0].action_label == w[1].action_label);
            pairs += 1;
        }
    }
    // two clips agree when both repeat the main action or land on equal
    // draws otherwise
    let expect = p * p + (1.0 - p * p) / a;
    let got = same as f64 / pairs as f64;
    assert!((got - expect).abs() < 0.03, "agreement {got}, expected {expect}");

    let spec = WorldSpec { num_train: 50, num_val: 0, task_persistence: 1.0, ..WorldSpec::default() };
    for s in generate(&spec).unwrap().samples(Split::Train) {
        assert!(s.clips.iter().all(|c| c.action_label == s.clips[0].action_label));
    }
}

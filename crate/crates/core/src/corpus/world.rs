use crate::error::{Error, Result};
use crate::numerics::{ops, Rng, Tensor};
use crate::sequence::{BoundingBox, Clip, Region, VideoTextSample, FIRST_WORD_ID, MAX_REGIONS_PER_FRAME};

pub const FRAME_SIZE: f64 = 256.0;

/// Parameters of the synthetic video-text world.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldSpec {
    pub num_actions: usize,
    pub num_object_classes: usize,
    /// Word vocabulary, excluding the reserved special tokens.
    pub vocab_words: usize,
    pub action_feature_dim: usize,
    pub region_feature_dim: usize,
    pub clips_per_sample: usize,
    pub frames_per_clip: usize,
    pub regions_per_frame: usize,
    pub objects_per_clip: usize,
    pub words_per_clip: usize,
    pub noise_sigma: f64,
    /// Scale of the negative squared distances fed to the teacher softmax.
    pub teacher_sharpness: f64,
    /// Probability that a clip repeats its sample's main action instead of
    /// drawing a fresh one.
    pub task_persistence: f64,
    pub num_train: usize,
    pub num_val: usize,
    pub seed: u64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            num_actions: 8,
            num_object_classes: 16,
            vocab_words: 256,
            action_feature_dim: 12,
            region_feature_dim: 12,
            clips_per_sample: 3,
            frames_per_clip: 2,
            regions_per_frame: 2,
            objects_per_clip: 1,
            words_per_clip: 4,
            noise_sigma: 0.1,
            teacher_sharpness: 1.0,
            task_persistence: 0.7,
            num_train: 4000,
            num_val: 200,
            seed: 0,
        }
    }
}

macro_rules! world_keys {
    ($($field:ident),* $(,)?) => {
        impl WorldSpec {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($field)),*];

            pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
                vec![$((stringify!($field), format!("{:?}", self.$field))),*]
            }

            /// Sets one field from text. Unknown keys are an error.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $(stringify!($field) => {
                        self.$field = value
                            .trim()
                            .parse()
                            .map_err(|_| Error::config(key, format!("cannot parse `{value}`")))?;
                    })*
                    _ => return Err(Error::config(key, "unknown world key")),
                }
                Ok(())
            }
        }
    };
}

world_keys!(
    num_actions,
    num_object_classes,
    vocab_words,
    action_feature_dim,
    region_feature_dim,
    clips_per_sample,
    frames_per_clip,
    regions_per_frame,
    objects_per_clip,
    words_per_clip,
    noise_sigma,
    teacher_sharpness,
    task_persistence,
    num_train,
    num_val,
    seed,
);

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_actions", self.num_actions),
            ("num_object_classes", self.num_object_classes),
            ("action_feature_dim", self.action_feature_dim),
            ("region_feature_dim", self.region_feature_dim),
            ("clips_per_sample", self.clips_per_sample),
            ("words_per_clip", self.words_per_clip),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::config(k, "must be positive"));
            }
        }
        if self.regions_per_frame > MAX_REGIONS_PER_FRAME {
            return Err(Error::config("regions_per_frame", format!("at most {MAX_REGIONS_PER_FRAME}")));
        }
        if self.objects_per_clip > self.num_object_classes / self.num_actions {
            return Err(Error::config("objects_per_clip", "exceeds the objects tied to each action"));
        }
        if self.regions_per_frame > 0 && self.objects_per_clip == 0 {
            return Err(Error::config("objects_per_clip", "regions need at least one object per clip"));
        }
        if self.words_per_clip < 1 + self.objects_per_clip {
            return Err(Error::config("words_per_clip", "must hold the verb and every object noun"));
        }
        if 2 * self.num_actions + self.num_object_classes > self.vocab_words {
            return Err(Error::config(
                "vocab_words",
                "must leave at least one filler word per action after verbs and nouns",
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("noise_sigma", "must be finite and non-negative"));
        }
        if !(self.teacher_sharpness > 0.0 && self.teacher_sharpness.is_finite()) {
            return Err(Error::config("teacher_sharpness", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.task_persistence) {
            return Err(Error::config("task_persistence", "must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_words + FIRST_WORD_ID as usize
    }

    pub fn verb_word(&self, action: usize) -> u32 {
        FIRST_WORD_ID + action as u32
    }

    pub fn noun_word(&self, object: usize) -> u32 {
        FIRST_WORD_ID + (self.num_actions + object) as u32
    }

    pub fn first_filler_word(&self) -> u32 {
        FIRST_WORD_ID + (self.num_actions + self.num_object_classes) as u32
    }

    pub fn num_fillers(&self) -> usize {
        self.vocab_words - self.num_actions - self.num_object_classes
    }

    /// Object classes that can appear with `action`: those congruent to it
    /// modulo the number of actions.
    pub fn objects_of(&self, action: usize) -> Vec<usize> {
        (action..self.num_object_classes).step_by(self.num_actions).collect()
    }

    /// Filler indices (offsets from the first filler word) used with `action`.
    pub fn fillers_of(&self, action: usize) -> Vec<usize> {
        (action..self.num_fillers()).step_by(self.num_actions).collect()
    }
}

/// Latent class prototypes of a world.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub spec: WorldSpec,
    /// `[num_actions, action_feature_dim]`
    pub action_prototypes: Tensor,
    /// `[num_object_classes, region_feature_dim]`
    pub object_prototypes: Tensor,
}

fn normal_matrix(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.normal()).collect()).expect("shape")
}

impl World {
    pub fn new(spec: &WorldSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = Rng::new(spec.seed).fork(0);
        Ok(Self {
            spec: spec.clone(),
            action_prototypes: normal_matrix(spec.num_actions, spec.action_feature_dim, &mut rng),
            object_prototypes: normal_matrix(spec.num_object_classes, spec.region_feature_dim, &mut rng),
        })
    }

    fn noisy(&self, prototype: &[f64], rng: &mut Rng) -> Tensor {
        let s = self.spec.noise_sigma;
        Tensor::vector(prototype.iter().map(|&p| p + s * rng.normal()).collect())
    }

    /// Softmax over `-sharpness * |feature - prototype_c|^2`.
    pub fn teacher_distribution(&self, feature: &Tensor) -> Tensor {
        let c = self.spec.num_object_classes;
        let mut logits: Vec<f64> = (0..c)
            .map(|k| {
                let d2: f64 = feature
                    .data()
                    .iter()
                    .zip(self.object_prototypes.row(k))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                -self.spec.teacher_sharpness * d2
            })
            .collect();
        ops::softmax_in_place(&mut logits);
        Tensor::vector(logits)
    }

    fn random_box(rng: &mut Rng) -> BoundingBox {
        let side = |rng: &mut Rng| {
            let a = rng.below(FRAME_SIZE as usize - 16) as f64;
            let len = 16 + rng.below(FRAME_SIZE as usize - a as usize - 16 + 1);
            (a, a + len as f64)
        };
        let (x1, x2) = side(rng);
        let (y1, y2) = side(rng);
        BoundingBox { x1, y1, x2, y2, frame_width: FRAME_SIZE, frame_height: FRAME_SIZE }
    }

    /// Sample `id`, drawn from its own substream of the world seed.
    pub fn sample(&self, id: u64) -> VideoTextSample {
        let spec = &self.spec;
        let mut rng = Rng::new(spec.seed).fork(id + 1);
        let mut clips = Vec::with_capacity(spec.clips_per_sample);
        let mut words = Vec::with_capacity(spec.clips_per_sample * spec.words_per_clip);
        let mut segments = Vec::with_capacity(words.capacity());
        let mut breaks = Vec::new();
        let main = rng.below(spec.num_actions);
        for ci in 0..spec.clips_per_sample {
            let action = if rng.bernoulli(spec.task_persistence) { main } else { rng.below(spec.num_actions) };
            let mut pool = spec.objects_of(action);
            rng.shuffle(&mut pool);
            let objects = &pool[..spec.objects_per_clip];

            let action_feature = self.noisy(self.action_prototypes.row(action), &mut rng);
            let frames = (0..spec.frames_per_clip)
                .map(|fi| {
                    (0..spec.regions_per_frame)
                        .map(|ri| {
                            let object = objects[(ri + fi) % objects.len()];
                            let feature = self.noisy(self.object_prototypes.row(object), &mut rng);
                            Region {
                                teacher: self.teacher_distribution(&feature),
                                feature,
                                bbox: Self::random_box(&mut rng),
                                object_label: object as u32,
                            }
                        })
                        .collect()
                })
                .collect();
            clips.push(Clip { action_feature, action_label: action as u32, frames });

            words.push(spec.verb_word(action));
            words.extend(objects.iter().map(|&o| spec.noun_word(o)));
            let fillers = spec.fillers_of(action);
            for slot in 0..spec.words_per_clip - 1 - objects.len() {
                words.push(spec.first_filler_word() + fillers[slot % fillers.len()] as u32);
            }
            segments.resize(words.len(), ci as u32);
            if ci + 1 < spec.clips_per_sample {
                breaks.push(words.len() - 1);
            }
        }
        VideoTextSample { id, word_ids: words, word_segments: segments, sentence_breaks: breaks, clips, match_label: 1 }
    }
}

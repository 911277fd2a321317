//! Flat `key = value` run configuration.

use std::fs;
use std::path::{Path, PathBuf};

use tangled::corpus::WorldSpec;
use tangled::model::ModelConfig;
use tangled::objectives::TrainConfig;
use tangled::{Error, Result};

/// World keys a run may set; `seed` is shared with training.
const WORLD_KEYS: &[&str] = &[
    "num_actions",
    "num_object_classes",
    "vocab_words",
    "action_feature_dim",
    "region_feature_dim",
    "clips_per_sample",
    "frames_per_clip",
    "regions_per_frame",
    "objects_per_clip",
    "words_per_clip",
    "noise_sigma",
    "teacher_sharpness",
    "task_persistence",
    "num_train",
    "num_val",
];

/// Model keys a run may set. Vocabulary, class counts and feature widths
/// follow the world.
const MODEL_KEYS: &[&str] =
    &["num_layers", "hidden", "num_heads", "ff_width", "max_positions", "max_segments", "mask_rate", "init_std"];

const TRAIN_KEYS: &[&str] = &[
    "steps",
    "batch_size",
    "lr",
    "beta1",
    "beta2",
    "adam_eps",
    "weight_mlm",
    "weight_action",
    "weight_object",
    "weight_matching",
    "negative_rate",
];

const OTHER_KEYS: &[&str] = &["seed", "data_dir", "checkpoint", "out_dir", "gallery_size"];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub world: WorldSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seed: Option<u64>,
    /// Holds `train.abtd` and `val.abtd`.
    pub data_dir: PathBuf,
    pub checkpoint: PathBuf,
    /// Where a command writes its outputs, when not the default location.
    pub out_dir: Option<PathBuf>,
    /// Retrieval gallery size; capped by the validation split.
    pub gallery_size: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            world: WorldSpec::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            seed: None,
            data_dir: PathBuf::from("data"),
            checkpoint: PathBuf::from("run/checkpoint.abtc"),
            out_dir: None,
            gallery_size: 100,
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| Error::Config { key: key.into(), message: format!("cannot parse `{value}`") })
}

impl RunConfig {
    pub fn keys() -> impl Iterator<Item = &'static str> {
        WORLD_KEYS.iter().chain(MODEL_KEYS).chain(TRAIN_KEYS).chain(OTHER_KEYS).copied()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            k if WORLD_KEYS.contains(&k) => self.world.set(k, value)?,
            k if MODEL_KEYS.contains(&k) => self.model.set(k, value)?,
            "steps" => t.steps = num(key, value)?,
            "batch_size" => t.batch_size = num(key, value)?,
            "lr" => t.adam.lr = num(key, value)?,
            "beta1" => t.adam.beta1 = num(key, value)?,
            "beta2" => t.adam.beta2 = num(key, value)?,
            "adam_eps" => t.adam.eps = num(key, value)?,
            "weight_mlm" => t.weights.mlm = num(key, value)?,
            "weight_action" => t.weights.action = num(key, value)?,
            "weight_object" => t.weights.object = num(key, value)?,
            "weight_matching" => t.weights.matching = num(key, value)?,
            "negative_rate" => t.negative_rate = num(key, value)?,
            "seed" => self.seed = Some(num(key, value)?),
            "data_dir" => self.data_dir = PathBuf::from(value.trim()),
            "checkpoint" => self.checkpoint = PathBuf::from(value.trim()),
            "out_dir" => self.out_dir = Some(PathBuf::from(value.trim())),
            "gallery_size" => self.gallery_size = num(key, value)?,
            _ => return Err(Error::Config { key: key.into(), message: "unknown configuration key".into() }),
        }
        Ok(())
    }

    /// Applies `key = value` lines. Blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                location: format!("{origin}:{}", i + 1),
                message: format!("expected key = value, got `{line}`"),
            })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path)?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// `KEY=VALUE` override as given on the command line.
    pub fn apply_override(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair.split_once('=').ok_or_else(|| Error::Parse {
            location: "--set".into(),
            message: format!("expected KEY=VALUE, got `{pair}`"),
        })?;
        self.set(k.trim(), v)
    }

    pub fn require_seed(&self) -> Result<u64> {
        self.seed.ok_or_else(|| Error::Config { key: "seed".into(), message: "required (config file or --seed)".into() })
    }

    /// World for generation: the run seed drives the corpus.
    pub fn world_spec(&self) -> Result<WorldSpec> {
        let mut w = self.world.clone();
        w.seed = self.require_seed()?;
        w.validate()?;
        Ok(w)
    }

    /// Model configuration sized for `world`.
    pub fn model_config(&self, world: &WorldSpec) -> Result<ModelConfig> {
        let mut m = self.model.clone();
        m.vocab_size = world.vocab_size();
        m.num_actions = world.num_actions;
        m.num_object_classes = world.num_object_classes;
        m.action_feature_dim = world.action_feature_dim;
        m.region_feature_dim = world.region_feature_dim;
        m.validate()?;
        Ok(m)
    }

    /// Fails on the first dimension key where `data` disagrees with the
    /// configured world.
    pub fn check_world(&self, data: &WorldSpec) -> Result<()> {
        let dims = [
            ("num_actions", self.world.num_actions, data.num_actions),
            ("num_object_classes", self.world.num_object_classes, data.num_object_classes),
            ("vocab_words", self.world.vocab_words, data.vocab_words),
            ("action_feature_dim", self.world.action_feature_dim, data.action_feature_dim),
            ("region_feature_dim", self.world.region_feature_dim, data.region_feature_dim),
        ];
        for (key, ours, theirs) in dims {
            if ours != theirs {
                return Err(Error::Config {
                    key: key.into(),
                    message: format!("configured {ours} but the dataset has {theirs}"),
                });
            }
        }
        Ok(())
    }
}

/// Fails on the first dimension where a checkpoint cannot read `data`.
pub fn check_model_against(model: &ModelConfig, data: &WorldSpec) -> Result<()> {
    let dims = [
        ("vocab_size", model.vocab_size, data.vocab_size()),
        ("num_actions", model.num_actions, data.num_actions),
        ("num_object_classes", model.num_object_classes, data.num_object_classes),
        ("action_feature_dim", model.action_feature_dim, data.action_feature_dim),
        ("region_feature_dim", model.region_feature_dim, data.region_feature_dim),
    ];
    for (key, ours, theirs) in dims {
        if ours != theirs {
            return Err(Error::Config {
                key: key.into(),
                message: format!("checkpoint has {ours} but the dataset needs {theirs}"),
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_overrides() {
        let mut c = RunConfig::default();
        c.apply_text("# run\nsteps = 5\n\nhidden=32 # narrow\nseed=3\n", "cfg").unwrap();
        c.apply_override("steps=7").unwrap();
        assert_eq!(c.train.steps, 7);
        assert_eq!(c.model.hidden, 32);
        assert_eq!(c.require_seed().unwrap(), 3);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::default().apply_text("stepz = 5", "cfg").unwrap_err();
        assert!(err.to_string().contains("stepz"), "{err}");
        let err = RunConfig::default().apply_text("steps 5", "cfg").unwrap_err();
        assert!(err.to_string().contains("cfg:1"), "{err}");
        let err = RunConfig::default().apply_override("lr=fast").unwrap_err();
        assert!(err.to_string().contains("lr"), "{err}");
    }

    #[test]
    fn seed_is_mandatory() {
        let err = RunConfig::default().world_spec().unwrap_err();
        assert!(err.to_string().contains("seed"));
    }

    #[test]
    fn every_key_is_settable() {
        let mut c = RunConfig::default();
        for k in RunConfig::keys() {
            let v = match k {
                "data_dir" | "checkpoint" | "out_dir" => "x",
                _ => "1",
            };
            c.set(k, v).unwrap_or_else(|e| panic!("{k}: {e}"));
        }
    }

    #[test]
    fn model_follows_world() {
        let mut c = RunConfig::default();
        c.apply_text("num_actions = 5\nvocab_words = 40\nnum_object_classes = 6\nseed = 1", "cfg").unwrap();
        let w = c.world_spec().unwrap();
        let m = c.model_config(&w).unwrap();
        assert_eq!((m.num_actions, m.vocab_size, m.num_object_classes), (5, 45, 6));
        let mut other = w.clone();
        other.num_actions = 4;
        assert!(c.check_world(&other).unwrap_err().to_string().contains("num_actions"));
        assert!(check_model_against(&m, &other).is_err());
    }
}

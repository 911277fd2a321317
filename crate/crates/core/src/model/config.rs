use crate::error::{Error, Result};
use crate::sequence::{EmbeddingDims, FIRST_WORD_ID};

/// Architecture and head sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Tangled blocks, each updating all three streams.
    pub num_layers: usize,
    pub hidden: usize,
    pub num_heads: usize,
    pub ff_width: usize,
    /// Total vocabulary including the reserved special tokens.
    pub vocab_size: usize,
    pub num_actions: usize,
    pub num_object_classes: usize,
    pub max_positions: usize,
    pub max_segments: usize,
    pub action_feature_dim: usize,
    pub region_feature_dim: usize,
    pub mask_rate: f64,
    /// Standard deviation of the initial weight matrices. BERT's 0.02 scaled
    /// by sqrt(768 / 64) for the narrower default width.
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            hidden: 64,
            num_heads: 4,
            ff_width: 256,
            vocab_size: 256 + FIRST_WORD_ID as usize,
            num_actions: 8,
            num_object_classes: 16,
            max_positions: 128,
            max_segments: 16,
            action_feature_dim: 12,
            region_feature_dim: 12,
            mask_rate: 0.15,
            init_std: 0.07,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.num_heads == 0 || !self.hidden.is_multiple_of(self.num_heads) {
            return Err(Error::config(
                "num_heads",
                format!("hidden width {} must be a positive multiple of {}", self.hidden, self.num_heads),
            ));
        }
        let positive = [
            ("ff_width", self.ff_width),
            ("num_actions", self.num_actions),
            ("num_object_classes", self.num_object_classes),
            ("max_positions", self.max_positions),
            ("max_segments", self.max_segments),
            ("action_feature_dim", self.action_feature_dim),
            ("region_feature_dim", self.region_feature_dim),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if self.vocab_size <= FIRST_WORD_ID as usize {
            return Err(Error::config("vocab_size", "must exceed the reserved special tokens"));
        }
        if !(0.0..=1.0).contains(&self.mask_rate) {
            return Err(Error::config("mask_rate", "must lie in [0, 1]"));
        }
        if !(self.init_std.is_finite() && self.init_std >= 0.0) {
            return Err(Error::config("init_std", "must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.num_heads
    }

    pub fn embedding_dims(&self) -> EmbeddingDims {
        EmbeddingDims {
            hidden: self.hidden,
            vocab_size: self.vocab_size,
            max_positions: self.max_positions,
            max_segments: self.max_segments,
            action_feature_dim: self.action_feature_dim,
            region_feature_dim: self.region_feature_dim,
        }
    }

    pub const KEYS: [&'static str; 13] = [
        "num_layers",
        "hidden",
        "num_heads",
        "ff_width",
        "vocab_size",
        "num_actions",
        "num_object_classes",
        "max_positions",
        "max_segments",
        "action_feature_dim",
        "region_feature_dim",
        "mask_rate",
        "init_std",
    ];

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("num_layers", self.num_layers.to_string()),
            ("hidden", self.hidden.to_string()),
            ("num_heads", self.num_heads.to_string()),
            ("ff_width", self.ff_width.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("num_actions", self.num_actions.to_string()),
            ("num_object_classes", self.num_object_classes.to_string()),
            ("max_positions", self.max_positions.to_string()),
            ("max_segments", self.max_segments.to_string()),
            ("action_feature_dim", self.action_feature_dim.to_string()),
            ("region_feature_dim", self.region_feature_dim.to_string()),
            ("mask_rate", format!("{:?}", self.mask_rate)),
            ("init_std", format!("{:?}", self.init_std)),
        ]
    }

    /// Sets one field from text. Unknown keys are an error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .trim()
                .parse()
                .map_err(|_| Error::config(key, format!("cannot parse `{value}`")))
        }
        match key {
            "num_layers" => self.num_layers = num(key, value)?,
            "hidden" => self.hidden = num(key, value)?,
            "num_heads" => self.num_heads = num(key, value)?,
            "ff_width" => self.ff_width = num(key, value)?,
            "vocab_size" => self.vocab_size = num(key, value)?,
            "num_actions" => self.num_actions = num(key, value)?,
            "num_object_classes" => self.num_object_classes = num(key, value)?,
            "max_positions" => self.max_positions = num(key, value)?,
            "max_segments" => self.max_segments = num(key, value)?,
            "action_feature_dim" => self.action_feature_dim = num(key, value)?,
            "region_feature_dim" => self.region_feature_dim = num(key, value)?,
            "mask_rate" => self.mask_rate = num(key, value)?,
            "init_std" => self.init_std = num(key, value)?,
            _ => return Err(Error::config(key, "unknown model key")),
        }
        Ok(())
    }
}

use crate::error::Result;
use crate::model::ModelConfig;
use crate::numerics::{ParamId, ParamStore, Rng, Tensor};
use crate::sequence::EmbeddingTables;

/// Query/key/value/output projections of one multi-head attention.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionWeights {
    pub q_weight: ParamId,
    pub q_bias: ParamId,
    pub k_weight: ParamId,
    pub k_bias: ParamId,
    pub v_weight: ParamId,
    pub v_bias: ParamId,
    pub out_weight: ParamId,
    pub out_bias: ParamId,
}

/// One stream's post-norm transformer sublayers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamLayer {
    pub attention: AttentionWeights,
    pub norm1_gain: ParamId,
    pub norm1_bias: ParamId,
    pub ff1_weight: ParamId,
    pub ff1_bias: ParamId,
    pub ff2_weight: ParamId,
    pub ff2_bias: ParamId,
    pub norm2_gain: ParamId,
    pub norm2_bias: ParamId,
}

/// Action-queried cross attention: query map on the action stream, key and
/// value maps on the attended stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CrossAttention {
    pub q_weight: ParamId,
    pub q_bias: ParamId,
    pub k_weight: ParamId,
    pub k_bias: ParamId,
    pub v_weight: ParamId,
    pub v_bias: ParamId,
}

/// Linear map turning a cross-attention result into stacked keys and values.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KvGenerator {
    pub k_weight: ParamId,
    pub k_bias: ParamId,
    pub v_weight: ParamId,
    pub v_bias: ParamId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TangledLayer {
    pub text: StreamLayer,
    pub action: StreamLayer,
    pub region: StreamLayer,
    /// Actions attending text; produces `c_w`.
    pub text_cross: CrossAttention,
    /// Actions attending regions; produces `c_r`.
    pub region_cross: CrossAttention,
    /// Keys/values from `c_w`, stacked into the action and region streams.
    pub text_kv: KvGenerator,
    /// Keys/values from `c_r`, stacked into the text stream.
    pub region_kv: KvGenerator,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskHeads {
    pub mlm_weight: ParamId,
    pub mlm_bias: ParamId,
    pub action_weight: ParamId,
    pub action_bias: ParamId,
    pub object_weight: ParamId,
    pub object_bias: ParamId,
    pub pool_weight: ParamId,
    pub pool_bias: ParamId,
    pub match_weight: ParamId,
    pub match_bias: ParamId,
}

/// Every learnable weight of the model, owned by one [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub embeddings: EmbeddingTables,
    pub layers: Vec<TangledLayer>,
    pub heads: TaskHeads,
}

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut Rng,
    std: f64,
}

impl Init<'_> {
    fn matrix(&mut self, name: String, rows: usize, cols: usize) -> ParamId {
        self.store.add_normal(name, &[rows, cols], self.std, self.rng)
    }

    fn zeros(&mut self, name: String, n: usize) -> ParamId {
        self.store.add(name, Tensor::zeros(&[n]))
    }

    fn ones(&mut self, name: String, n: usize) -> ParamId {
        self.store.add(name, Tensor::ones(&[n]))
    }

    fn linear(&mut self, prefix: &str, rows: usize, cols: usize) -> (ParamId, ParamId) {
        (
            self.matrix(format!("{prefix}.weight"), rows, cols),
            self.zeros(format!("{prefix}.bias"), cols),
        )
    }

    fn attention(&mut self, prefix: &str, d: usize) -> AttentionWeights {
        let (q_weight, q_bias) = self.linear(&format!("{prefix}.q"), d, d);
        let (k_weight, k_bias) = self.linear(&format!("{prefix}.k"), d, d);
        let (v_weight, v_bias) = self.linear(&format!("{prefix}.v"), d, d);
        let (out_weight, out_bias) = self.linear(&format!("{prefix}.out"), d, d);
        AttentionWeights { q_weight, q_bias, k_weight, k_bias, v_weight, v_bias, out_weight, out_bias }
    }

    fn stream(&mut self, prefix: &str, d: usize, ff: usize) -> StreamLayer {
        let attention = self.attention(&format!("{prefix}.attn"), d);
        let norm1_gain = self.ones(format!("{prefix}.norm1.gain"), d);
        let norm1_bias = self.zeros(format!("{prefix}.norm1.bias"), d);
        let (ff1_weight, ff1_bias) = self.linear(&format!("{prefix}.ff1"), d, ff);
        let (ff2_weight, ff2_bias) = self.linear(&format!("{prefix}.ff2"), ff, d);
        let norm2_gain = self.ones(format!("{prefix}.norm2.gain"), d);
        let norm2_bias = self.zeros(format!("{prefix}.norm2.bias"), d);
        StreamLayer {
            attention,
            norm1_gain,
            norm1_bias,
            ff1_weight,
            ff1_bias,
            ff2_weight,
            ff2_bias,
            norm2_gain,
            norm2_bias,
        }
    }

    fn cross(&mut self, prefix: &str, d: usize) -> CrossAttention {
        let (q_weight, q_bias) = self.linear(&format!("{prefix}.q"), d, d);
        let (k_weight, k_bias) = self.linear(&format!("{prefix}.k"), d, d);
        let (v_weight, v_bias) = self.linear(&format!("{prefix}.v"), d, d);
        CrossAttention { q_weight, q_bias, k_weight, k_bias, v_weight, v_bias }
    }

    fn kv(&mut self, prefix: &str, d: usize) -> KvGenerator {
        let (k_weight, k_bias) = self.linear(&format!("{prefix}.k"), d, d);
        let (v_weight, v_bias) = self.linear(&format!("{prefix}.v"), d, d);
        KvGenerator { k_weight, k_bias, v_weight, v_bias }
    }
}

impl ModelParams {
    /// Normal(0, init_std) matrices, zero biases, unit layer-norm gains.
    pub fn init(config: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let embeddings = EmbeddingTables::init(&mut store, config.embedding_dims(), config.init_std, rng);
        let d = config.hidden;
        let mut init = Init { store: &mut store, rng, std: config.init_std };
        let layers = (0..config.num_layers)
            .map(|l| TangledLayer {
                text: init.stream(&format!("layer{l}.text"), d, config.ff_width),
                action: init.stream(&format!("layer{l}.action"), d, config.ff_width),
                region: init.stream(&format!("layer{l}.region"), d, config.ff_width),
                text_cross: init.cross(&format!("layer{l}.cross_text"), d),
                region_cross: init.cross(&format!("layer{l}.cross_region"), d),
                text_kv: init.kv(&format!("layer{l}.kv_text"), d),
                region_kv: init.kv(&format!("layer{l}.kv_region"), d),
            })
            .collect();
        let (mlm_weight, mlm_bias) = init.linear("head.mlm", d, config.vocab_size);
        let (action_weight, action_bias) = init.linear("head.action", d, config.num_actions);
        let (object_weight, object_bias) = init.linear("head.object", d, config.num_object_classes);
        let (pool_weight, pool_bias) = init.linear("head.pool", d, d);
        let (match_weight, match_bias) = init.linear("head.match", d, 1);
        let heads = TaskHeads {
            mlm_weight,
            mlm_bias,
            action_weight,
            action_bias,
            object_weight,
            object_bias,
            pool_weight,
            pool_bias,
            match_weight,
            match_bias,
        };
        Ok(Self { config: config.clone(), store, embeddings, layers, heads })
    }

    /// Parameter names grouped by role, e.g. `layer0.cross_text.q`.
    pub fn group_of(name: &str) -> &str {
        name.rsplit_once('.').map_or(name, |(g, _)| g)
    }
}

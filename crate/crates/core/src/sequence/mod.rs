//! Sample types, the unified input layout, and input embeddings.

mod embed;
mod layout;
mod sample;

pub use embed::{embed_batch, embed_sequence, EmbeddingDims, EmbeddingTables};
pub use layout::{build_sequence, Element, InputSequence, Modality, Source, Stream};
pub use sample::{
    spatial_position_vector, BoundingBox, Clip, Region, SpecialToken, VideoTextSample, FIRST_WORD_ID,
    MAX_REGIONS_PER_FRAME,
};

//! Synthetic prototype-plus-noise video-text corpus and its file format.

mod dataset;
mod world;

pub use dataset::{
    generate, read_dataset, read_dataset_from, write_dataset, write_dataset_to, Dataset, Record, Split, DATASET_MAGIC,
};
pub use world::{World, WorldSpec, FRAME_SIZE};

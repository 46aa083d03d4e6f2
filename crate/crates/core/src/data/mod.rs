//! Datasets: the synthetic clear/fog benchmark and the on-disk format.

mod io;
mod synth;

pub use io::{
    load_dataset, read_png, save_dataset, save_split, write_png, Dataset, GeneratorInfo, Manifest,
    ManifestEntry, SplitEntry, SplitId, SplitRole, MANIFEST_FILE,
};
pub use synth::{
    child_seed, corrupt, generate_splits, generate_synthetic_domain_pair, render_scene, shape_mask,
    CorruptionSpec, PlacedObject, RgbImage, SceneSpec, Shape, SplitCounts,
};

//! Scene sampling, mixture rendering and dataset generation.

pub mod dataset;
pub mod geometry;
pub mod scene;
pub mod speech;

pub use dataset::{
    generate_clip, generate_dataset, load_stems, measure_ratios, read_manifest, regenerate_clip, write_manifest, ClipStems, Corpus,
    DatasetConfig, ManifestRecord, Scenario, SourceMaterial, SourceRecord, SourceRole, Utterance, CLIP_DIR, MANIFEST_FILE,
};
pub use geometry::{classify_position, source_angle_deg, Region, DEFAULT_ROI_ANGLE_DEG};
pub use scene::{
    mixing_gain, render_scene, sample_scene, sample_scene_in_room, DrySources, MixtureClip, SceneMode, SceneRecipe,
    SceneSpec, SirDraw,
};
pub use speech::{synth_noise, synth_speech};

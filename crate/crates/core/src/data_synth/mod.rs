//! Procedural scenes, styles, and pseudo-ground-truth compositing.

mod composite;
mod dataset;
mod scene;
mod style;

pub use composite::{composite_pseudo_gt, downsample_mask, feather_alpha};
pub use dataset::{
    build_dataset, generate_samples, make_prompt, DatasetConfig, DatasetManifest, Sample,
    SampleRecord, Split, MANIFEST_FILE, MANIFEST_VERSION,
};
pub use scene::{gen_scene, BackgroundKind, SceneObject, SceneSpec, LABELS};
pub(crate) use style::rgb_to_hsv;
pub use style::{
    apply_style, edge_map, hue_rotate, pixelate, posterize, StyleKind, StyleParams, StyleSet,
    StyleSpec,
};

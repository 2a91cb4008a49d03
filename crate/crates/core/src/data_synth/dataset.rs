//! Dataset synthesis and the JSON manifest that indexes it on disk.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::composite::composite_pseudo_gt;
use super::scene::{gen_scene, BackgroundKind, SceneSpec};
use super::style::{apply_style, StyleSet};
use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::seed::{derive_seed, rng_for};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

const PROMPT_TEMPLATES: [&str; 3] = [
    "make the {label} {style} style",
    "turn the {label} into {style} style",
    "render the {label} in {style} style",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Heldout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub seed: u64,
    pub scenes: usize,
    pub heldout_scenes: usize,
    pub styles: usize,
    pub canvas: usize,
    pub patch: usize,
    pub max_objects: usize,
    pub feather_px: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            scenes: 50,
            heldout_scenes: 10,
            styles: 4,
            canvas: 64,
            patch: 4,
            max_objects: 3,
            feather_px: 0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scenes + self.heldout_scenes == 0 {
            return Err(Error::Config("dataset needs at least one scene".into()));
        }
        if !(1..=4).contains(&self.max_objects) {
            return Err(Error::Config("max_objects must be in 1..=4".into()));
        }
        StyleSet::builtin(self.styles)?;
        Ok(())
    }
}

/// One training pair held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub context: Image,
    pub target: Image,
    pub mask: Mask,
    pub style_id: usize,
    pub label: String,
    pub prompt: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub scene: usize,
    pub split: Split,
    pub context: String,
    pub target: String,
    pub mask: String,
    pub style_id: usize,
    pub style: String,
    pub label: String,
    pub prompt: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    /// Directory the relative sample paths resolve against, relative to the manifest file.
    pub root: String,
    pub config: DatasetConfig,
    pub styles: Vec<String>,
    pub samples: Vec<SampleRecord>,
}

pub fn make_prompt(template: usize, label: &str, style: &str) -> String {
    PROMPT_TEMPLATES[template % PROMPT_TEMPLATES.len()]
        .replace("{label}", label)
        .replace("{style}", style)
}

struct SceneSamples {
    scene: usize,
    split: Split,
    context: Image,
    mask: Mask,
    label: String,
    targets: Vec<(usize, Image, String)>,
}

fn synth_scene(config: &DatasetConfig, styles: &StyleSet, scene: usize) -> Result<SceneSamples> {
    let mut rng = rng_for(config.seed, "dataset-scene", scene as u64);
    let spec = SceneSpec {
        seed: derive_seed(config.seed, "scene-seed", scene as u64),
        height: config.canvas,
        width: config.canvas,
        patch: config.patch,
        num_objects: rng.random_range(1..=config.max_objects),
        background: BackgroundKind::ALL[rng.random_range(0..BackgroundKind::ALL.len())],
    };
    let (context, objects) = gen_scene(&spec)?;
    let target_obj = &objects[rng.random_range(0..objects.len())];
    let context = context.quantize_u8();
    let mut targets = Vec::with_capacity(styles.len());
    for style in styles.iter() {
        let stylized = apply_style(&context, style)?;
        let target =
            composite_pseudo_gt(&context, &stylized, &target_obj.mask, config.feather_px)?
                .quantize_u8();
        let template = rng.random_range(0..PROMPT_TEMPLATES.len());
        let prompt = make_prompt(template, &target_obj.label, style.name());
        targets.push((style.style_id, target, prompt));
    }
    Ok(SceneSamples {
        scene,
        split: if scene < config.scenes {
            Split::Train
        } else {
            Split::Heldout
        },
        context,
        mask: target_obj.mask.clone(),
        label: target_obj.label.clone(),
        targets,
    })
}

fn synth_all(config: &DatasetConfig) -> Result<Vec<SceneSamples>> {
    config.validate()?;
    let styles = StyleSet::builtin(config.styles)?;
    (0..config.scenes + config.heldout_scenes)
        .into_par_iter()
        .map(|i| synth_scene(config, &styles, i))
        .collect()
}

/// Generates every sample in memory without touching the filesystem.
pub fn generate_samples(config: &DatasetConfig) -> Result<Vec<(Split, Sample)>> {
    let scenes = synth_all(config)?;
    let mut out = Vec::new();
    for s in scenes {
        for (style_id, target, prompt) in s.targets {
            out.push((
                s.split,
                Sample {
                    context: s.context.clone(),
                    target,
                    mask: s.mask.clone(),
                    style_id,
                    label: s.label.clone(),
                    prompt,
                },
            ));
        }
    }
    Ok(out)
}

/// Writes images, masks, and `manifest.json` under `out_dir`.
pub fn build_dataset(config: &DatasetConfig, out_dir: &Path) -> Result<DatasetManifest> {
    let scenes = synth_all(config)?;
    let styles = StyleSet::builtin(config.styles)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut records = Vec::new();
    for s in &scenes {
        let dir_name = format!("scene_{:04}", s.scene);
        let dir = out_dir.join(&dir_name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        s.context.save_png(&dir.join("context.png"))?;
        s.mask.save_png(&dir.join("mask.png"))?;
        for (style_id, target, prompt) in &s.targets {
            let target_name = format!("target_s{style_id}.png");
            target.save_png(&dir.join(&target_name))?;
            records.push(SampleRecord {
                id: format!("scene{:04}_style{style_id}", s.scene),
                scene: s.scene,
                split: s.split,
                context: format!("{dir_name}/context.png"),
                target: format!("{dir_name}/{target_name}"),
                mask: format!("{dir_name}/mask.png"),
                style_id: *style_id,
                style: styles.get(*style_id)?.name().to_string(),
                label: s.label.clone(),
                prompt: prompt.clone(),
            });
        }
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        root: ".".into(),
        config: config.clone(),
        styles: styles.names().into_iter().map(String::from).collect(),
        samples: records,
    };
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

impl DatasetManifest {
    /// Parses and structurally validates manifest JSON (no filesystem access).
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let m: DatasetManifest =
            serde_json::from_slice(bytes).map_err(|e| Error::Manifest(e.to_string()))?;
        m.check_structure()?;
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<(Self, PathBuf)> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let m = Self::parse(&bytes)?;
        let base = path.parent().unwrap_or(Path::new(".")).join(&m.root);
        m.check_files(&base)?;
        Ok((m, base))
    }

    fn check_structure(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::Manifest(format!(
                "unsupported manifest version {}",
                self.version
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        let mut scene_split = std::collections::BTreeMap::new();
        for r in &self.samples {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::Manifest(format!("duplicate sample id {}", r.id)));
            }
            if r.style_id >= self.styles.len() {
                return Err(Error::Manifest(format!(
                    "sample {} has style_id {} but only {} styles",
                    r.id,
                    r.style_id,
                    self.styles.len()
                )));
            }
            if let Some(prev) = scene_split.insert(r.scene, r.split) {
                if prev != r.split {
                    return Err(Error::Manifest(format!(
                        "scene {} appears in both splits",
                        r.scene
                    )));
                }
            }
            for p in [&r.context, &r.target, &r.mask] {
                if Path::new(p).is_absolute() || p.split('/').any(|c| c == "..") {
                    return Err(Error::Manifest(format!("path {p} escapes the dataset root")));
                }
            }
        }
        Ok(())
    }

    fn check_files(&self, base: &Path) -> Result<()> {
        for r in &self.samples {
            for p in [&r.context, &r.target, &r.mask] {
                let full = base.join(p);
                if !full.is_file() {
                    return Err(Error::Manifest(format!(
                        "missing file {}",
                        full.display()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn records(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.samples.iter().filter(move |r| r.split == split)
    }

    pub fn load_sample(&self, base: &Path, record: &SampleRecord) -> Result<Sample> {
        Ok(Sample {
            context: Image::load_png(&base.join(&record.context))?,
            target: Image::load_png(&base.join(&record.target))?,
            mask: Mask::load_png(&base.join(&record.mask))?,
            style_id: record.style_id,
            label: record.label.clone(),
            prompt: record.prompt.clone(),
        })
    }

    pub fn load_split(&self, base: &Path, split: Split) -> Result<Vec<Sample>> {
        self.records(split)
            .map(|r| self.load_sample(base, r))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_count_is_scenes_times_styles() {
        let cfg = DatasetConfig {
            scenes: 50,
            heldout_scenes: 0,
            styles: 4,
            ..Default::default()
        };
        let samples = generate_samples(&cfg).unwrap();
        assert_eq!(samples.len(), 200);
        for (_, s) in &samples {
            assert!(s.mask.count() >= 1);
            assert!(s.prompt.contains(&s.label));
        }
    }

    #[test]
    fn single_sample_differs_only_inside_mask() {
        let cfg = DatasetConfig {
            scenes: 1,
            heldout_scenes: 0,
            styles: 1,
            ..Default::default()
        };
        let samples = generate_samples(&cfg).unwrap();
        assert_eq!(samples.len(), 1);
        let s = &samples[0].1;
        let mut inside_diff = 0;
        for y in 0..64 {
            for x in 0..64 {
                if s.mask.get(y, x) {
                    inside_diff += (s.context.pixel(y, x) != s.target.pixel(y, x)) as usize;
                } else {
                    assert_eq!(s.context.pixel(y, x), s.target.pixel(y, x));
                }
            }
        }
        assert!(inside_diff > 0);
        assert!(s.prompt.contains("pixel-art"));
    }

    #[test]
    fn manifest_rejects_cross_split_scene() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = DatasetConfig {
            scenes: 1,
            heldout_scenes: 1,
            styles: 2,
            ..Default::default()
        };
        let mut m = build_dataset(&cfg, tmp.path()).unwrap();
        assert!(DatasetManifest::parse(m.to_json().as_bytes()).is_ok());
        m.samples[0].split = Split::Heldout;
        assert!(matches!(
            DatasetManifest::parse(m.to_json().as_bytes()),
            Err(Error::Manifest(_))
        ));
    }

    #[test]
    fn load_reports_missing_file() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = DatasetConfig {
            scenes: 1,
            heldout_scenes: 0,
            styles: 1,
            ..Default::default()
        };
        build_dataset(&cfg, tmp.path()).unwrap();
        fs::remove_file(tmp.path().join("scene_0000/mask.png")).unwrap();
        let err = DatasetManifest::load(&tmp.path().join(MANIFEST_FILE)).unwrap_err();
        assert!(err.to_string().contains("mask.png"));
    }

    #[test]
    fn round_trip_through_disk_matches_memory() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = DatasetConfig {
            scenes: 2,
            heldout_scenes: 1,
            styles: 4,
            ..Default::default()
        };
        build_dataset(&cfg, tmp.path()).unwrap();
        let (m, base) = DatasetManifest::load(&tmp.path().join(MANIFEST_FILE)).unwrap();
        let mem = generate_samples(&cfg).unwrap();
        for (rec, (split, s)) in m.samples.iter().zip(&mem) {
            assert_eq!(rec.split, *split);
            let loaded = m.load_sample(&base, rec).unwrap();
            assert_eq!(&loaded, s);
        }
    }
}

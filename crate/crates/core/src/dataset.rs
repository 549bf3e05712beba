//! Scene data for training and evaluation, in memory and on disk.
//!
//! Directory layout:
//!
//! ```text
//! DIR/scene_<id>/photos/<j>.png        wide-baseline photo j
//! DIR/scene_<id>/photos/<j>.mask.png   its transient mask (255 = transient)
//! DIR/scene_<id>/clip/<f>.png          video frame f
//! DIR/scene_<id>/truth/poses.json      ground truth, read only by evaluation
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::synth::{
    generate_scene, sample_photo_views, sample_video_clip, CameraPose, Illumination, PhotoShot, SceneSpec,
    SynthConfig,
};

/// Everything a trainer may see of one scene: unposed photos with their
/// transient masks and one video clip.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneData {
    pub id: usize,
    pub photos: Vec<Image>,
    pub masks: Vec<Mask>,
    pub clip: Vec<Image>,
    /// Empty when the clip has no transients.
    pub clip_masks: Vec<Mask>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingData {
    pub scenes: Vec<SceneData>,
}

/// Ground truth of one scene. Enough to regenerate the scene and render any
/// intermediate view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneTruth {
    pub scene_seed: u64,
    pub synth: SynthConfig,
    pub photos: Vec<PhotoShot>,
    pub clip_poses: Vec<CameraPose>,
    pub clip_illumination: Illumination,
}

impl SceneTruth {
    pub fn scene(&self) -> Result<SceneSpec> {
        generate_scene(self.scene_seed, &self.synth)
    }
}

/// Seed of scene `id` in a dataset generated with `seed`.
pub fn scene_seed(seed: u64, id: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(id as u64 + 1)
}

/// Generates scene `id` with `photos` wide-baseline photos and a clip of
/// `clip_len` frames.
pub fn procedural_scene(
    seed: u64,
    id: usize,
    photos: usize,
    clip_len: usize,
    cfg: &SynthConfig,
) -> Result<(SceneData, SceneTruth)> {
    let s = scene_seed(seed, id);
    let scene = generate_scene(s, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(s);
    let views = sample_photo_views(&scene, photos, &mut rng, cfg)?;
    let clip = sample_video_clip(&scene, clip_len, 1.0, false, &mut rng, cfg)?;
    let truth = SceneTruth {
        scene_seed: s,
        synth: cfg.clone(),
        photos: views.iter().map(|v| v.shot.clone()).collect(),
        clip_poses: clip.path.poses.clone(),
        clip_illumination: clip.illumination,
    };
    // quantized so in-memory scenes equal what a disk round trip yields
    let (imgs, masks): (Vec<Image>, Vec<Mask>) = views.into_iter().map(|v| (v.image.quantized(), v.mask)).unzip();
    Ok((
        SceneData {
            id,
            photos: imgs,
            masks,
            clip: clip.frames.iter().map(Image::quantized).collect(),
            clip_masks: Vec::new(),
        },
        truth,
    ))
}

pub fn scene_dir(root: &Path, id: usize) -> PathBuf {
    root.join(format!("scene_{id:04}"))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn write_scene(root: &Path, data: &SceneData, truth: &SceneTruth) -> Result<()> {
    let dir = scene_dir(root, data.id);
    let (photos, clip, tdir) = (dir.join("photos"), dir.join("clip"), dir.join("truth"));
    for d in [&photos, &clip, &tdir] {
        create_dir(d)?;
    }
    for (j, (img, mask)) in data.photos.iter().zip(&data.masks).enumerate() {
        img.save_png(&photos.join(format!("{j}.png")))?;
        mask.save_png(&photos.join(format!("{j}.mask.png")))?;
    }
    for (f, img) in data.clip.iter().enumerate() {
        img.save_png(&clip.join(format!("{f}.png")))?;
    }
    let path = tdir.join("poses.json");
    let json = serde_json::to_string_pretty(truth)?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

/// Writes `scenes` procedural scenes under `out`.
pub fn make_dataset(
    out: &Path,
    scenes: usize,
    photos: usize,
    clip_len: usize,
    seed: u64,
    cfg: &SynthConfig,
) -> Result<()> {
    create_dir(out)?;
    for id in 0..scenes {
        let (data, truth) = procedural_scene(seed, id, photos, clip_len, cfg)?;
        write_scene(out, &data, &truth)?;
    }
    Ok(())
}

/// Numbered files `<k><suffix>` in `dir`, sorted by `k`.
fn numbered(dir: &Path, suffix: &str) -> Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(stem) = name.strip_suffix(suffix) {
            if let Ok(k) = stem.parse::<usize>() {
                found.push((k, entry.path()));
            }
        }
    }
    found.sort();
    for (i, (k, p)) in found.iter().enumerate() {
        if *k != i {
            return Err(Error::Dataset(format!("{} breaks the 0-based numbering", p.display())));
        }
    }
    Ok(found.into_iter().map(|(_, p)| p).collect())
}

/// Scene ids present under `root`, ascending.
pub fn scene_ids(root: &Path) -> Result<Vec<usize>> {
    let mut ids = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(id) = name.strip_prefix("scene_").and_then(|s| s.parse().ok()) {
            ids.push(id);
        }
    }
    ids.sort_unstable();
    if ids.is_empty() {
        return Err(Error::Dataset(format!("no scene_<id> directories in {}", root.display())));
    }
    Ok(ids)
}

pub fn load_scene(root: &Path, id: usize) -> Result<SceneData> {
    let dir = scene_dir(root, id);
    let photo_dir = dir.join("photos");
    let mut photos = Vec::new();
    let mut masks = Vec::new();
    if photo_dir.is_dir() {
        for p in numbered(&photo_dir, ".png")? {
            let img = Image::load_png(&p)?;
            let mpath = p.with_extension("mask.png");
            let mask = if mpath.exists() {
                Mask::load_png(&mpath)?
            } else {
                Mask::empty(img.height, img.width)
            };
            if (mask.height, mask.width) != (img.height, img.width) {
                return Err(Error::Dataset(format!("{} does not match its photo", mpath.display())));
            }
            photos.push(img);
            masks.push(mask);
        }
    }
    let clip_dir = dir.join("clip");
    let clip = if clip_dir.is_dir() {
        numbered(&clip_dir, ".png")?
            .iter()
            .map(|p| Image::load_png(p))
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    let first = photos.first().or(clip.first()).ok_or_else(|| {
        Error::Dataset(format!("{} holds neither photos nor clip frames", dir.display()))
    })?;
    if photos.iter().chain(&clip).any(|i| !i.same_shape(first)) {
        return Err(Error::Dataset(format!("{} mixes image sizes", dir.display())));
    }
    Ok(SceneData {
        id,
        photos,
        masks,
        clip,
        clip_masks: Vec::new(),
    })
}

pub fn load_truth(root: &Path, id: usize) -> Result<SceneTruth> {
    let path = scene_dir(root, id).join("truth").join("poses.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn load_training_data(root: &Path) -> Result<TrainingData> {
    let scenes = scene_ids(root)?
        .into_iter()
        .map(|id| load_scene(root, id))
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainingData { scenes })
}

//! Image metrics, the crossfade baseline, and the evaluation harness that
//! scores generated intermediates against exact synthetic ground truth.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::Weights;
use crate::dataset::{load_scene, load_truth, scene_ids, SceneData, SceneTruth};
use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::infer::{generate, reorder_sensitivity, weights_hash, GenerationRequest, DEFAULT_STEPS};
use crate::schedule::NoiseSchedule;
use crate::synth::{render_view, sample_camera_path, Illumination, SceneSpec};
use crate::tokens::{FRAME_STRIDE, INTERMEDIATES_PER_PAIR};

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 8;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn check_shapes(a: &Image, b: &Image) -> Result<()> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(Error::shape(format!(
            "{}x{} vs {}x{}",
            a.height, a.width, b.height, b.width
        )))
    }
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check_shapes(a, b)?;
    let sum: f64 = a.data.iter().zip(&b.data).map(|(x, y)| ((x - y) as f64).powi(2)).sum();
    Ok(sum / a.data.len().max(1) as f64)
}

/// `10·log10(1/MSE)` over `[0, 1]` pixels, capped at 99 dB.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    if m <= 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((-10.0 * m.log10()).min(PSNR_CAP))
}

/// Summed-area table with a zero border, `(h+1)·(w+1)`.
fn integral(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Vec<f64> {
    let mut s = vec![0.0; (h + 1) * (w + 1)];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += f(y, x);
            s[(y + 1) * (w + 1) + x + 1] = s[y * (w + 1) + x + 1] + row;
        }
    }
    s
}

fn box_sum(s: &[f64], w: usize, y: usize, x: usize, k: usize) -> f64 {
    let stride = w + 1;
    s[(y + k) * stride + x + k] - s[y * stride + x + k] - s[(y + k) * stride + x] + s[y * stride + x]
}

fn ssim_window(n: f64, sa: f64, sb: f64, saa: f64, sbb: f64, sab: f64) -> f64 {
    let (ma, mb) = (sa / n, sb / n);
    let va = (saa / n - ma * ma).max(0.0);
    let vb = (sbb / n - mb * mb).max(0.0);
    let cov = sab / n - ma * mb;
    ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2)) / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2))
}

/// Mean SSIM over every 8×8 window (stride 1) and channel, uniform weights.
/// Images smaller than the window use a single whole-image window.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_shapes(a, b)?;
    if a.is_empty() {
        return Err(Error::invalid("ssim of an empty image"));
    }
    let (h, w) = (a.height, a.width);
    let k = SSIM_WINDOW.min(h).min(w);
    let n = (k * k) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..3 {
        let pa = |y: usize, x: usize| a.data[(y * w + x) * 3 + c] as f64;
        let pb = |y: usize, x: usize| b.data[(y * w + x) * 3 + c] as f64;
        let s_a = integral(h, w, pa);
        let s_b = integral(h, w, pb);
        let s_aa = integral(h, w, |y, x| pa(y, x) * pa(y, x));
        let s_bb = integral(h, w, |y, x| pb(y, x) * pb(y, x));
        let s_ab = integral(h, w, |y, x| pa(y, x) * pb(y, x));
        for y in 0..=h - k {
            for x in 0..=w - k {
                total += ssim_window(
                    n,
                    box_sum(&s_a, w, y, x, k),
                    box_sum(&s_b, w, y, x, k),
                    box_sum(&s_aa, w, y, x, k),
                    box_sum(&s_bb, w, y, x, k),
                    box_sum(&s_ab, w, y, x, k),
                );
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Linear blends at weights `i/(count+1)`, `i = 1..=count`.
pub fn crossfade_baseline(a: &Image, b: &Image, count: usize) -> Result<Vec<Image>> {
    check_shapes(a, b)?;
    if count == 0 {
        return Err(Error::invalid("crossfade needs at least one frame"));
    }
    Ok((1..=count)
        .map(|i| {
            let wgt = i as f32 / (count + 1) as f32;
            let data = a.data.iter().zip(&b.data).map(|(x, y)| (1.0 - wgt) * x + wgt * y).collect();
            Image {
                height: a.height,
                width: a.width,
                data,
            }
        })
        .collect())
}

/// Crossfade between each consecutive keyframe pair, 15 frames per pair.
pub fn crossfade_sequence(keyframes: &[Image]) -> Result<Vec<Image>> {
    let mut out = Vec::new();
    for pair in keyframes.windows(2) {
        out.extend(crossfade_baseline(&pair[0], &pair[1], INTERMEDIATES_PER_PAIR)?);
    }
    Ok(out)
}

/// Largest per-channel-mean L2 jump between consecutive frames.
pub fn appearance_drift(video: &[Image]) -> Result<f64> {
    if video.len() < 2 {
        return Err(Error::invalid("drift needs at least two frames"));
    }
    let means: Vec<[f32; 3]> = video.iter().map(|f| f.channel_means()).collect();
    Ok(means
        .windows(2)
        .map(|w| (0..3).map(|c| ((w[1][c] - w[0][c]) as f64).powi(2)).sum::<f64>().sqrt())
        .fold(0.0, f64::max))
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::invalid("rank correlation needs two equal series of length >= 2"));
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (va * vb).sqrt())
}

// ---------------------------------------------------------------------------
// Harness
// ---------------------------------------------------------------------------

/// How keyframes and ground truth are produced for one evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalCondition {
    /// Keyframes every 16th frame of the stored clip; the clip is the truth.
    Standard,
    /// Faster fresh camera path, one illumination and transient phase per
    /// keyframe; truth is rendered under the first keyframe's illumination.
    PhotoStyle,
    /// Camera travel five times faster than training clips, so neighbouring
    /// keyframes barely overlap.
    MinimalOverlap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub condition: EvalCondition,
    pub arities: Vec<usize>,
    pub sets: usize,
    pub steps: usize,
    pub seed: u64,
    pub photo_speed: f32,
    pub overlap_speed: f32,
    pub order_sensitivity: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            condition: EvalCondition::Standard,
            arities: vec![2, 3, 4, 5],
            sets: 3,
            steps: DEFAULT_STEPS,
            seed: 0,
            photo_speed: 2.0,
            overlap_speed: 5.0,
            order_sensitivity: false,
        }
    }
}

impl EvalConfig {
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

/// Scores of one `(scene, n)` pair, averaged over the sampled sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub scene: usize,
    pub n: usize,
    pub sets: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub crossfade_psnr: f64,
    pub crossfade_ssim: f64,
    pub drift: f64,
    pub crossfade_drift: f64,
    /// How much closer (dB) the first and last outputs are to their own
    /// neighbouring keyframe than to the opposite end.
    pub endpoint_margin_db: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub order_sensitivity: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub psnr: f64,
    pub ssim: f64,
    pub crossfade_psnr: f64,
    pub crossfade_ssim: f64,
    pub drift: f64,
    pub crossfade_drift: f64,
    pub endpoint_margin_db: f64,
}

impl Summary {
    fn mean_of(rows: &[&EvalRow]) -> Self {
        let n = rows.len().max(1) as f64;
        let avg = |f: fn(&EvalRow) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / n;
        Self {
            psnr: avg(|r| r.psnr),
            ssim: avg(|r| r.ssim),
            crossfade_psnr: avg(|r| r.crossfade_psnr),
            crossfade_ssim: avg(|r| r.crossfade_ssim),
            drift: avg(|r| r.drift),
            crossfade_drift: avg(|r| r.crossfade_drift),
            endpoint_margin_db: avg(|r| r.endpoint_margin_db),
        }
    }

    fn mean_of_summaries(items: &[Summary]) -> Self {
        let n = items.len().max(1) as f64;
        let avg = |f: fn(&Summary) -> f64| items.iter().map(f).sum::<f64>() / n;
        Self {
            psnr: avg(|s| s.psnr),
            ssim: avg(|s| s.ssim),
            crossfade_psnr: avg(|s| s.crossfade_psnr),
            crossfade_ssim: avg(|s| s.crossfade_ssim),
            drift: avg(|s| s.drift),
            crossfade_drift: avg(|s| s.crossfade_drift),
            endpoint_margin_db: avg(|s| s.endpoint_margin_db),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSummary {
    pub scene: usize,
    #[serde(flatten)]
    pub summary: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint_hash: String,
    pub config_hash: String,
    pub config: EvalConfig,
    pub rows: Vec<EvalRow>,
    pub scenes: Vec<SceneSummary>,
    /// Mean over scenes of the per-scene means.
    pub aggregate: Summary,
}

impl EvalReport {
    pub fn from_rows(checkpoint_hash: String, config: &EvalConfig, rows: Vec<EvalRow>) -> Self {
        let mut ids: Vec<usize> = rows.iter().map(|r| r.scene).collect();
        ids.dedup();
        let scenes: Vec<SceneSummary> = ids
            .iter()
            .map(|&id| SceneSummary {
                scene: id,
                summary: Summary::mean_of(&rows.iter().filter(|r| r.scene == id).collect::<Vec<_>>()),
            })
            .collect();
        let aggregate = Summary::mean_of_summaries(&scenes.iter().map(|s| s.summary.clone()).collect::<Vec<_>>());
        Self {
            checkpoint_hash,
            config_hash: config.hash(),
            config: config.clone(),
            rows,
            scenes,
            aggregate,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.rows.iter().all(|r| {
            [r.psnr, r.ssim, r.crossfade_psnr, r.crossfade_ssim, r.drift, r.crossfade_drift, r.endpoint_margin_db]
                .iter()
                .chain(r.order_sensitivity.iter())
                .all(|v| v.is_finite())
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Keyframes, optional masks, and ground-truth intermediates for one set.
#[derive(Debug, Clone)]
pub struct EvalCase {
    pub keyframes: Vec<Image>,
    pub masks: Option<Vec<Mask>>,
    pub truth: Vec<Image>,
}

/// Builds set `set` of arity `n` for one scene under `cfg.condition`.
pub fn eval_case(
    scene: &SceneSpec,
    data: &SceneData,
    truth: &SceneTruth,
    n: usize,
    set: usize,
    cfg: &EvalConfig,
) -> Result<EvalCase> {
    let span = FRAME_STRIDE * (n - 1) + 1;
    match cfg.condition {
        EvalCondition::Standard => {
            if data.clip.len() < span {
                return Err(Error::Dataset(format!(
                    "scene {} clip has {} frames; n={n} needs {span} ground-truth frames",
                    data.id,
                    data.clip.len()
                )));
            }
            let room = data.clip.len() - span;
            let offset = if cfg.sets > 1 { set * room / (cfg.sets - 1) } else { 0 };
            let window = &data.clip[offset..offset + span];
            let keyframes = window.iter().step_by(FRAME_STRIDE).cloned().collect();
            let truth = window
                .iter()
                .enumerate()
                .filter(|(k, _)| k % FRAME_STRIDE != 0)
                .map(|(_, f)| f.clone())
                .collect();
            Ok(EvalCase {
                keyframes,
                masks: None,
                truth,
            })
        }
        EvalCondition::PhotoStyle | EvalCondition::MinimalOverlap => {
            let photo = cfg.condition == EvalCondition::PhotoStyle;
            let speed = if photo { cfg.photo_speed } else { cfg.overlap_speed };
            let mut rng = ChaCha8Rng::seed_from_u64(
                truth.scene_seed ^ cfg.seed.rotate_left(17) ^ ((n as u64) << 40) ^ ((set as u64) << 48),
            );
            let path = sample_camera_path(span, speed, &mut rng, &truth.synth)?;
            let lights: Vec<Illumination> = if photo {
                (0..n).map(|_| Illumination::random(&mut rng)).collect()
            } else {
                vec![truth.clip_illumination; n]
            };
            let mut keyframes = Vec::with_capacity(n);
            let mut masks = Vec::with_capacity(n);
            for (j, light) in lights.iter().enumerate() {
                let phase = photo.then(|| rng.gen::<f32>());
                let (img, mask) = render_view(scene, &path.poses[j * FRAME_STRIDE], light, phase, &truth.synth)?;
                keyframes.push(img.quantized());
                masks.push(mask);
            }
            let truth_frames = (0..span)
                .filter(|k| k % FRAME_STRIDE != 0)
                .map(|k| render_view(scene, &path.poses[k], &lights[0], None, &truth.synth).map(|(i, _)| i.quantized()))
                .collect::<Result<Vec<_>>>()?;
            Ok(EvalCase {
                keyframes,
                masks: photo.then_some(masks),
                truth: truth_frames,
            })
        }
    }
}

fn mean_metric(a: &[Image], b: &[Image], f: fn(&Image, &Image) -> Result<f64>) -> Result<f64> {
    let mut total = 0.0;
    for (x, y) in a.iter().zip(b) {
        total += f(x, y)?;
    }
    Ok(total / a.len().max(1) as f64)
}

/// Output of one scored set, kept for image strips.
pub struct ScoredSet {
    pub case: EvalCase,
    pub generated: Vec<Image>,
}

/// Scores every arity and set of one scene. Returns one row per arity and
/// the first set of each arity for strips.
pub fn evaluate_scene(
    weights: &Weights<f32>,
    schedule: &NoiseSchedule,
    data: &SceneData,
    truth: &SceneTruth,
    cfg: &EvalConfig,
) -> Result<(Vec<EvalRow>, Vec<ScoredSet>)> {
    let scene = truth.scene()?;
    let mut rows = Vec::with_capacity(cfg.arities.len());
    let mut strips = Vec::new();
    for &n in &cfg.arities {
        let mut acc = [0.0f64; 7];
        let mut order = 0.0;
        for set in 0..cfg.sets {
            let case = eval_case(&scene, data, truth, n, set, cfg)?;
            let seed = cfg.seed.wrapping_add((data.id as u64) << 20).wrapping_add((n as u64) << 8).wrapping_add(set as u64);
            let request = GenerationRequest {
                keyframes: case.keyframes.clone(),
                transient_masks: case.masks.clone(),
                appearance_source: None,
                steps: cfg.steps,
                seed,
            };
            let out = generate(weights, schedule, &request)?.frames;
            let fade = crossfade_sequence(&case.keyframes)?;
            let (first, last) = (&out[0], &out[out.len() - 1]);
            let (k1, kn) = (&case.keyframes[0], &case.keyframes[n - 1]);
            let margin = 0.5 * ((psnr(first, k1)? - psnr(first, kn)?) + (psnr(last, kn)? - psnr(last, k1)?));
            let vals = [
                mean_metric(&out, &case.truth, psnr)?,
                mean_metric(&out, &case.truth, ssim)?,
                mean_metric(&fade, &case.truth, psnr)?,
                mean_metric(&fade, &case.truth, ssim)?,
                appearance_drift(&out)?,
                appearance_drift(&fade)?,
                margin,
            ];
            for (a, v) in acc.iter_mut().zip(vals) {
                *a += v;
            }
            if cfg.order_sensitivity && n >= 3 {
                order += reorder_sensitivity(weights, schedule, &request)?;
            }
            if set == 0 {
                strips.push(ScoredSet { case, generated: out });
            }
        }
        let k = cfg.sets.max(1) as f64;
        rows.push(EvalRow {
            scene: data.id,
            n,
            sets: cfg.sets,
            psnr: acc[0] / k,
            ssim: acc[1] / k,
            crossfade_psnr: acc[2] / k,
            crossfade_ssim: acc[3] / k,
            drift: acc[4] / k,
            crossfade_drift: acc[5] / k,
            endpoint_margin_db: acc[6] / k,
            order_sensitivity: (cfg.order_sensitivity && n >= 3).then(|| order / k),
        });
    }
    Ok((rows, strips))
}

/// Ground truth over generated output, keyframes at both ends of each row.
pub fn strip_image(set: &ScoredSet) -> Result<Image> {
    let n = set.case.keyframes.len();
    let mut top = Vec::new();
    let mut bottom = Vec::new();
    for pair in 0..n - 1 {
        top.push(set.case.keyframes[pair].clone());
        bottom.push(set.case.keyframes[pair].clone());
        let r = pair * INTERMEDIATES_PER_PAIR..(pair + 1) * INTERMEDIATES_PER_PAIR;
        top.extend(set.case.truth[r.clone()].iter().cloned());
        bottom.extend(set.generated[r].iter().cloned());
    }
    top.push(set.case.keyframes[n - 1].clone());
    bottom.push(set.case.keyframes[n - 1].clone());
    let (a, b) = (Image::hstack(&top)?, Image::hstack(&bottom)?);
    let mut data = a.data;
    data.extend(b.data);
    Image::from_vec(a.height * 2, a.width, data)
}

/// Evaluates every scene under `dir`, writes `report` as JSON and image
/// strips into `<report stem>_strips/`.
pub fn run_eval(
    weights: &Weights<f32>,
    schedule: &NoiseSchedule,
    dir: &Path,
    report: Option<&Path>,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    if cfg.arities.iter().any(|&n| !(2..=5).contains(&n)) || cfg.sets == 0 {
        return Err(Error::Config("eval arities must lie in 2..=5 and sets must be positive".into()));
    }
    let mut rows = Vec::new();
    let strip_dir = report.map(|r| {
        let stem = r.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "report".into());
        r.with_file_name(format!("{stem}_strips"))
    });
    if let Some(d) = &strip_dir {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    for id in scene_ids(dir)? {
        let data = load_scene(dir, id)?;
        let truth = load_truth(dir, id)?;
        let (scene_rows, sets) = evaluate_scene(weights, schedule, &data, &truth, cfg)?;
        if let Some(d) = &strip_dir {
            for (row, set) in scene_rows.iter().zip(&sets) {
                strip_image(set)?.save_png(&d.join(format!("scene_{id:04}_n{}.png", row.n)))?;
            }
        }
        rows.extend(scene_rows);
    }
    let out = EvalReport::from_rows(weights_hash(weights), cfg, rows);
    if let Some(path) = report {
        fs::write(path, out.to_json()?).map_err(|e| Error::io(path, e))?;
    }
    Ok(out)
}

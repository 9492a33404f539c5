//! Desk-scale data pipeline: deterministic procedural identity images with
//! ground-truth face boxes, largest-face cropping, identity-disjoint splits
//! and target-image reservation.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use ndarray::Array3;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::pngio;

/// Half-open pixel rectangle `[x0, x1) x [y0, y1)`. Coordinates are signed so
/// detector boxes may extend past the image and get clipped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x0: i64,
    pub y0: i64,
    pub x1: i64,
    pub y1: i64,
}

impl BoundingBox {
    pub fn new(x0: i64, y0: i64, x1: i64, y1: i64) -> Result<Self> {
        if x0 >= x1 || y0 >= y1 {
            return Err(Error::InvalidArgument(format!(
                "degenerate bounding box ({x0},{y0},{x1},{y1})"
            )));
        }
        Ok(BoundingBox { x0, y0, x1, y1 })
    }

    /// Intersection with image bounds; `None` when the box falls fully outside.
    pub fn clip(&self, height: usize, width: usize) -> Option<BoundingBox> {
        let x0 = self.x0.max(0);
        let y0 = self.y0.max(0);
        let x1 = self.x1.min(width as i64);
        let y1 = self.y1.min(height as i64);
        if x0 < x1 && y0 < y1 {
            Some(BoundingBox { x0, y0, x1, y1 })
        } else {
            None
        }
    }

    pub fn area(&self) -> i64 {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }
}

/// An image tagged with its identity and per-identity index.
#[derive(Debug, Clone)]
pub struct LabeledImage {
    pub image: Image,
    pub identity_id: u32,
    pub image_id: u32,
}

/// A generated sample: labeled image plus its ground-truth full-face box.
#[derive(Debug, Clone)]
pub struct SyntheticSample {
    pub labeled: LabeledImage,
    pub face_box: BoundingBox,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NuisanceConfig {
    /// Multiplicative lighting factor drawn from `1 +- lighting_range`.
    pub lighting_range: f64,
    /// Whole-face shift in pixels, each axis drawn from `[-n, n]`.
    pub shift_range_px: i64,
    /// Additive Gaussian pixel noise.
    pub noise_sigma: f64,
}

impl Default for NuisanceConfig {
    fn default() -> Self {
        NuisanceConfig {
            lighting_range: 0.08,
            shift_range_px: 1,
            noise_sigma: 0.015,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub num_identities: u32,
    pub images_per_identity: u32,
    /// Square image side length.
    pub image_size: usize,
    /// 1 (grayscale) or 3 (RGB).
    pub channels: usize,
    pub nuisance: NuisanceConfig,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_identities: 40,
            images_per_identity: 12,
            image_size: 32,
            channels: 1,
            nuisance: NuisanceConfig::default(),
            seed: 7,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_identities < 2 {
            return Err(Error::InvalidConfig("num_identities must be >= 2".into()));
        }
        if self.images_per_identity < 2 {
            return Err(Error::InvalidConfig(
                "images_per_identity must be >= 2".into(),
            ));
        }
        if self.image_size < 8 {
            return Err(Error::InvalidConfig("image_size must be >= 8".into()));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::InvalidConfig("channels must be 1 or 3".into()));
        }
        Ok(())
    }
}

/// Returns the sub-image of the largest box after clipping to image bounds.
/// Ties break on the smallest `(x0, y0)` lexicographically.
pub fn crop_largest_face(image: &Image, boxes: &[BoundingBox]) -> Result<Image> {
    if boxes.is_empty() {
        return Err(Error::InvalidArgument("no bounding boxes given".into()));
    }
    let mut best: Option<BoundingBox> = None;
    for b in boxes {
        let clipped = b.clip(image.height(), image.width()).ok_or_else(|| {
            Error::InvalidArgument(format!("bounding box {b:?} fully outside image"))
        })?;
        best = Some(match best {
            None => clipped,
            Some(cur) => {
                let better = clipped.area() > cur.area()
                    || (clipped.area() == cur.area()
                        && (clipped.x0, clipped.y0) < (cur.x0, cur.y0));
                if better {
                    clipped
                } else {
                    cur
                }
            }
        });
    }
    let b = best.unwrap();
    let (c, _, _) = image.data().dim();
    let data = Array3::from_shape_fn(
        (
            c,
            (b.y1 - b.y0) as usize,
            (b.x1 - b.x0) as usize,
        ),
        |(ch, y, x)| image.data()[[ch, b.y0 as usize + y, b.x0 as usize + x]],
    );
    Image::new(data)
}

// splitmix64; decorrelates the per-identity and per-image stream seeds
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

struct IdentityParams {
    skin: [f64; 3],
    background: [f64; 3],
    face_rx: f64,
    face_ry: f64,
    eye_dx: f64,
    eye_dy: f64,
    eye_r: f64,
    eye_tone: f64,
    mouth_half_w: f64,
    mouth_dy: f64,
    mouth_half_h: f64,
    mouth_tone: f64,
    nose_len: f64,
}

fn sample_identity(rng: &mut ChaCha8Rng, size: f64, channels: usize) -> IdentityParams {
    let base_skin: f64 = rng.random_range(0.45..0.85);
    let base_bg: f64 = rng.random_range(0.05..0.25);
    let mut skin = [base_skin; 3];
    let mut background = [base_bg; 3];
    if channels == 3 {
        for v in skin.iter_mut() {
            *v = (*v * rng.random_range(0.85..1.15)).clamp(0.0, 1.0);
        }
        for v in background.iter_mut() {
            *v = (*v * rng.random_range(0.8..1.2)).clamp(0.0, 1.0);
        }
    }
    IdentityParams {
        skin,
        background,
        face_rx: rng.random_range(0.26..0.38) * size,
        face_ry: rng.random_range(0.32..0.46) * size,
        eye_dx: rng.random_range(0.10..0.18) * size,
        eye_dy: -rng.random_range(0.06..0.16) * size,
        eye_r: rng.random_range(0.035..0.07) * size,
        eye_tone: rng.random_range(0.0..0.15),
        mouth_half_w: rng.random_range(0.08..0.17) * size,
        mouth_dy: rng.random_range(0.12..0.24) * size,
        mouth_half_h: rng.random_range(0.015..0.045) * size,
        mouth_tone: rng.random_range(0.08..0.30),
        nose_len: rng.random_range(0.05..0.14) * size,
    }
}

fn gaussian(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    // Box-Muller
    let u1: f64 = rng.random::<f64>().max(1e-12);
    let u2: f64 = rng.random::<f64>();
    sigma * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn render_sample(
    id: &IdentityParams,
    cfg: &SyntheticConfig,
    rng: &mut ChaCha8Rng,
) -> (Image, BoundingBox) {
    let s = cfg.image_size;
    let lighting = 1.0 + rng.random_range(-cfg.nuisance.lighting_range..=cfg.nuisance.lighting_range);
    let shift = cfg.nuisance.shift_range_px;
    let dx = if shift > 0 { rng.random_range(-shift..=shift) } else { 0 } as f64;
    let dy = if shift > 0 { rng.random_range(-shift..=shift) } else { 0 } as f64;
    let cx = s as f64 / 2.0 + dx;
    let cy = s as f64 / 2.0 + dy;

    let mut data = Array3::zeros((cfg.channels, s, s));
    for y in 0..s {
        for x in 0..s {
            let px = x as f64 + 0.5 - cx;
            let py = y as f64 + 0.5 - cy;
            let inside_face =
                (px / id.face_rx).powi(2) + (py / id.face_ry).powi(2) <= 1.0;
            for ch in 0..cfg.channels {
                let mut v = if inside_face {
                    let mut tone = id.skin[ch];
                    let left_eye = ((px + id.eye_dx).powi(2) + (py - id.eye_dy).powi(2)).sqrt();
                    let right_eye = ((px - id.eye_dx).powi(2) + (py - id.eye_dy).powi(2)).sqrt();
                    if left_eye <= id.eye_r || right_eye <= id.eye_r {
                        tone = id.eye_tone;
                    } else if px.abs() <= id.mouth_half_w
                        && (py - id.mouth_dy).abs() <= id.mouth_half_h
                    {
                        tone = id.mouth_tone;
                    } else if px.abs() <= 0.02 * s as f64 && py > 0.0 && py < id.nose_len {
                        tone = id.skin[ch] * 0.72;
                    }
                    tone
                } else {
                    id.background[ch]
                };
                v = v * lighting + gaussian(rng, cfg.nuisance.noise_sigma);
                data[[ch, y, x]] = v.clamp(0.0, 1.0);
            }
        }
    }
    let face_box = BoundingBox {
        x0: (cx - id.face_rx).floor() as i64,
        y0: (cy - id.face_ry).floor() as i64,
        x1: (cx + id.face_rx).ceil() as i64,
        y1: (cy + id.face_ry).ceil() as i64,
    }
    .clip(s, s)
    .expect("face box always intersects the image");
    (Image::new(data).expect("rendered pixels are clamped"), face_box)
}

/// Deterministic procedural dataset: each identity is a parameter vector,
/// images of one identity differ only by nuisance factors. Every sample
/// ships a ground-truth full-face bounding box.
pub fn generate_synthetic_identities(cfg: &SyntheticConfig) -> Result<Vec<SyntheticSample>> {
    cfg.validate()?;
    let size = cfg.image_size as f64;
    let mut out = Vec::with_capacity((cfg.num_identities * cfg.images_per_identity) as usize);
    for identity_id in 0..cfg.num_identities {
        let mut id_rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed ^ mix(identity_id as u64 + 1)));
        let params = sample_identity(&mut id_rng, size, cfg.channels);
        for image_id in 0..cfg.images_per_identity {
            let mut img_rng = ChaCha8Rng::seed_from_u64(mix(
                cfg.seed ^ mix(((identity_id as u64) << 32) | (image_id as u64 + 0x1000)),
            ));
            let (image, face_box) = render_sample(&params, cfg, &mut img_rng);
            out.push(SyntheticSample {
                labeled: LabeledImage {
                    image,
                    identity_id,
                    image_id,
                },
                face_box,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// All images of one identity land in a single split (default).
    ByIdentity,
    /// Images shuffled individually, LFW-style.
    ByImage,
}

/// Deterministic, disjoint, exhaustive split. Fractions must sum to 1.
pub fn split_dataset(
    data: &[LabeledImage],
    fractions: (f64, f64, f64),
    mode: SplitMode,
    seed: u64,
) -> Result<(Vec<LabeledImage>, Vec<LabeledImage>, Vec<LabeledImage>)> {
    let (ft, fv, fe) = fractions;
    if ft < 0.0 || fv < 0.0 || fe < 0.0 || (ft + fv + fe - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(
            "split fractions must be non-negative and sum to 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed ^ 0x5b1e7));

    let assign = |units: usize| -> Result<(usize, usize)> {
        let nonzero = [ft, fv, fe].iter().filter(|&&f| f > 0.0).count();
        if units < nonzero {
            return Err(Error::InvalidArgument(format!(
                "{units} units cannot cover {nonzero} nonzero splits"
            )));
        }
        // cumulative rounding, then push boundaries so every nonzero split
        // receives at least one unit
        let mut c1 = (ft * units as f64).round() as usize;
        let mut c2 = ((ft + fv) * units as f64).round() as usize;
        if ft > 0.0 && c1 == 0 {
            c1 = 1;
        }
        if fv > 0.0 && c2 <= c1 {
            c2 = c1 + 1;
        }
        if fe > 0.0 && c2 >= units {
            c2 = units - 1;
            if fv > 0.0 && c1 >= c2 {
                c1 = c2 - 1;
            }
        }
        if fv == 0.0 {
            c2 = c1;
        }
        if ft == 0.0 {
            c1 = 0;
        }
        if fe == 0.0 {
            c2 = units;
        }
        Ok((c1, c2))
    };

    match mode {
        SplitMode::ByIdentity => {
            let mut ids: Vec<u32> = data
                .iter()
                .map(|s| s.identity_id)
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            let (c1, c2) = assign(ids.len())?;
            ids.shuffle(&mut rng);
            let train_ids: BTreeSet<u32> = ids[..c1].iter().copied().collect();
            let val_ids: BTreeSet<u32> = ids[c1..c2].iter().copied().collect();
            let mut train = Vec::new();
            let mut val = Vec::new();
            let mut test = Vec::new();
            for s in data {
                if train_ids.contains(&s.identity_id) {
                    train.push(s.clone());
                } else if val_ids.contains(&s.identity_id) {
                    val.push(s.clone());
                } else {
                    test.push(s.clone());
                }
            }
            Ok((train, val, test))
        }
        SplitMode::ByImage => {
            let mut order: Vec<usize> = (0..data.len()).collect();
            let (c1, c2) = assign(order.len())?;
            order.shuffle(&mut rng);
            let take = |range: &[usize]| -> Vec<LabeledImage> {
                let mut idx = range.to_vec();
                idx.sort_unstable();
                idx.into_iter().map(|i| data[i].clone()).collect()
            };
            Ok((take(&order[..c1]), take(&order[c1..c2]), take(&order[c2..])))
        }
    }
}

/// Removes the first `k` images (by `image_id` order) of the given identity
/// into a target list; the remainder keeps its original order.
pub fn reserve_target_images(
    data: &[LabeledImage],
    identity_id: u32,
    k: usize,
) -> Result<(Vec<LabeledImage>, Vec<LabeledImage>)> {
    let mut of_identity: Vec<&LabeledImage> = data
        .iter()
        .filter(|s| s.identity_id == identity_id)
        .collect();
    if of_identity.len() < k {
        return Err(Error::InvalidArgument(format!(
            "identity {identity_id} has {} images, cannot reserve {k}",
            of_identity.len()
        )));
    }
    of_identity.sort_by_key(|s| s.image_id);
    let reserved: BTreeSet<u32> = of_identity[..k].iter().map(|s| s.image_id).collect();
    let mut targets: Vec<LabeledImage> = of_identity[..k].iter().map(|s| (*s).clone()).collect();
    targets.sort_by_key(|s| s.image_id);
    let remainder = data
        .iter()
        .filter(|s| !(s.identity_id == identity_id && reserved.contains(&s.image_id)))
        .cloned()
        .collect();
    Ok((targets, remainder))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestItem {
    pub identity_id: u32,
    pub image_id: u32,
    pub file: String,
    pub face_box: BoundingBox,
    pub split: Split,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config: SyntheticConfig,
    pub split_mode: SplitMode,
    pub fractions: (f64, f64, f64),
    pub items: Vec<ManifestItem>,
}

/// Writes PNGs named `<identity_id>_<image_id>.png` plus `manifest.json`.
pub fn write_dataset(
    dir: &Path,
    samples: &[SyntheticSample],
    splits: &std::collections::BTreeMap<(u32, u32), Split>,
    cfg: &SyntheticConfig,
    split_mode: SplitMode,
    fractions: (f64, f64, f64),
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut items = Vec::with_capacity(samples.len());
    for s in samples {
        let key = (s.labeled.identity_id, s.labeled.image_id);
        let split = *splits.get(&key).ok_or_else(|| {
            Error::InvalidArgument(format!("no split assignment for {key:?}"))
        })?;
        let file = format!("{}_{}.png", s.labeled.identity_id, s.labeled.image_id);
        pngio::save_png(&s.labeled.image, &dir.join(&file))?;
        items.push(ManifestItem {
            identity_id: s.labeled.identity_id,
            image_id: s.labeled.image_id,
            file,
            face_box: s.face_box,
            split,
        });
    }
    let manifest = DatasetManifest {
        config: cfg.clone(),
        split_mode,
        fractions,
        items,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

pub struct LoadedDataset {
    pub manifest: DatasetManifest,
    pub train: Vec<LabeledImage>,
    pub val: Vec<LabeledImage>,
    pub test: Vec<LabeledImage>,
}

pub fn load_dataset(dir: &Path) -> Result<LoadedDataset> {
    let manifest_path = dir.join("manifest.json");
    if !manifest_path.exists() {
        return Err(Error::MissingArtifact(format!(
            "dataset manifest {}",
            manifest_path.display()
        )));
    }
    let manifest: DatasetManifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    for item in &manifest.items {
        let image = pngio::load_png(&dir.join(&item.file))?;
        let labeled = LabeledImage {
            image,
            identity_id: item.identity_id,
            image_id: item.image_id,
        };
        match item.split {
            Split::Train => train.push(labeled),
            Split::Val => val.push(labeled),
            Split::Test => test.push(labeled),
        }
    }
    Ok(LoadedDataset {
        manifest,
        train,
        val,
        test,
    })
}

//! The measurement harness: white/black-box attack success rates, blur
//! robustness, SSIM statistics, discriminator detectability, embedding-shift
//! statistics, and t-SNE export (coordinates CSV and a scatter-plot PNG).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::adversary::{Discriminator, Student};
use crate::dataset::LabeledImage;
use crate::embedder::{identity_reference, Embedder, Embedding, VerificationThreshold};
use crate::error::{Error, Result};
use crate::imaging::{gaussian_blur, ssim, Image, SsimParams};
use crate::training::{cloak, AttackModel, CloakModel};

pub use crate::tsne::{tsne, TsneConfig, TsneResult};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum EvalMode {
    Untargeted,
    Targeted { target: Embedding },
}

/// Verification-based evaluation protocol: per-identity references computed
/// from clean images only, thresholded at the EER-calibrated tau.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalProtocol {
    pub mode: EvalMode,
    pub references: BTreeMap<u32, Embedding>,
    pub th: VerificationThreshold,
}

impl EvalProtocol {
    /// Builds references from the clean images of `reference_set`, grouped
    /// by identity.
    pub fn build(
        embedder: &mut Embedder,
        reference_set: &[LabeledImage],
        mode: EvalMode,
        th: VerificationThreshold,
    ) -> Result<Self> {
        let mut by_identity: BTreeMap<u32, Vec<&Image>> = BTreeMap::new();
        for s in reference_set {
            by_identity.entry(s.identity_id).or_default().push(&s.image);
        }
        let mut references = BTreeMap::new();
        for (id, images) in by_identity {
            references.insert(id, identity_reference(embedder, &images)?);
        }
        Ok(EvalProtocol { mode, references, th })
    }

    fn reference_for(&self, identity_id: u32) -> Result<&Embedding> {
        self.references.get(&identity_id).ok_or_else(|| {
            Error::InvalidArgument(format!("no reference for identity {identity_id}"))
        })
    }
}

/// Anything that maps an image to its cloaked version.
pub enum Cloaker<'a> {
    Teacher { model: &'a mut AttackModel, threshold: f64 },
    Student { student: &'a mut Student, threshold: f64 },
    /// delta = 0 baseline (clean false-non-match oracle).
    Identity,
}

impl Cloaker<'_> {
    pub fn cloak_image(&mut self, image: &Image) -> Result<Image> {
        match self {
            Cloaker::Teacher { model, threshold } => {
                Ok(cloak(CloakModel::Teacher(model), image, *threshold)?.image)
            }
            Cloaker::Student { student, threshold } => {
                Ok(cloak(CloakModel::Student(student), image, *threshold)?.image)
            }
            Cloaker::Identity => Ok(image.clone()),
        }
    }
}

/// Per-sample success decision on an already-computed cloaked embedding.
/// Untargeted: the cloaked image fails verification against its own identity
/// reference. Targeted: the cloaked embedding is strictly closer to the
/// target than to its own reference.
pub fn sample_success(e_cloaked: &Embedding, identity_id: u32, p: &EvalProtocol) -> Result<bool> {
    let own = p.reference_for(identity_id)?;
    match &p.mode {
        EvalMode::Untargeted => {
            Ok(e_cloaked.distance(own, p.th.metric) >= p.th.tau)
        }
        EvalMode::Targeted { target } => {
            Ok(e_cloaked.distance(target, p.th.metric) < e_cloaked.distance(own, p.th.metric))
        }
    }
}

/// Success rate over embeddings paired with identity ids (the core the
/// image-level evaluation reduces to; also usable with synthetic oracles).
pub fn success_from_embeddings(
    cloaked: &[Embedding],
    identities: &[u32],
    p: &EvalProtocol,
) -> Result<f64> {
    if cloaked.is_empty() || cloaked.len() != identities.len() {
        return Err(Error::InvalidArgument(
            "embeddings and identities must be nonempty and parallel".into(),
        ));
    }
    let mut successes = 0usize;
    for (e, &id) in cloaked.iter().zip(identities) {
        if sample_success(e, id, p)? {
            successes += 1;
        }
    }
    Ok(successes as f64 / cloaked.len() as f64)
}

/// Fraction of test images whose cloaked version defeats verification
/// (untargeted) or lands nearer the target (targeted). Plain per-image loop.
pub fn attack_success_rate(
    embedder: &mut Embedder,
    cloaker: &mut Cloaker,
    test_set: &[LabeledImage],
    p: &EvalProtocol,
) -> Result<f64> {
    if test_set.is_empty() {
        return Err(Error::InvalidArgument("test set is empty".into()));
    }
    let mut embeddings = Vec::with_capacity(test_set.len());
    let mut identities = Vec::with_capacity(test_set.len());
    for s in test_set {
        let cloaked = cloaker.cloak_image(&s.image)?;
        embeddings.push(embedder.embed(&cloaked)?);
        identities.push(s.identity_id);
    }
    success_from_embeddings(&embeddings, &identities, p)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BlurParams {
    pub sigma: f64,
    pub kernel_size: usize,
}

impl Default for BlurParams {
    fn default() -> Self {
        BlurParams { sigma: 1.0, kernel_size: 5 }
    }
}

/// Success rate with a Gaussian blur applied to each cloaked image as the
/// last transform before embedding.
pub fn robustness_under_blur(
    embedder: &mut Embedder,
    cloaker: &mut Cloaker,
    test_set: &[LabeledImage],
    p: &EvalProtocol,
    blur: BlurParams,
) -> Result<f64> {
    if test_set.is_empty() {
        return Err(Error::InvalidArgument("test set is empty".into()));
    }
    let mut embeddings = Vec::with_capacity(test_set.len());
    let mut identities = Vec::with_capacity(test_set.len());
    for s in test_set {
        let cloaked = cloaker.cloak_image(&s.image)?;
        let blurred = gaussian_blur(&cloaked, blur.sigma, blur.kernel_size)?;
        embeddings.push(embedder.embed(&blurred)?);
        identities.push(s.identity_id);
    }
    success_from_embeddings(&embeddings, &identities, p)
}

/// Mean predicted real-probability over each set.
pub fn detectability_probe(
    discriminator: &mut Discriminator,
    originals: &[Image],
    adversarials: &[Image],
) -> Result<(f64, f64)> {
    if originals.is_empty() || adversarials.is_empty() {
        return Err(Error::InvalidArgument("detectability probe needs nonempty sets".into()));
    }
    let mean_prob = |disc: &mut Discriminator, set: &[Image]| -> f64 {
        let mut total = 0.0;
        for chunk in set.chunks(64) {
            let samples: Vec<_> = chunk.iter().map(|i| i.data().clone()).collect();
            let x = crate::nn::stack_samples(&samples);
            total += disc.prob_batch(&x, false).iter().sum::<f64>();
        }
        total / set.len() as f64
    };
    Ok((mean_prob(discriminator, originals), mean_prob(discriminator, adversarials)))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShiftStats {
    pub mean_shift: f64,
    pub min_shift: f64,
    pub max_shift: f64,
    /// 25/50/75% quantiles of the per-image shift.
    pub quantiles: [f64; 3],
    /// Targeted mode only: mean distance to the target from the original
    /// embeddings and from the cloaked embeddings.
    pub mean_dist_to_target_orig: Option<f64>,
    pub mean_dist_to_target_cloaked: Option<f64>,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Per-image distance between original and cloaked embeddings, plus
/// distance-to-target statistics in targeted mode.
pub fn embedding_shift_stats(
    embedder: &mut Embedder,
    originals: &[Image],
    cloaked: &[Image],
    p: &EvalProtocol,
) -> Result<ShiftStats> {
    if originals.len() != cloaked.len() || originals.is_empty() {
        return Err(Error::InvalidArgument(
            "originals and cloaked must be nonempty and parallel".into(),
        ));
    }
    let e_orig = embedder.embed_many(&originals.iter().collect::<Vec<_>>())?;
    let e_cloak = embedder.embed_many(&cloaked.iter().collect::<Vec<_>>())?;
    let mut shifts: Vec<f64> = e_orig
        .iter()
        .zip(&e_cloak)
        .map(|(a, b)| a.distance(b, p.th.metric))
        .collect();
    shifts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mean = shifts.iter().sum::<f64>() / shifts.len() as f64;
    let (to_orig, to_cloak) = match &p.mode {
        EvalMode::Targeted { target } => {
            let o = e_orig.iter().map(|e| e.distance(target, p.th.metric)).sum::<f64>()
                / e_orig.len() as f64;
            let c = e_cloak.iter().map(|e| e.distance(target, p.th.metric)).sum::<f64>()
                / e_cloak.len() as f64;
            (Some(o), Some(c))
        }
        EvalMode::Untargeted => (None, None),
    };
    Ok(ShiftStats {
        mean_shift: mean,
        min_shift: shifts[0],
        max_shift: *shifts.last().unwrap(),
        quantiles: [quantile(&shifts, 0.25), quantile(&shifts, 0.5), quantile(&shifts, 0.75)],
        mean_dist_to_target_orig: to_orig,
        mean_dist_to_target_cloaked: to_cloak,
    })
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SsimStats {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

/// SSIM over original/cloaked pairs.
pub fn ssim_report(originals: &[Image], cloaked: &[Image], p: &SsimParams) -> Result<SsimStats> {
    if originals.len() != cloaked.len() || originals.is_empty() {
        return Err(Error::InvalidArgument(
            "originals and cloaked must be nonempty and parallel".into(),
        ));
    }
    let mut mean = 0.0;
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for (a, b) in originals.iter().zip(cloaked) {
        let s = ssim(a, b, p)?;
        mean += s / originals.len() as f64;
        min = min.min(s);
        max = max.max(s);
    }
    Ok(SsimStats { mean, min, max })
}

/// Aggregated Table-1-style report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub success_rate_whitebox: f64,
    /// Absent when no black-box embedder was trained.
    pub success_rate_blackbox: Option<f64>,
    pub success_rate_whitebox_blurred: f64,
    pub clean_false_non_match_rate: f64,
    pub ssim: SsimStats,
    pub mean_linf_delta: f64,
    pub mean_cloak_seconds: f64,
    pub shift: ShiftStats,
    /// (mean p on originals, mean p on adversarials), when a discriminator
    /// was trained.
    pub detectability: Option<(f64, f64)>,
    pub blur: BlurParams,
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        for (name, r) in [
            ("whitebox", Some(self.success_rate_whitebox)),
            ("blackbox", self.success_rate_blackbox),
            ("whitebox_blurred", Some(self.success_rate_whitebox_blurred)),
            ("clean_fnmr", Some(self.clean_false_non_match_rate)),
        ] {
            let Some(r) = r else { continue };
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::InvalidArgument(format!("rate {name} = {r} outside [0,1]")));
            }
        }
        Ok(())
    }
}

/// One exported t-SNE point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TsnePoint {
    pub identity_id: u32,
    pub image_id: u32,
    /// original | cloaked | target
    pub kind: String,
    pub x: f64,
    pub y: f64,
}

/// `identity_id,image_id,kind,x,y` rows.
pub fn write_tsne_csv(path: &std::path::Path, points: &[TsnePoint]) -> Result<()> {
    let mut out = String::from("identity_id,image_id,kind,x,y\n");
    for p in points {
        out.push_str(&format!("{},{},{},{},{}\n", p.identity_id, p.image_id, p.kind, p.x, p.y));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Renders the 2-D layout as a PNG scatter plot: originals blue, cloaked
/// red, targets green, on a white canvas with a 5% margin.
pub fn render_scatter(points: &[TsnePoint], side: usize, path: &std::path::Path) -> Result<()> {
    if points.is_empty() {
        return Err(Error::InvalidArgument("no points to plot".into()));
    }
    if side < 32 {
        return Err(Error::InvalidArgument("canvas side must be >= 32".into()));
    }
    let (mut xmin, mut xmax) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut ymin, mut ymax) = (f64::INFINITY, f64::NEG_INFINITY);
    for p in points {
        xmin = xmin.min(p.x);
        xmax = xmax.max(p.x);
        ymin = ymin.min(p.y);
        ymax = ymax.max(p.y);
    }
    let xspan = (xmax - xmin).max(1e-12);
    let yspan = (ymax - ymin).max(1e-12);
    let margin = (side as f64 * 0.05) as u32;
    let inner = side as u32 - 2 * margin;
    let mut canvas = image::RgbImage::from_pixel(side as u32, side as u32, image::Rgb([255, 255, 255]));
    for p in points {
        let px = margin + ((p.x - xmin) / xspan * inner as f64).round() as u32;
        let py = margin + ((1.0 - (p.y - ymin) / yspan) * inner as f64).round() as u32;
        let color = match p.kind.as_str() {
            "cloaked" => image::Rgb([200, 30, 30]),
            "target" => image::Rgb([20, 150, 40]),
            _ => image::Rgb([40, 60, 200]),
        };
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let cx = px as i64 + dx;
                let cy = py as i64 + dy;
                if cx >= 0 && cy >= 0 && (cx as u32) < side as u32 && (cy as u32) < side as u32 {
                    canvas.put_pixel(cx as u32, cy as u32, color);
                }
            }
        }
    }
    canvas
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(Error::Codec)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic_identities, split_dataset, SplitMode, SyntheticConfig};
    use crate::embedder::{
        calibrate_threshold, train_embedder, ConvBlockSpec, EmbedderSpec, EmbedderTrainConfig,
        Metric,
    };
    use approx::assert_abs_diff_eq;
    use ndarray::Array1;
    use std::sync::OnceLock;

    struct Fixture {
        embedder: Embedder,
        th: VerificationThreshold,
        train: Vec<LabeledImage>,
        test: Vec<LabeledImage>,
    }

    fn fixture() -> &'static Fixture {
        static CELL: OnceLock<Fixture> = OnceLock::new();
        CELL.get_or_init(|| {
            let cfg = SyntheticConfig {
                num_identities: 12,
                images_per_identity: 6,
                image_size: 16,
                ..SyntheticConfig::default()
            };
            let data: Vec<LabeledImage> = generate_synthetic_identities(&cfg)
                .unwrap()
                .into_iter()
                .map(|s| s.labeled)
                .collect();
            let (train, val, test) =
                split_dataset(&data, (0.5, 0.25, 0.25), SplitMode::ByIdentity, 3).unwrap();
            let spec = EmbedderSpec {
                conv_blocks: vec![
                    ConvBlockSpec { out_channels: 6, stride: 1 },
                    ConvBlockSpec { out_channels: 12, stride: 2 },
                    ConvBlockSpec { out_channels: 16, stride: 2 },
                ],
                embedding_dim: 16,
                feature_tap: 3,
                train: EmbedderTrainConfig { epochs: 40, batch_size: 16, ..Default::default() },
                ..EmbedderSpec::whitebox_default(16, 1)
            };
            let mut embedder = train_embedder(&train, &spec).unwrap();
            let th = calibrate_threshold(&mut embedder, &val, Metric::Euclidean, 1).unwrap();
            Fixture { embedder, th, train, test }
        })
    }

    fn protocol(embedder: &mut Embedder, f: &Fixture) -> EvalProtocol {
        EvalProtocol::build(embedder, &f.test, EvalMode::Untargeted, f.th).unwrap()
    }

    #[test]
    fn identity_cloaker_equals_clean_fnmr_oracle() {
        let f = fixture();
        let mut emb = f.embedder.clone();
        let p = protocol(&mut emb, f);
        let rate =
            attack_success_rate(&mut emb, &mut Cloaker::Identity, &f.test, &p).unwrap();
        // brute-force baseline oracle: run verify over the clean test set
        let mut failures = 0usize;
        for s in &f.test {
            let ok = crate::embedder::verify(
                &mut emb,
                &s.image,
                &p.references[&s.identity_id],
                &p.th,
            )
            .unwrap();
            if !ok {
                failures += 1;
            }
        }
        assert_abs_diff_eq!(rate, failures as f64 / f.test.len() as f64, epsilon = 0.0);
        assert!((0.0..=1.0).contains(&rate));
    }

    #[test]
    fn orthogonal_embedding_oracle_scores_one() {
        let f = fixture();
        let mut emb = f.embedder.clone();
        let p = protocol(&mut emb, f);
        // synthetic oracle: replace each embedding with a vector orthogonal
        // to its own reference (distance sqrt(2) or cosine 1, both > tau on
        // separable data)
        let d = emb.spec.embedding_dim;
        let mut embeddings = Vec::new();
        let mut identities = Vec::new();
        for s in &f.test {
            let r = &p.references[&s.identity_id];
            // Gram-Schmidt a basis vector against the reference
            let mut v = Array1::zeros(d);
            let k = (0..d)
                .min_by(|&a, &b| {
                    r.values()[a]
                        .abs()
                        .partial_cmp(&r.values()[b].abs())
                        .unwrap()
                })
                .unwrap();
            v[k] = 1.0;
            let proj = r.values().dot(&v);
            let orth = &v - &(r.values() * proj);
            embeddings.push(Embedding::from_unnormalized(orth));
            identities.push(s.identity_id);
        }
        let rate = success_from_embeddings(&embeddings, &identities, &p).unwrap();
        assert_eq!(rate, 1.0);
    }

    #[test]
    fn blur_sigma_limit_matches_unblurred() {
        let f = fixture();
        let mut emb = f.embedder.clone();
        let p = protocol(&mut emb, f);
        let base =
            attack_success_rate(&mut emb, &mut Cloaker::Identity, &f.test, &p).unwrap();
        let blurred = robustness_under_blur(
            &mut emb,
            &mut Cloaker::Identity,
            &f.test,
            &p,
            BlurParams { sigma: 1e-3, kernel_size: 3 },
        )
        .unwrap();
        assert_abs_diff_eq!(base, blurred, epsilon = 1e-12);
    }

    #[test]
    fn blurred_identity_matches_per_image_oracle() {
        let f = fixture();
        let mut emb = f.embedder.clone();
        let p = protocol(&mut emb, f);
        let blur = BlurParams::default();
        let rate =
            robustness_under_blur(&mut emb, &mut Cloaker::Identity, &f.test, &p, blur).unwrap();
        let mut successes = 0usize;
        for s in &f.test {
            let blurred = gaussian_blur(&s.image, blur.sigma, blur.kernel_size).unwrap();
            let e = emb.embed(&blurred).unwrap();
            if e.distance(&p.references[&s.identity_id], p.th.metric) >= p.th.tau {
                successes += 1;
            }
        }
        assert_eq!(rate, successes as f64 / f.test.len() as f64);
    }

    #[test]
    fn detectability_probe_bounds_and_symmetry() {
        let f = fixture();
        let spec = crate::adversary::DiscriminatorSpec::default_for((1, 16, 16));
        let mut disc = crate::adversary::build_discriminator(&spec).unwrap();
        let images: Vec<Image> = f.test.iter().map(|s| s.image.clone()).collect();
        let (a, b) = detectability_probe(&mut disc, &images, &images).unwrap();
        assert_eq!(a, b);
        assert!((0.0..=1.0).contains(&a));
        assert!(detectability_probe(&mut disc, &[], &images).is_err());
    }

    #[test]
    fn zero_delta_shift_stats_are_zero() {
        let f = fixture();
        let mut emb = f.embedder.clone();
        let p = protocol(&mut emb, f);
        let images: Vec<Image> = f.test.iter().map(|s| s.image.clone()).collect();
        let stats = embedding_shift_stats(&mut emb, &images, &images, &p).unwrap();
        assert_eq!(stats.mean_shift, 0.0);
        assert_eq!(stats.min_shift, 0.0);
        assert_eq!(stats.max_shift, 0.0);
        assert_eq!(stats.quantiles, [0.0; 3]);
        assert!(stats.mean_dist_to_target_orig.is_none());
    }

    #[test]
    fn shift_stats_nonnegative_and_length_checked() {
        let f = fixture();
        let mut emb = f.embedder.clone();
        let p = protocol(&mut emb, f);
        let images: Vec<Image> = f.test.iter().map(|s| s.image.clone()).collect();
        let mut jittered = Vec::new();
        for img in &images {
            let delta = crate::imaging::Perturbation::new(ndarray::Array3::from_elem(
                img.data().dim(),
                0.03,
            ))
            .unwrap();
            jittered.push(crate::imaging::apply_perturbation(img, &delta).unwrap());
        }
        let stats = embedding_shift_stats(&mut emb, &images, &jittered, &p).unwrap();
        assert!(stats.min_shift >= 0.0);
        assert!(stats.mean_shift >= stats.min_shift && stats.mean_shift <= stats.max_shift);
        assert!(embedding_shift_stats(&mut emb, &images, &images[1..], &p).is_err());
    }

    #[test]
    fn ssim_report_identity_and_bounds() {
        let f = fixture();
        let images: Vec<Image> = f.test.iter().map(|s| s.image.clone()).collect();
        let params = SsimParams { window_size: 7, ..SsimParams::default() };
        let stats = ssim_report(&images, &images, &params).unwrap();
        assert_abs_diff_eq!(stats.mean, 1.0, epsilon = 1e-12);
        assert_eq!((stats.min, stats.max), (1.0, 1.0));
        let shifted: Vec<Image> = images
            .iter()
            .map(|img| {
                let delta = crate::imaging::Perturbation::new(ndarray::Array3::from_elem(
                    img.data().dim(),
                    0.1,
                ))
                .unwrap();
                crate::imaging::apply_perturbation(img, &delta).unwrap()
            })
            .collect();
        let s2 = ssim_report(&images, &shifted, &params).unwrap();
        assert!(s2.mean < 1.0 && s2.min >= -1.0 && s2.max <= 1.0);
        assert!(s2.min <= s2.mean && s2.mean <= s2.max);
    }

    /// Larger projection thresholds admit larger perturbations, so mean SSIM
    /// must fall as t grows on a fixed trained generator.
    #[test]
    fn mean_ssim_decreases_with_threshold() {
        use crate::training::{cloak, train_attack, AttackConfig, CloakModel};
        let f = fixture();
        let mut emb = f.embedder.clone();
        let cfg = AttackConfig {
            epochs: 8,
            batch_size: 12,
            ..AttackConfig::untargeted_default(0.2, false)
        };
        let (mut model, _, _) = train_attack(&mut emb, &f.train, &cfg).unwrap();
        let originals: Vec<Image> = f.test.iter().map(|s| s.image.clone()).collect();
        let params = SsimParams { window_size: 7, ..SsimParams::default() };
        let mut means = Vec::new();
        for t in [0.001, 0.05, 0.1, 0.2] {
            let cloaked: Vec<Image> = originals
                .iter()
                .map(|img| cloak(CloakModel::Teacher(&mut model), img, t).unwrap().image)
                .collect();
            means.push(ssim_report(&originals, &cloaked, &params).unwrap().mean);
        }
        for w in means.windows(2) {
            assert!(w[1] < w[0], "mean SSIM not strictly decreasing: {means:?}");
        }
    }

    #[test]
    fn evaluation_never_mutates_models() {
        let f = fixture();
        let mut emb = f.embedder.clone();
        let before = emb.flat_weights();
        let p = protocol(&mut emb, f);
        let _ = attack_success_rate(&mut emb, &mut Cloaker::Identity, &f.test, &p).unwrap();
        let _ = robustness_under_blur(
            &mut emb,
            &mut Cloaker::Identity,
            &f.test,
            &p,
            BlurParams::default(),
        )
        .unwrap();
        assert_eq!(emb.flat_weights(), before);
    }

    #[test]
    fn tsne_csv_and_scatter_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let points = vec![
            TsnePoint { identity_id: 0, image_id: 0, kind: "original".into(), x: -1.0, y: 0.5 },
            TsnePoint { identity_id: 0, image_id: 0, kind: "cloaked".into(), x: 1.0, y: -0.5 },
            TsnePoint { identity_id: 7, image_id: 2, kind: "target".into(), x: 0.0, y: 0.0 },
        ];
        let csv_path = dir.path().join("tsne.csv");
        write_tsne_csv(&csv_path, &points).unwrap();
        let text = std::fs::read_to_string(&csv_path).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.starts_with("identity_id,image_id,kind,x,y\n"));
        assert!(text.contains("7,2,target,0,0"));

        let png_path = dir.path().join("tsne.png");
        render_scatter(&points, 128, &png_path).unwrap();
        let loaded = image::open(&png_path).unwrap().to_rgb8();
        assert_eq!(loaded.dimensions(), (128, 128));
        // the canvas contains all three marker colours
        let mut seen = [false; 3];
        for px in loaded.pixels() {
            if px.0 == [40, 60, 200] {
                seen[0] = true;
            }
            if px.0 == [200, 30, 30] {
                seen[1] = true;
            }
            if px.0 == [20, 150, 40] {
                seen[2] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn report_validation_rejects_bad_rates() {
        let f = fixture();
        let mut emb = f.embedder.clone();
        let p = protocol(&mut emb, f);
        let images: Vec<Image> = f.test.iter().map(|s| s.image.clone()).collect();
        let shift = embedding_shift_stats(&mut emb, &images, &images, &p).unwrap();
        let mut report = EvalReport {
            success_rate_whitebox: 0.9,
            success_rate_blackbox: Some(0.5),
            success_rate_whitebox_blurred: 0.4,
            clean_false_non_match_rate: 0.05,
            ssim: SsimStats { mean: 0.99, min: 0.97, max: 1.0 },
            mean_linf_delta: 0.1,
            mean_cloak_seconds: 0.001,
            shift,
            detectability: None,
            blur: BlurParams::default(),
        };
        assert!(report.validate().is_ok());
        report.success_rate_blackbox = Some(1.2);
        assert!(report.validate().is_err());
    }
}

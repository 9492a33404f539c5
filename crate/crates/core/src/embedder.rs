//! Face-embedding models: a trainable convolutional embedder standing in for
//! a pretrained verification network, feature-map extraction for the
//! generator, EER threshold calibration, and verification against identity
//! references. A second embedder with a different architecture and seed
//! serves as the black box.

use std::collections::BTreeMap;

use ndarray::{Array1, Array3};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledImage;
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::nn::{
    stack_samples, Adam, Conv2d, Dense, Flatten, Init, L2Normalize, Layer, ParamsMut, ReLU,
    Sequential, Tensor,
};

/// A unit-norm d-dimensional face representation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding(Array1<f64>);

impl Embedding {
    /// Wraps a vector that must already be unit-norm (within 1e-6).
    pub fn new(values: Array1<f64>) -> Result<Self> {
        let norm = values.dot(&values).sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument(format!(
                "embedding norm {norm} not within 1e-6 of 1"
            )));
        }
        Ok(Embedding(values))
    }

    /// L2-normalises an arbitrary nonzero vector.
    pub fn from_unnormalized(values: Array1<f64>) -> Self {
        let norm = values.dot(&values).sqrt().max(1e-12);
        Embedding(values / norm)
    }

    pub fn values(&self) -> &Array1<f64> {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn distance(&self, other: &Embedding, metric: Metric) -> f64 {
        match metric {
            Metric::Euclidean => (&self.0 - &other.0).mapv(|v| v * v).sum().sqrt(),
            Metric::Cosine => 1.0 - self.0.dot(&other.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Euclidean,
    Cosine,
}

/// A spatial activation tensor `(channels, side, side)` from the designated
/// feature-tap layer.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap(pub Array3<f64>);

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvBlockSpec {
    pub out_channels: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedderTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for EmbedderTrainConfig {
    fn default() -> Self {
        EmbedderTrainConfig {
            epochs: 30,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 11,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedderSpec {
    pub input_size: usize,
    pub input_channels: usize,
    pub conv_blocks: Vec<ConvBlockSpec>,
    pub embedding_dim: usize,
    /// Number of leading conv blocks whose output is the generator's feature
    /// map. Defaults to all blocks (the last conv layer before pooling).
    pub feature_tap: usize,
    pub train: EmbedderTrainConfig,
}

impl EmbedderSpec {
    /// White-box default: four conv blocks ending in a 4x4x64 feature map.
    pub fn whitebox_default(input_size: usize, input_channels: usize) -> Self {
        EmbedderSpec {
            input_size,
            input_channels,
            conv_blocks: vec![
                ConvBlockSpec { out_channels: 8, stride: 1 },
                ConvBlockSpec { out_channels: 16, stride: 2 },
                ConvBlockSpec { out_channels: 32, stride: 2 },
                ConvBlockSpec { out_channels: 64, stride: 2 },
            ],
            embedding_dim: 32,
            feature_tap: 4,
            train: EmbedderTrainConfig::default(),
        }
    }

    /// Black-box default: three wider conv blocks, trained with its own seed.
    pub fn blackbox_default(input_size: usize, input_channels: usize) -> Self {
        EmbedderSpec {
            input_size,
            input_channels,
            conv_blocks: vec![
                ConvBlockSpec { out_channels: 12, stride: 1 },
                ConvBlockSpec { out_channels: 24, stride: 2 },
                ConvBlockSpec { out_channels: 48, stride: 2 },
            ],
            embedding_dim: 32,
            feature_tap: 3,
            train: EmbedderTrainConfig {
                seed: 23,
                ..EmbedderTrainConfig::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv_blocks.is_empty() {
            return Err(Error::InvalidConfig("embedder needs conv blocks".into()));
        }
        if self.feature_tap == 0 || self.feature_tap > self.conv_blocks.len() {
            return Err(Error::InvalidConfig(format!(
                "feature_tap {} out of range 1..={}",
                self.feature_tap,
                self.conv_blocks.len()
            )));
        }
        if self.embedding_dim < 8 {
            return Err(Error::InvalidConfig("embedding_dim must be >= 8".into()));
        }
        Ok(())
    }

    /// Spatial side length after the first `blocks` conv blocks.
    fn side_after(&self, blocks: usize) -> usize {
        let mut side = self.input_size;
        for b in &self.conv_blocks[..blocks] {
            side = (side + 2 - 3) / b.stride + 1;
        }
        side
    }

    /// `(channels, side, side)` of the feature map at the tap point.
    pub fn feature_shape(&self) -> (usize, usize, usize) {
        let side = self.side_after(self.feature_tap);
        let ch = self.conv_blocks[self.feature_tap - 1].out_channels;
        (ch, side, side)
    }

    fn flat_dim(&self) -> usize {
        let side = self.side_after(self.conv_blocks.len());
        self.conv_blocks.last().unwrap().out_channels * side * side
    }
}

/// Distance threshold for verification, calibrated at the equal error rate.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct VerificationThreshold {
    pub tau: f64,
    pub metric: Metric,
    pub eer: f64,
}

/// A trained embedder. `features` covers the conv blocks up to the feature
/// tap, `tail` the remaining blocks plus the embedding projection; the
/// classifier head only exists for identity training.
#[derive(Clone, Serialize, Deserialize)]
pub struct Embedder {
    features: Sequential,
    tail: Sequential,
    classifier: Sequential,
    normalize: Layer,
    pub spec: EmbedderSpec,
    pub num_classes: usize,
    /// Forward-pass counter (embed/feature calls), used to verify that
    /// student-only inference paths never touch the embedder.
    #[serde(skip)]
    pub forward_calls: u64,
}

fn conv_block(in_c: usize, spec: &ConvBlockSpec, rng: &mut ChaCha8Rng) -> Vec<Layer> {
    vec![
        Layer::Conv(Conv2d::new(in_c, spec.out_channels, 3, spec.stride, 1, Init::HeNormal, rng)),
        Layer::ReLU(ReLU::default()),
    ]
}

impl Embedder {
    fn build(spec: &EmbedderSpec, num_classes: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        spec.validate()?;
        let mut feature_layers = Vec::new();
        let mut tail_layers = Vec::new();
        let mut in_c = spec.input_channels;
        for (i, b) in spec.conv_blocks.iter().enumerate() {
            let block = conv_block(in_c, b, rng);
            if i < spec.feature_tap {
                feature_layers.extend(block);
            } else {
                tail_layers.extend(block);
            }
            in_c = b.out_channels;
        }
        tail_layers.push(Layer::Flatten(Flatten::default()));
        tail_layers.push(Layer::Dense(Dense::new(
            spec.flat_dim(),
            spec.embedding_dim,
            Init::HeNormal,
            rng,
        )));
        let classifier = Sequential::new(vec![Layer::Dense(Dense::new(
            spec.embedding_dim,
            num_classes,
            Init::HeNormal,
            rng,
        ))]);
        Ok(Embedder {
            features: Sequential::new(feature_layers),
            tail: Sequential::new(tail_layers),
            classifier,
            normalize: Layer::Normalize(L2Normalize::default()),
            spec: spec.clone(),
            num_classes,
            forward_calls: 0,
        })
    }

    pub fn param_count(&self) -> usize {
        self.features.param_count() + self.tail.param_count()
    }

    fn check_input(&self, image: &Image) -> Result<()> {
        if image.height() != self.spec.input_size
            || image.width() != self.spec.input_size
            || image.channels() != self.spec.input_channels
        {
            return Err(Error::shape(
                format!(
                    "({}, {}, {})",
                    self.spec.input_channels, self.spec.input_size, self.spec.input_size
                ),
                format!(
                    "({}, {}, {})",
                    image.channels(),
                    image.height(),
                    image.width()
                ),
            ));
        }
        Ok(())
    }

    /// Batched unit-norm embeddings `(n, d, 1, 1)`.
    pub fn embed_batch_tensor(&mut self, x: &Tensor, train: bool) -> Tensor {
        self.forward_calls += 1;
        let f = self.features.forward(x, train);
        let pen = self.tail.forward(&f, train);
        self.normalize.forward(&pen, train)
    }

    /// Gradient wrt the input batch given a gradient wrt the embeddings.
    /// Weights are untouched (their grads are computed and discarded).
    pub fn backward_input(&mut self, g_embed: &Tensor) -> Tensor {
        let g_pen = self.normalize.backward(g_embed);
        let g_f = self.tail.backward(&g_pen);
        self.features.backward(&g_f)
    }

    pub fn embed(&mut self, image: &Image) -> Result<Embedding> {
        self.check_input(image)?;
        let x = stack_samples(std::slice::from_ref(image.data()));
        let e = self.embed_batch_tensor(&x, false);
        let d = self.spec.embedding_dim;
        let v = Array1::from_shape_fn(d, |i| e[[0, i, 0, 0]]);
        Ok(Embedding(v))
    }

    pub fn embed_many(&mut self, images: &[&Image]) -> Result<Vec<Embedding>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            for img in chunk {
                self.check_input(img)?;
            }
            let samples: Vec<Array3<f64>> = chunk.iter().map(|i| i.data().clone()).collect();
            let x = stack_samples(&samples);
            let e = self.embed_batch_tensor(&x, false);
            let d = self.spec.embedding_dim;
            for ni in 0..chunk.len() {
                out.push(Embedding(Array1::from_shape_fn(d, |i| e[[ni, i, 0, 0]])));
            }
        }
        Ok(out)
    }

    /// Activations at the feature-tap layer.
    pub fn extract_features(&mut self, image: &Image) -> Result<FeatureMap> {
        self.forward_calls += 1;
        self.check_input(image)?;
        let x = stack_samples(std::slice::from_ref(image.data()));
        let f = self.features.forward(&x, false);
        let (_, c, h, w) = f.dim();
        Ok(FeatureMap(Array3::from_shape_fn((c, h, w), |(ci, y, xx)| {
            f[[0, ci, y, xx]]
        })))
    }

    /// Batched feature extraction used by attack training.
    pub fn features_forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        self.forward_calls += 1;
        self.features.forward(x, train)
    }

    /// A copy of the feature-extraction stack (for attack models that own
    /// their feature layers, e.g. fine-tuning).
    pub fn clone_feature_stack(&self) -> Sequential {
        self.features.clone()
    }

    pub fn flat_weights(&self) -> Vec<f64> {
        let mut w = self.features.flat_weights();
        w.extend(self.tail.flat_weights());
        w
    }

    pub fn clear_caches(&mut self) {
        self.features.clear_caches();
        self.tail.clear_caches();
        self.classifier.clear_caches();
        self.normalize.clear_cache();
    }
}

/// Softmax cross-entropy over `(n, k, 1, 1)` logits; returns the mean loss
/// and the gradient wrt the logits.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> (f64, Tensor) {
    let (n, k, _, _) = logits.dim();
    assert_eq!(n, labels.len());
    let mut grad = Tensor::zeros((n, k, 1, 1));
    let mut loss = 0.0;
    for ni in 0..n {
        let max = (0..k).map(|i| logits[[ni, i, 0, 0]]).fold(f64::MIN, f64::max);
        let mut denom = 0.0;
        for i in 0..k {
            denom += (logits[[ni, i, 0, 0]] - max).exp();
        }
        let log_denom = denom.ln() + max;
        loss += log_denom - logits[[ni, labels[ni], 0, 0]];
        for i in 0..k {
            let p = (logits[[ni, i, 0, 0]] - log_denom).exp();
            grad[[ni, i, 0, 0]] = (p - if i == labels[ni] { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    (loss / n as f64, grad)
}

/// Classification-then-embedding training: cross-entropy over identities,
/// embedding taken as the L2-normalised penultimate vector. Deterministic
/// under the spec's seed.
pub fn train_embedder(train_set: &[LabeledImage], spec: &EmbedderSpec) -> Result<Embedder> {
    spec.validate()?;
    let mut class_of: BTreeMap<u32, usize> = BTreeMap::new();
    for s in train_set {
        let next = class_of.len();
        class_of.entry(s.identity_id).or_insert(next);
    }
    if class_of.len() < 2 {
        return Err(Error::InvalidArgument(
            "embedder training needs >= 2 identities".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.train.seed);
    let mut model = Embedder::build(spec, class_of.len(), &mut rng)?;
    let mut adam = Adam::new(spec.train.learning_rate, 0.9, 0.999);

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for _epoch in 0..spec.train.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(spec.train.batch_size) {
            let samples: Vec<Array3<f64>> = chunk
                .iter()
                .map(|&i| train_set[i].image.data().clone())
                .collect();
            let labels: Vec<usize> = chunk
                .iter()
                .map(|&i| class_of[&train_set[i].identity_id])
                .collect();
            let x = stack_samples(&samples);
            let f = model.features.forward(&x, true);
            let pen = model.tail.forward(&f, true);
            let logits = model.classifier.forward(&pen, true);
            let (_loss, dlogits) = softmax_cross_entropy(&logits, &labels);
            let dpen = model.classifier.backward(&dlogits);
            let df = model.tail.backward(&dpen);
            model.features.backward(&df);

            let mut params: Vec<ParamsMut> = model.features.params_mut();
            params.extend(model.tail.params_mut());
            params.extend(model.classifier.params_mut());
            adam.step(params);
        }
    }
    model.clear_caches();
    Ok(model)
}

/// All same-identity pairs plus an equally sized deterministic sample of
/// different-identity pairs, as (distance, is_genuine).
pub fn verification_pairs(
    embedder: &mut Embedder,
    val_set: &[LabeledImage],
    metric: Metric,
    seed: u64,
) -> Result<Vec<(f64, bool)>> {
    let images: Vec<&Image> = val_set.iter().map(|s| &s.image).collect();
    let embeddings = embedder.embed_many(&images)?;
    let mut genuine = Vec::new();
    let mut impostor_candidates = Vec::new();
    for i in 0..val_set.len() {
        for j in (i + 1)..val_set.len() {
            if val_set[i].identity_id == val_set[j].identity_id {
                genuine.push((i, j));
            } else {
                impostor_candidates.push((i, j));
            }
        }
    }
    if genuine.is_empty() {
        return Err(Error::InvalidArgument(
            "no genuine pairs in validation set".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c0de);
    impostor_candidates.shuffle(&mut rng);
    let impostors = &impostor_candidates[..genuine.len().min(impostor_candidates.len())];

    let mut pairs = Vec::with_capacity(genuine.len() + impostors.len());
    for &(i, j) in &genuine {
        pairs.push((embeddings[i].distance(&embeddings[j], metric), true));
    }
    for &(i, j) in impostors {
        pairs.push((embeddings[i].distance(&embeddings[j], metric), false));
    }
    Ok(pairs)
}

/// Equal-error-rate threshold over labelled distances: candidates are the
/// midpoints between consecutive distinct pooled distances (plus the two
/// open ends); picks the candidate minimising |FMR - FNMR|, ties broken by
/// the lower combined error then the smaller tau.
pub fn eer_threshold(pairs: &[(f64, bool)], metric: Metric) -> Result<VerificationThreshold> {
    if !pairs.iter().any(|p| p.1) {
        return Err(Error::InvalidArgument("no genuine pairs".into()));
    }
    if !pairs.iter().any(|p| !p.1) {
        return Err(Error::InvalidArgument("no impostor pairs".into()));
    }
    let mut distances: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    distances.sort_by(|a, b| a.partial_cmp(b).unwrap());
    distances.dedup();
    let mut candidates = Vec::with_capacity(distances.len() + 1);
    candidates.push(distances[0] / 2.0);
    for w in distances.windows(2) {
        candidates.push((w[0] + w[1]) / 2.0);
    }
    candidates.push(distances.last().unwrap() + 1e-3);

    let n_gen = pairs.iter().filter(|p| p.1).count() as f64;
    let n_imp = pairs.len() as f64 - n_gen;
    let mut best: Option<(f64, f64, f64)> = None; // (gap, combined, tau), eer implied
    let mut best_eer = 0.0;
    for &tau in &candidates {
        let fmr = pairs.iter().filter(|p| !p.1 && p.0 < tau).count() as f64 / n_imp;
        let fnmr = pairs.iter().filter(|p| p.1 && p.0 >= tau).count() as f64 / n_gen;
        let gap = (fmr - fnmr).abs();
        let combined = fmr + fnmr;
        let better = match best {
            None => true,
            Some((bg, bc, bt)) => {
                gap < bg - 1e-12
                    || ((gap - bg).abs() <= 1e-12 && combined < bc - 1e-12)
                    || ((gap - bg).abs() <= 1e-12 && (combined - bc).abs() <= 1e-12 && tau < bt)
            }
        };
        if better {
            best = Some((gap, combined, tau));
            best_eer = (fmr + fnmr) / 2.0;
        }
    }
    let (_, _, tau) = best.unwrap();
    if tau <= 0.0 {
        return Err(Error::InvalidArgument(
            "degenerate distances produced non-positive tau".into(),
        ));
    }
    Ok(VerificationThreshold {
        tau,
        metric,
        eer: best_eer,
    })
}

/// EER calibration over the validation split.
pub fn calibrate_threshold(
    embedder: &mut Embedder,
    val_set: &[LabeledImage],
    metric: Metric,
    seed: u64,
) -> Result<VerificationThreshold> {
    let pairs = verification_pairs(embedder, val_set, metric, seed)?;
    eer_threshold(&pairs, metric)
}

/// L2-normalised mean embedding of one identity's images.
pub fn identity_reference(embedder: &mut Embedder, images: &[&Image]) -> Result<Embedding> {
    if images.is_empty() {
        return Err(Error::InvalidArgument(
            "identity reference needs >= 1 image".into(),
        ));
    }
    let embeddings = embedder.embed_many(images)?;
    let d = embeddings[0].dim();
    let mut mean = Array1::zeros(d);
    for e in &embeddings {
        mean = mean + e.values();
    }
    mean /= embeddings.len() as f64;
    Ok(Embedding::from_unnormalized(mean))
}

/// `identity_id,image_id,e0..e{d-1}` — one row per image.
pub fn write_embeddings_csv(
    path: &std::path::Path,
    embedder: &mut Embedder,
    images: &[LabeledImage],
) -> Result<()> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("no images to export".into()));
    }
    let refs: Vec<&Image> = images.iter().map(|s| &s.image).collect();
    let embeddings = embedder.embed_many(&refs)?;
    let d = embeddings[0].dim();
    let mut out = String::from("identity_id,image_id");
    for i in 0..d {
        out.push_str(&format!(",e{i}"));
    }
    out.push('\n');
    for (s, e) in images.iter().zip(&embeddings) {
        out.push_str(&format!("{},{}", s.identity_id, s.image_id));
        for v in e.values() {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// True iff `distance(embed(image), reference) < tau` (strict).
pub fn verify(
    embedder: &mut Embedder,
    image: &Image,
    reference: &Embedding,
    th: &VerificationThreshold,
) -> Result<bool> {
    let e = embedder.embed(image)?;
    Ok(e.distance(reference, th.metric) < th.tau)
}

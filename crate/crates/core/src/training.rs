//! The attack-training engine: alternating generator/discriminator
//! optimisation, the discriminator-free regime, fine-tuning of the attack's
//! own copy of the feature layers, and single-image cloaking with a hard
//! L-infinity projection.

use std::time::Instant;

use ndarray::{Array1, Array3};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversary::{
    build_discriminator, build_generator, Discriminator, DiscriminatorSpec, Generator,
    GeneratorSpec, Student,
};
use crate::dataset::LabeledImage;
use crate::embedder::Embedder;
use crate::error::{Error, Result};
use crate::imaging::{apply_perturbation, Image, Perturbation};
use crate::losses::{
    adv_distance_grad, combined_generator_loss, loss_pert_with_grad, AdvLossVariant, LossWeights,
    PertLossVariant,
};
use crate::nn::{clamp01_with_mask, stack_samples, Adam, Sequential, Tensor};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl OptimizerConfig {
    /// GAN-style regime with a discriminator: Adam lr 1e-4, beta1 0.5.
    pub fn with_discriminator() -> Self {
        OptimizerConfig { lr: 1e-4, beta1: 0.5, beta2: 0.999 }
    }

    /// Discriminator-free regime: Adam lr 1e-3, beta1 0.9.
    pub fn without_discriminator() -> Self {
        OptimizerConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FineTuneConfig {
    pub enabled: bool,
    /// How many of the trailing parameterised feature layers to unfreeze.
    pub unfrozen_top_layers: usize,
    pub lr: f64,
    pub epochs: usize,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        FineTuneConfig { enabled: false, unfrozen_top_layers: 1, lr: 1e-4, epochs: 5 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub adv: AdvLossVariant,
    pub pert: PertLossVariant,
    pub weights: LossWeights,
    pub use_discriminator: bool,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub fine_tune: FineTuneConfig,
    /// Built from the embedder's feature shape when absent.
    #[serde(default)]
    pub generator_spec: Option<GeneratorSpec>,
    #[serde(default)]
    pub discriminator_spec: Option<DiscriminatorSpec>,
}

impl AttackConfig {
    /// Untargeted threshold attack with the regime defaults above.
    pub fn untargeted_default(threshold: f64, use_discriminator: bool) -> Self {
        AttackConfig {
            adv: AdvLossVariant::untargeted(crate::losses::AdvLossKind::Cosine),
            pert: PertLossVariant::threshold(threshold),
            weights: if use_discriminator {
                LossWeights::with_discriminator()
            } else {
                LossWeights::without_discriminator()
            },
            use_discriminator,
            optimizer: if use_discriminator {
                OptimizerConfig::with_discriminator()
            } else {
                OptimizerConfig::without_discriminator()
            },
            epochs: 30,
            batch_size: 32,
            seed: 97,
            fine_tune: FineTuneConfig::default(),
            generator_spec: None,
            discriminator_spec: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.optimizer.lr <= 0.0 {
            return Err(Error::InvalidConfig("optimizer lr must be > 0".into()));
        }
        if self.epochs < 1 || self.batch_size < 1 {
            return Err(Error::InvalidConfig("epochs and batch_size must be >= 1".into()));
        }
        self.adv.validate()?;
        self.pert.validate()?;
        self.weights.validate()?;
        if self.fine_tune.enabled {
            if self.fine_tune.unfrozen_top_layers < 1 {
                return Err(Error::InvalidConfig(
                    "fine_tune.unfrozen_top_layers must be >= 1".into(),
                ));
            }
            if !(self.fine_tune.lr > 0.0 && self.fine_tune.lr < self.optimizer.lr) {
                return Err(Error::InvalidConfig(
                    "fine_tune.lr must be positive and lower than the main lr".into(),
                ));
            }
            if self.fine_tune.epochs < 1 {
                return Err(Error::InvalidConfig("fine_tune.epochs must be >= 1".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    /// Absent in discriminator-free runs (the term is omitted, not zero).
    pub l_gan: Option<f64>,
    pub l_adv: f64,
    pub l_pert: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_seconds: Vec<f64>,
    pub loss_log: Vec<LossRecord>,
    pub disc_updates: usize,
}

impl TrainReport {
    pub fn total_seconds(&self) -> f64 {
        self.epoch_seconds.iter().sum()
    }
}

/// `step,l_gan,l_adv,l_pert,total` per line; the gan column is empty in
/// discriminator-free runs.
pub fn write_loss_log_csv(path: &std::path::Path, log: &[LossRecord]) -> Result<()> {
    let mut out = String::from("step,l_gan,l_adv,l_pert,total\n");
    for r in log {
        let gan = r.l_gan.map(|v| format!("{v}")).unwrap_or_default();
        out.push_str(&format!("{},{},{},{},{}\n", r.step, gan, r.l_adv, r.l_pert, r.total));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// The trained attack artifact: the generator plus its own copy of the
/// embedder's feature-extraction layers (identical to the embedder's unless
/// fine-tuned).
#[derive(Clone, Serialize, Deserialize)]
pub struct AttackModel {
    pub features: Sequential,
    pub generator: Generator,
    /// Number of trailing parameterised feature layers trained during
    /// fine-tuning (0 = features identical to the evaluation embedder's).
    pub fine_tuned_layers: usize,
}

impl AttackModel {
    pub fn param_count(&self) -> usize {
        self.features.param_count() + self.generator.param_count()
    }

    pub fn flat_weights(&self) -> Vec<f64> {
        let mut w = self.features.flat_weights();
        w.extend(self.generator.flat_weights());
        w
    }

    pub fn clear_caches(&mut self) {
        self.features.clear_caches();
        self.generator.clear_caches();
    }
}

fn batch_tensor(set: &[LabeledImage], idx: &[usize]) -> Tensor {
    let samples: Vec<Array3<f64>> = idx.iter().map(|&i| set[i].image.data().clone()).collect();
    stack_samples(&samples)
}

fn sample_image(x: &Tensor, ni: usize) -> Image {
    let (_, c, h, w) = x.dim();
    Image::new(Array3::from_shape_fn((c, h, w), |(ci, y, xx)| x[[ni, ci, y, xx]]))
        .expect("batch row is a valid image")
}

fn sample_delta(d: &Tensor, ni: usize) -> Perturbation {
    let (_, c, h, w) = d.dim();
    Perturbation::new(Array3::from_shape_fn((c, h, w), |(ci, y, xx)| d[[ni, ci, y, xx]]))
        .expect("tanh output is a valid perturbation")
}

struct StepOutcome {
    l_gan: Option<f64>,
    l_adv: f64,
    l_pert: f64,
    g_delta: Tensor,
    /// Adversarial batch, for the subsequent discriminator update.
    x_adv: Tensor,
}

/// Forward pass and loss gradients wrt the generator output for one batch.
/// `features` provides the generator's input; the evaluation `embedder`
/// provides embeddings and the gradient path back to the adversarial image.
#[allow(clippy::too_many_arguments)]
fn generator_step(
    features: &mut Sequential,
    generator: &mut Generator,
    embedder: &mut Embedder,
    discriminator: Option<&mut Discriminator>,
    x: &Tensor,
    cfg: &AttackConfig,
) -> Result<StepOutcome> {
    let n = x.dim().0;
    let feats = features.forward(x, true);
    let delta = generator.forward_batch(&feats, true);
    let (x_adv, mask) = clamp01_with_mask(&(x + &delta));

    // embeddings: originals first so the adversarial caches survive for the
    // backward pass
    let d = embedder.spec.embedding_dim;
    let e_orig = embedder.embed_batch_tensor(x, false);
    let e_adv = embedder.embed_batch_tensor(&x_adv, false);

    let mut l_adv = 0.0;
    let mut g_e_adv = Tensor::zeros((n, d, 1, 1));
    let sign = if cfg.adv.targeted { 1.0 } else { -1.0 };
    for ni in 0..n {
        let a = Array1::from_shape_fn(d, |i| e_adv[[ni, i, 0, 0]]);
        let r = match &cfg.adv.target {
            Some(t) => t.values().clone(),
            None => Array1::from_shape_fn(d, |i| e_orig[[ni, i, 0, 0]]),
        };
        if r.len() != d {
            return Err(Error::shape(format!("embedding dim {d}"), format!("{}", r.len())));
        }
        let (dist, grad) = adv_distance_grad(&a, &r, cfg.adv.kind);
        l_adv += sign * dist / n as f64;
        for i in 0..d {
            g_e_adv[[ni, i, 0, 0]] = sign * grad[i] / n as f64;
        }
    }
    let g_xadv_adv = embedder.backward_input(&g_e_adv);

    let mut l_gan = None;
    let mut g_xadv_gan = Tensor::zeros(x.raw_dim());
    if let Some(disc) = discriminator {
        let probs = disc.prob_batch(&x_adv, true);
        let mean: f64 = probs.iter().map(|p| -p.ln()).sum::<f64>() / n as f64;
        l_gan = Some(mean);
        let g_prob: Vec<f64> = probs.iter().map(|p| -1.0 / (p * n as f64)).collect();
        g_xadv_gan = disc.backward(&g_prob);
    }

    let mut l_pert = 0.0;
    let mut g_delta_pert = Tensor::zeros(delta.raw_dim());
    for ni in 0..n {
        let xi = sample_image(x, ni);
        let di = sample_delta(&delta, ni);
        let (l, g) = loss_pert_with_grad(&xi, &di, &cfg.pert)?;
        l_pert += l / n as f64;
        for ((ci, y, xx), &gv) in g.indexed_iter() {
            g_delta_pert[[ni, ci, y, xx]] = gv / n as f64;
        }
    }

    // d(total)/d(delta): the image-space terms pass through the clamp mask
    let w = &cfg.weights;
    let alpha = if cfg.use_discriminator { w.alpha } else { 0.0 };
    let g_delta = &mask * &(&g_xadv_adv * w.beta + &g_xadv_gan * alpha) + &g_delta_pert * w.gamma;

    Ok(StepOutcome { l_gan, l_adv, l_pert, g_delta, x_adv })
}

/// One discriminator BCE step on the concatenation of real and adversarial
/// batches (single forward, so the weight gradients sum correctly).
fn discriminator_step(disc: &mut Discriminator, adam: &mut Adam, x: &Tensor, x_adv: &Tensor) {
    let n = x.dim().0;
    let (_, c, h, w) = x.dim();
    let mut both = Tensor::zeros((2 * n, c, h, w));
    both.slice_mut(ndarray::s![..n, .., .., ..]).assign(x);
    both.slice_mut(ndarray::s![n.., .., .., ..]).assign(x_adv);
    let probs = disc.prob_batch(&both, true);
    let mut g = Vec::with_capacity(2 * n);
    for (i, &p) in probs.iter().enumerate() {
        if i < n {
            g.push(-1.0 / (p * n as f64));
        } else {
            g.push(1.0 / ((1.0 - p) * n as f64));
        }
    }
    disc.backward(&g);
    adam.step(disc.params_mut());
}

/// Trains the perturbation generator against a frozen embedder. Returns the
/// attack model (generator plus a copy of the feature layers), the
/// discriminator if one was used, and the training report.
pub fn train_attack(
    embedder: &mut Embedder,
    train_set: &[LabeledImage],
    cfg: &AttackConfig,
) -> Result<(AttackModel, Option<Discriminator>, TrainReport)> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::InvalidArgument("attack training set is empty".into()));
    }
    let first = &train_set[0].image;
    if first.height() != embedder.spec.input_size
        || first.channels() != embedder.spec.input_channels
    {
        return Err(Error::shape(
            format!(
                "({}, {}, {})",
                embedder.spec.input_channels, embedder.spec.input_size, embedder.spec.input_size
            ),
            format!("({}, {}, {})", first.channels(), first.height(), first.width()),
        ));
    }
    let out_shape = (first.channels(), first.height(), first.width());
    let gen_spec = cfg
        .generator_spec
        .clone()
        .unwrap_or_else(|| GeneratorSpec::default_for(embedder.spec.feature_shape(), out_shape));
    let mut generator = build_generator(&gen_spec)?;
    let mut features = embedder.clone_feature_stack();
    let mut discriminator = if cfg.use_discriminator {
        let spec = cfg
            .discriminator_spec
            .clone()
            .unwrap_or_else(|| DiscriminatorSpec::default_for(out_shape));
        Some(build_discriminator(&spec)?)
    } else {
        None
    };

    let mut gen_adam = Adam::new(cfg.optimizer.lr, cfg.optimizer.beta1, cfg.optimizer.beta2);
    let mut disc_adam = Adam::new(cfg.optimizer.lr, cfg.optimizer.beta1, cfg.optimizer.beta2);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut report = TrainReport::default();
    let mut step = 0usize;

    for _epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let x = batch_tensor(train_set, chunk);
            let out = generator_step(
                &mut features,
                &mut generator,
                embedder,
                discriminator.as_mut(),
                &x,
                cfg,
            )?;
            generator.backward(&out.g_delta);
            gen_adam.step(generator.params_mut());

            if let Some(disc) = discriminator.as_mut() {
                discriminator_step(disc, &mut disc_adam, &x, &out.x_adv);
                report.disc_updates += 1;
            }

            let total =
                combined_generator_loss(&cfg.weights, out.l_gan, out.l_adv, out.l_pert);
            report.loss_log.push(LossRecord {
                step,
                l_gan: out.l_gan,
                l_adv: out.l_adv,
                l_pert: out.l_pert,
                total,
            });
            step += 1;
        }
        report.epoch_seconds.push(t0.elapsed().as_secs_f64());
    }

    generator.clear_caches();
    features.clear_caches();
    embedder.clear_caches();
    if let Some(d) = discriminator.as_mut() {
        d.clear_caches();
    }
    let model = AttackModel { features, generator, fine_tuned_layers: 0 };
    Ok((model, discriminator, report))
}

/// Continues training with the top `unfrozen_top_layers` parameterised
/// feature layers of the attack's own feature copy made trainable at the
/// lower fine-tune learning rate. The evaluation embedder is only read, never
/// mutated. Runs discriminator-free.
pub fn fine_tune(
    embedder: &mut Embedder,
    mut model: AttackModel,
    train_set: &[LabeledImage],
    cfg: &AttackConfig,
) -> Result<(AttackModel, TrainReport)> {
    cfg.validate()?;
    if !cfg.fine_tune.enabled {
        return Err(Error::InvalidConfig("fine_tune.enabled is false".into()));
    }
    let param_layer_indices: Vec<usize> = model
        .features
        .layers
        .iter()
        .enumerate()
        .filter(|(_, l)| l.param_count() > 0)
        .map(|(i, _)| i)
        .collect();
    let n_unfrozen = cfg.fine_tune.unfrozen_top_layers;
    if n_unfrozen > param_layer_indices.len() {
        return Err(Error::InvalidConfig(format!(
            "cannot unfreeze {n_unfrozen} layers; the feature stack has {}",
            param_layer_indices.len()
        )));
    }
    let from = param_layer_indices[param_layer_indices.len() - n_unfrozen];

    let mut gen_adam = Adam::new(cfg.fine_tune.lr, cfg.optimizer.beta1, cfg.optimizer.beta2);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xf17e);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut report = TrainReport::default();
    let mut step = 0usize;
    let mut no_disc_cfg = cfg.clone();
    no_disc_cfg.use_discriminator = false;

    for _epoch in 0..cfg.fine_tune.epochs {
        let t0 = Instant::now();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let x = batch_tensor(train_set, chunk);
            let out = generator_step(
                &mut model.features,
                &mut model.generator,
                embedder,
                None,
                &x,
                &no_disc_cfg,
            )?;
            let g_feats = model.generator.backward(&out.g_delta);
            model.features.backward(&g_feats);
            let mut params = model.generator.params_mut();
            params.extend(model.features.params_mut_from(from));
            gen_adam.step(params);

            let total = combined_generator_loss(&cfg.weights, None, out.l_adv, out.l_pert);
            report.loss_log.push(LossRecord {
                step,
                l_gan: None,
                l_adv: out.l_adv,
                l_pert: out.l_pert,
                total,
            });
            step += 1;
        }
        report.epoch_seconds.push(t0.elapsed().as_secs_f64());
    }

    model.clear_caches();
    embedder.clear_caches();
    model.fine_tuned_layers = n_unfrozen;
    Ok((model, report))
}

/// Either cloaking path: the teacher needs its feature stack, the student
/// consumes the raw image.
pub enum CloakModel<'a> {
    Teacher(&'a mut AttackModel),
    Student(&'a mut Student),
}

#[derive(Debug, Clone)]
pub struct CloakOutput {
    pub image: Image,
    pub delta: Perturbation,
    pub seconds: f64,
}

/// Single forward pass with a hard L-infinity projection of the perturbation
/// to `[-threshold, threshold]` before application.
pub fn cloak(model: CloakModel, image: &Image, pert_threshold: f64) -> Result<CloakOutput> {
    if !(0.0..=1.0).contains(&pert_threshold) {
        return Err(Error::InvalidArgument(format!(
            "pert_threshold must be in [0, 1], got {pert_threshold}"
        )));
    }
    let t0 = Instant::now();
    let delta = match model {
        CloakModel::Teacher(m) => {
            let expected = m.generator.spec.output_shape;
            if (image.channels(), image.height(), image.width()) != expected {
                return Err(Error::shape(
                    format!("{expected:?}"),
                    format!("({}, {}, {})", image.channels(), image.height(), image.width()),
                ));
            }
            let x = stack_samples(std::slice::from_ref(image.data()));
            let feats = m.features.forward(&x, false);
            let raw = m.generator.forward_batch(&feats, false);
            let (c, h, w) = expected;
            Perturbation::new(Array3::from_shape_fn((c, h, w), |(ci, y, xx)| {
                raw[[0, ci, y, xx]]
            }))?
        }
        CloakModel::Student(s) => s.generate(image)?,
    };
    let projected = delta.project_linf(pert_threshold);
    let out = apply_perturbation(image, &projected)?;
    Ok(CloakOutput { image: out, delta: projected, seconds: t0.elapsed().as_secs_f64() })
}

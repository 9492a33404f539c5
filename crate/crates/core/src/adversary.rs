//! Attack-side network definitions: the feature-conditioned perturbation
//! generator (upsampling decoder — no transposed convolutions, which tile),
//! the optional discriminator, and the compact student U-Net that maps raw
//! images straight to perturbations for distillation.

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedder::FeatureMap;
use crate::error::{Error, Result};
use crate::imaging::Perturbation;
use crate::nn::{
    stack_samples, BatchNorm2d, Conv2d, Dense, Flatten, Init, Layer, ParamsMut, ReLU, Sequential,
    SigmoidLayer, TanhLayer, Tensor, Upsample2x,
};

/// Decoder from an `(F, S, S)` feature map to a `(C, H, W)` perturbation.
/// Each block is nearest-neighbour x2 upsampling, a 3x3 convolution, optional
/// batch normalisation and ReLU; the head is a zero-initialised 3x3
/// convolution with tanh.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    /// `(channels, side, side)` of the input feature map.
    pub feature_shape: (usize, usize, usize),
    /// `(channels, height, width)` of the output perturbation.
    pub output_shape: (usize, usize, usize),
    /// Conv widths, one per upsampling block.
    pub block_widths: Vec<usize>,
    pub batch_norm: bool,
    pub seed: u64,
}

impl GeneratorSpec {
    /// Desk default: as many x2 blocks as the feature-to-output side ratio
    /// requires (e.g. 4x4 features to 32x32 images -> three blocks), widths
    /// halving from 48.
    pub fn default_for(feature_shape: (usize, usize, usize), output_shape: (usize, usize, usize)) -> Self {
        let (_, s, _) = feature_shape;
        let (_, h, _) = output_shape;
        let mut blocks = 0usize;
        let mut side = s.max(1);
        while side < h {
            side *= 2;
            blocks += 1;
        }
        let block_widths: Vec<usize> =
            (0..blocks.max(1)).map(|i| (48usize >> i).max(4)).collect();
        GeneratorSpec {
            feature_shape,
            output_shape,
            block_widths,
            batch_norm: true,
            seed: 41,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (f, s, s2) = self.feature_shape;
        let (c, h, w) = self.output_shape;
        if s != s2 || h != w {
            return Err(Error::InvalidConfig(
                "generator feature map and output must be square".into(),
            ));
        }
        if f == 0 || s == 0 {
            return Err(Error::InvalidConfig("empty feature shape".into()));
        }
        if c != 1 && c != 3 {
            return Err(Error::InvalidConfig(format!(
                "output channels must be 1 or 3, got {c}"
            )));
        }
        if self.block_widths.is_empty() {
            return Err(Error::InvalidConfig("generator needs >= 1 block".into()));
        }
        let factor = 1usize << self.block_widths.len();
        if s.checked_mul(factor) != Some(h) {
            return Err(Error::InvalidConfig(format!(
                "{} upsample blocks map side {s} to {}, expected {h}",
                self.block_widths.len(),
                s * factor
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Serialize, Deserialize)]
pub struct Generator {
    pub net: Sequential,
    pub spec: GeneratorSpec,
}

pub fn build_generator(spec: &GeneratorSpec) -> Result<Generator> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut layers = Vec::new();
    let mut in_c = spec.feature_shape.0;
    for &w in &spec.block_widths {
        layers.push(Layer::Upsample(Upsample2x));
        layers.push(Layer::Conv(Conv2d::new(in_c, w, 3, 1, 1, Init::HeNormal, &mut rng)));
        if spec.batch_norm {
            layers.push(Layer::BatchNorm(BatchNorm2d::new(w)));
        }
        layers.push(Layer::ReLU(ReLU::default()));
        in_c = w;
    }
    // zero-initialised head: training starts from the identity (delta = 0)
    layers.push(Layer::Conv(Conv2d::new(
        in_c,
        spec.output_shape.0,
        3,
        1,
        1,
        Init::Zero,
        &mut rng,
    )));
    layers.push(Layer::Tanh(TanhLayer::default()));
    Ok(Generator { net: Sequential::new(layers), spec: spec.clone() })
}

impl Generator {
    pub fn param_count(&self) -> usize {
        self.net.param_count()
    }

    pub fn forward_batch(&mut self, features: &Tensor, train: bool) -> Tensor {
        self.net.forward(features, train)
    }

    pub fn backward(&mut self, g: &Tensor) -> Tensor {
        self.net.backward(g)
    }

    pub fn params_mut(&mut self) -> Vec<ParamsMut<'_>> {
        self.net.params_mut()
    }

    pub fn flat_weights(&self) -> Vec<f64> {
        self.net.flat_weights()
    }

    pub fn clear_caches(&mut self) {
        self.net.clear_caches();
    }
}

/// Evaluation-mode single-image generation.
pub fn generate_perturbation(generator: &mut Generator, features: &FeatureMap) -> Result<Perturbation> {
    let (f, s, s2) = features.0.dim();
    if (f, s, s2) != generator.spec.feature_shape {
        return Err(Error::shape(
            format!("{:?}", generator.spec.feature_shape),
            format!("{:?}", (f, s, s2)),
        ));
    }
    let x = stack_samples(std::slice::from_ref(&features.0));
    let out = generator.forward_batch(&x, false);
    let (c, h, w) = generator.spec.output_shape;
    let data = Array3::from_shape_fn((c, h, w), |(ci, y, xx)| out[[0, ci, y, xx]]);
    Perturbation::new(data)
}

/// Stride-2 conv stack ending in a scalar sigmoid "is this image real?".
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorSpec {
    pub input_shape: (usize, usize, usize),
    pub block_widths: Vec<usize>,
    pub seed: u64,
}

impl DiscriminatorSpec {
    pub fn default_for(input_shape: (usize, usize, usize)) -> Self {
        DiscriminatorSpec { input_shape, block_widths: vec![16, 32, 64], seed: 43 }
    }

    pub fn validate(&self) -> Result<()> {
        let (c, h, w) = self.input_shape;
        if c != 1 && c != 3 {
            return Err(Error::InvalidConfig("discriminator input channels must be 1 or 3".into()));
        }
        if self.block_widths.is_empty() {
            return Err(Error::InvalidConfig("discriminator needs >= 1 block".into()));
        }
        let mut side = h.min(w);
        for _ in &self.block_widths {
            side = (side + 2 - 3) / 2 + 1;
            if side == 0 {
                return Err(Error::InvalidConfig("discriminator downsamples below 1 pixel".into()));
            }
        }
        Ok(())
    }

    fn flat_dim(&self) -> usize {
        let mut side = self.input_shape.1;
        for _ in &self.block_widths {
            side = (side + 2 - 3) / 2 + 1;
        }
        self.block_widths.last().unwrap() * side * side
    }
}

#[derive(Clone, Serialize, Deserialize)]
pub struct Discriminator {
    pub net: Sequential,
    pub spec: DiscriminatorSpec,
}

pub fn build_discriminator(spec: &DiscriminatorSpec) -> Result<Discriminator> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut layers = Vec::new();
    let mut in_c = spec.input_shape.0;
    for &w in &spec.block_widths {
        layers.push(Layer::Conv(Conv2d::new(in_c, w, 3, 2, 1, Init::HeNormal, &mut rng)));
        layers.push(Layer::ReLU(ReLU::default()));
        in_c = w;
    }
    layers.push(Layer::Flatten(Flatten::default()));
    layers.push(Layer::Dense(Dense::new(spec.flat_dim(), 1, Init::HeNormal, &mut rng)));
    layers.push(Layer::Sigmoid(SigmoidLayer::default()));
    Ok(Discriminator { net: Sequential::new(layers), spec: spec.clone() })
}

impl Discriminator {
    pub fn param_count(&self) -> usize {
        self.net.param_count()
    }

    /// Batched probabilities, clamped strictly inside (0, 1) so the BCE
    /// terms stay finite.
    pub fn prob_batch(&mut self, images: &Tensor, train: bool) -> Vec<f64> {
        let out = self.net.forward(images, train);
        (0..out.dim().0)
            .map(|ni| out[[ni, 0, 0, 0]].clamp(1e-12, 1.0 - 1e-12))
            .collect()
    }

    /// Backward from per-sample gradients wrt the sigmoid output.
    pub fn backward(&mut self, g_prob: &[f64]) -> Tensor {
        let mut g = Tensor::zeros((g_prob.len(), 1, 1, 1));
        for (ni, &gp) in g_prob.iter().enumerate() {
            g[[ni, 0, 0, 0]] = gp;
        }
        self.net.backward(&g)
    }

    pub fn params_mut(&mut self) -> Vec<ParamsMut<'_>> {
        self.net.params_mut()
    }

    pub fn clear_caches(&mut self) {
        self.net.clear_caches();
    }
}

/// Depth-3 U-Net with channel-concatenation skips; maps a raw image to a
/// perturbation with no embedder involvement at inference time.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudentSpec {
    pub input_shape: (usize, usize, usize),
    /// Encoder widths are (w, 2w, 4w) for base width w.
    pub base_width: usize,
    pub seed: u64,
}

impl StudentSpec {
    pub fn default_for(input_shape: (usize, usize, usize)) -> Self {
        StudentSpec { input_shape, base_width: 8, seed: 47 }
    }

    pub fn validate(&self) -> Result<()> {
        let (c, h, w) = self.input_shape;
        if c != 1 && c != 3 {
            return Err(Error::InvalidConfig("student input channels must be 1 or 3".into()));
        }
        if h != w || h % 4 != 0 || h == 0 {
            return Err(Error::InvalidConfig(
                "student input must be square with side divisible by 4".into(),
            ));
        }
        if self.base_width == 0 {
            return Err(Error::InvalidConfig("student base_width must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Serialize, Deserialize)]
pub struct Student {
    enc1: Sequential, // c -> w, stride 1
    enc2: Sequential, // w -> 2w, stride 2
    bott: Sequential, // 2w -> 4w, stride 2
    up2: Layer,
    dec2: Sequential, // concat(4w, 2w) -> 2w
    up1: Layer,
    dec1: Sequential, // concat(2w, w) -> w
    head: Sequential, // w -> c, tanh
    pub spec: StudentSpec,
    #[serde(skip)]
    skip_dims: Option<(usize, usize)>, // concat channel counts (dec2, dec1)
}

fn conv_relu(in_c: usize, out_c: usize, stride: usize, rng: &mut ChaCha8Rng) -> Sequential {
    Sequential::new(vec![
        Layer::Conv(Conv2d::new(in_c, out_c, 3, stride, 1, Init::HeNormal, rng)),
        Layer::ReLU(ReLU::default()),
    ])
}

fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, ca, h, w) = a.dim();
    let (_, cb, _, _) = b.dim();
    let mut out = Tensor::zeros((n, ca + cb, h, w));
    out.slice_mut(ndarray::s![.., ..ca, .., ..]).assign(a);
    out.slice_mut(ndarray::s![.., ca.., .., ..]).assign(b);
    out
}

fn split_channels(g: &Tensor, ca: usize) -> (Tensor, Tensor) {
    (
        g.slice(ndarray::s![.., ..ca, .., ..]).to_owned(),
        g.slice(ndarray::s![.., ca.., .., ..]).to_owned(),
    )
}

/// Builds the student and asserts it is strictly smaller than the teacher.
pub fn build_student(spec: &StudentSpec, teacher_param_count: usize) -> Result<Student> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let w = spec.base_width;
    let c = spec.input_shape.0;
    let student = Student {
        enc1: conv_relu(c, w, 1, &mut rng),
        enc2: conv_relu(w, 2 * w, 2, &mut rng),
        bott: conv_relu(2 * w, 4 * w, 2, &mut rng),
        up2: Layer::Upsample(Upsample2x),
        dec2: conv_relu(6 * w, 2 * w, 1, &mut rng),
        up1: Layer::Upsample(Upsample2x),
        dec1: conv_relu(3 * w, w, 1, &mut rng),
        head: Sequential::new(vec![
            Layer::Conv(Conv2d::new(w, c, 3, 1, 1, Init::Zero, &mut rng)),
            Layer::Tanh(TanhLayer::default()),
        ]),
        spec: spec.clone(),
        skip_dims: None,
    };
    if student.param_count() >= teacher_param_count {
        return Err(Error::InvalidConfig(format!(
            "student ({} params) is not smaller than the teacher ({})",
            student.param_count(),
            teacher_param_count
        )));
    }
    Ok(student)
}

impl Student {
    pub fn param_count(&self) -> usize {
        self.enc1.param_count()
            + self.enc2.param_count()
            + self.bott.param_count()
            + self.dec2.param_count()
            + self.dec1.param_count()
            + self.head.param_count()
    }

    pub fn forward_batch(&mut self, x: &Tensor, train: bool) -> Tensor {
        let e1 = self.enc1.forward(x, train);
        let e2 = self.enc2.forward(&e1, train);
        let b = self.bott.forward(&e2, train);
        let u2 = self.up2.forward(&b, train);
        let cat2 = concat_channels(&u2, &e2);
        let d2 = self.dec2.forward(&cat2, train);
        let u1 = self.up1.forward(&d2, train);
        let cat1 = concat_channels(&u1, &e1);
        let d1 = self.dec1.forward(&cat1, train);
        self.skip_dims = Some((u2.dim().1, u1.dim().1));
        self.head.forward(&d1, train)
    }

    pub fn backward(&mut self, g: &Tensor) -> Tensor {
        let (cu2, cu1) = self.skip_dims.expect("forward before backward");
        let g_d1 = self.head.backward(g);
        let g_cat1 = self.dec1.backward(&g_d1);
        let (g_u1, g_e1_skip) = split_channels(&g_cat1, cu1);
        let g_d2 = self.up1.backward(&g_u1);
        let g_cat2 = self.dec2.backward(&g_d2);
        let (g_u2, g_e2_skip) = split_channels(&g_cat2, cu2);
        let g_b = self.up2.backward(&g_u2);
        let g_e2 = self.bott.backward(&g_b) + g_e2_skip;
        let g_e1 = self.enc2.backward(&g_e2) + g_e1_skip;
        self.enc1.backward(&g_e1)
    }

    pub fn params_mut(&mut self) -> Vec<ParamsMut<'_>> {
        let mut p = self.enc1.params_mut();
        p.extend(self.enc2.params_mut());
        p.extend(self.bott.params_mut());
        p.extend(self.dec2.params_mut());
        p.extend(self.dec1.params_mut());
        p.extend(self.head.params_mut());
        p
    }

    pub fn flat_weights(&self) -> Vec<f64> {
        let mut w = self.enc1.flat_weights();
        w.extend(self.enc2.flat_weights());
        w.extend(self.bott.flat_weights());
        w.extend(self.dec2.flat_weights());
        w.extend(self.dec1.flat_weights());
        w.extend(self.head.flat_weights());
        w
    }

    pub fn clear_caches(&mut self) {
        self.enc1.clear_caches();
        self.enc2.clear_caches();
        self.bott.clear_caches();
        self.dec2.clear_caches();
        self.dec1.clear_caches();
        self.head.clear_caches();
        self.skip_dims = None;
    }

    /// Evaluation-mode single-image perturbation; touches no embedder.
    pub fn generate(&mut self, image: &crate::imaging::Image) -> Result<Perturbation> {
        let (c, h, w) = self.spec.input_shape;
        if image.channels() != c || image.height() != h || image.width() != w {
            return Err(Error::shape(
                format!("{:?}", self.spec.input_shape),
                format!("({}, {}, {})", image.channels(), image.height(), image.width()),
            ));
        }
        let x = stack_samples(std::slice::from_ref(image.data()));
        let out = self.forward_batch(&x, false);
        let data = Array3::from_shape_fn((c, h, w), |(ci, y, xx)| out[[0, ci, y, xx]]);
        Perturbation::new(data)
    }
}

/// Exact count of trainable scalars in a layer stack.
pub fn count_parameters(net: &Sequential) -> usize {
    net.param_count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn randn(rng: &mut ChaCha8Rng) -> f64 {
        rng.random::<f64>() * 2.0 - 1.0
    }

    fn gen_spec() -> GeneratorSpec {
        GeneratorSpec::default_for((64, 4, 4), (1, 32, 32))
    }

    // independent per-layer arithmetic oracle:
    // conv k*k*cin*cout + cout, batch-norm 2c, dense in*out + out
    fn oracle_count(layers: &[(&str, usize, usize, usize)]) -> usize {
        layers
            .iter()
            .map(|&(kind, a, b, k)| match kind {
                "conv" => k * k * a * b + b,
                "bn" => 2 * a,
                "dense" => a * b + b,
                _ => unreachable!(),
            })
            .sum()
    }

    #[test]
    fn generator_param_count_matches_oracle() {
        let g = build_generator(&gen_spec()).unwrap();
        let expected = oracle_count(&[
            ("conv", 64, 48, 3),
            ("bn", 48, 0, 0),
            ("conv", 48, 24, 3),
            ("bn", 24, 0, 0),
            ("conv", 24, 12, 3),
            ("bn", 12, 0, 0),
            ("conv", 12, 1, 3),
        ]);
        assert_eq!(g.param_count(), expected);
    }

    #[test]
    fn generator_output_shape_and_range() {
        let mut g = build_generator(&gen_spec()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::from_shape_fn((2, 64, 4, 4), |_| randn(&mut rng));
        let out = g.forward_batch(&x, false);
        assert_eq!(out.dim(), (2, 1, 32, 32));
        assert!(out.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn zero_features_give_zero_perturbation() {
        let mut g = build_generator(&gen_spec()).unwrap();
        let f = FeatureMap(Array3::zeros((64, 4, 4)));
        let p = generate_perturbation(&mut g, &f).unwrap();
        assert!(p.data().iter().all(|&v| v == 0.0));
        // nonzero features too: the zero-initialised head maps anything to 0
        let f2 = FeatureMap(Array3::from_elem((64, 4, 4), 0.7));
        let p2 = generate_perturbation(&mut g, &f2).unwrap();
        assert!(p2.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn generation_repeatable_and_bounded() {
        let mut g = build_generator(&gen_spec()).unwrap();
        // give the head nonzero weights so the output is nontrivial
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for p in g.params_mut() {
            for v in p.value.iter_mut() {
                *v += 0.05 * randn(&mut rng);
            }
        }
        let f = FeatureMap(Array3::from_shape_fn((64, 4, 4), |_| rng.random::<f64>()));
        let a = generate_perturbation(&mut g, &f).unwrap();
        let b = generate_perturbation(&mut g, &f).unwrap();
        assert_eq!(a, b);
        assert!(crate::imaging::linf_of(a.data()) <= 1.0);
        assert!(a.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn generator_shape_errors() {
        let mut bad = gen_spec();
        bad.output_shape = (1, 48, 48);
        assert!(build_generator(&bad).is_err());
        let mut g = build_generator(&gen_spec()).unwrap();
        let f = FeatureMap(Array3::zeros((32, 4, 4)));
        assert!(generate_perturbation(&mut g, &f).is_err());
    }

    #[test]
    fn generator_deterministic_init() {
        let a = build_generator(&gen_spec()).unwrap();
        let b = build_generator(&gen_spec()).unwrap();
        assert_eq!(a.flat_weights(), b.flat_weights());
        let mut other = gen_spec();
        other.seed += 1;
        let c = build_generator(&other).unwrap();
        assert_ne!(a.flat_weights(), c.flat_weights());
    }

    #[test]
    fn generator_has_no_learned_upsampling() {
        // architecture lint: spatial expansion only via fixed nearest-
        // neighbour upsampling; convolutions never enlarge their input
        let g = build_generator(&gen_spec()).unwrap();
        let mut upsamples = 0;
        for layer in &g.net.layers {
            match layer {
                Layer::Upsample(_) => upsamples += 1,
                Layer::Conv(_) | Layer::BatchNorm(_) | Layer::ReLU(_) | Layer::Tanh(_) => {}
                _ => panic!("unexpected layer kind in generator"),
            }
        }
        assert_eq!(upsamples, g.spec.block_widths.len());
    }

    #[test]
    fn discriminator_output_and_count() {
        let spec = DiscriminatorSpec::default_for((1, 32, 32));
        let mut d = build_discriminator(&spec).unwrap();
        let expected = oracle_count(&[
            ("conv", 1, 16, 3),
            ("conv", 16, 32, 3),
            ("conv", 32, 64, 3),
            ("dense", 64 * 4 * 4, 1, 0),
        ]);
        assert_eq!(d.param_count(), expected);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::from_shape_fn((3, 1, 32, 32), |_| rng.random::<f64>());
        let p = d.prob_batch(&x, false);
        assert_eq!(p.len(), 3);
        assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
        let d2 = build_discriminator(&spec).unwrap();
        assert_eq!(d.net.flat_weights(), d2.net.flat_weights());
    }

    #[test]
    fn student_count_shape_range() {
        let spec = StudentSpec::default_for((1, 32, 32));
        let mut s = build_student(&spec, 1_000_000).unwrap();
        let w = spec.base_width;
        let expected = oracle_count(&[
            ("conv", 1, w, 3),
            ("conv", w, 2 * w, 3),
            ("conv", 2 * w, 4 * w, 3),
            ("conv", 6 * w, 2 * w, 3),
            ("conv", 3 * w, w, 3),
            ("conv", w, 1, 3),
        ]);
        assert_eq!(s.param_count(), expected);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::from_shape_fn((2, 1, 32, 32), |_| rng.random::<f64>());
        let out = s.forward_batch(&x, false);
        assert_eq!(out.dim(), (2, 1, 32, 32));
        assert!(out.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn student_not_smaller_than_teacher_rejected() {
        let spec = StudentSpec::default_for((1, 32, 32));
        assert!(build_student(&spec, 10).is_err());
    }

    #[test]
    fn student_gradients_match_finite_differences() {
        // scalar probe loss sum(out * r); checks the skip-connection
        // plumbing end to end
        let spec = StudentSpec { input_shape: (1, 8, 8), base_width: 2, seed: 5 };
        let mut s = build_student(&spec, usize::MAX).unwrap();
        // nonzero head so gradients flow
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for p in s.params_mut() {
            for v in p.value.iter_mut() {
                if *v == 0.0 {
                    *v = 0.1 * randn(&mut rng);
                }
            }
        }
        let x = Tensor::from_shape_fn((2, 1, 8, 8), |_| rng.random::<f64>());
        let r = Tensor::from_shape_fn((2, 1, 8, 8), |_| randn(&mut rng));
        let out = s.forward_batch(&x, true);
        let g_out = r.clone();
        let dx = s.backward(&g_out);
        let _ = out;
        let h = 1e-5;
        for idx in [(0, 0, 0, 0), (0, 0, 3, 5), (1, 0, 7, 7), (1, 0, 4, 2)] {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[idx] += h;
            xm[idx] -= h;
            let lp = (&s.forward_batch(&xp, true) * &r).sum();
            let lm = (&s.forward_batch(&xm, true) * &r).sum();
            let fd = (lp - lm) / (2.0 * h);
            let rel = (dx[idx] - fd).abs() / dx[idx].abs().max(fd.abs()).max(1e-8);
            assert!(rel < 1e-4, "{idx:?}: {} vs {}", dx[idx], fd);
        }
    }

    #[test]
    fn student_generate_matches_batch_forward_and_is_deterministic() {
        let spec = StudentSpec::default_for((1, 32, 32));
        let mut s = build_student(&spec, usize::MAX).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for p in s.params_mut() {
            for v in p.value.iter_mut() {
                if *v == 0.0 {
                    *v = 0.05 * randn(&mut rng);
                }
            }
        }
        let img = crate::imaging::Image::new(Array3::from_shape_fn((1, 32, 32), |_| {
            rng.random::<f64>()
        }))
        .unwrap();
        let a = s.generate(&img).unwrap();
        let b = s.generate(&img).unwrap();
        assert_eq!(a, b);
        let wrong = crate::imaging::Image::constant(1, 16, 16, 0.5).unwrap();
        assert!(s.generate(&wrong).is_err());
    }

    #[test]
    fn count_is_additive_over_layers() {
        let g = build_generator(&gen_spec()).unwrap();
        let per_layer: usize = g.net.layers.iter().map(|l| l.param_count()).sum();
        assert_eq!(count_parameters(&g.net), per_layer);
    }

    proptest! {
        #[test]
        fn generator_output_always_bounded(seed in 0u64..30, scale in 0.0f64..10.0) {
            let mut spec = gen_spec();
            spec.seed = seed;
            let mut g = build_generator(&spec).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            for p in g.params_mut() {
                for v in p.value.iter_mut() {
                    *v += scale * randn(&mut rng);
                }
            }
            let x = Tensor::from_shape_fn((1, 64, 4, 4), |_| scale * randn(&mut rng));
            let out = g.forward_batch(&x, false);
            prop_assert!(out.iter().all(|v| v.is_finite() && (-1.0..=1.0).contains(v)));
        }
    }
}

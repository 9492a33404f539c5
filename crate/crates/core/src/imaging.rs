//! Deterministic image primitives: perturbation application with clipping,
//! SSIM/DSSIM over Gaussian-weighted sliding windows, separable Gaussian blur
//! with symmetric boundary reflection, bilinear resize and norms.
//!
//! Pixel storage is real-valued in [0,1], channel-first `(c, h, w)`. 8-bit
//! files are decoded by dividing by 255 and encoded by `round(v * 255)`.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An image with pixel intensities in [0,1], stored as `(channels, height, width)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    data: Array3<f64>,
}

impl Image {
    /// Wraps raw data, validating the [0,1] range and channel count (1 or 3).
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (c, _, _) = data.dim();
        if c != 1 && c != 3 {
            return Err(Error::InvalidArgument(format!(
                "image must have 1 or 3 channels, got {c}"
            )));
        }
        if data.iter().any(|&v| !(0.0..=1.0).contains(&v) || v.is_nan()) {
            return Err(Error::InvalidArgument(
                "image pixel outside [0,1]".to_string(),
            ));
        }
        Ok(Image { data })
    }

    pub fn constant(channels: usize, height: usize, width: usize, value: f64) -> Result<Self> {
        Image::new(Array3::from_elem((channels, height, width), value))
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f64> {
        self.data
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.data.dim() == other.data.dim()
    }
}

/// An additive perturbation with values in [-1,1], shaped like its paired image.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    data: Array3<f64>,
}

impl Perturbation {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        if data.iter().any(|&v| !(-1.0..=1.0).contains(&v) || v.is_nan()) {
            return Err(Error::InvalidArgument(
                "perturbation element outside [-1,1]".to_string(),
            ));
        }
        Ok(Perturbation { data })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Perturbation {
            data: Array3::zeros((channels, height, width)),
        }
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f64> {
        self.data
    }

    /// Hard L-infinity projection of every element to `[-t, t]`.
    pub fn project_linf(&self, t: f64) -> Perturbation {
        Perturbation {
            data: self.data.mapv(|v| v.clamp(-t, t)),
        }
    }
}

/// SSIM window and stabilisation constants. Defaults are the reference
/// settings for [0,1] images: 11x11 Gaussian window, sigma 1.5, k1 0.01,
/// k2 0.03, dynamic range 1.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SsimParams {
    pub window_size: usize,
    pub window_sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams {
            window_size: 11,
            window_sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
        }
    }
}

impl SsimParams {
    pub fn validate(&self) -> Result<()> {
        if self.window_size < 3 || self.window_size % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "SSIM window_size must be odd and >= 3, got {}",
                self.window_size
            )));
        }
        if self.k1 <= 0.0 || self.k2 <= 0.0 {
            return Err(Error::InvalidArgument("SSIM k1, k2 must be > 0".to_string()));
        }
        Ok(())
    }
}

/// `out[i] = clamp(image[i] + delta[i], 0, 1)`, elementwise.
pub fn apply_perturbation(image: &Image, delta: &Perturbation) -> Result<Image> {
    if image.data.dim() != delta.data.dim() {
        return Err(Error::shape(
            format!("{:?}", image.data.dim()),
            format!("{:?}", delta.data.dim()),
        ));
    }
    let mut out = &image.data + &delta.data;
    out.mapv_inplace(|v| v.clamp(0.0, 1.0));
    Ok(Image { data: out })
}

/// Normalised 1-D sampled Gaussian of the given odd length.
fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size / 2) as f64;
    let mut k: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// 2-D Gaussian window weights (outer product of the 1-D kernel), sum 1.
fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let g = gaussian_kernel(size, sigma);
    let mut w = Vec::with_capacity(size * size);
    for gy in &g {
        for gx in &g {
            w.push(gy * gx);
        }
    }
    w
}

fn check_ssim_inputs(a: &Image, b: &Image, p: &SsimParams) -> Result<()> {
    p.validate()?;
    if a.data.dim() != b.data.dim() {
        return Err(Error::shape(
            format!("{:?}", a.data.dim()),
            format!("{:?}", b.data.dim()),
        ));
    }
    if a.height() < p.window_size || a.width() < p.window_size {
        return Err(Error::InvalidArgument(format!(
            "image {}x{} smaller than SSIM window {}",
            a.height(),
            a.width(),
            p.window_size
        )));
    }
    Ok(())
}

/// Mean structural similarity over all fully-contained window positions,
/// computed per channel and averaged. Result in (-1, 1].
pub fn ssim(a: &Image, b: &Image, p: &SsimParams) -> Result<f64> {
    check_ssim_inputs(a, b, p)?;
    Ok(ssim_with_optional_grad(a, b, p, None))
}

/// SSIM plus the gradient of the mean SSIM with respect to the second image.
/// Used by the SSIM-kind perturbation loss.
pub fn ssim_with_grad(a: &Image, b: &Image, p: &SsimParams) -> Result<(f64, Array3<f64>)> {
    check_ssim_inputs(a, b, p)?;
    let mut grad = Array3::zeros(a.data.dim());
    let value = ssim_with_optional_grad(a, b, p, Some(&mut grad));
    Ok((value, grad))
}

fn ssim_with_optional_grad(
    a: &Image,
    b: &Image,
    p: &SsimParams,
    mut grad: Option<&mut Array3<f64>>,
) -> f64 {
    let win = p.window_size;
    let weights = gaussian_window(win, p.window_sigma);
    let c1 = (p.k1 * p.dynamic_range).powi(2);
    let c2 = (p.k2 * p.dynamic_range).powi(2);
    let (channels, h, w) = a.data.dim();
    let positions = (h - win + 1) * (w - win + 1);
    let count = (channels * positions) as f64;

    let mut total = 0.0;
    for ch in 0..channels {
        for y0 in 0..=(h - win) {
            for x0 in 0..=(w - win) {
                // weighted window statistics
                let mut mu_a = 0.0;
                let mut mu_b = 0.0;
                for ky in 0..win {
                    for kx in 0..win {
                        let wgt = weights[ky * win + kx];
                        mu_a += wgt * a.data[[ch, y0 + ky, x0 + kx]];
                        mu_b += wgt * b.data[[ch, y0 + ky, x0 + kx]];
                    }
                }
                let mut var_a = 0.0;
                let mut var_b = 0.0;
                let mut cov = 0.0;
                for ky in 0..win {
                    for kx in 0..win {
                        let wgt = weights[ky * win + kx];
                        let da = a.data[[ch, y0 + ky, x0 + kx]] - mu_a;
                        let db = b.data[[ch, y0 + ky, x0 + kx]] - mu_b;
                        var_a += wgt * da * da;
                        var_b += wgt * db * db;
                        cov += wgt * da * db;
                    }
                }
                let a1 = 2.0 * mu_a * mu_b + c1;
                let a2 = 2.0 * cov + c2;
                let b1 = mu_a * mu_a + mu_b * mu_b + c1;
                let b2 = var_a + var_b + c2;
                let s = (a1 * a2) / (b1 * b2);
                total += s;

                if let Some(g) = grad.as_deref_mut() {
                    for ky in 0..win {
                        for kx in 0..win {
                            let wgt = weights[ky * win + kx];
                            let av = a.data[[ch, y0 + ky, x0 + kx]];
                            let bv = b.data[[ch, y0 + ky, x0 + kx]];
                            let d_a1 = 2.0 * mu_a * wgt;
                            let d_a2 = 2.0 * wgt * (av - mu_a);
                            let d_b1 = 2.0 * mu_b * wgt;
                            let d_b2 = 2.0 * wgt * (bv - mu_b);
                            let ds = (d_a1 * a2 + a1 * d_a2) / (b1 * b2)
                                - s * (d_b1 / b1 + d_b2 / b2);
                            g[[ch, y0 + ky, x0 + kx]] += ds / count;
                        }
                    }
                }
            }
        }
    }
    total / count
}

/// Structural dissimilarity `(1 - ssim) / 2`, in [0, 1).
pub fn dssim(a: &Image, b: &Image, p: &SsimParams) -> Result<f64> {
    Ok((1.0 - ssim(a, b, p)?) / 2.0)
}

/// Mirror index into `[0, n)` with edge duplication (symmetric reflection).
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

/// Separable discrete Gaussian convolution with symmetric boundary
/// reflection. The normalised kernel keeps the image mean unchanged.
pub fn gaussian_blur(image: &Image, sigma: f64, kernel_size: usize) -> Result<Image> {
    if sigma <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "blur sigma must be > 0, got {sigma}"
        )));
    }
    if kernel_size % 2 == 0 || kernel_size == 0 {
        return Err(Error::InvalidArgument(format!(
            "blur kernel_size must be odd, got {kernel_size}"
        )));
    }
    let k = gaussian_kernel(kernel_size, sigma);
    let half = (kernel_size / 2) as isize;
    let (c, h, w) = image.data.dim();

    // horizontal pass
    let mut tmp = Array3::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, &kv) in k.iter().enumerate() {
                    let xi = reflect(x as isize + ki as isize - half, w);
                    acc += kv * image.data[[ch, y, xi]];
                }
                tmp[[ch, y, x]] = acc;
            }
        }
    }
    // vertical pass
    let mut out = Array3::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, &kv) in k.iter().enumerate() {
                    let yi = reflect(y as isize + ki as isize - half, h);
                    acc += kv * tmp[[ch, yi, x]];
                }
                out[[ch, y, x]] = acc.clamp(0.0, 1.0);
            }
        }
    }
    Ok(Image { data: out })
}

/// Bilinear resize under the corner-aligned convention: source and target
/// image corners map onto each other exactly.
pub fn resize_bilinear(image: &Image, new_h: usize, new_w: usize) -> Result<Image> {
    if new_h == 0 || new_w == 0 {
        return Err(Error::InvalidArgument(
            "resize target must be positive".to_string(),
        ));
    }
    let (c, h, w) = image.data.dim();
    let scale_y = if new_h > 1 {
        (h - 1) as f64 / (new_h - 1) as f64
    } else {
        0.0
    };
    let scale_x = if new_w > 1 {
        (w - 1) as f64 / (new_w - 1) as f64
    } else {
        0.0
    };
    let mut out = Array3::zeros((c, new_h, new_w));
    for ch in 0..c {
        for y in 0..new_h {
            let sy = y as f64 * scale_y;
            let y0 = sy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let fy = sy - y0 as f64;
            for x in 0..new_w {
                let sx = x as f64 * scale_x;
                let x0 = sx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let fx = sx - x0 as f64;
                let top = image.data[[ch, y0, x0]] * (1.0 - fx) + image.data[[ch, y0, x1]] * fx;
                let bot = image.data[[ch, y1, x0]] * (1.0 - fx) + image.data[[ch, y1, x1]] * fx;
                out[[ch, y, x]] = (top * (1.0 - fy) + bot * fy).clamp(0.0, 1.0);
            }
        }
    }
    Ok(Image { data: out })
}

/// Maximum elementwise absolute value of a perturbation.
pub fn linf_norm(delta: &Perturbation) -> f64 {
    delta.data.iter().fold(0.0, |m, &v| m.max(v.abs()))
}

/// Maximum absolute value over an arbitrary array (signed differences etc.).
pub fn linf_of(data: &Array3<f64>) -> f64 {
    data.iter().fold(0.0, |m, &v| m.max(v.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array3;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Image {
        let data = Array3::from_shape_fn((c, h, w), |_| rng.random::<f64>());
        Image::new(data).unwrap()
    }

    #[test]
    fn apply_perturbation_identity_and_clamping() {
        let img = Image::constant(1, 8, 8, 0.5).unwrap();
        let zero = Perturbation::zeros(1, 8, 8);
        let out = apply_perturbation(&img, &zero).unwrap();
        assert_eq!(out, img);

        let up = Image::constant(1, 8, 8, 0.9).unwrap();
        let d = Perturbation::new(Array3::from_elem((1, 8, 8), 0.5)).unwrap();
        let out = apply_perturbation(&up, &d).unwrap();
        assert!(out.data().iter().all(|&v| v == 1.0));

        let low = Image::constant(1, 8, 8, 0.2).unwrap();
        let d = Perturbation::new(Array3::from_elem((1, 8, 8), -0.5)).unwrap();
        let out = apply_perturbation(&low, &d).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn apply_perturbation_shape_mismatch_errors() {
        let img = Image::constant(1, 8, 8, 0.5).unwrap();
        let d = Perturbation::zeros(1, 8, 9);
        assert!(apply_perturbation(&img, &d).is_err());
    }

    #[test]
    fn ssim_identical_images_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = random_image(&mut rng, 1, 16, 16);
        let v = ssim(&img, &img, &SsimParams::default()).unwrap();
        assert_abs_diff_eq!(v, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn ssim_constant_images_closed_form() {
        // For constant images all variance/covariance terms vanish, so
        // SSIM = (2*0.3*0.7 + c1) / (0.3^2 + 0.7^2 + c1) with c1 = 1e-4.
        let a = Image::constant(1, 16, 16, 0.3).unwrap();
        let b = Image::constant(1, 16, 16, 0.7).unwrap();
        let c1 = 1e-4;
        let expected = (2.0 * 0.3 * 0.7 + c1) / (0.3f64.powi(2) + 0.7f64.powi(2) + c1);
        let v = ssim(&a, &b, &SsimParams::default()).unwrap();
        assert_abs_diff_eq!(v, expected, epsilon = 1e-9);
        assert_abs_diff_eq!(v, 0.72418, epsilon = 1e-4);
    }

    #[test]
    fn ssim_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_image(&mut rng, 3, 16, 16);
        let b = random_image(&mut rng, 3, 16, 16);
        let p = SsimParams::default();
        let ab = ssim(&a, &b, &p).unwrap();
        let ba = ssim(&b, &a, &p).unwrap();
        assert!((ab - ba).abs() < 1e-9);
    }

    #[test]
    fn ssim_window_too_large_errors() {
        let a = Image::constant(1, 8, 8, 0.5).unwrap();
        assert!(ssim(&a, &a, &SsimParams::default()).is_err());
    }

    #[test]
    fn dssim_matches_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_image(&mut rng, 1, 16, 16);
        let b = random_image(&mut rng, 1, 16, 16);
        let p = SsimParams::default();
        let s = ssim(&a, &b, &p).unwrap();
        let d = dssim(&a, &b, &p).unwrap();
        assert_eq!(d, (1.0 - s) / 2.0);
        assert_abs_diff_eq!(dssim(&a, &a, &p).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn blur_constant_image_fixed_point() {
        let img = Image::constant(3, 12, 12, 0.42).unwrap();
        let out = gaussian_blur(&img, 1.0, 5).unwrap();
        for &v in out.data().iter() {
            assert_abs_diff_eq!(v, 0.42, epsilon = 1e-9);
        }
    }

    #[test]
    fn blur_kernel_normalized() {
        let k = gaussian_kernel(5, 1.0);
        assert_abs_diff_eq!(k.iter().sum::<f64>(), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn blur_impulse_matches_direct_2d_convolution_oracle() {
        // independent oracle: direct (non-separable) 2-D convolution with the
        // normalized outer-product kernel, zero interactions with borders
        // because the impulse sits in the interior
        let mut data = Array3::zeros((1, 11, 11));
        data[[0, 5, 5]] = 1.0;
        let img = Image::new(data).unwrap();
        let out = gaussian_blur(&img, 1.0, 5).unwrap();

        let g = gaussian_kernel(5, 1.0);
        for y in 3..=7 {
            for x in 3..=7 {
                let expected = g[y - 3] * g[x - 3];
                assert_abs_diff_eq!(out.data()[[0, y, x]], expected, epsilon = 1e-12);
            }
        }
        assert_abs_diff_eq!(out.data()[[0, 0, 0]], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn blur_preserves_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = random_image(&mut rng, 1, 16, 16);
        let out = gaussian_blur(&img, 1.0, 5).unwrap();
        let mean_in = img.data().iter().sum::<f64>() / 256.0;
        let mean_out = out.data().iter().sum::<f64>() / 256.0;
        assert_abs_diff_eq!(mean_in, mean_out, epsilon = 1e-6);
    }

    #[test]
    fn blur_even_kernel_rejected() {
        let img = Image::constant(1, 8, 8, 0.5).unwrap();
        assert!(gaussian_blur(&img, 1.0, 4).is_err());
    }

    #[test]
    fn resize_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = random_image(&mut rng, 3, 10, 14);
        let out = resize_bilinear(&img, 10, 14).unwrap();
        for (a, b) in img.data().iter().zip(out.data().iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn resize_row_interpolation_oracle() {
        // row [0, 1] widened to 3 columns must become [0, 0.5, 1] under
        // corner alignment
        let mut data = Array3::zeros((1, 1, 2));
        data[[0, 0, 1]] = 1.0;
        let img = Image::new(data).unwrap();
        let out = resize_bilinear(&img, 1, 3).unwrap();
        assert_abs_diff_eq!(out.data()[[0, 0, 0]], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(out.data()[[0, 0, 1]], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(out.data()[[0, 0, 2]], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn resize_constant_stays_constant() {
        let img = Image::constant(1, 9, 9, 0.37).unwrap();
        let out = resize_bilinear(&img, 17, 5).unwrap();
        for &v in out.data().iter() {
            assert_abs_diff_eq!(v, 0.37, epsilon = 1e-12);
        }
    }

    #[test]
    fn resize_zero_target_rejected() {
        let img = Image::constant(1, 8, 8, 0.5).unwrap();
        assert!(resize_bilinear(&img, 0, 8).is_err());
    }

    #[test]
    fn linf_norm_cases() {
        assert_eq!(linf_norm(&Perturbation::zeros(1, 4, 4)), 0.0);
        let mut d = Array3::zeros((1, 4, 4));
        d[[0, 2, 1]] = -0.3;
        assert_eq!(linf_norm(&Perturbation::new(d).unwrap()), 0.3);
        let c = Perturbation::new(Array3::from_elem((1, 4, 4), 0.1)).unwrap();
        assert_eq!(linf_norm(&c), 0.1);
    }

    #[test]
    fn ssim_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = random_image(&mut rng, 1, 12, 12);
        let b_data = Array3::from_shape_fn((1, 12, 12), |_| 0.2 + 0.6 * rng.random::<f64>());
        let b = Image::new(b_data.clone()).unwrap();
        let p = SsimParams::default();
        let (_, grad) = ssim_with_grad(&a, &b, &p).unwrap();

        let h = 1e-6;
        for &(y, x) in &[(0usize, 0usize), (5, 7), (11, 11), (3, 2)] {
            let mut plus = b_data.clone();
            plus[[0, y, x]] += h;
            let mut minus = b_data.clone();
            minus[[0, y, x]] -= h;
            let sp = ssim(&a, &Image::new(plus).unwrap(), &p).unwrap();
            let sm = ssim(&a, &Image::new(minus).unwrap(), &p).unwrap();
            let fd = (sp - sm) / (2.0 * h);
            assert_abs_diff_eq!(grad[[0, y, x]], fd, epsilon = 1e-5);
        }
    }

    proptest::proptest! {
        #[test]
        fn prop_apply_perturbation_in_range(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let img = random_image(&mut rng, 1, 8, 8);
            let d = Perturbation::new(
                Array3::from_shape_fn((1, 8, 8), |_| rng.random::<f64>() * 2.0 - 1.0),
            ).unwrap();
            let out = apply_perturbation(&img, &d).unwrap();
            proptest::prop_assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }

        #[test]
        fn prop_ssim_bounded_and_symmetric(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_image(&mut rng, 1, 12, 12);
            let b = random_image(&mut rng, 1, 12, 12);
            let p = SsimParams::default();
            let ab = ssim(&a, &b, &p).unwrap();
            let ba = ssim(&b, &a, &p).unwrap();
            proptest::prop_assert!(ab.abs() <= 1.0 + 1e-12);
            proptest::prop_assert!((ab - ba).abs() < 1e-9);
        }
    }
}

//! Minimal CPU training engine: batched f64 tensors `(n, c, h, w)`, explicit
//! forward/backward layers and an Adam optimizer. Convolutions parallelise
//! over the batch with deterministic, order-independent writes.

use ndarray::{Array1, Array2, Array4, Axis};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub type Tensor = Array4<f64>;

/// Weight initialisation scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    HeNormal,
    Zero,
}

fn he_normal(rng: &mut ChaCha8Rng, fan_in: usize) -> impl FnMut() -> f64 + '_ {
    let std = (2.0 / fan_in as f64).sqrt();
    move || {
        // Box-Muller
        let u1: f64 = rng.random::<f64>().max(1e-12);
        let u2: f64 = rng.random::<f64>();
        std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }
}

/// Mutable views over one parameter tensor and its gradient.
pub struct ParamsMut<'a> {
    pub value: &'a mut [f64],
    pub grad: &'a mut [f64],
}

// ---------------------------------------------------------------------------
// Conv2d
// ---------------------------------------------------------------------------

#[derive(Clone, Serialize, Deserialize)]
pub struct Conv2d {
    pub weight: Array4<f64>, // (out, in, k, k)
    pub bias: Array1<f64>,
    pub stride: usize,
    pub pad: usize,
    #[serde(skip)]
    grad_w: Option<Array4<f64>>,
    #[serde(skip)]
    grad_b: Option<Array1<f64>>,
    #[serde(skip)]
    cache_x: Option<Tensor>,
}

impl Conv2d {
    pub fn new(
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weight = match init {
            Init::Zero => Array4::zeros((out_c, in_c, k, k)),
            Init::HeNormal => {
                let mut sample = he_normal(rng, in_c * k * k);
                Array4::from_shape_fn((out_c, in_c, k, k), |_| sample())
            }
        };
        Conv2d {
            weight,
            bias: Array1::zeros(out_c),
            stride,
            pad,
            grad_w: None,
            grad_b: None,
            cache_x: None,
        }
    }

    fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.weight.dim().2;
        (
            (h + 2 * self.pad - k) / self.stride + 1,
            (w + 2 * self.pad - k) / self.stride + 1,
        )
    }

    fn forward(&mut self, x: &Tensor) -> Tensor {
        let (n, ci, h, w) = x.dim();
        let (co, wci, k, _) = self.weight.dim();
        assert_eq!(ci, wci, "conv input channels mismatch");
        let (ho, wo) = self.out_hw(h, w);
        let mut out = Tensor::zeros((n, co, ho, wo));
        let xs = x.as_slice().expect("contiguous");
        let ws = self.weight.as_slice().expect("contiguous");
        let bs = self.bias.as_slice().expect("contiguous");
        let sample_in = ci * h * w;
        let sample_out = co * ho * wo;
        let (stride, pad) = (self.stride, self.pad);
        out.as_slice_mut()
            .expect("contiguous")
            .par_chunks_mut(sample_out)
            .enumerate()
            .for_each(|(ni, o)| {
                conv_fwd_sample(
                    &xs[ni * sample_in..(ni + 1) * sample_in],
                    (ci, h, w),
                    ws,
                    bs,
                    (co, k, stride, pad),
                    o,
                    (ho, wo),
                );
            });
        self.cache_x = Some(x.clone());
        out
    }

    fn backward(&mut self, g: &Tensor) -> Tensor {
        let x = self.cache_x.as_ref().expect("forward before backward");
        let (n, ci, h, w) = x.dim();
        let (co, _, k, _) = self.weight.dim();
        let (_, _, ho, wo) = g.dim();
        let xs = x.as_slice().expect("contiguous");
        let gs = g.as_slice().expect("contiguous");
        let ws = self.weight.as_slice().expect("contiguous");
        let sample_in = ci * h * w;
        let sample_out = co * ho * wo;
        let (stride, pad) = (self.stride, self.pad);

        let parts: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..n)
            .into_par_iter()
            .map(|ni| {
                let mut dx = vec![0.0; sample_in];
                let mut dw = vec![0.0; co * ci * k * k];
                let mut db = vec![0.0; co];
                conv_bwd_sample(
                    &xs[ni * sample_in..(ni + 1) * sample_in],
                    (ci, h, w),
                    &gs[ni * sample_out..(ni + 1) * sample_out],
                    (co, k, stride, pad),
                    ws,
                    (ho, wo),
                    &mut dx,
                    &mut dw,
                    &mut db,
                );
                (dx, dw, db)
            })
            .collect();

        let mut dw_total = Array4::zeros((co, ci, k, k));
        let mut db_total = Array1::zeros(co);
        let mut dx_total = Tensor::zeros((n, ci, h, w));
        {
            let dwt = dw_total.as_slice_mut().unwrap();
            let dbt = db_total.as_slice_mut().unwrap();
            let dxt = dx_total.as_slice_mut().unwrap();
            for (ni, (dx, dw, db)) in parts.iter().enumerate() {
                dxt[ni * sample_in..(ni + 1) * sample_in].copy_from_slice(dx);
                for (a, b) in dwt.iter_mut().zip(dw.iter()) {
                    *a += b;
                }
                for (a, b) in dbt.iter_mut().zip(db.iter()) {
                    *a += b;
                }
            }
        }
        self.grad_w = Some(dw_total);
        self.grad_b = Some(db_total);
        dx_total
    }

    fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_fwd_sample(
    x: &[f64],
    (ci_n, h, w): (usize, usize, usize),
    wgt: &[f64],
    bias: &[f64],
    (co_n, k, stride, pad): (usize, usize, usize, usize),
    out: &mut [f64],
    (ho, wo): (usize, usize),
) {
    for co in 0..co_n {
        let orows = &mut out[co * ho * wo..(co + 1) * ho * wo];
        for v in orows.iter_mut() {
            *v = bias[co];
        }
        for ci in 0..ci_n {
            for ky in 0..k {
                let wrow = &wgt[((co * ci_n + ci) * k + ky) * k..][..k];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let xrow = &x[(ci * h + iy as usize) * w..][..w];
                    let orow = &mut out[(co * ho + oy) * wo..][..wo];
                    for ox in 0..wo {
                        let base = (ox * stride) as isize - pad as isize;
                        let lo = (-base).max(0) as usize;
                        let hi = k.min((w as isize - base).max(0) as usize);
                        let mut acc = 0.0;
                        for kx in lo..hi {
                            acc += wrow[kx] * xrow[(base + kx as isize) as usize];
                        }
                        orow[ox] += acc;
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_bwd_sample(
    x: &[f64],
    (ci_n, h, w): (usize, usize, usize),
    g: &[f64],
    (co_n, k, stride, pad): (usize, usize, usize, usize),
    wgt: &[f64],
    (ho, wo): (usize, usize),
    dx: &mut [f64],
    dw: &mut [f64],
    db: &mut [f64],
) {
    for co in 0..co_n {
        for oy in 0..ho {
            let grow = &g[(co * ho + oy) * wo..][..wo];
            db[co] += grow.iter().sum::<f64>();
        }
        for ci in 0..ci_n {
            for ky in 0..k {
                let widx = ((co * ci_n + ci) * k + ky) * k;
                let wrow = &wgt[widx..][..k];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let grow = &g[(co * ho + oy) * wo..][..wo];
                    let xrow = &x[(ci * h + iy as usize) * w..][..w];
                    let dxrow = &mut dx[(ci * h + iy as usize) * w..][..w];
                    let dwrow = &mut dw[widx..][..k];
                    for ox in 0..wo {
                        let gval = grow[ox];
                        if gval == 0.0 {
                            continue;
                        }
                        let base = (ox * stride) as isize - pad as isize;
                        let lo = (-base).max(0) as usize;
                        let hi = k.min((w as isize - base).max(0) as usize);
                        for kx in lo..hi {
                            let ix = (base + kx as isize) as usize;
                            dwrow[kx] += gval * xrow[ix];
                            dxrow[ix] += gval * wrow[kx];
                        }
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// BatchNorm2d
// ---------------------------------------------------------------------------

#[derive(Clone, Serialize, Deserialize)]
pub struct BatchNorm2d {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub momentum: f64,
    pub eps: f64,
    #[serde(skip)]
    grad_gamma: Option<Array1<f64>>,
    #[serde(skip)]
    grad_beta: Option<Array1<f64>>,
    #[serde(skip)]
    cache: Option<BnCache>,
}

#[derive(Clone)]
struct BnCache {
    x_hat: Tensor,
    inv_std: Array1<f64>,
    train: bool,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            momentum: 0.1,
            eps: 1e-5,
            grad_gamma: None,
            grad_beta: None,
            cache: None,
        }
    }

    fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let (n, c, h, w) = x.dim();
        let m = (n * h * w) as f64;
        let mut out = Tensor::zeros((n, c, h, w));
        let mut x_hat = Tensor::zeros((n, c, h, w));
        let mut inv_std = Array1::zeros(c);
        for ch in 0..c {
            let (mean, var) = if train {
                let mut sum = 0.0;
                for ni in 0..n {
                    for y in 0..h {
                        for xx in 0..w {
                            sum += x[[ni, ch, y, xx]];
                        }
                    }
                }
                let mean = sum / m;
                let mut var = 0.0;
                for ni in 0..n {
                    for y in 0..h {
                        for xx in 0..w {
                            let d = x[[ni, ch, y, xx]] - mean;
                            var += d * d;
                        }
                    }
                }
                let var = var / m;
                self.running_mean[ch] =
                    (1.0 - self.momentum) * self.running_mean[ch] + self.momentum * mean;
                self.running_var[ch] =
                    (1.0 - self.momentum) * self.running_var[ch] + self.momentum * var;
                (mean, var)
            } else {
                (self.running_mean[ch], self.running_var[ch])
            };
            let istd = 1.0 / (var + self.eps).sqrt();
            inv_std[ch] = istd;
            for ni in 0..n {
                for y in 0..h {
                    for xx in 0..w {
                        let cen = x[[ni, ch, y, xx]] - mean;
                        let xh = cen * istd;
                        x_hat[[ni, ch, y, xx]] = xh;
                        out[[ni, ch, y, xx]] = self.gamma[ch] * xh + self.beta[ch];
                    }
                }
            }
        }
        self.cache = Some(BnCache {
            x_hat,
            inv_std,
            train,
        });
        out
    }

    fn backward(&mut self, g: &Tensor) -> Tensor {
        let cache = self.cache.as_ref().expect("forward before backward");
        let (n, c, h, w) = g.dim();
        let m = (n * h * w) as f64;
        let mut dgamma = Array1::zeros(c);
        let mut dbeta = Array1::zeros(c);
        let mut dx = Tensor::zeros((n, c, h, w));
        for ch in 0..c {
            let mut sum_g = 0.0;
            let mut sum_gxh = 0.0;
            for ni in 0..n {
                for y in 0..h {
                    for xx in 0..w {
                        let gv = g[[ni, ch, y, xx]];
                        sum_g += gv;
                        sum_gxh += gv * cache.x_hat[[ni, ch, y, xx]];
                    }
                }
            }
            dgamma[ch] = sum_gxh;
            dbeta[ch] = sum_g;
            let istd = cache.inv_std[ch];
            let gam = self.gamma[ch];
            if cache.train {
                // dx = gamma*istd/m * (m*g - sum_g - x_hat * sum(g*x_hat))
                for ni in 0..n {
                    for y in 0..h {
                        for xx in 0..w {
                            let gv = g[[ni, ch, y, xx]];
                            let xh = cache.x_hat[[ni, ch, y, xx]];
                            dx[[ni, ch, y, xx]] =
                                gam * istd / m * (m * gv - sum_g - xh * sum_gxh);
                        }
                    }
                }
            } else {
                for ni in 0..n {
                    for y in 0..h {
                        for xx in 0..w {
                            dx[[ni, ch, y, xx]] = g[[ni, ch, y, xx]] * gam * istd;
                        }
                    }
                }
            }
        }
        self.grad_gamma = Some(dgamma);
        self.grad_beta = Some(dbeta);
        dx
    }

    fn param_count(&self) -> usize {
        self.gamma.len() + self.beta.len()
    }
}

// ---------------------------------------------------------------------------
// Dense
// ---------------------------------------------------------------------------

#[derive(Clone, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Array2<f64>, // (out, in)
    pub bias: Array1<f64>,
    #[serde(skip)]
    grad_w: Option<Array2<f64>>,
    #[serde(skip)]
    grad_b: Option<Array1<f64>>,
    #[serde(skip)]
    cache_x: Option<Tensor>,
}

impl Dense {
    pub fn new(in_dim: usize, out_dim: usize, init: Init, rng: &mut ChaCha8Rng) -> Self {
        let weight = match init {
            Init::Zero => Array2::zeros((out_dim, in_dim)),
            Init::HeNormal => {
                let mut sample = he_normal(rng, in_dim);
                Array2::from_shape_fn((out_dim, in_dim), |_| sample())
            }
        };
        Dense {
            weight,
            bias: Array1::zeros(out_dim),
            grad_w: None,
            grad_b: None,
            cache_x: None,
        }
    }

    fn forward(&mut self, x: &Tensor) -> Tensor {
        let (n, d_in, one_a, one_b) = x.dim();
        assert_eq!((one_a, one_b), (1, 1), "dense expects (n, d, 1, 1)");
        let (d_out, wd_in) = self.weight.dim();
        assert_eq!(d_in, wd_in, "dense input dim mismatch");
        let mut out = Tensor::zeros((n, d_out, 1, 1));
        for ni in 0..n {
            for o in 0..d_out {
                let mut acc = self.bias[o];
                for i in 0..d_in {
                    acc += self.weight[[o, i]] * x[[ni, i, 0, 0]];
                }
                out[[ni, o, 0, 0]] = acc;
            }
        }
        self.cache_x = Some(x.clone());
        out
    }

    fn backward(&mut self, g: &Tensor) -> Tensor {
        let x = self.cache_x.as_ref().expect("forward before backward");
        let (n, d_in, _, _) = x.dim();
        let d_out = self.weight.dim().0;
        let mut dw = Array2::zeros((d_out, d_in));
        let mut db = Array1::zeros(d_out);
        let mut dx = Tensor::zeros((n, d_in, 1, 1));
        for ni in 0..n {
            for o in 0..d_out {
                let gv = g[[ni, o, 0, 0]];
                db[o] += gv;
                for i in 0..d_in {
                    dw[[o, i]] += gv * x[[ni, i, 0, 0]];
                    dx[[ni, i, 0, 0]] += gv * self.weight[[o, i]];
                }
            }
        }
        self.grad_w = Some(dw);
        self.grad_b = Some(db);
        dx
    }

    fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

// ---------------------------------------------------------------------------
// Shape and activation layers
// ---------------------------------------------------------------------------

#[derive(Clone, Default, Serialize, Deserialize)]
pub struct Flatten {
    #[serde(skip)]
    cache_dim: Option<(usize, usize, usize, usize)>,
}

#[derive(Clone, Default, Serialize, Deserialize)]
pub struct ReLU {
    #[serde(skip)]
    cache_mask: Option<Tensor>,
}

#[derive(Clone, Default, Serialize, Deserialize)]
pub struct TanhLayer {
    #[serde(skip)]
    cache_y: Option<Tensor>,
}

#[derive(Clone, Default, Serialize, Deserialize)]
pub struct SigmoidLayer {
    #[serde(skip)]
    cache_y: Option<Tensor>,
}

/// Nearest-neighbour 2x upsampling.
#[derive(Clone, Default, Serialize, Deserialize)]
pub struct Upsample2x;

/// Per-sample L2 normalisation over the channel axis of `(n, d, 1, 1)`.
#[derive(Clone, Default, Serialize, Deserialize)]
pub struct L2Normalize {
    #[serde(skip)]
    cache: Option<(Tensor, Vec<f64>)>, // (y, norms)
}

// ---------------------------------------------------------------------------
// Layer enum and Sequential
// ---------------------------------------------------------------------------

#[derive(Clone, Serialize, Deserialize)]
pub enum Layer {
    Conv(Conv2d),
    BatchNorm(BatchNorm2d),
    Dense(Dense),
    Flatten(Flatten),
    ReLU(ReLU),
    Tanh(TanhLayer),
    Sigmoid(SigmoidLayer),
    Upsample(Upsample2x),
    Normalize(L2Normalize),
}

impl Layer {
    pub fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        match self {
            Layer::Conv(l) => l.forward(x),
            Layer::BatchNorm(l) => l.forward(x, train),
            Layer::Dense(l) => l.forward(x),
            Layer::Flatten(l) => {
                let dim = x.dim();
                l.cache_dim = Some(dim);
                let (n, c, h, w) = dim;
                x.clone()
                    .into_shape_with_order((n, c * h * w, 1, 1))
                    .expect("flatten reshape")
            }
            Layer::ReLU(l) => {
                let mask = x.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                let y = x * &mask;
                l.cache_mask = Some(mask);
                y
            }
            Layer::Tanh(l) => {
                let y = x.mapv(f64::tanh);
                l.cache_y = Some(y.clone());
                y
            }
            Layer::Sigmoid(l) => {
                let y = x.mapv(|v| 1.0 / (1.0 + (-v).exp()));
                l.cache_y = Some(y.clone());
                y
            }
            Layer::Upsample(_) => {
                let (n, c, h, w) = x.dim();
                Tensor::from_shape_fn((n, c, 2 * h, 2 * w), |(ni, ci, y, xx)| {
                    x[[ni, ci, y / 2, xx / 2]]
                })
            }
            Layer::Normalize(l) => {
                let (n, d, _, _) = x.dim();
                let mut y = x.clone();
                let mut norms = vec![0.0; n];
                for ni in 0..n {
                    let mut sq = 0.0;
                    for i in 0..d {
                        sq += x[[ni, i, 0, 0]] * x[[ni, i, 0, 0]];
                    }
                    let norm = sq.sqrt().max(1e-12);
                    norms[ni] = norm;
                    for i in 0..d {
                        y[[ni, i, 0, 0]] /= norm;
                    }
                }
                l.cache = Some((y.clone(), norms));
                y
            }
        }
    }

    pub fn backward(&mut self, g: &Tensor) -> Tensor {
        match self {
            Layer::Conv(l) => l.backward(g),
            Layer::BatchNorm(l) => l.backward(g),
            Layer::Dense(l) => l.backward(g),
            Layer::Flatten(l) => {
                let dim = l.cache_dim.expect("forward before backward");
                g.clone()
                    .into_shape_with_order(dim)
                    .expect("flatten backward reshape")
            }
            Layer::ReLU(l) => g * l.cache_mask.as_ref().expect("forward before backward"),
            Layer::Tanh(l) => {
                let y = l.cache_y.as_ref().expect("forward before backward");
                g * &y.mapv(|v| 1.0 - v * v)
            }
            Layer::Sigmoid(l) => {
                let y = l.cache_y.as_ref().expect("forward before backward");
                g * &y.mapv(|v| v * (1.0 - v))
            }
            Layer::Upsample(_) => {
                let (n, c, h2, w2) = g.dim();
                let (h, w) = (h2 / 2, w2 / 2);
                let mut dx = Tensor::zeros((n, c, h, w));
                for ni in 0..n {
                    for ci in 0..c {
                        for y in 0..h2 {
                            for xx in 0..w2 {
                                dx[[ni, ci, y / 2, xx / 2]] += g[[ni, ci, y, xx]];
                            }
                        }
                    }
                }
                dx
            }
            Layer::Normalize(l) => {
                let (y, norms) = l.cache.as_ref().expect("forward before backward");
                let (n, d, _, _) = g.dim();
                let mut dx = Tensor::zeros((n, d, 1, 1));
                for ni in 0..n {
                    let mut dot = 0.0;
                    for i in 0..d {
                        dot += y[[ni, i, 0, 0]] * g[[ni, i, 0, 0]];
                    }
                    for i in 0..d {
                        dx[[ni, i, 0, 0]] =
                            (g[[ni, i, 0, 0]] - y[[ni, i, 0, 0]] * dot) / norms[ni];
                    }
                }
                dx
            }
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Layer::Conv(l) => l.param_count(),
            Layer::BatchNorm(l) => l.param_count(),
            Layer::Dense(l) => l.param_count(),
            _ => 0,
        }
    }

    pub fn params_mut(&mut self) -> Vec<ParamsMut<'_>> {
        match self {
            Layer::Conv(l) => {
                let gw = l
                    .grad_w
                    .get_or_insert_with(|| Array4::zeros(l.weight.dim()));
                let gb = l.grad_b.get_or_insert_with(|| Array1::zeros(l.bias.len()));
                vec![
                    ParamsMut {
                        value: l.weight.as_slice_mut().unwrap(),
                        grad: gw.as_slice_mut().unwrap(),
                    },
                    ParamsMut {
                        value: l.bias.as_slice_mut().unwrap(),
                        grad: gb.as_slice_mut().unwrap(),
                    },
                ]
            }
            Layer::BatchNorm(l) => {
                let gg = l
                    .grad_gamma
                    .get_or_insert_with(|| Array1::zeros(l.gamma.len()));
                let gb = l
                    .grad_beta
                    .get_or_insert_with(|| Array1::zeros(l.beta.len()));
                vec![
                    ParamsMut {
                        value: l.gamma.as_slice_mut().unwrap(),
                        grad: gg.as_slice_mut().unwrap(),
                    },
                    ParamsMut {
                        value: l.beta.as_slice_mut().unwrap(),
                        grad: gb.as_slice_mut().unwrap(),
                    },
                ]
            }
            Layer::Dense(l) => {
                let gw = l
                    .grad_w
                    .get_or_insert_with(|| Array2::zeros(l.weight.dim()));
                let gb = l.grad_b.get_or_insert_with(|| Array1::zeros(l.bias.len()));
                vec![
                    ParamsMut {
                        value: l.weight.as_slice_mut().unwrap(),
                        grad: gw.as_slice_mut().unwrap(),
                    },
                    ParamsMut {
                        value: l.bias.as_slice_mut().unwrap(),
                        grad: gb.as_slice_mut().unwrap(),
                    },
                ]
            }
            _ => Vec::new(),
        }
    }

    /// Drops forward caches, leaving only weights (used before checkpointing).
    pub fn clear_cache(&mut self) {
        match self {
            Layer::Conv(l) => {
                l.cache_x = None;
                l.grad_w = None;
                l.grad_b = None;
            }
            Layer::BatchNorm(l) => {
                l.cache = None;
                l.grad_gamma = None;
                l.grad_beta = None;
            }
            Layer::Dense(l) => {
                l.cache_x = None;
                l.grad_w = None;
                l.grad_b = None;
            }
            Layer::Flatten(l) => l.cache_dim = None,
            Layer::ReLU(l) => l.cache_mask = None,
            Layer::Tanh(l) => l.cache_y = None,
            Layer::Sigmoid(l) => l.cache_y = None,
            Layer::Upsample(_) => {}
            Layer::Normalize(l) => l.cache = None,
        }
    }
}

#[derive(Clone, Serialize, Deserialize)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Sequential { layers }
    }

    pub fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let mut cur = x.clone();
        for layer in &mut self.layers {
            cur = layer.forward(&cur, train);
        }
        cur
    }

    pub fn backward(&mut self, g: &Tensor) -> Tensor {
        let mut cur = g.clone();
        for layer in self.layers.iter_mut().rev() {
            cur = layer.backward(&cur);
        }
        cur
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn params_mut(&mut self) -> Vec<ParamsMut<'_>> {
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }

    /// Parameters of the layers with index >= `from` (fine-tuning subsets).
    pub fn params_mut_from(&mut self, from: usize) -> Vec<ParamsMut<'_>> {
        self.layers[from..]
            .iter_mut()
            .flat_map(Layer::params_mut)
            .collect()
    }

    pub fn clear_caches(&mut self) {
        for layer in &mut self.layers {
            layer.clear_cache();
        }
    }

    /// Flat copy of every trainable scalar, in layer order.
    pub fn flat_weights(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv(l) => {
                    out.extend(l.weight.iter());
                    out.extend(l.bias.iter());
                }
                Layer::BatchNorm(l) => {
                    out.extend(l.gamma.iter());
                    out.extend(l.beta.iter());
                }
                Layer::Dense(l) => {
                    out.extend(l.weight.iter());
                    out.extend(l.bias.iter());
                }
                _ => {}
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

#[derive(Clone, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One update over a stable, ordered parameter list.
    pub fn step(&mut self, mut params: Vec<ParamsMut<'_>>) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
            self.v = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        }
        assert_eq!(self.m.len(), params.len(), "optimizer/param list mismatch");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (pi, p) in params.iter_mut().enumerate() {
            let m = &mut self.m[pi];
            let v = &mut self.v[pi];
            for j in 0..p.value.len() {
                let g = p.grad[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p.value[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Tensor helpers
// ---------------------------------------------------------------------------

/// Clamp to [0,1] returning the result and a gradient mask that is 1 where
/// the input was strictly inside the interval.
pub fn clamp01_with_mask(x: &Tensor) -> (Tensor, Tensor) {
    let out = x.mapv(|v| v.clamp(0.0, 1.0));
    let mask = x.mapv(|v| if v > 0.0 && v < 1.0 { 1.0 } else { 0.0 });
    (out, mask)
}

/// Stack per-sample `(c, h, w)` arrays into a batch tensor.
pub fn stack_samples(samples: &[ndarray::Array3<f64>]) -> Tensor {
    assert!(!samples.is_empty());
    let (c, h, w) = samples[0].dim();
    let mut out = Tensor::zeros((samples.len(), c, h, w));
    for (ni, s) in samples.iter().enumerate() {
        out.index_axis_mut(Axis(0), ni).assign(s);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_tensor(r: &mut ChaCha8Rng, dim: (usize, usize, usize, usize)) -> Tensor {
        Tensor::from_shape_fn(dim, |_| r.random::<f64>() * 2.0 - 1.0)
    }

    /// Finite-difference check of a whole net against scalar loss sum(out * r).
    fn check_grads(mut net: Sequential, in_dim: (usize, usize, usize, usize), train: bool, seed: u64) {
        let mut r = rng(seed);
        let x = random_tensor(&mut r, in_dim);
        let out = net.forward(&x, train);
        let weights = random_tensor(&mut r, out.dim());
        let dx = net.backward(&weights);

        let loss = |net: &mut Sequential, x: &Tensor| -> f64 {
            (net.forward(x, train) * &weights).sum()
        };

        // input gradient
        let h = 1e-6;
        let mut probe = rng(seed + 1);
        for _ in 0..6 {
            let idx = (
                probe.random_range(0..in_dim.0),
                probe.random_range(0..in_dim.1),
                probe.random_range(0..in_dim.2),
                probe.random_range(0..in_dim.3),
            );
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (loss(&mut net, &xp) - loss(&mut net, &xm)) / (2.0 * h);
            let an = dx[idx];
            assert!(
                (fd - an).abs() <= 1e-5 * (1.0 + fd.abs().max(an.abs())),
                "input grad mismatch at {idx:?}: fd={fd}, analytic={an}"
            );
        }

        // parameter gradients (probe a few scalars per parameter tensor)
        // re-run forward/backward on the pristine x so caches match
        net.forward(&x, train);
        net.backward(&weights);
        let grads: Vec<Vec<f64>> = net
            .params_mut()
            .iter()
            .map(|p| p.grad.to_vec())
            .collect();
        let n_params = grads.len();
        for pi in 0..n_params {
            let len = grads[pi].len();
            let stride = (len / 3).max(1);
            for j in (0..len).step_by(stride) {
                let an = grads[pi][j];
                let orig = net.params_mut()[pi].value[j];
                net.params_mut()[pi].value[j] = orig + h;
                let lp = loss(&mut net, &x);
                net.params_mut()[pi].value[j] = orig - h;
                let lm = loss(&mut net, &x);
                net.params_mut()[pi].value[j] = orig;
                let fd = (lp - lm) / (2.0 * h);
                assert!(
                    (fd - an).abs() <= 1e-5 * (1.0 + fd.abs().max(an.abs())),
                    "param grad mismatch p{pi}[{j}]: fd={fd}, analytic={an}"
                );
            }
        }
    }

    #[test]
    fn conv_stride1_gradients() {
        let mut r = rng(10);
        let net = Sequential::new(vec![Layer::Conv(Conv2d::new(2, 3, 3, 1, 1, Init::HeNormal, &mut r))]);
        check_grads(net, (2, 2, 6, 6), true, 100);
    }

    #[test]
    fn conv_stride2_gradients() {
        let mut r = rng(11);
        let net = Sequential::new(vec![Layer::Conv(Conv2d::new(2, 4, 3, 2, 1, Init::HeNormal, &mut r))]);
        check_grads(net, (2, 2, 8, 8), true, 101);
    }

    #[test]
    fn batchnorm_train_gradients() {
        let mut r = rng(12);
        let net = Sequential::new(vec![
            Layer::Conv(Conv2d::new(1, 2, 3, 1, 1, Init::HeNormal, &mut r)),
            Layer::BatchNorm(BatchNorm2d::new(2)),
        ]);
        check_grads(net, (3, 1, 5, 5), true, 102);
    }

    #[test]
    fn dense_flatten_normalize_gradients() {
        let mut r = rng(13);
        let net = Sequential::new(vec![
            Layer::Flatten(Flatten::default()),
            Layer::Dense(Dense::new(12, 5, Init::HeNormal, &mut r)),
            Layer::Normalize(L2Normalize::default()),
        ]);
        check_grads(net, (2, 3, 2, 2), false, 103);
    }

    #[test]
    fn activation_and_upsample_gradients() {
        let mut r = rng(14);
        let net = Sequential::new(vec![
            Layer::Conv(Conv2d::new(1, 2, 3, 1, 1, Init::HeNormal, &mut r)),
            Layer::ReLU(ReLU::default()),
            Layer::Upsample(Upsample2x),
            Layer::Conv(Conv2d::new(2, 1, 3, 1, 1, Init::HeNormal, &mut r)),
            Layer::Tanh(TanhLayer::default()),
        ]);
        check_grads(net, (2, 1, 4, 4), true, 104);
    }

    #[test]
    fn sigmoid_dense_gradients() {
        let mut r = rng(15);
        let net = Sequential::new(vec![
            Layer::Flatten(Flatten::default()),
            Layer::Dense(Dense::new(8, 1, Init::HeNormal, &mut r)),
            Layer::Sigmoid(SigmoidLayer::default()),
        ]);
        check_grads(net, (3, 2, 2, 2), false, 105);
    }

    #[test]
    fn param_count_closed_form() {
        let mut r = rng(16);
        let conv = Conv2d::new(4, 8, 3, 1, 1, Init::HeNormal, &mut r);
        assert_eq!(conv.param_count(), 3 * 3 * 4 * 8 + 8);
        let bn = BatchNorm2d::new(8);
        assert_eq!(bn.param_count(), 2 * 8);
        let dense = Dense::new(3, 2, Init::HeNormal, &mut r);
        assert_eq!(dense.param_count(), 3 * 2 + 2);
        let net = Sequential::new(vec![
            Layer::Conv(conv),
            Layer::BatchNorm(bn),
            Layer::Dense(dense),
        ]);
        assert_eq!(net.param_count(), (3 * 3 * 4 * 8 + 8) + 16 + 8);
    }

    #[test]
    fn init_deterministic_under_seed() {
        let make = || {
            let mut r = rng(42);
            Conv2d::new(3, 5, 3, 1, 1, Init::HeNormal, &mut r)
        };
        assert_eq!(make().weight, make().weight);
    }

    #[test]
    fn serde_debug_weights() {
        let mut r = rng(17);
        let net = Sequential::new(vec![
            Layer::Conv(Conv2d::new(1, 2, 3, 2, 1, Init::HeNormal, &mut r)),
            Layer::Dense(Dense::new(2 * 4 * 4, 4, Init::HeNormal, &mut r)),
        ]);
        let json = serde_json::to_string(&net).unwrap();
        let back: Sequential = serde_json::from_str(&json).unwrap();
        let a = net.flat_weights();
        let b = back.flat_weights();
        for (i, (x, y)) in a.iter().zip(b.iter()).enumerate() {
            assert!(
                x == y,
                "weight {i} differs: {x:?} vs {y:?} bits {:x} vs {:x}",
                x.to_bits(),
                y.to_bits()
            );
        }
    }

    #[test]
    fn serde_roundtrip_preserves_weights() {
        let mut r = rng(17);
        let mut net = Sequential::new(vec![
            Layer::Conv(Conv2d::new(1, 2, 3, 2, 1, Init::HeNormal, &mut r)),
            Layer::BatchNorm(BatchNorm2d::new(2)),
            Layer::ReLU(ReLU::default()),
            Layer::Flatten(Flatten::default()),
            Layer::Dense(Dense::new(2 * 4 * 4, 4, Init::HeNormal, &mut r)),
        ]);
        let x = random_tensor(&mut r, (2, 1, 8, 8));
        let before = net.forward(&x, false);
        let json = serde_json::to_string(&net).unwrap();
        let mut back: Sequential = serde_json::from_str(&json).unwrap();
        let after = back.forward(&x, false);
        assert_eq!(before, after);
    }

    #[test]
    fn adam_reduces_quadratic_loss() {
        // minimise ||W x - y||^2 for a fixed x, y through the Dense layer
        let mut r = rng(18);
        let mut net = Sequential::new(vec![Layer::Dense(Dense::new(3, 2, Init::HeNormal, &mut r))]);
        let x = random_tensor(&mut r, (4, 3, 1, 1));
        let y = random_tensor(&mut r, (4, 2, 1, 1));
        let mut adam = Adam::new(0.05, 0.9, 0.999);
        let mut first = None;
        let mut last = 0.0;
        for _ in 0..200 {
            let out = net.forward(&x, true);
            let diff = &out - &y;
            last = diff.mapv(|v| v * v).sum();
            first.get_or_insert(last);
            let g = diff.mapv(|v| 2.0 * v);
            net.backward(&g);
            adam.step(net.params_mut());
        }
        assert!(last < first.unwrap() * 1e-3, "{last} vs {first:?}");
    }

    #[test]
    fn clamp_mask_semantics() {
        let x = Tensor::from_shape_fn((1, 1, 1, 4), |(_, _, _, i)| [-0.5, 0.25, 0.75, 1.5][i]);
        let (out, mask) = clamp01_with_mask(&x);
        assert_eq!(out[[0, 0, 0, 0]], 0.0);
        assert_eq!(out[[0, 0, 0, 3]], 1.0);
        assert_eq!(mask[[0, 0, 0, 0]], 0.0);
        assert_eq!(mask[[0, 0, 0, 1]], 1.0);
        assert_eq!(mask[[0, 0, 0, 2]], 1.0);
        assert_eq!(mask[[0, 0, 0, 3]], 0.0);
    }

    #[test]
    fn batchnorm_eval_uses_running_stats() {
        let mut bn = BatchNorm2d::new(1);
        bn.running_mean[0] = 0.5;
        bn.running_var[0] = 4.0;
        let x = Tensor::from_elem((1, 1, 2, 2), 2.5);
        let out = bn.forward(&x, false);
        // (2.5 - 0.5) / sqrt(4 + eps) ~= 1
        assert_abs_diff_eq!(out[[0, 0, 0, 0]], 1.0, epsilon = 1e-5);
    }
}

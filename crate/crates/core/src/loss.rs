//! Structural-similarity training losses.
//!
//! The multi-scale index compares a target `y` and a prediction `ŷ` on
//! `M + 1` resolutions obtained by repeated 2x2 average pooling. Scale `M`
//! contributes the mean of `l·c·s` over all sliding windows, every finer
//! scale `j < M` the mean of `c·s`; each mean is raised to its exponent
//! `α_j` and the factors are multiplied. With `C3 = C2 / 2` the product
//! `c·s` collapses to `(2σ_xy + C2) / (σ_x² + σ_y² + C2)`, which is what the
//! differentiable path evaluates.
//!
//! Window moments are computed with separable valid-mode filters; gradients
//! w.r.t. `ŷ` come from the transposed filters.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ops::{pool2_plane, pool2_plane_backward, pooled_extent};
use crate::tensor::{Graph, Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowKind {
    Uniform,
    Gaussian,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MsSsimConfig {
    /// `α_0 ..= α_M`; the top scale index is `alphas.len() - 1`.
    pub alphas: Vec<f64>,
    pub window: WindowKind,
    pub window_size: usize,
    pub window_stride: usize,
    /// Standard deviation of the Gaussian window, in pixels.
    pub gaussian_sigma: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
}

impl Default for MsSsimConfig {
    fn default() -> Self {
        let (c1, c2) = ssim_constants(1.0);
        Self {
            alphas: vec![0.05, 0.30, 0.65],
            window: WindowKind::Uniform,
            window_size: 8,
            window_stride: 1,
            gaussian_sigma: 1.5,
            c1,
            c2,
            c3: c2 / 2.0,
        }
    }
}

/// `C1 = (0.01 L)^2`, `C2 = (0.03 L)^2` for dynamic range `L`.
pub fn ssim_constants(dynamic_range: f64) -> (f64, f64) {
    (
        (0.01 * dynamic_range).powi(2),
        (0.03 * dynamic_range).powi(2),
    )
}

impl MsSsimConfig {
    /// Plain SSIM: one scale, exponent 1.
    pub fn single_scale() -> Self {
        Self {
            alphas: vec![1.0],
            ..Self::default()
        }
    }

    /// 11x11 Gaussian window with σ = 1.5.
    pub fn with_gaussian_window(mut self) -> Self {
        self.window = WindowKind::Gaussian;
        self.window_size = 11;
        self.gaussian_sigma = 1.5;
        self
    }

    pub fn top_scale(&self) -> usize {
        self.alphas.len().saturating_sub(1)
    }

    /// Checks the configuration alone.
    pub fn validate(&self) -> Result<()> {
        if self.alphas.is_empty() {
            return Err(Error::Config(
                "at least one scale exponent is required".into(),
            ));
        }
        if self.alphas.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
            return Err(Error::Config(format!(
                "scale exponents must be >= 0: {:?}",
                self.alphas
            )));
        }
        if self.window_size == 0 || self.window_stride == 0 {
            return Err(Error::Config(
                "window size and stride must be positive".into(),
            ));
        }
        if self.window == WindowKind::Gaussian && self.gaussian_sigma <= 0.0 {
            return Err(Error::Config("gaussian window needs sigma > 0".into()));
        }
        if !(self.c1 > 0.0 && self.c2 > 0.0) {
            return Err(Error::Config("stability constants must be positive".into()));
        }
        if (self.c3 - self.c2 / 2.0).abs() > 1e-15 * self.c2.max(1.0) {
            return Err(Error::Config(format!(
                "only C3 = C2/2 is supported (got C2={}, C3={})",
                self.c2, self.c3
            )));
        }
        Ok(())
    }

    /// Checks that the coarsest scale of an `height x width` image still fits one window.
    pub fn validate_for(&self, height: usize, width: usize) -> Result<()> {
        self.validate()?;
        let (mut h, mut w) = (height, width);
        for _ in 0..self.top_scale() {
            h = pooled_extent(h);
            w = pooled_extent(w);
        }
        if h < self.window_size || w < self.window_size {
            return Err(Error::Config(format!(
                "{height}x{width} image is {h}x{w} at scale {}, smaller than the {}x{} window",
                self.top_scale(),
                self.window_size,
                self.window_size
            )));
        }
        Ok(())
    }

    /// Normalized one-dimensional window; the 2-D window is its outer product.
    pub fn window_weights(&self) -> Vec<f64> {
        let n = self.window_size;
        match self.window {
            WindowKind::Uniform => vec![1.0 / n as f64; n],
            WindowKind::Gaussian => {
                let c = (n as f64 - 1.0) / 2.0;
                let raw: Vec<f64> = (0..n)
                    .map(|i| {
                        (-((i as f64 - c).powi(2)) / (2.0 * self.gaussian_sigma.powi(2))).exp()
                    })
                    .collect();
                let s: f64 = raw.iter().sum();
                raw.into_iter().map(|v| v / s).collect()
            }
        }
    }
}

/// Separable valid-mode filter with a stride.
struct Filter<T> {
    weights: Vec<T>,
    stride: usize,
}

impl<T: Scalar> Filter<T> {
    fn new(cfg: &MsSsimConfig) -> Self {
        Self {
            weights: cfg.window_weights().into_iter().map(T::of).collect(),
            stride: cfg.window_stride,
        }
    }

    fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let n = self.weights.len();
        ((h - n) / self.stride + 1, (w - n) / self.stride + 1)
    }

    fn apply(&self, src: &[T], h: usize, w: usize) -> Vec<T> {
        let (rows, cols) = self.out_dims(h, w);
        let s = self.stride;
        let mut tmp = vec![T::zero(); h * cols];
        for r in 0..h {
            let line = &src[r * w..(r + 1) * w];
            for j in 0..cols {
                let seg = &line[j * s..j * s + self.weights.len()];
                tmp[r * cols + j] = seg.iter().zip(&self.weights).map(|(&a, &k)| a * k).sum();
            }
        }
        let mut out = vec![T::zero(); rows * cols];
        for i in 0..rows {
            let dst = &mut out[i * cols..(i + 1) * cols];
            for (t, &k) in self.weights.iter().enumerate() {
                let src_row = &tmp[(i * s + t) * cols..(i * s + t + 1) * cols];
                for (d, &v) in dst.iter_mut().zip(src_row) {
                    *d += k * v;
                }
            }
        }
        out
    }

    fn apply_transpose(&self, g: &[T], h: usize, w: usize) -> Vec<T> {
        let (rows, cols) = self.out_dims(h, w);
        let s = self.stride;
        let mut tmp = vec![T::zero(); h * cols];
        for i in 0..rows {
            let src_row = &g[i * cols..(i + 1) * cols];
            for (t, &k) in self.weights.iter().enumerate() {
                let dst = &mut tmp[(i * s + t) * cols..(i * s + t + 1) * cols];
                for (d, &v) in dst.iter_mut().zip(src_row) {
                    *d += k * v;
                }
            }
        }
        let mut out = vec![T::zero(); h * w];
        for r in 0..h {
            let line = &mut out[r * w..(r + 1) * w];
            for j in 0..cols {
                let v = tmp[r * cols + j];
                for (d, &k) in line[j * s..j * s + self.weights.len()]
                    .iter_mut()
                    .zip(&self.weights)
                {
                    *d += k * v;
                }
            }
        }
        out
    }
}

/// Weighted first and second moments of every window.
struct Moments<T> {
    rows: usize,
    cols: usize,
    mx: Vec<T>,
    my: Vec<T>,
    exx: Vec<T>,
    eyy: Vec<T>,
    exy: Vec<T>,
}

fn moments<T: Scalar>(x: &[T], y: &[T], h: usize, w: usize, filter: &Filter<T>) -> Moments<T> {
    let (rows, cols) = filter.out_dims(h, w);
    let sq = |a: &[T], b: &[T]| -> Vec<T> { a.iter().zip(b).map(|(&p, &q)| p * q).collect() };
    Moments {
        rows,
        cols,
        mx: filter.apply(x, h, w),
        my: filter.apply(y, h, w),
        exx: filter.apply(&sq(x, x), h, w),
        eyy: filter.apply(&sq(y, y), h, w),
        exy: filter.apply(&sq(x, y), h, w),
    }
}

/// Per-window statistics of a target/prediction pair.
#[derive(Clone, Debug)]
pub struct WindowStats<T> {
    pub rows: usize,
    pub cols: usize,
    pub mu_y: Vec<T>,
    pub mu_pred: Vec<T>,
    pub sigma_y: Vec<T>,
    pub sigma_pred: Vec<T>,
    pub cov: Vec<T>,
}

fn plane<T: Scalar>(t: &Tensor<T>) -> Result<(usize, usize)> {
    let s = t.shape();
    match s {
        [h, w] | [1, h, w] | [1, 1, h, w] => Ok((*h, *w)),
        _ => Err(Error::shape("expected a single image plane", s, &[0, 0])),
    }
}

fn check_pair<T: Scalar>(y: &Tensor<T>, pred: &Tensor<T>) -> Result<(usize, usize)> {
    let dims = plane(y)?;
    if plane(pred)? != dims {
        return Err(Error::shape("image pair", y.shape(), pred.shape()));
    }
    let negative = |t: &Tensor<T>| t.data().iter().any(|v| !(*v >= T::zero()));
    if negative(y) || negative(pred) {
        return Err(Error::Input(
            "images must be non-negative and finite".into(),
        ));
    }
    Ok(dims)
}

/// Windowed means, standard deviations and covariance (valid windows only).
pub fn window_stats<T: Scalar>(
    y: &Tensor<T>,
    pred: &Tensor<T>,
    cfg: &MsSsimConfig,
) -> Result<WindowStats<T>> {
    cfg.validate()?;
    let (h, w) = check_pair(y, pred)?;
    if h < cfg.window_size || w < cfg.window_size {
        return Err(Error::Config(format!(
            "{h}x{w} image is smaller than the {0}x{0} window",
            cfg.window_size
        )));
    }
    let m = moments(y.data(), pred.data(), h, w, &Filter::new(cfg));
    let std = |e: &[T], mu: &[T]| -> Vec<T> {
        e.iter()
            .zip(mu)
            .map(|(&e, &m)| (e - m * m).max(T::zero()).sqrt())
            .collect()
    };
    Ok(WindowStats {
        rows: m.rows,
        cols: m.cols,
        sigma_y: std(&m.exx, &m.mx),
        sigma_pred: std(&m.eyy, &m.my),
        cov: m
            .exy
            .iter()
            .zip(m.mx.iter().zip(&m.my))
            .map(|(&e, (&a, &b))| e - a * b)
            .collect(),
        mu_y: m.mx,
        mu_pred: m.my,
    })
}

/// Luminance, contrast and structure terms of each window.
#[derive(Clone, Debug)]
pub struct Components<T> {
    pub luminance: Vec<T>,
    pub contrast: Vec<T>,
    pub structure: Vec<T>,
}

pub fn ssim_components<T: Scalar>(stats: &WindowStats<T>, cfg: &MsSsimConfig) -> Components<T> {
    let (c1, c2, c3) = (T::of(cfg.c1), T::of(cfg.c2), T::of(cfg.c3));
    let two = T::of(2.0);
    let n = stats.mu_y.len();
    let mut out = Components {
        luminance: Vec::with_capacity(n),
        contrast: Vec::with_capacity(n),
        structure: Vec::with_capacity(n),
    };
    for i in 0..n {
        let (mx, my) = (stats.mu_y[i], stats.mu_pred[i]);
        let (sx, sy) = (stats.sigma_y[i], stats.sigma_pred[i]);
        out.luminance
            .push((two * mx * my + c1) / (mx * mx + my * my + c1));
        out.contrast
            .push((two * sx * sy + c2) / (sx * sx + sy * sy + c2));
        out.structure.push((stats.cov[i] + c3) / (sx * sy + c3));
    }
    out
}

/// Mean over windows of `c·s` (or `l·c·s`) and, optionally, its gradient w.r.t. the prediction.
fn scale_term<T: Scalar>(
    x: &[T],
    y: &[T],
    h: usize,
    w: usize,
    cfg: &MsSsimConfig,
    luminance: bool,
    want_grad: bool,
) -> (T, Option<Vec<T>>) {
    let filter = Filter::new(cfg);
    let m = moments(x, y, h, w, &filter);
    let n = m.rows * m.cols;
    let inv_n = T::one() / T::of(n as f64);
    let (c1, c2) = (T::of(cfg.c1), T::of(cfg.c2));
    let two = T::of(2.0);
    let mut total = T::zero();
    // dQ/dμ_ŷ, dQ/dE[ŷ²], dQ/dE[yŷ] per window, already divided by the window count
    let (mut ga, mut gb, mut gc) = if want_grad {
        (vec![T::zero(); n], vec![T::zero(); n], vec![T::zero(); n])
    } else {
        (Vec::new(), Vec::new(), Vec::new())
    };
    for i in 0..n {
        let (mx, my) = (m.mx[i], m.my[i]);
        let vx = m.exx[i] - mx * mx;
        let vy = m.eyy[i] - my * my;
        let cxy = m.exy[i] - mx * my;
        let num = two * cxy + c2;
        let den = vx + vy + c2;
        let cs = num / den;
        let (lum, dl_dmy) = if luminance {
            let nl = two * mx * my + c1;
            let dl = mx * mx + my * my + c1;
            (nl / dl, (two * mx) / dl - nl * two * my / (dl * dl))
        } else {
            (T::one(), T::zero())
        };
        total += lum * cs;
        if want_grad {
            let dcs_deyy = -num / (den * den);
            let dcs_dexy = two / den;
            let dcs_dmy = -two * mx / den + two * my * num / (den * den);
            ga[i] = (dl_dmy * cs + lum * dcs_dmy) * inv_n;
            gb[i] = lum * dcs_deyy * inv_n;
            gc[i] = lum * dcs_dexy * inv_n;
        }
    }
    let mean = total * inv_n;
    if !want_grad {
        return (mean, None);
    }
    let ta = filter.apply_transpose(&ga, h, w);
    let tb = filter.apply_transpose(&gb, h, w);
    let tc = filter.apply_transpose(&gc, h, w);
    let two = T::of(2.0);
    let grad = (0..h * w)
        .map(|p| ta[p] + two * y[p] * tb[p] + x[p] * tc[p])
        .collect();
    (mean, Some(grad))
}

fn ms_ssim_impl<T: Scalar>(
    y: &[T],
    pred: &[T],
    h: usize,
    w: usize,
    cfg: &MsSsimConfig,
    want_grad: bool,
) -> (T, Option<Vec<T>>) {
    let top = cfg.top_scale();
    let mut dims = vec![(h, w)];
    let mut ys = vec![y.to_vec()];
    let mut ps = vec![pred.to_vec()];
    for j in 1..=top {
        let (ph, pw) = dims[j - 1];
        let (nh, nw) = (pooled_extent(ph), pooled_extent(pw));
        let mut ny = vec![T::zero(); nh * nw];
        let mut np = vec![T::zero(); nh * nw];
        pool2_plane(&ys[j - 1], ph, pw, &mut ny);
        pool2_plane(&ps[j - 1], ph, pw, &mut np);
        dims.push((nh, nw));
        ys.push(ny);
        ps.push(np);
    }
    let terms: Vec<(T, Option<Vec<T>>)> = (0..=top)
        .map(|j| {
            let (sh, sw) = dims[j];
            scale_term(&ys[j], &ps[j], sh, sw, cfg, j == top, want_grad)
        })
        .collect();
    let factors: Vec<T> = terms
        .iter()
        .zip(&cfg.alphas)
        .map(|((t, _), &a)| {
            if a == 0.0 {
                T::one()
            } else {
                t.max(T::zero()).powf(T::of(a))
            }
        })
        .collect();
    let h_val: T = factors.iter().copied().fold(T::one(), |acc, f| acc * f);
    if !want_grad {
        return (h_val, None);
    }
    // d h / d term_j, zero where the term was clamped
    let dterm: Vec<T> = (0..=top)
        .map(|j| {
            let (t, a) = (terms[j].0, cfg.alphas[j]);
            if a == 0.0 || t <= T::zero() {
                return T::zero();
            }
            let others = (0..=top)
                .filter(|&k| k != j)
                .fold(T::one(), |acc, k| acc * factors[k]);
            T::of(a) * t.powf(T::of(a - 1.0)) * others
        })
        .collect();
    let mut grad: Option<Vec<T>> = None;
    for j in (0..=top).rev() {
        let (sh, sw) = dims[j];
        let mut g = vec![T::zero(); sh * sw];
        if let Some(coarse) = grad.take() {
            pool2_plane_backward(&coarse, sh, sw, &mut g);
        }
        if let Some(gt) = &terms[j].1 {
            for (d, &v) in g.iter_mut().zip(gt) {
                *d += dterm[j] * v;
            }
        }
        grad = Some(g);
    }
    (h_val, grad)
}

/// Multi-scale structural similarity `h ∈ [0, 1]` of a target/prediction pair.
pub fn ms_ssim<T: Scalar>(y: &Tensor<T>, pred: &Tensor<T>, cfg: &MsSsimConfig) -> Result<T> {
    let (h, w) = check_pair(y, pred)?;
    cfg.validate_for(h, w)?;
    Ok(ms_ssim_impl(y.data(), pred.data(), h, w, cfg, false).0)
}

/// [`ms_ssim`] together with `∂h/∂ŷ`.
pub fn ms_ssim_with_grad<T: Scalar>(
    y: &Tensor<T>,
    pred: &Tensor<T>,
    cfg: &MsSsimConfig,
) -> Result<(T, Tensor<T>)> {
    let (h, w) = check_pair(y, pred)?;
    cfg.validate_for(h, w)?;
    let (v, g) = ms_ssim_impl(y.data(), pred.data(), h, w, cfg, true);
    Ok((
        v,
        Tensor::new(pred.shape(), g.expect("gradient requested"))?,
    ))
}

pub fn single_scale_ssim<T: Scalar>(y: &Tensor<T>, pred: &Tensor<T>) -> Result<T> {
    ms_ssim(y, pred, &MsSsimConfig::single_scale())
}

pub fn mse_loss<T: Scalar>(y: &Tensor<T>, pred: &Tensor<T>) -> Result<T> {
    if y.shape() != pred.shape() {
        return Err(Error::shape("mse", y.shape(), pred.shape()));
    }
    if y.numel() == 0 {
        return Err(Error::Input("empty images".into()));
    }
    let s: f64 = y
        .data()
        .iter()
        .zip(pred.data())
        .map(|(&a, &b)| (b - a).as_f64().powi(2))
        .sum();
    Ok(T::of(s / y.numel() as f64))
}

/// Training objective over a batch of `[B, 1, H, W]` (or `[B, H, W]`) images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Loss {
    /// `mean_i (1 - h(y_i, ŷ_i))`; a single-scale config gives plain SSIM.
    MsSsim(MsSsimConfig),
    Mse,
}

fn batch_planes<T: Scalar>(y: &Tensor<T>, pred: &Tensor<T>) -> Result<(usize, usize, usize)> {
    if y.shape() != pred.shape() {
        return Err(Error::shape("batch", y.shape(), pred.shape()));
    }
    let (b, h, w) = match *y.shape() {
        [b, 1, h, w] | [b, h, w] => (b, h, w),
        _ => {
            return Err(Error::shape(
                "expected [B, 1, H, W] images",
                y.shape(),
                &[0, 1, 0, 0],
            ))
        }
    };
    if b == 0 {
        return Err(Error::Input("empty batch".into()));
    }
    Ok((b, h, w))
}

fn per_image<T: Scalar, R: Send>(
    y: &Tensor<T>,
    pred: &Tensor<T>,
    f: impl Fn(Tensor<T>, Tensor<T>) -> Result<R> + Sync,
) -> Result<Vec<R>> {
    let (_, h, w) = batch_planes(y, pred)?;
    y.data()
        .par_chunks(h * w)
        .zip(pred.data().par_chunks(h * w))
        .map(|(a, b)| {
            f(
                Tensor::new([h, w], a.to_vec())?,
                Tensor::new([h, w], b.to_vec())?,
            )
        })
        .collect()
}

/// Per-image `h` values of a batch.
pub fn batch_ms_ssim<T: Scalar>(
    y: &Tensor<T>,
    pred: &Tensor<T>,
    cfg: &MsSsimConfig,
) -> Result<Vec<T>> {
    per_image(y, pred, |a, b| ms_ssim(&a, &b, cfg))
}

impl Loss {
    /// `ms_ssim` (default exponents), `ssim` (single scale) or `mse`.
    pub fn from_kind(kind: &str) -> Result<Self> {
        match kind {
            "ms_ssim" => Ok(Loss::MsSsim(MsSsimConfig::default())),
            "ssim" => Ok(Loss::MsSsim(MsSsimConfig::single_scale())),
            "mse" => Ok(Loss::Mse),
            other => Err(Error::Input(format!(
                "unknown loss `{other}` (expected ms_ssim, ssim or mse)"
            ))),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Loss::MsSsim(cfg) if cfg.alphas.len() == 1 => "ssim",
            Loss::MsSsim(_) => "ms_ssim",
            Loss::Mse => "mse",
        }
    }

    pub fn value<T: Scalar>(&self, y: &Tensor<T>, pred: &Tensor<T>) -> Result<T> {
        match self {
            Loss::Mse => {
                batch_planes(y, pred)?;
                mse_loss(y, pred)
            }
            Loss::MsSsim(cfg) => {
                let hs = batch_ms_ssim(y, pred, cfg)?;
                let n = T::of(hs.len() as f64);
                Ok(hs.into_iter().map(|h| T::one() - h).sum::<T>() / n)
            }
        }
    }

    pub fn value_and_grad<T: Scalar>(
        &self,
        y: &Tensor<T>,
        pred: &Tensor<T>,
    ) -> Result<(T, Tensor<T>)> {
        let (b, _, _) = batch_planes(y, pred)?;
        match self {
            Loss::Mse => {
                let v = mse_loss(y, pred)?;
                let scale = T::of(2.0 / y.numel() as f64);
                let g = y
                    .data()
                    .iter()
                    .zip(pred.data())
                    .map(|(&a, &p)| scale * (p - a))
                    .collect();
                Ok((v, Tensor::new(pred.shape(), g)?))
            }
            Loss::MsSsim(cfg) => {
                let parts = per_image(y, pred, |a, p| ms_ssim_with_grad(&a, &p, cfg))?;
                let inv_b = T::one() / T::of(b as f64);
                let mut value = T::zero();
                let mut grad = Vec::with_capacity(pred.numel());
                for (h, g) in parts {
                    value += T::one() - h;
                    grad.extend(g.data().iter().map(|&v| -v * inv_b));
                }
                Ok((value / T::of(b as f64), Tensor::new(pred.shape(), grad)?))
            }
        }
    }

    /// Records the loss of `pred` against constant `targets` on the tape.
    pub fn record<T: Scalar>(
        &self,
        graph: &mut Graph<T>,
        pred: Var,
        targets: &Tensor<T>,
    ) -> Result<Var> {
        let (v, g) = self.value_and_grad(targets, graph.value(pred))?;
        graph.precomputed(pred, v, g)
    }
}

/// `(1 / N_b) Σ (1 - h_i)` from precomputed similarity values.
pub fn batch_loss_from_similarities<T: Scalar>(h: &[T]) -> Result<T> {
    if h.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    Ok(h.iter().map(|&v| T::one() - v).sum::<T>() / T::of(h.len() as f64))
}

//! Forward and gradient kernels. Every forward kernel has a matching
//! `*_backward` that maps the output gradient to input/parameter gradients.

use serde::{Deserialize, Serialize};

use super::{gemm, Scalar, Tensor};
use crate::error::{Error, Result};

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.2;

/// `out[b, j] = sum_i input[b, i] * weight[i, j] + bias[j]`.
pub fn dense<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (batch, m) = input.dims2()?;
    let (m2, n) = weight.dims2()?;
    if m != m2 {
        return Err(Error::shape("dense", input.shape(), weight.shape()));
    }
    if bias.shape() != [n] {
        return Err(Error::shape("dense bias", weight.shape(), bias.shape()));
    }
    let mut out = Vec::with_capacity(batch * n);
    for _ in 0..batch {
        out.extend_from_slice(bias.data());
    }
    let mn = (m as isize, 1);
    gemm(
        batch,
        m,
        n,
        T::one(),
        input.data(),
        mn,
        weight.data(),
        (n as isize, 1),
        T::one(),
        &mut out,
        (n as isize, 1),
    );
    Tensor::new([batch, n], out)
}

/// Returns `(d_input, d_weight, d_bias)`.
pub fn dense_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (batch, m) = input.dims2()?;
    let (_, n) = weight.dims2()?;
    if grad_out.shape() != [batch, n] {
        return Err(Error::shape(
            "dense backward",
            grad_out.shape(),
            &[batch, n],
        ));
    }
    let g = grad_out.data();
    let mut dx = vec![T::zero(); batch * m];
    gemm(
        batch,
        n,
        m,
        T::one(),
        g,
        (n as isize, 1),
        weight.data(),
        (1, n as isize),
        T::zero(),
        &mut dx,
        (m as isize, 1),
    );
    let mut dw = vec![T::zero(); m * n];
    gemm(
        m,
        batch,
        n,
        T::one(),
        input.data(),
        (1, m as isize),
        g,
        (n as isize, 1),
        T::zero(),
        &mut dw,
        (n as isize, 1),
    );
    let mut db = vec![T::zero(); n];
    for row in g.chunks_exact(n) {
        for (d, &v) in db.iter_mut().zip(row) {
            *d += v;
        }
    }
    Ok((
        Tensor::new([batch, m], dx)?,
        Tensor::new([m, n], dw)?,
        Tensor::new([n], db)?,
    ))
}

/// Geometry of one transposed-convolution layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvTransposeSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub output_padding: (usize, usize),
}

impl ConvTransposeSpec {
    /// Stride 1, no padding.
    pub fn new(in_channels: usize, out_channels: usize, kernel: (usize, usize)) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride: (1, 1),
            padding: (0, 0),
            output_padding: (0, 0),
        }
    }

    pub fn with_stride(mut self, stride: (usize, usize)) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_padding(mut self, padding: (usize, usize)) -> Self {
        self.padding = padding;
        self
    }

    pub fn with_output_padding(mut self, output_padding: (usize, usize)) -> Self {
        self.output_padding = output_padding;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = self.in_channels > 0
            && self.out_channels > 0
            && self.kernel.0 > 0
            && self.kernel.1 > 0
            && self.stride.0 > 0
            && self.stride.1 > 0;
        if !positive {
            return Err(Error::Config(format!("non-positive extent in {self:?}")));
        }
        if self.output_padding.0 >= self.stride.0 || self.output_padding.1 >= self.stride.1 {
            return Err(Error::Config(format!(
                "output padding {:?} must be smaller than stride {:?}",
                self.output_padding, self.stride
            )));
        }
        Ok(())
    }

    /// `(in - 1) * stride - 2 * pad + kernel + output_pad` per axis.
    pub fn output_size(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        self.validate()?;
        let axis = |n: usize, s: usize, p: usize, k: usize, op: usize| -> isize {
            (n as isize - 1) * s as isize - 2 * p as isize + k as isize + op as isize
        };
        let ho = axis(
            height,
            self.stride.0,
            self.padding.0,
            self.kernel.0,
            self.output_padding.0,
        );
        let wo = axis(
            width,
            self.stride.1,
            self.padding.1,
            self.kernel.1,
            self.output_padding.1,
        );
        if height == 0 || width == 0 || ho <= 0 || wo <= 0 {
            return Err(Error::Config(format!(
                "transposed convolution {self:?} on {height}x{width} yields non-positive output {ho}x{wo}"
            )));
        }
        Ok((ho as usize, wo as usize))
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.in_channels,
            self.out_channels,
            self.kernel.0,
            self.kernel.1,
        ]
    }

    pub fn param_count(&self) -> usize {
        self.weight_shape().iter().product::<usize>() + self.out_channels
    }
}

struct Geometry {
    cin: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
}

impl Geometry {
    fn new(spec: &ConvTransposeSpec, h: usize, w: usize) -> Result<Self> {
        let (ho, wo) = spec.output_size(h, w)?;
        Ok(Self {
            cin: spec.in_channels,
            cout: spec.out_channels,
            kh: spec.kernel.0,
            kw: spec.kernel.1,
            h,
            w,
            ho,
            wo,
            sh: spec.stride.0,
            sw: spec.stride.1,
            ph: spec.padding.0,
            pw: spec.padding.1,
        })
    }

    fn kernel_rows(&self) -> usize {
        self.cout * self.kh * self.kw
    }

    /// Input column range whose scatter target `ix * sw + kx - pw` lands inside the output.
    fn col_range(&self, kx: usize) -> (usize, usize) {
        let lo = if kx >= self.pw {
            0
        } else {
            (self.pw - kx).div_ceil(self.sw)
        };
        let hi = if self.wo + self.pw > kx {
            ((self.wo - 1 + self.pw - kx) / self.sw + 1).min(self.w)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    /// Visits every (kernel row, input pixel row, output row offset, input col range) pairing.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize, usize, (usize, usize))) {
        for co in 0..self.cout {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let r = (co * self.kh + ky) * self.kw + kx;
                    let cols = self.col_range(kx);
                    for iy in 0..self.h {
                        let oy = (iy * self.sh + ky) as isize - self.ph as isize;
                        if oy < 0 || oy >= self.ho as isize {
                            continue;
                        }
                        let out_base = co * self.ho * self.wo + oy as usize * self.wo + kx;
                        f(r, iy, out_base, kx, cols);
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, cols: &[T], out: &mut [T]) {
        let hw = self.h * self.w;
        let (sw, pw, w) = (self.sw, self.pw, self.w);
        self.for_each_tap(|r, iy, out_base, _kx, (lo, hi)| {
            let src = &cols[r * hw + iy * w..r * hw + iy * w + w];
            for ix in lo..hi {
                out[out_base + ix * sw - pw] += src[ix];
            }
        });
    }

    fn im2col<T: Scalar>(&self, grad_out: &[T], cols: &mut [T]) {
        cols.fill(T::zero());
        let hw = self.h * self.w;
        let (sw, pw, w) = (self.sw, self.pw, self.w);
        self.for_each_tap(|r, iy, out_base, _kx, (lo, hi)| {
            let dst = &mut cols[r * hw + iy * w..r * hw + iy * w + w];
            for ix in lo..hi {
                dst[ix] = grad_out[out_base + ix * sw - pw];
            }
        });
    }
}

fn check_conv_args<T: Scalar>(
    input: &Tensor<T>,
    spec: &ConvTransposeSpec,
    weight: &Tensor<T>,
) -> Result<(usize, usize, usize, usize)> {
    spec.validate()?;
    let (b, c, h, w) = input.dims4()?;
    if c != spec.in_channels {
        return Err(Error::shape(
            "conv_transpose2d input channels",
            input.shape(),
            &spec.weight_shape(),
        ));
    }
    if weight.shape() != spec.weight_shape() {
        return Err(Error::shape(
            "conv_transpose2d weight",
            weight.shape(),
            &spec.weight_shape(),
        ));
    }
    Ok((b, c, h, w))
}

/// Scatter-accumulate transposed convolution. `weight` is `[Cin, Cout, kh, kw]`.
pub fn conv_transpose2d<T: Scalar>(
    input: &Tensor<T>,
    spec: &ConvTransposeSpec,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (batch, _, h, w) = check_conv_args(input, spec, weight)?;
    if bias.shape() != [spec.out_channels] {
        return Err(Error::shape(
            "conv_transpose2d bias",
            bias.shape(),
            &[spec.out_channels],
        ));
    }
    let g = Geometry::new(spec, h, w)?;
    let (hw, kk, out_plane) = (h * w, g.kernel_rows(), g.ho * g.wo);
    let mut out = vec![T::zero(); batch * g.cout * out_plane];
    let mut cols = vec![T::zero(); kk * hw];
    for (xb, ob) in input
        .data()
        .chunks_exact(g.cin * hw)
        .zip(out.chunks_exact_mut(g.cout * out_plane))
    {
        gemm(
            kk,
            g.cin,
            hw,
            T::one(),
            weight.data(),
            (1, kk as isize),
            xb,
            (hw as isize, 1),
            T::zero(),
            &mut cols,
            (hw as isize, 1),
        );
        g.col2im(&cols, ob);
        for (plane, &b) in ob.chunks_exact_mut(out_plane).zip(bias.data()) {
            plane.iter_mut().for_each(|v| *v += b);
        }
    }
    Tensor::new([batch, g.cout, g.ho, g.wo], out)
}

/// Gradients of [`conv_transpose2d`]. The input gradient is a forward
/// convolution of `grad_out` with the same kernel. Parameter gradients are
/// skipped (returned as `None`) when `want_params` is false.
#[allow(clippy::type_complexity)]
pub fn conv_transpose2d_backward<T: Scalar>(
    input: &Tensor<T>,
    spec: &ConvTransposeSpec,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    want_input: bool,
    want_params: bool,
) -> Result<(Option<Tensor<T>>, Option<(Tensor<T>, Tensor<T>)>)> {
    let (batch, _, h, w) = check_conv_args(input, spec, weight)?;
    let g = Geometry::new(spec, h, w)?;
    if grad_out.shape() != [batch, g.cout, g.ho, g.wo] {
        return Err(Error::shape(
            "conv_transpose2d backward",
            grad_out.shape(),
            &[batch, g.cout, g.ho, g.wo],
        ));
    }
    let (hw, kk, out_plane) = (h * w, g.kernel_rows(), g.ho * g.wo);
    let mut dx = want_input.then(|| vec![T::zero(); input.numel()]);
    let mut dw = want_params.then(|| vec![T::zero(); weight.numel()]);
    let mut db = vec![T::zero(); g.cout];
    let mut cols = vec![T::zero(); kk * hw];
    for b in 0..batch {
        let gb = &grad_out.data()[b * g.cout * out_plane..(b + 1) * g.cout * out_plane];
        g.im2col(gb, &mut cols);
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[b * g.cin * hw..(b + 1) * g.cin * hw];
            gemm(
                g.cin,
                kk,
                hw,
                T::one(),
                weight.data(),
                (kk as isize, 1),
                &cols,
                (hw as isize, 1),
                T::zero(),
                dxb,
                (hw as isize, 1),
            );
        }
        if let Some(dw) = dw.as_mut() {
            let xb = &input.data()[b * g.cin * hw..(b + 1) * g.cin * hw];
            gemm(
                g.cin,
                hw,
                kk,
                T::one(),
                xb,
                (hw as isize, 1),
                &cols,
                (1, hw as isize),
                T::one(),
                dw,
                (kk as isize, 1),
            );
            for (d, plane) in db.iter_mut().zip(gb.chunks_exact(out_plane)) {
                *d += plane.iter().copied().sum::<T>();
            }
        }
    }
    let dx = dx.map(|d| Tensor::new(input.shape(), d)).transpose()?;
    let params = match dw {
        Some(dw) => Some((Tensor::new(weight.shape(), dw)?, Tensor::new([g.cout], db)?)),
        None => None,
    };
    Ok((dx, params))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNormConfig {
    pub eps: f64,
    /// Weight kept by the running statistics on each update.
    pub momentum: f64,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            momentum: 0.99,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<T> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

impl<T: Scalar> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Infer,
}

/// Values the batch-norm gradient needs from the forward pass.
#[derive(Clone, Debug)]
pub struct BatchNormCache<T> {
    x_hat: Vec<T>,
    inv_std: Vec<T>,
    mode: Mode,
    shape: (usize, usize, usize),
}

fn check_bn_args<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<(usize, usize, usize)> {
    let (b, c, h, w) = x.dims4()?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape("batch_norm affine", gamma.shape(), &[c]));
    }
    Ok((b, c, h * w))
}

fn bn_apply<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mean: &[f64],
    inv_std: Vec<T>,
    mode: Mode,
    (b, c, hw): (usize, usize, usize),
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    let mut x_hat = vec![T::zero(); x.numel()];
    let mut out = vec![T::zero(); x.numel()];
    for bi in 0..b {
        for ci in 0..c {
            let off = (bi * c + ci) * hw;
            let (m, s) = (T::of(mean[ci]), inv_std[ci]);
            let (gm, bt) = (gamma.data()[ci], beta.data()[ci]);
            for i in off..off + hw {
                let xh = (x.data()[i] - m) * s;
                x_hat[i] = xh;
                out[i] = gm * xh + bt;
            }
        }
    }
    let cache = BatchNormCache {
        x_hat,
        inv_std,
        mode,
        shape: (b, c, hw),
    };
    Ok((Tensor::new(x.shape(), out)?, cache))
}

/// Normalizes each channel by its batch mean and (biased) variance, then
/// blends those statistics into `state`.
pub fn batch_norm_train<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    state: &mut BatchNormState<T>,
    cfg: &BatchNormConfig,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    let dims @ (b, c, hw) = check_bn_args(x, gamma, beta)?;
    if b < 2 {
        return Err(Error::BatchTooSmall(b));
    }
    let n = (b * hw) as f64;
    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    for (i, plane) in x.data().chunks_exact(hw).enumerate() {
        mean[i % c] += plane.iter().map(|v| v.as_f64()).sum::<f64>();
    }
    mean.iter_mut().for_each(|m| *m /= n);
    for (i, plane) in x.data().chunks_exact(hw).enumerate() {
        let m = mean[i % c];
        var[i % c] += plane.iter().map(|v| (v.as_f64() - m).powi(2)).sum::<f64>();
    }
    var.iter_mut().for_each(|v| *v /= n);
    let inv_std = var
        .iter()
        .map(|v| T::of(1.0 / (v + cfg.eps).sqrt()))
        .collect();
    let k = cfg.momentum;
    for ci in 0..c {
        let rm = &mut state.running_mean[ci];
        *rm = T::of(k * rm.as_f64() + (1.0 - k) * mean[ci]);
        let rv = &mut state.running_var[ci];
        *rv = T::of(k * rv.as_f64() + (1.0 - k) * var[ci]);
    }
    bn_apply(x, gamma, beta, &mean, inv_std, Mode::Train, dims)
}

/// Normalizes with the running statistics; per-sample outputs do not depend on the batch.
pub fn batch_norm_infer<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    state: &BatchNormState<T>,
    cfg: &BatchNormConfig,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    let dims @ (_, c, _) = check_bn_args(x, gamma, beta)?;
    if state.running_mean.len() != c {
        return Err(Error::shape(
            "batch_norm state",
            &[state.running_mean.len()],
            &[c],
        ));
    }
    let mean: Vec<f64> = state.running_mean.iter().map(|v| v.as_f64()).collect();
    let inv_std = state
        .running_var
        .iter()
        .map(|v| T::of(1.0 / (v.as_f64() + cfg.eps).sqrt()))
        .collect();
    bn_apply(x, gamma, beta, &mean, inv_std, Mode::Infer, dims)
}

/// Returns `(d_input, d_gamma, d_beta)`.
pub fn batch_norm_backward<T: Scalar>(
    cache: &BatchNormCache<T>,
    gamma: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (b, c, hw) = cache.shape;
    if grad_out.numel() != cache.x_hat.len() {
        return Err(Error::shape(
            "batch_norm backward",
            grad_out.shape(),
            &[b, c, hw],
        ));
    }
    let g = grad_out.data();
    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];
    for (i, (gp, xp)) in g
        .chunks_exact(hw)
        .zip(cache.x_hat.chunks_exact(hw))
        .enumerate()
    {
        for (&gv, &xv) in gp.iter().zip(xp) {
            dbeta[i % c] += gv.as_f64();
            dgamma[i % c] += (gv * xv).as_f64();
        }
    }
    let mut dx = vec![T::zero(); g.len()];
    let n = (b * hw) as f64;
    for (i, (dxp, (gp, xp))) in dx
        .chunks_exact_mut(hw)
        .zip(g.chunks_exact(hw).zip(cache.x_hat.chunks_exact(hw)))
        .enumerate()
    {
        let ci = i % c;
        let scale = gamma.data()[ci] * cache.inv_std[ci];
        match cache.mode {
            Mode::Infer => {
                for (d, &gv) in dxp.iter_mut().zip(gp) {
                    *d = gv * scale;
                }
            }
            Mode::Train => {
                // dx = gamma * inv_std / n * (n g - sum g - x_hat * sum(g x_hat))
                let mean_g = T::of(dbeta[ci] / n);
                let mean_gx = T::of(dgamma[ci] / n);
                for ((d, &gv), &xv) in dxp.iter_mut().zip(gp).zip(xp) {
                    *d = scale * (gv - mean_g - xv * mean_gx);
                }
            }
        }
    }
    let to_t = |v: Vec<f64>| Tensor::new([c], v.into_iter().map(T::of).collect());
    Ok((
        Tensor::new(grad_out.shape(), dx)?,
        to_t(dgamma)?,
        to_t(dbeta)?,
    ))
}

pub fn leaky_relu<T: Scalar>(x: &Tensor<T>, slope: T) -> Tensor<T> {
    x.map(|v| if v >= T::zero() { v } else { slope * v })
}

pub fn leaky_relu_backward<T: Scalar>(x: &Tensor<T>, slope: T, grad_out: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v >= T::zero() { g } else { slope * g })
        .collect();
    Tensor {
        shape: x.shape().to_vec(),
        data,
    }
}

/// Logistic function, kept strictly inside (0, 1) even where the exact
/// value rounds to an endpoint in the working precision.
pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let lo = T::min_positive_value();
    let hi = T::one() - T::epsilon() / T::of(2.0);
    x.map(|v| {
        let s = if v >= T::zero() {
            T::one() / (T::one() + (-v).exp())
        } else {
            let e = v.exp();
            e / (T::one() + e)
        };
        s.max(lo).min(hi)
    })
}

/// Gradient of [`sigmoid`] expressed through its output `y`.
pub fn sigmoid_backward<T: Scalar>(y: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let data = y
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&s, &g)| g * s * (T::one() - s))
        .collect();
    Tensor {
        shape: y.shape().to_vec(),
        data,
    }
}

/// Output of [`avg_pool2`]; records whether a trailing row/column was replicated.
#[derive(Clone, Debug)]
pub struct Pooled<T> {
    pub tensor: Tensor<T>,
    pub padded_rows: bool,
    pub padded_cols: bool,
}

pub(crate) fn pooled_extent(n: usize) -> usize {
    n.div_ceil(2)
}

/// 2x2 block mean of one `h x w` plane. Odd extents replicate the last row/column.
pub(crate) fn pool2_plane<T: Scalar>(src: &[T], h: usize, w: usize, dst: &mut [T]) {
    let (ho, wo) = (pooled_extent(h), pooled_extent(w));
    let quarter = T::of(0.25);
    for i in 0..ho {
        let r0 = 2 * i;
        let r1 = (r0 + 1).min(h - 1);
        for j in 0..wo {
            let c0 = 2 * j;
            let c1 = (c0 + 1).min(w - 1);
            dst[i * wo + j] = quarter
                * (src[r0 * w + c0] + src[r0 * w + c1] + src[r1 * w + c0] + src[r1 * w + c1]);
        }
    }
}

/// Accumulates the gradient of [`pool2_plane`] into `grad_src`.
pub(crate) fn pool2_plane_backward<T: Scalar>(
    grad_dst: &[T],
    h: usize,
    w: usize,
    grad_src: &mut [T],
) {
    let (ho, wo) = (pooled_extent(h), pooled_extent(w));
    let quarter = T::of(0.25);
    for i in 0..ho {
        let r0 = 2 * i;
        let r1 = (r0 + 1).min(h - 1);
        for j in 0..wo {
            let c0 = 2 * j;
            let c1 = (c0 + 1).min(w - 1);
            let g = quarter * grad_dst[i * wo + j];
            grad_src[r0 * w + c0] += g;
            grad_src[r0 * w + c1] += g;
            grad_src[r1 * w + c0] += g;
            grad_src[r1 * w + c1] += g;
        }
    }
}

fn plane_dims<T: Scalar>(x: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let s = x.shape();
    if s.len() < 2 || s[s.len() - 1] == 0 || s[s.len() - 2] == 0 {
        return Err(Error::shape(
            "avg_pool2 needs a non-empty rank >= 2 tensor",
            s,
            &[0, 0],
        ));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    Ok((x.numel() / (h * w), h, w))
}

/// Non-overlapping 2x2 average pooling over the two trailing axes.
pub fn avg_pool2<T: Scalar>(x: &Tensor<T>) -> Result<Pooled<T>> {
    let (planes, h, w) = plane_dims(x)?;
    let (ho, wo) = (pooled_extent(h), pooled_extent(w));
    let mut out = vec![T::zero(); planes * ho * wo];
    for (src, dst) in x
        .data()
        .chunks_exact(h * w)
        .zip(out.chunks_exact_mut(ho * wo))
    {
        pool2_plane(src, h, w, dst);
    }
    let mut shape = x.shape().to_vec();
    let r = shape.len();
    shape[r - 2] = ho;
    shape[r - 1] = wo;
    Ok(Pooled {
        tensor: Tensor::new(shape, out)?,
        padded_rows: h % 2 == 1,
        padded_cols: w % 2 == 1,
    })
}

pub fn avg_pool2_backward<T: Scalar>(
    input_shape: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let proto = Tensor::<T>::zeros(input_shape);
    let (planes, h, w) = plane_dims(&proto)?;
    let (ho, wo) = (pooled_extent(h), pooled_extent(w));
    if grad_out.numel() != planes * ho * wo {
        return Err(Error::shape(
            "avg_pool2 backward",
            grad_out.shape(),
            input_shape,
        ));
    }
    let mut dx = proto;
    for (g, d) in grad_out
        .data()
        .chunks_exact(ho * wo)
        .zip(dx.data_mut().chunks_exact_mut(h * w))
    {
        pool2_plane_backward(g, h, w, d);
    }
    Ok(dx)
}

//! Reference forward/backward kernels over plain tensors.
//!
//! The autodiff graph calls into these; they are also usable directly for
//! non-differentiable work such as target resizing.

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Element, Tensor};

fn out_extent(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    if padded < k {
        None
    } else {
        Some((padded - k) / stride + 1)
    }
}

/// Geometry of one 2-d convolution.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(
        input: &[usize],
        kernel: &[usize],
        bias: Option<&[usize]>,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let (batch, cin, h, w) = match *input {
            [b, c, h, w] => (b, c, h, w),
            _ => return Err(shape_err("conv2d", format!("input must be 4-d, got {input:?}"))),
        };
        let (cout, kcin, kh, kw) = match *kernel {
            [o, i, kh, kw] => (o, i, kh, kw),
            _ => return Err(shape_err("conv2d", format!("kernel must be 4-d, got {kernel:?}"))),
        };
        if stride == 0 {
            return Err(Error::Invalid("conv2d stride must be >= 1".into()));
        }
        if kcin != cin {
            return Err(shape_err(
                "conv2d",
                format!("input has {cin} channels (dim 1), kernel expects {kcin}"),
            ));
        }
        if kh != kw {
            return Err(shape_err("conv2d", format!("kernel must be square, got {kh}x{kw}")));
        }
        if let Some(b) = bias {
            if b != [cout] {
                return Err(shape_err(
                    "conv2d",
                    format!("bias shape {b:?} does not match {cout} output channels"),
                ));
            }
        }
        let (ho, wo) = match (out_extent(h, kh, stride, pad), out_extent(w, kw, stride, pad)) {
            (Some(ho), Some(wo)) => (ho, wo),
            _ => {
                return Err(shape_err(
                    "conv2d",
                    format!("kernel {kh}x{kw} larger than padded input {h}x{w} (pad {pad})"),
                ))
            }
        };
        Ok(Self {
            batch,
            cin,
            h,
            w,
            cout,
            k: kh,
            stride,
            pad,
            ho,
            wo,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn pixels(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col<T: Element>(g: &ConvGeom, x: &[T], col: &mut [T]) {
    let pix = g.pixels();
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut col[row * pix..(row + 1) * pix];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Element>(g: &ConvGeom, col: &[T], dx: &mut [T]) {
    let pix = g.pixels();
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &col[row * pix..(row + 1) * pix];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            line[ix as usize] = line[ix as usize] + src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// 2-d cross-correlation via im2col + GEMM.
///
/// Output extent is `(H + 2 pad - K) / stride + 1`, rounded down.
pub fn conv2d<T: Element>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(input.shape(), kernel.shape(), bias.map(|b| b.shape()), stride, pad)?;
    Ok(conv2d_forward(&g, input.data(), kernel.data(), bias.map(|b| b.data())))
}

pub(crate) fn conv2d_forward<T: Element>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
) -> Tensor<T> {
    let pix = g.pixels();
    let rows = g.col_rows();
    let in_per = g.cin * g.h * g.w;
    let out_per = g.cout * pix;
    let mut out = vec![T::zero(); g.batch * out_per];
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); rows * pix]
    };
    for b in 0..g.batch {
        let xb = &x[b * in_per..(b + 1) * in_per];
        let ob = &mut out[b * out_per..(b + 1) * out_per];
        if let Some(bias) = bias {
            for (co, &bv) in bias.iter().enumerate() {
                ob[co * pix..(co + 1) * pix].fill(bv);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        let src: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(g, xb, &mut col);
            &col
        };
        T::gemm(
            g.cout,
            rows,
            pix,
            T::one(),
            w,
            rows as isize,
            1,
            src,
            pix as isize,
            1,
            beta,
            ob,
            pix as isize,
            1,
        );
    }
    Tensor::new([g.batch, g.cout, g.ho, g.wo], out).expect("conv output shape")
}

/// Gradients of a convolution. Any of the outputs may be skipped.
pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub kernel: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Element>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dy: &[T],
    need_input: bool,
    need_kernel: bool,
    need_bias: bool,
) -> ConvGrads<T> {
    let pix = g.pixels();
    let rows = g.col_rows();
    let in_per = g.cin * g.h * g.w;
    let out_per = g.cout * pix;
    let mut dx = need_input.then(|| vec![T::zero(); g.batch * in_per]);
    let mut dw = need_kernel.then(|| vec![T::zero(); g.cout * rows]);
    let db = need_bias.then(|| {
        let mut db = vec![T::zero(); g.cout];
        for b in 0..g.batch {
            for (co, acc) in db.iter_mut().enumerate() {
                let s: T = dy[b * out_per + co * pix..b * out_per + (co + 1) * pix]
                    .iter()
                    .copied()
                    .sum();
                *acc = *acc + s;
            }
        }
        db
    });
    let pointwise = g.is_pointwise();
    let mut col = vec![T::zero(); if pointwise { 0 } else { rows * pix }];
    let mut dcol = vec![T::zero(); if pointwise || !need_input { 0 } else { rows * pix }];
    for b in 0..g.batch {
        let dyb = &dy[b * out_per..(b + 1) * out_per];
        if let Some(dw) = dw.as_mut() {
            let xb = &x[b * in_per..(b + 1) * in_per];
            let src: &[T] = if pointwise {
                xb
            } else {
                im2col(g, xb, &mut col);
                &col
            };
            // dW += dY_b @ col^T
            T::gemm(
                g.cout,
                pix,
                rows,
                T::one(),
                dyb,
                pix as isize,
                1,
                src,
                1,
                pix as isize,
                T::one(),
                dw,
                rows as isize,
                1,
            );
        }
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[b * in_per..(b + 1) * in_per];
            // dcol = W^T @ dY_b
            let target: &mut [T] = if pointwise { dxb } else { &mut dcol };
            T::gemm(
                rows,
                g.cout,
                pix,
                T::one(),
                w,
                1,
                rows as isize,
                dyb,
                pix as isize,
                1,
                T::zero(),
                target,
                pix as isize,
                1,
            );
            if !pointwise {
                col2im_add(g, &dcol, dxb);
            }
        }
    }
    ConvGrads {
        input: dx,
        kernel: dw,
        bias: db,
    }
}

/// Per-channel running statistics of a batch-norm layer.
///
/// Empty vectors mean "never populated"; eval mode rejects that state.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BnRunning<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Element> BnRunning<T> {
    /// Mean 0, variance 1 for every channel.
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }

    pub fn is_populated(&self) -> bool {
        !self.mean.is_empty() && self.mean.len() == self.var.len()
    }
}

/// Forward batch-norm output plus what backward needs.
pub(crate) struct BnForward<T> {
    pub output: Tensor<T>,
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
}

/// Batch normalization over `(batch, height, width)` per channel.
///
/// In train mode the batch statistics normalize the input and the running
/// state is blended in with weight `momentum`. In eval mode only the running
/// state is read.
#[allow(clippy::too_many_arguments)]
pub(crate) fn batch_norm_forward<T: Element>(
    input: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running: &mut BnRunning<T>,
    train: bool,
    momentum: T,
    eps: T,
) -> Result<BnForward<T>> {
    let (b, c, h, w) = input.dims4()?;
    if eps <= T::zero() {
        return Err(Error::Invalid("batch_norm eps must be positive".into()));
    }
    if gamma.len() != c || beta.len() != c {
        return Err(shape_err(
            "batch_norm",
            format!("{c} channels but gamma/beta have {}/{}", gamma.len(), beta.len()),
        ));
    }
    let hw = h * w;
    let n = b * hw;
    let x = input.data();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    if train {
        if n == 0 {
            return Err(shape_err("batch_norm", "empty batch in train mode"));
        }
        let nf = T::from_usize(n).unwrap();
        for ch in 0..c {
            let mut s = T::zero();
            for bi in 0..b {
                let off = (bi * c + ch) * hw;
                s = s + x[off..off + hw].iter().copied().sum::<T>();
            }
            let m = s / nf;
            let mut v = T::zero();
            for bi in 0..b {
                let off = (bi * c + ch) * hw;
                v = v + x[off..off + hw].iter().map(|&z| (z - m) * (z - m)).sum::<T>();
            }
            mean[ch] = m;
            var[ch] = v / nf;
        }
        if !running.is_populated() {
            *running = BnRunning::identity(c);
        }
        let unbias = if n > 1 {
            nf / T::from_usize(n - 1).unwrap()
        } else {
            T::one()
        };
        for ch in 0..c {
            running.mean[ch] = (T::one() - momentum) * running.mean[ch] + momentum * mean[ch];
            running.var[ch] =
                (T::one() - momentum) * running.var[ch] + momentum * var[ch] * unbias;
        }
    } else {
        if !running.is_populated() {
            return Err(Error::Invalid(
                "batch_norm eval mode needs populated running statistics".into(),
            ));
        }
        if running.mean.len() != c {
            return Err(shape_err(
                "batch_norm",
                format!("running state has {} channels, input {c}", running.mean.len()),
            ));
        }
        mean.copy_from_slice(&running.mean);
        var.copy_from_slice(&running.var);
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    for bi in 0..b {
        for ch in 0..c {
            let off = (bi * c + ch) * hw;
            let (m, is, ga, be) = (mean[ch], inv_std[ch], gamma[ch], beta[ch]);
            for i in off..off + hw {
                let xh = (x[i] - m) * is;
                xhat[i] = xh;
                out[i] = ga * xh + be;
            }
        }
    }
    Ok(BnForward {
        output: Tensor::new(input.shape().to_vec(), out)?,
        xhat,
        inv_std,
    })
}

/// Returns `(dx, dgamma, dbeta)`.
pub(crate) fn batch_norm_backward<T: Element>(
    shape: &[usize],
    gamma: &[T],
    xhat: &[T],
    inv_std: &[T],
    dy: &[T],
    train: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (b, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let nf = T::from_usize(b * hw).unwrap();
    let mut dx = vec![T::zero(); dy.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for bi in 0..b {
            let off = (bi * c + ch) * hw;
            for i in off..off + hw {
                sum_dy = sum_dy + dy[i];
                sum_dy_xhat = sum_dy_xhat + dy[i] * xhat[i];
            }
        }
        dgamma[ch] = sum_dy_xhat;
        dbeta[ch] = sum_dy;
        let scale = gamma[ch] * inv_std[ch];
        for bi in 0..b {
            let off = (bi * c + ch) * hw;
            for i in off..off + hw {
                dx[i] = if train {
                    scale * (dy[i] - sum_dy / nf - xhat[i] * sum_dy_xhat / nf)
                } else {
                    scale * dy[i]
                };
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Resampling rule for [`upsample2x`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpsampleMode {
    Nearest,
    Bilinear,
}

/// Source taps for one output coordinate of a half-pixel-centred 2x bilinear
/// upsample: `(i0, i1, weight_of_i1)`.
fn bilinear_taps(dst: usize, src_len: usize) -> (usize, usize, f64) {
    let pos = ((dst as f64 + 0.5) / 2.0 - 0.5).max(0.0);
    let i0 = (pos.floor() as usize).min(src_len - 1);
    let i1 = (i0 + 1).min(src_len - 1);
    (i0, i1, pos - i0 as f64)
}

/// Doubles height and width.
pub fn upsample2x<T: Element>(input: &Tensor<T>, mode: UpsampleMode) -> Result<Tensor<T>> {
    let (b, c, h, w) = input.dims4()?;
    if h == 0 || w == 0 {
        return Err(shape_err("upsample2x", "empty spatial extent"));
    }
    let (oh, ow) = (2 * h, 2 * w);
    let x = input.data();
    let mut out = vec![T::zero(); b * c * oh * ow];
    for p in 0..b * c {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        match mode {
            UpsampleMode::Nearest => {
                for oy in 0..oh {
                    for ox in 0..ow {
                        dst[oy * ow + ox] = src[(oy / 2) * w + ox / 2];
                    }
                }
            }
            UpsampleMode::Bilinear => {
                for oy in 0..oh {
                    let (y0, y1, ly) = bilinear_taps(oy, h);
                    let ly = T::from_f64_lossy(ly);
                    for ox in 0..ow {
                        let (x0, x1, lx) = bilinear_taps(ox, w);
                        let lx = T::from_f64_lossy(lx);
                        let top = src[y0 * w + x0] * (T::one() - lx) + src[y0 * w + x1] * lx;
                        let bot = src[y1 * w + x0] * (T::one() - lx) + src[y1 * w + x1] * lx;
                        dst[oy * ow + ox] = top * (T::one() - ly) + bot * ly;
                    }
                }
            }
        }
    }
    Tensor::new([b, c, oh, ow], out)
}

pub(crate) fn upsample2x_backward<T: Element>(
    in_shape: &[usize],
    dy: &[T],
    mode: UpsampleMode,
) -> Vec<T> {
    let (bc, h, w) = (in_shape[0] * in_shape[1], in_shape[2], in_shape[3]);
    let (oh, ow) = (2 * h, 2 * w);
    let mut dx = vec![T::zero(); bc * h * w];
    for p in 0..bc {
        let g = &dy[p * oh * ow..(p + 1) * oh * ow];
        let d = &mut dx[p * h * w..(p + 1) * h * w];
        match mode {
            UpsampleMode::Nearest => {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let i = (oy / 2) * w + ox / 2;
                        d[i] = d[i] + g[oy * ow + ox];
                    }
                }
            }
            UpsampleMode::Bilinear => {
                for oy in 0..oh {
                    let (y0, y1, ly) = bilinear_taps(oy, h);
                    let ly = T::from_f64_lossy(ly);
                    for ox in 0..ow {
                        let (x0, x1, lx) = bilinear_taps(ox, w);
                        let lx = T::from_f64_lossy(lx);
                        let v = g[oy * ow + ox];
                        let top = v * (T::one() - ly);
                        let bot = v * ly;
                        d[y0 * w + x0] = d[y0 * w + x0] + top * (T::one() - lx);
                        d[y0 * w + x1] = d[y0 * w + x1] + top * lx;
                        d[y1 * w + x0] = d[y1 * w + x0] + bot * (T::one() - lx);
                        d[y1 * w + x1] = d[y1 * w + x1] + bot * lx;
                    }
                }
            }
        }
    }
    dx
}

/// Resampling rule for [`downsample_to`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DownsampleMode {
    /// Picks `floor(dst * src / out)`; keeps binary masks binary.
    Nearest,
    /// Averages the covering source window (adaptive average pooling).
    Area,
}

/// Shrinks the spatial extent to `h x w`. Applied to targets only, so there is
/// no backward.
pub fn downsample_to<T: Element>(
    input: &Tensor<T>,
    h: usize,
    w: usize,
    mode: DownsampleMode,
) -> Result<Tensor<T>> {
    let (b, c, ih, iw) = input.dims4()?;
    if h > ih || w > iw {
        return Err(Error::Invalid(format!(
            "downsample_to cannot upscale {ih}x{iw} to {h}x{w}"
        )));
    }
    if h == 0 || w == 0 {
        return Err(Error::Invalid("downsample_to target must be non-empty".into()));
    }
    if h == ih && w == iw {
        return Ok(input.clone());
    }
    let x = input.data();
    let mut out = vec![T::zero(); b * c * h * w];
    for p in 0..b * c {
        let src = &x[p * ih * iw..(p + 1) * ih * iw];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for oy in 0..h {
            for ox in 0..w {
                dst[oy * w + ox] = match mode {
                    DownsampleMode::Nearest => src[(oy * ih / h) * iw + ox * iw / w],
                    DownsampleMode::Area => {
                        let (y0, y1) = (oy * ih / h, ((oy + 1) * ih).div_ceil(h));
                        let (x0, x1) = (ox * iw / w, ((ox + 1) * iw).div_ceil(w));
                        let mut s = T::zero();
                        for yy in y0..y1 {
                            for xx in x0..x1 {
                                s = s + src[yy * iw + xx];
                            }
                        }
                        s / T::from_usize((y1 - y0) * (x1 - x0)).unwrap()
                    }
                };
            }
        }
    }
    Tensor::new([b, c, h, w], out)
}

/// 2x2 max pooling with stride 2. Returns the output and the flat argmax
/// index of every output element.
pub(crate) fn maxpool2x<T: Element>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let (b, c, h, w) = input.dims4()?;
    if h < 2 || w < 2 {
        return Err(shape_err("maxpool2x", format!("spatial size {h}x{w} below 2x2")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(b * c * oh * ow);
    let mut arg = Vec::with_capacity(b * c * oh * ow);
    for p in 0..b * c {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[i] > x[best] {
                        best = i;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::new([b, c, oh, ow], out)?, arg))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_identity_kernel() {
        let x = Tensor::<f64>::from_fn([1, 1, 3, 3], |i| i as f64 - 4.0);
        let k = Tensor::ones([1, 1, 1, 1]);
        let b = Tensor::zeros([1]);
        let y = conv2d(&x, &k, Some(&b), 1, 0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_zero_input_gives_bias() {
        let x = Tensor::<f32>::zeros([2, 3, 5, 5]);
        let k = Tensor::from_fn([4, 3, 3, 3], |i| (i as f32).sin());
        let b = Tensor::new([4], vec![0.5, -1.0, 2.0, 3.25]).unwrap();
        let y = conv2d(&x, &k, Some(&b), 1, 1).unwrap();
        assert_eq!(y.shape(), &[2, 4, 5, 5]);
        for (i, v) in y.data().iter().enumerate() {
            assert_eq!(*v, b.data()[(i / 25) % 4]);
        }
    }

    #[test]
    fn conv_shape_errors_name_dims() {
        let x = Tensor::<f32>::zeros([1, 2, 4, 4]);
        let k = Tensor::zeros([1, 3, 3, 3]);
        let err = conv2d(&x, &k, None, 1, 1).unwrap_err().to_string();
        assert!(err.contains("2 channels"), "{err}");
        let k = Tensor::zeros([1, 2, 7, 7]);
        assert!(conv2d(&x, &k, None, 1, 1).is_err());
        let k = Tensor::zeros([1, 2, 3, 3]);
        assert!(conv2d(&x, &k, None, 0, 1).is_err());
    }

    #[test]
    fn strided_conv_rounds_down() {
        let x = Tensor::<f32>::zeros([1, 1, 8, 8]);
        let k = Tensor::zeros([1, 1, 3, 3]);
        assert_eq!(conv2d(&x, &k, None, 2, 1).unwrap().shape(), &[1, 1, 4, 4]);
        let k = Tensor::zeros([1, 1, 1, 1]);
        assert_eq!(conv2d(&x, &k, None, 2, 0).unwrap().shape(), &[1, 1, 4, 4]);
    }

    #[test]
    fn bn_eval_identity_and_empty_state() {
        let x = Tensor::<f64>::from_fn([2, 3, 2, 2], |i| i as f64 * 0.3 - 2.0);
        let mut st = BnRunning::identity(3);
        let out = batch_norm_forward(&x, &[1.0; 3], &[0.0; 3], &mut st, false, 0.1, 1e-12)
            .unwrap()
            .output;
        for (a, b) in out.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-9);
        }
        let mut empty = BnRunning::default();
        assert!(batch_norm_forward(&x, &[1.0; 3], &[0.0; 3], &mut empty, false, 0.1, 1e-5).is_err());
    }

    #[test]
    fn bn_train_constant_input_gives_beta() {
        let x = Tensor::<f32>::full([2, 2, 3, 3], 7.5);
        let mut st = BnRunning::default();
        let out = batch_norm_forward(&x, &[1.0; 2], &[5.0; 2], &mut st, true, 0.1, 1e-5)
            .unwrap()
            .output;
        assert!(out.data().iter().all(|&v| v == 5.0));
        // running mean moved 10% towards 7.5
        assert!((st.mean[0] - 0.75).abs() < 1e-6);
    }

    #[test]
    fn upsample_nearest_blocks() {
        let x = Tensor::<f32>::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = upsample2x(&x, UpsampleMode::Nearest).unwrap();
        assert_eq!(
            y.data(),
            &[1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]
        );
    }

    #[test]
    fn upsample_constant_stays_constant() {
        let x = Tensor::<f64>::full([1, 2, 3, 3], 1.25);
        for mode in [UpsampleMode::Nearest, UpsampleMode::Bilinear] {
            let y = upsample2x(&x, mode).unwrap();
            assert!(y.data().iter().all(|&v| (v - 1.25).abs() < 1e-12));
        }
    }

    #[test]
    fn bilinear_matches_half_pixel_convention() {
        // 1-d profile [0, 1] -> [0, 0.25, 0.75, 1] along width
        let x = Tensor::<f64>::new([1, 1, 1, 2], vec![0.0, 1.0]).unwrap();
        let y = upsample2x(&x, UpsampleMode::Bilinear).unwrap();
        assert_eq!(&y.data()[..4], &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn downsample_cases() {
        let ones = Tensor::<f32>::ones([1, 1, 8, 8]);
        let d = downsample_to(&ones, 4, 4, DownsampleMode::Nearest).unwrap();
        assert_eq!(d, Tensor::ones([1, 1, 4, 4]));

        let c = Tensor::<f32>::full([1, 3, 6, 6], 0.3);
        let d = downsample_to(&c, 3, 3, DownsampleMode::Area).unwrap();
        assert!(d.data().iter().all(|&v| (v - 0.3).abs() < 1e-6));

        assert!(downsample_to(&c, 8, 8, DownsampleMode::Area).is_err());
    }

    #[test]
    fn checkerboard_area_average() {
        let x = Tensor::<f64>::from_fn([1, 1, 4, 4], |i| ((i / 4 + i % 4) % 2) as f64);
        // oracle: direct 2x2 block means
        let d = downsample_to(&x, 2, 2, DownsampleMode::Area).unwrap();
        for by in 0..2 {
            for bx in 0..2 {
                let mut s = 0.0;
                for y in 0..2 {
                    for xx in 0..2 {
                        s += x.data()[(2 * by + y) * 4 + 2 * bx + xx];
                    }
                }
                assert_eq!(d.data()[by * 2 + bx], s / 4.0);
                assert_eq!(d.data()[by * 2 + bx], 0.5);
            }
        }
    }

    #[test]
    fn maxpool_picks_max() {
        let x = Tensor::<f32>::new([1, 1, 2, 4], vec![1., 5., 2., 0., 3., 4., 9., 1.]).unwrap();
        let (y, arg) = maxpool2x(&x).unwrap();
        assert_eq!(y.data(), &[5.0, 9.0]);
        assert_eq!(arg, vec![1, 6]);
    }
}

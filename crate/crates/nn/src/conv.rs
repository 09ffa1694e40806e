//! Dense and depthwise 2-D convolution (cross-correlation), NCHW layout.

use crate::error::{shape_err, NnError, Result};
use crate::gemm::gemm;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Padding {
    /// Output size `ceil(in / stride)`; padding split with the extra row/column at the bottom/right.
    Same,
    /// No padding; output size `floor((in - k) / stride) + 1`.
    Valid,
}

/// Resolved spatial geometry of one convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(
        in_h: usize,
        in_w: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        if stride == 0 || kh == 0 || kw == 0 {
            return Err(NnError::InvalidArgument {
                op: "conv geometry",
                msg: format!("stride {stride} and kernel {kh}x{kw} must be positive"),
            });
        }
        let (out_h, pad_top) = axis(in_h, kh, stride, padding)?;
        let (out_w, pad_left) = axis(in_w, kw, stride, padding)?;
        Ok(Self {
            in_h,
            in_w,
            kh,
            kw,
            stride,
            pad_top,
            pad_left,
            out_h,
            out_w,
        })
    }

    /// Input row/column feeding output index `o` at kernel tap `k`, if inside the image.
    #[inline]
    fn src(o: usize, k: usize, stride: usize, pad: usize, len: usize) -> Option<usize> {
        let p = (o * stride + k).checked_sub(pad)?;
        (p < len).then_some(p)
    }

    /// Range of output columns whose input column for tap `kx` is in bounds.
    #[inline]
    fn valid_ox(&self, kx: usize) -> std::ops::Range<usize> {
        let s = self.stride;
        // ox*s + kx >= pad_left  and  ox*s + kx - pad_left < in_w
        let lo = if kx >= self.pad_left {
            0
        } else {
            (self.pad_left - kx).div_ceil(s)
        };
        let hi_num = self.in_w + self.pad_left;
        let hi = if hi_num > kx {
            (hi_num - kx).div_ceil(s).min(self.out_w)
        } else {
            0
        };
        lo.min(hi)..hi
    }
}

fn axis(len: usize, k: usize, stride: usize, padding: Padding) -> Result<(usize, usize)> {
    match padding {
        Padding::Valid => {
            if len < k {
                return Err(NnError::InvalidArgument {
                    op: "conv geometry",
                    msg: format!("input extent {len} smaller than kernel {k} with valid padding"),
                });
            }
            Ok(((len - k) / stride + 1, 0))
        }
        Padding::Same => {
            let out = len.div_ceil(stride);
            let total = ((out - 1) * stride + k).saturating_sub(len);
            Ok((out, total / 2))
        }
    }
}

/// Output spatial size for the given configuration.
pub fn conv_output_size(
    in_h: usize,
    in_w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: Padding,
) -> Result<(usize, usize)> {
    let g = ConvGeometry::new(in_h, in_w, kh, kw, stride, padding)?;
    Ok((g.out_h, g.out_w))
}

pub struct ConvGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

fn check_dense(input: &Tensor, weight: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let (_, c, _, _) = input.dims4()?;
    let (co, ci, kh, kw) = weight.dims4()?;
    if ci != c {
        return Err(shape_err("conv2d", &[co, c, kh, kw], weight.shape()));
    }
    Ok((co, ci, kh, kw))
}

fn check_bias(op: &'static str, bias: Option<&Tensor>, channels: usize) -> Result<()> {
    match bias {
        Some(b) if b.shape() != [channels] => Err(shape_err(op, &[channels], b.shape())),
        _ => Ok(()),
    }
}

fn im2col(x: &[f64], c: usize, g: &ConvGeometry, col: &mut [f64]) {
    let p = g.out_h * g.out_w;
    for ci in 0..c {
        let plane = &x[ci * g.in_h * g.in_w..(ci + 1) * g.in_h * g.in_w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = &mut col[((ci * g.kh + ky) * g.kw + kx) * p..][..p];
                row.fill(0.0);
                let xr = g.valid_ox(kx);
                for oy in 0..g.out_h {
                    let Some(iy) = ConvGeometry::src(oy, ky, g.stride, g.pad_top, g.in_h) else {
                        continue;
                    };
                    let src = &plane[iy * g.in_w..(iy + 1) * g.in_w];
                    let dst = &mut row[oy * g.out_w..(oy + 1) * g.out_w];
                    for ox in xr.clone() {
                        dst[ox] = src[ox * g.stride + kx - g.pad_left];
                    }
                }
            }
        }
    }
}

fn col2im(col: &[f64], c: usize, g: &ConvGeometry, x: &mut [f64]) {
    let p = g.out_h * g.out_w;
    for ci in 0..c {
        let plane = &mut x[ci * g.in_h * g.in_w..(ci + 1) * g.in_h * g.in_w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = &col[((ci * g.kh + ky) * g.kw + kx) * p..][..p];
                let xr = g.valid_ox(kx);
                for oy in 0..g.out_h {
                    let Some(iy) = ConvGeometry::src(oy, ky, g.stride, g.pad_top, g.in_h) else {
                        continue;
                    };
                    let src = &row[oy * g.out_w..(oy + 1) * g.out_w];
                    let dst = &mut plane[iy * g.in_w..(iy + 1) * g.in_w];
                    for ox in xr.clone() {
                        dst[ox * g.stride + kx - g.pad_left] += src[ox];
                    }
                }
            }
        }
    }
}

fn is_pointwise(g: &ConvGeometry) -> bool {
    g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad_top == 0 && g.pad_left == 0
}

/// Dense convolution. `weight` is `[out_c, in_c, kh, kw]`, `bias` is `[out_c]`.
pub fn conv2d_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor> {
    let (n, c, h, w) = input.dims4()?;
    let (co, _, kh, kw) = check_dense(input, weight)?;
    check_bias("conv2d", bias, co)?;
    let g = ConvGeometry::new(h, w, kh, kw, stride, padding)?;
    let p = g.out_h * g.out_w;
    let kdim = c * kh * kw;
    let mut out = vec![0.0; n * co * p];
    let mut col = if is_pointwise(&g) {
        Vec::new()
    } else {
        vec![0.0; kdim * p]
    };
    for b in 0..n {
        let x = &input.data()[b * c * h * w..(b + 1) * c * h * w];
        let dst = &mut out[b * co * p..(b + 1) * co * p];
        let cols: &[f64] = if is_pointwise(&g) {
            x
        } else {
            im2col(x, c, &g, &mut col);
            &col
        };
        gemm(co, kdim, p, weight.data(), false, cols, false, dst, false);
        if let Some(bias) = bias {
            for (o, &bv) in bias.data().iter().enumerate() {
                dst[o * p..(o + 1) * p].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Tensor::new(vec![n, co, g.out_h, g.out_w], out)
}

/// Gradients of a dense convolution given the upstream gradient.
pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    padding: Padding,
) -> Result<ConvGrads> {
    let (n, c, h, w) = input.dims4()?;
    let (co, _, kh, kw) = check_dense(input, weight)?;
    let g = ConvGeometry::new(h, w, kh, kw, stride, padding)?;
    let expect = [n, co, g.out_h, g.out_w];
    if grad_out.shape() != expect {
        return Err(shape_err("conv2d_backward", &expect, grad_out.shape()));
    }
    let p = g.out_h * g.out_w;
    let kdim = c * kh * kw;
    let mut gw = vec![0.0; co * kdim];
    let mut gb = vec![0.0; co];
    let mut gx = vec![0.0; n * c * h * w];
    let pointwise = is_pointwise(&g);
    let mut col = if pointwise {
        Vec::new()
    } else {
        vec![0.0; kdim * p]
    };
    let mut gcol = vec![0.0; if pointwise { 0 } else { kdim * p }];
    for b in 0..n {
        let x = &input.data()[b * c * h * w..(b + 1) * c * h * w];
        let go = &grad_out.data()[b * co * p..(b + 1) * co * p];
        let cols: &[f64] = if pointwise {
            x
        } else {
            im2col(x, c, &g, &mut col);
            &col
        };
        // dW += dY · colᵀ
        gemm(co, p, kdim, go, false, cols, true, &mut gw, true);
        for (o, gbv) in gb.iter_mut().enumerate() {
            *gbv += go[o * p..(o + 1) * p].iter().sum::<f64>();
        }
        // dcol = Wᵀ · dY
        let gxb = &mut gx[b * c * h * w..(b + 1) * c * h * w];
        if pointwise {
            gemm(kdim, co, p, weight.data(), true, go, false, gxb, false);
        } else {
            gemm(
                kdim,
                co,
                p,
                weight.data(),
                true,
                go,
                false,
                &mut gcol,
                false,
            );
            col2im(&gcol, c, &g, gxb);
        }
    }
    Ok(ConvGrads {
        input: Tensor::new(input.shape().to_vec(), gx)?,
        weight: Tensor::new(weight.shape().to_vec(), gw)?,
        bias: Tensor::new(vec![co], gb)?,
    })
}

fn check_depthwise(input: &Tensor, weight: &Tensor) -> Result<(usize, usize)> {
    let (_, c, _, _) = input.dims4()?;
    let (wc, one, kh, kw) = weight.dims4()?;
    if wc != c || one != 1 {
        return Err(shape_err(
            "depthwise_conv2d",
            &[c, 1, kh, kw],
            weight.shape(),
        ));
    }
    Ok((kh, kw))
}

/// `y += a * x`
#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

/// Dot product with four independent accumulators so the loop vectorizes;
/// the summation order is fixed, keeping results deterministic.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Depthwise convolution: one `kh×kw` filter per channel, weight `[c, 1, kh, kw]`.
pub fn depthwise_conv2d_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor> {
    let (n, c, h, w) = input.dims4()?;
    let (kh, kw) = check_depthwise(input, weight)?;
    check_bias("depthwise_conv2d", bias, c)?;
    let g = ConvGeometry::new(h, w, kh, kw, stride, padding)?;
    let p = g.out_h * g.out_w;
    let mut out = vec![0.0; n * c * p];
    let ranges: Vec<_> = (0..kw).map(|kx| g.valid_ox(kx)).collect();
    for b in 0..n {
        for ch in 0..c {
            let x = &input.data()[(b * c + ch) * h * w..][..h * w];
            let wk = &weight.data()[ch * kh * kw..(ch + 1) * kh * kw];
            let dst = &mut out[(b * c + ch) * p..][..p];
            if let Some(bias) = bias {
                dst.fill(bias.data()[ch]);
            }
            for (oy, row) in dst.chunks_exact_mut(g.out_w).enumerate() {
                for ky in 0..kh {
                    let Some(iy) = ConvGeometry::src(oy, ky, stride, g.pad_top, h) else {
                        continue;
                    };
                    let src = &x[iy * w..(iy + 1) * w];
                    for (kx, xr) in ranges.iter().enumerate() {
                        let wv = wk[ky * kw + kx];
                        if xr.is_empty() {
                            continue;
                        }
                        let s0 = xr.start * stride + kx - g.pad_left;
                        if stride == 1 {
                            axpy(&mut row[xr.clone()], wv, &src[s0..s0 + xr.len()]);
                        } else {
                            for (o, &v) in row[xr.clone()]
                                .iter_mut()
                                .zip(src[s0..].iter().step_by(stride))
                            {
                                *o += wv * v;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, c, g.out_h, g.out_w], out)
}

pub fn depthwise_conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    padding: Padding,
) -> Result<ConvGrads> {
    let (n, c, h, w) = input.dims4()?;
    let (kh, kw) = check_depthwise(input, weight)?;
    let g = ConvGeometry::new(h, w, kh, kw, stride, padding)?;
    let expect = [n, c, g.out_h, g.out_w];
    if grad_out.shape() != expect {
        return Err(shape_err(
            "depthwise_conv2d_backward",
            &expect,
            grad_out.shape(),
        ));
    }
    let p = g.out_h * g.out_w;
    let mut gx = vec![0.0; n * c * h * w];
    let mut gw = vec![0.0; c * kh * kw];
    let mut gb = vec![0.0; c];
    let ranges: Vec<_> = (0..kw).map(|kx| g.valid_ox(kx)).collect();
    let mut strided = vec![0.0; g.out_w];
    for b in 0..n {
        for ch in 0..c {
            let x = &input.data()[(b * c + ch) * h * w..][..h * w];
            let go = &grad_out.data()[(b * c + ch) * p..][..p];
            let gxc = &mut gx[(b * c + ch) * h * w..][..h * w];
            let wk = &weight.data()[ch * kh * kw..(ch + 1) * kh * kw];
            let gwk = &mut gw[ch * kh * kw..(ch + 1) * kh * kw];
            gb[ch] += go.iter().sum::<f64>();
            for (oy, grow) in go.chunks_exact(g.out_w).enumerate() {
                for ky in 0..kh {
                    let Some(iy) = ConvGeometry::src(oy, ky, stride, g.pad_top, h) else {
                        continue;
                    };
                    let src = &x[iy * w..(iy + 1) * w];
                    let gsrc = &mut gxc[iy * w..(iy + 1) * w];
                    for (kx, xr) in ranges.iter().enumerate() {
                        if xr.is_empty() {
                            continue;
                        }
                        let wv = wk[ky * kw + kx];
                        let s0 = xr.start * stride + kx - g.pad_left;
                        let gr = &grow[xr.clone()];
                        if stride == 1 {
                            gwk[ky * kw + kx] += dot(&src[s0..s0 + xr.len()], gr);
                            axpy(&mut gsrc[s0..s0 + xr.len()], wv, gr);
                        } else {
                            let buf = &mut strided[..xr.len()];
                            for (d, &v) in buf.iter_mut().zip(src[s0..].iter().step_by(stride)) {
                                *d = v;
                            }
                            gwk[ky * kw + kx] += dot(buf, gr);
                            for (i, &gv) in gr.iter().enumerate() {
                                gsrc[s0 + i * stride] += wv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(ConvGrads {
        input: Tensor::new(input.shape().to_vec(), gx)?,
        weight: Tensor::new(weight.shape().to_vec(), gw)?,
        bias: Tensor::new(vec![c], gb)?,
    })
}

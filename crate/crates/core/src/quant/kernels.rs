//! int8 convolution kernels with i32 accumulation. Activations are widened to
//! i16 with the zero point removed, so zero padding is exact. On x86-64 with
//! AVX2 the dense GEMM uses `vpmaddwd` over interleaved pairs of input rows.

use satdet_nn::{ConvGeometry, Padding};

use super::{QAdd, QConv, QuantParams, QMAX, QMIN};
use crate::error::{Error, Result};

/// int8 activation tensor, batch 1, NCHW.
#[derive(Clone, Debug)]
pub struct QTensor {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<i8>,
    pub q: QuantParams,
}

#[inline]
fn has_avx2() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        std::arch::is_x86_feature_detected!("avx2")
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}

/// Compile `$body` twice, once with AVX2 enabled, and pick at run time.
/// Integer results are identical on both paths.
macro_rules! multiversion {
    (fn $name:ident($($arg:ident: $ty:ty),*) $(-> $ret:ty)? $body:block) => {
        fn $name($($arg: $ty),*) $(-> $ret)? {
            #[inline(always)]
            fn imp($($arg: $ty),*) $(-> $ret)? $body
            #[cfg(target_arch = "x86_64")]
            #[target_feature(enable = "avx2")]
            unsafe fn avx2($($arg: $ty),*) $(-> $ret)? {
                imp($($arg),*)
            }
            #[cfg(target_arch = "x86_64")]
            if has_avx2() {
                // SAFETY: the CPU supports AVX2.
                return unsafe { avx2($($arg),*) };
            }
            imp($($arg),*)
        }
    };
}

/// Requantization of i32 accumulators to int8 through an f32 multiplier.
#[derive(Clone, Copy)]
struct Requant {
    m: f32,
    zp: i32,
    lo: i32,
    hi: i32,
}

impl Requant {
    fn new(c: &QConv) -> Self {
        let m = (c.input.scale * c.weight_scale / c.output.scale) as f32;
        let zp = c.output.zero_point;
        let (mut lo, mut hi) = (QMIN, QMAX);
        if c.relu6 {
            lo = lo.max(zp);
            hi = hi.min(zp + (6.0 / c.output.scale).round().min(1e9) as i32);
        }
        Self { m, zp, lo, hi }
    }
}

multiversion! {
    fn requant(acc: &[i32], out: &mut [i8], rq: Requant) {
        for (o, &a) in out.iter_mut().zip(acc) {
            let v = ((a as f32 * rq.m).round_ties_even() as i32).saturating_add(rq.zp);
            *o = v.clamp(rq.lo, rq.hi) as i8;
        }
    }
}

multiversion! {
    fn centered(x: &[i8], zp: i16) -> Vec<i16> {
        x.iter().map(|&v| (v as i16).wrapping_sub(zp)).collect()
    }
}

fn geometry(x: &QTensor, c: &QConv) -> Result<ConvGeometry> {
    let [_, _, kh, kw] = c.weight_shape;
    let pad = if c.same_padding {
        Padding::Same
    } else {
        Padding::Valid
    };
    Ok(ConvGeometry::new(x.h, x.w, kh, kw, c.stride, pad)?)
}

const TILE: usize = 512;

/// Portable `out[o][p] = requant(bias[o] + sum_k w[o][k] * x[k][p])`.
fn gemm_scalar(w: &[i8], x: &[i16], bias: &[i32], k: usize, p: usize, rq: Requant, out: &mut [i8]) {
    let mut acc = [0i32; TILE];
    let mut p0 = 0;
    while p0 < p {
        let n = TILE.min(p - p0);
        for (o, &b) in bias.iter().enumerate() {
            let acc = &mut acc[..n];
            acc.fill(b);
            let wr = &w[o * k..(o + 1) * k];
            for (kk, &wv) in wr.iter().enumerate() {
                let wv = wv as i32;
                for (a, &u) in acc.iter_mut().zip(&x[kk * p + p0..][..n]) {
                    *a = a.wrapping_add(wv.wrapping_mul(u as i32));
                }
            }
            requant(acc, &mut out[o * p + p0..][..n], rq);
        }
        p0 += n;
    }
}

#[cfg(target_arch = "x86_64")]
mod avx2 {
    use std::arch::x86_64::*;

    pub const ROWS: usize = 4;
    pub const COLS: usize = 16;

    /// Interleave row pairs: `out[((j * pp) + col) * 2 + t] = x[2j + t][col]`,
    /// zero-filled past `k` rows and `p` columns. `pp` is `p` rounded up to `COLS`.
    pub fn pack_pairs(x: &[i16], k: usize, p: usize) -> (Vec<i16>, usize) {
        let pp = p.div_ceil(COLS) * COLS;
        let kp = k.div_ceil(2);
        let mut out = vec![0i16; kp * pp * 2];
        for j in 0..kp {
            let dst = &mut out[j * pp * 2..][..p * 2];
            let r0 = &x[2 * j * p..][..p];
            if 2 * j + 1 < k {
                let r1 = &x[(2 * j + 1) * p..][..p];
                for ((d, &a), &b) in dst.chunks_exact_mut(2).zip(r0).zip(r1) {
                    d[0] = a;
                    d[1] = b;
                }
            } else {
                for (d, &a) in dst.chunks_exact_mut(2).zip(r0) {
                    d[0] = a;
                }
            }
        }
        (out, pp)
    }

    /// Weight pairs as i32 lanes, `ROWS`-padded: `out[o * kp + j] = w[o][2j] | w[o][2j+1] << 16`.
    pub fn pack_weights(w: &[i8], co: usize, k: usize) -> (Vec<i32>, usize) {
        let kp = k.div_ceil(2);
        let cop = co.div_ceil(ROWS) * ROWS;
        let mut out = vec![0i32; cop * kp];
        for o in 0..co {
            let wr = &w[o * k..(o + 1) * k];
            for j in 0..kp {
                let lo = wr[2 * j] as i16 as u16 as u32;
                let hi = wr.get(2 * j + 1).map_or(0, |&v| v as i16 as u16 as u32);
                out[o * kp + j] = (lo | hi << 16) as i32;
            }
        }
        (out, cop)
    }

    /// `acc[r][col] = sum_j madd(x pair j at col, w pair (o0 + r, j))` for one
    /// block of `ROWS` output channels; `acc` holds `ROWS * pp` values.
    ///
    /// # Safety
    /// Requires AVX2. `xp` has `kp * pp * 2` elements, `wp` at least `(o0 + ROWS) * kp`.
    #[target_feature(enable = "avx2")]
    pub unsafe fn block(xp: &[i16], wp: &[i32], o0: usize, kp: usize, pp: usize, acc: &mut [i32]) {
        debug_assert!(
            xp.len() >= kp * pp * 2 && wp.len() >= (o0 + ROWS) * kp && acc.len() >= ROWS * pp
        );
        let xb = xp.as_ptr();
        let wb = wp.as_ptr().add(o0 * kp);
        let ab = acc.as_mut_ptr();
        let mut col = 0;
        while col < pp {
            let mut a = [[_mm256_setzero_si256(); 2]; ROWS];
            for j in 0..kp {
                let px = xb.add((j * pp + col) * 2) as *const __m256i;
                let x0 = _mm256_loadu_si256(px);
                let x1 = _mm256_loadu_si256(px.add(1));
                for (r, ar) in a.iter_mut().enumerate() {
                    let wv = _mm256_set1_epi32(*wb.add(r * kp + j));
                    ar[0] = _mm256_add_epi32(ar[0], _mm256_madd_epi16(x0, wv));
                    ar[1] = _mm256_add_epi32(ar[1], _mm256_madd_epi16(x1, wv));
                }
            }
            for (r, ar) in a.iter().enumerate() {
                let dst = ab.add(r * pp + col) as *mut __m256i;
                _mm256_storeu_si256(dst, ar[0]);
                _mm256_storeu_si256(dst.add(1), ar[1]);
            }
            col += COLS;
        }
    }
}

/// `out[o][p] = requant(bias[o] + sum_k w[o][k] * x[k][p])`, `x` as `k` rows of `p`.
fn gemm(w: &[i8], x: &[i16], bias: &[i32], k: usize, p: usize, rq: Requant, out: &mut [i8]) {
    #[cfg(target_arch = "x86_64")]
    if has_avx2() {
        use avx2::ROWS;
        let co = bias.len();
        let (xp, pp) = avx2::pack_pairs(x, k, p);
        let (wp, _) = avx2::pack_weights(w, co, k);
        let kp = k.div_ceil(2);
        let mut acc = vec![0i32; ROWS * pp];
        for o0 in (0..co).step_by(ROWS) {
            // SAFETY: AVX2 detected; buffer sizes follow from the packers.
            unsafe { avx2::block(&xp, &wp, o0, kp, pp, &mut acc) };
            for r in 0..ROWS.min(co - o0) {
                let row = &mut acc[r * pp..r * pp + p];
                let b = bias[o0 + r];
                row.iter_mut().for_each(|v| *v = v.wrapping_add(b));
                requant(row, &mut out[(o0 + r) * p..][..p], rq);
            }
        }
        return;
    }
    gemm_scalar(w, x, bias, k, p, rq, out)
}

/// im2col rows `(ch, ky, kx)` over output positions; padding reads as zero.
fn im2col(xs: &[i16], x: &QTensor, g: &ConvGeometry) -> Vec<i16> {
    let p = g.out_h * g.out_w;
    let mut col = vec![0i16; x.c * g.kh * g.kw * p];
    for ch in 0..x.c {
        let plane = &xs[ch * x.h * x.w..(ch + 1) * x.h * x.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = &mut col[((ch * g.kh + ky) * g.kw + kx) * p..][..p];
                for oy in 0..g.out_h {
                    let Some(iy) = (oy * g.stride + ky)
                        .checked_sub(g.pad_top)
                        .filter(|&v| v < x.h)
                    else {
                        continue;
                    };
                    let dst = &mut row[oy * g.out_w..(oy + 1) * g.out_w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        if let Some(ix) = (ox * g.stride + kx)
                            .checked_sub(g.pad_left)
                            .filter(|&v| v < x.w)
                        {
                            *d = plane[iy * x.w + ix];
                        }
                    }
                }
            }
        }
    }
    col
}

fn conv_dense(x: &QTensor, c: &QConv) -> Result<QTensor> {
    let g = geometry(x, c)?;
    let [co, ci, kh, kw] = c.weight_shape;
    if ci != x.c {
        return Err(Error::Internal(format!(
            "conv expects {ci} channels, got {}",
            x.c
        )));
    }
    let xs = centered(&x.data, x.q.zero_point as i16);
    let p = g.out_h * g.out_w;
    let pointwise = kh == 1 && kw == 1 && c.stride == 1;
    let cols = if pointwise { xs } else { im2col(&xs, x, &g) };
    let mut out = vec![0i8; co * p];
    gemm(
        &c.weight,
        &cols,
        &c.bias,
        ci * kh * kw,
        p,
        Requant::new(c),
        &mut out,
    );
    Ok(QTensor {
        c: co,
        h: g.out_h,
        w: g.out_w,
        data: out,
        q: c.output,
    })
}

/// Output columns `[lo, hi)` whose tap `kx` lands inside the input row.
fn valid_cols(g: &ConvGeometry, in_w: usize, kx: usize) -> (usize, usize) {
    let ow = g.out_w;
    let lo = (0..ow)
        .find(|&o| o * g.stride + kx >= g.pad_left)
        .unwrap_or(ow);
    let hi = (0..ow)
        .rev()
        .find(|&o| {
            (o * g.stride + kx)
                .checked_sub(g.pad_left)
                .is_some_and(|v| v < in_w)
        })
        .map_or(lo, |v| v + 1);
    (lo, hi.max(lo))
}

multiversion! {
    fn depthwise_channel(
        plane: &[i16],
        in_h: usize,
        in_w: usize,
        wk: &[i8],
        g: &ConvGeometry,
        ranges: &[(usize, usize)],
        acc: &mut [i32]
    ) {
        let (kh, kw, ow) = (g.kh, g.kw, g.out_w);
        for (oy, row) in acc.chunks_exact_mut(ow).enumerate() {
            for ky in 0..kh {
                let Some(iy) = (oy * g.stride + ky)
                    .checked_sub(g.pad_top)
                    .filter(|&v| v < in_h)
                else {
                    continue;
                };
                let src = &plane[iy * in_w..(iy + 1) * in_w];
                for (kx, &(lo, hi)) in ranges.iter().enumerate().take(kw) {
                    if lo >= hi {
                        continue;
                    }
                    let wv = wk[ky * kw + kx] as i32;
                    let s0 = lo * g.stride + kx - g.pad_left;
                    if g.stride == 1 {
                        for (a, &v) in row[lo..hi].iter_mut().zip(&src[s0..s0 + hi - lo]) {
                            *a = a.wrapping_add(wv.wrapping_mul(v as i32));
                        }
                    } else {
                        for (a, &v) in row[lo..hi]
                            .iter_mut()
                            .zip(src[s0..].iter().step_by(g.stride))
                        {
                            *a = a.wrapping_add(wv.wrapping_mul(v as i32));
                        }
                    }
                }
            }
        }
    }
}

fn conv_depthwise(x: &QTensor, c: &QConv) -> Result<QTensor> {
    let g = geometry(x, c)?;
    let [ch_n, _, kh, kw] = c.weight_shape;
    if ch_n != x.c {
        return Err(Error::Internal(format!(
            "depthwise expects {ch_n} channels, got {}",
            x.c
        )));
    }
    let xs = centered(&x.data, x.q.zero_point as i16);
    let p = g.out_w * g.out_h;
    let rq = Requant::new(c);
    let mut out = vec![0i8; ch_n * p];
    let mut acc = vec![0i32; p];
    let ranges: Vec<(usize, usize)> = (0..kw).map(|kx| valid_cols(&g, x.w, kx)).collect();
    for ch in 0..ch_n {
        let plane = &xs[ch * x.h * x.w..(ch + 1) * x.h * x.w];
        let wk = &c.weight[ch * kh * kw..(ch + 1) * kh * kw];
        acc.fill(c.bias[ch]);
        depthwise_channel(plane, x.h, x.w, wk, &g, &ranges, &mut acc);
        requant(&acc, &mut out[ch * p..(ch + 1) * p], rq);
    }
    Ok(QTensor {
        c: ch_n,
        h: g.out_h,
        w: g.out_w,
        data: out,
        q: c.output,
    })
}

pub(super) fn run_conv(x: &QTensor, c: &QConv) -> Result<QTensor> {
    if c.depthwise {
        conv_depthwise(x, c)
    } else {
        conv_dense(x, c)
    }
}

multiversion! {
    fn add_requant(a: &[i8], b: &[i8], p: &QAdd) -> Vec<i8> {
        let ma = (p.a.scale / p.output.scale) as f32;
        let mb = (p.b.scale / p.output.scale) as f32;
        let (za, zb, zo) = (p.a.zero_point, p.b.zero_point, p.output.zero_point);
        a.iter()
            .zip(b)
            .map(|(&x, &y)| {
                let v = (((x as i32 - za) as f32 * ma + (y as i32 - zb) as f32 * mb)
                    .round_ties_even() as i32)
                    .saturating_add(zo);
                v.clamp(QMIN, QMAX) as i8
            })
            .collect()
    }
}

/// Residual sum, requantized to the calibrated output range.
pub(super) fn residual_add(a: &QTensor, b: &QTensor, p: &QAdd) -> Result<QTensor> {
    if (a.c, a.h, a.w) != (b.c, b.h, b.w) {
        return Err(Error::Internal("residual operands differ in shape".into()));
    }
    Ok(QTensor {
        c: a.c,
        h: a.h,
        w: a.w,
        data: add_requant(&a.data, &b.data, p),
        q: p.output,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gemm_paths_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &(co, k, p) in &[
            (1, 1, 1),
            (3, 5, 17),
            (30, 576, 33),
            (8, 16, 64),
            (5, 9, 100),
        ] {
            let w: Vec<i8> = (0..co * k).map(|_| rng.random()).collect();
            let x: Vec<i16> = (0..k * p).map(|_| rng.random_range(-255..=255)).collect();
            let bias: Vec<i32> = (0..co).map(|_| rng.random_range(-5000..5000)).collect();
            let rq = Requant {
                m: 0.001,
                zp: -3,
                lo: -128,
                hi: 127,
            };
            let mut a = vec![0i8; co * p];
            let mut b = vec![0i8; co * p];
            gemm(&w, &x, &bias, k, p, rq, &mut a);
            gemm_scalar(&w, &x, &bias, k, p, rq, &mut b);
            assert_eq!(a, b, "co {co} k {k} p {p}");
            // Direct definition for one element.
            let o = co - 1;
            let acc: i32 = bias[o]
                + (0..k)
                    .map(|kk| w[o * k + kk] as i32 * x[kk * p] as i32)
                    .sum::<i32>();
            let v = ((acc as f32 * rq.m).round_ties_even() as i32 + rq.zp).clamp(-128, 127) as i8;
            assert_eq!(a[o * p], v);
        }
    }
}

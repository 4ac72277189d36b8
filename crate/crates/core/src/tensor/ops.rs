//! The differentiable op set: conv3d, pixel shuffle, stochastic binarizer,
//! pointwise activations, concat/slice/repeat and scalar reductions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::{Shape5, Tensor5};

/// Below this many multiply-accumulates a convolution stays single-threaded.
const PAR_THRESHOLD: usize = 1 << 15;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinarizeMode {
    /// Stochastic: +1 with probability (1+x)/2, so E[out] = x.
    Train,
    /// Deterministic sign, with sign(0) = +1.
    Eval,
}

#[derive(Clone, Copy)]
struct ConvGeom {
    stride: (usize, usize, usize),
    dilation: (usize, usize, usize),
    padding: (usize, usize, usize),
}

fn out_extent(input: usize, k: usize, s: usize, d: usize, p: usize) -> Option<usize> {
    let span = d * (k - 1) + 1;
    let padded = input + 2 * p;
    if padded < span {
        return None;
    }
    Some((padded - span) / s + 1)
}

/// Output positions `o` for which `o*s + k*d - p` lands inside `[0, input)`.
#[inline]
fn valid_out_range(input: usize, out: usize, k: usize, s: usize, d: usize, p: usize) -> (usize, usize) {
    let off = k as i64 * d as i64 - p as i64;
    let lo = if off >= 0 {
        0
    } else {
        ((-off) as usize).div_ceil(s)
    };
    let hi_num = input as i64 - 1 - off;
    if hi_num < 0 {
        return (1, 0); // empty
    }
    let hi = (hi_num as usize / s).min(out - 1);
    (lo, hi)
}

fn conv3d_forward<S: Scalar>(
    x: &[S],
    xs: Shape5,
    w: &[S],
    ws: Shape5,
    bias: Option<&[S]>,
    g: ConvGeom,
    os: Shape5,
) -> Vec<S> {
    let mut out = vec![S::zero(); os.numel()];
    let plane = os.t * os.h * os.w;
    let work = os.numel() * ws.c * ws.t * ws.h * ws.w;
    for n in 0..os.n {
        let out_n = &mut out[n * os.c * plane..(n + 1) * os.c * plane];
        let body = |oc: usize, out_plane: &mut [S]| {
            if let Some(b) = bias {
                out_plane.fill(b[oc]);
            }
            for ic in 0..ws.c {
                for kt in 0..ws.t {
                    let (t_lo, t_hi) = valid_out_range(xs.t, os.t, kt, g.stride.0, g.dilation.0, g.padding.0);
                    for kh in 0..ws.h {
                        let (h_lo, h_hi) =
                            valid_out_range(xs.h, os.h, kh, g.stride.1, g.dilation.1, g.padding.1);
                        for kw in 0..ws.w {
                            let (w_lo, w_hi) =
                                valid_out_range(xs.w, os.w, kw, g.stride.2, g.dilation.2, g.padding.2);
                            if t_lo > t_hi || h_lo > h_hi || w_lo > w_hi {
                                continue;
                            }
                            let wv = w[ws.idx(oc, ic, kt, kh, kw)];
                            if wv == S::zero() {
                                continue;
                            }
                            for ot in t_lo..=t_hi {
                                let it = ot * g.stride.0 + kt * g.dilation.0 - g.padding.0;
                                for oh in h_lo..=h_hi {
                                    let ih = oh * g.stride.1 + kh * g.dilation.1 - g.padding.1;
                                    let in_base = xs.idx(n, ic, it, ih, 0);
                                    let out_base = (ot * os.h + oh) * os.w;
                                    let iw0 = w_lo * g.stride.2 + kw * g.dilation.2 - g.padding.2;
                                    let in_row = &x[in_base..];
                                    let out_row = &mut out_plane[out_base..out_base + os.w];
                                    let mut iw = iw0;
                                    for ow in w_lo..=w_hi {
                                        out_row[ow] += wv * in_row[iw];
                                        iw += g.stride.2;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        };
        if work > PAR_THRESHOLD {
            out_n
                .par_chunks_mut(plane)
                .enumerate()
                .for_each(|(oc, p)| body(oc, p));
        } else {
            for (oc, p) in out_n.chunks_mut(plane).enumerate() {
                body(oc, p);
            }
        }
    }
    out
}

/// Gradients w.r.t. weight and bias: parallel over output channels.
fn conv3d_grad_w<S: Scalar>(
    x: &[S],
    xs: Shape5,
    go: &[S],
    os: Shape5,
    ws: Shape5,
    g: ConvGeom,
    want_bias: bool,
) -> (Vec<S>, Option<Vec<S>>) {
    let mut gw = vec![S::zero(); ws.numel()];
    let mut gb = if want_bias {
        Some(vec![S::zero(); os.c])
    } else {
        None
    };
    let kchunk = ws.c * ws.t * ws.h * ws.w;
    let work = os.numel() * kchunk;
    let body = |oc: usize, gw_oc: &mut [S], gb_oc: Option<&mut S>| {
        if let Some(gb_oc) = gb_oc {
            let mut acc = S::zero();
            for n in 0..os.n {
                let base = os.idx(n, oc, 0, 0, 0);
                for v in &go[base..base + os.t * os.h * os.w] {
                    acc += *v;
                }
            }
            *gb_oc = acc;
        }
        for ic in 0..ws.c {
            for kt in 0..ws.t {
                let (t_lo, t_hi) = valid_out_range(xs.t, os.t, kt, g.stride.0, g.dilation.0, g.padding.0);
                for kh in 0..ws.h {
                    let (h_lo, h_hi) = valid_out_range(xs.h, os.h, kh, g.stride.1, g.dilation.1, g.padding.1);
                    for kw in 0..ws.w {
                        let (w_lo, w_hi) =
                            valid_out_range(xs.w, os.w, kw, g.stride.2, g.dilation.2, g.padding.2);
                        if t_lo > t_hi || h_lo > h_hi || w_lo > w_hi {
                            continue;
                        }
                        let mut acc = S::zero();
                        for n in 0..os.n {
                            for ot in t_lo..=t_hi {
                                let it = ot * g.stride.0 + kt * g.dilation.0 - g.padding.0;
                                for oh in h_lo..=h_hi {
                                    let ih = oh * g.stride.1 + kh * g.dilation.1 - g.padding.1;
                                    let in_base = xs.idx(n, ic, it, ih, 0);
                                    let go_base = os.idx(n, oc, ot, oh, 0);
                                    let mut iw = w_lo * g.stride.2 + kw * g.dilation.2 - g.padding.2;
                                    for ow in w_lo..=w_hi {
                                        acc += x[in_base + iw] * go[go_base + ow];
                                        iw += g.stride.2;
                                    }
                                }
                            }
                        }
                        gw_oc[((ic * ws.t + kt) * ws.h + kh) * ws.w + kw] = acc;
                    }
                }
            }
        }
    };
    if work > PAR_THRESHOLD {
        if let Some(gb) = gb.as_mut() {
            gw.par_chunks_mut(kchunk)
                .zip(gb.par_iter_mut())
                .enumerate()
                .for_each(|(oc, (gw_oc, gb_oc))| body(oc, gw_oc, Some(gb_oc)));
        } else {
            gw.par_chunks_mut(kchunk)
                .enumerate()
                .for_each(|(oc, gw_oc)| body(oc, gw_oc, None));
        }
    } else {
        for oc in 0..os.c {
            let gw_oc = &mut gw[oc * kchunk..(oc + 1) * kchunk];
            let gb_oc = gb.as_mut().map(|gb| &mut gb[oc]);
            body(oc, gw_oc, gb_oc.map(|r| &mut *r));
        }
    }
    (gw, gb)
}

/// Gradient w.r.t. the input: parallel over input channels.
fn conv3d_grad_x<S: Scalar>(
    w: &[S],
    ws: Shape5,
    go: &[S],
    os: Shape5,
    xs: Shape5,
    g: ConvGeom,
) -> Vec<S> {
    let mut gx = vec![S::zero(); xs.numel()];
    let in_plane = xs.t * xs.h * xs.w;
    let work = os.numel() * ws.c * ws.t * ws.h * ws.w;
    for n in 0..xs.n {
        let gx_n = &mut gx[n * xs.c * in_plane..(n + 1) * xs.c * in_plane];
        let body = |ic: usize, gx_plane: &mut [S]| {
            for oc in 0..os.c {
                for kt in 0..ws.t {
                    let (t_lo, t_hi) = valid_out_range(xs.t, os.t, kt, g.stride.0, g.dilation.0, g.padding.0);
                    for kh in 0..ws.h {
                        let (h_lo, h_hi) =
                            valid_out_range(xs.h, os.h, kh, g.stride.1, g.dilation.1, g.padding.1);
                        for kw in 0..ws.w {
                            let (w_lo, w_hi) =
                                valid_out_range(xs.w, os.w, kw, g.stride.2, g.dilation.2, g.padding.2);
                            if t_lo > t_hi || h_lo > h_hi || w_lo > w_hi {
                                continue;
                            }
                            let wv = w[ws.idx(oc, ic, kt, kh, kw)];
                            if wv == S::zero() {
                                continue;
                            }
                            for ot in t_lo..=t_hi {
                                let it = ot * g.stride.0 + kt * g.dilation.0 - g.padding.0;
                                for oh in h_lo..=h_hi {
                                    let ih = oh * g.stride.1 + kh * g.dilation.1 - g.padding.1;
                                    let gx_base = (it * xs.h + ih) * xs.w;
                                    let go_base = os.idx(n, oc, ot, oh, 0);
                                    let mut iw = w_lo * g.stride.2 + kw * g.dilation.2 - g.padding.2;
                                    for ow in w_lo..=w_hi {
                                        gx_plane[gx_base + iw] += wv * go[go_base + ow];
                                        iw += g.stride.2;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        };
        if work > PAR_THRESHOLD {
            gx_n.par_chunks_mut(in_plane)
                .enumerate()
                .for_each(|(ic, p)| body(ic, p));
        } else {
            for (ic, p) in gx_n.chunks_mut(in_plane).enumerate() {
                body(ic, p);
            }
        }
    }
    gx
}

impl<S: Scalar> Tensor5<S> {
    /// 3D cross-correlation. `weight` is (out_ch, in_ch, kt, kh, kw); `bias`
    /// is one value per output channel.
    pub fn conv3d(
        &self,
        weight: &Tensor5<S>,
        bias: Option<&Tensor5<S>>,
        stride: (usize, usize, usize),
        dilation: (usize, usize, usize),
        padding: (usize, usize, usize),
    ) -> Result<Tensor5<S>> {
        let xs = self.shape();
        let ws = weight.shape();
        if ws.c != xs.c {
            return Err(Error::shape("conv3d input channels", xs, ws));
        }
        if let Some(b) = bias {
            if b.numel() != ws.n {
                return Err(Error::shape(
                    "conv3d bias",
                    b.shape(),
                    format!("({},)", ws.n),
                ));
            }
        }
        let ot = out_extent(xs.t, ws.t, stride.0, dilation.0, padding.0);
        let oh = out_extent(xs.h, ws.h, stride.1, dilation.1, padding.1);
        let ow = out_extent(xs.w, ws.w, stride.2, dilation.2, padding.2);
        let (ot, oh, ow) = match (ot, oh, ow) {
            (Some(a), Some(b), Some(c)) if a > 0 && b > 0 && c > 0 => (a, b, c),
            _ => return Err(Error::shape("conv3d output extent", xs, ws)),
        };
        let os = Shape5::new(xs.n, ws.n, ot, oh, ow);
        let geom = ConvGeom {
            stride,
            dilation,
            padding,
        };

        let values = {
            let x = self.values();
            let w = weight.values();
            let b = bias.map(|b| b.value_vec());
            conv3d_forward(&x, xs, &w, ws, b.as_deref(), geom, os)
        };

        let parents: Vec<Tensor5<S>> = match bias {
            Some(b) => vec![self.clone(), weight.clone(), b.clone()],
            None => vec![self.clone(), weight.clone()],
        };
        Ok(Tensor5::from_op(
            os,
            values,
            parents,
            Box::new(move |go, _out, parents| {
                let input = &parents[0];
                let weight = &parents[1];
                let bias = parents.get(2);
                if weight.needs_grad() || bias.is_some_and(|b| b.needs_grad()) {
                    let (gw, gb) = {
                        let x = input.values();
                        conv3d_grad_w(&x, xs, &go, os, ws, geom, bias.is_some())
                    };
                    weight.accum_grad(gw);
                    if let (Some(b), Some(gb)) = (bias, gb) {
                        b.accum_grad(gb);
                    }
                }
                if input.needs_grad() {
                    let gx = {
                        let w = weight.values();
                        conv3d_grad_x(&w, ws, &go, os, xs, geom)
                    };
                    input.accum_grad(gx);
                }
            }),
        ))
    }

    /// Rearranges channels into space-time: (n, c, t, h, w) with c divisible
    /// by r^3 becomes (n, c/r^3, rt, rh, rw). A pure permutation of values.
    pub fn pixel_shuffle3d(&self, r: usize) -> Result<Tensor5<S>> {
        let xs = self.shape();
        let r3 = r * r * r;
        if xs.c % r3 != 0 {
            return Err(Error::shape(
                "pixel_shuffle3d channels",
                xs,
                format!("c divisible by {}", r3),
            ));
        }
        let os = Shape5::new(xs.n, xs.c / r3, xs.t * r, xs.h * r, xs.w * r);
        let forward = |src: &[S]| {
            let mut dst = vec![S::zero(); os.numel()];
            for n in 0..xs.n {
                for co in 0..os.c {
                    for dt in 0..r {
                        for dh in 0..r {
                            for dw in 0..r {
                                let ci = co * r3 + (dt * r + dh) * r + dw;
                                for t in 0..xs.t {
                                    for h in 0..xs.h {
                                        let sbase = xs.idx(n, ci, t, h, 0);
                                        let dbase = os.idx(n, co, t * r + dt, h * r + dh, dw);
                                        for w in 0..xs.w {
                                            dst[dbase + w * r] = src[sbase + w];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            dst
        };
        let values = forward(&self.values());
        Ok(Tensor5::from_op(
            os,
            values,
            vec![self.clone()],
            Box::new(move |go, _out, parents| {
                // inverse permutation
                let mut gx = vec![S::zero(); xs.numel()];
                for n in 0..xs.n {
                    for co in 0..os.c {
                        for dt in 0..r {
                            for dh in 0..r {
                                for dw in 0..r {
                                    let ci = co * r3 + (dt * r + dh) * r + dw;
                                    for t in 0..xs.t {
                                        for h in 0..xs.h {
                                            let sbase = xs.idx(n, ci, t, h, 0);
                                            let dbase = os.idx(n, co, t * r + dt, h * r + dh, dw);
                                            for w in 0..xs.w {
                                                gx[sbase + w] = go[dbase + w * r];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                parents[0].accum_grad(gx);
            }),
        ))
    }

    /// Binarization to {-1, +1} with a straight-through backward: the
    /// upstream gradient passes to the input unchanged.
    pub fn binarize(&self, mode: BinarizeMode, rng_seed: u64) -> Result<Tensor5<S>> {
        let xs = self.shape();
        let one = S::one();
        let values: Vec<S> = {
            let x = self.values();
            for (i, v) in x.iter().enumerate() {
                let vf = v.to_f64_();
                if !(-1.0..=1.0).contains(&vf) {
                    return Err(Error::Domain(format!(
                        "binarize input {} at flat index {} outside [-1, 1]",
                        vf, i
                    )));
                }
            }
            match mode {
                BinarizeMode::Eval => x
                    .iter()
                    .map(|v| if *v < S::zero() { -one } else { one })
                    .collect(),
                BinarizeMode::Train => {
                    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
                    x.iter()
                        .map(|v| {
                            let p_plus = (1.0 + v.to_f64_()) / 2.0;
                            if rng.gen::<f64>() < p_plus {
                                one
                            } else {
                                -one
                            }
                        })
                        .collect()
                }
            }
        };
        Ok(Tensor5::from_op(
            xs,
            values,
            vec![self.clone()],
            Box::new(move |go, _out, parents| parents[0].accum_grad(go)),
        ))
    }

    pub fn tanh(&self) -> Tensor5<S> {
        let xs = self.shape();
        let values: Vec<S> = self.values().iter().map(|v| v.tanh()).collect();
        Tensor5::from_op(
            xs,
            values,
            vec![self.clone()],
            Box::new(move |mut go, out, parents| {
                let y = out.values();
                for (g, yv) in go.iter_mut().zip(y.iter()) {
                    *g *= S::one() - *yv * *yv;
                }
                drop(y);
                parents[0].accum_grad(go);
            }),
        )
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor5<S> {
        let xs = self.shape();
        let a = S::from_f64_(slope);
        let values: Vec<S> = self
            .values()
            .iter()
            .map(|v| if *v >= S::zero() { *v } else { a * *v })
            .collect();
        Tensor5::from_op(
            xs,
            values,
            vec![self.clone()],
            Box::new(move |mut go, _out, parents| {
                {
                    let x = parents[0].values();
                    for (g, xv) in go.iter_mut().zip(x.iter()) {
                        if *xv < S::zero() {
                            *g *= a;
                        }
                    }
                }
                parents[0].accum_grad(go);
            }),
        )
    }

    /// Sigmoid clamped to `[eps, 1-eps]`; gradient is zero where clamped.
    pub fn sigmoid_clamped(&self, eps: f64) -> Tensor5<S> {
        let xs = self.shape();
        let lo = S::from_f64_(eps);
        let hi = S::from_f64_(1.0 - eps);
        let values: Vec<S> = self
            .values()
            .iter()
            .map(|v| {
                let y = S::one() / (S::one() + (-*v).exp());
                y.max(lo).min(hi)
            })
            .collect();
        Tensor5::from_op(
            xs,
            values,
            vec![self.clone()],
            Box::new(move |mut go, out, parents| {
                let y = out.values();
                for (g, yv) in go.iter_mut().zip(y.iter()) {
                    if *yv <= lo || *yv >= hi {
                        *g = S::zero();
                    } else {
                        *g *= *yv * (S::one() - *yv);
                    }
                }
                drop(y);
                parents[0].accum_grad(go);
            }),
        )
    }

    pub fn add(&self, other: &Tensor5<S>) -> Result<Tensor5<S>> {
        let xs = self.shape();
        if xs != other.shape() {
            return Err(Error::shape("add", xs, other.shape()));
        }
        let values: Vec<S> = self
            .values()
            .iter()
            .zip(other.values().iter())
            .map(|(a, b)| *a + *b)
            .collect();
        Ok(Tensor5::from_op(
            xs,
            values,
            vec![self.clone(), other.clone()],
            Box::new(move |go, _out, parents| {
                parents[0].accum_grad(go.clone());
                parents[1].accum_grad(go);
            }),
        ))
    }

    pub fn mul(&self, other: &Tensor5<S>) -> Result<Tensor5<S>> {
        let xs = self.shape();
        if xs != other.shape() {
            return Err(Error::shape("mul", xs, other.shape()));
        }
        let values: Vec<S> = self
            .values()
            .iter()
            .zip(other.values().iter())
            .map(|(a, b)| *a * *b)
            .collect();
        Ok(Tensor5::from_op(
            xs,
            values,
            vec![self.clone(), other.clone()],
            Box::new(move |go, _out, parents| {
                if parents[0].needs_grad() {
                    let b = parents[1].value_vec();
                    let ga: Vec<S> = go.iter().zip(b.iter()).map(|(g, b)| *g * *b).collect();
                    parents[0].accum_grad(ga);
                }
                if parents[1].needs_grad() {
                    let a = parents[0].value_vec();
                    let gb: Vec<S> = go.iter().zip(a.iter()).map(|(g, a)| *g * *a).collect();
                    parents[1].accum_grad(gb);
                }
            }),
        ))
    }

    pub fn scale(&self, k: f64) -> Tensor5<S> {
        let xs = self.shape();
        let ks = S::from_f64_(k);
        let values: Vec<S> = self.values().iter().map(|v| *v * ks).collect();
        Tensor5::from_op(
            xs,
            values,
            vec![self.clone()],
            Box::new(move |mut go, _out, parents| {
                for g in go.iter_mut() {
                    *g *= ks;
                }
                parents[0].accum_grad(go);
            }),
        )
    }

    /// Concatenation along the channel axis.
    pub fn concat_c(parts: &[&Tensor5<S>]) -> Result<Tensor5<S>> {
        assert!(!parts.is_empty());
        let first = parts[0].shape();
        let mut total_c = 0;
        for p in parts {
            let s = p.shape();
            if (s.n, s.t, s.h, s.w) != (first.n, first.t, first.h, first.w) {
                return Err(Error::shape("concat_c", first, s));
            }
            total_c += s.c;
        }
        let os = Shape5::new(first.n, total_c, first.t, first.h, first.w);
        let plane = first.t * first.h * first.w;
        let mut values = vec![S::zero(); os.numel()];
        let mut c_off = 0;
        for p in parts {
            let s = p.shape();
            let v = p.values();
            for n in 0..s.n {
                let src = &v[n * s.c * plane..(n + 1) * s.c * plane];
                let dst_base = (n * total_c + c_off) * plane;
                values[dst_base..dst_base + s.c * plane].copy_from_slice(src);
            }
            c_off += s.c;
        }
        let sizes: Vec<usize> = parts.iter().map(|p| p.shape().c).collect();
        let parents: Vec<Tensor5<S>> = parts.iter().map(|p| (*p).clone()).collect();
        Ok(Tensor5::from_op(
            os,
            values,
            parents,
            Box::new(move |go, _out, parents| {
                let mut c_off = 0;
                for (p, &c) in parents.iter().zip(sizes.iter()) {
                    if p.needs_grad() {
                        let mut gp = vec![S::zero(); os.n * c * plane];
                        for n in 0..os.n {
                            let src_base = (n * total_c + c_off) * plane;
                            gp[n * c * plane..(n + 1) * c * plane]
                                .copy_from_slice(&go[src_base..src_base + c * plane]);
                        }
                        p.accum_grad(gp);
                    }
                    c_off += c;
                }
            }),
        ))
    }

    /// Sub-block along (t, h, w), keeping all batches and channels.
    pub fn slice5(
        &self,
        t0: usize,
        tl: usize,
        h0: usize,
        hl: usize,
        w0: usize,
        wl: usize,
    ) -> Result<Tensor5<S>> {
        let xs = self.shape();
        if t0 + tl > xs.t || h0 + hl > xs.h || w0 + wl > xs.w {
            return Err(Error::shape(
                "slice5",
                xs,
                format!("t{}+{} h{}+{} w{}+{}", t0, tl, h0, hl, w0, wl),
            ));
        }
        let os = Shape5::new(xs.n, xs.c, tl, hl, wl);
        let mut values = vec![S::zero(); os.numel()];
        {
            let x = self.values();
            for n in 0..xs.n {
                for c in 0..xs.c {
                    for t in 0..tl {
                        for h in 0..hl {
                            let src = xs.idx(n, c, t0 + t, h0 + h, w0);
                            let dst = os.idx(n, c, t, h, 0);
                            values[dst..dst + wl].copy_from_slice(&x[src..src + wl]);
                        }
                    }
                }
            }
        }
        Ok(Tensor5::from_op(
            os,
            values,
            vec![self.clone()],
            Box::new(move |go, _out, parents| {
                let mut gx = vec![S::zero(); xs.numel()];
                for n in 0..xs.n {
                    for c in 0..xs.c {
                        for t in 0..tl {
                            for h in 0..hl {
                                let dst = xs.idx(n, c, t0 + t, h0 + h, w0);
                                let src = os.idx(n, c, t, h, 0);
                                gx[dst..dst + wl].copy_from_slice(&go[src..src + wl]);
                            }
                        }
                    }
                }
                parents[0].accum_grad(gx);
            }),
        ))
    }

    /// Broadcasts a single-frame tensor (t = 1) across `n_t` time steps.
    pub fn repeat_t(&self, n_t: usize) -> Result<Tensor5<S>> {
        let xs = self.shape();
        if xs.t != 1 {
            return Err(Error::shape("repeat_t input", xs, "t == 1"));
        }
        let os = Shape5::new(xs.n, xs.c, n_t, xs.h, xs.w);
        let plane = xs.h * xs.w;
        let mut values = vec![S::zero(); os.numel()];
        {
            let x = self.values();
            for n in 0..xs.n {
                for c in 0..xs.c {
                    let src = &x[xs.idx(n, c, 0, 0, 0)..xs.idx(n, c, 0, 0, 0) + plane];
                    for t in 0..n_t {
                        let dst = os.idx(n, c, t, 0, 0);
                        values[dst..dst + plane].copy_from_slice(src);
                    }
                }
            }
        }
        Ok(Tensor5::from_op(
            os,
            values,
            vec![self.clone()],
            Box::new(move |go, _out, parents| {
                let mut gx = vec![S::zero(); xs.numel()];
                for n in 0..xs.n {
                    for c in 0..xs.c {
                        let dst = xs.idx(n, c, 0, 0, 0);
                        for t in 0..n_t {
                            let src = os.idx(n, c, t, 0, 0);
                            for i in 0..plane {
                                gx[dst + i] += go[src + i];
                            }
                        }
                    }
                }
                parents[0].accum_grad(gx);
            }),
        ))
    }

    pub fn sum_all(&self) -> Tensor5<S> {
        let xs = self.shape();
        let total = self
            .values()
            .iter()
            .fold(S::zero(), |acc, v| acc + *v);
        Tensor5::from_op(
            Shape5::new(1, 1, 1, 1, 1),
            vec![total],
            vec![self.clone()],
            Box::new(move |go, _out, parents| {
                parents[0].accum_grad(vec![go[0]; xs.numel()]);
            }),
        )
    }

    pub fn mean_all(&self) -> Tensor5<S> {
        let n = self.numel();
        self.sum_all().scale(1.0 / n as f64)
    }

    /// Mean squared error against `target` (mean over all elements).
    pub fn mse(&self, target: &Tensor5<S>) -> Result<Tensor5<S>> {
        let xs = self.shape();
        if xs != target.shape() {
            return Err(Error::shape("mse", xs, target.shape()));
        }
        let n = xs.numel();
        let inv_n = S::from_f64_(1.0 / n as f64);
        let total = {
            let a = self.values();
            let b = target.values();
            a.iter()
                .zip(b.iter())
                .fold(S::zero(), |acc, (x, y)| {
                    let d = *x - *y;
                    acc + d * d
                })
        };
        Ok(Tensor5::from_op(
            Shape5::new(1, 1, 1, 1, 1),
            vec![total * inv_n],
            vec![self.clone(), target.clone()],
            Box::new(move |go, _out, parents| {
                let two = S::from_f64_(2.0);
                let k = go[0] * two * inv_n;
                let diffs: Vec<S> = {
                    let a = parents[0].values();
                    let b = parents[1].values();
                    a.iter().zip(b.iter()).map(|(x, y)| (*x - *y) * k).collect()
                };
                if parents[1].needs_grad() {
                    parents[1].accum_grad(diffs.iter().map(|d| -*d).collect());
                }
                parents[0].accum_grad(diffs);
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ones(shape: Shape5) -> Tensor5<f64> {
        Tensor5::param(shape, vec![1.0; shape.numel()])
    }

    #[test]
    fn conv3d_scaling_kernel() {
        let x = ones(Shape5::new(1, 1, 1, 3, 3));
        let w = Tensor5::param(Shape5::new(1, 1, 1, 1, 1), vec![2.0]);
        let y = x.conv3d(&w, None, (1, 1, 1), (1, 1, 1), (0, 0, 0)).unwrap();
        assert_eq!(y.shape(), Shape5::new(1, 1, 1, 3, 3));
        assert!(y.values().iter().all(|v| *v == 2.0));
    }

    #[test]
    fn conv3d_shape_law() {
        let x = ones(Shape5::new(1, 4, 8, 16, 16));
        let w = Tensor5::param(Shape5::new(8, 4, 2, 2, 2), vec![0.1; 8 * 4 * 8]);
        let y = x.conv3d(&w, None, (2, 2, 2), (1, 1, 1), (0, 0, 0)).unwrap();
        assert_eq!(y.shape(), Shape5::new(1, 8, 4, 8, 8));
    }

    #[test]
    fn conv3d_dilated_same_size() {
        let x = ones(Shape5::new(1, 1, 1, 8, 8));
        let w = Tensor5::param(Shape5::new(1, 1, 1, 3, 3), vec![1.0; 9]);
        let y = x.conv3d(&w, None, (1, 1, 1), (1, 2, 2), (0, 2, 2)).unwrap();
        assert_eq!(y.shape(), Shape5::new(1, 1, 1, 8, 8));
    }

    #[test]
    fn conv3d_channel_mismatch() {
        let x = ones(Shape5::new(1, 3, 1, 4, 4));
        let w = Tensor5::param(Shape5::new(2, 4, 1, 1, 1), vec![1.0; 8]);
        assert!(matches!(
            x.conv3d(&w, None, (1, 1, 1), (1, 1, 1), (0, 0, 0)),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn conv3d_matches_naive_reference() {
        // 2-channel input, 3 kernels, stride 2 in h, padding 1 in w
        let xs = Shape5::new(1, 2, 2, 5, 4);
        let ws = Shape5::new(3, 2, 2, 2, 3);
        let xv: Vec<f64> = (0..xs.numel()).map(|i| ((i * 31 % 17) as f64) / 7.0 - 1.0).collect();
        let wv: Vec<f64> = (0..ws.numel()).map(|i| ((i * 13 % 11) as f64) / 5.0 - 1.0).collect();
        let bv = vec![0.3, -0.2, 0.05];
        let x = Tensor5::param(xs, xv.clone());
        let w = Tensor5::param(ws, wv.clone());
        let b = Tensor5::param(Shape5::new(1, 3, 1, 1, 1), bv.clone());
        let y = x.conv3d(&w, Some(&b), (1, 2, 1), (1, 1, 1), (0, 0, 1)).unwrap();
        let os = y.shape();

        // independent scalar-loop oracle
        for n in 0..os.n {
            for oc in 0..os.c {
                for ot in 0..os.t {
                    for oh in 0..os.h {
                        for ow in 0..os.w {
                            let mut acc = bv[oc];
                            for ic in 0..ws.c {
                                for kt in 0..ws.t {
                                    for kh in 0..ws.h {
                                        for kw in 0..ws.w {
                                            let it = ot as i64 + kt as i64;
                                            let ih = (oh * 2 + kh) as i64;
                                            let iw = ow as i64 + kw as i64 - 1;
                                            if it < xs.t as i64 && ih < xs.h as i64 && (0..xs.w as i64).contains(&iw) {
                                                acc += xv[xs.idx(n, ic, it as usize, ih as usize, iw as usize)]
                                                    * wv[ws.idx(oc, ic, kt, kh, kw)];
                                            }
                                        }
                                    }
                                }
                            }
                            let got = y.values()[os.idx(n, oc, ot, oh, ow)];
                            assert!((got - acc).abs() < 1e-12, "mismatch at {oc},{ot},{oh},{ow}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn pixel_shuffle_shape_and_inverse() {
        let xs = Shape5::new(1, 8, 1, 2, 2);
        let x = Tensor5::param(xs, (0..32).map(|i| i as f64).collect());
        let y = x.pixel_shuffle3d(2).unwrap();
        assert_eq!(y.shape(), Shape5::new(1, 1, 2, 4, 4));

        // permutation preserves the multiset
        let mut a = x.value_vec();
        let mut b = y.value_vec();
        a.sort_by(|p, q| p.partial_cmp(q).unwrap());
        b.sort_by(|p, q| p.partial_cmp(q).unwrap());
        assert_eq!(a, b);

        // backward is the inverse permutation: loss = sum(y * k) gives grad = k permuted back
        let k = Tensor5::constant(y.shape(), (0..32).map(|i| (i * i) as f64).collect());
        let loss = y.mul(&k).unwrap().sum_all();
        loss.backward().unwrap();
        let g = x.grad_vec().unwrap();
        let yv = y.value_vec();
        let kv = k.value_vec();
        // g[src] must equal k at the position x[src] was shuffled to
        for (src, gv) in g.iter().enumerate() {
            let xval = x.values()[src];
            let dst = yv.iter().position(|v| *v == xval).unwrap();
            assert_eq!(*gv, kv[dst]);
        }
    }

    #[test]
    fn pixel_shuffle_constant_stays_constant() {
        let x = Tensor5::param(Shape5::new(1, 8, 2, 2, 2), vec![7.0; 64]);
        let y = x.pixel_shuffle3d(2).unwrap();
        assert!(y.values().iter().all(|v| *v == 7.0));
    }

    #[test]
    fn pixel_shuffle_rejects_indivisible_channels() {
        let x = Tensor5::param(Shape5::new(1, 6, 1, 2, 2), vec![0.0; 24]);
        assert!(matches!(x.pixel_shuffle3d(2), Err(Error::Shape { .. })));
    }

    #[test]
    fn binarize_eval_is_sign() {
        let x = Tensor5::param(Shape5::new(1, 1, 1, 1, 4), vec![0.3f64, -0.7, 0.0, 1.0]);
        let y = x.binarize(BinarizeMode::Eval, 0).unwrap();
        assert_eq!(y.value_vec(), vec![1.0, -1.0, 1.0, 1.0]);
    }

    #[test]
    fn binarize_domain_error() {
        let x = Tensor5::param(Shape5::new(1, 1, 1, 1, 1), vec![1.5f64]);
        assert!(matches!(
            x.binarize(BinarizeMode::Eval, 0),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn binarize_train_mean_converges() {
        let n = 100_000;
        for (target, seed) in [(0.0f64, 11u64), (0.3, 12)] {
            let x = Tensor5::constant(Shape5::new(1, 1, 1, 1, n), vec![target; n]);
            let y = x.binarize(BinarizeMode::Train, seed).unwrap();
            let mean: f64 = y.values().iter().sum::<f64>() / n as f64;
            let stderr = (1.0 - target * target).sqrt() / (n as f64).sqrt();
            let tol = (3.0 * stderr).max(0.01);
            assert!(
                (mean - target).abs() < tol,
                "mean {mean} vs {target} (tol {tol})"
            );
        }
    }

    #[test]
    fn binarize_straight_through_passes_gradient_exactly() {
        let x = Tensor5::param(Shape5::new(1, 1, 1, 1, 3), vec![0.2f64, -0.9, 0.5]);
        let y = x.binarize(BinarizeMode::Train, 42).unwrap();
        let k = Tensor5::constant(y.shape(), vec![2.0, -3.0, 0.25]);
        let loss = y.mul(&k).unwrap().sum_all();
        loss.backward().unwrap();
        assert_eq!(x.grad_vec().unwrap(), vec![2.0, -3.0, 0.25]);
    }

    #[test]
    fn binarize_train_deterministic_per_seed() {
        let x = Tensor5::constant(Shape5::new(1, 1, 1, 4, 4), vec![0.1f64; 16]);
        let a = x.binarize(BinarizeMode::Train, 7).unwrap().value_vec();
        let b = x.binarize(BinarizeMode::Train, 7).unwrap().value_vec();
        let c = x.binarize(BinarizeMode::Train, 8).unwrap().value_vec();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn slice_and_repeat_roundtrip_grads() {
        let x = Tensor5::param(Shape5::new(1, 2, 1, 3, 3), (0..18).map(|i| i as f64).collect());
        let r = x.repeat_t(4).unwrap();
        assert_eq!(r.shape(), Shape5::new(1, 2, 4, 3, 3));
        let s = r.slice5(1, 2, 0, 2, 1, 2).unwrap();
        assert_eq!(s.shape(), Shape5::new(1, 2, 2, 2, 2));
        let loss = s.sum_all();
        loss.backward().unwrap();
        let g = x.grad_vec().unwrap();
        // each of the 2 kept time steps contributes 1 per covered (h, w)
        let xs = x.shape();
        for c in 0..2 {
            for h in 0..3 {
                for w in 0..3 {
                    let expect = if h < 2 && (1..3).contains(&w) { 2.0 } else { 0.0 };
                    assert_eq!(g[xs.idx(0, c, 0, h, w)], expect);
                }
            }
        }
    }
}

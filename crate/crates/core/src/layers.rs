//! Layer kernels over `[channels, height, width]` tensors.
//!
//! Convolution is cross-correlation without kernel flip. Transposed
//! convolution is the exact adjoint of [`conv2d`] for the same weights and
//! padding, with weights laid out `[in, out, kh, kw]` (so a conv2d weight
//! `[out, in, kh, kw]` can be shared unchanged with its transpose).

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Lower bound applied to probabilities before taking logarithms.
pub const BCE_CLAMP: f64 = 1e-7;

/// Zero padding per side, in pixels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Padding {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Padding {
    pub fn uniform(p: usize) -> Self {
        Padding {
            top: p,
            bottom: p,
            left: p,
            right: p,
        }
    }

    /// TensorFlow-style "same" padding for a stride-`s` layer on an input
    /// whose side is a multiple of `s`: the extra row/column goes after.
    pub fn same_strided(kernel: (usize, usize), stride: (usize, usize)) -> Self {
        let total = |k: usize, s: usize| k.saturating_sub(s);
        let (th, tw) = (total(kernel.0, stride.0), total(kernel.1, stride.1));
        Padding {
            top: th / 2,
            bottom: th - th / 2,
            left: tw / 2,
            right: tw - tw / 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: Padding,
}

impl ConvSpec {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::InvalidArgument("channel counts must be positive".into()));
        }
        if self.kernel.0 == 0 || self.kernel.1 == 0 || self.stride.0 == 0 || self.stride.1 == 0 {
            return Err(Error::InvalidArgument(
                "kernel and stride must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Output `(h, w)` of a forward convolution, `None` if no position fits.
    pub fn conv_output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let p = &self.padding;
        let side = |n: usize, pad: usize, k: usize, s: usize| {
            let padded = n + pad;
            (padded >= k).then(|| (padded - k) / s + 1)
        };
        Some((
            side(h, p.top + p.bottom, self.kernel.0, self.stride.0)?,
            side(w, p.left + p.right, self.kernel.1, self.stride.1)?,
        ))
    }

    /// Output `(h, w)` of a transposed convolution: `(in - 1)·s + k - pad`.
    pub fn transpose_output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let p = &self.padding;
        let side = |n: usize, pad: usize, k: usize, s: usize| {
            let full = (n - 1) * s + k;
            (full > pad).then(|| full - pad)
        };
        if h == 0 || w == 0 {
            return None;
        }
        Some((
            side(h, p.top + p.bottom, self.kernel.0, self.stride.0)?,
            side(w, p.left + p.right, self.kernel.1, self.stride.1)?,
        ))
    }

    pub fn conv_weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel.0, self.kernel.1]
    }

    pub fn transpose_weight_shape(&self) -> [usize; 4] {
        [self.in_channels, self.out_channels, self.kernel.0, self.kernel.1]
    }

    pub fn weight_count(&self) -> usize {
        self.in_channels * self.out_channels * self.kernel.0 * self.kernel.1
    }
}

/// Gradient-reversal coefficient.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GrlSpec {
    pub lambda: f64,
}

impl GrlSpec {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "GRL lambda must be finite and non-negative, got {lambda}"
            )));
        }
        Ok(GrlSpec { lambda })
    }
}

/// Geometry shared by every kernel: a "small" grid at positions `(y, x)`
/// touching a "big" grid at `(y·s + ky − top, x·s + kx − left)`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Geometry {
    pub small: (usize, usize, usize),
    pub big: (usize, usize, usize),
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

/// Range of small-grid indices `y` with `0 <= y·s + k − pad < big_len`.
fn valid_range(small_len: usize, big_len: usize, stride: usize, k: usize, pad: usize) -> (usize, usize) {
    let d = k as isize - pad as isize;
    let s = stride as isize;
    let lo = if d >= 0 { 0 } else { (-d + s - 1) / s };
    let span = big_len as isize - d;
    let hi = if span <= 0 { 0 } else { (span + s - 1) / s };
    let hi = hi.min(small_len as isize);
    (lo.min(hi) as usize, hi as usize)
}

impl Geometry {
    /// Weights are always laid out `[small][big][kh][kw]`.
    fn weight_index(&self, small_ch: usize, big_ch: usize, ky: usize, kx: usize) -> usize {
        let (kh, kw) = self.kernel;
        ((small_ch * self.big.0 + big_ch) * kh + ky) * kw + kx
    }

    /// `small[a, y, x] += Σ w · big[b, y·s+ky−top, x·s+kx−left]`.
    pub fn gather(&self, big: &[f64], weight: &[f64], small: &mut [f64]) {
        let (sc, sh, sw) = self.small;
        let (bc, bh, bw) = self.big;
        let (kh, kw) = self.kernel;
        for a in 0..sc {
            let out = &mut small[a * sh * sw..(a + 1) * sh * sw];
            for b in 0..bc {
                let src = &big[b * bh * bw..(b + 1) * bh * bw];
                for ky in 0..kh {
                    let (y0, y1) = valid_range(sh, bh, self.stride.0, ky, self.pad.0);
                    for kx in 0..kw {
                        let wv = weight[self.weight_index(a, b, ky, kx)];
                        if wv == 0.0 {
                            continue;
                        }
                        let (x0, x1) = valid_range(sw, bw, self.stride.1, kx, self.pad.1);
                        if x0 == x1 {
                            continue;
                        }
                        for y in y0..y1 {
                            let by = y * self.stride.0 + ky - self.pad.0;
                            let row = &src[by * bw..(by + 1) * bw];
                            let orow = &mut out[y * sw..(y + 1) * sw];
                            let bx0 = x0 * self.stride.1 + kx - self.pad.1;
                            if self.stride.1 == 1 {
                                for (o, v) in orow[x0..x1].iter_mut().zip(&row[bx0..]) {
                                    *o += wv * v;
                                }
                            } else {
                                for (j, o) in orow[x0..x1].iter_mut().enumerate() {
                                    *o += wv * row[bx0 + j * self.stride.1];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// `big[b, y·s+ky−top, x·s+kx−left] += Σ w · small[a, y, x]`.
    pub fn scatter(&self, small: &[f64], weight: &[f64], big: &mut [f64]) {
        let (sc, sh, sw) = self.small;
        let (bc, bh, bw) = self.big;
        let (kh, kw) = self.kernel;
        for b in 0..bc {
            let dst = &mut big[b * bh * bw..(b + 1) * bh * bw];
            for a in 0..sc {
                let src = &small[a * sh * sw..(a + 1) * sh * sw];
                for ky in 0..kh {
                    let (y0, y1) = valid_range(sh, bh, self.stride.0, ky, self.pad.0);
                    for kx in 0..kw {
                        let wv = weight[self.weight_index(a, b, ky, kx)];
                        if wv == 0.0 {
                            continue;
                        }
                        let (x0, x1) = valid_range(sw, bw, self.stride.1, kx, self.pad.1);
                        if x0 == x1 {
                            continue;
                        }
                        for y in y0..y1 {
                            let by = y * self.stride.0 + ky - self.pad.0;
                            let row = &mut dst[by * bw..(by + 1) * bw];
                            let srow = &src[y * sw..(y + 1) * sw];
                            let bx0 = x0 * self.stride.1 + kx - self.pad.1;
                            for (j, v) in srow[x0..x1].iter().enumerate() {
                                row[bx0 + j * self.stride.1] += wv * v;
                            }
                        }
                    }
                }
            }
        }
    }

    /// Weight gradient `g[a][b][ky][kx] = Σ small[a,y,x] · big[b, …]`, laid
    /// out `[small_channels, big_channels, kh, kw]`.
    pub fn correlate_weights(&self, small: &[f64], big: &[f64], grad: &mut [f64]) {
        let (sc, sh, sw) = self.small;
        let (bc, bh, bw) = self.big;
        let (kh, kw) = self.kernel;
        for a in 0..sc {
            let s_ch = &small[a * sh * sw..(a + 1) * sh * sw];
            for b in 0..bc {
                let b_ch = &big[b * bh * bw..(b + 1) * bh * bw];
                for ky in 0..kh {
                    let (y0, y1) = valid_range(sh, bh, self.stride.0, ky, self.pad.0);
                    for kx in 0..kw {
                        let (x0, x1) = valid_range(sw, bw, self.stride.1, kx, self.pad.1);
                        if x0 == x1 {
                            continue;
                        }
                        let mut acc = 0.0;
                        for y in y0..y1 {
                            let by = y * self.stride.0 + ky - self.pad.0;
                            let brow = &b_ch[by * bw..(by + 1) * bw];
                            let srow = &s_ch[y * sw..(y + 1) * sw];
                            let bx0 = x0 * self.stride.1 + kx - self.pad.1;
                            for (j, v) in srow[x0..x1].iter().enumerate() {
                                acc += v * brow[bx0 + j * self.stride.1];
                            }
                        }
                        grad[((a * bc + b) * kh + ky) * kw + kx] += acc;
                    }
                }
            }
        }
    }
}

fn chw(t: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::shape(what, format!("expected [c, h, w], got {:?}", t.shape()))),
    }
}

fn check_params(spec: &ConvSpec, weights: &Tensor, bias: &Tensor, expected: [usize; 4], what: &str) -> Result<()> {
    spec.validate()?;
    if weights.shape() != expected {
        return Err(Error::shape(
            what,
            format!("weights {:?}, expected {expected:?}", weights.shape()),
        ));
    }
    if bias.shape() != [spec.out_channels] {
        return Err(Error::shape(
            what,
            format!("bias {:?}, expected [{}]", bias.shape(), spec.out_channels),
        ));
    }
    Ok(())
}

pub(crate) fn conv_geometry(spec: &ConvSpec, input_hw: (usize, usize), output_hw: (usize, usize)) -> Geometry {
    Geometry {
        small: (spec.out_channels, output_hw.0, output_hw.1),
        big: (spec.in_channels, input_hw.0, input_hw.1),
        kernel: spec.kernel,
        stride: spec.stride,
        pad: (spec.padding.top, spec.padding.left),
    }
}

pub(crate) fn transpose_geometry(spec: &ConvSpec, input_hw: (usize, usize), output_hw: (usize, usize)) -> Geometry {
    Geometry {
        small: (spec.in_channels, input_hw.0, input_hw.1),
        big: (spec.out_channels, output_hw.0, output_hw.1),
        kernel: spec.kernel,
        stride: spec.stride,
        pad: (spec.padding.top, spec.padding.left),
    }
}

fn add_bias(out: &mut [f64], bias: &[f64], plane: usize) {
    for (ch, b) in out.chunks_mut(plane).zip(bias) {
        ch.iter_mut().for_each(|v| *v += b);
    }
}

pub fn conv2d(input: &Tensor, spec: &ConvSpec, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (c, h, w) = chw(input, "conv2d input")?;
    check_params(spec, weights, bias, spec.conv_weight_shape(), "conv2d")?;
    if c != spec.in_channels {
        return Err(Error::shape(
            "conv2d",
            format!("input has {c} channels, spec expects {}", spec.in_channels),
        ));
    }
    let (oh, ow) = spec
        .conv_output_hw(h, w)
        .ok_or_else(|| Error::shape("conv2d", format!("{h}x{w} input admits no output position")))?;
    let geo = conv_geometry(spec, (h, w), (oh, ow));
    let mut out = vec![0.0; spec.out_channels * oh * ow];
    geo.gather(input.data(), weights.data(), &mut out);
    add_bias(&mut out, bias.data(), oh * ow);
    Tensor::new(vec![spec.out_channels, oh, ow], out)
}

pub fn conv2d_transpose(input: &Tensor, spec: &ConvSpec, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (c, h, w) = chw(input, "conv2d_transpose input")?;
    check_params(spec, weights, bias, spec.transpose_weight_shape(), "conv2d_transpose")?;
    if c != spec.in_channels {
        return Err(Error::shape(
            "conv2d_transpose",
            format!("input has {c} channels, spec expects {}", spec.in_channels),
        ));
    }
    let (oh, ow) = spec
        .transpose_output_hw(h, w)
        .ok_or_else(|| Error::shape("conv2d_transpose", "padding exceeds the output extent"))?;
    let geo = transpose_geometry(spec, (h, w), (oh, ow));
    let mut out = vec![0.0; spec.out_channels * oh * ow];
    geo.scatter(input.data(), weights.data(), &mut out);
    add_bias(&mut out, bias.data(), oh * ow);
    Tensor::new(vec![spec.out_channels, oh, ow], out)
}

pub fn relu(x: &Tensor) -> Tensor {
    map(x, |v| v.max(0.0))
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    map(x, sigmoid_scalar)
}

pub(crate) fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn map(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let data = x.data().iter().map(|&v| f(v)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("shape preserved")
}

/// Inverted-dropout multipliers: `0` with probability `rate`, otherwise
/// `1 / (1 - rate)`.
pub fn dropout_mask<R: Rng + ?Sized>(len: usize, rate: f64, rng: &mut R) -> Result<Vec<f64>> {
    check_rate(rate)?;
    if rate == 0.0 {
        return Ok(vec![1.0; len]);
    }
    let scale = 1.0 / (1.0 - rate);
    Ok((0..len)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { scale })
        .collect())
}

pub(crate) fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!(
            "dropout rate must be in [0, 1), got {rate}"
        )));
    }
    Ok(())
}

pub fn dropout<R: Rng + ?Sized>(x: &Tensor, rate: f64, training: bool, rng: &mut R) -> Result<Tensor> {
    check_rate(rate)?;
    if !training || rate == 0.0 {
        return Ok(x.clone());
    }
    let mask = dropout_mask(x.len(), rate, rng)?;
    let data = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Identity in the forward direction.
pub fn gradient_reversal(x: &Tensor, _spec: GrlSpec) -> Tensor {
    x.clone()
}

/// Upstream gradient scaled by `−λ`.
pub fn gradient_reversal_backward(upstream: &[f64], spec: GrlSpec) -> Vec<f64> {
    upstream.iter().map(|g| -spec.lambda * g).collect()
}

/// Mean binary cross-entropy with probabilities clamped to `[1e-7, 1 − 1e-7]`.
pub fn bce_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(
            "bce_loss",
            format!("pred {:?} vs target {:?}", pred.shape(), target.shape()),
        ));
    }
    Ok(bce_value(pred.data(), target.data()))
}

pub(crate) fn bce_value(pred: &[f64], target: &[f64]) -> f64 {
    let n = pred.len() as f64;
    let total: f64 = pred.iter().zip(target).map(|(&p, &t)| bce_term(p, t)).sum();
    total / n
}

/// Mean cross-entropy of `sigmoid(logits)` against `target`, computed from
/// the logits without clamping: `max(z, 0) − z·t + ln(1 + e^(−|z|))`.
pub fn bce_with_logits_loss(logits: &Tensor, target: &Tensor) -> Result<f64> {
    if logits.shape() != target.shape() {
        return Err(Error::shape(
            "bce_with_logits_loss",
            format!("logits {:?} vs target {:?}", logits.shape(), target.shape()),
        ));
    }
    let total: f64 = logits.data().iter().zip(target.data()).map(|(&z, &t)| bce_logit_term(z, t)).sum();
    Ok(total / logits.len() as f64)
}

pub(crate) fn bce_logit_term(z: f64, t: f64) -> f64 {
    z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()
}

/// One pixel's cross-entropy, before averaging.
pub(crate) fn bce_term(p: f64, t: f64) -> f64 {
    let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
    -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
}

/// d(bce)/d(pred). Uses the clamped probability, so saturated predictions
/// still receive a corrective gradient.
pub(crate) fn bce_grad(pred: &[f64], target: &[f64], upstream: f64) -> Vec<f64> {
    let n = pred.len() as f64;
    pred.iter()
        .zip(target)
        .map(|(&p, &t)| {
            let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            upstream * (p - t) / (p * (1.0 - p)) / n
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn spec(ic: usize, oc: usize, k: usize, s: usize, pad: Padding) -> ConvSpec {
        ConvSpec { in_channels: ic, out_channels: oc, kernel: (k, k), stride: (s, s), padding: pad }
    }

    /// Direct nested-loop cross-correlation.
    fn conv_oracle(x: &Tensor, sp: &ConvSpec, w: &Tensor, b: &Tensor) -> Vec<f64> {
        let (ic, h, wd) = (x.shape()[0], x.shape()[1] as isize, x.shape()[2] as isize);
        let (oh, ow) = sp.conv_output_hw(h as usize, wd as usize).unwrap();
        let (kh, kw) = sp.kernel;
        let mut out = vec![0.0; sp.out_channels * oh * ow];
        for o in 0..sp.out_channels {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = b.data()[o];
                    for i in 0..ic {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (y * sp.stride.0 + ky) as isize - sp.padding.top as isize;
                                let ix = (xx * sp.stride.1 + kx) as isize - sp.padding.left as isize;
                                if iy >= 0 && iy < h && ix >= 0 && ix < wd {
                                    acc += w.data()[((o * ic + i) * kh + ky) * kw + kx]
                                        * x.data()[(i * h as usize + iy as usize) * wd as usize + ix as usize];
                                }
                            }
                        }
                    }
                    out[(o * oh + y) * ow + xx] = acc;
                }
            }
        }
        out
    }

    /// Scatter-add definition of the transposed convolution.
    fn transpose_oracle(x: &Tensor, sp: &ConvSpec, w: &Tensor, b: &Tensor) -> Vec<f64> {
        let (ic, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (oh, ow) = sp.transpose_output_hw(h, wd).unwrap();
        let (kh, kw) = sp.kernel;
        let oc = sp.out_channels;
        let mut out: Vec<f64> = (0..oc * oh * ow).map(|i| b.data()[i / (oh * ow)]).collect();
        for i in 0..ic {
            for y in 0..h {
                for xx in 0..wd {
                    for o in 0..oc {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let oy = (y * sp.stride.0 + ky) as isize - sp.padding.top as isize;
                                let ox = (xx * sp.stride.1 + kx) as isize - sp.padding.left as isize;
                                if oy >= 0 && (oy as usize) < oh && ox >= 0 && (ox as usize) < ow {
                                    out[(o * oh + oy as usize) * ow + ox as usize] += w.data()
                                        [((i * oc + o) * kh + ky) * kw + kx]
                                        * x.data()[(i * h + y) * wd + xx];
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        t(shape, &(0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>())
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn identity_kernel() {
        let sp = spec(1, 1, 1, 1, Padding::default());
        let y = conv2d(&t(&[1, 1, 1], &[5.0]), &sp, &t(&[1, 1, 1, 1], &[1.0]), &t(&[1], &[0.0])).unwrap();
        assert_eq!(y.data(), &[5.0]);
    }

    #[test]
    fn zero_kernel_annihilates() {
        let sp = spec(2, 3, 3, 1, Padding::uniform(1));
        let y = conv2d(&random(&[2, 5, 4], 1), &sp, &Tensor::zeros(&[3, 2, 3, 3]), &Tensor::zeros(&[3])).unwrap();
        assert_eq!(y.shape(), &[3, 5, 4]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ramp_stride_two_matches_oracle() {
        let x = t(&[1, 4, 4], &(0..16).map(f64::from).collect::<Vec<_>>());
        let sp = spec(1, 1, 3, 2, Padding::uniform(1));
        let (w, b) = (Tensor::full(&[1, 1, 3, 3], 1.0), t(&[1], &[0.0]));
        let y = conv2d(&x, &sp, &w, &b).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        // Window sums around (0,0), (0,2), (2,0), (2,2) with zero padding.
        assert_eq!(y.data(), &[10.0, 24.0, 51.0, 90.0]);
        assert_eq!(y.data(), &conv_oracle(&x, &sp, &w, &b)[..]);
    }

    #[test]
    fn same_strided_padding_puts_extra_after() {
        let p = Padding::same_strided((3, 3), (2, 2));
        assert_eq!((p.top, p.bottom, p.left, p.right), (0, 1, 0, 1));
        let sp = spec(1, 1, 3, 2, p);
        assert_eq!(sp.conv_output_hw(32, 32), Some((16, 16)));
        assert_eq!(sp.transpose_output_hw(16, 16), Some((32, 32)));
    }

    #[test]
    fn single_tap_spread() {
        let sp = spec(1, 1, 2, 2, Padding::default());
        let y = conv2d_transpose(&t(&[1, 1, 1], &[1.0]), &sp, &Tensor::full(&[1, 1, 2, 2], 1.0), &t(&[1], &[0.0]))
            .unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert_eq!(y.data(), &[1.0; 4]);
    }

    #[test]
    fn transpose_stride_two_matches_scatter_oracle() {
        let sp = spec(2, 3, 3, 2, Padding::same_strided((3, 3), (2, 2)));
        let (x, w, b) = (random(&[2, 4, 4], 2), random(&[2, 3, 3, 3], 3), random(&[3], 4));
        let y = conv2d_transpose(&x, &sp, &w, &b).unwrap();
        assert_eq!(y.shape(), &[3, 8, 8]);
        assert!(close(y.data(), &transpose_oracle(&x, &sp, &w, &b), 1e-12));
    }

    #[test]
    fn adjoint_on_random_four_by_four() {
        let sp = spec(1, 2, 3, 1, Padding::uniform(1));
        let (x, w) = (random(&[1, 4, 4], 5), random(&[2, 1, 3, 3], 6));
        let y = random(&[2, 4, 4], 7);
        let ax = conv2d(&x, &sp, &w, &Tensor::zeros(&[2])).unwrap();
        let adj = ConvSpec { in_channels: 2, out_channels: 1, ..sp };
        let aty = conv2d_transpose(&y, &adj, &w, &Tensor::zeros(&[1])).unwrap();
        assert!((ax.dot(&y) - x.dot(&aty)).abs() < 1e-10);
    }

    #[test]
    fn shape_and_channel_errors() {
        let sp = spec(2, 1, 3, 1, Padding::default());
        let w = Tensor::zeros(&[1, 2, 3, 3]);
        let b = Tensor::zeros(&[1]);
        assert!(matches!(conv2d(&Tensor::zeros(&[1, 4, 4]), &sp, &w, &b), Err(Error::Shape { .. })));
        assert!(matches!(conv2d(&Tensor::zeros(&[2, 2, 2]), &sp, &w, &b), Err(Error::Shape { .. })));
        assert!(conv2d(&Tensor::zeros(&[2, 4, 4]), &sp, &Tensor::zeros(&[2, 1, 3, 3]), &b).is_err());
        assert!(conv2d(&Tensor::zeros(&[4, 4]), &sp, &w, &b).is_err());
    }

    #[test]
    fn activations() {
        assert_eq!(relu(&t(&[3], &[-1.0, 0.0, 2.0])).data(), &[0.0, 0.0, 2.0]);
        assert_eq!(sigmoid(&t(&[1], &[0.0])).data(), &[0.5]);
        let s = sigmoid(&t(&[4], &[-800.0, -30.0, 30.0, 800.0]));
        assert!(s.data().iter().all(|&v| (0.0..=1.0).contains(&v) && v.is_finite()));
        assert!((sigmoid_scalar(3f64.ln()) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn dropout_inference_and_zero_rate_are_identity() {
        let x = random(&[3, 5, 5], 8);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(dropout(&x, 0.5, false, &mut rng).unwrap(), x);
        assert_eq!(dropout(&x, 0.0, true, &mut rng).unwrap(), x);
        assert!(dropout(&x, 1.0, true, &mut rng).is_err());
        assert!(dropout(&x, -0.1, false, &mut rng).is_err());
    }

    #[test]
    fn dropout_statistics() {
        let n = 100_000;
        let ones = Tensor::full(&[n], 1.0);
        let y = dropout(&ones, 0.2, true, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        // Survivors are 1.25 with probability 0.8: mean 1, variance 0.25.
        let mean = y.data().iter().sum::<f64>() / n as f64;
        let sigma = (0.25 / n as f64).sqrt();
        assert!((mean - 1.0).abs() < 3.0 * sigma, "mean {mean}");
        assert!(y.data().iter().all(|&v| v == 0.0 || v == 1.25));
        let again = dropout(&ones, 0.2, true, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        assert_eq!(y, again);
    }

    #[test]
    fn gradient_reversal_contract() {
        let spec = GrlSpec::new(0.5).unwrap();
        let x = t(&[2], &[3.0, -1.0]);
        assert_eq!(gradient_reversal(&x, spec), x);
        assert_eq!(gradient_reversal_backward(&[1.0, 1.0], spec), vec![-0.5, -0.5]);
        assert!(GrlSpec::new(-0.1).is_err());
        assert!(GrlSpec::new(f64::NAN).is_err());
    }

    #[test]
    fn bce_examples() {
        let half = Tensor::full(&[4], 0.5);
        let target = t(&[4], &[1.0, 0.0, 0.0, 1.0]);
        assert!((bce_loss(&half, &target).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(bce_loss(&target, &target).unwrap() < 1e-6 * (1e-7f64).ln().abs());
        let want = -(0.9f64.ln() + 0.8f64.ln()) / 2.0;
        assert!((bce_loss(&t(&[2], &[0.9, 0.2]), &t(&[2], &[1.0, 0.0])).unwrap() - want).abs() < 1e-15);
        assert!(bce_loss(&half, &Tensor::zeros(&[3])).is_err());

        // Logit form: agrees with the clamped form away from saturation and
        // keeps growing linearly past it.
        let z = t(&[4], &[-3.0, 0.0, 2.5, 40.0]);
        let y = t(&[4], &[1.0, 0.0, 1.0, 0.0]);
        let direct = bce_loss(&sigmoid(&z.clone()), &y).unwrap();
        let exact: f64 = [3.0f64.exp().ln_1p(), std::f64::consts::LN_2, (-2.5f64).exp().ln_1p(), 40.0 + (-40.0f64).exp().ln_1p()]
            .iter()
            .sum::<f64>()
            / 4.0;
        assert!((bce_with_logits_loss(&z, &y).unwrap() - exact).abs() < 1e-14);
        assert!(direct < exact - 5.0);
        assert!(bce_with_logits_loss(&z, &Tensor::zeros(&[3])).is_err());
    }

    fn conv_case() -> impl Strategy<Value = (ConvSpec, usize, usize, u64)> {
        (1usize..4, 1usize..4, 1usize..5, 1usize..4, 0usize..3, 0usize..3, 1usize..5, 1usize..5, any::<u64>())
            .prop_filter_map("output must fit", |(ic, oc, k, s, pt, pb, oh, ow, seed)| {
                let sp = ConvSpec {
                    in_channels: ic,
                    out_channels: oc,
                    kernel: (k, k),
                    stride: (s, s),
                    padding: Padding { top: pt, bottom: pb, left: pb, right: pt },
                };
                // Input sides whose conv output is exactly (oh, ow) and whose
                // transposed conv maps back onto them.
                let side = |o: usize, pad: usize| ((o - 1) * s + k).checked_sub(pad).filter(|&v| v > 0);
                let (h, w) = (side(oh, pt + pb)?, side(ow, pt + pb)?);
                (sp.conv_output_hw(h, w) == Some((oh, ow))).then_some((sp, h, w, seed))
            })
    }

    proptest! {
        #[test]
        fn conv_matches_oracle((sp, h, w, seed) in conv_case()) {
            let x = random(&[sp.in_channels, h, w], seed);
            let wt = random(&sp.conv_weight_shape(), seed ^ 1);
            let b = random(&[sp.out_channels], seed ^ 2);
            let y = conv2d(&x, &sp, &wt, &b).unwrap();
            prop_assert!(close(y.data(), &conv_oracle(&x, &sp, &wt, &b), 1e-12));
        }

        #[test]
        fn transpose_matches_oracle((sp, _h, _w, seed) in conv_case(), ih in 1usize..5, iw in 1usize..5) {
            prop_assume!(sp.transpose_output_hw(ih, iw).is_some());
            let x = random(&[sp.in_channels, ih, iw], seed);
            let wt = random(&sp.transpose_weight_shape(), seed ^ 1);
            let b = random(&[sp.out_channels], seed ^ 2);
            let y = conv2d_transpose(&x, &sp, &wt, &b).unwrap();
            prop_assert!(close(y.data(), &transpose_oracle(&x, &sp, &wt, &b), 1e-12));
        }

        #[test]
        fn conv_and_transpose_are_adjoint((sp, h, w, seed) in conv_case()) {
            let (oh, ow) = sp.conv_output_hw(h, w).unwrap();
            let x = random(&[sp.in_channels, h, w], seed);
            let y = random(&[sp.out_channels, oh, ow], seed ^ 3);
            let wt = random(&sp.conv_weight_shape(), seed ^ 1);
            let ax = conv2d(&x, &sp, &wt, &Tensor::zeros(&[sp.out_channels])).unwrap();
            let adj = ConvSpec { in_channels: sp.out_channels, out_channels: sp.in_channels, ..sp };
            let aty = conv2d_transpose(&y, &adj, &wt, &Tensor::zeros(&[sp.in_channels])).unwrap();
            prop_assert_eq!(aty.shape(), x.shape());
            prop_assert!((ax.dot(&y) - x.dot(&aty)).abs() < 1e-10);
        }

        #[test]
        fn activation_ranges(v in prop::collection::vec(-50.0f64..50.0, 1..64)) {
            let x = t(&[v.len()], &v);
            prop_assert!(relu(&x).data().iter().all(|&r| r >= 0.0));
            prop_assert!(sigmoid(&x).data().iter().all(|&s| (0.0..=1.0).contains(&s)));
        }
    }
}

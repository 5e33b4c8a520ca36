//! Single-image layer primitives: 2d convolution, ReLU, nearest-neighbor
//! upsampling, sigmoid. Forward and backward are written directly against
//! flat row-major buffers; no autograd.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::tensor::{Scalar, Tensor};

/// 3x3 or 1x1 convolution over `[c, h, w]` feature maps.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T = f32> {
    /// `[out_c, in_c, k, k]`
    pub weight: Tensor<T>,
    /// `[out_c]`
    pub bias: Tensor<T>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Scalar> Conv2d<T> {
    /// He-uniform weights (bound sqrt(6 / fan_in)), zero bias. Draws are made
    /// in f64 so f32 and f64 models built from equal seeds agree to rounding.
    pub fn init(in_c: usize, out_c: usize, k: usize, stride: usize, pad: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = (in_c * k * k) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let n = out_c * in_c * k * k;
        let data: Vec<T> = (0..n)
            .map(|_| T::from_f64((rng.gen::<f64>() * 2.0 - 1.0) * bound))
            .collect();
        Self {
            weight: Tensor::from_vec(&[out_c, in_c, k, k], data).expect("sized above"),
            bias: Tensor::zeros(&[out_c]),
            stride,
            pad,
        }
    }

    pub fn out_c(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_c(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel();
        (
            (h + 2 * self.pad - k) / self.stride + 1,
            (w + 2 * self.pad - k) / self.stride + 1,
        )
    }

    pub fn cast<U: Scalar>(&self) -> Conv2d<U> {
        Conv2d {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
            stride: self.stride,
            pad: self.pad,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let (ic, h, w) = chw(x);
        assert_eq!(ic, self.in_c(), "conv input channels");
        let k = self.kernel();
        let (s, p) = (self.stride, self.pad as isize);
        let (ho, wo) = self.out_hw(h, w);
        let oc = self.out_c();
        let mut out = Tensor::zeros(&[oc, ho, wo]);
        let xs = x.data();
        let ws = self.weight.data();
        let os = out.data_mut();
        for o in 0..oc {
            let ob = &mut os[o * ho * wo..(o + 1) * ho * wo];
            ob.fill(self.bias.data()[o]);
            for i in 0..ic {
                let xch = &xs[i * h * w..(i + 1) * h * w];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = ws[((o * ic + i) * k + ky) * k + kx];
                        let shift = kx as isize - p;
                        let (ox_lo, ox_hi) = ox_range(wo, w, s, shift);
                        if ox_lo > ox_hi {
                            continue;
                        }
                        for oy in 0..ho {
                            let iy = (oy * s) as isize + ky as isize - p;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let xrow = &xch[iy as usize * w..(iy as usize + 1) * w];
                            let orow = &mut ob[oy * wo..(oy + 1) * wo];
                            if s == 1 {
                                let ix0 = (ox_lo as isize + shift) as usize;
                                let n = ox_hi - ox_lo + 1;
                                for (ov, xv) in
                                    orow[ox_lo..ox_lo + n].iter_mut().zip(&xrow[ix0..ix0 + n])
                                {
                                    *ov += wv * *xv;
                                }
                            } else {
                                for ox in ox_lo..=ox_hi {
                                    let ix = (ox * s) as isize + shift;
                                    orow[ox] += wv * xrow[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Returns `(grad_input, grad_weight, grad_bias)`.
    pub fn backward(&self, x: &Tensor<T>, grad_out: &Tensor<T>) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
        let (ic, h, w) = chw(x);
        let (oc, ho, wo) = chw(grad_out);
        assert_eq!(ic, self.in_c(), "conv input channels");
        assert_eq!(oc, self.out_c(), "conv output channels");
        assert_eq!((ho, wo), self.out_hw(h, w), "conv output size");
        let k = self.kernel();
        let (s, p) = (self.stride, self.pad as isize);
        let mut gx = Tensor::zeros(x.shape());
        let mut gw = Tensor::zeros(self.weight.shape());
        let mut gb = Tensor::zeros(self.bias.shape());
        let xs = x.data();
        let gos = grad_out.data();
        let ws = self.weight.data();

        for o in 0..oc {
            let gob = &gos[o * ho * wo..(o + 1) * ho * wo];
            let mut acc_b = T::zero();
            for v in gob {
                acc_b += *v;
            }
            gb.data_mut()[o] = acc_b;
        }

        for o in 0..oc {
            let gob = &gos[o * ho * wo..(o + 1) * ho * wo];
            for i in 0..ic {
                let xch = &xs[i * h * w..(i + 1) * h * w];
                let gxch_base = i * h * w;
                for ky in 0..k {
                    for kx in 0..k {
                        let shift = kx as isize - p;
                        let (ox_lo, ox_hi) = ox_range(wo, w, s, shift);
                        if ox_lo > ox_hi {
                            continue;
                        }
                        let wv = ws[((o * ic + i) * k + ky) * k + kx];
                        let mut acc_w = T::zero();
                        for oy in 0..ho {
                            let iy = (oy * s) as isize + ky as isize - p;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let xrow = &xch[iy as usize * w..(iy as usize + 1) * w];
                            let gorow = &gob[oy * wo..(oy + 1) * wo];
                            let gxrow = &mut gx.data_mut()
                                [gxch_base + iy as usize * w..gxch_base + (iy as usize + 1) * w];
                            if s == 1 {
                                let ix0 = (ox_lo as isize + shift) as usize;
                                let n = ox_hi - ox_lo + 1;
                                for ((gxv, xv), gov) in gxrow[ix0..ix0 + n]
                                    .iter_mut()
                                    .zip(&xrow[ix0..ix0 + n])
                                    .zip(&gorow[ox_lo..ox_lo + n])
                                {
                                    acc_w += *gov * *xv;
                                    *gxv += wv * *gov;
                                }
                            } else {
                                for ox in ox_lo..=ox_hi {
                                    let ix = ((ox * s) as isize + shift) as usize;
                                    let gov = gorow[ox];
                                    acc_w += gov * xrow[ix];
                                    gxrow[ix] += wv * gov;
                                }
                            }
                        }
                        gw.data_mut()[((o * ic + i) * k + ky) * k + kx] += acc_w;
                    }
                }
            }
        }
        (gx, gw, gb)
    }
}

/// Valid output-column range such that `ox*s + shift` lands inside `[0, w)`.
fn ox_range(wo: usize, w: usize, s: usize, shift: isize) -> (usize, usize) {
    let lo = if shift >= 0 {
        0usize
    } else {
        ((-shift) as usize).div_ceil(s)
    };
    let hi_num = w as isize - 1 - shift;
    if hi_num < 0 {
        return (1, 0);
    }
    let hi = (hi_num as usize / s).min(wo.saturating_sub(1));
    if lo > hi {
        (1, 0)
    } else {
        (lo, hi)
    }
}

fn chw<T: Scalar>(t: &Tensor<T>) -> (usize, usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 3, "expected [c, h, w] tensor, got {s:?}");
    (s[0], s[1], s[2])
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()))
}

/// Gradient through ReLU given the forward *output*.
pub fn relu_backward<T: Scalar>(out: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let data = out
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(y, g)| if *y > T::zero() { *g } else { T::zero() })
        .collect();
    Tensor::from_vec(out.shape(), data).expect("same shape")
}

pub fn upsample2x<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = chw(x);
    let mut out = Tensor::zeros(&[c, 2 * h, 2 * w]);
    let xs = x.data();
    let os = out.data_mut();
    for ch in 0..c {
        for y in 0..h {
            let src = &xs[ch * h * w + y * w..ch * h * w + (y + 1) * w];
            for dy in 0..2 {
                let orow =
                    &mut os[ch * 4 * h * w + (2 * y + dy) * 2 * w..ch * 4 * h * w + (2 * y + dy + 1) * 2 * w];
                for (x_i, v) in src.iter().enumerate() {
                    orow[2 * x_i] = *v;
                    orow[2 * x_i + 1] = *v;
                }
            }
        }
    }
    out
}

/// Gradient through nearest-neighbor 2x upsampling: sums each 2x2 block.
pub fn upsample2x_backward<T: Scalar>(grad_out: &Tensor<T>, in_shape: &[usize]) -> Tensor<T> {
    let (c, h2, w2) = chw(grad_out);
    assert_eq!(in_shape, [c, h2 / 2, w2 / 2], "upsample input shape");
    let (h, w) = (h2 / 2, w2 / 2);
    let mut gx = Tensor::zeros(in_shape);
    let gs = grad_out.data();
    let gxs = gx.data_mut();
    for ch in 0..c {
        for y in 0..h2 {
            let grow = &gs[ch * h2 * w2 + y * w2..ch * h2 * w2 + (y + 1) * w2];
            let gxrow = &mut gxs[ch * h * w + (y / 2) * w..ch * h * w + (y / 2 + 1) * w];
            for x in 0..w2 {
                gxrow[x / 2] += grow[x];
            }
        }
    }
    gx
}

/// Numerically stable logistic function.
pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| {
        if v >= T::zero() {
            T::one() / (T::one() + (-v).exp())
        } else {
            let e = v.exp();
            e / (T::one() + e)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    /// Direct translation of the convolution definition, no slicing tricks.
    fn conv_naive(conv: &Conv2d<f64>, x: &Tensor<f64>) -> Tensor<f64> {
        let (ic, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (oc, k) = (conv.out_c(), conv.kernel());
        let (ho, wo) = conv.out_hw(h, w);
        let mut out = Tensor::zeros(&[oc, ho, wo]);
        for o in 0..oc {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = conv.bias.data()[o];
                    for i in 0..ic {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * conv.stride + ky) as isize - conv.pad as isize;
                                let ix = (ox * conv.stride + kx) as isize - conv.pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += conv.weight.data()[((o * ic + i) * k + ky) * k + kx]
                                    * x.data()[i * h * w + iy as usize * w + ix as usize];
                            }
                        }
                    }
                    out.data_mut()[o * ho * wo + oy * wo + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn forward_matches_naive_convolution() {
        let mut r = rng(11);
        for &(ic, oc, k, s, p, h, w) in &[
            (1usize, 3usize, 3usize, 1usize, 1usize, 8usize, 8usize),
            (2, 4, 3, 2, 1, 10, 8),
            (3, 2, 1, 1, 0, 5, 7),
            (2, 2, 3, 2, 1, 7, 9),
        ] {
            let mut conv = Conv2d::<f64>::init(ic, oc, k, s, p, &mut r);
            for b in conv.bias.data_mut() {
                *b = r.gen_range(-0.5..0.5);
            }
            let x = rand_tensor(&[ic, h, w], &mut r);
            let fast = conv.forward(&x);
            let slow = conv_naive(&conv, &x);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn stride_two_halves_even_sizes() {
        let conv = Conv2d::<f32>::init(1, 1, 3, 2, 1, &mut rng(1));
        assert_eq!(conv.out_hw(64, 64), (32, 32));
        assert_eq!(conv.out_hw(48, 96), (24, 48));
    }

    /// Central finite difference over every input/weight/bias entry.
    #[test]
    fn backward_matches_finite_differences() {
        let mut r = rng(23);
        for &(ic, oc, k, s, p, h, w) in &[
            (2usize, 3usize, 3usize, 1usize, 1usize, 6usize, 5usize),
            (1, 2, 3, 2, 1, 8, 6),
            (2, 2, 1, 1, 0, 4, 4),
        ] {
            let mut conv = Conv2d::<f64>::init(ic, oc, k, s, p, &mut r);
            for b in conv.bias.data_mut() {
                *b = r.gen_range(-0.5..0.5);
            }
            let x = rand_tensor(&[ic, h, w], &mut r);
            let (ho, wo) = conv.out_hw(h, w);
            // Loss = sum(out * probe) for a fixed random probe.
            let probe = rand_tensor(&[oc, ho, wo], &mut r);
            let loss = |c: &Conv2d<f64>, x: &Tensor<f64>| -> f64 {
                c.forward(x)
                    .data()
                    .iter()
                    .zip(probe.data())
                    .map(|(a, b)| a * b)
                    .sum()
            };
            let (gx, gw, gb) = conv.backward(&x, &probe);
            let eps = 1e-6;
            for idx in 0..x.len() {
                let mut xp = x.clone();
                xp.data_mut()[idx] += eps;
                let mut xm = x.clone();
                xm.data_mut()[idx] -= eps;
                let num = (loss(&conv, &xp) - loss(&conv, &xm)) / (2.0 * eps);
                assert!((num - gx.data()[idx]).abs() < 1e-6, "gx[{idx}]");
            }
            for idx in 0..conv.weight.len() {
                let mut cp = conv.clone();
                cp.weight.data_mut()[idx] += eps;
                let mut cm = conv.clone();
                cm.weight.data_mut()[idx] -= eps;
                let num = (loss(&cp, &x) - loss(&cm, &x)) / (2.0 * eps);
                assert!((num - gw.data()[idx]).abs() < 1e-6, "gw[{idx}]");
            }
            for idx in 0..conv.bias.len() {
                let mut cp = conv.clone();
                cp.bias.data_mut()[idx] += eps;
                let mut cm = conv.clone();
                cm.bias.data_mut()[idx] -= eps;
                let num = (loss(&cp, &x) - loss(&cm, &x)) / (2.0 * eps);
                assert!((num - gb.data()[idx]).abs() < 1e-6, "gb[{idx}]");
            }
        }
    }

    #[test]
    fn upsample_repeats_and_backward_sums() {
        let x = Tensor::<f64>::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = upsample2x(&x);
        assert_eq!(y.shape(), &[1, 4, 4]);
        assert_eq!(
            y.data(),
            &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
        let g = Tensor::<f64>::from_vec(&[1, 4, 4], (1..=16).map(|v| v as f64).collect()).unwrap();
        let gx = upsample2x_backward(&g, &[1, 2, 2]);
        assert_eq!(gx.data(), &[1.0 + 2.0 + 5.0 + 6.0, 3.0 + 4.0 + 7.0 + 8.0,
                                9.0 + 10.0 + 13.0 + 14.0, 11.0 + 12.0 + 15.0 + 16.0]);
    }

    #[test]
    fn relu_masks_gradient_by_output() {
        let x = Tensor::<f64>::from_vec(&[4], vec![-1.0, 0.0, 0.5, 2.0]).unwrap();
        let y = relu(&x);
        assert_eq!(y.data(), &[0.0, 0.0, 0.5, 2.0]);
        let g = Tensor::<f64>::from_vec(&[4], vec![1.0; 4]).unwrap();
        let gx = relu_backward(&y, &g);
        assert_eq!(gx.data(), &[0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn sigmoid_is_stable_and_symmetric() {
        let x = Tensor::<f64>::from_vec(&[4], vec![-500.0, -1.0, 1.0, 500.0]).unwrap();
        let y = sigmoid(&x);
        assert!(y.data()[0] >= 0.0 && y.data()[0] < 1e-100);
        assert!((y.data()[1] + y.data()[2] - 1.0).abs() < 1e-15);
        assert_eq!(y.data()[3], 1.0);
        assert!(y.all_finite());
    }
}

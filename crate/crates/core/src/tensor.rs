//! Scalar abstraction and the dense kernels the network is built from:
//! 3x3/1x1 convolution via im2col + GEMM, 2x2 max-pooling, nearest
//! upsampling and softmax.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign};

use num_traits::Float;

/// Floating-point element type of network tensors (f32 for training, f64 for
/// gradient checks).
pub trait Real: Float + Default + Debug + Send + Sync + AddAssign + MulAssign + Sum + 'static {
    /// `C = alpha·A·B + beta·C` with arbitrary row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn lit(v: f64) -> Self {
        Self::from(v).unwrap()
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap()
    }
}

macro_rules! impl_real {
    ($t:ty, $f:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                // Extents are checked by the callers' shape bookkeeping.
                unsafe {
                    $f(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    )
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// A single-sample `channels × height × width` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Tensor {
            c,
            h,
            w,
            data: vec![T::zero(); c * h * w],
        }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), c * h * w, "tensor payload/shape mismatch");
        Tensor { c, h, w, data }
    }

    #[inline]
    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn channel(&self, ch: usize) -> &[T] {
        let n = self.plane();
        &self.data[ch * n..(ch + 1) * n]
    }
}

impl Tensor<f32> {
    pub fn from_chip(chip: &crate::raster::Chip) -> Self {
        Tensor::from_vec(chip.bands, chip.height, chip.width, chip.data.clone())
    }
}

/// Unfolds a `c × h × w` input into a `(c·9) × (h·w)` patch matrix for a
/// 3x3, stride-1, zero-padded convolution.
pub fn im2col3<T: Real>(x: &[T], c: usize, h: usize, w: usize, col: &mut [T]) {
    let hw = h * w;
    debug_assert_eq!(col.len(), c * 9 * hw);
    for ci in 0..c {
        let src = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[((ci * 9) + ky * 3 + kx) * hw..((ci * 9) + ky * 3 + kx + 1) * hw];
                let dx = kx as isize - 1;
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let s = &src[sy as usize * w..(sy as usize + 1) * w];
                    match dx {
                        0 => dst.copy_from_slice(s),
                        -1 => {
                            dst[0] = T::zero();
                            dst[1..].copy_from_slice(&s[..w - 1]);
                        }
                        _ => {
                            dst[..w - 1].copy_from_slice(&s[1..]);
                            dst[w - 1] = T::zero();
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col3`]: accumulates patch-matrix gradients into `gx`.
pub fn col2im3<T: Real>(col: &[T], c: usize, h: usize, w: usize, gx: &mut [T]) {
    let hw = h * w;
    for ci in 0..c {
        let dst = &mut gx[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[((ci * 9) + ky * 3 + kx) * hw..((ci * 9) + ky * 3 + kx + 1) * hw];
                let dx = kx as isize - 1;
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let d = &mut dst[sy as usize * w..(sy as usize + 1) * w];
                    let r = &row[y * w..(y + 1) * w];
                    match dx {
                        0 => d.iter_mut().zip(r).for_each(|(a, &b)| *a += b),
                        -1 => d[..w - 1].iter_mut().zip(&r[1..]).for_each(|(a, &b)| *a += b),
                        _ => d[1..].iter_mut().zip(&r[..w - 1]).for_each(|(a, &b)| *a += b),
                    }
                }
            }
        }
    }
}

/// `out = W · patches(x) + b` for a `k×k` kernel (k ∈ {1, 3}).
/// `weight` is `cout × cin × k × k`.
pub fn conv_forward<T: Real>(x: &Tensor<T>, weight: &[T], bias: &[T], cout: usize, k: usize) -> Tensor<T> {
    let (cin, h, w) = (x.c, x.h, x.w);
    let hw = h * w;
    let kk = cin * k * k;
    let mut out = Tensor::zeros(cout, h, w);
    for (o, &b) in bias.iter().enumerate() {
        out.data[o * hw..(o + 1) * hw].iter_mut().for_each(|v| *v = b);
    }
    if k == 1 {
        T::gemm(cout, kk, hw, T::one(), weight, kk as isize, 1, &x.data, hw as isize, 1, T::one(), &mut out.data, hw as isize, 1);
    } else {
        let mut col = vec![T::zero(); kk * hw];
        im2col3(&x.data, cin, h, w, &mut col);
        T::gemm(cout, kk, hw, T::one(), weight, kk as isize, 1, &col, hw as isize, 1, T::one(), &mut out.data, hw as isize, 1);
    }
    out
}

/// Accumulates weight/bias gradients into `gw`/`gb` and returns the input
/// gradient.
pub fn conv_backward<T: Real>(
    x: &Tensor<T>,
    weight: &[T],
    gout: &Tensor<T>,
    k: usize,
    gw: &mut [T],
    gb: &mut [T],
    need_input_grad: bool,
) -> Option<Tensor<T>> {
    let (cin, h, w) = (x.c, x.h, x.w);
    let hw = h * w;
    let cout = gout.c;
    let kk = cin * k * k;
    for (o, g) in gb.iter_mut().enumerate() {
        *g += gout.data[o * hw..(o + 1) * hw].iter().copied().sum::<T>();
    }
    let col_owned;
    let col: &[T] = if k == 1 {
        &x.data
    } else {
        let mut c = vec![T::zero(); kk * hw];
        im2col3(&x.data, cin, h, w, &mut c);
        col_owned = c;
        &col_owned
    };
    // gW (cout × kk) += gout (cout × hw) · colᵀ (hw × kk)
    T::gemm(cout, hw, kk, T::one(), &gout.data, hw as isize, 1, col, 1, hw as isize, T::one(), gw, kk as isize, 1);
    if !need_input_grad {
        return None;
    }
    // gcol (kk × hw) = Wᵀ (kk × cout) · gout (cout × hw)
    let mut gcol = vec![T::zero(); kk * hw];
    T::gemm(kk, cout, hw, T::one(), weight, 1, kk as isize, &gout.data, hw as isize, 1, T::zero(), &mut gcol, hw as isize, 1);
    if k == 1 {
        return Some(Tensor::from_vec(cin, h, w, gcol));
    }
    let mut gx = Tensor::zeros(cin, h, w);
    col2im3(&gcol, cin, h, w, &mut gx.data);
    Some(gx)
}

pub fn relu_inplace<T: Real>(x: &mut Tensor<T>) {
    x.data.iter_mut().for_each(|v| {
        if *v < T::zero() {
            *v = T::zero()
        }
    });
}

/// Zeroes gradient entries where the ReLU output was not positive.
pub fn relu_backward_inplace<T: Real>(g: &mut Tensor<T>, out: &Tensor<T>) {
    g.data.iter_mut().zip(&out.data).for_each(|(g, &o)| {
        if o <= T::zero() {
            *g = T::zero()
        }
    });
}

/// 2x2 max-pool; returns pooled tensor and the flat argmax index per output.
pub fn maxpool2<T: Real>(x: &Tensor<T>) -> (Tensor<T>, Vec<u32>) {
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut out = Tensor::zeros(x.c, oh, ow);
    let mut idx = vec![0u32; x.c * oh * ow];
    for c in 0..x.c {
        let base = c * x.h * x.w;
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = base + 2 * y * x.w + 2 * xx;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * y + dy) * x.w + 2 * xx + dx;
                    if x.data[i] > x.data[best] {
                        best = i;
                    }
                }
                let o = (c * oh + y) * ow + xx;
                out.data[o] = x.data[best];
                idx[o] = best as u32;
            }
        }
    }
    (out, idx)
}

pub fn maxpool2_backward<T: Real>(g: &Tensor<T>, idx: &[u32], c: usize, h: usize, w: usize) -> Tensor<T> {
    let mut gx = Tensor::zeros(c, h, w);
    for (o, &i) in idx.iter().enumerate() {
        gx.data[i as usize] += g.data[o];
    }
    gx
}

pub fn upsample2<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (oh, ow) = (x.h * 2, x.w * 2);
    let mut out = Tensor::zeros(x.c, oh, ow);
    for c in 0..x.c {
        for y in 0..oh {
            let src = &x.data[(c * x.h + y / 2) * x.w..(c * x.h + y / 2 + 1) * x.w];
            let dst = &mut out.data[(c * oh + y) * ow..(c * oh + y + 1) * ow];
            for (xx, d) in dst.iter_mut().enumerate() {
                *d = src[xx / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward<T: Real>(g: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (g.h / 2, g.w / 2);
    let mut out = Tensor::zeros(g.c, h, w);
    for c in 0..g.c {
        for y in 0..g.h {
            for x in 0..g.w {
                out.data[(c * h + y / 2) * w + x / 2] += g.data[(c * g.h + y) * g.w + x];
            }
        }
    }
    out
}

/// Per-pixel softmax over channels.
pub fn softmax<T: Real>(logits: &Tensor<T>) -> Tensor<T> {
    let hw = logits.plane();
    let k = logits.c;
    let mut out = Tensor::zeros(k, logits.h, logits.w);
    for p in 0..hw {
        let mut m = T::neg_infinity();
        for c in 0..k {
            m = m.max(logits.data[c * hw + p]);
        }
        let mut s = T::zero();
        for c in 0..k {
            let e = (logits.data[c * hw + p] - m).exp();
            out.data[c * hw + p] = e;
            s += e;
        }
        for c in 0..k {
            out.data[c * hw + p] = out.data[c * hw + p] / s;
        }
    }
    out
}

/// Gradient through softmax: `g_logit = p ⊙ (g_p − Σ_k p_k g_p,k)`.
pub fn softmax_backward<T: Real>(probs: &Tensor<T>, gprobs: &Tensor<T>) -> Tensor<T> {
    let hw = probs.plane();
    let k = probs.c;
    let mut out = Tensor::zeros(k, probs.h, probs.w);
    for p in 0..hw {
        let mut dot = T::zero();
        for c in 0..k {
            dot += probs.data[c * hw + p] * gprobs.data[c * hw + p];
        }
        for c in 0..k {
            out.data[c * hw + p] = probs.data[c * hw + p] * (gprobs.data[c * hw + p] - dot);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution.
    fn naive_conv(x: &Tensor<f64>, w: &[f64], b: &[f64], cout: usize, k: usize) -> Tensor<f64> {
        let r = (k / 2) as isize;
        let mut out = Tensor::zeros(cout, x.h, x.w);
        for o in 0..cout {
            for y in 0..x.h as isize {
                for xx in 0..x.w as isize {
                    let mut s = b[o];
                    for ci in 0..x.c {
                        for ky in 0..k as isize {
                            for kx in 0..k as isize {
                                let (sy, sx) = (y + ky - r, xx + kx - r);
                                if sy < 0 || sx < 0 || sy >= x.h as isize || sx >= x.w as isize {
                                    continue;
                                }
                                let wv = w[((o * x.c + ci) * k + ky as usize) * k + kx as usize];
                                s += wv * x.data[(ci * x.h + sy as usize) * x.w + sx as usize];
                            }
                        }
                    }
                    out.data[(o * x.h + y as usize) * x.w + xx as usize] = s;
                }
            }
        }
        out
    }

    fn lcg(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn conv_matches_naive_loops() {
        for k in [1, 3] {
            let x = Tensor::from_vec(3, 5, 7, lcg(105, 1));
            let w = lcg(4 * 3 * k * k, 2);
            let b = lcg(4, 3);
            let fast = conv_forward(&x, &w, &b, 4, k);
            let slow = naive_conv(&x, &w, &b, 4, k);
            for (a, b) in fast.data.iter().zip(&slow.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <conv(x), g> = <x, conv_backward_input(g)> for zero bias.
        let x = Tensor::from_vec(2, 4, 6, lcg(48, 4));
        let w = lcg(3 * 2 * 9, 5);
        let g = Tensor::from_vec(3, 4, 6, lcg(72, 6));
        let y = conv_forward(&x, &w, &[0.0; 3], 3, 3);
        let mut gw = vec![0.0; w.len()];
        let mut gb = vec![0.0; 3];
        let gx = conv_backward(&x, &w, &g, 3, &mut gw, &mut gb, true).unwrap();
        let lhs: f64 = y.data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data.iter().zip(&gx.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
        let rhs_w: f64 = w.iter().zip(&gw).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs_w).abs() < 1e-10);
    }

    #[test]
    fn pool_and_upsample_shapes() {
        let x = Tensor::from_vec(1, 2, 2, vec![1.0, 4.0, 3.0, 2.0]);
        let (p, idx) = maxpool2(&x);
        assert_eq!(p.data, vec![4.0]);
        assert_eq!(idx, vec![1]);
        let u = upsample2(&p);
        assert_eq!(u.data, vec![4.0; 4]);
        assert_eq!(upsample2_backward(&u).data, vec![16.0]);
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let l = Tensor::from_vec(3, 1, 2, vec![0.1, 5.0, -2.0, 5.0, 0.7, 5.0]);
        let mut l2 = l.clone();
        for c in 0..3 {
            l2.data[c * 2] += 12.5;
        }
        let (a, b) = (softmax(&l), softmax(&l2));
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!((x - y).abs() < 1e-7);
        }
        for c in 0..3 {
            assert!((a.data[c * 2 + 1] - 1.0 / 3.0).abs() < 1e-15);
        }
    }
}

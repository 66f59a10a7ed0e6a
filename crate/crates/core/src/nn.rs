//! Layer kernels with hand-written backward passes.
//!
//! Convolutions lower to GEMM through im2col over bands of output rows so the
//! scratch buffer stays bounded at large resolutions.

use crate::tensor::{gemm, MatMut, MatRef, Real, Tensor};

/// Upper bound on im2col scratch elements per band.
const BAND_ELEMS: usize = 1 << 22;

/// Reflection-padding index map (edge pixel not repeated).
#[inline]
pub fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let n = n as isize;
    let mut i = i;
    // a single reflection suffices for pad < n
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * (n - 1) - i;
    }
    i.clamp(0, n - 1) as usize
}

/// 2-D convolution, stride 1, "same" output size. 3×3 kernels use reflection padding.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T = f32> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    /// Row-major (out, in, kh, kw).
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Conv2d<T> {
    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        assert!(kernel % 2 == 1, "odd kernels only");
        Self {
            in_channels,
            out_channels,
            kernel,
            weight: vec![T::zero(); out_channels * in_channels * kernel * kernel],
            bias: vec![T::zero(); out_channels],
        }
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel, self.kernel]
    }

    /// Row length of the lowered weight matrix.
    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn cast<U: Real>(&self) -> Conv2d<U> {
        Conv2d {
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            kernel: self.kernel,
            weight: self.weight.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
            bias: self.bias.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.in_channels, self.out_channels, self.kernel)
    }

    fn band_rows(&self, width: usize) -> usize {
        (BAND_ELEMS / (self.patch_len() * width).max(1)).max(1)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.channels(), self.in_channels, "conv input channels");
        let (h, w) = (x.height(), x.width());
        let p = h * w;
        let mut out = Tensor::zeros(self.out_channels, h, w);
        let k = self.patch_len();
        let wmat = MatRef::row_major(&self.weight, self.out_channels, k, k);
        if self.kernel == 1 {
            gemm(
                T::one(),
                wmat,
                MatRef::row_major(x.data(), k, p, p),
                T::zero(),
                MatMut::row_major(out.data_mut(), self.out_channels, p, p),
            );
        } else {
            let band = self.band_rows(w);
            let mut cols = Vec::new();
            let mut y0 = 0;
            while y0 < h {
                let y1 = (y0 + band).min(h);
                let n = (y1 - y0) * w;
                self.im2col(x, y0, y1, &mut cols);
                gemm(
                    T::one(),
                    wmat,
                    MatRef::row_major(&cols, k, n, n),
                    T::zero(),
                    MatMut::row_major(&mut out.data_mut()[y0 * w..], self.out_channels, n, p),
                );
                y0 = y1;
            }
        }
        for (c, &b) in self.bias.iter().enumerate() {
            for v in out.channel_mut(c) {
                *v += b;
            }
        }
        out
    }

    /// Backward pass. Accumulates parameter gradients into `grads` when given and
    /// returns the input gradient when `want_input` is set.
    pub fn backward(
        &self,
        x: &Tensor<T>,
        grad_out: &Tensor<T>,
        grads: Option<&mut Conv2d<T>>,
        want_input: bool,
    ) -> Option<Tensor<T>> {
        let (h, w) = (x.height(), x.width());
        assert_eq!(grad_out.shape(), [self.out_channels, h, w]);
        let p = h * w;
        let k = self.patch_len();
        let mut grads = grads;
        if let Some(g) = grads.as_deref_mut() {
            for c in 0..self.out_channels {
                g.bias[c] += grad_out.channel(c).iter().copied().sum::<T>();
            }
        }
        let mut grad_in = want_input.then(|| Tensor::zeros(self.in_channels, h, w));
        let wmat = MatRef::row_major(&self.weight, self.out_channels, k, k);

        if self.kernel == 1 {
            let go = MatRef::row_major(grad_out.data(), self.out_channels, p, p);
            if let Some(g) = grads {
                gemm(
                    T::one(),
                    go,
                    MatRef::row_major(x.data(), k, p, p).t(),
                    T::one(),
                    MatMut::row_major(&mut g.weight, self.out_channels, k, k),
                );
            }
            if let Some(gi) = grad_in.as_mut() {
                gemm(T::one(), wmat.t(), go, T::zero(), MatMut::row_major(gi.data_mut(), k, p, p));
            }
            return grad_in;
        }

        let band = self.band_rows(w);
        let mut cols = Vec::new();
        let mut gcols = Vec::new();
        let mut y0 = 0;
        while y0 < h {
            let y1 = (y0 + band).min(h);
            let n = (y1 - y0) * w;
            let go = MatRef::row_major(&grad_out.data()[y0 * w..], self.out_channels, n, p);
            if let Some(g) = grads.as_deref_mut() {
                self.im2col(x, y0, y1, &mut cols);
                gemm(
                    T::one(),
                    go,
                    MatRef::row_major(&cols, k, n, n).t(),
                    T::one(),
                    MatMut::row_major(&mut g.weight, self.out_channels, k, k),
                );
            }
            if let Some(gi) = grad_in.as_mut() {
                gcols.clear();
                gcols.resize(k * n, T::zero());
                gemm(T::one(), wmat.t(), go, T::zero(), MatMut::row_major(&mut gcols, k, n, n));
                self.col2im(&gcols, y0, y1, gi);
            }
            y0 = y1;
        }
        grad_in
    }

    fn x_maps(&self, w: usize) -> Vec<Vec<usize>> {
        let pad = (self.kernel / 2) as isize;
        (0..self.kernel)
            .map(|kx| {
                (0..w)
                    .map(|x| reflect(x as isize + kx as isize - pad, w))
                    .collect()
            })
            .collect()
    }

    fn im2col(&self, x: &Tensor<T>, y0: usize, y1: usize, cols: &mut Vec<T>) {
        let (h, w) = (x.height(), x.width());
        let ks = self.kernel;
        let pad = (ks / 2) as isize;
        let n = (y1 - y0) * w;
        cols.clear();
        cols.resize(self.patch_len() * n, T::zero());
        let xmaps = self.x_maps(w);
        for ci in 0..self.in_channels {
            let plane = x.channel(ci);
            for ky in 0..ks {
                for (kx, xmap) in xmaps.iter().enumerate() {
                    let row = (ci * ks + ky) * ks + kx;
                    let dst = &mut cols[row * n..(row + 1) * n];
                    for y in y0..y1 {
                        let sy = reflect(y as isize + ky as isize - pad, h);
                        let src = &plane[sy * w..(sy + 1) * w];
                        let d = &mut dst[(y - y0) * w..(y - y0 + 1) * w];
                        for (dv, &sx) in d.iter_mut().zip(xmap) {
                            *dv = src[sx];
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[T], y0: usize, y1: usize, grad_in: &mut Tensor<T>) {
        let (h, w) = (grad_in.height(), grad_in.width());
        let ks = self.kernel;
        let pad = (ks / 2) as isize;
        let n = (y1 - y0) * w;
        let xmaps = self.x_maps(w);
        for ci in 0..self.in_channels {
            let plane = grad_in.channel_mut(ci);
            for ky in 0..ks {
                for (kx, xmap) in xmaps.iter().enumerate() {
                    let row = (ci * ks + ky) * ks + kx;
                    let src = &cols[row * n..(row + 1) * n];
                    for y in y0..y1 {
                        let sy = reflect(y as isize + ky as isize - pad, h);
                        let s = &src[(y - y0) * w..(y - y0 + 1) * w];
                        let dst = &mut plane[sy * w..(sy + 1) * w];
                        for (&sv, &sx) in s.iter().zip(xmap) {
                            dst[sx] += sv;
                        }
                    }
                }
            }
        }
    }
}

pub fn relu_inplace<T: Real>(x: &mut Tensor<T>) {
    for v in x.data_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Zero the gradient wherever the ReLU output was not positive.
pub fn relu_backward_inplace<T: Real>(grad: &mut Tensor<T>, out: &Tensor<T>) {
    assert_eq!(grad.shape(), out.shape());
    for (g, &o) in grad.data_mut().iter_mut().zip(out.data()) {
        if o <= T::zero() {
            *g = T::zero();
        }
    }
}

/// 2×2 max pooling, stride 2, ceil mode. Returns the pooled map and the flat
/// input index of every selected maximum.
pub fn max_pool2<T: Real>(x: &Tensor<T>) -> (Tensor<T>, Vec<u32>) {
    let (c, h, w) = (x.channels(), x.height(), x.width());
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = Tensor::zeros(c, oh, ow);
    let mut idx = vec![0u32; c * oh * ow];
    for ch in 0..c {
        let plane = x.channel(ch);
        let base = ch * h * w;
        let dst = out.channel_mut(ch);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_i = 2 * oy * w + 2 * ox;
                let mut best = plane[best_i];
                for y in 2 * oy..(2 * oy + 2).min(h) {
                    for xx in 2 * ox..(2 * ox + 2).min(w) {
                        let v = plane[y * w + xx];
                        if v > best {
                            best = v;
                            best_i = y * w + xx;
                        }
                    }
                }
                dst[oy * ow + ox] = best;
                idx[ch * oh * ow + oy * ow + ox] = (base + best_i) as u32;
            }
        }
    }
    (out, idx)
}

pub fn max_pool2_backward<T: Real>(
    grad_out: &Tensor<T>,
    idx: &[u32],
    input_shape: [usize; 3],
) -> Tensor<T> {
    let mut g = Tensor::zeros(input_shape[0], input_shape[1], input_shape[2]);
    let gd = g.data_mut();
    for (&i, &v) in idx.iter().zip(grad_out.data()) {
        gd[i as usize] += v;
    }
    g
}

/// Nearest-neighbour 2× upsampling.
pub fn upsample2<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (x.height(), x.width());
    Tensor::from_fn(x.channels(), 2 * h, 2 * w, |c, y, xx| x.at(c, y / 2, xx / 2))
}

pub fn upsample2_backward<T: Real>(grad_out: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = (grad_out.channels(), grad_out.height() / 2, grad_out.width() / 2);
    let mut g = Tensor::zeros(c, h, w);
    let ow = grad_out.width();
    for ch in 0..c {
        let src = grad_out.channel(ch);
        let dst = g.channel_mut(ch);
        for y in 0..2 * h {
            for x in 0..2 * w {
                dst[(y / 2) * w + x / 2] += src[y * ow + x];
            }
        }
    }
    g
}

/// Adaptive average pooling to `out_h × out_w` (bin edges floor/ceil, as in the
/// common deep-learning frameworks). Exact block averaging when sizes divide.
pub fn adaptive_avg_pool<T: Real>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Tensor<T> {
    let (h, w) = (x.height(), x.width());
    Tensor::from_fn(x.channels(), out_h, out_w, |c, oy, ox| {
        let (y0, y1) = (oy * h / out_h, ((oy + 1) * h).div_ceil(out_h));
        let (x0, x1) = (ox * w / out_w, ((ox + 1) * w).div_ceil(out_w));
        let plane = x.channel(c);
        let mut s = 0.0f64;
        for y in y0..y1 {
            for xx in x0..x1 {
                s += plane[y * w + xx].as_f64();
            }
        }
        T::from_f64_lossy(s / ((y1 - y0) * (x1 - x0)) as f64)
    })
}

/// Concatenate along the channel axis. All parts share a spatial size.
pub fn concat_channels<T: Real>(parts: &[&Tensor<T>]) -> Tensor<T> {
    let (h, w) = (parts[0].height(), parts[0].width());
    let mut data = Vec::with_capacity(parts.iter().map(|t| t.data().len()).sum());
    let mut c = 0;
    for t in parts {
        assert_eq!((t.height(), t.width()), (h, w), "concat spatial mismatch");
        data.extend_from_slice(t.data());
        c += t.channels();
    }
    Tensor::from_vec(c, h, w, data)
}

/// Leading `channels` channels of `x`.
pub fn take_channels<T: Real>(x: &Tensor<T>, channels: usize) -> Tensor<T> {
    let n = channels * x.plane();
    Tensor::from_vec(channels, x.height(), x.width(), x.data()[..n].to_vec())
}

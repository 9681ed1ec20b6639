//! Layer kernels with hand-derived backward passes.
//!
//! Activations are per-sample `C x H x W` blocks, H running over time
//! frames and W over mel bands. Convolutions lower to one GEMM per sample.

/// A `C x H x W` activation, row-major within each channel plane.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let hw = self.h * self.w;
        &self.data[c * hw..(c + 1) * hw]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let hw = self.h * self.w;
        &mut self.data[c * hw..(c + 1) * hw]
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.c, self.h, self.w)
    }
}

/// `c = a * b + beta * c` for row-major `c` (m x n). `a` is m x k and `b`
/// is k x n, each addressed through explicit (row, column) strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    let span = |rows: usize, cols: usize, (rs, cs): (usize, usize)| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs + (cols - 1) * cs + 1
        }
    };
    assert!(a.len() >= span(m, k, a_strides));
    assert!(b.len() >= span(k, n, b_strides));
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Bias-free 2-D convolution. `weight` is the offset of its
/// `[cout, cin, k, k]` kernel in the flat parameter vector.
#[derive(Debug, Clone)]
pub(crate) struct Conv {
    pub weight: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn len(&self) -> usize {
        self.cout * self.cin * self.k * self.k
    }

    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    /// Input position read by output index `o` at kernel tap `t`.
    #[inline]
    fn src(&self, o: usize, t: usize, limit: usize) -> Option<usize> {
        let i = (o * self.stride + t).checked_sub(self.pad)?;
        (i < limit).then_some(i)
    }

    /// Unfolds `x` into a `(cin*k*k) x (ho*wo)` matrix; row
    /// `(ci*k + kh)*k + kw`, column `oh*wo + ow`.
    fn im2col(&self, x: &FeatureMap, ho: usize, wo: usize) -> Vec<f64> {
        let p = ho * wo;
        let mut cols = vec![0.0; self.rows() * p];
        for ci in 0..self.cin {
            let plane = x.plane(ci);
            for kh in 0..self.k {
                for kw in 0..self.k {
                    let row = (ci * self.k + kh) * self.k + kw;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oh in 0..ho {
                        let Some(ih) = self.src(oh, kh, x.h) else { continue };
                        let src = &plane[ih * x.w..(ih + 1) * x.w];
                        let out = &mut dst[oh * wo..(oh + 1) * wo];
                        for (ow, v) in out.iter_mut().enumerate() {
                            if let Some(iw) = self.src(ow, kw, x.w) {
                                *v = src[iw];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64], h: usize, w: usize, ho: usize, wo: usize) -> FeatureMap {
        let p = ho * wo;
        let mut dx = FeatureMap::zeros(self.cin, h, w);
        for ci in 0..self.cin {
            let plane = dx.plane_mut(ci);
            for kh in 0..self.k {
                for kw in 0..self.k {
                    let row = (ci * self.k + kh) * self.k + kw;
                    let src = &cols[row * p..(row + 1) * p];
                    for oh in 0..ho {
                        let Some(ih) = self.src(oh, kh, h) else { continue };
                        let dst = &mut plane[ih * w..(ih + 1) * w];
                        for ow in 0..wo {
                            if let Some(iw) = self.src(ow, kw, w) {
                                dst[iw] += src[oh * wo + ow];
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&self, weights: &[f64], x: &FeatureMap) -> FeatureMap {
        debug_assert_eq!(x.c, self.cin);
        let (ho, wo) = self.out_dims(x.h, x.w);
        let p = ho * wo;
        let r = self.rows();
        let cols = self.im2col(x, ho, wo);
        let kernel = &weights[self.weight..self.weight + self.len()];
        let mut y = FeatureMap::zeros(self.cout, ho, wo);
        gemm(self.cout, r, p, kernel, (r, 1), &cols, (p, 1), 0.0, &mut y.data);
        y
    }

    /// Accumulates the kernel gradient into `grad` and returns the input
    /// gradient.
    pub fn backward(
        &self,
        weights: &[f64],
        x: &FeatureMap,
        dy: &FeatureMap,
        grad: &mut [f64],
    ) -> FeatureMap {
        let (ho, wo) = (dy.h, dy.w);
        let p = ho * wo;
        let r = self.rows();
        let cols = self.im2col(x, ho, wo);
        let range = self.weight..self.weight + self.len();
        // dW += dY * cols^T
        gemm(self.cout, p, r, &dy.data, (p, 1), &cols, (1, p), 1.0, &mut grad[range.clone()]);
        // dcols = W^T * dY
        let mut dcols = vec![0.0; r * p];
        gemm(r, self.cout, p, &weights[range], (1, r), &dy.data, (p, 1), 0.0, &mut dcols);
        self.col2im(&dcols, x.h, x.w, ho, wo)
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel batch norm. `gamma`/`beta` index the trainable vector,
/// `mean`/`var` the running-statistics vector.
#[derive(Debug, Clone)]
pub(crate) struct BatchNorm {
    pub gamma: usize,
    pub beta: usize,
    pub mean: usize,
    pub var: usize,
    pub c: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct BnCache {
    pub xhat: Vec<FeatureMap>,
    pub inv_std: Vec<f64>,
    /// Batch statistics (biased variance) in training mode.
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
    pub count: usize,
    pub train: bool,
}

impl BatchNorm {
    pub fn forward(
        &self,
        weights: &[f64],
        running: &[f64],
        xs: &[FeatureMap],
        train: bool,
    ) -> (Vec<FeatureMap>, BnCache) {
        let count: usize = xs.iter().map(|x| x.h * x.w).sum();
        let mut mean = vec![0.0; self.c];
        let mut var = vec![0.0; self.c];
        if train {
            for c in 0..self.c {
                let s: f64 = xs.iter().map(|x| x.plane(c).iter().sum::<f64>()).sum();
                let m = s / count as f64;
                let ss: f64 = xs
                    .iter()
                    .map(|x| x.plane(c).iter().map(|v| (v - m) * (v - m)).sum::<f64>())
                    .sum();
                mean[c] = m;
                var[c] = ss / count as f64;
            }
        } else {
            mean.copy_from_slice(&running[self.mean..self.mean + self.c]);
            var.copy_from_slice(&running[self.var..self.var + self.c]);
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = Vec::with_capacity(xs.len());
        let mut ys = Vec::with_capacity(xs.len());
        for x in xs {
            let mut xh = x.clone();
            let mut y = x.clone();
            for c in 0..self.c {
                let (g, b) = (weights[self.gamma + c], weights[self.beta + c]);
                let (m, is) = (mean[c], inv_std[c]);
                for (h, o) in xh.plane_mut(c).iter_mut().zip(y.plane_mut(c)) {
                    *h = (*h - m) * is;
                    *o = g * *h + b;
                }
            }
            xhat.push(xh);
            ys.push(y);
        }
        let cache = BnCache {
            xhat,
            inv_std,
            batch_mean: if train { mean } else { Vec::new() },
            batch_var: if train { var } else { Vec::new() },
            count,
            train,
        };
        (ys, cache)
    }

    pub fn backward(
        &self,
        weights: &[f64],
        cache: &BnCache,
        dys: &[FeatureMap],
        grad: &mut [f64],
    ) -> Vec<FeatureMap> {
        let n = cache.count as f64;
        let mut dxs = dys.to_vec();
        for c in 0..self.c {
            let mut sdy = 0.0;
            let mut sdyx = 0.0;
            for (dy, xh) in dys.iter().zip(&cache.xhat) {
                for (d, x) in dy.plane(c).iter().zip(xh.plane(c)) {
                    sdy += d;
                    sdyx += d * x;
                }
            }
            grad[self.gamma + c] += sdyx;
            grad[self.beta + c] += sdy;
            let scale = weights[self.gamma + c] * cache.inv_std[c];
            for (dx, xh) in dxs.iter_mut().zip(&cache.xhat) {
                for (d, x) in dx.plane_mut(c).iter_mut().zip(xh.plane(c)) {
                    *d = if cache.train {
                        scale * (*d - sdy / n - x * sdyx / n)
                    } else {
                        scale * *d
                    };
                }
            }
        }
        dxs
    }

    /// Momentum update of the running statistics from one training batch.
    pub fn update_running(&self, running: &mut [f64], cache: &BnCache) {
        if !cache.train {
            return;
        }
        let unbias = if cache.count > 1 {
            cache.count as f64 / (cache.count - 1) as f64
        } else {
            1.0
        };
        for c in 0..self.c {
            let m = &mut running[self.mean + c];
            *m = (1.0 - BN_MOMENTUM) * *m + BN_MOMENTUM * cache.batch_mean[c];
            let v = &mut running[self.var + c];
            *v = (1.0 - BN_MOMENTUM) * *v + BN_MOMENTUM * cache.batch_var[c] * unbias;
        }
    }
}

pub fn relu_in_place(x: &mut FeatureMap) {
    for v in &mut x.data {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Zeroes `d` wherever the ReLU output `y` is not positive.
pub fn relu_backward(y: &FeatureMap, d: &mut FeatureMap) {
    for (g, &v) in d.data.iter_mut().zip(&y.data) {
        if v <= 0.0 {
            *g = 0.0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};

    fn random_map(c: usize, h: usize, w: usize, rng: &mut impl Rng) -> FeatureMap {
        FeatureMap {
            c,
            h,
            w,
            data: (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect(),
        }
    }

    /// Direct nested-loop convolution.
    fn naive_conv(conv: &Conv, weights: &[f64], x: &FeatureMap) -> FeatureMap {
        let (ho, wo) = conv.out_dims(x.h, x.w);
        let mut y = FeatureMap::zeros(conv.cout, ho, wo);
        for co in 0..conv.cout {
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut acc = 0.0;
                    for ci in 0..conv.cin {
                        for kh in 0..conv.k {
                            for kw in 0..conv.k {
                                let ih = (oh * conv.stride + kh) as isize - conv.pad as isize;
                                let iw = (ow * conv.stride + kw) as isize - conv.pad as isize;
                                if ih < 0 || iw < 0 || ih >= x.h as isize || iw >= x.w as isize {
                                    continue;
                                }
                                let wi = ((co * conv.cin + ci) * conv.k + kh) * conv.k + kw;
                                acc += weights[conv.weight + wi]
                                    * x.plane(ci)[ih as usize * x.w + iw as usize];
                            }
                        }
                    }
                    y.plane_mut(co)[oh * wo + ow] = acc;
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for (k, stride, pad, h, w) in [(3, 1, 1, 7, 5), (3, 2, 1, 9, 6), (1, 2, 0, 5, 8)] {
            let conv = Conv { weight: 4, cin: 3, cout: 2, k, stride, pad };
            let weights: Vec<f64> = (0..conv.len() + 4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let x = random_map(3, h, w, &mut rng);
            let fast = conv.forward(&weights, &x);
            let slow = naive_conv(&conv, &weights, &x);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data.iter().zip(&slow.data) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn strided_dims_round_up() {
        let conv = Conv { weight: 0, cin: 1, cout: 1, k: 3, stride: 2, pad: 1 };
        assert_eq!(conv.out_dims(15, 120), (8, 60));
        let short = Conv { k: 1, pad: 0, ..conv };
        assert_eq!(short.out_dims(15, 7), (8, 4));
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <conv(x), dy> = <x, dx> for a linear map, and dW pairs likewise
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let conv = Conv { weight: 0, cin: 2, cout: 3, k: 3, stride: 2, pad: 1 };
        let weights: Vec<f64> = (0..conv.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = random_map(2, 6, 7, &mut rng);
        let y = conv.forward(&weights, &x);
        let dy = random_map(y.c, y.h, y.w, &mut rng);
        let mut grad = vec![0.0; conv.len()];
        let dx = conv.backward(&weights, &x, &dy, &mut grad);
        let lhs: f64 = y.data.iter().zip(&dy.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data.iter().zip(&dx.data).map(|(a, b)| a * b).sum();
        assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-10);
        let rhs_w: f64 = weights.iter().zip(&grad).map(|(a, b)| a * b).sum();
        assert_abs_diff_eq!(lhs, rhs_w, epsilon = 1e-10);
    }

    #[test]
    fn batch_norm_normalizes_in_training() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let bn = BatchNorm { gamma: 0, beta: 2, mean: 0, var: 2, c: 2 };
        let weights = [1.0, 1.0, 0.0, 0.0];
        let running = [0.0, 0.0, 1.0, 1.0];
        let xs = vec![random_map(2, 3, 4, &mut rng), random_map(2, 5, 4, &mut rng)];
        let (ys, cache) = bn.forward(&weights, &running, &xs, true);
        assert_eq!(cache.count, 32);
        for c in 0..2 {
            let vals: Vec<f64> = ys.iter().flat_map(|y| y.plane(c).to_vec()).collect();
            let m = vals.iter().sum::<f64>() / 32.0;
            let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 32.0;
            assert_abs_diff_eq!(m, 0.0, epsilon = 1e-12);
            assert_abs_diff_eq!(v, 1.0, epsilon = 1e-3);
        }
        let mut run = running;
        bn.update_running(&mut run, &cache);
        assert_abs_diff_eq!(run[0], 0.1 * cache.batch_mean[0], epsilon = 1e-15);
    }
}

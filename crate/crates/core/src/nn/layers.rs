use rand_chacha::ChaCha8Rng;

use super::param::Param;
use super::tensor::Tensor;
use crate::preprocessing::bilinear_taps;

/// `C = A·B (+ C if accumulate)` for row-major operands. `a_t`/`b_t` mean the
/// stored buffer holds the transpose of the logical operand.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserted lengths cover every index addressed by the strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// 2-D convolution with square kernels, zero padding, and a bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        Self {
            weight: Param::zeros(
                format!("{name}.weight"),
                vec![out_channels, in_channels, kernel, kernel],
            ),
            bias: Param::zeros(format!("{name}.bias"), vec![out_channels]),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    pub fn param_count(in_channels: usize, out_channels: usize, kernel: usize) -> usize {
        out_channels * in_channels * kernel * kernel + out_channels
    }

    pub fn init_xavier(&mut self, rng: &mut ChaCha8Rng) {
        let rf = self.kernel * self.kernel;
        self.weight
            .xavier_uniform(self.in_channels * rf, self.out_channels * rf, rng);
        self.bias.value.iter_mut().for_each(|b| *b = 0.0);
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let oh = (h + 2 * self.padding - self.kernel) / self.stride + 1;
        let ow = (w + 2 * self.padding - self.kernel) / self.stride + 1;
        (oh, ow)
    }

    fn im2col(&self, x: &[f64], h: usize, w: usize, oh: usize, ow: usize, col: &mut [f64]) {
        let (k, s, p) = (self.kernel, self.stride as isize, self.padding as isize);
        let np = oh * ow;
        for ci in 0..self.in_channels {
            let plane = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut col[((ci * k + ky) * k + kx) * np..][..np];
                    for oy in 0..oh {
                        let iy = oy as isize * s - p + ky as isize;
                        let dst = &mut row[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= h as isize {
                            dst.iter_mut().for_each(|v| *v = 0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = ox as isize * s - p + kx as isize;
                            *d = if ix < 0 || ix >= w as isize { 0.0 } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[f64], h: usize, w: usize, oh: usize, ow: usize, dx: &mut [f64]) {
        let (k, s, p) = (self.kernel, self.stride as isize, self.padding as isize);
        let np = oh * ow;
        for ci in 0..self.in_channels {
            let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &col[((ci * k + ky) * k + kx) * np..][..np];
                    for oy in 0..oh {
                        let iy = oy as isize * s - p + ky as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..ow {
                            let ix = ox as isize * s - p + kx as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += row[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let [n, c, h, w] = x.shape();
        assert_eq!(c, self.in_channels, "{}: channel mismatch", self.weight.name);
        let (oh, ow) = self.output_size(h, w);
        let kk = c * self.kernel * self.kernel;
        let np = oh * ow;
        let mut out = Tensor::zeros([n, self.out_channels, oh, ow]);
        let mut col = vec![0.0; kk * np];
        for i in 0..n {
            self.im2col(x.item(i), h, w, oh, ow, &mut col);
            let dst = out.item_mut(i);
            for (o, b) in self.bias.value.iter().enumerate() {
                dst[o * np..(o + 1) * np].iter_mut().for_each(|v| *v = *b);
            }
            gemm(self.out_channels, kk, np, &self.weight.value, false, &col, false, dst, true);
        }
        out
    }

    /// Accumulates parameter gradients and returns the input gradient when asked.
    pub fn backward(&mut self, x: &Tensor, grad_out: &Tensor, need_input_grad: bool) -> Option<Tensor> {
        let [n, c, h, w] = x.shape();
        let (oh, ow) = self.output_size(h, w);
        assert_eq!(grad_out.shape(), [n, self.out_channels, oh, ow]);
        let kk = c * self.kernel * self.kernel;
        let np = oh * ow;
        let mut col = vec![0.0; kk * np];
        let mut dcol = vec![0.0; kk * np];
        let mut dx = need_input_grad.then(|| Tensor::zeros(x.shape()));
        for i in 0..n {
            let go = grad_out.item(i);
            for o in 0..self.out_channels {
                self.bias.grad[o] += go[o * np..(o + 1) * np].iter().sum::<f64>();
            }
            self.im2col(x.item(i), h, w, oh, ow, &mut col);
            gemm(self.out_channels, np, kk, go, false, &col, true, &mut self.weight.grad, true);
            if let Some(dx) = dx.as_mut() {
                gemm(kk, self.out_channels, np, &self.weight.value, true, go, false, &mut dcol, false);
                self.col2im(&dcol, h, w, oh, ow, dx.item_mut(i));
            }
        }
        dx
    }

    pub fn params(&self) -> [&Param; 2] {
        [&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut Param; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

/// Fully connected layer on `[n, in, 1, 1]` tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new(name: &str, in_features: usize, out_features: usize) -> Self {
        Self {
            weight: Param::zeros(format!("{name}.weight"), vec![out_features, in_features]),
            bias: Param::zeros(format!("{name}.bias"), vec![out_features]),
            in_features,
            out_features,
        }
    }

    pub fn init_xavier(&mut self, rng: &mut ChaCha8Rng) {
        self.weight.xavier_uniform(self.in_features, self.out_features, rng);
        self.bias.value.iter_mut().for_each(|b| *b = 0.0);
    }

    /// Row `o` of the weight matrix.
    pub fn weight_row(&self, o: usize) -> &[f64] {
        &self.weight.value[o * self.in_features..(o + 1) * self.in_features]
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let n = x.batch();
        assert_eq!(x.item_len(), self.in_features, "{}: feature mismatch", self.weight.name);
        let mut out = Tensor::zeros([n, self.out_features, 1, 1]);
        for i in 0..n {
            out.item_mut(i).copy_from_slice(&self.bias.value);
        }
        gemm(
            n,
            self.in_features,
            self.out_features,
            x.data(),
            false,
            &self.weight.value,
            true,
            out.data_mut(),
            true,
        );
        out
    }

    pub fn backward(&mut self, x: &Tensor, grad_out: &Tensor) -> Tensor {
        let n = x.batch();
        for i in 0..n {
            for (g, d) in self.bias.grad.iter_mut().zip(grad_out.item(i)) {
                *g += d;
            }
        }
        gemm(
            self.out_features,
            n,
            self.in_features,
            grad_out.data(),
            true,
            x.data(),
            false,
            &mut self.weight.grad,
            true,
        );
        let mut dx = Tensor::zeros(x.shape());
        gemm(
            n,
            self.out_features,
            self.in_features,
            grad_out.data(),
            false,
            &self.weight.value,
            false,
            dx.data_mut(),
            false,
        );
        dx
    }

    pub fn params(&self) -> [&Param; 2] {
        [&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut Param; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    y
}

/// Gradient through a ReLU given its output.
pub fn relu_backward(y: &Tensor, grad_out: &Tensor) -> Tensor {
    let mut g = grad_out.clone();
    for (gv, yv) in g.data_mut().iter_mut().zip(y.data()) {
        if *yv <= 0.0 {
            *gv = 0.0;
        }
    }
    g
}

/// Global average pooling to `[n, c, 1, 1]`.
pub fn global_avg_pool(x: &Tensor) -> Tensor {
    let [n, c, h, w] = x.shape();
    let hw = h * w;
    let mut out = Tensor::zeros([n, c, 1, 1]);
    for i in 0..n {
        let src = x.item(i);
        for (ch, o) in out.item_mut(i).iter_mut().enumerate() {
            *o = src[ch * hw..(ch + 1) * hw].iter().sum::<f64>() / hw as f64;
        }
    }
    out
}

pub fn global_avg_pool_backward(input_shape: [usize; 4], grad_out: &Tensor) -> Tensor {
    let [n, c, h, w] = input_shape;
    let hw = h * w;
    let mut g = Tensor::zeros(input_shape);
    for i in 0..n {
        let go = grad_out.item(i);
        let dst = g.item_mut(i);
        for ch in 0..c {
            let v = go[ch] / hw as f64;
            dst[ch * hw..(ch + 1) * hw].iter_mut().for_each(|d| *d = v);
        }
    }
    g
}

/// Bilinear resampling of every plane to `out_h` x `out_w` (half-pixel centers).
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let [n, c, h, w] = x.shape();
    if (h, w) == (out_h, out_w) {
        return x.clone();
    }
    let xt = bilinear_taps(w, out_w);
    let yt = bilinear_taps(h, out_h);
    let mut out = Tensor::zeros([n, c, out_h, out_w]);
    for i in 0..n {
        let src = x.item(i);
        let dst = out.item_mut(i);
        for ch in 0..c {
            let sp = &src[ch * h * w..(ch + 1) * h * w];
            let dp = &mut dst[ch * out_h * out_w..(ch + 1) * out_h * out_w];
            for (oy, &(y0, y1, fy)) in yt.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in xt.iter().enumerate() {
                    let top = (1.0 - fx) * sp[y0 * w + x0] + fx * sp[y0 * w + x1];
                    let bot = (1.0 - fx) * sp[y1 * w + x0] + fx * sp[y1 * w + x1];
                    dp[oy * out_w + ox] = (1.0 - fy) * top + fy * bot;
                }
            }
        }
    }
    out
}

pub fn resize_bilinear_backward(input_shape: [usize; 4], grad_out: &Tensor) -> Tensor {
    let [n, c, h, w] = input_shape;
    let [_, _, out_h, out_w] = grad_out.shape();
    if (h, w) == (out_h, out_w) {
        return grad_out.clone();
    }
    let xt = bilinear_taps(w, out_w);
    let yt = bilinear_taps(h, out_h);
    let mut g = Tensor::zeros(input_shape);
    for i in 0..n {
        let go = grad_out.item(i);
        let dst = g.item_mut(i);
        for ch in 0..c {
            let gp = &go[ch * out_h * out_w..(ch + 1) * out_h * out_w];
            let dp = &mut dst[ch * h * w..(ch + 1) * h * w];
            for (oy, &(y0, y1, fy)) in yt.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in xt.iter().enumerate() {
                    let v = gp[oy * out_w + ox];
                    dp[y0 * w + x0] += (1.0 - fy) * (1.0 - fx) * v;
                    dp[y0 * w + x1] += (1.0 - fy) * fx * v;
                    dp[y1 * w + x0] += fy * (1.0 - fx) * v;
                    dp[y1 * w + x1] += fy * fx * v;
                }
            }
        }
    }
    g
}

/// 2x2 max pooling with stride 2 (odd trailing rows/columns dropped).
/// Returns the pooled tensor and the flat argmax index for each output.
pub fn max_pool2(x: &Tensor) -> (Tensor, Vec<usize>) {
    let [n, c, h, w] = x.shape();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros([n, c, oh.max(1), ow.max(1)]);
    let mut arg = Vec::with_capacity(out.data().len());
    let item = c * h * w;
    for i in 0..n {
        for ch in 0..c {
            for oy in 0..oh.max(1) {
                for ox in 0..ow.max(1) {
                    let mut best = f64::NEG_INFINITY;
                    let mut bi = 0;
                    for dy in 0..2.min(h) {
                        for dx in 0..2.min(w) {
                            let idx = i * item + ch * h * w + (oy * 2 + dy) * w + ox * 2 + dx;
                            if x.data()[idx] > best {
                                best = x.data()[idx];
                                bi = idx;
                            }
                        }
                    }
                    out.data_mut()[arg.len()] = best;
                    arg.push(bi);
                }
            }
        }
    }
    (out, arg)
}

pub fn max_pool2_backward(input_shape: [usize; 4], argmax: &[usize], grad_out: &Tensor) -> Tensor {
    let mut g = Tensor::zeros(input_shape);
    for (&idx, &v) in argmax.iter().zip(grad_out.data()) {
        g.data_mut()[idx] += v;
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rand_tensor(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct-loop convolution used as the oracle for the im2col path.
    fn naive_conv(conv: &Conv2d, x: &Tensor) -> Tensor {
        let [n, c, h, w] = x.shape();
        let (oh, ow) = conv.output_size(h, w);
        let k = conv.kernel;
        let mut out = Tensor::zeros([n, conv.out_channels, oh, ow]);
        for i in 0..n {
            for o in 0..conv.out_channels {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = conv.bias.value[o];
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * conv.stride + ky) as isize - conv.padding as isize;
                                    let ix = (ox * conv.stride + kx) as isize - conv.padding as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        acc += conv.weight.value[((o * c + ci) * k + ky) * k + kx]
                                            * x.item(i)[(ci * h + iy as usize) * w + ix as usize];
                                    }
                                }
                            }
                        }
                        out.item_mut(i)[(o * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn weighted_sum(t: &Tensor, weights: &Tensor) -> f64 {
        t.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(k, s, p) in &[(3, 1, 1), (3, 2, 1), (4, 4, 0), (5, 2, 2), (1, 1, 0)] {
            let mut conv = Conv2d::new("c", 3, 4, k, s, p);
            conv.init_xavier(&mut rng);
            conv.bias.value = vec![0.1, -0.2, 0.3, 0.0];
            let x = rand_tensor([2, 3, 9, 8], &mut rng);
            let a = conv.forward(&x);
            let b = naive_conv(&conv, &x);
            assert_eq!(a.shape(), b.shape());
            for (u, v) in a.data().iter().zip(b.data()) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &(k, s, p) in &[(3, 1, 1), (3, 2, 1), (4, 4, 0)] {
            let mut conv = Conv2d::new("c", 2, 3, k, s, p);
            conv.init_xavier(&mut rng);
            let x = rand_tensor([2, 2, 8, 8], &mut rng);
            let y = conv.forward(&x);
            let probe = rand_tensor(y.shape(), &mut rng);
            let dx = conv.backward(&x, &probe, true).unwrap();
            let eps = 1e-6;
            for j in (0..conv.weight.len()).step_by(5) {
                let mut c2 = conv.clone();
                c2.weight.value[j] += eps;
                let lp = weighted_sum(&c2.forward(&x), &probe);
                c2.weight.value[j] -= 2.0 * eps;
                let lm = weighted_sum(&c2.forward(&x), &probe);
                let fd = (lp - lm) / (2.0 * eps);
                assert!((fd - conv.weight.grad[j]).abs() < 1e-6, "w[{j}] {fd} vs {}", conv.weight.grad[j]);
            }
            for j in (0..x.data().len()).step_by(7) {
                let mut xp = x.clone();
                xp.data_mut()[j] += eps;
                let lp = weighted_sum(&conv.forward(&xp), &probe);
                xp.data_mut()[j] -= 2.0 * eps;
                let lm = weighted_sum(&conv.forward(&xp), &probe);
                let fd = (lp - lm) / (2.0 * eps);
                assert!((fd - dx.data()[j]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut lin = Linear::new("fc", 5, 3);
        lin.init_xavier(&mut rng);
        let x = rand_tensor([4, 5, 1, 1], &mut rng);
        let probe = rand_tensor([4, 3, 1, 1], &mut rng);
        let dx = lin.backward(&x, &probe);
        let eps = 1e-6;
        for j in 0..lin.weight.len() {
            let mut l2 = lin.clone();
            l2.weight.value[j] += eps;
            let lp = weighted_sum(&l2.forward(&x), &probe);
            l2.weight.value[j] -= 2.0 * eps;
            let lm = weighted_sum(&l2.forward(&x), &probe);
            assert!(((lp - lm) / (2.0 * eps) - lin.weight.grad[j]).abs() < 1e-7);
        }
        for j in 0..x.data().len() {
            let mut xp = x.clone();
            xp.data_mut()[j] += eps;
            let lp = weighted_sum(&lin.forward(&xp), &probe);
            xp.data_mut()[j] -= 2.0 * eps;
            let lm = weighted_sum(&lin.forward(&xp), &probe);
            assert!(((lp - lm) / (2.0 * eps) - dx.data()[j]).abs() < 1e-7);
        }
    }

    #[test]
    fn bilinear_backward_is_adjoint() {
        // <resize(x), g> == <x, resize_backward(g)>
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(h, w, oh, ow) in &[(4, 4, 8, 8), (8, 8, 4, 4), (3, 5, 7, 2), (8, 8, 8, 8)] {
            let x = rand_tensor([2, 3, h, w], &mut rng);
            let y = resize_bilinear(&x, oh, ow);
            let g = rand_tensor(y.shape(), &mut rng);
            let gx = resize_bilinear_backward(x.shape(), &g);
            assert!((weighted_sum(&y, &g) - weighted_sum(&x, &gx)).abs() < 1e-10);
        }
    }

    #[test]
    fn gap_and_pool_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = rand_tensor([2, 3, 4, 6], &mut rng);
        let y = global_avg_pool(&x);
        let g = rand_tensor(y.shape(), &mut rng);
        let gx = global_avg_pool_backward(x.shape(), &g);
        assert!((weighted_sum(&y, &g) - weighted_sum(&x, &gx)).abs() < 1e-12);

        let (p, arg) = max_pool2(&x);
        assert_eq!(p.shape(), [2, 3, 2, 3]);
        let g = rand_tensor(p.shape(), &mut rng);
        let gx = max_pool2_backward(x.shape(), &arg, &g);
        assert!((weighted_sum(&p, &g) - weighted_sum(&x, &gx)).abs() < 1e-12);
    }

    #[test]
    fn gemm_transposes() {
        // A = [[1,2],[3,4]], B = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, &mut c, false);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, &mut c, false);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, &mut c, false);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }
}

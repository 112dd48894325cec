//! Layer kernels. All tensors are flat `[C, D, H, W]` C-order buffers with
//! dims passed alongside; 2D layers are the D=1 / kd=1 special case.

use rand::Rng;

use super::{init_const, init_normal, ParamAlloc, Slot};
use crate::volumes::Dims3;

fn dims_len(d: Dims3) -> usize {
    d.0 * d.1 * d.2
}

thread_local! {
    // reusable im2col scratch, one per worker thread
    static COL_BUF: std::cell::RefCell<Vec<f32>> = const { std::cell::RefCell::new(Vec::new()) };
    static DCOL_BUF: std::cell::RefCell<Vec<f32>> = const { std::cell::RefCell::new(Vec::new()) };
}

fn with_scratch<R>(
    buf: &'static std::thread::LocalKey<std::cell::RefCell<Vec<f32>>>,
    len: usize,
    f: impl FnOnce(&mut [f32]) -> R,
) -> R {
    buf.with(|cell| {
        let mut v = cell.borrow_mut();
        if v.len() < len {
            v.resize(len, 0.0);
        }
        v[..len].fill(0.0);
        f(&mut v[..len])
    })
}

/// 3D convolution (optionally strided, zero-padded).
#[derive(Debug, Clone)]
pub struct Conv3d {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: Dims3,
    pub stride: Dims3,
    pub pad: Dims3,
    pub w: Slot,
    pub b: Slot,
}

impl Conv3d {
    pub fn new(
        alloc: &mut ParamAlloc,
        c_in: usize,
        c_out: usize,
        kernel: Dims3,
        stride: Dims3,
        pad: Dims3,
    ) -> Self {
        let w = alloc.alloc(c_out * c_in * dims_len(kernel));
        let b = alloc.alloc(c_out);
        Conv3d { c_in, c_out, kernel, stride, pad, w, b }
    }

    pub fn init(&self, params: &mut [f32], rng: &mut impl Rng) {
        let fan_in = (self.c_in * dims_len(self.kernel)) as f32;
        init_normal(params, self.w, (2.0 / fan_in).sqrt(), rng);
        init_const(params, self.b, 0.0);
    }

    pub fn out_dims(&self, din: Dims3) -> Dims3 {
        let od = (din.0 + 2 * self.pad.0 - self.kernel.0) / self.stride.0 + 1;
        let oh = (din.1 + 2 * self.pad.1 - self.kernel.1) / self.stride.1 + 1;
        let ow = (din.2 + 2 * self.pad.2 - self.kernel.2) / self.stride.2 + 1;
        assert!(
            din.0 + 2 * self.pad.0 >= self.kernel.0
                && din.1 + 2 * self.pad.1 >= self.kernel.1
                && din.2 + 2 * self.pad.2 >= self.kernel.2,
            "input {din:?} smaller than kernel {:?}",
            self.kernel
        );
        (od, oh, ow)
    }

    /// Valid output range along one axis for a kernel offset `k`:
    /// indices `o` with `0 <= o*s + k - p < size`.
    #[inline]
    fn out_range(k: usize, p: usize, s: usize, size: usize, out: usize) -> (usize, usize) {
        let lo = if k >= p { 0 } else { (p - k).div_ceil(s) };
        let hi_num = size + p;
        if hi_num <= k {
            return (1, 0); // empty
        }
        let hi = ((hi_num - 1 - k) / s).min(out.saturating_sub(1));
        (lo, hi)
    }

    /// Lower the input into a `[c_in * k, out_spatial]` patch matrix
    /// (written into a zeroed scratch buffer).
    fn im2col(&self, x: &[f32], din: Dims3, dout: Dims3, col: &mut [f32]) {
        let (d, h, w) = din;
        let (od, oh, ow) = dout;
        let (kd, kh, kw) = self.kernel;
        let (sd, sh, sw) = self.stride;
        let (pd, ph, pw) = self.pad;
        let n = od * oh * ow;
        debug_assert_eq!(col.len(), self.c_in * kd * kh * kw * n);
        for ci in 0..self.c_in {
            let xbase = ci * d * h * w;
            for kz in 0..kd {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let (lo, hi) = Self::out_range(kx, pw, sw, w, ow);
                        let row_base =
                            ((ci * kd + kz) * kh + ky) * kw * n + kx * n;
                        if lo > hi {
                            continue;
                        }
                        let cnt = hi - lo + 1;
                        for oz in 0..od {
                            let iz = oz * sd + kz;
                            if iz < pd || iz - pd >= d {
                                continue;
                            }
                            let iz = iz - pd;
                            for oy in 0..oh {
                                let iy = oy * sh + ky;
                                if iy < ph || iy - ph >= h {
                                    continue;
                                }
                                let iy = iy - ph;
                                let xrow = xbase + (iz * h + iy) * w;
                                let cbase = row_base + (oz * oh + oy) * ow;
                                let xoff = xrow + lo * sw + kx - pw;
                                if sw == 1 {
                                    col[cbase + lo..cbase + lo + cnt]
                                        .copy_from_slice(&x[xoff..xoff + cnt]);
                                } else {
                                    let xs = &x[xoff..];
                                    let cs = &mut col[cbase + lo..cbase + lo + cnt];
                                    for i in 0..cnt {
                                        cs[i] = xs[i * sw];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Scatter-add a patch-matrix gradient back onto the input layout.
    fn col2im(&self, dcol: &[f32], din: Dims3, dout: Dims3) -> Vec<f32> {
        let (d, h, w) = din;
        let (od, oh, ow) = dout;
        let (kd, kh, kw) = self.kernel;
        let (sd, sh, sw) = self.stride;
        let (pd, ph, pw) = self.pad;
        let n = od * oh * ow;
        let mut dx = vec![0.0f32; self.c_in * d * h * w];
        for ci in 0..self.c_in {
            let xbase = ci * d * h * w;
            for kz in 0..kd {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let (lo, hi) = Self::out_range(kx, pw, sw, w, ow);
                        if lo > hi {
                            continue;
                        }
                        let cnt = hi - lo + 1;
                        let row_base = ((ci * kd + kz) * kh + ky) * kw * n + kx * n;
                        for oz in 0..od {
                            let iz = oz * sd + kz;
                            if iz < pd || iz - pd >= d {
                                continue;
                            }
                            let iz = iz - pd;
                            for oy in 0..oh {
                                let iy = oy * sh + ky;
                                if iy < ph || iy - ph >= h {
                                    continue;
                                }
                                let iy = iy - ph;
                                let xrow = xbase + (iz * h + iy) * w;
                                let cbase = row_base + (oz * oh + oy) * ow;
                                let xoff = xrow + lo * sw + kx - pw;
                                if sw == 1 {
                                    axpy(
                                        &mut dx[xoff..xoff + cnt],
                                        &dcol[cbase + lo..cbase + lo + cnt],
                                        1.0,
                                    );
                                } else {
                                    let cs = &dcol[cbase + lo..cbase + lo + cnt];
                                    let xs = &mut dx[xoff..];
                                    for i in 0..cnt {
                                        xs[i * sw] += cs[i];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&self, params: &[f32], x: &[f32], din: Dims3) -> (Vec<f32>, Dims3) {
        let dout = self.out_dims(din);
        debug_assert_eq!(x.len(), self.c_in * din.0 * din.1 * din.2);
        let wt = self.w.of(params);
        let bias = self.b.of(params);
        let n = dout.0 * dout.1 * dout.2;
        let ktot = self.c_in * self.kernel.0 * self.kernel.1 * self.kernel.2;
        let mut y = vec![0.0f32; self.c_out * n];
        with_scratch(&COL_BUF, ktot * n, |col| {
            self.im2col(x, din, dout, col);
            for m in 0..self.c_out {
                y[m * n..(m + 1) * n].fill(bias[m]);
            }
            // y += W (c_out x ktot) * col (ktot x n)
            unsafe {
                matrixmultiply::sgemm(
                    self.c_out, ktot, n,
                    1.0,
                    wt.as_ptr(), ktot as isize, 1,
                    col.as_ptr(), n as isize, 1,
                    1.0,
                    y.as_mut_ptr(), n as isize, 1,
                );
            }
        });
        (y, dout)
    }

    /// Backprop; accumulates weight/bias grads into `gparams` and returns dx.
    pub fn backward(
        &self,
        params: &[f32],
        x: &[f32],
        din: Dims3,
        dy: &[f32],
        gparams: &mut [f32],
    ) -> Vec<f32> {
        let dout = self.out_dims(din);
        let n = dout.0 * dout.1 * dout.2;
        let ktot = self.c_in * self.kernel.0 * self.kernel.1 * self.kernel.2;
        debug_assert_eq!(dy.len(), self.c_out * n);
        let wt = self.w.of(params);

        // bias grads
        for m in 0..self.c_out {
            gparams[self.b.off + m] += sum(&dy[m * n..(m + 1) * n]);
        }

        with_scratch(&COL_BUF, ktot * n, |col| {
        self.im2col(x, din, dout, col);
        with_scratch(&DCOL_BUF, ktot * n, |dcol| {
        let gw = &mut gparams[self.w.off..self.w.off + self.c_out * ktot];
        unsafe {
            // dW += dY (c_out x n) * col^T (n x ktot)
            matrixmultiply::sgemm(
                self.c_out, n, ktot,
                1.0,
                dy.as_ptr(), n as isize, 1,
                col.as_ptr(), 1, n as isize,
                1.0,
                gw.as_mut_ptr(), ktot as isize, 1,
            );
            // dcol = W^T (ktot x c_out) * dY (c_out x n)
            matrixmultiply::sgemm(
                ktot, self.c_out, n,
                1.0,
                wt.as_ptr(), 1, ktot as isize,
                dy.as_ptr(), n as isize, 1,
                0.0,
                dcol.as_mut_ptr(), n as isize, 1,
            );
        }
        self.col2im(dcol, din, dout)
        })
        })
    }
}

/// acc[i] += w * x[i]; independent lanes, autovectorizes.
#[inline]
fn axpy(acc: &mut [f32], x: &[f32], w: f32) {
    let n = acc.len().min(x.len());
    let (a, b) = (&mut acc[..n], &x[..n]);
    for i in 0..n {
        a[i] += w * b[i];
    }
}

/// Sum with 8 accumulator lanes.
#[inline]
fn sum(a: &[f32]) -> f32 {
    let mut lanes = [0.0f32; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let av = &a[c * 8..c * 8 + 8];
        for l in 0..8 {
            lanes[l] += av[l];
        }
    }
    let mut s = lanes.iter().sum::<f32>();
    for v in &a[chunks * 8..] {
        s += v;
    }
    s
}

/// Group normalization over `[C, spatial]` for one sample. Identical in
/// train and eval mode.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub channels: usize,
    pub groups: usize,
    pub eps: f32,
    pub gamma: Slot,
    pub beta: Slot,
}

impl GroupNorm {
    pub fn new(alloc: &mut ParamAlloc, channels: usize, groups: usize) -> Self {
        assert!(channels % groups == 0, "channels {channels} not divisible by groups {groups}");
        GroupNorm {
            channels,
            groups,
            eps: 1e-5,
            gamma: alloc.alloc(channels),
            beta: alloc.alloc(channels),
        }
    }

    pub fn init(&self, params: &mut [f32]) {
        init_const(params, self.gamma, 1.0);
        init_const(params, self.beta, 0.0);
    }

    fn stats(&self, x: &[f32], spatial: usize) -> Vec<(f32, f32)> {
        let cpg = self.channels / self.groups;
        let m = (cpg * spatial) as f64;
        (0..self.groups)
            .map(|g| {
                let s = &x[g * cpg * spatial..(g + 1) * cpg * spatial];
                let mean = s.iter().map(|v| *v as f64).sum::<f64>() / m;
                let var = s.iter().map(|v| (*v as f64 - mean).powi(2)).sum::<f64>() / m;
                (mean as f32, 1.0 / ((var as f32) + self.eps).sqrt())
            })
            .collect()
    }

    pub fn forward(&self, params: &[f32], x: &[f32], spatial: usize) -> Vec<f32> {
        debug_assert_eq!(x.len(), self.channels * spatial);
        let gamma = self.gamma.of(params);
        let beta = self.beta.of(params);
        let cpg = self.channels / self.groups;
        let stats = self.stats(x, spatial);
        let mut y = vec![0.0f32; x.len()];
        for c in 0..self.channels {
            let (mean, inv) = stats[c / cpg];
            let (g, b) = (gamma[c], beta[c]);
            let xs = &x[c * spatial..(c + 1) * spatial];
            let ys = &mut y[c * spatial..(c + 1) * spatial];
            for i in 0..spatial {
                ys[i] = (xs[i] - mean) * inv * g + b;
            }
        }
        y
    }

    pub fn backward(
        &self,
        params: &[f32],
        x: &[f32],
        spatial: usize,
        dy: &[f32],
        gparams: &mut [f32],
    ) -> Vec<f32> {
        let gamma = self.gamma.of(params);
        let cpg = self.channels / self.groups;
        let stats = self.stats(x, spatial);
        let mut dx = vec![0.0f32; x.len()];
        let m = (cpg * spatial) as f64;
        for g in 0..self.groups {
            let (mean, inv) = stats[g];
            // first pass: xhat, group sums, per-channel param grads
            let mut sum_dxhat = 0.0f64;
            let mut sum_dxhat_xhat = 0.0f64;
            for c in g * cpg..(g + 1) * cpg {
                let xs = &x[c * spatial..(c + 1) * spatial];
                let dys = &dy[c * spatial..(c + 1) * spatial];
                let mut ggamma = 0.0f32;
                let mut gbeta = 0.0f32;
                for i in 0..spatial {
                    let xhat = (xs[i] - mean) * inv;
                    let dxhat = dys[i] * gamma[c];
                    sum_dxhat += dxhat as f64;
                    sum_dxhat_xhat += (dxhat * xhat) as f64;
                    ggamma += dys[i] * xhat;
                    gbeta += dys[i];
                }
                gparams[self.gamma.off + c] += ggamma;
                gparams[self.beta.off + c] += gbeta;
            }
            let mean_dxhat = (sum_dxhat / m) as f32;
            let mean_dxhat_xhat = (sum_dxhat_xhat / m) as f32;
            for c in g * cpg..(g + 1) * cpg {
                let xs = &x[c * spatial..(c + 1) * spatial];
                let dys = &dy[c * spatial..(c + 1) * spatial];
                let dxs = &mut dx[c * spatial..(c + 1) * spatial];
                for i in 0..spatial {
                    let xhat = (xs[i] - mean) * inv;
                    let dxhat = dys[i] * gamma[c];
                    dxs[i] = inv * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                }
            }
        }
        dx
    }
}

/// Fully connected layer, weights `[out, in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub d_in: usize,
    pub d_out: usize,
    pub w: Slot,
    pub b: Slot,
}

impl Linear {
    pub fn new(alloc: &mut ParamAlloc, d_in: usize, d_out: usize) -> Self {
        Linear { d_in, d_out, w: alloc.alloc(d_out * d_in), b: alloc.alloc(d_out) }
    }

    pub fn init(&self, params: &mut [f32], rng: &mut impl Rng) {
        init_normal(params, self.w, (2.0 / self.d_in as f32).sqrt(), rng);
        init_const(params, self.b, 0.0);
    }

    pub fn forward(&self, params: &[f32], x: &[f32]) -> Vec<f32> {
        debug_assert_eq!(x.len(), self.d_in);
        let w = self.w.of(params);
        let b = self.b.of(params);
        (0..self.d_out)
            .map(|o| {
                let row = &w[o * self.d_in..(o + 1) * self.d_in];
                b[o] + row.iter().zip(x).map(|(wv, xv)| wv * xv).sum::<f32>()
            })
            .collect()
    }

    pub fn backward(
        &self,
        params: &[f32],
        x: &[f32],
        dy: &[f32],
        gparams: &mut [f32],
    ) -> Vec<f32> {
        let w = self.w.of(params);
        let mut dx = vec![0.0f32; self.d_in];
        for o in 0..self.d_out {
            let g = dy[o];
            gparams[self.b.off + o] += g;
            let row = &w[o * self.d_in..(o + 1) * self.d_in];
            let grow = &mut gparams[self.w.off + o * self.d_in..self.w.off + (o + 1) * self.d_in];
            for i in 0..self.d_in {
                grow[i] += g * x[i];
                dx[i] += row[i] * g;
            }
        }
        dx
    }
}

pub fn relu(x: &[f32]) -> Vec<f32> {
    x.iter().map(|v| v.max(0.0)).collect()
}

/// dx from dy and the *outputs* of the forward pass.
pub fn relu_backward(y: &[f32], dy: &[f32]) -> Vec<f32> {
    y.iter().zip(dy).map(|(v, g)| if *v > 0.0 { *g } else { 0.0 }).collect()
}

pub fn sigmoid(x: &[f32]) -> Vec<f32> {
    x.iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect()
}

pub fn sigmoid_backward(y: &[f32], dy: &[f32]) -> Vec<f32> {
    y.iter().zip(dy).map(|(v, g)| g * v * (1.0 - v)).collect()
}

/// Max pooling, no padding.
#[derive(Debug, Clone, Copy)]
pub struct MaxPool3d {
    pub kernel: Dims3,
    pub stride: Dims3,
}

impl MaxPool3d {
    pub fn out_dims(&self, din: Dims3) -> Dims3 {
        (
            (din.0 - self.kernel.0) / self.stride.0 + 1,
            (din.1 - self.kernel.1) / self.stride.1 + 1,
            (din.2 - self.kernel.2) / self.stride.2 + 1,
        )
    }

    pub fn forward(&self, x: &[f32], channels: usize, din: Dims3) -> (Vec<f32>, Dims3) {
        let dout = self.out_dims(din);
        let (d, h, w) = din;
        let (od, oh, ow) = dout;
        let mut y = vec![0.0f32; channels * od * oh * ow];
        for c in 0..channels {
            let xb = c * d * h * w;
            let yb = c * od * oh * ow;
            for oz in 0..od {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = f32::NEG_INFINITY;
                        for kz in 0..self.kernel.0 {
                            for ky in 0..self.kernel.1 {
                                for kx in 0..self.kernel.2 {
                                    let iz = oz * self.stride.0 + kz;
                                    let iy = oy * self.stride.1 + ky;
                                    let ix = ox * self.stride.2 + kx;
                                    best = best.max(x[xb + (iz * h + iy) * w + ix]);
                                }
                            }
                        }
                        y[yb + (oz * oh + oy) * ow + ox] = best;
                    }
                }
            }
        }
        (y, dout)
    }

    /// Routes dy to the first-in-scan-order maximum of each window.
    pub fn backward(&self, x: &[f32], channels: usize, din: Dims3, dy: &[f32]) -> Vec<f32> {
        let dout = self.out_dims(din);
        let (d, h, w) = din;
        let (od, oh, ow) = dout;
        let mut dx = vec![0.0f32; x.len()];
        for c in 0..channels {
            let xb = c * d * h * w;
            let yb = c * od * oh * ow;
            for oz in 0..od {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = f32::NEG_INFINITY;
                        let mut best_idx = 0usize;
                        for kz in 0..self.kernel.0 {
                            for ky in 0..self.kernel.1 {
                                for kx in 0..self.kernel.2 {
                                    let iz = oz * self.stride.0 + kz;
                                    let iy = oy * self.stride.1 + ky;
                                    let ix = ox * self.stride.2 + kx;
                                    let idx = xb + (iz * h + iy) * w + ix;
                                    if x[idx] > best {
                                        best = x[idx];
                                        best_idx = idx;
                                    }
                                }
                            }
                        }
                        dx[best_idx] += dy[yb + (oz * oh + oy) * ow + ox];
                    }
                }
            }
        }
        dx
    }
}

/// Nearest-neighbor upsampling by integer factors.
#[derive(Debug, Clone, Copy)]
pub struct UpsampleNearest {
    pub factor: Dims3,
}

impl UpsampleNearest {
    pub fn out_dims(&self, din: Dims3) -> Dims3 {
        (din.0 * self.factor.0, din.1 * self.factor.1, din.2 * self.factor.2)
    }

    pub fn forward(&self, x: &[f32], channels: usize, din: Dims3) -> (Vec<f32>, Dims3) {
        let dout = self.out_dims(din);
        let (d, h, w) = din;
        let (od, oh, ow) = dout;
        let mut y = vec![0.0f32; channels * od * oh * ow];
        for c in 0..channels {
            let xb = c * d * h * w;
            let yb = c * od * oh * ow;
            for oz in 0..od {
                let iz = oz / self.factor.0;
                for oy in 0..oh {
                    let iy = oy / self.factor.1;
                    for ox in 0..ow {
                        let ix = ox / self.factor.2;
                        y[yb + (oz * oh + oy) * ow + ox] = x[xb + (iz * h + iy) * w + ix];
                    }
                }
            }
        }
        (y, dout)
    }

    pub fn backward(&self, channels: usize, din: Dims3, dy: &[f32]) -> Vec<f32> {
        let dout = self.out_dims(din);
        let (d, h, w) = din;
        let (od, oh, ow) = dout;
        let mut dx = vec![0.0f32; channels * d * h * w];
        for c in 0..channels {
            let xb = c * d * h * w;
            let yb = c * od * oh * ow;
            for oz in 0..od {
                let iz = oz / self.factor.0;
                for oy in 0..oh {
                    let iy = oy / self.factor.1;
                    for ox in 0..ow {
                        let ix = ox / self.factor.2;
                        dx[xb + (iz * h + iy) * w + ix] += dy[yb + (oz * oh + oy) * ow + ox];
                    }
                }
            }
        }
        dx
    }
}

/// Global average pool `[C, spatial] -> [C]`.
pub fn global_avg_pool(x: &[f32], channels: usize, spatial: usize) -> Vec<f32> {
    (0..channels)
        .map(|c| x[c * spatial..(c + 1) * spatial].iter().sum::<f32>() / spatial as f32)
        .collect()
}

pub fn global_avg_pool_backward(dy: &[f32], channels: usize, spatial: usize) -> Vec<f32> {
    let mut dx = vec![0.0f32; channels * spatial];
    for c in 0..channels {
        let g = dy[c] / spatial as f32;
        dx[c * spatial..(c + 1) * spatial].fill(g);
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    /// Central-difference check of d(loss)/d(input) and d(loss)/d(params)
    /// where loss = sum(y * probe) for a fixed random probe.
    fn check_grads<F>(param_len: usize, x_len: usize, seed: u64, run: F)
    where
        F: Fn(&[f32], &[f32], Option<(&[f32], &mut [f32])>) -> Vec<f32>,
    {
        use rand::Rng as _;
        let mut r = rng::stream(seed, "gradcheck", 0);
        let params: Vec<f32> = (0..param_len).map(|_| r.gen_range(-0.5..0.5f32)).collect();
        let x: Vec<f32> = (0..x_len).map(|_| r.gen_range(-1.0..1.0f32)).collect();
        let y0 = run(&params, &x, None);
        let probe: Vec<f32> = (0..y0.len()).map(|_| r.gen_range(-1.0..1.0f32)).collect();

        let mut gparams = vec![0.0f32; param_len];
        let dx = {
            let mut gp = vec![0.0f32; param_len];
            let dx = run(&params, &x, Some((&probe, &mut gp)));
            gparams.copy_from_slice(&gp);
            dx
        };

        let loss = |p: &[f32], xx: &[f32]| -> f64 {
            run(p, xx, None).iter().zip(&probe).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
        };
        let eps = 1e-2f32;
        let mut checked = 0;
        for i in (0..x_len).step_by(1 + x_len / 24) {
            let mut xp = x.clone();
            xp[i] += eps;
            let mut xm = x.clone();
            xm[i] -= eps;
            let num = (loss(&params, &xp) - loss(&params, &xm)) / (2.0 * eps as f64);
            let ana = dx[i] as f64;
            assert!(
                (num - ana).abs() < 2e-2 * ana.abs().max(num.abs()).max(0.05),
                "dx[{i}]: numeric {num} vs analytic {ana}"
            );
            checked += 1;
        }
        for i in (0..param_len).step_by(1 + param_len / 24) {
            let mut pp = params.clone();
            pp[i] += eps;
            let mut pm = params.clone();
            pm[i] -= eps;
            let num = (loss(&pp, &x) - loss(&pm, &x)) / (2.0 * eps as f64);
            let ana = gparams[i] as f64;
            assert!(
                (num - ana).abs() < 2e-2 * ana.abs().max(num.abs()).max(0.05),
                "gparams[{i}]: numeric {num} vs analytic {ana}"
            );
            checked += 1;
        }
        assert!(checked > 0);
    }

    #[test]
    fn conv3d_matches_finite_differences() {
        for (stride, pad) in [((1, 1, 1), (1, 1, 1)), ((2, 2, 2), (1, 1, 1)), ((1, 2, 2), (0, 0, 0))]
        {
            let mut alloc = ParamAlloc::new();
            let conv = Conv3d::new(&mut alloc, 2, 3, (3, 3, 3), stride, pad);
            let din = (4, 5, 6);
            check_grads(alloc.total(), 2 * 4 * 5 * 6, 42, |p, x, back| match back {
                None => conv.forward(p, x, din).0,
                Some((dy, gp)) => conv.backward(p, x, din, dy, gp),
            });
        }
    }

    #[test]
    fn conv3d_1x1_matches_finite_differences() {
        let mut alloc = ParamAlloc::new();
        let conv = Conv3d::new(&mut alloc, 3, 2, (1, 1, 1), (2, 2, 2), (0, 0, 0));
        let din = (2, 4, 4);
        check_grads(alloc.total(), 3 * 2 * 4 * 4, 43, |p, x, back| match back {
            None => conv.forward(p, x, din).0,
            Some((dy, gp)) => conv.backward(p, x, din, dy, gp),
        });
    }

    #[test]
    fn groupnorm_matches_finite_differences() {
        let mut alloc = ParamAlloc::new();
        let gn = GroupNorm::new(&mut alloc, 4, 2);
        let spatial = 10;
        check_grads(alloc.total(), 4 * spatial, 44, |p, x, back| match back {
            None => gn.forward(p, x, spatial),
            Some((dy, gp)) => gn.backward(p, x, spatial, dy, gp),
        });
    }

    #[test]
    fn linear_matches_finite_differences() {
        let mut alloc = ParamAlloc::new();
        let lin = Linear::new(&mut alloc, 7, 5);
        check_grads(alloc.total(), 7, 45, |p, x, back| match back {
            None => lin.forward(p, x),
            Some((dy, gp)) => lin.backward(p, x, dy, gp),
        });
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let pool = MaxPool3d { kernel: (1, 2, 2), stride: (1, 2, 2) };
        let x = vec![1.0, 2.0, 3.0, 4.0]; // one 2x2 window, max at idx 3
        let (y, dout) = pool.forward(&x, 1, (1, 2, 2));
        assert_eq!(y, vec![4.0]);
        assert_eq!(dout, (1, 1, 1));
        let dx = pool.backward(&x, 1, (1, 2, 2), &[5.0]);
        assert_eq!(dx, vec![0.0, 0.0, 0.0, 5.0]);
    }

    #[test]
    fn upsample_and_pool_shapes() {
        let up = UpsampleNearest { factor: (1, 2, 2) };
        let x = vec![1.0, 2.0, 3.0, 4.0];
        let (y, dout) = up.forward(&x, 1, (1, 2, 2));
        assert_eq!(dout, (1, 4, 4));
        assert_eq!(y[0], 1.0);
        assert_eq!(y[1], 1.0);
        assert_eq!(y[5], 1.0);
        let dx = up.backward(1, (1, 2, 2), &vec![1.0; 16]);
        assert_eq!(dx, vec![4.0; 4]);
    }

    #[test]
    fn gap_is_mean_and_backward_spreads() {
        let y = global_avg_pool(&[1.0, 3.0, 10.0, 20.0], 2, 2);
        assert_eq!(y, vec![2.0, 15.0]);
        let dx = global_avg_pool_backward(&[2.0, 4.0], 2, 2);
        assert_eq!(dx, vec![1.0, 1.0, 2.0, 2.0]);
    }
}

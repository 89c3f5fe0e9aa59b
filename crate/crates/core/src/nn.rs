//! Minimal convolutional building blocks with hand-written backward passes.
//!
//! Everything operates on a single sample (`C x H x W`, row-major). The
//! reconstruction network is a fixed graph, so each layer exposes an explicit
//! `forward` that returns whatever the matching `backward` needs.

use serde::{Deserialize, Serialize};

/// A `channels x height x width` activation map.
#[derive(Debug, Clone, PartialEq)]
pub struct Map {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Map {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn new(c: usize, h: usize, w: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), c * h * w, "map data length");
        Self { c, h, w, data }
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn add_assign(&mut self, other: &Map) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    #[default]
    Zeros,
    Replicate,
}

/// `c = a * b` (or `c += ...` when `accumulate`), with optional transposes.
/// `a` is `m x k` (or `k x m` when `ta`), `b` is `k x n` (or `n x k` when `tb`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: bounds are checked above and the strides describe dense
    // row-major (or transposed) matrices that fit inside the slices.
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

fn source_index(i: isize, n: usize, padding: Padding) -> Option<usize> {
    if i >= 0 && (i as usize) < n {
        return Some(i as usize);
    }
    match padding {
        Padding::Zeros => None,
        Padding::Replicate => Some(i.clamp(0, n as isize - 1) as usize),
    }
}

fn im2col(x: &Map, k: usize, padding: Padding) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let hw = x.plane();
    let mut col = vec![0.0; x.c * k * k * hw];
    for ci in 0..x.c {
        let src = &x.data[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((ci * k + ky) * k + kx) * hw..][..hw];
                for y in 0..x.h {
                    let Some(sy) = source_index(y as isize + ky as isize - pad, x.h, padding)
                    else {
                        continue;
                    };
                    for xx in 0..x.w {
                        if let Some(sx) =
                            source_index(xx as isize + kx as isize - pad, x.w, padding)
                        {
                            row[y * x.w + xx] = src[sy * x.w + sx];
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im(col: &[f64], c: usize, h: usize, w: usize, k: usize, padding: Padding) -> Map {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut out = Map::zeros(c, h, w);
    for ci in 0..c {
        let dst = &mut out.data[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((ci * k + ky) * k + kx) * hw..][..hw];
                for y in 0..h {
                    let Some(sy) = source_index(y as isize + ky as isize - pad, h, padding) else {
                        continue;
                    };
                    for xx in 0..w {
                        if let Some(sx) = source_index(xx as isize + kx as isize - pad, w, padding)
                        {
                            dst[sy * w + sx] += row[y * w + xx];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Same-size convolution with odd kernel `k` and stride 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub padding: Padding,
}

impl Conv2d {
    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * self.k * self.k
    }

    pub fn forward(&self, weight: &[f64], bias: &[f64], x: &Map) -> Map {
        debug_assert_eq!(x.c, self.cin);
        let hw = x.plane();
        let mut out = Map::zeros(self.cout, x.h, x.w);
        for (o, chunk) in out.data.chunks_exact_mut(hw).enumerate() {
            chunk.fill(bias[o]);
        }
        let kk = self.cin * self.k * self.k;
        if self.k == 1 {
            gemm(
                self.cout,
                kk,
                hw,
                weight,
                false,
                &x.data,
                false,
                &mut out.data,
                true,
            );
        } else {
            let col = im2col(x, self.k, self.padding);
            gemm(
                self.cout,
                kk,
                hw,
                weight,
                false,
                &col,
                false,
                &mut out.data,
                true,
            );
        }
        out
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    pub fn backward(
        &self,
        weight: &[f64],
        x: &Map,
        dy: &Map,
        dweight: &mut [f64],
        dbias: &mut [f64],
    ) -> Map {
        let hw = x.plane();
        let kk = self.cin * self.k * self.k;
        for (o, chunk) in dy.data.chunks_exact(hw).enumerate() {
            dbias[o] += chunk.iter().sum::<f64>();
        }
        if self.k == 1 {
            gemm(
                self.cout, hw, kk, &dy.data, false, &x.data, true, dweight, true,
            );
            let mut dx = Map::zeros(x.c, x.h, x.w);
            gemm(
                kk,
                self.cout,
                hw,
                weight,
                true,
                &dy.data,
                false,
                &mut dx.data,
                false,
            );
            dx
        } else {
            let col = im2col(x, self.k, self.padding);
            gemm(
                self.cout, hw, kk, &dy.data, false, &col, true, dweight, true,
            );
            let mut dcol = vec![0.0; kk * hw];
            gemm(
                kk, self.cout, hw, weight, true, &dy.data, false, &mut dcol, false,
            );
            col2im(&dcol, x.c, x.h, x.w, self.k, self.padding)
        }
    }
}

pub const NORM_EPS: f64 = 1e-5;

/// Per-channel statistics kept for the instance-norm backward pass.
#[derive(Debug, Clone)]
pub struct NormCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

/// Affine instance normalisation over each channel's spatial plane.
pub fn instance_norm_forward(x: &Map, gamma: &[f64], beta: &[f64]) -> (Map, NormCache) {
    let hw = x.plane() as f64;
    let mut y = Map::zeros(x.c, x.h, x.w);
    let mut xhat = vec![0.0; x.data.len()];
    let mut inv_std = Vec::with_capacity(x.c);
    for ch in 0..x.c {
        let range = ch * x.plane()..(ch + 1) * x.plane();
        let src = &x.data[range.clone()];
        let mean = src.iter().sum::<f64>() / hw;
        let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / hw;
        let is = 1.0 / (var + NORM_EPS).sqrt();
        inv_std.push(is);
        for ((xh, out), v) in xhat[range.clone()]
            .iter_mut()
            .zip(&mut y.data[range])
            .zip(src)
        {
            *xh = (v - mean) * is;
            *out = gamma[ch] * *xh + beta[ch];
        }
    }
    (y, NormCache { xhat, inv_std })
}

pub fn instance_norm_backward(
    cache: &NormCache,
    gamma: &[f64],
    dy: &Map,
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) -> Map {
    let hw = dy.plane();
    let n = hw as f64;
    let mut dx = Map::zeros(dy.c, dy.h, dy.w);
    for ch in 0..dy.c {
        let range = ch * hw..(ch + 1) * hw;
        let g = &dy.data[range.clone()];
        let xh = &cache.xhat[range.clone()];
        let sum_g: f64 = g.iter().sum();
        let sum_gx: f64 = g.iter().zip(xh).map(|(a, b)| a * b).sum();
        dgamma[ch] += sum_gx;
        dbeta[ch] += sum_g;
        let scale = gamma[ch] * cache.inv_std[ch] / n;
        for ((d, gi), xi) in dx.data[range].iter_mut().zip(g).zip(xh) {
            *d = scale * (n * gi - sum_g - xi * sum_gx);
        }
    }
    dx
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn silu_forward(x: &Map) -> Map {
    Map::new(
        x.c,
        x.h,
        x.w,
        x.data.iter().map(|v| v * sigmoid(*v)).collect(),
    )
}

pub fn silu_backward(pre: &Map, dy: &Map) -> Map {
    let data = pre
        .data
        .iter()
        .zip(&dy.data)
        .map(|(x, g)| {
            let s = sigmoid(*x);
            g * s * (1.0 + x * (1.0 - s))
        })
        .collect();
    Map::new(pre.c, pre.h, pre.w, data)
}

pub fn avg_pool2_forward(x: &Map) -> Map {
    let (h, w) = (x.h / 2, x.w / 2);
    let mut out = Map::zeros(x.c, h, w);
    for ch in 0..x.c {
        let src = &x.data[ch * x.plane()..(ch + 1) * x.plane()];
        for y in 0..h {
            for xx in 0..w {
                let s = src[2 * y * x.w + 2 * xx]
                    + src[2 * y * x.w + 2 * xx + 1]
                    + src[(2 * y + 1) * x.w + 2 * xx]
                    + src[(2 * y + 1) * x.w + 2 * xx + 1];
                out.data[(ch * h + y) * w + xx] = 0.25 * s;
            }
        }
    }
    out
}

pub fn avg_pool2_backward(dy: &Map) -> Map {
    let (h, w) = (dy.h * 2, dy.w * 2);
    let mut dx = Map::zeros(dy.c, h, w);
    for ch in 0..dy.c {
        for y in 0..h {
            for xx in 0..w {
                dx.data[(ch * h + y) * w + xx] =
                    0.25 * dy.data[(ch * dy.h + y / 2) * dy.w + xx / 2];
            }
        }
    }
    dx
}

pub fn upsample2_forward(x: &Map) -> Map {
    let (h, w) = (x.h * 2, x.w * 2);
    let mut out = Map::zeros(x.c, h, w);
    for ch in 0..x.c {
        for y in 0..h {
            for xx in 0..w {
                out.data[(ch * h + y) * w + xx] = x.data[(ch * x.h + y / 2) * x.w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward(dy: &Map) -> Map {
    let (h, w) = (dy.h / 2, dy.w / 2);
    let mut dx = Map::zeros(dy.c, h, w);
    for ch in 0..dy.c {
        for y in 0..dy.h {
            for xx in 0..dy.w {
                dx.data[(ch * h + y / 2) * w + xx / 2] += dy.data[(ch * dy.h + y) * dy.w + xx];
            }
        }
    }
    dx
}

pub fn concat(a: &Map, b: &Map) -> Map {
    debug_assert_eq!((a.h, a.w), (b.h, b.w));
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Map::new(a.c + b.c, a.h, a.w, data)
}

pub fn split(x: &Map, first: usize) -> (Map, Map) {
    let cut = first * x.plane();
    (
        Map::new(first, x.h, x.w, x.data[..cut].to_vec()),
        Map::new(x.c - first, x.h, x.w, x.data[cut..].to_vec()),
    )
}

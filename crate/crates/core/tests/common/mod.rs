//! Oracles and generators shared by the integration tests.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Random vector with entries in [-1, 1], unit-normalised.
pub fn unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Central difference of `f` at every coordinate of `x`, Richardson
/// extrapolated from steps `h` and `h / 2` (error O(h^4)).
pub fn central_diff(x: &[Vec<f64>], h: f64, f: impl Fn(&[Vec<f64>]) -> f64) -> Vec<Vec<f64>> {
    let mut out = vec![vec![0.0; x.first().map_or(0, Vec::len)]; x.len()];
    let mut probe = x.to_vec();
    let mut diff = |i: usize, d: usize, step: f64| {
        probe[i][d] = x[i][d] + step;
        let up = f(&probe);
        probe[i][d] = x[i][d] - step;
        let down = f(&probe);
        probe[i][d] = x[i][d];
        (up - down) / (2.0 * step)
    };
    for (i, row) in out.iter_mut().enumerate() {
        for (d, o) in row.iter_mut().enumerate() {
            let coarse = diff(i, d, h);
            let fine = diff(i, d, h / 2.0);
            *o = (4.0 * fine - coarse) / 3.0;
        }
    }
    out
}

pub fn max_rel_err(a: &[Vec<f64>], b: &[Vec<f64>], floor: f64) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Textbook InfoNCE: for each selected i, -log of the softmax weight of its
/// own anchor among the anchors of all selected samples.
pub fn info_nce_oracle(v: &[Vec<f64>], anchors: &[Vec<f64>], s: &[usize], tau: f64) -> f64 {
    if s.len() <= 1 {
        return 0.0;
    }
    let mut total = 0.0;
    for &i in s {
        let own = (dot(&v[i], &anchors[i]) / tau).exp();
        let mut denom = 0.0;
        for &j in s {
            denom += (dot(&v[i], &anchors[j]) / tau).exp();
        }
        total -= (own / denom).ln();
    }
    total
}

pub fn repulsion_oracle(v: &[Vec<f64>], tau: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..v.len() {
        let mut inner = 1.0;
        for j in 0..v.len() {
            if j != i {
                inner += (dot(&v[i], &v[j]) / tau).exp();
            }
        }
        total += inner.ln();
    }
    total
}

/// Independent layer-by-layer parameter count of the reconstruction U-Net.
pub fn unet_census(
    t_bins: usize,
    levels: usize,
    width: usize,
    residual: usize,
    norm: bool,
) -> usize {
    let conv = |cin: usize, cout: usize, k: usize| cout * cin * k * k + cout;
    let nrm = |c: usize| if norm { 2 * c } else { 0 };
    let block = |cin: usize, cout: usize| conv(cin, cout, 3) + nrm(cout);
    let w = |l: usize| width * (1 << l);
    let mut total = 0;
    for l in 0..levels {
        let cin = if l == 0 { 2 * t_bins } else { w(l - 1) };
        total += block(cin, w(l));
        let bottom = l == levels - 1;
        if !bottom || levels == 1 {
            total += block(w(l), w(l));
        }
    }
    let wb = w(levels - 1);
    total += residual * (block(wb, wb) + conv(wb, wb, 3) + nrm(wb));
    for l in 0..levels - 1 {
        total += block(w(l + 1) + w(l), w(l));
    }
    total + conv(w(0), 1, 1)
}

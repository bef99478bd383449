//! Brute-force reference implementations: every window position is visited
//! directly with full 2-D weights and two-pass moments.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ssimkd::FeatureMap;

pub const K1: f64 = 0.01;
pub const K2: f64 = 0.03;

pub fn c1() -> f64 {
    (K1 * 1.0f64).powi(2)
}
pub fn c2() -> f64 {
    (K2 * 1.0f64).powi(2)
}
pub fn c3() -> f64 {
    c2() / 2.0
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_map(dims: [usize; 4], rng: &mut ChaCha8Rng) -> FeatureMap {
    let n = dims.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
    FeatureMap::new(dims, data).unwrap()
}

/// Full 2-D window, weights summing to one, plus the variance correction.
#[derive(Clone, Debug)]
pub struct RefWindow {
    pub size: usize,
    pub weights: Vec<f64>,
    pub var_factor: f64,
}

pub fn gaussian_2d(size: usize, sigma: f64) -> RefWindow {
    let c = (size as f64 - 1.0) / 2.0;
    let mut w = Vec::with_capacity(size * size);
    for i in 0..size {
        for j in 0..size {
            let d2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2);
            w.push((-d2 / (2.0 * sigma * sigma)).exp());
        }
    }
    let z: f64 = w.iter().sum();
    RefWindow {
        size,
        weights: w.into_iter().map(|v| v / z).collect(),
        var_factor: 1.0,
    }
}

pub fn uniform_2d(size: usize) -> RefWindow {
    let n = (size * size) as f64;
    RefWindow {
        size,
        weights: vec![1.0 / n; size * size],
        var_factor: n / (n - 1.0),
    }
}

/// Per-location moments of one plane pair.
#[derive(Clone, Debug, Default)]
pub struct RefMoments {
    pub out_h: usize,
    pub out_w: usize,
    pub mu_x: Vec<f64>,
    pub mu_y: Vec<f64>,
    pub var_x: Vec<f64>,
    pub var_y: Vec<f64>,
    pub cov: Vec<f64>,
}

pub fn moments_plane(x: &[f64], y: &[f64], h: usize, w: usize, win: &RefWindow) -> RefMoments {
    let f = win.size;
    let (oh, ow) = (h - f + 1, w - f + 1);
    let mut m = RefMoments {
        out_h: oh,
        out_w: ow,
        ..Default::default()
    };
    for r in 0..oh {
        for c in 0..ow {
            let (mut mx, mut my) = (0.0, 0.0);
            for i in 0..f {
                for j in 0..f {
                    let k = win.weights[i * f + j];
                    mx += k * x[(r + i) * w + c + j];
                    my += k * y[(r + i) * w + c + j];
                }
            }
            let (mut vx, mut vy, mut cv) = (0.0, 0.0, 0.0);
            for i in 0..f {
                for j in 0..f {
                    let k = win.weights[i * f + j];
                    let dx = x[(r + i) * w + c + j] - mx;
                    let dy = y[(r + i) * w + c + j] - my;
                    vx += k * dx * dx;
                    vy += k * dy * dy;
                    cv += k * dx * dy;
                }
            }
            m.mu_x.push(mx);
            m.mu_y.push(my);
            m.var_x.push(vx * win.var_factor);
            m.var_y.push(vy * win.var_factor);
            m.cov.push(cv * win.var_factor);
        }
    }
    m
}

pub fn spow(x: f64, e: f64) -> f64 {
    if e == 0.0 {
        1.0
    } else {
        x.signum() * x.abs().powf(e)
    }
}

/// Per-location `(l, c, s)` from reference moments.
pub fn components(m: &RefMoments, i: usize) -> (f64, f64, f64) {
    let (sx, sy) = (m.var_x[i].sqrt(), m.var_y[i].sqrt());
    let l = (2.0 * m.mu_x[i] * m.mu_y[i] + c1()) / (m.mu_x[i].powi(2) + m.mu_y[i].powi(2) + c1());
    let c = (2.0 * sx * sy + c2()) / (m.var_x[i] + m.var_y[i] + c2());
    let s = (m.cov[i] + c3()) / (sx * sy + c3());
    (l, c, s)
}

pub struct RefSsim {
    pub loss: f64,
    /// Per-location loss, plane-major.
    pub map: Vec<f64>,
    pub l: Vec<f64>,
    pub c: Vec<f64>,
    pub s: Vec<f64>,
    /// Mean SSIM index.
    pub mean_index: f64,
}

pub fn ssim(s: &FeatureMap, t: &FeatureMap, win: &RefWindow, exps: (f64, f64, f64), luminance: bool) -> RefSsim {
    let [b, ch, h, w] = s.dims();
    let mut out = RefSsim {
        loss: 0.0,
        map: vec![],
        l: vec![],
        c: vec![],
        s: vec![],
        mean_index: 0.0,
    };
    let mut index_sum = 0.0;
    for bi in 0..b {
        for ci in 0..ch {
            let m = moments_plane(s.plane(bi, ci), t.plane(bi, ci), h, w, win);
            for i in 0..m.mu_x.len() {
                let (l, c, st) = components(&m, i);
                let l_term = if luminance { spow(l, exps.0) } else { 1.0 };
                let idx = l_term * spow(c, exps.1) * spow(st, exps.2);
                index_sum += idx;
                out.map.push((1.0 - idx) / 2.0);
                out.l.push(l);
                out.c.push(c);
                out.s.push(st);
            }
        }
    }
    let n = out.map.len() as f64;
    out.loss = out.map.iter().sum::<f64>() / n;
    out.mean_index = index_sum / n;
    out
}

pub const MS_LEVELS: [(usize, f64); 5] = [(3, 0.0448), (5, 0.2856), (7, 0.3001), (9, 0.2363), (11, 0.1333)];

/// `(1 - prod_j mean_j^e_j) / 2` with Gaussian windows `sigma * F / 11`.
pub fn ms_ssim(s: &FeatureMap, t: &FeatureMap, sigma: f64) -> f64 {
    let mut score = 1.0;
    for (f, e) in MS_LEVELS {
        let win = gaussian_2d(f, sigma * f as f64 / 11.0);
        let r = ssim(s, t, &win, (1.0, 1.0, 1.0), f == 11);
        score *= spow(r.mean_index, e);
    }
    (1.0 - score) / 2.0
}

pub fn mean_abs_diff(s: &FeatureMap, t: &FeatureMap) -> f64 {
    let n = s.len() as f64;
    s.as_slice().iter().zip(t.as_slice()).map(|(a, b)| (a - b).abs()).sum::<f64>() / n
}

pub fn mean_sq_diff(s: &FeatureMap, t: &FeatureMap) -> f64 {
    let n = s.len() as f64;
    s.as_slice().iter().zip(t.as_slice()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n
}

/// Per-sample min-max scaling to `[0, 1]`.
pub fn min_max(x: &FeatureMap) -> FeatureMap {
    let [b, c, h, w] = x.dims();
    let per = c * h * w;
    let mut out = x.as_slice().to_vec();
    for chunk in out.chunks_mut(per) {
        let lo = chunk.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = chunk.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for v in chunk.iter_mut() {
            *v = if hi > lo { (*v - lo) / (hi - lo) } else { 0.0 };
        }
    }
    FeatureMap::new([b, c, h, w], out).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

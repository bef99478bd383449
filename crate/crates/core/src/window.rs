//! Window construction and per-location local moments.
//!
//! All windowed quantities are evaluated in valid mode: an `F x F` window
//! anchored at `(u, v)` covers rows `u..u+F` and columns `v..v+F`, so an
//! `H x W` plane yields an `(H-F+1) x (W-F+1)` output and no padding is used.

use crate::error::{dim_err, Error, Result};
use crate::exec::Exec;
use crate::tensor::FeatureMap;

/// How local moments are estimated inside a window.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Estimator {
    /// Gaussian weights; variance and covariance as `E[XY] - E[X]E[Y]`.
    #[default]
    GaussianWeighted,
    /// Flat weights `1/PQ` with the `1/(PQ-1)` Bessel correction.
    UniformUnbiased,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WindowSpec {
    pub size: usize,
    pub sigma: f64,
    pub estimator: Estimator,
}

impl Default for WindowSpec {
    fn default() -> Self {
        Self::gaussian(11, 1.5)
    }
}

impl WindowSpec {
    pub fn gaussian(size: usize, sigma: f64) -> Self {
        Self {
            size,
            sigma,
            estimator: Estimator::GaussianWeighted,
        }
    }

    pub fn uniform(size: usize) -> Self {
        Self {
            size,
            sigma: 0.0,
            estimator: Estimator::UniformUnbiased,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.estimator {
            Estimator::GaussianWeighted => {
                if self.size == 0 || self.size.is_multiple_of(2) {
                    return Err(Error::InvalidSpec(format!(
                        "gaussian window size must be odd and positive, got {}",
                        self.size
                    )));
                }
                if !(self.sigma > 0.0 && self.sigma.is_finite()) {
                    return Err(Error::InvalidSpec(format!(
                        "gaussian sigma must be positive, got {}",
                        self.sigma
                    )));
                }
            }
            // PQ - 1 must be positive for the Bessel correction.
            Estimator::UniformUnbiased => {
                if self.size < 2 {
                    return Err(Error::InvalidSpec(format!(
                        "unbiased window needs at least 2x2 samples, got size {}",
                        self.size
                    )));
                }
            }
        }
        Ok(())
    }

    /// Separable weights for this spec.
    pub fn window(&self) -> Result<Window> {
        self.validate()?;
        match self.estimator {
            Estimator::GaussianWeighted => gaussian_window(self),
            Estimator::UniformUnbiased => Ok(Window {
                weights: vec![1.0 / self.size as f64; self.size],
            }),
        }
    }

    /// Multiplier turning a weighted second central moment into the
    /// estimator's variance: 1 for Gaussian, `PQ/(PQ-1)` for unbiased.
    pub fn variance_factor(&self) -> f64 {
        match self.estimator {
            Estimator::GaussianWeighted => 1.0,
            Estimator::UniformUnbiased => {
                let pq = (self.size * self.size) as f64;
                pq / (pq - 1.0)
            }
        }
    }
}

/// Normalized separable window; the 2-D weights are the outer product of
/// `weights_1d` with itself.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    weights: Vec<f64>,
}

impl Window {
    pub fn size(&self) -> usize {
        self.weights.len()
    }

    pub fn weights_1d(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_2d(&self) -> Vec<f64> {
        let f = self.size();
        let mut out = Vec::with_capacity(f * f);
        for a in &self.weights {
            for b in &self.weights {
                out.push(a * b);
            }
        }
        out
    }

    pub fn center_weight(&self) -> f64 {
        let c = self.weights[self.size() / 2];
        c * c
    }
}

/// `w[i] ∝ exp(-(i - (F-1)/2)^2 / (2 sigma^2))`, normalized to unit sum.
pub fn gaussian_window(spec: &WindowSpec) -> Result<Window> {
    if spec.estimator != Estimator::GaussianWeighted {
        return Err(Error::InvalidSpec(
            "gaussian_window requires the Gaussian estimator".into(),
        ));
    }
    spec.validate()?;
    let center = (spec.size as f64 - 1.0) / 2.0;
    let denom = 2.0 * spec.sigma * spec.sigma;
    let raw: Vec<f64> = (0..spec.size)
        .map(|i| {
            let d = i as f64 - center;
            (-d * d / denom).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    let mut weights: Vec<f64> = raw.iter().map(|v| v / total).collect();
    // Enforce exact mirror symmetry.
    for i in 0..spec.size / 2 {
        weights[spec.size - 1 - i] = weights[i];
    }
    Ok(Window { weights })
}

pub(crate) fn valid_dims(h: usize, w: usize, f: usize) -> Result<(usize, usize)> {
    if h < f || w < f {
        return Err(dim_err!("{h}x{w} map is smaller than the {f}x{f} window"));
    }
    Ok((h - f + 1, w - f + 1))
}

/// Valid-mode separable correlation of one plane: horizontal pass, then vertical.
pub(crate) fn conv_plane(src: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let f = k.len();
    let (ho, wo) = (h - f + 1, w - f + 1);
    let mut tmp = vec![0.0; h * wo];
    for r in 0..h {
        let row = &src[r * w..(r + 1) * w];
        let out = &mut tmp[r * wo..(r + 1) * wo];
        for (c, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (kj, xv) in k.iter().zip(&row[c..c + f]) {
                acc += kj * xv;
            }
            *o = acc;
        }
    }
    let mut dst = vec![0.0; ho * wo];
    for r in 0..ho {
        let out = &mut dst[r * wo..(r + 1) * wo];
        for (i, ki) in k.iter().enumerate() {
            let line = &tmp[(r + i) * wo..(r + i + 1) * wo];
            for (o, t) in out.iter_mut().zip(line) {
                *o += ki * t;
            }
        }
    }
    dst
}

/// Adjoint of [`conv_plane`]: scatters an output-shaped gradient back onto the input plane.
pub(crate) fn conv_plane_adjoint(g: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let f = k.len();
    let (ho, wo) = (h - f + 1, w - f + 1);
    let mut tmp = vec![0.0; h * wo];
    for r in 0..ho {
        let src = &g[r * wo..(r + 1) * wo];
        for (i, ki) in k.iter().enumerate() {
            let line = &mut tmp[(r + i) * wo..(r + i + 1) * wo];
            for (t, gv) in line.iter_mut().zip(src) {
                *t += ki * gv;
            }
        }
    }
    let mut dst = vec![0.0; h * w];
    for r in 0..h {
        let src = &tmp[r * wo..(r + 1) * wo];
        let row = &mut dst[r * w..(r + 1) * w];
        for (c, t) in src.iter().enumerate() {
            for (kj, d) in k.iter().zip(&mut row[c..c + f]) {
                *d += kj * t;
            }
        }
    }
    dst
}

/// Direct 2-D weighted sum of every window; the baseline the separable
/// path is measured against.
pub(crate) fn direct_plane(src: &[f64], h: usize, w: usize, k2: &[f64], f: usize) -> Vec<f64> {
    let (ho, wo) = (h - f + 1, w - f + 1);
    let mut dst = vec![0.0; ho * wo];
    for r in 0..ho {
        for c in 0..wo {
            let mut acc = 0.0;
            for i in 0..f {
                let row = &src[(r + i) * w + c..(r + i) * w + c + f];
                for (kv, xv) in k2[i * f..(i + 1) * f].iter().zip(row) {
                    acc += kv * xv;
                }
            }
            dst[r * wo + c] = acc;
        }
    }
    dst
}

fn convolve_with(
    x: &FeatureMap,
    window: &Window,
    exec: Exec,
    plane_fn: impl Fn(&[f64]) -> Vec<f64> + Sync + Send,
) -> Result<FeatureMap> {
    let [b, c, h, w] = x.dims();
    let (ho, wo) = valid_dims(h, w, window.size())?;
    let mut out = vec![0.0; b * c * ho * wo];
    exec.for_each_chunk(&mut out, ho * wo, |i, dst| {
        dst.copy_from_slice(&plane_fn(x.plane(i / c, i % c)));
    });
    Ok(FeatureMap::from_parts([b, c, ho, wo], out))
}

/// Valid-mode weighted average of every window, computed as two 1-D passes.
pub fn separable_convolve(x: &FeatureMap, window: &Window) -> Result<FeatureMap> {
    separable_convolve_with(x, window, Exec::default())
}

pub fn separable_convolve_with(x: &FeatureMap, window: &Window, exec: Exec) -> Result<FeatureMap> {
    let (h, w) = (x.height(), x.width());
    let k = window.weights_1d();
    convolve_with(x, window, exec, |p| conv_plane(p, h, w, k))
}

/// Same result as [`separable_convolve`] via an explicit `F x F` loop per output.
pub fn direct_convolve(x: &FeatureMap, window: &Window) -> Result<FeatureMap> {
    direct_convolve_with(x, window, Exec::default())
}

pub fn direct_convolve_with(x: &FeatureMap, window: &Window, exec: Exec) -> Result<FeatureMap> {
    let (h, w, f) = (x.height(), x.width(), window.size());
    let k2 = window.weights_2d();
    convolve_with(x, window, exec, |p| direct_plane(p, h, w, &k2, f))
}

/// Local first and second moments of a student/teacher pair.
#[derive(Clone, Debug)]
pub struct MomentMaps {
    pub mu_s: FeatureMap,
    pub mu_t: FeatureMap,
    pub var_s: FeatureMap,
    pub var_t: FeatureMap,
    pub cov_st: FeatureMap,
}

impl MomentMaps {
    pub fn dims(&self) -> [usize; 4] {
        self.mu_s.dims()
    }
}

/// Moments of one plane pair, flattened over the valid region.
///
/// The covariance is carried as the deficit `sd_x sd_y - cov`, derived from
/// the variance of `x - y`, so that it vanishes quadratically as the pair
/// approaches equality.
pub(crate) struct PlaneMoments {
    pub mu_x: Vec<f64>,
    pub mu_y: Vec<f64>,
    /// Clamped at zero.
    pub var_x: Vec<f64>,
    pub var_y: Vec<f64>,
    /// Variance of `x - y`, clamped at zero.
    pub var_d: Vec<f64>,
}

impl PlaneMoments {
    pub fn compute(x: &[f64], y: &[f64], h: usize, w: usize, k: &[f64], var_factor: f64) -> Self {
        let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let dd: Vec<f64> = d.iter().map(|v| v * v).collect();
        let mu_x = conv_plane(x, h, w, k);
        let mu_y = conv_plane(y, h, w, k);
        let e_xx = conv_plane(&xx, h, w, k);
        let e_yy = conv_plane(&yy, h, w, k);
        let e_dd = conv_plane(&dd, h, w, k);
        let n = mu_x.len();
        let mut var_x = Vec::with_capacity(n);
        let mut var_y = Vec::with_capacity(n);
        let mut var_d = Vec::with_capacity(n);
        for i in 0..n {
            let mu_d = mu_x[i] - mu_y[i];
            var_x.push((var_factor * (e_xx[i] - mu_x[i] * mu_x[i])).max(0.0));
            var_y.push((var_factor * (e_yy[i] - mu_y[i] * mu_y[i])).max(0.0));
            var_d.push((var_factor * (e_dd[i] - mu_d * mu_d)).max(0.0));
        }
        Self {
            mu_x,
            mu_y,
            var_x,
            var_y,
            var_d,
        }
    }

    /// `sqrt(var_x * var_y)`, exact when the two variances are equal.
    pub fn sd_product(&self, i: usize) -> f64 {
        (self.var_x[i] * self.var_y[i]).sqrt()
    }

    /// `(sd_x - sd_y)^2`.
    pub fn sd_gap_sq(&self, i: usize) -> f64 {
        let g = self.var_x[i].sqrt() - self.var_y[i].sqrt();
        g * g
    }

    /// `sd_x sd_y - cov`, clamped to `[0, 2 sd_x sd_y]` (the Cauchy-Schwarz
    /// range of the covariance); the flag reports whether the clamp was active.
    pub fn deficit(&self, i: usize) -> (f64, bool) {
        let raw = 0.5 * (self.var_d[i] - self.sd_gap_sq(i));
        let hi = 2.0 * self.sd_product(i);
        if raw < 0.0 {
            (0.0, true)
        } else if raw > hi {
            (hi, true)
        } else {
            (raw, false)
        }
    }

    pub fn cov(&self, i: usize) -> f64 {
        self.sd_product(i) - self.deficit(i).0
    }
}

/// Local means, variances and covariance of `s` and `t` under `spec`.
pub fn local_moments(s: &FeatureMap, t: &FeatureMap, spec: &WindowSpec) -> Result<MomentMaps> {
    local_moments_with(s, t, spec, Exec::default())
}

pub fn local_moments_with(
    s: &FeatureMap,
    t: &FeatureMap,
    spec: &WindowSpec,
    exec: Exec,
) -> Result<MomentMaps> {
    s.check_same_dims(t)?;
    let window = spec.window()?;
    let [b, c, h, w] = s.dims();
    let (ho, wo) = valid_dims(h, w, window.size())?;
    let k = window.weights_1d();
    let factor = spec.variance_factor();
    let planes = exec.map(b * c, |i| {
        PlaneMoments::compute(s.plane(i / c, i % c), t.plane(i / c, i % c), h, w, k, factor)
    });
    let dims = [b, c, ho, wo];
    let gather = |f: &dyn Fn(&PlaneMoments) -> Vec<f64>| {
        FeatureMap::from_parts(dims, planes.iter().flat_map(f).collect())
    };
    Ok(MomentMaps {
        mu_s: gather(&|p| p.mu_x.clone()),
        mu_t: gather(&|p| p.mu_y.clone()),
        var_s: gather(&|p| p.var_x.clone()),
        var_t: gather(&|p| p.var_y.clone()),
        cov_st: gather(&|p| (0..p.mu_x.len()).map(|i| p.cov(i)).collect()),
    })
}

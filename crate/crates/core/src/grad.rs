//! Analytic reverse-mode gradients for every loss kind, and a central
//! finite-difference checker to validate them.
//!
//! The min-max normalization is treated as a fixed affine map during the
//! backward pass: the min and max are computed on the forward pass and
//! their dependence on the input is dropped.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, Result};
use crate::exec::{pairwise_sum, Exec};
use crate::loss::{
    compute_loss, contrast, lp_loss, dspow, luminance, ms_forward, spow, structure, Level, LossConfig,
    LossKind, LossResult, SsimExponents, StabilizerConfig, MS_SSIM_LEVELS,
};
use crate::tensor::{
    adapter_backward, apply_adapter, min_max_normalize, min_max_normalize_affine, AdapterParams,
    FeatureMap, MultiScaleFeatures,
};
use crate::window::{conv_plane_adjoint, valid_dims, PlaneMoments};

/// Gradients of a scalar objective.
#[derive(Clone, Debug)]
pub struct GradientBundle {
    /// Gradient with respect to the raw student map (before adapter and normalization).
    pub d_student: FeatureMap,
    /// Row-major `(c_out, c_in)`; present when an adapter was used.
    pub d_adapter_weight: Option<Vec<f64>>,
    pub d_adapter_bias: Option<Vec<f64>>,
}

impl GradientBundle {
    pub fn scale(&mut self, k: f64) {
        self.d_student.as_mut_slice().iter_mut().for_each(|v| *v *= k);
        for v in self.d_adapter_weight.iter_mut().chain(self.d_adapter_bias.iter_mut()) {
            v.iter_mut().for_each(|x| *x *= k);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    /// Flat index of the coordinate with the largest relative error.
    pub worst_index: usize,
    pub epsilon: f64,
    pub checked: usize,
    /// Coordinates left out because they sit on a kink of the loss.
    pub skipped: Vec<usize>,
}

/// Central-difference step for each loss kind.
///
/// SSIM uses a larger step: its border coordinates have derivatives around
/// 1e-8 under an 11x11 Gaussian window, so rounding in the probed window
/// sums dominates at small steps while truncation grows as the square of the
/// step. 3e-4 balances the two. MS-SSIM needs the small step because its
/// fractional level exponents make the loss strongly curved.
pub fn default_epsilon(kind: LossKind) -> f64 {
    match kind {
        LossKind::Ssim => 3e-4,
        _ => 1e-5,
    }
}

/// Relative-error floor for near-zero derivatives.
pub const REL_ERR_FLOOR: f64 = 1e-8;

/// Maps with more elements than this are checked on a random subset.
pub const FULL_CHECK_LIMIT: usize = 4096;
pub const SUBSET_SIZE: usize = 512;

/// Backward pass of one SSIM level over one plane.
///
/// `upstream[i]` is the derivative of the objective with respect to the SSIM
/// value at valid location `i`; the return value is the derivative with
/// respect to every element of `x`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn ssim_plane_backward(
    x: &[f64],
    y: &[f64],
    h: usize,
    w: usize,
    level: &Level,
    stab: &StabilizerConfig,
    exps: &SsimExponents,
    upstream: &[f64],
) -> Vec<f64> {
    let k = level.var_factor;
    let m = PlaneMoments::compute(x, y, h, w, &level.kernel, k);
    let (c1, c2, c3) = (stab.c1(), stab.c2(), stab.c3());
    let alpha = if level.use_luminance { exps.alpha } else { 0.0 };
    let n = m.mu_x.len();
    let mut g_mu = vec![0.0; n];
    let mut g_xx = vec![0.0; n];
    let mut g_dd = vec![0.0; n];
    for i in 0..n {
        let u = upstream[i];
        if u == 0.0 {
            continue;
        }
        let (mx, my, vx, vy) = (m.mu_x[i], m.mu_y[i], m.var_x[i], m.var_y[i]);
        let sd = m.sd_product(i);
        let (deficit, cov_clamped) = m.deficit(i);
        let cov = sd - deficit;

        let l_num = 2.0 * mx * my + c1;
        let l_den = mx * mx + my * my + c1;
        let c_num = 2.0 * sd + c2;
        let c_den = vx + vy + c2;
        let s_num = cov + c3;
        let s_den = sd + c3;
        let l = luminance(mx, my, c1);
        let c = contrast(vx, vy, m.sd_gap_sq(i), c2);
        let s = structure(deficit, sd, c3);
        let (la, cb, sg) = (spow(l, alpha), spow(c, exps.beta), spow(s, exps.gamma));
        let d_l = dspow(l, alpha) * cb * sg;
        let d_c = la * dspow(c, exps.beta) * sg;
        let d_s = la * cb * dspow(s, exps.gamma);

        let dl_dmu = 2.0 * (my * l_den - l_num * mx) / (l_den * l_den);

        // Variance branch; a clamped variance contributes nothing.
        let g_var = if vx > 0.0 {
            let dsd = if sd > 0.0 { vy / (2.0 * sd) } else { 0.0 };
            let dc = (2.0 * dsd * c_den - c_num) / (c_den * c_den);
            let ds = if cov_clamped {
                let sign = cov.signum();
                dsd * (sign * s_den - s_num) / (s_den * s_den)
            } else {
                -s_num * dsd / (s_den * s_den)
            };
            d_c * dc + d_s * ds
        } else {
            0.0
        };
        let g_cov = if cov_clamped { 0.0 } else { d_s / s_den };

        // cov = (var_x + var_y - var_d) / 2 in terms of the convolved primitives
        let g_vx = g_var + 0.5 * g_cov;
        g_mu[i] = u * (d_l * dl_dmu - 2.0 * k * mx * g_vx + k * (mx - my) * g_cov);
        g_xx[i] = u * k * g_vx;
        g_dd[i] = -0.5 * u * k * g_cov;
    }
    let kern = &level.kernel;
    let a_mu = conv_plane_adjoint(&g_mu, h, w, kern);
    let a_xx = conv_plane_adjoint(&g_xx, h, w, kern);
    let a_dd = conv_plane_adjoint(&g_dd, h, w, kern);
    (0..h * w)
        .map(|j| a_mu[j] + 2.0 * x[j] * a_xx[j] + 2.0 * (x[j] - y[j]) * a_dd[j])
        .collect()
}

/// Gradient of `sum_i upstream_i * SSIM_i` over all planes, with a constant upstream.
fn ssim_level_grad(
    s: &FeatureMap,
    t: &FeatureMap,
    level: &Level,
    cfg: &LossConfig,
    upstream: f64,
) -> Result<FeatureMap> {
    let [b, c, h, w] = s.dims();
    let (ho, wo) = valid_dims(h, w, level.size())?;
    let up = vec![upstream; ho * wo];
    let mut out = vec![0.0; s.len()];
    Exec::default().for_each_chunk(&mut out, h * w, |i, dst| {
        let g = ssim_plane_backward(
            s.plane(i / c, i % c),
            t.plane(i / c, i % c),
            h,
            w,
            level,
            &cfg.stabilizers,
            &cfg.exponents,
            &up,
        );
        dst.copy_from_slice(&g);
    });
    Ok(FeatureMap::from_parts([b, c, h, w], out))
}

fn lp_grad(s: &FeatureMap, t: &FeatureMap, p: f64) -> FeatureMap {
    let n = s.len() as f64;
    s.zip_map(t, |a, b| {
        let d = a - b;
        if d == 0.0 {
            0.0
        } else if p == 1.0 {
            d.signum() / n
        } else if p == 2.0 {
            2.0 * d / n
        } else {
            p * d.abs().powf(p - 1.0) * d.signum() / n
        }
    })
    .expect("shapes checked by forward")
}

fn smooth_l1_grad(s: &FeatureMap, t: &FeatureMap, beta: f64) -> FeatureMap {
    let n = s.len() as f64;
    s.zip_map(t, |a, b| {
        let d = a - b;
        if d.abs() < beta {
            d / beta / n
        } else {
            d.signum() / n
        }
    })
    .expect("shapes checked by forward")
}

fn ms_ssim_grad(s: &FeatureMap, t: &FeatureMap, cfg: &LossConfig) -> Result<(f64, FeatureMap)> {
    let fwd = ms_forward(s, t, cfg)?;
    let powered: Vec<f64> = fwd
        .means
        .iter()
        .zip(MS_SSIM_LEVELS)
        .map(|(&m, (_, e))| spow(m, e))
        .collect();
    let mut grad = FeatureMap::zeros(s.dims());
    for (j, (level, maps)) in fwd.levels.iter().zip(&fwd.maps).enumerate() {
        let others: f64 = powered
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != j)
            .map(|(_, v)| v)
            .product();
        let d_mean = -0.5 * others * dspow(fwd.means[j], MS_SSIM_LEVELS[j].1);
        let upstream = d_mean / maps.ssim.len() as f64;
        let g = ssim_level_grad(s, t, level, cfg, upstream)?;
        for (a, b) in grad.as_mut_slice().iter_mut().zip(g.as_slice()) {
            *a += b;
        }
    }
    Ok((((1.0 - fwd.score) / 2.0).clamp(0.0, 1.0), grad))
}

/// Loss and its gradient with respect to `s`, for the pair exactly as given:
/// no adapter and no normalization. This is the entry point the
/// finite-difference checker differentiates.
pub fn loss_and_grad(
    s: &FeatureMap,
    t: &FeatureMap,
    cfg: &LossConfig,
) -> Result<(LossResult, FeatureMap)> {
    let result = compute_loss(s, t, cfg)?;
    let grad = match cfg.kind {
        LossKind::Lp => lp_grad(s, t, cfg.p),
        LossKind::SmoothL1 => smooth_l1_grad(s, t, cfg.huber_beta),
        LossKind::Ssim => {
            let level = Level::new(cfg.window, true)?;
            let upstream = -0.5 / result.count as f64;
            ssim_level_grad(s, t, &level, cfg, upstream)?
        }
        LossKind::MsSsim => ms_ssim_grad(s, t, cfg)?.1,
        LossKind::CombinedL1MsSsim => {
            let l1 = lp_grad(s, t, 1.0);
            let (_, ms) = ms_ssim_grad(s, t, cfg)?;
            l1.zip_map(&ms, |a, b| cfg.combine_w1 * a + cfg.combine_w2 * b)?
        }
    };
    Ok((result, grad))
}

/// Full single-scale pipeline: adapter, normalization, loss, and the
/// gradients back to the raw student and the adapter parameters.
pub fn backward(
    s: &FeatureMap,
    t: &FeatureMap,
    phi: Option<&AdapterParams>,
    cfg: &LossConfig,
) -> Result<(f64, GradientBundle)> {
    let adapted = match phi {
        Some(p) => apply_adapter(p, s)?,
        None => s.clone(),
    };
    let (scalar, grad) = match cfg.normalize {
        Some(scope) => {
            let ns = min_max_normalize_affine(&adapted, scope)?;
            let nt = min_max_normalize(t, scope)?;
            let (r, g) = loss_and_grad(&ns.map, &nt, cfg)?;
            (r.scalar, ns.pull_back(&g))
        }
        None => {
            let (r, g) = loss_and_grad(&adapted, t, cfg)?;
            (r.scalar, g)
        }
    };
    Ok(match phi {
        Some(p) => {
            let (dx, dw, db) = adapter_backward(p, s, &grad);
            (
                scalar,
                GradientBundle {
                    d_student: dx,
                    d_adapter_weight: Some(dw),
                    d_adapter_bias: Some(db),
                },
            )
        }
        None => (
            scalar,
            GradientBundle {
                d_student: grad,
                d_adapter_weight: None,
                d_adapter_bias: None,
            },
        ),
    })
}

/// Gradients of the multi-scale feature loss, one bundle per scale.
pub fn feat_loss_backward(
    s: &MultiScaleFeatures,
    t: &MultiScaleFeatures,
    phi: Option<&[AdapterParams]>,
    cfg: &LossConfig,
) -> Result<(f64, Vec<GradientBundle>)> {
    if s.len() != t.len() {
        return Err(dim_err!("student has {} scales, teacher has {}", s.len(), t.len()));
    }
    if let Some(p) = phi {
        if p.len() != s.len() {
            return Err(dim_err!("{} adapters for {} scales", p.len(), s.len()));
        }
    }
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(s.len());
    for (r, (sr, tr)) in s.scales().iter().zip(t.scales()).enumerate() {
        let (v, g) = backward(sr, tr, phi.map(|p| &p[r]), cfg)?;
        total += v;
        grads.push(g);
    }
    Ok((total, grads))
}

fn has_l1_kink(cfg: &LossConfig) -> bool {
    match cfg.kind {
        LossKind::Lp => cfg.p == 1.0,
        LossKind::CombinedL1MsSsim => cfg.combine_w1 != 0.0,
        _ => false,
    }
}

/// `spow(b + delta, e) - spow(b, e)` without cancellation when `delta` is tiny.
fn spow_increment(base: f64, delta: f64, e: f64) -> f64 {
    let ratio = delta / base;
    if base != 0.0 && ratio > -1.0 && e.fract() != 0.0 {
        spow(base, e) * (e * ratio.ln_1p()).exp_m1()
    } else {
        spow(base + delta, e) - spow(base, e)
    }
}

/// Difference of the MS-SSIM loss between two inputs, with each level's
/// mean difference reduced from map differences and the product expanded
/// term by term.
fn ms_ssim_difference(
    plus: &FeatureMap,
    minus: &FeatureMap,
    t: &FeatureMap,
    cfg: &LossConfig,
) -> Result<f64> {
    let fp = ms_forward(plus, t, cfg)?;
    let fm = ms_forward(minus, t, cfg)?;
    let mut p_plus = Vec::with_capacity(fp.maps.len());
    let mut p_minus = Vec::with_capacity(fp.maps.len());
    let mut p_diff = Vec::with_capacity(fp.maps.len());
    for ((mp, mm), (_, e)) in fp.maps.iter().zip(&fm.maps).zip(MS_SSIM_LEVELS) {
        let diffs: Vec<f64> = mp.ssim.iter().zip(&mm.ssim).map(|(a, b)| a - b).collect();
        let delta = pairwise_sum(&diffs) / diffs.len() as f64;
        let base = pairwise_sum(&mm.ssim) / mm.ssim.len() as f64;
        p_plus.push(spow(base + delta, e));
        p_minus.push(spow(base, e));
        p_diff.push(spow_increment(base, delta, e));
    }
    // prod(a) - prod(b) = sum_m a_1..a_{m-1} (a_m - b_m) b_{m+1}..b_M
    let mut d_score = 0.0;
    for m in 0..p_diff.len() {
        let head: f64 = p_plus[..m].iter().product();
        let tail: f64 = p_minus[m + 1..].iter().product();
        d_score += head * p_diff[m] * tail;
    }
    Ok(-0.5 * d_score)
}

fn map_mean_difference(plus: &LossResult, minus: &LossResult) -> f64 {
    let diffs: Vec<f64> = plus
        .map
        .as_slice()
        .iter()
        .zip(minus.map.as_slice())
        .map(|(a, b)| a - b)
        .collect();
    pairwise_sum(&diffs) / plus.count as f64
}

/// Central difference of the loss along one coordinate of `s`.
///
/// Loss differences are formed before any reduction (map minus map, then
/// summed) so the cancellation only involves the few terms the probe
/// actually changed.
fn central_difference(
    s: &FeatureMap,
    t: &FeatureMap,
    cfg: &LossConfig,
    index: usize,
    epsilon: f64,
) -> Result<f64> {
    let x0 = s.as_slice()[index];
    let (xp, xm) = (x0 + epsilon, x0 - epsilon);
    let mut plus = s.clone();
    plus.as_mut_slice()[index] = xp;
    let mut minus = s.clone();
    minus.as_mut_slice()[index] = xm;
    let step = xp - xm;
    let diff = match cfg.kind {
        LossKind::Lp | LossKind::SmoothL1 | LossKind::Ssim => map_mean_difference(
            &compute_loss(&plus, t, cfg)?,
            &compute_loss(&minus, t, cfg)?,
        ),
        LossKind::MsSsim => ms_ssim_difference(&plus, &minus, t, cfg)?,
        LossKind::CombinedL1MsSsim => {
            let l1 = map_mean_difference(&lp_loss(&plus, t, 1.0)?, &lp_loss(&minus, t, 1.0)?);
            cfg.combine_w1 * l1 + cfg.combine_w2 * ms_ssim_difference(&plus, &minus, t, cfg)?
        }
    };
    Ok(diff / step)
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

fn checked_coordinates(n: usize) -> Vec<usize> {
    if n <= FULL_CHECK_LIMIT {
        (0..n).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        let mut idx = sample(&mut rng, n, SUBSET_SIZE).into_vec();
        idx.sort_unstable();
        idx
    }
}

#[derive(Default)]
struct ErrTracker {
    max_abs: f64,
    max_rel: f64,
    worst: usize,
    checked: usize,
}

impl ErrTracker {
    fn record(&mut self, index: usize, analytic: f64, numeric: f64) {
        let abs = (analytic - numeric).abs();
        let rel = rel_err(analytic, numeric);
        self.max_abs = self.max_abs.max(abs);
        if rel > self.max_rel || self.checked == 0 {
            self.max_rel = rel;
            self.worst = index;
        }
        self.checked += 1;
    }

    fn report(self, epsilon: f64, skipped: Vec<usize>) -> GradCheckReport {
        GradCheckReport {
            max_abs_err: self.max_abs,
            max_rel_err: self.max_rel,
            worst_index: self.worst,
            epsilon,
            checked: self.checked,
            skipped,
        }
    }
}

/// Compare [`loss_and_grad`] against central differences on `s`.
///
/// Every coordinate is probed for maps up to [`FULL_CHECK_LIMIT`] elements,
/// otherwise a fixed random subset. Coordinates where an l1 term is at its
/// kink (`|s - t| <= epsilon`) are skipped and listed in the report.
pub fn finite_diff_check(
    kind: LossKind,
    s: &FeatureMap,
    t: &FeatureMap,
    cfg: &LossConfig,
    epsilon: f64,
) -> Result<GradCheckReport> {
    let cfg = LossConfig { kind, ..*cfg };
    let (_, grad) = loss_and_grad(s, t, &cfg)?;
    let kink = has_l1_kink(&cfg);
    let mut skipped = Vec::new();
    let coords: Vec<usize> = checked_coordinates(s.len())
        .into_iter()
        .filter(|&i| {
            let on_kink = kink && (s.as_slice()[i] - t.as_slice()[i]).abs() <= epsilon;
            if on_kink {
                skipped.push(i);
            }
            !on_kink
        })
        .collect();
    let numeric: Vec<Result<f64>> = Exec::default().map(coords.len(), |j| {
        central_difference(s, t, &cfg, coords[j], epsilon)
    });
    let mut tracker = ErrTracker::default();
    for (&i, num) in coords.iter().zip(numeric) {
        tracker.record(i, grad.as_slice()[i], num?);
    }
    Ok(tracker.report(epsilon, skipped))
}

/// Finite-difference check of the adapter weight and bias gradients. The
/// normalization is disabled so that the checked function is the one the
/// analytic path differentiates. Indices in the report run over the weights
/// first, then the biases.
pub fn finite_diff_check_adapter(
    s: &FeatureMap,
    t: &FeatureMap,
    phi: &AdapterParams,
    cfg: &LossConfig,
    epsilon: f64,
) -> Result<GradCheckReport> {
    let cfg = LossConfig {
        normalize: None,
        ..*cfg
    };
    let (_, bundle) = backward(s, t, Some(phi), &cfg)?;
    let analytic: Vec<f64> = bundle
        .d_adapter_weight
        .into_iter()
        .flatten()
        .chain(bundle.d_adapter_bias.into_iter().flatten())
        .collect();
    let eval = |p: &AdapterParams| -> Result<f64> {
        Ok(compute_loss(&apply_adapter(p, s)?, t, &cfg)?.scalar)
    };
    let mut tracker = ErrTracker::default();
    for (i, &a) in analytic.iter().enumerate() {
        let mut probe = phi.clone();
        let x0 = *param_mut(&mut probe, i);
        let (xp, xm) = (x0 + epsilon, x0 - epsilon);
        *param_mut(&mut probe, i) = xp;
        let plus = eval(&probe)?;
        *param_mut(&mut probe, i) = xm;
        let minus = eval(&probe)?;
        tracker.record(i, a, (plus - minus) / (xp - xm));
    }
    Ok(tracker.report(epsilon, Vec::new()))
}

/// Weights first, then biases.
fn param_mut(p: &mut AdapterParams, i: usize) -> &mut f64 {
    let n_w = p.weight().len();
    if i < n_w {
        &mut p.weight_mut()[i]
    } else {
        &mut p.bias_mut()[i - n_w]
    }
}

//! Distillation objectives: pointwise `lp` and smooth-l1 penalties, the
//! windowed SSIM family, and the multi-scale feature loss that sums them
//! over neck outputs.

use crate::error::{dim_err, Error, Result};
use crate::exec::{pairwise_mean, Exec};
use crate::tensor::{apply_adapter, min_max_normalize, AdapterParams, FeatureMap, MultiScaleFeatures, NormalizeScope};
use crate::window::{valid_dims, Estimator, MomentMaps, PlaneMoments, WindowSpec};

/// SSIM stabilizers `C1 = (K1 L)^2`, `C2 = (K2 L)^2`, `C3 = C2 / 2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StabilizerConfig {
    pub k1: f64,
    pub k2: f64,
    /// Dynamic range `L`; 1 for min-max normalized maps.
    pub dynamic_range: f64,
}

impl Default for StabilizerConfig {
    fn default() -> Self {
        Self {
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
        }
    }
}

impl StabilizerConfig {
    pub fn c1(&self) -> f64 {
        let v = self.k1 * self.dynamic_range;
        v * v
    }
    pub fn c2(&self) -> f64 {
        let v = self.k2 * self.dynamic_range;
        v * v
    }
    pub fn c3(&self) -> f64 {
        self.c2() / 2.0
    }

    pub fn validate(&self) -> Result<()> {
        if [self.k1, self.k2, self.dynamic_range]
            .iter()
            .any(|v| !(*v > 0.0 && v.is_finite()))
        {
            return Err(Error::InvalidConfig(format!(
                "stabilizer constants must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Exponents on luminance, contrast and structure.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimExponents {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for SsimExponents {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
        }
    }
}

impl SsimExponents {
    pub fn structure_only() -> Self {
        Self {
            alpha: 0.0,
            beta: 0.0,
            gamma: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.beta, self.gamma];
        if all.iter().any(|v| !(*v >= 0.0 && v.is_finite())) || all.iter().all(|v| *v == 0.0) {
            return Err(Error::InvalidConfig(format!(
                "exponents must be nonnegative with at least one positive: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Lp,
    SmoothL1,
    Ssim,
    MsSsim,
    CombinedL1MsSsim,
}

impl LossKind {
    pub fn is_windowed(self) -> bool {
        !matches!(self, LossKind::Lp | LossKind::SmoothL1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Order of the pointwise `lp` penalty.
    pub p: f64,
    pub huber_beta: f64,
    pub exponents: SsimExponents,
    pub stabilizers: StabilizerConfig,
    pub window: WindowSpec,
    /// Weight on the l1 term of the combined loss.
    pub combine_w1: f64,
    /// Weight on the MS-SSIM term of the combined loss.
    pub combine_w2: f64,
    /// Weight of the feature loss in the total objective.
    pub lambda: f64,
    /// Min-max rescale applied by [`feat_loss`] and the full backward pass;
    /// `None` feeds raw maps to the loss.
    pub normalize: Option<NormalizeScope>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::Ssim,
            p: 2.0,
            huber_beta: 1.0,
            exponents: SsimExponents::default(),
            stabilizers: StabilizerConfig::default(),
            window: WindowSpec::default(),
            combine_w1: 0.15,
            combine_w2: 0.85,
            lambda: 4.0,
            normalize: Some(NormalizeScope::PerSampleScale),
        }
    }
}

impl LossConfig {
    pub fn with_kind(kind: LossKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p >= 1.0 && self.p.is_finite()) {
            return Err(Error::InvalidConfig(format!("norm order p must be >= 1, got {}", self.p)));
        }
        if !(self.huber_beta > 0.0 && self.huber_beta.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "smooth-l1 beta must be positive, got {}",
                self.huber_beta
            )));
        }
        if !(self.combine_w1 >= 0.0 && self.combine_w2 >= 0.0) {
            return Err(Error::InvalidConfig("combination weights must be nonnegative".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidConfig(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        self.exponents.validate()?;
        self.stabilizers.validate()?;
        self.window.validate()
    }
}

#[derive(Clone, Debug)]
pub struct ComponentMaps {
    pub luminance: FeatureMap,
    pub contrast: FeatureMap,
    pub structure: FeatureMap,
}

/// Scalar loss with the per-location field it was reduced from.
#[derive(Clone, Debug)]
pub struct LossResult {
    pub kind: LossKind,
    pub scalar: f64,
    /// Per-location loss: full shape for pointwise losses, valid region for
    /// windowed ones. For the MS-SSIM kinds this is a per-location
    /// breakdown on the largest window's region; the scalar combines level
    /// means instead and is not the mean of this map.
    pub map: FeatureMap,
    pub components: Option<ComponentMaps>,
    /// Number of locations the scalar was averaged over.
    pub count: usize,
    pub p: Option<f64>,
}

// Component formulas.

// Each component is a ratio whose numerator is the denominator minus a
// nonnegative deficit; equal inputs give a zero deficit and exactly 1.

pub(crate) fn luminance(mu_x: f64, mu_y: f64, c1: f64) -> f64 {
    let d = mu_x - mu_y;
    let q = mu_x * mu_x + mu_y * mu_y;
    (q - d * d + c1) / (q + c1)
}

/// `gap_sq = (sd_x - sd_y)^2`.
pub(crate) fn contrast(var_x: f64, var_y: f64, gap_sq: f64, c2: f64) -> f64 {
    let q = var_x + var_y;
    (q - gap_sq + c2) / (q + c2)
}

/// `deficit = sd_x sd_y - cov`.
pub(crate) fn structure(deficit: f64, sd_prod: f64, c3: f64) -> f64 {
    (sd_prod - deficit + c3) / (sd_prod + c3)
}

/// Power used for the SSIM exponents. Integer exponents are ordinary powers;
/// fractional exponents use `sign(x) |x|^e` so negative structure values stay real.
pub(crate) fn spow(x: f64, e: f64) -> f64 {
    if e == 0.0 {
        1.0
    } else if e == 1.0 {
        x
    } else if e.fract() == 0.0 {
        x.powi(e as i32)
    } else {
        x.signum() * x.abs().powf(e)
    }
}

/// Derivative of [`spow`] in `x`.
pub(crate) fn dspow(x: f64, e: f64) -> f64 {
    if e == 0.0 {
        0.0
    } else if e == 1.0 {
        1.0
    } else if e.fract() == 0.0 {
        e * x.powi(e as i32 - 1)
    } else {
        e * x.abs().powf(e - 1.0)
    }
}

pub fn luminance_map(m: &MomentMaps, c: &StabilizerConfig) -> FeatureMap {
    let c1 = c.c1();
    m.mu_s.zip_map(&m.mu_t, |a, b| luminance(a, b, c1)).expect("moment maps share a shape")
}

pub fn contrast_map(m: &MomentMaps, c: &StabilizerConfig) -> FeatureMap {
    let c2 = c.c2();
    m.var_s
        .zip_map(&m.var_t, |a, b| contrast(a, b, (a.sqrt() - b.sqrt()).powi(2), c2))
        .expect("moment maps share a shape")
}

pub fn structure_map(m: &MomentMaps, c: &StabilizerConfig) -> FeatureMap {
    let c3 = c.c3();
    let sd = m.var_s.zip_map(&m.var_t, |a, b| (a * b).sqrt()).expect("moment maps share a shape");
    m.cov_st.zip_map(&sd, |cov, sd| structure(sd - cov, sd, c3)).expect("moment maps share a shape")
}

/// One window scale of the SSIM family.
#[derive(Clone, Debug)]
pub(crate) struct Level {
    pub kernel: Vec<f64>,
    pub var_factor: f64,
    pub use_luminance: bool,
}

impl Level {
    pub fn new(spec: WindowSpec, use_luminance: bool) -> Result<Self> {
        let kernel = spec.window()?.weights_1d().to_vec();
        Ok(Self {
            kernel,
            var_factor: spec.variance_factor(),
            use_luminance,
        })
    }

    pub fn size(&self) -> usize {
        self.kernel.len()
    }
}

/// `(window size, exponent)` per MS-SSIM level; luminance enters only at the largest.
pub const MS_SSIM_LEVELS: [(usize, f64); 5] = [
    (3, 0.0448),
    (5, 0.2856),
    (7, 0.3001),
    (9, 0.2363),
    (11, 0.1333),
];

pub(crate) fn ms_ssim_levels(base: &WindowSpec) -> Result<Vec<Level>> {
    let largest = MS_SSIM_LEVELS[MS_SSIM_LEVELS.len() - 1].0;
    MS_SSIM_LEVELS
        .iter()
        .map(|&(f, _)| {
            let spec = match base.estimator {
                // sigma scales with the window so each level keeps the same shape.
                Estimator::GaussianWeighted => {
                    WindowSpec::gaussian(f, base.sigma * f as f64 / largest as f64)
                }
                Estimator::UniformUnbiased => WindowSpec::uniform(f),
            };
            Level::new(spec, f == largest)
        })
        .collect()
}

pub(crate) struct PlaneSsim {
    pub l: Vec<f64>,
    pub c: Vec<f64>,
    pub s: Vec<f64>,
    pub ssim: Vec<f64>,
}

pub(crate) fn ssim_plane(
    x: &[f64],
    y: &[f64],
    h: usize,
    w: usize,
    level: &Level,
    stab: &StabilizerConfig,
    exps: &SsimExponents,
) -> PlaneSsim {
    let m = PlaneMoments::compute(x, y, h, w, &level.kernel, level.var_factor);
    let (c1, c2, c3) = (stab.c1(), stab.c2(), stab.c3());
    let alpha = if level.use_luminance { exps.alpha } else { 0.0 };
    let n = m.mu_x.len();
    let mut out = PlaneSsim {
        l: Vec::with_capacity(n),
        c: Vec::with_capacity(n),
        s: Vec::with_capacity(n),
        ssim: Vec::with_capacity(n),
    };
    for i in 0..n {
        let sd = m.sd_product(i);
        let (deficit, _) = m.deficit(i);
        let l = luminance(m.mu_x[i], m.mu_y[i], c1);
        let c = contrast(m.var_x[i], m.var_y[i], m.sd_gap_sq(i), c2);
        let s = structure(deficit, sd, c3);
        out.ssim
            .push(spow(l, alpha) * spow(c, exps.beta) * spow(s, exps.gamma));
        out.l.push(l);
        out.c.push(c);
        out.s.push(s);
    }
    out
}

/// Per-plane SSIM evaluated over every `(batch, channel)` plane.
pub(crate) struct SsimMaps {
    pub dims: [usize; 4],
    pub l: Vec<f64>,
    pub c: Vec<f64>,
    pub s: Vec<f64>,
    pub ssim: Vec<f64>,
}

pub(crate) fn ssim_maps(
    s: &FeatureMap,
    t: &FeatureMap,
    level: &Level,
    cfg: &LossConfig,
) -> Result<SsimMaps> {
    s.check_same_dims(t)?;
    let [b, c, h, w] = s.dims();
    let (ho, wo) = valid_dims(h, w, level.size())?;
    let planes = Exec::default().map(b * c, |i| {
        ssim_plane(
            s.plane(i / c, i % c),
            t.plane(i / c, i % c),
            h,
            w,
            level,
            &cfg.stabilizers,
            &cfg.exponents,
        )
    });
    let mut out = SsimMaps {
        dims: [b, c, ho, wo],
        l: Vec::with_capacity(b * c * ho * wo),
        c: Vec::new(),
        s: Vec::new(),
        ssim: Vec::new(),
    };
    for p in planes {
        out.l.extend(p.l);
        out.c.extend(p.c);
        out.s.extend(p.s);
        out.ssim.extend(p.ssim);
    }
    Ok(out)
}

fn ssim_loss_value(ssim: f64) -> f64 {
    ((1.0 - ssim) / 2.0).clamp(0.0, 1.0)
}

/// `(1 - l^a c^b s^g) / 2` averaged over every valid window of every plane.
pub fn ssim_loss(s: &FeatureMap, t: &FeatureMap, cfg: &LossConfig) -> Result<LossResult> {
    cfg.validate()?;
    let level = Level::new(cfg.window, true)?;
    let maps = ssim_maps(s, t, &level, cfg)?;
    let loss: Vec<f64> = maps.ssim.iter().map(|&v| ssim_loss_value(v)).collect();
    let count = loss.len();
    Ok(LossResult {
        kind: LossKind::Ssim,
        scalar: pairwise_mean(&loss),
        map: FeatureMap::from_parts(maps.dims, loss),
        components: Some(ComponentMaps {
            luminance: FeatureMap::from_parts(maps.dims, maps.l),
            contrast: FeatureMap::from_parts(maps.dims, maps.c),
            structure: FeatureMap::from_parts(maps.dims, maps.s),
        }),
        count,
        p: None,
    })
}

/// Mean SSIM index (not the loss) over the valid region.
pub fn mean_ssim(s: &FeatureMap, t: &FeatureMap, cfg: &LossConfig) -> Result<f64> {
    let level = Level::new(cfg.window, true)?;
    Ok(pairwise_mean(&ssim_maps(s, t, &level, cfg)?.ssim))
}

pub(crate) struct MsForward {
    pub levels: Vec<Level>,
    pub maps: Vec<SsimMaps>,
    pub means: Vec<f64>,
    pub score: f64,
}

pub(crate) fn ms_forward(s: &FeatureMap, t: &FeatureMap, cfg: &LossConfig) -> Result<MsForward> {
    cfg.validate()?;
    s.check_same_dims(t)?;
    let levels = ms_ssim_levels(&cfg.window)?;
    let largest = levels.last().map(Level::size).unwrap_or(1);
    valid_dims(s.height(), s.width(), largest)?;
    let maps = levels
        .iter()
        .map(|lv| ssim_maps(s, t, lv, cfg))
        .collect::<Result<Vec<_>>>()?;
    let means: Vec<f64> = maps.iter().map(|m| pairwise_mean(&m.ssim)).collect();
    let score = means
        .iter()
        .zip(MS_SSIM_LEVELS)
        .map(|(&m, (_, e))| spow(m, e))
        .product();
    Ok(MsForward {
        levels,
        maps,
        means,
        score,
    })
}

/// Multi-window SSIM: each level's map is averaged, raised to its exponent,
/// and the levels are multiplied; the loss is `(1 - MS-SSIM) / 2`.
pub fn ms_ssim_loss(s: &FeatureMap, t: &FeatureMap, cfg: &LossConfig) -> Result<LossResult> {
    let fwd = ms_forward(s, t, cfg)?;
    let top = fwd.maps.last().expect("five levels");
    let [b, c, ho, wo] = top.dims;
    let top_size = fwd.levels.last().expect("five levels").size();

    // Per-location breakdown, each level cropped to the largest window's region.
    let mut map = vec![0.0; b * c * ho * wo];
    for (i, v) in map.iter_mut().enumerate() {
        let (plane, rem) = (i / (ho * wo), i % (ho * wo));
        let (r, col) = (rem / wo, rem % wo);
        let mut prod = 1.0;
        for ((lv, m), (_, e)) in fwd.levels.iter().zip(&fwd.maps).zip(MS_SSIM_LEVELS) {
            let off = (top_size - lv.size()) / 2;
            let lwo = m.dims[3];
            let lplane = m.dims[2] * lwo;
            prod *= spow(m.ssim[plane * lplane + (r + off) * lwo + col + off], e);
        }
        *v = ssim_loss_value(prod);
    }
    let count = fwd.maps.iter().map(|m| m.ssim.len()).sum();
    let top_dims = top.dims;
    let top = fwd.maps.into_iter().last().expect("five levels");
    Ok(LossResult {
        kind: LossKind::MsSsim,
        scalar: ssim_loss_value(fwd.score),
        map: FeatureMap::from_parts(top_dims, map),
        components: Some(ComponentMaps {
            luminance: FeatureMap::from_parts(top_dims, top.l),
            contrast: FeatureMap::from_parts(top_dims, top.c),
            structure: FeatureMap::from_parts(top_dims, top.s),
        }),
        count,
        p: None,
    })
}

/// Pointwise `|s - t|^p`, averaged. For `p = 2` this is the squared error.
pub fn lp_loss(s: &FeatureMap, t: &FeatureMap, p: f64) -> Result<LossResult> {
    if !(p >= 1.0 && p.is_finite()) {
        return Err(Error::InvalidConfig(format!("norm order p must be >= 1, got {p}")));
    }
    let map = s.zip_map(t, |a, b| {
        let d = (a - b).abs();
        if p == 1.0 {
            d
        } else if p == 2.0 {
            d * d
        } else {
            d.powf(p)
        }
    })?;
    Ok(LossResult {
        kind: LossKind::Lp,
        scalar: pairwise_mean(map.as_slice()),
        count: map.len(),
        map,
        components: None,
        p: Some(p),
    })
}

/// Huber-style penalty: quadratic below `beta`, linear above.
pub fn smooth_l1_loss(s: &FeatureMap, t: &FeatureMap, huber_beta: f64) -> Result<LossResult> {
    if !(huber_beta > 0.0 && huber_beta.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "smooth-l1 beta must be positive, got {huber_beta}"
        )));
    }
    let map = s.zip_map(t, |a, b| {
        let d = (a - b).abs();
        if d < huber_beta {
            0.5 * d * d / huber_beta
        } else {
            d - 0.5 * huber_beta
        }
    })?;
    Ok(LossResult {
        kind: LossKind::SmoothL1,
        scalar: pairwise_mean(map.as_slice()),
        count: map.len(),
        map,
        components: None,
        p: None,
    })
}

/// `w1 * l1 + w2 * MS-SSIM loss`.
pub fn combined_l1_msssim(s: &FeatureMap, t: &FeatureMap, cfg: &LossConfig) -> Result<LossResult> {
    let l1 = lp_loss(s, t, 1.0)?;
    let ms = ms_ssim_loss(s, t, cfg)?;
    let [b, c, ho, wo] = ms.map.dims();
    let off = (s.height() - ho) / 2;
    let map = FeatureMap::from_fn([b, c, ho, wo], |bi, ci, r, col| {
        cfg.combine_w1 * l1.map.get(bi, ci, r + off, col + off) + cfg.combine_w2 * ms.map.get(bi, ci, r, col)
    });
    Ok(LossResult {
        kind: LossKind::CombinedL1MsSsim,
        scalar: cfg.combine_w1 * l1.scalar + cfg.combine_w2 * ms.scalar,
        map,
        components: ms.components,
        count: ms.count,
        p: Some(1.0),
    })
}

/// Evaluate `cfg.kind` on an already prepared pair.
pub fn compute_loss(s: &FeatureMap, t: &FeatureMap, cfg: &LossConfig) -> Result<LossResult> {
    cfg.validate()?;
    match cfg.kind {
        LossKind::Lp => lp_loss(s, t, cfg.p),
        LossKind::SmoothL1 => smooth_l1_loss(s, t, cfg.huber_beta),
        LossKind::Ssim => ssim_loss(s, t, cfg),
        LossKind::MsSsim => ms_ssim_loss(s, t, cfg),
        LossKind::CombinedL1MsSsim => combined_l1_msssim(s, t, cfg),
    }
}

/// Apply the optional adapter and normalization to one scale.
pub fn prepare_pair(
    s: &FeatureMap,
    t: &FeatureMap,
    phi: Option<&AdapterParams>,
    normalize: Option<NormalizeScope>,
) -> Result<(FeatureMap, FeatureMap)> {
    let adapted = match phi {
        Some(p) => apply_adapter(p, s)?,
        None => s.clone(),
    };
    match normalize {
        Some(scope) => Ok((min_max_normalize(&adapted, scope)?, min_max_normalize(t, scope)?)),
        None => Ok((adapted, t.clone())),
    }
}

/// Sum over scales of the mean per-scale loss between the adapted,
/// normalized student and the normalized teacher.
pub fn feat_loss(
    s: &MultiScaleFeatures,
    t: &MultiScaleFeatures,
    phi: Option<&[AdapterParams]>,
    cfg: &LossConfig,
) -> Result<f64> {
    Ok(feat_loss_per_scale(s, t, phi, cfg)?.iter().sum())
}

pub fn feat_loss_per_scale(
    s: &MultiScaleFeatures,
    t: &MultiScaleFeatures,
    phi: Option<&[AdapterParams]>,
    cfg: &LossConfig,
) -> Result<Vec<f64>> {
    if s.len() != t.len() {
        return Err(dim_err!("student has {} scales, teacher has {}", s.len(), t.len()));
    }
    if let Some(p) = phi {
        if p.len() != s.len() {
            return Err(dim_err!("{} adapters for {} scales", p.len(), s.len()));
        }
    }
    s.scales()
        .iter()
        .zip(t.scales())
        .enumerate()
        .map(|(r, (sr, tr))| {
            let (a, b) = prepare_pair(sr, tr, phi.map(|p| &p[r]), cfg.normalize)?;
            Ok(compute_loss(&a, &b, cfg)?.scalar)
        })
        .collect()
}

/// `lambda * feat + det`.
pub fn total_loss(feat: f64, det: f64, lambda: f64) -> f64 {
    lambda * feat + det
}

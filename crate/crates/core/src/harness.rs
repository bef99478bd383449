//! Desk-scale distillation experiments.
//!
//! A student is pulled toward a fixed teacher by SGD with classical
//! momentum on `lambda * feat_loss`; the detection term of the full
//! objective is a constant zero here.

use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, Error, Result};
use crate::grad::{backward, feat_loss_backward};
use crate::loss::{compute_loss, mean_ssim, prepare_pair, total_loss, LossConfig};
use crate::tensor::{apply_adapter, AdapterParams, FeatureMap, MultiScaleFeatures};

pub const BRIGHT_FLAT: &str = "bright_flat";
pub const DARK_TEXTURED: &str = "dark_textured";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Generator {
    /// Bright smooth blob on the left half, dark high-frequency texture on the right.
    SmoothTexture,
    /// White noise in `[0, 1)`.
    Random,
    /// Random teacher with a student start of `a * teacher + b + noise`.
    AffinePair,
}

impl FromStr for Generator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "smooth+texture" => Ok(Generator::SmoothTexture),
            "random" => Ok(Generator::Random),
            "affine-pair" => Ok(Generator::AffinePair),
            other => Err(Error::UnknownGenerator(other.to_string())),
        }
    }
}

impl Generator {
    pub fn name(self) -> &'static str {
        match self {
            Generator::SmoothTexture => "smooth+texture",
            Generator::Random => "random",
            Generator::AffinePair => "affine-pair",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeneratorSpec {
    pub generator: Generator,
    /// Dimensions of scale 1; scale `r` halves height and width `r - 1` times.
    pub dims: [usize; 4],
    pub scales: usize,
}

impl GeneratorSpec {
    pub fn new(generator: Generator, dims: [usize; 4]) -> Self {
        Self {
            generator,
            dims,
            scales: 1,
        }
    }

    fn scale_dims(&self) -> Result<Vec<[usize; 4]>> {
        if self.scales == 0 {
            return Err(Error::InvalidConfig("at least one scale is required".into()));
        }
        let [b, c, h, w] = self.dims;
        (0..self.scales)
            .map(|r| {
                let (hr, wr) = (h >> r, w >> r);
                if b == 0 || c == 0 || hr == 0 || wr == 0 {
                    Err(dim_err!("scale {} of {:?} is empty", r + 1, self.dims))
                } else {
                    Ok([b, c, hr, wr])
                }
            })
            .collect()
    }
}

/// Boolean region over the `height x width` grid of scale 1.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionMask {
    pub name: String,
    pub height: usize,
    pub width: usize,
    pub cells: Vec<bool>,
}

impl RegionMask {
    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub spec: GeneratorSpec,
    pub seed: u64,
    pub teacher: MultiScaleFeatures,
    /// Starting point for the student, when the generator defines one.
    pub student_init: Option<MultiScaleFeatures>,
    pub masks: Vec<RegionMask>,
}

impl Scenario {
    pub fn mask(&self, name: &str) -> Option<&RegionMask> {
        self.masks.iter().find(|m| m.name == name)
    }
}

fn smooth_texture_map(dims: [usize; 4], rng: &mut ChaCha8Rng) -> FeatureMap {
    let [b_n, c_n, h, w] = dims;
    let half = w / 2;
    let (cy, cx) = (h as f64 / 2.0, half as f64 / 2.0);
    let spread = (h.min(half.max(1)) as f64 / 3.0).max(1.0);
    let mut out = FeatureMap::zeros(dims);
    for b in 0..b_n {
        for c in 0..c_n {
            let amp = rng.gen_range(0.08..0.15);
            let level = rng.gen_range(0.65..0.75);
            for y in 0..h {
                for x in 0..w {
                    let v = if x < half {
                        let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                        level + amp * (-d2 / (2.0 * spread * spread)).exp()
                    } else {
                        let checker = if (x + y) % 2 == 0 { 1.0 } else { -1.0 };
                        0.1 + 0.03 * checker + 0.04 * rng.gen_range(-1.0..1.0)
                    };
                    out.set(b, c, y, x, v);
                }
            }
        }
    }
    out
}

fn perturb(m: &FeatureMap, rng: &mut ChaCha8Rng, f: impl Fn(f64, f64) -> f64) -> FeatureMap {
    let mut out = m.clone();
    for v in out.as_mut_slice() {
        *v = f(*v, rng.gen_range(-1.0..1.0));
    }
    out
}

fn half_masks(h: usize, w: usize) -> Vec<RegionMask> {
    let half = w / 2;
    let make = |name: &str, left: bool| RegionMask {
        name: name.to_string(),
        height: h,
        width: w,
        cells: (0..h * w).map(|i| (i % w < half) == left).collect(),
    };
    vec![make(BRIGHT_FLAT, true), make(DARK_TEXTURED, false)]
}

/// Build a synthetic teacher (and possibly a student start); identical
/// `(spec, seed)` always give identical scenarios.
pub fn generate_scenario(spec: &GeneratorSpec, seed: u64) -> Result<Scenario> {
    let dims = spec.scale_dims()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (teacher, student, masks) = match spec.generator {
        Generator::Random => {
            let t: Vec<FeatureMap> = dims
                .iter()
                .map(|&d| FeatureMap::random_uniform(d, 0.0, 1.0, &mut rng))
                .collect();
            (t, None, Vec::new())
        }
        Generator::SmoothTexture => {
            let t: Vec<FeatureMap> = dims
                .iter()
                .map(|&d| smooth_texture_map(d, &mut rng))
                .collect();
            // Activation-proportional perturbation of the teacher.
            let s: Vec<FeatureMap> = t
                .iter()
                .map(|m| perturb(m, &mut rng, |v, u| v * (1.0 + 0.2 * u)))
                .collect();
            let [_, _, h, w] = dims[0];
            (t, Some(s), half_masks(h, w))
        }
        Generator::AffinePair => {
            let t: Vec<FeatureMap> = dims
                .iter()
                .map(|&d| FeatureMap::random_uniform(d, 0.0, 1.0, &mut rng))
                .collect();
            let s: Vec<FeatureMap> = t
                .iter()
                .map(|m| perturb(m, &mut rng, |v, u| 2.0 * v + 0.5 + 0.01 * u))
                .collect();
            (t, Some(s), Vec::new())
        }
    };
    Ok(Scenario {
        spec: *spec,
        seed,
        teacher: MultiScaleFeatures::new(teacher)?,
        student_init: student.map(MultiScaleFeatures::new).transpose()?,
        masks,
    })
}

/// Classical momentum: `v <- momentum * v + g`, `p <- p - lr * v`.
pub fn sgd_step(
    params: &mut [f64],
    grads: &[f64],
    lr: f64,
    momentum: f64,
    velocity: &mut [f64],
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(dim_err!(
            "sgd shapes differ: {} params, {} grads, {} velocity",
            params.len(),
            grads.len(),
            velocity.len()
        ));
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum StudentKind {
    /// The student feature map itself is the trainable parameter.
    #[default]
    DirectTensor,
    /// `student = adapter(fixed random features)`; only the adapter trains.
    ChannelAdapterOnFixedFeatures,
}

impl FromStr for StudentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(StudentKind::DirectTensor),
            "adapter" => Ok(StudentKind::ChannelAdapterOnFixedFeatures),
            other => Err(Error::InvalidConfig(format!("unknown student kind `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistillConfig {
    pub loss: LossConfig,
    pub lr: f64,
    pub momentum: f64,
    pub steps: usize,
    pub lambda: f64,
    pub student_kind: StudentKind,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig::default(),
            lr: 0.01,
            momentum: 0.9,
            steps: 2000,
            lambda: 4.0,
            student_kind: StudentKind::DirectTensor,
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.steps == 0 {
            return Err(Error::InvalidConfig("steps must be at least 1".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidConfig(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        self.loss.validate()
    }
}

#[derive(Clone, Debug)]
pub struct TrainLog {
    /// `lambda * feat_loss` before each update.
    pub loss: Vec<f64>,
    /// Mean SSIM index between prepared student and teacher, averaged over scales.
    pub ssim: Vec<f64>,
    pub seconds: Vec<f64>,
    pub final_student: MultiScaleFeatures,
}

impl TrainLog {
    pub fn final_ssim(&self) -> Option<f64> {
        self.ssim.last().copied()
    }

    /// CSV with a header row; numbers are written in round-trip form.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss,ssim,seconds\n");
        for (i, ((l, s), t)) in self.loss.iter().zip(&self.ssim).zip(&self.seconds).enumerate() {
            out.push_str(&format!("{i},{l},{s},{t}\n"));
        }
        out
    }
}

fn scenario_ssim(student: &MultiScaleFeatures, teacher: &MultiScaleFeatures, cfg: &LossConfig) -> Result<f64> {
    let mut acc = 0.0;
    for (s, t) in student.scales().iter().zip(teacher.scales()) {
        let (a, b) = prepare_pair(s, t, None, cfg.normalize)?;
        acc += mean_ssim(&a, &b, cfg)?;
    }
    Ok(acc / student.len() as f64)
}

/// Optimize a student toward `scenario.teacher` for `cfg.steps` steps.
///
/// A direct-tensor student starts from `scenario.student_init` when present,
/// otherwise from uniform noise in `[0, 1)` drawn from `cfg.seed`.
pub fn run_distillation(scenario: &Scenario, cfg: &DistillConfig) -> Result<TrainLog> {
    cfg.validate()?;
    let teacher = &scenario.teacher;
    // Separate stream so equal scenario and training seeds stay independent.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut log = TrainLog {
        loss: Vec::with_capacity(cfg.steps),
        ssim: Vec::with_capacity(cfg.steps),
        seconds: Vec::with_capacity(cfg.steps),
        final_student: teacher.clone(),
    };
    match cfg.student_kind {
        StudentKind::DirectTensor => {
            let mut student = match &scenario.student_init {
                Some(s) => s.clone(),
                None => MultiScaleFeatures::new(
                    teacher
                        .scales()
                        .iter()
                        .map(|t| FeatureMap::random_uniform(t.dims(), 0.0, 1.0, &mut rng))
                        .collect(),
                )?,
            };
            let mut velocity: Vec<Vec<f64>> =
                student.scales().iter().map(|s| vec![0.0; s.len()]).collect();
            for _ in 0..cfg.steps {
                let start = Instant::now();
                let (feat, mut grads) = feat_loss_backward(&student, teacher, None, &cfg.loss)?;
                log.loss.push(total_loss(feat, 0.0, cfg.lambda));
                log.ssim.push(scenario_ssim(&student, teacher, &cfg.loss)?);
                for ((s, g), v) in student.scales_mut().iter_mut().zip(&mut grads).zip(&mut velocity) {
                    g.scale(cfg.lambda);
                    sgd_step(s.as_mut_slice(), g.d_student.as_slice(), cfg.lr, cfg.momentum, v)?;
                }
                log.seconds.push(start.elapsed().as_secs_f64());
            }
            log.final_student = student;
        }
        StudentKind::ChannelAdapterOnFixedFeatures => {
            let base: Vec<FeatureMap> = teacher
                .scales()
                .iter()
                .map(|t| FeatureMap::random_uniform(t.dims(), 0.0, 1.0, &mut rng))
                .collect();
            let mut adapters: Vec<AdapterParams> = teacher
                .scales()
                .iter()
                .map(|t| AdapterParams::init_uniform(t.channels(), t.channels(), &mut rng))
                .collect();
            let mut vel_w: Vec<Vec<f64>> = adapters.iter().map(|a| vec![0.0; a.weight().len()]).collect();
            let mut vel_b: Vec<Vec<f64>> = adapters.iter().map(|a| vec![0.0; a.bias().len()]).collect();
            let student_of = |adapters: &[AdapterParams]| -> Result<MultiScaleFeatures> {
                MultiScaleFeatures::new(
                    adapters
                        .iter()
                        .zip(&base)
                        .map(|(a, x)| apply_adapter(a, x))
                        .collect::<Result<Vec<_>>>()?,
                )
            };
            for _ in 0..cfg.steps {
                let start = Instant::now();
                let student = student_of(&adapters)?;
                log.ssim.push(scenario_ssim(&student, teacher, &cfg.loss)?);
                let mut feat = 0.0;
                for (r, (a, t)) in adapters.iter_mut().zip(teacher.scales()).enumerate() {
                    let (v, mut g) = backward(&base[r], t, Some(a), &cfg.loss)?;
                    feat += v;
                    g.scale(cfg.lambda);
                    let gw = g.d_adapter_weight.expect("adapter gradient");
                    let gb = g.d_adapter_bias.expect("adapter gradient");
                    sgd_step(a.weight_mut(), &gw, cfg.lr, cfg.momentum, &mut vel_w[r])?;
                    sgd_step(a.bias_mut(), &gb, cfg.lr, cfg.momentum, &mut vel_b[r])?;
                }
                log.loss.push(total_loss(feat, 0.0, cfg.lambda));
                log.seconds.push(start.elapsed().as_secs_f64());
            }
            log.final_student = student_of(&adapters)?;
        }
    }
    Ok(log)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskMean {
    pub name: String,
    pub mean: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistributionStats {
    /// Mean absolute value of the map inside each mask.
    pub masks: Vec<MaskMean>,
    /// `dark_textured / bright_flat`; `+inf` when the denominator is zero,
    /// `None` when either mask is absent.
    pub ratio: Option<f64>,
}

impl DistributionStats {
    pub fn mean(&self, name: &str) -> Option<f64> {
        self.masks.iter().find(|m| m.name == name).map(|m| m.mean)
    }
}

/// Per-mask mean `|value|` of an `h x w` map.
///
/// The map may be smaller than the masks (a valid-region map); it is then
/// taken to be centred and the masks are cropped to match.
pub fn gradient_distribution_stats(
    map: &[f64],
    h: usize,
    w: usize,
    masks: &[RegionMask],
) -> Result<DistributionStats> {
    if map.len() != h * w {
        return Err(dim_err!("map has {} values, expected {h}x{w}", map.len()));
    }
    let mut out = Vec::with_capacity(masks.len());
    for m in masks {
        if m.cells.len() != m.height * m.width {
            return Err(dim_err!("mask `{}` has {} cells for {}x{}", m.name, m.cells.len(), m.height, m.width));
        }
        if h > m.height || w > m.width || !(m.height - h).is_multiple_of(2) || !(m.width - w).is_multiple_of(2) {
            return Err(dim_err!(
                "{h}x{w} map is not a centred crop of the {}x{} mask `{}`",
                m.height,
                m.width,
                m.name
            ));
        }
        let (oy, ox) = ((m.height - h) / 2, (m.width - w) / 2);
        let mut acc = 0.0;
        let mut count = 0usize;
        for y in 0..h {
            for x in 0..w {
                if m.cells[(y + oy) * m.width + x + ox] {
                    acc += map[y * w + x].abs();
                    count += 1;
                }
            }
        }
        if count == 0 {
            return Err(Error::InvalidInput(format!("mask `{}` covers no map location", m.name)));
        }
        out.push(MaskMean {
            name: m.name.clone(),
            mean: acc / count as f64,
            count,
        });
    }
    let find = |n: &str| out.iter().find(|m| m.name == n).map(|m| m.mean);
    let ratio = match (find(DARK_TEXTURED), find(BRIGHT_FLAT)) {
        (Some(num), Some(den)) => Some(if den == 0.0 { f64::INFINITY } else { num / den }),
        _ => None,
    };
    Ok(DistributionStats { masks: out, ratio })
}

#[derive(Clone, Debug)]
pub struct PairDistribution {
    pub gradient: DistributionStats,
    pub loss: DistributionStats,
}

/// Gradient and loss-map distribution of scale 1 of a student against the
/// scenario teacher, both reduced to channel means.
pub fn analyze_pair(scenario: &Scenario, student: &MultiScaleFeatures, cfg: &LossConfig) -> Result<PairDistribution> {
    let s = &student.scales()[0];
    let t = &scenario.teacher.scales()[0];
    let (_, g) = backward(s, t, None, cfg)?;
    let grad = &g.d_student;
    let gradient = gradient_distribution_stats(&grad.channel_mean(), grad.height(), grad.width(), &scenario.masks)?;
    let (a, b) = prepare_pair(s, t, None, cfg.normalize)?;
    let lm = compute_loss(&a, &b, cfg)?.map;
    let loss = gradient_distribution_stats(&lm.channel_mean(), lm.height(), lm.width(), &scenario.masks)?;
    Ok(PairDistribution { gradient, loss })
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ssimkd::grad::{backward, default_epsilon, finite_diff_check};
use ssimkd::harness::{generate_scenario, run_distillation, DistillConfig, GeneratorSpec, StudentKind};
use ssimkd::io::{export_map, read_fdmp, write_fdmp, DType, MapFormat};
use ssimkd::loss::{compute_loss, prepare_pair};
use ssimkd::window::{direct_convolve, separable_convolve};
use ssimkd::{Error, FeatureMap, LossConfig, LossKind, NormalizeScope, SsimExponents, WindowSpec};

/// Relative error at or above which `gradcheck` reports failure.
const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "ssimkd", version, about = "Structural-similarity feature distillation tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic teacher (and student start, if any) as FDMP files.
    Gen(GenArgs),
    /// Print the loss between two FDMP maps.
    Loss(LossCmd),
    /// Export the channel-mean loss map.
    Lossmap(MapCmd),
    /// Export the channel-mean |dL/dS| map.
    Gradmap(MapCmd),
    /// Compare analytic gradients with central differences on random maps.
    Gradcheck(GradcheckArgs),
    /// Train a student toward a synthetic teacher.
    Distill(DistillArgs),
    /// Time separable against direct windowed convolution.
    Bench(BenchArgs),
}

fn parse_dims(s: &str) -> Result<[usize; 4], String> {
    let parts: Vec<&str> = s.split('x').collect();
    if parts.len() != 4 {
        return Err(format!("expected BxCxHxW, got `{s}`"));
    }
    let mut dims = [0usize; 4];
    for (d, p) in dims.iter_mut().zip(parts) {
        *d = p.parse().map_err(|_| format!("bad dimension `{p}` in `{s}`"))?;
        if *d == 0 {
            return Err(format!("zero dimension in `{s}`"));
        }
    }
    Ok(dims)
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Ssim,
    Msssim,
    L1,
    L2,
    Smoothl1,
    Combined,
}

#[derive(Clone, Copy, ValueEnum)]
enum EstimatorArg {
    Gaussian,
    Uniform,
}

#[derive(Clone, Copy, ValueEnum)]
enum NormalizeArg {
    PerSample,
    PerChannel,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum DTypeArg {
    F32,
    F64,
}

#[derive(Args)]
struct LossArgs {
    #[arg(long, value_enum, default_value = "ssim")]
    kind: KindArg,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    #[arg(long, default_value_t = 1.0)]
    gamma: f64,
    #[arg(long, default_value_t = 11)]
    window: usize,
    #[arg(long, default_value_t = 1.5)]
    sigma: f64,
    #[arg(long, default_value_t = 2.0)]
    p: f64,
    #[arg(long, default_value_t = 1.0)]
    huber_beta: f64,
    #[arg(long, value_enum, default_value = "gaussian")]
    estimator: EstimatorArg,
    #[arg(long, value_enum, default_value = "per-sample")]
    normalize: NormalizeArg,
}

impl LossArgs {
    fn config(&self) -> ssimkd::Result<LossConfig> {
        let (kind, p) = match self.kind {
            KindArg::Ssim => (LossKind::Ssim, self.p),
            KindArg::Msssim => (LossKind::MsSsim, self.p),
            KindArg::L1 => (LossKind::Lp, 1.0),
            KindArg::L2 => (LossKind::Lp, 2.0),
            KindArg::Smoothl1 => (LossKind::SmoothL1, self.p),
            KindArg::Combined => (LossKind::CombinedL1MsSsim, self.p),
        };
        let window = match self.estimator {
            EstimatorArg::Gaussian => WindowSpec::gaussian(self.window, self.sigma),
            EstimatorArg::Uniform => WindowSpec::uniform(self.window),
        };
        let cfg = LossConfig {
            kind,
            p,
            huber_beta: self.huber_beta,
            exponents: SsimExponents {
                alpha: self.alpha,
                beta: self.beta,
                gamma: self.gamma,
            },
            window,
            normalize: match self.normalize {
                NormalizeArg::PerSample => Some(NormalizeScope::PerSampleScale),
                NormalizeArg::PerChannel => Some(NormalizeScope::PerChannel),
                NormalizeArg::Off => None,
            },
            ..LossConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value = "random")]
    generator: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_parser = parse_dims, default_value = "1x4x32x32")]
    dims: [usize; 4],
    /// Teacher output path.
    #[arg(long)]
    out: PathBuf,
    /// Output path for the generator's student start, when it has one.
    #[arg(long)]
    student_out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "f64")]
    dtype: DTypeArg,
}

#[derive(Args)]
struct LossCmd {
    #[arg(long)]
    student: PathBuf,
    #[arg(long)]
    teacher: PathBuf,
    #[command(flatten)]
    loss: LossArgs,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ComponentArg {
    L,
    C,
    S,
    Total,
}

#[derive(Args)]
struct MapCmd {
    #[arg(long)]
    student: PathBuf,
    #[arg(long)]
    teacher: PathBuf,
    /// `.pgm` or `.csv`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "total")]
    component: ComponentArg,
    #[command(flatten)]
    loss: LossArgs,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, value_enum, default_value = "ssim")]
    kind: KindArg,
    #[arg(long, value_parser = parse_dims, default_value = "1x2x12x12")]
    dims: [usize; 4],
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Central-difference step; defaults to a per-kind value.
    #[arg(long)]
    eps: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum StudentArg {
    Direct,
    Adapter,
}

#[derive(Args)]
struct DistillArgs {
    #[arg(long, default_value = "random")]
    scenario: String,
    #[arg(long, value_parser = parse_dims, default_value = "1x4x32x32")]
    dims: [usize; 4],
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long, default_value_t = 4.0)]
    lambda: f64,
    #[arg(long, value_enum, default_value = "direct")]
    student: StudentArg,
    /// Per-step CSV log.
    #[arg(long)]
    log: Option<PathBuf>,
    #[command(flatten)]
    loss: LossArgs,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 11)]
    window: usize,
    #[arg(long, default_value_t = 1.5)]
    sigma: f64,
    #[arg(long, value_parser = parse_dims, default_value = "1x8x256x256")]
    dims: [usize; 4],
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

enum Failure {
    Check(String),
    Usage(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

fn sig(x: f64) -> String {
    format!("{x:.11e}")
}

fn map_format(path: &Path) -> Result<MapFormat, Failure> {
    MapFormat::from_path(path)
        .ok_or_else(|| Failure::Usage(format!("{}: output must end in .pgm or .csv", path.display())))
}

fn read_pair(student: &Path, teacher: &Path) -> Result<(FeatureMap, FeatureMap), Failure> {
    let s = read_fdmp(student).map_err(|e| Failure::Usage(format!("{}: {e}", student.display())))?;
    let t = read_fdmp(teacher).map_err(|e| Failure::Usage(format!("{}: {e}", teacher.display())))?;
    s.check_same_dims(&t)?;
    Ok((s, t))
}

fn gen(a: &GenArgs) -> CmdResult {
    let spec = GeneratorSpec::new(a.generator.parse()?, a.dims);
    let sc = generate_scenario(&spec, a.seed)?;
    let dtype = match a.dtype {
        DTypeArg::F32 => DType::F32,
        DTypeArg::F64 => DType::F64,
    };
    write_fdmp(&a.out, &sc.teacher.scales()[0], dtype)?;
    if let Some(path) = &a.student_out {
        match &sc.student_init {
            Some(s) => write_fdmp(path, &s.scales()[0], dtype)?,
            None => {
                return Err(Failure::Usage(format!(
                    "generator `{}` has no student start",
                    a.generator
                )))
            }
        }
    }
    Ok(())
}

fn loss(a: &LossCmd) -> CmdResult {
    let cfg = a.loss.config()?;
    let (s, t) = read_pair(&a.student, &a.teacher)?;
    let (ps, pt) = prepare_pair(&s, &t, None, cfg.normalize)?;
    let r = compute_loss(&ps, &pt, &cfg)?;
    println!("loss {}", sig(r.scalar));
    if let Some(c) = &r.components {
        let mean = |m: &FeatureMap| m.as_slice().iter().sum::<f64>() / m.len() as f64;
        println!("luminance {}", sig(mean(&c.luminance)));
        println!("contrast {}", sig(mean(&c.contrast)));
        println!("structure {}", sig(mean(&c.structure)));
    }
    Ok(())
}

fn lossmap(a: &MapCmd) -> CmdResult {
    let format = map_format(&a.out)?;
    let cfg = a.loss.config()?;
    let (s, t) = read_pair(&a.student, &a.teacher)?;
    let (ps, pt) = prepare_pair(&s, &t, None, cfg.normalize)?;
    let r = compute_loss(&ps, &pt, &cfg)?;
    let map = match (a.component, &r.components) {
        (ComponentArg::Total, _) => &r.map,
        (ComponentArg::L, Some(c)) => &c.luminance,
        (ComponentArg::C, Some(c)) => &c.contrast,
        (ComponentArg::S, Some(c)) => &c.structure,
        (_, None) => return Err(Failure::Usage("component maps require --kind ssim".into())),
    };
    export_map(&map.channel_mean(), map.height(), map.width(), &a.out, format)?;
    Ok(())
}

fn gradmap(a: &MapCmd) -> CmdResult {
    if a.component != ComponentArg::Total {
        return Err(Failure::Usage("gradmap exports the total loss gradient only".into()));
    }
    let format = map_format(&a.out)?;
    let cfg = a.loss.config()?;
    let (s, t) = read_pair(&a.student, &a.teacher)?;
    let (_, g) = backward(&s, &t, None, &cfg)?;
    let mag = g.d_student.map(f64::abs);
    export_map(&mag.channel_mean(), mag.height(), mag.width(), &a.out, format)?;
    Ok(())
}

fn gradcheck(a: &GradcheckArgs) -> CmdResult {
    let args = LossArgs {
        kind: a.kind,
        ..LossArgs::parse_defaults()
    };
    let cfg = args.config()?;
    let eps = a.eps.unwrap_or_else(|| default_epsilon(cfg.kind));
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let s = FeatureMap::random_uniform(a.dims, 0.0, 1.0, &mut rng);
    let t = FeatureMap::random_uniform(a.dims, 0.0, 1.0, &mut rng);
    let r = finite_diff_check(cfg.kind, &s, &t, &cfg, eps)?;
    println!("epsilon {}", r.epsilon);
    println!("checked {}", r.checked);
    println!("skipped {}", r.skipped.len());
    println!("max_abs_err {:e}", r.max_abs_err);
    println!("max_rel_err {:e}", r.max_rel_err);
    println!("worst_index {}", r.worst_index);
    if r.max_rel_err >= GRADCHECK_TOLERANCE {
        return Err(Failure::Check(format!(
            "relative error {:e} >= {GRADCHECK_TOLERANCE:e}",
            r.max_rel_err
        )));
    }
    Ok(())
}

fn distill(a: &DistillArgs) -> CmdResult {
    let spec = GeneratorSpec::new(a.scenario.parse()?, a.dims);
    let sc = generate_scenario(&spec, a.seed)?;
    let cfg = DistillConfig {
        loss: a.loss.config()?,
        lr: a.lr,
        momentum: a.momentum,
        steps: a.steps,
        lambda: a.lambda,
        student_kind: match a.student {
            StudentArg::Direct => StudentKind::DirectTensor,
            StudentArg::Adapter => StudentKind::ChannelAdapterOnFixedFeatures,
        },
        seed: a.seed,
    };
    let log = run_distillation(&sc, &cfg)?;
    if let Some(path) = &a.log {
        std::fs::write(path, log.to_csv()).map_err(Error::from)?;
    }
    println!("steps {}", log.loss.len());
    println!("initial_loss {}", sig(log.loss[0]));
    println!("final_loss {}", sig(*log.loss.last().expect("at least one step")));
    println!("final_ssim {}", sig(log.final_ssim().expect("at least one step")));
    println!("seconds {:.3}", log.seconds.iter().sum::<f64>());
    Ok(())
}

fn bench(a: &BenchArgs) -> CmdResult {
    let window = WindowSpec::gaussian(a.window, a.sigma).window()?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let x = FeatureMap::random_uniform(a.dims, 0.0, 1.0, &mut rng);
    let best = |f: &dyn Fn() -> ssimkd::Result<FeatureMap>| -> ssimkd::Result<(f64, FeatureMap)> {
        let mut out = None;
        let mut best = f64::INFINITY;
        for _ in 0..a.repeats.max(1) {
            let start = Instant::now();
            let y = f()?;
            best = best.min(start.elapsed().as_secs_f64());
            out = Some(y);
        }
        Ok((best, out.expect("at least one repeat")))
    };
    let (sep_t, sep) = best(&|| separable_convolve(&x, &window))?;
    let (dir_t, dir) = best(&|| direct_convolve(&x, &window))?;
    let diff = sep
        .as_slice()
        .iter()
        .zip(dir.as_slice())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    println!("separable_seconds {sep_t:.6}");
    println!("direct_seconds {dir_t:.6}");
    println!("speedup {:.2}", dir_t / sep_t);
    println!("max_abs_diff {diff:e}");
    Ok(())
}

impl LossArgs {
    fn parse_defaults() -> Self {
        #[derive(Parser)]
        struct Defaults {
            #[command(flatten)]
            loss: LossArgs,
        }
        Defaults::parse_from(["ssimkd"]).loss
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Gen(a) => gen(a),
        Command::Loss(a) => loss(a),
        Command::Lossmap(a) => lossmap(a),
        Command::Gradmap(a) => gradmap(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Distill(a) => distill(a),
        Command::Bench(a) => bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

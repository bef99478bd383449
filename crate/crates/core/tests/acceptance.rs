//! Exit criteria. Each check prints one PASS/FAIL line; the process fails
//! if any check fails.

mod common;

use std::panic::{self, AssertUnwindSafe};
use std::time::Instant;

use common::*;
use ssimkd::grad::{default_epsilon, finite_diff_check};
use ssimkd::harness::{
    analyze_pair, generate_scenario, run_distillation, DistillConfig, Generator, GeneratorSpec, StudentKind,
};
use ssimkd::io::{decode_fdmp, encode_fdmp, DType};
use ssimkd::loss::{
    combined_l1_msssim, compute_loss, feat_loss, feat_loss_per_scale, lp_loss, ms_ssim_loss, prepare_pair, ssim_loss,
    total_loss,
};
use ssimkd::tensor::{min_max_normalize, AdapterParams};
use ssimkd::window::{direct_convolve, local_moments, separable_convolve};
use ssimkd::{
    Error, FeatureMap, LossConfig, LossKind, MultiScaleFeatures, NormalizeScope, SsimExponents, WindowSpec,
};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg)
    }
}

fn gradient_correctness() -> Check {
    let start = Instant::now();
    let kinds: [(&str, LossKind, f64, f64); 6] = [
        ("ssim", LossKind::Ssim, 2.0, 1e-5),
        ("msssim", LossKind::MsSsim, 2.0, 1e-5),
        ("l1", LossKind::Lp, 1.0, 1e-7),
        ("l2", LossKind::Lp, 2.0, 1e-7),
        ("smoothl1", LossKind::SmoothL1, 2.0, 1e-7),
        ("combined", LossKind::CombinedL1MsSsim, 2.0, 1e-5),
    ];
    let mut worst = Vec::new();
    for (name, kind, p, tol) in kinds {
        let cfg = LossConfig { p, ..LossConfig::with_kind(kind) };
        let mut max_rel = 0.0f64;
        for seed in 0..5 {
            let mut r = rng(100 + seed);
            let s = random_map([2, 3, 16, 16], &mut r);
            let t = random_map([2, 3, 16, 16], &mut r);
            let rep = finite_diff_check(kind, &s, &t, &cfg, default_epsilon(kind)).map_err(|e| e.to_string())?;
            max_rel = max_rel.max(rep.max_rel_err);
        }
        ensure(max_rel < tol, format!("{name}: max relative error {max_rel:.3e} >= {tol:e}"))?;
        worst.push(format!("{name} {max_rel:.1e}"));
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 60.0, format!("took {secs:.1} s"))?;
    Ok(format!("{} in {secs:.1} s", worst.join(", ")))
}

fn oracle_equivalence() -> Check {
    let tol = 1e-10;
    let mut worst = 0.0f64;
    for seed in 0..4 {
        let mut r = rng(200 + seed);
        let dims = [1, 2, 16, 16];
        let s = random_map(dims, &mut r);
        let noise = random_map(dims, &mut r);
        let t = s.zip_map(&noise, |a, b| 0.7 * a + 0.3 * b).unwrap();
        for (spec, rw) in [
            (WindowSpec::default(), gaussian_2d(11, 1.5)),
            (WindowSpec::gaussian(7, 1.0), gaussian_2d(7, 1.0)),
            (WindowSpec::uniform(8), uniform_2d(8)),
        ] {
            let m = local_moments(&s, &t, &spec).map_err(|e| e.to_string())?;
            let cfg = LossConfig { window: spec, ..LossConfig::with_kind(LossKind::Ssim) };
            let got = ssim_loss(&s, &t, &cfg).map_err(|e| e.to_string())?;
            let want = ssim(&s, &t, &rw, (1.0, 1.0, 1.0), true);
            for c in 0..2 {
                let rm = moments_plane(s.plane(0, c), t.plane(0, c), 16, 16, &rw);
                for (a, b) in [
                    (m.mu_s.plane(0, c), &rm.mu_x),
                    (m.mu_t.plane(0, c), &rm.mu_y),
                    (m.var_s.plane(0, c), &rm.var_x),
                    (m.var_t.plane(0, c), &rm.var_y),
                    (m.cov_st.plane(0, c), &rm.cov),
                ] {
                    worst = worst.max(max_abs_diff(a, b));
                }
            }
            worst = worst.max((got.scalar - want.loss).abs());
            worst = worst.max(max_abs_diff(got.map.as_slice(), &want.map));
        }
        let ms = ms_ssim_loss(&s, &t, &LossConfig::with_kind(LossKind::MsSsim)).map_err(|e| e.to_string())?;
        worst = worst.max((ms.scalar - ms_ssim(&s, &t, 1.5)).abs());
        let comb = combined_l1_msssim(&s, &t, &LossConfig::with_kind(LossKind::CombinedL1MsSsim))
            .map_err(|e| e.to_string())?;
        worst = worst.max((comb.scalar - (0.15 * mean_abs_diff(&s, &t) + 0.85 * ms_ssim(&s, &t, 1.5))).abs());
    }
    ensure(worst < tol, format!("max deviation {worst:.3e}"))?;
    Ok(format!("max deviation {worst:.1e}"))
}

fn bounds_and_identity() -> Check {
    let cfg = LossConfig::with_kind(LossKind::Ssim);
    let mut r = rng(300);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for i in 0..1000 {
        let dims = [1 + i % 2, 1 + i % 3, 11 + i % 5, 11 + i % 7];
        let scale = [1.0, 10.0, 0.01][i % 3];
        let s = random_map(dims, &mut r).map(|v| (v - 0.5) * scale);
        let t = random_map(dims, &mut r).map(|v| (v - 0.5) * scale);
        let v = ssim_loss(&s, &t, &cfg).map_err(|e| e.to_string())?.scalar;
        lo = lo.min(v);
        hi = hi.max(v);
    }
    ensure((0.0..=1.0).contains(&lo) && (0.0..=1.0).contains(&hi), format!("range [{lo}, {hi}]"))?;
    let mut worst = 0.0f64;
    for i in 0..100 {
        let x = random_map([1, 2, 12 + i % 6, 12], &mut r).map(|v| v * (1 + i) as f64);
        worst = worst.max(ssim_loss(&x, &x, &cfg).map_err(|e| e.to_string())?.scalar);
    }
    ensure(worst < 1e-12, format!("identity loss {worst:e}"))?;
    Ok(format!("1000 pairs in [{lo:.3}, {hi:.3}], identity max {worst:e}"))
}

fn affine_and_structure() -> Check {
    let cfg = LossConfig::with_kind(LossKind::Ssim);
    let mut r = rng(400);
    let t = random_map([1, 3, 16, 16], &mut r).map(|v| 2.0 * v);
    let nt = min_max_normalize(&t, NormalizeScope::PerSampleScale).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for a in [0.5, 2.0, 10.0] {
        for b in [-1.0, 0.0, 3.0] {
            let ns = min_max_normalize(&t.map(|v| a * v + b), NormalizeScope::PerSampleScale)
                .map_err(|e| e.to_string())?;
            let v = ssim_loss(&ns, &nt, &cfg).map_err(|e| e.to_string())?.scalar;
            ensure(v == 0.0, format!("normalized affine pair a={a} b={b} gives {v:e}"))?;
        }
    }
    let structure = LossConfig { exponents: SsimExponents::structure_only(), ..cfg };
    let c3 = structure.stabilizers.c3();
    for a in [0.5, 2.0, 10.0] {
        for b in [-1.0, 0.0, 3.0] {
            let s = t.map(|v| a * v + b);
            let m = local_moments(&s, &t, &structure.window).map_err(|e| e.to_string())?;
            let min_var = m.var_s.as_slice().iter().chain(m.var_t.as_slice()).cloned().fold(f64::INFINITY, f64::min);
            ensure(min_var >= 100.0 * c3, format!("precondition: patch variance {min_var:e} < 100*C3"))?;
            let v = ssim_loss(&s, &t, &structure).map_err(|e| e.to_string())?.scalar;
            worst = worst.max(v);
        }
    }
    ensure(worst <= 1e-3, format!("structure-only loss {worst:e}"))?;
    Ok(format!("normalized affine loss exactly 0; structure-only max {worst:.1e}"))
}

fn worked_values() -> Check {
    let cfg = LossConfig::with_kind(LossKind::Ssim);
    let s = FeatureMap::filled([1, 1, 16, 16], 0.2);
    let t = FeatureMap::filled([1, 1, 16, 16], 0.8);
    let v = ssim_loss(&s, &t, &cfg).map_err(|e| e.to_string())?.scalar;
    // l = (2*0.16 + 1e-4) / (0.68 + 1e-4); c = s = 1
    let want: f64 = (1.0 - (0.32 + 1e-4) / (0.68 + 1e-4)) / 2.0;
    ensure((want - 0.264667).abs() < 1e-6, format!("hand value {want}"))?;
    ensure((v - 0.264667).abs() < 1e-6, format!("constant maps give {v}"))?;
    let s = FeatureMap::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let t = s.map(|x| 2.0 * x);
    let m = local_moments(&s, &t, &WindowSpec::uniform(2)).map_err(|e| e.to_string())?;
    let (var, cov) = (m.var_s.as_slice()[0], m.cov_st.as_slice()[0]);
    ensure((var - 5.0 / 3.0).abs() < 1e-12, format!("variance {var}"))?;
    ensure((cov - 10.0 / 3.0).abs() < 1e-12, format!("covariance {cov}"))?;
    Ok(format!("constant {v:.6}, var {var:.12}, cov {cov:.12}"))
}

fn gradient_distribution() -> Check {
    let ssim_cfg = LossConfig::with_kind(LossKind::Ssim);
    let l2_cfg = LossConfig { p: 2.0, ..LossConfig::with_kind(LossKind::Lp) };
    let mut ratios = Vec::new();
    for seed in 0..10 {
        let sc = generate_scenario(&GeneratorSpec::new(Generator::SmoothTexture, [1, 4, 32, 32]), seed)
            .map_err(|e| e.to_string())?;
        let student = sc.student_init.clone().ok_or("no student start")?;
        let a = analyze_pair(&sc, &student, &ssim_cfg).map_err(|e| e.to_string())?.gradient.ratio.unwrap();
        let b = analyze_pair(&sc, &student, &l2_cfg).map_err(|e| e.to_string())?.gradient.ratio.unwrap();
        ensure(a > b, format!("seed {seed}: ssim ratio {a:.4} <= l2 ratio {b:.4}"))?;
        ratios.push((a, b));
    }
    let min_a = ratios.iter().map(|r| r.0).fold(f64::INFINITY, f64::min);
    let max_b = ratios.iter().map(|r| r.1).fold(0.0, f64::max);
    Ok(format!("10/10 seeds; ssim ratio >= {min_a:.3}, l2 ratio <= {max_b:.3}"))
}

fn distillation_convergence() -> Check {
    let sc = generate_scenario(&GeneratorSpec::new(Generator::Random, [1, 4, 32, 32]), 0).map_err(|e| e.to_string())?;
    let base = DistillConfig {
        lr: 0.01,
        momentum: 0.9,
        steps: 2000,
        lambda: 4.0,
        student_kind: StudentKind::DirectTensor,
        ..DistillConfig::default()
    };
    let start = Instant::now();
    let ssim_log = run_distillation(&sc, &DistillConfig { loss: LossConfig::with_kind(LossKind::Ssim), ..base })
        .map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let l2_log = run_distillation(
        &sc,
        &DistillConfig { loss: LossConfig { p: 2.0, ..LossConfig::with_kind(LossKind::Lp) }, ..base },
    )
    .map_err(|e| e.to_string())?;
    let best = |v: &[f64]| v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (s_best, l_best) = (best(&ssim_log.ssim), best(&l2_log.ssim));
    let detail = format!("ssim run reaches {s_best:.4} in {secs:.2} s, l2 run reaches {l_best:.4}");
    ensure(s_best >= 0.99 && secs < 10.0 && l_best >= 0.95, detail.clone())?;
    Ok(detail)
}

fn composition_exactness() -> Check {
    let mut r = rng(800);
    let s = random_map([2, 2, 16, 16], &mut r);
    let t = random_map([2, 2, 16, 16], &mut r);
    let cfg = LossConfig::with_kind(LossKind::CombinedL1MsSsim);
    ensure(cfg.combine_w1 == 0.15 && cfg.combine_w2 == 0.85, "default combination weights".into())?;
    let comb = combined_l1_msssim(&s, &t, &cfg).map_err(|e| e.to_string())?.scalar;
    let l1 = lp_loss(&s, &t, 1.0).map_err(|e| e.to_string())?.scalar;
    let ms = ms_ssim_loss(&s, &t, &cfg).map_err(|e| e.to_string())?.scalar;
    let d1 = (comb - (0.15 * l1 + 0.85 * ms)).abs();
    ensure(d1 <= 1e-14, format!("combined deviates by {d1:e}"))?;

    let scales: Vec<[usize; 4]> = vec![[1, 3, 48, 48], [1, 3, 24, 24], [1, 3, 12, 12]];
    let student = MultiScaleFeatures::new(scales.iter().map(|&d| random_map(d, &mut r)).collect()).unwrap();
    let teacher = MultiScaleFeatures::new(scales.iter().map(|&d| random_map(d, &mut r)).collect()).unwrap();
    let adapters: Vec<AdapterParams> = (0..3).map(|_| AdapterParams::init_uniform(3, 3, &mut r)).collect();
    let mut d2 = 0.0f64;
    for kind in [LossKind::Ssim, LossKind::Lp, LossKind::SmoothL1] {
        let cfg = LossConfig::with_kind(kind);
        for phi in [None, Some(adapters.as_slice())] {
            let whole = feat_loss(&student, &teacher, phi, &cfg).map_err(|e| e.to_string())?;
            let mut sum = 0.0;
            for i in 0..3 {
                let (a, b) = prepare_pair(
                    &student.scales()[i],
                    &teacher.scales()[i],
                    phi.map(|p| &p[i]),
                    cfg.normalize,
                )
                .map_err(|e| e.to_string())?;
                sum += compute_loss(&a, &b, &cfg).map_err(|e| e.to_string())?.scalar;
            }
            let per = feat_loss_per_scale(&student, &teacher, phi, &cfg).map_err(|e| e.to_string())?;
            d2 = d2.max((whole - sum).abs()).max((whole - per.iter().sum::<f64>()).abs());
        }
    }
    ensure(d2 <= 1e-14, format!("multi-scale sum deviates by {d2:e}"))?;
    for (f, d, l) in [(0.3, 1.25, 4.0), (0.0, 2.0, 1.0), (1.5, 0.0, 0.5)] {
        ensure(total_loss(f, d, l) == l * f + d, format!("total_loss({f}, {d}, {l})"))?;
    }
    Ok(format!("combined {d1:.1e}, multi-scale {d2:.1e}, total exact"))
}

fn separable_speed() -> Check {
    let window = WindowSpec::default().window().map_err(|e| e.to_string())?;
    let x = random_map([1, 8, 256, 256], &mut rng(900));
    let time = |f: &dyn Fn() -> ssimkd::Result<FeatureMap>| -> Result<(f64, FeatureMap), String> {
        let mut best = f64::INFINITY;
        let mut out = None;
        for _ in 0..3 {
            let start = Instant::now();
            let y = f().map_err(|e| e.to_string())?;
            best = best.min(start.elapsed().as_secs_f64());
            out = Some(y);
        }
        Ok((best, out.unwrap()))
    };
    let (ts, sep) = time(&|| separable_convolve(&x, &window))?;
    let (td, dir) = time(&|| direct_convolve(&x, &window))?;
    let diff = max_abs_diff(sep.as_slice(), dir.as_slice());
    let speedup = td / ts;
    ensure(diff <= 1e-12, format!("outputs differ by {diff:e}"))?;
    ensure(speedup >= 3.0, format!("speedup {speedup:.2}x"))?;
    Ok(format!("{speedup:.1}x faster ({:.1} ms vs {:.1} ms), diff {diff:.1e}", ts * 1e3, td * 1e3))
}

fn fdmp_robustness() -> Check {
    let mut r = rng(1000);
    let x = random_map([2, 3, 4, 5], &mut r).map(|v| (v - 0.5) * 1e3);
    let bytes = encode_fdmp(&x, DType::F64).map_err(|e| e.to_string())?;
    let y = decode_fdmp(&bytes).map_err(|e| e.to_string())?;
    ensure(
        x.dims() == y.dims() && x.as_slice().iter().zip(y.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits()),
        "round trip not bit-exact".into(),
    )?;

    let set = |pos: usize, v: &[u8]| {
        let mut b = bytes.clone();
        b[pos..pos + v.len()].copy_from_slice(v);
        b
    };
    let cases: Vec<(&str, Vec<u8>)> = vec![
        ("empty", vec![]),
        ("magic only", bytes[..4].to_vec()),
        ("header minus one byte", bytes[..27].to_vec()),
        ("magic XXXX", set(0, b"XXXX")),
        ("magic lowercase", set(0, b"fdmp")),
        ("version 0", set(4, &0u32.to_le_bytes())),
        ("version 2", set(4, &2u32.to_le_bytes())),
        ("dtype 2", set(8, &[2])),
        ("dtype 255", set(8, &[255])),
        ("reserved byte 9", set(9, &[1])),
        ("reserved byte 11", set(11, &[0x80])),
        ("zero batch", set(12, &0u32.to_le_bytes())),
        ("zero width", set(24, &0u32.to_le_bytes())),
        ("huge dims", set(12, &[0xff; 16])),
        ("dims too large for payload", set(16, &4u32.to_le_bytes())),
        ("header only", bytes[..28].to_vec()),
        ("payload minus one byte", bytes[..bytes.len() - 1].to_vec()),
        ("payload minus one element", bytes[..bytes.len() - 8].to_vec()),
        ("trailing byte", [bytes.clone(), vec![0]].concat()),
        ("dtype f32 with f64 payload", set(8, &[0])),
    ];
    ensure(cases.len() == 20, format!("{} fuzz cases", cases.len()))?;
    for (name, case) in &cases {
        let outcome = panic::catch_unwind(|| decode_fdmp(case)).map_err(|_| format!("{name}: panicked"))?;
        match outcome {
            Err(Error::Format { .. }) => {}
            other => return Err(format!("{name}: {other:?}")),
        }
    }
    Ok("bit-exact round trip; 20/20 corrupt inputs rejected".into())
}

type NamedCheck = (&'static str, fn() -> Check);

fn main() {
    let checks: [NamedCheck; 10] = [
        ("gradient correctness", gradient_correctness),
        ("oracle equivalence", oracle_equivalence),
        ("ssim bounds and identity", bounds_and_identity),
        ("affine and structure properties", affine_and_structure),
        ("worked values", worked_values),
        ("gradient distribution ssim vs l2", gradient_distribution),
        ("distillation convergence", distillation_convergence),
        ("composition exactness", composition_exactness),
        ("separable convolution speed", separable_speed),
        ("fdmp robustness", fdmp_robustness),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        let outcome = panic::catch_unwind(AssertUnwindSafe(check))
            .unwrap_or_else(|p| Err(format!("panicked: {:?}", p.downcast_ref::<String>())));
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", checks.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

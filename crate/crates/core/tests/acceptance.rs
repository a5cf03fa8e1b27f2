//! One line per acceptance criterion, each at its stated tolerance and time
//! budget. Run with `--nocapture` to see the report.

mod common;

use std::time::{Duration, Instant};

use common::{fd_coord, layer_case, layer_fd_error, normalized, rel_err, Quadratic, KINDS};
use dss_lab::analysis::{amplification_ratio, histograms_csv, summaries};
use dss_lab::equivalence::{equivalence_trace, QuadraticProbe};
use dss_lab::nn::wn_backward;
use dss_lab::optim::{dss_step, sgd_step, suppressed_gradient, DssConfig, ParamState, WeightMode};
use dss_lab::tensor::{frobenius_norm, inner_product, Tensor};
use dss_lab::uda::{run_experiment_detailed, run_single, Condition, DataConfig, DomainData, DomainShift, ExperimentConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

struct Outcome {
    pass: bool,
    detail: String,
}

fn gaussian(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn judge(id: usize, budget: Duration, soft: bool, check: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let out = check();
    let took = start.elapsed();
    let pass = out.pass && took < budget;
    println!(
        "criterion {id}: {} {} time={:.2}s budget={}s{}",
        if pass { "PASS" } else { "FAIL" },
        out.detail,
        took.as_secs_f64(),
        budget.as_secs(),
        if soft { " (soft)" } else { "" }
    );
    pass || soft
}

fn orthogonality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.gen_range(1..=64);
        let w = Tensor::from_slice(&gaussian(n, &mut rng));
        let g = Tensor::from_slice(&gaussian(n, &mut rng));
        let u = suppressed_gradient(&g, &w, 1.0).unwrap();
        let scale = frobenius_norm(&u).unwrap() * frobenius_norm(&w).unwrap();
        if scale > 0.0 {
            worst = worst.max(inner_product(&u, &w).unwrap().abs() / scale);
        }
    }
    Outcome {
        pass: worst <= 1e-12,
        detail: format!("cases=1000 worst |<u,w>|/(|u||w|)={worst:.2e} tol=1e-12"),
    }
}

fn reduces_to_sgd() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut mismatched = 0;
    let mut worst: f64 = 0.0;
    for _ in 0..500 {
        let n = rng.gen_range(1..=64);
        let w = gaussian(n, &mut rng);
        let g = gaussian(n, &mut rng);
        let lr = rng.gen_range(1e-4..1.0);
        let mut a = ParamState::new(Tensor::from_slice(&w), WeightMode::Dss).unwrap();
        let mut b = ParamState::new(Tensor::from_slice(&w), WeightMode::Plain).unwrap();
        a.grad = Tensor::from_slice(&g);
        b.grad = Tensor::from_slice(&g);
        dss_step(&mut a, &DssConfig { lambda: 0.0, lr, ..DssConfig::default() }).unwrap();
        sgd_step(&mut b, lr).unwrap();
        if a.weight.data().iter().zip(b.weight.data()).any(|(x, y)| x.to_bits() != y.to_bits()) {
            mismatched += 1;
        }
    }
    for _ in 0..500 {
        let n = rng.gen_range(2..=64);
        let w = Tensor::from_slice(&gaussian(n, &mut rng));
        let raw = Tensor::from_slice(&gaussian(n, &mut rng));
        // Gram-Schmidt in exact-enough arithmetic: the residual is the oracle
        let c = inner_product(&raw, &w).unwrap() / inner_product(&w, &w).unwrap();
        let mut g = raw.clone();
        g.axpy(-c, &w).unwrap();
        let lambda = rng.gen_range(0.0..=1.0);
        let lr = rng.gen_range(1e-4..1.0);
        let mut a = ParamState::new(w.clone(), WeightMode::Dss).unwrap();
        let mut b = ParamState::new(w.clone(), WeightMode::Plain).unwrap();
        a.grad = g.clone();
        b.grad = g.clone();
        dss_step(&mut a, &DssConfig { lambda, lr, ..DssConfig::default() }).unwrap();
        sgd_step(&mut b, lr).unwrap();
        let d = a.weight.max_abs_diff(&b.weight).unwrap();
        worst = worst.max(d / frobenius_norm(&b.weight).unwrap().max(1.0));
    }
    Outcome {
        pass: mismatched == 0 && worst <= 1e-12,
        detail: format!("lambda=0 bit mismatches={mismatched}/500, g orthogonal to w worst={worst:.2e}/500 tol=1e-12"),
    }
}

fn wn_finite_difference() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.gen_range(2..=64);
        let q = Quadratic::random(n, &mut rng);
        let omega: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let analytic = wn_backward(&Tensor::from_slice(&omega), &Tensor::from_slice(&q.gradient(&normalized(&omega)))).unwrap();
        let mut f = |w: &[f64]| q.value(&normalized(w));
        let fd: Vec<f64> = (0..n).map(|i| fd_coord(&mut f, &omega, i)).collect();
        worst = worst.max(rel_err(analytic.data(), &fd));
    }
    Outcome {
        pass: worst < 1e-5,
        detail: format!("cases=100 worst rel err={worst:.2e} tol=1e-5"),
    }
}

fn norm_growth() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 24;
    let lr = 0.05;
    let mut omega = ParamState::new(Tensor::from_slice(&gaussian(n, &mut rng)), WeightMode::WeightNorm).unwrap();
    let mut worst: f64 = 0.0;
    for _ in 0..500 {
        let before = omega.weight.clone();
        omega.grad = wn_backward(&before, &Tensor::from_slice(&gaussian(n, &mut rng))).unwrap();
        let expected = lr * lr * inner_product(&omega.grad, &omega.grad).unwrap();
        sgd_step(&mut omega, lr).unwrap();
        // ‖a‖² − ‖b‖² as Σ(a−b)(a+b), so the check is not swamped by cancellation
        let growth: f64 = omega.weight.data().iter().zip(before.data()).map(|(a, b)| (a - b) * (a + b)).sum();
        worst = worst.max((growth - expected).abs() / expected);
    }
    Outcome {
        pass: worst <= 1e-10,
        detail: format!("steps=500 worst rel err={worst:.2e} tol=1e-10"),
    }
}

fn equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut worst, mut monotone) = (0.0f64, true);
    let mut ladders = Vec::new();
    for _ in 0..5 {
        let init = Tensor::new(vec![4, 4], gaussian(16, &mut rng)).unwrap();
        let probe = QuadraticProbe::seeded(&[4, 4], rng.gen()).unwrap();
        worst = worst.max(equivalence_trace(&init, &probe, 200, 1e-3).unwrap().max_direction_deviation);
        let ladder: Vec<f64> = [1e-2, 5e-3, 2.5e-3]
            .iter()
            .map(|&lr| equivalence_trace(&init, &probe, 200, lr).unwrap().max_direction_deviation)
            .collect();
        monotone &= ladder.windows(2).all(|w| w[1] <= w[0]);
        ladders.push(ladder);
    }
    let shown: Vec<String> = ladders
        .iter()
        .map(|l| l.iter().map(|d| format!("{d:.1e}")).collect::<Vec<_>>().join(">"))
        .collect();
    Outcome {
        pass: worst <= 1e-3 && monotone,
        detail: format!("worst deviation at lr=1e-3 {worst:.2e} rad tol=1e-3; ladders {}", shown.join(" ")),
    }
}

fn layer_gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut parts = Vec::new();
    let mut pass = true;
    for kind in KINDS {
        let mut worst: f64 = 0.0;
        for case in 0..20 {
            let (mut layer, input) = layer_case(kind, case, &mut rng);
            worst = worst.max(layer_fd_error(&mut layer, &input, &mut rng));
        }
        pass &= worst < 1e-5;
        parts.push(format!("{kind:?}={worst:.1e}"));
    }
    Outcome {
        pass,
        detail: format!("20 configs per kind, {} tol=1e-5", parts.join(" ")),
    }
}

fn source_only_learns() -> Outcome {
    let cfg = ExperimentConfig {
        data: DataConfig {
            shift: DomainShift::identity(),
            ..DataConfig::default()
        },
        pretrain_epochs: 30,
        adapt: false,
        ..ExperimentConfig::default()
    };
    let mut best = Vec::new();
    for seed in [1, 2, 3] {
        let data = DomainData::generate(&cfg.data.spec(seed), cfg.data.test_samples_per_class).unwrap();
        let report = run_single(&cfg, Condition::SourceOnly, seed, &data).unwrap().report;
        best.push(report.epochs.iter().map(|e| e.source_accuracy).fold(0.0, f64::max));
    }
    Outcome {
        pass: best.iter().all(|&a| a >= 0.95),
        detail: format!("best source accuracy per seed {best:.3?} need>=0.95"),
    }
}

fn mean_target(out: &dss_lab::uda::ExperimentOutput, c: Condition) -> f64 {
    let accs: Vec<f64> = out.reports.iter().filter(|r| r.condition == c).map(|r| r.final_target_accuracy).collect();
    accs.iter().sum::<f64>() / accs.len() as f64
}

fn adaptation_ordering(out: &dss_lab::uda::ExperimentOutput) -> Outcome {
    let (so, uda, both) = (
        mean_target(out, Condition::SourceOnly),
        mean_target(out, Condition::Uda),
        mean_target(out, Condition::UdaDss),
    );
    Outcome {
        pass: both >= uda && uda >= so && both - so >= 0.05,
        detail: format!(
            "mean target acc so={so:.3} so+dss={:.3} uda={uda:.3} uda+dss={both:.3}",
            mean_target(out, Condition::SourceOnlyDss)
        ),
    }
}

fn amplification(out: &dss_lab::uda::ExperimentOutput) -> Outcome {
    let stats = |c: Condition, s: u64| &out.grad_stats.iter().find(|g| g.condition == c && g.seed == s).unwrap().records;
    let (mut shallow, mut deep, mut raw) = (0, 0, Vec::new());
    let seeds = [1, 2, 3];
    for s in seeds {
        let (dss, base) = (stats(Condition::UdaDss, s), stats(Condition::Uda, s));
        let r0 = amplification_ratio(dss, base, 0).unwrap();
        let r2 = amplification_ratio(dss, base, 2).unwrap();
        shallow += usize::from(r0 > 1.0);
        deep += usize::from(r2 < 1.0);
        raw.push(format!("seed {s}: L0={r0:.3} L2={r2:.3}"));
    }
    Outcome {
        pass: shallow >= 2 && deep >= 2,
        detail: format!("shallow>1 in {shallow}/3, deep<1 in {deep}/3 ({})", raw.join(", ")),
    }
}

fn determinism() -> Outcome {
    let cfg = ExperimentConfig {
        data: DataConfig {
            samples_per_class: 12,
            test_samples_per_class: 6,
            ..DataConfig::default()
        },
        pretrain_epochs: 2,
        adapt_epochs: 2,
        seeds: vec![7, 8],
        record_every: 4,
        ..ExperimentConfig::default()
    };
    let render = |jobs: usize| {
        let out = run_experiment_detailed(&cfg, jobs).unwrap();
        let mut text = serde_json::to_string(&out.reports).unwrap();
        for g in &out.grad_stats {
            text.push_str(&histograms_csv(&g.records));
            text.push_str(&serde_json::to_string(&summaries(&g.records)).unwrap());
        }
        text
    };
    let (a, b, c) = (render(1), render(1), render(3));
    Outcome {
        pass: a == b && a == c,
        detail: format!("{} bytes of reports and gradient stats, repeat identical={} jobs-independent={}", a.len(), a == b, a == c),
    }
}

#[test]
fn acceptance() {
    let secs = Duration::from_secs;
    let mut ok = true;
    ok &= judge(1, secs(1), false, orthogonality);
    ok &= judge(2, secs(60), false, reduces_to_sgd);
    ok &= judge(3, secs(60), false, wn_finite_difference);
    ok &= judge(4, secs(60), false, norm_growth);
    ok &= judge(5, secs(10), false, equivalence);
    ok &= judge(6, secs(30), false, layer_gradients);
    ok &= judge(7, secs(300), false, source_only_learns);

    let start = Instant::now();
    let grid = run_experiment_detailed(&ExperimentConfig::default(), std::thread::available_parallelism().map_or(1, |n| n.get())).unwrap();
    let grid_time = start.elapsed();
    ok &= judge(8, secs(900).saturating_sub(grid_time), false, || adaptation_ordering(&grid));
    println!("  default grid trained in {:.1}s", grid_time.as_secs_f64());
    ok &= judge(9, secs(60), true, || amplification(&grid));
    ok &= judge(10, secs(120), false, determinism);
    assert!(ok, "an acceptance criterion failed; see the lines above");
}

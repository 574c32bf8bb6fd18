//! One PASS/FAIL line per acceptance criterion, at the stated tolerances.
//! Runs without the libtest harness so the report reads top to bottom.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use winpose::config::{FusionMethod, SwinConfig};
use winpose::profile::{reference_table, ProfileRow, ProfileTable, FLOP_TOLERANCE, PARAM_TOLERANCE};
use winpose::selfcheck::{
    attention_deviation, gradient_suite, metric_mismatches, oks_spot_error, perfect_prediction_metrics,
    pipeline_identity_error, round_trip_failures, ATTENTION_DENSE_TOL, ATTENTION_REGION_TOL, GRADIENT_SEEDS,
    GRADIENT_TOL, METRIC_SCENES,
};
use winpose::train::{toy_overfit, TOY_STEPS};
use winpose::weights::{save_weights, Dtype};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn model_size() -> Outcome {
    let start = Instant::now();
    let rows = reference_table();
    let elapsed = start.elapsed();
    println!("{}", ProfileTable(&rows));
    let mut misses = Vec::new();
    for r in &rows {
        let (dp, df) = r.deviation().expect("reference rows");
        if dp.abs() > PARAM_TOLERANCE || df.abs() > FLOP_TOLERANCE {
            misses.push(format!("{}@{} {} ({:+.1}% params, {:+.1}% GFLOPs)", r.label, r.input, r.fusion, 100.0 * dp, 100.0 * df));
        }
    }
    let ordered = rows.chunks(2).all(|pair| pair[0].params > pair[1].params && pair[0].gflops > pair[1].gflops);
    let fast = elapsed < Duration::from_secs(1);
    outcome(
        misses.is_empty() && ordered && fast,
        format!(
            "{}/{} rows within ±{:.0}%/±{:.0}%, concat > sum on every row: {ordered}, {elapsed:.1?}{}",
            rows.len() - misses.len(),
            rows.len(),
            100.0 * PARAM_TOLERANCE,
            100.0 * FLOP_TOLERANCE,
            if misses.is_empty() { String::new() } else { format!("; outside: {}", misses.join(", ")) }
        ),
    )
}

fn attention() -> Outcome {
    let (dense, region) = attention_deviation(GRADIENT_SEEDS).unwrap();
    outcome(
        dense < ATTENTION_DENSE_TOL && region < ATTENTION_REGION_TOL,
        format!("dense {dense:.2e} (< {ATTENTION_DENSE_TOL:.0e}), shifted {region:.2e} (< {ATTENTION_REGION_TOL:.0e})"),
    )
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let (ops, model) = gradient_suite(GRADIENT_SEEDS).unwrap();
    let elapsed = start.elapsed();
    outcome(
        ops.max_rel_error < GRADIENT_TOL && model.max_rel_error < GRADIENT_TOL && elapsed < Duration::from_secs(120),
        format!(
            "ops {:.2e} ({} checks), toy model {:.2e} ({} checks), {GRADIENT_SEEDS} seeds, {elapsed:.1?}",
            ops.max_rel_error, ops.checks, model.max_rel_error, model.checks
        ),
    )
}

fn round_trips() -> Outcome {
    let failed: Vec<&str> = (0..3).flat_map(|seed| round_trip_failures(seed).unwrap()).collect();
    outcome(
        failed.is_empty(),
        if failed.is_empty() {
            "partition, shift, weights (f64 exact, f32 idempotent), predictions: bit-exact".into()
        } else {
            format!("broken: {}", failed.join(", "))
        },
    )
}

fn learning() -> Outcome {
    let start = Instant::now();
    let mut details = Vec::new();
    let mut passed = true;
    for fusion in [FusionMethod::Sum, FusionMethod::Concat] {
        let run = toy_overfit(fusion, 0, TOY_STEPS).unwrap();
        let ratio = run.loss_ratio();
        passed &= ratio < 0.01 && run.mean_error_px < 2.0;
        details.push(format!("{fusion}: loss ratio {ratio:.4} (< 0.01), keypoint error {:.2} px (< 2)", run.mean_error_px));
        if fusion == FusionMethod::Sum {
            let again = toy_overfit(fusion, 0, TOY_STEPS).unwrap();
            let same = again.history == run.history
                && save_weights(&again.model, Dtype::F64) == save_weights(&run.model, Dtype::F64);
            passed &= same;
            details.push(format!("rerun bit-identical: {same}"));
        }
    }
    let elapsed = start.elapsed();
    passed &= elapsed < Duration::from_secs(600);
    outcome(passed, format!("{}, {elapsed:.0?}", details.join("; ")))
}

fn metrics() -> Outcome {
    let bad = metric_mismatches(METRIC_SCENES, 0).unwrap();
    let (ap, ar) = perfect_prediction_metrics().unwrap();
    let spot = oks_spot_error().unwrap();
    outcome(
        bad == 0 && ap == 1.0 && ar == 1.0 && spot < 1e-12,
        format!("{bad}/{METRIC_SCENES} scenes differ from brute force, perfect AP {ap} AR {ar}, exp(-0.5) spot {spot:.1e}"),
    )
}

fn pipeline() -> Outcome {
    let worst = pipeline_identity_error(500, 0).unwrap();
    outcome(worst <= 0.5, format!("worst axis error {worst:.3} heatmap px (<= 0.5) over 500 random crops"))
}

fn ablation_shape() -> Outcome {
    let row = |input, fusion| ProfileRow::new("swin-l", &SwinConfig::swin_l(input, fusion), None);
    let rows = [
        row(224, FusionMethod::Concat),
        row(224, FusionMethod::Sum),
        row(384, FusionMethod::Concat),
        row(384, FusionMethod::Sum),
    ];
    println!("{}", ProfileTable(&rows));
    let expected = 204.5 / 24.2;
    let ratio = rows[2].gflops / rows[0].gflops;
    let ratio_ok = (ratio / expected - 1.0).abs() <= 0.20;
    let gap = (rows[0].params as f64 / rows[1].params as f64 - 1.0).abs();
    outcome(
        ratio_ok && gap < 0.01,
        format!(
            "384/224 GFLOPs ratio {ratio:.2} (expected {expected:.2} ± 20%), concat/sum params gap {:.2}% (< 1%)",
            100.0 * gap
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("1 model size", model_size),
        ("2 attention oracle", attention),
        ("3 gradient suite", gradients),
        ("4 round trips", round_trips),
        ("5 desk-scale learning", learning),
        ("6 metric correctness", metrics),
        ("7 pipeline identity", pipeline),
        ("8 ablation shape", ablation_shape),
    ];
    let mut lines = Vec::new();
    for (name, check) in criteria {
        let o = check();
        let line = format!("{} {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
        println!("{line}");
        lines.push((o.passed, line));
    }
    println!("\nsummary");
    for (_, line) in &lines {
        println!("  {line}");
    }
    let failed = lines.iter().filter(|(p, _)| !p).count();
    println!("{} of {} criteria passed", lines.len() - failed, lines.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

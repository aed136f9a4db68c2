//! Acceptance run: one PASS/FAIL line per criterion, with the measured
//! quantity, its tolerance and the runtime limit.
//!
//! The training criteria (5 to 7) take several minutes on one core.

mod common;

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sedloss::data::{
    generate_dataset, tut_like_preset_with, Dataset, DEFAULT_FEATURE_DIM, TUT_DURATIONS,
};
use sedloss::gradcheck::{check_loss, check_model, LOSS_NAMES, LOSS_TOLERANCE, MODEL_TOLERANCE};
use sedloss::losses::{
    afl_loss, bce_loss, class_frequency_counts, fbtl_loss, ifl_loss, srl_loss, LossSpec,
};
use sedloss::metrics::{evaluate, roc_auc, AucMode, EvalConfig};
use sedloss::trainer::{compare_losses, sweep, ExperimentResult, SweepAxis, TrainConfig};
use sedloss::{LabelGrid, PredictionGrid};

use common::{oracle_fscores, oracle_macro_auc, oracle_micro_auc, random_scored_clips};

const REDUCTION_TOL: f64 = 1e-12;
const REDUCTION_CASES: usize = 1000;
const GRAD_CASES: usize = 50;
const FBTL_CASES: usize = 10_000;
const METRIC_TOL: f64 = 1e-12;
const METRIC_CASES: usize = 100;
const TREND_SEEDS: usize = 10;
const SWEEP_SEEDS: usize = 5;
const DATA_SEED: u64 = 0;
const TRAIN_CLIPS: usize = 200;
const DEV_CLIPS: usize = 50;
const STATS_CLIPS: usize = 500;
const ACTIVE_FRACTION_RANGE: (f64, f64) = (0.03, 0.055);
const DURATION_REL_TOL: f64 = 0.25;
const MIN_INSTANCES: u64 = 50;

struct Outcome {
    criterion: usize,
    title: &'static str,
    passed: bool,
    detail: String,
    elapsed: Duration,
    limit: Option<Duration>,
}

impl Outcome {
    fn line(&self) -> String {
        let within = self.limit.is_none_or(|l| self.elapsed <= l);
        let limit = self.limit.map_or(String::new(), |l| {
            format!(" (limit {:.0} s)", l.as_secs_f64())
        });
        format!(
            "{} criterion {} {}: {}; {:.2} s{}",
            if self.passed && within {
                "PASS"
            } else {
                "FAIL"
            },
            self.criterion,
            self.title,
            self.detail,
            self.elapsed.as_secs_f64(),
            limit
        )
    }

    fn ok(&self) -> bool {
        self.passed && self.limit.is_none_or(|l| self.elapsed <= l)
    }
}

fn timed<F>(criterion: usize, title: &'static str, limit: Option<u64>, f: F) -> Outcome
where
    F: FnOnce() -> (bool, String),
{
    let start = Instant::now();
    let (passed, detail) = f();
    let outcome = Outcome {
        criterion,
        title,
        passed,
        detail,
        elapsed: start.elapsed(),
        limit: limit.map(Duration::from_secs),
    };
    println!("{}", outcome.line());
    outcome
}

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn criterion_1() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..REDUCTION_CASES {
        let (frames, classes) = (rng.gen_range(1..=20), rng.gen_range(1..=5));
        let y = PredictionGrid::new(Array2::from_shape_fn((frames, classes), |_| {
            rng.gen::<f64>()
        }))
        .unwrap();
        let z = LabelGrid::new(Array2::from_shape_fn((frames, classes), |_| {
            u8::from(rng.gen_bool(0.3))
        }))
        .unwrap();
        let bce = bce_loss(&y, &z).unwrap();
        let freq = class_frequency_counts([&z]).unwrap();
        for other in [
            afl_loss(&y, &z, 0.0, 0.0).unwrap(),
            srl_loss(&y, &z, 1.0, 1.0).unwrap(),
            ifl_loss(&y, &z, 0.0, 500.0, &freq).unwrap(),
        ] {
            worst = worst
                .max((other.value - bce.value).abs())
                .max(max_abs_diff(&other.grad, &bce.grad));
        }
    }
    (
        worst < REDUCTION_TOL,
        format!("{REDUCTION_CASES} cases, max_abs_diff={worst:.2e} (tol {REDUCTION_TOL:.0e})"),
    )
}

fn criterion_2() -> (bool, String) {
    let mut parts = Vec::new();
    let mut ok = true;
    for name in LOSS_NAMES {
        let r = check_loss(name, GRAD_CASES, 2).unwrap();
        ok &= r.passed();
        parts.push(format!("{name}={:.1e}", r.max_rel_err));
    }
    let mut model_worst: f64 = 0.0;
    for spec in [
        LossSpec::Bce,
        LossSpec::srl(0.5),
        LossSpec::ifl(1.0),
        LossSpec::afl(0.0625, 1.0),
        LossSpec::fbtl(0.6, 0.4, 0.001),
    ] {
        let r = check_model(&spec, 10, 3).unwrap();
        ok &= r.passed();
        model_worst = model_worst.max(r.max_rel_err);
    }
    parts.push(format!("model={model_worst:.1e}"));
    (
        ok,
        format!(
            "max rel err {} (tol {LOSS_TOLERANCE:.0e}, model {MODEL_TOLERANCE:.0e})",
            parts.join(" ")
        ),
    )
}

fn criterion_3() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for _ in 0..FBTL_CASES {
        let clips = rng.gen_range(1..=3);
        let (frames, classes) = (rng.gen_range(1..=10), rng.gen_range(1..=4));
        let extreme = rng.gen_bool(0.2);
        let (ys, zs): (Vec<_>, Vec<_>) = (0..clips)
            .map(|_| {
                let y = Array2::from_shape_fn((frames, classes), |_| {
                    if extreme {
                        f64::from(u8::from(rng.gen_bool(0.5)))
                    } else {
                        rng.gen::<f64>()
                    }
                });
                let z = Array2::from_shape_fn((frames, classes), |_| u8::from(rng.gen_bool(0.3)));
                (PredictionGrid::new(y).unwrap(), LabelGrid::new(z).unwrap())
            })
            .unzip();
        let alpha: f64 = rng.gen();
        let gamma = rng.gen_range(0.0..3.0);
        let eta = 10f64.powf(rng.gen_range(-6.0..1.0));
        let v = fbtl_loss(&ys, &zs, alpha, 1.0 - alpha, gamma, eta)
            .unwrap()
            .value;
        lo = lo.min(v);
        hi = hi.max(v);
    }
    (
        lo >= 0.0 && hi < 1.0,
        format!(
            "{FBTL_CASES} cases, min value {lo:.3e}, 1 - max value {:.3e} (required value in [0, 1))",
            1.0 - hi
        ),
    )
}

fn criterion_4() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = EvalConfig::default();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    while checked < METRIC_CASES {
        let clips = rng.gen_range(1..=4);
        let frames = rng.gen_range(1..=200 / clips);
        let classes = rng.gen_range(1..=5);
        let (y, z) = random_scored_clips(&mut rng, clips, frames, classes);
        let (Some(micro_auc), Some(macro_auc)) =
            (oracle_micro_auc(&y, &z), oracle_macro_auc(&y, &z))
        else {
            continue;
        };
        let r = evaluate(&y, &z, &cfg).unwrap();
        let (micro_f, macro_f) = oracle_fscores(&y, &z, cfg.threshold);
        for (a, b) in [
            (r.micro_f, micro_f),
            (r.macro_f, macro_f),
            (r.micro_auc, micro_auc),
            (r.macro_auc, macro_auc),
        ] {
            worst = worst.max((a - b).abs());
        }
        checked += 1;
    }
    let tie_y = PredictionGrid::new(Array2::from_elem((12, 3), 0.42)).unwrap();
    let tie_z = LabelGrid::new(Array2::from_shape_fn((12, 3), |(n, m)| {
        u8::from((n + m) % 2 == 0)
    }))
    .unwrap();
    let tie = roc_auc(&[tie_y], &[tie_z], AucMode::Micro).unwrap();
    (
        worst < METRIC_TOL && tie == 0.5,
        format!("{METRIC_CASES} instances, max diff={worst:.2e} (tol {METRIC_TOL:.0e}), all-tie AUC={tie}"),
    )
}

fn trend_data() -> (Dataset, Dataset, f64) {
    let ds = generate_dataset(&tut_like_preset_with(
        DEFAULT_FEATURE_DIM,
        TRAIN_CLIPS + DEV_CLIPS,
        DATA_SEED,
    ))
    .unwrap();
    let active = ds
        .labels()
        .map(|z| z.values().iter().filter(|&&v| v == 1).count())
        .sum::<usize>() as f64;
    let cells = ((TRAIN_CLIPS + DEV_CLIPS) * ds.spec.frames_per_clip() * ds.n_classes()) as f64;
    let (train, dev) = ds.split_tail(DEV_CLIPS).unwrap();
    (train, dev, active / cells)
}

fn medians(res: &ExperimentResult, row: usize) -> (f64, f64) {
    (res.rows[row].micro_f.median, res.rows[row].macro_f.median)
}

fn criterion_5(
    train: &Dataset,
    dev: &Dataset,
    fraction: f64,
) -> ((bool, String), ExperimentResult) {
    let base = TrainConfig::default();
    let cfgs = [
        base.with_loss(LossSpec::Bce),
        base.with_loss(LossSpec::afl(0.0, 1.414)),
        base.with_loss(LossSpec::afl(0.0625, 1.0)),
    ];
    let res = compare_losses(&cfgs, TREND_SEEDS, train, dev, 1).unwrap();
    let (bce_mi, bce_ma) = medians(&res, 0);
    let mut ok = true;
    let mut parts = vec![format!(
        "active fraction {fraction:.4}; median micro/macro F: bce {bce_mi:.4}/{bce_ma:.4}"
    )];
    for row in 1..3 {
        let (mi, ma) = medians(&res, row);
        ok &= mi > bce_mi && ma > bce_ma;
        parts.push(format!("{} {mi:.4}/{ma:.4}", res.rows[row].method));
    }
    ((ok, parts.join(", ")), res)
}

fn criterion_6(train: &Dataset, dev: &Dataset) -> (bool, String) {
    let values = [1.0, 0.5, 0.3535, 0.25, 0.125];
    let res = sweep(
        &TrainConfig::default(),
        SweepAxis::SrlBeta,
        &values,
        SWEEP_SEEDS,
        train,
        dev,
        1,
    )
    .unwrap();
    let means: Vec<f64> = res.rows.iter().map(|r| r.micro_f.mean).collect();
    let ok = means[1..].iter().any(|&m| m >= means[0]);
    let listing = values
        .iter()
        .zip(&means)
        .map(|(b, m)| format!("beta={b}: {m:.4}"))
        .collect::<Vec<_>>()
        .join(", ");
    (ok, format!("mean micro-F {listing}"))
}

fn criterion_7(train: &Dataset, dev: &Dataset, trend: &ExperimentResult) -> (bool, String) {
    let gammas = [0.25, 0.5, 1.0];
    let cfgs: Vec<_> = gammas
        .iter()
        .map(|&g| TrainConfig::default().with_loss(LossSpec::ifl(g)))
        .collect();
    let res = compare_losses(&cfgs, TREND_SEEDS, train, dev, 1).unwrap();
    let bce = trend.rows[0].micro_f.median;
    let afl_gain = trend.rows[1].micro_f.median - bce;
    let mut ok = afl_gain > 0.0;
    let mut parts = vec![format!("AFL(0,1.414) gain {afl_gain:+.4}")];
    for (g, row) in gammas.iter().zip(&res.rows) {
        let change = row.micro_f.median - bce;
        ok &= change < afl_gain;
        parts.push(format!(
            "IFL({g}) change {change:+.4} (|change| {:.4})",
            change.abs()
        ));
    }
    (ok, parts.join(", "))
}

fn run_cli(dir: &Path, args: &[&str]) {
    let o = Command::new(env!("CARGO_BIN_EXE_sedloss"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap();
    assert!(
        o.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&o.stderr)
    );
}

fn dir_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

fn criterion_8() -> (bool, String) {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    run_cli(
        dir,
        &["gen-data", "--clips", "20", "--seed", "8", "--out", "data"],
    );
    let common = ["--data", "data", "--epochs", "3", "--dev-clips", "5"];
    for rep in ["a", "b"] {
        let train_out = format!("{rep}/train");
        let sweep_out = format!("{rep}/sweep");
        let mut args = vec!["train", "--loss", "afl:0.0625:1.0", "--out", &train_out];
        args.extend(common);
        run_cli(dir, &args);
        let mut args = vec![
            "sweep",
            "--axis",
            "afl.zeta",
            "--values",
            "0,1,1.414",
            "--seeds",
            "2",
            "--workers",
            "2",
            "--out",
            &sweep_out,
        ];
        args.extend(common);
        run_cli(dir, &args);
    }
    let mut compared = 0;
    let mut ok = true;
    for sub in ["train", "sweep"] {
        let a = dir_files(&dir.join("a").join(sub));
        let b = dir_files(&dir.join("b").join(sub));
        ok &= a == b;
        compared += a.len();
    }
    (
        ok,
        format!("{compared} output files byte-identical across two invocations: {ok}"),
    )
}

/// Mean run length of active frames per class, recounted from the labels.
fn recount_mean_durations(ds: &Dataset) -> Vec<f64> {
    let classes = ds.n_classes();
    let (mut frames, mut runs) = (vec![0u64; classes], vec![0u64; classes]);
    for z in ds.labels() {
        let v = z.values();
        for m in 0..classes {
            for n in 0..v.nrows() {
                if v[[n, m]] == 1 {
                    frames[m] += 1;
                    if n == 0 || v[[n - 1, m]] == 0 {
                        runs[m] += 1;
                    }
                }
            }
        }
    }
    frames
        .iter()
        .zip(&runs)
        .map(|(&f, &r)| {
            if r == 0 {
                0.0
            } else {
                f as f64 / r as f64 * ds.spec.frame_hop_s
            }
        })
        .collect()
}

fn criterion_9() -> (bool, String) {
    let spec = tut_like_preset_with(DEFAULT_FEATURE_DIM, STATS_CLIPS, DATA_SEED);
    let table: [(&str, f64); 25] = [
        ("object banging", 0.78),
        ("object impact", 0.35),
        ("object rustling", 2.24),
        ("object snapping", 0.46),
        ("object squeaking", 0.74),
        ("bird singing", 7.63),
        ("brakes squeaking", 1.65),
        ("breathing", 0.43),
        ("car", 6.88),
        ("children", 6.87),
        ("cupboard", 0.65),
        ("cutlery", 0.74),
        ("dishes", 1.24),
        ("drawer", 0.80),
        ("fan", 29.99),
        ("glass jingling", 0.80),
        ("keyboard typing", 0.21),
        ("large vehicle", 14.68),
        ("mouse clicking", 0.14),
        ("mouse wheeling", 0.16),
        ("people talking", 4.09),
        ("people walking", 6.63),
        ("washing dishes", 4.15),
        ("water tap running", 5.92),
        ("wind blowing", 6.09),
    ];
    let mut ok = TUT_DURATIONS == table && spec.n_classes() == 25;
    let ds = generate_dataset(&spec).unwrap();
    let active = ds
        .labels()
        .map(|z| z.values().iter().filter(|&&v| v == 1).count())
        .sum::<usize>();
    let fraction = active as f64 / (STATS_CLIPS * spec.frames_per_clip() * 25) as f64;
    ok &= (ACTIVE_FRACTION_RANGE.0..=ACTIVE_FRACTION_RANGE.1).contains(&fraction);
    let measured = recount_mean_durations(&ds);
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    for (m, (_, mean)) in table.iter().enumerate() {
        if ds.instances[m] >= MIN_INSTANCES {
            checked += 1;
            worst = worst.max((measured[m] - mean).abs() / mean);
        }
    }
    ok &= checked > 0 && worst <= DURATION_REL_TOL;
    (
        ok,
        format!(
            "active fraction {fraction:.4} (required [{}, {}]); {checked} classes with >= {MIN_INSTANCES} \
             instances, worst duration rel err {worst:.3} (tol {DURATION_REL_TOL})",
            ACTIVE_FRACTION_RANGE.0, ACTIVE_FRACTION_RANGE.1
        ),
    )
}

#[test]
fn acceptance_criteria() {
    let mut outcomes = vec![
        timed(1, "reduction identities", Some(5), criterion_1),
        timed(2, "gradient suite", Some(30), criterion_2),
        timed(3, "FBTL range", Some(5), criterion_3),
        timed(4, "metrics oracle", None, criterion_4),
    ];
    let (train, dev, fraction) = trend_data();
    let mut trend = None;
    outcomes.push(timed(5, "AFL beats BCE", Some(600), || {
        let (r, res) = criterion_5(&train, &dev, fraction);
        trend = Some(res);
        r
    }));
    outcomes.push(timed(6, "SRL beta sweep", Some(600), || {
        criterion_6(&train, &dev)
    }));
    let trend = trend.unwrap();
    outcomes.push(timed(7, "IFL weak effect", None, || {
        criterion_7(&train, &dev, &trend)
    }));
    outcomes.push(timed(8, "determinism", None, criterion_8));
    outcomes.push(timed(9, "dataset statistics", None, criterion_9));

    let passed = outcomes.iter().filter(|o| o.ok()).count();
    println!("{passed} of {} criteria passed", outcomes.len());
    let failed: Vec<String> = outcomes
        .iter()
        .filter(|o| !o.ok())
        .map(Outcome::line)
        .collect();
    assert!(failed.is_empty(), "failed criteria:\n{}", failed.join("\n"));
}

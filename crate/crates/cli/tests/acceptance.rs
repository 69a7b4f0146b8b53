//! Acceptance suite. Every criterion prints one `PASS` or `FAIL` line.
//!
//! Criteria 6 to 8 compare training outcomes across strategies. They always
//! report their verdict; they only fail the test run when
//! `GSGLAB_STRICT_ACCEPTANCE=1`, since at this scale their outcome is a
//! finding about the method rather than a check of the code.

use std::collections::HashMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use gsglab::commands::{MANIFEST_FILE, METRICS_FILE};
use gsglab_core::autodiff::Graph;
use gsglab_core::data::{generate, Dataset, GeneratorConfig};
use gsglab_core::gradcheck::check_stack_loss;
use gsglab_core::nn::{ArchSpec, EncoderStack, MlpSpec};
use gsglab_core::objective::{
    case_loss, strategy_loss, Case, LossStrategy, PairProjections, SelectionInput, View, ViewSet,
};
use gsglab_core::rng::{stream, Stream};
use gsglab_core::train::{steps_per_epoch, train_run_observed, Algorithm, TrainConfig};
use gsglab_core::Matrix;
use rand::Rng as _;
use rayon::prelude::*;

const FD_STEP: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;
const GRAD_NETWORKS: u64 = 12;
const GRAD_BUDGET: Duration = Duration::from_secs(60);
const ORACLE_QUADS: u64 = 1000;
const ORACLE_BUDGET: Duration = Duration::from_secs(5);
const UNIFORM_DRAWS: u64 = 10_000;
/// Upper 1% point of chi-square with 3 degrees of freedom.
const CHI2_3DOF_99: f64 = 11.345;
const SEEDS: [u64; 3] = [0, 1, 2];
const EPOCHS: usize = 100;
const FEATURE_DIM: f64 = 64.0;
const COLLAPSED_BELOW: f64 = 0.1;
const HEALTHY_ABOVE: f64 = 0.5;
const COLLAPSE_BUDGET: Duration = Duration::from_secs(600);
const ORDER_BUDGET: Duration = Duration::from_secs(1200);
const BATCH_SIZES: [usize; 2] = [16, 64];

fn strict() -> bool {
    std::env::var("GSGLAB_STRICT_ACCEPTANCE").is_ok_and(|v| v == "1")
}

/// Writes past the test harness's output capture so every verdict shows up
/// in a plain `cargo test` log.
fn report(id: u32, name: &str, pass: bool, detail: String) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    writeln!(out, "criterion {id:>2} {verdict}: {name}: {detail}").unwrap();
}

fn randn(rows: usize, cols: usize, seed: u64, tag: u64) -> Matrix {
    let mut r = stream(seed, Stream::Dataset, &[tag, rows as u64, cols as u64]);
    Matrix::from_vec(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| r.sample(rand_distr::StandardNormal))
            .collect(),
    )
    .unwrap()
}

fn random_quad(seed: u64, tag: u64, d: usize) -> [Vec<f64>; 4] {
    let mut r = stream(seed, Stream::Dataset, &[tag]);
    std::array::from_fn(|_| (0..d).map(|_| r.random_range(-1.0..1.0)).collect())
}

#[test]
fn c01_gradients_match_finite_differences() {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    for n in 0..GRAD_NETWORKS {
        let strategy = LossStrategy::ALL[n as usize % 4];
        let byol = n % 3 == 1;
        let d_in = 3 + n as usize % 3;
        let hidden = 4 + n as usize % 4;
        let proj = 3 + n as usize % 2;
        let arch = ArchSpec {
            backbone: MlpSpec::new(vec![d_in, hidden, hidden], true, n % 2 == 0),
            projector: MlpSpec::new(vec![hidden, hidden, proj], true, true),
            predictor: MlpSpec::new(vec![proj, 2, proj], true, false),
        };
        let mut stack = EncoderStack::init(&arch, byol.then_some(0.9), n).unwrap();
        for (i, p) in stack.source_params_mut().into_iter().enumerate() {
            *p = randn(p.rows(), p.cols(), n, i as u64);
        }
        if let Some(t) = stack.target.as_mut() {
            for (i, p) in t
                .backbone
                .params_mut()
                .into_iter()
                .chain(t.projector.params_mut())
                .enumerate()
            {
                *p = randn(p.rows(), p.cols(), n, 100 + i as u64);
            }
        }
        let rows = 3 + n as usize % 3;
        let views = ViewSet {
            v11: randn(rows, d_in, n, 1000),
            v12: randn(rows, d_in, n, 1001),
            v21: randn(rows, d_in, n, 1002),
            v22: randn(rows, d_in, n, 1003),
        };
        let res =
            check_stack_loss(&stack, &views, strategy, SelectionInput::Source, n, FD_STEP).unwrap();
        let err = res.check.max_relative_error();
        worst = worst.max(err);
        if err >= GRAD_TOL || res.training_path != res.check.analytic {
            failures.push(format!("network {n} ({strategy}, byol={byol}): {err:.2e}"));
        }
    }
    let elapsed = start.elapsed();
    let pass = failures.is_empty() && elapsed < GRAD_BUDGET;
    report(
        1,
        "analytic vs central differences",
        pass,
        format!("{GRAD_NETWORKS} networks, worst relative error {worst:.2e} (< {GRAD_TOL:.0e}), {elapsed:.1?} {failures:?}"),
    );
    assert!(pass);
}

fn brute_force_case(z: &[Vec<f64>; 4]) -> usize {
    let dist = |a: &[f64], b: &[f64]| {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    };
    let d = [
        dist(&z[0], &z[2]),
        dist(&z[0], &z[3]),
        dist(&z[1], &z[2]),
        dist(&z[1], &z[3]),
    ];
    (0..4).fold(0, |best, i| if d[i] < d[best] { i } else { best }) + 1
}

fn constant_pair(g: &mut Graph, z: &[Vec<f64>; 4], p: &[Vec<f64>; 4]) -> PairProjections {
    let mut mk = |v: &[f64]| g.constant(Matrix::row_vector(v));
    PairProjections {
        z: ViewSet {
            v11: mk(&z[0]),
            v12: mk(&z[1]),
            v21: mk(&z[2]),
            v22: mk(&z[3]),
        },
        p: ViewSet {
            v11: mk(&p[0]),
            v12: mk(&p[1]),
            v21: mk(&p[2]),
            v22: mk(&p[3]),
        },
        target_z: None,
    }
}

fn guided_cases(seed: u64, n: u64) -> Vec<(usize, usize, usize)> {
    let mut r = stream(0, Stream::Strategy, &[]);
    (0..n)
        .map(|i| {
            let z = random_quad(seed, i, 8);
            let p = random_quad(seed, n + i, 8);
            let mut g = Graph::new();
            let pp = constant_pair(&mut g, &z, &p);
            let (_, gsg) = strategy_loss(
                &mut g,
                &pp,
                LossStrategy::Gsg,
                SelectionInput::Source,
                &mut r,
            )
            .unwrap();
            let (_, rev) = strategy_loss(
                &mut g,
                &pp,
                LossStrategy::Reverse,
                SelectionInput::Source,
                &mut r,
            )
            .unwrap();
            (brute_force_case(&z), gsg.unwrap().id(), rev.unwrap().id())
        })
        .collect()
}

#[test]
fn c02_guided_case_is_the_brute_force_argmin() {
    let start = Instant::now();
    let cases = guided_cases(2, ORACLE_QUADS);
    let agree = cases
        .iter()
        .filter(|(oracle, gsg, _)| oracle == gsg)
        .count();
    let elapsed = start.elapsed();
    let pass = agree as u64 == ORACLE_QUADS && elapsed < ORACLE_BUDGET;
    report(
        2,
        "guided case equals brute-force argmin",
        pass,
        format!("{agree}/{ORACLE_QUADS} agree, {elapsed:.1?}"),
    );
    assert!(pass);
}

#[test]
fn c03_reverse_is_the_complement() {
    let complement = |c: usize| [4, 3, 2, 1][c - 1];
    let cases = guided_cases(3, ORACLE_QUADS);
    let agree = cases
        .iter()
        .filter(|(_, gsg, rev)| *rev == complement(*gsg))
        .count();
    let mut seen = [false; 4];
    for (_, gsg, _) in &cases {
        seen[gsg - 1] = true;
    }
    let pass = agree as u64 == ORACLE_QUADS && seen.iter().all(|&s| s);
    report(
        3,
        "reverse maps 1<->4, 2<->3",
        pass,
        format!("{agree}/{ORACLE_QUADS} agree, all cases seen: {seen:?}"),
    );
    assert!(pass);
}

#[test]
fn c05_stop_gradient_blocks_per_case() {
    // Each view has its own encoder weight and predictor weight, so every
    // parameter reaches the loss through exactly one view.
    let views = [View::V11, View::V12, View::V21, View::V22];
    let mut checked = 0;
    let mut violations = Vec::new();
    for trial in 0..50u64 {
        for case in Case::ALL {
            let mut g = Graph::new();
            let enc: Vec<_> = (0..4).map(|v| g.param(randn(4, 3, trial, v))).collect();
            let pred: Vec<_> = (0..4)
                .map(|v| g.param(randn(3, 3, trial, 10 + v)))
                .collect();
            let mut z = Vec::new();
            let mut p = Vec::new();
            for v in 0..4 {
                let x = g.constant(randn(1, 4, trial, 20 + v));
                let zv = g.matmul(x, enc[v as usize]).unwrap();
                p.push(g.matmul(zv, pred[v as usize]).unwrap());
                z.push(zv);
            }
            let pp = PairProjections {
                z: ViewSet {
                    v11: z[0],
                    v12: z[1],
                    v21: z[2],
                    v22: z[3],
                },
                p: ViewSet {
                    v11: p[0],
                    v12: p[1],
                    v21: p[2],
                    v22: p[3],
                },
                target_z: None,
            };
            let loss = case_loss(&mut g, &pp, case).unwrap();
            g.backward(loss).unwrap();
            let predicting: Vec<View> = case.terms().iter().map(|&(pv, _)| pv).collect();
            for (i, view) in views.iter().enumerate() {
                let zero = |t| g.grad(t).unwrap().data().iter().all(|&v: &f64| v == 0.0);
                let expect_zero = !predicting.contains(view);
                if zero(enc[i]) != expect_zero || zero(pred[i]) != expect_zero {
                    violations.push(format!("trial {trial} case {} view {view:?}", case.id()));
                }
                checked += 2;
            }
        }
    }
    let pass = violations.is_empty();
    report(
        5,
        "stop-gradient views receive no gradient",
        pass,
        format!("{checked} parameter checks over 4 cases, violations {violations:?}"),
    );
    assert!(pass);
}

#[test]
fn c09_random_strategy_is_uniform() {
    let mut g = Graph::new();
    let pp = constant_pair(&mut g, &random_quad(9, 0, 4), &random_quad(9, 1, 4));
    let mut hist = [0u64; 4];
    for i in 0..UNIFORM_DRAWS {
        let mut r = stream(9, Stream::Strategy, &[0, 0, i]);
        let (_, case) = strategy_loss(
            &mut g,
            &pp,
            LossStrategy::Random,
            SelectionInput::Source,
            &mut r,
        )
        .unwrap();
        hist[case.unwrap().id() - 1] += 1;
    }
    let expected = UNIFORM_DRAWS as f64 / 4.0;
    let chi2: f64 = hist
        .iter()
        .map(|&o| (o as f64 - expected).powi(2) / expected)
        .sum();
    let pass = chi2 < CHI2_3DOF_99;
    report(
        9,
        "random cases uniform",
        pass,
        format!("histogram {hist:?}, chi2 {chi2:.3} (< {CHI2_3DOF_99})"),
    );
    assert!(pass);
}

#[test]
fn c10_identical_manifest_gives_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(
        &cfg,
        "[train]\nepochs = 3\nstrategy = \"random\"\n\n[eval]\nevery = 1\n",
    )
    .unwrap();
    let train = |config: &Path, out: &Path| {
        let status = Command::new(env!("CARGO_BIN_EXE_gsglab"))
            .args([
                "train",
                "-c",
                config.to_str().unwrap(),
                "-o",
                out.to_str().unwrap(),
            ])
            .status()
            .unwrap();
        assert!(status.success());
        fs::read(out.join(METRICS_FILE)).unwrap()
    };
    let first = train(&cfg, &dir.path().join("first"));
    let manifest = dir.path().join("first").join(MANIFEST_FILE);
    let second = train(&manifest, &dir.path().join("second"));
    let third = train(&manifest, &dir.path().join("third"));
    let manifests_equal = fs::read(&manifest).unwrap()
        == fs::read(dir.path().join("second").join(MANIFEST_FILE)).unwrap();
    let pass = first == second && second == third && manifests_equal;
    report(
        10,
        "identical manifest gives byte-identical metrics.csv",
        pass,
        format!(
            "{} bytes, three runs equal: {}, manifests equal: {manifests_equal}",
            first.len(),
            first == second && second == third
        ),
    );
    assert!(pass);
}

fn dyadic(m: &mut Matrix, f: impl Fn(usize) -> f64) {
    let (r, c) = (m.rows(), m.cols());
    *m = Matrix::from_vec(r, c, (0..r * c).map(f).collect()).unwrap();
}

fn ema_stack(tau: f64) -> EncoderStack {
    let mut stack = EncoderStack::init(&ArchSpec::default(), Some(tau), 11).unwrap();
    for (i, p) in stack.source_params_mut().into_iter().enumerate() {
        dyadic(p, |j| ((i * 7 + j) % 9) as f64 * 0.125 - 0.5);
    }
    let t = stack.target.as_mut().unwrap();
    for (i, p) in t
        .backbone
        .params_mut()
        .into_iter()
        .chain(t.projector.params_mut())
        .enumerate()
    {
        dyadic(p, |j| ((i * 5 + j) % 6) as f64 - 2.5);
    }
    stack
}

fn owned(ps: Vec<&Matrix>) -> Vec<Matrix> {
    ps.into_iter().cloned().collect()
}

#[test]
fn c11_ema_identities() {
    let mut stack = ema_stack(1.0);
    let before = owned(stack.target_params());
    stack.ema_update().unwrap();
    let noop = owned(stack.target_params()) == before;

    let mut stack = ema_stack(0.0);
    stack.ema_update().unwrap();
    let n = stack.target_params().len();
    let copy = owned(stack.target_params()) == owned(stack.source_params())[..n];

    let mut contraction = true;
    for tau in [0.5, 0.75] {
        let mut stack = ema_stack(tau);
        let t0 = owned(stack.target_params());
        let source = owned(stack.source_params());
        for k in 1..=8 {
            stack.ema_update().unwrap();
            for ((t, t0), s) in stack.target_params().iter().zip(&t0).zip(&source) {
                for ((tv, t0v), sv) in t.data().iter().zip(t0.data()).zip(s.data()) {
                    contraction &= *tv == sv + f64::powi(tau, k) * (t0v - sv);
                }
            }
        }
    }
    let pass = noop && copy && contraction;
    report(
        11,
        "EMA identities",
        pass,
        format!("tau=1 no-op: {noop}, tau=0 copy: {copy}, tau^k closed form exact: {contraction}"),
    );
    assert!(pass);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct RunKey {
    algorithm: u8,
    strategy: LossStrategy,
    predictor: bool,
    batch_size: usize,
    seed: u64,
}

#[derive(Debug, Clone)]
struct RunSummary {
    final_knn: Option<f64>,
    final_collapse: Option<f64>,
    final_loss: Option<f64>,
    step_min: f64,
    step_max: f64,
    steps: usize,
    elapsed: Duration,
    error: Option<String>,
}

fn desk_data() -> &'static Dataset {
    static DS: OnceLock<Dataset> = OnceLock::new();
    DS.get_or_init(|| generate(&GeneratorConfig::default()).unwrap())
}

fn algorithm_of(key: &RunKey) -> Algorithm {
    if key.algorithm == 0 {
        Algorithm::SimSiam
    } else {
        Algorithm::Byol
    }
}

fn key(
    algorithm: Algorithm,
    strategy: LossStrategy,
    predictor: bool,
    batch_size: usize,
    seed: u64,
) -> RunKey {
    let algorithm = match algorithm {
        Algorithm::SimSiam => 0,
        Algorithm::Byol => 1,
    };
    RunKey {
        algorithm,
        strategy,
        predictor,
        batch_size,
        seed,
    }
}

fn planned_runs() -> Vec<RunKey> {
    let mut keys = Vec::new();
    for seed in SEEDS {
        for strategy in [LossStrategy::Symmetric, LossStrategy::Gsg] {
            keys.push(key(Algorithm::SimSiam, strategy, false, 64, seed));
        }
        for algorithm in [Algorithm::SimSiam, Algorithm::Byol] {
            for strategy in [
                LossStrategy::Gsg,
                LossStrategy::Random,
                LossStrategy::Reverse,
            ] {
                keys.push(key(algorithm, strategy, true, 64, seed));
            }
        }
        for strategy in [LossStrategy::Gsg, LossStrategy::Reverse] {
            keys.push(key(Algorithm::SimSiam, strategy, true, 16, seed));
        }
    }
    keys
}

fn run_config(k: &RunKey) -> TrainConfig {
    let ds = desk_data();
    let base = TrainConfig {
        epochs: EPOCHS,
        ..Default::default()
    };
    let largest = *BATCH_SIZES.iter().max().unwrap();
    // Every run makes the updates of one batch-64 epoch, so the batch-16
    // runs match the batch-64 ones update for update.
    let steps = steps_per_epoch(
        &TrainConfig {
            batch_size: largest,
            ..base.clone()
        },
        ds,
    )
    .unwrap();
    TrainConfig {
        algorithm: algorithm_of(k),
        strategy: k.strategy,
        predictor_enabled: k.predictor,
        batch_size: k.batch_size,
        seed: k.seed,
        steps_per_epoch: Some(steps),
        ..base
    }
}

fn execute(k: &RunKey) -> RunSummary {
    let start = Instant::now();
    let (mut step_min, mut step_max, mut steps) = (f64::INFINITY, f64::NEG_INFINITY, 0);
    let result = train_run_observed(&run_config(k), desk_data(), |s| {
        step_min = step_min.min(s.loss);
        step_max = step_max.max(s.loss);
        steps += 1;
    });
    let elapsed = start.elapsed();
    match result {
        Ok((_, metrics)) => {
            let last = metrics.last();
            RunSummary {
                final_knn: last.and_then(|m| m.knn_acc),
                final_collapse: last.map(|m| m.collapse),
                final_loss: last.map(|m| m.loss),
                step_min,
                step_max,
                steps,
                elapsed,
                error: None,
            }
        }
        Err(e) => RunSummary {
            final_knn: None,
            final_collapse: None,
            final_loss: None,
            step_min,
            step_max,
            steps,
            elapsed,
            error: Some(e.to_string()),
        },
    }
}

/// Every training run of criteria 4, 6, 7 and 8, computed once.
fn runs() -> &'static HashMap<RunKey, RunSummary> {
    static RUNS: OnceLock<HashMap<RunKey, RunSummary>> = OnceLock::new();
    RUNS.get_or_init(|| {
        let keys = planned_runs();
        let results: Vec<RunSummary> = keys.par_iter().map(execute).collect();
        keys.into_iter().zip(results).collect()
    })
}

fn run(
    algorithm: Algorithm,
    strategy: LossStrategy,
    predictor: bool,
    batch_size: usize,
    seed: u64,
) -> &'static RunSummary {
    &runs()[&key(algorithm, strategy, predictor, batch_size, seed)]
}

fn errors<'a>(summaries: impl IntoIterator<Item = &'a RunSummary>) -> Vec<String> {
    summaries
        .into_iter()
        .filter_map(|s| s.error.clone())
        .collect()
}

fn total_time<'a>(summaries: impl IntoIterator<Item = &'a RunSummary>) -> Duration {
    summaries.into_iter().map(|s| s.elapsed).sum()
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn directional(pass: bool) {
    if strict() {
        assert!(pass);
    }
}

#[test]
fn c04_every_step_loss_is_bounded() {
    let mut detail = Vec::new();
    let mut pass = true;
    for strategy in LossStrategy::ALL {
        let of: Vec<&RunSummary> = runs()
            .iter()
            .filter(|(k, _)| k.strategy == strategy)
            .map(|(_, s)| s)
            .collect();
        let lo = of.iter().map(|s| s.step_min).fold(f64::INFINITY, f64::min);
        let hi = of
            .iter()
            .map(|s| s.step_max)
            .fold(f64::NEG_INFINITY, f64::max);
        let steps: usize = of.iter().map(|s| s.steps).sum();
        let errs = errors(of.iter().copied());
        pass &= errs.is_empty() && steps > 0 && lo >= -1.0 && hi <= 1.0;
        detail.push(format!(
            "{strategy}: {} runs, {steps} steps in [{lo:.4}, {hi:.4}] {errs:?}",
            of.len()
        ));
    }
    report(4, "per-step loss within [-1, 1]", pass, detail.join("; "));
    assert!(pass);
}

#[test]
fn c06_symmetric_collapses_without_predictor_while_guided_does_not() {
    let collapsed = COLLAPSED_BELOW / FEATURE_DIM.sqrt();
    let healthy = HEALTHY_ABOVE / FEATURE_DIM.sqrt();
    let sym: Vec<_> = SEEDS
        .iter()
        .map(|&s| run(Algorithm::SimSiam, LossStrategy::Symmetric, false, 64, s))
        .collect();
    let gsg: Vec<_> = SEEDS
        .iter()
        .map(|&s| run(Algorithm::SimSiam, LossStrategy::Gsg, false, 64, s))
        .collect();
    let stat = |r: &[&RunSummary]| {
        r.iter()
            .map(|s| s.final_collapse.unwrap_or(f64::NAN))
            .collect::<Vec<_>>()
    };
    let (sym_stat, gsg_stat) = (stat(&sym), stat(&gsg));
    let sym_collapsed = sym_stat.iter().filter(|&&c| c < collapsed).count();
    let gsg_healthy = gsg_stat.iter().filter(|&&c| c > healthy).count();
    let elapsed = total_time(sym.iter().chain(&gsg).copied());
    let errs = errors(sym.iter().chain(&gsg).copied());
    let pass = errs.is_empty()
        && 3 * sym_collapsed >= 2 * SEEDS.len()
        && 3 * gsg_healthy >= 2 * SEEDS.len()
        && elapsed < COLLAPSE_BUDGET;
    report(
        6,
        "collapse without predictor",
        pass,
        format!(
            "symmetric {sym_stat:.4?} ({sym_collapsed}/3 < {collapsed:.4}), guided {gsg_stat:.4?} ({gsg_healthy}/3 > {healthy:.4}), {elapsed:.0?} {errs:?}"
        ),
    );
    directional(pass);
}

#[test]
fn c07_guided_order_beats_random_and_reverse() {
    let mut pass = true;
    let mut detail = Vec::new();
    let mut all = Vec::new();
    for algorithm in [Algorithm::SimSiam, Algorithm::Byol] {
        let of = |strategy| -> Vec<&RunSummary> {
            SEEDS
                .iter()
                .map(|&s| run(algorithm, strategy, true, 64, s))
                .collect()
        };
        let (g, r, v) = (
            of(LossStrategy::Gsg),
            of(LossStrategy::Random),
            of(LossStrategy::Reverse),
        );
        let knn = |rs: &[&RunSummary]| mean(rs.iter().map(|s| s.final_knn.unwrap_or(f64::NAN)));
        let loss = |rs: &[&RunSummary]| mean(rs.iter().map(|s| s.final_loss.unwrap_or(f64::NAN)));
        let (kg, kr, kv) = (knn(&g), knn(&r), knn(&v));
        pass &= kg >= kr && kg > kv;
        detail.push(format!(
            "{algorithm}: kNN gsg {kg:.4} random {kr:.4} reverse {kv:.4} (loss {:.4} {:.4} {:.4})",
            loss(&g),
            loss(&r),
            loss(&v)
        ));
        all.extend(g.into_iter().chain(r).chain(v));
    }
    let elapsed = total_time(all.iter().copied());
    let errs = errors(all.iter().copied());
    pass &= errs.is_empty() && elapsed < ORDER_BUDGET;
    report(
        7,
        "guided >= random and > reverse",
        pass,
        format!("{}; {elapsed:.0?} {errs:?}", detail.join("; ")),
    );
    directional(pass);
}

#[test]
fn c08_guided_is_no_less_robust_to_batch_size() {
    let spread = |strategy| {
        let means: Vec<f64> = BATCH_SIZES
            .iter()
            .map(|&b| {
                mean(SEEDS.iter().map(|&s| {
                    run(Algorithm::SimSiam, strategy, true, b, s)
                        .final_knn
                        .unwrap_or(f64::NAN)
                }))
            })
            .collect();
        let hi = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = means.iter().copied().fold(f64::INFINITY, f64::min);
        (means, hi - lo)
    };
    let (gm, gr) = spread(LossStrategy::Gsg);
    let (vm, vr) = spread(LossStrategy::Reverse);
    let all: Vec<&RunSummary> = [LossStrategy::Gsg, LossStrategy::Reverse]
        .into_iter()
        .flat_map(|st| {
            BATCH_SIZES.iter().flat_map(move |&b| {
                SEEDS
                    .iter()
                    .map(move |&s| run(Algorithm::SimSiam, st, true, b, s))
            })
        })
        .collect();
    let errs = errors(all.iter().copied());
    let pass = errs.is_empty() && gr <= vr;
    report(
        8,
        "batch-size spread of guided <= reverse",
        pass,
        format!("kNN at batch {BATCH_SIZES:?}: guided {gm:.4?} (range {gr:.4}), reverse {vm:.4?} (range {vr:.4}) {errs:?}"),
    );
    directional(pass);
}

//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the process exits non-zero if any criterion fails.

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use mdm_core::autodiff::check::{central_difference, max_relative_error};
use mdm_core::autodiff::{Tape, Var};
use mdm_core::bench::{sweep, BenchConfig, BenchRow};
use mdm_core::data::{gen_synthetic_multimodal, Batch, SyntheticTaskSpec};
use mdm_core::estimators::{
    estimate_f, estimate_kl, shuffle_product_of_marginals, CriticSpec, EstimatorKind, OutputActivation,
    StatisticNetwork,
};
use mdm_core::eval::{compute_metrics, modality_drop_eval, sign_test, ModalityMeans, Substitution};
use mdm_core::fusion::{self, EncoderVariant, FusionEncoderSpec, FusionModel, FusionTrainState, TotalLossConfig};
use mdm_core::matrix::Matrix;
use mdm_core::nn::{dropout_forward, Activation, Bound, DenseLayer, DropoutSpec, LstmCell, ParamStore};
use mdm_core::rng::{stream, Rng, Stream};
use rand::Rng as _;

const RHOS: [f64; 5] = [0.0, 0.3, 0.5, 0.7, 0.9];
const BENCH_SEED: u64 = 1;
const LAMBDAS: [f64; 6] = [0.0, 0.01, 0.05, 0.1, 0.3, 1.0];
const SEEDS: u64 = 10;

struct Outcome {
    passed: bool,
    detail: String,
}

fn report(id: usize, name: &str, outcome: &Outcome, elapsed: Duration) {
    let verdict = if outcome.passed { "PASS" } else { "FAIL" };
    println!("criterion {id} {verdict}: {name} — {} ({:.1}s)", outcome.detail, elapsed.as_secs_f64());
}

fn timed(limit: Option<Duration>, f: impl FnOnce() -> Outcome) -> (Outcome, Duration) {
    let t = Instant::now();
    let mut out = f();
    let elapsed = t.elapsed();
    if let Some(limit) = limit {
        if elapsed > limit {
            out.passed = false;
            out.detail += &format!("; exceeded {}s", limit.as_secs());
        }
    }
    (out, elapsed)
}

fn kl_sweep() -> (Outcome, Vec<BenchRow>) {
    let rows = sweep(&RHOS, &[EstimatorKind::Kl], &BenchConfig::default(), BENCH_SEED).unwrap();
    let mut worst = 0.0_f64;
    let mut passed = true;
    for r in &rows {
        let tol = (0.1 * r.oracle).max(0.05);
        passed &= r.abs_error <= tol;
        worst = worst.max(r.abs_error / tol);
    }
    let estimates: Vec<String> = rows.iter().map(|r| format!("{:.3}/{:.3}", r.estimate, r.oracle)).collect();
    (
        Outcome {
            passed,
            detail: format!("estimate/oracle {}; worst error {:.2} of tolerance", estimates.join(" "), worst),
        },
        rows,
    )
}

fn monotone(kl_rows: Vec<BenchRow>) -> Outcome {
    let mut rows = kl_rows;
    rows.extend(sweep(&RHOS, &[EstimatorKind::F, EstimatorKind::W], &BenchConfig::default(), BENCH_SEED).unwrap());
    let mut passed = true;
    let mut parts = Vec::new();
    for kind in EstimatorKind::ALL {
        let est: Vec<f64> = rows.iter().filter(|r| r.kind == kind).map(|r| r.estimate).collect();
        let ok = est.windows(2).all(|w| w[1] >= w[0] - 0.02);
        passed &= ok;
        parts.push(format!("{kind} {:?}{}", est.iter().map(|v| (v * 1e3).round() / 1e3).collect::<Vec<_>>(), if ok { "" } else { " (decreasing)" }));
    }
    let at = |kind| rows.iter().find(|r| r.kind == kind && r.rho == 0.9).unwrap().estimate;
    let gap = at(EstimatorKind::W) - at(EstimatorKind::Kl);
    passed &= gap.abs() > 0.1;
    Outcome {
        passed,
        detail: format!("{}; W − KL at ρ=0.9 = {gap:.3} (|·| must exceed 0.1)", parts.join("; ")),
    }
}

fn random_matrix(rng: &mut Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

fn kl_dominates_f() -> Outcome {
    let mut rng = stream(3, Stream::Init);
    let mut worst = f64::INFINITY;
    for i in 0..100 {
        let dim = rng.random_range(2..12);
        let output = [OutputActivation::Identity, OutputActivation::Sigmoid, OutputActivation::Softplus][i % 3];
        let mut spec = CriticSpec::new(dim, output);
        spec.base_width = rng.random_range(4..40);
        let mut critic = StatisticNetwork::new(spec, &mut rng).unwrap();
        let gain = rng.random_range(0.5..4.0);
        for p in critic.store.params_mut() {
            p.value.data.iter_mut().for_each(|v| *v *= gain);
        }
        let m = rng.random_range(2..200);
        let scale = rng.random_range(0.1..5.0);
        let zj = random_matrix(&mut rng, m, dim, scale);
        let zm = random_matrix(&mut rng, m, dim, scale);
        let kl = estimate_kl(&critic, &zj, &zm).unwrap().value;
        let f = estimate_f(&critic, &zj, &zm).unwrap().value;
        worst = worst.min(kl - f);
    }
    Outcome {
        passed: worst >= -1e-12,
        detail: format!("min KL − F over 100 critics = {worst:.3e}"),
    }
}

/// Relative error between tape gradients of a random linear functional of
/// `build`'s output and central differences over every parameter.
fn grad_error(store: &ParamStore, seed: u64, build: &dyn Fn(&mut Tape, &Bound) -> Var) -> f64 {
    let loss_at = |s: &ParamStore, grads: bool| -> (f64, Vec<Vec<f64>>) {
        let mut tape = Tape::new();
        let b = s.bind(&mut tape, true);
        let out = build(&mut tape, &b);
        let [r, c] = tape.shape(out);
        let mut wr = stream(seed, Stream::Eval);
        let w = tape.constant(r, c, (0..r * c).map(|_| wr.random_range(-1.0..1.0)).collect()).unwrap();
        let prod = tape.mul(out, w).unwrap();
        let l = tape.mean(prod).unwrap();
        let v = tape.scalar(l);
        if grads {
            tape.backward(l).unwrap();
            (v, b.grads(&tape))
        } else {
            (v, Vec::new())
        }
    };
    let (_, analytic) = loss_at(store, true);
    let flat: Vec<f64> = store.params().iter().flat_map(|p| p.value.data.clone()).collect();
    let mut f = |x: &[f64]| {
        let mut s = store.clone();
        let mut it = x.iter();
        for p in s.params_mut() {
            p.value.data.iter_mut().for_each(|v| *v = *it.next().unwrap());
        }
        loss_at(&s, false).0
    };
    let numeric = central_difference(&mut f, &flat, 1e-6);
    max_relative_error(&analytic.concat(), &numeric, 1e-6)
}

fn toy_batch(rng: &mut Rng, m: usize, steps: Option<usize>) -> Batch {
    use mdm_core::data::{Features, MultimodalSample};
    let mut v = |n: usize| (0..n).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<f64>>();
    let samples: Vec<MultimodalSample> = (0..m)
        .map(|_| MultimodalSample {
            audio: v(3),
            visual: v(2),
            language: match steps {
                None => Features::Vector(v(4)),
                Some(t) => Features::Sequence((0..t).map(|_| v(4)).collect()),
            },
            y: 0.0,
        })
        .collect();
    Batch::from_samples(&samples.iter().collect::<Vec<_>>()).unwrap()
}

fn gradient_checks() -> Outcome {
    const INSTANCES: u64 = 20;
    let mut worst: Vec<(&str, f64)> = Vec::new();
    let mut record = |name: &'static str, e: f64| match worst.iter_mut().find(|(n, _)| *n == name) {
        Some(entry) => entry.1 = entry.1.max(e),
        None => worst.push((name, e)),
    };
    for seed in 0..INSTANCES {
        let mut rng = stream(seed, Stream::Init);
        let (n_in, n_out, m) = (rng.random_range(1..8), rng.random_range(1..8), rng.random_range(1..6));
        let x = random_matrix(&mut rng, m, n_in, 2.0);

        for (name, act) in [
            ("dense identity", Activation::Identity),
            ("dense leaky-relu", Activation::leaky()),
            ("dense sigmoid", Activation::Sigmoid),
            ("dense tanh", Activation::Tanh),
            ("dense softplus", Activation::Softplus),
        ] {
            let mut store = ParamStore::new();
            let layer = DenseLayer::new(&mut store, "fc", n_in, n_out, act, &mut rng);
            for p in store.params_mut() {
                p.value.data.iter_mut().for_each(|v| *v += 0.1);
            }
            let e = grad_error(&store, seed, &|t, b| {
                let xv = t.constant_matrix(&x);
                layer.forward(t, b, xv).unwrap()
            });
            record(name, e);
        }

        let mut store = ParamStore::new();
        let layer = DenseLayer::new(&mut store, "fc", n_in, n_out, Activation::Tanh, &mut rng);
        let e = grad_error(&store, seed, &|t, b| {
            let xv = t.constant_matrix(&x);
            let h = layer.forward(t, b, xv).unwrap();
            let spec = DropoutSpec::new(0.4, true).unwrap();
            // the same mask on every evaluation
            dropout_forward(t, spec, h, &mut stream(seed, Stream::Dropout))
        });
        record("dropout", e);

        let mut store = ParamStore::new();
        let hidden = rng.random_range(1..6);
        let cell = LstmCell::new(&mut store, "lstm", n_in, hidden, &mut rng);
        let x2 = random_matrix(&mut rng, m, n_in, 2.0);
        let e = grad_error(&store, seed, &|t, b| {
            let zeros = t.constant(m, hidden, vec![0.0; m * hidden]).unwrap();
            let (x1, x2) = (t.constant_matrix(&x), t.constant_matrix(&x2));
            let (h, c) = cell.step(t, b, x1, zeros, zeros).unwrap();
            let (h, c) = cell.step(t, b, x2, h, c).unwrap();
            t.add(h, c).unwrap()
        });
        record("lstm cell", e);

        for output in [OutputActivation::Identity, OutputActivation::Sigmoid, OutputActivation::Softplus] {
            let mut spec = CriticSpec::new(n_in, output);
            spec.base_width = 8;
            let mut critic = StatisticNetwork::new(spec, &mut rng).unwrap();
            // zero biases shrink deep pre-activations towards the leaky kink,
            // where differencing (not the gradient) breaks down
            for p in critic.store.params_mut().iter_mut().filter(|p| p.name.ends_with("bias")) {
                p.value.data.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
            }
            let e = grad_error(&critic.store, seed, &|t, b| {
                let xv = t.constant_matrix(&x);
                critic.forward(t, b, xv, None).unwrap()
            });
            record("critic", e);
        }

        for (name, variant, steps) in [
            ("concat-mlp encoder", EncoderVariant::ConcatMlp, None),
            ("ef-lstm encoder", EncoderVariant::EfLstm, Some(3)),
        ] {
            let mut spec = FusionEncoderSpec::new(variant, (3, 2, 4), steps);
            spec.hidden = 6;
            spec.out_dim = 5;
            let model = FusionModel::new(spec, &mut rng).unwrap();
            let batch = toy_batch(&mut rng, 4, steps);
            let e = grad_error(&model.store, seed, &|t, b| {
                let z = model.encode(t, b, &batch, None).unwrap();
                model.head(t, b, z).unwrap()
            });
            record(name, e);
        }
    }
    let max = worst.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    let failing: Vec<String> = worst.iter().filter(|(_, e)| *e >= 1e-4).map(|(n, e)| format!("{n} {e:.1e}")).collect();
    Outcome {
        passed: failing.is_empty(),
        detail: format!(
            "{} checks × {INSTANCES} instances, max error {max:.2e} (relative, differences under 1e-6 count as exact){}",
            worst.len(),
            if failing.is_empty() { String::new() } else { format!("; failing: {}", failing.join(", ")) }
        ),
    }
}

/// Per-seed outcome of the λ grid for one estimator kind.
struct SeedRun {
    base_acc2: f64,
    best_acc2: f64,
    base_ratios: [f64; 3],
    best_ratios: [f64; 3],
}

fn lambda_grid(kind: EstimatorKind, seed: u64) -> SeedRun {
    let splits = gen_synthetic_multimodal(&SyntheticTaskSpec { seed, ..Default::default() }).unwrap();
    let means = ModalityMeans::of(&splits.train).unwrap();
    let valid = splits.valid.full_batch().unwrap();
    let test = splits.test.full_batch().unwrap();
    let spec = FusionEncoderSpec::for_dataset(EncoderVariant::ConcatMlp, &splits.train).unwrap();
    let mut run = SeedRun {
        base_acc2: 0.0,
        best_acc2: f64::NEG_INFINITY,
        base_ratios: [0.0; 3],
        best_ratios: [0.0; 3],
    };
    for lambda in LAMBDAS {
        let cfg = TotalLossConfig { lambda, kind, seed, ..Default::default() };
        let report = fusion::train(&cfg, spec.clone(), &splits).unwrap();
        assert!(report.aborted.is_none(), "{kind} seed {seed} λ {lambda}: {:?}", report.aborted);
        let acc2 = compute_metrics(&report.state.model.predict(&valid).unwrap(), &valid.y).unwrap().acc2;
        let drop = modality_drop_eval(&report.state.model, &test, Substitution::Zeros, Some(&means)).unwrap();
        let ratios = [drop[0].ratio, drop[1].ratio, drop[2].ratio];
        if lambda == 0.0 {
            run.base_acc2 = acc2;
            run.base_ratios = ratios;
        } else if acc2 > run.best_acc2 {
            run.best_acc2 = acc2;
            run.best_ratios = ratios;
        }
    }
    run
}

fn directional_and_drop() -> (Outcome, Outcome) {
    let mut last = None;
    for kind in EstimatorKind::ALL {
        let runs: Vec<SeedRun> = (0..SEEDS).map(|s| lambda_grid(kind, s)).collect();
        let wins = runs.iter().filter(|r| r.best_acc2 > r.base_acc2).count();
        let mean = |f: &dyn Fn(&SeedRun) -> [f64; 3]| -> [f64; 3] {
            let mut m = [0.0; 3];
            for r in &runs {
                m.iter_mut().zip(f(r)).for_each(|(a, b)| *a += b / runs.len() as f64);
            }
            m
        };
        let (base, best) = (mean(&|r| r.base_ratios), mean(&|r| r.best_ratios));
        let held = base.iter().zip(&best).filter(|(b0, b1)| b1 >= b0).count();
        let c5 = Outcome {
            passed: wins >= 7,
            detail: format!("{kind}: best λ > 0 beats λ = 0 on validation Acc2 in {wins}/{SEEDS} seeds"),
        };
        let c6 = Outcome {
            passed: held >= 2,
            detail: format!(
                "{kind}: mean ratio A/V/A+V at λ=0 {:.4?}, at best λ {:.4?}; {held}/3 conditions not worse",
                base, best
            ),
        };
        if c5.passed {
            return (c5, c6);
        }
        last = Some((c5, c6));
    }
    last.unwrap()
}

fn aligned_beat_shuffled() -> Outcome {
    let seed = 0;
    let splits = gen_synthetic_multimodal(&SyntheticTaskSpec { seed, ..Default::default() }).unwrap();
    let spec = FusionEncoderSpec::for_dataset(EncoderVariant::ConcatMlp, &splits.train).unwrap();
    let cfg = TotalLossConfig { seed, ..Default::default() };
    let state: FusionTrainState = fusion::train(&cfg, spec, &splits).unwrap().state;
    let test = splits.test.full_batch().unwrap();
    let shuffled = shuffle_product_of_marginals(&test, &mut stream(seed, Stream::Shuffle)).unwrap().batch;
    let aligned = state.critic_scores(&test).unwrap();
    let marginal = state.critic_scores(&shuffled).unwrap();
    let (wins, losses, p) = sign_test(&aligned, &marginal).unwrap();
    Outcome {
        passed: p < 0.05 && wins > losses && test.len() >= 500,
        detail: format!("KL critic (λ = {}), {} test samples: aligned higher in {wins}, lower in {losses}, p = {p:.2e}", cfg.lambda, test.len()),
    }
}

fn run_cli(args: &[&str]) -> i32 {
    mdm_cli::run(std::iter::once("mdm").chain(args.iter().copied()))
}

fn outputs(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n != "manifest.json") {
                files.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    files.sort();
    files
}

fn reproducible() -> Outcome {
    let tmp = tempfile::TempDir::new().unwrap();
    let mut runs = Vec::new();
    for rep in ["a", "b"] {
        let out = tmp.path().join(rep);
        let o = |sub: &str| out.join(sub).display().to_string();
        let data = o("data");
        let common = ["--seed", "11", "--set", "synthetic.n_train=300", "--set", "synthetic.n_valid=100", "--set", "synthetic.n_test=100"];
        let mut codes = vec![run_cli(&[&["gen-data", "--out", &data][..], &common].concat())];
        for kind in ["kl", "f", "w"] {
            let train = o(&format!("train-{kind}"));
            let dir = format!("data.dir={data}");
            let k = format!("loss.kind={kind}");
            let args = ["train", "--out", &train, "--seed", "11", "--set", &dir, "--set", &k, "--set", "loss.epochs=3"];
            codes.push(run_cli(&args));
            codes.push(run_cli(&["eval-drop", "--out", &train, "--set", &dir]));
            codes.push(run_cli(&["score", "--out", &train, "--set", &dir]));
        }
        let bench = o("bench");
        codes.push(run_cli(&[
            "gaussian-bench", "--out", &bench, "--seed", "11", "--set", "bench.rhos=0,0.9", "--set", "bench.n=1000", "--set", "bench.steps=50",
        ]));
        assert!(codes.iter().all(|&c| c == 0), "{codes:?}");
        runs.push(outputs(&out));
    }
    let identical = runs[0] == runs[1];
    Outcome {
        passed: identical && !runs[0].is_empty(),
        detail: format!(
            "{} output files across gen-data, train, eval-drop, score and gaussian-bench {}",
            runs[0].len(),
            if identical { "byte-identical" } else { "differ" }
        ),
    }
}

fn main() {
    let mut results = Vec::new();
    let mut kl_rows = Vec::new();

    let (o, t) = timed(Some(Duration::from_secs(300)), || {
        let (o, rows) = kl_sweep();
        kl_rows = rows;
        o
    });
    report(1, "KL tracks the Gaussian oracle", &o, t);
    results.push(o.passed);

    let (o, t) = timed(None, || monotone(kl_rows));
    report(2, "estimates rise with ρ; W curve departs from KL", &o, t);
    results.push(o.passed);

    let (o, t) = timed(Some(Duration::from_secs(10)), kl_dominates_f);
    report(3, "KL bound dominates f-divergence bound", &o, t);
    results.push(o.passed);

    let (o, t) = timed(Some(Duration::from_secs(60)), gradient_checks);
    report(4, "analytic gradients match finite differences", &o, t);
    results.push(o.passed);

    let start = Instant::now();
    let (c5, c6) = directional_and_drop();
    let t = start.elapsed();
    let c5 = if t > Duration::from_secs(1800) {
        Outcome { passed: false, detail: format!("{}; exceeded 1800s", c5.detail) }
    } else {
        c5
    };
    report(5, "dependency penalty improves validation Acc2", &c5, t);
    report(6, "dependency penalty improves robustness to modality drop", &c6, t);
    results.push(c5.passed);
    results.push(c6.passed);

    let (o, t) = timed(None, aligned_beat_shuffled);
    report(7, "critic separates aligned from shuffled samples", &o, t);
    results.push(o.passed);

    let (o, t) = timed(None, reproducible);
    report(8, "reruns are byte-identical", &o, t);
    results.push(o.passed);

    let failed: Vec<usize> = results.iter().enumerate().filter(|(_, p)| !**p).map(|(i, _)| i + 1).collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria passed", results.len());
    } else {
        println!("acceptance: failing criteria {failed:?}");
        std::process::exit(1);
    }
}

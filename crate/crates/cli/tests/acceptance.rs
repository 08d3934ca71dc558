//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! The end-to-end checks run the `fedsilo` binary as a server process and
//! five agent processes on loopback. By default they train on the
//! deterministic synthetic digits; with FEDSILO_MNIST_DIR pointing at the MNIST
//! IDX files (train-images-idx3-ubyte, train-labels-idx1-ubyte) they use real
//! MNIST and also check the final-accuracy threshold.
//!
//! Arguments filter criteria by substring: `cargo test --test acceptance -- fabric`.

use std::io::{BufRead, BufReader};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdout, Command, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use fedsilo_agent::{Agent, AgentConfig};
use fedsilo_client::{is_auth_rejection, Client, ClientError};
use fedsilo_core::aggregation::{
    pseudo_gradient, staleness_weight, step_fedadaptive, step_fedasync, step_fedavg, step_fedavgm,
    step_fedbuff, AdaptiveVariant,
};
use fedsilo_core::api::{
    ClientRoundStatus, ComparisonReport, CreateAccountRequest, DataDistributionRequest, DeviceType,
    EndpointStatus, ExperimentRecord, ExperimentStatus, ResourceMetrics, TaskEnvelope, TaskKind,
};
use fedsilo_core::data::synthetic_digits;
use fedsilo_core::idx::{encode_images, encode_labels};
use fedsilo_core::params::{deserialize, serialize};
use fedsilo_core::privacy::{apply_dp, clip_to_norm};
use fedsilo_core::{
    gradient_check, AggregationError, Aggregator, AggregatorHyper, AggregatorState, Algorithm,
    ClientUpdate, DataLoaderSpec, ExperimentConfig, LocalDataset, Loss, ModelLayout, ModelSpec,
    ParameterVector, Parameters, PrivacyConfig, Update,
};
use fedsilo_server::{ServerConfig, SystemClock};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const BIN: &str = env!("CARGO_BIN_EXE_fedsilo");
const PASSWORD: &str = "correct horse battery";
const EXACT: f64 = 1e-12;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn fail(context: &str) -> impl Fn(String) -> String + '_ {
    move |e| format!("{context}: {e}")
}

trait Context<T> {
    fn ctx(self, what: &str) -> Result<T, String>;
}

impl<T, E: std::fmt::Display> Context<T> for Result<T, E> {
    fn ctx(self, what: &str) -> Result<T, String> {
        self.map_err(|e| format!("{what}: {e}"))
    }
}

struct Suite {
    filter: Vec<String>,
    failed: usize,
    ran: usize,
}

impl Suite {
    fn wanted(&self, name: &str) -> bool {
        self.filter.is_empty() || self.filter.iter().any(|f| name.contains(f.as_str()))
    }

    fn run(&mut self, name: &str, check: impl FnOnce() -> Check) {
        if !self.wanted(name) {
            return;
        }
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|panic| {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = started.elapsed().as_secs_f64();
        self.ran += 1;
        match outcome {
            Ok(detail) => println!("PASS  {name}  ({secs:.1} s)  {detail}"),
            Err(reason) => {
                self.failed += 1;
                println!("FAIL  {name}  ({secs:.1} s)  {reason}");
            }
        }
    }
}

fn main() {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut suite = Suite {
        filter,
        failed: 0,
        ran: 0,
    };
    suite.run("aggregation oracle", aggregation_oracle);
    suite.run("adaptive and async rules", adaptive_and_async);
    suite.run("gradient check", gradient_checks);

    let e2e_names = [
        "end-to-end FedAvg vs FedAvgM",
        "determinism",
        "differential privacy",
        "persistence",
    ];
    let session = if e2e_names.iter().any(|n| suite.wanted(n)) {
        Some(E2eSession::run())
    } else {
        None
    };
    if let Some(session) = &session {
        suite.run(e2e_names[0], || session.end_to_end());
        suite.run(e2e_names[1], || session.determinism());
    }
    suite.run("differential privacy", || dp_statistics(session.as_ref()));
    suite.run("task fabric and access control", fabric);
    if let Some(session) = &session {
        suite.run(e2e_names[3], || session.persistence());
    }

    println!(
        "acceptance: {} of {} criteria passed",
        suite.ran - suite.failed,
        suite.ran
    );
    if suite.failed > 0 {
        std::process::exit(1);
    }
}

// ----------------------------------------------------------- aggregation

fn pv(values: &[f64]) -> ParameterVector {
    Parameters::from_flat(values.to_vec()).unwrap()
}

fn update(weights: &[f64], samples: u64, base_round: u64) -> Update {
    ClientUpdate {
        endpoint_id: format!("ep-{samples}"),
        base_round,
        weights: pv(weights),
        sample_count: samples,
        metrics: Default::default(),
    }
}

fn state(algorithm: Algorithm, global: &[f64], hyper: AggregatorHyper) -> Aggregator {
    AggregatorState::new(algorithm, pv(global), hyper)
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn close(a: &[f64], b: &[f64], what: &str) -> Result<(), String> {
    let d = max_diff(a, b);
    ensure(d <= EXACT, || format!("{what}: got {a:?}, expected {b:?} (diff {d:.2e})"))
}

fn aggregation_oracle() -> Check {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xa66);
    let plain = AggregatorHyper {
        server_momentum: 0.0,
        server_lr: 1.0,
        ..AggregatorHyper::default()
    };
    let (mut worst_brute, mut worst_m) = (0f64, 0f64);
    for instance in 0..100 {
        let dim = rng.random_range(1..=50);
        let clients = rng.random_range(1..=8);
        let global: Vec<f64> = (0..dim).map(|_| rng.random_range(-10.0..10.0)).collect();
        let weights: Vec<Vec<f64>> = (0..clients)
            .map(|_| (0..dim).map(|_| rng.random_range(-10.0..10.0)).collect())
            .collect();
        let counts: Vec<u64> = (0..clients).map(|_| rng.random_range(1..=1000)).collect();
        let updates: Vec<Update> = weights
            .iter()
            .zip(&counts)
            .map(|(w, &n)| update(w, n, 0))
            .collect();
        let total: f64 = counts.iter().map(|&n| n as f64).sum();
        let brute: Vec<f64> = (0..dim)
            .map(|j| {
                let mut acc = 0.0;
                for (w, &n) in weights.iter().zip(&counts) {
                    acc += n as f64 * w[j];
                }
                acc / total
            })
            .collect();
        let avg = step_fedavg(&state(Algorithm::FedAvg, &global, plain), &updates)
            .ctx(&format!("instance {instance}"))?;
        let avgm = step_fedavgm(&state(Algorithm::FedAvgM, &global, plain), &updates)
            .ctx(&format!("instance {instance}"))?;
        worst_brute = worst_brute.max(max_diff(avg.global_model.values(), &brute));
        worst_m = worst_m.max(max_diff(avg.global_model.values(), avgm.global_model.values()));
        ensure(avg.round == 1 && avgm.round == 1, || format!("instance {instance}: round not advanced by one"))?;
    }
    ensure(worst_brute <= EXACT, || format!("FedAvg differs from the brute-force weighted mean by {worst_brute:.2e}"))?;
    ensure(worst_m <= EXACT, || format!("FedAvgM(beta=0, eta=1) differs from FedAvg by {worst_m:.2e}"))?;

    // pseudo-gradient
    let s = state(Algorithm::FedAvg, &[1.0, 1.0], AggregatorHyper::default());
    close(pseudo_gradient(&s, &[update(&[1.0, 1.0], 4, 0)]).ctx("delta")?.values(), &[0.0, 0.0], "zero delta")?;
    close(
        pseudo_gradient(&s, &[update(&[0.5, 0.7], 1, 0), update(&[1.5, 1.1], 1, 0)]).ctx("delta")?.values(),
        &[0.0, -0.1],
        "two-client delta",
    )?;
    ensure(
        pseudo_gradient(&s, &[]) == Err(AggregationError::EmptyUpdateSet),
        || "empty update set accepted".into(),
    )?;
    // FedAvg
    let s = state(Algorithm::FedAvg, &[0.0, 0.0], AggregatorHyper::default());
    let next = step_fedavg(&s, &[update(&[1.0, 2.0], 1, 0), update(&[3.0, 4.0], 3, 0)]).ctx("fedavg")?;
    close(next.global_model.values(), &[2.5, 3.5], "weighted FedAvg")?;
    let w = [0.25, -4.0, 7.5];
    let s = state(Algorithm::FedAvg, &[9.0, 9.0, 9.0], AggregatorHyper::default());
    let next = step_fedavg(&s, &[update(&w, 2, 0), update(&w, 9, 0), update(&w, 1, 0)]).ctx("fedavg")?;
    close(next.global_model.values(), &w, "identical clients")?;
    // FedAvgM, beta = 0.9
    let s = state(Algorithm::FedAvgM, &[1.0, 1.0], AggregatorHyper::default());
    let s1 = step_fedavgm(&s, &[update(&[0.5, 0.7], 1, 0)]).ctx("fedavgm")?;
    close(s1.momentum.as_ref().unwrap().values(), &[-0.5, -0.3], "first momentum")?;
    let s2 = step_fedavgm(&s1, &[update(&[0.0, 0.4], 1, 1)]).ctx("fedavgm")?;
    close(s2.momentum.as_ref().unwrap().values(), &[-0.95, -0.57], "second momentum")?;

    let secs = started.elapsed().as_secs_f64();
    ensure(secs < 5.0, || format!("took {secs:.1} s, limit 5 s"))?;
    Ok(format!(
        "100 random instances: |FedAvg - brute force| <= {worst_brute:.1e}, |FedAvgM(0,1) - FedAvg| <= {worst_m:.1e}; hand examples hold"
    ))
}

fn adaptive_and_async() -> Check {
    let started = Instant::now();
    // Adagrad
    let hyper = AggregatorHyper {
        beta1: 0.0,
        adaptivity: 1e-3,
        server_lr: 1.0,
        ..AggregatorHyper::default()
    };
    let mut s = state(Algorithm::FedAdagrad, &[0.0], hyper);
    s.second_moment = Some(pv(&[0.0]));
    let next = step_fedadaptive(&s, &[update(&[0.5], 1, 0)], AdaptiveVariant::Adagrad).ctx("adagrad")?;
    close(next.second_moment.as_ref().unwrap().values(), &[0.25], "Adagrad v")?;
    close(next.global_model.values(), &[0.5 / 0.501], "Adagrad step")?;
    ensure((next.global_model.values()[0] - 0.998004).abs() < 5e-7, || "Adagrad step is not 0.998004".into())?;
    // Yogi
    let mut s = state(Algorithm::FedYogi, &[0.0], AggregatorHyper { beta2: 0.99, ..AggregatorHyper::default() });
    s.second_moment = Some(pv(&[0.01]));
    let next = step_fedadaptive(&s, &[update(&[0.5], 1, 0)], AdaptiveVariant::Yogi).ctx("yogi")?;
    close(next.second_moment.as_ref().unwrap().values(), &[0.0125], "Yogi v")?;
    // zero pseudo-gradient
    for variant in [AdaptiveVariant::Adagrad, AdaptiveVariant::Adam, AdaptiveVariant::Yogi] {
        let s = state(Algorithm::FedAdam, &[0.3, -2.0], AggregatorHyper::default());
        let next = step_fedadaptive(&s, &[update(&[0.3, -2.0], 5, 0)], variant).ctx("adaptive")?;
        ensure(next.global_model.values() == s.global_model.values(), || format!("{variant:?} moved on a zero delta"))?;
    }
    // FedAsync
    let full = AggregatorHyper { async_alpha: 1.0, ..AggregatorHyper::default() };
    let next = step_fedasync(&state(Algorithm::FedAsync, &[4.0, -1.0], full), &update(&[2.0, 3.0], 1, 0)).ctx("fedasync")?;
    close(next.global_model.values(), &[2.0, 3.0], "full mixing")?;
    let next = step_fedasync(&state(Algorithm::FedAsync, &[0.0], AggregatorHyper::default()), &update(&[1.0], 1, 0)).ctx("fedasync")?;
    close(next.global_model.values(), &[0.9], "fresh update")?;
    let mut s = state(Algorithm::FedAsync, &[0.0], AggregatorHyper::default());
    s.round = 3;
    ensure((staleness_weight(&s.hyper, 3) - 0.45).abs() <= EXACT, || "alpha_3 != 0.45".into())?;
    let next = step_fedasync(&s, &update(&[1.0], 1, 0)).ctx("fedasync")?;
    close(next.global_model.values(), &[0.45], "staleness 3")?;
    ensure(
        matches!(step_fedasync(&s, &update(&[1.0], 1, 4)), Err(AggregationError::NegativeStaleness { .. })),
        || "future base round accepted".into(),
    )?;
    // FedBuff
    let s = state(Algorithm::FedBuff, &[0.2, 0.4], AggregatorHyper { buffer_size: 1, ..AggregatorHyper::default() });
    let (next, emitted) = step_fedbuff(&s, &update(&[1.7, -3.1], 1, 0)).ctx("fedbuff")?;
    ensure(emitted, || "K=1 did not emit".into())?;
    close(next.global_model.values(), &[1.7, -3.1], "K=1")?;
    let s = state(Algorithm::FedBuff, &[0.0], AggregatorHyper { buffer_size: 3, ..AggregatorHyper::default() });
    let (s1, e1) = step_fedbuff(&s, &update(&[1.0], 1, 0)).ctx("fedbuff")?;
    let (s2, e2) = step_fedbuff(&s1, &update(&[2.0], 1, 0)).ctx("fedbuff")?;
    ensure(!e1 && !e2 && s2.global_model == s.global_model && s2.round == 0, || "K=3 changed the model early".into())?;
    let s = state(Algorithm::FedBuff, &[0.0], AggregatorHyper { buffer_size: 2, ..AggregatorHyper::default() });
    let (s1, _) = step_fedbuff(&s, &update(&[1.0], 1, 0)).ctx("fedbuff")?;
    let (s2, emitted) = step_fedbuff(&s1, &update(&[3.0], 1, 0)).ctx("fedbuff")?;
    ensure(emitted && s2.round == 1, || "K=2 did not emit".into())?;
    close(s2.global_model.values(), &[2.0], "K=2 mean")?;

    // random FedAsync properties
    let mut rng = ChaCha8Rng::seed_from_u64(0xa5);
    for case in 0..1000 {
        let dim = rng.random_range(1..=20);
        let hyper = AggregatorHyper {
            async_alpha: rng.random_range(0.01..=1.0),
            staleness_exponent: rng.random_range(0.0..3.0),
            ..AggregatorHyper::default()
        };
        let global: Vec<f64> = (0..dim).map(|_| rng.random_range(-5.0..5.0)).collect();
        let client: Vec<f64> = (0..dim).map(|_| rng.random_range(-5.0..5.0)).collect();
        let mut s = state(Algorithm::FedAsync, &global, hyper);
        s.round = rng.random_range(0..30);
        let base = rng.random_range(0..=s.round);
        let next = step_fedasync(&s, &update(&client, 1, base)).ctx(&format!("case {case}"))?;
        ensure(next.round == s.round + 1, || format!("case {case}: round not advanced by one"))?;
        for ((g, c), n) in global.iter().zip(&client).zip(next.global_model.values()) {
            let (lo, hi) = if g < c { (g, c) } else { (c, g) };
            ensure(*n >= lo - EXACT && *n <= hi + EXACT, || {
                format!("case {case}: {n} outside [{lo}, {hi}]")
            })?;
        }
        for st in 0..50 {
            let (a, b) = (staleness_weight(&hyper, st), staleness_weight(&hyper, st + 1));
            ensure(b <= a, || format!("case {case}: alpha increases from s={st} to s={}", st + 1))?;
        }
    }
    let secs = started.elapsed().as_secs_f64();
    ensure(secs < 5.0, || format!("took {secs:.1} s, limit 5 s"))?;
    Ok("Adagrad/Yogi/FedAsync/FedBuff hand examples hold; 1000 random FedAsync cases convex and staleness-monotone".into())
}

// ------------------------------------------------------------ gradients

fn random_spec(kind: &str, rng: &mut ChaCha8Rng) -> ModelSpec {
    let classes = rng.random_range(2..=5);
    let spec = match kind {
        "logistic_regression" => ModelSpec::logistic(rng.random_range(2..=8), classes),
        "mlp" => {
            let depth = rng.random_range(1..=2);
            let hidden: Vec<usize> = (0..depth).map(|_| rng.random_range(2..=6)).collect();
            ModelSpec::mlp(rng.random_range(2..=6), &hidden, classes)
        }
        _ => {
            let side = rng.random_range(10..=12);
            ModelSpec::cnn2(
                [rng.random_range(1..=2), side, side],
                [rng.random_range(2..=3), rng.random_range(2..=4)],
                3,
                rng.random_range(4..=8),
                classes,
            )
        }
    };
    spec.with_seed(rng.random())
}

fn gradient_checks() -> Check {
    let started = Instant::now();
    let mut summary = Vec::new();
    for kind in ["logistic_regression", "mlp", "cnn2"] {
        let mut rng = ChaCha8Rng::seed_from_u64(0x6c);
        let mut worst = 0f64;
        for instance in 0..20 {
            let spec = random_spec(kind, &mut rng);
            let network = spec.network().ctx(kind)?;
            let mut params = spec.init::<f64>().ctx(kind)?.into_values();
            params.iter_mut().for_each(|p| *p += rng.random_range(-0.1..0.1));
            let features: Vec<f64> = (0..3 * spec.input_len()).map(|_| rng.random_range(0.0..1.0)).collect();
            let labels: Vec<usize> = (0..3).map(|_| rng.random_range(0..spec.num_classes)).collect();
            let data = LocalDataset::new(features, spec.input_len(), labels, spec.num_classes, 0.0, 0).ctx(kind)?;
            let loss = if instance % 2 == 0 { Loss::CrossEntropy } else { Loss::Mse };
            let check = gradient_check(&network, &params, &data, &[0, 1, 2], loss, 1e-5);
            ensure(check.relative_error <= 1e-5, || {
                format!("{kind} instance {instance} ({loss:?}): relative error {:.2e}", check.relative_error)
            })?;
            worst = worst.max(check.relative_error);
        }
        summary.push(format!("{kind} {worst:.1e}"));
    }
    let secs = started.elapsed().as_secs_f64();
    ensure(secs < 60.0, || format!("took {secs:.1} s, limit 60 s"))?;
    Ok(format!("20 instances per model, worst relative error: {}", summary.join(", ")))
}

// ------------------------------------------------------------- processes

/// A child process killed on drop.
struct Proc {
    child: Child,
    _stdout: Option<BufReader<ChildStdout>>,
}

impl Proc {
    fn kill(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

impl Drop for Proc {
    fn drop(&mut self) {
        self.kill();
    }
}

struct Cli {
    dir: PathBuf,
    profile: PathBuf,
    server: String,
}

impl Cli {
    fn run(&self, args: &[&str]) -> Result<String, String> {
        let out = Command::new(BIN)
            .args(args)
            .current_dir(&self.dir)
            .env("FEDSILO_PROFILE", &self.profile)
            .env("FEDSILO_SERVER", &self.server)
            .env("FEDSILO_PASSWORD", PASSWORD)
            .env("FEDSILO_LOG", "warn")
            .output()
            .map_err(|e| format!("fedsilo {}: {e}", args.join(" ")))?;
        if !out.status.success() {
            return Err(format!(
                "fedsilo {} exited with {}: {}",
                args.join(" "),
                out.status,
                String::from_utf8_lossy(&out.stderr).trim()
            ));
        }
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    }

    fn json(&self, args: &[&str]) -> Result<serde_json::Value, String> {
        let mut all = vec!["--json"];
        all.extend_from_slice(args);
        let text = self.run(&all)?;
        serde_json::from_str(&text).ctx(&format!("output of fedsilo {}", args.join(" ")))
    }

    fn spawn(&self, args: &[&str], log: &str) -> Result<Proc, String> {
        let log = std::fs::File::create(self.dir.join(log)).ctx("log file")?;
        let child = Command::new(BIN)
            .args(args)
            .current_dir(&self.dir)
            .env("FEDSILO_PROFILE", &self.profile)
            .env("FEDSILO_SERVER", &self.server)
            .env("FEDSILO_LOG", "info")
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(log)
            .spawn()
            .ctx("spawn fedsilo")?;
        Ok(Proc { child, _stdout: None })
    }

    /// Starts `fedsilo serve` on a free port and points this CLI at it.
    fn start_server(&mut self, data_dir: &str) -> Result<Proc, String> {
        let mut proc = self.spawn(
            &["serve", "--port", "0", "--data-dir", data_dir, "--heartbeat-interval", "1"],
            "server.log",
        )?;
        let mut stdout = BufReader::new(proc.child.stdout.take().expect("piped"));
        let mut line = String::new();
        stdout.read_line(&mut line).ctx("server stdout")?;
        let url = line
            .trim()
            .strip_prefix("listening on ")
            .ok_or_else(|| {
                let log = std::fs::read_to_string(self.dir.join("server.log")).unwrap_or_default();
                format!("server did not start: {line:?} {log}")
            })?
            .to_string();
        proc._stdout = Some(stdout);
        self.server = url;
        Ok(proc)
    }
}

fn wait_terminal(client: &Client, id: &str, limit: Duration) -> Result<ExperimentRecord, String> {
    let started = Instant::now();
    loop {
        let record = client.experiment(id).ctx("experiment status")?;
        if record.status.is_terminal() {
            return Ok(record);
        }
        if started.elapsed() > limit {
            return Err(format!("{id} still {:?} after {limit:?}", record.status));
        }
        std::thread::sleep(Duration::from_millis(250));
    }
}

fn accuracies(record: &ExperimentRecord) -> Vec<f64> {
    record
        .rounds
        .iter()
        .filter_map(|r| r.global_val_accuracy)
        .collect()
}

fn finished_rounds(record: &ExperimentRecord) -> usize {
    record.rounds.iter().filter(|r| r.finished_at.is_some()).count()
}

// ---------------------------------------------------------- e2e session

const DP_CLIP: f64 = 100.0;

#[derive(Default)]
struct Runs {
    fedavg: Option<ExperimentRecord>,
    fedavgm: Option<ExperimentRecord>,
    fedavg_again: Option<ExperimentRecord>,
    private: Option<ExperimentRecord>,
    pair_seconds: f64,
    comparison: Option<(ComparisonReport, String)>,
    persistence: Option<Result<String, String>>,
}

struct E2eSession {
    runs: Runs,
    error: Option<String>,
    mnist: bool,
    _dir: tempfile::TempDir,
}

impl E2eSession {
    fn run() -> Self {
        let dir = tempfile::tempdir().expect("tempdir");
        let mnist = std::env::var_os("FEDSILO_MNIST_DIR").map(PathBuf::from);
        let mut runs = Runs::default();
        let error = Self::drive(dir.path(), mnist.as_deref(), &mut runs).err();
        E2eSession {
            runs,
            error,
            mnist: mnist.is_some(),
            _dir: dir,
        }
    }

    fn drive(dir: &Path, mnist: Option<&Path>, runs: &mut Runs) -> Result<(), String> {
        let mut cli = Cli {
            dir: dir.to_path_buf(),
            profile: dir.join("profile.json"),
            server: String::new(),
        };
        match mnist {
            Some(m) => {
                let images = m.join("train-images-idx3-ubyte");
                let labels = m.join("train-labels-idx1-ubyte");
                cli.run(&[
                    "data", "partition", "--images", &images.to_string_lossy(), "--labels",
                    &labels.to_string_lossy(), "--shards", "5", "--out", "data",
                ])?;
            }
            None => {
                cli.run(&["data", "synth", "--count", "10000", "--seed", "1", "--out", "data", "--shards", "5"])?;
            }
        }
        let mut server = cli.start_server("server-data")?;
        cli.run(&["account", "create", "--email", "admin@site.test", "--name", "Admin"])?;
        cli.run(&["login", "--email", "admin@site.test"])?;
        let fed = cli.json(&["fed", "create", "desk-scale"])?["federation_id"]
            .as_str()
            .ok_or("fed create printed no id")?
            .to_string();
        let mut roster = Vec::new();
        for k in 1..=5 {
            let out = cli.json(&[
                "agent", "register", "--name", &format!("site-{k}"), "--config",
                &format!("agent-{k}.json"), "--data", &format!("data/shard-{k}/data.json"),
            ])?;
            roster.push(out["endpoint"]["endpoint_id"].as_str().ok_or("no endpoint id")?.to_string());
        }
        let mut agents = Vec::new();
        for k in 1..=5 {
            agents.push(cli.spawn(&["agent", "run", "--config", &format!("agent-{k}.json")], &format!("agent-{k}.log"))?);
        }
        let profile: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&cli.profile).ctx("profile")?).ctx("profile")?;
        let token = profile["token"].as_str().ok_or("profile has no token")?.to_string();
        let client = Client::new(&cli.server, Some(token.clone()));
        let started = Instant::now();
        loop {
            let eps = client.endpoints(&fed).ctx("endpoints")?;
            if eps.len() == 5 && eps.iter().all(|e| e.status != EndpointStatus::Offline) {
                break;
            }
            if started.elapsed() > Duration::from_secs(30) {
                return Err("agents did not come online within 30 s".into());
            }
            std::thread::sleep(Duration::from_millis(200));
        }

        let roster_arg = roster.join(",");
        let template = cli.run(&["exp", "launch", "--print-template", "--roster", &roster_arg])?;
        std::fs::write(dir.join("fedavg.json"), &template).ctx("write config")?;
        let write_config = |name: &str, config: &ExperimentConfig| {
            std::fs::write(dir.join(name), serde_json::to_string_pretty(config).unwrap()).ctx("write config")
        };
        let mut fedavgm = ExperimentConfig::template(&fed, roster.clone());
        fedavgm.name = "mnist-fedavgm".into();
        fedavgm.algorithm = Algorithm::FedAvgM;
        fedavgm.aggregator_hyper.server_momentum = 0.9;
        fedavgm.aggregator_hyper.server_lr = 1.0;
        write_config("fedavgm.json", &fedavgm)?;
        let mut private = ExperimentConfig::template(&fed, roster.clone());
        private.name = "mnist-fedavg-dp".into();
        private.privacy = PrivacyConfig::laplace(1e6, DP_CLIP);
        write_config("private.json", &private)?;

        let launch = |file: &str| -> Result<ExperimentRecord, String> {
            let id = cli.run(&["exp", "launch", "-f", file])?.trim().to_string();
            wait_terminal(&client, &id, Duration::from_secs(1800))
        };
        let pair = Instant::now();
        runs.fedavg = Some(launch("fedavg.json")?);
        runs.fedavgm = Some(launch("fedavgm.json")?);
        runs.pair_seconds = pair.elapsed().as_secs_f64();
        let ids = [
            runs.fedavg.as_ref().unwrap().config.experiment_id.clone(),
            runs.fedavgm.as_ref().unwrap().config.experiment_id.clone(),
        ];
        cli.run(&["exp", "compare", &ids[0], &ids[1], "-o", "comparison"])?;
        let report: ComparisonReport =
            serde_json::from_str(&std::fs::read_to_string(dir.join("comparison.json")).ctx("comparison.json")?)
                .ctx("comparison.json")?;
        let csv = std::fs::read_to_string(dir.join("comparison.csv")).ctx("comparison.csv")?;
        runs.comparison = Some((report, csv));
        runs.fedavg_again = Some(launch("fedavg.json")?);
        runs.private = Some(launch("private.json")?);
        runs.persistence = Some(Self::kill_and_restart(&mut cli, &mut server, &client, &fed, &roster, &token));
        drop(agents);
        Ok(())
    }

    /// Kills the server after round k of a fresh run and checks the record
    /// and the blob store after a restart on the same data directory.
    fn kill_and_restart(
        cli: &mut Cli,
        server: &mut Proc,
        client: &Client,
        fed: &str,
        roster: &[String],
        token: &str,
    ) -> Result<String, String> {
        let mut config = ExperimentConfig::template(fed, roster.to_vec());
        config.name = "interrupted".into();
        let id = client.launch(&config).ctx("launch")?.config.experiment_id;
        let k = 2;
        let started = Instant::now();
        let before = loop {
            let record = client.experiment(&id).ctx("status")?;
            if finished_rounds(&record) >= k {
                break record;
            }
            if record.status.is_terminal() || started.elapsed() > Duration::from_secs(600) {
                return Err(format!("run ended or stalled before round {k}: {:?}", record.status));
            }
            std::thread::sleep(Duration::from_millis(20));
        };
        server.kill();
        let seen: Vec<_> = before.rounds.iter().filter(|r| r.finished_at.is_some()).cloned().collect();

        *server = cli.start_server("server-data")?;
        let client = Client::new(&cli.server, Some(token.to_string()));
        let after = client.experiment(&id).ctx("status after restart")?;
        ensure(after.status == ExperimentStatus::Failed, || {
            format!("status after restart is {:?}, expected Failed", after.status)
        })?;
        let kept: Vec<_> = after.rounds.iter().filter(|r| r.finished_at.is_some()).collect();
        ensure(kept.len() >= seen.len(), || format!("{} finished rounds before the kill, {} after", seen.len(), kept.len()))?;
        for (i, r) in kept.iter().enumerate() {
            ensure(r.round == i as u64 + 1, || format!("finished rounds are not 1..k: {:?}", kept.iter().map(|r| r.round).collect::<Vec<_>>()))?;
        }
        for (old, new) in seen.iter().zip(&kept) {
            ensure(old.global_val_accuracy == new.global_val_accuracy && old.global_model == new.global_model, || {
                format!("round {} changed across the restart", old.round)
            })?;
        }
        for r in &kept {
            let digest = r.global_model.as_ref().ok_or_else(|| format!("round {} has no model", r.round))?;
            let bytes = client.get_blob(&digest.sha256).ctx("round model blob")?;
            deserialize::<f64>(&bytes).ctx("round model blob")?;
        }

        let mut rng = ChaCha8Rng::seed_from_u64(0xb10b);
        for i in 0..1000 {
            let tensors = rng.random_range(1..=3);
            let layout = ModelLayout::from_pairs((0..tensors).map(|t| {
                let rank = rng.random_range(1..=3);
                (format!("t{t}"), (0..rank).map(|_| rng.random_range(1..=6)).collect::<Vec<u32>>())
            }))
            .ctx("layout")?;
            let values: Vec<f64> = (0..layout.total_len())
                .map(|_| loop {
                    let v = f64::from_bits(rng.random());
                    if v.is_finite() {
                        break v;
                    }
                })
                .collect();
            let params = Parameters::new(Arc::new(layout), values).ctx("params")?;
            let bytes = serialize(&params);
            let back = deserialize::<f64>(&bytes).ctx(&format!("payload {i}"))?;
            ensure(
                back.layout() == params.layout()
                    && back.values().iter().zip(params.values()).all(|(a, b)| a.to_bits() == b.to_bits()),
                || format!("payload {i}: deserialize(serialize(x)) != x"),
            )?;
            let digest = client.put_blob(Some(fed), bytes.clone()).ctx("put blob")?;
            let fetched = client.get_blob(&digest.sha256).ctx("get blob")?;
            ensure(fetched == bytes, || format!("payload {i}: blob changed in the store"))?;
        }
        Ok(format!(
            "killed after round {}; restarted record is Failed with rounds 1..{} intact ({}); 1000 random payloads round-trip bit-exact through serialize and the blob store",
            seen.len(),
            kept.len(),
            after.failure.as_deref().unwrap_or("")
        ))
    }

    fn setup(&self) -> Result<(), String> {
        match &self.error {
            Some(e) => Err(format!("end-to-end session failed: {e}")),
            None => Ok(()),
        }
    }

    fn end_to_end(&self) -> Check {
        self.setup()?;
        let runs = &self.runs;
        let mut detail = Vec::new();
        for (label, record) in [("FedAvg", &runs.fedavg), ("FedAvgM", &runs.fedavgm)] {
            let record = record.as_ref().ok_or("missing run")?;
            ensure(record.status == ExperimentStatus::Finished, || {
                format!("{label} ended {:?}: {}", record.status, record.failure.as_deref().unwrap_or(""))
            })?;
            let acc = accuracies(record);
            ensure(acc.len() == 10, || format!("{label}: {} evaluated rounds, expected 10", acc.len()))?;
            let gain = acc[9] - acc[0];
            ensure(gain >= 0.20, || format!("{label}: accuracy {:.3} -> {:.3}, gain below 20 points", acc[0], acc[9]))?;
            detail.push(format!("{label} {:.3} -> {:.3}", acc[0], acc[9]));
        }
        let final_fedavg = *accuracies(runs.fedavg.as_ref().unwrap()).last().unwrap();
        if self.mnist {
            ensure(final_fedavg >= 0.90, || format!("final FedAvg accuracy {final_fedavg:.3} < 0.90 on MNIST"))?;
            detail.push("MNIST final >= 0.90".into());
        } else {
            detail.push("synthetic digits; true-MNIST 0.90 threshold NOT EVALUATED (set FEDSILO_MNIST_DIR)".into());
        }
        let (report, csv) = runs.comparison.as_ref().ok_or("no comparison")?;
        ensure(report.series.len() == 2 && report.rounds == 10, || "comparison is not two 10-round series".into())?;
        for (series, record) in report.series.iter().zip([&runs.fedavg, &runs.fedavgm]) {
            let points: Vec<f64> = series.accuracy.iter().flatten().copied().collect();
            ensure(points.len() == 10 && points == accuracies(record.as_ref().unwrap()), || {
                format!("series {} does not match its run", series.experiment_id)
            })?;
        }
        ensure(csv.lines().count() == 11, || format!("comparison CSV has {} lines, expected 11", csv.lines().count()))?;
        ensure(runs.pair_seconds < 600.0, || format!("both runs took {:.0} s, limit 600 s", runs.pair_seconds))?;
        Ok(format!("{}; comparison has two 10-point series; both runs {:.0} s", detail.join(", "), runs.pair_seconds))
    }

    fn determinism(&self) -> Check {
        self.setup()?;
        let a = self.runs.fedavg.as_ref().ok_or("missing run")?;
        let b = self.runs.fedavg_again.as_ref().ok_or("missing repeat")?;
        ensure(b.status == ExperimentStatus::Finished, || format!("repeat ended {:?}", b.status))?;
        let (da, db) = (a.final_model.as_ref().ok_or("no final model")?, b.final_model.as_ref().ok_or("no final model")?);
        ensure(da.sha256 == db.sha256, || format!("final models differ: {} vs {}", da.sha256, db.sha256))?;
        for (ra, rb) in a.rounds.iter().zip(&b.rounds) {
            ensure(ra.global_model == rb.global_model, || format!("round {} models differ", ra.round))?;
        }
        Ok(format!("two FedAvg runs end in the same model {}", &da.sha256[..16]))
    }

    fn persistence(&self) -> Check {
        self.setup()?;
        self.runs.persistence.clone().unwrap_or_else(|| Err("not run".into()))
    }
}

fn dp_statistics(session: Option<&E2eSession>) -> Check {
    let zeros = Parameters::<f64>::zeros(Arc::new(ModelLayout::flat(200_000)));
    let noisy = apply_dp(&zeros, &PrivacyConfig::laplace(1.0, 1.0).with_seed(11)).ctx("apply_dp")?;
    let v = noisy.delta.values();
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
    ensure((var / 2.0 - 1.0).abs() <= 0.10, || format!("noise variance {var:.4}, expected 2 within 10%"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(0xd9);
    for case in 0..1000 {
        let dim = rng.random_range(1..=100);
        let scale = rng.random_range(0.001..100.0);
        let delta = pv(&(0..dim).map(|_| rng.random_range(-scale..scale)).collect::<Vec<_>>());
        let clip = rng.random_range(0.01..5.0);
        let (clipped, _) = clip_to_norm(&delta, clip);
        let out = apply_dp(&delta, &PrivacyConfig::laplace(1.0, clip)).ctx("apply_dp")?;
        ensure(clipped.l2_norm() <= clip * (1.0 + EXACT) && out.clipped_norm <= clip * (1.0 + EXACT), || {
            format!("case {case}: pre-noise norm {} exceeds C = {clip}", clipped.l2_norm())
        })?;
    }
    let mut detail = format!("pooled Laplace variance {var:.4} (2(C/eps)^2 = 2); 1000 clipped deltas within C");

    let session = session.ok_or("end-to-end session not run")?;
    session.setup()?;
    let plain = session.runs.fedavg.as_ref().ok_or("missing run")?;
    let private = session.runs.private.as_ref().ok_or("missing private run")?;
    ensure(private.status == ExperimentStatus::Finished, || format!("private run ended {:?}", private.status))?;
    let (a, b) = (*accuracies(plain).last().unwrap(), *accuracies(private).last().ok_or("no accuracy")?);
    ensure((a - b).abs() <= 0.01, || format!("eps=1e6 final accuracy {b:.4} vs {a:.4} without DP"))?;
    for r in &private.rounds {
        for (ep, entry) in &r.per_client {
            if entry.status == ClientRoundStatus::Success {
                let n = entry.dp_clipped_norm.ok_or_else(|| format!("round {} {ep}: no clipped norm", r.round))?;
                ensure(n <= DP_CLIP * (1.0 + EXACT), || format!("round {} {ep}: clipped norm {n} > C", r.round))?;
            }
        }
    }
    detail.push_str(&format!("; eps=1e6 final accuracy {b:.4} vs {a:.4} without DP"));
    Ok(detail)
}

// ---------------------------------------------------------------- fabric

fn metrics() -> ResourceMetrics {
    ResourceMetrics {
        cpu_percent: 10.0,
        gpu_percent: None,
        mem_used_bytes: 1 << 30,
        mem_total_bytes: 4 << 30,
        net_tx_bytes_per_s: 0.0,
        net_rx_bytes_per_s: 0.0,
        sampled_at: chrono::Utc::now(),
    }
}

fn rejected<T: std::fmt::Debug>(what: &str, r: Result<T, ClientError>) -> Result<u16, String> {
    match r {
        Err(e) if e.status().is_some_and(is_auth_rejection) => Ok(e.status().unwrap()),
        other => Err(format!("{what}: expected 401/403, got {other:?}")),
    }
}

struct Tenant {
    client: Client,
    account_id: String,
    federation_id: String,
    endpoint_id: String,
    agent: Client,
}

fn tenant(url: &str, email: &str) -> Result<Tenant, String> {
    let anon = Client::new(url, None);
    let account = anon
        .create_account(&CreateAccountRequest {
            display_name: email.into(),
            email: email.into(),
            password: PASSWORD.into(),
        })
        .ctx("create account")?;
    let client = anon.with_token(anon.login(email, PASSWORD).ctx("login")?.token);
    let fed = client.create_federation(&format!("fed of {email}")).ctx("create federation")?;
    let reg = client
        .register_endpoint(&fed.federation_id, "site", DeviceType::Cpu)
        .ctx("register endpoint")?;
    Ok(Tenant {
        agent: anon.with_token(reg.agent_token),
        client,
        account_id: account.account_id,
        federation_id: fed.federation_id,
        endpoint_id: reg.endpoint.endpoint_id,
    })
}

fn histogram_task(id: String) -> TaskEnvelope {
    TaskEnvelope {
        task_id: id,
        experiment_id: "fabric".into(),
        round: 0,
        kind: TaskKind::DataHistogram,
        config_payload: serde_json::json!({}),
        model_blob: None,
        deadline: chrono::Utc::now() + chrono::Duration::minutes(10),
    }
}

fn fabric() -> Check {
    let rt = tokio::runtime::Runtime::new().ctx("runtime")?;
    let dir = tempfile::tempdir().ctx("tempdir")?;
    let mut config = ServerConfig::new(dir.path().join("fabric"));
    config.heartbeat_interval_s = 0.5;
    let server = rt
        .block_on(async {
            let state = fedsilo_server::build(&config, Arc::new(SystemClock)).map_err(|e| e.to_string())?;
            fedsilo_server::start("127.0.0.1:0".parse().unwrap(), state).await.map_err(|e| e.to_string())
        })
        .map_err(fail("start server"))?;
    let url = server.url();
    let a = tenant(&url, "a@site.test")?;
    let b = tenant(&url, "b@site.test")?;
    let mut detail = Vec::new();

    // at-most-once delivery to 10 concurrent pollers
    let total = 200;
    let done = Arc::new(AtomicBool::new(false));
    let seen = Arc::new(Mutex::new(Vec::new()));
    let pollers: Vec<_> = (0..10)
        .map(|i| {
            let (agent, ep, done, seen) = (a.agent.clone(), a.endpoint_id.clone(), done.clone(), seen.clone());
            std::thread::spawn(move || -> Result<(), String> {
                let mut empty = 0;
                while empty < 2 {
                    let tasks = agent.poll_tasks(&ep, Duration::from_millis(300), 1 + i % 3).ctx("poll")?;
                    if tasks.is_empty() {
                        if done.load(Ordering::SeqCst) {
                            empty += 1;
                        }
                    } else {
                        seen.lock().unwrap().extend(tasks.into_iter().map(|t| t.task_id));
                    }
                }
                Ok(())
            })
        })
        .collect();
    for i in 0..total {
        server
            .state
            .dispatch
            .enqueue(&a.federation_id, &a.endpoint_id, histogram_task(format!("task-{i}")))
            .ctx("enqueue")?;
        if i % 20 == 0 {
            std::thread::sleep(Duration::from_millis(5));
        }
    }
    done.store(true, Ordering::SeqCst);
    for p in pollers {
        p.join().map_err(|_| "poller panicked".to_string())??;
    }
    let mut ids = seen.lock().unwrap().clone();
    let delivered = ids.len();
    ids.sort();
    ids.dedup();
    ensure(ids.len() == delivered, || format!("{} duplicate deliveries", delivered - ids.len()))?;
    ensure(delivered == total, || format!("{delivered} of {total} tasks delivered"))?;
    detail.push(format!("{total} tasks to 10 pollers, each exactly once"));

    // heartbeat gap
    let status = a.agent.heartbeat(&a.endpoint_id, &metrics()).ctx("heartbeat")?.status;
    let beat = Instant::now();
    ensure(status != EndpointStatus::Offline, || "offline right after a heartbeat".into())?;
    std::thread::sleep(Duration::from_millis(750));
    let early = a.client.endpoint(&a.endpoint_id).ctx("endpoint")?.status;
    ensure(early != EndpointStatus::Offline, || "offline after 1.5 intervals".into())?;
    std::thread::sleep(Duration::from_millis(1900).saturating_sub(beat.elapsed()));
    let late = a.client.endpoint(&a.endpoint_id).ctx("endpoint")?.status;
    ensure(late == EndpointStatus::Offline, || format!("still {late:?} after 3 missed intervals"))?;
    detail.push("offline after 3 missed heartbeats".into());

    // access control
    a.agent.heartbeat(&a.endpoint_id, &metrics()).ctx("heartbeat")?;
    let exp_a = a
        .client
        .launch(&ExperimentConfig::template(&a.federation_id, vec![a.endpoint_id.clone()]))
        .ctx("launch in own federation")?
        .config
        .experiment_id;
    let blob_a = a.client.put_blob(Some(&a.federation_id), vec![1, 2, 3]).ctx("put blob")?.sha256;
    let anon = Client::new(&url, None);
    let forged = Client::new(&url, Some(format!("fs_{}", "0".repeat(64))));
    let mut probed = 0;
    for (method, template) in fedsilo_server::http::ROUTES {
        let path = template
            .replace("/federations/{id}", &format!("/federations/{}", a.federation_id))
            .replace("{account_id}", &a.account_id)
            .replace("/endpoints/{id}", &format!("/endpoints/{}", a.endpoint_id))
            .replace("/tasks/{id}", "/tasks/task-0")
            .replace("{digest}", &blob_a)
            .replace("/experiments/{id}", &format!("/experiments/{exp_a}"));
        let public = fedsilo_server::http::PUBLIC_ROUTES.contains(&(*method, *template));
        for (who, client) in [("no token", &anon), ("unknown token", &forged)] {
            let code = client.probe(method, &path).ctx(&format!("{method} {path}"))?;
            if public {
                ensure(code != 401 && code != 403, || format!("{who}: public {method} {path} returned {code}"))?;
            } else {
                ensure(code == 401, || format!("{who}: {method} {path} returned {code}, expected 401"))?;
            }
        }
        probed += 1;
    }
    let outsider = &b.client;
    let fa = a.federation_id.as_str();
    let checks: Vec<(&str, Result<u16, String>)> = vec![
        ("federation", rejected("federation", outsider.federation(fa))),
        ("invite", rejected("invite", outsider.invite(fa, "c@site.test"))),
        ("accept", rejected("accept", outsider.accept(fa))),
        ("remove member", rejected("remove member", outsider.remove_member(fa, &a.account_id))),
        ("endpoints", rejected("endpoints", outsider.endpoints(fa))),
        (
            "data distribution",
            rejected(
                "data distribution",
                outsider.data_distribution(fa, &DataDistributionRequest { roster: vec![a.endpoint_id.clone()], model_spec: None }),
            ),
        ),
        ("register endpoint", rejected("register endpoint", outsider.register_endpoint(fa, "x", DeviceType::Cpu))),
        ("endpoint", rejected("endpoint", outsider.endpoint(&a.endpoint_id))),
        ("poll with api token", rejected("poll", outsider.poll_tasks(&a.endpoint_id, Duration::ZERO, 1))),
        ("poll with other agent", rejected("poll", b.agent.poll_tasks(&a.endpoint_id, Duration::ZERO, 1))),
        ("heartbeat with other agent", rejected("heartbeat", b.agent.heartbeat(&a.endpoint_id, &metrics()))),
        ("agent token on api", rejected("federations", a.agent.federations())),
        ("put blob", rejected("put blob", outsider.put_blob(Some(fa), vec![9]))),
        ("get blob", rejected("get blob", outsider.get_blob(&blob_a))),
        ("experiments", rejected("experiments", outsider.experiments(fa))),
        (
            "launch",
            rejected("launch", outsider.launch(&ExperimentConfig::template(fa, vec![a.endpoint_id.clone()]))),
        ),
        ("experiment", rejected("experiment", outsider.experiment(&exp_a))),
        ("logs", rejected("logs", outsider.logs(&exp_a, 0, Duration::ZERO))),
        ("report", rejected("report", outsider.report(&exp_a))),
        ("compare", rejected("compare", outsider.compare(std::slice::from_ref(&exp_a)))),
        ("cancel", rejected("cancel", outsider.cancel(&exp_a))),
    ];
    for (_, outcome) in &checks {
        outcome.clone()?;
    }
    detail.push(format!(
        "{probed} routes: 401 without a valid token except account creation and login; {} cross-tenant calls rejected",
        checks.len()
    ));

    // cross-federation dispatch
    let direct = server
        .state
        .dispatch
        .enqueue(&a.federation_id, &b.endpoint_id, histogram_task("cross".into()));
    ensure(direct.is_err(), || "task for another federation's endpoint was queued".into())?;
    b.agent.heartbeat(&b.endpoint_id, &metrics()).ctx("heartbeat")?;
    let launch = a
        .client
        .launch(&ExperimentConfig::template(&a.federation_id, vec![b.endpoint_id.clone()]));
    let code = match launch {
        Err(e) if e.status().is_some_and(|s| (400..500).contains(&s)) => e.status().unwrap(),
        other => return Err(format!("launch with a foreign endpoint: {other:?}")),
    };
    detail.push(format!("cross-federation dispatch rejected (launch {code})"));
    let _ = a.client.cancel(&exp_a);
    rt.block_on(server.stop());

    detail.push(outage(&rt, dir.path())?);
    Ok(detail.join("; "))
}

/// Five in-process agents keep working through a 10 s server outage.
fn outage(rt: &tokio::runtime::Runtime, dir: &Path) -> Result<String, String> {
    let config = ServerConfig::new(dir.join("outage"));
    let server = rt
        .block_on(async {
            let state = fedsilo_server::build(&config, Arc::new(SystemClock)).map_err(|e| e.to_string())?;
            fedsilo_server::start("127.0.0.1:0".parse().unwrap(), state).await.map_err(|e| e.to_string())
        })
        .map_err(fail("start server"))?;
    let (addr, url) = (server.addr, server.url());
    let owner = tenant(&url, "owner@site.test")?;
    let mut roster = vec![owner.endpoint_id.clone()];
    let mut agents = vec![(owner.endpoint_id.clone(), owner.agent.clone())];
    for k in 2..=5 {
        let reg = owner
            .client
            .register_endpoint(&owner.federation_id, &format!("site-{k}"), DeviceType::Cpu)
            .ctx("register")?;
        roster.push(reg.endpoint.endpoint_id.clone());
        agents.push((reg.endpoint.endpoint_id, owner.client.with_token(reg.agent_token)));
    }
    let (pixels, labels) = synthetic_digits(2000, 5);
    let mut handles = Vec::new();
    for (k, (endpoint_id, agent_client)) in agents.iter().enumerate() {
        let shard = dir.join(format!("outage-shard-{k}"));
        std::fs::create_dir_all(&shard).ctx("shard dir")?;
        let range = k * 400..(k + 1) * 400;
        std::fs::write(shard.join("images.idx"), encode_images(28, 28, &pixels[range.start * 784..range.end * 784]))
            .ctx("write shard")?;
        std::fs::write(shard.join("labels.idx"), encode_labels(&labels[range])).ctx("write shard")?;
        let token = agent_token(agent_client)?;
        let mut cfg = AgentConfig::new(&url, endpoint_id, &token);
        cfg.data = Some(DataLoaderSpec::mnist_idx(shard.join("images.idx"), shard.join("labels.idx")));
        cfg.heartbeat_interval_s = 1.0;
        cfg.poll_wait_s = 5.0;
        let agent = Agent::from_config(cfg).ctx("agent")?;
        handles.push(agent.spawn());
    }
    let started = Instant::now();
    while owner
        .client
        .endpoints(&owner.federation_id)
        .ctx("endpoints")?
        .iter()
        .any(|e| e.status == EndpointStatus::Offline)
    {
        if started.elapsed() > Duration::from_secs(20) {
            return Err("outage agents did not come online".into());
        }
        std::thread::sleep(Duration::from_millis(100));
    }
    let mut exp = ExperimentConfig::template(&owner.federation_id, roster.clone());
    exp.name = "outage".into();
    exp.rounds = 4;
    let id = owner.client.launch(&exp).ctx("launch")?.config.experiment_id;
    let started = Instant::now();
    while finished_rounds(&owner.client.experiment(&id).ctx("status")?) < 1 {
        if started.elapsed() > Duration::from_secs(300) {
            return Err("round 1 did not finish".into());
        }
        std::thread::sleep(Duration::from_millis(50));
    }
    let state = server.abort();
    std::thread::sleep(Duration::from_secs(10));
    let mut restarted = None;
    for _ in 0..50 {
        match rt.block_on(fedsilo_server::start(addr, state.clone())) {
            Ok(s) => {
                restarted = Some(s);
                break;
            }
            Err(_) => std::thread::sleep(Duration::from_millis(100)),
        }
    }
    let restarted = restarted.ok_or_else(|| format!("could not rebind {addr}"))?;
    let record = wait_terminal(&owner.client, &id, Duration::from_secs(600))?;
    let mut completed = 0;
    let mut dropped = 0;
    for (stop, handle) in handles {
        stop.stop();
        let summary = handle.join().map_err(|_| "agent panicked".to_string())?.ctx("agent")?;
        completed += summary.tasks_completed;
        dropped += summary.results_dropped;
    }
    rt.block_on(restarted.stop());
    ensure(record.status == ExperimentStatus::Finished, || {
        format!("run across the outage ended {:?}: {}", record.status, record.failure.as_deref().unwrap_or(""))
    })?;
    for r in &record.rounds {
        let ok = r.per_client.values().filter(|e| e.status == ClientRoundStatus::Success).count();
        ensure(ok == roster.len(), || format!("round {}: {ok} of {} clients succeeded", r.round, roster.len()))?;
    }
    ensure(dropped == 0, || format!("{dropped} results dropped"))?;
    Ok(format!("10 s outage survived: 4 rounds with all 5 clients, {completed} tasks, none lost"))
}

fn agent_token(client: &Client) -> Result<String, String> {
    client.token().map(str::to_string).ok_or_else(|| "client has no token".into())
}

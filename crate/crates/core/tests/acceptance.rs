mod common;

use std::env;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use fedshare_core::data::{partition_clients, synthetic_dataset, DatasetKind};
use fedshare_core::experiment::{run_experiment, ExperimentConfig, Mode, DATA_DIR_ENV};
use fedshare_core::nn::ModelParams;
use fedshare_core::oracle::{fedavg_float, fedavg_quantized};
use fedshare_core::protocol::{run_protocol, RoundConfig, RunOptions, TransportKind};
use fedshare_core::ring::{FixedPointConfig, RingVector};
use fedshare_core::sharing::{reconstruct, rerandomize, split_secret_shares, zero_sharing, ShareTag};
use fedshare_core::transport::{decode_frame, encode_frame, Message, MessageKind};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

const FULL_SCALE_ENV: &str = "FEDSHARE_FULL_SCALE";

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }

    fn error(e: impl std::fmt::Display) -> Self {
        Self::new(false, format!("error: {e}"))
    }
}

fn mnist_dir() -> Option<PathBuf> {
    let dir = env::var_os(DATA_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/mnist")));
    dir.is_dir().then_some(dir)
}

fn mnist_accuracy(m: usize, n: usize, l_f: u32, max_samples: usize, mode: Mode) -> Result<f64, String> {
    let dir = mnist_dir().ok_or_else(|| format!("MNIST not found (set {DATA_DIR_ENV})"))?;
    let cfg = ExperimentConfig {
        dataset: DatasetKind::Mnist,
        data_dir: Some(dir),
        m,
        n,
        iter: 4,
        l: 128,
        l_f,
        seed: 1,
        max_samples,
        mode,
        ..Default::default()
    };
    let out = run_experiment(&cfg).map_err(|e| e.to_string())?;
    if let Some(e) = out.error {
        return Err(e.to_string());
    }
    out.rounds
        .last()
        .and_then(|r| r.test_accuracy)
        .ok_or_else(|| "no accuracy recorded".into())
}

fn random_vector(cfg: FixedPointConfig, raw: Vec<u128>) -> RingVector {
    RingVector::from_values(cfg, raw.into_iter().map(|v| cfg.reduce(v)).collect()).unwrap()
}

fn vector_strategy() -> impl Strategy<Value = RingVector> {
    (3u32..=128)
        .prop_flat_map(|l| (Just(l), 1..l - 1, prop::collection::vec(any::<u128>(), 1..32)))
        .prop_map(|(l, f, raw)| random_vector(FixedPointConfig::new(l, f).unwrap(), raw))
}

fn sharing_correctness() -> Verdict {
    let mut runner = TestRunner::new(Config {
        cases: 10_000,
        failure_persistence: None,
        ..Config::default()
    });
    let result = runner.run(&(vector_strategy(), any::<u64>()), |(v, seed)| {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        for n in [1, 2, 3, 5, 8] {
            let shares = split_secret_shares(&v, n, ShareTag::new(1, 1), &mut rng).unwrap();
            prop_assert_eq!(&reconstruct(&shares).unwrap(), &v);
            let fresh = rerandomize(shares, &mut rng).unwrap();
            prop_assert_eq!(&reconstruct(&fresh).unwrap(), &v);
            let mut sum = RingVector::zeros(v.cfg(), v.len());
            for z in zero_sharing(n, v.len(), v.cfg(), &mut rng).unwrap() {
                sum.add_assign(&z).unwrap();
            }
            prop_assert_eq!(sum, RingVector::zeros(v.cfg(), v.len()));
        }
        Ok(())
    });
    match result {
        Ok(()) => Verdict::new(true, "10000 vectors x n in {1,2,3,5,8}"),
        Err(e) => Verdict::error(e),
    }
}

fn privacy_witness() -> Verdict {
    let cfg = FixedPointConfig::new(64, 16).unwrap();
    let mut src = ChaCha20Rng::seed_from_u64(99);
    let mut checked = 0;
    for pair in 0..1000u64 {
        let a = RingVector::random(cfg, 16, &mut src);
        let b = RingVector::random(cfg, 16, &mut src);
        if a == b {
            continue;
        }
        for n in [2, 3, 5, 8] {
            let split = |v: &RingVector| {
                let mut rng = ChaCha20Rng::seed_from_u64(pair);
                split_secret_shares(v, n, ShareTag::new(1, 1), &mut rng).unwrap()
            };
            let (sa, sb) = (split(&a), split(&b));
            if sa[..n - 1].iter().zip(&sb[..n - 1]).any(|(x, y)| x.payload.as_slice() != y.payload.as_slice()) {
                return Verdict::new(false, format!("pair {pair}, n = {n}: first n-1 shares differ"));
            }
            if sa[n - 1].payload == sb[n - 1].payload {
                return Verdict::new(false, format!("pair {pair}, n = {n}: last shares coincide"));
            }
        }
        checked += 1;
    }
    Verdict::new(checked >= 1000, format!("{checked} secret pairs x n in {{2,3,5,8}}"))
}

fn oracle_equivalence() -> Verdict {
    let cfg = FixedPointConfig::new(128, 32).unwrap();
    let ulp = cfg.ulp();
    let (mut worst_q, mut worst_f) = (0.0f64, 0.0f64);
    for seed in 1..=20u64 {
        for m in 1..=3 {
            for n in 1..=3 {
                let rc = RoundConfig::new(m, n, 2, cfg, seed);
                let data = synthetic_dataset(seed, 40 * m, 10).unwrap();
                let opts = RunOptions {
                    capture_models: true,
                    ..Default::default()
                };
                let out = match run_protocol(&rc, partition_clients(&data, m).unwrap(), &opts) {
                    Ok(o) => o,
                    Err(e) => return Verdict::error(e),
                };
                for (locals, agg) in out.local_models.iter().zip(&out.aggregates) {
                    let q = fedavg_quantized(locals, cfg).unwrap();
                    let f = fedavg_float(locals).unwrap();
                    let mut abs_sum = ModelParams::zeros(&rc.arch);
                    for l in locals {
                        let mut a = l.clone();
                        for layer in a.layers_mut() {
                            layer.weights.iter_mut().chain(layer.bias.iter_mut()).for_each(|w| *w = w.abs());
                        }
                        abs_sum.axpy(1.0, &a);
                    }
                    let (agg, q, f, s) = (agg.flatten(), q.flatten(), f.flatten(), abs_sum.flatten());
                    for k in 0..agg.len() {
                        let dq = (agg[k] - q[k]).abs();
                        let df = (agg[k] - f[k]).abs();
                        let roundtrip = ulp * (1.5 + s[k] / 2.0);
                        if dq > n as f64 * ulp || df > (m * n) as f64 * ulp + roundtrip {
                            return Verdict::new(
                                false,
                                format!("seed {seed} m {m} n {n} weight {k}: |p-q| = {dq:e}, |p-f| = {df:e}"),
                            );
                        }
                        worst_q = worst_q.max(dq / ulp);
                        worst_f = worst_f.max(df / ulp);
                    }
                }
            }
        }
    }
    Verdict::new(
        true,
        format!("180 runs; worst |p-q| = {worst_q:.0} ulp, worst |p-f| = {worst_f:.1} ulp"),
    )
}

fn gradient_check() -> Verdict {
    let mut worst: f64 = 0.0;
    for seed in 0..500 {
        let (params, batch) = common::random_case(seed);
        worst = worst.max(common::gradient_error(&params, &batch));
    }
    Verdict::new(worst <= 1e-4, format!("500 nets, max relative error {worst:.2e}"))
}

fn complexity() -> Verdict {
    let cfg = FixedPointConfig::new(128, 32).unwrap();
    for (m, n) in [(2, 2), (3, 3), (4, 2), (2, 5)] {
        let rc = RoundConfig::new(m, n, 2, cfg, 4);
        let data = synthetic_dataset(4, 20 * m, 10).unwrap();
        let out = match run_protocol(&rc, partition_clients(&data, m).unwrap(), &RunOptions::default()) {
            Ok(o) => o,
            Err(e) => return Verdict::error(e),
        };
        for r in &out.rounds {
            let ok = r.messages == (2 * m * n) as u64
                && r.share_uploads == (m * n) as u64
                && r.sigma_broadcasts == (m * n) as u64
                && r.client_sends.iter().all(|&c| c == n as u64)
                && r.server_sends.iter().all(|&s| s == m as u64);
            if !ok {
                return Verdict::new(false, format!("m {m} n {n} round {}: {r:?}", r.round));
            }
        }
    }
    Verdict::new(true, "2mn payload messages per round; n sends per client, m per server")
}

fn accuracy_ci() -> Verdict {
    match mnist_accuracy(3, 3, 32, 12_000, Mode::Protocol) {
        Ok(acc) => Verdict::new(acc >= 0.88, format!("12k MNIST, m=3 n=3 l_f=32: accuracy {acc:.4} (need >= 0.88)")),
        Err(e) => Verdict::error(e),
    }
}

fn accuracy_full() -> Verdict {
    match mnist_accuracy(3, 3, 32, 0, Mode::Protocol) {
        Ok(acc) => Verdict::new(acc >= 0.93, format!("full MNIST, m=3 n=3 l_f=32: accuracy {acc:.4} (need >= 0.93)")),
        Err(e) => Verdict::error(e),
    }
}

fn precision_trend() -> Verdict {
    let run = |lf| mnist_accuracy(2, 3, lf, 12_000, Mode::Protocol);
    match (run(16), run(32)) {
        (Ok(a16), Ok(a32)) => Verdict::new(
            a32 - a16 >= 0.3 && a16 <= 0.55,
            format!("l_f=16: {a16:.4}, l_f=32: {a32:.4}, gap {:.4} (need gap >= 0.3 and l_f=16 <= 0.55)", a32 - a16),
        ),
        (Err(e), _) | (_, Err(e)) => Verdict::error(e),
    }
}

fn centralized_trend() -> Verdict {
    let mut accs = Vec::new();
    for lf in [4, 8, 16, 32] {
        match mnist_accuracy(3, 1, lf, 12_000, Mode::Centralized) {
            Ok(a) => accs.push(a),
            Err(e) => return Verdict::error(e),
        }
    }
    let increasing = accs.windows(2).all(|w| w[1] > w[0]);
    Verdict::new(
        increasing && accs[0] <= 0.2 && accs[3] >= 0.75,
        format!(
            "l_f 4/8/16/32: {:.4} {:.4} {:.4} {:.4} (need strictly increasing, l_f=4 <= 0.2, l_f=32 >= 0.75)",
            accs[0], accs[1], accs[2], accs[3]
        ),
    )
}

fn message_strategy() -> impl Strategy<Value = Message> {
    (prop::sample::select(MessageKind::ALL.to_vec()), any::<u32>(), any::<u32>(), vector_strategy()).prop_map(
        |(kind, round, sender, v)| Message::new(kind, round, sender, kind.has_payload().then_some(v)).unwrap(),
    )
}

fn wire_fidelity() -> Verdict {
    let mut runner = TestRunner::new(Config {
        cases: 10_000,
        failure_persistence: None,
        ..Config::default()
    });
    if let Err(e) = runner.run(&message_strategy(), |msg| {
        prop_assert_eq!(decode_frame(&encode_frame(&msg)).unwrap(), msg);
        Ok(())
    }) {
        return Verdict::error(e);
    }
    let cfg = FixedPointConfig::new(128, 32).unwrap();
    let rc = RoundConfig::new(2, 2, 2, cfg, 3);
    let data = synthetic_dataset(3, 80, 10).unwrap();
    let parts = partition_clients(&data, 2).unwrap();
    let run = |transport| {
        let opts = RunOptions {
            transport,
            trace: true,
            ..Default::default()
        };
        run_protocol(&rc, parts.clone(), &opts)
    };
    match (run(TransportKind::Loopback), run(TransportKind::Sockets)) {
        (Ok(a), Ok(b)) => {
            let same = a.trace.is_some() && a.trace == b.trace && a.meter == b.meter;
            let frames: usize = a.trace.iter().flat_map(|t| t.values()).map(Vec::len).sum();
            Verdict::new(same, format!("10000 frames roundtrip; {frames} traced frames identical over sockets"))
        }
        (Err(e), _) | (_, Err(e)) => Verdict::error(e),
    }
}

fn main() -> ExitCode {
    let args: Vec<String> = env::args().collect();
    if args.iter().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let full = env::var_os(FULL_SCALE_ENV).is_some();
    type Check = fn() -> Verdict;
    let mut checks: Vec<(&str, &str, Duration, Check)> = vec![
        ("1", "sharing correctness", Duration::from_secs(10), sharing_correctness),
        ("2", "privacy witness", Duration::from_secs(5), privacy_witness),
        ("3", "oracle equivalence", Duration::from_secs(120), oracle_equivalence),
        ("4", "gradient check", Duration::from_secs(30), gradient_check),
        ("5", "message complexity", Duration::from_secs(60), complexity),
        ("6", "accuracy (desk scale)", Duration::from_secs(600), accuracy_ci),
        ("7", "precision degradation trend", Duration::from_secs(900), precision_trend),
        ("8", "centralized precision trend", Duration::from_secs(900), centralized_trend),
        ("9", "wire fidelity", Duration::from_secs(60), wire_fidelity),
    ];
    if full {
        checks.insert(6, ("6", "accuracy (full scale)", Duration::MAX, accuracy_full));
    }
    let mut failed = 0;
    for (id, name, limit, check) in checks {
        let start = Instant::now();
        let v = check();
        let took = start.elapsed();
        let pass = v.pass && took <= limit;
        failed += usize::from(!pass);
        println!(
            "criterion {id} {name}: {} ({}; {:.1}s)",
            if pass { "PASS" } else { "FAIL" },
            v.detail,
            took.as_secs_f64()
        );
    }
    if !full {
        println!("criterion 6 accuracy (full scale): SKIPPED (set {FULL_SCALE_ENV}=1 to run)");
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}

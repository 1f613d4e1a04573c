//! Acceptance criteria AC1–AC8. Each test prints one `ACn PASS|FAIL` line
//! with the measured values and the limits it was held to.
//!
//! `cargo test --test acceptance -- --test-threads 1` keeps the lines in
//! order.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use occl::diffnet::{gradient_check, init_network, Activation, NetworkConfig};
use occl::losses::{bce_loss, combined_loss, distance_to_center, occl_loss, BonafideCenter};
use occl::metrics::{compute_rates, eer, select_threshold, ScoredSet};
use occl::ocgmm::{fit_em, EmConfig, EmInit};
use occl::pipeline::*;
use occl::protocol::*;
use occl::Label;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

// Written to the stderr handle directly so the line shows even when the
// harness captures test output.
fn verdict(id: &str, pass: bool, detail: String) {
    let line = format!("{id} {}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "{id} failed: {detail}");
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    Distribution::<f64>::sample(&StandardNormal, rng)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Training setup for the synthetic experiments.
fn experiment_config(seed: u64, objective: Objective) -> TrainConfig {
    TrainConfig {
        epochs: 50,
        batch_size: 32,
        lr: 3e-3,
        weight_decay: 1e-5,
        seed,
        objective,
        ..TrainConfig::default()
    }
}

#[test]
fn ac1_gradient_correctness() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xac1);
    let mut worst = 0.0f64;
    for i in 0..20u64 {
        let channels = rng.random_range(1..=3);
        let cfg = NetworkConfig {
            channels: (0..channels).map(|c| format!("c{c}")).collect(),
            input_dim_per_channel: rng.random_range(1..=4),
            trunk_hidden_dims: (0..rng.random_range(0..=2)).map(|_| rng.random_range(2..=6)).collect(),
            fusion_hidden_dims: (0..rng.random_range(1..=2)).map(|_| rng.random_range(2..=8)).collect(),
            embedding_dim: rng.random_range(2..=10),
            activation: Activation::Tanh,
            seed: i,
        };
        let net = init_network(&cfg).unwrap();
        let n = rng.random_range(2..=8);
        let inputs: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..cfg.input_len()).map(|_| 2.0 * normal(&mut rng)).collect())
            .collect();
        let labels: Vec<Label> = (0..n)
            .map(|j| match j {
                0 => Label::Bonafide,
                1 => Label::Attack,
                _ if rng.random_bool(0.5) => Label::Bonafide,
                _ => Label::Attack,
            })
            .collect();
        let center = BonafideCenter::at(
            (0..cfg.embedding_dim).map(|_| 0.3 * normal(&mut rng)).collect(),
            0.5,
        );
        let mut tc = TrainConfig::default();
        tc.loss.lambda = 0.5;
        tc.loss.margin = rng.random_range(0.05..1.5);
        let err = gradient_check(&net, 1e-5, |n| batch_objective(n, &inputs, &labels, &center, &tc)).unwrap();
        worst = worst.max(err);
    }
    let elapsed = start.elapsed();
    verdict(
        "AC1",
        worst < 1e-4 && elapsed < Duration::from_secs(30),
        format!("max relative error {worst:.2e} over 20 tanh networks in {elapsed:.2?} (limits < 1e-4, < 30 s)"),
    );
}

#[test]
fn ac2_loss_endpoint_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xac2);
    let mut failures = Vec::new();
    for case in 0..1000 {
        let p = rng.random_range(1e-9..1.0 - 1e-9);
        let y = if rng.random_bool(0.5) { Label::Bonafide } else { Label::Attack };
        let (bce, _) = bce_loss(p, y).unwrap();
        let occl = rng.random_range(0.0..50.0);
        if combined_loss(bce, occl, 0.0).to_bits() != bce.to_bits() {
            failures.push(format!("case {case}: λ=0 combined differs from BCE"));
        }

        let dim = rng.random_range(1..=10);
        let c = BonafideCenter::at((0..dim).map(|_| 3.0 * normal(&mut rng)).collect(), 0.5);
        let x: Vec<f64> = c.center.iter().map(|v| v + 3.0 * normal(&mut rng)).collect();
        let dc = distance_to_center(&x, &c).unwrap();
        // margin ≤ DC, with the boundary itself included in a tenth of the cases
        let margin = if case % 10 == 0 { dc } else { dc * rng.random_range(0.0..1.0) };
        let (l, g) = occl_loss(&x, &c, Label::Attack, margin).unwrap();
        if l != 0.0 || g.iter().any(|v| *v != 0.0) {
            failures.push(format!("case {case}: attack at DC {dc} ≥ m {margin} gave loss {l}"));
        }
    }
    verdict(
        "AC2",
        failures.is_empty(),
        format!(
            "1000 cases: λ=0 bit-equality and zero OCCL beyond the margin; {} violations{}",
            failures.len(),
            failures.first().map(|f| format!(" (first: {f})")).unwrap_or_default()
        ),
    );
}

fn random_mixture_data(rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let dim = rng.random_range(1..=4);
    let clusters = rng.random_range(1..=3);
    let n = rng.random_range(40..=200);
    let centers: Vec<Vec<f64>> = (0..clusters)
        .map(|_| (0..dim).map(|_| rng.random_range(-5.0..5.0)).collect())
        .collect();
    let mixing: Vec<Vec<f64>> = (0..clusters)
        .map(|_| (0..dim * dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    (0..n)
        .map(|_| {
            let k = rng.random_range(0..clusters);
            let z: Vec<f64> = (0..dim).map(|_| normal(rng)).collect();
            (0..dim)
                .map(|i| centers[k][i] + (0..dim).map(|j| mixing[k][i * dim + j] * z[j]).sum::<f64>())
                .collect()
        })
        .collect()
}

#[test]
fn ac3_em_correctness() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xac3);

    let mut worst_drop = 0.0f64;
    for i in 0..50u64 {
        let data = random_mixture_data(&mut rng);
        let cfg = EmConfig {
            k: rng.random_range(1..=5),
            seed: i,
            init: if i % 2 == 0 { EmInit::Kmeans } else { EmInit::RandomPoints },
            ..EmConfig::default()
        };
        let (_, trace) = fit_em(&data, &cfg).unwrap();
        for w in trace.windows(2) {
            let slack = 1e-9 * w[0].abs();
            worst_drop = worst_drop.max((w[0] - w[1] - slack) / w[0].abs().max(1.0));
        }
    }
    let monotone = worst_drop <= 0.0;

    // single component against the closed-form maximizer: sample mean and
    // 1/N covariance, plus cov_reg on the diagonal
    let mut k1_err = 0.0f64;
    for i in 0..10u64 {
        let data = random_mixture_data(&mut rng);
        let (n, d) = (data.len() as f64, data[0].len());
        let cfg = EmConfig {
            k: 1,
            seed: i,
            ..EmConfig::default()
        };
        let (g, _) = fit_em(&data, &cfg).unwrap();
        let mean: Vec<f64> = (0..d).map(|j| data.iter().map(|x| x[j]).sum::<f64>() / n).collect();
        for a in 0..d {
            k1_err = k1_err.max((g.means[0][a] - mean[a]).abs());
            for b in 0..d {
                let s = data.iter().map(|x| (x[a] - mean[a]) * (x[b] - mean[b])).sum::<f64>() / n
                    + if a == b { cfg.cov_reg } else { 0.0 };
                k1_err = k1_err.max((g.covariances[0][a * d + b] - s).abs());
            }
        }
        k1_err = k1_err.max((g.weights[0] - 1.0).abs());
    }
    let k1_ok = k1_err <= 1e-9;

    let truth = [[-4.0, 1.0], [4.0, -1.0]];
    let mut recovered = 0;
    for seed in 0..10u64 {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<Vec<f64>> = (0..4000)
            .map(|i| truth[i % 2].iter().map(|m| m + normal(&mut r)).collect())
            .collect();
        let (g, _) = fit_em(
            &data,
            &EmConfig {
                k: 2,
                seed,
                ..EmConfig::default()
            },
        )
        .unwrap();
        let mut means = g.means.clone();
        means.sort_by(|a, b| a[0].total_cmp(&b[0]));
        let ok = means.iter().zip(&truth).all(|(m, t)| {
            let d2: f64 = m.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum();
            d2.sqrt() <= 0.1
        });
        recovered += ok as usize;
    }
    let elapsed = start.elapsed();
    verdict(
        "AC3",
        monotone && k1_ok && recovered >= 9 && elapsed < Duration::from_secs(60),
        format!(
            "monotone trace on 50 datasets: {monotone}; K=1 max deviation {k1_err:.1e} (limit 1e-9); \
             two-cluster recovery {recovered}/10 (limit ≥ 9); {elapsed:.2?} (limit < 60 s)"
        ),
    );
}

fn naive_candidates(scores: &[f64]) -> Vec<f64> {
    let mut u: Vec<f64> = scores.to_vec();
    u.sort_by(f64::total_cmp);
    u.dedup();
    let (lo, hi) = (u[0], u[u.len() - 1]);
    let mut c = vec![lo - (1.0 + lo.abs())];
    c.extend(u.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    c.push(hi + (1.0 + hi.abs()));
    c
}

fn naive_rates(scores: &[f64], labels: &[Label], tau: f64) -> (f64, f64) {
    let (mut a, mut an, mut b, mut bn) = (0usize, 0usize, 0usize, 0usize);
    for (s, l) in scores.iter().zip(labels) {
        match l {
            Label::Attack => {
                an += 1;
                if *s >= tau {
                    a += 1;
                }
            }
            Label::Bonafide => {
                bn += 1;
                if *s < tau {
                    b += 1;
                }
            }
        }
    }
    (a as f64 / an as f64, b as f64 / bn as f64)
}

#[test]
fn ac4_metric_oracle_equivalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xac4);
    let mut worst = 0.0f64;
    let mut bound_ok = true;
    for case in 0..100 {
        let n = rng.random_range(2..=1000);
        let mut labels: Vec<Label> = (0..n)
            .map(|_| if rng.random_bool(0.6) { Label::Bonafide } else { Label::Attack })
            .collect();
        labels[0] = Label::Bonafide;
        labels[1] = Label::Attack;
        let coarse = case % 3 == 0;
        let scores: Vec<f64> = labels
            .iter()
            .map(|l| {
                let shift = if *l == Label::Bonafide { 1.0 } else { -1.0 };
                let s = shift + 1.5 * normal(&mut rng);
                if coarse {
                    (s * 4.0).round() / 4.0
                } else {
                    s
                }
            })
            .collect();
        let set = ScoredSet::new(scores.clone(), labels.clone()).unwrap();
        let candidates = naive_candidates(&scores);

        for _ in 0..5 {
            let tau = rng.random_range(-6.0..6.0);
            let (a, b) = naive_rates(&scores, &labels, tau);
            let r = compute_rates(&set, tau).unwrap();
            worst = worst.max((r.apcer - a).abs()).max((r.bpcer - b).abs());
            worst = worst.max((r.acer - 0.5 * (a + b)).abs());
        }

        let target = 0.01;
        let oracle_tau = candidates
            .iter()
            .copied()
            .filter(|&t| naive_rates(&scores, &labels, t).1 <= target)
            .fold(f64::NEG_INFINITY, f64::max);
        let tau = select_threshold(&set, target).unwrap();
        worst = worst.max((tau - oracle_tau).abs());
        let bona = labels.iter().filter(|l| **l == Label::Bonafide).count();
        let below = scores
            .iter()
            .zip(&labels)
            .filter(|(s, l)| **l == Label::Bonafide && **s < tau)
            .count();
        bound_ok &= below <= (0.01 * bona as f64).floor() as usize;

        let mut best: Option<(f64, f64, f64)> = None;
        for &t in &candidates {
            let (a, b) = naive_rates(&scores, &labels, t);
            let key = ((a - b).abs(), a + b, t);
            if best.is_none_or(|k| key.0 < k.0 || (key.0 == k.0 && (key.1 < k.1 || (key.1 == k.1 && key.2 < k.2)))) {
                best = Some(key);
            }
        }
        let (_, sum, t) = best.unwrap();
        let (e, et) = eer(&set).unwrap();
        worst = worst.max((e - sum / 2.0).abs()).max((et - t).abs());
    }
    verdict(
        "AC4",
        worst <= 1e-12 && bound_ok,
        format!(
            "100 score sets: max deviation from brute force {worst:.1e} (limit 1e-12); \
             dev bonafide below τ ≤ ⌊0.01·N⌋: {bound_ok}"
        ),
    );
}

struct SeedRun {
    occl_gmm: f64,
    bce_probability: f64,
    /// Selected-epoch spread over epoch-0 spread (combined objective).
    spread_ratio: f64,
}

fn protocol_run(seed: u64, protocol: &Protocol) -> SeedRun {
    let data = generate_synthetic(&GeneratorConfig::standard(seed)).unwrap();
    let split = split_protocol(&data, protocol, seed).unwrap();
    let (ckpt, history) = train(&split, &data, &experiment_config(seed, Objective::Combined)).unwrap();
    let (gmm, _) = fit_one_class(&ckpt, &split, &data, &EmConfig::default()).unwrap();
    let occl_gmm = evaluate(&ckpt, &gmm, &split, &data, 0.01).unwrap().eval_acer;
    let (bce, _) = train(&split, &data, &experiment_config(seed, Objective::BceOnly)).unwrap();
    let bce_probability = evaluate_with(&bce, Scoring::Probability, &split, &data, 0.01)
        .unwrap()
        .eval_acer;
    SeedRun {
        occl_gmm,
        bce_probability,
        spread_ratio: ckpt.selected().unwrap().bonafide_spread / history.epochs[0].bonafide_spread,
    }
}

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn grandtest_runs() -> &'static (Vec<SeedRun>, Duration) {
    static RUNS: OnceLock<(Vec<SeedRun>, Duration)> = OnceLock::new();
    RUNS.get_or_init(|| {
        let start = Instant::now();
        let runs = SEEDS.iter().map(|&s| protocol_run(s, &Protocol::Grandtest)).collect();
        (runs, start.elapsed())
    })
}

#[test]
fn ac5_unseen_attack_directional_reproduction() {
    let start = Instant::now();
    let unseen: Vec<SeedRun> = SEEDS.iter().map(|&s| protocol_run(s, &Protocol::UnseenFamilyB)).collect();
    let unseen_time = start.elapsed();
    let (grand, grand_time) = grandtest_runs();
    let elapsed = unseen_time + *grand_time;

    let occl = median(unseen.iter().map(|r| r.occl_gmm).collect());
    let bce = median(unseen.iter().map(|r| r.bce_probability).collect());
    let grand_occl = grand.iter().map(|r| r.occl_gmm).fold(0.0, f64::max);
    let grand_bce = grand.iter().map(|r| r.bce_probability).fold(0.0, f64::max);
    verdict(
        "AC5",
        occl < bce && grand_occl < 0.02 && grand_bce < 0.02 && elapsed < Duration::from_secs(300),
        format!(
            "unseen_family_B median eval ACER: OCCL+GMM {:.2}% vs BCE-only {:.2}% (must be lower); \
             worst grandtest eval ACER: OCCL+GMM {:.2}%, BCE-only {:.2}% (limit < 2%); {elapsed:.2?} (limit < 300 s)",
            100.0 * occl,
            100.0 * bce,
            100.0 * grand_occl,
            100.0 * grand_bce
        ),
    );
}

#[test]
fn ac6_compactness_trend() {
    let (grand, _) = grandtest_runs();
    let ratios: Vec<f64> = grand.iter().map(|r| r.spread_ratio).collect();
    let passing = ratios.iter().filter(|r| **r < 0.5).count();
    verdict(
        "AC6",
        passing >= 4,
        format!(
            "selected/epoch-0 bonafide spread ratios {:?}; {passing}/5 below 0.5 (limit ≥ 4)",
            ratios.iter().map(|r| format!("{r:.3}")).collect::<Vec<_>>()
        ),
    );
}

fn run_cli(config: &Path, out: &Path, extra: &[&str]) -> Vec<String> {
    let mut args = vec![
        "run-protocol",
        "--config",
        config.to_str().unwrap(),
        "--protocol",
        "unseen_family_B",
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    let o = Command::new(env!("CARGO_BIN_EXE_occl")).args(&args).output().unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap().lines().map(String::from).collect()
}

#[test]
fn ac7_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        train: experiment_config(7, Objective::Combined),
        split_seed: 7,
        ..RunConfig::default()
    };
    let cfg_path = dir.path().join("c.json");
    fs::write(&cfg_path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let pa = run_cli(&cfg_path, &a, &[]);
    let pb = run_cli(&cfg_path, &b, &[]);

    let mut identical = pa.len() == pb.len();
    let mut compared = Vec::new();
    for f in ["model.ocnn", "gmm.ocgm", "report.json", "embeddings.csv", "det.csv", "report.txt", "data.ocds"] {
        let same = fs::read(a.join(f)).unwrap() == fs::read(b.join(f)).unwrap();
        identical &= same;
        compared.push(format!("{f}={}", if same { "same" } else { "DIFFERENT" }));
    }
    verdict("AC7", identical, format!("two run-protocol invocations: {}", compared.join(", ")));
}

#[test]
fn ac8_channel_ablation_mechanism() {
    let data = generate_synthetic(&GeneratorConfig::standard(8)).unwrap();
    let mut poisoned = data.clone();
    for (i, s) in poisoned.samples.iter_mut().enumerate() {
        let bad = [f64::NAN, f64::INFINITY, f64::NEG_INFINITY][i % 3];
        s.channels.get_mut("thermal").unwrap().iter_mut().for_each(|v| *v = bad);
    }
    let mut unchanged = true;
    let mut checked = Vec::new();
    for subset in [vec!["color", "depth", "infrared"], vec!["depth"]] {
        let mut cfg = RunConfig {
            train: experiment_config(8, Objective::Combined),
            split_seed: 8,
            ..RunConfig::default()
        };
        cfg.train.epochs = 10;
        cfg.train.channel_subset = Some(subset.iter().map(|s| s.to_string()).collect());
        let clean = run_on_dataset(&data, &Protocol::Grandtest, &cfg).unwrap();
        let dirty = run_on_dataset(&poisoned, &Protocol::Grandtest, &cfg).unwrap();
        let same = checkpoint_to_bytes(&clean.checkpoint).unwrap() == checkpoint_to_bytes(&dirty.checkpoint).unwrap()
            && gmm_to_bytes(&clean.gmm).unwrap() == gmm_to_bytes(&dirty.gmm).unwrap()
            && serde_json::to_string(&clean.report).unwrap() == serde_json::to_string(&dirty.report).unwrap();
        unchanged &= same;
        checked.push(format!("{}: {}", subset.join("+"), if same { "unchanged" } else { "CHANGED" }));
    }

    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig {
        train: experiment_config(8, Objective::Combined),
        ..RunConfig::default()
    };
    cfg.train.epochs = 10;
    let cfg_path = dir.path().join("c.json");
    fs::write(&cfg_path, serde_json::to_string(&cfg).unwrap()).unwrap();
    let out = dir.path().join("ablation");
    let subsets = ["color,depth,infrared,thermal", "color,depth", "infrared,thermal"];
    let mut extra = Vec::new();
    for s in subsets {
        extra.extend(["--channels", s]);
    }
    run_cli(&cfg_path, &out, &extra);
    let reports = subsets
        .iter()
        .filter(|s| {
            let p = out.join(s.replace(',', "+")).join("report.json");
            fs::read_to_string(p)
                .ok()
                .and_then(|t| serde_json::from_str::<RunReport>(&t).ok())
                .is_some_and(|r| r.channels.join(",") == **s)
        })
        .count();
    verdict(
        "AC8",
        unchanged && reports == subsets.len(),
        format!(
            "poisoned excluded channel: {}; run-protocol wrote {reports}/{} per-subset reports",
            checked.join(", "),
            subsets.len()
        ),
    );
}

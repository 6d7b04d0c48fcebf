//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run all criteria with `cargo test --release --test acceptance`, or a subset
//! with `cargo test --test acceptance -- 1 3 7`. Failures are reported, and the
//! process exits non-zero only when `SEQMIX_ACCEPTANCE_STRICT` is set.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};
use serde_json::{json, Value};

use seqmix::data::{BOS, EOS, PAD};
use seqmix::mixer::{align_lengths, mix_hard, mix_soft, Partner, PartnerKind, SoftRow, SoftSequence};
use seqmix::model::{loss_and_grads, BatchInput, ModelDims, ModelParams};
use seqmix::sampling::{sample_lambda_beta, sample_mask, switchout_distribution};
use seqmix::trainer::{evaluate_bleu, exact_match};
use seqmix::{Method, MixedExample, RngStream, SequencePair};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_seqmix"))
}

/// Runs a subcommand with `cfg` written to `<dir>/<task>.json`; returns the exit code.
fn run_cli(dir: &Path, task: &str, cfg: &Value, threads: Option<usize>) -> i32 {
    fs::create_dir_all(dir).unwrap();
    let path = dir.join(format!("{task}.json"));
    fs::write(&path, serde_json::to_vec_pretty(cfg).unwrap()).unwrap();
    let mut cmd = bin();
    cmd.args([task, "--config", path.to_str().unwrap()]);
    if let Some(t) = threads {
        cmd.env("SEQMIX_THREADS", t.to_string());
    }
    let out = cmd.output().expect("seqmix binary runs");
    if !out.status.success() {
        eprintln!("{}", String::from_utf8_lossy(&out.stderr));
    }
    out.status.code().unwrap_or(-1)
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap_or_default()).unwrap_or(Value::Null)
}

/// Median exact-match per method key from `report.tsv`.
fn report_medians(path: &Path) -> BTreeMap<String, Option<f64>> {
    let text = fs::read_to_string(path).unwrap_or_default();
    text.lines()
        .skip(1)
        .filter_map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            (f.len() >= 4).then(|| (f[0].to_string(), f[3].parse().ok()))
        })
        .collect()
}

fn pct(x: Option<f64>) -> String {
    x.map_or("NA".into(), |v| format!("{:.1}%", 100.0 * v))
}

// 1. Gradient fidelity

fn random_simplex_row(rng: &mut RngStream, v: usize) -> SoftRow {
    let raw: Vec<f64> = (0..v).map(|_| rng.next_f64()).collect();
    let total: f64 = raw.iter().sum();
    SoftRow {
        entries: raw.iter().enumerate().map(|(i, x)| (i, x / total)).collect(),
    }
}

fn gradient_fidelity() -> Verdict {
    const V: usize = 6;
    const H: f64 = 1e-5;
    let start = Instant::now();
    let mut rng = RngStream::new(2024);
    let (mut worst, mut worst_strict, mut worst_abs) = (0.0f64, 0.0f64, 0.0f64);
    let mut checked = 0usize;
    for inst in 0..100 {
        let dims = ModelDims::new(V, 4, 3).with_attention(inst % 2 == 0);
        let params = ModelParams::init_scaled(dims, 0.5, &mut rng);
        let mut e = MixedExample::identity(&SequencePair::new(vec![4; 3], vec![BOS; 3]), 0, Method::Seqmix);
        e.soft_source = SoftSequence {
            rows: (0..3).map(|_| random_simplex_row(&mut rng, V)).collect(),
        };
        e.soft_target = SoftSequence {
            rows: (0..3).map(|_| random_simplex_row(&mut rng, V)).collect(),
        };
        e.lambda = rng.next_f64();
        e.source_lengths = (1 + rng.below(3), 1 + rng.below(3));
        e.target_lengths = (1 + rng.below(3), 1 + rng.below(3));
        let input = BatchInput::from_examples(&[e], V).unwrap();
        let (_, grads) = loss_and_grads(&params, &input).unwrap();
        let mut probe = params.clone();
        for (t, g) in grads.iter().enumerate() {
            for k in 0..g.data().len() {
                let orig = params.tensors()[t].data()[k];
                probe.tensors_mut()[t].data_mut()[k] = orig + H;
                let up = loss_and_grads(&probe, &input).unwrap().0;
                probe.tensors_mut()[t].data_mut()[k] = orig - H;
                let down = loss_and_grads(&probe, &input).unwrap().0;
                probe.tensors_mut()[t].data_mut()[k] = orig;
                let numeric = (up - down) / (2.0 * H);
                let analytic = g.data()[k];
                let diff = (analytic - numeric).abs();
                let scale = analytic.abs().max(numeric.abs());
                worst = worst.max(diff / scale.max(1.0));
                worst_abs = worst_abs.max(diff);
                if scale >= 1e-6 {
                    worst_strict = worst_strict.max(diff / scale);
                }
                checked += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        worst < 1e-4 && secs < 60.0,
        format!(
            "100 instances, {checked} partials; max rel err {worst:.2e} (denominator max(1,|g|)) < 1e-4; \
             rel err on |g| >= 1e-6 {worst_strict:.2e}; max abs err {worst_abs:.2e}; {secs:.1}s < 60s"
        ),
    )
}

// 2. Oracle

fn oracle(root: &Path) -> Verdict {
    let dir = root.join("oracle");
    let start = Instant::now();
    let code = run_cli(&dir, "oracle-check", &json!({"out": dir}), None);
    let secs = start.elapsed().as_secs_f64();
    let text = fs::read_to_string(dir.join("verdict.txt")).unwrap_or_default();
    verdict(
        code == 0 && text.starts_with("PASS") && secs < 300.0,
        format!("exit {code}; {}; {secs:.1}s < 300s", text.trim()),
    )
}

// 3. Sampler statistics

fn sampler_statistics() -> Verdict {
    const N: usize = 100_000;
    let mut notes = Vec::new();
    let mut pass = true;
    let mut rng = RngStream::new(7).substream("acceptance-sampler");
    for alpha in [0.3, 1.0] {
        let xs: Vec<f64> = (0..N).map(|_| sample_lambda_beta(alpha, &mut rng).unwrap()).collect();
        let mean = xs.iter().sum::<f64>() / N as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (N - 1) as f64;
        let target = 1.0 / (4.0 * (2.0 * alpha + 1.0));
        pass &= (mean - 0.5).abs() <= 0.005 && (var - target).abs() <= 0.005;
        notes.push(format!("Beta({alpha}) mean {mean:.4} var {var:.4} (want {target:.4})"));
    }
    for lambda in [0.1, 0.5, 0.83] {
        let mask = sample_mask(lambda, N, &mut rng);
        let mean = mask.iter().filter(|&&m| m).count() as f64 / N as f64;
        pass &= (mean - lambda).abs() <= 0.005;
        notes.push(format!("mask({lambda}) {mean:.4}"));
    }
    let mut worst = 0.0f64;
    for s in 1..=30 {
        for eta in [0.25, 0.5, 1.0, 2.0, 5.0] {
            let q: f64 = (-1.0 / eta as f64).exp();
            let z = (1.0 - q.powi(s as i32 + 1)) / (1.0 - q);
            for (k, p) in switchout_distribution(s, eta).unwrap().iter().enumerate() {
                worst = worst.max((p - q.powi(k as i32) / z).abs());
            }
        }
    }
    pass &= worst <= 1e-12;
    notes.push(format!("SwitchOut max deviation {worst:.1e}"));
    verdict(pass, notes.join("; "))
}

// 4. Mixing algebra

fn pair_strategy() -> impl Strategy<Value = SequencePair> {
    (prop::collection::vec(4..12usize, 1..7), prop::collection::vec(4..12usize, 0..6))
        .prop_map(|(s, t)| SequencePair::with_markers(s, &t))
}

fn aligned_strategy() -> impl Strategy<Value = (SequencePair, SequencePair)> {
    (pair_strategy(), pair_strategy()).prop_map(|(a, b)| align_lengths(&a, &b, PAD))
}

fn example_partner(p: &SequencePair) -> Partner {
    Partner {
        pair: p.clone(),
        kind: PartnerKind::Example(1),
    }
}

fn dense(seq: &SoftSequence) -> Vec<Vec<f64>> {
    seq.rows.iter().map(|r| r.to_dense(12)).collect()
}

fn runner(cases: u32) -> TestRunner {
    let config = Config {
        failure_persistence: None,
        ..Config::with_cases(cases)
    };
    TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha))
}

fn mixing_algebra() -> Verdict {
    let mut results = Vec::new();

    let endpoints = runner(512).run(&aligned_strategy(), |(a, b)| {
        let one = mix_soft(&a, 0, &example_partner(&b), 1.0).unwrap();
        let zero = mix_soft(&a, 0, &example_partner(&b), 0.0).unwrap();
        prop_assert_eq!(dense(&one.soft_source), dense(&SoftSequence::from_tokens(&a.source)));
        prop_assert_eq!(dense(&one.soft_target), dense(&SoftSequence::from_tokens(&a.target)));
        prop_assert_eq!(dense(&zero.soft_source), dense(&SoftSequence::from_tokens(&b.source)));
        prop_assert_eq!(dense(&zero.soft_target), dense(&SoftSequence::from_tokens(&b.target)));
        Ok(())
    });
    results.push(("endpoints", endpoints.map_err(|e| e.to_string())));

    let simplex = runner(512).run(&(aligned_strategy(), 0.0..=1.0f64), |((a, b), lambda)| {
        let m = mix_soft(&a, 0, &example_partner(&b), lambda).unwrap();
        for row in m.soft_source.rows.iter().chain(&m.soft_target.rows) {
            prop_assert!((row.sum() - 1.0).abs() <= 1e-15);
            prop_assert!(row.entries.iter().all(|&(_, w)| (0.0..=1.0).contains(&w)));
        }
        Ok(())
    });
    results.push(("simplex", simplex.map_err(|e| e.to_string())));

    let symmetry = runner(512).run(&(aligned_strategy(), 0.0..=1.0f64), |((a, b), lambda)| {
        let ab = mix_soft(&a, 0, &example_partner(&b), lambda).unwrap();
        let ba = mix_soft(&b, 1, &example_partner(&a), 1.0 - lambda).unwrap();
        for (x, y) in [(&ab.soft_source, &ba.soft_source), (&ab.soft_target, &ba.soft_target)] {
            for (r, s) in dense(x).iter().zip(dense(y)) {
                for (u, v) in r.iter().zip(s) {
                    prop_assert!((u - v).abs() <= f64::EPSILON, "{} vs {}", u, v);
                }
            }
        }
        Ok(())
    });
    results.push(("symmetry", symmetry.map_err(|e| e.to_string())));

    // Each case draws 10^5 hard masks; the pooled kept-token frequency must
    // lie within 3σ of the soft weight and every single position within 5σ.
    let convergence = runner(6).run(
        &(aligned_strategy(), 0.05..0.95f64, any::<u64>()),
        |((a, b), lambda, seed)| {
            const N: usize = 100_000;
            let soft = mix_soft(&a, 0, &example_partner(&b), lambda).unwrap();
            let mut rng = RngStream::new(seed);
            let mut src_hits = vec![0usize; a.source.len()];
            let mut tgt_hits = vec![0usize; a.target.len()];
            for _ in 0..N {
                let ms = sample_mask(lambda, a.source.len(), &mut rng);
                let mt = sample_mask(lambda, a.target.len(), &mut rng);
                let m = mix_hard(&a, 0, &example_partner(&b), &ms, &mt, lambda, Method::SeqmixHard).unwrap();
                for (i, row) in m.soft_source.rows.iter().enumerate() {
                    src_hits[i] += (row.weight_of(a.source[i]) == 1.0) as usize;
                }
                for (i, row) in m.soft_target.rows.iter().enumerate() {
                    tgt_hits[i] += (row.weight_of(a.target[i]) == 1.0) as usize;
                }
            }
            let sigma = (lambda * (1.0 - lambda) / N as f64).sqrt();
            let (mut pooled, mut k) = (0.0, 0usize);
            for (hits, own, other, rows) in [
                (&src_hits, &a.source, &b.source, &soft.soft_source.rows),
                (&tgt_hits, &a.target, &b.target, &soft.soft_target.rows),
            ] {
                for i in 0..hits.len() {
                    let want = rows[i].weight_of(own[i]);
                    if own[i] == other[i] {
                        prop_assert_eq!(hits[i], N);
                        prop_assert_eq!(want, 1.0);
                        continue;
                    }
                    let dev = hits[i] as f64 / N as f64 - want;
                    prop_assert!(dev.abs() < 5.0 * sigma, "position {} deviates by {}", i, dev);
                    pooled += dev;
                    k += 1;
                }
            }
            if k > 0 {
                let z = pooled / k as f64 / (sigma / (k as f64).sqrt());
                prop_assert!(z.abs() < 3.0, "pooled z {}", z);
            }
            Ok(())
        },
    );
    results.push(("hard-mask convergence", convergence.map_err(|e| e.to_string())));

    let failed: Vec<String> = results
        .iter()
        .filter_map(|(name, r)| r.as_ref().err().map(|e| format!("{name}: {e}")))
        .collect();
    verdict(
        failed.is_empty(),
        if failed.is_empty() {
            "endpoints, simplex sums, symmetry (512 cases each) and 10^5-mask convergence (6 cases) hold".into()
        } else {
            failed.join("; ")
        },
    )
}

// 5. Compositional direction

fn compositional(root: &Path) -> Verdict {
    let dir = root.join("jump");
    let cfg = json!({
        "out": dir,
        "held_out": "jump",
        "methods": ["baseline", "word-drop", "switch-out", "seqmix-hard", "seqmix"],
        "seeds": 3,
        "epochs": 30,
        "hidden": 64,
        "embed": 32,
    });
    let start = Instant::now();
    let code = run_cli(&dir, "experiment", &cfg, None);
    let secs = start.elapsed().as_secs_f64();
    let med = report_medians(&dir.join("report.tsv"));
    let get = |k: &str| med.get(k).copied().flatten();
    let (base, mix, wd, so) = (get("baseline"), get("seqmix"), get("word-drop"), get("switch-out"));
    let pass = code == 0
        && matches!((base, mix, wd, so), (Some(b), Some(m), Some(w), Some(s)) if m - b >= 0.10 && m >= w && m >= s);
    verdict(
        pass,
        format!(
            "median test EM: Baseline {}, WordDrop {}, SwitchOut {}, SeqMix (Hard) {}, SeqMix {}; \
             need SeqMix - Baseline >= 10pp and SeqMix >= WordDrop, SwitchOut; exit {code}; {secs:.0}s",
            pct(base),
            pct(wd),
            pct(so),
            pct(get("seqmix-hard")),
            pct(mix)
        ),
    )
}

// 6. Learnability

fn learnability(root: &Path) -> Verdict {
    let dir = root.join("reversal");
    let cfg = json!({
        "out": dir,
        "corpus": "reversal",
        "reversal": {"pairs": 2000, "vocab": 20, "min_len": 3, "max_len": 8},
        "methods": ["baseline", "word-drop", "switch-out", "seqmix-hard", "seqmix"],
        "seeds": 1,
        "epochs": 30,
        "report_bleu": true,
    });
    let start = Instant::now();
    let code = run_cli(&dir, "experiment", &cfg, None);
    let secs = start.elapsed().as_secs_f64();
    let mut pass = code == 0;
    let mut notes = Vec::new();
    for m in Method::ALL {
        let log = fs::read_to_string(dir.join("logs").join(format!("{}-seed0.jsonl", m.key()))).unwrap_or_default();
        let recs: Vec<Value> = log.lines().filter_map(|l| serde_json::from_str(l).ok()).collect();
        let best = recs.iter().filter_map(|r| r["exact_match"].as_f64()).reduce(f64::max);
        let bleu = recs.last().and_then(|r| r["bleu"].as_f64());
        pass &= recs.len() == 30 && best.is_some_and(|b| b >= 0.95) && bleu.is_some();
        notes.push(format!(
            "{} best EM {} BLEU {}",
            m.display_name(),
            pct(best),
            bleu.map_or("NA".into(), |b| format!("{b:.4}"))
        ));
    }
    verdict(pass, format!("{}; need >= 95% within 30 epochs; exit {code}; {secs:.0}s", notes.join(", ")))
}

// 7. Metrics

fn metric_correctness() -> Verdict {
    let words = |s: &str| s.split_whitespace().map(str::to_string).collect::<Vec<_>>();
    let bleu = |h: &[&str], r: &[&str]| {
        let hs: Vec<_> = h.iter().map(|s| words(s)).collect();
        let rs: Vec<_> = r.iter().map(|s| words(s)).collect();
        evaluate_bleu(&hs, &rs).unwrap()
    };
    // Hand-derived values. A half-length prefix has every precision 1 and
    // BP = e^(1 - 8/4) = e^-1. One swapped word in five gives matches 4/5 and
    // 2/4, then no 3- or 4-gram matches, smoothed to 1/(3+1) and 1/(2+1).
    let cases: [(&str, f64, f64); 4] = [
        ("brevity penalty", bleu(&["a b c d"], &["a b c d e f g h"]), (-1.0f64).exp()),
        ("perfect", bleu(&["the cat sat on the mat"], &["the cat sat on the mat"]), 1.0),
        ("disjoint", bleu(&["x y z"], &["a b c"]), 0.0),
        (
            "smoothed",
            bleu(&["a b X d e"], &["a b c d e"]),
            (0.8f64 * 0.5 * 0.25 * (1.0 / 3.0)).powf(0.25),
        ),
    ];
    let mut pass = true;
    let mut notes = Vec::new();
    for (name, got, want) in cases {
        let ok = (got - want).abs() <= 1e-6;
        pass &= ok;
        notes.push(format!("{name} {got:.6}{}", if ok { "" } else { " (wrong)" }));
    }
    let em_cases: [(&str, Vec<Vec<usize>>, Vec<Vec<usize>>, f64); 5] = [
        ("empty hypothesis", vec![vec![]], vec![vec![5, 6]], 0.0),
        ("PAD stripping", vec![vec![5, 6, PAD, PAD]], vec![vec![BOS, 5, 6, EOS]], 1.0),
        ("empty pair", vec![vec![PAD]], vec![vec![BOS, EOS]], 1.0),
        ("order matters", vec![vec![6, 5]], vec![vec![5, 6]], 0.0),
        ("empty set", vec![], vec![], 0.0),
    ];
    for (name, h, r, want) in em_cases {
        let got = exact_match(&h, &r);
        let ok = got == want;
        pass &= ok;
        if !ok {
            notes.push(format!("EM {name} {got} != {want}"));
        }
    }
    notes.push("EM edge cases checked".into());
    verdict(pass, notes.join("; "))
}

// 8. Determinism

fn determinism(root: &Path) -> Verdict {
    let cfg = |out: &PathBuf| {
        json!({
            "out": out,
            "corpus": "reversal",
            "reversal": {"pairs": 200, "vocab": 10, "min_len": 2, "max_len": 5},
            "methods": ["baseline", "word-drop", "switch-out", "seqmix-hard", "seqmix"],
            "seeds": 2,
            "epochs": 3,
            "hidden": 16,
            "embed": 8,
            "report_bleu": true,
        })
    };
    let (a, b) = (root.join("det-a"), root.join("det-b"));
    let code_a = run_cli(&a, "experiment", &cfg(&a), Some(1));
    let code_b = run_cli(&b, "experiment", &cfg(&b), Some(3));
    let mut files = vec!["report.tsv".to_string(), "report.txt".into(), "cells.json".into()];
    let mut logs: Vec<String> = fs::read_dir(a.join("logs"))
        .map(|d| d.filter_map(|e| e.ok()).map(|e| format!("logs/{}", e.file_name().to_string_lossy())).collect())
        .unwrap_or_default();
    logs.sort();
    let n_logs = logs.len();
    files.extend(logs);
    let differing: Vec<&String> = files
        .iter()
        .filter(|f| match (fs::read(a.join(f)), fs::read(b.join(f))) {
            (Ok(x), Ok(y)) => x != y,
            _ => true,
        })
        .collect();
    let strip_out = |p: PathBuf| {
        let mut v = read_json(&p);
        v.as_object_mut().map(|m| m.remove("out"));
        v
    };
    let same_cfg = strip_out(a.join("resolved-experiment.json")) == strip_out(b.join("resolved-experiment.json"));
    verdict(
        code_a == 0 && code_b == 0 && n_logs == 10 && differing.is_empty() && same_cfg,
        format!(
            "{} files compared ({n_logs} logs, report tables, cells) across 1 and 3 worker threads; {}",
            files.len(),
            if differing.is_empty() {
                "all byte-identical".to_string()
            } else {
                format!("differing: {differing:?}")
            }
        ),
    )
}

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let selected = |n: usize| wanted.is_empty() || wanted.contains(&n);
    let root = tempfile::tempdir().expect("temporary directory");
    let criteria: [(usize, &str, Box<dyn Fn() -> Verdict + '_>); 8] = [
        (1, "gradient fidelity", Box::new(gradient_fidelity)),
        (2, "mask-marginal oracle", Box::new(|| oracle(root.path()))),
        (3, "sampler statistics", Box::new(sampler_statistics)),
        (4, "mixing algebra", Box::new(mixing_algebra)),
        (5, "compositional direction", Box::new(|| compositional(root.path()))),
        (6, "learnability", Box::new(|| learnability(root.path()))),
        (7, "metric correctness", Box::new(metric_correctness)),
        (8, "determinism", Box::new(|| determinism(root.path()))),
    ];
    let mut failed = 0;
    let mut ran = 0;
    for (n, name, check) in &criteria {
        if !selected(*n) {
            continue;
        }
        let v = check();
        ran += 1;
        failed += usize::from(!v.pass);
        println!("{} criterion {n} ({name}): {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
    }
    println!("acceptance: {}/{ran} criteria passed", ran - failed);
    if failed > 0 && std::env::var_os("SEQMIX_ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}

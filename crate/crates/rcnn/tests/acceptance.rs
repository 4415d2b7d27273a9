//! Acceptance suite: one test per release criterion, each printing a
//! PASS/SKIP line (visible with `cargo test --test acceptance -- --nocapture`).
//!
//! Criterion 8 exercises the full Switchboard reproduction and only runs when
//! `SWDA_DIR` points at the corpus CSVs (optionally `SWDA_MANIFEST` at a
//! custom test split); it is skipped otherwise and expects hours, not
//! seconds, when enabled.

use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rcnn::corpus::ColumnMap;
use rcnn::discourse::{
    build_window, forward_window, RcnnParams, Recurrence,
};
use rcnn::hcnn::schedule_for;
use rcnn::numerics::{conv1d_valid, Sigmoid};
use rcnn::training::{grad_check, micro_fixture};

fn rcnn_bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rcnn"))
        .args(args)
        .output()
        .expect("failed to spawn rcnn")
}

fn stdout_field(out: &Output, key: &str) -> Option<String> {
    String::from_utf8_lossy(&out.stdout)
        .lines()
        .find(|l| l.starts_with(&format!("{key}\t")))
        .and_then(|l| l.split('\t').nth(1).map(str::to_string))
}

/// Criterion 1: the kernel-size schedule satisfies the closed form for its
/// depth, the recursion, the telescoping identity, and per-layer convolution
/// validity for every length up to 500, in under a second.
#[test]
fn criterion_1_kernel_schedule_oracle() {
    let started = Instant::now();
    for l in 1..=500usize {
        let s = schedule_for(l).unwrap();
        let sizes = s.sizes();
        if l >= 2 {
            let t = (2.0 * l as f64).sqrt().ceil() as usize - 1;
            assert_eq!(s.depth(), t, "depth at l={l}");
        } else {
            assert_eq!(sizes, &[1], "degenerate single-word schedule");
        }
        // Recursion: k_1 = 2, k_{i+1} = k_i + 1 for i < t−1, closing size
        // consumes the rest.
        for (i, &k) in sizes.iter().enumerate() {
            if i + 1 < sizes.len() {
                assert_eq!(k, i + 2, "ramp at l={l} layer {i}");
            }
        }
        let consumed: usize = sizes[..sizes.len() - 1].iter().map(|k| k - 1).sum();
        assert_eq!(*sizes.last().unwrap(), l - consumed, "closing size at l={l}");
        // Telescoping and validity.
        let mut len = l;
        for &k in sizes {
            assert!(k >= 1 && k <= len, "invalid convolution at l={l}");
            len = len - k + 1;
        }
        assert_eq!(len, 1, "telescoping at l={l}");
    }
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 1.0, "took {elapsed:?}");
    println!("criterion 1 PASS — schedule oracle holds for l = 1..=500 ({elapsed:?})");
}

/// Criterion 2: the convolution matches a naive transcription of the
/// definition bitwise on 1000 seeded random instances with |m| ≤ 16.
#[test]
fn criterion_2_convolution_oracle_equivalence() {
    fn naive(kernel: &[f64], signal: &[f64]) -> Vec<f64> {
        let k = kernel.len();
        let mut out = Vec::new();
        for i in 1..=(signal.len() - k + 1) {
            let mut acc = 0.0;
            for j in 1..=k {
                acc += kernel[j - 1] * signal[k + i - j - 1];
            }
            out.push(acc);
        }
        out
    }
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(20240211);
    for case in 0..1000 {
        let m_len = rng.random_range(1..=16);
        let k_len = rng.random_range(1..=m_len);
        let signal: Vec<f64> = (0..m_len).map(|_| rng.random_range(-5.0..5.0)).collect();
        let kernel: Vec<f64> = (0..k_len).map(|_| rng.random_range(-5.0..5.0)).collect();
        let got = conv1d_valid(&kernel, &signal).unwrap();
        let want = naive(&kernel, &signal);
        assert_eq!(got, want, "case {case}: bitwise mismatch");
    }
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 1.0, "took {elapsed:?}");
    println!("criterion 2 PASS — conv1d bitwise-equal to the naive oracle on 1000 instances");
}

/// Criterion 3: analytic gradients match central finite differences
/// (eps 1e-5) within 1e-6 for every parameter group on 20 seeded micro
/// models with d ∈ {1, 2}, in under 30 seconds.
#[test]
fn criterion_3_gradient_check() {
    let started = Instant::now();
    let mut worst_overall: f64 = 0.0;
    for case in 0..20u64 {
        let depth = if case % 2 == 0 { 2 } else { 1 };
        let lambda = match case % 3 {
            0 => 0.0,
            1 => 1e-4,
            _ => 1e-3,
        };
        let (model, sample) = micro_fixture(1000 + case, depth, lambda);
        let report = grad_check(&model, &sample, 1e-5).unwrap();
        for g in &report.groups {
            assert!(
                g.max_rel_error < 1e-6,
                "case {case} (d={depth}, λ={lambda}): group {} at {:.3e} \
                 (analytic {:.6e}, numeric {:.6e})",
                g.name,
                g.max_rel_error,
                g.analytic,
                g.numeric
            );
        }
        worst_overall = worst_overall.max(report.worst());
    }
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 30.0, "took {elapsed:?}");
    println!(
        "criterion 3 PASS — 20 micro models, worst group error {worst_overall:.3e} ({elapsed:?})"
    );
}

/// Criterion 4: predicted distributions sum to 1 within 1e-12 and hidden
/// state components stay strictly inside (0,1), over random models and
/// inputs including weight scales that drive the sigmoid into saturation.
#[test]
fn criterion_4_normalization_and_range() {
    let mut rng = ChaCha8Rng::seed_from_u64(424242);
    let mut checked = 0usize;
    for case in 0..200 {
        let h = rng.random_range(1..=8);
        let n = rng.random_range(1..=5);
        let l = rng.random_range(2..=7);
        let agents_n = 2;
        let mut params = RcnnParams::new(h, n, l, agents_n, Sigmoid::Logistic);
        // Every third model gets extreme weights to force saturation.
        let scale = if case % 3 == 0 { 300.0 } else { 1.0 };
        for m in [&mut params.input_label, &mut params.sentence] {
            for v in m.data_mut() {
                *v = rng.random_range(-0.5..0.5) * scale;
            }
        }
        for m in params.recurrent.iter_mut().chain(params.output.iter_mut()) {
            for v in m.data_mut() {
                *v = rng.random_range(-0.5..0.5) * scale;
            }
        }
        let steps = rng.random_range(1..=6);
        let sentences: Vec<Vec<f64>> = (0..steps)
            .map(|_| (0..n).map(|_| rng.random_range(-2.0..2.0) * scale).collect())
            .collect();
        let agents: Vec<usize> = (0..steps).map(|_| rng.random_range(0..agents_n)).collect();
        let labels: Vec<usize> = (0..steps).map(|_| rng.random_range(0..l)).collect();
        for i in 0..steps {
            let window = build_window(&sentences, &agents, &labels, i, 2);
            let (p, hid) = forward_window(&params, &window).unwrap();
            let sum: f64 = p.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "case {case}: Σp = {sum}");
            assert!(p.iter().all(|&v| v > 0.0), "case {case}: zero probability");
            assert!(
                hid.iter().all(|&v| v > 0.0 && v < 1.0),
                "case {case}: hidden component out of (0,1)"
            );
            checked += 1;
        }
    }
    println!("criterion 4 PASS — normalization and range over {checked} windows");
}

/// Criterion 5: with d = 2, p_i is bitwise invariant to anything before the
/// window (s_{i−2}, and labels/agents before x_{i−2}/a_{i−2}) and sensitive
/// to s_{i−1} and x_{i−2}, matching the depth-2 unravelling.
#[test]
fn criterion_5_truncation_locality() {
    let started = Instant::now();
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(5000 + seed);
        let h = rng.random_range(2..=6);
        let n = rng.random_range(2..=4);
        let l = rng.random_range(3..=6);
        let mut params = RcnnParams::new(h, n, l, 2, Sigmoid::Logistic);
        for m in [&mut params.input_label, &mut params.sentence] {
            for v in m.data_mut() {
                *v = rng.random_range(-0.6..0.6);
            }
        }
        for m in params.recurrent.iter_mut().chain(params.output.iter_mut()) {
            for v in m.data_mut() {
                *v = rng.random_range(-0.6..0.6);
            }
        }
        for v in params.bias_h.iter_mut().chain(params.bias_o.iter_mut()) {
            *v = rng.random_range(-0.2..0.2);
        }
        let steps = rng.random_range(4..=7);
        let sentences: Vec<Vec<f64>> = (0..steps)
            .map(|_| (0..n).map(|_| rng.random_range(0.0..1.0)).collect())
            .collect();
        let agents: Vec<usize> = (0..steps).map(|_| rng.random_range(0..2)).collect();
        let labels: Vec<usize> = (0..steps).map(|_| rng.random_range(0..l)).collect();

        for i in 2..steps {
            let p_base = {
                let w = build_window(&sentences, &agents, &labels, i, 2);
                forward_window(&params, &w).unwrap().0
            };
            // s_{i−2} is outside the depth-2 window: bitwise no-op.
            let mut s = sentences.clone();
            s[i - 2][0] += 7.5;
            let w = build_window(&s, &agents, &labels, i, 2);
            assert_eq!(p_base, forward_window(&params, &w).unwrap().0, "seed {seed} i={i}");

            // s_{i−1} is inside: must change the distribution.
            let mut s = sentences.clone();
            s[i - 1][0] += 1.0;
            let w = build_window(&s, &agents, &labels, i, 2);
            assert_ne!(p_base, forward_window(&params, &w).unwrap().0, "seed {seed} i={i}");

            // x_{i−2} feeds the first window step: must change it.
            let mut lab = labels.clone();
            lab[i - 2] = (lab[i - 2] + 1) % l;
            let w = build_window(&sentences, &agents, &lab, i, 2);
            assert_ne!(p_base, forward_window(&params, &w).unwrap().0, "seed {seed} i={i}");

            // Labels strictly before x_{i−2} are invisible.
            if i >= 3 {
                let mut lab = labels.clone();
                lab[i - 3] = (lab[i - 3] + 1) % l;
                let w = build_window(&sentences, &agents, &lab, i, 2);
                assert_eq!(
                    p_base,
                    forward_window(&params, &w).unwrap().0,
                    "seed {seed} i={i}: out-of-window label leaked"
                );
            }
        }
    }
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 5.0, "took {elapsed:?}");
    println!("criterion 5 PASS — depth-2 locality bitwise-exact over 10 seeded configs");
}

/// Criterion 6: the synthetic end-to-end run (200 dialogues, 5 acts, seed 7)
/// reaches ≥ 95% test accuracy in under 2 minutes on one CPU core.
#[test]
fn criterion_6_synthetic_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("synthetic.rcnn");
    let started = Instant::now();
    let out = rcnn_bin(&[
        "--threads",
        "1",
        "train",
        "--synthetic",
        "--seed",
        "7",
        "--out",
        model.to_str().unwrap(),
    ]);
    let elapsed = started.elapsed();
    assert!(out.status.success(), "training failed: {}", String::from_utf8_lossy(&out.stderr));
    assert!(model.exists(), "model file not written");
    let accuracy: f64 = stdout_field(&out, "test_accuracy")
        .expect("training report lacks test_accuracy")
        .parse()
        .unwrap();
    assert!(
        elapsed.as_secs_f64() < 120.0,
        "single-core synthetic training took {elapsed:?}"
    );
    assert!(accuracy >= 95.0, "synthetic test accuracy {accuracy} below 95%");
    println!(
        "criterion 6 PASS — synthetic accuracy {accuracy:.2}% on one core in {elapsed:?}"
    );
}

/// Criterion 7: identical seeds, flags, and data produce byte-identical
/// model files and evaluation reports, independent of thread count.
#[test]
fn criterion_7_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let train_args = |out: &Path, threads: &str| {
        let o = rcnn_bin(&[
            "--threads",
            threads,
            "train",
            "--synthetic",
            "--synth-dialogues",
            "60",
            "--synth-acts",
            "4",
            "--seed",
            "11",
            "--max-epochs",
            "6",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        o
    };
    let m1 = dir.path().join("a.rcnn");
    let m2 = dir.path().join("b.rcnn");
    let m3 = dir.path().join("c.rcnn");
    let r1 = train_args(&m1, "1");
    let r2 = train_args(&m2, "1");
    let r3 = train_args(&m3, "3");

    let b1 = std::fs::read(&m1).unwrap();
    let b2 = std::fs::read(&m2).unwrap();
    let b3 = std::fs::read(&m3).unwrap();
    assert_eq!(b1, b2, "same flags, same threads: model files differ");
    assert_eq!(b1, b3, "thread count changed the model file");
    // The three runs write to different --out paths; everything else in the
    // training report must match byte for byte.
    let report = |o: &Output| -> String {
        String::from_utf8_lossy(&o.stdout)
            .lines()
            .filter(|l| !l.starts_with("model_path\t"))
            .collect::<Vec<_>>()
            .join("\n")
    };
    assert_eq!(report(&r1), report(&r2), "training reports differ");
    assert_eq!(report(&r1), report(&r3), "thread count changed the training report");

    let eval = |threads: &str| {
        let o = rcnn_bin(&[
            "--threads",
            threads,
            "eval",
            "--model",
            m1.to_str().unwrap(),
            "--synthetic",
            "--synth-dialogues",
            "60",
            "--synth-acts",
            "4",
            "--seed",
            "11",
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        o.stdout
    };
    let e1 = eval("1");
    let e2 = eval("1");
    let e3 = eval("4");
    assert_eq!(e1, e2, "evaluation reports differ across runs");
    assert_eq!(e1, e3, "evaluation report depends on thread count");

    // Different seed ⇒ different parameters (sanity that the check bites).
    let m4 = dir.path().join("d.rcnn");
    let o = rcnn_bin(&[
        "train",
        "--synthetic",
        "--synth-dialogues",
        "60",
        "--synth-acts",
        "4",
        "--seed",
        "12",
        "--max-epochs",
        "6",
        "--out",
        m4.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    assert_ne!(b1, std::fs::read(&m4).unwrap(), "seed change had no effect");
    println!("criterion 7 PASS — byte-identical models and reports across runs and thread counts");
}

/// Criterion 8: full Switchboard reproduction. Requires `SWDA_DIR`; skipped
/// otherwise. Checks the ingestion counts against the published totals, then
/// trains at default hyperparameters and requires accuracy ≥ 51.5% (20
/// points over the 31.5% majority baseline; 65% is the target and 73.9% the
/// published reference).
#[test]
fn criterion_8_swda_reproduction() {
    let Ok(dir) = std::env::var("SWDA_DIR") else {
        println!("criterion 8 SKIP — SwDA corpus not supplied (set SWDA_DIR to enable)");
        return;
    };
    let manifest = std::env::var("SWDA_MANIFEST").ok();
    let parsed = rcnn::corpus::parse_swda(
        Path::new(&dir),
        manifest.as_deref().map(Path::new),
        &ColumnMap::default(),
    )
    .expect("failed to parse the SwDA corpus");
    assert_eq!(parsed.train.len(), 1115, "train dialogue count");
    assert_eq!(parsed.test.len(), 19, "test dialogue count");
    assert_eq!(parsed.train_utterances(), 196_258, "train utterance count");
    assert_eq!(parsed.test_utterances(), 4_186, "test utterance count");
    println!("criterion 8 ingestion counts match the published totals");

    let tmp = tempfile::tempdir().unwrap();
    let model = tmp.path().join("swda.rcnn");
    let mut args = vec![
        "train".to_string(),
        "--corpus".to_string(),
        dir.clone(),
        "--out".to_string(),
        model.to_str().unwrap().to_string(),
    ];
    if let Some(m) = &manifest {
        args.push("--manifest".to_string());
        args.push(m.clone());
    }
    let out = rcnn_bin(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let accuracy: f64 =
        stdout_field(&out, "test_accuracy").expect("no test_accuracy").parse().unwrap();
    assert!(
        accuracy >= 51.5,
        "SwDA accuracy {accuracy:.2}% does not clear the majority baseline by 20 points"
    );
    println!(
        "criterion 8 PASS — SwDA accuracy {accuracy:.2}% (target 65%, published reference 73.9%)"
    );
}

/// Criterion 9: cmd_nn rankings match an exhaustive pairwise-distance
/// computation on a ≤ 50-dialogue corpus, for both metrics, in under a
/// second per ranking.
#[test]
fn criterion_9_nearest_neighbour_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let model_path = dir.path().join("nn.rcnn");
    let out = rcnn_bin(&[
        "train",
        "--synthetic",
        "--synth-dialogues",
        "50",
        "--synth-acts",
        "3",
        "--seed",
        "9",
        "--max-epochs",
        "5",
        "--out",
        model_path.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    // Rebuild every dialogue vector through the library, then rank them with
    // a local exhaustive oracle, independently of the nearest_neighbours
    // implementation the CLI uses.
    let model = rcnn::model_file::load(&model_path).unwrap();
    let (train, test, _) = rcnn::corpus::synth_corpus(50, 3, 30, 9);
    let mut pool = train;
    pool.extend(test);
    let (encoded, _) =
        rcnn::corpus::encode_dialogues(&pool, &model.lexicon, model.hp.max_sentence_len);
    let vectors: Vec<Vec<f64>> = encoded
        .iter()
        .map(|d| {
            let pairs: Vec<(Vec<usize>, usize)> =
                d.utterances.iter().map(|u| (u.tokens.clone(), u.agent)).collect();
            let sentences = rcnn::discourse::sentence_vectors(
                &model.hcnn,
                &model.lexicon.embeddings,
                &pairs,
            )
            .unwrap();
            let agents: Vec<usize> = d.utterances.iter().map(|u| u.agent).collect();
            let labels: Vec<usize> = d.utterances.iter().map(|u| u.act).collect();
            rcnn::discourse::discourse_vector(
                &model.rcnn,
                &sentences,
                &agents,
                &labels,
                d.utterances.len() - 1,
                model.hp.depth,
                Recurrence::Windowed,
            )
            .unwrap()
            .values
        })
        .collect();

    let cosine = |a: &[f64], b: &[f64]| -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        1.0 - dot / (na * nb)
    };
    let euclid = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    };

    for metric in ["cosine", "euclidean"] {
        let query_idx = 7usize;
        let started = Instant::now();
        let out = rcnn_bin(&[
            "nn",
            "--model",
            model_path.to_str().unwrap(),
            "--synthetic",
            "--synth-dialogues",
            "50",
            "--synth-acts",
            "3",
            "--seed",
            "9",
            "--query",
            &pool[query_idx].id,
            "-k",
            "10",
            "--metric",
            metric,
        ]);
        let elapsed = started.elapsed();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        assert!(elapsed.as_secs_f64() < 1.0, "nn took {elapsed:?}");

        let text = String::from_utf8_lossy(&out.stdout).to_string();
        let got: Vec<(String, f64)> = text
            .lines()
            .filter(|l| l.chars().next().map(|c| c.is_ascii_digit()).unwrap_or(false))
            .map(|l| {
                let mut parts = l.split('\t');
                let _rank = parts.next().unwrap();
                let id = parts.next().unwrap().to_string();
                let dist: f64 = parts.next().unwrap().parse().unwrap();
                (id, dist)
            })
            .collect();
        assert_eq!(got.len(), 10);

        let mut oracle: Vec<(usize, f64)> = vectors
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != query_idx)
            .map(|(i, v)| {
                let d = if metric == "cosine" {
                    cosine(&vectors[query_idx], v)
                } else {
                    euclid(&vectors[query_idx], v)
                };
                (i, d)
            })
            .collect();
        oracle.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
        oracle.truncate(10);

        for (rank, ((got_id, got_dist), (oracle_idx, oracle_dist))) in
            got.iter().zip(&oracle).enumerate()
        {
            assert_eq!(
                got_id, &pool[*oracle_idx].id,
                "{metric}: rank {rank} mismatch (cli {got_id}, oracle {})",
                pool[*oracle_idx].id
            );
            assert!(
                (got_dist - oracle_dist).abs() < 5e-7,
                "{metric}: rank {rank} distance {got_dist} vs oracle {oracle_dist}"
            );
        }
    }
    println!("criterion 9 PASS — cmd_nn matches the exhaustive oracle for both metrics");
}

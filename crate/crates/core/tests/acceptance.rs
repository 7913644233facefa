//! Acceptance criteria. Each test prints one `criterion N: PASS|FAIL` line
//! (run with `--nocapture` to see them) and then asserts.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pdl::cli::{run_compare, RunConfig, DEFAULT_COMPARE};
use pdl::corpus::{generate_zipf_corpus, zipf_mandelbrot_pmf, SynthConfig, NUM_SPECIAL, PAD};
use pdl::gradcheck::{self, GradcheckConfig};
use pdl::loss::{ce_loss, pdl_loss, LossBatch, Reduction};
use pdl::matrix::Matrix;
use pdl::stats::{
    count_frequencies, fit_zipf, self_information, total_variation, FreqMode, FreqTable,
};
use pdl::train::{train, LossKind, TrainConfig};
use pdl::weights::{compute_weights, WeightOptions};

fn verdict(n: u32, pass: bool, detail: &str) {
    println!(
        "criterion {n}: {} {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
}

#[test]
fn criterion_1_alpha_zero_matches_ce_bit_for_bit() {
    let started = Instant::now();
    let synth = generate_zipf_corpus(&SynthConfig {
        vocab_size: 200,
        num_tokens: 30_000,
        num_rules: 5,
        seed: 11,
        ..SynthConfig::default()
    })
    .unwrap();
    let freq = count_frequencies(&synth.corpus, synth.vocab.len()).unwrap();
    let base = TrainConfig {
        epochs: 2,
        seed: 5,
        ..TrainConfig::default()
    };
    let ce = TrainConfig {
        loss: LossKind::Ce,
        ..base.clone()
    };
    let pdl = TrainConfig {
        loss: LossKind::Pdl,
        alpha: 0.0,
        mean_normalized: false,
        ..base
    };
    let (p_ce, h_ce) = train(&ce, &synth.corpus, &freq, None).unwrap();
    let (p_pdl, h_pdl) = train(&pdl, &synth.corpus, &freq, None).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("ce.ckpt"), dir.path().join("pdl.ckpt"));
    p_ce.save(&a).unwrap();
    p_pdl.save(&b).unwrap();
    let same_ckpt = std::fs::read(&a).unwrap() == std::fs::read(&b).unwrap();
    let bits = |h: &pdl::train::TrainHistory| -> Vec<u64> {
        h.epochs
            .iter()
            .flat_map(|e| {
                [
                    e.train_loss,
                    e.valid_loss,
                    e.valid_ce,
                    e.valid_rare_accuracy.unwrap_or(-1.0),
                ]
            })
            .map(f64::to_bits)
            .collect()
    };
    let same_history = bits(&h_ce) == bits(&h_pdl);
    let secs = started.elapsed().as_secs_f64();
    let pass = same_ckpt && p_ce == p_pdl && same_history && secs < 30.0;
    verdict(
        1,
        pass,
        &format!(
            "checkpoint identical={same_ckpt} history identical={same_history} runtime={secs:.1}s"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_2_gradients_match_finite_differences() {
    let started = Instant::now();
    let config = GradcheckConfig::default();
    assert_eq!(
        (config.trials, config.max_vocab, config.step),
        (100, 64, 1e-5)
    );
    assert_eq!(
        (config.model_vocab, config.model_context, config.model_dim),
        (12, 2, 4)
    );
    let report = gradcheck::run(&config).unwrap();
    let secs = started.elapsed().as_secs_f64();
    let pass =
        report.max_rel_error_logits < 1e-5 && report.max_rel_error_model < 1e-5 && secs < 10.0;
    verdict(
        2,
        pass,
        &format!(
            "logits max_rel={:e} model max_rel={:e} runtime={secs:.2}s",
            report.max_rel_error_logits, report.max_rel_error_model
        ),
    );
    assert!(pass);
}

struct OracleRow {
    mode: FreqMode,
    count: u64,
    total: u64,
    alpha: f64,
    epsilon: f64,
    weight: f64,
}

fn oracle_rows() -> Vec<OracleRow> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/weight_oracle.csv");
    let text = std::fs::read_to_string(path).unwrap();
    text.lines()
        .skip(1)
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            OracleRow {
                mode: FreqMode::parse(f[0]).unwrap(),
                count: f[1].parse().unwrap(),
                total: f[2].parse().unwrap(),
                alpha: f[3].parse().unwrap(),
                epsilon: f[4].parse().unwrap(),
                weight: f[5].parse().unwrap(),
            }
        })
        .collect()
}

/// Id 4 holds `count`, id 5 the rest of `total`.
fn single_token_table(count: u64, total: u64) -> FreqTable {
    FreqTable::from_counts(vec![0, 0, 0, 0, count, total - count])
}

#[test]
fn criterion_3_weights_match_high_precision_oracle() {
    let rows = oracle_rows();
    assert_eq!(rows.len(), 1000);
    let raw = WeightOptions {
        mean_normalized: false,
        w_max: Some(f64::INFINITY),
    };
    let mut worst = 0.0f64;
    for r in &rows {
        let table = single_token_table(r.count, r.total)
            .with_mode(r.mode)
            .unwrap();
        let w = compute_weights(&table, r.alpha, r.epsilon, raw)
            .unwrap()
            .weight(4);
        worst = worst.max((w - r.weight).abs() / r.weight.abs());
    }

    // Strict decrease in frequency for alpha > 0, before any clamp.
    let mut monotone = true;
    for r in rows.iter().filter(|r| r.alpha > 0.0) {
        let counts: Vec<u64> = [0, 0, 0, 0]
            .into_iter()
            .chain([r.count, r.count + 1, r.count * 2 + 7])
            .collect();
        let table = FreqTable::from_counts(counts).with_mode(r.mode).unwrap();
        let w = compute_weights(&table, r.alpha, r.epsilon, raw).unwrap();
        monotone &= w.weight(4) > w.weight(5) && w.weight(5) > w.weight(6);
    }
    let pass = worst < 1e-10 && monotone;
    verdict(
        3,
        pass,
        &format!("1000 triples max_rel={worst:e} strictly_decreasing={monotone}"),
    );
    assert!(pass);
}

#[test]
fn criterion_4_pdl_is_weight_times_ce_per_position() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for trial in 0..200 {
        let vocab = rng.random_range(NUM_SPECIAL + 1..=64);
        let batch = rng.random_range(1..=16);
        let logits: Vec<f64> = (0..vocab * batch)
            .map(|_| rng.random_range(-6.0..6.0))
            .collect();
        let targets: Vec<usize> = (0..batch)
            .map(|_| {
                if rng.random_bool(0.1) {
                    PAD
                } else {
                    rng.random_range(1..vocab)
                }
            })
            .collect();
        let counts: Vec<u64> = (0..vocab).map(|_| rng.random_range(0..500)).collect();
        let mode = if trial % 2 == 0 {
            FreqMode::Probabilities
        } else {
            FreqMode::Counts
        };
        let table = FreqTable::from_counts(counts).with_mode(mode).unwrap();
        let w = compute_weights(
            &table,
            rng.random_range(0.0..2.0),
            1e-8,
            WeightOptions::default(),
        )
        .unwrap();
        let b = LossBatch {
            logits: Matrix::from_vec(batch, vocab, logits),
            targets,
            reduction: Reduction::Sum,
        };
        let p = pdl_loss(&b, &w).unwrap();
        let c = ce_loss(&b).unwrap();
        for (k, &y) in b.targets.iter().enumerate() {
            let expect = w.weight(y) * c.per_position[k];
            worst = worst.max((p.per_position[k] - expect).abs() / expect.abs().max(1.0));
        }
    }
    let pass = worst <= 1e-12;
    verdict(4, pass, &format!("200 batches max_diff={worst:e}"));
    assert!(pass);
}

#[test]
fn criterion_5_zipf_generator_fidelity() {
    let (v, s, q) = (1000, 1.1, 2.7);
    let target = zipf_mandelbrot_pmf(v, s, q);
    let mut lines = Vec::new();
    let mut pass = true;
    let mut slowest = 0.0f64;
    for seed in 0..10 {
        let started = Instant::now();
        let synth = generate_zipf_corpus(&SynthConfig {
            vocab_size: v,
            zipf_exponent: s,
            zipf_shift: q,
            num_tokens: 1_000_000,
            num_rules: 0,
            seed,
            ..SynthConfig::default()
        })
        .unwrap();
        let freq = count_frequencies(&synth.corpus, synth.vocab.len()).unwrap();
        let slope = fit_zipf(&freq).unwrap().slope;
        let ordinary = &freq.counts()[NUM_SPECIAL..];
        let n: u64 = ordinary.iter().sum();
        let empirical: Vec<f64> = ordinary.iter().map(|&c| c as f64 / n as f64).collect();
        let tv = total_variation(&empirical, &target);
        slowest = slowest.max(started.elapsed().as_secs_f64());
        pass &= (-1.25..=-0.95).contains(&slope) && tv < 0.02;
        lines.push(format!("seed={seed} slope={slope:.4} tv={tv:.5}"));
    }
    pass &= slowest < 60.0;
    verdict(
        5,
        pass,
        &format!("{} slowest seed={slowest:.1}s", lines.join("; ")),
    );
    assert!(pass);
}

#[test]
fn criterion_6_flagship_directional_experiment() {
    let started = Instant::now();
    let base = RunConfig::from_toml(DEFAULT_COMPARE, Path::new("default-compare")).unwrap();
    assert_eq!(base.pdl.alpha, 1.0);
    assert!(base.pdl.mean_normalized);
    assert_eq!(base.pdl.epsilon, pdl::weights::DEFAULT_EPSILON);

    let mut wins = 0;
    let mut worst_frequent_drop = f64::NEG_INFINITY;
    let mut lines = Vec::new();
    for seed in 1..=5u64 {
        let mut config = base.clone();
        config.synth.seed = seed;
        config.train.seed = seed;
        let r = run_compare(&config).unwrap().report;
        let (ce_rare, pdl_rare) = (
            r.ce.rare_bucket().accuracy.unwrap(),
            r.pdl.rare_bucket().accuracy.unwrap(),
        );
        let (ce_rec, pdl_rec) = (r.ce.rule_recall.unwrap(), r.pdl.rule_recall.unwrap());
        let (ce_freq, pdl_freq) = (
            r.ce.frequent_bucket().accuracy.unwrap(),
            r.pdl.frequent_bucket().accuracy.unwrap(),
        );
        if pdl_rare >= ce_rare && pdl_rec >= ce_rec {
            wins += 1;
        }
        worst_frequent_drop = worst_frequent_drop.max(ce_freq - pdl_freq);
        lines.push(format!(
            "seed={seed} rare {ce_rare:.4}->{pdl_rare:.4} recall {ce_rec:.4}->{pdl_rec:.4} frequent {ce_freq:.4}->{pdl_freq:.4}"
        ));
    }
    let secs = started.elapsed().as_secs_f64();
    for l in &lines {
        println!("  {l}");
    }
    let directional = wins >= 4;
    let frequent_ok = worst_frequent_drop <= 0.05;
    let pass = directional && frequent_ok && secs < 300.0;
    verdict(
        6,
        pass,
        &format!(
            "rare+recall wins={wins}/5 (need 4) max frequent-bucket drop={:.2}pp (limit 5) runtime={secs:.0}s",
            worst_frequent_drop * 100.0
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_7_self_information_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let counts: Vec<u64> = (0..300).map(|_| rng.random_range(1..10_000)).collect();
    let table = FreqTable::from_counts(counts.clone()).normalize().unwrap();
    let probs = table.probs().unwrap();
    let mut worst = 0.0f64;
    for (id, p) in probs.iter().enumerate() {
        let i = self_information(&table, id).unwrap();
        let expect = -p.ln();
        worst = worst.max((i - expect).abs() / expect.abs().max(1.0));
    }
    let v = 137;
    let uniform = FreqTable::from_counts(vec![9; v]).normalize().unwrap();
    let ln_v = (v as f64).ln();
    let mut worst_uniform = 0.0f64;
    for id in 0..v {
        worst_uniform = worst_uniform.max((self_information(&uniform, id).unwrap() - ln_v).abs());
    }
    let pass = worst <= 1e-12 && worst_uniform <= 1e-12;
    verdict(
        7,
        pass,
        &format!("max_diff={worst:e} uniform max_diff={worst_uniform:e}"),
    );
    assert!(pass);
}

fn pdl_cli(out: &Path, config: &Path, args: &[&str]) {
    let status = Command::new(env!("CARGO_BIN_EXE_pdl"))
        .arg("--config")
        .arg(config)
        .arg("--out-dir")
        .arg(out)
        .args(args)
        .output()
        .unwrap();
    assert!(
        status.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&status.stderr)
    );
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                std::fs::read(e.path()).unwrap(),
            )
        })
        .collect()
}

#[test]
fn criterion_8_every_command_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    std::fs::write(
        &config,
        "[synth]\nvocab_size = 80\nnum_tokens = 8000\nnum_rules = 4\nseed = 3\n\
         [train]\nepochs = 2\nseed = 3\n[model]\nembed_dim = 8\n[gradcheck]\ntrials = 20\n",
    )
    .unwrap();
    let text = dir.path().join("text.txt");
    std::fs::write(
        &text,
        "the cat sat on the mat\nthe dog sat\n\na cat and a dog\n",
    )
    .unwrap();

    let pipeline: [&[&str]; 8] = [
        &["synth"],
        &["freq"],
        &["weights"],
        &["gradcheck"],
        &["train"],
        &["eval"],
        &["train", "--loss", "ce"],
        &["compare"],
    ];
    let text_arg = ["synth", "--text", text.to_str().unwrap()];
    let text_pipeline: [&[&str]; 3] = [&text_arg, &["freq"], &["weights"]];

    // Two fresh directories run the same commands; after each step the
    // directories must match byte for byte.
    let mut differing = Vec::new();
    let mut files = 0;
    let mut steps = 0;
    for (name, commands) in [("synth", &pipeline[..]), ("text", &text_pipeline[..])] {
        let (a, b) = (
            dir.path().join(format!("{name}-a")),
            dir.path().join(format!("{name}-b")),
        );
        for cmd in commands {
            pdl_cli(&a, &config, cmd);
            pdl_cli(&b, &config, cmd);
            let (sa, sb) = (snapshot(&a), snapshot(&b));
            files = files.max(sa.len());
            steps += 1;
            if sa != sb {
                differing.push(cmd.join(" "));
            }
        }
    }

    // The bundled flagship config, run twice.
    let (a, b) = (dir.path().join("flag-a"), dir.path().join("flag-b"));
    for out in [&a, &b] {
        let status = Command::new(env!("CARGO_BIN_EXE_pdl"))
            .args(["--preset", "default-compare", "compare", "--out-dir"])
            .arg(out)
            .status()
            .unwrap();
        assert!(status.success());
    }
    let same_report = std::fs::read(a.join("report.json")).unwrap()
        == std::fs::read(b.join("report.json")).unwrap();
    if snapshot(&a) != snapshot(&b) {
        differing.push("--preset default-compare compare".into());
    }
    let pass = differing.is_empty() && same_report;
    verdict(
        8,
        pass,
        &format!(
            "{} command runs, up to {files} files per directory; differing={differing:?}",
            steps + 1
        ),
    );
    assert!(pass);
}

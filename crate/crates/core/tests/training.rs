use std::collections::HashSet;
use std::path::Path;
use std::process::Command;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pdl::corpus::{EncodedCorpus, BOS, EOS, NUM_SPECIAL};
use pdl::eval::{evaluate, make_buckets, EvalOptions};
use pdl::loss::{ce_loss, LossBatch, Reduction};
use pdl::model::ModelParams;
use pdl::stats::count_frequencies;
use pdl::train::{train, LossKind, TrainConfig};

/// One 50-token sequence over 16 ordinary ids in which every length-2
/// context occurs once, so a model can memorize it exactly.
fn memorizable_corpus(seed: u64) -> EncodedCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let mut seq = vec![BOS];
    seen.insert((BOS, BOS));
    while seq.len() < 49 {
        let prev = *seq.last().unwrap();
        let next = loop {
            let t = rng.random_range(NUM_SPECIAL..NUM_SPECIAL + 16);
            if !seen.contains(&(prev, t)) {
                break t;
            }
        };
        seen.insert((prev, next));
        seq.push(next);
    }
    seq.push(EOS);
    EncodedCorpus::new(vec![seq], NUM_SPECIAL + 16).unwrap()
}

#[test]
fn overfits_a_tiny_corpus() {
    let corpus = memorizable_corpus(1);
    assert_eq!(corpus.num_tokens(), 50);
    let freq = count_frequencies(&corpus, corpus.vocab_size).unwrap();
    let config = TrainConfig {
        loss: LossKind::Ce,
        context_size: 2,
        embed_dim: 16,
        epochs: 500,
        learning_rate: 0.5,
        batch_size: 8,
        seed: 3,
        ..TrainConfig::default()
    };
    let (params, history) = train(&config, &corpus, &freq, None).unwrap();
    assert!(history.epochs.iter().all(|e| e.train_loss.is_finite()));
    let final_ce = history.epochs.last().unwrap().valid_ce;
    assert!(final_ce < 0.05, "final training CE {final_ce}");

    // Memorized: every bucket is predicted perfectly and perplexity is near 1.
    let buckets = make_buckets(&freq, 2).unwrap();
    let m = evaluate(&params, &corpus, &buckets, &EvalOptions::default()).unwrap();
    assert_eq!(m.accuracy, 1.0);
    assert!(m.buckets.iter().all(|b| b.accuracy == Some(1.0)));
    assert!(
        m.perplexity >= 1.0 && m.perplexity < 1.06,
        "{}",
        m.perplexity
    );
}

#[test]
fn one_small_step_decreases_single_example_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    for instance in 0..20u64 {
        let vocab = rng.random_range(NUM_SPECIAL + 2..24);
        let n = rng.random_range(1..4);
        let d = rng.random_range(2..9);
        let mut params = ModelParams::init(vocab, n, d, instance).unwrap();
        let contexts: Vec<usize> = (0..n).map(|_| rng.random_range(1..vocab)).collect();
        let target = vec![rng.random_range(1..vocab)];
        let loss = |p: &ModelParams| {
            let batch = LossBatch {
                logits: p.forward(&contexts).unwrap(),
                targets: target.clone(),
                reduction: Reduction::TokenMean,
            };
            ce_loss(&batch).unwrap()
        };
        let before = loss(&params);
        let grads = params.backward(&contexts, &before.grad).unwrap();
        params.sgd_step(&grads, 1e-3).unwrap();
        let after = loss(&params).value;
        assert!(
            after < before.value,
            "instance {instance}: {after} >= {}",
            before.value
        );
    }
}

#[test]
fn evaluation_mean_nll_matches_token_mean_ce() {
    let corpus = memorizable_corpus(2);
    let freq = count_frequencies(&corpus, corpus.vocab_size).unwrap();
    let params = ModelParams::init(corpus.vocab_size, 2, 4, 9).unwrap();
    let pairs = pdl::dataset::Pairs::from_corpus(&corpus, 2);
    let batch = LossBatch {
        logits: params.forward(&pairs.contexts).unwrap(),
        targets: pairs.targets.clone(),
        reduction: Reduction::TokenMean,
    };
    let ce = ce_loss(&batch).unwrap().value;
    let buckets = make_buckets(&freq, 2).unwrap();
    let m = evaluate(&params, &corpus, &buckets, &EvalOptions::default()).unwrap();
    assert!((m.mean_nll - ce).abs() <= 1e-12);
    assert_eq!(m.perplexity, m.mean_nll.exp());
    let bucketed: u64 = m.buckets.iter().map(|b| b.tokens).sum();
    assert_eq!(bucketed + m.unassigned_tokens, m.total_tokens);
}

fn cli(out: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_pdl"))
        .arg("--out-dir")
        .arg(out)
        .args(args)
        .output()
        .unwrap()
}

#[test]
fn cli_alpha_zero_pipeline_matches_ce() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("c.toml");
    std::fs::write(
        &config,
        "[synth]\nvocab_size = 50\nnum_tokens = 4000\nnum_rules = 2\nseed = 8\n\
         [pdl]\nalpha = 0.0\nmean_normalized = false\n[train]\nepochs = 2\n",
    )
    .unwrap();
    let c = config.to_str().unwrap();
    let out = dir.path().join("out");
    for args in [vec!["synth"], vec!["freq"], vec!["weights"]] {
        let mut full = vec!["--config", c];
        full.extend(args);
        assert!(cli(&out, &full).status.success());
    }
    let mut outputs = Vec::new();
    for loss in ["ce", "pdl"] {
        let o = cli(&out, &["--config", c, "train", "--loss", loss]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let ckpt = std::fs::read_to_string(out.join("model.ckpt")).unwrap();
        let history: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(out.join("history.json")).unwrap())
                .unwrap();
        // The body, not the provenance fields, must match.
        outputs.push((
            ckpt.lines().skip(1).collect::<Vec<_>>().join("\n"),
            history["epochs"].clone(),
        ));
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let code = |args: &[&str]| cli(out, args).status.code().unwrap();

    assert_eq!(code(&["--no-such-flag"]), 2);
    assert_eq!(code(&["freq"]), 4);

    let bad_key = dir.path().join("bad.toml");
    std::fs::write(&bad_key, "[train]\nlearning_rat = 0.1\n").unwrap();
    assert_eq!(code(&["--config", bad_key.to_str().unwrap(), "freq"]), 3);
    assert_eq!(code(&["--alpha", "-1", "weights"]), 3);

    let broken = dir.path().join("broken.toml");
    std::fs::write(&broken, "[train\n").unwrap();
    assert_eq!(code(&["--config", broken.to_str().unwrap(), "freq"]), 5);

    std::fs::write(
        out.join("vocab.tsv"),
        "0\t<pad>\n1\t<bos>\n2\t<eos>\n3\t<unk>\n4\tx\n",
    )
    .unwrap();
    std::fs::write(out.join("corpus.txt"), "1 4 9 2\n").unwrap();
    let o = cli(out, &["freq"]);
    assert_eq!(o.status.code(), Some(5));
    let stderr = String::from_utf8(o.stderr).unwrap();
    assert_eq!(stderr.lines().count(), 1);
    assert!(
        stderr.starts_with("error code=5 kind=parse message=\""),
        "{stderr}"
    );

    std::fs::write(out.join("corpus.txt"), "1 2\n").unwrap();
    std::fs::write(
        out.join("freq.tsv"),
        "#freqtable v1 vocab_size=5 total=0\n0\t0\n1\t0\n2\t0\n3\t0\n4\t0\n",
    )
    .unwrap();
    assert_eq!(code(&["weights"]), 6);

    assert_eq!(code(&["gradcheck"]), 0);
    let strict = dir.path().join("strict.toml");
    std::fs::write(&strict, "[gradcheck]\ntolerance = 1e-30\ntrials = 3\n").unwrap();
    assert_eq!(
        code(&["--config", strict.to_str().unwrap(), "gradcheck"]),
        8
    );
}

#[test]
fn effective_config_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(cli(&a, &["--seed", "4", "--epochs", "1", "synth"])
        .status
        .success());
    let echoed = a.join(pdl::cli::EFFECTIVE_CONFIG);
    assert!(cli(&b, &["--config", echoed.to_str().unwrap(), "synth"])
        .status
        .success());
    for f in [
        "corpus.txt",
        "vocab.tsv",
        "rules.tsv",
        pdl::cli::EFFECTIVE_CONFIG,
    ] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
}

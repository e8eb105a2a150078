//! One PASS/FAIL line per acceptance criterion. Runs without the libtest
//! harness so the lines appear in plain `cargo test` output.

mod common;

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use common::{ffnn_case, lstm_case, FD_TOL};
use glosslm::corpus::{
    corpus_stats, load_elan_dir, load_line_corpus, normalize_gloss, split_corpus, Corpus, ExclusionSet,
    HandPolicy, TierNames, Vocabulary,
};
use glosslm::eval::{emit_results_matrix, evaluate, evaluate_ngram, Layout, PerplexityReport};
use glosslm::models::{
    checkpoint_to_bytes, load_checkpoint, FfnnConfig, LanguageModel, LstmConfig, Mode, Network,
    TrainingMetadata,
};
use glosslm::ngram::{NgramModel, Smoothing};
use glosslm::synthetic::{language_pair, GrammarSpec};
use glosslm::trainer::{finetune, train, train_substituted, RunOutputs, RunResult, TrainConfig};

const FIXTURE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/elan");

enum Verdict {
    Pass(String),
    Fail(String),
    Skip(String),
}

use Verdict::{Fail, Pass, Skip};

fn verdict(ok: bool, detail: String) -> Verdict {
    if ok {
        Pass(detail)
    } else {
        Fail(detail)
    }
}

type Outcome = Result<Verdict, Box<dyn std::error::Error>>;
type Check = fn() -> Outcome;

fn main() {
    // `cargo test -- --list` and similar probes expect no work to be done.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    // Positional arguments pick criteria by number; none runs them all.
    let only: Vec<usize> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .filter_map(|a| a.parse().ok())
        .collect();
    let checks: [(&str, Check); 9] = [
        ("gradient correctness", gradients),
        ("uniform-model oracle", uniform),
        ("memorization", memorization),
        ("transfer beats scratch", transfer),
        ("freeze and tie invariants", freeze),
        ("cross-lingual blow-up", cross_lingual),
        ("determinism and round-trip", determinism),
        ("fixture pipeline", pipeline),
        ("licensed-data harness", licensed),
    ];
    let mut failed = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        if !only.is_empty() && !only.contains(&(i + 1)) {
            continue;
        }
        let t = Instant::now();
        let v = check().unwrap_or_else(|e| Fail(format!("error: {e}")));
        let secs = t.elapsed().as_secs_f64();
        let (tag, detail) = match v {
            Pass(d) => ("PASS", d),
            Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Skip(d) => ("SKIP", d),
        };
        println!("criterion {} {name}: {tag} ({detail}; {secs:.1}s)", i + 1);
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

fn gradients() -> Outcome {
    let t = Instant::now();
    let cases = [
        ("ffnn", ffnn_case(11)),
        ("cell", lstm_case(vec![6], 5, false, 1, Mode::Eval, 20)),
        (
            "3-layer tied",
            lstm_case(vec![6, 5, 4], 4, true, 3, Mode::Eval, 30),
        ),
        (
            "3-layer 8x8",
            lstm_case(vec![8, 8, 8], 8, false, 3, Mode::Eval, 40),
        ),
        (
            "weight-dropped",
            lstm_case(vec![5, 5, 4], 4, true, 3, Mode::Train, 50),
        ),
    ];
    let secs = t.elapsed().as_secs_f64();
    let worst = cases.iter().map(|(_, w)| w.rel).fold(0.0, f64::max);
    let all = cases.iter().all(|(_, w)| w.rel < FD_TOL);
    Ok(verdict(
        all && secs < 10.0,
        format!("max rel err {worst:.2e} < {FD_TOL:.0e} over 5 cases in {secs:.2}s < 10s"),
    ))
}

fn zero_output(m: &mut LanguageModel) {
    for p in m.params_mut().iter_mut() {
        if p.name.starts_with("output.") {
            p.value.fill(0.0);
        }
    }
}

fn uniform() -> Outcome {
    let c = Corpus::from_lines("c", "the cat sat\non the mat\nthe end\n");
    let v = Vocabulary::build(&c, 1);
    let n = v.len() as f64;
    let mut lstm = LanguageModel::lstm(LstmConfig::untied(0, 6, 7), v.clone(), 1)?;
    let ffnn_cfg = FfnnConfig {
        vocab_size: 0,
        context_len: 3,
        embed_dim: 4,
        hidden_dim: 5,
        output_size: None,
    };
    let mut ffnn = LanguageModel::ffnn(ffnn_cfg, v, 1)?;
    let mut worst = 0.0f64;
    for m in [&mut lstm, &mut ffnn] {
        zero_output(m);
        let r = evaluate(m, &c, "m")?;
        worst = worst
            .max((r.perplexity / n - 1.0).abs())
            .max((r.cross_entropy / n.ln() - 1.0).abs());
    }
    Ok(verdict(
        worst < 1e-6,
        format!("V = {n}, max relative deviation {worst:.1e} for lstm and ffnn"),
    ))
}

fn memorization() -> Outcome {
    let train_c = Corpus::from_lines("cyc", &format!("{}\n", "a b c ".repeat(5000).trim_end()));
    let valid_c = Corpus::from_lines("cyc-valid", &format!("{}\n", "a b c ".repeat(1000).trim_end()));
    let vocab = Vocabulary::build(&train_c, 1);
    let cfg = LstmConfig {
        vocab_size: 0,
        embed_dim: 16,
        hidden_dims: vec![32, 32, 16],
        tie_weights: true,
        weight_drop_p: 0.0,
        output_size: None,
    };
    let tc = TrainConfig {
        epochs: 50,
        lr: 8.0,
        batch_size: 15,
        bptt: 5,
        clip_norm: Some(0.25),
        anneal_patience: 50,
        seed: 0,
        ..TrainConfig::default()
    };
    let t = Instant::now();
    let r = train(
        LanguageModel::lstm(cfg, vocab, 0)?,
        &train_c,
        &valid_c,
        &tc,
        &RunOutputs::default(),
    )?;
    let secs = t.elapsed().as_secs_f64();
    let hit = r.history.iter().find(|h| h.valid_perplexity < 1.1);
    let best = r.best_metadata.valid_perplexity.unwrap_or(f64::INFINITY);
    Ok(verdict(
        hit.is_some() && secs < 60.0,
        format!(
            "valid ppl < 1.1 first at epoch {}, best {best:.4}, {secs:.1}s < 60s",
            hit.map_or("none".into(), |h| h.epoch.to_string())
        ),
    ))
}

fn transfer_lstm() -> LstmConfig {
    LstmConfig {
        vocab_size: 0,
        embed_dim: 16,
        hidden_dims: vec![32, 16],
        tie_weights: true,
        weight_drop_p: 0.2,
        output_size: None,
    }
}

/// Target-test perplexities (scratch, finetune, substitute) for one seed.
fn transfer_seed(seed: u64) -> glosslm::Result<[f64; 3]> {
    let (a, b) = language_pair(&GrammarSpec::default(), seed);
    let src_train = a.sample_corpus("a-train", 4000, 10 + seed);
    let src_valid = a.sample_corpus("a-valid", 400, 20 + seed);
    let target = b.sample_corpus("b", 800, 30 + seed);
    let split = split_corpus(&target, seed)?;
    let sv = Vocabulary::build(&src_train, 1);
    let tv = Vocabulary::build(&split.train, 1);
    let src_cfg = TrainConfig {
        epochs: 20,
        lr: 8.0,
        seed,
        ..TrainConfig::default()
    };
    let tgt_cfg = TrainConfig {
        epochs: 100,
        ..src_cfg.clone()
    };
    let none = RunOutputs::default();
    let src = train(
        LanguageModel::lstm(transfer_lstm(), sv, seed)?,
        &src_train,
        &src_valid,
        &src_cfg,
        &none,
    )?;
    let scratch = train(
        LanguageModel::lstm(transfer_lstm(), tv.clone(), seed + 1)?,
        &split.train,
        &split.valid,
        &tgt_cfg,
        &none,
    )?;
    let ft = finetune(src.best.clone(), &split.train, &split.valid, &tgt_cfg, &none)?;
    let sub = train_substituted(&src.best, &tv, &split.train, &split.valid, &tgt_cfg, &none)?;
    let test = |r: &RunResult| evaluate(&r.best, &split.test, "m").map(|r| r.perplexity);
    Ok([test(&scratch)?, test(&ft)?, test(&sub)?])
}

fn transfer() -> Outcome {
    let t = Instant::now();
    let mut ft_wins = 0;
    let mut sub_wins = 0;
    let mut rows = Vec::new();
    for seed in 0..5 {
        let [scratch, ft, sub] = transfer_seed(seed)?;
        ft_wins += (ft < scratch) as usize;
        sub_wins += (sub < scratch) as usize;
        rows.push(format!("{scratch:.1}/{ft:.1}/{sub:.1}"));
    }
    let secs = t.elapsed().as_secs_f64();
    Ok(verdict(
        ft_wins >= 4 && sub_wins >= 4 && secs < 900.0,
        format!(
            "scratch/finetune/substitute test ppl {}; finetune wins {ft_wins}/5, substitute wins {sub_wins}/5, {secs:.0}s < 900s",
            rows.join(", ")
        ),
    ))
}

fn freeze() -> Outcome {
    let (a, b) = language_pair(&GrammarSpec::default(), 7);
    let src_train = a.sample_corpus("a", 600, 1);
    let src_valid = a.sample_corpus("a-valid", 100, 2);
    let tgt_train = b.sample_corpus("b", 300, 3);
    let tgt_valid = b.sample_corpus("b-valid", 60, 4);
    let sv = Vocabulary::build(&src_train, 1);
    let tv = Vocabulary::build(&tgt_train, 1);
    let none = RunOutputs::default();
    let one_epoch = |seed| TrainConfig {
        epochs: 1,
        lr: 8.0,
        seed,
        ..TrainConfig::default()
    };

    // Tied model trained one epoch at a time so the tie can be checked
    // between epochs.
    let mut model = LanguageModel::lstm(transfer_lstm(), sv, 5)?;
    let mut tie_epochs = 0;
    for epoch in 0..5 {
        model = finetune(model, &src_train, &src_valid, &one_epoch(epoch), &none)?.best;
        let Network::Lstm(net) = model.network() else {
            unreachable!()
        };
        let shared = net.output_weight_id() == net.embedding_id()
            && model.params().by_name("output.weight").is_none()
            && model.check_invariants().is_ok();
        tie_epochs += shared as usize;
    }

    let source = checkpoint_to_bytes(&model, &TrainingMetadata::default());
    let reloaded = glosslm::models::checkpoint_from_bytes(&source)?.model;
    let sub = train_substituted(
        &reloaded,
        &tv,
        &tgt_train,
        &tgt_valid,
        &TrainConfig {
            epochs: 5,
            lr: 8.0,
            ..TrainConfig::default()
        },
        &none,
    )?;
    let mut frozen = 0;
    let mut identical = 0;
    let mut output_moved = false;
    for p in sub.best.params().iter() {
        if p.trainable {
            output_moved |= p.value.data().iter().any(|x| *x != 0.0);
            continue;
        }
        frozen += 1;
        let same = reloaded.params().by_name(&p.name).is_some_and(|q| {
            q.value.shape() == p.value.shape()
                && q.value
                    .data()
                    .iter()
                    .zip(p.value.data())
                    .all(|(x, y)| x.to_bits() == y.to_bits())
        });
        identical += same as usize;
    }
    let trainable = sub.best.params().trainable_names().join(",");
    Ok(verdict(
        tie_epochs == 5 && frozen > 0 && identical == frozen && output_moved,
        format!(
            "tie held after {tie_epochs}/5 epochs; {identical}/{frozen} frozen tensors bit-identical after 5 substituted epochs; trainable = {trainable}"
        ),
    ))
}

fn cross_lingual() -> Outcome {
    let (a, b) = language_pair(&GrammarSpec::default(), 11);
    let langs = [("a", &a), ("b", &b)];
    let mut lines = Vec::new();
    let mut ok = true;
    for (i, (name, lang)) in langs.iter().enumerate() {
        let (other_name, other) = langs[1 - i];
        let train_c = lang.sample_corpus(name, 2000, 100 + i as u64);
        let valid_c = lang.sample_corpus(name, 200, 200 + i as u64);
        let in_test = lang.sample_corpus(name, 300, 300 + i as u64);
        let cross_test = other.sample_corpus(other_name, 300, 400 + i as u64);
        let vocab = Vocabulary::build(&train_c, 1);

        let ng = NgramModel::fit(&train_c, &vocab, 2, Smoothing::WittenBell)?;
        let ng_in = evaluate_ngram(&ng, &in_test, "ngram")?.perplexity;
        let ng_cross = evaluate_ngram(&ng, &cross_test, "ngram")?.perplexity;

        let lstm_cfg = LstmConfig {
            vocab_size: 0,
            embed_dim: 16,
            hidden_dims: vec![16],
            tie_weights: true,
            weight_drop_p: 0.2,
            output_size: None,
        };
        let ffnn_cfg = FfnnConfig {
            vocab_size: 0,
            context_len: 2,
            embed_dim: 16,
            hidden_dim: 32,
            output_size: None,
        };
        let mut neural = Vec::new();
        for (id, model, lr) in [
            (
                "lstm",
                LanguageModel::lstm(lstm_cfg, vocab.clone(), i as u64)?,
                8.0,
            ),
            ("ffnn", LanguageModel::ffnn(ffnn_cfg, vocab, i as u64)?, 1.0),
        ] {
            let cfg = TrainConfig {
                epochs: 20,
                lr,
                seed: i as u64,
                ..TrainConfig::default()
            };
            let r = train(model, &train_c, &valid_c, &cfg, &RunOutputs::default())?;
            let inside = evaluate(&r.best, &in_test, id)?.perplexity;
            let cross = evaluate(&r.best, &cross_test, id)?.perplexity;
            ok &= cross >= 2.0 * inside;
            neural.push(format!("{id} {inside:.1}->{cross:.1} (x{:.2})", cross / inside));
        }

        ok &= ng_cross >= 2.0 * ng_in;
        lines.push(format!(
            "{name}->{other_name} ngram {ng_in:.1}->{ng_cross:.1} (x{:.2}), {}",
            ng_cross / ng_in,
            neural.join(", ")
        ));
    }
    Ok(verdict(ok, lines.join("; ")))
}

fn determinism() -> Outcome {
    let dir = tempfile::TempDir::new()?;
    let (a, _) = language_pair(&GrammarSpec::default(), 3);
    let train_c = a.sample_corpus("a", 400, 1);
    let valid_c = a.sample_corpus("a-valid", 60, 2);
    let vocab = Vocabulary::build(&train_c, 1);
    let ffnn_cfg = FfnnConfig {
        vocab_size: 0,
        context_len: 3,
        embed_dim: 8,
        hidden_dim: 8,
        output_size: None,
    };
    let cfg = TrainConfig {
        epochs: 3,
        lr: 4.0,
        seed: 9,
        ..TrainConfig::default()
    };
    let mut notes = Vec::new();
    let mut ok = true;
    for arch in ["lstm", "ffnn"] {
        let mut bytes = Vec::new();
        let mut reports = Vec::new();
        let mut reloaded = Vec::new();
        for run in 0..2 {
            let model = match arch {
                "lstm" => LanguageModel::lstm(transfer_lstm(), vocab.clone(), 9)?,
                _ => LanguageModel::ffnn(ffnn_cfg.clone(), vocab.clone(), 9)?,
            };
            let ckpt = dir.path().join(format!("{arch}-{run}.glmc"));
            let outputs = RunOutputs {
                checkpoint: Some(ckpt.clone()),
                history: Some(dir.path().join(format!("{arch}-{run}.jsonl"))),
            };
            let r = train(model, &train_c, &valid_c, &cfg, &outputs)?;
            bytes.push(read(&ckpt));
            bytes.push(read(&dir.path().join(format!("{arch}-{run}.jsonl"))));
            let rep = evaluate(&r.best, &valid_c, arch)?;
            reports.push(serde_json::to_string(&rep)?);
            reloaded.push((rep, evaluate(&load_checkpoint(&ckpt)?.model, &valid_c, arch)?));
        }
        let same_files = bytes[0] == bytes[2] && bytes[1] == bytes[3];
        let same_reports = reports[0] == reports[1];
        let exact_reload = reloaded
            .iter()
            .all(|(x, y)| x.cross_entropy.to_bits() == y.cross_entropy.to_bits() && x == y);
        ok &= same_files && same_reports && exact_reload;
        notes.push(format!(
            "{arch}: checkpoint+history identical {same_files}, report identical {same_reports}, reload exact {exact_reload}"
        ));
    }
    Ok(verdict(ok, notes.join("; ")))
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn glosslm_cli(args: &[&str]) -> Result<String, Box<dyn std::error::Error>> {
    let out = Command::new(env!("CARGO_BIN_EXE_glosslm"))
        .args(args)
        .env_remove("SOURCE_DATE_EPOCH")
        .output()?;
    if !out.status.success() {
        return Err(format!("glosslm {args:?}: {}", String::from_utf8_lossy(&out.stderr)).into());
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn pipeline() -> Outcome {
    let dir = tempfile::TempDir::new()?;
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let p = |x: &PathBuf| x.to_str().unwrap().to_string();
    glosslm_cli(&["preprocess", "--elan", FIXTURE, "--out", &p(&data), "--seed", "1"])?;
    let count = |f: &str| {
        read(&data.join(f))
            .split(|b| *b == b'\n')
            .filter(|l| !l.is_empty())
            .count()
    };
    let n = count("corpus.txt");
    let sizes = [count("train.txt"), count("valid.txt"), count("test.txt")];
    let train_n = n * 85 / 100;
    let rest = n - train_n;
    let expected = [train_n, rest - rest / 2, rest / 2];

    glosslm_cli(&[
        "train",
        "--arch",
        "lstm",
        "--train",
        &p(&data.join("train.txt")),
        "--valid",
        &p(&data.join("valid.txt")),
        "--embed-dim",
        "16",
        "--hidden-dims",
        "16,16",
        "--epochs",
        "5",
        "--lr",
        "4",
        "--batch-size",
        "4",
        "--out",
        &p(&run),
    ])?;
    let report: PerplexityReport = serde_json::from_str(&glosslm_cli(&[
        "eval",
        "--model",
        &p(&run.join("model.glmc")),
        "--corpus",
        &p(&data.join("test.txt")),
        "--json",
    ])?)?;

    let raw = [
        "PT:PRO1SG",
        "EXPLAIN",
        "ABOUT",
        "PT:POSS1SG",
        "FS:PUPPY",
        "DSEW(FLAT)-BE:ANIMAL",
    ];
    let ex = ExclusionSet::default();
    let normalized: Vec<String> = raw.iter().filter_map(|g| normalize_gloss(g, &ex)).collect();
    let first = read(&data.join("corpus.txt"));
    let first = String::from_utf8_lossy(&first)
        .lines()
        .next()
        .unwrap_or("")
        .to_string();
    let want = ["explain", "about", "puppy", "animal"];

    Ok(verdict(
        sizes == expected
            && normalized == want
            && first == want.join(" ")
            && report.perplexity.is_finite()
            && report.perplexity >= 1.0,
        format!(
            "{n} sentences split {sizes:?} (rule {expected:?}); example sentence {normalized:?}; test ppl {:.2}",
            report.perplexity
        ),
    ))
}

/// Paper values per (row, column) of the two result tables.
const TABLE1: [(&str, &str, f64); 4] = [
    ("lstm", "ptb", 65.91),
    ("ffnn", "ptb", 190.46),
    ("lstm", "bsl", 274.03),
    ("ffnn", "bsl", 258.1),
];
const TABLE2: [(&str, &str, f64); 4] = [
    ("lstm", "finetune", 121.46),
    ("ffnn", "finetune", 179.3),
    ("lstm", "substitute", 123.92),
    ("ffnn", "substitute", 125.32),
];

fn licensed() -> Outcome {
    let (Some(ptb), Some(bsl)) = (
        std::env::var_os("GLOSSLM_PTB_DIR"),
        std::env::var_os("GLOSSLM_BSL_DIR"),
    ) else {
        return Ok(Skip(
            "set GLOSSLM_PTB_DIR (ptb.{train,valid,test}.txt) and GLOSSLM_BSL_DIR (ELAN tier exports) to run"
                .into(),
        ));
    };
    let ptb = PathBuf::from(ptb);
    let ptb_train = load_line_corpus(ptb.join("ptb.train.txt"))?;
    let ptb_valid = load_line_corpus(ptb.join("ptb.valid.txt"))?;
    let ptb_test = load_line_corpus(ptb.join("ptb.test.txt"))?;
    let bsl = load_elan_dir(
        PathBuf::from(bsl),
        &TierNames::default(),
        HandPolicy::RhOnly,
        &ExclusionSet::default(),
    )?;
    let stats = corpus_stats(&bsl)?;
    let stats_ok = stats.sentence_count == 810
        && (stats.mean_len - 4.31).abs() < 0.005
        && stats.min_len == 1
        && stats.max_len == 13
        && stats.vocab_size == 666;
    let split = split_corpus(&bsl, 0)?;
    let epochs = std::env::var("GLOSSLM_EPOCHS").ok().and_then(|s| s.parse().ok());
    let cfg = TrainConfig {
        epochs: epochs.unwrap_or(TrainConfig::default().epochs),
        ..TrainConfig::default()
    };
    let none = RunOutputs::default();
    let pv = Vocabulary::build(&ptb_train, 1);
    let bv = Vocabulary::build(&split.train, 1);

    let mut t1 = Vec::new();
    let mut t2 = Vec::new();
    for arch in ["lstm", "ffnn"] {
        let fresh = |v: &Vocabulary| match arch {
            "lstm" => LanguageModel::lstm(LstmConfig::new(v.len()), v.clone(), 0),
            _ => LanguageModel::ffnn(FfnnConfig::new(v.len()), v.clone(), 0),
        };
        let on_ptb = train(fresh(&pv)?, &ptb_train, &ptb_valid, &cfg, &none)?;
        t1.push(evaluate(&on_ptb.best, &ptb_test, arch)?.with_seed(0));
        let on_bsl = train(fresh(&bv)?, &split.train, &split.valid, &cfg, &none)?;
        let mut r = evaluate(&on_bsl.best, &split.test, arch)?;
        r.corpus = "bsl".into();
        t1.push(r);
        let ft = finetune(on_ptb.best.clone(), &split.train, &split.valid, &cfg, &none)?;
        t2.push(evaluate(&ft.best, &split.test, &format!("{arch}:finetune"))?);
        let sub = train_substituted(&on_ptb.best, &bv, &split.train, &split.valid, &cfg, &none)?;
        t2.push(evaluate(&sub.best, &split.test, &format!("{arch}:substitute"))?);
    }
    for r in t1.iter_mut().filter(|r| r.corpus != "bsl") {
        r.corpus = "ptb".into();
    }
    let m1 = emit_results_matrix(&t1, Layout::Table1)?;
    let m2 = emit_results_matrix(&t2, Layout::Table2)?;
    println!("{}\n{}", m1.render_text(), m2.render_text());
    let mut band = Vec::new();
    for (m, table) in [(&m1, &TABLE1), (&m2, &TABLE2)] {
        for (row, col, paper) in table {
            if let Some(r) = m.get(row, col) {
                let within = (r.perplexity / paper - 1.0).abs() <= 0.25;
                band.push(format!(
                    "{row}/{col} {:.2} vs {paper}{}",
                    r.perplexity,
                    if within { "" } else { " (outside 25% band)" }
                ));
            }
        }
    }
    Ok(verdict(
        stats_ok,
        format!(
            "BSL stats {} sentences, mean {:.2}, min {}, max {}, vocab {}; {}",
            stats.sentence_count,
            stats.mean_len,
            stats.min_len,
            stats.max_len,
            stats.vocab_size,
            band.join(", ")
        ),
    ))
}

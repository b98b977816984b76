use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::{Arc, OnceLock};

use embed_langevin::model::checkpoint::{self, Checkpoint};
use embed_langevin::model::corpus::{sentiment_corpus, SENTIMENT_LABELS};
use embed_langevin::model::{CausalLM, EmbeddingTable};
use rand::SeedableRng;
use serde_json::{json, Value};
use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_embed-langevin"));
    c.env_remove("EMBED_LANGEVIN_DATA");
    c
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().args(args).arg("--data-dir").arg(dir).output().unwrap()
}

fn write_json(dir: &Path, name: &str, v: Value) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, serde_json::to_string_pretty(&v).unwrap()).unwrap();
    p
}

fn ok(o: &Output) {
    assert!(o.status.success(), "exit {:?}\nstdout:\n{}\nstderr:\n{}", o.status, String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr));
}

/// A directory with a small labeled corpus, a trained LM and a classifier.
/// Shared read-only across tests; tests write their own outputs elsewhere.
fn trained() -> &'static Path {
    static DIR: OnceLock<TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path();
        let corpus: String = sentiment_corpus(400, 11)
            .into_iter()
            .map(|(t, l)| format!("{}\t{t}\n", SENTIMENT_LABELS[l]))
            .collect();
        fs::write(p.join("corpus.tsv"), corpus).unwrap();
        fs::write(p.join("prompts.txt"), "the movie\nthe food\n").unwrap();
        let lm_cfg = write_json(
            p,
            "lm.json",
            json!({
                "corpus": "corpus.tsv",
                "labeled": true,
                "lm": {"layers": 1, "heads": 1, "ffn_hidden": 16, "context_limit": 24},
                "train": {"epochs": 2, "embed_dim": 8, "optimizer": "adam", "learning_rate": 0.02, "seed": 3},
                "out": "lm.ckpt"
            }),
        );
        ok(&run(p, &["train-lm", "--config", lm_cfg.to_str().unwrap()]));
        let clf_cfg = write_json(
            p,
            "clf.json",
            json!({
                "lm": "lm.ckpt",
                "corpus": "corpus.tsv",
                "kind": "discriminative",
                "hidden": 8,
                "train": {"epochs": 2, "optimizer": "adam", "learning_rate": 0.02, "seed": 4},
                "out": "clf.ckpt"
            }),
        );
        ok(&run(p, &["train-classifier", "--config", clf_cfg.to_str().unwrap()]));
        dir
    })
    .path()
}

fn sample_config(out: &Path) -> Value {
    json!({
        "lm": "lm.ckpt",
        "prompts_file": "prompts.txt",
        "lengths": [3],
        "samples_per_prompt": 2,
        "constraints": [
            {"type": "discriminative", "parameters": {"model": "clf.ckpt", "label": "positive"}, "threshold": 0.6}
        ],
        "sampler": {"max_steps": 30, "restarts": 0, "stall_window": 5, "seed": 5},
        "out": out
    })
}

#[test]
fn train_sample_eval_round_trip() {
    let data = trained();
    let work = tempfile::tempdir().unwrap();
    let samples = work.path().join("s.jsonl");
    let cfg = write_json(work.path(), "sample.json", sample_config(&samples));
    ok(&run(data, &["sample", "--config", cfg.to_str().unwrap()]));
    let text = fs::read_to_string(&samples).unwrap();
    assert_eq!(text.lines().count(), 4);

    let eval_cfg = write_json(work.path(), "eval.json", json!({"lm": "lm.ckpt", "keywords": ["good"]}));
    let o = run(data, &["eval", samples.to_str().unwrap(), "--config", eval_cfg.to_str().unwrap()]);
    ok(&o);
    let report: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["samples"], 4);
    assert!(report["perplexity"].as_f64().unwrap() > 1.0);
    assert!(report["coverage"]["fraction"].as_f64().unwrap() <= 1.0);
}

#[test]
fn same_seed_gives_identical_bytes_and_jobs_do_not_matter() {
    let data = trained();
    let work = tempfile::tempdir().unwrap();
    let mut outs = Vec::new();
    for (i, jobs) in ["1", "1", "3"].iter().enumerate() {
        let out = work.path().join(format!("{i}.jsonl"));
        let cfg = write_json(work.path(), &format!("{i}.json"), sample_config(&out));
        ok(&run(data, &["sample", "--config", cfg.to_str().unwrap(), "--jobs", jobs]));
        outs.push(fs::read(out).unwrap());
    }
    assert_eq!(outs[0], outs[1]);
    assert_eq!(outs[0], outs[2]);

    let out = work.path().join("other.jsonl");
    let cfg = write_json(work.path(), "other.json", sample_config(&out));
    ok(&run(data, &["sample", "--config", cfg.to_str().unwrap(), "--seed", "99"]));
    assert_ne!(fs::read(out).unwrap(), outs[0]);
}

#[test]
fn missing_corpus_is_rejected_before_training() {
    let work = tempfile::tempdir().unwrap();
    let cfg = write_json(work.path(), "lm.json", json!({"corpus": "nope.txt", "out": "lm.ckpt"}));
    let o = run(work.path(), &["train-lm", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope.txt"));
    assert!(!work.path().join("lm.ckpt").exists());
}

#[test]
fn unknown_keys_and_bad_values_exit_with_two() {
    let data = trained();
    let work = tempfile::tempdir().unwrap();
    let mut cfg = sample_config(&work.path().join("s.jsonl"));
    cfg["sampler"]["temperature"] = json!(1.0);
    let p = write_json(work.path(), "bad.json", cfg);
    assert_eq!(run(data, &["sample", "--config", p.to_str().unwrap()]).status.code(), Some(2));

    let mut cfg = sample_config(&work.path().join("s.jsonl"));
    cfg["lengths"] = json!([0]);
    let p = write_json(work.path(), "zero.json", cfg);
    assert_eq!(run(data, &["sample", "--config", p.to_str().unwrap()]).status.code(), Some(2));
    assert!(!work.path().join("s.jsonl").exists());
}

#[test]
fn eval_reports_the_corrupted_line() {
    let data = trained();
    let work = tempfile::tempdir().unwrap();
    let samples = work.path().join("s.jsonl");
    let cfg = write_json(work.path(), "sample.json", sample_config(&samples));
    ok(&run(data, &["sample", "--config", cfg.to_str().unwrap()]));
    let mut text = fs::read_to_string(&samples).unwrap();
    text.push_str("{\"version\": 1, \"prompt\": \n");
    fs::write(&samples, text).unwrap();
    let eval_cfg = write_json(work.path(), "eval.json", json!({"lm": "lm.ckpt"}));
    let o = run(data, &["eval", samples.to_str().unwrap(), "--config", eval_cfg.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 5"), "{}", String::from_utf8_lossy(&o.stderr));
}

/// Copies `lm.ckpt` with row `b` of the table overwritten by row `a`.
fn with_duplicated_row(data: &Path, dest: &Path, a: usize, b: usize) {
    let lm = checkpoint::load_lm(&data.join("lm.ckpt")).unwrap();
    let mut weights = lm.table().weights().clone();
    let d = lm.table().dim();
    let row = weights.data()[a * d..(a + 1) * d].to_vec();
    weights.data_mut()[b * d..(b + 1) * d].copy_from_slice(&row);
    let table = Arc::new(EmbeddingTable::new(weights, lm.table().lexicon().clone()).unwrap());
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let lm = CausalLM::new_random(table, lm.config().clone(), &mut rng).unwrap();
    checkpoint::save(dest, &Checkpoint::Lm(lm)).unwrap();
}

#[test]
fn verify_flags_a_duplicated_row() {
    let data = trained();
    let work = tempfile::tempdir().unwrap();
    let cfg = write_json(work.path(), "verify.json", json!({"instances": 3, "seed": 1}));
    let bad = work.path().join("dup.ckpt");
    with_duplicated_row(data, &bad, 4, 7);
    let o = run(data, &["verify", bad.to_str().unwrap(), "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let report: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["passed"], false);
    let tokens: Vec<u64> = report["report"]["separation"]["violations"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v["token"].as_u64().unwrap())
        .collect();
    // The briefly trained table may have other near-collisions too.
    assert!(tokens.contains(&4) && tokens.contains(&7), "{tokens:?}");
}

#[test]
fn constraint_model_on_another_table_is_refused() {
    let data = trained();
    let work = tempfile::tempdir().unwrap();
    // An LM whose table differs from the classifier's.
    with_duplicated_row(data, &work.path().join("lm.ckpt"), 1, 2);
    fs::copy(data.join("clf.ckpt"), work.path().join("clf.ckpt")).unwrap();
    fs::copy(data.join("prompts.txt"), work.path().join("prompts.txt")).unwrap();
    let out = work.path().join("s.jsonl");
    let cfg = write_json(work.path(), "sample.json", sample_config(&out));
    let o = run(work.path(), &["sample", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("table"), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn ablate_memory_finds_the_simplex_limit_first() {
    let data = trained();
    let work = tempfile::tempdir().unwrap();
    // V≈70, d=8: per position embeds 192 B, simplex ≈1.7 KB.
    let cfg = write_json(
        work.path(),
        "ablate.json",
        json!({"lm": "lm.ckpt", "lengths": [2, 8, 32], "memory_cap_bytes": 12000, "prompt": "the"}),
    );
    let o = run(data, &["ablate-memory", "--config", cfg.to_str().unwrap()]);
    ok(&o);
    let r: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(r["max_len_embeds"], 32);
    assert_eq!(r["max_len_simplex"], 2);
}

use std::path::Path;
use std::process::{Command, Output};

fn massrank(dir: &Path, args: &[&str]) -> Output {
    massrank_env(dir, args, &[])
}

fn massrank_env(dir: &Path, args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_massrank"));
    cmd.current_dir(dir).args(args);
    for (k, _) in std::env::vars().filter(|(k, _)| k.starts_with("MASSRANK_")) {
        cmd.env_remove(k);
    }
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr_json(o: &Output) -> serde_json::Value {
    serde_json::from_slice(o.stderr.trim_ascii()).unwrap_or_else(|_| panic!("{}", String::from_utf8_lossy(&o.stderr)))
}

fn exported_table(dir: &Path) {
    let o = massrank(dir, &["oracle", "gen", "--images", "3", "--vocab", "4", "--seed", "7", "--out", "model.json"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = massrank(dir, &["oracle", "export", "--model", "model.json", "--out", "t.jsonl"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = massrank(dir.path(), &["frobnicate"]);
    assert_eq!(code(&o), 1);
    assert_eq!(stderr_json(&o)["error"], "UsageError");

    exported_table(dir.path());
    let o = massrank(dir.path(), &["score", "--table", "t.jsonl", "--similarity", "mass", "--marginal", "mc-avg-log", "--out", "s.jsonl"]);
    assert_eq!(code(&o), 1);
    let o = massrank(dir.path(), &["score", "--table", "t.jsonl", "--similarity", "mass", "--mc-n", "4", "--out", "s.jsonl"]);
    assert_eq!(code(&o), 1);
    assert_eq!(code(&massrank(dir.path(), &["--help"])), 0);
}

#[test]
fn validation_errors_exit_two_with_json() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.jsonl"), "{\"image\":\"i\",\"text\":\"t\",\"tokens\":[\"a\"],\"logp\":[0.5]}\n").unwrap();
    let o = massrank(dir.path(), &["score", "--table", "bad.jsonl", "--similarity", "tl", "--out", "s.jsonl"]);
    assert_eq!(code(&o), 2);
    let err = stderr_json(&o);
    assert_eq!(err["error"], "TableError");
    assert!(err["message"].as_str().unwrap().contains("bad.jsonl"));
    assert!(!dir.path().join("s.jsonl").exists());

    let o = massrank(dir.path(), &["oracle", "family", "--strength", "0.3", "--n", "4", "--out", "fam"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn missing_null_row_names_the_text() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("t.jsonl"),
        "{\"image\":\"i\",\"text\":\"cap_b\",\"tokens\":[\"a\"],\"logp\":[-0.5]}\n\
         {\"image\":\"null\",\"text\":\"cap_a\",\"tokens\":[\"a\"],\"logp\":[-0.7]}\n\
         {\"image\":\"i\",\"text\":\"cap_a\",\"tokens\":[\"a\"],\"logp\":[-0.5]}\n",
    )
    .unwrap();
    let o = massrank(dir.path(), &["score", "--table", "t.jsonl", "--similarity", "mass", "--out", "s.jsonl"]);
    assert_eq!(code(&o), 2);
    let err = stderr_json(&o);
    assert_eq!(err["error"], "MissingEntryError");
    assert!(err["message"].as_str().unwrap().contains("cap_b"), "{err}");
}

#[test]
fn flags_override_environment_override_config() {
    let dir = tempfile::tempdir().unwrap();
    exported_table(dir.path());
    std::fs::write(dir.path().join("cfg.toml"), "similarity = \"tl\"\ntl_mode = \"logprob-mean\"\n").unwrap();
    let prov = |name: &str| -> serde_json::Value {
        serde_json::from_str(&std::fs::read_to_string(dir.path().join(format!("{name}.prov.json"))).unwrap()).unwrap()
    };

    let o = massrank(dir.path(), &["--config", "cfg.toml", "score", "--table", "t.jsonl", "--out", "a.jsonl"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(prov("a.jsonl")["tl_mode"], "logprob-mean");

    let o = massrank_env(
        dir.path(),
        &["--config", "cfg.toml", "score", "--table", "t.jsonl", "--out", "b.jsonl"],
        &[("MASSRANK_TL_MODE", "prob-mean")],
    );
    assert_eq!(code(&o), 0);
    assert_eq!(prov("b.jsonl")["tl_mode"], "prob-mean");

    let o = massrank_env(
        dir.path(),
        &["--config", "cfg.toml", "score", "--table", "t.jsonl", "--similarity", "mass", "--out", "c.jsonl"],
        &[("MASSRANK_SIMILARITY", "itc")],
    );
    assert_eq!(code(&o), 0);
    assert_eq!(prov("c.jsonl")["similarity"], "mass");

    std::fs::write(dir.path().join("bad.toml"), "similarity = \"tl\"\nbogus = 1\n").unwrap();
    let o = massrank(dir.path(), &["--config", "bad.toml", "score", "--table", "t.jsonl", "--out", "d.jsonl"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn oracle_gen_is_deterministic_in_the_seed() {
    let dir = tempfile::tempdir().unwrap();
    for (out, seed) in [("a.json", "3"), ("b.json", "3"), ("c.json", "4")] {
        let o = massrank(dir.path(), &["oracle", "gen", "--images", "2", "--vocab", "3", "--seed", seed, "--out", out]);
        assert_eq!(code(&o), 0);
    }
    let read = |f: &str| std::fs::read(dir.path().join(f)).unwrap();
    assert_eq!(read("a.json"), read("b.json"));
    assert_ne!(read("a.json"), read("c.json"));
    assert!(dir.path().join("a.json.digest").exists());
}

#[test]
fn family_outcomes_match_their_declared_expectations() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert_eq!(code(&massrank(p, &["oracle", "family", "--strength", "0.8", "--n", "10", "--seed", "1", "--out", "fam"])), 0);
    for (sim, expected) in [("mass", 1.0), ("tl", 0.0)] {
        let scores = format!("{sim}.jsonl");
        let res = format!("{sim}.json");
        let o = massrank(p, &["score", "--table", "fam/table.jsonl", "--similarity", sim, "--out", &scores]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let o = massrank(p, &["eval", "--metric", "foil", "--scores", &scores, "--manifest", "fam/foil.jsonl", "--out", &res]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(p.join(&res)).unwrap()).unwrap();
        assert_eq!(doc["metrics"]["accuracy"], expected);
    }
}

fn script(dir: &Path, name: &str, body: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, format!("#!/bin/sh\n{body}")).unwrap();
    format!("stdio:sh {}", path.display())
}

#[test]
fn probe_accepts_the_reference_adapter() {
    let dir = tempfile::tempdir().unwrap();
    let endpoint = format!("stdio:{} echo-adapter", env!("CARGO_BIN_EXE_massrank"));
    let o = massrank(dir.path(), &["probe", "--adapter", &endpoint]);
    let out = String::from_utf8_lossy(&o.stdout);
    assert_eq!(code(&o), 0, "{out}{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.starts_with("PASS"));
    assert!(out.contains("identity sha256:"));
}

#[test]
fn probe_names_the_offending_field() {
    let dir = tempfile::tempdir().unwrap();
    let endpoint = script(
        dir.path(),
        "positive.sh",
        r#"while read line; do
  case "$line" in
    *identity*) echo '{"identity":{"name":"faulty"}}' ;;
    *) echo '{"items":[{"tokens":["a"],"logp":[-1.0]},{"tokens":["a"],"logp":[0.5]}]}' ;;
  esac
done
"#,
    );
    let o = massrank(dir.path(), &["probe", "--adapter", &endpoint, "--retries", "0"]);
    let out = String::from_utf8_lossy(&o.stdout);
    assert_eq!(code(&o), 3, "{out}");
    assert!(out.starts_with("FAIL"));
    assert!(out.contains("items[1].logp[0]"), "{out}");
}

#[test]
fn probe_reports_a_silent_adapter_as_timeout() {
    let dir = tempfile::tempdir().unwrap();
    let endpoint = script(dir.path(), "silent.sh", "while read line; do sleep 5; done\n");
    let o = massrank(dir.path(), &["probe", "--adapter", &endpoint, "--timeout-secs", "0.3", "--retries", "1"]);
    assert_eq!(code(&o), 3);
    assert_eq!(stderr_json(&o)["error"], "AdapterTimeoutError");
}

#[test]
fn lexicon_commands() {
    let dir = tempfile::tempdir().unwrap();
    let o = massrank(dir.path(), &["lexicon", "neutralize", "--caption", "A man and HIS dog"]);
    assert_eq!(String::from_utf8_lossy(&o.stdout).trim(), "A person and THEIR dog");
    let o = massrank(dir.path(), &["lexicon", "classify", "--caption", "She runs", "--caption", "a dog"]);
    let out = String::from_utf8_lossy(&o.stdout);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines, ["feminine", "neutral"]);
}

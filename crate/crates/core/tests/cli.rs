use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn sidsearch(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sidsearch")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn datagen(dir: &Path) {
    let out = sidsearch(&["datagen", "--catalog", dir.to_str().unwrap(), "--seed", "7"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn missing_catalog_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nothing-here");
    assert_eq!(code(&sidsearch(&["train-fusion", "--catalog", missing.to_str().unwrap()])), 3);
}

#[test]
fn bad_level_spec_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    assert_eq!(code(&sidsearch(&["fit-vrq", "--catalog", d, "--levels", "8,8,,8|4"])), 2);
}

#[test]
fn config_file_rejects_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.conf");
    fs::write(&cfg, "seed = 7\nlearning_rate = 0.1\n").unwrap();
    let out = sidsearch(&["datagen", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
}

#[test]
fn flags_override_config_and_reruns_are_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let cfg = dir.path().join("run.conf");
    fs::write(&cfg, format!("# seed comes from the flag\ncatalog = {}\nseed = 99\n", a.display())).unwrap();
    let out = sidsearch(&["datagen", "--config", cfg.to_str().unwrap(), "--seed", "7"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    datagen(&b);

    let manifest = fs::read_to_string(a.join("manifest.json")).unwrap();
    assert!(manifest.contains("\"seed\": 7"), "{manifest}");
    for f in ["manifest.json", "items.jsonl", "pairs.jsonl", "sessions.jsonl", "histories.jsonl", "embeddings.bin", "category_vecs.bin"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let run: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("runs/datagen.json")).unwrap()).unwrap();
    assert_eq!(run["command"], "datagen");
    assert!(run["outputs"].as_object().unwrap().len() >= 7);
}

#[test]
fn corrupted_embeddings_exit_5() {
    let dir = tempfile::tempdir().unwrap();
    datagen(dir.path());
    let path = dir.path().join("embeddings.bin");
    let mut bytes = fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    fs::write(&path, bytes).unwrap();
    let out = sidsearch(&["train-fusion", "--catalog", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 5, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn training_before_encoding_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    datagen(dir.path());
    let d = dir.path().to_str().unwrap();
    assert_eq!(code(&sidsearch(&["train-gr", "--catalog", d, "--stage", "sft"])), 3);
}

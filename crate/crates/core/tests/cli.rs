use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

fn rlt4rec(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rlt4rec"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("RLT4REC_THREADS")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

const MINIATURE: &[&str] = &[
    "--set",
    "data.users_per_group=10",
    "--set",
    "data.seq_len=10",
    "--set",
    "model.d=16",
    "--set",
    "model.max_timesteps=10",
    "--set",
    "model.epochs=2",
    "--set",
    "eval.users_per_group=10",
    "--set",
    "eval.horizon=10",
    "--set",
    "eval.warmup=5",
    "--set",
    "eval.ks=[5]",
    "--set",
    "probe.users_per_group=10",
    "--set",
    "probe.horizon=5",
    "--set",
    "probe.epochs=5",
];

fn with_miniature<'a>(cmd: &[&'a str]) -> Vec<&'a str> {
    cmd.iter().copied().chain(MINIATURE.iter().copied()).collect()
}

#[test]
fn full_pipeline_on_a_pd1_miniature() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    for cmd in [
        vec!["gen"],
        vec!["train"],
        vec!["train", "--no-bottleneck"],
        vec!["eval", "--policies", "rlt4rec,rlt4rec_no_bottleneck,best_star,random_uniform,bayes_greedy"],
        vec!["probe"],
    ] {
        let o = rlt4rec(&with_miniature(&cmd), out);
        assert_eq!(code(&o), 0, "{cmd:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
    for f in [
        "dataset.csv",
        "model.ckpt",
        "model_no_bottleneck.ckpt",
        "train_log.csv",
        "curve_rlt4rec.csv",
        "precision_rlt4rec.csv",
        "curve_best_star.csv",
        "curve_rlt4rec_no_bottleneck.csv",
        "probe.csv",
        "manifest_gen.json",
        "manifest_train.json",
        "manifest_eval.json",
        "manifest_probe.json",
    ] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest_eval.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 0);
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
    assert!(manifest["wall_seconds"].as_f64().unwrap() >= 0.0);
    let curve = std::fs::read_to_string(out.join("curve_best_star.csv")).unwrap();
    assert!(curve.starts_with("t,mean_rating,stderr,policy,dataset,seed"));
    assert_eq!(curve.lines().count(), 11);
    assert!(start.elapsed().as_secs() < 60);
}

#[test]
fn reruns_reproduce_every_output_byte() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [a.path(), b.path()] {
        for cmd in [vec!["gen"], vec!["train"], vec!["eval", "--policies", "rlt4rec,random_uniform"]] {
            assert_eq!(code(&rlt4rec(&with_miniature(&cmd), dir)), 0);
        }
    }
    for f in ["dataset.csv", "model.ckpt", "train_log.csv", "curve_rlt4rec.csv", "curve_random_uniform.csv"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let o = rlt4rec(&["eval", "--policies", "oracle"], out);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown policy"));
    assert_eq!(code(&rlt4rec(&["gen", "--set", "data.seq_len=200"], out)), 2);
    assert_eq!(code(&rlt4rec(&["print-config", "--set", "model.bogus=1"], out)), 2);
    assert_eq!(code(&rlt4rec(&["print-config", "--config", "/nonexistent.json"], out)), 2);
    assert_eq!(code(&rlt4rec(&["frobnicate"], out)), 2);
    let triples = out.join("bad.csv");
    std::fs::write(&triples, "u,i,4\nu,j,x\n").unwrap();
    let o = rlt4rec(&["ingest", triples.to_str().unwrap(), "--n-groups", "1"], out);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains(":2:"));
    assert_eq!(code(&rlt4rec(&["eval", "--set", "eval.policies=[\"rlt4rec\"]"], out)), 2);
}

#[test]
fn runtime_failures_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("model.ckpt");
    std::fs::write(&ckpt, b"RLT4REC garbage").unwrap();
    let o = rlt4rec(&["eval", "--set", "eval.policies=[\"rlt4rec\"]"], dir.path());
    assert_eq!(code(&o), 1, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn print_config_round_trips_through_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let o = rlt4rec(&["print-config", "--seed", "7", "--set", "model.epochs=3"], dir.path());
    assert_eq!(code(&o), 0);
    let path = dir.path().join("cfg.json");
    std::fs::write(&path, &o.stdout).unwrap();
    let again = rlt4rec(&["print-config", "--config", path.to_str().unwrap()], dir.path());
    assert_eq!(again.stdout, o.stdout);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!((v["seed"].as_u64(), v["model"]["epochs"].as_u64()), (Some(7), Some(3)));
    assert_eq!(v["model"]["d"], 128);
}

#[test]
fn ingest_then_use_the_group_model() {
    let dir = tempfile::tempdir().unwrap();
    let triples = dir.path().join("ratings.csv");
    let mut text = String::from("user,item,rating\n");
    for u in 0..6 {
        for i in 0..8 {
            let r = if (u < 3) == (i < 4) { 5 } else { 1 };
            text.push_str(&format!("u{u},i{i},{r}\n"));
        }
    }
    std::fs::write(&triples, text).unwrap();
    let o = rlt4rec(&["ingest", triples.to_str().unwrap(), "--n-groups", "2"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let gm_path = dir.path().join("group_model.json");
    let map = std::fs::read_to_string(dir.path().join("group_model.items.csv")).unwrap();
    assert!(map.starts_with("item,item_id\n0,i0\n1,i1\n"), "{map}");
    let dataset = format!("dataset={{\"kind\":\"group_model\",\"path\":{:?}}}", gm_path.to_str().unwrap());
    let o = rlt4rec(&["print-config", "--set", &dataset], dir.path());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["model"]["d"], 256);
    let o = rlt4rec(
        &["eval", "--set", &dataset, "--set", "eval.policies=[\"best_star\"]", "--set", "eval.horizon=4", "--set", "eval.ks=[]"],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("curve_best_star.csv").exists());
}

#[test]
fn thread_env_var_is_validated() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_rlt4rec"))
        .args(["print-config"])
        .env("RLT4REC_THREADS", "lots")
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
    let o = Command::new(env!("CARGO_BIN_EXE_rlt4rec"))
        .args(["print-config"])
        .env("RLT4REC_THREADS", "2")
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
}

#[test]
fn tiny_overfit_mode_reports_the_drop() {
    let dir = tempfile::tempdir().unwrap();
    let o = rlt4rec(&["train", "--tiny-overfit"], dir.path());
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    let ratio: f64 = text.trim().rsplit("ratio=").next().unwrap().parse().unwrap();
    assert!(ratio < 0.1, "{text}");
}

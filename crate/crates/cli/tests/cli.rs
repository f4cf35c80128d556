use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn btn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_btn"))
        .args(args)
        .env("BTN_THREADS", "1")
        .output()
        .expect("spawn btn")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tiny_config() -> Value {
    json!({
        "model": {
            "input_shape": [1, 16, 16],
            "columns": [
                {"kernels": [5, 3, 3], "channels": [2, 3, 2]},
                {"kernels": [3, 3, 3], "channels": [2, 2, 1]}
            ],
            "seed": 3
        },
        "train": {
            "total_epochs": 4,
            "warmup_epochs": 1,
            "ramp_epochs": 2,
            "batch_size": 4,
            "optimizer": "adam",
            "learning_rate": 0.005,
            "epsilon_target": 0.01,
            "seed": 5
        },
        "data": {
            "scene": {"canvas": [16, 16], "count_range": [1, 6], "seed": 9},
            "n_train": 8,
            "n_val": 4,
            "n_test": 3
        },
        "eval": {"attack_samples": 60}
    })
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new(cfg: &Value) -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("config.json"), serde_json::to_string_pretty(cfg).unwrap()).unwrap();
        Workspace { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn s(&self, rel: &str) -> String {
        self.path(rel).to_str().unwrap().to_owned()
    }

    fn generate(&self) {
        let o = btn(&["generate-data", "--config", &self.s("config.json"), "--out", &self.s("data")]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }

    fn train(&self, out: &str, extra: &[&str]) -> Output {
        let (cfg, data, out) = (self.s("config.json"), self.s("data"), self.s(out));
        let mut args = vec!["train", "--config", &cfg, "--data", &data, "--out", &out];
        args.extend_from_slice(extra);
        btn(&args)
    }
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn generate_data_writes_three_splits() {
    let ws = Workspace::new(&tiny_config());
    let o = btn(&["generate-data", "--config", &ws.s("config.json"), "--out", &ws.s("data")]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.contains("train: 8 samples"), "{stdout}");
    for (split, n) in [("train", 8), ("val", 4), ("test", 3)] {
        let m = read_json(&ws.path(&format!("data/{split}/manifest.json")));
        assert_eq!(m["n"], n);
        assert_eq!(m["samples"].as_array().unwrap().len(), n);
    }
    let resolved = read_json(&ws.path("data/config.json"));
    assert_eq!(resolved["train"]["momentum"], 0.9);
}

#[test]
fn config_errors_exit_2() {
    let mut cfg = tiny_config();
    cfg["data"]["scene"]["gt_sigma_px"] = json!(-1.0);
    let ws = Workspace::new(&cfg);
    let o = btn(&["generate-data", "--config", &ws.s("config.json"), "--out", &ws.s("data")]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("data.scene.gt_sigma_px"), "{}", stderr(&o));

    let mut cfg = tiny_config();
    cfg["train"]["learning_rat"] = json!(0.1);
    let ws = Workspace::new(&cfg);
    let o = btn(&["generate-data", "--config", &ws.s("config.json"), "--out", &ws.s("data")]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("learning_rat"), "{}", stderr(&o));
}

#[test]
fn unwritable_output_exits_3() {
    let ws = Workspace::new(&tiny_config());
    fs::write(ws.path("blocker"), b"x").unwrap();
    let o = btn(&["generate-data", "--config", &ws.s("config.json"), "--out", &ws.s("blocker/data")]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    let o = btn(&["train", "--config", &ws.s("config.json"), "--data", &ws.s("nowhere"), "--out", &ws.s("run")]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn training_is_reproducible_and_resumable() {
    let ws = Workspace::new(&tiny_config());
    ws.generate();
    for out in ["a", "b"] {
        let o = ws.train(out, &[]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let csv_a = fs::read(ws.path("a/epochs.csv")).unwrap();
    assert_eq!(csv_a, fs::read(ws.path("b/epochs.csv")).unwrap());
    assert_eq!(fs::read(ws.path("a/final.btnc")).unwrap(), fs::read(ws.path("b/final.btnc")).unwrap());
    let text = String::from_utf8(csv_a.clone()).unwrap();
    assert_eq!(text.lines().count(), 5);
    assert!(text.starts_with("epoch,kappa,epsilon,natural,certify,reg,total,val_mae,val_ct_mae\n"));
    assert!(ws.path("a/best.btnc").exists());
    assert!(ws.path("a/config.json").exists());

    let o = ws.train("c", &["--until-epoch", "2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read_to_string(ws.path("c/epochs.csv")).unwrap().lines().count(), 3);
    let ck = ws.s("c/final.btnc");
    let o = ws.train("c", &["--resume", &ck]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read(ws.path("c/epochs.csv")).unwrap(), csv_a);
    assert_eq!(fs::read(ws.path("c/final.btnc")).unwrap(), fs::read(ws.path("a/final.btnc")).unwrap());
    assert_eq!(fs::read(ws.path("c/best.btnc")).unwrap(), fs::read(ws.path("a/best.btnc")).unwrap());
}

#[test]
fn resume_rejects_a_different_config() {
    let ws = Workspace::new(&tiny_config());
    ws.generate();
    assert_eq!(code(&ws.train("a", &["--until-epoch", "1"])), 0);
    let mut cfg = tiny_config();
    cfg["train"]["learning_rate"] = json!(0.01);
    fs::write(ws.path("config.json"), cfg.to_string()).unwrap();
    let ck = ws.s("a/final.btnc");
    assert_eq!(code(&ws.train("a", &["--resume", &ck])), 2);
}

#[test]
fn pinned_kappa_zeroes_certify_column() {
    let mut cfg = tiny_config();
    cfg["train"]["kappa_end"] = json!(1.0);
    let ws = Workspace::new(&cfg);
    ws.generate();
    assert_eq!(code(&ws.train("run", &[])), 0);
    let csv = fs::read_to_string(ws.path("run/epochs.csv")).unwrap();
    for line in csv.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols[1], "1");
        assert_eq!(cols[4], "0", "{line}");
    }
}

#[test]
fn divergence_exits_4() {
    let mut cfg = tiny_config();
    cfg["train"]["optimizer"] = json!("sgd");
    cfg["train"]["learning_rate"] = json!(1e200);
    let ws = Workspace::new(&cfg);
    ws.generate();
    let o = ws.train("run", &[]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    assert!(stderr(&o).contains("diverged"), "{}", stderr(&o));
}

fn trained() -> Workspace {
    let ws = Workspace::new(&tiny_config());
    ws.generate();
    let o = ws.train("run", &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    ws
}

fn certify(ws: &Workspace, eps: &str, norm: &str, out: &str) -> Value {
    let o = btn(&[
        "certify",
        "--ckpt",
        &ws.s("run/final.btnc"),
        "--data",
        &ws.s("data"),
        "--eps",
        eps,
        "--norm",
        norm,
        "--out",
        &ws.s(out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    read_json(&ws.path(out))
}

#[test]
fn certify_reports() {
    let ws = trained();

    let r = certify(&ws, "0", "linf", "zero.json");
    assert_eq!(r["schema"], 1);
    let s = &r["results"][0]["summary"];
    for (a, b) in [("ct_mae", "clean_mae"), ("ct_mse", "clean_mse")] {
        assert!((s[a].as_f64().unwrap() - s[b].as_f64().unwrap()).abs() <= 1e-9);
    }
    let digest = hex::encode(Sha256::digest(fs::read(ws.path("run/final.btnc")).unwrap()));
    assert_eq!(r["checkpoint_sha256"], digest);
    assert_eq!(r["config"]["model"]["seed"], 3);

    let r = certify(&ws, "1/255,3/255,5/255", "linf", "linf.json");
    let results = r["results"].as_array().unwrap();
    assert_eq!(results.len(), 3);
    let ct: Vec<f64> = results.iter().map(|e| e["summary"]["ct_mae"].as_f64().unwrap()).collect();
    assert!(ct.windows(2).all(|w| w[0] <= w[1]), "{ct:?}");
    assert!(results[0]["theorem1_bound"].as_f64().unwrap() > 0.0);
    assert_eq!(results[0]["images"].as_array().unwrap().len(), 3);

    let r = certify(&ws, "0.5,1.0,2.0", "l2", "l2.json");
    let eps: Vec<f64> = r["results"].as_array().unwrap().iter().map(|e| e["epsilon"].as_f64().unwrap()).collect();
    assert_eq!(eps, [0.5, 1.0, 2.0]);
    assert!(r["results"][0]["theorem1_bound"].is_null());
    assert_eq!(r["norm"], "l2");

    certify(&ws, "1/255,3/255,5/255", "linf", "linf2.json");
    assert_eq!(fs::read(ws.path("linf.json")).unwrap(), fs::read(ws.path("linf2.json")).unwrap());
}

fn attack(ws: &Workspace, eps: &str, extra: &[&str]) -> (Output, Value) {
    let (ck, data, out, cfg) = (ws.s("run/final.btnc"), ws.s("data"), ws.s("attack.json"), ws.s("config.json"));
    let mut args = vec!["attack", "--ckpt", &ck, "--data", &data, "--eps", eps, "--out", &out, "--config", &cfg];
    args.extend_from_slice(extra);
    let o = btn(&args);
    let report = read_json(&ws.path("attack.json"));
    (o, report)
}

#[test]
fn attack_gate() {
    let ws = trained();

    let (o, r) = attack(&ws, "3/255", &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(r["total_violations"], 0);
    assert_eq!(r["images"][0]["n_samples"], 60);

    let (o, r) = attack(&ws, "0.5", &["--norm", "l2", "--samples", "40"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(r["images"][0]["n_samples"], 40);

    let (o, r) = attack(&ws, "0", &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for img in r["images"].as_array().unwrap() {
        assert_eq!(img["worst_count_deviation"], 0.0);
    }

    let (o, r) = attack(&ws, "3/255", &["--shrink-upper", "1"]);
    assert_eq!(code(&o), 5, "{}", stderr(&o));
    assert!(r["total_violations"].as_u64().unwrap() > 0);
}

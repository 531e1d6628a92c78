use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::json;
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ionstain"))
}

fn tiny_config() -> serde_json::Value {
    json!({
        "schedule": {"steps": 20, "scale": 1.0},
        "model": {
            "conditioner": {"hidden_channels": 8},
            "denoiser": {
                "base_channels": 8, "channel_multipliers": [1, 2], "attention_levels": [1],
                "time_embedding_dim": 16, "res_blocks": 1, "groups": 4
            }
        },
        "training": {"steps": 4, "batch_size": 2, "crop": 40, "learning_rate": 1e-3},
        "sampling": {"steps": 5, "runs": 2},
        "data": {
            "phantom": {"height": 40, "width": 40, "channels": 4, "noise": [0.05, 0.2, 0.4, 0.8], "glomeruli": 4.0},
            "train_samples": 4,
            "test_samples": 3
        },
        "evaluation": {
            "niqe_patch": 8, "niqe_fit_patches": 100, "ablation_factors": [1, 4],
            "cv_repeats": 2, "histogram_bins": 8
        }
    })
}

struct Env {
    dir: TempDir,
    config: PathBuf,
}

impl Env {
    fn new(cfg: serde_json::Value) -> Self {
        let dir = TempDir::new().unwrap();
        let config = dir.path().join("cfg.json");
        fs::write(&config, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
        Self { dir, config }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, args: &[&str]) -> Output {
        bin().arg("--config").arg(&self.config).args(args).output().unwrap()
    }

    fn ok(&self, args: &[&str]) {
        let out = self.run(args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }

    fn synth(&self) -> String {
        let data = self.path("data");
        self.ok(&["--seed", "3", "--out", data.to_str().unwrap(), "synth"]);
        data.to_str().unwrap().to_owned()
    }

    fn train(&self, data: &str, name: &str) -> String {
        let out = self.path(name);
        self.ok(&["--seed", "1", "--out", out.to_str().unwrap(), "train", "--data", data]);
        out.join("final").to_str().unwrap().to_owned()
    }
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

fn self_describing(dir: &Path) {
    assert!(dir.join("config.json").is_file(), "{} lacks config.json", dir.display());
    assert!(dir.join("run.log").is_file(), "{} lacks run.log", dir.display());
}

fn tsv_rows(text: &str) -> Vec<Vec<String>> {
    text.lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| l.split('\t').map(String::from).collect())
        .collect()
}

#[test]
fn synth_train_sample_eval_pipeline() {
    let env = Env::new(tiny_config());
    let data = env.synth();
    self_describing(Path::new(&data));
    let ck = env.train(&data, "run");
    self_describing(&env.path("run"));
    assert!(env.path("run/loss.tsv").is_file());

    let samples = env.path("samples");
    env.ok(&["--seed", "5", "--out", samples.to_str().unwrap(), "sample", "--checkpoint", &ck, "--data", &data]);
    self_describing(&samples);
    for id in ["test_0000", "test_0001", "test_0002"] {
        assert!(samples.join(format!("{id}.ppm")).is_file());
        assert!(samples.join(format!("{id}.vstn")).is_file());
        assert!(samples.join("endpoints").join(format!("{id}.ppm")).is_file());
    }

    let eval = env.path("eval");
    env.ok(&["--out", eval.to_str().unwrap(), "eval", "--pred", samples.to_str().unwrap(), "--gt", &data]);
    self_describing(&eval);
    let text = fs::read_to_string(eval.join("metrics.tsv")).unwrap();
    let fov_rows = text.lines().skip(1).take_while(|l| !l.starts_with('#')).count();
    assert_eq!(fov_rows, 3);
    assert!(eval.join("histograms.tsv").is_file());
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(eval.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["fovs"], 3);
    assert!(summary["fid_proxy"].as_f64().unwrap() >= 0.0);
}

#[test]
fn training_is_reproducible_and_reused() {
    let env = Env::new(tiny_config());
    let data = env.synth();
    let a = env.train(&data, "a");
    let b = env.train(&data, "b");
    assert_eq!(files(Path::new(&a)), files(Path::new(&b)));
    assert_eq!(
        fs::read(env.path("a/loss.tsv")).unwrap(),
        fs::read(env.path("b/loss.tsv")).unwrap()
    );
    let before = fs::metadata(Path::new(&a).join("tensors.bin")).unwrap().modified().unwrap();
    env.train(&data, "a");
    let after = fs::metadata(Path::new(&a).join("tensors.bin")).unwrap().modified().unwrap();
    assert_eq!(before, after, "an identical rerun should reuse the checkpoint");
}

#[test]
fn eval_of_identical_directories_is_perfect() {
    let env = Env::new(tiny_config());
    let data = env.synth();
    let ck = env.train(&data, "run");
    let samples = env.path("samples");
    env.ok(&["--seed", "2", "--out", samples.to_str().unwrap(), "sample", "--checkpoint", &ck, "--data", &data]);
    let eval = env.path("eval");
    let s = samples.to_str().unwrap();
    env.ok(&["--out", eval.to_str().unwrap(), "eval", "--pred", s, "--gt", s]);
    let rows = tsv_rows(&fs::read_to_string(eval.join("metrics.tsv")).unwrap());
    let header = &rows[0];
    let col = |name: &str| header.iter().position(|h| h == name).unwrap();
    for row in rows.iter().skip(1).take(3) {
        assert_eq!(row[col("psnr")].parse::<f64>().unwrap(), 99.0);
        assert_eq!(row[col("cie94")].parse::<f64>().unwrap(), 0.0);
    }
}

#[test]
fn mean_sampling_without_noise_is_seed_independent() {
    let mut cfg = tiny_config();
    cfg["sampling"]["strategy"] = json!("mean");
    cfg["sampling"]["exit_time"] = json!(20);
    let env = Env::new(cfg);
    let data = env.synth();
    let ck = env.train(&data, "run");
    let mut outputs = Vec::new();
    for (name, seed) in [("s1", "1"), ("s2", "1"), ("s3", "99")] {
        let out = env.path(name);
        env.ok(&["--seed", seed, "--out", out.to_str().unwrap(), "sample", "--checkpoint", &ck, "--data", &data]);
        let mut f = files(&out);
        f.retain(|(n, _)| n != "config.json");
        outputs.push(f);
    }
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(outputs[0], outputs[2]);
}

#[test]
fn vanilla_sampling_depends_on_the_seed() {
    let env = Env::new(tiny_config());
    let data = env.synth();
    let ck = env.train(&data, "run");
    let read = |name: &str, seed: &str| {
        let out = env.path(name);
        env.ok(&["--seed", seed, "--out", out.to_str().unwrap(), "sample", "--checkpoint", &ck, "--data", &data]);
        fs::read(out.join("test_0000.vstn")).unwrap()
    };
    assert_eq!(read("a", "4"), read("b", "4"));
    assert_ne!(read("a", "4"), read("c", "5"));
}

#[test]
fn exit_codes_distinguish_failures() {
    let env = Env::new(tiny_config());
    let out = env.path("x");
    let o = out.to_str().unwrap();

    let missing_seed = env.run(&["--out", o, "synth"]);
    assert_eq!(missing_seed.status.code(), Some(1));
    let line = String::from_utf8_lossy(&missing_seed.stderr);
    assert_eq!(line.lines().count(), 1);
    assert!(line.starts_with("error\tcode=1\t"));

    let missing_data = env.run(&["--seed", "1", "--out", o, "train", "--data", "/nonexistent/dataset"]);
    assert_eq!(missing_data.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing_data.stderr).starts_with("error\tcode=2\t"));

    let bad = env.path("bad.json");
    fs::write(&bad, r#"{"training": {"stepz": 3}}"#).unwrap();
    let malformed = bin()
        .args(["--config", bad.to_str().unwrap(), "--seed", "1", "--out", o, "synth"])
        .output()
        .unwrap();
    assert_eq!(malformed.status.code(), Some(1));

    let unknown = bin().arg("frobnicate").output().unwrap();
    assert_eq!(unknown.status.code(), Some(1));

    let mut cfg = tiny_config();
    cfg["training"]["learning_rate"] = json!(1e30);
    cfg["training"]["steps"] = json!(30);
    let hot = Env::new(cfg);
    let data = hot.synth();
    let out = hot.path("run");
    let diverged = hot.run(&["--seed", "1", "--out", out.to_str().unwrap(), "train", "--data", &data]);
    assert_eq!(diverged.status.code(), Some(3), "{}", String::from_utf8_lossy(&diverged.stderr));
}

#[test]
fn schedule_exports_the_variance_curve() {
    let env = Env::new(tiny_config());
    let out = env.path("sched");
    env.ok(&["--out", out.to_str().unwrap(), "schedule"]);
    self_describing(&out);
    let rows = tsv_rows(&fs::read_to_string(out.join("schedule.tsv")).unwrap());
    assert_eq!(rows.len(), 1 + 5);
}

#[test]
fn studies_emit_their_tables() {
    let env = Env::new(tiny_config());
    let data = env.synth();
    let ck = env.train(&data, "run");

    let sweep = env.path("sweep");
    env.ok(&["--seed", "7", "--out", sweep.to_str().unwrap(), "sweep-exit", "--checkpoint", &ck, "--data", &data]);
    self_describing(&sweep);
    let text = fs::read_to_string(sweep.join("sweep.tsv")).unwrap();
    assert!(text.starts_with("# reference optimum: t_e = 10 of 100"));
    assert!(text.contains("# measured optimum (mean)"));
    let rows = tsv_rows(&text);
    assert_eq!(rows.len(), 1 + 2 * 8 + 1);
    for r in rows.iter().skip(1) {
        if r[2] == "0" {
            assert_eq!(r[6], "true", "{r:?}");
        }
    }

    let cv = env.path("cv");
    env.ok(&["--seed", "7", "--out", cv.to_str().unwrap(), "cv", "--checkpoint", &ck, "--data", &data]);
    self_describing(&cv);
    let rows = tsv_rows(&fs::read_to_string(cv.join("cv.tsv")).unwrap());
    assert_eq!(rows.len(), 1 + 3);
    assert!(cv.join("skip").join("test_0000.cv.vstn").is_file());

    let spec = env.path("spectrum");
    env.ok(&["--seed", "7", "--out", spec.to_str().unwrap(), "spectrum", "--checkpoint", &ck, "--data", &data]);
    let rows = tsv_rows(&fs::read_to_string(spec.join("spectrum.tsv")).unwrap());
    assert_eq!(rows.len(), 1 + 20);

    let abl = env.path("ablate");
    env.ok(&["--seed", "7", "--out", abl.to_str().unwrap(), "ablate-channels", "--data", &data]);
    self_describing(&abl);
    self_describing(&abl.join("factor_4"));
    let text = fs::read_to_string(abl.join("ablation.tsv")).unwrap();
    let rows = tsv_rows(&text);
    assert_eq!(rows.len(), 1 + 2 + 1 + 1);
    assert_eq!(rows[1][1], "4");
    assert_eq!(rows[2][1], "1");
}

#[test]
fn mean_cv_vanishes_when_noise_is_suppressed() {
    let mut cfg = tiny_config();
    cfg["evaluation"]["cv_strategies"] = json!(["mean"]);
    cfg["evaluation"]["cv_exit_fraction"] = json!(1.0);
    let env = Env::new(cfg);
    let data = env.synth();
    let ck = env.train(&data, "run");
    let cv = env.path("cv");
    env.ok(&["--seed", "7", "--out", cv.to_str().unwrap(), "cv", "--checkpoint", &ck, "--data", &data]);
    let rows = tsv_rows(&fs::read_to_string(cv.join("cv.tsv")).unwrap());
    assert_eq!(rows.len(), 2);
    for v in &rows[1][2..] {
        assert_eq!(v.parse::<f64>().unwrap(), 0.0);
    }
}

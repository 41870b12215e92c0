//! Drives the `ogan` binary over a tiny experiment (8 px, 200 examples,
//! 200 steps) and checks each subcommand's exit code and artifacts.

#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub const ONTOLOGY: &str = r#"{
  "version": "test",
  "main_categories": ["TOPS", "BOTTOMS", "FULLBODY"],
  "sub_categories": [
    { "name": "tshirt", "parent": 0 },
    { "name": "tanktop", "parent": 0 },
    { "name": "jeans", "parent": 1 },
    { "name": "skirt", "parent": 1 },
    { "name": "dress", "parent": 2 },
    { "name": "coat", "parent": 2 }
  ]
}
"#;

pub fn tiny_config(extra: &str) -> String {
    format!(
        r#"seed = 5
out = "run"

[paths]
ontology = "ontology.json"

[embedding]
hashed_dim = 16

[dataset]
num_examples = 200
resolution = 8

[gan]
d_z = 8
base_channels = 16
min_channels = 8
max_resolution = 8
head_weights = {{ adv = 1.0, cls = 5.0, reg = 20.0 }}

[schedule]
images_per_stage = 800
images_per_fade = 400
n_critic = 1
batch_sizes = [8]

[train]
max_steps = 200

[labelnet]
epochs = 2

[extractor]
epochs = 1

[eval]
n_real = 100
n_fake = 100
{extra}"#
    )
}

pub struct Experiment {
    pub dir: tempfile::TempDir,
}

impl Experiment {
    pub fn new(extra: &str) -> Experiment {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("ontology.json"), ONTOLOGY).unwrap();
        std::fs::write(dir.path().join("c.toml"), tiny_config(extra)).unwrap();
        Experiment { dir }
    }

    pub fn config(&self) -> PathBuf {
        self.dir.path().join("c.toml")
    }

    pub fn out(&self) -> PathBuf {
        self.dir.path().join("run")
    }

    pub fn ogan(&self, args: &[&str]) -> Output {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_ogan"));
        cmd.arg("--config").arg(self.config()).args(args).env("RUST_LOG", "warn");
        cmd.current_dir(self.dir.path()).output().unwrap()
    }

    pub fn ogan_bare(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_ogan"))
            .args(args)
            .env("RUST_LOG", "warn")
            .current_dir(self.dir.path())
            .output()
            .unwrap()
    }
}

pub fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn expect(o: &Output, want: i32, what: &str) -> Result<(), String> {
    if code(o) == want {
        Ok(())
    } else {
        Err(format!("{what}: exit {} (wanted {want})\nstdout: {}\nstderr: {}", code(o), stdout(o), stderr(o)))
    }
}

fn check(cond: bool, what: &str) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(what.to_string())
    }
}

fn read(p: &Path) -> Result<Vec<u8>, String> {
    std::fs::read(p).map_err(|e| format!("{}: {e}", p.display()))
}

fn json(p: &Path) -> Result<serde_json::Value, String> {
    serde_json::from_slice(&read(p)?).map_err(|e| format!("{}: {e}", p.display()))
}

fn files_in(dir: &Path, ext: &str) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .map(|rd| rd.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.extension().is_some_and(|x| x == ext) && !p.ends_with("run.json")).collect())
        .unwrap_or_default();
    v.sort();
    v
}

/// Every subcommand's contract; returns a one-line summary.
pub fn contract() -> Result<String, String> {
    let ex = Experiment::new("");
    let out = ex.out();
    let mut checks = 0;
    let mut ok = |r: Result<(), String>| -> Result<(), String> {
        checks += 1;
        r
    };

    // gen-data
    let o = ex.ogan(&["gen-data"]);
    ok(expect(&o, 0, "gen-data"))?;
    ok(check(out.join("data/manifest.jsonl").is_file(), "manifest missing"))?;
    ok(check(out.join("data/run.json").is_file(), "gen-data run.json missing"))?;
    let run = json(&out.join("data/run.json"))?;
    ok(check(
        run["config_sha256"].as_str().is_some_and(|s| s.len() == 64) && run["started_unix"].is_number(),
        "run.json lacks provenance fields",
    ))?;
    ok(expect(&ex.ogan(&["gen-data"]), 3, "gen-data rerun without --force"))?;
    ok(expect(&ex.ogan(&["gen-data", "--force"]), 0, "gen-data --force"))?;

    let bad = Experiment::new("");
    std::fs::remove_file(bad.dir.path().join("ontology.json")).unwrap();
    let o = bad.ogan(&["gen-data"]);
    ok(expect(&o, 2, "gen-data with missing ontology"))?;
    ok(check(stderr(&o).contains("ontology.json"), "missing-ontology message does not name the path"))?;
    ok(expect(&ex.ogan_bare(&["gen-data", "--config", "nope.toml"]), 2, "missing config file"))?;

    // eval before any extractor exists
    let o = ex.ogan(&["eval", "no-such.ckpt"]);
    ok(expect(&o, 2, "eval of a missing checkpoint"))?;

    // train, baseline, interrupted + resumed
    let o = ex.ogan(&["train"]);
    ok(expect(&o, 0, "train"))?;
    let ogan_dir = out.join("train/ogan");
    let ckpt = ogan_dir.join("checkpoints/final.ckpt");
    ok(check(ckpt.is_file(), "train wrote no final checkpoint"))?;
    let log = read(&ogan_dir.join("log.jsonl"))?;
    ok(check(log.iter().filter(|&&b| b == b'\n').count() == 200, "train log does not have 200 records"))?;
    ok(expect(&ex.ogan(&["train"]), 3, "train rerun without --force"))?;

    let o = ex.ogan(&["train", "--baseline"]);
    ok(expect(&o, 0, "train --baseline"))?;
    let meta = json(&out.join("train/baseline/log.meta.json"))?;
    ok(check(meta["variant"] == "baseline-category-only", "baseline log metadata has the wrong variant"))?;
    let base_ckpt = out.join("train/baseline/checkpoints/final.ckpt");

    let resumed = Experiment::new("");
    ok(expect(&resumed.ogan(&["gen-data"]), 0, "gen-data (resume run)"))?;
    ok(expect(&resumed.ogan(&["train", "--max-steps", "90"]), 0, "interrupted train"))?;
    ok(expect(&resumed.ogan(&["train", "--resume"]), 0, "train --resume"))?;
    let resumed_log = read(&resumed.out().join("train/ogan/log.jsonl"))?;
    ok(check(resumed_log == log, "resumed log differs from the uninterrupted one"))?;

    // eval
    let o = ex.ogan(&["eval", ckpt.to_str().unwrap()]);
    ok(expect(&o, 2, "eval without an extractor"))?;
    ok(check(stderr(&o).contains("train-extractor"), "missing-extractor message lacks the instruction"))?;
    ok(expect(&ex.ogan(&["train-extractor"]), 0, "train-extractor"))?;
    ok(check(out.join("extractor/extractor.ckpt").is_file(), "extractor checkpoint missing"))?;
    ok(expect(&ex.ogan(&["train-extractor"]), 3, "train-extractor rerun"))?;
    let o = ex.ogan(&["eval", ckpt.to_str().unwrap(), base_ckpt.to_str().unwrap()]);
    ok(expect(&o, 0, "eval of two checkpoints"))?;
    let table = stdout(&o);
    ok(check(
        table.contains("IS") && table.contains("FID") && table.contains("O-GAN") && table.contains("PGAN"),
        "eval table lacks the side-by-side layout",
    ))?;
    let report = read(&out.join("eval/report.json"))?;
    let reports = json(&out.join("eval/report.json"))?;
    ok(check(reports.as_array().is_some_and(|a| a.len() == 2), "report.json should hold two reports"))?;
    ok(expect(&ex.ogan(&["eval", ckpt.to_str().unwrap(), base_ckpt.to_str().unwrap()]), 0, "eval rerun"))?;
    ok(check(read(&out.join("eval/report.json"))? == report, "eval report differs under a fixed seed"))?;

    // sample
    let o = ex.ogan(&["sample", "--text", "red cotton tshirt"]);
    ok(expect(&o, 2, "sample without a label predictor"))?;
    ok(expect(&ex.ogan(&["train-labelnet"]), 0, "train-labelnet"))?;
    ok(check(out.join("labelnet/labelnet.ckpt").is_file(), "label predictor checkpoint missing"))?;
    let o = ex.ogan(&["sample", "--text", "red cotton tshirt", "--count", "4"]);
    ok(expect(&o, 0, "sample via the label predictor"))?;
    let sidecars = files_in(&out.join("samples"), "json");
    ok(check(sidecars.len() == 1, "sample should write one sidecar"))?;
    let side = json(&sidecars[0])?;
    ok(check(
        side["text"] == "red cotton tshirt"
            && side["label_source"] == "labelnet"
            && side["label"].is_string()
            && side["probabilities"].as_object().is_some_and(|m| m.len() == 6),
        "sidecar lacks text, predicted label or probabilities",
    ))?;
    let png = files_in(&out.join("samples"), "png");
    ok(check(png.len() == 1, "sample should write one PNG"))?;
    let first = read(&png[0])?;
    ok(expect(&ex.ogan(&["sample", "--text", "red cotton tshirt", "--count", "4"]), 0, "sample rerun"))?;
    ok(check(read(&png[0])? == first, "sample PNG differs under a fixed seed"))?;
    let o = ex.ogan(&["sample", "--text", "something blue", "--label", "coat", "--count", "3"]);
    ok(expect(&o, 0, "sample --label"))?;
    let forced = json(&out.join("samples").join(format!("something-blue-s{}.json", side["seed"])))?;
    ok(check(forced["label"] == "coat" && forced["label_source"] == "forced", "--label did not force the label"))?;
    ok(expect(&ex.ogan(&["sample", "--text", "x", "--label", "sweater"]), 2, "sample with an unknown label"))?;
    let o = ex.ogan(&["sample", "--text", "x", "--label", "coat", "--seed", "77"]);
    ok(expect(&o, 0, "sample --seed"))?;

    // plot
    let ogan_log = ogan_dir.join("log.jsonl");
    let base_log = out.join("train/baseline/log.jsonl");
    let o = ex.ogan(&["plot", ogan_log.to_str().unwrap(), base_log.to_str().unwrap()]);
    ok(expect(&o, 0, "plot"))?;
    ok(check(files_in(&out.join("plots"), "png").len() == 3, "plot should write three PNGs"))?;
    ok(expect(&ex.ogan(&["plot"]), 2, "plot with no logs"))?;
    let one = ex.dir.path().join("one-epoch.jsonl");
    let first_line: Vec<u8> = log.split(|&b| b == b'\n').next().unwrap().to_vec();
    std::fs::write(&one, [first_line, b"\n".to_vec()].concat()).unwrap();
    let single_out = ex.dir.path().join("single");
    let o = ex.ogan_bare(&["plot", one.to_str().unwrap(), "--out", single_out.to_str().unwrap()]);
    ok(expect(&o, 0, "plot of a one-record log"))?;
    ok(check(files_in(&single_out.join("plots"), "png").len() == 3, "single-point plots missing"))?;
    ok(expect(&ex.ogan(&["plot", "missing.jsonl"]), 2, "plot of a missing log"))?;

    // numeric abort
    let nan = Experiment::new("");
    let cfg = std::fs::read_to_string(nan.config()).unwrap().replace("batch_sizes = [8]", "batch_sizes = [8]\nlr = 1e300");
    std::fs::write(nan.config(), cfg).unwrap();
    ok(expect(&nan.ogan(&["gen-data"]), 0, "gen-data (divergent run)"))?;
    let o = nan.ogan(&["train"]);
    ok(expect(&o, 4, "divergent train"))?;
    ok(check(stderr(&o).contains("nonfinite-step"), "numeric abort message lacks the diagnostic path"))?;

    Ok(format!("{checks} checks over gen-data, train-extractor, train-labelnet, train, eval, sample, plot"))
}

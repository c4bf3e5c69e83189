use std::path::Path;
use std::process::{Command, Output};

use tokenfuse::tensor::read_tensor;
use tokenfuse::textcond::load_embedding_dump;

const TINY: &str = "\
# small enough to train in a second
seed = 3
model.d_model = 16
model.heads = 2
model.depth = 1
train.steps = 6
train.batch = 2
train.clips = 2
train.sample_steps = 2
train.final_window = 3
";

fn tokenfuse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tokenfuse")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_sample_eval_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    let run = dir.path().join("run");
    let o = tokenfuse(&["train", "--config", s(&cfg), "--out", s(&run)]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["config.txt", "seed", "version", "metrics.csv", "summary.json", "checkpoint/manifest.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    assert_eq!(std::fs::read_to_string(run.join("seed")).unwrap().trim(), "3");
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next(), Some("step,loss,grad_norm"));
    assert_eq!(metrics.lines().count(), 7);

    let video = dir.path().join("clip.mtf");
    let prompt = "2 red squares moving left";
    let o = tokenfuse(&["sample", "--ckpt", s(&run.join("checkpoint")), "--prompt", prompt, "--seed", "1", "--out", s(&video)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(read_tensor(&video).unwrap().shape(), &[9, 64, 64, 3]);

    let o = tokenfuse(&["eval", "--video", s(&video), "--spec", prompt]);
    assert!(o.status.success(), "{}", stderr(&o));
    let scores: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    for key in ["count_ok", "color_ok", "direction_ok", "all_ok"] {
        assert!(scores.get(key).is_some(), "{key}");
    }
}

#[test]
fn overrides_apply_after_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    let run = dir.path().join("run");
    let o = tokenfuse(&["train", "--config", s(&cfg), "--set", "train.steps=2", "--set", "fuser.alpha=0.5", "--out", s(&run)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let echoed = std::fs::read_to_string(run.join("config.txt")).unwrap();
    assert!(echoed.contains("train.steps = 2"), "{echoed}");
    assert!(echoed.contains("fuser.alpha = 0.5"), "{echoed}");
}

#[test]
fn config_errors_exit_one_and_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "fuser.alpah = 0.5\n").unwrap();
    let o = tokenfuse(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("run"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("fuser.alpah"), "{}", stderr(&o));

    let o = tokenfuse(&["train", "--set", "train.steps=0", "--out", s(&dir.path().join("run"))]);
    assert_eq!(o.status.code(), Some(1));
    let o = tokenfuse(&["ablate", "--arms", "a9", "--out", s(&dir.path().join("ab"))]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(tokenfuse(&[]).status.code(), Some(1));
    assert_eq!(tokenfuse(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(tokenfuse(&["sample", "--prompt", "x"]).status.code(), Some(1));
    let o = tokenfuse(&["--help"]);
    assert!(o.status.success());
    for cmd in ["train", "ablate", "sample", "eval", "analyze", "curate", "gradcheck", "dump-embeddings"] {
        assert!(stdout(&o).contains(cmd), "{cmd}");
    }
}

#[test]
fn runtime_failures_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = tokenfuse(&["sample", "--ckpt", s(&dir.path().join("missing")), "--prompt", "x", "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));

    let cfg = dir.path().join("tiny.cfg");
    std::fs::write(&cfg, format!("{TINY}train.lr = 1000000\ntrain.steps = 40\n")).unwrap();
    let o = tokenfuse(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("run"))]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("diverged"));
}

#[test]
fn ablate_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    let out = dir.path().join("ab");
    let o = tokenfuse(&["ablate", "--config", s(&cfg), "--arms", "a1,a7", "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("report.json").exists());
    assert!(out.join("a1/metrics.csv").exists() && out.join("a7/metrics.csv").exists());
    let csv = std::fs::read_to_string(out.join("report.csv")).unwrap();
    assert_eq!(csv, stdout(&o));
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn analyze_writes_csv_and_svg() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    for (args, stem, header) in [
        (vec!["analyze", "hist", "--source", "encoder", "--lo", "-1", "--hi", "1", "--bins", "8"], "hist", "bin_lo,bin_hi,count"),
        (vec!["analyze", "project"], "proj", "x,y,label"),
        (vec!["analyze", "fluct", "--k", "10"], "fluct", "set,max_var"),
    ] {
        let mut args = args;
        args.extend(["--out", s(out)]);
        let o = tokenfuse(&args);
        assert!(o.status.success(), "{stem}: {}", stderr(&o));
        let csv = std::fs::read_to_string(out.join(format!("{stem}.csv"))).unwrap();
        assert_eq!(csv.lines().next(), Some(header));
        assert!(std::fs::read_to_string(out.join(format!("{stem}.svg"))).unwrap().starts_with("<svg"));
    }
    let hist = std::fs::read_to_string(out.join("hist.csv")).unwrap();
    assert_eq!(hist.lines().count(), 9);
    let fluct = std::fs::read_to_string(out.join("fluct.csv")).unwrap();
    assert!(fluct.contains("query,0\n"), "{fluct}");
}

#[test]
fn curate_filters_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let good = r#"{"path":"a.mp4","frames":100,"width":1280,"height":720,"fps":24,"duration_s":4.0,"motion_score":1.0,"black_area":0.0,"brightness":0.6,"black_frame_rate":0.0,"aesthetic":5.0,"ocr_coverage":0.0,"watermark":false,"caption":"a red kite over a beach","clip_score":0.3}"#;
    let short = good.replace("\"frames\":100", "\"frames\":20");
    let input = dir.path().join("in.jsonl");
    std::fs::write(&input, format!("{good}\n{short}\nnot json\n")).unwrap();
    let (out, report) = (dir.path().join("out.jsonl"), dir.path().join("report.json"));
    let o = tokenfuse(&["curate", "--in", s(&input), "--out", s(&out), "--report", s(&report)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read_to_string(&out).unwrap(), format!("{good}\n"));
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["input_count"], 3);
    assert_eq!(r["kept_count"], 1);
    assert_eq!(r["drops_by_reason"]["min_frames"], 1);
    assert_eq!(r["drops_by_reason"]["parse_error"], 1);
}

#[test]
fn dump_embeddings_reload() {
    let dir = tempfile::tempdir().unwrap();
    let o = tokenfuse(&["dump-embeddings", "--prompt", "two red squares", "--prompt", "a blue kite", "--out", s(dir.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    let b = load_embedding_dump(dir.path().join("bundle-000"), 32).unwrap();
    assert_eq!(b.encoder.shape(), &[3, 32]);
    assert_eq!(b.instruction.shape(), &[4, 32]);
    assert!(dir.path().join("bundle-001/manifest.json").exists());
}

#[test]
fn gradcheck_passes() {
    let o = tokenfuse(&["gradcheck"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).contains("0 failed"));
}

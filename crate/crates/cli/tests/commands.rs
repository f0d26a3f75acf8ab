//! End-to-end runs of the `stsk` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use stsk::eval::annotation::{load_frame, read_result};
use stsk::eval::parse_sequence;
use stsk::model::head::decode_box;
use stsk::model::io::{load_model, save_model};
use stsk::model::{Model, ModelConfig};
use stsk::tokenize::{crop_and_resize, ImageFrame};

fn stsk(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stsk"))
        .args(args)
        .env("STSK_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

const SMALL_SPEC: &str = "width=96\nheight=96\nlength=4\ntarget_x=48\ntarget_y=48\ntarget_w=12\ntarget_h=9\n\
target_vx=5\ndistractors=1\nvary=true\n";

fn synth(root: &Path, spec: &str, count: usize) -> PathBuf {
    let spec_path = root.join("spec.txt");
    fs::write(&spec_path, spec).unwrap();
    let data = root.join("data");
    let out = stsk(&["synth", "--spec", p(&spec_path), "--out", p(&data), "--count", &count.to_string()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    data
}

fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_writes_one_sequence_with_four_annotation_files() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path(), SMALL_SPEC, 1);
    let seq = data.join("seq_0000");
    let files: Vec<_> = fs::read_dir(&seq).unwrap().map(|e| e.unwrap().path()).filter(|p| p.is_file()).collect();
    assert_eq!(files.len(), 4, "{files:?}");
    assert_eq!(fs::read_dir(seq.join("frames")).unwrap().count(), 4);
    assert_eq!(parse_sequence(&seq).unwrap().frame_count(), 4);
}

#[test]
fn synth_is_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    assert_eq!(tree(&synth(a.path(), SMALL_SPEC, 2)), tree(&synth(b.path(), SMALL_SPEC, 2)));
}

#[test]
fn bad_inputs_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = stsk(&["synth", "--spec", "/nonexistent/spec.txt", "--out", p(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
    let spec = tmp.path().join("bad.txt");
    fs::write(&spec, "colour=teal\n").unwrap();
    let out = stsk(&["synth", "--spec", p(&spec), "--out", p(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn oracle_results_score_one_everywhere() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path(), SMALL_SPEC, 3);
    let results = tmp.path().join("results");
    let report = tmp.path().join("report");
    assert!(stsk(&["track", "--oracle", "--data", p(&data), "--out", p(&results)]).status.success());
    let out = stsk(&["eval", "--data", p(&data), "--results", p(&results), "--report", p(&report)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(report.join("report.csv")).unwrap();
    assert_eq!(csv.lines().last(), Some("aggregate,1,1,1,1,1"), "{csv}");
    for name in ["attributes.csv", "curves.csv", "report.json"] {
        assert!(report.join(name).is_file(), "{name}");
    }
}

#[test]
fn tracking_writes_one_line_per_frame_and_no_temporal_matches_single_frames() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path(), &SMALL_SPEC.replace("length=4", "length=2"), 1);
    let model_path = tmp.path().join("model.stsk");
    let model = Model::new(ModelConfig {
        search_size: 96,
        template_size: 32,
        ..ModelConfig::default()
    })
    .unwrap();
    save_model(&model, &model_path).unwrap();
    let results = tmp.path().join("results");
    let out = stsk(&["track", "--model", p(&model_path), "--data", p(&data), "--out", p(&results), "--no-temporal"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let res = read_result(&results.join("seq_0000.txt")).unwrap();
    let seq = data.join("seq_0000");
    let ann = parse_sequence(&seq).unwrap();
    assert_eq!(res.boxes.len(), ann.frame_count());
    assert_eq!(fs::read_to_string(results.join("seq_0000.txt")).unwrap().lines().count(), 2);

    // frame 2 on its own, from the initial token
    let m = load_model(&model_path).unwrap().with_switches(false, true);
    let cfg = m.config();
    let f1 = ImageFrame::from_rgb8(&load_frame(&seq, 0).unwrap(), 1);
    let f2 = ImageFrame::from_rgb8(&load_frame(&seq, 1).unwrap(), 2);
    let init = ann.boxes[0];
    let template = crop_and_resize(&f1, &init, cfg.template_crop()).unwrap().image;
    let crop = crop_and_resize(&f2, &init, cfg.search_crop()).unwrap();
    let lang = m.encode_prompt(&ann.prompt).tokens;
    let (head, _) = m.forward(&template, &crop.image, &lang, &m.initial_token()).unwrap();
    let alone = decode_box(&head, &crop.window, f2.width(), f2.height()).bbox;
    assert_eq!(res.boxes[1], alone);
}

#[test]
fn corrupt_model_exits_with_three() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path(), SMALL_SPEC, 1);
    let model_path = tmp.path().join("model.stsk");
    fs::write(&model_path, b"not a model").unwrap();
    let out = stsk(&["track", "--model", p(&model_path), "--data", p(&data), "--out", p(&tmp.path().join("r"))]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn stats_on_static_targets_report_zero_speed() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path(), "width=64\nheight=64\nlength=5\ntarget_x=32\ntarget_y=32\n", 2);
    let report = tmp.path().join("stats");
    let out = stsk(&["stats", "--data", p(&data), "--report", p(&report)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = fs::read_to_string(report.join("summary.csv")).unwrap();
    assert!(summary.lines().any(|l| l == "relative_speed_mean,0"), "{summary}");
}

#[test]
fn selfcheck_passes_at_least_five_suites() {
    let out = stsk(&["selfcheck"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(out.status.code(), Some(0), "{text}");
    assert!(text.lines().filter(|l| l.starts_with("PASS")).count() >= 5, "{text}");
}

#[test]
fn train_saves_a_loadable_model() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = tmp.path().join("train.txt");
    fs::write(
        &spec,
        "sequences=2\nlength=3\nwidth=96\nheight=96\ntarget_x=48\ntarget_y=48\ntarget_w=12\ntarget_h=9\n\
model.search_size=96\nmodel.template_size=32\ntrain.lr=0.001\n",
    )
    .unwrap();
    let out_path = tmp.path().join("m.stsk");
    let out = stsk(&["train", "--spec", p(&spec), "--out", p(&out_path), "--steps", "3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(load_model(&out_path).unwrap().config().search_size, 96);
    let bad = tmp.path().join("bad.txt");
    fs::write(&bad, "model.depth=3\n").unwrap();
    assert_eq!(stsk(&["train", "--spec", p(&bad), "--out", p(&out_path)]).status.code(), Some(2));
}

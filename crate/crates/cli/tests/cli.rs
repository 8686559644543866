use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cbisl::data::format_segment_map;
use cbisl::{read_blm, write_blm, ClassId, MaskRegion, SegmentMap};

fn cbisl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cbisl")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = cbisl(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL_MODEL: [&str; 10] = ["--layers", "2", "--features", "4", "--head", "8", "--first-kernel", "3", "--hidden-kernel", "3"];

fn synth_small(dir: &Path, n: usize, seed: u64) -> PathBuf {
    let out = dir.join(format!("synth{seed}"));
    ok(&["synth", "--out", s(&out), "--n", &n.to_string(), "--seed", &seed.to_string(), "--rows", "8", "--cols", "8"]);
    out
}

fn train_quadro(data: &Path, out: &Path) {
    let mut args = vec!["train-quadro", "--data", s(data), "--out", s(out), "--epochs", "1", "--seed", "1", "--quiet", "--occlusion", "0.5"];
    args.extend(SMALL_MODEL);
    ok(&args);
}

#[test]
fn synth_writes_grids_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("d");
    ok(&["synth", "--out", s(&out), "--n", "12", "--seed", "7"]);
    let blms: Vec<_> = std::fs::read_dir(&out)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x == "blm"))
        .collect();
    assert_eq!(blms.len(), 12);
    let manifest = std::fs::read_to_string(out.join("classes.txt")).unwrap();
    assert_eq!(manifest.lines().collect::<Vec<_>>(), ["sky", "tree", "road", "sidewalk", "car", "person"]);
    let first = read_blm(out.join("000000.blm")).unwrap();
    assert_eq!((first.rows(), first.cols(), first.num_classes()), (16, 16, 6));
    assert!(first.is_complete());
}

#[test]
fn train_quadro_is_byte_identical_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth_small(tmp.path(), 16, 3);
    let (a, b) = (tmp.path().join("a.qpcn"), tmp.path().join("b.qpcn"));
    train_quadro(&data, &a);
    train_quadro(&data, &b);
    let (a, b) = (std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    assert_eq!(a, b);
    assert!(a.starts_with(b"DIR 0\nQPCNv1 "));
}

#[test]
fn infill_of_complete_grid_is_identity() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth_small(tmp.path(), 8, 4);
    let model = tmp.path().join("m.qpcn");
    train_quadro(&data, &model);
    let puzzle = data.join("000003.blm");
    let filled = tmp.path().join("filled.blm");
    let dists = tmp.path().join("dists.csv");
    ok(&["infill", "--model", s(&model), "--in", s(&puzzle), "--out", s(&filled), "--dists", s(&dists)]);
    assert_eq!(std::fs::read_to_string(&filled).unwrap(), std::fs::read_to_string(&puzzle).unwrap());
    assert_eq!(std::fs::read_to_string(&dists).unwrap(), "row,col,p0,p1,p2,p3,p4,p5\n");
}

#[test]
fn infill_and_heatmap_cover_masked_cells() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth_small(tmp.path(), 8, 5);
    let model = tmp.path().join("m.qpcn");
    train_quadro(&data, &model);
    let truth = read_blm(data.join("000000.blm")).unwrap();
    let masked = truth.apply_mask(&MaskRegion::new(2, 1, 3, 4)).unwrap();
    let puzzle = tmp.path().join("puzzle.blm");
    write_blm(&masked, &puzzle).unwrap();

    let filled = tmp.path().join("filled.blm");
    let dists = tmp.path().join("dists.csv");
    ok(&["infill", "--model", s(&model), "--in", s(&puzzle), "--out", s(&filled), "--dists", s(&dists)]);
    let out = read_blm(&filled).unwrap();
    assert!(out.is_complete());
    let text = std::fs::read_to_string(&dists).unwrap();
    let lines: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(lines.len(), 12);
    for line in lines {
        let fields: Vec<f64> = line.split(',').skip(2).map(|f| f.parse().unwrap()).collect();
        assert_eq!(fields.len(), 6);
        assert!((fields.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    let csv = tmp.path().join("person.csv");
    let pgm = tmp.path().join("person.pgm");
    ok(&["heatmap", "--model", s(&model), "--in", s(&puzzle), "--class", "5", "--csv", s(&csv), "--pgm", s(&pgm)]);
    let csv = std::fs::read_to_string(csv).unwrap();
    assert_eq!(csv.lines().next(), Some("row,col,prob"));
    assert_eq!(csv.lines().count(), 13);
    let pgm = std::fs::read(pgm).unwrap();
    assert!(pgm.starts_with(b"P5\n8 8\n255\n"));
    assert_eq!(pgm.len(), b"P5\n8 8\n255\n".len() + 64);

    assert_eq!(cbisl(&["heatmap", "--model", s(&model), "--in", s(&puzzle), "--class", "6"]).status.code(), Some(2));
}

#[test]
fn single_model_train_and_infill() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth_small(tmp.path(), 8, 6);
    let model = tmp.path().join("single.pcnn");
    let mut args = vec!["train", "--data", s(&data), "--out", s(&model), "--epochs", "1", "--quiet", "--test-data", s(&data)];
    args.extend(SMALL_MODEL);
    let stdout = ok(&args);
    assert!(stdout.starts_with("test bits/dim "), "{stdout}");
    assert!(std::fs::read(&model).unwrap().starts_with(b"QPCNv1 "));

    let truth = read_blm(data.join("000001.blm")).unwrap();
    let puzzle = tmp.path().join("p.blm");
    write_blm(&truth.apply_mask(&MaskRegion::new(0, 0, 2, 2)).unwrap(), &puzzle).unwrap();
    let filled = tmp.path().join("f.blm");
    ok(&["infill", "--model", s(&model), "--in", s(&puzzle), "--out", s(&filled)]);
    assert!(read_blm(&filled).unwrap().is_complete());

    // eval needs the four-directional model
    let out = cbisl(&["eval", "--model", s(&model), "--data", s(&data), "--mask", "2x2"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn eval_prints_every_model_row() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth_small(tmp.path(), 8, 8);
    let model = tmp.path().join("m.qpcn");
    train_quadro(&data, &model);
    let csv = tmp.path().join("eval.csv");
    let stdout = ok(&["eval", "--model", s(&model), "--data", s(&data), "--mask", "3x3", "--seed", "2", "--csv", s(&csv)]);
    for name in ["gated_pixelcnn ", "gated_pixelcnn_90", "gated_pixelcnn_180", "gated_pixelcnn_270", "4-directional"] {
        assert!(stdout.contains(name), "{name} missing from\n{stdout}");
    }
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 6);
    let fixed = ok(&["eval", "--model", s(&model), "--data", s(&data), "--mask", "3x3", "--at", "1,1"]);
    assert!(fixed.contains("14.06"), "{fixed}");
    assert_eq!(cbisl(&["eval", "--model", s(&model), "--data", s(&data), "--mask", "9x9"]).status.code(), Some(2));
}

#[test]
fn extract_and_ingest_pool_label_maps() {
    let tmp = tempfile::tempdir().unwrap();
    let raw = tmp.path().join("raw");
    std::fs::create_dir(&raw).unwrap();
    let pixels: Vec<ClassId> = (0..16).map(|i| ClassId(if i < 8 { 0 } else { 1 })).collect();
    let map = SegmentMap::new(4, 4, 2, pixels).unwrap();
    std::fs::write(raw.join("a.seg"), format_segment_map(&map)).unwrap();
    std::fs::write(raw.join("b.seg"), "not a map\n").unwrap();
    std::fs::write(raw.join("classes.txt"), "ground\nwall\n").unwrap();

    let blm = tmp.path().join("a.blm");
    ok(&["extract", "--in", s(&raw.join("a.seg")), "--out", s(&blm), "--rows", "2", "--cols", "2"]);
    assert_eq!(std::fs::read_to_string(&blm).unwrap(), "BLMv1 2 2 2\n0 0\n1 1\n");

    let out = tmp.path().join("ingested");
    let res = cbisl(&["ingest", "--in", s(&raw), "--out", s(&out), "--rows", "2", "--cols", "2"]);
    assert!(res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("b.seg"));
    assert_eq!(std::fs::read_to_string(out.join("000000.blm")).unwrap(), "BLMv1 2 2 2\n0 0\n1 1\n");
    assert_eq!(std::fs::read_to_string(out.join("classes.txt")).unwrap(), "ground\nwall\n");

    let bad = cbisl(&["extract", "--in", s(&raw.join("a.seg")), "--out", s(&blm), "--rows", "3", "--cols", "2"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn gradcheck_passes() {
    let stdout = ok(&["gradcheck"]);
    assert!(stdout.contains("max relative error"), "{stdout}");
}

#[test]
fn exit_codes_follow_usage_and_runtime_errors() {
    assert_eq!(cbisl(&[]).status.code(), Some(1));
    assert_eq!(cbisl(&["frobnicate"]).status.code(), Some(1));
    let missing = cbisl(&["synth", "--n", "3"]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("Usage"));
    assert_eq!(cbisl(&["infill", "--model", "/nonexistent/m", "--in", "/nonexistent/p", "--out", "/tmp/x"]).status.code(), Some(2));
    let help = cbisl(&["train-quadro", "--help"]);
    assert_eq!(help.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&help.stdout).contains("--epochs"));
}

use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "seed = 5\ndata.height = 16\ndata.width = 16\ndata.n_total = 24\ndata.label_ratio = 0.25\ntrain.epochs = 2\nmetrics.pl_iou_samples = 2\n";

fn semicd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_semicd")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn printed(out: &Output, key: &str) -> String {
    let text = String::from_utf8_lossy(&out.stdout);
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key} = ")))
        .unwrap_or_else(|| panic!("no {key} in {text}"))
        .to_string()
}

/// Last non-empty value of `column` in a metrics CSV.
fn last_logged(csv: &str, column: &str) -> String {
    let mut lines = csv.lines();
    let idx = lines.next().unwrap().split(',').position(|c| c == column).unwrap();
    lines.filter_map(|l| l.split(',').nth(idx).filter(|v| !v.is_empty()).map(String::from)).last().unwrap()
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(semicd(&["--help"]).status.code(), Some(0));
    assert_eq!(semicd(&["train", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(semicd(&["train", "--set", "ramp.w_max=abc"]).status.code(), Some(2));
    assert_eq!(semicd(&["train", "--config", "/nonexistent/run.cfg"]).status.code(), Some(2));
    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, "data.label_ratio = 2\n").unwrap();
    assert_eq!(semicd(&["train", "--config", s(&bad)]).status.code(), Some(2));
    let diverge = dir.path().join("diverge.cfg");
    std::fs::write(&diverge, format!("{SMALL}train.lr0 = 1e30\ntrain.lr_min = 1e30\n")).unwrap();
    let out = semicd(&["train", "--config", s(&diverge), "--out", s(&dir.path().join("d"))]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn eval_reproduces_final_logged_scores() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, SMALL).unwrap();
    let run = dir.path().join("run");
    let train = semicd(&["train", "--config", s(&cfg), "--out", s(&run)]);
    assert!(train.status.success());
    let csv = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    let eval = semicd(&["eval", "--config", s(&cfg), "--checkpoint", s(&run.join("teacher.ckpt"))]);
    assert!(eval.status.success());
    for key in ["val_iou_c", "val_oa"] {
        assert_eq!(printed(&eval, key), last_logged(&csv, key), "{key}");
        assert_eq!(printed(&train, key), last_logged(&csv, key), "{key}");
    }
}

#[test]
fn generated_data_dir_matches_in_memory_data() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, SMALL).unwrap();
    let data = dir.path().join("data");
    assert!(semicd(&["gen-data", "--config", s(&cfg), "--out", s(&data)]).status.success());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(semicd(&["train", "--config", s(&cfg), "--out", s(&a)]).status.success());
    assert!(semicd(&["train", "--config", s(&cfg), "--data-dir", s(&data), "--out", s(&b)]).status.success());
    let read = |d: &Path| std::fs::read(d.join("metrics.csv")).unwrap();
    assert_eq!(read(&a), read(&b));
}

#[test]
fn export_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.csv");
    std::fs::write(&empty, "").unwrap();
    let out = semicd(&["export-metrics", "--input", s(&empty)]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(String::from_utf8_lossy(&out.stdout), "iter,epoch,metric,value\n");

    let wide = dir.path().join("wide.csv");
    std::fs::write(&wide, "iter,epoch,loss_s,val_oa\n1,0,0.5,\n2,1,0.25,0.75\n").unwrap();
    let long = dir.path().join("long.csv");
    assert!(semicd(&["export-metrics", "--input", s(&wide), "--out", s(&long)]).status.success());
    assert_eq!(
        std::fs::read_to_string(&long).unwrap(),
        "iter,epoch,metric,value\n1,0,loss_s,0.5\n2,1,loss_s,0.25\n2,1,val_oa,0.75\n"
    );
    assert_eq!(semicd(&["export-metrics", "--input", s(&dir.path().join("missing.csv"))]).status.code(), Some(2));
}

#[test]
fn ablate_writes_one_row_per_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "data.height = 16\ndata.width = 16\ndata.n_total = 20\ndata.label_ratio = 0.25\ntrain.epochs = 1\n").unwrap();
    let out = dir.path().join("abl");
    assert!(semicd(&["ablate", "--config", s(&cfg), "--seeds", "1,2", "--out", s(&out)]).status.success());
    let table = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "row,seed,val_iou_c,val_oa,iterations");
    assert_eq!(lines.len(), 1 + 2 * 6);
    assert!(lines[1].starts_with("sup_only,1,"));
}

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn duet(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_duet"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const SMALL: &[&str] = &[
    "--lookback", "48", "--horizon", "12", "--d", "16", "--d0", "8", "--kernel", "5", "--max-epochs", "2",
];

fn synth(dir: &Path, kind: &str, length: &str, channels: &str, out: &str) {
    let o = duet(&["synth", "--kind", kind, "--length", length, "--channels", channels, "--seed", "3", "--out", out], dir);
    assert!(o.status.success(), "{}", stderr(&o));
}

fn train_small(dir: &Path, data: &str, out: &str, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--data", data, "--split", "6:2:2", "--seed", "0", "--out", out];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    duet(&args, dir)
}

#[test]
fn train_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth(dir, "two_regime", "1200", "3", "data.csv");
    let o = train_small(dir, "data.csv", "run", &["--experts", "4", "--topk", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["model.ckpt", "manifest.json", "report.json"] {
        assert!(dir.join("run").join(f).exists(), "{f}");
    }
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("run/manifest.json")).unwrap()).unwrap();
    let outputs: Vec<&str> = manifest["outputs"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    assert_eq!(outputs.len(), fs::read_dir(dir.join("run")).unwrap().count());
    assert_eq!(manifest["status"], "ok");

    let o = duet(&["eval", "--ckpt", "run/model.ckpt", "--data", "data.csv", "--split-part", "train", "--report", "rep.json"], dir);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let fields: Vec<&str> = out.trim().split('\t').collect();
    assert_eq!(fields.len(), 2);
    let mse: f64 = fields[0].parse().unwrap();
    assert!(mse.is_finite());
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("rep.json")).unwrap()).unwrap();
    assert_eq!(report["mse"].as_f64().unwrap(), mse);
    assert_eq!(report["normalized_scale"], true);
    assert!(stderr(&o).is_empty());
}

#[test]
fn flag_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let o = duet(&["train", "--lookback", "48", "--out", "x"], dir);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--data"));
    assert_eq!(stderr(&o).lines().count(), 1);

    synth(dir, "sinusoid_mix", "600", "2", "data.csv");
    let o = duet(&["train", "--data", "data.csv", "--experts", "4", "--topk", "5", "--out", "x"], dir);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr(&o).lines().count(), 1);

    let o = duet(&["train", "--data", "data.csv", "--out", "x", "--frobnicate"], dir);
    assert_eq!(o.status.code(), Some(2));

    let o = duet(&["ablate", "--data", "data.csv", "--variants", "full,bogus", "--out", "ab"], dir);
    assert_eq!(o.status.code(), Some(2));

    let o = duet(&["synth", "--kind", "two_regime", "--length", "100", "--channels", "2", "--out", "s.csv"], dir);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn data_errors_exit_3() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let o = duet(&["train", "--data", "missing.csv", "--out", "x"], dir);
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(stderr(&o).lines().count(), 1);

    synth(dir, "sinusoid_mix", "600", "3", "three.csv");
    synth(dir, "sinusoid_mix", "600", "2", "two.csv");
    assert!(train_small(dir, "three.csv", "run", &[]).status.success());
    let o = duet(&["eval", "--ckpt", "run/model.ckpt", "--data", "two.csv"], dir);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("channels"));

    let o = duet(&["inspect", "--ckpt", "run/model.ckpt", "--data", "three.csv", "--what", "gates", "--window", "100000", "--out", "g.csv"], dir);
    assert_eq!(o.status.code(), Some(3));

    fs::write(dir.join("bad.ckpt"), b"not a checkpoint").unwrap();
    let o = duet(&["eval", "--ckpt", "bad.ckpt", "--data", "three.csv"], dir);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn divergence_exits_4() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth(dir, "sinusoid_mix", "600", "2", "data.csv");
    let o = train_small(dir, "data.csv", "run", &["--lr", "1e308"]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(stderr(&o).contains("diverged"));
    let manifest = fs::read_to_string(dir.join("run/manifest.json")).unwrap();
    assert!(manifest.contains("\"failed\""));
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<(String, Vec<f64>)>) {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(str::to_owned).collect();
    let rows = lines
        .map(|l| {
            let cells: Vec<&str> = l.split(',').collect();
            let numeric = cells.iter().position(|c| c.parse::<f64>().is_ok()).unwrap();
            (cells[..numeric].join(","), cells[numeric..].iter().map(|c| c.parse().unwrap()).collect())
        })
        .collect();
    (header, rows)
}

#[test]
fn inspect_exports() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    // Channels a and c are identical.
    let mut csv = String::from("date,a,b,c\n");
    for t in 0..600 {
        let x = (t as f64 * 0.3).sin() + 0.1 * (t as f64 * 1.7).cos();
        let y = (t as f64 * 0.05).cos() * 2.0 + (t % 7) as f64 * 0.1;
        csv.push_str(&format!("{t},{x},{y},{x}\n"));
    }
    fs::write(dir.join("data.csv"), csv).unwrap();
    assert!(train_small(dir, "data.csv", "run", &[]).status.success());

    let o = duet(&["inspect", "--ckpt", "run/model.ckpt", "--data", "data.csv", "--what", "gates", "--window", "2", "--out", "g.csv"], dir);
    assert!(o.status.success(), "{}", stderr(&o));
    let (header, rows) = read_csv(&dir.join("g.csv"));
    assert_eq!(header, ["channel", "expert_0", "expert_1", "expert_2", "expert_3"]);
    assert_eq!(rows.len(), 3);
    for (_, r) in &rows {
        assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    let o = duet(&["inspect", "--ckpt", "run/model.ckpt", "--data", "data.csv", "--what", "mask", "--window", "2", "--out", "m.csv"], dir);
    assert!(o.status.success(), "{}", stderr(&o));
    let (header, rows) = read_csv(&dir.join("m.csv"));
    assert_eq!(header, ["matrix", "channel", "a", "b", "c"]);
    assert_eq!(rows.len(), 6);
    for (i, (_, r)) in rows.iter().enumerate() {
        assert_eq!(r[i % 3], 1.0, "diagonal of row {i}");
    }
    // P rows: a's link to c dominates its other off-diagonal entries.
    let p_a = &rows[0].1;
    assert!(p_a[2] >= p_a[1]);
    let p_c = &rows[2].1;
    assert!(p_c[0] >= p_c[1]);
}

#[test]
fn synth_round_trip_and_statistics() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let args = ["synth", "--kind", "two_regime", "--length", "4000", "--channels", "4", "--seed", "5", "--out", "a.csv", "--regimes-out", "r.csv"];
    assert!(duet(&args, dir).status.success());
    let mut again = args;
    again[10] = "b.csv";
    again[12] = "r2.csv";
    assert!(duet(&again, dir).status.success());
    assert_eq!(fs::read(dir.join("a.csv")).unwrap(), fs::read(dir.join("b.csv")).unwrap());

    let ds = duet::data::load_dataset(dir.join("a.csv"), true, Some("date")).unwrap();
    assert_eq!((ds.channels(), ds.len()), (4, 4000));

    let labels: Vec<u8> = fs::read_to_string(dir.join("r.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    // Mean within-segment variance per regime.
    let mut var = [0.0; 2];
    let mut count = [0usize; 2];
    for row in ds.values.rows() {
        let mut start = 0;
        while start < labels.len() {
            let mut end = start;
            while end < labels.len() && labels[end] == labels[start] {
                end += 1;
            }
            let seg: Vec<f64> = (start..end).map(|t| row[t]).collect();
            let m = seg.iter().sum::<f64>() / seg.len() as f64;
            var[labels[start] as usize] += seg.iter().map(|x| (x - m).powi(2)).sum::<f64>() / seg.len() as f64;
            count[labels[start] as usize] += 1;
            start = end;
        }
    }
    let ratio = (var[1] / count[1] as f64) / (var[0] / count[0] as f64);
    assert!((ratio / duet::synthetic::REGIME_VARIANCE_RATIO - 1.0).abs() < 0.1, "{ratio}");
}

#[test]
fn reproducible_outputs_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth(dir, "two_regime", "1200", "3", "data.csv");
    for out in ["r1", "r2"] {
        let o = train_small(dir, "data.csv", out, &["--reproducible"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for f in ["model.ckpt", "report.json"] {
        assert_eq!(fs::read(dir.join("r1").join(f)).unwrap(), fs::read(dir.join("r2").join(f)).unwrap(), "{f}");
    }
    let m = |d: &str| fs::read_to_string(dir.join(d).join("manifest.json")).unwrap().replace(d, "");
    assert_eq!(m("r1"), m("r2"));
}

#[test]
fn ablate_single_cell_and_thread_cap() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth(dir, "sinusoid_mix", "600", "2", "data.csv");
    let mut args = vec!["ablate", "--data", "data.csv", "--variants", "no_ccm", "--seeds", "1", "--out", "ab"];
    args.extend_from_slice(SMALL);
    let o = duet(&args, dir);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(dir.join("ab/ablation.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "variant,mean_mse,mean_mae,runs,failed");
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("no_ccm,"));

    let o = Command::new(env!("CARGO_BIN_EXE_duet"))
        .args(&args)
        .env("DUET_THREADS", "zero")
        .current_dir(dir)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn sweep_writes_one_row_per_count() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth(dir, "sinusoid_mix", "600", "2", "data.csv");
    let mut args = vec!["sweep", "--data", "data.csv", "--experts-list", "1,3", "--out", "sw"];
    args.extend_from_slice(SMALL);
    let o = duet(&args, dir);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(dir.join("sw/sweep.csv")).unwrap();
    let keys: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(keys, ["1", "3"]);
}

/// End to end on the regime-switching set: the full model must beat the
/// single-extractor ablation.
#[test]
fn ablation_table_orders_full_below_no_tcm() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let o = duet(&["synth", "--kind", "two_regime", "--length", "4000", "--channels", "4", "--seed", "0", "--out", "data.csv"], dir);
    assert!(o.status.success());
    let o = duet(
        &["ablate", "--data", "data.csv", "--variants", "full,no_tcm", "--seeds", "0", "--lookback", "48", "--horizon", "24", "--out", "ab"],
        dir,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(dir.join("ab/ablation.csv")).unwrap();
    let mse = |name: &str| -> f64 {
        let line = text.lines().find(|l| l.starts_with(&format!("{name},"))).unwrap();
        line.split(',').nth(1).unwrap().parse().unwrap()
    };
    assert!(mse("full") < mse("no_tcm"), "{text}");
}

use std::path::Path;
use std::process::Command;

use dpix_core::embstore::Image;
use serde_json::Value;

fn dpix(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_dpix")).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "dpix {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const CONFIG: &str = r#"
batch_size = 32
total_steps = 4
seed = 3
rankme_every = 2

[encoder]
d_model = 8
n_layers = 1
n_heads = 2
seq_len = 8
d_repr = 16
projector_hidden_layers = 1
projector_width = 16
ffn_width = 16
branch_width = 8
doy_hidden = 0
quantize = true
"#;

#[test]
fn end_to_end_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (raw, pairs, run, store) = (d.join("raw"), d.join("pairs"), d.join("run"), d.join("store"));
    let labels = d.join("labels.csv");

    dpix(&[
        "synth",
        "--out",
        p(&raw),
        "--tiles",
        "2",
        "--side",
        "12",
        "--seed",
        "5",
        "--labels",
        p(&labels),
        "--labels-per-tile",
        "60",
    ]);
    let text = std::fs::read_to_string(&labels).unwrap();
    assert!(text.starts_with("x,y,year,label"));
    assert_eq!(text.lines().count(), 121);

    let built: Value = serde_json::from_str(&dpix(&[
        "shuffle",
        "build",
        "--tiles",
        p(&raw),
        "--L",
        "8",
        "--seed",
        "1",
        "--out",
        p(&pairs),
    ]))
    .unwrap();
    assert_eq!(built["total"], 288);
    dpix(&["shuffle", "permute", "--in", p(&pairs), "--seed", "2"]);

    let config = d.join("train.toml");
    std::fs::write(&config, CONFIG).unwrap();
    let ckpt = dpix(&["train", "--config", p(&config), "--data", p(&pairs), "--out", p(&run)]);
    assert!(Path::new(ckpt.trim()).is_file());
    assert_eq!(
        std::fs::read_to_string(run.join("train_log.jsonl"))
            .unwrap()
            .lines()
            .count(),
        4
    );

    let written = dpix(&[
        "infer",
        "--checkpoint",
        ckpt.trim(),
        "--tiles",
        p(&raw),
        "--year",
        "2024",
        "--out",
        p(&store),
    ]);
    assert_eq!(written.lines().count(), 2);

    // synthetic tiles sit side by side from the origin at 10 m pixels
    let bbox = "0,-120,240,0";
    let region = d.join("region.npy");
    let header: Value = serde_json::from_str(&dpix(&[
        "fetch",
        "--store",
        p(&store),
        "--bbox",
        bbox,
        "--year",
        "2024",
        "--out",
        p(&region),
    ]))
    .unwrap();
    assert_eq!(header["dim"], 16);
    let (h, w) = (header["height"].as_u64().unwrap(), header["width"].as_u64().unwrap());
    assert_eq!(h * w, 288);
    let npy = std::fs::read(&region).unwrap();
    assert!(npy.starts_with(b"\x93NUMPY"));
    assert!(d.join("region.valid.npy").is_file());

    let png = d.join("pca.png");
    dpix(&[
        "pca",
        "--store",
        p(&store),
        "--bbox",
        bbox,
        "--year",
        "2024",
        "--png",
        p(&png),
    ]);
    let img = Image::from_png(&std::fs::read(&png).unwrap()).unwrap();
    assert_eq!((img.height as u64, img.width as u64, img.channels), (h, w, 3));

    let report = d.join("report.json");
    dpix(&[
        "probe",
        "--store",
        p(&store),
        "--labels",
        p(&labels),
        "--task",
        "classify",
        "--report",
        p(&report),
    ]);
    let r: Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(r["labels_read"], 120);
    let f1 = r["metrics"]["macro_f1"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&f1));
}

#[test]
fn bad_arguments_fail_cleanly() {
    let out = Command::new(env!("CARGO_BIN_EXE_dpix"))
        .args([
            "fetch",
            "--store",
            "/nonexistent",
            "--bbox",
            "1,2,3",
            "--year",
            "2024",
            "--out",
            "x.npy",
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("bbox"));
}

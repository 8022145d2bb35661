use std::path::Path;
use std::process::{Command, Output};

fn bncodec(args: &[&str], dir: &Path) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_bncodec"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs");
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

const CONFIG: &str = r#"
seed = 3
quality = 0
output = "tiny.safetensors"

[model]
widths = [4, 6, 8]
merge_widths = [8, 12, 16]
latent_channels = 8
generator_hidden = 16
control_hidden = 16

[schedule]
stage1_steps = 2
stage2_steps = 2
batch = 2
crop = 64
log_every = 1
"#;

#[test]
fn train_compress_decompress_report_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    std::fs::write(root.join("tiny.toml"), CONFIG).unwrap();
    bncodec(&["train", "--config", "tiny.toml", "--stage", "1"], root);
    bncodec(&["train", "--config", "tiny.toml", "--stage", "2", "--resume", "tiny.safetensors", "--log", "steps.jsonl"], root);
    let logged = std::fs::read_to_string(root.join("steps.jsonl")).unwrap();
    assert_eq!(logged.lines().count(), 2);

    let img = image::RgbImage::from_fn(70, 45, |x, y| image::Rgb([(x * 3) as u8, (y * 5) as u8, ((x + y) * 2) as u8]));
    img.save(root.join("in.png")).unwrap();

    for level in ["0", "7"] {
        bncodec(
            &["compress", "--model", "tiny.safetensors", "--input", "in.png", "--output", "x.abc", "--budget-level", level, "--data-adaptive"],
            root,
        );
        bncodec(&["decompress", "--model", "tiny.safetensors", "--input", "x.abc", "--output", "out.png"], root);
        let decoded = image::open(root.join("out.png")).unwrap();
        assert_eq!((decoded.width(), decoded.height()), (70, 45));
    }

    let report = bncodec(&["report", "--model", "tiny.safetensors", "--level", "3", "--size", "64x64"], root);
    let report = String::from_utf8(report.stdout).unwrap();
    assert!(report.starts_with("edge,variant,macs"));
    assert!(report.lines().any(|l| l.starts_with("total,")));

    bncodec(&["eval", "--model", "tiny.safetensors", "--dataset", "synthetic:2:64", "--levels", "0,7", "--out", "eval.csv"], root);
    let rows = csv::Reader::from_path(root.join("eval.csv")).unwrap().records().count();
    assert_eq!(rows, 4);
    bncodec(&["plot", "--in", "eval.csv", "--out", "rd.png"], root);
    assert!(root.join("rd.png").exists());
}

#[test]
fn bad_streams_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("junk.abc"), b"not a stream").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_bncodec"))
        .args(["decompress", "--model", "missing.safetensors", "--input", "junk.abc", "--output", "o.png"])
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(!dir.path().join("o.png").exists());
}

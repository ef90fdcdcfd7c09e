//! End-to-end runs of the `hatnet` binary: output contracts and exit codes.

use std::path::Path;
use std::process::{Command, Output};

use hatnet::network::{save_weights, Model, ModelConfig};
use hatnet::Tensor;

/// Logits hash of `forward --variant tiny --seed 42` at 224x224, pinned at
/// first release. A change here means the numerics of the forward pass moved.
const TINY_SEED42_HASH: &str = "978d1bac3933707b1f4242a4db04b41183a9c98f4216bd95f7ffa5d2e8676a7d";

fn hatnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hatnet"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn field<'a>(out: &'a str, key: &str) -> &'a str {
    out.lines()
        .find_map(|l| l.strip_prefix(key))
        .unwrap_or_else(|| panic!("no {key} line in {out}"))
        .trim()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn describe_small_reports_its_size() {
    let o = hatnet(&["describe", "--variant", "small"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().last().unwrap(), "params: 25.7M");
}

#[test]
fn describe_tiny_stage2_has_48_channels() {
    let o = hatnet(&["describe", "--variant", "tiny"]);
    let out = stdout(&o);
    let row = out.lines().find(|l| l.starts_with("stage2")).unwrap();
    assert_eq!(row.split_whitespace().nth(2), Some("48"), "{row}");
}

#[test]
fn unknown_variant_is_a_usage_error() {
    let o = hatnet(&["describe", "--variant", "huge"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    for v in ["tiny", "small", "medium", "large"] {
        assert!(err.contains(v), "{err}");
    }
}

#[test]
fn invalid_input_size_is_a_usage_error() {
    // Stage 5 of the classification networks would be 3.5 x 3.5.
    let o = hatnet(&["flops", "--variant", "tiny", "--input-size", "112"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("divisible by 32"), "{}", stderr(&o));
}

fn total_flops(args: &[&str]) -> u128 {
    let o = hatnet(args);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let total = out.lines().find(|l| l.starts_with("TOTAL,")).unwrap();
    total.rsplit(',').next().unwrap().parse().unwrap()
}

#[test]
fn flops_grow_with_input_size() {
    let at224 = total_flops(&["flops", "--variant", "tiny"]);
    let at448 = total_flops(&["flops", "--variant", "tiny", "--input-size", "448"]);
    assert!(at224 < at448);
    let gflops = at224 as f64 / 1e9;
    assert!((gflops - 2.0).abs() / 2.0 <= 0.07, "{gflops}");

    let small = total_flops(&["flops", "--variant", "small"]) as f64 / 1e9;
    let medium = total_flops(&["flops", "--variant", "medium"]) as f64 / 1e9;
    assert!((small - 4.3).abs() / 4.3 <= 0.07, "{small}");
    assert!((medium - 8.3).abs() / 8.3 <= 0.07, "{medium}");

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("toy.json");
    std::fs::write(&cfg, ModelConfig::toy(3).to_json()).unwrap();
    let at32 = total_flops(&["flops", "--config", path_str(&cfg), "--input-size", "32"]);
    let at64 = total_flops(&["flops", "--config", path_str(&cfg), "--input-size", "64"]);
    assert!(at32 < at64);
}

#[test]
fn forward_is_deterministic_and_pinned() {
    let args = ["forward", "--variant", "tiny", "--seed", "42"];
    let (a, b) = (hatnet(&args), hatnet(&args));
    assert!(a.status.success(), "{}", stderr(&a));
    let (a, b) = (stdout(&a), stdout(&b));
    assert_eq!(a, b);
    assert_eq!(field(&a, "logits:"), "[1, 1000]");
    assert_eq!(field(&a, "stage5:"), "[1, 7, 7, 384]");
    assert_eq!(field(&a, "hash:"), TINY_SEED42_HASH);
}

#[test]
fn zero_head_gives_zero_logits() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("toy.json");
    let weights = dir.path().join("zero_head.hatw");
    let cfg = ModelConfig::toy(3);
    std::fs::write(&cfg_path, cfg.to_json()).unwrap();
    let mut model = Model::<f32>::new(cfg, 4).unwrap();
    model
        .set_param("head.weight", Tensor::zeros(&[128, 3]))
        .unwrap();
    model.set_param("head.bias", Tensor::zeros(&[3])).unwrap();
    save_weights(&model, &weights).unwrap();

    let o = hatnet(&[
        "forward",
        "--config",
        path_str(&cfg_path),
        "--input-size",
        "32",
        "--batch",
        "2",
        "--weights",
        path_str(&weights),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert_eq!(field(&out, "mean:"), "0.000000");
    assert_eq!(field(&out, "min:"), "0.000000");
    assert_eq!(field(&out, "max:"), "0.000000");
}

#[test]
fn mismatched_weights_are_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let weights = dir.path().join("w.hatw");
    std::fs::write(&weights, b"not a weights file").unwrap();
    let o = hatnet(&[
        "forward",
        "--variant",
        "tiny",
        "--weights",
        path_str(&weights),
    ]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn gradcheck_passes_on_the_default_network() {
    let o = hatnet(&["gradcheck"]);
    assert_eq!(o.status.code(), Some(0), "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).trim_end().ends_with("PASS"));
}

#[test]
fn gradcheck_rejects_a_zero_step() {
    let o = hatnet(&["gradcheck", "--eps", "0"]);
    assert_eq!(o.status.code(), Some(2));
    let o = hatnet(&["gradcheck", "--eps", "-1e-5"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gradcheck_rejects_large_networks() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("toy.json");
    std::fs::write(&cfg, ModelConfig::toy(3).to_json()).unwrap();
    let o = hatnet(&["gradcheck", "--config", path_str(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn zero_step_training_writes_header_and_initial_weights() {
    let dir = tempfile::tempdir().unwrap();
    let (out, metrics) = (dir.path().join("toy.hatw"), dir.path().join("m.csv"));
    let o = hatnet(&[
        "train-toy",
        "--steps",
        "0",
        "--out",
        path_str(&out),
        "--metrics",
        path_str(&metrics),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        std::fs::read_to_string(&metrics).unwrap(),
        "step,loss,train_acc\n"
    );
    let loaded: Model<f32> = hatnet::network::load_weights(ModelConfig::toy(3), &out).unwrap();
    let fresh = Model::<f32>::new(ModelConfig::toy(3), 0).unwrap();
    assert_eq!(loaded.params(), fresh.params());
}

#[test]
fn short_training_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let run = |tag: &str| {
        let (out, metrics) = (
            dir.path().join(format!("{tag}.hatw")),
            dir.path().join(format!("{tag}.csv")),
        );
        let o = hatnet(&[
            "train-toy",
            "--steps",
            "20",
            "--batch",
            "8",
            "--seed",
            "3",
            "--out",
            path_str(&out),
            "--metrics",
            path_str(&metrics),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        (
            std::fs::read(&metrics).unwrap(),
            std::fs::read(&out).unwrap(),
        )
    };
    let (csv_a, w_a) = run("a");
    let (csv_b, w_b) = run("b");
    assert_eq!(csv_a, csv_b);
    assert_eq!(w_a, w_b);
    let text = String::from_utf8(csv_a).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("10,") && lines[2].starts_with("20,"));
    assert!(!text.contains('\r'));
}

#[test]
fn unwritable_output_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("missing").join("toy.hatw");
    let metrics = dir.path().join("m.csv");
    let o = hatnet(&[
        "train-toy",
        "--steps",
        "0",
        "--out",
        path_str(&bad),
        "--metrics",
        path_str(&metrics),
    ]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    let o = hatnet(&[
        "train-toy",
        "--steps",
        "0",
        "--out",
        path_str(&dir.path().join("ok.hatw")),
        "--metrics",
        path_str(&bad),
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn bad_training_arguments_are_usage_errors() {
    assert_eq!(
        hatnet(&["train-toy", "--classes", "11", "--steps", "0"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        hatnet(&["train-toy", "--lr", "0", "--steps", "0"])
            .status
            .code(),
        Some(2)
    );
}

//! End-to-end runs of the binary: window design to disk, and a WAV
//! process pass with stats.

use std::fs;
use std::path::PathBuf;
use std::process::Command;

use qplimit::engine::config::LaneMap;
use qplimit::engine::StreamTensor;
use qplimit::wav;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_qplimit"))
}

fn workdir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join("qplimit_cli_tests").join(name);
    fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn design_window_writes_raw_and_sidecar() {
    let dir = workdir("design");
    let out = dir.join("w64.f64");
    let status = bin()
        .args(["design-window", "--length", "64", "--hop", "16", "--attack", "24"])
        .args(["--release", "40", "--out"])
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    assert_eq!(fs::metadata(&out).unwrap().len(), 64 * 8);
    let sidecar: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("w64.f64.json")).unwrap()).unwrap();
    assert_eq!(sidecar["M"], 64);
    assert_eq!(sidecar["F"], 16);
    assert_eq!(sidecar["T_A"], 24);
    assert_eq!(sidecar["T_R"], 40);
    assert!(sidecar["cola_residual"].as_f64().unwrap() <= 1e-6);
}

#[test]
fn process_limits_a_hot_stereo_pair() {
    let dir = workdir("process");
    let input = dir.join("in.wav");
    let output = dir.join("out.wav");
    let config = dir.join("cfg.json");
    let stats = dir.join("stats.csv");

    // Two over-threshold sine lanes into one mixer.
    let rate = 48_000u32;
    let len = 4_800usize;
    let mut stream = StreamTensor::zeros(len, 2, 1, 1);
    for t in 0..len {
        let secs = t as f64 / rate as f64;
        stream.set(t, 0, 0, 0, 1.2 * (2.0 * std::f64::consts::PI * 101.0 * secs).sin());
        stream.set(t, 1, 0, 0, 0.9 * (2.0 * std::f64::consts::PI * 443.0 * secs).sin());
    }
    wav::write_stream(&input, &stream, rate).unwrap();
    fs::write(
        &config,
        r#"{
            "sample_rate": 48000, "frame_size": 64, "lookahead": 64,
            "bands": 2, "contents": 1, "mixers": 1,
            "thresholds": [1.0],
            "window": {"attack": 48, "release": 80},
            "culling": true
        }"#,
    )
    .unwrap();

    let out = bin()
        .args(["process", "--input"])
        .arg(&input)
        .args(["--config"])
        .arg(&config)
        .args(["--output"])
        .arg(&output)
        .args(["--stats"])
        .arg(&stats)
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));

    let (limited, rate_back) = wav::read_stream(&output, &LaneMap::canonical(1, 1, 1), 1, 1, 1).unwrap();
    assert_eq!(rate_back, rate);
    assert_eq!(limited.len, len);
    let mut peak = 0.0f64;
    for t in 0..len {
        peak = peak.max(limited.get(t, 0, 0, 0).abs());
    }
    // f32 output quantization on top of the 1e-6 engine bound.
    assert!(peak <= 1.0 + 1e-5, "limited peak {peak}");

    let stats_text = fs::read_to_string(&stats).unwrap();
    assert!(stats_text.starts_with("frame_index,"));
    assert!(stats_text.lines().count() > 10);
}

#[test]
fn bench_commands_emit_csv() {
    let dir = workdir("bench");
    let status = bin()
        .args(["bench", "reduce", "--duration", "0.02", "--channels", "2", "--out"])
        .arg(&dir)
        .status()
        .unwrap();
    assert!(status.success());
    assert!(dir.join("reduce_frames.csv").exists());
    assert!(dir.join("reduce_summary.csv").exists());

    let status = bin()
        .args(["bench", "premix", "--duration", "0.02", "--out"])
        .arg(&dir)
        .status()
        .unwrap();
    assert!(status.success());
    let summary = fs::read_to_string(dir.join("premix_summary.csv")).unwrap();
    assert!(summary.contains("full"));
    assert!(summary.contains("concatenation"));
}

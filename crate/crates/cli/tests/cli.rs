use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use archoscope::arch::fixtures;
use archoscope::extraction::{ExtractionConfig, Extractor};
use archoscope::trace::Trace;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_archoscope"));
    c.env_remove("ARCHOSCOPE_CONFIG");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn fixture(dir: &Path, name: &str) -> PathBuf {
    let p = dir.join(format!("{name}.json"));
    fs::write(&p, fixtures::by_name(name).unwrap().to_json()).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn synth_summary_lists_gemm_calls() {
    let dir = TempDir::new().unwrap();
    let arch = fixture(dir.path(), "mnist_cnn");
    let out = dir.path().join("cnn.emt");
    let o = run(&["synth", s(&arch), s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let l1 = text.lines().find(|l| l.starts_with("L1 ")).unwrap();
    assert!(l1.contains("GemmCall=392"), "{l1}");
    let l4 = text.lines().find(|l| l.starts_with("L4 ")).unwrap();
    assert!(l4.contains("GemmCall=98"), "{l4}");
}

#[test]
fn synth_is_byte_identical_for_a_seed() {
    let dir = TempDir::new().unwrap();
    let arch = fixture(dir.path(), "mnist_mlp");
    let (a, b) = (dir.path().join("a.emt"), dir.path().join("b.emt"));
    for p in [&a, &b] {
        assert_eq!(code(&run(&["synth", s(&arch), s(p), "--noise", "0", "--average", "1", "--seed", "9"])), 0);
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn averaging_sixteen_quarters_the_noise() {
    let dir = TempDir::new().unwrap();
    let arch = fixture(dir.path(), "mnist_mlp");
    let out = dir.path().join("n.emt");
    assert_eq!(code(&run(&["synth", s(&arch), s(&out), "--noise", "0.8", "--average", "16"])), 0);
    let t = Trace::from_bytes(&fs::read(&out).unwrap()).unwrap();
    // The leading padding is silent: at least 25 us.
    let silent = &t.samples[..(20.0 * t.samples_per_us()) as usize];
    let mean = silent.iter().map(|&v| v as f64).sum::<f64>() / silent.len() as f64;
    let var = silent.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / (silent.len() - 1) as f64;
    let std = var.sqrt();
    assert!((std / 0.2 - 1.0).abs() < 0.1, "std {std}");
}

#[test]
fn synth_rejects_bad_architecture() {
    let dir = TempDir::new().unwrap();
    let arch = dir.path().join("bad.json");
    fs::write(&arch, r#"{"input": {"h": 28, "c": 1}, "layers": [{"type": "conv2d", "k": 0, "z": 3, "s": 1, "p": 1}]}"#)
        .unwrap();
    assert_eq!(code(&run(&["synth", s(&arch), s(&dir.path().join("x.emt"))])), 2);
    fs::write(&arch, "not json").unwrap();
    assert_eq!(code(&run(&["synth", s(&arch), s(&dir.path().join("x.emt"))])), 2);
}

#[test]
fn synth_reports_render_errors() {
    let dir = TempDir::new().unwrap();
    let arch = fixture(dir.path(), "mnist_mlp");
    // 1 MHz cannot resolve 0.05 us activation elements.
    let render = dir.path().join("render.json");
    fs::write(&render, r#"{"sample_rate_hz": 1e6}"#).unwrap();
    let o = run(&["synth", s(&arch), s(&dir.path().join("x.emt")), "--render", s(&render)]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn synth_extract_diff_round_trip() {
    let dir = TempDir::new().unwrap();
    let arch = fixture(dir.path(), "mnist_cnn");
    let (trace, report) = (dir.path().join("t.emt"), dir.path().join("r.json"));
    assert_eq!(code(&run(&["synth", s(&arch), s(&trace), "--annotate"])), 0);
    let o = run(&["extract", s(&trace), "--input-shape", "28x1", "--report", s(&report)]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    let recovered = dir.path().join("recovered.json");
    fs::write(&recovered, v["recovered"].to_string()).unwrap();
    let o = run(&["diff", s(&arch), s(&recovered)]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(stdout(&o).is_empty());
}

#[test]
fn extract_truncated_file_is_an_input_error() {
    let dir = TempDir::new().unwrap();
    let arch = fixture(dir.path(), "mnist_mlp");
    let trace = dir.path().join("t.emt");
    assert_eq!(code(&run(&["synth", s(&arch), s(&trace)])), 0);
    let bytes = fs::read(&trace).unwrap();
    fs::write(&trace, &bytes[..bytes.len() / 2]).unwrap();
    let o = run(&["extract", s(&trace), "--input-shape", "28x1"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("truncated"));
}

#[test]
fn extract_pure_noise_is_unresolved_and_empty() {
    let dir = TempDir::new().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = Normal::new(0.0, 0.05).unwrap();
    let samples: Vec<f32> = (0..200_000).map(|_| n.sample(&mut rng) as f32).collect();
    let trace = dir.path().join("noise.emt");
    Trace::new(200e6, samples).unwrap().write_to(fs::File::create(&trace).unwrap()).unwrap();
    let report = dir.path().join("r.json");
    let o = run(&["extract", s(&trace), "--input-shape", "28x1", "--report", s(&report)]);
    assert_eq!(code(&o), 4);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(v["hypotheses"].as_array().unwrap().len(), 0);
}

#[test]
fn extract_requires_an_input_shape() {
    let dir = TempDir::new().unwrap();
    let arch = fixture(dir.path(), "mnist_mlp");
    let trace = dir.path().join("t.emt");
    assert_eq!(code(&run(&["synth", s(&arch), s(&trace)])), 0);
    assert_eq!(code(&run(&["extract", s(&trace)])), 2);
    assert_eq!(code(&run(&["extract", s(&trace), "--input-shape", "28"])), 2);
}

#[test]
fn diff_identical_and_changed() {
    let dir = TempDir::new().unwrap();
    let a = fixture(dir.path(), "mnist_cnn");
    let o = run(&["diff", s(&a), s(&a)]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).is_empty());

    let mut arch = fixtures::mnist_cnn();
    if let archoscope::arch::LayerSpec::Conv2d(c) = &mut arch.layers[0] {
        c.k = 32;
    }
    let b = dir.path().join("b.json");
    fs::write(&b, arch.to_json()).unwrap();
    let o = run(&["diff", s(&a), s(&b)]);
    assert_eq!(code(&o), 1);
    let lines: Vec<String> = stdout(&o).lines().map(String::from).collect();
    assert_eq!(lines.len(), 1, "{lines:?}");
    assert!(lines[0].starts_with("layer 1: k:"), "{}", lines[0]);

    fs::write(&b, "{").unwrap();
    assert_eq!(code(&run(&["diff", s(&a), s(&b)])), 2);
}

fn read_csv(path: &Path) -> Vec<Vec<f64>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records().map(|rec| rec.unwrap().iter().map(|f| f.parse().unwrap()).collect()).collect()
}

#[test]
fn spectro_silence_is_flat() {
    let dir = TempDir::new().unwrap();
    let trace = dir.path().join("quiet.emt");
    Trace::new(200e6, vec![0.0; 20_000]).unwrap().write_to(fs::File::create(&trace).unwrap()).unwrap();
    let csv = dir.path().join("s.csv");
    assert_eq!(code(&run(&["spectro", s(&trace), s(&csv)])), 0);
    let rows = read_csv(&csv);
    assert!(!rows.is_empty());
    assert!(rows.iter().flat_map(|r| &r[1..]).all(|&m| m.abs() < 1e-9));
}

#[test]
fn spectro_window_larger_than_trace_fails() {
    let dir = TempDir::new().unwrap();
    let trace = dir.path().join("short.emt");
    Trace::new(200e6, vec![0.0; 100]).unwrap().write_to(fs::File::create(&trace).unwrap()).unwrap();
    assert_eq!(code(&run(&["spectro", s(&trace), s(&dir.path().join("s.csv")), "--window", "256"])), 2);
    assert_eq!(code(&run(&["spectro", s(&trace), s(&dir.path().join("s.txt")), "--window", "16"])), 2);
}

#[test]
fn spectro_png_is_written() {
    let dir = TempDir::new().unwrap();
    let arch = fixture(dir.path(), "mnist_mlp");
    let trace = dir.path().join("t.emt");
    assert_eq!(code(&run(&["synth", s(&arch), s(&trace)])), 0);
    let png = dir.path().join("s.png");
    assert_eq!(code(&run(&["spectro", s(&trace), s(&png), "--window", "128", "--hop", "64"])), 0);
    let decoder = png::Decoder::new(std::io::BufReader::new(fs::File::open(&png).unwrap()));
    let reader = decoder.read_info().unwrap();
    assert_eq!(reader.info().height, 65);
}

/// Energy change-points in the exported CSV line up with the extractor's
/// layer boundaries.
#[test]
fn spectro_energy_steps_match_layer_boundaries() {
    let dir = TempDir::new().unwrap();
    let arch = fixture(dir.path(), "cifar10_cnn");
    let trace_path = dir.path().join("t.emt");
    assert_eq!(code(&run(&["synth", s(&arch), s(&trace_path)])), 0);
    let (window, hop) = (256usize, 256usize);
    let csv = dir.path().join("s.csv");
    let o = run(&["spectro", s(&trace_path), s(&csv), "--window", "256", "--hop", "256"]);
    assert_eq!(code(&o), 0);
    let rows = read_csv(&csv);
    let energy: Vec<f64> = rows.iter().map(|r| r[1..].iter().map(|m| m * m).sum()).collect();
    let mut sorted = energy.clone();
    sorted.sort_by(f64::total_cmp);
    let quiet = sorted[sorted.len() / 50];
    let active: Vec<bool> = energy.iter().map(|&e| e > 10.0 * quiet).collect();
    // (frame index, sample position) of every activity change.
    let steps: Vec<(usize, usize)> =
        (1..active.len()).filter(|&i| active[i] != active[i - 1]).map(|i| (i, i * hop + window / 2)).collect();

    let trace = Trace::from_bytes(&fs::read(&trace_path).unwrap()).unwrap();
    let segs = Extractor::new(&trace, ExtractionConfig::default()).split_layers().unwrap();
    let bounds: Vec<usize> = segs.iter().flat_map(|g| [g.start, g.end]).collect();
    let near = |a: usize, b: usize| a.abs_diff(b) <= 2 * hop;
    for b in &bounds {
        assert!(steps.iter().any(|&(_, st)| near(st, *b)), "boundary {b} has no energy step");
    }
    // Unmatched steps are the edges of short dips inside a layer (pool block gaps).
    for (k, &(i, st)) in steps.iter().enumerate() {
        if bounds.iter().any(|&b| near(st, b)) {
            continue;
        }
        let dip = if active[i] { steps[k - 1] } else { steps[k + 1] };
        assert!(i.abs_diff(dip.0) <= 2, "step {st} is not a short dip");
    }
}

#[test]
fn config_file_and_env_var_with_flags_winning() {
    let dir = TempDir::new().unwrap();
    let arch = fixture(dir.path(), "mnist_mlp");
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"seed": 5, "noise": 0.0, "average": 1, "input_shape": "28x1"}"#).unwrap();
    let (a, b, c) = (dir.path().join("a.emt"), dir.path().join("b.emt"), dir.path().join("c.emt"));
    assert_eq!(code(&run(&["--config", s(&cfg), "synth", s(&arch), s(&a)])), 0);
    assert_eq!(code(&run(&["synth", s(&arch), s(&b), "--seed", "5", "--noise", "0", "--average", "1"])), 0);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

    // Flags win over the file.
    assert_eq!(code(&run(&["--config", s(&cfg), "synth", s(&arch), s(&c), "--noise", "0.3"])), 0);
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());

    // The env var names the default config; input_shape comes from it.
    let report = dir.path().join("r.json");
    let o = bin().env("ARCHOSCOPE_CONFIG", &cfg).args(["extract", s(&a), "--report", s(&report)]).output().unwrap();
    assert!(matches!(code(&o), 0 | 4), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(v["effective_config"]["input_shape"], "28x1");
    assert_eq!(v["effective_config"]["thresholds"]["coarse_window"], 256);

    fs::write(&cfg, r#"{"sede": 5}"#).unwrap();
    assert_eq!(code(&run(&["--config", s(&cfg), "synth", s(&arch), s(&a)])), 2);
}

#[test]
fn thresholds_file_reaches_the_report() {
    let dir = TempDir::new().unwrap();
    let arch = fixture(dir.path(), "mnist_mlp");
    let trace = dir.path().join("t.emt");
    assert_eq!(code(&run(&["synth", s(&arch), s(&trace)])), 0);
    let th = dir.path().join("th.json");
    fs::write(&th, r#"{"confidence_floor": 0.4, "segment": {"k_sigma": 4.0}}"#).unwrap();
    let report = dir.path().join("r.json");
    run(&["extract", s(&trace), "--input-shape", "28x1", "--thresholds", s(&th), "--report", s(&report)]);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(v["config"]["confidence_floor"], 0.4);
    assert_eq!(v["config"]["segment"]["k_sigma"], 4.0);
    fs::write(&th, r#"{"confidence_flor": 0.4}"#).unwrap();
    assert_eq!(code(&run(&["extract", s(&trace), "--input-shape", "28x1", "--thresholds", s(&th)])), 2);
}

#[test]
fn extract_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let arch = fixture(dir.path(), "sp_mlp");
    let trace = dir.path().join("t.emt");
    assert_eq!(code(&run(&["synth", s(&arch), s(&trace)])), 0);
    let report = dir.path().join("r.json");
    let mut outputs = Vec::new();
    for _ in 0..2 {
        let o = run(&["extract", s(&trace), "--input-shape", "28x1", "--report", s(&report)]);
        outputs.push((stdout(&o), fs::read(&report).unwrap()));
    }
    assert_eq!(outputs[0], outputs[1]);
}

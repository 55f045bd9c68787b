use archoscope::arch::{diff, fixtures, Architecture};
use archoscope::emulator::{emulate_inference, render_trace, CostModel, RenderParams};
use archoscope::extraction::{extract_architecture, ExtractionConfig, ExtractionReport};
use archoscope::grammar::{random_architecture, GrammarParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn run(arch: &Architecture, params: &RenderParams) -> ExtractionReport {
    let root = emulate_inference(arch, &CostModel::default()).unwrap();
    let trace = render_trace(&root, params).unwrap();
    extract_architecture(&trace, arch.input, &ExtractionConfig::default())
}

fn mismatch(arch: &Architecture, r: &ExtractionReport) -> Option<String> {
    match &r.best_guess {
        None => {
            Some(format!("no best guess: {:?}", r.hypotheses.iter().map(|h| (h.kind, &h.errors)).collect::<Vec<_>>()))
        }
        Some(g) => {
            let d = diff(arch, g);
            (!d.is_empty()).then(|| d.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; "))
        }
    }
}

#[test]
fn reference_fixtures_round_trip() {
    for name in fixtures::NAMES {
        let arch = fixtures::by_name(name).unwrap();
        let r = run(&arch, &RenderParams::default());
        assert_eq!(mismatch(&arch, &r), None, "{name}");
    }
}

#[test]
fn random_architectures_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let g = GrammarParams::default();
    let mut failures = Vec::new();
    for i in 0..200 {
        let arch = random_architecture(&mut rng, &g);
        let r = run(&arch, &RenderParams { rng_seed: i, ..Default::default() });
        if let Some(m) = mismatch(&arch, &r) {
            failures.push(format!("#{i} {}\n  {m}", arch.to_json()));
        }
    }
    assert!(failures.is_empty(), "{}", failures.join("\n"));
}

/// Residual noise at 0.3x the weakest class amplitude (sigma 1.2 averaged 16 times).
fn boundary_noise(seed: u64) -> RenderParams {
    RenderParams { noise_sigma: 1.2, n_average: 16, rng_seed: seed, ..Default::default() }
}

#[test]
fn fixtures_round_trip_at_noise_boundary() {
    for name in fixtures::NAMES {
        let arch = fixtures::by_name(name).unwrap();
        for seed in 0..3 {
            let r = run(&arch, &boundary_noise(seed));
            assert_eq!(mismatch(&arch, &r), None, "{name} seed {seed}");
            let snr = r.noise.unwrap().snr;
            assert!((snr - 10.0 / 3.0).abs() < 0.2, "{name}: snr {snr}");
        }
    }
}

#[test]
fn random_architectures_round_trip_at_noise_boundary() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let g = GrammarParams::default();
    let mut failures = Vec::new();
    for i in 0..100 {
        let arch = random_architecture(&mut rng, &g);
        let r = run(&arch, &boundary_noise(i));
        if let Some(m) = mismatch(&arch, &r) {
            failures.push(format!("#{i} {}\n  {m}", arch.to_json()));
        }
    }
    assert!(failures.is_empty(), "{}", failures.join("\n"));
}

#[test]
fn heavy_noise_is_never_confident() {
    for name in fixtures::NAMES {
        let arch = fixtures::by_name(name).unwrap();
        for seed in 0..3 {
            let r = run(&arch, &RenderParams { noise_sigma: 2.0, n_average: 1, rng_seed: seed, ..Default::default() });
            assert!(!r.resolved && r.recovered.is_none(), "{name} seed {seed}");
            assert!(r.hypotheses.iter().all(|h| h.confidence < 0.5), "{name} seed {seed}");
        }
    }
}

#[test]
fn confidence_falls_with_noise() {
    let arch = fixtures::mnist_cnn();
    let mean = |sigma: f64| {
        let r = run(&arch, &RenderParams { noise_sigma: sigma, n_average: 1, rng_seed: 3, ..Default::default() });
        r.hypotheses.iter().map(|h| h.confidence).sum::<f64>() / r.hypotheses.len().max(1) as f64
    };
    let levels: Vec<f64> = [0.05, 0.3, 0.45, 2.0].into_iter().map(mean).collect();
    assert!(levels.windows(2).all(|w| w[1] <= w[0] + 1e-9), "{levels:?}");
}

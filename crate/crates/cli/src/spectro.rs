use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use anyhow::Result;
use archoscope::signal::Spectrogram;

/// PNG width limit; longer spectrograms are max-pooled along time.
const MAX_COLUMNS: usize = 4096;

/// Viridis sampled at nine evenly spaced points.
const VIRIDIS: [[f32; 3]; 9] = [
    [68.0, 1.0, 84.0],
    [71.0, 44.0, 122.0],
    [59.0, 82.0, 139.0],
    [44.0, 114.0, 142.0],
    [33.0, 145.0, 140.0],
    [39.0, 173.0, 129.0],
    [92.0, 200.0, 99.0],
    [170.0, 220.0, 50.0],
    [253.0, 231.0, 37.0],
];

fn viridis(t: f32) -> [u8; 3] {
    let x = t.clamp(0.0, 1.0) * (VIRIDIS.len() - 1) as f32;
    let i = (x as usize).min(VIRIDIS.len() - 2);
    let f = x - i as f32;
    let (a, b) = (VIRIDIS[i], VIRIDIS[i + 1]);
    [0, 1, 2].map(|k| (a[k] + f * (b[k] - a[k])).round() as u8)
}

/// One row per frame (time), one column per frequency bin.
pub fn write_csv(spec: &Spectrogram, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["time_us".to_string()];
    header.extend((0..spec.n_bins).map(|b| format!("{:.0}", spec.bin_frequency(b))));
    w.write_record(&header)?;
    for i in 0..spec.n_frames {
        let t = (i * spec.hop + spec.window / 2) as f64 / spec.sample_rate * 1e6;
        let mut row = vec![format!("{t:.4}")];
        row.extend(spec.frame(i).iter().map(|m| format!("{m:.6e}")));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Time on x, frequency on y (low at the bottom), log magnitude through viridis.
pub fn write_png(spec: &Spectrogram, path: &Path) -> Result<()> {
    let stride = spec.n_frames.div_ceil(MAX_COLUMNS).max(1);
    let width = spec.n_frames.div_ceil(stride).max(1);
    let height = spec.n_bins.max(1);
    let mut db = vec![f32::NEG_INFINITY; width * height];
    for i in 0..spec.n_frames {
        let x = i / stride;
        for (b, &m) in spec.frame(i).iter().enumerate() {
            let v = 20.0 * (m + 1e-12).log10();
            let cell = &mut db[b * width + x];
            *cell = cell.max(v);
        }
    }
    let hi = db.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let lo = hi - 80.0;
    let mut rgb = Vec::with_capacity(width * height * 3);
    for row in (0..height).rev() {
        for x in 0..width {
            let v = db[row * width + x];
            let t = if hi > lo && v.is_finite() { ((v - lo) / (hi - lo)).clamp(0.0, 1.0) } else { 0.0 };
            rgb.extend_from_slice(&viridis(t));
        }
    }
    let mut enc = png::Encoder::new(BufWriter::new(File::create(path)?), width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header()?;
    writer.write_image_data(&rgb)?;
    writer.finish()?;
    Ok(())
}

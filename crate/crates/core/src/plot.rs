//! PNG figures: spectrogram triptychs and simple line charts (no text).

use std::path::Path;

use image::{Rgb, RgbImage};
use rfsep_tensor::Tensor;

use crate::error::{Error, Result};
use crate::layout::ensure_parent;

const ANCHORS: [[f64; 3]; 5] = [
    [0.0, 0.0, 4.0],
    [80.0, 18.0, 123.0],
    [182.0, 54.0, 121.0],
    [251.0, 136.0, 97.0],
    [252.0, 253.0, 191.0],
];

/// Magma-like colour for `u ∈ [0, 1]`.
pub fn colormap(u: f64) -> Rgb<u8> {
    let x = u.clamp(0.0, 1.0) * (ANCHORS.len() - 1) as f64;
    let i = (x.floor() as usize).min(ANCHORS.len() - 2);
    let f = x - i as f64;
    let c = |k: usize| (ANCHORS[i][k] * (1.0 - f) + ANCHORS[i + 1][k] * f).round() as u8;
    Rgb([c(0), c(1), c(2)])
}

fn save(img: &RgbImage, path: &Path) -> Result<()> {
    ensure_parent(path)?;
    img.save(path).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))
}

/// Log-mels side by side (mixture | estimate | target for a triptych), time
/// left to right, low frequencies at the bottom, one shared colour scale.
pub fn spectrogram_panels(panels: &[&Tensor], n_mels: usize, path: &Path) -> Result<()> {
    const SCALE: u32 = 3;
    const GAP: u32 = 6;
    if panels.is_empty() || n_mels == 0 {
        return Err(Error::Invalid("spectrogram figure needs at least one panel".into()));
    }
    let frames = panels[0].numel() / n_mels;
    if panels.iter().any(|p| p.numel() != frames * n_mels) {
        return Err(Error::Invalid("triptych panels differ in size".into()));
    }
    let (lo, hi) = panels
        .iter()
        .flat_map(|p| p.data())
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = (hi - lo).max(1e-6) as f64;
    let pw = frames as u32 * SCALE;
    let h = n_mels as u32 * SCALE;
    let mut img = RgbImage::from_pixel(panels.len() as u32 * (pw + GAP) - GAP, h, Rgb([255, 255, 255]));
    for (k, p) in panels.iter().enumerate() {
        let x0 = k as u32 * (pw + GAP);
        for t in 0..frames {
            for m in 0..n_mels {
                let c = colormap((p.data()[t * n_mels + m] - lo) as f64 / span);
                for dx in 0..SCALE {
                    for dy in 0..SCALE {
                        img.put_pixel(x0 + t as u32 * SCALE + dx, h - 1 - (m as u32 * SCALE + dy), c);
                    }
                }
            }
        }
    }
    save(&img, path)
}

/// One polyline series.
pub struct Series {
    pub color: [u8; 3],
    pub points: Vec<(f64, f64)>,
}

/// Line chart with axes; x optionally on a log scale. Each point gets a square marker.
pub fn line_chart(series: &[Series], log_x: bool, path: &Path) -> Result<()> {
    const W: u32 = 640;
    const H: u32 = 400;
    const M: u32 = 40;
    let fx = |x: f64| if log_x { x.max(1e-12).log10() } else { x };
    let pts: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().map(|&(x, y)| (fx(x), y))).collect();
    if pts.is_empty() {
        return Err(Error::Invalid("line chart needs at least one point".into()));
    }
    let (x0, x1) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.0), b.max(p.0)));
    let (y0, y1) = pts.iter().fold((0f64, f64::NEG_INFINITY), |(a, b), p| (a.min(p.1), b.max(p.1)));
    let sx = |x: f64| M as f64 + (fx(x) - x0) / (x1 - x0).max(1e-12) * (W - 2 * M) as f64;
    let sy = |y: f64| (H - M) as f64 - (y - y0) / (y1 - y0).max(1e-12) * (H - 2 * M) as f64;
    let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
    let axis = Rgb([0, 0, 0]);
    for x in M..W - M {
        img.put_pixel(x, H - M, axis);
    }
    for y in M..=H - M {
        img.put_pixel(M, y, axis);
    }
    let mut plot = |x: f64, y: f64, c: Rgb<u8>| {
        let (xi, yi) = (x.round() as i64, y.round() as i64);
        if (0..W as i64).contains(&xi) && (0..H as i64).contains(&yi) {
            img.put_pixel(xi as u32, yi as u32, c);
        }
    };
    for s in series {
        let c = Rgb(s.color);
        for w in s.points.windows(2) {
            let (ax, ay, bx, by) = (sx(w[0].0), sy(w[0].1), sx(w[1].0), sy(w[1].1));
            let n = ((bx - ax).abs().max((by - ay).abs()).ceil() as usize).max(1);
            for i in 0..=n {
                let f = i as f64 / n as f64;
                plot(ax + f * (bx - ax), ay + f * (by - ay), c);
            }
        }
        for &(x, y) in &s.points {
            for dx in -2..=2 {
                for dy in -2..=2 {
                    plot(sx(x) + dx as f64, sy(y) + dy as f64, c);
                }
            }
        }
    }
    save(&img, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn colormap_endpoints() {
        assert_eq!(colormap(0.0), Rgb([0, 0, 4]));
        assert_eq!(colormap(1.0), Rgb([252, 253, 191]));
        assert_eq!(colormap(-3.0), colormap(0.0));
    }

    #[test]
    fn writes_png_files() {
        let dir = tempfile::tempdir().unwrap();
        let m = Tensor::randn([1, 8, 4], 1).unwrap();
        let p = dir.path().join("a/t.png");
        spectrogram_panels(&[&m, &m, &m], 4, &p).unwrap();
        let img = image::open(&p).unwrap();
        assert_eq!((img.width(), img.height()), (3 * 24 + 12, 12));
        let q = dir.path().join("c.png");
        line_chart(&[Series { color: [255, 0, 0], points: vec![(1.0, 2.0), (10.0, 1.0)] }], true, &q).unwrap();
        assert!(q.exists());
    }
}

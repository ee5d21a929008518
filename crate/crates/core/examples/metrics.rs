//! The evaluation metrics on hand-made inputs.

use nalgebra::DMatrix;
use rfsep::metrics::{embedding_stats, frechet_distance, log_spectral_distance, si_sdr, EmbedStats};

fn main() -> anyhow::Result<()> {
    let g = |mu: f64, var: f64| EmbedStats::from_moments(vec![mu], DMatrix::from_element(1, 1, var), 2);
    println!("Frechet N(0,1) vs N(1,1): {:.6}", frechet_distance(&g(0.0, 1.0)?, &g(1.0, 1.0)?)?);
    println!("Frechet N(0,1) vs N(0,4): {:.6}", frechet_distance(&g(0.0, 1.0)?, &g(0.0, 4.0)?)?);

    let a: Vec<Vec<f64>> = (0..200).map(|i| vec![(i as f64 * 0.37).sin(), (i as f64 * 0.11).cos()]).collect();
    let b: Vec<Vec<f64>> = a.iter().map(|v| vec![v[0] + 0.5, v[1]]).collect();
    println!("Frechet of a set against itself shifted by 0.5: {:.4}", frechet_distance(&embedding_stats(&a)?, &embedding_stats(&b)?)?);

    let x = [0.0f32, 1.0, 2.0, 3.0];
    let y = [0.1f32, 1.1, 2.1, 3.1];
    println!("LSD with a 0.1 log10 offset: {:.3} dB", log_spectral_distance(&x, &y)?);

    let s: Vec<f64> = (0..1600).map(|i| (i as f64 * 0.2).sin()).collect();
    let noisy: Vec<f64> = s.iter().enumerate().map(|(i, v)| 2.0 * v + 0.1 * (i as f64 * 1.7).cos()).collect();
    println!("SI-SDR (scaled, lightly corrupted copy): {:.2} dB", si_sdr(&noisy, &s)?);
    Ok(())
}

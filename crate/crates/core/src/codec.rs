//! Convolutional VAE between log-mel spectrograms `[1, T, F]` and latents
//! `[4, T/4, F/4]`.
//!
//! Encoder: two stride-2 stages (16 then 32 channels), each followed by a
//! residual 3×3 conv, and a 3×3 projection to `2·C` statistics. Decoder:
//! the mirror image, upsampling by sub-pixel convolution (pixel shuffle)
//! so no 3×3 conv runs at full mel resolution. The output is clamped at
//! the mel floor.

use rfsep_dsp::LOG_MEL_FLOOR;
use rfsep_tensor::{Bound, ParamSet, SeededRng, Tape, Tensor, Var};

use crate::error::{invalid, Result};
use crate::nn::{add_conv, conv};

pub const LATENT_CHANNELS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VaeShape {
    /// Mel frames fed to the encoder (multiple of 4).
    pub frames: usize,
    pub mels: usize,
}

impl VaeShape {
    pub fn new(frames: usize, mels: usize) -> Result<Self> {
        if frames == 0 || mels == 0 || frames % 4 != 0 || mels % 4 != 0 {
            return Err(invalid(format!("mel grid {frames}×{mels} must be a non-empty multiple of 4")));
        }
        Ok(Self { frames, mels })
    }

    pub fn mel_shape(&self) -> [usize; 3] {
        [1, self.frames, self.mels]
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        [LATENT_CHANNELS, self.frames / 4, self.mels / 4]
    }
}

/// Encoder statistics for a batch.
#[derive(Debug, Clone, Copy)]
pub struct Posterior {
    pub mu: Var,
    pub logvar: Var,
}

/// Fresh parameters under the `vae.` prefix.
pub fn init_vae(seed: u64) -> ParamSet {
    let mut rng = SeededRng::derive(seed, 0x7661_65);
    let mut ps = ParamSet::new();
    let c = LATENT_CHANNELS;
    add_conv(&mut ps, "vae.enc1", 16, 1, 3, &mut rng);
    add_conv(&mut ps, "vae.enc1_res", 16, 16, 3, &mut rng);
    add_conv(&mut ps, "vae.enc2", 32, 16, 3, &mut rng);
    add_conv(&mut ps, "vae.enc2_res", 32, 32, 3, &mut rng);
    add_conv(&mut ps, "vae.enc_out", 2 * c, 32, 3, &mut rng);
    add_conv(&mut ps, "vae.dec_in", 32, c, 3, &mut rng);
    add_conv(&mut ps, "vae.dec1_res", 32, 32, 3, &mut rng);
    add_conv(&mut ps, "vae.dec_up", 64, 32, 1, &mut rng);
    add_conv(&mut ps, "vae.dec2_res", 16, 16, 3, &mut rng);
    add_conv(&mut ps, "vae.dec_out", 4, 16, 3, &mut rng);
    ps
}

fn residual(tape: &mut Tape, b: &Bound, name: &str, x: Var) -> Result<Var> {
    let h = conv(tape, b, name, x, 1)?;
    let h = tape.silu(h)?;
    Ok(tape.add(h, x)?)
}

fn check_rank4(tape: &Tape, x: Var, channels: usize, what: &str) -> Result<()> {
    let s = tape.shape(x);
    if s.len() != 4 || s[1] != channels || s[2] % 4 != 0 && channels == 1 {
        return Err(invalid(format!("{what}: unexpected input shape {s:?}")));
    }
    Ok(())
}

/// `mel [N,1,T,F] → (mu, logvar)`, each `[N,4,T/4,F/4]`.
pub fn encode(tape: &mut Tape, b: &Bound, mel: Var) -> Result<Posterior> {
    check_rank4(tape, mel, 1, "vae encode")?;
    let s = tape.shape(mel);
    if s[2] % 4 != 0 || s[3] % 4 != 0 {
        return Err(invalid(format!("vae encode: mel grid {s:?} must be a multiple of 4")));
    }
    let h = conv(tape, b, "vae.enc1", mel, 2)?;
    let h = tape.silu(h)?;
    let h = residual(tape, b, "vae.enc1_res", h)?;
    let h = conv(tape, b, "vae.enc2", h, 2)?;
    let h = tape.silu(h)?;
    let h = residual(tape, b, "vae.enc2_res", h)?;
    let stats = conv(tape, b, "vae.enc_out", h, 1)?;
    let c = LATENT_CHANNELS;
    Ok(Posterior {
        mu: tape.slice(stats, 0, c)?,
        logvar: tape.slice(stats, c, 2 * c)?,
    })
}

/// `z [N,4,T/4,F/4] → mel [N,1,T,F]`, floored at −5.
pub fn decode(tape: &mut Tape, b: &Bound, z: Var) -> Result<Var> {
    check_rank4(tape, z, LATENT_CHANNELS, "vae decode")?;
    let h = conv(tape, b, "vae.dec_in", z, 1)?;
    let h = tape.silu(h)?;
    let h = residual(tape, b, "vae.dec1_res", h)?;
    let h = conv(tape, b, "vae.dec_up", h, 1)?;
    let h = tape.pixel_shuffle(h, 2)?;
    let h = tape.silu(h)?;
    let h = residual(tape, b, "vae.dec2_res", h)?;
    let h = conv(tape, b, "vae.dec_out", h, 1)?;
    let h = tape.pixel_shuffle(h, 2)?;
    Ok(tape.clamp_min(h, LOG_MEL_FLOOR)?)
}

/// `mu + exp(logvar/2) ∘ ε` with `ε ~ N(0, I)` drawn from `seed`.
pub fn reparameterize(mu: &Tensor, logvar: &Tensor, seed: u64) -> Result<Tensor> {
    let eps = Tensor::randn(mu.shape().to_vec(), seed)?;
    reparameterize_with(mu, logvar, &eps)
}

pub fn reparameterize_with(mu: &Tensor, logvar: &Tensor, eps: &Tensor) -> Result<Tensor> {
    let std = logvar.map(|v| (0.5 * v).exp());
    let noise = std.zip_with(eps, |s, e| s * e)?;
    Ok(mu.zip_with(&noise, |m, n| m + n)?)
}

/// `−½ · mean(1 + logvar − mu² − exp(logvar))` on the tape.
pub fn kl_term(tape: &mut Tape, post: Posterior) -> Result<Var> {
    let mu2 = tape.mul(post.mu, post.mu)?;
    let ev = tape.exp(post.logvar)?;
    let a = tape.sub(post.logvar, mu2)?;
    let a = tape.sub(a, ev)?;
    let a = tape.add_scalar(a, 1.0)?;
    let m = tape.mean(a)?;
    Ok(tape.scale(m, -0.5)?)
}

/// The same KL term evaluated directly.
pub fn kl_value(mu: &Tensor, logvar: &Tensor) -> f64 {
    let n = mu.numel().max(1) as f64;
    -0.5 * mu
        .data()
        .iter()
        .zip(logvar.data())
        .map(|(&m, &lv)| 1.0 + lv as f64 - (m as f64).powi(2) - (lv as f64).exp())
        .sum::<f64>()
        / n
}

#[derive(Debug, Clone, Copy)]
pub struct VaeLoss {
    pub total: Var,
    pub recon: f64,
    pub kl: f64,
}

/// `MSE(mel, decode(reparameterize(encode(mel)))) + β·KL`.
///
/// With `β = 0` the KL term is left out of the graph entirely.
pub fn vae_loss(tape: &mut Tape, b: &Bound, mel: Var, beta: f64, eps: &Tensor) -> Result<VaeLoss> {
    let post = encode(tape, b, mel)?;
    let e = tape.constant(eps.clone());
    let half = tape.scale(post.logvar, 0.5)?;
    let std = tape.exp(half)?;
    let noise = tape.mul(std, e)?;
    let z = tape.add(post.mu, noise)?;
    let recon_mel = decode(tape, b, z)?;
    let recon = tape.mse(recon_mel, mel)?;
    let recon_v = tape.value(recon).item() as f64;
    let kl = kl_term(tape, post)?;
    let kl_v = tape.value(kl).item() as f64;
    let total = if beta == 0.0 {
        recon
    } else {
        let w = tape.scale(kl, beta)?;
        tape.add(recon, w)?
    };
    Ok(VaeLoss {
        total,
        recon: recon_v,
        kl: kl_v,
    })
}

/// Per-channel affine standardisation of latents, fitted on a corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl LatentStats {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Mean and standard deviation of each channel over `[N,C,H,W]` latents.
    pub fn fit(latents: &Tensor) -> Result<Self> {
        let s = latents.shape();
        if s.len() != 4 || s[0] == 0 {
            return Err(invalid(format!("latent stats need a non-empty [N,C,H,W] batch, got {s:?}")));
        }
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let mut mean = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        for i in 0..n {
            for ch in 0..c {
                for &v in &latents.data()[(i * c + ch) * hw..(i * c + ch + 1) * hw] {
                    mean[ch] += v as f64;
                    sq[ch] += (v as f64).powi(2);
                }
            }
        }
        let count = (n * hw) as f64;
        let std: Vec<f32> = mean
            .iter()
            .zip(&sq)
            .map(|(m, s)| ((s / count - (m / count).powi(2)).max(0.0).sqrt().max(1e-6)) as f32)
            .collect();
        Ok(Self {
            mean: mean.iter().map(|m| (m / count) as f32).collect(),
            std,
        })
    }

    fn apply(&self, z: &Tensor, f: impl Fn(f32, f32, f32) -> f32) -> Result<Tensor> {
        let s = z.shape();
        let rank = s.len();
        if rank < 3 || s[rank - 3] != self.mean.len() {
            return Err(invalid(format!("latent {s:?} does not have {} channels", self.mean.len())));
        }
        let hw: usize = s[rank - 2..].iter().product();
        let c = self.mean.len();
        let mut out = z.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let ch = (i / hw) % c;
            *v = f(*v, self.mean[ch], self.std[ch]);
        }
        Ok(out)
    }

    pub fn standardize(&self, z: &Tensor) -> Result<Tensor> {
        self.apply(z, |v, m, s| (v - m) / s)
    }

    pub fn destandardize(&self, z: &Tensor) -> Result<Tensor> {
        self.apply(z, |v, m, s| v * s + m)
    }
}

/// A trained codec: parameters plus latent standardisation.
#[derive(Debug, Clone)]
pub struct Vae {
    pub params: ParamSet,
    pub shape: VaeShape,
    pub stats: LatentStats,
}

impl Vae {
    /// Posterior means of a `[N,1,T,F]` mel batch.
    pub fn encode_mu(&self, mels: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape, false);
        let x = tape.constant(mels.clone());
        let post = encode(&mut tape, &b, x)?;
        Ok(tape.value(post.mu).clone())
    }

    pub fn encode_stats(&self, mels: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape, false);
        let x = tape.constant(mels.clone());
        let post = encode(&mut tape, &b, x)?;
        Ok((tape.value(post.mu).clone(), tape.value(post.logvar).clone()))
    }

    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape, false);
        let x = tape.constant(z.clone());
        let out = decode(&mut tape, &b, x)?;
        Ok(tape.value(out).clone())
    }

    /// Standardised posterior means.
    pub fn encode_standardized(&self, mels: &Tensor) -> Result<Tensor> {
        self.stats.standardize(&self.encode_mu(mels)?)
    }

    /// Inverse standardisation followed by decoding.
    pub fn decode_standardized(&self, z: &Tensor) -> Result<Tensor> {
        self.decode(&self.stats.destandardize(z)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vae() -> Vae {
        Vae {
            params: init_vae(1),
            shape: VaeShape::new(100, 64).unwrap(),
            stats: LatentStats::identity(4),
        }
    }

    #[test]
    fn shape_contract() {
        let v = vae();
        let mel = Tensor::randn([2, 1, 100, 64], 3).unwrap();
        let (mu, lv) = v.encode_stats(&mel).unwrap();
        assert_eq!(mu.shape(), &[2, 4, 25, 16]);
        assert_eq!(lv.shape(), &[2, 4, 25, 16]);
        let out = v.decode(&mu).unwrap();
        assert_eq!(out.shape(), &[2, 1, 100, 64]);
        assert!(out.data().iter().all(|&x| x >= -5.0));
        assert!(v.encode_mu(&Tensor::zeros([1, 1, 99, 64])).is_err());
    }

    #[test]
    fn encode_is_deterministic() {
        let v = vae();
        let mel = Tensor::randn([1, 1, 100, 64], 5).unwrap();
        assert_eq!(v.encode_stats(&mel).unwrap(), v.encode_stats(&mel).unwrap());
    }

    #[test]
    fn reparameterize_limits() {
        let mu = Tensor::randn([4, 25, 16], 1).unwrap();
        let z = reparameterize(&mu, &Tensor::full([4, 25, 16], -30.0), 9).unwrap();
        // exp(-15) ≈ 3e-7, so single draws in the tails may exceed 1e-6; the RMS cannot.
        let rms = (z.data().iter().zip(mu.data()).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>()
            / mu.numel() as f64)
            .sqrt();
        assert!(rms < 1e-6, "rms {rms}");
        let big = reparameterize(&Tensor::zeros([100_000]), &Tensor::zeros([100_000]), 4).unwrap();
        let m = big.mean_f64();
        let var = big.data().iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / 1e5;
        assert!((var - 1.0).abs() < 0.05);
        assert_eq!(
            reparameterize(&mu, &Tensor::zeros([4, 25, 16]), 2).unwrap(),
            reparameterize(&mu, &Tensor::zeros([4, 25, 16]), 2).unwrap()
        );
    }

    #[test]
    fn kl_closed_form_values() {
        assert_eq!(kl_value(&Tensor::zeros([3]), &Tensor::zeros([3])), 0.0);
        assert!((kl_value(&Tensor::ones([1]), &Tensor::zeros([1])) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn loss_is_nonnegative_and_beta_zero_drops_kl() {
        let v = vae();
        let mel = Tensor::randn([2, 1, 100, 64], 8).unwrap();
        let eps = Tensor::randn([2, 4, 25, 16], 9).unwrap();
        let mut tape = Tape::new();
        let b = v.params.bind(&mut tape, true);
        let x = tape.constant(mel.clone());
        let l = vae_loss(&mut tape, &b, x, 0.0, &eps).unwrap();
        assert!((tape.value(l.total).item() as f64 - l.recon).abs() < 1e-6);
        let mut tape2 = Tape::new();
        let b2 = v.params.bind(&mut tape2, true);
        let x2 = tape2.constant(mel);
        let l2 = vae_loss(&mut tape2, &b2, x2, 1e-3, &eps).unwrap();
        let total = tape2.value(l2.total).item() as f64;
        assert!(total >= 0.0);
        assert!((total - (l2.recon + 1e-3 * l2.kl)).abs() < 1e-4);
    }

    #[test]
    fn standardization_round_trips() {
        let z = Tensor::randn([3, 4, 5, 6], 2).unwrap().map(|v| 3.0 * v + 1.5);
        let st = LatentStats::fit(&z).unwrap();
        let s = st.standardize(&z).unwrap();
        let back = st.destandardize(&s).unwrap();
        assert!(back.max_abs_diff(&z) < 1e-5);
        let again = LatentStats::fit(&s).unwrap();
        for (m, sd) in again.mean.iter().zip(&again.std) {
            assert!(m.abs() < 1e-4 && (sd - 1.0).abs() < 1e-4);
        }
    }
}

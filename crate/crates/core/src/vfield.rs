//! The conditional UNet-lite `μ(z_in, t, E; θ)`.
//!
//! Two stride-2 levels (`w → 2w → 4w`), a residual bottleneck and mirrored
//! up path with additive skips. Every block is modulated by FiLM computed
//! from `[time_embedding(t) ⊕ E]` through a two-layer MLP. The output head
//! is zero-initialised, so a fresh network predicts exactly zero.

use rfsep_tensor::{Bound, ParamSet, SeededRng, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::condition::{time_embedding_batch, EMBED_DIM, TIME_DIM};
use crate::error::{invalid, Result};
use crate::nn::{add_conv, add_linear, add_norm, add_zero_conv, conv, linear, norm};

pub const QUERY_TABLE: &str = "condition.query_table";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VFieldConfig {
    /// Stem width; the down path uses `2·base` and `4·base`.
    pub base_width: usize,
    pub latent_channels: usize,
    pub film_hidden: usize,
    pub vocab_size: usize,
}

impl Default for VFieldConfig {
    fn default() -> Self {
        Self {
            base_width: 32,
            latent_channels: 4,
            film_hidden: 256,
            vocab_size: 6,
        }
    }
}

impl VFieldConfig {
    /// `(block name, channels)` in FiLM-output order.
    fn blocks(&self) -> [(&'static str, usize); 6] {
        let w = self.base_width;
        [
            ("stem", w),
            ("down1", 2 * w),
            ("down2", 4 * w),
            ("mid", 4 * w),
            ("up2", 2 * w),
            ("up1", w),
        ]
    }

    fn film_outputs(&self) -> usize {
        2 * self.blocks().iter().map(|b| b.1).sum::<usize>()
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_width == 0 || self.latent_channels == 0 || self.film_hidden == 0 || self.vocab_size == 0 {
            return Err(invalid(format!("vector field config has a zero size: {self:?}")));
        }
        Ok(())
    }
}

/// Parameters under `vfield.` plus the query table `condition.query_table`.
pub fn init_vfield(cfg: &VFieldConfig, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let mut rng = SeededRng::derive(seed, 0x7666);
    let mut ps = ParamSet::new();
    let (w, c) = (cfg.base_width, cfg.latent_channels);
    add_linear(&mut ps, "vfield.film.fc1", cfg.film_hidden, TIME_DIM + EMBED_DIM, &mut rng);
    add_linear(&mut ps, "vfield.film.fc2", cfg.film_outputs(), cfg.film_hidden, &mut rng);
    add_conv(&mut ps, "vfield.stem.conv", w, 2 * c, 3, &mut rng);
    add_norm(&mut ps, "vfield.stem.norm", w);
    add_conv(&mut ps, "vfield.down1.conv", 2 * w, w, 3, &mut rng);
    add_norm(&mut ps, "vfield.down1.norm", 2 * w);
    add_conv(&mut ps, "vfield.down2.conv", 4 * w, 2 * w, 3, &mut rng);
    add_norm(&mut ps, "vfield.down2.norm", 4 * w);
    add_conv(&mut ps, "vfield.mid.conv", 4 * w, 4 * w, 3, &mut rng);
    add_norm(&mut ps, "vfield.mid.norm", 4 * w);
    add_conv(&mut ps, "vfield.up2.proj", 2 * w, 4 * w, 1, &mut rng);
    add_conv(&mut ps, "vfield.up2.conv", 2 * w, 2 * w, 3, &mut rng);
    add_norm(&mut ps, "vfield.up2.norm", 2 * w);
    add_conv(&mut ps, "vfield.up1.proj", w, 2 * w, 1, &mut rng);
    add_conv(&mut ps, "vfield.up1.conv", w, w, 3, &mut rng);
    add_norm(&mut ps, "vfield.up1.norm", w);
    add_zero_conv(&mut ps, "vfield.head", c, w, 3);
    let table = Tensor::randn_from([cfg.vocab_size, EMBED_DIM], &mut rng);
    ps.insert(QUERY_TABLE, table);
    Ok(ps)
}

/// Exact number of scalar parameters.
pub fn param_count(params: &ParamSet) -> usize {
    params.num_scalars()
}

struct Film {
    table: Var,
    offsets: Vec<(usize, usize)>,
}

impl Film {
    /// `(scale, shift)` for block `i`, each `[N, C_i]`.
    fn get(&self, tape: &mut Tape, i: usize) -> Result<(Var, Var)> {
        let (start, c) = self.offsets[i];
        Ok((tape.slice(self.table, start, start + c)?, tape.slice(self.table, start + c, start + 2 * c)?))
    }
}

fn block(tape: &mut Tape, b: &Bound, film: &Film, i: usize, name: &str, x: Var, stride: usize) -> Result<Var> {
    let h = conv(tape, b, &format!("vfield.{name}.conv"), x, stride)?;
    let h = norm(tape, b, &format!("vfield.{name}.norm"), h)?;
    let (scale, shift) = film.get(tape, i)?;
    let h = tape.film(h, scale, shift)?;
    Ok(tape.silu(h)?)
}

/// Forward pass on the tape.
///
/// `z_in` is `[N, 2C, H, W]` from `channel_concat`, `ts` holds one time per
/// item and `query_ids` one vocabulary id per item.
pub fn vf_forward(
    tape: &mut Tape,
    b: &Bound,
    cfg: &VFieldConfig,
    z_in: Var,
    ts: &[f64],
    query_ids: &[usize],
) -> Result<Var> {
    let s = tape.shape(z_in).to_vec();
    if s.len() != 4 || s[1] != 2 * cfg.latent_channels {
        return Err(invalid(format!(
            "vector field expects [N,{},H,W] input, got {s:?}",
            2 * cfg.latent_channels
        )));
    }
    let n = s[0];
    if ts.len() != n || query_ids.len() != n {
        return Err(invalid(format!(
            "batch of {n} needs {n} times and query ids, got {} and {}",
            ts.len(),
            query_ids.len()
        )));
    }
    if let Some(&bad) = query_ids.iter().find(|&&q| q >= cfg.vocab_size) {
        return Err(invalid(format!("query id {bad} outside a vocabulary of {}", cfg.vocab_size)));
    }
    if let Some(&bad) = ts.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(invalid(format!("time {bad} outside [0, 1]")));
    }

    let temb = tape.constant(time_embedding_batch(ts, TIME_DIM)?);
    let table = b.var(QUERY_TABLE)?;
    let e = tape.gather(table, query_ids)?;
    let cond = tape.concat(&[temb, e])?;
    let h = linear(tape, b, "vfield.film.fc1", cond)?;
    let h = tape.silu(h)?;
    let film_out = linear(tape, b, "vfield.film.fc2", h)?;
    let mut offsets = Vec::new();
    let mut at = 0;
    for (_, c) in cfg.blocks() {
        offsets.push((at, c));
        at += 2 * c;
    }
    let film = Film { table: film_out, offsets };

    let stem = block(tape, b, &film, 0, "stem", z_in, 1)?;
    let d1 = block(tape, b, &film, 1, "down1", stem, 2)?;
    let d2 = block(tape, b, &film, 2, "down2", d1, 2)?;
    let m = block(tape, b, &film, 3, "mid", d2, 1)?;
    let m = tape.add(m, d2)?;

    let (h1, w1) = (tape.shape(d1)[2], tape.shape(d1)[3]);
    let u = conv(tape, b, "vfield.up2.proj", m, 1)?;
    let u = tape.upsample2x(u, h1, w1)?;
    let u = tape.add(u, d1)?;
    let u2 = block(tape, b, &film, 4, "up2", u, 1)?;

    let (h0, w0) = (s[2], s[3]);
    let u = conv(tape, b, "vfield.up1.proj", u2, 1)?;
    let u = tape.upsample2x(u, h0, w0)?;
    let u = tape.add(u, stem)?;
    let u1 = block(tape, b, &film, 5, "up1", u, 1)?;
    conv(tape, b, "vfield.head", u1, 1)
}

/// A vector-field network with its parameters.
#[derive(Debug, Clone)]
pub struct VField {
    pub cfg: VFieldConfig,
    pub params: ParamSet,
}

impl VField {
    pub fn new(cfg: VFieldConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            params: init_vfield(&cfg, seed)?,
            cfg,
        })
    }

    /// Inference-only forward pass.
    pub fn predict(&self, z_in: &Tensor, ts: &[f64], query_ids: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape, false);
        let x = tape.constant(z_in.clone());
        let out = vf_forward(&mut tape, &b, &self.cfg, x, ts, query_ids)?;
        Ok(tape.value(out).clone())
    }

    pub fn param_count(&self) -> usize {
        param_count(&self.params)
    }

    pub fn query_table(&self) -> Result<&Tensor> {
        Ok(self.params.require(QUERY_TABLE)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fresh_network_predicts_zero_with_latent_shape() {
        let net = VField::new(VFieldConfig::default(), 3).unwrap();
        let x = Tensor::randn([2, 8, 25, 16], 1).unwrap();
        let out = net.predict(&x, &[0.2, 0.9], &[0, 5]).unwrap();
        assert_eq!(out.shape(), &[2, 4, 25, 16]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_bad_inputs() {
        let net = VField::new(VFieldConfig::default(), 3).unwrap();
        let x = Tensor::zeros([1, 8, 25, 16]);
        assert!(net.predict(&Tensor::zeros([1, 4, 25, 16]), &[0.0], &[0]).is_err());
        assert!(net.predict(&x, &[0.0, 0.1], &[0]).is_err());
        assert!(net.predict(&x, &[1.5], &[0]).is_err());
        assert!(net.predict(&x, &[0.5], &[6]).is_err());
    }

    #[test]
    fn param_count_is_frozen() {
        let net = VField::new(VFieldConfig::default(), 0).unwrap();
        let conv = |o: usize, i: usize, k: usize| o * i * k * k + o;
        let by_hand = (192 * 256 + 256) + (256 * 896 + 896)
            + conv(32, 8, 3) + conv(64, 32, 3) + conv(128, 64, 3) + conv(128, 128, 3)
            + conv(64, 128, 1) + conv(64, 64, 3) + conv(32, 64, 1) + conv(32, 32, 3)
            + conv(4, 32, 3)
            + 2 * (32 + 64 + 128 + 128 + 64 + 32)
            + 6 * 128;
        assert_eq!(by_hand, 581_284);
        assert_eq!(net.param_count(), 581_284);
        assert_eq!(param_count(&ParamSet::new()), 0);
    }

    #[test]
    fn width_scaling_of_conv_weights() {
        let narrow = init_vfield(&VFieldConfig::default(), 0).unwrap();
        let wide = init_vfield(&VFieldConfig { base_width: 64, ..Default::default() }, 0).unwrap();
        let count = |ps: &ParamSet, n: &str| ps.require(n).unwrap().numel();
        // The stem input width is fixed by the latent, so only its output doubles.
        assert_eq!(count(&wide, "vfield.stem.conv.weight"), 2 * count(&narrow, "vfield.stem.conv.weight"));
        assert_eq!(count(&narrow, "vfield.stem.conv.weight"), 32 * 8 * 9);
        for layer in ["down1.conv", "down2.conv", "mid.conv", "up2.conv", "up1.conv"] {
            let name = format!("vfield.{layer}.weight");
            assert_eq!(count(&wide, &name), 4 * count(&narrow, &name), "{layer}");
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let mut net = VField::new(VFieldConfig::default(), 9).unwrap();
        net.params.insert("vfield.head.weight", Tensor::randn([4, 32, 3, 3], 2).unwrap());
        let x = Tensor::randn([1, 8, 25, 16], 4).unwrap();
        let a = net.predict(&x, &[0.3], &[1]).unwrap();
        assert_eq!(a, net.predict(&x, &[0.3], &[1]).unwrap());
        assert_ne!(a, net.predict(&x, &[0.3], &[2]).unwrap());
    }
}

//! Query vocabulary, query and time embeddings, and channel concatenation of
//! the noisy latent with the mixture latent.

use std::path::Path;

use rfsep_dsp::SourceClass;
use rfsep_tensor::{Element, NdTensor, Tensor, TensorError};

use crate::error::{io_err, Error, Result};

/// Dimension of a query embedding row.
pub const EMBED_DIM: usize = 128;
/// Dimension of the sinusoidal time embedding.
pub const TIME_DIM: usize = 64;

/// Lower-case, strip ASCII punctuation (underscores kept everywhere, hyphens
/// kept inside tokens) and collapse whitespace.
pub fn normalize_query(text: &str) -> Result<String> {
    let tokens: Vec<String> = text
        .split_whitespace()
        .map(|tok| {
            let kept: String = tok
                .chars()
                .filter(|&c| !c.is_ascii_punctuation() || c == '_' || c == '-')
                .flat_map(char::to_lowercase)
                .collect();
            kept.trim_matches('-').to_string()
        })
        .filter(|t| !t.is_empty())
        .collect();
    if tokens.is_empty() {
        return Err(Error::EmptyQuery(text.to_string()));
    }
    Ok(tokens.join(" "))
}

/// Ordered class names; a name's position is its id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryVocab {
    names: Vec<String>,
}

impl Default for QueryVocab {
    /// The six synthetic source classes in their canonical order.
    fn default() -> Self {
        Self {
            names: SourceClass::ALL.iter().map(|c| c.name().to_string()).collect(),
        }
    }
}

impl QueryVocab {
    pub fn new<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        let mut out: Vec<String> = Vec::with_capacity(names.len());
        for n in names {
            let n = normalize_query(n.as_ref())?;
            if out.contains(&n) {
                return Err(Error::Config(format!("duplicate vocabulary entry {n:?}")));
            }
            out.push(n);
        }
        if out.is_empty() {
            return Err(Error::Config("empty vocabulary".into()));
        }
        Ok(Self { names: out })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.names.get(id).map(String::as_str)
    }

    /// Id of a free-text query, after normalization.
    pub fn id(&self, query: &str) -> Result<usize> {
        let q = normalize_query(query)?;
        self.names.iter().position(|n| *n == q).ok_or_else(|| Error::UnknownQuery {
            query: q,
            vocab: self.names.clone(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.names).expect("strings serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let names: Vec<String> = serde_json::from_str(text).map_err(|source| Error::Json {
            context: "vocabulary".into(),
            source,
        })?;
        Self::new(&names)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path).map_err(io_err(path))?)
    }
}

/// Row of the `[V, EMBED_DIM]` query table for `text`.
pub fn embed_query(text: &str, vocab: &QueryVocab, table: &Tensor) -> Result<Tensor> {
    let id = vocab.id(text)?;
    let s = table.shape();
    if s.len() != 2 || s[0] != vocab.len() {
        return Err(Error::Invalid(format!(
            "query table {s:?} does not match a vocabulary of {}",
            vocab.len()
        )));
    }
    Ok(table.slice_outer(id, id + 1)?.reshape([s[1]])?)
}

/// `[sin(ω_k t)…, cos(ω_k t)…]` with `ω_k` geometric from 1 to 10⁴ over `dim/2` frequencies.
pub fn time_embedding(t: f64, dim: usize) -> Result<Vec<f32>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::Invalid(format!("time embedding dim must be even and > 0, got {dim}")));
    }
    let half = dim / 2;
    let omega = |k: usize| {
        if half == 1 {
            1.0
        } else {
            10f64.powf(4.0 * k as f64 / (half - 1) as f64)
        }
    };
    let mut out: Vec<f32> = (0..half).map(|k| (omega(k) * t).sin() as f32).collect();
    out.extend((0..half).map(|k| (omega(k) * t).cos() as f32));
    Ok(out)
}

/// `[N, dim]` batch of time embeddings.
pub fn time_embedding_batch(ts: &[f64], dim: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        data.extend(time_embedding(t, dim)?);
    }
    Ok(Tensor::new([ts.len(), dim], data)?)
}

/// Stack `z_t` and `zm` along the channel axis: `[C,H,W]`→`[2C,H,W]` or
/// `[N,C,H,W]`→`[N,2C,H,W]`. Both blocks are copied verbatim.
pub fn channel_concat<T: Element>(zt: &NdTensor<T>, zm: &NdTensor<T>) -> Result<NdTensor<T>> {
    let (a, b) = (zt.shape(), zm.shape());
    let rank = a.len();
    if !(rank == 3 || rank == 4) || b.len() != rank || a[rank - 2..] != b[rank - 2..] || (rank == 4 && a[0] != b[0]) {
        return Err(TensorError::ShapeMismatch {
            op: "channel_concat",
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        }
        .into());
    }
    let n = if rank == 4 { a[0] } else { 1 };
    let (ca, cb) = (a[rank - 3], b[rank - 3]);
    let hw: usize = a[rank - 2..].iter().product();
    let mut data = Vec::with_capacity(zt.numel() + zm.numel());
    for i in 0..n {
        data.extend_from_slice(&zt.data()[i * ca * hw..(i + 1) * ca * hw]);
        data.extend_from_slice(&zm.data()[i * cb * hw..(i + 1) * cb * hw]);
    }
    let mut shape = a.to_vec();
    shape[rank - 3] = ca + cb;
    Ok(NdTensor::new(shape, data)?)
}

/// Channels `[start, end)` of a `[C,H,W]` or `[N,C,H,W]` tensor.
pub fn channel_slice(x: &Tensor, start: usize, end: usize) -> Result<Tensor> {
    let s = x.shape();
    let rank = s.len();
    if !(rank == 3 || rank == 4) || start >= end || end > s[rank - 3] {
        return Err(Error::Invalid(format!("channel range {start}..{end} on {s:?}")));
    }
    let n = if rank == 4 { s[0] } else { 1 };
    let c = s[rank - 3];
    let hw: usize = s[rank - 2..].iter().product();
    let mut data = Vec::with_capacity(n * (end - start) * hw);
    for i in 0..n {
        data.extend_from_slice(&x.data()[(i * c + start) * hw..(i * c + end) * hw]);
    }
    let mut shape = s.to_vec();
    shape[rank - 3] = end - start;
    Ok(Tensor::new(shape, data)?)
}

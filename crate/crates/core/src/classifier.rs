//! Small conv classifier over mel spectrograms.
//!
//! It stands in for a pretrained audio–text model: its softmax probability
//! of the query class is the consistency score, and its 32-dim penultimate
//! activations are the embedding for the Fréchet distance.

use rfsep_tensor::{Bound, ParamSet, SeededRng, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::nn::{add_conv, add_linear, conv, linear};
use crate::optim::Optimizer;

pub const EMBEDDING_DIM: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch: 16,
            lr: 1e-3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct QueryClassifier {
    pub params: ParamSet,
    pub n_classes: usize,
}

/// Pooled penultimate activations and logits for a `[N,1,T,F]` batch.
fn forward(tape: &mut Tape, b: &Bound, mel: Var) -> Result<(Var, Var)> {
    let s = tape.shape(mel).to_vec();
    if s.len() != 4 || s[1] != 1 {
        return Err(invalid(format!("classifier expects [N,1,T,F] mels, got {s:?}")));
    }
    let mut h = mel;
    for name in ["classifier.conv1", "classifier.conv2", "classifier.conv3"] {
        h = conv(tape, b, name, h, 2)?;
        h = tape.relu(h)?;
    }
    // Average over time, keep the frequency profile.
    let pooled = tape.mean_axis(h, 2)?;
    let width = tape.shape(pooled)[1] * tape.shape(pooled)[2];
    let flat = tape.reshape(pooled, [s[0], width])?;
    let e = linear(tape, b, "classifier.embed", flat)?;
    let e = tape.relu(e)?;
    let logits = linear(tape, b, "classifier.out", e)?;
    Ok((e, logits))
}

fn pooled_width(mels: usize) -> usize {
    let mut f = mels;
    for _ in 0..3 {
        f = (f + 1) / 2;
    }
    32 * f
}

impl QueryClassifier {
    pub fn new(n_classes: usize, n_mels: usize, seed: u64) -> Result<Self> {
        if n_classes < 2 {
            return Err(invalid(format!("a query classifier needs at least 2 classes, got {n_classes}")));
        }
        let mut rng = SeededRng::derive(seed, 0xc1a5);
        let mut ps = ParamSet::new();
        add_conv(&mut ps, "classifier.conv1", 16, 1, 3, &mut rng);
        add_conv(&mut ps, "classifier.conv2", 32, 16, 3, &mut rng);
        add_conv(&mut ps, "classifier.conv3", 32, 32, 3, &mut rng);
        add_linear(&mut ps, "classifier.embed", EMBEDDING_DIM, pooled_width(n_mels), &mut rng);
        add_linear(&mut ps, "classifier.out", n_classes, EMBEDDING_DIM, &mut rng);
        Ok(Self { params: ps, n_classes })
    }

    fn run(&self, mels: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape, false);
        let x = tape.constant(mels.clone());
        let (e, logits) = forward(&mut tape, &b, x)?;
        Ok((tape.value(e).clone(), tape.value(logits).clone()))
    }

    /// Softmax rows `[N, V]`, computed in f64.
    pub fn probabilities(&self, mels: &Tensor) -> Result<Vec<Vec<f64>>> {
        let (_, logits) = self.run(mels)?;
        Ok(logits.data().chunks(self.n_classes).map(softmax).collect())
    }

    /// Penultimate activations, one 32-vector per item.
    pub fn embeddings(&self, mels: &Tensor) -> Result<Vec<Vec<f64>>> {
        let (e, _) = self.run(mels)?;
        Ok(e.data().chunks(EMBEDDING_DIM).map(|r| r.iter().map(|&v| v as f64).collect()).collect())
    }

    /// Argmax class per item.
    pub fn predict(&self, mels: &Tensor) -> Result<Vec<usize>> {
        Ok(self.probabilities(mels)?.iter().map(|p| argmax(p)).collect())
    }

    /// Probability of `query_id` for each item.
    pub fn consistency_scores(&self, mels: &Tensor, query_ids: &[usize]) -> Result<Vec<f64>> {
        if query_ids.len() != mels.shape()[0] {
            return Err(invalid("one query id per mel is required"));
        }
        if let Some(&bad) = query_ids.iter().find(|&&q| q >= self.n_classes) {
            return Err(invalid(format!("class id {bad} outside {} classes", self.n_classes)));
        }
        let probs = self.probabilities(mels)?;
        Ok(probs.iter().zip(query_ids).map(|(p, &q)| p[q]).collect())
    }

    /// Fraction of items whose argmax equals the label.
    pub fn accuracy(&self, mels: &Tensor, labels: &[usize]) -> Result<f64> {
        let pred = self.predict(mels)?;
        let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
        Ok(hits as f64 / labels.len().max(1) as f64)
    }
}

/// Probability of class `query_id` for a single `[1,T,F]` mel.
pub fn consistency_score(mel: &Tensor, query_id: usize, classifier: &QueryClassifier) -> Result<f64> {
    let batch = single(mel)?;
    Ok(classifier.consistency_scores(&batch, &[query_id])?[0])
}

/// The 32-dim embedding of a single `[1,T,F]` mel.
pub fn embedding_of(mel: &Tensor, classifier: &QueryClassifier) -> Result<Vec<f64>> {
    let batch = single(mel)?;
    Ok(classifier.embeddings(&batch)?.remove(0))
}

fn single(mel: &Tensor) -> Result<Tensor> {
    let s = mel.shape();
    if s.len() != 3 {
        return Err(invalid(format!("expected a [1,T,F] mel, got {s:?}")));
    }
    Ok(mel.clone().reshape([1, s[0], s[1], s[2]])?)
}

pub fn softmax<T: Copy + Into<f64>>(row: &[T]) -> Vec<f64> {
    let max = row.iter().map(|&v| v.into()).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&v| (v.into() - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn argmax(p: &[f64]) -> usize {
    p.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

/// Gather items `idx` of a `[M, ...]` tensor into a batch.
pub fn gather_batch(all: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let items: Vec<Tensor> = idx.iter().map(|&i| all.slice_outer(i, i + 1)).collect::<Result<_, _>>()?;
    let mut shape = all.shape().to_vec();
    shape[0] = idx.len();
    Ok(Tensor::stack(&items)?.reshape(shape)?)
}

/// Cross-entropy training on labelled `[M,1,T,F]` mels with seeded minibatches.
pub fn train_query_classifier(
    mels: &Tensor,
    labels: &[usize],
    n_classes: usize,
    cfg: &ClassifierTrainConfig,
    seed: u64,
) -> Result<(QueryClassifier, Vec<f64>)> {
    let m = mels.shape()[0];
    if m == 0 || labels.len() != m {
        return Err(invalid(format!("{m} mels with {} labels", labels.len())));
    }
    let mut present: Vec<usize> = labels.to_vec();
    present.sort_unstable();
    present.dedup();
    if present.len() < 2 {
        return Err(invalid("classifier training needs at least 2 classes present"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(invalid(format!("label {bad} outside {n_classes} classes")));
    }
    let mut clf = QueryClassifier::new(n_classes, mels.shape()[3], seed)?;
    let mut opt = Optimizer::new(&clf.params, cfg.lr, Some(1.0));
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut rng = SeededRng::derive(seed, step as u64);
        let idx: Vec<usize> = (0..cfg.batch).map(|_| rng.below(m)).collect();
        let x = gather_batch(mels, &idx)?;
        let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let mut tape = Tape::new();
        let b = clf.params.bind(&mut tape, true);
        let xv = tape.constant(x);
        let (_, logits) = forward(&mut tape, &b, xv)?;
        let loss = tape.cross_entropy(logits, &y)?;
        losses.push(tape.value(loss).item() as f64);
        let grads = tape.backward(loss)?;
        let g = b.grads(&grads, &clf.params);
        opt.step(&mut clf.params, g)?;
    }
    Ok((clf, losses))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn probabilities_are_normalised() {
        let clf = QueryClassifier::new(6, 64, 1).unwrap();
        let mels = Tensor::randn([3, 1, 100, 64], 2).unwrap();
        for row in clf.probabilities(&mels).unwrap() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|p| (0.0..=1.0).contains(p)));
        }
        assert_eq!(clf.embeddings(&mels).unwrap()[0].len(), EMBEDDING_DIM);
    }

    #[test]
    fn uniform_logits_give_one_sixth() {
        let mut clf = QueryClassifier::new(6, 64, 1).unwrap();
        let w = clf.params.get_mut("classifier.out.weight").unwrap();
        *w = Tensor::zeros(w.shape());
        let mel = Tensor::randn([1, 100, 64], 3).unwrap();
        for q in 0..6 {
            assert!((consistency_score(&mel, q, &clf).unwrap() - 1.0 / 6.0).abs() < 1e-12);
        }
        assert!(consistency_score(&mel, 6, &clf).is_err());
    }

    #[test]
    fn embeddings_are_deterministic() {
        let clf = QueryClassifier::new(6, 64, 4).unwrap();
        let mel = Tensor::randn([1, 100, 64], 3).unwrap();
        assert_eq!(embedding_of(&mel, &clf).unwrap(), embedding_of(&mel, &clf).unwrap());
    }

    #[test]
    fn single_class_corpus_is_rejected() {
        let mels = Tensor::zeros([4, 1, 8, 8]);
        assert!(train_query_classifier(&mels, &[2; 4], 6, &ClassifierTrainConfig::default(), 0).is_err());
        assert!(QueryClassifier::new(1, 64, 0).is_err());
    }

    #[test]
    fn learns_a_separable_toy_problem() {
        // Class k lights up frequency band k.
        let mut data = Vec::new();
        let mut labels = Vec::new();
        let mut rng = SeededRng::new(5);
        for i in 0..60 {
            let k = i % 3;
            for _t in 0..16 {
                for f in 0..16 {
                    let on = f / 5 == k;
                    data.push(if on { 1.0 } else { -1.0 } + 0.3 * rng.normal_f64() as f32);
                }
            }
            labels.push(k);
        }
        let mels = Tensor::new([60, 1, 16, 16], data).unwrap();
        let cfg = ClassifierTrainConfig { steps: 150, batch: 8, lr: 3e-3 };
        let (clf, losses) = train_query_classifier(&mels, &labels, 3, &cfg, 1).unwrap();
        assert!(losses.last().unwrap() < &losses[0]);
        assert!(clf.accuracy(&mels, &labels).unwrap() > 0.95);
    }
}

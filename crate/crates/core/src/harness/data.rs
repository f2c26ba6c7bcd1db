//! Seeded synthetic datasets.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::config::{DatasetKind, DatasetSpec};
use crate::error::{Error, Result};
use crate::model::{Batch, Inputs, Targets};

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Batch,
    pub test: Batch,
    /// Token-rule only: positive keywords then negative keywords.
    pub keywords: Option<(Vec<usize>, Vec<usize>)>,
}

/// Generates the train and test splits. `seed` is used unless the spec
/// carries its own data seed.
pub fn synth_dataset(spec: &DatasetSpec, seed: u64) -> Result<Dataset> {
    if spec.train_size == 0 || spec.test_size == 0 {
        return Err(Error::config("dataset.train-size", "sizes must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.unwrap_or(seed));
    let n = spec.train_size + spec.test_size;
    let (full, keywords) = match spec.kind {
        DatasetKind::TokenRule => {
            let (b, k) = token_rule(spec, n, &mut rng)?;
            (b, Some(k))
        }
        DatasetKind::GaussianBlobs => (blobs(spec, n, &mut rng)?, None),
        DatasetKind::Regression => (regression(spec, n, &mut rng)?, None),
    };
    Ok(Dataset {
        train: full.slice(0..spec.train_size),
        test: full.slice(spec.train_size..n),
        keywords,
    })
}

fn flip<R: Rng>(label: usize, p: f64, rng: &mut R) -> usize {
    if p > 0.0 && rng.random::<f64>() < p {
        1 - label
    } else {
        label
    }
}

/// Uniform token sequences labelled by whether positive keywords outnumber
/// negative ones. Ties are redrawn, so the rule is deterministic on every
/// sample and the classes are balanced by symmetry.
fn token_rule(
    spec: &DatasetSpec,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Batch, (Vec<usize>, Vec<usize>))> {
    if spec.vocab < 2 * spec.keywords || spec.keywords == 0 || spec.seq_len == 0 {
        return Err(Error::config("dataset.keywords", "vocab must hold 2 x keywords"));
    }
    let mut vocab: Vec<usize> = (0..spec.vocab).collect();
    vocab.shuffle(rng);
    let pos = vocab[..spec.keywords].to_vec();
    let neg = vocab[spec.keywords..2 * spec.keywords].to_vec();
    let mut polarity = vec![0i32; spec.vocab];
    pos.iter().for_each(|&t| polarity[t] = 1);
    neg.iter().for_each(|&t| polarity[t] = -1);

    let mut ids = Vec::with_capacity(n * spec.seq_len);
    let mut labels = Vec::with_capacity(n);
    let mut seq = vec![0usize; spec.seq_len];
    while labels.len() < n {
        seq.iter_mut().for_each(|t| *t = rng.random_range(0..spec.vocab));
        let score: i32 = seq.iter().map(|&t| polarity[t]).sum();
        if score == 0 {
            continue;
        }
        ids.extend_from_slice(&seq);
        labels.push(flip(usize::from(score > 0), spec.label_noise, rng));
    }
    let batch = Batch::new(
        Inputs::Tokens {
            ids,
            seq_len: spec.seq_len,
        },
        Targets::Classes(labels),
    )?;
    Ok((batch, (pos, neg)))
}

fn unit_vector<R: Rng>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Two isotropic unit-variance Gaussians whose means are `separation` apart.
fn blobs(spec: &DatasetSpec, n: usize, rng: &mut ChaCha8Rng) -> Result<Batch> {
    let u = unit_vector(spec.dim, rng);
    let half = spec.separation / 2.0;
    let mut data = Vec::with_capacity(n * spec.dim);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let label = usize::from(rng.random::<bool>());
        let sign = if label == 1 { 1.0 } else { -1.0 };
        for ui in &u {
            data.push(sign * half * ui + rng.sample::<f64, _>(StandardNormal));
        }
        labels.push(flip(label, spec.label_noise, rng));
    }
    Batch::new(Inputs::Features { data, dim: spec.dim }, Targets::Classes(labels))
}

/// `y = w.x + noise` with `w` of unit norm and standard normal features.
fn regression(spec: &DatasetSpec, n: usize, rng: &mut ChaCha8Rng) -> Result<Batch> {
    let w = unit_vector(spec.dim, rng);
    let mut data = Vec::with_capacity(n * spec.dim);
    let mut values = Vec::with_capacity(n);
    for _ in 0..n {
        let x: Vec<f64> = (0..spec.dim).map(|_| rng.sample(StandardNormal)).collect();
        let y = x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()
            + spec.noise * rng.sample::<f64, _>(StandardNormal);
        data.extend(x);
        values.push(y);
    }
    Batch::new(Inputs::Features { data, dim: spec.dim }, Targets::Values(values))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: DatasetKind) -> DatasetSpec {
        DatasetSpec {
            kind,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn same_seed_same_data() {
        for kind in [DatasetKind::TokenRule, DatasetKind::GaussianBlobs, DatasetKind::Regression] {
            let a = synth_dataset(&spec(kind), 7).unwrap();
            let b = synth_dataset(&spec(kind), 7).unwrap();
            assert_eq!(a, b);
            assert_ne!(a.train, synth_dataset(&spec(kind), 8).unwrap().train);
        }
    }

    #[test]
    fn token_rule_labels_follow_the_rule_and_balance() {
        let d = synth_dataset(&spec(DatasetKind::TokenRule), 1).unwrap();
        let (pos, neg) = d.keywords.clone().unwrap();
        let (Inputs::Tokens { ids, seq_len }, Targets::Classes(labels)) = (&d.train.inputs, &d.train.targets)
        else {
            panic!("token batch expected")
        };
        for (i, &label) in labels.iter().enumerate() {
            let seq = &ids[i * seq_len..(i + 1) * seq_len];
            let p = seq.iter().filter(|t| pos.contains(t)).count();
            let q = seq.iter().filter(|t| neg.contains(t)).count();
            assert_ne!(p, q);
            assert_eq!(label, usize::from(p > q));
        }
        let ones = labels.iter().filter(|&&l| l == 1).count() as f64 / labels.len() as f64;
        assert!((ones - 0.5).abs() < 0.02, "{ones}");
    }

    #[test]
    fn explicit_data_seed_overrides_experiment_seed() {
        let s = DatasetSpec {
            seed: Some(3),
            ..spec(DatasetKind::GaussianBlobs)
        };
        assert_eq!(synth_dataset(&s, 1).unwrap(), synth_dataset(&s, 2).unwrap());
    }

    #[test]
    fn split_sizes() {
        let d = synth_dataset(&spec(DatasetKind::Regression), 0).unwrap();
        assert_eq!((d.train.len(), d.test.len()), (4096, 1024));
    }
}

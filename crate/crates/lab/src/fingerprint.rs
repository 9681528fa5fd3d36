//! Matching a leaked weight dump to a model family by per-layer statistics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum FingerprintError {
    #[error("dump has {got} layers, reference {label} has {want}")]
    Alignment { label: String, got: usize, want: usize },
    #[error("no references")]
    Empty,
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub mean: f64,
    pub std: f64,
    pub zero_fraction: f64,
}

impl LayerStats {
    pub fn of(w: &[f32]) -> Self {
        if w.is_empty() {
            return LayerStats {
                mean: 0.0,
                std: 0.0,
                zero_fraction: 0.0,
            };
        }
        let n = w.len() as f64;
        let mean = w.iter().map(|&x| x as f64).sum::<f64>() / n;
        let var = w.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
        let zeros = w.iter().filter(|&&x| x == 0.0).count() as f64;
        LayerStats {
            mean,
            std: var.sqrt(),
            zero_fraction: zeros / n,
        }
    }

    fn values(&self) -> [f64; 3] {
        [self.mean, self.std, self.zero_fraction]
    }
}

/// One reference entry as stored on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerFingerprint {
    pub label: String,
    pub layers: Vec<LayerStats>,
}

pub fn fingerprint(label: &str, dump: &[Vec<f32>]) -> LayerFingerprint {
    LayerFingerprint {
        label: label.to_string(),
        layers: dump.iter().map(|l| LayerStats::of(l)).collect(),
    }
}

/// Per-statistic mean and standard deviation over every layer of a corpus.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Normalizer {
    pub fn fit(refs: &[LayerFingerprint]) -> Self {
        let all: Vec<[f64; 3]> = refs.iter().flat_map(|r| r.layers.iter().map(LayerStats::values)).collect();
        let n = all.len().max(1) as f64;
        let mut mean = [0.0; 3];
        let mut std = [0.0; 3];
        for s in 0..3 {
            mean[s] = all.iter().map(|v| v[s]).sum::<f64>() / n;
            let var = all.iter().map(|v| (v[s] - mean[s]).powi(2)).sum::<f64>() / n;
            std[s] = if var > 0.0 { var.sqrt() } else { 1.0 };
        }
        Normalizer { mean, std }
    }

    /// Concatenated z-scores, layer by layer.
    pub fn vector(&self, fp: &LayerFingerprint) -> Vec<f64> {
        fp.layers
            .iter()
            .flat_map(|l| {
                let v = l.values();
                (0..3).map(move |s| (v[s] - self.mean[s]) / self.std[s])
            })
            .collect()
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Index of the most similar vector; the first one wins ties.
pub fn argmax_cosine(query: &[f64], refs: &[Vec<f64>]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, r) in refs.iter().enumerate() {
        let s = cosine(query, r);
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    best.map(|(i, _)| i)
}

/// A set of reference fingerprints with the normalizer fitted to them.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub references: Vec<LayerFingerprint>,
    pub normalizer: Normalizer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub label: String,
    pub score: f64,
    pub scores: Vec<(String, f64)>,
}

impl Corpus {
    pub fn new(references: Vec<LayerFingerprint>) -> Result<Self, FingerprintError> {
        if references.is_empty() {
            return Err(FingerprintError::Empty);
        }
        let normalizer = Normalizer::fit(&references);
        Ok(Corpus { references, normalizer })
    }

    pub fn from_json(s: &str) -> Result<Self, Box<dyn std::error::Error>> {
        Ok(Corpus::new(serde_json::from_str(s)?)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.references).expect("serializable")
    }

    fn check(&self, fp: &LayerFingerprint, r: &LayerFingerprint) -> Result<(), FingerprintError> {
        if fp.layers.len() != r.layers.len() {
            return Err(FingerprintError::Alignment {
                label: r.label.clone(),
                got: fp.layers.len(),
                want: r.layers.len(),
            });
        }
        Ok(())
    }

    pub fn similarity(&self, a: &LayerFingerprint, b: &LayerFingerprint) -> Result<f64, FingerprintError> {
        self.check(a, b)?;
        Ok(cosine(&self.normalizer.vector(a), &self.normalizer.vector(b)))
    }

    pub fn identify(&self, dump: &LayerFingerprint) -> Result<Match, FingerprintError> {
        let q = self.normalizer.vector(dump);
        let mut scores = Vec::with_capacity(self.references.len());
        let mut vectors = Vec::with_capacity(self.references.len());
        for r in &self.references {
            self.check(dump, r)?;
            let v = self.normalizer.vector(r);
            scores.push((r.label.clone(), cosine(&q, &v)));
            vectors.push(v);
        }
        let i = argmax_cosine(&q, &vectors).expect("non-empty");
        Ok(Match {
            label: scores[i].0.clone(),
            score: scores[i].1,
            scores,
        })
    }
}

/// Weight tensors of a synthetic model: per layer, a fraction of exact
/// zeros and normal weights with layer-specific mean and spread.
pub fn synth_family(layers: usize, weights: usize, seed: u64) -> Vec<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..layers)
        .map(|_| {
            let mu = rng.gen_range(-0.05..0.05);
            let sigma = rng.gen_range(0.01..0.2);
            let zeros = rng.gen_range(0.0..0.4);
            let dist = Normal::new(mu, sigma).expect("finite");
            (0..weights)
                .map(|_| if rng.gen_bool(zeros) { 0.0 } else { dist.sample(&mut rng) as f32 })
                .collect()
        })
        .collect()
}

/// Multiplies every weight by `1 + ε`, ε ~ N(0, `relative`).
pub fn perturb(dump: &[Vec<f32>], relative: f64, seed: u64) -> Vec<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, relative).expect("finite");
    dump.iter()
        .map(|l| l.iter().map(|&w| w * (1.0 + noise.sample(&mut rng)) as f32).collect())
        .collect()
}

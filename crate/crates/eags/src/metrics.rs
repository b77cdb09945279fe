//! Quality/diversity metrics that need no external models: n-gram Vendi
//! score (eigenvalues of a normalized cosine-similarity matrix), self-BLEU,
//! distinct-n, and per-step trace summaries.

use crate::error::{Error, Result};
use crate::sampler::GenerationTrace;
use std::collections::HashMap;

fn ngram_counts(sample: &[usize], n: usize) -> HashMap<Vec<usize>, f64> {
    let mut counts = HashMap::new();
    for gram in sample.windows(n) {
        *counts.entry(gram.to_vec()).or_insert(0.0) += 1.0;
    }
    counts
}

fn cosine(a: &HashMap<Vec<usize>, f64>, b: &HashMap<Vec<usize>, f64>) -> f64 {
    let dot: f64 = a
        .iter()
        .filter_map(|(g, &x)| b.get(g).map(|&y| x * y))
        .sum();
    let na: f64 = a.values().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.values().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Eigenvalues of a symmetric k x k matrix by cyclic Jacobi rotations.
pub fn symmetric_eigenvalues(mut m: Vec<f64>, k: usize) -> Vec<f64> {
    assert_eq!(m.len(), k * k);
    for _sweep in 0..200 {
        let mut off = 0.0f64;
        for p in 0..k {
            for q in (p + 1)..k {
                off = off.max(m[p * k + q].abs());
            }
        }
        if off < 1e-13 {
            break;
        }
        for p in 0..k {
            for q in (p + 1)..k {
                let apq = m[p * k + q];
                if apq.abs() < 1e-15 {
                    continue;
                }
                let app = m[p * k + p];
                let aqq = m[q * k + q];
                let theta = 0.5 * (aqq - app) / apq;
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for i in 0..k {
                    let aip = m[i * k + p];
                    let aiq = m[i * k + q];
                    m[i * k + p] = c * aip - s * aiq;
                    m[i * k + q] = s * aip + c * aiq;
                }
                for i in 0..k {
                    let api = m[p * k + i];
                    let aqi = m[q * k + i];
                    m[p * k + i] = c * api - s * aqi;
                    m[q * k + i] = s * api + c * aqi;
                }
            }
        }
    }
    (0..k).map(|i| m[i * k + i]).collect()
}

/// Vendi score over n-grams of order `n`: the exponential entropy of the
/// eigenvalues of K/k, where K is the pairwise cosine-similarity matrix
/// of L2-normalized n-gram count vectors. Lies in [1, k].
pub fn vendi_ngram(samples: &[Vec<usize>], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidOp {
            op: "vendi_ngram",
            details: "n must be >= 1".into(),
        });
    }
    if samples.is_empty() {
        return Err(Error::InvalidOp {
            op: "vendi_ngram",
            details: "empty sample set".into(),
        });
    }
    for (i, s) in samples.iter().enumerate() {
        if s.len() < n {
            return Err(Error::InvalidOp {
                op: "vendi_ngram",
                details: format!("sample {i} has {} tokens, fewer than n={n}", s.len()),
            });
        }
    }
    let vectors: Vec<_> = samples.iter().map(|s| ngram_counts(s, n)).collect();
    vendi_from_vectors(&vectors)
}

/// Vendi score over concatenated 1- and 2-gram count vectors; the default
/// kernel for reports.
pub fn vendi_ngram_12(samples: &[Vec<usize>]) -> Result<f64> {
    if samples.iter().any(|s| s.len() < 2) {
        return vendi_ngram(samples, 1);
    }
    let vectors: Vec<HashMap<Vec<usize>, f64>> = samples
        .iter()
        .map(|s| {
            let mut v = HashMap::new();
            for n in 1..=2usize {
                for gram in s.windows(n) {
                    // tag the order so 1-grams and 2-grams never collide
                    let mut key = vec![n];
                    key.extend_from_slice(gram);
                    *v.entry(key).or_insert(0.0) += 1.0;
                }
            }
            v
        })
        .collect();
    vendi_from_vectors(&vectors)
}

fn vendi_from_vectors(vectors: &[HashMap<Vec<usize>, f64>]) -> Result<f64> {
    let k = vectors.len();
    let mut kernel = vec![0.0; k * k];
    for i in 0..k {
        for j in i..k {
            let sim = if i == j {
                1.0
            } else {
                cosine(&vectors[i], &vectors[j])
            };
            kernel[i * k + j] = sim / k as f64;
            kernel[j * k + i] = sim / k as f64;
        }
    }
    let eigs = symmetric_eigenvalues(kernel, k);
    let sum: f64 = eigs.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Invariant(format!(
            "kernel eigenvalues sum to {sum}, expected 1"
        )));
    }
    let mut entropy = 0.0;
    for &lam in &eigs {
        if lam < -1e-9 {
            return Err(Error::Invariant(format!("negative eigenvalue {lam}")));
        }
        if lam > 0.0 {
            entropy -= lam * lam.ln();
        }
    }
    Ok(entropy.exp())
}

/// BLEU of `candidate` against `references`: geometric mean of modified
/// n-gram precisions up to `max_n`, no smoothing, with the standard
/// closest-length brevity penalty.
pub fn bleu(candidate: &[usize], references: &[&[usize]], max_n: usize) -> f64 {
    if candidate.is_empty() || references.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let cand = ngram_counts(candidate, n);
        let total: f64 = cand.values().sum();
        if total == 0.0 {
            return 0.0;
        }
        let mut clipped = 0.0;
        for (gram, &count) in &cand {
            let max_ref = references
                .iter()
                .map(|r| *ngram_counts(r, n).get(gram).unwrap_or(&0.0))
                .fold(0.0f64, f64::max);
            clipped += count.min(max_ref);
        }
        if clipped == 0.0 {
            return 0.0;
        }
        log_sum += (clipped / total).ln() / max_n as f64;
    }
    let c = candidate.len() as f64;
    let r = references
        .iter()
        .map(|r| r.len())
        .min_by_key(|&rl| {
            let diff = (rl as i64 - candidate.len() as i64).abs();
            (diff, rl)
        })
        .unwrap() as f64;
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    bp * log_sum.exp()
}

/// Mean BLEU of each sample against all others. High values mean the set
/// is self-similar (low diversity).
pub fn self_bleu(samples: &[Vec<usize>], max_n: usize) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::InvalidOp {
            op: "self_bleu",
            details: "need at least 2 samples".into(),
        });
    }
    let mut total = 0.0;
    for (i, cand) in samples.iter().enumerate() {
        let refs: Vec<&[usize]> = samples
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, s)| s.as_slice())
            .collect();
        total += bleu(cand, &refs, max_n);
    }
    Ok(total / samples.len() as f64)
}

/// Unique n-grams over total n-grams, pooled across the whole set.
pub fn distinct_n(samples: &[Vec<usize>], n: usize) -> Result<f64> {
    let mut unique = std::collections::HashSet::new();
    let mut total = 0usize;
    for s in samples {
        for gram in s.windows(n) {
            unique.insert(gram.to_vec());
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::InvalidOp {
            op: "distinct_n",
            details: format!("no n-grams of order {n} in the set"),
        });
    }
    Ok(unique.len() as f64 / total as f64)
}

/// Per-step aggregate of a batch of traces sharing the same step count.
#[derive(Debug, Clone)]
pub struct StepSummary {
    pub t: usize,
    pub mean_entropy: f64,
    pub std_entropy: f64,
    pub mean_energy: f64,
    pub std_energy: f64,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Means and standard deviations of total entropy/energy per step across
/// traces, plus a terminal `t = 0` row from the finished sequences.
pub fn summarize_traces(traces: &[GenerationTrace]) -> Result<Vec<StepSummary>> {
    if traces.is_empty() {
        return Err(Error::InvalidOp {
            op: "summarize_traces",
            details: "no traces".into(),
        });
    }
    let t_labels: Vec<usize> = traces[0].steps.iter().map(|s| s.t).collect();
    for tr in traces {
        let labels: Vec<usize> = tr.steps.iter().map(|s| s.t).collect();
        if labels != t_labels {
            return Err(Error::InvalidOp {
                op: "summarize_traces",
                details: "traces have mixed step schedules".into(),
            });
        }
    }
    let mut rows = Vec::with_capacity(t_labels.len() + 1);
    for (i, &t) in t_labels.iter().enumerate() {
        let entropies: Vec<f64> = traces.iter().map(|tr| tr.steps[i].total_entropy).collect();
        let energies: Vec<f64> = traces.iter().map(|tr| tr.steps[i].total_energy).collect();
        let (me, se) = mean_std(&entropies);
        let (mg, sg) = mean_std(&energies);
        rows.push(StepSummary {
            t,
            mean_entropy: me,
            std_entropy: se,
            mean_energy: mg,
            std_energy: sg,
        });
    }
    let entropies: Vec<f64> = traces.iter().map(|tr| tr.final_entropy).collect();
    let energies: Vec<f64> = traces.iter().map(|tr| tr.final_energy).collect();
    let (me, se) = mean_std(&entropies);
    let (mg, sg) = mean_std(&energies);
    rows.push(StepSummary {
        t: 0,
        mean_entropy: me,
        std_entropy: se,
        mean_energy: mg,
        std_energy: sg,
    });
    Ok(rows)
}

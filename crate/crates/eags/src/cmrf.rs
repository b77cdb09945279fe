//! The conditional-MRF view of the MLM: log-potentials, sequence energy,
//! and per-position entropy with top-k selection.
//!
//! The log-potential at position `l` is the raw logit of the actual token
//! there, computed with position `l` replaced by MASK in the input (the
//! pseudo-likelihood convention). Sequence energy is the negative sum of
//! log-potentials over included positions. An approximate single-pass
//! energy (no per-position re-masking) is provided for generation traces.

use crate::corpus::{TokenSeq, MASK, PAD};
use crate::error::{Error, Result};
use crate::model::{self, ModelParams};

/// Energy decomposition of a sequence state.
#[derive(Debug, Clone)]
pub struct EnergyReport {
    /// Positions (absolute indices) whose log-potential was evaluated.
    pub included: Vec<usize>,
    /// Log-potential per included position, parallel to `included`.
    pub per_position_log_potential: Vec<f64>,
    pub total_energy: f64,
    pub timestep: usize,
}

/// Per-position entropies over the target region plus the selected set.
#[derive(Debug, Clone)]
pub struct EntropyProfile {
    /// Entropy in nats, indexed by target-region offset (`pos - x_start`).
    /// Ineligible positions hold 0.
    pub entropy: Vec<f64>,
    /// Selected absolute positions, highest entropy first (ties broken by
    /// lowest index).
    pub selected: Vec<usize>,
    /// Entropy of the last selected position.
    pub threshold: f64,
    /// True when `top_k` exceeded the eligible count and was clamped.
    pub clamped: bool,
}

/// Raw logit of the true token at `position`, with that position masked in
/// the forward pass.
pub fn log_potential(params: &ModelParams, seq: &TokenSeq, position: usize) -> Result<f64> {
    if position < seq.x_start || position >= seq.len() {
        return Err(Error::InvalidOp {
            op: "log_potential",
            details: format!("position {position} outside target region"),
        });
    }
    let token = seq.ids[position];
    if token == MASK || token == PAD {
        return Err(Error::InvalidOp {
            op: "log_potential",
            details: format!("position {position} holds a non-content token"),
        });
    }
    let mut masked = seq.clone();
    masked.ids[position] = MASK;
    let v = params.config.vocab_size;
    let all = model::logits(params, &masked)?;
    Ok(all[position * v + token])
}

/// Exact sequence energy: one masked forward pass per content position.
/// With `skip_masked` false, any MASK in the target region is an error;
/// with it true, masked positions are simply excluded (mid-generation
/// states).
pub fn sequence_energy(params: &ModelParams, seq: &TokenSeq, skip_masked: bool) -> Result<EnergyReport> {
    let mut included = Vec::new();
    for pos in seq.x_start..seq.len() {
        match seq.ids[pos] {
            PAD => {}
            MASK if skip_masked => {}
            MASK => {
                return Err(Error::InvalidOp {
                    op: "sequence_energy",
                    details: format!("MASK at position {pos}; pass skip_masked to allow"),
                })
            }
            _ => included.push(pos),
        }
    }
    let mut potentials = Vec::with_capacity(included.len());
    for &pos in &included {
        potentials.push(log_potential(params, seq, pos)?);
    }
    let total_energy = -potentials.iter().sum::<f64>();
    Ok(EnergyReport {
        included,
        per_position_log_potential: potentials,
        total_energy,
        timestep: seq.timestep,
    })
}

/// Approximate energy from one unmasked forward pass: the log-potential at
/// each content position is read off the full-context logits without
/// re-masking that position. Cheap; used for traces only.
pub fn approx_sequence_energy(params: &ModelParams, seq: &TokenSeq) -> Result<EnergyReport> {
    let v = params.config.vocab_size;
    let all = model::logits(params, seq)?;
    let mut included = Vec::new();
    let mut potentials = Vec::new();
    for pos in seq.x_start..seq.len() {
        let token = seq.ids[pos];
        if token == MASK || token == PAD {
            continue;
        }
        included.push(pos);
        potentials.push(all[pos * v + token]);
    }
    let total_energy = -potentials.iter().sum::<f64>();
    Ok(EnergyReport {
        included,
        per_position_log_potential: potentials,
        total_energy,
        timestep: seq.timestep,
    })
}

/// Entropies from an already-computed logit matrix (`rows = seq.len()`).
/// `eligible` holds absolute positions; `top_k` is clamped to its size.
pub fn entropy_profile_from_logits(
    all_logits: &[f64],
    seq: &TokenSeq,
    eligible: &[usize],
    top_k: usize,
    vocab_size: usize,
) -> Result<EntropyProfile> {
    if eligible.is_empty() {
        return Err(Error::InvalidOp {
            op: "entropy_profile",
            details: "eligible set is empty".into(),
        });
    }
    if top_k == 0 {
        return Err(Error::InvalidOp {
            op: "entropy_profile",
            details: "top_k must be >= 1".into(),
        });
    }
    let mut entropy = vec![0.0; seq.target_len()];
    let mut ranked: Vec<(usize, f64)> = Vec::with_capacity(eligible.len());
    for &pos in eligible {
        if pos < seq.x_start || pos >= seq.len() {
            return Err(Error::InvalidOp {
                op: "entropy_profile",
                details: format!("eligible position {pos} outside target region"),
            });
        }
        let row = &all_logits[pos * vocab_size..(pos + 1) * vocab_size];
        let probs = model::content_distribution(row, 1.0)?;
        let h = model::distribution_entropy(&probs);
        entropy[pos - seq.x_start] = h;
        ranked.push((pos, h));
    }
    // entropy descending, ties by lowest position
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let clamped = top_k > ranked.len();
    let k = top_k.min(ranked.len());
    let selected: Vec<usize> = ranked[..k].iter().map(|&(p, _)| p).collect();
    let threshold = ranked[k - 1].1;
    Ok(EntropyProfile {
        entropy,
        selected,
        threshold,
        clamped,
    })
}

/// Entropy profile with its own forward pass.
pub fn entropy_profile(
    params: &ModelParams,
    seq: &TokenSeq,
    eligible: &[usize],
    top_k: usize,
) -> Result<EntropyProfile> {
    let all = model::logits(params, seq)?;
    entropy_profile_from_logits(&all, seq, eligible, top_k, params.config.vocab_size)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{encode_pair, Granularity, Vocab};
    use crate::model::{pretrain_mlm, ModelConfig, ModelParams};

    fn tiny_config(vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_ff: 24,
            max_positions: 16,
            dropout: 0.0,
        }
    }

    #[test]
    fn zero_weight_energy_is_zero() {
        let params = ModelParams::zeros(tiny_config(10), Granularity::Word).unwrap();
        let seq = TokenSeq::from_pair(&[4], &[5, 6], 2);
        let report = sequence_energy(&params, &seq, false).unwrap();
        assert_eq!(report.total_energy, 0.0);
        assert_eq!(report.included, vec![2, 3]);
    }

    #[test]
    fn energy_additivity_and_exp_identity() {
        let params = ModelParams::init(tiny_config(10), Granularity::Word, 2).unwrap();
        let seq = TokenSeq::from_pair(&[4], &[5, 6, 7], 3);
        let report = sequence_energy(&params, &seq, false).unwrap();
        let recomputed: f64 = (seq.x_start..seq.len())
            .map(|p| log_potential(&params, &seq, p).unwrap())
            .sum();
        assert!((report.total_energy + recomputed).abs() < 1e-9);
        // exp(-E) == prod exp(log phi)
        let prod: f64 = report
            .per_position_log_potential
            .iter()
            .map(|lp| lp.exp())
            .product();
        let rel = ((-report.total_energy).exp() - prod).abs() / prod.abs().max(1e-300);
        assert!(rel < 1e-9);
    }

    #[test]
    fn log_potential_rejects_bad_positions() {
        let params = ModelParams::zeros(tiny_config(10), Granularity::Word).unwrap();
        let mut seq = TokenSeq::from_pair(&[4], &[5, 6], 3);
        assert!(log_potential(&params, &seq, 0).is_err()); // condition region
        assert!(log_potential(&params, &seq, 4).is_err()); // PAD
        seq.ids[2] = MASK;
        seq.is_fixed[2] = false;
        assert!(log_potential(&params, &seq, 2).is_err()); // MASK
    }

    #[test]
    fn sequence_energy_mask_handling() {
        let params = ModelParams::zeros(tiny_config(10), Granularity::Word).unwrap();
        let mut seq = TokenSeq::from_pair(&[4], &[5, 6], 2);
        seq.ids[3] = MASK;
        seq.is_fixed[3] = false;
        assert!(sequence_energy(&params, &seq, false).is_err());
        let report = sequence_energy(&params, &seq, true).unwrap();
        assert_eq!(report.included, vec![2]);
    }

    #[test]
    fn trained_model_prefers_seen_token() {
        let lines: Vec<String> = vec!["a b".into(), "a c".into()];
        let vocab = Vocab::build(&lines, Granularity::Word, 1).unwrap();
        // target is always "b" given condition "a"
        let pairs = vec![encode_pair("a", "b", &vocab, 1, 1).unwrap()];
        let mut params =
            ModelParams::init(tiny_config(vocab.len()), Granularity::Word, 1).unwrap();
        pretrain_mlm(&mut params, &pairs, 1, 0.9, 60, 0.05, 1, 1).unwrap();

        let seq_b = TokenSeq::from_pair(&[vocab.id("a")], &[vocab.id("b")], 1);
        let seq_c = TokenSeq::from_pair(&[vocab.id("a")], &[vocab.id("c")], 1);
        let lp_b = log_potential(&params, &seq_b, 2).unwrap();
        let lp_c = log_potential(&params, &seq_c, 2).unwrap();
        assert!(lp_b > lp_c, "lp_b={lp_b} lp_c={lp_c}");
        let e_b = sequence_energy(&params, &seq_b, false).unwrap().total_energy;
        let e_c = sequence_energy(&params, &seq_c, false).unwrap().total_energy;
        assert!(e_b < e_c);
    }

    #[test]
    fn uniform_entropies_tie_break_by_index() {
        // zero weights -> uniform content distribution everywhere
        let params = ModelParams::zeros(tiny_config(8), Granularity::Word).unwrap(); // 4 content tokens
        let seq = TokenSeq::masked(&[4], 4);
        let eligible: Vec<usize> = (seq.x_start..seq.len()).collect();
        let profile = entropy_profile(&params, &seq, &eligible, 2).unwrap();
        let ln4 = 4.0f64.ln();
        for &h in &profile.entropy {
            assert!((h - ln4).abs() < 1e-9);
        }
        assert_eq!(profile.selected, vec![2, 3]); // lowest indices win ties
        assert!((profile.threshold - ln4).abs() < 1e-9);
    }

    #[test]
    fn hand_ranked_selection() {
        // feed synthetic logits directly: entropies [0.1-ish, high, mid]
        // construct rows whose content distributions have known entropies
        let params = ModelParams::zeros(tiny_config(8), Granularity::Word).unwrap();
        let seq = TokenSeq::masked(&[4], 3);
        let v = params.config.vocab_size;
        let mut logits = vec![0.0; seq.len() * v];
        // position x_start+0: near one-hot -> low entropy
        logits[seq.x_start * v + 4] = 20.0;
        // position x_start+1: uniform -> ln 4, highest
        // position x_start+2: two-way split -> ln 2
        logits[(seq.x_start + 2) * v + 4] = 20.0;
        logits[(seq.x_start + 2) * v + 5] = 20.0;
        let eligible: Vec<usize> = (seq.x_start..seq.len()).collect();
        let p = entropy_profile_from_logits(&logits, &seq, &eligible, 2, v).unwrap();
        assert_eq!(p.selected, vec![seq.x_start + 1, seq.x_start + 2]);
        assert!((p.threshold - 2.0f64.ln()).abs() < 1e-6);
        // threshold property: selected >= tau, unselected <= tau
        for &pos in &p.selected {
            assert!(p.entropy[pos - seq.x_start] >= p.threshold - 1e-12);
        }
        assert!(p.entropy[0] <= p.threshold);
    }

    #[test]
    fn top_k_clamps() {
        let params = ModelParams::zeros(tiny_config(8), Granularity::Word).unwrap();
        let seq = TokenSeq::masked(&[4], 2);
        let eligible: Vec<usize> = (seq.x_start..seq.len()).collect();
        let p = entropy_profile(&params, &seq, &eligible, 10).unwrap();
        assert!(p.clamped);
        assert_eq!(p.selected.len(), 2);
        assert!(entropy_profile(&params, &seq, &[], 1).is_err());
    }

    #[test]
    fn entropy_bounds() {
        let params = ModelParams::init(tiny_config(12), Granularity::Word, 17).unwrap();
        let seq = TokenSeq::masked(&[4, 5], 6);
        let eligible: Vec<usize> = (seq.x_start..seq.len()).collect();
        let p = entropy_profile(&params, &seq, &eligible, 3).unwrap();
        let max_h = ((params.config.vocab_size - crate::corpus::NUM_SPECIALS) as f64).ln();
        for &h in &p.entropy {
            assert!(h >= 0.0 && h <= max_h + 1e-12);
        }
    }
}

//! Entropy-adaptive Gibbs sampling inference: start from a fully masked
//! target, repeatedly select the highest-entropy masked positions, sample
//! them from the model's conditional distribution, and fix them for all
//! later steps. Ablation modes replace the selection rule; best-of-N
//! keeps the lowest pseudo-perplexity candidates.

use crate::cmrf;
use crate::corpus::{TokenSeq, Vocab, MASK, PAD};
use crate::error::{Error, Result};
use crate::model::{self, ModelParams};
use crate::schedule::quotas;
use crate::stream_rng;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eags,
    RandomOrder,
    LowestEntropyFirst,
    OneShot,
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "eags" => Ok(Mode::Eags),
            "random_order" => Ok(Mode::RandomOrder),
            "lowest_entropy_first" => Ok(Mode::LowestEntropyFirst),
            "one_shot" => Ok(Mode::OneShot),
            _ => Err(Error::Config(format!("unknown mode {s}"))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Mode::Eags => "eags",
            Mode::RandomOrder => "random_order",
            Mode::LowestEntropyFirst => "lowest_entropy_first",
            Mode::OneShot => "one_shot",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone)]
pub struct SampleConfig {
    pub t_steps: usize,
    pub target_len: usize,
    pub temperature: f64,
    pub n_candidates: usize,
    pub n_keep: usize,
    pub mode: Mode,
    pub seed: u64,
    /// Argmax decoding instead of categorical sampling.
    pub greedy: bool,
    /// Run candidate chains on the rayon pool. Outputs are identical to
    /// serial execution because each chain's RNG depends only on
    /// (seed, candidate index).
    pub parallel: bool,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            t_steps: 5,
            target_len: 12,
            temperature: 1.0,
            n_candidates: 20,
            n_keep: 5,
            mode: Mode::Eags,
            seed: 0,
            greedy: false,
            parallel: false,
        }
    }
}

impl SampleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.target_len == 0 {
            return Err(Error::Config("L must be >= 1".into()));
        }
        if self.t_steps == 0 {
            return Err(Error::Config("T must be >= 1".into()));
        }
        if self.n_keep > self.n_candidates {
            return Err(Error::Config(format!(
                "n_keep {} exceeds n_candidates {}",
                self.n_keep, self.n_candidates
            )));
        }
        if self.temperature <= 0.0 {
            return Err(Error::Config(format!(
                "temperature {} must be > 0",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// One reverse step of one chain.
#[derive(Debug, Clone)]
pub struct TraceStep {
    pub t: usize,
    /// Positions selected this step (absolute indices).
    pub selected: Vec<usize>,
    /// Token ids sampled at those positions.
    pub sampled: Vec<usize>,
    /// Sum of entropies over all content-eligible target positions,
    /// measured before sampling.
    pub total_entropy: f64,
    /// Exact pseudo-likelihood energy of the provisional full sequence (masked slots
    /// filled with their current argmax) before sampling.
    pub total_energy: f64,
    /// Masked positions remaining after the step.
    pub n_masked: usize,
}

#[derive(Debug, Clone)]
pub struct GenerationTrace {
    pub candidate: usize,
    pub steps: Vec<TraceStep>,
    pub final_seq: TokenSeq,
    /// Entropy/energy of the finished sequence (trace terminal point).
    pub final_entropy: f64,
    pub final_energy: f64,
    pub pseudo_ppl: f64,
}

impl GenerationTrace {
    pub fn final_text(&self, vocab: &Vocab) -> String {
        let ids: Vec<usize> = self
            .final_seq
            .target_ids()
            .iter()
            .copied()
            .filter(|&id| id != PAD)
            .collect();
        vocab.decode(&ids)
    }
}

/// A keyword constraint: tokens pre-placed at consecutive target offsets.
#[derive(Debug, Clone)]
pub struct KeywordSpan {
    /// Offset into the target region, 0-based.
    pub offset: usize,
    pub tokens: Vec<usize>,
}

fn seed_keywords(seq: &mut TokenSeq, spans: &[KeywordSpan]) -> Result<()> {
    let len = seq.target_len();
    let mut occupied = vec![false; len];
    for span in spans {
        if span.tokens.is_empty() {
            return Err(Error::Config("empty keyword span".into()));
        }
        let end = span.offset + span.tokens.len();
        if end > len {
            return Err(Error::Config(format!(
                "keyword span {}..{end} exceeds target length {len}",
                span.offset
            )));
        }
        for (k, &tok) in span.tokens.iter().enumerate() {
            let off = span.offset + k;
            if occupied[off] {
                return Err(Error::Config(format!(
                    "overlapping keyword spans at offset {off}"
                )));
            }
            occupied[off] = true;
            seq.ids[seq.x_start + off] = tok;
            seq.is_fixed[seq.x_start + off] = true;
        }
    }
    Ok(())
}

/// Exp of the mean per-position NLL with each content position masked in
/// turn; the in-project substitute for external-LM perplexity.
pub fn pseudo_perplexity(params: &ModelParams, seq: &TokenSeq) -> Result<f64> {
    if !seq.masked_positions().is_empty() {
        return Err(Error::InvalidOp {
            op: "pseudo_perplexity",
            details: "sequence still contains MASK".into(),
        });
    }
    let v = params.config.vocab_size;
    let positions = seq.content_positions();
    if positions.is_empty() {
        return Err(Error::InvalidOp {
            op: "pseudo_perplexity",
            details: "no content positions".into(),
        });
    }
    let mut nll = 0.0;
    for &pos in &positions {
        let mut masked = seq.clone();
        let token = masked.ids[pos];
        masked.ids[pos] = MASK;
        masked.is_fixed[pos] = false;
        let all = model::logits(params, &masked)?;
        let probs = model::content_distribution(&all[pos * v..(pos + 1) * v], 1.0)?;
        nll -= probs[token].max(1e-300).ln();
    }
    Ok((nll / positions.len() as f64).exp())
}

/// Pseudo-likelihood entropy of a chain state: every non-PAD X position
/// contributes the entropy of its conditional with that position masked.
/// Already-masked positions read straight off `state_logits` (one shared
/// pass); revealed positions get their own re-masked pass so the model is
/// always queried at a [MASK] slot, the only place its head is trained.
fn state_entropy(params: &ModelParams, seq: &TokenSeq, state_logits: &[f64]) -> Result<f64> {
    let v = params.config.vocab_size;
    let mut total = 0.0;
    for pos in seq.x_start..seq.len() {
        if seq.ids[pos] == PAD {
            continue;
        }
        let probs = if seq.ids[pos] == MASK {
            model::content_distribution(&state_logits[pos * v..(pos + 1) * v], 1.0)?
        } else {
            let mut masked = seq.clone();
            masked.ids[pos] = MASK;
            masked.is_fixed[pos] = false;
            let all = model::logits(params, &masked)?;
            model::content_distribution(&all[pos * v..(pos + 1) * v], 1.0)?
        };
        total += model::distribution_entropy(&probs);
    }
    Ok(total)
}

fn sample_from(probs: &[f64], rng: &mut impl Rng) -> usize {
    let mut dart: f64 = rng.gen::<f64>() * probs.iter().sum::<f64>();
    for (i, &p) in probs.iter().enumerate() {
        dart -= p;
        if dart <= 0.0 && p > 0.0 {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

fn argmax(probs: &[f64]) -> usize {
    probs
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .unwrap()
        .0
}

fn run_chain(
    params: &ModelParams,
    condition: &[usize],
    spans: &[KeywordSpan],
    cfg: &SampleConfig,
    candidate: usize,
) -> Result<GenerationTrace> {
    let v = params.config.vocab_size;
    let mut rng = stream_rng(cfg.seed, &format!("candidate_{candidate}"));
    let mut seq = TokenSeq::masked(condition, cfg.target_len);
    seed_keywords(&mut seq, spans)?;

    let n_initial = seq.masked_positions().len();
    // per-step reveal quotas mirror the forward schedule: reverse step t
    // consumes the block the forward process masked at step t
    let step_quota = quotas(n_initial, cfg.t_steps);
    let mut steps = Vec::new();

    let mut t = cfg.t_steps;
    while t >= 1 {
        let masked = seq.masked_positions();
        if masked.is_empty() {
            break;
        }
        let quota = match cfg.mode {
            Mode::OneShot => masked.len(),
            _ => step_quota[t - 1],
        };
        if quota == 0 {
            t -= 1;
            continue;
        }
        seq.timestep = t;
        let all = model::logits(params, &seq)?;

        // trace instrumentation on the pre-sampling state
        let total_entropy = state_entropy(params, &seq, &all)?;
        // complete the masked slots the same way a one-shot decoder would
        // (independent draws from the current conditionals); refinement
        // should drive the exact pseudo-likelihood energy of this
        // completion down as real context accumulates. Dedicated RNG
        // stream so instrumentation never perturbs the chain.
        let mut trace_rng = stream_rng(cfg.seed, &format!("trace_{candidate}_{t}"));
        let mut provisional = seq.clone();
        for &pos in &masked {
            // temperature 1: the model's unmodified belief about this state
            let probs = model::content_distribution(&all[pos * v..(pos + 1) * v], 1.0)?;
            provisional.ids[pos] = if cfg.greedy {
                argmax(&probs)
            } else {
                sample_from(&probs, &mut trace_rng)
            };
            provisional.is_fixed[pos] = true;
        }
        let total_energy = cmrf::sequence_energy(params, &provisional, false)?.total_energy;

        let selected: Vec<usize> = match cfg.mode {
            Mode::Eags | Mode::OneShot => {
                cmrf::entropy_profile_from_logits(&all, &seq, &masked, quota, v)?.selected
            }
            Mode::LowestEntropyFirst => {
                let profile =
                    cmrf::entropy_profile_from_logits(&all, &seq, &masked, masked.len(), v)?;
                let mut ranked: Vec<(usize, f64)> = masked
                    .iter()
                    .map(|&p| (p, profile.entropy[p - seq.x_start]))
                    .collect();
                ranked.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
                ranked[..quota.min(ranked.len())]
                    .iter()
                    .map(|&(p, _)| p)
                    .collect()
            }
            Mode::RandomOrder => {
                let mut pool = masked.clone();
                pool.shuffle(&mut rng);
                pool.truncate(quota);
                pool.sort_unstable();
                pool
            }
        };

        let mut sampled = Vec::with_capacity(selected.len());
        for &pos in &selected {
            let probs =
                model::content_distribution(&all[pos * v..(pos + 1) * v], cfg.temperature)?;
            let tok = if cfg.greedy {
                argmax(&probs)
            } else {
                sample_from(&probs, &mut rng)
            };
            seq.ids[pos] = tok;
            seq.is_fixed[pos] = true;
            sampled.push(tok);
        }
        let n_masked = seq.masked_positions().len();
        steps.push(TraceStep {
            t,
            selected,
            sampled,
            total_entropy,
            total_energy,
            n_masked,
        });
        if cfg.mode == Mode::OneShot {
            break;
        }
        t -= 1;
    }

    seq.timestep = 0;
    let all = model::logits(params, &seq)?;
    let has_content = (seq.x_start..seq.len()).any(|p| seq.ids[p] != PAD);
    let (final_entropy, final_energy) = if has_content {
        (
            state_entropy(params, &seq, &all)?,
            cmrf::sequence_energy(params, &seq, false)?.total_energy,
        )
    } else {
        (0.0, 0.0)
    };
    let pseudo_ppl = pseudo_perplexity(params, &seq)?;
    Ok(GenerationTrace {
        candidate,
        steps,
        final_seq: seq,
        final_entropy,
        final_energy,
        pseudo_ppl,
    })
}

/// Runs all `n_candidates` chains and returns every trace in candidate
/// order (no best-of-N selection).
pub fn generate_all(
    params: &ModelParams,
    condition: &[usize],
    spans: &[KeywordSpan],
    cfg: &SampleConfig,
) -> Result<Vec<GenerationTrace>> {
    cfg.validate()?;
    // fail fast on bad keyword specs before spawning chains
    let mut probe = TokenSeq::masked(condition, cfg.target_len);
    seed_keywords(&mut probe, spans)?;

    if cfg.parallel {
        (0..cfg.n_candidates)
            .into_par_iter()
            .map(|i| run_chain(params, condition, spans, cfg, i))
            .collect()
    } else {
        (0..cfg.n_candidates)
            .map(|i| run_chain(params, condition, spans, cfg, i))
            .collect()
    }
}

/// Sorts traces by pseudo-perplexity ascending (ties: candidate index) and
/// keeps the first `n_keep`.
pub fn select_best(mut traces: Vec<GenerationTrace>, n_keep: usize) -> Vec<GenerationTrace> {
    traces.sort_by(|a, b| {
        a.pseudo_ppl
            .partial_cmp(&b.pseudo_ppl)
            .unwrap()
            .then(a.candidate.cmp(&b.candidate))
    });
    traces.truncate(n_keep);
    traces
}

/// Full generation protocol: run `n_candidates` chains, keep the `n_keep`
/// lowest pseudo-perplexity traces.
pub fn generate(
    params: &ModelParams,
    condition: &[usize],
    cfg: &SampleConfig,
) -> Result<Vec<GenerationTrace>> {
    let traces = generate_all(params, condition, &[], cfg)?;
    Ok(select_best(traces, cfg.n_keep))
}

/// Generation with keyword constraints pre-placed and held fixed.
pub fn infill(
    params: &ModelParams,
    condition: &[usize],
    spans: &[KeywordSpan],
    cfg: &SampleConfig,
) -> Result<Vec<GenerationTrace>> {
    let traces = generate_all(params, condition, spans, cfg)?;
    Ok(select_best(traces, cfg.n_keep))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{encode_pair, Granularity, NUM_SPECIALS};
    use crate::model::{pretrain_mlm, ModelConfig};

    fn tiny_config(vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_ff: 24,
            max_positions: 24,
            dropout: 0.0,
        }
    }

    fn untrained(vocab_size: usize, seed: u64) -> ModelParams {
        ModelParams::init(tiny_config(vocab_size), Granularity::Word, seed).unwrap()
    }

    fn cfg(t: usize, l: usize) -> SampleConfig {
        SampleConfig {
            t_steps: t,
            target_len: l,
            n_candidates: 3,
            n_keep: 2,
            seed: 9,
            ..SampleConfig::default()
        }
    }

    #[test]
    fn pseudo_ppl_uniform_model_is_content_size() {
        let params = ModelParams::zeros(tiny_config(10), Granularity::Word).unwrap();
        let seq = TokenSeq::from_pair(&[4], &[5, 6, 7], 3);
        let ppl = pseudo_perplexity(&params, &seq).unwrap();
        assert!((ppl - 6.0).abs() < 1e-9);
    }

    #[test]
    fn pseudo_ppl_rejects_masks() {
        let params = ModelParams::zeros(tiny_config(10), Granularity::Word).unwrap();
        let seq = TokenSeq::masked(&[4], 3);
        assert!(pseudo_perplexity(&params, &seq).is_err());
    }

    #[test]
    fn generate_structure_t_equals_l() {
        let params = untrained(12, 1);
        let mut c = cfg(4, 4);
        c.n_candidates = 2;
        c.n_keep = 2;
        let traces = generate(&params, &[4, 5], &c).unwrap();
        for tr in &traces {
            assert_eq!(tr.steps.len(), 4);
            for step in &tr.steps {
                assert_eq!(step.selected.len(), 1); // quota 1 each step
            }
            assert_eq!(tr.steps.last().unwrap().n_masked, 0);
            tr.final_seq.validate().unwrap();
        }
    }

    #[test]
    fn one_shot_single_step() {
        let params = untrained(12, 1);
        let mut c = cfg(5, 6);
        c.mode = Mode::OneShot;
        let traces = generate(&params, &[4], &c).unwrap();
        for tr in &traces {
            assert_eq!(tr.steps.len(), 1);
            assert_eq!(tr.steps[0].selected.len(), 6);
            assert_eq!(tr.steps[0].n_masked, 0);
        }
    }

    #[test]
    fn t_equals_one_matches_one_shot_shape() {
        let params = untrained(12, 1);
        let traces = generate(&params, &[4], &cfg(1, 5)).unwrap();
        for tr in &traces {
            assert_eq!(tr.steps.len(), 1);
            assert_eq!(tr.steps[0].selected.len(), 5);
        }
    }

    #[test]
    fn fixed_token_invariant_and_mask_schedule() {
        let params = untrained(14, 3);
        let c = cfg(3, 7);
        let traces = generate_all(&params, &[4, 5], &[], &c).unwrap();
        let q = quotas(7, 3);
        for tr in &traces {
            let mut fixed: Vec<(usize, usize)> = Vec::new();
            let mut remaining = 7usize;
            for (i, step) in tr.steps.iter().enumerate() {
                // schedule: step at t consumes quota[t-1]
                remaining -= q[step.t - 1];
                assert_eq!(step.n_masked, remaining, "candidate {}", tr.candidate);
                for (&pos, &tok) in step.selected.iter().zip(&step.sampled) {
                    fixed.push((pos, tok));
                }
                let _ = i;
            }
            // every sampled token survives to the final sequence
            for (pos, tok) in fixed {
                assert_eq!(tr.final_seq.ids[pos], tok);
            }
        }
    }

    #[test]
    fn no_special_tokens_in_output() {
        let params = untrained(14, 5);
        let traces = generate_all(&params, &[4], &[], &cfg(2, 6)).unwrap();
        for tr in &traces {
            for &id in tr.final_seq.target_ids() {
                assert!(id >= NUM_SPECIALS, "special token {id} in output");
            }
        }
    }

    #[test]
    fn seeded_determinism_and_parallel_equivalence() {
        let params = untrained(14, 5);
        let mut c = cfg(3, 6);
        let a = generate_all(&params, &[4, 5], &[], &c).unwrap();
        let b = generate_all(&params, &[4, 5], &[], &c).unwrap();
        c.parallel = true;
        let p = generate_all(&params, &[4, 5], &[], &c).unwrap();
        for ((x, y), z) in a.iter().zip(&b).zip(&p) {
            assert_eq!(x.final_seq.ids, y.final_seq.ids);
            assert_eq!(x.final_seq.ids, z.final_seq.ids);
            assert_eq!(x.pseudo_ppl, y.pseudo_ppl);
            assert_eq!(x.pseudo_ppl, z.pseudo_ppl);
        }
    }

    #[test]
    fn best_of_n_matches_brute_force() {
        let params = untrained(14, 7);
        let c = SampleConfig {
            t_steps: 2,
            target_len: 5,
            n_candidates: 8,
            n_keep: 3,
            seed: 4,
            ..SampleConfig::default()
        };
        let all = generate_all(&params, &[4], &[], &c).unwrap();
        let mut ppls: Vec<f64> = all.iter().map(|t| t.pseudo_ppl).collect();
        ppls.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let kept = select_best(all, 3);
        for (tr, want) in kept.iter().zip(&ppls) {
            assert_eq!(tr.pseudo_ppl, *want);
        }
    }

    #[test]
    fn infill_preserves_keywords() {
        let params = untrained(14, 2);
        let spans = vec![KeywordSpan {
            offset: 2,
            tokens: vec![6, 7],
        }];
        let traces = infill(&params, &[4], &spans, &cfg(3, 6)).unwrap();
        for tr in &traces {
            assert_eq!(tr.final_seq.ids[tr.final_seq.x_start + 2], 6);
            assert_eq!(tr.final_seq.ids[tr.final_seq.x_start + 3], 7);
        }
    }

    #[test]
    fn infill_full_keyword_no_sampling() {
        let params = untrained(14, 2);
        let spans = vec![KeywordSpan {
            offset: 0,
            tokens: vec![5, 6, 7],
        }];
        let traces = infill(&params, &[4], &spans, &cfg(2, 3)).unwrap();
        for tr in &traces {
            assert!(tr.steps.is_empty());
            assert_eq!(tr.final_seq.target_ids(), &[5, 6, 7]);
        }
    }

    #[test]
    fn infill_empty_spec_matches_generate() {
        let params = untrained(14, 2);
        let c = cfg(3, 5);
        let a = generate(&params, &[4], &c).unwrap();
        let b = infill(&params, &[4], &[], &c).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.final_seq.ids, y.final_seq.ids);
        }
    }

    #[test]
    fn infill_rejects_bad_spans() {
        let params = untrained(14, 2);
        let c = cfg(2, 4);
        let overlap = vec![
            KeywordSpan {
                offset: 0,
                tokens: vec![5, 6],
            },
            KeywordSpan {
                offset: 1,
                tokens: vec![7],
            },
        ];
        assert!(infill(&params, &[4], &overlap, &c).is_err());
        let out_of_range = vec![KeywordSpan {
            offset: 3,
            tokens: vec![5, 6],
        }];
        assert!(infill(&params, &[4], &out_of_range, &c).is_err());
    }

    #[test]
    fn selection_correctness_eags() {
        let params = untrained(16, 8);
        let c = cfg(4, 8);
        // replay a chain manually is costly; instead check via trace:
        // min selected entropy >= max unselected masked entropy at each step
        let traces = generate_all(&params, &[4, 5], &[], &c).unwrap();
        // re-run chain states to recover entropies per step
        for tr in &traces {
            let mut seq = TokenSeq::masked(&[4, 5], 8);
            for step in &tr.steps {
                let masked = seq.masked_positions();
                let profile = cmrf::entropy_profile(&params, &seq, &masked, masked.len()).unwrap();
                let h = |p: usize| profile.entropy[p - seq.x_start];
                let min_sel = step
                    .selected
                    .iter()
                    .map(|&p| h(p))
                    .fold(f64::INFINITY, f64::min);
                for &p in &masked {
                    if !step.selected.contains(&p) {
                        assert!(h(p) <= min_sel + 1e-12);
                    }
                }
                for (&pos, &tok) in step.selected.iter().zip(&step.sampled) {
                    seq.ids[pos] = tok;
                    seq.is_fixed[pos] = true;
                }
            }
            assert_eq!(seq.ids, tr.final_seq.ids);
        }
    }

    #[test]
    fn random_order_terminates_clean() {
        let params = untrained(14, 6);
        let mut c = cfg(3, 7);
        c.mode = Mode::RandomOrder;
        let traces = generate_all(&params, &[4], &[], &c).unwrap();
        for tr in &traces {
            assert_eq!(tr.steps.last().unwrap().n_masked, 0);
            assert!(tr.final_seq.masked_positions().is_empty());
        }
    }

    #[test]
    fn rejects_l_zero() {
        let params = untrained(14, 6);
        let c = cfg(2, 0);
        assert!(generate(&params, &[4], &c).is_err());
    }

    #[test]
    fn memorization_oracle() {
        // condition "a" always yields target "b c"
        let lines: Vec<String> = vec!["a b c".into()];
        let vocab = crate::corpus::Vocab::build(&lines, Granularity::Word, 1).unwrap();
        let pairs = vec![encode_pair("a", "b c", &vocab, 2, 1).unwrap()];
        let mut params =
            ModelParams::init(tiny_config(vocab.len()), Granularity::Word, 1).unwrap();
        pretrain_mlm(&mut params, &pairs, 2, 0.6, 80, 0.08, 1, 1).unwrap();
        let cache = crate::schedule::entropy_cache(&params, &pairs, 2).unwrap();
        let noise = crate::schedule::NoiseConfig {
            t_steps: 2,
            target_len: 2,
        };
        crate::schedule::train_ens(&mut params, &pairs, &cache, noise, 40, 0.08, 1, 1).unwrap();

        let c = SampleConfig {
            t_steps: 2,
            target_len: 2,
            n_candidates: 20,
            n_keep: 20,
            seed: 5,
            ..SampleConfig::default()
        };
        let traces = generate(&params, &[vocab.id("a")], &c).unwrap();
        let want = vec![vocab.id("b"), vocab.id("c")];
        let hits = traces
            .iter()
            .filter(|t| t.final_seq.target_ids() == want.as_slice())
            .count();
        assert!(hits * 10 >= traces.len() * 9, "{hits}/{} decoded", traces.len());
    }
}

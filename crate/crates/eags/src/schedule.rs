//! Entropy-based noise scheduling: the absorbing forward process masks the
//! lowest-entropy positions first, in per-step quotas that sum exactly to
//! the number of maskable positions. The trajectory is the dense
//! materialization of the per-step absorbing transition matrices (identity
//! row to keep a token, absorbing MASK column to corrupt it; a masked
//! position never reverts in the forward direction).

use crate::cmrf;
use crate::corpus::{CondPair, TokenSeq, MASK};
use crate::error::{Error, Result};
use crate::model::{self, content_cross_entropy, AdamOptimizer, ModelParams, TrainLog};
use crate::nn::Graph;
use crate::stream_rng;
use rand::seq::SliceRandom;
use rand::Rng;

#[derive(Debug, Clone, Copy)]
pub struct NoiseConfig {
    /// Total diffusion timesteps T.
    pub t_steps: usize,
    /// Target-region length L.
    pub target_len: usize,
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_steps == 0 {
            return Err(Error::Config("T must be >= 1".into()));
        }
        if self.target_len == 0 {
            return Err(Error::Config("L must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-step mask quotas for `n` positions over `t_steps` steps. The
/// remainder when `t_steps` does not divide `n` goes to the earliest
/// steps, so quotas are non-increasing and sum exactly to `n`.
pub fn quotas(n: usize, t_steps: usize) -> Vec<usize> {
    let base = n / t_steps;
    let rem = n % t_steps;
    (0..t_steps).map(|s| base + usize::from(s < rem)).collect()
}

/// The planned forward-noising order for one example.
#[derive(Debug, Clone)]
pub struct MaskTrajectory {
    /// Maskable positions in ascending-entropy order (ties: lower index
    /// first); a prefix of this list is masked at every step.
    pub order: Vec<usize>,
    /// `quota[s]` positions are newly masked at step `s + 1`.
    pub quota: Vec<usize>,
}

impl MaskTrajectory {
    pub fn t_steps(&self) -> usize {
        self.quota.len()
    }

    fn prefix_len(&self, t: usize) -> usize {
        self.quota[..t].iter().sum()
    }

    /// Positions masked at step `t` (cumulative; `t = 0` is none).
    pub fn masked_at(&self, t: usize) -> &[usize] {
        &self.order[..self.prefix_len(t)]
    }

    /// Positions newly masked when moving from step `t - 1` to `t`.
    pub fn delta(&self, t: usize) -> &[usize] {
        &self.order[self.prefix_len(t - 1)..self.prefix_len(t)]
    }

    /// Step at which `pos` becomes masked, if it is in the trajectory.
    pub fn step_of(&self, pos: usize) -> Option<usize> {
        let idx = self.order.iter().position(|&p| p == pos)?;
        let mut acc = 0;
        for (s, &q) in self.quota.iter().enumerate() {
            acc += q;
            if idx < acc {
                return Some(s + 1);
            }
        }
        None
    }
}

/// Sorts `positions` ascending by entropy (ties: lower index first) and
/// slices the order into per-step quota blocks.
pub fn plan_trajectory(positions: &[usize], entropy: &[f64], t_steps: usize) -> Result<MaskTrajectory> {
    if positions.len() != entropy.len() {
        return Err(Error::InvalidOp {
            op: "plan_trajectory",
            details: format!(
                "{} positions vs {} entropies",
                positions.len(),
                entropy.len()
            ),
        });
    }
    if t_steps == 0 {
        return Err(Error::Config("T must be >= 1".into()));
    }
    let mut order: Vec<(usize, f64)> = positions.iter().copied().zip(entropy.iter().copied()).collect();
    order.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
    Ok(MaskTrajectory {
        order: order.into_iter().map(|(p, _)| p).collect(),
        quota: quotas(positions.len(), t_steps),
    })
}

/// Applies the forward process at step `t`: MASK exactly at the planned
/// prefix, everything else identical to `x0`.
pub fn apply_forward(x0: &TokenSeq, traj: &MaskTrajectory, t: usize) -> Result<TokenSeq> {
    if t > traj.t_steps() {
        return Err(Error::InvalidOp {
            op: "apply_forward",
            details: format!("t {t} out of range 0..={}", traj.t_steps()),
        });
    }
    let mut seq = x0.clone();
    for &pos in traj.masked_at(t) {
        seq.ids[pos] = MASK;
        seq.is_fixed[pos] = false;
    }
    seq.timestep = t;
    Ok(seq)
}

/// Cross-entropy diffusion loss at step `t`: the model sees `X^(t+1)` and
/// must recover the clean tokens at the positions newly masked between
/// `t` and `t + 1` (the forward process is deterministic given the
/// entropy profile, so the target distribution is one-hot ground truth).
/// Returns the loss value together with the graph so callers can run
/// backward for training.
pub fn diffusion_loss_graph(
    params: &ModelParams,
    x0: &TokenSeq,
    traj: &MaskTrajectory,
    t: usize,
) -> Result<(f64, Graph, model::ForwardPass)> {
    if t >= traj.t_steps() {
        return Err(Error::InvalidOp {
            op: "diffusion_loss",
            details: format!("t {t} out of range 0..{}", traj.t_steps()),
        });
    }
    let delta = traj.delta(t + 1);
    if delta.is_empty() {
        return Err(Error::Invariant(format!(
            "empty delta set at step {} — trajectory corrupt",
            t + 1
        )));
    }
    let noisy = apply_forward(x0, traj, t + 1)?;
    let mut weights = vec![0.0; x0.len()];
    for &pos in delta {
        weights[pos] = 1.0;
    }
    let mut g = Graph::new();
    let fwd = model::forward(&mut g, params, &noisy.ids, None)?;
    let loss = content_cross_entropy(&mut g, fwd.logits, &x0.ids, &weights)?;
    let value = g.value(loss).data[0];
    g.backward(loss)?;
    Ok((value, g, fwd))
}

/// Loss value only (no training side effects beyond the forward pass).
pub fn diffusion_loss(
    params: &ModelParams,
    x0: &TokenSeq,
    traj: &MaskTrajectory,
    t: usize,
) -> Result<f64> {
    diffusion_loss_graph(params, x0, traj, t).map(|(v, _, _)| v)
}

/// Per-example clean-sequence entropies under the frozen phase-1 model:
/// `(content positions, entropies)` in position order.
pub fn entropy_cache(
    entropy_model: &ModelParams,
    corpus: &[CondPair],
    target_len: usize,
) -> Result<Vec<(Vec<usize>, Vec<f64>)>> {
    let mut cache = Vec::with_capacity(corpus.len());
    for pair in corpus {
        let clean = TokenSeq::from_pair(&pair.condition, &pair.target, target_len);
        let positions = clean.content_positions();
        if positions.is_empty() {
            cache.push((Vec::new(), Vec::new()));
            continue;
        }
        // H_i of the clean sequence under the MLM convention: query each
        // position with itself masked, so the head is evaluated where
        // phase-1 training actually placed loss
        let mut entropies = Vec::with_capacity(positions.len());
        for &p in &positions {
            let mut masked = clean.clone();
            masked.ids[p] = MASK;
            masked.is_fixed[p] = false;
            let profile = cmrf::entropy_profile(entropy_model, &masked, &[p], 1)?;
            entropies.push(profile.entropy[p - clean.x_start]);
        }
        cache.push((positions, entropies));
    }
    Ok(cache)
}

/// Phase-2 diffusion training. Trajectories come from the cached clean
/// entropies (computed once per example under the frozen phase-1 model);
/// each visit draws a uniform timestep with a non-empty delta set.
#[allow(clippy::too_many_arguments)]
pub fn train_ens(
    params: &mut ModelParams,
    corpus: &[CondPair],
    cache: &[(Vec<usize>, Vec<f64>)],
    cfg: NoiseConfig,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
) -> Result<TrainLog> {
    cfg.validate()?;
    if cache.len() != corpus.len() {
        return Err(Error::InvalidOp {
            op: "train_ens",
            details: "entropy cache does not match corpus".into(),
        });
    }
    let trajectories: Vec<Option<MaskTrajectory>> = cache
        .iter()
        .map(|(positions, entropies)| {
            if positions.is_empty() {
                Ok(None)
            } else {
                plan_trajectory(positions, entropies, cfg.t_steps).map(Some)
            }
        })
        .collect::<Result<_>>()?;

    let mut rng = stream_rng(seed, "train_ens");
    let mut opt = AdamOptimizer::new(params);
    let mut log = TrainLog {
        epoch_losses: Vec::new(),
    };
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    for _epoch in 0..epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut n_items = 0usize;
        let mut pending = 0usize;
        for &idx in order.iter() {
            let Some(traj) = &trajectories[idx] else {
                continue;
            };
            // Planned trajectories never visit some state/position combos
            // (a low-entropy position is never predicted under heavy
            // masking), which leaves the model uncalibrated exactly where
            // generation-time entropy estimates need it. Mix in a minority
            // of uniformly ordered trajectories to cover those states.
            let random_traj;
            let traj = if rng.gen_bool(0.25) {
                let (positions, _) = &cache[idx];
                let fake: Vec<f64> = positions.iter().map(|_| rng.gen::<f64>()).collect();
                random_traj = plan_trajectory(positions, &fake, cfg.t_steps)?;
                &random_traj
            } else {
                traj
            };
            // timesteps whose delta set is non-empty (short targets can
            // leave late steps with quota 0)
            let valid: Vec<usize> = (0..cfg.t_steps)
                .filter(|&t| !traj.delta(t + 1).is_empty())
                .collect();
            let t = valid[rng.gen_range(0..valid.len())];
            let pair = &corpus[idx];
            let x0 = TokenSeq::from_pair(&pair.condition, &pair.target, cfg.target_len);
            let (value, g, fwd) = diffusion_loss_graph(params, &x0, traj, t)?;
            epoch_loss += value;
            n_items += 1;
            opt.accumulate(&g, &fwd);
            pending += 1;
            if pending == batch_size {
                opt.step(params, lr)?;
                pending = 0;
            }
        }
        if pending > 0 {
            opt.step(params, lr)?;
        }
        log.epoch_losses
            .push(if n_items > 0 { epoch_loss / n_items as f64 } else { 0.0 });
    }
    Ok(log)
}

//! The tiny bidirectional MLM: a pre-LN transformer encoder with learned
//! positional embeddings, full (non-causal) attention, and an output
//! projection to vocabulary logits. Also holds phase-1 masked-LM training
//! and the checkpoint format.

use crate::corpus::{CondPair, Granularity, TokenSeq, MASK, NUM_SPECIALS, PAD};
use crate::error::{Error, Result};
use crate::nn::{softmax_row, Graph, NodeId, Tensor};
use crate::stream_rng;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::io::{Read, Write};
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_positions: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 0,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            max_positions: 64,
            dropout: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0,1)", self.dropout)));
        }
        if self.vocab_size <= NUM_SPECIALS {
            return Err(Error::Config("vocab has no content tokens".into()));
        }
        Ok(())
    }
}

/// All weights, stored as an ordered list of named tensors so that
/// serialization and SGD traversal are deterministic.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub granularity: Granularity,
    tensors: Vec<(String, Tensor)>,
}

impl ModelParams {
    pub fn init(config: ModelConfig, granularity: Granularity, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream_rng(seed, "init");
        let c = &config;
        let mut tensors: Vec<(String, Tensor)> = Vec::new();
        let gauss = |rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
            let data = (0..rows * cols)
                .map(|_| {
                    // Box-Muller from two uniforms, std 0.02
                    let u1: f64 = rng.gen_range(1e-12..1.0);
                    let u2: f64 = rng.gen();
                    0.02 * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
                })
                .collect();
            Tensor::matrix(rows, cols, data)
        };
        tensors.push(("tok_emb".into(), gauss(c.vocab_size, c.d_model, &mut rng)));
        tensors.push(("pos_emb".into(), gauss(c.max_positions, c.d_model, &mut rng)));
        for l in 0..c.n_layers {
            let p = |s: &str| format!("layer{l}.{s}");
            tensors.push((p("ln1_g"), ones(1, c.d_model)));
            tensors.push((p("ln1_b"), Tensor::zeros(vec![1, c.d_model])));
            for name in ["wq", "wk", "wv", "wo"] {
                tensors.push((p(name), gauss(c.d_model, c.d_model, &mut rng)));
                tensors.push((p(&format!("b{}", &name[1..])), Tensor::zeros(vec![1, c.d_model])));
            }
            tensors.push((p("ln2_g"), ones(1, c.d_model)));
            tensors.push((p("ln2_b"), Tensor::zeros(vec![1, c.d_model])));
            tensors.push((p("w1"), gauss(c.d_model, c.d_ff, &mut rng)));
            tensors.push((p("b1"), Tensor::zeros(vec![1, c.d_ff])));
            tensors.push((p("w2"), gauss(c.d_ff, c.d_model, &mut rng)));
            tensors.push((p("b2"), Tensor::zeros(vec![1, c.d_model])));
        }
        tensors.push(("ln_f_g".into(), ones(1, c.d_model)));
        tensors.push(("ln_f_b".into(), Tensor::zeros(vec![1, c.d_model])));
        tensors.push(("w_out".into(), gauss(c.d_model, c.vocab_size, &mut rng)));
        tensors.push(("b_out".into(), Tensor::zeros(vec![1, c.vocab_size])));
        Ok(ModelParams {
            config,
            granularity,
            tensors,
        })
    }

    /// All-zero weights; logits are identically zero. Used by tests.
    pub fn zeros(config: ModelConfig, granularity: Granularity) -> Result<Self> {
        let mut p = Self::init(config, granularity, 0)?;
        for (_, t) in &mut p.tensors {
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
        Ok(p)
    }

    pub fn tensors(&self) -> &[(String, Tensor)] {
        &self.tensors
    }

    fn index(&self, name: &str) -> usize {
        self.tensors
            .iter()
            .position(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("unknown tensor {name}"))
    }

    pub fn tensor(&self, name: &str) -> &Tensor {
        &self.tensors[self.index(name)].1
    }

    pub fn tensor_mut(&mut self, name: &str) -> &mut Tensor {
        let i = self.index(name);
        &mut self.tensors[i].1
    }
}

fn ones(rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, vec![1.0; rows * cols])
}

/// A recorded forward pass: the logits node plus one graph leaf per
/// parameter tensor, in `ModelParams` order.
pub struct ForwardPass {
    pub logits: NodeId,
    pub param_nodes: Vec<NodeId>,
}

/// Builds the full bidirectional forward pass for `ids` on `graph`.
/// PAD positions are masked out of everyone's attention. Dropout is
/// applied only when `dropout_rng` is provided (training mode).
pub fn forward(
    g: &mut Graph,
    params: &ModelParams,
    ids: &[usize],
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<ForwardPass> {
    let c = &params.config;
    let seq_len = ids.len();
    if seq_len > c.max_positions {
        return Err(Error::InvalidOp {
            op: "forward",
            details: format!("sequence length {seq_len} exceeds max_positions {}", c.max_positions),
        });
    }
    for &id in ids {
        if id >= c.vocab_size {
            return Err(Error::InvalidOp {
                op: "forward",
                details: format!("token id {id} outside vocab of size {}", c.vocab_size),
            });
        }
    }

    let param_nodes: Vec<NodeId> = params
        .tensors
        .iter()
        .map(|(_, t)| g.leaf(t.clone()))
        .collect();
    let node = |name: &str| param_nodes[params.index(name)];

    // attention bias: -1e30 on PAD columns
    let mut bias = vec![0.0; seq_len * seq_len];
    for (j, &id) in ids.iter().enumerate() {
        if id == PAD {
            for i in 0..seq_len {
                bias[i * seq_len + j] = -1e30;
            }
        }
    }
    let attn_bias = g.leaf(Tensor::matrix(seq_len, seq_len, bias));

    let tok = g.embedding(node("tok_emb"), ids)?;
    let positions: Vec<usize> = (0..seq_len).collect();
    let pos = g.embedding(node("pos_emb"), &positions)?;
    let mut x = g.add(tok, pos)?;
    if let Some(rng) = dropout_rng.as_deref_mut() {
        x = g.dropout(x, c.dropout, rng);
    }

    let d_head = c.d_model / c.n_heads;
    let scale = 1.0 / (d_head as f64).sqrt();
    for l in 0..c.n_layers {
        let p = |s: &str| format!("layer{l}.{s}");
        // attention block
        let h = g.layer_norm(x);
        let h = affine(g, h, node(&p("ln1_g")), node(&p("ln1_b")))?;
        let q = linear(g, h, node(&p("wq")), node(&p("bq")))?;
        let k = linear(g, h, node(&p("wk")), node(&p("bk")))?;
        let v = linear(g, h, node(&p("wv")), node(&p("bv")))?;
        let mut heads = Vec::with_capacity(c.n_heads);
        for hd in 0..c.n_heads {
            let qh = g.slice_cols(q, hd * d_head, d_head)?;
            let kh = g.slice_cols(k, hd * d_head, d_head)?;
            let vh = g.slice_cols(v, hd * d_head, d_head)?;
            let scores = g.matmul_nt(qh, kh)?;
            let scores = g.scale(scores, scale);
            let scores = g.add(scores, attn_bias)?;
            let probs = g.softmax_rows(scores);
            heads.push(g.matmul(probs, vh)?);
        }
        let cat = g.concat_cols(&heads)?;
        let mut attn = linear(g, cat, node(&p("wo")), node(&p("bo")))?;
        if let Some(rng) = dropout_rng.as_deref_mut() {
            attn = g.dropout(attn, c.dropout, rng);
        }
        x = g.add(x, attn)?;

        // feed-forward block
        let h = g.layer_norm(x);
        let h = affine(g, h, node(&p("ln2_g")), node(&p("ln2_b")))?;
        let h = linear(g, h, node(&p("w1")), node(&p("b1")))?;
        let h = g.gelu(h);
        let mut ff = linear(g, h, node(&p("w2")), node(&p("b2")))?;
        if let Some(rng) = dropout_rng.as_deref_mut() {
            ff = g.dropout(ff, c.dropout, rng);
        }
        x = g.add(x, ff)?;
    }

    let h = g.layer_norm(x);
    let h = affine(g, h, node("ln_f_g"), node("ln_f_b"))?;
    let logits = linear(g, h, node("w_out"), node("b_out"))?;
    Ok(ForwardPass { logits, param_nodes })
}

fn linear(g: &mut Graph, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
    let y = g.matmul(x, w)?;
    g.add(y, b)
}

fn affine(g: &mut Graph, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
    let y = g.mul(x, gamma)?;
    g.add(y, beta)
}

/// Eval-mode logits for the whole sequence: row i is the logit vector over
/// the vocabulary at position i.
pub fn logits(params: &ModelParams, seq: &TokenSeq) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let fwd = forward(&mut g, params, &seq.ids, None)?;
    Ok(g.value(fwd.logits).data.clone())
}

/// Softmax distribution over content tokens at `temperature`, with the
/// four specials assigned exactly zero probability. Returns a full-vocab
/// probability vector summing to 1.
pub fn content_distribution(logit_row: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if temperature <= 0.0 {
        return Err(Error::InvalidOp {
            op: "token_distribution",
            details: format!("temperature {temperature} must be > 0"),
        });
    }
    let content: Vec<f64> = logit_row[NUM_SPECIALS..]
        .iter()
        .map(|&x| x / temperature)
        .collect();
    let mut probs = vec![0.0; content.len()];
    softmax_row(&content, &mut probs);
    let mut full = vec![0.0; logit_row.len()];
    full[NUM_SPECIALS..].copy_from_slice(&probs);
    Ok(full)
}

/// Entropy in nats of a content-token distribution.
pub fn distribution_entropy(probs: &[f64]) -> f64 {
    probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum()
}

/// Cross entropy over content tokens only: special-token columns are
/// dropped before the softmax, so a uniform model scores ln(content size).
/// Rows with weight 0 are ignored; weighted rows must target content ids.
pub fn content_cross_entropy(
    g: &mut Graph,
    logits: NodeId,
    target_ids: &[usize],
    weights: &[f64],
) -> Result<NodeId> {
    let (_, v) = g.value(logits).dims2();
    let content = g.slice_cols(logits, NUM_SPECIALS, v - NUM_SPECIALS)?;
    let mut targets = Vec::with_capacity(target_ids.len());
    for (i, (&t, &w)) in target_ids.iter().zip(weights).enumerate() {
        if w == 0.0 {
            targets.push(0);
        } else if t < NUM_SPECIALS {
            return Err(Error::InvalidOp {
                op: "content_cross_entropy",
                details: format!("row {i} targets special token id {t}"),
            });
        } else {
            targets.push(t - NUM_SPECIALS);
        }
    }
    g.cross_entropy(content, &targets, weights)
}

/// Plain SGD with per-batch gradient averaging.
pub struct SgdOptimizer {
    grads: Vec<Vec<f64>>,
    count: usize,
}

impl SgdOptimizer {
    pub fn new(params: &ModelParams) -> Self {
        SgdOptimizer {
            grads: params.tensors.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
            count: 0,
        }
    }

    pub fn accumulate(&mut self, graph: &Graph, fwd: &ForwardPass) {
        for (acc, &node) in self.grads.iter_mut().zip(&fwd.param_nodes) {
            for (a, g) in acc.iter_mut().zip(graph.grad(node)) {
                *a += g;
            }
        }
        self.count += 1;
    }

    /// `param -= lr * mean_grad`; grads are zeroed afterwards.
    pub fn step(&mut self, params: &mut ModelParams, lr: f64) -> Result<()> {
        if self.count == 0 {
            return Err(Error::InvalidOp {
                op: "sgd_step",
                details: "no accumulated gradients".into(),
            });
        }
        let inv = 1.0 / self.count as f64;
        for ((_, t), acc) in params.tensors.iter_mut().zip(&mut self.grads) {
            for (p, g) in t.data.iter_mut().zip(acc.iter_mut()) {
                *p -= lr * *g * inv;
                *g = 0.0;
            }
        }
        self.count = 0;
        Ok(())
    }
}

/// Adam with per-batch gradient averaging; used by both training phases
/// for its much faster convergence at this scale.
pub struct AdamOptimizer {
    grads: Vec<Vec<f64>>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    count: usize,
    t: u64,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl AdamOptimizer {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .tensors
            .iter()
            .map(|(_, t)| vec![0.0; t.numel()])
            .collect();
        AdamOptimizer {
            grads: zeros.clone(),
            m: zeros.clone(),
            v: zeros,
            count: 0,
            t: 0,
        }
    }

    pub fn accumulate(&mut self, graph: &Graph, fwd: &ForwardPass) {
        for (acc, &node) in self.grads.iter_mut().zip(&fwd.param_nodes) {
            for (a, g) in acc.iter_mut().zip(graph.grad(node)) {
                *a += g;
            }
        }
        self.count += 1;
    }

    pub fn step(&mut self, params: &mut ModelParams, lr: f64) -> Result<()> {
        if self.count == 0 {
            return Err(Error::InvalidOp {
                op: "adam_step",
                details: "no accumulated gradients".into(),
            });
        }
        self.t += 1;
        let inv = 1.0 / self.count as f64;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for (((_, tensor), acc), (m, v)) in params
            .tensors
            .iter_mut()
            .zip(&mut self.grads)
            .zip(self.m.iter_mut().zip(&mut self.v))
        {
            for (((p, g), m), v) in tensor
                .data
                .iter_mut()
                .zip(acc.iter_mut())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                let grad = *g * inv;
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * grad;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * grad * grad;
                *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + ADAM_EPS);
                *g = 0.0;
            }
        }
        self.count = 0;
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub epoch_losses: Vec<f64>,
}

/// Phase-1 masked-LM pretraining: uniformly random mask positions in the
/// target region at `mask_ratio`, cross-entropy on masked positions.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_mlm(
    params: &mut ModelParams,
    corpus: &[CondPair],
    target_len: usize,
    mask_ratio: f64,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
) -> Result<TrainLog> {
    if !(0.0..1.0).contains(&mask_ratio) || mask_ratio == 0.0 {
        return Err(Error::Config(format!(
            "mask_ratio {mask_ratio} must be in (0,1)"
        )));
    }
    let mut rng = stream_rng(seed, "pretrain");
    let mut opt = AdamOptimizer::new(params);
    let mut log = TrainLog {
        epoch_losses: Vec::new(),
    };
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    for _epoch in 0..epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut n_items = 0usize;
        for (pos, &idx) in order.iter().enumerate() {
            let pair = &corpus[idx];
            let clean = TokenSeq::from_pair(&pair.condition, &pair.target, target_len);
            let content = clean.content_positions();
            if content.is_empty() {
                continue;
            }
            let n_mask = ((content.len() as f64 * mask_ratio).round() as usize)
                .clamp(1, content.len());
            let mut chosen = content.clone();
            chosen.shuffle(&mut rng);
            chosen.truncate(n_mask);

            let mut noisy = clean.clone();
            for &i in &chosen {
                noisy.ids[i] = MASK;
            }
            let mut weights = vec![0.0; clean.len()];
            for &i in &chosen {
                weights[i] = 1.0;
            }
            let mut g = Graph::new();
            let mut drop_rng = stream_rng(seed, "dropout");
            let fwd = forward(&mut g, params, &noisy.ids, Some(&mut drop_rng))?;
            let loss = content_cross_entropy(&mut g, fwd.logits, &clean.ids, &weights)?;
            epoch_loss += g.value(loss).data[0];
            n_items += 1;
            g.backward(loss)?;
            opt.accumulate(&g, &fwd);
            if (pos + 1) % batch_size == 0 || pos + 1 == order.len() {
                opt.step(params, lr)?;
            }
        }
        log.epoch_losses
            .push(if n_items > 0 { epoch_loss / n_items as f64 } else { 0.0 });
    }
    Ok(log)
}

/// Fraction of masked target positions whose argmax logit equals the
/// ground-truth token. Test/diagnostic helper.
pub fn masked_accuracy(
    params: &ModelParams,
    corpus: &[CondPair],
    target_len: usize,
    mask_ratio: f64,
    seed: u64,
) -> Result<f64> {
    let mut rng = stream_rng(seed, "masked_accuracy");
    let mut correct = 0usize;
    let mut total = 0usize;
    for pair in corpus {
        let clean = TokenSeq::from_pair(&pair.condition, &pair.target, target_len);
        let content = clean.content_positions();
        if content.is_empty() {
            continue;
        }
        let n_mask = ((content.len() as f64 * mask_ratio).round() as usize).clamp(1, content.len());
        let mut chosen = content.clone();
        chosen.shuffle(&mut rng);
        chosen.truncate(n_mask);
        let mut noisy = clean.clone();
        for &i in &chosen {
            noisy.ids[i] = MASK;
        }
        let all = logits(params, &noisy)?;
        let v = params.config.vocab_size;
        for &i in &chosen {
            let row = &all[i * v..(i + 1) * v];
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            if argmax == clean.ids[i] {
                correct += 1;
            }
            total += 1;
        }
    }
    Ok(correct as f64 / total.max(1) as f64)
}

// ---------------------------------------------------------------------------
// Checkpoint format: textual manifest (config, tensor table), a `DATA` line,
// then raw little-endian f64 arrays in manifest order. Bit-exact round trip.
// ---------------------------------------------------------------------------

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    let c = &params.config;
    let mut manifest = String::new();
    manifest.push_str("eags-checkpoint v1\n");
    manifest.push_str(&format!(
        "vocab_size={}\nd_model={}\nn_layers={}\nn_heads={}\nd_ff={}\nmax_positions={}\ndropout={}\n",
        c.vocab_size, c.d_model, c.n_layers, c.n_heads, c.d_ff, c.max_positions, c.dropout
    ));
    manifest.push_str(&format!(
        "granularity={}\n",
        match params.granularity {
            Granularity::Word => "word",
            Granularity::Char => "char",
        }
    ));
    let mut offset = 0usize;
    for (name, t) in &params.tensors {
        let shape: Vec<String> = t.shape.iter().map(|d| d.to_string()).collect();
        manifest.push_str(&format!(
            "tensor {name} {} {offset} {}\n",
            shape.join("x"),
            t.numel()
        ));
        offset += t.numel();
    }
    manifest.push_str("DATA\n");

    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    w.write_all(manifest.as_bytes())
        .map_err(|e| Error::io(path, e))?;
    for (_, t) in &params.tensors {
        for v in &t.data {
            w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let data_tag = b"DATA\n";
    let data_pos = bytes
        .windows(data_tag.len())
        .position(|w| w == data_tag)
        .ok_or_else(|| Error::Checkpoint("missing DATA separator".into()))?;
    let header = std::str::from_utf8(&bytes[..data_pos])
        .map_err(|_| Error::Checkpoint("manifest is not UTF-8".into()))?;
    let body = &bytes[data_pos + data_tag.len()..];

    let mut lines = header.lines();
    if lines.next() != Some("eags-checkpoint v1") {
        return Err(Error::Checkpoint("bad magic line".into()));
    }
    let mut config = ModelConfig::default();
    let mut granularity = Granularity::Word;
    let mut table: Vec<(String, Vec<usize>, usize, usize)> = Vec::new();
    for line in lines {
        if let Some(rest) = line.strip_prefix("tensor ") {
            let parts: Vec<&str> = rest.split(' ').collect();
            if parts.len() != 4 {
                return Err(Error::Checkpoint(format!("bad tensor line: {line}")));
            }
            let shape: Vec<usize> = parts[1]
                .split('x')
                .map(|d| d.parse().map_err(|_| Error::Checkpoint(format!("bad shape in {line}"))))
                .collect::<Result<_>>()?;
            let offset = parts[2]
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad offset in {line}")))?;
            let len = parts[3]
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad length in {line}")))?;
            table.push((parts[0].to_string(), shape, offset, len));
        } else if let Some((key, val)) = line.split_once('=') {
            match key {
                "vocab_size" => config.vocab_size = parse_field(key, val)?,
                "d_model" => config.d_model = parse_field(key, val)?,
                "n_layers" => config.n_layers = parse_field(key, val)?,
                "n_heads" => config.n_heads = parse_field(key, val)?,
                "d_ff" => config.d_ff = parse_field(key, val)?,
                "max_positions" => config.max_positions = parse_field(key, val)?,
                "dropout" => {
                    config.dropout = val
                        .parse()
                        .map_err(|_| Error::Checkpoint(format!("bad value for {key}")))?
                }
                "granularity" => {
                    granularity = match val {
                        "word" => Granularity::Word,
                        "char" => Granularity::Char,
                        _ => return Err(Error::Checkpoint(format!("bad granularity {val}"))),
                    }
                }
                _ => return Err(Error::Checkpoint(format!("unknown field {key}"))),
            }
        } else {
            return Err(Error::Checkpoint(format!("unparseable line: {line}")));
        }
    }

    let mut tensors = Vec::with_capacity(table.len());
    for (name, shape, offset, len) in table {
        if shape.iter().product::<usize>() != len {
            return Err(Error::Checkpoint(format!("shape/len mismatch for {name}")));
        }
        let start = offset * 8;
        let end = start + len * 8;
        if end > body.len() {
            return Err(Error::Checkpoint(format!("data truncated at tensor {name}")));
        }
        let data: Vec<f64> = body[start..end]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        tensors.push((name, Tensor::new(shape, data)));
    }
    let params = ModelParams {
        config,
        granularity,
        tensors,
    };
    params.config.validate()?;
    Ok(params)
}

fn parse_field(key: &str, val: &str) -> Result<usize> {
    val.parse()
        .map_err(|_| Error::Checkpoint(format!("bad value for {key}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{encode_pair, Vocab, SEP};

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

    fn two_token_corpus() -> (Vocab, Vec<CondPair>) {
        let lines: Vec<String> = vec!["a b b".into(), "a c d".into()];
        let vocab = Vocab::build(&lines, Granularity::Word, 1).unwrap();
        let pairs = vec![encode_pair("a", "b", &vocab, 4, 1).unwrap()];
        (vocab, pairs)
    }

    #[test]
    fn zero_weight_params_zero_logits() {
        let (vocab, _) = two_token_corpus();
        let params = ModelParams::zeros(tiny_config(vocab.len()), Granularity::Word).unwrap();
        let seq = TokenSeq::from_pair(&[vocab.id("a")], &[vocab.id("b")], 2);
        let out = logits(&params, &seq).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn eval_determinism() {
        let params = ModelParams::init(tiny_config(10), Granularity::Word, 5).unwrap();
        let seq = TokenSeq::from_pair(&[4, 5], &[6, 7], 2);
        assert_eq!(logits(&params, &seq).unwrap(), logits(&params, &seq).unwrap());
    }

    #[test]
    fn bidirectional_context_flows() {
        let params = ModelParams::init(tiny_config(10), Granularity::Word, 5).unwrap();
        let a = TokenSeq::from_pair(&[4], &[5, 6, 7], 3);
        let mut b = a.clone();
        b.ids[4] = 8; // change a later token, inspect an earlier position
        let v = params.config.vocab_size;
        let la = logits(&params, &a).unwrap();
        let lb = logits(&params, &b).unwrap();
        let pos = 2; // position before the perturbed one
        assert!(la[pos * v..(pos + 1) * v] != lb[pos * v..(pos + 1) * v]);
    }

    #[test]
    fn pad_positions_do_not_leak_into_others() {
        let params = ModelParams::init(tiny_config(12), Granularity::Word, 9).unwrap();
        let seq = TokenSeq::from_pair(&[4, 5], &[6], 2); // one PAD slot
        let v = params.config.vocab_size;
        let base = logits(&params, &seq).unwrap();
        // widening the PAD tail must leave non-PAD logits untouched
        let wider = TokenSeq::from_pair(&[4, 5], &[6], 5);
        let out = logits(&params, &wider).unwrap();
        for pos in 0..4 {
            assert_eq!(
                base[pos * v..(pos + 1) * v],
                out[pos * v..(pos + 1) * v],
                "PAD masking leaked at position {pos}"
            );
        }
    }

    #[test]
    fn content_distribution_uniform_and_specials_zero() {
        let row = vec![0.0; 10];
        let p = content_distribution(&row, 1.0).unwrap();
        for i in 0..NUM_SPECIALS {
            assert_eq!(p[i], 0.0);
        }
        for &v in &p[NUM_SPECIALS..] {
            assert!((v - 1.0 / 6.0).abs() < 1e-12);
        }
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn content_distribution_temperature() {
        let row = vec![0.0, 0.0, 0.0, 0.0, 1.0, 3.0, 2.0, -1.0];
        let argmax = |p: &[f64]| {
            p.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0
        };
        let p1 = content_distribution(&row, 1.0).unwrap();
        let p2 = content_distribution(&row, 2.0).unwrap();
        assert_eq!(argmax(&p1), argmax(&p2));
        // near-zero temperature approaches one-hot argmax
        let p0 = content_distribution(&row, 1e-6).unwrap();
        assert!(p0[argmax(&p1)] > 0.999999);
        assert!(content_distribution(&row, 0.0).is_err());
        assert!(content_distribution(&row, -1.0).is_err());
    }

    #[test]
    fn sgd_step_basic() {
        let mut params = ModelParams::zeros(tiny_config(10), Granularity::Word).unwrap();
        let mut opt = SgdOptimizer::new(&params);
        // missing grads
        assert!(opt.step(&mut params, 0.1).is_err());

        // fabricate a gradient of 2.0 on every entry of tok_emb
        let mut g = Graph::new();
        let fwd = forward(&mut g, &params, &[4, SEP, 5], None).unwrap();
        let loss = g.cross_entropy(fwd.logits, &[4, SEP, 5], &[1.0, 0.0, 1.0]).unwrap();
        g.backward(loss).unwrap();
        opt.accumulate(&g, &fwd);
        let before = params.tensor("w_out").data.clone();
        opt.step(&mut params, 0.0).unwrap(); // lr = 0 leaves params unchanged
        assert_eq!(params.tensor("w_out").data, before);
    }

    #[test]
    fn pretrain_learns_memorizable_corpus() {
        let lines: Vec<String> = vec!["a b".into()];
        let vocab = Vocab::build(&lines, Granularity::Word, 1).unwrap();
        let pairs = vec![encode_pair("a", "b", &vocab, 2, 1).unwrap()];
        let mut params =
            ModelParams::init(tiny_config(vocab.len()), Granularity::Word, 1).unwrap();
        let log = pretrain_mlm(&mut params, &pairs, 2, 0.9, 60, 0.05, 1, 1).unwrap();
        assert!(
            log.epoch_losses.last().unwrap() < log.epoch_losses.first().unwrap(),
            "loss did not decrease: {:?}",
            log.epoch_losses
        );
        // trained argmax at a masked target position is id(b)
        let mut seq = TokenSeq::from_pair(&[vocab.id("a")], &[vocab.id("b")], 2);
        seq.ids[2] = MASK;
        seq.is_fixed[2] = false;
        let v = params.config.vocab_size;
        let out = logits(&params, &seq).unwrap();
        let row = &out[2 * v..3 * v];
        let argmax = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(argmax, vocab.id("b"));
    }

    #[test]
    fn pretrain_deterministic_and_rejects_zero_ratio() {
        let (vocab, pairs) = two_token_corpus();
        let run = || {
            let mut p = ModelParams::init(tiny_config(vocab.len()), Granularity::Word, 3).unwrap();
            pretrain_mlm(&mut p, &pairs, 4, 0.5, 3, 0.05, 1, 7)
                .unwrap()
                .epoch_losses
        };
        assert_eq!(run(), run());
        let mut p = ModelParams::init(tiny_config(vocab.len()), Granularity::Word, 3).unwrap();
        assert!(pretrain_mlm(&mut p, &pairs, 4, 0.0, 1, 0.05, 1, 7).is_err());
    }

    #[test]
    fn checkpoint_round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let params = ModelParams::init(tiny_config(10), Granularity::Char, 11).unwrap();
        save_checkpoint(&params, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.config, params.config);
        assert_eq!(loaded.granularity, params.granularity);
        for ((n1, t1), (n2, t2)) in params.tensors().iter().zip(loaded.tensors()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape, t2.shape);
            assert!(t1.data.iter().zip(&t2.data).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
        // saving the loaded params reproduces the file byte for byte
        let path2 = dir.path().join("m2.ckpt");
        save_checkpoint(&loaded, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn forward_rejects_overflow_and_bad_ids() {
        let params = ModelParams::init(tiny_config(10), Granularity::Word, 5).unwrap();
        let long = TokenSeq::from_pair(&vec![4; 20], &[5], 2);
        assert!(logits(&params, &long).is_err());
        let mut bad = TokenSeq::from_pair(&[4], &[5], 2);
        bad.ids[0] = 99;
        assert!(logits(&params, &bad).is_err());
    }
}

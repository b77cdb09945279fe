//! Command-line orchestration: two-phase training, generation, infilling,
//! evaluation, and trace export. Flags override an optional `key=value`
//! config file; every run echoes its fully-resolved config to stderr in
//! the same `key=value` form.

use crate::corpus::{self, Granularity, Vocab, UNK};
use crate::error::{Error, Result};
use crate::metrics;
use crate::model::{self, ModelConfig, ModelParams};
use crate::sampler::{self, KeywordSpan, Mode, SampleConfig};
use crate::schedule::{self, NoiseConfig};
use clap::{Args, Parser, Subcommand};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Parser, Debug)]
#[command(name = "eags", about = "entropy-adaptive Gibbs sampling text generator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Two-phase training: masked-LM pretraining, then entropy-scheduled
    /// diffusion training.
    Train(TrainArgs),
    /// Conditional generation with best-of-N selection.
    Generate(GenerateArgs),
    /// Generation with keyword tokens pinned at fixed target positions.
    Infill(InfillArgs),
    /// Diversity/quality metrics over generation output files.
    Eval(EvalArgs),
    /// Per-step mean/std summary of a trace file.
    TracePlotExport(TraceExportArgs),
    /// Writes the built-in synthetic PCFG corpus as a training TSV.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, default_value = "corpus.tsv")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub pairs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write one line per distinct condition to this path.
    #[arg(long)]
    pub conditions_out: Option<PathBuf>,
}

pub fn run_synth(args: SynthArgs) -> Result<()> {
    let mut out = String::new();
    for (c, t) in crate::synth::pcfg_corpus(args.pairs, args.seed) {
        let _ = writeln!(out, "{c}\t{t}");
    }
    write_file(&args.out, &out)?;
    if let Some(path) = &args.conditions_out {
        let mut conds = String::new();
        for c in crate::synth::conditions() {
            let _ = writeln!(conds, "{c}");
        }
        write_file(path, &conds)?;
    }
    eprintln!("wrote {}", args.out.display());
    Ok(())
}

/// Reads a plain `key=value` config file (one pair per line; blank lines
/// and `#` comments allowed).
fn parse_kv_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Config(format!(
            "{}: line {}: expected key=value",
            path.display(),
            i + 1
        )))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

/// Flag value, else config-file value, else default.
fn resolve<T: std::str::FromStr>(
    flag: Option<T>,
    cfg: &BTreeMap<String, String>,
    key: &str,
    default: T,
) -> Result<T> {
    if let Some(v) = flag {
        return Ok(v);
    }
    match cfg.get(key) {
        Some(raw) => raw
            .parse()
            .map_err(|_| Error::Config(format!("bad value for {key}: {raw}"))),
        None => Ok(default),
    }
}

fn echo_config(map: &BTreeMap<String, String>) {
    for (k, v) in map {
        eprintln!("{k}={v}");
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn parse_granularity(s: &str) -> Result<Granularity> {
    match s {
        "word" => Ok(Granularity::Word),
        "char" => Ok(Granularity::Char),
        _ => Err(Error::Config(format!("granularity must be word|char, got {s}"))),
    }
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Args, Debug, Default)]
pub struct TrainArgs {
    /// Corpus file: one `condition<TAB>target` pair per line.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Optional key=value config file (flags win).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output checkpoint path.
    #[arg(long, default_value = "model.ckpt")]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub t: Option<usize>,
    #[arg(long)]
    pub l: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub pretrain_epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub mask_ratio: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub min_freq: Option<usize>,
    #[arg(long)]
    pub granularity: Option<String>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub n_layers: Option<usize>,
    #[arg(long)]
    pub n_heads: Option<usize>,
    #[arg(long)]
    pub d_ff: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
}

pub struct TrainOutputs {
    pub ckpt: PathBuf,
    pub vocab: PathBuf,
    pub entropy_cache: PathBuf,
    pub log: PathBuf,
}

pub fn run_train(args: TrainArgs) -> Result<TrainOutputs> {
    let cfg_file = match &args.config {
        Some(p) => parse_kv_file(p)?,
        None => BTreeMap::new(),
    };
    let t_steps = resolve(args.t, &cfg_file, "t", 5)?;
    let target_len = resolve(args.l, &cfg_file, "l", 12)?;
    let epochs = resolve(args.epochs, &cfg_file, "epochs", 10)?;
    let pretrain_epochs = resolve(args.pretrain_epochs, &cfg_file, "pretrain_epochs", 10)?;
    let lr = resolve(args.lr, &cfg_file, "lr", 2e-3)?;
    let mask_ratio = resolve(args.mask_ratio, &cfg_file, "mask_ratio", 0.3)?;
    let batch_size = resolve(args.batch_size, &cfg_file, "batch_size", 8)?;
    let seed = resolve(args.seed, &cfg_file, "seed", 0)?;
    let min_freq = resolve(args.min_freq, &cfg_file, "min_freq", 1)?;
    let granularity =
        parse_granularity(&resolve(args.granularity, &cfg_file, "granularity", "word".into())?)?;
    let d_model = resolve(args.d_model, &cfg_file, "d_model", 64)?;
    let n_layers = resolve(args.n_layers, &cfg_file, "n_layers", 2)?;
    let n_heads = resolve(args.n_heads, &cfg_file, "n_heads", 4)?;
    let d_ff = resolve(args.d_ff, &cfg_file, "d_ff", 128)?;
    let dropout = resolve(args.dropout, &cfg_file, "dropout", 0.0)?;

    let pairs = corpus::load_tsv(&args.corpus)?;
    if pairs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let gran_name = match granularity {
        Granularity::Word => "word",
        Granularity::Char => "char",
    };

    let mut resolved = BTreeMap::new();
    for (k, v) in [
        ("command", "train".to_string()),
        ("corpus", args.corpus.display().to_string()),
        ("ckpt", args.ckpt.display().to_string()),
        ("t", t_steps.to_string()),
        ("l", target_len.to_string()),
        ("epochs", epochs.to_string()),
        ("pretrain_epochs", pretrain_epochs.to_string()),
        ("lr", lr.to_string()),
        ("mask_ratio", mask_ratio.to_string()),
        ("batch_size", batch_size.to_string()),
        ("seed", seed.to_string()),
        ("min_freq", min_freq.to_string()),
        ("granularity", gran_name.to_string()),
        ("d_model", d_model.to_string()),
        ("n_layers", n_layers.to_string()),
        ("n_heads", n_heads.to_string()),
        ("d_ff", d_ff.to_string()),
        ("dropout", dropout.to_string()),
    ] {
        resolved.insert(k.to_string(), v);
    }
    echo_config(&resolved);

    let vocab_lines: Vec<String> = pairs
        .iter()
        .map(|(c, t)| format!("{c} {t}"))
        .collect();
    let vocab = Vocab::build(&vocab_lines, granularity, min_freq)?;
    let encoded = corpus::encode_corpus(&pairs, &vocab, target_len)?;
    let max_cond = encoded.iter().map(|p| p.condition.len()).max().unwrap_or(0);
    let needed = max_cond + 1 + target_len;

    let config = ModelConfig {
        vocab_size: vocab.len(),
        d_model,
        n_layers,
        n_heads,
        d_ff,
        max_positions: needed.max(16),
        dropout,
    };
    let mut params = ModelParams::init(config, granularity, seed)?;

    // ratio ladder: later stages mask most of the target so the head
    // stays calibrated at the heavily-masked states the sampler visits
    let ratio_ladder = [mask_ratio, 0.6, 0.9];
    eprintln!(
        "phase 1: masked-LM pretraining ({pretrain_epochs} epochs x {} mask ratios)",
        ratio_ladder.len()
    );
    let mut log1 = model::TrainLog::default();
    for (stage, &ratio) in ratio_ladder.iter().enumerate() {
        let stage_log = model::pretrain_mlm(
            &mut params,
            &encoded,
            target_len,
            ratio,
            pretrain_epochs,
            lr,
            batch_size,
            seed.wrapping_add(stage as u64),
        )?;
        for (i, loss) in stage_log.epoch_losses.iter().enumerate() {
            eprintln!("  pretrain ratio {ratio} epoch {} loss {loss:.6}", i + 1);
        }
        log1.epoch_losses.extend(stage_log.epoch_losses);
    }

    let cache = schedule::entropy_cache(&params, &encoded, target_len)?;
    let noise = NoiseConfig {
        t_steps,
        target_len,
    };
    eprintln!("phase 2: diffusion training ({epochs} epochs)");
    let log2 = schedule::train_ens(
        &mut params,
        &encoded,
        &cache,
        noise,
        epochs,
        lr,
        batch_size,
        seed,
    )?;
    for (i, loss) in log2.epoch_losses.iter().enumerate() {
        eprintln!("  diffusion epoch {} loss {loss:.6}", i + 1);
    }

    let vocab_path = args.ckpt.with_extension("vocab");
    let cache_path = args.ckpt.with_extension("entropy.tsv");
    let log_path = args.ckpt.with_extension("log");
    model::save_checkpoint(&params, &args.ckpt)?;
    vocab.save(&vocab_path)?;

    let mut cache_text = String::new();
    for (idx, (positions, entropies)) in cache.iter().enumerate() {
        let cols: Vec<String> = positions
            .iter()
            .zip(entropies)
            .map(|(p, h)| format!("{p}:{h:.12}"))
            .collect();
        let _ = writeln!(cache_text, "{idx}\t{}", cols.join(" "));
    }
    write_file(&cache_path, &cache_text)?;

    let mut log_text = String::new();
    for (k, v) in &resolved {
        let _ = writeln!(log_text, "{k}={v}");
    }
    for (i, loss) in log1.epoch_losses.iter().enumerate() {
        let _ = writeln!(log_text, "pretrain\t{}\t{loss:.12}", i + 1);
    }
    for (i, loss) in log2.epoch_losses.iter().enumerate() {
        let _ = writeln!(log_text, "diffusion\t{}\t{loss:.12}", i + 1);
    }
    write_file(&log_path, &log_text)?;
    eprintln!("wrote {}", args.ckpt.display());
    Ok(TrainOutputs {
        ckpt: args.ckpt,
        vocab: vocab_path,
        entropy_cache: cache_path,
        log: log_path,
    })
}

// ---------------------------------------------------------------------------
// generate / infill
// ---------------------------------------------------------------------------

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Vocab file; defaults to the checkpoint path with a .vocab extension.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// One condition per line.
    #[arg(long)]
    pub conditions: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "generations.tsv")]
    pub out: PathBuf,
    /// Optional trace file (one row per step per candidate).
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long)]
    pub t: Option<usize>,
    #[arg(long)]
    pub l: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub n_candidates: Option<usize>,
    #[arg(long)]
    pub n_keep: Option<usize>,
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Argmax decoding instead of categorical sampling.
    #[arg(long)]
    pub greedy: bool,
    /// Run candidate chains in parallel (identical outputs to serial).
    #[arg(long)]
    pub parallel: bool,
}

#[derive(Args, Debug)]
pub struct InfillArgs {
    #[command(flatten)]
    pub gen: GenerateArgs,
    /// Keyword spec file: one line per condition line, entries
    /// `position:token` separated by spaces (position is a 0-based
    /// target offset).
    #[arg(long)]
    pub keywords: PathBuf,
}

fn load_model(ckpt: &Path, vocab_flag: &Option<PathBuf>) -> Result<(ModelParams, Vocab)> {
    let params = model::load_checkpoint(ckpt)?;
    let vocab_path = vocab_flag
        .clone()
        .unwrap_or_else(|| ckpt.with_extension("vocab"));
    let vocab = Vocab::load(&vocab_path, params.granularity)?;
    if vocab.len() != params.config.vocab_size {
        return Err(Error::Config(format!(
            "vocab file has {} entries but checkpoint expects {}",
            vocab.len(),
            params.config.vocab_size
        )));
    }
    Ok((params, vocab))
}

fn read_condition_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(|l| l.trim_end_matches('\r').to_string())
        .filter(|l| !l.is_empty())
        .collect())
}

fn resolve_sample_config(
    args: &GenerateArgs,
    cfg_file: &BTreeMap<String, String>,
) -> Result<(SampleConfig, BTreeMap<String, String>)> {
    let mode: Mode = resolve(
        args.mode.clone(),
        cfg_file,
        "mode",
        "eags".to_string(),
    )?
    .parse()?;
    let cfg = SampleConfig {
        t_steps: resolve(args.t, cfg_file, "t", 5)?,
        target_len: resolve(args.l, cfg_file, "l", 12)?,
        temperature: resolve(args.temperature, cfg_file, "temperature", 1.0)?,
        n_candidates: resolve(args.n_candidates, cfg_file, "n_candidates", 20)?,
        n_keep: resolve(args.n_keep, cfg_file, "n_keep", 5)?,
        mode,
        seed: resolve(args.seed, cfg_file, "seed", 0)?,
        greedy: args.greedy,
        parallel: args.parallel,
    };
    cfg.validate()?;
    let mut resolved = BTreeMap::new();
    for (k, v) in [
        ("ckpt", args.ckpt.display().to_string()),
        ("conditions", args.conditions.display().to_string()),
        ("out", args.out.display().to_string()),
        ("t", cfg.t_steps.to_string()),
        ("l", cfg.target_len.to_string()),
        ("temperature", cfg.temperature.to_string()),
        ("n_candidates", cfg.n_candidates.to_string()),
        ("n_keep", cfg.n_keep.to_string()),
        ("mode", cfg.mode.to_string()),
        ("seed", cfg.seed.to_string()),
        ("greedy", cfg.greedy.to_string()),
        ("parallel", cfg.parallel.to_string()),
    ] {
        resolved.insert(k.to_string(), v);
    }
    Ok((cfg, resolved))
}

fn parse_keyword_line(line: &str, vocab: &Vocab, target_len: usize, lineno: usize) -> Result<Vec<KeywordSpan>> {
    let mut spans = Vec::new();
    for entry in line.split_whitespace() {
        let (pos, token) = entry.split_once(':').ok_or_else(|| {
            Error::Config(format!(
                "keyword line {lineno}: entry {entry} is not position:token"
            ))
        })?;
        let offset: usize = pos.parse().map_err(|_| {
            Error::Config(format!("keyword line {lineno}: bad position {pos}"))
        })?;
        if offset >= target_len {
            return Err(Error::Config(format!(
                "keyword line {lineno}: position {offset} >= L {target_len}"
            )));
        }
        let id = vocab.id(token);
        if id == UNK && token != "[UNK]" {
            return Err(Error::Config(format!(
                "keyword line {lineno}: token {token} not in vocabulary"
            )));
        }
        spans.push(KeywordSpan {
            offset,
            tokens: vec![id],
        });
    }
    Ok(spans)
}

fn run_generation(
    args: &GenerateArgs,
    keywords: Option<&Path>,
    command_name: &str,
) -> Result<()> {
    let cfg_file = match &args.config {
        Some(p) => parse_kv_file(p)?,
        None => BTreeMap::new(),
    };
    let (cfg, mut resolved) = resolve_sample_config(args, &cfg_file)?;
    resolved.insert("command".into(), command_name.into());
    echo_config(&resolved);

    let (params, vocab) = load_model(&args.ckpt, &args.vocab)?;
    let conditions = read_condition_lines(&args.conditions)?;
    let keyword_lines: Option<Vec<String>> = match keywords {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let lines: Vec<String> = text
                .lines()
                .map(|l| l.trim_end_matches('\r').to_string())
                .collect();
            if lines.len() < conditions.len() {
                return Err(Error::Config(format!(
                    "keyword file has {} lines but {} conditions given",
                    lines.len(),
                    conditions.len()
                )));
            }
            Some(lines)
        }
        None => None,
    };

    let mut out_text = String::new();
    let mut trace_text = String::new();
    for (ci, condition) in conditions.iter().enumerate() {
        let cond_ids = vocab.encode_text(condition);
        let spans = match &keyword_lines {
            Some(lines) => parse_keyword_line(&lines[ci], &vocab, cfg.target_len, ci + 1)?,
            None => Vec::new(),
        };
        // each condition gets its own deterministic sub-stream
        let mut cond_cfg = cfg.clone();
        cond_cfg.seed = cfg.seed.wrapping_add(0x9e3779b97f4a7c15u64.wrapping_mul(ci as u64 + 1));
        let all = sampler::generate_all(&params, &cond_ids, &spans, &cond_cfg)?;
        if args.trace.is_some() {
            for tr in &all {
                let run_id = format!("c{ci}_k{}", tr.candidate);
                for step in &tr.steps {
                    let _ = writeln!(
                        trace_text,
                        "{run_id}\t{}\t{:.6}\t{:.6}\t{}",
                        step.t, step.total_entropy, step.total_energy, step.n_masked
                    );
                }
                let _ = writeln!(
                    trace_text,
                    "{run_id}\t0\t{:.6}\t{:.6}\t0",
                    tr.final_entropy, tr.final_energy
                );
            }
        }
        let kept = sampler::select_best(all, cfg.n_keep);
        for tr in &kept {
            let _ = writeln!(
                out_text,
                "{condition}\t{}\t{:.6}",
                tr.final_text(&vocab),
                tr.pseudo_ppl
            );
        }
    }
    write_file(&args.out, &out_text)?;
    if let Some(trace_path) = &args.trace {
        write_file(trace_path, &trace_text)?;
    }
    eprintln!("wrote {}", args.out.display());
    Ok(())
}

pub fn run_generate(args: GenerateArgs) -> Result<()> {
    run_generation(&args, None, "generate")
}

pub fn run_infill(args: InfillArgs) -> Result<()> {
    run_generation(&args.gen, Some(&args.keywords), "infill")
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Generation output file (`condition<TAB>text<TAB>pseudo_ppl`).
    #[arg(long)]
    pub input: PathBuf,
    /// Optional second run for a side-by-side comparison.
    #[arg(long)]
    pub compare: Option<PathBuf>,
    /// Report output path; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Max n-gram order for self-BLEU.
    #[arg(long, default_value_t = 2)]
    pub max_n: usize,
}

#[derive(Debug, Clone)]
pub struct ConditionMetrics {
    pub condition: String,
    pub pseudo_ppl_mean: f64,
    pub vs_ngram: f64,
    pub self_bleu: f64,
    pub distinct_1: f64,
    pub distinct_2: f64,
}

/// Parses a generation output file into (condition, samples, ppls) groups
/// in first-seen order. Samples are whitespace-tokenized into opaque ids.
fn load_generation_file(path: &Path) -> Result<Vec<(String, Vec<Vec<usize>>, Vec<f64>)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut interner: BTreeMap<String, usize> = BTreeMap::new();
    let mut groups: Vec<(String, Vec<Vec<usize>>, Vec<f64>)> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 3 {
            return Err(Error::CorpusFormat {
                path: path.to_path_buf(),
                line: i + 1,
                details: "expected condition<TAB>text<TAB>pseudo_ppl".into(),
            });
        }
        let ppl: f64 = parts[2].parse().map_err(|_| Error::CorpusFormat {
            path: path.to_path_buf(),
            line: i + 1,
            details: format!("bad pseudo_ppl value {}", parts[2]),
        })?;
        let tokens: Vec<usize> = parts[1]
            .split_whitespace()
            .map(|w| {
                let next = interner.len();
                *interner.entry(w.to_string()).or_insert(next)
            })
            .collect();
        match groups.iter_mut().find(|(c, _, _)| c == parts[0]) {
            Some((_, samples, ppls)) => {
                samples.push(tokens);
                ppls.push(ppl);
            }
            None => groups.push((parts[0].to_string(), vec![tokens], vec![ppl])),
        }
    }
    if groups.is_empty() {
        return Err(Error::CorpusFormat {
            path: path.to_path_buf(),
            line: 0,
            details: "file contains no rows".into(),
        });
    }
    Ok(groups)
}

pub fn eval_file(path: &Path, max_n: usize) -> Result<Vec<ConditionMetrics>> {
    let groups = load_generation_file(path)?;
    let mut rows = Vec::with_capacity(groups.len());
    for (condition, samples, ppls) in groups {
        let self_bleu = if samples.len() >= 2 {
            metrics::self_bleu(&samples, max_n)?
        } else {
            1.0
        };
        let distinct_2 = if samples.iter().any(|s| s.len() >= 2) {
            metrics::distinct_n(&samples, 2)?
        } else {
            1.0
        };
        rows.push(ConditionMetrics {
            condition,
            pseudo_ppl_mean: ppls.iter().sum::<f64>() / ppls.len() as f64,
            vs_ngram: metrics::vendi_ngram_12(&samples)?,
            self_bleu,
            distinct_1: metrics::distinct_n(&samples, 1)?,
            distinct_2,
        });
    }
    Ok(rows)
}

fn report_text(rows: &[ConditionMetrics]) -> String {
    let mut out = String::from(
        "condition_id\tpseudo_ppl_mean\tvs_ngram\tself_bleu\tdistinct_1\tdistinct_2\n",
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            r.condition, r.pseudo_ppl_mean, r.vs_ngram, r.self_bleu, r.distinct_1, r.distinct_2
        );
    }
    out
}

fn overall_means(rows: &[ConditionMetrics]) -> [f64; 5] {
    let n = rows.len() as f64;
    [
        rows.iter().map(|r| r.pseudo_ppl_mean).sum::<f64>() / n,
        rows.iter().map(|r| r.vs_ngram).sum::<f64>() / n,
        rows.iter().map(|r| r.self_bleu).sum::<f64>() / n,
        rows.iter().map(|r| r.distinct_1).sum::<f64>() / n,
        rows.iter().map(|r| r.distinct_2).sum::<f64>() / n,
    ]
}

pub fn run_eval(args: EvalArgs) -> Result<()> {
    let rows = eval_file(&args.input, args.max_n)?;
    let mut out = report_text(&rows);
    if let Some(other) = &args.compare {
        let other_rows = eval_file(other, args.max_n)?;
        let a = overall_means(&rows);
        let b = overall_means(&other_rows);
        let _ = writeln!(out, "\nmetric\t{}\t{}", args.input.display(), other.display());
        for (name, i) in [
            ("pseudo_ppl_mean", 0),
            ("vs_ngram", 1),
            ("self_bleu", 2),
            ("distinct_1", 3),
            ("distinct_2", 4),
        ] {
            let _ = writeln!(out, "{name}\t{:.6}\t{:.6}", a[i], b[i]);
        }
    }
    match &args.out {
        Some(path) => write_file(path, &out)?,
        None => print!("{out}"),
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// trace-plot-export
// ---------------------------------------------------------------------------

#[derive(Args, Debug)]
pub struct TraceExportArgs {
    /// Trace file produced by generate/infill `--trace`.
    #[arg(long)]
    pub trace: PathBuf,
    /// Summary output path; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run_trace_export(args: TraceExportArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.trace).map_err(|e| Error::io(&args.trace, e))?;
    // step -> (entropies, energies)
    let mut by_step: BTreeMap<usize, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 5 {
            return Err(Error::CorpusFormat {
                path: args.trace.clone(),
                line: i + 1,
                details: "expected run_id, step, total_entropy, total_energy, n_masked".into(),
            });
        }
        let step: usize = parts[1].parse().map_err(|_| Error::CorpusFormat {
            path: args.trace.clone(),
            line: i + 1,
            details: format!("bad step {}", parts[1]),
        })?;
        let entropy: f64 = parts[2].parse().map_err(|_| Error::CorpusFormat {
            path: args.trace.clone(),
            line: i + 1,
            details: format!("bad entropy {}", parts[2]),
        })?;
        let energy: f64 = parts[3].parse().map_err(|_| Error::CorpusFormat {
            path: args.trace.clone(),
            line: i + 1,
            details: format!("bad energy {}", parts[3]),
        })?;
        let slot = by_step.entry(step).or_default();
        slot.0.push(entropy);
        slot.1.push(energy);
    }
    let mut out = String::from("step\tmean_entropy\tstd_entropy\tmean_energy\tstd_energy\tn_runs\n");
    for (step, (entropies, energies)) in by_step.iter().rev() {
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let std = |v: &[f64], m: f64| {
            (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
        };
        let (me, mg) = (mean(entropies), mean(energies));
        let _ = writeln!(
            out,
            "{step}\t{me:.6}\t{:.6}\t{mg:.6}\t{:.6}\t{}",
            std(entropies, me),
            std(energies, mg),
            entropies.len()
        );
    }
    match &args.out {
        Some(path) => write_file(path, &out)?,
        None => print!("{out}"),
    }
    Ok(())
}

/// Dispatches a parsed command; the binary maps errors to exit codes.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => run_train(args).map(|_| ()),
        Command::Generate(args) => run_generate(args),
        Command::Infill(args) => run_infill(args),
        Command::Eval(args) => run_eval(args),
        Command::TracePlotExport(args) => run_trace_export(args),
        Command::Synth(args) => run_synth(args),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_file_parse_and_resolution() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "# comment\nt=7\nlr = 0.01\n\n").unwrap();
        let map = parse_kv_file(&path).unwrap();
        assert_eq!(map.get("t").unwrap(), "7");
        // flag wins over file; file wins over default
        assert_eq!(resolve(Some(3usize), &map, "t", 5).unwrap(), 3);
        assert_eq!(resolve(None::<usize>, &map, "t", 5).unwrap(), 7);
        assert_eq!(resolve(None::<usize>, &map, "absent", 5).unwrap(), 5);
        assert!(resolve(None::<usize>, &map, "lr", 5).is_err()); // not a usize
    }

    #[test]
    fn kv_file_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.cfg");
        std::fs::write(&path, "no equals sign\n").unwrap();
        assert!(parse_kv_file(&path).is_err());
    }

    #[test]
    fn generation_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gen.tsv");
        std::fs::write(&path, "c1\ta b c\t3.5\nc1\ta b d\t2.0\nc2\tx y z\t4.0\n").unwrap();
        let groups = load_generation_file(&path).unwrap();
        assert_eq!(groups.len(), 2);
        assert_eq!(groups[0].1.len(), 2);
        assert_eq!(groups[0].2, vec![3.5, 2.0]);

        std::fs::write(&path, "only two\tfields\n").unwrap();
        let err = load_generation_file(&path).unwrap_err();
        assert!(err.to_string().contains("line 1"));
    }

    #[test]
    fn eval_identical_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gen.tsv");
        let mut text = String::new();
        for _ in 0..5 {
            text.push_str("c1\ta b c\t2.0\n");
        }
        std::fs::write(&path, text).unwrap();
        let rows = eval_file(&path, 2).unwrap();
        assert!((rows[0].vs_ngram - 1.0).abs() < 1e-9);
        assert!((rows[0].self_bleu - 1.0).abs() < 1e-9);
        assert!((rows[0].pseudo_ppl_mean - 2.0).abs() < 1e-12);
    }

    #[test]
    fn eval_disjoint_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gen.tsv");
        let mut text = String::new();
        for i in 0..5 {
            text.push_str(&format!("c1\tw{i}a w{i}b w{i}c\t2.0\n"));
        }
        std::fs::write(&path, text).unwrap();
        let rows = eval_file(&path, 2).unwrap();
        assert!((rows[0].vs_ngram - 5.0).abs() < 1e-9);
        assert_eq!(rows[0].self_bleu, 0.0);
        assert_eq!(rows[0].distinct_1, 1.0);
    }

    #[test]
    fn keyword_parsing() {
        let lines: Vec<String> = vec!["a b c d".into()];
        let vocab = Vocab::build(&lines, Granularity::Word, 1).unwrap();
        let spans = parse_keyword_line("0:a 3:c", &vocab, 6, 1).unwrap();
        assert_eq!(spans.len(), 2);
        assert_eq!(spans[0].offset, 0);
        assert_eq!(spans[0].tokens, vec![vocab.id("a")]);
        assert!(parse_keyword_line("9:a", &vocab, 6, 1).is_err()); // position >= L
        assert!(parse_keyword_line("0:zzz", &vocab, 6, 1).is_err()); // OOV
        assert!(parse_keyword_line("nonsense", &vocab, 6, 1).is_err());
    }
}

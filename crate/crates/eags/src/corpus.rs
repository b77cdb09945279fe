//! Tokenization, vocabulary, and corpus ingestion for conditional pairs.
//!
//! Sequences follow the layout `[Y, SEP, X]`: the condition on the left,
//! one separator, then the target region of fixed length `L` (short
//! targets are padded with PAD; PAD positions are permanently fixed).

use crate::error::{Error, Result};
use std::collections::HashMap;
use std::fmt;
use std::path::Path;

pub const MASK: usize = 0;
pub const PAD: usize = 1;
pub const SEP: usize = 2;
pub const UNK: usize = 3;
pub const NUM_SPECIALS: usize = 4;
pub const SPECIAL_TOKENS: [&str; NUM_SPECIALS] = ["[MASK]", "[PAD]", "[SEP]", "[UNK]"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Granularity {
    Word,
    Char,
}

impl Granularity {
    fn split(self, line: &str) -> Vec<String> {
        match self {
            Granularity::Word => line.split_whitespace().map(str::to_owned).collect(),
            Granularity::Char => line
                .chars()
                .filter(|c| !c.is_whitespace())
                .map(String::from)
                .collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
    granularity: Granularity,
}

impl Vocab {
    /// Builds a vocabulary from raw lines: all tokens with frequency
    /// >= `min_freq`, ordered by frequency descending then lexicographic,
    /// after the four reserved specials.
    pub fn build(lines: &[String], granularity: Granularity, min_freq: usize) -> Result<Self> {
        if lines.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut freq: HashMap<String, usize> = HashMap::new();
        for line in lines {
            for tok in granularity.split(line) {
                *freq.entry(tok).or_insert(0) += 1;
            }
        }
        let mut entries: Vec<(String, usize)> = freq
            .into_iter()
            .filter(|(t, c)| *c >= min_freq && !SPECIAL_TOKENS.contains(&t.as_str()))
            .collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(entries.into_iter().map(|(t, _)| t));
        Ok(Self::from_tokens(tokens, granularity))
    }

    fn from_tokens(tokens: Vec<String>, granularity: Granularity) -> Self {
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab {
            tokens,
            ids,
            granularity,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // specials always present
    }

    pub fn content_size(&self) -> usize {
        self.tokens.len() - NUM_SPECIALS
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn id(&self, token: &str) -> usize {
        *self.ids.get(token).unwrap_or(&UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn is_special(id: usize) -> bool {
        id < NUM_SPECIALS
    }

    pub fn encode_text(&self, text: &str) -> Vec<usize> {
        self.granularity
            .split(text)
            .iter()
            .map(|t| self.id(t))
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        let parts: Vec<&str> = ids.iter().map(|&i| self.token(i)).collect();
        match self.granularity {
            Granularity::Word => parts.join(" "),
            Granularity::Char => parts.concat(),
        }
    }

    /// One token per line, line index = id; the first four lines are the
    /// reserved specials.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        // granularity is stored by the checkpoint manifest, not here
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, granularity: Granularity) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens: Vec<String> = text.lines().map(str::to_owned).collect();
        if tokens.len() < NUM_SPECIALS {
            return Err(Error::Checkpoint(format!(
                "vocab file {} has fewer than {NUM_SPECIALS} lines",
                path.display()
            )));
        }
        for (i, s) in SPECIAL_TOKENS.iter().enumerate() {
            if tokens[i] != *s {
                return Err(Error::Checkpoint(format!(
                    "vocab line {i} must be {s}, found {}",
                    tokens[i]
                )));
            }
        }
        Ok(Self::from_tokens(tokens, granularity))
    }
}

/// One condition/target pair, encoded and raw.
#[derive(Debug, Clone)]
pub struct CondPair {
    pub condition: Vec<usize>,
    pub target: Vec<usize>,
    pub raw_condition: String,
    pub raw_target: String,
}

pub fn encode_pair(
    raw_condition: &str,
    raw_target: &str,
    vocab: &Vocab,
    max_target_len: usize,
    line: usize,
) -> Result<CondPair> {
    let target = vocab.encode_text(raw_target);
    if target.len() > max_target_len {
        return Err(Error::TargetTooLong {
            line,
            len: target.len(),
            max: max_target_len,
        });
    }
    Ok(CondPair {
        condition: vocab.encode_text(raw_condition),
        target,
        raw_condition: raw_condition.to_string(),
        raw_target: raw_target.to_string(),
    })
}

/// Reads `condition<TAB>target` lines. Empty lines are skipped; CRLF and
/// LF endings are both accepted.
pub fn load_tsv(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut pairs = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        match line.split_once('\t') {
            Some((c, t)) => pairs.push((c.to_string(), t.to_string())),
            None => {
                return Err(Error::CorpusFormat {
                    path: path.to_path_buf(),
                    line: idx + 1,
                    details: "expected condition<TAB>target".into(),
                })
            }
        }
    }
    Ok(pairs)
}

pub fn encode_corpus(
    pairs: &[(String, String)],
    vocab: &Vocab,
    max_target_len: usize,
) -> Result<Vec<CondPair>> {
    pairs
        .iter()
        .enumerate()
        .map(|(i, (c, t))| encode_pair(c, t, vocab, max_target_len, i + 1))
        .collect()
}

/// A conditioned token sequence `[Y, SEP, X]` with per-position flags;
/// the state of the diffusion chain.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSeq {
    pub ids: Vec<usize>,
    pub is_condition: Vec<bool>,
    pub is_fixed: Vec<bool>,
    pub timestep: usize,
    /// Index of the first target-region position (= |Y| + 1).
    pub x_start: usize,
}

impl TokenSeq {
    /// Builds `[Y, SEP, X]` from a pair, padding the target to `target_len`
    /// with PAD. PAD positions are fixed forever.
    pub fn from_pair(condition: &[usize], target: &[usize], target_len: usize) -> Self {
        assert!(target.len() <= target_len);
        let x_start = condition.len() + 1;
        let mut ids = Vec::with_capacity(x_start + target_len);
        ids.extend_from_slice(condition);
        ids.push(SEP);
        ids.extend_from_slice(target);
        ids.resize(x_start + target_len, PAD);
        let mut is_condition = vec![true; x_start];
        is_condition.resize(ids.len(), false);
        let mut is_fixed = vec![true; x_start];
        for i in 0..target_len {
            is_fixed.push(i >= target.len()); // PAD positions fixed
        }
        TokenSeq {
            ids,
            is_condition,
            is_fixed,
            timestep: 0,
            x_start,
        }
    }

    /// Fully masked target of length `target_len` (generation start state).
    pub fn masked(condition: &[usize], target_len: usize) -> Self {
        let mut seq = Self::from_pair(condition, &vec![MASK; target_len], target_len);
        for i in seq.x_start..seq.len() {
            seq.is_fixed[i] = false;
        }
        seq
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn target_len(&self) -> usize {
        self.ids.len() - self.x_start
    }

    /// Target-region positions that hold real content (not PAD).
    pub fn content_positions(&self) -> Vec<usize> {
        (self.x_start..self.len())
            .filter(|&i| self.ids[i] != PAD)
            .collect()
    }

    pub fn masked_positions(&self) -> Vec<usize> {
        (self.x_start..self.len())
            .filter(|&i| self.ids[i] == MASK)
            .collect()
    }

    pub fn target_ids(&self) -> &[usize] {
        &self.ids[self.x_start..]
    }

    /// Structural validity check; call after any mutation in tests.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.is_condition.len() != n || self.is_fixed.len() != n {
            return Err(Error::Invariant("flag vectors disagree with ids".into()));
        }
        for i in 0..n {
            if self.is_condition[i] && !self.is_fixed[i] {
                return Err(Error::Invariant(format!(
                    "condition position {i} is not fixed"
                )));
            }
            if self.is_fixed[i] && self.ids[i] == MASK {
                return Err(Error::Invariant(format!(
                    "MASK at fixed position {i}"
                )));
            }
        }
        Ok(())
    }
}

impl fmt::Display for TokenSeq {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?} (x_start={})", self.ids, self.x_start)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lines(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn build_vocab_counts() {
        let v = Vocab::build(&lines(&["a b", "a c"]), Granularity::Word, 1).unwrap();
        assert_eq!(v.len(), 7);
        // frequency desc then lexicographic: a(2), b(1), c(1)
        assert_eq!(v.token(NUM_SPECIALS), "a");
        assert_eq!(v.token(NUM_SPECIALS + 1), "b");
        assert_eq!(v.token(NUM_SPECIALS + 2), "c");
    }

    #[test]
    fn build_vocab_min_freq() {
        let v = Vocab::build(&lines(&["a b", "a c"]), Granularity::Word, 2).unwrap();
        assert_eq!(v.len(), 5);
        assert_eq!(v.token(NUM_SPECIALS), "a");
    }

    #[test]
    fn build_vocab_deterministic_under_shuffle() {
        let a = Vocab::build(&lines(&["a b", "a c", "d d"]), Granularity::Word, 1).unwrap();
        let b = Vocab::build(&lines(&["d d", "a c", "a b"]), Granularity::Word, 1).unwrap();
        assert_eq!(a.tokens, b.tokens);
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(Vocab::build(&[], Granularity::Word, 1).is_err());
    }

    #[test]
    fn encode_pair_basic_and_oov() {
        let v = Vocab::build(&lines(&["a b c"]), Granularity::Word, 1).unwrap();
        let p = encode_pair("a b", "c", &v, 8, 1).unwrap();
        assert_eq!(p.condition, vec![v.id("a"), v.id("b")]);
        assert_eq!(p.target, vec![v.id("c")]);
        assert_eq!(v.encode_text("zzz"), vec![UNK]);
    }

    #[test]
    fn encode_decode_round_trip() {
        let v = Vocab::build(&lines(&["the cat sat on a mat"]), Granularity::Word, 1).unwrap();
        let s = "cat on mat";
        assert_eq!(v.decode(&v.encode_text(s)), s);
    }

    #[test]
    fn target_too_long_names_line() {
        let v = Vocab::build(&lines(&["a b c"]), Granularity::Word, 1).unwrap();
        let err = encode_pair("a", "a b c", &v, 2, 7).unwrap_err();
        assert!(err.to_string().contains("line 7"));
    }

    #[test]
    fn load_tsv_variants() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.tsv");
        std::fs::write(&path, "a\tb\r\n\nc d\te f\n").unwrap();
        let pairs = load_tsv(&path).unwrap();
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[0], ("a".to_string(), "b".to_string()));
        assert_eq!(pairs[1], ("c d".to_string(), "e f".to_string()));

        std::fs::write(&path, "no tab here\n").unwrap();
        let err = load_tsv(&path).unwrap_err();
        assert!(err.to_string().contains("line 1"));
    }

    #[test]
    fn vocab_save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = Vocab::build(&lines(&["a b", "a c"]), Granularity::Word, 1).unwrap();
        v.save(&path).unwrap();
        let w = Vocab::load(&path, Granularity::Word).unwrap();
        assert_eq!(v.tokens, w.tokens);
    }

    #[test]
    fn token_seq_layout_and_padding() {
        let seq = TokenSeq::from_pair(&[5, 6], &[7], 3);
        assert_eq!(seq.ids, vec![5, 6, SEP, 7, PAD, PAD]);
        assert_eq!(seq.x_start, 3);
        assert!(seq.is_fixed[4] && seq.is_fixed[5]);
        assert!(!seq.is_fixed[3]);
        assert_eq!(seq.content_positions(), vec![3]);
        seq.validate().unwrap();
    }

    #[test]
    fn masked_seq_all_masked() {
        let seq = TokenSeq::masked(&[5], 4);
        assert_eq!(seq.masked_positions().len(), 4);
        seq.validate().unwrap();
    }

    #[test]
    fn validate_catches_fixed_mask() {
        let mut seq = TokenSeq::from_pair(&[5], &[6, 7], 2);
        seq.is_fixed[2] = true;
        seq.ids[2] = MASK;
        assert!(seq.validate().is_err());
    }
}

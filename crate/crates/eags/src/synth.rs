//! Deterministic synthetic PCFG corpus for end-to-end tests and demos.
//!
//! Eight topics, each with its own noun/verb/adjective inventory, and
//! three styles that each select a fixed 12-token sentence template.
//! Function words are fully determined by the style, so some target
//! positions are deterministic given the condition while the content
//! slots stay genuinely stochastic.
//!
//! Each sentence draws a single pivot noun uniformly from the topic's 15
//! nouns; the pivot's 5-noun block determines a latent group g in 0..3,
//! and every "group word" slot then carries the topic's g-th group word
//! deterministically. Verbs and adjectives are drawn independently of g.
//!
//! The inventory sizes are chosen so that the per-position entropy
//! ordering is the same under the clean-context view (each position
//! masked with the rest of the sentence visible, the view that plans the
//! forward noising) and under the fully-masked marginal view (the view
//! that drives generation-time selection):
//!
//! | slot       | clean-context H | marginal H |
//! |------------|-----------------|------------|
//! | pivot      | ln 5  ≈ 1.61    | ln 15 ≈ 2.71 |
//! | verb (x3)  | ln 4  ≈ 1.39    | ln 4  ≈ 1.39 |
//! | adj (x2)   | ln 3  ≈ 1.10    | ln 3  ≈ 1.10 |
//! | group (x3) | 0               | ln 3  ≈ 1.10 |
//! | func (x3)  | 0               | 0          |
//!
//! Every template places exactly 3 function words, 3 group words, 3
//! verbs, 2 adjectives, and the pivot. With L=12 and T=4 (per-step quota
//! 3) decoding order therefore matters: highest-entropy-first reveals
//! the pivot in its first step, so the later all-group step is fully
//! determined and consistent; lowest-entropy-first commits the three
//! mutually-constrained group words from their flat marginals before the
//! pivot is known and mixes groups most of the time; one-shot decoding
//! draws everything independently and mixes even more — exactly the
//! contrast entropy-adaptive ordering exploits.

use crate::stream_rng;
use rand::seq::SliceRandom;
use rand::Rng;

pub const N_TOPICS: usize = 8;
pub const NOUNS_PER_TOPIC: usize = 15;
pub const VERBS_PER_TOPIC: usize = 4;
pub const ADJS_PER_TOPIC: usize = 3;
pub const TARGET_LEN: usize = 12;

pub const STYLES: [&str; 3] = ["plain", "fancy", "query"];

fn noun(topic: usize, k: usize) -> String {
    format!("t{topic}n{k}")
}

fn verb(topic: usize, k: usize) -> String {
    format!("t{topic}v{k}")
}

fn adj(topic: usize, k: usize) -> String {
    format!("t{topic}a{k}")
}

fn topic_word(topic: usize) -> String {
    format!("topic{topic}")
}

/// All distinct conditions, in deterministic order.
pub fn conditions() -> Vec<String> {
    let mut out = Vec::new();
    for topic in 0..N_TOPICS {
        for style in STYLES {
            out.push(format!("{} {style}", topic_word(topic)));
        }
    }
    out
}

pub const N_GROUPS: usize = 3;
pub const NOUNS_PER_GROUP: usize = NOUNS_PER_TOPIC / N_GROUPS;

/// The deterministic word occupying every group-word slot once the
/// pivot noun fixes the latent group.
pub fn group_word(topic: usize, g: usize) -> String {
    format!("t{topic}g{g}")
}

fn sentence(topic: usize, style: usize, rng: &mut impl Rng) -> String {
    // pivot noun pins the latent group; group-word slots follow it
    let pivot_k = rng.gen_range(0..NOUNS_PER_TOPIC);
    let g = pivot_k / NOUNS_PER_GROUP;
    let pivot = noun(topic, pivot_k);
    let gw = || group_word(topic, g);
    let v = |rng: &mut dyn rand::RngCore| verb(topic, rng.gen_range(0..VERBS_PER_TOPIC));
    let a = |rng: &mut dyn rand::RngCore| adj(topic, rng.gen_range(0..ADJS_PER_TOPIC));
    let words: Vec<String> = if style == 0 {
        // the ADJ PIVOT V G and G V ADJ G V now
        vec![
            "the".into(),
            a(rng),
            pivot,
            v(rng),
            gw(),
            "and".into(),
            gw(),
            v(rng),
            a(rng),
            gw(),
            v(rng),
            "now".into(),
        ]
    } else if style == 1 {
        // some PIVOT V ADJ G while G V G ADJ V today
        vec![
            "some".into(),
            pivot,
            v(rng),
            a(rng),
            gw(),
            "while".into(),
            gw(),
            v(rng),
            gw(),
            a(rng),
            v(rng),
            "today".into(),
        ]
    } else {
        // did G V PIVOT or G ADJ V G ADJ V then
        vec![
            "did".into(),
            gw(),
            v(rng),
            pivot,
            "or".into(),
            gw(),
            a(rng),
            v(rng),
            gw(),
            a(rng),
            v(rng),
            "then".into(),
        ]
    };
    debug_assert_eq!(words.len(), TARGET_LEN);
    words.join(" ")
}

/// `n_pairs` condition/target pairs, uniformly over topic x style, in a
/// deterministic seeded order.
pub fn pcfg_corpus(n_pairs: usize, seed: u64) -> Vec<(String, String)> {
    let mut rng = stream_rng(seed, "pcfg");
    let mut combos: Vec<(usize, usize)> = Vec::new();
    for topic in 0..N_TOPICS {
        for style in 0..STYLES.len() {
            combos.push((topic, style));
        }
    }
    let mut pairs = Vec::with_capacity(n_pairs);
    for i in 0..n_pairs {
        let &(topic, style) = if i < combos.len() {
            &combos[i] // cover every condition at least once
        } else {
            combos.choose(&mut rng).unwrap()
        };
        let condition = format!("{} {}", topic_word(topic), STYLES[style]);
        pairs.push((condition, sentence(topic, style, &mut rng)));
    }
    pairs
}

//! Deterministic synthetic "languages": order-2 Markov class grammars over
//! disjoint private lexicons plus a shared function-token set.
//!
//! Ten languages form the default suite. Six are training languages; two
//! evaluation-only languages are family siblings of the first two training
//! languages (same transition table, half-overlapping lexicon); two are
//! unrelated hold-outs. Relatedness is the knob the monolingual-region
//! experiments turn: a sibling shares structure and part of its vocabulary,
//! an unrelated language shares only the function tokens.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SHARED_TOKENS: usize = 32;
pub const PRIVATE_TOKENS: usize = 40;
pub const CLASS_COUNT: usize = 8;
/// Classes 0..FUNCTION_CLASSES emit shared tokens, the rest private ones.
pub const FUNCTION_CLASSES: usize = 2;
pub const DEFAULT_ALPHA: f64 = 0.5;

/// One synthetic language: its token inventory and class-transition grammar.
#[derive(Debug, Clone, PartialEq)]
pub struct LanguageSpec {
    pub id: String,
    pub family: String,
    /// Private (content) tokens, the union of the content classes.
    pub lexicon: Vec<u16>,
    /// Function tokens common to every language in the suite.
    pub shared: Vec<u16>,
    /// Tokens each class emits (uniformly). Indexed by class.
    pub class_tokens: Vec<Vec<u16>>,
    /// Order-2 transition table: `transitions[c1 * CLASS_COUNT + c2][next]`.
    pub transitions: Vec<Vec<f64>>,
    /// Lexicon fraction shared with the family sibling, if any.
    pub overlap_alpha: f64,
}

impl LanguageSpec {
    /// Every token this language can emit.
    pub fn support(&self) -> Vec<u16> {
        let mut s: Vec<u16> = self.lexicon.iter().chain(&self.shared).copied().collect();
        s.sort_unstable();
        s.dedup();
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub language: String,
    pub seq_len: usize,
    pub sequences: Vec<Vec<u16>>,
    pub seed: u64,
}

impl Corpus {
    pub fn token_count(&self) -> usize {
        self.sequences.iter().map(|s| s.len()).sum()
    }
}

/// Suite construction knobs. `alpha` is the sibling lexicon overlap.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteConfig {
    pub alpha: f64,
    pub vocab_size: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig { alpha: DEFAULT_ALPHA, vocab_size: 512 }
    }
}

pub const TRAINING_LANGUAGES: [&str; 6] = ["alpha", "beta", "gamma", "delta", "epsilon", "zeta"];
pub const SIBLING_LANGUAGES: [&str; 2] = ["alpha-kin", "beta-kin"];
pub const UNRELATED_LANGUAGES: [&str; 2] = ["omega", "sigma"];

/// Sibling of a training language, when the suite holds one out.
pub fn sibling_of(language: &str) -> Option<&'static str> {
    match language {
        "alpha" => Some("alpha-kin"),
        "beta" => Some("beta-kin"),
        "alpha-kin" => Some("alpha"),
        "beta-kin" => Some("beta"),
        _ => None,
    }
}

/// Builds the 10-language suite with default knobs: 6 training languages,
/// 2 held-out siblings (kin of `alpha`/`beta`), 2 unrelated hold-outs.
pub fn build_language_suite(seed: u64) -> Vec<LanguageSpec> {
    build_language_suite_with(&SuiteConfig::default(), seed)
}

pub fn build_language_suite_with(cfg: &SuiteConfig, seed: u64) -> Vec<LanguageSpec> {
    let shared: Vec<u16> = (0..SHARED_TOKENS as u16).collect();
    let mut next_free = SHARED_TOKENS as u16;
    let mut alloc = |n: usize| -> Vec<u16> {
        let ids: Vec<u16> = (next_free..next_free + n as u16).collect();
        next_free += n as u16;
        ids
    };

    let mut suite = Vec::new();
    for (i, &name) in TRAINING_LANGUAGES.iter().enumerate() {
        let tokens = alloc(PRIVATE_TOKENS);
        suite.push(assemble_spec(
            name,
            &format!("fam-{name}"),
            tokens,
            &shared,
            language_seed(seed, i as u64),
            cfg.alpha,
        ));
    }
    // Siblings copy the training language's grammar and part of its lexicon.
    for (k, &name) in SIBLING_LANGUAGES.iter().enumerate() {
        let parent = suite[k].clone();
        let shared_count = (cfg.alpha * PRIVATE_TOKENS as f64).ceil() as usize;
        let fresh = alloc(PRIVATE_TOKENS - shared_count);
        suite.push(derive_sibling(&parent, name, shared_count, fresh));
    }
    for (k, &name) in UNRELATED_LANGUAGES.iter().enumerate() {
        let tokens = alloc(PRIVATE_TOKENS);
        suite.push(assemble_spec(
            name,
            &format!("fam-{name}"),
            tokens,
            &shared,
            language_seed(seed, 100 + k as u64),
            cfg.alpha,
        ));
    }
    assert!(
        (next_free as usize) <= cfg.vocab_size,
        "suite needs {} token ids, vocab holds {}",
        next_free,
        cfg.vocab_size
    );
    suite
}

fn language_seed(seed: u64, index: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index)
}

/// Spreads `tokens` over the content classes round-robin.
fn partition_content(tokens: &[u16]) -> Vec<Vec<u16>> {
    let content_classes = CLASS_COUNT - FUNCTION_CLASSES;
    let mut out = vec![Vec::new(); content_classes];
    for (i, &t) in tokens.iter().enumerate() {
        out[i % content_classes].push(t);
    }
    out
}

fn assemble_spec(
    id: &str,
    family: &str,
    lexicon: Vec<u16>,
    shared: &[u16],
    grammar_seed: u64,
    alpha: f64,
) -> LanguageSpec {
    let mut class_tokens: Vec<Vec<u16>> = Vec::with_capacity(CLASS_COUNT);
    let per_fn = shared.len() / FUNCTION_CLASSES;
    for c in 0..FUNCTION_CLASSES {
        class_tokens.push(shared[c * per_fn..(c + 1) * per_fn].to_vec());
    }
    class_tokens.extend(partition_content(&lexicon));
    LanguageSpec {
        id: id.to_string(),
        family: family.to_string(),
        lexicon,
        shared: shared.to_vec(),
        class_tokens,
        transitions: build_transitions(grammar_seed),
        overlap_alpha: alpha,
    }
}

fn derive_sibling(
    parent: &LanguageSpec,
    id: &str,
    shared_count: usize,
    fresh: Vec<u16>,
) -> LanguageSpec {
    // The first `shared_count` lexicon entries (in round-robin class order)
    // are kept, so the shared tokens occupy the same classes in both
    // siblings; the rest are replaced by fresh ids in the same slots.
    let mut lexicon = parent.lexicon.clone();
    let mut fresh_iter = fresh.into_iter();
    for slot in lexicon.iter_mut().skip(shared_count) {
        *slot = fresh_iter.next().expect("enough fresh tokens");
    }
    let mut class_tokens: Vec<Vec<u16>> = parent.class_tokens[..FUNCTION_CLASSES].to_vec();
    class_tokens.extend(partition_content(&lexicon));
    LanguageSpec {
        id: id.to_string(),
        family: parent.family.clone(),
        lexicon,
        shared: parent.shared.clone(),
        class_tokens,
        transitions: parent.transitions.clone(),
        overlap_alpha: parent.overlap_alpha,
    }
}

/// Sparse order-2 table: each two-class context concentrates on four next
/// classes with fixed probabilities, giving the languages a low-entropy
/// structure a sequence model can pick up.
fn build_transitions(seed: u64) -> Vec<Vec<f64>> {
    const WEIGHTS: [f64; 4] = [0.70, 0.18, 0.08, 0.04];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut table = Vec::with_capacity(CLASS_COUNT * CLASS_COUNT);
    for _ in 0..CLASS_COUNT * CLASS_COUNT {
        let mut order: Vec<usize> = (0..CLASS_COUNT).collect();
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut probs = vec![0.0; CLASS_COUNT];
        for (w, &c) in WEIGHTS.iter().zip(&order) {
            probs[c] = *w;
        }
        table.push(probs);
    }
    table
}

/// Samples `n` sequences of `seq_len` tokens from the spec's grammar.
pub fn generate(spec: &LanguageSpec, n: usize, seq_len: usize, seed: u64) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sequences = Vec::with_capacity(n);
    for _ in 0..n {
        let mut classes: Vec<usize> = Vec::with_capacity(seq_len);
        let mut tokens: Vec<u16> = Vec::with_capacity(seq_len);
        for pos in 0..seq_len {
            let class = if pos < 2 {
                rng.random_range(0..CLASS_COUNT)
            } else {
                let ctx = classes[pos - 2] * CLASS_COUNT + classes[pos - 1];
                sample_discrete(&mut rng, spec.transitions[ctx].as_slice())
            };
            classes.push(class);
            let choices = &spec.class_tokens[class];
            tokens.push(choices[rng.random_range(0..choices.len())]);
        }
        sequences.push(tokens);
    }
    Corpus { language: spec.id.clone(), seq_len, sequences, seed }
}

fn sample_discrete(rng: &mut ChaCha8Rng, probs: &[f64]) -> usize {
    let draw: f64 = rng.random_range(0.0..1.0);
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if draw < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Perplexity of a context-free (unigram) predictor on this corpus, with
/// frequencies counted from the corpus itself. Evaluated over the same
/// predicted positions as model perplexity (every token after the first).
pub fn unigram_baseline_ppl(corpus: &Corpus) -> f64 {
    let mut counts = std::collections::HashMap::new();
    let mut total = 0usize;
    for seq in &corpus.sequences {
        for &t in seq {
            *counts.entry(t).or_insert(0usize) += 1;
            total += 1;
        }
    }
    if total == 0 {
        return f64::NAN;
    }
    let mut nll = 0.0;
    let mut predicted = 0usize;
    for seq in &corpus.sequences {
        for &t in &seq[1..] {
            let p = counts[&t] as f64 / total as f64;
            nll -= p.ln();
            predicted += 1;
        }
    }
    (nll / predicted as f64).exp()
}

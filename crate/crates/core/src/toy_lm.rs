//! Character bigram language model stored in the checkpoint container.
//!
//! The single parameter tensor `bigram.logits` has shape `[V, V]`: row is the
//! context symbol, column the next symbol. Training writes smoothed log
//! probabilities; merged models hold arbitrary logits, so inference always
//! re-normalizes each row with a softmax.

use std::collections::{BTreeSet, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dlt::{PerplexityRecord, Split};
use crate::tensor_store::{Tensor, TensorMap};

pub const LOGITS_TENSOR: &str = "bigram.logits";
pub const VOCAB_KEY: &str = "toylm.vocab";
pub const ALPHA_KEY: &str = "toylm.alpha";
const BOS_TOKEN: &str = "<bos>";

#[derive(Debug, Error, PartialEq)]
pub enum ToyLmError {
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("smoothing constant must be positive, got {0}")]
    BadAlpha(f64),
    #[error("symbol {0:?} is not in the vocabulary")]
    UnknownSymbol(String),
    #[error("text is empty; perplexity needs at least one token")]
    EmptyText,
    #[error("not a toy LM checkpoint: {0}")]
    BadCheckpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Symbol {
    Bos,
    Char(char),
}

impl Symbol {
    fn token(&self) -> String {
        match self {
            Symbol::Bos => BOS_TOKEN.to_string(),
            Symbol::Char(c) => c.to_string(),
        }
    }

    fn describe(&self) -> String {
        match self {
            Symbol::Bos => BOS_TOKEN.to_string(),
            Symbol::Char(c) => format!("{c}"),
        }
    }
}

/// What to do with characters outside the vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UnknownPolicy {
    #[default]
    Strict,
    /// Map unknown characters to the reserved BOS symbol.
    Lenient,
}

/// BOS followed by characters in sorted order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    symbols: Vec<Symbol>,
    index: HashMap<Symbol, usize>,
}

impl Vocab {
    pub fn from_chars(chars: impl IntoIterator<Item = char>) -> Vocab {
        let set: BTreeSet<char> = chars.into_iter().collect();
        let symbols: Vec<Symbol> = std::iter::once(Symbol::Bos)
            .chain(set.into_iter().map(Symbol::Char))
            .collect();
        let index = symbols.iter().enumerate().map(|(i, s)| (*s, i)).collect();
        Vocab { symbols, index }
    }

    /// Vocabulary covering every character of every text.
    pub fn from_texts<S: AsRef<str>>(texts: &[S]) -> Vocab {
        Vocab::from_chars(texts.iter().flat_map(|t| t.as_ref().chars().collect::<Vec<_>>()))
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[Symbol] {
        &self.symbols
    }

    pub fn index_of(&self, s: Symbol) -> Result<usize, ToyLmError> {
        self.index
            .get(&s)
            .copied()
            .ok_or_else(|| ToyLmError::UnknownSymbol(s.describe()))
    }

    fn to_json(&self) -> String {
        let tokens: Vec<String> = self.symbols.iter().map(Symbol::token).collect();
        serde_json::to_string(&tokens).expect("string list serializes")
    }

    fn from_json(text: &str) -> Result<Vocab, ToyLmError> {
        let tokens: Vec<String> =
            serde_json::from_str(text).map_err(|e| ToyLmError::BadCheckpoint(format!("vocabulary metadata: {e}")))?;
        let mut chars = Vec::new();
        for (i, tok) in tokens.iter().enumerate() {
            if i == 0 {
                if tok != BOS_TOKEN {
                    return Err(ToyLmError::BadCheckpoint("vocabulary must start with <bos>".into()));
                }
                continue;
            }
            let mut it = tok.chars();
            match (it.next(), it.next()) {
                (Some(c), None) => chars.push(c),
                _ => {
                    return Err(ToyLmError::BadCheckpoint(format!(
                        "vocabulary entry {tok:?} is not a single character"
                    )))
                }
            }
        }
        let vocab = Vocab::from_chars(chars.iter().copied());
        if vocab.len() != tokens.len() {
            return Err(ToyLmError::BadCheckpoint(
                "vocabulary has duplicate or unsorted entries".into(),
            ));
        }
        Ok(vocab)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyLm {
    vocab: Vocab,
    /// Row-major `[V, V]`.
    logits: Vec<f32>,
    alpha: f64,
}

fn transitions(text: &str) -> impl Iterator<Item = (Symbol, Symbol)> + '_ {
    std::iter::once(Symbol::Bos)
        .chain(text.chars().map(Symbol::Char))
        .zip(text.chars().map(Symbol::Char))
}

/// Trains on the corpus' own vocabulary.
pub fn train_bigram<S: AsRef<str>>(corpus: &[S], alpha: f64) -> Result<ToyLm, ToyLmError> {
    train_bigram_with_vocab(corpus, alpha, Vocab::from_texts(corpus))
}

/// `logits[c][c'] = ln((count(c -> c') + alpha) / (rowcount(c) + alpha * V))`.
pub fn train_bigram_with_vocab<S: AsRef<str>>(corpus: &[S], alpha: f64, vocab: Vocab) -> Result<ToyLm, ToyLmError> {
    if corpus.is_empty() {
        return Err(ToyLmError::EmptyCorpus);
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(ToyLmError::BadAlpha(alpha));
    }
    let v = vocab.len();
    let mut counts = vec![0u64; v * v];
    for text in corpus {
        for (ctx, next) in transitions(text.as_ref()) {
            let (r, c) = (vocab.index_of(ctx)?, vocab.index_of(next)?);
            counts[r * v + c] += 1;
        }
    }
    let mut logits = vec![0.0f32; v * v];
    for r in 0..v {
        let row = &counts[r * v..(r + 1) * v];
        let denom = row.iter().sum::<u64>() as f64 + alpha * v as f64;
        for (c, &n) in row.iter().enumerate() {
            logits[r * v + c] = ((n as f64 + alpha) / denom).ln() as f32;
        }
    }
    Ok(ToyLm { vocab, logits, alpha })
}

impl ToyLm {
    pub fn from_logits(vocab: Vocab, logits: Vec<f32>, alpha: f64) -> Result<ToyLm, ToyLmError> {
        let v = vocab.len();
        if v < 2 {
            return Err(ToyLmError::BadCheckpoint(format!("vocabulary size {v} < 2")));
        }
        if logits.len() != v * v {
            return Err(ToyLmError::BadCheckpoint(format!(
                "{} logits for a {v}-symbol vocabulary",
                logits.len()
            )));
        }
        if logits.iter().any(|x| !x.is_finite()) {
            return Err(ToyLmError::BadCheckpoint("non-finite logit".into()));
        }
        Ok(ToyLm { vocab, logits, alpha })
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn to_tensor_map(&self) -> TensorMap {
        let v = self.vocab.len();
        let mut map = TensorMap::new();
        map.insert(
            LOGITS_TENSOR,
            Tensor::from_f32(vec![v, v], &self.logits).expect("logits are V x V"),
        );
        map.metadata_mut().insert(VOCAB_KEY.into(), self.vocab.to_json());
        map.metadata_mut().insert(ALPHA_KEY.into(), self.alpha.to_string());
        map
    }

    pub fn from_tensor_map(map: &TensorMap) -> Result<ToyLm, ToyLmError> {
        let vocab_text = map
            .metadata()
            .get(VOCAB_KEY)
            .ok_or_else(|| ToyLmError::BadCheckpoint(format!("missing {VOCAB_KEY:?} metadata")))?;
        let vocab = Vocab::from_json(vocab_text)?;
        let alpha = map
            .metadata()
            .get(ALPHA_KEY)
            .and_then(|a| a.parse().ok())
            .unwrap_or(f64::NAN);
        let tensor = map
            .get(LOGITS_TENSOR)
            .ok_or_else(|| ToyLmError::BadCheckpoint(format!("missing tensor {LOGITS_TENSOR:?}")))?;
        let v = vocab.len();
        if tensor.shape() != [v, v] {
            return Err(ToyLmError::BadCheckpoint(format!(
                "logits shape {:?} does not match vocabulary size {v}",
                tensor.shape()
            )));
        }
        ToyLm::from_logits(vocab, tensor.to_f32(), alpha)
    }

    fn row_distribution(&self, row: usize) -> Vec<f64> {
        let v = self.vocab.len();
        let logits = &self.logits[row * v..(row + 1) * v];
        let max = logits.iter().fold(f32::NEG_INFINITY, |m, &x| m.max(x)) as f64;
        let exps: Vec<f64> = logits.iter().map(|&x| (x as f64 - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / z).collect()
    }

    fn row_log_distribution(&self, row: usize) -> Vec<f64> {
        let v = self.vocab.len();
        let logits = &self.logits[row * v..(row + 1) * v];
        let max = logits.iter().fold(f32::NEG_INFINITY, |m, &x| m.max(x)) as f64;
        let log_z = max + logits.iter().map(|&x| (x as f64 - max).exp()).sum::<f64>().ln();
        logits.iter().map(|&x| x as f64 - log_z).collect()
    }

    /// Softmax of the context row, indexed like [`Vocab::symbols`].
    pub fn next_token_distribution(&self, context: Symbol) -> Result<Vec<f64>, ToyLmError> {
        Ok(self.row_distribution(self.vocab.index_of(context)?))
    }

    fn resolve(&self, c: char, policy: UnknownPolicy) -> Result<usize, ToyLmError> {
        match (self.vocab.index_of(Symbol::Char(c)), policy) {
            (Ok(i), _) => Ok(i),
            (Err(_), UnknownPolicy::Lenient) => Ok(0),
            (Err(e), UnknownPolicy::Strict) => Err(e),
        }
    }

    /// `(n_tokens, nll_sum)`: every character is one token, first context BOS.
    pub fn nll(&self, text: &str, policy: UnknownPolicy) -> Result<(u64, f64), ToyLmError> {
        let mut prev = 0usize;
        let mut n = 0u64;
        let mut nll = 0.0f64;
        let mut cache: HashMap<usize, Vec<f64>> = HashMap::new();
        for c in text.chars() {
            let next = self.resolve(c, policy)?;
            let row = cache.entry(prev).or_insert_with(|| self.row_log_distribution(prev));
            nll -= row[next];
            n += 1;
            prev = next;
        }
        if n == 0 {
            return Err(ToyLmError::EmptyText);
        }
        Ok((n, nll))
    }

    pub fn perplexity(&self, text: &str, policy: UnknownPolicy) -> Result<f64, ToyLmError> {
        let (n, nll) = self.nll(text, policy)?;
        Ok((nll / n as f64).exp())
    }

    pub fn perplexity_record(
        &self,
        text: &str,
        split: Split,
        doc_id: &str,
        policy: UnknownPolicy,
    ) -> Result<PerplexityRecord, ToyLmError> {
        let (n_tokens, nll_sum) = self.nll(text, policy)?;
        Ok(PerplexityRecord {
            split,
            doc_id: doc_id.to_string(),
            n_tokens,
            nll_sum,
        })
    }

    /// `p(pos) / (p(pos) + p(neg))` after `context`.
    pub fn yes_no_score(&self, context: Symbol, pos: Symbol, neg: Symbol) -> Result<f64, ToyLmError> {
        let row = self.vocab.index_of(context)?;
        let (p, n) = (self.vocab.index_of(pos)?, self.vocab.index_of(neg)?);
        let dist = self.row_distribution(row);
        Ok(dist[p] / (dist[p] + dist[n]))
    }
}

/// Seeded synthetic corpora for desk-scale merge experiments.
pub mod fixtures {
    use super::*;

    const CONSONANTS: &[u8] = b"bcdfghklmnprstvw";
    const VOWELS: &[u8] = b"aeiou";
    const PUNCT: &[u8] = b".,";

    /// Letter-heavy prose: consonant-vowel words, occasional punctuation.
    pub fn letter_corpus(seed: u64, lines: usize) -> Vec<String> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..lines)
            .map(|_| {
                let words = rng.random_range(4..10);
                let mut line = String::new();
                for w in 0..words {
                    if w > 0 {
                        line.push(' ');
                    }
                    let len = rng.random_range(2..8);
                    for i in 0..len {
                        let pool = if i % 2 == 0 { CONSONANTS } else { VOWELS };
                        line.push(pool[rng.random_range(0..pool.len())] as char);
                    }
                    if rng.random_bool(0.1) {
                        line.push(PUNCT[rng.random_range(0..PUNCT.len())] as char);
                    }
                }
                line
            })
            .collect()
    }

    /// Digit-heavy measurement text: integers and one-decimal readings.
    pub fn digit_corpus(seed: u64, lines: usize) -> Vec<String> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..lines)
            .map(|_| {
                let values = rng.random_range(4..10);
                let mut line = String::new();
                for v in 0..values {
                    if v > 0 {
                        line.push(' ');
                    }
                    let int: u32 = rng.random_range(1..400);
                    line.push_str(&int.to_string());
                    if rng.random_bool(0.4) {
                        line.push('.');
                        line.push(char::from_digit(rng.random_range(0..10), 10).unwrap());
                    }
                }
                line
            })
            .collect()
    }

    /// A shipped fixture: two training corpora and a held-out 50/50 mix.
    #[derive(Debug, Clone)]
    pub struct ToyFixture {
        pub letters: Vec<String>,
        pub digits: Vec<String>,
        /// `(id, label, text)`; label 0 = letter text, 1 = digit text.
        pub mixed: Vec<(String, u8, String)>,
    }

    pub fn toy_fixture(seed: u64) -> ToyFixture {
        let letters = letter_corpus(seed, 200);
        let digits = digit_corpus(seed.wrapping_add(1), 200);
        let held_letters = letter_corpus(seed.wrapping_add(2), 40);
        let held_digits = digit_corpus(seed.wrapping_add(3), 40);
        let mixed = held_letters
            .into_iter()
            .zip(held_digits)
            .enumerate()
            .flat_map(|(i, (l, d))| [(format!("L{i:03}"), 0u8, l), (format!("D{i:03}"), 1u8, d)])
            .collect();
        ToyFixture { letters, digits, mixed }
    }

    impl ToyFixture {
        /// Shared vocabulary over both training corpora and the held-out mix.
        pub fn vocab(&self) -> Vocab {
            Vocab::from_chars(
                self.letters
                    .iter()
                    .chain(&self.digits)
                    .chain(self.mixed.iter().map(|(_, _, t)| t))
                    .flat_map(|t| t.chars().collect::<Vec<_>>()),
            )
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_counted_abab() {
        let lm = train_bigram(&["abab"], 1.0).unwrap();
        assert_eq!(lm.vocab().len(), 3);
        let dist = lm.next_token_distribution(Symbol::Char('a')).unwrap();
        // a -> b twice, row a total 2: (2 + 1) / (2 + 3)
        assert!((dist[2] - 0.6).abs() < 1e-7);
        assert!((dist[1] - 0.2).abs() < 1e-7);
        assert!((dist.iter().sum::<f64>() - 1.0).abs() < 1e-12);

        // p(a|BOS) = (1+1)/(1+3) = 0.5, p(b|a) = 0.6
        let expected = (-(0.5f64.ln() + 0.6f64.ln()) / 2.0).exp();
        assert!((lm.perplexity("ab", UnknownPolicy::Strict).unwrap() - expected).abs() < 1e-6);
    }

    #[test]
    fn unseen_row_is_uniform() {
        let lm = train_bigram_with_vocab(&["ab"], 0.5, Vocab::from_chars("abz".chars())).unwrap();
        let dist = lm.next_token_distribution(Symbol::Char('z')).unwrap();
        for p in dist {
            assert!((p - 0.25).abs() < 1e-7);
        }
        assert!(
            (lm.yes_no_score(Symbol::Char('z'), Symbol::Char('a'), Symbol::Char('b'))
                .unwrap()
                - 0.5)
                .abs()
                < 1e-12
        );
    }

    #[test]
    fn uniform_model_perplexity_is_vocab_size() {
        let vocab = Vocab::from_chars("xyz!".chars());
        let v = vocab.len();
        let lm = ToyLm::from_logits(vocab, vec![0.0; v * v], 1.0).unwrap();
        let ppl = lm.perplexity("zyx!!x", UnknownPolicy::Strict).unwrap();
        assert!((ppl - v as f64).abs() < 1e-12);
    }

    #[test]
    fn certain_model_has_unit_perplexity() {
        let vocab = Vocab::from_chars("ab".chars());
        // BOS -> a, a -> b, b -> a with all other logits far below
        let mut logits = vec![-1000.0f32; 9];
        logits[1] = 0.0;
        logits[3 + 2] = 0.0;
        logits[6 + 1] = 0.0;
        let lm = ToyLm::from_logits(vocab, logits, 1.0).unwrap();
        assert_eq!(lm.perplexity("abab", UnknownPolicy::Strict).unwrap(), 1.0);
    }

    #[test]
    fn yes_no_score_ratio() {
        let vocab = Vocab::from_chars("nyz".chars());
        let mut logits = vec![0.0f32; 16];
        // row BOS: p over (BOS, n, y, z) = (0.1, 0.2, 0.6, 0.1)
        for (c, p) in [0.1f32, 0.2, 0.6, 0.1].iter().enumerate() {
            logits[c] = p.ln();
        }
        let lm = ToyLm::from_logits(vocab, logits, 1.0).unwrap();
        let s = lm
            .yes_no_score(Symbol::Bos, Symbol::Char('y'), Symbol::Char('n'))
            .unwrap();
        assert!((s - 0.75).abs() < 1e-6);
    }

    #[test]
    fn unknown_symbols() {
        let lm = train_bigram(&["abab"], 1.0).unwrap();
        assert_eq!(
            lm.perplexity("abc", UnknownPolicy::Strict),
            Err(ToyLmError::UnknownSymbol("c".into()))
        );
        assert!(lm.perplexity("abc", UnknownPolicy::Lenient).is_ok());
        assert_eq!(lm.perplexity("", UnknownPolicy::Strict), Err(ToyLmError::EmptyText));
        assert!(lm.next_token_distribution(Symbol::Char('q')).is_err());
        assert_eq!(train_bigram::<&str>(&[], 1.0), Err(ToyLmError::EmptyCorpus));
        assert_eq!(train_bigram(&["a"], 0.0), Err(ToyLmError::BadAlpha(0.0)));
    }

    #[test]
    fn checkpoint_round_trip_and_determinism() {
        let corpus = fixtures::letter_corpus(17, 20);
        let a = train_bigram(&corpus, 1.0).unwrap();
        let b = train_bigram(&corpus, 1.0).unwrap();
        assert_eq!(a.to_tensor_map().content_digest(), b.to_tensor_map().content_digest());
        let back = ToyLm::from_tensor_map(&a.to_tensor_map()).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn fixtures_are_seeded() {
        assert_eq!(fixtures::digit_corpus(3, 5), fixtures::digit_corpus(3, 5));
        assert_ne!(fixtures::digit_corpus(3, 5), fixtures::digit_corpus(4, 5));
        let fx = fixtures::toy_fixture(17);
        assert_eq!(fx.mixed.len(), 80);
        assert!(fx
            .digits
            .iter()
            .all(|l| l.chars().all(|c| c.is_ascii_digit() || c == '.' || c == ' ')));
    }
}

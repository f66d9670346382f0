//! Lexical patient retrieval: BM25 over an inverted index, keyword query
//! expansion, reciprocal rank fusion and ranked-list metrics.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io::BufRead;

use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const DEFAULT_K1: f64 = 1.2;
pub const DEFAULT_B: f64 = 0.75;
pub const DEFAULT_K_RRF: usize = 60;

#[derive(Debug, Error, PartialEq)]
pub enum RetrievalError {
    #[error("document id {0:?} appears more than once")]
    DuplicateDocId(String),
    #[error("rankings mix query ids {0:?} and {1:?}")]
    MixedQueryIds(String, String),
    #[error("nothing to fuse")]
    NoRankings,
    #[error("no relevance judgments for query {0:?}")]
    NoJudgments(String),
    #[error("invalid parameter: {0}")]
    BadParameter(String),
    #[error("line {line}: {reason}")]
    BadLine { line: usize, reason: String },
}

/// Lowercases and splits on anything that is not alphanumeric.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Tokenizer {
    pub stopwords: BTreeSet<String>,
}

impl Tokenizer {
    pub fn with_stopwords<I: IntoIterator<Item = S>, S: AsRef<str>>(words: I) -> Self {
        Self {
            stopwords: words.into_iter().map(|w| w.as_ref().to_lowercase()).collect(),
        }
    }

    pub fn tokenize(&self, text: &str) -> Vec<String> {
        text.split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(str::to_lowercase)
            .filter(|t| !self.stopwords.contains(t))
            .collect()
    }
}

pub fn tokenize(text: &str) -> Vec<String> {
    Tokenizer::default().tokenize(text)
}

/// Documents are numbered in ascending `doc_id` order; postings list
/// `(doc number, term frequency)` in that order.
#[derive(Debug, Clone, PartialEq)]
pub struct InvertedIndex {
    tokenizer: Tokenizer,
    doc_ids: Vec<String>,
    doc_lengths: Vec<u32>,
    avg_doc_length: f64,
    postings: BTreeMap<String, Vec<(u32, u32)>>,
}

pub fn build_index<S: AsRef<str>, T: AsRef<str>>(corpus: &[(S, T)]) -> Result<InvertedIndex, RetrievalError> {
    build_index_with(corpus, Tokenizer::default())
}

pub fn build_index_with<S: AsRef<str>, T: AsRef<str>>(
    corpus: &[(S, T)],
    tokenizer: Tokenizer,
) -> Result<InvertedIndex, RetrievalError> {
    let mut docs: Vec<(&str, &str)> = corpus.iter().map(|(i, t)| (i.as_ref(), t.as_ref())).collect();
    docs.sort_by(|a, b| a.0.cmp(b.0));
    if let Some(w) = docs.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(RetrievalError::DuplicateDocId(w[0].0.to_string()));
    }
    let mut postings: BTreeMap<String, Vec<(u32, u32)>> = BTreeMap::new();
    let mut doc_lengths = Vec::with_capacity(docs.len());
    for (n, (_, text)) in docs.iter().enumerate() {
        let tokens = tokenizer.tokenize(text);
        doc_lengths.push(tokens.len() as u32);
        let mut tf: BTreeMap<String, u32> = BTreeMap::new();
        for t in tokens {
            *tf.entry(t).or_default() += 1;
        }
        for (term, count) in tf {
            postings.entry(term).or_default().push((n as u32, count));
        }
    }
    let total: u64 = doc_lengths.iter().map(|&l| u64::from(l)).sum();
    let avg_doc_length = if docs.is_empty() {
        0.0
    } else {
        total as f64 / docs.len() as f64
    };
    Ok(InvertedIndex {
        tokenizer,
        doc_ids: docs.iter().map(|d| d.0.to_string()).collect(),
        doc_lengths,
        avg_doc_length,
        postings,
    })
}

impl InvertedIndex {
    pub fn num_docs(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn avg_doc_length(&self) -> f64 {
        self.avg_doc_length
    }

    pub fn doc_length(&self, doc_id: &str) -> Option<u32> {
        let n = self.doc_ids.binary_search_by(|d| d.as_str().cmp(doc_id)).ok()?;
        Some(self.doc_lengths[n])
    }

    pub fn document_frequency(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    /// `(doc_id, tf)` pairs for `term`, in doc_id order.
    pub fn postings(&self, term: &str) -> Vec<(&str, u32)> {
        self.postings.get(term).map_or_else(Vec::new, |p| {
            p.iter()
                .map(|&(d, tf)| (self.doc_ids[d as usize].as_str(), tf))
                .collect()
        })
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    /// SHA-256 over doc ids, lengths and postings.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (id, len) in self.doc_ids.iter().zip(&self.doc_lengths) {
            h.update(id.as_bytes());
            h.update([0]);
            h.update(len.to_le_bytes());
        }
        for (term, list) in &self.postings {
            h.update(term.as_bytes());
            h.update([0]);
            for (d, tf) in list {
                h.update(d.to_le_bytes());
                h.update(tf.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self {
            k1: DEFAULT_K1,
            b: DEFAULT_B,
        }
    }
}

pub fn bm25_idf(n_docs: usize, df: usize) -> f64 {
    let (n, df) = (n_docs as f64, df as f64);
    (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
}

pub fn bm25_term_score(idf: f64, tf: f64, doc_len: f64, avg_doc_len: f64, params: Bm25Params) -> f64 {
    let norm = if avg_doc_len > 0.0 { doc_len / avg_doc_len } else { 1.0 };
    idf * tf * (params.k1 + 1.0) / (tf + params.k1 * (1.0 - params.b + params.b * norm))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Ranking {
    pub query_id: String,
    pub entries: Vec<(String, f64)>,
}

fn sort_and_truncate(mut scored: Vec<(String, f64)>, top_k: usize) -> Vec<(String, f64)> {
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    scored.truncate(top_k);
    scored
}

/// Every query token occurrence contributes, so repeated terms weigh more.
pub fn bm25_search(index: &InvertedIndex, query_id: &str, query: &str, top_k: usize) -> Ranking {
    bm25_search_with(index, query_id, query, top_k, Bm25Params::default())
}

pub fn bm25_search_with(
    index: &InvertedIndex,
    query_id: &str,
    query: &str,
    top_k: usize,
    params: Bm25Params,
) -> Ranking {
    let n = index.num_docs();
    let mut scores: HashMap<u32, f64> = HashMap::new();
    for term in index.tokenizer.tokenize(query) {
        let Some(list) = index.postings.get(&term) else {
            continue;
        };
        let idf = bm25_idf(n, list.len());
        for &(d, tf) in list {
            let dl = f64::from(index.doc_lengths[d as usize]);
            *scores.entry(d).or_default() += bm25_term_score(idf, f64::from(tf), dl, index.avg_doc_length, params);
        }
    }
    let scored = scores
        .into_iter()
        .map(|(d, s)| (index.doc_ids[d as usize].clone(), s))
        .collect();
    Ranking {
        query_id: query_id.to_string(),
        entries: sort_and_truncate(scored, top_k),
    }
}

/// `query` followed by each distinct, non-empty keyword in first-seen order.
pub fn expand_query<S: AsRef<str>>(query: &str, keywords: &[S]) -> String {
    let mut seen = HashSet::new();
    let mut out = query.to_string();
    for k in keywords {
        let k = k.as_ref().trim();
        if !k.is_empty() && seen.insert(k) {
            out.push(' ');
            out.push_str(k);
        }
    }
    out
}

/// `score(d) = sum over rankings of 1 / (k_rrf + rank)`, ranks from 1.
pub fn rrf_fuse(rankings: &[Ranking], k_rrf: usize, top_k: usize) -> Result<Ranking, RetrievalError> {
    let first = rankings.first().ok_or(RetrievalError::NoRankings)?;
    if k_rrf == 0 {
        return Err(RetrievalError::BadParameter("k_rrf must be at least 1".into()));
    }
    if let Some(r) = rankings.iter().find(|r| r.query_id != first.query_id) {
        return Err(RetrievalError::MixedQueryIds(
            first.query_id.clone(),
            r.query_id.clone(),
        ));
    }
    let mut contributions: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for r in rankings {
        for (pos, (doc, _)) in r.entries.iter().enumerate() {
            contributions.entry(doc).or_default().push(pos + 1);
        }
    }
    // summing in rank order keeps the result independent of list order
    let scored = contributions
        .into_iter()
        .map(|(doc, mut ranks)| {
            ranks.sort_unstable();
            let s = ranks.iter().map(|&r| 1.0 / (k_rrf + r) as f64).sum();
            (doc.to_string(), s)
        })
        .collect();
    Ok(Ranking {
        query_id: first.query_id.clone(),
        entries: sort_and_truncate(scored, top_k),
    })
}

/// `query_id -> doc_id -> grade`; grade > 0 counts as relevant.
pub type Qrels = BTreeMap<String, BTreeMap<String, u32>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MapDenominator {
    /// All relevant documents for the query.
    #[default]
    AllRelevant,
    /// `min(relevant, cutoff)`.
    Truncated,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct IrMetrics {
    pub mrr_1000: f64,
    pub p_10: f64,
    pub ndcg_10: f64,
    pub recall_1000: f64,
    pub map_100: f64,
}

impl IrMetrics {
    pub fn mean(all: &[IrMetrics]) -> IrMetrics {
        let n = all.len().max(1) as f64;
        let sum = |f: fn(&IrMetrics) -> f64| all.iter().map(f).sum::<f64>() / n;
        IrMetrics {
            mrr_1000: sum(|m| m.mrr_1000),
            p_10: sum(|m| m.p_10),
            ndcg_10: sum(|m| m.ndcg_10),
            recall_1000: sum(|m| m.recall_1000),
            map_100: sum(|m| m.map_100),
        }
    }
}

pub fn ir_metrics(ranking: &Ranking, qrels: &Qrels) -> Result<IrMetrics, RetrievalError> {
    ir_metrics_with(ranking, qrels, MapDenominator::AllRelevant)
}

pub fn ir_metrics_with(
    ranking: &Ranking,
    qrels: &Qrels,
    map_denominator: MapDenominator,
) -> Result<IrMetrics, RetrievalError> {
    let judged = qrels
        .get(&ranking.query_id)
        .ok_or_else(|| RetrievalError::NoJudgments(ranking.query_id.clone()))?;
    let relevant: HashSet<&str> = judged.iter().filter(|(_, &g)| g > 0).map(|(d, _)| d.as_str()).collect();
    let n_rel = relevant.len();
    let hits: Vec<bool> = ranking
        .entries
        .iter()
        .map(|(d, _)| relevant.contains(d.as_str()))
        .collect();
    let hits_at = |k: usize| hits.iter().take(k).filter(|&&h| h).count();

    let mrr_1000 = hits
        .iter()
        .take(1000)
        .position(|&h| h)
        .map_or(0.0, |p| 1.0 / (p + 1) as f64);
    let p_10 = hits_at(10) as f64 / 10.0;
    let discount = |pos: usize| 1.0 / ((pos + 2) as f64).log2();
    let dcg: f64 = hits
        .iter()
        .take(10)
        .enumerate()
        .filter(|(_, &h)| h)
        .map(|(i, _)| discount(i))
        .sum();
    let idcg: f64 = (0..n_rel.min(10)).map(discount).sum();
    let ndcg_10 = if idcg > 0.0 { dcg / idcg } else { 0.0 };
    let recall_1000 = if n_rel > 0 {
        hits_at(1000) as f64 / n_rel as f64
    } else {
        0.0
    };
    let mut found = 0usize;
    let mut precision_sum = 0.0;
    for (i, &h) in hits.iter().take(100).enumerate() {
        if h {
            found += 1;
            precision_sum += found as f64 / (i + 1) as f64;
        }
    }
    let denom = match map_denominator {
        MapDenominator::AllRelevant => n_rel,
        MapDenominator::Truncated => n_rel.min(100),
    };
    let map_100 = if denom > 0 { precision_sum / denom as f64 } else { 0.0 };
    Ok(IrMetrics {
        mrr_1000,
        p_10,
        ndcg_10,
        recall_1000,
        map_100,
    })
}

fn lines<R: BufRead>(reader: R) -> impl Iterator<Item = Result<(usize, String), RetrievalError>> {
    reader.lines().enumerate().filter_map(|(i, l)| match l {
        Ok(l) if l.trim().is_empty() || l.starts_with('#') => None,
        Ok(l) => Some(Ok((i + 1, l.trim_end_matches('\r').to_string()))),
        Err(e) => Some(Err(RetrievalError::BadLine {
            line: i + 1,
            reason: e.to_string(),
        })),
    })
}

/// `id<TAB>text` per line; used for both corpus and query files.
pub fn parse_id_text<R: BufRead>(reader: R) -> Result<Vec<(String, String)>, RetrievalError> {
    lines(reader)
        .map(|l| {
            let (line, text) = l?;
            match text.split_once('\t') {
                Some((id, body)) if !id.is_empty() => Ok((id.to_string(), body.to_string())),
                _ => Err(RetrievalError::BadLine {
                    line,
                    reason: "expected id<TAB>text".into(),
                }),
            }
        })
        .collect()
}

/// `query_id<TAB>space separated keywords` per line.
pub fn parse_keywords<R: BufRead>(reader: R) -> Result<BTreeMap<String, Vec<String>>, RetrievalError> {
    let mut out = BTreeMap::new();
    for (id, body) in parse_id_text(reader)? {
        out.insert(id, body.split_whitespace().map(String::from).collect());
    }
    Ok(out)
}

/// Four whitespace-separated columns: `query_id iteration doc_id grade`.
pub fn parse_qrels<R: BufRead>(reader: R) -> Result<Qrels, RetrievalError> {
    let mut out = Qrels::new();
    for l in lines(reader) {
        let (line, text) = l?;
        let f: Vec<&str> = text.split_whitespace().collect();
        let [q, _, d, g] = f[..] else {
            return Err(RetrievalError::BadLine {
                line,
                reason: format!("expected 4 columns, found {}", f.len()),
            });
        };
        let g: u32 = g.parse().map_err(|_| RetrievalError::BadLine {
            line,
            reason: format!("grade {g:?} is not a non-negative integer"),
        })?;
        out.entry(q.to_string()).or_default().insert(d.to_string(), g);
    }
    Ok(out)
}

/// Six columns: `query_id Q0 doc_id rank score tag`.
pub fn format_run(ranking: &Ranking, tag: &str) -> String {
    ranking
        .entries
        .iter()
        .enumerate()
        .map(|(i, (d, s))| format!("{} Q0 {} {} {:.6} {}\n", ranking.query_id, d, i + 1, s, tag))
        .collect()
}

/// Reads a six-column run file holding one tag; see [`parse_tagged_runs`]
/// for files that mix several systems.
pub fn parse_run<R: BufRead>(reader: R) -> Result<Vec<Ranking>, RetrievalError> {
    let mut runs = parse_tagged_runs(reader)?;
    match runs.len() {
        0 => Ok(Vec::new()),
        1 => Ok(runs.pop_first().expect("one run").1),
        _ => Err(RetrievalError::BadLine {
            line: 0,
            reason: format!("run file mixes tags {:?}", runs.keys().collect::<Vec<_>>()),
        }),
    }
}

/// `tag -> rankings`, each ranking ordered by rank.
pub fn parse_tagged_runs<R: BufRead>(reader: R) -> Result<BTreeMap<String, Vec<Ranking>>, RetrievalError> {
    type Rows = Vec<(usize, String, f64)>;
    let mut rows: BTreeMap<(String, String), Rows> = BTreeMap::new();
    for l in lines(reader) {
        let (line, text) = l?;
        let f: Vec<&str> = text.split_whitespace().collect();
        let bad = |reason: String| RetrievalError::BadLine { line, reason };
        let [q, _, d, rank, score, tag] = f[..] else {
            return Err(bad(format!("expected 6 columns, found {}", f.len())));
        };
        let rank: usize = rank.parse().map_err(|_| bad(format!("bad rank {rank:?}")))?;
        let score: f64 = score.parse().map_err(|_| bad(format!("bad score {score:?}")))?;
        rows.entry((tag.to_string(), q.to_string()))
            .or_default()
            .push((rank, d.to_string(), score));
    }
    let mut out: BTreeMap<String, Vec<Ranking>> = BTreeMap::new();
    for ((tag, query_id), mut r) in rows {
        r.sort_by_key(|x| x.0);
        out.entry(tag).or_default().push(Ranking {
            query_id,
            entries: r.into_iter().map(|(_, d, s)| (d, s)).collect(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_examples() {
        let empty: [(&str, &str); 0] = [];
        let idx = build_index(&empty).unwrap();
        assert_eq!(idx.num_docs(), 0);
        assert!(bm25_search(&idx, "q", "heart", 10).entries.is_empty());

        let idx = build_index(&[("d1", "Heart failure")]).unwrap();
        assert_eq!(idx.postings("heart"), vec![("d1", 1)]);
        assert_eq!(idx.postings("failure"), vec![("d1", 1)]);
        assert_eq!(idx.digest(), build_index(&[("d1", "Heart failure")]).unwrap().digest());
        assert_eq!(
            build_index(&[("d1", "a"), ("d1", "b")]),
            Err(RetrievalError::DuplicateDocId("d1".into()))
        );
    }

    #[test]
    fn bm25_hand_value() {
        // N = 2, df = 1, tf = 1, dl = avgdl
        let idx = build_index(&[("a", "fever x"), ("b", "cough y")]).unwrap();
        let r = bm25_search(&idx, "q", "fever", 10);
        assert_eq!(r.entries.len(), 1);
        assert_eq!(r.entries[0].0, "a");
        assert!((r.entries[0].1 - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(bm25_search(&idx, "q", "absent", 10).entries.is_empty());
        assert!(bm25_search(&idx, "q", "", 10).entries.is_empty());
    }

    #[test]
    fn expansion() {
        assert_eq!(expand_query("chest pain", &["angina"]), "chest pain angina");
        assert_eq!(expand_query::<&str>("chest pain", &[]), "chest pain");
        assert_eq!(expand_query("q", &["a", "b", "a", " "]), "q a b");
    }

    fn ranking(q: &str, docs: &[&str]) -> Ranking {
        Ranking {
            query_id: q.into(),
            entries: docs
                .iter()
                .enumerate()
                .map(|(i, d)| (d.to_string(), 1.0 / (i + 1) as f64))
                .collect(),
        }
    }

    #[test]
    fn rrf_examples() {
        let a = ranking("q", &["x", "y", "z"]);
        let b = ranking("q", &["x", "w"]);
        let fused = rrf_fuse(&[a.clone(), b], 60, 100).unwrap();
        assert_eq!(fused.entries[0], ("x".to_string(), 2.0 / 61.0));
        let z = fused.entries.iter().find(|e| e.0 == "z").unwrap();
        assert_eq!(z.1, 1.0 / 63.0);

        let self_fused = rrf_fuse(&[a.clone(), a.clone()], 60, 100).unwrap();
        let order: Vec<&str> = self_fused.entries.iter().map(|e| e.0.as_str()).collect();
        assert_eq!(order, ["x", "y", "z"]);
        let single = rrf_fuse(std::slice::from_ref(&a), 60, 100).unwrap();
        for (d, s) in &self_fused.entries {
            let one = single.entries.iter().find(|e| &e.0 == d).unwrap().1;
            assert_eq!(*s, 2.0 * one);
        }
        assert!(matches!(
            rrf_fuse(&[a, ranking("p", &["x"])], 60, 10),
            Err(RetrievalError::MixedQueryIds(..))
        ));
        assert_eq!(rrf_fuse(&[], 60, 10), Err(RetrievalError::NoRankings));
    }

    fn qrels(q: &str, rel: &[&str]) -> Qrels {
        let mut out = Qrels::new();
        out.insert(q.into(), rel.iter().map(|d| (d.to_string(), 1)).collect());
        out
    }

    #[test]
    fn metric_examples() {
        let m = ir_metrics(&ranking("q", &["r", "a", "b"]), &qrels("q", &["r"])).unwrap();
        assert_eq!(
            m,
            IrMetrics {
                mrr_1000: 1.0,
                p_10: 0.1,
                ndcg_10: 1.0,
                recall_1000: 1.0,
                map_100: 1.0
            }
        );
        let m = ir_metrics(&ranking("q", &["a", "b"]), &qrels("q", &["r"])).unwrap();
        assert_eq!(m, IrMetrics::default());

        let m = ir_metrics(&ranking("q", &["a", "r1", "b", "r2"]), &qrels("q", &["r1", "r2"])).unwrap();
        assert!((m.map_100 - 0.5).abs() < 1e-15);
        let expected = (1.0 / 3f64.log2() + 1.0 / 5f64.log2()) / (1.0 + 1.0 / 3f64.log2());
        assert!((m.ndcg_10 - expected).abs() < 1e-15);
        assert_eq!(m.mrr_1000, 0.5);

        assert_eq!(
            ir_metrics(&ranking("q", &["a"]), &qrels("other", &["a"])),
            Err(RetrievalError::NoJudgments("q".into()))
        );
    }

    #[test]
    fn file_formats() {
        let q = parse_qrels("q1 0 d1 1\nq1 0 d2 0\n\nq2 Q0 d3 2\n".as_bytes()).unwrap();
        assert_eq!(q["q1"].len(), 2);
        assert_eq!(q["q2"]["d3"], 2);
        assert!(parse_qrels("q1 0 d1".as_bytes()).is_err());
        assert!(parse_qrels("q1 0 d1 -1".as_bytes()).is_err());

        let kw = parse_keywords("q1\tsepsis  shock\nq2\t\n".as_bytes()).unwrap();
        assert_eq!(kw["q1"], vec!["sepsis", "shock"]);
        assert!(kw["q2"].is_empty());

        let r = ranking("q1", &["d2", "d1"]);
        let text = format_run(&r, "bm25");
        assert!(text.starts_with("q1 Q0 d2 1 1.000000 bm25\n"));
        let back = parse_run(text.as_bytes()).unwrap();
        assert_eq!(back[0].entries[1].0, "d1");
        assert!(parse_id_text("no tab here".as_bytes()).is_err());
    }
}

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::textcodec::tokenize;

/// Numerator used for an n-gram order with no clipped matches.
pub const BLEU_EPSILON: f64 = 0.1;
/// Recall weight of the LCS F-measure.
pub const ROUGE_BETA: f64 = 1.2;
pub const MAX_ORDER: usize = 4;

type Counts = HashMap<Vec<String>, usize>;

fn ngrams(tokens: &[String], n: usize) -> Counts {
    let mut out = Counts::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w.to_vec()).or_default() += 1;
        }
    }
    out
}

/// Corpus BLEU with uniform weights over 1..=4-grams and a brevity penalty
/// against the closest reference length. Orders for which the candidates
/// hold no n-grams at all are left out of the geometric mean; an order with
/// n-grams but no matches uses [`BLEU_EPSILON`] matches, unless not even a
/// unigram matches, which scores 0. Scaled to `[0, 100]`.
pub fn corpus_bleu<C: AsRef<str>, R: AsRef<str>>(candidates: &[C], references: &[Vec<R>]) -> f64 {
    let mut matches = [0usize; MAX_ORDER];
    let mut totals = [0usize; MAX_ORDER];
    let (mut cand_len, mut ref_len) = (0usize, 0usize);
    for (cand, refs) in candidates.iter().zip(references) {
        let c = tokenize(cand.as_ref());
        let rs: Vec<Vec<String>> = refs.iter().map(|r| tokenize(r.as_ref())).collect();
        if rs.is_empty() {
            continue;
        }
        cand_len += c.len();
        ref_len += rs
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| (l.abs_diff(c.len()), l))
            .expect("non-empty references");
        for n in 1..=MAX_ORDER {
            let cc = ngrams(&c, n);
            let mut max_ref = Counts::new();
            for r in &rs {
                for (g, k) in ngrams(r, n) {
                    let e = max_ref.entry(g).or_default();
                    *e = (*e).max(k);
                }
            }
            totals[n - 1] += cc.values().sum::<usize>();
            matches[n - 1] += cc
                .iter()
                .map(|(g, &k)| k.min(max_ref.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
        }
    }
    if cand_len == 0 || matches[0] == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    let mut orders = 0;
    for n in 0..MAX_ORDER {
        if totals[n] == 0 {
            continue;
        }
        let m = if matches[n] == 0 { BLEU_EPSILON } else { matches[n] as f64 };
        log_sum += (m / totals[n] as f64).ln();
        orders += 1;
    }
    let bp = if cand_len < ref_len {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    } else {
        1.0
    };
    100.0 * bp * (log_sum / orders as f64).exp()
}

pub fn bleu4<R: AsRef<str>>(candidate: &str, references: &[R]) -> f64 {
    let refs: Vec<&str> = references.iter().map(|r| r.as_ref()).collect();
    corpus_bleu(&[candidate], &[refs])
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    for x in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        prev = cur;
    }
    prev[b.len()]
}

/// LCS F-measure using the best precision and best recall over references.
/// Scaled to `[0, 100]`.
pub fn rouge_l<R: AsRef<str>>(candidate: &str, references: &[R]) -> f64 {
    let c = tokenize(candidate);
    if c.is_empty() {
        return 0.0;
    }
    let (mut best_p, mut best_r) = (0.0f64, 0.0f64);
    for r in references {
        let r = tokenize(r.as_ref());
        if r.is_empty() {
            continue;
        }
        let l = lcs(&c, &r) as f64;
        best_p = best_p.max(l / c.len() as f64);
        best_r = best_r.max(l / r.len() as f64);
    }
    if best_p == 0.0 || best_r == 0.0 {
        return 0.0;
    }
    let b2 = ROUGE_BETA * ROUGE_BETA;
    100.0 * (1.0 + b2) * best_p * best_r / (best_r + b2 * best_p)
}

/// Document frequencies of n-grams over a set of reference groups, one
/// group per described item.
#[derive(Clone, Debug, Default)]
pub struct CiderCorpus {
    df: HashMap<Vec<String>, usize>,
    documents: usize,
}

impl CiderCorpus {
    pub fn new<R: AsRef<str>>(reference_sets: &[Vec<R>]) -> Self {
        let mut df: HashMap<Vec<String>, usize> = HashMap::new();
        for refs in reference_sets {
            let mut seen: std::collections::HashSet<Vec<String>> = Default::default();
            for r in refs {
                let toks = tokenize(r.as_ref());
                for n in 1..=MAX_ORDER {
                    seen.extend(ngrams(&toks, n).into_keys());
                }
            }
            for g in seen {
                *df.entry(g).or_default() += 1;
            }
        }
        Self {
            df,
            documents: reference_sets.len(),
        }
    }

    pub fn documents(&self) -> usize {
        self.documents
    }

    fn vector(&self, tokens: &[String], n: usize) -> (HashMap<Vec<String>, f64>, f64) {
        let log_n = (self.documents.max(1) as f64).ln();
        let mut vec = HashMap::new();
        let mut norm = 0.0;
        for (g, tf) in ngrams(tokens, n) {
            let df = self.df.get(&g).copied().unwrap_or(0).max(1) as f64;
            let w = tf as f64 * (log_n - df.ln());
            norm += w * w;
            vec.insert(g, w);
        }
        (vec, norm.sqrt())
    }

    /// Mean over orders of the mean TF-IDF cosine to each reference, scaled
    /// to `[0, 100]`.
    pub fn score<R: AsRef<str>>(&self, candidate: &str, references: &[R]) -> f64 {
        let c = tokenize(candidate);
        let refs: Vec<Vec<String>> = references
            .iter()
            .map(|r| tokenize(r.as_ref()))
            .collect();
        if c.is_empty() || refs.is_empty() {
            return 0.0;
        }
        let mut total = 0.0;
        for n in 1..=MAX_ORDER {
            let (cv, cn) = self.vector(&c, n);
            let mut sum = 0.0;
            for r in &refs {
                let (rv, rn) = self.vector(r, n);
                if cn > 0.0 && rn > 0.0 {
                    let dot: f64 = cv
                        .iter()
                        .filter_map(|(g, w)| rv.get(g).map(|x| w * x))
                        .sum();
                    sum += dot / (cn * rn);
                }
            }
            total += sum / refs.len() as f64;
        }
        100.0 * total / MAX_ORDER as f64
    }
}

/// Mean CIDEr of each candidate against its references, with document
/// frequencies taken from the same reference sets.
pub fn cider<C: AsRef<str>, R: AsRef<str>>(candidates: &[C], references: &[Vec<R>]) -> f64 {
    if candidates.is_empty() {
        return 0.0;
    }
    let corpus = CiderCorpus::new(references);
    let sum: f64 = candidates
        .iter()
        .zip(references)
        .map(|(c, r)| corpus.score(c.as_ref(), r))
        .sum();
    sum / candidates.len() as f64
}

#[derive(Debug, thiserror::Error)]
#[error("unknown metric id `{0}` (expected bleu4, rouge_l or cider)")]
pub struct UnknownMetric(pub String);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptionMetric {
    Bleu4,
    RougeL,
    Cider,
}

impl CaptionMetric {
    pub fn id(self) -> &'static str {
        match self {
            Self::Bleu4 => "bleu4",
            Self::RougeL => "rouge_l",
            Self::Cider => "cider",
        }
    }

    /// Scores one candidate. `corpus` supplies CIDEr document frequencies and
    /// is ignored by the other metrics.
    pub fn score<R: AsRef<str>>(self, candidate: &str, references: &[R], corpus: &CiderCorpus) -> f64 {
        match self {
            Self::Bleu4 => bleu4(candidate, references),
            Self::RougeL => rouge_l(candidate, references),
            Self::Cider => corpus.score(candidate, references),
        }
    }
}

impl fmt::Display for CaptionMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for CaptionMetric {
    type Err = UnknownMetric;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "bleu4" | "bleu" => Ok(Self::Bleu4),
            "rouge_l" | "rouge" => Ok(Self::RougeL),
            "cider" => Ok(Self::Cider),
            other => Err(UnknownMetric(other.to_string())),
        }
    }
}

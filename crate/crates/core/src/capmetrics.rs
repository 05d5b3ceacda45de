//! Caption-generation metrics: BLEU-2, ROUGE-L and METEOR (exact-match variant),
//! with the shared tokenizer and corpus-level aggregation.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::CaptionPair;

/// Lowercased tokens with punctuation treated as a separator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSeq(Vec<String>);

impl TokenSeq {
    pub fn tokens(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn tokenize(text: &str) -> TokenSeq {
    let cleaned: String = text
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect();
    TokenSeq(cleaned.split_whitespace().map(str::to_lowercase).collect())
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    for w in tokens.windows(n) {
        *counts.entry(w).or_insert(0) += 1;
    }
    counts
}

fn clipped_precision(cand: &[String], refr: &[String], n: usize) -> f64 {
    let total = cand.len().saturating_sub(n - 1);
    if total == 0 || cand.len() < n {
        return 0.0;
    }
    let ref_counts = ngram_counts(refr, n);
    let matched: usize = ngram_counts(cand, n)
        .into_iter()
        .map(|(g, c)| c.min(ref_counts.get(g).copied().unwrap_or(0)))
        .sum();
    matched as f64 / total as f64
}

/// Sentence-level BLEU with uniform weights over unigrams and bigrams.
pub fn bleu2(candidate: &TokenSeq, reference: &TokenSeq) -> f64 {
    let (c, r) = (candidate.tokens(), reference.tokens());
    if c.len() < 2 {
        return 0.0;
    }
    let p1 = clipped_precision(c, r, 1);
    let p2 = clipped_precision(c, r, 2);
    if p1 == 0.0 || p2 == 0.0 {
        return 0.0;
    }
    let bp = (1.0 - r.len() as f64 / c.len() as f64).exp().min(1.0);
    bp * (p1 * p2).sqrt()
}

pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F-measure; `beta == 1.0` gives F1.
pub fn rouge_l_beta(candidate: &TokenSeq, reference: &TokenSeq, beta: f64) -> f64 {
    let lcs = lcs_len(candidate.tokens(), reference.tokens());
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / candidate.len() as f64;
    let r = lcs as f64 / reference.len() as f64;
    let b2 = beta * beta;
    (1.0 + b2) * p * r / (r + b2 * p)
}

pub fn rouge_l(candidate: &TokenSeq, reference: &TokenSeq) -> f64 {
    rouge_l_beta(candidate, reference, 1.0)
}

/// Exact-match unigram alignment: each candidate token, left to right, takes the
/// first unused reference position holding the same token. Returns `(cand, ref)` pairs.
pub fn meteor_alignment(candidate: &[String], reference: &[String]) -> Vec<(usize, usize)> {
    let mut used = vec![false; reference.len()];
    let mut pairs = Vec::new();
    for (i, tok) in candidate.iter().enumerate() {
        if let Some(j) = (0..reference.len()).find(|&j| !used[j] && reference[j] == *tok) {
            used[j] = true;
            pairs.push((i, j));
        }
    }
    pairs
}

fn chunk_count(alignment: &[(usize, usize)]) -> usize {
    if alignment.is_empty() {
        return 0;
    }
    1 + alignment
        .windows(2)
        .filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1))
        .count()
}

/// METEOR with exact matching only: harmonic mean weighted 9:1 toward recall,
/// times a fragmentation penalty `0.5 * (chunks / matches)^3`.
pub fn meteor(candidate: &TokenSeq, reference: &TokenSeq) -> f64 {
    let alignment = meteor_alignment(candidate.tokens(), reference.tokens());
    let m = alignment.len();
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / candidate.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let fmean = 10.0 * p * r / (r + 9.0 * p);
    let frag = chunk_count(&alignment) as f64 / m as f64;
    let penalty = 0.5 * frag.powi(3);
    fmean * (1.0 - penalty)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    pub rouge_beta: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self { rouge_beta: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairScores {
    pub video_id: String,
    pub rouge_l: f64,
    pub bleu_2: f64,
    pub meteor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Never computed here; present so the column layout matches the usual table.
    pub spice: Option<f64>,
    pub rouge_l: f64,
    pub bleu_2: f64,
    pub meteor: f64,
    pub n_pairs: usize,
    pub rouge_beta: f64,
}

pub fn score_pair(candidate: &str, reference: &str, cfg: &MetricConfig) -> (f64, f64, f64) {
    let c = tokenize(candidate);
    let r = tokenize(reference);
    (rouge_l_beta(&c, &r, cfg.rouge_beta), bleu2(&c, &r), meteor(&c, &r))
}

pub fn evaluate_caption_run(corpus: &[CaptionPair], cfg: &MetricConfig) -> Result<(MetricReport, Vec<PairScores>)> {
    if corpus.is_empty() {
        return Err(Error::Invalid("caption corpus is empty".into()));
    }
    let mut per_pair = Vec::with_capacity(corpus.len());
    for pair in corpus {
        let cand = pair
            .candidate_caption
            .as_deref()
            .ok_or_else(|| Error::Invalid(format!("video `{}` has no candidate caption", pair.video_id)))?;
        let (rouge_l, bleu_2, meteor) = score_pair(cand, &pair.reference_camera_caption, cfg);
        per_pair.push(PairScores {
            video_id: pair.video_id.clone(),
            rouge_l,
            bleu_2,
            meteor,
        });
    }
    let n = per_pair.len() as f64;
    let mean = |f: fn(&PairScores) -> f64| per_pair.iter().map(f).sum::<f64>() / n;
    let report = MetricReport {
        spice: None,
        rouge_l: mean(|p| p.rouge_l),
        bleu_2: mean(|p| p.bleu_2),
        meteor: mean(|p| p.meteor),
        n_pairs: per_pair.len(),
        rouge_beta: cfg.rouge_beta,
    };
    Ok((report, per_pair))
}

impl MetricReport {
    /// One CSV row in `SPICE, ROUGE-L, BLEU-2, METEOR` order, preceded by a comment line
    /// disclosing the metric variants.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "# variants: spice=not computed; rouge_l=lcs f-measure beta={}; bleu_2=clipped 1-2gram geometric mean with brevity penalty; meteor=exact-match only, alpha=0.9 beta=3 gamma=0.5; tokenizer=lowercase, non-alphanumeric as separator",
            self.rouge_beta
        );
        out.push_str("spice,rouge_l,bleu_2,meteor,n_pairs\n");
        let spice = self.spice.map(|s| format!("{s:.4}")).unwrap_or_else(|| "NA".into());
        let _ = writeln!(
            out,
            "{spice},{:.4},{:.4},{:.4},{}",
            self.rouge_l, self.bleu_2, self.meteor, self.n_pairs
        );
        out
    }
}

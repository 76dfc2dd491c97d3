//! Retrieval metrics, per-position token accuracy, identifier coherence and
//! the throughput benchmark.

mod bench;
mod coherence;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

pub use bench::{
    default_workers, device_string, dual_tower_baseline, methodology, throughput_bench, BenchConfig, BenchReport, BenchRow, DualTowerEngine, Engine, GenerativeEngine,
    BENCH_HEADER, candidate_sweep, synthetic_identifiers, ENGINES,
};
pub use coherence::{coherence_stats, pair_distances, CoherenceReport, PairStats};

use crate::decode::{beam_search_batch, Constraint, PrefixTree};
use crate::error::Result;
use crate::model::FusionModel;
use crate::par::Exec;
use crate::train::Example;

/// 1 when `gold` is among the first `k` results.
pub fn recall_at_k(ranked: &[Option<usize>], gold: usize, k: usize) -> f64 {
    if ranked.iter().take(k).any(|&r| r == Some(gold)) {
        1.0
    } else {
        0.0
    }
}

/// `1 / rank` of `gold` within the first `k` results, else 0.
pub fn mrr_at_k(ranked: &[Option<usize>], gold: usize, k: usize) -> f64 {
    ranked
        .iter()
        .take(k)
        .position(|&r| r == Some(gold))
        .map_or(0.0, |p| 1.0 / (p + 1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub beam_size: usize,
    pub constrained: bool,
    pub n_queries: usize,
    pub recall_at_1: f64,
    pub recall_at_5: f64,
    pub recall_at_10: f64,
    pub mrr_at_10: f64,
    /// Fraction of returned sequences that name no item.
    pub invalid_rate: f64,
    pub config_fingerprint: String,
}

impl EvalReport {
    /// Aggregate ranked item lists against gold ids.
    pub fn from_rankings(rankings: &[Vec<Option<usize>>], gold: &[usize], split: &str, beam_size: usize, constrained: bool, fingerprint: &str) -> Self {
        let n = rankings.len().max(1) as f64;
        let mean = |f: &dyn Fn(&[Option<usize>], usize) -> f64| rankings.iter().zip(gold).map(|(r, &g)| f(r, g)).sum::<f64>() / n;
        let returned: usize = rankings.iter().map(Vec::len).sum();
        let invalid: usize = rankings.iter().flatten().filter(|r| r.is_none()).count();
        EvalReport {
            split: split.to_owned(),
            beam_size,
            constrained,
            n_queries: rankings.len(),
            recall_at_1: mean(&|r, g| recall_at_k(r, g, 1)),
            recall_at_5: mean(&|r, g| recall_at_k(r, g, 5)),
            recall_at_10: mean(&|r, g| recall_at_k(r, g, 10)),
            mrr_at_10: mean(&|r, g| mrr_at_k(r, g, 10)),
            invalid_rate: if returned == 0 { 0.0 } else { invalid as f64 / returned as f64 },
            config_fingerprint: fingerprint.to_owned(),
        }
    }

    /// The ordering identities every report must satisfy.
    pub fn identities_hold(&self) -> bool {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        [self.recall_at_1, self.recall_at_5, self.recall_at_10, self.mrr_at_10].into_iter().all(in_unit)
            && self.recall_at_1 <= self.recall_at_5
            && self.recall_at_5 <= self.recall_at_10
            && self.mrr_at_10 <= self.recall_at_10
    }
}

/// Queries per encoder pass during evaluation.
pub const EVAL_CHUNK: usize = 32;

/// Ranked item lists for every example at one beam size.
pub fn rank_examples(model: &FusionModel<f32>, tree: &PrefixTree, examples: &[Example], beam: usize, constrained: bool, exec: Exec) -> Result<Vec<Vec<Option<usize>>>> {
    let queries: Vec<&[u32]> = examples.iter().map(|e| e.query.as_slice()).collect();
    let constraint = if constrained { Constraint::Tree(tree) } else { Constraint::Free { lookup: Some(tree) } };
    let hits = beam_search_batch(model, &queries, tree.depth(), beam, constraint, EVAL_CHUNK, exec)?;
    Ok(hits.into_iter().map(|h| h.into_iter().map(|x| x.item_id).collect()).collect())
}

/// One report per beam size.
pub fn run_eval(
    model: &FusionModel<f32>,
    tree: &PrefixTree,
    examples: &[Example],
    beams: &[usize],
    split: &str,
    constrained: bool,
    exec: Exec,
) -> Result<Vec<EvalReport>> {
    let gold: Vec<usize> = examples.iter().map(|e| e.item_id).collect();
    let fp = model.layout.fingerprint();
    beams
        .iter()
        .map(|&b| {
            let r = rank_examples(model, tree, examples, b, constrained, exec)?;
            Ok(EvalReport::from_rankings(&r, &gold, split, b, constrained, &fp))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenAccuracy {
    pub per_position: Vec<f64>,
    pub first: f64,
    /// Mean over positions after the first.
    pub later: f64,
}

/// Teacher-forced argmax accuracy at each identifier position.
pub fn token_position_accuracy(model: &FusionModel<f32>, examples: &[Example], exec: Exec) -> Result<TokenAccuracy> {
    let j = model.layout.id_len();
    let bos = model.layout.bos();
    let parts = exec.map_chunks(examples, EVAL_CHUNK, |_, chunk| -> Result<Vec<usize>> {
        let q: Vec<&[u32]> = chunk.iter().map(|e| e.query.as_slice()).collect();
        let enc = model.encode_values(&q)?;
        let prefixes: Vec<Vec<usize>> = chunk.iter().map(|e| e.prefix(bos)).collect();
        let logits = model.logits(&enc, &prefixes)?;
        let mut correct = vec![0; j];
        for (i, e) in chunk.iter().enumerate() {
            for (pos, c) in correct.iter_mut().enumerate() {
                let row = logits.row(i * j + pos);
                let arg = (0..row.len()).fold(0, |b, t| if row[t] > row[b] { t } else { b });
                *c += usize::from(arg == e.target[pos]);
            }
        }
        Ok(correct)
    });
    let mut correct = vec![0usize; j];
    for p in parts {
        for (c, x) in correct.iter_mut().zip(p?) {
            *c += x;
        }
    }
    let n = examples.len().max(1) as f64;
    let per_position: Vec<f64> = correct.iter().map(|&c| c as f64 / n).collect();
    let later = if j > 1 { per_position[1..].iter().sum::<f64>() / (j - 1) as f64 } else { f64::NAN };
    Ok(TokenAccuracy {
        first: per_position[0],
        later,
        per_position,
    })
}

/// Median of finite values; NaN when there are none.
pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Aligned text table with a header row.
pub fn text_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, cells: Vec<&str>| {
        let parts: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    line(&mut out, header.to_vec());
    for r in rows {
        line(&mut out, r.iter().map(String::as_str).collect());
    }
    out
}

/// CSV with a header row; cells containing commas or quotes are quoted.
pub fn csv_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let esc = |c: &str| {
        if c.contains([',', '"', '\n']) {
            format!("\"{}\"", c.replace('"', "\"\""))
        } else {
            c.to_owned()
        }
    };
    let mut out = header.iter().map(|h| esc(h)).collect::<Vec<_>>().join(",") + "\n";
    for r in rows {
        out += &(r.iter().map(|c| esc(c)).collect::<Vec<_>>().join(",") + "\n");
    }
    out
}

pub const EVAL_HEADER: [&str; 9] = ["split", "beam", "constrained", "n", "R@1", "R@5", "R@10", "MRR@10", "invalid"];

pub fn eval_rows(reports: &[EvalReport]) -> Vec<Vec<String>> {
    reports
        .iter()
        .map(|r| {
            vec![
                r.split.clone(),
                r.beam_size.to_string(),
                r.constrained.to_string(),
                r.n_queries.to_string(),
                format!("{:.4}", r.recall_at_1),
                format!("{:.4}", r.recall_at_5),
                format!("{:.4}", r.recall_at_10),
                format!("{:.4}", r.mrr_at_10),
                format!("{:.4}", r.invalid_rate),
            ]
        })
        .collect()
}

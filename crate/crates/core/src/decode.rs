//! Prefix-tree constrained beam search over semantic identifiers.
//!
//! Identifiers all have length `J`, so decoding runs exactly `J` steps with
//! no end token. Candidates are ranked by cumulative log-probability, then
//! by the rank of the parent hypothesis, then by token id; with equal scores
//! this is lexicographic order on the full sequence, the same order
//! [`exhaustive_rank`] uses.

use std::cmp::Ordering;

use ace_tensor::Scalar;

use crate::error::{CoreError, Result};
use crate::ids::SemanticIdentifier;
use crate::model::{EncoderValues, FusionModel, VocabLayout};
use crate::par::Exec;
use crate::train::score_targets;

const NO_ITEM: u32 = u32::MAX;

/// Trie over global token sequences, stored breadth-first in CSR form.
#[derive(Clone, Debug, PartialEq)]
pub struct PrefixTree {
    depth: usize,
    child_start: Vec<u32>,
    child_tok: Vec<u32>,
    child_node: Vec<u32>,
    item: Vec<u32>,
}

impl PrefixTree {
    /// Trie over `identifiers`; item `i` is `identifiers[i]`.
    pub fn build(identifiers: &[SemanticIdentifier], layout: &VocabLayout) -> Result<Self> {
        let seqs = identifiers.iter().map(|id| layout.to_global(id)).collect::<Result<Vec<_>>>()?;
        Self::from_sequences(&seqs)
    }

    /// Trie over raw token sequences; item `i` is `seqs[i]`.
    pub fn from_sequences(seqs: &[Vec<usize>]) -> Result<Self> {
        if seqs.is_empty() {
            return Err(CoreError::invalid("prefix tree needs at least one identifier"));
        }
        let depth = seqs[0].len();
        if depth == 0 || seqs.iter().any(|s| s.len() != depth) {
            return Err(CoreError::invalid("identifiers must share one non-zero length"));
        }
        if seqs.iter().flatten().any(|&t| t >= NO_ITEM as usize) || seqs.len() >= NO_ITEM as usize {
            return Err(CoreError::invalid("token id or item count exceeds u32"));
        }
        let mut order: Vec<usize> = (0..seqs.len()).collect();
        order.sort_by(|&a, &b| seqs[a].cmp(&seqs[b]));
        let mut tree = PrefixTree {
            depth,
            child_start: Vec::new(),
            child_tok: Vec::new(),
            child_node: Vec::new(),
            item: vec![NO_ITEM],
        };
        // (lo, hi, depth) per node in breadth-first order.
        let mut nodes = vec![(0usize, order.len(), 0usize)];
        let mut next = 0;
        while next < nodes.len() {
            let (lo, hi, d) = nodes[next];
            tree.child_start.push(tree.child_tok.len() as u32);
            if d == depth {
                if hi - lo > 1 {
                    return Err(CoreError::invalid(format!("duplicate identifier {:?}", seqs[order[lo]])));
                }
                tree.item[next] = order[lo] as u32;
            } else {
                let mut s = lo;
                while s < hi {
                    let tok = seqs[order[s]][d];
                    let mut e = s + 1;
                    while e < hi && seqs[order[e]][d] == tok {
                        e += 1;
                    }
                    tree.child_tok.push(tok as u32);
                    tree.child_node.push(nodes.len() as u32);
                    tree.item.push(NO_ITEM);
                    nodes.push((s, e, d + 1));
                    s = e;
                }
            }
            next += 1;
        }
        tree.child_start.push(tree.child_tok.len() as u32);
        Ok(tree)
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn node_count(&self) -> usize {
        self.item.len()
    }

    pub fn leaf_count(&self) -> usize {
        self.item.iter().filter(|&&i| i != NO_ITEM).count()
    }

    pub const ROOT: usize = 0;

    /// Child tokens (ascending) and node ids of `node`.
    pub fn children(&self, node: usize) -> (&[u32], &[u32]) {
        let r = self.child_start[node] as usize..self.child_start[node + 1] as usize;
        (&self.child_tok[r.clone()], &self.child_node[r])
    }

    pub fn child(&self, node: usize, tok: usize) -> Option<usize> {
        let (toks, nodes) = self.children(node);
        let tok = u32::try_from(tok).ok()?;
        toks.binary_search(&tok).ok().map(|i| nodes[i] as usize)
    }

    /// Item stored at a leaf.
    pub fn item(&self, node: usize) -> Option<usize> {
        (self.item[node] != NO_ITEM).then_some(self.item[node] as usize)
    }

    /// Node reached by `prefix`, or the index of the first token with no
    /// matching edge.
    pub fn walk(&self, prefix: &[usize]) -> std::result::Result<usize, usize> {
        let mut node = Self::ROOT;
        for (i, &t) in prefix.iter().enumerate() {
            node = self.child(node, t).ok_or(i)?;
        }
        Ok(node)
    }

    /// Item named by a full sequence, if it is in the tree.
    pub fn lookup(&self, seq: &[usize]) -> Option<usize> {
        self.walk(seq).ok().and_then(|n| self.item(n))
    }

    /// Tokens that may follow `prefix`, ascending.
    pub fn allowed_next(&self, prefix: &[usize]) -> Result<Vec<usize>> {
        let node = self
            .walk(prefix)
            .map_err(|i| CoreError::invalid(format!("prefix {prefix:?} leaves the tree at position {i}")))?;
        Ok(self.children(node).0.iter().map(|&t| t as usize).collect())
    }
}

/// One ranked result.
#[derive(Clone, Debug, PartialEq)]
pub struct Hit {
    /// `None` for sequences outside the identifier set.
    pub item_id: Option<usize>,
    pub tokens: Vec<usize>,
    pub score: f64,
}

#[derive(Clone, Copy, Debug)]
pub enum Constraint<'t> {
    /// Expand only along trie edges.
    Tree(&'t PrefixTree),
    /// Any output token at any step; `lookup` (if given) maps results to items.
    Free { lookup: Option<&'t PrefixTree> },
}

#[derive(Clone, Debug)]
struct Hyp {
    tokens: Vec<usize>,
    node: usize,
    score: f64,
}

fn log_softmax_row<T: Scalar>(row: &[T]) -> Vec<f64> {
    let m = row.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v.to_f64() - m).exp()).sum::<f64>().ln();
    row.iter().map(|v| v.to_f64() - lse).collect()
}

/// Candidate order: higher score, then earlier parent, then lower token.
fn cand_cmp(a: &(f64, usize, usize), b: &(f64, usize, usize)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
}

/// Beam search for every encoded query in `enc`, decoding `depth` steps.
fn search_encoded<T: Scalar>(
    model: &FusionModel<T>,
    enc: &EncoderValues<T>,
    depth: usize,
    beam: usize,
    constraint: Constraint<'_>,
) -> Result<Vec<Vec<Hit>>> {
    let n_q = enc.groups;
    let bos = model.layout.bos();
    let mut beams: Vec<Vec<Hyp>> = vec![
        vec![Hyp {
            tokens: Vec::with_capacity(depth),
            node: PrefixTree::ROOT,
            score: 0.0,
        }];
        n_q
    ];
    for step in 0..depth {
        let groups: Vec<usize> = beams.iter().enumerate().flat_map(|(q, b)| std::iter::repeat_n(q, b.len())).collect();
        if groups.is_empty() {
            break;
        }
        let prefixes: Vec<Vec<usize>> = beams
            .iter()
            .flatten()
            .map(|h| std::iter::once(bos).chain(h.tokens.iter().copied()).collect())
            .collect();
        let logits = model.logits_mapped(enc, &prefixes, &groups)?;
        let len = step + 1;
        let mut row = 0;
        for hyps in &mut beams {
            let mut cands: Vec<(f64, usize, usize)> = Vec::new();
            for (hi, h) in hyps.iter().enumerate() {
                let lsm = log_softmax_row(logits.row(row * len + step));
                row += 1;
                match constraint {
                    Constraint::Tree(tree) => {
                        for &t in tree.children(h.node).0 {
                            cands.push((h.score + lsm[t as usize], hi, t as usize));
                        }
                    }
                    Constraint::Free { .. } => {
                        cands.extend(lsm.iter().enumerate().map(|(t, &l)| (h.score + l, hi, t)));
                    }
                }
            }
            if cands.len() > beam {
                cands.select_nth_unstable_by(beam - 1, cand_cmp);
                cands.truncate(beam);
            }
            cands.sort_by(cand_cmp);
            *hyps = cands
                .into_iter()
                .map(|(score, hi, t)| {
                    let parent = &hyps[hi];
                    let mut tokens = parent.tokens.clone();
                    tokens.push(t);
                    let node = match constraint {
                        Constraint::Tree(tree) => tree.child(parent.node, t).expect("candidate came from the tree"),
                        Constraint::Free { .. } => PrefixTree::ROOT,
                    };
                    Hyp { tokens, node, score }
                })
                .collect();
        }
    }
    Ok(beams
        .into_iter()
        .map(|hyps| {
            hyps.into_iter()
                .map(|h| {
                    let item_id = match constraint {
                        Constraint::Tree(tree) => tree.item(h.node),
                        Constraint::Free { lookup } => lookup.and_then(|t| t.lookup(&h.tokens)),
                    };
                    Hit {
                        item_id,
                        tokens: h.tokens,
                        score: h.score,
                    }
                })
                .collect()
        })
        .collect())
}

/// Beam search for a batch of queries. Queries are processed in chunks of
/// `chunk` (one encoder pass per chunk); results keep query order.
pub fn beam_search_batch<T: Scalar>(
    model: &FusionModel<T>,
    queries: &[&[u32]],
    depth: usize,
    beam: usize,
    constraint: Constraint<'_>,
    chunk: usize,
    exec: Exec,
) -> Result<Vec<Vec<Hit>>> {
    if beam == 0 {
        return Err(CoreError::invalid("beam size must be >= 1"));
    }
    if depth != model.layout.id_len() {
        return Err(CoreError::invalid(format!("decoding depth {depth} but layout length {}", model.layout.id_len())));
    }
    if let Constraint::Tree(t) = constraint {
        if t.depth() != depth {
            return Err(CoreError::invalid(format!("tree depth {} but layout length {depth}", t.depth())));
        }
    }
    let parts = exec.map_chunks(queries, chunk, |_, qs| -> Result<Vec<Vec<Hit>>> {
        let enc = model.encode_values(qs)?;
        search_encoded(model, &enc, depth, beam, constraint)
    });
    let mut out = Vec::with_capacity(queries.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Top `min(beam, n)` identifiers reachable in `tree` for one query.
pub fn constrained_beam_search<T: Scalar>(model: &FusionModel<T>, query: &[u32], tree: &PrefixTree, beam: usize) -> Result<Vec<Hit>> {
    let mut r = beam_search_batch(model, &[query], tree.depth(), beam, Constraint::Tree(tree), 1, Exec::Sequential)?;
    Ok(r.pop().expect("one query"))
}

/// Beam search over the whole output vocabulary at every step. Results may
/// name no item; `lookup` maps valid ones.
pub fn unconstrained_beam_search<T: Scalar>(model: &FusionModel<T>, query: &[u32], beam: usize, lookup: Option<&PrefixTree>) -> Result<Vec<Hit>> {
    let depth = model.layout.id_len();
    let mut r = beam_search_batch(model, &[query], depth, beam, Constraint::Free { lookup }, 1, Exec::Sequential)?;
    Ok(r.pop().expect("one query"))
}

/// Every identifier scored by its exact teacher-forced log-probability,
/// sorted by score then lexicographically.
pub fn exhaustive_rank<T: Scalar>(model: &FusionModel<T>, query: &[u32], seqs: &[Vec<usize>]) -> Result<Vec<Hit>> {
    let enc = model.encode_values(&[query])?;
    let mut hits = Vec::with_capacity(seqs.len());
    for (c, chunk) in seqs.chunks(256).enumerate() {
        let scores = score_targets(model, &enc, chunk, Some(&vec![0; chunk.len()]))?;
        hits.extend(chunk.iter().zip(scores).enumerate().map(|(i, (t, score))| Hit {
            item_id: Some(c * 256 + i),
            tokens: t.clone(),
            score,
        }));
    }
    hits.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.tokens.cmp(&b.tokens)));
    Ok(hits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ace_tensor::{Rng, Tensor};

    use crate::model::ModelConfig;

    fn ids(v: &[&[u32]]) -> Vec<SemanticIdentifier> {
        v.iter().map(|t| SemanticIdentifier(t.to_vec())).collect()
    }

    fn model(sizes: Vec<usize>, seed: u64) -> FusionModel<f32> {
        let cfg = ModelConfig {
            d_model: 16,
            n_heads: 2,
            ffn_dim: 16,
            encoder_layers: 2,
            decoder_layers: 1,
            query_vocab_size: 10,
            ..ModelConfig::default()
        };
        FusionModel::new(cfg, VocabLayout::new(sizes).unwrap(), &mut Rng::new(seed)).unwrap()
    }

    fn flatten_output(m: &mut FusionModel<f32>) {
        let w = m.store.id("dec.out.w").unwrap();
        let b = m.store.id("dec.out.b").unwrap();
        let s = m.store.value(w).shape().to_vec();
        m.store.set(w, Tensor::zeros(&s)).unwrap();
        let n = m.store.value(b).len();
        m.store.set(b, Tensor::zeros(&[n])).unwrap();
    }

    #[test]
    fn single_identifier_is_a_chain() {
        let layout = VocabLayout::new(vec![2, 3, 1]).unwrap();
        let t = PrefixTree::build(&ids(&[&[1, 2, 0]]), &layout).unwrap();
        assert_eq!(t.node_count(), 4);
        assert_eq!(t.leaf_count(), 1);
        assert_eq!(t.allowed_next(&[]).unwrap(), vec![1]);
        assert_eq!(t.allowed_next(&[1, 4, 5]).unwrap(), Vec::<usize>::new());
        assert!(t.allowed_next(&[0]).is_err());
        let m = model(vec![2, 3, 1], 1);
        for b in [1, 3] {
            let r = constrained_beam_search(&m, &[1, 2], &t, b).unwrap();
            assert_eq!(r.len(), 1);
            assert_eq!(r[0].item_id, Some(0));
        }
    }

    #[test]
    fn duplicates_and_empty_sets_are_rejected() {
        let layout = VocabLayout::new(vec![2, 2]).unwrap();
        assert!(PrefixTree::build(&ids(&[&[1, 0], &[1, 0]]), &layout).is_err());
        assert!(PrefixTree::build(&[], &layout).is_err());
    }

    #[test]
    fn uniform_logits_return_lexicographic_order() {
        let layout = VocabLayout::new(vec![3, 3, 2]).unwrap();
        let set = ids(&[&[2, 0, 0], &[0, 1, 1], &[1, 2, 0], &[0, 1, 0], &[0, 0, 1], &[2, 2, 1]]);
        let tree = PrefixTree::build(&set, &layout).unwrap();
        let mut m = model(vec![3, 3, 2], 2);
        flatten_output(&mut m);
        let mut sorted: Vec<Vec<usize>> = set.iter().map(|i| layout.to_global(i).unwrap()).collect();
        sorted.sort();
        for b in 1..=6 {
            let r = constrained_beam_search(&m, &[3], &tree, b).unwrap();
            let got: Vec<Vec<usize>> = r.iter().map(|h| h.tokens.clone()).collect();
            assert_eq!(got, sorted[..b].to_vec(), "beam {b}");
        }
    }

    #[test]
    fn free_beam_one_is_greedy() {
        let m = model(vec![3, 2, 2], 4);
        let r = unconstrained_beam_search(&m, &[1, 5], 1, None).unwrap();
        let enc = m.encode_values(&[&[1, 5]]).unwrap();
        let mut prefix = vec![m.layout.bos()];
        for step in 0..3 {
            let l = m.logits(&enc, &[prefix.clone()]).unwrap();
            let row = l.row(step);
            let best = (0..row.len()).fold(0, |b, i| if row[i] > row[b] { i } else { b });
            prefix.push(best);
        }
        assert_eq!(r[0].tokens, prefix[1..].to_vec());
    }

    #[test]
    fn one_token_vocabulary_makes_free_search_match() {
        let layout = VocabLayout::new(vec![1]).unwrap();
        let tree = PrefixTree::build(&ids(&[&[0]]), &layout).unwrap();
        let m = model(vec![1], 3);
        let c = constrained_beam_search(&m, &[2], &tree, 2).unwrap();
        let f = unconstrained_beam_search(&m, &[2], 2, Some(&tree)).unwrap();
        assert_eq!(c, f);
    }

    #[test]
    fn exhaustive_and_wide_beam_agree() {
        let layout = VocabLayout::new(vec![3, 2, 2]).unwrap();
        let set = ids(&[&[0, 0, 0], &[0, 1, 1], &[1, 0, 0], &[1, 1, 0], &[2, 0, 1], &[2, 1, 0], &[0, 0, 1]]);
        let tree = PrefixTree::build(&set, &layout).unwrap();
        let seqs: Vec<Vec<usize>> = set.iter().map(|i| layout.to_global(i).unwrap()).collect();
        for seed in 0..5 {
            let m = model(vec![3, 2, 2], seed);
            let q = [seed as u32, 7];
            let ex = exhaustive_rank(&m, &q, &seqs).unwrap();
            let bs = constrained_beam_search(&m, &q, &tree, set.len()).unwrap();
            assert_eq!(bs[0].tokens, ex[0].tokens);
            assert_eq!(bs.len(), set.len());
            for (b, e) in bs.iter().zip(&ex) {
                assert_eq!(b.tokens, e.tokens);
                assert!((b.score - e.score).abs() < 1e-9);
            }
        }
    }
}

//! Coarse-fine semantic identifiers `(k, v_1..v_M, u)`.
//!
//! `k` is the item's K-Means cluster, `v_m` are residual-quantization codes
//! of the centroid-centered embedding and `u` is a counter that separates
//! items whose `(k, v)` prefixes collide.

mod kmeans;
mod rqvae;

use std::collections::HashMap;
use std::path::Path;

use ace_tensor::{Rng, Tensor};
use serde::{Deserialize, Serialize};

pub use kmeans::{inertia, center_residuals, kmeans_assign, kmeans_fit, kmeans_plus_plus, lloyd, KMeansConfig, KMeansModel};
pub use rqvae::{
    argmin_entry, codebook_usage_stats, fit_rqvae, init_rqvae, Quantized, RqVae, RqVaeConfig, RqVaeEpoch, RqVaeLosses, UsageStats,
};

use crate::data::{read_jsonl, write_jsonl};
use crate::error::{CoreError, Result};
use crate::par::Exec;

/// Largest allowed unique-token counter plus one.
pub const MAX_UNIQUE: usize = 4096;

/// Positional tokens naming one item.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SemanticIdentifier(pub Vec<u32>);

impl SemanticIdentifier {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn tokens(&self) -> &[u32] {
        &self.0
    }

    /// The trailing counter.
    pub fn unique(&self) -> u32 {
        *self.0.last().expect("identifiers are non-empty")
    }
}

/// Prefix counters and the reverse identifier map.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct IdTable {
    counters: HashMap<Vec<u32>, u32>,
    reverse: HashMap<SemanticIdentifier, usize>,
}

impl IdTable {
    /// Item named by a full identifier.
    pub fn item(&self, id: &[u32]) -> Option<usize> {
        self.reverse.get(&SemanticIdentifier(id.to_vec())).copied()
    }

    /// Number of items already holding `prefix`.
    pub fn count(&self, prefix: &[u32]) -> u32 {
        self.counters.get(prefix).copied().unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.reverse.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reverse.is_empty()
    }

    /// Rebuild from complete identifiers in item order.
    pub fn from_identifiers(ids: &[SemanticIdentifier]) -> Result<Self> {
        let mut t = IdTable::default();
        for (item, id) in ids.iter().enumerate() {
            if id.is_empty() {
                return Err(CoreError::invalid(format!("item {item} has an empty identifier")));
            }
            let prefix = id.0[..id.len() - 1].to_vec();
            let c = t.counters.entry(prefix).or_insert(0);
            *c = (*c).max(id.unique() + 1);
            if t.reverse.insert(id.clone(), item).is_some() {
                return Err(CoreError::invalid(format!("duplicate identifier {:?}", id.0)));
            }
        }
        Ok(t)
    }
}

/// Append the "search and count" token to each prefix, in item order.
pub fn assign_unique_tokens(prefixes: &[Vec<u32>], cap: usize) -> Result<(Vec<SemanticIdentifier>, IdTable)> {
    let mut table = IdTable::default();
    let mut out = Vec::with_capacity(prefixes.len());
    for (item, p) in prefixes.iter().enumerate() {
        let c = table.counters.entry(p.clone()).or_insert(0);
        if *c as usize >= cap {
            return Err(CoreError::invalid(format!("prefix {p:?} has more than {cap} items")));
        }
        let mut tokens = p.clone();
        tokens.push(*c);
        *c += 1;
        let id = SemanticIdentifier(tokens);
        table.reverse.insert(id.clone(), item);
        out.push(id);
    }
    Ok((out, table))
}

/// How identifiers are derived from embeddings.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IdMode {
    /// `(k, v_1..v_M, u)`: K-Means token then RQ-VAE over centered residuals.
    #[default]
    CoarseFine,
    /// `(v_1..v_M, u)`: RQ-VAE over raw embeddings.
    NoKmeans,
    /// `(k, c_1..c_M, u)`: nested K-Means paths, no RQ-VAE.
    HierarchicalKmeans,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IdConfig {
    pub mode: IdMode,
    pub kmeans: KMeansConfig,
    pub rqvae: RqVaeConfig,
    pub max_unique: usize,
}

impl Default for IdConfig {
    fn default() -> Self {
        IdConfig {
            mode: IdMode::CoarseFine,
            kmeans: KMeansConfig::default(),
            rqvae: RqVaeConfig::default(),
            max_unique: MAX_UNIQUE,
        }
    }
}

impl IdConfig {
    /// Size of each non-unique position's token range.
    pub fn prefix_sizes(&self) -> Vec<usize> {
        let m = self.rqvae.levels;
        let n = self.rqvae.codebook_size;
        match self.mode {
            IdMode::CoarseFine | IdMode::HierarchicalKmeans => std::iter::once(self.kmeans.k).chain(std::iter::repeat_n(n, m)).collect(),
            IdMode::NoKmeans => vec![n; m],
        }
    }

    /// Distinct prefixes representable before the unique token.
    pub fn prefix_capacity(&self) -> u128 {
        self.prefix_sizes().iter().map(|&s| s as u128).product()
    }
}

/// Identifiers plus the per-position token range sizes they live in.
#[derive(Clone, Debug, PartialEq)]
pub struct IdentifierSet {
    pub identifiers: Vec<SemanticIdentifier>,
    pub table: IdTable,
    /// Range size per position; the last is `max(u) + 1`.
    pub position_sizes: Vec<usize>,
}

impl IdentifierSet {
    pub fn from_prefixes(prefixes: &[Vec<u32>], prefix_sizes: &[usize], cap: usize) -> Result<Self> {
        for p in prefixes {
            if p.len() != prefix_sizes.len() || p.iter().zip(prefix_sizes).any(|(&t, &s)| t as usize >= s) {
                return Err(CoreError::invalid(format!("prefix {p:?} outside ranges {prefix_sizes:?}")));
            }
        }
        let (identifiers, table) = assign_unique_tokens(prefixes, cap)?;
        let u_max = identifiers.iter().map(|id| id.unique() as usize + 1).max().unwrap_or(1);
        let mut position_sizes = prefix_sizes.to_vec();
        position_sizes.push(u_max);
        Ok(IdentifierSet {
            identifiers,
            table,
            position_sizes,
        })
    }

    /// Rebuild from stored identifiers and their layout sizes.
    pub fn from_identifiers(identifiers: Vec<SemanticIdentifier>, position_sizes: Vec<usize>) -> Result<Self> {
        for id in &identifiers {
            if id.len() != position_sizes.len() || id.tokens().iter().zip(&position_sizes).any(|(&t, &s)| t as usize >= s) {
                return Err(CoreError::invalid(format!("identifier {:?} outside ranges {position_sizes:?}", id.tokens())));
            }
        }
        let table = IdTable::from_identifiers(&identifiers)?;
        Ok(IdentifierSet {
            identifiers,
            table,
            position_sizes,
        })
    }

    pub fn len(&self) -> usize {
        self.identifiers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identifiers.is_empty()
    }

    /// Identifier length `J`.
    pub fn id_len(&self) -> usize {
        self.position_sizes.len()
    }
}

/// Everything produced while building identifiers.
#[derive(Clone, Debug)]
pub struct BuiltIdentifiers {
    pub set: IdentifierSet,
    pub kmeans: Option<KMeansModel>,
    pub rqvae: Option<RqVae<f32>>,
    pub rqvae_log: Vec<RqVaeEpoch>,
    pub usage: Option<UsageStats>,
    /// Inputs the RQ-VAE was trained on (centered residuals or raw rows).
    pub rqvae_inputs: Option<Tensor<f32>>,
}

fn to_u32(xs: &[usize]) -> Vec<u32> {
    xs.iter().map(|&x| x as u32).collect()
}

/// Full pipeline: cluster, center, quantize, count.
pub fn build_identifiers(x: &Tensor<f32>, cfg: &IdConfig, seed: u64, exec: Exec) -> Result<BuiltIdentifiers> {
    if x.shape().len() != 2 || x.rows() == 0 {
        return Err(CoreError::invalid(format!("embeddings must be a non-empty matrix, got {:?}", x.shape())));
    }
    let root = Rng::new(seed);
    match cfg.mode {
        IdMode::CoarseFine => {
            let km = kmeans_fit(x, &cfg.kmeans, root.substream(&[0]).seed(), exec)?;
            let (coarse, residuals) = center_residuals(x, &km, exec)?;
            let (rq, log) = fit_rqvae(&residuals, &cfg.rqvae, root.substream(&[1]).seed())?;
            let codes = rq.quantize(&residuals, exec)?;
            let prefixes: Vec<Vec<u32>> = coarse
                .iter()
                .zip(&codes)
                .map(|(&k, q)| std::iter::once(k as u32).chain(q.indices.iter().map(|&v| v as u32)).collect())
                .collect();
            let usage = codebook_usage_stats(&rq, &residuals, exec)?;
            Ok(BuiltIdentifiers {
                set: IdentifierSet::from_prefixes(&prefixes, &cfg.prefix_sizes(), cfg.max_unique)?,
                kmeans: Some(km),
                rqvae: Some(rq),
                rqvae_log: log,
                usage: Some(usage),
                rqvae_inputs: Some(residuals),
            })
        }
        IdMode::NoKmeans => {
            let (rq, log) = fit_rqvae(x, &cfg.rqvae, root.substream(&[1]).seed())?;
            let codes = rq.quantize(x, exec)?;
            let prefixes: Vec<Vec<u32>> = codes.iter().map(|q| to_u32(&q.indices)).collect();
            let usage = codebook_usage_stats(&rq, x, exec)?;
            Ok(BuiltIdentifiers {
                set: IdentifierSet::from_prefixes(&prefixes, &cfg.prefix_sizes(), cfg.max_unique)?,
                kmeans: None,
                rqvae: Some(rq),
                rqvae_log: log,
                usage: Some(usage),
                rqvae_inputs: Some(x.clone()),
            })
        }
        IdMode::HierarchicalKmeans => {
            let prefixes = hierarchical_paths(x, cfg, &root, exec)?;
            Ok(BuiltIdentifiers {
                set: IdentifierSet::from_prefixes(&prefixes, &cfg.prefix_sizes(), cfg.max_unique)?,
                kmeans: None,
                rqvae: None,
                rqvae_log: Vec::new(),
                usage: None,
                rqvae_inputs: None,
            })
        }
    }
}

/// Nested clustering: `K` clusters at the top, then up to `N` clusters
/// inside every cluster for `M` further levels. Groups smaller than the
/// branching factor give each member its own branch.
fn hierarchical_paths(x: &Tensor<f32>, cfg: &IdConfig, root: &Rng, exec: Exec) -> Result<Vec<Vec<u32>>> {
    let n = x.rows();
    let d = x.cols();
    let mut paths: Vec<Vec<u32>> = vec![Vec::new(); n];
    let mut groups: Vec<(Vec<u32>, Vec<usize>)> = vec![(Vec::new(), (0..n).collect())];
    let branching: Vec<usize> = cfg.prefix_sizes();
    for (level, &b) in branching.iter().enumerate() {
        let mut next = Vec::new();
        for (path, members) in groups {
            let k = b.min(members.len());
            let sub = Tensor::new(vec![members.len(), d], members.iter().flat_map(|&i| x.row(i).to_vec()).collect())?;
            let mut ids: Vec<u64> = vec![level as u64];
            ids.extend(path.iter().map(|&t| t as u64));
            let km = kmeans_fit(
                &sub,
                &KMeansConfig {
                    k,
                    batch_size: 0,
                    ..cfg.kmeans.clone()
                },
                root.substream(&ids).seed(),
                exec,
            )?;
            let assign = kmeans_assign(&km, &sub, exec)?;
            let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); k];
            for (&item, &c) in members.iter().zip(&assign) {
                paths[item].push(c as u32);
                buckets[c].push(item);
            }
            for (c, bucket) in buckets.into_iter().enumerate() {
                if !bucket.is_empty() {
                    let mut p = path.clone();
                    p.push(c as u32);
                    next.push((p, bucket));
                }
            }
        }
        groups = next;
    }
    Ok(paths)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdentifierRecord {
    pub item_id: usize,
    pub tokens: Vec<u32>,
}

pub fn write_identifiers(path: &Path, ids: &[SemanticIdentifier]) -> Result<()> {
    let records: Vec<IdentifierRecord> = ids
        .iter()
        .enumerate()
        .map(|(item_id, id)| IdentifierRecord {
            item_id,
            tokens: id.0.clone(),
        })
        .collect();
    write_jsonl(path, &records)
}

/// Read an identifier file; item ids must be exactly `0..n` (any order) and
/// identifiers unique with one common length.
pub fn read_identifiers(path: &Path) -> Result<Vec<SemanticIdentifier>> {
    let mut records: Vec<IdentifierRecord> = read_jsonl(path)?;
    records.sort_by_key(|r| r.item_id);
    let bad = |msg: String| CoreError::Format {
        path: path.to_path_buf(),
        offset: 0,
        msg,
    };
    for (i, r) in records.iter().enumerate() {
        if r.item_id != i {
            return Err(bad(format!("item ids must be 0..{}, found {}", records.len(), r.item_id)));
        }
        if r.tokens.len() != records[0].tokens.len() || r.tokens.is_empty() {
            return Err(bad(format!("item {i} has identifier length {}", r.tokens.len())));
        }
    }
    let ids: Vec<SemanticIdentifier> = records.into_iter().map(|r| SemanticIdentifier(r.tokens)).collect();
    IdTable::from_identifiers(&ids).map_err(|e| bad(e.to_string()))?;
    Ok(ids)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counters_increment_per_prefix() {
        let p = vec![vec![5, 3, 7]; 3];
        let (ids, table) = assign_unique_tokens(&p, MAX_UNIQUE).unwrap();
        assert_eq!(ids.iter().map(SemanticIdentifier::unique).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert_eq!(table.count(&[5, 3, 7]), 3);
        assert_eq!(table.item(&[5, 3, 7, 1]), Some(1));
        let (ids, _) = assign_unique_tokens(&[vec![1, 2], vec![2, 1]], MAX_UNIQUE).unwrap();
        assert!(ids.iter().all(|id| id.unique() == 0));
    }

    #[test]
    fn counter_cap_is_enforced() {
        assert!(assign_unique_tokens(&vec![vec![0]; 5], 4).is_err());
        assert!(assign_unique_tokens(&vec![vec![0]; 4], 4).is_ok());
    }

    #[test]
    fn paper_scale_capacity() {
        let cfg = IdConfig {
            kmeans: KMeansConfig { k: 128, ..Default::default() },
            rqvae: RqVaeConfig {
                codebook_size: 128,
                levels: 2,
                ..Default::default()
            },
            ..Default::default()
        };
        assert_eq!(cfg.prefix_capacity(), 2_097_152);
    }

    #[test]
    fn table_rejects_duplicates() {
        let ids = vec![SemanticIdentifier(vec![1, 0]), SemanticIdentifier(vec![1, 0])];
        assert!(IdTable::from_identifiers(&ids).is_err());
    }

    #[test]
    fn identifier_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ids.jsonl");
        let ids = vec![SemanticIdentifier(vec![3, 1, 4, 0]), SemanticIdentifier(vec![3, 1, 4, 1])];
        write_identifiers(&p, &ids).unwrap();
        assert_eq!(read_identifiers(&p).unwrap(), ids);
        std::fs::write(&p, "{\"item_id\":1,\"tokens\":[1,0]}\n").unwrap();
        assert!(read_identifiers(&p).is_err());
    }
}

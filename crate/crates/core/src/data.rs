//! Seeded synthetic corpora and query sets, plus their on-disk formats.
//!
//! Items are noisy copies of well-separated concept centers. Each item gets
//! a base phrase made of a concept token block followed by an item token
//! block, drawn from disjoint vocabulary ranges; queries are noisy copies of
//! that phrase.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ace_tensor::{Rng, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Minimum pairwise center distance, in units of the noise scale.
pub const CENTER_SEPARATION: f64 = 6.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub n_items: usize,
    pub n_concepts: usize,
    pub dim: usize,
    pub noise_sigma: f64,
    /// Radius of the sphere the concept centers are drawn on.
    pub spread: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n_items: 512,
            n_concepts: 16,
            dim: 64,
            noise_sigma: 0.1,
            spread: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ItemRecord {
    pub item_id: usize,
    pub concept_id: usize,
    pub embedding: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub items: Vec<ItemRecord>,
    pub dim: usize,
    pub concepts: Vec<Vec<f32>>,
    pub seed: u64,
}

impl Corpus {
    /// `n x dim` matrix of item embeddings in item order.
    pub fn embeddings(&self) -> Tensor<f32> {
        let data = self.items.iter().flat_map(|it| it.embedding.iter().copied()).collect();
        Tensor::new(vec![self.items.len(), self.dim], data).expect("rows have dim entries")
    }

    /// `n` new items around the same concept centers (round-robin concepts),
    /// for held-out measurements.
    pub fn fresh_embeddings(&self, n: usize, noise_sigma: f64, seed: u64) -> Tensor<f32> {
        let root = Rng::new(seed);
        let data = (0..n)
            .flat_map(|i| {
                let mut rng = root.substream(&[i as u64]);
                self.concepts[i % self.concepts.len()]
                    .iter()
                    .map(move |&c| (c as f64 + noise_sigma * rng.normal()) as f32)
                    .collect::<Vec<_>>()
            })
            .collect();
        Tensor::new(vec![n, self.dim], data).expect("rows have dim entries")
    }

    pub fn concept_ids(&self) -> Vec<usize> {
        self.items.iter().map(|it| it.concept_id).collect()
    }
}

fn unit_vector(rng: &mut Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Draw concept centers on a sphere with pairwise distance at least
/// `CENTER_SEPARATION * noise_sigma`, growing the radius when rejection
/// sampling stalls.
fn concept_centers(cfg: &CorpusConfig, rng: &mut Rng) -> Vec<Vec<f64>> {
    let min_dist = CENTER_SEPARATION * cfg.noise_sigma;
    let mut radius = cfg.spread;
    'restart: loop {
        let mut centers: Vec<Vec<f64>> = Vec::with_capacity(cfg.n_concepts);
        while centers.len() < cfg.n_concepts {
            let mut placed = false;
            for _ in 0..1000 {
                let c: Vec<f64> = unit_vector(rng, cfg.dim).into_iter().map(|x| x * radius).collect();
                if centers.iter().all(|o| dist(o, &c) >= min_dist) {
                    centers.push(c);
                    placed = true;
                    break;
                }
            }
            if !placed {
                radius *= 1.25;
                continue 'restart;
            }
        }
        return centers;
    }
}

pub fn generate_corpus(cfg: &CorpusConfig, seed: u64) -> Result<Corpus> {
    if cfg.n_items == 0 || cfg.n_concepts == 0 || cfg.n_concepts > cfg.n_items {
        return Err(CoreError::invalid(format!(
            "need 1 <= concepts <= items, got {} concepts for {} items",
            cfg.n_concepts, cfg.n_items
        )));
    }
    if cfg.dim < 2 {
        return Err(CoreError::invalid(format!("dim must be >= 2, got {}", cfg.dim)));
    }
    if !(cfg.noise_sigma >= 0.0) || !cfg.noise_sigma.is_finite() {
        return Err(CoreError::invalid(format!("noise_sigma must be >= 0, got {}", cfg.noise_sigma)));
    }
    if !(cfg.spread > 0.0) || !cfg.spread.is_finite() {
        return Err(CoreError::invalid(format!("spread must be positive, got {}", cfg.spread)));
    }
    let root = Rng::new(seed);
    let centers = concept_centers(cfg, &mut root.substream(&[0]));

    let mut assignment: Vec<usize> = (0..cfg.n_items).map(|i| i % cfg.n_concepts).collect();
    root.substream(&[1]).shuffle(&mut assignment);

    let items = assignment
        .iter()
        .enumerate()
        .map(|(item_id, &concept_id)| {
            let mut rng = root.substream(&[2, item_id as u64]);
            let embedding = centers[concept_id]
                .iter()
                .map(|&c| (c + cfg.noise_sigma * rng.normal()) as f32)
                .collect();
            ItemRecord {
                item_id,
                concept_id,
                embedding,
            }
        })
        .collect();
    Ok(Corpus {
        items,
        dim: cfg.dim,
        concepts: centers.iter().map(|c| c.iter().map(|&x| x as f32).collect()).collect(),
        seed,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryRecord {
    pub query_id: usize,
    pub item_id: usize,
    pub split: Split,
    pub tokens: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QueryConfig {
    pub queries_per_item: usize,
    /// Tokens per phrase; the first `phrase_len / 2` come from the concept
    /// block, the rest from the item block.
    pub phrase_len: usize,
    pub noise_rate: f64,
    pub vocab_size: usize,
}

impl Default for QueryConfig {
    fn default() -> Self {
        QueryConfig {
            queries_per_item: 5,
            phrase_len: 5,
            noise_rate: 0.1,
            vocab_size: 2048,
        }
    }
}

impl QueryConfig {
    pub fn concept_len(&self) -> usize {
        self.phrase_len / 2
    }

    pub fn item_len(&self) -> usize {
        self.phrase_len - self.concept_len()
    }
}

/// Noise-free phrase for every item: concept block then item block.
pub fn base_phrases(corpus: &Corpus, cfg: &QueryConfig) -> Result<Vec<Vec<u32>>> {
    if cfg.phrase_len < 2 {
        return Err(CoreError::invalid(format!("phrase_len must be >= 2, got {}", cfg.phrase_len)));
    }
    let (cl, il) = (cfg.concept_len(), cfg.item_len());
    let needed = corpus.concepts.len() * cl + corpus.items.len() * il;
    if needed > cfg.vocab_size || cfg.vocab_size > u32::MAX as usize {
        return Err(CoreError::invalid(format!(
            "vocab of {} cannot hold disjoint blocks needing {needed} tokens",
            cfg.vocab_size
        )));
    }
    let item_base = corpus.concepts.len() * cl;
    Ok(corpus
        .items
        .iter()
        .map(|it| {
            let concept = (0..cl).map(|j| (it.concept_id * cl + j) as u32);
            let item = (0..il).map(|j| (item_base + it.item_id * il + j) as u32);
            concept.chain(item).collect()
        })
        .collect())
}

/// Queries numbered `item_id * queries_per_item + q`, all labelled train
/// until [`split_queries`] runs.
pub fn generate_queries(corpus: &Corpus, cfg: &QueryConfig, seed: u64) -> Result<Vec<QueryRecord>> {
    if cfg.queries_per_item == 0 {
        return Err(CoreError::invalid("queries_per_item must be >= 1"));
    }
    if !(0.0..1.0).contains(&cfg.noise_rate) {
        return Err(CoreError::invalid(format!("noise_rate {} not in [0, 1)", cfg.noise_rate)));
    }
    let phrases = base_phrases(corpus, cfg)?;
    let root = Rng::new(seed);
    let mut out = Vec::with_capacity(phrases.len() * cfg.queries_per_item);
    for (item_id, phrase) in phrases.iter().enumerate() {
        for q in 0..cfg.queries_per_item {
            let mut rng = root.substream(&[item_id as u64, q as u64]);
            let tokens = phrase
                .iter()
                .map(|&t| {
                    if rng.bernoulli(cfg.noise_rate) {
                        rng.below(cfg.vocab_size) as u32
                    } else {
                        t
                    }
                })
                .collect();
            out.push(QueryRecord {
                query_id: item_id * cfg.queries_per_item + q,
                item_id,
                split: Split::Train,
                tokens,
            });
        }
    }
    Ok(out)
}

/// Assign splits per query so that every item keeps at least one training
/// query.
///
/// Each item's queries are shuffled, `max(floor(f_train * q), 1)` go to
/// train and the remainder are dealt one at a time to whichever split is
/// furthest below its global target so far (ties to the earlier split).
pub fn split_queries(records: &mut [QueryRecord], fractions: [f64; 3], seed: u64) -> Result<()> {
    if fractions.iter().any(|f| !(*f >= 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(CoreError::invalid(format!("split fractions {fractions:?} must be >= 0 and sum to 1")));
    }
    if fractions[0] == 0.0 && !records.is_empty() {
        return Err(CoreError::invalid("a zero train fraction would leave items without training queries"));
    }
    let mut by_item: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, r) in records.iter().enumerate() {
        by_item.entry(r.item_id).or_default().push(i);
    }
    let root = Rng::new(seed);
    let mut counts = [0usize; 3];
    let mut seen = 0usize;
    for (&item, idx) in &mut by_item {
        root.substream(&[item as u64]).shuffle(idx);
        let q = idx.len();
        seen += q;
        let n_train = ((fractions[0] * q as f64 + 1e-9).floor() as usize).clamp(1, q);
        for &i in &idx[..n_train] {
            records[i].split = Split::Train;
        }
        counts[0] += n_train;
        for &i in &idx[n_train..] {
            let best = (0..3)
                .map(|s| (s, fractions[s] * seen as f64 - counts[s] as f64))
                .fold((0, f64::NEG_INFINITY), |acc, (s, d)| if d > acc.1 { (s, d) } else { acc })
                .0;
            counts[best] += 1;
            records[i].split = Split::ALL[best];
        }
    }
    Ok(())
}

const EMB_MAGIC: &[u8; 8] = b"ACEEMB01";

/// Embedding file: magic, u32 LE count, u32 LE dim, f32 LE row-major.
pub fn write_embeddings(path: &Path, m: &Tensor<f32>) -> Result<()> {
    if m.shape().len() != 2 {
        return Err(CoreError::invalid(format!("embeddings must be 2-D, got {:?}", m.shape())));
    }
    let (n, d) = (m.shape()[0], m.shape()[1]);
    let to_u32 = |x: usize| u32::try_from(x).map_err(|_| CoreError::invalid(format!("{x} exceeds u32")));
    let mut buf = Vec::with_capacity(16 + 4 * m.len());
    buf.extend_from_slice(EMB_MAGIC);
    buf.extend_from_slice(&to_u32(n)?.to_le_bytes());
    buf.extend_from_slice(&to_u32(d)?.to_le_bytes());
    for v in m.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| CoreError::io(path, e))
}

pub fn read_embeddings(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| CoreError::io(path, e))?;
    let fail = |offset: usize, msg: String| CoreError::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        msg,
    };
    if bytes.len() < 8 || &bytes[..8] != EMB_MAGIC {
        return Err(fail(0, "bad magic, expected ACEEMB01".into()));
    }
    if bytes.len() < 16 {
        return Err(fail(bytes.len(), "truncated header".into()));
    }
    let word = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let (n, d) = (word(8), word(12));
    if d == 0 && n > 0 {
        return Err(fail(12, "zero dim with non-empty payload".into()));
    }
    let expect = n
        .checked_mul(d)
        .and_then(|x| x.checked_mul(4))
        .ok_or_else(|| fail(8, format!("{n} x {d} overflows")))?;
    let payload = &bytes[16..];
    if payload.len() != expect {
        return Err(fail(
            16 + payload.len().min(expect),
            format!("payload is {} bytes, {n} x {d} needs {expect}", payload.len()),
        ));
    }
    let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(Tensor::new(vec![n, d], data)?)
}

/// Embedding file with a required dimensionality.
pub fn read_embeddings_dim(path: &Path, dim: usize) -> Result<Tensor<f32>> {
    let m = read_embeddings(path)?;
    if m.shape()[1] != dim {
        return Err(CoreError::Format {
            path: path.to_path_buf(),
            offset: 12,
            msg: format!("dim {} does not match expected {dim}", m.shape()[1]),
        });
    }
    Ok(m)
}

/// Write serde records as JSON lines.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| CoreError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| CoreError::io(path, e.into()))?;
        w.write_all(b"\n").map_err(|e| CoreError::io(path, e))?;
    }
    w.flush().map_err(|e| CoreError::io(path, e))
}

/// Read JSON lines, skipping blank lines; errors carry the line number.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| CoreError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CoreError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| CoreError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn write_queries(path: &Path, records: &[QueryRecord]) -> Result<()> {
    write_jsonl(path, records)
}

/// Read a query file, checking every token against `vocab_size` when given.
pub fn read_queries(path: &Path, vocab_size: Option<usize>) -> Result<Vec<QueryRecord>> {
    let records: Vec<QueryRecord> = read_jsonl(path)?;
    for (i, r) in records.iter().enumerate() {
        if r.tokens.is_empty() {
            return Err(CoreError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: "query has no tokens".into(),
            });
        }
        if let Some(v) = vocab_size {
            if let Some(t) = r.tokens.iter().find(|&&t| t as usize >= v) {
                return Err(CoreError::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: format!("token {t} outside vocab of {v}"),
                });
            }
        }
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CorpusConfig {
        CorpusConfig {
            n_items: 40,
            n_concepts: 4,
            dim: 8,
            noise_sigma: 0.1,
            spread: 1.0,
        }
    }

    #[test]
    fn zero_noise_collapses_concepts() {
        let c = generate_corpus(&CorpusConfig { noise_sigma: 0.0, ..small() }, 3).unwrap();
        for it in &c.items {
            assert_eq!(it.embedding, c.concepts[it.concept_id]);
        }
    }

    #[test]
    fn centers_are_separated_and_balanced() {
        let cfg = CorpusConfig { noise_sigma: 0.3, ..small() };
        let c = generate_corpus(&cfg, 9).unwrap();
        for (i, a) in c.concepts.iter().enumerate() {
            for b in &c.concepts[i + 1..] {
                let d: f32 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f32>().sqrt();
                assert!(d as f64 >= CENTER_SEPARATION * 0.3 - 1e-5);
            }
        }
        let mut counts = [0; 4];
        c.items.iter().for_each(|it| counts[it.concept_id] += 1);
        assert_eq!(counts, [10; 4]);
    }

    #[test]
    fn rejects_bad_sizes() {
        assert!(generate_corpus(&CorpusConfig { n_items: 0, ..small() }, 1).is_err());
        assert!(generate_corpus(&CorpusConfig { n_concepts: 41, ..small() }, 1).is_err());
        assert!(generate_corpus(&CorpusConfig { dim: 1, ..small() }, 1).is_err());
        assert!(generate_corpus(&CorpusConfig { noise_sigma: -1.0, ..small() }, 1).is_err());
    }

    #[test]
    fn noiseless_queries_repeat_the_phrase() {
        let c = generate_corpus(&small(), 1).unwrap();
        let cfg = QueryConfig {
            queries_per_item: 3,
            noise_rate: 0.0,
            ..Default::default()
        };
        let q = generate_queries(&c, &cfg, 2).unwrap();
        let phrases = base_phrases(&c, &cfg).unwrap();
        assert_eq!(q.len(), 120);
        for r in &q {
            assert_eq!(r.tokens, phrases[r.item_id]);
        }
    }

    #[test]
    fn blocks_are_disjoint() {
        let c = generate_corpus(&small(), 1).unwrap();
        let cfg = QueryConfig::default();
        let phrases = base_phrases(&c, &cfg).unwrap();
        let mut item_tokens = std::collections::HashSet::new();
        for (p, it) in phrases.iter().zip(&c.items) {
            for &t in &p[cfg.concept_len()..] {
                assert!(item_tokens.insert(t));
            }
            // same concept, same concept block
            let first = c.items.iter().position(|o| o.concept_id == it.concept_id).unwrap();
            assert_eq!(p[..cfg.concept_len()], phrases[first][..cfg.concept_len()]);
        }
        let tiny = QueryConfig { vocab_size: 100, ..cfg };
        assert!(base_phrases(&c, &tiny).is_err());
    }

    #[test]
    fn split_counts_per_item() {
        let c = generate_corpus(&small(), 1).unwrap();
        let mut q = generate_queries(&c, &QueryConfig::default(), 2).unwrap();
        split_queries(&mut q, [0.8, 0.1, 0.1], 5).unwrap();
        let mut totals = [0usize; 3];
        for item in 0..40 {
            let mine: Vec<_> = q.iter().filter(|r| r.item_id == item).collect();
            let n = |s| mine.iter().filter(|r| r.split == s).count();
            assert_eq!(n(Split::Train), 4);
            assert!(n(Split::Val) <= 1 && n(Split::Test) <= 1);
        }
        q.iter().for_each(|r| totals[r.split as usize] += 1);
        for (t, f) in totals.iter().zip([0.8, 0.1, 0.1]) {
            assert!((*t as f64 - f * 200.0).abs() <= 1.0, "{totals:?}");
        }
    }

    #[test]
    fn split_edge_cases() {
        let c = generate_corpus(&small(), 1).unwrap();
        let mut q = generate_queries(&c, &QueryConfig::default(), 2).unwrap();
        split_queries(&mut q, [1.0, 0.0, 0.0], 5).unwrap();
        assert!(q.iter().all(|r| r.split == Split::Train));
        assert!(split_queries(&mut q, [0.0, 0.5, 0.5], 5).is_err());
        assert!(split_queries(&mut q, [0.5, 0.1, 0.1], 5).is_err());
        let mut one = generate_queries(&c, &QueryConfig { queries_per_item: 1, ..Default::default() }, 2).unwrap();
        split_queries(&mut one, [0.1, 0.45, 0.45], 5).unwrap();
        assert!(one.iter().all(|r| r.split == Split::Train));
    }

    #[test]
    fn embedding_header_is_sixteen_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.bin");
        let m = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        write_embeddings(&p, &m).unwrap();
        assert_eq!(fs::metadata(&p).unwrap().len(), 16 + 24);
        let empty = Tensor::<f32>::new(vec![0, 7], vec![]).unwrap();
        write_embeddings(&p, &empty).unwrap();
        assert_eq!(read_embeddings(&p).unwrap().shape(), &[0, 7]);
    }

    #[test]
    fn embedding_format_errors_carry_offsets() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.bin");
        fs::write(&p, b"NOTMAGIC").unwrap();
        assert!(matches!(read_embeddings(&p), Err(CoreError::Format { offset: 0, .. })));
        let m = Tensor::new(vec![2, 3], vec![0.5; 6]).unwrap();
        write_embeddings(&p, &m).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes.truncate(30);
        fs::write(&p, &bytes).unwrap();
        match read_embeddings(&p) {
            Err(CoreError::Format { offset, .. }) => assert_eq!(offset, 30),
            other => panic!("{other:?}"),
        }
        write_embeddings(&p, &m).unwrap();
        assert!(read_embeddings_dim(&p, 4).is_err());
    }
}

//! Teacher-forced training of the fusion model with R-Drop consistency,
//! plus checkpoint persistence.
//!
//! A training step runs the batch twice inside one graph (the batch is
//! duplicated, so the two halves see independent dropout masks). The loss
//! is mean token cross-entropy over both passes plus `omega` times the
//! symmetric KL between the passes, summed over positions and averaged over
//! examples. Large batches are split into fixed chunks whose gradients are
//! merged in chunk order, so results do not depend on thread count.

use std::collections::HashMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ace_tensor::{lr_at_step, Adam, Graph, Grads, ParamStore, Rng, Scalar, ScheduleSpec, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::data::{QueryRecord, Split};
use crate::error::{CoreError, Result};
use crate::ids::IdentifierSet;
use crate::model::{Dropout, FusionModel, ModelConfig, VocabLayout};
use crate::par::Exec;

/// One (query, identifier) pair in global decoder-token ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub query: Vec<u32>,
    pub item_id: usize,
    pub target: Vec<usize>,
}

impl Example {
    /// Decoder input for teacher forcing: BOS followed by all but the last
    /// gold token.
    pub fn prefix(&self, bos: usize) -> Vec<usize> {
        let mut p = Vec::with_capacity(self.target.len());
        p.push(bos);
        p.extend_from_slice(&self.target[..self.target.len() - 1]);
        p
    }
}

/// Pair every query of `split` with its item's identifier.
pub fn make_examples(queries: &[QueryRecord], ids: &IdentifierSet, layout: &VocabLayout, split: Split) -> Result<Vec<Example>> {
    queries
        .iter()
        .filter(|q| q.split == split)
        .map(|q| {
            let id = ids
                .identifiers
                .get(q.item_id)
                .ok_or_else(|| CoreError::invalid(format!("query {} references item {} without an identifier", q.query_id, q.item_id)))?;
            Ok(Example {
                query: q.tokens.clone(),
                item_id: q.item_id,
                target: layout.to_global(id)?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// Weight of the consistency term.
    pub omega: f64,
    pub lr_init: f64,
    pub lr_peak: f64,
    pub warmup_epochs: usize,
    /// Dropout for training; `None` uses the model's configured rate.
    pub dropout: Option<f64>,
    /// Examples per gradient chunk.
    pub chunk_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            epochs: 60,
            omega: 0.15,
            lr_init: 1e-6,
            lr_peak: 1e-4,
            warmup_epochs: 5,
            dropout: None,
            chunk_size: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.chunk_size == 0 {
            return Err(CoreError::invalid("batch_size and chunk_size must be >= 1"));
        }
        if !(self.omega >= 0.0) || !self.omega.is_finite() {
            return Err(CoreError::invalid(format!("omega must be >= 0, got {}", self.omega)));
        }
        if !(self.lr_init > 0.0 && self.lr_peak > 0.0) {
            return Err(CoreError::invalid("learning rates must be > 0"));
        }
        if let Some(p) = self.dropout {
            if !(0.0..1.0).contains(&p) {
                return Err(CoreError::invalid(format!("dropout {p} not in [0, 1)")));
            }
        }
        Ok(())
    }

    /// The warmup-then-cosine schedule for `steps_per_epoch`.
    pub fn schedule(&self, steps_per_epoch: usize) -> ScheduleSpec {
        let warmup = (self.warmup_epochs * steps_per_epoch) as u64;
        let total = (self.epochs * steps_per_epoch) as u64;
        ScheduleSpec::cosine(self.lr_init, self.lr_peak, warmup, total.saturating_sub(warmup))
    }
}

/// Symmetric KL between row-wise softmaxes of `p` and `q`, summed over rows
/// and divided by `groups`.
pub fn bidirectional_kl(p: &Tensor<f64>, q: &Tensor<f64>, groups: usize) -> Result<f64> {
    if p.shape() != q.shape() || p.shape().len() != 2 {
        return Err(CoreError::invalid(format!("kl shapes {:?} and {:?} differ", p.shape(), q.shape())));
    }
    let c = p.cols();
    let mut total = 0.0;
    for r in 0..p.rows() {
        let lp = log_softmax(p.row(r));
        let lq = log_softmax(q.row(r));
        total += (0..c).map(|j| (lp[j].exp() - lq[j].exp()) * (lp[j] - lq[j])).sum::<f64>();
    }
    Ok(total / groups.max(1) as f64)
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Graph nodes of one loss evaluation.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    /// `ce_weight * ce + kl_weight * kl`, the node to differentiate.
    pub objective: Var,
    /// Mean token NLL over both passes.
    pub ce: Var,
    /// Symmetric KL summed over positions, averaged over examples.
    pub kl: Var,
}

/// Build the R-Drop loss for `batch`. `ce_weight` and `kl_weight` scale the
/// two terms in `objective` so chunk objectives add up to the batch loss.
pub fn loss_graph<'a, T: Scalar>(
    model: &'a FusionModel<T>,
    g: &mut Graph<'a, T>,
    batch: &[&Example],
    ce_weight: f64,
    kl_weight: f64,
    dropout: &mut Option<Dropout<'_>>,
) -> Result<LossVars> {
    if batch.is_empty() {
        return Err(CoreError::invalid("empty training batch"));
    }
    let j = batch[0].target.len();
    if j == 0 || batch.iter().any(|e| e.target.len() != j) {
        return Err(CoreError::invalid("identifiers in a batch must share one non-zero length"));
    }
    let b = batch.len();
    let bos = model.layout.bos();
    let queries: Vec<&[u32]> = batch.iter().chain(batch.iter()).map(|e| e.query.as_slice()).collect();
    let prefixes: Vec<Vec<usize>> = batch.iter().chain(batch.iter()).map(|e| e.prefix(bos)).collect();
    let targets: Vec<usize> = batch.iter().chain(batch.iter()).flat_map(|e| e.target.iter().copied()).collect();
    let enc = model.encode(g, &queries, dropout)?;
    let logits = model.decode(g, &enc, &prefixes, dropout)?;
    let ce = g.cross_entropy(logits, &targets)?;
    let l1 = g.rows(logits, 0, b * j)?;
    let l2 = g.rows(logits, b * j, 2 * b * j)?;
    let p1 = g.softmax(l1)?;
    let p2 = g.softmax(l2)?;
    let lp1 = g.log_softmax(l1)?;
    let lp2 = g.log_softmax(l2)?;
    let dp = g.sub(p1, p2)?;
    let dl = g.sub(lp1, lp2)?;
    let prod = g.mul(dp, dl)?;
    let kl_sum = g.sum(prod);
    let kl = g.scale(kl_sum, T::from_f64(1.0 / b as f64));
    let a = g.scale(ce, T::from_f64(ce_weight));
    let k = g.scale(kl, T::from_f64(kl_weight));
    let objective = g.add(a, k)?;
    Ok(LossVars { objective, ce, kl })
}

/// Losses of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub total: f64,
    pub ce: f64,
    pub kl: f64,
}

/// Gradients of the batch loss, chunked and merged in chunk order. The
/// dropout stream of chunk `c` is `rng.substream(&[c])`.
pub fn batch_gradients(
    model: &FusionModel<f32>,
    batch: &[&Example],
    omega: f64,
    dropout: f64,
    chunk_size: usize,
    rng: &Rng,
    exec: Exec,
) -> Result<(StepLoss, Grads<f32>)> {
    let n = batch.len();
    let n_tokens: usize = batch.iter().map(|e| e.target.len()).sum();
    let parts = exec.map_chunks(batch, chunk_size, |c, chunk| -> Result<(f64, f64, Grads<f32>)> {
        let tokens: usize = chunk.iter().map(|e| e.target.len()).sum();
        let ce_w = tokens as f64 / n_tokens as f64;
        let kl_w = omega * chunk.len() as f64 / n as f64;
        let mut chunk_rng = rng.substream(&[c as u64]);
        let mut d = (dropout > 0.0).then(|| Dropout { rate: dropout, rng: &mut chunk_rng });
        let mut g = Graph::new();
        let vars = loss_graph(model, &mut g, chunk, ce_w, kl_w, &mut d)?;
        let ce = g.value(vars.ce).item() as f64 * ce_w;
        let kl = g.value(vars.kl).item() as f64 * chunk.len() as f64 / n as f64;
        Ok((ce, kl, g.backward(vars.objective)?))
    });
    let mut ce = 0.0;
    let mut kl = 0.0;
    let mut grads = Grads::empty();
    for part in parts {
        let (c, k, gr) = part?;
        ce += c;
        kl += k;
        grads.merge(gr);
    }
    Ok((StepLoss { total: ce + omega * kl, ce, kl }, grads))
}

/// One optimizer step on `batch`.
pub fn training_step(
    model: &mut FusionModel<f32>,
    batch: &[&Example],
    config: &TrainConfig,
    lr: f64,
    adam: &Adam,
    rng: &Rng,
    exec: Exec,
) -> Result<StepLoss> {
    let dropout = config.dropout.unwrap_or(model.config.dropout);
    let (loss, grads) = batch_gradients(model, batch, config.omega, dropout, config.chunk_size, rng, exec)?;
    if !loss.total.is_finite() {
        return Err(CoreError::Training(format!("non-finite loss {} (ce {}, kl {})", loss.total, loss.ce, loss.kl)));
    }
    model.store.accumulate(&grads, 1.0);
    adam.step(&mut model.store, lr)?;
    Ok(loss)
}

/// Teacher-forced log-probabilities of `targets` (global ids), one query
/// per target, dropout off.
pub fn sequence_log_probs<T: Scalar>(model: &FusionModel<T>, queries: &[&[u32]], targets: &[Vec<usize>]) -> Result<Vec<f64>> {
    if queries.len() != targets.len() {
        return Err(CoreError::invalid(format!("{} queries for {} targets", queries.len(), targets.len())));
    }
    if queries.is_empty() {
        return Ok(Vec::new());
    }
    let enc = model.encode_values(queries)?;
    score_targets(model, &enc, targets, None)
}

/// Score targets against already-encoded queries. Target `i` reads query
/// `map[i]`, or query `i` without a map.
pub fn score_targets<T: Scalar>(
    model: &FusionModel<T>,
    enc: &crate::model::EncoderValues<T>,
    targets: &[Vec<usize>],
    map: Option<&[usize]>,
) -> Result<Vec<f64>> {
    let layout = &model.layout;
    for t in targets {
        if t.len() != layout.id_len() {
            return Err(CoreError::invalid(format!("identifier of length {} for layout of length {}", t.len(), layout.id_len())));
        }
        for (pos, &tok) in t.iter().enumerate() {
            if !layout.range(pos).contains(&tok) {
                return Err(CoreError::invalid(format!("token {tok} outside the range of position {pos}")));
            }
        }
    }
    let bos = layout.bos();
    let prefixes: Vec<Vec<usize>> = targets
        .iter()
        .map(|t| std::iter::once(bos).chain(t[..t.len() - 1].iter().copied()).collect())
        .collect();
    let logits = match map {
        Some(m) => model.logits_mapped(enc, &prefixes, m)?,
        None => model.logits(enc, &prefixes)?,
    };
    let j = layout.id_len();
    Ok(targets
        .iter()
        .enumerate()
        .map(|(i, t)| {
            t.iter()
                .enumerate()
                .map(|(pos, &tok)| {
                    let row: Vec<f64> = logits.row(i * j + pos).iter().map(|v| v.to_f64()).collect();
                    log_softmax(&row)[tok]
                })
                .sum()
        })
        .collect())
}

/// Log-probability of one identifier given one query.
pub fn sequence_log_prob<T: Scalar>(model: &FusionModel<T>, query: &[u32], target: &[usize]) -> Result<f64> {
    Ok(sequence_log_probs(model, &[query], &[target.to_vec()])?[0])
}

/// Mean token NLL over `examples`, dropout off, evaluated in batches.
pub fn mean_token_nll(model: &FusionModel<f32>, examples: &[Example], exec: Exec) -> Result<f64> {
    if examples.is_empty() {
        return Ok(f64::NAN);
    }
    let sums = exec.map_chunks(examples, 64, |_, chunk| -> Result<(f64, usize)> {
        let q: Vec<&[u32]> = chunk.iter().map(|e| e.query.as_slice()).collect();
        let t: Vec<Vec<usize>> = chunk.iter().map(|e| e.target.clone()).collect();
        let lp = sequence_log_probs(model, &q, &t)?;
        Ok((-lp.iter().sum::<f64>(), t.iter().map(Vec::len).sum()))
    });
    let (mut nll, mut n) = (0.0, 0);
    for s in sums {
        let (a, b) = s?;
        nll += a;
        n += b;
    }
    Ok(nll / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub ce: f64,
    pub kl: f64,
    pub val_nll: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: Vec<EpochLog>,
    /// Epoch whose parameters were kept (by validation NLL), if any ran.
    pub best_epoch: Option<usize>,
}

/// Train for `config.epochs` epochs. When `val` is non-empty the
/// parameters with the lowest validation NLL are restored at the end.
pub fn train_loop(
    model: &mut FusionModel<f32>,
    train: &[Example],
    val: &[Example],
    config: &TrainConfig,
    seed: u64,
    exec: Exec,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(CoreError::invalid("no training examples"));
    }
    let root = Rng::new(seed);
    let steps_per_epoch = train.len().div_ceil(config.batch_size);
    let schedule = config.schedule(steps_per_epoch);
    let adam = Adam::default();
    let mut best: Option<(f64, usize, ParamStore<f32>)> = None;
    let mut log = Vec::with_capacity(config.epochs);
    let mut step = 0u64;
    for epoch in 0..config.epochs {
        let start = Instant::now();
        let mut order: Vec<usize> = (0..train.len()).collect();
        root.substream(&[0, epoch as u64]).shuffle(&mut order);
        let (mut loss, mut ce, mut kl, mut lr) = (0.0, 0.0, 0.0, 0.0);
        for (s, idx) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&Example> = idx.iter().map(|&i| &train[i]).collect();
            lr = lr_at_step(&schedule, step);
            let rng = root.substream(&[1, epoch as u64, s as u64]);
            let l = training_step(model, &batch, config, lr, &adam, &rng, exec)?;
            let w = batch.len() as f64 / train.len() as f64;
            loss += l.total * w;
            ce += l.ce * w;
            kl += l.kl * w;
            step += 1;
        }
        let val_nll = if val.is_empty() { None } else { Some(mean_token_nll(model, val, exec)?) };
        if let Some(v) = val_nll {
            if best.as_ref().is_none_or(|(b, _, _)| v < *b) {
                best = Some((v, epoch, model.store.clone()));
            }
        }
        let entry = EpochLog {
            epoch,
            lr,
            loss,
            ce,
            kl,
            val_nll,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&entry);
        log.push(entry);
    }
    let best_epoch = match best {
        Some((_, epoch, store)) => {
            model.store = store;
            Some(epoch)
        }
        None => config.epochs.checked_sub(1),
    };
    Ok(TrainOutcome { log, best_epoch })
}

const CKPT_MAGIC: &[u8; 8] = b"ACECKP01";

/// Everything needed to rebuild a model besides its weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub layout: VocabLayout,
    pub layout_fingerprint: String,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub seed: Option<u64>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Write named tensors in the checkpoint container.
pub fn write_tensors<'t>(path: &Path, tensors: impl IntoIterator<Item = (&'t str, &'t Tensor<f32>)>) -> Result<()> {
    let mut buf = Vec::new();
    let tensors: Vec<_> = tensors.into_iter().collect();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        let bytes = name.as_bytes();
        let len = u16::try_from(bytes.len()).map_err(|_| CoreError::invalid(format!("tensor name too long: {name}")))?;
        buf.extend_from_slice(&len.to_le_bytes());
        buf.extend_from_slice(bytes);
        let rank = u8::try_from(t.shape().len()).map_err(|_| CoreError::invalid("tensor rank above 255"))?;
        buf.push(rank);
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| CoreError::io(path, e))?;
    f.write_all(&buf).map_err(|e| CoreError::io(path, e))
}

/// Read a checkpoint container into name → tensor, in file order.
pub fn read_tensors(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let bytes = fs::read(path).map_err(|e| CoreError::io(path, e))?;
    let mut r = Reader { bytes: &bytes, pos: 0, path };
    if r.take(8)? != CKPT_MAGIC {
        return Err(r.err(0, "bad magic, expected ACECKP01"));
    }
    let count = r.u32()?;
    let mut out = Vec::new();
    for _ in 0..count {
        let n = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
        let at = r.pos;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|_| r.err(at as u64, "tensor name is not UTF-8"))?
            .to_owned();
        let rank = r.take(1)?[0] as usize;
        let shape: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
        let len: usize = shape.iter().product();
        let raw = r.take(len * 4)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(r.err(r.pos as u64, "trailing bytes after last tensor"));
    }
    Ok(out)
}

struct Reader<'b> {
    bytes: &'b [u8],
    pos: usize,
    path: &'b Path,
}

impl<'b> Reader<'b> {
    fn err(&self, offset: u64, msg: &str) -> CoreError {
        CoreError::Format {
            path: self.path.to_path_buf(),
            offset,
            msg: msg.to_owned(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(self.pos as u64, &format!("truncated: need {n} bytes, {} left", self.bytes.len() - self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Save weights to `path` and the configuration to `path + ".json"`.
pub fn save_checkpoint(model: &FusionModel<f32>, path: &Path, train: Option<&TrainConfig>, seed: Option<u64>) -> Result<()> {
    write_tensors(path, model.store.named_values())?;
    let meta = CheckpointMeta {
        model: model.config.clone(),
        layout: model.layout.clone(),
        layout_fingerprint: model.layout.fingerprint(),
        train: train.cloned(),
        seed,
    };
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(&meta).expect("meta serializes");
    fs::write(&side, json + "\n").map_err(|e| CoreError::io(&side, e))
}

pub fn load_checkpoint_meta(path: &Path) -> Result<CheckpointMeta> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| CoreError::io(&side, e))?;
    serde_json::from_str(&text).map_err(|e| CoreError::Parse {
        path: side,
        line: e.line(),
        msg: e.to_string(),
    })
}

/// Rebuild a model from a checkpoint and its sidecar.
pub fn load_checkpoint(path: &Path) -> Result<(FusionModel<f32>, CheckpointMeta)> {
    let meta = load_checkpoint_meta(path)?;
    if meta.layout.fingerprint() != meta.layout_fingerprint {
        return Err(CoreError::Format {
            path: sidecar_path(path),
            offset: 0,
            msg: format!("layout fingerprint {} does not match its sizes ({})", meta.layout_fingerprint, meta.layout.fingerprint()),
        });
    }
    let mut model = FusionModel::new(meta.model.clone(), meta.layout.clone(), &mut Rng::new(0))?;
    let values: HashMap<String, Tensor<f32>> = read_tensors(path)?.into_iter().collect();
    if values.len() != model.store.len() {
        return Err(CoreError::Format {
            path: path.to_path_buf(),
            offset: 0,
            msg: format!("{} tensors for a model with {} parameters", values.len(), model.store.len()),
        });
    }
    model.store.load_values(&values)?;
    Ok((model, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ids::SemanticIdentifier;

    fn tiny() -> FusionModel<f32> {
        let cfg = ModelConfig {
            d_model: 16,
            n_heads: 2,
            ffn_dim: 24,
            encoder_layers: 2,
            decoder_layers: 1,
            query_vocab_size: 20,
            ..ModelConfig::default()
        };
        FusionModel::new(cfg, VocabLayout::new(vec![3, 2, 2]).unwrap(), &mut Rng::new(5)).unwrap()
    }

    fn examples(layout: &VocabLayout) -> Vec<Example> {
        (0..6)
            .map(|i| Example {
                query: vec![i as u32, (i + 7) as u32, 3],
                item_id: i,
                target: layout.to_global(&SemanticIdentifier(vec![(i % 3) as u32, (i / 3) as u32, (i % 2) as u32])).unwrap(),
            })
            .collect()
    }

    #[test]
    fn kl_hand_value() {
        // (0.5 - 0.25) ln(0.5/0.25) + (0.5 - 0.75) ln(0.5/0.75)
        let expect = 0.25 * 2f64.ln() - 0.25 * (2.0f64 / 3.0).ln();
        let p = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let q = Tensor::new(vec![1, 2], vec![0.25f64.ln(), 0.75f64.ln()]).unwrap();
        let kl = bidirectional_kl(&p, &q, 1).unwrap();
        assert!((kl - expect).abs() < 1e-12);
        assert!((kl - 0.2747).abs() < 1e-4);
        assert_eq!(bidirectional_kl(&p, &p, 1).unwrap(), 0.0);
        assert!(bidirectional_kl(&p, &Tensor::zeros(&[2, 2]), 1).is_err());
    }

    #[test]
    fn zero_dropout_gives_zero_kl() {
        let m = tiny();
        let ex = examples(&m.layout);
        let batch: Vec<&Example> = ex.iter().collect();
        let (loss, _) = batch_gradients(&m, &batch, 0.15, 0.0, 4, &Rng::new(1), Exec::Sequential).unwrap();
        assert_eq!(loss.kl, 0.0);
        assert_eq!(loss.total, loss.ce);
    }

    #[test]
    fn chunking_does_not_change_the_loss() {
        let m = tiny();
        let ex = examples(&m.layout);
        let batch: Vec<&Example> = ex.iter().collect();
        let (a, ga) = batch_gradients(&m, &batch, 0.5, 0.0, 6, &Rng::new(1), Exec::Sequential).unwrap();
        let (b, gb) = batch_gradients(&m, &batch, 0.5, 0.0, 2, &Rng::new(1), Exec::Sequential).unwrap();
        assert!((a.ce - b.ce).abs() < 1e-6);
        for ((ia, ta), (ib, tb)) in ga.params().zip(gb.params()) {
            assert_eq!(ia, ib);
            for (x, y) in ta.data().iter().zip(tb.data()) {
                assert!((x - y).abs() < 1e-5 * (1.0 + x.abs()));
            }
        }
    }

    #[test]
    fn step_is_reproducible_and_decomposes() {
        let ex = examples(&tiny().layout);
        let batch: Vec<&Example> = ex.iter().collect();
        let cfg = TrainConfig { dropout: Some(0.3), chunk_size: 4, ..TrainConfig::default() };
        let run = || {
            let mut m = tiny();
            let l = training_step(&mut m, &batch, &cfg, 1e-3, &Adam::default(), &Rng::new(9), Exec::Parallel).unwrap();
            (l, m.store.named_values().map(|(_, t)| t.data().to_vec()).collect::<Vec<_>>())
        };
        let (l1, p1) = run();
        let (l2, p2) = run();
        assert_eq!(l1, l2);
        assert_eq!(p1, p2);
        assert!(l1.kl > 0.0);
        assert_eq!(l1.total, l1.ce + cfg.omega * l1.kl);
    }

    #[test]
    fn uniform_logits_score() {
        let mut m = tiny();
        let out_w = m.store.id("dec.out.w").unwrap();
        let out_b = m.store.id("dec.out.b").unwrap();
        let shape = m.store.value(out_w).shape().to_vec();
        m.store.set(out_w, Tensor::zeros(&shape)).unwrap();
        let n = m.store.value(out_b).len();
        m.store.set(out_b, Tensor::zeros(&[n])).unwrap();
        let v = m.layout.total() as f64;
        let t = m.layout.to_global(&SemanticIdentifier(vec![1, 0, 1])).unwrap();
        let lp = sequence_log_prob(&m, &[1, 2], &t).unwrap();
        assert!((lp - 3.0 * (1.0 / v).ln()).abs() < 1e-5);
        assert!(sequence_log_prob(&m, &[1], &[0, 0, 0]).is_err());
    }

    #[test]
    fn zero_epochs_leave_the_model_unchanged() {
        let mut m = tiny();
        let before: Vec<Vec<f32>> = m.store.named_values().map(|(_, t)| t.data().to_vec()).collect();
        let ex = examples(&m.layout);
        let cfg = TrainConfig { epochs: 0, ..TrainConfig::default() };
        let out = train_loop(&mut m, &ex, &ex, &cfg, 1, Exec::Sequential, |_| {}).unwrap();
        assert!(out.log.is_empty());
        let after: Vec<Vec<f32>> = m.store.named_values().map(|(_, t)| t.data().to_vec()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn truncated_checkpoint_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = tiny();
        save_checkpoint(&m, &path, None, Some(3)).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CoreError::Format { .. })));
        fs::write(&path, b"NOTACKPT").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CoreError::Format { offset: 0, .. })));
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_equal_rows() {
        let mut rng = Rng::new(17);
        for _ in 0..1000 {
            let (rows, cols) = (1 + rng.below(4), 2 + rng.below(6));
            let mut draw = || Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| 3.0 * rng.normal()).collect()).unwrap();
            let (p, q) = (draw(), draw());
            assert!(bidirectional_kl(&p, &q, 1).unwrap() >= 0.0);
            assert!(bidirectional_kl(&p, &p, 1).unwrap().abs() < 1e-9);
        }
    }

    #[test]
    fn omega_zero_without_dropout_is_plain_cross_entropy() {
        let m = tiny();
        let ex = examples(&m.layout);
        let batch: Vec<&Example> = ex.iter().collect();
        let (loss, _) = batch_gradients(&m, &batch, 0.0, 0.0, 6, &Rng::new(1), Exec::Sequential).unwrap();
        let plain = mean_token_nll(&m, &ex, Exec::Sequential).unwrap();
        assert_eq!(loss.total, loss.ce);
        assert!((loss.ce - plain).abs() < 1e-6, "{} vs {plain}", loss.ce);
    }

    #[test]
    fn sequence_score_is_the_chain_rule_sum() {
        let m = tiny();
        let bos = m.layout.bos();
        let query: &[u32] = &[4, 9, 2];
        let enc = m.encode_values(&[query]).unwrap();
        for e in examples(&m.layout) {
            let mut want = 0.0;
            for step in 0..e.target.len() {
                let mut prefix = vec![bos];
                prefix.extend(&e.target[..step]);
                let logits = m.logits(&enc, &[prefix]).unwrap();
                let row: Vec<f64> = logits.row(step).iter().map(|&x| x as f64).collect();
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
                want += row[e.target[step]] - lse;
            }
            let got = sequence_log_prob(&m, query, &e.target).unwrap();
            assert!((got - want).abs() < 1e-4, "{got} vs {want}");
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut m = tiny();
        let ex = examples(&m.layout);
        let cfg = TrainConfig { epochs: 2, warmup_epochs: 1, batch_size: 4, ..TrainConfig::default() };
        train_loop(&mut m, &ex, &ex, &cfg, 3, Exec::Sequential, |_| {}).unwrap();
        save_checkpoint(&m, &path, Some(&cfg), Some(3)).unwrap();
        let (back, meta) = load_checkpoint(&path).unwrap();
        assert_eq!(meta.train.as_ref(), Some(&cfg));
        assert_eq!(meta.seed, Some(3));
        assert_eq!(meta.model, m.config);
        let q: Vec<&[u32]> = ex.iter().map(|e| e.query.as_slice()).collect();
        let prefixes: Vec<Vec<usize>> = ex.iter().map(|e| e.prefix(m.layout.bos())).collect();
        let a = m.logits(&m.encode_values(&q).unwrap(), &prefixes).unwrap();
        let b = back.logits(&back.encode_values(&q).unwrap(), &prefixes).unwrap();
        assert_eq!(a.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    }
}

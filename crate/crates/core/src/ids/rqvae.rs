//! Residual-quantized autoencoder producing the fine identifier tokens.
//!
//! The encoder maps a centered embedding to a latent `z`; `M` codebooks
//! then quantize `z` greedily, each level quantizing what the previous
//! levels left over. Training uses a straight-through estimator for the
//! reconstruction term and the usual two-sided commitment loss.

use ace_tensor::{lr_at_step, Adam, Graph, ParamId, ParamStore, Rng, Scalar, ScheduleSpec, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::par::Exec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RqVaeConfig {
    pub hidden: Vec<usize>,
    pub latent: usize,
    /// Number of codebooks `M`.
    pub levels: usize,
    /// Entries per codebook `N`.
    pub codebook_size: usize,
    pub alpha: f64,
    pub beta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_init: f64,
    pub lr_peak: f64,
    pub warmup_epochs: usize,
    /// Steps without use after which a codebook entry is restarted.
    pub dead_after: u64,
}

impl Default for RqVaeConfig {
    fn default() -> Self {
        RqVaeConfig {
            hidden: vec![512, 256, 128],
            latent: 64,
            levels: 2,
            codebook_size: 16,
            alpha: 1.0,
            beta: 0.25,
            epochs: 500,
            batch_size: 64,
            lr_init: 1e-6,
            lr_peak: 1e-4,
            warmup_epochs: 300,
            dead_after: 50,
        }
    }
}

/// Codes and leftovers of one latent vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Quantized<T = f32> {
    pub indices: Vec<usize>,
    /// Sum of the chosen entries.
    pub zhat: Vec<T>,
    /// `r_M`, what the last level failed to explain.
    pub residual: Vec<T>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RqVaeLosses {
    pub recon: f64,
    pub commit: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct RqVae<T: Scalar = f32> {
    pub config: RqVaeConfig,
    pub in_dim: usize,
    pub store: ParamStore<T>,
    encoder: Vec<(ParamId, ParamId)>,
    decoder: Vec<(ParamId, ParamId)>,
    codebooks: Vec<ParamId>,
    last_used: Vec<Vec<u64>>,
    steps: u64,
}

fn mlp_params<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, widths: &[usize], rng: &mut Rng) -> Result<Vec<(ParamId, ParamId)>> {
    widths
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            let wid = store.add_xavier(format!("{prefix}.{i}.w"), w[0], w[1], rng)?;
            let bid = store.add_zeros(format!("{prefix}.{i}.b"), &[w[1]])?;
            Ok((wid, bid))
        })
        .collect()
}

/// Nearest row of `codebook` to `r` by squared distance, ties to the lowest
/// index.
pub fn argmin_entry<T: Scalar>(r: &[T], codebook: &Tensor<T>) -> usize {
    let mut best = (0, f64::INFINITY);
    for e in 0..codebook.rows() {
        let d: f64 = r
            .iter()
            .zip(codebook.row(e))
            .map(|(&a, &b)| {
                let x = a.to_f64() - b.to_f64();
                x * x
            })
            .sum();
        if d < best.1 {
            best = (e, d);
        }
    }
    best.0
}

impl<T: Scalar> RqVae<T> {
    pub fn new(in_dim: usize, config: RqVaeConfig, rng: &mut Rng) -> Result<Self> {
        if in_dim == 0 || config.latent == 0 || config.levels == 0 || config.codebook_size == 0 {
            return Err(CoreError::invalid("rq-vae dims, levels and codebook size must be positive"));
        }
        let mut widths = vec![in_dim];
        widths.extend(&config.hidden);
        widths.push(config.latent);
        let mut store = ParamStore::new();
        let encoder = mlp_params(&mut store, "enc", &widths, rng)?;
        widths.reverse();
        let decoder = mlp_params(&mut store, "dec", &widths, rng)?;
        let mut codebooks = Vec::new();
        for m in 0..config.levels {
            let n = config.codebook_size * config.latent;
            let data = (0..n).map(|_| T::from_f64(rng.normal())).collect();
            codebooks.push(store.add(format!("codebook.{m}"), Tensor::new(vec![config.codebook_size, config.latent], data)?)?);
        }
        Ok(RqVae {
            last_used: vec![vec![0; config.codebook_size]; config.levels],
            config,
            in_dim,
            store,
            encoder,
            decoder,
            codebooks,
            steps: 0,
        })
    }

    pub fn codebook(&self, m: usize) -> &Tensor<T> {
        self.store.value(self.codebooks[m])
    }

    pub fn set_codebook(&mut self, m: usize, value: Tensor<T>) -> Result<()> {
        Ok(self.store.set(self.codebooks[m], value)?)
    }

    fn mlp<'a>(&'a self, g: &mut Graph<'a, T>, layers: &[(ParamId, ParamId)], mut x: Var) -> Result<Var> {
        for (i, &(w, b)) in layers.iter().enumerate() {
            let (w, b) = (g.param(&self.store, w), g.param(&self.store, b));
            x = g.linear(x, w, Some(b))?;
            if i + 1 < layers.len() {
                x = g.elu(x);
            }
        }
        Ok(x)
    }

    pub fn encode_graph<'a>(&'a self, g: &mut Graph<'a, T>, x: Var) -> Result<Var> {
        self.mlp(g, &self.encoder, x)
    }

    pub fn decode_graph<'a>(&'a self, g: &mut Graph<'a, T>, z: Var) -> Result<Var> {
        self.mlp(g, &self.decoder, z)
    }

    /// Smallest |pre-activation| of any hidden unit of either MLP on `x`
    /// (decoder fed the quantized latents of `codes`). Gradient checks keep
    /// this away from the ELU kink.
    pub(crate) fn min_hidden_preactivation(&self, x: &Tensor<T>, codes: &[Vec<usize>]) -> Result<f64> {
        let mut zhat = Vec::new();
        for row in codes {
            let mut acc = vec![T::ZERO; self.config.latent];
            for (m, &c) in row.iter().enumerate() {
                for (a, &e) in acc.iter_mut().zip(self.codebook(m).row(c)) {
                    *a += e;
                }
            }
            zhat.extend(acc);
        }
        let zhat = Tensor::new(vec![codes.len(), self.config.latent], zhat)?;
        let mut g = Graph::inference();
        let mut worst = f64::INFINITY;
        for (layers, input) in [(&self.encoder, x.clone()), (&self.decoder, zhat)] {
            let mut h = g.input(input);
            for (i, &(w, b)) in layers.iter().enumerate() {
                let (w, b) = (g.param(&self.store, w), g.param(&self.store, b));
                h = g.linear(h, w, Some(b))?;
                if i + 1 < layers.len() {
                    worst = g.value(h).data().iter().fold(worst, |m, v| m.min(v.to_f64().abs()));
                    h = g.elu(h);
                }
            }
        }
        Ok(worst)
    }

    /// Latents for a batch of rows.
    pub fn encode(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let xv = g.input(x.clone());
        let z = self.encode_graph(&mut g, xv)?;
        Ok(g.value(z).clone())
    }

    /// Greedy residual quantization of one latent vector.
    pub fn quantize_latent(&self, z: &[T]) -> Quantized<T> {
        let mut r = z.to_vec();
        let mut zhat = vec![T::ZERO; z.len()];
        let mut indices = Vec::with_capacity(self.config.levels);
        for m in 0..self.config.levels {
            let cb = self.codebook(m);
            let v = argmin_entry(&r, cb);
            for ((ri, zi), &e) in r.iter_mut().zip(&mut zhat).zip(cb.row(v)) {
                *ri -= e;
                *zi += e;
            }
            indices.push(v);
        }
        Quantized {
            indices,
            zhat,
            residual: r,
        }
    }

    /// Encode and quantize every row of `x`.
    pub fn quantize(&self, x: &Tensor<T>, exec: Exec) -> Result<Vec<Quantized<T>>> {
        if x.shape().len() != 2 || x.cols() != self.in_dim {
            return Err(CoreError::invalid(format!("rq-vae expects rows of dim {}, got {:?}", self.in_dim, x.shape())));
        }
        let z = self.encode(x)?;
        Ok(exec.map_range(z.rows(), |i| self.quantize_latent(z.row(i))))
    }

    /// Build the loss on `x` for fixed code `indices` (one row per example,
    /// one column per level). Returns `(recon, commit, total)` vars, each a
    /// batch mean of per-example squared norms.
    pub fn loss_graph<'a>(&'a self, g: &mut Graph<'a, T>, x: Var, indices: &[Vec<usize>]) -> Result<(Var, Var, Var)> {
        let b = g.shape(x)[0];
        if indices.len() != b {
            return Err(CoreError::invalid(format!("{} code rows for a batch of {b}", indices.len())));
        }
        let z = self.encode_graph(g, x)?;
        let mut r = z;
        let mut zhat: Option<Var> = None;
        let mut commit: Option<Var> = None;
        for m in 0..self.config.levels {
            let ids: Vec<usize> = indices.iter().map(|row| row[m]).collect();
            let table = g.param(&self.store, self.codebooks[m]);
            let e = g.embedding(table, &ids)?;
            // entries move toward the frozen residual, the encoder commits
            // toward the frozen entries
            let r_sg = g.stop_gradient(r);
            let e_sg = g.stop_gradient(e);
            let d1 = g.sub(r_sg, e)?;
            let t1 = g.sum_sq(d1);
            let d2 = g.sub(r, e_sg)?;
            let t2 = g.sum_sq(d2);
            let t2 = g.scale(t2, T::from_f64(self.config.beta));
            let term = g.add(t1, t2)?;
            commit = Some(match commit {
                Some(c) => g.add(c, term)?,
                None => term,
            });
            zhat = Some(match zhat {
                Some(s) => g.add(s, e)?,
                None => e,
            });
            r = g.sub(r, e_sg)?;
        }
        let zhat = zhat.expect("levels >= 1");
        let shift = g.sub(zhat, z)?;
        let shift = g.stop_gradient(shift);
        let dec_in = g.add(z, shift)?;
        let xr = self.decode_graph(g, dec_in)?;
        let diff = g.sub(x, xr)?;
        let inv_b = T::from_f64(1.0 / b as f64);
        let recon = g.sum_sq(diff);
        let recon = g.scale(recon, inv_b);
        let commit = g.scale(commit.expect("levels >= 1"), inv_b);
        let weighted = g.scale(commit, T::from_f64(self.config.alpha));
        let total = g.add(recon, weighted)?;
        Ok((recon, commit, total))
    }

    /// Losses on `x` without updating anything.
    pub fn evaluate(&self, x: &Tensor<T>, exec: Exec) -> Result<RqVaeLosses> {
        let codes: Vec<Vec<usize>> = self.quantize(x, exec)?.into_iter().map(|q| q.indices).collect();
        let mut g = Graph::inference();
        let xv = g.input(x.clone());
        let (recon, commit, total) = self.loss_graph(&mut g, xv, &codes)?;
        Ok(RqVaeLosses {
            recon: g.value(recon).item().to_f64(),
            commit: g.value(commit).item().to_f64(),
            total: g.value(total).item().to_f64(),
        })
    }
}

impl RqVae<f32> {
    /// Seed level `m` from `N` rows of the level-`m` residuals of `x`.
    pub fn init_codebooks(&mut self, x: &Tensor<f32>, rng: &mut Rng) -> Result<()> {
        let z = self.encode(x)?;
        let (n, d) = (z.rows(), z.cols());
        let size = self.config.codebook_size;
        let mut r = z;
        for m in 0..self.config.levels {
            let mut order: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut order);
            let data: Vec<f32> = (0..size).flat_map(|i| r.row(order[i % n]).to_vec()).collect();
            self.set_codebook(m, Tensor::new(vec![size, d], data)?)?;
            let cb = self.codebook(m).clone();
            for i in 0..n {
                let v = argmin_entry(r.row(i), &cb);
                for (x, &e) in r.data_mut()[i * d..(i + 1) * d].iter_mut().zip(cb.row(v)) {
                    *x -= e;
                }
            }
        }
        Ok(())
    }

    /// One Adam step on `batch`; restarts entries idle for `dead_after`
    /// steps from this batch's residuals.
    pub fn train_step(&mut self, batch: &Tensor<f32>, lr: f64, adam: &Adam, rng: &mut Rng) -> Result<RqVaeLosses> {
        let z = self.encode(batch)?;
        let codes: Vec<Quantized<f32>> = (0..z.rows()).map(|i| self.quantize_latent(z.row(i))).collect();
        let indices: Vec<Vec<usize>> = codes.iter().map(|q| q.indices.clone()).collect();
        let (losses, grads) = {
            let mut g = Graph::new();
            let xv = g.input(batch.clone());
            let (recon, commit, total) = self.loss_graph(&mut g, xv, &indices)?;
            let losses = RqVaeLosses {
                recon: g.value(recon).item() as f64,
                commit: g.value(commit).item() as f64,
                total: g.value(total).item() as f64,
            };
            (losses, g.backward(total)?)
        };
        if !losses.total.is_finite() {
            return Err(CoreError::Training(format!("rq-vae loss is {} at step {}", losses.total, self.steps)));
        }
        self.store.accumulate(&grads, 1.0);
        adam.step(&mut self.store, lr)?;
        self.steps += 1;
        self.restart_dead(&z, &indices, rng)?;
        Ok(losses)
    }

    fn restart_dead(&mut self, z: &Tensor<f32>, indices: &[Vec<usize>], rng: &mut Rng) -> Result<()> {
        let d = z.cols();
        let mut r = z.clone();
        for m in 0..self.config.levels {
            for row in indices {
                self.last_used[m][row[m]] = self.steps;
            }
            let mut cb = self.codebook(m).clone();
            let mut changed = false;
            for e in 0..self.config.codebook_size {
                if self.steps - self.last_used[m][e] >= self.config.dead_after {
                    let src = rng.below(r.rows());
                    cb.data_mut()[e * d..(e + 1) * d].copy_from_slice(r.row(src));
                    self.last_used[m][e] = self.steps;
                    changed = true;
                }
            }
            let used = self.codebook(m).clone();
            for (i, row) in indices.iter().enumerate() {
                for (x, &e) in r.data_mut()[i * d..(i + 1) * d].iter_mut().zip(used.row(row[m])) {
                    *x -= e;
                }
            }
            if changed {
                self.set_codebook(m, cb)?;
            }
        }
        Ok(())
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }
}

/// Per-epoch training record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RqVaeEpoch {
    pub epoch: usize,
    pub lr: f64,
    pub recon: f64,
    pub commit: f64,
}

/// The state [`fit_rqvae`] starts from: fresh weights and data-initialized
/// codebooks.
pub fn init_rqvae(x: &Tensor<f32>, config: &RqVaeConfig, seed: u64) -> Result<RqVae<f32>> {
    let root = Rng::new(seed);
    let mut model = RqVae::new(x.cols(), config.clone(), &mut root.substream(&[0]))?;
    model.init_codebooks(x, &mut root.substream(&[1]))?;
    Ok(model)
}

/// Train a fresh RQ-VAE on `x` (rows are examples).
pub fn fit_rqvae(x: &Tensor<f32>, config: &RqVaeConfig, seed: u64) -> Result<(RqVae<f32>, Vec<RqVaeEpoch>)> {
    if x.rows() == 0 {
        return Err(CoreError::invalid("rq-vae needs at least one row"));
    }
    let root = Rng::new(seed);
    let mut model = init_rqvae(x, config, seed)?;
    let n = x.rows();
    let bs = config.batch_size.clamp(1, n);
    let steps_per_epoch = n.div_ceil(bs) as u64;
    let spec = ScheduleSpec::inverse_sqrt(config.lr_init, config.lr_peak, config.warmup_epochs as u64 * steps_per_epoch);
    let adam = Adam::default();
    let mut restart_rng = root.substream(&[2]);
    let mut log = Vec::with_capacity(config.epochs);
    let d = x.cols();
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        root.substream(&[3, epoch as u64]).shuffle(&mut order);
        let (mut recon, mut commit, mut seen) = (0.0, 0.0, 0usize);
        let mut lr = 0.0;
        for chunk in order.chunks(bs) {
            let data = chunk.iter().flat_map(|&i| x.row(i).iter().copied()).collect();
            let batch = Tensor::new(vec![chunk.len(), d], data)?;
            lr = lr_at_step(&spec, model.steps());
            let l = model.train_step(&batch, lr, &adam, &mut restart_rng)?;
            recon += l.recon * chunk.len() as f64;
            commit += l.commit * chunk.len() as f64;
            seen += chunk.len();
        }
        log.push(RqVaeEpoch {
            epoch,
            lr,
            recon: recon / seen as f64,
            commit: commit / seen as f64,
        });
    }
    Ok((model, log))
}

/// Per-level code usage over a set of rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UsageStats {
    pub histograms: Vec<Vec<usize>>,
    pub dead: Vec<usize>,
}

impl UsageStats {
    pub fn dead_fraction(&self) -> f64 {
        let total: usize = self.histograms.iter().map(Vec::len).sum();
        self.dead.iter().sum::<usize>() as f64 / total.max(1) as f64
    }
}

pub fn codebook_usage_stats(model: &RqVae<f32>, x: &Tensor<f32>, exec: Exec) -> Result<UsageStats> {
    let codes = model.quantize(x, exec)?;
    let mut histograms = vec![vec![0usize; model.config.codebook_size]; model.config.levels];
    for q in &codes {
        for (m, &v) in q.indices.iter().enumerate() {
            histograms[m][v] += 1;
        }
    }
    let dead = histograms.iter().map(|h| h.iter().filter(|&&c| c == 0).count()).collect();
    Ok(UsageStats { histograms, dead })
}

//! Encoder-decoder transformer with coarse-to-fine feature fusion.
//!
//! The encoder keeps the output of every layer. Each decoder layer replaces
//! the usual cross-attention with a fusion sublayer that adds a coarse
//! feature (attention over a learned mix of all encoder layers, gated) to a
//! fine feature (per-layer cross-attention combined by learned elementwise
//! gates).

mod layout;

use ace_tensor::{AttentionSpec, Graph, ParamId, ParamStore, Rng, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

pub use layout::VocabLayout;

use crate::error::{CoreError, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    /// `G = C * sigmoid(C) / S`.
    #[default]
    SelfGate,
    /// `G = sigmoid(C) / S`.
    Literal,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Coarse plus fine fusion over all encoder layers.
    #[default]
    CoarseFine,
    /// Plain cross-attention over the last encoder layer only.
    LastLayer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    /// Encoder depth `S`.
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub dropout: f64,
    pub query_vocab_size: usize,
    pub max_len: usize,
    pub gate_mode: GateMode,
    pub fusion: FusionMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 128,
            n_heads: 4,
            ffn_dim: 256,
            encoder_layers: 3,
            decoder_layers: 3,
            dropout: 0.1,
            query_vocab_size: 2048,
            max_len: 64,
            gate_mode: GateMode::SelfGate,
            fusion: FusionMode::CoarseFine,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(CoreError::invalid(format!("d_model {} must be a positive multiple of n_heads {}", self.d_model, self.n_heads)));
        }
        if self.encoder_layers == 0 || self.decoder_layers == 0 || self.ffn_dim == 0 {
            return Err(CoreError::invalid("layer counts and ffn_dim must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(CoreError::invalid(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        if self.query_vocab_size == 0 || self.max_len == 0 {
            return Err(CoreError::invalid("query_vocab_size and max_len must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    g: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Mha {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Ffn {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct EncLayer {
    ln1: Norm,
    attn: Mha,
    ln2: Norm,
    ffn: Ffn,
}

/// Coarse fusion: `Z = [E_1..E_S] W + b`, then bias-free projections.
#[derive(Clone, Copy, Debug)]
pub struct CoarseParams {
    w: ParamId,
    b: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
}

/// One encoder layer's share of fine fusion.
#[derive(Clone, Copy, Debug)]
struct FineBranch {
    attn: Mha,
    gate_w: ParamId,
    gate_b: ParamId,
}

#[derive(Clone, Debug)]
enum Fusion {
    CoarseFine { coarse: CoarseParams, fine: Vec<FineBranch> },
    LastLayer(Mha),
}

#[derive(Clone, Debug)]
struct DecLayer {
    ln1: Norm,
    self_attn: Mha,
    ln2: Norm,
    fusion: Fusion,
    ln3: Norm,
    ffn: Ffn,
}

/// Per-layer encoder outputs for `groups` padded sequences of `len` rows.
#[derive(Clone, Debug)]
pub struct EncoderOut {
    pub layers: Vec<Var>,
    pub groups: usize,
    pub len: usize,
    pub key_lens: Vec<usize>,
    /// Encoded group read by each decoder group; `None` means one decoder
    /// group per encoded group.
    pub query_map: Option<Vec<usize>>,
}

impl EncoderOut {
    /// Let decoder group `i` read encoded group `map[i]`.
    pub fn with_query_map(mut self, map: Vec<usize>) -> Self {
        self.query_map = Some(map);
        self
    }

    /// Number of decoder groups.
    pub fn dec_groups(&self) -> usize {
        self.query_map.as_ref().map_or(self.groups, Vec::len)
    }
}

/// Detached encoder outputs, reusable across graphs.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderValues<T = f32> {
    pub layers: Vec<Tensor<T>>,
    pub groups: usize,
    pub len: usize,
    pub key_lens: Vec<usize>,
}

impl<T: Scalar> EncoderValues<T> {
    /// Gather groups by index (repeats allowed).
    pub fn select(&self, groups: &[usize]) -> EncoderValues<T> {
        let d = self.layers[0].cols();
        let rows = self.len * d;
        let layers = self
            .layers
            .iter()
            .map(|t| {
                let data = groups.iter().flat_map(|&g| t.data()[g * rows..(g + 1) * rows].iter().copied()).collect();
                Tensor::new(vec![groups.len() * self.len, d], data).expect("gathered rows")
            })
            .collect();
        EncoderValues {
            layers,
            groups: groups.len(),
            len: self.len,
            key_lens: groups.iter().map(|&g| self.key_lens[g]).collect(),
        }
    }

    /// Place the values into `g` as constants.
    pub fn to_graph(&self, g: &mut Graph<'_, T>) -> EncoderOut {
        EncoderOut {
            layers: self.layers.iter().map(|t| g.input(t.clone())).collect(),
            groups: self.groups,
            len: self.len,
            key_lens: self.key_lens.clone(),
            query_map: None,
        }
    }
}

/// Optional dropout source threaded through a forward pass.
pub struct Dropout<'r> {
    pub rate: f64,
    pub rng: &'r mut Rng,
}

fn drop<T: Scalar>(g: &mut Graph<'_, T>, x: Var, d: &mut Option<Dropout<'_>>) -> Result<Var> {
    match d {
        Some(d) if d.rate > 0.0 => Ok(g.dropout(x, d.rate, d.rng)?),
        _ => Ok(x),
    }
}

#[derive(Clone, Debug)]
pub struct FusionModel<T: Scalar = f32> {
    pub config: ModelConfig,
    pub layout: VocabLayout,
    pub store: ParamStore<T>,
    enc_tok: ParamId,
    enc_pos: ParamId,
    enc: Vec<EncLayer>,
    dec_tok: ParamId,
    dec_pos: ParamId,
    dec: Vec<DecLayer>,
    ln_f: Norm,
    out_w: ParamId,
    out_b: ParamId,
}

struct Builder<'s, T: Scalar> {
    store: &'s mut ParamStore<T>,
    rng: &'s mut Rng,
}

impl<T: Scalar> Builder<'_, T> {
    fn norm(&mut self, name: &str, d: usize) -> Result<Norm> {
        Ok(Norm {
            g: self.store.add_ones(format!("{name}.g"), &[d])?,
            b: self.store.add_zeros(format!("{name}.b"), &[d])?,
        })
    }

    fn linear(&mut self, name: &str, i: usize, o: usize) -> Result<(ParamId, ParamId)> {
        Ok((self.weight(&format!("{name}.w"), i, o)?, self.store.add_zeros(format!("{name}.b"), &[o])?))
    }

    fn weight(&mut self, name: &str, i: usize, o: usize) -> Result<ParamId> {
        Ok(self.store.add_xavier(name, i, o, self.rng)?)
    }

    fn mha(&mut self, name: &str, d: usize) -> Result<Mha> {
        let (wq, bq) = self.linear(&format!("{name}.q"), d, d)?;
        let (wk, bk) = self.linear(&format!("{name}.k"), d, d)?;
        let (wv, bv) = self.linear(&format!("{name}.v"), d, d)?;
        let (wo, bo) = self.linear(&format!("{name}.o"), d, d)?;
        Ok(Mha {
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
        })
    }

    fn ffn(&mut self, name: &str, d: usize, f: usize) -> Result<Ffn> {
        let (w1, b1) = self.linear(&format!("{name}.1"), d, f)?;
        let (w2, b2) = self.linear(&format!("{name}.2"), f, d)?;
        Ok(Ffn { w1, b1, w2, b2 })
    }

    fn embedding(&mut self, name: &str, n: usize, d: usize) -> Result<ParamId> {
        let std = (1.0 / d as f64).sqrt();
        let data = (0..n * d).map(|_| T::from_f64(std * self.rng.normal())).collect();
        Ok(self.store.add(name, Tensor::new(vec![n, d], data)?)?)
    }
}

impl<T: Scalar> FusionModel<T> {
    pub fn new(config: ModelConfig, layout: VocabLayout, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let s = config.encoder_layers;
        let mut store = ParamStore::new();
        let mut b = Builder { store: &mut store, rng };
        let enc_tok = b.embedding("enc.tok", config.query_vocab_size, d)?;
        let enc_pos = b.embedding("enc.pos", config.max_len, d)?;
        let enc = (0..s)
            .map(|l| {
                Ok(EncLayer {
                    ln1: b.norm(&format!("enc.{l}.ln1"), d)?,
                    attn: b.mha(&format!("enc.{l}.attn"), d)?,
                    ln2: b.norm(&format!("enc.{l}.ln2"), d)?,
                    ffn: b.ffn(&format!("enc.{l}.ffn"), d, config.ffn_dim)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let dec_tok = b.embedding("dec.tok", layout.input_vocab(), d)?;
        let dec_pos = b.embedding("dec.pos", config.max_len, d)?;
        let dec = (0..config.decoder_layers)
            .map(|l| {
                let ln1 = b.norm(&format!("dec.{l}.ln1"), d)?;
                let self_attn = b.mha(&format!("dec.{l}.self"), d)?;
                let ln2 = b.norm(&format!("dec.{l}.ln2"), d)?;
                let fusion = match config.fusion {
                    FusionMode::CoarseFine => {
                        let (w, bias) = b.linear(&format!("dec.{l}.coarse.mix"), s * d, d)?;
                        let coarse = CoarseParams {
                            w,
                            b: bias,
                            wq: b.weight(&format!("dec.{l}.coarse.q.w"), d, d)?,
                            wk: b.weight(&format!("dec.{l}.coarse.k.w"), d, d)?,
                            wv: b.weight(&format!("dec.{l}.coarse.v.w"), d, d)?,
                        };
                        let fine = (0..s)
                            .map(|i| {
                                let attn = b.mha(&format!("dec.{l}.fine.{i}.attn"), d)?;
                                let (gate_w, gate_b) = b.linear(&format!("dec.{l}.fine.{i}.gate"), 2 * d, d)?;
                                Ok(FineBranch { attn, gate_w, gate_b })
                            })
                            .collect::<Result<Vec<_>>>()?;
                        Fusion::CoarseFine { coarse, fine }
                    }
                    FusionMode::LastLayer => Fusion::LastLayer(b.mha(&format!("dec.{l}.cross"), d)?),
                };
                Ok(DecLayer {
                    ln1,
                    self_attn,
                    ln2,
                    fusion,
                    ln3: b.norm(&format!("dec.{l}.ln3"), d)?,
                    ffn: b.ffn(&format!("dec.{l}.ffn"), d, config.ffn_dim)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let ln_f = b.norm("dec.ln_f", d)?;
        let (out_w, out_b) = b.linear("dec.out", d, layout.total())?;
        Ok(FusionModel {
            config,
            layout,
            store,
            enc_tok,
            enc_pos,
            enc,
            dec_tok,
            dec_pos,
            dec,
            ln_f,
            out_w,
            out_b,
        })
    }

    /// Same architecture with parameters cast to another precision.
    pub fn cast<U: Scalar>(&self) -> FusionModel<U> {
        FusionModel {
            config: self.config.clone(),
            layout: self.layout.clone(),
            store: self.store.cast(),
            enc_tok: self.enc_tok,
            enc_pos: self.enc_pos,
            enc: self.enc.clone(),
            dec_tok: self.dec_tok,
            dec_pos: self.dec_pos,
            dec: self.dec.clone(),
            ln_f: self.ln_f,
            out_w: self.out_w,
            out_b: self.out_b,
        }
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    fn p<'a>(&'a self, g: &mut Graph<'a, T>, id: ParamId) -> Var {
        g.param(&self.store, id)
    }

    fn norm<'a>(&'a self, g: &mut Graph<'a, T>, n: Norm, x: Var) -> Result<Var> {
        let (gamma, beta) = (self.p(g, n.g), self.p(g, n.b));
        Ok(g.layer_norm(x, gamma, beta)?)
    }

    fn lin<'a>(&'a self, g: &mut Graph<'a, T>, x: Var, w: ParamId, b: Option<ParamId>) -> Result<Var> {
        let w = self.p(g, w);
        let b = b.map(|b| self.p(g, b));
        Ok(g.linear(x, w, b)?)
    }

    fn mha<'a>(&'a self, g: &mut Graph<'a, T>, p: &Mha, xq: Var, xkv: Var, spec: AttentionSpec) -> Result<Var> {
        let q = self.lin(g, xq, p.wq, Some(p.bq))?;
        let k = self.lin(g, xkv, p.wk, Some(p.bk))?;
        let v = self.lin(g, xkv, p.wv, Some(p.bv))?;
        let a = g.attention(q, k, v, spec)?;
        self.lin(g, a, p.wo, Some(p.bo))
    }

    fn ffn<'a>(&'a self, g: &mut Graph<'a, T>, p: &Ffn, x: Var) -> Result<Var> {
        let h = self.lin(g, x, p.w1, Some(p.b1))?;
        let h = g.gelu(h);
        self.lin(g, h, p.w2, Some(p.b2))
    }

    fn positions(&self, groups: usize, len: usize) -> Result<Vec<usize>> {
        if len > self.config.max_len {
            return Err(CoreError::invalid(format!("sequence length {len} exceeds max_len {}", self.config.max_len)));
        }
        Ok((0..groups).flat_map(|_| 0..len).collect())
    }

    /// Encode a batch of queries, padding to the longest. Every layer's
    /// output is kept.
    pub fn encode<'a>(&'a self, g: &mut Graph<'a, T>, queries: &[&[u32]], dropout: &mut Option<Dropout<'_>>) -> Result<EncoderOut> {
        if queries.is_empty() || queries.iter().any(|q| q.is_empty()) {
            return Err(CoreError::invalid("encode needs at least one non-empty query"));
        }
        let len = queries.iter().map(|q| q.len()).max().unwrap_or(0);
        let mut tokens = Vec::with_capacity(queries.len() * len);
        for q in queries {
            for &t in q.iter() {
                if t as usize >= self.config.query_vocab_size {
                    return Err(CoreError::invalid(format!("query token {t} outside vocab of {}", self.config.query_vocab_size)));
                }
                tokens.push(t as usize);
            }
            tokens.extend(std::iter::repeat_n(0, len - q.len()));
        }
        let pos = self.positions(queries.len(), len)?;
        let key_lens: Vec<usize> = queries.iter().map(|q| q.len()).collect();
        let tok_table = self.p(g, self.enc_tok);
        let pos_table = self.p(g, self.enc_pos);
        let e = g.embedding(tok_table, &tokens)?;
        let pe = g.embedding(pos_table, &pos)?;
        let mut x = g.add(e, pe)?;
        x = drop(g, x, dropout)?;
        let spec = AttentionSpec::new(queries.len(), len, len, self.config.n_heads).with_key_lens(key_lens.clone());
        let mut layers = Vec::with_capacity(self.enc.len());
        for layer in &self.enc {
            let h = self.norm(g, layer.ln1, x)?;
            let a = self.mha(g, &layer.attn, h, h, spec.clone())?;
            let a = drop(g, a, dropout)?;
            x = g.add(x, a)?;
            let h = self.norm(g, layer.ln2, x)?;
            let f = self.ffn(g, &layer.ffn, h)?;
            let f = drop(g, f, dropout)?;
            x = g.add(x, f)?;
            layers.push(x);
        }
        Ok(EncoderOut {
            layers,
            groups: queries.len(),
            len,
            key_lens,
            query_map: None,
        })
    }

    /// Encode without a tape and detach the results.
    pub fn encode_values(&self, queries: &[&[u32]]) -> Result<EncoderValues<T>> {
        let mut g = Graph::inference();
        let out = self.encode(&mut g, queries, &mut None)?;
        Ok(EncoderValues {
            layers: out.layers.iter().map(|&v| g.value(v).clone()).collect(),
            groups: out.groups,
            len: out.len,
            key_lens: out.key_lens,
        })
    }

    fn cross_spec(&self, enc: &EncoderOut, q_len: usize) -> AttentionSpec {
        let spec = AttentionSpec::new(enc.dec_groups(), q_len, enc.len, self.config.n_heads).with_key_lens(enc.key_lens.clone());
        match &enc.query_map {
            Some(m) => spec.with_key_groups(m.clone()),
            None => spec,
        }
    }

    /// Coarse feature of decoder layer `layer` for normalized states `y`
    /// (`groups * q_len` rows).
    pub fn coarse_fuse<'a>(&'a self, g: &mut Graph<'a, T>, layer: usize, y: Var, enc: &EncoderOut) -> Result<Var> {
        let Fusion::CoarseFine { coarse, .. } = &self.dec[layer].fusion else {
            return Err(CoreError::invalid("model has no coarse fusion"));
        };
        let q_len = g.shape(y)[0] / enc.dec_groups().max(1);
        let stacked = g.concat_cols(&enc.layers)?;
        let z = self.lin(g, stacked, coarse.w, Some(coarse.b))?;
        let q = self.lin(g, y, coarse.wq, None)?;
        let k = self.lin(g, z, coarse.wk, None)?;
        let v = self.lin(g, z, coarse.wv, None)?;
        let c = g.attention(q, k, v, self.cross_spec(enc, q_len))?;
        let inv_s = T::from_f64(1.0 / enc.layers.len() as f64);
        let gate = g.sigmoid(c);
        let gated = match self.config.gate_mode {
            GateMode::SelfGate => g.mul(c, gate)?,
            GateMode::Literal => gate,
        };
        Ok(g.scale(gated, inv_s))
    }

    /// Fine feature of decoder layer `layer`: `sum_i alpha_i * C_i`.
    pub fn fine_fuse<'a>(&'a self, g: &mut Graph<'a, T>, layer: usize, y: Var, enc: &EncoderOut) -> Result<Var> {
        let Fusion::CoarseFine { fine, .. } = &self.dec[layer].fusion else {
            return Err(CoreError::invalid("model has no fine fusion"));
        };
        if fine.len() != enc.layers.len() {
            return Err(CoreError::invalid(format!("{} fine branches for {} encoder layers", fine.len(), enc.layers.len())));
        }
        let q_len = g.shape(y)[0] / enc.dec_groups().max(1);
        let mut out: Option<Var> = None;
        for (branch, &e) in fine.iter().zip(&enc.layers) {
            let c = self.mha(g, &branch.attn, y, e, self.cross_spec(enc, q_len))?;
            let yc = g.concat_cols(&[y, c])?;
            let logits = self.lin(g, yc, branch.gate_w, Some(branch.gate_b))?;
            let alpha = g.sigmoid(logits);
            let term = g.mul(alpha, c)?;
            out = Some(match out {
                Some(o) => g.add(o, term)?,
                None => term,
            });
        }
        Ok(out.expect("at least one encoder layer"))
    }

    fn fusion_sublayer<'a>(&'a self, g: &mut Graph<'a, T>, layer: usize, y: Var, enc: &EncoderOut) -> Result<Var> {
        match &self.dec[layer].fusion {
            Fusion::CoarseFine { .. } => {
                let c = self.coarse_fuse(g, layer, y, enc)?;
                let f = self.fine_fuse(g, layer, y, enc)?;
                Ok(g.add(c, f)?)
            }
            Fusion::LastLayer(p) => {
                let q_len = g.shape(y)[0] / enc.dec_groups().max(1);
                let last = *enc.layers.last().expect("at least one encoder layer");
                self.mha(g, p, y, last, self.cross_spec(enc, q_len))
            }
        }
    }

    /// Next-token logits for every position of `prefixes` (global ids, each
    /// starting with BOS, all of one length). Returns `groups * len` rows
    /// over the identifier vocabulary.
    pub fn decode<'a>(&'a self, g: &mut Graph<'a, T>, enc: &EncoderOut, prefixes: &[Vec<usize>], dropout: &mut Option<Dropout<'_>>) -> Result<Var> {
        if prefixes.len() != enc.dec_groups() {
            return Err(CoreError::invalid(format!("{} prefixes for {} decoder groups", prefixes.len(), enc.dec_groups())));
        }
        let len = prefixes[0].len();
        if len == 0 {
            return Err(CoreError::invalid("decoder prefix is empty"));
        }
        let bos = self.layout.bos();
        for p in prefixes {
            if p.len() != len || p[0] != bos || p.iter().any(|&t| t > bos) {
                return Err(CoreError::invalid(format!("bad decoder prefix {p:?}")));
            }
        }
        let tokens: Vec<usize> = prefixes.iter().flatten().copied().collect();
        let pos = self.positions(prefixes.len(), len)?;
        let tok_table = self.p(g, self.dec_tok);
        let pos_table = self.p(g, self.dec_pos);
        let e = g.embedding(tok_table, &tokens)?;
        let pe = g.embedding(pos_table, &pos)?;
        let mut y = g.add(e, pe)?;
        y = drop(g, y, dropout)?;
        let self_spec = AttentionSpec::new(prefixes.len(), len, len, self.config.n_heads).causal();
        for (l, layer) in self.dec.iter().enumerate() {
            let h = self.norm(g, layer.ln1, y)?;
            let a = self.mha(g, &layer.self_attn, h, h, self_spec.clone())?;
            let a = drop(g, a, dropout)?;
            y = g.add(y, a)?;
            let h = self.norm(g, layer.ln2, y)?;
            let f = self.fusion_sublayer(g, l, h, enc)?;
            let f = drop(g, f, dropout)?;
            y = g.add(y, f)?;
            let h = self.norm(g, layer.ln3, y)?;
            let f = self.ffn(g, &layer.ffn, h)?;
            let f = drop(g, f, dropout)?;
            y = g.add(y, f)?;
        }
        let h = self.norm(g, self.ln_f, y)?;
        self.lin(g, h, self.out_w, Some(self.out_b))
    }

    /// Inference logits for prefixes against detached encoder values.
    pub fn logits(&self, enc: &EncoderValues<T>, prefixes: &[Vec<usize>]) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let e = enc.to_graph(&mut g);
        let out = self.decode(&mut g, &e, prefixes, &mut None)?;
        Ok(g.value(out).clone())
    }

    /// Like [`FusionModel::logits`], with prefix `i` reading encoded query
    /// `map[i]`. Encoder-side projections run once per query, not once per
    /// prefix.
    pub fn logits_mapped(&self, enc: &EncoderValues<T>, prefixes: &[Vec<usize>], map: &[usize]) -> Result<Tensor<T>> {
        if map.len() != prefixes.len() || map.iter().any(|&m| m >= enc.groups) {
            return Err(CoreError::invalid(format!("query map of {} entries for {} prefixes over {} queries", map.len(), prefixes.len(), enc.groups)));
        }
        let mut g = Graph::inference();
        let e = enc.to_graph(&mut g).with_query_map(map.to_vec());
        let out = self.decode(&mut g, &e, prefixes, &mut None)?;
        Ok(g.value(out).clone())
    }

    /// Overwrite a fine-fusion gate bias; used to saturate or silence gates
    /// in probes.
    pub fn set_fine_gate_bias(&mut self, layer: usize, branch: usize, value: T) -> Result<()> {
        let Fusion::CoarseFine { fine, .. } = &self.dec[layer].fusion else {
            return Err(CoreError::invalid("model has no fine fusion"));
        };
        let id = fine[branch].gate_b;
        let n = self.store.value(id).len();
        Ok(self.store.set(id, Tensor::full(&[n], value))?)
    }
}

/// Exact learnable scalar count for a configuration and layout.
pub fn count_params(config: &ModelConfig, layout: &VocabLayout) -> usize {
    let d = config.d_model;
    let f = config.ffn_dim;
    let s = config.encoder_layers;
    let norm = 2 * d;
    let mha = 4 * (d * d + d);
    let ffn = d * f + f + f * d + d;
    let enc_layer = 2 * norm + mha + ffn;
    let fusion = match config.fusion {
        FusionMode::CoarseFine => (s * d * d + d + 3 * d * d) + s * (mha + 2 * d * d + d),
        FusionMode::LastLayer => mha,
    };
    let dec_layer = 3 * norm + mha + fusion + ffn;
    config.query_vocab_size * d
        + config.max_len * d
        + s * enc_layer
        + layout.input_vocab() * d
        + config.max_len * d
        + config.decoder_layers * dec_layer
        + norm
        + d * layout.total()
        + layout.total()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(fusion: FusionMode, s: usize) -> FusionModel<f64> {
        let cfg = ModelConfig {
            d_model: 8,
            n_heads: 2,
            ffn_dim: 12,
            encoder_layers: s,
            decoder_layers: 2,
            dropout: 0.0,
            query_vocab_size: 20,
            max_len: 8,
            gate_mode: GateMode::SelfGate,
            fusion,
        };
        FusionModel::new(cfg, VocabLayout::new(vec![3, 4, 2]).unwrap(), &mut Rng::new(5)).unwrap()
    }

    #[test]
    fn encoder_keeps_every_layer() {
        for s in [1, 3] {
            let m = tiny(FusionMode::CoarseFine, s);
            let e = m.encode_values(&[&[1, 2, 3], &[4]]).unwrap();
            assert_eq!(e.layers.len(), s);
            assert!(e.layers.iter().all(|t| t.shape() == [6, 8]));
        }
    }

    #[test]
    fn mapped_logits_match_gathered_encoder_rows() {
        for fusion in [FusionMode::CoarseFine, FusionMode::LastLayer] {
            let m = tiny(fusion, 2).cast::<f32>();
            let e = m.encode_values(&[&[1, 2, 3], &[4], &[5, 6]]).unwrap();
            let bos = m.layout.bos();
            let prefixes = vec![vec![bos, 1], vec![bos, 0], vec![bos, 2], vec![bos, 1]];
            let map = [2, 0, 2, 1];
            let a = m.logits_mapped(&e, &prefixes, &map).unwrap();
            let b = m.logits(&e.select(&map), &prefixes).unwrap();
            assert_eq!(a, b);
            assert!(m.logits_mapped(&e, &prefixes, &[0, 3, 0, 0]).is_err());
        }
    }

    #[test]
    fn logits_shape_and_bad_inputs() {
        let m = tiny(FusionMode::CoarseFine, 2);
        let e = m.encode_values(&[&[1, 2]]).unwrap();
        let bos = m.layout.bos();
        let out = m.logits(&e, &[vec![bos, 0, 4]]).unwrap();
        assert_eq!(out.shape(), &[3, 9]);
        assert!(m.logits(&e, &[vec![]]).is_err());
        assert!(m.logits(&e, &[vec![0, 1]]).is_err());
        assert!(m.encode_values(&[&[20]]).is_err());
    }

    #[test]
    fn count_matches_store() {
        for fusion in [FusionMode::CoarseFine, FusionMode::LastLayer] {
            for s in [1, 3] {
                let m = tiny(fusion, s);
                assert_eq!(count_params(&m.config, &m.layout), m.num_params());
            }
        }
    }

    #[test]
    fn fusion_output_keeps_decoder_shape() {
        for s in 1..=5 {
            let m = tiny(FusionMode::CoarseFine, s);
            let mut g = Graph::<f64>::inference();
            let enc = m.encode(&mut g, &[&[1, 2, 3]], &mut None).unwrap();
            let y = g.input(Tensor::full(&[4, 8], 0.3));
            let c = m.coarse_fuse(&mut g, 0, y, &enc).unwrap();
            let f = m.fine_fuse(&mut g, 0, y, &enc).unwrap();
            assert_eq!(g.shape(c), &[4, 8]);
            assert_eq!(g.shape(f), &[4, 8]);
        }
    }

    fn named<'m>(m: &'m FusionModel<f64>, name: &str) -> &'m Tensor<f64> {
        m.store.value(m.store.id(name).unwrap_or_else(|| panic!("no param {name}")))
    }

    /// `x W + b` for one row.
    fn affine(x: &[f64], w: &Tensor<f64>, b: Option<&Tensor<f64>>) -> Vec<f64> {
        (0..w.cols())
            .map(|o| (0..x.len()).map(|i| x[i] * w.data()[i * w.cols() + o]).sum::<f64>() + b.map_or(0.0, |b| b.data()[o]))
            .collect()
    }

    /// Multi-head attention of one query row over key rows, by scalar loops.
    fn naive_mha(m: &FusionModel<f64>, prefix: &str, y: &[f64], keys: &[&[f64]]) -> Vec<f64> {
        let p = |s: &str| named(m, &format!("{prefix}.{s}"));
        let q = affine(y, p("q.w"), Some(p("q.b")));
        let k: Vec<Vec<f64>> = keys.iter().map(|e| affine(e, p("k.w"), Some(p("k.b")))).collect();
        let v: Vec<Vec<f64>> = keys.iter().map(|e| affine(e, p("v.w"), Some(p("v.b")))).collect();
        let (d, heads) = (y.len(), m.config.n_heads);
        let dh = d / heads;
        let mut cat = vec![0.0; d];
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let s: Vec<f64> = k.iter().map(|kr| cols.clone().map(|c| q[c] * kr[c]).sum::<f64>() / (dh as f64).sqrt()).collect();
            let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = s.iter().map(|x| (x - mx).exp()).sum();
            for (j, vr) in v.iter().enumerate() {
                let a = (s[j] - mx).exp() / z;
                for c in cols.clone() {
                    cat[c] += a * vr[c];
                }
            }
        }
        affine(&cat, p("o.w"), Some(p("o.b")))
    }

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    fn rand_rows(rng: &mut Rng, rows: usize, d: usize) -> Tensor<f64> {
        Tensor::new(vec![rows, d], (0..rows * d).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn fine_fuse_matches_scalar_loop_oracle() {
        let m = tiny(FusionMode::CoarseFine, 2);
        let mut rng = Rng::new(9);
        let (q_len, len, key_lens) = (3, 4, vec![4, 2]);
        let y = rand_rows(&mut rng, 2 * q_len, 8);
        let es: Vec<Tensor<f64>> = (0..2).map(|_| rand_rows(&mut rng, 2 * len, 8)).collect();
        let mut g = Graph::inference();
        let yv = g.input(y.clone());
        let enc = EncoderOut {
            layers: es.iter().map(|e| g.input(e.clone())).collect(),
            groups: 2,
            len,
            key_lens: key_lens.clone(),
            query_map: None,
        };
        let out = m.fine_fuse(&mut g, 0, yv, &enc).unwrap();
        let got = g.value(out).clone();
        for grp in 0..2 {
            for i in 0..q_len {
                let row = y.row(grp * q_len + i);
                let mut want = vec![0.0; 8];
                for (l, e) in es.iter().enumerate() {
                    let keys: Vec<&[f64]> = (0..key_lens[grp]).map(|j| e.row(grp * len + j)).collect();
                    let c = naive_mha(&m, &format!("dec.0.fine.{l}.attn"), row, &keys);
                    let yc: Vec<f64> = row.iter().chain(&c).copied().collect();
                    let gate = affine(&yc, named(&m, &format!("dec.0.fine.{l}.gate.w")), Some(named(&m, &format!("dec.0.fine.{l}.gate.b"))));
                    for ch in 0..8 {
                        want[ch] += sigmoid(gate[ch]) * c[ch];
                    }
                }
                for (a, b) in got.row(grp * q_len + i).iter().zip(&want) {
                    assert!((a - b).abs() < 1e-5, "{a} vs {b}");
                }
            }
        }
    }

    fn one_layer_enc<'a>(g: &mut Graph<'a, f64>, e: &Tensor<f64>) -> EncoderOut {
        EncoderOut {
            layers: vec![g.input(e.clone())],
            groups: 1,
            len: e.rows(),
            key_lens: vec![e.rows()],
            query_map: None,
        }
    }

    #[test]
    fn saturated_single_gate_is_plain_cross_attention() {
        let mut m = tiny(FusionMode::CoarseFine, 1);
        m.set_fine_gate_bias(0, 0, 1e3).unwrap();
        let mut rng = Rng::new(2);
        let y = rand_rows(&mut rng, 2, 8);
        let e = rand_rows(&mut rng, 3, 8);
        let mut g = Graph::inference();
        let yv = g.input(y.clone());
        let enc = one_layer_enc(&mut g, &e);
        let f = m.fine_fuse(&mut g, 0, yv, &enc).unwrap();
        let spec = AttentionSpec::new(1, 2, 3, 2).with_key_lens(vec![3]);
        let plain = m.mha(&mut g, &fine_attn(&m), yv, enc.layers[0], spec).unwrap();
        assert_eq!(g.value(f), g.value(plain));

        m.set_fine_gate_bias(0, 0, -1e3).unwrap();
        let mut g = Graph::inference();
        let yv = g.input(y);
        let enc = one_layer_enc(&mut g, &e);
        let f = m.fine_fuse(&mut g, 0, yv, &enc).unwrap();
        assert!(g.value(f).data().iter().all(|&v| v == 0.0));
    }

    fn fine_attn(m: &FusionModel<f64>) -> Mha {
        match &m.dec[0].fusion {
            Fusion::CoarseFine { fine, .. } => fine[0].attn,
            Fusion::LastLayer(_) => unreachable!(),
        }
    }

    #[test]
    fn coarse_gate_at_zero_attention() {
        // Zeroing W_v makes C = 0 everywhere.
        for (mode, want) in [(GateMode::SelfGate, 0.0), (GateMode::Literal, 0.5 / 3.0)] {
            let mut m = tiny(FusionMode::CoarseFine, 3);
            m.config.gate_mode = mode;
            let Fusion::CoarseFine { coarse, .. } = &m.dec[0].fusion else { unreachable!() };
            let wv = coarse.wv;
            m.store.set(wv, Tensor::zeros(&[8, 8])).unwrap();
            let mut g = Graph::inference();
            let enc = m.encode(&mut g, &[&[1, 2]], &mut None).unwrap();
            let y = g.input(Tensor::full(&[2, 8], 0.7));
            let c = m.coarse_fuse(&mut g, 0, y, &enc).unwrap();
            assert!(g.value(c).data().iter().all(|&v| (v - want).abs() < 1e-15), "{mode:?}");
        }
    }

    #[test]
    fn identity_mix_passes_the_single_layer_through() {
        // S = 1, W = I, b = 0 gives Z = E_1, so the coarse feature equals a
        // bias-free attention over E_1 gated by hand.
        let mut m = tiny(FusionMode::CoarseFine, 1);
        let Fusion::CoarseFine { coarse, .. } = m.dec[0].fusion.clone() else { unreachable!() };
        let eye = Tensor::new(vec![8, 8], (0..64).map(|i| if i % 9 == 0 { 1.0 } else { 0.0 }).collect()).unwrap();
        m.store.set(coarse.w, eye).unwrap();
        m.store.set(coarse.b, Tensor::zeros(&[8])).unwrap();
        let mut rng = Rng::new(4);
        let (y, e) = (rand_rows(&mut rng, 2, 8), rand_rows(&mut rng, 3, 8));
        let mut g = Graph::inference();
        let yv = g.input(y.clone());
        let enc = one_layer_enc(&mut g, &e);
        let got = m.coarse_fuse(&mut g, 0, yv, &enc).unwrap();
        let p = |id| m.store.value(id);
        for i in 0..2 {
            let q = affine(y.row(i), p(coarse.wq), None);
            let k: Vec<Vec<f64>> = (0..3).map(|j| affine(e.row(j), p(coarse.wk), None)).collect();
            let v: Vec<Vec<f64>> = (0..3).map(|j| affine(e.row(j), p(coarse.wv), None)).collect();
            let mut c = vec![0.0; 8];
            for h in 0..2 {
                let s: Vec<f64> = k.iter().map(|kr| (h * 4..h * 4 + 4).map(|x| q[x] * kr[x]).sum::<f64>() / 2.0).collect();
                let z: f64 = s.iter().map(|x| x.exp()).sum();
                for (j, vr) in v.iter().enumerate() {
                    for x in h * 4..h * 4 + 4 {
                        c[x] += s[j].exp() / z * vr[x];
                    }
                }
            }
            for (a, cv) in g.value(got).row(i).iter().zip(&c) {
                assert!((a - cv * sigmoid(*cv)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn decoder_is_causal() {
        let m = tiny(FusionMode::CoarseFine, 2);
        let enc = m.encode_values(&[&[3, 4, 5]]).unwrap();
        let bos = m.layout.bos();
        let base = m.logits(&enc, &[vec![bos, 1, 5, 7]]).unwrap();
        for p in 1..4 {
            let mut prefix = vec![bos, 1, 5, 7];
            prefix[p] = if prefix[p] == 0 { 2 } else { 0 };
            let moved = m.logits(&enc, &[prefix]).unwrap();
            for r in 0..4 {
                if r < p {
                    assert_eq!(base.row(r), moved.row(r), "position {r} saw token {p}");
                }
            }
            assert_ne!(base.row(p), moved.row(p));
        }
    }

    #[test]
    fn default_count_matches_hand_sum() {
        // d 128, ffn 256, S 3, 3 decoder layers, query vocab 2048, max len 64,
        // layout 16 + 16 + 16 + 8 = 56 outputs plus BOS.
        let layout = VocabLayout::new(vec![16, 16, 16, 8]).unwrap();
        let cfg = ModelConfig::default();
        let (d, f) = (128usize, 256usize);
        let ln = 2 * d;
        let attn = 4 * (d * d + d);
        let ff = d * f + f + f * d + d;
        let enc = 2048 * d + 64 * d + 3 * (2 * ln + attn + ff);
        let coarse = 3 * d * d + d + 3 * d * d;
        let fine = 3 * (attn + 2 * d * d + d);
        let dec = 57 * d + 64 * d + 3 * (3 * ln + attn + coarse + fine + ff) + ln + d * 56 + 56;
        assert_eq!(count_params(&cfg, &layout), enc + dec);
        assert_eq!(enc + dec, 2_274_744);
        let m: FusionModel<f32> = FusionModel::new(cfg.clone(), layout.clone(), &mut Rng::new(1)).unwrap();
        assert_eq!(m.num_params(), enc + dec);
        let wide = ModelConfig { ffn_dim: 512, ..cfg.clone() };
        assert!(count_params(&wide, &layout) > count_params(&cfg, &layout));
        let again: FusionModel<f32> = FusionModel::new(cfg, layout, &mut Rng::new(1)).unwrap();
        assert_eq!(again.store.named_values().count(), m.store.named_values().count());
    }

    #[test]
    fn argmax_ignores_a_constant_shift() {
        let m = tiny(FusionMode::CoarseFine, 2);
        let enc = m.encode_values(&[&[7, 1]]).unwrap();
        let logits = m.logits(&enc, &[vec![m.layout.bos(), 0]]).unwrap();
        let argmax = |r: &[f64]| (0..r.len()).fold(0, |b, t| if r[t] > r[b] { t } else { b });
        for r in 0..logits.rows() {
            let shifted: Vec<f64> = logits.row(r).iter().map(|x| x + 123.25).collect();
            assert_eq!(argmax(logits.row(r)), argmax(&shifted));
        }
    }
}

//! Define-by-run computation graph with a reverse-mode tape.
//!
//! Nodes are appended in execution order, so walking them backwards is a
//! valid reverse topological order and every node is visited exactly once.
//! Parameters are borrowed from a [`ParamStore`] rather than copied.

use std::borrow::Cow;
use std::collections::HashMap;

use crate::error::{Result, TensorError};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Scalar, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Shape and masking for the fused multi-head attention op.
///
/// Queries are `[groups * q_len, d]`, keys and values `[groups * k_len, d]`;
/// group `g` only attends within its own rows. `key_lens[g]` masks padded
/// keys; `causal` additionally masks key `j > i` for query `i`. With
/// `key_groups`, query group `g` instead reads key group `key_groups[g]`,
/// so many query groups can share one set of keys.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionSpec {
    pub groups: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
    pub causal: bool,
    pub key_lens: Option<Vec<usize>>,
    pub key_groups: Option<Vec<usize>>,
}

impl AttentionSpec {
    pub fn new(groups: usize, q_len: usize, k_len: usize, heads: usize) -> Self {
        AttentionSpec {
            groups,
            q_len,
            k_len,
            heads,
            causal: false,
            key_lens: None,
            key_groups: None,
        }
    }

    pub fn causal(mut self) -> Self {
        self.causal = true;
        self
    }

    pub fn with_key_lens(mut self, lens: Vec<usize>) -> Self {
        self.key_lens = Some(lens);
        self
    }

    /// Map query group `g` to key group `map[g]`.
    pub fn with_key_groups(mut self, map: Vec<usize>) -> Self {
        self.key_groups = Some(map);
        self
    }

    #[inline]
    fn kg(&self, g: usize) -> usize {
        self.key_groups.as_ref().map_or(g, |m| m[g])
    }

    #[inline]
    fn visible(&self, g: usize, i: usize) -> usize {
        let kg = self.kg(g);
        let mut n = self
            .key_lens
            .as_ref()
            .map_or(self.k_len, |l| l[kg].min(self.k_len));
        if self.causal {
            n = n.min(i + 1);
        }
        n
    }
}

enum Op<T> {
    Input,
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    ConcatCols(Vec<Var>),
    Rows(Var, usize),
    Embedding(Var, Vec<usize>),
    Sigmoid(Var),
    Elu(Var),
    Gelu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        spec: AttentionSpec,
        probs: Vec<T>,
    },
    Dropout(Var, Vec<T>),
    Sum(Var),
    Mean(Var),
    SumSq(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    StopGrad,
}

struct Node<'a, T: Scalar> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// A single-threaded computation graph. Distinct graphs may run on
/// distinct threads against the same (read-only) parameter store.
pub struct Graph<'a, T: Scalar = f32> {
    nodes: Vec<Node<'a, T>>,
    params: HashMap<ParamId, Var>,
    grad_enabled: bool,
    /// Stop-gradient outputs, recorded in order or replayed from a base pass.
    stopped: Vec<Tensor<T>>,
    replay: Option<std::vec::IntoIter<Tensor<T>>>,
}

impl<T: Scalar> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_2d<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(TensorError::shape(
            op,
            format!("expected a matrix, got {s:?}"),
        )),
    }
}

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    T::ONE / (T::ONE + (-x).exp())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;
const LN_EPS: f64 = 1e-5;

impl<'a, T: Scalar> Graph<'a, T> {
    /// Graph that records backward information.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
            grad_enabled: true,
            stopped: Vec::new(),
            replay: None,
        }
    }

    /// Inference graph whose `stop_gradient` calls return `values` in order
    /// instead of their inputs. Finite-difference checks use this to hold
    /// stopped quantities at their base-point values.
    pub fn replaying(values: Vec<Tensor<T>>) -> Self {
        Graph {
            replay: Some(values.into_iter()),
            ..Self::inference()
        }
    }

    /// Values produced by `stop_gradient` so far, in call order.
    pub fn stopped_values(&self) -> &[Tensor<T>] {
        &self.stopped
    }

    /// Graph for inference: values only, nothing requires grad.
    pub fn inference() -> Self {
        Graph {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Cow<'a, Tensor<T>>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert!(value.is_all_finite(), "non-finite output");
        let needs_grad = needs_grad && self.grad_enabled;
        let op = if needs_grad { op } else { strip(op) };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn owned(&mut self, t: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.push(Cow::Owned(t), op, needs_grad)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.owned(t, Op::Input, false)
    }

    /// Free leaf that receives a gradient (used by gradient checks).
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.owned(t, Op::Leaf, true)
    }

    /// Bind a parameter; repeated binds return the same node.
    pub fn param(&mut self, store: &'a ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(Cow::Borrowed(store.value(id)), Op::Param(id), true);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = check_2d("matmul", self.value(a))?;
        let (k2, n) = check_2d("matmul", self.value(b))?;
        if k != k2 {
            return Err(TensorError::shape(
                "matmul",
                format!("[{m}, {k}] x [{k2}, {n}]"),
            ));
        }
        let mut out = vec![T::ZERO; m * n];
        gemm_nn(
            m,
            k,
            n,
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            false,
        );
        let ng = self.ng(a) || self.ng(b);
        Ok(self.owned(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), ng))
    }

    fn zip(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        same_shape(op, self.value(a), self.value(b))?;
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("add", a, b, |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.owned(t, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("sub", a, b, |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.owned(t, Op::Sub(a, b), ng))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("mul", a, b, |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.owned(t, Op::Mul(a, b), ng))
    }

    /// `x[r, c] + bias[c]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = check_2d("add_row", self.value(x))?;
        if self.value(bias).len() != c {
            return Err(TensorError::shape(
                "add_row",
                format!("[{r}, {c}] + {:?}", self.value(bias).shape()),
            ));
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_exact_mut(c) {
            for (d, &bv) in row.iter_mut().zip(b) {
                *d += bv;
            }
        }
        let ng = self.ng(x) || self.ng(bias);
        Ok(self.owned(Tensor::new(vec![r, c], data)?, Op::AddRow(x, bias), ng))
    }

    /// `x * w (+ b)` for `x: [r, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let t = self.value(x).map(|v| v * s);
        let ng = self.ng(x);
        self.owned(t, Op::Scale(x, s), ng)
    }

    /// Concatenate matrices along the last dimension.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::InvalidArgument("concat_cols of nothing".into()))?;
        let (r, _) = check_2d("concat_cols", self.value(first))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = check_2d("concat_cols", self.value(p))?;
            if pr != r {
                return Err(TensorError::shape(
                    "concat_cols",
                    format!("row counts {r} vs {pr}"),
                ));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![T::ZERO; r * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for i in 0..r {
                data[i * total + off..i * total + off + w]
                    .copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.owned(
            Tensor::new(vec![r, total], data)?,
            Op::ConcatCols(parts.to_vec()),
            ng,
        ))
    }

    /// Rows `start..end` of a matrix.
    pub fn rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = check_2d("rows", self.value(x))?;
        if start > end || end > r {
            return Err(TensorError::shape(
                "rows",
                format!("{start}..{end} of {r} rows"),
            ));
        }
        let data = self.value(x).data()[start * c..end * c].to_vec();
        let ng = self.ng(x);
        Ok(self.owned(
            Tensor::new(vec![end - start, c], data)?,
            Op::Rows(x, start),
            ng,
        ))
    }

    /// Row lookup `table[ids[i]]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = check_2d("embedding", self.value(table))?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(TensorError::InvalidArgument(format!(
                "embedding: id {bad} >= vocab {v}"
            )));
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let ng = self.ng(table);
        Ok(self.owned(
            Tensor::new(vec![ids.len(), d], data)?,
            Op::Embedding(table, ids.to_vec()),
            ng,
        ))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x).map(sigmoid);
        let ng = self.ng(x);
        self.owned(t, Op::Sigmoid(x), ng)
    }

    /// ELU with alpha = 1.
    pub fn elu(&mut self, x: Var) -> Var {
        let t = self
            .value(x)
            .map(|v| if v > T::ZERO { v } else { v.exp() - T::ONE });
        let ng = self.ng(x);
        self.owned(t, Op::Elu(x), ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let c = T::from_f64(GELU_C);
        let a = T::from_f64(GELU_A);
        let half = T::from_f64(0.5);
        let t = self
            .value(x)
            .map(|v| half * v * (T::ONE + (c * (v + a * v * v * v)).tanh()));
        let ng = self.ng(x);
        self.owned(t, Op::Gelu(x), ng)
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        check_2d("softmax", self.value(x))?;
        let t = softmax_rows(self.value(x));
        let ng = self.ng(x);
        Ok(self.owned(t, Op::Softmax(x), ng))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        check_2d("log_softmax", self.value(x))?;
        let t = log_softmax_rows(self.value(x));
        let ng = self.ng(x);
        Ok(self.owned(t, Op::LogSoftmax(x), ng))
    }

    /// Row-wise layer norm with affine `gamma`, `beta` of length `cols`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (r, c) = check_2d("layer_norm", self.value(x))?;
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(TensorError::shape(
                "layer_norm",
                format!("cols {c} vs affine params"),
            ));
        }
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = vec![T::ZERO; r * c];
        let mut mean = Vec::with_capacity(r);
        let mut rstd = Vec::with_capacity(r);
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            let mu = row.iter().map(|v| v.to_f64()).sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v.to_f64() - mu).powi(2)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            let (mu_t, rs_t) = (T::from_f64(mu), T::from_f64(rs));
            for j in 0..c {
                out[i * c + j] = (row[j] - mu_t) * rs_t * g[j] + b[j];
            }
            mean.push(mu_t);
            rstd.push(rs_t);
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.owned(
            Tensor::new(vec![r, c], out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            },
            ng,
        ))
    }

    /// Scaled dot-product multi-head attention, heads split along columns.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Result<Var> {
        let (qr, d) = check_2d("attention", self.value(q))?;
        let (kr, dk) = check_2d("attention", self.value(k))?;
        let (vr, dv) = check_2d("attention", self.value(v))?;
        let AttentionSpec {
            groups,
            q_len,
            k_len,
            heads,
            ..
        } = spec;
        if heads == 0 || d % heads != 0 || dk != d || dv != d {
            return Err(TensorError::shape(
                "attention",
                format!("dims q {d} k {dk} v {dv}, {heads} heads"),
            ));
        }
        let kgroups = match &spec.key_groups {
            Some(m) => {
                let kg = if k_len == 0 { 0 } else { kr / k_len };
                if m.len() != groups || m.iter().any(|&x| x >= kg) {
                    return Err(TensorError::InvalidArgument(
                        "attention: bad key_groups".into(),
                    ));
                }
                kg
            }
            None => groups,
        };
        if qr != groups * q_len || kr != kgroups * k_len || vr != kr {
            return Err(TensorError::shape(
                "attention",
                format!("rows q {qr} k {kr} v {vr} for {groups} groups of {q_len}/{k_len}"),
            ));
        }
        if let Some(l) = &spec.key_lens {
            if l.len() != kgroups || l.iter().any(|&n| n == 0) {
                return Err(TensorError::InvalidArgument(
                    "attention: bad key_lens".into(),
                ));
            }
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qs = self.value(q).data();
        let ks = self.value(k).data();
        let vs = self.value(v).data();
        let mut out = vec![T::ZERO; qr * d];
        let mut probs = vec![T::ZERO; groups * heads * q_len * k_len];
        let mut scores = vec![0f64; k_len];
        for g in 0..groups {
            for h in 0..heads {
                for i in 0..q_len {
                    let n = spec.visible(g, i);
                    let kg = spec.kg(g);
                    let qrow = &qs[(g * q_len + i) * d + h * dh..][..dh];
                    let mut mx = f64::NEG_INFINITY;
                    for (j, s) in scores.iter_mut().enumerate().take(n) {
                        let krow = &ks[(kg * k_len + j) * d + h * dh..][..dh];
                        let dot: f64 = qrow.iter().zip(krow).map(|(a, b)| (*a * *b).to_f64()).sum();
                        *s = dot * scale;
                        mx = mx.max(*s);
                    }
                    let mut z = 0.0;
                    for s in scores.iter_mut().take(n) {
                        *s = (*s - mx).exp();
                        z += *s;
                    }
                    let prow = &mut probs[((g * heads + h) * q_len + i) * k_len..][..k_len];
                    let orow = &mut out[(g * q_len + i) * d + h * dh..][..dh];
                    for j in 0..n {
                        let p = T::from_f64(scores[j] / z);
                        prow[j] = p;
                        let vrow = &vs[(kg * k_len + j) * d + h * dh..][..dh];
                        for (o, &vv) in orow.iter_mut().zip(vrow) {
                            *o += p * vv;
                        }
                    }
                }
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.owned(
            Tensor::new(vec![qr, d], out)?,
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
            },
            ng,
        ))
    }

    /// Inverted dropout. A rate of 0 returns `x` unchanged.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::InvalidArgument(format!(
                "dropout rate {rate} not in [0, 1)"
            )));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = T::from_f64(1.0 / (1.0 - rate));
        let n = self.value(x).len();
        let mask: Vec<T> = (0..n)
            .map(|_| if rng.uniform() < rate { T::ZERO } else { keep })
            .collect();
        let src = self.value(x);
        let data = src.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let t = Tensor::new(src.shape().to_vec(), data)?;
        let ng = self.ng(x);
        Ok(self.owned(t, Op::Dropout(x, mask), ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|v| v.to_f64()).sum();
        let ng = self.ng(x);
        self.owned(Tensor::scalar(T::from_f64(s)), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s: f64 = t.data().iter().map(|v| v.to_f64()).sum::<f64>() / t.len().max(1) as f64;
        let ng = self.ng(x);
        self.owned(Tensor::scalar(T::from_f64(s)), Op::Mean(x), ng)
    }

    /// Squared L2 norm of all entries.
    pub fn sum_sq(&mut self, x: Var) -> Var {
        let s: f64 = self
            .value(x)
            .data()
            .iter()
            .map(|v| v.to_f64().powi(2))
            .sum();
        let ng = self.ng(x);
        self.owned(Tensor::scalar(T::from_f64(s)), Op::SumSq(x), ng)
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (r, c) = check_2d("cross_entropy", self.value(logits))?;
        if targets.len() != r {
            return Err(TensorError::shape(
                "cross_entropy",
                format!("{r} rows, {} targets", targets.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(TensorError::InvalidArgument(format!(
                "cross_entropy: target {bad} >= {c}"
            )));
        }
        let lsm = log_softmax_rows(self.value(logits));
        let nll: f64 = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| -lsm.data()[i * c + t].to_f64())
            .sum::<f64>()
            / r.max(1) as f64;
        let probs = lsm.data().iter().map(|&v| v.exp()).collect();
        let ng = self.ng(logits);
        Ok(self.owned(
            Tensor::scalar(T::from_f64(nll)),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Identity forward; blocks all gradient flow to `x`.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let t = match self.replay.as_mut() {
            Some(it) => {
                let t = it.next().expect("replay has a value for every stop_gradient");
                assert_eq!(t.shape(), self.shape(x), "replayed stop_gradient shape");
                t
            }
            None => self.value(x).clone(),
        };
        self.stopped.push(t.clone());
        self.owned(t, Op::StopGrad, false)
    }

    /// Reverse pass from a scalar `loss`. Consumes the graph.
    pub fn backward(self, loss: Var) -> Result<Grads<T>> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut out = Grads {
            params: Vec::new(),
            leaves: HashMap::new(),
        };
        if !self.nodes[loss.0].needs_grad {
            return Ok(out);
        }
        grads[loss.0] = Some(vec![T::ONE]);
        for idx in (0..=loss.0).rev() {
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Param(id) => {
                    out.params
                        .push((*id, Tensor::new(node.value.shape().to_vec(), gy)?));
                }
                Op::Leaf => {
                    out.leaves
                        .insert(idx, Tensor::new(node.value.shape().to_vec(), gy)?);
                }
                op => self.backprop_op(op, &node.value, &gy, &mut grads),
            }
        }
        out.params.sort_by_key(|(id, _)| *id);
        Ok(out)
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![T::ZERO; self.nodes[v.0].value.len()]);
        f(slot);
    }

    fn backprop_op(&self, op: &Op<T>, y: &Tensor<T>, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        match op {
            Op::Input | Op::Leaf | Op::Param(_) | Op::StopGrad => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let n = self.value(*b).shape()[1];
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                // dA = dY * B^T, dB = A^T * dY
                self.acc(grads, *a, |ga| gemm_nt(m, n, k, gy, bv, ga, true));
                self.acc(grads, *b, |gb| gemm_tn(k, m, n, av, gy, gb, true));
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, |g| add_into(g, gy));
                self.acc(grads, *b, |g| add_into(g, gy));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |g| add_into(g, gy));
                self.acc(grads, *b, |g| {
                    g.iter_mut().zip(gy).for_each(|(d, &s)| *d -= s)
                });
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.acc(grads, *a, |g| {
                    for ((d, &s), &o) in g.iter_mut().zip(gy).zip(bv) {
                        *d += s * o;
                    }
                });
                self.acc(grads, *b, |g| {
                    for ((d, &s), &o) in g.iter_mut().zip(gy).zip(av) {
                        *d += s * o;
                    }
                });
            }
            Op::AddRow(x, bias) => {
                let c = y.cols();
                self.acc(grads, *x, |g| add_into(g, gy));
                self.acc(grads, *bias, |g| {
                    for row in gy.chunks_exact(c) {
                        add_into(g, row);
                    }
                });
            }
            Op::Scale(x, s) => {
                self.acc(grads, *x, |g| {
                    g.iter_mut().zip(gy).for_each(|(d, &v)| *d += v * *s)
                });
            }
            Op::ConcatCols(parts) => {
                let total = y.cols();
                let r = y.rows();
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    self.acc(grads, p, |g| {
                        for i in 0..r {
                            add_into(
                                &mut g[i * w..(i + 1) * w],
                                &gy[i * total + off..i * total + off + w],
                            );
                        }
                    });
                    off += w;
                }
            }
            Op::Rows(x, start) => {
                let c = y.cols();
                self.acc(grads, *x, |g| {
                    add_into(&mut g[start * c..start * c + gy.len()], gy)
                });
            }
            Op::Embedding(table, ids) => {
                let d = y.cols();
                self.acc(grads, *table, |g| {
                    for (r, &i) in ids.iter().enumerate() {
                        add_into(&mut g[i * d..(i + 1) * d], &gy[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::Sigmoid(x) => {
                self.acc(grads, *x, |g| {
                    for ((d, &s), &o) in g.iter_mut().zip(gy).zip(y.data()) {
                        *d += s * o * (T::ONE - o);
                    }
                });
            }
            Op::Elu(x) => {
                let xv = self.value(*x).data();
                self.acc(grads, *x, |g| {
                    for (((d, &s), &o), &xi) in g.iter_mut().zip(gy).zip(y.data()).zip(xv) {
                        *d += if xi > T::ZERO { s } else { s * (o + T::ONE) };
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                let c = T::from_f64(GELU_C);
                let a = T::from_f64(GELU_A);
                let half = T::from_f64(0.5);
                let three_a = T::from_f64(3.0 * GELU_A);
                self.acc(grads, *x, |g| {
                    for ((d, &s), &v) in g.iter_mut().zip(gy).zip(xv) {
                        let th = (c * (v + a * v * v * v)).tanh();
                        let dth = (T::ONE - th * th) * c * (T::ONE + three_a * v * v);
                        *d += s * (half * (T::ONE + th) + half * v * dth);
                    }
                });
            }
            Op::Softmax(x) => {
                let c = y.cols();
                self.acc(grads, *x, |g| {
                    for ((gr, yr), gyr) in g
                        .chunks_exact_mut(c)
                        .zip(y.data().chunks_exact(c))
                        .zip(gy.chunks_exact(c))
                    {
                        let dot: f64 = yr.iter().zip(gyr).map(|(a, b)| (*a * *b).to_f64()).sum();
                        let dot = T::from_f64(dot);
                        for ((d, &p), &s) in gr.iter_mut().zip(yr).zip(gyr) {
                            *d += p * (s - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let c = y.cols();
                self.acc(grads, *x, |g| {
                    for ((gr, yr), gyr) in g
                        .chunks_exact_mut(c)
                        .zip(y.data().chunks_exact(c))
                        .zip(gy.chunks_exact(c))
                    {
                        let total = T::from_f64(gyr.iter().map(|v| v.to_f64()).sum());
                        for ((d, &l), &s) in gr.iter_mut().zip(yr).zip(gyr) {
                            *d += s - l.exp() * total;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let c = y.cols();
                let r = y.rows();
                let xv = self.value(*x).data();
                let gv = self.value(*gamma).data();
                let xhat = |i: usize, j: usize| (xv[i * c + j] - mean[i]) * rstd[i];
                self.acc(grads, *gamma, |g| {
                    for i in 0..r {
                        for j in 0..c {
                            g[j] += gy[i * c + j] * xhat(i, j);
                        }
                    }
                });
                self.acc(grads, *beta, |g| {
                    for row in gy.chunks_exact(c) {
                        add_into(g, row);
                    }
                });
                self.acc(grads, *x, |g| {
                    let inv_c = 1.0 / c as f64;
                    for i in 0..r {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..c {
                            let dxh = (gy[i * c + j] * gv[j]).to_f64();
                            s1 += dxh;
                            s2 += dxh * xhat(i, j).to_f64();
                        }
                        let (m1, m2) = (T::from_f64(s1 * inv_c), T::from_f64(s2 * inv_c));
                        for j in 0..c {
                            let dxh = gy[i * c + j] * gv[j];
                            g[i * c + j] += rstd[i] * (dxh - m1 - xhat(i, j) * m2);
                        }
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
            } => self.attention_backward(*q, *k, *v, spec, probs, gy, grads),
            Op::Dropout(x, mask) => {
                self.acc(grads, *x, |g| {
                    for ((d, &s), &m) in g.iter_mut().zip(gy).zip(mask) {
                        *d += s * m;
                    }
                });
            }
            Op::Sum(x) => {
                let s = gy[0];
                self.acc(grads, *x, |g| g.iter_mut().for_each(|d| *d += s));
            }
            Op::Mean(x) => {
                let s = gy[0] / T::from_f64(self.value(*x).len().max(1) as f64);
                self.acc(grads, *x, |g| g.iter_mut().for_each(|d| *d += s));
            }
            Op::SumSq(x) => {
                let two = T::from_f64(2.0) * gy[0];
                let xv = self.value(*x).data();
                self.acc(grads, *x, |g| {
                    g.iter_mut().zip(xv).for_each(|(d, &v)| *d += two * v)
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let c = self.value(*logits).cols();
                let s = gy[0] / T::from_f64(targets.len().max(1) as f64);
                self.acc(grads, *logits, |g| {
                    for (i, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let ind = if j == t { T::ONE } else { T::ZERO };
                            g[i * c + j] += s * (probs[i * c + j] - ind);
                        }
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        spec: &AttentionSpec,
        probs: &[T],
        gy: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let d = self.value(q).cols();
        let AttentionSpec {
            groups,
            q_len,
            k_len,
            heads,
            ..
        } = *spec;
        let dh = d / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let qs = self.value(q).data();
        let ks = self.value(k).data();
        let vs = self.value(v).data();
        let mut dq = vec![T::ZERO; qs.len()];
        let mut dk = vec![T::ZERO; ks.len()];
        let mut dv = vec![T::ZERO; vs.len()];
        let mut dp = vec![T::ZERO; k_len];
        for g in 0..groups {
            for h in 0..heads {
                for i in 0..q_len {
                    let n = spec.visible(g, i);
                    let kg = spec.kg(g);
                    let prow = &probs[((g * heads + h) * q_len + i) * k_len..][..k_len];
                    let go = &gy[(g * q_len + i) * d + h * dh..][..dh];
                    let mut dot = 0.0f64;
                    for j in 0..n {
                        let vrow = &vs[(kg * k_len + j) * d + h * dh..][..dh];
                        let s: f64 = go.iter().zip(vrow).map(|(a, b)| (*a * *b).to_f64()).sum();
                        dp[j] = T::from_f64(s);
                        dot += prow[j].to_f64() * s;
                        let dvrow = &mut dv[(kg * k_len + j) * d + h * dh..][..dh];
                        for (dvv, &o) in dvrow.iter_mut().zip(go) {
                            *dvv += prow[j] * o;
                        }
                    }
                    let dot = T::from_f64(dot);
                    let qoff = (g * q_len + i) * d + h * dh;
                    for j in 0..n {
                        let ds = prow[j] * (dp[j] - dot) * scale;
                        let koff = (kg * k_len + j) * d + h * dh;
                        for t in 0..dh {
                            dq[qoff + t] += ds * ks[koff + t];
                            dk[koff + t] += ds * qs[qoff + t];
                        }
                    }
                }
            }
        }
        self.acc(grads, q, |g| add_into(g, &dq));
        self.acc(grads, k, |g| add_into(g, &dk));
        self.acc(grads, v, |g| add_into(g, &dv));
    }
}

/// Drop saved backward state for nodes that will never receive a gradient.
fn strip<T>(op: Op<T>) -> Op<T> {
    match op {
        Op::Param(id) => Op::Param(id),
        Op::Leaf => Op::Leaf,
        _ => Op::Input,
    }
}

#[inline]
fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let c = x.cols();
    let mut out = x.data().to_vec();
    for row in out.chunks_exact_mut(c) {
        let mx = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.to_f64()));
        let mut z = 0.0;
        for v in row.iter_mut() {
            let e = (v.to_f64() - mx).exp();
            z += e;
            *v = T::from_f64(e);
        }
        let inv = 1.0 / z;
        for v in row.iter_mut() {
            *v = T::from_f64(v.to_f64() * inv);
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape")
}

pub(crate) fn log_softmax_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let c = x.cols();
    let mut out = x.data().to_vec();
    for row in out.chunks_exact_mut(c) {
        let mx = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.to_f64()));
        let lse = mx
            + row
                .iter()
                .map(|v| (v.to_f64() - mx).exp())
                .sum::<f64>()
                .ln();
        for v in row.iter_mut() {
            *v = T::from_f64(v.to_f64() - lse);
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape")
}

/// Gradients produced by [`Graph::backward`].
#[derive(Clone, Debug)]
pub struct Grads<T: Scalar = f32> {
    params: Vec<(ParamId, Tensor<T>)>,
    leaves: HashMap<usize, Tensor<T>>,
}

impl<T: Scalar> Grads<T> {
    pub fn empty() -> Self {
        Grads {
            params: Vec::new(),
            leaves: HashMap::new(),
        }
    }

    /// Gradient w.r.t. a leaf created with [`Graph::leaf`].
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&v.0)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, t)| t)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params.iter().map(|(id, t)| (*id, t))
    }

    /// Sum another set of parameter gradients into this one.
    pub fn merge(&mut self, other: Grads<T>) {
        for (id, g) in other.params {
            match self.params.binary_search_by_key(&id, |(p, _)| *p) {
                Ok(i) => add_into(self.params[i].1.data_mut(), g.data()),
                Err(i) => self.params.insert(i, (id, g)),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::<f32>::inference();
        let x = g.input(Tensor::zeros(&[1, 2]));
        let y = g.softmax(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut g = Graph::<f32>::inference();
        let x = g.input(Tensor::zeros(&[1, 1]));
        let y = g.sigmoid(x);
        assert_eq!(g.value(y).item(), 0.5);
    }

    #[test]
    fn sum_grad_is_ones() {
        let mut g = Graph::<f64>::new();
        let w = g.leaf(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let l = g.sum(w);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.wrt(w).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::<f64>::new();
        let w = g.leaf(t(&[2], &[1., 2.]));
        assert!(matches!(
            g.backward(w),
            Err(TensorError::InvalidArgument(_))
        ));
    }

    #[test]
    fn stop_gradient_blocks_flow() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(t(&[1, 3], &[1., 2., 3.]));
        let b = g.leaf(t(&[1, 3], &[4., 5., 6.]));
        let sa = g.stop_gradient(a);
        assert_eq!(g.value(sa), g.value(a));
        let p = g.mul(sa, b).unwrap();
        let l = g.sum(p);
        let grads = g.backward(l).unwrap();
        assert!(grads.wrt(a).is_none());
        assert_eq!(grads.wrt(b).unwrap().data(), &[1., 2., 3.]);
    }

    #[test]
    fn stop_gradient_commit_term() {
        // loss = ||sg(r) - e||^2, d/de = 2 (e - r)
        let mut g = Graph::<f64>::new();
        let r = g.leaf(t(&[1, 2], &[0.5, -1.0]));
        let e = g.leaf(t(&[1, 2], &[2.0, 1.0]));
        let sr = g.stop_gradient(r);
        let d = g.sub(sr, e).unwrap();
        let l = g.sum_sq(d);
        let grads = g.backward(l).unwrap();
        assert!(grads.wrt(r).is_none());
        assert_eq!(grads.wrt(e).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::<f32>::new();
        let a = g.input(Tensor::zeros(&[2, 3]));
        let b = g.input(Tensor::zeros(&[2, 3]));
        match g.matmul(a, b) {
            Err(TensorError::Shape { op, .. }) => assert_eq!(op, "matmul"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn sequential_losses_accumulate() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", t(&[1, 2], &[1.0, 2.0])).unwrap();
        for _ in 0..2 {
            let mut g = Graph::new();
            let wv = g.param(&store, w);
            let l = g.sum_sq(wv);
            let grads = g.backward(l).unwrap();
            store.accumulate(&grads, 1.0);
        }
        assert_eq!(store.grad(w).data(), &[4.0, 8.0]);
    }

    #[test]
    fn dropout_zero_rate_is_identity() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::full(&[2, 2], 3.0));
        let y = g.dropout(x, 0.0, &mut Rng::new(1)).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn dropout_mask_reproducible() {
        let run = || {
            let mut g = Graph::<f32>::new();
            let x = g.input(Tensor::full(&[4, 8], 1.0));
            let y = g.dropout(x, 0.5, &mut Rng::new(9)).unwrap();
            g.value(y).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn causal_attention_ignores_future() {
        let mut rng = Rng::new(4);
        let mut rnd = |n| (0..n).map(|_| rng.normal() as f32).collect::<Vec<_>>();
        let (q, k, v) = (rnd(3 * 4), rnd(3 * 4), rnd(3 * 4));
        let spec = AttentionSpec::new(1, 3, 3, 2).causal();
        let run = |v: Vec<f32>| {
            let mut g = Graph::<f32>::inference();
            let qv = g.input(Tensor::new(vec![3, 4], q.clone()).unwrap());
            let kv = g.input(Tensor::new(vec![3, 4], k.clone()).unwrap());
            let vv = g.input(Tensor::new(vec![3, 4], v).unwrap());
            let o = g.attention(qv, kv, vv, spec.clone()).unwrap();
            g.value(o).clone()
        };
        let base = run(v.clone());
        let mut v2 = v.clone();
        for x in &mut v2[8..] {
            *x += 10.0;
        }
        let pert = run(v2);
        assert_eq!(&base.data()[..8], &pert.data()[..8]);
        assert_ne!(&base.data()[8..], &pert.data()[8..]);
    }
}

//! Central finite-difference gradient checking in `f64`.
//!
//! The check only ever reads forward values, so it is independent of the
//! backward code it validates. Quantities behind `stop_gradient` are held
//! at their base-point values while probing, so the numeric derivative is
//! that of the surrogate the analytic gradient is defined on.

use crate::graph::{AttentionSpec, Graph, Var};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Magnitude below which errors are measured absolutely.
pub const REL_FLOOR: f64 = 1e-2;

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, REL_FLOOR)`.
    pub max_rel_err: f64,
    pub worst: Option<(usize, usize, f64, f64)>,
    pub checked: usize,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Compare analytic gradients of `f(inputs)` against central differences
/// with step `h`. `f` must build a scalar loss from the leaf vars it is given
/// and must be deterministic (fixed dropout masks etc).
pub fn check<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> GradCheck
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = f(&mut g, &vars);
    let stopped = g.stopped_values().to_vec();
    let grads = g.backward(loss).expect("scalar loss");
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| {
            grads
                .wrt(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect();

    let eval = |ins: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::replaying(stopped.clone());
        let vars: Vec<Var> = ins.iter().map(|t| g.leaf(t.clone())).collect();
        let l = f(&mut g, &vars);
        g.value(l).item()
    };

    let mut report = GradCheck {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for i in 0..inputs.len() {
        for j in 0..inputs[i].len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let up = eval(&work);
            work[i].data_mut()[j] = orig - h;
            let down = eval(&work);
            work[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[i].data()[j];
            let e = rel_err(a, numeric);
            report.checked += 1;
            if e >= report.max_rel_err {
                report.max_rel_err = e;
                report.worst = Some((i, j, a, numeric));
            }
        }
    }
    report
}

/// Finite-difference check of parameter gradients. At most `per_param`
/// entries of each parameter are probed (evenly strided).
pub fn check_params<F>(store: &ParamStore<f64>, h: f64, per_param: usize, f: F) -> GradCheck
where
    F: for<'s> Fn(&mut Graph<'s, f64>, &'s ParamStore<f64>) -> Var,
{
    let (grads, stopped) = {
        let mut g = Graph::new();
        let loss = f(&mut g, store);
        let stopped = g.stopped_values().to_vec();
        (g.backward(loss).expect("scalar loss"), stopped)
    };
    let eval = |s: &ParamStore<f64>| -> f64 {
        let mut g = Graph::replaying(stopped.clone());
        let l = f(&mut g, s);
        g.value(l).item()
    };
    let mut work = store.clone();
    let mut report = GradCheck {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
    };
    for id in store.ids() {
        let n = store.value(id).len();
        let stride = (n / per_param.max(1)).max(1);
        for j in (0..n).step_by(stride).take(per_param) {
            let orig = work.value(id).data()[j];
            work.value_mut(id).data_mut()[j] = orig + h;
            let up = eval(&work);
            work.value_mut(id).data_mut()[j] = orig - h;
            let down = eval(&work);
            work.value_mut(id).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = grads.param(id).map_or(0.0, |g| g.data()[j]);
            let e = rel_err(a, numeric);
            report.checked += 1;
            if e >= report.max_rel_err {
                report.max_rel_err = e;
                report.worst = Some((id.index(), j, a, numeric));
            }
        }
    }
    report
}

/// Result of checking one op over several randomized trials.
#[derive(Clone, Debug)]
pub struct OpReport {
    pub op: &'static str,
    pub trials: usize,
    pub max_rel_err: f64,
}

type Builder = fn(&mut Graph<'_, f64>, &[Var], &mut OpCase) -> Var;

/// Random shapes and fixed auxiliaries for one trial.
pub struct OpCase {
    pub rows: usize,
    pub cols: usize,
    pub inner: usize,
    pub seed: u64,
}

fn weighted_sum(g: &mut Graph<'_, f64>, y: Var, seed: u64) -> Var {
    let shape = g.shape(y).to_vec();
    let mut rng = Rng::new(seed ^ 0x5eed);
    let n: usize = shape.iter().product();
    let w = Tensor::new(shape, (0..n).map(|_| rng.normal()).collect()).expect("shape");
    let w = g.input(w);
    let p = g.mul(y, w).expect("same shape");
    g.sum(p)
}

fn random(rng: &mut Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| scale * rng.normal()).collect(),
    )
    .expect("shape")
}

/// Finite-difference check of every differentiable op on `trials`
/// randomized small shapes each.
pub fn op_suite(trials: usize, seed: u64, h: f64) -> Vec<OpReport> {
    type ShapeFn = fn(&OpCase) -> Vec<Vec<usize>>;
    let unary: ShapeFn = |c| vec![vec![c.rows, c.cols]];
    let binary: ShapeFn = |c| vec![vec![c.rows, c.cols], vec![c.rows, c.cols]];
    let cases: Vec<(&'static str, ShapeFn, Builder)> = vec![
        (
            "matmul",
            |c| vec![vec![c.rows, c.inner], vec![c.inner, c.cols]],
            |g, v, _| g.matmul(v[0], v[1]).unwrap(),
        ),
        ("add", binary, |g, v, _| g.add(v[0], v[1]).unwrap()),
        ("sub", binary, |g, v, _| g.sub(v[0], v[1]).unwrap()),
        ("mul", binary, |g, v, _| g.mul(v[0], v[1]).unwrap()),
        (
            "add_row",
            |c| vec![vec![c.rows, c.cols], vec![c.cols]],
            |g, v, _| g.add_row(v[0], v[1]).unwrap(),
        ),
        ("scale", unary, |g, v, _| g.scale(v[0], -1.7)),
        (
            "concat_cols",
            |c| vec![vec![c.rows, c.cols], vec![c.rows, c.inner]],
            |g, v, _| g.concat_cols(&[v[0], v[1]]).unwrap(),
        ),
        ("rows", unary, |g, v, c| {
            let end = c.rows;
            g.rows(v[0], end / 2, end).unwrap()
        }),
        (
            "embedding",
            |c| vec![vec![c.inner, c.cols]],
            |g, v, c| {
                let mut rng = Rng::new(c.seed);
                let ids: Vec<usize> = (0..c.rows).map(|_| rng.below(c.inner)).collect();
                g.embedding(v[0], &ids).unwrap()
            },
        ),
        ("sigmoid", unary, |g, v, _| g.sigmoid(v[0])),
        ("elu", unary, |g, v, _| g.elu(v[0])),
        ("gelu", unary, |g, v, _| g.gelu(v[0])),
        ("softmax", unary, |g, v, _| g.softmax(v[0]).unwrap()),
        ("log_softmax", unary, |g, v, _| g.log_softmax(v[0]).unwrap()),
        (
            "layer_norm",
            |c| vec![vec![c.rows, c.cols + 2], vec![c.cols + 2], vec![c.cols + 2]],
            |g, v, _| g.layer_norm(v[0], v[1], v[2]).unwrap(),
        ),
        (
            "attention",
            |c| {
                let d = 4 * c.inner.min(2);
                vec![
                    vec![2 * c.rows, d],
                    vec![2 * c.cols, d],
                    vec![2 * c.cols, d],
                ]
            },
            |g, v, c| {
                let heads = 2;
                let spec = AttentionSpec::new(2, c.rows, c.cols, heads)
                    .with_key_lens(vec![c.cols, (c.cols + 1) / 2]);
                g.attention(v[0], v[1], v[2], spec).unwrap()
            },
        ),
        (
            "attention_causal",
            |c| {
                let d = 4;
                vec![
                    vec![2 * c.rows, d],
                    vec![2 * c.rows, d],
                    vec![2 * c.rows, d],
                ]
            },
            |g, v, c| {
                let spec = AttentionSpec::new(2, c.rows, c.rows, 2).causal();
                g.attention(v[0], v[1], v[2], spec).unwrap()
            },
        ),
        (
            "attention_shared_keys",
            |c| {
                let d = 4;
                vec![vec![3 * c.rows, d], vec![2 * c.cols, d], vec![2 * c.cols, d]]
            },
            |g, v, c| {
                let spec = AttentionSpec::new(3, c.rows, c.cols, 2)
                    .with_key_groups(vec![1, 0, 1])
                    .with_key_lens(vec![c.cols, (c.cols + 1) / 2]);
                g.attention(v[0], v[1], v[2], spec).unwrap()
            },
        ),
        ("dropout", unary, |g, v, c| {
            let mut rng = Rng::new(c.seed);
            g.dropout(v[0], 0.3, &mut rng).unwrap()
        }),
        ("stop_gradient", binary, |g, v, _| {
            // x * sg(y) + sg(x) * y: each input sees only its own path.
            let sx = g.stop_gradient(v[0]);
            let sy = g.stop_gradient(v[1]);
            let a = g.mul(v[0], sy).unwrap();
            let b = g.mul(sx, v[1]).unwrap();
            g.add(a, b).unwrap()
        }),
        ("sum", unary, |g, v, _| g.sum(v[0])),
        ("mean", unary, |g, v, _| g.mean(v[0])),
        ("sum_sq", unary, |g, v, _| g.sum_sq(v[0])),
        ("cross_entropy", unary, |g, v, c| {
            let mut rng = Rng::new(c.seed);
            let t: Vec<usize> = (0..c.rows).map(|_| rng.below(c.cols)).collect();
            g.cross_entropy(v[0], &t).unwrap()
        }),
    ];

    let mut rng = Rng::new(seed);
    let mut out = Vec::new();
    for (name, shapes, build) in cases {
        // Layer norm is scale invariant but its curvature grows as 1/std^3,
        // so unit-scale rows put central-difference truncation error near the
        // tolerance. Wider, larger-scale rows test the same function.
        let input_scale = if name == "layer_norm" { 4.0 } else { 1.0 };
        // ELU's second derivative jumps at 0; a difference stencil straddling
        // the kink measures that jump, not the gradient.
        let kink_margin = if name == "elu" { 10.0 * h } else { 0.0 };
        let mut worst = 0.0f64;
        for _ in 0..trials {
            let case = OpCase {
                rows: 1 + rng.below(4),
                cols: 2 + rng.below(4),
                inner: 1 + rng.below(4),
                seed: rng.next_u64(),
            };
            let inputs: Vec<Tensor<f64>> = shapes(&case)
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let mut t = random(&mut rng, s, if i == 0 { input_scale } else { 1.0 });
                    for x in t.data_mut() {
                        while x.abs() < kink_margin {
                            *x = rng.normal();
                        }
                    }
                    t
                })
                .collect();
            let seed = case.seed;
            let report = check(&inputs, h, |g, v| {
                let mut c = OpCase { ..case };
                let y = build(g, v, &mut c);
                if g.shape(y) == [1] {
                    y
                } else {
                    weighted_sum(g, y, seed)
                }
            });
            worst = worst.max(report.max_rel_err);
        }
        out.push(OpReport {
            op: name,
            trials,
            max_rel_err: worst,
        });
    }
    out
}

//! K-Means with k-means++ seeding and full-batch or mini-batch updates.

use ace_tensor::{Rng, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::par::Exec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KMeansConfig {
    pub k: usize,
    pub n_iters: usize,
    /// Rows per update; `0` or anything `>= n` means full-batch Lloyd.
    pub batch_size: usize,
    /// Independent seedings; the run with the lowest inertia is kept.
    pub n_init: usize,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        KMeansConfig {
            k: 16,
            n_iters: 100,
            batch_size: 0,
            n_init: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansModel {
    pub centers: Tensor<f32>,
    pub seed: u64,
    pub n_iters: usize,
}

impl KMeansModel {
    pub fn k(&self) -> usize {
        self.centers.rows()
    }

    pub fn dim(&self) -> usize {
        self.centers.cols()
    }
}

pub(crate) fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

/// Index of the nearest center and its squared distance; ties go to the
/// lowest index.
pub(crate) fn nearest(x: &[f32], centers: &Tensor<f32>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for c in 0..centers.rows() {
        let d = sq_dist(x, centers.row(c));
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn check_dims(x: &Tensor<f32>, dim: usize) -> Result<()> {
    if x.shape().len() != 2 || x.cols() != dim {
        return Err(CoreError::invalid(format!(
            "expected rows of dim {dim}, got shape {:?}",
            x.shape()
        )));
    }
    Ok(())
}

/// Greedy k-means++ seeding: first center uniform; each later center is
/// the best (lowest resulting potential) of `2 + ln k` candidates drawn
/// proportionally to the squared distance from the nearest chosen center.
pub fn kmeans_plus_plus(x: &Tensor<f32>, k: usize, rng: &mut Rng) -> Tensor<f32> {
    let n = x.rows();
    let trials = 2 + (k as f64).ln().floor() as usize;
    let mut chosen = vec![rng.below(n)];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), x.row(chosen[0]))).collect();
    while chosen.len() < k {
        let mut best: Option<(f64, usize, Vec<f64>)> = None;
        for _ in 0..trials {
            let cand = rng.weighted_index(&d2);
            let next: Vec<f64> = d2.iter().enumerate().map(|(i, &d)| d.min(sq_dist(x.row(i), x.row(cand)))).collect();
            let pot: f64 = next.iter().sum();
            if best.as_ref().is_none_or(|b| pot < b.0) {
                best = Some((pot, cand, next));
            }
        }
        let (_, cand, next) = best.expect("at least two trials");
        chosen.push(cand);
        d2 = next;
    }
    let data = chosen.iter().flat_map(|&i| x.row(i).iter().copied()).collect();
    Tensor::new(vec![k, x.cols()], data).expect("k rows")
}

/// Reseed every empty cluster with the point farthest from its current
/// center; each point is used at most once.
fn reseed_empty(x: &Tensor<f32>, centers: &mut Tensor<f32>, counts: &[usize], dists: &mut [f64]) {
    let d = x.cols();
    for c in 0..counts.len() {
        if counts[c] > 0 {
            continue;
        }
        let far = (0..dists.len()).fold(0, |b, i| if dists[i] > dists[b] { i } else { b });
        centers.data_mut()[c * d..(c + 1) * d].copy_from_slice(x.row(far));
        dists[far] = -1.0;
    }
}

/// Run full-batch Lloyd iterations from `init` until assignments stop
/// changing or `n_iters` is reached.
pub fn lloyd(x: &Tensor<f32>, init: Tensor<f32>, n_iters: usize, exec: Exec) -> Tensor<f32> {
    let (n, d, k) = (x.rows(), x.cols(), init.rows());
    let mut centers = init;
    let mut prev: Option<Vec<usize>> = None;
    for _ in 0..n_iters {
        let near = exec.map_range(n, |i| nearest(x.row(i), &centers));
        let assign: Vec<usize> = near.iter().map(|p| p.0).collect();
        if prev.as_ref() == Some(&assign) {
            break;
        }
        let mut sums = vec![0f64; k * d];
        let mut counts = vec![0usize; k];
        for (i, &c) in assign.iter().enumerate() {
            counts[c] += 1;
            for (s, &v) in sums[c * d..(c + 1) * d].iter_mut().zip(x.row(i)) {
                *s += v as f64;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..d {
                    centers.data_mut()[c * d + j] = (sums[c * d + j] / counts[c] as f64) as f32;
                }
            }
        }
        let mut dists: Vec<f64> = near.iter().map(|p| p.1).collect();
        if counts.contains(&0) {
            reseed_empty(x, &mut centers, &counts, &mut dists);
            prev = None;
        } else {
            prev = Some(assign);
        }
    }
    centers
}

/// Mini-batch updates with per-center learning rate `1 / count`.
fn minibatch(x: &Tensor<f32>, init: Tensor<f32>, n_iters: usize, batch: usize, rng: &mut Rng, exec: Exec) -> Tensor<f32> {
    let (n, d, k) = (x.rows(), x.cols(), init.rows());
    let mut centers = init;
    let mut counts = vec![0usize; k];
    for _ in 0..n_iters {
        let idx: Vec<usize> = (0..batch).map(|_| rng.below(n)).collect();
        let near = exec.map(&idx, |&i| nearest(x.row(i), &centers));
        for (&i, &(c, _)) in idx.iter().zip(&near) {
            counts[c] += 1;
            let eta = 1.0 / counts[c] as f64;
            for (cv, &xv) in centers.data_mut()[c * d..(c + 1) * d].iter_mut().zip(x.row(i)) {
                *cv = ((1.0 - eta) * *cv as f64 + eta * xv as f64) as f32;
            }
        }
        if counts.contains(&0) {
            let mut dists: Vec<f64> = vec![-1.0; n];
            for (&i, &(_, dd)) in idx.iter().zip(&near) {
                dists[i] = dists[i].max(dd);
            }
            reseed_empty(x, &mut centers, &counts, &mut dists);
        }
    }
    centers
}

pub fn kmeans_fit(x: &Tensor<f32>, cfg: &KMeansConfig, seed: u64, exec: Exec) -> Result<KMeansModel> {
    if x.shape().len() != 2 {
        return Err(CoreError::invalid(format!("kmeans input must be 2-D, got {:?}", x.shape())));
    }
    let n = x.rows();
    if cfg.k == 0 || n < cfg.k {
        return Err(CoreError::invalid(format!("kmeans needs 1 <= K <= n, got K={} n={n}", cfg.k)));
    }
    let root = Rng::new(seed);
    let mut best: Option<(f64, Tensor<f32>)> = None;
    for run in 0..cfg.n_init.max(1) {
        let mut rng = root.substream(&[run as u64]);
        let init = kmeans_plus_plus(x, cfg.k, &mut rng);
        let centers = if cfg.batch_size == 0 || cfg.batch_size >= n {
            lloyd(x, init, cfg.n_iters, exec)
        } else {
            minibatch(x, init, cfg.n_iters, cfg.batch_size, &mut rng, exec)
        };
        let score = inertia(x, &centers, exec);
        if best.as_ref().is_none_or(|b| score < b.0) {
            best = Some((score, centers));
        }
    }
    let centers = best.expect("n_init >= 1").1;
    Ok(KMeansModel {
        centers,
        seed,
        n_iters: cfg.n_iters,
    })
}

/// Sum of squared distances from each row to its nearest center.
pub fn inertia(x: &Tensor<f32>, centers: &Tensor<f32>, exec: Exec) -> f64 {
    exec.map_range(x.rows(), |i| nearest(x.row(i), centers).1).iter().sum()
}

pub fn kmeans_assign(model: &KMeansModel, x: &Tensor<f32>, exec: Exec) -> Result<Vec<usize>> {
    check_dims(x, model.dim())?;
    Ok(exec.map_range(x.rows(), |i| nearest(x.row(i), &model.centers).0))
}

/// Subtract each row's assigned center. Returns the assignments as well.
pub fn center_residuals(x: &Tensor<f32>, model: &KMeansModel, exec: Exec) -> Result<(Vec<usize>, Tensor<f32>)> {
    let assign = kmeans_assign(model, x, exec)?;
    let d = x.cols();
    let mut out = x.clone();
    for (i, &c) in assign.iter().enumerate() {
        for (o, &cv) in out.data_mut()[i * d..(i + 1) * d].iter_mut().zip(model.centers.row(c)) {
            *o -= cv;
        }
    }
    Ok((assign, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f32]]) -> Tensor<f32> {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn single_cluster_is_the_mean() {
        let x = m(&[&[0.0, 0.0], &[2.0, 4.0], &[4.0, 2.0]]);
        let km = kmeans_fit(&x, &KMeansConfig { k: 1, n_iters: 10, ..Default::default() }, 1, Exec::Sequential).unwrap();
        assert_eq!(km.centers.data(), &[2.0, 2.0]);
        assert_eq!(kmeans_assign(&km, &x, Exec::Sequential).unwrap(), vec![0, 0, 0]);
    }

    #[test]
    fn ties_and_exact_hits() {
        let km = KMeansModel {
            centers: m(&[&[9.0, 9.0], &[8.0, 8.0], &[-1.0, 0.0], &[5.0, 5.0], &[7.0, 7.0], &[1.0, 0.0]]),
            seed: 0,
            n_iters: 0,
        };
        let x = m(&[&[5.0, 5.0], &[0.0, 0.0]]);
        assert_eq!(kmeans_assign(&km, &x, Exec::Sequential).unwrap(), vec![3, 2]);
    }

    #[test]
    fn rejects_too_few_points_and_wrong_dim() {
        let x = m(&[&[0.0, 0.0]]);
        assert!(kmeans_fit(&x, &KMeansConfig { k: 2, ..Default::default() }, 1, Exec::Sequential).is_err());
        let km = kmeans_fit(&x, &KMeansConfig { k: 1, ..Default::default() }, 1, Exec::Sequential).unwrap();
        assert!(kmeans_assign(&km, &m(&[&[0.0, 0.0, 1.0]]), Exec::Sequential).is_err());
    }

    #[test]
    fn residuals_restore_the_input() {
        let mut rng = Rng::new(4);
        let x = Tensor::new(vec![60, 3], (0..180).map(|_| rng.normal() as f32).collect()).unwrap();
        let km = kmeans_fit(&x, &KMeansConfig { k: 4, n_iters: 50, ..Default::default() }, 2, Exec::Sequential).unwrap();
        let (assign, r) = center_residuals(&x, &km, Exec::Sequential).unwrap();
        for i in 0..60 {
            for j in 0..3 {
                let back = r.row(i)[j] + km.centers.row(assign[i])[j];
                assert!((back - x.row(i)[j]).abs() <= f32::EPSILON * x.row(i)[j].abs().max(1.0));
            }
        }
    }

    #[test]
    fn identical_points_still_fill_every_cluster() {
        let x = Tensor::new(vec![10, 2], vec![1.0; 20]).unwrap();
        let km = kmeans_fit(&x, &KMeansConfig { k: 3, n_iters: 5, ..Default::default() }, 1, Exec::Sequential).unwrap();
        assert!(km.centers.is_all_finite());
        let km = kmeans_fit(&x, &KMeansConfig { k: 3, n_iters: 5, batch_size: 4, n_init: 1 }, 1, Exec::Sequential).unwrap();
        assert!(km.centers.is_all_finite());
    }
}

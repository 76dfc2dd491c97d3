use ace_tensor::gradcheck::op_suite;
use ace_tensor::{Graph, Rng, Tensor};
use proptest::prelude::*;

#[test]
fn every_op_matches_finite_differences() {
    for seed in 0..6 {
        let reports = op_suite(20, seed, 1e-3);
        let failed: Vec<_> = reports.iter().filter(|r| r.max_rel_err >= 1e-4).collect();
        assert!(
            failed.is_empty(),
            "seed {seed}, ops over tolerance: {failed:?}"
        );
    }
}

fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k)
                .map(|p| a.data()[i * k + p] * b.data()[p * n + j])
                .sum();
        }
    }
    out
}

fn random(rng: &mut Rng, r: usize, c: usize) -> Tensor<f64> {
    Tensor::new(vec![r, c], (0..r * c).map(|_| rng.normal()).collect()).unwrap()
}

proptest! {
    #[test]
    fn matmul_matches_triple_loop(m in 1usize..9, k in 1usize..9, n in 1usize..9, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let a = random(&mut rng, m, k);
        let b = random(&mut rng, k, n);
        let got = a.matmul(&b).unwrap();
        for (x, y) in got.data().iter().zip(naive_matmul(&a, &b)) {
            prop_assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn softmax_rows_are_distributions(r in 1usize..6, c in 1usize..8, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let x = random(&mut rng, r, c).map(|v| 30.0 * v);
        let mut g = Graph::<f64>::inference();
        let v = g.input(x);
        let s = g.softmax(v).unwrap();
        for row in g.value(s).data().chunks(c) {
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

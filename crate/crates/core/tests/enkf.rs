use ensda::da::{enkf_update, perturb_observations, EnsembleMatrix, ObservationSet, Perturbation};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

/// Textbook EnKF: explicit `P = AAᵀ/(M−1)`, `K = PHᵀ(HPHᵀ+R)⁻¹`.
fn dense_oracle(cols: &[Vec<f64>], ids: &[u32], obs: &ObservationSet, cycle: u32, seed: u64, perturb: bool) -> Vec<Vec<f64>> {
    let n = cols[0].len();
    let m = cols.len();
    let x = DMatrix::from_fn(n, m, |i, j| cols[j][i]);
    let mean = x.column_mean();
    let a = DMatrix::from_fn(n, m, |i, j| x[(i, j)] - mean[i]);
    let p = &a * a.transpose() / (m as f64 - 1.0);
    let k = obs.len();
    let h = DMatrix::from_fn(k, n, |r, c| if obs.indices()[r] == c { 1.0 } else { 0.0 });
    let r = DMatrix::from_diagonal(&DVector::from_column_slice(obs.variances()));
    let s = &h * &p * h.transpose() + r;
    let gain = &p * h.transpose() * s.try_inverse().expect("invertible innovation covariance");
    (0..m)
        .map(|j| {
            let y = if perturb {
                perturb_observations(obs, ids[j], cycle, seed)
            } else {
                obs.values().to_vec()
            };
            let xj = x.column(j).into_owned();
            let innov = DVector::from_vec(y) - &h * &xj;
            (xj + &gain * innov).iter().copied().collect()
        })
        .collect()
}

fn case() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<usize>, Vec<f64>, Vec<f64>)> {
    (1usize..7, 3usize..9).prop_flat_map(|(n, m)| {
        let cols = prop::collection::vec(prop::collection::vec(-5.0f64..5.0, n), m);
        let idx = prop::sample::subsequence((0..n).collect::<Vec<_>>(), 1..=n);
        (cols, idx).prop_flat_map(|(cols, idx)| {
            let k = idx.len();
            (
                Just(cols),
                Just(idx),
                prop::collection::vec(-5.0f64..5.0, k),
                prop::collection::vec(0.1f64..4.0, k),
            )
        })
    })
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * (1.0 + y.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn matches_dense_textbook_form((cols, idx, y, var) in case(), seed in any::<u64>(), cycle in 0u32..50, perturb in any::<bool>()) {
        let ids: Vec<u32> = (0..cols.len() as u32).map(|i| i * 3 + 1).collect();
        let obs = ObservationSet::new(y, idx, var).unwrap();
        let ens = EnsembleMatrix::with_member_ids(ids.clone(), cols.clone()).unwrap();
        let mode = if perturb { Perturbation::Stochastic } else { Perturbation::Disabled };
        let got = enkf_update(&ens, &obs, cycle, seed, mode).unwrap().into_columns();
        let want = dense_oracle(&cols, &ids, &obs, cycle, seed, perturb);
        for ((id, g), (w, expected_id)) in got.iter().zip(want.iter().zip(&ids)) {
            prop_assert_eq!(id, expected_id);
            prop_assert!(close(g, w, 1e-8), "member {}: {:?} vs {:?}", id, g, w);
        }
    }

    /// Each member's result depends on its id, not on its column position.
    #[test]
    fn column_order_is_irrelevant((cols, idx, y, var) in case(), seed in any::<u64>(), rot in 0usize..8) {
        let m = cols.len();
        let ids: Vec<u32> = (0..m as u32).collect();
        let obs = ObservationSet::new(y, idx, var).unwrap();
        let ens = EnsembleMatrix::with_member_ids(ids.clone(), cols.clone()).unwrap();
        let base = enkf_update(&ens, &obs, 3, seed, Perturbation::Stochastic).unwrap().into_columns();
        let r = rot % m;
        let mut ids2 = ids.clone();
        ids2.rotate_left(r);
        let mut cols2 = cols.clone();
        cols2.rotate_left(r);
        let ens2 = EnsembleMatrix::with_member_ids(ids2, cols2).unwrap();
        let mut moved = enkf_update(&ens2, &obs, 3, seed, Perturbation::Stochastic).unwrap().into_columns();
        moved.sort_by_key(|(id, _)| *id);
        for ((ia, a), (ib, b)) in base.iter().zip(&moved) {
            prop_assert_eq!(ia, ib);
            prop_assert!(close(a, b, 1e-10));
        }
    }

    /// Without perturbations the analysis mean is the Kalman update of the
    /// background mean.
    #[test]
    fn unperturbed_mean_follows_kalman((cols, idx, y, var) in case()) {
        let m = cols.len();
        let n = cols[0].len();
        let obs = ObservationSet::new(y, idx, var).unwrap();
        let ens = EnsembleMatrix::new(cols.clone()).unwrap();
        let out = enkf_update(&ens, &obs, 0, 0, Perturbation::Disabled).unwrap();
        let got_mean: Vec<f64> = (0..n).map(|i| (0..m).map(|j| out.column(j)[i]).sum::<f64>() / m as f64).collect();
        let x =DMatrix::from_fn(n, m, |i, j| cols[j][i]);
        let mu = x.column_mean();
        let a = DMatrix::from_fn(n, m, |i, j| x[(i, j)] - mu[i]);
        let p = &a * a.transpose() / (m as f64 - 1.0);
        let h = DMatrix::from_fn(obs.len(), n, |r, c| if obs.indices()[r] == c { 1.0 } else { 0.0 });
        let s = &h * &p * h.transpose() + DMatrix::from_diagonal(&DVector::from_column_slice(obs.variances()));
        let k = &p * h.transpose() * s.try_inverse().unwrap();
        let want = &mu + k * (DVector::from_column_slice(obs.values()) - &h * &mu);
        prop_assert!(close(&got_mean, want.as_slice(), 1e-8));
    }

    #[test]
    fn huge_observation_error_leaves_background((cols, idx, y, var) in case()) {
        let obs = ObservationSet::new(y, idx, var.iter().map(|_| 1e14).collect()).unwrap();
        let ens = EnsembleMatrix::new(cols.clone()).unwrap();
        let out = enkf_update(&ens, &obs, 0, 0, Perturbation::Disabled).unwrap();
        for (j, c) in cols.iter().enumerate() {
            prop_assert!(close(out.column(j), c, 1e-9));
        }
    }
}

#[test]
fn same_key_same_result() {
    let cols = vec![vec![0.0, 1.0], vec![1.0, 0.5], vec![-1.0, 2.0]];
    let obs = ObservationSet::new(vec![0.3], vec![0], vec![0.5]).unwrap();
    let ens = EnsembleMatrix::new(cols).unwrap();
    let a = enkf_update(&ens, &obs, 2, 9, Perturbation::Stochastic).unwrap();
    let b = enkf_update(&ens, &obs, 2, 9, Perturbation::Stochastic).unwrap();
    let c = enkf_update(&ens, &obs, 3, 9, Perturbation::Stochastic).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

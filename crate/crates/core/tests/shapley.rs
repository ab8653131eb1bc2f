use crs_core::explain::{shap_exact, shap_sampled, shap_values};
use crs_core::Classifier;
use ndarray::{array, Array1, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Nonlinear model with pairwise interactions and a saturating link.
fn interacting(r: ArrayView1<f64>) -> f64 {
    let d = r.len();
    let mut z = 0.3;
    for j in 0..d {
        z += (j as f64 - d as f64 / 2.0) * 0.2 * r[j];
    }
    z += 0.8 * r[0] * r[1] - 0.5 * r[2] * r[d - 1] + 0.3 * r[1].max(r[3]);
    sigmoid(z)
}

fn background(rng: &mut ChaCha8Rng, rows: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, d), |_| rng.random_range(-1.5..1.5))
}

/// Value of a coalition: mean output with absent features drawn from the
/// background rows.
fn coalition_value(f: &dyn Fn(ArrayView1<f64>) -> f64, x: ArrayView1<f64>, bg: &Array2<f64>, present: &[bool]) -> f64 {
    let mut total = 0.0;
    for b in bg.rows() {
        let z: Array1<f64> = (0..x.len()).map(|j| if present[j] { x[j] } else { b[j] }).collect();
        total += f(z.view());
    }
    total / bg.nrows() as f64
}

/// Average marginal contribution over all orderings of the features.
fn permutation_oracle(f: &dyn Fn(ArrayView1<f64>) -> f64, x: ArrayView1<f64>, bg: &Array2<f64>) -> Vec<f64> {
    let d = x.len();
    let mut orders: Vec<Vec<usize>> = vec![vec![]];
    for _ in 0..d {
        orders = orders
            .into_iter()
            .flat_map(|o| (0..d).filter(|j| !o.contains(j)).map(|j| [o.clone(), vec![j]].concat()).collect::<Vec<_>>())
            .collect();
    }
    let mut phi = vec![0.0; d];
    for order in &orders {
        let mut present = vec![false; d];
        let mut prev = coalition_value(f, x, bg, &present);
        for &j in order {
            present[j] = true;
            let v = coalition_value(f, x, bg, &present);
            phi[j] += v - prev;
            prev = v;
        }
    }
    phi.iter().map(|p| p / orders.len() as f64).collect()
}

#[test]
fn exact_matches_permutation_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for d in [3, 4] {
        let f = |r: ArrayView1<f64>| sigmoid(r[0] * r[1] + 0.5 * r[2] - 0.7 * r[d - 1] * r[0]);
        for _ in 0..5 {
            let bg = background(&mut rng, 7, d);
            let x: Array1<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
            let exact = shap_exact(&f, x.view(), bg.view()).unwrap();
            let oracle = permutation_oracle(&f, x.view(), &bg);
            for j in 0..d {
                assert!((exact.phi[j] - oracle[j]).abs() < 1e-12, "d={d} j={j}");
            }
            assert!(exact.efficiency_residual() < 1e-6);
        }
    }
}

#[test]
fn efficiency_holds_in_exact_mode() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for d in [4, 6, 9, 12] {
        let bg = background(&mut rng, 10, d);
        let x: Array1<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r = shap_values(&interacting, x.view(), bg.view(), 0, 0).unwrap();
        assert!(r.exact);
        assert!(r.efficiency_residual() < 1e-6, "d={d}");
        assert!((r.fx - interacting(x.view())).abs() < 1e-12);
    }
}

#[test]
fn sampled_converges_to_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let d = 10;
    let bg = background(&mut rng, 12, d);
    let x: Array1<f64> = (0..d).map(|_| rng.random_range(-1.5..1.5)).collect();
    let exact = shap_exact(&interacting, x.view(), bg.view()).unwrap();
    let max_err = |budget: usize| {
        let s = shap_sampled(&interacting, x.view(), bg.view(), budget, 17).unwrap();
        assert!(s.efficiency_residual() < 1e-9);
        s.phi.iter().zip(&exact.phi).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    };
    let errors: Vec<f64> = [40, 400, 4000, 40000].iter().map(|&b| max_err(b)).collect();
    assert!(errors[3] < 0.01, "{errors:?}");
    assert!(errors[3] < errors[0], "{errors:?}");
}

#[test]
fn linear_model_closed_form() {
    let w = [0.7, -1.2, 0.0, 2.5];
    let f = move |r: ArrayView1<f64>| 0.1 + (0..4).map(|j| w[j] * r[j]).sum::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let bg = background(&mut rng, 9, 4);
    let x = array![1.0, -0.5, 3.0, 0.25];
    let mean = bg.mean_axis(ndarray::Axis(0)).unwrap();
    let exact = shap_exact(&f, x.view(), bg.view()).unwrap();
    let sampled = shap_sampled(&f, x.view(), bg.view(), 64, 5).unwrap();
    for j in 0..4 {
        let want = w[j] * (x[j] - mean[j]);
        assert!((exact.phi[j] - want).abs() < 1e-12);
        assert!((sampled.phi[j] - want).abs() < 1e-9);
    }
}

#[test]
fn symmetry_and_dummy() {
    // Features 0 and 1 enter symmetrically; feature 2 is ignored.
    let f = |r: ArrayView1<f64>| sigmoid(r[0] + r[1] + r[0] * r[1] + 0.5 * r[3]);
    let bg = array![[0.0, 0.0, 5.0, 1.0], [1.0, 1.0, -2.0, 0.0], [-1.0, -1.0, 0.3, 2.0]];
    let x = array![0.8, 0.8, 9.0, -1.0];
    let r = shap_exact(&f, x.view(), bg.view()).unwrap();
    assert!((r.phi[0] - r.phi[1]).abs() < 1e-12);
    assert!(r.phi[2].abs() < 1e-12);
}

#[test]
fn explains_a_fitted_classifier() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = Array2::from_shape_fn((120, 3), |_| rng.random_range(-1.0..1.0));
    let y: Vec<u8> = x.rows().into_iter().map(|r| (2.0 * r[0] + 0.2 * r[1] > 0.0) as u8).collect();
    let model = crs_core::ModelSpec::default_for(crs_core::ModelKind::Logistic).fit("lr", x.view(), &y, &[false; 3]).unwrap();
    let row = array![0.9, 0.1, 0.0];
    let r = shap_exact(&model, row.view(), x.view()).unwrap();
    assert!((r.fx - model.predict_proba(row.view()).unwrap()).abs() < 1e-12);
    let top = (0..3).max_by(|&a, &b| r.phi[a].abs().total_cmp(&r.phi[b].abs())).unwrap();
    assert_eq!(top, 0);
}

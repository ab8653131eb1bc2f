//! Shapley attributions against permutation enumeration and closed forms.

use crs_core::explain::{shap_exact, shap_sampled, shap_values};
use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{ensure, Outcome};

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn interacting(r: ArrayView1<f64>) -> f64 {
    let d = r.len();
    let mut z = 0.3;
    for j in 0..d {
        z += (j as f64 - d as f64 / 2.0) * 0.2 * r[j];
    }
    z += 0.8 * r[0] * r[1] - 0.5 * r[2] * r[d - 1] + 0.3 * r[1].max(r[3]);
    sigmoid(z)
}

fn coalition_value(f: &dyn Fn(ArrayView1<f64>) -> f64, x: ArrayView1<f64>, bg: &Array2<f64>, present: &[bool]) -> f64 {
    let total: f64 = bg
        .rows()
        .into_iter()
        .map(|b| {
            let z: Array1<f64> = (0..x.len()).map(|j| if present[j] { x[j] } else { b[j] }).collect();
            f(z.view())
        })
        .sum();
    total / bg.nrows() as f64
}

/// Mean marginal contribution over every ordering of the features.
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

fn background(rng: &mut ChaCha8Rng, rows: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, d), |_| rng.random_range(-1.5..1.5))
}

fn max_gap(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn shapley_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);

    for d in [3, 4, 5] {
        let f = move |r: ArrayView1<f64>| sigmoid(r[0] * r[1] + 0.5 * r[2] - 0.7 * r[d - 1] * r[0]);
        let bg = background(&mut rng, 6, d);
        let x: Array1<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let exact = shap_exact(&f, x.view(), bg.view())?;
        let gap = max_gap(&exact.phi.to_vec(), &permutation_oracle(&f, x.view(), &bg));
        ensure!(gap < 1e-12, "d={d}: exact differs from permutation enumeration by {gap:e}");
    }

    let mut worst_residual: f64 = 0.0;
    for d in [4, 8, 12] {
        let bg = background(&mut rng, 10, d);
        let x: Array1<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r = shap_values(&interacting, x.view(), bg.view(), 0, 0)?;
        ensure!(r.exact, "d={d} should enumerate");
        worst_residual = worst_residual.max(r.efficiency_residual());
    }
    ensure!(worst_residual < 1e-6, "exact efficiency residual {worst_residual:e}");

    let d = 10;
    let bg = background(&mut rng, 12, d);
    let x: Array1<f64> = (0..d).map(|_| rng.random_range(-1.5..1.5)).collect();
    let exact = shap_exact(&interacting, x.view(), bg.view())?;
    let mut errors = Vec::new();
    for budget in [40, 400, 4000, 40000] {
        let s = shap_sampled(&interacting, x.view(), bg.view(), budget, 17)?;
        errors.push(max_gap(&s.phi.to_vec(), &exact.phi.to_vec()));
    }
    ensure!(errors[3] < 0.01, "sampled error at the largest budget {:.4}", errors[3]);
    ensure!(errors[3] < errors[0], "no convergence: {errors:?}");

    let w = [0.7, -1.2, 0.0, 2.5];
    let linear = move |r: ArrayView1<f64>| 0.1 + (0..4).map(|j| w[j] * r[j]).sum::<f64>();
    let bg = background(&mut rng, 9, 4);
    let x = ndarray::array![1.0, -0.5, 3.0, 0.25];
    let mean = bg.mean_axis(Axis(0)).unwrap_or_default();
    let closed: Vec<f64> = (0..4).map(|j| w[j] * (x[j] - mean[j])).collect();
    let e = shap_exact(&linear, x.view(), bg.view())?;
    let s = shap_sampled(&linear, x.view(), bg.view(), 64, 5)?;
    ensure!(max_gap(&e.phi.to_vec(), &closed) < 1e-12, "exact misses the linear closed form");
    ensure!(max_gap(&s.phi.to_vec(), &closed) < 1e-9, "sampled misses the linear closed form");

    Ok(format!(
        "enumeration matched, residual {worst_residual:.1e}, sampled error {:.4} -> {:.4}, linear closed form matched",
        errors[0], errors[3]
    ))
}

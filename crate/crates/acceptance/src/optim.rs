//! Gradients, boosting split gain and SVM dual optimality.

use crs_core::linear::{gradient, objective, LogisticModel, Penalty};
use crs_core::mlp::MlpModel;
use crs_core::svm::{solve_dual, Kernel};
use crs_core::tree::{best_split, fit_boost_tree, Criterion, Node, TreeConfig};
use ndarray::{array, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{ensure, Failure, Outcome};

const H: f64 = 1e-6;

fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

fn central_difference(params: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut p = params.to_vec();
    (0..params.len())
        .map(|k| {
            p[k] = params[k] + H;
            let up = f(&p);
            p[k] = params[k] - H;
            let down = f(&p);
            p[k] = params[k];
            (up - down) / (2.0 * H)
        })
        .collect()
}

fn random_problem(rng: &mut ChaCha8Rng) -> (Array2<f64>, Vec<u8>) {
    let n = rng.random_range(4..30);
    let d = rng.random_range(1..6);
    let x = Array2::from_shape_fn((n, d), |_| rng.random_range(-2.0..2.0));
    let y = (0..n).map(|i| if i < 2 { i as u8 } else { rng.random_range(0..2) }).collect();
    (x, y)
}

pub fn gradient_fidelity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst: f64 = 0.0;
    for config in 0..25 {
        let (x, y) = random_problem(&mut rng);
        let d = x.ncols();
        let sw: Vec<f64> = (0..y.len()).map(|_| rng.random_range(0.2..3.0)).collect();
        let model = LogisticModel {
            weights: (0..d).map(|_| rng.random_range(-1.5..1.5)).collect(),
            bias: rng.random_range(-1.0..1.0),
            penalty: Penalty::L2,
            lambda: [0.0, 0.01, 1.0, 5.0][config % 4],
        };
        let mut params = model.weights.clone();
        params.push(model.bias);
        let numeric = central_difference(&params, |p| {
            let m = LogisticModel { weights: p[..d].to_vec(), bias: p[d], ..model.clone() };
            objective(&m, x.view(), &y, &sw)
        });
        let (gw, gb) = gradient(&model, x.view(), &y, &sw);
        let mut analytic = gw.to_vec();
        analytic.push(gb);
        let err = relative_error(&analytic, &numeric);
        ensure!(err < 1e-4, "logistic config {config}: relative error {err:e}");
        worst = worst.max(err);
    }

    let (mut checked, mut attempts) = (0, 0);
    while checked < 25 {
        attempts += 1;
        ensure!(attempts < 2000, "no MLP configurations away from ReLU kinks");
        let (x, y) = random_problem(&mut rng);
        let width = rng.random_range(1..8);
        let mut m = MlpModel::init(width, x.ncols(), &mut rng);
        m.b1.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        m.b2 = rng.random_range(-0.5..0.5);
        m.lambda = [0.0, 1e-4, 0.1][checked % 3];
        m.class_weights = [rng.random_range(0.5..3.0), rng.random_range(0.5..3.0)];
        // Finite differences are meaningless across a ReLU kink.
        let pre = x.dot(&m.w1.t()) + &m.b1;
        if pre.iter().any(|v| v.abs() < 1e-3) {
            continue;
        }
        let params = m.params();
        let numeric = central_difference(&params, |p| {
            let mut q = m.clone();
            q.set_params(p);
            q.loss(x.view(), &y)
        });
        let (_, grad) = m.loss_and_gradient(x.view(), &y);
        let err = relative_error(&grad.flatten(), &numeric);
        ensure!(err < 1e-4, "MLP config {checked}: relative error {err:e}");
        worst = worst.max(err);
        checked += 1;
    }
    Ok(format!("25 logistic + 25 MLP configurations, worst relative error {worst:.1e}"))
}

/// Every feature, every midpoint between distinct values, sums from scratch.
fn gain_oracle(x: &Array2<f64>, g: &[f64], h: &[f64], lambda: f64, gamma: f64) -> Option<(usize, f64, f64)> {
    let mut candidates = Vec::new();
    for f in 0..x.ncols() {
        let mut values: Vec<f64> = x.column(f).to_vec();
        values.sort_by(f64::total_cmp);
        values.dedup();
        for w in values.windows(2) {
            let t = (w[0] + w[1]) / 2.0;
            let (mut gl, mut hl, mut gr, mut hr) = (0.0, 0.0, 0.0, 0.0);
            for i in 0..x.nrows() {
                if x[[i, f]] <= t {
                    gl += g[i];
                    hl += h[i];
                } else {
                    gr += g[i];
                    hr += h[i];
                }
            }
            let gain = 0.5 * (gl * gl / (hl + lambda) + gr * gr / (hr + lambda) - (gl + gr).powi(2) / (hl + hr + lambda)) - gamma;
            candidates.push((f, t, gain));
        }
    }
    let best = candidates.iter().map(|c| c.2).fold(f64::NEG_INFINITY, f64::max);
    if !(best > 0.0) {
        return None;
    }
    candidates.into_iter().find(|c| c.2 >= best - 1e-12 * best.abs().max(1.0))
}

pub fn boosting_gain() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1414);
    let mut splits = 0;
    for case in 0..200 {
        let n = rng.random_range(2..=20);
        let d = rng.random_range(1..=3);
        let discrete = case % 2 == 0;
        let x = Array2::from_shape_fn((n, d), |_| if discrete { rng.random_range(0..5) as f64 } else { rng.random_range(-3.0..3.0) });
        let (g, h): (Vec<f64>, Vec<f64>) = (0..n)
            .map(|_| {
                let y = rng.random_range(0..2) as f64;
                let p: f64 = if discrete { [0.25, 0.5, 0.75][rng.random_range(0..3)] } else { rng.random_range(0.01..0.99) };
                (p - y, p * (1.0 - p))
            })
            .unzip();
        let (lambda, gamma) = ([0.0, 0.5, 1.0, 2.0][case % 4], [0.0, 0.0, 0.01][case % 3]);
        let rows: Vec<usize> = (0..n).collect();
        let features: Vec<usize> = (0..d).collect();
        let c = Criterion::Boost { grad: &g, hess: &h, lambda, gamma };
        let got = best_split(x.view(), &rows, &features, &c, 1).map(|s| (s.feature, s.threshold, s.gain));
        match (got, gain_oracle(&x, &g, &h, lambda, gamma)) {
            (None, None) => {}
            (Some(a), Some(b)) => {
                ensure!((a.0, a.1) == (b.0, b.1), "dataset {case}: split {a:?} vs enumeration {b:?}");
                ensure!((a.2 - b.2).abs() <= 1e-12 * b.2.abs().max(1.0), "dataset {case}: gain {} vs {}", a.2, b.2);
                splits += 1;
            }
            other => return Err(Failure(format!("dataset {case}: {other:?}"))),
        }
    }

    let x = array![[0.1], [0.3], [0.9]];
    let g = vec![-0.5, -0.5, 0.5];
    let h = vec![0.25; 3];
    let c = Criterion::Boost { grad: &g, hess: &h, lambda: 1.0, gamma: 0.0 };
    let s = best_split(x.view(), &[0, 1, 2], &[0], &c, 1).ok_or_else(|| Failure("worked example: no split".into()))?;
    ensure!((s.gain - 0.361905).abs() < 1e-6, "worked example gain {}", s.gain);
    let cfg = TreeConfig { max_depth: Some(1), ..Default::default() };
    let tree = fit_boost_tree(x.view(), &g, &h, &[0, 1, 2], 1.0, 0.0, &cfg, &mut ChaCha8Rng::seed_from_u64(0));
    let Node::Split { left, right, .. } = tree else { return Err(Failure("worked example: tree did not split".into())) };
    let (Node::Leaf { value: l, .. }, Node::Leaf { value: r, .. }) = (*left, *right) else {
        return Err(Failure("worked example: children are not leaves".into()));
    };
    ensure!((l - 0.6667).abs() < 1e-4 && (r + 0.4).abs() < 1e-6, "worked example leaves {l}, {r}");
    Ok(format!("200 datasets ({splits} with a split) match enumeration; gain {:.6}, leaves {l:.4}/{r:.4}", s.gain))
}

fn dual_objective(alpha: &[f64], ys: &[f64], k: &Array2<f64>) -> f64 {
    let n = alpha.len();
    let mut quad = 0.0;
    for i in 0..n {
        for j in 0..n {
            quad += alpha[i] * alpha[j] * ys[i] * ys[j] * k[[i, j]];
        }
    }
    alpha.iter().sum::<f64>() - 0.5 * quad
}

fn random_feasible(rng: &mut ChaCha8Rng, ys: &[f64], c: f64) -> Vec<f64> {
    let sparsity = rng.random_range(0.0..0.7);
    let mut a: Vec<f64> = ys.iter().map(|_| if rng.random_bool(sparsity) { 0.0 } else { rng.random_range(0.0..=c) }).collect();
    let side = |a: &[f64], s: f64| a.iter().zip(ys).filter(|(_, y)| **y == s).map(|(v, _)| v).sum::<f64>();
    let (pos, neg) = (side(&a, 1.0), side(&a, -1.0));
    let (heavy, light, sign) = if pos > neg { (pos, neg, 1.0) } else { (neg, pos, -1.0) };
    let shrink = if heavy > 0.0 { light / heavy } else { 1.0 };
    for (v, y) in a.iter_mut().zip(ys) {
        if *y == sign {
            *v *= shrink;
        }
    }
    a
}

pub fn svm_optimality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5050);
    let tol = 1e-6;
    for case in 0..50 {
        let n = rng.random_range(2..=12);
        let d = rng.random_range(1..=3);
        let x = Array2::from_shape_fn((n, d), |_| rng.random_range(-2.0..2.0));
        let mut y: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        y[0] = 0;
        y[1] = 1;
        let ys: Vec<f64> = y.iter().map(|&v| if v == 1 { 1.0 } else { -1.0 }).collect();
        let kernel = if case % 2 == 0 { Kernel::Linear } else { Kernel::Rbf { gamma: rng.random_range(0.1..2.0) } };
        let c = [0.1, 1.0, 10.0][case % 3];
        let sol = solve_dual(x.view(), &y, kernel, c, 1e-8, 1_000_000)?;
        let k = Array2::from_shape_fn((n, n), |(i, j)| kernel.eval(x.row(i), x.row(j)).unwrap_or(f64::NAN));

        let balance: f64 = sol.alpha.iter().zip(&ys).map(|(a, y)| a * y).sum();
        ensure!(balance.abs() < 1e-9 * c.max(1.0), "dataset {case}: sum alpha y = {balance}");
        ensure!(sol.alpha.iter().all(|&a| (0.0..=c).contains(&a)), "dataset {case}: alpha outside the box");
        for i in 0..n {
            let f: f64 = (0..n).map(|j| sol.alpha[j] * ys[j] * k[[i, j]]).sum::<f64>() + sol.bias;
            let (m, a) = (ys[i] * f, sol.alpha[i]);
            let ok = if a <= 1e-12 {
                m >= 1.0 - tol
            } else if a >= c - 1e-12 {
                m <= 1.0 + tol
            } else {
                (m - 1.0).abs() <= tol
            };
            ensure!(ok, "dataset {case} row {i}: alpha {a} with margin {m}");
        }
        let best = dual_objective(&sol.alpha, &ys, &k);
        for trial in 0..1000 {
            let w = dual_objective(&random_feasible(&mut rng, &ys, c), &ys, &k);
            ensure!(w <= best + 1e-9 * best.abs().max(1.0), "dataset {case} trial {trial}: {w} beats {best}");
        }
    }
    Ok("50 datasets satisfy KKT and beat 1,000 feasible points each".into())
}

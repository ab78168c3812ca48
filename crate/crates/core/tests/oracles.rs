//! Checks against values computed independently of the library's own code paths.

// Textbook linear-algebra loops, kept index-based on purpose.
#![allow(clippy::needless_range_loop)]

use dessilbi::data::{gen_sparse_linear, parse_idx_images, parse_idx_labels};
use dessilbi::harness;
use dessilbi::monitor::lipschitz_least_squares;
use dessilbi::optim::{AlphaSchedule, HyperParams, OptimizerState, SplitPolicy, Variant};
use dessilbi::path::inverse_scale_order;
use dessilbi::{stepsize_bound, Activation, GroupScheme, LayerKind, LossKind, Network, ParamId, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;

const W0: ParamId = ParamId { layer: 0, slot: 0 };

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn linear(inputs: usize, outputs: usize) -> Network {
    Network::new(vec![inputs], &[LayerKind::Dense { inputs, outputs, bias: false }], LossKind::Mse).unwrap()
}

/// `X^T X / n` as a dense row-major matrix.
fn gram(x: &Tensor) -> Vec<Vec<f64>> {
    let n = x.shape()[0];
    let p = x.shape()[1];
    let mut g = vec![vec![0.0; p]; p];
    for i in 0..n {
        let r = x.row(i);
        for a in 0..p {
            for b in 0..p {
                g[a][b] += r[a] * r[b] / n as f64;
            }
        }
    }
    g
}

/// Gaussian elimination with partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x
}

/// Largest eigenvalue of a symmetric matrix by cyclic Jacobi rotations.
fn jacobi_max_eig(mut a: Vec<Vec<f64>>) -> f64 {
    let n = a.len();
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off < 1e-26 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i][i]).fold(f64::NEG_INFINITY, f64::max)
}

#[test]
fn linear_mse_gradient_is_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (n, p, k) = (9, 4, 2);
    let x = random_tensor(&[n, p], &mut rng);
    let y = random_tensor(&[n, k], &mut rng);
    let mut net = linear(p, k);
    *net.param_mut(W0) = random_tensor(&[k, p], &mut rng);
    let w = net.param(W0).clone();
    let (_, grads) = net.loss_and_grads(&x, &y).unwrap();

    // dL/dW[o][j] = (1/n) sum_i (x_i . w_o - y_io) x_ij
    let mut expect = vec![0.0; k * p];
    for i in 0..n {
        for o in 0..k {
            let pred: f64 = (0..p).map(|j| w.data()[o * p + j] * x.data()[i * p + j]).sum();
            let r = pred - y.data()[i * k + o];
            for j in 0..p {
                expect[o * p + j] += r * x.data()[i * p + j] / n as f64;
            }
        }
    }
    let got = grads[0].data();
    for (a, b) in got.iter().zip(&expect) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn two_layer_forward_matches_straight_line_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let kinds = [LayerKind::dense(3, 5), LayerKind::activation(Activation::Tanh), LayerKind::dense(5, 2)];
    let net = Network::new(vec![3], &kinds, LossKind::Mse).unwrap().he_init(11);
    let x = random_tensor(&[4, 3], &mut rng);
    let y = random_tensor(&[4, 2], &mut rng);
    let (loss, _) = net.forward(&x, &y).unwrap();

    let w1 = net.param(ParamId { layer: 0, slot: 0 }).data();
    let b1 = net.param(ParamId { layer: 0, slot: 1 }).data();
    let w2 = net.param(ParamId { layer: 2, slot: 0 }).data();
    let b2 = net.param(ParamId { layer: 2, slot: 1 }).data();
    let mut total = 0.0;
    for i in 0..4 {
        let xi = &x.data()[i * 3..i * 3 + 3];
        let h: Vec<f64> = (0..5).map(|o| (b1[o] + (0..3).map(|j| w1[o * 3 + j] * xi[j]).sum::<f64>()).tanh()).collect();
        for o in 0..2 {
            let out = b2[o] + (0..5).map(|j| w2[o * 5 + j] * h[j]).sum::<f64>();
            total += (out - y.data()[i * 2 + o]).powi(2);
        }
    }
    let reference = total / (2.0 * 4.0);
    assert!((loss - reference).abs() < 1e-14 * reference.max(1.0), "{loss} vs {reference}");
}

#[test]
fn noiseless_sparse_linear_is_recovered_by_normal_equations() {
    let ds = gen_sparse_linear(400, 20, 4, f64::INFINITY, 0.3, 5).unwrap();
    let beta = ds.beta_star.clone().unwrap();
    let g = gram(&ds.x);
    let n = ds.len();
    let rhs: Vec<f64> =
        (0..20).map(|j| (0..n).map(|i| ds.x.row(i)[j] * ds.y.data()[i]).sum::<f64>() / n as f64).collect();
    let fit = solve(g, rhs);
    for (a, b) in fit.iter().zip(&beta) {
        assert!((a - b).abs() < 1e-8, "{a} vs {b}");
    }
    assert_eq!(beta.iter().filter(|b| **b != 0.0).count(), 4);
}

/// Writes IDX files byte by byte rather than through any library helper.
fn idx_images(images: &[[u8; 6]]) -> Vec<u8> {
    let mut b = vec![0, 0, 0x08, 0x03];
    b.extend_from_slice(&(images.len() as u32).to_be_bytes());
    b.extend_from_slice(&2u32.to_be_bytes());
    b.extend_from_slice(&3u32.to_be_bytes());
    for img in images {
        b.extend_from_slice(img);
    }
    b
}

#[test]
fn idx_fixture_pixels_and_labels_round_trip() {
    let imgs = [[0, 255, 128, 1, 2, 3], [9, 8, 7, 6, 5, 4]];
    let x = parse_idx_images(&idx_images(&imgs)).unwrap();
    assert_eq!(x.shape(), &[2, 6]);
    for (got, want) in x.data().iter().zip(imgs.iter().flatten()) {
        assert_eq!(*got, *want as f64 / 255.0);
    }
    let labels = [0u8, 0, 0x08, 0x01, 0, 0, 0, 2, 7, 3];
    assert_eq!(parse_idx_labels(&labels).unwrap().data(), &[7.0, 3.0]);

    let mut bad = idx_images(&imgs);
    bad[3] = 0x01;
    let msg = parse_idx_images(&bad).unwrap_err().to_string();
    assert!(msg.contains("0x00000803") || msg.contains("2051") || msg.contains("magic"), "{msg}");
    assert!(parse_idx_images(&[]).is_err());
}

#[test]
fn power_iteration_matches_jacobi_eigenvalue() {
    let ds = gen_sparse_linear(60, 6, 2, 10.0, 0.5, 17).unwrap();
    let oracle = jacobi_max_eig(gram(&ds.x));
    let lip = lipschitz_least_squares(&ds.x);
    assert!((lip - oracle).abs() < 1e-9 * oracle, "{lip} vs {oracle}");

    let hp = HyperParams { kappa: 2.0, nu: 5.0, ..HyperParams::default() };
    let bound = stepsize_bound(lip, &hp).unwrap();
    assert!((bound - 2.0 / (2.0 * (oracle + 0.2))).abs() < 1e-9 * bound);
}

#[test]
fn augmented_gradient_matches_hand_formula() {
    // L(w) = |Xw - y|^2 / (2n) with X = [[1, 2], [3, -1]], y = [1, 0], nu = 2.
    let x = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, -1.0]).unwrap();
    let y = Tensor::new(vec![2, 1], vec![1.0, 0.0]).unwrap();
    let mut net = linear(2, 1);
    *net.param_mut(W0) = Tensor::new(vec![1, 2], vec![0.5, -0.25]).unwrap();
    let split = SplitPolicy::new(&net, &[(0, GroupScheme::PerElement, 1.0)]).unwrap();
    let mut state = OptimizerState::new(net, &split, 0.1).unwrap();
    state.params[0].coupled.as_mut().unwrap().gamma = Tensor::new(vec![1, 2], vec![0.1, 0.3]).unwrap();

    let g = state.grad_augmented(&x, &y, 2.0).unwrap();
    // residuals: 0.5 - 0.5 - 1 = -1 and 1.5 + 0.25 = 1.75
    // X^T r / 2 = [(-1 + 5.25) / 2, (-2 - 1.75) / 2] = [2.125, -1.875]
    // (W - Gamma) / 2 = [0.2, -0.275]
    let gw = g.w[0].data();
    assert!((gw[0] - 2.325).abs() < 1e-14 && (gw[1] + 2.15).abs() < 1e-14, "{gw:?}");
    let gg = g.gamma[0].as_ref().unwrap().data();
    assert!((gg[0] + 0.2).abs() < 1e-14 && (gg[1] - 0.275).abs() < 1e-14, "{gg:?}");
    assert!((g.loss - (1.0 + 1.75f64 * 1.75) / 4.0).abs() < 1e-14);
}

#[test]
fn one_dimensional_quadratic_reaches_a_critical_point() {
    // L(w) = (w - 1)^2 / 2; the coupled objective has its only critical point at w = Gamma = 1.
    let x = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
    let y = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
    let net = linear(1, 1);
    let split = SplitPolicy::new(&net, &[(0, GroupScheme::PerElement, 0.05)]).unwrap();
    let hp = HyperParams {
        kappa: 1.0,
        nu: 1.0,
        alpha: AlphaSchedule::constant(0.1),
        lambda: 0.05,
        variant: Variant::Naive,
        ..HyperParams::default()
    };
    let mut state = OptimizerState::new(net, &split, 0.1).unwrap();
    let grad_norm = |s: &OptimizerState| {
        let w = s.net.param(W0).data()[0];
        let gamma = s.params[0].coupled.as_ref().unwrap().gamma.data()[0];
        ((w - 1.0) + (w - gamma)).hypot(gamma - w)
    };
    // Once Gamma is active the error obeys e+ = [[0.8, 0.1], [0.1, 0.9]] e, whose
    // spectral radius 0.85 + sqrt(0.0125) caps progress at about 2.4e-4 per 200 steps.
    let radius = 0.85 + 0.0125f64.sqrt();
    for _ in 0..200 {
        state.step(&x, &y, &hp).unwrap();
    }
    let at_200 = grad_norm(&state);
    assert!(at_200 < 2.0 * radius.powi(200), "|grad| = {at_200:e} after 200 steps");
    for _ in 200..400 {
        state.step(&x, &y, &hp).unwrap();
    }
    let at_400 = grad_norm(&state);
    assert!(at_400 < 1e-6, "|grad| = {at_400:e} after 400 steps");
    let w = state.net.param(W0).data()[0];
    assert!((w - 1.0).abs() < 1e-6);
}

fn kendall_tau(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len();
    let mut score = 0.0;
    let mut pairs = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            if a[i] != a[j] && b[i] != b[j] {
                score += if (a[i] < a[j]) == (b[i] < b[j]) { 1.0 } else { -1.0 };
            }
            pairs += 1.0;
        }
    }
    score / pairs
}

#[test]
fn large_coefficients_enter_the_path_first() {
    let mut taus = Vec::new();
    for seed in 0..20 {
        let cfg = common::sparse_linear(seed, 300);
        let run = harness::train(&cfg, None).unwrap();
        let beta = run.train.beta_star.clone().unwrap();
        let entries = inverse_scale_order(&run.records).unwrap();
        let (mut epochs, mut mags) = (Vec::new(), Vec::new());
        for e in entries.iter().filter(|e| beta[e.group] != 0.0) {
            epochs.push(e.epoch.map_or(f64::INFINITY, |v| v as f64));
            mags.push(-beta[e.group].abs());
        }
        taus.push(kendall_tau(&epochs, &mags));
    }
    let mean = taus.iter().sum::<f64>() / taus.len() as f64;
    assert!(mean > 0.6, "mean Kendall tau {mean:.3} over {taus:?}");
}

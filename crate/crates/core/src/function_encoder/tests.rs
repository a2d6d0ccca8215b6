use super::*;
use crate::numerics::Mlp;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn linear(weights: Vec<f64>, n_in: usize, n_out: usize) -> Mlp {
    let mut p = weights;
    p.extend(std::iter::repeat_n(0.0, n_out));
    Mlp::from_params(&[n_in, n_out], p).unwrap()
}

/// Two linear basis functions on a 2-d state with 1-d action:
/// g1(s, a) = (s0, 0), g2(s, a) = (0, a).
fn two_function_basis() -> BasisSet {
    let g1 = linear(vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0], 3, 2);
    let g2 = linear(vec![0.0, 0.0, 0.0, 0.0, 0.0, 1.0], 3, 2);
    BasisSet::new(vec![g1, g2], 2, 1).unwrap()
}

fn span_dataset(rng: &mut ChaCha8Rng, n: usize, b: [f64; 2]) -> TransitionDataset {
    let mut d = TransitionDataset::new();
    for _ in 0..n {
        let s = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let a = [rng.random_range(-1.0..1.0)];
        d.push_pair(vec![s[0], s[1], a[0]], vec![b[0] * s[0], b[1] * a[0]]);
    }
    d
}

#[test]
fn exact_span_recovers_weights() {
    let basis = two_function_basis();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let data = span_dataset(&mut rng, 64, [2.0, -1.0]);
    let c = basis.compute_coefficients(&data, 0.0).unwrap();
    assert!(
        (c.b[0] - 2.0).abs() < 1e-10 && (c.b[1] + 1.0).abs() < 1e-10,
        "{:?}",
        c.b
    );
    assert!(c.residual < 1e-10);
    assert_eq!(c.sample_count, 64);
}

#[test]
fn scalar_hand_computed() {
    // ⟨f,g⟩ = (1·2 + 2·4)/2 = 5, ⟨g,g⟩ = (1 + 4)/2 = 2.5
    let basis = BasisSet::new(vec![linear(vec![1.0], 1, 1)], 1, 0).unwrap();
    let mut d = TransitionDataset::new();
    d.push_pair(vec![1.0], vec![2.0]);
    d.push_pair(vec![2.0], vec![4.0]);
    let c = basis.compute_coefficients(&d, 0.0).unwrap();
    assert!((c.b[0] - 2.0).abs() < 1e-14);
}

#[test]
fn duplicated_and_permuted_samples() {
    let basis = two_function_basis();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut data = span_dataset(&mut rng, 40, [0.7, 1.3]);
    // noisy targets so the solution is not exact
    for t in &mut data.targets {
        t[0] += rng.random_range(-0.1..0.1);
    }
    let c1 = basis.compute_coefficients(&data, 1e-6).unwrap();
    let c2 = basis.compute_coefficients(&data.clone(), 1e-6).unwrap();
    assert_eq!(c1, c2);

    let mut order: Vec<usize> = (0..data.len()).collect();
    order.reverse();
    order.swap(3, 17);
    let mut permuted = TransitionDataset::new();
    for i in order {
        permuted.push_pair(data.inputs[i].clone(), data.targets[i].clone());
    }
    let c3 = basis.compute_coefficients(&permuted, 1e-6).unwrap();
    for (a, b) in c1.b.iter().zip(&c3.b) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn empty_sample_set_is_rejected() {
    let basis = two_function_basis();
    assert!(basis.compute_coefficients(&TransitionDataset::new(), 1e-6).is_err());
}

#[test]
fn singular_gram_without_ridge() {
    let g1 = linear(vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0], 3, 2);
    let basis = BasisSet::new(vec![g1.clone(), g1], 2, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let data = span_dataset(&mut rng, 10, [1.0, 0.0]);
    assert!(matches!(
        basis.compute_coefficients(&data, 0.0),
        Err(Error::SingularMatrix)
    ));
    assert!(basis.compute_coefficients(&data, 1e-6).is_ok());
}

#[test]
fn gram_is_symmetric_psd() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let nets: Vec<Mlp> = (0..4).map(|_| Mlp::new(&[3, 8, 2], &mut rng).unwrap()).collect();
        let basis = BasisSet::new(nets, 2, 1).unwrap();
        let g: Vec<Vec<Vec<f64>>> = (0..30)
            .map(|_| {
                let x = [
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ];
                basis.evaluate_input(&x).unwrap()
            })
            .collect();
        let gram = gram_matrix(&g);
        let m = nalgebra::DMatrix::from_fn(4, 4, |i, j| gram[i][j]);
        assert_eq!(m, m.transpose());
        let eig = m.symmetric_eigenvalues();
        assert!(eig.iter().all(|&e| e >= -1e-8), "{eig}");
    }
}

#[test]
fn prediction_basics() {
    let basis = two_function_basis();
    let s = [0.5, -0.2];
    let a = [0.3];
    assert_eq!(basis.predict_next_state(&[0.0, 0.0], &s, &a).unwrap(), s.to_vec());
    let d1 = basis.predict_delta(&[1.0, 2.0], &s, &a).unwrap();
    let d2 = basis.predict_delta(&[2.0, 4.0], &s, &a).unwrap();
    for (x, y) in d1.iter().zip(&d2) {
        assert!((2.0 * x - y).abs() < 1e-15);
    }
    assert!(basis.predict_delta(&[1.0], &s, &a).is_err());
}

#[test]
fn online_refresh_schedule() {
    let basis = two_function_basis();
    let mut online = OnlineCoefficients::new(2, 5, 1e-9, None);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for step in 1..=12 {
        let s = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let a = [rng.random_range(-1.0..1.0)];
        let next = [s[0] + 1.5 * s[0], s[1] - 0.5 * a[0]];
        let c = online.update(&basis, &s, &a, &next).unwrap().clone();
        if step < 5 {
            assert_eq!(c.b, vec![0.0, 0.0], "prior before first refresh");
        } else {
            assert!((c.b[0] - 1.5).abs() < 1e-6 && (c.b[1] + 0.5).abs() < 1e-6);
            assert!(c.residual < 1e-8);
        }
    }
    let before = online.coefficients().clone();
    online.refresh().unwrap();
    let again = online.coefficients().clone();
    online.refresh().unwrap();
    assert_eq!(again, online.coefficients().clone());
    assert_eq!(online.buffered(), 12);
    assert!((before.b[0] - again.b[0]).abs() < 1e-8);
    online.reset();
    assert_eq!(online.coefficients().b, vec![0.0, 0.0]);
    assert_eq!(online.buffered(), 0);
}

#[test]
fn serialization_round_trips_bit_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let nets: Vec<Mlp> = (0..3).map(|_| Mlp::new(&[6, 16, 4], &mut rng).unwrap()).collect();
    let norm = Normalizer {
        input_mean: (0..6).map(|_| rng.random::<f64>()).collect(),
        input_std: (0..6).map(|_| rng.random::<f64>() + 0.5).collect(),
        output_scale: (0..4).map(|_| rng.random::<f64>() / 7.0).collect(),
    };
    let mut basis = BasisSet::with_normalizer(nets, 4, 2, norm).unwrap();
    basis.mean_coefficients = vec![0.1 / 3.0, -1e-17, 12345.678901234567];
    basis.loss_history = vec![1.0 / 3.0, 2.0 / 7.0];
    let prov = Provenance {
        seed: 9,
        episodes: 2,
        steps_per_episode: 10,
        phi_draws: vec![crate::env::HiddenParams::nominal()],
        heldout_mse: 0.1,
        mean_predictor_mse: 0.2,
        context_free_mse: 0.15,
    };
    let text = basis.to_json(Some(&prov)).unwrap();
    let (back, p) = BasisSet::from_json(&text).unwrap();
    assert_eq!(back, basis);
    assert_eq!(p, Some(prov.clone()));
    for (a, b) in back.nets()[0].params().iter().zip(basis.nets()[0].params()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
    assert_eq!(back.to_json(Some(&prov)).unwrap(), text);
}

#[test]
fn wrong_version_is_rejected() {
    let basis = two_function_basis();
    let text = basis.to_json(None).unwrap().replace("\"version\":1", "\"version\":99");
    assert!(matches!(BasisSet::from_json(&text), Err(Error::Version(_))));
}

/// s' - s = w_φ · a with w_φ ∈ {0.5, 1, 2}: every member is a multiple of one
/// function, so a single basis function reproduces the family.
fn scalar_family(rng: &mut ChaCha8Rng, w: f64, n: usize) -> TransitionDataset {
    let mut d = TransitionDataset::new();
    for _ in 0..n {
        let s = rng.random_range(-1.0..1.0);
        let a = rng.random_range(-1.0..1.0);
        d.push(&[s], &[a], &[s + w * a]);
    }
    d
}

#[test]
fn one_basis_learns_scalar_family() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let train: Vec<TransitionDataset> = [0.5, 1.0, 2.0, 0.5, 1.0, 2.0]
        .iter()
        .map(|&w| scalar_family(&mut rng, w, 200))
        .collect();
    let cfg = BasisTrainConfig {
        k: 1,
        hidden: vec![16],
        epochs: 1500,
        lr: 5e-3,
        tasks_per_batch: 6,
        samples_per_task: 100,
        ridge: 1e-8,
    };
    let basis = train_basis(&train, &cfg, 1, &mut rng).unwrap();
    let first = basis.loss_history[0];
    assert!(*basis.loss_history.last().unwrap() < first);
    for w in [0.5, 1.0, 2.0] {
        let data = scalar_family(&mut rng, w, 200);
        let (fit, held) = data.split_at(50);
        let c = basis.compute_coefficients(&fit, 1e-8).unwrap();
        let mse = basis.prediction_mse(&c.b, &held).unwrap();
        // relative to the target variance w²/3
        let rel = mse / (w * w / 3.0);
        assert!(rel < 1e-2, "w={w}: relative mse {rel}");
    }
}

/// s' - s = A(φ) s + B(φ) a with (A, B) linear in a 3-d parameter.
fn linear_family(rng: &mut ChaCha8Rng, phi: [f64; 3], n: usize) -> TransitionDataset {
    let mut d = TransitionDataset::new();
    for _ in 0..n {
        let s = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let a = [rng.random_range(-1.0..1.0)];
        let delta = [
            phi[0] * s[0] + 0.3 * phi[1] * s[1] + phi[2] * a[0],
            -phi[0] * s[1] + phi[1] * a[0] + 0.5 * phi[2] * s[0],
        ];
        d.push(&s, &a, &[s[0] + delta[0], s[1] + delta[1]]);
    }
    d
}

#[test]
fn three_bases_learn_linear_family() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let train: Vec<TransitionDataset> = (0..24)
        .map(|_| {
            let phi = [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ];
            linear_family(&mut rng, phi, 150)
        })
        .collect();
    let cfg = BasisTrainConfig {
        k: 3,
        hidden: vec![16],
        epochs: 800,
        lr: 5e-3,
        tasks_per_batch: 8,
        samples_per_task: 100,
        ridge: 1e-8,
    };
    let basis = train_basis(&train, &cfg, 2, &mut rng).unwrap();
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let phi = [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ];
        let data = linear_family(&mut rng, phi, 200);
        let (fit, held) = data.split_at(100);
        let c = basis.compute_coefficients(&fit, 1e-8).unwrap();
        worst = worst.max(basis.prediction_mse(&c.b, &held).unwrap());
    }
    assert!(worst < 1e-2, "held-out mse {worst}");
    // unit-norm regularization on the training distribution
    let all: Vec<Vec<Vec<f64>>> = train[0]
        .inputs
        .iter()
        .map(|x| basis.evaluate_input(x).unwrap())
        .collect();
    let gram = gram_matrix(&all);
    for (i, row) in gram.iter().enumerate() {
        assert!((0.5..=2.0).contains(&row[i]), "‖g_{i}‖² = {}", row[i]);
    }
}

#[test]
fn smoothed_loss_does_not_increase() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let train: Vec<TransitionDataset> = [0.5, 1.0, 2.0]
        .iter()
        .map(|&w| scalar_family(&mut rng, w, 60))
        .collect();
    let cfg = BasisTrainConfig {
        k: 1,
        hidden: vec![8],
        epochs: 300,
        lr: 2e-3,
        tasks_per_batch: 3,
        samples_per_task: 60,
        ridge: 1e-8,
    };
    let basis = train_basis(&train, &cfg, 1, &mut rng).unwrap();
    let windows: Vec<f64> = basis
        .loss_history
        .chunks(10)
        .map(|w| w.iter().sum::<f64>() / w.len() as f64)
        .collect();
    for pair in windows.windows(2) {
        assert!(pair[1] <= pair[0] * (1.0 + 1e-3) + 1e-9, "{windows:?}");
    }
}

#[test]
fn training_argument_checks() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let d = scalar_family(&mut rng, 1.0, 50);
    let cfg = BasisTrainConfig {
        k: 0,
        ..BasisTrainConfig::default()
    };
    assert!(train_basis(&[d.clone(), d.clone()], &cfg, 1, &mut rng).is_err());
    let cfg = BasisTrainConfig::default();
    assert!(train_basis(&[d.clone()], &cfg, 1, &mut rng).is_err());
    assert!(train_basis(&[d.clone(), TransitionDataset::new()], &cfg, 1, &mut rng).is_err());
}

#[test]
fn basis_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut nets: Vec<Mlp> = (0..2).map(|_| Mlp::new(&[3, 5, 2], &mut rng).unwrap()).collect();
    let tasks: Vec<(Vec<Vec<f64>>, Vec<Vec<f64>>)> = (0..2)
        .map(|_| {
            let xs: Vec<Vec<f64>> = (0..12)
                .map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            let ys: Vec<Vec<f64>> = (0..12)
                .map(|_| (0..2).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            (xs, ys)
        })
        .collect();
    let ridge = 1e-3;
    let (_, grads) = basis_loss_and_grad(&nets, &tasks, ridge).unwrap();
    let h = 1e-6;
    for j in 0..nets.len() {
        for p in 0..nets[j].num_params() {
            let orig = nets[j].params()[p];
            nets[j].params_mut()[p] = orig + h;
            let (up, _) = basis_loss_and_grad(&nets, &tasks, ridge).unwrap();
            nets[j].params_mut()[p] = orig - h;
            let (down, _) = basis_loss_and_grad(&nets, &tasks, ridge).unwrap();
            nets[j].params_mut()[p] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = grads[j][p];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            assert!(rel < 1e-4, "net {j} param {p}: fd {fd} analytic {an}");
        }
    }
}

#[test]
fn batched_prediction_is_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let nets = (0..3).map(|_| Mlp::new(&[6, 7, 4], &mut rng).unwrap()).collect();
    let norm = Normalizer {
        input_mean: vec![0.1, -0.2, 0.0, 0.3, 0.0, 0.1],
        input_std: vec![1.0, 0.5, 2.0, 1.5, 0.7, 0.9],
        output_scale: vec![0.02, 0.02, 0.3, 0.4],
    };
    let basis = BasisSet::with_normalizer(nets, 4, 2, norm).unwrap();
    let b = [0.7, -1.1, 0.4];
    let s = [0.5, -0.3, 1.2, -0.8];
    let actions: Vec<Vec<f64>> = (0..20)
        .map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
        .collect();
    let batch = basis.predict_next_states(&b, &s, &actions).unwrap();
    for (a, got) in actions.iter().zip(&batch) {
        assert_eq!(*got, basis.predict_next_state(&b, &s, a).unwrap());
    }
}

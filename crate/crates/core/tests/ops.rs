//! Tensor kernels and the tape against hand values and central differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tbvlm_core::gradcheck::relative_error;
use tbvlm_core::{Tape, Tensor};

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
}

/// Central differences of a scalar function of one tensor.
fn numeric_grad(x: &Tensor, f: impl Fn(&Tensor) -> f64) -> Vec<f64> {
    let h = 1e-6;
    (0..x.numel())
        .map(|i| {
            let mut up = x.clone();
            up.data_mut()[i] += h;
            let mut down = x.clone();
            down.data_mut()[i] -= h;
            (f(&up) - f(&down)) / (2.0 * h)
        })
        .collect()
}

#[test]
fn matmul_hand_cases() {
    let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
    let eye = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    assert_eq!(a.matmul(&eye).unwrap(), a);
    let col = Tensor::from_rows(&[vec![5.0], vec![6.0]]).unwrap();
    assert_eq!(a.matmul(&col).unwrap().data(), &[17.0, 39.0]);
}

#[test]
fn matmul_gradient_matches_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..5 {
        let a = random(&mut rng, &[3, 4]);
        let b = random(&mut rng, &[4, 2]);
        let mut tape = Tape::new();
        let av = tape.param(a.clone());
        let bv = tape.constant(b.clone());
        let prod = tape.matmul(av, bv).unwrap();
        let loss = tape.sum(prod);
        let grads = tape.backward(loss).unwrap();
        let numeric = numeric_grad(&a, |a| a.matmul(&b).unwrap().data().iter().sum());
        let err = relative_error(grads.get(av).unwrap().data(), &numeric);
        assert!(err < 1e-6, "relative error {err}");
    }
}

#[test]
fn softmax_uniform_shift_and_overflow() {
    let zeros = Tensor::zeros(&[1, 4]);
    assert_eq!(zeros.softmax(1).unwrap().data(), &[0.25; 4]);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&mut rng, &[3, 5]);
    let shifted = x.map(|v| v + 123.456);
    assert!(x.softmax(1).unwrap().max_abs_diff(&shifted.softmax(1).unwrap()) < 1e-12);

    let big = Tensor::from_rows(&[vec![1000.0, 0.0]]).unwrap();
    assert_eq!(big.softmax(1).unwrap().data(), &[1.0, 0.0]);
}

#[test]
fn layer_norm_statistics_and_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let gain = Tensor::ones(&[16]);
    let bias = Tensor::zeros(&[16]);
    let x = random(&mut rng, &[6, 16]).map(|v| 3.0 * v + 1.0);
    let y = x.layer_norm(&gain, &bias, 1e-5).unwrap();
    for r in 0..6 {
        let row = y.row(r);
        let mean = row.iter().sum::<f64>() / 16.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-9);
        // Epsilon keeps the variance just under one.
        let xr = x.row(r);
        let xm = xr.iter().sum::<f64>() / 16.0;
        let s2 = xr.iter().map(|v| (v - xm).powi(2)).sum::<f64>() / 16.0;
        assert!((var - s2 / (s2 + 1e-5)).abs() < 1e-9, "variance {var}");
    }

    let constant = Tensor::full(&[1, 4], 5.0);
    let out = constant.layer_norm(&Tensor::ones(&[4]), &Tensor::zeros(&[4]), 1e-5).unwrap();
    assert_eq!(out.data(), &[0.0; 4]);

    let x = random(&mut rng, &[3, 6]);
    let g = random(&mut rng, &[6]);
    let b = random(&mut rng, &[6]);
    let w = random(&mut rng, &[3, 6]);
    let objective = |x: &Tensor| -> f64 {
        let y = x.layer_norm(&g, &b, 1e-5).unwrap();
        y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
    };
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let gv = tape.constant(g.clone());
    let bv = tape.constant(b.clone());
    let wv = tape.constant(w.clone());
    let y = tape.layer_norm(xv, gv, bv, 1e-5).unwrap();
    let yw = tape.mul(y, wv).unwrap();
    let loss = tape.sum(yw);
    let grads = tape.backward(loss).unwrap();
    let err = relative_error(grads.get(xv).unwrap().data(), &numeric_grad(&x, objective));
    assert!(err < 1e-5, "relative error {err}");
}

#[test]
fn sum_and_square_gradients_are_analytic() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random(&mut rng, &[4, 3]);
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let s = tape.sum(xv);
    let grads = tape.backward(s).unwrap();
    assert_eq!(grads.get(xv).unwrap().data(), &[1.0; 12]);

    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let sq = tape.mul(xv, xv).unwrap();
    let s = tape.sum(sq);
    let grads = tape.backward(s).unwrap();
    let twice: Vec<f64> = x.data().iter().map(|v| 2.0 * v).collect();
    assert_eq!(grads.get(xv).unwrap().data(), twice.as_slice());
}

#[test]
fn cross_entropy_matches_direct_computation() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..20 {
        let logits = random(&mut rng, &[5, 9]).map(|v| 4.0 * v);
        let labels: Vec<Option<usize>> = (0..5)
            .map(|_| rng.gen_bool(0.7).then(|| rng.gen_range(0..9)))
            .collect();
        if labels.iter().all(Option::is_none) {
            continue;
        }
        let mut direct = 0.0;
        let mut n = 0.0;
        for (r, l) in labels.iter().enumerate() {
            let Some(l) = l else { continue };
            let row = logits.row(r);
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            direct -= (row[*l].exp() / z).ln();
            n += 1.0;
        }
        direct /= n;
        let mut tape = Tape::new();
        let lv = tape.constant(logits.clone());
        let loss = tape.cross_entropy(lv, &labels).unwrap();
        assert!((tape.value(loss).data()[0] - direct).abs() < 1e-10);
    }
}

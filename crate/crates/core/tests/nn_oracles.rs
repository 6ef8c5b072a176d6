mod common;

use certmark::nn::engine::{loss_and_grad_with, Targets};
use certmark::nn::{accuracy_in, forward, Layer, ModelSpec, ParamVector, Shape3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::oracle::gradient_check;

fn random_images(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.random::<f32>()).collect()
}

#[test]
fn mlp_forward_matches_nested_loops() {
    let dims = Shape3::new(3, 4, 2);
    let spec = ModelSpec::mlp(dims, &[7], 5).unwrap();
    let params = ParamVector::init(&spec, 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let batch = 6;
    let images = random_images(&mut rng, batch * dims.len());
    let logits = forward(&spec, &params, &images).unwrap();

    let p = params.as_slice();
    let (d, h, k) = (dims.len(), 7, 5);
    let (w1, rest) = p.split_at(h * d);
    let (b1, rest) = rest.split_at(h);
    let (w2, b2) = rest.split_at(k * h);
    for b in 0..batch {
        let x = &images[b * d..(b + 1) * d];
        let mut hidden = vec![0f64; h];
        for j in 0..h {
            let mut s = b1[j] as f64;
            for i in 0..d {
                s += w1[j * d + i] as f64 * x[i] as f64;
            }
            hidden[j] = s.max(0.0);
        }
        for c in 0..k {
            let mut s = b2[c] as f64;
            for j in 0..h {
                s += w2[c * h + j] as f64 * hidden[j];
            }
            assert!((logits[b * k + c] as f64 - s).abs() < 1e-6, "logit {b},{c}");
        }
    }
}

#[test]
fn conv_forward_matches_nested_loops() {
    let dims = Shape3::new(5, 5, 2);
    let spec = ModelSpec::new(
        dims,
        vec![Layer::Conv { kernel: 3, channels: 3, stride: 2 }, Layer::Flatten, Layer::Dense { width: 4 }],
        4,
    )
    .unwrap();
    let params = ParamVector::init(&spec, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let images = random_images(&mut rng, 2 * dims.len());
    let logits = forward(&spec, &params, &images).unwrap();

    let p = params.as_slice();
    let (kw, rest) = p.split_at(3 * 3 * 3 * 2);
    let (kb, rest) = rest.split_at(3);
    let (dw, db) = rest.split_at(4 * 12);
    for b in 0..2 {
        let x = &images[b * 50..(b + 1) * 50];
        let mut feat = [0f64; 12];
        for oy in 0..2 {
            for ox in 0..2 {
                for c in 0..3 {
                    let mut s = kb[c] as f64;
                    for ky in 0..3 {
                        for kx in 0..3 {
                            for ci in 0..2 {
                                let px = x[((oy * 2 + ky) * 5 + ox * 2 + kx) * 2 + ci] as f64;
                                s += kw[((c * 3 + ky) * 3 + kx) * 2 + ci] as f64 * px;
                            }
                        }
                    }
                    feat[(oy * 2 + ox) * 3 + c] = s;
                }
            }
        }
        for o in 0..4 {
            let s: f64 = db[o] as f64 + (0..12).map(|i| dw[o * 12 + i] as f64 * feat[i]).sum::<f64>();
            assert!((logits[b * 4 + o] as f64 - s).abs() < 1e-6);
        }
    }
}

#[test]
fn gradient_matches_central_differences_on_a_200_parameter_net() {
    let spec = ModelSpec::mlp(Shape3::new(4, 4, 1), &[10], 3).unwrap();
    assert!((190..=210).contains(&spec.param_count().unwrap()));
    let err = gradient_check(&spec, 1, 4);
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn f32_gradient_is_close_to_central_differences() {
    let spec = ModelSpec::mlp(Shape3::new(4, 4, 1), &[10], 3).unwrap();
    let layout = spec.layout().unwrap();
    let params = ParamVector::init(&spec, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let images = random_images(&mut rng, 4 * 16);
    let labels = [0usize, 1, 2, 1];
    let (_, grad) = certmark::nn::loss_and_grad_in(&layout, &params, &images, Targets::Hard(&labels)).unwrap();
    let p64: Vec<f64> = params.as_slice().iter().map(|&v| v as f64).collect();
    let x64: Vec<f64> = images.iter().map(|&v| v as f64).collect();
    let (_, exact) = loss_and_grad_with(&layout, &p64, &x64, Targets::Hard(&labels));
    for (g, e) in grad.as_slice().iter().zip(&exact) {
        assert!((*g as f64 - e).abs() < 1e-5);
    }
}

#[test]
fn gradient_check_covers_every_layer_type() {
    let spec = ModelSpec::new(
        Shape3::new(6, 6, 2),
        vec![
            Layer::Conv { kernel: 3, channels: 3, stride: 1 },
            Layer::Relu,
            Layer::Conv { kernel: 2, channels: 2, stride: 2 },
            Layer::Relu,
            Layer::Flatten,
            Layer::Dense { width: 5 },
            Layer::Relu,
            Layer::Dense { width: 3 },
        ],
        3,
    )
    .unwrap();
    for seed in 0..5 {
        let err = gradient_check(&spec, seed, 3);
        assert!(err < 1e-4, "seed {seed}: max relative error {err}");
    }
}

#[test]
fn accuracy_counts_matches() {
    let dims = Shape3::new(2, 2, 1);
    let spec = ModelSpec::mlp(dims, &[], 3).unwrap();
    let layout = spec.layout().unwrap();
    // Zero weights with bias favouring class 2 predict 2 everywhere.
    let mut values = vec![0f32; spec.param_count().unwrap()];
    let n = values.len();
    values[n - 1] = 1.0;
    let params = ParamVector::new(values).unwrap();
    let images = vec![0.5f32; 10 * 4];
    let mut labels = vec![2usize; 10];
    assert_eq!(accuracy_in(&layout, &params, &images, &labels).unwrap(), 1.0);
    labels[..3].copy_from_slice(&[0, 1, 0]);
    assert!((accuracy_in(&layout, &params, &images, &labels).unwrap() - 0.7).abs() < 1e-12);
    labels.iter_mut().for_each(|l| *l = 1);
    assert_eq!(accuracy_in(&layout, &params, &images, &labels).unwrap(), 0.0);
}

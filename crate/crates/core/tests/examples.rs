//! Worked examples for the public API, one module at a time.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spectral_attention::attention::{
    apply_attention, attention_backward, attention_backward_with, attention_forward, compress,
    param_count, sigmoid, AttentionParams, BackwardPath, Compression, CompressionTensor,
    FrequencyAssignment,
};
use spectral_attention::dct::{
    basis, dct2, dct2_naive, idct2, make_filter_bank, spectral_pool, Component, Normalization,
};
use spectral_attention::selection::{
    assign_lf, assign_ts, lf_order, nas_derive, nas_mix, softmax, ComponentScore, FrequencyGrid,
    NasState,
};
use spectral_attention::{Error, Tensor};

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0)).unwrap()
}

fn c(u: usize, v: usize) -> Component {
    Component::new(u, v)
}

#[test]
fn tensor_elementwise_mul_sum() {
    let ones = Tensor::ones(&[2, 2]).unwrap();
    assert_eq!(ones.elementwise_mul_sum(&ones).unwrap(), 4.0);
    let a = random(&[3, 5], 1);
    assert_eq!(
        a.elementwise_mul_sum(&Tensor::zeros(&[3, 5]).unwrap())
            .unwrap(),
        0.0
    );
    let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
    let b = t(&[2, 2], &[4.0, 3.0, 2.0, 1.0]);
    assert_eq!(a.elementwise_mul_sum(&b).unwrap(), 20.0);
    assert!(matches!(
        a.elementwise_mul_sum(&Tensor::zeros(&[4]).unwrap()),
        Err(Error::ShapeMismatch { .. })
    ));
}

#[test]
fn tensor_reduce_mean_hw() {
    let fives = Tensor::full(&[3, 2, 4], 5.0).unwrap();
    assert_eq!(fives.reduce_mean_hw().unwrap().data(), &[5.0; 3]);
    let x = t(&[1, 2, 2], &[0.0, 2.0, 4.0, 6.0]);
    assert_eq!(x.reduce_mean_hw().unwrap().data(), &[3.0]);
    let x = random(&[4, 1, 1], 2);
    assert_eq!(x.reduce_mean_hw().unwrap().data(), x.data());
}

#[test]
fn basis_values() {
    assert!(basis(3, 5, 0, 0)
        .unwrap()
        .values
        .data()
        .iter()
        .all(|&v| v == 1.0));
    assert_eq!(basis(1, 1, 0, 0).unwrap().values.data(), &[1.0]);
    let b = basis(2, 2, 1, 1).unwrap().values;
    for (got, want) in b.data().iter().zip([0.5, -0.5, -0.5, 0.5]) {
        assert!((got - want).abs() < 1e-15);
    }
    assert!(matches!(
        basis(4, 4, 4, 0),
        Err(Error::ComponentOutOfRange { .. })
    ));
}

#[test]
fn dct2_of_constant_and_of_a_basis() {
    let f = dct2(&Tensor::full(&[5, 6], 1.5).unwrap()).unwrap();
    assert!((f.data()[0] - 1.5 * 30.0).abs() < 1e-12);
    assert!(f.data()[1..].iter().all(|v| v.abs() < 1e-12));

    let (h, w) = (6, 8);
    let f = dct2(&basis(h, w, 2, 3).unwrap().values).unwrap();
    for u in 0..h {
        for v in 0..w {
            let want = if (u, v) == (2, 3) {
                (h * w) as f64 / 4.0
            } else {
                0.0
            };
            assert!((f.get(&[u, v]).unwrap() - want).abs() < 1e-12, "({u},{v})");
        }
    }
}

#[test]
fn dct2_random_3x3_against_naive() {
    let x = random(&[3, 3], 3);
    assert!(
        dct2(&x)
            .unwrap()
            .max_abs_diff(&dct2_naive(&x).unwrap())
            .unwrap()
            < 1e-12
    );
}

#[test]
fn idct2_inverts_only_in_orthonormal_mode() {
    let zeros = Tensor::zeros(&[4, 4]).unwrap();
    assert_eq!(idct2(&zeros, Normalization::Orthonormal).unwrap(), zeros);
    let x = random(&[8, 8], 4);
    let back = idct2(&dct2(&x).unwrap(), Normalization::Orthonormal).unwrap();
    assert!(back.max_abs_diff(&x).unwrap() < 1e-9);

    let x = random(&[4, 4], 5);
    let y = random(&[4, 4], 6);
    let raw = |x: &Tensor| idct2(&dct2(x).unwrap(), Normalization::Unnormalized).unwrap();
    assert!(
        raw(&x).max_abs_diff(&x).unwrap() > 1e-3,
        "unnormalized pair is not the identity"
    );
    let combo = x.scale(2.0).add(&y.scale(-3.0)).unwrap();
    let lin = raw(&x).scale(2.0).add(&raw(&y).scale(-3.0)).unwrap();
    assert!(raw(&combo).max_abs_diff(&lin).unwrap() < 1e-12);
}

#[test]
fn spectral_pool_examples() {
    let x = random(&[3, 4, 5], 7);
    let dc = spectral_pool(&x, 0, 0).unwrap();
    let mean = x.reduce_mean_hw().unwrap();
    for (a, m) in dc.data().iter().zip(mean.data()) {
        assert!((a - 20.0 * m).abs() < 1e-12);
    }
    assert!(spectral_pool(&Tensor::zeros(&[2, 3, 3]).unwrap(), 1, 2)
        .unwrap()
        .data()
        .iter()
        .all(|&v| v == 0.0));

    let x = random(&[2, 4, 4], 8);
    let pooled = spectral_pool(&x, 1, 2).unwrap();
    for ch in 0..2 {
        let mut acc = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                acc += x.get(&[ch, i, j]).unwrap()
                    * (PI * (i as f64 + 0.5) / 4.0).cos()
                    * (PI * 2.0 * (j as f64 + 0.5) / 4.0).cos();
            }
        }
        assert!((pooled.data()[ch] - acc).abs() < 1e-12);
    }
}

#[test]
fn filter_bank_examples() {
    let bank = make_filter_bank(3, 3, &[c(0, 0)]).unwrap();
    assert!(bank.stacked().data().iter().all(|&v| v == 1.0));
    let bank = make_filter_bank(7, 7, &[c(0, 0), c(0, 1)]).unwrap();
    for i in 0..7 {
        for j in 0..7 {
            let want = (PI * (j as f64 + 0.5) / 7.0).cos();
            assert!((bank.stacked().get(&[1, i, j]).unwrap() - want).abs() < 1e-15);
        }
    }
    assert!(matches!(
        make_filter_bank(4, 4, &[c(1, 1), c(1, 1)]),
        Err(Error::DuplicateComponent { u: 1, v: 1 })
    ));
}

fn ms(channels: usize, h: usize, w: usize, comps: Vec<Component>) -> Compression {
    Compression::MultiSpectral {
        assignment: FrequencyAssignment::new(channels, h, w, comps).unwrap(),
    }
}

#[test]
fn compress_examples() {
    let x = random(&[4, 3, 5], 9);
    let p = AttentionParams::new(4, 2, ms(4, 3, 5, vec![c(0, 0)])).unwrap();
    let z = compress(&x, &p).unwrap();
    let mean = x.reduce_mean_hw().unwrap();
    for (a, m) in z.data().iter().zip(mean.data()) {
        assert!((a - 15.0 * m).abs() < 1e-12);
    }

    let zeros = Tensor::zeros(&[4, 2, 2]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for compression in [
        Compression::Gap,
        ms(4, 2, 2, vec![c(0, 1), c(1, 1)]),
        Compression::LearnableTensor {
            tensor: CompressionTensor::random(2, 2, 2, true, &mut rng).unwrap(),
        },
    ] {
        let p = AttentionParams::new(4, 2, compression).unwrap();
        assert!(compress(&zeros, &p)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    let x = random(&[4, 2, 2], 10);
    let p = AttentionParams::new(4, 2, ms(4, 2, 2, vec![c(0, 0), c(1, 1)])).unwrap();
    let z = compress(&x, &p).unwrap();
    let b11 = basis(2, 2, 1, 1).unwrap().values;
    for ch in 0..4 {
        let plane = Tensor::new(vec![2, 2], x.data()[ch * 4..(ch + 1) * 4].to_vec()).unwrap();
        let want = if ch < 2 {
            plane.sum()
        } else {
            plane.elementwise_mul_sum(&b11).unwrap()
        };
        assert!((z.data()[ch] - want).abs() < 1e-12);
    }
}

#[test]
fn attention_forward_examples() {
    let x = random(&[8, 3, 3], 11);
    let mut p = AttentionParams::new(8, 2, Compression::Gap).unwrap();
    let (att, _) = attention_forward(&x, &p).unwrap();
    assert!(att.data().iter().all(|&a| a == 0.5));

    p.b2 = Tensor::full(&[8], 50.0).unwrap();
    let (att, _) = attention_forward(&x, &p).unwrap();
    assert!(att.data().iter().all(|&a| a > 1.0 - 1e-9 && a < 1.0));

    // straight-line recomputation of sigmoid(W2 relu(W1 gap(x) + b1) + b2)
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut p = AttentionParams::new(8, 2, Compression::Gap).unwrap();
    for (_, values) in p.trainable_slices_mut() {
        for v in values {
            *v = rng.gen_range(-1.0..1.0);
        }
    }
    let (att, _) = attention_forward(&x, &p).unwrap();
    let gap: Vec<f64> = (0..8)
        .map(|ch| x.data()[ch * 9..(ch + 1) * 9].iter().sum::<f64>() / 9.0)
        .collect();
    let hidden: Vec<f64> = (0..4)
        .map(|k| {
            let s: f64 = (0..8).map(|ch| p.w1.get(&[k, ch]).unwrap() * gap[ch]).sum();
            (s + p.b1.data()[k]).max(0.0)
        })
        .collect();
    for ch in 0..8 {
        let s: f64 = (0..4)
            .map(|k| p.w2.get(&[ch, k]).unwrap() * hidden[k])
            .sum::<f64>()
            + p.b2.data()[ch];
        assert!((att.data()[ch] - 1.0 / (1.0 + (-s).exp())).abs() < 1e-12);
    }

    assert!(sigmoid(-1e4) > 0.0 && sigmoid(1e4) < 1.0);
}

#[test]
fn apply_attention_examples() {
    let x = random(&[3, 2, 2], 13);
    assert_eq!(
        apply_attention(&x, &Tensor::ones(&[3]).unwrap()).unwrap(),
        x
    );
    let zero = apply_attention(&x, &Tensor::zeros(&[3]).unwrap()).unwrap();
    assert!(zero.data().iter().all(|&v| v == 0.0));
    let y = apply_attention(&t(&[2, 1, 1], &[3.0, 8.0]), &t(&[2], &[2.0, 0.5])).unwrap();
    assert_eq!(y.data(), &[6.0, 4.0]);
}

#[test]
fn backward_examples() {
    let x = random(&[4, 3, 3], 14);
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut p = AttentionParams::new(4, 2, ms(4, 3, 3, vec![c(0, 1), c(2, 2)])).unwrap();
    p.input_scale = 1.0 / 9.0;
    for (_, values) in p.trainable_slices_mut() {
        for v in values {
            *v = rng.gen_range(-1.0..1.0);
        }
    }
    let (att, cache) = attention_forward(&x, &p).unwrap();
    let (dx, grads) = attention_backward(&Tensor::zeros(&[4, 3, 3]).unwrap(), &cache, &p).unwrap();
    assert!(dx.data().iter().all(|&v| v == 0.0));
    assert!(grads
        .slices()
        .iter()
        .all(|(_, g)| g.iter().all(|&v| v == 0.0)));

    let g = random(&[4, 3, 3], 16);
    let (direct, _) = attention_backward_with(&g, &cache, &p, BackwardPath::DirectOnly).unwrap();
    assert_eq!(direct, apply_attention(&g, &att).unwrap());

    let mut moved = p.clone();
    moved.b2 = Tensor::full(&[4], 1.0).unwrap();
    assert!(matches!(
        attention_backward(&g, &cache, &moved),
        Err(Error::StaleCache(_))
    ));
}

#[test]
fn parameter_counts() {
    assert_eq!(param_count(64, 16, &Compression::Gap).unwrap(), 580);
    let assignment = assign_lf(64, 2, FrequencyGrid::square(7).unwrap()).unwrap();
    assert_eq!(
        param_count(64, 16, &Compression::MultiSpectral { assignment }).unwrap(),
        580
    );
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let tensor = CompressionTensor::random(4, 7, 7, true, &mut rng).unwrap();
    assert_eq!(
        param_count(64, 16, &Compression::LearnableTensor { tensor }).unwrap(),
        580 + 196
    );
    assert!(matches!(
        param_count(10, 4, &Compression::Gap),
        Err(Error::Divisibility { .. })
    ));
}

#[test]
fn lf_order_examples() {
    assert_eq!(
        lf_order(FrequencyGrid::square(2).unwrap()),
        vec![c(0, 0), c(0, 1), c(1, 0), c(1, 1)]
    );
    assert_eq!(lf_order(FrequencyGrid::square(1).unwrap()), vec![c(0, 0)]);
    let order = lf_order(FrequencyGrid::square(7).unwrap());
    assert_eq!(order.len(), 49);
    assert_eq!(&order[..2], &[c(0, 0), c(0, 1)]);
}

#[test]
fn assign_lf_examples() {
    let grid = FrequencyGrid::square(7).unwrap();
    let one = assign_lf(64, 1, grid).unwrap();
    assert_eq!(one.components(), &[c(0, 0)]);
    let two = assign_lf(64, 2, grid).unwrap();
    assert_eq!(two.components(), &[c(0, 0), c(0, 1)]);
    assert_eq!(two.component_for_channel(31), c(0, 0));
    assert_eq!(two.component_for_channel(32), c(0, 1));
    assert!(matches!(
        assign_lf(64, 3, grid),
        Err(Error::Divisibility { .. })
    ));
}

#[test]
fn assign_ts_examples() {
    let grid = FrequencyGrid::square(4).unwrap();
    let scores = vec![
        ComponentScore {
            component: c(0, 0),
            score: 0.9,
        },
        ComponentScore {
            component: c(3, 3),
            score: 0.7,
        },
        ComponentScore {
            component: c(1, 1),
            score: 0.8,
        },
    ];
    assert_eq!(
        assign_ts(8, 2, &scores, grid).unwrap().components(),
        &[c(0, 0), c(1, 1)]
    );
    let mut shuffled = scores.clone();
    shuffled.reverse();
    assert_eq!(
        assign_ts(8, 2, &shuffled, grid).unwrap(),
        assign_ts(8, 2, &scores, grid).unwrap()
    );

    let all: Vec<ComponentScore> = (0..4)
        .map(|i| ComponentScore {
            component: c(i, 0),
            score: i as f64,
        })
        .collect();
    assert_eq!(
        assign_ts(4, 4, &all, grid).unwrap().components(),
        &[c(3, 0), c(2, 0), c(1, 0), c(0, 0)]
    );
    assert!(assign_ts(4, 5, &all, grid).is_err());
}

#[test]
fn nas_mix_examples() {
    let x = random(&[3, 2, 2], 17);
    let uniform = nas_mix(&x, &Tensor::zeros(&[2, 2]).unwrap(), 1.0).unwrap();
    let mut want = vec![0.0; 3];
    for u in 0..2 {
        for v in 0..2 {
            for (w, p) in want.iter_mut().zip(spectral_pool(&x, u, v).unwrap().data()) {
                *w += p / 4.0;
            }
        }
    }
    for (a, b) in uniform.data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-12);
    }

    let x = random(&[2, 3, 3], 18);
    let mut alpha = vec![0.0; 9];
    alpha[5] = 50.0;
    let mixed = nas_mix(&x, &t(&[3, 3], &alpha), 1.0).unwrap();
    let pooled = spectral_pool(&x, 1, 2).unwrap();
    for (a, b) in mixed.data().iter().zip(pooled.data()) {
        assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
    }

    let x = random(&[2, 2, 2], 19);
    let alpha = random(&[2, 2], 20);
    let e: Vec<f64> = alpha.data().iter().map(|a| a.exp()).collect();
    let total: f64 = e.iter().sum();
    let mixed = nas_mix(&x, &alpha, 1.0).unwrap();
    for ch in 0..2 {
        let mut acc = 0.0;
        for (k, ek) in e.iter().enumerate() {
            acc += ek / total * spectral_pool(&x, k / 2, k % 2).unwrap().data()[ch];
        }
        assert!((mixed.data()[ch] - acc).abs() < 1e-12);
    }
    assert!((softmax(alpha.data(), 0.5).iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn nas_derive_examples() {
    let grid = FrequencyGrid::square(4).unwrap();
    let state = NasState::uniform(2, grid).unwrap();
    assert_eq!(
        nas_derive(&state, 8).unwrap().components(),
        &[c(0, 0), c(0, 0)]
    );

    let mut alpha = vec![0.0; 32];
    alpha[2 * 4 + 3] = 1.0;
    let state = NasState::new(t(&[2, 4, 4], &alpha), 1.0).unwrap();
    let derived = nas_derive(&state, 8).unwrap();
    assert_eq!(derived.components()[0], c(2, 3));

    let shifted = NasState::new(t(&[2, 4, 4], &alpha).map(|a| a - 7.5), 1.0).unwrap();
    assert_eq!(nas_derive(&shifted, 8).unwrap(), derived);
}

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{from_vnet_bytes, to_vnet_bytes, CheckpointError};
use super::*;
use crate::atlas::Atlas;
use crate::losses::{l1_label, nmi, DEFAULT_ALPHA, DEFAULT_BETA, DEFAULT_BINS};
use crate::phantom::{generate_subject, SubjectConfig};
use crate::transform::{warp_with, ParamVector, Sampling, DEFAULT_PARAM_LEN};
use crate::volume::{Volume, VolumeKind};

fn fixture(n: usize) -> (Atlas, Volume, Volume) {
    let cfg = SubjectConfig::for_dims(n);
    let a = generate_subject(0, 11, &cfg).unwrap();
    let b = generate_subject(1, 12, &cfg).unwrap();
    let atlas = Atlas::new(a.ed.image, a.ed.label, vec!["a".into()]).unwrap();
    (atlas, b.ed.image, b.ed.label)
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-10)
}

#[test]
fn zero_head_emits_identity_and_resampled_atlas() {
    let (atlas, x, _) = fixture(16);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = Generator::new([16; 3], &mut rng).unwrap();
    g.zero_head();
    let t = g.forward(&x, &atlas).unwrap();
    assert_eq!(t.params.len(), DEFAULT_PARAM_LEN);
    assert_eq!(t.params.values(), ParamVector::default_for([16; 3]).values());
    assert_eq!(t.g_intensity.data(), atlas.intensity.data());
    assert_eq!(t.g_label.data(), atlas.label.data());
}

#[test]
fn head_has_one_output_per_parameter() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for n in [16, 32] {
        let g = Generator::new([n; 3], &mut rng).unwrap();
        assert_eq!(g.head.n_out, 3012);
        assert_eq!(g.head.n_in, 64);
    }
}

/// Generator-facing objective: -log D(x, G) + alpha * L1 + beta * NMI.
fn total_loss(g: &Generator, d: &Discriminator, atlas: &Atlas, x: &Volume, y: &Volume) -> f64 {
    let t = g.forward(x, atlas).unwrap();
    let dt = d.forward(x, &t.g_label).unwrap();
    let (l1, _) = l1_label(y, &t.g_label).unwrap();
    let n = nmi(x, &t.g_intensity, DEFAULT_BINS).unwrap();
    -dt.p_real().ln() + DEFAULT_ALPHA * l1 + DEFAULT_BETA * n.loss
}

#[test]
fn generator_head_gradient_matches_finite_differences() {
    let (atlas, x, y) = fixture(16);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut g = Generator::new([16; 3], &mut rng).unwrap();
    let mut d = Discriminator::new([16; 3], &mut rng);

    let t = g.forward(&x, &atlas).unwrap();
    let dt = d.forward(&x, &t.g_label).unwrap();
    let d_from_d = d.backward(&dt, [dt.probs[0] - 1.0, dt.probs[1]]);
    let (_, l1g) = l1_label(&y, &t.g_label).unwrap();
    let n = nmi(&x, &t.g_intensity, DEFAULT_BINS).unwrap();
    let d_label: Vec<f64> = d_from_d.iter().zip(&l1g).map(|(a, b)| a + DEFAULT_ALPHA * b).collect();
    let d_int: Vec<f64> = n.grad.iter().map(|v| DEFAULT_BETA * v).collect();
    g.zero_grad();
    g.backward(&t, &atlas, &d_label, &d_int);

    let h = 1e-6;
    let n_in = g.head.n_in;
    let mut checked = 0;
    for _ in 0..12 {
        let row = match rng.random_range(0..3) {
            0 => rng.random_range(0..9),
            1 => rng.random_range(9..12),
            _ => rng.random_range(12..3012),
        };
        let col = (0..n_in).max_by(|&a, &b| g.head.weight.grad[row * n_in + a].abs().total_cmp(&g.head.weight.grad[row * n_in + b].abs())).unwrap();
        let idx = row * n_in + col;
        let an = g.head.weight.grad[idx];
        let mut gp = g.clone();
        gp.head.weight.data[idx] += h;
        let mut gm = g.clone();
        gm.head.weight.data[idx] -= h;
        let fd = (total_loss(&gp, &d, &atlas, &x, &y) - total_loss(&gm, &d, &atlas, &x, &y)) / (2.0 * h);
        if an.abs().max(fd.abs()) < 1e-7 {
            continue;
        }
        assert!(rel(fd, an) < 1e-3, "head weight {idx}: fd {fd} analytic {an}");
        checked += 1;
    }
    assert!(checked >= 6);
    // One conv weight in the first layer, through the whole chain.
    let idx = 5;
    let an = g.encoder.convs[0].weight.grad[idx];
    let mut gp = g.clone();
    gp.encoder.convs[0].weight.data[idx] += h;
    let mut gm = g.clone();
    gm.encoder.convs[0].weight.data[idx] -= h;
    let fd = (total_loss(&gp, &d, &atlas, &x, &y) - total_loss(&gm, &d, &atlas, &x, &y)) / (2.0 * h);
    assert!(rel(fd, an) < 1e-3, "conv weight: fd {fd} analytic {an}");
}

#[test]
fn discriminator_probabilities() {
    let (_, x, y) = fixture(16);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut d = Discriminator::new([16; 3], &mut rng);
    let t = d.forward(&x, &y).unwrap();
    assert!((t.probs[0] + t.probs[1] - 1.0).abs() < 1e-12);
    assert!(t.p_real() > 0.0 && t.p_real() < 1.0);
    for p in d.params_mut() {
        p.data.iter_mut().for_each(|v| *v = 0.0);
    }
    assert_eq!(d.forward(&x, &y).unwrap().p_real(), 0.5);
}

#[test]
fn discriminator_gradients_match_finite_differences() {
    let (atlas, x, _) = fixture(16);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut d = Discriminator::new([16; 3], &mut rng);
    let label = atlas.label.gaussian_smooth(1.0);
    // L = -log D(x, label)
    let loss = |d: &Discriminator, label: &Volume| -d.forward(&x, label).unwrap().p_real().ln();
    let t = d.forward(&x, &label).unwrap();
    let dlab = d.backward(&t, [t.probs[0] - 1.0, t.probs[1]]);
    let h = 1e-6;
    let layers = d.encoder.convs.len();
    for l in 0..layers {
        for _ in 0..3 {
            let idx = rng.random_range(0..d.encoder.convs[l].weight.len());
            let an = d.encoder.convs[l].weight.grad[idx];
            let mut dp = d.clone();
            dp.encoder.convs[l].weight.data[idx] += h;
            let mut dm = d.clone();
            dm.encoder.convs[l].weight.data[idx] -= h;
            let fd = (loss(&dp, &label) - loss(&dm, &label)) / (2.0 * h);
            if an.abs().max(fd.abs()) < 1e-9 {
                continue;
            }
            assert!(rel(fd, an) < 1e-3, "layer {l} weight {idx}: fd {fd} analytic {an}");
        }
    }
    for idx in [0, 17, 64, 127] {
        let an = d.head.weight.grad[idx];
        let mut dp = d.clone();
        dp.head.weight.data[idx] += h;
        let mut dm = d.clone();
        dm.head.weight.data[idx] -= h;
        let fd = (loss(&dp, &label) - loss(&dm, &label)) / (2.0 * h);
        assert!(rel(fd, an) < 1e-3);
    }
    // Input gradient on the label channel.
    for _ in 0..5 {
        let inner: Vec<usize> = (0..label.len()).filter(|&i| label.data()[i] > 0.01 && label.data()[i] < 0.99).collect();
        let p = inner[rng.random_range(0..inner.len())];
        let mut lp = label.data().to_vec();
        lp[p] += h;
        let mut lm = label.data().to_vec();
        lm[p] -= h;
        let fd = (loss(&d, &label.with_data(lp).unwrap()) - loss(&d, &label.with_data(lm).unwrap())) / (2.0 * h);
        assert!(rel(fd, dlab[p]) < 1e-3 || (fd - dlab[p]).abs() < 1e-10);
    }
}

#[test]
fn decoder_gradients_match_finite_differences() {
    let (_, x, y) = fixture(16);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut g = DecoderGenerator::new([16; 3], &mut rng);
    // L = sum up * g_label
    let up: Vec<f64> = (0..x.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let loss = |g: &DecoderGenerator| -> f64 { g.forward(&x).unwrap().g_label.data().iter().zip(&up).map(|(a, b)| a * b).sum() };
    let t = g.forward(&x).unwrap();
    assert_eq!(t.g_label.dims(), y.dims());
    assert!(t.g_label.data().iter().all(|v| (0.0..=1.0).contains(v)));
    g.backward(&t, &up);
    let h = 1e-6;
    for l in 0..g.encoder.convs.len() {
        let idx = rng.random_range(0..g.encoder.convs[l].weight.len());
        let an = g.encoder.convs[l].weight.grad[idx];
        let mut gp = g.clone();
        gp.encoder.convs[l].weight.data[idx] += h;
        let mut gm = g.clone();
        gm.encoder.convs[l].weight.data[idx] -= h;
        let fd = (loss(&gp) - loss(&gm)) / (2.0 * h);
        assert!(rel(fd, an) < 1e-3, "encoder {l}: fd {fd} analytic {an}");
    }
    for l in 0..g.decoder.len() {
        let idx = rng.random_range(0..g.decoder[l].weight.len());
        let an = g.decoder[l].weight.grad[idx];
        let mut gp = g.clone();
        gp.decoder[l].weight.data[idx] += h;
        let mut gm = g.clone();
        gm.decoder[l].weight.data[idx] -= h;
        let fd = (loss(&gp) - loss(&gm)) / (2.0 * h);
        assert!(rel(fd, an) < 1e-3, "decoder {l}: fd {fd} analytic {an}");
    }
}

#[test]
fn sgd_examples() {
    let mut p = Param::zeros(&[3]);
    p.data = vec![1.0, -2.0, 0.5];
    let before = p.data.clone();
    sgd_step(&mut [&mut p], 2e-4, 0.5);
    assert_eq!(p.data, before);

    let g = [0.3, -1.0, 2.0];
    p.grad = g.to_vec();
    sgd_step(&mut [&mut p], 2e-4, 0.5);
    for i in 0..3 {
        assert_eq!(p.data[i], before[i] - 2e-4 * g[i]);
    }
    let after_one = p.data.clone();
    sgd_step(&mut [&mut p], 2e-4, 0.5);
    for i in 0..3 {
        let delta = after_one[i] - p.data[i];
        assert!((delta - 2e-4 * 1.5 * g[i]).abs() < 1e-15);
    }

    let mut q = Param::zeros(&[2]);
    q.data = vec![0.1, 0.2];
    q.grad = vec![5.0, -7.0];
    let snapshot = q.data.clone();
    sgd_step(&mut [&mut q], 0.0, 0.5);
    assert_eq!(q.data, snapshot);
}

#[test]
fn checkpoint_round_trip_and_validation() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut g = Generator::new([16; 3], &mut rng).unwrap();
    checkpoint::quantize(&mut g);
    let bytes = to_vnet_bytes(&g);
    let mut h = Generator::new([16; 3], &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
    from_vnet_bytes(&mut h, &bytes).unwrap();
    assert!(g == h);
    assert_eq!(to_vnet_bytes(&h), bytes);

    let mut d = Discriminator::new([16; 3], &mut rng);
    assert!(matches!(from_vnet_bytes(&mut d, &bytes), Err(CheckpointError::LayerMismatch { .. })));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(from_vnet_bytes(&mut h, &bad), Err(CheckpointError::BadMagic(_))));
    assert!(matches!(from_vnet_bytes(&mut h, &bytes[..bytes.len() - 3]), Err(CheckpointError::Truncated("weights"))));
}

#[test]
fn same_seed_same_weights() {
    let a = Generator::new([16; 3], &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let b = Generator::new([16; 3], &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    assert!(a == b);
}

#[test]
fn soft_label_warp_matches_generator_output() {
    let (atlas, x, _) = fixture(16);
    let g = Generator::new([16; 3], &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
    let t = g.forward(&x, &atlas).unwrap();
    let direct = warp_with(&t.params, &atlas.label, [16; 3], Sampling::Trilinear);
    assert_eq!(direct.data(), t.g_label.data());
    assert_eq!(t.g_label.kind(), VolumeKind::Label);
}

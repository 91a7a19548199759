use super::*;
use crate::render::CameraPose;
use crate::rng::stream;
use proptest::prelude::*;

fn delta(mean: Vec<f64>) -> TeacherHandle {
    TeacherHandle::new(Teacher::AnalyticMixture(MixtureTeacher::single(mean, 0.0)), NoiseSchedule::default())
}

fn sample() -> Sample {
    Sample {
        z: vec![],
        prompt: String::new(),
        attrs: None,
        pose: CameraPose::orbit(0.0, 0.0, 4),
    }
}

#[test]
fn schedule_is_monotone_and_range_checked() {
    let s = NoiseSchedule::default();
    assert_eq!(s.alpha_bar(0).unwrap(), 1.0);
    for t in 1..=s.steps() {
        assert!(s.alpha_bar(t).unwrap() < s.alpha_bar(t - 1).unwrap());
    }
    let expect: f64 = (0..10).map(|i| 1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0)).product();
    assert!((s.alpha_bar(10).unwrap() - expect).abs() < 1e-15);
    assert!(matches!(s.alpha_bar(1001), Err(DistillError::TimestepRange { t: 1001, .. })));
    assert_eq!(s.t_range(), (20, 980));
}

#[test]
fn q_sample_moments() {
    let s = NoiseSchedule::default();
    let mut rng = stream(1, 0);
    let n = 20000;
    let x0 = vec![0.7; n];
    let eps = standard_normal(n, &mut rng);
    let xt = q_sample(&x0, 500, &eps, &s).unwrap();
    let ab = s.alpha_bar(500).unwrap();
    let m = xt.iter().sum::<f64>() / n as f64;
    let v = xt.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n as f64;
    assert!((m - ab.sqrt() * 0.7).abs() < 4.0 * ((1.0 - ab) / n as f64).sqrt());
    assert!((v - (1.0 - ab)).abs() < 0.05 * (1.0 - ab));
}

#[test]
fn delta_teacher_recovers_the_noise() {
    let mu = vec![0.2, -0.4, 0.9];
    let t = delta(mu.clone());
    let mut rng = stream(2, 0);
    for step in [20, 300, 980] {
        let eps = standard_normal(3, &mut rng);
        let xt = q_sample(&mu, step, &eps, &t.schedule).unwrap();
        let e = t.epsilon(&xt, None, step).unwrap();
        for (a, b) in e.iter().zip(&eps) {
            assert!((a - b).abs() < 1e-9);
        }
    }
    assert_eq!(t.calls(), 3);
}

/// Least-squares fit of `ε` on `x_t` from joint draws, one coordinate.
#[test]
fn gaussian_teacher_matches_regression_oracle() {
    let (mu, s, step) = (0.3, 0.5, 400);
    let teacher = delta(vec![mu]);
    let teacher = TeacherHandle::new(
        Teacher::AnalyticMixture(MixtureTeacher::single(vec![mu], s)),
        teacher.schedule.clone(),
    );
    let ab = teacher.schedule.alpha_bar(step).unwrap();
    let mut rng = stream(3, 0);
    let n = 200_000;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for _ in 0..n {
        let z: [f64; 2] = [StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng)];
        let x0 = mu + s * z[0];
        let xt = ab.sqrt() * x0 + (1.0 - ab).sqrt() * z[1];
        sx += xt;
        sy += z[1];
        sxx += xt * xt;
        sxy += xt * z[1];
    }
    let nf = n as f64;
    let slope = (sxy - sx * sy / nf) / (sxx - sx * sx / nf);
    let icpt = (sy - slope * sx) / nf;
    for x in [-0.5, 0.1, 0.8] {
        let oracle = icpt + slope * x;
        let got = teacher.epsilon(&[x], None, step).unwrap()[0];
        assert!((got - oracle).abs() < 0.01, "{got} vs {oracle}");
    }
}

/// Self-normalized importance estimate of `E[x0 | x_t]` from prior draws.
#[test]
fn mixture_posterior_matches_importance_oracle() {
    let comps = vec![
        Component { mean: vec![1.0, -0.5], weight: 0.3, std: 0.2 },
        Component { mean: vec![-0.6, 0.4], weight: 0.7, std: 0.35 },
    ];
    let m = MixtureTeacher::new(2, vec![(Attributes(vec![]), comps)]).unwrap();
    let s = NoiseSchedule::default();
    let mut rng = stream(4, 0);
    for (step, xt) in [(250, [0.3, 0.1]), (600, [-0.2, 0.3]), (900, [0.5, -0.5])] {
        let ab = s.alpha_bar(step).unwrap();
        let (mut num, mut den) = ([0.0; 2], 0.0);
        for _ in 0..200_000 {
            let x0 = m.sample(None, &mut rng).unwrap();
            let sq: f64 = x0.iter().zip(&xt).map(|(a, b)| (b - ab.sqrt() * a).powi(2)).sum();
            let w = (-sq / (2.0 * (1.0 - ab))).exp();
            num[0] += w * x0[0];
            num[1] += w * x0[1];
            den += w;
        }
        let got = m.posterior_mean(&xt, None, ab).unwrap();
        for k in 0..2 {
            assert!((got[k] - num[k] / den).abs() < 0.02, "t={step}: {} vs {}", got[k], num[k] / den);
        }
    }
}

#[test]
fn conditions_select_their_components() {
    let c = |v: usize, m: f64| {
        (Attributes(vec![Some(v), Some(0)]), vec![Component { mean: vec![m], weight: 1.0, std: 0.0 }])
    };
    let m = MixtureTeacher::new(1, vec![c(0, -1.0), c(1, 1.0)]).unwrap();
    let ab = 0.5;
    let cond = Attributes(vec![Some(1), Some(0)]);
    assert!((m.posterior_mean(&[0.0], Some(&cond), ab).unwrap()[0] - 1.0).abs() < 1e-12);
    // symmetric point of the marginal
    assert!(m.posterior_mean(&[0.0], None, ab).unwrap()[0].abs() < 1e-12);
    assert!(m.posterior_mean(&[0.0], Some(&Attributes(vec![None, Some(0)])), ab).unwrap()[0].abs() < 1e-12);
    assert!(matches!(
        m.posterior_mean(&[0.0], Some(&Attributes(vec![Some(2), Some(0)])), ab),
        Err(DistillError::UnknownCondition(_))
    ));
    let back = MixtureTeacher::from_json(&m.to_json()).unwrap();
    assert_eq!(back, m);
}

#[test]
fn sds_gradient_closed_form_under_delta_teacher() {
    let mu = vec![0.1, 0.5, -0.3, 0.8];
    let t = delta(mu.clone());
    let x = Tensor::from_slice(&[4], &[0.4, 0.2, 0.0, 0.8]);
    let mut rng = stream(5, 0);
    for _ in 0..20 {
        let s = sds_residual(&t, &x, None, &mut rng, SdsOptions::default()).unwrap();
        let ab = t.schedule.alpha_bar(s.t).unwrap();
        let k = t.schedule.weight(s.t) * ab.sqrt() / (1.0 - ab).sqrt();
        for i in 0..4 {
            assert!((s.grad.data()[i] - k * (x.data()[i] - mu[i])).abs() < 1e-9);
        }
    }
}

#[test]
fn pixel_buffer_converges_to_the_delta() {
    let mu: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin() * 0.5 + 0.5).collect();
    let t = delta(mu.clone());
    let mut px = PixelBuffer::new(Tensor::full(&[2, 2, 3], 0.5));
    let mut opt = Optimizer::Sgd(1.0);
    let mut rng = stream(6, 0);
    for _ in 0..2000 {
        sds_step(&mut px, &sample(), &t, SdsOptions::default(), &LatentCodec::Identity, &mut opt, &mut rng, Precision::F64)
            .unwrap();
    }
    let x = px.store.get(px.id);
    let err = x.data().iter().zip(&mu).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err < 1e-2, "{err}");
}

#[test]
fn singleton_distribution_step_equals_point_step() {
    let comps = vec![
        Component { mean: vec![0.2; 12], weight: 0.5, std: 0.1 },
        Component { mean: vec![0.7; 12], weight: 0.5, std: 0.1 },
    ];
    let m = MixtureTeacher::new(12, vec![(Attributes(vec![]), comps)]).unwrap();
    let t = TeacherHandle::new(Teacher::AnalyticMixture(m), NoiseSchedule::default());
    let init = Tensor::uniform(&[2, 2, 3], 0.0, 1.0, &mut stream(7, 0));
    let (mut a, mut b) = (PixelBuffer::new(init.clone()), PixelBuffer::new(init));
    let (mut oa, mut ob) = (Optimizer::Adam(Adam::new(0.01)), Optimizer::Adam(Adam::new(0.01)));
    let (mut ra, mut rb) = (stream(8, 1), stream(8, 1));
    let mut srng = stream(8, 2);
    let singleton = |_: &mut crate::rng::Rng| sample();
    for _ in 0..25 {
        dsds_step(&mut a, &singleton, 1, &t, SdsOptions::default(), &LatentCodec::Identity, &mut oa, &mut srng, &mut ra, Precision::F32)
            .unwrap();
        sds_step(&mut b, &sample(), &t, SdsOptions::default(), &LatentCodec::Identity, &mut ob, &mut rb, Precision::F32).unwrap();
    }
    assert_eq!(a.store.get(a.id).data(), b.store.get(b.id).data());
}

#[test]
fn distillation_leaves_the_teacher_untouched() {
    let mut den = LearnedDenoiser::new(4, 3, 4, 2, &mut stream(9, 0));
    den.cond_table.push((Attributes(vec![Some(0)]), vec![1.0, 0.0]));
    let t = TeacherHandle::new(Teacher::LearnedDenoiser(den), NoiseSchedule::default());
    let before = t.checksum();
    let mut px = PixelBuffer::new(Tensor::full(&[4, 4, 3], 0.5));
    let mut opt = Optimizer::Adam(Adam::new(0.01));
    let mut rng = stream(9, 1);
    let mut s = sample();
    s.attrs = Some(Attributes(vec![Some(0)]));
    for _ in 0..5 {
        sds_step(&mut px, &s, &t, SdsOptions::default(), &LatentCodec::Identity, &mut opt, &mut rng, Precision::F32).unwrap();
    }
    assert_eq!(t.checksum(), before);
    assert_eq!(t.calls(), 10);
}

#[test]
fn cfg_and_rescale() {
    let c = [1.0, 2.0];
    let u = [0.5, -1.0];
    assert_eq!(cfg_combine(&c, &u, 1.0), c.to_vec());
    assert_eq!(cfg_combine(&c, &u, 0.0), u.to_vec());
    assert_eq!(cfg_combine(&c, &u, 3.0), vec![2.0, 8.0]);
    let r = [3.0, 4.0];
    assert_eq!(rescale_residual(&r, &u, RescaleMode::Off), r.to_vec());
}

#[test]
fn non_finite_gradient_is_reported() {
    let t = delta(vec![f64::NAN, 0.0]);
    let x = Tensor::zeros(&[2]);
    let r = sds_residual(&t, &x, None, &mut stream(10, 0), SdsOptions::default());
    assert!(matches!(r, Err(DistillError::NonFinite { .. })));
}

#[test]
fn affine_codec_pulls_back_through_the_encoder() {
    let enc_w = Tensor::from_slice(&[3, 3], &[1.0, 0.2, 0.0, 0.0, 0.5, 0.1, -0.3, 0.0, 2.0]);
    let codec = LatentCodec::Affine {
        enc_w: enc_w.clone(),
        enc_b: Tensor::from_slice(&[3], &[0.1, 0.0, -0.1]),
        dec_w: Tensor::zeros(&[3, 3]),
        dec_b: Tensor::zeros(&[3]),
    };
    let g = Graph::new(Precision::F64);
    let x = g.param(Tensor::full(&[1, 2, 3], 0.3));
    let lat = codec.encode(&g, x);
    let seed = Tensor::from_slice(&[1, 2, 3], &[1.0, -2.0, 0.5, 0.0, 1.0, 3.0]);
    let grads = g.backward_seeded(&[(lat, seed.clone())]).unwrap();
    let gx = grads.get(x).unwrap();
    // ∂/∂x of <x·A, s> is s·Aᵀ
    for p in 0..2 {
        for i in 0..3 {
            let want: f64 = (0..3).map(|j| seed.data()[p * 3 + j] * enc_w.data()[i * 3 + j]).sum();
            assert!((gx.data()[p * 3 + i] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn codec_decoder_fit_inverts_encoder() {
    let mut rng = stream(11, 0);
    let mut codec = LatentCodec::Affine {
        enc_w: Tensor::from_slice(&[3, 3], &[0.9, 0.1, 0.0, 0.0, 1.1, 0.2, 0.1, 0.0, 0.8]),
        enc_b: Tensor::from_slice(&[3], &[0.05, -0.05, 0.0]),
        dec_w: Tensor::randn(&[3, 3], 0.1, &mut rng),
        dec_b: Tensor::zeros(&[3]),
    };
    let data: Vec<Tensor> = (0..8).map(|_| Tensor::uniform(&[4, 4, 3], 0.0, 1.0, &mut rng)).collect();
    let loss = codec.fit_decoder(&data, 3000, 0.02);
    assert!(loss < 1e-4, "{loss}");
    let rec = codec.decode_values(&codec.encode_values(&data[0]));
    assert!(rec.max_abs_diff(&data[0]) < 0.03);
}

#[test]
fn learned_denoiser_fits_a_delta_dataset() {
    let mut rng = stream(12, 0);
    let mut den = LearnedDenoiser::new(4, 3, 6, 1, &mut rng);
    let mu: Vec<f64> = (0..48).map(|i| ((i * 7) % 11) as f64 / 10.0).collect();
    let data = vec![(mu.clone(), None)];
    let s = NoiseSchedule::default();
    let losses = train_denoiser(&mut den, &data, &s, 1500, 0.003, 0.0, &mut rng).unwrap();
    let head: f64 = losses[..100].iter().sum::<f64>() / 100.0;
    let tail: f64 = losses[losses.len() - 300..].iter().sum::<f64>() / 300.0;
    assert!(tail < 0.2 * head, "{head} -> {tail}");
}

proptest! {
    #[test]
    fn zero_width_component_is_its_own_posterior(xs in prop::collection::vec(-3.0f64..3.0, 5), t in 20usize..980) {
        let mu = vec![0.1, 0.2, 0.3, 0.4, 0.5];
        let m = MixtureTeacher::single(mu.clone(), 0.0);
        let ab = NoiseSchedule::default().alpha_bar(t).unwrap();
        let p = m.posterior_mean(&xs, None, ab).unwrap();
        for (a, b) in p.iter().zip(&mu) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn norm_match_never_exceeds_noise_rms(
        r in prop::collection::vec(-50.0f64..50.0, 1..32),
        seed in 0u64..1000,
    ) {
        let e = standard_normal(r.len(), &mut stream(seed, 0));
        let out = rescale_residual(&r, &e, RescaleMode::NormMatch);
        prop_assert!(rms(&out) <= rms(&e) * (1.0 + 1e-12));
        if rms(&r) <= rms(&e) {
            prop_assert_eq!(out, r);
        }
    }

    #[test]
    fn sds_update_points_toward_the_delta(x in prop::collection::vec(-2.0f64..2.0, 3), seed in 0u64..1000) {
        let mu = vec![0.0, 0.5, 1.0];
        let t = delta(mu.clone());
        let s = sds_residual(&t, &Tensor::new(&[3], x.clone()), None, &mut stream(seed, 0), SdsOptions::default()).unwrap();
        let dot: f64 = s.grad.data().iter().zip(x.iter().zip(&mu)).map(|(g, (a, b))| g * (a - b)).sum();
        prop_assert!(dot >= 0.0);
    }
}

#[test]
fn schedule_examples() {
    let s = NoiseSchedule::default();
    let mut oracle = 1.0f64;
    for i in 0..1000 {
        oracle *= 1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0);
    }
    assert!((s.alpha_bar(1000).unwrap() - oracle).abs() < 1e-9);
    let x0 = [0.3, -0.2];
    let e = [1.5, 0.4];
    assert_eq!(q_sample(&x0, 0, &e, &s).unwrap(), x0.to_vec());
    let z = q_sample(&[0.0, 0.0], 700, &e, &s).unwrap();
    let k = (1.0 - s.alpha_bar(700).unwrap()).sqrt();
    assert!((z[0] - k * 1.5).abs() < 1e-12 && (z[1] - k * 0.4).abs() < 1e-12);
}

#[test]
fn symmetric_mixture_is_zero_at_origin() {
    let comps = vec![
        Component { mean: vec![0.8, -0.3], weight: 0.5, std: 0.2 },
        Component { mean: vec![-0.8, 0.3], weight: 0.5, std: 0.2 },
    ];
    let t = TeacherHandle::new(
        Teacher::AnalyticMixture(MixtureTeacher::new(2, vec![(Attributes(vec![]), comps)]).unwrap()),
        NoiseSchedule::default(),
    );
    for step in [50, 500, 950] {
        assert!(t.epsilon(&[0.0, 0.0], None, step).unwrap().iter().all(|v| v.abs() < 1e-12));
    }
}

#[test]
fn cfg_scalar_and_rescale_factor() {
    assert!((cfg_combine(&[0.3], &[0.1], 3.0)[0] - 0.7).abs() < 1e-12);
    let e = standard_normal(64, &mut stream(13, 0));
    let r: Vec<f64> = e.iter().map(|v| 10.0 * v).collect();
    let out = rescale_residual(&r, &e, RescaleMode::NormMatch);
    for (o, v) in out.iter().zip(&e) {
        assert!((o - v).abs() < 1e-12);
    }
}

#[test]
fn fixed_point_gradient_vanishes_on_average() {
    let mu = vec![0.25, 0.75, 0.5];
    let t = delta(mu.clone());
    let x = Tensor::new(&[3], mu);
    let mut rng = stream(14, 0);
    let n = 10_000;
    for _ in 0..n {
        let s = sds_residual(&t, &x, None, &mut rng, SdsOptions::default()).unwrap();
        assert!(s.grad.max_abs() < 1e-9);
    }
}

/// Mean gradient at fixed `t` against the closed-form expectation.
#[test]
fn fixed_t_monte_carlo_matches_closed_form() {
    let mu = vec![0.1, 0.9];
    let comps = vec![Component { mean: mu.clone(), weight: 1.0, std: 0.0 }];
    let m = MixtureTeacher::new(2, vec![(Attributes(vec![]), comps)]).unwrap();
    let s = NoiseSchedule::default();
    let x = [0.6, 0.2];
    let mut rng = stream(15, 0);
    for step in [50, 250, 500, 750, 950] {
        let ab = s.alpha_bar(step).unwrap();
        let n = 10_000;
        let mut acc = [0.0; 2];
        let mut sq = [0.0; 2];
        for _ in 0..n {
            let eps = standard_normal(2, &mut rng);
            let xt = q_sample(&x, step, &eps, &s).unwrap();
            let x0 = m.posterior_mean(&xt, None, ab).unwrap();
            for k in 0..2 {
                let e_hat = (xt[k] - ab.sqrt() * x0[k]) / (1.0 - ab).sqrt();
                let gk = s.weight(step) * (e_hat - eps[k]);
                acc[k] += gk;
                sq[k] += gk * gk;
            }
        }
        for k in 0..2 {
            let mean = acc[k] / n as f64;
            let var = (sq[k] / n as f64 - mean * mean).max(0.0);
            let se = (var / n as f64).sqrt().max(1e-12);
            let want = s.weight(step) * ab.sqrt() / (1.0 - ab).sqrt() * (x[k] - mu[k]);
            assert!((mean - want).abs() <= 3.0 * se + 1e-9, "t={step}: {mean} vs {want}");
        }
    }
}

#[test]
fn identity_initialized_codec_matches_identity() {
    let mu = vec![0.3; 12];
    let t = delta(mu);
    let run = |codec: &LatentCodec| {
        let mut px = PixelBuffer::new(Tensor::full(&[2, 2, 3], 0.6));
        let mut opt = Optimizer::Sgd(0.1);
        let mut rng = stream(16, 0);
        for _ in 0..10 {
            sds_step(&mut px, &sample(), &t, SdsOptions::default(), codec, &mut opt, &mut rng, Precision::F64).unwrap();
        }
        px.store.get(px.id).clone()
    };
    let a = run(&LatentCodec::Identity);
    let b = run(&LatentCodec::identity_affine(3));
    assert!(a.max_abs_diff(&b) < 1e-5);
}

#[test]
fn step_with_gradient_changes_parameters() {
    let t = delta(vec![0.0; 3]);
    let mut px = PixelBuffer::new(Tensor::full(&[3], 1.0));
    let before = px.store.checksum();
    let mut opt = Optimizer::Adam(Adam::new(0.01));
    sds_step(&mut px, &sample(), &t, SdsOptions::default(), &LatentCodec::Identity, &mut opt, &mut stream(17, 0), Precision::F32)
        .unwrap();
    assert_ne!(px.store.checksum(), before);
}

#[test]
fn zero_training_steps_leave_denoiser_unchanged() {
    let mut den = LearnedDenoiser::new(4, 3, 4, 1, &mut stream(18, 0));
    let before = den.store.checksum();
    let data = vec![(vec![0.5; 48], None)];
    let l = train_denoiser(&mut den, &data, &NoiseSchedule::default(), 0, 0.01, 0.0, &mut stream(18, 1)).unwrap();
    assert!(l.is_empty());
    assert_eq!(den.store.checksum(), before);
}

#[test]
fn trained_denoiser_approaches_delta_teacher() {
    let mut rng = stream(19, 0);
    let mu: Vec<f64> = (0..48).map(|i| ((i * 5) % 9) as f64 / 8.0).collect();
    let mut den = LearnedDenoiser::new(4, 3, 6, 1, &mut rng);
    let s = NoiseSchedule::default();
    train_denoiser(&mut den, &[(mu.clone(), None)], &s, 2000, 0.003, 0.0, &mut rng).unwrap();
    let analytic = delta(mu.clone());
    let learned = TeacherHandle::new(Teacher::LearnedDenoiser(den), s.clone());
    let mut total = 0.0;
    let n = 200;
    for _ in 0..n {
        let step = s.sample_t(&mut rng);
        let xt = q_sample(&mu, step, &standard_normal(48, &mut rng), &s).unwrap();
        let a = analytic.epsilon(&xt, None, step).unwrap();
        let b = learned.epsilon(&xt, None, step).unwrap();
        total += a.iter().zip(&b).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / 48.0;
    }
    let msd = total / n as f64;
    assert!(msd < 0.05, "{msd}");
}

#[test]
fn triplane_scene_renders_like_its_triplane() {
    let mut rng = stream(20, 0);
    let planes = [
        Tensor::randn(&[4, 4, 2], 1.0, &mut rng),
        Tensor::randn(&[4, 4, 2], 1.0, &mut rng),
        Tensor::randn(&[4, 4, 2], 1.0, &mut rng),
    ];
    let tp = TriPlane::new(planes, Decoder::random(2, 4, &mut rng)).unwrap();
    let scene = TriPlaneScene::new(&tp, 8);
    assert_eq!(scene.triplane(), tp);
    let s = Sample {
        pose: CameraPose::orbit(15.0, 10.0, 6),
        ..sample()
    };
    let g = Graph::new(Precision::F64);
    let b = scene.store.bind(&g, |_| true);
    let x = scene.render_sample(&g, &b, &s).unwrap();
    let opts = crate::render::RenderOptions {
        samples: 8,
        precision: Precision::F64,
        ..Default::default()
    };
    let want = tp.render(&s.pose, &opts).unwrap().image;
    assert_eq!(g.value(x).data(), want.data.as_slice());
}

#[test]
fn triplane_scene_moves_under_distillation() {
    let mut rng = stream(21, 0);
    let planes = [
        Tensor::randn(&[4, 4, 2], 1.0, &mut rng),
        Tensor::randn(&[4, 4, 2], 1.0, &mut rng),
        Tensor::randn(&[4, 4, 2], 1.0, &mut rng),
    ];
    let tp = TriPlane::new(planes, Decoder::random(2, 4, &mut rng)).unwrap();
    let mut scene = TriPlaneScene::new(&tp, 6);
    let t = delta(vec![0.2; 48]);
    let s = Sample {
        pose: CameraPose::orbit(0.0, 10.0, 4),
        ..sample()
    };
    let mut opt = Optimizer::Adam(Adam::new(0.01));
    let before = scene.store.checksum();
    sds_step(&mut scene, &s, &t, SdsOptions::default(), &LatentCodec::Identity, &mut opt, &mut rng, Precision::F32).unwrap();
    assert_ne!(scene.store.checksum(), before);
}

#[test]
fn fixed_step_residual_uses_that_step() {
    let t = delta(vec![0.0; 3]);
    let x = Tensor::from_slice(&[3], &[0.5, -0.5, 1.0]);
    let s = sds_residual_at(&t, &x, None, 400, &mut stream(22, 0), SdsOptions::default()).unwrap();
    assert_eq!(s.t, 400);
    assert!(sds_residual_at(&t, &x, None, 5000, &mut stream(22, 0), SdsOptions::default()).is_err());
}

use super::*;
use crate::distill::{Component, MixtureTeacher, NoiseSchedule, Teacher};
use crate::generator::GeneratorConfig;
use proptest::prelude::*;
use rand::Rng;

fn tiny_generator(seed: u64) -> Generator {
    let config = GeneratorConfig {
        z_dim: 8,
        w_dim: 8,
        plane_res: 8,
        channels: 2,
        decoder_hidden: 8,
        adapter_count: 2,
        ..Default::default()
    };
    Generator::new(config, Vocabulary::lab(), &mut crate::rng::stream(seed, 0))
}

fn tiny_schedule() -> TrainSchedule {
    TrainSchedule {
        stage1_steps: 2,
        stage2_steps: 2,
        batch: 2,
        render_res: 8,
        render_samples: 4,
        r1_interval: 2,
        log_every: 0,
        ..Default::default()
    }
}

fn flat_teacher(res: usize) -> TeacherHandle {
    let vocab = Vocabulary::lab();
    let dim = res * res * 3;
    let conditions = vocab
        .all_combinations()
        .into_iter()
        .map(|a| {
            let mean = vec![0.3 + 0.1 * a.0[0].unwrap_or(0) as f64; dim];
            (a, vec![Component { mean, weight: 1.0, std: 0.05 }])
        })
        .collect();
    let mix = MixtureTeacher::new(dim, conditions).unwrap();
    TeacherHandle::new(Teacher::AnalyticMixture(mix), NoiseSchedule::default())
}

fn data(res: usize, n: usize) -> Vec<TrainItem> {
    let vocab = Vocabulary::lab();
    let mut rng = crate::rng::stream(5, 0);
    (0..n)
        .map(|_| TrainItem {
            image: Tensor::uniform(&[res, res, 3], 0.0, 1.0, &mut rng),
            attributes: vocab.sample_attributes(&mut rng),
        })
        .collect()
}

fn images(res: usize, n: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = crate::rng::stream(seed, 1);
    (0..n).map(|_| Tensor::uniform(&[res, res, 3], 0.0, 1.0, &mut rng)).collect()
}

#[test]
fn loss_examples() {
    let ln2 = 2f64.ln();
    assert!((d_loss(0.0, 0.0) - 2.0 * ln2).abs() < 1e-12);
    assert!((g_loss(0.0) - ln2).abs() < 1e-12);
    assert!((d_loss(2.0, -1.0) - ((-2f64).exp().ln_1p() + (-1f64).exp().ln_1p())).abs() < 1e-12);
    assert!(g_loss(40.0) < 1e-15);
    assert!((g_loss(-40.0) - 40.0).abs() < 1e-12);
}

#[test]
fn loss_limits_and_slope() {
    assert!(d_loss(20.0, -20.0) < 1e-8);
    assert!(g_loss(20.0) < 1e-8);
    let mut rng = crate::rng::stream(9, 0);
    for _ in 0..20 {
        let (a, b): (f64, f64) = (rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
        let want = (1.0 + (-a).exp()).ln() + (1.0 + b.exp()).ln();
        assert!((d_loss(a, b) - want).abs() < 1e-9);
    }
    let h = 1e-6;
    let fd = (g_loss(h) - g_loss(-h)) / (2.0 * h);
    assert!((fd + 0.5).abs() < 1e-8);
}

#[test]
fn r1_of_linear_critic_is_weight_norm() {
    let mut rng = crate::rng::stream(10, 0);
    let w = Tensor::randn(&[4, 4, 3], 1.0, &mut rng);
    let xs = images(4, 3, 11);
    let grads = input_grads_of(&xs, |g, vs| {
        let wv = g.constant(w.clone());
        vs.iter().map(|&x| g.reshape(g.sum(g.mul(x, wv)), &[1])).collect()
    });
    let p = grads.iter().map(|v| v.data().iter().map(|x| x * x).sum::<f64>()).sum::<f64>() / 3.0;
    let norm: f64 = w.data().iter().map(|x| x * x).sum();
    assert!((p - norm).abs() < 1e-9 * norm);
}

#[test]
fn discriminator_shapes_and_batch_coupling() {
    let d = Discriminator::new(8, 4, &mut crate::rng::stream(1, 0));
    let xs = images(8, 3, 2);
    let s = d.score(&xs);
    assert_eq!(s.len(), 3);
    assert!(s.iter().all(|v| v.is_finite()));
    let single = d.score(&xs[..1]);
    assert_eq!(single.len(), 1);
}

#[test]
fn r1_of_constant_critic_is_zero() {
    let mut d = Discriminator::new(8, 4, &mut crate::rng::stream(3, 0));
    let ids: Vec<ParamId> = d.store.ids().collect();
    for id in ids {
        if d.store.name(id) != "d.out.b" {
            let t = d.store.get(id).map(|_| 0.0);
            *d.store.get_mut(id) = t;
        }
    }
    let xs = images(8, 2, 4);
    assert_eq!(r1_penalty(&d, &xs), 0.0);
    let (p, grads) = r1_param_grads(&d, &xs);
    assert_eq!(p, 0.0);
    assert!(grads.iter().all(Option::is_none));
}

#[test]
fn r1_matches_finite_difference_oracle() {
    let d = Discriminator::new(8, 3, &mut crate::rng::stream(6, 0));
    let xs = images(8, 2, 7);
    let (p, grads) = r1_param_grads(&d, &xs);
    assert!((p - r1_penalty(&d, &xs)).abs() < 1e-12);
    let id = d.store.id("d.fc.w").unwrap();
    let idx = d.store.ids().position(|i| i == id).unwrap();
    let analytic = grads[idx].as_ref().unwrap();
    let mut checked = 0;
    for k in (0..analytic.len()).step_by(analytic.len() / 7 + 1) {
        let eps = 1e-5;
        let mut dp = d.clone();
        dp.store.get_mut(id).data_mut()[k] += eps;
        let mut dm = d.clone();
        dm.store.get_mut(id).data_mut()[k] -= eps;
        let fd = (r1_penalty(&dp, &xs) - r1_penalty(&dm, &xs)) / (2.0 * eps);
        let a = analytic.data()[k];
        assert!((a - fd).abs() <= 1e-2 * fd.abs().max(1e-2), "k={k} analytic {a} fd {fd}");
        checked += 1;
    }
    assert!(checked >= 5);
}

#[test]
fn clip_style_prefers_target_hue() {
    let vocab = Vocabulary::lab();
    let mut losses = Vec::new();
    for target in 0..6 {
        let g = Graph::new(Precision::F64);
        let c = crate::corpus::hsv_to_rgb(120.0, 0.75, 0.6);
        let mut data = Vec::new();
        for p in 0..16 {
            data.extend(if p < 8 { c.to_vec() } else { vec![1.0; 3] });
        }
        let img = g.constant(Tensor::new(&[4, 4, 3], data));
        let mut attrs = Attributes::empty(4);
        attrs.0[0] = Some(target);
        let l = clip_style_loss(&g, img, &attrs, &vocab).unwrap();
        losses.push(g.value(l).item());
    }
    let best = (0..6).min_by(|&a, &b| losses[a].total_cmp(&losses[b])).unwrap();
    assert_eq!(best, 2);
    let g = Graph::new(Precision::F64);
    let img = g.constant(Tensor::ones(&[4, 4, 3]));
    assert!(clip_style_loss(&g, img, &Attributes::empty(4), &vocab).is_none());
}

#[test]
fn stage_one_never_queries_teacher() {
    let mut gen = tiny_generator(1);
    let mut disc = Discriminator::new(8, 4, &mut crate::rng::stream(2, 0));
    let teacher = flat_teacher(8);
    let items = data(8, 6);
    let ctx = TrainContext { data: &items, teacher: &teacher, codec: &LatentCodec::Identity };
    let sched = TrainSchedule { stage2_steps: 0, ..tiny_schedule() };
    let mut state = TrainState::new(3, &sched);
    let log = two_stage_train(&mut gen, &mut disc, &ctx, &sched, &mut state, &mut |_, _| None).unwrap();
    assert_eq!(teacher.calls(), 0);
    assert_eq!(log.len(), 2);
    assert!(log.iter().all(|r| r.d_loss.is_finite() && r.g_loss.is_finite()));
}

#[test]
fn stage_two_queries_teacher_and_updates_generator() {
    let mut gen = tiny_generator(4);
    let before = gen.store.checksum();
    let mut disc = Discriminator::new(8, 4, &mut crate::rng::stream(2, 0));
    let teacher = flat_teacher(8);
    let items = data(8, 6);
    let ctx = TrainContext { data: &items, teacher: &teacher, codec: &LatentCodec::Identity };
    let sched = TrainSchedule { stage1_steps: 0, gan_weight: 0.0, ..tiny_schedule() };
    let mut state = TrainState::new(3, &sched);
    let log = two_stage_train(&mut gen, &mut disc, &ctx, &sched, &mut state, &mut |_, _| None).unwrap();
    assert_eq!(teacher.calls(), 2 * 2 * 2);
    assert!(log.iter().all(|r| r.sds_rms > 0.0));
    assert_ne!(gen.store.checksum(), before);
}

#[test]
fn frozen_generator_is_untouched() {
    let mut gen = tiny_generator(5);
    let before = gen.store.checksum();
    let mut disc = Discriminator::new(8, 4, &mut crate::rng::stream(2, 0));
    let dbefore = disc.store.checksum();
    let teacher = flat_teacher(8);
    let items = data(8, 6);
    let ctx = TrainContext { data: &items, teacher: &teacher, codec: &LatentCodec::Identity };
    let sched = TrainSchedule { freeze_g: true, ..tiny_schedule() };
    let mut state = TrainState::new(3, &sched);
    two_stage_train(&mut gen, &mut disc, &ctx, &sched, &mut state, &mut |_, _| None).unwrap();
    assert_eq!(gen.store.checksum(), before);
    assert_ne!(disc.store.checksum(), dbefore);
}

#[test]
fn frozen_discriminator_is_untouched() {
    let mut gen = tiny_generator(6);
    let mut disc = Discriminator::new(8, 4, &mut crate::rng::stream(2, 0));
    let dbefore = disc.store.checksum();
    let teacher = flat_teacher(8);
    let items = data(8, 6);
    let ctx = TrainContext { data: &items, teacher: &teacher, codec: &LatentCodec::Identity };
    let sched = TrainSchedule { freeze_d: true, stage2_steps: 0, ..tiny_schedule() };
    let mut state = TrainState::new(3, &sched);
    let log = two_stage_train(&mut gen, &mut disc, &ctx, &sched, &mut state, &mut |_, _| None).unwrap();
    assert_eq!(disc.store.checksum(), dbefore);
    assert!(log.iter().all(|r| r.d_loss > 0.0));
}

#[test]
fn monitor_runs_on_log_steps() {
    let mut gen = tiny_generator(7);
    let mut disc = Discriminator::new(8, 4, &mut crate::rng::stream(2, 0));
    let teacher = flat_teacher(8);
    let items = data(8, 4);
    let ctx = TrainContext { data: &items, teacher: &teacher, codec: &LatentCodec::Identity };
    let sched = TrainSchedule { stage2_steps: 1, log_every: 2, ..tiny_schedule() };
    let mut state = TrainState::new(3, &sched);
    let mut seen = Vec::new();
    let log = two_stage_train(&mut gen, &mut disc, &ctx, &sched, &mut state, &mut |_, s| {
        seen.push(s);
        Some(Snapshot { diversity: 1.0, coverage: 0.5, msc: 0.25 })
    })
    .unwrap();
    assert_eq!(seen, vec![0, 2, 3]);
    assert_eq!(log.iter().filter(|r| r.msc.is_some()).count(), 3);
}

#[test]
fn empty_data_is_rejected() {
    let mut gen = tiny_generator(8);
    let mut disc = Discriminator::new(8, 4, &mut crate::rng::stream(2, 0));
    let teacher = flat_teacher(8);
    let ctx = TrainContext { data: &[], teacher: &teacher, codec: &LatentCodec::Identity };
    let sched = tiny_schedule();
    let mut state = TrainState::new(3, &sched);
    assert!(matches!(
        two_stage_train(&mut gen, &mut disc, &ctx, &sched, &mut state, &mut |_, _| None),
        Err(TrainError::NoData)
    ));
}

proptest! {
    #[test]
    fn losses_are_convex_and_monotone(a in -20.0f64..20.0, b in -20.0f64..20.0, h in 0.01f64..1.0) {
        let mid = g_loss((a + b) / 2.0);
        prop_assert!(mid <= (g_loss(a) + g_loss(b)) / 2.0 + 1e-12);
        prop_assert!(g_loss(a + h) <= g_loss(a));
        prop_assert!(d_loss(a + h, b) <= d_loss(a, b));
        prop_assert!(d_loss(a, b + h) >= d_loss(a, b));
    }

    #[test]
    fn prompt_sampling_keeps_a_slot(seed in 0u64..500, p in 0.0f64..1.0) {
        let vocab = Vocabulary::lab();
        let (prompt, attrs) = sample_condition(&vocab, p, &mut crate::rng::stream(seed, 0));
        prop_assert!(attrs.specified() >= 1);
        prop_assert_eq!(vocab.parse(&prompt), attrs);
    }
}

//! Discriminator, non-saturating GAN losses with an R1 penalty, and the
//! two-stage trainer that adds distribution-level score distillation.

use rand::Rng;
use serde::Serialize;

use crate::autodiff::{linear, softplus, Adam, Binding, Graph, ParamId, ParamStore, Precision, Tensor, Var};
use crate::distill::{sds_gradient, DistillError, LatentCodec, SdsOptions, TeacherHandle};
use crate::generator::{GenerateError, Generator};
use crate::render::{CameraPose, Stratification};
use crate::text::{encode_text, Attributes, Vocabulary, LRELU};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("non-finite {what} at step {step}")]
    NonFinite { step: usize, what: &'static str },
    #[error(transparent)]
    Distill(#[from] DistillError),
    #[error(transparent)]
    Generate(#[from] GenerateError),
    #[error("training data is empty")]
    NoData,
}

/// Small convolutional critic with a minibatch standard-deviation feature.
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub res: usize,
    pub store: ParamStore,
    convs: Vec<(ParamId, ParamId, bool)>,
    fc: (ParamId, ParamId),
    out: (ParamId, ParamId),
}

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(res: usize, channels: usize, rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        let mut convs = Vec::new();
        let he = |fan: usize| (2.0 / fan as f64).sqrt();
        let mut cin = 3;
        let mut r = res;
        let mut c = channels;
        let w = store.add("d.conv0.w", Tensor::randn(&[3, 3, cin, c], he(9 * cin), rng));
        let b = store.add("d.conv0.b", Tensor::zeros(&[c]));
        convs.push((w, b, false));
        cin = c;
        let mut k = 1;
        while r > 4 && r % 2 == 0 {
            if k > 1 {
                c = (2 * c).min(4 * channels);
            }
            let w = store.add(format!("d.conv{k}.w"), Tensor::randn(&[3, 3, cin, c], he(9 * cin), rng));
            let b = store.add(format!("d.conv{k}.b"), Tensor::zeros(&[c]));
            convs.push((w, b, true));
            cin = c;
            r /= 2;
            k += 1;
        }
        let flat = r * r * (c + 1);
        let fc = (
            store.add("d.fc.w", Tensor::randn(&[flat, c], he(flat), rng)),
            store.add("d.fc.b", Tensor::zeros(&[c])),
        );
        let out = (
            store.add("d.out.w", Tensor::randn(&[c, 1], (1.0 / c as f64).sqrt(), rng)),
            store.add("d.out.b", Tensor::zeros(&[1])),
        );
        Discriminator { res, store, convs, fc, out }
    }

    fn features(&self, g: &Graph, b: &Binding, x: Var) -> Var {
        let mut h = g.add_scalar(g.mul_scalar(x, 2.0), -1.0);
        for &(w, bias, pool) in &self.convs {
            h = g.leaky_relu(g.add(g.conv2d(h, b.var(w)), b.var(bias)), LRELU);
            if pool {
                h = g.avg_pool2x(h);
            }
        }
        h
    }

    /// One logit per image; images share the minibatch statistic.
    pub fn logits(&self, g: &Graph, b: &Binding, images: &[Var]) -> Vec<Var> {
        let feats: Vec<Var> = images.iter().map(|&x| self.features(g, b, x)).collect();
        let shape = g.shape(feats[0]);
        let (r, c) = (shape[0], shape[1]);
        let ch = shape[2];
        let stat = if feats.len() > 1 {
            let stacked: Vec<Var> = feats.iter().map(|&f| g.reshape(f, &[1, r, c, ch])).collect();
            let all = g.concat(&stacked, 0);
            let mu = g.reshape(g.mean_axis(all, 0), &[r, c, ch]);
            let var = g.mean_axis(g.square(g.sub(all, mu)), 0);
            g.mean(g.powf(g.add_scalar(var, 1e-8), 0.5))
        } else {
            g.scalar(0.0)
        };
        let stat_map = g.expand(g.reshape(stat, &[1, 1, 1]), &[r, c, 1]);
        feats
            .iter()
            .map(|&f| {
                let f = g.concat(&[f, stat_map], 2);
                let f = g.reshape(f, &[1, r * c * (ch + 1)]);
                let h = g.leaky_relu(linear(g, f, b.var(self.fc.0), b.var(self.fc.1)), LRELU);
                g.reshape(linear(g, h, b.var(self.out.0), b.var(self.out.1)), &[1])
            })
            .collect()
    }

    /// Logits as plain numbers.
    pub fn score(&self, images: &[Tensor]) -> Vec<f64> {
        let g = Graph::new(Precision::F64);
        let b = self.store.bind(&g, |_| false);
        let xs: Vec<Var> = images.iter().map(|t| g.constant(t.clone())).collect();
        self.logits(&g, &b, &xs).iter().map(|&l| g.value(l).item()).collect()
    }
}

/// `softplus(−l_real) + softplus(l_fake)`.
pub fn d_loss(logit_real: f64, logit_fake: f64) -> f64 {
    softplus(-logit_real) + softplus(logit_fake)
}

/// `softplus(−l_fake)`.
pub fn g_loss(logit_fake: f64) -> f64 {
    softplus(-logit_fake)
}

/// Mean over the batch of `‖∂S/∂x_i‖²` with `S` the summed logits.
pub fn r1_penalty(disc: &Discriminator, reals: &[Tensor]) -> f64 {
    input_grads(disc, reals).iter().map(|v| v.data().iter().map(|x| x * x).sum::<f64>()).sum::<f64>() / reals.len() as f64
}

fn input_grads(disc: &Discriminator, reals: &[Tensor]) -> Vec<Tensor> {
    input_grads_of(reals, |g, xs| {
        let b = disc.store.bind(g, |_| false);
        disc.logits(g, &b, xs)
    })
}

fn input_grads_of(reals: &[Tensor], critic: impl Fn(&Graph, &[Var]) -> Vec<Var>) -> Vec<Tensor> {
    let g = Graph::new(Precision::F64);
    let xs: Vec<Var> = reals.iter().map(|t| g.param(t.clone())).collect();
    let s = critic(&g, &xs);
    let total = s.into_iter().reduce(|a, c| g.add(a, c)).expect("nonempty batch");
    let mut grads = g.backward(total).expect("finite logits");
    xs.iter().map(|&x| grads.take(x).expect("inputs receive gradients")).collect()
}

/// Parameter gradient of [`r1_penalty`] without second-order autodiff:
/// `∇θ P ≈ (2/B)·∇θ[(S(x + h·v) − S(x − h·v)) / 2h]`, `v = stopgrad(∂S/∂x)`.
pub fn r1_param_grads(disc: &Discriminator, reals: &[Tensor]) -> (f64, Vec<Option<Tensor>>) {
    let v = input_grads(disc, reals);
    let penalty = v.iter().map(|t| t.data().iter().map(|x| x * x).sum::<f64>()).sum::<f64>() / reals.len() as f64;
    let vmax = v.iter().map(Tensor::max_abs).fold(0.0, f64::max);
    if vmax == 0.0 {
        return (0.0, vec![None; disc.store.len()]);
    }
    let h = 1e-3 / vmax;
    let g = Graph::new(Precision::F64);
    let b = disc.store.bind(&g, |_| true);
    let shifted = |sign: f64| -> Vec<Var> {
        reals
            .iter()
            .zip(&v)
            .map(|(x, d)| g.constant(x.zip_map(d, |a, e| a + sign * h * e)))
            .collect()
    };
    let (plus, minus) = (shifted(1.0), shifted(-1.0));
    let sp = disc.logits(&g, &b, &plus).into_iter().reduce(|a, c| g.add(a, c)).unwrap();
    let sm = disc.logits(&g, &b, &minus).into_iter().reduce(|a, c| g.add(a, c)).unwrap();
    let dir = g.mul_scalar(g.sub(sp, sm), 2.0 / (2.0 * h * reals.len() as f64));
    let mut grads = g.backward(dir).expect("finite logits");
    (penalty, b.collect(&mut grads))
}

/// Semantic signal used alongside the GAN loss in the second stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize)]
pub enum SemanticLoss {
    #[default]
    Dsds,
    /// Image/text embedding agreement from a color-only image encoder.
    ClipStyle,
    None,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSchedule {
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub lambda_sds: f64,
    pub grad_accum: usize,
    pub batch: usize,
    pub gan_weight: f64,
    pub r1_gamma: f64,
    pub r1_interval: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub freeze_g: bool,
    pub freeze_d: bool,
    pub semantic: SemanticLoss,
    pub sds: SdsOptions,
    pub render_res: usize,
    pub render_samples: usize,
    /// Per-slot probability of leaving a slot out of a training prompt.
    pub prompt_dropout: f64,
    pub log_every: usize,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            stage1_steps: 200,
            stage2_steps: 400,
            lambda_sds: 0.01,
            grad_accum: 1,
            batch: 4,
            gan_weight: 1.0,
            r1_gamma: 1.0,
            r1_interval: 16,
            lr_g: 2e-3,
            lr_d: 2e-3,
            freeze_g: false,
            freeze_d: false,
            semantic: SemanticLoss::Dsds,
            sds: SdsOptions::default(),
            render_res: 24,
            render_samples: 12,
            prompt_dropout: 0.25,
            log_every: 50,
        }
    }
}

/// One training image with its attributes.
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub image: Tensor,
    pub attributes: Attributes,
}

/// Training poses: the three evaluation azimuths.
pub fn train_pose<R: Rng + ?Sized>(res: usize, rng: &mut R) -> CameraPose {
    let az = crate::corpus::EVAL_AZIMUTHS[rng.random_range(0..3)];
    CameraPose::orbit(az, crate::corpus::EVAL_ELEVATION, res)
}

/// A prompt drawn from `P_y`: uniform attributes, random slot dropout with at
/// least one slot kept, random paraphrase.
pub fn sample_condition<R: Rng + ?Sized>(vocab: &Vocabulary, dropout: f64, rng: &mut R) -> (String, Attributes) {
    let full = vocab.sample_attributes(rng);
    let keep = rng.random_range(0..vocab.num_slots());
    let attrs = Attributes(
        full.0
            .iter()
            .enumerate()
            .map(|(s, v)| if s != keep && rng.random::<f64>() < dropout { None } else { *v })
            .collect(),
    );
    let t = rng.random_range(0..crate::text::NUM_TEMPLATES);
    (vocab.caption(&attrs, t), attrs)
}

/// Per-pixel chroma-weighted mean color, centered over channels.
fn chroma_direction(g: &Graph, img: Var) -> Var {
    let s = g.shape(img);
    let flat = g.reshape(img, &[s[0] * s[1], 3]);
    let hi = g.max_axis(flat, 1);
    let lo = g.neg(g.max_axis(g.neg(flat), 1));
    let chroma = g.sub(hi, lo);
    let wsum = g.add_scalar(g.sum(chroma), 1e-6);
    let weighted = g.sum_axis(g.mul(flat, g.expand(chroma, &[s[0] * s[1], 3])), 0);
    let mean = g.mul(weighted, g.powf(wsum, -1.0));
    let centered = g.sub(mean, g.expand(g.mean_axis(mean, 1), &[1, 3]));
    g.reshape(centered, &[1, 3])
}

/// Cross-entropy of the prompted hair hue under a softmax over cosine
/// similarities between the image's chroma direction and each hue.
pub fn clip_style_loss(g: &Graph, img: Var, attrs: &Attributes, vocab: &Vocabulary) -> Option<Var> {
    let slot = vocab.slot_index("hair")?;
    let target = attrs.0.get(slot).copied().flatten()?;
    let n = vocab.slots[slot].values.len();
    let dir = chroma_direction(g, img);
    let norm = g.powf(g.add_scalar(g.sum(g.square(dir)), 1e-8), 0.5);
    let unit = g.mul(dir, g.powf(norm, -1.0));
    let mut refs = Vec::with_capacity(n * 3);
    for k in 0..n {
        let c = crate::corpus::hsv_to_rgb(k as f64 * 360.0 / n as f64, 1.0, 1.0);
        let m = (c[0] + c[1] + c[2]) / 3.0;
        let d = [c[0] - m, c[1] - m, c[2] - m];
        let l = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        refs.extend(d.map(|x| x / l));
    }
    let r = g.constant(Tensor::new(&[n, 3], refs));
    let logits = g.mul_scalar(g.matmul(unit, g.transpose(r)), 8.0);
    let p = g.softmax(logits);
    let pt = g.slice(p, 1, target, 1);
    Some(g.neg(g.log(g.add_scalar(pt, 1e-9))))
}

/// One line of the metrics log.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub d_loss: f64,
    pub g_loss: f64,
    pub sds_rms: f64,
    pub diversity: Option<f64>,
    pub coverage: Option<f64>,
    pub msc: Option<f64>,
}

/// Diversity, coverage and MSC measured on a generator snapshot.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Snapshot {
    pub diversity: f64,
    pub coverage: f64,
    pub msc: f64,
}

/// Mutable training state carried across calls and checkpoints.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub step: usize,
    pub rng: crate::rng::Rng,
    pub opt_g: Adam,
    pub opt_d: Adam,
}

impl TrainState {
    pub fn new(seed: u64, schedule: &TrainSchedule) -> Self {
        TrainState {
            step: 0,
            rng: crate::rng::stream(seed, 11),
            opt_g: Adam::with_betas(schedule.lr_g, 0.0, 0.99),
            opt_d: Adam::with_betas(schedule.lr_d, 0.0, 0.99),
        }
    }
}

pub struct TrainContext<'a> {
    pub data: &'a [TrainItem],
    pub teacher: &'a TeacherHandle,
    pub codec: &'a LatentCodec,
}

fn accumulate(acc: &mut Vec<Option<Tensor>>, grads: Vec<Option<Tensor>>) {
    if acc.is_empty() {
        *acc = grads;
        return;
    }
    for (a, g) in acc.iter_mut().zip(grads) {
        match (a.as_mut(), g) {
            (Some(a), Some(g)) => *a = a.zip_map(&g, |x, y| x + y),
            (None, Some(g)) => *a = Some(g),
            _ => {}
        }
    }
}

fn scale_grads(grads: &mut [Option<Tensor>], k: f64) {
    for t in grads.iter_mut().flatten() {
        *t = t.map(|x| x * k);
    }
}

fn finite(grads: &[Option<Tensor>]) -> bool {
    grads.iter().flatten().all(Tensor::is_finite)
}

struct GenOut {
    loss: f64,
    sds_rms: f64,
    grads: Vec<Option<Tensor>>,
}

fn generator_pass(
    gen: &Generator,
    disc: &Discriminator,
    ctx: &TrainContext,
    sched: &TrainSchedule,
    stage2: bool,
    rng: &mut crate::rng::Rng,
    step: usize,
) -> Result<GenOut, TrainError> {
    let g = Graph::new(Precision::F32);
    let b = gen.store.bind(&g, |_| true);
    let bd = disc.store.bind(&g, |_| false);
    let mut images = Vec::with_capacity(sched.batch);
    let mut conds = Vec::with_capacity(sched.batch);
    for _ in 0..sched.batch {
        let z = gen.sample_z(rng);
        let (prompt, attrs) = sample_condition(&gen.vocab, sched.prompt_dropout, rng);
        let pose = train_pose(sched.render_res, rng);
        let tokens = encode_text(&prompt, &gen.vocab).map_err(GenerateError::from)?;
        let f = gen.forward(&g, &b, &z, &tokens)?;
        let strat = Stratification::Jittered(rng.random());
        let r = gen.render(&g, &b, &f.planes, &pose, sched.render_samples, strat)?;
        images.push(r.image);
        conds.push(attrs);
    }
    let mut terms: Vec<Var> = Vec::new();
    let mut loss = 0.0;
    if sched.gan_weight > 0.0 {
        let logits = disc.logits(&g, &bd, &images);
        let parts: Vec<Var> = logits.iter().map(|&l| g.softplus(g.neg(l))).collect();
        let mean = g.mul_scalar(g.sum(g.concat(&parts, 0)), 1.0 / sched.batch as f64);
        loss = g.value(mean).item();
        terms.push(g.mul_scalar(mean, sched.gan_weight));
    }
    let mut seeds = Vec::new();
    let mut sds_rms = 0.0;
    if stage2 {
        match sched.semantic {
            SemanticLoss::Dsds if sched.lambda_sds > 0.0 => {
                for (img, attrs) in images.iter().zip(&conds) {
                    let ((lat, grad), s) = sds_gradient(&g, ctx.teacher, *img, Some(attrs), rng, sched.sds, ctx.codec)?;
                    seeds.push((lat, grad.map(|v| v * sched.lambda_sds / sched.batch as f64)));
                    sds_rms += s.residual_rms / sched.batch as f64;
                }
            }
            SemanticLoss::ClipStyle if sched.lambda_sds > 0.0 => {
                for (img, attrs) in images.iter().zip(&conds) {
                    if let Some(l) = clip_style_loss(&g, *img, attrs, &gen.vocab) {
                        terms.push(g.mul_scalar(l, sched.lambda_sds / sched.batch as f64));
                    }
                }
            }
            _ => {}
        }
    }
    if !loss.is_finite() || !sds_rms.is_finite() {
        return Err(TrainError::NonFinite { step, what: "generator loss" });
    }
    if let Some(total) = terms.into_iter().reduce(|a, c| g.add(a, c)) {
        seeds.push((total, Tensor::ones(&[1])));
    }
    if seeds.is_empty() {
        return Ok(GenOut { loss, sds_rms, grads: vec![None; gen.store.len()] });
    }
    let mut grads = g.backward_seeded(&seeds).map_err(|_| TrainError::NonFinite { step, what: "generator gradient" })?;
    Ok(GenOut { loss, sds_rms, grads: b.collect(&mut grads) })
}

fn render_fakes(gen: &Generator, sched: &TrainSchedule, rng: &mut crate::rng::Rng) -> Result<Vec<Tensor>, TrainError> {
    let mut out = Vec::with_capacity(sched.batch);
    for _ in 0..sched.batch {
        let z = gen.sample_z(rng);
        let (prompt, _) = sample_condition(&gen.vocab, sched.prompt_dropout, rng);
        let pose = train_pose(sched.render_res, rng);
        let tokens = encode_text(&prompt, &gen.vocab).map_err(GenerateError::from)?;
        let g = Graph::new(Precision::F32);
        let b = gen.store.bind(&g, |_| false);
        let f = gen.forward(&g, &b, &z, &tokens)?;
        let r = gen.render(&g, &b, &f.planes, &pose, sched.render_samples, Stratification::Jittered(rng.random()))?;
        let t = g.value(r.image).clone();
        out.push(t);
    }
    Ok(out)
}

fn discriminator_step(
    disc: &mut Discriminator,
    reals: &[Tensor],
    fakes: &[Tensor],
    sched: &TrainSchedule,
    opt: &mut Adam,
    step: usize,
) -> Result<f64, TrainError> {
    let g = Graph::new(Precision::F32);
    let b = disc.store.bind(&g, |_| !sched.freeze_d);
    let rv: Vec<Var> = reals.iter().map(|t| g.constant(t.clone())).collect();
    let fv: Vec<Var> = fakes.iter().map(|t| g.constant(t.clone())).collect();
    let lr = disc.logits(&g, &b, &rv);
    let lf = disc.logits(&g, &b, &fv);
    let mut parts = Vec::new();
    for (&r, &f) in lr.iter().zip(&lf) {
        parts.push(g.add(g.softplus(g.neg(r)), g.softplus(f)));
    }
    let loss = g.mul_scalar(g.sum(g.concat(&parts, 0)), 1.0 / parts.len() as f64);
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(TrainError::NonFinite { step, what: "discriminator loss" });
    }
    if sched.freeze_d {
        return Ok(value);
    }
    let mut grads = g.backward(loss).map_err(|_| TrainError::NonFinite { step, what: "discriminator gradient" })?;
    let mut gs = b.collect(&mut grads);
    if sched.r1_gamma > 0.0 && sched.r1_interval > 0 && step % sched.r1_interval == 0 {
        let (_, mut r1) = r1_param_grads(disc, reals);
        scale_grads(&mut r1, 0.5 * sched.r1_gamma * sched.r1_interval as f64);
        accumulate(&mut gs, r1);
    }
    if !finite(&gs) {
        return Err(TrainError::NonFinite { step, what: "discriminator gradient" });
    }
    opt.step(&mut disc.store, &gs, Precision::F32);
    Ok(value)
}

/// Stage one alternates generator and discriminator updates on the GAN loss
/// alone; stage two adds the semantic loss to the generator update.
/// `monitor` is called every `log_every` steps and after the last step.
pub fn two_stage_train(
    gen: &mut Generator,
    disc: &mut Discriminator,
    ctx: &TrainContext,
    sched: &TrainSchedule,
    state: &mut TrainState,
    monitor: &mut dyn FnMut(&Generator, usize) -> Option<Snapshot>,
) -> Result<Vec<MetricsRecord>, TrainError> {
    if ctx.data.is_empty() {
        return Err(TrainError::NoData);
    }
    let total = sched.stage1_steps + sched.stage2_steps;
    let mut log = Vec::new();
    let record = |gen: &Generator, rec: MetricsRecord, monitor: &mut dyn FnMut(&Generator, usize) -> Option<Snapshot>| {
        let snap = monitor(gen, rec.step);
        MetricsRecord {
            diversity: snap.map(|s| s.diversity),
            coverage: snap.map(|s| s.coverage),
            msc: snap.map(|s| s.msc),
            ..rec
        }
    };
    if state.step == 0 && sched.log_every > 0 {
        log.push(record(gen, MetricsRecord::default(), monitor));
    }
    while state.step < total {
        let step = state.step + 1;
        let stage2 = state.step >= sched.stage1_steps;
        let mut d_value = 0.0;
        if sched.gan_weight > 0.0 {
            let reals: Vec<Tensor> = (0..sched.batch)
                .map(|_| ctx.data[state.rng.random_range(0..ctx.data.len())].image.clone())
                .collect();
            let fakes = render_fakes(gen, sched, &mut state.rng)?;
            d_value = discriminator_step(disc, &reals, &fakes, sched, &mut state.opt_d, step)?;
        }
        let mut acc = Vec::new();
        let (mut g_value, mut sds_rms) = (0.0, 0.0);
        let k = sched.grad_accum.max(1);
        for _ in 0..k {
            let out = generator_pass(gen, disc, ctx, sched, stage2, &mut state.rng, step)?;
            g_value += out.loss / k as f64;
            sds_rms += out.sds_rms / k as f64;
            accumulate(&mut acc, out.grads);
        }
        scale_grads(&mut acc, 1.0 / k as f64);
        if !finite(&acc) {
            return Err(TrainError::NonFinite { step, what: "generator gradient" });
        }
        if !sched.freeze_g {
            state.opt_g.step(&mut gen.store, &acc, Precision::F32);
        }
        state.step = step;
        let rec = MetricsRecord {
            step,
            d_loss: d_value,
            g_loss: g_value,
            sds_rms,
            ..Default::default()
        };
        if sched.log_every > 0 && (step % sched.log_every == 0 || step == total) {
            log.push(record(gen, rec, monitor));
        } else {
            log.push(rec);
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests;

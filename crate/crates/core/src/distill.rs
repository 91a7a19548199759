//! Noise schedules, frozen diffusion teachers and score-distillation
//! gradients for single points and for whole generator distributions.

use std::cell::Cell;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::{json, Value};

use crate::autodiff::{
    linear, Adam, AutodiffError, Binding, Graph, ParamId, ParamStore, Precision, Tensor, Var,
};
use crate::render::{camera_rays, volume_render, Decoder, DecoderVars, RenderError, Stratification, TriPlane, WHITE};
use crate::text::{Attributes, LRELU};

#[derive(Debug, thiserror::Error)]
pub enum DistillError {
    #[error("timestep {t} outside [0, {max}]")]
    TimestepRange { t: usize, max: usize },
    #[error("teacher has no components for condition `{0}`")]
    UnknownCondition(String),
    #[error("non-finite score-distillation gradient at t = {t} (residual rms {rms})")]
    NonFinite { t: usize, rms: f64 },
    #[error("denoiser training diverged at step {0}")]
    Diverged(usize),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("{0}")]
    Model(String),
    #[error("teacher spec: {0}")]
    Spec(String),
}

/// Discrete variance schedule with `ᾱ_0 = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// `β_t` linear from `beta_1` to `beta_T` over `t = 1..=T`.
    pub fn linear(steps: usize, beta_1: f64, beta_t: f64) -> Self {
        assert!(steps >= 2, "at least two steps");
        assert!(0.0 < beta_1 && beta_1 <= beta_t && beta_t < 1.0, "betas must lie in (0, 1)");
        let betas: Vec<f64> = (0..steps)
            .map(|i| beta_1 + (beta_t - beta_1) * i as f64 / (steps - 1) as f64)
            .collect();
        let mut alpha_bars = Vec::with_capacity(steps + 1);
        alpha_bars.push(1.0);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        NoiseSchedule { betas, alpha_bars }
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64, DistillError> {
        self.alpha_bars.get(t).copied().ok_or(DistillError::TimestepRange {
            t,
            max: self.steps(),
        })
    }

    fn ab(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// `w(t) = 1 − ᾱ_t`.
    pub fn weight(&self, t: usize) -> f64 {
        1.0 - self.ab(t)
    }

    /// Timesteps drawn by distillation: `[0.02T, 0.98T]`.
    pub fn t_range(&self) -> (usize, usize) {
        let t = self.steps() as f64;
        (((0.02 * t).round() as usize).max(1), (0.98 * t).round() as usize)
    }

    pub fn sample_t<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let (lo, hi) = self.t_range();
        rng.random_range(lo..=hi)
    }

    pub fn to_json(&self) -> Value {
        json!({"steps": self.steps(), "beta_1": self.betas[0], "beta_T": self.betas[self.steps() - 1]})
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(1000, 1e-4, 0.02)
    }
}

/// `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε`.
pub fn q_sample(x0: &[f64], t: usize, eps: &[f64], schedule: &NoiseSchedule) -> Result<Vec<f64>, DistillError> {
    assert_eq!(x0.len(), eps.len(), "noise shape must match x0");
    let ab = schedule.alpha_bar(t)?;
    let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + s * e).collect())
}

pub fn standard_normal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// One isotropic Gaussian component.
#[derive(Clone, Debug, PartialEq)]
pub struct Component {
    pub mean: Vec<f64>,
    pub weight: f64,
    /// Per-coordinate standard deviation `s`.
    pub std: f64,
}

/// Gaussian-mixture data distribution per condition, with the exact
/// Bayes-optimal noise prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureTeacher {
    pub dim: usize,
    /// `(condition, components)`; weights within a condition sum to one.
    pub conditions: Vec<(Attributes, Vec<Component>)>,
}

impl MixtureTeacher {
    pub fn new(dim: usize, conditions: Vec<(Attributes, Vec<Component>)>) -> Result<Self, DistillError> {
        for (key, comps) in &conditions {
            let total: f64 = comps.iter().map(|c| c.weight).sum();
            if comps.is_empty() || (total - 1.0).abs() > 1e-9 {
                return Err(DistillError::Spec(format!("weights of `{}` must sum to one", key.key())));
            }
            if comps.iter().any(|c| c.mean.len() != dim || !(c.std >= 0.0)) {
                return Err(DistillError::Spec(format!("bad component in `{}`", key.key())));
            }
        }
        Ok(MixtureTeacher { dim, conditions })
    }

    /// A single unconditional component.
    pub fn single(mean: Vec<f64>, std: f64) -> Self {
        let dim = mean.len();
        MixtureTeacher {
            dim,
            conditions: vec![(Attributes(vec![]), vec![Component { mean, weight: 1.0, std }])],
        }
    }

    /// Components for a (possibly partial) condition; `None` marginalizes
    /// over every condition with equal prior mass.
    pub fn components(&self, cond: Option<&Attributes>) -> Result<Vec<(f64, &Component)>, DistillError> {
        let matching: Vec<&(Attributes, Vec<Component>)> = match cond {
            None => self.conditions.iter().collect(),
            Some(c) => self
                .conditions
                .iter()
                .filter(|(k, _)| k.0.len() == c.0.len() && c.matches(k))
                .collect(),
        };
        if matching.is_empty() {
            return Err(DistillError::UnknownCondition(cond.map_or("-".into(), Attributes::key)));
        }
        let share = 1.0 / matching.len() as f64;
        Ok(matching
            .into_iter()
            .flat_map(|(_, comps)| comps.iter().map(move |c| (share * c.weight, c)))
            .collect())
    }

    /// `E[x0 | x_t, y]`.
    pub fn posterior_mean(&self, x_t: &[f64], cond: Option<&Attributes>, ab: f64) -> Result<Vec<f64>, DistillError> {
        let comps = self.components(cond)?;
        let d = self.dim as f64;
        let sa = ab.sqrt();
        let logs: Vec<f64> = comps
            .iter()
            .map(|(w, c)| {
                let v = ab * c.std * c.std + (1.0 - ab);
                let sq: f64 = x_t.iter().zip(&c.mean).map(|(x, m)| (x - sa * m).powi(2)).sum();
                w.ln() - 0.5 * d * v.ln() - sq / (2.0 * v)
            })
            .collect();
        let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let resp: Vec<f64> = logs.iter().map(|l| (l - top).exp()).collect();
        let z: f64 = resp.iter().sum();
        let mut out = vec![0.0; self.dim];
        for (r, (_, c)) in resp.iter().zip(&comps) {
            let v = ab * c.std * c.std + (1.0 - ab);
            let gain = sa * c.std * c.std / v;
            for ((o, m), x) in out.iter_mut().zip(&c.mean).zip(x_t) {
                *o += r / z * (m + gain * (x - sa * m));
            }
        }
        Ok(out)
    }

    /// Draw from the mixture for a condition.
    pub fn sample<R: Rng + ?Sized>(&self, cond: Option<&Attributes>, rng: &mut R) -> Result<Vec<f64>, DistillError> {
        let comps = self.components(cond)?;
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = comps[comps.len() - 1].1;
        for (w, c) in &comps {
            acc += w;
            if u < acc {
                pick = c;
                break;
            }
        }
        let eps = standard_normal(self.dim, rng);
        Ok(pick.mean.iter().zip(eps).map(|(m, e)| m + pick.std * e).collect())
    }

    pub fn to_json(&self) -> Value {
        json!({
            "dim": self.dim,
            "conditions": self.conditions.iter().map(|(k, comps)| json!({
                "condition": k.key(),
                "components": comps.iter().map(|c| json!({"weight": c.weight, "std": c.std, "mean": c.mean})).collect::<Vec<_>>(),
            })).collect::<Vec<_>>(),
        })
    }

    pub fn from_json(v: &Value) -> Result<Self, DistillError> {
        let bad = |m: &str| DistillError::Spec(m.to_string());
        let dim = v["dim"].as_u64().ok_or_else(|| bad("missing dim"))? as usize;
        let mut conditions = Vec::new();
        for c in v["conditions"].as_array().ok_or_else(|| bad("missing conditions"))? {
            let key = c["condition"].as_str().ok_or_else(|| bad("missing condition key"))?;
            let attrs = parse_key(key).ok_or_else(|| bad("malformed condition key"))?;
            let mut comps = Vec::new();
            for comp in c["components"].as_array().ok_or_else(|| bad("missing components"))? {
                comps.push(Component {
                    weight: comp["weight"].as_f64().ok_or_else(|| bad("missing weight"))?,
                    std: comp["std"].as_f64().ok_or_else(|| bad("missing std"))?,
                    mean: serde_json::from_value(comp["mean"].clone()).map_err(|e| bad(&e.to_string()))?,
                });
            }
            conditions.push((attrs, comps));
        }
        Self::new(dim, conditions)
    }
}

fn parse_key(key: &str) -> Option<Attributes> {
    if key.is_empty() {
        return Some(Attributes(vec![]));
    }
    key.split('.')
        .map(|p| if p == "-" { Ok(None) } else { p.parse().map(Some) })
        .collect::<Result<Vec<_>, _>>()
        .ok()
        .map(Attributes)
}

/// Frozen noise predictor.
#[derive(Clone, Debug)]
pub enum Teacher {
    AnalyticMixture(MixtureTeacher),
    LearnedDenoiser(LearnedDenoiser),
}

/// Teacher plus schedule with a call counter.
#[derive(Debug)]
pub struct TeacherHandle {
    pub teacher: Teacher,
    pub schedule: NoiseSchedule,
    calls: Cell<u64>,
}

impl TeacherHandle {
    pub fn new(teacher: Teacher, schedule: NoiseSchedule) -> Self {
        TeacherHandle {
            teacher,
            schedule,
            calls: Cell::new(0),
        }
    }

    pub fn calls(&self) -> u64 {
        self.calls.get()
    }

    /// Fingerprint of the teacher parameters.
    pub fn checksum(&self) -> u64 {
        match &self.teacher {
            Teacher::AnalyticMixture(m) => {
                let mut store = ParamStore::new();
                for (i, (_, comps)) in m.conditions.iter().enumerate() {
                    for (j, c) in comps.iter().enumerate() {
                        store.add(format!("{i}.{j}"), Tensor::new(&[c.mean.len()], c.mean.clone()));
                        store.add(format!("{i}.{j}.s"), Tensor::from_slice(&[2], &[c.weight, c.std]));
                    }
                }
                store.checksum()
            }
            Teacher::LearnedDenoiser(d) => d.store.checksum(),
        }
    }

    /// `ε̂(x_t; y, t)`.
    pub fn epsilon(&self, x_t: &[f64], cond: Option<&Attributes>, t: usize) -> Result<Vec<f64>, DistillError> {
        self.calls.set(self.calls.get() + 1);
        let ab = self.schedule.alpha_bar(t)?;
        let x0 = match &self.teacher {
            Teacher::AnalyticMixture(m) => m.posterior_mean(x_t, cond, ab)?,
            Teacher::LearnedDenoiser(d) => d.predict_x0(x_t, cond, ab),
        };
        Ok(eps_from_x0(x_t, &x0, ab))
    }

    pub fn to_json(&self) -> Value {
        let (variant, body) = match &self.teacher {
            Teacher::AnalyticMixture(m) => ("analytic_mixture", m.to_json()),
            Teacher::LearnedDenoiser(d) => ("learned_denoiser", d.spec_json()),
        };
        json!({"variant": variant, "schedule": self.schedule.to_json(), "teacher": body})
    }
}

fn eps_from_x0(x_t: &[f64], x0: &[f64], ab: f64) -> Vec<f64> {
    let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
    x_t.iter().zip(x0).map(|(x, m)| (x - a * m) / s).collect()
}

/// `ε_u + g·(ε_c − ε_u)`.
pub fn cfg_combine(eps_cond: &[f64], eps_uncond: &[f64], g: f64) -> Vec<f64> {
    assert_eq!(eps_cond.len(), eps_uncond.len());
    eps_uncond.iter().zip(eps_cond).map(|(u, c)| u + g * (c - u)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum RescaleMode {
    #[default]
    Off,
    /// Shrink the residual so its RMS never exceeds that of the noise.
    NormMatch,
}

fn rms(v: &[f64]) -> f64 {
    (v.iter().map(|x| x * x).sum::<f64>() / v.len().max(1) as f64).sqrt()
}

pub fn rescale_residual(residual: &[f64], eps: &[f64], mode: RescaleMode) -> Vec<f64> {
    match mode {
        RescaleMode::Off => residual.to_vec(),
        RescaleMode::NormMatch => {
            let (r, e) = (rms(residual), rms(eps));
            let denom = r.max(e);
            let scale = if denom > 0.0 { e / denom } else { 1.0 };
            residual.iter().map(|x| x * scale).collect()
        }
    }
}

/// Per-pixel affine latent map `x' = x·A + a` over the trailing channel axis
/// (identity when absent); the decoder is only used for reconstruction.
#[derive(Clone, Debug, PartialEq, Default)]
pub enum LatentCodec {
    #[default]
    Identity,
    Affine {
        enc_w: Tensor,
        enc_b: Tensor,
        dec_w: Tensor,
        dec_b: Tensor,
    },
}

impl LatentCodec {
    pub fn identity_affine(channels: usize) -> Self {
        let mut eye = Tensor::zeros(&[channels, channels]);
        for i in 0..channels {
            eye.data_mut()[i * channels + i] = 1.0;
        }
        LatentCodec::Affine {
            enc_w: eye.clone(),
            enc_b: Tensor::zeros(&[channels]),
            dec_w: eye,
            dec_b: Tensor::zeros(&[channels]),
        }
    }

    /// Encoder on the graph; its Jacobian is part of the chain rule.
    pub fn encode(&self, g: &Graph, x: Var) -> Var {
        match self {
            LatentCodec::Identity => x,
            LatentCodec::Affine { enc_w, enc_b, .. } => {
                let s = g.shape(x);
                let c = *s.last().unwrap();
                let flat = g.reshape(x, &[s.iter().product::<usize>() / c, c]);
                let y = linear(g, flat, g.constant(enc_w.clone()), g.constant(enc_b.clone()));
                g.reshape(y, &s)
            }
        }
    }

    pub fn encode_values(&self, x: &Tensor) -> Tensor {
        let g = Graph::new(Precision::F64);
        let v = self.encode(&g, g.constant(x.clone()));
        let out = g.value(v).clone();
        out
    }

    pub fn decode_values(&self, x: &Tensor) -> Tensor {
        match self {
            LatentCodec::Identity => x.clone(),
            LatentCodec::Affine { dec_w, dec_b, .. } => {
                let g = Graph::new(Precision::F64);
                let s = x.shape().to_vec();
                let c = *s.last().unwrap();
                let flat = g.constant(x.clone().reshaped(&[x.len() / c, c]));
                let y = linear(&g, flat, g.constant(dec_w.clone()), g.constant(dec_b.clone()));
                let out = g.value(y).clone().reshaped(&s);
                out
            }
        }
    }

    /// Fit the decoder to invert the encoder by least squares on `samples`.
    pub fn fit_decoder(&mut self, samples: &[Tensor], steps: usize, lr: f64) -> f64 {
        let LatentCodec::Affine { .. } = self else { return 0.0 };
        let mut loss = 0.0;
        let mut store = ParamStore::new();
        let (dw, db) = match self {
            LatentCodec::Affine { dec_w, dec_b, .. } => (store.add("w", dec_w.clone()), store.add("b", dec_b.clone())),
            LatentCodec::Identity => unreachable!(),
        };
        let mut opt = Adam::new(lr);
        for step in 0..steps {
            let x = &samples[step % samples.len()];
            let c = *x.shape().last().unwrap();
            let lat = self.encode_values(x).reshaped(&[x.len() / c, c]);
            let g = Graph::new(Precision::F64);
            let b = store.bind(&g, |_| true);
            let y = linear(&g, g.constant(lat), b.var(dw), b.var(db));
            let target = g.constant(x.clone().reshaped(&[x.len() / c, c]));
            let l = g.mean(g.square(g.sub(y, target)));
            loss = g.value(l).item();
            let mut grads = g.backward(l).expect("finite reconstruction loss");
            let gs = b.collect(&mut grads);
            opt.step(&mut store, &gs, Precision::F64);
        }
        if let LatentCodec::Affine { dec_w, dec_b, .. } = self {
            *dec_w = store.get(dw).clone();
            *dec_b = store.get(db).clone();
        }
        loss
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SdsOptions {
    pub cfg_g: f64,
    pub rescale: RescaleMode,
}

impl Default for SdsOptions {
    fn default() -> Self {
        SdsOptions {
            cfg_g: 3.0,
            rescale: RescaleMode::Off,
        }
    }
}

/// The injected adjoint with its diagnostics.
#[derive(Clone, Debug)]
pub struct SdsSample {
    pub grad: Tensor,
    pub t: usize,
    pub residual_rms: f64,
}

/// `w(t)·rescale(ε̂ − ε)` at latent `x` (plain values; nothing flows into
/// the teacher).
pub fn sds_residual<R: Rng + ?Sized>(
    teacher: &TeacherHandle,
    x: &Tensor,
    cond: Option<&Attributes>,
    rng: &mut R,
    opts: SdsOptions,
) -> Result<SdsSample, DistillError> {
    let t = teacher.schedule.sample_t(rng);
    sds_residual_at(teacher, x, cond, t, rng, opts)
}

/// [`sds_residual`] at a fixed timestep.
pub fn sds_residual_at<R: Rng + ?Sized>(
    teacher: &TeacherHandle,
    x: &Tensor,
    cond: Option<&Attributes>,
    t: usize,
    rng: &mut R,
    opts: SdsOptions,
) -> Result<SdsSample, DistillError> {
    let schedule = &teacher.schedule;
    let eps = standard_normal(x.len(), rng);
    let x_t = q_sample(x.data(), t, &eps, schedule)?;
    let eps_hat = match cond {
        Some(c) if opts.cfg_g != 1.0 => {
            let ec = teacher.epsilon(&x_t, Some(c), t)?;
            let eu = teacher.epsilon(&x_t, None, t)?;
            cfg_combine(&ec, &eu, opts.cfg_g)
        }
        _ => teacher.epsilon(&x_t, cond, t)?,
    };
    let residual: Vec<f64> = eps_hat.iter().zip(&eps).map(|(a, b)| a - b).collect();
    let residual = rescale_residual(&residual, &eps, opts.rescale);
    let w = schedule.weight(t);
    let grad: Vec<f64> = residual.iter().map(|r| w * r).collect();
    let r = rms(&residual);
    if !r.is_finite() || grad.iter().any(|v| !v.is_finite()) {
        return Err(DistillError::NonFinite { t, rms: r });
    }
    Ok(SdsSample {
        grad: Tensor::new(x.shape(), grad),
        t,
        residual_rms: r,
    })
}

/// Encodes the image `x` on the graph and returns the seed pair to inject
/// together with its diagnostics.
pub fn sds_gradient<R: Rng + ?Sized>(
    g: &Graph,
    teacher: &TeacherHandle,
    x: Var,
    cond: Option<&Attributes>,
    rng: &mut R,
    opts: SdsOptions,
    codec: &LatentCodec,
) -> Result<((Var, Tensor), SdsSample), DistillError> {
    let latent = codec.encode(g, x);
    let value = g.value(latent).clone();
    let s = sds_residual(teacher, &value, cond, rng, opts)?;
    Ok(((latent, s.grad.clone()), s))
}

/// One draw from the sampling distributions of a distillation step.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub z: Vec<f64>,
    pub prompt: String,
    pub attrs: Option<Attributes>,
    pub pose: crate::render::CameraPose,
}

/// Anything whose parameters render an image for a sample.
pub trait Distillable {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    /// Image on `g` for `sample`, differentiable in the bound parameters.
    fn render_sample(&self, g: &Graph, b: &Binding, sample: &Sample) -> Result<Var, DistillError>;
    fn trainable(&self, _name: &str) -> bool {
        true
    }
}

/// A raw image buffer optimized directly.
#[derive(Clone, Debug)]
pub struct PixelBuffer {
    pub store: ParamStore,
    pub id: ParamId,
}

impl PixelBuffer {
    pub fn new(init: Tensor) -> Self {
        let mut store = ParamStore::new();
        let id = store.add("pixels", init);
        PixelBuffer { store, id }
    }
}

impl Distillable for PixelBuffer {
    fn params(&self) -> &ParamStore {
        &self.store
    }
    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
    fn render_sample(&self, _g: &Graph, b: &Binding, _s: &Sample) -> Result<Var, DistillError> {
        Ok(b.var(self.id))
    }
}

/// One tri-plane scene optimized on its own, the per-prompt baseline.
#[derive(Clone, Debug)]
pub struct TriPlaneScene {
    pub store: ParamStore,
    pub samples: usize,
}

const SCENE_PARAMS: [&str; 7] = ["xy", "yz", "zx", "w1", "b1", "w2", "b2"];

impl TriPlaneScene {
    pub fn new(init: &TriPlane, samples: usize) -> Self {
        let mut store = ParamStore::new();
        let d = &init.decoder;
        let ts = [&init.planes[0], &init.planes[1], &init.planes[2], &d.w1, &d.b1, &d.w2, &d.b2];
        for (name, t) in SCENE_PARAMS.iter().zip(ts) {
            store.add(*name, t.clone());
        }
        TriPlaneScene { store, samples }
    }

    pub fn triplane(&self) -> TriPlane {
        let t = |i: usize| self.store.get(self.store.id(SCENE_PARAMS[i]).expect("scene parameter")).clone();
        TriPlane {
            planes: [t(0), t(1), t(2)],
            decoder: Decoder {
                w1: t(3),
                b1: t(4),
                w2: t(5),
                b2: t(6),
            },
        }
    }
}

impl Distillable for TriPlaneScene {
    fn params(&self) -> &ParamStore {
        &self.store
    }
    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
    fn render_sample(&self, g: &Graph, b: &Binding, s: &Sample) -> Result<Var, DistillError> {
        let v = |i: usize| b.var(self.store.id(SCENE_PARAMS[i]).expect("scene parameter"));
        let planes = [v(0), v(1), v(2)];
        let dec = DecoderVars {
            w1: v(3),
            b1: v(4),
            w2: v(5),
            b2: v(6),
        };
        let model = |e: RenderError| DistillError::Model(e.to_string());
        let rays = camera_rays(&s.pose, self.samples, Stratification::Midpoint).map_err(model)?;
        Ok(volume_render(g, &planes, &dec, &rays, WHITE).map_err(model)?.image)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Optimizer {
    Adam(Adam),
    Sgd(f64),
}

impl Optimizer {
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], precision: Precision) {
        match self {
            Optimizer::Adam(a) => a.step(store, grads, precision),
            Optimizer::Sgd(lr) => crate::autodiff::sgd_step(store, grads, *lr, precision),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepDiagnostics {
    pub sds_rms: f64,
    pub mean_t: f64,
}

/// Sampling distributions over latents, prompts and poses.
pub trait Samplers {
    fn sample(&self, rng: &mut crate::rng::Rng) -> Sample;
}

impl<F: Fn(&mut crate::rng::Rng) -> Sample> Samplers for F {
    fn sample(&self, rng: &mut crate::rng::Rng) -> Sample {
        self(rng)
    }
}

/// Distribution-level step: a batch of `(z, y, pose)` draws, one injected
/// adjoint per rendered image, one optimizer update.
#[allow(clippy::too_many_arguments)]
pub fn dsds_step<M: Distillable>(
    model: &mut M,
    samplers: &dyn Samplers,
    batch: usize,
    teacher: &TeacherHandle,
    opts: SdsOptions,
    codec: &LatentCodec,
    optimizer: &mut Optimizer,
    sample_rng: &mut crate::rng::Rng,
    noise_rng: &mut crate::rng::Rng,
    precision: Precision,
) -> Result<StepDiagnostics, DistillError> {
    assert!(batch >= 1, "batch size must be positive");
    let g = Graph::new(precision);
    let b = model.params().bind(&g, |n| model.trainable(n));
    let mut seeds = Vec::with_capacity(batch);
    let mut diag = StepDiagnostics::default();
    for _ in 0..batch {
        let sample = samplers.sample(sample_rng);
        let x = model.render_sample(&g, &b, &sample)?;
        let ((latent, grad), s) = sds_gradient(&g, teacher, x, sample.attrs.as_ref(), noise_rng, opts, codec)?;
        seeds.push((latent, grad.map(|v| v / batch as f64)));
        diag.sds_rms += s.residual_rms / batch as f64;
        diag.mean_t += s.t as f64 / batch as f64;
    }
    let mut grads = g.backward_seeded(&seeds)?;
    let gs = b.collect(&mut grads);
    optimizer.step(model.params_mut(), &gs, precision);
    Ok(diag)
}

/// Single-point score distillation: fixed `(z, y, pose)`.
#[allow(clippy::too_many_arguments)]
pub fn sds_step<M: Distillable>(
    model: &mut M,
    sample: &Sample,
    teacher: &TeacherHandle,
    opts: SdsOptions,
    codec: &LatentCodec,
    optimizer: &mut Optimizer,
    noise_rng: &mut crate::rng::Rng,
    precision: Precision,
) -> Result<StepDiagnostics, DistillError> {
    let g = Graph::new(precision);
    let b = model.params().bind(&g, |n| model.trainable(n));
    let x = model.render_sample(&g, &b, sample)?;
    let latent = codec.encode(&g, x);
    let value = g.value(latent).clone();
    let s = sds_residual(teacher, &value, sample.attrs.as_ref(), noise_rng, opts)?;
    let mut grads = g.backward_seeded(&[(latent, s.grad)])?;
    let gs = b.collect(&mut grads);
    optimizer.step(model.params_mut(), &gs, precision);
    Ok(StepDiagnostics {
        sds_rms: s.residual_rms,
        mean_t: s.t as f64,
    })
}

/// Small U-shaped convolutional network predicting `x0` from `x_t`, the
/// noise level and an optional condition vector.
#[derive(Clone, Debug)]
pub struct LearnedDenoiser {
    pub res: usize,
    pub channels: usize,
    pub hidden: usize,
    pub cond_dim: usize,
    pub store: ParamStore,
    ids: DenoiserIds,
    /// Condition vectors by attribute key.
    pub cond_table: Vec<(Attributes, Vec<f64>)>,
}

#[derive(Clone, Debug)]
struct DenoiserIds {
    c_in: ParamId,
    b_in: ParamId,
    cond_w: ParamId,
    c_mid: ParamId,
    b_mid: ParamId,
    c_up: ParamId,
    b_up: ParamId,
    c_out: ParamId,
    b_out: ParamId,
    mean: ParamId,
    cond_mean: ParamId,
}

impl LearnedDenoiser {
    pub fn new<R: Rng + ?Sized>(res: usize, channels: usize, hidden: usize, cond_dim: usize, rng: &mut R) -> Self {
        assert!(res % 2 == 0, "resolution must be even");
        let mut s = ParamStore::new();
        let cin = channels + 2;
        let h = hidden;
        let std = |fan: usize| 1.0 / (fan as f64).sqrt();
        let ids = DenoiserIds {
            c_in: s.add("in.w", Tensor::randn(&[3, 3, cin, h], std(9 * cin), rng)),
            b_in: s.add("in.b", Tensor::zeros(&[h])),
            cond_w: s.add("cond.w", Tensor::randn(&[cond_dim.max(1), h], std(cond_dim.max(1)), rng)),
            c_mid: s.add("mid.w", Tensor::randn(&[3, 3, h, h], std(9 * h), rng)),
            b_mid: s.add("mid.b", Tensor::zeros(&[h])),
            c_up: s.add("up.w", Tensor::randn(&[3, 3, 2 * h, h], std(18 * h), rng)),
            b_up: s.add("up.b", Tensor::zeros(&[h])),
            c_out: s.add("out.w", Tensor::randn(&[1, 1, h, channels], 0.1 * std(h), rng)),
            b_out: s.add("out.b", Tensor::zeros(&[channels])),
            mean: s.add("mean", Tensor::zeros(&[res, res, channels])),
            cond_mean: s.add("cond.mean", Tensor::zeros(&[cond_dim.max(1), res * res * channels])),
        };
        LearnedDenoiser {
            res,
            channels,
            hidden,
            cond_dim,
            store: s,
            ids,
            cond_table: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.res * self.res * self.channels
    }

    fn cond_vector(&self, cond: Option<&Attributes>) -> Vec<f64> {
        let zero = vec![0.0; self.cond_dim.max(1)];
        let Some(c) = cond else { return zero };
        // partial conditions average the matching entries
        let hits: Vec<&Vec<f64>> = self
            .cond_table
            .iter()
            .filter(|(k, _)| k.0.len() == c.0.len() && c.matches(k))
            .map(|(_, v)| v)
            .collect();
        if hits.is_empty() {
            return zero;
        }
        let mut out = zero;
        for h in &hits {
            for (o, v) in out.iter_mut().zip(h.iter()) {
                *o += v / hits.len() as f64;
            }
        }
        out
    }

    /// `x0` estimate on the graph.
    pub fn forward(&self, g: &Graph, b: &Binding, x_t: &[f64], cond: &[f64], ab: f64) -> Var {
        let (r, c) = (self.res, self.channels);
        let mut input = Vec::with_capacity(r * r * (c + 2));
        for p in x_t.chunks(c) {
            input.extend_from_slice(p);
            input.push(ab.sqrt());
            input.push((1.0 - ab).sqrt());
        }
        let x = g.constant(Tensor::new(&[r, r, c + 2], input));
        let cv = g.constant(Tensor::new(&[1, cond.len()], cond.to_vec()));
        let id = &self.ids;
        let cb = g.reshape(g.matmul(cv, b.var(id.cond_w)), &[self.hidden]);
        let h1 = g.conv2d(x, b.var(id.c_in));
        let h1 = g.leaky_relu(g.add(g.add(h1, b.var(id.b_in)), cb), LRELU);
        let d = g.avg_pool2x(h1);
        let d = g.leaky_relu(g.add(g.conv2d(d, b.var(id.c_mid)), b.var(id.b_mid)), LRELU);
        let u = g.upsample2x(d);
        let u = g.concat(&[u, h1], 2);
        let u = g.leaky_relu(g.add(g.conv2d(u, b.var(id.c_up)), b.var(id.b_up)), LRELU);
        let out = g.add(g.conv2d(u, b.var(id.c_out)), b.var(id.b_out));
        let cm = g.reshape(g.matmul(cv, b.var(id.cond_mean)), &[r, r, c]);
        g.add(g.add(out, b.var(id.mean)), cm)
    }

    pub fn predict_x0(&self, x_t: &[f64], cond: Option<&Attributes>, ab: f64) -> Vec<f64> {
        let g = Graph::new(Precision::F64);
        let b = self.store.bind(&g, |_| false);
        let cv = self.cond_vector(cond);
        let out = self.forward(&g, &b, x_t, &cv, ab);
        let v = g.value(out).data().to_vec();
        v
    }

    fn spec_json(&self) -> Value {
        json!({"res": self.res, "channels": self.channels, "hidden": self.hidden, "cond_dim": self.cond_dim, "checksum": format!("{:016x}", self.store.checksum())})
    }
}

/// Minimizes `E‖ε_φ(x_t; y, t) − ε‖²` over `dataset`; returns the running
/// losses. Conditions are dropped with probability `uncond_prob` so the
/// unconditional branch is learned too.
pub fn train_denoiser<R: Rng + ?Sized>(
    den: &mut LearnedDenoiser,
    dataset: &[(Vec<f64>, Option<Attributes>)],
    schedule: &NoiseSchedule,
    steps: usize,
    lr: f64,
    uncond_prob: f64,
    rng: &mut R,
) -> Result<Vec<f64>, DistillError> {
    let mut opt = Adam::new(lr);
    let mut losses = Vec::with_capacity(steps);
    let (lo, hi) = schedule.t_range();
    for step in 0..steps {
        let (x0, cond) = &dataset[rng.random_range(0..dataset.len())];
        let cond = if rng.random::<f64>() < uncond_prob { None } else { cond.as_ref() };
        let t = rng.random_range(lo..=hi);
        let ab = schedule.ab(t);
        let eps = standard_normal(x0.len(), rng);
        let x_t = q_sample(x0, t, &eps, schedule)?;
        let g = Graph::new(Precision::F32);
        let b = den.store.bind(&g, |_| true);
        let cv = den.cond_vector(cond);
        let x0_hat = den.forward(&g, &b, &x_t, &cv, ab);
        // ε̂ = (x_t − √ᾱ·x̂0)/√(1−ᾱ), so the ε error is a scaled x0 error
        let scale = ab.sqrt() / (1.0 - ab).sqrt();
        let shape = g.shape(x0_hat);
        let target = g.constant(Tensor::new(&shape, x0.clone()));
        let err = g.mul_scalar(g.sub(x0_hat, target), scale);
        let loss = g.mean(g.square(err));
        let l = g.value(loss).item();
        if !l.is_finite() {
            return Err(DistillError::Diverged(step));
        }
        losses.push(l);
        let mut grads = g.backward(loss).map_err(|_| DistillError::Diverged(step))?;
        let gs = b.collect(&mut grads);
        opt.step(&mut den.store, &gs, Precision::F32);
    }
    Ok(losses)
}

#[cfg(test)]
mod tests;

//! Experiment setup shared by the commands: corpus, teacher, metric probes and
//! the evaluation suite.

use serde::Serialize;

use crate::adversarial::{two_stage_train, Discriminator, MetricsRecord, Snapshot, TrainContext, TrainError, TrainItem, TrainState};
use crate::autodiff::Tensor;
use crate::config::{Config, TeacherKind};
use crate::corpus::{eval_views, make_corpus, CorpusItem, Nuisance, SceneSpec, EVAL_AZIMUTHS, EVAL_ELEVATION};
use crate::distill::{train_denoiser, Component, LatentCodec, LearnedDenoiser, MixtureTeacher, Teacher, TeacherHandle};
use crate::generator::Generator;
use crate::image_io::Image;
use crate::metrics::{
    diversity_of, features, fid_analog, mode_coverage, msc_from_images, rp_analog, MetricError, Probe,
};
use crate::render::CameraPose;
use crate::text::{Attributes, Vocabulary};

/// Nuisance draws per attribute key and pose in the analytic teacher.
pub const TEACHER_VARIANTS: usize = 2;

/// RNG stream ids, one per independent consumer.
pub mod streams {
    pub const CORPUS: u64 = 1;
    pub const GENERATOR: u64 = 2;
    pub const DISCRIMINATOR: u64 = 3;
    pub const TEACHER: u64 = 4;
    pub const METRICS: u64 = 5;
    pub const EVAL: u64 = 6;
}

pub fn vocabulary(config: &Config) -> Vocabulary {
    Vocabulary::with_slot_count(config.slots)
}

pub fn image_tensor(img: &Image) -> Tensor {
    Tensor::new(&[img.height, img.width, 3], img.data.clone())
}

/// Gaussian-mixture teacher over rendered images: for every complete
/// attribute assignment, one component per training pose and nuisance draw.
pub fn analytic_teacher(vocab: &Vocabulary, res: usize, std: f64, seed: u64) -> MixtureTeacher {
    let mut rng = crate::rng::stream(seed, streams::TEACHER);
    let nuisances: Vec<Nuisance> = (0..TEACHER_VARIANTS)
        .map(|k| if k == 0 { Nuisance::NEUTRAL } else { Nuisance::sample(&mut rng) })
        .collect();
    let weight = 1.0 / (EVAL_AZIMUTHS.len() * nuisances.len()) as f64;
    let conditions = vocab
        .all_combinations()
        .into_iter()
        .map(|attrs| {
            let mut comps = Vec::new();
            for &az in &EVAL_AZIMUTHS {
                let pose = CameraPose::orbit(az, EVAL_ELEVATION, res);
                for n in &nuisances {
                    let img = SceneSpec::from_attributes(vocab, &attrs, *n).render(&pose, 2);
                    comps.push(Component { mean: img.data, weight, std });
                }
            }
            (attrs, comps)
        })
        .collect();
    MixtureTeacher::new(res * res * 3, conditions).expect("weights sum to one")
}

fn one_hot(vocab: &Vocabulary, attrs: &Attributes) -> Vec<f64> {
    let mut v = Vec::new();
    for (slot, value) in vocab.slot_sizes().iter().zip(&attrs.0) {
        let mut h = vec![0.0; *slot];
        if let Some(i) = value {
            h[*i] = 1.0;
        }
        v.extend(h);
    }
    v
}

/// Denoiser trained on the corpus images at the training resolution.
pub fn learned_teacher(config: &Config, vocab: &Vocabulary, data: &[TrainItem]) -> Result<LearnedDenoiser, TrainError> {
    let mut rng = crate::rng::stream(config.seed, streams::TEACHER);
    let cond_dim: usize = vocab.slot_sizes().iter().sum();
    let mut den = LearnedDenoiser::new(config.train_res, 3, 16, cond_dim, &mut rng);
    den.cond_table = vocab
        .all_combinations()
        .into_iter()
        .map(|a| {
            let v = one_hot(vocab, &a);
            (a, v)
        })
        .collect();
    let dataset: Vec<(Vec<f64>, Option<Attributes>)> =
        data.iter().map(|d| (d.image.data().to_vec(), Some(d.attributes.clone()))).collect();
    train_denoiser(&mut den, &dataset, &config.noise_schedule(), config.denoiser_steps, 3e-3, 0.1, &mut rng)?;
    Ok(den)
}

/// Everything a run needs besides the trainable networks.
pub struct Lab {
    pub config: Config,
    pub vocab: Vocabulary,
    pub corpus: Vec<CorpusItem>,
    pub data: Vec<TrainItem>,
    pub teacher: TeacherHandle,
    pub codec: LatentCodec,
    pub probe: Probe,
    /// Complete attribute sets with their template-0 captions.
    pub metric_prompts: Vec<(String, Attributes)>,
    pub metric_zs: Vec<Vec<f64>>,
}

impl Lab {
    pub fn new(config: &Config) -> Result<Self, TrainError> {
        let vocab = vocabulary(config);
        let corpus = make_corpus(&vocab, config.corpus_size, config.seed ^ streams::CORPUS, config.train_res);
        let data: Vec<TrainItem> = corpus
            .iter()
            .map(|c| TrainItem {
                image: image_tensor(&c.image),
                attributes: c.attributes.clone(),
            })
            .collect();
        let teacher = match config.teacher {
            TeacherKind::Analytic => {
                Teacher::AnalyticMixture(analytic_teacher(&vocab, config.train_res, config.teacher_std, config.seed))
            }
            TeacherKind::Learned => Teacher::LearnedDenoiser(learned_teacher(config, &vocab, &data)?),
        };
        let mut rng = crate::rng::stream(config.seed, streams::METRICS);
        let metric_prompts = (0..config.metric_prompts)
            .map(|_| {
                let a = vocab.sample_attributes(&mut rng);
                (vocab.caption(&a, 0), a)
            })
            .collect();
        let z_dim = config.z_dim;
        let metric_zs = (0..config.diversity_z)
            .map(|_| Tensor::randn(&[z_dim], 1.0, &mut rng).into_data())
            .collect();
        Ok(Lab {
            probe: Probe::new(&vocab, config.eval_res),
            teacher: TeacherHandle::new(teacher, config.noise_schedule()),
            codec: LatentCodec::Identity,
            config: config.clone(),
            vocab,
            corpus,
            data,
            metric_prompts,
            metric_zs,
        })
    }

    pub fn new_generator(&self) -> Generator {
        let mut rng = crate::rng::stream(self.config.seed, streams::GENERATOR);
        Generator::new(self.config.generator_config(), self.vocab.clone(), &mut rng)
    }

    pub fn new_discriminator(&self) -> Discriminator {
        let mut rng = crate::rng::stream(self.config.seed, streams::DISCRIMINATOR);
        Discriminator::new(self.config.train_res, self.config.disc_channels, &mut rng)
    }

    pub fn new_state(&self) -> TrainState {
        TrainState::new(self.config.seed, &self.config.train_schedule())
    }

    /// Runs the remaining schedule from `state`, logging snapshots.
    pub fn train(&self, gen: &mut Generator, disc: &mut Discriminator, state: &mut TrainState) -> Result<Vec<MetricsRecord>, TrainError> {
        let total = self.config.stage1_steps + self.config.stage2_steps;
        self.train_until(gen, disc, state, total)
    }

    /// Like [`Lab::train`] but stops after global step `until`.
    pub fn train_until(
        &self,
        gen: &mut Generator,
        disc: &mut Discriminator,
        state: &mut TrainState,
        until: usize,
    ) -> Result<Vec<MetricsRecord>, TrainError> {
        let ctx = TrainContext {
            data: &self.data,
            teacher: &self.teacher,
            codec: &self.codec,
        };
        let mut sched = self.config.train_schedule();
        let until = until.min(sched.stage1_steps + sched.stage2_steps);
        if until <= sched.stage1_steps {
            sched.stage1_steps = until;
            sched.stage2_steps = 0;
        } else {
            sched.stage2_steps = until - sched.stage1_steps;
        }
        two_stage_train(gen, disc, &ctx, &sched, state, &mut |g, _| self.snapshot(g).ok())
    }

    /// Mean per-prompt diversity over the metric prompts at the frontal view.
    pub fn diversity(&self, gen: &Generator, res: usize, samples: usize) -> Result<f64, MetricError> {
        let pose = eval_views(res)[0];
        let mut total = 0.0;
        for (prompt, _) in &self.metric_prompts {
            let imgs = self
                .metric_zs
                .iter()
                .map(|z| gen.generate(z, prompt, &pose, samples))
                .collect::<Result<Vec<_>, _>>()?;
            total += diversity_of(&imgs)?;
        }
        Ok(total / self.metric_prompts.len() as f64)
    }

    /// Fraction of teacher components of each metric prompt that some
    /// generation at the training resolution lands on.
    pub fn coverage(&self, gen: &Generator) -> Result<f64, MetricError> {
        let Teacher::AnalyticMixture(mix) = &self.teacher.teacher else {
            return Ok(f64::NAN);
        };
        let res = self.config.train_res;
        let mut total = 0.0;
        for (prompt, attrs) in &self.metric_prompts {
            let mut samples = Vec::new();
            for &az in &EVAL_AZIMUTHS {
                let pose = CameraPose::orbit(az, EVAL_ELEVATION, res);
                for z in &self.metric_zs {
                    samples.push(gen.generate(z, prompt, &pose, self.config.render_samples)?.data);
                }
            }
            let comps: Vec<Component> = mix
                .components(Some(attrs))
                .map_err(|_| MetricError::NoComponents)?
                .into_iter()
                .map(|(_, c)| c.clone())
                .collect();
            total += mode_coverage(&samples, &comps)?;
        }
        Ok(total / self.metric_prompts.len() as f64)
    }

    /// MSC averaged over the metric prompts with the first metric latent.
    pub fn msc(&self, gen: &Generator) -> Result<f64, MetricError> {
        let views = eval_views(self.config.eval_res);
        let mut total = 0.0;
        for (prompt, _) in &self.metric_prompts {
            let imgs = views
                .iter()
                .map(|p| gen.generate(&self.metric_zs[0], prompt, p, self.config.eval_samples))
                .collect::<Result<Vec<_>, _>>()?;
            total += msc_from_images(&self.probe, prompt, &imgs);
        }
        Ok(total / self.metric_prompts.len() as f64)
    }

    pub fn snapshot(&self, gen: &Generator) -> Result<Snapshot, MetricError> {
        Ok(Snapshot {
            diversity: self.diversity(gen, self.config.train_res, self.config.render_samples)?,
            coverage: self.coverage(gen)?,
            msc: self.msc(gen)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PromptReport {
    pub prompt: String,
    pub msc: f64,
    pub probed: Option<String>,
    pub satisfied: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub fid_analog: f64,
    pub msc_mean: f64,
    pub rp_analog: f64,
    pub diversity: f64,
    pub coverage: f64,
    pub per_prompt: Vec<PromptReport>,
}

/// Number of distractor captions in the retrieval metric.
pub const RP_DISTRACTORS: usize = 16;

/// Full metric suite against a corpus. Generations reuse each corpus item's
/// caption and pose so the feature statistics are comparable.
pub fn evaluate(lab: &Lab, gen: &Generator, corpus: &[CorpusItem], limit: usize) -> Result<EvalReport, MetricError> {
    let items = &corpus[..corpus.len().min(limit)];
    if items.is_empty() {
        return Err(MetricError::TooFewSamples(1));
    }
    let size = items[0].image.width;
    let probe = if size == lab.config.eval_res {
        lab.probe.clone()
    } else {
        Probe::new(&gen.vocab, size)
    };
    let mut rng = crate::rng::stream(lab.config.seed, streams::EVAL);
    let mut generated = Vec::with_capacity(items.len());
    let mut per_prompt = Vec::with_capacity(items.len());
    let mut msc_total = 0.0;
    for item in items {
        let z = gen.sample_z(&mut rng);
        let prompt = &item.captions[0];
        let views = eval_views(size)
            .iter()
            .map(|p| gen.generate(&z, prompt, p, lab.config.eval_samples))
            .collect::<Result<Vec<_>, _>>()?;
        let msc = msc_from_images(&probe, prompt, &views);
        msc_total += msc;
        let pose = item.pose;
        let view = EVAL_AZIMUTHS.iter().position(|a| *a == pose.azimuth);
        let img = match view {
            Some(k) if pose.elevation == EVAL_ELEVATION && pose.image_size == size => views[k].clone(),
            _ => gen.generate(&z, prompt, &pose, lab.config.eval_samples)?,
        };
        let probed = probe.probe(&views[0]);
        per_prompt.push(PromptReport {
            prompt: prompt.clone(),
            msc,
            probed: probed.as_ref().map(|a| gen.vocab.caption(a, 0)),
            satisfied: crate::metrics::satisfied(&item.attributes, probed.as_ref()),
        });
        generated.push((img, views[0].clone(), item.attributes.clone()));
    }
    let fa: Vec<Vec<f64>> = items.iter().map(|i| features(&i.image)).collect();
    let fb: Vec<Vec<f64>> = generated.iter().map(|(img, _, _)| features(img)).collect();
    let fid = fid_analog(&fa, &fb)?;
    let evals: Vec<(Image, Attributes)> = generated.into_iter().map(|(_, f, a)| (f, a)).collect();
    let rp = rp_analog(&probe, &evals, RP_DISTRACTORS, &mut rng);
    Ok(EvalReport {
        fid_analog: fid,
        msc_mean: msc_total / items.len() as f64,
        rp_analog: rp,
        diversity: lab.diversity(gen, size, lab.config.eval_samples)?,
        coverage: lab.coverage(gen)?,
        per_prompt,
    })
}

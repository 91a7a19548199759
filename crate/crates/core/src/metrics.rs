//! Attribute probe, joint text/image embedding and the evaluation metrics
//! built on them.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::Serialize;

use crate::corpus::{eval_views, rgb_to_hsv, Nuisance, SceneSpec, AGE_ELONGATION, GENDER_SIZE};
use crate::distill::Component;
use crate::generator::{GenerateError, Generator};
use crate::image_io::Image;
use crate::render::CameraPose;
use crate::text::{encode_text, Attributes, Vocabulary};

#[derive(Debug, thiserror::Error)]
pub enum MetricError {
    #[error("mixture has no components")]
    NoComponents,
    #[error("need at least {0} samples")]
    TooFewSamples(usize),
    #[error(transparent)]
    Generate(#[from] GenerateError),
}

const FG_MIN_CHANNEL: f64 = 0.9;
const DARK_MAX_CHANNEL: f64 = 0.2;
const SAT_MIN: f64 = 0.45;
const MARKER_FRACTION: f64 = 0.01;

/// Region statistics of one image.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImageStats {
    pub foreground: usize,
    pub hue_hist: [f64; 8],
    /// Circular mean hue of saturated pixels, degrees.
    pub hue: Option<f64>,
    pub aspect: f64,
    /// Silhouette width as a fraction of the image width.
    pub width: f64,
    /// Foreground fraction of the image.
    pub area: f64,
    pub dark_fraction: f64,
    /// Lower-face over mid-face skin brightness.
    pub lower_ratio: f64,
}

pub fn image_stats(img: &Image) -> ImageStats {
    let (w, h) = (img.width, img.height);
    let mut fg = 0;
    let mut dark = 0;
    let (mut rmin, mut rmax, mut cmin, mut cmax) = (usize::MAX, 0, usize::MAX, 0);
    let mut rows: Vec<(usize, usize, bool)> = vec![(usize::MAX, 0, false); h];
    let mut hist = [0.0; 8];
    let (mut hs, mut hc, mut nsat) = (0.0, 0.0, 0usize);
    for row in 0..h {
        for col in 0..w {
            let p = img.pixel(row, col);
            let min = p[0].min(p[1]).min(p[2]);
            if min >= FG_MIN_CHANNEL {
                continue;
            }
            fg += 1;
            rmin = rmin.min(row);
            rmax = rmax.max(row);
            cmin = cmin.min(col);
            cmax = cmax.max(col);
            let (hue, s, v) = rgb_to_hsv(p);
            let r = &mut rows[row];
            r.0 = r.0.min(col);
            r.1 = r.1.max(col);
            if v < DARK_MAX_CHANNEL {
                dark += 1;
                r.2 = true;
                continue;
            }
            if s > SAT_MIN {
                nsat += 1;
                hist[((hue / 45.0) as usize).min(7)] += 1.0;
                hs += hue.to_radians().sin();
                hc += hue.to_radians().cos();
            }
        }
    }
    if nsat > 0 {
        hist.iter_mut().for_each(|x| *x /= nsat as f64);
    }
    if fg == 0 {
        return ImageStats {
            foreground: 0,
            hue_hist: hist,
            hue: None,
            aspect: 0.0,
            width: 0.0,
            area: 0.0,
            dark_fraction: 0.0,
            lower_ratio: 1.0,
        };
    }
    let height = (rmax - rmin + 1) as f64;
    // widest row away from any marker pixels
    let clear = |r: usize| !rows[r.saturating_sub(1)..(r + 2).min(h)].iter().any(|x| x.2);
    let width = (0..h)
        .filter(|&r| rows[r].0 <= rows[r].1 && clear(r))
        .map(|r| rows[r].1 - rows[r].0 + 1)
        .max()
        .unwrap_or(cmax - cmin + 1) as f64;
    let lower_ratio = skin_ratio(img, rmin, rmax);
    ImageStats {
        foreground: fg,
        hue_hist: hist,
        hue: (nsat > 0).then(|| hs.atan2(hc).to_degrees().rem_euclid(360.0)),
        aspect: height / width,
        width: width / w as f64,
        area: fg as f64 / (w * h) as f64,
        dark_fraction: dark as f64 / fg as f64,
        lower_ratio,
    }
}

fn skin_ratio(img: &Image, rmin: usize, rmax: usize) -> f64 {
    let span = (rmax - rmin + 1) as f64;
    let band = |lo: f64, hi: f64| {
        let (mut s, mut n) = (0.0, 0usize);
        for row in 0..img.height {
            let t = (row as f64 - rmin as f64) / span;
            if t < lo || t >= hi {
                continue;
            }
            for col in 0..img.width {
                let p = img.pixel(row, col);
                let (_, sat, v) = rgb_to_hsv(p);
                if p[0].min(p[1]).min(p[2]) < FG_MIN_CHANNEL && sat <= SAT_MIN && v >= DARK_MAX_CHANNEL {
                    s += v;
                    n += 1;
                }
            }
        }
        if n == 0 {
            0.0
        } else {
            s / n as f64
        }
    };
    let mid = band(0.55, 0.7);
    let low = band(0.8, 0.95);
    if mid > 0.0 {
        low / mid
    } else {
        1.0
    }
}

/// Nearest index among `refs`; ties go to the lower index.
fn nearest(x: f64, refs: &[f64]) -> usize {
    let mut best = 0;
    for (i, r) in refs.iter().enumerate() {
        if (x - r).abs() < (x - refs[best]).abs() {
            best = i;
        }
    }
    best
}

/// Hue slot for a hue in degrees: nearest multiple of 60, ties downward.
pub fn hue_index(hue: f64) -> usize {
    let refs: Vec<f64> = (0..6).map(|k| k as f64 * 60.0).collect();
    let mut best = 0;
    let mut bd = f64::INFINITY;
    for (i, r) in refs.iter().enumerate() {
        let d = (hue - r).rem_euclid(360.0);
        let d = d.min(360.0 - d);
        if d < bd - 1e-9 {
            bd = d;
            best = i;
        }
    }
    best
}

/// Analytic attribute reader calibrated on canonical renders.
#[derive(Clone, Debug)]
pub struct Probe {
    vocab: Vocabulary,
    aspect_refs: Vec<f64>,
    width_refs: Vec<f64>,
    smile_threshold: f64,
}

impl Probe {
    pub fn new(vocab: &Vocabulary, image_size: usize) -> Self {
        let pose = CameraPose::orbit(0.0, crate::corpus::EVAL_ELEVATION, image_size);
        let stats = |age: usize, gender: usize, smiling: bool| {
            let spec = SceneSpec {
                hair: 0,
                age,
                gender,
                eyewear: false,
                smiling,
                nuisance: Nuisance::NEUTRAL,
            };
            image_stats(&spec.render(&pose, 2))
        };
        let aspect_refs = (0..AGE_ELONGATION.len())
            .map(|a| (0..GENDER_SIZE.len()).map(|g| stats(a, g, false).aspect).sum::<f64>() / GENDER_SIZE.len() as f64)
            .collect();
        let width_refs = (0..GENDER_SIZE.len())
            .map(|g| (0..AGE_ELONGATION.len()).map(|a| stats(a, g, false).width).sum::<f64>() / AGE_ELONGATION.len() as f64)
            .collect();
        let smile_threshold = 0.5 * (stats(0, 0, false).lower_ratio + stats(0, 0, true).lower_ratio);
        Probe {
            vocab: vocab.clone(),
            aspect_refs,
            width_refs,
            smile_threshold,
        }
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    /// Predicted attributes, or `None` for an empty image.
    pub fn probe(&self, img: &Image) -> Option<Attributes> {
        let st = image_stats(img);
        if st.foreground == 0 {
            return None;
        }
        let attrs = self
            .vocab
            .slots
            .iter()
            .map(|s| match s.name.as_str() {
                "hair" => st.hue.map(hue_index),
                "age" => Some(nearest(st.aspect, &self.aspect_refs)),
                "gender" => Some(nearest(st.width, &self.width_refs)),
                "eyewear" => Some((st.dark_fraction > MARKER_FRACTION) as usize),
                "expression" => Some((st.lower_ratio > self.smile_threshold) as usize),
                _ => None,
            })
            .collect();
        Some(Attributes(attrs))
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Sentence token of a caption.
pub fn text_embedding(vocab: &Vocabulary, prompt: &str) -> Vec<f64> {
    encode_text(prompt, vocab).map(|t| t.eot).unwrap_or_else(|_| vec![0.0; vocab.dim])
}

/// Image side of the joint embedding: the sentence token of the caption
/// describing the probed attributes; zero for an empty image.
pub fn image_embedding(probe: &Probe, img: &Image) -> Vec<f64> {
    match probe.probe(img) {
        Some(a) => text_embedding(probe.vocab(), &probe.vocab().caption(&a, 0)),
        None => vec![0.0; probe.vocab().dim],
    }
}

/// Mean prompt/image similarity over the given views.
pub fn msc_from_images(probe: &Probe, prompt: &str, views: &[Image]) -> f64 {
    let t = text_embedding(probe.vocab(), prompt);
    views.iter().map(|v| cosine(&image_embedding(probe, v), &t)).sum::<f64>() / views.len() as f64
}

/// Multi-view semantic consistency of one generation.
pub fn msc_score(gen: &Generator, probe: &Probe, prompt: &str, z: &[f64], image_size: usize, samples: usize) -> Result<f64, MetricError> {
    let views = eval_views(image_size)
        .iter()
        .map(|p| gen.generate(z, prompt, p, samples))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(msc_from_images(probe, prompt, &views))
}

fn fg_mask(img: &Image) -> Vec<bool> {
    img.data.chunks(3).map(|p| p[0].min(p[1]).min(p[2]) < FG_MIN_CHANNEL).collect()
}

/// RMS difference over pixels that are foreground in either image.
pub fn foreground_distance(a: &Image, b: &Image) -> f64 {
    let (ma, mb) = (fg_mask(a), fg_mask(b));
    let mut s = 0.0;
    for (i, (pa, pb)) in a.data.chunks(3).zip(b.data.chunks(3)).enumerate() {
        if ma[i] || mb[i] {
            s += (0..3).map(|k| (pa[k] - pb[k]).powi(2)).sum::<f64>();
        }
    }
    (s / a.data.len() as f64).sqrt()
}

/// Mean pairwise foreground distance.
pub fn diversity_of(images: &[Image]) -> Result<f64, MetricError> {
    if images.len() < 2 {
        return Err(MetricError::TooFewSamples(2));
    }
    let mut s = 0.0;
    let mut n = 0;
    for i in 0..images.len() {
        for j in i + 1..images.len() {
            s += foreground_distance(&images[i], &images[j]);
            n += 1;
        }
    }
    Ok(s / n as f64)
}

/// Diversity over `zs` at a fixed prompt and the frontal view.
pub fn diversity_score(gen: &Generator, prompt: &str, zs: &[Vec<f64>], image_size: usize, samples: usize) -> Result<f64, MetricError> {
    let pose = eval_views(image_size)[0];
    let imgs = zs
        .iter()
        .map(|z| gen.generate(z, prompt, &pose, samples))
        .collect::<Result<Vec<_>, _>>()?;
    diversity_of(&imgs)
}

/// Fraction of components with a sample whose RMS distance to the mean is
/// within two component standard deviations.
pub fn mode_coverage(samples: &[Vec<f64>], components: &[Component]) -> Result<f64, MetricError> {
    if components.is_empty() {
        return Err(MetricError::NoComponents);
    }
    let hit = components
        .iter()
        .filter(|c| {
            samples.iter().any(|s| {
                let sq: f64 = s.iter().zip(&c.mean).map(|(a, b)| (a - b).powi(2)).sum();
                (sq / c.mean.len() as f64).sqrt() <= 2.0 * c.std
            })
        })
        .count();
    Ok(hit as f64 / components.len() as f64)
}

pub const FEATURE_DIM: usize = 11;

/// Hue histogram, aspect, area and marker flag.
pub fn features(img: &Image) -> Vec<f64> {
    let st = image_stats(img);
    let mut f = st.hue_hist.to_vec();
    f.push(st.aspect);
    f.push(st.area);
    f.push((st.dark_fraction > MARKER_FRACTION) as u8 as f64);
    f
}

fn gaussian_fit(set: &[Vec<f64>], eps: f64) -> (DVector<f64>, DMatrix<f64>) {
    let d = set[0].len();
    let n = set.len() as f64;
    let mut mu = DVector::zeros(d);
    for x in set {
        mu += DVector::from_column_slice(x);
    }
    mu /= n;
    let mut cov = DMatrix::zeros(d, d);
    for x in set {
        let c = DVector::from_column_slice(x) - &mu;
        cov += &c * c.transpose();
    }
    cov /= n;
    cov += DMatrix::identity(d, d) * eps;
    (mu, cov)
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = m.clone().symmetric_eigen();
    let vals = e.eigenvalues.map(|v| v.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&vals) * e.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits of two feature sets.
pub fn fid_analog(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64, MetricError> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricError::TooFewSamples(1));
    }
    let eps = 1e-6;
    let (ma, ca) = gaussian_fit(a, eps);
    let (mb, cb) = gaussian_fit(b, eps);
    let ra = sym_sqrt(&ca);
    let cross = sym_sqrt(&(&ra * &cb * &ra));
    let d = (ma - mb).norm_squared() + ca.trace() + cb.trace() - 2.0 * cross.trace();
    Ok(d.max(0.0))
}

/// Top-1 retrieval of the true caption among `distractors` random other
/// captions, ranked by similarity to each image's embedding.
pub fn rp_analog<R: Rng + ?Sized>(probe: &Probe, evals: &[(Image, Attributes)], distractors: usize, rng: &mut R) -> f64 {
    let vocab = probe.vocab();
    let mut hits = 0;
    for (img, truth) in evals {
        let e = image_embedding(probe, img);
        let t = cosine(&e, &text_embedding(vocab, &vocab.caption(truth, 0)));
        let mut best_other = f64::NEG_INFINITY;
        let mut k = 0;
        while k < distractors {
            let d = vocab.sample_attributes(rng);
            let d = Attributes(d.0.iter().zip(&truth.0).map(|(a, t)| if t.is_some() { *a } else { None }).collect());
            if &d == truth {
                continue;
            }
            best_other = best_other.max(cosine(&e, &text_embedding(vocab, &vocab.caption(&d, 0))));
            k += 1;
        }
        if t > best_other {
            hits += 1;
        }
    }
    hits as f64 / evals.len().max(1) as f64
}

/// Number of specified slots of `want` that `got` reproduces.
pub fn satisfied(want: &Attributes, got: Option<&Attributes>) -> usize {
    let Some(got) = got else { return 0 };
    want.0.iter().zip(&got.0).filter(|(w, g)| w.is_some() && w == g).count()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MixStep {
    pub prompt: String,
    pub requested: String,
    pub probed: Option<String>,
    pub satisfied: usize,
    /// The slots touched by this step's addition are reproduced.
    pub added_present: bool,
    /// Slots satisfied at the previous step are still satisfied.
    pub persisted: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MixReport {
    pub steps: Vec<MixStep>,
}

impl MixReport {
    pub fn monotone(&self) -> bool {
        self.steps.windows(2).all(|w| w[1].satisfied >= w[0].satisfied)
    }
}

/// Generates the cumulatively extended prompts for a fixed latent and
/// records which requested slots the probe finds.
pub fn prompt_mix_eval(
    gen: &Generator,
    probe: &Probe,
    base: &str,
    additions: &[String],
    z: &[f64],
    pose: &CameraPose,
    samples: usize,
) -> Result<(MixReport, Vec<Image>), MetricError> {
    let vocab = &gen.vocab;
    let mut prompt = base.to_string();
    let mut steps: Vec<MixStep> = Vec::new();
    let mut images = Vec::new();
    let mut prev: Option<(Attributes, Option<Attributes>)> = None;
    for k in 0..=additions.len() {
        if k > 0 {
            prompt = format!("{prompt} {}", additions[k - 1]);
        }
        let want = vocab.parse(&prompt);
        let img = gen.generate(z, &prompt, pose, samples)?;
        let got = probe.probe(&img);
        let sat = satisfied(&want, got.as_ref());
        let ok = |s: usize| got.as_ref().is_some_and(|g| g.0[s] == want.0[s]);
        let (added_present, persisted) = match &prev {
            None => (true, true),
            Some((pw, pg)) => {
                let added = (0..want.0.len()).filter(|&s| want.0[s] != pw.0[s]).all(ok);
                let kept = (0..want.0.len())
                    .filter(|&s| pw.0[s].is_some() && pw.0[s] == want.0[s] && pg.as_ref().is_some_and(|g| g.0[s] == pw.0[s]))
                    .all(ok);
                (added, kept)
            }
        };
        steps.push(MixStep {
            prompt: prompt.clone(),
            requested: want.key(),
            probed: got.as_ref().map(Attributes::key),
            satisfied: sat,
            added_present,
            persisted,
        });
        images.push(img);
        prev = Some((want, got));
    }
    Ok((MixReport { steps }, images))
}

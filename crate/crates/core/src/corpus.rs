//! Synthetic captioned scenes: ellipsoid heads whose appearance encodes the
//! vocabulary attributes, rendered analytically from orbit poses.

use std::fs;
use std::io::{self, BufRead, Write};
use std::path::Path;

use rand::Rng;
use serde_json::{json, Value};

use crate::image_io::Image;
use crate::render::CameraPose;
use crate::text::{Attributes, Vocabulary, NUM_TEMPLATES};

pub const EVAL_ELEVATION: f64 = 10.0;
/// Azimuths of the frontal, left and right evaluation views.
pub const EVAL_AZIMUTHS: [f64; 3] = [0.0, 15.0, -15.0];
pub const EVAL_VIEW_NAMES: [&str; 3] = ["F", "L15", "R15"];

pub const GENDER_SIZE: [f64; 2] = [1.0, 0.84];
pub const AGE_ELONGATION: [f64; 3] = [1.0, 1.2, 1.4];
pub const SKIN: [f64; 3] = [0.8, 0.7, 0.62];
pub const MARKER_GRAY: f64 = 0.08;
pub const HAIR_SATURATION: f64 = 0.75;
pub const HAIR_VALUE: f64 = 0.6;
/// Hair covers the part of the head above this fraction of the half-height.
pub const HAIR_LINE: f64 = 0.3;
pub const BAND_HEIGHT: f64 = 0.2;
const LIGHT: [f64; 3] = [0.3, 0.6, 0.75];

/// The three fixed evaluation poses.
pub fn eval_views(image_size: usize) -> [CameraPose; 3] {
    EVAL_AZIMUTHS.map(|a| CameraPose::orbit(a, EVAL_ELEVATION, image_size))
}

/// Appearance variation that no caption mentions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Nuisance {
    pub skin: f64,
    /// Multiplier on the hair value.
    pub shade: f64,
    pub scale: f64,
    /// Hair hue offset in degrees.
    pub hue: f64,
    /// Offset of the hair line, in units of the vertical radius.
    pub hairline: f64,
}

impl Nuisance {
    pub const NEUTRAL: Nuisance = Nuisance {
        skin: 1.0,
        shade: 1.0,
        scale: 1.0,
        hue: 0.0,
        hairline: 0.0,
    };

    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Nuisance {
            skin: rng.random_range(0.85..1.15),
            shade: rng.random_range(0.75..1.25),
            scale: rng.random_range(0.97..1.03),
            hue: rng.random_range(-12.0..12.0),
            hairline: rng.random_range(-0.08..0.12),
        }
    }
}

/// A head scene: attribute indices per slot kind plus nuisance.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub hair: usize,
    pub age: usize,
    pub gender: usize,
    pub eyewear: bool,
    pub smiling: bool,
    pub nuisance: Nuisance,
}

impl SceneSpec {
    /// Slots missing from the vocabulary take their first value.
    pub fn from_attributes(vocab: &Vocabulary, attrs: &Attributes, nuisance: Nuisance) -> Self {
        let get = |name: &str| {
            vocab
                .slot_index(name)
                .and_then(|s| attrs.0.get(s).copied().flatten())
                .unwrap_or(0)
        };
        SceneSpec {
            hair: get("hair"),
            age: get("age"),
            gender: get("gender"),
            eyewear: get("eyewear") == 1,
            smiling: get("expression") == 1,
            nuisance,
        }
    }

    pub fn attributes(&self, vocab: &Vocabulary) -> Attributes {
        Attributes(
            vocab
                .slots
                .iter()
                .map(|s| {
                    Some(match s.name.as_str() {
                        "hair" => self.hair,
                        "age" => self.age,
                        "gender" => self.gender,
                        "eyewear" => self.eyewear as usize,
                        "expression" => self.smiling as usize,
                        _ => 0,
                    })
                })
                .collect(),
        )
    }

    fn radii(&self) -> [f64; 3] {
        let s = GENDER_SIZE[self.gender] * self.nuisance.scale;
        let e = AGE_ELONGATION[self.age];
        [0.5 * s, 0.5 * s * e, 0.48 * s]
    }

    fn hair_rgb(&self) -> [f64; 3] {
        let v = (HAIR_VALUE * self.nuisance.shade).min(1.0);
        hsv_to_rgb((self.hair as f64 * 60.0 + self.nuisance.hue).rem_euclid(360.0), HAIR_SATURATION, v)
    }

    /// Shaded color along a ray, or `None` on a miss.
    pub fn trace(&self, origin: [f64; 3], dir: [f64; 3]) -> Option<[f64; 3]> {
        let r = self.radii();
        let head = ray_ellipsoid(origin, dir, r);
        let band = if self.eyewear { self.ray_band(origin, dir, r) } else { None };
        let light = normalize(LIGHT);
        let shade = |c: [f64; 3], n: [f64; 3]| {
            let k = 0.75 + 0.25 * dot(n, light).max(0.0);
            c.map(|v| (v * k).min(1.0))
        };
        match (head, band) {
            (None, None) => None,
            (_, Some((tb, nb))) if head.is_none_or(|th| tb < th) => Some(shade([MARKER_GRAY; 3], nb)),
            (Some(th), _) => {
                let p = at(origin, dir, th);
                let n = normalize([p[0] / (r[0] * r[0]), p[1] / (r[1] * r[1]), p[2] / (r[2] * r[2])]);
                let base = if p[1] > (HAIR_LINE + self.nuisance.hairline) * r[1] {
                    self.hair_rgb()
                } else {
                    let mut skin = SKIN.map(|v| v * self.nuisance.skin);
                    if self.smiling && p[1] < -0.35 * r[1] && p[2] > 0.0 {
                        skin = skin.map(|v| (v * 1.15).min(1.0));
                    }
                    skin
                };
                Some(shade(base, n))
            }
            (None, Some(_)) => unreachable!(),
        }
    }

    /// Sphere-traced torus around the vertical axis at eye height.
    fn ray_band(&self, o: [f64; 3], d: [f64; 3], r: [f64; 3]) -> Option<(f64, [f64; 3])> {
        let yb = BAND_HEIGHT * r[1];
        let k = (1.0 - BAND_HEIGHT * BAND_HEIGHT).sqrt();
        let major = 0.5 * (r[0] + r[2]) * k;
        let minor = 0.05 * GENDER_SIZE[self.gender] * self.nuisance.scale;
        let sdf = |p: [f64; 3]| {
            let q = ((p[0] * p[0] + p[2] * p[2]).sqrt() - major, p[1] - yb);
            (q.0 * q.0 + q.1 * q.1).sqrt() - minor
        };
        // bounding sphere around the torus
        let bound = major + minor + yb.abs() + 1e-3;
        let b = dot(o, d);
        let c = dot(o, o) - bound * bound;
        let disc = b * b - c;
        if disc < 0.0 {
            return None;
        }
        let (mut t, t1) = ((-b - disc.sqrt()).max(0.0), -b + disc.sqrt());
        for _ in 0..256 {
            let p = at(o, d, t);
            let dist = sdf(p);
            if dist < 1e-6 {
                let h = 1e-5;
                let grad = [0, 1, 2].map(|i| {
                    let mut a = p;
                    let mut b = p;
                    a[i] += h;
                    b[i] -= h;
                    sdf(a) - sdf(b)
                });
                return Some((t, normalize(grad)));
            }
            t += dist;
            if t > t1 {
                return None;
            }
        }
        None
    }

    /// Render with `ss × ss` supersampling on white.
    pub fn render(&self, pose: &CameraPose, ss: usize) -> Image {
        let n = pose.image_size;
        let (right, up, fwd) = pose.basis();
        let origin = pose.position();
        let half = (pose.fov / 2.0).tan();
        let mut data = Vec::with_capacity(n * n * 3);
        for row in 0..n {
            for col in 0..n {
                let mut acc = [0.0; 3];
                for a in 0..ss {
                    for b in 0..ss {
                        let u = (col as f64 + (b as f64 + 0.5) / ss as f64) / n as f64;
                        let v = (row as f64 + (a as f64 + 0.5) / ss as f64) / n as f64;
                        let sx = (u * 2.0 - 1.0) * half;
                        let sy = -(v * 2.0 - 1.0) * half;
                        let d = normalize([0, 1, 2].map(|i| fwd[i] + sx * right[i] + sy * up[i]));
                        let c = self.trace(origin, d).unwrap_or([1.0; 3]);
                        for k in 0..3 {
                            acc[k] += c[k];
                        }
                    }
                }
                data.extend(acc.map(|v| v / (ss * ss) as f64));
            }
        }
        Image::new(n, n, data)
    }
}

fn at(o: [f64; 3], d: [f64; 3], t: f64) -> [f64; 3] {
    [o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = dot(v, v).sqrt();
    v.map(|x| x / n)
}

fn ray_ellipsoid(o: [f64; 3], d: [f64; 3], r: [f64; 3]) -> Option<f64> {
    let os = [o[0] / r[0], o[1] / r[1], o[2] / r[2]];
    let ds = [d[0] / r[0], d[1] / r[1], d[2] / r[2]];
    let a = dot(ds, ds);
    let b = dot(os, ds);
    let c = dot(os, os) - 1.0;
    let disc = b * b - a * c;
    if disc < 0.0 {
        return None;
    }
    let t = (-b - disc.sqrt()) / a;
    (t > 0.0).then_some(t)
}

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Hue in degrees, saturation and value.
pub fn rgb_to_hsv(c: [f64; 3]) -> (f64, f64, f64) {
    let max = c[0].max(c[1]).max(c[2]);
    let min = c[0].min(c[1]).min(c[2]);
    let d = max - min;
    let s = if max > 0.0 { d / max } else { 0.0 };
    let h = if d <= 0.0 {
        0.0
    } else if max == c[0] {
        60.0 * ((c[1] - c[2]) / d).rem_euclid(6.0)
    } else if max == c[1] {
        60.0 * ((c[2] - c[0]) / d + 2.0)
    } else {
        60.0 * ((c[0] - c[1]) / d + 4.0)
    };
    (h, s, max)
}

/// One captioned scene.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusItem {
    pub scene_id: usize,
    pub spec: SceneSpec,
    pub attributes: Attributes,
    pub captions: Vec<String>,
    pub pose: CameraPose,
    pub image: Image,
}

impl CorpusItem {
    /// The scene from its own pose at another resolution.
    pub fn render_at(&self, image_size: usize, ss: usize) -> Image {
        let mut pose = self.pose;
        pose.image_size = image_size;
        self.spec.render(&pose, ss)
    }
}

/// `n` scenes with uniform attributes, random nuisance and a pose drawn from
/// the three evaluation azimuths; deterministic per seed.
pub fn make_corpus(vocab: &Vocabulary, n: usize, seed: u64, image_size: usize) -> Vec<CorpusItem> {
    assert!(n >= 1, "corpus needs at least one scene");
    let mut rng = crate::rng::stream(seed, 0);
    (0..n)
        .map(|scene_id| {
            let attributes = vocab.sample_attributes(&mut rng);
            let nuisance = Nuisance::sample(&mut rng);
            let az = EVAL_AZIMUTHS[rng.random_range(0..3)];
            let pose = CameraPose::orbit(az, EVAL_ELEVATION, image_size);
            let spec = SceneSpec::from_attributes(vocab, &attributes, nuisance);
            let image = spec.render(&pose, 2);
            let captions = (0..NUM_TEMPLATES).map(|t| vocab.caption(&attributes, t)).collect();
            CorpusItem {
                scene_id,
                spec,
                attributes,
                captions,
                pose,
                image,
            }
        })
        .collect()
}

/// Writes `manifest.jsonl` and `images/NNNNN.png` under `dir`.
pub fn write_corpus(items: &[CorpusItem], dir: &Path) -> io::Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    let mut manifest = io::BufWriter::new(fs::File::create(dir.join("manifest.jsonl"))?);
    for it in items {
        let rel = format!("images/{:05}.png", it.scene_id);
        it.image.save_png(&dir.join(&rel))?;
        let line = json!({
            "scene_id": it.scene_id,
            "attributes": it.attributes.key(),
            "captions": it.captions,
            "pose": {
                "azimuth_deg": it.pose.azimuth.to_degrees(),
                "elevation_deg": it.pose.elevation.to_degrees(),
                "radius": it.pose.radius,
                "image_size": it.pose.image_size,
            },
            "nuisance": [it.spec.nuisance.skin, it.spec.nuisance.shade, it.spec.nuisance.scale, it.spec.nuisance.hue, it.spec.nuisance.hairline],
            "image_path": rel,
        });
        writeln!(manifest, "{line}")?;
    }
    manifest.flush()
}

/// Reads a manifest written by [`write_corpus`], decoding the PNGs.
pub fn read_corpus(vocab: &Vocabulary, dir: &Path) -> io::Result<Vec<CorpusItem>> {
    let bad = |m: String| io::Error::new(io::ErrorKind::InvalidData, m);
    let file = fs::File::open(dir.join("manifest.jsonl"))?;
    let mut out = Vec::new();
    for line in io::BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        let key = v["attributes"].as_str().ok_or_else(|| bad("missing attributes".into()))?;
        let attributes = Attributes(
            key.split('.')
                .map(|p| p.parse().ok())
                .collect(),
        );
        if attributes.0.len() != vocab.num_slots() || !attributes.is_complete() {
            return Err(bad(format!("attributes `{key}` do not fit the vocabulary")));
        }
        let num = |x: &Value, name: &str| x.as_f64().ok_or_else(|| bad(format!("missing {name}")));
        let p = &v["pose"];
        let mut pose = CameraPose::orbit(
            num(&p["azimuth_deg"], "azimuth")?,
            num(&p["elevation_deg"], "elevation")?,
            num(&p["image_size"], "image size")? as usize,
        );
        pose.radius = num(&p["radius"], "radius")?;
        let nz = &v["nuisance"];
        let nuisance = Nuisance {
            skin: num(&nz[0], "nuisance")?,
            shade: num(&nz[1], "nuisance")?,
            scale: num(&nz[2], "nuisance")?,
            hue: num(&nz[3], "nuisance")?,
            hairline: num(&nz[4], "nuisance")?,
        };
        let rel = v["image_path"].as_str().ok_or_else(|| bad("missing image_path".into()))?;
        let image = Image::decode_png(&fs::read(dir.join(rel))?)?;
        let captions = v["captions"]
            .as_array()
            .ok_or_else(|| bad("missing captions".into()))?
            .iter()
            .map(|c| c.as_str().unwrap_or_default().to_string())
            .collect();
        out.push(CorpusItem {
            scene_id: v["scene_id"].as_u64().ok_or_else(|| bad("missing scene_id".into()))? as usize,
            spec: SceneSpec::from_attributes(vocab, &attributes, nuisance),
            attributes,
            captions,
            pose,
            image,
        });
    }
    if out.is_empty() {
        return Err(bad("empty manifest".into()));
    }
    Ok(out)
}

//! Flat `key = value` experiment configuration.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use crate::adapter::AdapterFlags;
use crate::adversarial::{SemanticLoss, TrainSchedule};
use crate::distill::{NoiseSchedule, RescaleMode, SdsOptions};
use crate::generator::{Conditioning, GeneratorConfig};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("duplicate key `{0}`")]
    Duplicate(String),
    #[error("invalid value `{value}` for `{key}`: {reason}")]
    Value { key: String, value: String, reason: String },
    #[error("{0}")]
    Invalid(String),
    #[error("cannot read config: {0}")]
    Io(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TeacherKind {
    Analytic,
    Learned,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub seed: u64,
    pub slots: usize,
    pub corpus_size: usize,
    pub train_res: usize,
    pub eval_res: usize,
    pub render_samples: usize,
    pub eval_samples: usize,
    pub z_dim: usize,
    pub w_dim: usize,
    pub plane_res: usize,
    pub channels: usize,
    pub decoder_hidden: usize,
    pub adapter_count: usize,
    pub mapping_lr_mult: f64,
    pub disc_channels: usize,
    pub batch: usize,
    pub grad_accum: usize,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub lambda_sds: f64,
    pub gan_weight: f64,
    pub r1_gamma: f64,
    pub r1_interval: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub cfg_g: f64,
    pub rescale_mode: RescaleMode,
    pub schedule_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub teacher: TeacherKind,
    pub teacher_std: f64,
    pub denoiser_steps: usize,
    pub prompt_dropout: f64,
    pub freeze_g: bool,
    pub freeze_d: bool,
    pub no_dsds: bool,
    pub clip_style_loss: bool,
    pub global_only: bool,
    pub local_only: bool,
    pub no_gate: bool,
    pub no_3d_aware: bool,
    pub log_every: usize,
    pub checkpoint_every: usize,
    pub diversity_z: usize,
    pub metric_prompts: usize,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 0,
            slots: 4,
            corpus_size: 600,
            train_res: 24,
            eval_res: 64,
            render_samples: 12,
            eval_samples: 16,
            z_dim: 16,
            w_dim: 32,
            plane_res: 16,
            channels: 8,
            decoder_hidden: 16,
            adapter_count: 4,
            mapping_lr_mult: 0.01,
            disc_channels: 8,
            batch: 4,
            grad_accum: 1,
            stage1_steps: 1000,
            stage2_steps: 1000,
            lambda_sds: 0.01,
            gan_weight: 1.0,
            r1_gamma: 1.0,
            r1_interval: 16,
            lr_g: 2e-3,
            lr_d: 2e-3,
            cfg_g: 3.0,
            rescale_mode: RescaleMode::Off,
            schedule_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            teacher: TeacherKind::Analytic,
            teacher_std: 0.05,
            denoiser_steps: 2000,
            prompt_dropout: 0.25,
            freeze_g: false,
            freeze_d: false,
            no_dsds: false,
            clip_style_loss: false,
            global_only: false,
            local_only: false,
            no_gate: false,
            no_3d_aware: false,
            log_every: 100,
            checkpoint_every: 0,
            diversity_z: 6,
            metric_prompts: 4,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| ConfigError::Value {
        key: key.into(),
        value: value.into(),
        reason: e.to_string(),
    })
}

fn parse_f64(key: &str, value: &str) -> Result<f64, ConfigError> {
    let v: f64 = parse_num(key, value)?;
    if !v.is_finite() {
        return Err(ConfigError::Value {
            key: key.into(),
            value: value.into(),
            reason: "must be finite".into(),
        });
    }
    Ok(v)
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(ConfigError::Value {
            key: key.into(),
            value: value.into(),
            reason: "expected true or false".into(),
        }),
    }
}

macro_rules! fields {
    ($m:ident) => {
        $m! {
            seed: u, slots: u, corpus_size: u, train_res: u, eval_res: u, render_samples: u,
            eval_samples: u, z_dim: u, w_dim: u, plane_res: u, channels: u, decoder_hidden: u,
            adapter_count: u, mapping_lr_mult: f, disc_channels: u, batch: u, grad_accum: u,
            stage1_steps: u, stage2_steps: u, lambda_sds: f, gan_weight: f, r1_gamma: f,
            r1_interval: u, lr_g: f, lr_d: f, cfg_g: f, rescale_mode: rescale,
            schedule_steps: u, beta_start: f, beta_end: f, teacher: teacher, teacher_std: f,
            denoiser_steps: u, prompt_dropout: f, freeze_g: b, freeze_d: b, no_dsds: b,
            clip_style_loss: b, global_only: b, local_only: b, no_gate: b, no_3d_aware: b,
            log_every: u, checkpoint_every: u, diversity_z: u, metric_prompts: u
        }
    };
}

macro_rules! parse_value {
    (u, $k:expr, $v:expr) => {
        parse_num($k, $v)?
    };
    (f, $k:expr, $v:expr) => {
        parse_f64($k, $v)?
    };
    (b, $k:expr, $v:expr) => {
        parse_bool($k, $v)?
    };
    (rescale, $k:expr, $v:expr) => {
        match $v {
            "off" => RescaleMode::Off,
            "norm_match" => RescaleMode::NormMatch,
            _ => {
                return Err(ConfigError::Value {
                    key: $k.into(),
                    value: $v.into(),
                    reason: "expected off or norm_match".into(),
                })
            }
        }
    };
    (teacher, $k:expr, $v:expr) => {
        match $v {
            "analytic" => TeacherKind::Analytic,
            "learned" => TeacherKind::Learned,
            _ => {
                return Err(ConfigError::Value {
                    key: $k.into(),
                    value: $v.into(),
                    reason: "expected analytic or learned".into(),
                })
            }
        }
    };
}

macro_rules! show_value {
    (rescale, $v:expr) => {
        match $v {
            RescaleMode::Off => "off".to_string(),
            RescaleMode::NormMatch => "norm_match".to_string(),
        }
    };
    (teacher, $v:expr) => {
        match $v {
            TeacherKind::Analytic => "analytic".to_string(),
            TeacherKind::Learned => "learned".to_string(),
        }
    };
    (f, $v:expr) => {
        format!("{:?}", $v)
    };
    ($t:ident, $v:expr) => {
        $v.to_string()
    };
}

macro_rules! impl_io {
    ($($name:ident: $t:ident),* $(,)?) => {
        pub const KEYS: &[&str] = &[$(stringify!($name)),*];

        fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
            match key {
                $(stringify!($name) => self.$name = parse_value!($t, key, value),)*
                _ => return Err(ConfigError::UnknownKey(key.into())),
            }
            Ok(())
        }

        /// Canonical text form, one key per line in declaration order.
        pub fn to_text(&self) -> String {
            let mut s = String::new();
            $(let _ = writeln!(s, "{} = {}", stringify!($name), show_value!($t, self.$name));)*
            s
        }
    };
}

impl Config {
    fields!(impl_io);

    /// Parses `key = value` lines over the defaults; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut c = Config::default();
        let mut seen = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() || v.is_empty() {
                return Err(ConfigError::Syntax { line: i + 1 });
            }
            if !seen.insert(k.to_string()) {
                return Err(ConfigError::Duplicate(k.into()));
            }
            c.set(k, v)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(e.to_string()))?;
        Self::parse(&text)
    }

    /// Applies `key=value` overrides and revalidates.
    pub fn with_overrides(&self, pairs: &[(&str, &str)]) -> Result<Self, ConfigError> {
        let mut c = self.clone();
        for (k, v) in pairs {
            c.set(k, v)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.into()));
        if !(1..=5).contains(&self.slots) {
            return bad("slots must be between 1 and 5");
        }
        if self.corpus_size == 0 || self.batch == 0 || self.grad_accum == 0 {
            return bad("corpus_size, batch and grad_accum must be positive");
        }
        if self.train_res < 4 || self.eval_res < 64 {
            return bad("train_res must be at least 4 and eval_res at least 64");
        }
        if self.render_samples == 0 || self.eval_samples == 0 {
            return bad("sample counts must be positive");
        }
        if self.disc_channels == 0 {
            return bad("disc_channels must be positive");
        }
        if self.diversity_z < 2 || self.metric_prompts == 0 {
            return bad("diversity_z must be at least 2 and metric_prompts positive");
        }
        if self.lambda_sds < 0.0 || self.gan_weight < 0.0 || self.r1_gamma < 0.0 {
            return bad("loss weights must be non-negative");
        }
        if !(self.lr_g > 0.0 && self.lr_d > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(self.teacher_std > 0.0) {
            return bad("teacher_std must be positive");
        }
        if !(0.0..1.0).contains(&self.prompt_dropout) {
            return bad("prompt_dropout must lie in [0, 1)");
        }
        if self.global_only && self.local_only {
            return bad("global_only and local_only are exclusive");
        }
        if self.no_dsds && self.clip_style_loss {
            return bad("no_dsds and clip_style_loss are exclusive");
        }
        if !(0.0 < self.beta_start && self.beta_start <= self.beta_end && self.beta_end < 1.0) {
            return bad("need 0 < beta_start <= beta_end < 1");
        }
        if self.schedule_steps < 50 {
            return bad("schedule_steps must be at least 50");
        }
        self.generator_config().validate().map_err(ConfigError::Invalid)
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig {
            z_dim: self.z_dim,
            w_dim: self.w_dim,
            d_text: crate::text::D_TEXT,
            plane_res: self.plane_res,
            channels: self.channels,
            decoder_hidden: self.decoder_hidden,
            adapter_count: self.adapter_count,
            mapping_lr_mult: self.mapping_lr_mult,
            conditioning: if self.global_only {
                Conditioning::GlobalOnly
            } else if self.local_only {
                Conditioning::LocalOnly
            } else {
                Conditioning::Full
            },
            adapter_flags: AdapterFlags {
                no_gate: self.no_gate,
                no_3d_aware: self.no_3d_aware,
                ..Default::default()
            },
        }
    }

    pub fn noise_schedule(&self) -> NoiseSchedule {
        NoiseSchedule::linear(self.schedule_steps, self.beta_start, self.beta_end)
    }

    pub fn train_schedule(&self) -> TrainSchedule {
        TrainSchedule {
            stage1_steps: self.stage1_steps,
            stage2_steps: self.stage2_steps,
            lambda_sds: self.lambda_sds,
            grad_accum: self.grad_accum,
            batch: self.batch,
            gan_weight: self.gan_weight,
            r1_gamma: self.r1_gamma,
            r1_interval: self.r1_interval,
            lr_g: self.lr_g,
            lr_d: self.lr_d,
            freeze_g: self.freeze_g,
            freeze_d: self.freeze_d,
            semantic: if self.no_dsds {
                SemanticLoss::None
            } else if self.clip_style_loss {
                SemanticLoss::ClipStyle
            } else {
                SemanticLoss::Dsds
            },
            sds: SdsOptions {
                cfg_g: self.cfg_g,
                rescale: self.rescale_mode,
            },
            render_res: self.train_res,
            render_samples: self.render_samples,
            prompt_dropout: self.prompt_dropout,
            log_every: self.log_every,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let c = Config::default();
        assert_eq!(Config::parse(&c.to_text()).unwrap(), c);
        let d = c
            .with_overrides(&[("rescale_mode", "norm_match"), ("lr_g", "0.1"), ("no_gate", "true")])
            .unwrap();
        assert_eq!(Config::parse(&d.to_text()).unwrap(), d);
        assert_eq!(d.to_text().lines().count(), Config::KEYS.len());
    }

    #[test]
    fn comments_and_blank_lines() {
        let c = Config::parse("# lab\n\nseed = 7   # trailing\nbatch=2\n").unwrap();
        assert_eq!((c.seed, c.batch), (7, 2));
    }

    #[test]
    fn rejects_unknown_and_duplicate_keys() {
        assert_eq!(Config::parse("sed = 1"), Err(ConfigError::UnknownKey("sed".into())));
        assert_eq!(Config::parse("seed = 1\nseed = 2"), Err(ConfigError::Duplicate("seed".into())));
        assert_eq!(Config::parse("seed"), Err(ConfigError::Syntax { line: 1 }));
    }

    #[test]
    fn rejects_bad_values() {
        for text in [
            "seed = -1",
            "lr_g = nan",
            "no_gate = yes",
            "rescale_mode = clamp",
            "adapter_count = 3",
            "plane_res = 12",
            "eval_res = 32",
            "global_only = true\nlocal_only = true",
            "no_dsds = true\nclip_style_loss = true",
            "prompt_dropout = 1.0",
            "beta_start = 0.5\nbeta_end = 0.1",
            "lr_d = 0",
        ] {
            assert!(Config::parse(text).is_err(), "{text}");
        }
    }

    #[test]
    fn flags_map_onto_components() {
        let c = Config::parse("global_only = true\nno_3d_aware = true\nclip_style_loss = true").unwrap();
        assert_eq!(c.generator_config().conditioning, Conditioning::GlobalOnly);
        assert!(c.generator_config().adapter_flags.no_3d_aware);
        assert_eq!(c.train_schedule().semantic, SemanticLoss::ClipStyle);
        let c = Config::parse("no_dsds = true").unwrap();
        assert_eq!(c.train_schedule().semantic, SemanticLoss::None);
    }
}

//! Style-modulated synthesis network producing a tri-plane from a latent and
//! a prompt, with gated adapters between convolution blocks.
//!
//! Intermediate feature maps carry `3C` channels that are read as three
//! planes of `C` channels each, so adapters can run at every resolution.

use rand::Rng;

use crate::adapter::{adapter_forward, word_tokens, AdapterError, AdapterFlags, AdapterParams};
use crate::autodiff::{linear, Binding, Graph, ParamId, ParamStore, Precision, Tensor, Var};
use crate::image_io::Image;
use crate::render::{
    camera_rays, var_to_image, volume_render, CameraPose, DecoderVars, RenderError, RenderVars, Stratification, WHITE,
};
use crate::text::{encode_text, SemanticsMapper, TextError, TokenSet, Vocabulary, LRELU};

#[derive(Debug, thiserror::Error)]
pub enum GenerateError {
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error("latent has length {got}, expected {expected}")]
    LatentSize { got: usize, expected: usize },
}

/// How text reaches the synthesis network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Conditioning {
    /// Sentence token through modulation and word tokens through adapters.
    #[default]
    Full,
    /// Modulation by `w_t` only; adapters are skipped.
    GlobalOnly,
    /// Modulation by the text-free `w`; adapters carry all text.
    LocalOnly,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub z_dim: usize,
    pub w_dim: usize,
    pub d_text: usize,
    pub plane_res: usize,
    pub channels: usize,
    pub decoder_hidden: usize,
    pub adapter_count: usize,
    pub mapping_lr_mult: f64,
    pub conditioning: Conditioning,
    pub adapter_flags: AdapterFlags,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            z_dim: 64,
            w_dim: crate::text::D_W,
            d_text: crate::text::D_TEXT,
            plane_res: 64,
            channels: 16,
            decoder_hidden: 32,
            adapter_count: 4,
            mapping_lr_mult: 0.01,
            conditioning: Conditioning::Full,
            adapter_flags: AdapterFlags::default(),
        }
    }
}

impl GeneratorConfig {
    /// Number of modulated 3×3 convolutions, one adapter slot after each.
    pub fn num_convs(&self) -> usize {
        1 + 2 * self.levels().saturating_sub(1)
    }

    /// Resolutions 4, 8, … up to the plane resolution.
    pub fn levels(&self) -> usize {
        let mut r = 4;
        let mut n = 1;
        while r < self.plane_res {
            r *= 2;
            n += 1;
        }
        n
    }

    pub fn validate(&self) -> Result<(), String> {
        let pow2 = self.plane_res >= 4 && self.plane_res.is_power_of_two();
        if !pow2 {
            return Err(format!("plane resolution {} must be a power of two ≥ 4", self.plane_res));
        }
        if ![2, 4, 6].contains(&self.adapter_count) {
            return Err(format!("adapter count {} must be 2, 4 or 6", self.adapter_count));
        }
        if self.channels == 0 || self.z_dim == 0 || self.w_dim == 0 || self.decoder_hidden == 0 {
            return Err("dimensions must be positive".into());
        }
        if !(self.mapping_lr_mult > 0.0) {
            return Err("mapping learning-rate multiplier must be positive".into());
        }
        Ok(())
    }

    /// Conv indices followed by an adapter: the last `adapter_count` slots.
    pub fn adapter_slots(&self) -> Vec<usize> {
        let n = self.num_convs();
        let k = self.adapter_count.min(n);
        (n - k..n).collect()
    }
}

#[derive(Clone, Debug)]
struct ConvIds {
    weight: ParamId,
    bias: ParamId,
    affine_w: ParamId,
    affine_b: ParamId,
}

#[derive(Clone, Debug)]
struct GenIds {
    mapping: Vec<(ParamId, ParamId)>,
    semantics: SemanticsMapper,
    constant: ParamId,
    convs: Vec<ConvIds>,
    head: ConvIds,
    adapters: Vec<(usize, AdapterParams)>,
    decoder: [ParamId; 4],
}

/// Generator parameters with the vocabulary they were trained against.
#[derive(Clone, Debug)]
pub struct Generator {
    pub config: GeneratorConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    ids: GenIds,
}

/// Graph-side outputs of one synthesis pass.
#[derive(Clone, Copy, Debug)]
pub struct GenForward {
    pub w: Var,
    pub w_t: Var,
    pub planes: [Var; 3],
}

/// Kernel scaled per input channel by `style`, demodulated to unit norm per
/// output channel, then convolved.
///
/// `x: [H, W, Cin]`, `weight: [k, k, Cin, Cout]`, `style: [1, Cin]`.
pub fn modulated_conv(g: &Graph, x: Var, weight: Var, style: Var) -> Var {
    let ws = g.shape(weight);
    let (k, cin, cout) = (ws[0], ws[2], ws[3]);
    let s = g.reshape(style, &[cin, 1]);
    let s = g.expand(s, &[cin, cout]);
    let wm = g.mul(weight, s);
    let flat = g.reshape(wm, &[k * k * cin, cout]);
    let norm = g.sum_axis(g.square(flat), 0);
    let demod = g.powf(g.add_scalar(norm, 1e-8), -0.5);
    let demod = g.reshape(demod, &[cout]);
    let wd = g.reshape(g.mul(flat, demod), &[k, k, cin, cout]);
    g.conv2d(x, wd)
}

fn split_planes(g: &Graph, x: Var, c: usize) -> [Var; 3] {
    [g.slice(x, 2, 0, c), g.slice(x, 2, c, c), g.slice(x, 2, 2 * c, c)]
}

impl Generator {
    pub fn new<R: Rng + ?Sized>(config: GeneratorConfig, vocab: Vocabulary, rng: &mut R) -> Self {
        config.validate().expect("invalid generator configuration");
        assert_eq!(vocab.dim, config.d_text, "vocabulary dimension must match d_text");
        let mut store = ParamStore::new();
        let f = 3 * config.channels;
        let lr = config.mapping_lr_mult;

        let mut mapping = Vec::new();
        let mut fan_in = config.z_dim;
        for i in 0..2 {
            let w = store.add(
                format!("map.{i}.w"),
                Tensor::randn(&[fan_in, config.w_dim], 1.0 / lr, rng),
            );
            let b = store.add(format!("map.{i}.b"), Tensor::zeros(&[config.w_dim]));
            mapping.push((w, b));
            fan_in = config.w_dim;
        }
        let semantics = SemanticsMapper::init(&mut store, "sem", config.d_text, config.w_dim, rng);
        let constant = store.add("syn.const", Tensor::randn(&[4, 4, f], 1.0, rng));
        let conv = |name: String, k: usize, store: &mut ParamStore, rng: &mut R| ConvIds {
            weight: store.add(format!("{name}.w"), Tensor::randn(&[k, k, f, f], 1.0, rng)),
            bias: store.add(format!("{name}.b"), Tensor::zeros(&[f])),
            affine_w: store.add(
                format!("{name}.affine.w"),
                Tensor::randn(&[config.w_dim, f], 1.0 / (config.w_dim as f64).sqrt(), rng),
            ),
            affine_b: store.add(format!("{name}.affine.b"), Tensor::ones(&[f])),
        };
        let mut convs = Vec::new();
        let slots = config.adapter_slots();
        let mut adapters = Vec::new();
        for j in 0..config.num_convs() {
            convs.push(conv(format!("syn.conv{j}"), 3, &mut store, rng));
            if slots.contains(&j) {
                let p = AdapterParams::init(&mut store, &format!("adapter{j}"), config.channels, config.d_text, rng);
                adapters.push((j, p));
            }
        }
        let head = conv("syn.head".into(), 1, &mut store, rng);
        let c = config.channels;
        let h = config.decoder_hidden;
        let decoder = [
            store.add("dec.w1", Tensor::randn(&[c, h], 1.0 / (c as f64).sqrt(), rng)),
            store.add("dec.b1", Tensor::zeros(&[h])),
            store.add("dec.w2", Tensor::randn(&[h, 4], 1.0 / (h as f64).sqrt(), rng)),
            store.add("dec.b2", Tensor::from_slice(&[4], &[-1.0, 0.0, 0.0, 0.0])),
        ];
        Generator {
            config,
            vocab,
            store,
            ids: GenIds {
                mapping,
                semantics,
                constant,
                convs,
                head,
                adapters,
                decoder,
            },
        }
    }

    /// Rebuild a generator around a loaded parameter store.
    pub fn with_store(config: GeneratorConfig, vocab: Vocabulary, store: ParamStore) -> Result<Self, String> {
        let mut rng = crate::rng::stream(0, 0);
        let mut g = Self::new(config, vocab, &mut rng);
        if g.store.len() != store.len() {
            return Err(format!("expected {} parameters, found {}", g.store.len(), store.len()));
        }
        for ((_, a, ta), (_, b, tb)) in g.store.iter().zip(store.iter()) {
            if a != b || ta.shape() != tb.shape() {
                return Err(format!("parameter `{b}` does not match `{a}` {:?}", ta.shape()));
            }
        }
        g.store = store;
        Ok(g)
    }

    pub fn adapter_gammas(&self) -> Vec<ParamId> {
        self.ids.adapters.iter().map(|(_, p)| p.gamma).collect()
    }

    pub fn decoder_vars(&self, b: &Binding) -> DecoderVars {
        let d = &self.ids.decoder;
        DecoderVars {
            w1: b.var(d[0]),
            b1: b.var(d[1]),
            w2: b.var(d[2]),
            b2: b.var(d[3]),
        }
    }

    pub fn sample_z<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        Tensor::randn(&[self.config.z_dim], 1.0, rng).into_data()
    }

    /// `z → w`; this path never sees text.
    pub fn map_style(&self, g: &Graph, b: &Binding, z: &[f64]) -> Result<Var, GenerateError> {
        if z.len() != self.config.z_dim {
            return Err(GenerateError::LatentSize {
                got: z.len(),
                expected: self.config.z_dim,
            });
        }
        let mut h = g.constant(Tensor::new(&[1, z.len()], z.to_vec()));
        let mut fan_in = self.config.z_dim;
        for &(w, bias) in &self.ids.mapping {
            let scale = self.config.mapping_lr_mult / (fan_in as f64).sqrt();
            let wv = g.mul_scalar(b.var(w), scale);
            let bv = g.mul_scalar(b.var(bias), self.config.mapping_lr_mult);
            h = g.leaky_relu(linear(g, h, wv, bv), LRELU);
            fan_in = self.config.w_dim;
        }
        Ok(h)
    }

    pub fn map_semantics(&self, g: &Graph, b: &Binding, w: Var, tokens: &TokenSet) -> Var {
        let eot = g.constant(tokens.eot_tensor());
        self.ids.semantics.forward(g, &|id| b.var(id), w, eot)
    }

    fn style(&self, g: &Graph, b: &Binding, conv: &ConvIds, latent: Var) -> Var {
        linear(g, latent, b.var(conv.affine_w), b.var(conv.affine_b))
    }

    /// Conv pyramid with adapters after the designated convolutions.
    pub fn synthesize_triplane(
        &self,
        g: &Graph,
        b: &Binding,
        w_t: Var,
        tokens: &TokenSet,
        adapters_enabled: bool,
    ) -> Result<[Var; 3], GenerateError> {
        self.synthesize_with(g, b, w_t, tokens, adapters_enabled)
    }

    fn synthesize_with(
        &self,
        g: &Graph,
        b: &Binding,
        modulation: Var,
        tokens: &TokenSet,
        adapters_enabled: bool,
    ) -> Result<[Var; 3], GenerateError> {
        let c = self.config.channels;
        let words = if adapters_enabled && !self.ids.adapters.is_empty() {
            Some(word_tokens(g, &tokens.words)?)
        } else {
            None
        };
        let mut x = b.var(self.ids.constant);
        for (j, conv) in self.ids.convs.iter().enumerate() {
            if j > 0 && j % 2 == 1 {
                x = g.upsample2x(x);
            }
            let s = self.style(g, b, conv, modulation);
            x = modulated_conv(g, x, b.var(conv.weight), s);
            x = g.leaky_relu(g.add(x, b.var(conv.bias)), LRELU);
            if let Some(words) = words {
                if let Some((_, p)) = self.ids.adapters.iter().find(|(slot, _)| *slot == j) {
                    let planes = split_planes(g, x, c);
                    let pv = p.vars(&|id| b.var(id));
                    let out = adapter_forward(g, &planes, words, &pv, self.config.adapter_flags)?;
                    x = g.concat(&out, 2);
                }
            }
        }
        let s = self.style(g, b, &self.ids.head, modulation);
        let head = g.mul_scalar(b.var(self.ids.head.weight), 1.0 / ((3 * c) as f64).sqrt());
        let s = g.reshape(s, &[3 * c]);
        let x = g.mul(x, s);
        let x = g.add(g.conv2d(x, head), b.var(self.ids.head.bias));
        Ok(split_planes(g, x, c))
    }

    /// Latent and prompt to tri-plane features, honoring the conditioning mode.
    pub fn forward(&self, g: &Graph, b: &Binding, z: &[f64], tokens: &TokenSet) -> Result<GenForward, GenerateError> {
        let w = self.map_style(g, b, z)?;
        self.forward_from_w(g, b, w, tokens)
    }

    pub fn forward_from_w(&self, g: &Graph, b: &Binding, w: Var, tokens: &TokenSet) -> Result<GenForward, GenerateError> {
        let w_t = self.map_semantics(g, b, w, tokens);
        let (modulation, adapters) = match self.config.conditioning {
            Conditioning::Full => (w_t, true),
            Conditioning::GlobalOnly => (w_t, false),
            Conditioning::LocalOnly => (w, true),
        };
        let planes = self.synthesize_with(g, b, modulation, tokens, adapters)?;
        Ok(GenForward { w, w_t, planes })
    }

    pub fn render(
        &self,
        g: &Graph,
        b: &Binding,
        planes: &[Var; 3],
        pose: &CameraPose,
        samples: usize,
        strat: Stratification,
    ) -> Result<RenderVars, GenerateError> {
        let rays = camera_rays(pose, samples, strat)?;
        Ok(volume_render(g, planes, &self.decoder_vars(b), &rays, WHITE)?)
    }

    /// Single forward pass with frozen parameters.
    pub fn generate(&self, z: &[f64], prompt: &str, pose: &CameraPose, samples: usize) -> Result<Image, GenerateError> {
        let tokens = encode_text(prompt, &self.vocab)?;
        let g = Graph::new(Precision::F32);
        let b = self.store.bind(&g, |_| false);
        let f = self.forward(&g, &b, z, &tokens)?;
        self.image(&g, &b, &f.planes, pose, samples)
    }

    /// Style latent for `z` as plain numbers.
    pub fn style_latent(&self, z: &[f64]) -> Result<Vec<f64>, GenerateError> {
        let g = Graph::new(Precision::F32);
        let b = self.store.bind(&g, |_| false);
        let w = self.map_style(&g, &b, z)?;
        let v = g.value(w).data().to_vec();
        Ok(v)
    }

    /// Generation from an explicit style latent.
    pub fn generate_from_w(&self, w: &[f64], prompt: &str, pose: &CameraPose, samples: usize) -> Result<Image, GenerateError> {
        let tokens = encode_text(prompt, &self.vocab)?;
        let g = Graph::new(Precision::F32);
        let b = self.store.bind(&g, |_| false);
        let wv = g.constant(Tensor::new(&[1, w.len()], w.to_vec()));
        let f = self.forward_from_w(&g, &b, wv, &tokens)?;
        self.image(&g, &b, &f.planes, pose, samples)
    }

    fn image(&self, g: &Graph, b: &Binding, planes: &[Var; 3], pose: &CameraPose, samples: usize) -> Result<Image, GenerateError> {
        let out = self.render(g, b, planes, pose, samples, Stratification::Midpoint)?;
        Ok(var_to_image(g, out.image, pose.image_size, pose.image_size))
    }
}

//! Toy text encoder over a closed attribute vocabulary, prompt templates and
//! the semantics mapping network that fuses the style latent with the
//! sentence token.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::{json, Map, Value};

use crate::autodiff::{linear, Graph, ParamId, ParamStore, Tensor, Var};

pub const D_TEXT: usize = 32;
pub const D_W: usize = 64;
pub const MAX_WORDS: usize = 12;
pub const NUM_TEMPLATES: usize = 3;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TextError {
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("vocabulary: {0}")]
    Vocabulary(String),
}

/// One optional value index per vocabulary slot.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Attributes(pub Vec<Option<usize>>);

impl Attributes {
    pub fn full(values: &[usize]) -> Self {
        Attributes(values.iter().map(|&v| Some(v)).collect())
    }

    pub fn empty(slots: usize) -> Self {
        Attributes(vec![None; slots])
    }

    pub fn is_complete(&self) -> bool {
        self.0.iter().all(Option::is_some)
    }

    pub fn specified(&self) -> usize {
        self.0.iter().filter(|v| v.is_some()).count()
    }

    /// Values of a complete assignment.
    pub fn values(&self) -> Vec<usize> {
        self.0
            .iter()
            .map(|v| v.expect("attribute assignment is partial"))
            .collect()
    }

    /// True when every specified slot of `self` agrees with `other`.
    pub fn matches(&self, other: &Attributes) -> bool {
        self.0
            .iter()
            .zip(&other.0)
            .all(|(a, b)| a.is_none() || a == b)
    }

    /// Compact key such as `2.0.1.-`.
    pub fn key(&self) -> String {
        self.0
            .iter()
            .map(|v| v.map_or("-".to_string(), |i| i.to_string()))
            .collect::<Vec<_>>()
            .join(".")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Slot {
    pub name: String,
    pub values: Vec<String>,
}

/// Sentence token: `m ↦ W2·tanh(W1·m + b1)`, `m` the mean word embedding.
#[derive(Clone, Debug, PartialEq)]
struct EotNet {
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
}

impl EotNet {
    fn apply(&self, m: &[f64]) -> Vec<f64> {
        let d = m.len();
        let h: Vec<f64> = (0..d)
            .map(|j| (self.b1[j] + (0..d).map(|i| m[i] * self.w1[i * d + j]).sum::<f64>()).tanh())
            .collect();
        (0..d)
            .map(|j| (0..d).map(|i| h[i] * self.w2[i * d + j]).sum())
            .collect()
    }
}

/// Closed attribute vocabulary with seeded unit-norm embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    pub slots: Vec<Slot>,
    pub fillers: Vec<String>,
    pub seed: u64,
    pub dim: usize,
    embeddings: HashMap<String, Vec<f64>>,
    unknown: Vec<f64>,
    lookup: HashMap<String, (usize, usize)>,
    eot_net: EotNet,
}

const FILLERS: [&str; 10] = [
    "a", "photo", "of", "with", "hair", "haired", "who", "is", "and", "person",
];

pub const HAIR: [&str; 6] = ["red", "yellow", "green", "cyan", "blue", "magenta"];
pub const AGE: [&str; 3] = ["young", "middle-aged", "old"];
pub const GENDER: [&str; 2] = ["man", "woman"];
pub const EYEWEAR: [&str; 2] = ["unspectacled", "bespectacled"];
pub const EXPRESSION: [&str; 2] = ["neutral", "smiling"];

impl Vocabulary {
    /// All five slots: hair, age, gender, eyewear, expression.
    pub fn toy() -> Self {
        Self::with_slot_count(5)
    }

    /// The first four slots (no expression).
    pub fn lab() -> Self {
        Self::with_slot_count(4)
    }

    pub fn with_slot_count(n: usize) -> Self {
        let all: [(&str, &[&str]); 5] = [
            ("hair", &HAIR),
            ("age", &AGE),
            ("gender", &GENDER),
            ("eyewear", &EYEWEAR),
            ("expression", &EXPRESSION),
        ];
        assert!((1..=5).contains(&n), "between one and five slots");
        let slots = all[..n]
            .iter()
            .map(|(name, vals)| Slot {
                name: name.to_string(),
                values: vals.iter().map(|s| s.to_string()).collect(),
            })
            .collect();
        let fillers = FILLERS.iter().map(|s| s.to_string()).collect();
        Self::build(slots, fillers, 7, D_TEXT).expect("built-in vocabulary is valid")
    }

    pub fn build(slots: Vec<Slot>, fillers: Vec<String>, seed: u64, dim: usize) -> Result<Self, TextError> {
        let mut lookup = HashMap::new();
        for (s, slot) in slots.iter().enumerate() {
            if slot.values.is_empty() {
                return Err(TextError::Vocabulary(format!("slot `{}` has no values", slot.name)));
            }
            for (v, word) in slot.values.iter().enumerate() {
                if lookup.insert(word.clone(), (s, v)).is_some() {
                    return Err(TextError::Vocabulary(format!("word `{word}` appears twice")));
                }
            }
        }
        if let Some(f) = fillers.iter().find(|f| lookup.contains_key(*f)) {
            return Err(TextError::Vocabulary(format!("filler `{f}` is also a slot value")));
        }
        let mut rng = crate::rng::stream(seed, 0);
        let unit = |rng: &mut crate::rng::Rng| {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect::<Vec<f64>>()
        };
        let mut embeddings = HashMap::new();
        for word in slots.iter().flat_map(|s| &s.values).chain(&fillers) {
            embeddings.insert(word.clone(), unit(&mut rng));
        }
        let unknown = unit(&mut rng);
        let mut net_rng = crate::rng::stream(seed, 1);
        let scale = 2.0 / (dim as f64).sqrt();
        let mat = |rng: &mut crate::rng::Rng, s: f64, n: usize| -> Vec<f64> {
            (0..n)
                .map(|_| {
                    let x: f64 = StandardNormal.sample(rng);
                    s * x
                })
                .collect()
        };
        let eot_net = EotNet {
            w1: mat(&mut net_rng, scale, dim * dim),
            b1: mat(&mut net_rng, 0.1, dim),
            w2: mat(&mut net_rng, 1.0 / (dim as f64).sqrt(), dim * dim),
        };
        Ok(Vocabulary {
            slots,
            fillers,
            seed,
            dim,
            embeddings,
            unknown,
            lookup,
            eot_net,
        })
    }

    pub fn num_slots(&self) -> usize {
        self.slots.len()
    }

    pub fn slot_sizes(&self) -> Vec<usize> {
        self.slots.iter().map(|s| s.values.len()).collect()
    }

    pub fn slot_index(&self, name: &str) -> Option<usize> {
        self.slots.iter().position(|s| s.name == name)
    }

    pub fn embedding(&self, word: &str) -> &[f64] {
        self.embeddings.get(word).unwrap_or(&self.unknown)
    }

    pub fn unknown_embedding(&self) -> &[f64] {
        &self.unknown
    }

    /// Every complete attribute assignment, in lexicographic order.
    pub fn all_combinations(&self) -> Vec<Attributes> {
        let sizes = self.slot_sizes();
        let total: usize = sizes.iter().product();
        (0..total)
            .map(|mut k| {
                let mut vals = vec![0; sizes.len()];
                for (s, n) in sizes.iter().enumerate().rev() {
                    vals[s] = k % n;
                    k /= n;
                }
                Attributes::full(&vals)
            })
            .collect()
    }

    pub fn to_json(&self) -> Value {
        let mut slots = Map::new();
        for s in &self.slots {
            slots.insert(s.name.clone(), json!(s.values));
        }
        json!({
            "slots": slots,
            "fillers": self.fillers,
            "embedding_seed": self.seed,
            "dim": self.dim,
        })
    }

    pub fn from_json(v: &Value) -> Result<Self, TextError> {
        let bad = |m: &str| TextError::Vocabulary(m.to_string());
        let slots = v["slots"]
            .as_object()
            .ok_or_else(|| bad("`slots` must be an object"))?
            .iter()
            .map(|(name, words)| {
                let values = words
                    .as_array()
                    .ok_or_else(|| bad("slot values must be a list"))?
                    .iter()
                    .map(|w| w.as_str().map(str::to_string).ok_or_else(|| bad("words must be strings")))
                    .collect::<Result<Vec<_>, _>>()?;
                Ok(Slot {
                    name: name.clone(),
                    values,
                })
            })
            .collect::<Result<Vec<_>, TextError>>()?;
        let fillers = match v.get("fillers") {
            Some(f) => serde_json::from_value(f.clone()).map_err(|e| bad(&e.to_string()))?,
            None => Vec::new(),
        };
        let seed = v["embedding_seed"].as_u64().ok_or_else(|| bad("missing `embedding_seed`"))?;
        let dim = v.get("dim").and_then(Value::as_u64).unwrap_or(D_TEXT as u64) as usize;
        Self::build(slots, fillers, seed, dim)
    }

    /// Caption for an assignment using paraphrase template `template`.
    pub fn caption(&self, attrs: &Attributes, template: usize) -> String {
        assert_eq!(attrs.0.len(), self.num_slots(), "one entry per slot");
        let word = |name: &str| -> Option<&str> {
            let s = self.slot_index(name)?;
            attrs.0[s].map(|v| self.slots[s].values[v].as_str())
        };
        let mut out: Vec<String> = Vec::new();
        let mut push = |parts: &[&str]| out.extend(parts.iter().map(|s| s.to_string()));
        let noun = word("gender").unwrap_or("person");
        match template % NUM_TEMPLATES {
            0 => {
                push(&["a"]);
                for name in ["expression", "age"] {
                    if let Some(w) = word(name) {
                        push(&[w]);
                    }
                }
                push(&[noun]);
                if let Some(w) = word("hair") {
                    push(&["with", w, "hair"]);
                }
                if let Some(w) = word("eyewear") {
                    push(&[w]);
                }
            }
            1 => {
                push(&["photo", "of", "a", noun]);
                if let Some(w) = word("hair") {
                    push(&[w, "hair"]);
                }
                for name in ["age", "eyewear", "expression"] {
                    if let Some(w) = word(name) {
                        push(&[w]);
                    }
                }
            }
            _ => {
                if let Some(w) = word("hair") {
                    push(&[w, "haired"]);
                }
                if let Some(w) = word("age") {
                    push(&[w]);
                }
                push(&[noun]);
                match (word("eyewear"), word("expression")) {
                    (Some(a), Some(b)) => push(&["who", "is", a, "and", b]),
                    (Some(a), None) | (None, Some(a)) => push(&["who", "is", a]),
                    (None, None) => {}
                }
            }
        }
        out.join(" ")
    }

    /// Attributes named by a prompt; later mentions of a slot win.
    pub fn parse(&self, prompt: &str) -> Attributes {
        let mut attrs = Attributes::empty(self.num_slots());
        for w in split_words(prompt) {
            if let Some(&(s, v)) = self.lookup.get(&w) {
                attrs.0[s] = Some(v);
            }
        }
        attrs
    }

    /// Uniform complete assignment.
    pub fn sample_attributes<R: Rng + ?Sized>(&self, rng: &mut R) -> Attributes {
        Attributes::full(
            &self
                .slots
                .iter()
                .map(|s| rng.random_range(0..s.values.len()))
                .collect::<Vec<_>>(),
        )
    }
}

fn split_words(prompt: &str) -> Vec<String> {
    prompt
        .split(|c: char| c.is_whitespace() || c == ',' || c == '.')
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Sentence token plus one token per recognized word.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSet {
    pub eot: Vec<f64>,
    pub words: Vec<Vec<f64>>,
    pub prompt_text: String,
}

impl TokenSet {
    pub fn words_tensor(&self) -> Tensor {
        let d = self.eot.len();
        Tensor::new(&[self.words.len(), d], self.words.concat())
    }

    pub fn eot_tensor(&self) -> Tensor {
        Tensor::new(&[1, self.eot.len()], self.eot.clone())
    }
}

pub fn encode_text(prompt: &str, vocab: &Vocabulary) -> Result<TokenSet, TextError> {
    let mut words = split_words(prompt);
    if words.is_empty() {
        return Err(TextError::EmptyPrompt);
    }
    words.truncate(MAX_WORDS);
    let tokens: Vec<Vec<f64>> = words.iter().map(|w| vocab.embedding(w).to_vec()).collect();
    let mut mean = vec![0.0; vocab.dim];
    for t in &tokens {
        for (m, v) in mean.iter_mut().zip(t) {
            *m += v / tokens.len() as f64;
        }
    }
    Ok(TokenSet {
        eot: vocab.eot_net.apply(&mean),
        words: tokens,
        prompt_text: prompt.to_string(),
    })
}

/// A uniformly sampled complete caption with a uniformly chosen template.
pub fn sample_prompt<R: Rng + ?Sized>(vocab: &Vocabulary, rng: &mut R) -> String {
    let attrs = vocab.sample_attributes(rng);
    let template = rng.random_range(0..NUM_TEMPLATES);
    vocab.caption(&attrs, template)
}

/// Parameter ids of the semantics mapping network: two layers on the
/// sentence token, two on the style latent and one fusion layer.
#[derive(Clone, Debug)]
pub struct SemanticsMapper {
    pub text: [(ParamId, ParamId); 2],
    pub style: [(ParamId, ParamId); 2],
    pub fuse: (ParamId, ParamId),
}

pub const LRELU: f64 = 0.2;

impl SemanticsMapper {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, d_text: usize, d_w: usize, rng: &mut R) -> Self {
        let mut layer = |name: &str, fan_in: usize, fan_out: usize, rng: &mut R| {
            let w = store.add(
                format!("{prefix}.{name}.w"),
                Tensor::randn(&[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt(), rng),
            );
            let b = store.add(format!("{prefix}.{name}.b"), Tensor::zeros(&[fan_out]));
            (w, b)
        };
        let text = [layer("text0", d_text, d_w, rng), layer("text1", d_w, d_w, rng)];
        let style = [layer("style0", d_w, d_w, rng), layer("style1", d_w, d_w, rng)];
        let fuse = layer("fuse", 2 * d_w, d_w, rng);
        SemanticsMapper { text, style, fuse }
    }

    /// `w: [1, D_w]`, `eot: [1, D_text]` → `w_t: [1, D_w]`.
    pub fn forward(&self, g: &Graph, vars: &dyn Fn(ParamId) -> Var, w: Var, eot: Var) -> Var {
        let mut t = eot;
        for (wi, bi) in self.text {
            t = g.leaky_relu(linear(g, t, vars(wi), vars(bi)), LRELU);
        }
        let mut s = w;
        for (wi, bi) in self.style {
            s = g.leaky_relu(linear(g, s, vars(wi), vars(bi)), LRELU);
        }
        let cat = g.concat(&[s, t], 1);
        linear(g, cat, vars(self.fuse.0), vars(self.fuse.1))
    }
}

/// Convenience: `map_semantics` on plain vectors with a frozen store.
pub fn map_semantics(store: &ParamStore, mapper: &SemanticsMapper, w: &[f64], tokens: &TokenSet) -> Vec<f64> {
    let g = Graph::new(crate::autodiff::Precision::F64);
    let b = store.bind(&g, |_| false);
    let wv = g.constant(Tensor::new(&[1, w.len()], w.to_vec()));
    let ev = g.constant(tokens.eot_tensor());
    let out = mapper.forward(&g, &|id| b.var(id), wv, ev);
    let v = g.value(out).data().to_vec();
    v
}

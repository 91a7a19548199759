//! 3D-aware gated cross-attention adapters.
//!
//! For plane `f_ab` (rows `a`, cols `b`) the augmented map is
//! `[pooled(a), f_ab, pooled(b)]` along channels, where `pooled(a)` comes from
//! the cyclically previous plane (which carries axis `a` in its columns) and
//! `pooled(b)` from the next plane (which carries `b` in its rows). With the
//! order `(f_xy, f_yz, f_zx)` that is: for `f_xy`, `f_zx` pooled over `z`
//! gives the `x` column and `f_yz` pooled over `z` gives the `y` row.

use rand::Rng;

use crate::autodiff::{attention, Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum AdapterError {
    #[error("cross-attention needs at least one word token")]
    NoWords,
    #[error("planes must share one square shape, got {0:?}")]
    PlaneShapes(Vec<Vec<usize>>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PoolMode {
    #[default]
    Mean,
    Max,
}

/// Which spatial axis of an `[H, W, C]` plane is reduced.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolAxis {
    /// Reduce over rows: `1×W×C`.
    Rows,
    /// Reduce over columns: `H×1×C`.
    Cols,
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct AdapterFlags {
    pub pool: PoolMode,
    /// Residual without the `β·tanh(γ)` gate: `v + β·A`.
    pub no_gate: bool,
    /// Replace the pooled blocks with zeros.
    pub no_3d_aware: bool,
}

pub fn axis_pool(g: &Graph, plane: Var, axis: PoolAxis, mode: PoolMode) -> Var {
    let ax = match axis {
        PoolAxis::Rows => 0,
        PoolAxis::Cols => 1,
    };
    match mode {
        PoolMode::Mean => g.mean_axis(plane, ax),
        PoolMode::Max => g.max_axis(plane, ax),
    }
}

fn check_planes(g: &Graph, planes: &[Var; 3]) -> Result<[usize; 3], AdapterError> {
    let shapes: Vec<Vec<usize>> = planes.iter().map(|p| g.shape(*p)).collect();
    let ok = shapes.iter().all(|s| s.len() == 3 && *s == shapes[0]) && shapes[0][0] == shapes[0][1];
    if ok {
        Ok([shapes[0][0], shapes[0][1], shapes[0][2]])
    } else {
        Err(AdapterError::PlaneShapes(shapes))
    }
}

/// `[H, W, C]` ×3 → `[H, W, 3C]` ×3.
pub fn build_aware_feature(g: &Graph, planes: &[Var; 3], flags: AdapterFlags) -> Result<[Var; 3], AdapterError> {
    let [h, w, c] = check_planes(g, planes)?;
    let make = |i: usize| {
        let prev = planes[(i + 2) % 3];
        let next = planes[(i + 1) % 3];
        let (first, last) = if flags.no_3d_aware {
            let z = g.constant(Tensor::zeros(&[h, w, c]));
            (z, z)
        } else {
            let col = axis_pool(g, prev, PoolAxis::Rows, flags.pool);
            let col = g.reshape(col, &[h, 1, c]);
            let row = axis_pool(g, next, PoolAxis::Cols, flags.pool);
            let row = g.reshape(row, &[1, w, c]);
            (g.expand(col, &[h, w, c]), g.expand(row, &[h, w, c]))
        };
        g.concat(&[first, planes[i], last], 2)
    };
    Ok([make(0), make(1), make(2)])
}

/// One token per location, row-major: `[H, W, D]` → `[H·W, D]`.
pub fn tokenize_planes(g: &Graph, aware: Var) -> Var {
    let s = g.shape(aware);
    g.reshape(aware, &[s[0] * s[1], s[2]])
}

pub fn untokenize(g: &Graph, tokens: Var, h: usize, w: usize) -> Var {
    let d = g.shape(tokens)[1];
    g.reshape(tokens, &[h, w, d])
}

/// Projection and gate parameters of one adapter, shared by the three planes.
#[derive(Clone, Copy, Debug)]
pub struct AdapterParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub beta: ParamId,
    pub gamma: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct AdapterVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub beta: Var,
    pub gamma: Var,
}

impl AdapterParams {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, c: usize, d_text: usize, rng: &mut R) -> Self {
        let d = 3 * c;
        let mut add = |name: &str, t: Tensor| store.add(format!("{prefix}.{name}"), t);
        AdapterParams {
            wq: add("wq", Tensor::randn(&[d, d], 1.0 / (d as f64).sqrt(), rng)),
            wk: add("wk", Tensor::randn(&[d_text, d], 1.0 / (d_text as f64).sqrt(), rng)),
            wv: add("wv", Tensor::randn(&[d_text, d], 1.0 / (d_text as f64).sqrt(), rng)),
            wo: add("wo", Tensor::randn(&[d, c], 1.0 / (d as f64).sqrt(), rng)),
            beta: add("beta", Tensor::ones(&[1])),
            gamma: add("gamma", Tensor::zeros(&[1])),
        }
    }

    pub fn vars(&self, lookup: &dyn Fn(ParamId) -> Var) -> AdapterVars {
        AdapterVars {
            wq: lookup(self.wq),
            wk: lookup(self.wk),
            wv: lookup(self.wv),
            wo: lookup(self.wo),
            beta: lookup(self.beta),
            gamma: lookup(self.gamma),
        }
    }
}

/// Word tokens `[L, D]` on the graph; empty lists are rejected.
pub fn word_tokens(g: &Graph, words: &[Vec<f64>]) -> Result<Var, AdapterError> {
    if words.is_empty() {
        return Err(AdapterError::NoWords);
    }
    Ok(g.constant(Tensor::new(&[words.len(), words[0].len()], words.concat())))
}

/// `v + β·tanh(γ)·A`, `A` the untokenized attention of the 3D tokens over the
/// word tokens.
pub fn gated_cross_attention(g: &Graph, v: Var, tokens_3d: Var, words: Var, p: &AdapterVars, flags: AdapterFlags) -> Var {
    let s = g.shape(v);
    let q = g.matmul(tokens_3d, p.wq);
    let k = g.matmul(words, p.wk);
    let val = g.matmul(words, p.wv);
    let d = g.shape(q)[1];
    let a = attention(g, q, k, val, 1.0 / (d as f64).sqrt());
    let a = g.matmul(a, p.wo);
    let a = untokenize(g, a, s[0], s[1]);
    let gate = if flags.no_gate {
        p.beta
    } else {
        g.mul(p.beta, g.tanh(p.gamma))
    };
    g.add(v, g.mul(a, gate))
}

/// Full adapter on a plane triple.
pub fn adapter_forward(
    g: &Graph,
    planes: &[Var; 3],
    words: Var,
    p: &AdapterVars,
    flags: AdapterFlags,
) -> Result<[Var; 3], AdapterError> {
    let aware = build_aware_feature(g, planes, flags)?;
    let out = |i: usize| {
        let t = tokenize_planes(g, aware[i]);
        gated_cross_attention(g, planes[i], t, words, p, flags)
    };
    Ok([out(0), out(1), out(2)])
}

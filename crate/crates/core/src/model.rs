//! Mean-of-embeddings next-token scorer with closed-form gradients.
//!
//! `h = mean_i E[context_i]`, `f(z) = U[z] . h + b[z]`. The encoder is a bag
//! of tokens, so it is blind to token order.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::TokenId;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("empty context")]
    EmptyContext,
    #[error("token {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: TokenId, vocab: usize },
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("non-finite gradient in {0}")]
    NonFinite(&'static str),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Anything that produces next-token logits for a context.
pub trait NextTokenScorer {
    fn vocab_size(&self) -> usize;
    fn logits(&self, context: &[TokenId]) -> Result<Vec<f64>, ModelError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub d: usize,
    pub vocab_size: usize,
    /// Token embeddings, row-major `vocab_size x d`.
    pub emb: Vec<f64>,
    /// Output projection, row-major `vocab_size x d`.
    pub out: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogitsRow {
    pub values: Vec<f64>,
    pub context_len: usize,
}

/// Forward pass output kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub hidden: Vec<f64>,
    pub logits: LogitsRow,
}

impl ModelParams {
    pub fn zeros(d: usize, vocab_size: usize) -> Self {
        Self {
            d,
            vocab_size,
            emb: vec![0.0; vocab_size * d],
            out: vec![0.0; vocab_size * d],
            bias: vec![0.0; vocab_size],
        }
    }

    /// Every entry i.i.d. uniform in `[-scale, scale]`.
    pub fn init(seed: u64, d: usize, vocab_size: usize, scale: f64) -> Result<Self, ModelError> {
        if d == 0 {
            return Err(ModelError::Config("embedding width must be at least 1".into()));
        }
        if !(scale >= 0.0) || !scale.is_finite() {
            return Err(ModelError::Config(format!("init scale {scale} must be finite and >= 0")));
        }
        let mut p = Self::zeros(d, vocab_size);
        if scale > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for x in p.emb.iter_mut().chain(p.out.iter_mut()).chain(p.bias.iter_mut()) {
                *x = rng.random_range(-scale..=scale);
            }
        }
        Ok(p)
    }

    pub fn emb_row(&self, token: TokenId) -> &[f64] {
        let i = token as usize * self.d;
        &self.emb[i..i + self.d]
    }

    pub fn out_row(&self, token: TokenId) -> &[f64] {
        let i = token as usize * self.d;
        &self.out[i..i + self.d]
    }

    pub fn param_count(&self) -> usize {
        self.emb.len() + self.out.len() + self.bias.len()
    }

    fn check_context(&self, context: &[TokenId]) -> Result<(), ModelError> {
        if context.is_empty() {
            return Err(ModelError::EmptyContext);
        }
        if let Some(&token) = context.iter().find(|&&t| t as usize >= self.vocab_size) {
            return Err(ModelError::TokenOutOfRange { token, vocab: self.vocab_size });
        }
        Ok(())
    }

    pub fn hidden(&self, context: &[TokenId]) -> Result<Vec<f64>, ModelError> {
        self.check_context(context)?;
        let mut h = vec![0.0; self.d];
        for &tok in context {
            for (hj, e) in h.iter_mut().zip(self.emb_row(tok)) {
                *hj += e;
            }
        }
        let inv = 1.0 / context.len() as f64;
        h.iter_mut().for_each(|x| *x *= inv);
        Ok(h)
    }

    pub fn logits_from_hidden(&self, h: &[f64]) -> Vec<f64> {
        (0..self.vocab_size).map(|z| dot(self.out_row(z as TokenId), h) + self.bias[z]).collect()
    }

    pub fn forward(&self, context: &[TokenId]) -> Result<Forward, ModelError> {
        let hidden = self.hidden(context)?;
        let values = self.logits_from_hidden(&hidden);
        Ok(Forward { hidden, logits: LogitsRow { values, context_len: context.len() } })
    }

    /// Accumulates the parameter gradient of a loss whose logit-gradient is
    /// `dlogits` into `grads`. Zero entries of `dlogits` are skipped, so a
    /// masked gradient costs O(|valid| * d) plus the embedding scatter.
    pub fn backward_into(
        &self,
        context: &[TokenId],
        hidden: &[f64],
        dlogits: &[f64],
        grads: &mut ParamGradients,
    ) -> Result<(), ModelError> {
        if dlogits.len() != self.vocab_size {
            return Err(ModelError::Shape { expected: self.vocab_size, got: dlogits.len() });
        }
        if hidden.len() != self.d {
            return Err(ModelError::Shape { expected: self.d, got: hidden.len() });
        }
        self.check_context(context)?;
        let d = self.d;
        let mut dh = vec![0.0; d];
        for (z, &g) in dlogits.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grads.bias[z] += g;
            let row = &mut grads.out[z * d..(z + 1) * d];
            for (r, hj) in row.iter_mut().zip(hidden) {
                *r += g * hj;
            }
            for (dhj, u) in dh.iter_mut().zip(self.out_row(z as TokenId)) {
                *dhj += g * u;
            }
        }
        let inv = 1.0 / context.len() as f64;
        for &tok in context {
            let row = &mut grads.emb[tok as usize * d..(tok as usize + 1) * d];
            for (r, g) in row.iter_mut().zip(&dh) {
                *r += g * inv;
            }
        }
        Ok(())
    }

    pub fn backward(&self, context: &[TokenId], dlogits: &[f64]) -> Result<ParamGradients, ModelError> {
        let hidden = self.hidden(context)?;
        let mut g = ParamGradients::zeros_like(self);
        self.backward_into(context, &hidden, dlogits, &mut g)?;
        Ok(g)
    }

    fn tensors_mut(&mut self) -> [&mut [f64]; 3] {
        [&mut self.emb, &mut self.out, &mut self.bias]
    }

    /// Parameter `k` in flattened (emb, out, bias) order.
    pub fn flat(&self, k: usize) -> f64 {
        let (e, o) = (self.emb.len(), self.out.len());
        if k < e {
            self.emb[k]
        } else if k < e + o {
            self.out[k - e]
        } else {
            self.bias[k - e - o]
        }
    }

    pub fn set_flat(&mut self, k: usize, value: f64) {
        let (e, o) = (self.emb.len(), self.out.len());
        if k < e {
            self.emb[k] = value;
        } else if k < e + o {
            self.out[k - e] = value;
        } else {
            self.bias[k - e - o] = value;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.emb.iter().chain(&self.out).chain(&self.bias).all(|x| x.is_finite())
    }
}

impl NextTokenScorer for ModelParams {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn logits(&self, context: &[TokenId]) -> Result<Vec<f64>, ModelError> {
        Ok(self.forward(context)?.logits.values)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Gradient buffers shaped like [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradients {
    pub emb: Vec<f64>,
    pub out: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ParamGradients {
    pub fn zeros_like(p: &ModelParams) -> Self {
        Self { emb: vec![0.0; p.emb.len()], out: vec![0.0; p.out.len()], bias: vec![0.0; p.bias.len()] }
    }

    pub fn tensors(&self) -> [&[f64]; 3] {
        [&self.emb, &self.out, &self.bias]
    }

    fn tensors_mut(&mut self) -> [&mut [f64]; 3] {
        [&mut self.emb, &mut self.out, &mut self.bias]
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.emb.iter().chain(&self.out).chain(&self.bias)
    }

    pub fn norm(&self) -> f64 {
        self.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn clear(&mut self) {
        for t in self.tensors_mut() {
            t.fill(0.0);
        }
    }

    pub fn first_non_finite(&self) -> Option<&'static str> {
        let names = ["emb", "out", "bias"];
        self.tensors().iter().zip(names).find(|(t, _)| t.iter().any(|x| !x.is_finite())).map(|(_, n)| n)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub step: u64,
    /// First and second moments, flattened in (emb, out, bias) order. Empty for SGD.
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, params: &ModelParams) -> Result<Self, ModelError> {
        if !(lr > 0.0) {
            return Err(ModelError::Config(format!("learning rate {lr} must be positive")));
        }
        let n = match kind {
            OptimizerKind::Sgd => 0,
            OptimizerKind::Adam { .. } => params.param_count(),
        };
        Ok(Self { kind, lr, step: 0, m: vec![0.0; n], v: vec![0.0; n] })
    }

    /// Applies one update. A non-finite gradient leaves parameters untouched.
    pub fn step(&mut self, params: &mut ModelParams, grads: &ParamGradients) -> Result<(), ModelError> {
        if let Some(name) = grads.first_non_finite() {
            return Err(ModelError::NonFinite(name));
        }
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.tensors_mut().into_iter().zip(grads.tensors()) {
                    p.iter_mut().zip(g).for_each(|(p, g)| *p -= self.lr * g);
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                let mut k = 0;
                for (p, g) in params.tensors_mut().into_iter().zip(grads.tensors()) {
                    for (p, &g) in p.iter_mut().zip(g) {
                        let m = &mut self.m[k];
                        let v = &mut self.v[k];
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                        k += 1;
                    }
                }
            }
        }
        Ok(())
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// JSON checkpoint: `{"version", "params": {d, vocab_size, emb, out, bias},
/// "optimizer": {kind, lr, step, m, v}}`. Floats are written in shortest
/// round-trip form, so a save/load cycle is bit-exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub params: ModelParams,
    pub optimizer: Optimizer,
}

impl Checkpoint {
    pub fn new(params: ModelParams, optimizer: Optimizer) -> Self {
        Self { version: CHECKPOINT_VERSION, params, optimizer }
    }

    pub fn write<W: Write>(&self, w: W) -> Result<(), ModelError> {
        serde_json::to_writer(w, self)?;
        Ok(())
    }

    pub fn read<R: Read>(r: R) -> Result<Self, ModelError> {
        let ck: Self = serde_json::from_reader(r)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(ModelError::Version(ck.version));
        }
        let p = &ck.params;
        let want = p.vocab_size * p.d;
        for got in [p.emb.len(), p.out.len()] {
            if got != want {
                return Err(ModelError::Shape { expected: want, got });
            }
        }
        if p.bias.len() != p.vocab_size {
            return Err(ModelError::Shape { expected: p.vocab_size, got: p.bias.len() });
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn init_is_deterministic() {
        let a = ModelParams::init(3, 4, 10, 0.1).unwrap();
        let b = ModelParams::init(3, 4, 10, 0.1).unwrap();
        assert_eq!(a, b);
        assert!(a.emb.iter().all(|x| x.abs() <= 0.1));
        assert_ne!(a, ModelParams::init(4, 4, 10, 0.1).unwrap());
    }

    #[test]
    fn zero_scale_gives_flat_logits() {
        let p = ModelParams::init(3, 4, 10, 0.0).unwrap();
        let f = p.logits(&[1, 2]).unwrap();
        assert!(f.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn init_mean_near_zero() {
        // Uniform[-s, s] has sd s/sqrt(3); the mean of n draws has sd s/sqrt(3n).
        let p = ModelParams::init(11, 32, 400, 0.1).unwrap();
        let n = p.emb.len() as f64;
        let mean = p.emb.iter().sum::<f64>() / n;
        assert!(mean.abs() < 3.0 * 0.1 / (3.0 * n).sqrt());
    }

    #[test]
    fn init_rejects_bad_config() {
        assert!(ModelParams::init(0, 0, 10, 0.1).is_err());
        assert!(ModelParams::init(0, 2, 10, f64::NAN).is_err());
    }

    #[test]
    fn single_token_hidden_is_embedding() {
        let p = ModelParams::init(1, 3, 5, 0.5).unwrap();
        assert_eq!(p.hidden(&[4]).unwrap(), p.emb_row(4).to_vec());
    }

    #[test]
    fn hand_evaluated_logit() {
        let mut p = ModelParams::zeros(2, 2);
        p.emb[0..2].copy_from_slice(&[1.0, 0.0]);
        p.out[2..4].copy_from_slice(&[2.0, 3.0]);
        p.bias[1] = 0.5;
        assert_eq!(p.logits(&[0]).unwrap()[1], 2.5);
    }

    #[test]
    fn forward_errors() {
        let p = ModelParams::zeros(2, 3);
        assert!(matches!(p.forward(&[]), Err(ModelError::EmptyContext)));
        assert!(matches!(p.forward(&[3]), Err(ModelError::TokenOutOfRange { token: 3, vocab: 3 })));
        assert!(matches!(p.backward(&[0], &[1.0]), Err(ModelError::Shape { .. })));
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let p = ModelParams::init(2, 3, 6, 0.3).unwrap();
        let g = p.backward(&[1, 2, 2], &[0.0; 6]).unwrap();
        assert_eq!(g.norm(), 0.0);
    }

    #[test]
    fn backward_matches_finite_differences() {
        // Scalar objective L = c . f(context) for a fixed random c.
        let p = ModelParams::init(5, 3, 6, 0.5).unwrap();
        let ctx = [1u32, 4, 4, 0];
        let c = [0.3, -1.2, 0.7, 0.05, -0.4, 2.0];
        let obj = |q: &ModelParams| -> f64 { q.logits(&ctx).unwrap().iter().zip(&c).map(|(f, c)| f * c).sum() };
        let g = p.backward(&ctx, &c).unwrap();
        let h = 1e-5;
        let mut q = p.clone();
        for (k, want) in g.iter().enumerate() {
            let orig = q.flat(k);
            q.set_flat(k, orig + h);
            let up = obj(&q);
            q.set_flat(k, orig - h);
            let down = obj(&q);
            q.set_flat(k, orig);
            let fd = (up - down) / (2.0 * h);
            assert!((fd - want).abs() <= 1e-4 * want.abs().max(1e-6), "param {k}: fd {fd} vs {want}");
        }
    }

    #[test]
    fn sgd_on_parabola() {
        // f(x) = x^2 through the bias of a 1-token model: df/dx = 2x.
        let mut p = ModelParams::zeros(1, 1);
        p.bias[0] = 1.0;
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1, &p).unwrap();
        let g = ParamGradients { emb: vec![0.0], out: vec![0.0], bias: vec![2.0 * p.bias[0]] };
        opt.step(&mut p, &g).unwrap();
        assert!((p.bias[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let p0 = ModelParams::init(2, 2, 4, 0.2).unwrap();
        let zero = ParamGradients::zeros_like(&p0);
        for kind in [OptimizerKind::Sgd, OptimizerKind::default()] {
            let mut p = p0.clone();
            let mut opt = Optimizer::new(kind, 0.01, &p).unwrap();
            opt.step(&mut p, &zero).unwrap();
            assert_eq!(p, p0);
        }
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut p = ModelParams::init(2, 2, 4, 0.2).unwrap();
        let before = p.clone();
        let mut g = ParamGradients::zeros_like(&p);
        g.out[3] = f64::NAN;
        let mut opt = Optimizer::new(OptimizerKind::default(), 0.01, &p).unwrap();
        assert!(matches!(opt.step(&mut p, &g), Err(ModelError::NonFinite("out"))));
        assert_eq!(p, before);
        assert!(Optimizer::new(OptimizerKind::Sgd, 0.0, &p).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut p = ModelParams::init(9, 4, 7, 0.1).unwrap();
        let mut opt = Optimizer::new(OptimizerKind::default(), 1e-2, &p).unwrap();
        let g = p.backward(&[1, 2, 3], &[0.1, -0.2, 0.3, 0.0, 0.0, 0.5, -0.7]).unwrap();
        opt.step(&mut p, &g).unwrap();
        let ck = Checkpoint::new(p, opt);
        let mut buf = Vec::new();
        ck.write(&mut buf).unwrap();
        let back = Checkpoint::read(&buf[..]).unwrap();
        for (a, b) in ck.params.emb.iter().zip(&back.params.emb) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(back, ck);
    }

    proptest! {
        #[test]
        fn bag_encoder_is_permutation_invariant(ctx in proptest::collection::vec(0u32..8, 1..12), seed in 0u64..1000) {
            let p = ModelParams::init(seed, 3, 8, 0.5).unwrap();
            let mut rev = ctx.clone();
            rev.reverse();
            let a = p.logits(&ctx).unwrap();
            let b = p.logits(&rev).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}

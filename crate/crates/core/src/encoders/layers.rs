//! A forward-pass context binding named parameters onto a tape, and the layer
//! building blocks the encoders are assembled from.

use super::params::{BnSet, ParamSet};
use super::{AttentionMode, TemporalConfig};
use crate::error::{contract_err, dim_err, Result};
use crate::tensor::{ConvSpec, Gradients, PoolSpec, Scalar, Tape, Tensor, Var};

enum BnStats<'a, T> {
    Update(&'a mut BnSet<T>),
    Frozen(&'a BnSet<T>),
}

/// One forward pass: a tape plus lazily bound parameter handles.
pub struct Forward<'a, T: Scalar> {
    pub tape: Tape<T>,
    params: &'a ParamSet<T>,
    vars: Vec<Option<Var>>,
    bn: BnStats<'a, T>,
    train: bool,
    track_params: bool,
}

impl<'a, T: Scalar> Forward<'a, T> {
    /// Training pass: batch statistics, running stats updated, parameters differentiable.
    pub fn train(params: &'a ParamSet<T>, bn: &'a mut BnSet<T>) -> Self {
        Self::with_tape(Tape::new(), params, BnStats::Update(bn), true, true)
    }

    /// Inference pass: running statistics, parameters are constants.
    pub fn eval(params: &'a ParamSet<T>, bn: &'a BnSet<T>) -> Self {
        Self::with_tape(Tape::new(), params, BnStats::Frozen(bn), false, false)
    }

    /// Inference-mode layers on an existing tape, parameters differentiable.
    pub fn eval_on(tape: Tape<T>, params: &'a ParamSet<T>, bn: &'a BnSet<T>) -> Self {
        Self::with_tape(tape, params, BnStats::Frozen(bn), false, true)
    }

    /// Training-mode layers on an existing tape.
    pub fn train_on(tape: Tape<T>, params: &'a ParamSet<T>, bn: &'a mut BnSet<T>) -> Self {
        Self::with_tape(tape, params, BnStats::Update(bn), true, true)
    }

    fn with_tape(tape: Tape<T>, params: &'a ParamSet<T>, bn: BnStats<'a, T>, train: bool, track: bool) -> Self {
        Self { tape, params, vars: vec![None; params.len()], bn, train, track_params: track }
    }

    pub fn into_tape(self) -> Tape<T> {
        self.tape
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    /// Handle for a named parameter, placed on the tape on first use.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        let id = self.params.id(name).ok_or_else(|| contract_err(format!("no parameter named {name}")))?;
        if let Some(v) = self.vars[id] {
            return Ok(v);
        }
        let t = self.params.get(id).clone();
        let v = if self.track_params { self.tape.leaf(t) } else { self.tape.constant(t) };
        self.vars[id] = Some(v);
        Ok(v)
    }

    /// Uses `v` in place of the stored value of parameter `name`.
    pub fn bind(&mut self, name: &str, v: Var) -> Result<()> {
        let id = self.params.id(name).ok_or_else(|| contract_err(format!("no parameter named {name}")))?;
        self.vars[id] = Some(v);
        Ok(())
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.tape.constant(t)
    }

    /// Gradients for every parameter, in parameter order (`None` where unused).
    pub fn param_grads(&self, grads: &Gradients<T>) -> Vec<Option<Tensor<T>>> {
        self.vars.iter().map(|v| v.and_then(|v| grads.wrt(v))).collect()
    }

    pub fn batch_norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let g = self.param(&format!("{prefix}.gamma"))?;
        let b = self.param(&format!("{prefix}.beta"))?;
        let train = self.train;
        match &mut self.bn {
            BnStats::Update(set) => {
                let id = set.id(prefix).ok_or_else(|| contract_err(format!("no batch norm named {prefix}")))?;
                self.tape.batch_norm(x, g, b, set.get_mut(id), train)
            }
            BnStats::Frozen(set) => {
                let id = set.id(prefix).ok_or_else(|| contract_err(format!("no batch norm named {prefix}")))?;
                let mut stats = set.get(id).clone();
                self.tape.batch_norm(x, g, b, &mut stats, false)
            }
        }
    }

    /// `x·w + b` from `{prefix}.w` `[in,out]` and `{prefix}.b`.
    pub fn linear(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.param(&format!("{prefix}.w"))?;
        let b = self.param(&format!("{prefix}.b"))?;
        self.tape.linear(x, w, b)
    }

    pub fn linear_bn_relu(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.param(&format!("{prefix}.w"))?;
        let y = self.tape.matmul(x, w)?;
        let y = self.batch_norm(y, &format!("{prefix}.bn"))?;
        self.tape.relu(y)
    }

    /// conv (no bias) → batch norm → ReLU.
    pub fn conv_bn_relu(&mut self, x: Var, prefix: &str, spec: ConvSpec) -> Result<Var> {
        let w = self.param(&format!("{prefix}.w"))?;
        let y = self.tape.conv(x, w, spec)?;
        let y = self.batch_norm(y, &format!("{prefix}.bn"))?;
        self.tape.relu(y)
    }

    /// Temporal conv stack over `[N,C,T]`; returns `[N,C',T']`.
    pub fn temporal_stack(&mut self, x: Var, prefix: &str, cfg: &TemporalConfig) -> Result<Var> {
        let mut h = x;
        for i in 0..cfg.pre_pool.len() {
            h = self.conv_bn_relu(h, &format!("{prefix}.conv{i}"), ConvSpec::d1(1, 1))?;
        }
        if !(cfg.pre_pool.is_empty() && cfg.post_pool.is_empty()) {
            h = self.tape.max_pool(h, PoolSpec::d1(2, 2))?;
        }
        for i in 0..cfg.post_pool.len() {
            let k = cfg.pre_pool.len() + i;
            h = self.conv_bn_relu(h, &format!("{prefix}.conv{k}"), ConvSpec::d1(1, 1))?;
        }
        Ok(h)
    }

    /// Attention pooling with `{prefix}.w1` `[A,D]` and `{prefix}.w2` `[1,A]` over `[N,T,D]`.
    pub fn attention(&mut self, s: Var, prefix: &str, mode: AttentionMode) -> Result<Var> {
        let w1 = self.param(&format!("{prefix}.w1"))?;
        let w2 = self.param(&format!("{prefix}.w2"))?;
        attention_pool(&mut self.tape, s, w1, w2, mode)
    }
}

/// Batched attention pooling. `s: [N,T,D]`, `w1: [A,D]`, `w2: [1,A]`; returns `[N,D]`.
///
/// Scores `r = W2 tanh(W1 Sᵀ)` per sample; weights are `-log softmax(r)` in
/// verbatim mode or `softmax(r)`; output `Σ_t a_t S_t`.
pub fn attention_pool<T: Scalar>(tape: &mut Tape<T>, s: Var, w1: Var, w2: Var, mode: AttentionMode) -> Result<Var> {
    let ss = tape.shape(s).to_vec();
    if ss.len() != 3 {
        return Err(dim_err("attention_pool", format!("expected [N,T,D], got {ss:?}")));
    }
    let (n, t, d) = (ss[0], ss[1], ss[2]);
    let weights = attention_weights(tape, s, w1, w2, mode)?;
    let a = tape.reshape(weights, &[n, 1, t])?;
    let pooled = tape.bmm(a, s)?;
    tape.reshape(pooled, &[n, d])
}

/// Pooling weights `[N,T]` for `s: [N,T,D]`.
pub(crate) fn attention_weights<T: Scalar>(tape: &mut Tape<T>, s: Var, w1: Var, w2: Var, mode: AttentionMode) -> Result<Var> {
    let ss = tape.shape(s).to_vec();
    let (n, t, d) = (ss[0], ss[1], ss[2]);
    let flat = tape.reshape(s, &[n * t, d])?;
    let w1t = tape.transpose(w1)?;
    let hidden = tape.matmul(flat, w1t)?;
    let hidden = tape.tanh(hidden)?;
    let w2t = tape.transpose(w2)?;
    let r = tape.matmul(hidden, w2t)?;
    let r = tape.reshape(r, &[n, t])?;
    match mode {
        AttentionMode::Softmax => tape.softmax(r, 1),
        AttentionMode::Verbatim => {
            let lp = tape.log_softmax(r, 1)?;
            tape.neg(lp)
        }
    }
}

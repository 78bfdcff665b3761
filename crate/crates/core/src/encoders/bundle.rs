use serde::{Deserialize, Serialize};

use super::layers::Forward;
use super::params::{BnSet, ParamSet};
use super::{EncoderConfig, Pooling, TemporalConfig};
use crate::error::{config_err, dim_err, Result};
use crate::tensor::{ConvSpec, PoolSpec, Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Behavior,
    Neural,
}

impl Modality {
    fn tag(self) -> &'static str {
        match self {
            Modality::Behavior => "b",
            Modality::Neural => "n",
        }
    }
}

/// Optional heads attached to the shared encoders.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Heads {
    /// Per-modality domain discriminators over this many domains.
    pub discriminator_domains: Option<usize>,
    /// Linear head predicting the flattened behavior window from `h_n`.
    pub regression: bool,
    /// Linear action classifier on `h_n`.
    pub classifier_classes: Option<usize>,
    pub neural_pooling: Pooling,
}

/// Parameters and batch-norm state of every network in one experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle<T> {
    pub config: EncoderConfig,
    pub heads: Heads,
    pub seed: u64,
    pub params: ParamSet<T>,
    pub bn: BnSet<T>,
}

struct Builder<'a, T: Scalar> {
    params: &'a mut ParamSet<T>,
    bn: &'a mut BnSet<T>,
    seed: u64,
}

impl<T: Scalar> Builder<'_, T> {
    fn bn(&mut self, prefix: &str, c: usize) {
        self.params.insert(format!("{prefix}.gamma"), Tensor::full([c], T::one()));
        self.params.insert(format!("{prefix}.beta"), Tensor::zeros([c]));
        self.bn.insert(prefix, c);
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, out: usize) {
        self.params.insert_uniform(format!("{prefix}.w"), vec![fan_in, out], fan_in, self.seed);
        self.params.insert_uniform(format!("{prefix}.b"), vec![out], fan_in, self.seed);
    }

    fn linear_bn(&mut self, prefix: &str, fan_in: usize, out: usize) {
        self.params.insert_uniform(format!("{prefix}.w"), vec![fan_in, out], fan_in, self.seed);
        self.bn(&format!("{prefix}.bn"), out);
    }

    fn conv_bn(&mut self, prefix: &str, kernel: &[usize]) {
        let fan_in = kernel[1..].iter().product();
        self.params.insert_uniform(format!("{prefix}.w"), kernel.to_vec(), fan_in, self.seed);
        self.bn(&format!("{prefix}.bn"), kernel[0]);
    }

    fn temporal(&mut self, prefix: &str, input: usize, cfg: &TemporalConfig) -> usize {
        let mut c = input;
        for (i, &w) in cfg.pre_pool.iter().chain(&cfg.post_pool).enumerate() {
            self.conv_bn(&format!("{prefix}.conv{i}"), &[w, c, 3]);
            c = w;
        }
        c
    }

    fn attention(&mut self, prefix: &str, d: usize, hidden: usize) {
        self.params.insert_uniform(format!("{prefix}.w1"), vec![hidden, d], d, self.seed);
        self.params.insert_uniform(format!("{prefix}.w2"), vec![1, hidden], hidden, self.seed);
    }
}

impl<T: Scalar> ModelBundle<T> {
    pub fn new(config: EncoderConfig, heads: Heads, seed: u64) -> Result<Self> {
        config.validate()?;
        if let Some(k) = heads.discriminator_domains {
            if k < 2 {
                return Err(config_err("domain discriminators need at least 2 domains"));
            }
        }
        if heads.classifier_classes == Some(0) {
            return Err(config_err("classifier needs at least one class"));
        }
        let mut params = ParamSet::new();
        let mut bn = BnSet::new();
        let mut b = Builder { params: &mut params, bn: &mut bn, seed };
        let c = &config;

        // neural: per-frame tower
        let mut ch = 1;
        for (i, &w) in c.frame_convs.iter().enumerate() {
            b.conv_bn(&format!("f_n.frame.conv{i}"), &[w, ch, 3, 3]);
            ch = w;
        }
        let (th, tw) = c.tower_extent();
        let mut width = ch * th * tw;
        for (i, &w) in c.frame_fc.iter().enumerate() {
            b.linear_bn(&format!("f_n.frame.fc{i}"), width, w);
            width = w;
        }
        let d = b.temporal("f_n.time", width, &c.neural_temporal);
        if heads.neural_pooling == Pooling::Attention {
            b.attention("f_n.att", d, c.attention_hidden);
        }
        b.linear("f_n.out", d, c.embedding_dim);

        // behavior
        let d = b.temporal("f_b.time", c.behavior_input_dim(), &c.behavior_temporal);
        b.attention("f_b.att", d, c.attention_hidden);
        b.linear("f_b.out", d, c.embedding_dim);

        for m in ["g_b", "g_n"] {
            b.linear(&format!("{m}.l0"), c.embedding_dim, c.projection_dim);
            b.linear(&format!("{m}.l1"), c.projection_dim, c.projection_dim);
        }
        if let Some(k) = heads.discriminator_domains {
            for m in ["d_b", "d_n"] {
                b.linear(&format!("{m}.l0"), c.embedding_dim, c.discriminator_hidden);
                b.linear(&format!("{m}.l1"), c.discriminator_hidden, k);
            }
        }
        if heads.regression {
            b.linear("reg", c.embedding_dim, c.behavior_frames * c.behavior_input_dim());
        }
        if let Some(k) = heads.classifier_classes {
            b.linear("cls", c.embedding_dim, k);
        }
        Ok(Self { config, heads, seed, params, bn })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.total_scalars()
    }

    /// Parameter ids whose names start with one of `prefixes`.
    pub fn ids_with_prefix(&self, prefixes: &[&str]) -> Vec<usize> {
        self.params
            .names()
            .iter()
            .enumerate()
            .filter(|(_, n)| prefixes.iter().any(|p| n.starts_with(p)))
            .map(|(i, _)| i)
            .collect()
    }

    /// `[N, T_n, H, W]` image windows → `[N, h]`.
    pub fn encode_neural(&self, fw: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let c = &self.config;
        let sx = fw.tape.shape(x).to_vec();
        if sx.len() != 4 || sx[1] != c.neural_frames || sx[2] != c.height || sx[3] != c.width {
            return Err(dim_err(
                "encode_neural",
                format!("expected [N,{},{},{}], got {sx:?}", c.neural_frames, c.height, c.width),
            ));
        }
        let (n, t) = (sx[0], sx[1]);
        let mut h = fw.tape.reshape(x, &[n * t, 1, c.height, c.width])?;
        for i in 0..c.frame_convs.len() {
            h = fw.conv_bn_relu(h, &format!("f_n.frame.conv{i}"), ConvSpec::d2(1, 1))?;
            h = fw.tape.max_pool(h, PoolSpec::d2(2, 2))?;
        }
        let per_frame = fw.tape.value(h).len() / (n * t);
        h = fw.tape.reshape(h, &[n * t, per_frame])?;
        for i in 0..c.frame_fc.len() {
            h = fw.linear_bn_relu(h, &format!("f_n.frame.fc{i}"))?;
        }
        let f = fw.tape.shape(h)[1];
        h = fw.tape.reshape(h, &[n, t, f])?;
        h = fw.tape.permute(h, &[0, 2, 1])?;
        h = fw.temporal_stack(h, "f_n.time", &c.neural_temporal)?;
        let pooled = match self.heads.neural_pooling {
            Pooling::Attention => {
                let s = fw.tape.permute(h, &[0, 2, 1])?;
                fw.attention(s, "f_n.att", c.attention_mode)?
            }
            Pooling::Mean => fw.tape.mean_axis(h, 2)?,
        };
        fw.linear(pooled, "f_n.out")
    }

    /// `[N, T_b, J, 3]` pose windows → `[N, h]`.
    pub fn encode_behavior(&self, fw: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let c = &self.config;
        let sx = fw.tape.shape(x).to_vec();
        if sx.len() != 4 || sx[1] != c.behavior_frames || sx[2] != c.joints || sx[3] != 3 {
            return Err(dim_err(
                "encode_behavior",
                format!("expected [N,{},{},3], got {sx:?}", c.behavior_frames, c.joints),
            ));
        }
        let (n, t) = (sx[0], sx[1]);
        let mut h = fw.tape.reshape(x, &[n, t, c.behavior_input_dim()])?;
        h = fw.tape.permute(h, &[0, 2, 1])?;
        h = fw.temporal_stack(h, "f_b.time", &c.behavior_temporal)?;
        let s = fw.tape.permute(h, &[0, 2, 1])?;
        let pooled = fw.attention(s, "f_b.att", c.attention_mode)?;
        fw.linear(pooled, "f_b.out")
    }

    pub fn encode(&self, fw: &mut Forward<'_, T>, x: Var, m: Modality) -> Result<Var> {
        match m {
            Modality::Behavior => self.encode_behavior(fw, x),
            Modality::Neural => self.encode_neural(fw, x),
        }
    }

    /// Projection head `g_m`: linear → ReLU → linear. Output is not normalized.
    pub fn project(&self, fw: &mut Forward<'_, T>, h: Var, m: Modality) -> Result<Var> {
        let p = format!("g_{}", m.tag());
        let z = fw.linear(h, &format!("{p}.l0"))?;
        let z = fw.tape.relu(z)?;
        fw.linear(z, &format!("{p}.l1"))
    }

    /// Domain logits from discriminator `D_m`.
    pub fn discriminate(&self, fw: &mut Forward<'_, T>, h: Var, m: Modality) -> Result<Var> {
        if self.heads.discriminator_domains.is_none() {
            return Err(config_err("model was built without discriminators"));
        }
        let p = format!("d_{}", m.tag());
        let z = fw.linear(h, &format!("{p}.l0"))?;
        let z = fw.tape.relu(z)?;
        fw.linear(z, &format!("{p}.l1"))
    }

    /// Flattened behavior-window prediction `[N, T_b·J·3]`.
    pub fn regress(&self, fw: &mut Forward<'_, T>, h: Var) -> Result<Var> {
        if !self.heads.regression {
            return Err(config_err("model was built without a regression head"));
        }
        fw.linear(h, "reg")
    }

    pub fn classify(&self, fw: &mut Forward<'_, T>, h: Var) -> Result<Var> {
        if self.heads.classifier_classes.is_none() {
            return Err(config_err("model was built without a classifier head"));
        }
        fw.linear(h, "cls")
    }

    /// Eval-mode embeddings `h` for a batch of windows of modality `m`.
    pub fn embed(&self, x: &Tensor<T>, m: Modality) -> Result<Tensor<T>> {
        let mut fw = Forward::eval(&self.params, &self.bn);
        let xv = fw.input(x.clone());
        let h = self.encode(&mut fw, xv, m)?;
        Ok(fw.tape.value(h).clone())
    }

    /// Eval-mode projections `z` (for diagnostics; downstream probes use `h`).
    pub fn embed_projected(&self, x: &Tensor<T>, m: Modality) -> Result<Tensor<T>> {
        let mut fw = Forward::eval(&self.params, &self.bn);
        let xv = fw.input(x.clone());
        let h = self.encode(&mut fw, xv, m)?;
        let z = self.project(&mut fw, h, m)?;
        Ok(fw.tape.value(z).clone())
    }
}

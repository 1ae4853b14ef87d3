//! Full descriptor model: LFSA, tokenizer (or mean pooling), refinement stack,
//! head and the ArcFace classifier used during training.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::aggregation::{
    learned_attention, lfsa_graph, tokenize_graph, AttentionMaps, FeatureMap, LfsaParams, LfsaVars, TokenizerMode,
    TokenizerParams,
};
use crate::error::{Error, Result};
use crate::refinement::{
    average_heads, head_graph, refine_stack_graph, AttentionScale, BlockVars, ForwardMode, HeadParams,
    RefinementBlockParams,
};
use crate::tensor::{l2_normalize, random_tensor, Graph, Tensor, Var};

/// How local features are reduced before the head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Aggregator {
    #[default]
    Tokenizer,
    /// Plain spatial average (one pseudo-token); refinement is unavailable.
    MeanPool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub channels: usize,
    pub tokens: usize,
    pub dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub dropout: f64,
    pub scales: Vec<f64>,
    pub tokenizer: TokenizerMode,
    pub aggregator: Aggregator,
    pub lfsa: bool,
    pub head_bias: bool,
    pub attention_scale: AttentionScale,
    pub num_classes: usize,
    pub margin: f64,
    pub arcface_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 2048,
            tokens: 4,
            dim: 1024,
            blocks: 2,
            heads: 8,
            dropout: 0.1,
            scales: vec![std::f64::consts::FRAC_1_SQRT_2, 1.0, std::f64::consts::SQRT_2],
            tokenizer: TokenizerMode::AttenBased,
            aggregator: Aggregator::Tokenizer,
            lfsa: true,
            head_bias: true,
            attention_scale: AttentionScale::Full,
            num_classes: 81_313,
            margin: 0.2,
            arcface_scale: 32.0,
        }
    }
}

impl ModelConfig {
    /// Small configuration for the synthetic corpus.
    pub fn desk(channels: usize, num_classes: usize) -> Self {
        Self {
            channels,
            dim: 32,
            heads: 2,
            num_classes,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.channels == 0 || self.dim == 0 || self.num_classes == 0 {
            return fail("channels, dim and num_classes must be positive".into());
        }
        if self.aggregator == Aggregator::Tokenizer && self.tokens == 0 {
            return fail("tokenizer needs at least one token".into());
        }
        if self.aggregator == Aggregator::MeanPool && self.blocks > 0 {
            return fail("mean pooling cannot be followed by refinement blocks".into());
        }
        if self.blocks > 0 && (self.heads == 0 || !self.channels.is_multiple_of(self.heads)) {
            return fail(format!(
                "head count {} does not divide channel count {}",
                self.heads, self.channels
            ));
        }
        if self.blocks > 0 && self.channels < 2 {
            return fail("layer normalization needs at least two channels".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.scales.is_empty() || self.scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return fail("scales must be a nonempty list of positive values".into());
        }
        if !(self.arcface_scale.is_finite() && self.arcface_scale > 0.0) || !self.margin.is_finite() {
            return fail("arcface scale must be positive and margin finite".into());
        }
        Ok(())
    }

    /// Rows entering the head: `L` tokens, or one pooled row.
    pub fn head_rows(&self) -> usize {
        match self.aggregator {
            Aggregator::Tokenizer => self.tokens,
            Aggregator::MeanPool => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub lfsa: Option<LfsaParams>,
    pub tokenizer: Option<TokenizerParams>,
    pub blocks: Vec<RefinementBlockParams>,
    pub head: HeadParams,
    /// `num_classes×d` classifier rows, normalized at each use.
    pub classifier: Tensor,
}

impl ModelParams {
    pub fn init(config: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let lfsa = config.lfsa.then(|| LfsaParams::init(c, rng));
        let tokenizer = (config.aggregator == Aggregator::Tokenizer)
            .then(|| TokenizerParams::init(config.tokens, c, config.tokenizer, rng));
        let blocks = (0..config.blocks)
            .map(|_| RefinementBlockParams::init(c, config.heads, config.attention_scale, rng))
            .collect::<Result<Vec<_>>>()?;
        let head = HeadParams::init(config.head_rows() * c, config.dim, config.head_bias, rng);
        let classifier = random_tensor(&[config.num_classes, config.dim], 1.0 / (config.dim as f64).sqrt(), rng);
        Ok(Self {
            config: config.clone(),
            lfsa,
            tokenizer,
            blocks,
            head,
            classifier,
        })
    }

    /// Every trainable tensor with a stable name, in checkpoint order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        if let Some(l) = &self.lfsa {
            for (n, t) in [
                ("query", &l.query),
                ("key", &l.key),
                ("value", &l.value),
                ("output", &l.output),
            ] {
                out.push((format!("lfsa.{n}"), t));
            }
        }
        if let Some(t) = &self.tokenizer {
            match t.mode {
                TokenizerMode::AttenBased => out.push(("tokenizer.weights".into(), &t.weights)),
                TokenizerMode::Learned => out.push(("tokenizer.learned_tokens".into(), &t.learned_tokens)),
            }
        }
        for (i, b) in self.blocks.iter().enumerate() {
            for (n, t) in b.tensors() {
                out.push((format!("block{i}.{n}"), t));
            }
        }
        out.push(("head.weight".into(), &self.head.weight));
        if let Some(b) = &self.head.bias {
            out.push(("head.bias".into(), b));
        }
        out.push(("classifier".into(), &self.classifier));
        out
    }

    /// Mutable view in the same order as [`ModelParams::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        if let Some(l) = &mut self.lfsa {
            out.extend([&mut l.query, &mut l.key, &mut l.value, &mut l.output]);
        }
        if let Some(t) = &mut self.tokenizer {
            match t.mode {
                TokenizerMode::AttenBased => out.push(&mut t.weights),
                TokenizerMode::Learned => out.push(&mut t.learned_tokens),
            }
        }
        for b in &mut self.blocks {
            out.extend(b.tensors_mut());
        }
        out.push(&mut self.head.weight);
        if let Some(b) = &mut self.head.bias {
            out.push(b);
        }
        out.push(&mut self.classifier);
        out
    }

    pub fn tensor_count(&self) -> usize {
        self.named_tensors().len()
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Registers every tensor on `g`, trainable or constant.
    pub fn register(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.named_tensors()
            .into_iter()
            .map(|(_, t)| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect()
    }

    fn check_input(&self, f: &FeatureMap) -> Result<()> {
        if f.channels() != self.config.channels {
            return Err(Error::dim("model input", &[f.channels()], &[self.config.channels]));
        }
        Ok(())
    }

    /// Records the descriptor pipeline for one feature map. `vars` must come
    /// from [`ModelParams::register`].
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        vars: &[Var],
        f: &FeatureMap,
        mode: &mut ForwardMode<'_>,
    ) -> Result<Forward> {
        self.check_input(f)?;
        let mut cursor = vars.iter().copied();
        let mut next = || cursor.next().expect("variable list matches parameter list");
        let mut x = g.constant(f.to_positions());
        if self.lfsa.is_some() {
            let lv = LfsaVars {
                query: next(),
                key: next(),
                value: next(),
                output: next(),
            };
            x = lfsa_graph(g, x, &lv)?;
        }
        let mut assignments = None;
        let tokens = match &self.tokenizer {
            Some(t) if t.mode == TokenizerMode::AttenBased => {
                let w = next();
                let (assign, tokens) = tokenize_graph(g, x, w)?;
                assignments = Some(assign);
                tokens
            }
            Some(_) => next(),
            None => g.mean_rows(x),
        };
        let mut refined_maps = Vec::new();
        let tokens = if self.blocks.is_empty() {
            tokens
        } else {
            let block_vars: Vec<BlockVars> = self
                .blocks
                .iter()
                .map(|b| {
                    let a: Vec<Var> = (0..12).map(|_| next()).collect();
                    BlockVars {
                        self_query: a[0],
                        self_key: a[1],
                        self_value: a[2],
                        self_fuse: a[3],
                        self_norm_gain: a[4],
                        self_norm_bias: a[5],
                        cross_query: a[6],
                        cross_key: a[7],
                        cross_value: a[8],
                        cross_fuse: a[9],
                        cross_norm_gain: a[10],
                        cross_norm_bias: a[11],
                        heads: b.heads,
                        scale: b.scale,
                    }
                })
                .collect();
            let (t, maps) = refine_stack_graph(g, tokens, x, &block_vars, mode)?;
            refined_maps = maps;
            t
        };
        let weight = next();
        let bias = self.head.bias.as_ref().map(|_| next());
        let descriptor = head_graph(g, tokens, weight, bias)?;
        let classifier = next();
        Ok(Forward {
            features: x,
            assignments,
            tokens,
            refined_maps,
            descriptor,
            classifier,
        })
    }

    /// Records the ArcFace loss for one labeled feature map.
    pub fn loss_graph(
        &self,
        g: &mut Graph,
        vars: &[Var],
        f: &FeatureMap,
        label: usize,
        mode: &mut ForwardMode<'_>,
    ) -> Result<Var> {
        let fw = self.forward_graph(g, vars, f, mode)?;
        crate::training::arcface_graph(
            g,
            fw.descriptor,
            fw.classifier,
            label,
            self.config.margin,
            self.config.arcface_scale,
        )
    }

    /// Loss value without gradients.
    pub fn loss(&self, f: &FeatureMap, label: usize, mode: &mut ForwardMode<'_>) -> Result<f64> {
        let mut g = Graph::new();
        let vars = self.register(&mut g, false);
        let out = self.loss_graph(&mut g, &vars, f, label, mode)?;
        Ok(g.value(out).data()[0])
    }

    /// Loss and one gradient per tensor of [`ModelParams::named_tensors`].
    pub fn loss_and_grads(
        &self,
        f: &FeatureMap,
        label: usize,
        mode: &mut ForwardMode<'_>,
    ) -> Result<(f64, Vec<Tensor>)> {
        let mut g = Graph::new();
        let vars = self.register(&mut g, true);
        let out = self.loss_graph(&mut g, &vars, f, label, mode)?;
        let loss = g.value(out).data()[0];
        let mut grads = g.backward(out)?;
        let named = self.named_tensors();
        let tensors = vars
            .iter()
            .zip(&named)
            .map(|(v, (_, t))| grads.take(*v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        Ok((loss, tensors))
    }

    /// Unnormalized descriptor for one scale, evaluation mode.
    pub fn descriptor(&self, f: &FeatureMap) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let vars = self.register(&mut g, false);
        let fw = self.forward_graph(&mut g, &vars, f, &mut ForwardMode::Eval)?;
        Ok(g.value(fw.descriptor).data().to_vec())
    }

    /// Tokenizer maps and, when refinement is present, the head-averaged
    /// cross-attention maps of the last block. Evaluation mode.
    pub fn attention(&self, f: &FeatureMap) -> Result<(AttentionMaps, Option<AttentionMaps>)> {
        let mut g = Graph::new();
        let vars = self.register(&mut g, false);
        let fw = self.forward_graph(&mut g, &vars, f, &mut ForwardMode::Eval)?;
        let (h, w) = (f.height(), f.width());
        let tokenizer = match (&fw.assignments, &self.tokenizer) {
            (Some(a), _) => AttentionMaps::from_assignments(g.value(*a), h, w)?,
            (None, Some(t)) => learned_attention(g.value(fw.features), &t.learned_tokens, h, w)?,
            (None, None) => AttentionMaps {
                height: h,
                width: w,
                values: Tensor::filled(&[1, h * w], 1.0),
            },
        };
        let refined = if fw.refined_maps.is_empty() {
            None
        } else {
            Some(average_heads(&g, &fw.refined_maps, h, w)?)
        };
        Ok((tokenizer, refined))
    }
}

/// Handles to the intermediate nodes of one recorded forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    /// `HW×C` features after LFSA.
    pub features: Var,
    /// `HW×L` tokenizer assignment, attention-based mode only.
    pub assignments: Option<Var>,
    /// Final `L×C` tokens.
    pub tokens: Var,
    /// Per-head `L×HW` cross-attention of the last block.
    pub refined_maps: Vec<Var>,
    /// `1×d`, not normalized.
    pub descriptor: Var,
    pub classifier: Var,
}

/// Per-scale descriptors are L2-normalized, averaged and normalized again.
pub fn multiscale_descriptor(maps: &[FeatureMap], model: &ModelParams) -> Result<Vec<f64>> {
    if maps.is_empty() {
        return Err(Error::Config("multi-scale descriptor needs at least one scale".into()));
    }
    let mut acc = vec![0.0; model.config.dim];
    for f in maps {
        let d = model.descriptor(f)?;
        if d.iter().all(|v| *v == 0.0) {
            return Err(Error::Degenerate("descriptor is zero".into()));
        }
        for (a, v) in acc.iter_mut().zip(l2_normalize(&d)) {
            *a += v;
        }
    }
    let n = maps.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    if maps.len() == 1 {
        return Ok(acc);
    }
    Ok(l2_normalize(&acc))
}

//! Local-feature contextualization and visual-token extraction.
//!
//! Feature maps are carried as `[C][H][W]`; inside the model they are
//! flattened to an `HW×C` matrix whose rows are the local features in
//! row-major spatial order.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{dot, log_sum_exp, random_tensor, Graph, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Input(format!(
                "feature map extents must be positive, got {channels}x{height}x{width}"
            )));
        }
        if values.len() != channels * height * width {
            return Err(Error::dim("feature_map", &[channels, height, width], &[values.len()]));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Input(format!("non-finite feature value at index {i}")));
        }
        Ok(Self {
            channels,
            height,
            width,
            values,
        })
    }

    /// Builds a map from an `HW×C` position matrix.
    pub fn from_positions(positions: &Tensor, height: usize, width: usize) -> Result<Self> {
        let c = positions.cols();
        if positions.rows() != height * width {
            return Err(Error::dim("from_positions", positions.shape(), &[height * width, c]));
        }
        let hw = height * width;
        let mut values = vec![0.0; c * hw];
        for p in 0..hw {
            for (ch, v) in positions.row_slice(p).iter().enumerate() {
                values[ch * hw + p] = *v;
            }
        }
        Self::new(c, height, width, values)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn positions_count(&self) -> usize {
        self.height * self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn at(&self, c: usize, h: usize, w: usize) -> f64 {
        self.values[(c * self.height + h) * self.width + w]
    }

    /// `HW×C` matrix of local features.
    pub fn to_positions(&self) -> Tensor {
        let hw = self.positions_count();
        let c = self.channels;
        let mut data = vec![0.0; hw * c];
        for ch in 0..c {
            for p in 0..hw {
                data[p * c + ch] = self.values[ch * hw + p];
            }
        }
        Tensor::matrix(hw, c, data).expect("consistent extents")
    }

    /// Feature vector at one spatial position.
    pub fn local_feature(&self, h: usize, w: usize) -> Vec<f64> {
        (0..self.channels).map(|c| self.at(c, h, w)).collect()
    }

    /// Per-channel `(min, max)` over all positions.
    pub fn channel_envelope(&self) -> Vec<(f64, f64)> {
        let hw = self.positions_count();
        self.values
            .chunks(hw)
            .map(|ch| {
                ch.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                    (lo.min(*v), hi.max(*v))
                })
            })
            .collect()
    }

    /// Reorders spatial positions: output position `i` takes input position `perm[i]`.
    pub fn permute_positions(&self, perm: &[usize]) -> Result<Self> {
        let hw = self.positions_count();
        if perm.len() != hw {
            return Err(Error::dim("permute_positions", &[hw], &[perm.len()]));
        }
        let mut values = vec![0.0; self.values.len()];
        for c in 0..self.channels {
            for (i, &src) in perm.iter().enumerate() {
                values[c * hw + i] = self.values[c * hw + src];
            }
        }
        Self::new(self.channels, self.height, self.width, values)
    }

    /// Bilinear resampling to `round(H·factor) × round(W·factor)` (at least 1×1).
    pub fn resample(&self, factor: f64) -> Result<Self> {
        if !(factor.is_finite() && factor > 0.0) {
            return Err(Error::Config(format!("invalid scale factor {factor}")));
        }
        let nh = ((self.height as f64 * factor).round() as usize).max(1);
        let nw = ((self.width as f64 * factor).round() as usize).max(1);
        let src = |out: usize, n_out: usize, n_in: usize| -> (usize, usize, f64) {
            // Align pixel centers.
            let pos = ((out as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(n_in - 1);
            (lo, hi, pos - lo as f64)
        };
        let mut values = Vec::with_capacity(self.channels * nh * nw);
        for c in 0..self.channels {
            for y in 0..nh {
                let (y0, y1, fy) = src(y, nh, self.height);
                for x in 0..nw {
                    let (x0, x1, fx) = src(x, nw, self.width);
                    let top = self.at(c, y0, x0) * (1.0 - fx) + self.at(c, y0, x1) * fx;
                    let bottom = self.at(c, y1, x0) * (1.0 - fx) + self.at(c, y1, x1) * fx;
                    values.push(top * (1.0 - fy) + bottom * fy);
                }
            }
        }
        Self::new(self.channels, nh, nw, values)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TokenizerMode {
    #[default]
    AttenBased,
    Learned,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenizerParams {
    /// `L×C`; row `i` is the 1×1 convolution producing attention logits for token `i`.
    pub weights: Tensor,
    pub mode: TokenizerMode,
    /// `L×C`; only read in [`TokenizerMode::Learned`].
    pub learned_tokens: Tensor,
}

impl TokenizerParams {
    pub fn init(tokens: usize, channels: usize, mode: TokenizerMode, rng: &mut impl Rng) -> Self {
        let std = 1.0 / (channels as f64).sqrt();
        Self {
            weights: random_tensor(&[tokens, channels], std, rng),
            mode,
            learned_tokens: random_tensor(&[tokens, channels], 1.0, rng),
        }
    }

    pub fn tokens(&self) -> usize {
        self.weights.rows()
    }

    fn validate(&self, channels: usize) -> Result<()> {
        let shape = self.weights.shape();
        if shape.len() != 2 || shape[0] == 0 || shape[1] != channels {
            return Err(Error::dim("tokenizer", shape, &[shape[0], channels]));
        }
        if self.mode == TokenizerMode::Learned && self.learned_tokens.shape() != shape {
            return Err(Error::dim("tokenizer", self.learned_tokens.shape(), shape));
        }
        Ok(())
    }
}

/// `L` spatial attention maps, stored as an `L×HW` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMaps {
    pub height: usize,
    pub width: usize,
    pub values: Tensor,
}

impl AttentionMaps {
    /// From an `HW×L` assignment matrix (one row per location).
    pub fn from_assignments(assign: &Tensor, height: usize, width: usize) -> Result<Self> {
        Ok(Self {
            height,
            width,
            values: assign.transpose()?,
        })
    }

    pub fn tokens(&self) -> usize {
        self.values.rows()
    }

    pub fn map(&self, token: usize) -> &[f64] {
        self.values.row_slice(token)
    }

    /// `γ(a⁽ⁱ⁾)`: total mass of each map.
    pub fn masses(&self) -> Vec<f64> {
        (0..self.tokens()).map(|i| self.map(i).iter().sum()).collect()
    }

    /// Maximum deviation from one of `Σ_i a⁽ⁱ⁾` over all locations.
    pub fn partition_error(&self) -> f64 {
        let hw = self.height * self.width;
        (0..hw)
            .map(|p| {
                let s: f64 = (0..self.tokens()).map(|i| self.values.get(i, p)).sum();
                (s - 1.0).abs()
            })
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenSet(pub Tensor);

impl TokenSet {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn token(&self, i: usize) -> &[f64] {
        self.0.row_slice(i)
    }

    pub fn len(&self) -> usize {
        self.0.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LfsaParams {
    pub query: Tensor,
    pub key: Tensor,
    pub value: Tensor,
    /// Zero at initialization, which makes the block an identity.
    pub output: Tensor,
}

impl LfsaParams {
    pub fn init(channels: usize, rng: &mut impl Rng) -> Self {
        let std = 1.0 / (channels as f64).sqrt();
        Self {
            query: random_tensor(&[channels, channels], std, rng),
            key: random_tensor(&[channels, channels], std, rng),
            value: random_tensor(&[channels, channels], std, rng),
            output: Tensor::zeros(&[channels, channels]),
        }
    }

    pub fn register(&self, g: &mut Graph) -> LfsaVars {
        LfsaVars {
            query: g.param(self.query.clone()),
            key: g.param(self.key.clone()),
            value: g.param(self.value.clone()),
            output: g.param(self.output.clone()),
        }
    }

    fn register_const(&self, g: &mut Graph) -> LfsaVars {
        LfsaVars {
            query: g.constant(self.query.clone()),
            key: g.constant(self.key.clone()),
            value: g.constant(self.value.clone()),
            output: g.constant(self.output.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LfsaVars {
    pub query: Var,
    pub key: Var,
    pub value: Var,
    pub output: Var,
}

/// Records `X + softmax(XWq (XWk)ᵀ / √C) · XWv · Wo` on `g`, where `x` is `HW×C`.
pub fn lfsa_graph(g: &mut Graph, x: Var, p: &LfsaVars) -> Result<Var> {
    let c = g.value(x).cols();
    let q = g.matmul(x, p.query)?;
    let k = g.matmul(x, p.key)?;
    let v = g.matmul(x, p.value)?;
    let logits = g.matmul_nt(q, k)?;
    let logits = g.scale(logits, 1.0 / (c as f64).sqrt());
    let attn = g.softmax_rows(logits);
    let ctx = g.matmul(attn, v)?;
    let branch = g.matmul(ctx, p.output)?;
    g.add(x, branch)
}

/// Records the spatial-attention tokenizer on `g`.
///
/// Returns the `HW×L` soft assignment (rows are per-location softmaxes over
/// tokens) and the `L×C` tokens, each the assignment-weighted mean of the
/// local features.
pub fn tokenize_graph(g: &mut Graph, x: Var, weights: Var) -> Result<(Var, Var)> {
    let logits = g.matmul_nt(x, weights)?;
    let assign = g.softmax_rows(logits);
    let normalized = g.normalize_cols(assign)?;
    let nt = g.transpose(normalized)?;
    let tokens = g.matmul(nt, x)?;
    Ok((assign, tokens))
}

fn check_lfsa(f: &FeatureMap, p: &LfsaParams) -> Result<()> {
    let c = f.channels();
    for t in [&p.query, &p.key, &p.value, &p.output] {
        if t.shape() != [c, c] {
            return Err(Error::dim("lfsa", t.shape(), &[c, c]));
        }
    }
    Ok(())
}

/// Contextualizes local features with one residual non-local attention pass.
pub fn lfsa_forward(f: &FeatureMap, p: &LfsaParams) -> Result<FeatureMap> {
    check_lfsa(f, p)?;
    let mut g = Graph::new();
    let x = g.constant(f.to_positions());
    let vars = p.register_const(&mut g);
    let out = lfsa_graph(&mut g, x, &vars)?;
    FeatureMap::from_positions(g.value(out), f.height(), f.width())
}

/// Attention-based tokenizer: soft-assigns every location to the `L` tokens
/// and aggregates the features of each group.
pub fn tokenize(f: &FeatureMap, p: &TokenizerParams) -> Result<(AttentionMaps, TokenSet)> {
    if p.mode != TokenizerMode::AttenBased {
        return Err(Error::Config("tokenize requires the atten_based tokenizer mode".into()));
    }
    p.validate(f.channels())?;
    let mut g = Graph::new();
    let x = g.constant(f.to_positions());
    let w = g.constant(p.weights.clone());
    let (assign, tokens) = tokenize_graph(&mut g, x, w)?;
    Ok((
        AttentionMaps::from_assignments(g.value(assign), f.height(), f.width())?,
        TokenSet(g.value(tokens).clone()),
    ))
}

/// Diagnostic maps for learned tokens: per-location softmax over `tᵢ · F_hw`.
pub(crate) fn learned_attention(positions: &Tensor, tokens: &Tensor, h: usize, w: usize) -> Result<AttentionMaps> {
    let logits = crate::tensor::matmul_nt(positions, tokens)?;
    AttentionMaps::from_assignments(&crate::tensor::softmax_rows(&logits), h, w)
}

/// Learned tokenizer: the tokens are parameters and do not depend on the input.
pub fn tokenize_learned(f: &FeatureMap, p: &TokenizerParams) -> Result<(AttentionMaps, TokenSet)> {
    if p.mode != TokenizerMode::Learned {
        return Err(Error::Config(
            "tokenize_learned requires the learned tokenizer mode".into(),
        ));
    }
    p.validate(f.channels())?;
    let maps = learned_attention(&f.to_positions(), &p.learned_tokens, f.height(), f.width())?;
    Ok((maps, TokenSet(p.learned_tokens.clone())))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmTokenization {
    pub attention: AttentionMaps,
    pub tokens: TokenSet,
    /// Mixture priors `φ(‖wᵢ‖²)`.
    pub priors: Vec<f64>,
}

/// Recomputes tokenization as one EM step of a unit-variance Gaussian mixture
/// whose means are the tokenizer rows and whose priors are a softmax of
/// `½‖wᵢ‖²`. Written with explicit loops in the log domain, independently of
/// [`tokenize`], so the two can be compared.
pub fn tokenize_gmm_oracle(f: &FeatureMap, p: &TokenizerParams) -> Result<GmmTokenization> {
    if p.mode != TokenizerMode::AttenBased {
        return Err(Error::Config(
            "the GMM oracle applies to the atten_based tokenizer".into(),
        ));
    }
    p.validate(f.channels())?;
    let l = p.tokens();
    let (h, w) = (f.height(), f.width());
    let means: Vec<&[f64]> = (0..l).map(|i| p.weights.row_slice(i)).collect();
    let half_sq: Vec<f64> = means.iter().map(|m| 0.5 * dot(m, m)).collect();
    let log_norm = log_sum_exp(&half_sq);
    let log_priors: Vec<f64> = half_sq.iter().map(|v| v - log_norm).collect();
    let priors: Vec<f64> = log_priors.iter().map(|v| v.exp()).collect();

    let hw = h * w;
    let mut post = vec![0.0; l * hw];
    let mut features = Vec::with_capacity(hw);
    for y in 0..h {
        for x in 0..w {
            features.push(f.local_feature(y, x));
        }
    }
    for (pos, feat) in features.iter().enumerate() {
        let log_joint: Vec<f64> = means
            .iter()
            .zip(&log_priors)
            .map(|(m, lp)| {
                let dist2: f64 = feat.iter().zip(m.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
                lp - 0.5 * dist2
            })
            .collect();
        let z = log_sum_exp(&log_joint);
        for (i, lj) in log_joint.iter().enumerate() {
            post[i * hw + pos] = (lj - z).exp();
        }
    }
    let attention = AttentionMaps {
        height: h,
        width: w,
        values: Tensor::matrix(l, hw, post)?,
    };
    let tokens = em_mean_update(&features, &attention)?;
    Ok(GmmTokenization {
        attention,
        tokens,
        priors,
    })
}

/// EM mean update `c_j = Σᵢ p(j|fᵢ) fᵢ / Σᵢ p(j|fᵢ)` over row-major local features.
pub fn em_mean_update(features: &[Vec<f64>], posteriors: &AttentionMaps) -> Result<TokenSet> {
    let l = posteriors.tokens();
    let hw = posteriors.height * posteriors.width;
    if features.len() != hw {
        return Err(Error::dim("em_mean_update", &[features.len()], &[hw]));
    }
    let c = features.first().map_or(0, Vec::len);
    let mut out = vec![0.0; l * c];
    for j in 0..l {
        let resp = posteriors.map(j);
        let mass: f64 = resp.iter().sum();
        if mass < 1e-20 {
            return Err(Error::Degenerate(format!("component {j} has no mass")));
        }
        for (r, feat) in resp.iter().zip(features) {
            for (o, v) in out[j * c..(j + 1) * c].iter_mut().zip(feat) {
                *o += r / mass * v;
            }
        }
    }
    Ok(TokenSet(Tensor::matrix(l, c, out)?))
}

/// Shannon entropy (nats) of each map after normalizing it to unit mass.
pub fn attention_entropy(a: &AttentionMaps) -> Vec<f64> {
    (0..a.tokens())
        .map(|i| {
            let m = a.map(i);
            let mass: f64 = m.iter().sum();
            if mass <= 0.0 {
                return 0.0;
            }
            m.iter()
                .map(|v| v / mass)
                .filter(|p| *p > 0.0)
                .map(|p| -p * p.ln())
                .sum()
        })
        .collect()
}

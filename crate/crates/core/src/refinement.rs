//! Token refinement: self-attention between tokens followed by
//! cross-attention from tokens to local features, stacked `N` times, then the
//! concatenate-and-project head.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregation::{AttentionMaps, FeatureMap, TokenSet};
use crate::error::{Error, Result};
use crate::tensor::{random_tensor, Graph, Tensor, Var};

/// Denominator of the attention logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AttentionScale {
    /// `1/√C` with `C` the full channel count.
    #[default]
    Full,
    /// `1/√(C/heads)`, the usual per-head convention.
    PerHead,
}

/// Forward-pass mode. Training mode applies inverted dropout with masks drawn
/// from the supplied generator; evaluation mode is deterministic.
pub enum ForwardMode<'a> {
    Eval,
    Train { dropout: f64, rng: &'a mut ChaCha8Rng },
}

impl ForwardMode<'_> {
    fn apply_dropout(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        match self {
            ForwardMode::Eval => Ok(x),
            ForwardMode::Train { dropout, rng } => {
                let p = *dropout;
                if p <= 0.0 {
                    return Ok(x);
                }
                let keep = 1.0 / (1.0 - p);
                let shape = g.value(x).shape().to_vec();
                let n = shape.iter().product();
                let mask: Vec<f64> = (0..n).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect();
                g.mul_const(x, Tensor::new(shape, mask)?)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinementBlockParams {
    pub self_query: Tensor,
    pub self_key: Tensor,
    pub self_value: Tensor,
    pub self_fuse: Tensor,
    pub self_norm_gain: Tensor,
    pub self_norm_bias: Tensor,
    pub cross_query: Tensor,
    pub cross_key: Tensor,
    pub cross_value: Tensor,
    pub cross_fuse: Tensor,
    pub cross_norm_gain: Tensor,
    pub cross_norm_bias: Tensor,
    pub heads: usize,
    pub scale: AttentionScale,
}

impl RefinementBlockParams {
    pub fn init(channels: usize, heads: usize, scale: AttentionScale, rng: &mut impl Rng) -> Result<Self> {
        check_heads(channels, heads)?;
        let std = 1.0 / (channels as f64).sqrt();
        let mut proj = || random_tensor(&[channels, channels], std, rng);
        Ok(Self {
            self_query: proj(),
            self_key: proj(),
            self_value: proj(),
            self_fuse: proj(),
            self_norm_gain: Tensor::filled(&[channels], 1.0),
            self_norm_bias: Tensor::zeros(&[channels]),
            cross_query: proj(),
            cross_key: proj(),
            cross_value: proj(),
            cross_fuse: proj(),
            cross_norm_gain: Tensor::filled(&[channels], 1.0),
            cross_norm_bias: Tensor::zeros(&[channels]),
            heads,
            scale,
        })
    }

    pub fn channels(&self) -> usize {
        self.self_query.rows()
    }

    /// Named tensors in checkpoint order.
    pub fn tensors(&self) -> [(&'static str, &Tensor); 12] {
        [
            ("self_query", &self.self_query),
            ("self_key", &self.self_key),
            ("self_value", &self.self_value),
            ("self_fuse", &self.self_fuse),
            ("self_norm_gain", &self.self_norm_gain),
            ("self_norm_bias", &self.self_norm_bias),
            ("cross_query", &self.cross_query),
            ("cross_key", &self.cross_key),
            ("cross_value", &self.cross_value),
            ("cross_fuse", &self.cross_fuse),
            ("cross_norm_gain", &self.cross_norm_gain),
            ("cross_norm_bias", &self.cross_norm_bias),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 12] {
        [
            &mut self.self_query,
            &mut self.self_key,
            &mut self.self_value,
            &mut self.self_fuse,
            &mut self.self_norm_gain,
            &mut self.self_norm_bias,
            &mut self.cross_query,
            &mut self.cross_key,
            &mut self.cross_value,
            &mut self.cross_fuse,
            &mut self.cross_norm_gain,
            &mut self.cross_norm_bias,
        ]
    }

    fn validate(&self) -> Result<()> {
        let c = self.channels();
        check_heads(c, self.heads)?;
        for (name, t) in self.tensors() {
            let want: &[usize] = if name.contains("norm") { &[c] } else { &[c, c] };
            if t.shape() != want {
                return Err(Error::dim("refinement_block", t.shape(), want));
            }
        }
        Ok(())
    }

    pub fn register(&self, g: &mut Graph) -> BlockVars {
        self.register_with(g, true)
    }

    fn register_with(&self, g: &mut Graph, trainable: bool) -> BlockVars {
        let mut leaf = |t: &Tensor| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        BlockVars {
            self_query: leaf(&self.self_query),
            self_key: leaf(&self.self_key),
            self_value: leaf(&self.self_value),
            self_fuse: leaf(&self.self_fuse),
            self_norm_gain: leaf(&self.self_norm_gain),
            self_norm_bias: leaf(&self.self_norm_bias),
            cross_query: leaf(&self.cross_query),
            cross_key: leaf(&self.cross_key),
            cross_value: leaf(&self.cross_value),
            cross_fuse: leaf(&self.cross_fuse),
            cross_norm_gain: leaf(&self.cross_norm_gain),
            cross_norm_bias: leaf(&self.cross_norm_bias),
            heads: self.heads,
            scale: self.scale,
        }
    }
}

fn check_heads(channels: usize, heads: usize) -> Result<()> {
    if heads == 0 || !channels.is_multiple_of(heads) {
        return Err(Error::Config(format!(
            "head count {heads} does not divide channel count {channels}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy)]
pub struct BlockVars {
    pub self_query: Var,
    pub self_key: Var,
    pub self_value: Var,
    pub self_fuse: Var,
    pub self_norm_gain: Var,
    pub self_norm_bias: Var,
    pub cross_query: Var,
    pub cross_key: Var,
    pub cross_value: Var,
    pub cross_fuse: Var,
    pub cross_norm_gain: Var,
    pub cross_norm_bias: Var,
    pub heads: usize,
    pub scale: AttentionScale,
}

impl BlockVars {
    pub fn as_array(&self) -> [Var; 12] {
        [
            self.self_query,
            self.self_key,
            self.self_value,
            self.self_fuse,
            self.self_norm_gain,
            self.self_norm_bias,
            self.cross_query,
            self.cross_key,
            self.cross_value,
            self.cross_fuse,
            self.cross_norm_gain,
            self.cross_norm_bias,
        ]
    }
}

struct Projections {
    query: Var,
    key: Var,
    value: Var,
    fuse: Var,
}

/// Multi-head attention from `queries_in` onto `keys_in`. Returns the fused
/// branch and the per-head attention matrices.
fn multi_head(
    g: &mut Graph,
    queries_in: Var,
    keys_in: Var,
    proj: &Projections,
    heads: usize,
    scale: AttentionScale,
    mode: &mut ForwardMode<'_>,
) -> Result<(Var, Vec<Var>)> {
    let c = g.value(queries_in).cols();
    let head_dim = c / heads;
    let q = g.matmul(queries_in, proj.query)?;
    let k = g.matmul(keys_in, proj.key)?;
    let v = g.matmul(keys_in, proj.value)?;
    let denom = match scale {
        AttentionScale::Full => (c as f64).sqrt(),
        AttentionScale::PerHead => (head_dim as f64).sqrt(),
    };
    let mut outputs = Vec::with_capacity(heads);
    let mut maps = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            let start = h * head_dim;
            (
                g.slice_cols(q, start, head_dim)?,
                g.slice_cols(k, start, head_dim)?,
                g.slice_cols(v, start, head_dim)?,
            )
        };
        let logits = g.matmul_nt(qh, kh)?;
        let logits = g.scale(logits, 1.0 / denom);
        let attn = g.softmax_rows(logits);
        let out = g.matmul(attn, vh)?;
        outputs.push(mode.apply_dropout(g, out)?);
        maps.push(attn);
    }
    let joined = if heads == 1 {
        outputs[0]
    } else {
        g.concat_cols(&outputs)?
    };
    Ok((g.matmul(joined, proj.fuse)?, maps))
}

/// Relationship modeling: `T + LayerNorm(MHA(T, T))`.
pub fn mha_self_graph(g: &mut Graph, tokens: Var, b: &BlockVars, mode: &mut ForwardMode<'_>) -> Result<Var> {
    let proj = Projections {
        query: b.self_query,
        key: b.self_key,
        value: b.self_value,
        fuse: b.self_fuse,
    };
    let (branch, _) = multi_head(g, tokens, tokens, &proj, b.heads, b.scale, mode)?;
    let normed = g.layer_norm_rows(branch, b.self_norm_gain, b.self_norm_bias)?;
    g.add(tokens, normed)
}

/// Token enhancement: `T_r + LayerNorm(MHA(T_r, F))`, plus per-head `L×HW` attention.
pub fn mha_cross_graph(
    g: &mut Graph,
    tokens: Var,
    features: Var,
    b: &BlockVars,
    mode: &mut ForwardMode<'_>,
) -> Result<(Var, Vec<Var>)> {
    let proj = Projections {
        query: b.cross_query,
        key: b.cross_key,
        value: b.cross_value,
        fuse: b.cross_fuse,
    };
    let (branch, maps) = multi_head(g, tokens, features, &proj, b.heads, b.scale, mode)?;
    let normed = g.layer_norm_rows(branch, b.cross_norm_gain, b.cross_norm_bias)?;
    Ok((g.add(tokens, normed)?, maps))
}

/// Runs every block (self then cross attention) in order. Returns the final
/// tokens and the last block's cross-attention maps.
pub fn refine_stack_graph(
    g: &mut Graph,
    tokens: Var,
    features: Var,
    blocks: &[BlockVars],
    mode: &mut ForwardMode<'_>,
) -> Result<(Var, Vec<Var>)> {
    if blocks.is_empty() {
        return Err(Error::Config("refinement stack needs at least one block".into()));
    }
    let mut t = tokens;
    let mut maps = Vec::new();
    for b in blocks {
        let tr = mha_self_graph(g, t, b, mode)?;
        let (tu, m) = mha_cross_graph(g, tr, features, b, mode)?;
        t = tu;
        maps = m;
    }
    Ok((t, maps))
}

/// Averages per-head `L×HW` attention matrices into one set of maps.
pub fn average_heads(g: &Graph, maps: &[Var], height: usize, width: usize) -> Result<AttentionMaps> {
    let first = g.value(maps[0]);
    let mut acc = vec![0.0; first.len()];
    for m in maps {
        for (a, v) in acc.iter_mut().zip(g.value(*m).data()) {
            *a += v;
        }
    }
    acc.iter_mut().for_each(|a| *a /= maps.len() as f64);
    Ok(AttentionMaps {
        height,
        width,
        values: Tensor::new(first.shape().to_vec(), acc)?,
    })
}

fn check_tokens(t: &TokenSet, p: &RefinementBlockParams) -> Result<()> {
    p.validate()?;
    if t.0.cols() != p.channels() {
        return Err(Error::dim("refinement", t.0.shape(), &[t.len(), p.channels()]));
    }
    Ok(())
}

pub fn mha_self(t: &TokenSet, p: &RefinementBlockParams, mode: &mut ForwardMode<'_>) -> Result<TokenSet> {
    check_tokens(t, p)?;
    let mut g = Graph::new();
    let tv = g.constant(t.0.clone());
    let b = p.register_with(&mut g, false);
    let out = mha_self_graph(&mut g, tv, &b, mode)?;
    Ok(TokenSet(g.value(out).clone()))
}

pub fn mha_cross(
    t: &TokenSet,
    f: &FeatureMap,
    p: &RefinementBlockParams,
    mode: &mut ForwardMode<'_>,
) -> Result<(TokenSet, AttentionMaps)> {
    check_tokens(t, p)?;
    if f.channels() != p.channels() {
        return Err(Error::dim("mha_cross", &[f.channels()], &[p.channels()]));
    }
    let mut g = Graph::new();
    let tv = g.constant(t.0.clone());
    let x = g.constant(f.to_positions());
    let b = p.register_with(&mut g, false);
    let (out, maps) = mha_cross_graph(&mut g, tv, x, &b, mode)?;
    let attn = average_heads(&g, &maps, f.height(), f.width())?;
    Ok((TokenSet(g.value(out).clone()), attn))
}

pub fn refine_stack(
    t: &TokenSet,
    f: &FeatureMap,
    blocks: &[RefinementBlockParams],
    mode: &mut ForwardMode<'_>,
) -> Result<TokenSet> {
    for b in blocks {
        check_tokens(t, b)?;
    }
    let mut g = Graph::new();
    let tv = g.constant(t.0.clone());
    let x = g.constant(f.to_positions());
    let vars: Vec<BlockVars> = blocks.iter().map(|b| b.register_with(&mut g, false)).collect();
    let (out, _) = refine_stack_graph(&mut g, tv, x, &vars, mode)?;
    Ok(TokenSet(g.value(out).clone()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    /// `(L·C)×d`
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl HeadParams {
    pub fn init(input_dim: usize, output_dim: usize, with_bias: bool, rng: &mut impl Rng) -> Self {
        let std = 1.0 / (input_dim as f64).sqrt();
        Self {
            weight: random_tensor(&[input_dim, output_dim], std, rng),
            bias: with_bias.then(|| Tensor::zeros(&[output_dim])),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.weight.cols()
    }
}

/// `Concat(t⁽¹⁾ … t⁽ᴸ⁾) · W_g (+ b)` as a `1×d` row.
pub fn head_graph(g: &mut Graph, tokens: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
    let n = g.value(tokens).len();
    let flat = g.reshape(tokens, &[1, n])?;
    let out = g.matmul(flat, weight)?;
    match bias {
        Some(b) => g.add_bias(out, b),
        None => Ok(out),
    }
}

/// Unnormalized global descriptor from the final tokens.
pub fn head_project(t: &TokenSet, h: &HeadParams) -> Result<Vec<f64>> {
    let n = t.0.len();
    if h.weight.rows() != n {
        return Err(Error::dim("head_project", h.weight.shape(), &[n, h.output_dim()]));
    }
    let mut g = Graph::new();
    let tv = g.constant(t.0.clone());
    let w = g.constant(h.weight.clone());
    let b = h.bias.as_ref().map(|b| g.constant(b.clone()));
    let out = head_graph(&mut g, tv, w, b)?;
    Ok(g.value(out).data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{project_to_scalar, vjp_check};
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn block(c: usize, heads: usize, seed: u64) -> RefinementBlockParams {
        let mut r = rng(seed);
        let mut b = RefinementBlockParams::init(c, heads, AttentionScale::Full, &mut r).unwrap();
        // Non-trivial norm parameters so their gradients are exercised.
        b.self_norm_gain = random_tensor(&[c], 1.0, &mut r);
        b.self_norm_bias = random_tensor(&[c], 1.0, &mut r);
        b.cross_norm_gain = random_tensor(&[c], 1.0, &mut r);
        b.cross_norm_bias = random_tensor(&[c], 1.0, &mut r);
        b
    }

    fn tokens(l: usize, c: usize, seed: u64) -> TokenSet {
        TokenSet(random_tensor(&[l, c], 1.0, &mut rng(seed)))
    }

    fn fmap(c: usize, h: usize, w: usize, seed: u64) -> FeatureMap {
        FeatureMap::new(c, h, w, random_tensor(&[c * h * w], 1.0, &mut rng(seed)).into_data()).unwrap()
    }

    fn zero_branches(b: &mut RefinementBlockParams) {
        for t in b.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    #[test]
    fn heads_must_divide_channels() {
        assert!(matches!(
            RefinementBlockParams::init(6, 4, AttentionScale::Full, &mut rng(0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn single_token_self_attention() {
        let b = block(4, 2, 1);
        let t = tokens(1, 4, 2);
        let out = mha_self(&t, &b, &mut ForwardMode::Eval).unwrap();
        // S = [[1]] so the branch is V·W_M.
        let branch = t.0.matmul(&b.self_value).unwrap().matmul(&b.self_fuse).unwrap();
        let (normed, _) = crate::tensor::layer_norm_rows(&branch, &b.self_norm_gain, &b.self_norm_bias).unwrap();
        for j in 0..4 {
            assert!((out.0.data()[j] - t.0.data()[j] - normed.data()[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_branches_are_identity() {
        let mut b = block(8, 2, 3);
        zero_branches(&mut b);
        let t = tokens(4, 8, 4);
        let f = fmap(8, 3, 3, 5);
        assert_eq!(mha_self(&t, &b, &mut ForwardMode::Eval).unwrap(), t);
        assert_eq!(mha_cross(&t, &f, &b, &mut ForwardMode::Eval).unwrap().0, t);
        assert_eq!(
            refine_stack(&t, &f, &[b.clone(), b], &mut ForwardMode::Eval).unwrap(),
            t
        );
    }

    #[test]
    fn cross_single_position_broadcasts_value() {
        let b = block(4, 1, 6);
        let t = tokens(3, 4, 7);
        let f = fmap(4, 1, 1, 8);
        let (_, attn) = mha_cross(&t, &f, &b, &mut ForwardMode::Eval).unwrap();
        assert!(attn.values.data().iter().all(|v| (*v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn cross_duplicated_positions_split_mass() {
        let b = block(4, 2, 9);
        let t = tokens(3, 4, 10);
        let base = fmap(4, 1, 2, 11);
        // Each original position duplicated twice: [a, b] -> [a, a, b, b]
        let mut values = Vec::new();
        for ch in 0..4 {
            let a = base.at(ch, 0, 0);
            let bb = base.at(ch, 0, 1);
            values.extend_from_slice(&[a, a, bb, bb]);
        }
        let dup = FeatureMap::new(4, 1, 4, values).unwrap();
        let (t1, a1) = mha_cross(&t, &base, &b, &mut ForwardMode::Eval).unwrap();
        let (t2, a2) = mha_cross(&t, &dup, &b, &mut ForwardMode::Eval).unwrap();
        assert!(t1.0.max_abs_diff(&t2.0) < 1e-12);
        for i in 0..3 {
            let m1 = a1.map(i);
            let m2 = a2.map(i);
            assert!((m2[0] - m1[0] / 2.0).abs() < 1e-12 && (m2[1] - m1[0] / 2.0).abs() < 1e-12);
            assert!((m2[2] - m1[1] / 2.0).abs() < 1e-12 && (m2[3] - m1[1] / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rows_are_distributions() {
        let b = block(8, 2, 12);
        let (_, attn) = mha_cross(&tokens(4, 8, 13), &fmap(8, 3, 4, 14), &b, &mut ForwardMode::Eval).unwrap();
        for i in 0..4 {
            assert!((attn.map(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn cross_is_permutation_invariant_over_positions() {
        let b = block(8, 2, 15);
        let t = tokens(4, 8, 16);
        let f = fmap(8, 2, 3, 17);
        let g = f.permute_positions(&[4, 0, 5, 2, 1, 3]).unwrap();
        let (t1, _) = mha_cross(&t, &f, &b, &mut ForwardMode::Eval).unwrap();
        let (t2, _) = mha_cross(&t, &g, &b, &mut ForwardMode::Eval).unwrap();
        assert!(t1.0.max_abs_diff(&t2.0) < 1e-13);
    }

    #[test]
    fn stack_composition() {
        let b1 = block(8, 2, 18);
        let b2 = block(8, 2, 19);
        let t = tokens(4, 8, 20);
        let f = fmap(8, 3, 3, 21);
        let step = |t: &TokenSet, b: &RefinementBlockParams| {
            let tr = mha_self(t, b, &mut ForwardMode::Eval).unwrap();
            mha_cross(&tr, &f, b, &mut ForwardMode::Eval).unwrap().0
        };
        let one = refine_stack(&t, &f, std::slice::from_ref(&b1), &mut ForwardMode::Eval).unwrap();
        assert_eq!(one, step(&t, &b1));
        let two = refine_stack(&t, &f, &[b1.clone(), b2.clone()], &mut ForwardMode::Eval).unwrap();
        assert_eq!(two, step(&step(&t, &b1), &b2));
        assert_eq!(two.0.shape(), &[4, 8]);
        assert!(matches!(
            refine_stack(&t, &f, &[], &mut ForwardMode::Eval),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn self_and_cross_vjp() {
        let b = block(16, 2, 22);
        let t0 = tokens(4, 16, 23).0;
        let x0 = fmap(16, 3, 3, 24).to_positions();
        let rs = vjp_check(
            |g, t| {
                let v = b.register(g);
                let out = mha_self_graph(g, t, &v, &mut ForwardMode::Eval)?;
                project_to_scalar(g, out, 1)
            },
            &t0,
            1e-6,
        )
        .unwrap();
        assert!(rs.max_rel_err < 1e-5, "{rs:?}");
        let rc = vjp_check(
            |g, x| {
                let v = b.register(g);
                let t = g.constant(t0.clone());
                let (out, _) = mha_cross_graph(g, t, x, &v, &mut ForwardMode::Eval)?;
                project_to_scalar(g, out, 2)
            },
            &x0,
            1e-6,
        )
        .unwrap();
        assert!(rc.max_rel_err < 1e-5, "{rc:?}");
        // every block parameter
        for idx in 0..12 {
            let theta = b.tensors()[idx].1.clone();
            let r = vjp_check(
                |g, p| {
                    let mut v = b.register(g);
                    let mut arr = v.as_array();
                    arr[idx] = p;
                    v = BlockVars {
                        self_query: arr[0],
                        self_key: arr[1],
                        self_value: arr[2],
                        self_fuse: arr[3],
                        self_norm_gain: arr[4],
                        self_norm_bias: arr[5],
                        cross_query: arr[6],
                        cross_key: arr[7],
                        cross_value: arr[8],
                        cross_fuse: arr[9],
                        cross_norm_gain: arr[10],
                        cross_norm_bias: arr[11],
                        ..v
                    };
                    let t = g.constant(t0.clone());
                    let x = g.constant(x0.clone());
                    let (out, _) = refine_stack_graph(g, t, x, &[v], &mut ForwardMode::Eval)?;
                    project_to_scalar(g, out, 3)
                },
                &theta,
                1e-6,
            )
            .unwrap();
            assert!(r.max_rel_err < 1e-5, "param {idx}: {r:?}");
        }
    }

    #[test]
    fn dropout_only_in_train_mode() {
        let b = block(8, 2, 25);
        let t = tokens(4, 8, 26);
        let eval1 = mha_self(&t, &b, &mut ForwardMode::Eval).unwrap();
        let eval2 = mha_self(&t, &b, &mut ForwardMode::Eval).unwrap();
        assert_eq!(eval1, eval2);
        let mut r = rng(27);
        let train = mha_self(
            &t,
            &b,
            &mut ForwardMode::Train {
                dropout: 0.5,
                rng: &mut r,
            },
        )
        .unwrap();
        assert_ne!(train, eval1);
        let mut r1 = rng(28);
        let mut r2 = rng(28);
        let a = mha_self(
            &t,
            &b,
            &mut ForwardMode::Train {
                dropout: 0.5,
                rng: &mut r1,
            },
        )
        .unwrap();
        let c = mha_self(
            &t,
            &b,
            &mut ForwardMode::Train {
                dropout: 0.5,
                rng: &mut r2,
            },
        )
        .unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn head_identity_and_selector() {
        let t = tokens(2, 3, 29);
        let h = HeadParams {
            weight: Tensor::identity(6),
            bias: None,
        };
        assert_eq!(head_project(&t, &h).unwrap(), t.0.data().to_vec());
        let mut w = Tensor::zeros(&[6, 1]);
        w.data_mut()[4] = 1.0; // token 1, channel 1
        let sel = head_project(&t, &HeadParams { weight: w, bias: None }).unwrap();
        assert_eq!(sel, vec![t.token(1)[1]]);
        let bad = HeadParams {
            weight: Tensor::zeros(&[5, 2]),
            bias: None,
        };
        assert!(head_project(&t, &bad).is_err());
    }

    #[test]
    fn head_vjp() {
        let mut r = rng(30);
        let t0 = tokens(4, 5, 31).0;
        let h = HeadParams::init(20, 6, true, &mut r);
        let b0 = random_tensor(&[6], 1.0, &mut r);
        let rw = vjp_check(
            |g, w| {
                let t = g.constant(t0.clone());
                let b = g.param(b0.clone());
                let out = head_graph(g, t, w, Some(b))?;
                project_to_scalar(g, out, 4)
            },
            &h.weight,
            1e-6,
        )
        .unwrap();
        let rt = vjp_check(
            |g, t| {
                let w = g.constant(h.weight.clone());
                let out = head_graph(g, t, w, None)?;
                project_to_scalar(g, out, 4)
            },
            &t0,
            1e-6,
        )
        .unwrap();
        assert!(rw.max_rel_err < 1e-6 && rt.max_rel_err < 1e-6, "{rw:?} {rt:?}");
    }
}

//! The encoder: turns the time-index representation, temporal features, and
//! historical observations into the latent derivative sequence α.
//!
//! Each input path runs through its own feature stack and an entry
//! projection with activation and layer norm; N aggregation layers then fold
//! the spatial tokens into the time-index rows with cross-attention and the
//! temporal features with a concat+affine fusion, each behind a residual
//! and a layer norm.
//!
//! Row-stacking convention: a batch of B windows is processed as one graph,
//! with per-window rows stacked along axis 0. The time-index path is
//! window-independent, so it is computed once and tiled B times.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::features::{siren_forward, Activation, SirenStack};

/// Affine-with-activation entry followed by layer norm; the front door of
/// one input path.
pub struct PathEmbed {
    pub stack: SirenStack,
    pub entry_w: Tensor,
    pub entry_b: Tensor,
    pub entry_activation: Activation,
    pub norm_gain: Tensor,
    pub norm_bias: Tensor,
}

/// Cross-attention weights for one aggregation layer.
pub struct AttentionBlock {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub norm_gain: Tensor,
    pub norm_bias: Tensor,
    pub n_heads: usize,
}

/// One aggregation layer: optional cross-attention over spatial tokens,
/// then temporal fusion. `attention` is absent in spatial-ablated variants.
pub struct AggregationLayer {
    pub attention: Option<AttentionBlock>,
    pub fuse_w: Tensor,
    pub fuse_b: Tensor,
    pub norm_gain: Tensor,
    pub norm_bias: Tensor,
}

/// All encoder weights bound to one graph.
pub struct EncoderBound {
    pub tau: PathEmbed,
    pub temporal: Option<PathEmbed>,
    pub spatial: Option<PathEmbed>,
    pub layers: Vec<AggregationLayer>,
}

fn apply_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    x.layernorm_rows()?.mul_row(gain)?.add_row(bias)
}

fn embed_path(input: &Tensor, path: &PathEmbed) -> Result<Tensor> {
    let h = siren_forward(input, &path.stack)?;
    let h = h.matmul(&path.entry_w)?.add_row(&path.entry_b)?;
    let h = match path.entry_activation {
        Activation::Sine => h.sin(),
        Activation::Gelu => h.gelu(),
    };
    apply_norm(&h, &path.norm_gain, &path.norm_bias)
}

/// Runs the three input paths.
///
/// `tau_cff` is the Fourier-encoded grid, (L+H)×(bank width), shared by all
/// windows. `t_feats` is (B·(L+H))×t and `x_tokens` is (B·C)×L, each absent
/// when the corresponding path is ablated. Returns (τ0, t0, x0) with widths
/// d, t, d.
pub fn embed_inputs(
    enc: &EncoderBound,
    tau_cff: &Tensor,
    t_feats: Option<&Tensor>,
    x_tokens: Option<&Tensor>,
) -> Result<(Tensor, Option<Tensor>, Option<Tensor>)> {
    let tau0 = embed_path(tau_cff, &enc.tau)?;
    let t0 = match (&enc.temporal, t_feats) {
        (Some(path), Some(input)) => Some(embed_path(input, path)?),
        (None, None) => None,
        _ => {
            return Err(Error::contract(
                "embed_inputs: temporal path and temporal features must both be present or both absent",
            ))
        }
    };
    let x0 = match (&enc.spatial, x_tokens) {
        (Some(path), Some(input)) => Some(embed_path(input, path)?),
        (None, None) => None,
        _ => {
            return Err(Error::contract(
                "embed_inputs: spatial path and spatial tokens must both be present or both absent",
            ))
        }
    };
    Ok((tau0, t0, x0))
}

/// Scaled dot-product cross-attention with queries from the time-index rows
/// and keys/values from the channel tokens, followed by residual add and
/// layer norm. `tau` is (B·T)×d, `x0` is (B·C)×d; attention never mixes rows
/// across windows.
pub fn cross_attention(
    tau: &Tensor,
    x0: &Tensor,
    block: &AttentionBlock,
    batch: usize,
) -> Result<Tensor> {
    let rows = tau.shape()[0];
    let d = tau.shape()[1];
    if rows % batch != 0 || x0.shape()[0] % batch != 0 {
        return Err(Error::contract(format!(
            "cross_attention: row counts {rows} and {} not divisible by batch {batch}",
            x0.shape()[0]
        )));
    }
    if d % block.n_heads != 0 {
        return Err(Error::config(format!(
            "cross_attention: {} heads do not divide width {d}",
            block.n_heads
        )));
    }
    let t_len = rows / batch;
    let c = x0.shape()[0] / batch;
    let dh = d / block.n_heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let q = tau.matmul(&block.wq)?.add_row(&block.bq)?;
    let k = x0.matmul(&block.wk)?.add_row(&block.bk)?;
    let v = x0.matmul(&block.wv)?.add_row(&block.bv)?;

    let mut per_window = Vec::with_capacity(batch);
    for w in 0..batch {
        let qw = q.narrow(0, w * t_len, t_len)?;
        let kw = k.narrow(0, w * c, c)?;
        let vw = v.narrow(0, w * c, c)?;
        let mut heads = Vec::with_capacity(block.n_heads);
        for h in 0..block.n_heads {
            let qh = qw.narrow(1, h * dh, dh)?;
            let kh = kw.narrow(1, h * dh, dh)?;
            let vh = vw.narrow(1, h * dh, dh)?;
            let weights = qh
                .matmul(&kh.transpose()?)?
                .scale(scale)
                .softmax_rows()?;
            heads.push(weights.matmul(&vh)?);
        }
        let refs: Vec<&Tensor> = heads.iter().collect();
        per_window.push(if refs.len() == 1 {
            heads[0].clone()
        } else {
            Tensor::cat(&refs, 1)?
        });
    }
    let refs: Vec<&Tensor> = per_window.iter().collect();
    let ctx = if refs.len() == 1 {
        per_window[0].clone()
    } else {
        Tensor::cat(&refs, 0)?
    };
    let attn = ctx.matmul(&block.wo)?.add_row(&block.bo)?;
    let res = tau.add(&attn)?;
    apply_norm(&res, &block.norm_gain, &block.norm_bias)
}

/// One aggregation step: cross-attention (when spatial tokens are present),
/// then fusion of the temporal features by concat+affine, residual-added and
/// normalized.
pub fn aggregate_layer(
    tau: &Tensor,
    t0: Option<&Tensor>,
    x0: Option<&Tensor>,
    layer: &AggregationLayer,
    batch: usize,
) -> Result<Tensor> {
    let after_attn = match (&layer.attention, x0) {
        (Some(block), Some(x0)) => cross_attention(tau, x0, block, batch)?,
        (None, None) => tau.clone(),
        _ => {
            return Err(Error::contract(
                "aggregate_layer: attention block and spatial tokens must both be present or both absent",
            ))
        }
    };
    let fused_in = match t0 {
        Some(t0) => Tensor::cat(&[&after_attn, t0], 1)?,
        None => after_attn.clone(),
    };
    let fused = fused_in.matmul(&layer.fuse_w)?.add_row(&layer.fuse_b)?;
    let res = after_attn.add(&fused)?;
    apply_norm(&res, &layer.norm_gain, &layer.norm_bias)
}

/// Full encoder pass: feature paths once, then the aggregation layers, all
/// positions in parallel (no autoregression). Output is (B·(L+H))×d.
pub fn encode(
    enc: &EncoderBound,
    tau_cff: &Tensor,
    t_feats: Option<&Tensor>,
    x_tokens: Option<&Tensor>,
    batch: usize,
) -> Result<Tensor> {
    let (tau0, t0, x0) = embed_inputs(enc, tau_cff, t_feats, x_tokens)?;
    let mut tau = tau0.tile_rows(batch)?;
    for layer in &enc.layers {
        tau = aggregate_layer(&tau, t0.as_ref(), x0.as_ref(), layer, batch)?;
    }
    Ok(tau)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;
    use crate::rng::substream;
    use rand::Rng;

    fn rand_vec(n: usize, rng: &mut impl Rng) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn attention_block(g: &Graph, d: usize, n_heads: usize, rng: &mut impl Rng) -> AttentionBlock {
        let mat = |rng: &mut dyn rand::RngCore| {
            g.leaf(
                (0..d * d).map(|_| rng.gen_range(-0.5..0.5)).collect(),
                &[d, d],
                true,
            )
            .unwrap()
        };
        AttentionBlock {
            wq: mat(rng),
            bq: g.zeros(&[d], true),
            wk: mat(rng),
            bk: g.zeros(&[d], true),
            wv: mat(rng),
            bv: g.zeros(&[d], true),
            wo: mat(rng),
            bo: g.zeros(&[d], true),
            norm_gain: g.leaf(vec![1.0; d], &[d], true).unwrap(),
            norm_bias: g.zeros(&[d], true),
            n_heads,
        }
    }

    /// Explicit softmax(QKᵀ/√d)V oracle for a single window, one head.
    fn attention_oracle(
        q: &[f64],
        k: &[f64],
        v: &[f64],
        t_len: usize,
        c: usize,
        d: usize,
    ) -> Vec<f64> {
        let mut out = vec![0.0; t_len * d];
        for i in 0..t_len {
            let mut scores = vec![0.0; c];
            for j in 0..c {
                let mut s = 0.0;
                for l in 0..d {
                    s += q[i * d + l] * k[j * d + l];
                }
                scores[j] = s / (d as f64).sqrt();
            }
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|&s| (s - mx).exp()).collect();
            let denom: f64 = exps.iter().sum();
            for j in 0..c {
                let w = exps[j] / denom;
                for l in 0..d {
                    out[i * d + l] += w * v[j * d + l];
                }
            }
        }
        out
    }

    #[test]
    fn single_key_attention_broadcasts_the_token() {
        let g = Graph::new();
        let d = 4;
        let mut rng = substream(7, "test");
        let block = attention_block(&g, d, 1, &mut rng);
        let tau = g.constant(rand_vec(3 * d, &mut rng), &[3, d]).unwrap();
        let x0 = g.constant(rand_vec(d, &mut rng), &[1, d]).unwrap();
        let out = cross_attention(&tau, &x0, &block, 1).unwrap();

        // With one key the softmax weight is identically 1, so the context
        // row is the single token's V projection for every query row.
        let v = x0
            .matmul(&block.wv)
            .unwrap()
            .add_row(&block.bv)
            .unwrap();
        let ctx = v.tile_rows(3).unwrap();
        let attn = ctx.matmul(&block.wo).unwrap().add_row(&block.bo).unwrap();
        let expect = tau
            .add(&attn)
            .unwrap()
            .layernorm_rows()
            .unwrap()
            .mul_row(&block.norm_gain)
            .unwrap()
            .add_row(&block.norm_bias)
            .unwrap();
        let got = out.value();
        for (a, b) in got.iter().zip(expect.value()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_keys_give_uniform_weights() {
        let g = Graph::new();
        let d = 4;
        let c = 3;
        let mut rng = substream(8, "test");
        let block = attention_block(&g, d, 1, &mut rng);
        let tau = g.constant(rand_vec(2 * d, &mut rng), &[2, d]).unwrap();
        // All channel tokens identical -> every attention weight is 1/C and
        // the context equals the shared V row regardless of the query.
        let row = rand_vec(d, &mut rng);
        let mut xdata = Vec::new();
        for _ in 0..c {
            xdata.extend_from_slice(&row);
        }
        let x0 = g.constant(xdata, &[c, d]).unwrap();
        let out = cross_attention(&tau, &x0, &block, 1).unwrap();

        let v_row = x0.matmul(&block.wv).unwrap().add_row(&block.bv).unwrap();
        let shared = v_row.narrow(0, 0, 1).unwrap().tile_rows(2).unwrap();
        let attn = shared.matmul(&block.wo).unwrap().add_row(&block.bo).unwrap();
        let expect = tau
            .add(&attn)
            .unwrap()
            .layernorm_rows()
            .unwrap()
            .mul_row(&block.norm_gain)
            .unwrap()
            .add_row(&block.norm_bias)
            .unwrap();
        for (a, b) in out.value().iter().zip(expect.value()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_matches_explicit_oracle() {
        let g = Graph::new();
        let d = 4;
        let t_len = 4;
        let c = 2;
        let mut rng = substream(9, "test");
        let block = attention_block(&g, d, 1, &mut rng);
        let tau = g
            .constant(rand_vec(t_len * d, &mut rng), &[t_len, d])
            .unwrap();
        let x0 = g.constant(rand_vec(c * d, &mut rng), &[c, d]).unwrap();
        let out = cross_attention(&tau, &x0, &block, 1).unwrap();

        let q = tau.matmul(&block.wq).unwrap().add_row(&block.bq).unwrap();
        let k = x0.matmul(&block.wk).unwrap().add_row(&block.bk).unwrap();
        let v = x0.matmul(&block.wv).unwrap().add_row(&block.bv).unwrap();
        let ctx = attention_oracle(&q.value(), &k.value(), &v.value(), t_len, c, d);
        let ctx_t = g.constant(ctx, &[t_len, d]).unwrap();
        let attn = ctx_t.matmul(&block.wo).unwrap().add_row(&block.bo).unwrap();
        let expect = tau
            .add(&attn)
            .unwrap()
            .layernorm_rows()
            .unwrap()
            .mul_row(&block.norm_gain)
            .unwrap()
            .add_row(&block.norm_bias)
            .unwrap();
        for (a, b) in out.value().iter().zip(expect.value()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_fusion_reduces_to_normed_attention_output() {
        let g = Graph::new();
        let d = 4;
        let t_dim = 2;
        let mut rng = substream(10, "test");
        let block = attention_block(&g, d, 1, &mut rng);
        let layer = AggregationLayer {
            attention: Some(block),
            fuse_w: g.zeros(&[d + t_dim, d], true),
            fuse_b: g.zeros(&[d], true),
            norm_gain: g.leaf(vec![1.0; d], &[d], true).unwrap(),
            norm_bias: g.zeros(&[d], true),
        };
        let tau = g.constant(rand_vec(3 * d, &mut rng), &[3, d]).unwrap();
        let t0 = g.constant(rand_vec(3 * t_dim, &mut rng), &[3, t_dim]).unwrap();
        let x0 = g.constant(rand_vec(2 * d, &mut rng), &[2, d]).unwrap();
        let out = aggregate_layer(&tau, Some(&t0), Some(&x0), &layer, 1).unwrap();
        let after_attn =
            cross_attention(&tau, &x0, layer.attention.as_ref().unwrap(), 1).unwrap();
        let expect = after_attn.layernorm_rows().unwrap();
        for (a, b) in out.value().iter().zip(expect.value()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

//! Flow-guided local attention and the multi-view merged-attention
//! extension.
//!
//! A predicted flow selects, per query location, a local key patch to
//! attend over. The query-patch center feature is the single query
//! token; the `n x n` key patch supplies key/value tokens. Learned 1x1
//! projections and `1/sqrt(d)` scaling follow standard scaled
//! dot-product attention. Masks stay soft in `[0, 1]` during training;
//! binarization is a visualization concern only.

use ndarray::{Array2, Array3, Ix3};

use crate::autodiff::nn::{Conv2d, ParamStore};
use crate::autodiff::{identity_grid, Arr, Graph, Var};
use crate::error::{Error, Result};
use crate::geometry::{FlowField, FlowRepr};

/// Which domain a feature map lives in; cross-domain attention checks
/// the tag instead of trusting resolutions.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Domain {
    Image,
    Texture,
}

/// Soft blending mask for merged multi-view attention, `(h, w)`.
#[derive(Clone, Debug)]
pub struct AggregationMask {
    pub values: Array2<f64>,
}

/// Convert a flow to absolute key positions: relative flows gain the
/// identity grid; absolute flows pass through unchanged (idempotent).
pub fn flow_to_absolute_graph(g: &mut Graph, flow: Var, repr: FlowRepr) -> Var {
    match repr {
        FlowRepr::Absolute => flow,
        FlowRepr::Relative => {
            let sh = g.value(flow).shape().to_vec();
            let grid = g.constant(identity_grid(sh[1], sh[2]));
            g.add(flow, grid)
        }
    }
}

/// Pure-array twin of [`flow_to_absolute_graph`] for stored fields.
pub fn flow_to_absolute(flow: &FlowField) -> FlowField {
    match flow.representation {
        FlowRepr::Absolute => flow.clone(),
        FlowRepr::Relative => {
            let (h, w, _) = flow.vectors.dim();
            let mut vectors = flow.vectors.clone();
            for y in 0..h {
                for x in 0..w {
                    vectors[[y, x, 0]] += x as f64;
                    vectors[[y, x, 1]] += y as f64;
                }
            }
            FlowField {
                vectors,
                representation: FlowRepr::Absolute,
                resolution_level: flow.resolution_level,
            }
        }
    }
}

/// Gather a `C x n x n` patch around a (possibly fractional) center
/// with bilinear sub-pixel sampling and border clamping.
pub fn extract_local_patch(
    g: &mut Graph,
    feature: Var,
    center: (f64, f64),
    n: usize,
) -> Result<Var> {
    if n % 2 == 0 {
        return Err(Error::contract(format!("patch size must be odd, got {n}")));
    }
    if !center.0.is_finite() || !center.1.is_finite() {
        return Err(Error::contract("patch center must be finite"));
    }
    let half = (n / 2) as f64;
    let mut coords = Array3::<f64>::zeros((2, n, n));
    for dy in 0..n {
        for dx in 0..n {
            coords[[0, dy, dx]] = center.0 - half + dx as f64;
            coords[[1, dy, dx]] = center.1 - half + dy as f64;
        }
    }
    let coords = g.constant(coords.into_dyn());
    Ok(g.grid_sample(feature, coords))
}

/// Learned projections for one attention site.
pub struct LocalAttention {
    pub wq: Conv2d,
    pub wk: Conv2d,
    pub wv: Conv2d,
    pub n: usize,
    pub dim: usize,
}

impl LocalAttention {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut rand_chacha::ChaCha8Rng,
        name: &str,
        c_query: usize,
        c_key: usize,
        dim: usize,
        n: usize,
    ) -> Result<Self> {
        if n % 2 == 0 {
            return Err(Error::contract(format!("patch size must be odd, got {n}")));
        }
        Ok(LocalAttention {
            wq: Conv2d::proj(store, rng, &format!("{name}.wq"), c_query, dim),
            wk: Conv2d::proj(store, rng, &format!("{name}.wk"), c_key, dim),
            wv: Conv2d::proj(store, rng, &format!("{name}.wv"), c_key, dim),
            n,
            dim,
        })
    }

    /// Attention output at query resolution. `key_pos` must already be
    /// absolute positions in the key raster, `(2, h, w)` at the query
    /// resolution.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        query: Var,
        key: Var,
        key_pos: Var,
    ) -> Result<Var> {
        Ok(self.forward_with_weights(g, store, query, key, key_pos)?.0)
    }

    /// Same as [`LocalAttention::forward`] but also returns the softmax
    /// weight maps (one `(1, h, w)` tensor per patch offset), exposed
    /// for normalization checks.
    pub fn forward_with_weights(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        query: Var,
        key: Var,
        key_pos: Var,
    ) -> Result<(Var, Vec<Var>)> {
        let qsh = g.value(query).shape().to_vec();
        let psh = g.value(key_pos).shape().to_vec();
        if psh != vec![2, qsh[1], qsh[2]] {
            return Err(Error::shape(
                format!("(2, {}, {})", qsh[1], qsh[2]),
                format!("{psh:?}"),
                "local_attention key positions",
            ));
        }
        let q_proj = self.wq.forward(g, store, query);
        let k_proj = self.wk.forward(g, store, key);
        let v_proj = self.wv.forward(g, store, key);

        let n = self.n;
        let half = (n / 2) as f64;
        let scale = 1.0 / (self.dim as f64).sqrt();
        let (h, w) = (qsh[1], qsh[2]);

        // Per-offset sampled keys/values and their scores.
        let mut scores = Vec::with_capacity(n * n);
        let mut values = Vec::with_capacity(n * n);
        for dy in 0..n {
            for dx in 0..n {
                let mut off = Array3::<f64>::zeros((2, h, w));
                off.index_axis_mut(ndarray::Axis(0), 0)
                    .fill(dx as f64 - half);
                off.index_axis_mut(ndarray::Axis(0), 1)
                    .fill(dy as f64 - half);
                let off = g.constant(off.into_dyn());
                let pos = g.add(key_pos, off);
                let k_j = g.grid_sample(k_proj, pos);
                let v_j = g.grid_sample(v_proj, pos);
                let prod = g.mul(q_proj, k_j);
                let s_j = g.sum_channels(prod);
                let s_j = g.mul_scalar(s_j, scale);
                scores.push(s_j);
                values.push(v_j);
            }
        }

        // Numerically stable softmax over the patch axis.
        let mut max_s = scores[0];
        for &s in &scores[1..] {
            max_s = g.maximum(max_s, s);
        }
        let mut exps = Vec::with_capacity(scores.len());
        let mut total = None;
        for &s in &scores {
            let d = g.sub(s, max_s);
            let e = g.exp_op(d);
            exps.push(e);
            total = Some(match total {
                None => e,
                Some(t) => g.add(t, e),
            });
        }
        let total = total.unwrap();
        let mut out = None;
        let mut weights = Vec::with_capacity(exps.len());
        for (e, v) in exps.into_iter().zip(values) {
            let wgt = g.div(e, total);
            weights.push(wgt);
            let term = g.broadcast_mul_channel(wgt, v);
            out = Some(match out {
                None => term,
                Some(acc) => g.add(acc, term),
            });
        }
        Ok((out.unwrap(), weights))
    }
}

/// GFLA merge: `(1 - m) * q + m * attn` with a `(1, h, w)` mask.
pub fn masked_merge(g: &mut Graph, q: Var, attn: Var, mask: Var) -> Var {
    let inv = g.sub_from_scalar(1.0, mask);
    let keep = g.broadcast_mul_channel(inv, q);
    let take = g.broadcast_mul_channel(mask, attn);
    g.add(keep, take)
}

/// Merged multi-view attention: a learned 1x1 convolution over the
/// channel-concatenated per-view attention features, blended with the
/// query by the aggregation mask.
pub fn merge_multiview(
    g: &mut Graph,
    store: &ParamStore,
    merge_conv: &Conv2d,
    attn_views: &[Var],
    q: Var,
    agg_mask: Var,
) -> Result<Var> {
    if attn_views.is_empty() {
        return Err(Error::contract("merge_multiview: empty attention list"));
    }
    let first = g.value(attn_views[0]).shape().to_vec();
    for v in attn_views {
        if g.value(*v).shape() != first.as_slice() {
            return Err(Error::shape(
                format!("{first:?}"),
                format!("{:?}", g.value(*v).shape()),
                "merge_multiview",
            ));
        }
    }
    let stacked = g.concat_channels(attn_views);
    let merged = merge_conv.forward(g, store, stacked);
    Ok(masked_merge(g, q, merged, agg_mask))
}

/// Constant `(1, h, w)` mask node.
pub fn mask_constant(g: &mut Graph, h: usize, w: usize, value: f64) -> Var {
    g.constant(Arr::from_elem(ndarray::IxDyn(&[1, h, w]), value))
}

/// Clamp check helper used by tests and the runtime check suite.
pub fn weights_sum_to_one(g: &Graph, weights: &[Var], tol: f64) -> bool {
    if weights.is_empty() {
        return false;
    }
    let sh = g.value(weights[0]).shape().to_vec();
    let (h, w) = (sh[1], sh[2]);
    for y in 0..h {
        for x in 0..w {
            let mut total = 0.0;
            for wv in weights {
                let a = g.value(*wv).view().into_dimensionality::<Ix3>().unwrap();
                total += a[[0, y, x]];
            }
            if (total - 1.0).abs() > tol {
                return false;
            }
        }
    }
    true
}

//! The two network complexes: encoders, image generator, texture
//! generator, the three flow generators, and the shared-trunk
//! discriminator.
//!
//! Scale indexing: scale 0 is full resolution and scale `levels - 1`
//! the coarsest; feature pyramids expose their maps coarse to fine.
//! Both domains use the same per-scale channel widths so cross-domain
//! attention dot products line up. Flows exchanged within the image
//! domain use the relative representation; flows crossing domains are
//! absolute sample positions bounded to the key raster by a sigmoid.

use ndarray::Array3;

use crate::attention::{
    flow_to_absolute_graph, masked_merge, merge_multiview, Domain, LocalAttention,
};
use crate::autodiff::nn::{normal_init, seeded_rng, Conv2d, ParamStore, ResBlock};
use crate::autodiff::{Arr, Graph, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::geometry::{CoordinateAnnotation, FlowRepr, PoseHeatmap, PoseKind};
use rand_chacha::ChaCha8Rng;

/// One feature map with its provenance tags.
#[derive(Clone, Copy)]
pub struct FeatureMap {
    pub var: Var,
    pub domain: Domain,
    pub scale: usize,
}

/// Multi-resolution feature stack; `maps[s]` lives at scale `s`.
#[derive(Clone)]
pub struct FeaturePyramid {
    maps: Vec<FeatureMap>,
    pub domain: Domain,
}

impl FeaturePyramid {
    pub fn from_scale_maps(vars: Vec<Var>, domain: Domain) -> Self {
        let maps = vars
            .into_iter()
            .enumerate()
            .map(|(scale, var)| FeatureMap { var, domain, scale })
            .collect();
        FeaturePyramid { maps, domain }
    }

    pub fn at_scale(&self, s: usize) -> &FeatureMap {
        &self.maps[s]
    }

    pub fn num_scales(&self) -> usize {
        self.maps.len()
    }

    /// Levels ordered coarse to fine (strictly increasing resolution).
    pub fn coarse_to_fine(&self) -> impl Iterator<Item = &FeatureMap> {
        self.maps.iter().rev()
    }
}

/// Flow, merge mask and optional aggregation mask for one scale.
#[derive(Clone, Copy)]
pub struct FlowLevel {
    pub scale: usize,
    pub flow: Var,
    pub repr: FlowRepr,
    pub mask: Var,
    pub agg: Option<Var>,
}

/// Per-level flow/mask pairs aligned with the consuming decoder.
#[derive(Clone)]
pub struct FlowBundle {
    pub levels: Vec<FlowLevel>,
}

impl FlowBundle {
    pub fn at_scale(&self, s: usize) -> Result<&FlowLevel> {
        self.levels
            .iter()
            .find(|l| l.scale == s)
            .ok_or_else(|| Error::contract(format!("missing flow level for scale {s}")))
    }
}

/// Shared encoder shape: stem conv, stride-2 downs, one residual block
/// per scale.
pub struct Encoder {
    stem: Conv2d,
    downs: Vec<Conv2d>,
    res: Vec<ResBlock>,
}

impl Encoder {
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        channels: &[usize],
    ) -> Self {
        let stem = Conv2d::same(store, rng, &format!("{name}.stem"), cin, channels[0]);
        let mut downs = Vec::new();
        let mut res = Vec::new();
        for s in 0..channels.len() {
            if s > 0 {
                downs.push(Conv2d::down(
                    store,
                    rng,
                    &format!("{name}.down{s}"),
                    channels[s - 1],
                    channels[s],
                ));
            }
            res.push(ResBlock::new(
                store,
                rng,
                &format!("{name}.res{s}"),
                channels[s],
            ));
        }
        Encoder { stem, downs, res }
    }

    /// Features per scale, index = scale.
    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Vec<Var> {
        let mut out = Vec::with_capacity(self.res.len());
        let mut cur = self.stem.forward(g, store, x);
        cur = g.leaky_relu(cur, 0.2);
        cur = self.res[0].forward(g, store, cur);
        out.push(cur);
        for (i, down) in self.downs.iter().enumerate() {
            cur = down.forward(g, store, cur);
            cur = g.leaky_relu(cur, 0.2);
            cur = self.res[i + 1].forward(g, store, cur);
            out.push(cur);
        }
        out
    }
}

/// Repeated 2x pooling / nearest upsampling between power-of-two
/// related resolutions.
fn resample_var(g: &mut Graph, v: Var, from: (usize, usize), to: (usize, usize)) -> Var {
    let mut cur = v;
    let (mut h, mut w) = from;
    while h > to.0 {
        cur = g.avg_pool2(cur);
        h /= 2;
        w /= 2;
    }
    while h < to.0 {
        cur = g.upsample_nearest2(cur);
        h *= 2;
        w *= 2;
    }
    debug_assert_eq!((h, w), to, "resolutions not power-of-two related");
    cur
}

/// Pose heatmap as a graph constant.
pub fn heatmap_const(g: &mut Graph, p: &PoseHeatmap) -> Var {
    g.constant(p.channels.clone().into_dyn())
}

fn resize_nearest_chw(a: &Array3<f64>, th: usize, tw: usize) -> Array3<f64> {
    let (c, h, w) = a.dim();
    Array3::from_shape_fn((c, th, tw), |(ch, y, x)| {
        let sy = (((y as f64 + 0.5) * h as f64 / th as f64) - 0.5)
            .round()
            .clamp(0.0, (h - 1) as f64) as usize;
        let sx = (((x as f64 + 0.5) * w as f64 / tw as f64) - 0.5)
            .round()
            .clamp(0.0, (w - 1) as f64) as usize;
        a[[ch, sy, sx]]
    })
}

/// Coordinate annotation as `(3, Ht, Wt)` conditioning: normalized x,
/// normalized y, visibility.
fn coord_condition(c: &CoordinateAnnotation) -> Arr {
    let (th, tw, _) = c.coords.dim();
    let (ih, iw) = c.image_size;
    let mut out = Array3::<f64>::zeros((3, th, tw));
    for v in 0..th {
        for u in 0..tw {
            out[[0, v, u]] = c.coords[[v, u, 0]] / (iw.max(2) - 1) as f64;
            out[[1, v, u]] = c.coords[[v, u, 1]] / (ih.max(2) - 1) as f64;
            out[[2, v, u]] = c.visibility[[v, u]];
        }
    }
    out.into_dyn()
}

/// Per-axis scale constant mapping a sigmoid output onto `[0, dim-1]`.
fn bounds_const(g: &mut Graph, h: usize, w: usize, max_x: f64, max_y: f64) -> Var {
    let mut a = Array3::<f64>::zeros((2, h, w));
    a.index_axis_mut(ndarray::Axis(0), 0).fill(max_x);
    a.index_axis_mut(ndarray::Axis(0), 1).fill(max_y);
    g.constant(a.into_dyn())
}

/// Source-to-target flow generator (image domain, relative flows).
pub struct FlowGenSrcTgt {
    enc: Encoder,
    ups: Vec<Conv2d>,
    flow_heads: Vec<Conv2d>,
    mask_heads: Vec<Conv2d>,
}

impl FlowGenSrcTgt {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Self {
        let name = "gen.flow_st";
        let ch = &cfg.channels;
        let enc = Encoder::new(store, rng, name, 3 + 2 * cfg.keypoints, ch);
        let mut ups = Vec::new();
        for s in 0..cfg.levels - 1 {
            ups.push(Conv2d::same(
                store,
                rng,
                &format!("{name}.up{s}"),
                ch[s + 1] + ch[s],
                ch[s],
            ));
        }
        let mut flow_heads = Vec::new();
        let mut mask_heads = Vec::new();
        for &s in &cfg.attn_scales() {
            flow_heads.push(Conv2d::same(
                store,
                rng,
                &format!("{name}.flow{s}"),
                ch[s],
                2,
            ));
            mask_heads.push(Conv2d::same(
                store,
                rng,
                &format!("{name}.mask{s}"),
                ch[s],
                1,
            ));
        }
        FlowGenSrcTgt {
            enc,
            ups,
            flow_heads,
            mask_heads,
        }
    }

    fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        cfg: &ModelConfig,
        x_s: Var,
        p_s: Var,
        p_h: Var,
    ) -> FlowBundle {
        let input = g.concat_channels(&[x_s, p_s, p_h]);
        let feats = self.enc.forward(g, store, input);
        let attn_scales = cfg.attn_scales();
        let mut levels = Vec::new();
        let mut state = feats[cfg.coarsest()];
        let mut emit = |g: &mut Graph, state: Var, s: usize| {
            if let Some(idx) = attn_scales.iter().position(|&a| a == s) {
                let flow = self.flow_heads[idx].forward(g, store, state);
                let mask_raw = self.mask_heads[idx].forward(g, store, state);
                let mask = g.sigmoid(mask_raw);
                levels.push(FlowLevel {
                    scale: s,
                    flow,
                    repr: FlowRepr::Relative,
                    mask,
                    agg: None,
                });
            }
        };
        emit(g, state, cfg.coarsest());
        for s in (0..cfg.levels - 1).rev() {
            let up = g.upsample_nearest2(state);
            let cat = g.concat_channels(&[up, feats[s]]);
            let conv = self.ups[s].forward(g, store, cat);
            state = g.leaky_relu(conv, 0.2);
            emit(g, state, s);
        }
        FlowBundle { levels }
    }
}

/// Texture-to-image flow generator: the coarsest attention level is
/// driven by the hallucination pose alone; finer levels fold in the
/// same-scale texture feature after that first output.
pub struct FlowGenTexImg {
    pose_enc: Encoder,
    combines: Vec<Conv2d>,
    flow_heads: Vec<Conv2d>,
    mask_heads: Vec<Conv2d>,
}

impl FlowGenTexImg {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Self {
        let name = "gen.flow_ti";
        let ch = &cfg.channels;
        let pose_enc = Encoder::new(store, rng, name, cfg.keypoints, ch);
        let attn = cfg.attn_scales();
        let mut combines = Vec::new();
        let mut flow_heads = Vec::new();
        let mut mask_heads = Vec::new();
        for (i, &s) in attn.iter().enumerate() {
            if i > 0 {
                // upsampled state + same-scale pose feature + texture feature
                combines.push(Conv2d::same(
                    store,
                    rng,
                    &format!("{name}.comb{s}"),
                    ch[s + 1] + ch[s] + ch[s],
                    ch[s],
                ));
            }
            flow_heads.push(Conv2d::same(store, rng, &format!("{name}.flow{s}"), ch[s], 2));
            mask_heads.push(Conv2d::same(store, rng, &format!("{name}.mask{s}"), ch[s], 1));
        }
        FlowGenTexImg {
            pose_enc,
            combines,
            flow_heads,
            mask_heads,
        }
    }

    fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        cfg: &ModelConfig,
        phi_tex: &FeaturePyramid,
        p_h: Var,
    ) -> Result<FlowBundle> {
        if phi_tex.domain != Domain::Texture {
            return Err(Error::contract(
                "flow_tex_img expects a texture-domain pyramid",
            ));
        }
        let pose_feats = self.pose_enc.forward(g, store, p_h);
        let attn = cfg.attn_scales();
        let mut levels = Vec::new();
        let mut state = pose_feats[attn[0]];
        for (i, &s) in attn.iter().enumerate() {
            if i > 0 {
                let up = g.upsample_nearest2(state);
                let tex = resample_var(
                    g,
                    phi_tex.at_scale(s).var,
                    cfg.tex_dims(s),
                    cfg.img_dims(s),
                );
                let cat = g.concat_channels(&[up, pose_feats[s], tex]);
                let conv = self.combines[i - 1].forward(g, store, cat);
                state = g.leaky_relu(conv, 0.2);
            }
            let (ih, iw) = cfg.img_dims(s);
            let (th, tw) = cfg.tex_dims(s);
            let raw = self.flow_heads[i].forward(g, store, state);
            let sig = g.sigmoid(raw);
            let bounds = bounds_const(g, ih, iw, (tw - 1) as f64, (th - 1) as f64);
            let flow = g.mul(sig, bounds);
            let mask_raw = self.mask_heads[i].forward(g, store, state);
            let mask = g.sigmoid(mask_raw);
            levels.push(FlowLevel {
                scale: s,
                flow,
                repr: FlowRepr::Absolute,
                mask,
                agg: None,
            });
        }
        Ok(FlowBundle { levels })
    }
}

/// Image-to-texture flow generator: consumes the hallucination pose in
/// both domains plus the coordinate annotation, and emits flows, merge
/// masks and aggregation masks on the texture grid.
pub struct FlowGenImgTex {
    enc: Encoder,
    ups: Vec<Conv2d>,
    flow_heads: Vec<Conv2d>,
    mask_heads: Vec<Conv2d>,
    agg_heads: Vec<Conv2d>,
}

impl FlowGenImgTex {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Self {
        let name = "gen.flow_it";
        let ch = &cfg.channels;
        let enc = Encoder::new(store, rng, name, 2 * cfg.keypoints + 3, ch);
        let mut ups = Vec::new();
        for s in 0..cfg.levels - 1 {
            ups.push(Conv2d::same(
                store,
                rng,
                &format!("{name}.up{s}"),
                ch[s + 1] + ch[s],
                ch[s],
            ));
        }
        let mut flow_heads = Vec::new();
        let mut mask_heads = Vec::new();
        let mut agg_heads = Vec::new();
        for &s in &cfg.attn_scales() {
            flow_heads.push(Conv2d::same(store, rng, &format!("{name}.flow{s}"), ch[s], 2));
            mask_heads.push(Conv2d::same(store, rng, &format!("{name}.mask{s}"), ch[s], 1));
            agg_heads.push(Conv2d::same(store, rng, &format!("{name}.agg{s}"), ch[s], 1));
        }
        FlowGenImgTex {
            enc,
            ups,
            flow_heads,
            mask_heads,
            agg_heads,
        }
    }

    fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        cfg: &ModelConfig,
        p_h: &PoseHeatmap,
        b_h: &PoseHeatmap,
        c_h: &CoordinateAnnotation,
    ) -> Result<FlowBundle> {
        if b_h.kind != PoseKind::TexturePose {
            return Err(Error::contract("flow_img_tex expects a texture pose"));
        }
        let p_resized = resize_nearest_chw(&p_h.channels, cfg.tex_h, cfg.tex_w);
        let b = g.constant(b_h.channels.clone().into_dyn());
        let p = g.constant(p_resized.into_dyn());
        let c = g.constant(coord_condition(c_h));
        let input = g.concat_channels(&[b, p, c]);
        let feats = self.enc.forward(g, store, input);
        let attn_scales = cfg.attn_scales();
        let mut levels = Vec::new();
        let mut state = feats[cfg.coarsest()];
        let mut emit = |g: &mut Graph, state: Var, s: usize| {
            if let Some(idx) = attn_scales.iter().position(|&a| a == s) {
                let (ih, iw) = cfg.img_dims(s);
                let (th, tw) = cfg.tex_dims(s);
                let raw = self.flow_heads[idx].forward(g, store, state);
                let sig = g.sigmoid(raw);
                let bounds = bounds_const(g, th, tw, (iw - 1) as f64, (ih - 1) as f64);
                let flow = g.mul(sig, bounds);
                let mask_raw = self.mask_heads[idx].forward(g, store, state);
                let mask = g.sigmoid(mask_raw);
                let agg_raw = self.agg_heads[idx].forward(g, store, state);
                let agg = g.sigmoid(agg_raw);
                levels.push(FlowLevel {
                    scale: s,
                    flow,
                    repr: FlowRepr::Absolute,
                    mask,
                    agg: Some(agg),
                });
            }
        };
        emit(g, state, cfg.coarsest());
        for s in (0..cfg.levels - 1).rev() {
            let up = g.upsample_nearest2(state);
            let cat = g.concat_channels(&[up, feats[s]]);
            let conv = self.ups[s].forward(g, store, cat);
            state = g.leaky_relu(conv, 0.2);
            emit(g, state, s);
        }
        Ok(FlowBundle { levels })
    }
}

/// Image generator: pose-seeded decoder with source and texture local
/// attention at the finest scales.
pub struct ImageGenerator {
    pose_enc: Encoder,
    ups: Vec<Conv2d>,
    res: Vec<ResBlock>,
    src_attn: Vec<LocalAttention>,
    tex_attn: Vec<LocalAttention>,
    out_conv: Conv2d,
}

impl ImageGenerator {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Result<Self> {
        let name = "gen.img";
        let ch = &cfg.channels;
        let pose_enc = Encoder::new(store, rng, name, cfg.keypoints, ch);
        let mut ups = Vec::new();
        let mut res = Vec::new();
        for s in 0..cfg.levels - 1 {
            ups.push(Conv2d::same(
                store,
                rng,
                &format!("{name}.up{s}"),
                ch[s + 1],
                ch[s],
            ));
            res.push(ResBlock::new(store, rng, &format!("{name}.dres{s}"), ch[s]));
        }
        let mut src_attn = Vec::new();
        let mut tex_attn = Vec::new();
        for &s in &cfg.attn_scales() {
            src_attn.push(LocalAttention::new(
                store,
                rng,
                &format!("{name}.srcattn{s}"),
                ch[s],
                ch[s],
                ch[s],
                cfg.patch_size,
            )?);
            tex_attn.push(LocalAttention::new(
                store,
                rng,
                &format!("{name}.texattn{s}"),
                ch[s],
                ch[s],
                ch[s],
                cfg.patch_size,
            )?);
        }
        let out_conv = Conv2d::same(store, rng, &format!("{name}.out"), ch[0], 3);
        Ok(ImageGenerator {
            pose_enc,
            ups,
            res,
            src_attn,
            tex_attn,
            out_conv,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        cfg: &ModelConfig,
        p_target: Var,
        phi_src: &FeaturePyramid,
        phi_tex: &FeaturePyramid,
        flows_st: &FlowBundle,
        flows_ti: &FlowBundle,
    ) -> Result<(Var, FeaturePyramid)> {
        let attn_scales = cfg.attn_scales();
        let pose_feats = self.pose_enc.forward(g, store, p_target);
        let mut pyramid = vec![Var(0); cfg.levels];
        let mut state = pose_feats[cfg.coarsest()];
        pyramid[cfg.coarsest()] = state;
        for s in (0..cfg.levels - 1).rev() {
            let up = g.upsample_nearest2(state);
            let conv = self.ups[s].forward(g, store, up);
            state = g.leaky_relu(conv, 0.2);
            if let Some(idx) = attn_scales.iter().position(|&a| a == s) {
                // source local attention
                let lvl = flows_st.at_scale(s)?;
                let key_pos = flow_to_absolute_graph(g, lvl.flow, lvl.repr);
                let attn =
                    self.src_attn[idx].forward(g, store, state, phi_src.at_scale(s).var, key_pos)?;
                state = masked_merge(g, state, attn, lvl.mask);
                // texture local attention
                let lvl = flows_ti.at_scale(s)?;
                let key_pos = flow_to_absolute_graph(g, lvl.flow, lvl.repr);
                let attn =
                    self.tex_attn[idx].forward(g, store, state, phi_tex.at_scale(s).var, key_pos)?;
                let mask = if cfg.ablation.tex_to_image_live() {
                    lvl.mask
                } else {
                    let sh = g.value(lvl.mask).shape().to_vec();
                    g.constant(Arr::zeros(ndarray::IxDyn(&sh)))
                };
                state = masked_merge(g, state, attn, mask);
            }
            state = self.res[s].forward(g, store, state);
            pyramid[s] = state;
        }
        let out = self.out_conv.forward(g, store, state);
        let image = g.sigmoid(out);
        Ok((
            image,
            FeaturePyramid::from_scale_maps(pyramid, Domain::Image),
        ))
    }
}

/// Texture generator: decodes a learned constant, attending to every
/// hallucination view's image features and merging them per Eq. 7/8.
pub struct TextureGenerator {
    pub constant: crate::autodiff::nn::ParamId,
    res_coarse: ResBlock,
    ups: Vec<Conv2d>,
    res: Vec<ResBlock>,
    img_attn: Vec<LocalAttention>,
    merges: Vec<Conv2d>,
    out_conv: Conv2d,
}

impl TextureGenerator {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Result<Self> {
        let name = "gen.tex";
        let ch = &cfg.channels;
        let (cth, ctw) = cfg.tex_dims(cfg.coarsest());
        let constant = store.add(
            &format!("{name}.constant"),
            normal_init(rng, &[ch[cfg.coarsest()], cth, ctw], 0.02),
        );
        let res_coarse = ResBlock::new(store, rng, &format!("{name}.resc"), ch[cfg.coarsest()]);
        let mut ups = Vec::new();
        let mut res = Vec::new();
        for s in 0..cfg.levels - 1 {
            ups.push(Conv2d::same(
                store,
                rng,
                &format!("{name}.up{s}"),
                ch[s + 1],
                ch[s],
            ));
            res.push(ResBlock::new(store, rng, &format!("{name}.dres{s}"), ch[s]));
        }
        let mut img_attn = Vec::new();
        let mut merges = Vec::new();
        for &s in &cfg.attn_scales() {
            img_attn.push(LocalAttention::new(
                store,
                rng,
                &format!("{name}.imgattn{s}"),
                ch[s],
                ch[s],
                ch[s],
                cfg.patch_size,
            )?);
            merges.push(Conv2d::proj(
                store,
                rng,
                &format!("{name}.merge{s}"),
                cfg.n_h * ch[s],
                ch[s],
            ));
        }
        let out_conv = Conv2d::same(store, rng, &format!("{name}.out"), ch[0], 3);
        Ok(TextureGenerator {
            constant,
            res_coarse,
            ups,
            res,
            img_attn,
            merges,
            out_conv,
        })
    }

    fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        cfg: &ModelConfig,
        phi_img_views: &[FeaturePyramid],
        flows_it: &[FlowBundle],
    ) -> Result<(Var, FeaturePyramid)> {
        if phi_img_views.is_empty() {
            return Err(Error::contract("texture_generator: empty view list"));
        }
        if phi_img_views.len() != flows_it.len() {
            return Err(Error::contract(
                "texture_generator: views and flow bundles must align",
            ));
        }
        if phi_img_views.len() != cfg.n_h {
            return Err(Error::contract(format!(
                "texture_generator built for n_h={}, got {} views",
                cfg.n_h,
                phi_img_views.len()
            )));
        }
        let attn_scales = cfg.attn_scales();
        let mut pyramid = vec![Var(0); cfg.levels];
        let const_var = g.param(store, self.constant);
        let mut state = self.res_coarse.forward(g, store, const_var);
        pyramid[cfg.coarsest()] = state;
        for s in (0..cfg.levels - 1).rev() {
            let up = g.upsample_nearest2(state);
            let conv = self.ups[s].forward(g, store, up);
            state = g.leaky_relu(conv, 0.2);
            if let Some(idx) = attn_scales.iter().position(|&a| a == s) {
                let mut gated = Vec::with_capacity(phi_img_views.len());
                let mut agg_sum: Option<Var> = None;
                for (view, bundle) in phi_img_views.iter().zip(flows_it) {
                    let lvl = bundle.at_scale(s)?;
                    let attn = self.img_attn[idx].forward(
                        g,
                        store,
                        state,
                        view.at_scale(s).var,
                        lvl.flow,
                    )?;
                    // per-view merge mask gates its attention feature
                    gated.push(g.broadcast_mul_channel(lvl.mask, attn));
                    let a = lvl.agg.ok_or_else(|| {
                        Error::contract("image-to-texture bundle missing aggregation mask")
                    })?;
                    agg_sum = Some(match agg_sum {
                        None => a,
                        Some(acc) => g.add(acc, a),
                    });
                }
                let agg = {
                    let sum = agg_sum.unwrap();
                    let mean = g.mul_scalar(sum, 1.0 / phi_img_views.len() as f64);
                    if cfg.ablation.image_to_tex_live() {
                        mean
                    } else {
                        let sh = g.value(mean).shape().to_vec();
                        g.constant(Arr::zeros(ndarray::IxDyn(&sh)))
                    }
                };
                state = merge_multiview(g, store, &self.merges[idx], &gated, state, agg)?;
            }
            state = self.res[s].forward(g, store, state);
            pyramid[s] = state;
        }
        let out = self.out_conv.forward(g, store, state);
        let texture = g.sigmoid(out);
        Ok((
            texture,
            FeaturePyramid::from_scale_maps(pyramid, Domain::Texture),
        ))
    }
}

/// Patch discriminator with a shared trunk and per-domain input heads.
pub struct Discriminator {
    head_img: Conv2d,
    head_tex: Conv2d,
    trunk: Vec<Conv2d>,
    out: Conv2d,
}

impl Discriminator {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Self {
        let name = "disc";
        let ch = &cfg.channels;
        let head_img = Conv2d::same(store, rng, &format!("{name}.head_img"), 3, ch[0]);
        let head_tex = Conv2d::same(store, rng, &format!("{name}.head_tex"), 3, ch[0]);
        let mut trunk = Vec::new();
        for s in 1..cfg.levels {
            trunk.push(Conv2d::down(
                store,
                rng,
                &format!("{name}.down{s}"),
                ch[s - 1],
                ch[s],
            ));
        }
        let out = Conv2d::same(store, rng, &format!("{name}.out"), ch[cfg.levels - 1], 1);
        Discriminator {
            head_img,
            head_tex,
            trunk,
            out,
        }
    }

    fn trunk_forward(&self, g: &mut Graph, store: &ParamStore, mut cur: Var) -> Var {
        cur = g.leaky_relu(cur, 0.2);
        for conv in &self.trunk {
            cur = conv.forward(g, store, cur);
            cur = g.leaky_relu(cur, 0.2);
        }
        self.out.forward(g, store, cur)
    }

    pub fn forward_image(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let h = self.head_img.forward(g, store, x);
        self.trunk_forward(g, store, h)
    }

    pub fn forward_texture(&self, g: &mut Graph, store: &ParamStore, t: Var) -> Var {
        let h = self.head_tex.forward(g, store, t);
        self.trunk_forward(g, store, h)
    }
}

/// Output of one hallucination view.
pub struct HalluView {
    pub image: Var,
    pub pyramid: FeaturePyramid,
    pub flows_st: FlowBundle,
    pub flows_ti: FlowBundle,
}

/// Output of the texture network complex.
pub struct TexnetOutput {
    pub texture: Var,
    pub pyramid: FeaturePyramid,
    pub flows_it: Vec<FlowBundle>,
}

/// The assembled dual-domain model.
pub struct Model {
    pub cfg: ModelConfig,
    pub src_encoder: Encoder,
    pub flow_st: FlowGenSrcTgt,
    pub flow_ti: FlowGenTexImg,
    pub flow_it: FlowGenImgTex,
    pub image_gen: ImageGenerator,
    pub tex_gen: TextureGenerator,
    pub disc: Discriminator,
    pub extractor: crate::losses::PerceptualExtractor,
}

impl Model {
    /// Build all parameters in a fixed order from one seed.
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seeded_rng(seed);
        let src_encoder = Encoder::new(store, &mut rng, "gen.src_enc", 3, &cfg.channels);
        let flow_st = FlowGenSrcTgt::new(store, &mut rng, cfg);
        let flow_ti = FlowGenTexImg::new(store, &mut rng, cfg);
        let flow_it = FlowGenImgTex::new(store, &mut rng, cfg);
        let image_gen = ImageGenerator::new(store, &mut rng, cfg)?;
        let tex_gen = TextureGenerator::new(store, &mut rng, cfg)?;
        let disc = Discriminator::new(store, &mut rng, cfg);
        let extractor =
            crate::losses::PerceptualExtractor::seeded(store, seed ^ 0x5eed, &cfg.extractor_channels);
        Ok(Model {
            cfg: cfg.clone(),
            src_encoder,
            flow_st,
            flow_ti,
            flow_it,
            image_gen,
            tex_gen,
            disc,
            extractor,
        })
    }

    /// Source image features used as keys by the source local attention.
    pub fn encode_source(&self, g: &mut Graph, store: &ParamStore, x_s: Var) -> FeaturePyramid {
        let feats = self.src_encoder.forward(g, store, x_s);
        FeaturePyramid::from_scale_maps(feats, Domain::Image)
    }

    pub fn flow_src_tgt(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x_s: Var,
        p_s: &PoseHeatmap,
        p_h: &PoseHeatmap,
    ) -> Result<FlowBundle> {
        if p_s.kind != PoseKind::ImagePose || p_h.kind != PoseKind::ImagePose {
            return Err(Error::contract("flow_src_tgt expects image poses"));
        }
        let p_s = heatmap_const(g, p_s);
        let p_h = heatmap_const(g, p_h);
        Ok(self.flow_st.forward(g, store, &self.cfg, x_s, p_s, p_h))
    }

    pub fn flow_tex_img(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        phi_tex: &FeaturePyramid,
        p_h: &PoseHeatmap,
    ) -> Result<FlowBundle> {
        let p_h = heatmap_const(g, p_h);
        self.flow_ti.forward(g, store, &self.cfg, phi_tex, p_h)
    }

    pub fn flow_img_tex(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        p_h: &PoseHeatmap,
        b_h: &PoseHeatmap,
        c_h: &CoordinateAnnotation,
    ) -> Result<FlowBundle> {
        self.flow_it.forward(g, store, &self.cfg, p_h, b_h, c_h)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn image_generator(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        p_target: &PoseHeatmap,
        phi_src: &FeaturePyramid,
        phi_tex: &FeaturePyramid,
        flows_st: &FlowBundle,
        flows_ti: &FlowBundle,
    ) -> Result<(Var, FeaturePyramid)> {
        let p = heatmap_const(g, p_target);
        self.image_gen
            .forward(g, store, &self.cfg, p, phi_src, phi_tex, flows_st, flows_ti)
    }

    pub fn texture_generator(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        phi_img_views: &[FeaturePyramid],
        flows_it: &[FlowBundle],
    ) -> Result<(Var, FeaturePyramid)> {
        self.tex_gen
            .forward(g, store, &self.cfg, phi_img_views, flows_it)
    }

    /// All-zero texture pyramid used as the step-I stand-in before any
    /// texture feature exists.
    pub fn zero_texture_pyramid(&self, g: &mut Graph) -> FeaturePyramid {
        let mut vars = Vec::with_capacity(self.cfg.levels);
        for s in 0..self.cfg.levels {
            let (th, tw) = self.cfg.tex_dims(s);
            vars.push(g.constant(Arr::zeros(ndarray::IxDyn(&[self.cfg.channels[s], th, tw]))));
        }
        FeaturePyramid::from_scale_maps(vars, Domain::Texture)
    }

    /// Hallucination complex: encode the source once, then per pose run
    /// the two flow generators and the image generator against the
    /// provided texture pyramid.
    pub fn hallunet_forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x_s: Var,
        p_s: &PoseHeatmap,
        poses: &[PoseHeatmap],
        phi_tex: &FeaturePyramid,
    ) -> Result<Vec<HalluView>> {
        let phi_src = self.encode_source(g, store, x_s);
        let mut out = Vec::with_capacity(poses.len());
        for p_h in poses {
            let flows_st = self.flow_src_tgt(g, store, x_s, p_s, p_h)?;
            let flows_ti = self.flow_tex_img(g, store, phi_tex, p_h)?;
            let (image, pyramid) =
                self.image_generator(g, store, p_h, &phi_src, phi_tex, &flows_st, &flows_ti)?;
            out.push(HalluView {
                image,
                pyramid,
                flows_st,
                flows_ti,
            });
        }
        Ok(out)
    }

    /// Texture complex: one image-to-texture flow bundle per view, then
    /// a single texture decode referring to all views.
    pub fn texnet_forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        poses: &[PoseHeatmap],
        tex_poses: &[PoseHeatmap],
        coords: &[CoordinateAnnotation],
        phi_img_views: &[FeaturePyramid],
    ) -> Result<TexnetOutput> {
        if poses.len() != tex_poses.len()
            || poses.len() != coords.len()
            || poses.len() != phi_img_views.len()
        {
            return Err(Error::contract("texnet_forward: input lists must align"));
        }
        let mut flows_it = Vec::with_capacity(poses.len());
        for i in 0..poses.len() {
            flows_it.push(self.flow_img_tex(g, store, &poses[i], &tex_poses[i], &coords[i])?);
        }
        let (texture, pyramid) = self.texture_generator(g, store, phi_img_views, &flows_it)?;
        Ok(TexnetOutput {
            texture,
            pyramid,
            flows_it,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn micro_cfg() -> ModelConfig {
        ModelConfig {
            image_h: 8,
            image_w: 8,
            tex_h: 8,
            tex_w: 8,
            levels: 2,
            channels: vec![3, 4],
            attn_levels: 2,
            patch_size: 3,
            keypoints: 2,
            heatmap_sigma: 1.0,
            n_h: 2,
            ablation: Ablation::Full,
            reg_neighborhood: 5,
            reg_tv_surrogate: true,
            detach_texture_feature: false,
            hallu_adversarial: true,
            texture_adversarial: true,
            extractor_channels: vec![3, 4],
        }
    }

    use crate::config::Ablation;

    fn rand_image(cfg: &ModelConfig, seed: u64) -> Arr {
        let mut rng = seeded_rng(seed);
        normal_init(&mut rng, &[3, cfg.image_h, cfg.image_w], 0.3).mapv(|v| (v + 0.5).clamp(0.0, 1.0))
    }

    fn rand_pose(cfg: &ModelConfig, seed: u64, kind: PoseKind) -> PoseHeatmap {
        let mut rng = seeded_rng(seed);
        let (h, w) = match kind {
            PoseKind::ImagePose => (cfg.image_h, cfg.image_w),
            PoseKind::TexturePose => (cfg.tex_h, cfg.tex_w),
        };
        let channels = normal_init(&mut rng, &[cfg.keypoints, h, w], 1.0)
            .mapv(|v| v.abs().min(1.0))
            .into_dimensionality::<ndarray::Ix3>()
            .unwrap();
        PoseHeatmap { channels, kind }
    }

    fn rand_coord(cfg: &ModelConfig, seed: u64) -> CoordinateAnnotation {
        let mut rng = seeded_rng(seed);
        let mut coords = Array3::<f64>::zeros((cfg.tex_h, cfg.tex_w, 2));
        let mut vis = Array2::<f64>::zeros((cfg.tex_h, cfg.tex_w));
        for v in 0..cfg.tex_h {
            for u in 0..cfg.tex_w {
                coords[[v, u, 0]] =
                    crate::autodiff::nn::uniform(&mut rng, 0.0, (cfg.image_w - 1) as f64);
                coords[[v, u, 1]] =
                    crate::autodiff::nn::uniform(&mut rng, 0.0, (cfg.image_h - 1) as f64);
                vis[[v, u]] = if crate::autodiff::nn::uniform(&mut rng, 0.0, 1.0) < 0.8 {
                    1.0
                } else {
                    0.0
                };
            }
        }
        CoordinateAnnotation::new(coords, vis, (cfg.image_h, cfg.image_w)).unwrap()
    }

    struct Fixture {
        store: ParamStore,
        model: Model,
        cfg: ModelConfig,
    }

    fn fixture(seed: u64) -> Fixture {
        let cfg = micro_cfg();
        let mut store = ParamStore::new();
        let model = Model::new(&mut store, &cfg, seed).unwrap();
        Fixture { store, model, cfg }
    }

    #[test]
    fn encoder_shapes_and_determinism() {
        let f = fixture(1);
        let x = rand_image(&f.cfg, 2);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let pyr = f.model.encode_source(&mut g, &f.store, xv);
        for s in 0..f.cfg.levels {
            let sh = g.value(pyr.at_scale(s).var).shape().to_vec();
            let (h, w) = f.cfg.img_dims(s);
            assert_eq!(sh, vec![f.cfg.channels[s], h, w]);
        }
        // increasing resolution coarse to fine
        let res: Vec<usize> = pyr
            .coarse_to_fine()
            .map(|m| g.value(m.var).shape()[1])
            .collect();
        assert!(res.windows(2).all(|p| p[0] < p[1]));

        // bit-identical rerun
        let mut g2 = Graph::new();
        let xv2 = g2.constant(x);
        let pyr2 = f.model.encode_source(&mut g2, &f.store, xv2);
        for s in 0..f.cfg.levels {
            assert_eq!(g.value(pyr.at_scale(s).var), g2.value(pyr2.at_scale(s).var));
        }

        // zero image stays finite
        let mut g3 = Graph::new();
        let zero = g3.constant(Arr::zeros(ndarray::IxDyn(&[3, 8, 8])));
        let pz = f.model.encode_source(&mut g3, &f.store, zero);
        assert!(g3.value(pz.at_scale(0).var).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn flow_src_tgt_contract() {
        let f = fixture(3);
        let mut g = Graph::new();
        let x = g.constant(rand_image(&f.cfg, 4));
        let p_s = rand_pose(&f.cfg, 5, PoseKind::ImagePose);
        let p_h = rand_pose(&f.cfg, 6, PoseKind::ImagePose);
        let bundle = f.model.flow_src_tgt(&mut g, &f.store, x, &p_s, &p_h).unwrap();
        assert_eq!(bundle.levels.len(), f.cfg.attn_levels);
        for lvl in &bundle.levels {
            assert_eq!(lvl.repr, FlowRepr::Relative);
            assert!(g.value(lvl.mask).iter().all(|&v| (0.0..=1.0).contains(&v)));
            let (h, w) = f.cfg.img_dims(lvl.scale);
            assert_eq!(g.value(lvl.flow).shape(), &[2, h, w]);
        }
        // texture pose rejected
        let b = rand_pose(&f.cfg, 7, PoseKind::TexturePose);
        assert!(f.model.flow_src_tgt(&mut g, &f.store, x, &p_s, &b).is_err());
    }

    #[test]
    fn flow_tex_img_bounds_and_wiring() {
        let f = fixture(8);
        let p_h = rand_pose(&f.cfg, 9, PoseKind::ImagePose);

        let run = |tex_seed: u64| -> Vec<Arr> {
            let mut g = Graph::new();
            let mut vars = Vec::new();
            for s in 0..f.cfg.levels {
                let (th, tw) = f.cfg.tex_dims(s);
                let mut rng = seeded_rng(tex_seed + s as u64);
                vars.push(g.constant(normal_init(&mut rng, &[f.cfg.channels[s], th, tw], 1.0)));
            }
            let pyr = FeaturePyramid::from_scale_maps(vars, Domain::Texture);
            let bundle = f.model.flow_tex_img(&mut g, &f.store, &pyr, &p_h).unwrap();
            assert_eq!(bundle.levels[0].repr, FlowRepr::Absolute);
            for lvl in &bundle.levels {
                let (th, tw) = f.cfg.tex_dims(lvl.scale);
                for (i, &v) in g.value(lvl.flow).iter().enumerate() {
                    let max = if i < g.value(lvl.flow).len() / 2 {
                        (tw - 1) as f64
                    } else {
                        (th - 1) as f64
                    };
                    assert!((0.0..=max).contains(&v), "flow out of texture bounds");
                }
            }
            bundle
                .levels
                .iter()
                .map(|l| g.value(l.flow).clone())
                .collect()
        };
        let a = run(100);
        let b = run(200);
        // coarsest attention level depends on the pose alone
        assert_eq!(a[0], b[0], "lowest level must ignore texture features");
        // finer level consumes texture features
        assert_ne!(a[1], b[1], "upper level must react to texture features");

        // image-domain pyramid rejected
        let mut g = Graph::new();
        let vars: Vec<Var> = (0..f.cfg.levels)
            .map(|s| {
                let (th, tw) = f.cfg.tex_dims(s);
                g.constant(Arr::zeros(ndarray::IxDyn(&[f.cfg.channels[s], th, tw])))
            })
            .collect();
        let wrong = FeaturePyramid::from_scale_maps(vars, Domain::Image);
        assert!(f.model.flow_tex_img(&mut g, &f.store, &wrong, &p_h).is_err());
    }

    #[test]
    fn flow_img_tex_masks_and_determinism() {
        let f = fixture(10);
        let p_h = rand_pose(&f.cfg, 11, PoseKind::ImagePose);
        let b_h = rand_pose(&f.cfg, 12, PoseKind::TexturePose);
        let c_h = rand_coord(&f.cfg, 13);
        let mut g = Graph::new();
        let bundle = f
            .model
            .flow_img_tex(&mut g, &f.store, &p_h, &b_h, &c_h)
            .unwrap();
        for lvl in &bundle.levels {
            let agg = lvl.agg.expect("aggregation mask present");
            assert!(g.value(agg).iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert_eq!(lvl.repr, FlowRepr::Absolute);
        }
        // image pose in the texture slot is rejected
        assert!(f
            .model
            .flow_img_tex(&mut g, &f.store, &p_h, &p_h, &c_h)
            .is_err());

        // deterministic per seed
        let mut g2 = Graph::new();
        let bundle2 = f
            .model
            .flow_img_tex(&mut g2, &f.store, &p_h, &b_h, &c_h)
            .unwrap();
        assert_eq!(g.value(bundle.levels[0].flow), g2.value(bundle2.levels[0].flow));
    }

    #[test]
    fn image_generator_shape_and_mask_ablation() {
        let f = fixture(14);
        let x = rand_image(&f.cfg, 15);
        let p_s = rand_pose(&f.cfg, 16, PoseKind::ImagePose);
        let p_h = rand_pose(&f.cfg, 17, PoseKind::ImagePose);

        let run = |tex_seed: u64, ablation: Ablation| -> Arr {
            let mut cfg = f.cfg.clone();
            cfg.ablation = ablation;
            let mut store = ParamStore::new();
            let model = Model::new(&mut store, &cfg, 14).unwrap();
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let mut vars = Vec::new();
            for s in 0..cfg.levels {
                let (th, tw) = cfg.tex_dims(s);
                let mut rng = seeded_rng(tex_seed + s as u64);
                vars.push(g.constant(normal_init(&mut rng, &[cfg.channels[s], th, tw], 1.0)));
            }
            let phi_tex = FeaturePyramid::from_scale_maps(vars, Domain::Texture);
            let views = model
                .hallunet_forward(&mut g, &store, xv, &p_s, std::slice::from_ref(&p_h), &phi_tex)
                .unwrap();
            let img = g.value(views[0].image).clone();
            assert_eq!(img.shape(), &[3, cfg.image_h, cfg.image_w]);
            assert!(img.iter().all(|v| v.is_finite()));
            img
        };
        // with the texture path masked off, the image must not depend on
        // the texture features (flows still see them, masks cut the path)
        let i1 = run(500, Ablation::Independent);
        let i2 = run(999, Ablation::Independent);
        assert_eq!(i1, i2, "masked texture path must not leak");
        // with the path live it must leak
        let j1 = run(500, Ablation::Full);
        let j2 = run(999, Ablation::Full);
        assert_ne!(j1, j2, "live texture path must matter");
    }

    #[test]
    fn hallunet_arity_zero_texture_and_composition() {
        let f = fixture(18);
        let x = rand_image(&f.cfg, 19);
        let p_s = rand_pose(&f.cfg, 20, PoseKind::ImagePose);
        let poses: Vec<PoseHeatmap> = (0..3)
            .map(|i| rand_pose(&f.cfg, 21 + i, PoseKind::ImagePose))
            .collect();
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let phi_tex = f.model.zero_texture_pyramid(&mut g);
        let views = f
            .model
            .hallunet_forward(&mut g, &f.store, xv, &p_s, &poses, &phi_tex)
            .unwrap();
        assert_eq!(views.len(), 3);
        for v in &views {
            assert!(g.value(v.image).iter().all(|x| x.is_finite()));
            assert_eq!(v.pyramid.num_scales(), f.cfg.levels);
        }

        // composition oracle: manual sub-operation chain gives the same image
        let mut g2 = Graph::new();
        let xv2 = g2.constant(x);
        let phi_tex2 = f.model.zero_texture_pyramid(&mut g2);
        let phi_src = f.model.encode_source(&mut g2, &f.store, xv2);
        let flows_st = f
            .model
            .flow_src_tgt(&mut g2, &f.store, xv2, &p_s, &poses[1])
            .unwrap();
        let flows_ti = f
            .model
            .flow_tex_img(&mut g2, &f.store, &phi_tex2, &poses[1])
            .unwrap();
        let (img, _) = f
            .model
            .image_generator(&mut g2, &f.store, &poses[1], &phi_src, &phi_tex2, &flows_st, &flows_ti)
            .unwrap();
        assert_eq!(g.value(views[1].image), g2.value(img));
    }

    #[test]
    fn texnet_arity_determinism_and_agg_ablation() {
        let f = fixture(22);
        let poses: Vec<PoseHeatmap> = (0..2)
            .map(|i| rand_pose(&f.cfg, 23 + i, PoseKind::ImagePose))
            .collect();
        let tex_poses: Vec<PoseHeatmap> = (0..2)
            .map(|i| rand_pose(&f.cfg, 25 + i, PoseKind::TexturePose))
            .collect();
        let coords: Vec<CoordinateAnnotation> = (0..2).map(|i| rand_coord(&f.cfg, 27 + i)).collect();

        let run = |img_seed: u64, ablation: Ablation| -> Arr {
            let mut cfg = f.cfg.clone();
            cfg.ablation = ablation;
            let mut store = ParamStore::new();
            let model = Model::new(&mut store, &cfg, 22).unwrap();
            let mut g = Graph::new();
            let views: Vec<FeaturePyramid> = (0..2)
                .map(|v| {
                    let vars: Vec<Var> = (0..cfg.levels)
                        .map(|s| {
                            let (h, w) = cfg.img_dims(s);
                            let mut rng = seeded_rng(img_seed + (v * 10 + s) as u64);
                            g.constant(normal_init(&mut rng, &[cfg.channels[s], h, w], 1.0))
                        })
                        .collect();
                    FeaturePyramid::from_scale_maps(vars, Domain::Image)
                })
                .collect();
            let out = model
                .texnet_forward(&mut g, &store, &poses, &tex_poses, &coords, &views)
                .unwrap();
            let t = g.value(out.texture).clone();
            assert_eq!(t.shape(), &[3, f.cfg.tex_h, f.cfg.tex_w]);
            t
        };
        // determinism
        assert_eq!(run(40, Ablation::Full), run(40, Ablation::Full));
        // aggregation masks forced to zero: texture ignores image features
        assert_eq!(
            run(41, Ablation::Independent),
            run(42, Ablation::Independent)
        );
        assert_ne!(run(41, Ablation::Full), run(42, Ablation::Full));
    }

    #[test]
    fn texture_generator_single_view_works() {
        let mut cfg = micro_cfg();
        cfg.n_h = 1;
        let mut store = ParamStore::new();
        let model = Model::new(&mut store, &cfg, 50).unwrap();
        let mut g = Graph::new();
        let poses = vec![rand_pose(&cfg, 51, PoseKind::ImagePose)];
        let tex_poses = vec![rand_pose(&cfg, 52, PoseKind::TexturePose)];
        let coords = vec![rand_coord(&cfg, 53)];
        let vars: Vec<Var> = (0..cfg.levels)
            .map(|s| {
                let (h, w) = cfg.img_dims(s);
                let mut rng = seeded_rng(54 + s as u64);
                g.constant(normal_init(&mut rng, &[cfg.channels[s], h, w], 1.0))
            })
            .collect();
        let views = vec![FeaturePyramid::from_scale_maps(vars, Domain::Image)];
        let out = model
            .texnet_forward(&mut g, &store, &poses, &tex_poses, &coords, &views)
            .unwrap();
        assert!(g.value(out.texture).iter().all(|v| v.is_finite()));
        // empty view list is rejected
        assert!(model
            .texnet_forward(&mut g, &store, &[], &[], &[], &[])
            .is_err());
    }

    #[test]
    fn discriminator_contract() {
        let f = fixture(60);
        let mut g = Graph::new();
        let x = g.constant(rand_image(&f.cfg, 61));
        let l1 = f.model.disc.forward_image(&mut g, &f.store, x);
        let sh = g.value(l1).shape().to_vec();
        let (h, w) = f.cfg.img_dims(f.cfg.coarsest());
        assert_eq!(sh, vec![1, h, w], "patch logit map at coarsest scale");
        assert!(g.value(l1).iter().all(|v| v.is_finite()));
        let mut g2 = Graph::new();
        let x2 = g2.constant(rand_image(&f.cfg, 61));
        let l2 = f.model.disc.forward_image(&mut g2, &f.store, x2);
        assert_eq!(g.value(l1), g2.value(l2));
    }

    #[test]
    fn texture_gradient_reaches_source_image() {
        let f = fixture(70);
        let mut g = Graph::new();
        let x_leaf = g.leaf(rand_image(&f.cfg, 71));
        let p_s = rand_pose(&f.cfg, 72, PoseKind::ImagePose);
        let poses: Vec<PoseHeatmap> = (0..2)
            .map(|i| rand_pose(&f.cfg, 73 + i, PoseKind::ImagePose))
            .collect();
        let tex_poses: Vec<PoseHeatmap> = (0..2)
            .map(|i| rand_pose(&f.cfg, 75 + i, PoseKind::TexturePose))
            .collect();
        let coords: Vec<CoordinateAnnotation> = (0..2).map(|i| rand_coord(&f.cfg, 77 + i)).collect();
        let phi_tex = f.model.zero_texture_pyramid(&mut g);
        let views = f
            .model
            .hallunet_forward(&mut g, &f.store, x_leaf, &p_s, &poses, &phi_tex)
            .unwrap();
        let pyramids: Vec<FeaturePyramid> = views.iter().map(|v| v.pyramid.clone()).collect();
        let out = f
            .model
            .texnet_forward(&mut g, &f.store, &poses, &tex_poses, &coords, &pyramids)
            .unwrap();
        let probe = g.mean(out.texture);
        let grads = g.backward(probe);
        let gx = grads.wrt(x_leaf).expect("gradient reaches the source image");
        assert!(gx.iter().any(|&v| v != 0.0), "dt/dx_s must be nonzero somewhere");
    }

    #[test]
    fn model_build_is_deterministic() {
        let cfg = micro_cfg();
        let mut s1 = ParamStore::new();
        let mut s2 = ParamStore::new();
        Model::new(&mut s1, &cfg, 7).unwrap();
        Model::new(&mut s2, &cfg, 7).unwrap();
        assert_eq!(s1.len(), s2.len());
        for ((_, n1, v1), (_, n2, v2)) in s1.iter().zip(s2.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(v1, v2);
        }
    }

    #[test]
    fn image_values_are_in_unit_range() {
        let f = fixture(80);
        let mut g = Graph::new();
        let x = g.constant(rand_image(&f.cfg, 81));
        let p_s = rand_pose(&f.cfg, 82, PoseKind::ImagePose);
        let p_h = rand_pose(&f.cfg, 83, PoseKind::ImagePose);
        let phi_tex = f.model.zero_texture_pyramid(&mut g);
        let views = f
            .model
            .hallunet_forward(&mut g, &f.store, x, &p_s, std::slice::from_ref(&p_h), &phi_tex)
            .unwrap();
        assert!(g
            .value(views[0].image)
            .iter()
            .all(|&v| (0.0..=1.0).contains(&v)));
    }
}

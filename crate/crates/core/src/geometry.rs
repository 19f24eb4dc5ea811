//! Domain types and annotation algebra: differentiable-warp kernels,
//! the simplified renderer, and surface/coordinate bookkeeping.
//!
//! Coordinate convention (used everywhere): `(x, y)` order, origin at
//! the top-left, integer coordinates at pixel centers. Raster arrays
//! are `(H, W, C)`; pose heatmaps and graph tensors are channel-first.

use ndarray::{Array2, Array3, ArrayView3, Ix3};

use crate::autodiff::{Arr, Graph, Var};
use crate::error::{Error, Result};

/// RGB image with values in `[0, 1]`, stored `(H, W, 3)`.
#[derive(Clone, Debug)]
pub struct Image {
    pub data: Array3<f64>,
}

impl Image {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        if data.dim().2 != 3 {
            return Err(Error::shape("(H, W, 3)", format!("{:?}", data.dim()), "Image"));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::contract("Image contains non-finite values"));
        }
        Ok(Image { data })
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }
}

/// Full uv texture map on a fixed atlas layout, `(Ht, Wt, 3)`.
#[derive(Clone, Debug)]
pub struct TextureMap {
    pub data: Array3<f64>,
    pub layout_id: String,
}

impl TextureMap {
    pub fn new(data: Array3<f64>, layout_id: impl Into<String>) -> Result<Self> {
        if data.dim().2 != 3 {
            return Err(Error::shape(
                "(Ht, Wt, 3)",
                format!("{:?}", data.dim()),
                "TextureMap",
            ));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::contract("TextureMap contains non-finite values"));
        }
        Ok(TextureMap {
            data,
            layout_id: layout_id.into(),
        })
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }
}

/// Per-pixel texel coordinates plus a binary foreground mask.
///
/// `coords` is `(H, W, 2)` in uv raster units; masked-off entries are
/// zero. `tex_size` is `(Ht, Wt)` of the texture raster the coordinates
/// index into.
#[derive(Clone, Debug)]
pub struct SurfaceAnnotation {
    pub coords: Array3<f64>,
    pub mask: Array2<f64>,
    pub tex_size: (usize, usize),
}

impl SurfaceAnnotation {
    pub fn new(coords: Array3<f64>, mask: Array2<f64>, tex_size: (usize, usize)) -> Result<Self> {
        let (h, w, two) = coords.dim();
        if two != 2 || mask.dim() != (h, w) {
            return Err(Error::shape(
                "(H, W, 2) + (H, W)",
                format!("{:?} + {:?}", coords.dim(), mask.dim()),
                "SurfaceAnnotation",
            ));
        }
        let (th, tw) = tex_size;
        for y in 0..h {
            for x in 0..w {
                if mask[[y, x]] > 0.5 {
                    let (u, v) = (coords[[y, x, 0]], coords[[y, x, 1]]);
                    if !(0.0..tw as f64).contains(&u) || !(0.0..th as f64).contains(&v) {
                        return Err(Error::contract(format!(
                            "surface coord ({u}, {v}) at pixel ({x}, {y}) outside texture raster"
                        )));
                    }
                }
            }
        }
        Ok(SurfaceAnnotation {
            coords,
            mask,
            tex_size,
        })
    }
}

/// Per-texel image pixel coordinates plus a visibility mask; the
/// inverse of [`SurfaceAnnotation`] on visible texels.
#[derive(Clone, Debug)]
pub struct CoordinateAnnotation {
    pub coords: Array3<f64>,
    pub visibility: Array2<f64>,
    /// `(H, W)` of the image frame the coordinates point into.
    pub image_size: (usize, usize),
}

impl CoordinateAnnotation {
    pub fn new(
        coords: Array3<f64>,
        visibility: Array2<f64>,
        image_size: (usize, usize),
    ) -> Result<Self> {
        let (th, tw, two) = coords.dim();
        if two != 2 || visibility.dim() != (th, tw) {
            return Err(Error::shape(
                "(Ht, Wt, 2) + (Ht, Wt)",
                format!("{:?} + {:?}", coords.dim(), visibility.dim()),
                "CoordinateAnnotation",
            ));
        }
        let (ih, iw) = image_size;
        for v in 0..th {
            for u in 0..tw {
                if visibility[[v, u]] > 0.5 {
                    let (x, y) = (coords[[v, u, 0]], coords[[v, u, 1]]);
                    if !(0.0..iw as f64).contains(&x) || !(0.0..ih as f64).contains(&y) {
                        return Err(Error::contract(format!(
                            "coordinate ({x}, {y}) at texel ({u}, {v}) outside image frame"
                        )));
                    }
                }
            }
        }
        Ok(CoordinateAnnotation {
            coords,
            visibility,
            image_size,
        })
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum PoseKind {
    ImagePose,
    TexturePose,
}

/// K-channel Gaussian keypoint heatmap, `(K, H, W)`.
#[derive(Clone, Debug)]
pub struct PoseHeatmap {
    pub channels: Array3<f64>,
    pub kind: PoseKind,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum FlowRepr {
    /// Displacements added to the query grid before sampling.
    Relative,
    /// Direct sample positions in the key raster.
    Absolute,
}

/// Dense 2-vector field `(h, w, 2)` produced by a flow generator.
#[derive(Clone, Debug)]
pub struct FlowField {
    pub vectors: Array3<f64>,
    pub representation: FlowRepr,
    pub resolution_level: usize,
}

/// Soft merge mask in `[0, 1]`, `(h, w)`.
#[derive(Clone, Debug)]
pub struct FlowMask {
    pub values: Array2<f64>,
}

/// Bilinear sample of `field (h, w, C)` at absolute positions
/// `coords (h', w', 2)`; out-of-bounds positions clamp to the border.
pub fn warp_bilinear(field: &ArrayView3<f64>, coords: &ArrayView3<f64>) -> Result<Array3<f64>> {
    let (fh, fw, c) = field.dim();
    let (h, w, two) = coords.dim();
    if two != 2 {
        return Err(Error::shape("(h', w', 2)", format!("{:?}", coords.dim()), "warp coords"));
    }
    if c == 0 || fh == 0 || fw == 0 {
        return Err(Error::contract("warp_bilinear: empty field"));
    }
    if !coords.iter().all(|v| v.is_finite()) {
        return Err(Error::contract("warp_bilinear: non-finite coordinates"));
    }
    let mut out = Array3::<f64>::zeros((h, w, c));
    for y in 0..h {
        for x in 0..w {
            let sx = coords[[y, x, 0]].clamp(0.0, (fw - 1) as f64);
            let sy = coords[[y, x, 1]].clamp(0.0, (fh - 1) as f64);
            let (x0, fx) = split_cell(sx, fw);
            let (y0, fy) = split_cell(sy, fh);
            let (x1, y1) = ((x0 + 1).min(fw - 1), (y0 + 1).min(fh - 1));
            for ch in 0..c {
                out[[y, x, ch]] = (1.0 - fy)
                    * ((1.0 - fx) * field[[y0, x0, ch]] + fx * field[[y0, x1, ch]])
                    + fy * ((1.0 - fx) * field[[y1, x0, ch]] + fx * field[[y1, x1, ch]]);
            }
        }
    }
    Ok(out)
}

fn split_cell(c: f64, extent: usize) -> (usize, f64) {
    if extent == 1 {
        return (0, 0.0);
    }
    let base = (c.floor() as usize).min(extent - 2);
    (base, c - base as f64)
}

/// Warp an image pose into texture space: `b = warp(p; c)` on visible
/// texels, zero elsewhere.
pub fn texture_pose_from_image_pose(
    p: &PoseHeatmap,
    c: &CoordinateAnnotation,
) -> Result<PoseHeatmap> {
    if p.kind != PoseKind::ImagePose {
        return Err(Error::contract("texture_pose_from_image_pose expects an image pose"));
    }
    let (k, ph, pw) = p.channels.dim();
    if (ph, pw) != c.image_size {
        return Err(Error::shape(
            format!("pose at {:?}", c.image_size),
            format!("({ph}, {pw})"),
            "texture_pose_from_image_pose",
        ));
    }
    let (th, tw, _) = c.coords.dim();
    let mut b = Array3::<f64>::zeros((k, th, tw));
    for v in 0..th {
        for u in 0..tw {
            if c.visibility[[v, u]] <= 0.5 {
                continue;
            }
            let sx = c.coords[[v, u, 0]].clamp(0.0, (pw - 1) as f64);
            let sy = c.coords[[v, u, 1]].clamp(0.0, (ph - 1) as f64);
            let (x0, fx) = split_cell(sx, pw);
            let (y0, fy) = split_cell(sy, ph);
            let (x1, y1) = ((x0 + 1).min(pw - 1), (y0 + 1).min(ph - 1));
            for ch in 0..k {
                b[[ch, v, u]] = (1.0 - fy)
                    * ((1.0 - fx) * p.channels[[ch, y0, x0]] + fx * p.channels[[ch, y0, x1]])
                    + fy * ((1.0 - fx) * p.channels[[ch, y1, x0]] + fx * p.channels[[ch, y1, x1]]);
            }
        }
    }
    Ok(PoseHeatmap {
        channels: b,
        kind: PoseKind::TexturePose,
    })
}

/// Rendering composite: `(1 - m) * x_hat + m * warp(t; s)` with the
/// binary mask taken from the surface annotation.
pub fn render_composite(t: &TextureMap, s: &SurfaceAnnotation, x_hat: &Image) -> Result<Image> {
    let (h, w, _) = s.coords.dim();
    if x_hat.data.dim() != (h, w, 3) {
        return Err(Error::shape(
            format!("({h}, {w}, 3)"),
            format!("{:?}", x_hat.data.dim()),
            "render_composite",
        ));
    }
    if s.tex_size != (t.height(), t.width()) {
        return Err(Error::shape(
            format!("texture {:?}", s.tex_size),
            format!("({}, {})", t.height(), t.width()),
            "render_composite",
        ));
    }
    let warped = warp_bilinear(&t.data.view(), &s.coords.view())?;
    let mut out = x_hat.data.clone();
    for y in 0..h {
        for x in 0..w {
            if s.mask[[y, x]] > 0.5 {
                for ch in 0..3 {
                    out[[y, x, ch]] = warped[[y, x, ch]];
                }
            }
        }
    }
    Image::new(out)
}

/// Graph twin of [`render_composite`] for training: differentiable in
/// the texture map and the generated image.
pub fn render_composite_graph(
    g: &mut Graph,
    t_chw: Var,
    s: &SurfaceAnnotation,
    x_hat_chw: Var,
) -> Var {
    let (h, w, _) = s.coords.dim();
    let coords = g.constant(surface_coords_chw(s));
    let warped = g.grid_sample(t_chw, coords);
    let mask = {
        let mut m = Array3::<f64>::zeros((1, h, w));
        for y in 0..h {
            for x in 0..w {
                m[[0, y, x]] = if s.mask[[y, x]] > 0.5 { 1.0 } else { 0.0 };
            }
        }
        g.constant(m.into_dyn())
    };
    let inv = g.sub_from_scalar(1.0, mask);
    let bg = g.broadcast_mul_channel(inv, x_hat_chw);
    let fg = g.broadcast_mul_channel(mask, warped);
    g.add(bg, fg)
}

/// Mean reprojection error `|l - c(s(l))|` over foreground pixels whose
/// texel is visible; zero when no pixel qualifies.
///
/// The coordinate raster is sampled bilinearly with invisible texels
/// excluded and the remaining weights renormalized, so analytically
/// inverse pairs evaluate to zero away from chart borders.
pub fn annotation_roundtrip_residual(s: &SurfaceAnnotation, c: &CoordinateAnnotation) -> f64 {
    let (h, w, _) = s.coords.dim();
    let (th, tw, _) = c.coords.dim();
    let mut total = 0.0;
    let mut count = 0usize;
    for y in 0..h {
        for x in 0..w {
            if s.mask[[y, x]] <= 0.5 {
                continue;
            }
            let u = s.coords[[y, x, 0]].clamp(0.0, (tw - 1) as f64);
            let v = s.coords[[y, x, 1]].clamp(0.0, (th - 1) as f64);
            let (un, vn) = (u.round() as usize, v.round() as usize);
            if c.visibility[[vn.min(th - 1), un.min(tw - 1)]] <= 0.5 {
                continue;
            }
            let (u0, fu) = split_cell(u, tw);
            let (v0, fv) = split_cell(v, th);
            let (u1, v1) = ((u0 + 1).min(tw - 1), (v0 + 1).min(th - 1));
            let corners = [
                (v0, u0, (1.0 - fv) * (1.0 - fu)),
                (v0, u1, (1.0 - fv) * fu),
                (v1, u0, fv * (1.0 - fu)),
                (v1, u1, fv * fu),
            ];
            let mut wsum = 0.0;
            let mut px = 0.0;
            let mut py = 0.0;
            for (vv, uu, wt) in corners {
                if c.visibility[[vv, uu]] > 0.5 {
                    wsum += wt;
                    px += wt * c.coords[[vv, uu, 0]];
                    py += wt * c.coords[[vv, uu, 1]];
                }
            }
            if wsum < 1e-9 {
                continue;
            }
            px /= wsum;
            py /= wsum;
            let dx = px - x as f64;
            let dy = py - y as f64;
            total += (dx * dx + dy * dy).sqrt();
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Resample a coordinate annotation to `target_res = (h, w)` texels and
/// rescale the stored pixel coordinates into a `target_scale = (H', W')`
/// frame. Spatial resampling is nearest-neighbor (coordinates of mixed
/// visibility must not blend); values scale by the frame ratio.
pub fn rescale_coordinates(
    c: &CoordinateAnnotation,
    target_res: (usize, usize),
    target_scale: (usize, usize),
) -> CoordinateAnnotation {
    let (th, tw, _) = c.coords.dim();
    let (nh, nw) = target_res;
    assert!(nh > 0 && nw > 0, "target dims must be positive");
    let (ih, iw) = c.image_size;
    let (oh, ow) = target_scale;
    let sx = ow as f64 / iw as f64;
    let sy = oh as f64 / ih as f64;
    let mut coords = Array3::<f64>::zeros((nh, nw, 2));
    let mut vis = Array2::<f64>::zeros((nh, nw));
    for v in 0..nh {
        // nearest source texel under pixel-center alignment
        let src_v = (((v as f64 + 0.5) * th as f64 / nh as f64 - 0.5).round())
            .clamp(0.0, (th - 1) as f64) as usize;
        for u in 0..nw {
            let src_u = (((u as f64 + 0.5) * tw as f64 / nw as f64 - 0.5).round())
                .clamp(0.0, (tw - 1) as f64) as usize;
            vis[[v, u]] = if c.visibility[[src_v, src_u]] > 0.5 { 1.0 } else { 0.0 };
            if vis[[v, u]] > 0.5 {
                coords[[v, u, 0]] = c.coords[[src_v, src_u, 0]] * sx;
                coords[[v, u, 1]] = c.coords[[src_v, src_u, 1]] * sy;
            }
        }
    }
    CoordinateAnnotation {
        coords,
        visibility: vis,
        image_size: target_scale,
    }
}

/// `(H, W, C)` to `(C, H, W)` graph tensor.
pub fn hwc_to_chw(a: &Array3<f64>) -> Arr {
    let (h, w, c) = a.dim();
    let mut out = Array3::<f64>::zeros((c, h, w));
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out[[ch, y, x]] = a[[y, x, ch]];
            }
        }
    }
    out.into_dyn()
}

/// `(C, H, W)` graph tensor back to `(H, W, C)`.
pub fn chw_to_hwc(a: &Arr) -> Array3<f64> {
    let v = a.view().into_dimensionality::<Ix3>().expect("rank-3 tensor");
    let (c, h, w) = v.dim();
    let mut out = Array3::<f64>::zeros((h, w, c));
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out[[y, x, ch]] = v[[ch, y, x]];
            }
        }
    }
    out
}

/// Surface coords as a `(2, H, W)` sampling grid for `grid_sample`.
pub fn surface_coords_chw(s: &SurfaceAnnotation) -> Arr {
    let (h, w, _) = s.coords.dim();
    let mut out = Array3::<f64>::zeros((2, h, w));
    for y in 0..h {
        for x in 0..w {
            out[[0, y, x]] = s.coords[[y, x, 0]];
            out[[1, y, x]] = s.coords[[y, x, 1]];
        }
    }
    out.into_dyn()
}

/// Foreground mask as a `(1, H, W)` graph constant source.
pub fn mask_chw(mask: &Array2<f64>) -> Arr {
    let (h, w) = mask.dim();
    let mut out = Array3::<f64>::zeros((1, h, w));
    for y in 0..h {
        for x in 0..w {
            out[[0, y, x]] = mask[[y, x]];
        }
    }
    out.into_dyn()
}

/// Unwrap an image into the texture atlas through a coordinate
/// annotation: each visible texel takes the bilinear image sample at
/// its pixel coordinate. Invisible texels are zero.
pub fn unwrap_to_texture(x: &Image, c: &CoordinateAnnotation, layout_id: &str) -> Result<TextureMap> {
    if (x.height(), x.width()) != c.image_size {
        return Err(Error::shape(
            format!("image {:?}", c.image_size),
            format!("({}, {})", x.height(), x.width()),
            "unwrap_to_texture",
        ));
    }
    let (th, tw, _) = c.coords.dim();
    let sampled = warp_bilinear(&x.data.view(), &c.coords.view())?;
    let mut out = Array3::<f64>::zeros((th, tw, 3));
    for v in 0..th {
        for u in 0..tw {
            if c.visibility[[v, u]] > 0.5 {
                for ch in 0..3 {
                    out[[v, u, ch]] = sampled[[v, u, ch]];
                }
            }
        }
    }
    TextureMap::new(out, layout_id)
}

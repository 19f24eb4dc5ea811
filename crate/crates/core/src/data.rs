//! Synthetic articulated-avatar dataset with exact surface/coordinate
//! annotations, keypoint heatmap construction, and dataset file I/O.
//!
//! A sample is rendered by warping an identity-stable ground-truth
//! texture map through an analytically known surface annotation; the
//! coordinate annotation is its exact inverse on visible texels. The
//! ground-truth texture is stored per identity for evaluation only and
//! never enters training.
//!
//! Directory layout:
//! `dataset/<identity>/<pose>/{image.png, s.f32, c.f32, kp.txt, meta.txt}`
//! plus `dataset/<identity>/gt_texture.png`.
//!
//! Raw `.f32` arrays are little-endian 32-bit floats, row-major
//! `(H, W, 3)`: channels `(x, y, mask)` for `s.f32` in uv raster units
//! and `(x, y, visibility)` for `c.f32` in image pixel units, `(x, y)`
//! order with integer coordinates at pixel centers. `meta.txt` is the
//! sidecar descriptor for both arrays.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::nn::seeded_rng;
use crate::error::{Error, Result};
use crate::geometry::{
    warp_bilinear, CoordinateAnnotation, Image, PoseHeatmap, PoseKind, SurfaceAnnotation,
    TextureMap,
};

/// SplitMix64 step for deriving independent sub-seeds.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base
        .wrapping_add(0x9e3779b97f4a7c15)
        .wrapping_add(stream.wrapping_mul(0xbf58476d1ce4e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Generation parameters for the synthetic avatar corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticAvatarSpec {
    pub image_h: usize,
    pub image_w: usize,
    /// Edge length of one part chart; the atlas is a 2x2 grid of these.
    pub part_texels: usize,
}

impl Default for SyntheticAvatarSpec {
    fn default() -> Self {
        SyntheticAvatarSpec {
            image_h: 64,
            image_w: 64,
            part_texels: 32,
        }
    }
}

impl SyntheticAvatarSpec {
    pub fn tex_h(&self) -> usize {
        2 * self.part_texels
    }

    pub fn tex_w(&self) -> usize {
        2 * self.part_texels
    }

    pub fn layout_id(&self) -> String {
        format!("grid2x2-{}", self.part_texels)
    }

    pub const KEYPOINTS: usize = 6;
}

/// Body parts, drawn back to front; each owns one atlas chart.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Part {
    Left,
    Right,
    Torso,
    Head,
}

const DRAW_ORDER: [Part; 4] = [Part::Left, Part::Right, Part::Torso, Part::Head];

impl Part {
    fn chart_origin(self, n: usize) -> (usize, usize) {
        match self {
            Part::Torso => (0, 0),
            Part::Head => (n, 0),
            Part::Left => (0, n),
            Part::Right => (n, n),
        }
    }
}

/// Affine map from chart-local texel coordinates to image pixels.
#[derive(Clone, Copy, Debug)]
struct PartPlacement {
    /// image-space center
    cx: f64,
    cy: f64,
    /// pixels per texel along the chart axes
    sx: f64,
    sy: f64,
    /// rotation
    cos: f64,
    sin: f64,
    /// chart center in texels
    half: f64,
}

impl PartPlacement {
    fn new(cx: f64, cy: f64, w_px: f64, h_px: f64, angle: f64, n: usize) -> Self {
        PartPlacement {
            cx,
            cy,
            sx: w_px / n as f64,
            sy: h_px / n as f64,
            cos: angle.cos(),
            sin: angle.sin(),
            half: (n as f64 - 1.0) / 2.0,
        }
    }

    /// texel (u, v) in chart-local units to image pixel (x, y).
    fn to_image(&self, u: f64, v: f64) -> (f64, f64) {
        let lx = (u - self.half) * self.sx;
        let ly = (v - self.half) * self.sy;
        (
            self.cx + self.cos * lx - self.sin * ly,
            self.cy + self.sin * lx + self.cos * ly,
        )
    }

    /// image pixel (x, y) back to chart-local texel (u, v).
    fn to_chart(&self, x: f64, y: f64) -> (f64, f64) {
        let dx = x - self.cx;
        let dy = y - self.cy;
        let lx = self.cos * dx + self.sin * dy;
        let ly = -self.sin * dx + self.cos * dy;
        (lx / self.sx + self.half, ly / self.sy + self.half)
    }

    fn area(&self) -> f64 {
        (self.sx * self.sy).abs()
    }
}

struct Skeleton {
    placements: [(Part, PartPlacement); 4],
    keypoints: Vec<(f64, f64)>,
}

fn rot(cos: f64, sin: f64, x: f64, y: f64) -> (f64, f64) {
    (cos * x - sin * y, sin * x + cos * y)
}

/// Lay out the four parts for one pose; `None` when a part degenerates
/// (caller resamples).
fn build_skeleton(spec: &SyntheticAvatarSpec, identity: &IdentityTraits, rng: &mut ChaCha8Rng) -> Option<Skeleton> {
    let (hf, wf) = (spec.image_h as f64, spec.image_w as f64);
    let n = spec.part_texels;

    let cx = wf / 2.0 + rng.random_range(-0.06..0.06) * wf;
    let cy = hf / 2.0 + rng.random_range(-0.05..0.05) * hf;
    let theta_g: f64 = rng.random_range(-0.45..0.45);
    let theta_h: f64 = rng.random_range(-0.35..0.35);
    let theta_l: f64 = rng.random_range(-0.8..0.8);
    let theta_r: f64 = rng.random_range(-0.8..0.8);

    let torso_w = 0.34 * wf * identity.width_scale;
    let torso_h = 0.42 * hf * identity.height_scale;
    let head_e = 0.20 * hf.min(wf) * identity.head_scale;
    let limb_w = 0.13 * wf * identity.width_scale;
    let limb_len = 0.40 * hf * identity.height_scale;

    let (cg, sg) = (theta_g.cos(), theta_g.sin());
    let torso = PartPlacement::new(cx, cy, torso_w, torso_h, theta_g, n);

    // head sits above the torso, rotated about the neck
    let neck = {
        let (ox, oy) = rot(cg, sg, 0.0, -torso_h / 2.0);
        (cx + ox, cy + oy)
    };
    let head_angle = theta_g + theta_h;
    let head_center = {
        let (ox, oy) = rot(head_angle.cos(), head_angle.sin(), 0.0, -head_e * 0.55);
        (neck.0 + ox, neck.1 + oy)
    };
    let head = PartPlacement::new(head_center.0, head_center.1, head_e, head_e, head_angle, n);

    // limbs hang from the shoulders
    let shoulder_l = {
        let (ox, oy) = rot(cg, sg, -torso_w / 2.0, -torso_h * 0.35);
        (cx + ox, cy + oy)
    };
    let shoulder_r = {
        let (ox, oy) = rot(cg, sg, torso_w / 2.0, -torso_h * 0.35);
        (cx + ox, cy + oy)
    };
    let la = theta_g + theta_l;
    let ra = theta_g + theta_r;
    let left_center = {
        let (ox, oy) = rot(la.cos(), la.sin(), -limb_w * 0.4, limb_len * 0.45);
        (shoulder_l.0 + ox, shoulder_l.1 + oy)
    };
    let right_center = {
        let (ox, oy) = rot(ra.cos(), ra.sin(), limb_w * 0.4, limb_len * 0.45);
        (shoulder_r.0 + ox, shoulder_r.1 + oy)
    };
    let left = PartPlacement::new(left_center.0, left_center.1, limb_w, limb_len, la, n);
    let right = PartPlacement::new(right_center.0, right_center.1, limb_w, limb_len, ra, n);

    for p in [&torso, &head, &left, &right] {
        if p.area() < 0.05 || !p.cx.is_finite() || !p.cy.is_finite() {
            return None;
        }
    }

    let limb_end = |pl: &PartPlacement| pl.to_image((n as f64 - 1.0) / 2.0, n as f64 - 1.0);
    let keypoints = vec![
        head.to_image(head.half, head.half), // head center
        neck,                                // neck
        (cx, cy),                            // torso center
        torso.to_image(torso.half, (n - 1) as f64), // pelvis
        limb_end(&left),
        limb_end(&right),
    ];

    Some(Skeleton {
        placements: [
            (Part::Left, left),
            (Part::Right, right),
            (Part::Torso, torso),
            (Part::Head, head),
        ],
        keypoints,
    })
}

struct IdentityTraits {
    width_scale: f64,
    height_scale: f64,
    head_scale: f64,
}

fn identity_traits(rng: &mut ChaCha8Rng) -> IdentityTraits {
    IdentityTraits {
        width_scale: rng.random_range(0.85..1.15),
        height_scale: rng.random_range(0.85..1.15),
        head_scale: rng.random_range(0.9..1.1),
    }
}

/// Snap to the 8-bit grid PNG storage uses.
pub fn quantize_unit(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Identity-stable ground-truth texture: per chart a striped pattern in
/// two colors, already on the 8-bit grid so PNG round-trips exactly.
fn generate_texture(spec: &SyntheticAvatarSpec, rng: &mut ChaCha8Rng) -> TextureMap {
    let n = spec.part_texels;
    let (th, tw) = (spec.tex_h(), spec.tex_w());
    let mut data = Array3::<f64>::zeros((th, tw, 3));
    for part in DRAW_ORDER {
        let (ox, oy) = part.chart_origin(n);
        let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.15..0.95));
        let stripe: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.15..0.95));
        let period = rng.random_range(3..8usize);
        let horizontal = rng.random_range(0.0..1.0) < 0.5;
        for v in 0..n {
            for u in 0..n {
                let idx = if horizontal { v } else { u };
                let color = if (idx / period) % 2 == 0 { base } else { stripe };
                for ch in 0..3 {
                    data[[oy + v, ox + u, ch]] = quantize_unit(color[ch]);
                }
            }
        }
    }
    TextureMap::new(data, spec.layout_id()).expect("valid synthetic texture")
}

fn background_colors(rng: &mut ChaCha8Rng) -> ([f64; 3], [f64; 3]) {
    let a: [f64; 3] = std::array::from_fn(|_| quantize_unit(rng.random_range(0.0..0.45)));
    let b: [f64; 3] = std::array::from_fn(|_| quantize_unit(rng.random_range(0.55..1.0)));
    (a, b)
}

/// One stored sample: image plus exact annotations and keypoints.
#[derive(Clone, Debug)]
pub struct SampleRecord {
    pub identity: String,
    pub pose: String,
    pub image: Image,
    pub surface: SurfaceAnnotation,
    pub coord: CoordinateAnnotation,
    /// `(x, y, visible)` per keypoint.
    pub keypoints: Vec<(f64, f64, bool)>,
    pub layout_id: String,
}

impl SampleRecord {
    pub fn image_pose(&self, sigma: f64) -> PoseHeatmap {
        keypoint_heatmap(
            &self.keypoints,
            (self.image.height(), self.image.width()),
            sigma,
        )
    }

    pub fn texture_pose(&self, sigma: f64) -> Result<PoseHeatmap> {
        let p = self.image_pose(sigma);
        crate::geometry::texture_pose_from_image_pose(&p, &self.coord)
    }
}

/// Render one sample; resamples internally on degenerate poses.
pub fn generate_sample(
    spec: &SyntheticAvatarSpec,
    identity_seed: u64,
    pose_seed: u64,
) -> Result<(SampleRecord, TextureMap)> {
    let mut id_rng = seeded_rng(derive_seed(identity_seed, 0));
    let traits = identity_traits(&mut id_rng);
    let texture = generate_texture(spec, &mut id_rng);
    let (bg0, bg1) = background_colors(&mut id_rng);

    let mut skeleton = None;
    for attempt in 0..16u64 {
        let mut pose_rng = seeded_rng(derive_seed(pose_seed, 1 + attempt));
        if let Some(s) = build_skeleton(spec, &traits, &mut pose_rng) {
            skeleton = Some(s);
            break;
        }
    }
    let skeleton = skeleton
        .ok_or_else(|| Error::contract("could not sample a non-degenerate pose in 16 tries"))?;

    let (h, w) = (spec.image_h, spec.image_w);
    let n = spec.part_texels;
    let (th, tw) = (spec.tex_h(), spec.tex_w());

    // ownership: front-most part covering each pixel
    let mut owner: Vec<Option<Part>> = vec![None; h * w];
    let mut s_coords = Array3::<f64>::zeros((h, w, 2));
    let mut s_mask = Array2::<f64>::zeros((h, w));
    let max_local = (n - 1) as f64;
    for y in 0..h {
        for x in 0..w {
            for (part, pl) in skeleton.placements.iter() {
                let (u, v) = pl.to_chart(x as f64, y as f64);
                if (0.0..=max_local).contains(&u) && (0.0..=max_local).contains(&v) {
                    owner[y * w + x] = Some(*part);
                    let (ox, oy) = part.chart_origin(n);
                    s_coords[[y, x, 0]] = u + ox as f64;
                    s_coords[[y, x, 1]] = v + oy as f64;
                    s_mask[[y, x]] = 1.0;
                }
            }
        }
    }
    if s_mask.sum() < 4.0 {
        return Err(Error::contract("degenerate pose: avatar left the frame"));
    }

    // coordinate annotation: exact inverse on visible texels
    let mut c_coords = Array3::<f64>::zeros((th, tw, 2));
    let mut c_vis = Array2::<f64>::zeros((th, tw));
    for (part, pl) in skeleton.placements.iter() {
        let (ox, oy) = part.chart_origin(n);
        for v in 0..n {
            for u in 0..n {
                let (px, py) = pl.to_image(u as f64, v as f64);
                if !(0.0..w as f64).contains(&px) || !(0.0..h as f64).contains(&py) {
                    continue;
                }
                let (rx, ry) = (px.round() as usize, py.round() as usize);
                if rx < w && ry < h && owner[ry * w + rx] == Some(*part) {
                    c_coords[[oy + v, ox + u, 0]] = px;
                    c_coords[[oy + v, ox + u, 1]] = py;
                    c_vis[[oy + v, ox + u]] = 1.0;
                }
            }
        }
    }

    // image: warped texture over the background, quantized to the PNG grid
    let warped = warp_bilinear(&texture.data.view(), &s_coords.view())?;
    let mut img = Array3::<f64>::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            if s_mask[[y, x]] > 0.5 {
                for ch in 0..3 {
                    img[[y, x, ch]] = quantize_unit(warped[[y, x, ch]]);
                }
            } else {
                let t = y as f64 / (h - 1).max(1) as f64;
                for ch in 0..3 {
                    img[[y, x, ch]] = quantize_unit(bg0[ch] * (1.0 - t) + bg1[ch] * t);
                }
            }
        }
    }

    let keypoints = skeleton
        .keypoints
        .iter()
        .map(|&(x, y)| {
            let visible = (0.0..w as f64).contains(&x) && (0.0..h as f64).contains(&y);
            (x, y, visible)
        })
        .collect();

    let record = SampleRecord {
        identity: String::new(),
        pose: String::new(),
        image: Image::new(img)?,
        surface: SurfaceAnnotation::new(s_coords, s_mask, (th, tw))?,
        coord: CoordinateAnnotation::new(c_coords, c_vis, (h, w))?,
        keypoints,
        layout_id: spec.layout_id(),
    };
    Ok((record, texture))
}

/// One Gaussian per visible keypoint with peak value 1 at the
/// keypoint's raster location; invisible keypoints yield zero channels.
pub fn keypoint_heatmap(
    keypoints: &[(f64, f64, bool)],
    res: (usize, usize),
    sigma: f64,
) -> PoseHeatmap {
    assert!(sigma > 0.0, "sigma must be positive");
    let (h, w) = res;
    let mut channels = Array3::<f64>::zeros((keypoints.len(), h, w));
    for (k, &(kx, ky, visible)) in keypoints.iter().enumerate() {
        if !visible {
            continue;
        }
        let cx = kx.round().clamp(0.0, (w - 1) as f64);
        let cy = ky.round().clamp(0.0, (h - 1) as f64);
        for y in 0..h {
            for x in 0..w {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                channels[[k, y, x]] = (-d2 / (2.0 * sigma * sigma)).exp();
            }
        }
    }
    PoseHeatmap {
        channels,
        kind: PoseKind::ImagePose,
    }
}

// ---------------------------------------------------------------------------
// file I/O

fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Save an `(H, W, 3)` raster in `[0, 1]` as an 8-bit PNG.
pub fn write_png(path: &Path, data: &Array3<f64>) -> Result<()> {
    let (h, w, _) = data.dim();
    let mut buf = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                buf.push((data[[y, x, ch]].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    let mut bytes = Vec::new();
    {
        let encoder = image::codecs::png::PngEncoder::new(&mut bytes);
        use image::ImageEncoder;
        encoder
            .write_image(&buf, w as u32, h as u32, image::ExtendedColorType::Rgb8)
            .map_err(|e| Error::Image(e.to_string()))?;
    }
    atomic_write(path, &bytes)
}

/// Load an 8-bit PNG as an `(H, W, 3)` raster in `[0, 1]`.
pub fn read_png(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let mut data = Array3::<f64>::zeros((h as usize, w as usize, 3));
    for (x, y, px) in img.enumerate_pixels() {
        for ch in 0..3 {
            data[[y as usize, x as usize, ch]] = px[ch] as f64 / 255.0;
        }
    }
    Ok(data)
}

/// `(H, W, 3)` float array as raw little-endian f32.
fn write_f32(path: &Path, data: &Array3<f64>) -> Result<()> {
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for &v in data.iter() {
        bytes.write_f32::<LittleEndian>(v as f32)?;
    }
    atomic_write(path, &bytes)
}

fn read_f32(path: &Path, h: usize, w: usize, c: usize) -> Result<Array3<f64>> {
    let mut f = fs::File::open(path)?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes)?;
    if bytes.len() != h * w * c * 4 {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            message: format!(
                "raw f32 array: expected {} bytes for ({h}, {w}, {c}), got {}",
                h * w * c * 4,
                bytes.len()
            ),
        });
    }
    let mut cursor = std::io::Cursor::new(bytes);
    let mut data = Array3::<f64>::zeros((h, w, c));
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                data[[y, x, ch]] = cursor.read_f32::<LittleEndian>()? as f64;
            }
        }
    }
    Ok(data)
}

fn pack_surface(s: &SurfaceAnnotation) -> Array3<f64> {
    let (h, w, _) = s.coords.dim();
    Array3::from_shape_fn((h, w, 3), |(y, x, ch)| match ch {
        0 => s.coords[[y, x, 0]],
        1 => s.coords[[y, x, 1]],
        _ => s.mask[[y, x]],
    })
}

fn pack_coord(c: &CoordinateAnnotation) -> Array3<f64> {
    let (th, tw, _) = c.coords.dim();
    Array3::from_shape_fn((th, tw, 3), |(v, u, ch)| match ch {
        0 => c.coords[[v, u, 0]],
        1 => c.coords[[v, u, 1]],
        _ => c.visibility[[v, u]],
    })
}

/// Write one sample into `dir` (created if needed).
pub fn write_sample(dir: &Path, record: &SampleRecord) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_png(&dir.join("image.png"), &record.image.data)?;
    write_f32(&dir.join("s.f32"), &pack_surface(&record.surface))?;
    write_f32(&dir.join("c.f32"), &pack_coord(&record.coord))?;
    let mut kp = String::new();
    for &(x, y, v) in &record.keypoints {
        kp.push_str(&format!("{x:.6} {y:.6} {}\n", if v { 1 } else { 0 }));
    }
    atomic_write(&dir.join("kp.txt"), kp.as_bytes())?;
    let (h, w) = (record.image.height(), record.image.width());
    let (th, tw) = record.surface.tex_size;
    let meta = format!(
        "identity = {id}\npose = {pose}\nimage_h = {h}\nimage_w = {w}\ntex_h = {th}\ntex_w = {tw}\n\
         keypoints = {nkp}\nlayout = {layout}\ns_format = f32le (H, W, 3): texel_x, texel_y, mask\n\
         c_format = f32le (Ht, Wt, 3): pixel_x, pixel_y, visibility\n\
         convention = xy order, origin top-left, integer coords at pixel centers\n",
        id = record.identity,
        pose = record.pose,
        nkp = record.keypoints.len(),
        layout = record.layout_id,
    );
    atomic_write(&dir.join("meta.txt"), meta.as_bytes())?;
    Ok(())
}

fn parse_meta(path: &Path) -> Result<std::collections::BTreeMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let mut map = std::collections::BTreeMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            message: format!("malformed sidecar line '{line}'"),
        })?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

fn meta_usize(
    map: &std::collections::BTreeMap<String, String>,
    key: &str,
    path: &Path,
) -> Result<usize> {
    map.get(key)
        .ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            message: format!("missing sidecar key '{key}'"),
        })?
        .parse()
        .map_err(|_| Error::Parse {
            path: path.to_path_buf(),
            message: format!("sidecar key '{key}' is not an integer"),
        })
}

/// Read one sample from `dir`.
pub fn read_sample(dir: &Path) -> Result<SampleRecord> {
    let meta_path = dir.join("meta.txt");
    let meta = parse_meta(&meta_path)?;
    let h = meta_usize(&meta, "image_h", &meta_path)?;
    let w = meta_usize(&meta, "image_w", &meta_path)?;
    let th = meta_usize(&meta, "tex_h", &meta_path)?;
    let tw = meta_usize(&meta, "tex_w", &meta_path)?;
    let image = Image::new(read_png(&dir.join("image.png"))?)?;
    if (image.height(), image.width()) != (h, w) {
        return Err(Error::Parse {
            path: dir.join("image.png"),
            message: "image dimensions disagree with sidecar".into(),
        });
    }
    let s_raw = read_f32(&dir.join("s.f32"), h, w, 3)?;
    let c_raw = read_f32(&dir.join("c.f32"), th, tw, 3)?;
    let s_coords = Array3::from_shape_fn((h, w, 2), |(y, x, ch)| s_raw[[y, x, ch]]);
    let s_mask = Array2::from_shape_fn((h, w), |(y, x)| s_raw[[y, x, 2]]);
    let c_coords = Array3::from_shape_fn((th, tw, 2), |(v, u, ch)| c_raw[[v, u, ch]]);
    let c_vis = Array2::from_shape_fn((th, tw), |(v, u)| c_raw[[v, u, 2]]);

    let kp_path = dir.join("kp.txt");
    let kp_text = fs::read_to_string(&kp_path).map_err(|e| Error::Parse {
        path: kp_path.clone(),
        message: e.to_string(),
    })?;
    let mut keypoints = Vec::new();
    for line in kp_text.lines() {
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 3 {
            return Err(Error::Parse {
                path: kp_path.clone(),
                message: format!("keypoint line '{line}' must be 'x y visible'"),
            });
        }
        let x: f64 = parts[0].parse().map_err(|_| Error::Parse {
            path: kp_path.clone(),
            message: "bad keypoint x".into(),
        })?;
        let y: f64 = parts[1].parse().map_err(|_| Error::Parse {
            path: kp_path.clone(),
            message: "bad keypoint y".into(),
        })?;
        keypoints.push((x, y, parts[2] == "1"));
    }

    Ok(SampleRecord {
        identity: meta.get("identity").cloned().unwrap_or_default(),
        pose: meta.get("pose").cloned().unwrap_or_default(),
        image,
        surface: SurfaceAnnotation::new(s_coords, s_mask, (th, tw))?,
        coord: CoordinateAnnotation::new(c_coords, c_vis, (h, w))?,
        keypoints,
        layout_id: meta.get("layout").cloned().unwrap_or_default(),
    })
}

/// Generate a dataset directory of `n_identities x poses_per_identity`
/// samples plus per-identity ground-truth textures.
pub fn generate_dataset(
    spec: &SyntheticAvatarSpec,
    n_identities: usize,
    poses_per_identity: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    for i in 0..n_identities {
        let identity = format!("id{i:04}");
        let id_seed = derive_seed(seed, 1000 + i as u64);
        let id_dir = out_dir.join(&identity);
        fs::create_dir_all(&id_dir)?;
        let mut gt: Option<TextureMap> = None;
        for p in 0..poses_per_identity {
            let pose = format!("p{p:03}");
            let pose_seed = derive_seed(seed, ((1 + i as u64) << 20) + p as u64);
            let (mut record, texture) = generate_sample(spec, id_seed, pose_seed)?;
            record.identity = identity.clone();
            record.pose = pose.clone();
            write_sample(&id_dir.join(&pose), &record)?;
            gt.get_or_insert(texture);
        }
        if let Some(t) = gt {
            write_png(&id_dir.join("gt_texture.png"), &t.data)?;
        }
    }
    Ok(())
}

/// One identity with its ordered pose directories.
#[derive(Clone, Debug)]
pub struct IdentityEntry {
    pub name: String,
    pub poses: Vec<String>,
}

/// Lazily loading view over a dataset directory.
pub struct Dataset {
    pub root: PathBuf,
    pub identities: Vec<IdentityEntry>,
}

/// Indices for one training pair draw: a source pose, same-identity
/// targets, and the donor pool of other identities.
#[derive(Clone, Debug)]
pub struct PairDraw {
    pub identity: usize,
    pub source_pose: usize,
    pub target_poses: Vec<usize>,
    pub donor_pool: Vec<usize>,
}

impl Dataset {
    /// Scan a dataset directory; an empty or missing directory yields
    /// an empty dataset rather than an error.
    pub fn open(root: &Path) -> Result<Self> {
        let mut identities = Vec::new();
        if root.is_dir() {
            let mut id_dirs: Vec<PathBuf> = fs::read_dir(root)?
                .filter_map(|e| e.ok())
                .map(|e| e.path())
                .filter(|p| p.is_dir())
                .collect();
            id_dirs.sort();
            for id_dir in id_dirs {
                let mut poses: Vec<String> = fs::read_dir(&id_dir)?
                    .filter_map(|e| e.ok())
                    .map(|e| e.path())
                    .filter(|p| p.is_dir() && p.join("meta.txt").is_file())
                    .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
                    .collect();
                poses.sort();
                if !poses.is_empty() {
                    identities.push(IdentityEntry {
                        name: id_dir
                            .file_name()
                            .map(|n| n.to_string_lossy().into_owned())
                            .unwrap_or_default(),
                        poses,
                    });
                }
            }
        }
        Ok(Dataset {
            root: root.to_path_buf(),
            identities,
        })
    }

    pub fn is_empty(&self) -> bool {
        self.identities.is_empty()
    }

    pub fn load(&self, identity: usize, pose: usize) -> Result<SampleRecord> {
        let id = &self.identities[identity];
        read_sample(&self.root.join(&id.name).join(&id.poses[pose]))
    }

    pub fn gt_texture(&self, identity: usize) -> Result<TextureMap> {
        let id = &self.identities[identity];
        let data = read_png(&self.root.join(&id.name).join("gt_texture.png"))?;
        TextureMap::new(data, "stored")
    }

    /// Draw a source plus `n_t` same-identity targets and the donor
    /// pool; targets never cross identities, donors never include the
    /// source identity.
    pub fn sample_pair(&self, n_t: usize, rng: &mut ChaCha8Rng) -> Result<PairDraw> {
        if self.identities.is_empty() {
            return Err(Error::Dataset("empty dataset".into()));
        }
        let identity = rng.random_range(0..self.identities.len());
        let n_poses = self.identities[identity].poses.len();
        if n_poses < 2 {
            return Err(Error::Dataset(format!(
                "identity {} needs at least 2 poses for pair sampling",
                self.identities[identity].name
            )));
        }
        let source_pose = rng.random_range(0..n_poses);
        let mut target_poses = Vec::with_capacity(n_t);
        for _ in 0..n_t {
            loop {
                let p = rng.random_range(0..n_poses);
                if p != source_pose {
                    target_poses.push(p);
                    break;
                }
            }
        }
        let donor_pool = (0..self.identities.len())
            .filter(|&i| i != identity)
            .collect();
        Ok(PairDraw {
            identity,
            source_pose,
            target_poses,
            donor_pool,
        })
    }
}

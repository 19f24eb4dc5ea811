//! Model and trainer configuration, the flat key-value config format,
//! and the digest that ties checkpoints to the configuration that
//! produced them.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::LossWeights;

/// Which inter-domain attention paths are live (ablation axis).
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Ablation {
    /// All attention paths.
    Full,
    /// Inter-domain masks frozen to zero in both directions.
    Independent,
    /// Only the texture-to-image path.
    TexToImage,
    /// Only the image-to-texture path.
    ImageToTex,
}

impl Ablation {
    pub fn tex_to_image_live(self) -> bool {
        matches!(self, Ablation::Full | Ablation::TexToImage)
    }

    pub fn image_to_tex_live(self) -> bool {
        matches!(self, Ablation::Full | Ablation::ImageToTex)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::Independent => "independent",
            Ablation::TexToImage => "tex2img",
            Ablation::ImageToTex => "img2tex",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Ablation::Full),
            "independent" => Ok(Ablation::Independent),
            "tex2img" => Ok(Ablation::TexToImage),
            "img2tex" => Ok(Ablation::ImageToTex),
            other => Err(Error::contract(format!("unknown ablation '{other}'"))),
        }
    }
}

/// Structural configuration of the dual-domain model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub tex_h: usize,
    pub tex_w: usize,
    /// Number of scales; scale 0 is full resolution, scale `levels-1`
    /// is the coarsest.
    pub levels: usize,
    /// Channels per scale, finest first; length `levels`.
    pub channels: Vec<usize>,
    /// Attention runs at the `attn_levels` finest decoder scales.
    pub attn_levels: usize,
    /// Local attention patch size (odd).
    pub patch_size: usize,
    pub keypoints: usize,
    pub heatmap_sigma: f64,
    /// Hallucination view count the texture merge layer is built for.
    pub n_h: usize,
    pub ablation: Ablation,
    pub reg_neighborhood: usize,
    pub reg_tv_surrogate: bool,
    /// Detach the retained texture feature between the two training
    /// steps (ablation switch; default keeps the graph connected).
    pub detach_texture_feature: bool,
    /// Apply adversarial supervision to step-I hallucination images.
    pub hallu_adversarial: bool,
    /// Feed the estimated texture map to the discriminator's texture
    /// head against unwrapped real images.
    pub texture_adversarial: bool,
    /// Widths of the frozen perceptual extractor layers.
    pub extractor_channels: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_h: 64,
            image_w: 64,
            tex_h: 64,
            tex_w: 64,
            levels: 3,
            channels: vec![32, 64, 128],
            attn_levels: 2,
            patch_size: 3,
            keypoints: 6,
            heatmap_sigma: 1.5,
            n_h: 2,
            ablation: Ablation::Full,
            reg_neighborhood: 5,
            reg_tv_surrogate: false,
            detach_texture_feature: false,
            hallu_adversarial: true,
            texture_adversarial: true,
            extractor_channels: vec![8, 16, 32],
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.channels.len() != self.levels {
            return Err(Error::contract(format!(
                "channels list must have one entry per level ({} levels, {} entries)",
                self.levels,
                self.channels.len()
            )));
        }
        if self.attn_levels == 0 || self.attn_levels >= self.levels + 1 {
            return Err(Error::contract("attn_levels must be in 1..=levels"));
        }
        if self.patch_size % 2 == 0 {
            return Err(Error::contract("patch_size must be odd"));
        }
        let down = 1usize << (self.levels - 1);
        for (name, v) in [
            ("image_h", self.image_h),
            ("image_w", self.image_w),
            ("tex_h", self.tex_h),
            ("tex_w", self.tex_w),
        ] {
            if v == 0 || v % down != 0 {
                return Err(Error::contract(format!(
                    "{name}={v} must be divisible by 2^(levels-1)={down}"
                )));
            }
        }
        for (a, b) in [(self.tex_h, self.image_h), (self.tex_w, self.image_w)] {
            let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
            if hi % lo != 0 || !(hi / lo).is_power_of_two() {
                return Err(Error::contract(
                    "texture and image dims must differ by a power-of-two factor",
                ));
            }
        }
        if self.n_h == 0 {
            return Err(Error::contract("n_h must be at least 1"));
        }
        if self.heatmap_sigma <= 0.0 {
            return Err(Error::contract("heatmap_sigma must be positive"));
        }
        Ok(())
    }

    pub fn img_dims(&self, scale: usize) -> (usize, usize) {
        (self.image_h >> scale, self.image_w >> scale)
    }

    pub fn tex_dims(&self, scale: usize) -> (usize, usize) {
        (self.tex_h >> scale, self.tex_w >> scale)
    }

    /// Attention scales, coarse to fine.
    pub fn attn_scales(&self) -> Vec<usize> {
        (0..self.attn_levels).rev().collect()
    }

    pub fn coarsest(&self) -> usize {
        self.levels - 1
    }
}

/// Full trainer configuration; the config-file keys are exactly these
/// fields (see `to_key_values`).
#[derive(Clone, Debug, PartialEq)]
pub struct TrainerConfig {
    pub n_h: usize,
    pub n_t: usize,
    pub learning_rate: f64,
    pub weights: LossWeights,
    pub seed: u64,
    pub steps: u64,
    pub batch_size: usize,
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub model: ModelConfig,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            n_h: 2,
            n_t: 1,
            learning_rate: 0.0002,
            weights: LossWeights::default(),
            seed: 0,
            steps: 1000,
            batch_size: 1,
            checkpoint_every: 500,
            log_every: 1,
            model: ModelConfig::default(),
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_h == 0 || self.n_t == 0 {
            return Err(Error::contract("n_h and n_t must be at least 1"));
        }
        if self.batch_size != 1 {
            return Err(Error::contract("batch_size is fixed to 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::contract("learning_rate must be positive"));
        }
        self.weights.validate()?;
        let mut m = self.model.clone();
        m.n_h = self.n_h;
        m.validate()
    }

    /// Canonical key-value form (also the config-file format).
    pub fn to_key_values(&self) -> Vec<(String, String)> {
        let m = &self.model;
        let join = |v: &[usize]| {
            v.iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        vec![
            ("n_h".into(), self.n_h.to_string()),
            ("n_t".into(), self.n_t.to_string()),
            ("learning_rate".into(), format!("{}", self.learning_rate)),
            ("lambda_rec".into(), format!("{}", self.weights.rec)),
            ("lambda_perc".into(), format!("{}", self.weights.perc)),
            ("lambda_styl".into(), format!("{}", self.weights.styl)),
            ("lambda_adv".into(), format!("{}", self.weights.adv)),
            ("lambda_cor".into(), format!("{}", self.weights.cor)),
            ("lambda_reg".into(), format!("{}", self.weights.reg)),
            ("lambda_coord".into(), format!("{}", self.weights.coord)),
            ("lambda_cons".into(), format!("{}", self.weights.cons)),
            ("seed".into(), self.seed.to_string()),
            ("steps".into(), self.steps.to_string()),
            ("batch_size".into(), self.batch_size.to_string()),
            ("checkpoint_every".into(), self.checkpoint_every.to_string()),
            ("log_every".into(), self.log_every.to_string()),
            ("image_h".into(), m.image_h.to_string()),
            ("image_w".into(), m.image_w.to_string()),
            ("tex_h".into(), m.tex_h.to_string()),
            ("tex_w".into(), m.tex_w.to_string()),
            ("levels".into(), m.levels.to_string()),
            ("channels".into(), join(&m.channels)),
            ("attn_levels".into(), m.attn_levels.to_string()),
            ("patch_size".into(), m.patch_size.to_string()),
            ("keypoints".into(), m.keypoints.to_string()),
            ("heatmap_sigma".into(), format!("{}", m.heatmap_sigma)),
            ("ablation".into(), m.ablation.as_str().into()),
            ("reg_neighborhood".into(), m.reg_neighborhood.to_string()),
            ("reg_tv_surrogate".into(), m.reg_tv_surrogate.to_string()),
            (
                "detach_texture_feature".into(),
                m.detach_texture_feature.to_string(),
            ),
            ("hallu_adversarial".into(), m.hallu_adversarial.to_string()),
            (
                "texture_adversarial".into(),
                m.texture_adversarial.to_string(),
            ),
            (
                "extractor_channels".into(),
                join(&m.extractor_channels),
            ),
        ]
    }

    pub fn to_config_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.to_key_values() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_config_text())?;
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?;
        Self::parse(&text).map_err(|e| match e {
            Error::Contract(m) => Error::Parse {
                path: path.to_path_buf(),
                message: m,
            },
            other => other,
        })
    }

    /// Parse the flat `key = value` format; unknown keys are rejected,
    /// missing keys fall back to defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::contract(format!(
                    "line {}: expected 'key = value', got '{line}'",
                    lineno + 1
                )));
            };
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let mut cfg = TrainerConfig::default();
        let parse_usize = |v: &str, k: &str| -> Result<usize> {
            v.parse()
                .map_err(|_| Error::contract(format!("{k}: invalid integer '{v}'")))
        };
        let parse_u64 = |v: &str, k: &str| -> Result<u64> {
            v.parse()
                .map_err(|_| Error::contract(format!("{k}: invalid integer '{v}'")))
        };
        let parse_f64 = |v: &str, k: &str| -> Result<f64> {
            v.parse()
                .map_err(|_| Error::contract(format!("{k}: invalid number '{v}'")))
        };
        let parse_bool = |v: &str, k: &str| -> Result<bool> {
            v.parse()
                .map_err(|_| Error::contract(format!("{k}: invalid bool '{v}'")))
        };
        let parse_list = |v: &str, k: &str| -> Result<Vec<usize>> {
            v.split(',')
                .map(|p| {
                    p.trim()
                        .parse()
                        .map_err(|_| Error::contract(format!("{k}: invalid list entry '{p}'")))
                })
                .collect()
        };
        for (k, v) in &map {
            match k.as_str() {
                "n_h" => cfg.n_h = parse_usize(v, k)?,
                "n_t" => cfg.n_t = parse_usize(v, k)?,
                "learning_rate" => cfg.learning_rate = parse_f64(v, k)?,
                "lambda_rec" => cfg.weights.rec = parse_f64(v, k)?,
                "lambda_perc" => cfg.weights.perc = parse_f64(v, k)?,
                "lambda_styl" => cfg.weights.styl = parse_f64(v, k)?,
                "lambda_adv" => cfg.weights.adv = parse_f64(v, k)?,
                "lambda_cor" => cfg.weights.cor = parse_f64(v, k)?,
                "lambda_reg" => cfg.weights.reg = parse_f64(v, k)?,
                "lambda_coord" => cfg.weights.coord = parse_f64(v, k)?,
                "lambda_cons" => cfg.weights.cons = parse_f64(v, k)?,
                "seed" => cfg.seed = parse_u64(v, k)?,
                "steps" => cfg.steps = parse_u64(v, k)?,
                "batch_size" => cfg.batch_size = parse_usize(v, k)?,
                "checkpoint_every" => cfg.checkpoint_every = parse_u64(v, k)?,
                "log_every" => cfg.log_every = parse_u64(v, k)?,
                "image_h" => cfg.model.image_h = parse_usize(v, k)?,
                "image_w" => cfg.model.image_w = parse_usize(v, k)?,
                "tex_h" => cfg.model.tex_h = parse_usize(v, k)?,
                "tex_w" => cfg.model.tex_w = parse_usize(v, k)?,
                "levels" => cfg.model.levels = parse_usize(v, k)?,
                "channels" => cfg.model.channels = parse_list(v, k)?,
                "attn_levels" => cfg.model.attn_levels = parse_usize(v, k)?,
                "patch_size" => cfg.model.patch_size = parse_usize(v, k)?,
                "keypoints" => cfg.model.keypoints = parse_usize(v, k)?,
                "heatmap_sigma" => cfg.model.heatmap_sigma = parse_f64(v, k)?,
                "ablation" => cfg.model.ablation = Ablation::parse(v)?,
                "reg_neighborhood" => cfg.model.reg_neighborhood = parse_usize(v, k)?,
                "reg_tv_surrogate" => cfg.model.reg_tv_surrogate = parse_bool(v, k)?,
                "detach_texture_feature" => {
                    cfg.model.detach_texture_feature = parse_bool(v, k)?
                }
                "hallu_adversarial" => cfg.model.hallu_adversarial = parse_bool(v, k)?,
                "texture_adversarial" => cfg.model.texture_adversarial = parse_bool(v, k)?,
                "extractor_channels" => cfg.model.extractor_channels = parse_list(v, k)?,
                other => {
                    return Err(Error::contract(format!("unknown config key '{other}'")));
                }
            }
        }
        cfg.model.n_h = cfg.n_h;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Digest over the model-structure fields; a checkpoint refuses to
    /// load under a structurally different configuration. Training
    /// schedule fields (steps, cadence, seed, lr, weights) stay out so
    /// runs can resume with a different schedule.
    pub fn config_digest(&self) -> String {
        let m = &self.model;
        let mut s = String::new();
        let _ = write!(
            s,
            "image={}x{};tex={}x{};levels={};channels={:?};attn={};patch={};kp={};sigma={};n_h={};abl={};regn={};regtv={};detach={};halluadv={};texadv={};ext={:?}",
            m.image_h,
            m.image_w,
            m.tex_h,
            m.tex_w,
            m.levels,
            m.channels,
            m.attn_levels,
            m.patch_size,
            m.keypoints,
            m.heatmap_sigma,
            m.n_h,
            m.ablation.as_str(),
            m.reg_neighborhood,
            m.reg_tv_surrogate,
            m.detach_texture_feature,
            m.hallu_adversarial,
            m.texture_adversarial,
            m.extractor_channels,
        );
        let mut hasher = Sha256::new();
        hasher.update(s.as_bytes());
        hex_string(&hasher.finalize())
    }
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    let mut out = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        let _ = write!(out, "{b:02x}");
    }
    out
}

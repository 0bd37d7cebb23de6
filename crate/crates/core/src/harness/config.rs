//! Pipeline configuration with a flat `key = value` text form.

use std::fmt;
use std::str::FromStr;

use crate::denoiser::{DenoiserConfig, NoiseSchedule};
use crate::error::{Error, Result};
use crate::geometry::VoxelGridSpec;
use crate::heads::DECODER_STRIDES;
use crate::losses::{FocalParams, LossWeights};
use crate::scenegen::SceneConfig;

/// How the BEV history queue is fused.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GlobalFusion {
    None,
    Concat,
    Tsa,
    Giam,
}

impl GlobalFusion {
    pub const ALL: [GlobalFusion; 4] = [Self::None, Self::Concat, Self::Tsa, Self::Giam];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Concat => "concat",
            Self::Tsa => "tsa",
            Self::Giam => "giam",
        }
    }
}

impl fmt::Display for GlobalFusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GlobalFusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| Error::Parse(format!("unknown fusion {s:?}, expected none|concat|tsa|giam")))
    }
}

trait ConfigValue: Sized {
    fn parse_value(s: &str) -> Result<Self>;
    fn render(&self) -> String;
}

macro_rules! scalar_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> Result<Self> {
                s.parse().map_err(|e| Error::Parse(format!("{s:?}: {e}")))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

scalar_value!(usize, u64, f64, bool, GlobalFusion);

impl<T: ConfigValue> ConfigValue for [T; 3] {
    fn parse_value(s: &str) -> Result<Self> {
        let parts = s.split(',').map(|p| T::parse_value(p.trim())).collect::<Result<Vec<_>>>()?;
        <[T; 3]>::try_from(parts).map_err(|v| Error::Parse(format!("{s:?}: expected 3 values, got {}", v.len())))
    }
    fn render(&self) -> String {
        self.iter().map(ConfigValue::render).collect::<Vec<_>>().join(",")
    }
}

macro_rules! pipeline_config {
    ($($(#[doc = $doc:literal])* $field:ident: $ty:ty = $default:expr, $key:literal;)*) => {
        /// Every knob of a run. Keys in the text form are the field names in
        /// kebab-case.
        #[derive(Debug, Clone, PartialEq)]
        pub struct PipelineConfig {
            $($(#[doc = $doc])* pub $field: $ty,)*
        }

        impl Default for PipelineConfig {
            fn default() -> Self {
                Self { $($field: $default,)* }
            }
        }

        impl PipelineConfig {
            /// All keys, in echo order.
            pub const KEYS: &'static [&'static str] = &[$($key),*];

            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $($key => self.$field = ConfigValue::parse_value(value.trim())
                        .map_err(|e| Error::Config(format!("{key}: {e}")))?,)*
                    _ => return Err(Error::Config(format!("unknown key {key:?}"))),
                }
                Ok(())
            }

            pub fn get(&self, key: &str) -> Option<String> {
                match key {
                    $($key => Some(self.$field.render()),)*
                    _ => None,
                }
            }
        }
    };
}

pipeline_config! {
    grid_dims: [usize; 3] = [10, 10, 4], "grid-dims";
    grid_min: [f64; 3] = [-5.0, -5.0, -1.0], "grid-min";
    grid_max: [f64; 3] = [5.0, 5.0, 3.0], "grid-max";
    num_cameras: usize = 2, "num-cameras";
    /// Square image side in pixels.
    image_size: usize = 32, "image-size";
    hfov_deg: f64 = 100.0, "hfov-deg";
    num_frames: usize = 8, "num-frames";
    /// History frames `k` fused with the current one.
    queue_len: usize = 4, "queue-len";
    num_objects: usize = 3, "num-objects";
    object_speed_max: f64 = 0.4, "object-speed-max";
    ego_speed: f64 = 0.3, "ego-speed";
    probe_hidden_max: usize = 3, "probe-hidden-max";
    /// Voxel feature width `D`.
    dim: usize = 16, "dim";
    /// BEV channel count; must equal `dim`.
    c_bev: usize = 16, "c-bev";
    m1: usize = 2, "m1";
    n2: usize = 2, "n2";
    /// Sampling points per deformable-attention read.
    points: usize = 2, "points";
    d0: usize = 16, "d0";
    seg_hidden: usize = 32, "seg-hidden";
    denoiser_steps: usize = 6, "denoiser-steps";
    corruption_t: usize = 800, "corruption-t";
    ffn_hidden: usize = 32, "ffn-hidden";
    noise_hidden: usize = 32, "noise-hidden";
    t_max: usize = 1000, "t-max";
    beta_start: f64 = 1e-4, "beta-start";
    beta_end: f64 = 2e-2, "beta-end";
    focal_weight: f64 = 1.0, "focal-weight";
    lovasz_weight: f64 = 1.0, "lovasz-weight";
    thing_weight: f64 = 0.5, "thing-weight";
    focal_gamma: f64 = 2.0, "focal-gamma";
    focal_alpha: f64 = 0.25, "focal-alpha";
    /// Initial decay `ω(1)` of the global interaction.
    decay_init: f64 = 0.5, "decay-init";
    lr: f64 = 1e-3, "lr";
    weight_decay: f64 = 1e-2, "weight-decay";
    epochs: usize = 4, "epochs";
    train_scenes: usize = 20, "train-scenes";
    eval_scenes: usize = 8, "eval-scenes";
    use_local_temporal: bool = true, "use-local-temporal";
    global_fusion: GlobalFusion = GlobalFusion::Giam, "global-fusion";
    denoiser_on: bool = true, "denoiser-on";
    /// Leave class 0 out of the headline mIoU.
    ignore_empty: bool = true, "ignore-empty";
    seed: u64 = 0, "seed";
}

impl PipelineConfig {
    /// Parses `key = value` lines over the defaults. Blank lines and lines
    /// starting with `#` are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {line:?}", n + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// One `key = value` line per field; `parse(echo())` reproduces `self`.
    pub fn echo(&self) -> String {
        Self::KEYS
            .iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("known key")))
            .collect()
    }

    /// Keys whose values differ between `self` and `other`.
    pub fn diff(&self, other: &Self) -> Vec<&'static str> {
        Self::KEYS.iter().copied().filter(|k| self.get(k) != other.get(k)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.grid()?;
        if self.c_bev != self.dim {
            return bad(format!("c-bev ({}) must equal dim ({}) since BEV maps pool voxel features", self.c_bev, self.dim));
        }
        if self.dim % 4 != 0 {
            return bad(format!("dim ({}) must be a multiple of 4 for the 2D positional encoding", self.dim));
        }
        let counts = [
            ("dim", self.dim),
            ("m1", self.m1),
            ("n2", self.n2),
            ("points", self.points),
            ("d0", self.d0),
            ("seg-hidden", self.seg_hidden),
            ("ffn-hidden", self.ffn_hidden),
            ("noise-hidden", self.noise_hidden),
            ("num-cameras", self.num_cameras),
            ("image-size", self.image_size),
            ("epochs", self.epochs),
            ("train-scenes", self.train_scenes),
            ("eval-scenes", self.eval_scenes),
        ];
        if let Some((k, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return bad(format!("{k} must be positive"));
        }
        if self.denoiser_on && self.denoiser_steps == 0 {
            return bad("denoiser-steps must be at least 1 with the denoiser on".into());
        }
        if self.corruption_t > self.t_max {
            return bad(format!("corruption-t ({}) exceeds t-max ({})", self.corruption_t, self.t_max));
        }
        if self.num_frames < self.queue_len + 1 {
            return bad(format!("num-frames ({}) must be at least queue-len + 1", self.num_frames));
        }
        if self.global_fusion != GlobalFusion::None && self.queue_len == 0 {
            return bad(format!("global-fusion {} needs queue-len ≥ 1", self.global_fusion));
        }
        if !(self.decay_init > 0.0 && self.decay_init < 1.0) {
            return bad(format!("decay-init ({}) must lie in (0, 1)", self.decay_init));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite() && self.weight_decay >= 0.0) {
            return bad("lr and weight-decay must be finite and non-negative".into());
        }
        self.schedule()?;
        self.loss_weights().validate()?;
        self.scene_config(0).validate()
    }

    pub fn grid(&self) -> Result<VoxelGridSpec> {
        VoxelGridSpec::new(self.grid_dims, self.grid_min, self.grid_max)
    }

    /// Label grid resolution after the decoder.
    pub fn fine_factors() -> [usize; 3] {
        let mut f = [1; 3];
        for s in DECODER_STRIDES {
            (0..3).for_each(|a| f[a] *= s[a]);
        }
        f
    }

    pub fn fine_grid(&self) -> Result<VoxelGridSpec> {
        Ok(self.grid()?.refined(Self::fine_factors()))
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.t_max, self.beta_start, self.beta_end)
    }

    pub fn denoiser(&self) -> DenoiserConfig {
        DenoiserConfig {
            steps: self.denoiser_steps,
            corruption_t: self.corruption_t,
            ffn_hidden: self.ffn_hidden,
            noise_hidden: self.noise_hidden,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            focal: self.focal_weight,
            lovasz: self.lovasz_weight,
            thing: self.thing_weight,
        }
    }

    pub fn focal(&self) -> FocalParams {
        FocalParams {
            gamma: self.focal_gamma,
            alpha: self.focal_alpha,
        }
    }

    pub fn scene_config(&self, scene_seed: u64) -> SceneConfig {
        SceneConfig {
            grid: self.grid().unwrap_or_else(|_| VoxelGridSpec::desk()),
            fine_factors: Self::fine_factors(),
            num_cameras: self.num_cameras,
            image_size: (self.image_size, self.image_size),
            hfov: self.hfov_deg.to_radians(),
            num_frames: self.num_frames,
            history: self.queue_len,
            num_objects: self.num_objects,
            object_speed: (0.0, self.object_speed_max),
            ego_speed: self.ego_speed,
            probe_hidden: (1, self.probe_hidden_max),
            seed: scene_seed,
            ..SceneConfig::default()
        }
    }
}

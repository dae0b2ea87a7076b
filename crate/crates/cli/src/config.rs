//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use vpcnet::datagen::{DatagenConfig, Intrinsics};
use vpcnet::network::NetConfig;
use vpcnet::training::TrainConfig;

use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub n_coarse: usize,
    pub r: usize,
    pub grid_extent: f64,
    pub stn: bool,
    pub pfe: bool,
    pub refiner: bool,
    pub refiner_fps: bool,
    pub batch_norm: bool,
    pub width_divisor: usize,
    pub steps: u64,
    pub lr0: f64,
    /// Defaults to the desk-scale schedule when unset.
    pub ramp_steps: Option<u64>,
    pub decay_steps: Option<u64>,
    pub grad_clip: Option<f64>,
    pub emd_exact_max: usize,
    pub checkpoint_every: u64,
    pub seed: u64,
    pub n_gt: usize,
    pub n_views: usize,
    pub image_width: usize,
    pub image_height: usize,
    pub focal: f64,
    pub radius_factor: f64,
    pub data: Option<PathBuf>,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let net = NetConfig::default();
        let cam = Intrinsics::default();
        let gen = DatagenConfig::default();
        RunConfig {
            n_coarse: net.n_coarse,
            r: net.r,
            grid_extent: net.grid_extent,
            stn: net.enable_stn,
            pfe: net.enable_pfe,
            refiner: net.enable_refiner,
            refiner_fps: net.refiner_fps,
            // training runs one cloud per step, where per-cloud statistics
            // cancel tiled features and drift from the running averages
            batch_norm: false,
            width_divisor: net.width_divisor,
            steps: 2000,
            lr0: 1e-4,
            ramp_steps: None,
            decay_steps: None,
            grad_clip: None,
            emd_exact_max: 256,
            checkpoint_every: 0,
            seed: 0,
            n_gt: gen.n_gt,
            n_views: gen.n_views,
            image_width: cam.width,
            image_height: cam.height,
            focal: cam.focal,
            radius_factor: gen.radius_factor,
            data: None,
            out: PathBuf::from("runs"),
        }
    }
}

fn value<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| CliError::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(CliError::Config(format!("`{key}`: expected true or false, got `{v}`"))),
    }
}

fn optional<T: FromStr>(key: &str, v: &str) -> Result<Option<T>> {
    if v == "none" || v.is_empty() {
        Ok(None)
    } else {
        value(key, v).map(Some)
    }
}

fn show<T: std::fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "none".to_string(), |x| x.to_string())
}

impl RunConfig {
    /// Parses `key = value` lines over the defaults. Blank lines and `#`
    /// comments are skipped; unknown keys are an error.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected `key = value`", i + 1)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| CliError::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "n_coarse" | "N" => self.n_coarse = value(key, v)?,
            "r" => self.r = value(key, v)?,
            "grid_extent" => self.grid_extent = value(key, v)?,
            "stn" => self.stn = flag(key, v)?,
            "pfe" => self.pfe = flag(key, v)?,
            "refiner" => self.refiner = flag(key, v)?,
            "refiner_fps" => self.refiner_fps = flag(key, v)?,
            "batch_norm" => self.batch_norm = flag(key, v)?,
            "width_divisor" => self.width_divisor = value(key, v)?,
            "steps" => self.steps = value(key, v)?,
            "lr0" => self.lr0 = value(key, v)?,
            "ramp_steps" => self.ramp_steps = optional(key, v)?,
            "decay_steps" => self.decay_steps = optional(key, v)?,
            "grad_clip" => self.grad_clip = optional(key, v)?,
            "emd_exact_max" => self.emd_exact_max = value(key, v)?,
            "checkpoint_every" => self.checkpoint_every = value(key, v)?,
            "seed" => self.seed = value(key, v)?,
            "n_gt" => self.n_gt = value(key, v)?,
            "n_views" => self.n_views = value(key, v)?,
            "image_width" => self.image_width = value(key, v)?,
            "image_height" => self.image_height = value(key, v)?,
            "focal" => self.focal = value(key, v)?,
            "radius_factor" => self.radius_factor = value(key, v)?,
            "data" => self.data = optional(key, v)?,
            "out" => self.out = PathBuf::from(v),
            _ => return Err(CliError::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Every setting, one `key = value` line each, in a fixed order.
    /// Parsing the result gives back the same configuration.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("n_coarse", self.n_coarse.to_string());
        kv("r", self.r.to_string());
        kv("grid_extent", self.grid_extent.to_string());
        kv("stn", self.stn.to_string());
        kv("pfe", self.pfe.to_string());
        kv("refiner", self.refiner.to_string());
        kv("refiner_fps", self.refiner_fps.to_string());
        kv("batch_norm", self.batch_norm.to_string());
        kv("width_divisor", self.width_divisor.to_string());
        kv("steps", self.steps.to_string());
        kv("lr0", self.lr0.to_string());
        kv("ramp_steps", show(&self.ramp_steps));
        kv("decay_steps", show(&self.decay_steps));
        kv("grad_clip", show(&self.grad_clip));
        kv("emd_exact_max", self.emd_exact_max.to_string());
        kv("checkpoint_every", self.checkpoint_every.to_string());
        kv("seed", self.seed.to_string());
        kv("n_gt", self.n_gt.to_string());
        kv("n_views", self.n_views.to_string());
        kv("image_width", self.image_width.to_string());
        kv("image_height", self.image_height.to_string());
        kv("focal", self.focal.to_string());
        kv("radius_factor", self.radius_factor.to_string());
        kv("data", show(&self.data.as_ref().map(|p| p.display())));
        kv("out", self.out.display().to_string());
        s
    }

    pub fn net(&self) -> NetConfig {
        NetConfig {
            enable_stn: self.stn,
            enable_pfe: self.pfe,
            enable_refiner: self.refiner,
            refiner_fps: self.refiner_fps,
            n_coarse: self.n_coarse,
            r: self.r,
            grid_extent: self.grid_extent,
            batch_norm: self.batch_norm,
            width_divisor: self.width_divisor,
        }
    }

    pub fn train(&self) -> TrainConfig {
        let desk = TrainConfig::desk(self.steps, self.seed);
        TrainConfig {
            lr0: self.lr0,
            ramp_steps: self.ramp_steps.unwrap_or(desk.ramp_steps),
            decay_steps: self.decay_steps.unwrap_or(desk.decay_steps),
            grad_clip: self.grad_clip,
            emd_exact_max: self.emd_exact_max,
            ..desk
        }
    }

    pub fn datagen(&self) -> DatagenConfig {
        DatagenConfig {
            n_gt: self.n_gt,
            n_views: self.n_views,
            intrinsics: Intrinsics {
                width: self.image_width,
                height: self.image_height,
                focal: self.focal,
            },
            radius_factor: self.radius_factor,
            ..DatagenConfig::default()
        }
    }
}

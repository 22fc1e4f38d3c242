//! Run configuration and its flat `key = value` text form.

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::networks::NetworkConfig;
use crate::optim::AdamConfig;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub crop_size: usize,
    pub stage1_iters: usize,
    pub stage2_iters: usize,
    pub weights: LossWeights,
    pub margin: f64,
    pub n_prompts: usize,
    pub codebook_size: usize,
    pub lr: f64,
    pub base_channels: usize,
    pub n_down: usize,
    pub code_dim: usize,
    pub light_dim: usize,
    pub negative_slope: f64,
    pub holdout: usize,
    pub use_fusion: bool,
    pub use_lapm: bool,
    pub use_lqm: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            batch_size: 4,
            crop_size: 32,
            stage1_iters: 2000,
            stage2_iters: 1000,
            weights: LossWeights::default(),
            margin: 0.1,
            n_prompts: 5,
            codebook_size: 64,
            lr: 1e-3,
            base_channels: 8,
            n_down: 3,
            code_dim: 32,
            light_dim: 16,
            negative_slope: 0.2,
            holdout: 8,
            use_fusion: true,
            use_lapm: true,
            use_lqm: true,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Kind {
    Int,
    Float,
    Bool,
}

const KEYS: &[(&str, Kind)] = &[
    ("seed", Kind::Int),
    ("batch_size", Kind::Int),
    ("crop_size", Kind::Int),
    ("stage1_iters", Kind::Int),
    ("stage2_iters", Kind::Int),
    ("sigma", Kind::Float),
    ("gamma", Kind::Float),
    ("lambda", Kind::Float),
    ("margin", Kind::Float),
    ("n_prompts", Kind::Int),
    ("codebook_size", Kind::Int),
    ("lr", Kind::Float),
    ("base_channels", Kind::Int),
    ("n_down", Kind::Int),
    ("code_dim", Kind::Int),
    ("light_dim", Kind::Int),
    ("negative_slope", Kind::Float),
    ("holdout", Kind::Int),
    ("use_fusion", Kind::Bool),
    ("use_lapm", Kind::Bool),
    ("use_lqm", Kind::Bool),
];

impl TrainConfig {
    pub fn network(&self) -> NetworkConfig {
        NetworkConfig {
            base_channels: self.base_channels,
            n_down: self.n_down,
            code_dim: self.code_dim,
            image_channels: 3,
            negative_slope: self.negative_slope,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("batch_size", self.batch_size),
            ("crop_size", self.crop_size),
            ("stage1_iters", self.stage1_iters),
            ("stage2_iters", self.stage2_iters),
            ("n_prompts", self.n_prompts),
            ("codebook_size", self.codebook_size),
            ("light_dim", self.light_dim),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::arg("config", format!("{name} must be positive")));
            }
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::arg("config", "lr must be positive"));
        }
        if !(self.margin.is_finite() && self.margin >= 0.0) {
            return Err(Error::arg("config", "margin must be non-negative"));
        }
        if !self.crop_size.is_multiple_of(1 << self.n_down.min(30)) {
            return Err(Error::arg("config", "crop_size must be divisible by 2^n_down"));
        }
        self.weights.validate()?;
        self.network().validate()
    }

    fn get(&self, key: &str) -> f64 {
        match key {
            "seed" => self.seed as f64,
            "batch_size" => self.batch_size as f64,
            "crop_size" => self.crop_size as f64,
            "stage1_iters" => self.stage1_iters as f64,
            "stage2_iters" => self.stage2_iters as f64,
            "sigma" => self.weights.sigma,
            "gamma" => self.weights.gamma,
            "lambda" => self.weights.lambda_lcl,
            "margin" => self.margin,
            "n_prompts" => self.n_prompts as f64,
            "codebook_size" => self.codebook_size as f64,
            "lr" => self.lr,
            "base_channels" => self.base_channels as f64,
            "n_down" => self.n_down as f64,
            "code_dim" => self.code_dim as f64,
            "light_dim" => self.light_dim as f64,
            "negative_slope" => self.negative_slope,
            "holdout" => self.holdout as f64,
            "use_fusion" => self.use_fusion as u8 as f64,
            "use_lapm" => self.use_lapm as u8 as f64,
            "use_lqm" => self.use_lqm as u8 as f64,
            _ => unreachable!("unknown key {key}"),
        }
    }

    fn set_int(&mut self, key: &str, v: u64) {
        let u = v as usize;
        match key {
            "seed" => self.seed = v,
            "batch_size" => self.batch_size = u,
            "crop_size" => self.crop_size = u,
            "stage1_iters" => self.stage1_iters = u,
            "stage2_iters" => self.stage2_iters = u,
            "n_prompts" => self.n_prompts = u,
            "codebook_size" => self.codebook_size = u,
            "base_channels" => self.base_channels = u,
            "n_down" => self.n_down = u,
            "code_dim" => self.code_dim = u,
            "light_dim" => self.light_dim = u,
            "holdout" => self.holdout = u,
            _ => unreachable!("unknown int key {key}"),
        }
    }

    fn set_float(&mut self, key: &str, v: f64) {
        match key {
            "sigma" => self.weights.sigma = v,
            "gamma" => self.weights.gamma = v,
            "lambda" => self.weights.lambda_lcl = v,
            "margin" => self.margin = v,
            "lr" => self.lr = v,
            "negative_slope" => self.negative_slope = v,
            _ => unreachable!("unknown float key {key}"),
        }
    }

    fn set_bool(&mut self, key: &str, v: bool) {
        match key {
            "use_fusion" => self.use_fusion = v,
            "use_lapm" => self.use_lapm = v,
            "use_lqm" => self.use_lqm = v,
            _ => unreachable!("unknown bool key {key}"),
        }
    }

    /// Set one key from its text value.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let (_, kind) = KEYS
            .iter()
            .find(|(k, _)| *k == key)
            .ok_or_else(|| format!("unknown key `{key}`"))?;
        match kind {
            Kind::Int => self.set_int(key, value.parse().map_err(|_| format!("`{key}` expects an integer"))?),
            Kind::Float => {
                let v: f64 = value.parse().map_err(|_| format!("`{key}` expects a number"))?;
                if !v.is_finite() {
                    return Err(format!("`{key}` must be finite"));
                }
                self.set_float(key, v)
            }
            Kind::Bool => self.set_bool(
                key,
                match value {
                    "true" | "1" => true,
                    "false" | "0" => false,
                    _ => return Err(format!("`{key}` expects true or false")),
                },
            ),
        }
        Ok(())
    }

    /// Overlay `key = value` lines onto `self`. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut offset = 0;
        for line in text.split_inclusive('\n') {
            let start = offset;
            offset += line.len();
            let body = line.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (k, v) = body.split_once('=').ok_or_else(|| Error::Parse {
                offset: start,
                msg: "expected key = value".into(),
            })?;
            self.set(k.trim(), v.trim())
                .map_err(|msg| Error::Parse { offset: start, msg })?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, kind) in KEYS {
            let v = self.get(k);
            match kind {
                Kind::Int if *k == "seed" => s.push_str(&format!("{k} = {}\n", self.seed)),
                Kind::Int => s.push_str(&format!("{k} = {}\n", v as u64)),
                Kind::Float => s.push_str(&format!("{k} = {v}\n")),
                Kind::Bool => s.push_str(&format!("{k} = {}\n", v != 0.0)),
            }
        }
        s
    }

    /// Store every key as a `config.<key>` scalar; the seed is split into 32-bit halves.
    pub fn write_to(&self, ck: &mut Checkpoint) {
        for (k, _) in KEYS {
            if *k == "seed" {
                ck.insert_scalar("config.seed_hi", (self.seed >> 32) as f64);
                ck.insert_scalar("config.seed_lo", (self.seed & 0xFFFF_FFFF) as f64);
            } else {
                ck.insert_scalar(format!("config.{k}"), self.get(k));
            }
        }
    }

    pub fn read_from(ck: &Checkpoint) -> Result<Self> {
        let mut c = Self::default();
        for (k, kind) in KEYS {
            if *k == "seed" {
                let hi = ck.scalar("config.seed_hi")? as u64;
                let lo = ck.scalar("config.seed_lo")? as u64;
                c.seed = (hi << 32) | lo;
                continue;
            }
            let v = ck.scalar(&format!("config.{k}"))?;
            match kind {
                Kind::Int => c.set_int(k, v as u64),
                Kind::Float => c.set_float(k, v),
                Kind::Bool => c.set_bool(k, v != 0.0),
            }
        }
        Ok(c)
    }
}

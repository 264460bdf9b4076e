//! Flat `key = value` run configuration.
//!
//! Every dimension, schedule constant and path used by the pipeline lives in
//! one [`RunConfig`]. Values resolve with precedence CLI override > file >
//! default. Unknown keys are rejected. Two hashes are derived from the
//! canonical (sorted) rendering: [`RunConfig::hash`] over everything but
//! paths and the worker count, and
//! [`RunConfig::model_hash`] over the architecture keys that checkpoints must
//! agree on.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const CONFIG_VERSION: &str = "1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Group {
    Model,
    /// Paths and worker count: never change results, so excluded from hashes.
    Location,
    Other,
}

macro_rules! run_config {
    ($( $group:ident $name:ident : $ty:ty = $default:expr ; )*) => {
        /// Every tunable of the pipeline; see the crate README for meanings.
        #[derive(Debug, Clone, PartialEq)]
        pub struct RunConfig {
            $( pub $name: $ty, )*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                Self { $( $name: $default, )* }
            }
        }

        impl RunConfig {
            const KEYS: &'static [(&'static str, Group)] = &[ $( (stringify!($name), Group::$group), )* ];

            /// Set one key from its textual value.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $( stringify!($name) => {
                        self.$name = ConfigValue::parse(value).map_err(|e| {
                            Error::Config(format!("key {key}: cannot parse {value:?}: {e}"))
                        })?;
                    } )*
                    _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
                }
                Ok(())
            }

            /// Canonical textual value of one key.
            pub fn get(&self, key: &str) -> Option<String> {
                match key {
                    $( stringify!($name) => Some(ConfigValue::render(&self.$name)), )*
                    _ => None,
                }
            }
        }
    };
}

trait ConfigValue: Sized {
    fn parse(s: &str) -> std::result::Result<Self, String>;
    fn render(&self) -> String;
}

impl ConfigValue for usize {
    fn parse(s: &str) -> std::result::Result<Self, String> {
        s.parse().map_err(|e: std::num::ParseIntError| e.to_string())
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for u64 {
    fn parse(s: &str) -> std::result::Result<Self, String> {
        s.parse().map_err(|e: std::num::ParseIntError| e.to_string())
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for f64 {
    fn parse(s: &str) -> std::result::Result<Self, String> {
        let v: f64 = s.parse().map_err(|e: std::num::ParseFloatError| e.to_string())?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err("value must be finite".into())
        }
    }
    fn render(&self) -> String {
        // Shortest round-trip representation.
        format!("{self:?}")
    }
}

impl ConfigValue for bool {
    fn parse(s: &str) -> std::result::Result<Self, String> {
        match s {
            "true" | "on" | "1" | "yes" => Ok(true),
            "false" | "off" | "0" | "no" => Ok(false),
            _ => Err(format!("expected a boolean, got {s:?}")),
        }
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for String {
    fn parse(s: &str) -> std::result::Result<Self, String> {
        Ok(s.to_string())
    }
    fn render(&self) -> String {
        self.clone()
    }
}

run_config! {
    Other version: String = CONFIG_VERSION.to_string();
    Other seed: u64 = 0;
    Location run_dir: String = "runs/default".to_string();
    Location data: String = String::new();
    Location workers: usize = 1;
    Other ablation: String = "ttt".to_string();

    // simulator / dataset
    Other task: String = "ppN".to_string();
    Other aliased: bool = true;
    Other episodes: usize = 5000;
    Other horizon: usize = 200;
    Other settle_steps: usize = 12;

    // dimensions
    Model d_f: usize = 64;
    Model d_b: usize = 64;
    Model d_z: usize = 16;
    Model d_i: usize = 64;
    Model d_s: usize = 64;
    Model d_backbone: usize = 128;
    Model d_policy: usize = 64;
    Model k_window: usize = 5;
    Model chunk: usize = 16;
    Model diffusion_steps: usize = 100;
    Model patch: usize = 8;
    Model enc_blocks: usize = 2;
    Model enc_heads: usize = 2;
    Model belief_blocks: usize = 1;
    Model belief_heads: usize = 2;
    Model policy_blocks: usize = 2;
    Model policy_heads: usize = 2;
    Model backbone_blocks: usize = 2;
    Model hidden_mult: usize = 2;
    Model diff_beta_start: f64 = 1e-4;
    Model diff_beta_end: f64 = 0.02;
    Model backbone_seed: u64 = 20_240_601;

    // objectives and schedules
    Other lambda5: f64 = 0.5;
    Other w_inv: f64 = 0.1;
    Other kl_beta_start: f64 = 1e-3;
    Other kl_beta_end: f64 = 0.1;
    Other kl_warmup_frac: f64 = 0.3;
    Other tau_ema: f64 = 0.995;
    Other tau_temp: f64 = 0.1;
    Other delta_max_offset: usize = 4;

    // training
    Other warmstart_iters: usize = 5000;
    Other warmstart_batch: usize = 32;
    Other warmstart_lr: f64 = 1e-3;
    Other belief_iters: usize = 20000;
    Other belief_batch: usize = 32;
    Other belief_lr: f64 = 1e-3;
    Other policy_iters: usize = 30000;
    Other policy_batch: usize = 32;
    Other policy_lr: f64 = 1e-3;
    Other grad_clip: f64 = 1.0;
    Other augment: bool = true;
    Other log_every: usize = 50;

    // control
    Other exec_stride: usize = 8;
    Other s_warm: usize = 30;
    Other belief_stride: usize = 1;
    Other x0_clip: f64 = 4.0;

    // evaluation and analysis
    Other eval_episodes: usize = 40;
    Other perturb: bool = false;
    Other frame_drop: f64 = 0.05;
    Other obs_noise: f64 = 0.02;
    Other analysis_pairs: usize = 1000;
    Other analysis_episodes: usize = 50;
    Other stochastic_samples: usize = 16;
}

impl RunConfig {
    /// Parse `key = value` text. `#` starts a comment; blank lines are ignored.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_str(text)?;
        Ok(cfg)
    }

    pub fn apply_str(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            self.set(k.trim(), v.trim())?;
        }
        self.validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text)
    }

    /// Apply `key=value` overrides (CLI has the highest precedence).
    pub fn apply_overrides<'a>(&mut self, kvs: impl IntoIterator<Item = &'a str>) -> Result<()> {
        for kv in kvs {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {kv:?} is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.version != CONFIG_VERSION {
            return fail(&format!(
                "config version {} unsupported (expected {CONFIG_VERSION})",
                self.version
            ));
        }
        if self.k_window == 0 || self.chunk == 0 || self.diffusion_steps == 0 {
            return fail("k_window, chunk and diffusion_steps must be positive");
        }
        if self.exec_stride == 0 || self.exec_stride > self.chunk {
            return fail("exec_stride must lie in [1, chunk]");
        }
        if self.s_warm == 0 || self.s_warm >= self.diffusion_steps {
            return fail("s_warm must lie in [1, diffusion_steps)");
        }
        if 32 % self.patch != 0 {
            return fail("patch must divide the 32-pixel image side");
        }
        for (name, d, h) in [
            ("d_f", self.d_f, self.enc_heads),
            ("d_b", self.d_b, self.belief_heads),
            ("d_policy", self.d_policy, self.policy_heads),
        ] {
            if h == 0 || d % h != 0 {
                return fail(&format!("{name} must be divisible by its head count"));
            }
        }
        if !(0.0..1.0).contains(&self.tau_ema) && self.tau_ema != 1.0 {
            return fail("tau_ema must lie in [0, 1]");
        }
        if self.belief_stride == 0 {
            return fail("belief_stride must be positive");
        }
        crate::baselines::AblationConfig::parse(&self.ablation)?;
        Ok(())
    }

    /// Canonical text: one `key = value` line per key, sorted by key.
    pub fn canonical(&self) -> String {
        self.render(|_| true)
    }

    fn render(&self, keep: impl Fn(Group) -> bool) -> String {
        let sorted: BTreeMap<&str, String> = Self::KEYS
            .iter()
            .filter(|(_, g)| keep(*g))
            .map(|(k, _)| (*k, self.get(k).expect("declared key")))
            .collect();
        let mut out = String::new();
        for (k, v) in sorted {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Hash over every key except paths and the worker count.
    pub fn hash(&self) -> String {
        short_hash(self.render(|g| g != Group::Location).as_bytes())
    }

    /// Hash over the architecture keys shared by all checkpoints of a run.
    pub fn model_hash(&self) -> String {
        short_hash(self.render(|g| g == Group::Model).as_bytes())
    }

    pub fn keys() -> impl Iterator<Item = &'static str> {
        Self::KEYS.iter().map(|(k, _)| *k)
    }

    pub fn run_path(&self, file: &str) -> std::path::PathBuf {
        Path::new(&self.run_dir).join(file)
    }

    pub fn data_path(&self) -> std::path::PathBuf {
        if self.data.is_empty() {
            self.run_path("data.bin")
        } else {
            self.data.clone().into()
        }
    }
}

/// First 16 hex digits of SHA-256.
pub fn short_hash(bytes: &[u8]) -> String {
    let d = Sha256::digest(bytes);
    d.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

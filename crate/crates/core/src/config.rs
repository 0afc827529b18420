//! Flat `key = value` run configuration covering model, training and generator fields.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::data::GeneratorConfig;
use crate::error::{CaupsiError, Result};
use crate::model::{Ablation, ModelConfig};
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: GeneratorConfig,
    pub ablation: Ablation,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: GeneratorConfig::default(),
            ablation: Ablation::none(),
        }
    }
}

fn parse_value<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| CaupsiError::Config(format!("cannot parse value '{v}' for key '{key}'")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(CaupsiError::Config(format!("key '{key}' expects true or false, got '{v}'"))),
    }
}

fn parse_list4(key: &str, v: &str) -> Result<[f64; 4]> {
    let parts: Vec<f64> = v.split(',').map(|s| parse_value(key, s.trim())).collect::<Result<_>>()?;
    parts
        .try_into()
        .map_err(|p: Vec<f64>| CaupsiError::Config(format!("key '{key}' expects 4 comma-separated values, got {}", p.len())))
}

macro_rules! config_keys {
    ($( $key:literal => $($field:ident).+ : $kind:ident ),* $(,)?) => {
        /// Every settable key, in snapshot order.
        pub const KEYS: &[&str] = &[$($key),*];

        fn set_field(cfg: &mut RunConfig, key: &str, v: &str) -> Result<bool> {
            match key {
                $($key => { cfg.$($field).+ = config_keys!(@parse $kind, key, v)?; Ok(true) })*
                _ => Ok(false),
            }
        }

        fn write_fields(cfg: &RunConfig, out: &mut String) {
            $( let _ = writeln!(out, "{} = {}", $key, config_keys!(@show $kind, cfg.$($field).+)); )*
        }
    };
    (@parse num, $k:expr, $v:expr) => { parse_value($k, $v) };
    (@parse bool, $k:expr, $v:expr) => { parse_bool($k, $v) };
    (@parse list4, $k:expr, $v:expr) => { parse_list4($k, $v) };
    (@show num, $e:expr) => { $e };
    (@show bool, $e:expr) => { $e };
    (@show list4, $e:expr) => { $e.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",") };
}

config_keys! {
    "model.d_c" => model.d_c: num,
    "model.d_f" => model.d_f: num,
    "model.d_z" => model.d_z: num,
    "model.d_t" => model.d_t: num,
    "model.d_e" => model.d_e: num,
    "model.d_psi" => model.d_psi: num,
    "model.heads" => model.heads: num,
    "model.head_hidden" => model.head_hidden: num,
    "model.scene_hidden" => model.scene_hidden: num,
    "model.adv_hidden" => model.adv_hidden: num,
    "model.dropout" => model.dropout: num,
    "model.ln_eps" => model.ln_eps: num,
    "model.multi_token" => model.multi_token: bool,
    "model.encoder_seed" => model.encoder_seed: num,
    "clip.channels" => model.channels: num,
    "clip.height" => model.height: num,
    "clip.width" => model.width: num,
    "clip.frames" => data.shape.frames: num,
    "data.n_samples" => data.n_samples: num,
    "data.seed" => data.seed: num,
    "data.causal_strength" => data.causal_strength: num,
    "data.difficulty" => data.difficulty: num,
    "data.separation" => data.separation: num,
    "train.lr_max" => train.lr_max: num,
    "train.lr_min" => train.lr_min: num,
    "train.warmup_epochs" => train.warmup_epochs: num,
    "train.max_epochs" => train.max_epochs: num,
    "train.batch_size" => train.batch_size: num,
    "train.accum_steps" => train.accum_steps: num,
    "train.weight_decay" => train.weight_decay: num,
    "train.ema_beta" => train.ema_beta: num,
    "train.ema_warmup" => train.ema_warmup: bool,
    "train.mixup_alpha" => train.mixup_alpha: num,
    "train.clip_norm" => train.clip_norm: num,
    "train.patience" => train.patience: num,
    "train.flip_p" => train.flip_p: num,
    "train.lambda" => train.lambda: list4,
    "train.label_smoothing" => train.label_smoothing: num,
    "train.gamma_adv" => train.gamma_adv: num,
    "train.lambda_grl" => train.lambda_grl: num,
    "train.domain_k_min" => train.domain_k_min: num,
    "train.domain_k_max" => train.domain_k_max: num,
    "train.eval_batch" => train.eval_batch: num,
    "train.seed" => train.seed: num,
}

impl RunConfig {
    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "ablation" => {
                let items: Vec<&str> = value.split(',').map(str::trim).filter(|s| !s.is_empty() && *s != "none").collect();
                self.ablation = Ablation::parse_list(&items)?;
                Ok(())
            }
            // derived; accepted so snapshots parse back, checked in `parse`
            "psi_forced_zero" => parse_bool(key, value).map(|_| ()),
            _ => {
                if set_field(self, key, value)? {
                    self.sync_shape();
                    Ok(())
                } else {
                    Err(CaupsiError::Config(format!("unknown config key '{key}'")))
                }
            }
        }
    }

    fn sync_shape(&mut self) {
        self.data.shape.channels = self.model.channels;
        self.data.shape.height = self.model.height;
        self.data.shape.width = self.model.width;
    }

    /// Defaults overridden by the lines of `text`; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.sync_shape();
        let mut psi_zero = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CaupsiError::Config(format!("line {}: expected 'key = value', got '{raw}'", n + 1)))?;
            let k = k.trim();
            if k == "psi_forced_zero" {
                psi_zero = Some(parse_bool(k, v.trim())?);
            }
            cfg.set(k, v).map_err(|e| match e {
                CaupsiError::Config(m) => CaupsiError::Config(format!("line {}: {m}", n + 1)),
                other => other,
            })?;
        }
        if let Some(z) = psi_zero {
            if z != cfg.ablation.psi_forced_zero() {
                return Err(CaupsiError::Config(format!(
                    "psi_forced_zero = {z} contradicts ablation '{}'",
                    cfg.ablation
                )));
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CaupsiError::io(path, e))?;
        Self::parse(&text)
    }

    /// Complete snapshot; parsing it back yields an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        write_fields(self, &mut s);
        let _ = writeln!(s, "ablation = {}", self.ablation);
        let _ = writeln!(s, "psi_forced_zero = {}", self.ablation.psi_forced_zero());
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.data.validate()?;
        let mut m = self.model;
        m.domain_k = m.domain_k.max(2);
        m.validate()
    }
}

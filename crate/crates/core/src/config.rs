//! Line-oriented run configuration: `key = value` pairs, `#` comments.
//!
//! Every key has a default; unknown keys are rejected. [`RunConfig::to_text`]
//! writes the fully resolved configuration in the same format.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{config_err, Result};
use crate::masker::MaskKind;
use crate::model::{ClassifierMode, DecoderVariant, ModelConfig};
use crate::sampler::{standard_rho_grid, ObservationRatio, SamplingConfig, SamplingMode};
use crate::trainer::TrainConfig;
use crate::video::SyntheticConfig;

pub const SEED_ENV: &str = "EAST_SEED";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: SyntheticConfig,
    /// Frame geometry and class count are taken from `data`; the init seed from `train.seed`.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval_grid: Vec<f64>,
    /// `None` evaluates with the training mask.
    pub eval_mask: Option<MaskKind>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: SyntheticConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval_grid: standard_rho_grid(),
            eval_mask: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| config_err(format!("invalid value '{value}' for key '{key}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(config_err(format!("invalid boolean '{value}' for key '{key}'"))),
    }
}

fn parse_decoder(value: &str) -> Result<DecoderVariant> {
    match value {
        "identity" => Ok(DecoderVariant::Identity),
        "direct" => Ok(DecoderVariant::Direct),
        "autoregressive" => Ok(DecoderVariant::Autoregressive),
        _ => Err(config_err(format!("unknown decoder '{value}'"))),
    }
}

pub fn decoder_name(d: DecoderVariant) -> &'static str {
    match d {
        DecoderVariant::Identity => "identity",
        DecoderVariant::Direct => "direct",
        DecoderVariant::Autoregressive => "autoregressive",
    }
}

fn parse_classifier(value: &str) -> Result<ClassifierMode> {
    match value {
        "shared" => Ok(ClassifierMode::Shared),
        "separate" => Ok(ClassifierMode::Separate),
        _ => Err(config_err(format!("unknown classifier mode '{value}'"))),
    }
}

fn classifier_name(c: ClassifierMode) -> &'static str {
    match c {
        ClassifierMode::Shared => "shared",
        ClassifierMode::Separate => "separate",
    }
}

/// Parses `start:stop:step` (inclusive within 1e-9) or a comma-separated list.
pub fn parse_rho_grid(s: &str) -> Result<Vec<f64>> {
    let s = s.trim();
    let grid = if s.contains(':') {
        let parts: Vec<&str> = s.split(':').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(config_err(format!("rho grid '{s}' must be start:stop:step")));
        }
        let (start, stop, step): (f64, f64, f64) =
            (parse("rho grid", parts[0])?, parse("rho grid", parts[1])?, parse("rho grid", parts[2])?);
        if !(step > 0.0) || stop < start {
            return Err(config_err(format!("rho grid '{s}' needs step > 0 and stop >= start")));
        }
        let n = ((stop - start) / step + 1e-9).floor() as usize;
        (0..=n).map(|i| ((start + i as f64 * step) * 1e9).round() / 1e9).collect()
    } else {
        s.split(',').map(|v| parse("rho grid", v.trim())).collect::<Result<Vec<f64>>>()?
    };
    if grid.is_empty() {
        return Err(config_err("rho grid is empty"));
    }
    for &r in &grid {
        ObservationRatio::new(r)?;
    }
    Ok(grid)
}

fn format_list(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Defaults overridden by the lines of `text`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(config_err(format!("line {}: expected 'key = value', got '{line}'", n + 1)));
            };
            cfg.set(key.trim(), value.trim()).map_err(|e| config_err(format!("line {}: {e}", n + 1)))?;
        }
        Ok(cfg)
    }

    /// Applies one setting; also used for command-line overrides.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let d = &mut self.data;
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "data.n1" => d.n1 = parse(key, v)?,
            "data.n2" => d.n2 = parse(key, v)?,
            "data.frames" => d.frames = parse(key, v)?,
            "data.height" => d.height = parse(key, v)?,
            "data.width" => d.width = parse(key, v)?,
            "data.channels" => d.channels = parse(key, v)?,
            "data.sprite_size" => d.sprite_size = parse(key, v)?,
            "data.speed" => d.speed = parse(key, v)?,
            "data.noise_std" => d.noise_std = parse(key, v)?,
            "data.phase_boundary" => d.phase_boundary = parse(key, v)?,
            "data.videos_per_class" => d.videos_per_class = parse(key, v)?,
            "data.seed" => d.seed = parse(key, v)?,
            "model.dim" => m.dim = parse(key, v)?,
            "model.enc_layers" => m.enc_layers = parse(key, v)?,
            "model.enc_heads" => m.enc_heads = parse(key, v)?,
            "model.decoder" => m.decoder = parse_decoder(v)?,
            "model.dec_layers" => m.dec_layers = parse(key, v)?,
            "model.dec_heads" => m.dec_heads = parse(key, v)?,
            "model.patch" => m.patch = parse(key, v)?,
            "model.tubelet" => m.tubelet = parse(key, v)?,
            "model.clip_len" => m.clip_len = parse(key, v)?,
            "model.classifier" => m.classifier = parse_classifier(v)?,
            "model.mlp_ratio" => m.mlp_ratio = parse(key, v)?,
            "train.base_lr" => t.base_lr = parse(key, v)?,
            "train.weight_decay" => t.weight_decay = parse(key, v)?,
            "train.batch_size" => t.batch_size = parse(key, v)?,
            "train.steps" => t.steps = parse(key, v)?,
            "train.warmup_frac" => t.warmup_frac = parse(key, v)?,
            "train.seed" => t.seed = parse(key, v)?,
            "train.use_oracle" => t.use_oracle = parse_bool(key, v)?,
            "train.use_l2" => t.use_l2 = parse_bool(key, v)?,
            "train.l2_weight" => t.l2_weight = parse(key, v)?,
            "train.sampling" => {
                t.sampling.mode = match v {
                    "randomized" => SamplingMode::Randomized,
                    _ => match v.strip_prefix("fixed:") {
                        Some(r) => SamplingMode::Fixed(ObservationRatio::new(parse(key, r)?)?),
                        None => return Err(config_err(format!("sampling must be 'randomized' or 'fixed:<rho>', got '{v}'"))),
                    },
                }
            }
            "train.rho_grid" => t.sampling.rho_grid = parse_rho_grid(v)?,
            "train.mask" => t.mask_kind = parse(key, v)?,
            "train.mask_k" => t.mask_k = parse(key, v)?,
            "eval.rho_grid" => self.eval_grid = parse_rho_grid(v)?,
            "eval.mask" => {
                self.eval_mask = if v == "train" { None } else { Some(parse(key, v)?) };
            }
            _ => return Err(config_err(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Replaces the training seed with `EAST_SEED` when that variable is set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.train.seed = parse(SEED_ENV, v.trim())?;
        }
        Ok(())
    }

    /// Model configuration with geometry, class count and seed filled in.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            frame_height: self.data.height,
            frame_width: self.data.width,
            channels: self.data.channels,
            num_classes: self.data.num_classes(),
            init_seed: self.train.seed,
            ..self.model.clone()
        }
    }

    /// Training configuration with the sampler's clip length tied to the model.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            sampling: SamplingConfig { clip_len: self.model.clip_len, ..self.train.sampling.clone() },
            ..self.train.clone()
        }
    }

    pub fn eval_mask_kind(&self) -> MaskKind {
        self.eval_mask.unwrap_or(self.train.mask_kind)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model_config().validate()?;
        self.train_config().validate()?;
        let min_frames = self.model.clip_len;
        if self.data.frames < min_frames {
            return Err(config_err(format!(
                "videos of {} frames are shorter than the clip length {min_frames}",
                self.data.frames
            )));
        }
        Ok(())
    }

    /// Every key with its resolved value.
    pub fn to_text(&self) -> String {
        let (d, m, t) = (&self.data, &self.model, &self.train);
        let mut o = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(o, "{k} = {v}");
        };
        kv("data.n1", d.n1.to_string());
        kv("data.n2", d.n2.to_string());
        kv("data.frames", d.frames.to_string());
        kv("data.height", d.height.to_string());
        kv("data.width", d.width.to_string());
        kv("data.channels", d.channels.to_string());
        kv("data.sprite_size", d.sprite_size.to_string());
        kv("data.speed", d.speed.to_string());
        kv("data.noise_std", d.noise_std.to_string());
        kv("data.phase_boundary", d.phase_boundary.to_string());
        kv("data.videos_per_class", d.videos_per_class.to_string());
        kv("data.seed", d.seed.to_string());
        kv("model.dim", m.dim.to_string());
        kv("model.enc_layers", m.enc_layers.to_string());
        kv("model.enc_heads", m.enc_heads.to_string());
        kv("model.decoder", decoder_name(m.decoder).to_string());
        kv("model.dec_layers", m.dec_layers.to_string());
        kv("model.dec_heads", m.dec_heads.to_string());
        kv("model.patch", m.patch.to_string());
        kv("model.tubelet", m.tubelet.to_string());
        kv("model.clip_len", m.clip_len.to_string());
        kv("model.classifier", classifier_name(m.classifier).to_string());
        kv("model.mlp_ratio", m.mlp_ratio.to_string());
        kv("train.base_lr", t.base_lr.to_string());
        kv("train.weight_decay", t.weight_decay.to_string());
        kv("train.batch_size", t.batch_size.to_string());
        kv("train.steps", t.steps.to_string());
        kv("train.warmup_frac", t.warmup_frac.to_string());
        kv("train.seed", t.seed.to_string());
        kv("train.use_oracle", t.use_oracle.to_string());
        kv("train.use_l2", t.use_l2.to_string());
        kv("train.l2_weight", t.l2_weight.to_string());
        kv(
            "train.sampling",
            match t.sampling.mode {
                SamplingMode::Randomized => "randomized".into(),
                SamplingMode::Fixed(r) => format!("fixed:{}", r.value()),
            },
        );
        kv("train.rho_grid", format_list(&t.sampling.rho_grid));
        kv("train.mask", t.mask_kind.to_string());
        kv("train.mask_k", t.mask_k.to_string());
        kv("eval.rho_grid", format_list(&self.eval_grid));
        kv("eval.mask", self.eval_mask.map_or("train".into(), |k| k.to_string()));
        o
    }

    /// Stable FNV-1a hash of the resolved configuration text.
    pub fn hash(&self) -> String {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.to_text().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        format!("{h:016x}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use proptest::prelude::*;

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(RunConfig::parse("# nothing\n\n").unwrap(), RunConfig::default());
    }

    #[test]
    fn values_and_comments() {
        let c = RunConfig::parse(
            "model.dim = 16 # narrower\ntrain.sampling = fixed:0.1\n  train.use_oracle=false\neval.rho_grid = 0.1:0.5:0.2\n",
        )
        .unwrap();
        assert_eq!(c.model.dim, 16);
        assert_eq!(c.train.sampling.mode, SamplingMode::Fixed(ObservationRatio::new(0.1).unwrap()));
        assert!(!c.train.use_oracle);
        assert_eq!(c.eval_grid, vec![0.1, 0.3, 0.5]);
    }

    #[test]
    fn unknown_and_malformed_lines_fail() {
        for bad in ["model.width = 3", "train.steps = many", "just words", "train.use_l2 = maybe", "model.decoder = lstm"] {
            assert!(matches!(RunConfig::parse(bad), Err(Error::Config(_))), "{bad}");
        }
        let e = RunConfig::parse("\n\nfoo = 1").unwrap_err().to_string();
        assert!(e.contains("line 3") && e.contains("foo"), "{e}");
    }

    #[test]
    fn resolved_text_round_trips() {
        let mut c = RunConfig::default();
        c.set("train.sampling", "fixed:1").unwrap();
        c.set("eval.mask", "none").unwrap();
        c.set("model.decoder", "autoregressive").unwrap();
        c.set("train.rho_grid", "0.2,0.4").unwrap();
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap().hash(), c.hash());
    }

    #[test]
    fn standard_grid_has_nine_points() {
        let g = parse_rho_grid("0.1:0.9:0.1").unwrap();
        assert_eq!(g, standard_rho_grid());
        assert_eq!(parse_rho_grid("0.5:0.5:0.1").unwrap(), vec![0.5]);
        assert!(parse_rho_grid("0.1:0.9:0").is_err());
        assert!(parse_rho_grid("0.0:0.5:0.1").is_err());
        assert!(parse_rho_grid("0.1:0.2").is_err());
    }

    #[test]
    fn derived_model_config_follows_data() {
        let mut c = RunConfig::default();
        c.set("data.n2", "2").unwrap();
        c.set("train.seed", "42").unwrap();
        let m = c.model_config();
        assert_eq!(m.num_classes, 6);
        assert_eq!(m.init_seed, 42);
        c.validate().unwrap();
    }

    proptest! {
        #[test]
        fn grid_endpoints_are_inclusive(start in 1u32..5, count in 0u32..8, step in 1u32..4) {
            let (a, s) = (start as f64 / 20.0, step as f64 / 40.0);
            let b = a + count as f64 * s;
            prop_assume!(b <= 1.0);
            let g = parse_rho_grid(&format!("{a}:{b}:{s}")).unwrap();
            prop_assert_eq!(g.len(), count as usize + 1);
            prop_assert!((g[g.len() - 1] - b).abs() < 1e-9);
        }

        #[test]
        fn text_round_trip_for_numeric_settings(dim in 3usize..20, lr in 1e-5f64..1.0, steps in 0usize..10_000) {
            let mut c = RunConfig::default();
            c.set("model.dim", &(2 * dim).to_string()).unwrap();
            c.set("train.base_lr", &lr.to_string()).unwrap();
            c.set("train.steps", &steps.to_string()).unwrap();
            prop_assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
        }
    }
}

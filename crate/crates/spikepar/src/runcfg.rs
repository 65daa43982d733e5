//! Run configuration: defaults, `key=value` config-file parsing with dotted
//! section prefixes, and the resolved-config echo written into run
//! directories.

use crate::data::SyntheticSpec;
use crate::distill::DistillConfig;
use crate::energy::EnergyModel;
use crate::error::{Error, Result};
use crate::metrics::ZeroDenominator;
use crate::model::ModelConfig;
use crate::optim::{AdamConfig, LrSchedule};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub optimizer: AdamConfig,
    pub schedule: LrSchedule,
    pub distill: DistillConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Plain (unweighted) BCE instead of the imbalance-weighted form.
    pub uniform_weights: bool,
    /// Stop once both targets are met on the test split (None disables).
    pub early_stop_ma: Option<f64>,
    pub early_stop_f1: Option<f64>,
    pub data: SyntheticSpec,
    pub energy: EnergyModel,
    pub eval_strict: bool,
    pub zero_denominator: ZeroDenominator,
    pub threshold: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::toy(),
            optimizer: AdamConfig::default(),
            schedule: LrSchedule::default(),
            distill: DistillConfig::default(),
            epochs: 60,
            batch_size: 12,
            seed: 0,
            uniform_weights: false,
            early_stop_ma: None,
            early_stop_f1: None,
            data: SyntheticSpec::default(),
            energy: EnergyModel::default(),
            eval_strict: false,
            zero_denominator: ZeroDenominator::CountAsZero,
            threshold: 0.5,
        }
    }
}

fn parse_list<T: std::str::FromStr>(v: &str) -> std::result::Result<Vec<T>, T::Err> {
    v.split(',').map(|s| s.trim().parse()).collect()
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.distill.validate()?;
        if self.optimizer.lr <= 0.0 {
            return Err(Error::Config("optimizer.lr must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("train.epochs must be >= 1".into()));
        }
        if self.schedule.warmup_epochs >= self.epochs {
            return Err(Error::Config(format!(
                "schedule.warmup_epochs ({}) must be < train.epochs ({})",
                self.schedule.warmup_epochs, self.epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config("eval.threshold must lie in [0, 1]".into()));
        }
        EnergyModel::new(self.energy.e_mac, self.energy.e_ac)?;
        self.data.validate()?;
        Ok(())
    }

    /// Applies one `key=value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::Config(format!("invalid value '{value}' for {what}"));
        macro_rules! num {
            ($what:expr) => {
                value.trim().parse().map_err(|_| bad($what))?
            };
        }
        match key.trim() {
            "model.preset" => {
                self.model = match value.trim() {
                    "toy" => ModelConfig::toy(),
                    "base" => ModelConfig::base(),
                    "tiny" => ModelConfig::tiny(),
                    _ => return Err(bad("model.preset (toy|base|tiny)")),
                }
            }
            "model.in_channels" => self.model.in_channels = num!("model.in_channels"),
            "model.image_h" => self.model.image_h = num!("model.image_h"),
            "model.image_w" => self.model.image_w = num!("model.image_w"),
            "model.tokenizer_widths" => {
                self.model.tokenizer_widths =
                    parse_list(value).map_err(|_| bad("model.tokenizer_widths"))?
            }
            "model.embed_dim" => self.model.embed_dim = num!("model.embed_dim"),
            "model.num_heads" => self.model.num_heads = num!("model.num_heads"),
            "model.num_blocks" => self.model.num_blocks = num!("model.num_blocks"),
            "model.mlp_ratio" => self.model.mlp_ratio = num!("model.mlp_ratio"),
            "model.time_steps" => self.model.time_steps = num!("model.time_steps"),
            "model.num_attributes" => self.model.num_attributes = num!("model.num_attributes"),
            "model.attention_scale" => self.model.attention_scale = num!("model.attention_scale"),
            "optimizer.lr" => {
                self.optimizer.lr = num!("optimizer.lr");
                self.schedule.base_lr = self.optimizer.lr;
            }
            "optimizer.weight_decay" => self.optimizer.weight_decay = num!("optimizer.weight_decay"),
            "optimizer.beta1" => self.optimizer.beta1 = num!("optimizer.beta1"),
            "optimizer.beta2" => self.optimizer.beta2 = num!("optimizer.beta2"),
            "schedule.warmup_epochs" => self.schedule.warmup_epochs = num!("schedule.warmup_epochs"),
            "schedule.decay_factor" => self.schedule.gamma = num!("schedule.decay_factor"),
            "schedule.decay_epochs" => {
                self.schedule.milestones =
                    parse_list(value).map_err(|_| bad("schedule.decay_epochs"))?
            }
            "distill.alpha" => self.distill.alpha = num!("distill.alpha"),
            "distill.beta" => self.distill.beta = num!("distill.beta"),
            "distill.temperature" => self.distill.temperature = num!("distill.temperature"),
            "train.epochs" => self.epochs = num!("train.epochs"),
            "train.batch_size" => self.batch_size = num!("train.batch_size"),
            "train.seed" => self.seed = num!("train.seed"),
            "train.uniform_weights" => self.uniform_weights = num!("train.uniform_weights"),
            "train.early_stop_ma" => self.early_stop_ma = Some(num!("train.early_stop_ma")),
            "train.early_stop_f1" => self.early_stop_f1 = Some(num!("train.early_stop_f1")),
            "data.seed" => self.data.seed = num!("data.seed"),
            "data.train" => self.data.train = num!("data.train"),
            "data.val" => self.data.val = num!("data.val"),
            "data.test" => self.data.test = num!("data.test"),
            "data.image_h" => self.data.image_h = num!("data.image_h"),
            "data.image_w" => self.data.image_w = num!("data.image_w"),
            "data.noise" => self.data.noise = num!("data.noise"),
            "data.ratios" => {
                self.data.ratios = parse_list(value).map_err(|_| bad("data.ratios"))?
            }
            "energy.e_mac" => self.energy.e_mac = num!("energy.e_mac"),
            "energy.e_ac" => self.energy.e_ac = num!("energy.e_ac"),
            "eval.strict" => self.eval_strict = num!("eval.strict"),
            "eval.threshold" => self.threshold = num!("eval.threshold"),
            "eval.zero_denominator" => {
                self.zero_denominator = match value.trim() {
                    "count" => ZeroDenominator::CountAsZero,
                    "skip" => ZeroDenominator::SkipSample,
                    _ => return Err(bad("eval.zero_denominator (count|skip)")),
                }
            }
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Parses a config file body: `key=value` lines, `#` comments, blank
    /// lines allowed. Validation runs after all assignments.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected key=value, got '{line}'"),
            })?;
            cfg.set(key, value).map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<RunConfig> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Full resolved config as a parseable `key=value` document.
    pub fn to_text(&self) -> String {
        let widths: Vec<String> = self.model.tokenizer_widths.iter().map(|w| w.to_string()).collect();
        let milestones: Vec<String> = self.schedule.milestones.iter().map(|e| e.to_string()).collect();
        let ratios: Vec<String> = self.data.ratios.iter().map(|r| r.to_string()).collect();
        let mut s = String::new();
        let kv = |s: &mut String, k: &str, v: String| {
            s.push_str(k);
            s.push('=');
            s.push_str(&v);
            s.push('\n');
        };
        kv(&mut s, "model.in_channels", self.model.in_channels.to_string());
        kv(&mut s, "model.image_h", self.model.image_h.to_string());
        kv(&mut s, "model.image_w", self.model.image_w.to_string());
        kv(&mut s, "model.tokenizer_widths", widths.join(","));
        kv(&mut s, "model.embed_dim", self.model.embed_dim.to_string());
        kv(&mut s, "model.num_heads", self.model.num_heads.to_string());
        kv(&mut s, "model.num_blocks", self.model.num_blocks.to_string());
        kv(&mut s, "model.mlp_ratio", self.model.mlp_ratio.to_string());
        kv(&mut s, "model.time_steps", self.model.time_steps.to_string());
        kv(&mut s, "model.num_attributes", self.model.num_attributes.to_string());
        kv(&mut s, "model.attention_scale", self.model.attention_scale.to_string());
        kv(&mut s, "optimizer.lr", self.optimizer.lr.to_string());
        kv(&mut s, "optimizer.weight_decay", self.optimizer.weight_decay.to_string());
        kv(&mut s, "optimizer.beta1", self.optimizer.beta1.to_string());
        kv(&mut s, "optimizer.beta2", self.optimizer.beta2.to_string());
        kv(&mut s, "schedule.warmup_epochs", self.schedule.warmup_epochs.to_string());
        kv(&mut s, "schedule.decay_factor", self.schedule.gamma.to_string());
        kv(&mut s, "schedule.decay_epochs", milestones.join(","));
        kv(&mut s, "distill.alpha", self.distill.alpha.to_string());
        kv(&mut s, "distill.beta", self.distill.beta.to_string());
        kv(&mut s, "distill.temperature", self.distill.temperature.to_string());
        kv(&mut s, "train.epochs", self.epochs.to_string());
        kv(&mut s, "train.batch_size", self.batch_size.to_string());
        kv(&mut s, "train.seed", self.seed.to_string());
        kv(&mut s, "train.uniform_weights", self.uniform_weights.to_string());
        if let Some(v) = self.early_stop_ma {
            kv(&mut s, "train.early_stop_ma", v.to_string());
        }
        if let Some(v) = self.early_stop_f1 {
            kv(&mut s, "train.early_stop_f1", v.to_string());
        }
        kv(&mut s, "data.seed", self.data.seed.to_string());
        kv(&mut s, "data.train", self.data.train.to_string());
        kv(&mut s, "data.val", self.data.val.to_string());
        kv(&mut s, "data.test", self.data.test.to_string());
        kv(&mut s, "data.image_h", self.data.image_h.to_string());
        kv(&mut s, "data.image_w", self.data.image_w.to_string());
        kv(&mut s, "data.noise", self.data.noise.to_string());
        kv(&mut s, "data.ratios", ratios.join(","));
        kv(&mut s, "energy.e_mac", self.energy.e_mac.to_string());
        kv(&mut s, "energy.e_ac", self.energy.e_ac.to_string());
        kv(&mut s, "eval.strict", self.eval_strict.to_string());
        kv(&mut s, "eval.threshold", self.threshold.to_string());
        kv(
            &mut s,
            "eval.zero_denominator",
            match self.zero_denominator {
                ZeroDenominator::CountAsZero => "count".to_string(),
                ZeroDenominator::SkipSample => "skip".to_string(),
            },
        );
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_mirror_training_recipe() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.batch_size, 12);
        assert_eq!(cfg.epochs, 60);
        assert_eq!(cfg.optimizer.lr, 8e-4);
        assert_eq!(cfg.optimizer.weight_decay, 1e-4);
        assert_eq!(cfg.schedule.warmup_epochs, 10);
        assert_eq!(cfg.schedule.milestones, vec![30, 50]);
        assert_eq!(cfg.distill.temperature, 2.0);
        assert_eq!(cfg.distill.alpha, 1.0);
        assert_eq!(cfg.distill.beta, 1.0);
    }

    #[test]
    fn round_trip_through_text() {
        let mut cfg = RunConfig::default();
        cfg.set("model.embed_dim", "32").unwrap();
        cfg.set("model.tokenizer_widths", "8,16,32").unwrap();
        cfg.set("distill.alpha", "0.5").unwrap();
        cfg.set("train.early_stop_ma", "0.95").unwrap();
        let back = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn parse_reports_line_numbers_and_unknown_keys() {
        let err = RunConfig::parse("train.epochs=5\nbogus.key=1\n").unwrap_err();
        match err {
            Error::Parse { line, msg } => {
                assert_eq!(line, 2);
                assert!(msg.contains("bogus.key"));
            }
            other => panic!("unexpected {other:?}"),
        }
        let err = RunConfig::parse("no equals sign here\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn comments_and_blanks_are_ignored() {
        let cfg = RunConfig::parse("# a comment\n\ntrain.seed=9\n").unwrap();
        assert_eq!(cfg.seed, 9);
    }

    #[test]
    fn invariants_enforced() {
        assert!(RunConfig::parse("optimizer.lr=0\n").is_err());
        assert!(RunConfig::parse("train.epochs=0\n").is_err());
        assert!(RunConfig::parse("train.epochs=5\nschedule.warmup_epochs=5\n").is_err());
        assert!(RunConfig::parse("distill.temperature=-1\n").is_err());
        assert!(RunConfig::parse("distill.alpha=-0.5\n").is_err());
    }

    #[test]
    fn lr_assignment_keeps_schedule_in_sync() {
        let cfg = RunConfig::parse("optimizer.lr=0.002\n").unwrap();
        assert_eq!(cfg.schedule.base_lr, 0.002);
        assert!((cfg.schedule.lr_at(cfg.schedule.warmup_epochs) - 0.002).abs() < 1e-15);
    }
}

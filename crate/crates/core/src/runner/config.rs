//! Run configuration and its flat `section.key = value` text format.

use std::collections::BTreeMap;
use std::fmt::{self, Display};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::evolution::NormScope;
use crate::plasticity::{HebbianScope, PruneSettings};
use crate::snn::SpikeConfig;
use crate::tasks::{SuiteConfig, NUM_TASKS};
use crate::topology::InitGains;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    /// Growth, evolved long-range wiring and feedback pruning.
    Full,
    /// As `Full` without the pruning phases.
    NoInhibition,
    /// Isolated columns, no wiring, no pruning.
    DirectTraining,
    /// Isolated columns pruned after every later task without generality.
    DirectPruning,
}

impl Mode {
    pub fn uses_wiring(self) -> bool {
        matches!(self, Mode::Full | Mode::NoInhibition)
    }

    pub fn prunes(self) -> bool {
        matches!(self, Mode::Full | Mode::DirectPruning)
    }
}

impl FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "full" => Ok(Mode::Full),
            "no-inhibition" => Ok(Mode::NoInhibition),
            "direct-training" => Ok(Mode::DirectTraining),
            "direct-pruning" => Ok(Mode::DirectPruning),
            other => Err(format!("expected full|no-inhibition|direct-training|direct-pruning, got `{other}`")),
        }
    }
}

impl Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Full => "full",
            Mode::NoInhibition => "no-inhibition",
            Mode::DirectTraining => "direct-training",
            Mode::DirectPruning => "direct-pruning",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub width_factor: f64,
    pub spike: SpikeConfig,
    pub init: InitGains,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub batch: usize,
    pub epochs: usize,
    pub finetune_epochs: usize,
    /// Global gradient-norm clip; 0 disables.
    pub clip: f64,
    /// Train regression heads on z-scored targets (training-split stats).
    pub standardize: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvolutionConfig {
    pub episodes: usize,
    pub gamma: f64,
    pub norm_scope: NormScope,
    pub burst_epochs: usize,
    /// Training samples used per episode burst (0 = all).
    pub burst_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlasticityConfig {
    pub alpha: f64,
    pub maturity: f64,
    pub probe_size: usize,
    pub norm_scope: HebbianScope,
    /// Prune after every `every`-th completed later task.
    pub every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSection {
    pub mode: Mode,
    /// Tasks of the suite to learn, in order (1..=9).
    pub tasks: usize,
    pub seed: u64,
    pub checkpoint: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub suite: SuiteConfig,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub evolution: EvolutionConfig,
    pub plasticity: PlasticityConfig,
    pub run: RunSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            suite: SuiteConfig::default(),
            net: NetConfig {
                width_factor: 0.25,
                spike: SpikeConfig::default(),
                init: InitGains::default(),
            },
            train: TrainConfig {
                lr: 0.05,
                momentum: 0.9,
                batch: 16,
                epochs: 12,
                finetune_epochs: 6,
                clip: 5.0,
                standardize: true,
            },
            evolution: EvolutionConfig {
                episodes: 8,
                gamma: 0.5,
                norm_scope: NormScope::Row,
                burst_epochs: 1,
                burst_samples: 200,
            },
            plasticity: PlasticityConfig {
                alpha: 0.5,
                maturity: 3.0,
                probe_size: 128,
                norm_scope: HebbianScope::Layer,
                every: 1,
            },
            run: RunSection {
                mode: Mode::Full,
                tasks: NUM_TASKS,
                seed: 1,
                checkpoint: true,
            },
        }
    }
}

fn parse<T: FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: Display,
{
    v.parse::<T>().map_err(|e| format!("cannot parse `{v}`: {e}"))
}

macro_rules! config_keys {
    ($( $key:literal => $($field:ident).+ , $doc:literal ; )*) => {
        /// Every accepted key with its one-line description.
        pub const KEYS: &[(&str, &str)] = &[$( ($key, $doc) ),*];

        impl RunConfig {
            fn set(&mut self, key: &str, value: &str) -> Option<std::result::Result<(), String>> {
                match key {
                    $( $key => Some(parse(value).map(|v| self.$($field).+ = v)), )*
                    _ => None,
                }
            }

            fn get(&self, key: &str) -> Option<String> {
                match key {
                    $( $key => Some(self.$($field).+.to_string()), )*
                    _ => None,
                }
            }
        }
    };
}

config_keys! {
    "suite.seed" => suite.seed, "dataset generator seed";
    "suite.train" => suite.train, "training samples per task";
    "suite.val" => suite.val, "validation samples per task (evolution episodes)";
    "suite.test" => suite.test, "test samples per task";
    "suite.overlap" => suite.overlap, "shared-latent weight across tasks, 0 disables sharing";
    "suite.cmd_tolerance" => suite.cmd_tolerance, "per-command tolerance of the interaction success check";
    "net.width_factor" => net.width_factor, "multiplier on the 32-64-128-256 channel ladder";
    "net.step" => net.spike.steps, "time steps per sample";
    "net.v_th" => net.spike.v_th, "spike threshold";
    "net.beta" => net.spike.beta, "surrogate gradient sharpness";
    "net.detach_reset" => net.spike.detach_reset, "exclude the reset path from gradients";
    "net.tau_init" => net.init.tau, "initial raw membrane time constant";
    "net.gain_conv" => net.init.conv, "init gain of block convolutions";
    "net.gain_shortcut" => net.init.shortcut, "init gain of block shortcuts";
    "net.gain_adapter" => net.init.adapter, "init gain of long-range adapters";
    "net.gain_head" => net.init.head, "init gain of readout heads";
    "train.lr" => train.lr, "learning rate";
    "train.momentum" => train.momentum, "SGD momentum";
    "train.batch" => train.batch, "minibatch size";
    "train.epochs" => train.epochs, "epochs of the final training phase per task";
    "train.finetune_epochs" => train.finetune_epochs, "epochs of a fine-tuning run";
    "train.clip" => train.clip, "gradient-norm clip, 0 disables";
    "train.standardize" => train.standardize, "z-score regression targets during training";
    "evolution.episodes" => evolution.episodes, "wiring episodes per task";
    "evolution.gamma" => evolution.gamma, "probability update step";
    "evolution.norm_scope" => evolution.norm_scope, "loss normalization window: option|row|task";
    "evolution.burst_epochs" => evolution.burst_epochs, "training epochs per episode";
    "evolution.burst_samples" => evolution.burst_samples, "training samples per episode, 0 = all";
    "plasticity.alpha" => plasticity.alpha, "spike trace decay";
    "plasticity.N" => plasticity.maturity, "training runs until full inhibition strength";
    "plasticity.probe_size" => plasticity.probe_size, "probe samples for Hebbian traces";
    "plasticity.norm_scope" => plasticity.norm_scope, "Hebbian normalization: layer|network";
    "plasticity.every" => plasticity.every, "prune after every n-th completed task";
    "run.mode" => run.mode, "full|no-inhibition|direct-training|direct-pruning";
    "run.tasks" => run.tasks, "number of tasks to learn, taken in suite order";
    "run.seed" => run.seed, "network and protocol seed";
    "run.checkpoint" => run.checkpoint, "write a checkpoint after every phase";
}

impl RunConfig {
    /// Parses config text; `overrides` (`key=value`) apply after the file.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut lines: BTreeMap<String, usize> = BTreeMap::new();
        let mut apply = |cfg: &mut RunConfig, raw: &str, line: usize| -> Result<()> {
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                return Ok(());
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| Error::config(content, line, "expected `key = value`"))?;
            let (key, value) = (key.trim(), value.trim());
            match cfg.set(key, value) {
                None => Err(Error::config(key, line, "unknown key")),
                Some(Err(msg)) => Err(Error::config(key, line, msg)),
                Some(Ok(())) => {
                    lines.insert(key.to_string(), line);
                    Ok(())
                }
            }
        };
        for (i, raw) in text.lines().enumerate() {
            apply(&mut cfg, raw, i + 1)?;
        }
        for o in overrides {
            apply(&mut cfg, o, 0)?;
        }
        cfg.validate_with(&|k| lines.get(k).copied().unwrap_or(0))?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::parse(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_with(&|_| 0)
    }

    fn validate_with(&self, line: &dyn Fn(&str) -> usize) -> Result<()> {
        let check = |ok: bool, key: &str, msg: &str| if ok { Ok(()) } else { Err(Error::config(key, line(key), msg)) };
        check(self.suite.train > 0, "suite.train", "must be > 0")?;
        check(self.suite.test > 0, "suite.test", "must be > 0")?;
        check((0.0..=1.0).contains(&self.suite.overlap), "suite.overlap", "must lie in [0,1]")?;
        check(self.suite.cmd_tolerance > 0.0, "suite.cmd_tolerance", "must be > 0")?;
        check(self.net.width_factor > 0.0 && self.net.width_factor.is_finite(), "net.width_factor", "must be > 0")?;
        check(self.net.spike.steps >= 1, "net.step", "must be >= 1")?;
        check(self.net.spike.v_th > 0.0, "net.v_th", "must be > 0")?;
        check(self.net.spike.beta > 0.0, "net.beta", "must be > 0")?;
        check(self.net.init.tau.is_finite(), "net.tau_init", "must be finite")?;
        for (k, v) in [
            ("net.gain_conv", self.net.init.conv),
            ("net.gain_shortcut", self.net.init.shortcut),
            ("net.gain_head", self.net.init.head),
        ] {
            check(v > 0.0 && v.is_finite(), k, "must be > 0")?;
        }
        // zero-initialized adapters start as a no-op and learn their contribution
        check(self.net.init.adapter >= 0.0 && self.net.init.adapter.is_finite(), "net.gain_adapter", "must be >= 0")?;
        check(self.train.lr > 0.0 && self.train.lr.is_finite(), "train.lr", "must be > 0")?;
        check((0.0..1.0).contains(&self.train.momentum), "train.momentum", "must lie in [0,1)")?;
        check(self.train.batch >= 1, "train.batch", "must be >= 1")?;
        check(self.train.clip >= 0.0, "train.clip", "must be >= 0")?;
        check(self.evolution.gamma >= 0.0 && self.evolution.gamma.is_finite(), "evolution.gamma", "must be >= 0")?;
        check((0.0..1.0).contains(&self.plasticity.alpha), "plasticity.alpha", "must lie in [0,1)")?;
        check(self.plasticity.maturity > 0.0, "plasticity.N", "must be > 0")?;
        check(self.plasticity.probe_size >= 1, "plasticity.probe_size", "must be >= 1")?;
        check(self.plasticity.every >= 1, "plasticity.every", "must be >= 1")?;
        check((1..=NUM_TASKS).contains(&self.run.tasks), "run.tasks", "must lie in 1..=9")?;
        Ok(())
    }

    /// Parseable text listing every key with its effective value.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# effective configuration\n");
        let mut section = "";
        for (key, doc) in KEYS {
            let s = key.split('.').next().unwrap_or("");
            if s != section {
                out.push('\n');
                section = s;
            }
            out.push_str(&format!("# {doc}\n{key} = {}\n", self.get(key).expect("listed key")));
        }
        out
    }

    pub fn prune_settings(&self) -> PruneSettings {
        PruneSettings {
            alpha: self.plasticity.alpha,
            maturity: self.plasticity.maturity,
            probe_size: self.plasticity.probe_size,
            scope: self.plasticity.norm_scope,
            use_generality: self.run.mode == Mode::Full,
        }
    }

    pub fn clip(&self) -> Option<f64> {
        (self.train.clip > 0.0).then_some(self.train.clip)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults_and_full_echo() {
        let cfg = RunConfig::parse("", &[]).unwrap();
        assert_eq!(cfg, RunConfig::default());
        let echo = cfg.to_text();
        for (key, _) in KEYS {
            assert!(echo.contains(&format!("{key} = ")), "{key}");
        }
        assert_eq!(RunConfig::parse(&echo, &[]).unwrap(), cfg);
    }

    #[test]
    fn gamma_and_comments() {
        let cfg = RunConfig::parse("# c\n\nevolution.gamma = 0.25  # note\nrun.mode = no-inhibition\n", &[]).unwrap();
        assert_eq!(cfg.evolution.gamma, 0.25);
        assert_eq!(cfg.run.mode, Mode::NoInhibition);
        assert_eq!(RunConfig::parse("evolution.gamma = 0.5", &[]).unwrap().evolution.gamma, 0.5);
    }

    #[test]
    fn errors_name_key_and_line() {
        match RunConfig::parse("train.lr = 0.1\nplasticity.N = 0\n", &[]) {
            Err(Error::Config { key, line, .. }) => assert_eq!((key.as_str(), line), ("plasticity.N", 2)),
            other => panic!("{other:?}"),
        }
        match RunConfig::parse("\n\nnet.colour = red", &[]) {
            Err(Error::Config { key, line, msg }) => {
                assert_eq!((key.as_str(), line), ("net.colour", 3));
                assert!(msg.contains("unknown"));
            }
            other => panic!("{other:?}"),
        }
        match RunConfig::parse("train.batch = many", &[]) {
            Err(Error::Config { key, line, .. }) => assert_eq!((key.as_str(), line), ("train.batch", 1)),
            other => panic!("{other:?}"),
        }
        assert!(RunConfig::parse("no equals sign", &[]).is_err());
        assert_eq!(RunConfig::parse("plasticity.N = 0", &[]).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn overrides_win() {
        let cfg = RunConfig::parse("run.seed = 3", &["run.seed=9".into(), "suite.overlap = 0".into()]).unwrap();
        assert_eq!(cfg.run.seed, 9);
        assert_eq!(cfg.suite.overlap, 0.0);
        assert!(RunConfig::parse("", &["bogus=1".into()]).is_err());
    }

    #[test]
    fn odd_floats_round_trip() {
        let cfg = RunConfig::parse("train.lr = 0.000123456789\nnet.tau_init = -1e-7", &[]).unwrap();
        assert_eq!(RunConfig::parse(&cfg.to_text(), &[]).unwrap(), cfg);
    }
}

//! Line-oriented experiment configuration.
//!
//! ```text
//! # comment
//! [experiment]
//! preset = grounding
//! seeds = 1..5
//!
//! [train]
//! learning_rate = 0.1
//! r0 = off
//!
//! [env]
//! kind = grounding
//! grid = 16
//! ```
//!
//! The `preset` key is applied first and every other key overrides it, in
//! file order. Unknown sections and keys are errors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ecvgpo::Granularity;
use crate::envs::{Environment, GroundingEnv, NumericBanditEnv, PriorSpec, ReasoningEnv};
use crate::error::{LabError, Result};
use crate::grpo::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EnvKind {
    Grounding,
    Reasoning,
    Numeric,
}

impl EnvKind {
    pub fn name(self) -> &'static str {
        match self {
            EnvKind::Grounding => "grounding",
            EnvKind::Reasoning => "reasoning",
            EnvKind::Numeric => "numeric",
        }
    }

    fn parse(key: &str, v: &str) -> Result<Self> {
        match v {
            "grounding" => Ok(EnvKind::Grounding),
            "reasoning" => Ok(EnvKind::Reasoning),
            "numeric" => Ok(EnvKind::Numeric),
            _ => Err(LabError::config(key, format!("unknown environment `{v}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub kind: EnvKind,
    pub grid: u32,
    pub queries: usize,
    pub jitter: u32,
    pub nouns: usize,
    pub min_side: u32,
    pub max_side: u32,
    /// Seed for drawing the query boxes; independent of the training seed.
    pub env_seed: u64,
    pub prior: PriorSpec,
    pub action_max: u32,
    pub target: u32,
    pub lambda: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            kind: EnvKind::Grounding,
            grid: 16,
            queries: 8,
            jitter: 1,
            nouns: 4,
            min_side: 4,
            max_side: 10,
            env_seed: 2024,
            prior: PriorSpec::default(),
            action_max: 40,
            target: 20,
            lambda: 0.05,
        }
    }
}

impl EnvConfig {
    pub fn grounding(&self) -> Result<GroundingEnv> {
        GroundingEnv::generate(
            self.grid,
            self.queries,
            self.jitter,
            self.nouns,
            self.min_side,
            self.max_side,
            self.env_seed,
            self.prior,
        )
    }

    /// The environment for `kind`, sharing queries and prior with the
    /// grounding environment of the same settings.
    pub fn build_kind(&self, kind: EnvKind) -> Result<Box<dyn Environment>> {
        Ok(match kind {
            EnvKind::Grounding => Box::new(self.grounding()?),
            EnvKind::Reasoning => Box::new(ReasoningEnv::from_grounding(&self.grounding()?)?),
            EnvKind::Numeric => Box::new(NumericBanditEnv::new(self.action_max, self.target, self.lambda)?),
        })
    }

    pub fn build(&self) -> Result<Box<dyn Environment>> {
        self.build_kind(self.kind)
    }
}

/// One arm of an r0 sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum R0Arm {
    Off,
    Value(f64),
}

impl R0Arm {
    pub fn label(&self) -> String {
        match self {
            R0Arm::Off => "off".into(),
            R0Arm::Value(v) => format!("{v}"),
        }
    }

    fn parse(key: &str, v: &str) -> Result<Self> {
        if v == "off" {
            return Ok(R0Arm::Off);
        }
        let x: f64 = v.parse().map_err(|_| LabError::config(key, format!("`{v}` is neither a number nor `off`")))?;
        if !(x.abs() > 1.0) || !x.is_finite() {
            return Err(LabError::config(key, format!("|r0| must exceed 1, got {v}")));
        }
        Ok(R0Arm::Value(x))
    }

    /// `cfg` with reshaping switched to this arm.
    pub fn apply(&self, cfg: &TrainConfig) -> TrainConfig {
        let mut c = cfg.clone();
        match self {
            R0Arm::Off => c.reshape_enabled = false,
            R0Arm::Value(v) => {
                c.reshape_enabled = true;
                c.reshape.r0 = *v;
            }
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSection {
    pub preset: String,
    pub out: Option<PathBuf>,
    pub seeds: Vec<u64>,
    /// Snapshot period in steps (0 writes only the initial and final policy).
    pub checkpoint_every: usize,
    pub compare_arms: Vec<EnvKind>,
    pub r0_values: Vec<R0Arm>,
    /// Fraction of the final steps averaged for end-of-run statistics.
    pub final_window: f64,
    /// Fraction of the first steps excluded as warm-up.
    pub warmup: f64,
    pub theorem_instances: usize,
    pub theorem_eta: f64,
    pub gradcheck_instances: usize,
    pub delta_adv: f64,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            preset: "default".into(),
            out: None,
            seeds: (1..=5).collect(),
            checkpoint_every: 0,
            compare_arms: vec![EnvKind::Reasoning, EnvKind::Grounding],
            r0_values: vec![R0Arm::Value(10.0), R0Arm::Off, R0Arm::Value(-50.0)],
            final_window: 0.1,
            warmup: 0.1,
            theorem_instances: 200,
            theorem_eta: 1e-3,
            gradcheck_instances: 60,
            delta_adv: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub env: EnvConfig,
    pub experiment: ExperimentSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::preset("default").expect("default preset exists")
    }
}

pub const PRESETS: [&str; 4] = ["default", "grounding", "reasoning", "large-model"];

impl ExperimentConfig {
    /// Named starting points.
    ///
    /// * `default`: library defaults, 1000 steps at learning rate 0.1.
    /// * `grounding`: as `default` with per-token self-information in the
    ///   reshape, so r0 arms separate within a few seeds.
    /// * `reasoning`: `grounding` with the same queries scored by exact match.
    /// * `large-model`: the large-model hyperparameters (rollout 8, temperature 1,
    ///   one iteration, beta 0.04, learning rate 1e-6, batch 4, l0 25,
    ///   delta 0.1). Far too small a step for tabular policies; kept for
    ///   reference runs.
    pub fn preset(name: &str) -> Result<Self> {
        let mut cfg = Self {
            train: TrainConfig {
                steps: 1000,
                ..TrainConfig::default()
            },
            env: EnvConfig::default(),
            experiment: ExperimentSection::default(),
        };
        cfg.experiment.preset = name.to_string();
        match name {
            "default" => {}
            "grounding" => cfg.train.reshape.granularity = Granularity::Token,
            "reasoning" => {
                cfg.train.reshape.granularity = Granularity::Token;
                cfg.env.kind = EnvKind::Reasoning;
            }
            "large-model" => {
                cfg.train.learning_rate = 1e-6;
                cfg.train.queries_per_batch = 4;
                cfg.train.reshape.delta = 0.1;
            }
            other => {
                return Err(LabError::config(
                    "experiment.preset",
                    format!("unknown preset `{other}` (known: {})", PRESETS.join(", ")),
                ))
            }
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut section: Option<String> = None;
        let mut pairs: Vec<(String, String)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if !["train", "env", "experiment"].contains(&name) {
                    return Err(LabError::config(format!("[{name}]"), format!("unknown section on line {}", i + 1)));
                }
                section = Some(name.to_string());
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(LabError::config(format!("line {}", i + 1), "expected `key = value`"));
            };
            let Some(sec) = &section else {
                return Err(LabError::config(k.trim(), "key outside of any section"));
            };
            let v = v.trim();
            let v = v.strip_prefix('"').and_then(|x| x.strip_suffix('"')).unwrap_or(v);
            pairs.push((format!("{sec}.{}", k.trim()), v.to_string()));
        }
        let preset = pairs
            .iter()
            .rev()
            .find(|(k, _)| k == "experiment.preset")
            .map_or("default", |(_, v)| v.as_str());
        let mut cfg = Self::preset(preset)?;
        for (k, v) in &pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies one `section.key = value` override.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let t = &mut self.train;
        let e = &mut self.env;
        let x = &mut self.experiment;
        match key {
            "train.rollouts" => t.rollouts = num(key, v)?,
            "train.temperature" => t.temperature = num(key, v)?,
            "train.iterations" => t.iterations = num(key, v)?,
            "train.beta" => t.beta = num(key, v)?,
            "train.epsilon" => t.epsilon = num(key, v)?,
            "train.learning_rate" => t.learning_rate = num(key, v)?,
            "train.steps" => t.steps = num(key, v)?,
            "train.queries_per_batch" => t.queries_per_batch = num(key, v)?,
            "train.r0" => match R0Arm::parse(key, v)? {
                R0Arm::Off => t.reshape_enabled = false,
                R0Arm::Value(r0) => {
                    t.reshape_enabled = true;
                    t.reshape.r0 = r0;
                }
            },
            "train.l0" => t.reshape.l0 = num(key, v)?,
            "train.delta" => t.reshape.delta = num(key, v)?,
            "train.granularity" => {
                t.reshape.granularity = match v {
                    "sequence" => Granularity::Sequence,
                    "token" => Granularity::Token,
                    _ => return Err(LabError::config(key, "expected `sequence` or `token`")),
                }
            }
            "train.std_floor" => t.std_floor = num(key, v)?,
            "train.seed" => t.seed = num(key, v)?,
            "env.kind" => e.kind = EnvKind::parse(key, v)?,
            "env.grid" => e.grid = num(key, v)?,
            "env.queries" => e.queries = num(key, v)?,
            "env.jitter" => e.jitter = num(key, v)?,
            "env.nouns" => e.nouns = num(key, v)?,
            "env.min_side" => e.min_side = num(key, v)?,
            "env.max_side" => e.max_side = num(key, v)?,
            "env.env_seed" => e.env_seed = num(key, v)?,
            "env.prior_structural" => e.prior.structural = num(key, v)?,
            "env.prior_noun" => e.prior.noun = num(key, v)?,
            "env.prior_numeric" => e.prior.numeric = num(key, v)?,
            "env.prior_sharpness" => e.prior.sharpness = num(key, v)?,
            "env.action_max" => e.action_max = num(key, v)?,
            "env.target" => e.target = num(key, v)?,
            "env.lambda" => e.lambda = num(key, v)?,
            "experiment.preset" => {}
            "experiment.out" => x.out = Some(PathBuf::from(v)),
            "experiment.seeds" => x.seeds = parse_seeds(key, v)?,
            "experiment.checkpoint_every" => x.checkpoint_every = num(key, v)?,
            "experiment.compare_arms" => {
                x.compare_arms = list(v).map(|s| EnvKind::parse(key, s)).collect::<Result<_>>()?
            }
            "experiment.r0_values" => x.r0_values = list(v).map(|s| R0Arm::parse(key, s)).collect::<Result<_>>()?,
            "experiment.final_window" => x.final_window = num(key, v)?,
            "experiment.warmup" => x.warmup = num(key, v)?,
            "experiment.theorem_instances" => x.theorem_instances = num(key, v)?,
            "experiment.theorem_eta" => x.theorem_eta = num(key, v)?,
            "experiment.gradcheck_instances" => x.gradcheck_instances = num(key, v)?,
            "experiment.delta_adv" => x.delta_adv = num(key, v)?,
            _ => return Err(LabError::config(key, "unknown key")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let x = &self.experiment;
        if !(x.final_window > 0.0 && x.final_window <= 1.0) {
            return Err(LabError::config("experiment.final_window", "must lie in (0, 1]"));
        }
        if !(x.warmup >= 0.0 && x.warmup < 1.0) {
            return Err(LabError::config("experiment.warmup", "must lie in [0, 1)"));
        }
        if x.seeds.is_empty() {
            return Err(LabError::config("experiment.seeds", "need at least one seed"));
        }
        if !(x.delta_adv >= 0.0) {
            return Err(LabError::config("experiment.delta_adv", "must be non-negative"));
        }
        if !(x.theorem_eta >= 0.0 && x.theorem_eta.is_finite()) {
            return Err(LabError::config("experiment.theorem_eta", "must be non-negative"));
        }
        self.env.build().map(|_| ())
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| LabError::config(key, format!("cannot parse `{v}`")))
}

fn list(v: &str) -> impl Iterator<Item = &str> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty())
}

/// `N`, `N..M` (inclusive) or a comma-separated list.
pub fn parse_seeds(key: &str, v: &str) -> Result<Vec<u64>> {
    if let Some((a, b)) = v.split_once("..") {
        let (a, b): (u64, u64) = (num(key, a.trim())?, num(key, b.trim())?);
        if a > b {
            return Err(LabError::config(key, format!("empty seed range {v}")));
        }
        return Ok((a..=b).collect());
    }
    list(v).map(|s| num(key, s)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_overrides() {
        let cfg = ExperimentConfig::parse(
            "# demo\n[experiment]\npreset = reasoning\nseeds = 3..5\n\n[train]\nlearning_rate = 0.5\nr0 = -50 # comment\n[env]\ngrid = 12\nmax_side = 8\n",
        )
        .unwrap();
        assert_eq!(cfg.env.kind, EnvKind::Reasoning);
        assert_eq!(cfg.experiment.seeds, vec![3, 4, 5]);
        assert_eq!(cfg.train.learning_rate, 0.5);
        assert!(cfg.train.reshape_enabled);
        assert_eq!(cfg.train.reshape.r0, -50.0);
        assert_eq!(cfg.env.grid, 12);
    }

    #[test]
    fn quoted_values_are_unwrapped() {
        let cfg = ExperimentConfig::parse("[experiment]\npreset = \"grounding\"\nout = \"runs/a\"\n").unwrap();
        assert_eq!(cfg.train.reshape.granularity, Granularity::Token);
        assert_eq!(cfg.experiment.out, Some(PathBuf::from("runs/a")));
    }

    #[test]
    fn defaults_follow_group_settings() {
        let cfg = ExperimentConfig::default();
        assert_eq!(cfg.train.rollouts, 8);
        assert_eq!(cfg.train.temperature, 1.0);
        assert_eq!(cfg.train.iterations, 1);
        assert_eq!(cfg.train.beta, 0.04);
        assert_eq!(cfg.train.reshape.l0, 25.0);
        let large = ExperimentConfig::preset("large-model").unwrap();
        assert_eq!(large.train.learning_rate, 1e-6);
        assert_eq!(large.train.queries_per_batch, 4);
        assert_eq!(large.train.reshape.delta, 0.1);
    }

    #[test]
    fn errors_name_the_key() {
        let err = |text: &str| match ExperimentConfig::parse(text) {
            Err(LabError::InvalidConfig { key, .. }) => key,
            other => panic!("expected config error, got {other:?}"),
        };
        assert_eq!(err("[train]\nlearnig_rate = 0.1\n"), "train.learnig_rate");
        assert_eq!(err("[train]\nbeta = lots\n"), "train.beta");
        assert_eq!(err("[train]\nepsilon = 2\n"), "train.epsilon");
        assert_eq!(err("[train]\nr0 = 0.5\n"), "train.r0");
        assert_eq!(err("[weird]\n"), "[weird]");
        assert_eq!(err("rollouts = 4\n"), "rollouts");
        assert_eq!(err("[experiment]\npreset = nope\n"), "experiment.preset");
        assert_eq!(err("[env]\nmax_side = 15\n"), "env.max_side");
        assert_eq!(err("[experiment]\nr0_values = 10, 0.5\n"), "experiment.r0_values");
    }

    #[test]
    fn seed_forms() {
        assert_eq!(parse_seeds("k", "7").unwrap(), vec![7]);
        assert_eq!(parse_seeds("k", "1..3").unwrap(), vec![1, 2, 3]);
        assert_eq!(parse_seeds("k", "4, 9").unwrap(), vec![4, 9]);
        assert!(parse_seeds("k", "5..1").is_err());
    }

    #[test]
    fn r0_arms() {
        let base = TrainConfig::default();
        assert!(!R0Arm::Off.apply(&base).reshape_enabled);
        let on = R0Arm::Value(-50.0).apply(&base);
        assert!(on.reshape_enabled && on.reshape.r0 == -50.0);
        assert_eq!(R0Arm::Value(10.0).label(), "10");
    }
}

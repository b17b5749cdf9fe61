//! Run configuration: world, training and evaluation settings in one TOML
//! document. Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::{sample_world, Dataset, World, DEFAULT_DISTRACTOR_RATE};
use crate::error::{Error, Result};
use crate::metrics::DEFAULT_DECISION_THRESHOLD;
use crate::trainer::TrainingConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub categories: usize,
    pub d_raw: usize,
    pub link_density: f64,
    pub noise_sigma: f64,
    pub distractor_rate: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub known_prop: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            categories: 20,
            d_raw: 16,
            link_density: 0.15,
            noise_sigma: 0.3,
            distractor_rate: DEFAULT_DISTRACTOR_RATE,
            n_train: 2000,
            n_test: 500,
            known_prop: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub threshold: f64,
    pub proportions: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_DECISION_THRESHOLD,
            proportions: (1..=9).map(|k| k as f64 / 10.0).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seed for the world, the images and the label dropping.
    pub seed: u64,
    pub out_dir: Option<String>,
    pub world: WorldConfig,
    pub train: TrainingConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::bench_small()
    }
}

/// Shipped copy of the reference benchmark.
pub const BENCH_SMALL_TOML: &str = include_str!("../configs/bench-small.toml");

impl RunConfig {
    /// The reference synthetic benchmark: C=20, D_raw=16, D=32, 2000 train
    /// and 500 test images, σ=0.3, link density 0.15.
    ///
    /// Training departs from the library defaults in three places: a
    /// longer run at a higher learning rate, and an IST weight that keeps
    /// `λ₁·L_ist` on the same scale as the classification loss (the pair
    /// loss is a raw sum over ~30 known pairs per image here).
    pub fn bench_small() -> Self {
        let mut train = TrainingConfig {
            epochs: 60,
            lambda_ist: 0.1,
            ..TrainingConfig::default()
        };
        train.adam.lr = 3e-3;
        Self {
            seed: 0,
            out_dir: None,
            world: WorldConfig::default(),
            train,
            eval: EvalConfig::default(),
        }
    }

    /// Keys missing from `text`, at any depth, take their bench-small
    /// values; unknown keys are rejected by name.
    pub fn from_toml(text: &str) -> Result<Self> {
        let parse = |t: &str| t.parse::<toml::Table>().map_err(|e| Error::Config(e.to_string()));
        let mut base = parse(BENCH_SMALL_TOML)?;
        merge(&mut base, parse(text)?);
        let cfg: Self = toml::Value::Table(base)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        let w = &self.world;
        if w.categories < 2 || w.d_raw < 2 {
            return Err(Error::Config("world needs categories >= 2 and d_raw >= 2".into()));
        }
        if !(w.known_prop > 0.0 && w.known_prop <= 1.0) {
            return Err(Error::Config(format!("known_prop must lie in (0, 1], got {}", w.known_prop)));
        }
        if !(self.eval.threshold > 0.0 && self.eval.threshold < 1.0) {
            return Err(Error::Config("eval threshold must lie in (0, 1)".into()));
        }
        if self
            .eval
            .proportions
            .iter()
            .any(|&q| !(q > 0.0 && q <= 1.0))
        {
            return Err(Error::Config("eval proportions must lie in (0, 1]".into()));
        }
        self.train.validate()
    }

    pub fn world(&self) -> Result<World> {
        let w = &self.world;
        let mut world = sample_world(self.seed, w.categories, w.d_raw, w.link_density, w.noise_sigma)?;
        world.distractor_rate = w.distractor_rate;
        Ok(world)
    }

    /// Train split at `known_prop` and a fully labelled test split.
    pub fn datasets(&self, known_prop: f64) -> Result<(World, Dataset, Dataset)> {
        let world = self.world()?;
        let train = Dataset::generate_train(&world, self.world.n_train, self.seed)
            .with_known_proportion(known_prop, self.seed)?;
        let test = Dataset::generate_test(&world, self.world.n_test, self.seed);
        Ok((world, train, test))
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_bench_config_matches_preset() {
        assert_eq!(RunConfig::from_toml(BENCH_SMALL_TOML).unwrap(), RunConfig::bench_small());
    }

    #[test]
    fn toml_round_trip() {
        let mut cfg = RunConfig::bench_small();
        cfg.seed = 17;
        cfg.out_dir = Some("runs/x".into());
        cfg.train.lambda_cst = 0.125;
        cfg.train.use_ist = false;
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::from_toml("[train]\nlamda_ist = 3.0\n").unwrap_err();
        assert!(err.to_string().contains("lamda_ist"), "{err}");
        let err = RunConfig::from_toml("bogus = 1\n").unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn partial_file_takes_defaults() {
        let cfg = RunConfig::from_toml("seed = 4\n[world]\ncategories = 8\n").unwrap();
        assert_eq!(cfg.world.categories, 8);
        assert_eq!(cfg.world.d_raw, 16);
        assert_eq!(cfg.train, RunConfig::bench_small().train);

        let cfg = RunConfig::from_toml("[train]\nepochs = 7\n[train.adam]\nbeta1 = 0.8\n").unwrap();
        let mut want = RunConfig::bench_small().train;
        want.epochs = 7;
        want.adam.beta1 = 0.8;
        assert_eq!(cfg.train, want);
    }
}

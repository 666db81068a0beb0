//! Run configuration file.
//!
//! ```toml
//! seed = 0
//!
//! [dataset]
//! num_superclasses = 4
//! subclasses_per_superclass = 4
//! latent_dim = 32
//! image_dim = 64
//! text_dim = 48
//! within_super_corr = 0.6
//! noise_std = 0.1
//! pairs_per_class = 500
//! eval_pairs = 1000
//! seed = 7
//!
//! [encoder]            # optional, defaults shown
//! image_hidden = [64, 64]
//! text_hidden = [64, 64]
//! shared_dim = 16
//! activation = "tanh"  # or "relu"
//!
//! [loss]               # optional
//! ablation = "full"    # full | cross_only | in_only | clip_only
//! lambda_mode = "scheduled"
//! fixed_lambda1 = 0.0625
//! fixed_lambda2 = 0.0625
//! tau = 0.07
//! learnable_temperature = true
//! scale_factor = 1.0
//!
//! [train]
//! epochs = 30
//! batch_size = 256
//! learning_rate = 0.001
//! optimizer = "adam"   # or "sgd"
//! adam_beta1 = 0.9
//! adam_beta2 = 0.999
//! adam_eps = 1e-8
//! checkpoint_every = 0
//!
//! [eval]               # optional
//! top_ks = [1, 3, 5]
//! recall_ks = [1, 5, 10]
//! probe_l2 = 1e-4
//! probe_iters = 300
//! probe_lr = 1.0
//!
//! [compare]            # optional
//! variants = ["clip_only", "full"]
//! seeds = [0, 1, 2, 3, 4]
//! ```
//!
//! Unknown keys are rejected. `dataset` and `train.epochs`, `train.batch_size`,
//! `train.learning_rate` are required.

use std::collections::BTreeSet;
use std::path::Path;

use rankclip_core::metrics::EvalConfig;
use rankclip_core::{
    Ablation, Activation, DatasetSpec, EncoderConfig, LambdaMode, LossConfig, OptimizerKind, TrainConfig,
};
use toml::{Table, Value};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("config is not valid TOML: {0}")]
    Syntax(String),
    #[error("missing key: {0}")]
    Missing(String),
    #[error("unknown key: {0}")]
    Unknown(String),
    #[error("bad value for {key}: {detail}")]
    Type { key: String, detail: String },
}

type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderSection {
    pub image_hidden: Vec<usize>,
    pub text_hidden: Vec<usize>,
    pub shared_dim: usize,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareSection {
    pub variants: Vec<Ablation>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Seeds encoder init, batch order and rank-loss tie shuffles.
    pub seed: u64,
    pub dataset: DatasetSpec,
    pub encoder: EncoderSection,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub compare: CompareSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let table: Table = text
            .parse()
            .map_err(|e: toml::de::Error| ConfigError::Syntax(e.message().to_string()))?;
        let mut root = Section::new("", table);
        let seed = root.u64("seed")?.unwrap_or(0);

        let mut ds = root
            .section("dataset")?
            .ok_or_else(|| ConfigError::Missing("dataset".into()))?;
        let dataset = DatasetSpec {
            num_superclasses: ds.req(Section::usize, "num_superclasses")?,
            subclasses_per_superclass: ds.req(Section::usize, "subclasses_per_superclass")?,
            latent_dim: ds.req(Section::usize, "latent_dim")?,
            image_dim: ds.req(Section::usize, "image_dim")?,
            text_dim: ds.req(Section::usize, "text_dim")?,
            within_super_corr: ds.req(Section::f64, "within_super_corr")?,
            noise_std: ds.req(Section::f64, "noise_std")?,
            pairs_per_class: ds.req(Section::usize, "pairs_per_class")?,
            eval_pairs: ds.req(Section::usize, "eval_pairs")?,
            seed: ds.req(Section::u64, "seed")?,
        };
        ds.finish()?;

        let defaults = EncoderConfig::with_dims(1, 1, 0);
        let mut encoder = EncoderSection {
            image_hidden: defaults.image_hidden,
            text_hidden: defaults.text_hidden,
            shared_dim: defaults.shared_dim,
            activation: defaults.activation,
        };
        if let Some(mut s) = root.section("encoder")? {
            if let Some(v) = s.usize_list("image_hidden")? {
                encoder.image_hidden = v;
            }
            if let Some(v) = s.usize_list("text_hidden")? {
                encoder.text_hidden = v;
            }
            if let Some(v) = s.usize("shared_dim")? {
                encoder.shared_dim = v;
            }
            if let Some(v) = s.choice("activation", &[("tanh", Activation::Tanh), ("relu", Activation::Relu)])? {
                encoder.activation = v;
            }
            s.finish()?;
        }

        let mut loss = LossConfig::default();
        if let Some(mut s) = root.section("loss")? {
            if let Some(v) = s.choice("ablation", &Ablation::ALL.map(|a| (a.as_str(), a)))? {
                loss.ablation = v;
            }
            let modes = [("scheduled", LambdaMode::Scheduled), ("fixed", LambdaMode::Fixed)];
            if let Some(v) = s.choice("lambda_mode", &modes)? {
                loss.lambda_mode = v;
            }
            if let Some(v) = s.f64("fixed_lambda1")? {
                loss.fixed_lambda1 = v;
            }
            if let Some(v) = s.f64("fixed_lambda2")? {
                loss.fixed_lambda2 = v;
            }
            if let Some(v) = s.f64("tau")? {
                loss.temperature_tau = v;
            }
            if let Some(v) = s.bool("learnable_temperature")? {
                loss.learnable_temperature = v;
            }
            if let Some(v) = s.f64("scale_factor")? {
                loss.rank.scale_factor = v;
            }
            s.finish()?;
        }

        let mut tr = root
            .section("train")?
            .ok_or_else(|| ConfigError::Missing("train".into()))?;
        let mut train = TrainConfig {
            epochs: tr.req(Section::usize, "epochs")?,
            batch_size: tr.req(Section::usize, "batch_size")?,
            learning_rate: tr.req(Section::f64, "learning_rate")?,
            loss,
            seed,
            ..TrainConfig::default()
        };
        let optimizer = tr
            .choice("optimizer", &[("adam", "adam"), ("sgd", "sgd")])?
            .unwrap_or("adam");
        let (b1, b2, eps) = (tr.f64("adam_beta1")?, tr.f64("adam_beta2")?, tr.f64("adam_eps")?);
        train.optimizer = match optimizer {
            "sgd" => {
                if b1.is_some() || b2.is_some() || eps.is_some() {
                    return Err(ConfigError::Type {
                        key: "train.optimizer".into(),
                        detail: "adam_* keys given with optimizer = \"sgd\"".into(),
                    });
                }
                OptimizerKind::Sgd
            }
            _ => {
                let OptimizerKind::Adam { beta1, beta2, eps: e } = OptimizerKind::adam() else {
                    unreachable!()
                };
                OptimizerKind::Adam {
                    beta1: b1.unwrap_or(beta1),
                    beta2: b2.unwrap_or(beta2),
                    eps: eps.unwrap_or(e),
                }
            }
        };
        if let Some(v) = tr.u64("checkpoint_every")? {
            train.checkpoint_every = v;
        }
        tr.finish()?;

        let mut eval = EvalConfig::default();
        if let Some(mut s) = root.section("eval")? {
            if let Some(v) = s.usize_list("top_ks")? {
                eval.top_ks = v;
            }
            if let Some(v) = s.usize_list("recall_ks")? {
                eval.recall_ks = v;
            }
            if let Some(v) = s.f64("probe_l2")? {
                eval.probe_l2 = v;
            }
            if let Some(v) = s.usize("probe_iters")? {
                eval.probe_iters = v;
            }
            if let Some(v) = s.f64("probe_lr")? {
                eval.probe_lr = v;
            }
            s.finish()?;
        }

        let mut compare = CompareSection {
            variants: vec![Ablation::ClipOnly, Ablation::Full],
            seeds: vec![0, 1, 2, 3, 4],
        };
        if let Some(mut s) = root.section("compare")? {
            if let Some(names) = s.str_list("variants")? {
                compare.variants = names
                    .iter()
                    .map(|n| {
                        n.parse().map_err(|_| ConfigError::Type {
                            key: "compare.variants".into(),
                            detail: format!("unknown variant {n:?}"),
                        })
                    })
                    .collect::<Result<_>>()?;
            }
            if let Some(seeds) = s.u64_list("seeds")? {
                compare.seeds = seeds;
            }
            s.finish()?;
            if compare.variants.is_empty() || compare.seeds.is_empty() {
                return Err(ConfigError::Type {
                    key: "compare".into(),
                    detail: "variants and seeds must be non-empty".into(),
                });
            }
        }
        root.finish()?;

        Ok(RunConfig {
            seed,
            dataset,
            encoder,
            train,
            eval,
            compare,
        })
    }

    /// Encoder architecture for the configured dataset, initialised from `seed`.
    pub fn encoder_config(&self, seed: u64) -> EncoderConfig {
        EncoderConfig {
            image_input_dim: self.dataset.image_dim,
            text_input_dim: self.dataset.text_dim,
            image_hidden: self.encoder.image_hidden.clone(),
            text_hidden: self.encoder.text_hidden.clone(),
            shared_dim: self.encoder.shared_dim,
            activation: self.encoder.activation,
            init_seed: seed,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        self
    }
}

/// A TOML table that remembers which keys were read.
struct Section {
    prefix: String,
    table: Table,
    seen: BTreeSet<String>,
}

impl Section {
    fn new(prefix: &str, table: Table) -> Self {
        Section {
            prefix: prefix.to_string(),
            table,
            seen: BTreeSet::new(),
        }
    }

    fn path(&self, key: &str) -> String {
        if self.prefix.is_empty() {
            key.to_string()
        } else {
            format!("{}.{key}", self.prefix)
        }
    }

    fn get(&mut self, key: &str) -> Option<Value> {
        self.seen.insert(key.to_string());
        self.table.get(key).cloned()
    }

    fn bad(&self, key: &str, detail: impl Into<String>) -> ConfigError {
        ConfigError::Type {
            key: self.path(key),
            detail: detail.into(),
        }
    }

    fn req<T>(&mut self, read: fn(&mut Self, &str) -> Result<Option<T>>, key: &str) -> Result<T> {
        read(self, key)?.ok_or_else(|| ConfigError::Missing(self.path(key)))
    }

    fn section(&mut self, key: &str) -> Result<Option<Section>> {
        match self.get(key) {
            None => Ok(None),
            Some(Value::Table(t)) => Ok(Some(Section::new(&self.path(key), t))),
            Some(_) => Err(self.bad(key, "expected a table")),
        }
    }

    fn u64(&mut self, key: &str) -> Result<Option<u64>> {
        match self.get(key) {
            None => Ok(None),
            Some(Value::Integer(i)) if i >= 0 => Ok(Some(i as u64)),
            Some(v) => Err(self.bad(key, format!("expected a non-negative integer, got {v}"))),
        }
    }

    fn usize(&mut self, key: &str) -> Result<Option<usize>> {
        self.u64(key).map(|v| v.map(|v| v as usize))
    }

    fn f64(&mut self, key: &str) -> Result<Option<f64>> {
        match self.get(key) {
            None => Ok(None),
            Some(Value::Float(f)) => Ok(Some(f)),
            Some(Value::Integer(i)) => Ok(Some(i as f64)),
            Some(v) => Err(self.bad(key, format!("expected a number, got {v}"))),
        }
    }

    fn bool(&mut self, key: &str) -> Result<Option<bool>> {
        match self.get(key) {
            None => Ok(None),
            Some(Value::Boolean(b)) => Ok(Some(b)),
            Some(v) => Err(self.bad(key, format!("expected true or false, got {v}"))),
        }
    }

    fn str_list(&mut self, key: &str) -> Result<Option<Vec<String>>> {
        match self.get(key) {
            None => Ok(None),
            Some(Value::Array(a)) => a
                .into_iter()
                .map(|v| match v {
                    Value::String(s) => Ok(s),
                    v => Err(self.bad(key, format!("expected strings, got {v}"))),
                })
                .collect::<Result<_>>()
                .map(Some),
            Some(v) => Err(self.bad(key, format!("expected an array, got {v}"))),
        }
    }

    fn u64_list(&mut self, key: &str) -> Result<Option<Vec<u64>>> {
        match self.get(key) {
            None => Ok(None),
            Some(Value::Array(a)) => a
                .into_iter()
                .map(|v| match v {
                    Value::Integer(i) if i >= 0 => Ok(i as u64),
                    v => Err(self.bad(key, format!("expected non-negative integers, got {v}"))),
                })
                .collect::<Result<_>>()
                .map(Some),
            Some(v) => Err(self.bad(key, format!("expected an array, got {v}"))),
        }
    }

    fn usize_list(&mut self, key: &str) -> Result<Option<Vec<usize>>> {
        Ok(self.u64_list(key)?.map(|v| v.into_iter().map(|x| x as usize).collect()))
    }

    fn choice<T: Copy>(&mut self, key: &str, options: &[(&str, T)]) -> Result<Option<T>> {
        match self.get(key) {
            None => Ok(None),
            Some(Value::String(s)) => options
                .iter()
                .find(|(name, _)| *name == s)
                .map(|&(_, v)| Some(v))
                .ok_or_else(|| {
                    let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
                    self.bad(key, format!("{s:?} is not one of {}", names.join(", ")))
                }),
            Some(v) => Err(self.bad(key, format!("expected a string, got {v}"))),
        }
    }

    fn finish(self) -> Result<()> {
        match self.table.keys().find(|k| !self.seen.contains(*k)) {
            Some(k) => Err(ConfigError::Unknown(self.path(k))),
            None => Ok(()),
        }
    }
}

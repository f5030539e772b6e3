//! Experiment configuration files.
//!
//! A config is a TOML document. Only `strategy` and `rounds` are needed;
//! everything else has a default:
//!
//! ```toml
//! strategy = ["fedavg", "fedpai_u_client"]   # or a single name
//! rounds = 200
//! kappa = [0.3, 0.1]        # kept fraction; or `sparsity = [0.7, 0.9]`
//! alpha = [0.1, 0.8, 1.0]   # Dirichlet concentrations
//! iid = false               # also run an IID partition
//! seeds = [0, 1, 2]
//!
//! [training]
//! local_epochs = 10
//!
//! [model]
//! kind = "mlp"
//! hidden = [96, 64]
//! ```
//!
//! Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize};

use crate::data::{PartitionKind, SyntheticSpec};
use crate::error::{Error, Result};
use crate::federation::{
    DatasetSource, Divisor, EbtParams, IterativeParams, RunConfig, Strategy, StrategyConfig,
};
use crate::metrics::Codec;
use crate::nn::ModelSpec;

fn one_or_many<'de, D, T>(d: D) -> std::result::Result<Vec<T>, D::Error>
where
    D: Deserializer<'de>,
    T: Deserialize<'de>,
{
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum OneOrMany<T> {
        One(T),
        Many(Vec<T>),
    }
    Ok(match OneOrMany::deserialize(d)? {
        OneOrMany::One(v) => vec![v],
        OneOrMany::Many(v) => v,
    })
}

fn one_or_many_opt<'de, D, T>(d: D) -> std::result::Result<Option<Vec<T>>, D::Error>
where
    D: Deserializer<'de>,
    T: Deserialize<'de>,
{
    one_or_many(d).map(Some)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// Gaussian clusters, one per class.
    Synthetic {
        #[serde(default = "default_classes")]
        num_classes: usize,
        #[serde(default = "default_samples")]
        samples_per_class: usize,
        #[serde(default = "default_input_dim")]
        input_dim: usize,
        #[serde(default = "default_radius")]
        radius: f64,
        #[serde(default)]
        seed: u64,
    },
    /// `FPDS` binary file.
    File {
        path: PathBuf,
        #[serde(default)]
        split_seed: u64,
    },
}

fn default_classes() -> usize {
    10
}
fn default_samples() -> usize {
    500
}
fn default_input_dim() -> usize {
    32
}
fn default_radius() -> f64 {
    3.0
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Synthetic {
            num_classes: default_classes(),
            samples_per_class: default_samples(),
            input_dim: default_input_dim(),
            radius: default_radius(),
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn source(&self) -> DatasetSource {
        match self {
            DatasetConfig::Synthetic {
                num_classes,
                samples_per_class,
                input_dim,
                radius,
                seed,
            } => DatasetSource::Synthetic(SyntheticSpec {
                num_classes: *num_classes,
                samples_per_class: *samples_per_class,
                input_dim: *input_dim,
                radius: *radius,
                seed: *seed,
            }),
            DatasetConfig::File { path, split_seed } => DatasetSource::File {
                path: path.clone(),
                split_seed: *split_seed,
            },
        }
    }

    /// `(input_dim, num_classes)`, reading the file header if needed.
    fn dims(&self) -> Result<(usize, usize)> {
        match self {
            DatasetConfig::Synthetic {
                num_classes,
                input_dim,
                ..
            } => Ok((*input_dim, *num_classes)),
            DatasetConfig::File { path, .. } => {
                let d = crate::data::load_fpds(path)?;
                Ok((d.feature_dim(), d.num_classes))
            }
        }
    }

    fn validate(&self) -> Result<()> {
        if let DatasetConfig::Synthetic {
            num_classes,
            samples_per_class,
            input_dim,
            radius,
            ..
        } = self
        {
            if *num_classes < 2 {
                return Err(Error::config(
                    "dataset.num_classes",
                    format!("must be >= 2, got {num_classes}"),
                ));
            }
            if *samples_per_class < 2 {
                return Err(Error::config(
                    "dataset.samples_per_class",
                    format!("must be >= 2, got {samples_per_class}"),
                ));
            }
            if *input_dim == 0 {
                return Err(Error::config("dataset.input_dim", "must be >= 1, got 0"));
            }
            if !(radius.is_finite() && *radius >= 0.0) {
                return Err(Error::config(
                    "dataset.radius",
                    format!("must be >= 0, got {radius}"),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    Mlp {
        #[serde(default = "default_hidden")]
        hidden: Vec<usize>,
    },
    /// Input features are read as `in_channels × side × side`.
    Cnn {
        in_channels: usize,
        side: usize,
        channels: Vec<usize>,
        #[serde(default = "default_kernel")]
        kernel_size: usize,
    },
}

fn default_hidden() -> Vec<usize> {
    vec![96, 64]
}
fn default_kernel() -> usize {
    3
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::Mlp {
            hidden: default_hidden(),
        }
    }
}

impl ModelConfig {
    pub fn build(&self, input_dim: usize, num_classes: usize) -> Result<ModelSpec> {
        let spec = match self {
            ModelConfig::Mlp { hidden } => ModelSpec::mlp(input_dim, hidden, num_classes),
            ModelConfig::Cnn {
                in_channels,
                side,
                channels,
                kernel_size,
            } => {
                if in_channels * side * side != input_dim {
                    return Err(Error::config(
                        "model",
                        format!(
                            "{in_channels}x{side}x{side} input does not match feature dimension {input_dim}"
                        ),
                    ));
                }
                ModelSpec::cnn(*in_channels, *side, channels, *kernel_size, num_classes)
            }
        };
        spec.validate()
            .map_err(|e| Error::config("model", e.to_string()))?;
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Absolute round at which the learning rate decays; 0 disables decay.
    pub lr_decay_round: usize,
    pub lr_decay_factor: f64,
    pub grasp_batch: usize,
    pub divisor: Divisor,
    pub codec: Codec,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        let s = StrategyConfig::default();
        Self {
            local_epochs: s.local_epochs,
            batch_size: s.batch_size,
            lr: s.lr,
            lr_decay_round: s.lr_decay_round.unwrap_or(0),
            lr_decay_factor: s.lr_decay_factor,
            grasp_batch: s.grasp_batch,
            divisor: s.divisor,
            codec: s.codec,
        }
    }
}

/// A parsed and validated experiment description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(deserialize_with = "one_or_many")]
    pub strategy: Vec<Strategy>,
    pub rounds: usize,
    #[serde(default = "default_clients")]
    pub num_clients: usize,
    #[serde(default = "default_fraction")]
    pub clients_per_round: f64,
    /// Kept fractions κ.
    #[serde(
        default,
        deserialize_with = "one_or_many_opt",
        skip_serializing_if = "Option::is_none"
    )]
    pub kappa: Option<Vec<f64>>,
    /// Alternative to `kappa`: pruned fractions, `κ = 1 − sparsity`.
    #[serde(
        default,
        deserialize_with = "one_or_many_opt",
        skip_serializing_if = "Option::is_none"
    )]
    pub sparsity: Option<Vec<f64>>,
    #[serde(default = "default_alpha", deserialize_with = "one_or_many")]
    pub alpha: Vec<f64>,
    #[serde(default)]
    pub iid: bool,
    #[serde(default = "default_seeds", deserialize_with = "one_or_many")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub ebt: EbtParams,
    #[serde(default)]
    pub iterative: IterativeParams,
}

fn default_clients() -> usize {
    100
}
fn default_fraction() -> f64 {
    0.1
}
fn default_alpha() -> Vec<f64> {
    vec![0.8]
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}
fn default_output() -> PathBuf {
    PathBuf::from("results")
}

pub const DEFAULT_KAPPA: f64 = 0.3;

/// How a grid cell partitions the training set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum AlphaSetting {
    Iid,
    Dirichlet(f64),
}

impl AlphaSetting {
    pub fn label(&self) -> String {
        match self {
            AlphaSetting::Iid => "iid".into(),
            AlphaSetting::Dirichlet(a) => format!("{a}"),
        }
    }

    pub fn partition(&self) -> PartitionKind {
        match self {
            AlphaSetting::Iid => PartitionKind::Iid,
            AlphaSetting::Dirichlet(alpha) => PartitionKind::Dirichlet { alpha: *alpha },
        }
    }
}

/// One point of the experiment grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub strategy: Strategy,
    pub kappa: f64,
    pub alpha: AlphaSetting,
    pub seed: u64,
}

impl Cell {
    /// File-name safe identifier.
    pub fn id(&self) -> String {
        format!(
            "{}_k{}_a{}_s{}",
            self.strategy.name(),
            self.kappa,
            self.alpha.label(),
            self.seed
        )
    }
}

impl ExperimentConfig {
    /// Kept-fraction grid, whichever way it was written.
    pub fn kappas(&self) -> Vec<f64> {
        match (&self.kappa, &self.sparsity) {
            (Some(k), _) => k.clone(),
            (None, Some(s)) => s.iter().map(|s| 1.0 - s).collect(),
            (None, None) => vec![DEFAULT_KAPPA],
        }
    }

    pub fn alpha_settings(&self) -> Vec<AlphaSetting> {
        let mut v: Vec<AlphaSetting> = self
            .alpha
            .iter()
            .map(|&a| AlphaSetting::Dirichlet(a))
            .collect();
        if self.iid {
            v.push(AlphaSetting::Iid);
        }
        v
    }

    /// Cartesian product of strategy × κ × α × seed, in that nesting order.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &strategy in &self.strategy {
            for kappa in self.kappas() {
                for alpha in self.alpha_settings() {
                    for &seed in &self.seeds {
                        out.push(Cell {
                            strategy,
                            kappa,
                            alpha,
                            seed,
                        });
                    }
                }
            }
        }
        out
    }

    pub fn strategy_config(&self, strategy: Strategy, kappa: f64) -> StrategyConfig {
        let t = &self.training;
        StrategyConfig {
            strategy,
            kappa,
            local_epochs: t.local_epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            lr_decay_round: (t.lr_decay_round > 0).then_some(t.lr_decay_round),
            lr_decay_factor: t.lr_decay_factor,
            clients_per_round: self.clients_per_round,
            grasp_batch: t.grasp_batch,
            ebt: self.ebt.clone(),
            iterative: self.iterative.clone(),
            divisor: t.divisor,
            codec: t.codec,
        }
    }

    /// The single-run configuration for a grid cell.
    pub fn run_config(&self, cell: &Cell) -> Result<RunConfig> {
        let (input_dim, num_classes) = self.dataset.dims()?;
        Ok(RunConfig {
            dataset: self.dataset.source(),
            model: self.model.build(input_dim, num_classes)?,
            num_clients: self.num_clients,
            partition: cell.alpha.partition(),
            rounds: self.rounds,
            strategy: self.strategy_config(cell.strategy, cell.kappa),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.strategy.is_empty() {
            return Err(Error::config(
                "strategy",
                "at least one strategy is required",
            ));
        }
        if self.rounds == 0 {
            return Err(Error::config("rounds", "must be >= 1, got 0"));
        }
        if self.num_clients == 0 {
            return Err(Error::config("num_clients", "must be >= 1, got 0"));
        }
        if self.kappa.is_some() && self.sparsity.is_some() {
            return Err(Error::config(
                "sparsity",
                "give either `kappa` or `sparsity`, not both",
            ));
        }
        if let Some(s) = &self.sparsity {
            for &v in s {
                if !(0.0..1.0).contains(&v) {
                    return Err(Error::config(
                        "sparsity",
                        format!("sparsity must be in [0,1), got {v}"),
                    ));
                }
            }
        }
        let kappas = self.kappas();
        if kappas.is_empty() {
            return Err(Error::config("kappa", "grid must not be empty"));
        }
        for &k in &kappas {
            if !(k > 0.0 && k <= 1.0) {
                return Err(Error::config(
                    "kappa",
                    format!("kappa must be in (0,1], got {k}"),
                ));
            }
        }
        for &a in &self.alpha {
            if !(a.is_finite() && a > 0.0) {
                return Err(Error::config(
                    "alpha",
                    format!("alpha must be > 0, got {a}"),
                ));
            }
        }
        if self.alpha_settings().is_empty() {
            return Err(Error::config(
                "alpha",
                "grid is empty; give at least one alpha or set iid = true",
            ));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "must not be empty"));
        }
        if self.training.local_epochs == 0 {
            return Err(Error::config(
                "training.local_epochs",
                "must be >= 1, got 0",
            ));
        }
        self.dataset.validate()?;
        self.strategy_config(self.strategy[0], kappas[0])
            .validate()?;
        if let DatasetConfig::Synthetic { .. } = self.dataset {
            let (d, k) = self.dataset.dims()?;
            self.model.build(d, k)?;
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("config", e.to_string()))
    }
}

/// Parses and validates a config document.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
        let msg = e.message().to_string();
        let field = unknown_field(&msg).unwrap_or_else(|| "config".into());
        Error::config(field, msg)
    })?;
    cfg.validate()?;
    Ok(cfg)
}

fn unknown_field(msg: &str) -> Option<String> {
    let rest = msg.strip_prefix("unknown field `")?;
    Some(rest[..rest.find('`')?].to_string())
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    parse_config(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_defaults() {
        let c = parse_config("strategy = \"fedpai_u_client\"\nrounds = 5\n").unwrap();
        assert_eq!(c.num_clients, 100);
        assert_eq!(c.clients_per_round, 0.1);
        assert_eq!(c.training.local_epochs, 10);
        assert_eq!(c.training.lr, 0.1);
        assert_eq!(c.training.batch_size, 32);
        assert_eq!(
            c.ebt,
            EbtParams {
                fifo_len: 5,
                epsilon: 0.1
            }
        );
        assert_eq!(c.strategy, vec![Strategy::FedpaiUClient]);
    }

    #[test]
    fn kappa_zero_is_rejected() {
        let e = parse_config("strategy = \"fedavg\"\nrounds = 5\nkappa = 0\n").unwrap_err();
        assert!(e.is_config_error());
        assert!(e.to_string().contains("kappa must be in (0,1]"), "{e}");
        let e =
            parse_config("strategy = \"fedavg\"\nrounds = 5\nkappa = [0.5, 1.5]\n").unwrap_err();
        assert!(e.to_string().contains("1.5"), "{e}");
    }

    #[test]
    fn alpha_grid_expands() {
        let c =
            parse_config("strategy = \"fedavg\"\nrounds = 1\nalpha = [0.1, 0.8, 1.0]\n").unwrap();
        assert_eq!(
            c.alpha_settings(),
            vec![
                AlphaSetting::Dirichlet(0.1),
                AlphaSetting::Dirichlet(0.8),
                AlphaSetting::Dirichlet(1.0)
            ]
        );
    }

    #[test]
    fn sparsity_is_complement_of_kappa() {
        let c =
            parse_config("strategy = \"fedavg\"\nrounds = 1\nsparsity = [0.5, 0.98]\n").unwrap();
        let k = c.kappas();
        assert_eq!(k[0], 0.5);
        assert!((k[1] - 0.02).abs() < 1e-12);
        assert!(
            parse_config("strategy = \"fedavg\"\nrounds = 1\nsparsity = 0.5\nkappa = 0.5\n")
                .is_err()
        );
    }

    #[test]
    fn unknown_keys_name_the_field() {
        let e = parse_config("strategy = \"fedavg\"\nrounds = 1\nlearning_rate = 3\n").unwrap_err();
        match e {
            Error::Config { field, .. } => assert_eq!(field, "learning_rate"),
            other => panic!("{other}"),
        }
        assert!(parse_config("strategy = \"nope\"\nrounds = 1\n").is_err());
    }

    #[test]
    fn round_trip() {
        let text = r#"
            strategy = ["fedavg", "fedpai_s"]
            rounds = 7
            kappa = [0.3, 0.1]
            alpha = [0.1, 1.0]
            iid = true
            seeds = [1, 2]
            [model]
            kind = "mlp"
            hidden = [16]
            [training]
            lr_decay_round = 3
            codec = "bitmap"
        "#;
        let c = parse_config(text).unwrap();
        let again = parse_config(&c.to_toml().unwrap()).unwrap();
        assert_eq!(c, again);
    }

    #[test]
    fn grid_cardinality() {
        let c = parse_config(
            "strategy = [\"fedavg\", \"fedpai_s\"]\nrounds = 1\nkappa = [0.5, 0.2]\nalpha = 0.5\nseeds = [0, 1]\n",
        )
        .unwrap();
        let cells = c.cells();
        assert_eq!(cells.len(), 8);
        let mut ids: Vec<_> = cells.iter().map(Cell::id).collect();
        ids.dedup();
        assert_eq!(ids.len(), 8);
    }

    #[test]
    fn field_errors_carry_range() {
        let e = parse_config("strategy = \"fedavg\"\nrounds = 1\nclients_per_round = 2.0\n")
            .unwrap_err();
        let s = e.to_string();
        assert!(
            s.contains("clients_per_round") && s.contains("(0,1]") && s.contains('2'),
            "{s}"
        );
        let e = parse_config("strategy = \"fedavg\"\nrounds = 1\nalpha = -1\n").unwrap_err();
        assert!(e.to_string().contains("alpha"));
    }
}

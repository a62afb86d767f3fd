//! Flat `key = value` run configuration with dotted section prefixes.
//!
//! Later sources override earlier ones: defaults, then the file, then
//! command-line overrides. Unknown keys are rejected before anything runs.

use std::path::PathBuf;
use std::str::FromStr;

use mdm_core::bench::BenchConfig;
use mdm_core::data::SyntheticTaskSpec;
use mdm_core::estimators::{EstimatorKind, OutputActivation};
use mdm_core::eval::Substitution;
use mdm_core::fusion::{CriticInput, DownstreamLoss, EncoderVariant, TotalLossConfig};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),
    #[error("invalid value `{value}` for `{key}`: {reason}")]
    Value { key: String, value: String, reason: String },
    #[error("{0}")]
    Missing(String),
}

/// `(key, value, line)` entries of a config file, in file order.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String, usize)>, ConfigError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(ConfigError::Syntax {
                line: i + 1,
                text: raw.trim().to_string(),
            });
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(ConfigError::Syntax {
                line: i + 1,
                text: raw.trim().to_string(),
            });
        }
        out.push((k.to_string(), v.trim_matches('"').to_string(), i + 1));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchSection {
    pub config: BenchConfig,
    pub rhos: Vec<f64>,
    pub kinds: Vec<EstimatorKind>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderSection {
    pub variant: EncoderVariant,
    pub hidden: usize,
    pub out_dim: usize,
    pub dropout: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub bench: BenchSection,
    /// Directory holding `train.jsonl`, `valid.jsonl`, `test.jsonl`.
    pub data_dir: Option<PathBuf>,
    /// Generate the synthetic task when no data directory is given.
    pub synthetic_enabled: bool,
    pub synthetic: SyntheticTaskSpec,
    pub encoder: EncoderSection,
    pub loss: TotalLossConfig,
    pub grid_lambdas: Option<Vec<f64>>,
    pub grid_seeds: Option<Vec<u64>>,
    pub drop_substitution: Substitution,
    pub score_k: usize,
    pub score_split: String,
    pub checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("out"),
            bench: BenchSection {
                config: BenchConfig::default(),
                rhos: vec![0.0, 0.3, 0.5, 0.7, 0.9],
                kinds: EstimatorKind::ALL.to_vec(),
            },
            data_dir: None,
            synthetic_enabled: false,
            synthetic: SyntheticTaskSpec::default(),
            encoder: EncoderSection {
                variant: EncoderVariant::ConcatMlp,
                hidden: 32,
                out_dim: 16,
                dropout: 0.2,
            },
            loss: TotalLossConfig::default(),
            grid_lambdas: None,
            grid_seeds: None,
            drop_substitution: Substitution::Zeros,
            score_k: 5,
            score_split: "test".into(),
            checkpoint: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::Value {
        key: key.into(),
        value: value.into(),
        reason: e.to_string(),
    })
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn parse_opt<T: FromStr>(key: &str, value: &str) -> Result<Option<T>, ConfigError>
where
    T::Err: std::fmt::Display,
{
    match value {
        "none" | "" => Ok(None),
        v => parse(key, v).map(Some),
    }
}

/// Seeds as a list (`1,2,3`), a range (`0..10`) or a count (`10` → `0..10`).
fn parse_seeds(key: &str, value: &str) -> Result<Vec<u64>, ConfigError> {
    if let Some((a, b)) = value.split_once("..") {
        let (a, b): (u64, u64) = (parse(key, a.trim())?, parse(key, b.trim())?);
        return Ok((a..b).collect());
    }
    if value.contains(',') {
        return parse_list(key, value);
    }
    let n: u64 = parse(key, value)?;
    Ok((0..n).collect())
}

impl RunConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let b = &mut self.bench.config;
        let s = &mut self.synthetic;
        let l = &mut self.loss;
        match key {
            "seed" => self.seed = parse(key, value)?,
            "out" => self.out = PathBuf::from(value),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),

            "bench.dim" => b.dim = parse(key, value)?,
            "bench.vars" => b.vars = parse(key, value)?,
            "bench.n" => b.n = parse(key, value)?,
            "bench.rhos" => self.bench.rhos = parse_list(key, value)?,
            "bench.kinds" => self.bench.kinds = parse_list(key, value)?,
            "bench.steps" => b.steps = parse(key, value)?,
            "bench.batch" => b.batch = parse(key, value)?,
            "bench.lr" => b.lr = parse(key, value)?,
            "bench.weight_decay" => b.weight_decay = parse(key, value)?,
            "bench.width" => b.base_width = parse(key, value)?,
            "bench.dropout" => b.dropout = parse(key, value)?,
            "bench.output" => b.output = parse_opt::<OutputActivation>(key, value)?,
            "bench.clip" => b.clip = parse(key, value)?,
            "bench.ema" => b.ema_decay = parse_opt(key, value)?,
            "bench.anneal" => b.anneal = parse(key, value)?,
            "bench.held_out" => b.held_out = parse(key, value)?,
            "bench.eval_shuffles" => b.eval_shuffles = parse(key, value)?,

            "data.dir" => self.data_dir = Some(PathBuf::from(value)),
            "data.synthetic" => self.synthetic_enabled = parse(key, value)?,
            "synthetic.latent_dim" => s.latent_dim = parse(key, value)?,
            "synthetic.dim_audio" => s.dim_audio = parse(key, value)?,
            "synthetic.dim_visual" => s.dim_visual = parse(key, value)?,
            "synthetic.dim_language" => s.dim_language = parse(key, value)?,
            "synthetic.seq_len" => s.seq_len = parse_opt(key, value)?,
            "synthetic.loading_scale" => s.loading_scale = parse(key, value)?,
            "synthetic.noise_audio" => s.noise_audio = parse(key, value)?,
            "synthetic.noise_visual" => s.noise_visual = parse(key, value)?,
            "synthetic.noise_language" => s.noise_language = parse(key, value)?,
            "synthetic.label_scale" => s.label_scale = parse(key, value)?,
            "synthetic.label_noise" => s.label_noise = parse(key, value)?,
            "synthetic.n_train" => s.n_train = parse(key, value)?,
            "synthetic.n_valid" => s.n_valid = parse(key, value)?,
            "synthetic.n_test" => s.n_test = parse(key, value)?,

            "encoder.variant" => self.encoder.variant = parse(key, value)?,
            "encoder.hidden" => self.encoder.hidden = parse(key, value)?,
            "encoder.out_dim" => self.encoder.out_dim = parse(key, value)?,
            "encoder.dropout" => self.encoder.dropout = parse(key, value)?,

            "loss.lambda" => l.lambda = parse(key, value)?,
            "loss.kind" => l.kind = parse(key, value)?,
            "loss.downstream" => l.loss = parse(key, value)?,
            "loss.unroll" => l.unroll = parse(key, value)?,
            "loss.lr" => l.lr = parse(key, value)?,
            "loss.critic_lr" => l.critic_lr = parse_opt(key, value)?,
            "loss.weight_decay" => l.weight_decay = parse(key, value)?,
            "loss.clip" => l.clip = parse(key, value)?,
            "loss.batch_size" => l.batch_size = parse(key, value)?,
            "loss.epochs" => l.epochs = parse(key, value)?,
            "loss.patience" => l.patience = parse(key, value)?,
            "critic.output" => l.critic_output = parse_opt::<OutputActivation>(key, value)?,
            "critic.input" => l.critic_input = parse::<CriticInput>(key, value)?,
            "critic.dropout" => l.critic_dropout = parse(key, value)?,
            "critic.width" => l.critic_width = parse_opt(key, value)?,
            "critic.ema" => l.ema_decay = parse_opt(key, value)?,
            "shuffle.static" => l.static_shuffle = parse(key, value)?,

            "grid.lambdas" => self.grid_lambdas = Some(parse_list(key, value)?),
            "grid.seeds" => self.grid_seeds = Some(parse_seeds(key, value)?),

            "drop.substitution" => self.drop_substitution = parse(key, value)?,
            "score.k" => self.score_k = parse(key, value)?,
            "score.split" => match value {
                "train" | "valid" | "test" => self.score_split = value.into(),
                _ => {
                    return Err(ConfigError::Value {
                        key: key.into(),
                        value: value.into(),
                        reason: "expected train, valid or test".into(),
                    })
                }
            },
            _ => return Err(ConfigError::UnknownKey(key.into())),
        }
        Ok(())
    }

    /// Defaults, then `file` (if any), then `overrides` in order.
    pub fn resolve(file: Option<&str>, overrides: &[(String, String)]) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        if let Some(text) = file {
            for (k, v, _) in parse_pairs(text)? {
                cfg.set(&k, &v)?;
            }
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        cfg.loss.seed = cfg.seed;
        cfg.synthetic.seed = cfg.seed;
        Ok(cfg)
    }

    pub fn downstream(&self) -> DownstreamLoss {
        self.loss.loss
    }
}

/// Splits `key=value`.
pub fn parse_override(s: &str) -> Result<(String, String), ConfigError> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| ConfigError::Syntax {
            line: 0,
            text: s.to_string(),
        })
}

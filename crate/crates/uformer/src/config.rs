//! Plain-text `key = value` configuration covering the model, training, and
//! loss settings. Lines starting with `#` are comments; unknown keys are
//! rejected. The same format serves as the config snapshot embedded in
//! checkpoints, so serialization is canonical and round-trips.

use crate::attention::QkScale;
use crate::error::{Error, Result};
use crate::loss::{LossFlavor, LossMode};
use crate::model::UFormerConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub model: UFormerConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        Ok(())
    }
}

fn parse_usize_list(value: &str, key: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("{key}: `{v}` is not a positive integer")))
        })
        .collect()
}

fn parse_num<T: std::str::FromStr>(value: &str, key: &str) -> Result<T> {
    value
        .trim()
        .parse::<T>()
        .map_err(|_| Error::Config(format!("{key}: cannot parse `{value}`")))
}

fn parse_bool(value: &str, key: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(Error::Config(format!("{key}: `{other}` is not a boolean"))),
    }
}

/// Applies one `key = value` setting; accepts both bare keys and the
/// `loss.`-prefixed spellings for the loss block.
pub fn apply_setting(cfg: &mut RunConfig, key: &str, value: &str) -> Result<()> {
    let value = value.trim();
    match key.trim() {
        "enc_channels" => cfg.model.enc_channels = parse_usize_list(value, key)?,
        "dec_channels" => cfg.model.dec_channels = parse_usize_list(value, key)?,
        "kernel_t" => cfg.model.kernel.0 = parse_num(value, key)?,
        "kernel_f" => cfg.model.kernel.1 = parse_num(value, key)?,
        "stride_t" => cfg.model.stride.0 = parse_num(value, key)?,
        "stride_f" => cfg.model.stride.1 = parse_num(value, key)?,
        "leaky_slope" => cfg.model.leaky_slope = parse_num(value, key)?,
        "heads" => cfg.model.heads = parse_num(value, key)?,
        "span" => cfg.model.span = parse_num(value, key)?,
        "use_mhsa" => cfg.model.use_mhsa = parse_bool(value, key)?,
        "use_mhca" => cfg.model.use_mhca = parse_bool(value, key)?,
        "fft_size" => cfg.model.fft_size = parse_num(value, key)?,
        "hop" => cfg.model.hop = parse_num(value, key)?,
        "value_pos_sign" => cfg.model.value_pos_sign = parse_num(value, key)?,
        "qk_scale" => {
            cfg.model.qk_scale = match value {
                "one" => QkScale::One,
                "sqrt_dk" => QkScale::SqrtDk,
                "sqrt_len" => QkScale::SqrtLen,
                other => {
                    return Err(Error::Config(format!(
                        "qk_scale: `{other}` is not one of one|sqrt_dk|sqrt_len"
                    )))
                }
            }
        }
        "bn_eps" => cfg.model.bn_eps = parse_num(value, key)?,
        "bn_momentum" => cfg.model.bn_momentum = parse_num(value, key)?,
        "lr0" => cfg.train.lr0 = parse_num(value, key)?,
        "plateau_patience" => cfg.train.plateau_patience = parse_num(value, key)?,
        "plateau_factor" => cfg.train.plateau_factor = parse_num(value, key)?,
        "early_stop_patience" => cfg.train.early_stop_patience = parse_num(value, key)?,
        "chunk_seconds" => cfg.train.chunk_seconds = parse_num(value, key)?,
        "batch_size" => cfg.train.batch_size = parse_num(value, key)?,
        "max_epochs" => cfg.train.max_epochs = parse_num(value, key)?,
        "seed" => cfg.train.seed = parse_num(value, key)?,
        "mode" | "loss.mode" => {
            cfg.train.loss.mode = match value {
                "T" => LossMode::T,
                "RI" => LossMode::Ri,
                "TF1" => LossMode::Tf1,
                "TF2" => LossMode::Tf2,
                other => {
                    return Err(Error::Config(format!(
                        "loss.mode: `{other}` is not one of T|RI|TF1|TF2"
                    )))
                }
            }
        }
        "time_flavor" | "loss.time_flavor" => {
            cfg.train.loss.time_flavor = match value {
                "MAE" => LossFlavor::Mae,
                "MSE" => LossFlavor::Mse,
                other => {
                    return Err(Error::Config(format!(
                        "loss.time_flavor: `{other}` is not one of MAE|MSE"
                    )))
                }
            }
        }
        "alpha" | "loss.alpha" => cfg.train.loss.alpha = parse_num(value, key)?,
        other => return Err(Error::Config(format!("unknown key `{other}`"))),
    }
    Ok(())
}

/// Parses a whole config document on top of the defaults.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "line {}: expected `key = value`, got `{raw}`",
                lineno + 1
            )));
        };
        apply_setting(&mut cfg, key, value)
            .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn fmt_list(values: &[usize]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

/// Canonical dump covering every key, parseable by [`parse_config`].
pub fn serialize_config(cfg: &RunConfig) -> String {
    let qk = match cfg.model.qk_scale {
        QkScale::One => "one",
        QkScale::SqrtDk => "sqrt_dk",
        QkScale::SqrtLen => "sqrt_len",
    };
    let mode = match cfg.train.loss.mode {
        LossMode::T => "T",
        LossMode::Ri => "RI",
        LossMode::Tf1 => "TF1",
        LossMode::Tf2 => "TF2",
    };
    let flavor = match cfg.train.loss.time_flavor {
        LossFlavor::Mae => "MAE",
        LossFlavor::Mse => "MSE",
    };
    format!(
        "enc_channels = {}\n\
         dec_channels = {}\n\
         kernel_t = {}\n\
         kernel_f = {}\n\
         stride_t = {}\n\
         stride_f = {}\n\
         leaky_slope = {}\n\
         heads = {}\n\
         span = {}\n\
         use_mhsa = {}\n\
         use_mhca = {}\n\
         fft_size = {}\n\
         hop = {}\n\
         value_pos_sign = {}\n\
         qk_scale = {}\n\
         bn_eps = {}\n\
         bn_momentum = {}\n\
         lr0 = {}\n\
         plateau_patience = {}\n\
         plateau_factor = {}\n\
         early_stop_patience = {}\n\
         chunk_seconds = {}\n\
         batch_size = {}\n\
         max_epochs = {}\n\
         seed = {}\n\
         loss.mode = {}\n\
         loss.time_flavor = {}\n\
         loss.alpha = {}\n",
        fmt_list(&cfg.model.enc_channels),
        fmt_list(&cfg.model.dec_channels),
        cfg.model.kernel.0,
        cfg.model.kernel.1,
        cfg.model.stride.0,
        cfg.model.stride.1,
        cfg.model.leaky_slope,
        cfg.model.heads,
        cfg.model.span,
        cfg.model.use_mhsa,
        cfg.model.use_mhca,
        cfg.model.fft_size,
        cfg.model.hop,
        cfg.model.value_pos_sign,
        qk,
        cfg.model.bn_eps,
        cfg.model.bn_momentum,
        cfg.train.lr0,
        cfg.train.plateau_patience,
        cfg.train.plateau_factor,
        cfg.train.early_stop_patience,
        cfg.train.chunk_seconds,
        cfg.train.batch_size,
        cfg.train.max_epochs,
        cfg.train.seed,
        mode,
        flavor,
        cfg.train.loss.alpha,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        let text = serialize_config(&cfg);
        let back = parse_config(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn rejects_unknown_key() {
        let err = parse_config("bogus = 1\n").unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn accepts_comments_and_overrides() {
        let text = "# ablation\nuse_mhsa = false\nloss.mode = TF1\ntime_flavor = MAE\nalpha = 0.5\n";
        let cfg = parse_config(text).unwrap();
        assert!(!cfg.model.use_mhsa);
        assert_eq!(cfg.train.loss.time_flavor, LossFlavor::Mae);
        assert!((cfg.train.loss.alpha - 0.5).abs() < 1e-6);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(parse_config("heads = many\n").is_err());
        assert!(parse_config("qk_scale = blah\n").is_err());
        assert!(parse_config("alpha = 2.0\n").is_err());
    }
}

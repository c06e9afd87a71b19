//! `key = value` run configuration with `#` comments and `[section]`
//! headers. Sections only group keys, except `[manifest]`, whose entries are
//! run provenance and are skipped when loading a configuration.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use pr2r_core::lifelong::RunConfig;

use crate::CliError;

pub const MANIFEST_SECTION: &str = "manifest";

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: key `{key}` expects {expected}, got `{value}`")]
    Type {
        line: usize,
        key: String,
        expected: &'static str,
        value: String,
    },
    #[error("line {line}: key `{key}` given twice")]
    Duplicate { line: usize, key: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

fn parse_value<T: FromStr>(line: usize, key: &str, value: &str, expected: &'static str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::Type {
        line,
        key: key.to_string(),
        expected,
        value: value.to_string(),
    })
}

fn set_key(cfg: &mut RunConfig, line: usize, key: &str, value: &str) -> Result<(), ConfigError> {
    let real = |v: &str| parse_value::<f64>(line, key, v, "a real number");
    let count = |v: &str| parse_value::<usize>(line, key, v, "a non-negative integer");
    match key {
        "gamma" => cfg.gamma = real(value)?,
        "lambda" => cfg.lambda = real(value)?,
        "alpha" => cfg.alpha = real(value)?,
        "beta" => cfg.beta = real(value)?,
        "lr" => cfg.lr = real(value)?,
        "eta_s" => cfg.eta_s = real(value)?,
        "momentum" => cfg.momentum = real(value)?,
        "grad_clip" => cfg.grad_clip = real(value)?,
        "weight_decay" => cfg.weight_decay = real(value)?,
        "warmup_steps" => cfg.warmup_steps = count(value)?,
        "steps_per_task" => cfg.steps_per_task = count(value)?,
        "p_ids" => cfg.p_ids = count(value)?,
        "k_instances" => cfg.k_instances = count(value)?,
        "snapshots" => cfg.snapshots = count(value)?,
        "budget" => cfg.budget = count(value)?,
        "ratio" => cfg.ratio = real(value)?,
        "condense_epochs" => cfg.condense_epochs = count(value)?,
        "condense_real_batch" => cfg.condense_real_batch = count(value)?,
        "mask_sigma" => cfg.mask_sigma = real(value)?,
        "condense" => cfg.condense = parse_value(line, key, value, "true or false")?,
        "style_steps" => cfg.style_steps = count(value)?,
        "style_lr" => cfg.style_lr = real(value)?,
        "style_batch" => cfg.style_batch = count(value)?,
        "style_jitter" => cfg.style_jitter = real(value)?,
        "seed" => cfg.seed = parse_value(line, key, value, "an unsigned 64-bit integer")?,
        _ => {
            return Err(ConfigError::UnknownKey {
                line,
                key: key.to_string(),
            })
        }
    }
    Ok(())
}

/// Parses configuration text; keys not given keep their defaults.
pub fn parse_config_str(text: &str) -> Result<RunConfig, ConfigError> {
    let mut cfg = RunConfig::default();
    let mut section = String::new();
    let mut seen = std::collections::BTreeSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if let Some(rest) = content.strip_prefix('[') {
            let name = rest.strip_suffix(']').ok_or_else(|| ConfigError::Syntax {
                line,
                msg: format!("unterminated section header `{content}`"),
            })?;
            let name = name.trim();
            if name.is_empty() {
                return Err(ConfigError::Syntax {
                    line,
                    msg: "empty section name".into(),
                });
            }
            section = name.to_string();
            continue;
        }
        let (key, value) = content.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line,
            msg: format!("expected `key = value`, got `{content}`"),
        })?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() {
            return Err(ConfigError::Syntax {
                line,
                msg: "missing key before `=`".into(),
            });
        }
        if section == MANIFEST_SECTION {
            continue;
        }
        if !seen.insert(key.to_string()) {
            return Err(ConfigError::Duplicate {
                line,
                key: key.to_string(),
            });
        }
        set_key(&mut cfg, line, key, value)?;
    }
    cfg.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    parse_config_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

/// Every key with its resolved value, grouped as in the documented format.
pub fn render_config(cfg: &RunConfig) -> String {
    let mut out = String::new();
    let groups: [(&str, Vec<(&str, String)>); 4] = [
        (
            "objective",
            vec![
                ("gamma", cfg.gamma.to_string()),
                ("lambda", cfg.lambda.to_string()),
                ("alpha", cfg.alpha.to_string()),
                ("beta", cfg.beta.to_string()),
            ],
        ),
        (
            "training",
            vec![
                ("lr", cfg.lr.to_string()),
                ("momentum", cfg.momentum.to_string()),
                ("grad_clip", cfg.grad_clip.to_string()),
                ("weight_decay", cfg.weight_decay.to_string()),
                ("warmup_steps", cfg.warmup_steps.to_string()),
                ("steps_per_task", cfg.steps_per_task.to_string()),
                ("p_ids", cfg.p_ids.to_string()),
                ("k_instances", cfg.k_instances.to_string()),
                ("snapshots", cfg.snapshots.to_string()),
                ("seed", cfg.seed.to_string()),
            ],
        ),
        (
            "memory",
            vec![
                ("budget", cfg.budget.to_string()),
                ("ratio", cfg.ratio.to_string()),
                ("condense", cfg.condense.to_string()),
                ("eta_s", cfg.eta_s.to_string()),
                ("condense_epochs", cfg.condense_epochs.to_string()),
                ("condense_real_batch", cfg.condense_real_batch.to_string()),
                ("mask_sigma", cfg.mask_sigma.to_string()),
            ],
        ),
        (
            "style",
            vec![
                ("style_steps", cfg.style_steps.to_string()),
                ("style_lr", cfg.style_lr.to_string()),
                ("style_batch", cfg.style_batch.to_string()),
                ("style_jitter", cfg.style_jitter.to_string()),
            ],
        ),
    ];
    for (i, (name, keys)) in groups.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        let _ = writeln!(out, "[{name}]");
        for (k, v) in keys {
            let _ = writeln!(out, "{k} = {v}");
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(parse_config_str("").unwrap(), RunConfig::default());
        assert_eq!(parse_config_str("# nothing\n\n   \n").unwrap(), RunConfig::default());
    }

    #[test]
    fn documented_defaults() {
        let c = RunConfig::default();
        assert_eq!((c.gamma, c.lambda, c.alpha, c.beta), (4.5, 1.0, 0.01, 0.01));
        assert_eq!((c.eta_s, c.momentum, c.ratio, c.budget), (0.002, 0.9, 0.5, 2));
    }

    #[test]
    fn values_sections_and_comments() {
        let c = parse_config_str("[objective]\ngamma = 4.5 # style weight\nlambda=0\n[memory]\ncondense = false\nseed = 12\n").unwrap();
        assert_eq!(c.gamma, 4.5);
        assert_eq!(c.lambda, 0.0);
        assert!(!c.condense);
        assert_eq!(c.seed, 12);
    }

    #[test]
    fn type_error_names_key_and_line() {
        let e = parse_config_str("\n\ngamma = abc\n").unwrap_err();
        assert!(matches!(&e, ConfigError::Type { line: 3, key, .. } if key == "gamma"), "{e}");
        assert!(e.to_string().contains("gamma") && e.to_string().contains("line 3"));
    }

    #[test]
    fn rejections() {
        assert!(matches!(parse_config_str("gama = 1").unwrap_err(), ConfigError::UnknownKey { line: 1, .. }));
        assert!(matches!(parse_config_str("x\n").unwrap_err(), ConfigError::Syntax { line: 1, .. }));
        assert!(matches!(parse_config_str("[open\n").unwrap_err(), ConfigError::Syntax { line: 1, .. }));
        assert!(matches!(parse_config_str("seed = 1\nseed = 2").unwrap_err(), ConfigError::Duplicate { line: 2, .. }));
        assert!(matches!(parse_config_str("ratio = 2").unwrap_err(), ConfigError::Invalid(_)));
        assert!(matches!(parse_config_str("budget = -1").unwrap_err(), ConfigError::Type { .. }));
    }

    #[test]
    fn manifest_section_is_skipped() {
        let c = parse_config_str("seed = 3\n[manifest]\ndataset_digest = abc\nstage_1 = metrics.csv:1\n").unwrap();
        assert_eq!(c.seed, 3);
    }

    #[test]
    fn render_round_trips() {
        let cfg = RunConfig {
            gamma: 0.0,
            lr: 0.1 + 0.2,
            condense: false,
            seed: u64::MAX,
            ..Default::default()
        };
        assert_eq!(parse_config_str(&render_config(&cfg)).unwrap(), cfg);
    }
}

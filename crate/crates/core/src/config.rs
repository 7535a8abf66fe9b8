//! Flat `key = value` run configuration with a per-command schema.
//!
//! Resolution order is schema defaults, then a config file, then command-line
//! overrides. The resolved map is rendered back in the same text format so a
//! run can be reproduced from its snapshot alone.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConfigKey {
    pub name: &'static str,
    pub default: &'static str,
    pub help: &'static str,
}

pub const fn key(name: &'static str, default: &'static str, help: &'static str) -> ConfigKey {
    ConfigKey { name, default, help }
}

/// Parse `key = value` lines. Blank lines and `#` comments are skipped;
/// duplicate keys are an error.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut seen = BTreeMap::new();
    let mut pairs = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("config line {}: expected `key = value`", lineno + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Format(format!("config line {}: empty key", lineno + 1)));
        }
        if seen.insert(k.to_string(), lineno + 1).is_some() {
            return Err(Error::Format(format!("config line {}: duplicate key '{k}'", lineno + 1)));
        }
        pairs.push((k.to_string(), v.to_string()));
    }
    Ok(pairs)
}

/// Split a `KEY=VALUE` override.
pub fn parse_override(text: &str) -> Result<(String, String)> {
    match text.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
        _ => Err(Error::InvalidArgument(format!("override '{text}' is not KEY=VALUE"))),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub command: String,
    values: BTreeMap<String, String>,
}

impl RunConfig {
    /// Resolve `schema` defaults against `layers`, applied in order. Any key
    /// outside the schema is rejected. `{seed}` inside a value is replaced by
    /// the resolved `seed` key when the schema has one.
    pub fn resolve(command: &str, schema: &[ConfigKey], layers: &[Vec<(String, String)>]) -> Result<Self> {
        let mut values: BTreeMap<String, String> =
            schema.iter().map(|k| (k.name.to_string(), k.default.to_string())).collect();
        for layer in layers {
            for (k, v) in layer {
                match values.get_mut(k) {
                    Some(slot) => *slot = v.clone(),
                    None => {
                        return Err(Error::InvalidArgument(format!(
                            "unknown config key '{k}' for command {command} (known: {})",
                            schema.iter().map(|k| k.name).collect::<Vec<_>>().join(", ")
                        )))
                    }
                }
            }
        }
        if let Some(seed) = values.get("seed").cloned() {
            for v in values.values_mut() {
                if v.contains("{seed}") {
                    *v = v.replace("{seed}", &seed);
                }
            }
        }
        Ok(Self {
            command: command.to_string(),
            values,
        })
    }

    pub fn keys(&self) -> impl Iterator<Item = (&str, &str)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn str(&self, key: &str) -> Result<&str> {
        self.values
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::InvalidArgument(format!("config key '{key}' is not defined for {}", self.command)))
    }

    /// Empty values read as `None`.
    pub fn opt_str(&self, key: &str) -> Result<Option<&str>> {
        self.str(key).map(|v| if v.is_empty() { None } else { Some(v) })
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.str(key)?;
        raw.parse()
            .map_err(|_| Error::InvalidArgument(format!("config key '{key}': cannot parse '{raw}'")))
    }

    pub fn bool(&self, key: &str) -> Result<bool> {
        match self.str(key)? {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            other => Err(Error::InvalidArgument(format!("config key '{key}': expected a boolean, got '{other}'"))),
        }
    }

    /// Comma-separated list; empty means an empty list.
    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>> {
        let raw = self.str(key)?;
        if raw.is_empty() {
            return Ok(Vec::new());
        }
        raw.split(',')
            .map(|p| {
                p.trim()
                    .parse()
                    .map_err(|_| Error::InvalidArgument(format!("config key '{key}': cannot parse list item '{p}'")))
            })
            .collect()
    }

    pub fn render(&self) -> String {
        let mut out = format!("# resolved configuration for `{}`\n", self.command);
        for (k, v) in &self.values {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }
}

/// Parse a seed list such as `1..5` (inclusive), `3` or `1,4,9`.
pub fn parse_seed_list(text: &str) -> Result<Vec<u64>> {
    let bad = || Error::InvalidArgument(format!("cannot parse seed list '{text}' (expected e.g. 1..5 or 1,2,3)"));
    let seeds: Vec<u64> = if let Some((a, b)) = text.split_once("..") {
        let (a, b): (u64, u64) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
        if a > b {
            return Err(bad());
        }
        (a..=b).collect()
    } else {
        text.split(',').map(|s| s.trim().parse().map_err(|_| bad())).collect::<Result<_>>()?
    };
    let mut sorted = seeds.clone();
    sorted.sort_unstable();
    sorted.dedup();
    if seeds.is_empty() || sorted.len() != seeds.len() {
        return Err(bad());
    }
    Ok(seeds)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SCHEMA: &[ConfigKey] = &[
        key("seed", "0", ""),
        key("lr", "0.001", ""),
        key("hidden", "64,64", ""),
        key("model", "runs/seed_{seed}/model.osom", ""),
        key("flag", "false", ""),
    ];

    fn pairs(text: &str) -> Vec<(String, String)> {
        parse_pairs(text).unwrap()
    }

    #[test]
    fn layers_apply_in_order_and_render_round_trips() {
        let cfg = RunConfig::resolve(
            "pretrain",
            SCHEMA,
            &[pairs("lr = 0.01\n# comment\n\nseed=3"), vec![("lr".into(), "0.5".into())]],
        )
        .unwrap();
        assert_eq!(cfg.parse::<f64>("lr").unwrap(), 0.5);
        assert_eq!(cfg.parse::<u64>("seed").unwrap(), 3);
        assert_eq!(cfg.str("model").unwrap(), "runs/seed_3/model.osom");
        assert_eq!(cfg.list::<usize>("hidden").unwrap(), vec![64, 64]);
        assert!(!cfg.bool("flag").unwrap());
        let again = RunConfig::resolve("pretrain", SCHEMA, &[parse_pairs(&cfg.render()).unwrap()]).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn rejects_unknown_duplicate_and_malformed() {
        assert!(RunConfig::resolve("x", SCHEMA, &[pairs("learning_rate = 1")]).is_err());
        assert!(parse_pairs("a = 1\na = 2").is_err());
        assert!(parse_pairs("just words").is_err());
        assert!(parse_override("=3").is_err());
        let cfg = RunConfig::resolve("x", SCHEMA, &[pairs("lr = fast\nflag = maybe")]).unwrap();
        assert!(cfg.parse::<f64>("lr").is_err());
        assert!(cfg.bool("flag").is_err());
        assert!(cfg.str("nope").is_err());
    }

    #[test]
    fn seed_lists() {
        assert_eq!(parse_seed_list("1..5").unwrap(), vec![1, 2, 3, 4, 5]);
        assert_eq!(parse_seed_list("7").unwrap(), vec![7]);
        assert_eq!(parse_seed_list("2, 9,4").unwrap(), vec![2, 9, 4]);
        for bad in ["5..1", "", "a..b", "1,1", "1..x"] {
            assert!(parse_seed_list(bad).is_err(), "{bad}");
        }
    }
}

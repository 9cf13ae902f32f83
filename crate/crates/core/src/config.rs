//! Sectioned key-value model config files.
//!
//! The exact grammar ships in `docs/config_format.md`. Short form:
//!
//! ```text
//! [model]
//! name = disc_skate
//! coordinates = x1, x2, phi
//! periodic = true, true, true
//! unconstrained = false          # optional, defaults to false
//!
//! [metric]
//! g = m, 0, 0, \
//!     0, m, 0, \
//!     0, 0, m*r^2/2
//!
//! [potential]
//! U = c1*(1-cos(x1)) + c2*(1-cos(x2)) + cphi*(1-cos(phi))
//!
//! [constraints]
//! zeta = sin(phi), -cos(phi), 0
//!
//! [params]
//! m = 1
//! r = 1.4142135623730951
//! ```
//!
//! `#` starts a comment, a trailing `\` continues the line, repeated `zeta`
//! keys append constraint rows. Expressions never contain commas (all
//! functions are single-argument), so comma-splitting of lists is safe.

use crate::{Error, Result};
use std::collections::BTreeMap;

#[derive(Debug, Default, Clone)]
pub struct RawConfig {
    pub name: String,
    pub coordinates: Vec<String>,
    pub periodic: Vec<bool>,
    pub unconstrained: bool,
    pub metric_entries: Vec<String>,
    pub potential: String,
    pub zeta_rows: Vec<Vec<String>>,
    /// Ordered name -> value map; order is the declaration order.
    pub params: Vec<(String, f64)>,
}

impl RawConfig {
    pub fn param_map(&self) -> BTreeMap<String, f64> {
        self.params.iter().cloned().collect()
    }
}

fn cfg_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Config {
        line: Some(line),
        msg: msg.into(),
    }
}

fn split_list(v: &str) -> Vec<String> {
    v.split(',').map(|s| s.trim().to_string()).collect()
}

fn parse_bool(line: usize, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(cfg_err(line, format!("expected true/false, got `{other}`"))),
    }
}

/// Parse the sectioned key-value text into a raw config. Structural
/// validation (dimensions, expression syntax) happens in
/// [`crate::mechsys::MechSystem::from_config`].
pub fn parse(text: &str) -> Result<RawConfig> {
    let mut cfg = RawConfig::default();
    let mut section = String::new();
    let mut seen_potential = false;
    let mut seen_metric = false;

    // join continuation lines, remembering original line numbers
    let mut logical: Vec<(usize, String)> = Vec::new();
    let mut pending: Option<(usize, String)> = None;
    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let uncommented = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        };
        let mut piece = uncommented.trim_end().to_string();
        let continues = piece.ends_with('\\');
        if continues {
            piece.pop();
        }
        match pending.take() {
            Some((start, mut acc)) => {
                acc.push_str(piece.trim_start());
                if continues {
                    pending = Some((start, acc));
                } else {
                    logical.push((start, acc));
                }
            }
            None => {
                if continues {
                    pending = Some((lineno, piece));
                } else {
                    logical.push((lineno, piece));
                }
            }
        }
    }
    if let Some((start, acc)) = pending {
        logical.push((start, acc));
    }

    for (lineno, line) in logical {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            section = name.trim().to_lowercase();
            if !matches!(
                section.as_str(),
                "model" | "metric" | "potential" | "constraints" | "params"
            ) {
                return Err(cfg_err(lineno, format!("unknown section `[{section}]`")));
            }
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(cfg_err(lineno, format!("expected `key = value`, got `{line}`")));
        };
        let key = key.trim();
        let value = value.trim();
        match (section.as_str(), key) {
            ("model", "name") => cfg.name = value.to_string(),
            ("model", "coordinates") => cfg.coordinates = split_list(value),
            ("model", "periodic") => {
                cfg.periodic = split_list(value)
                    .iter()
                    .map(|s| parse_bool(lineno, s))
                    .collect::<Result<_>>()?
            }
            ("model", "unconstrained") => cfg.unconstrained = parse_bool(lineno, value)?,
            ("metric", "g") => {
                seen_metric = true;
                cfg.metric_entries = split_list(value);
            }
            ("potential", "U") => {
                seen_potential = true;
                cfg.potential = value.to_string();
            }
            ("constraints", "zeta") => cfg.zeta_rows.push(split_list(value)),
            ("params", name) => {
                let v: f64 = value
                    .parse()
                    .map_err(|_| cfg_err(lineno, format!("invalid number `{value}`")))?;
                cfg.params.push((name.to_string(), v));
            }
            (sec, key) => {
                return Err(cfg_err(
                    lineno,
                    format!("unexpected key `{key}` in section `[{sec}]`"),
                ));
            }
        }
    }

    if cfg.coordinates.is_empty() {
        return Err(Error::Config {
            line: None,
            msg: "missing [model] coordinates".into(),
        });
    }
    if !seen_metric {
        return Err(Error::Config {
            line: None,
            msg: "missing [metric] g".into(),
        });
    }
    if !seen_potential {
        return Err(Error::Config {
            line: None,
            msg: "missing [potential] U".into(),
        });
    }
    if cfg.periodic.is_empty() {
        cfg.periodic = vec![false; cfg.coordinates.len()];
    }
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "
[model]
name = toy
coordinates = x, y
periodic = false, true

[metric]
g = 1, 0, \\
    0, 1

[potential]
U = x^2 + 1 - cos(y)   # quadratic well

[constraints]
zeta = 1, 0
";

    #[test]
    fn parses_minimal_config() {
        let cfg = parse(MINIMAL).unwrap();
        assert_eq!(cfg.name, "toy");
        assert_eq!(cfg.coordinates, vec!["x", "y"]);
        assert_eq!(cfg.periodic, vec![false, true]);
        assert_eq!(cfg.metric_entries.len(), 4);
        assert_eq!(cfg.zeta_rows.len(), 1);
        assert_eq!(cfg.potential, "x^2 + 1 - cos(y)");
    }

    #[test]
    fn rejects_unknown_section() {
        assert!(parse("[bogus]\nx = 1").is_err());
    }

    #[test]
    fn rejects_bad_number() {
        let text = "[model]\ncoordinates = x\n[metric]\ng = 1\n[potential]\nU = x\n[params]\nm = zzz";
        assert!(matches!(parse(text), Err(Error::Config { .. })));
    }
}

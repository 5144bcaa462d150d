//! Flat key-value experiment configs.
//!
//! The on-disk format is one `key = value` pair per line with `#` comments
//! and dotted section names (`train.learning_rate = 0.03`). It is diffable,
//! greppable and trivially parseable from any language. Unknown keys are
//! errors, with the offending key and line reported.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { key: String, line: usize },
    #[error("line {line}: duplicate key `{key}`")]
    DuplicateKey { key: String, line: usize },
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Malformed { text: String, line: usize },
    #[error("key `{key}`: expected {expected}, got `{value}`")]
    TypeMismatch { key: String, expected: &'static str, value: String },
    #[error("missing required key `{0}`")]
    Missing(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Parsed key-value pairs with line numbers, insertion order preserved for
/// canonical re-emission.
#[derive(Debug, Clone, Default)]
pub struct FlatConfig {
    map: BTreeMap<String, (String, usize)>,
}

impl FlatConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut map = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let stripped = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            };
            let trimmed = stripped.trim();
            if trimmed.is_empty() {
                continue;
            }
            let (key, value) = trimmed
                .split_once('=')
                .ok_or_else(|| ConfigError::Malformed { text: trimmed.to_string(), line })?;
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if key.is_empty() {
                return Err(ConfigError::Malformed { text: trimmed.to_string(), line });
            }
            if map.contains_key(&key) {
                return Err(ConfigError::DuplicateKey { key, line });
            }
            map.insert(key, (value, line));
        }
        Ok(FlatConfig { map })
    }

    pub fn from_pairs(pairs: &[(&str, String)]) -> Self {
        let mut map = BTreeMap::new();
        for (i, (k, v)) in pairs.iter().enumerate() {
            map.insert(k.to_string(), (v.clone(), i + 1));
        }
        FlatConfig { map }
    }

    /// Apply `key=value` override strings (CLI `--set`).
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<(), ConfigError> {
        for (i, o) in overrides.iter().enumerate() {
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| ConfigError::Malformed { text: o.clone(), line: i + 1 })?;
            self.map.insert(key.trim().to_string(), (value.trim().to_string(), 0));
        }
        Ok(())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(|s| s.as_str())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(|(v, _)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str, ConfigError> {
        self.get(key).ok_or_else(|| ConfigError::Missing(key.to_string()))
    }

    pub fn get_or<'a>(&'a self, key: &str, default: &'a str) -> &'a str {
        self.get(key).unwrap_or(default)
    }

    pub fn parse_f64(&self, key: &str, default: f64) -> Result<f64, ConfigError> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| ConfigError::TypeMismatch {
                key: key.to_string(),
                expected: "a real number",
                value: v.to_string(),
            }),
        }
    }

    pub fn parse_usize(&self, key: &str, default: usize) -> Result<usize, ConfigError> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| ConfigError::TypeMismatch {
                key: key.to_string(),
                expected: "a non-negative integer",
                value: v.to_string(),
            }),
        }
    }

    pub fn parse_u64(&self, key: &str, default: u64) -> Result<u64, ConfigError> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| ConfigError::TypeMismatch {
                key: key.to_string(),
                expected: "a non-negative integer",
                value: v.to_string(),
            }),
        }
    }

    pub fn parse_bool(&self, key: &str, default: bool) -> Result<bool, ConfigError> {
        match self.get(key) {
            None => Ok(default),
            Some("true") | Some("1") => Ok(true),
            Some("false") | Some("0") => Ok(false),
            Some(v) => Err(ConfigError::TypeMismatch {
                key: key.to_string(),
                expected: "true or false",
                value: v.to_string(),
            }),
        }
    }

    /// Comma-separated usize list; empty string means empty list.
    pub fn parse_usize_list(&self, key: &str) -> Result<Vec<usize>, ConfigError> {
        match self.get(key) {
            None => Ok(Vec::new()),
            Some(v) if v.trim().is_empty() => Ok(Vec::new()),
            Some(v) => v
                .split(',')
                .map(|s| {
                    s.trim().parse().map_err(|_| ConfigError::TypeMismatch {
                        key: key.to_string(),
                        expected: "a comma-separated integer list",
                        value: v.to_string(),
                    })
                })
                .collect(),
        }
    }

    /// `lo:hi:count` log-grid specification.
    pub fn parse_grid(&self, key: &str, default: (f64, f64, usize)) -> Result<(f64, f64, usize), ConfigError> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => {
                let parts: Vec<&str> = v.split(':').collect();
                let bad = || ConfigError::TypeMismatch {
                    key: key.to_string(),
                    expected: "lo:hi:count",
                    value: v.to_string(),
                };
                if parts.len() != 3 {
                    return Err(bad());
                }
                let lo: f64 = parts[0].trim().parse().map_err(|_| bad())?;
                let hi: f64 = parts[1].trim().parse().map_err(|_| bad())?;
                let n: usize = parts[2].trim().parse().map_err(|_| bad())?;
                Ok((lo, hi, n))
            }
        }
    }

    /// Reject any key not in `known` (checked verbatim).
    pub fn check_known_keys(&self, known: &[&str]) -> Result<(), ConfigError> {
        for (key, (_, line)) in &self.map {
            if !known.contains(&key.as_str()) {
                return Err(ConfigError::UnknownKey { key: key.clone(), line: *line });
            }
        }
        Ok(())
    }

    /// Canonical text form: sorted keys, `key = value` lines, LF endings.
    pub fn canonical_text(&self) -> String {
        let mut out = String::new();
        for (k, (v, _)) in &self.map {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// FNV-1a over the canonical text; stable across runs and platforms.
    pub fn hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.canonical_text().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_blanks_and_dotted_keys() {
        let text = "# experiment\n\nseed = 42\ntrain.learning_rate = 0.03  # small\n";
        let cfg = FlatConfig::parse(text).unwrap();
        assert_eq!(cfg.get("seed"), Some("42"));
        assert_eq!(cfg.parse_f64("train.learning_rate", 0.0).unwrap(), 0.03);
        assert_eq!(cfg.parse_usize("missing", 7).unwrap(), 7);
    }

    #[test]
    fn malformed_and_duplicate_lines_are_rejected() {
        assert!(matches!(
            FlatConfig::parse("just some text\n"),
            Err(ConfigError::Malformed { line: 1, .. })
        ));
        match FlatConfig::parse("a = 1\na = 2\n") {
            Err(ConfigError::DuplicateKey { key, line: 2 }) => assert_eq!(key, "a"),
            other => panic!("expected DuplicateKey, got {other:?}"),
        }
    }

    #[test]
    fn unknown_keys_are_named_with_their_line() {
        let cfg = FlatConfig::parse("seed = 1\nnet.depht = 4\n").unwrap();
        match cfg.check_known_keys(&["seed", "net.depth"]) {
            Err(ConfigError::UnknownKey { key, line }) => {
                assert_eq!(key, "net.depht");
                assert_eq!(line, 2);
            }
            other => panic!("expected UnknownKey, got {other:?}"),
        }
    }

    #[test]
    fn type_mismatches_name_the_key() {
        let cfg = FlatConfig::parse("train.epochs = soon\n").unwrap();
        match cfg.parse_usize("train.epochs", 1) {
            Err(ConfigError::TypeMismatch { key, .. }) => assert_eq!(key, "train.epochs"),
            other => panic!("expected TypeMismatch, got {other:?}"),
        }
    }

    #[test]
    fn canonical_text_is_sorted_and_hash_is_stable() {
        let a = FlatConfig::parse("b = 2\na = 1\n").unwrap();
        let b = FlatConfig::parse("a = 1\nb = 2\n").unwrap();
        assert_eq!(a.canonical_text(), "a = 1\nb = 2\n");
        assert_eq!(a.hash(), b.hash());
    }

    #[test]
    fn overrides_replace_values() {
        let mut cfg = FlatConfig::parse("seed = 1\n").unwrap();
        cfg.apply_overrides(&["seed=9".to_string(), "extra.key=x".to_string()]).unwrap();
        assert_eq!(cfg.get("seed"), Some("9"));
        assert_eq!(cfg.get("extra.key"), Some("x"));
    }

    #[test]
    fn grid_specs_parse() {
        let cfg = FlatConfig::parse("g = 0.01:5:12\n").unwrap();
        assert_eq!(cfg.parse_grid("g", (0.0, 1.0, 2)).unwrap(), (0.01, 5.0, 12));
        assert_eq!(cfg.parse_grid("missing", (0.1, 1.0, 3)).unwrap(), (0.1, 1.0, 3));
    }
}

//! `key = value` config files merged under command-line flags.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::Failure;

/// Keys a config file may set. Dashes and underscores are interchangeable.
pub const KNOWN_KEYS: &[&str] = &[
    "variant",
    "width-scale",
    "data",
    "epochs",
    "batch-size",
    "lr",
    "seed",
    "input-mode",
    "checkpoint-every",
    "val-fraction",
    "out",
    "mode",
    "sharpen",
    "orient-avg",
    "range",
];

pub const SEED_ENV: &str = "ERASENET_SEED";

#[derive(Clone, Debug, Default)]
pub struct ConfigFile {
    values: BTreeMap<String, String>,
}

fn normalize(key: &str) -> String {
    key.trim().replace('_', "-")
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self, Failure> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Failure::input(format!("config line {}: expected `key = value`", i + 1)));
            };
            let key = normalize(k);
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(Failure::input(format!("config line {}: unknown key `{key}`", i + 1)));
            }
            values.insert(key, v.trim().to_string());
        }
        Ok(Self { values })
    }

    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn get<T>(&self, key: &str) -> Result<Option<T>, Failure>
    where
        T: FromStr,
        T::Err: Display,
    {
        self.values
            .get(key)
            .map(|v| {
                v.parse()
                    .map_err(|e| Failure::input(format!("config `{key} = {v}`: {e}")))
            })
            .transpose()
    }

    /// Flag, then file, then default.
    pub fn pick<T>(&self, key: &str, flag: Option<T>, default: T) -> Result<T, Failure>
    where
        T: FromStr,
        T::Err: Display,
    {
        Ok(match flag {
            Some(v) => v,
            None => self.get(key)?.unwrap_or(default),
        })
    }

    /// Flag, then file, with no default.
    pub fn opt<T>(&self, key: &str, flag: Option<T>) -> Result<Option<T>, Failure>
    where
        T: FromStr,
        T::Err: Display,
    {
        match flag {
            Some(v) => Ok(Some(v)),
            None => self.get(key),
        }
    }

    /// Boolean switches: a set flag wins, otherwise the file decides.
    pub fn switch(&self, key: &str, flag: bool) -> Result<bool, Failure> {
        Ok(flag || self.get(key)?.unwrap_or(false))
    }

    /// `--seed`, then `ERASENET_SEED`, then the file, then 0.
    pub fn seed(&self, flag: Option<u64>, env: Option<&str>) -> Result<u64, Failure> {
        if let Some(s) = flag {
            return Ok(s);
        }
        if let Some(v) = env {
            return v
                .trim()
                .parse()
                .map_err(|e| Failure::input(format!("{SEED_ENV}={v}: {e}")));
        }
        Ok(self.get("seed")?.unwrap_or(0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_underscores() {
        let c = ConfigFile::parse("# run\nepochs = 3  # short\nbatch_size=2\n\n").unwrap();
        assert_eq!(c.get::<usize>("epochs").unwrap(), Some(3));
        assert_eq!(c.get::<usize>("batch-size").unwrap(), Some(2));
        assert_eq!(c.get::<f64>("lr").unwrap(), None);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_lines() {
        assert_eq!(ConfigFile::parse("colour = red").unwrap_err().code, 1);
        assert_eq!(ConfigFile::parse("epochs 3").unwrap_err().code, 1);
        let c = ConfigFile::parse("epochs = many").unwrap();
        assert!(c.get::<usize>("epochs").is_err());
    }

    #[test]
    fn precedence() {
        let c = ConfigFile::parse("epochs = 3\nseed = 5").unwrap();
        assert_eq!(c.pick("epochs", Some(9), 1).unwrap(), 9);
        assert_eq!(c.pick("epochs", None, 1).unwrap(), 3);
        assert_eq!(c.pick("batch-size", None, 8).unwrap(), 8);
        assert_eq!(c.seed(Some(1), Some("2")).unwrap(), 1);
        assert_eq!(c.seed(None, Some("2")).unwrap(), 2);
        assert_eq!(c.seed(None, None).unwrap(), 5);
        assert_eq!(ConfigFile::default().seed(None, None).unwrap(), 0);
        assert!(c.seed(None, Some("x")).is_err());
    }
}

//! `key = value` settings files and the error type shared by all commands.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use clap::ValueEnum;

#[derive(Debug)]
pub enum CliError {
    /// Bad settings or arguments. Exit code 2.
    Config(String),
    /// Anything that went wrong while doing the work. Exit code 1.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<acfg::Error> for CliError {
    fn from(e: acfg::Error) -> Self {
        if e.is_config() {
            CliError::Config(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub const KNOWN_KEYS: &[&str] = &[
    "task",
    "model",
    "tcp",
    "command",
    "timeout_ms",
    "gen_len",
    "steps",
    "mode",
    "w",
    "rho",
    "metric",
    "scope",
    "sampler",
    "temperature",
    "seed",
    "jobs",
    "train_size",
    "eval_size",
    "data_seed",
    "masking_samples",
    "radius",
    "alpha",
    "prompt",
    "out",
    "out_dir",
    "timing",
    "svg",
    "grid_default",
    "rhos",
    "ws",
];

/// Settings read from `--config`. Dashes in keys are accepted as
/// underscores; `#` starts a comment.
#[derive(Default)]
pub struct ConfigFile {
    values: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut values = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected key = value", n + 1)))?;
            let key = key.trim().replace('-', "_");
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(CliError::Config(format!("line {}: unknown key {key:?}", n + 1)));
            }
            values.insert(key, value.trim().to_string());
        }
        Ok(Self { values })
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: fmt::Display,
    {
        debug_assert!(KNOWN_KEYS.contains(&key));
        self.values
            .get(key)
            .map(|v| {
                v.parse()
                    .map_err(|e| CliError::Config(format!("bad value {v:?} for {key}: {e}")))
            })
            .transpose()
    }

    /// Comma-separated list.
    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>, CliError>
    where
        T::Err: fmt::Display,
    {
        self.values
            .get(key)
            .map(|v| {
                v.split(',')
                    .map(|item| {
                        item.trim()
                            .parse()
                            .map_err(|e| CliError::Config(format!("bad entry {item:?} in {key}: {e}")))
                    })
                    .collect()
            })
            .transpose()
    }

    pub fn get_enum<T: ValueEnum>(&self, key: &str) -> Result<Option<T>, CliError> {
        self.values
            .get(key)
            .map(|v| T::from_str(v, true).map_err(|e| CliError::Config(format!("bad value for {key}: {e}"))))
            .transpose()
    }
}

/// Flag, then settings file, then fallback.
pub fn pick<T: FromStr>(flag: Option<T>, file: &ConfigFile, key: &str) -> Result<Option<T>, CliError>
where
    T::Err: fmt::Display,
{
    match flag {
        Some(v) => Ok(Some(v)),
        None => file.get(key),
    }
}

pub fn pick_enum<T: ValueEnum>(flag: Option<T>, file: &ConfigFile, key: &str) -> Result<Option<T>, CliError> {
    match flag {
        Some(v) => Ok(Some(v)),
        None => file.get_enum(key),
    }
}

/// A switch is on when given as a flag or set to `true` in the file.
pub fn pick_switch(flag: bool, file: &ConfigFile, key: &str) -> Result<bool, CliError> {
    Ok(flag || file.get::<bool>(key)?.unwrap_or(false))
}

/// Seed precedence: flag, settings file, `ACFG_SEED`, then 0.
pub fn resolve_seed(flag: Option<u64>, file: &ConfigFile) -> Result<u64, CliError> {
    if let Some(s) = pick(flag, file, "seed")? {
        return Ok(s);
    }
    match std::env::var("ACFG_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|e| CliError::Config(format!("bad ACFG_SEED {v:?}: {e}"))),
        Err(_) => Ok(0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_dashes() {
        let f = ConfigFile::parse("# hi\nrho = 0.3\ngen-len=4 # trailing\n\n").unwrap();
        assert_eq!(f.get::<f64>("rho").unwrap(), Some(0.3));
        assert_eq!(f.get::<usize>("gen_len").unwrap(), Some(4));
        assert_eq!(f.get::<u64>("seed").unwrap(), None);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_lines() {
        assert!(matches!(ConfigFile::parse("colour = red"), Err(CliError::Config(_))));
        assert!(matches!(ConfigFile::parse("rho"), Err(CliError::Config(_))));
        let f = ConfigFile::parse("rho = lots").unwrap();
        assert!(matches!(f.get::<f64>("rho"), Err(CliError::Config(_))));
        let f = ConfigFile::parse("rhos = 0.1, x").unwrap();
        assert!(matches!(f.get_list::<f64>("rhos"), Err(CliError::Config(_))));
    }

    #[test]
    fn lists_and_switches() {
        let f = ConfigFile::parse("ws = 0, 1.5\nsvg = true").unwrap();
        assert_eq!(f.get_list::<f64>("ws").unwrap(), Some(vec![0.0, 1.5]));
        assert!(pick_switch(false, &f, "svg").unwrap());
        assert!(!pick_switch(false, &f, "timing").unwrap());
    }

    #[test]
    fn flag_wins_over_file() {
        let f = ConfigFile::parse("w = 2").unwrap();
        assert_eq!(pick(Some(1.0), &f, "w").unwrap(), Some(1.0));
        assert_eq!(pick::<f64>(None, &f, "w").unwrap(), Some(2.0));
    }
}

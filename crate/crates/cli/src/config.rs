//! Flat `key = value` scenario configuration.
//!
//! Every key has a default; a config file and then command-line overrides
//! replace them. Keys may be written with `-` or `_`. Sizes accept a binary
//! `K`/`M`/`G`/`T` suffix or a `0x` prefix.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("missing value for `--{0}`")]
    MissingValue(String),
    #[error("unexpected argument `{0}`")]
    Stray(String),
    #[error("bad value `{value}` for `{key}`: {why}")]
    Value { key: String, value: String, why: String },
    #[error("cannot read {path}: {why}")]
    Io { path: String, why: String },
}

/// Key, default, description.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("seed", "0", "base seed; trial i uses seed + i"),
    ("out", "out", "artifact directory"),
    ("trials", "1", "independent seeded instances"),
    ("jobs", "1", "worker threads for trials"),
    ("min_success", "1.0", "share of trials that must verify"),
    ("race_window", "0", "chance the host driver wakes after each GSP message"),
    ("capacity", "48G", "device memory bytes"),
    ("banks", "16", "DRAM banks"),
    ("row_size", "2K", "DRAM row bytes"),
    ("tlb_entries", "512", "GPU TLB entries"),
    ("timing_base", "1", "latency of an access without eviction"),
    ("timing_eviction_penalty", "99", "added latency per eviction"),
    ("timing_jitter", "0", "uniform multiplicative latency jitter"),
    ("region0_distance", "96M", "first PT region offset from the first data frame"),
    ("initial_fill", "352K", "bytes of a context's first region used by upper levels"),
    ("polarity_gating", "true", "flips only occur from the source value"),
    ("fault_profile", "", "bank,row,byte,bit,direction CSV; reference profile when empty"),
    ("site", "", "profile site to exploit: label (A1..F3) or index; first usable when empty"),
    ("victim_fraction", "0.08", "share of 2 MiB blocks pinned by a co-tenant"),
    ("spike_factor", "10", "spike threshold as a multiple of the median latency"),
    ("max_step3_retries", "16", "hammer rounds with a visible flip before giving up"),
    ("max_silent_rounds", "64", "hammer rounds without a visible flip before giving up"),
    ("reshuffle_pages", "1024", "pages recycled per hammer round"),
    ("keep_alive_period", "64", "allocations between re-touches of pinned pages"),
    ("iova_base", "8G", "host IOVA window base"),
    ("verify_frames", "1000", "random frames read through the handle and checked"),
    ("fcn_flush", "0xdead0000dead0000", "flush callback pointer in the forged metadata"),
    ("privesc_attempts", "64", "injection attempts before giving up"),
    ("eq1_capacity", "1G", "device memory for eq1-trace"),
    ("eq1_periods", "10", "region periods traced after the first spike"),
    ("code_image", "", "code image to load; synthesized when empty"),
    ("write_image", "false", "write the code image to code.bin"),
    ("code_pages", "16", "synthetic image pages"),
    ("code_kernels", "96", "synthetic image kernels"),
    ("code_branches", "5436", "synthetic image candidate branches"),
    ("code_used_pages", "4", "pages whose kernels the model launches"),
    ("code_budget", "100", "oracle runs allowed to the search"),
    ("race_candidates", "100", "zeroed candidate pages"),
    ("race_dump_ms", "0.2", "milliseconds to dump one page"),
    ("race_residency_ms", "0.6", "milliseconds the key stays resident"),
    ("race_trials", "100000", "Monte Carlo victim runs"),
    ("race_pool_pages", "320", "pages in the prefilled pool snapshot"),
    ("race_prefill", "0xff", "prefill byte of the attacker's pool"),
    ("fp_references", "", "reference fingerprints JSON; synthesized when empty"),
    ("fp_families", "4", "synthetic model families"),
    ("fp_variants", "3", "fine-tuned variants per family"),
    ("fp_layers", "24", "layers per model"),
    ("fp_weights", "4096", "weights per layer"),
    ("fp_perturbation", "0.001", "relative noise of a variant"),
];

fn normalize(key: &str) -> String {
    key.trim().replace('-', "_")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            values: KEYS.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl Config {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let k = normalize(key);
        match self.values.get_mut(&k) {
            Some(v) => {
                *v = value.trim().to_string();
                Ok(())
            }
            None => Err(ConfigError::UnknownKey(key.trim().to_string())),
        }
    }

    /// Applies `key = value` lines; blank lines and `#` comments are skipped.
    pub fn merge_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            })?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            why: e.to_string(),
        })?;
        self.merge_text(&text)
    }

    /// Applies `--key value` pairs. `--race-window` may omit its value.
    pub fn merge_args(&mut self, args: &[String]) -> Result<(), ConfigError> {
        let mut it = args.iter().peekable();
        while let Some(a) = it.next() {
            let Some(flag) = a.strip_prefix("--") else {
                return Err(ConfigError::Stray(a.clone()));
            };
            if let Some((k, v)) = flag.split_once('=') {
                self.set(k, v)?;
                continue;
            }
            let value = match it.peek() {
                Some(v) if !v.starts_with("--") => it.next().cloned(),
                _ => None,
            };
            match value {
                Some(v) => self.set(flag, &v)?,
                None if normalize(flag) == "race_window" => self.set(flag, DEFAULT_RACE_WINDOW)?,
                None => {
                    if !self.values.contains_key(&normalize(flag)) {
                        return Err(ConfigError::UnknownKey(flag.to_string()));
                    }
                    return Err(ConfigError::MissingValue(flag.to_string()));
                }
            }
        }
        Ok(())
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("undeclared key {key}"))
    }

    pub fn entries(&self) -> &BTreeMap<String, String> {
        &self.values
    }

    /// Entries that can influence results; `out` and `jobs` are left out so
    /// reports compare equal across output directories and thread counts.
    pub fn echo(&self) -> BTreeMap<&str, &str> {
        self.values
            .iter()
            .filter(|(k, _)| !matches!(k.as_str(), "out" | "jobs"))
            .map(|(k, v)| (k.as_str(), v.as_str()))
            .collect()
    }

    fn bad(&self, key: &str, why: impl ToString) -> ConfigError {
        ConfigError::Value {
            key: key.to_string(),
            value: self.raw(key).to_string(),
            why: why.to_string(),
        }
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        self.raw(key).parse().map_err(|e: T::Err| self.bad(key, e))
    }

    pub fn size(&self, key: &str) -> Result<u64, ConfigError> {
        parse_size(self.raw(key)).map_err(|e| self.bad(key, e))
    }

    pub fn path(&self, key: &str) -> Option<&str> {
        Some(self.raw(key)).filter(|s| !s.is_empty())
    }

    pub fn fraction(&self, key: &str) -> Result<f64, ConfigError> {
        let v: f64 = self.get(key)?;
        if !(0.0..=1.0).contains(&v) {
            return Err(self.bad(key, "must lie in [0, 1]"));
        }
        Ok(v)
    }

    pub fn positive<T: FromStr + PartialOrd + Default>(&self, key: &str) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        let v: T = self.get(key)?;
        if v <= T::default() {
            return Err(self.bad(key, "must be positive"));
        }
        Ok(v)
    }
}

pub const DEFAULT_RACE_WINDOW: &str = "0.05";

pub fn parse_size(s: &str) -> Result<u64, String> {
    let s = s.trim();
    if let Some(hex) = s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        return u64::from_str_radix(&hex.replace('_', ""), 16).map_err(|e| e.to_string());
    }
    let (num, shift) = match s.chars().last().map(|c| c.to_ascii_uppercase()) {
        Some('K') => (&s[..s.len() - 1], 10),
        Some('M') => (&s[..s.len() - 1], 20),
        Some('G') => (&s[..s.len() - 1], 30),
        Some('T') => (&s[..s.len() - 1], 40),
        _ => (s, 0),
    };
    let n: u64 = num.trim().replace('_', "").parse().map_err(|e: std::num::ParseIntError| e.to_string())?;
    n.checked_mul(1 << shift).ok_or_else(|| "size overflows 64 bits".to_string())
}

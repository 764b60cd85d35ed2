//! Flat typed key-value config files.
//!
//! Syntax: one `key = value` per line, `#` comments, blank lines, and
//! `include <relative-path>` directives. Includes are merged first, so the
//! including file's own keys win. Every key must be consumed by a typed
//! getter before [`Config::finish`]; leftovers are reported as unknown keys
//! rather than silently ignored.

use super::IoError;
use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone)]
pub struct Config {
    path: PathBuf,
    entries: BTreeMap<String, String>,
    used: BTreeSet<String>,
}

fn read_to_string(path: &Path) -> Result<String, IoError> {
    std::fs::read_to_string(path).map_err(|source| IoError::Read { path: path.to_path_buf(), source })
}

fn valid_key(key: &str) -> bool {
    !key.is_empty()
        && key
            .chars()
            .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '.' || c == '_')
}

fn merge_file(
    path: &Path,
    entries: &mut BTreeMap<String, String>,
    visiting: &mut Vec<PathBuf>,
) -> Result<(), IoError> {
    let canon = path
        .canonicalize()
        .map_err(|source| IoError::Read { path: path.to_path_buf(), source })?;
    if visiting.contains(&canon) {
        return Err(IoError::IncludeCycle { path: canon });
    }
    visiting.push(canon);
    let text = read_to_string(path)?;
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    // Two passes: includes first so local keys override included ones
    // regardless of where the directive sits in the file.
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if let Some(rest) = line.strip_prefix("include ") {
            let target = rest.trim();
            if target.is_empty() {
                return Err(IoError::Parse {
                    path: path.to_path_buf(),
                    line: idx + 1,
                    reason: "include with no path".into(),
                });
            }
            merge_file(&dir.join(target), entries, visiting)?;
        }
    }
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with("include ") {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| IoError::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            reason: format!("expected 'key = value', got '{line}'"),
        })?;
        let key = key.trim();
        if !valid_key(key) {
            return Err(IoError::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                reason: format!("bad key '{key}'"),
            });
        }
        entries.insert(key.to_string(), value.trim().to_string());
    }
    visiting.pop();
    Ok(())
}

impl Config {
    pub fn load(path: impl AsRef<Path>) -> Result<Config, IoError> {
        let path = path.as_ref().to_path_buf();
        let mut entries = BTreeMap::new();
        merge_file(&path, &mut entries, &mut Vec::new())?;
        Ok(Config { path, entries, used: BTreeSet::new() })
    }

    /// Build directly from text (tests and defaults).
    pub fn from_text(text: &str) -> Result<Config, IoError> {
        let path = PathBuf::from("<inline>");
        let mut entries = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| IoError::Parse {
                path: path.clone(),
                line: idx + 1,
                reason: format!("expected 'key = value', got '{line}'"),
            })?;
            entries.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(Config { path, entries, used: BTreeSet::new() })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Canonical snapshot of the merged document: sorted `key = value`
    /// lines. Stored in checkpoints and compared on resume.
    pub fn canonical(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    fn raw(&mut self, key: &str) -> Option<&str> {
        if self.entries.contains_key(key) {
            self.used.insert(key.to_string());
            self.entries.get(key).map(|s| s.as_str())
        } else {
            None
        }
    }

    fn parse_as<T: std::str::FromStr>(key: &str, value: &str, want: &str) -> Result<T, IoError> {
        value.parse().map_err(|_| IoError::BadValue {
            key: key.to_string(),
            value: value.to_string(),
            want: want.to_string(),
        })
    }

    pub fn str_or(&mut self, key: &str, default: &str) -> String {
        self.raw(key).map(str::to_string).unwrap_or_else(|| default.to_string())
    }

    pub fn str_opt(&mut self, key: &str) -> Option<String> {
        self.raw(key).map(str::to_string)
    }

    pub fn str_req(&mut self, key: &str) -> Result<String, IoError> {
        self.raw(key).map(str::to_string).ok_or_else(|| IoError::MissingKey { key: key.into() })
    }

    pub fn u64_or(&mut self, key: &str, default: u64) -> Result<u64, IoError> {
        match self.raw(key) {
            Some(v) => Self::parse_as(key, &v.to_string(), "an unsigned integer"),
            None => Ok(default),
        }
    }

    pub fn usize_or(&mut self, key: &str, default: usize) -> Result<usize, IoError> {
        Ok(self.u64_or(key, default as u64)? as usize)
    }

    pub fn f64_or(&mut self, key: &str, default: f64) -> Result<f64, IoError> {
        match self.raw(key) {
            Some(v) => Self::parse_as(key, &v.to_string(), "a number"),
            None => Ok(default),
        }
    }

    pub fn bool_or(&mut self, key: &str, default: bool) -> Result<bool, IoError> {
        match self.raw(key) {
            Some("true") => Ok(true),
            Some("false") => Ok(false),
            Some(v) => Err(IoError::BadValue {
                key: key.into(),
                value: v.into(),
                want: "true or false".into(),
            }),
            None => Ok(default),
        }
    }

    fn split_numbers<T: std::str::FromStr>(key: &str, value: &str, want: &str) -> Result<Vec<T>, IoError> {
        value
            .split_whitespace()
            .map(|tok| Self::parse_as(key, tok, want))
            .collect()
    }

    /// Space-separated triple, e.g. `crop.global = 64 64 16`.
    pub fn usize3_or(&mut self, key: &str, default: [usize; 3]) -> Result<[usize; 3], IoError> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => {
                let v = v.to_string();
                let nums: Vec<usize> = Self::split_numbers(key, &v, "three unsigned integers")?;
                nums.try_into().map_err(|_| IoError::BadValue {
                    key: key.into(),
                    value: v,
                    want: "three unsigned integers".into(),
                })
            }
        }
    }

    pub fn f64x3_or(&mut self, key: &str, default: [f64; 3]) -> Result<[f64; 3], IoError> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => {
                let v = v.to_string();
                let nums: Vec<f64> = Self::split_numbers(key, &v, "three numbers")?;
                nums.try_into().map_err(|_| IoError::BadValue {
                    key: key.into(),
                    value: v,
                    want: "three numbers".into(),
                })
            }
        }
    }

    /// Space-separated pair, e.g. `stage1.mask_ratio = 0.1 0.5`.
    pub fn f64_pair_or(&mut self, key: &str, default: (f64, f64)) -> Result<(f64, f64), IoError> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => {
                let v = v.to_string();
                let nums: Vec<f64> = Self::split_numbers(key, &v, "two numbers")?;
                match nums[..] {
                    [a, b] => Ok((a, b)),
                    _ => Err(IoError::BadValue {
                        key: key.into(),
                        value: v,
                        want: "two numbers".into(),
                    }),
                }
            }
        }
    }

    pub fn usize_list_or(&mut self, key: &str, default: &[usize]) -> Result<Vec<usize>, IoError> {
        match self.raw(key) {
            None => Ok(default.to_vec()),
            Some(v) => {
                let v = v.to_string();
                Self::split_numbers(key, &v, "unsigned integers")
            }
        }
    }

    /// Reject any key that was never consumed. Call after all getters.
    pub fn finish(self) -> Result<(), IoError> {
        self.finish_where(|_| false)
    }

    /// Like [`Config::finish`] but excuses unconsumed keys accepted by the
    /// predicate (e.g. sections belonging to other commands of a shared
    /// config file).
    pub fn finish_where(self, excuse: impl Fn(&str) -> bool) -> Result<(), IoError> {
        let leftover: Vec<String> = self
            .entries
            .keys()
            .filter(|k| !self.used.contains(*k) && !excuse(k))
            .cloned()
            .collect();
        if leftover.is_empty() {
            Ok(())
        } else {
            Err(IoError::UnknownKeys { path: self.path, keys: leftover })
        }
    }
}

//! The `key = value` config-file format shared by every configurable
//! component, plus the FNV-1a hash used to stamp artifacts with the config
//! that produced them.
//!
//! Format: one `key = value` pair per line; blank lines and lines starting
//! with `#` are ignored. Keys may be dotted (`train.learning_rate`) to
//! namespace sub-configs. Duplicate keys are an error, as are keys the
//! consumer does not recognize.

use std::collections::BTreeMap;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum KvError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Malformed { line: usize, text: String },
    #[error("line {line}: duplicate key {key:?}")]
    DuplicateKey { line: usize, key: String },
    #[error("key {key:?}: cannot parse {value:?} as {expected}")]
    BadValue {
        key: String,
        value: String,
        expected: &'static str,
    },
    #[error("missing required key {0:?}")]
    MissingKey(String),
    #[error("unknown keys: {0}")]
    UnknownKeys(String),
}

/// Parsed key-value pairs with typed, consume-on-read accessors. After all
/// known keys are taken, [`KvMap::finish`] rejects leftovers.
#[derive(Debug, Clone, Default)]
pub struct KvMap {
    entries: BTreeMap<String, String>,
}

impl KvMap {
    pub fn parse(text: &str) -> Result<Self, KvError> {
        let mut entries = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let Some((key, value)) = trimmed.split_once('=') else {
                return Err(KvError::Malformed {
                    line,
                    text: trimmed.to_string(),
                });
            };
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if key.is_empty() {
                return Err(KvError::Malformed {
                    line,
                    text: trimmed.to_string(),
                });
            }
            if entries.insert(key.clone(), value).is_some() {
                return Err(KvError::DuplicateKey { line, key });
            }
        }
        Ok(KvMap { entries })
    }

    /// Splits off every key under `prefix.`, stripping the prefix.
    pub fn take_prefixed(&mut self, prefix: &str) -> KvMap {
        let full = format!("{prefix}.");
        let keys: Vec<String> = self
            .entries
            .keys()
            .filter(|k| k.starts_with(&full))
            .cloned()
            .collect();
        let mut sub = BTreeMap::new();
        for k in keys {
            let v = self.entries.remove(&k).unwrap();
            sub.insert(k[full.len()..].to_string(), v);
        }
        KvMap { entries: sub }
    }

    pub fn take_string(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key)
    }

    pub fn take_f64(&mut self, key: &str) -> Result<Option<f64>, KvError> {
        self.take_parsed(key, "a real number")
    }

    pub fn take_u64(&mut self, key: &str) -> Result<Option<u64>, KvError> {
        self.take_parsed(key, "an unsigned integer")
    }

    pub fn take_usize(&mut self, key: &str) -> Result<Option<usize>, KvError> {
        self.take_parsed(key, "an unsigned integer")
    }

    pub fn take_bool(&mut self, key: &str) -> Result<Option<bool>, KvError> {
        self.take_parsed(key, "true or false")
    }

    fn take_parsed<T: std::str::FromStr>(
        &mut self,
        key: &str,
        expected: &'static str,
    ) -> Result<Option<T>, KvError> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some(v) => v.parse::<T>().map(Some).map_err(|_| KvError::BadValue {
                key: key.to_string(),
                value: v,
                expected,
            }),
        }
    }

    /// Errors if any keys were never consumed; catches typos and stale
    /// config entries.
    pub fn finish(self) -> Result<(), KvError> {
        if self.entries.is_empty() {
            Ok(())
        } else {
            let keys: Vec<&str> = self.entries.keys().map(|s| s.as_str()).collect();
            Err(KvError::UnknownKeys(keys.join(", ")))
        }
    }
}

/// FNV-1a over bytes; the 64-bit hash stamped into artifact headers.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Hash of a canonical config text, as recorded in artifact headers.
pub fn config_hash(canonical_text: &str) -> u64 {
    fnv1a64(canonical_text.as_bytes())
}

/// The comment header line carrying the config hash in text artifacts.
pub fn hash_header(hash: u64) -> String {
    format!("# config-hash: {hash:#018x}")
}

/// Writes an artifact via a `.partial` sibling that is renamed into place
/// only on success, so an interrupted write never leaves a truncated file
/// under the final name.
pub fn atomic_write(path: &std::path::Path, bytes: &[u8]) -> std::io::Result<()> {
    let partial = partial_path(path);
    std::fs::write(&partial, bytes)?;
    std::fs::rename(&partial, path)
}

/// The `.partial` sibling used while an artifact is being produced.
pub fn partial_path(path: &std::path::Path) -> std::path::PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".partial");
    path.with_file_name(name)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_blanks_and_pairs() {
        let mut kv = KvMap::parse("# hello\n\n  a = 1\nb.c = x y\n").unwrap();
        assert_eq!(kv.take_u64("a").unwrap(), Some(1));
        let mut sub = kv.take_prefixed("b");
        assert_eq!(sub.take_string("c").as_deref(), Some("x y"));
        kv.finish().unwrap();
        sub.finish().unwrap();
    }

    #[test]
    fn rejects_duplicates_and_garbage() {
        assert!(matches!(
            KvMap::parse("a = 1\na = 2\n"),
            Err(KvError::DuplicateKey { line: 2, .. })
        ));
        assert!(matches!(
            KvMap::parse("nonsense\n"),
            Err(KvError::Malformed { line: 1, .. })
        ));
    }

    #[test]
    fn unknown_keys_fail_finish() {
        let kv = KvMap::parse("mystery = 1\n").unwrap();
        assert!(matches!(kv.finish(), Err(KvError::UnknownKeys(_))));
    }

    #[test]
    fn fnv_vector() {
        // Standard FNV-1a test vector.
        assert_eq!(fnv1a64(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a64(b"a"), 0xaf63_dc4c_8601_ec8c);
    }
}

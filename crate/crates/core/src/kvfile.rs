//! Line-based `key = value` files. `#` starts a comment; blank lines are
//! ignored.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub line: usize,
    pub key: String,
    pub value: String,
}

pub fn parse(text: &str, path: &Path) -> Result<Vec<Entry>> {
    let mut entries: Vec<Entry> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let Some((key, value)) = content.split_once('=') else {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                reason: format!("expected `key = value`, found `{content}`"),
            });
        };
        let key = key.trim();
        if key.is_empty() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                reason: "empty key".into(),
            });
        }
        if let Some(prev) = entries.iter().find(|e| e.key == key) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                reason: format!("duplicate key `{key}` (first set on line {})", prev.line),
            });
        }
        entries.push(Entry {
            line,
            key: key.to_string(),
            value: value.trim().to_string(),
        });
    }
    Ok(entries)
}

pub fn read(path: &Path) -> Result<Vec<Entry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse(&text, path)
}

/// Typed access to a parsed file, with errors that name the key and line.
pub struct Fields<'a> {
    entries: &'a [Entry],
    path: &'a Path,
}

impl<'a> Fields<'a> {
    pub fn new(entries: &'a [Entry], path: &'a Path) -> Self {
        Self { entries, path }
    }

    pub fn path(&self) -> &'a Path {
        self.path
    }

    pub fn raw(&self, key: &str) -> Option<&'a Entry> {
        self.entries.iter().find(|e| e.key == key)
    }

    pub fn get<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(key) {
            None => Ok(None),
            Some(e) => e.value.parse::<T>().map(Some).map_err(|err| Error::Parse {
                path: self.path.to_path_buf(),
                line: e.line,
                reason: format!("invalid value `{}` for `{key}`: {err}", e.value),
            }),
        }
    }

    pub fn require<T: std::str::FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key)?.ok_or_else(|| Error::Parse {
            path: self.path.to_path_buf(),
            line: 0,
            reason: format!("missing key `{key}`"),
        })
    }

    /// Comma-separated list.
    pub fn list<T: std::str::FromStr>(&self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: std::fmt::Display,
    {
        let Some(e) = self.raw(key) else {
            return Ok(None);
        };
        e.value
            .split(',')
            .map(|item| {
                item.trim().parse::<T>().map_err(|err| Error::Parse {
                    path: self.path.to_path_buf(),
                    line: e.line,
                    reason: format!("invalid list item `{}` for `{key}`: {err}", item.trim()),
                })
            })
            .collect::<Result<Vec<T>>>()
            .map(Some)
    }

    /// Fails on the first key not in `known`.
    pub fn reject_unknown(&self, known: &[&str]) -> Result<()> {
        match self.entries.iter().find(|e| !known.contains(&e.key.as_str())) {
            Some(e) => Err(Error::Parse {
                path: self.path.to_path_buf(),
                line: e.line,
                reason: format!("unknown key `{}`", e.key),
            }),
            None => Ok(()),
        }
    }
}

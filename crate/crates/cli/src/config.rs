//! TOML configuration with command-line overrides.
//!
//! One file holds a table per subcommand (`[annotate]`, `[synth]`, ...) plus
//! top-level `workers` and `seed`. Values resolve as flag > file > default.
//! Relative paths in the file are taken relative to the file's directory.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use toml::{Table, Value};

/// Keys whose string values are filesystem paths.
const PATH_KEYS: &[&str] = &[
    "map",
    "poses",
    "frames",
    "calibration",
    "images",
    "out",
    "scene",
    "gt",
    "pred",
    "report",
    "pr_csv",
    "masks",
    "classes",
    "dataset",
    "ui",
    "log",
];

#[derive(Debug, Clone, Default)]
pub struct ConfigFile {
    pub table: Table,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut table: Table = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        resolve_paths(&mut table, base);
        Ok(ConfigFile { table })
    }

    pub fn workers(&self) -> Result<Option<usize>> {
        match self.table.get("workers") {
            None => Ok(None),
            Some(Value::Integer(n)) if *n > 0 => Ok(Some(*n as usize)),
            Some(v) => bail!("workers must be a positive integer, got {v}"),
        }
    }

    pub fn seed(&self) -> Result<Option<u64>> {
        match self.table.get("seed") {
            None => Ok(None),
            Some(Value::Integer(n)) if *n >= 0 => Ok(Some(*n as u64)),
            Some(v) => bail!("seed must be a non-negative integer, got {v}"),
        }
    }

    /// Deserializes `[name]` after applying `overrides` on top of it.
    pub fn section<T: DeserializeOwned>(&self, name: &str, overrides: Overrides) -> Result<T> {
        let mut table = match self.table.get(name) {
            Some(Value::Table(t)) => t.clone(),
            Some(_) => bail!("config entry [{name}] must be a table"),
            None => Table::new(),
        };
        merge(&mut table, overrides.0);
        Value::Table(table)
            .try_into()
            .with_context(|| format!("invalid [{name}] configuration"))
    }
}

fn resolve_paths(table: &mut Table, base: &Path) {
    for (key, value) in table.iter_mut() {
        match value {
            Value::String(s) if PATH_KEYS.contains(&key.as_str()) => {
                let p = Path::new(s.as_str());
                if p.is_relative() {
                    *s = base.join(p).to_string_lossy().into_owned();
                }
            }
            Value::Table(t) => resolve_paths(t, base),
            _ => {}
        }
    }
}

fn merge(into: &mut Table, from: Table) {
    for (k, v) in from {
        match (into.get_mut(&k), v) {
            (Some(Value::Table(a)), Value::Table(b)) => merge(a, b),
            (_, v) => {
                into.insert(k, v);
            }
        }
    }
}

/// Values given on the command line, keyed by dotted path (`params.vehicle_height`).
#[derive(Debug, Clone, Default)]
pub struct Overrides(Table);

impl Overrides {
    pub fn new() -> Self {
        Overrides::default()
    }

    pub fn set(&mut self, key: &str, value: impl Into<Value>) -> &mut Self {
        let mut parts: Vec<&str> = key.split('.').collect();
        let last = parts.pop().expect("non-empty key");
        let mut t = &mut self.0;
        for p in parts {
            t = match t.entry(p).or_insert_with(|| Value::Table(Table::new())) {
                Value::Table(inner) => inner,
                _ => unreachable!("override keys do not collide"),
            };
        }
        t.insert(last.to_string(), value.into());
        self
    }

    pub fn opt(&mut self, key: &str, value: Option<impl Into<Value>>) -> &mut Self {
        if let Some(v) = value {
            self.set(key, v);
        }
        self
    }

    pub fn path(&mut self, key: &str, value: Option<&PathBuf>) -> &mut Self {
        self.opt(key, value.map(|p| p.to_string_lossy().into_owned()))
    }

    /// Sets `key = true` when the flag was given; absent flags leave the file value.
    pub fn flag(&mut self, key: &str, given: bool, value: bool) -> &mut Self {
        if given {
            self.set(key, value);
        }
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Deserialize, PartialEq)]
    struct Inner {
        #[serde(default = "three")]
        a: i64,
        #[serde(default)]
        b: i64,
    }
    fn three() -> i64 {
        3
    }
    #[derive(Debug, Deserialize, PartialEq)]
    struct Section {
        out: PathBuf,
        inner: Inner,
    }

    #[test]
    fn precedence_is_flag_file_default() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "workers = 2\n[s]\nout = \"o\"\n[s.inner]\nb = 5\n").unwrap();
        let file = ConfigFile::load(&path).unwrap();
        assert_eq!(file.workers().unwrap(), Some(2));
        let s: Section = file.section("s", Overrides::new()).unwrap();
        assert_eq!(
            s,
            Section {
                out: dir.path().join("o"),
                inner: Inner { a: 3, b: 5 }
            }
        );
        let mut o = Overrides::new();
        o.set("inner.b", 7).path("out", Some(&PathBuf::from("/x")));
        let s: Section = file.section("s", o).unwrap();
        assert_eq!(s.inner.b, 7);
        assert_eq!(s.out, PathBuf::from("/x"));
        let mut o = Overrides::new();
        o.set("inner.a", 1);
        let s: Section = ConfigFile::default().section("s", o.set("out", "rel").clone()).unwrap();
        assert_eq!(s.inner, Inner { a: 1, b: 0 });
        assert_eq!(s.out, PathBuf::from("rel"));
    }

    #[test]
    fn bad_top_level_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "workers = 0\nseed = -1\n").unwrap();
        let file = ConfigFile::load(&path).unwrap();
        assert!(file.workers().is_err());
        assert!(file.seed().is_err());
    }
}

//! Run configuration: a `key = value` file, `--set` overrides and a root
//! seed, checked against a per-command key table.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use recon_core::kv::{KvDoc, Section};
use recon_core::{Error, Result};

/// A known setting and its default; `None` marks a required key.
pub type Key = (&'static str, Option<&'static str>);

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub command: String,
    pub seed: u64,
    /// Every known key with its effective value, in table order.
    pub settings: Section,
    pub blocks: Vec<Section>,
    /// Relative paths resolve against this directory (the config file's).
    pub base: PathBuf,
}

impl RunConfig {
    /// Precedence: defaults < config file < `--set`; `--seed` beats `seed`.
    pub fn load(
        command: &str,
        path: &Path,
        sets: &[String],
        seed: Option<u64>,
        keys: &[Key],
        block_names: &[&str],
    ) -> Result<Self> {
        let doc = KvDoc::read(path)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_doc(command, doc, base, sets, seed, keys, block_names)
    }

    pub fn from_doc(
        command: &str,
        doc: KvDoc,
        base: PathBuf,
        sets: &[String],
        seed: Option<u64>,
        keys: &[Key],
        block_names: &[&str],
    ) -> Result<Self> {
        let mut user = doc.global;
        for s in sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects key=value, got {s:?}")))?;
            user.set(k.trim(), v.trim());
        }
        let mut allowed: Vec<&str> = keys.iter().map(|k| k.0).collect();
        allowed.push("seed");
        user.check_keys(&allowed)?;
        for b in &doc.blocks {
            let name = b.name.as_deref().unwrap_or("");
            if !block_names.contains(&name) {
                return Err(Error::Config(format!("unknown block [{name}]")));
            }
        }
        let seed = match seed {
            Some(s) => s,
            None => user.parse_or("seed", 0u64)?,
        };
        let mut settings = Section::default();
        for &(k, default) in keys {
            match user.get(k).or(default) {
                Some(v) => settings.set(k, v),
                None => return Err(Error::Config(format!("missing required key `{k}`"))),
            }
        }
        Ok(Self { command: command.to_string(), seed, settings, blocks: doc.blocks, base })
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        self.settings.require(key)
    }

    pub fn str(&self, key: &str) -> Result<&str> {
        self.settings.require_str(key)
    }

    /// `None` for the literal value `none`.
    pub fn opt<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.str(key)? {
            "none" => Ok(None),
            _ => self.get(key).map(Some),
        }
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>> {
        let v = self.settings.parse_list(key)?.unwrap_or_default();
        if v.is_empty() {
            return Err(Error::Config(format!("`{key}` must list at least one value")));
        }
        Ok(v)
    }

    pub fn path(&self, key: &str) -> Result<PathBuf> {
        Ok(self.base.join(self.str(key)?))
    }

    pub fn opt_path(&self, key: &str) -> Result<Option<PathBuf>> {
        Ok(self.opt::<String>(key)?.map(|p| self.base.join(p)))
    }

    /// Effective config, derived seeds and blocks as a `key = value` document.
    pub fn manifest_text(&self, seeds: &[(&str, u64)]) -> String {
        let mut out = format!("command = {}\nseed = {}\n", self.command, self.seed);
        out.push_str(&self.settings.to_text());
        out.push_str("\n[seeds]\n");
        for (name, s) in seeds {
            writeln!(out, "{name} = {s}").unwrap();
        }
        for b in &self.blocks {
            out.push('\n');
            out.push_str(&b.to_text());
        }
        out
    }

    pub fn write_manifest(&self, path: &Path, seeds: &[(&str, u64)]) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        }
        std::fs::write(path, self.manifest_text(seeds)).map_err(|e| io_err(path, e))
    }
}

pub fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io { path: path.to_path_buf(), source }
}

#[cfg(test)]
mod tests {
    use super::*;

    const KEYS: &[Key] = &[("a", None), ("b", Some("2"))];

    fn load(text: &str, sets: &[&str], seed: Option<u64>) -> Result<RunConfig> {
        let sets: Vec<String> = sets.iter().map(|s| s.to_string()).collect();
        RunConfig::from_doc("t", KvDoc::parse(text).unwrap(), PathBuf::from("/base"), &sets, seed, KEYS, &["observation"])
    }

    #[test]
    fn precedence() {
        let c = load("a = 1\nseed = 4\n", &["b=3"], None).unwrap();
        assert_eq!((c.get::<u32>("a").unwrap(), c.get::<u32>("b").unwrap(), c.seed), (1, 3, 4));
        assert_eq!(load("a = 1\nseed = 4\n", &[], Some(9)).unwrap().seed, 9);
        assert_eq!(c.path("a").unwrap(), PathBuf::from("/base/1"));
    }

    #[test]
    fn rejects_unknown_and_missing() {
        let e = load("a = 1\nc = 2\n", &[], None).unwrap_err().to_string();
        assert!(e.contains("`c`"), "{e}");
        let e = load("b = 1\n", &[], None).unwrap_err().to_string();
        assert!(e.contains("`a`"), "{e}");
        assert!(load("a = 1\n", &["zz=1"], None).is_err());
        assert!(load("a = 1\n[other]\nx = 1\n", &[], None).is_err());
    }

    #[test]
    fn manifest_echoes_defaults() {
        let c = load("a = 1\n[observation]\nkind = identity\n", &[], Some(5)).unwrap();
        let m = c.manifest_text(&[("s", 7)]);
        assert_eq!(m, "command = t\nseed = 5\na = 1\nb = 2\n\n[seeds]\ns = 7\n\n[observation]\nkind = identity\n");
    }
}

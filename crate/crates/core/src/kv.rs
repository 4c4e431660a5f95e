//! Flat `key = value` documents with `#` comments and repeated `[section]`
//! blocks. Used for run configs, training configs, and observation
//! descriptors.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// One block of settings. Keys are kept in insertion order for echoing.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Section {
    pub name: Option<String>,
    entries: Vec<(String, String)>,
}

impl Section {
    pub fn named(name: &str) -> Self {
        Self { name: Some(name.to_string()), entries: Vec::new() }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().rev().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Insert or overwrite.
    pub fn set(&mut self, key: &str, value: impl Display) {
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(k, _)| k.as_str())
    }

    /// Reject keys not listed in `allowed`.
    pub fn check_keys(&self, allowed: &[&str]) -> Result<()> {
        for k in self.keys() {
            if !allowed.contains(&k) {
                let scope = self.name.as_deref().map(|n| format!(" in [{n}]")).unwrap_or_default();
                return Err(Error::Config(format!("unknown key `{k}`{scope}")));
            }
        }
        Ok(())
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("cannot parse `{key}` = {v:?}"))),
        }
    }

    pub fn parse_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.parse(key)?.unwrap_or(default))
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T> {
        self.parse(key)?.ok_or_else(|| Error::Config(format!("missing required key `{key}`")))
    }

    pub fn require_str(&self, key: &str) -> Result<&str> {
        self.get(key).ok_or_else(|| Error::Config(format!("missing required key `{key}`")))
    }

    /// Comma-separated list.
    pub fn parse_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| s.parse().map_err(|_| Error::Config(format!("cannot parse `{key}` item {s:?}"))))
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        if let Some(n) = &self.name {
            out.push_str(&format!("[{n}]\n"));
        }
        for (k, v) in &self.entries {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }
}

/// A parsed document: top-level settings plus named blocks in file order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvDoc {
    pub global: Section,
    pub blocks: Vec<Section>,
}

impl KvDoc {
    pub fn parse(text: &str) -> Result<KvDoc> {
        let mut doc = KvDoc::default();
        for (i, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(p) => &raw[..p],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| Error::Config(format!("line {}: unterminated section header", i + 1)))?
                    .trim();
                doc.blocks.push(Section::named(name));
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", i + 1)));
            }
            let target = doc.blocks.last_mut().unwrap_or(&mut doc.global);
            if target.get(k).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key `{k}`", i + 1)));
            }
            target.set(k, v);
        }
        Ok(doc)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<KvDoc> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn blocks_named<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a Section> + 'a {
        self.blocks.iter().filter(move |b| b.name.as_deref() == Some(name))
    }

    pub fn to_text(&self) -> String {
        let mut out = self.global.to_text();
        for b in &self.blocks {
            out.push('\n');
            out.push_str(&b.to_text());
        }
        out
    }
}

/// Sorted view, handy for stable echoing of maps built in code.
pub fn sorted(section: &Section) -> BTreeMap<&str, &str> {
    section.entries().iter().map(|(k, v)| (k.as_str(), v.as_str())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_globals_and_blocks() {
        let doc = KvDoc::parse(
            "# header\nseed = 3\nname = a b # trailing\n\n[observation]\nkind = masking\n[observation]\nkind = downsample\ns_step = 2\n",
        )
        .unwrap();
        assert_eq!(doc.global.get("seed"), Some("3"));
        assert_eq!(doc.global.get("name"), Some("a b"));
        let obs: Vec<_> = doc.blocks_named("observation").collect();
        assert_eq!(obs.len(), 2);
        assert_eq!(obs[1].parse::<usize>("s_step").unwrap(), Some(2));
        assert_eq!(KvDoc::parse(&doc.to_text()).unwrap(), doc);
    }

    #[test]
    fn errors() {
        assert!(KvDoc::parse("novalue\n").is_err());
        assert!(KvDoc::parse("a = 1\na = 2\n").is_err());
        assert!(KvDoc::parse("[obs\n").is_err());
        let doc = KvDoc::parse("a = 1\nb = x\n").unwrap();
        assert!(doc.global.check_keys(&["a"]).is_err());
        assert!(doc.global.require::<f64>("c").is_err());
        assert!(doc.global.parse::<f64>("b").is_err());
    }

    #[test]
    fn lists() {
        let doc = KvDoc::parse("f = 2, 4,8\n").unwrap();
        assert_eq!(doc.global.parse_list::<usize>("f").unwrap(), Some(vec![2, 4, 8]));
    }
}

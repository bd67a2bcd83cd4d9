//! Flat `key = value` configuration text with `[section]` headers.
//!
//! ```text
//! # comment
//! [model]
//! variant = te-tnp
//! token_dim = 64
//! ```
//!
//! Values are emitted with Rust's shortest round-trip float formatting, so
//! parse -> emit -> parse is a fixpoint.

use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

/// A typed group of settings that can be read from and written to text.
pub trait Section {
    const NAME: &'static str;

    /// Every key with its current value, in a stable order.
    fn entries(&self) -> Vec<(&'static str, String)>;

    fn set(&mut self, key: &str, value: &str) -> Result<()>;

    fn emit(&self) -> String {
        let mut out = format!("[{}]\n", Self::NAME);
        for (k, v) in self.entries() {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }
}

/// One `key = value` line with the section it appeared under.
#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub section: String,
    pub key: String,
    pub value: String,
    pub line: usize,
}

/// Splits configuration text into entries. Keys before any header belong to
/// the empty section.
pub fn parse_entries(text: &str) -> Result<Vec<Entry>> {
    let mut section = String::new();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest.strip_suffix(']').ok_or_else(|| {
                Error::Config(format!("line {}: unterminated section header", i + 1))
            })?;
            section = name.trim().to_string();
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
        out.push(Entry {
            section: section.clone(),
            key: k.trim().to_string(),
            value: v.trim().to_string(),
            line: i + 1,
        });
    }
    Ok(out)
}

/// Applies every entry of `S::NAME` to `target`.
pub fn apply<S: Section>(target: &mut S, entries: &[Entry]) -> Result<()> {
    for e in entries.iter().filter(|e| e.section == S::NAME) {
        target.set(&e.key, &e.value).map_err(|err| {
            Error::Config(format!("line {} [{}] {}: {err}", e.line, e.section, e.key))
        })?;
    }
    Ok(())
}

pub fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("invalid value {value:?} for {key}: {e}")))
}

pub fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!(
            "invalid boolean {value:?} for {key}"
        ))),
    }
}

/// `a,b,c` into a list of values.
pub fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_value(key, s))
        .collect()
}

pub fn join<T: Display>(items: &[T]) -> String {
    items
        .iter()
        .map(|i| i.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

pub fn unknown_key(key: &str) -> Error {
    Error::Config(format!("unknown key {key}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_comments() {
        let text = "top = 1\n# note\n[a]\nx = 2.5\n\n[ b ]\ny=hello world\n";
        let e = parse_entries(text).unwrap();
        assert_eq!(e.len(), 3);
        assert_eq!((e[0].section.as_str(), e[0].key.as_str()), ("", "top"));
        assert_eq!((e[1].section.as_str(), e[1].value.as_str()), ("a", "2.5"));
        assert_eq!(
            (e[2].section.as_str(), e[2].value.as_str()),
            ("b", "hello world")
        );
    }

    #[test]
    fn rejects_malformed_lines() {
        assert!(parse_entries("[open\n").is_err());
        assert!(parse_entries("[a]\njust words\n").is_err());
    }

    #[test]
    fn lists_and_bools() {
        assert_eq!(
            parse_list::<f64>("g", "0, 0.2,1").unwrap(),
            vec![0.0, 0.2, 1.0]
        );
        assert!(parse_bool("f", "on").unwrap());
        assert!(parse_bool("f", "maybe").is_err());
        assert_eq!(join(&[0.1, 1.0]), "0.1,1");
    }
}

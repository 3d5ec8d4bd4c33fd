//! Plain-text `key = value` configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Later assignments
//! win, so a file can be layered over a profile and flags over the file.

use std::fmt::Display;
use std::str::FromStr;

use crate::{CoreError, Result};

/// A configuration section addressable by string keys.
pub trait KvConfig {
    /// Applies one assignment. Returns `Ok(false)` when the key is not ours.
    fn set(&mut self, key: &str, value: &str) -> Result<bool>;
    /// Every key with its current value, in a fixed order.
    fn entries(&self) -> Vec<(String, String)>;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    pub key: String,
    pub value: String,
    pub line: usize,
}

pub fn parse_assignments(text: &str, source: &str) -> Result<Vec<Assignment>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(CoreError::Config(format!("{source}:{}: expected 'key = value', got '{line}'", n + 1)));
        };
        let key = k.trim();
        if key.is_empty() {
            return Err(CoreError::Config(format!("{source}:{}: empty key", n + 1)));
        }
        out.push(Assignment {
            key: key.to_string(),
            value: v.trim().to_string(),
            line: n + 1,
        });
    }
    Ok(out)
}

/// `key=value` as given on a command line.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| CoreError::Config(format!("override '{s}' is not key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

pub fn render(entries: &[(String, String)]) -> String {
    entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

pub fn value<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: Display,
{
    v.parse::<T>()
        .map_err(|e| CoreError::Config(format!("{key}: cannot parse '{v}': {e}")))
}

pub fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(CoreError::Config(format!("{key}: expected a boolean, got '{v}'"))),
    }
}

/// `none` or a number.
pub fn optional<T: FromStr>(key: &str, v: &str) -> Result<Option<T>>
where
    T::Err: Display,
{
    if v == "none" || v == "auto" {
        Ok(None)
    } else {
        value(key, v).map(Some)
    }
}

pub fn list<T: FromStr, const N: usize>(key: &str, v: &str) -> Result<[T; N]>
where
    T::Err: Display,
{
    let parts: Vec<T> = v
        .split(',')
        .map(|p| value::<T>(key, p.trim()))
        .collect::<Result<_>>()?;
    let n = parts.len();
    parts
        .try_into()
        .map_err(|_| CoreError::Config(format!("{key}: expected {N} comma-separated values, got {n}")))
}

pub fn join<T: Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

pub fn show_optional<T: Display>(x: &Option<T>, none: &str) -> String {
    x.as_ref().map_or_else(|| none.to_string(), |v| v.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_blank_lines() {
        let a = parse_assignments("# c\n\nalpha = 0.25\n beta=x y \n", "t").unwrap();
        assert_eq!(a.len(), 2);
        assert_eq!(a[1].key, "beta");
        assert_eq!(a[1].value, "x y");
        assert_eq!(a[1].line, 4);
        assert!(parse_assignments("novalue\n", "t").is_err());
    }

    #[test]
    fn typed_helpers() {
        assert_eq!(list::<usize, 3>("c", "32, 64,128").unwrap(), [32, 64, 128]);
        assert!(list::<usize, 3>("c", "32,64").is_err());
        assert_eq!(optional::<f64>("g", "auto").unwrap(), None);
        assert_eq!(optional::<f64>("g", "0.5").unwrap(), Some(0.5));
        assert!(flag("f", "maybe").is_err());
        // Display of f64 round-trips exactly
        let x = 0.1 + 0.2;
        assert_eq!(value::<f64>("x", &x.to_string()).unwrap(), x);
    }
}

//! Sectioned `key=value` text files shared by the network description and
//! the run configuration.
//!
//! ```text
//! # comment
//! [convolutional]
//! filters = 16
//! size=3
//! ```

use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Section {
    pub name: String,
    pub line: usize,
    pub entries: Vec<Entry>,
}

impl Section {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .rev()
            .find(|e| e.key == key)
            .map(|e| e.value.as_str())
    }

    pub fn parse_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => self.parse_value(key, v),
        }
    }

    pub fn parse_required<T: FromStr>(&self, key: &str) -> Result<T> {
        match self.get(key) {
            None => Err(Error::config(format!(
                "[{}] at line {}: missing required key `{key}`",
                self.name, self.line
            ))),
            Some(v) => self.parse_value(key, v),
        }
    }

    fn parse_value<T: FromStr>(&self, key: &str, v: &str) -> Result<T> {
        v.parse().map_err(|_| {
            let line = self
                .entries
                .iter()
                .rev()
                .find(|e| e.key == key)
                .map_or(self.line, |e| e.line);
            Error::config(format!(
                "[{}] line {line}: cannot parse `{key}={v}`",
                self.name
            ))
        })
    }

    /// Rejects keys outside `allowed`.
    pub fn check_keys(&self, allowed: &[&str]) -> Result<()> {
        for e in &self.entries {
            if !allowed.contains(&e.key.as_str()) {
                return Err(Error::config(format!(
                    "[{}] line {}: unknown key `{}`",
                    self.name, e.line, e.key
                )));
            }
        }
        Ok(())
    }
}

/// Parses sections in file order. Blank lines and `#`/`;` comments are
/// skipped; surrounding whitespace is ignored everywhere.
pub fn parse_sections(text: &str) -> Result<Vec<Section>> {
    let mut sections: Vec<Section> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = strip_comment(raw).trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest.strip_suffix(']').ok_or_else(|| {
                Error::config(format!("line {line_no}: unterminated section header"))
            })?;
            sections.push(Section {
                name: name.trim().to_string(),
                line: line_no,
                entries: Vec::new(),
            });
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {line_no}: expected key=value")))?;
        let section = sections.last_mut().ok_or_else(|| {
            Error::config(format!("line {line_no}: key outside of any section"))
        })?;
        section.entries.push(Entry {
            key: key.trim().to_string(),
            value: value.trim().to_string(),
            line: line_no,
        });
    }
    Ok(sections)
}

fn strip_comment(line: &str) -> &str {
    match line.find(['#', ';']) {
        Some(pos) => &line[..pos],
        None => line,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn whitespace_tolerant_and_order_preserving() {
        let text = "  [net]\n width = 64 \n\n# c\n[maxpool]\nsize=2 ; trailing\n[net]\nwidth=32";
        let s = parse_sections(text).unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s[0].name, "net");
        assert_eq!(s[0].get("width"), Some("64"));
        assert_eq!(s[1].parse_required::<usize>("size").unwrap(), 2);
        assert_eq!(s[2].get("width"), Some("32"));
    }

    #[test]
    fn rejects_orphan_keys_and_bad_headers() {
        assert!(parse_sections("a=1").is_err());
        assert!(parse_sections("[net\nwidth=1").is_err());
        assert!(parse_sections("[net]\nwidth").is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        let s = parse_sections("[x]\na=1\nb=2").unwrap();
        assert!(s[0].check_keys(&["a", "b"]).is_ok());
        assert!(s[0].check_keys(&["a"]).is_err());
    }
}

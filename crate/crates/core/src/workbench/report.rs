//! Structured evaluation report written as `[section]` blocks of `key = value`.

use std::fmt::Display;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReportSection {
    pub name: String,
    pub entries: Vec<(String, String)>,
}

impl ReportSection {
    pub fn put(&mut self, key: impl Into<String>, value: impl Display) -> &mut Self {
        self.entries.push((key.into(), value.to_string()));
        self
    }

    /// Fixed nine-significant-digit rendering so reruns compare byte for byte.
    pub fn put_f64(&mut self, key: impl Into<String>, value: f64) -> &mut Self {
        self.put(key, fmt_f64(value))
    }

    pub fn put_opt(&mut self, key: impl Into<String>, value: Option<f64>) -> &mut Self {
        match value {
            Some(v) => self.put_f64(key, v),
            None => self.put(key, "absent"),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.9e}")
    } else {
        v.to_string()
    }
}

/// Metrics of one pipeline run, grouped by section.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub sections: Vec<ReportSection>,
}

impl EvalReport {
    /// The named section, created at the end if missing.
    pub fn section(&mut self, name: &str) -> &mut ReportSection {
        if let Some(i) = self.sections.iter().position(|s| s.name == name) {
            return &mut self.sections[i];
        }
        self.sections.push(ReportSection { name: name.to_string(), entries: Vec::new() });
        self.sections.last_mut().unwrap()
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections.iter().find(|s| s.name == section)?.get(key)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (i, s) in self.sections.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            out.push_str(&format!("[{}]\n", s.name));
            for (k, v) in &s.entries {
                out.push_str(&format!("{k} = {v}\n"));
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut report = EvalReport::default();
        let mut current: Option<usize> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                report.sections.push(ReportSection { name: name.to_string(), entries: Vec::new() });
                current = Some(report.sections.len() - 1);
                continue;
            }
            let (Some(c), Some((k, v))) = (current, line.split_once('=')) else {
                return Err(Error::Input(format!("report line {}: expected '[section]' or 'key = value'", i + 1)));
            };
            report.sections[c].entries.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(report)
    }
}

/// Tab-separated table with a header row.
pub fn table(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut out = header.join("\t");
    out.push('\n');
    for r in rows {
        out.push_str(&r.join("\t"));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_parse_round_trip() {
        let mut r = EvalReport::default();
        r.section("pve").put_f64("heldout", 0.97).put("recordings", 3);
        r.section("bursts").put_opt("state0.interval_s", None);
        r.section("pve").put("note", "x");
        let text = r.render();
        assert!(text.starts_with("[pve]\nheldout = 9.700000000e-1\nrecordings = 3\nnote = x\n\n[bursts]"));
        assert_eq!(EvalReport::parse(&text).unwrap(), r);
    }
}

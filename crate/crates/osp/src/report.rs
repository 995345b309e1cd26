//! Metric reports: an aligned text table plus a `key=value` file for tools.

use std::fmt::Display;
use std::path::{Path, PathBuf};

use osp_core::metrics::MiouReport;
use osp_core::synthworld::CLASS_NAMES;

use crate::error::{OspError, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    pub title: String,
    pub rows: Vec<(String, String)>,
}

impl Report {
    pub fn new(title: &str) -> Self {
        Self {
            title: title.to_string(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, key: &str, value: impl Display) {
        self.rows.push((key.to_string(), value.to_string()));
    }

    pub fn push_f(&mut self, key: &str, value: f64) {
        self.push(key, format!("{value:.6}"));
    }

    /// mIoU, per-class IoU (`-` when not evaluable) and the evaluable flag.
    pub fn push_miou(&mut self, prefix: &str, r: &MiouReport) {
        self.push_f(&format!("{prefix}.miou"), r.miou);
        self.push(&format!("{prefix}.evaluable"), r.evaluable);
        for (c, v) in r.per_class.iter().enumerate() {
            let name = CLASS_NAMES.get(c).copied().unwrap_or("class");
            let key = format!("{prefix}.iou.{name}");
            match v {
                Some(x) => self.push_f(&key, *x),
                None => self.push(&key, "-"),
            }
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.rows.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn text(&self) -> String {
        let w = self.rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let mut s = format!("{}\n", self.title);
        for (k, v) in &self.rows {
            s.push_str(&format!("  {k:<w$}  {v}\n"));
        }
        s
    }

    pub fn kv(&self) -> String {
        self.rows.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Writes the text form to `path` and the key/value form next to it.
    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.text()).map_err(|e| OspError::io(path, e))?;
        let kv = kv_path(path);
        std::fs::write(&kv, self.kv()).map_err(|e| OspError::io(&kv, e))
    }
}

pub fn kv_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".kv");
    PathBuf::from(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_and_kv_forms() {
        let mut r = Report::new("eval");
        r.push("mode", "grid");
        r.push_f("miou", 0.5);
        assert_eq!(r.kv(), "mode=grid\nmiou=0.500000\n");
        assert_eq!(r.text(), "eval\n  mode  grid\n  miou  0.500000\n");
        assert_eq!(r.get("miou"), Some("0.500000"));
    }
}

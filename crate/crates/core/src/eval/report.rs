use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub metrics: BTreeMap<String, f64>,
    pub per_query_ap: Vec<f64>,
    /// `(recall, precision)` points.
    pub pr_curve: Vec<(f64, f64)>,
    pub config: serde_json::Value,
}

impl EvalReport {
    pub fn new(task: impl Into<String>) -> Self {
        Self {
            task: task.into(),
            metrics: BTreeMap::new(),
            per_query_ap: Vec::new(),
            pr_curve: Vec::new(),
            config: serde_json::Value::Null,
        }
    }

    pub fn set(&mut self, key: impl Into<String>, value: f64) {
        self.metrics.insert(key.into(), value);
    }

    pub fn metric(&self, key: &str) -> Option<f64> {
        self.metrics.get(key).copied()
    }

    /// `key = value` lines: task, metrics, then the config echo as JSON.
    pub fn to_text(&self) -> String {
        let mut s = format!("task = {}\n", self.task);
        for (k, v) in &self.metrics {
            writeln!(s, "{k} = {v}").unwrap();
        }
        writeln!(s, "config = {}", self.config).unwrap();
        s
    }

    pub fn pr_csv(&self) -> String {
        let mut s = String::from("recall,precision\n");
        for (r, p) in &self.pr_curve {
            writeln!(s, "{r},{p}").unwrap();
        }
        s
    }

    /// Whitespace-separated `x y` rows for external plotting.
    pub fn plot_data(&self) -> String {
        self.pr_curve.iter().map(|(r, p)| format!("{r} {p}\n")).collect()
    }

    /// Writes `<stem>.txt`, plus `<stem>_pr.csv` and `<stem>_pr.dat` when a
    /// curve is present.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        let put = |name: String, body: String| {
            let path = dir.join(name);
            std::fs::write(&path, body).map_err(|e| Error::io(&path, e))
        };
        put(format!("{stem}.txt"), self.to_text())?;
        if !self.pr_curve.is_empty() {
            put(format!("{stem}_pr.csv"), self.pr_csv())?;
            put(format!("{stem}_pr.dat"), self.plot_data())?;
        }
        Ok(())
    }
}

/// Mean of `values` per tag, e.g. per-query APs stratified by difficulty.
pub fn mean_by_tag(values: &[f64], tags: &[String]) -> BTreeMap<String, f64> {
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for (v, t) in values.iter().zip(tags) {
        let e = acc.entry(t.clone()).or_default();
        e.0 += v;
        e.1 += 1;
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_and_csv() {
        let mut r = EvalReport::new("matching");
        r.set("map", 0.5);
        r.pr_curve = vec![(0.0, 1.0), (0.5, 0.5)];
        r.config = serde_json::json!({"k": 1});
        assert_eq!(r.to_text(), "task = matching\nmap = 0.5\nconfig = {\"k\":1}\n");
        assert_eq!(r.pr_csv(), "recall,precision\n0,1\n0.5,0.5\n");
        let dir = tempfile::tempdir().unwrap();
        r.write(dir.path(), "m").unwrap();
        assert!(dir.path().join("m_pr.dat").exists());
    }

    #[test]
    fn stratified_means() {
        let m = mean_by_tag(&[1.0, 0.0, 0.5], &["e".into(), "h".into(), "e".into()]);
        assert_eq!(m["e"], 0.75);
        assert_eq!(m["h"], 0.0);
    }
}

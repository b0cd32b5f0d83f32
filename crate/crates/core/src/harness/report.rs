use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use super::ablate::AblationReport;
use super::eval::EvalDetail;
use super::write_file;
use crate::error::{Error, Result};

/// Named metric values of one run on one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub name: String,
    pub split: String,
    pub seed: u64,
    pub estimator: String,
    pub interaction: String,
    pub config_hash: String,
    pub data_hash: String,
    pub metrics: BTreeMap<String, f64>,
    pub detail: EvalDetail,
}

const FIXED: [&str; 7] = ["name", "split", "seed", "estimator", "interaction", "config_hash", "data_hash"];

pub(crate) fn csv_string(header: &[String], rows: &[Vec<String>]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}

impl MetricReport {
    /// One CSV table: the fixed columns, then the union of metric names in
    /// sorted order. Missing values are left empty.
    pub fn to_csv(rows: &[MetricReport]) -> String {
        let mut keys: Vec<&String> = rows.iter().flat_map(|r| r.metrics.keys()).collect();
        keys.sort();
        keys.dedup();
        let header: Vec<String> = FIXED.iter().map(|s| s.to_string()).chain(keys.iter().map(|k| k.to_string())).collect();
        let body: Vec<Vec<String>> = rows
            .iter()
            .map(|r| {
                let mut fields = vec![
                    r.name.clone(),
                    r.split.clone(),
                    r.seed.to_string(),
                    r.estimator.clone(),
                    r.interaction.clone(),
                    r.config_hash.clone(),
                    r.data_hash.clone(),
                ];
                fields.extend(keys.iter().map(|k| r.metrics.get(*k).map_or(String::new(), |v| format!("{v:?}"))));
                fields
            })
            .collect();
        csv_string(&header, &body)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_file(&dir.join("metrics.csv"), Self::to_csv(std::slice::from_ref(self)).as_bytes())?;
        write_file(&dir.join("metrics.json"), serde_json::to_string_pretty(self).expect("json").as_bytes())
    }
}

fn collect(dir: &Path, name: &str) -> Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    for entry in WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| Error::Validation(format!("walking {}: {e}", dir.display())))?;
        if entry.file_type().is_file() && entry.file_name() == name {
            found.push(entry.into_path());
        }
    }
    Ok(found)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse { line: e.line(), message: format!("{}: {e}", path.display()) })
}

/// Gathers every `metrics.json` and `ablation.json` below `dir` into
/// `summary.csv` and the long-format `plot.csv`
/// (`figure,series,x,y,label`). Returns the number of metric rows.
pub fn aggregate(dir: &Path) -> Result<usize> {
    let rows: Vec<MetricReport> = collect(dir, "metrics.json")?.iter().map(|p| read_json(p)).collect::<Result<_>>()?;
    let ablations: Vec<AblationReport> =
        collect(dir, "ablation.json")?.iter().map(|p| read_json(p)).collect::<Result<_>>()?;
    if rows.is_empty() && ablations.is_empty() {
        return Err(Error::Validation(format!("no reports found below {}", dir.display())));
    }

    let mut plot = Vec::new();
    for r in &rows {
        if let EvalDetail::Forecast(f) = &r.detail {
            if let Some(c) = &f.curve {
                for (i, (s, u, n)) in c.bins.iter().enumerate() {
                    plot.push(vec![
                        "stochasticity-uncertainty".into(),
                        format!("{}/{}", r.name, r.split),
                        format!("{s:?}"),
                        format!("{u:?}"),
                        format!("bin {i} n={n}"),
                    ]);
                }
            }
        }
    }
    for a in &ablations {
        for d in &a.deltas {
            plot.push(vec![
                "cu-improvement".into(),
                format!("{}/{}", d.dataset, d.metric),
                d.interaction.clone(),
                format!("{:?}", d.delta),
                a.grid_label().into(),
            ]);
        }
    }
    let header: Vec<String> = ["figure", "series", "x", "y", "label"].map(String::from).to_vec();
    write_file(&dir.join("summary.csv"), MetricReport::to_csv(&rows).as_bytes())?;
    write_file(&dir.join("plot.csv"), csv_string(&header, &plot).as_bytes())?;
    Ok(rows.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::ToyReport;

    fn row(name: &str, kl: f64) -> MetricReport {
        let detail = EvalDetail::Toy(ToyReport {
            l2_mu: 0.0,
            l1_sigma: 0.0,
            l1_sigma_inv: 0.0,
            kl,
            kl_stderr: 0.0,
            instances: 1,
            kl_negative_flag: false,
        });
        MetricReport {
            name: name.into(),
            split: "test".into(),
            seed: 1,
            estimator: "cu".into(),
            interaction: "none".into(),
            config_hash: "c".into(),
            data_hash: "d".into(),
            metrics: detail.values().into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
            detail,
        }
    }

    #[test]
    fn csv_has_header_and_rows() {
        let csv = MetricReport::to_csv(&[row("a,b", 0.5), row("c", 1.0)]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("name,split,seed,estimator,interaction,config_hash,data_hash,"));
        assert!(lines[1].starts_with("\"a,b\",test,1"));
        assert_eq!(lines[1].split(',').count(), lines[0].split(',').count() + 1);
    }

    #[test]
    fn aggregate_finds_nested_reports() {
        let dir = tempfile::tempdir().unwrap();
        row("x", 0.1).write(&dir.path().join("a")).unwrap();
        row("y", 0.2).write(&dir.path().join("b/c")).unwrap();
        assert_eq!(aggregate(dir.path()).unwrap(), 2);
        let summary = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
        assert_eq!(summary.lines().count(), 3);
        assert!(aggregate(tempfile::tempdir().unwrap().path()).is_err());
    }
}

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::report::MetricReport;
use super::{load_data, run_cell, write_file, DataSource, RunConfig};
use crate::error::{Error, Result};
use crate::nets::{EstimatorKind, Interaction};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Grid {
    /// Every estimator with interaction on and off: six cells.
    EstimatorInteraction,
    /// IU-only against IU+CU with interaction on and off: four cells.
    CuInteraction,
}

impl Grid {
    pub fn cells(self) -> Vec<(EstimatorKind, Interaction)> {
        let estimators: &[EstimatorKind] = match self {
            Grid::EstimatorInteraction => &EstimatorKind::ALL,
            Grid::CuInteraction => &[EstimatorKind::IuOnly, EstimatorKind::PeCu],
        };
        estimators
            .iter()
            .flat_map(|&e| [Interaction::None, Interaction::Attention].map(|i| (e, i)))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub dataset: String,
    pub report: MetricReport,
}

/// Relative improvement `(IU − IU+CU) / |IU|` of a lower-is-better metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub dataset: String,
    pub interaction: String,
    pub metric: String,
    pub iu: f64,
    pub iu_cu: f64,
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub grid: Grid,
    pub cells: Vec<AblationCell>,
    pub deltas: Vec<DeltaRow>,
}

impl AblationReport {
    pub fn grid_label(&self) -> &'static str {
        match self.grid {
            Grid::EstimatorInteraction => "estimator-interaction",
            Grid::CuInteraction => "cu-interaction",
        }
    }
}

pub(crate) fn interaction_label(i: Interaction) -> &'static str {
    match i {
        Interaction::None => "none",
        Interaction::Attention => "attention",
    }
}

const DELTA_METRICS: [&str; 8] = ["ade1", "fde1", "adek", "fdek", "brier_fdek", "kl", "l1_sigma", "l1_sigma_inv"];

fn datasets(cfg: &RunConfig) -> Vec<(String, RunConfig)> {
    if cfg.data.source == DataSource::Scenes && !cfg.ablate.couplings.is_empty() {
        cfg.ablate
            .couplings
            .iter()
            .map(|&p| {
                let mut c = cfg.clone();
                c.data.scenes.coupling = p;
                (format!("coupling-{p}"), c)
            })
            .collect()
    } else {
        vec![("base".to_string(), cfg.clone())]
    }
}

/// Runs every cell of `grid` on every requested dataset. Cells of one
/// dataset share its data and the run seed. With `out`, each cell writes
/// into `out/<dataset>/<cell>/` and the grid into `out/ablation.{json,csv}`.
pub fn ablate(cfg: &RunConfig, grid: Grid, out: Option<&Path>) -> Result<AblationReport> {
    let mut cells = Vec::new();
    let mut deltas = Vec::new();
    for (label, base) in datasets(cfg) {
        let data = load_data(&base)?;
        let mut cell_reports = Vec::new();
        for (est, inter) in grid.cells() {
            let mut c = base.clone();
            c.model.estimator = est;
            c.model.interaction = inter;
            c.run.name = format!("{}-{}-{}", cfg.run.name, est.label(), interaction_label(inter));
            let dir = out.map(|o| o.join(&label).join(format!("{}-{}", est.label(), interaction_label(inter))));
            let (_, report) = run_cell(&c, &data, dir.as_deref())?;
            cell_reports.push((est, inter, report));
        }
        for inter in [Interaction::None, Interaction::Attention] {
            let find = |e: EstimatorKind| cell_reports.iter().find(|r| r.0 == e && r.1 == inter).map(|r| &r.2);
            let (Some(iu), Some(cu)) = (find(EstimatorKind::IuOnly), find(EstimatorKind::PeCu)) else {
                continue;
            };
            for metric in DELTA_METRICS {
                if let (Some(&a), Some(&b)) = (iu.metrics.get(metric), cu.metrics.get(metric)) {
                    deltas.push(DeltaRow {
                        dataset: label.clone(),
                        interaction: interaction_label(inter).into(),
                        metric: metric.into(),
                        iu: a,
                        iu_cu: b,
                        delta: (a - b) / a.abs().max(1e-12),
                    });
                }
            }
        }
        cells.extend(cell_reports.into_iter().map(|(_, _, report)| AblationCell { dataset: label.clone(), report }));
    }
    if cells.is_empty() {
        return Err(Error::Config("the grid has no cells".into()));
    }
    let report = AblationReport { grid, cells, deltas };
    if let Some(o) = out {
        write_file(&o.join("ablation.json"), serde_json::to_string_pretty(&report).expect("json").as_bytes())?;
        let rows: Vec<MetricReport> = report.cells.iter().map(|c| c.report.clone()).collect();
        write_file(&o.join("ablation.csv"), MetricReport::to_csv(&rows).as_bytes())?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grids_enumerate_cells() {
        assert_eq!(Grid::EstimatorInteraction.cells().len(), 6);
        let cu = Grid::CuInteraction.cells();
        assert_eq!(cu.len(), 4);
        assert!(cu.iter().all(|c| c.0 != EstimatorKind::CuNpe));
    }
}

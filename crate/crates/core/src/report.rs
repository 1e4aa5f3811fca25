//! Plot-ready summaries of continuous (CGT) versus integer-level (DGT) fits.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fitting::DriverReport;
use crate::StateId;

/// Level-interval edges: `[0, 0.3)`, then width 0.2 up to `[2.7, 3.0]`.
pub const INTERVAL_EDGES: [f64; 15] = [0.0, 0.3, 0.5, 0.7, 0.9, 1.1, 1.3, 1.5, 1.7, 1.9, 2.1, 2.3, 2.5, 2.7, 3.0];

/// Width (percentage points) of a success-grid cell.
pub const GRID_WIDTH: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriverSummary {
    pub driver_id: u64,
    pub n_comparisons: usize,
    pub cgt_success: usize,
    pub dgt_success: usize,
    pub cgt_percent: Option<f64>,
    pub dgt_percent: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub true_level: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelPoint {
    pub driver_id: u64,
    pub state_id: StateId,
    pub l_opt: f64,
    pub crit_opt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub cgt_lo: f64,
    pub dgt_lo: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodComparison {
    /// Drivers with at least one qualifying state.
    pub drivers: usize,
    pub cgt_mean_percent: f64,
    pub dgt_mean_percent: f64,
    pub difference: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    pub comparison: MethodComparison,
    pub drivers: Vec<DriverSummary>,
    /// Successful CGT fits only.
    pub scatter: Vec<LevelPoint>,
    pub intervals: Vec<IntervalBin>,
    pub grid: Vec<GridCell>,
}

/// Index of the interval containing `level`; the last interval is closed.
pub fn interval_of(level: f64) -> Option<usize> {
    let last = INTERVAL_EDGES.len() - 2;
    if !(INTERVAL_EDGES[0]..=INTERVAL_EDGES[last + 1]).contains(&level) {
        return None;
    }
    Some(INTERVAL_EDGES[1..=last].iter().take_while(|&&e| level >= e).count())
}

fn grid_cell(percent: f64) -> usize {
    let cells = (100.0 / GRID_WIDTH) as usize;
    ((percent / GRID_WIDTH).floor() as usize).min(cells - 1)
}

/// Joins CGT and DGT reports by driver id.
pub fn build_report(cgt: &[DriverReport], dgt: &[DriverReport], true_levels: &BTreeMap<u64, f64>) -> Result<ReportBundle> {
    if cgt.is_empty() {
        return Err(Error::Input("no driver reports to summarize".into()));
    }
    let dgt_by_id: BTreeMap<u64, &DriverReport> = dgt.iter().map(|r| (r.driver_id, r)).collect();
    let mut drivers = Vec::with_capacity(cgt.len());
    let mut scatter = Vec::new();
    for c in cgt {
        let d = dgt_by_id
            .get(&c.driver_id)
            .ok_or_else(|| Error::Input(format!("driver {} has no integer-level report", c.driver_id)))?;
        drivers.push(DriverSummary {
            driver_id: c.driver_id,
            n_comparisons: c.n_comparisons,
            cgt_success: c.n_success,
            dgt_success: d.n_success,
            cgt_percent: c.percent,
            dgt_percent: d.percent,
            true_level: true_levels.get(&c.driver_id).copied(),
        });
        scatter.extend(c.states.iter().filter(|s| s.success).map(|s| LevelPoint {
            driver_id: c.driver_id,
            state_id: s.state_id,
            l_opt: s.l_opt,
            crit_opt: s.crit_opt,
        }));
    }
    drivers.sort_by_key(|d| d.driver_id);

    let mut counts = vec![0usize; INTERVAL_EDGES.len() - 1];
    for p in &scatter {
        if let Some(i) = interval_of(p.l_opt) {
            counts[i] += 1;
        }
    }
    let total = scatter.len().max(1) as f64;
    let intervals = INTERVAL_EDGES
        .windows(2)
        .zip(&counts)
        .map(|(w, &count)| IntervalBin {
            lo: w[0],
            hi: w[1],
            count,
            fraction: count as f64 / total,
        })
        .collect();

    let cells = (100.0 / GRID_WIDTH) as usize;
    let mut grid_counts = vec![vec![0usize; cells]; cells];
    let both: Vec<(f64, f64)> = drivers
        .iter()
        .filter_map(|d| Some((d.cgt_percent?, d.dgt_percent?)))
        .collect();
    for &(c, d) in &both {
        grid_counts[grid_cell(c)][grid_cell(d)] += 1;
    }
    let grid = (0..cells)
        .flat_map(|i| (0..cells).map(move |j| (i, j)))
        .map(|(i, j)| GridCell {
            cgt_lo: i as f64 * GRID_WIDTH,
            dgt_lo: j as f64 * GRID_WIDTH,
            count: grid_counts[i][j],
        })
        .collect();

    let n = both.len();
    let mean = |f: fn(&(f64, f64)) -> f64| if n == 0 { 0.0 } else { both.iter().map(f).sum::<f64>() / n as f64 };
    let (cgt_mean_percent, dgt_mean_percent) = (mean(|p| p.0), mean(|p| p.1));
    Ok(ReportBundle {
        comparison: MethodComparison {
            drivers: n,
            cgt_mean_percent,
            dgt_mean_percent,
            difference: cgt_mean_percent - dgt_mean_percent,
        },
        drivers,
        scatter,
        intervals,
        grid,
    })
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct SuccessRow {
    driver_id: u64,
    n_comparisons: usize,
    cgt_percent: Option<f64>,
    dgt_percent: Option<f64>,
    true_level: Option<f64>,
}

#[derive(Serialize)]
struct TableRow<'a> {
    method: &'a str,
    mean_percent: f64,
}

impl ReportBundle {
    /// Writes `summary.json`, the per-figure CSVs and `table1.csv`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let summary = dir.join("summary.json");
        fs::write(&summary, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(&summary, e))?;
        let success: Vec<SuccessRow> = self
            .drivers
            .iter()
            .map(|d| SuccessRow {
                driver_id: d.driver_id,
                n_comparisons: d.n_comparisons,
                cgt_percent: d.cgt_percent,
                dgt_percent: d.dgt_percent,
                true_level: d.true_level,
            })
            .collect();
        write_csv(&dir.join("fig2_success.csv"), &success)?;
        write_csv(&dir.join("fig3_grid.csv"), &self.grid)?;
        write_csv(&dir.join("fig4_scatter.csv"), &self.scatter)?;
        write_csv(&dir.join("fig5_intervals.csv"), &self.intervals)?;
        write_csv(
            &dir.join("table1.csv"),
            &[
                TableRow {
                    method: "DGT",
                    mean_percent: self.comparison.dgt_mean_percent,
                },
                TableRow {
                    method: "CGT",
                    mean_percent: self.comparison.cgt_mean_percent,
                },
            ],
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fitting::FitResult;

    fn fit(state_id: StateId, l_opt: f64, success: bool) -> FitResult {
        FitResult {
            state_id,
            n_visits: 40,
            l_opt,
            crit_opt: if success { 0.5 } else { 0.01 },
            statistic: 0.1,
            success,
            restarts: vec![],
        }
    }

    fn report(driver_id: u64, states: Vec<FitResult>) -> DriverReport {
        let n_success = states.iter().filter(|s| s.success).count();
        DriverReport {
            driver_id,
            n_comparisons: states.len(),
            n_success,
            percent: (!states.is_empty()).then(|| 100.0 * n_success as f64 / states.len() as f64),
            states,
        }
    }

    #[test]
    fn intervals_partition_the_level_range() {
        assert_eq!(interval_of(0.0), Some(0));
        assert_eq!(interval_of(0.29), Some(0));
        assert_eq!(interval_of(0.3), Some(1));
        assert_eq!(interval_of(1.3), Some(6));
        assert_eq!(interval_of(3.0), Some(13));
        assert_eq!(interval_of(3.01), None);
        let widths: Vec<f64> = INTERVAL_EDGES.windows(2).map(|w| w[1] - w[0]).collect();
        assert!((widths[0] - 0.3).abs() < 1e-12 && (widths[13] - 0.3).abs() < 1e-12);
        assert!(widths[1..13].iter().all(|w| (w - 0.2).abs() < 1e-12));
        for i in 0..=300 {
            assert!(interval_of(i as f64 / 100.0).is_some());
        }
    }

    #[test]
    fn all_mass_at_one_point_three() {
        let cgt = vec![report(1, (0..5).map(|s| fit(s, 1.3, true)).collect())];
        let dgt = vec![report(1, (0..5).map(|s| fit(s, 1.0, false)).collect())];
        let b = build_report(&cgt, &dgt, &BTreeMap::new()).unwrap();
        let hit: Vec<_> = b.intervals.iter().filter(|i| i.count > 0).collect();
        assert_eq!(hit.len(), 1);
        assert_eq!((hit[0].lo, hit[0].hi, hit[0].count, hit[0].fraction), (1.3, 1.5, 5, 1.0));
        assert_eq!(b.comparison.cgt_mean_percent, 100.0);
        assert_eq!(b.comparison.dgt_mean_percent, 0.0);
    }

    #[test]
    fn grid_conserves_drivers_and_scatter_drops_failures() {
        let cgt: Vec<_> = (0..7)
            .map(|d| report(d, (0..4).map(|s| fit(s, 0.5, s < d as u32 % 5)).collect()))
            .collect();
        let dgt: Vec<_> = (0..7)
            .map(|d| report(d, (0..4).map(|s| fit(s, 0.0, s == 0)).collect()))
            .collect();
        let b = build_report(&cgt, &dgt, &BTreeMap::from([(3, 0.75)])).unwrap();
        assert_eq!(b.grid.len(), 400);
        assert_eq!(b.grid.iter().map(|c| c.count).sum::<usize>(), 7);
        // 100% lands in the top cell
        assert!(b.grid.iter().any(|c| c.cgt_lo == 95.0 && c.count > 0));
        assert!(b.scatter.iter().all(|p| p.crit_opt > 0.05));
        assert_eq!(b.drivers[3].true_level, Some(0.75));
    }

    #[test]
    fn empty_or_unmatched_input_is_an_error() {
        assert!(build_report(&[], &[], &BTreeMap::new()).is_err());
        assert!(build_report(&[report(1, vec![])], &[], &BTreeMap::new()).is_err());
    }

    #[test]
    fn emitted_files_parse_back() {
        let cgt = vec![report(1, vec![fit(0, 1.3, true), fit(1, 2.0, false)])];
        let dgt = vec![report(1, vec![fit(0, 1.0, false), fit(1, 2.0, false)])];
        let b = build_report(&cgt, &dgt, &BTreeMap::new()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        b.write(dir.path()).unwrap();
        let back: ReportBundle = serde_json::from_str(&fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
        assert_eq!(back, b);
        for (name, cols) in [
            ("fig2_success.csv", 5),
            ("fig3_grid.csv", 3),
            ("fig4_scatter.csv", 4),
            ("fig5_intervals.csv", 4),
            ("table1.csv", 2),
        ] {
            let mut r = csv::Reader::from_path(dir.path().join(name)).unwrap();
            assert_eq!(r.headers().unwrap().len(), cols, "{name}");
            for row in r.records() {
                assert_eq!(row.unwrap().len(), cols, "{name}");
            }
        }
    }
}

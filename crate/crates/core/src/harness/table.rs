use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{demonstration, plot, run_on_demo, ExperimentConfig, RunResult};
use crate::error::Result;
use crate::koopman::TrainSettings;
use crate::observables::MlpConfig;

/// Slack allowed when comparing medians for monotonicity.
const TREND_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridKind {
    /// Training continues until the reconstruction error reaches the grid value.
    ReconTarget,
    /// Hidden width of the observable network.
    HiddenWidth,
}

impl GridKind {
    fn column(&self) -> &'static str {
        match self {
            GridKind::ReconTarget => "l_c_target",
            GridKind::HiddenWidth => "n_h",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub grid_value: f64,
    /// `None` on median rows.
    pub seed: Option<u64>,
    pub omega_rescaled: Vec<f64>,
    pub weight_error: f64,
    pub traj_error: Option<f64>,
    pub l_c_max: f64,
    /// Whether training met the grid's reconstruction target (always true for
    /// the width grid). Unreached rows stay in the table but not in medians.
    pub reached: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendCheck {
    /// Grid points whose median row was reached and compared.
    pub points_compared: usize,
    pub weight_error_non_increasing: bool,
    /// Trajectory error falls (or stays) between every pair of consecutive
    /// points where the weight error does.
    pub traj_error_follows: bool,
    pub final_median_weight_error: Option<f64>,
    pub final_within_limit: bool,
    /// Every row's rescaled weights sum to the true weights' sum.
    pub sums_preserved: bool,
}

impl TrendCheck {
    pub const WEIGHT_ERROR_LIMIT: f64 = 0.6;

    pub fn passed(&self) -> bool {
        self.weight_error_non_increasing && self.traj_error_follows && self.final_within_limit && self.sums_preserved
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub kind: GridKind,
    pub rows: Vec<TableRow>,
    pub medians: Vec<TableRow>,
    /// Absent for a single-point grid.
    pub trend: Option<TrendCheck>,
}

fn row(grid_value: f64, run: &RunResult, target: Option<f64>) -> TableRow {
    let l_c_max = run.final_l_c_max();
    TableRow {
        grid_value,
        seed: Some(run.seed),
        omega_rescaled: run.estimate.omega_rescaled.clone(),
        weight_error: run.estimate.weight_error.unwrap_or(f64::NAN),
        traj_error: run.traj_error,
        l_c_max,
        reached: target.is_none_or(|t| l_c_max <= t),
    }
}

fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let k = values.len();
    Some(if k % 2 == 1 {
        values[k / 2]
    } else {
        0.5 * (values[k / 2 - 1] + values[k / 2])
    })
}

/// Median row of one grid point over its reached rows. The weights are those
/// of the lower-median seed by weight error, so they keep the truth's sum.
/// A run whose re-solve failed counts as an infinite trajectory error.
fn median_row(grid_value: f64, rows: &[&TableRow]) -> TableRow {
    let mut reached: Vec<&TableRow> = rows.iter().copied().filter(|r| r.reached).collect();
    if reached.is_empty() {
        return TableRow {
            grid_value,
            seed: None,
            omega_rescaled: Vec::new(),
            weight_error: f64::NAN,
            traj_error: None,
            l_c_max: median(&mut rows.iter().map(|r| r.l_c_max).collect::<Vec<_>>()).unwrap_or(f64::NAN),
            reached: false,
        };
    }
    reached.sort_by(|a, b| a.weight_error.total_cmp(&b.weight_error));
    let pick = reached[(reached.len() - 1) / 2];
    TableRow {
        grid_value,
        seed: None,
        omega_rescaled: pick.omega_rescaled.clone(),
        weight_error: median(&mut reached.iter().map(|r| r.weight_error).collect::<Vec<_>>()).unwrap_or(f64::NAN),
        traj_error: median(&mut reached.iter().map(|r| r.traj_error.unwrap_or(f64::INFINITY)).collect::<Vec<_>>())
            .filter(|v| v.is_finite()),
        l_c_max: median(&mut reached.iter().map(|r| r.l_c_max).collect::<Vec<_>>()).unwrap_or(f64::NAN),
        reached: true,
    }
}

fn trend(rows: &[TableRow], medians: &[TableRow], truth_sum: f64) -> Option<TrendCheck> {
    if medians.len() < 2 {
        return None;
    }
    let compared: Vec<&TableRow> = medians.iter().filter(|m| m.reached).collect();
    let mut weight_ok = true;
    let mut traj_ok = true;
    for pair in compared.windows(2) {
        let falls = pair[1].weight_error <= pair[0].weight_error + TREND_SLACK;
        weight_ok &= falls;
        if falls {
            traj_ok &= match (pair[0].traj_error, pair[1].traj_error) {
                (_, None) => pair[0].traj_error.is_none(),
                (None, Some(_)) => true,
                (Some(a), Some(b)) => b <= a + TREND_SLACK,
            };
        }
    }
    let final_median = medians.last().filter(|m| m.reached).map(|m| m.weight_error);
    let sums_preserved = rows
        .iter()
        .chain(medians.iter().filter(|m| m.reached))
        .all(|r| (r.omega_rescaled.iter().sum::<f64>() - truth_sum).abs() <= 1e-9);
    Some(TrendCheck {
        points_compared: compared.len(),
        weight_error_non_increasing: weight_ok && compared.len() == medians.len(),
        traj_error_follows: traj_ok,
        final_median_weight_error: final_median,
        final_within_limit: final_median.is_some_and(|e| e <= TrendCheck::WEIGHT_ERROR_LIMIT),
        sums_preserved,
    })
}

fn run_grid(
    cfg: &ExperimentConfig,
    kind: GridKind,
    points: Vec<(f64, MlpConfig, TrainSettings, Option<f64>)>,
) -> Result<Table> {
    cfg.validate()?;
    let demo = demonstration(cfg)?;
    let jobs: Vec<(usize, u64)> = (0..points.len())
        .flat_map(|p| cfg.seeds.iter().map(move |&s| (p, s)))
        .collect();
    let rows = jobs
        .par_iter()
        .map(|&(p, seed)| {
            let (value, obs, train, target) = &points[p];
            let run = run_on_demo(cfg, &demo.trajectory, obs, train, seed)?;
            log::info!(
                "{} {value:e} seed {seed}: weight error {:.4}, l_c_max {:.2e}, {:.1}s",
                kind.column(),
                run.estimate.weight_error.unwrap_or(f64::NAN),
                run.final_l_c_max(),
                run.wall_time_secs
            );
            Ok(row(*value, &run, *target))
        })
        .collect::<Result<Vec<_>>>()?;
    let medians: Vec<TableRow> = points
        .iter()
        .map(|(value, ..)| {
            let group: Vec<&TableRow> = rows.iter().filter(|r| r.grid_value == *value).collect();
            median_row(*value, &group)
        })
        .collect();
    let truth_sum = cfg.omega_true.iter().sum();
    Ok(Table {
        kind,
        trend: trend(&rows, &medians, truth_sum),
        rows,
        medians,
    })
}

/// Weight and trajectory errors across reconstruction-error targets.
pub fn run_table1(cfg: &ExperimentConfig) -> Result<Table> {
    let points = cfg
        .lc_grid
        .iter()
        .map(|&target| {
            let train = TrainSettings {
                max_steps: cfg.lc_budget,
                recon_target: Some(target),
                ..cfg.train
            };
            (target, cfg.observable.clone(), train, Some(target))
        })
        .collect();
    run_grid(cfg, GridKind::ReconTarget, points)
}

/// Weight and trajectory errors across hidden widths with a fixed budget.
pub fn run_table2(cfg: &ExperimentConfig) -> Result<Table> {
    let points = cfg
        .nh_grid
        .iter()
        .map(|&width| {
            let obs = MlpConfig {
                hidden: vec![width],
                ..cfg.observable.clone()
            };
            (width as f64, obs, cfg.train, None)
        })
        .collect();
    run_grid(cfg, GridKind::HiddenWidth, points)
}

impl Table {
    /// One line per grid point and seed, then one median line per grid point.
    pub fn to_csv(&self) -> Result<String> {
        let r = self
            .rows
            .iter()
            .chain(&self.medians)
            .map(|row| row.omega_rescaled.len())
            .max()
            .unwrap_or(0);
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["row".to_string(), self.kind.column().to_string(), "seed".to_string()];
        header.extend((1..=r).map(|i| format!("omega_{i}")));
        header.extend(["weight_error", "traj_error", "l_c_max", "reached"].map(String::from));
        w.write_record(&header)?;
        for (label, rows) in [("run", &self.rows), ("median", &self.medians)] {
            for row in rows {
                let mut rec = vec![
                    label.to_string(),
                    row.grid_value.to_string(),
                    row.seed.map_or(String::new(), |s| s.to_string()),
                ];
                rec.extend((0..r).map(|i| row.omega_rescaled.get(i).map_or(String::new(), |v| v.to_string())));
                rec.push(row.weight_error.to_string());
                rec.push(row.traj_error.map_or(String::new(), |v| v.to_string()));
                rec.push(row.l_c_max.to_string());
                rec.push(row.reached.to_string());
                w.write_record(&rec)?;
            }
        }
        let bytes = w.into_inner().map_err(|e| crate::error::Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Weight error and trajectory error against the grid value, per seed and median.
    pub fn plots(&self) -> [(String, String); 2] {
        let log_x = self.kind == GridKind::ReconTarget;
        let title = match self.kind {
            GridKind::ReconTarget => "reconstruction target",
            GridKind::HiddenWidth => "hidden width",
        };
        let make = |name: &str, get: &dyn Fn(&TableRow) -> Option<f64>| {
            let scatter = plot::Series {
                label: "runs".into(),
                points: self.rows.iter().filter_map(|r| get(r).map(|y| (r.grid_value, y))).collect(),
                line: false,
            };
            let med = plot::Series {
                label: "median".into(),
                points: self
                    .medians
                    .iter()
                    .filter(|r| r.reached)
                    .filter_map(|r| get(r).map(|y| (r.grid_value, y)))
                    .collect(),
                line: true,
            };
            plot::line_plot_svg(
                &format!("{name} vs {title}"),
                self.kind.column(),
                name,
                &[scatter, med],
                log_x,
            )
        };
        [
            ("weight_error".into(), make("weight error", &|r| Some(r.weight_error).filter(|v| v.is_finite()))),
            ("traj_error".into(), make("trajectory error", &|r| r.traj_error)),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(value: f64, seed: u64, err: f64, traj: f64) -> TableRow {
        TableRow {
            grid_value: value,
            seed: Some(seed),
            omega_rescaled: vec![2.0 + err, 1.0 - err, 1.0],
            weight_error: err,
            traj_error: Some(traj),
            l_c_max: 0.0,
            reached: true,
        }
    }

    #[test]
    fn median_row_keeps_sum() {
        let rows = [r(1.0, 0, 0.3, 1.0), r(1.0, 1, 0.1, 2.0), r(1.0, 2, 0.2, 3.0)];
        let m = median_row(1.0, &rows.iter().collect::<Vec<_>>());
        assert_eq!(m.weight_error, 0.2);
        assert_eq!(m.traj_error, Some(2.0));
        assert_eq!(m.omega_rescaled, rows[2].omega_rescaled);
        assert!((m.omega_rescaled.iter().sum::<f64>() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn unreached_rows_are_excluded() {
        let mut rows = [r(1.0, 0, 0.3, 1.0), r(1.0, 1, 0.1, 2.0)];
        rows[1].reached = false;
        let m = median_row(1.0, &rows.iter().collect::<Vec<_>>());
        assert_eq!(m.weight_error, 0.3);
        rows[0].reached = false;
        assert!(!median_row(1.0, &rows.iter().collect::<Vec<_>>()).reached);
    }

    #[test]
    fn trend_detection() {
        let rows = vec![r(1.0, 0, 0.5, 1.0), r(2.0, 0, 0.4, 0.5), r(3.0, 0, 0.2, 0.4)];
        let medians: Vec<_> = rows.iter().map(|x| median_row(x.grid_value, &[x])).collect();
        let t = trend(&rows, &medians, 4.0).unwrap();
        assert!(t.passed());
        let rising = vec![r(1.0, 0, 0.2, 1.0), r(2.0, 0, 0.4, 0.5)];
        let medians: Vec<_> = rising.iter().map(|x| median_row(x.grid_value, &[x])).collect();
        assert!(!trend(&rising, &medians, 4.0).unwrap().weight_error_non_increasing);
        assert!(trend(&rows[..1], &medians[..1], 4.0).is_none());
    }

    #[test]
    fn csv_has_run_and_median_rows() {
        let rows = vec![r(64.0, 0, 0.5, 1.0), r(64.0, 1, 0.4, 0.5)];
        let medians = vec![median_row(64.0, &rows.iter().collect::<Vec<_>>())];
        let table = Table {
            kind: GridKind::HiddenWidth,
            trend: None,
            rows,
            medians,
        };
        let text = table.to_csv().unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[0].starts_with("row,n_h,seed,omega_1"));
        assert!(lines[3].starts_with("median,64,,"));
        for (_, svg) in table.plots() {
            assert!(svg.starts_with("<svg"));
        }
    }
}

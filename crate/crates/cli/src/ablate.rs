//! Objective ablation grid: {JSD, DV} x {soft, hard} plus the IIC objective.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use clap::Args;
use infoseg::datasets::Split;
use infoseg::mi_objectives::{AssignmentMode, EstimatorKind};
use infoseg::trainer::{Objective, TrainConfig};
use infoseg::Error;
use serde::{Deserialize, Serialize};

use crate::{eval_to_dir, read_toml, train_run, DataArgs};

#[derive(Args)]
pub struct AblateArgs {
    /// TOML grid: `name`, `seeds`, `[base]` training config and `[[cells]]`.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    /// Train cells concurrently, one thread each.
    #[arg(long)]
    parallel: bool,
    #[arg(long)]
    max_steps: Option<u64>,
    /// Comma-separated seeds; overrides the config.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationCell {
    pub label: String,
    #[serde(default)]
    pub objective: Objective,
    #[serde(default)]
    pub estimator: EstimatorKind,
    #[serde(default)]
    pub assignment: AssignmentMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub name: String,
    pub seeds: Vec<u64>,
    pub base: TrainConfig,
    pub cells: Vec<AblationCell>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            name: "ablation".into(),
            seeds: vec![0],
            base: TrainConfig::default(),
            cells: default_cells(),
        }
    }
}

/// The five rows of the standard comparison, in its order.
pub fn default_cells() -> Vec<AblationCell> {
    let cell = |label: &str, objective, estimator, assignment| AblationCell {
        label: label.into(),
        objective,
        estimator,
        assignment,
    };
    use AssignmentMode::{Hard, Soft};
    use EstimatorKind::{Dv, Jsd};
    vec![
        cell("JSD, soft assignment", Objective::Infoseg, Jsd, Soft),
        cell("JSD, hard assignment", Objective::Infoseg, Jsd, Hard),
        cell("IIC objective", Objective::IicMi, Jsd, Soft),
        cell("DV, soft assignment", Objective::Infoseg, Dv, Soft),
        cell("DV, hard assignment", Objective::Infoseg, Dv, Hard),
    ]
}

fn slug(cell: &AblationCell) -> String {
    match cell.objective {
        Objective::IicMi => "iic".into(),
        Objective::Infoseg => format!("{}-{}", cell.estimator, cell.assignment).to_lowercase(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub runs: Vec<String>,
    pub pa: Vec<f64>,
    pub median_pa: f64,
    pub mean_miou: Option<f64>,
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

struct Job {
    cell: usize,
    config: TrainConfig,
}

fn run_job(run_root: &Path, data: &DataArgs, job: &Job) -> Result<(f64, Option<f64>)> {
    let (run_dir, ckpt) = train_run(run_root, &job.config, data, true, false, 0)?;
    let report = eval_to_dir(&ckpt, data, Split::Eval, &run_dir.join("eval"), false, false, 64)?;
    log::info!("{}: pixel accuracy {:.4}", job.config.name, report.metrics.pa);
    Ok((report.metrics.pa, report.metrics.miou))
}

pub fn run_grid(run_root: &Path, grid: &AblationConfig, data: &DataArgs, parallel: bool) -> Result<Vec<AblationRow>> {
    if grid.cells.is_empty() || grid.seeds.is_empty() {
        bail!(Error::Config(
            "ablation grid needs at least one cell and one seed".into()
        ));
    }
    let mut jobs = Vec::new();
    for (i, cell) in grid.cells.iter().enumerate() {
        for &seed in &grid.seeds {
            let config = TrainConfig {
                name: format!("{}-{}-s{seed}", grid.name, slug(cell)),
                objective: cell.objective,
                estimator: cell.estimator,
                assignment: cell.assignment,
                seed,
                ..grid.base.clone()
            };
            config.validate()?;
            jobs.push(Job { cell: i, config });
        }
    }
    let results: Vec<Result<(f64, Option<f64>)>> = if parallel {
        std::thread::scope(|scope| {
            let handles: Vec<_> = jobs
                .iter()
                .map(|job| scope.spawn(move || run_job(run_root, data, job)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| bail!("ablation worker panicked")))
                .collect()
        })
    } else {
        jobs.iter().map(|job| run_job(run_root, data, job)).collect()
    };

    let mut rows: Vec<AblationRow> = grid
        .cells
        .iter()
        .map(|c| AblationRow {
            label: c.label.clone(),
            runs: Vec::new(),
            pa: Vec::new(),
            median_pa: 0.0,
            mean_miou: None,
        })
        .collect();
    let mut mious: Vec<Vec<f64>> = vec![Vec::new(); rows.len()];
    for (job, result) in jobs.iter().zip(results) {
        let (pa, miou) = result?;
        let row = &mut rows[job.cell];
        row.runs.push(job.config.name.clone());
        row.pa.push(pa);
        mious[job.cell].extend(miou);
    }
    for (row, m) in rows.iter_mut().zip(mious) {
        row.median_pa = median(&row.pa);
        row.mean_miou = (!m.is_empty()).then(|| m.iter().sum::<f64>() / m.len() as f64);
    }
    Ok(rows)
}

pub fn to_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("method,median_pa,mean_miou,pa_per_seed\n");
    for r in rows {
        let per_seed: Vec<String> = r.pa.iter().map(|v| format!("{v:.4}")).collect();
        writeln!(
            out,
            "\"{}\",{:.4},{},{}",
            r.label,
            r.median_pa,
            r.mean_miou.map_or(String::new(), |v| format!("{v:.4}")),
            per_seed.join(";")
        )
        .expect("string write");
    }
    out
}

pub fn to_markdown(rows: &[AblationRow]) -> String {
    let mut out = String::from("| Method | PA (median) | mIoU (mean) | PA per seed |\n|---|---|---|---|\n");
    for r in rows {
        let per_seed: Vec<String> = r.pa.iter().map(|v| format!("{:.1}", 100.0 * v)).collect();
        writeln!(
            out,
            "| {} | {:.1} | {} | {} |",
            r.label,
            100.0 * r.median_pa,
            r.mean_miou.map_or("n/a".into(), |v| format!("{:.1}", 100.0 * v)),
            per_seed.join(", ")
        )
        .expect("string write");
    }
    out
}

pub fn cmd_ablate(run_root: &Path, args: &AblateArgs) -> Result<()> {
    let mut grid: AblationConfig = read_toml(args.config.as_deref())?;
    if let Some(steps) = args.max_steps {
        grid.base.max_steps = steps;
    }
    if let Some(seeds) = &args.seeds {
        grid.seeds = seeds.clone();
    }
    let rows = run_grid(run_root, &grid, &args.data, args.parallel)?;
    let out = run_root.join(&grid.name);
    fs::create_dir_all(&out)?;
    fs::write(out.join("ablation.csv"), to_csv(&rows))?;
    fs::write(out.join("ablation.md"), to_markdown(&rows))?;
    fs::write(out.join("ablation.json"), serde_json::to_string_pretty(&rows)?)?;
    print!("{}", to_markdown(&rows));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_has_five_distinct_cells() {
        let cells = default_cells();
        assert_eq!(cells.len(), 5);
        let mut slugs: Vec<String> = cells.iter().map(slug).collect();
        slugs.sort();
        slugs.dedup();
        assert_eq!(slugs.len(), 5);
    }

    #[test]
    fn grid_config_parses_from_toml() {
        let grid: AblationConfig = toml::from_str(
            r#"
            name = "small"
            seeds = [1, 2]
            [base]
            max_steps = 3
            [[cells]]
            label = "DV hard"
            estimator = "dv"
            assignment = "hard"
            "#,
        )
        .unwrap();
        assert_eq!(grid.seeds, vec![1, 2]);
        assert_eq!(grid.base.max_steps, 3);
        assert_eq!(grid.cells[0].estimator, EstimatorKind::Dv);
        assert_eq!(grid.cells[0].objective, Objective::Infoseg);
    }

    #[test]
    fn median_handles_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0]), 2.5);
    }

    #[test]
    fn tables_have_one_row_per_cell() {
        let rows = vec![AblationRow {
            label: "JSD, soft assignment".into(),
            runs: vec!["a".into()],
            pa: vec![0.5],
            median_pa: 0.5,
            mean_miou: None,
        }];
        assert_eq!(to_csv(&rows).lines().count(), 2);
        assert!(to_markdown(&rows).contains("| JSD, soft assignment | 50.0 | n/a | 50.0 |"));
    }
}

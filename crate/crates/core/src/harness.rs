//! Experiment plans over config overrides, seed aggregation, and the
//! read-only report (plots plus a text summary) over finished runs.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use plotters::prelude::*;

use crate::data::DatasetManifest;
use crate::error::{Error, Result};
use crate::evaluation::{self, EvalRecord};
use crate::trainer::{self, MetricRecord, RunConfig, TrainOptions};

pub const DEFAULT_SEEDS: [u64; 3] = [0, 1, 2];
pub const RESULTS_FILE: &str = "results.json";
pub const ABLATION_CSV: &str = "ablation.csv";
pub const ABLATION_TABLE: &str = "ablation.txt";
pub const BUILTIN_PLANS: [&str; 4] = ["finetune", "condition", "rank", "post_transform"];

#[derive(Debug, Clone, PartialEq)]
pub struct PlanCell {
    pub name: String,
    pub overrides: Vec<(String, String)>,
}

impl PlanCell {
    pub fn new(name: &str, overrides: &[(&str, &str)]) -> Self {
        Self {
            name: name.to_string(),
            overrides: overrides
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }
}

/// Named cells of config overrides on a shared base, run once per seed.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentPlan {
    pub name: String,
    pub base: RunConfig,
    pub cells: Vec<PlanCell>,
    pub seeds: Vec<u64>,
}

impl ExperimentPlan {
    /// The four ablation layouts, rows in their conventional order.
    pub fn builtin(name: &str, base: RunConfig) -> Result<Self> {
        let baseline = PlanCell::new("baseline", &[("lambda", "0")]);
        let cells = match name {
            "finetune" => std::iter::once(baseline)
                .chain(
                    ["frozen", "lora", "partial_1", "partial_2", "full", "scratch"]
                        .iter()
                        .map(|m| PlanCell::new(m, &[("denoiser.fine_tune", m)])),
                )
                .collect(),
            "condition" => vec![
                baseline,
                PlanCell::new("instance", &[("condition.scheme", "instance_wise")]),
                PlanCell::new("class", &[("condition.scheme", "class_wise")]),
                PlanCell::new("correlation", &[("condition.scheme", "correlation_aware")]),
            ],
            "rank" => ["8", "16", "32", "64"]
                .iter()
                .map(|r| PlanCell::new(&format!("r{r}"), &[("denoiser.fine_tune", "lora"), ("lora.rank", r)]))
                .collect(),
            "post_transform" => ["none", "silu", "batchnorm", "mlp"]
                .iter()
                .map(|t| PlanCell::new(t, &[("condition.post_transform", t)]))
                .collect(),
            other => {
                return Err(Error::Config(format!(
                    "unknown plan {other:?}; built-in plans are {}",
                    BUILTIN_PLANS.join(", ")
                )))
            }
        };
        Ok(Self {
            name: name.to_string(),
            base,
            cells,
            seeds: DEFAULT_SEEDS.to_vec(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.cells.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config(format!("plan {:?} has no cells or no seeds", self.name)));
        }
        let keys = RunConfig::keys();
        let mut names = BTreeSet::new();
        for cell in &self.cells {
            if !names.insert(cell.name.as_str()) {
                return Err(Error::Config(format!("duplicate cell name {:?}", cell.name)));
            }
            if let Some((k, _)) = cell.overrides.iter().find(|(k, _)| !keys.contains(&k.as_str())) {
                return Err(Error::Config(format!("cell {:?} overrides unknown key {k:?}", cell.name)));
            }
        }
        Ok(())
    }

    /// Base plus the cell's overrides plus the seed. Invalid combinations
    /// surface here and fail only their cell.
    pub fn cell_config(&self, cell: &PlanCell, seed: u64) -> Result<RunConfig> {
        let mut cfg = self.base.clone();
        for (k, v) in &cell.overrides {
            cfg.set(k, v)?;
        }
        cfg.seed = seed;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellOutcome {
    pub name: String,
    pub seed: u64,
    /// The evaluation record, or why the cell failed.
    pub result: std::result::Result<EvalRecord, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub plan: String,
    /// Cell names in plan order.
    pub order: Vec<String>,
    pub rows: Vec<CellOutcome>,
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

impl AblationTable {
    /// Median `(mAP, R1)` over the successful seeds of a cell.
    pub fn median_of(&self, cell: &str) -> Option<(f64, f64)> {
        let ok: Vec<&EvalRecord> = self
            .rows
            .iter()
            .filter(|r| r.name == cell)
            .filter_map(|r| r.result.as_ref().ok())
            .collect();
        Some((
            median(&ok.iter().map(|r| r.map).collect::<Vec<_>>())?,
            median(&ok.iter().map(|r| r.rank1()).collect::<Vec<_>>())?,
        ))
    }

    /// `name,seed,mAP,R1`; failed cells carry `NaN`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("name,seed,mAP,R1\n");
        for r in &self.rows {
            let (m, r1) = match &r.result {
                Ok(e) => (e.map.to_string(), e.rank1().to_string()),
                Err(_) => ("NaN".into(), "NaN".into()),
            };
            let _ = writeln!(out, "{},{},{m},{r1}", r.name, r.seed);
        }
        out
    }

    pub fn from_csv(plan: &str, text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("name,seed,mAP,R1") {
            return Err(Error::InvalidArgument("ablation csv lacks the name,seed,mAP,R1 header".into()));
        }
        let mut order: Vec<String> = Vec::new();
        let mut rows = Vec::new();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(Error::InvalidArgument(format!("bad ablation row {line:?}")));
            }
            let num = |s: &str| -> Result<f64> {
                s.parse().map_err(|_| Error::InvalidArgument(format!("bad number {s:?}")))
            };
            let seed = f[1].parse().map_err(|_| Error::InvalidArgument(format!("bad seed {:?}", f[1])))?;
            let (m, r1) = (num(f[2])?, num(f[3])?);
            let result = if m.is_nan() {
                Err("failed".to_string())
            } else {
                let mut cmc = BTreeMap::new();
                cmc.insert("1".to_string(), r1);
                Ok(EvalRecord {
                    source: String::new(),
                    target: String::new(),
                    map: m,
                    cmc,
                    num_queries: 0,
                    num_skipped: 0,
                })
            };
            if !order.iter().any(|n| n == f[0]) {
                order.push(f[0].to_string());
            }
            rows.push(CellOutcome {
                name: f[0].to_string(),
                seed,
                result,
            });
        }
        Ok(Self {
            plan: plan.to_string(),
            order,
            rows,
        })
    }

    /// Fixed-width table of per-cell medians, percentages to one decimal.
    pub fn render(&self) -> String {
        let width = self.order.iter().map(String::len).max().unwrap_or(4).max(8);
        let mut out = format!("{:<width$}  {:>6}  {:>6}  seeds\n", "method", "mAP", "R1");
        for name in &self.order {
            let seeds: Vec<&CellOutcome> = self.rows.iter().filter(|r| &r.name == name).collect();
            let ok = seeds.iter().filter(|r| r.result.is_ok()).count();
            match self.median_of(name) {
                Some((m, r1)) => {
                    let _ = writeln!(
                        out,
                        "{name:<width$}  {:>6.1}  {:>6.1}  {ok}/{}",
                        100.0 * m,
                        100.0 * r1,
                        seeds.len()
                    );
                }
                None => {
                    let reason = seeds
                        .iter()
                        .find_map(|r| r.result.as_ref().err())
                        .map_or("", String::as_str);
                    let _ = writeln!(out, "{name:<width$}  {:>6}  {:>6}  0/{}  {reason}", "failed", "failed", seeds.len());
                }
            }
        }
        out
    }
}

/// Where the query and gallery manifests of a domain live.
pub fn eval_manifests(cfg: &RunConfig, domain: &str) -> Result<(DatasetManifest, DatasetManifest)> {
    let dir = cfg.data_root.join(domain);
    Ok((
        crate::data::load_manifest(&dir.join("query.tsv"))?,
        crate::data::load_manifest(&dir.join("gallery.tsv"))?,
    ))
}

/// Trains and evaluates one run directory, reusing a finished one whose
/// config echo matches.
pub fn train_and_eval(cfg: &RunConfig, run_dir: &Path) -> Result<EvalRecord> {
    let results = run_dir.join(RESULTS_FILE);
    let echo = run_dir.join(trainer::CONFIG_ECHO);
    if results.exists() && fs::read_to_string(&echo).ok().as_deref() == Some(cfg.echo().as_str()) {
        return EvalRecord::read(&results);
    }
    let sources = trainer::load_source_manifests(cfg)?;
    trainer::run_training(cfg, &sources, run_dir, &TrainOptions::default())?;
    let (query, gallery) = eval_manifests(cfg, &cfg.target)?;
    let ckpt = trainer::checkpoint_path(run_dir, trainer::LAST_CHECKPOINT);
    let record = evaluation::cross_domain_eval(&ckpt, &query, &gallery)?;
    record.write(&results)?;
    Ok(record)
}

/// Runs every cell under every seed into `out_dir/<cell>/seed<k>`, then
/// writes the CSV and the rendered table. A failing cell is recorded as
/// such and the plan carries on.
pub fn run_plan(plan: &ExperimentPlan, out_dir: &Path) -> Result<AblationTable> {
    plan.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut rows = Vec::new();
    for cell in &plan.cells {
        for &seed in &plan.seeds {
            let run_dir = out_dir.join(&cell.name).join(format!("seed{seed}"));
            let result = plan
                .cell_config(cell, seed)
                .and_then(|cfg| train_and_eval(&cfg, &run_dir))
                .map_err(|e| e.to_string());
            match &result {
                Ok(r) => log::info!("{}/{} seed {seed}: mAP {:.4} R1 {:.4}", plan.name, cell.name, r.map, r.rank1()),
                Err(e) => log::warn!("{}/{} seed {seed} failed: {e}", plan.name, cell.name),
            }
            rows.push(CellOutcome {
                name: cell.name.clone(),
                seed,
                result,
            });
        }
    }
    let table = AblationTable {
        plan: plan.name.clone(),
        order: plan.cells.iter().map(|c| c.name.clone()).collect(),
        rows,
    };
    let csv = out_dir.join(ABLATION_CSV);
    fs::write(&csv, table.to_csv()).map_err(|e| Error::io(&csv, e))?;
    let txt = out_dir.join(ABLATION_TABLE);
    fs::write(&txt, table.render()).map_err(|e| Error::io(&txt, e))?;
    Ok(table)
}

/// Paths written by [`report`].
#[derive(Debug, Clone)]
pub struct ReportFiles {
    pub loss_plot: PathBuf,
    pub lr_plot: PathBuf,
    pub bar_plot: PathBuf,
    pub summary: PathBuf,
}

struct RunLog {
    label: String,
    records: Vec<MetricRecord>,
    eval: Option<EvalRecord>,
}

fn plot_err(e: impl std::fmt::Display) -> Error {
    Error::InvalidArgument(format!("plot rendering failed: {e}"))
}

fn line_plot(path: &Path, title: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> Result<()> {
    let root = SVGBackend::new(path, (900, 540)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let points = series.iter().flat_map(|(_, s)| s.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in points {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x0 > x1 {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    let pad = ((y1 - y0) * 0.05).max(y1.abs() * 1e-3).max(1e-12);
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(80)
        .build_cartesian_2d(x0..x1.max(x0 + 1.0), (y0 - pad)..(y1 + pad))
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("step")
        .y_desc(y_label)
        .y_label_formatter(&|v| format!("{v:.3e}"))
        .draw()
        .map_err(plot_err)?;
    for (i, (name, s)) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(s.iter().copied(), color.stroke_width(2)))
            .map_err(plot_err)?
            .label(name.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}

fn bar_plot(path: &Path, title: &str, y_label: &str, bars: &[(String, f64)]) -> Result<()> {
    let root = SVGBackend::new(path, (900, 540)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let top = bars.iter().map(|b| b.1).fold(0.0f64, f64::max).max(1e-9) * 1.15;
    let n = bars.len().max(1);
    let names: Vec<String> = bars.iter().map(|b| b.0.clone()).collect();
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(70)
        .build_cartesian_2d(0f64..n as f64, 0f64..top)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(n)
        .x_label_formatter(&|x| {
            let i = x.floor() as usize;
            if (x - i as f64 - 0.5).abs() < 1e-9 {
                names.get(i).cloned().unwrap_or_default()
            } else {
                String::new()
            }
        })
        .y_desc(y_label)
        .draw()
        .map_err(plot_err)?;
    chart
        .draw_series(bars.iter().enumerate().map(|(i, (_, v))| {
            Rectangle::new([(i as f64 + 0.15, 0.0), (i as f64 + 0.85, *v)], Palette99::pick(i).filled())
        }))
        .map_err(plot_err)?;
    for (i, (name, v)) in bars.iter().enumerate() {
        root.draw(&Text::new(
            format!("{name}: {v:.3}"),
            (100 + (i as i32 % 4) * 200, 40 + (i as i32 / 4) * 16),
            ("sans-serif", 13),
        ))
        .map_err(plot_err)?;
    }
    root.present().map_err(plot_err)
}

fn load_run(dir: &Path) -> Result<RunLog> {
    let log = dir.join(trainer::METRICS_LOG);
    if !log.exists() {
        return Err(Error::InvalidArgument(format!("{} has no metric log", dir.display())));
    }
    let records = trainer::read_metrics(&log)?;
    let results = dir.join(RESULTS_FILE);
    let eval = if results.exists() { Some(EvalRecord::read(&results)?) } else { None };
    let label = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());
    Ok(RunLog { label, records, eval })
}

/// Collects run directories: each argument is either a run (has a metric
/// log) or a plan directory whose `<cell>/seed<k>` children are runs.
fn discover(dirs: &[PathBuf]) -> Result<(Vec<(PathBuf, String)>, Vec<AblationTable>)> {
    let mut runs = Vec::new();
    let mut tables = Vec::new();
    for dir in dirs {
        if dir.join(trainer::METRICS_LOG).exists() {
            runs.push((dir.clone(), dir.file_name().map_or(String::new(), |s| s.to_string_lossy().into_owned())));
            continue;
        }
        let csv = dir.join(ABLATION_CSV);
        if !csv.exists() {
            return Err(Error::InvalidArgument(format!(
                "{} holds neither a metric log nor an ablation table",
                dir.display()
            )));
        }
        let text = fs::read_to_string(&csv).map_err(|e| Error::io(&csv, e))?;
        let plan = dir.file_name().map_or(String::new(), |s| s.to_string_lossy().into_owned());
        let table = AblationTable::from_csv(&plan, &text)?;
        for name in &table.order {
            for row in table.rows.iter().filter(|r| &r.name == name) {
                let run = dir.join(name).join(format!("seed{}", row.seed));
                if run.join(trainer::METRICS_LOG).exists() {
                    runs.push((run, format!("{name}/seed{}", row.seed)));
                }
            }
        }
        tables.push(table);
    }
    Ok((runs, tables))
}

/// Loss curves, the learning-rate schedule, and a bar chart (ablation
/// medians when plan directories are given, per-run mAP otherwise) as SVG,
/// plus `summary.txt`. Reads its inputs only.
pub fn report(run_dirs: &[PathBuf], out_dir: &Path) -> Result<ReportFiles> {
    if run_dirs.is_empty() {
        return Err(Error::InvalidArgument("report needs at least one run directory".into()));
    }
    let (found, tables) = discover(run_dirs)?;
    let mut runs = Vec::new();
    for (dir, label) in &found {
        let mut run = load_run(dir)?;
        run.label = label.clone();
        runs.push(run);
    }
    if runs.is_empty() {
        return Err(Error::InvalidArgument("no metric logs found".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let files = ReportFiles {
        loss_plot: out_dir.join("loss.svg"),
        lr_plot: out_dir.join("lr.svg"),
        bar_plot: out_dir.join("ablation.svg"),
        summary: out_dir.join("summary.txt"),
    };

    let mut loss_series = Vec::new();
    for run in &runs {
        let curve = |f: fn(&MetricRecord) -> f64| run.records.iter().map(|r| (r.step as f64, f(r))).collect::<Vec<_>>();
        if runs.len() == 1 {
            loss_series.push(("L_id".to_string(), curve(|r| r.losses.id)));
            loss_series.push(("L_pcl".to_string(), curve(|r| r.losses.pcl)));
            loss_series.push(("L_dif".to_string(), curve(|r| r.losses.dif)));
        }
        loss_series.push((format!("{} L_total", run.label), curve(|r| r.losses.total)));
    }
    line_plot(&files.loss_plot, "training losses", "loss", &loss_series)?;
    // Runs of one schedule share their lr curve; plotting the first keeps the shape readable.
    let lr: Vec<(f64, f64)> = runs[0].records.iter().map(|r| (r.step as f64, r.lr)).collect();
    line_plot(&files.lr_plot, "learning rate", "lr", &[(runs[0].label.clone(), lr)])?;

    let bars: Vec<(String, f64)> = if tables.is_empty() {
        runs.iter().filter_map(|r| r.eval.as_ref().map(|e| (r.label.clone(), e.map))).collect()
    } else {
        tables
            .iter()
            .flat_map(|t| {
                t.order
                    .iter()
                    .map(move |n| (format!("{}:{n}", t.plan), t.median_of(n).map_or(0.0, |m| m.0)))
            })
            .collect()
    };
    let (bars, title) = if bars.is_empty() {
        let fallback = runs
            .iter()
            .filter_map(|r| r.records.last().map(|l| (r.label.clone(), l.losses.total)))
            .collect();
        (fallback, "final total loss (no evaluation results)")
    } else {
        (bars, "median mAP")
    };
    bar_plot(&files.bar_plot, title, if title == "median mAP" { "mAP" } else { "loss" }, &bars)?;

    let mut summary = String::new();
    for run in &runs {
        let _ = writeln!(summary, "run {}", run.label);
        let epochs = run.records.last().map_or(0, |r| r.epoch + 1);
        let _ = writeln!(summary, "  epochs {epochs}, steps {}", run.records.len());
        if let (Some(first), Some(last)) = (run.records.first(), run.records.last()) {
            let _ = writeln!(
                summary,
                "  L_total {:.4} -> {:.4} (L_id {:.4}, L_pcl {:.4}, L_dif {:.4})",
                first.losses.total, last.losses.total, last.losses.id, last.losses.pcl, last.losses.dif
            );
            let (lo, hi) = run
                .records
                .iter()
                .fold((f64::MAX, f64::MIN), |(a, b), r| (a.min(r.lr), b.max(r.lr)));
            let _ = writeln!(summary, "  lr range {lo:e} .. {hi:e}");
        }
        if let Some(e) = &run.eval {
            let _ = writeln!(
                summary,
                "  {} -> {}: mAP {:.4}, R1 {:.4}",
                e.source,
                e.target,
                e.map,
                e.rank1()
            );
        }
    }
    for t in &tables {
        let _ = writeln!(summary, "\nplan {}\n{}", t.plan, t.render());
    }
    fs::write(&files.summary, summary).map_err(|e| Error::io(&files.summary, e))?;
    Ok(files)
}

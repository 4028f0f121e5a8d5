use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use chem_emu_core::kinetics::{
    build_dataset, read_dataset, write_dataset, ChemDataset, Environment, Mechanism, NormMeta, Split, ENV_NAMES,
};
use chem_emu_core::objective::{error_stats, metrics, ErrorStats, Metrics};
use chem_emu_core::train::{
    evaluate, load_checkpoint, predict_dataset, run_grid, Checkpoint, Grid, RunOptions, Trainer,
};
use chem_emu_core::{time_grid, worker_threads, Error, Result, RunConfig, Tensor};

use crate::svg::{self, Panel, Series, Style};

pub fn split_file(dir: &Path, split: Split) -> PathBuf {
    dir.join(format!("{}.cnne", split.name()))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn echo_config(dir: &Path, command: &str, cfg: &RunConfig) -> Result<()> {
    write(&dir.join(format!("{command}.config")), cfg.to_text())
}

fn load_mechanism(spec: &str) -> Result<Mechanism> {
    if spec == "demo" {
        return Ok(Mechanism::demo());
    }
    Mechanism::parse(&read_text(Path::new(spec))?).map_err(|e| match e {
        Error::Parse { line, msg } => Error::Parse {
            line,
            msg: format!("{spec}: {msg}"),
        },
        other => other,
    })
}

#[derive(Serialize)]
struct Manifest {
    task: u8,
    seed: u64,
    n_grid: usize,
    n_failed: usize,
    counts: BTreeMap<&'static str, usize>,
    files: BTreeMap<&'static str, String>,
    norm_meta: serde_json::Value,
    failures: Vec<chem_emu_core::kinetics::SampleFailure>,
}

pub fn generate(cfg: &RunConfig, out: &Path) -> Result<()> {
    let mech = load_mechanism(&cfg.data.mechanism)?;
    if !(0.0..=1.0).contains(&cfg.data.max_failure_fraction) {
        return Err(Error::Config("data.max_failure_fraction must lie in [0, 1]".into()));
    }
    let threads = worker_threads();
    eprintln!(
        "simulating {} samples on {threads} thread(s)",
        cfg.data.plan.n_samples()
    );
    let build = build_dataset(
        &mech,
        &cfg.data.plan,
        &cfg.task_spec(),
        cfg.data.seed,
        &cfg.integrator(),
        threads,
    )?;
    let failed = build.failures.len();
    if failed as f64 > cfg.data.max_failure_fraction * build.n_grid as f64 {
        for f in &build.failures {
            eprintln!("sample {}: {}", f.sample, f.msg);
        }
        return Err(Error::Integration {
            sample: build.failures.first().map(|f| f.sample),
            msg: format!(
                "{failed} of {} samples failed, above the allowed fraction {}",
                build.n_grid, cfg.data.max_failure_fraction
            ),
        });
    }
    create_dir(out)?;
    let mut counts = BTreeMap::new();
    let mut files = BTreeMap::new();
    for split in Split::ALL {
        let path = split_file(out, split);
        write_dataset(build.split(split), &path)?;
        counts.insert(split.name(), build.split(split).len());
        files.insert(split.name(), path.file_name().unwrap().to_string_lossy().into_owned());
    }
    let mut norm_meta = serde_json::to_value(&build.train.meta)?;
    if let Some(obj) = norm_meta.as_object_mut() {
        obj.remove("split");
        obj.remove("sample_ids");
    }
    let manifest = Manifest {
        task: cfg.data.task.number(),
        seed: cfg.data.seed,
        n_grid: build.n_grid,
        n_failed: failed,
        counts,
        files,
        norm_meta,
        failures: build.failures.clone(),
    };
    write(&out.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    echo_config(out, "generate", cfg)?;
    println!(
        "wrote {} train, {} val, {} test samples to {} ({} failed)",
        build.train.len(),
        build.val.len(),
        build.test.len(),
        out.display(),
        failed
    );
    println!(
        "inputs: {}\noutputs: {}",
        build.train.meta.input_species.join(" "),
        build.train.meta.output_species.join(" ")
    );
    Ok(())
}

fn load_split(data: &Path, split: Split) -> Result<ChemDataset> {
    let ds = read_dataset(&split_file(data, split))?;
    if ds.meta.split != split {
        return Err(Error::Config(format!(
            "{} holds the {} split",
            split_file(data, split).display(),
            ds.meta.split.name()
        )));
    }
    Ok(ds)
}

fn same_species(meta: &NormMeta, ds: &ChemDataset) -> Result<()> {
    if meta.input_species != ds.meta.input_species || meta.output_species != ds.meta.output_species {
        return Err(Error::Config(format!(
            "checkpoint species ({} -> {}) differ from the dataset ({} -> {})",
            meta.input_species.join(" "),
            meta.output_species.join(" "),
            ds.meta.input_species.join(" "),
            ds.meta.output_species.join(" ")
        )));
    }
    Ok(())
}

fn metrics_line(m: &Metrics) -> String {
    format!("rmse {:.6}  mae {:.6}  mbe {:+.6}", m.rmse, m.mae, m.mbe)
}

/// `iters` (when set) extends or shortens a resumed schedule.
pub fn train(cfg: &RunConfig, data: &Path, out: &Path, resume: Option<(&Path, Option<usize>)>) -> Result<()> {
    let train = load_split(data, Split::Train)?;
    let val = load_split(data, Split::Val)?;
    let mut trainer = match resume {
        Some((path, iters)) => {
            let ck = load_checkpoint(path)?;
            if let Some(meta) = &ck.norm_meta {
                same_species(meta, &train)?;
            }
            let mut t = Trainer::from_checkpoint(ck)?;
            if let Some(n) = iters {
                t.config.schedule.iters = n;
            }
            t.config.validate()?;
            t.config.check_dataset(&train)?;
            eprintln!("resuming at iteration {}", t.iteration);
            t
        }
        None => Trainer::new(cfg.train_config(&train)?, Some(train.meta.clone()))?,
    };
    let mut resolved = cfg.clone();
    resolved.model = trainer.config.model.clone();
    resolved.loss = trainer.config.loss;
    resolved.schedule = trainer.config.schedule.clone();
    create_dir(out)?;
    echo_config(out, "train", &resolved)?;
    let opts = RunOptions {
        out_dir: Some(out.to_path_buf()),
        stop_at: None,
        verbose: true,
    };
    trainer.run(&train, Some(&val), &opts)?;
    let last = evaluate(&trainer.model, &val)?;
    #[derive(Serialize)]
    struct Summary {
        iterations: usize,
        final_val: Metrics,
        best_val_rmse: Option<f64>,
    }
    let summary = Summary {
        iterations: trainer.iteration,
        final_val: last,
        best_val_rmse: trainer.best_rmse,
    };
    write(&out.join("metrics.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    println!("final val {}", metrics_line(&last));
    if let Some(b) = trainer.best_rmse {
        println!("best val rmse {b:.6}");
    }
    Ok(())
}

fn load_model_checkpoint(path: &Path) -> Result<(Checkpoint, chem_emu_core::ChemNNEModel)> {
    let ck = load_checkpoint(path)?;
    let model = ck.model()?;
    Ok((ck, model))
}

/// Everything `eval` writes, computed from predictions.
pub struct EvalReport {
    pub metrics: Metrics,
    pub stats: ErrorStats,
    /// `(species index, rmse)`, worst first.
    pub worst: Vec<(usize, f64)>,
}

pub fn eval_report(pred: &Tensor, truth: &Tensor, worst_k: usize) -> Result<EvalReport> {
    let stats = error_stats(pred, truth, false)?;
    Ok(EvalReport {
        metrics: metrics(pred, truth)?,
        worst: stats.worst_species(worst_k),
        stats,
    })
}

pub const TRAJECTORY_CSV_HEADER: &str = "sample_id,t_minutes,species,truth,pred";

fn trajectory_csv(ds: &ChemDataset, pred: &Tensor) -> String {
    let meta = &ds.meta;
    let mut out = String::from(TRAJECTORY_CSV_HEADER);
    out.push('\n');
    for (i, id) in meta.sample_ids.iter().enumerate() {
        for (t, minutes) in meta.time_minutes.iter().enumerate() {
            for (j, name) in meta.output_species.iter().enumerate() {
                out.push_str(&format!(
                    "{id},{minutes},{name},{:e},{:e}\n",
                    meta.denormalize_conc(ds.traj.at(&[i, t, j])),
                    meta.denormalize_conc(pred.at(&[i, t, j]))
                ));
            }
        }
    }
    out
}

pub fn eval(cfg: &RunConfig, checkpoint: &Path, data: &Path, split: Split, out: &Path) -> Result<()> {
    let (ck, model) = load_model_checkpoint(checkpoint)?;
    let ds = load_split(data, split)?;
    let m = &model.config;
    if [m.n_in, m.n_env, m.n_out, m.n_steps] != [ds.n_in(), ds.n_env(), ds.n_out(), ds.n_steps()] {
        return Err(Error::Config(format!(
            "checkpoint model expects n_in, n_env, n_out, n_steps = {:?}, dataset has {:?}",
            [m.n_in, m.n_env, m.n_out, m.n_steps],
            [ds.n_in(), ds.n_env(), ds.n_out(), ds.n_steps()]
        )));
    }
    if let Some(meta) = &ck.norm_meta {
        same_species(meta, &ds)?;
    }
    if ds.is_empty() {
        return Err(Error::Config(format!("the {} split is empty", split.name())));
    }
    let pred = predict_dataset(&model, &ds)?;
    let report = eval_report(&pred, &ds.traj, cfg.report.worst_k)?;
    let s = split.name();
    create_dir(out)?;
    write(&out.join(format!("metrics_{s}.json")), serde_json::to_string_pretty(&report.metrics)? + "\n")?;
    write(
        &out.join(format!("error_stats_{s}.csv")),
        report.stats.to_csv(&ds.meta.output_species),
    )?;
    let mut worst = String::from("rank,species_index,species,rmse\n");
    for (rank, (j, r)) in report.worst.iter().enumerate() {
        worst.push_str(&format!("{},{j},{},{r}\n", rank + 1, ds.meta.output_species[*j]));
    }
    write(&out.join(format!("worst_species_{s}.csv")), &worst)?;
    write(&out.join(format!("trajectories_{s}.csv")), trajectory_csv(&ds, &pred))?;
    echo_config(out, "eval", cfg)?;
    println!("{s} ({} samples) {}", ds.len(), metrics_line(&report.metrics));
    println!("worst species by rmse:");
    for (rank, (j, r)) in report.worst.iter().enumerate() {
        println!("  {:>2}. {:<10} {r:.6}", rank + 1, ds.meta.output_species[*j]);
    }
    Ok(())
}

pub fn ablate(cfg: &RunConfig, data: &Path, grid: Grid, out: &Path) -> Result<()> {
    let train = load_split(data, Split::Train)?;
    let val = load_split(data, Split::Val)?;
    let base = cfg.train_config(&train)?;
    let rows = grid.rows(&base);
    let threads = worker_threads();
    eprintln!("training {} configurations on {threads} thread(s)", rows.len());
    let results = run_grid(&rows, &train, &val, threads)?;
    create_dir(out)?;
    echo_config(out, "ablate", cfg)?;
    let name = match grid {
        Grid::Components => "components",
        Grid::Losses => "losses",
    };
    let mut csv = String::from("rank,name,val_rmse,val_mae,val_mbe,params,macs,final_loss\n");
    println!("{:<4} {:<22} {:>10} {:>10} {:>10} {:>9} {:>12}", "rank", "config", "rmse", "mae", "mbe", "params", "macs");
    for r in &results {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.rank, r.name, r.val.rmse, r.val.mae, r.val.mbe, r.params, r.macs, r.final_loss
        ));
        println!(
            "{:<4} {:<22} {:>10.6} {:>10.6} {:>+10.6} {:>9} {:>12}",
            r.rank, r.name, r.val.rmse, r.val.mae, r.val.mbe, r.params, r.macs
        );
    }
    write(&out.join(format!("ablation_{name}.csv")), csv)
}

fn csv_error(path: &Path, line: u64, row: usize, msg: impl std::fmt::Display) -> Error {
    Error::Parse {
        line: line as usize,
        msg: format!("{}: row {row}: {msg}", path.display()),
    }
}

/// Read a numeric CSV whose header must hold exactly `columns` in any
/// order. Returns rows in `columns` order.
pub fn read_table(path: &Path, columns: &[String]) -> Result<Vec<Vec<f64>>> {
    let text = read_text(path)?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let header = rdr
        .headers()
        .map_err(|e| csv_error(path, 1, 0, e))?
        .clone();
    let mut order = Vec::with_capacity(columns.len());
    for c in columns {
        match header.iter().position(|h| h == c) {
            Some(k) => order.push(k),
            None => return Err(csv_error(path, 1, 0, format!("missing column {c:?}"))),
        }
    }
    if header.len() != columns.len() {
        let extra: Vec<&str> = header.iter().filter(|h| !columns.iter().any(|c| c == h)).collect();
        return Err(csv_error(path, 1, 0, format!("unexpected columns {extra:?}")));
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(row as u64 + 1, |p| p.line());
            csv_error(path, line, row, e)
        })?;
        let line = rec.position().map_or(row as u64 + 1, |p| p.line());
        let mut vals = Vec::with_capacity(columns.len());
        for (&k, name) in order.iter().zip(columns) {
            let field = rec.get(k).unwrap_or("");
            let v: f64 = field
                .parse()
                .map_err(|_| csv_error(path, line, row, format!("{name}: cannot read {field:?} as a number")))?;
            if !v.is_finite() {
                return Err(csv_error(path, line, row, format!("{name} is not finite")));
            }
            vals.push(v);
        }
        rows.push(vals);
    }
    if rows.is_empty() {
        return Err(csv_error(path, 1, 0, "no data rows"));
    }
    Ok(rows)
}

/// Physical-unit trajectories `[n][T][n_out]` for physical inputs.
pub fn predict_physical(
    model: &chem_emu_core::ChemNNEModel,
    meta: &NormMeta,
    x0: &[Vec<f64>],
    env: &[Vec<f64>],
) -> Result<Vec<Vec<Vec<f64>>>> {
    let n = x0.len();
    let mut xs = Vec::with_capacity(n * meta.input_species.len());
    let mut ks = Vec::with_capacity(n * 3);
    for (row, e) in x0.iter().zip(env) {
        xs.extend(row.iter().map(|&c| meta.normalize_conc(c) as f32 as f64));
        ks.extend(e.iter().enumerate().map(|(ch, &v)| meta.normalize_env(ch, v) as f32 as f64));
    }
    let steps = meta.time_minutes.len();
    let pred = model.predict(
        &Tensor::new(&[n, meta.input_species.len()], xs)?,
        &Tensor::new(&[n, 3], ks)?,
        &time_grid(steps),
    )?;
    let n_out = meta.output_species.len();
    Ok((0..n)
        .map(|i| {
            (0..steps)
                .map(|t| (0..n_out).map(|j| meta.denormalize_conc(pred.at(&[i, t, j]))).collect())
                .collect()
        })
        .collect())
}

pub fn predict(checkpoint: &Path, x0_csv: &Path, env_csv: &Path, out: &Path) -> Result<()> {
    let (ck, model) = load_model_checkpoint(checkpoint)?;
    let meta = ck
        .norm_meta
        .ok_or_else(|| Error::Config(format!("{} has no normalization metadata", checkpoint.display())))?;
    let x0 = read_table(x0_csv, &meta.input_species)?;
    for (i, row) in x0.iter().enumerate() {
        if let Some(k) = row.iter().position(|&c| c < 0.0) {
            return Err(csv_error(
                x0_csv,
                i as u64 + 2,
                i + 1,
                format!("{} is negative", meta.input_species[k]),
            ));
        }
    }
    let env_names: Vec<String> = ENV_NAMES.iter().map(|s| s.to_string()).collect();
    let env = read_table(env_csv, &env_names)?;
    for (i, row) in env.iter().enumerate() {
        Environment::from_array([row[0], row[1], row[2]])
            .validate()
            .map_err(|e| csv_error(env_csv, i as u64 + 2, i + 1, e))?;
    }
    if x0.len() != env.len() {
        return Err(Error::Config(format!(
            "{} has {} rows but {} has {}",
            x0_csv.display(),
            x0.len(),
            env_csv.display(),
            env.len()
        )));
    }
    let traj = predict_physical(&model, &meta, &x0, &env)?;
    let mut csv = format!("t_minutes,{}\n", meta.output_species.join(","));
    for sample in &traj {
        for (minutes, row) in meta.time_minutes.iter().zip(sample) {
            let vals: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
            csv.push_str(&format!("{minutes},{}\n", vals.join(",")));
        }
    }
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write(out, csv)?;
    println!("wrote {} rows for {} sample(s) to {}", traj.len() * meta.time_minutes.len(), traj.len(), out.display());
    Ok(())
}

#[derive(Deserialize)]
struct HistoryRecord {
    iter: usize,
    loss_total: f64,
    val_rmse: Option<f64>,
}

#[derive(Deserialize)]
struct StatsRecord {
    species_name: String,
    t_index: usize,
    mean_err: f64,
    var_err: f64,
}

#[derive(Deserialize)]
struct TrajectoryRecord {
    sample_id: usize,
    t_minutes: f64,
    species: String,
    truth: f64,
    pred: f64,
}

fn read_records<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = read_text(path)?;
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    rdr.deserialize()
        .enumerate()
        .map(|(i, r)| {
            r.map_err(|e| {
                let line = e.position().map_or(i as u64 + 2, |p| p.line());
                csv_error(path, line, i + 1, e)
            })
        })
        .collect()
}

fn loss_figure(rows: &[HistoryRecord]) -> String {
    let mut panels = vec![Panel {
        title: "training loss (interval mean)".into(),
        series: vec![Series {
            label: "loss_total".into(),
            style: Style::Line(0),
            points: rows.iter().map(|r| (r.iter as f64, r.loss_total)).collect(),
        }],
        log_y: true,
    }];
    let val: Vec<(f64, f64)> = rows.iter().filter_map(|r| r.val_rmse.map(|v| (r.iter as f64, v))).collect();
    if !val.is_empty() {
        panels.push(Panel {
            title: "validation RMSE".into(),
            series: vec![Series {
                label: "val_rmse".into(),
                style: Style::Line(1),
                points: val,
            }],
            log_y: true,
        });
    }
    svg::panel_figure("Training history", &panels, &[("loss", Style::Line(0)), ("val RMSE", Style::Line(1))])
}

fn heatmaps(split: &str, rows: &[StatsRecord]) -> Result<[String; 2]> {
    let mut species: Vec<String> = Vec::new();
    let steps = rows.iter().map(|r| r.t_index).max().unwrap_or(0);
    for r in rows {
        if !species.contains(&r.species_name) {
            species.push(r.species_name.clone());
        }
    }
    if steps == 0 || rows.len() != species.len() * steps {
        return Err(Error::Config(format!("error statistics for {split} do not form a species x step grid")));
    }
    let mut mean = vec![f64::NAN; rows.len()];
    let mut var = vec![f64::NAN; rows.len()];
    for r in rows {
        let s = species.iter().position(|n| n == &r.species_name).expect("collected");
        if r.t_index == 0 {
            return Err(Error::Config("error statistics use 1-based t_index".into()));
        }
        mean[s * steps + r.t_index - 1] = r.mean_err;
        var[s * steps + r.t_index - 1] = r.var_err;
    }
    let cols: Vec<String> = (1..=steps).map(|t| format!("t{t}")).collect();
    Ok([
        svg::heatmap(&format!("Mean error ({split})"), &species, &cols, &mean),
        svg::heatmap(&format!("Error variance ({split})"), &species, &cols, &var),
    ])
}

/// One figure per sample with a panel per species.
fn trajectory_figures(
    split: &str,
    rows: &[TrajectoryRecord],
    species: &[String],
    samples: usize,
) -> Result<Vec<(usize, String)>> {
    let mut ids: Vec<usize> = Vec::new();
    let mut all_species: Vec<String> = Vec::new();
    for r in rows {
        if !ids.contains(&r.sample_id) {
            ids.push(r.sample_id);
        }
        if !all_species.contains(&r.species) {
            all_species.push(r.species.clone());
        }
    }
    let wanted: Vec<String> = if species.is_empty() { all_species.clone() } else { species.to_vec() };
    if let Some(missing) = wanted.iter().find(|s| !all_species.contains(s)) {
        return Err(Error::Config(format!(
            "report.species names {missing:?}, which is not among the {split} outputs"
        )));
    }
    let mut figures = Vec::new();
    for &id in ids.iter().take(samples) {
        let panels: Vec<Panel> = wanted
            .iter()
            .map(|name| {
                let pick = |f: fn(&TrajectoryRecord) -> f64| -> Vec<(f64, f64)> {
                    rows.iter()
                        .filter(|r| r.sample_id == id && &r.species == name)
                        .map(|r| (r.t_minutes, f(r)))
                        .collect()
                };
                Panel {
                    title: name.clone(),
                    series: vec![
                        Series {
                            label: format!("{name} truth"),
                            style: Style::Truth,
                            points: pick(|r| r.truth),
                        },
                        Series {
                            label: format!("{name} prediction"),
                            style: Style::Line(0),
                            points: pick(|r| r.pred),
                        },
                    ],
                    log_y: true,
                }
            })
            .collect();
        figures.push((
            id,
            svg::panel_figure(
                &format!("Sample {id} ({split}), concentration vs minutes"),
                &panels,
                &[("truth", Style::Truth), ("prediction", Style::Line(0))],
            ),
        ));
    }
    Ok(figures)
}

pub fn report(cfg: &RunConfig, run_dir: &Path) -> Result<()> {
    let fig_dir = run_dir.join("figures");
    let mut written = Vec::new();
    let mut emit = |name: String, svg: String| -> Result<()> {
        create_dir(&fig_dir)?;
        let path = fig_dir.join(name);
        write(&path, svg)?;
        written.push(path);
        Ok(())
    };
    let history = run_dir.join("history.csv");
    if history.exists() {
        let rows: Vec<HistoryRecord> = read_records(&history)?;
        emit("loss_curve.svg".into(), loss_figure(&rows))?;
    }
    for split in Split::ALL.map(Split::name) {
        let stats = run_dir.join(format!("error_stats_{split}.csv"));
        if stats.exists() {
            let [mean, var] = heatmaps(split, &read_records(&stats)?)?;
            emit(format!("mean_error_{split}.svg"), mean)?;
            emit(format!("error_variance_{split}.svg"), var)?;
        }
        let traj = run_dir.join(format!("trajectories_{split}.csv"));
        if traj.exists() {
            let rows: Vec<TrajectoryRecord> = read_records(&traj)?;
            for (id, svg) in trajectory_figures(split, &rows, &cfg.report.species, cfg.report.samples)? {
                emit(format!("trajectories_{split}_sample{id}.svg"), svg)?;
            }
        }
    }
    if written.is_empty() {
        return Err(Error::Config(format!(
            "{} holds no history.csv, error_stats_<split>.csv or trajectories_<split>.csv",
            run_dir.display()
        )));
    }
    echo_config(&fig_dir, "report", cfg)?;
    for p in &written {
        println!("{}", p.display());
    }
    Ok(())
}

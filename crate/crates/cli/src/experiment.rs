//! Seeds, modes and output directories around the training engine.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use centershift_core::data::{blobs_task, load_csv, moons_task, CsvOptions, DomainDataset, DomainTag};
use centershift_core::evaluate::{final_eval, EvalProbe};
use centershift_core::pseudo::{PseudoState, SNAPSHOT_HEADER};
use centershift_core::report::{write_file, write_metrics_csv, write_refresh_csv, Checkpoint, Summary};
use centershift_core::trainer::{train, LogEval, Model, Observer, RunMetrics, TrainConfig};
use centershift_core::{Error, Result};
use rayon::prelude::*;

use crate::config::{DatasetSpec, ExperimentSpec};

pub const THREADS_ENV: &str = "CENTERSHIFT_THREADS";
pub const COMPARISON_HEADER: &str = "mode,runs,target_accuracy_mean,target_accuracy_std,a_distance_mean,a_distance_std,source_accuracy_mean,source_accuracy_std";

/// Exit status for an error: 2 for bad configuration or input data, 3 for
/// IO, 1 for anything else.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Input(_) => 2,
        Error::Io { .. } => 3,
        Error::Numeric(_) | Error::Json(_) => 1,
    }
}

/// Source and target for one seed. Synthetic data is regenerated from the
/// seed; CSV data is the same for every seed.
pub fn build_datasets(spec: &ExperimentSpec, seed: u64) -> Result<(DomainDataset, DomainDataset)> {
    match &spec.dataset {
        DatasetSpec::Blobs(b) => blobs_task(b, &spec.shift, seed),
        DatasetSpec::Moons { n_per_class, noise } => moons_task(*n_per_class, *noise, &spec.shift, seed),
        DatasetSpec::Csv {
            source,
            target,
            target_labels,
            header,
        } => {
            let s = load_csv(
                source,
                CsvOptions {
                    has_labels: true,
                    header: *header,
                    class_count: None,
                },
                DomainTag::Source,
            )?;
            let t = load_csv(
                target,
                CsvOptions {
                    has_labels: *target_labels,
                    header: *header,
                    class_count: Some(s.class_count()),
                },
                DomainTag::Target,
            )?;
            if s.input_dim() != t.input_dim() {
                return Err(Error::input(format!(
                    "source has {} feature columns but target has {}",
                    s.input_dim(),
                    t.input_dim()
                )));
            }
            Ok((s, t))
        }
    }
}

/// Errors unless `dir` is missing or empty; with `force` an existing
/// directory is reused and files in it are overwritten.
pub fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let mut entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        if entries.next().is_some() && !force {
            return Err(Error::config(format!(
                "output directory {} is not empty (use --force to overwrite)",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn seed_dir(root: &Path, seed: u64) -> PathBuf {
    root.join(format!("seed-{seed}"))
}

/// Evaluation probe plus periodic checkpoints and pseudo-label dumps.
struct ArtifactObserver<'a> {
    probe: EvalProbe<'a>,
    config: &'a TrainConfig,
    checkpoint_every: Option<usize>,
    dir: Option<&'a Path>,
    pseudo_dump: Option<Vec<u8>>,
}

impl Observer for ArtifactObserver<'_> {
    fn on_log(&mut self, iteration: usize, model: &Model, pseudo: &PseudoState) -> Result<LogEval> {
        self.probe.on_log(iteration, model, pseudo)
    }

    fn on_refresh(&mut self, iteration: usize, pseudo: &PseudoState) -> Result<Option<f64>> {
        if let Some(buf) = &mut self.pseudo_dump {
            pseudo
                .write_snapshot(iteration, buf)
                .map_err(|e| Error::io("pseudo_labels.csv", e))?;
        }
        self.probe.on_refresh(iteration, pseudo)
    }

    fn after_step(&mut self, iteration: usize, model: &Model) -> Result<()> {
        let done = iteration + 1;
        if let (Some(every), Some(dir)) = (self.checkpoint_every, self.dir) {
            if done.is_multiple_of(every) && done < self.config.iterations {
                let sub = dir.join("checkpoints");
                fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
                Checkpoint::new(model, self.config, done).write(&sub.join(format!("iter-{done}.json")))?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SeedOutcome {
    pub summary: Summary,
    pub metrics: RunMetrics,
}

/// Trains and evaluates one seed. With `dir`, writes `metrics.csv`,
/// `refreshes.csv`, `summary.json` and `checkpoint.json` there.
pub fn run_seed(spec: &ExperimentSpec, mode: &str, seed: u64, dir: Option<&Path>) -> Result<SeedOutcome> {
    let config = TrainConfig {
        mode: mode.to_string(),
        seed,
        ..spec.train.clone()
    };
    config.validate()?;
    let (source, target) = build_datasets(spec, seed)?;
    if let Some(d) = dir {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut observer = ArtifactObserver {
        probe: EvalProbe::new(&target),
        config: &config,
        checkpoint_every: spec.output.checkpoint_every,
        dir,
        pseudo_dump: spec.output.pseudo_dump.then(|| format!("{SNAPSHOT_HEADER}\n").into_bytes()),
    };
    let outcome = train(&config, &source, target.unlabeled(), &mut observer)?;
    let eval = final_eval(&outcome.model, &source, &target, seed)?;
    let summary = Summary::new(&config, &outcome.metrics, &eval, spec.dataset.describe());
    if let Some(d) = dir {
        write_file(&d.join("metrics.csv"), |b| write_metrics_csv(&outcome.metrics.rows, b))?;
        write_file(&d.join("refreshes.csv"), |b| write_refresh_csv(&outcome.metrics.refreshes, b))?;
        write_file(&d.join("summary.json"), |b| {
            serde_json::to_writer_pretty(&mut *b, &summary).map_err(std::io::Error::from)?;
            writeln!(b)
        })?;
        Checkpoint::new(&outcome.model, &config, config.iterations).write(&d.join("checkpoint.json"))?;
        if let Some(buf) = observer.pseudo_dump {
            let p = d.join("pseudo_labels.csv");
            fs::write(&p, buf).map_err(|e| Error::io(&p, e))?;
        }
    }
    Ok(SeedOutcome {
        summary,
        metrics: outcome.metrics,
    })
}

/// Worker count: the `CENTERSHIFT_THREADS` cap if set, else the number of
/// cores, and never more than `jobs`.
pub fn worker_count(jobs: usize) -> Result<usize> {
    let cap = match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::config(format!("{THREADS_ENV}='{v}' must be a positive integer")))?,
        Err(_) => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    Ok(cap.min(jobs).max(1))
}

/// Runs `jobs` on a bounded pool, keeping their order.
fn parallel<T: Send>(jobs: Vec<Box<dyn Fn() -> Result<T> + Send + Sync + '_>>) -> Result<Vec<T>> {
    let threads = worker_count(jobs.len())?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::config(format!("cannot start {threads} workers: {e}")))?;
    pool.install(|| jobs.par_iter().map(|j| j()).collect())
}

fn log_seed(o: &SeedOutcome) {
    let s = &o.summary;
    let acc = s
        .final_target_accuracy
        .map_or_else(|| "n/a".to_string(), |a| format!("{:.2}%", 100.0 * a));
    eprintln!(
        "[{} seed {}] target accuracy {acc}, A-distance {:.3}, {:.1} s",
        s.mode, s.seed, s.a_distance, s.wall_clock_secs
    );
}

/// Every seed of the configured mode, written under `out/seed-<n>/`.
pub fn run(spec: &ExperimentSpec, out: &Path, force: bool) -> Result<Vec<SeedOutcome>> {
    spec.validate()?;
    prepare_out_dir(out, force)?;
    let mode = spec.train.mode.as_str();
    let jobs = spec
        .seeds()
        .into_iter()
        .map(|seed| {
            let dir = seed_dir(out, seed);
            Box::new(move || {
                let o = run_seed(spec, mode, seed, Some(&dir))?;
                log_seed(&o);
                Ok(o)
            }) as Box<dyn Fn() -> Result<SeedOutcome> + Send + Sync>
        })
        .collect();
    parallel(jobs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single run.
    pub std: f64,
}

pub fn mean_std(xs: &[f64]) -> Option<MeanStd> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() > 1 {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Some(MeanStd { mean, std })
}

#[derive(Debug, Clone)]
pub struct ModeRow {
    pub mode: String,
    pub runs: Vec<SeedOutcome>,
    pub target_accuracy: Option<MeanStd>,
    pub a_distance: MeanStd,
    pub source_accuracy: MeanStd,
}

impl ModeRow {
    pub fn summarize(mode: &str, runs: Vec<SeedOutcome>) -> Self {
        let acc: Option<Vec<f64>> = runs.iter().map(|r| r.summary.final_target_accuracy).collect();
        let col = |f: fn(&Summary) -> f64| {
            mean_std(&runs.iter().map(|r| f(&r.summary)).collect::<Vec<_>>()).expect("at least one run")
        };
        Self {
            mode: mode.to_string(),
            target_accuracy: acc.as_deref().and_then(mean_std),
            a_distance: col(|s| s.a_distance),
            source_accuracy: col(|s| s.final_source_accuracy),
            runs,
        }
    }

    pub fn csv_row(&self) -> String {
        let pair = |m: Option<&MeanStd>| match m {
            Some(m) => format!("{:?},{:?}", m.mean, m.std),
            None => ",".to_string(),
        };
        format!(
            "{},{},{},{},{}",
            self.mode,
            self.runs.len(),
            pair(self.target_accuracy.as_ref()),
            pair(Some(&self.a_distance)),
            pair(Some(&self.source_accuracy))
        )
    }
}

/// Every mode on the same seeds and data. Runs go to
/// `out/<mode>/seed-<n>/`, the table to `out/comparison.csv`.
pub fn ablate(spec: &ExperimentSpec, modes: &[String], out: &Path, force: bool) -> Result<Vec<ModeRow>> {
    if modes.is_empty() {
        return Err(Error::config("no modes to compare"));
    }
    for (i, m) in modes.iter().enumerate() {
        if modes[..i].contains(m) {
            return Err(Error::config(format!("mode '{m}' is listed twice")));
        }
        TrainConfig {
            mode: m.clone(),
            ..spec.train.clone()
        }
        .validate()?;
    }
    spec.validate_data_and_output()?;
    prepare_out_dir(out, force)?;
    let seeds = spec.seeds();
    let mut jobs: Vec<Box<dyn Fn() -> Result<SeedOutcome> + Send + Sync>> = Vec::new();
    for mode in modes {
        for &seed in &seeds {
            let dir = seed_dir(&out.join(mode), seed);
            jobs.push(Box::new(move || {
                let o = run_seed(spec, mode, seed, Some(&dir))?;
                log_seed(&o);
                Ok(o)
            }));
        }
    }
    let mut results = parallel(jobs)?.into_iter();
    let rows: Vec<ModeRow> = modes
        .iter()
        .map(|m| ModeRow::summarize(m, results.by_ref().take(seeds.len()).collect()))
        .collect();
    write_file(&out.join("comparison.csv"), |b| {
        writeln!(b, "{COMPARISON_HEADER}")?;
        for r in &rows {
            writeln!(b, "{}", r.csv_row())?;
        }
        Ok(())
    })?;
    Ok(rows)
}

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nnmf::checkpoint;
use nnmf::data::{
    ingest_edge_list, ingest_movielens, read_canonical, split_indices, DataSplit, ObservationSet,
};
use nnmf::evaluation::{run_experiment, run_repeat, score, target_scaling, ExperimentReport};
use nnmf::model::Model;
use nnmf::optimizer::LambdaGrid;

use crate::config::{DataFormat, RunConfig};
use crate::error::{CliError, CliResult};

/// A loaded configuration and the directory all outputs go to.
#[derive(Debug, Clone)]
pub struct Context {
    pub config: RunConfig,
    pub out: PathBuf,
}

impl Context {
    /// Applies the `--seed` and `--out` overrides to `config`. An `--out`
    /// path is taken as given; `run.out` resolves against the config file.
    pub fn new(mut config: RunConfig, seed: Option<u64>, out: Option<PathBuf>) -> CliResult<Self> {
        if let Some(seed) = seed {
            config.run.seed = seed;
        }
        let out = match out {
            Some(out) => {
                config.run.out = out.clone();
                out
            }
            None => config.resolve(&config.run.out),
        };
        config.validate()?;
        Ok(Self { config, out })
    }

    fn ensure_out(&self, sub: Option<&str>) -> CliResult<PathBuf> {
        let dir = match sub {
            Some(s) => self.out.join(s),
            None => self.out.clone(),
        };
        fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        Ok(dir)
    }

    /// Writes `contents` to `path` and the config snapshot to
    /// `path.config.toml`.
    fn write_with_snapshot(&self, path: &Path, contents: &str) -> CliResult<()> {
        write(path, contents)?;
        let mut sidecar = path.as_os_str().to_owned();
        sidecar.push(".config.toml");
        write(Path::new(&sidecar), &self.config.snapshot())
    }

    pub fn load_data(&self) -> CliResult<ObservationSet> {
        let path = self.config.data_path();
        Ok(match self.config.data.format {
            DataFormat::Movielens => ingest_movielens(&path)?,
            DataFormat::Edges => ingest_edge_list(&path, false)?,
            DataFormat::EdgesSquare => ingest_edge_list(&path, true)?,
            DataFormat::Canonical => read_canonical(&path)?,
        })
    }

    pub fn split(&self, data: &ObservationSet, repeat: usize) -> CliResult<DataSplit> {
        let spec = self.config.split_spec()?;
        if repeat >= spec.n_repeats {
            return Err(CliError::Usage(format!(
                "repeat {repeat} out of range: run.repeats = {}",
                spec.n_repeats
            )));
        }
        Ok(DataSplit::from_indices(data, split_indices(data.len(), &spec, repeat)?)?)
    }
}

fn write(path: &Path, contents: &str) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

/// Writes the dataset in canonical form with the config snapshot as
/// comment lines.
pub fn cmd_ingest(ctx: &Context) -> CliResult<PathBuf> {
    let data = ctx.load_data()?;
    let path = ctx.ensure_out(None)?.join("data.tsv");
    data.write_canonical(&path, &[ctx.config.snapshot()])?;
    Ok(path)
}

/// One `index,partition` CSV per repeat, indices into the ingested
/// triple order.
pub fn cmd_split(ctx: &Context) -> CliResult<Vec<PathBuf>> {
    let data = ctx.load_data()?;
    let dir = ctx.ensure_out(Some("splits"))?;
    let spec = ctx.config.split_spec()?;
    let mut paths = Vec::new();
    for r in 0..spec.n_repeats {
        let idx = split_indices(data.len(), &spec, r)?;
        let mut rows: Vec<(usize, &str)> = idx
            .train
            .iter()
            .map(|&i| (i, "train"))
            .chain(idx.validation.iter().map(|&i| (i, "validation")))
            .chain(idx.test.iter().map(|&i| (i, "test")))
            .collect();
        rows.sort_unstable();
        let mut csv = String::from("index,partition\n");
        for (i, part) in rows {
            writeln!(csv, "{i},{part}").unwrap();
        }
        let path = dir.join(format!("repeat_{r}.csv"));
        ctx.write_with_snapshot(&path, &csv)?;
        paths.push(path);
    }
    Ok(paths)
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub lambda: f64,
    pub best_epoch: usize,
    pub validation_rmse: f64,
    pub test_rmse: f64,
    pub checkpoint: PathBuf,
    pub trace: PathBuf,
}

/// Trains on one repeat's split: at the fixed `train.lambda` if set,
/// otherwise with `lambda` selected over the grid. Writes `model.ckpt`,
/// `trace.csv` and `lambda_selection.csv`.
pub fn cmd_train(ctx: &Context, repeat: usize) -> CliResult<TrainSummary> {
    let cfg = &ctx.config;
    let mut exp = cfg.experiment()?;
    if let Some(lambda) = cfg.train.lambda {
        exp.grid = LambdaGrid::new(vec![lambda])?;
    }
    let data = ctx.load_data()?;
    let split = ctx.split(&data, repeat)?;
    let scaling = target_scaling(&exp, &data)?;
    let (outcome, selection) = run_repeat(&split, &exp, &exp.repeat_init(repeat), scaling)?;

    let dir = ctx.ensure_out(None)?;
    let ckpt = dir.join("model.ckpt");
    let meta = format!(
        "{}# repeat = {repeat}\n# lambda = {}\n",
        cfg.snapshot(),
        outcome.lambda
    );
    checkpoint::save(&selection.outcome.model, &meta, &ckpt)?;
    let trace = dir.join("trace.csv");
    ctx.write_with_snapshot(&trace, &selection.outcome.trace.to_csv())?;
    ctx.write_with_snapshot(&dir.join("lambda_selection.csv"), &selection.to_csv())?;
    Ok(TrainSummary {
        lambda: outcome.lambda,
        best_epoch: outcome.best_epoch,
        validation_rmse: outcome.validation_rmse,
        test_rmse: outcome.test_rmse,
        checkpoint: ckpt,
        trace,
    })
}

/// The full repeated hold-out protocol. Writes `repeats.csv` (test RMSE per
/// repeat) and `sweep.csv` (every grid point of every repeat).
pub fn cmd_sweep(ctx: &Context) -> CliResult<ExperimentReport> {
    let data = ctx.load_data()?;
    let exp = ctx.config.experiment()?;
    let mut report = run_experiment(&data, &exp)?;
    report.config_snapshot = ctx.config.snapshot();
    let dir = ctx.ensure_out(None)?;
    ctx.write_with_snapshot(&dir.join("repeats.csv"), &report.to_csv())?;
    ctx.write_with_snapshot(&dir.join("sweep.csv"), &report.sweep_csv())?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitName {
    Train,
    Validation,
    Test,
}

impl std::str::FromStr for SplitName {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "validation" => Ok(SplitName::Validation),
            "test" => Ok(SplitName::Test),
            other => Err(CliError::Usage(format!(
                "unknown split '{other}', expected train, validation or test"
            ))),
        }
    }
}

impl SplitName {
    fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Validation => "validation",
            SplitName::Test => "test",
        }
    }
}

/// RMSE of a checkpoint on one partition of one repeat's split, on the
/// native value scale. Appends a row to `evaluate.csv`.
pub fn cmd_evaluate(ctx: &Context, checkpoint_path: &Path, which: SplitName, repeat: usize) -> CliResult<f64> {
    let exp = ctx.config.experiment()?;
    let data = ctx.load_data()?;
    let ckpt = checkpoint::load_expecting(checkpoint_path, &exp.model, data.n_rows(), data.n_cols())?;
    let split = ctx.split(&data, repeat)?;
    let part = match which {
        SplitName::Train => &split.train,
        SplitName::Validation => &split.validation,
        SplitName::Test => &split.test,
    };
    let scaling = target_scaling(&exp, &data)?;
    let clamp = exp.clamp.then(|| split.train.value_range());
    let rmse = score(&ckpt.model, part, scaling, clamp)?;

    let dir = ctx.ensure_out(None)?;
    let path = dir.join("evaluate.csv");
    let mut csv = match fs::read_to_string(&path) {
        Ok(existing) => existing,
        Err(_) => String::from("checkpoint,model,repeat,split,observations,rmse\n"),
    };
    writeln!(
        csv,
        "\"{}\",{},{repeat},{},{},{rmse}",
        checkpoint_path.display().to_string().replace('"', "\"\""),
        ckpt.model.kind(),
        which.as_str(),
        part.len()
    )
    .unwrap();
    ctx.write_with_snapshot(&path, &csv)?;
    Ok(rmse)
}

/// Per-run summary read back from a `repeats.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub run: String,
    pub model: String,
    pub ok: usize,
    pub total: usize,
    pub mean: Option<f64>,
    pub sd: Option<f64>,
}

pub fn summarize_repeats(run: &str, path: &Path) -> CliResult<RunSummary> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?
        .clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Usage(format!("{}: no '{name}' column", path.display())))
    };
    let (model_col, status_col, rmse_col) = (col("model")?, col("status")?, col("test_rmse")?);
    let mut model = String::new();
    let mut values = Vec::new();
    let mut total = 0;
    for record in reader.records() {
        let record = record.map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        total += 1;
        model = record[model_col].to_string();
        if &record[status_col] == "ok" {
            let v: f64 = record[rmse_col]
                .parse()
                .map_err(|_| CliError::Usage(format!("{}: bad test_rmse '{}'", path.display(), &record[rmse_col])))?;
            values.push(v);
        }
    }
    let n = values.len();
    let mean = (n > 0).then(|| values.iter().sum::<f64>() / n as f64);
    let sd = mean.filter(|_| n > 1).map(|m| {
        (values.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64).sqrt()
    });
    Ok(RunSummary {
        run: run.to_string(),
        model,
        ok: n,
        total,
        mean,
        sd,
    })
}

/// Collects `repeats.csv` from each run directory into `report.csv` in
/// `out` and returns a printable table.
pub fn cmd_report(out: &Path, runs: &[PathBuf], snapshot: Option<&str>) -> CliResult<String> {
    if runs.is_empty() {
        return Err(CliError::Usage("report needs at least one run directory".into()));
    }
    let summaries = runs
        .iter()
        .map(|dir| summarize_repeats(&dir.display().to_string(), &dir.join("repeats.csv")))
        .collect::<CliResult<Vec<_>>>()?;
    let fmt = |x: Option<f64>| x.map_or(String::new(), |v| v.to_string());
    let mut csv = String::from("run,model,repeats_ok,repeats_total,mean_test_rmse,sd_test_rmse\n");
    let mut table = format!(
        "{:<32} {:<10} {:>8} {:>10} {:>10}\n",
        "run", "model", "repeats", "mean_rmse", "sd"
    );
    for s in &summaries {
        writeln!(
            csv,
            "\"{}\",{},{},{},{},{}",
            s.run.replace('"', "\"\""),
            s.model,
            s.ok,
            s.total,
            fmt(s.mean),
            fmt(s.sd)
        )
        .unwrap();
        let show = |x: Option<f64>| x.map_or("n/a".to_string(), |v| format!("{v:.4}"));
        writeln!(
            table,
            "{:<32} {:<10} {:>8} {:>10} {:>10}",
            s.run,
            s.model,
            format!("{}/{}", s.ok, s.total),
            show(s.mean),
            show(s.sd)
        )
        .unwrap();
    }
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let path = out.join("report.csv");
    write(&path, &csv)?;
    let sidecar = snapshot.map_or_else(|| format!("# nnmf {}\n", crate::config::VERSION), str::to_string);
    write(&out.join("report.csv.config.toml"), &sidecar)?;
    Ok(table)
}

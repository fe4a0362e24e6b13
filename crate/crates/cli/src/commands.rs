use std::fmt;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use evifuse::features::{generate_channels, normalize_minmax, select_frequencies, MinMax, SpectrumDataset, ALL_CHANNELS};
use evifuse::fusion::{fuse_batch, FusionError, ScoreMatrix};
use evifuse::infotheory::{rank_classifiers, select_ensemble, LabelVector, RankingResult};
use evifuse::learners::{train, LearnerError, LearnerRecord, TrainedLearner};
use evifuse::pipeline::{
    read_dataset_csv, run_bandwidth_sweep, run_experiment, run_noise_sweep, synthesize, write_dataset_csv,
    ExperimentConfig, PipelineError, SynthConfig,
};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::{Cli, Command, FuseArgs, RankArgs, RunArgs, SelectArgs, SynthArgs, TrainArgs};

/// Failure classes, mapped to exit codes 2, 3 and 4.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    AllFailed(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::AllFailed(m) => f.write_str(m),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::InvalidCounts(_) | PipelineError::InvalidConfig(_) | PipelineError::TooManySections { .. } => {
                CliError::Usage(e.to_string())
            }
            PipelineError::Learner(LearnerError::InvalidConfig(_)) | PipelineError::Fusion(FusionError::InvalidConfig(_)) => {
                CliError::Usage(e.to_string())
            }
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<LearnerError> for CliError {
    fn from(e: LearnerError) -> Self {
        PipelineError::from(e).into()
    }
}

impl From<FusionError> for CliError {
    fn from(e: FusionError) -> Self {
        PipelineError::from(e).into()
    }
}

fn data_err(context: impl fmt::Display, e: impl fmt::Display) -> CliError {
    CliError::Data(format!("{context}: {e}"))
}

/// Configuration document accepted by `--config`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CliConfig {
    pub experiment: ExperimentConfig,
    pub synth: SynthConfig,
    pub data: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub plot_csv: Option<PathBuf>,
}

fn load_config(path: Option<&Path>) -> Result<CliConfig, CliError> {
    let Some(path) = path else {
        return Ok(CliConfig::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| data_err(path.display(), e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn check_input(path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Data(format!("{}: no such file", path.display())))
    }
}

fn check_output(path: &Path) -> Result<(), CliError> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() && !dir.is_dir() => {
            Err(CliError::Data(format!("{}: directory does not exist", dir.display())))
        }
        _ => Ok(()),
    }
}

/// Writes through a temporary file in the target directory, then renames.
fn write_atomic<F>(path: &Path, fill: F) -> Result<(), CliError>
where
    F: FnOnce(&mut dyn Write) -> io::Result<()>,
{
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| data_err(path.display(), e))?;
    {
        let mut w = BufWriter::new(tmp.as_file());
        fill(&mut w).map_err(|e| data_err(path.display(), e))?;
        w.flush().map_err(|e| data_err(path.display(), e))?;
    }
    tmp.persist(path).map_err(|e| data_err(path.display(), e.error))?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    write_atomic(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        writeln!(w)
    })
}

fn read_dataset(path: &Path) -> Result<SpectrumDataset, CliError> {
    let file = File::open(path).map_err(|e| data_err(path.display(), e))?;
    read_dataset_csv(BufReader::new(file)).map_err(|e| data_err(path.display(), e))
}

fn read_scores(path: &Path) -> Result<ScoreMatrix, CliError> {
    let id = path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned());
    let file = File::open(path).map_err(|e| data_err(path.display(), e))?;
    ScoreMatrix::read_csv(&id, BufReader::new(file)).map_err(|e| data_err(path.display(), e))
}

pub fn dispatch(cli: Cli) -> Result<(), CliError> {
    let config = load_config(cli.config.as_deref())?;
    let run = move || match cli.command {
        Command::Synth(a) => cmd_synth(a, &config),
        Command::Select(a) => cmd_select(a),
        Command::Train(a) => cmd_train(a, &config),
        Command::Rank(a) => cmd_rank(a, &config),
        Command::Fuse(a) => cmd_fuse(a, &config),
        Command::Run(a) => cmd_run(a, &config, Sweeps::Configured),
        Command::NoiseSweep(a) => cmd_run(a.run, &config, Sweeps::NoiseOnly),
        Command::BandSweep(a) => cmd_run(a.run, &config, Sweeps::BandsOnly),
    };
    match cli.jobs {
        Some(0) => Err(CliError::Usage("--jobs must be positive".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Usage(e.to_string()))?
            .install(run),
        None => run(),
    }
}

fn cmd_synth(args: SynthArgs, config: &CliConfig) -> Result<(), CliError> {
    check_output(&args.output)?;
    let mut cfg = config.synth.clone();
    cfg.n_healthy = args.healthy.unwrap_or(cfg.n_healthy);
    cfg.n_defected = args.defected.unwrap_or(cfg.n_defected);
    cfg.n_f = args.nf.unwrap_or(cfg.n_f);
    cfg.seed = args.seed.unwrap_or(cfg.seed);
    let ds = synthesize(&cfg)?.dataset;
    write_atomic(&args.output, |w| write_dataset_csv(&ds, w))?;
    println!(
        "{}: {} samples x {} channels = {} rows, {} frequencies",
        args.output.display(),
        ds.n_samples(),
        ds.channels().len(),
        ds.n_samples() * ds.channels().len(),
        ds.n_frequencies()
    );
    Ok(())
}

fn normalized_channels(ds: &SpectrumDataset) -> Result<Vec<(String, DMatrix<f64>, MinMax)>, CliError> {
    Ok(raw_channels(ds)?
        .into_iter()
        .map(|(name, m)| {
            let (n, stats) = normalize_minmax(&m, None);
            (name, n, stats)
        })
        .collect())
}

fn cmd_select(args: SelectArgs) -> Result<(), CliError> {
    check_input(&args.data)?;
    check_output(&args.output)?;
    let ds = read_dataset(&args.data)?;
    let channels: Vec<(String, DMatrix<f64>)> = normalized_channels(&ds)?.into_iter().map(|(n, m, _)| (n, m)).collect();
    let sel = select_frequencies(&channels, ds.labels(), ds.class_names().len()).map_err(|e| CliError::Data(e.to_string()))?;
    write_atomic(&args.output, |w| sel.write_csv(ds.frequencies(), w))?;
    for c in &sel.channels {
        println!("{:8} {}", c.channel, c.indices.len());
    }
    println!("union {}", sel.union.len());
    Ok(())
}

/// Channel slice feeding a trained model.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ChannelPart {
    channel: String,
    frequency_indices: Vec<usize>,
    minmax: MinMax,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    name: String,
    class_names: Vec<String>,
    n_frequencies: usize,
    parts: Vec<ChannelPart>,
    learner: LearnerRecord,
}

fn assemble(parts: &[ChannelPart], channels: &[(String, DMatrix<f64>)], rows: usize) -> Result<DMatrix<f64>, CliError> {
    let mut blocks = Vec::with_capacity(parts.len());
    for p in parts {
        let (_, raw) = channels
            .iter()
            .find(|(n, _)| *n == p.channel)
            .ok_or_else(|| CliError::Data(format!("missing channel `{}`", p.channel)))?;
        let (m, _) = normalize_minmax(raw, Some(p.minmax));
        blocks.push(m.select_columns(&p.frequency_indices));
    }
    let width = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, width);
    let mut at = 0;
    for b in blocks {
        out.columns_mut(at, b.ncols()).copy_from(&b);
        at += b.ncols();
    }
    Ok(out)
}

fn raw_channels(ds: &SpectrumDataset) -> Result<Vec<(String, DMatrix<f64>)>, CliError> {
    let x1 = ds.channel("x1").map_err(|e| CliError::Data(e.to_string()))?;
    let x2 = ds.channel("x2").map_err(|e| CliError::Data(e.to_string()))?;
    generate_channels(x1, x2).map_err(|e| CliError::Data(e.to_string()))
}

fn cmd_train(args: TrainArgs, config: &CliConfig) -> Result<(), CliError> {
    check_input(&args.data)?;
    check_output(&args.output)?;
    if let (Some(p), Some(s)) = (&args.predict, &args.scores_out) {
        check_input(p)?;
        check_output(s)?;
    }
    let ds = read_dataset(&args.data)?;
    let normalized = normalized_channels(&ds)?;
    let wanted: Vec<&(String, DMatrix<f64>, MinMax)> = if args.channel == ALL_CHANNELS {
        normalized.iter().collect()
    } else {
        let one = normalized
            .iter()
            .find(|(n, _, _)| *n == args.channel)
            .ok_or_else(|| CliError::Usage(format!("unknown channel `{}`", args.channel)))?;
        vec![one]
    };
    let for_selection: Vec<(String, DMatrix<f64>)> = wanted.iter().map(|(n, m, _)| (n.clone(), m.clone())).collect();
    let n_classes = ds.class_names().len();
    let sel = select_frequencies(&for_selection, ds.labels(), n_classes).map_err(|e| CliError::Data(e.to_string()))?;
    let parts: Vec<ChannelPart> = wanted
        .iter()
        .zip(&sel.channels)
        .map(|((name, _, stats), s)| ChannelPart {
            channel: name.clone(),
            frequency_indices: s.indices.clone(),
            minmax: *stats,
        })
        .collect();
    let features = assemble(&parts, &raw_channels(&ds)?, ds.n_samples())?;
    let mut lcfg = config.experiment.learner.clone();
    lcfg.seed = args.seed.unwrap_or(lcfg.seed);
    let model = train(&features, ds.labels(), n_classes, &lcfg)?;
    let file = ModelFile {
        name: args.channel.clone(),
        class_names: ds.class_names().to_vec(),
        n_frequencies: ds.n_frequencies(),
        parts,
        learner: model.to_record(),
    };
    write_json(&args.output, &file)?;
    println!(
        "{}: {} learner on {} inputs, final loss {:.6}",
        args.output.display(),
        args.channel,
        features.ncols(),
        model.training_log().last().copied().unwrap_or(f64::NAN)
    );

    if let (Some(pred), Some(out)) = (&args.predict, &args.scores_out) {
        let target = read_dataset(pred)?;
        if target.class_names() != file.class_names || target.n_frequencies() != file.n_frequencies {
            return Err(CliError::Data(format!("{}: classes or frequency grid differ from training data", pred.display())));
        }
        let model = TrainedLearner::from_record(file.learner.clone())?;
        let x = assemble(&file.parts, &raw_channels(&target)?, target.n_samples())?;
        let scores = model.predict_scores(&file.name, &x, target.sample_ids(), target.class_names())?;
        write_atomic(out, |w| scores.write_csv(w))?;
        println!("{}: {} scored samples", out.display(), scores.n_samples());
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct RankReport {
    classifiers: Vec<String>,
    ranked: Vec<String>,
    result: RankingResult,
}

fn check_alignment(matrices: &[ScoreMatrix], paths: &[PathBuf]) -> Result<(), CliError> {
    let first = &matrices[0];
    for (m, p) in matrices.iter().zip(paths).skip(1) {
        if m.sample_ids() != first.sample_ids() || m.class_labels() != first.class_labels() {
            return Err(CliError::Data(format!(
                "{}: shape mismatch: sample ids or classes differ from {}",
                p.display(),
                paths[0].display()
            )));
        }
    }
    Ok(())
}

fn cmd_rank(args: RankArgs, config: &CliConfig) -> Result<(), CliError> {
    check_input(&args.data)?;
    args.scores.iter().try_for_each(|p| check_input(p))?;
    check_output(&args.output)?;
    let ds = read_dataset(&args.data)?;
    let matrices = args.scores.iter().map(|p| read_scores(p)).collect::<Result<Vec<_>, _>>()?;
    check_alignment(&matrices, &args.scores)?;
    let labels: Vec<usize> = matrices[0]
        .sample_ids()
        .iter()
        .map(|id| {
            ds.sample_ids()
                .iter()
                .position(|s| s == id)
                .map(|i| ds.labels().as_slice()[i])
                .ok_or_else(|| CliError::Data(format!("{}: sample `{id}` not in {}", args.scores[0].display(), args.data.display())))
        })
        .collect::<Result<_, _>>()?;
    let y = LabelVector::new(labels).map_err(|e| CliError::Data(e.to_string()))?;
    let predictions = matrices
        .iter()
        .map(|m| LabelVector::new(m.predicted_labels()))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CliError::Data(e.to_string()))?;
    let ranking = rank_classifiers(&predictions, &y).map_err(|e| CliError::Data(e.to_string()))?;
    let grid = args.theta_grid.unwrap_or_else(|| config.experiment.theta_grid.clone());
    let result = select_ensemble(&matrices, &ranking, &y, &grid, &config.experiment.fusion, &config.experiment.boe)
        .map_err(|e| CliError::Data(e.to_string()))?;
    let names: Vec<String> = matrices.iter().map(|m| m.classifier_id().to_string()).collect();
    let report = RankReport {
        ranked: result.order.iter().map(|&i| names[i].clone()).collect(),
        classifiers: names,
        result,
    };
    write_json(&args.output, &report)?;
    println!(
        "ranked {:?}; size {} at theta {} gives accuracy {:.4}",
        report.ranked, report.result.selected_size, report.result.selected_theta, report.result.validation_accuracy
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct TraceEntry<'a> {
    sample_id: &'a str,
    status: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    trace: Option<&'a evifuse::fusion::FusionTrace>,
}

fn status_of(e: &FusionError) -> &'static str {
    match e {
        FusionError::InvalidWeights { .. } => "invalid_weights",
        FusionError::Evidence(_) => "evidence_error",
        _ => "error",
    }
}

fn cmd_fuse(args: FuseArgs, config: &CliConfig) -> Result<(), CliError> {
    args.inputs.iter().try_for_each(|p| check_input(p))?;
    check_output(&args.output)?;
    if let Some(t) = &args.trace {
        check_output(t)?;
    }
    let matrices = args.inputs.iter().map(|p| read_scores(p)).collect::<Result<Vec<_>, _>>()?;
    check_alignment(&matrices, &args.inputs)?;
    let mut cfg = config.experiment.fusion;
    cfg.theta = args.theta.unwrap_or(cfg.theta);
    cfg.sigma = args.sigma.unwrap_or(cfg.sigma);
    let refs: Vec<&ScoreMatrix> = matrices.iter().collect();
    let batch = fuse_batch(&refs, &cfg, &config.experiment.boe)?;
    let any_failed = !batch.all_ok();
    write_atomic(&args.output, |w| {
        let mut out = csv_writer(w);
        let mut header = vec!["sample_id".to_string()];
        header.extend(batch.scores.class_labels().iter().cloned());
        if any_failed {
            header.push("status".into());
        }
        out.write_record(&header)?;
        for (s, row) in batch.scores.rows().enumerate() {
            let mut rec = vec![batch.scores.sample_ids()[s].clone()];
            rec.extend(row.iter().map(|v| v.to_string()));
            if any_failed {
                rec.push(batch.rows[s].as_ref().map_or_else(|e| status_of(e), |_| "ok").to_string());
            }
            out.write_record(&rec)?;
        }
        out.flush()
    })?;
    if let Some(path) = &args.trace {
        let entries: Vec<TraceEntry> = batch
            .rows
            .iter()
            .zip(batch.scores.sample_ids())
            .map(|(r, id)| match r {
                Ok(t) => TraceEntry {
                    sample_id: id,
                    status: "ok",
                    error: None,
                    trace: Some(t),
                },
                Err(e) => TraceEntry {
                    sample_id: id,
                    status: status_of(e),
                    error: Some(e.to_string()),
                    trace: None,
                },
            })
            .collect();
        write_json(path, &entries)?;
    }
    let failed = batch.failed_rows().count();
    println!("{}: {} rows fused, {} flagged", args.output.display(), batch.scores.n_samples(), failed);
    Ok(())
}

fn csv_writer(w: &mut dyn Write) -> csv::Writer<&mut dyn Write> {
    csv::Writer::from_writer(w)
}

fn to_json<T: Serialize>(value: &T) -> Result<String, CliError> {
    serde_json::to_string_pretty(value).map_err(|e| CliError::Data(e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Sweeps {
    Configured,
    NoiseOnly,
    BandsOnly,
}

fn cmd_run(args: RunArgs, config: &CliConfig, sweeps: Sweeps) -> Result<(), CliError> {
    let data = args.data.clone().or_else(|| config.data.clone());
    let output = args.output.clone().or_else(|| config.output.clone());
    let plot_csv = args.plot_csv.clone().or_else(|| config.plot_csv.clone());
    if let Some(d) = &data {
        check_input(d)?;
    }
    for p in output.iter().chain(&plot_csv) {
        check_output(p)?;
    }
    let mut cfg = config.experiment.clone();
    cfg.seed = args.seed.unwrap_or(cfg.seed);
    cfg.repetitions = args.repetitions.unwrap_or(cfg.repetitions);
    if let Some(levels) = &args.nsr {
        cfg.nsr_levels = levels.clone();
    }
    if let Some(bands) = &args.bands {
        cfg.bandwidth_sections = bands.clone();
    }
    cfg.validate()?;
    let ds = match &data {
        Some(d) => read_dataset(d)?,
        None => synthesize(&config.synth)?.dataset,
    };

    let emit = |json: String| -> Result<(), CliError> {
        match &output {
            Some(path) => write_atomic(path, |w| writeln!(w, "{json}")),
            None => {
                println!("{json}");
                Ok(())
            }
        }
    };

    match sweeps {
        Sweeps::NoiseOnly => {
            let levels = run_noise_sweep(&ds, &cfg)?;
            let all_failed = levels.iter().all(|l| l.failures == cfg.repetitions);
            emit(to_json(&levels)?)?;
            if all_failed {
                return Err(CliError::AllFailed("every repetition failed at every noise level".into()));
            }
        }
        Sweeps::BandsOnly => {
            let bands = run_bandwidth_sweep(&ds, &cfg)?;
            let all_failed = bands.iter().all(|b| b.failures == cfg.repetitions);
            emit(to_json(&bands)?)?;
            if all_failed {
                return Err(CliError::AllFailed("every repetition failed in every band".into()));
            }
        }
        Sweeps::Configured => {
            let mut report = run_experiment(&ds, &cfg)?;
            if args.nsr.is_some() {
                report.noise_sweep = Some(run_noise_sweep(&ds, &cfg)?);
            }
            if args.bands.is_some() {
                report.bandwidth_sweep = Some(run_bandwidth_sweep(&ds, &cfg)?);
            }
            emit(to_json(&report)?)?;
            if let Some(path) = &plot_csv {
                write_atomic(path, |w| report.write_accuracy_csv(w))?;
            }
            if report.failures.len() == cfg.repetitions {
                return Err(CliError::AllFailed(format!(
                    "all {} repetitions failed; first error: {}",
                    cfg.repetitions, report.failures[0].error
                )));
            }
            if output.is_some() {
                eprintln!(
                    "fused mean {:.4} vs best learner {} {:.4}; {} failed repetitions",
                    report.fused.mean,
                    report.per_learner.best.name,
                    report.per_learner.best.stats.mean,
                    report.failures.len()
                );
            }
        }
    }
    Ok(())
}

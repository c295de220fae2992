//! Command-line entry points for the full experiment lifecycle: dataset
//! preparation, architecture search, child retraining, evaluation, and the
//! gradient-check verification gate.
//!
//! Commands communicate only through files. Exit codes: 0 success, 1
//! verification failure, 2 usage/input error.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::{self, Checkpoint, CheckpointKind, CheckpointMeta};
use crate::config::{Mode, Precision, RunConfig};
use crate::data::{
    self, evaluate, generate_synthetic, load_cifar10_binary, load_manifest, subsample_longtailed,
    write_manifest, write_records, DatasetManifest, LabeledDataset,
};
use crate::error::{Error, Result};
use crate::genotype::Genotype;
use crate::search::{bilevel_search, metrics_csv, MetricsRecord, SearchSession, SearchState};
use crate::search_space::{discretize, ArchParams, CellKind, DiscretizeRule};
use crate::supernet::{build_supernet, derive_child, ArchVars, Head};
use crate::tensor::{Element, GradCheckOptions, Tape};

#[derive(Parser)]
#[command(name = "fairsearch", version, about = "Differentiable architecture search on long-tailed data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Run configuration file (JSON); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the search mode (darts|fairdarts|ssf).
    #[arg(long)]
    mode: Option<String>,
    /// Print the effective configuration and exit.
    #[arg(long)]
    print_config: bool,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(mode) = &self.mode {
            cfg.mode = Mode::parse(mode)?;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled source dataset (binary records + manifest).
    MakeSynth {
        #[command(flatten)]
        config: ConfigArgs,
        /// Classes in the generated source.
        #[arg(long, default_value_t = 3)]
        classes: usize,
        /// Samples per class.
        #[arg(long, default_value_t = 400)]
        per_class: usize,
        /// Square image extent.
        #[arg(long, default_value_t = 16)]
        image_size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Subsample a source dataset into a long-tailed dataset per the
    /// configured profile; writes records, a manifest, and a per-class
    /// histogram CSV.
    MakeLt {
        #[command(flatten)]
        config: ConfigArgs,
        /// Source: `manifest:<path>`, `cifar:<bin,paths>`, or
        /// `synth:<classes>x<per_class>@<size>`.
        #[arg(long)]
        source: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run bilevel architecture search; writes genotypes, metrics, and a
    /// resumable checkpoint.
    Search {
        #[command(flatten)]
        config: ConfigArgs,
        /// Training dataset manifest.
        #[arg(long)]
        data: PathBuf,
        /// Held-out dataset manifest for per-epoch evaluation.
        #[arg(long)]
        test_data: Option<PathBuf>,
        /// Override the number of search epochs.
        #[arg(long)]
        epochs: Option<usize>,
        /// Discretization rule: argmax|threshold|darts-top2.
        #[arg(long)]
        discretize: Option<String>,
        /// Resume from the last epoch checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        /// Leave wall-clock columns at zero for byte-reproducible metrics.
        #[arg(long)]
        no_wall_time: bool,
        /// Test fixture: abort cleanly after this many completed epochs,
        /// leaving a resumable checkpoint and no final artifacts.
        #[arg(long, hide = true)]
        halt_after: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Derive the discrete child of a genotype and train it supervised.
    Retrain {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        genotype: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        test_data: Option<PathBuf>,
        /// Override the number of retrain epochs.
        #[arg(long)]
        epochs: Option<usize>,
        /// Override the child depth (defaults to the search depth).
        #[arg(long)]
        retrain_cells: Option<usize>,
        /// Proceed despite a genotype/config hash mismatch.
        #[arg(long)]
        force: bool,
        /// Leave wall-clock columns at zero for byte-reproducible metrics.
        #[arg(long)]
        no_wall_time: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Optional config to cross-check the checkpoint's hash against.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Evaluate despite a config-hash mismatch between artifacts.
        #[arg(long)]
        force: bool,
        /// Write eval_report.json here in addition to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        batch: usize,
    },
    /// Run the gradient-check verification gate.
    GradCheck {
        /// primitive | network | all
        #[arg(long, default_value = "all")]
        scope: String,
        /// Random seeds per case.
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        /// Test fixture: report a corrupted result for the named primitive
        /// to exercise failure reporting.
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
}

/// Entry point used by the binary; returns the process exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e @ Error::GradCheck(_)) => {
            eprintln!("error: {e}");
            1
        }
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::MakeSynth {
            config,
            classes,
            per_class,
            image_size,
            out,
        } => {
            let cfg = config.load()?;
            if config.print_config {
                print!("{}", cfg.to_json());
                return Ok(());
            }
            cmd_make_synth(&cfg, classes, per_class, image_size, &out)
        }
        Command::MakeLt { config, source, out } => {
            let cfg = config.load()?;
            if config.print_config {
                print!("{}", cfg.to_json());
                return Ok(());
            }
            cmd_make_lt(&cfg, &source, &out)
        }
        Command::Search {
            config,
            data,
            test_data,
            epochs,
            discretize,
            resume,
            no_wall_time,
            halt_after,
            out,
        } => {
            let mut cfg = config.load()?;
            if let Some(e) = epochs {
                cfg.optim.search_epochs = e;
            }
            if config.print_config {
                print!("{}", cfg.to_json());
                return Ok(());
            }
            let rule = discretize.as_deref().map(parse_discretize).transpose()?;
            match cfg.precision {
                Precision::F64 => cmd_search::<f64>(
                    &cfg,
                    &data,
                    test_data.as_deref(),
                    rule,
                    resume,
                    no_wall_time,
                    halt_after,
                    &out,
                ),
                Precision::F32 => cmd_search::<f32>(
                    &cfg,
                    &data,
                    test_data.as_deref(),
                    rule,
                    resume,
                    no_wall_time,
                    halt_after,
                    &out,
                ),
            }
        }
        Command::Retrain {
            config,
            genotype,
            data,
            test_data,
            epochs,
            retrain_cells,
            force,
            no_wall_time,
            out,
        } => {
            let mut cfg = config.load()?;
            if let Some(e) = epochs {
                cfg.optim.retrain_epochs = e;
            }
            if config.print_config {
                print!("{}", cfg.to_json());
                return Ok(());
            }
            match cfg.precision {
                Precision::F64 => cmd_retrain::<f64>(
                    &cfg,
                    &genotype,
                    &data,
                    test_data.as_deref(),
                    retrain_cells,
                    force,
                    no_wall_time,
                    &out,
                ),
                Precision::F32 => cmd_retrain::<f32>(
                    &cfg,
                    &genotype,
                    &data,
                    test_data.as_deref(),
                    retrain_cells,
                    force,
                    no_wall_time,
                    &out,
                ),
            }
        }
        Command::Eval {
            checkpoint,
            data,
            config,
            force,
            out,
            batch,
        } => cmd_eval(&checkpoint, &data, config.as_deref(), force, out.as_deref(), batch),
        Command::GradCheck {
            scope,
            seeds,
            inject_fault,
        } => cmd_grad_check(&scope, seeds, inject_fault.as_deref()),
    }
}

fn parse_discretize(s: &str) -> Result<DiscretizeRule> {
    match s {
        "argmax" => Ok(DiscretizeRule::SoftmaxArgmax),
        "threshold" => Ok(DiscretizeRule::SigmoidThreshold(0.5)),
        "darts-top2" => Ok(DiscretizeRule::DartsTop2),
        other => Err(Error::InvalidArg(format!(
            "unknown discretization rule `{other}` (expected argmax|threshold|darts-top2)"
        ))),
    }
}

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path)?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text)?;
    Ok(())
}

fn dataset_manifest(
    cfg: &RunConfig,
    dataset: &LabeledDataset,
    profile: &crate::data::ImbalanceProfile,
    source: &str,
    data_file: &str,
) -> DatasetManifest {
    let stats = dataset.channel_stats();
    DatasetManifest {
        version: 1,
        config_hash: cfg.hash(),
        source: source.to_string(),
        profile: profile.clone(),
        seed: cfg.seed,
        image_size: dataset.image_size(),
        num_classes: dataset.num_classes(),
        per_class_counts: dataset.per_class_counts(),
        channel_mean: stats.mean,
        channel_std: stats.std,
        data_file: data_file.to_string(),
    }
}

fn cmd_make_synth(
    cfg: &RunConfig,
    classes: usize,
    per_class: usize,
    image_size: usize,
    out: &Path,
) -> Result<()> {
    ensure_dir(out)?;
    let dataset = generate_synthetic(classes, per_class, image_size, cfg.seed)?;
    write_records(&dataset, &out.join("dataset.bin"))?;
    let profile = crate::data::ImbalanceProfile::balance(per_class, classes);
    let manifest = dataset_manifest(cfg, &dataset, &profile, &dataset.provenance.source, "dataset.bin");
    write_manifest(&manifest, &out.join("manifest.json"))?;
    println!(
        "wrote {} samples ({classes} classes, {image_size}x{image_size}) to {}",
        dataset.len(),
        out.display()
    );
    Ok(())
}

fn load_source(cfg: &RunConfig, source: &str) -> Result<LabeledDataset> {
    if let Some(rest) = source.strip_prefix("manifest:") {
        let (_, dataset) = load_manifest(Path::new(rest))?;
        Ok(dataset)
    } else if let Some(rest) = source.strip_prefix("cifar:") {
        let paths: Vec<PathBuf> = rest.split(',').map(PathBuf::from).collect();
        for p in &paths {
            if !p.exists() {
                return Err(Error::InvalidArg(format!(
                    "source file {} does not exist",
                    p.display()
                )));
            }
        }
        load_cifar10_binary(&paths)
    } else if let Some(rest) = source.strip_prefix("synth:") {
        // "<classes>x<per_class>@<size>"
        let parse = || -> Option<(usize, usize, usize)> {
            let (head, size) = rest.split_once('@')?;
            let (classes, per_class) = head.split_once('x')?;
            Some((
                classes.parse().ok()?,
                per_class.parse().ok()?,
                size.parse().ok()?,
            ))
        };
        let (classes, per_class, size) = parse().ok_or_else(|| {
            Error::InvalidArg(format!(
                "bad synth source `{rest}`; expected <classes>x<per_class>@<size>"
            ))
        })?;
        generate_synthetic(classes, per_class, size, cfg.seed)
    } else {
        Err(Error::InvalidArg(format!(
            "unknown source `{source}` (expected manifest:|cifar:|synth: prefix)"
        )))
    }
}

fn cmd_make_lt(cfg: &RunConfig, source: &str, out: &Path) -> Result<()> {
    cfg.profile.validate()?;
    ensure_dir(out)?;
    let full = load_source(cfg, source)?;
    let lt = subsample_longtailed(&full, &cfg.profile, cfg.seed)?;
    write_records(&lt, &out.join("dataset.bin"))?;
    let manifest = dataset_manifest(cfg, &lt, &cfg.profile, source, "dataset.bin");
    write_manifest(&manifest, &out.join("manifest.json"))?;

    let mut histogram = format!("# config_hash {}\nclass,count\n", cfg.hash());
    for (c, n) in lt.per_class_counts().iter().enumerate() {
        histogram.push_str(&format!("{c},{n}\n"));
    }
    write_text(&out.join("class_counts.csv"), &histogram)?;
    println!(
        "wrote long-tailed dataset ({} samples) to {}",
        lt.len(),
        out.display()
    );
    Ok(())
}

/// Check a dataset manifest against the run's network geometry.
fn check_geometry(cfg: &RunConfig, manifest: &DatasetManifest, what: &str) -> Result<()> {
    if manifest.image_size != cfg.supernet.image_size
        || manifest.num_classes != cfg.supernet.num_classes
    {
        return Err(Error::ConfigMismatch(format!(
            "{what}: dataset is {} classes at {}x{}, config expects {} classes at {}x{}",
            manifest.num_classes,
            manifest.image_size,
            manifest.image_size,
            cfg.supernet.num_classes,
            cfg.supernet.image_size,
            cfg.supernet.image_size,
        )));
    }
    Ok(())
}

/// Rewrite an existing metrics CSV, dropping rows at or past `from_epoch`.
fn truncate_metrics_csv(path: &Path, from_epoch: usize) -> Result<String> {
    let text = fs::read_to_string(path)?;
    let mut kept = String::new();
    for line in text.lines() {
        let keep = if line.starts_with('#') || line.starts_with("epoch,") {
            true
        } else {
            line.split(',')
                .next()
                .and_then(|e| e.parse::<usize>().ok())
                .map(|e| e < from_epoch)
                .unwrap_or(false)
        };
        if keep {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    Ok(kept)
}

fn append_metrics_row(
    path: &Path,
    record: &MetricsRecord,
    num_classes: usize,
) -> Result<()> {
    let row = metrics_csv(std::slice::from_ref(record), num_classes, "");
    // Drop the comment and header lines from the single-row rendering.
    let row = row.lines().nth(2).expect("row rendered").to_string();
    let mut f = fs::OpenOptions::new().append(true).open(path)?;
    writeln!(f, "{row}")?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_search<T: Element>(
    cfg: &RunConfig,
    data: &Path,
    test_data: Option<&Path>,
    rule_override: Option<DiscretizeRule>,
    resume: bool,
    no_wall_time: bool,
    halt_after: Option<usize>,
    out: &Path,
) -> Result<()> {
    cfg.validate()?;
    ensure_dir(out)?;
    let config_hash = cfg.hash();
    let (manifest, train) = load_manifest(data)?;
    check_geometry(cfg, &manifest, "search data")?;
    let test = match test_data {
        Some(p) => {
            let (m, d) = load_manifest(p)?;
            check_geometry(cfg, &m, "search test data")?;
            Some(d)
        }
        None => None,
    };
    let stats = manifest.stats();
    let train = Arc::new(train);
    let streams = data::split_search_streams(Arc::clone(&train), cfg.split_fraction, cfg.seed)?;

    let (net, mut store) = build_supernet::<T>(&cfg.supernet, cfg.seed)?;
    let mut arch = ArchParams::zeros(&cfg.supernet.ops)?;
    let mut state = SearchState::new(&store, &arch, &cfg.optim);

    let ckpt_path = out.join("search_last.ckpt");
    let metrics_path = out.join("metrics.csv");
    let mut start_epoch = 0;
    if resume && ckpt_path.exists() {
        let ck = checkpoint::load(&ckpt_path)?;
        if ck.meta.config_hash != config_hash {
            return Err(Error::ConfigMismatch(format!(
                "resume checkpoint has config hash {}, current config is {config_hash}",
                ck.meta.config_hash
            )));
        }
        checkpoint::restore_params(&mut store, &ck.params)?;
        checkpoint::restore_sgd_state(&store, &mut state.sgd, &ck.opt_state)?;
        arch = ck.meta.arch.clone().ok_or_else(|| {
            Error::Parse("search checkpoint is missing architecture weights".into())
        })?;
        state.adam_normal = ck
            .meta
            .adam_normal
            .clone()
            .ok_or_else(|| Error::Parse("search checkpoint is missing Adam state".into()))?;
        state.adam_reduce = ck
            .meta
            .adam_reduce
            .clone()
            .ok_or_else(|| Error::Parse("search checkpoint is missing Adam state".into()))?;
        start_epoch = ck.meta.epoch;
        let kept = truncate_metrics_csv(&metrics_path, start_epoch)?;
        write_text(&metrics_path, &kept)?;
        eprintln!("resuming from epoch {start_epoch}");
    } else {
        let header = metrics_csv(&[], cfg.supernet.num_classes, &config_hash);
        write_text(&metrics_path, &header)?;
    }

    let total_epochs = cfg.optim.search_epochs;
    let mode = cfg.mode;
    let mut halted = false;
    {
        let mut session = SearchSession {
            net: &net,
            store: &mut store,
            arch: &mut arch,
            streams: &streams,
            stats,
            test: test.as_ref(),
            mode,
            optim: &cfg.optim,
            loss_cfg: &cfg.loss,
            augment: &cfg.augment,
            record_wall_time: !no_wall_time,
        };
        if total_epochs > start_epoch {
            bilevel_search(
                &mut session,
                &mut state,
                start_epoch,
                total_epochs,
                |epoch, session, state, record| {
                    append_metrics_row(&metrics_path, record, session.net.cfg.num_classes)?;
                    let ck = Checkpoint {
                        meta: CheckpointMeta {
                            kind: CheckpointKind::Supernet,
                            config_hash: config_hash.clone(),
                            config: cfg.clone(),
                            epoch: epoch + 1,
                            dtype: T::DTYPE,
                            channel_mean: session.stats.mean,
                            channel_std: session.stats.std,
                            arch: Some(session.arch.clone()),
                            adam_normal: Some(state.adam_normal.clone()),
                            adam_reduce: Some(state.adam_reduce.clone()),
                            genotype: None,
                        },
                        params: checkpoint::params_to_buffers(session.store),
                        opt_state: checkpoint::sgd_state_to_buffers(session.store, &state.sgd),
                    };
                    checkpoint::save(&ckpt_path, &ck)?;
                    if halt_after == Some(epoch + 1) && epoch + 1 < total_epochs {
                        halted = true;
                        return Ok(std::ops::ControlFlow::Break(()));
                    }
                    Ok(std::ops::ControlFlow::Continue(()))
                },
            )?;
        }
    }

    if halted {
        println!("halted after {} epochs (test fixture)", halt_after.unwrap_or(0));
        return Ok(());
    }

    // Final artifacts: alpha matrices and genotypes under both rules, plus
    // the mode's default rule as genotype.json.
    write_text(
        &out.join("alpha_final.json"),
        &format!("{}\n", serde_json::to_string_pretty(&arch)?),
    )?;
    let gating = mode.gating();
    let argmax = discretize(&arch, gating, DiscretizeRule::SoftmaxArgmax, &config_hash);
    let threshold = discretize(
        &arch,
        gating,
        DiscretizeRule::SigmoidThreshold(0.5),
        &config_hash,
    );
    write_text(&out.join("genotype_argmax.json"), &argmax.serialize_text()?)?;
    write_text(
        &out.join("genotype_threshold.json"),
        &threshold.serialize_text()?,
    )?;
    let default_rule = rule_override.unwrap_or_else(|| mode.default_discretize());
    let chosen = discretize(&arch, gating, default_rule, &config_hash);
    write_text(&out.join("genotype.json"), &chosen.serialize_text()?)?;
    for kind in [CellKind::Normal, CellKind::Reduce] {
        let name = match kind {
            CellKind::Normal => "genotype_normal.dot",
            CellKind::Reduce => "genotype_reduce.dot",
        };
        write_text(&out.join(name), &chosen.to_dot(kind))?;
    }
    write_text(&out.join("config.json"), &cfg.to_json())?;

    // The final checkpoint is the last per-epoch checkpoint; write it even
    // for zero-epoch runs.
    if total_epochs == 0 || start_epoch >= total_epochs {
        let ck = Checkpoint {
            meta: CheckpointMeta {
                kind: CheckpointKind::Supernet,
                config_hash: config_hash.clone(),
                config: cfg.clone(),
                epoch: total_epochs,
                dtype: T::DTYPE,
                channel_mean: stats.mean,
                channel_std: stats.std,
                arch: Some(arch.clone()),
                adam_normal: Some(state.adam_normal.clone()),
                adam_reduce: Some(state.adam_reduce.clone()),
                genotype: None,
            },
            params: checkpoint::params_to_buffers(&store),
            opt_state: checkpoint::sgd_state_to_buffers(&store, &state.sgd),
        };
        checkpoint::save(&ckpt_path, &ck)?;
    }
    println!("search complete; artifacts in {}", out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_retrain<T: Element>(
    cfg: &RunConfig,
    genotype_path: &Path,
    data: &Path,
    test_data: Option<&Path>,
    retrain_cells: Option<usize>,
    force: bool,
    no_wall_time: bool,
    out: &Path,
) -> Result<()> {
    cfg.validate()?;
    ensure_dir(out)?;
    let config_hash = cfg.hash();
    let text = fs::read_to_string(genotype_path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", genotype_path.display()),
        ))
    })?;
    let genotype = Genotype::parse_text(&text)?;
    if genotype.config_hash != config_hash && !force {
        return Err(Error::ConfigMismatch(format!(
            "genotype was searched under config {}, current config is {config_hash} \
             (pass --force to retrain anyway)",
            genotype.config_hash
        )));
    }
    let (manifest, train) = load_manifest(data)?;
    let mut child_cfg = cfg.supernet.clone();
    if let Some(cells) = retrain_cells {
        child_cfg.num_cells = cells;
    }
    check_geometry(cfg, &manifest, "retrain data")?;
    let test = match test_data {
        Some(p) => {
            let (m, d) = load_manifest(p)?;
            check_geometry(cfg, &m, "retrain test data")?;
            Some(d)
        }
        None => None,
    };
    let stats = manifest.stats();
    let train = Arc::new(train);

    let child_seed = crate::seeding::derive_seed(cfg.seed, &["retrain"]);
    let (net, mut store) = derive_child::<T>(&genotype, &child_cfg, child_seed)?;
    let mut sgd = crate::optim::SgdMomentum::new(&store, cfg.optim.w_momentum, cfg.optim.w_weight_decay);

    let metrics_path = out.join("retrain_metrics.csv");
    write_text(
        &metrics_path,
        &metrics_csv(&[], child_cfg.num_classes, &config_hash),
    )?;
    let ckpt_path = out.join("child_final.ckpt");
    let total = cfg.optim.retrain_epochs;
    let genotype_clone = genotype.clone();
    let cfg_clone = cfg.clone();
    crate::search::train_supervised(
        &net,
        &mut store,
        &train,
        &stats,
        test.as_ref(),
        &cfg.optim,
        cfg.seed,
        0,
        total,
        &mut sgd,
        !no_wall_time,
        |epoch, store, sgd, record| {
            append_metrics_row(&metrics_path, record, child_cfg.num_classes)?;
            let ck = Checkpoint {
                meta: CheckpointMeta {
                    kind: CheckpointKind::Child,
                    config_hash: config_hash.clone(),
                    config: cfg_clone.clone(),
                    epoch: epoch + 1,
                    dtype: T::DTYPE,
                    channel_mean: stats.mean,
                    channel_std: stats.std,
                    arch: None,
                    adam_normal: None,
                    adam_reduce: None,
                    genotype: Some(genotype_clone.clone()),
                },
                params: checkpoint::params_to_buffers(store),
                opt_state: checkpoint::sgd_state_to_buffers(store, sgd),
            };
            checkpoint::save(&ckpt_path, &ck)
        },
    )?;
    if total == 0 {
        let ck = Checkpoint {
            meta: CheckpointMeta {
                kind: CheckpointKind::Child,
                config_hash: config_hash.clone(),
                config: cfg.clone(),
                epoch: 0,
                dtype: T::DTYPE,
                channel_mean: stats.mean,
                channel_std: stats.std,
                arch: None,
                adam_normal: None,
                adam_reduce: None,
                genotype: Some(genotype),
            },
            params: checkpoint::params_to_buffers(&store),
            opt_state: checkpoint::sgd_state_to_buffers(&store, &sgd),
        };
        checkpoint::save(&ckpt_path, &ck)?;
    }
    write_text(&out.join("config.json"), &cfg.to_json())?;
    println!("retrain complete; artifacts in {}", out.display());
    Ok(())
}

fn eval_checkpoint<T: Element>(
    ck: &Checkpoint,
    dataset: &LabeledDataset,
    batch: usize,
) -> Result<crate::data::EvalMetrics> {
    let cfg = &ck.meta.config;
    let stats = ck.meta.stats();
    match ck.meta.kind {
        CheckpointKind::Child => {
            let genotype = ck
                .meta
                .genotype
                .as_ref()
                .ok_or_else(|| Error::Parse("child checkpoint is missing its genotype".into()))?;
            let child_seed = crate::seeding::derive_seed(cfg.seed, &["retrain"]);
            let (net, mut store) = derive_child::<T>(genotype, &cfg.supernet, child_seed)?;
            checkpoint::restore_params(&mut store, &ck.params)?;
            evaluate::<T, _>(dataset, &stats, batch, |images| {
                let mut tape = Tape::new();
                let binding = store.bind(&mut tape, false);
                let img = tape.leaf(images.clone(), false);
                let logits = net.forward(&mut tape, &binding, img, None, Head::Classifier)?;
                Ok(tape.value(logits))
            })
        }
        CheckpointKind::Supernet => {
            let arch = ck
                .meta
                .arch
                .as_ref()
                .ok_or_else(|| Error::Parse("supernet checkpoint is missing alphas".into()))?;
            let (net, mut store) = build_supernet::<T>(&cfg.supernet, cfg.seed)?;
            checkpoint::restore_params(&mut store, &ck.params)?;
            let gating = cfg.mode.gating();
            evaluate::<T, _>(dataset, &stats, batch, |images| {
                let mut tape = Tape::new();
                let binding = store.bind(&mut tape, false);
                let normal = tape.leaf(arch.matrix_tensor::<T>(CellKind::Normal), false);
                let reduce = tape.leaf(arch.matrix_tensor::<T>(CellKind::Reduce), false);
                let av = ArchVars { normal, reduce };
                let img = tape.leaf(images.clone(), false);
                let logits =
                    net.forward(&mut tape, &binding, img, Some((&av, gating)), Head::Classifier)?;
                Ok(tape.value(logits))
            })
        }
    }
}

fn cmd_eval(
    checkpoint_path: &Path,
    data: &Path,
    config: Option<&Path>,
    force: bool,
    out: Option<&Path>,
    batch: usize,
) -> Result<()> {
    let ck = checkpoint::load(checkpoint_path)?;
    let (manifest, dataset) = load_manifest(data)?;
    if let Some(cfg_path) = config {
        let cfg = RunConfig::from_file(cfg_path)?;
        if cfg.hash() != ck.meta.config_hash && !force {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint hash {} does not match config hash {} (pass --force to evaluate anyway)",
                ck.meta.config_hash,
                cfg.hash()
            )));
        }
    }
    if manifest.config_hash != ck.meta.config_hash && !force {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint (config {}) and dataset (config {}) come from different runs \
             (pass --force to evaluate anyway)",
            ck.meta.config_hash, manifest.config_hash
        )));
    }
    if manifest.image_size != ck.meta.config.supernet.image_size
        || manifest.num_classes != ck.meta.config.supernet.num_classes
    {
        return Err(Error::ConfigMismatch(format!(
            "dataset geometry {}x{} / {} classes does not match the checkpointed network",
            manifest.image_size, manifest.image_size, manifest.num_classes
        )));
    }
    let metrics = match ck.meta.config.precision {
        Precision::F64 => eval_checkpoint::<f64>(&ck, &dataset, batch)?,
        Precision::F32 => eval_checkpoint::<f32>(&ck, &dataset, batch)?,
    };
    println!("config_hash {}", ck.meta.config_hash);
    println!("overall_acc {}", metrics.overall);
    println!("balanced_acc {}", metrics.balanced);
    for (c, v) in metrics.per_class.iter().enumerate() {
        println!("per_class_acc_{c} {v}");
    }
    if let Some(out) = out {
        ensure_dir(out)?;
        let report = serde_json::json!({
            "config_hash": ck.meta.config_hash,
            "dataset": data.display().to_string(),
            "overall_acc": metrics.overall,
            "balanced_acc": metrics.balanced,
            "per_class_acc": metrics.per_class.iter().map(|v| if v.is_nan() { None } else { Some(*v) }).collect::<Vec<_>>(),
        });
        write_text(
            &out.join("eval_report.json"),
            &format!("{}\n", serde_json::to_string_pretty(&report)?),
        )?;
    }
    Ok(())
}

fn cmd_grad_check(scope: &str, seeds: u64, inject_fault: Option<&str>) -> Result<()> {
    if !["primitive", "network", "all"].contains(&scope) {
        return Err(Error::InvalidArg(format!(
            "unknown scope `{scope}` (expected primitive|network|all)"
        )));
    }
    let mut failures = Vec::new();
    println!("{:<24} {:>6} {:>14}  result", "case", "seeds", "max_rel_err");
    let mut report = |name: &str, err: f64| {
        let fault = inject_fault == Some(name);
        let shown = if fault { err.max(1e-2) } else { err };
        let pass = shown <= 1e-4;
        println!(
            "{name:<24} {seeds:>6} {shown:>14.3e}  {}{}",
            if pass { "PASS" } else { "FAIL" },
            if fault { " (injected fault)" } else { "" }
        );
        if !pass {
            failures.push(name.to_string());
        }
    };

    if scope == "primitive" || scope == "all" {
        for (name, err) in gradcheck_cases::primitive_suite(seeds)? {
            report(&name, err);
        }
    }
    if scope == "network" || scope == "all" {
        for (name, err) in gradcheck_cases::network_suite(seeds.min(5))? {
            report(&name, err);
        }
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Error::GradCheck(format!(
            "failed: {}",
            failures.join(", ")
        )))
    }
}

/// The gradient-check cases behind `fairsearch grad-check`.
pub mod gradcheck_cases {
    use super::*;
    use crate::losses::{barlow_twins_loss, cross_correlation};
    use crate::tensor::{grad_check_many, Conv2dSpec, PoolKind, Tensor, Var};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn nudged(shape: Vec<usize>, rng: &mut ChaCha20Rng) -> Tensor<f64> {
        Tensor::<f64>::randn(shape, 1.0, rng).map(|v| {
            if v.abs() < 1e-2 {
                v + 0.05 * v.signum() + if v == 0.0 { 0.05 } else { 0.0 }
            } else {
                v
            }
        })
    }

    fn max_over_seeds<F>(seeds: u64, mut case: F) -> Result<f64>
    where
        F: FnMut(u64) -> Result<f64>,
    {
        let mut worst = 0.0f64;
        for seed in 0..seeds {
            worst = worst.max(case(seed)?);
        }
        Ok(worst)
    }

    /// Per-primitive central-difference checks; returns (name, max rel err).
    pub fn primitive_suite(seeds: u64) -> Result<Vec<(String, f64)>> {
        let mut rows = Vec::new();
        let opts = |seed| GradCheckOptions {
            h: 1e-5,
            max_coords: None,
            seed,
        };

        rows.push((
            "conv2d".to_string(),
            max_over_seeds(seeds, |seed| {
                let mut rng = ChaCha20Rng::seed_from_u64(1000 + seed);
                let x = Tensor::<f64>::randn(vec![2, 2, 5, 5], 1.0, &mut rng);
                let w = Tensor::<f64>::randn(vec![2, 2, 3, 3], 0.5, &mut rng);
                grad_check_many(
                    |tape, vars: &[Var]| {
                        let out = tape.conv2d(
                            vars[0],
                            vars[1],
                            Conv2dSpec {
                                stride: 1,
                                padding: 1,
                                dilation: 1,
                                groups: 1,
                            },
                        )?;
                        let sq = tape.square(out);
                        Ok(tape.sum_all(sq))
                    },
                    &[x, w],
                    opts(seed),
                )
            })?,
        ));
        rows.push((
            "conv2d_dilated_grouped".to_string(),
            max_over_seeds(seeds, |seed| {
                let mut rng = ChaCha20Rng::seed_from_u64(2000 + seed);
                let x = Tensor::<f64>::randn(vec![1, 4, 6, 6], 1.0, &mut rng);
                let w = Tensor::<f64>::randn(vec![4, 1, 3, 3], 0.5, &mut rng);
                grad_check_many(
                    |tape, vars: &[Var]| {
                        let out = tape.conv2d(
                            vars[0],
                            vars[1],
                            Conv2dSpec {
                                stride: 2,
                                padding: 2,
                                dilation: 2,
                                groups: 4,
                            },
                        )?;
                        let sq = tape.square(out);
                        Ok(tape.sum_all(sq))
                    },
                    &[x, w],
                    opts(seed),
                )
            })?,
        ));
        for (name, kind) in [("max_pool", PoolKind::Max), ("avg_pool", PoolKind::Avg)] {
            rows.push((
                name.to_string(),
                max_over_seeds(seeds, |seed| {
                    let mut rng = ChaCha20Rng::seed_from_u64(3000 + seed);
                    let x = nudged(vec![2, 2, 6, 6], &mut rng);
                    grad_check_many(
                        |tape, vars: &[Var]| {
                            let out = tape.pool2d(vars[0], kind, 3, 2, 1)?;
                            let sq = tape.square(out);
                            Ok(tape.sum_all(sq))
                        },
                        std::slice::from_ref(&x),
                        opts(seed),
                    )
                })?,
            ));
        }
        rows.push((
            "batch_norm".to_string(),
            max_over_seeds(seeds, |seed| {
                let mut rng = ChaCha20Rng::seed_from_u64(4000 + seed);
                let x = Tensor::<f64>::randn(vec![3, 2, 4, 4], 1.5, &mut rng);
                let g = Tensor::<f64>::randn(vec![2], 0.4, &mut rng).map(|v| v + 1.0);
                let b = Tensor::<f64>::randn(vec![2], 0.4, &mut rng);
                grad_check_many(
                    |tape, vars: &[Var]| {
                        let out = tape.batch_norm(vars[0], vars[1], vars[2], 1e-5)?;
                        let sq = tape.square(out);
                        Ok(tape.sum_all(sq))
                    },
                    &[x, g, b],
                    opts(seed),
                )
            })?,
        ));
        rows.push((
            "linear".to_string(),
            max_over_seeds(seeds, |seed| {
                let mut rng = ChaCha20Rng::seed_from_u64(5000 + seed);
                let x = Tensor::<f64>::randn(vec![3, 4], 1.0, &mut rng);
                let w = Tensor::<f64>::randn(vec![4, 2], 1.0, &mut rng);
                let b = Tensor::<f64>::randn(vec![2], 1.0, &mut rng);
                grad_check_many(
                    |tape, vars: &[Var]| {
                        let out = tape.linear(vars[0], vars[1], Some(vars[2]))?;
                        let sq = tape.square(out);
                        Ok(tape.sum_all(sq))
                    },
                    &[x, w, b],
                    opts(seed),
                )
            })?,
        ));
        for name in ["relu", "sigmoid", "softmax"] {
            rows.push((
                name.to_string(),
                max_over_seeds(seeds, |seed| {
                    let mut rng = ChaCha20Rng::seed_from_u64(6000 + seed);
                    let x = nudged(vec![3, 5], &mut rng);
                    grad_check_many(
                        |tape, vars: &[Var]| {
                            let out = match name {
                                "relu" => tape.relu(vars[0]),
                                "sigmoid" => tape.sigmoid(vars[0]),
                                _ => tape.softmax_lastdim(vars[0]),
                            };
                            let sq = tape.square(out);
                            Ok(tape.sum_all(sq))
                        },
                        std::slice::from_ref(&x),
                        opts(seed),
                    )
                })?,
            ));
        }
        rows.push((
            "cross_entropy".to_string(),
            max_over_seeds(seeds, |seed| {
                let mut rng = ChaCha20Rng::seed_from_u64(7000 + seed);
                let logits = Tensor::<f64>::randn(vec![4, 5], 2.0, &mut rng);
                grad_check_many(
                    |tape, vars: &[Var]| tape.cross_entropy(vars[0], &[0, 2, 4, 1]),
                    std::slice::from_ref(&logits),
                    opts(seed),
                )
            })?,
        ));
        rows.push((
            "weighted_sum".to_string(),
            max_over_seeds(seeds, |seed| {
                let mut rng = ChaCha20Rng::seed_from_u64(8000 + seed);
                let a = Tensor::<f64>::randn(vec![2, 2, 3, 3], 1.0, &mut rng);
                let b = Tensor::<f64>::randn(vec![2, 2, 3, 3], 1.0, &mut rng);
                let gates = Tensor::<f64>::randn(vec![2], 1.0, &mut rng);
                grad_check_many(
                    |tape, vars: &[Var]| {
                        let ws = tape.weighted_sum(&[vars[0], vars[1]], vars[2])?;
                        let sq = tape.square(ws);
                        Ok(tape.sum_all(sq))
                    },
                    &[a, b, gates],
                    opts(seed),
                )
            })?,
        ));
        rows.push((
            "barlow_twins".to_string(),
            max_over_seeds(seeds, |seed| {
                let mut rng = ChaCha20Rng::seed_from_u64(9000 + seed);
                let za = Tensor::<f64>::randn(vec![5, 3], 1.0, &mut rng);
                let zb = Tensor::<f64>::randn(vec![5, 3], 1.0, &mut rng);
                grad_check_many(
                    |tape, vars: &[Var]| {
                        let c = cross_correlation(tape, vars[0], vars[1], false)?;
                        barlow_twins_loss(tape, c, 5e-3)
                    },
                    &[za, zb],
                    opts(seed),
                )
            })?,
        ));
        Ok(rows)
    }

    /// End-to-end check on a one-cell supernet: alpha matrices fully, the
    /// network weights on a sampled coordinate subset.
    pub fn network_suite(seeds: u64) -> Result<Vec<(String, f64)>> {
        use crate::search_space::OperationKind;
        use crate::supernet::SupernetConfig;

        let cfg = SupernetConfig {
            num_cells: 1,
            init_channels: 2,
            num_classes: 2,
            image_size: 4,
            embed_dim: 2,
            batch_norm: true,
            ops: vec![
                OperationKind::None,
                OperationKind::MaxPool3x3,
                OperationKind::AvgPool3x3,
                OperationKind::SkipConnect,
                OperationKind::SepConv3x3,
                OperationKind::DilConv3x3,
            ],
        };
        let mut alpha_err = 0.0f64;
        let mut weight_err = 0.0f64;
        for seed in 0..seeds {
            let (net, store) = build_supernet::<f64>(&cfg, seed)?;
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let images = Tensor::<f64>::randn(vec![2, 3, 4, 4], 1.0, &mut rng);
            let labels = vec![0usize, 1];
            let arch = {
                let mut a = ArchParams::zeros(&cfg.ops)?;
                for v in a.alpha_normal.iter_mut().chain(a.alpha_reduce.iter_mut()) {
                    *v = Tensor::<f64>::randn(vec![1], 0.3, &mut rng).data()[0];
                }
                a
            };

            // Alpha path: every coordinate of both matrices.
            let alphas = [
                arch.matrix_tensor::<f64>(CellKind::Normal),
                arch.matrix_tensor::<f64>(CellKind::Reduce),
            ];
            let store_ref = &store;
            let net_ref = &net;
            let images_ref = &images;
            let labels_ref = &labels;
            let err = grad_check_many(
                move |tape, vars: &[Var]| {
                    let binding = store_ref.bind(tape, false);
                    let av = ArchVars {
                        normal: vars[0],
                        reduce: vars[1],
                    };
                    let img = tape.leaf(images_ref.clone(), false);
                    let logits = net_ref.forward(
                        tape,
                        &binding,
                        img,
                        Some((&av, crate::search_space::Gating::Softmax)),
                        Head::Classifier,
                    )?;
                    tape.cross_entropy(logits, labels_ref)
                },
                &alphas,
                GradCheckOptions {
                    h: 1e-5,
                    max_coords: None,
                    seed,
                },
            )?;
            alpha_err = alpha_err.max(err);

            // Weight path: all parameters as leaves, sampled coordinates.
            let tensors: Vec<Tensor<f64>> =
                store.ids().map(|id| store.tensor(id).clone()).collect();
            let arch_ref = &arch;
            let err = grad_check_many(
                move |tape, vars: &[Var]| {
                    let binding = crate::supernet::Binding::from_vars(vars.to_vec());
                    let normal = tape.leaf(arch_ref.matrix_tensor::<f64>(CellKind::Normal), false);
                    let reduce = tape.leaf(arch_ref.matrix_tensor::<f64>(CellKind::Reduce), false);
                    let av = ArchVars { normal, reduce };
                    let img = tape.leaf(images_ref.clone(), false);
                    let logits = net_ref.forward(
                        tape,
                        &binding,
                        img,
                        Some((&av, crate::search_space::Gating::Softmax)),
                        Head::Classifier,
                    )?;
                    tape.cross_entropy(logits, labels_ref)
                },
                &tensors,
                GradCheckOptions {
                    h: 1e-5,
                    max_coords: Some(2),
                    seed,
                },
            )?;
            weight_err = weight_err.max(err);
        }
        Ok(vec![
            ("network_alpha".to_string(), alpha_err),
            ("network_weights".to_string(), weight_err),
        ])
    }
}

mod config;
mod rundir;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hda_core::ablation::{append_results, run_ablation, sweep_tradeoffs, Experiment};
use hda_core::attrsel::{select_attributes, subset_study};
use hda_core::model::Checkpoint;
use hda_core::retrieval::{evaluate_bidirectional, CmcReport, DEFAULT_CMC_DEPTH};
use hda_core::synthdata::{generate_corpus, CorpusReader, Split, MANIFEST_FILE};
use hda_core::training::{run_step1, run_step2};
use hda_core::{Error, Result};

use config::{load_config, RunConfig};
use rundir::RunDir;

#[derive(Parser, Debug)]
#[command(name = "hda", version, about = "Sketch/photo retrieval with attribute-guided domain adaptation")]
struct Cli {
    /// TOML config file; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.weights.lambda2=0.5`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Shorthand for `--set corpus=DIR`.
    #[arg(long, global = true)]
    corpus: Option<PathBuf>,
    /// Root for run directories (default: $HDA_OUTPUT_ROOT or ./runs).
    #[arg(long, global = true)]
    output_root: Option<PathBuf>,
    /// Use this run directory instead of a fresh timestamped one.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic corpus into the corpus directory.
    GenData,
    /// Source pre-training.
    TrainStep1,
    /// Co-training from a step-1 checkpoint.
    TrainStep2 {
        #[arg(long)]
        step1: Option<PathBuf>,
    },
    /// CMC in both directions on a target split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "target_test")]
        split: String,
        #[arg(long, default_value_t = DEFAULT_CMC_DEPTH)]
        k: usize,
    },
    /// Rank attributes by how well a probe trained on predicted target
    /// labels recognizes them on the source.
    SelectAttrs {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Rank-1 against the number of attributes used.
    SubsetStudy,
    /// Train and evaluate ablation rows.
    Ablate {
        /// Comma-separated row ids.
        #[arg(long, value_delimiter = ',')]
        rows: Option<Vec<u8>>,
        /// Number of seeds, starting at the configured seed.
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// Vary each trade-off weight over a grid.
    Sweep {
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f64>>,
        #[arg(long)]
        seeds: Option<usize>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::TrainStep1 => "train-step1",
            Command::TrainStep2 { .. } => "train-step2",
            Command::Evaluate { .. } => "evaluate",
            Command::SelectAttrs { .. } => "select-attrs",
            Command::SubsetStudy => "subset-study",
            Command::Ablate { .. } => "ablate",
            Command::Sweep { .. } => "sweep",
        }
    }
}

fn parse_split(s: &str) -> Result<Split> {
    Split::ALL
        .into_iter()
        .find(|sp| sp.to_string() == s || sp.dir_name() == s)
        .ok_or_else(|| Error::Usage(format!("unknown split `{s}` (source, target_train, target_test)")))
}

fn seeds_from(base: u64, n: usize) -> Vec<u64> {
    (0..n as u64).map(|i| base + i).collect()
}

fn open_corpus(cfg: &RunConfig) -> Result<CorpusReader> {
    if !cfg.corpus.join(MANIFEST_FILE).exists() {
        return Err(Error::Config(format!(
            "missing input: no corpus manifest in {} (run gen-data first)",
            cfg.corpus.display()
        )));
    }
    CorpusReader::open(&cfg.corpus)
}

fn load_checkpoint(path: &Path, what: &str) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::Config(format!("missing input: {what} checkpoint {} not found", path.display())));
    }
    Checkpoint::load(path)
}

fn run(cli: Cli) -> Result<()> {
    let mut overrides = cli.overrides.clone();
    if let Some(s) = cli.seed {
        overrides.push(format!("seed={s}"));
    }
    if let Some(c) = &cli.corpus {
        overrides.push(format!("corpus={}", toml::Value::String(c.display().to_string())));
    }
    let mut cfg = load_config(cli.config.as_deref(), &overrides)?;
    match &cli.command {
        Command::Ablate { rows, seeds } => {
            if let Some(r) = rows {
                cfg.ablation.rows = r.clone();
            }
            if let Some(n) = seeds {
                cfg.ablation.seeds = *n;
            }
        }
        Command::Sweep { grid, seeds } => {
            if let Some(g) = grid {
                cfg.sweep.grid = g.clone();
            }
            if let Some(n) = seeds {
                cfg.sweep.seeds = *n;
            }
        }
        _ => {}
    }
    let name = cli.command.name();
    let root = cli.output_root.clone().unwrap_or_else(rundir::default_root);

    if let Command::GenData = cli.command {
        if cfg.corpus.join(MANIFEST_FILE).exists() {
            return Err(Error::Usage(format!("{} already holds a corpus", cfg.corpus.display())));
        }
        let dir = RunDir::create(&root, cli.run_dir.as_deref(), name)?;
        dir.snapshot(name, &cfg, None)?;
        let manifest = generate_corpus(&cfg.corpus, &cfg.generator, cfg.seed)?;
        let checksum = manifest.checksum()?;
        println!("corpus {} checksum {checksum}", cfg.corpus.display());
        return dir.index(name, cfg.seed, &format!("corpus={} checksum={checksum}", cfg.corpus.display()));
    }

    let reader = open_corpus(&cfg)?;
    let checksum = reader.manifest().checksum()?;
    // resolve inputs before creating the run directory
    let step1_ck = match &cli.command {
        Command::TrainStep2 { step1 } => {
            let p = step1.as_ref().ok_or_else(|| {
                Error::Config("missing input: train-step2 needs --step1 <checkpoint> from train-step1".into())
            })?;
            Some(load_checkpoint(p, "step-1")?)
        }
        _ => None,
    };
    let dir = RunDir::create(&root, cli.run_dir.as_deref(), name)?;
    dir.snapshot(name, &cfg, Some(checksum))?;

    let summary = match &cli.command {
        Command::GenData => unreachable!("handled above"),
        Command::TrainStep1 => {
            let source = {
                let _g = reader.audit().forbid(Split::TargetTest);
                reader.load_split(Split::Source)?
            };
            let out = run_step1(&cfg.train, &source, Some(&dir.path))?;
            let last = out.epoch_losses().last().copied().unwrap_or(f64::NAN);
            format!("final_loss={last}")
        }
        Command::TrainStep2 { .. } => {
            let (source, target) = {
                let _g = reader.audit().forbid(Split::TargetTest);
                (reader.load_split(Split::Source)?, reader.load_split(Split::TargetTrain)?)
            };
            let out = run_step2(&cfg.train, step1_ck.as_ref().expect("resolved"), &source, &target, Some(&dir.path))?;
            let last = out.epoch_losses().last().copied().unwrap_or(f64::NAN);
            format!("final_loss={last}")
        }
        Command::Evaluate { checkpoint, split, k } => {
            let ck = load_checkpoint(checkpoint, "model")?;
            let data = reader.load_split(parse_split(split)?)?;
            let b = evaluate_bidirectional(&ck.params, &data, *k)?;
            let reports = [
                CmcReport::new(&b.sketch_to_photo, cfg.seed),
                CmcReport::new(&b.photo_to_sketch, cfg.seed),
            ];
            dir.write_json("metrics.json", &reports)?;
            let line = format!(
                "s2p_rank1={:.4} p2s_rank1={:.4}",
                b.sketch_to_photo.rank1(),
                b.photo_to_sketch.rank1()
            );
            println!("{line}");
            line
        }
        Command::SelectAttrs { checkpoint } => {
            let ck = load_checkpoint(checkpoint, "trained model")?;
            let source = reader.load_split(Split::Source)?;
            // probe photos are the unlabeled target-test photos
            let photos = reader.load_split(Split::TargetTest)?;
            let (report, _) = select_attributes(
                &ck,
                reader.audit(),
                &photos,
                &source,
                &cfg.train,
                cfg.attrsel.min_accuracy,
                Some(&dir.path),
            )?;
            report.save(&dir.file("attributes.json"))?;
            for &i in &report.ranking {
                println!("{}\t{:.3}", report.names[i], report.accuracy[i]);
            }
            format!("selected={:?}", report.selected)
        }
        Command::SubsetStudy => {
            let exp = Experiment::load(&reader)?;
            let study = subset_study(
                &cfg.attrsel.k_range,
                cfg.attrsel.repeats,
                &cfg.train,
                &exp.source,
                &exp.target,
                &exp.test,
            )?;
            dir.write_json("subset_study.json", &study)?;
            let mut text = String::from("k\tmean\tstd\n");
            for p in &study.points {
                text.push_str(&format!("{}\t{:.4}\t{:.4}\n", p.k, p.mean, p.std));
            }
            print!("{text}");
            hda_core::write_atomic(&dir.file("subset_study.tsv"), text.as_bytes())?;
            format!("points={}", study.points.len())
        }
        Command::Ablate { .. } => {
            let mut exp = Experiment::load(&reader)?;
            let seeds = seeds_from(cfg.seed, cfg.ablation.seeds);
            let table = run_ablation(&mut exp, &cfg.train, &cfg.ablation.rows, &seeds)?;
            let runs: Vec<_> = table.rows.iter().flat_map(|(_, s)| s.runs.clone()).collect();
            append_results(&dir.file("results.tsv"), &runs, &table.provenance)?;
            append_results(&root.join("results.tsv"), &runs, &table.provenance)?;
            hda_core::write_atomic(&dir.file("ablation.tsv"), table.to_string().as_bytes())?;
            dir.write_json("ablation.json", &table)?;
            print!("{table}");
            format!("rows={:?} seeds={}", cfg.ablation.rows, seeds.len())
        }
        Command::Sweep { .. } => {
            let mut exp = Experiment::load(&reader)?;
            let seeds = seeds_from(cfg.seed, cfg.sweep.seeds);
            let curves = sweep_tradeoffs(&mut exp, &cfg.train, &cfg.sweep.grid, &seeds)?;
            let mut text = String::from("lambda\tvalue\tR1\tR1_std\n");
            for c in &curves {
                for (v, p) in c.values.iter().zip(&c.points) {
                    text.push_str(&format!("{}\t{v}\t{:.4}\t{:.4}\n", c.lambda, p.mean[0], p.std[0]));
                }
                let runs: Vec<_> = c.points.iter().flat_map(|p| p.runs.clone()).collect();
                append_results(&dir.file("results.tsv"), &runs, &exp.provenance)?;
            }
            hda_core::write_atomic(&dir.file("sweep.tsv"), text.as_bytes())?;
            dir.write_json("sweep.json", &curves)?;
            print!("{text}");
            format!("grid={:?} seeds={}", cfg.sweep.grid, seeds.len())
        }
    };
    dir.index(name, cfg.seed, &summary)?;
    eprintln!("run directory: {}", dir.path.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

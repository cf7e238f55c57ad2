use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use hptscreen_core::pipeline::{self, PipelineConfig, RunReport, Stage, StageOutcome};
use hptscreen_core::{Error, Result};

const AFTER_HELP: &str = "\
MANIFEST
  CSV, one record per row:  path,id,label[,format[,gain[,baseline]]]
    path      sample file, relative to the manifest's directory
    id        [A-Za-z0-9_.-]+, unique
    label     HPT or Normal (case-insensitive)
    format    text (one value per line) or i16le (raw little-endian int16);
              inferred from the extension when omitted (.bin/.dat/.raw = i16le)
    gain      i16le only: value = (raw - baseline) / gain   [default 200]
    baseline  i16le only                                     [default 0]
  Lines starting with '#' are comments; a first row starting with 'path' is a
  header. A row '@trim_prefix_hpt,N' sets how many leading samples are dropped
  from every HPT record (default 20000).

CONFIG (TOML)
  manifest = \"manifest.csv\"     # relative to the config file
  out_dir = \"out\"
  workers = 4                   # optional, default: available cores
  [denoise]  wavelet, levels, threshold_rule, per_level_sigma
  [segment]  segment_len
  [emd]      num_imfs, sd_stop, max_sift_iters, symmetry_tol, strict_crossing_count
  [features] entropy_threshold_eps, norm_p, apen_m, apen_r_factor,
             apen_max_samples, sure_enabled
  [tree]     max_depth, min_samples_split, min_samples_leaf, impurity
  [eval]     k_folds, shuffle_seed, stratified
  [output]   dump_segments, dump_imfs, export_denoised (text|i16le), export_gain

DUMPS
  segment/segments.bin and features/imfs.bin start with one text line
  'hptscreen-segment-dump schema=1 count=N len=L' (or 'hptscreen-imf-dump
  schema=1 count=N len=L imfs=K'). Each entry is a text line
  'record_id,offset,label' followed by L little-endian f64 samples (K IMFs
  then the residual for the IMF dump).

EXIT CODES
  0 success, 1 usage or configuration error, 2 data error,
  3 internal invariant violation";

#[derive(Parser, Debug)]
#[command(name = "hptscreen", version, about = "ECG hypertension screening pipeline", after_help = AFTER_HELP)]
struct Cli {
    /// Pipeline configuration file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the cross-validation shuffle seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (1 = sequential).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory; overrides the config's out_dir.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Validate the manifest and record per-record lengths and checksums.
    Ingest,
    /// Trim HPT prefixes and wavelet-denoise every record.
    Denoise,
    /// Cut denoised records into fixed-length segments.
    Segment,
    /// EMD every segment and compute the 45-feature table.
    Features,
    /// Fit a decision tree on the full feature table.
    Train,
    /// Cross-validate and write metrics.
    Evaluate,
    /// Run every stage in order and write report.json.
    RunAll,
    /// Compare the metrics of two run reports.
    Compare {
        first: PathBuf,
        second: PathBuf,
    },
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| Error::Config("--config <path> is required for this command".into()))?;
    let mut cfg = PipelineConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.eval.shuffle_seed = seed;
    }
    if let Some(w) = cli.workers {
        cfg.workers = Some(w);
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    if !cfg.manifest.is_file() {
        return Err(Error::Config(format!("manifest {} does not exist", cfg.manifest.display())));
    }
    Ok(cfg)
}

fn print_outcome(o: &StageOutcome) {
    if o.cached {
        println!("{:<9} cached", o.stage);
    } else {
        println!("{:<9} done in {} ms ({} files)", o.stage, o.elapsed_ms, o.outputs.len());
    }
}

fn run(cli: &Cli) -> Result<()> {
    let stage = match &cli.command {
        Command::Ingest => Stage::Ingest,
        Command::Denoise => Stage::Denoise,
        Command::Segment => Stage::Segment,
        Command::Features => Stage::Features,
        Command::Train => Stage::Train,
        Command::Evaluate => Stage::Evaluate,
        Command::RunAll => {
            let cfg = load_config(cli)?;
            let (outcomes, report) = pipeline::run_all(&cfg)?;
            outcomes.iter().for_each(print_outcome);
            if let (Some(m), Some(cm)) = (report.metrics, report.pooled) {
                print!("{}", hptscreen_core::eval::render_metrics_table(&[(format!("len={}", report.segment_len), m)]));
                print!("{}", cm.render());
            }
            println!("report: {}", pipeline::report_path(&cfg).display());
            return Ok(());
        }
        Command::Compare { first, second } => {
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
            let a = RunReport::load(first)?;
            let b = RunReport::load(second)?;
            let cmp = pipeline::compare_segmentations(&a, &b)?;
            print!("{}", cmp.render());
            for f in pipeline::write_comparison(&cmp, &out)? {
                println!("wrote {}", f.display());
            }
            return Ok(());
        }
    };
    let cfg = load_config(cli)?;
    let outcome = pipeline::run_stage(stage, &cfg)?;
    print_outcome(&outcome);
    if stage == Stage::Evaluate {
        let txt = cfg.out_dir.join("evaluate").join("metrics.txt");
        print_file(&txt);
        pipeline::write_report(&cfg)?;
    }
    Ok(())
}

fn print_file(path: &Path) {
    if let Ok(text) = std::fs::read_to_string(path) {
        print!("{}", text.lines().skip(1).map(|l| format!("{l}\n")).collect::<String>());
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

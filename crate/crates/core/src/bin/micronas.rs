use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Map, Value};

use micronas::data::{DatasetSpec, WindowedDataset};
use micronas::deploy::{evaluate, export_model, import_model, Storage, TrainedModel};
use micronas::dnas::{write_trace, SearchConfig};
use micronas::hwcost::{characterize, enumerate_signatures, DeviceProfile, LatencyTable};
use micronas::pipeline::{
    default_space, infeasibility, layered, read_input, read_json, retrain_quantized, run_sweep, search_checked,
    write_sweep, ConfigFile, Error, Result, SweepGrid,
};
use micronas::space::{cardinality, ArchitectureDescriptor, SearchSpaceConfig, SpaceLayout};
use micronas::tensor::Tensor3;

#[derive(Parser)]
#[command(name = "micronas", version, about = "Hardware-aware architecture search for time-series classifiers on microcontrollers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a latency table for every operator a search space can use.
    Characterize {
        #[arg(long)]
        space: PathBuf,
        /// Device profile; the built-in simulated device when omitted.
        #[arg(long)]
        profile: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Search an architecture under latency and memory targets.
    Search(SearchArgs),
    /// Train a found architecture from scratch.
    Retrain(RetrainArgs),
    /// Accuracy and macro-F1 on the test split.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Also evaluate the int8 model.
        #[arg(long)]
        int8: bool,
    },
    /// Rewrite a model file, optionally as int8 only.
    Export {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        int8: bool,
        /// Calibration data for models without int8 parameters.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Search, retrain and evaluate over a grid of targets.
    Sweep(SweepArgs),
    /// Cell counts and number of architectures of a space.
    Cardinality {
        #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
        space: Option<PathBuf>,
        /// Named configuration: uci-har.
        #[arg(long)]
        preset: Option<String>,
        /// An externally quoted architecture count to compare against.
        #[arg(long)]
        reference: Option<f64>,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    data: PathBuf,
    /// Search space JSON; derived from the data when omitted.
    #[arg(long)]
    space: Option<PathBuf>,
    /// JSON with optional `space`, `search` and `retrain` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SearchArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    table: PathBuf,
    #[arg(long)]
    lat_target_ms: Option<f64>,
    #[arg(long)]
    mem_target_bytes: Option<f64>,
    #[arg(long)]
    no_lat_loss: bool,
    #[arg(long)]
    no_mem_loss: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Trace CSV; next to the descriptor when omitted.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct RetrainArgs {
    #[arg(long)]
    descriptor: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    fake_quant: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    table: PathBuf,
    /// `lat=10,25,50,100` or `mem=...`.
    #[arg(long)]
    grid: SweepGrid,
    /// Comma-separated seeds; `--seed` when omitted.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    retrain_epochs: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

fn load_data(path: &Path) -> Result<WindowedDataset> {
    read_input("--data", path)?;
    Ok(DatasetSpec::load(path)?.build()?)
}

fn load_table(path: &Path) -> Result<LatencyTable> {
    read_input("--table", path)?;
    Ok(LatencyTable::load(path)?)
}

fn load_config(path: Option<&Path>) -> Result<ConfigFile> {
    path.map_or(Ok(ConfigFile::default()), |p| read_json("--config", p))
}

/// Flags that were given, as a JSON object for layering.
fn flags(pairs: &[(&str, Option<Value>)]) -> Value {
    let map: Map<String, Value> = pairs.iter().filter_map(|(k, v)| v.clone().map(|v| ((*k).to_string(), v))).collect();
    Value::Object(map)
}

fn resolve_space(common: &Common, data: &WindowedDataset, config: &ConfigFile) -> Result<SearchSpaceConfig> {
    let file: Option<Value> = common.space.as_deref().map(|p| read_json("--space", p)).transpose()?;
    let space: SearchSpaceConfig = layered(&default_space(data), &[config.space.as_ref(), file.as_ref()])?;
    space.validate()?;
    Ok(space)
}

fn cmd_characterize(space: &Path, profile: Option<&Path>, out: &Path) -> Result<()> {
    let space: SearchSpaceConfig = read_json("--space", space)?;
    let profile = match profile {
        Some(p) => {
            read_input("--profile", p)?;
            DeviceProfile::load(p)?
        }
        None => DeviceProfile::default(),
    };
    let layout = SpaceLayout::new(&space)?;
    let table = characterize(&profile, &enumerate_signatures(&layout))?;
    table.save(out)?;
    println!("device={} entries={} out={}", table.device, table.len(), out.display());
    Ok(())
}

fn cmd_search(a: &SearchArgs) -> Result<()> {
    let config = load_config(a.common.config.as_deref())?;
    let data = load_data(&a.common.data)?;
    let table = load_table(&a.table)?;
    let space = resolve_space(&a.common, &data, &config)?;
    let cli = flags(&[
        ("lat_target_ms", a.lat_target_ms.map(Value::from)),
        ("mem_target_bytes", a.mem_target_bytes.map(Value::from)),
        ("epochs", a.epochs.map(Value::from)),
        ("batch_size", a.batch_size.map(Value::from)),
        ("seed", a.common.seed.map(Value::from)),
    ]);
    let mut sc: SearchConfig = layered(&SearchConfig::default(), &[config.search.as_ref(), Some(&cli)])?;
    if a.no_lat_loss {
        sc.lat_target_ms = None;
    }
    if a.no_mem_loss {
        sc.mem_target_bytes = None;
    }
    sc.validate()?;
    let outcome = search_checked(&space, &data, &table, &sc)?;
    std::fs::write(&a.out, outcome.descriptor.to_json())?;
    let trace = a.trace.clone().unwrap_or_else(|| a.out.with_extension("trace.csv"));
    write_trace(BufWriter::new(File::create(&trace)?), &outcome.trace)?;
    println!(
        "latency_ms={} peak_mem_bytes={} steps={} out={} trace={}",
        outcome.estimate.latency_ms,
        outcome.estimate.peak_mem_bytes,
        outcome.trace.len(),
        a.out.display(),
        trace.display()
    );
    match infeasibility(&outcome, &sc) {
        Some(msg) => Err(Error::Infeasible(msg)),
        None => Ok(()),
    }
}

fn cmd_retrain(a: &RetrainArgs) -> Result<()> {
    let config = load_config(a.config.as_deref())?;
    let desc = ArchitectureDescriptor::from_json(&read_input("--descriptor", &a.descriptor)?)?;
    let data = load_data(&a.data)?;
    let cli = flags(&[
        ("epochs", a.epochs.map(Value::from)),
        ("seed", a.seed.map(Value::from)),
        ("fake_quant", a.fake_quant.then_some(Value::Bool(true))),
    ]);
    let rc = layered(&micronas::deploy::RetrainConfig::default(), &[config.retrain.as_ref(), Some(&cli)])?;
    let model = retrain_quantized(&desc, &data, &rc)?;
    export_model(&model, &a.out, Storage::Float)?;
    println!(
        "val_accuracy={} best_epoch={} out={}",
        model.metadata.val_accuracy,
        model.metadata.best_epoch,
        a.out.display()
    );
    Ok(())
}

fn load_model(path: &Path) -> Result<TrainedModel> {
    read_input("--model", path)?;
    Ok(import_model(path)?)
}

fn calibrate(model: &mut TrainedModel, data: &WindowedDataset) -> Result<()> {
    let calibration: Vec<Tensor3> = data.train().iter().map(|(x, _)| (*x).clone()).collect();
    model.quantize(&calibration)?;
    Ok(())
}

fn cmd_eval(model: &Path, data: &Path, int8: bool) -> Result<()> {
    let mut model = load_model(model)?;
    let data = load_data(data)?;
    if model.quant.is_none() && int8 {
        calibrate(&mut model, &data)?;
    }
    let test = data.test();
    let f = evaluate(&model, &test, false)?;
    println!("split=test precision=float accuracy={} macro_f1={}", f.accuracy, f.macro_f1);
    if int8 {
        let q = evaluate(&model, &test, true)?;
        println!("split=test precision=int8 accuracy={} macro_f1={}", q.accuracy, q.macro_f1);
    }
    Ok(())
}

fn cmd_export(model: &Path, out: &Path, int8: bool, data: Option<&Path>) -> Result<()> {
    let mut model = load_model(model)?;
    if int8 && model.quant.is_none() {
        let data = data.ok_or_else(|| Error::Usage("--data is required to quantize a model without int8 parameters".into()))?;
        calibrate(&mut model, &load_data(data)?)?;
    }
    export_model(&model, out, if int8 { Storage::Int8 } else { Storage::Float })?;
    println!("bytes={} out={}", std::fs::metadata(out)?.len(), out.display());
    Ok(())
}

fn cmd_sweep(a: &SweepArgs) -> Result<()> {
    let config = load_config(a.common.config.as_deref())?;
    let data = load_data(&a.common.data)?;
    let table = load_table(&a.table)?;
    let space = resolve_space(&a.common, &data, &config)?;
    let sc: SearchConfig = layered(
        &SearchConfig::default(),
        &[config.search.as_ref(), Some(&flags(&[("epochs", a.epochs.map(Value::from))]))],
    )?;
    let rc = layered(
        &micronas::deploy::RetrainConfig::default(),
        &[config.retrain.as_ref(), Some(&flags(&[("epochs", a.retrain_epochs.map(Value::from))]))],
    )?;
    let seeds = if a.seeds.is_empty() {
        vec![a.common.seed.unwrap_or(sc.seed)]
    } else {
        a.seeds.clone()
    };
    let rows = run_sweep(&space, &data, &table, &a.grid, &seeds, &sc, &rc)?;
    write_sweep(BufWriter::new(File::create(&a.out)?), &rows)?;
    println!("rows={} out={}", rows.len(), a.out.display());
    Ok(())
}

/// Configuration of the public six-activity smartphone benchmark: windows
/// of 128 samples over nine channels.
fn uci_har() -> SearchSpaceConfig {
    SearchSpaceConfig::new(128, 9, 6)
}

fn cmd_cardinality(space: Option<&Path>, preset: Option<&str>, reference: Option<f64>) -> Result<()> {
    let (cfg, reference) = match (space, preset) {
        (Some(p), _) => (read_json::<SearchSpaceConfig>("--space", p)?, reference),
        (None, Some("uci-har")) => (uci_har(), reference.or(Some(1e13))),
        (None, Some(other)) => return Err(Error::Usage(format!("unknown preset {other:?}; known: uci-har"))),
        (None, None) => return Err(Error::Usage("--space or --preset is required".into())),
    };
    cfg.validate()?;
    let sf = cfg.num_sensor_fusion_cells();
    let n = cardinality(&cfg)?;
    println!(
        "{}",
        json!({
            "time_reduce_cells": cfg.num_time_reduce_cells(),
            "sensor_fusion_cells": sf.total,
            "sensor_fusion_stride2_cells": sf.stride2,
            "architectures": n.to_string(),
        })
    );
    if let Some(r) = reference {
        let computed: f64 = n.to_string().parse().unwrap_or(f64::INFINITY);
        let ratio = computed / r;
        if !(0.1..=10.0).contains(&ratio) {
            println!(
                "discrepancy: computed {n} architectures, reference figure {r:e}; the cell-count formulas give {} Sensor-Fusion cells for ts_s={} and ts_ms={}, and the difference is left unreconciled",
                sf.total, cfg.ts_s, cfg.ts_ms
            );
        } else {
            println!("reference: computed {n} architectures agrees with {r:e} within one order of magnitude");
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Characterize { space, profile, out } => cmd_characterize(&space, profile.as_deref(), &out),
        Command::Search(a) => cmd_search(&a),
        Command::Retrain(a) => cmd_retrain(&a),
        Command::Eval { model, data, int8 } => cmd_eval(&model, &data, int8),
        Command::Export { model, out, int8, data } => cmd_export(&model, &out, int8, data.as_deref()),
        Command::Sweep(a) => cmd_sweep(&a),
        Command::Cardinality { space, preset, reference } => cmd_cardinality(space.as_deref(), preset.as_deref(), reference),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let first = e.to_string();
            let msg = first.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("{}", Error::Usage(msg.to_string()).line());
            eprint!("{}", e.render());
            return ExitCode::from(micronas::pipeline::EXIT_USAGE as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

//! `rtformer`: train, fuse, verify and cost the toy spiking transformer.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rtformer_core::energy::{compare_energy, estimate_energy, EnergyReport};
use rtformer_core::io::events::{gen_toy_events, is_test_index, load_event_dir, toy_event_dataset};
use rtformer_core::io::{encode_spikes, load_checkpoint, load_idx, read_checkpoint, save_checkpoint, write_atomic};
use rtformer_core::io::{Encoding, IdxData};
use rtformer_core::model::train::{evaluate, fit};
use rtformer_core::model::{build, parse_kv, verify_fusion, Dataset, RtformerConfig, RtformerNet, TrainConfig};
use rtformer_core::model::{VerifyOptions, VerifyReport};
use rtformer_core::{Error, Tensor};

#[derive(Parser, Debug)]
#[command(name = "rtformer", version, about = "Spiking transformer with fusable spatial cores")]
struct Cli {
    /// Seed for data generation, initialization and shuffling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// `key=value` file with model and training settings.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output path (file, directory or prefix, depending on the command).
    #[arg(long, global = true, value_name = "PATH")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic moving-bar event set plus manifest.csv.
    GenData {
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long, default_value_t = 400)]
        samples: usize,
    },
    /// Train a network and write a checkpoint and per-epoch metrics.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        epochs: Option<usize>,
        /// Metrics CSV (defaults to the checkpoint path with `.metrics.csv`).
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Accuracy and loss of a checkpoint on the held-out split.
    Eval {
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Fuse branches and fold thresholds into an inference checkpoint.
    Fuse { checkpoint: PathBuf },
    /// Compare an unfused checkpoint against its fused form.
    Verify {
        checkpoint: PathBuf,
        /// A fused checkpoint to check; fused in memory when omitted.
        #[arg(long)]
        fused: Option<PathBuf>,
        /// Max relative logit error per sample.
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        /// Inputs to compare.
        #[arg(long, default_value_t = 100)]
        samples: usize,
        /// Half-width of the threshold band excused from spike identity.
        #[arg(long, default_value_t = 1e-6)]
        band: f64,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Per-layer MAC/AC counts and energy as a table, CSV and SVG.
    Energy {
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = Probe::Data)]
        probe: Probe,
        /// Probe batch size.
        #[arg(long, default_value_t = 16)]
        samples: usize,
        #[command(flatten)]
        data: DataArgs,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Probe {
    Zeros,
    Random,
    Data,
}

#[derive(Args, Debug, Clone)]
struct DataArgs {
    /// Event directory with manifest.csv; a generated set is used otherwise.
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    /// IDX image file (with --labels) instead of events.
    #[arg(long, value_name = "PATH", requires = "labels", conflicts_with = "data")]
    images: Option<PathBuf>,
    #[arg(long, value_name = "PATH", requires = "images")]
    labels: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = EncodingArg::Direct)]
    encoding: EncodingArg,
    /// Size of the generated set when no data is given.
    #[arg(long, default_value_t = 400)]
    generated: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum EncodingArg {
    Direct,
    Rate,
}

enum Failure {
    Usage(String),
    Verify(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Mode { .. } | Error::InvalidArgument(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

struct Settings {
    model: RtformerConfig,
    train: TrainConfig,
}

fn settings(cli: &Cli) -> Result<Settings, Failure> {
    let mut model = RtformerConfig::default();
    let mut train = TrainConfig::default();
    if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
        for (k, v) in parse_kv(&text)? {
            if !model.apply(&k, &v)? && !train.apply(&k, &v)? {
                return Err(Failure::Usage(format!("unknown config key `{k}`")));
            }
        }
    }
    if let Some(seed) = cli.seed {
        model.seed = seed;
        train.seed = seed;
    }
    model.validate()?;
    train.validate()?;
    Ok(Settings { model, train })
}

fn load_data(args: &DataArgs, cfg: &RtformerConfig, seed: u64) -> Result<Dataset, Failure> {
    let mut data = if let (Some(images), Some(labels)) = (&args.images, &args.labels) {
        let IdxData::Images(img) = load_idx(images)? else {
            return Err(Failure::Usage(format!("{} holds labels, not images", images.display())));
        };
        let IdxData::Labels(lab) = load_idx(labels)? else {
            return Err(Failure::Usage(format!("{} holds images, not labels", labels.display())));
        };
        let scheme = match args.encoding {
            EncodingArg::Direct => Encoding::Direct,
            EncodingArg::Rate => Encoding::Rate,
        };
        let spikes = encode_spikes(&img, cfg.steps, scheme, seed)?;
        let samples = (0..img.shape()[0])
            .map(|i| sample_of(&spikes, i))
            .collect::<rtformer_core::Result<Vec<_>>>()?;
        Dataset::new(samples, lab, cfg.classes)?
    } else if let Some(dir) = &args.data {
        load_event_dir(dir, cfg.steps)?
    } else {
        toy_event_dataset(cfg.classes, args.generated, cfg.steps, seed)?
    };
    if data.classes > cfg.classes {
        return Err(Failure::Usage(format!(
            "data has {} classes but the model has {}",
            data.classes, cfg.classes
        )));
    }
    data.classes = cfg.classes;
    Ok(data)
}

// Sample `i` of a `[T, N, C, H, W]` tensor as `[T, C, H, W]`.
fn sample_of(x: &Tensor<f32>, i: usize) -> rtformer_core::Result<Tensor<f32>> {
    let steps = x.shape()[0];
    let parts = (0..steps)
        .map(|t| x.index_axis0(t)?.index_axis0(i))
        .collect::<rtformer_core::Result<Vec<_>>>()?;
    Tensor::stack(&parts)
}

fn split(data: &Dataset) -> (Dataset, Dataset) {
    let (test, train) = data.split(is_test_index);
    (train, test)
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

fn gen_data(cli: &Cli, classes: Option<usize>, samples: usize) -> Outcome {
    let s = settings(cli)?;
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("toy-events"));
    let classes = classes.unwrap_or(s.model.classes);
    gen_toy_events(&dir, classes, samples, s.model.seed)?;
    println!("wrote {samples} samples ({classes} classes) to {}", dir.display());
    Ok(())
}

fn train(cli: &Cli, args: &DataArgs, epochs: Option<usize>, metrics: Option<&Path>) -> Outcome {
    let mut s = settings(cli)?;
    if let Some(n) = epochs {
        s.train.epochs = n;
    }
    let data = load_data(args, &s.model, s.model.seed)?;
    let (train_set, test_set) = split(&data);
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("rtformer.rtfs"));
    let metrics = metrics
        .map(Path::to_path_buf)
        .unwrap_or_else(|| sibling(&out, ".metrics.csv"));

    let mut net = build(&s.model)?;
    println!(
        "training {} parameters on {} samples ({} held out)",
        net.trainable_count(),
        train_set.len(),
        test_set.len()
    );
    let test = (!test_set.is_empty()).then_some(&test_set);
    let history = fit(&mut net, &train_set, test, &s.train, |m| {
        let t = m
            .test_accuracy
            .map_or("-".to_string(), |a| format!("{:.2}%", 100.0 * a));
        println!(
            "epoch {:>3}  loss {:.4}  train {:.2}%  test {t}",
            m.epoch,
            m.loss,
            100.0 * m.accuracy
        );
    })?;
    save_checkpoint(&out, &net)?;

    let mut csv = String::from("epoch,loss,train_accuracy,test_accuracy\n");
    for m in &history {
        let t = m.test_accuracy.map_or(String::new(), |a| a.to_string());
        csv.push_str(&format!("{},{},{},{t}\n", m.epoch, m.loss, m.accuracy));
    }
    write_atomic(&metrics, csv.as_bytes())?;
    println!("wrote {} and {}", out.display(), metrics.display());
    Ok(())
}

fn eval(cli: &Cli, checkpoint: &Path, args: &DataArgs) -> Outcome {
    let net = load_checkpoint(checkpoint)?;
    let seed = cli.seed.unwrap_or(net.config.seed);
    let data = load_data(args, &net.config, seed)?;
    let (_, test) = split(&data);
    let set = if test.is_empty() { &data } else { &test };
    let r = evaluate(&net, set, 16)?;
    println!(
        "samples {}  loss {:.4}  accuracy {:.2}%",
        set.len(),
        r.loss,
        100.0 * r.accuracy
    );
    Ok(())
}

fn fuse(cli: &Cli, checkpoint: &Path) -> Outcome {
    let ck = read_checkpoint(checkpoint)?;
    if ck.is_fused() {
        return Err(Failure::Usage(format!("{} is already fused", checkpoint.display())));
    }
    let net = ck.into_net()?;
    let fused = net.fuse_network()?;
    let out = cli.out.clone().unwrap_or_else(|| sibling(checkpoint, ".fused.rtfs"));
    save_checkpoint(&out, &fused)?;
    let report = format!(
        "trainable parameters: {} -> {}\nstored floats: {} -> {}\n",
        net.trainable_count(),
        fused.trainable_count(),
        net.stored_floats(),
        fused.stored_floats()
    );
    let report_path = sibling(&out, ".params.txt");
    write_atomic(&report_path, report.as_bytes())?;
    print!("{report}");
    println!("wrote {} and {}", out.display(), report_path.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn verify(
    cli: &Cli,
    checkpoint: &Path,
    fused: Option<&Path>,
    tolerance: f64,
    samples: usize,
    band: f64,
    args: &DataArgs,
) -> Outcome {
    if !(tolerance > 0.0 && band >= 0.0) || samples == 0 {
        return Err(Failure::Usage("tolerance and samples must be positive".into()));
    }
    let net = load_checkpoint(checkpoint)?;
    if net.is_fused() {
        return Err(Failure::Usage(format!(
            "{} is fused; pass the unfused checkpoint",
            checkpoint.display()
        )));
    }
    let reference = net.cast::<f64>();
    let candidate = match fused {
        Some(p) => {
            let f = load_checkpoint(p)?;
            if !f.is_fused() {
                return Err(Failure::Usage(format!("{} is not fused", p.display())));
            }
            f.cast::<f64>()
        }
        None => reference.fuse_network()?,
    };
    let seed = cli.seed.unwrap_or(net.config.seed.wrapping_add(1));
    let args = DataArgs {
        generated: samples,
        ..args.clone()
    };
    let mut data = load_data(&args, &net.config, seed)?;
    data.samples.truncate(samples);
    data.labels.truncate(samples);
    let report: VerifyReport = verify_fusion(
        &reference,
        &candidate,
        &data.cast::<f64>(),
        VerifyOptions { tolerance, band },
    )?;
    print!("{}", report.summary());
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Verify("fused network disagrees with the reference".into()))
    }
}

fn probe_batch(
    net: &RtformerNet,
    probe: Probe,
    samples: usize,
    args: &DataArgs,
    seed: u64,
) -> Result<Tensor<f32>, Failure> {
    let c = &net.config;
    let shape = [c.steps, samples, c.in_channels, c.height, c.width];
    Ok(match probe {
        Probe::Zeros => Tensor::zeros(&shape),
        Probe::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Tensor::from_fn(&shape, |_| if rng.gen::<f64>() < 0.2 { 1.0 } else { 0.0 })
        }
        Probe::Data => {
            let data = load_data(args, c, seed)?;
            let (_, test) = split(&data);
            let set = if test.is_empty() { &data } else { &test };
            let n = samples.min(set.len());
            set.batch(&(0..n).collect::<Vec<_>>())?.0
        }
    })
}

fn energy(cli: &Cli, checkpoint: &Path, probe: Probe, samples: usize, args: &DataArgs) -> Outcome {
    if samples == 0 {
        return Err(Failure::Usage("samples must be positive".into()));
    }
    let net = load_checkpoint(checkpoint)?;
    let seed = cli.seed.unwrap_or(net.config.seed);
    let x = probe_batch(&net, probe, samples, args, seed)?;
    let report: EnergyReport = if net.is_fused() {
        estimate_energy(&net, &x)?
    } else {
        let cmp = compare_energy(&net, &x)?;
        println!(
            "fused network: {:.1} fewer ACs, {} fewer MACs, {:.1} pJ saved per sample",
            cmp.ac_delta(),
            cmp.mac_delta(),
            cmp.unfused.total_pj - cmp.fused.total_pj
        );
        cmp.unfused
    };
    let prefix = cli.out.clone().unwrap_or_else(|| PathBuf::from("energy"));
    let table = report.to_table();
    let with = |ext: &str| {
        let mut p = prefix.clone().into_os_string();
        p.push(ext);
        PathBuf::from(p)
    };
    write_atomic(&with(".txt"), table.as_bytes())?;
    write_atomic(&with(".csv"), report.to_csv()?.as_bytes())?;
    write_atomic(&with(".svg"), report.to_svg().as_bytes())?;
    print!("{table}");
    Ok(())
}

fn run(cli: &Cli) -> Outcome {
    match &cli.command {
        Command::GenData { classes, samples } => gen_data(cli, *classes, *samples),
        Command::Train { data, epochs, metrics } => train(cli, data, *epochs, metrics.as_deref()),
        Command::Eval { checkpoint, data } => eval(cli, checkpoint, data),
        Command::Fuse { checkpoint } => fuse(cli, checkpoint),
        Command::Verify {
            checkpoint,
            fused,
            tolerance,
            samples,
            band,
            data,
        } => verify(cli, checkpoint, fused.as_deref(), *tolerance, *samples, *band, data),
        Command::Energy {
            checkpoint,
            probe,
            samples,
            data,
        } => energy(cli, checkpoint, *probe, *samples, data),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Verify(msg)) => {
            eprintln!("verification failed: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

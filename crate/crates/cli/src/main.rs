mod config;

use std::fmt::Display;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use srlvc::codec::{
    compress_volume_with, decompress_volume_with, read_stream_header, CodecOptions, STREAM_MAGIC,
};
use srlvc::error::{CodecError, TrainError, WeightsError};
use srlvc::model::{init_params, parameter_count, ModelParams};
use srlvc::train::{
    default_scale_l, grad_check, grad_check_problem, train_with_callback, EpochStats,
};
use srlvc::volume::{bpp, read_rvf, synth_volume, write_rvf, SynthKind, Volume, RVF_MAGIC};
use srlvc::weights::{load_weights, read_weights_header, save_weights, WeightDtype, WEIGHTS_MAGIC};

use config::CliConfig;

const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Process exit status; the numeric values are part of the interface.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Exit {
    Config = 2,
    Data = 3,
    Numeric = 4,
    Digest = 5,
    Corrupt = 6,
    GradCheck = 7,
}

#[derive(Debug)]
struct Failure {
    exit: Exit,
    message: String,
}

fn fail(exit: Exit, message: impl Display) -> Failure {
    Failure {
        exit,
        message: message.to_string(),
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        let exit = match e {
            TrainError::NonFiniteLoss { .. } => Exit::Numeric,
            TrainError::Config(_) => Exit::Config,
            TrainError::MixedDepth(..) | TrainError::DepthMismatch { .. } => Exit::Data,
        };
        fail(exit, e)
    }
}

impl From<CodecError> for Failure {
    fn from(e: CodecError) -> Self {
        let exit = match e {
            CodecError::DigestMismatch => Exit::Digest,
            CodecError::DepthMismatch { .. } | CodecError::Volume(_) => Exit::Data,
            _ => Exit::Corrupt,
        };
        fail(exit, e)
    }
}

impl From<WeightsError> for Failure {
    fn from(e: WeightsError) -> Self {
        fail(Exit::Data, format!("weights: {e}"))
    }
}

type CliResult = Result<(), Failure>;

#[derive(Parser)]
#[command(
    name = "srlvc",
    version,
    about = "Learned lossless volumetric image codec"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a directory of RVF volumes.
    Train(TrainArgs),
    /// Compress an RVF volume into an SRLV stream.
    Compress {
        #[arg(long)]
        weights: PathBuf,
        input: PathBuf,
        output: PathBuf,
        /// Evaluate with the hidden state forced to zero.
        #[arg(long)]
        zero_hidden: bool,
    },
    /// Decompress an SRLV stream back to RVF.
    Decompress {
        #[arg(long)]
        weights: PathBuf,
        input: PathBuf,
        output: PathBuf,
        #[arg(long)]
        zero_hidden: bool,
    },
    /// Compress every volume in a directory and report BPP.
    Eval {
        #[arg(long)]
        weights: PathBuf,
        data_dir: PathBuf,
        /// Worker threads (output order is unaffected).
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        zero_hidden: bool,
    },
    /// Check analytic gradients against central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        coords: usize,
        #[arg(long, default_value_t = 1e-4)]
        epsilon: f64,
    },
    /// Write a synthetic RVF volume.
    Synth {
        #[arg(long, value_parser = parse_kind)]
        kind: SynthKind,
        /// Dimensions as TxHxW.
        #[arg(long, value_parser = parse_dims)]
        dims: (usize, usize, usize),
        #[arg(long, default_value_t = 8)]
        depth: u8,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        output: PathBuf,
    },
    /// Print the header of an SRLV, SRLW or RVF file.
    Inspect { file: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum Dtype {
    F32,
    F16,
}

#[derive(Args)]
struct TrainArgs {
    /// key = value configuration file; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Output SRLW weights path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Loss curve CSV path (default: weights path with a .csv extension).
    #[arg(long)]
    loss_csv: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    updated_stride: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    scale_l: Option<f64>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    clip_norm: Option<f64>,
    #[arg(long)]
    shuffle: bool,
    #[arg(long)]
    zero_hidden: bool,
    /// Write a checkpoint every N epochs.
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long, value_enum, default_value = "f32")]
    dtype: Dtype,
}

impl TrainArgs {
    fn flags(&self) -> CliConfig {
        CliConfig {
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            updated_stride: self.updated_stride,
            seed: self.seed,
            shuffle: self.shuffle.then_some(true),
            clip_norm: self.clip_norm,
            zero_hidden: self.zero_hidden.then_some(true),
            scale_l: self.scale_l,
            m: self.m,
            data_dir: self.data_dir.clone(),
            out: self.out.clone(),
            loss_csv: self.loss_csv.clone(),
            checkpoint_every: self.checkpoint_every,
            ..Default::default()
        }
    }
}

fn parse_kind(s: &str) -> Result<SynthKind, String> {
    s.parse()
}

fn parse_dims(s: &str) -> Result<(usize, usize, usize), String> {
    let parts: Vec<usize> = s
        .split('x')
        .map(|p| p.parse().map_err(|_| format!("bad dimension `{p}`")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [t, h, w] => Ok((t, h, w)),
        _ => Err("expected TxHxW".into()),
    }
}

fn read_file(path: &Path, exit: Exit) -> Result<Vec<u8>, Failure> {
    fs::read(path).map_err(|e| fail(exit, format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult {
    fs::write(path, bytes).map_err(|e| fail(Exit::Data, format!("{}: {e}", path.display())))
}

fn read_volume(path: &Path) -> Result<Volume, Failure> {
    read_rvf(&read_file(path, Exit::Data)?)
        .map_err(|e| fail(Exit::Data, format!("{}: {e}", path.display())))
}

fn read_weights(path: &Path) -> Result<ModelParams, Failure> {
    Ok(load_weights(&read_file(path, Exit::Data)?)?)
}

/// All `.rvf` files of a directory, sorted by name.
fn load_dataset(dir: &Path) -> Result<Vec<(PathBuf, Volume)>, Failure> {
    let entries =
        fs::read_dir(dir).map_err(|e| fail(Exit::Data, format!("{}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "rvf"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(fail(
            Exit::Data,
            format!("{}: no .rvf volumes found", dir.display()),
        ));
    }
    paths
        .into_iter()
        .map(|p| read_volume(&p).map(|v| (p, v)))
        .collect()
}

fn cmd_train(args: TrainArgs) -> CliResult {
    let file_cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| fail(Exit::Config, format!("{}: {e}", path.display())))?;
            CliConfig::parse(&text).map_err(|e| fail(Exit::Config, e))?
        }
        None => CliConfig::default(),
    };
    let cfg = file_cfg.overridden_by(args.flags());
    let tc = cfg.train_config();
    tc.validate()?;
    let data_dir = cfg
        .data_dir
        .clone()
        .ok_or_else(|| fail(Exit::Config, "no data directory given (data_dir)"))?;
    let out = cfg
        .out
        .clone()
        .ok_or_else(|| fail(Exit::Config, "no output weights path given (out)"))?;
    let m = cfg.m.unwrap_or(16);
    if m == 0 {
        return Err(fail(Exit::Config, "m must be at least 1"));
    }
    if cfg.scale_l.is_some_and(|l| !(l > 0.0 && l.is_finite())) {
        return Err(fail(Exit::Config, "scale_l must be positive"));
    }
    let dtype = match args.dtype {
        Dtype::F32 => WeightDtype::F32,
        Dtype::F16 => WeightDtype::F16,
    };

    let dataset: Vec<Volume> = load_dataset(&data_dir)?
        .into_iter()
        .map(|(_, v)| v)
        .collect();
    let depth = dataset[0].depth_bits();
    let scale_l = cfg.scale_l.unwrap_or_else(|| default_scale_l(depth));
    let init = init_params(tc.seed, m, depth, scale_l);
    println!("parameter_count\t{}", parameter_count(&init));
    println!("volumes\t{}", dataset.len());

    let mut checkpoint_err = None;
    let outcome = train_with_callback(&dataset, &init, &tc, |s: &EpochStats, p| {
        eprintln!(
            "epoch {:>5}  loss {:>12.3} bits  {:.4} bpp",
            s.epoch + 1,
            s.mean_loss_bits,
            s.mean_bpp
        );
        if let Some(n) = cfg.checkpoint_every.filter(|&n| n > 0) {
            if (s.epoch + 1).is_multiple_of(n) {
                let path = out.with_extension(format!("epoch{}.srlw", s.epoch + 1));
                if let Err(e) = fs::write(&path, save_weights(p, dtype)) {
                    checkpoint_err
                        .get_or_insert(fail(Exit::Data, format!("{}: {e}", path.display())));
                }
            }
        }
    })?;
    if let Some(e) = checkpoint_err {
        return Err(e);
    }

    write_file(&out, &save_weights(&outcome.params, dtype))?;
    let csv_path = cfg
        .loss_csv
        .clone()
        .unwrap_or_else(|| out.with_extension("csv"));
    let mut csv = String::from("epoch,mean_loss_bits,mean_bpp\n");
    for s in &outcome.curve {
        csv.push_str(&format!(
            "{},{},{}\n",
            s.epoch + 1,
            s.mean_loss_bits,
            s.mean_bpp
        ));
    }
    write_file(&csv_path, csv.as_bytes())?;
    if let Some(last) = outcome.curve.last() {
        println!("final_train_bpp\t{:.6}", last.mean_bpp);
    }
    println!("weights\t{}", out.display());
    println!("loss_curve\t{}", csv_path.display());
    Ok(())
}

fn cmd_compress(weights: &Path, input: &Path, output: &Path, zero_hidden: bool) -> CliResult {
    let p = read_weights(weights)?;
    let v = read_volume(input)?;
    let (bytes, stats) = compress_volume_with(&v, &p, CodecOptions { zero_hidden })?;
    write_file(output, &bytes)?;
    println!("input\tbytes\tbpp\tescapes\traw_slices");
    println!(
        "{}\t{}\t{:.6}\t{}\t{}",
        input.display(),
        bytes.len(),
        bpp(&v, bytes.len() as u64),
        stats.escapes,
        stats.raw_slices
    );
    Ok(())
}

fn cmd_decompress(weights: &Path, input: &Path, output: &Path, zero_hidden: bool) -> CliResult {
    let p = read_weights(weights)?;
    let bytes = read_file(input, Exit::Data)?;
    let v = decompress_volume_with(&bytes, &p, CodecOptions { zero_hidden })?;
    write_file(output, &write_rvf(&v))?;
    let (t, h, w) = v.dims();
    println!("output\tdepth_bits\tt\th\tw");
    println!("{}\t{}\t{t}\t{h}\t{w}", output.display(), v.depth_bits());
    Ok(())
}

fn cmd_eval(weights: &Path, dir: &Path, jobs: usize, zero_hidden: bool) -> CliResult {
    let p = read_weights(weights)?;
    let dataset = load_dataset(dir)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| fail(Exit::Config, e))?;
    let opts = CodecOptions { zero_hidden };
    let results: Vec<Result<(usize, f64), CodecError>> = pool.install(|| {
        dataset
            .par_iter()
            .map(|(_, v)| {
                compress_volume_with(v, &p, opts).map(|(b, _)| (b.len(), bpp(v, b.len() as u64)))
            })
            .collect()
    });
    println!("volume\tbytes\tbpp");
    let mut total = 0.0;
    for ((path, _), r) in dataset.iter().zip(results) {
        let (bytes, b) = r?;
        total += b;
        println!("{}\t{bytes}\t{b:.6}", path.display());
    }
    println!("mean\t-\t{:.6}", total / dataset.len() as f64);
    Ok(())
}

fn cmd_gradcheck(seed: u64, coords: usize, epsilon: f64) -> CliResult {
    let (p, slices, h_in) = grad_check_problem(seed);
    let refs: Vec<&[u16]> = slices.iter().map(Vec::as_slice).collect();
    let report = grad_check(&p, &refs, &h_in, epsilon, coords, seed)?;
    println!("tensor\tchecked\tkinks\tworst_rel_error");
    for t in &report.per_tensor {
        println!(
            "{}\t{}\t{}\t{:.3e}",
            t.name, t.checked, t.kinks, t.worst_rel_error
        );
    }
    println!(
        "all\t{}\t{}\t{:.3e}",
        report.checked, report.kinks, report.worst_rel_error
    );
    if report.worst_rel_error > GRADCHECK_TOLERANCE {
        return Err(fail(
            Exit::GradCheck,
            format!(
                "worst relative error {:.3e} exceeds {GRADCHECK_TOLERANCE:e}",
                report.worst_rel_error
            ),
        ));
    }
    Ok(())
}

fn cmd_synth(
    kind: SynthKind,
    dims: (usize, usize, usize),
    depth: u8,
    seed: u64,
    out: &Path,
) -> CliResult {
    let v = synth_volume(kind, seed, dims, depth).map_err(|e| fail(Exit::Config, e))?;
    write_file(out, &write_rvf(&v))?;
    println!("output\tdepth_bits\tt\th\tw");
    println!(
        "{}\t{depth}\t{}\t{}\t{}",
        out.display(),
        dims.0,
        dims.1,
        dims.2
    );
    Ok(())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn cmd_inspect(path: &Path) -> CliResult {
    let bytes = read_file(path, Exit::Data)?;
    let mut rows: Vec<(&str, String)> = Vec::new();
    if bytes.starts_with(STREAM_MAGIC) {
        let h = read_stream_header(&bytes)?;
        rows.extend([
            ("format", "SRLV".to_string()),
            ("version", h.version.to_string()),
            ("depth_bits", h.depth_bits.to_string()),
            ("m", h.m.to_string()),
            ("scale_l", h.scale_l.to_string()),
            ("t", h.t.to_string()),
            ("h", h.h.to_string()),
            ("w", h.w.to_string()),
            ("weights_digest", hex(&h.digest)),
            ("escape_count", h.escapes.len().to_string()),
            ("payload_len", h.payload_len.to_string()),
            ("total_bytes", bytes.len().to_string()),
        ]);
    } else if bytes.starts_with(WEIGHTS_MAGIC) {
        let h = read_weights_header(&bytes)?;
        rows.extend([
            ("format", "SRLW".to_string()),
            ("version", h.version.to_string()),
            ("dtype", format!("{:?}", h.dtype).to_lowercase()),
            ("m", h.shape.m.to_string()),
            ("k", h.shape.k_mask.to_string()),
            ("k_dsc", h.shape.k_dsc.to_string()),
            ("depth_bits", h.depth_bits.to_string()),
            ("scale_l", h.scale_l.to_string()),
            ("parameter_count", h.parameter_count.to_string()),
        ]);
    } else if bytes.starts_with(RVF_MAGIC) {
        let v = read_rvf(&bytes).map_err(|e| fail(Exit::Data, e))?;
        let (t, h, w) = v.dims();
        rows.extend([
            ("format", "RVF1".to_string()),
            ("depth_bits", v.depth_bits().to_string()),
            ("t", t.to_string()),
            ("h", h.to_string()),
            ("w", w.to_string()),
        ]);
    } else {
        return Err(fail(
            Exit::Data,
            format!("{}: not an SRLV, SRLW or RVF file", path.display()),
        ));
    }
    for (k, v) in rows {
        println!("{k}\t{v}");
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Compress {
            weights,
            input,
            output,
            zero_hidden,
        } => cmd_compress(&weights, &input, &output, zero_hidden),
        Command::Decompress {
            weights,
            input,
            output,
            zero_hidden,
        } => cmd_decompress(&weights, &input, &output, zero_hidden),
        Command::Eval {
            weights,
            data_dir,
            jobs,
            zero_hidden,
        } => cmd_eval(&weights, &data_dir, jobs, zero_hidden),
        Command::Gradcheck {
            seed,
            coords,
            epsilon,
        } => cmd_gradcheck(seed, coords, epsilon),
        Command::Synth {
            kind,
            dims,
            depth,
            seed,
            output,
        } => cmd_synth(kind, dims, depth, seed, &output),
        Command::Inspect { file } => cmd_inspect(&file),
    }
}

fn main() -> ExitCode {
    let result = run(Cli::parse());
    let _ = std::io::stdout().flush();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.exit as u8)
        }
    }
}

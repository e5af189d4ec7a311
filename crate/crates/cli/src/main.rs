//! `mtpose`: rotation utilities, grid codec, losses, synthetic data,
//! training and evaluation behind one binary.
//!
//! Exit status: 0 on success, 1 on usage errors, 2 on data or numeric errors.

/// `println!` that ends the process quietly when the reader goes away.
macro_rules! out {
    ($($t:tt)*) => { $crate::write_stdout(format_args!($($t)*)) };
}

mod config;
mod fmt;
mod geom;
mod gradcheck;
mod grid;
mod pipeline;

use std::fmt as stdfmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mtpose_core::gridcodec::BoxActivation;

#[derive(Parser)]
#[command(name = "mtpose", version, about = "Joint box detection and head pose toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Rotation matrix of yaw/pitch/roll degrees, printed as three rows.
    #[command(allow_negative_numbers = true)]
    Euler2mat {
        #[arg(long)]
        yaw: f64,
        #[arg(long)]
        pitch: f64,
        #[arg(long)]
        roll: f64,
    },
    /// Yaw, pitch and roll of a rotation matrix.
    #[command(allow_negative_numbers = true)]
    Mat2euler {
        #[command(flatten)]
        matrix: geom::MatrixInput,
        /// Project onto the nearest rotation first.
        #[arg(long)]
        project: bool,
    },
    /// Nearest proper rotation of an arbitrary 3x3 matrix.
    #[command(allow_negative_numbers = true)]
    Project {
        #[command(flatten)]
        matrix: geom::MatrixInput,
    },
    /// Loss breakdown of a prediction tensor against annotations, as JSON.
    Loss(grid::LossArgs),
    /// Encode annotations into the raw logits that decode back to them.
    Encode(grid::EncodeArgs),
    /// Decode a prediction tensor into detections (JSON lines).
    Decode(grid::DecodeArgs),
    /// Greedy non-maximum suppression over detection JSON lines.
    Nms(grid::NmsArgs),
    /// Generate a synthetic dataset directory.
    GenData(pipeline::GenDataArgs),
    /// Train the network and write weights, history, config and report.
    Train(pipeline::TrainArgs),
    /// Evaluate saved weights on a dataset directory.
    Eval(pipeline::EvalArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(gradcheck::GradcheckArgs),
}

/// Grid interpretation flags shared by the tensor subcommands.
#[derive(Args, Clone)]
pub struct GridFlags {
    /// Number of classes.
    #[arg(long, default_value_t = 1)]
    pub cls: usize,
    /// Squashing of the box center offsets.
    #[arg(long, value_enum, default_value_t = Activation::SigmoidConf)]
    pub box_activation: Activation,
    /// Run config; its `grid` and `loss_weights` sections override these flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Activation {
    SigmoidConf,
    TanhNormalized,
}

impl From<Activation> for BoxActivation {
    fn from(a: Activation) -> Self {
        match a {
            Activation::SigmoidConf => BoxActivation::Sigmoid,
            Activation::TanhNormalized => BoxActivation::Tanh,
        }
    }
}

/// Marks an error as the caller's fault (exit status 1).
#[derive(Debug)]
pub struct Usage(pub String);

impl stdfmt::Display for Usage {
    fn fmt(&self, f: &mut stdfmt::Formatter<'_>) -> stdfmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

pub fn write_stdout(args: stdfmt::Arguments<'_>) {
    use std::io::Write;
    let mut o = std::io::stdout().lock();
    if let Err(e) = o.write_fmt(args).and_then(|_| o.write_all(b"\n")) {
        if e.kind() == std::io::ErrorKind::BrokenPipe {
            std::process::exit(0);
        }
        eprintln!("error: writing output: {e}");
        std::process::exit(2);
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Euler2mat { yaw, pitch, roll } => geom::euler2mat(yaw, pitch, roll),
        Command::Mat2euler { matrix, project } => geom::mat2euler(&matrix, project),
        Command::Project { matrix } => geom::project(&matrix),
        Command::Loss(a) => grid::loss(&a),
        Command::Encode(a) => grid::encode(&a),
        Command::Decode(a) => grid::decode(&a),
        Command::Nms(a) => grid::nms(&a),
        Command::GenData(a) => pipeline::gen_data(&a),
        Command::Train(a) => pipeline::train(&a),
        Command::Eval(a) => pipeline::eval(&a),
        Command::Gradcheck(a) => gradcheck::run(&a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if e.downcast_ref::<Usage>().is_some() { 1 } else { 2 })
        }
    }
}

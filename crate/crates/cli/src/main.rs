use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use circuitscope::cluster::Linkage;
use circuitscope::pipeline::{run_command, Command, Overrides, ScoreMethod, Status, OUT_ENV};
use circuitscope::Granularity;

/// Find, compare and cluster circuits in small transformers.
#[derive(Parser, Debug)]
#[command(name = "circuitscope", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Every stage, from training to figures
    Run(Common),
    /// Train the model (or load the checkpoint) and write the task files
    Train(Common),
    /// Attribution scores per task
    Score(Common),
    /// Minimal faithful circuit per task
    Find(Common),
    /// Re-evaluate saved circuits on their own tasks
    Faithfulness(Common),
    /// Similarity matrices between saved circuits
    Compare(Common),
    /// Dendrogram over the saved similarity matrix
    Cluster(Common),
    /// Random-overlap baselines for saved circuits
    Baseline(Common),
    /// Shared-edge intersection and structure profile
    Intersect(Common),
    /// SVG figures from saved matrices and dendrogram
    Report(Common),
    /// Exact patching scores and the approximation error of EAP and EAP-IG
    Oracle(Common),
}

#[derive(Args, Debug)]
struct Common {
    /// JSON run configuration
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, env = OUT_ENV)]
    out: Option<PathBuf>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, value_enum)]
    granularity: Option<GranularityArg>,
    #[arg(long, value_enum)]
    linkage: Option<LinkageArg>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MethodArg {
    Eap,
    EapIg,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum GranularityArg {
    Edge,
    Node,
    Neuron,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LinkageArg {
    Average,
    Complete,
    Ward,
}

impl Cmd {
    fn split(self) -> (Command, Common) {
        match self {
            Cmd::Run(c) => (Command::Run, c),
            Cmd::Train(c) => (Command::Train, c),
            Cmd::Score(c) => (Command::Score, c),
            Cmd::Find(c) => (Command::Find, c),
            Cmd::Faithfulness(c) => (Command::Faithfulness, c),
            Cmd::Compare(c) => (Command::Compare, c),
            Cmd::Cluster(c) => (Command::Cluster, c),
            Cmd::Baseline(c) => (Command::Baseline, c),
            Cmd::Intersect(c) => (Command::Intersect, c),
            Cmd::Report(c) => (Command::Report, c),
            Cmd::Oracle(c) => (Command::Oracle, c),
        }
    }
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            out: self.out.clone(),
            threshold: self.threshold,
            method: self.method.map(|m| match m {
                MethodArg::Eap => ScoreMethod::Eap,
                MethodArg::EapIg => ScoreMethod::EapIg,
            }),
            steps: self.steps,
            granularity: self.granularity.map(|g| match g {
                GranularityArg::Edge => Granularity::Edge,
                GranularityArg::Node => Granularity::Node,
                GranularityArg::Neuron => Granularity::Neuron,
            }),
            linkage: self.linkage.map(|l| match l {
                LinkageArg::Average => Linkage::Average,
                LinkageArg::Complete => Linkage::Complete,
                LinkageArg::Ward => Linkage::Ward,
            }),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, common) = cli.command.split();
    let outcome = run_command(command, &common.config, &common.overrides());
    match (&outcome.status, &outcome.error) {
        (Status::Ok, _) => println!("{}: ok ({})", command.as_str(), outcome.out_dir.display()),
        (status, Some(e)) => {
            let record = serde_json::json!({ "status": status, "stage": e.stage, "message": e.message });
            eprintln!("{record}");
        }
        (status, None) => eprintln!("{}: {status:?}", command.as_str()),
    }
    ExitCode::from(outcome.status.exit_code() as u8)
}

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use bgnn_core::autoencoder::{Autoencoder, AutoencoderSpec};
use bgnn_core::data::{
    load_mnist, mnist_to_graph, read_manifest, read_pointcloud, synthetic_shapes, GraphSample,
    MnistDigit, PointCloud, MNIST_RADIUS,
};
use bgnn_core::graph::write_graph;
use bgnn_core::network::{build_network, NetworkConfig};
use bgnn_core::train::{evaluate_model, train_to_dir, Model, RunMetadata, Task, TrainConfig};
use bgnn_core::verify::{self, mnist_classifier_config, reconstruction_samples};
use bgnn_core::{fuse_to_bgn, parse_arch, ArchSpec, ParamStore, MODELNET_ARCH};
use clap::{Args, Parser, Subcommand};

mod config;

use config::{read_config, Dataset, RunArgs, TaskKind};

#[derive(Parser)]
#[command(
    name = "bgnn",
    version,
    about = "Bipartite graph networks on images and point clouds"
)]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert an image or point cloud into a serialized graph and signal.
    BuildGraph(BuildGraphArgs),
    /// Train a classifier or autoencoder.
    Train(RunArgs),
    /// Evaluate a trained run on its test split.
    Eval(RunArgs),
    /// Count the work of conv+pool against the fused layer over graph sizes.
    Bench(BenchArgs),
    /// Print the fused form of an architecture.
    Fuse {
        #[arg(long)]
        arch: String,
    },
    /// Run the built-in invariant checks.
    Selftest,
}

#[derive(Args)]
struct BuildGraphArgs {
    /// `mnist` reads one digit from the data root; `pointcloud` reads `--input`.
    #[arg(long, value_enum)]
    dataset: Dataset,
    #[arg(long)]
    data_root: Option<PathBuf>,
    /// Digit index within the training files.
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Point cloud file with one `x y z` row per point.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    radius: Option<f64>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    /// Conv+pool architecture with a single coarsening stage.
    #[arg(long, default_value = "C(8)-MP(1.5,4)")]
    arch: String,
    /// Comma-separated input graph sizes.
    #[arg(long, value_delimiter = ',', default_value = "100,1000,10000")]
    sizes: Vec<usize>,
    /// Input nodes per super-node.
    #[arg(long, default_value_t = 4)]
    ratio: usize,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<bgnn_core::Error> for Failure {
    fn from(e: bgnn_core::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr()
                || e.kind() == clap::error::ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand
            {
                1
            } else {
                0
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(command: Command) -> Result<(), Failure> {
    match command {
        Command::Fuse { arch } => {
            let spec = parse_arch(&arch).map_err(|e| Failure::Usage(format!("--arch: {e}")))?;
            let fused = fuse_to_bgn(&spec).map_err(|e| Failure::Usage(format!("--arch: {e}")))?;
            println!("{fused}");
            Ok(())
        }
        Command::Selftest => {
            let checks = verify::invariant_suite();
            for c in &checks {
                println!("{c}");
            }
            let failed = checks.iter().filter(|c| !c.passed).count();
            if failed > 0 {
                return Err(Failure::Runtime(anyhow::anyhow!("{failed} checks failed")));
            }
            Ok(())
        }
        Command::Bench(args) => bench(&args),
        Command::BuildGraph(args) => build_graph(&args),
        Command::Train(args) => train(&resolve(args)?),
        Command::Eval(args) => eval(args),
    }
}

fn resolve(flags: RunArgs) -> Result<RunArgs, Failure> {
    let base = match &flags.config {
        Some(path) => read_config(path).map_err(Failure::Usage)?,
        None => RunArgs::default(),
    };
    Ok(base.overridden_by(&flags))
}

fn bench(args: &BenchArgs) -> Result<(), Failure> {
    let spec = parse_arch(&args.arch).map_err(|e| Failure::Usage(format!("--arch: {e}")))?;
    let fused = fuse_to_bgn(&spec).map_err(|e| Failure::Usage(format!("--arch: {e}")))?;
    let report = bgnn_core::scaling_report(
        (&spec, &fused),
        &args.sizes,
        args.ratio,
        &NetworkConfig::default(),
    )?;
    std::fs::create_dir_all(&args.out_dir)
        .with_context(|| format!("creating {}", args.out_dir.display()))?;
    let csv = args.out_dir.join("scaling.csv");
    std::fs::write(&csv, report.to_csv()).with_context(|| format!("writing {}", csv.display()))?;
    print!("{}", report.render_table());
    println!("wrote {}", csv.display());
    Ok(())
}

fn build_graph(args: &BuildGraphArgs) -> Result<(), Failure> {
    let sample = match args.dataset {
        Dataset::Mnist => {
            let root = args
                .data_root
                .clone()
                .unwrap_or_else(|| PathBuf::from("data/mnist"));
            let digit = read_digit(&root, args.index)?;
            mnist_to_graph(&digit, args.radius.unwrap_or(MNIST_RADIUS), 0.0)?
        }
        Dataset::Pointcloud | Dataset::Shapes => {
            let Some(input) = &args.input else {
                return Err(Failure::Usage(
                    "--input is required for point clouds".into(),
                ));
            };
            read_cloud(input, 0)?.to_sample(args.radius.unwrap_or(DEFAULT_CLOUD_RADIUS))?
        }
    };
    std::fs::create_dir_all(&args.out_dir)
        .with_context(|| format!("creating {}", args.out_dir.display()))?;
    let path = args.out_dir.join("graph.txt");
    let mut w = std::io::BufWriter::new(
        std::fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?,
    );
    write_graph(&mut w, &sample.graph)?;
    w.flush().context("writing graph")?;
    let sig = args.out_dir.join("signal.txt");
    let rows: Vec<String> = (0..sample.signal.num_nodes())
        .map(|i| {
            sample
                .signal
                .row(i)
                .iter()
                .map(|v| format!("{v:.16e}"))
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect();
    std::fs::write(&sig, rows.join("\n") + "\n")
        .with_context(|| format!("writing {}", sig.display()))?;
    println!(
        "{} nodes, {} edges -> {}, {}",
        sample.graph.num_nodes(),
        sample.graph.num_edges(),
        path.display(),
        sig.display()
    );
    Ok(())
}

fn read_digit(root: &Path, index: usize) -> anyhow::Result<MnistDigit> {
    let images = bgnn_core::data::read_idx_images(&root.join("train-images-idx3-ubyte"))
        .with_context(|| format!("reading digits under {}", root.display()))?;
    let labels = bgnn_core::data::read_idx_labels(&root.join("train-labels-idx1-ubyte"))
        .with_context(|| format!("reading labels under {}", root.display()))?;
    if index >= images.count || index >= labels.len() {
        bail!("--index {index} is out of range ({} digits)", images.count);
    }
    Ok(MnistDigit::from_bytes(
        images.image(index),
        labels[index] as usize,
    ))
}

fn read_cloud(path: &Path, label: usize) -> anyhow::Result<PointCloud> {
    let file = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let points = read_pointcloud(std::io::BufReader::new(file))
        .with_context(|| format!("reading {}", path.display()))?;
    let points = bgnn_core::data::normalize_pointcloud(&points)?;
    Ok(PointCloud { points, label })
}

const DEFAULT_CLOUD_RADIUS: f64 = 0.15;

/// Everything needed to rebuild the data and model of a run.
struct Plan {
    dataset: Dataset,
    task: TaskKind,
    cfg: TrainConfig,
    skip: bool,
    data_root: PathBuf,
    out_dir: PathBuf,
    subset: usize,
    test_size: usize,
    radius: f64,
}

fn plan(args: &RunArgs) -> Result<Plan, Failure> {
    let dataset = args.dataset.unwrap_or(Dataset::Mnist);
    let task = args.task.unwrap_or(TaskKind::Classify);
    if task == TaskKind::Autoencoder && dataset != Dataset::Mnist {
        return Err(Failure::Usage(
            "--task autoencoder needs --dataset mnist".into(),
        ));
    }
    let mut cfg = match (dataset, task) {
        (Dataset::Mnist, TaskKind::Classify) => mnist_classifier_config(0)?,
        (Dataset::Mnist, TaskKind::Autoencoder) => verify::autoencoder_config(0),
        _ => TrainConfig {
            batch_size: 16,
            arch: fuse_to_bgn(&parse_arch(MODELNET_ARCH)?)?.render(),
            network: NetworkConfig {
                label_dim: 3,
                red: bgnn_core::Reduction::Max,
                ..NetworkConfig::default()
            },
            ..TrainConfig::default()
        },
    };
    let radius = args.radius.unwrap_or(match dataset {
        Dataset::Mnist => MNIST_RADIUS,
        _ => DEFAULT_CLOUD_RADIUS,
    });
    cfg.network.input_radius = radius;
    if let Some(a) = &args.arch {
        let spec = parse_arch(a).map_err(|e| Failure::Usage(format!("--arch: {e}")))?;
        cfg.arch = spec.render();
    }
    if let Some(k) = args.kernel {
        cfg.network.kernel = k;
    }
    if let Some(r) = args.red {
        cfg.network.red = r;
    }
    macro_rules! set {
        ($src:ident => $dst:ident) => {
            if let Some(v) = args.$src {
                cfg.$dst = v;
            }
        };
    }
    set!(epochs => epochs);
    set!(lr => learning_rate);
    set!(batch_size => batch_size);
    set!(seed => seed);
    set!(workers => workers);
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let subset = args.subset.unwrap_or(2000);
    let test_size = args.test_size.unwrap_or(subset.div_ceil(40) * 10);
    Ok(Plan {
        dataset,
        task,
        cfg,
        skip: args.skip.unwrap_or(true),
        data_root: args.data_root.clone().unwrap_or_else(|| match dataset {
            Dataset::Mnist => PathBuf::from("data/mnist"),
            _ => PathBuf::from("data/pointcloud"),
        }),
        out_dir: args.out_dir.clone().unwrap_or_else(|| PathBuf::from("out")),
        subset,
        test_size,
        radius,
    })
}

fn load_split(p: &Plan) -> Result<(Vec<GraphSample>, Vec<GraphSample>), Failure> {
    match p.dataset {
        Dataset::Mnist => {
            let split = load_mnist(&p.data_root, p.subset, p.test_size, p.cfg.seed)
                .with_context(|| format!("--data-root {}", p.data_root.display()))?;
            let convert = |d: &[MnistDigit]| match p.task {
                TaskKind::Classify => d.iter().map(|d| mnist_to_graph(d, p.radius, 0.0)).collect(),
                TaskKind::Autoencoder => reconstruction_samples(d),
            };
            Ok((convert(&split.train)?, convert(&split.test)?))
        }
        Dataset::Shapes => {
            let classes = 6;
            let per = |n: usize| n.div_ceil(classes).max(1);
            let make = |n: usize, seed: u64| -> bgnn_core::Result<Vec<GraphSample>> {
                synthetic_shapes(classes, 256, per(n), 0.01, seed)?
                    .iter()
                    .map(|c| c.to_sample(p.radius))
                    .collect()
            };
            Ok((
                make(p.subset, p.cfg.seed)?,
                make(p.test_size, p.cfg.seed ^ 0xabcd)?,
            ))
        }
        Dataset::Pointcloud => {
            let read = |name: &str| -> anyhow::Result<Vec<GraphSample>> {
                let path = p.data_root.join(name);
                let file = std::fs::File::open(&path)
                    .with_context(|| format!("opening manifest {}", path.display()))?;
                let entries = read_manifest(std::io::BufReader::new(file), &p.data_root)?;
                entries
                    .iter()
                    .map(|(path, label)| Ok(read_cloud(path, *label)?.to_sample(p.radius)?))
                    .collect()
            };
            Ok((read("train.txt")?, read("test.txt")?))
        }
    }
}

enum AnyModel {
    Net(bgnn_core::Network),
    Ae(Autoencoder),
}

impl AnyModel {
    fn build(p: &Plan, input_dim: usize) -> Result<(Self, String), Failure> {
        Ok(match p.task {
            TaskKind::Classify => {
                let spec: ArchSpec = parse_arch(&p.cfg.arch)?;
                let net = build_network(&spec, input_dim, p.cfg.seed, &p.cfg.network)?;
                (AnyModel::Net(net), spec.render())
            }
            TaskKind::Autoencoder => {
                let mut spec = AutoencoderSpec::mnist(p.skip);
                spec.kernel = p.cfg.network.kernel;
                spec.red = p.cfg.network.red;
                let ae = Autoencoder::new(spec, MnistDigit::grid_positions(), p.cfg.seed)?;
                (AnyModel::Ae(ae), format!("autoencoder(skip={})", p.skip))
            }
        })
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        match self {
            AnyModel::Net(m) => m.params_mut(),
            AnyModel::Ae(m) => m.params_mut(),
        }
    }
}

fn input_dim(data: &[GraphSample]) -> usize {
    data.first().map_or(1, |s| s.signal.dim())
}

fn train(args: &RunArgs) -> Result<(), Failure> {
    let p = plan(args)?;
    let (train, test) = load_split(&p)?;
    let (mut model, canonical) = AnyModel::build(&p, input_dim(&train))?;
    std::fs::create_dir_all(&p.out_dir)
        .with_context(|| format!("creating {}", p.out_dir.display()))?;
    let settings = serde_json::to_string_pretty(args).expect("settings serialise");
    std::fs::write(p.out_dir.join("settings.json"), settings + "\n")
        .context("writing settings.json")?;
    let out = match &mut model {
        AnyModel::Net(m) => train_to_dir(m, &train, &test, &p.cfg, &canonical, &p.out_dir)?,
        AnyModel::Ae(m) => train_to_dir(m, &train, &test, &p.cfg, &canonical, &p.out_dir)?,
    };
    if let Some(last) = out.history.last() {
        println!(
            "{}",
            serde_json::to_string(last).expect("record serialises")
        );
    }
    println!("run written to {}", p.out_dir.display());
    Ok(())
}

fn eval(flags: RunArgs) -> Result<(), Failure> {
    let flags = resolve(flags)?;
    let out_dir = flags
        .out_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("out"));
    let settings_path = out_dir.join("settings.json");
    let saved: RunArgs = match std::fs::read_to_string(&settings_path) {
        Ok(text) => serde_json::from_str(&text)
            .with_context(|| format!("parsing {}", settings_path.display()))?,
        Err(_) => RunArgs::default(),
    };
    let args = saved.overridden_by(&flags);
    let mut p = plan(&args)?;
    let meta_path = out_dir.join("run.json");
    if let Ok(text) = std::fs::read_to_string(&meta_path) {
        let meta: RunMetadata = serde_json::from_str(&text)
            .with_context(|| format!("parsing {}", meta_path.display()))?;
        p.cfg = meta.config;
    }
    let (_, test) = load_split(&p)?;
    let (mut model, _) = AnyModel::build(&p, input_dim(&test))?;
    let ckpt = args
        .checkpoint
        .clone()
        .unwrap_or_else(|| out_dir.join("model.ckpt"));
    let file = std::fs::File::open(&ckpt)
        .with_context(|| format!("opening checkpoint {}", ckpt.display()))?;
    let stored = ParamStore::read_checkpoint(std::io::BufReader::new(file))
        .with_context(|| format!("reading checkpoint {}", ckpt.display()))?;
    model
        .params_mut()
        .load(&stored)
        .with_context(|| format!("checkpoint {} does not fit the model", ckpt.display()))?;
    let metrics = match &model {
        AnyModel::Net(m) => evaluate_model(m, &test, Task::Classify, p.cfg.workers)?,
        AnyModel::Ae(m) => evaluate_model(m, &test, Task::Reconstruct, p.cfg.workers)?,
    };
    let json = serde_json::to_string(&metrics).expect("metrics serialise");
    std::fs::write(out_dir.join("eval.json"), json.clone() + "\n").context("writing eval.json")?;
    println!("{json}");
    Ok(())
}

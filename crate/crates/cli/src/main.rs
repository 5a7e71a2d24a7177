use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use osface::experiment::{FeatureSource, NetworkConfig, ProtocolConfig};
use osface::recognition::{
    gallery_from_samples, parse_scores, partition_scores, scores_to_text, ScoreRecord,
};
use osface::{
    calibrate_threshold, generate_synthetic, init_net, load_features, load_net, make_pairs, roc,
    save_net, score_probe, train, write_features, ExperimentConfig, FeatureStore, PairAlgorithm,
    ProtocolSplit, ThresholdPolicy, TrainConfig, Truth,
};

#[derive(Parser, Debug)]
#[command(
    name = "osface",
    version,
    about = "Open-set enrollment detection with a contrastive Siamese network"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run a repeated open-set protocol experiment and write a report
    Run(RunArgs),
    /// Write a synthetic feature file of Gaussian identity clusters
    Synth(SynthArgs),
    /// Train a network on every sample of a gallery feature file
    Train(TrainArgs),
    /// Score probes against a gallery with a trained model
    Score(ScoreArgs),
    /// Pick a decision threshold from a scores file
    Calibrate(CalibrateArgs),
    /// ROC curve and AUC of a scores file
    Roc(RocArgs),
}

#[derive(Args, Debug, Default)]
struct TrainFlags {
    /// Pairing algorithm (P1 or P2)
    #[arg(long)]
    pairing: Option<PairAlgorithm>,
    /// Pairing factor z
    #[arg(long)]
    z: Option<usize>,
    /// Contrastive margin
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Layer widths after the input, e.g. 2048,2048,2048
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
}

impl TrainFlags {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(a) = self.pairing {
            cfg.pairing.algorithm = a;
        }
        if let Some(z) = self.z {
            cfg.pairing.z = z;
        }
        let t = &mut cfg.train;
        if let Some(v) = self.margin {
            t.margin = v;
        }
        if let Some(v) = self.learning_rate {
            t.learning_rate = v;
        }
        if let Some(v) = self.epochs {
            t.epochs = v;
        }
        if let Some(v) = self.batch_size {
            t.batch_size = v;
        }
        if let Some(h) = &self.hidden {
            cfg.network.hidden = h.clone();
        }
    }
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum ProtocolPreset {
    /// 10%, 50%, 90% of identities known
    Ep1,
    /// 5, 10, 15, 20 identities known
    Ep2,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Experiment config file (TOML)
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Feature file (overrides the config's feature source)
    #[arg(long)]
    features: Option<PathBuf>,
    /// Protocol preset (overrides the config's protocol)
    #[arg(long, value_enum)]
    protocol: Option<ProtocolPreset>,
    #[arg(long)]
    master_seed: Option<u64>,
    #[arg(long)]
    repetitions: Option<usize>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    identities: usize,
    #[arg(long)]
    samples_per_id: usize,
    #[arg(long)]
    dim: usize,
    #[arg(long, default_value_t = 0.1)]
    spread: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Gallery feature file; every sample is used for training
    #[arg(long)]
    gallery: PathBuf,
    /// Where to write the model
    #[arg(long, short)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    #[arg(long)]
    model: PathBuf,
    /// Gallery feature file (enrolled identities)
    #[arg(long)]
    gallery: PathBuf,
    /// Probe feature file; a probe is `known` when its identity is in the gallery
    #[arg(long)]
    probes: PathBuf,
    /// Output scores file (stdout if omitted)
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Policy {
    /// Equal error rate: minimize |FPR - FNR|
    Eer,
    /// Largest threshold with FPR <= --alpha
    Fpr,
}

#[derive(Args, Debug)]
struct CalibrateArgs {
    #[arg(long)]
    scores: PathBuf,
    #[arg(long, value_enum, default_value_t = Policy::Eer)]
    policy: Policy,
    /// Target false positive rate for `--policy fpr`
    #[arg(long, default_value_t = 0.01)]
    alpha: f64,
}

#[derive(Args, Debug)]
struct RocArgs {
    #[arg(long)]
    scores: PathBuf,
    /// Output ROC file (stdout if omitted)
    #[arg(long, short)]
    out: Option<PathBuf>,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Run(args) => cmd_run(args),
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Score(args) => cmd_score(args),
        Command::Calibrate(args) => cmd_calibrate(args),
        Command::Roc(args) => cmd_roc(args),
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => fs::write(path, text).with_context(|| format!("writing {}", path.display())),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path).context("run: reading config")?,
        None => {
            let Some(features) = &args.features else {
                bail!("run: pass --config or --features");
            };
            ExperimentConfig {
                master_seed: 0,
                repetitions: 10,
                output_dir: None,
                features: FeatureSource::Path(features.clone()),
                protocol: ProtocolConfig::ep1(),
                pairing: Default::default(),
                network: NetworkConfig::default(),
                train: TrainConfig::default(),
            }
        }
    };
    if let Some(f) = args.features {
        cfg.features = FeatureSource::Path(f);
    }
    match args.protocol {
        Some(ProtocolPreset::Ep1) => cfg.protocol = ProtocolConfig::ep1(),
        Some(ProtocolPreset::Ep2) => cfg.protocol = ProtocolConfig::ep2(),
        None => {}
    }
    if let Some(s) = args.master_seed {
        cfg.master_seed = s;
    }
    if let Some(r) = args.repetitions {
        cfg.repetitions = r;
    }
    if let Some(d) = args.output_dir {
        cfg.output_dir = Some(d);
    }
    args.train.apply(&mut cfg);
    cfg.validate().context("run: config")?;

    let report = osface::run_experiment(&cfg).context("run")?;
    if let Some(dir) = &cfg.output_dir {
        report.write(dir).context("run: writing report")?;
        log::info!("report written to {}", dir.display());
    }
    print!("{}", report.summary());
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let store = generate_synthetic(
        args.identities,
        args.samples_per_id,
        args.dim,
        args.spread,
        args.seed,
    )
    .context("synth")?;
    write_features(&store, &args.out).context("synth: writing features")?;
    Ok(())
}

fn load_store(path: &Path, what: &str) -> Result<FeatureStore> {
    load_features(path).with_context(|| format!("loading {what} {}", path.display()))
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let store = load_store(&args.gallery, "gallery").context("train")?;
    let mut cfg = ExperimentConfig {
        master_seed: args.seed,
        repetitions: 1,
        output_dir: None,
        features: FeatureSource::Path(args.gallery.clone()),
        protocol: ProtocolConfig::ep1(),
        pairing: Default::default(),
        network: NetworkConfig::default(),
        train: TrainConfig::default(),
    };
    args.train.apply(&mut cfg);
    cfg.validate().context("train: config")?;

    let split = ProtocolSplit {
        known_ids: (0..store.identity_count()).collect(),
        unknown_ids: vec![],
        train: (0..store.len()).collect(),
        test_known: vec![],
        test_unknown: vec![],
        seed: args.seed,
    };
    use osface::experiment::{INIT_STREAM, PAIR_STREAM, TRAIN_STREAM};
    use osface::rng::mix_seed;
    let pairs = make_pairs(
        cfg.pairing.algorithm,
        &split,
        &store,
        cfg.pairing.z,
        mix_seed(args.seed, PAIR_STREAM),
    )
    .context("train: pairing")?;
    let net = init_net(
        &cfg.network.layer_dims(store.dim()),
        mix_seed(args.seed, INIT_STREAM),
    )?;
    let train_cfg = TrainConfig {
        rng_seed: mix_seed(args.seed, TRAIN_STREAM),
        ..cfg.train
    };
    let (net, history) = train(&net, &pairs, &store, &train_cfg).context("train")?;
    save_net(&net, &args.out).context("train: saving model")?;
    if let (Some(first), Some(last)) = (history.epoch_loss.first(), history.epoch_loss.last()) {
        eprintln!("{} pairs, loss {first:.6} -> {last:.6}", pairs.len());
    }
    Ok(())
}

/// Scores every probe row against every gallery row. Probe ids are 0-based
/// row positions in the probe file.
fn score_files(model: &Path, gallery: &Path, probes: &Path) -> Result<Vec<ScoreRecord>> {
    let net =
        load_net(model).with_context(|| format!("score: loading model {}", model.display()))?;
    let gallery_store = load_store(gallery, "gallery").context("score")?;
    let probe_text = fs::read_to_string(probes)
        .with_context(|| format!("score: reading probes {}", probes.display()))?;
    if probe_text.trim().is_empty() {
        return Ok(Vec::new());
    }
    let probe_store = FeatureStore::parse(&probe_text)
        .with_context(|| format!("score: parsing probes {}", probes.display()))?;
    for (what, dim) in [
        ("gallery", gallery_store.dim()),
        ("probe", probe_store.dim()),
    ] {
        if dim != net.input_dim() {
            bail!(
                "score: {what} features have dim {dim}, model expects {}",
                net.input_dim()
            );
        }
    }
    let all: Vec<usize> = (0..gallery_store.len()).collect();
    let index =
        gallery_from_samples(&net, &gallery_store, &all).context("score: building gallery")?;
    probe_store
        .samples()
        .iter()
        .enumerate()
        .map(|(i, sample)| {
            let ps = score_probe(&index, &net, &sample.vector)
                .with_context(|| format!("score: probe {i}"))?;
            let truth = if gallery_store.find_identity(&sample.identity).is_some() {
                Truth::Known
            } else {
                Truth::Unknown
            };
            Ok(ScoreRecord {
                probe_id: i.to_string(),
                truth,
                score: ps.score,
                nearest_identity: ps.nearest_identity,
            })
        })
        .collect()
}

fn cmd_score(args: ScoreArgs) -> Result<()> {
    let records = score_files(&args.model, &args.gallery, &args.probes)?;
    emit(args.out.as_deref(), &scores_to_text(&records))
}

fn read_score_lists(path: &Path) -> Result<(Vec<f64>, Vec<f64>)> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading scores {}", path.display()))?;
    let records =
        parse_scores(&text).with_context(|| format!("parsing scores {}", path.display()))?;
    Ok(partition_scores(&records))
}

fn cmd_calibrate(args: CalibrateArgs) -> Result<()> {
    let (known, unknown) = read_score_lists(&args.scores).context("calibrate")?;
    let policy = match args.policy {
        Policy::Eer => ThresholdPolicy::EqualError,
        Policy::Fpr => ThresholdPolicy::TargetFpr(args.alpha),
    };
    let t = calibrate_threshold(&known, &unknown, policy).context("calibrate")?;
    println!("{t}");
    Ok(())
}

fn cmd_roc(args: RocArgs) -> Result<()> {
    let (known, unknown) = read_score_lists(&args.scores).context("roc")?;
    let report = roc(&known, &unknown).context("roc")?;
    emit(args.out.as_deref(), &report.to_text())
}

use std::net::{IpAddr, SocketAddr};
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use dpix_cli::{
    export_region, parse_bbox, probe_store, read_labels, sample_truth_labels, write_labels, ProbeOptions, TaskKind,
};
use dpix_core::embstore::{fetch_region, infer_store, pca_rgb, EmbeddingStore, InferConfig};
use dpix_core::encoder::Checkpoint;
use dpix_core::shuffle::{build_pairs_from_root, global_permute, BuildConfig, PermuteConfig};
use dpix_core::synthdata::{write_corpus, SynthSpec};
use dpix_core::tilestore::list_tiles;
use dpix_core::trainer::{run_training, TrainConfig};
use dpix_mapsvc::ServiceConfig;

#[derive(Parser)]
#[command(
    name = "dpix",
    version,
    about = "Pixel time-series embeddings: prepare, train, embed, probe, serve"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic raw tile corpus.
    Synth(SynthArgs),
    /// Build or permute the pair corpus.
    #[command(subcommand)]
    Shuffle(ShuffleCmd),
    /// Pretrain the encoder.
    Train {
        /// TOML or JSON training config.
        #[arg(long)]
        config: PathBuf,
        /// Permuted pair corpus.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Embed raw tiles of one year into an embedding store.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        tiles: PathBuf,
        #[arg(long)]
        year: u16,
        /// Embedding store root.
        #[arg(long)]
        out: PathBuf,
        /// Temporal draws averaged per pixel.
        #[arg(long, default_value_t = 1)]
        draws: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Export a region as `.npy` plus validity mask and JSON header.
    Fetch {
        #[command(flatten)]
        region: Region,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render the first three principal components of a region.
    Pca {
        #[command(flatten)]
        region: Region,
        #[arg(long)]
        png: PathBuf,
    },
    /// Fit a probe on labelled pixels and report held-out metrics.
    Probe {
        #[arg(long)]
        store: PathBuf,
        /// CSV with columns x,y,year,label.
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, value_enum, default_value = "classify")]
        task: TaskKind,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.6)]
        train_fraction: f64,
        #[arg(long, default_value_t = 0.2)]
        val_fraction: f64,
    },
    /// Run the labelling and mapping HTTP service.
    Serve {
        #[arg(long)]
        store: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long)]
        sessions: PathBuf,
        #[arg(long, default_value = "127.0.0.1")]
        host: IpAddr,
        /// Directory with the built UI.
        #[arg(long = "static")]
        static_dir: Option<PathBuf>,
        /// Allowed CORS origin (default: any).
        #[arg(long)]
        cors_origin: Option<String>,
    },
}

#[derive(Args)]
struct Region {
    #[arg(long)]
    store: PathBuf,
    /// x0,y0,x1,y1 in map units.
    #[arg(long, allow_hyphen_values = true)]
    bbox: String,
    #[arg(long)]
    year: u16,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// JSON spec; flags below override its fields.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    tiles: Option<usize>,
    /// Tile height and width.
    #[arg(long)]
    side: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    gap: Option<f64>,
    #[arg(long)]
    year: Option<u16>,
    #[arg(long)]
    seed: Option<u64>,
    /// Also write sampled ground-truth labels as CSV.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    labels_per_tile: usize,
}

#[derive(Subcommand)]
enum ShuffleCmd {
    /// Extract training pairs from every raw tile under a directory.
    Build {
        #[arg(long)]
        tiles: PathBuf,
        /// Observations per sampled view.
        #[arg(long = "L", alias = "seq-len", default_value_t = 40)]
        seq_len: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Globally permute a built corpus in place.
    Permute {
        #[arg(long = "in")]
        dir: PathBuf,
        #[arg(long)]
        seed: u64,
    },
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut spec = match &a.spec {
        Some(p) => serde_json::from_slice(&std::fs::read(p).with_context(|| p.display().to_string())?)?,
        None => SynthSpec::default(),
    };
    let SynthSpec {
        classes,
        tiles,
        height,
        width,
        noise_std,
        gap_prob,
        year,
        seed,
        ..
    } = &mut spec;
    *classes = a.classes.unwrap_or(*classes);
    *tiles = a.tiles.unwrap_or(*tiles);
    *height = a.side.unwrap_or(*height);
    *width = a.side.unwrap_or(*width);
    *noise_std = a.noise.unwrap_or(*noise_std);
    *gap_prob = a.gap.unwrap_or(*gap_prob);
    *year = a.year.unwrap_or(*year);
    *seed = a.seed.unwrap_or(*seed);
    let tiles = write_corpus(&spec, &a.out)?;
    log::info!("wrote {} tiles to {}", tiles.len(), a.out.display());
    if let Some(path) = &a.labels {
        let rows = sample_truth_labels(&tiles, a.labels_per_tile, spec.seed);
        write_labels(path, &rows)?;
        log::info!("wrote {} labels to {}", rows.len(), path.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Command::Synth(a) => synth(a)?,
        Command::Shuffle(ShuffleCmd::Build {
            tiles,
            seq_len,
            seed,
            out,
        }) => {
            let cfg = BuildConfig {
                seq_len,
                seed,
                ..BuildConfig::default()
            };
            let m = build_pairs_from_root(&tiles, &cfg, &out)?;
            println!("{}", serde_json::to_string_pretty(&m)?);
        }
        Command::Shuffle(ShuffleCmd::Permute { dir, seed }) => {
            let m = global_permute(
                &dir,
                &PermuteConfig {
                    seed,
                    ..PermuteConfig::default()
                },
            )?;
            println!("{}", serde_json::to_string_pretty(&m)?);
        }
        Command::Train {
            config,
            data,
            out,
            resume,
        } => {
            let cfg = TrainConfig::load(&config)?;
            let s = run_training(&data, &cfg, &out, resume.as_deref())?;
            if let (Some(first), Some(last)) = (s.records.first(), s.records.last()) {
                log::info!("loss {:.4} -> {:.4}", first.l_total, last.l_total);
            }
            println!("{}", s.final_checkpoint.display());
        }
        Command::Infer {
            checkpoint,
            tiles,
            year,
            out,
            draws,
            seed,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let store = EmbeddingStore::open(&out);
            let cfg = InferConfig {
                n_draws: draws,
                seed,
                ..InferConfig::default()
            };
            let written = infer_store(&ck.model, &ck.meta.stats, &list_tiles(&tiles)?, year, &store, &cfg)?;
            for p in written {
                println!("{}", p.display());
            }
        }
        Command::Fetch { region, out } => {
            let store = EmbeddingStore::open(&region.store);
            let mosaic = fetch_region(&store, &parse_bbox(&region.bbox)?, region.year)?;
            let header = export_region(&mosaic, region.year, &out)?;
            println!("{}", serde_json::to_string_pretty(&header)?);
        }
        Command::Pca { region, png } => {
            let store = EmbeddingStore::open(&region.store);
            let mosaic = fetch_region(&store, &parse_bbox(&region.bbox)?, region.year)?;
            std::fs::write(&png, pca_rgb(&mosaic.map)?.to_png()?).with_context(|| png.display().to_string())?;
        }
        Command::Probe {
            store,
            labels,
            task,
            report,
            seed,
            train_fraction,
            val_fraction,
        } => {
            let rows = read_labels(&labels)?;
            let opts = ProbeOptions {
                task,
                seed,
                train_fraction,
                val_fraction,
                ..ProbeOptions::default()
            };
            let r = probe_store(&EmbeddingStore::open(&store), &rows, &opts)?;
            let text = serde_json::to_string_pretty(&r)?;
            std::fs::write(&report, &text).with_context(|| report.display().to_string())?;
            println!("{text}");
        }
        Command::Serve {
            store,
            port,
            sessions,
            host,
            static_dir,
            cors_origin,
        } => {
            let cfg = ServiceConfig {
                store,
                sessions,
                static_dir,
                cors_origin,
            };
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(dpix_mapsvc::serve(cfg, SocketAddr::new(host, port)))?;
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

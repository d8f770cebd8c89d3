//! `semcom` — configuration-driven experiments for multi-user semantic
//! communication over a MAC: train the staged protocol, evaluate across
//! channel cases, run the classical baseline, and render result plots.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use semcom_cli::config::{self, ExperimentConfig};
use semcom_cli::csvio;
use semcom_cli::plot::{self, Metric};
use semcom_cli::runner::{self, Runner};

#[derive(Parser)]
#[command(name = "semcom", version, about = "Multi-user semantic communication experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the training stages (pretrain, joint, retrain) for every
    /// case/method/seed of the config, writing checkpoints and loss logs.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override the config's seed list with a single seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Retrain even when matching checkpoints exist.
        #[arg(long)]
        force: bool,
    },
    /// Train (reusing checkpoints) and evaluate, writing results.csv.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Evaluate only the classical Huffman + 64-QAM chain.
    Baseline {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render min-similarity and min-BLEU plots from result CSVs.
    Plot {
        /// One or more results.csv files (merged into the same axes).
        #[arg(long, num_args = 1.., required = true)]
        csv: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a prewired desk-scale experiment reproducing one figure.
    Reproduce {
        /// One of: sim3, bleu3-awgn, bleu3-rayleigh, sim5, loss.
        #[arg(long)]
        figure: String,
        /// Optional config overriding the prewired one.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Print the configuration schema (version 1).
    Schema,
    /// Write synthetic line-aligned per-user corpora.
    GenCorpus {
        #[arg(long)]
        users: usize,
        #[arg(long)]
        groups: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Train {
            config,
            seed,
            out,
            force,
        } => {
            let cfg = override_cfg(ExperimentConfig::load(&config)?, seed, out)?;
            let runner = Runner::new(&cfg, force);
            runner.run(true)?;
            println!(
                "training artifacts under {} (config {})",
                cfg.output.dir.display(),
                cfg.hash_hex()
            );
            Ok(())
        }
        Cmd::Evaluate {
            config,
            seed,
            out,
            force,
        } => {
            let cfg = override_cfg(ExperimentConfig::load(&config)?, seed, out)?;
            let out_dir = cfg.output.dir.clone();
            let csv = runner::run_and_write(&cfg, &out_dir, force)?;
            println!("results written to {}", csv.display());
            Ok(())
        }
        Cmd::Baseline { config, seed, out } => {
            let mut cfg = override_cfg(ExperimentConfig::load(&config)?, seed, out)?;
            cfg.experiment.methods = vec!["classical".into()];
            cfg.validate().context("validating baseline config")?;
            let out_dir = cfg.output.dir.clone();
            let csv = runner::run_and_write(&cfg, &out_dir, false)?;
            println!("baseline results written to {}", csv.display());
            Ok(())
        }
        Cmd::Plot { csv, out } => {
            let mut rows = Vec::new();
            let mut hashes = Vec::new();
            for path in &csv {
                let (h, mut r) = csvio::read_csv(path)?;
                if !hashes.contains(&h) {
                    hashes.push(h);
                }
                rows.append(&mut r);
            }
            std::fs::create_dir_all(&out)?;
            write_standard_plots(&rows, &hashes, &out)?;
            println!("plots written to {}", out.display());
            Ok(())
        }
        Cmd::Reproduce {
            figure,
            config,
            seed,
            out,
            force,
        } => reproduce(&figure, config, seed, out, force),
        Cmd::Schema => {
            print!("{}", config::SCHEMA);
            Ok(())
        }
        Cmd::GenCorpus {
            users,
            groups,
            seed,
            out,
        } => {
            use semcom_core::corpus::synth;
            std::fs::create_dir_all(&out)?;
            let g = synth::generate_groups(groups, users, seed);
            for (u, lines) in synth::per_user_lines(&g).iter().enumerate() {
                std::fs::write(out.join(format!("user{}.txt", u + 1)), lines.join("\n") + "\n")?;
            }
            std::fs::write(out.join("pairs.tsv"), synth::to_pair_lines(&g).join("\n") + "\n")?;
            println!("{groups} sentence groups for {users} users under {}", out.display());
            Ok(())
        }
    }
}

fn override_cfg(
    mut cfg: ExperimentConfig,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<ExperimentConfig> {
    if let Some(s) = seed {
        cfg.experiment.seeds = vec![s];
    }
    if let Some(o) = out {
        cfg.output.dir = o;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_standard_plots(rows: &[csvio::ResultRow], hashes: &[String], out: &Path) -> Result<()> {
    plot::plot_metric_traced(
        rows,
        Metric::MinSimilarity,
        "minimal semantic similarity vs channel case",
        &out.join("min_similarity.svg"),
        hashes,
    )?;
    for n in 1..=4 {
        plot::plot_metric_traced(
            rows,
            Metric::MinBleu(n),
            &format!("minimal BLEU ({n}-gram) vs channel case"),
            &out.join(format!("min_bleu{n}.svg")),
            hashes,
        )?;
    }
    Ok(())
}

/// Desk-scale base config shared by the prewired figures.
fn desk_config(scenario: &str, channel: &str) -> String {
    format!(
        r#"version = 1

[experiment]
scenario = "{scenario}"
channel = "{channel}"
cases = [1, 2, 3, 4, 5, 6, 7]
methods = [
  "full_retrain_si",
  "full_retrain_no_si",
  "partial_retrain_si",
  "partial_retrain_no_si",
  "isolated",
  "classical",
]
seeds = [1, 2, 3]
threshold = 0.9

[corpus]
synthetic_groups = 256
synthetic_seed = 5
eval_sentences = 128

[dims]
d = 32
c = 16
n = 10
frame_sentences = 16
enc_layers = 2
dec_layers = 2
heads = 4
ff = 128
dropout = 0.0

[training]
pretrain_epochs = 10
joint_epochs = 10
retrain_epochs = 24

[output]
dir = "out/reproduce"
"#
    )
}

fn reproduce(
    figure: &str,
    config: Option<PathBuf>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    force: bool,
) -> Result<()> {
    let out_root = out.unwrap_or_else(|| PathBuf::from("out/reproduce"));
    match figure {
        "sim3" | "bleu3-awgn" | "bleu3-rayleigh" | "sim5" => {
            let (scenario, channel) = match figure {
                "sim3" | "bleu3-awgn" => ("two_plus_one", "awgn"),
                "bleu3-rayleigh" => ("two_plus_one", "rayleigh"),
                "sim5" => ("three_plus_two", "awgn"),
                _ => unreachable!(),
            };
            let mut cfg: ExperimentConfig = match &config {
                Some(p) => ExperimentConfig::load(p)?,
                None => toml::from_str(&desk_config(scenario, channel))
                    .context("parsing built-in config")?,
            };
            let fig_dir = out_root.join(figure);
            cfg.output.dir = fig_dir.clone();
            let cfg = override_cfg(cfg, seed, None)?;
            std::fs::create_dir_all(&fig_dir)?;
            std::fs::write(
                fig_dir.join("config.toml"),
                toml::to_string_pretty(&cfg).context("serializing config")?,
            )?;
            let csv = runner::run_and_write(&cfg, &fig_dir, force)?;
            let (hash, rows) = csvio::read_csv(&csv)?;
            write_standard_plots(&rows, &[hash], &fig_dir)?;
            println!("figure artifacts under {}", fig_dir.display());
            Ok(())
        }
        "loss" => reproduce_loss(&out_root.join("loss"), seed.unwrap_or(1)),
        other => bail!("unknown figure {other:?}; expected sim3, bleu3-awgn, bleu3-rayleigh, sim5, or loss"),
    }
}

/// Joint-training loss curves with and without pretrained initialization.
fn reproduce_loss(out: &Path, seed: u64) -> Result<()> {
    use semcom_core::channel::{configure_case, ChannelModel, Scenario};
    use semcom_core::corpus::{synth, KnowledgeSet, Vocabulary};
    use semcom_core::training::{
        assemble_users, pretrain_single_user, train_initial_k, OptimizerConfig,
    };

    std::fs::create_dir_all(out)?;
    let users = 3;
    let groups = synth::generate_groups(192, users, 5);
    let per_user = synth::per_user_lines(&groups);
    let all: Vec<String> = per_user.iter().flatten().cloned().collect();
    let vocab = Vocabulary::build(&all, 1).map_err(|e| anyhow::anyhow!("{e}"))?;
    let knowledge: Vec<KnowledgeSet> = per_user
        .iter()
        .enumerate()
        .map(|(u, l)| KnowledgeSet::from_lines(u + 1, l, &vocab).unwrap())
        .collect();
    let dims = semcom_core::codec::CodecDims {
        vocab: vocab.size(),
        d: 32,
        m: 32,
        c: 16,
        n: 10,
        l: 16,
        enc_layers: 2,
        dec_layers: 2,
        heads: 4,
        d_ff: 128,
        dropout: 0.0,
    };
    let mut channel = configure_case(Scenario::TwoPlusOne, 5, ChannelModel::Awgn)?;
    channel.links.truncate(users);
    let opt = OptimizerConfig::default();
    let epochs = 12;

    let mut curves = Vec::new();
    for (label, pretrained) in [("with pretrained init", true), ("from scratch", false)] {
        let mut system = assemble_users(users, &dims, true, seed);
        if pretrained {
            for (u, stacks) in system.iter_mut().enumerate() {
                pretrain_single_user(
                    stacks,
                    &knowledge[u],
                    channel.links[u],
                    channel.sigma2,
                    &dims,
                    opt,
                    8,
                    seed ^ ((u as u64 + 1) * 31),
                )
                .map_err(|e| anyhow::anyhow!("pretraining: {e}"))?;
            }
        }
        let ks: Vec<&KnowledgeSet> = knowledge.iter().collect();
        let reports = train_initial_k(
            &mut system,
            &ks,
            &channel,
            &dims,
            opt,
            epochs,
            true,
            seed ^ 0xbeef,
        )
        .map_err(|e| anyhow::anyhow!("joint training: {e}"))?;
        // Mean loss per epoch.
        let mut per_epoch: Vec<(usize, f64, usize)> = Vec::new();
        for r in &reports {
            match per_epoch.last_mut() {
                Some(e) if e.0 == r.epoch => {
                    e.1 += r.aggregate;
                    e.2 += 1;
                }
                _ => per_epoch.push((r.epoch, r.aggregate, 1)),
            }
        }
        let curve: Vec<(usize, f64)> = per_epoch
            .iter()
            .map(|(e, sum, n)| (*e + 1, sum / *n as f64))
            .collect();
        let csv_path = out.join(format!(
            "loss_{}.csv",
            if pretrained { "pretrained" } else { "scratch" }
        ));
        let mut text = String::from("epoch,mean_joint_loss\n");
        for (e, l) in &curve {
            text.push_str(&format!("{e},{l:.12e}\n"));
        }
        std::fs::write(csv_path, text)?;
        curves.push((label.to_string(), curve));
    }
    plot::plot_loss_curves(
        &curves,
        "joint training loss: pretrained vs scratch initialization",
        &out.join("loss_comparison.svg"),
    )?;
    println!("loss comparison under {}", out.display());
    Ok(())
}

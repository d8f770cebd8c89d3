//! Staged experiment execution: pretrain, joint-train, retrain, evaluate.
//!
//! Stage outputs are checkpointed under the config hash; a stage whose
//! checkpoint already exists is loaded instead of retrained unless `force`
//! is set.  Stages are shared where their inputs coincide (pretraining is
//! method-independent; joint training is shared by the with/without-SI
//! method pairs).

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use semcom_core::baseline::{ClassicalCodec, HuffmanCodebook};
use semcom_core::channel::{configure_case, ChannelConfig};
use semcom_core::checkpoint::Checkpoint;
use semcom_core::codec::CodecDims;
use semcom_core::corpus::{synth, KnowledgeSet, Vocabulary};
use semcom_core::experiment::{evaluate_semantic, DecodeProcess};
use semcom_core::metrics::{FallbackEmbedder, MetricReport};
use semcom_core::sic::{DecodeOptions, UserStacks};
use semcom_core::training::{
    pretrain_single_user, retrain, train_initial_k, LossReport, RetrainMode,
};

use crate::config::{ExperimentConfig, Method};
use crate::csvio::ResultRow;

/// Corpus, dictionary, and eval references shared by every run.
pub struct CorpusBundle {
    pub vocab: Vocabulary,
    pub knowledge: Vec<KnowledgeSet>,
    pub references: Vec<Vec<String>>,
    pub dims: CodecDims,
}

pub struct Runner<'a> {
    pub cfg: &'a ExperimentConfig,
    pub out_dir: PathBuf,
    pub force: bool,
}

impl<'a> Runner<'a> {
    pub fn new(cfg: &'a ExperimentConfig, force: bool) -> Self {
        Self {
            cfg,
            out_dir: cfg.output.dir.clone(),
            force,
        }
    }

    fn ckpt_dir(&self) -> PathBuf {
        self.out_dir.join("checkpoints").join(self.cfg.hash_hex())
    }

    fn log_dir(&self) -> PathBuf {
        self.out_dir.join("logs").join(self.cfg.hash_hex())
    }

    /// Loads or synthesizes the per-user corpora and builds the dictionary.
    pub fn prepare_corpus(&self) -> Result<CorpusBundle> {
        let users = self.cfg.scenario()?.users();
        let per_user: Vec<Vec<String>> = if self.cfg.corpus.paths.is_empty() {
            let groups = synth::generate_groups(
                self.cfg.corpus.synthetic_groups,
                users,
                self.cfg.corpus.synthetic_seed,
            );
            let lines = synth::per_user_lines(&groups);
            let corpus_dir = self.out_dir.join("corpus");
            std::fs::create_dir_all(&corpus_dir)?;
            for (u, l) in lines.iter().enumerate() {
                std::fs::write(
                    corpus_dir.join(format!("user{}.txt", u + 1)),
                    l.join("\n") + "\n",
                )?;
            }
            std::fs::write(
                corpus_dir.join("pairs.tsv"),
                synth::to_pair_lines(&groups).join("\n") + "\n",
            )?;
            lines
        } else if self.cfg.corpus.paths.len() == 1 {
            // A premise TAB hypothesis pair file: users alternate columns.
            let pairs = semcom_core::corpus::load_pair_file(&self.cfg.corpus.paths[0])?;
            (0..users)
                .map(|u| {
                    pairs
                        .iter()
                        .map(|(p, h)| if u % 2 == 0 { p.clone() } else { h.clone() })
                        .collect()
                })
                .collect()
        } else {
            self.cfg
                .corpus
                .paths
                .iter()
                .map(|p| {
                    Ok(std::fs::read_to_string(p)
                        .with_context(|| format!("reading {}", p.display()))?
                        .lines()
                        .map(str::to_string)
                        .collect())
                })
                .collect::<Result<_>>()?
        };

        let all: Vec<String> = per_user.iter().flatten().cloned().collect();
        let vocab = Vocabulary::build(&all, self.cfg.corpus.min_count)
            .map_err(|e| anyhow::anyhow!("building vocabulary: {e}"))?;
        std::fs::create_dir_all(&self.out_dir)?;
        vocab
            .save(&self.out_dir.join("vocabulary.txt"))
            .map_err(|e| anyhow::anyhow!("saving vocabulary: {e}"))?;

        let mut knowledge = Vec::with_capacity(users);
        let mut references = Vec::with_capacity(users);
        for (u, lines) in per_user.iter().enumerate() {
            let ks = KnowledgeSet::from_lines(u + 1, lines, &vocab)
                .map_err(|e| anyhow::anyhow!("user {} corpus: {e}", u + 1))?;
            // References are the normalized forms of the held-in sentences.
            let refs: Vec<String> = ks
                .sentences
                .iter()
                .take(self.cfg.corpus.eval_sentences)
                .map(|s| semcom_core::corpus::detokenize(&s.token_ids, &vocab))
                .collect();
            knowledge.push(ks);
            references.push(refs);
        }
        let dims = self.cfg.codec_dims(vocab.size());
        dims.validate()
            .map_err(|e| anyhow::anyhow!("dims incompatible with corpus: {e}"))?;
        Ok(CorpusBundle {
            vocab,
            knowledge,
            references,
            dims,
        })
    }

    fn channel_for(&self, case: usize) -> Result<ChannelConfig> {
        Ok(configure_case(
            self.cfg.scenario()?,
            case,
            self.cfg.channel_model()?,
        )?)
    }

    /// Runs (or loads) single-user pretraining for one user.
    ///
    /// Pretraining is interference-free at the configured clean SNR, so it
    /// is case-independent and shared across all cases of a seed.
    fn pretrained_user(
        &self,
        bundle: &CorpusBundle,
        channel: &ChannelConfig,
        seed: u64,
        user: usize,
        logs: &mut Vec<(String, Vec<LossReport>)>,
    ) -> Result<UserStacks> {
        let mut stacks = semcom_core::training::assemble_users(1, &bundle.dims, false, seed)
            .pop()
            .unwrap();
        stacks.enc.user_index = user + 1;
        stacks.dec.user_index = user + 1;
        let path = self
            .ckpt_dir()
            .join(format!("seed{seed}_pre_u{}.ckpt", user + 1));
        if path.exists() && !self.force {
            Checkpoint::load(&path)
                .and_then(|c| c.apply_to_user(user as u32 + 1, &mut stacks))
                .map_err(|e| anyhow::anyhow!("loading {}: {e}", path.display()))?;
            return Ok(stacks);
        }
        let clean = semcom_core::channel::UserLink::clean(
            user + 1,
            self.cfg.training.pretrain_snr_db,
            channel.sigma2,
        );
        let reports = pretrain_single_user(
            &mut stacks,
            &bundle.knowledge[user],
            clean,
            channel.sigma2,
            &bundle.dims,
            self.cfg.optimizer(),
            self.cfg.training.pretrain_epochs,
            seed ^ ((user as u64 + 1) * 0x9e37),
        )
        .map_err(|e| anyhow::anyhow!("pretraining user {}: {e}", user + 1))?;
        std::fs::create_dir_all(self.ckpt_dir())?;
        Checkpoint::from_users(std::slice::from_ref(&stacks))
            .save(&path)
            .map_err(|e| anyhow::anyhow!("saving {}: {e}", path.display()))?;
        logs.push((format!("seed{seed}_pre_u{}", user + 1), reports));
        Ok(stacks)
    }

    /// Assembles the K+n user stacks with pretrained weights loaded.
    fn fresh_system(
        &self,
        bundle: &CorpusBundle,
        channel: &ChannelConfig,
        seed: u64,
        use_si: bool,
        logs: &mut Vec<(String, Vec<LossReport>)>,
    ) -> Result<Vec<UserStacks>> {
        let users = channel.links.len();
        let mut system =
            semcom_core::training::assemble_users(users, &bundle.dims, use_si, seed);
        for u in 0..users {
            let pre = self.pretrained_user(bundle, channel, seed, u, logs)?;
            let ck = Checkpoint::from_users(std::slice::from_ref(&pre));
            ck.apply_to_user(u as u32 + 1, &mut system[u])
                .map_err(|e| anyhow::anyhow!("applying pretrain to user {}: {e}", u + 1))?;
        }
        Ok(system)
    }

    /// Runs (or loads) the joint stage over the old users, in place.
    #[allow(clippy::too_many_arguments)]
    fn joint_stage(
        &self,
        bundle: &CorpusBundle,
        channel: &ChannelConfig,
        case: usize,
        seed: u64,
        use_si: bool,
        system: &mut [UserStacks],
        k_old: usize,
        logs: &mut Vec<(String, Vec<LossReport>)>,
    ) -> Result<()> {
        let tag = if use_si { "si" } else { "nosi" };
        let path = self
            .ckpt_dir()
            .join(format!("case{case}_seed{seed}_joint_{tag}.ckpt"));
        if path.exists() && !self.force {
            Checkpoint::load(&path)
                .and_then(|c| c.apply_to_users(&mut system[..k_old]))
                .map_err(|e| anyhow::anyhow!("loading {}: {e}", path.display()))?;
            return Ok(());
        }
        let channel_old = ChannelConfig {
            links: channel.links[..k_old].to_vec(),
            sigma2: channel.sigma2,
            model: channel.model,
        };
        let ks: Vec<&KnowledgeSet> = bundle.knowledge[..k_old].iter().collect();
        let reports = train_initial_k(
            &mut system[..k_old],
            &ks,
            &channel_old,
            &bundle.dims,
            self.cfg.optimizer(),
            self.cfg.training.joint_epochs,
            use_si,
            seed ^ 0x5eed_1,
        )
        .map_err(|e| anyhow::anyhow!("joint training: {e}"))?;
        std::fs::create_dir_all(self.ckpt_dir())?;
        Checkpoint::from_users(&system[..k_old])
            .save(&path)
            .map_err(|e| anyhow::anyhow!("saving {}: {e}", path.display()))?;
        logs.push((format!("case{case}_seed{seed}_joint_{tag}"), reports));
        Ok(())
    }

    /// Runs (or loads) the retraining stage; returns the mean seconds per
    /// iteration of this stage (0 when loaded from checkpoint).
    #[allow(clippy::too_many_arguments)]
    fn retrain_stage(
        &self,
        bundle: &CorpusBundle,
        channel: &ChannelConfig,
        case: usize,
        seed: u64,
        method: Method,
        system: &mut [UserStacks],
        k_old: usize,
        logs: &mut Vec<(String, Vec<LossReport>)>,
    ) -> Result<f64> {
        let path = self
            .ckpt_dir()
            .join(format!("case{case}_seed{seed}_retrain_{}.ckpt", method.name()));
        if path.exists() && !self.force {
            Checkpoint::load(&path)
                .and_then(|c| c.apply_to_users(system))
                .map_err(|e| anyhow::anyhow!("loading {}: {e}", path.display()))?;
            return Ok(0.0);
        }
        let mode = match method {
            Method::FullRetrainSi | Method::FullRetrainNoSi => RetrainMode::Full,
            Method::PartialRetrainSi | Method::PartialRetrainNoSi => RetrainMode::Partial,
            _ => bail!("method {} has no retraining stage", method.name()),
        };
        let tau = if self.cfg.training.tau.is_empty() {
            None
        } else {
            Some(self.cfg.training.tau.clone())
        };
        let ks: Vec<&KnowledgeSet> = bundle.knowledge.iter().collect();
        let reports = retrain(
            mode,
            system,
            k_old,
            &ks,
            channel,
            &bundle.dims,
            self.cfg.optimizer(),
            self.cfg.training.retrain_epochs,
            tau,
            method.uses_side_info(),
            seed ^ 0x5eed_2,
        )
        .map_err(|e| anyhow::anyhow!("retraining ({}): {e}", method.name()))?;
        let mean_wall = if reports.is_empty() {
            0.0
        } else {
            reports.iter().map(|r| r.wall_secs).sum::<f64>() / reports.len() as f64
        };
        std::fs::create_dir_all(self.ckpt_dir())?;
        Checkpoint::from_users(system)
            .save(&path)
            .map_err(|e| anyhow::anyhow!("saving {}: {e}", path.display()))?;
        logs.push((
            format!("case{case}_seed{seed}_retrain_{}", method.name()),
            reports,
        ));
        Ok(mean_wall)
    }

    fn evaluate_method(
        &self,
        bundle: &CorpusBundle,
        channel: &ChannelConfig,
        method: Method,
        system: &[UserStacks],
        k_old: usize,
        seed: u64,
    ) -> Result<MetricReport> {
        let process = match method {
            Method::PartialRetrainSi | Method::PartialRetrainNoSi => {
                DecodeProcess::TwoPhase { k_old }
            }
            _ => DecodeProcess::Joint,
        };
        let opts = DecodeOptions {
            repetition_penalty: self.cfg.training.repetition_penalty,
            use_side_info: method.uses_side_info(),
        };
        let users: Vec<&UserStacks> = system.iter().collect();
        evaluate_semantic(
            &users,
            &bundle.references,
            channel,
            &bundle.dims,
            &bundle.vocab,
            process,
            opts,
            &FallbackEmbedder,
            self.cfg.experiment.threshold,
            seed ^ 0xe7a1,
        )
        .map_err(|e| anyhow::anyhow!("evaluating {}: {e}", method.name()))
    }

    fn classical_report(
        &self,
        bundle: &CorpusBundle,
        channel: &ChannelConfig,
        seed: u64,
    ) -> Result<MetricReport> {
        let codecs: Vec<ClassicalCodec> = bundle
            .knowledge
            .iter()
            .map(|ks| {
                let sentences: Vec<Vec<String>> = ks
                    .sentences
                    .iter()
                    .map(|s| {
                        semcom_core::corpus::detokenize(&s.token_ids, &bundle.vocab)
                            .split_whitespace()
                            .map(str::to_string)
                            .collect()
                    })
                    .collect();
                HuffmanCodebook::from_sentences(&sentences)
                    .map(|cb| ClassicalCodec::new(cb, self.cfg.training.classical_repetition))
            })
            .collect::<semcom_core::Result<_>>()
            .map_err(|e| anyhow::anyhow!("building codebooks: {e}"))?;
        semcom_core::experiment::evaluate_classical(
            &codecs,
            &bundle.references,
            channel,
            &bundle.dims,
            &FallbackEmbedder,
            self.cfg.experiment.threshold,
            seed ^ 0xc1a55,
        )
        .map_err(|e| anyhow::anyhow!("classical evaluation: {e}"))
    }

    fn write_logs(&self, logs: &[(String, Vec<LossReport>)]) -> Result<()> {
        if logs.is_empty() {
            return Ok(());
        }
        std::fs::create_dir_all(self.log_dir())?;
        for (name, reports) in logs {
            let users = reports.first().map(|r| r.per_user.len()).unwrap_or(0);
            let mut text = format!("# config_hash={}\n", self.cfg.hash_hex());
            text.push_str(&LossReport::csv_header(users));
            text.push('\n');
            for r in reports {
                text.push_str(&r.csv_row());
                text.push('\n');
            }
            std::fs::write(self.log_dir().join(format!("{name}.csv")), text)?;
        }
        Ok(())
    }

    /// Executes every (case, method, seed) combination, returning CSV rows.
    pub fn run(&self, train_only: bool) -> Result<Vec<ResultRow>> {
        let bundle = self.prepare_corpus()?;
        let scenario = self.cfg.scenario()?;
        let k_old = self.cfg.k_old()?;
        let methods = self.cfg.methods()?;
        let mut rows = Vec::new();

        for &case in &self.cfg.experiment.cases {
            let channel = self.channel_for(case)?;
            let snrs = scenario.snrs_db(case)?;
            for &seed in &self.cfg.experiment.seeds {
                for &method in &methods {
                    let mut logs: Vec<(String, Vec<LossReport>)> = Vec::new();
                    let (report, wall) = match method {
                        Method::Classical => {
                            if train_only {
                                continue;
                            }
                            (self.classical_report(&bundle, &channel, seed)?, 0.0)
                        }
                        Method::Isolated => {
                            let mut system = self.fresh_system(
                                &bundle, &channel, seed, false, &mut logs,
                            )?;
                            system.truncate(channel.links.len());
                            if train_only {
                                self.write_logs(&logs)?;
                                continue;
                            }
                            let r = self.evaluate_method(
                                &bundle, &channel, method, &system, k_old, seed,
                            )?;
                            (r, 0.0)
                        }
                        _ => {
                            let use_si = method.uses_side_info();
                            let mut system = self.fresh_system(
                                &bundle, &channel, seed, use_si, &mut logs,
                            )?;
                            self.joint_stage(
                                &bundle, &channel, case, seed, use_si, &mut system, k_old,
                                &mut logs,
                            )?;
                            let wall = self.retrain_stage(
                                &bundle, &channel, case, seed, method, &mut system, k_old,
                                &mut logs,
                            )?;
                            if train_only {
                                self.write_logs(&logs)?;
                                continue;
                            }
                            let r = self.evaluate_method(
                                &bundle, &channel, method, &system, k_old, seed,
                            )?;
                            (r, wall)
                        }
                    };
                    self.write_logs(&logs)?;
                    for (u, um) in report.users.iter().enumerate() {
                        rows.push(ResultRow {
                            scenario: self.cfg.experiment.scenario.clone(),
                            channel: self.cfg.experiment.channel.clone(),
                            case,
                            method: method.name().to_string(),
                            user: u + 1,
                            seed,
                            snr_db: snrs[u],
                            similarity: um.similarity,
                            bleu: um.bleu,
                            min_similarity: report.min_similarity,
                            min_bleu: report.min_bleu,
                            pass: report.pass,
                            wall_secs_per_iter: wall,
                        });
                    }
                }
            }
        }
        Ok(rows)
    }
}

/// Convenience wrapper: run everything and write `results.csv`.
pub fn run_and_write(cfg: &ExperimentConfig, out: &Path, force: bool) -> Result<PathBuf> {
    let mut runner = Runner::new(cfg, force);
    runner.out_dir = out.to_path_buf();
    std::fs::create_dir_all(out)?;
    let rows = runner.run(false)?;
    let csv = out.join("results.csv");
    crate::csvio::write_csv(&csv, &cfg.hash_hex(), &rows)?;
    Ok(csv)
}

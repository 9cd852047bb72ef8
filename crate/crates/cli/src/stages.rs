//! Pipeline stages. Each one checks its prerequisites, skips itself when the
//! manifest says its inputs are unchanged, and records what it produced.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use rlhaif_core::eval::{build_report, Annotation, Prediction};
use rlhaif_core::jsonl;
use rlhaif_core::policy::checkpoint::{Checkpoint, CheckpointConfig, ModelKind};
use rlhaif_core::policy::{DecodeMode, PolicyModel, Vocab};
use rlhaif_core::prefs::{
    build_preferences, collect_candidates, select_rankings, synthetic_generators, AnswerGenerator, CandidateSet,
    PreferencePair, RankerAdapter, RankingStore, MOCK_TIMESTAMP,
};
use rlhaif_core::reward::{train_rm, RewardModel};
use rlhaif_core::seed;
use rlhaif_core::stats::StatsRecord;
use rlhaif_core::taskgen::{generate_dataset, split_dataset, QAItem};
use rlhaif_core::trainers::{dpo_train, ppo_update, remax_update, sft_train, PpoState, RemaxState};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::manifest::{hash_bytes, hash_file, RunLock, RunManifest, StageRecord};
use crate::transport::HttpTransport;

/// Files the stages exchange.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Artifact {
    Train,
    Test,
    Candidates,
    Rankings,
    Prefs,
    Annotations,
    Sft,
    Rm,
    Ppo,
    Dpo,
    Remax,
    Predictions,
    Report,
    RmReport,
    Stats,
}

impl Artifact {
    pub fn rel_path(self, cfg: &RunConfig) -> PathBuf {
        let p = &cfg.paths;
        use Artifact::*;
        match self {
            Train => p.data_dir.join("train.jsonl"),
            Test => p.data_dir.join("test.jsonl"),
            Candidates => p.data_dir.join("candidates.jsonl"),
            Rankings => p.data_dir.join("rankings.jsonl"),
            Prefs => p.data_dir.join("prefs.jsonl"),
            Annotations => p.data_dir.join("annotations.jsonl"),
            Sft => p.checkpoint_dir.join("sft.ckpt"),
            Rm => p.checkpoint_dir.join("rm.ckpt"),
            Ppo => p.checkpoint_dir.join("ppo.ckpt"),
            Dpo => p.checkpoint_dir.join("dpo.ckpt"),
            Remax => p.checkpoint_dir.join("remax.ckpt"),
            Predictions => p.report_dir.join("predictions.jsonl"),
            Report => p.report_dir.join("report.json"),
            RmReport => p.report_dir.join("rm_report.json"),
            Stats => p.report_dir.join("stats.jsonl"),
        }
    }

    fn describe(self) -> (&'static str, &'static str) {
        use Artifact::*;
        match self {
            Train => ("training split", "gen-data"),
            Test => ("test split", "gen-data"),
            Candidates => ("candidate sets", "collect"),
            Rankings => ("rankings", "rank"),
            Prefs => ("preference pairs", "build-prefs"),
            Annotations => ("annotations", "an annotation export"),
            Sft => ("sft checkpoint", "train-sft"),
            Rm => ("reward checkpoint", "train-rm"),
            Ppo => ("ppo checkpoint", "train-ppo"),
            Dpo => ("dpo checkpoint", "train-dpo"),
            Remax => ("remax checkpoint", "train-remax"),
            Predictions => ("predictions", "eval"),
            Report => ("report", "report"),
            RmReport => ("reward report", "train-rm"),
            Stats => ("training stats", "a training stage"),
        }
    }
}

/// Which ranker `rank` uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum RaterChoice {
    Ai,
    Mock,
}

/// Settings whose checkpoints the evaluation decodes, in report order.
pub const POLICY_SETTINGS: [(&str, Artifact); 4] =
    [("sft", Artifact::Sft), ("ppo", Artifact::Ppo), ("dpo", Artifact::Dpo), ("remax", Artifact::Remax)];

pub struct Run {
    pub dir: PathBuf,
    pub cfg: RunConfig,
    pub force: bool,
    manifest: RunManifest,
    _lock: RunLock,
}

impl Run {
    /// Locks `dir` for the lifetime of the run.
    pub fn open(dir: &Path, cfg: RunConfig, force: bool) -> CliResult<Self> {
        let lock = RunLock::acquire(dir)?;
        let config_hash = hash_bytes(&serde_json::to_vec(&cfg).map_err(rlhaif_core::Error::from)?);
        let manifest = RunManifest::load_or_new(dir, &config_hash)?;
        Ok(Run { dir: dir.to_path_buf(), cfg, force, manifest, _lock: lock })
    }

    pub fn path(&self, a: Artifact) -> PathBuf {
        self.dir.join(a.rel_path(&self.cfg))
    }

    fn require(&self, a: Artifact) -> CliResult<PathBuf> {
        let p = self.path(a);
        if p.exists() {
            Ok(p)
        } else {
            let (artifact, producer) = a.describe();
            Err(CliError::Missing { artifact, producer })
        }
    }

    fn stage_seed(&self, stage: &str, salt: u64) -> u64 {
        seed::mix(seed::mix(self.cfg.seed, seed::salt(stage)), salt)
    }

    /// Runs `body` unless the manifest shows `stage` already ran on the same
    /// inputs. `settings` is the config slice the stage depends on.
    fn stage<S: Serialize>(
        &mut self,
        stage: &str,
        settings: &S,
        inputs: &[Artifact],
        outputs: &[Artifact],
        body: impl FnOnce(&Self) -> CliResult<()>,
    ) -> CliResult<()> {
        let mut hashes = BTreeMap::new();
        let settings_json = serde_json::to_vec(&(self.cfg.seed, settings)).map_err(rlhaif_core::Error::from)?;
        hashes.insert("config".to_string(), hash_bytes(&settings_json));
        for &a in inputs {
            let p = self.require(a)?;
            hashes.insert(a.rel_path(&self.cfg).display().to_string(), hash_file(&p)?);
        }
        if !self.force && self.manifest.is_current(stage, &hashes, &self.dir) {
            log::info!("{stage}: up to date");
            println!("{stage}: up to date");
            return Ok(());
        }
        let start = Instant::now();
        log::info!("{stage}: running");
        body(self)?;
        let mut out = BTreeMap::new();
        for &a in outputs {
            out.insert(a.rel_path(&self.cfg).display().to_string(), hash_file(&self.path(a))?);
        }
        self.manifest.push(StageRecord {
            stage: stage.to_string(),
            input_hashes: hashes,
            outputs: out,
            wall_time_secs: start.elapsed().as_secs_f64(),
            completed_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        });
        self.manifest.save(&self.dir)?;
        Ok(())
    }

    pub fn gen_data(&mut self) -> CliResult<()> {
        let tg = self.cfg.task_gen.clone();
        self.stage("gen-data", &tg, &[], &[Artifact::Train, Artifact::Test], |r| {
            let items = generate_dataset(tg.n_base, r.stage_seed("gen-data", 0))?;
            let (train, test) = split_dataset(&items, tg.train_fraction, r.stage_seed("gen-data", 1))?;
            jsonl::write(&r.path(Artifact::Train), &train)?;
            jsonl::write(&r.path(Artifact::Test), &test)?;
            println!("gen-data: {} train, {} test items", train.len(), test.len());
            Ok(())
        })
    }

    pub fn collect(&mut self) -> CliResult<()> {
        self.stage("collect", &(), &[Artifact::Train], &[Artifact::Candidates], |r| {
            let items: Vec<QAItem> = jsonl::read(&r.path(Artifact::Train))?;
            let gens = synthetic_generators();
            let refs: Vec<&dyn AnswerGenerator> = gens.iter().map(|g| g as &dyn AnswerGenerator).collect();
            let base = r.stage_seed("collect", 0);
            let sets = items
                .iter()
                .map(|it| collect_candidates(it, &refs, seed::mix(base, seed::salt(&it.id))))
                .collect::<Result<Vec<_>, _>>()?;
            jsonl::write(&r.path(Artifact::Candidates), &sets)?;
            println!("collect: {} candidate sets", sets.len());
            Ok(())
        })
    }

    pub fn rank(&mut self, rater: RaterChoice) -> CliResult<()> {
        let ranker = self.cfg.ranker.clone();
        let settings = (rater, if rater == RaterChoice::Ai { Some(&ranker) } else { None });
        self.stage("rank", &settings, &[Artifact::Candidates], &[Artifact::Rankings], |r| {
            let adapter = match rater {
                RaterChoice::Mock => RankerAdapter::mock(),
                RaterChoice::Ai => {
                    let endpoint = ranker
                        .endpoint
                        .clone()
                        .ok_or_else(|| CliError::Usage("rank --rater ai needs ranker.endpoint in run.json".into()))?;
                    let transport = HttpTransport::new(endpoint, &ranker.token_env, ranker.timeout_secs)?;
                    RankerAdapter::external(Box::new(transport), ranker.rater_id.clone(), ranker.retries)
                }
            };
            let sets: Vec<CandidateSet> = jsonl::read(&r.path(Artifact::Candidates))?;
            let mut store = RankingStore::open(&r.path(Artifact::Rankings))?;
            let mut ranked = Vec::with_capacity(sets.len());
            for set in &sets {
                let ts = if adapter.is_mock() {
                    MOCK_TIMESTAMP.to_string()
                } else {
                    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
                };
                ranked.push(adapter.rank(set, &ts)?);
            }
            let replaced = store.upsert_many(ranked)?;
            println!("rank: {} questions ranked ({replaced} replaced)", sets.len());
            Ok(())
        })
    }

    pub fn build_prefs(&mut self) -> CliResult<()> {
        self.stage("build-prefs", &(), &[Artifact::Candidates, Artifact::Rankings], &[Artifact::Prefs], |r| {
            let sets: Vec<CandidateSet> = jsonl::read(&r.path(Artifact::Candidates))?;
            let store = RankingStore::open(&r.path(Artifact::Rankings))?;
            let pairs = build_preferences(&sets, &select_rankings(store.rankings()))?;
            jsonl::write(&r.path(Artifact::Prefs), &pairs)?;
            println!("build-prefs: {} pairs", pairs.len());
            Ok(())
        })
    }

    pub fn train_sft(&mut self) -> CliResult<()> {
        let settings = (self.cfg.model.clone(), self.cfg.sft.clone());
        self.stage("train-sft", &settings, &[Artifact::Train], &[Artifact::Sft], |r| {
            let items: Vec<QAItem> = jsonl::read(&r.path(Artifact::Train))?;
            let mut model = PolicyModel::new(r.cfg.model.clone(), r.stage_seed("train-sft", 0))?;
            let cfg = rlhaif_core::trainers::SftConfig { seed: r.stage_seed("train-sft", r.cfg.sft.seed), ..r.cfg.sft.clone() };
            let rep = sft_train(&mut model, &items, &cfg)?;
            r.save_policy(&model, "sft", Artifact::Sft)?;
            r.write_stats("sft", &rep.stats)?;
            println!("train-sft: final epoch loss {:.4}", rep.epoch_losses.last().copied().unwrap_or(f64::NAN));
            Ok(())
        })
    }

    pub fn train_rm(&mut self) -> CliResult<()> {
        let settings = (self.cfg.reward_model_config(), self.cfg.rm.train.clone());
        self.stage("train-rm", &settings, &[Artifact::Prefs], &[Artifact::Rm, Artifact::RmReport], |r| {
            let pairs: Vec<PreferencePair> = jsonl::read(&r.path(Artifact::Prefs))?;
            let mut rm = RewardModel::new(r.cfg.reward_model_config(), r.stage_seed("train-rm", 0))?;
            let cfg = rlhaif_core::reward::RmTrainConfig {
                seed: r.stage_seed("train-rm", r.cfg.rm.train.seed),
                ..r.cfg.rm.train.clone()
            };
            let rep = train_rm(&mut rm, &pairs, &cfg)?;
            let ckpt = Checkpoint {
                config: CheckpointConfig { kind: ModelKind::Reward, model: rm.config.clone(), stage: Some("rm".into()) },
                params: rm.params.clone(),
            };
            save_checkpoint(&ckpt, &r.path(Artifact::Rm))?;
            let summary = serde_json::json!({
                "initial_heldout_accuracy": rep.initial_heldout_accuracy,
                "heldout_accuracy": rep.heldout_accuracy,
                "heldout_pairs": rep.heldout_pairs,
                "epoch_losses": rep.epoch_losses,
                "margin_histogram": rep.margin_histogram,
            });
            write_json(&r.path(Artifact::RmReport), &summary)?;
            r.write_stats("rm", &rep.stats)?;
            println!(
                "train-rm: held-out accuracy {:.3} (untrained {:.3}, {} pairs)",
                rep.heldout_accuracy, rep.initial_heldout_accuracy, rep.heldout_pairs
            );
            Ok(())
        })
    }

    pub fn train_ppo(&mut self) -> CliResult<()> {
        let settings = self.cfg.ppo.clone();
        let inputs = [Artifact::Rm, Artifact::Sft, Artifact::Train];
        self.stage("train-ppo", &settings, &inputs, &[Artifact::Ppo], |r| {
            let (mut policy, rm, prompts) = r.rl_inputs()?;
            let cfg = rlhaif_core::trainers::PpoConfig {
                seed: r.stage_seed("train-ppo", settings.config.seed),
                ..settings.config.clone()
            };
            let mut state = PpoState::new(&policy, &cfg)?;
            let batches = prompt_batches(&prompts, cfg.rollouts_per_update, settings.iterations, cfg.seed);
            let mut stats = Vec::with_capacity(batches.len());
            for batch in &batches {
                let s = ppo_update(&mut policy, &mut state, &rm, batch, &cfg)?;
                log::info!("ppo iter {}: reward {:.4} kl {:.4}", s.iter, s.mean_reward, s.mean_kl);
                stats.push(s.record());
            }
            r.save_policy(&policy, "ppo", Artifact::Ppo)?;
            r.write_stats("ppo", &stats)?;
            println!("train-ppo: {} iterations", batches.len());
            Ok(())
        })
    }

    pub fn train_dpo(&mut self) -> CliResult<()> {
        let settings = self.cfg.dpo.clone();
        self.stage("train-dpo", &settings, &[Artifact::Sft, Artifact::Prefs], &[Artifact::Dpo], |r| {
            let mut policy = r.load_policy(Artifact::Sft)?;
            policy.freeze_reference();
            let pairs: Vec<PreferencePair> = jsonl::read(&r.path(Artifact::Prefs))?;
            let cfg = rlhaif_core::trainers::DpoConfig { seed: r.stage_seed("train-dpo", settings.seed), ..settings.clone() };
            let rep = dpo_train(&mut policy, &pairs, &cfg)?;
            r.save_policy(&policy, "dpo", Artifact::Dpo)?;
            r.write_stats("dpo", &rep.stats)?;
            println!(
                "train-dpo: positive margins on {:.3} of pairs",
                rep.margin_pos_frac.last().copied().unwrap_or(f64::NAN)
            );
            Ok(())
        })
    }

    pub fn train_remax(&mut self) -> CliResult<()> {
        let settings = self.cfg.remax.clone();
        let inputs = [Artifact::Rm, Artifact::Sft, Artifact::Train];
        self.stage("train-remax", &settings, &inputs, &[Artifact::Remax], |r| {
            let (mut policy, rm, prompts) = r.rl_inputs()?;
            let cfg = rlhaif_core::trainers::RemaxConfig {
                seed: r.stage_seed("train-remax", settings.config.seed),
                ..settings.config.clone()
            };
            let mut state = RemaxState::new(&policy, &cfg);
            let batches = prompt_batches(&prompts, settings.prompts_per_iter, settings.iterations, cfg.seed);
            let mut stats = Vec::with_capacity(batches.len());
            for batch in &batches {
                let s = remax_update(&mut policy, &mut state, &rm, batch, &cfg)?;
                log::info!("remax iter {}: reward {:.4} kl {:.4}", s.iter, s.mean_reward, s.mean_kl);
                stats.push(s.record());
            }
            r.save_policy(&policy, "remax", Artifact::Remax)?;
            r.write_stats("remax", &stats)?;
            println!("train-remax: {} iterations", batches.len());
            Ok(())
        })
    }

    /// Greedy answers to every test question from each available checkpoint.
    pub fn eval(&mut self) -> CliResult<()> {
        self.require(Artifact::Sft)?;
        let mut inputs = vec![Artifact::Test];
        inputs.extend(POLICY_SETTINGS.iter().map(|&(_, a)| a).filter(|&a| self.path(a).exists()));
        let max_tokens = self.cfg.eval.max_tokens;
        self.stage("eval", &self.cfg.eval.clone(), &inputs, &[Artifact::Predictions], |r| {
            let test: Vec<QAItem> = jsonl::read(&r.path(Artifact::Test))?;
            let vocab = Vocab::new();
            let mut preds = Vec::new();
            for &(setting, a) in POLICY_SETTINGS.iter().filter(|&&(_, a)| inputs.contains(&a)) {
                let policy = r.load_policy(a)?;
                for item in &test {
                    let prompt = vocab.encode_prompt(&item.question)?;
                    let room = policy.config.context_length.saturating_sub(prompt.len());
                    let g = policy.generate(&prompt, DecodeMode::Greedy, max_tokens.min(room))?;
                    preds.push(Prediction {
                        question_id: item.id.clone(),
                        setting: setting.to_string(),
                        text: vocab.decode(g.text_tokens()),
                    });
                }
                println!("eval: {setting} decoded {} questions", test.len());
            }
            jsonl::write(&r.path(Artifact::Predictions), &preds)?;
            Ok(())
        })
    }

    pub fn report(&mut self) -> CliResult<()> {
        let mut inputs = vec![Artifact::Predictions, Artifact::Test];
        if self.path(Artifact::Annotations).exists() {
            inputs.push(Artifact::Annotations);
        }
        self.stage("report", &(), &inputs, &[Artifact::Report], |r| {
            let preds: Vec<Prediction> = jsonl::read(&r.path(Artifact::Predictions))?;
            let test: Vec<QAItem> = jsonl::read(&r.path(Artifact::Test))?;
            let annotations: Vec<Annotation> =
                if inputs.contains(&Artifact::Annotations) { jsonl::read(&r.path(Artifact::Annotations))? } else { Vec::new() };
            let mut settings: Vec<String> = Vec::new();
            for p in &preds {
                if !settings.contains(&p.setting) {
                    settings.push(p.setting.clone());
                }
            }
            let report = build_report(&settings, &preds, &test, &annotations)?;
            write_json(&r.path(Artifact::Report), &report)?;
            for (name, s) in &report.settings {
                println!(
                    "report: {name:<6} accuracy {:.3} ({}/{})  METEOR {:.2}  BLEU-4 {:.2}  ROUGE-L {:.2}",
                    s.accuracy.rate(),
                    s.accuracy.correct,
                    s.accuracy.total,
                    s.metrics.meteor,
                    s.metrics.bleu4,
                    s.metrics.rouge_l
                );
            }
            Ok(())
        })
    }

    /// Every stage in order: data, feedback, SFT, reward model, then the
    /// three policy optimizers, evaluation and the report.
    pub fn pipeline(&mut self, rater: RaterChoice) -> CliResult<()> {
        self.gen_data()?;
        self.collect()?;
        self.rank(rater)?;
        self.build_prefs()?;
        self.train_sft()?;
        self.train_rm()?;
        self.train_ppo()?;
        self.train_dpo()?;
        self.train_remax()?;
        self.eval()?;
        self.report()
    }

    fn load_policy(&self, a: Artifact) -> CliResult<PolicyModel> {
        let ckpt = Checkpoint::load(&self.require(a)?)?;
        if ckpt.config.kind != ModelKind::Policy {
            return Err(CliError::Stage(format!("{} is not a policy checkpoint", self.path(a).display())));
        }
        Ok(PolicyModel::from_params(ckpt.config.model, ckpt.params)?)
    }

    fn load_reward(&self) -> CliResult<RewardModel> {
        let ckpt = Checkpoint::load(&self.require(Artifact::Rm)?)?;
        if ckpt.config.kind != ModelKind::Reward {
            return Err(CliError::Stage(format!("{} is not a reward checkpoint", self.path(Artifact::Rm).display())));
        }
        Ok(RewardModel::from_params(ckpt.config.model, ckpt.params)?)
    }

    /// SFT policy with a frozen reference, the reward model and encoded
    /// training prompts.
    fn rl_inputs(&self) -> CliResult<(PolicyModel, RewardModel, Vec<Vec<usize>>)> {
        let mut policy = self.load_policy(Artifact::Sft)?;
        policy.freeze_reference();
        let rm = self.load_reward()?;
        let items: Vec<QAItem> = jsonl::read(&self.path(Artifact::Train))?;
        let vocab = Vocab::new();
        let prompts = items.iter().map(|it| vocab.encode_prompt(&it.question)).collect::<Result<Vec<_>, _>>()?;
        Ok((policy, rm, prompts))
    }

    fn save_policy(&self, policy: &PolicyModel, stage: &str, a: Artifact) -> CliResult<()> {
        let ckpt = Checkpoint {
            config: CheckpointConfig { kind: ModelKind::Policy, model: policy.config.clone(), stage: Some(stage.into()) },
            params: policy.params.clone(),
        };
        save_checkpoint(&ckpt, &self.path(a))
    }

    /// Replaces this stage's lines in stats.jsonl, keeping the others.
    fn write_stats(&self, stage: &str, records: &[StatsRecord]) -> CliResult<()> {
        let path = self.path(Artifact::Stats);
        let mut all: Vec<StatsRecord> = if path.exists() { jsonl::read(&path)? } else { Vec::new() };
        all.retain(|s| s.stage != stage);
        all.extend_from_slice(records);
        jsonl::write(&path, &all)?;
        Ok(())
    }
}

/// `iterations` batches of `size` prompts, walking seeded shuffles of the
/// prompt list.
fn prompt_batches(prompts: &[Vec<usize>], size: usize, iterations: usize, seed: u64) -> Vec<Vec<Vec<usize>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = Vec::new();
    let mut out = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let mut batch = Vec::with_capacity(size);
        while batch.len() < size {
            if order.is_empty() {
                order = (0..prompts.len()).collect();
                order.shuffle(&mut rng);
            }
            batch.push(prompts[order.pop().expect("refilled above")].clone());
        }
        out.push(batch);
    }
    out
}

fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    ckpt.save(path)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(rlhaif_core::Error::from)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_cover_prompts_before_repeating() {
        let prompts: Vec<Vec<usize>> = (0..5).map(|i| vec![i]).collect();
        let b = prompt_batches(&prompts, 3, 3, 1);
        let flat: Vec<usize> = b.iter().flatten().map(|p| p[0]).collect();
        let mut first: Vec<usize> = flat[..5].to_vec();
        first.sort();
        assert_eq!(first, [0, 1, 2, 3, 4]);
        assert_eq!(b, prompt_batches(&prompts, 3, 3, 1));
        assert_ne!(b, prompt_batches(&prompts, 3, 3, 2));
    }
}

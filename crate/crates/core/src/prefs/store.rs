//! Persisted rankings with per-(question, rater) upsert and the precedence
//! rule that picks one ranking per question.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::{Ranking, RaterKind};
use crate::error::Result;
use crate::jsonl;

/// `rankings.jsonl` held in memory; every write rewrites the file.
#[derive(Debug)]
pub struct RankingStore {
    path: PathBuf,
    rankings: Vec<Ranking>,
}

impl RankingStore {
    /// Loads `path`, or starts empty when it does not exist.
    pub fn open(path: &Path) -> Result<Self> {
        let rankings = if path.exists() { jsonl::read(path)? } else { Vec::new() };
        Ok(RankingStore { path: path.to_path_buf(), rankings })
    }

    pub fn rankings(&self) -> &[Ranking] {
        &self.rankings
    }

    /// Inserts or replaces the ranking with the same question and rater.
    /// Returns true when an earlier ranking was replaced.
    pub fn upsert(&mut self, ranking: Ranking) -> Result<bool> {
        let replaced = self.put(ranking);
        self.save()?;
        Ok(replaced)
    }

    /// `upsert` for many rankings with a single rewrite; returns how many
    /// replaced an earlier record.
    pub fn upsert_many(&mut self, rankings: impl IntoIterator<Item = Ranking>) -> Result<usize> {
        let replaced = rankings.into_iter().map(|r| self.put(r)).filter(|&b| b).count();
        self.save()?;
        Ok(replaced)
    }

    fn put(&mut self, ranking: Ranking) -> bool {
        let pos = self
            .rankings
            .iter()
            .position(|r| r.question_id == ranking.question_id && r.rater == ranking.rater);
        match pos {
            Some(i) => {
                self.rankings[i] = ranking;
                true
            }
            None => {
                self.rankings.push(ranking);
                false
            }
        }
    }

    fn save(&self) -> Result<()> {
        let tmp = self.path.with_extension("jsonl.tmp");
        jsonl::write(&tmp, &self.rankings)?;
        fs::rename(&tmp, &self.path)?;
        Ok(())
    }
}

/// One ranking per question: human over ai over mock, then the latest
/// timestamp, then the smallest rater id.
pub fn select_rankings(rankings: &[Ranking]) -> BTreeMap<String, Ranking> {
    let mut out: BTreeMap<String, Ranking> = BTreeMap::new();
    for r in rankings {
        let better = match out.get(&r.question_id) {
            None => true,
            Some(cur) => {
                let key = |x: &Ranking| (x.rater.kind.precedence(), std::cmp::Reverse(x.timestamp.clone()), x.rater.id.clone());
                key(r) < key(cur)
            }
        };
        if better {
            out.insert(r.question_id.clone(), r.clone());
        }
    }
    let mut counts: BTreeMap<RaterKind, usize> = BTreeMap::new();
    for r in out.values() {
        *counts.entry(r.rater.kind).or_default() += 1;
    }
    log::info!("ranking sources after precedence: {counts:?}");
    out
}

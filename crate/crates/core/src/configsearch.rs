//! Per-group configuration selection by repeated k-fold, fold-max-subtracted scoring.
//!
//! Within each fold every configuration's mean ROUGE-1 F1 is reduced by the
//! best mean in that fold, so each delta is <= 0 and the fold winner scores 0.
//! Deltas are averaged over all folds of all repeats; the configuration with
//! the highest average wins (ties go to the lexicographically smallest id).

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{figure_type_shares, Corpus, QuestionType};
use crate::ensemble::TypeTablePlan;
use crate::inference::PredictionLookup;
use crate::metrics::rouge1;

pub const OTHERS_GROUP: &str = "others";

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("no configurations to choose from")]
    NoConfigs,
    #[error("group is empty")]
    EmptyGroup,
    #[error("development pool is empty")]
    EmptyPool,
    #[error("score matrix has no row for instance '{0}'")]
    MissingRow(String),
    #[error("score matrix: {0}")]
    Matrix(String),
    #[error("no cached prediction for instance '{instance}' under config '{config}'")]
    MissingPrediction { instance: String, config: String },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Dense per-instance, per-configuration ROUGE-1 F1 scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    rows: Vec<String>,
    cols: Vec<String>,
    values: Vec<Vec<f64>>,
    row_index: HashMap<String, usize>,
}

impl ScoreMatrix {
    pub fn new(rows: Vec<String>, cols: Vec<String>, values: Vec<Vec<f64>>) -> Result<Self, SearchError> {
        if values.len() != rows.len() {
            return Err(SearchError::Matrix(format!(
                "{} rows but {} value rows",
                rows.len(),
                values.len()
            )));
        }
        let distinct_cols: BTreeSet<&String> = cols.iter().collect();
        if distinct_cols.len() != cols.len() {
            return Err(SearchError::Matrix("duplicate config column".into()));
        }
        for (r, row) in rows.iter().zip(&values) {
            if row.len() != cols.len() {
                return Err(SearchError::Matrix(format!(
                    "row '{r}' has {} values, expected {}",
                    row.len(),
                    cols.len()
                )));
            }
            if let Some(v) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(SearchError::Matrix(format!("row '{r}' has value {v} outside [0,1]")));
            }
        }
        let mut row_index = HashMap::with_capacity(rows.len());
        for (i, r) in rows.iter().enumerate() {
            if row_index.insert(r.clone(), i).is_some() {
                return Err(SearchError::Matrix(format!("duplicate row '{r}'")));
            }
        }
        Ok(ScoreMatrix {
            rows,
            cols,
            values,
            row_index,
        })
    }

    /// ROUGE-1 F1 of each config's cached answer against gold, for the
    /// given instances.
    pub fn from_caches<L: PredictionLookup + ?Sized>(
        caches: &L,
        corpus: &Corpus,
        instance_ids: &[String],
        configs: &[String],
    ) -> Result<Self, SearchError> {
        let mut values = Vec::with_capacity(instance_ids.len());
        for id in instance_ids {
            let inst = corpus.get(id).ok_or_else(|| SearchError::MissingRow(id.clone()))?;
            let row = configs
                .iter()
                .map(|c| {
                    caches
                        .lookup(id, c)
                        .map(|p| rouge1(&p.answer_text, &inst.gold_answer).f1)
                        .ok_or_else(|| SearchError::MissingPrediction {
                            instance: id.clone(),
                            config: c.clone(),
                        })
                })
                .collect::<Result<Vec<_>, _>>()?;
            values.push(row);
        }
        Self::new(instance_ids.to_vec(), configs.to_vec(), values)
    }

    pub fn rows(&self) -> &[String] {
        &self.rows
    }

    pub fn configs(&self) -> &[String] {
        &self.cols
    }

    pub fn row(&self, id: &str) -> Option<&[f64]> {
        self.row_index.get(id).map(|&i| self.values[i].as_slice())
    }

    pub fn row_of(&self, id: &str) -> Result<usize, SearchError> {
        self.row_index
            .get(id)
            .copied()
            .ok_or_else(|| SearchError::MissingRow(id.to_string()))
    }

    pub fn value(&self, row: usize, col: usize) -> f64 {
        self.values[row][col]
    }

    /// CSV with header `instance_id,<config>...`.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self, SearchError> {
        let mut rdr = csv::Reader::from_reader(reader);
        let header = rdr.headers()?.clone();
        if header.get(0) != Some("instance_id") {
            return Err(SearchError::Matrix("first column must be instance_id".into()));
        }
        let cols: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
        let mut rows = Vec::new();
        let mut values = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            rows.push(rec[0].to_string());
            let parsed = rec
                .iter()
                .skip(1)
                .map(|v| {
                    v.trim()
                        .parse::<f64>()
                        .map_err(|e| SearchError::Matrix(format!("row '{}': {e}", &rec[0])))
                })
                .collect::<Result<Vec<_>, _>>()?;
            values.push(parsed);
        }
        Self::new(rows, cols, values)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), SearchError> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["instance_id".to_string()];
        header.extend(self.cols.iter().cloned());
        w.write_record(&header)?;
        for (r, row) in self.rows.iter().zip(&self.values) {
            let mut rec = vec![r.clone()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load_csv(path: &Path) -> Result<Self, SearchError> {
        Self::read_csv(std::fs::File::open(path)?)
    }

    pub fn save_csv(&self, path: &Path) -> Result<(), SearchError> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupingOptions {
    /// Figure types with a share strictly below this merge into "others".
    pub others_threshold: f64,
    /// Figure type split by question type; `None` picks the largest type.
    pub split_type: Option<String>,
}

impl Default for GroupingOptions {
    fn default() -> Self {
        GroupingOptions {
            others_threshold: 0.02,
            split_type: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupingPlan {
    /// Group name → instance ids in corpus order.
    pub groups: BTreeMap<String, Vec<String>>,
    pub others_threshold: f64,
    pub split_type: String,
    /// Figure types merged into "others".
    pub merged_types: Vec<String>,
}

/// Name of the group for one question type of the split figure type.
pub fn split_group_name(figure_type: &str, qt: QuestionType) -> String {
    format!("{figure_type} / {qt}")
}

/// Partitions the development pool into figure-type groups.
pub fn build_groups(corpus: &Corpus, opts: &GroupingOptions) -> Result<GroupingPlan, SearchError> {
    let dev = corpus.filter(|i| i.split.is_dev());
    let shares = figure_type_shares(&dev).map_err(|_| SearchError::EmptyPool)?;
    let split_type = match &opts.split_type {
        Some(t) => t.clone(),
        None => {
            let counts = dev.figure_type_counts();
            let max = counts.values().copied().max().unwrap_or(0);
            counts
                .into_iter()
                .find(|(_, n)| *n == max)
                .map(|(t, _)| t)
                .expect("non-empty pool has a type")
        }
    };
    let merged: BTreeSet<&String> = shares
        .iter()
        .filter(|(t, &s)| s < opts.others_threshold && **t != split_type)
        .map(|(t, _)| t)
        .collect();
    let mut groups: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for inst in dev.instances() {
        let name = if inst.figure_type == split_type {
            split_group_name(&split_type, inst.question_type)
        } else if merged.contains(&inst.figure_type) || inst.figure_type == OTHERS_GROUP {
            OTHERS_GROUP.to_string()
        } else {
            inst.figure_type.clone()
        };
        groups.entry(name).or_default().push(inst.instance_id.clone());
    }
    Ok(GroupingPlan {
        groups,
        others_threshold: opts.others_threshold,
        split_type,
        merged_types: merged.into_iter().cloned().collect(),
    })
}

/// Fold membership (matrix row indices) and per-fold, per-config mean F1.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldScores {
    pub folds: Vec<Vec<usize>>,
    /// `means[fold][config]`
    pub means: Vec<Vec<f64>>,
}

/// Seeded uniform partition of `len` items into `k` near-equal folds. A group
/// smaller than `k` becomes a single fold.
pub fn partition<R: Rng>(len: usize, k: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(rng);
    let k = if len < k || k == 0 { 1 } else { k };
    let (base, extra) = (len / k, len % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let size = base + usize::from(f < extra);
        folds.push(idx[start..start + size].to_vec());
        start += size;
    }
    folds
}

/// Mean score of each config over each fold.
pub fn fold_means(matrix: &ScoreMatrix, folds: &[Vec<usize>]) -> Vec<Vec<f64>> {
    folds
        .iter()
        .map(|fold| {
            (0..matrix.cols.len())
                .map(|c| fold.iter().map(|&r| matrix.value(r, c)).sum::<f64>() / fold.len() as f64)
                .collect()
        })
        .collect()
}

pub fn fold_scores<R: Rng>(
    matrix: &ScoreMatrix,
    group: &[String],
    k: usize,
    rng: &mut R,
) -> Result<FoldScores, SearchError> {
    if group.is_empty() {
        return Err(SearchError::EmptyGroup);
    }
    let rows: Vec<usize> = group
        .iter()
        .map(|id| matrix.row_of(id))
        .collect::<Result<_, _>>()?;
    let folds: Vec<Vec<usize>> = partition(rows.len(), k, rng)
        .into_iter()
        .map(|f| f.into_iter().map(|i| rows[i]).collect())
        .collect();
    let means = fold_means(matrix, &folds);
    Ok(FoldScores { folds, means })
}

/// Per-fold deltas to the fold maximum.
pub fn max_subtracted(fold_means: &[Vec<f64>]) -> Vec<Vec<f64>> {
    fold_means
        .iter()
        .map(|fold| {
            let best = fold.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            fold.iter().map(|m| m - best).collect()
        })
        .collect()
}

/// Mean delta per config over all given folds.
pub fn mean_deltas(fold_means: &[Vec<f64>]) -> Vec<f64> {
    let deltas = max_subtracted(fold_means);
    let ncfg = fold_means.first().map_or(0, Vec::len);
    (0..ncfg)
        .map(|c| deltas.iter().map(|d| d[c]).sum::<f64>() / deltas.len() as f64)
        .collect()
}

/// Index of the best score; ties go to the smallest config id.
pub fn argmax(configs: &[String], scores: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..scores.len() {
        if scores[i] > scores[best] || (scores[i] == scores[best] && configs[i] < configs[best]) {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectOptions {
    pub folds: usize,
    pub min_repeats: usize,
    /// Stop once the running winner has held for this many consecutive repeats.
    pub stable_repeats: usize,
    pub max_repeats: usize,
}

impl Default for SelectOptions {
    fn default() -> Self {
        SelectOptions {
            folds: 5,
            min_repeats: 10,
            stable_repeats: 3,
            max_repeats: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatRecord {
    pub seed: u64,
    /// Instance ids per fold.
    pub folds: Vec<Vec<String>>,
    /// Winner after this repeat, from all repeats so far.
    pub running_winner: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub winner: String,
    /// Mean fold-max-subtracted score per config (all <= 0).
    pub scores: BTreeMap<String, f64>,
    pub repeats: Vec<RepeatRecord>,
}

/// Repeated k-fold selection over one group. `seed` drives every repeat's
/// partition; the per-repeat seeds are recorded for replay.
pub fn select_best(
    matrix: &ScoreMatrix,
    group: &[String],
    opts: &SelectOptions,
    seed: u64,
) -> Result<Selection, SearchError> {
    let configs = matrix.configs();
    if configs.is_empty() {
        return Err(SearchError::NoConfigs);
    }
    if group.is_empty() {
        return Err(SearchError::EmptyGroup);
    }
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let mut sums = vec![0.0; configs.len()];
    let mut nfolds = 0usize;
    let mut repeats = Vec::new();
    let mut streak = 0usize;
    let mut last_winner: Option<usize> = None;
    let max_repeats = opts.max_repeats.max(opts.min_repeats).max(1);
    for r in 0..max_repeats {
        let repeat_seed: u64 = master.gen();
        let mut rng = ChaCha8Rng::seed_from_u64(repeat_seed);
        let fs = fold_scores(matrix, group, opts.folds, &mut rng)?;
        for fold in max_subtracted(&fs.means) {
            for (s, d) in sums.iter_mut().zip(fold) {
                *s += d;
            }
            nfolds += 1;
        }
        let scores: Vec<f64> = sums.iter().map(|s| s / nfolds as f64).collect();
        let winner = argmax(configs, &scores);
        streak = if last_winner == Some(winner) { streak + 1 } else { 1 };
        last_winner = Some(winner);
        repeats.push(RepeatRecord {
            seed: repeat_seed,
            folds: fs
                .folds
                .iter()
                .map(|f| f.iter().map(|&row| matrix.rows()[row].clone()).collect())
                .collect(),
            running_winner: configs[winner].clone(),
        });
        if r + 1 >= opts.min_repeats && streak >= opts.stable_repeats {
            break;
        }
    }
    let scores: Vec<f64> = sums.iter().map(|s| s / nfolds as f64).collect();
    let winner = argmax(configs, &scores);
    Ok(Selection {
        winner: configs[winner].clone(),
        scores: configs.iter().cloned().zip(scores).collect(),
        repeats,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchDiagnostics {
    pub seed: u64,
    pub options: SelectOptions,
    pub grouping: GroupingPlan,
    /// Per group: seed used, winner, per-config mean deltas and repeat count.
    pub groups: BTreeMap<String, GroupDiagnostics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupDiagnostics {
    pub seed: u64,
    pub size: usize,
    pub winner: String,
    pub scores: BTreeMap<String, f64>,
    pub repeat_count: usize,
    pub repeat_seeds: Vec<u64>,
}

/// Runs the selection per group and assembles a routing table. The split
/// figure type gets one entry per question type; every other group one
/// config for all seven. When no figure type was merged, the "others" row
/// comes from a selection over the whole pool.
pub fn build_type_table(
    matrix: &ScoreMatrix,
    corpus: &Corpus,
    grouping: &GroupingOptions,
    opts: &SelectOptions,
    seed: u64,
) -> Result<(TypeTablePlan, SearchDiagnostics), SearchError> {
    let plan = build_groups(corpus, grouping)?;
    let mut work: BTreeMap<String, Vec<String>> = plan.groups.clone();
    if !work.contains_key(OTHERS_GROUP) {
        work.insert(
            OTHERS_GROUP.to_string(),
            plan.groups.values().flatten().cloned().collect(),
        );
    }
    // one seed per group, drawn in sorted group order
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let mut table: BTreeMap<String, BTreeMap<QuestionType, String>> = BTreeMap::new();
    let mut diags = BTreeMap::new();
    for (name, ids) in &work {
        let group_seed: u64 = master.gen();
        let sel = select_best(matrix, ids, opts, group_seed)?;
        let prefix = format!("{} / ", plan.split_type);
        match name.strip_prefix(&prefix).and_then(|q| q.parse::<QuestionType>().ok()) {
            Some(qt) => {
                table
                    .entry(plan.split_type.clone())
                    .or_default()
                    .insert(qt, sel.winner.clone());
            }
            None => {
                table.insert(
                    name.clone(),
                    QuestionType::ALL.iter().map(|&q| (q, sel.winner.clone())).collect(),
                );
            }
        }
        diags.insert(
            name.clone(),
            GroupDiagnostics {
                seed: group_seed,
                size: ids.len(),
                winner: sel.winner.clone(),
                scores: sel.scores.clone(),
                repeat_count: sel.repeats.len(),
                repeat_seeds: sel.repeats.iter().map(|r| r.seed).collect(),
            },
        );
    }
    // question types absent from the split type's data fall back to "others"
    if let Some(row) = table.get(&plan.split_type).cloned() {
        let others = table[OTHERS_GROUP].clone();
        let full = QuestionType::ALL
            .iter()
            .map(|q| (*q, row.get(q).unwrap_or(&others[q]).clone()))
            .collect();
        table.insert(plan.split_type.clone(), full);
    }
    Ok((
        TypeTablePlan {
            table,
            default_group: OTHERS_GROUP.to_string(),
        },
        SearchDiagnostics {
            seed,
            options: opts.clone(),
            grouping: plan,
            groups: diags,
        },
    ))
}

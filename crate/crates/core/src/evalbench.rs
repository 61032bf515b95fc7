//! Classification from topic distributions, metrics, and the repeated-run
//! benchmark.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::corpus::{sample_seeds, BowDocument, Corpus, LabeledSeeds};
use crate::error::{Error, Result};
use crate::model::{deterministic_topics, Alignment, Mode, TopicModel};
use crate::pipeline::run_pipeline;
use crate::trainer::{train_stage3, TrainState};

/// Group scores and predicted group of each document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub scores: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

/// First index of the maximum.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Group score of a document: the deterministic topic mass of the group's
/// aligned topic, renormalized over the aligned topics.
pub fn group_scores(model: &TopicModel, alignment: &Alignment, doc: &BowDocument) -> Result<Vec<f64>> {
    let p = model.encode(doc, Mode::Eval)?;
    let t_d = deterministic_topics(p.mu(), p.kappa(), model.config.kappa_cap);
    let q = alignment.group_mass(&t_d);
    let s: f64 = q.iter().sum();
    if s.is_nan() || s <= 0.0 {
        return Err(Error::Numerical(format!(
            "document `{}` has no aligned topic mass",
            doc.doc_id
        )));
    }
    Ok(q.into_iter().map(|x| x / s).collect())
}

pub fn predict(model: &TopicModel, alignment: &Alignment, docs: &[&BowDocument]) -> Result<PredictionSet> {
    if alignment.num_topics() != model.num_topics() {
        return Err(Error::Dimension(
            "alignment and model disagree on the topic count".into(),
        ));
    }
    let mut scores = Vec::with_capacity(docs.len());
    let mut labels = Vec::with_capacity(docs.len());
    for doc in docs {
        let q = group_scores(model, alignment, doc)?;
        labels.push(argmax(&q));
        scores.push(q);
    }
    Ok(PredictionSet { scores, labels })
}

fn check_lengths(preds: &[usize], golds: &[usize]) -> Result<()> {
    if preds.is_empty() {
        return Err(Error::InvalidInput("empty evaluation set".into()));
    }
    if preds.len() != golds.len() {
        return Err(Error::Dimension(format!(
            "{} predictions for {} golds",
            preds.len(),
            golds.len()
        )));
    }
    Ok(())
}

pub fn accuracy(preds: &[usize], golds: &[usize]) -> Result<f64> {
    check_lengths(preds, golds)?;
    let correct = preds.iter().zip(golds).filter(|(p, g)| p == g).count();
    Ok(correct as f64 / preds.len() as f64)
}

/// F1 from true positives, false positives and false negatives pooled over
/// all classes.
pub fn micro_f1(preds: &[usize], golds: &[usize]) -> Result<f64> {
    check_lengths(preds, golds)?;
    let classes = preds.iter().chain(golds).max().map_or(0, |m| m + 1);
    let (mut tp, mut fp, mut fne) = (0usize, 0usize, 0usize);
    for c in 0..classes {
        for (&p, &g) in preds.iter().zip(golds) {
            match (p == c, g == c) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fne += 1,
                _ => {}
            }
        }
    }
    let denom = 2 * tp + fp + fne;
    Ok(if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    })
}

/// Area under the ROC curve of `scores` for separating `positive` from the
/// rest, with tied pairs counted as one half. `None` when either side is
/// empty.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Mann-Whitney with midranks
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            if positive[k] {
                rank_sum += mid;
            }
        }
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

/// One-vs-rest AUC of every class; `None` for classes absent from `golds`
/// (or making up all of it).
pub fn per_class_auc(scores: &[Vec<f64>], golds: &[usize], num_classes: usize) -> Result<Vec<Option<f64>>> {
    if scores.len() != golds.len() {
        return Err(Error::Dimension(format!(
            "{} score rows for {} golds",
            scores.len(),
            golds.len()
        )));
    }
    if let Some(row) = scores.iter().find(|r| r.len() != num_classes) {
        return Err(Error::Dimension(format!(
            "score row of length {} for {num_classes} classes",
            row.len()
        )));
    }
    Ok((0..num_classes)
        .map(|c| {
            let s: Vec<f64> = scores.iter().map(|r| r[c]).collect();
            let pos: Vec<bool> = golds.iter().map(|&g| g == c).collect();
            binary_auc(&s, &pos)
        })
        .collect())
}

/// Macro average of the one-vs-rest AUCs over classes present in `golds`.
pub fn auc_roc(scores: &[Vec<f64>], golds: &[usize], num_classes: usize) -> Result<f64> {
    if golds.is_empty() {
        return Err(Error::InvalidInput("empty evaluation set".into()));
    }
    let per = per_class_auc(scores, golds, num_classes)?;
    let present: Vec<f64> = per.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::InvalidInput(
            "AUC needs at least two classes among the golds".into(),
        ));
    }
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
    /// Absent when the class does not occur among the golds.
    pub auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub micro_f1: f64,
    pub auc: f64,
    pub per_class: BTreeMap<String, ClassMetrics>,
    pub wall_ms_per_stage: BTreeMap<String, f64>,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }

    /// The report with timings removed, the part fixed by the seed.
    pub fn without_timing(&self) -> MetricsReport {
        MetricsReport {
            wall_ms_per_stage: BTreeMap::new(),
            ..self.clone()
        }
    }
}

/// Scores every labeled, non-seed document whose label names a group.
pub fn evaluate(
    model: &TopicModel,
    alignment: &Alignment,
    corpus: &Corpus,
    seeds: &LabeledSeeds,
) -> Result<MetricsReport> {
    let eval = seeds.eval_set(corpus);
    let seed_set = seeds.seed_set();
    debug_assert!(eval.iter().all(|(i, _)| !seed_set.contains(i)));
    evaluate_pairs(model, alignment, corpus, &eval, &seeds.group_names())
}

/// Scores the `(document index, gold group)` pairs; `group_names` lists the
/// groups in alignment order.
pub fn evaluate_pairs(
    model: &TopicModel,
    alignment: &Alignment,
    corpus: &Corpus,
    eval: &[(usize, usize)],
    group_names: &[&str],
) -> Result<MetricsReport> {
    if eval.is_empty() {
        return Err(Error::InvalidInput("no labeled non-seed documents to evaluate".into()));
    }
    let k = group_names.len();
    if k != alignment.num_groups() {
        return Err(Error::Dimension(format!(
            "{k} group names for {} aligned groups",
            alignment.num_groups()
        )));
    }
    if let Some(&(i, g)) = eval.iter().find(|&&(i, g)| i >= corpus.len() || g >= k) {
        return Err(Error::InvalidInput(format!("eval pair ({i}, {g}) out of range")));
    }
    let docs: Vec<&BowDocument> = eval.iter().map(|&(i, _)| &corpus.documents[i]).collect();
    let golds: Vec<usize> = eval.iter().map(|&(_, g)| g).collect();
    let preds = predict(model, alignment, &docs)?;
    let aucs = per_class_auc(&preds.scores, &golds, k)?;
    let mut per_class = BTreeMap::new();
    for (c, name) in group_names.iter().enumerate() {
        let tp = preds
            .labels
            .iter()
            .zip(&golds)
            .filter(|(&p, &g)| p == c && g == c)
            .count();
        let predicted = preds.labels.iter().filter(|&&p| p == c).count();
        let support = golds.iter().filter(|&&g| g == c).count();
        let precision = if predicted == 0 {
            0.0
        } else {
            tp as f64 / predicted as f64
        };
        let recall = if support == 0 { 0.0 } else { tp as f64 / support as f64 };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        per_class.insert(
            name.to_string(),
            ClassMetrics {
                precision,
                recall,
                f1,
                support,
                auc: aucs[c],
            },
        );
    }
    Ok(MetricsReport {
        accuracy: accuracy(&preds.labels, &golds)?,
        micro_f1: micro_f1(&preds.labels, &golds)?,
        auc: auc_roc(&preds.scores, &golds, k)?,
        per_class,
        wall_ms_per_stage: BTreeMap::new(),
    })
}

/// Mean, minimum and maximum of one metric across runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(xs: &[f64]) -> Option<Summary> {
        if xs.is_empty() {
            return None;
        }
        Some(Summary {
            mean: xs.iter().sum::<f64>() / xs.len() as f64,
            min: xs.iter().copied().fold(f64::INFINITY, f64::min),
            max: xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

/// Metrics of one benchmark run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub rng_seed: u64,
    pub accuracy: f64,
    pub micro_f1: f64,
    pub auc: f64,
    pub stage2_accuracy: f64,
    pub stage2_micro_f1: f64,
    pub stage2_auc: f64,
    pub wall_ms_per_stage: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub runs: Vec<RunRecord>,
    /// Seeds of failed runs with their errors.
    pub failures: Vec<(u64, String)>,
    pub partial: bool,
    pub accuracy: Option<Summary>,
    pub micro_f1: Option<Summary>,
    pub auc: Option<Summary>,
    pub stage2_accuracy: Option<Summary>,
    pub stage2_micro_f1: Option<Summary>,
    pub stage2_auc: Option<Summary>,
    pub mean_wall_ms_per_stage: BTreeMap<String, f64>,
}

impl BenchmarkReport {
    fn from_runs(runs: Vec<RunRecord>, failures: Vec<(u64, String)>) -> Self {
        let col = |f: fn(&RunRecord) -> f64| Summary::of(&runs.iter().map(f).collect::<Vec<_>>());
        let mut wall: BTreeMap<String, f64> = BTreeMap::new();
        for r in &runs {
            for (k, v) in &r.wall_ms_per_stage {
                *wall.entry(k.clone()).or_default() += v / runs.len() as f64;
            }
        }
        BenchmarkReport {
            accuracy: col(|r| r.accuracy),
            micro_f1: col(|r| r.micro_f1),
            auc: col(|r| r.auc),
            stage2_accuracy: col(|r| r.stage2_accuracy),
            stage2_micro_f1: col(|r| r.stage2_micro_f1),
            stage2_auc: col(|r| r.stage2_auc),
            partial: !failures.is_empty(),
            mean_wall_ms_per_stage: wall,
            runs,
            failures,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Runs the full pipeline `runs` times with `rng_seed = base + r`,
/// resampling the seed documents each time. Failed runs are recorded and
/// mark the report partial.
pub fn benchmark(corpus: &Corpus, config: &TrainConfig, runs: usize) -> Result<BenchmarkReport> {
    if runs == 0 {
        return Err(Error::Config("runs must be at least 1".into()));
    }
    let mut records = Vec::with_capacity(runs);
    let mut failures = Vec::new();
    for r in 0..runs as u64 {
        let cfg = TrainConfig {
            rng_seed: config.rng_seed + r,
            seeds_path: None,
            ..config.clone()
        };
        let outcome = sample_seeds(corpus, cfg.seed_k, cfg.rng_seed).and_then(|s| run_pipeline(corpus, s, &cfg));
        match outcome {
            Ok(out) => records.push(RunRecord {
                rng_seed: cfg.rng_seed,
                accuracy: out.report.accuracy,
                micro_f1: out.report.micro_f1,
                auc: out.report.auc,
                stage2_accuracy: out.stage2.accuracy,
                stage2_micro_f1: out.stage2.micro_f1,
                stage2_auc: out.stage2.auc,
                wall_ms_per_stage: out.report.wall_ms_per_stage,
            }),
            Err(e) => failures.push((cfg.rng_seed, e.to_string())),
        }
    }
    Ok(BenchmarkReport::from_runs(records, failures))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TauRow {
    pub tau: f64,
    pub accuracy: f64,
    pub micro_f1: f64,
    pub auc: f64,
}

/// Reruns stage 3 from one completed stage-2 state for every `tau`.
pub fn tau_sweep(stage2: &TrainState, corpus: &Corpus, config: &TrainConfig, taus: &[f64]) -> Result<Vec<TauRow>> {
    if stage2.stage != 2 {
        return Err(Error::Contract("the sweep starts from a completed stage 2".into()));
    }
    let seeds = stage2
        .seeds
        .as_ref()
        .ok_or_else(|| Error::Contract("stage-2 state has no seeds".into()))?;
    let mut rows = Vec::with_capacity(taus.len());
    for &tau in taus {
        let cfg = TrainConfig { tau, ..config.clone() };
        cfg.validate()?;
        let mut state = stage2.clone();
        train_stage3(&mut state, corpus, &cfg)?;
        let alignment = state.alignment.as_ref().expect("stage 3 sets the alignment");
        let m = evaluate(&state.model, alignment, corpus, seeds)?;
        rows.push(TauRow {
            tau,
            accuracy: m.accuracy,
            micro_f1: m.micro_f1,
            auc: m.auc,
        });
    }
    Ok(rows)
}

pub fn tau_sweep_csv(rows: &[TauRow]) -> String {
    let mut out = String::from("tau,accuracy,micro_f1,auc\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.tau, r.accuracy, r.micro_f1, r.auc));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_hand_case() {
        // golds A A B B, preds A B B B
        assert_eq!(accuracy(&[0, 1, 1, 1], &[0, 0, 1, 1]).unwrap(), 0.75);
        assert_eq!(micro_f1(&[0, 1, 1, 1], &[0, 0, 1, 1]).unwrap(), 0.75);
        assert!(accuracy(&[], &[]).is_err());
        assert!(accuracy(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn auc_extremes() {
        let golds = [0, 0, 1, 1, 2];
        let perfect: Vec<Vec<f64>> = golds
            .iter()
            .map(|&g| (0..3).map(|c| if c == g { 0.8 } else { 0.1 }).collect())
            .collect();
        assert_eq!(auc_roc(&perfect, &golds, 3).unwrap(), 1.0);
        let inverted: Vec<Vec<f64>> = perfect.iter().map(|r| r.iter().map(|x| 1.0 - x).collect()).collect();
        assert_eq!(auc_roc(&inverted, &golds, 3).unwrap(), 0.0);
        let flat = vec![vec![1.0 / 3.0; 3]; 5];
        assert_eq!(auc_roc(&flat, &golds, 3).unwrap(), 0.5);
    }

    #[test]
    fn absent_class_is_skipped() {
        let golds = [0, 0, 1];
        let scores = vec![vec![0.6, 0.3, 0.1], vec![0.5, 0.3, 0.2], vec![0.2, 0.7, 0.1]];
        let per = per_class_auc(&scores, &golds, 3).unwrap();
        assert_eq!(per[2], None);
        assert_eq!(auc_roc(&scores, &golds, 3).unwrap(), 1.0);
        assert!(auc_roc(&scores[..2], &golds[..2], 3).is_err());
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[0.3, 0.3, 0.2]), 0);
        assert_eq!(argmax(&[0.1, 0.45, 0.45]), 1);
    }

    #[test]
    fn summary_bounds() {
        let s = Summary::of(&[0.5, 0.9, 0.7]).unwrap();
        assert!((s.mean - 0.7).abs() < 1e-12);
        assert_eq!((s.min, s.max), (0.5, 0.9));
        assert!(Summary::of(&[]).is_none());
    }
}

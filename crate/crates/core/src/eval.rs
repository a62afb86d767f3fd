//! Regression/sentiment metrics, modality-drop robustness and critic-based
//! sample ranking.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use crate::data::{Batch, Dataset};
use crate::error::{Error, Result};
use crate::fusion::{FusionModel, FusionTrainState};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub mae: f64,
    /// `None` when either side has zero variance.
    pub pearson_corr: Option<f64>,
    pub acc2: f64,
    pub acc7: f64,
    pub n: usize,
}

/// Sentiment class for the 7-way accuracy: round half away from zero, then
/// clamp to `[−3, 3]`.
pub fn acc7_bin(x: f64) -> i32 {
    x.round().clamp(-3.0, 3.0) as i32
}

/// Positive class for the binary accuracy; zero counts as positive.
pub fn acc2_positive(x: f64) -> bool {
    x >= 0.0
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape("pearson", &[a.len()], &[b.len()]));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Undefined("correlation with a zero-variance input".into()));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

pub fn compute_metrics(pred: &[f64], y: &[f64]) -> Result<MetricsReport> {
    if pred.len() != y.len() || pred.is_empty() {
        return Err(Error::shape("metrics", &[pred.len()], &[y.len()]));
    }
    let n = pred.len();
    let nf = n as f64;
    let mae = pred.iter().zip(y).map(|(p, t)| (p - t).abs()).sum::<f64>() / nf;
    let acc2 = pred
        .iter()
        .zip(y)
        .filter(|(p, t)| acc2_positive(**p) == acc2_positive(**t))
        .count() as f64
        / nf;
    let acc7 = pred.iter().zip(y).filter(|(p, t)| acc7_bin(**p) == acc7_bin(**t)).count() as f64 / nf;
    Ok(MetricsReport {
        mae,
        pearson_corr: pearson(pred, y).ok(),
        acc2,
        acc7,
        n,
    })
}

pub const METRICS_HEADER: &str = "split,mae,pearson_corr,acc2,acc7,n";

/// One row per named split; an undefined correlation is left empty.
pub fn write_metrics<W: Write>(mut w: W, rows: &[(&str, MetricsReport)]) -> Result<()> {
    writeln!(w, "{METRICS_HEADER}")?;
    for (split, m) in rows {
        let corr = m.pearson_corr.map(|c| c.to_string()).unwrap_or_default();
        writeln!(w, "{split},{},{corr},{},{},{}", m.mae, m.acc2, m.acc7, m.n)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Substitution {
    Zeros,
    TrainMean,
}

impl fmt::Display for Substitution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Substitution::Zeros => "zeros",
            Substitution::TrainMean => "train-mean",
        })
    }
}

impl FromStr for Substitution {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "zeros" | "zero" => Ok(Substitution::Zeros),
            "train-mean" | "mean" => Ok(Substitution::TrainMean),
            other => Err(Error::contract(format!(
                "unknown substitution `{other}` (expected zeros or train-mean)"
            ))),
        }
    }
}

/// Which non-text modalities survive at inference. Text is always replaced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropCondition {
    Audio,
    Visual,
    AudioVisual,
    /// Nothing replaced.
    Control,
}

impl DropCondition {
    pub const ALL: [DropCondition; 4] = [
        DropCondition::Audio,
        DropCondition::Visual,
        DropCondition::AudioVisual,
        DropCondition::Control,
    ];

    fn keeps(self) -> (bool, bool, bool) {
        match self {
            DropCondition::Audio => (true, false, false),
            DropCondition::Visual => (false, true, false),
            DropCondition::AudioVisual => (true, true, false),
            DropCondition::Control => (true, true, true),
        }
    }
}

impl fmt::Display for DropCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DropCondition::Audio => "A",
            DropCondition::Visual => "V",
            DropCondition::AudioVisual => "A+V",
            DropCondition::Control => "control",
        })
    }
}

/// Per-modality feature means of a training set.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityMeans {
    pub audio: Vec<f64>,
    pub visual: Vec<f64>,
    /// Averaged over samples and time steps.
    pub language: Vec<f64>,
}

fn column_means(ms: &[&Matrix]) -> Vec<f64> {
    let cols = ms.first().map_or(0, |m| m.cols);
    let rows: usize = ms.iter().map(|m| m.rows).sum();
    let mut out = vec![0.0; cols];
    for m in ms {
        for r in 0..m.rows {
            out.iter_mut().zip(m.row(r)).for_each(|(o, v)| *o += v);
        }
    }
    out.iter_mut().for_each(|o| *o /= rows.max(1) as f64);
    out
}

impl ModalityMeans {
    pub fn of(train: &Dataset) -> Result<Self> {
        let b = train.full_batch()?;
        Ok(Self {
            audio: column_means(&[&b.audio]),
            visual: column_means(&[&b.visual]),
            language: column_means(&b.language.iter().collect::<Vec<_>>()),
        })
    }
}

/// Replaces every modality not kept by `condition`.
pub fn corrupt(batch: &Batch, condition: DropCondition, sub: Substitution, means: Option<&ModalityMeans>) -> Result<Batch> {
    let means = match sub {
        Substitution::Zeros => None,
        Substitution::TrainMean => Some(means.ok_or_else(|| Error::contract("train-mean substitution needs training means"))?),
    };
    let fill = |m: &Matrix, mean: Option<&Vec<f64>>| -> Result<Matrix> {
        let mut out = Matrix::zeros(m.rows, m.cols);
        if let Some(mu) = mean {
            if mu.len() != m.cols {
                return Err(Error::shape("substitution", &[mu.len()], &[m.cols]));
            }
            for r in 0..m.rows {
                out.row_mut(r).copy_from_slice(mu);
            }
        }
        Ok(out)
    };
    let (keep_a, keep_v, keep_l) = condition.keeps();
    let mut out = batch.clone();
    if !keep_a {
        out.audio = fill(&batch.audio, means.map(|m| &m.audio))?;
    }
    if !keep_v {
        out.visual = fill(&batch.visual, means.map(|m| &m.visual))?;
    }
    if !keep_l {
        out.language = batch
            .language
            .iter()
            .map(|l| fill(l, means.map(|m| &m.language)))
            .collect::<Result<_>>()?;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropRow {
    pub condition: DropCondition,
    pub acc2: f64,
    pub acc2_corrupt: f64,
    pub ratio: f64,
}

/// `Acc2` with corrupted inputs over `Acc2` with clean inputs, for each keep
/// condition. The model is only read.
pub fn modality_drop_eval(
    model: &FusionModel,
    test: &Batch,
    sub: Substitution,
    means: Option<&ModalityMeans>,
) -> Result<Vec<DropRow>> {
    if test.is_empty() {
        return Err(Error::contract("modality-drop evaluation needs a non-empty test set"));
    }
    let acc2 = compute_metrics(&model.predict(test)?, &test.y)?.acc2;
    if acc2 == 0.0 {
        return Err(Error::Undefined("clean binary accuracy is 0, so the ratio is undefined".into()));
    }
    DropCondition::ALL
        .iter()
        .map(|&condition| {
            let acc2_corrupt = if condition == DropCondition::Control {
                acc2
            } else {
                let b = corrupt(test, condition, sub, means)?;
                compute_metrics(&model.predict(&b)?, &test.y)?.acc2
            };
            Ok(DropRow {
                condition,
                acc2,
                acc2_corrupt,
                ratio: acc2_corrupt / acc2,
            })
        })
        .collect()
}

pub const DROP_HEADER: &str = "condition,acc2,acc2_corrupt,ratio";

pub fn write_drop_ratios<W: Write>(mut w: W, rows: &[DropRow]) -> Result<()> {
    writeln!(w, "{DROP_HEADER}")?;
    for r in rows {
        writeln!(w, "{},{},{},{}", r.condition, r.acc2, r.acc2_corrupt, r.ratio)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredSample {
    pub index: usize,
    pub score: f64,
    /// 1 for the highest score.
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ranking {
    /// Every sample, highest score first; ties keep sample order.
    pub ranked: Vec<ScoredSample>,
    pub k: usize,
}

impl Ranking {
    /// The `k` most dependent samples.
    pub fn top(&self) -> &[ScoredSample] {
        &self.ranked[..self.k]
    }

    /// The `k` least dependent samples, lowest first.
    pub fn bottom(&self) -> Vec<ScoredSample> {
        self.ranked.iter().rev().take(self.k).copied().collect()
    }
}

/// Ranks `ranked` entries from critic scores.
pub fn rank_scores(scores: &[f64], k: usize) -> Result<Ranking> {
    if k > scores.len() {
        return Err(Error::contract(format!("k = {k} exceeds the {} scored samples", scores.len())));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let ranked = order
        .into_iter()
        .enumerate()
        .map(|(r, index)| ScoredSample {
            index,
            score: scores[index],
            rank: r + 1,
        })
        .collect();
    Ok(Ranking { ranked, k })
}

/// Eval-mode critic scores of aligned samples, ranked.
pub fn interpretability_score(state: &FusionTrainState, samples: &Dataset, k: usize) -> Result<Ranking> {
    if k > samples.len() {
        return Err(Error::contract(format!("k = {k} exceeds the {} samples", samples.len())));
    }
    if samples.is_empty() {
        return rank_scores(&[], 0);
    }
    rank_scores(&state.critic_scores(&samples.full_batch()?)?, k)
}

pub const SCORES_HEADER: &str = "sample_index,score,rank";

/// Rows in sample order.
pub fn write_scores<W: Write>(mut w: W, ranking: &Ranking) -> Result<()> {
    let mut rows = ranking.ranked.clone();
    rows.sort_by_key(|r| r.index);
    writeln!(w, "{SCORES_HEADER}")?;
    for r in rows {
        writeln!(w, "{},{},{}", r.index, r.score, r.rank)?;
    }
    Ok(())
}

/// Two-sided exact sign test on paired differences `a − b`; ties are
/// dropped. Returns `(wins, losses, p)`.
pub fn sign_test(a: &[f64], b: &[f64]) -> Result<(usize, usize, f64)> {
    if a.len() != b.len() {
        return Err(Error::shape("sign test", &[a.len()], &[b.len()]));
    }
    let wins = a.iter().zip(b).filter(|(x, y)| x > y).count();
    let losses = a.iter().zip(b).filter(|(x, y)| x < y).count();
    let n = wins + losses;
    if n == 0 {
        return Ok((0, 0, 1.0));
    }
    // P(X ≤ min) under Binomial(n, ½), doubled
    let lo = wins.min(losses);
    let ln_half_n = n as f64 * 0.5f64.ln();
    let mut ln_choose = 0.0;
    let mut tail = 0.0;
    for i in 0..=lo {
        if i > 0 {
            ln_choose += ((n - i + 1) as f64).ln() - (i as f64).ln();
        }
        tail += (ln_choose + ln_half_n).exp();
    }
    Ok((wins, losses, (2.0 * tail).min(1.0)))
}

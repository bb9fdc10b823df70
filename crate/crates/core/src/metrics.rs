//! Multi-class residue classification metrics.
//!
//! Per-class scores are one-vs-rest. Scores with a zero denominator count as
//! 0 and stay in the macro mean. Ranking metrics skip classes that have no
//! positives or no negatives and list them in the report.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Confusion = Vec<Vec<u64>>;

/// `[t][p]` counts of residues with true class `t` predicted as `p`.
pub fn confusion_matrix(y_true: &[usize], y_pred: &[usize], k: usize) -> Result<Confusion> {
    if y_true.len() != y_pred.len() {
        return Err(Error::Dataset(format!(
            "{} true labels but {} predictions",
            y_true.len(),
            y_pred.len()
        )));
    }
    let mut m = vec![vec![0u64; k]; k];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        if t >= k || p >= k {
            return Err(Error::Dataset(format!("label pair ({t}, {p}) outside {k} classes")));
        }
        m[t][p] += 1;
    }
    Ok(m)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

pub fn one_vs_rest(conf: &Confusion, c: usize) -> Counts {
    let total: u64 = conf.iter().flatten().sum();
    let tp = conf[c][c];
    let fn_ = conf[c].iter().sum::<u64>() - tp;
    let fp = conf.iter().map(|row| row[c]).sum::<u64>() - tp;
    Counts {
        tp,
        fp,
        fn_,
        tn: total - tp - fp - fn_,
    }
}

fn ratio(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        0.0
    } else {
        a / b
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub mcc: f64,
}

pub fn class_scores(c: Counts) -> ClassScores {
    let (tp, fp, fn_, tn) = (c.tp as f64, c.fp as f64, c.fn_ as f64, c.tn as f64);
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = ratio(2.0 * precision * recall, precision + recall);
    let denom = ((tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_)).sqrt();
    let mcc = ratio(tp * tn - fp * fn_, denom);
    ClassScores {
        precision,
        recall,
        f1,
        mcc,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MacroScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub mcc: f64,
}

pub fn macro_scores(conf: &Confusion) -> MacroScores {
    let k = conf.len() as f64;
    let per: Vec<ClassScores> = (0..conf.len()).map(|c| class_scores(one_vs_rest(conf, c))).collect();
    let mean = |f: fn(&ClassScores) -> f64| per.iter().map(f).sum::<f64>() / k;
    MacroScores {
        precision: mean(|s| s.precision),
        recall: mean(|s| s.recall),
        f1: mean(|s| s.f1),
        mcc: mean(|s| s.mcc),
    }
}

/// Descending-score blocks of `(positives, negatives)`, equal scores merged.
fn tie_blocks(positive: &[bool], scores: &[f64]) -> Vec<(u64, u64)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut blocks: Vec<(u64, u64)> = Vec::new();
    let mut last: Option<f64> = None;
    for i in order {
        if last != Some(scores[i]) {
            blocks.push((0, 0));
            last = Some(scores[i]);
        }
        let b = blocks.last_mut().expect("pushed above");
        if positive[i] {
            b.0 += 1;
        } else {
            b.1 += 1;
        }
    }
    blocks
}

/// Area under the ROC curve, trapezoids over tie blocks. `None` when either
/// class is absent.
pub fn auroc(positive: &[bool], scores: &[f64]) -> Option<f64> {
    let p = positive.iter().filter(|&&b| b).count() as f64;
    let n = positive.len() as f64 - p;
    if p == 0.0 || n == 0.0 {
        return None;
    }
    let (mut tp, mut fp, mut area) = (0.0, 0.0, 0.0);
    for (bp, bn) in tie_blocks(positive, scores) {
        let (tp2, fp2) = (tp + bp as f64, fp + bn as f64);
        area += (fp2 - fp) * (tp + tp2) / 2.0;
        tp = tp2;
        fp = fp2;
    }
    Some(area / (p * n))
}

/// Step-wise area under precision–recall: Σ (ΔRecall × Precision) over
/// thresholds at each distinct score.
pub fn auprc(positive: &[bool], scores: &[f64]) -> Option<f64> {
    let p = positive.iter().filter(|&&b| b).count() as f64;
    let n = positive.len() as f64 - p;
    if p == 0.0 || n == 0.0 {
        return None;
    }
    let (mut tp, mut fp, mut area) = (0.0, 0.0, 0.0);
    for (bp, bn) in tie_blocks(positive, scores) {
        tp += bp as f64;
        fp += bn as f64;
        if bp > 0 {
            area += (bp as f64 / p) * (tp / (tp + fp));
        }
    }
    Some(area)
}

/// Macro mean of a ranking metric over classes; returns the mean (None if
/// every class was skipped) and the skipped class ids.
fn ranking_macro(
    y_true: &[usize],
    scores: &[f64],
    k: usize,
    f: fn(&[bool], &[f64]) -> Option<f64>,
) -> (Vec<Option<f64>>, Option<f64>, Vec<usize>) {
    let mut per = Vec::with_capacity(k);
    let mut skipped = Vec::new();
    for c in 0..k {
        let pos: Vec<bool> = y_true.iter().map(|&t| t == c).collect();
        let col: Vec<f64> = (0..y_true.len()).map(|i| scores[i * k + c]).collect();
        let v = f(&pos, &col);
        if v.is_none() {
            skipped.push(c);
        }
        per.push(v);
    }
    let vals: Vec<f64> = per.iter().flatten().copied().collect();
    let mean = (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64);
    (per, mean, skipped)
}

/// `scores` is row-major `n × k`.
pub fn auroc_macro(y_true: &[usize], scores: &[f64], k: usize) -> (Option<f64>, Vec<usize>) {
    let (_, m, s) = ranking_macro(y_true, scores, k, auroc);
    (m, s)
}

pub fn auprc_macro(y_true: &[usize], scores: &[f64], k: usize) -> (Option<f64>, Vec<usize>) {
    let (_, m, s) = ranking_macro(y_true, scores, k, auprc);
    (m, s)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: usize,
    pub name: String,
    pub support: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub mcc: f64,
    pub auroc: Option<f64>,
    pub auprc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub num_classes: usize,
    pub confusion: Confusion,
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub macro_mcc: f64,
    pub macro_auroc: Option<f64>,
    pub macro_auprc: Option<f64>,
    /// Classes left out of the ranking-metric means.
    pub ranking_skipped: Vec<usize>,
    pub per_class: Vec<ClassReport>,
}

/// Full report; `scores` is row-major `n × k` class probabilities.
pub fn evaluate(y_true: &[usize], y_pred: &[usize], scores: &[f64], k: usize) -> Result<EvalReport> {
    evaluate_named(y_true, y_pred, scores, k, &[])
}

pub fn evaluate_named(
    y_true: &[usize],
    y_pred: &[usize],
    scores: &[f64],
    k: usize,
    names: &[String],
) -> Result<EvalReport> {
    if y_true.is_empty() {
        return Err(Error::Dataset("evaluate: no residues".into()));
    }
    if scores.len() != y_true.len() * k {
        return Err(Error::Dataset(format!(
            "evaluate: {} scores for {} residues × {k} classes",
            scores.len(),
            y_true.len()
        )));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::Dataset("evaluate: non-finite score".into()));
    }
    let conf = confusion_matrix(y_true, y_pred, k)?;
    let m = macro_scores(&conf);
    let (roc, roc_macro, skipped) = ranking_macro(y_true, scores, k, auroc);
    let (pr, pr_macro, _) = ranking_macro(y_true, scores, k, auprc);
    let trace: u64 = (0..k).map(|c| conf[c][c]).sum();
    let per_class = (0..k)
        .map(|c| {
            let s = class_scores(one_vs_rest(&conf, c));
            ClassReport {
                class: c,
                name: names.get(c).cloned().unwrap_or_else(|| format!("class {c}")),
                support: conf[c].iter().sum(),
                precision: s.precision,
                recall: s.recall,
                f1: s.f1,
                mcc: s.mcc,
                auroc: roc[c],
                auprc: pr[c],
            }
        })
        .collect();
    Ok(EvalReport {
        n: y_true.len(),
        num_classes: k,
        accuracy: trace as f64 / y_true.len() as f64,
        confusion: conf,
        macro_precision: m.precision,
        macro_recall: m.recall,
        macro_f1: m.f1,
        macro_mcc: m.mcc,
        macro_auroc: roc_macro,
        macro_auprc: pr_macro,
        ranking_skipped: skipped,
        per_class,
    })
}

impl EvalReport {
    pub fn to_table(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
        let width = self.per_class.iter().map(|c| c.name.len()).max().unwrap_or(5).max(5);
        let mut out = format!(
            "{:<width$}  {:>8}  {:>9}  {:>7}  {:>7}  {:>7}  {:>7}  {:>7}\n",
            "class", "support", "precision", "recall", "f1", "mcc", "auroc", "auprc"
        );
        for c in &self.per_class {
            out.push_str(&format!(
                "{:<width$}  {:>8}  {:>9.4}  {:>7.4}  {:>7.4}  {:>7.4}  {:>7}  {:>7}\n",
                c.name,
                c.support,
                c.precision,
                c.recall,
                c.f1,
                c.mcc,
                opt(c.auroc),
                opt(c.auprc)
            ));
        }
        out.push_str(&format!(
            "{:<width$}  {:>8}  {:>9.4}  {:>7.4}  {:>7.4}  {:>7.4}  {:>7}  {:>7}\n",
            "macro",
            self.n,
            self.macro_precision,
            self.macro_recall,
            self.macro_f1,
            self.macro_mcc,
            opt(self.macro_auroc),
            opt(self.macro_auprc)
        ));
        out.push_str(&format!("accuracy {:.4}\n", self.accuracy));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confusion_fixtures() {
        let m = confusion_matrix(&[1], &[0], 2).unwrap();
        assert_eq!(m, vec![vec![0, 0], vec![1, 0]]);
        let d = confusion_matrix(&[0, 1, 2, 2], &[0, 1, 2, 2], 3).unwrap();
        assert_eq!(d, vec![vec![1, 0, 0], vec![0, 1, 0], vec![0, 0, 2]]);
        assert!(matches!(confusion_matrix(&[3], &[0], 3), Err(Error::Dataset(_))));
    }

    #[test]
    fn perfect_binary() {
        let m = macro_scores(&confusion_matrix(&[0, 1, 0, 1], &[0, 1, 0, 1], 2).unwrap());
        assert_eq!((m.precision, m.recall, m.f1, m.mcc), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn all_one_class_prediction() {
        let y: Vec<usize> = (0..26).collect();
        let m = macro_scores(&confusion_matrix(&y, &[1; 26], 26).unwrap());
        assert!((m.recall - 1.0 / 26.0).abs() < 1e-15);
    }

    #[test]
    fn ranking_fixtures() {
        let pos = [true, true, false, false];
        assert_eq!(auroc(&pos, &[0.9, 0.8, 0.2, 0.1]), Some(1.0));
        assert_eq!(auprc(&pos, &[0.9, 0.8, 0.2, 0.1]), Some(1.0));
        assert_eq!(auroc(&pos, &[0.5; 4]), Some(0.5));
        assert_eq!(auprc(&pos, &[0.5; 4]), Some(0.5));
        assert_eq!(auroc(&[true, true], &[0.1, 0.2]), None);
    }

    #[test]
    fn empty_input() {
        assert!(matches!(evaluate(&[], &[], &[], 2), Err(Error::Dataset(_))));
    }

    #[test]
    fn report_skips_absent_class() {
        let r = evaluate(
            &[0, 1, 0],
            &[0, 1, 1],
            &[0.9, 0.1, 0.0, 0.2, 0.7, 0.1, 0.4, 0.5, 0.1],
            3,
        )
        .unwrap();
        assert_eq!(r.ranking_skipped, vec![2]);
        assert!((r.accuracy - 2.0 / 3.0).abs() < 1e-15);
        assert!(r.to_table().lines().count() == 6);
        let json = serde_json::to_string(&r).unwrap();
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.confusion, r.confusion);
    }
}

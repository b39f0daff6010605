//! Span-level slot F1, intent accuracy and sentence-level overall accuracy.

use serde::{Deserialize, Serialize};

use super::Utterance;
use crate::error::{Error, Result};

/// Half-open token range `[start, end)` labelled with a slot type.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub kind: String,
}

/// Chunks BIO labels. An `I-X` continues only a running `X` span; otherwise it opens one.
pub fn extract_spans<S: AsRef<str>>(labels: &[S]) -> Vec<Span> {
    let mut spans = Vec::new();
    let mut open: Option<(usize, &str)> = None;
    for (i, label) in labels.iter().enumerate() {
        let label = label.as_ref();
        let (continues, kind) = match label.split_once('-') {
            Some(("I", k)) => (open.is_some_and(|(_, o)| o == k), Some(k)),
            Some(("B", k)) => (false, Some(k)),
            _ => (false, None),
        };
        if continues {
            continue;
        }
        if let Some((start, k)) = open.take() {
            spans.push(Span { start, end: i, kind: k.to_string() });
        }
        open = kind.map(|k| (i, k));
    }
    if let Some((start, k)) = open {
        spans.push(Span { start, end: labels.len(), kind: k.to_string() });
    }
    spans
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub utterances: usize,
    pub slot_f1: f64,
    pub slot_precision: f64,
    pub slot_recall: f64,
    pub intent_acc: f64,
    /// Fraction of utterances whose whole slot sequence is correct.
    pub slot_exact: f64,
    pub overall_acc: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

fn check_aligned(gold: &[Utterance], pred: &[Utterance]) -> Result<()> {
    if gold.len() != pred.len() {
        return Err(Error::Invalid(format!("{} gold utterances but {} predictions", gold.len(), pred.len())));
    }
    for (i, (g, p)) in gold.iter().zip(pred).enumerate() {
        if g.slots.len() != p.slots.len() {
            return Err(Error::Invalid(format!(
                "utterance {i}: {} gold slots but {} predicted",
                g.slots.len(),
                p.slots.len()
            )));
        }
    }
    Ok(())
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn evaluate(gold: &[Utterance], pred: &[Utterance]) -> Result<EvalReport> {
    check_aligned(gold, pred)?;
    let (mut tp, mut fp, mut fneg) = (0, 0, 0);
    let (mut intents, mut exact, mut overall) = (0, 0, 0);
    for (g, p) in gold.iter().zip(pred) {
        let gs = extract_spans(&g.slots);
        let ps = extract_spans(&p.slots);
        let hits = ps.iter().filter(|s| gs.contains(s)).count();
        tp += hits;
        fp += ps.len() - hits;
        fneg += gs.len() - hits;
        let intent_ok = g.intent == p.intent;
        let slots_ok = g.slots == p.slots;
        intents += intent_ok as usize;
        exact += slots_ok as usize;
        overall += (intent_ok && slots_ok) as usize;
    }
    let n = gold.len();
    Ok(EvalReport {
        utterances: n,
        slot_f1: ratio(2 * tp, 2 * tp + fp + fneg),
        slot_precision: ratio(tp, tp + fp),
        slot_recall: ratio(tp, tp + fneg),
        intent_acc: ratio(intents, n),
        slot_exact: ratio(exact, n),
        overall_acc: ratio(overall, n),
        true_positives: tp,
        false_positives: fp,
        false_negatives: fneg,
    })
}

pub fn slot_f1(gold: &[Utterance], pred: &[Utterance]) -> Result<f64> {
    Ok(evaluate(gold, pred)?.slot_f1)
}

pub fn intent_acc(gold: &[Utterance], pred: &[Utterance]) -> Result<f64> {
    Ok(evaluate(gold, pred)?.intent_acc)
}

pub fn overall_acc(gold: &[Utterance], pred: &[Utterance]) -> Result<f64> {
    Ok(evaluate(gold, pred)?.overall_acc)
}

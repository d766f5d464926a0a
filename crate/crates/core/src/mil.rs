//! Multiple-instance data model: bags (whole images), instances (patches
//! cut from them, inheriting the bag label), the rank-weighted bag
//! aggregation of instance probabilities, and classification metrics.

use crate::error::{Error, Result};
use crate::patch::Instance;
use crate::tensor::Tensor;

/// A whole labeled image.
#[derive(Clone, Debug)]
pub struct Bag {
    pub image: Tensor,
    pub label: u8,
    pub id: String,
}

impl Bag {
    pub fn new(id: impl Into<String>, image: Tensor, label: u8) -> Result<Self> {
        if label > 1 {
            return Err(Error::validation(format!("bag label must be 0 or 1, got {label}")));
        }
        if !image.is_finite() {
            return Err(Error::numeric("bag image contains non-finite values"));
        }
        Ok(Bag {
            image,
            label,
            id: id.into(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

/// An ordered collection of bags with unique ids.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub bags: Vec<Bag>,
    pub split: Split,
}

impl Dataset {
    pub fn new(bags: Vec<Bag>, split: Split) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for bag in &bags {
            if !seen.insert(bag.id.as_str()) {
                return Err(Error::validation(format!("duplicate bag id {}", bag.id)));
            }
        }
        Ok(Dataset { bags, split })
    }

    pub fn len(&self) -> usize {
        self.bags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bags.is_empty()
    }

    pub fn has_both_classes(&self) -> bool {
        self.bags.iter().any(|b| b.label == 0) && self.bags.iter().any(|b| b.label == 1)
    }
}

/// Stamps the bag's label onto its instances. Instances from any other bag
/// are rejected.
pub fn inherit_labels(bag: &Bag, instances: &mut [Instance]) -> Result<()> {
    for inst in instances.iter() {
        if inst.bag_id != bag.id {
            return Err(Error::validation(format!(
                "instance from bag {} passed to bag {}",
                inst.bag_id, bag.id
            )));
        }
    }
    for inst in instances {
        inst.label = bag.label;
    }
    Ok(())
}

/// Rank-weighted average of instance probabilities: the j-th ranked patch
/// (j = 1..m, descending saliency) gets weight m - j + 1.
pub fn weighted_evaluation(probabilities: &[f64]) -> Result<f64> {
    if probabilities.is_empty() {
        return Err(Error::validation("weighted evaluation needs at least one probability"));
    }
    let m = probabilities.len();
    let mut num = 0.0;
    let mut den = 0.0;
    for (j, &p) in probabilities.iter().enumerate() {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::validation(format!(
                "instance probability {p} outside [0, 1]"
            )));
        }
        let weight = (m - j) as f64;
        num += weight * p;
        den += weight;
    }
    Ok(num / den)
}

/// Accuracy and positive-class F1 at the given decision threshold.
/// Predicted label is 1 iff P >= threshold. F1 is 0 when precision + recall
/// is 0.
pub fn compute_metrics(predictions: &[(f64, u8)], threshold: f64) -> Result<(f64, f64)> {
    if predictions.is_empty() {
        return Err(Error::validation("compute_metrics on an empty prediction list"));
    }
    if !(0.0 < threshold && threshold < 1.0) {
        return Err(Error::validation(format!(
            "decision threshold must be in (0, 1), got {threshold}"
        )));
    }
    let mut correct = 0usize;
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for &(p, label) in predictions {
        let pred = u8::from(p >= threshold);
        if pred == label {
            correct += 1;
        }
        match (pred, label) {
            (1, 1) => tp += 1,
            (1, 0) => fp += 1,
            (0, 1) => fn_ += 1,
            _ => {}
        }
    }
    let accuracy = correct as f64 / predictions.len() as f64;
    let f1 = if 2 * tp + fp + fn_ == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    };
    Ok((accuracy, f1))
}

/// One scored bag in a report.
#[derive(Clone, Debug)]
pub struct PredictionRow {
    pub bag_id: String,
    pub probability: f64,
    pub predicted: u8,
    pub label: u8,
}

/// Per-bag predictions plus aggregate metrics.
#[derive(Clone, Debug)]
pub struct PredictionReport {
    pub rows: Vec<PredictionRow>,
    pub accuracy: f64,
    pub f1: f64,
}

impl PredictionReport {
    /// `scored` holds (bag id, probability, true label) triples.
    pub fn from_scored(scored: Vec<(String, f64, u8)>, threshold: f64) -> Result<Self> {
        let pairs: Vec<(f64, u8)> = scored.iter().map(|(_, p, l)| (*p, *l)).collect();
        let (accuracy, f1) = compute_metrics(&pairs, threshold)?;
        let rows = scored
            .into_iter()
            .map(|(bag_id, probability, label)| PredictionRow {
                bag_id,
                predicted: u8::from(probability >= threshold),
                probability,
                label,
            })
            .collect();
        Ok(PredictionReport { rows, accuracy, f1 })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bag_id,P,pred,label\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                row.bag_id, row.probability, row.predicted, row.label
            ));
        }
        out
    }

    pub fn summary(&self) -> String {
        format!("accuracy={},f1={}", self.accuracy, self.f1)
    }
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::LabelMap;

/// Pixel counts indexed `[ground truth][prediction]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            counts: vec![vec![0; classes]; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }
}

/// Tallies every pixel whose ground truth and prediction are both labelled.
pub fn confusion(pred: &LabelMap, gt: &LabelMap) -> Result<ConfusionMatrix> {
    if pred.len() != gt.len() {
        return Err(Error::Contract(format!(
            "{} predictions vs {} ground-truth pixels",
            pred.len(),
            gt.len()
        )));
    }
    let mut cm = ConfusionMatrix::new(gt.classes().max(pred.classes()));
    for (p, g) in pred.iter().zip(gt.iter()) {
        if let (Some(p), Some(g)) = (p, g) {
            cm.counts[g][p] += 1;
        }
    }
    Ok(cm)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IouReport {
    pub miou: f64,
    /// `None` for classes absent from both prediction and ground truth.
    pub per_class: Vec<Option<f64>>,
}

/// Mean IoU over classes with a non-empty union.
pub fn miou(cm: &ConfusionMatrix) -> Result<IouReport> {
    let c = cm.classes();
    let per_class: Vec<Option<f64>> = (0..c)
        .map(|k| {
            let tp = cm.counts[k][k];
            let fn_: u64 = cm.counts[k].iter().sum::<u64>() - tp;
            let fp: u64 = (0..c).map(|g| cm.counts[g][k]).sum::<u64>() - tp;
            let union = tp + fp + fn_;
            (union > 0).then(|| tp as f64 / union as f64)
        })
        .collect();
    let scored: Vec<f64> = per_class.iter().flatten().copied().collect();
    if scored.is_empty() {
        return Err(Error::UndefinedMetric("no class has any pixel".into()));
    }
    Ok(IouReport {
        miou: scored.iter().sum::<f64>() / scored.len() as f64,
        per_class,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelAccuracy {
    pub accuracy: f64,
    /// Fraction of the listed flipped pixels whose label now matches ground truth.
    pub corrected_flips: Option<f64>,
}

pub fn pseudo_label_accuracy(
    pseudo: &LabelMap,
    gt: &LabelMap,
    flips: Option<&[usize]>,
) -> Result<PseudoLabelAccuracy> {
    if pseudo.len() != gt.len() {
        return Err(Error::Contract(format!(
            "{} pseudo-labels vs {} ground-truth pixels",
            pseudo.len(),
            gt.len()
        )));
    }
    let accuracy = if pseudo.is_empty() {
        0.0
    } else {
        pseudo.raw().iter().zip(gt.raw()).filter(|(a, b)| a == b).count() as f64
            / pseudo.len() as f64
    };
    let corrected_flips = flips.map(|f| {
        if f.is_empty() {
            1.0
        } else {
            f.iter().filter(|&&i| pseudo.raw()[i] == gt.raw()[i]).count() as f64 / f.len() as f64
        }
    });
    Ok(PseudoLabelAccuracy {
        accuracy,
        corrected_flips,
    })
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binary confusion counts, rows by label, columns by prediction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    /// `counts[label][prediction]`.
    pub counts: [[u64; 2]; 2],
}

impl Confusion {
    pub fn add(&mut self, label: u8, prediction: u8) {
        self.counts[usize::from(label != 0)][usize::from(prediction != 0)] += 1;
    }

    pub fn merge(&mut self, other: &Confusion) {
        for l in 0..2 {
            for p in 0..2 {
                self.counts[l][p] += other.counts[l][p];
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// F1 of one class; 0 when precision and recall are both 0 or undefined.
    pub fn class_f1(&self, class: usize) -> f64 {
        let hit = self.counts[class][class] as f64;
        let predicted = (self.counts[0][class] + self.counts[1][class]) as f64;
        let actual = (self.counts[class][0] + self.counts[class][1]) as f64;
        let p = if predicted > 0.0 { hit / predicted } else { 0.0 };
        let r = if actual > 0.0 { hit / actual } else { 0.0 };
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    pub fn macro_f1(&self) -> f64 {
        (self.class_f1(0) + self.class_f1(1)) / 2.0
    }
}

/// Per-trait confusion counts from parallel label and prediction rows.
pub fn confusions(labels: &[Vec<u8>], predictions: &[Vec<u8>], traits: usize) -> Result<Vec<Confusion>> {
    if labels.is_empty() {
        return Err(Error::Config("cannot score an empty dataset".into()));
    }
    if labels.len() != predictions.len() {
        return Err(Error::Shape {
            op: "confusions",
            left: vec![labels.len()],
            right: vec![predictions.len()],
        });
    }
    let mut out = vec![Confusion::default(); traits];
    for (l, p) in labels.iter().zip(predictions) {
        if l.len() != traits || p.len() != traits {
            return Err(Error::Shape {
                op: "confusions",
                left: vec![traits],
                right: vec![l.len(), p.len()],
            });
        }
        for t in 0..traits {
            out[t].add(l[t], p[t]);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_trait: Vec<f64>,
    pub average: f64,
    pub seed: u64,
    pub epoch: usize,
    #[serde(skip)]
    pub confusion: Vec<Confusion>,
}

impl MetricsReport {
    pub fn from_confusion(confusion: Vec<Confusion>, seed: u64, epoch: usize) -> Self {
        let per_trait: Vec<f64> = confusion.iter().map(Confusion::macro_f1).collect();
        let average = per_trait.iter().sum::<f64>() / per_trait.len() as f64;
        MetricsReport {
            per_trait,
            average,
            seed,
            epoch,
            confusion,
        }
    }

    pub fn score(labels: &[Vec<u8>], predictions: &[Vec<u8>], traits: usize, seed: u64, epoch: usize) -> Result<Self> {
        Ok(Self::from_confusion(
            confusions(labels, predictions, traits)?,
            seed,
            epoch,
        ))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plain numbers serialize")
    }
}

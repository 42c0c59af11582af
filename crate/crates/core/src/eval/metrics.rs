use crate::error::{Error, Result};

/// `counts[t * C + p]` pixels of true class `t` predicted as `p`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self { classes, counts: vec![0; classes * classes] }
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one count per pixel pair.
    pub fn accumulate(&mut self, pred: &[u8], truth: &[u8]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::Shape(format!("prediction has {} pixels, truth {}", pred.len(), truth.len())));
        }
        let c = self.classes;
        if let Some(bad) = pred.iter().chain(truth).find(|&&v| v as usize >= c) {
            return Err(Error::Data(format!("class {bad} outside [0, {c})")));
        }
        for (&p, &t) in pred.iter().zip(truth) {
            self.counts[t as usize * c + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::Shape("confusion matrices differ in class count".into()));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    /// `(TP, TP + FP + FN)` for one class.
    pub fn iou_ratio(&self, class: usize) -> (u64, u64) {
        let tp = self.get(class, class);
        let row: u64 = (0..self.classes).map(|p| self.get(class, p)).sum();
        let col: u64 = (0..self.classes).map(|t| self.get(t, class)).sum();
        (tp, row + col - tp)
    }
}

/// Per-class IoU (`None` where the class is absent from truth and prediction)
/// and their unweighted mean over the present classes.
#[derive(Clone, Debug, PartialEq)]
pub struct IouReport {
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
}

pub fn miou(cm: &ConfusionMatrix) -> Result<IouReport> {
    let per_class: Vec<Option<f64>> = (0..cm.classes)
        .map(|c| {
            let (num, den) = cm.iou_ratio(c);
            (den > 0).then(|| num as f64 / den as f64)
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::UndefinedMetric("no class occurs in truth or prediction".into()));
    }
    let miou = present.iter().sum::<f64>() / present.len() as f64;
    Ok(IouReport { per_class, miou })
}

use super::HarnessError;
use crate::classifier::NUM_CLASSES;

/// Classification metrics over the five grades.
#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    pub per_class_recall: [f64; NUM_CLASSES],
    pub macro_f1: f64,
    /// `confusion[true][predicted]`
    pub confusion: [[usize; NUM_CLASSES]; NUM_CLASSES],
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl Metrics {
    /// Derives every metric from `confusion[true][predicted]`.
    pub fn from_confusion(matrix: [[usize; NUM_CLASSES]; NUM_CLASSES]) -> Self {
        let total: usize = matrix.iter().flatten().sum();
        let correct: usize = (0..NUM_CLASSES).map(|c| matrix[c][c]).sum();
        let mut metrics = Metrics {
            accuracy: ratio(correct, total),
            per_class_recall: [0.0; NUM_CLASSES],
            macro_f1: 0.0,
            confusion: matrix,
        };
        metrics.per_class_recall = std::array::from_fn(|c| ratio(matrix[c][c], metrics.support(c)));
        metrics.macro_f1 = (0..NUM_CLASSES).map(|c| metrics.f1(c)).sum::<f64>() / NUM_CLASSES as f64;
        metrics
    }

    pub fn total(&self) -> usize {
        self.confusion.iter().flatten().sum()
    }

    /// Number of samples whose true grade is `class`.
    pub fn support(&self, class: usize) -> usize {
        self.confusion[class].iter().sum()
    }

    pub fn precision(&self, class: usize) -> f64 {
        ratio(self.confusion[class][class], (0..NUM_CLASSES).map(|t| self.confusion[t][class]).sum())
    }

    pub fn f1(&self, class: usize) -> f64 {
        let tp = self.confusion[class][class];
        let predicted: usize = (0..NUM_CLASSES).map(|t| self.confusion[t][class]).sum();
        ratio(2 * tp, predicted + self.support(class))
    }
}

/// Builds the confusion matrix and derived metrics. Any 0/0 ratio counts
/// as 0.
pub fn confusion(preds: &[usize], labels: &[usize]) -> Result<Metrics, HarnessError> {
    if preds.len() != labels.len() {
        return Err(HarnessError::Contract(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let mut matrix = [[0usize; NUM_CLASSES]; NUM_CLASSES];
    for (&p, &l) in preds.iter().zip(labels) {
        if p >= NUM_CLASSES || l >= NUM_CLASSES {
            return Err(HarnessError::Contract(format!("grade pair ({l}, {p}) outside 0..{NUM_CLASSES}")));
        }
        matrix[l][p] += 1;
    }
    Ok(Metrics::from_confusion(matrix))
}

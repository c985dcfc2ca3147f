use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Fraction of samples (classification) or points (segmentation)
    /// predicted correctly.
    pub overall_accuracy: f64,
    /// Recall per class or part; `None` when the class never occurs.
    pub per_class_accuracy: Vec<Option<f64>>,
    pub class_miou: Option<f64>,
    pub instance_miou: Option<f64>,
    /// `confusion[truth][prediction]`.
    pub confusion: Vec<Vec<usize>>,
}

impl EvalReport {
    pub fn from_predictions(preds: &[usize], labels: &[usize], n_classes: usize) -> Result<Self> {
        if preds.len() != labels.len() {
            return Err(Error::Shape {
                op: "eval_report",
                lhs: vec![preds.len()],
                rhs: vec![labels.len()],
            });
        }
        let mut confusion = vec![vec![0usize; n_classes]; n_classes];
        for (&p, &l) in preds.iter().zip(labels) {
            if p >= n_classes || l >= n_classes {
                return Err(Error::InvalidInput(format!(
                    "label {} or prediction {} outside {n_classes} classes",
                    l, p
                )));
            }
            confusion[l][p] += 1;
        }
        let correct: usize = (0..n_classes).map(|c| confusion[c][c]).sum();
        let per_class_accuracy = confusion
            .iter()
            .enumerate()
            .map(|(c, row)| {
                let total: usize = row.iter().sum();
                (total > 0).then(|| row[c] as f64 / total as f64)
            })
            .collect();
        Ok(Self {
            overall_accuracy: if labels.is_empty() { 0.0 } else { correct as f64 / labels.len() as f64 },
            per_class_accuracy,
            class_miou: None,
            instance_miou: None,
            confusion,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Index of the largest entry; the first one on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Mean IoU of one shape over `parts`; a part absent from both prediction
/// and label scores 1.
pub fn shape_miou(preds: &[usize], labels: &[usize], parts: &[usize]) -> f64 {
    if parts.is_empty() {
        return 1.0;
    }
    let total: f64 = parts
        .iter()
        .map(|&part| {
            let (mut inter, mut union) = (0usize, 0usize);
            for (&p, &l) in preds.iter().zip(labels) {
                let (a, b) = (p == part, l == part);
                inter += usize::from(a && b);
                union += usize::from(a || b);
            }
            if union == 0 {
                1.0
            } else {
                inter as f64 / union as f64
            }
        })
        .sum();
    total / parts.len() as f64
}

/// `(instance_miou, class_miou)` over shapes with per-point predictions and
/// labels; `categories[s]` picks the part set of shape `s`. Class mIoU
/// averages over categories that occur.
pub fn miou(
    preds: &[Vec<usize>],
    labels: &[Vec<usize>],
    categories: &[usize],
    part_sets: &[Vec<usize>],
) -> Result<(f64, f64)> {
    if preds.len() != labels.len() || preds.len() != categories.len() {
        return Err(Error::Shape {
            op: "miou",
            lhs: vec![preds.len(), labels.len()],
            rhs: vec![categories.len()],
        });
    }
    if preds.is_empty() {
        return Err(Error::InvalidInput("miou needs at least one shape".into()));
    }
    let mut per_cat: Vec<Vec<f64>> = vec![Vec::new(); part_sets.len()];
    let mut sum = 0.0;
    for ((p, l), &cat) in preds.iter().zip(labels).zip(categories) {
        if p.len() != l.len() {
            return Err(Error::Shape {
                op: "miou",
                lhs: vec![p.len()],
                rhs: vec![l.len()],
            });
        }
        let parts = part_sets
            .get(cat)
            .ok_or_else(|| Error::InvalidInput(format!("category {cat} has no part set")))?;
        let m = shape_miou(p, l, parts);
        per_cat[cat].push(m);
        sum += m;
    }
    let instance = sum / preds.len() as f64;
    let cats: Vec<f64> = per_cat
        .iter()
        .filter(|v| !v.is_empty())
        .map(|v| v.iter().sum::<f64>() / v.len() as f64)
        .collect();
    let class = cats.iter().sum::<f64>() / cats.len() as f64;
    Ok((instance, class))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn accuracy_two_thirds() {
        let r = EvalReport::from_predictions(&[1, 1, 0], &[1, 0, 0], 2).unwrap();
        assert!((r.overall_accuracy - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.confusion, vec![vec![1, 1], vec![0, 1]]);
        assert_eq!(r.per_class_accuracy, vec![Some(0.5), Some(1.0)]);
        let r = EvalReport::from_predictions(&[0], &[0], 3).unwrap();
        assert_eq!(r.per_class_accuracy[2], None);
        assert!(EvalReport::from_predictions(&[0, 1], &[0], 2).is_err());
        assert!(EvalReport::from_predictions(&[5], &[0], 2).is_err());
    }

    #[test]
    fn perfect_prediction_scores_one() {
        let l = vec![vec![0, 1, 1, 0], vec![1, 1, 1, 1]];
        let (inst, class) = miou(&l, &l, &[0, 0], &[vec![0, 1]]).unwrap();
        assert_eq!((inst, class), (1.0, 1.0));
    }

    #[test]
    fn hand_computed_four_points() {
        // labels 0 0 1 1, preds 0 0 0 0: part 0 IoU = 2/4, part 1 IoU = 0/2.
        let (inst, _) = miou(&[vec![0, 0, 0, 0]], &[vec![0, 0, 1, 1]], &[0], &[vec![0, 1]]).unwrap();
        assert!((inst - 0.25).abs() < 1e-15);
        // Part 2 absent from both contributes 1: (0.5 + 0 + 1) / 3.
        let (inst, _) = miou(&[vec![0, 0, 0, 0]], &[vec![0, 0, 1, 1]], &[0], &[vec![0, 1, 2]]).unwrap();
        assert!((inst - 0.5).abs() < 1e-15);
    }

    #[test]
    fn class_miou_averages_within_then_across() {
        let preds = vec![vec![0, 0], vec![0, 1], vec![2, 2]];
        let labels = vec![vec![0, 1], vec![0, 1], vec![2, 2]];
        // Shape 0: part 0 1/2, part 1 0 -> 0.25; shape 1: 1; shape 2: 1.
        let (inst, class) = miou(&preds, &labels, &[0, 0, 1], &[vec![0, 1], vec![2]]).unwrap();
        assert!((inst - 2.25 / 3.0).abs() < 1e-15);
        assert!((class - (0.625 + 1.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn argmax_prefers_first_tie() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }

    proptest! {
        #[test]
        fn miou_ignores_point_order(
            pairs in proptest::collection::vec((0usize..3, 0usize..3), 1..40),
            rot in 0usize..40,
        ) {
            let (p, l): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
            let r = rot % p.len();
            let (mut p2, mut l2) = (p.clone(), l.clone());
            p2.rotate_left(r);
            l2.rotate_left(r);
            let parts = vec![vec![0, 1, 2]];
            let a = miou(std::slice::from_ref(&p), std::slice::from_ref(&l), &[0], &parts).unwrap();
            let b = miou(&[p2], &[l2], &[0], &parts).unwrap();
            prop_assert_eq!(a, b);
            // Relabeling parts consistently in both leaves the score unchanged.
            let perm = [2, 0, 1];
            let p3: Vec<usize> = p.iter().map(|&v| perm[v]).collect();
            let l3: Vec<usize> = l.iter().map(|&v| perm[v]).collect();
            let c = miou(&[p3], &[l3], &[0], &parts).unwrap();
            prop_assert!((a.0 - c.0).abs() < 1e-12);
        }
    }
}

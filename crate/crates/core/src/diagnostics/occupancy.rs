use crate::masking::BevMaskPlan;
use crate::{CoreError, Result};

/// Cosine similarity to the empty token at masked cells; `None` elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMap {
    pub h: usize,
    pub w: usize,
    pub values: Vec<Option<f64>>,
}

impl SimilarityMap {
    pub fn get(&self, h: usize, w: usize) -> Option<f64> {
        self.values[h * self.w + w]
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na.max(adljepa_autodiff::EPS_NORM) * nb.max(adljepa_autodiff::EPS_NORM))
}

/// `predictions` is one scene's `[H·W, E]` block of predicted embeddings.
pub fn occupancy_estimate(predictions: &[f64], empty_token: &[f64], plan: &BevMaskPlan) -> Result<SimilarityMap> {
    let e = empty_token.len();
    let cells = plan.cells();
    if e == 0 || predictions.len() != cells * e {
        return Err(CoreError::Shape(format!(
            "{} prediction values for {cells} cells of width {e}",
            predictions.len()
        )));
    }
    let values = (0..cells)
        .map(|i| plan.masked[i].then(|| cosine(&predictions[i * e..(i + 1) * e], empty_token)))
        .collect();
    Ok(SimilarityMap {
        h: plan.occupancy.h,
        w: plan.occupancy.w,
        values,
    })
}

/// ROC-AUC of `scores` for positive `labels`, ties counted half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(CoreError::Shape(format!("{} scores, {} labels", scores.len(), labels.len())));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(CoreError::Degenerate("AUC undefined for a single-class label set".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(CoreError::Degenerate("non-finite score".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // average ranks over tie groups (Mann-Whitney U)
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += avg * idx[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum_pos - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// Scores and emptiness labels of every masked cell of every map.
pub fn masked_scores(maps: &[SimilarityMap], plans: &[BevMaskPlan]) -> (Vec<f64>, Vec<bool>) {
    let mut scores = Vec::new();
    let mut empty = Vec::new();
    for (m, p) in maps.iter().zip(plans) {
        for (i, v) in m.values.iter().enumerate() {
            if let Some(s) = v {
                scores.push(*s);
                empty.push(!p.occupancy.cells[i]);
            }
        }
    }
    (scores, empty)
}

/// AUC of similarity-to-empty as a detector of truly empty masked cells.
pub fn occupancy_auc(maps: &[SimilarityMap], plans: &[BevMaskPlan]) -> Result<f64> {
    let (scores, empty) = masked_scores(maps, plans);
    roc_auc(&scores, &empty)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_basics() {
        assert_eq!(roc_auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.9, 0.8, 0.2, 0.1], &[false, false, true, true]).unwrap(), 0.0);
        assert_eq!(roc_auc(&[0.5, 0.5], &[false, true]).unwrap(), 0.5);
        assert!(roc_auc(&[0.1, 0.2], &[true, true]).is_err());
    }
}

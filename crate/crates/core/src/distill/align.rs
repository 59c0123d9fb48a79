//! Cell alignment between predicted and reference table cells.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthdoc::{CellBox, FieldAnnotation};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignWeights {
    pub l1: f64,
    pub iou: f64,
    pub cls: f64,
}

impl Default for AlignWeights {
    fn default() -> Self {
        AlignWeights { l1: 1.0, iou: 1.0, cls: 1.0 }
    }
}

fn boxed(cells: &[FieldAnnotation]) -> Result<Vec<CellBox>> {
    cells
        .iter()
        .map(|c| {
            c.cell_box
                .ok_or_else(|| Error::input(format!("cell `{}` carries no box", c.key)))
        })
        .collect()
}

/// Greedy IoU-descending matching. Returns `(pred index, truth index)` pairs;
/// ties resolve to the lower predicted, then lower truth index.
pub fn match_cells(pred: &[CellBox], truth: &[CellBox]) -> Vec<(usize, usize)> {
    let mut cand: Vec<(f64, usize, usize)> = Vec::with_capacity(pred.len() * truth.len());
    for (i, p) in pred.iter().enumerate() {
        for (j, t) in truth.iter().enumerate() {
            cand.push((p.iou(t), i, j));
        }
    }
    cand.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_p = vec![false; pred.len()];
    let mut used_t = vec![false; truth.len()];
    let mut out = Vec::new();
    for (_, i, j) in cand {
        if !used_p[i] && !used_t[j] {
            used_p[i] = true;
            used_t[j] = true;
            out.push((i, j));
        }
    }
    out
}

/// Mean per-cell alignment cost over `max(|pred|, |truth|)`:
/// matched pairs cost `l1·mean|Δcoord| + iou·(1 − IoU) + cls·[kinds differ]`,
/// every unmatched cell costs `iou`.
pub fn align_loss(pred: &[FieldAnnotation], truth: &[FieldAnnotation], w: &AlignWeights) -> Result<f64> {
    let pb = boxed(pred)?;
    let tb = boxed(truth)?;
    let denom = pb.len().max(tb.len());
    if denom == 0 {
        return Ok(0.0);
    }
    let matches = match_cells(&pb, &tb);
    let mut total = 0.0;
    for &(i, j) in &matches {
        let l1 = pb[i].0.iter().zip(&tb[j].0).map(|(a, b)| (a - b).abs()).sum::<f64>() / 4.0;
        let cls = if pred[i].kind == truth[j].kind { 0.0 } else { 1.0 };
        total += w.l1 * l1 + w.iou * (1.0 - pb[i].iou(&tb[j])) + w.cls * cls;
    }
    let unmatched = pb.len() + tb.len() - 2 * matches.len();
    total += w.iou * unmatched as f64;
    Ok(total / denom as f64)
}

/// Table cells (annotations that carry a box) of an annotation list.
pub fn cells(annotations: &[FieldAnnotation]) -> Vec<FieldAnnotation> {
    annotations.iter().filter(|a| a.cell_box.is_some()).cloned().collect()
}

//! The gating function: sort snippets by score, keep the longest prefix
//! that fits the extractive length budget, and realize the selection as a
//! sorting-mask matrix multiplication so gradients reach the encoder.

use crate::numerics::concat_rows;
use crate::{Real, Tensor};

use super::{EncodedSnippets, Fwd, ModelError};
use crate::numerics::Var;

/// Outcome of one gating event.
#[derive(Debug, Clone, PartialEq)]
pub struct GateSelection {
    /// All snippet indices sorted by descending score; ties keep original
    /// order.
    pub order: Vec<usize>,
    /// The selected prefix of `order`.
    pub selected: Vec<usize>,
    /// Snippet-level sorting mask `[selected_count, n]`: row `p` is the
    /// one-hot row of the snippet at sorted position `p`.
    pub mask: Tensor,
    pub selected_total_len: usize,
}

impl GateSelection {
    pub fn selected_count(&self) -> usize {
        self.selected.len()
    }
}

/// Sorts by predicted score and takes snippets until the next one would
/// overflow `max_extract_len`. No skipping past the first overflow.
pub fn gate_select(
    scores: &[f64],
    lengths: &[usize],
    max_extract_len: usize,
) -> Result<GateSelection, ModelError> {
    assert_eq!(scores.len(), lengths.len(), "gate_select input length mismatch");
    assert!(lengths.iter().all(|&l| l > 0), "gate_select requires positive lengths");
    assert!(scores.iter().all(|s| s.is_finite()), "gate_select requires finite scores");
    let n = scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort: equal scores keep ascending original index.
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());

    let mut selected = Vec::new();
    let mut total = 0usize;
    for &i in &order {
        if total + lengths[i] > max_extract_len {
            break;
        }
        selected.push(i);
        total += lengths[i];
    }
    if selected.is_empty() {
        return Err(ModelError::EmptySelection {
            limit: max_extract_len,
            top_len: lengths[order[0]],
        });
    }

    let mut mask = Tensor::zeros(&[selected.len(), n]);
    for (p, &i) in selected.iter().enumerate() {
        mask.data_mut()[p * n + i] = 1.0;
    }
    Ok(GateSelection { order, selected, mask, selected_total_len: total })
}

/// Concatenates the selected snippets' encoded representations in sorted
/// order as one mask-matmul over the stacked per-snippet tensors. Only the
/// non-pad rows of each selected snippet enter the memory, so the result is
/// `[selected_total_len, d]` with no pad positions.
pub fn apply_selection<'t>(
    f: &Fwd<'_, 't>,
    encoded: &EncodedSnippets<'t>,
    selection: &GateSelection,
) -> Var<'t, Real> {
    let _ = f;
    let width = encoded.pad_width;
    let n = encoded.reps.len();
    let stacked = concat_rows(&encoded.reps);
    let rows = selection.selected_total_len;
    let mut mask = Tensor::zeros(&[rows, n * width]);
    let mut r = 0;
    for &snip in &selection.selected {
        for t in 0..encoded.lengths[snip] {
            mask.data_mut()[r * n * width + snip * width + t] = 1.0;
            r += 1;
        }
    }
    debug_assert_eq!(r, rows);
    stacked.premul_const(&mask)
}

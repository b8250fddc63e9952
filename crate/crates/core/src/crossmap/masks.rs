use crate::numerics::{Tensor, MASK_NEG};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskKind {
    /// Each query sees itself and earlier keys.
    Causal,
    /// Every query sees every key.
    Bidirectional,
    /// Keys at or beyond `valid` are blocked for every query.
    Padding { valid: usize },
}

/// Additive `queries × keys` mask of zeros and [`MASK_NEG`]. Masks compose
/// by addition.
pub fn build_mask(kind: MaskKind, queries: usize, keys: usize) -> Tensor {
    let mut t = Tensor::zeros(&[queries, keys]);
    let data = t.data_mut();
    for q in 0..queries {
        for k in 0..keys {
            let blocked = match kind {
                MaskKind::Causal => k > q,
                MaskKind::Bidirectional => false,
                MaskKind::Padding { valid } => k >= valid,
            };
            if blocked {
                data[q * keys + k] = MASK_NEG;
            }
        }
    }
    t
}

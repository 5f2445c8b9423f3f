//! Closed-form scalar parameter counts for the layer types used by the
//! models.

pub use super::lstm::LstmParams;

/// `out × in` weights plus `out` biases.
pub fn affine(input: usize, output: usize) -> usize {
    input * output + output
}

pub fn embedding(rows: usize, width: usize) -> usize {
    rows * width
}

pub fn lstm(input: usize, hidden: usize) -> usize {
    LstmParams::num_params(input, hidden)
}

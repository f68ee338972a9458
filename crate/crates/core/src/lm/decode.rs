use crate::tensor::{Scalar, Tensor};

use super::{FrozenLm, LmError};

/// Anything that maps a token prefix to causal next-token logits.
pub trait LanguageModel {
    fn logits(&self, ids: &[usize]) -> Result<Tensor<f32>, LmError>;
    fn max_seq_len(&self) -> usize;
}

impl LanguageModel for FrozenLm<f32> {
    fn logits(&self, ids: &[usize]) -> Result<Tensor<f32>, LmError> {
        FrozenLm::logits(self, ids)
    }

    fn max_seq_len(&self) -> usize {
        self.config().max_seq_len
    }
}

/// Lowest index of the maximum; NaN never wins.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Argmax decoding. Returns the prompt followed by the generated tokens; stops
/// after emitting `eos`, after `max_new_tokens`, or at the model's context limit.
pub fn greedy_decode(
    model: &dyn LanguageModel,
    prompt_ids: &[usize],
    max_new_tokens: usize,
    eos: usize,
) -> Result<Vec<usize>, LmError> {
    if prompt_ids.is_empty() {
        return Err(LmError::EmptyInput);
    }
    let mut ids = prompt_ids.to_vec();
    for _ in 0..max_new_tokens {
        if ids.len() >= model.max_seq_len() {
            break;
        }
        let logits = model.logits(&ids)?;
        let next = argmax(logits.row(ids.len() - 1));
        ids.push(next);
        if next == eos {
            break;
        }
    }
    Ok(ids)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_ties_pick_lowest() {
        assert_eq!(argmax(&[1.0f32, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[0.0f32; 4]), 0);
    }
}

//! Stepwise monotonic attention.
//!
//! Attention mass moves forward by at most one encoder position per decoder
//! step: each position keeps its mass with its stay probability and forwards
//! the rest to the next position. Mass that would leave the final position is
//! retained there, so the weights always sum to one.

use serde::{Deserialize, Serialize};

/// Attention weights after one decoder step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionState {
    pub weights: Vec<f64>,
}

impl AttentionState {
    /// Initial state: all mass on position 0.
    pub fn initial(positions: usize) -> Self {
        assert!(positions > 0, "attention needs at least one position");
        let mut weights = vec![0.0; positions];
        weights[0] = 1.0;
        AttentionState { weights }
    }

    pub fn expected_position(&self) -> f64 {
        self.weights.iter().enumerate().map(|(j, &w)| j as f64 * w).sum()
    }

    pub fn mass(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// One recurrence step: `alpha'[j] = alpha[j] p[j] + alpha[j-1] (1 - p[j-1])`,
/// with nothing flowing in from the left of position 0 and the final position
/// keeping whatever would flow out.
pub fn attention_step(prev: &AttentionState, stay_probs: &[f64]) -> AttentionState {
    let n = prev.weights.len();
    assert_eq!(stay_probs.len(), n, "stay probability per encoder position");
    let mut weights = vec![0.0; n];
    for j in 0..n {
        let stay = if j + 1 == n { 1.0 } else { stay_probs[j] };
        weights[j] += prev.weights[j] * stay;
        if j + 1 < n {
            weights[j + 1] += prev.weights[j] * (1.0 - stay);
        }
    }
    AttentionState { weights }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn one_hot_with_full_stay_is_fixed() {
        let s = AttentionState { weights: vec![0.0, 1.0, 0.0, 0.0] };
        let next = attention_step(&s, &[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(next.weights, vec![0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn one_hot_with_zero_stay_moves_one_step() {
        let s = AttentionState { weights: vec![0.0, 1.0, 0.0, 0.0] };
        let next = attention_step(&s, &[0.0, 0.0, 0.0, 0.0]);
        assert_eq!(next.weights, vec![0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn half_half_example() {
        let s = AttentionState { weights: vec![0.5, 0.5, 0.0] };
        let next = attention_step(&s, &[0.5, 0.5, 0.3]);
        let expect = [0.25, 0.5, 0.25];
        for (a, e) in next.weights.iter().zip(expect) {
            assert!((a - e).abs() < 1e-15, "{:?}", next.weights);
        }
    }

    #[test]
    fn mass_at_final_position_never_leaks() {
        let s = AttentionState { weights: vec![0.0, 0.0, 1.0] };
        let next = attention_step(&s, &[0.0, 0.0, 0.0]);
        assert_eq!(next.weights, vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn single_position_is_trivially_fixed() {
        let s = AttentionState::initial(1);
        let next = attention_step(&s, &[0.0]);
        assert_eq!(next.weights, vec![1.0]);
    }

    proptest! {
        #[test]
        fn rollouts_conserve_mass_and_advance_monotonically(
            n in 2usize..24,
            steps in 1usize..40,
            seed in 0u64..1000,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut state = AttentionState::initial(n);
            let mut prev_pos = state.expected_position();
            for _ in 0..steps {
                let p: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..=1.0)).collect();
                state = attention_step(&state, &p);
                let pos = state.expected_position();
                prop_assert!((state.mass() - 1.0).abs() < 1e-12);
                prop_assert!(pos + 1e-12 >= prev_pos);
                prop_assert!(pos - prev_pos <= 1.0 + 1e-12);
                prop_assert!(state.weights.iter().all(|&w| w >= 0.0));
                prev_pos = pos;
            }
        }
    }
}

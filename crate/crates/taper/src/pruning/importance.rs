//! Per-parameter importance scoring with EMA smoothing, plus column/row
//! aggregation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerKind {
    /// |theta * grad|, the first-order estimate of the loss change caused by
    /// zeroing the parameter.
    Sensitivity,
    /// |theta|.
    Magnitude,
    /// theta * grad, signed.
    Movement,
    /// EMA sensitivity multiplied by an EMA of its local variation.
    Platon,
}

/// S_j = |theta_j * g_j| elementwise.
pub fn sensitivity_scores(params: &[f64], grads: &[f64]) -> Vec<f64> {
    assert_eq!(params.len(), grads.len(), "params/grads length mismatch");
    params.iter().zip(grads.iter()).map(|(t, g)| (t * g).abs()).collect()
}

/// Instantaneous scores for the alternative metrics. PLATON's instantaneous
/// observation is the sensitivity; its uncertainty factor lives in
/// [`ImportanceState`].
pub fn alternative_scores(kind: ScorerKind, params: &[f64], grads: &[f64]) -> Vec<f64> {
    match kind {
        ScorerKind::Sensitivity | ScorerKind::Platon => sensitivity_scores(params, grads),
        ScorerKind::Magnitude => params.iter().map(|t| t.abs()).collect(),
        ScorerKind::Movement => {
            assert_eq!(params.len(), grads.len(), "params/grads length mismatch");
            params.iter().zip(grads.iter()).map(|(t, g)| t * g).collect()
        }
    }
}

/// buffer <- beta * buffer + (1 - beta) * scores.
pub fn ema_update(buffer: &mut [f64], scores: &[f64], beta: f64) {
    assert!((0.0..1.0).contains(&beta), "EMA decay {} outside [0, 1)", beta);
    assert_eq!(buffer.len(), scores.len(), "EMA buffer shape mismatch");
    for (b, s) in buffer.iter_mut().zip(scores.iter()) {
        *b = beta * *b + (1.0 - beta) * s;
    }
}

/// L1 norm of each column of a rows-by-cols score matrix.
pub fn column_importance(scores: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    assert_eq!(scores.len(), rows * cols, "score matrix shape mismatch");
    let mut out = vec![0.0; cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c] += scores[r * cols + c].abs();
        }
    }
    out
}

/// L1 norm of each row of a rows-by-cols score matrix.
pub fn row_importance(scores: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    assert_eq!(scores.len(), rows * cols, "score matrix shape mismatch");
    let mut out = vec![0.0; rows];
    for r in 0..rows {
        for c in 0..cols {
            out[r] += scores[r * cols + c].abs();
        }
    }
    out
}

/// EMA buffers of per-parameter scores for every scored matrix, plus the
/// PLATON uncertainty buffers when that scorer is selected.
pub struct ImportanceState {
    pub kind: ScorerKind,
    pub beta: f64,
    pub beta_uncertainty: f64,
    shapes: BTreeMap<String, Vec<usize>>,
    ema: BTreeMap<String, Vec<f64>>,
    uncertainty: BTreeMap<String, Vec<f64>>,
}

impl ImportanceState {
    pub fn new(
        kind: ScorerKind,
        beta: f64,
        beta_uncertainty: f64,
        shapes: BTreeMap<String, Vec<usize>>,
    ) -> ImportanceState {
        assert!((0.0..1.0).contains(&beta), "EMA decay {} outside [0, 1)", beta);
        assert!(
            (0.0..1.0).contains(&beta_uncertainty),
            "uncertainty decay {} outside [0, 1)",
            beta_uncertainty
        );
        let zeros = |shapes: &BTreeMap<String, Vec<usize>>| {
            shapes
                .iter()
                .map(|(k, s)| (k.clone(), vec![0.0; s.iter().product()]))
                .collect::<BTreeMap<_, _>>()
        };
        ImportanceState {
            kind,
            beta,
            beta_uncertainty,
            ema: zeros(&shapes),
            uncertainty: zeros(&shapes),
            shapes,
        }
    }

    pub fn shape(&self, name: &str) -> &[usize] {
        self.shapes.get(name).map(Vec::as_slice).unwrap_or_else(|| {
            panic!("unknown scored tensor: {}", name)
        })
    }

    pub fn tracked_names(&self) -> impl Iterator<Item = &String> {
        self.shapes.keys()
    }

    /// Fold one step's observation for a named matrix into the EMA buffers.
    pub fn observe(&mut self, name: &str, params: &[f64], grads: &[f64]) {
        let scores = alternative_scores(self.kind, params, grads);
        let buf = self.ema.get_mut(name).unwrap_or_else(|| panic!("unknown scored tensor: {}", name));
        ema_update(buf, &scores, self.beta);
        if self.kind == ScorerKind::Platon {
            // Local variation of the sensitivity: EMA of |s_t - I_t| using
            // the just-updated mean.
            let variation: Vec<f64> =
                scores.iter().zip(buf.iter()).map(|(s, i)| (s - i).abs()).collect();
            let ubuf = self.uncertainty.get_mut(name).unwrap();
            ema_update(ubuf, &variation, self.beta_uncertainty);
        }
    }

    /// Smoothed EMA buffer for a matrix (PLATON's mean term included).
    pub fn ema_buffer(&self, name: &str) -> &[f64] {
        self.ema.get(name).unwrap_or_else(|| panic!("unknown scored tensor: {}", name))
    }

    pub fn uncertainty_buffer(&self, name: &str) -> &[f64] {
        self.uncertainty.get(name).unwrap_or_else(|| panic!("unknown scored tensor: {}", name))
    }

    /// The per-parameter scores that ranking uses: the EMA buffer, times the
    /// uncertainty estimate for PLATON.
    pub fn effective_scores(&self, name: &str) -> Vec<f64> {
        let ema = self.ema_buffer(name);
        match self.kind {
            ScorerKind::Platon => {
                ema.iter().zip(self.uncertainty_buffer(name).iter()).map(|(i, u)| i * u).collect()
            }
            _ => ema.to_vec(),
        }
    }

    /// Restore a buffer from a checkpoint.
    pub fn load_ema(&mut self, name: &str, data: Vec<f64>) {
        let buf = self.ema.get_mut(name).unwrap_or_else(|| panic!("unknown scored tensor: {}", name));
        assert_eq!(buf.len(), data.len(), "EMA buffer size mismatch for {}", name);
        *buf = data;
    }

    pub fn load_uncertainty(&mut self, name: &str, data: Vec<f64>) {
        let buf =
            self.uncertainty.get_mut(name).unwrap_or_else(|| panic!("unknown scored tensor: {}", name));
        assert_eq!(buf.len(), data.len(), "uncertainty buffer size mismatch for {}", name);
        *buf = data;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sensitivity_hand_case() {
        assert_eq!(sensitivity_scores(&[2.0, -3.0], &[0.5, 1.0]), vec![1.0, 3.0]);
    }

    #[test]
    fn zero_parameter_scores_zero() {
        assert_eq!(sensitivity_scores(&[0.0], &[123.4]), vec![0.0]);
    }

    #[test]
    fn magnitude_and_movement_hand_cases() {
        assert_eq!(alternative_scores(ScorerKind::Magnitude, &[2.0, -3.0], &[9.0, 9.0]), vec![2.0, 3.0]);
        assert_eq!(alternative_scores(ScorerKind::Movement, &[2.0, -3.0], &[0.5, 1.0]), vec![1.0, -3.0]);
    }

    #[test]
    fn ema_arithmetic() {
        let mut buf = vec![1.0];
        ema_update(&mut buf, &[2.0], 0.9);
        assert!((buf[0] - 1.1).abs() < 1e-15);
    }

    #[test]
    fn ema_beta_zero_copies() {
        let mut buf = vec![5.0, 6.0];
        ema_update(&mut buf, &[1.0, 2.0], 0.0);
        assert_eq!(buf, vec![1.0, 2.0]);
    }

    #[test]
    fn ema_constant_stream_fixed_point() {
        let mut buf = vec![0.0];
        for _ in 0..400 {
            ema_update(&mut buf, &[3.0], 0.9);
        }
        assert!((buf[0] - 3.0).abs() < 1e-12, "fixed point not reached: {}", buf[0]);
    }

    #[test]
    #[should_panic(expected = "outside [0, 1)")]
    fn ema_rejects_bad_beta() {
        let mut buf = vec![0.0];
        ema_update(&mut buf, &[1.0], 1.0);
    }

    #[test]
    fn column_importance_hand_case() {
        // [[1,2],[3,4]] -> columns [4, 6]
        assert_eq!(column_importance(&[1.0, 2.0, 3.0, 4.0], 2, 2), vec![4.0, 6.0]);
    }

    #[test]
    fn zero_column_scores_zero() {
        assert_eq!(column_importance(&[0.0, 2.0, 0.0, 4.0], 2, 2)[0], 0.0);
    }

    #[test]
    fn row_importance_hand_case() {
        assert_eq!(row_importance(&[1.0, 2.0, 3.0, -4.0], 2, 2), vec![3.0, 7.0]);
    }

    #[test]
    fn platon_with_unit_uncertainty_reduces_to_ema_sensitivity() {
        let shapes: BTreeMap<String, Vec<usize>> = [("w".to_string(), vec![2, 2])].into();
        let mut platon = ImportanceState::new(ScorerKind::Platon, 0.9, 0.9, shapes.clone());
        let mut sens = ImportanceState::new(ScorerKind::Sensitivity, 0.9, 0.9, shapes);
        let params = [1.0, -2.0, 0.5, 3.0];
        let grads = [0.1, 0.4, -2.0, 0.3];
        for _ in 0..5 {
            platon.observe("w", &params, &grads);
            sens.observe("w", &params, &grads);
        }
        platon.load_uncertainty("w", vec![1.0; 4]);
        assert_eq!(platon.effective_scores("w"), sens.effective_scores("w"));
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn column_importance_row_permutation_invariant(
                data in proptest::collection::vec(-10.0f64..10.0, 12),
                swap_a in 0usize..3,
                swap_b in 0usize..3,
            ) {
                // 3x4 matrix; permuting rows leaves column importances fixed.
                let base = column_importance(&data, 3, 4);
                let mut permuted = data.clone();
                for c in 0..4 {
                    permuted.swap(swap_a * 4 + c, swap_b * 4 + c);
                }
                let after = column_importance(&permuted, 3, 4);
                for (x, y) in base.iter().zip(after.iter()) {
                    prop_assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }
}

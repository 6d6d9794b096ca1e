//! Single-head attention over a per-turn key/value memory that keeps only
//! the most recent rows once it exceeds a length threshold.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AttnError {
    #[error("memory is empty")]
    EmptyMemory,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite entry")]
    NonFinite,
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, AttnError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(AttnError::ShapeMismatch("ragged rows".into()));
        }
        Ok(Self { rows: rows.len(), cols, data: rows.concat() })
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, AttnError> {
        if data.len() != rows * cols {
            return Err(AttnError::ShapeMismatch(format!("{} values for {rows}x{cols}", data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Rows `start..` as a new matrix.
    fn suffix(&self, start: usize) -> Matrix {
        Matrix { rows: self.rows - start, cols: self.cols, data: self.data[start * self.cols..].to_vec() }
    }

    fn vstack(&self, other: &Matrix) -> Matrix {
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Matrix { rows: self.rows + other.rows, cols: self.cols, data }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnKV {
    pub keys: Matrix,
    pub values: Matrix,
    pub turn_index: usize,
}

impl TurnKV {
    pub fn new(keys: Matrix, values: Matrix, turn_index: usize) -> Result<Self, AttnError> {
        if keys.rows != values.rows || keys.cols != values.cols {
            return Err(AttnError::ShapeMismatch(format!(
                "keys {}x{} vs values {}x{}",
                keys.rows, keys.cols, values.rows, values.cols
            )));
        }
        if !keys.is_finite() || !values.is_finite() {
            return Err(AttnError::NonFinite);
        }
        Ok(Self { keys, values, turn_index })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryState {
    keys: Matrix,
    values: Matrix,
    max_len: usize,
    head_dim: usize,
    turns: usize,
}

impl MemoryState {
    pub fn new(max_len: usize, head_dim: usize) -> Self {
        Self { keys: Matrix::zeros(0, head_dim), values: Matrix::zeros(0, head_dim), max_len, head_dim, turns: 0 }
    }

    pub fn len(&self) -> usize {
        self.keys.rows
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn keys(&self) -> &Matrix {
        &self.keys
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn turns(&self) -> usize {
        self.turns
    }

    /// Concatenates the turn and drops the oldest rows beyond `max_len`.
    pub fn append_turn(&self, turn: &TurnKV) -> Result<MemoryState, AttnError> {
        if turn.keys.cols != self.head_dim {
            return Err(AttnError::ShapeMismatch(format!(
                "turn width {} vs head dim {}",
                turn.keys.cols, self.head_dim
            )));
        }
        if turn.keys.rows == 0 {
            return Ok(self.clone());
        }
        let keys = self.keys.vstack(&turn.keys);
        let values = self.values.vstack(&turn.values);
        let start = keys.rows.saturating_sub(self.max_len);
        Ok(MemoryState {
            keys: keys.suffix(start),
            values: values.suffix(start),
            max_len: self.max_len,
            head_dim: self.head_dim,
            turns: self.turns + 1,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionOutput {
    pub output: Matrix,
    pub weights: Matrix,
}

/// `softmax(Q Kᵀ / sqrt(d)) V` over the memory, with a per-row max shift.
pub fn attend(query: &Matrix, state: &MemoryState) -> Result<AttentionOutput, AttnError> {
    if state.is_empty() {
        return Err(AttnError::EmptyMemory);
    }
    if query.cols != state.head_dim {
        return Err(AttnError::ShapeMismatch(format!("query width {} vs head dim {}", query.cols, state.head_dim)));
    }
    let (s, l, d) = (query.rows, state.len(), state.head_dim);
    let scale = 1.0 / (d as f64).sqrt();
    let mut weights = Matrix::zeros(s, l);
    let mut output = Matrix::zeros(s, d);
    for i in 0..s {
        let q = query.row(i);
        let w = &mut weights.data[i * l..(i + 1) * l];
        for (j, wj) in w.iter_mut().enumerate() {
            *wj = q.iter().zip(state.keys.row(j)).map(|(a, b)| a * b).sum::<f64>() * scale;
        }
        let max = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for wj in w.iter_mut() {
            *wj = (*wj - max).exp();
            total += *wj;
        }
        for wj in w.iter_mut() {
            *wj /= total;
        }
        let out = &mut output.data[i * d..(i + 1) * d];
        for (j, wj) in w.iter().enumerate() {
            for (o, v) in out.iter_mut().zip(state.values.row(j)) {
                *o += wj * v;
            }
        }
    }
    Ok(AttentionOutput { output, weights })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn turn(rows: &[Vec<f64>], t: usize) -> TurnKV {
        let m = Matrix::from_rows(rows).unwrap();
        TurnKV::new(m.clone(), m, t).unwrap()
    }

    fn seq(start: usize, n: usize) -> Vec<Vec<f64>> {
        (start..start + n).map(|i| vec![i as f64, 1.0]).collect()
    }

    #[test]
    fn append_lengths() {
        let s = MemoryState::new(8, 2);
        let s1 = s.append_turn(&turn(&seq(0, 5), 0)).unwrap();
        assert_eq!(s1.len(), 5);
        let s2 = s1.append_turn(&turn(&seq(5, 5), 1)).unwrap();
        assert_eq!(s2.len(), 8);
        assert_eq!(s2.keys().to_rows(), seq(2, 8));
        let empty = TurnKV::new(Matrix::zeros(0, 2), Matrix::zeros(0, 2), 2).unwrap();
        assert_eq!(s2.append_turn(&empty).unwrap(), s2);
    }

    #[test]
    fn errors() {
        let s = MemoryState::new(4, 2);
        let q = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        assert_eq!(attend(&q, &s), Err(AttnError::EmptyMemory));
        let bad = turn(&[vec![1.0, 2.0, 3.0]], 0);
        assert!(matches!(s.append_turn(&bad), Err(AttnError::ShapeMismatch(_))));
        let k = Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let v = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert!(TurnKV::new(k, v, 0).is_err());
        let s = s.append_turn(&turn(&seq(0, 2), 0)).unwrap();
        let q3 = Matrix::from_rows(&[vec![1.0, 0.0, 0.0]]).unwrap();
        assert!(matches!(attend(&q3, &s), Err(AttnError::ShapeMismatch(_))));
    }

    #[test]
    fn equal_keys_average_values() {
        let keys = Matrix::from_rows(&[vec![0.3], vec![0.3], vec![0.3]]).unwrap();
        let values = Matrix::from_rows(&[vec![1.0], vec![2.0], vec![6.0]]).unwrap();
        let s = MemoryState::new(10, 1).append_turn(&TurnKV::new(keys, values, 0).unwrap()).unwrap();
        let q = Matrix::from_rows(&[vec![5.0], vec![-2.0]]).unwrap();
        let out = attend(&q, &s).unwrap();
        for i in 0..2 {
            assert!((out.output.get(i, 0) - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn weights_are_distributions_with_large_logits() {
        let s = MemoryState::new(10, 2).append_turn(&turn(&seq(0, 6), 0)).unwrap();
        let q = Matrix::from_rows(&[vec![500.0, -3.0], vec![0.0, 0.0]]).unwrap();
        let out = attend(&q, &s).unwrap();
        for i in 0..2 {
            let row = out.weights.row(i);
            assert!(row.iter().all(|w| *w >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}

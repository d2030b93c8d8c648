//! Discretized 4D score maps `S(k | i)`.

use crate::error::{Error, Result};

/// "No score": absorbing under both `max` and `+`.
pub const SENTINEL: f64 = f64::NEG_INFINITY;

#[inline]
pub fn is_sentinel(v: f64) -> bool {
    v <= -1e30
}

/// Which map of the U-pipeline a score map holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stage {
    /// `S_l` or `Q_l`.
    Full(usize),
    /// `S_{l+1/2}` or `Q_{l+1/2}`: reference grid of level `l`, range of level `l + 1`.
    Pooled(usize),
}

/// Score array indexed `(i_row, i_col, k_row, k_col)` with `k` spanning `2R + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMap {
    rows: usize,
    cols: usize,
    range: usize,
    stage: Stage,
    data: Vec<f64>,
}

impl ScoreMap {
    pub fn filled(rows: usize, cols: usize, range: usize, stage: Stage, value: f64) -> Self {
        let span = 2 * range + 1;
        Self {
            rows,
            cols,
            range,
            stage,
            data: vec![value; rows * cols * span * span],
        }
    }

    pub fn from_vec(
        rows: usize,
        cols: usize,
        range: usize,
        stage: Stage,
        data: Vec<f64>,
    ) -> Result<Self> {
        let span = 2 * range + 1;
        let expected = rows * cols * span * span;
        if data.len() != expected {
            return Err(Error::shape(format!(
                "score map {rows}x{cols} with range {range} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            rows,
            cols,
            range,
            stage,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn range(&self) -> usize {
        self.range
    }

    pub fn span(&self) -> usize {
        2 * self.range + 1
    }

    pub fn slice_len(&self) -> usize {
        self.span() * self.span()
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn same_shape(&self, other: &ScoreMap) -> bool {
        self.rows == other.rows && self.cols == other.cols && self.range == other.range
    }

    #[inline]
    pub fn cell_index(&self, i: [usize; 2]) -> usize {
        i[0] * self.cols + i[1]
    }

    #[inline]
    pub fn offset(&self, i: [usize; 2], k: [usize; 2]) -> usize {
        let span = self.span();
        (self.cell_index(i) * span + k[0]) * span + k[1]
    }

    pub fn get(&self, i: [usize; 2], k: [usize; 2]) -> f64 {
        self.data[self.offset(i, k)]
    }

    pub fn set(&mut self, i: [usize; 2], k: [usize; 2], v: f64) {
        let o = self.offset(i, k);
        self.data[o] = v;
    }

    /// All displacement scores of reference cell `i`.
    pub fn slice(&self, i: [usize; 2]) -> &[f64] {
        let n = self.slice_len();
        let start = self.cell_index(i) * n;
        &self.data[start..start + n]
    }

    pub fn slice_mut(&mut self, i: [usize; 2]) -> &mut [f64] {
        let n = self.slice_len();
        let start = self.cell_index(i) * n;
        &mut self.data[start..start + n]
    }

    pub fn cells(&self) -> impl Iterator<Item = [usize; 2]> + '_ {
        let cols = self.cols;
        (0..self.rows * cols).map(move |c| [c / cols, c % cols])
    }

    pub fn contains_cell(&self, i: [i64; 2]) -> bool {
        i[0] >= 0 && i[1] >= 0 && (i[0] as usize) < self.rows && (i[1] as usize) < self.cols
    }

    /// Largest non-sentinel value, if any.
    pub fn max_value(&self) -> Option<f64> {
        self.data
            .iter()
            .copied()
            .filter(|v| !is_sentinel(*v))
            .fold(None, |acc, v| Some(acc.map_or(v, |a: f64| a.max(v))))
    }
}

/// Boolean attention mask over `(query row, key column)`; `true` means the
/// key may be attended to.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl Mask {
    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                allowed.push(f(r, c));
            }
        }
        Self { rows, cols, allowed }
    }

    /// Causal mask for queries at absolute positions `query_pos` over keys at
    /// positions `0..n_keys`, optionally also hiding each query's own position.
    pub fn causal(query_pos: &[usize], n_keys: usize, mask_diagonal: bool) -> Self {
        Self::from_fn(query_pos.len(), n_keys, |r, c| {
            let q = query_pos[r];
            c <= q && !(mask_diagonal && c == q)
        })
    }

    /// Stacks the mask `times` times vertically.
    pub fn tile_rows(&self, times: usize) -> Self {
        Self {
            rows: self.rows * times,
            cols: self.cols,
            allowed: self.allowed.repeat(times),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn allowed(&self, row: usize, col: usize) -> bool {
        self.allowed[row * self.cols + col]
    }

    pub fn row_is_empty(&self, row: usize) -> bool {
        !self.allowed[row * self.cols..(row + 1) * self.cols]
            .iter()
            .any(|&a| a)
    }
}

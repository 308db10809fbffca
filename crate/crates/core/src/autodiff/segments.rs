use crate::error::{arg, Result};

/// Row layout of a packed batch: sentence `b` owns rows
/// `bounds[b]..bounds[b + 1]` of every per-token matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segments {
    bounds: Vec<usize>,
    owner: Vec<usize>,
}

impl Segments {
    pub fn from_lengths(lengths: &[usize]) -> Result<Self> {
        if lengths.is_empty() {
            return arg("segments need at least one sentence");
        }
        if lengths.contains(&0) {
            return arg("zero-length segment");
        }
        let mut bounds = Vec::with_capacity(lengths.len() + 1);
        let mut owner = Vec::with_capacity(lengths.iter().sum());
        bounds.push(0);
        for (b, &len) in lengths.iter().enumerate() {
            owner.extend(std::iter::repeat(b).take(len));
            bounds.push(bounds[b] + len);
        }
        Ok(Self { bounds, owner })
    }

    pub fn single(len: usize) -> Result<Self> {
        Self::from_lengths(&[len])
    }

    pub fn count(&self) -> usize {
        self.bounds.len() - 1
    }

    pub fn total_rows(&self) -> usize {
        *self.bounds.last().unwrap()
    }

    pub fn range(&self, b: usize) -> std::ops::Range<usize> {
        self.bounds[b]..self.bounds[b + 1]
    }

    pub fn len_of(&self, b: usize) -> usize {
        self.bounds[b + 1] - self.bounds[b]
    }

    pub fn lengths(&self) -> Vec<usize> {
        (0..self.count()).map(|b| self.len_of(b)).collect()
    }

    pub fn owner(&self, row: usize) -> usize {
        self.owner[row]
    }

    /// Source row for `row` shifted by `offset` within its own segment.
    pub fn shifted(&self, row: usize, offset: isize) -> Option<usize> {
        let src = row as isize + offset;
        if src < 0 || src as usize >= self.total_rows() {
            return None;
        }
        let src = src as usize;
        (self.owner[src] == self.owner[row]).then_some(src)
    }

    /// Segments formed by dropping the first and last row of every segment,
    /// plus the row indices kept. Every segment must have at least 3 rows.
    pub fn interior(&self) -> Result<(Segments, Vec<usize>)> {
        let mut lens = Vec::with_capacity(self.count());
        let mut rows = Vec::new();
        for b in 0..self.count() {
            let r = self.range(b);
            if r.len() < 3 {
                return arg("interior of a segment with fewer than 3 rows");
            }
            lens.push(r.len() - 2);
            rows.extend(r.start + 1..r.end - 1);
        }
        Ok((Segments::from_lengths(&lens)?, rows))
    }
}

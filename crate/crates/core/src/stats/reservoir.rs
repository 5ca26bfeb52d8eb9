use crate::error::{Result, TaqError};
use crate::linalg::{Matrix, SeededRng};
use crate::scalar::Scalar;

/// Fixed-capacity uniform sample over a stream of vectors (Algorithm R).
#[derive(Debug, Clone)]
pub struct Reservoir<T> {
    capacity: usize,
    width: usize,
    rows: Vec<T>,
    seen: u64,
    rng: SeededRng,
}

impl<T: Scalar> Reservoir<T> {
    pub fn new(capacity: usize, width: usize, rng: SeededRng) -> Result<Self> {
        if capacity == 0 || width == 0 {
            return Err(TaqError::InvalidInput(format!(
                "reservoir {capacity}x{width}"
            )));
        }
        Ok(Self {
            capacity,
            width,
            rows: Vec::with_capacity(capacity * width),
            seen: 0,
            rng,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.rows.len() / self.width
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn seen(&self) -> u64 {
        self.seen
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.rows[i * self.width..(i + 1) * self.width]
    }

    pub fn offer(&mut self, v: &[T]) -> Result<()> {
        if v.len() != self.width {
            return Err(TaqError::InvalidShape(format!(
                "offered vector of width {} to reservoir of width {}",
                v.len(),
                self.width
            )));
        }
        self.seen += 1;
        if self.len() < self.capacity {
            self.rows.extend_from_slice(v);
        } else {
            let j = self.rng.below(self.seen) as usize;
            if j < self.capacity {
                self.rows[j * self.width..(j + 1) * self.width].copy_from_slice(v);
            }
        }
        Ok(())
    }

    pub fn to_matrix(&self) -> Matrix<T> {
        Matrix::from_vec(self.len(), self.width, self.rows.clone()).expect("rows are whole vectors")
    }
}

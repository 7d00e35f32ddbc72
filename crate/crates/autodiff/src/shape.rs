use std::fmt;

use crate::AutodiffError;

/// Extents of a tensor of rank 0 to 3. Rank 0 is a scalar.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    dims: [usize; 3],
    rank: u8,
}

impl Shape {
    pub fn new(dims: &[usize]) -> Result<Self, AutodiffError> {
        if dims.len() > 3 {
            return Err(AutodiffError::InvalidShape(dims.to_vec()));
        }
        let mut out = [1usize; 3];
        out[..dims.len()].copy_from_slice(dims);
        Ok(Shape {
            dims: out,
            rank: dims.len() as u8,
        })
    }

    pub const fn scalar() -> Self {
        Shape {
            dims: [1, 1, 1],
            rank: 0,
        }
    }

    pub const fn vector(n: usize) -> Self {
        Shape {
            dims: [n, 1, 1],
            rank: 1,
        }
    }

    pub const fn matrix(rows: usize, cols: usize) -> Self {
        Shape {
            dims: [rows, cols, 1],
            rank: 2,
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims[..self.rank as usize]
    }

    pub fn rank(&self) -> usize {
        self.rank as usize
    }

    pub fn numel(&self) -> usize {
        self.dims().iter().product()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    /// Size of the trailing (feature) axis; 1 for scalars.
    pub fn last(&self) -> usize {
        match self.rank {
            0 => 1,
            r => self.dims[r as usize - 1],
        }
    }

    /// Number of rows when viewed as a matrix over the trailing axis.
    pub fn rows(&self) -> usize {
        self.numel() / self.last().max(1)
    }

    /// `(rows, cols)` for a rank-2 shape.
    pub fn as_matrix(&self) -> Option<(usize, usize)> {
        (self.rank == 2).then_some((self.dims[0], self.dims[1]))
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, d) in self.dims().iter().enumerate() {
            if i > 0 {
                write!(f, "×")?;
            }
            write!(f, "{d}")?;
        }
        write!(f, "]")
    }
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{random_normal, Matrix, Param, Rng};

/// Low-rank adapter: `x ↦ up · (down · x)`, with `down: d → r` stored as an
/// `r × d` matrix and `up: r → d` stored as `d × r`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Expert {
    pub down: Param,
    pub up: Param,
    pub frozen: bool,
}

impl Expert {
    /// `down ~ N(0, 1/d)`, `up = 0`, so a fresh expert contributes nothing.
    pub fn init(width: usize, rank: usize, rng: &mut Rng) -> Result<Self> {
        if rank == 0 || rank >= width {
            return Err(Error::Argument(format!(
                "expert rank must satisfy 1 <= r < d, got r={rank}, d={width}"
            )));
        }
        let down = random_normal(rank, width, 1.0 / (width as f64).sqrt(), rng);
        Ok(Self::from_factors(down, Matrix::zeros(width, rank)))
    }

    pub fn from_factors(down: Matrix, up: Matrix) -> Self {
        Self {
            down: Param::new(down),
            up: Param::new(up),
            frozen: false,
        }
    }

    pub fn width(&self) -> usize {
        self.down.value.cols()
    }

    pub fn rank(&self) -> usize {
        self.down.value.rows()
    }

    /// Returns `(down·x, up·down·x)`; the first is cached for backward.
    pub(crate) fn forward_cached(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let h = self.down.value.matvec(x)?;
        let y = self.up.value.matvec(&h)?;
        Ok((h, y))
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_cached(x)?.1)
    }
}

/// `up · (down · x)` with no extra scaling.
pub fn expert_forward(e: &Expert, x: &[f64]) -> Result<Vec<f64>> {
    e.forward(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_factors_give_zero() {
        let e = Expert::from_factors(Matrix::zeros(2, 4), Matrix::zeros(4, 2));
        assert_eq!(expert_forward(&e, &[1.0, 2.0, 3.0, 4.0]).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn rank_one_projection() {
        // d=2, r=1: down = first row of I, up = its transpose -> keeps x[0].
        let down = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let up = Matrix::from_rows(&[vec![1.0], vec![0.0]]).unwrap();
        let e = Expert::from_factors(down, up);
        assert_eq!(expert_forward(&e, &[3.0, -5.0]).unwrap(), vec![3.0, 0.0]);
    }

    #[test]
    fn zero_input_gives_zero() {
        let mut rng = Rng::new(1, 0);
        let mut e = Expert::init(6, 2, &mut rng).unwrap();
        e.up.value = random_normal(6, 2, 1.0, &mut rng);
        assert_eq!(expert_forward(&e, &[0.0; 6]).unwrap(), vec![0.0; 6]);
    }

    #[test]
    fn dimension_mismatch() {
        let mut rng = Rng::new(1, 0);
        let e = Expert::init(6, 2, &mut rng).unwrap();
        assert!(matches!(expert_forward(&e, &[0.0; 5]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn rank_bounds() {
        let mut rng = Rng::new(1, 0);
        assert!(Expert::init(4, 0, &mut rng).is_err());
        assert!(Expert::init(4, 4, &mut rng).is_err());
    }
}

//! Central finite differences, used only as an oracle for the analytic
//! derivative paths.

use ndarray::{Array1, Array2};

use super::map::VectorMap;
use crate::error::Result;

pub const STEP: f64 = 1e-5;

/// `(F(s + h e_i) − F(s − h e_i)) / 2h`
pub fn central_column(map: &dyn VectorMap, s: &[f64], i: usize, h: f64) -> Result<Array1<f64>> {
    let mut plus = s.to_vec();
    let mut minus = s.to_vec();
    plus[i] += h;
    minus[i] -= h;
    Ok((map.eval(&plus)? - map.eval(&minus)?) / (2.0 * h))
}

/// Central difference of a scalar function of a parameter list with respect
/// to one entry `tensors[index][[row, col]]`.
pub fn central_partial<F>(f: F, tensors: &[Array2<f64>], index: usize, row: usize, col: usize, h: f64) -> Result<f64>
where
    F: Fn(&[Array2<f64>]) -> Result<f64>,
{
    let mut shifted = tensors.to_vec();
    shifted[index][[row, col]] += h;
    let plus = f(&shifted)?;
    shifted[index][[row, col]] -= 2.0 * h;
    let minus = f(&shifted)?;
    Ok((plus - minus) / (2.0 * h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn partial_of_quadratic() {
        let t = vec![array![[3.0, -1.0]]];
        let f = |p: &[Array2<f64>]| Ok(p[0][[0, 0]].powi(2) * p[0][[0, 1]]);
        let d = central_partial(f, &t, 0, 0, 0, 1e-5).unwrap();
        assert!((d - (-6.0)).abs() < 1e-8);
    }
}

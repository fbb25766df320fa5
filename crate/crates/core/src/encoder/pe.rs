use std::f64::consts::PI;

use crate::numcore::Tensor;
use crate::scalar::Scalar;

/// Sinusoidal encoding of 3D points: for each axis and `j < F`,
/// `sin(2^j·π·p)` then `cos(2^j·π·p)`. Output `[N x 6F]`, evaluated in f64.
pub fn positional_encode<T: Scalar>(p: &[[f32; 3]], freqs: usize) -> Tensor<T> {
    let dim = 6 * freqs;
    let mut out = Tensor::zeros(&[p.len(), dim]);
    for (row, pt) in out.data_mut().chunks_exact_mut(dim.max(1)).zip(p) {
        let mut k = 0;
        for &c in pt {
            for j in 0..freqs {
                let a = (1u64 << j) as f64 * PI * c as f64;
                row[k] = T::of(a.sin());
                row[k + 1] = T::of(a.cos());
                k += 2;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn origin_and_dimension() {
        let e = positional_encode::<f64>(&[[0.0; 3]], 5);
        assert_eq!(e.shape(), &[1, 30]);
        for (k, v) in e.data().iter().enumerate() {
            assert_eq!(*v, if k % 2 == 0 { 0.0 } else { 1.0 });
        }
    }

    #[test]
    fn injective_on_a_fine_grid() {
        // the lowest frequency alone separates points along an axis, since
        // (sin πx, cos πx) is one-to-one on [-1, 1); x = ±1 coincide.
        let steps: Vec<f32> = (0..200).map(|i| -1.0 + 0.01 * i as f32).collect();
        let axis: Vec<[f32; 3]> = steps.iter().map(|&x| [x, 0.0, 0.0]).collect();
        let e = positional_encode::<f64>(&axis, 8);
        let mut seen = HashSet::new();
        for row in e.data().chunks(48) {
            let key: Vec<i64> = row.iter().map(|v| (v * 1e9).round() as i64).collect();
            assert!(seen.insert(key));
        }
        // coarse 3D grid (0.2 spacing) exhaustively
        let coarse: Vec<f32> = (0..10).map(|i| -1.0 + 0.2 * i as f32).collect();
        let mut pts = Vec::new();
        for &x in &coarse {
            for &y in &coarse {
                for &z in &coarse {
                    pts.push([x, y, z]);
                }
            }
        }
        let e = positional_encode::<f64>(&pts, 8);
        let mut seen = HashSet::new();
        for row in e.data().chunks(48) {
            let key: Vec<i64> = row.iter().map(|v| (v * 1e9).round() as i64).collect();
            assert!(seen.insert(key));
        }
    }
}

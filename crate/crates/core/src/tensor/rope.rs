use super::Tensor;
use crate::error::{Error, Result};

/// Rotary position embedding over a `[t × h × d]` tensor.
///
/// Channel pairs `(2c, 2c+1)` of every head vector at row `i` are rotated by
/// `positions[i] · base^(-2c/d)`.
pub fn apply_rope(x: &Tensor, positions: &[usize], base: f64) -> Result<Tensor> {
    rope_rotate_rows(x, positions, base, 1.0)
}

/// Shared worker for the forward rotation (`sign = 1`) and its inverse
/// (`sign = -1`, used by the backward pass).
pub fn rope_rotate_rows(x: &Tensor, positions: &[usize], base: f64, sign: f64) -> Result<Tensor> {
    let [t, h, d] = match x.shape()[..] {
        [t, h, d] => [t, h, d],
        _ => return Err(Error::shape("apply_rope", format!("expected [t, h, d], got {:?}", x.shape()))),
    };
    if d % 2 != 0 {
        return Err(Error::shape("apply_rope", format!("head dimension {d} is odd")));
    }
    if positions.len() != t {
        return Err(Error::shape("apply_rope", format!("{} positions for {t} rows", positions.len())));
    }
    let half = d / 2;
    let inv_freq: Vec<f64> = (0..half).map(|c| base.powf(-((2 * c) as f64) / d as f64)).collect();
    let mut out = x.clone();
    let data = out.data_mut();
    let mut cs = vec![(0.0, 0.0); half];
    for (i, &p) in positions.iter().enumerate() {
        for (slot, f) in cs.iter_mut().zip(&inv_freq) {
            let angle = p as f64 * f;
            *slot = (angle.cos(), sign * angle.sin());
        }
        for head in data[i * h * d..(i + 1) * h * d].chunks_mut(d) {
            for (pair, &(cos, sin)) in head.chunks_mut(2).zip(&cs) {
                let (a, b) = (pair[0], pair[1]);
                pair[0] = a * cos - b * sin;
                pair[1] = a * sin + b * cos;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    #[test]
    fn position_zero_is_identity() {
        let mut rng = Rng::new(0);
        let x = Tensor::randn(&[1, 2, 8], 1.0, &mut rng);
        assert_eq!(apply_rope(&x, &[0], 10_000.0).unwrap(), x);
    }

    #[test]
    fn odd_head_dim_rejected() {
        let x = Tensor::zeros(&[1, 1, 3]);
        assert!(apply_rope(&x, &[0], 10_000.0).is_err());
    }

    #[test]
    fn inverse_rotation_round_trips() {
        let mut rng = Rng::new(1);
        let x = Tensor::randn(&[3, 2, 6], 1.0, &mut rng);
        let pos = [5, 17, 300];
        let y = apply_rope(&x, &pos, 640_000.0).unwrap();
        let back = rope_rotate_rows(&y, &pos, 640_000.0, -1.0).unwrap();
        assert!(back.max_abs_diff(&x) < 1e-12);
    }
}

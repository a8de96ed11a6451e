//! Finite scalar quantization: every coordinate is clamped to `[−1, 1]` and rounded onto an odd
//! number of evenly spaced levels.

use crate::error::{Error, Result};

fn half(levels: u32) -> f64 {
    (levels - 1) as f64 / 2.0
}

/// Per-coordinate bucket indices in `[0, levels_i)`. Rounding is half away from zero.
pub fn fsq_encode(f: &[f64], levels: &[u32]) -> Result<Vec<u32>> {
    if f.len() != levels.len() {
        return Err(Error::Shape(format!(
            "{} coordinates but {} level counts",
            f.len(),
            levels.len()
        )));
    }
    f.iter()
        .zip(levels)
        .map(|(&x, &l)| {
            if l < 2 || l % 2 == 0 {
                return Err(Error::InvalidConfig(format!("FSQ levels must be odd and ≥ 3, got {l}")));
            }
            let h = half(l);
            let q = (x.clamp(-1.0, 1.0) * h).round();
            Ok((q + h) as u32)
        })
        .collect()
}

/// Bucket centres back in `[−1, 1]`.
pub fn fsq_decode(codes: &[u32], levels: &[u32]) -> Vec<f64> {
    codes
        .iter()
        .zip(levels)
        .map(|(&c, &l)| {
            let h = half(l);
            (c as f64 - h) / h
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn five_level_hand_cases() {
        let l = [5, 5, 5, 5, 5];
        assert_eq!(
            fsq_encode(&[0.0, 1.0, -1.0, 0.30, 0.25], &l).unwrap(),
            vec![2, 4, 0, 3, 3]
        );
        assert_eq!(fsq_encode(&[-0.25, 7.0], &[5, 5]).unwrap(), vec![1, 4]);
    }

    #[test]
    fn decode_inverts_centres() {
        let l = [3, 5, 7];
        let codes = fsq_encode(&[-1.0, 0.5, 1.0 / 3.0], &l).unwrap();
        let back = fsq_decode(&codes, &l);
        assert_eq!(fsq_encode(&back, &l).unwrap(), codes);
        assert!((back[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn even_levels_are_rejected() {
        assert!(fsq_encode(&[0.0], &[4]).is_err());
    }
}

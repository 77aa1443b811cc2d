//! Fixed sine/cosine position encodings.

use crate::masker::TokenPos;

/// `dim`-wide encoding of a scalar position: sines in the first half, cosines
/// in the second, frequencies `1 / 10000^(2k / dim)`.
pub fn sincos_1d(pos: f64, dim: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), dim);
    let half = dim / 2;
    for k in 0..half {
        let freq = 1.0 / 10000f64.powf(2.0 * k as f64 / dim as f64);
        out[k] = (pos * freq).sin();
        out[half + k] = (pos * freq).cos();
    }
    if dim % 2 == 1 {
        out[dim - 1] = 0.0;
    }
}

/// Widths of the temporal, vertical and horizontal bands for feature width `dim`.
pub fn band_widths(dim: usize) -> (usize, usize, usize) {
    let spatial = 2 * (dim / 6);
    (dim - 2 * spatial, spatial, spatial)
}

/// Concatenated `[time | row | col]` encoding of a token position.
pub fn token_encoding(pos: TokenPos, dim: usize, out: &mut [f64]) {
    let (bt, bi, bj) = band_widths(dim);
    sincos_1d(pos.t as f64, bt, &mut out[..bt]);
    sincos_1d(pos.i as f64, bi, &mut out[bt..bt + bi]);
    sincos_1d(pos.j as f64, bj, &mut out[bt + bi..]);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bands_fill_the_width() {
        assert_eq!(band_widths(32), (12, 10, 10));
        assert_eq!(band_widths(8), (4, 2, 2));
        for d in (6..64).step_by(2) {
            let (a, b, c) = band_widths(d);
            assert_eq!(a + b + c, d);
            assert!(a % 2 == 0 && b % 2 == 0);
        }
    }

    #[test]
    fn encodings_are_distinct_per_position() {
        let mut seen = Vec::new();
        for t in 0..8 {
            for i in 0..4 {
                for j in 0..4 {
                    let mut v = vec![0.0; 32];
                    token_encoding(TokenPos { t, i, j }, 32, &mut v);
                    assert!(!seen.contains(&v));
                    seen.push(v);
                }
            }
        }
        let mut zero = vec![0.0; 4];
        sincos_1d(0.0, 4, &mut zero);
        assert_eq!(zero, vec![0.0, 0.0, 1.0, 1.0]);
    }
}

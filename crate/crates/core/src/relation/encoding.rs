//! Sinusoidal position encodings.
//!
//! Spatial layout for model width `C`: channels `[0, C/2)` encode the x
//! coordinate and `[C/2, C)` the y coordinate. Inside each half, channel
//! `2i` is `sin(p · ω_i)` and `2i + 1` is `cos(p · ω_i)` with
//! `ω_i = base^(-2i / (C/2))`. Normalized coordinates are scaled by 2π
//! first so that the unit square spans a full period of the fastest
//! frequency.
//!
//! Temporal encoding is the usual `sin(t · ω_i)`, `cos(t · ω_i)` pair layout
//! with `ω_i = base^(-2i / C)` over integer frame indices.

use std::f64::consts::TAU;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_FREQUENCY_BASE: f64 = 10000.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncodingConfig {
    pub model_dim: usize,
    pub base: f64,
}

impl EncodingConfig {
    pub fn new(model_dim: usize) -> Result<Self> {
        if model_dim == 0 || model_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "model dim must be a positive even number, got {model_dim}"
            )));
        }
        Ok(EncodingConfig {
            model_dim,
            base: DEFAULT_FREQUENCY_BASE,
        })
    }
}

fn write_pairs(out: &mut [f64], pos: f64, base: f64) {
    let width = out.len();
    for i in 0..width / 2 {
        let omega = base.powf(-((2 * i) as f64) / width as f64);
        out[2 * i] = (pos * omega).sin();
        out[2 * i + 1] = (pos * omega).cos();
    }
}

/// Spatial encoding of `N` normalized box centers (`[N, 2]`, x then y).
pub fn spe_encode(centers: &[[f64; 2]], cfg: &EncodingConfig) -> Result<Tensor> {
    let c = cfg.model_dim;
    if c % 4 != 0 {
        return Err(Error::Config(format!(
            "spatial encoding needs model dim divisible by 4, got {c}"
        )));
    }
    let mut data = vec![0.0; centers.len() * c];
    for (n, &[x, y]) in centers.iter().enumerate() {
        if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
            return Err(Error::Invalid(format!(
                "box center ({x}, {y}) of actor {n} lies outside the unit square"
            )));
        }
        let row = &mut data[n * c..(n + 1) * c];
        let (xs, ys) = row.split_at_mut(c / 2);
        write_pairs(xs, x * TAU, cfg.base);
        write_pairs(ys, y * TAU, cfg.base);
    }
    Tensor::new(&[centers.len().max(1), c], data)
}

/// Temporal encoding of the given frame indices, `[len, C]`.
pub fn tpe_encode(frame_indices: &[usize], cfg: &EncodingConfig) -> Result<Tensor> {
    if frame_indices.is_empty() {
        return Err(Error::Invalid("temporal encoding needs at least one frame".into()));
    }
    let c = cfg.model_dim;
    let mut data = vec![0.0; frame_indices.len() * c];
    for (k, &t) in frame_indices.iter().enumerate() {
        write_pairs(&mut data[k * c..(k + 1) * c], t as f64, cfg.base);
    }
    Tensor::new(&[frame_indices.len(), c], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(c: usize) -> EncodingConfig {
        EncodingConfig::new(c).unwrap()
    }

    #[test]
    fn origin_is_sin_zero_cos_one() {
        let t = spe_encode(&[[0.0, 0.0]], &cfg(16)).unwrap();
        for (i, v) in t.data().iter().enumerate() {
            assert_eq!(*v, if i % 2 == 0 { 0.0 } else { 1.0 });
        }
        let t = tpe_encode(&[0], &cfg(8)).unwrap();
        for (i, v) in t.data().iter().enumerate() {
            assert_eq!(*v, if i % 2 == 0 { 0.0 } else { 1.0 });
        }
    }

    #[test]
    fn identical_centers_identical_rows() {
        let t = spe_encode(&[[0.3, 0.9], [0.3, 0.9]], &cfg(8)).unwrap();
        assert_eq!(t.row(0), t.row(1));
    }

    #[test]
    fn spatial_values_at_c8() {
        // width 4 per coordinate: ω = 1, 10000^(-1/2) = 0.01
        let t = spe_encode(&[[0.5, 0.25]], &cfg(8)).unwrap();
        let px = 0.5 * TAU;
        let py = 0.25 * TAU;
        let expect = [
            px.sin(),
            px.cos(),
            (px * 0.01).sin(),
            (px * 0.01).cos(),
            py.sin(),
            py.cos(),
            (py * 0.01).sin(),
            (py * 0.01).cos(),
        ];
        for (a, b) in t.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn temporal_row_three_at_c8() {
        // ω_i = 10000^(-2i/8) = 1, 0.1, 0.01, 0.001
        let t = tpe_encode(&[1, 2, 3], &cfg(8)).unwrap();
        let row = t.row(2);
        let omegas: [f64; 4] = [1.0, 0.1, 0.01, 0.001];
        for (i, w) in omegas.iter().enumerate() {
            assert!((row[2 * i] - (3.0 * w).sin()).abs() < 1e-15);
            assert!((row[2 * i + 1] - (3.0 * w).cos()).abs() < 1e-15);
        }
    }

    #[test]
    fn single_frame_is_finite() {
        let t = tpe_encode(&[1], &cfg(16)).unwrap();
        assert_eq!(t.shape(), &[1, 16]);
        assert!(t.first_non_finite().is_none());
    }

    #[test]
    fn rejects_bad_input() {
        assert!(spe_encode(&[[1.2, 0.0]], &cfg(8)).is_err());
        assert!(spe_encode(&[[0.5, 0.5]], &cfg(6)).is_err());
        assert!(EncodingConfig::new(7).is_err());
    }
}

//! Multi-scale actor contrastive loss between the two paths of the dual
//! model.
//!
//! With `h(u, v) = exp(cos(u, v))`, the ratio `h(a, p) / Σ_t h(a, x_t)` is a
//! softmax over cosine logits, so each contrastive term is a cross-entropy
//! over a row of cosine similarities. Denominators include the positive.

use serde::{Deserialize, Serialize};

use crate::autodiff::{cosine_similarity, Tape, Var};
use crate::error::{Error, Result};
use crate::model::PathOutputs;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MacConfig {
    pub lambda_ff: f64,
    pub lambda_fv: f64,
    pub lambda_vv: f64,
}

impl Default for MacConfig {
    fn default() -> Self {
        MacConfig {
            lambda_ff: 1.0,
            lambda_fv: 1.0,
            lambda_vv: 1.0,
        }
    }
}

impl MacConfig {
    pub const OFF: MacConfig = MacConfig {
        lambda_ff: 0.0,
        lambda_fv: 0.0,
        lambda_vv: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("lambda_ff", self.lambda_ff),
            ("lambda_fv", self.lambda_fv),
            ("lambda_vv", self.lambda_vv),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {w}")));
            }
        }
        Ok(())
    }

    pub fn is_off(&self) -> bool {
        self.lambda_ff == 0.0 && self.lambda_fv == 0.0 && self.lambda_vv == 0.0
    }
}

/// Scalar loss values of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_ff: f64,
    pub l_fv: f64,
    pub l_vv: f64,
    pub l_mac: f64,
    pub l_cls: f64,
    pub total: f64,
    pub batch: usize,
}

/// `exp(cos(u, v))` per last-axis row; `[1]` for vectors.
pub fn similarity_h(tape: &mut Tape, u: Var, v: Var) -> Result<Var> {
    let c = cosine_similarity(tape, u, v)?;
    Ok(tape.exp(c))
}

fn frames_shape(tape: &Tape, x: Var) -> Result<[usize; 4]> {
    match *tape.shape(x) {
        [b, k, n, c] => Ok([b, k, n, c]),
        ref s => Err(Error::Invalid(format!("frame representations must be [B, K, N, C], got {s:?}"))),
    }
}

fn normalized(tape: &mut Tape, x: Var, what: &'static str) -> Result<Var> {
    tape.normalize(x).map_err(|e| match e {
        Error::ZeroNorm(_) => Error::ZeroNorm(what),
        e => e,
    })
}

/// Frame-frame term for `[B, K, N, C]` frames of two paths, averaged over
/// anchors `(b, n, k)` and both directions.
pub fn loss_ff(tape: &mut Tape, frames_a: Var, frames_b: Var) -> Result<Var> {
    let [b, k, n, c] = frames_shape(tape, frames_a)?;
    if tape.shape(frames_b) != tape.shape(frames_a) {
        return Err(Error::shape("loss_ff", tape.shape(frames_a), tape.shape(frames_b)));
    }
    let m = b * n;
    let per_actor = |tape: &mut Tape, x: Var| -> Result<Var> {
        let x = tape.permute(x, &[0, 2, 1, 3])?;
        let x = tape.reshape(x, &[m, k, c])?;
        normalized(tape, x, "loss_ff")
    };
    let na = per_actor(tape, frames_a)?;
    let nb = per_actor(tape, frames_b)?;
    let labels: Vec<usize> = (0..m * k).map(|r| r % k).collect();
    let mut ce = Vec::with_capacity(2);
    for (x, y) in [(na, nb), (nb, na)] {
        let cos = tape.matmul_ext(x, y, true)?;
        let cos = tape.reshape(cos, &[m * k, k])?;
        ce.push(tape.cross_entropy(cos, &labels)?);
    }
    let both = tape.add(ce[0], ce[1])?;
    Ok(tape.scale(both, 0.5))
}

/// Frame-video term: each frame of one path against the video
/// representations of every actor in the batch from the other path.
pub fn loss_fv(
    tape: &mut Tape,
    frames_a: Var,
    video_a: Var,
    frames_b: Var,
    video_b: Var,
) -> Result<Var> {
    let [b, k, n, c] = frames_shape(tape, frames_a)?;
    for (what, v) in [("frames", frames_b), ("video", video_a), ("video", video_b)] {
        let want: &[usize] = if what == "frames" { &[b, k, n, c] } else { &[b, n, c] };
        if tape.shape(v) != want {
            return Err(Error::shape("loss_fv", tape.shape(v), want));
        }
    }
    let rows = b * k * n;
    // anchor row (b, k, n) has its positive at video row b·N + n
    let labels: Vec<usize> = (0..rows).map(|r| (r / (k * n)) * n + r % n).collect();
    let mut ce = Vec::with_capacity(2);
    for (frames, video) in [(frames_a, video_b), (frames_b, video_a)] {
        let anchors = tape.reshape(frames, &[rows, c])?;
        let anchors = normalized(tape, anchors, "loss_fv")?;
        let videos = tape.reshape(video, &[b * n, c])?;
        let videos = normalized(tape, videos, "loss_fv")?;
        let cos = tape.matmul_ext(anchors, videos, true)?;
        ce.push(tape.cross_entropy(cos, &labels)?);
    }
    let both = tape.add(ce[0], ce[1])?;
    Ok(tape.scale(both, 0.5))
}

/// Video-video term `mean(1 − cos)` over the `B·N` actor pairs.
pub fn loss_vv(tape: &mut Tape, video_a: Var, video_b: Var) -> Result<Var> {
    let cos = cosine_similarity(tape, video_a, video_b).map_err(|e| match e {
        Error::ZeroNorm(_) => Error::ZeroNorm("loss_vv"),
        e => e,
    })?;
    let mean = tape.mean(cos);
    Ok(tape.affine(mean, -1.0, 1.0))
}

/// Graph nodes of the three components and their weighted sum.
#[derive(Clone, Copy, Debug)]
pub struct MacTerms {
    pub ff: Var,
    pub fv: Var,
    pub vv: Var,
    /// Weighted sum over the components with nonzero weight; a constant
    /// zero when every weight is zero.
    pub total: Var,
}

impl MacTerms {
    /// Values for logging, `l_cls` and `total` left at zero.
    pub fn breakdown(&self, tape: &Tape, batch: usize) -> LossBreakdown {
        LossBreakdown {
            l_ff: tape.item(self.ff),
            l_fv: tape.item(self.fv),
            l_vv: tape.item(self.vv),
            l_mac: tape.item(self.total),
            batch,
            ..LossBreakdown::default()
        }
    }
}

/// All components computed symmetrically on the ST and TS outputs of one
/// batch. Components with zero weight are evaluated for logging but kept
/// out of the differentiated sum.
pub fn mac_loss(
    tape: &mut Tape,
    st: &PathOutputs,
    ts: &PathOutputs,
    cfg: &MacConfig,
) -> Result<MacTerms> {
    cfg.validate()?;
    let ff = loss_ff(tape, st.enhanced, ts.enhanced)?;
    let fv = loss_fv(tape, st.enhanced, st.video, ts.enhanced, ts.video)?;
    let vv = loss_vv(tape, st.video, ts.video)?;
    let mut total: Option<Var> = None;
    for (w, term) in [(cfg.lambda_ff, ff), (cfg.lambda_fv, fv), (cfg.lambda_vv, vv)] {
        if w == 0.0 {
            continue;
        }
        let weighted = tape.scale(term, w);
        total = Some(match total {
            Some(acc) => tape.add(acc, weighted)?,
            None => weighted,
        });
    }
    let total = match total {
        Some(t) => t,
        None => tape.constant(crate::autodiff::Tensor::scalar(0.0)),
    };
    Ok(MacTerms { ff, fv, vv, total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn cos(u: &[f64], v: &[f64]) -> f64 {
        let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
        let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        dot / (nu * nv)
    }

    fn h(u: &[f64], v: &[f64]) -> f64 {
        cos(u, v).exp()
    }

    // x[b][k][n] as a slice of length c
    fn at(t: &Tensor, b: usize, k: usize, n: usize) -> &[f64] {
        let s = t.shape();
        let (kk, nn, c) = (s[1], s[2], s[3]);
        let off = ((b * kk + k) * nn + n) * c;
        &t.data()[off..off + c]
    }

    fn vid(t: &Tensor, b: usize, n: usize) -> &[f64] {
        let c = t.shape()[2];
        let off = (b * t.shape()[1] + n) * c;
        &t.data()[off..off + c]
    }

    fn brute_ff(a: &Tensor, bt: &Tensor) -> f64 {
        let [b, k, n, _] = <[usize; 4]>::try_from(a.shape()).unwrap();
        let mut total = 0.0;
        let mut count = 0.0;
        for (x, y) in [(a, bt), (bt, a)] {
            for bi in 0..b {
                for ni in 0..n {
                    for kk in 0..k {
                        let anchor = at(x, bi, kk, ni);
                        let num = h(anchor, at(y, bi, kk, ni));
                        let den: f64 = (0..k).map(|t| h(anchor, at(y, bi, t, ni))).sum();
                        total += -(num / den).ln();
                        count += 1.0;
                    }
                }
            }
        }
        total / count
    }

    fn brute_fv(fa: &Tensor, va: &Tensor, fb: &Tensor, vb: &Tensor) -> f64 {
        let [b, k, n, _] = <[usize; 4]>::try_from(fa.shape()).unwrap();
        let mut total = 0.0;
        let mut count = 0.0;
        for (f, v) in [(fa, vb), (fb, va)] {
            for bi in 0..b {
                for kk in 0..k {
                    for ni in 0..n {
                        let anchor = at(f, bi, kk, ni);
                        let num = h(anchor, vid(v, bi, ni));
                        let mut den = 0.0;
                        for bj in 0..b {
                            for nj in 0..n {
                                den += h(anchor, vid(v, bj, nj));
                            }
                        }
                        total += -(num / den).ln();
                        count += 1.0;
                    }
                }
            }
        }
        total / count
    }

    fn brute_vv(va: &Tensor, vb: &Tensor) -> f64 {
        let c = va.shape()[2];
        let rows = va.numel() / c;
        (0..rows)
            .map(|r| 1.0 - cos(&va.data()[r * c..(r + 1) * c], &vb.data()[r * c..(r + 1) * c]))
            .sum::<f64>()
            / rows as f64
    }

    #[test]
    fn brute_force_equivalence() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for b in 1..=2 {
            for k in 1..=4 {
                for n in 1..=4 {
                    let fa = random(&[b, k, n, 5], &mut rng);
                    let fb = random(&[b, k, n, 5], &mut rng);
                    let va = random(&[b, n, 5], &mut rng);
                    let vb = random(&[b, n, 5], &mut rng);
                    let mut tape = Tape::new();
                    let [xa, xb] = [fa.clone(), fb.clone()].map(|t| tape.constant(t));
                    let [ya, yb] = [va.clone(), vb.clone()].map(|t| tape.constant(t));
                    let ff = loss_ff(&mut tape, xa, xb).unwrap();
                    let fv = loss_fv(&mut tape, xa, ya, xb, yb).unwrap();
                    let vv = loss_vv(&mut tape, ya, yb).unwrap();
                    assert!((tape.item(ff) - brute_ff(&fa, &fb)).abs() <= 1e-10);
                    assert!((tape.item(fv) - brute_fv(&fa, &va, &fb, &vb)).abs() <= 1e-10);
                    assert!((tape.item(vv) - brute_vv(&va, &vb)).abs() <= 1e-10);
                }
            }
        }
    }

    #[test]
    fn h_spot_values() {
        let mut tape = Tape::new();
        let u = tape.constant(Tensor::new(&[3], vec![1.0, 2.0, -0.5]).unwrap());
        let neg = tape.constant(Tensor::new(&[3], vec![-1.0, -2.0, 0.5]).unwrap());
        let orth = tape.constant(Tensor::new(&[3], vec![2.0, -1.0, 0.0]).unwrap());
        let e = std::f64::consts::E;
        let v = similarity_h(&mut tape, u, u).unwrap();
        assert!((tape.item(v) - e).abs() < 1e-15);
        let v = similarity_h(&mut tape, u, neg).unwrap();
        assert!((tape.item(v) - 1.0 / e).abs() < 1e-15);
        let v = similarity_h(&mut tape, u, orth).unwrap();
        assert!((tape.item(v) - 1.0).abs() < 1e-15);
        let zero = tape.constant(Tensor::zeros(&[3]));
        assert!(matches!(similarity_h(&mut tape, u, zero), Err(Error::ZeroNorm(_))));
    }

    #[test]
    fn ff_spot_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut tape = Tape::new();
        let a = tape.constant(random(&[2, 1, 3, 4], &mut rng));
        let b = tape.constant(random(&[2, 1, 3, 4], &mut rng));
        let l = loss_ff(&mut tape, a, b).unwrap();
        assert_eq!(tape.item(l), 0.0);

        let row = random(&[1, 1, 1, 4], &mut rng);
        let same = Tensor::new(&[1, 3, 1, 4], row.data().repeat(3)).unwrap();
        let x = tape.constant(same.clone());
        let y = tape.constant(same);
        let l = loss_ff(&mut tape, x, y).unwrap();
        assert!((tape.item(l) - 3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn fv_spot_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::new();
        let fa = tape.constant(random(&[1, 3, 1, 4], &mut rng));
        let fb = tape.constant(random(&[1, 3, 1, 4], &mut rng));
        let va = tape.constant(random(&[1, 1, 4], &mut rng));
        let vb = tape.constant(random(&[1, 1, 4], &mut rng));
        let l = loss_fv(&mut tape, fa, va, fb, vb).unwrap();
        assert_eq!(tape.item(l), 0.0);

        // two actors: the anchor equals its positive and is opposite the negative
        let f = Tensor::new(&[1, 1, 2, 2], vec![1.0, 0.0, -1.0, 0.0]).unwrap();
        let v = Tensor::new(&[1, 2, 2], vec![1.0, 0.0, -1.0, 0.0]).unwrap();
        let (f1, f2) = (tape.constant(f.clone()), tape.constant(f));
        let (v1, v2) = (tape.constant(v.clone()), tape.constant(v));
        let l = loss_fv(&mut tape, f1, v1, f2, v2).unwrap();
        let e = std::f64::consts::E;
        let expect = -(e / (e + 1.0 / e)).ln();
        assert!((tape.item(l) - expect).abs() < 1e-15);
        assert!((expect - 0.126_928_011_042_972_6).abs() < 1e-15);
    }

    #[test]
    fn vv_spot_values_and_scale_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let va = random(&[2, 3, 5], &mut rng);
        let vb = random(&[2, 3, 5], &mut rng);
        let mut tape = Tape::new();
        let a = tape.constant(va.clone());
        let l = loss_vv(&mut tape, a, a).unwrap();
        assert!(tape.item(l).abs() < 1e-15);
        let neg = tape.scale(a, -1.0);
        let l = loss_vv(&mut tape, a, neg).unwrap();
        assert!((tape.item(l) - 2.0).abs() < 1e-15);

        let b = tape.constant(vb);
        let base = loss_vv(&mut tape, a, b).unwrap();
        let a3 = tape.scale(a, 3.7);
        let scaled = loss_vv(&mut tape, a3, b).unwrap();
        assert!((tape.item(base) - tape.item(scaled)).abs() <= 1e-12);
        assert!((0.0..=2.0).contains(&tape.item(base)));
    }

    #[test]
    fn weights_and_symmetry() {
        use crate::model::PathKind;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut tape = Tape::new();
        let mut path = |tape: &mut Tape, kind| {
            let enhanced = tape.constant(random(&[2, 3, 4, 6], &mut rng));
            let video = tape.mean_axis(enhanced, 1).unwrap();
            PathOutputs {
                path: kind,
                enhanced,
                video,
                traces: Vec::new(),
            }
        };
        let st = path(&mut tape, PathKind::ST);
        let ts = path(&mut tape, PathKind::TS);
        let all = mac_loss(&mut tape, &st, &ts, &MacConfig::default()).unwrap();
        let sum = tape.item(all.ff) + tape.item(all.fv) + tape.item(all.vv);
        assert_eq!(tape.item(all.total), sum);
        let swapped = mac_loss(&mut tape, &ts, &st, &MacConfig::default()).unwrap();
        assert_eq!(tape.item(swapped.total), tape.item(all.total));

        let off = mac_loss(&mut tape, &st, &ts, &MacConfig::OFF).unwrap();
        assert_eq!(tape.item(off.total), 0.0);
        assert!(MacConfig { lambda_ff: -1.0, ..MacConfig::default() }.validate().is_err());
    }
}

//! Central-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::params::{Bindings, ModelParams};
use super::tape::{BackwardFault, Tape, Var};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Tensors larger than this are checked on a seeded random subsample.
    pub max_coords: usize,
    pub seed: u64,
    /// Denominator floor of the relative error.
    pub abs_floor: f64,
    pub fault: Option<BackwardFault>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            tolerance: 1e-4,
            max_coords: 256,
            seed: 0,
            abs_floor: 1e-6,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub numel: usize,
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub worst_index: usize,
}

impl TensorCheck {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_err <= tolerance
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.passed(self.tolerance))
    }

    pub fn max_rel_err(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &TensorCheck> {
        self.tensors.iter().filter(|t| !t.passed(self.tolerance))
    }
}

/// `|a - n| / max(|a|, |n|, floor)`
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the tape gradient of the scalar `f` against central differences
/// for every parameter tensor in `params`.
pub fn finite_difference_check<F>(
    f: F,
    params: &ModelParams,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &Bindings) -> Result<Var>,
{
    let mut tape = match opts.fault {
        Some(fault) => Tape::with_fault(fault),
        None => Tape::new(),
    };
    let bindings = params.bind(&mut tape);
    let loss = f(&mut tape, &bindings)?;
    tape.backward(loss)?;

    let eval = |p: &ModelParams| -> Result<f64> {
        let mut t = Tape::new();
        let b = p.bind_frozen(&mut t);
        let l = f(&mut t, &b)?;
        Ok(t.item(l))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = params.clone();
    let mut tensors = Vec::new();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let var = bindings.get(&name)?;
        let analytic = tape.grad(var).expect("bound as parameter").to_vec();
        let numel = analytic.len();
        let coords: Vec<usize> = if numel > opts.max_coords {
            let mut c = sample(&mut rng, numel, opts.max_coords).into_vec();
            c.sort_unstable();
            c
        } else {
            (0..numel).collect()
        };

        let mut report = TensorCheck {
            name: name.clone(),
            numel,
            checked: coords.len(),
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            worst_index: 0,
        };
        for &i in &coords {
            let orig = work.get(&name).unwrap().data()[i];
            let plus = orig + opts.step;
            let minus = orig - opts.step;
            work.get_mut(&name).unwrap().data_mut()[i] = plus;
            let fp = eval(&work)?;
            work.get_mut(&name).unwrap().data_mut()[i] = minus;
            let fm = eval(&work)?;
            work.get_mut(&name).unwrap().data_mut()[i] = orig;

            // divide by the representable step actually taken
            let numeric = (fp - fm) / (plus - minus);
            let abs = (analytic[i] - numeric).abs();
            let rel = relative_error(analytic[i], numeric, opts.abs_floor);
            report.max_abs_err = report.max_abs_err.max(abs);
            if rel > report.max_rel_err || (rel.is_nan() && !report.max_rel_err.is_nan()) {
                report.max_rel_err = rel;
                report.worst_index = i;
            }
        }
        tensors.push(report);
    }
    Ok(GradCheckReport {
        tolerance: opts.tolerance,
        tensors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn params(entries: &[(&str, &[usize], &[f64])]) -> ModelParams {
        let mut p = ModelParams::new();
        for (name, shape, data) in entries {
            p.insert(*name, Tensor::new(shape, data.to_vec()).unwrap()).unwrap();
        }
        p
    }

    #[test]
    fn sum_is_exact() {
        let p = params(&[("w", &[2, 3], &[0.3, -0.1, 0.25, 0.8, -0.6, 0.05])]);
        let r = finite_difference_check(
            |t, b| Ok(t.sum(b.get("w")?)),
            &p,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_err() <= 1e-10, "{}", r.max_rel_err());
    }

    #[test]
    fn cross_entropy_toy() {
        let p = params(&[
            ("x", &[3, 4], &[0.2, -0.5, 1.1, 0.4, -1.3, 0.7, 0.0, 0.9, 0.6, 0.3, -0.2, -0.8]),
            ("w", &[4, 3], &[0.5, -0.3, 0.8, 0.1, 0.9, -0.4, -0.7, 0.2, 0.6, 0.3, -0.1, 0.4]),
        ]);
        let r = finite_difference_check(
            |t, b| {
                let z = t.matmul(b.get("x")?, b.get("w")?)?;
                t.cross_entropy(z, &[0, 2, 1])
            },
            &p,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_err() <= 1e-6, "{}", r.max_rel_err());
    }

    #[test]
    fn subsamples_large_tensors() {
        let data: Vec<f64> = (0..600).map(|i| (i as f64 * 0.37).sin()).collect();
        let p = params(&[("big", &[600], &data)]);
        let r = finite_difference_check(
            |t, b| {
                let x = b.get("big")?;
                let sq = t.mul(x, x)?;
                Ok(t.sum(sq))
            },
            &p,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(r.tensors[0].checked, 256);
        assert!(r.passed());
    }

    #[test]
    fn corrupted_rule_is_caught() {
        let p = params(&[
            ("x", &[2, 3], &[0.2, -0.5, 1.1, 0.4, -1.3, 0.7]),
            ("w", &[3, 2], &[0.5, -0.3, 0.8, 0.1, 0.9, -0.4]),
        ]);
        let opts = GradCheckOptions {
            fault: Some(BackwardFault::MatmulRhs(1.001)),
            ..Default::default()
        };
        let r = finite_difference_check(
            |t, b| {
                let z = t.matmul(b.get("x")?, b.get("w")?)?;
                t.cross_entropy(z, &[0, 1])
            },
            &p,
            &opts,
        )
        .unwrap();
        assert!(!r.passed());
        let failed: Vec<_> = r.failures().map(|t| t.name.as_str()).collect();
        assert_eq!(failed, vec!["w"]);
    }
}

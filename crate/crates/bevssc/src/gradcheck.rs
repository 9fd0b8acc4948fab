//! Central-finite-difference verification of tape gradients.
//!
//! Every differentiable operation in the crate is checked against this
//! harness (see the `gradcheck` CLI verb and the acceptance suite). The
//! analytic side comes from [`Tape::backward`]; the numeric side re-runs the
//! forward pass with per-coordinate perturbations.

use ndarray::ArrayD;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::tape::{NodeId, Tape};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub coords_checked: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Max coordinates sampled per input tensor.
    pub samples_per_input: usize,
    pub seed: u64,
    pub tolerance: f64,
    pub step: f64,
    /// Test fixture: scales analytic gradients to demonstrate that corrupted
    /// gradients are reported as failures.
    pub corrupt_scale: Option<f64>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            samples_per_input: 24,
            seed: 0,
            tolerance: 1e-4,
            step: 1e-5,
            corrupt_scale: None,
        }
    }
}

/// Check `f` (a scalar-valued tape program over the given inputs) by central
/// differences at a sampled subset of input coordinates.
pub fn check_gradient<F>(
    name: &str,
    inputs: &[ArrayD<f64>],
    f: F,
    opts: &GradCheckOptions,
) -> GradCheckReport
where
    F: Fn(&mut Tape<f64>, &[NodeId]) -> NodeId,
{
    let eval = |arrays: &[ArrayD<f64>]| -> f64 {
        let mut tape: Tape<f64> = Tape::new();
        let ids: Vec<NodeId> = arrays.iter().map(|a| tape.var(a.clone())).collect();
        let root = f(&mut tape, &ids);
        tape.scalar_value(root)
    };

    // Analytic gradients from one taped run.
    let mut tape: Tape<f64> = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|a| tape.var(a.clone())).collect();
    let root = f(&mut tape, &ids);
    let grads = tape.backward(root);
    let analytic: Vec<ArrayD<f64>> = ids.iter().map(|&id| grads.wrt(&tape, id)).collect();

    let mut rng = ChaCha20Rng::seed_from_u64(opts.seed);
    let mut max_rel_err = 0.0f64;
    let mut checked = 0usize;

    for (k, input) in inputs.iter().enumerate() {
        let n = input.len();
        if n == 0 {
            continue;
        }
        let mut coords: Vec<usize> = (0..n).collect();
        coords.shuffle(&mut rng);
        coords.truncate(opts.samples_per_input.min(n));

        for &flat in &coords {
            let base = input.as_slice().expect("contiguous input")[flat];
            let h = opts.step * base.abs().max(1.0);

            let mut plus = inputs.to_vec();
            plus[k].as_slice_mut().unwrap()[flat] = base + h;
            let mut minus = inputs.to_vec();
            minus[k].as_slice_mut().unwrap()[flat] = base - h;

            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let mut a = analytic[k].as_slice().unwrap()[flat];
            if let Some(s) = opts.corrupt_scale {
                a *= s;
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            max_rel_err = max_rel_err.max(rel);
            checked += 1;
        }
    }

    GradCheckReport {
        name: name.to_string(),
        max_rel_err,
        coords_checked: checked,
        tolerance: opts.tolerance,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use rand::Rng;

    fn randn(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn elementwise_chain_passes() {
        let inputs = vec![randn(&[3, 4], 1), randn(&[3, 4], 2)];
        let rep = check_gradient(
            "chain",
            &inputs,
            |t, ids| {
                let p = t.mul(ids[0], ids[1]);
                let s = t.sigmoid(p);
                let e = t.exp(s);
                t.mean_all(e)
            },
            &GradCheckOptions::default(),
        );
        assert!(rep.passed(), "max rel err {}", rep.max_rel_err);
    }

    #[test]
    fn conv_softmax_passes() {
        let inputs = vec![randn(&[2, 6, 6], 3), randn(&[3, 2, 3, 3], 4), randn(&[3], 5)];
        let rep = check_gradient(
            "conv_softmax",
            &inputs,
            |t, ids| {
                let y = t.conv2d(ids[0], ids[1], Some(ids[2]), 2, 1);
                let y = t.relu(y);
                let flat = t.reshape(y, &[3, 9]);
                let sm = t.log_softmax(flat, 0);
                t.mean_all(sm)
            },
            &GradCheckOptions::default(),
        );
        assert!(rep.passed(), "max rel err {}", rep.max_rel_err);
    }

    #[test]
    fn matmul_scatter_passes() {
        let inputs = vec![randn(&[3, 5], 6), randn(&[5, 4], 7)];
        let rep = check_gradient(
            "matmul_scatter",
            &inputs,
            |t, ids| {
                let m = t.matmul(ids[0], ids[1]);
                let sc = t.scatter_columns(m, vec![0, 1, -1, 0], 2);
                let a = t.abs(sc);
                t.sum_all(a)
            },
            &GradCheckOptions::default(),
        );
        assert!(rep.passed(), "max rel err {}", rep.max_rel_err);
    }

    #[test]
    fn corrupted_gradient_is_reported() {
        let inputs = vec![randn(&[4, 4], 8)];
        let opts = GradCheckOptions {
            corrupt_scale: Some(1.5),
            ..Default::default()
        };
        let rep = check_gradient(
            "corrupted",
            &inputs,
            |t, ids| {
                let s = t.sigmoid(ids[0]);
                t.mean_all(s)
            },
            &opts,
        );
        assert!(!rep.passed());
    }

    #[test]
    fn report_is_deterministic_per_seed() {
        let inputs = vec![randn(&[4, 4], 9)];
        let run = || {
            check_gradient(
                "det",
                &inputs,
                |t, ids| {
                    let s = t.relu(ids[0]);
                    t.mean_all(s)
                },
                &GradCheckOptions::default(),
            )
        };
        assert_eq!(run().max_rel_err.to_bits(), run().max_rel_err.to_bits());
    }
}

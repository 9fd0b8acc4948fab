//! Task losses for scene completion: voxel cross-entropy, geometric and
//! semantic scene-class affinity terms, and their sum.
//!
//! The affinity terms are built from soft precision/recall/specificity per
//! class; the geometric variant collapses every semantic class into a single
//! occupancy "class". Logs are floored at `SCAL_EPS` so a perfect prediction
//! scores exactly zero.

use ndarray::{ArrayD, IxDyn};

use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};
use crate::types::VoxelGrid;

/// Log floor inside the affinity terms.
pub const SCAL_EPS: f64 = 1e-6;

/// Evaluated loss with named sub-terms.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub components: Vec<(String, f64)>,
    /// Set when a loss was defined as 0 for lack of any supervised position.
    pub warning: bool,
}

impl LossValue {
    pub fn from_components(components: Vec<(String, f64)>) -> Self {
        let total = components.iter().map(|(_, v)| v).sum();
        LossValue {
            total,
            components,
            warning: false,
        }
    }

    pub fn component(&self, name: &str) -> Option<f64> {
        self.components
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScalMode {
    Geo,
    Sem,
}

/// Reshape raw head logits `((C·Z), H, W)` into a `(C, Z·H·W)` class matrix.
/// The channel layout is class-major over Z.
pub fn logits_to_class_matrix<S: Scalar>(
    tape: &mut Tape<S>,
    logits: NodeId,
    num_classes: usize,
    z: usize,
) -> NodeId {
    let shape = tape.value(logits).shape().to_vec();
    assert_eq!(shape.len(), 3, "head logits must be ((C*Z), H, W)");
    assert_eq!(shape[0], num_classes * z, "channel count != C*Z");
    let (h, w) = (shape[1], shape[2]);
    tape.reshape(logits, &[num_classes, z * h * w])
}

/// Per-voxel class targets in `(z, h, w)` flattening order; ignored labels
/// (noise by default) become -1.
pub fn class_targets(gt: &VoxelGrid, ignore: &[u16]) -> Vec<i64> {
    gt.labels
        .iter()
        .map(|&l| {
            if ignore.contains(&l) {
                -1
            } else {
                l as i64
            }
        })
        .collect()
}

/// Mean cross-entropy over non-ignored voxels. `class_logits` is `(C, N)`.
pub fn ce_loss<S: Scalar>(
    tape: &mut Tape<S>,
    class_logits: NodeId,
    gt: &VoxelGrid,
    ignore: &[u16],
) -> NodeId {
    let targets = class_targets(gt, ignore);
    assert_eq!(targets.len(), tape.value(class_logits).shape()[1]);
    tape.cross_entropy_mean(class_logits, targets)
}

/// Scene-class affinity loss on softmaxed probabilities `(C, N)`.
pub fn scal_loss<S: Scalar>(
    tape: &mut Tape<S>,
    probs: NodeId,
    gt: &VoxelGrid,
    mode: ScalMode,
) -> NodeId {
    let (c, n) = {
        let s = tape.value(probs).shape();
        (s[0], s[1])
    };
    assert_eq!(n, gt.labels.len());
    assert_eq!(c, gt.table.num_channels());

    let labels: Vec<u16> = gt.labels.iter().copied().collect();
    let valid: Vec<bool> = labels.iter().map(|&l| !gt.table.is_noise(l)).collect();

    // Soft prediction per "class" and binary ground truth per class.
    let class_preds: Vec<(NodeId, Vec<bool>)> = match mode {
        ScalMode::Geo => {
            // occupancy prob = sum of semantic channels
            let mut occ: Option<NodeId> = None;
            for ch in gt.table.semantic_ids() {
                let row = tape.index_axis(probs, 0, ch as usize);
                occ = Some(match occ {
                    Some(acc) => tape.add(acc, row),
                    None => row,
                });
            }
            let occ = occ.expect("at least one semantic class");
            let gt_occ: Vec<bool> = labels.iter().map(|&l| gt.table.is_semantic(l)).collect();
            vec![(occ, gt_occ)]
        }
        ScalMode::Sem => {
            let mut present: Vec<usize> = Vec::new();
            for ch in 0..c {
                let has = labels
                    .iter()
                    .zip(&valid)
                    .any(|(&l, &v)| v && l as usize == ch);
                if has {
                    present.push(ch);
                }
            }
            present
                .into_iter()
                .map(|ch| {
                    let row = tape.index_axis(probs, 0, ch);
                    let gt_c: Vec<bool> = labels.iter().map(|&l| l as usize == ch).collect();
                    (row, gt_c)
                })
                .collect()
        }
    };

    let valid_arr: ArrayD<S> = ArrayD::from_shape_vec(
        IxDyn(&[n]),
        valid
            .iter()
            .map(|&v| if v { S::one() } else { S::zero() })
            .collect(),
    )
    .unwrap();
    let valid_node = tape.constant(valid_arr.clone());

    let eps = S::c(SCAL_EPS);
    let mut total: Option<NodeId> = None;
    let n_terms = class_preds.len();
    for (p, gt_mask) in class_preds {
        let pos: ArrayD<S> = ArrayD::from_shape_vec(
            IxDyn(&[n]),
            gt_mask
                .iter()
                .zip(&valid)
                .map(|(&g, &v)| if g && v { S::one() } else { S::zero() })
                .collect(),
        )
        .unwrap();
        let n_pos = pos.iter().copied().sum::<S>().to_f64_lossy();
        let n_valid = valid.iter().filter(|&&v| v).count() as f64;
        let n_neg = n_valid - n_pos;
        debug_assert!(n_pos > 0.0, "class without support reached scal term");

        let pos_node = tape.constant(pos);
        let masked_p = tape.mul(p, valid_node);

        // precision = Σ p·g / Σ p over valid voxels
        let tp_vec = tape.mul(p, pos_node);
        let tp = tape.sum_all(tp_vec);
        let pred_sum = tape.sum_all(masked_p);
        let precision = tape.div(tp, pred_sum);
        let recall = tape.mul_scalar(tp, S::c(1.0 / n_pos));

        let lp = tape.ln_clamp(precision, eps);
        let lr = tape.ln_clamp(recall, eps);
        let mut term = tape.add(lp, lr);

        if n_neg > 0.0 {
            // specificity = Σ (1-p)·(1-g) / Σ (1-g) over valid voxels
            let ones = tape.constant(ArrayD::from_elem(IxDyn(&[n]), S::one()));
            let inv_p = tape.sub(ones, p);
            let neg_mask: ArrayD<S> = ArrayD::from_shape_vec(
                IxDyn(&[n]),
                gt_mask
                    .iter()
                    .zip(&valid)
                    .map(|(&g, &v)| if !g && v { S::one() } else { S::zero() })
                    .collect(),
            )
            .unwrap();
            let neg_node = tape.constant(neg_mask);
            let tn_vec = tape.mul(inv_p, neg_node);
            let tn = tape.sum_all(tn_vec);
            let specificity = tape.mul_scalar(tn, S::c(1.0 / n_neg));
            let ls = tape.ln_clamp(specificity, eps);
            term = tape.add(term, ls);
        }

        let neg_term = tape.neg(term);
        total = Some(match total {
            Some(acc) => tape.add(acc, neg_term),
            None => neg_term,
        });
    }

    match total {
        Some(t) => tape.mul_scalar(t, S::c(1.0 / n_terms as f64)),
        None => tape.constant(ArrayD::from_elem(IxDyn(&[]), S::zero())),
    }
}

/// Node handles for the combined task loss.
pub struct BevLossNodes {
    pub total: NodeId,
    pub ce: NodeId,
    pub scal_geo: NodeId,
    pub scal_sem: NodeId,
}

/// ce + geo affinity + sem affinity on raw head logits `((C·Z), H, W)`.
pub fn bev_loss<S: Scalar>(tape: &mut Tape<S>, head_logits: NodeId, gt: &VoxelGrid) -> BevLossNodes {
    let c = gt.table.num_channels();
    let z = gt.grid.z_dim();
    let mat = logits_to_class_matrix(tape, head_logits, c, z);
    let ignore: Vec<u16> = gt.table.noise_id.into_iter().collect();
    let ce = ce_loss(tape, mat, gt, &ignore);
    let probs = tape.softmax(mat, 0);
    let scal_geo = scal_loss(tape, probs, gt, ScalMode::Geo);
    let scal_sem = scal_loss(tape, probs, gt, ScalMode::Sem);
    let partial = tape.add(ce, scal_geo);
    let total = tape.add(partial, scal_sem);
    BevLossNodes {
        total,
        ce,
        scal_geo,
        scal_sem,
    }
}

impl BevLossNodes {
    pub fn to_loss_value<S: Scalar>(&self, tape: &Tape<S>) -> LossValue {
        LossValue::from_components(vec![
            ("ce".into(), tape.scalar_value(self.ce).to_f64_lossy()),
            (
                "scal_geo".into(),
                tape.scalar_value(self.scal_geo).to_f64_lossy(),
            ),
            (
                "scal_sem".into(),
                tape.scalar_value(self.scal_sem).to_f64_lossy(),
            ),
        ])
    }
}

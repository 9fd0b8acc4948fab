//! Cross-modal knowledge distillation: masked residual feature alignment
//! (CMRD), BEV relation distillation over cosine affinity matrices (BRD),
//! predictive distribution distillation (PDD), and the weighted overall
//! objective.
//!
//! Teacher tensors are expected to enter the tape as constants; the
//! stop-gradient contract is structural, not a runtime mask.

use ndarray::{Array2, ArrayD, IxDyn};
use rand_chacha::ChaCha20Rng;

use crate::losses::LossValue;
use crate::nn::{conv, conv_relu, ParamBinding, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};
use crate::types::VoxelGrid;

/// ε used in cosine denominators and distribution guards.
pub const KD_EPS: f64 = 1e-8;

/// Weights and routing for the distillation terms.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct KdParams {
    pub lambda_bev: f64,
    pub lambda_cmrd: f64,
    pub lambda_brd: f64,
    pub lambda_pdd: f64,
    pub lambda_aux: f64,
    /// Scales whose tapped features feed the residual feature alignment.
    pub cmrd_scales: Vec<usize>,
    /// Scales whose tapped features feed relation distillation.
    pub brd_scales: Vec<usize>,
    /// Common resolution both maps are resized to before the affinity matrix.
    pub brd_resize: (usize, usize),
    /// Swap the KL argument order (teacher-led instead of student-led).
    pub kl_reverse: bool,
    /// Let the aligned student feature replace the tapped one downstream.
    pub cmrd_replace: bool,
    /// Allow BRD even when the student has no camera stream (ablations only;
    /// by default it is restricted to the radar-camera student).
    pub brd_without_camera: bool,
}

impl Default for KdParams {
    fn default() -> Self {
        KdParams {
            lambda_bev: 1.0,
            lambda_cmrd: 1.0,
            lambda_brd: 1.0,
            lambda_pdd: 1.0,
            lambda_aux: 1.0,
            cmrd_scales: vec![0, 1, 2],
            brd_scales: vec![0, 2, 3],
            brd_resize: (16, 16),
            kl_reverse: false,
            cmrd_replace: true,
            brd_without_camera: false,
        }
    }
}

/// Binary BEV occupancy plane at a given scale.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OccupancyMask {
    pub mask: Array2<bool>,
    pub scale: usize,
}

impl OccupancyMask {
    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// A BEV cell is occupied iff its pillar holds at least one voxel that is
/// neither empty nor noise; coarser scales are logical-OR pooled 2×2.
pub fn build_occupancy_mask(gt: &VoxelGrid, scale: usize) -> OccupancyMask {
    let (z, h, w) = gt.grid.dims();
    let mut mask = Array2::from_elem((h, w), false);
    for hi in 0..h {
        for wi in 0..w {
            for zi in 0..z {
                if gt.table.is_semantic(gt.labels[[zi, hi, wi]]) {
                    mask[[hi, wi]] = true;
                    break;
                }
            }
        }
    }
    for _ in 0..scale {
        let (ph, pw) = mask.dim();
        mask = Array2::from_shape_fn((ph / 2, pw / 2), |(u, v)| {
            mask[[2 * u, 2 * v]]
                || mask[[2 * u, 2 * v + 1]]
                || mask[[2 * u + 1, 2 * v]]
                || mask[[2 * u + 1, 2 * v + 1]]
        });
    }
    OccupancyMask { mask, scale }
}

/// Allocate the per-scale projector (two 1×1 convs, hidden width = teacher
/// channels) and the gate conv used to re-inject the aligned feature.
pub fn init_cmrd_params<S: Scalar>(
    store: &mut ParamStore<S>,
    scale: usize,
    c_student: usize,
    c_teacher: usize,
    rng: &mut ChaCha20Rng,
) {
    store.init_conv(&format!("cmrd.s{scale}.proj1"), c_teacher, c_student, 1, rng);
    store.init_conv(&format!("cmrd.s{scale}.proj2"), c_teacher, c_teacher, 1, rng);
    store.init_conv(&format!("cmrd.s{scale}.gate"), c_teacher, c_teacher, 1, rng);
}

/// Mean of (1 − cosine) between per-position feature vectors of two
/// `(C, H, W)` maps, restricted to masked positions. Zero when the mask is
/// empty.
pub fn masked_cosine_loss<S: Scalar>(
    tape: &mut Tape<S>,
    a: NodeId,
    b: NodeId,
    mask: &OccupancyMask,
) -> NodeId {
    let shape = tape.value(a).shape().to_vec();
    assert_eq!(shape, tape.value(b).shape().to_vec());
    assert_eq!(shape.len(), 3);
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    assert_eq!(mask.mask.dim(), (h, w));
    let k = h * w;

    let am = tape.reshape(a, &[c, k]);
    let bm = tape.reshape(b, &[c, k]);
    let dot_vec = tape.mul(am, bm);
    let dot = tape.sum_axis(dot_vec, 0);
    let a2 = tape.mul(am, am);
    let na2 = tape.sum_axis(a2, 0);
    let b2 = tape.mul(bm, bm);
    let nb2 = tape.sum_axis(b2, 0);
    let na = tape.sqrt_eps(na2, S::zero());
    let nb = tape.sqrt_eps(nb2, S::zero());
    let prod = tape.mul(na, nb);
    let denom = tape.max_scalar(prod, S::c(KD_EPS));
    let cos = tape.div(dot, denom);
    let neg = tape.neg(cos);
    let one_minus = tape.add_scalar(neg, S::one());

    let count = mask.count();
    let m: ArrayD<S> = ArrayD::from_shape_vec(
        IxDyn(&[k]),
        mask.mask
            .iter()
            .map(|&v| if v { S::one() } else { S::zero() })
            .collect(),
    )
    .unwrap();
    let m_node = tape.constant(m);
    let masked = tape.mul(one_minus, m_node);
    let sum = tape.sum_all(masked);
    tape.mul_scalar(sum, S::c(1.0 / count.max(1) as f64))
}

/// Outputs of the residual feature alignment at one scale.
pub struct CmrdOutput {
    pub loss: NodeId,
    /// Projected student feature (teacher channel count).
    pub projected: NodeId,
    /// Student feature with the gated projection added back.
    pub f_star: NodeId,
}

/// Align a student map to a frozen teacher map at occupied positions and
/// return the re-injected student feature.
pub fn cmrd_loss<S: Scalar>(
    tape: &mut Tape<S>,
    bind: &ParamBinding,
    scale: usize,
    f_student: NodeId,
    f_teacher: NodeId,
    mask: &OccupancyMask,
) -> CmrdOutput {
    let p1 = format!("cmrd.s{scale}.proj1");
    let p2 = format!("cmrd.s{scale}.proj2");
    let gate_name = format!("cmrd.s{scale}.gate");
    let hidden = conv_relu(tape, bind, &p1, f_student, 1, 0);
    let projected = conv(tape, bind, &p2, hidden, 1, 0);
    let loss = masked_cosine_loss(tape, projected, f_teacher, mask);
    let gate_logits = conv(tape, bind, &gate_name, projected, 1, 0);
    let gate = tape.sigmoid(gate_logits);
    let gated = tape.mul(projected, gate);
    let f_star = tape.add(f_student, gated);
    CmrdOutput {
        loss,
        projected,
        f_star,
    }
}

/// Pairwise cosine similarity between the K = H·W position vectors of a
/// `(C, H, W)` map. Zero-norm positions yield all-zero rows/columns.
pub fn affinity_matrix<S: Scalar>(tape: &mut Tape<S>, f: NodeId) -> NodeId {
    let shape = tape.value(f).shape().to_vec();
    assert_eq!(shape.len(), 3);
    let (c, k) = (shape[0], shape[1] * shape[2]);
    let fm = tape.reshape(f, &[c, k]);
    let ft = tape.transpose2(fm);
    let gram = tape.matmul(ft, fm);
    let sq = tape.mul(fm, fm);
    let n2 = tape.sum_axis(sq, 0);
    let n = tape.sqrt_eps(n2, S::zero());
    let rows = tape.broadcast_axis(n, 1, k);
    let cols = tape.broadcast_axis(n, 0, k);
    let outer = tape.mul(rows, cols);
    let denom = tape.max_scalar(outer, S::c(KD_EPS));
    tape.div(gram, denom)
}

/// Mean |C_S − C_T| over all entries of the two affinity matrices, after
/// both maps are resized to a shared resolution.
pub fn brd_loss<S: Scalar>(
    tape: &mut Tape<S>,
    f_student: NodeId,
    f_teacher: NodeId,
    resize: (usize, usize),
) -> NodeId {
    let rs = tape.bilinear_resize(f_student, resize.0, resize.1);
    let rt = tape.bilinear_resize(f_teacher, resize.0, resize.1);
    let cs = affinity_matrix(tape, rs);
    let ct = affinity_matrix(tape, rt);
    let diff = tape.sub(cs, ct);
    let ad = tape.abs(diff);
    tape.mean_all(ad)
}

/// Per-voxel KL divergence between the class distributions of two `(C, N)`
/// logit matrices, averaged over voxels. Student leads by default;
/// `reverse` swaps the arguments (gradients still reach only the student).
pub fn pdd_loss<S: Scalar>(
    tape: &mut Tape<S>,
    student_logits: NodeId,
    teacher_logits: NodeId,
    reverse: bool,
) -> NodeId {
    let shape = tape.value(student_logits).shape().to_vec();
    assert_eq!(shape, tape.value(teacher_logits).shape().to_vec());
    assert_eq!(shape.len(), 2);
    let n = shape[1];
    let ls = tape.log_softmax(student_logits, 0);
    let lt = tape.log_softmax(teacher_logits, 0);
    let integrand = if reverse {
        let t = tape.softmax(teacher_logits, 0);
        let diff = tape.sub(lt, ls);
        tape.mul(t, diff)
    } else {
        let s = tape.softmax(student_logits, 0);
        let diff = tape.sub(ls, lt);
        tape.mul(s, diff)
    };
    let total = tape.sum_all(integrand);
    tape.mul_scalar(total, S::c(1.0 / n as f64))
}

/// Node handles for the weighted overall objective.
pub struct TotalLossNodes {
    pub total: NodeId,
    pub terms: Vec<(String, NodeId, f64)>,
}

/// λ₁·task + λ₂·cmrd + λ₃·brd + λ₄·pdd + λ₅·(aux_c + aux_s), with absent
/// terms dropped.
pub fn total_loss<S: Scalar>(
    tape: &mut Tape<S>,
    task: NodeId,
    cmrd: Option<NodeId>,
    brd: Option<NodeId>,
    pdd: Option<NodeId>,
    aux: Option<(NodeId, NodeId)>,
    params: &KdParams,
) -> TotalLossNodes {
    let mut terms: Vec<(String, NodeId, f64)> = vec![("bev".into(), task, params.lambda_bev)];
    if let Some(c) = cmrd {
        terms.push(("cmrd".into(), c, params.lambda_cmrd));
    }
    if let Some(b) = brd {
        terms.push(("brd".into(), b, params.lambda_brd));
    }
    if let Some(p) = pdd {
        terms.push(("pdd".into(), p, params.lambda_pdd));
    }
    if let Some((lc, ls)) = aux {
        let s = tape.add(lc, ls);
        terms.push(("aux".into(), s, params.lambda_aux));
    }
    let mut total: Option<NodeId> = None;
    for &(_, node, lambda) in &terms {
        let weighted = tape.mul_scalar(node, S::c(lambda));
        total = Some(match total {
            Some(acc) => tape.add(acc, weighted),
            None => weighted,
        });
    }
    TotalLossNodes {
        total: total.expect("at least the task term"),
        terms,
    }
}

impl TotalLossNodes {
    pub fn to_loss_value<S: Scalar>(&self, tape: &Tape<S>) -> LossValue {
        let components = self
            .terms
            .iter()
            .map(|(name, node, lambda)| {
                (
                    name.clone(),
                    lambda * tape.scalar_value(*node).to_f64_lossy(),
                )
            })
            .collect();
        LossValue::from_components(components)
    }
}

//! Point branch: pillarize a LiDAR/radar cloud into a scale-0 BEV plane and
//! encode it into multi-scale features, with optional occupancy/semantic
//! auxiliary heads at scale 0.

use ndarray::{Array3, ArrayD, IxDyn};
use rand_chacha::ChaCha20Rng;

use crate::nn::{conv, conv_relu, ParamBinding, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};
use crate::types::{BevFeatureMap, GridConfig, PointCloud, PointKind, VoxelGrid};

/// Pillar feature width per sensor kind.
pub fn pillar_channels(kind: PointKind) -> usize {
    match kind {
        // log1p(count), mean z, max z
        PointKind::Lidar => 3,
        // + mean σ, mean |v|, mean velocity direction (x, y)
        PointKind::Radar => 7,
    }
}

/// Aggregate a point cloud into per-pillar features on the scale-0 BEV plane.
/// Out-of-range points are dropped; empty pillars stay zero. Per-pillar rows
/// are sorted before reduction so the output is bit-identical under any
/// permutation of the input points.
pub fn pillarize<S: Scalar>(cloud: &PointCloud, grid: &GridConfig) -> BevFeatureMap<S> {
    let (h, w) = grid.bev_dims_at_scale(0);
    let c = pillar_channels(cloud.kind);
    let mut buckets: Vec<Vec<Vec<f64>>> = vec![Vec::new(); h * w];
    for row in cloud.points.rows() {
        if let Some((_, hi, wi)) = grid.world_to_voxel(row[0], row[1], row[2]) {
            buckets[hi * w + wi].push(row.to_vec());
        }
    }
    let mut data = Array3::<S>::zeros((c, h, w));
    for (flat, bucket) in buckets.iter_mut().enumerate() {
        if bucket.is_empty() {
            continue;
        }
        bucket.sort_by(|a, b| a.partial_cmp(b).expect("finite rows"));
        let (hi, wi) = (flat / w, flat % w);
        let n = bucket.len() as f64;
        let mean_z = bucket.iter().map(|p| p[2]).sum::<f64>() / n;
        let max_z = bucket.iter().map(|p| p[2]).fold(f64::NEG_INFINITY, f64::max);
        data[[0, hi, wi]] = S::c((1.0 + bucket.len() as f64).ln());
        data[[1, hi, wi]] = S::c(mean_z);
        data[[2, hi, wi]] = S::c(max_z);
        if cloud.kind == PointKind::Radar {
            let mean_sigma = bucket.iter().map(|p| p[3]).sum::<f64>() / n;
            let mut mag = 0.0;
            let mut dir = (0.0, 0.0);
            for p in bucket.iter() {
                let m = (p[4] * p[4] + p[5] * p[5]).sqrt();
                mag += m;
                if m > 0.0 {
                    dir.0 += p[4] / m;
                    dir.1 += p[5] / m;
                }
            }
            data[[3, hi, wi]] = S::c(mean_sigma);
            data[[4, hi, wi]] = S::c(mag / n);
            data[[5, hi, wi]] = S::c(dir.0 / n);
            data[[6, hi, wi]] = S::c(dir.1 / n);
        }
    }
    BevFeatureMap::new(data, 0)
}

/// Channel widths and depths of the three encoder stages.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct PointBranchParams {
    pub channels: [usize; 3],
    /// Convs per stage (the first conv of stages 1–2 is the strided one).
    pub depth: usize,
    pub aux_heads: bool,
}

impl Default for PointBranchParams {
    fn default() -> Self {
        PointBranchParams {
            channels: [16, 24, 32],
            depth: 2,
            aux_heads: true,
        }
    }
}

/// Allocate parameters under `{prefix}.s{i}.c{j}` plus optional aux heads.
/// `num_semantic` sizes the per-pillar semantic head.
pub fn init_point_branch_params<S: Scalar>(
    store: &mut ParamStore<S>,
    prefix: &str,
    in_channels: usize,
    num_semantic: usize,
    params: &PointBranchParams,
    rng: &mut ChaCha20Rng,
) {
    let mut cin = in_channels;
    for (i, &cout) in params.channels.iter().enumerate() {
        for j in 0..params.depth {
            store.init_conv(&format!("{prefix}.s{i}.c{j}"), cout, cin, 3, rng);
            cin = cout;
        }
    }
    if params.aux_heads {
        store.init_conv(&format!("{prefix}.occ"), 1, params.channels[0], 1, rng);
        store.init_conv(
            &format!("{prefix}.sem"),
            num_semantic,
            params.channels[0],
            1,
            rng,
        );
    }
}

/// Multi-scale features plus optional aux-head logits at scale 0.
pub struct PointBranchOutput {
    pub features: [NodeId; 3],
    pub occ_logits: Option<NodeId>,
    pub sem_logits: Option<NodeId>,
}

/// Run the encoder: stage 0 keeps resolution, stages 1–2 each halve it.
pub fn encode_point_bev<S: Scalar>(
    tape: &mut Tape<S>,
    bind: &ParamBinding,
    prefix: &str,
    pillar: NodeId,
    params: &PointBranchParams,
) -> PointBranchOutput {
    let mut x = pillar;
    let mut features = [pillar; 3];
    for i in 0..3 {
        for j in 0..params.depth {
            let stride = if i > 0 && j == 0 { 2 } else { 1 };
            x = conv_relu(tape, bind, &format!("{prefix}.s{i}.c{j}"), x, stride, 1);
        }
        features[i] = x;
    }
    let (occ_logits, sem_logits) = if params.aux_heads {
        (
            Some(conv(tape, bind, &format!("{prefix}.occ"), features[0], 1, 0)),
            Some(conv(tape, bind, &format!("{prefix}.sem"), features[0], 1, 0)),
        )
    } else {
        (None, None)
    };
    PointBranchOutput {
        features,
        occ_logits,
        sem_logits,
    }
}

/// Binary pillar-occupancy cross-entropy against the ground-truth columns.
pub fn aux_occupancy_loss<S: Scalar>(
    tape: &mut Tape<S>,
    occ_logits: NodeId,
    gt: &VoxelGrid,
) -> NodeId {
    let (z, h, w) = gt.grid.dims();
    let mut targets = ArrayD::<S>::zeros(IxDyn(&[1, h, w]));
    for hi in 0..h {
        for wi in 0..w {
            let occ = (0..z).any(|zi| gt.table.is_semantic(gt.labels[[zi, hi, wi]]));
            targets[[0, hi, wi]] = if occ { S::one() } else { S::zero() };
        }
    }
    let mask = ArrayD::from_elem(IxDyn(&[1, h, w]), S::one());
    tape.bce_with_logits_mean(occ_logits, targets, mask)
}

/// Per-pillar semantic cross-entropy against the dominant semantic label of
/// each occupied column; empty columns are ignored. Head channel `k`
/// corresponds to semantic label `k + 1`.
pub fn aux_semantic_loss<S: Scalar>(
    tape: &mut Tape<S>,
    sem_logits: NodeId,
    gt: &VoxelGrid,
) -> NodeId {
    let (z, h, w) = gt.grid.dims();
    let c = gt.table.num_semantic();
    let mut targets = Vec::with_capacity(h * w);
    for hi in 0..h {
        for wi in 0..w {
            let mut counts = vec![0usize; c];
            for zi in 0..z {
                let l = gt.labels[[zi, hi, wi]];
                if gt.table.is_semantic(l) {
                    counts[l as usize - 1] += 1;
                }
            }
            // dominant label, lowest id on ties; -1 when the column is empty
            let best = counts
                .iter()
                .enumerate()
                .filter(|(_, &n)| n > 0)
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
                .map(|(i, _)| i as i64);
            targets.push(best.unwrap_or(-1));
        }
    }
    let mat = tape.reshape(sem_logits, &[c, h * w]);
    tape.cross_entropy_mean(mat, targets)
}

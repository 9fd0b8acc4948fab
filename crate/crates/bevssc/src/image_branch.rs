//! Image branch: a small conv backbone produces per-view features and a
//! categorical depth distribution; features are lifted into BEV by splatting
//! each pixel's feature along its ray, weighted by depth probability.

use rand_chacha::ChaCha20Rng;

use crate::nn::{conv, conv_relu, ParamBinding, ParamStore};
use crate::point_branch::{encode_point_bev, init_point_branch_params, PointBranchParams};
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};
use crate::types::{CameraView, GridConfig};

/// Uniformly spaced depth bins over `[d_min, d_max)`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DepthBins {
    pub d_min: f64,
    pub d_max: f64,
    pub count: usize,
}

impl DepthBins {
    pub fn width(&self) -> f64 {
        (self.d_max - self.d_min) / self.count as f64
    }

    pub fn center(&self, i: usize) -> f64 {
        self.d_min + (i as f64 + 0.5) * self.width()
    }

    /// Bin containing `d`, or `None` outside the range (or no-hit sentinel).
    pub fn bin_of(&self, d: f64) -> Option<usize> {
        if d < self.d_min || d >= self.d_max {
            return None;
        }
        Some((((d - self.d_min) / self.width()) as usize).min(self.count - 1))
    }
}

/// Backbone widths and lift configuration.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ImageBranchParams {
    /// Channels of the three stride-2 backbone stages.
    pub backbone: [usize; 3],
    /// Channels of the per-pixel feature head fed to the splat.
    pub feat_channels: usize,
    pub bins: DepthBins,
    /// BEV encoder stages applied after the splat.
    pub bev: PointBranchParams,
}

impl Default for ImageBranchParams {
    fn default() -> Self {
        ImageBranchParams {
            backbone: [8, 12, 16],
            feat_channels: 8,
            bins: DepthBins {
                d_min: 0.5,
                d_max: 10.0,
                count: 32,
            },
            bev: PointBranchParams {
                channels: [16, 24, 32],
                depth: 2,
                aux_heads: false,
            },
        }
    }
}

/// Downsample factor from image to feature resolution (three stride-2 convs).
pub const FEAT_STRIDE: usize = 8;

/// Allocate backbone + head + BEV-encoder parameters under `{prefix}.*`.
pub fn init_image_branch_params<S: Scalar>(
    store: &mut ParamStore<S>,
    prefix: &str,
    params: &ImageBranchParams,
    rng: &mut ChaCha20Rng,
) {
    let mut cin = 3;
    for (i, &cout) in params.backbone.iter().enumerate() {
        store.init_conv(&format!("{prefix}.bb{i}"), cout, cin, 3, rng);
        cin = cout;
    }
    store.init_conv(&format!("{prefix}.feat"), params.feat_channels, cin, 1, rng);
    store.init_conv(&format!("{prefix}.depth"), params.bins.count, cin, 1, rng);
    init_point_branch_params(
        store,
        &format!("{prefix}.bev"),
        params.feat_channels,
        0,
        &params.bev,
        rng,
    );
}

/// Per-view backbone outputs.
pub struct ViewFeatures {
    /// `(C_f, h', w')` feature map.
    pub features: NodeId,
    /// `(D, h', w')` pre-softmax depth scores.
    pub depth_logits: NodeId,
    /// `(D, h', w')` categorical depth distribution.
    pub depth_dist: NodeId,
}

/// Run the backbone on one `(3, h, w)` image node.
pub fn extract_image_features<S: Scalar>(
    tape: &mut Tape<S>,
    bind: &ParamBinding,
    prefix: &str,
    image: NodeId,
    _params: &ImageBranchParams,
) -> ViewFeatures {
    let mut x = image;
    for i in 0..3 {
        x = conv_relu(tape, bind, &format!("{prefix}.bb{i}"), x, 2, 1);
    }
    let features = conv(tape, bind, &format!("{prefix}.feat"), x, 1, 0);
    let depth_logits = conv(tape, bind, &format!("{prefix}.depth"), x, 1, 0);
    let depth_dist = tape.softmax(depth_logits, 0);
    ViewFeatures {
        features,
        depth_logits,
        depth_dist,
    }
}

/// Precomputed splat geometry for one view: for every (bin, feature pixel)
/// the flat BEV cell index, or -1 when the unprojected point leaves the grid.
/// Column order matches a `(C, D, P)` tensor flattened over its last two axes.
pub fn splat_targets(view: &CameraView, bins: &DepthBins, grid: &GridConfig) -> Vec<i64> {
    let (ih, iw) = view.image_dims();
    let (fh, fw) = (ih / FEAT_STRIDE, iw / FEAT_STRIDE);
    let (_, _, wdim) = grid.dims();
    let mut targets = Vec::with_capacity(bins.count * fh * fw);
    for d in 0..bins.count {
        let depth = bins.center(d);
        for fy in 0..fh {
            for fx in 0..fw {
                // feature pixel center in original image coordinates
                let row = fy * FEAT_STRIDE + FEAT_STRIDE / 2;
                let col = fx * FEAT_STRIDE + FEAT_STRIDE / 2;
                let p = view.unproject(row, col, depth);
                targets.push(match grid.world_to_voxel(p[0], p[1], p[2]) {
                    Some((_, hi, wi)) => (hi * wdim + wi) as i64,
                    None => -1,
                });
            }
        }
    }
    targets
}

/// Splat one view into a scale-0 BEV plane: every (pixel, bin) contributes
/// `depth_prob × feature` to its geometric cell; off-grid mass is dropped.
pub fn lift_splat<S: Scalar>(
    tape: &mut Tape<S>,
    features: NodeId,
    depth_dist: NodeId,
    targets: &[i64],
    grid: &GridConfig,
) -> NodeId {
    let fshape = tape.value(features).shape().to_vec();
    let dshape = tape.value(depth_dist).shape().to_vec();
    assert_eq!(fshape[1..], dshape[1..], "feature/depth resolution mismatch");
    let (c, p) = (fshape[0], fshape[1] * fshape[2]);
    let d = dshape[0];
    assert_eq!(targets.len(), d * p);
    let (h, w) = grid.bev_dims_at_scale(0);

    let f2 = tape.reshape(features, &[c, p]);
    let fb = tape.broadcast_axis(f2, 1, d); // (C, D, P)
    let d2 = tape.reshape(depth_dist, &[d, p]);
    let db = tape.broadcast_axis(d2, 0, c); // (C, D, P)
    let mass = tape.mul(fb, db);
    let flat = tape.reshape(mass, &[c, d * p]);
    let bev = tape.scatter_columns(flat, targets.to_vec(), h * w);
    tape.reshape(bev, &[c, h, w])
}

/// Sum several per-view BEV planes and run the shared BEV encoder,
/// producing camera features at scales 0–2.
pub fn encode_camera_bev<S: Scalar>(
    tape: &mut Tape<S>,
    bind: &ParamBinding,
    prefix: &str,
    view_bevs: &[NodeId],
    params: &ImageBranchParams,
) -> [NodeId; 3] {
    assert!(!view_bevs.is_empty());
    let mut acc = view_bevs[0];
    for &v in &view_bevs[1..] {
        acc = tape.add(acc, v);
    }
    let out = encode_point_bev(tape, bind, &format!("{prefix}.bev"), acc, &params.bev);
    out.features
}

/// Per-pixel depth targets at feature resolution: the bin containing the
/// ground-truth depth at the corresponding image pixel, -1 where undefined.
pub fn depth_targets(view: &CameraView, bins: &DepthBins) -> Vec<i64> {
    let (ih, iw) = view.image_dims();
    let (fh, fw) = (ih / FEAT_STRIDE, iw / FEAT_STRIDE);
    let mut targets = Vec::with_capacity(fh * fw);
    for fy in 0..fh {
        for fx in 0..fw {
            let row = fy * FEAT_STRIDE + FEAT_STRIDE / 2;
            let col = fx * FEAT_STRIDE + FEAT_STRIDE / 2;
            let gt = view.gt_depth[[row, col]];
            targets.push(if gt > 0.0 {
                bins.bin_of(gt).map(|b| b as i64).unwrap_or(-1)
            } else {
                -1
            });
        }
    }
    targets
}

/// Cross-entropy between the depth distribution and the bin holding the
/// ground-truth depth; unsupervised pixels are ignored.
pub fn depth_supervision_loss<S: Scalar>(
    tape: &mut Tape<S>,
    depth_logits: NodeId,
    targets: Vec<i64>,
) -> NodeId {
    let shape = tape.value(depth_logits).shape().to_vec();
    let (d, p) = (shape[0], shape[1] * shape[2]);
    assert_eq!(targets.len(), p);
    let mat = tape.reshape(depth_logits, &[d, p]);
    tape.cross_entropy_mean(mat, targets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradient, GradCheckOptions};
    use ndarray::{Array2, Array3, ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};

    fn identity_view(h: usize, w: usize) -> CameraView {
        // camera at origin looking along world +x: camera z → world x,
        // camera x → world −y, camera y → world −z
        let mut rotation = Array2::zeros((3, 3));
        rotation[[0, 2]] = 1.0;
        rotation[[1, 0]] = -1.0;
        rotation[[2, 1]] = -1.0;
        let mut intrinsics = Array2::eye(3);
        intrinsics[[0, 0]] = w as f64;
        intrinsics[[1, 1]] = w as f64;
        intrinsics[[0, 2]] = w as f64 / 2.0;
        intrinsics[[1, 2]] = h as f64 / 2.0;
        CameraView {
            image: Array3::zeros((3, h, w)),
            intrinsics,
            rotation,
            translation: [0.0, 0.0, 1.0],
            gt_depth: Array2::zeros((h, w)),
        }
    }

    fn test_grid() -> GridConfig {
        GridConfig::new((-3.2, 3.2), (-3.2, 3.2), (0.0, 1.6), 0.2).unwrap()
    }

    #[test]
    fn depth_bins_round_trip() {
        let bins = DepthBins {
            d_min: 0.5,
            d_max: 8.5,
            count: 16,
        };
        for i in 0..16 {
            assert_eq!(bins.bin_of(bins.center(i)), Some(i));
        }
        assert_eq!(bins.bin_of(0.49), None);
        assert_eq!(bins.bin_of(8.5), None);
    }

    #[test]
    fn depth_distribution_sums_to_one() {
        let params = ImageBranchParams::default();
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let mut store: ParamStore<f64> = ParamStore::new();
        init_image_branch_params(&mut store, "ib", &params, &mut rng);
        let mut tape: Tape<f64> = Tape::new();
        let bind = store.bind(&mut tape, true);
        let img = tape.var(ArrayD::from_shape_fn(IxDyn(&[3, 16, 16]), |_| {
            rng.gen_range(0.0..1.0)
        }));
        let out = extract_image_features(&mut tape, &bind, "ib", img, &params);
        let dist = tape.value(out.depth_dist);
        let (dn, fh, fw) = (dist.shape()[0], dist.shape()[1], dist.shape()[2]);
        assert_eq!((fh, fw), (2, 2));
        for y in 0..fh {
            for x in 0..fw {
                let s: f64 = (0..dn).map(|i| dist[[i, y, x]]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_pixel_delta_depth_hits_geometry_oracle_cell() {
        let grid = test_grid();
        let bins = DepthBins {
            d_min: 0.5,
            d_max: 4.5,
            count: 8,
        };
        let view = identity_view(16, 16);
        let targets = splat_targets(&view, &bins, &grid);
        let (fh, fw) = (2, 2);

        // one-hot feature at pixel (1, 0), one-hot depth at bin 4
        let (py, px, bin) = (1usize, 0usize, 4usize);
        let mut features = ArrayD::zeros(IxDyn(&[1, fh, fw]));
        features[[0, py, px]] = 2.5;
        let mut dist = ArrayD::zeros(IxDyn(&[bins.count, fh, fw]));
        dist[[bin, py, px]] = 1.0;

        let mut tape: Tape<f64> = Tape::new();
        let f = tape.var(features);
        let d = tape.constant(dist);
        let bev = lift_splat(&mut tape, f, d, &targets, &grid);

        // independent hand unprojection
        let row = py * FEAT_STRIDE + FEAT_STRIDE / 2;
        let col = px * FEAT_STRIDE + FEAT_STRIDE / 2;
        let pt = view.unproject(row, col, bins.center(bin));
        let (_, hi, wi) = grid.world_to_voxel(pt[0], pt[1], pt[2]).unwrap();
        let out = tape.value(bev);
        for (idx, &v) in out.indexed_iter() {
            if (idx[1], idx[2]) == (hi, wi) {
                assert_eq!(v, 2.5);
            } else {
                assert_eq!(v, 0.0);
            }
        }
    }

    #[test]
    fn splat_conserves_mass_plus_dropped() {
        let grid = test_grid();
        let bins = DepthBins {
            d_min: 0.5,
            d_max: 12.5, // far bins leave the grid
            count: 12,
        };
        let view = identity_view(16, 16);
        let targets = splat_targets(&view, &bins, &grid);
        assert!(targets.iter().any(|&t| t < 0), "test needs dropped mass");

        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let (c, fh, fw) = (4, 2, 2);
        let features = ArrayD::from_shape_fn(IxDyn(&[c, fh, fw]), |_| rng.gen_range(0.0..1.0));
        let mut dist = ArrayD::from_shape_fn(IxDyn(&[bins.count, fh, fw]), |_| {
            rng.gen_range(0.01..1.0)
        });
        for y in 0..fh {
            for x in 0..fw {
                let s: f64 = (0..bins.count).map(|i| dist[[i, y, x]]).sum();
                for i in 0..bins.count {
                    dist[[i, y, x]] /= s;
                }
            }
        }

        let mut tape: Tape<f64> = Tape::new();
        let f = tape.var(features.clone());
        let d = tape.constant(dist.clone());
        let bev = lift_splat(&mut tape, f, d, &targets, &grid);
        let splatted: f64 = tape.value(bev).iter().sum();

        // bookkeeping oracle: total emitted mass and its dropped share
        let p = fh * fw;
        let mut total = 0.0;
        let mut dropped = 0.0;
        for ci in 0..c {
            for bi in 0..bins.count {
                for pi in 0..p {
                    let m = features[[ci, pi / fw, pi % fw]] * dist[[bi, pi / fw, pi % fw]];
                    total += m;
                    if targets[bi * p + pi] < 0 {
                        dropped += m;
                    }
                }
            }
        }
        assert!(
            (splatted + dropped - total).abs() < 1e-6 * total.abs(),
            "{splatted} + {dropped} != {total}"
        );
    }

    #[test]
    fn splat_is_linear_in_features() {
        let grid = test_grid();
        let bins = DepthBins {
            d_min: 0.5,
            d_max: 6.5,
            count: 6,
        };
        let view = identity_view(16, 16);
        let targets = splat_targets(&view, &bins, &grid);
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let shape = IxDyn(&[3, 2, 2]);
        let fa = ArrayD::from_shape_fn(shape.clone(), |_| rng.gen_range(-1.0..1.0));
        let fb = ArrayD::from_shape_fn(shape.clone(), |_| rng.gen_range(-1.0..1.0));
        let dist = {
            let mut d = ArrayD::from_shape_fn(IxDyn(&[6, 2, 2]), |_| rng.gen_range(0.01..1.0));
            for y in 0..2 {
                for x in 0..2 {
                    let s: f64 = (0..6).map(|i| d[[i, y, x]]).sum();
                    for i in 0..6 {
                        d[[i, y, x]] /= s;
                    }
                }
            }
            d
        };
        let eval = |f: &ArrayD<f64>| {
            let mut tape: Tape<f64> = Tape::new();
            let fn_ = tape.var(f.clone());
            let dn = tape.constant(dist.clone());
            let bev = lift_splat(&mut tape, fn_, dn, &targets, &grid);
            tape.value(bev).clone()
        };
        let combo = eval(&(&fa * 2.0 + &fb * 3.0));
        let sum = eval(&fa) * 2.0 + eval(&fb) * 3.0;
        for (a, b) in combo.iter().zip(sum.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn depth_loss_identities_and_oracle() {
        let bins = DepthBins {
            d_min: 0.5,
            d_max: 4.5,
            count: 8,
        };
        let mut view = identity_view(16, 16);
        view.gt_depth[[4, 4]] = 1.3;
        view.gt_depth[[4, 12]] = 3.9;
        // pixel (12, *) stays unsupervised (sentinel 0)
        let targets = depth_targets(&view, &bins);
        assert_eq!(targets.len(), 4);
        assert_eq!(targets[0], bins.bin_of(1.3).unwrap() as i64);
        assert_eq!(targets[1], bins.bin_of(3.9).unwrap() as i64);
        assert_eq!(&targets[2..], &[-1, -1]);

        // one-hot on the correct bins → 0; uniform → ln(B)
        let mut logits = ArrayD::zeros(IxDyn(&[8, 2, 2]));
        logits[[targets[0] as usize, 0, 0]] = 80.0;
        logits[[targets[1] as usize, 0, 1]] = 80.0;
        let mut tape: Tape<f64> = Tape::new();
        let l = tape.var(logits);
        let loss = depth_supervision_loss(&mut tape, l, targets.clone());
        assert!(tape.scalar_value(loss).abs() < 1e-12);

        let mut tape: Tape<f64> = Tape::new();
        let l = tape.var(ArrayD::zeros(IxDyn(&[8, 2, 2])));
        let loss = depth_supervision_loss(&mut tape, l, targets);
        assert!((tape.scalar_value(loss) - 8.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn image_branch_gradcheck() {
        let params = ImageBranchParams {
            backbone: [4, 4, 6],
            feat_channels: 4,
            bins: DepthBins {
                d_min: 0.5,
                d_max: 4.5,
                count: 4,
            },
            bev: PointBranchParams {
                channels: [4, 6, 6],
                depth: 1,
                aux_heads: false,
            },
        };
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let mut store: ParamStore<f64> = ParamStore::new();
        init_image_branch_params(&mut store, "ib", &params, &mut rng);
        let grid = test_grid();
        let view = identity_view(16, 16);
        let targets = splat_targets(&view, &params.bins, &grid);
        let mut rng2 = ChaCha20Rng::seed_from_u64(6);
        let image = ArrayD::from_shape_fn(IxDyn(&[3, 16, 16]), |_| rng2.gen_range(-1.0..1.0));
        let rep = check_gradient(
            "image_branch",
            &[image],
            |tape, ids| {
                let bind = store.bind(tape, true);
                let vf = extract_image_features(tape, &bind, "ib", ids[0], &params);
                let bev = lift_splat(tape, vf.features, vf.depth_dist, &targets, &grid);
                let feats = encode_camera_bev(tape, &bind, "ib", &[bev], &params);
                let s0 = tape.sum_all(feats[0]);
                let s2 = tape.sum_all(feats[2]);
                let t = tape.add(s0, s2);
                tape.mul(t, t)
            },
            &GradCheckOptions {
                samples_per_input: 12,
                ..GradCheckOptions::default()
            },
        );
        assert!(rep.passed(), "max rel err {}", rep.max_rel_err);
    }
}

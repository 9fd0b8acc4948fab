//! Shared teacher/student fusion network: a 2-D U-Net over BEV whose encoder
//! stages combine the running feature with the point branch via a gated
//! residual (ARF) and optionally add camera features, ending in a dense
//! per-voxel class head.

use ndarray::ArrayD;
use rand_chacha::ChaCha20Rng;

use crate::nn::{conv, conv_relu, ParamBinding, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};
use crate::types::{GridConfig, LabelTable, VoxelGrid};

/// Channel plan and camera-fusion depth.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct FusionParams {
    /// Encoder channels at scales 0–2 plus the bottleneck at scale 3.
    pub channels: [usize; 4],
    /// Camera features are added at encoder stages `i < stages_enabled`;
    /// 0 means point-only regardless of camera input.
    pub stages_enabled: usize,
    /// Prediction channels per voxel (semantic classes + empty).
    pub num_classes: usize,
    /// Vertical resolution of the head output.
    pub z: usize,
}

impl Default for FusionParams {
    fn default() -> Self {
        FusionParams {
            channels: [16, 24, 32, 48],
            stages_enabled: 3,
            num_classes: 6,
            z: 16,
        }
    }
}

impl FusionParams {
    /// Deterministic architecture fingerprint; teacher and student must
    /// instantiate the identical graph.
    pub fn describe(&self) -> String {
        format!(
            "unet2d(ch={:?},stages={},head={}x{},arf=sigmoid-conv1x1-concat,skip=add)",
            self.channels, self.stages_enabled, self.num_classes, self.z
        )
    }
}

/// Allocate all fusion parameters under `{prefix}.*`.
pub fn init_fusion_params<S: Scalar>(
    store: &mut ParamStore<S>,
    prefix: &str,
    params: &FusionParams,
    rng: &mut ChaCha20Rng,
) {
    let [c0, c1, c2, c3] = params.channels;
    store.init_conv(&format!("{prefix}.stem"), c0, c0, 3, rng);
    store.init_conv(&format!("{prefix}.arf0"), c0, 2 * c0, 1, rng);
    store.init_conv(&format!("{prefix}.down1"), c1, c0, 3, rng);
    store.init_conv(&format!("{prefix}.arf1"), c1, 2 * c1, 1, rng);
    store.init_conv(&format!("{prefix}.down2"), c2, c1, 3, rng);
    store.init_conv(&format!("{prefix}.arf2"), c2, 2 * c2, 1, rng);
    store.init_conv(&format!("{prefix}.bott"), c3, c2, 3, rng);
    store.init_conv(&format!("{prefix}.up2"), c2, c3, 3, rng);
    store.init_conv(&format!("{prefix}.up1"), c1, c2, 3, rng);
    store.init_conv(&format!("{prefix}.up0"), c0, c1, 3, rng);
    store.init_conv(
        &format!("{prefix}.head"),
        params.num_classes * params.z,
        c0,
        1,
        rng,
    );
}

/// Gated residual combine: `a + sigmoid(conv1x1(concat(a, b))) ⊙ b`.
pub fn arf_fuse<S: Scalar>(
    tape: &mut Tape<S>,
    bind: &ParamBinding,
    name: &str,
    a: NodeId,
    b: NodeId,
) -> NodeId {
    assert_eq!(tape.value(a).shape(), tape.value(b).shape());
    let cat = tape.concat(a, b, 0);
    let gate_logits = conv(tape, bind, name, cat, 1, 0);
    let gate = tape.sigmoid(gate_logits);
    let gated = tape.mul(gate, b);
    tape.add(a, gated)
}

/// Forward outputs: raw head logits and the four distillation taps
/// (encoder scales 0–2 plus the pre-head decoder feature).
pub struct FusionOutput {
    /// `((num_classes·Z), H, W)`, class-major over Z.
    pub logits: NodeId,
    pub taps: [NodeId; 4],
}

/// Run the U-Net. `point_feats` are mandatory; `camera_feats` are added at
/// stages below `stages_enabled`. `tap_hook` sees every tap in order
/// (scales 0–2 and the decoder feature as index 3) and may substitute the
/// node used downstream — the distillation re-injection point.
pub fn fusion_forward<S: Scalar>(
    tape: &mut Tape<S>,
    bind: &ParamBinding,
    prefix: &str,
    point_feats: &[NodeId; 3],
    camera_feats: Option<&[NodeId; 3]>,
    params: &FusionParams,
    mut tap_hook: impl FnMut(&mut Tape<S>, usize, NodeId) -> NodeId,
) -> FusionOutput {
    let mut taps = [point_feats[0]; 4];
    let mut fused = [point_feats[0]; 3];
    let mut prev = conv_relu(tape, bind, &format!("{prefix}.stem"), point_feats[0], 1, 1);
    for i in 0..3 {
        if i > 0 {
            prev = conv_relu(tape, bind, &format!("{prefix}.down{i}"), prev, 2, 1);
        }
        let mut f = arf_fuse(tape, bind, &format!("{prefix}.arf{i}"), prev, point_feats[i]);
        if let Some(cam) = camera_feats {
            if i < params.stages_enabled {
                f = tape.add(f, cam[i]);
            }
        }
        let f = tap_hook(tape, i, f);
        taps[i] = f;
        fused[i] = f;
        prev = f;
    }
    let bott = conv_relu(tape, bind, &format!("{prefix}.bott"), fused[2], 2, 1);
    let mut d = bott;
    for i in (0..3).rev() {
        let up = tape.upsample2x(d);
        let proj = conv(tape, bind, &format!("{prefix}.up{i}"), up, 1, 1);
        let skip = tape.add(proj, fused[i]);
        d = tape.relu(skip);
    }
    let d = tap_hook(tape, 3, d);
    taps[3] = d;
    let logits = conv(tape, bind, &format!("{prefix}.head"), d, 1, 0);
    FusionOutput { logits, taps }
}

/// Pass-through tap hook for runs without feature re-injection.
pub fn no_hook<S: Scalar>(_: &mut Tape<S>, _: usize, n: NodeId) -> NodeId {
    n
}

/// Per-voxel argmax over the class channels of raw head logits
/// `((C·Z), H, W)`; ties resolve to the lowest class id.
pub fn predict_grid<S: Scalar>(
    logits: &ArrayD<S>,
    grid: &GridConfig,
    table: &LabelTable,
) -> VoxelGrid {
    let (z, h, w) = grid.dims();
    let c = table.num_channels();
    assert_eq!(logits.shape(), [c * z, h, w]);
    let mut out = VoxelGrid::empty(grid.clone(), table.clone());
    for zi in 0..z {
        for hi in 0..h {
            for wi in 0..w {
                let mut best = 0usize;
                let mut best_v = logits[[zi, hi, wi]];
                for ch in 1..c {
                    let v = logits[[ch * z + zi, hi, wi]];
                    if v > best_v {
                        best_v = v;
                        best = ch;
                    }
                }
                out.labels[[zi, hi, wi]] = best as u16;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradient, GradCheckOptions};
    use ndarray::IxDyn;
    use rand::{Rng, SeedableRng};

    fn small_params() -> FusionParams {
        FusionParams {
            channels: [4, 6, 6, 8],
            stages_enabled: 3,
            num_classes: 3,
            z: 4,
        }
    }

    fn rand_arr(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    fn point_inputs(tape: &mut Tape<f64>, params: &FusionParams, hw: usize, seed: u64) -> [NodeId; 3] {
        [
            tape.var(rand_arr(&[params.channels[0], hw, hw], seed)),
            tape.var(rand_arr(&[params.channels[1], hw / 2, hw / 2], seed + 1)),
            tape.var(rand_arr(&[params.channels[2], hw / 4, hw / 4], seed + 2)),
        ]
    }

    #[test]
    fn arf_residual_identities() {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let mut store: ParamStore<f64> = ParamStore::new();
        store.init_conv("g", 4, 8, 1, &mut rng);
        let a_arr = rand_arr(&[4, 5, 5], 1);

        // b = 0 → out = a exactly
        let mut tape: Tape<f64> = Tape::new();
        let bind = store.bind(&mut tape, true);
        let a = tape.var(a_arr.clone());
        let b = tape.constant(ArrayD::zeros(IxDyn(&[4, 5, 5])));
        let out = arf_fuse(&mut tape, &bind, "g", a, b);
        assert_eq!(tape.value(out), &a_arr);

        // saturated-negative gate bias → out ≈ a even with nonzero b
        store.insert("g.b", ArrayD::from_elem(IxDyn(&[4]), -50.0));
        let mut tape: Tape<f64> = Tape::new();
        let bind = store.bind(&mut tape, true);
        let a = tape.var(a_arr.clone());
        let b = tape.var(rand_arr(&[4, 5, 5], 2));
        let out = arf_fuse(&mut tape, &bind, "g", a, b);
        for (o, x) in tape.value(out).iter().zip(a_arr.iter()) {
            assert!((o - x).abs() < 1e-3);
        }
    }

    #[test]
    fn stages_zero_is_camera_independent() {
        let params = FusionParams {
            stages_enabled: 0,
            ..small_params()
        };
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let mut store: ParamStore<f64> = ParamStore::new();
        init_fusion_params(&mut store, "f", &params, &mut rng);

        let run = |cam: bool| {
            let mut tape: Tape<f64> = Tape::new();
            let bind = store.bind(&mut tape, true);
            let pts = point_inputs(&mut tape, &params, 8, 10);
            let cams = [
                tape.var(rand_arr(&[params.channels[0], 8, 8], 20)),
                tape.var(rand_arr(&[params.channels[1], 4, 4], 21)),
                tape.var(rand_arr(&[params.channels[2], 2, 2], 22)),
            ];
            let out = fusion_forward(
                &mut tape,
                &bind,
                "f",
                &pts,
                cam.then_some(&cams),
                &params,
                no_hook,
            );
            tape.value(out.logits).clone()
        };
        assert_eq!(run(false), run(true));
    }

    #[test]
    fn logits_shape_and_reshape_round_trip() {
        let params = small_params();
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let mut store: ParamStore<f64> = ParamStore::new();
        init_fusion_params(&mut store, "f", &params, &mut rng);
        let mut tape: Tape<f64> = Tape::new();
        let bind = store.bind(&mut tape, true);
        let pts = point_inputs(&mut tape, &params, 8, 30);
        let out = fusion_forward(&mut tape, &bind, "f", &pts, None, &params, no_hook);
        let v = tape.value(out.logits);
        assert_eq!(v.shape(), [params.num_classes * params.z, 8, 8]);
        let reshaped = v
            .clone()
            .into_shape(IxDyn(&[params.num_classes, params.z, 8, 8]))
            .unwrap();
        let back = reshaped
            .into_shape(IxDyn(&[params.num_classes * params.z, 8, 8]))
            .unwrap();
        assert_eq!(&back, v);

        // tap shapes: encoder scales then the pre-head decoder feature
        for (i, &t) in out.taps.iter().take(3).enumerate() {
            assert_eq!(
                tape.value(t).shape(),
                [params.channels[i], 8 >> i, 8 >> i]
            );
        }
        assert_eq!(tape.value(out.taps[3]).shape(), [params.channels[0], 8, 8]);
    }

    #[test]
    fn tap_hook_substitution_reaches_downstream() {
        let params = small_params();
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let mut store: ParamStore<f64> = ParamStore::new();
        init_fusion_params(&mut store, "f", &params, &mut rng);
        let run = |scale: f64| {
            let mut tape: Tape<f64> = Tape::new();
            let bind = store.bind(&mut tape, true);
            let pts = point_inputs(&mut tape, &params, 8, 40);
            let out = fusion_forward(&mut tape, &bind, "f", &pts, None, &params, |t, i, n| {
                if i == 1 {
                    t.mul_scalar(n, scale)
                } else {
                    n
                }
            });
            tape.value(out.logits).clone()
        };
        assert_ne!(run(1.0), run(0.5));
        assert_eq!(run(1.0), run(1.0));
    }

    #[test]
    fn fusion_gradcheck() {
        let params = small_params();
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let mut store: ParamStore<f64> = ParamStore::new();
        init_fusion_params(&mut store, "f", &params, &mut rng);
        let inputs = vec![
            rand_arr(&[params.channels[0], 8, 8], 50),
            rand_arr(&[params.channels[1], 4, 4], 51),
            rand_arr(&[params.channels[2], 2, 2], 52),
        ];
        let rep = check_gradient(
            "fusion",
            &inputs,
            |tape, ids| {
                let bind = store.bind(tape, true);
                let pts = [ids[0], ids[1], ids[2]];
                let out = fusion_forward(tape, &bind, "f", &pts, None, &params, no_hook);
                let s = tape.sum_all(out.logits);
                tape.mul(s, s)
            },
            &GradCheckOptions {
                samples_per_input: 10,
                ..GradCheckOptions::default()
            },
        );
        assert!(rep.passed(), "max rel err {}", rep.max_rel_err);
    }

    #[test]
    fn predict_grid_matches_argmax_oracle() {
        let grid = GridConfig::new((0.0, 1.2), (0.0, 1.2), (0.0, 0.8), 0.2).unwrap();
        let table = LabelTable::new(vec!["a".into(), "b".into()], false);
        let (z, h, w) = grid.dims();
        let c = table.num_channels();

        // all-equal logits → class 0 everywhere (tie-break)
        let flat: ArrayD<f64> = ArrayD::zeros(IxDyn(&[c * z, h, w]));
        let pred = predict_grid(&flat, &grid, &table);
        assert!(pred.labels.iter().all(|&l| l == 0));

        // one-hot logits reproduce the encoded grid
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let mut want = VoxelGrid::empty(grid.clone(), table.clone());
        want.labels.mapv_inplace(|_| rng.gen_range(0..c as u16));
        let mut logits = ArrayD::zeros(IxDyn(&[c * z, h, w]));
        for (idx, &l) in want.labels.indexed_iter() {
            logits[[l as usize * z + idx.0, idx.1, idx.2]] = 5.0;
        }
        assert_eq!(predict_grid(&logits, &grid, &table).labels, want.labels);

        // random logits vs scalar oracle
        let logits = rand_arr(&[c * z, h, w], 8);
        let pred = predict_grid(&logits, &grid, &table);
        for zi in 0..z {
            for hi in 0..h {
                for wi in 0..w {
                    let vals: Vec<f64> =
                        (0..c).map(|ch| logits[[ch * z + zi, hi, wi]]).collect();
                    let best = vals
                        .iter()
                        .enumerate()
                        .fold((0usize, f64::NEG_INFINITY), |acc, (i, &v)| {
                            if v > acc.1 {
                                (i, v)
                            } else {
                                acc
                            }
                        })
                        .0;
                    assert_eq!(pred.labels[[zi, hi, wi]], best as u16);
                }
            }
        }
    }

    #[test]
    fn architecture_description_is_shared() {
        let p = small_params();
        assert_eq!(p.describe(), p.clone().describe());
        let other = FusionParams {
            stages_enabled: 1,
            ..small_params()
        };
        assert_ne!(p.describe(), other.describe());
    }
}

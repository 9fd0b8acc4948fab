//! Training, evaluation, ablation and gradient-check drivers.
//!
//! The teacher is a lidar+camera fusion network; the student consumes radar
//! (optionally plus cameras) and is additionally supervised by the frozen
//! teacher through feature, relation and prediction distillation.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{ModelConfig, RunConfig};
use crate::distill::{
    brd_loss, build_occupancy_mask, cmrd_loss, init_cmrd_params, pdd_loss, total_loss,
};
use crate::error::{Error, Result};
use crate::fusion::{
    fusion_forward, init_fusion_params, no_hook, predict_grid, FusionParams,
};
use crate::gradcheck::{check_gradient, GradCheckOptions, GradCheckReport};
use crate::image_branch::{
    depth_supervision_loss, depth_targets, encode_camera_bev, extract_image_features,
    init_image_branch_params, lift_splat, splat_targets,
};
use crate::lcr1::{Lcr1File, Lcr1Writer};
use crate::losses::{bev_loss, logits_to_class_matrix, scal_loss, ScalMode};
use crate::metrics::{
    condition_breakdown, confusion_counts, iou_miou, range_breakdown, render_csv,
    render_markdown, ConfusionCounts, MetricsSummary,
};
use crate::nn::{lr_at, AdamW, GradStore, ParamBinding};
use crate::point_branch::{
    aux_occupancy_loss, aux_semantic_loss, encode_point_bev, init_point_branch_params,
    pillar_channels, pillarize,
};
use crate::tape::NodeId;
use crate::types::{ConditionTag, GridConfig, LabelTable, PointKind, VoxelGrid};
use crate::world::SceneSample;
use crate::{ParamsF, TapeF, F};

/// Offset between training and held-out scene seeds.
pub const EVAL_SEED_OFFSET: u64 = 0x1000;
/// RNG stream ids (on top of the run seed).
const STREAM_INIT: u64 = 7;
const STREAM_BATCH: u64 = 9;

/// Deterministic scene set; condition tags cycle sun/rain/night.
pub fn build_dataset(
    world: &crate::world::WorldConfig,
    base_seed: u64,
    count: usize,
) -> Result<Vec<SceneSample>> {
    let tags = [ConditionTag::Sun, ConditionTag::Rain, ConditionTag::Night];
    (0..count)
        .map(|i| {
            let mut w = world.clone();
            w.condition = tags[i % tags.len()];
            crate::world::generate_sample(base_seed.wrapping_add(i as u64), &w)
        })
        .collect()
}

/// Initialize every parameter namespace a run needs. The KD projector
/// parameters are created for all student runs (with or without an actual
/// teacher) so that weight initialization streams stay comparable.
pub fn init_model(
    cfg: &RunConfig,
    kind: PointKind,
    with_camera: bool,
    with_kd_projectors: bool,
) -> ParamsF {
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    rng.set_stream(STREAM_INIT);
    let mut store = ParamsF::new();
    init_point_branch_params(
        &mut store,
        "pt",
        pillar_channels(kind),
        cfg.world.labels.num_semantic(),
        &cfg.model.point,
        &mut rng,
    );
    if with_camera {
        init_image_branch_params(&mut store, "img", &cfg.model.image, &mut rng);
    }
    init_fusion_params(&mut store, "fuse", &cfg.model.fusion, &mut rng);
    if with_kd_projectors {
        for &s in &cfg.kd.cmrd_scales {
            let c = tap_channels(&cfg.model.fusion, s);
            init_cmrd_params(&mut store, s, c, c, &mut rng);
        }
    }
    store
}

/// Channel count of distillation tap `i` (encoder scales 0–2, decoder = 3).
pub fn tap_channels(fusion: &FusionParams, tap: usize) -> usize {
    if tap < 3 {
        fusion.channels[tap]
    } else {
        fusion.channels[0]
    }
}

/// Sensor layout recorded in the parameter names/shapes: the point branch
/// input width tells lidar (3) from radar (7); camera params are optional.
pub fn model_kind(params: &ParamsF) -> (PointKind, bool) {
    let w = params.get("pt.s0.c0.w");
    let kind = if w.shape()[1] == pillar_channels(PointKind::Radar) {
        PointKind::Radar
    } else {
        PointKind::Lidar
    };
    let with_camera = params.iter().any(|(n, _)| n == "img.feat.w");
    (kind, with_camera)
}

/// One network pass over a sample: logits, distillation taps, and optional
/// auxiliary / depth supervision loss nodes.
pub struct NetOutput {
    pub logits: NodeId,
    pub taps: [NodeId; 4],
    pub aux: Option<(NodeId, NodeId)>,
    pub depth: Option<NodeId>,
}

pub fn forward_net(
    tape: &mut TapeF,
    bind: &ParamBinding,
    sample: &SceneSample,
    model: &ModelConfig,
    kind: PointKind,
    with_camera: bool,
    with_depth_loss: bool,
    tap_hook: impl FnMut(&mut TapeF, usize, NodeId) -> NodeId,
) -> NetOutput {
    let grid = &sample.gt.grid;
    let cloud = match kind {
        PointKind::Lidar => &sample.lidar,
        PointKind::Radar => &sample.radar,
    };
    let pillar = pillarize::<F>(cloud, grid);
    let pillar_node = tape.constant(pillar.data.into_dyn());
    let pt = encode_point_bev(tape, bind, "pt", pillar_node, &model.point);

    let mut depth_losses = Vec::new();
    let camera_feats = if with_camera {
        let mut bevs = Vec::new();
        for view in &sample.cameras.views {
            let img = tape.constant(view.image.clone().into_dyn());
            let vf = extract_image_features(tape, bind, "img", img, &model.image);
            let targets = splat_targets(view, &model.image.bins, grid);
            bevs.push(lift_splat(tape, vf.features, vf.depth_dist, &targets, grid));
            if with_depth_loss {
                let dt = depth_targets(view, &model.image.bins);
                depth_losses.push(depth_supervision_loss(tape, vf.depth_logits, dt));
            }
        }
        Some(encode_camera_bev(tape, bind, "img", &bevs, &model.image))
    } else {
        None
    };

    let out = fusion_forward(
        tape,
        bind,
        "fuse",
        &pt.features,
        camera_feats.as_ref(),
        &model.fusion,
        tap_hook,
    );

    let aux = match (pt.occ_logits, pt.sem_logits) {
        (Some(occ), Some(sem)) => Some((
            aux_occupancy_loss(tape, occ, &sample.gt),
            aux_semantic_loss(tape, sem, &sample.gt),
        )),
        _ => None,
    };
    let depth = mean_of(tape, &depth_losses);
    NetOutput {
        logits: out.logits,
        taps: out.taps,
        aux,
        depth,
    }
}

fn mean_of(tape: &mut TapeF, nodes: &[NodeId]) -> Option<NodeId> {
    let (&first, rest) = nodes.split_first()?;
    let mut acc = first;
    for &n in rest {
        acc = tape.add(acc, n);
    }
    Some(tape.mul_scalar(acc, 1.0 / nodes.len() as f64))
}

/// Teacher objective: task loss + λ₅·aux + depth supervision. Returns the
/// total node and named component nodes paired with their weights.
pub fn teacher_sample_loss(
    tape: &mut TapeF,
    bind: &ParamBinding,
    sample: &SceneSample,
    cfg: &RunConfig,
) -> (NodeId, Vec<(String, NodeId, f64)>) {
    let out = forward_net(
        tape,
        bind,
        sample,
        &cfg.model,
        PointKind::Lidar,
        true,
        true,
        no_hook,
    );
    let bev = bev_loss(tape, out.logits, &sample.gt);
    let tl = total_loss(tape, bev.total, None, None, None, out.aux, &cfg.kd);
    let mut terms = tl.terms;
    let mut total = tl.total;
    if let Some(d) = out.depth {
        total = tape.add(total, d);
        terms.push(("depth".into(), d, 1.0));
    }
    terms.push(("ce".into(), bev.ce, 1.0));
    terms.push(("scal_geo".into(), bev.scal_geo, 1.0));
    terms.push(("scal_sem".into(), bev.scal_sem, 1.0));
    (total, terms)
}

/// Student objective: task loss + enabled KD terms against a frozen teacher
/// pass (`teacher_bind` must be bound non-trainable).
pub fn student_sample_loss(
    tape: &mut TapeF,
    bind: &ParamBinding,
    teacher_bind: Option<&ParamBinding>,
    sample: &SceneSample,
    cfg: &RunConfig,
) -> (NodeId, Vec<(String, NodeId, f64)>) {
    let kd = &cfg.kd;
    let with_camera = cfg.student_sensors.has_camera();
    let use_cmrd = kd.lambda_cmrd > 0.0 && !kd.cmrd_scales.is_empty();
    let use_brd = kd.lambda_brd > 0.0
        && !kd.brd_scales.is_empty()
        && (with_camera || kd.brd_without_camera);
    let use_pdd = kd.lambda_pdd > 0.0;
    let teacher = if use_cmrd || use_brd || use_pdd {
        teacher_bind
    } else {
        None
    };

    let t_out = teacher.map(|tb| {
        forward_net(
            tape,
            tb,
            sample,
            &cfg.model,
            PointKind::Lidar,
            true,
            false,
            no_hook,
        )
    });

    let mut cmrd_nodes: Vec<NodeId> = Vec::new();
    let s_out = {
        let t_taps = t_out.as_ref().map(|t| t.taps);
        forward_net(
            tape,
            bind,
            sample,
            &cfg.model,
            PointKind::Radar,
            with_camera,
            false,
            |tape: &mut TapeF, tap: usize, node: NodeId| {
                let Some(taps) = t_taps else { return node };
                if !(use_cmrd && kd.cmrd_scales.contains(&tap)) {
                    return node;
                }
                let mask_scale = if tap == 3 { 0 } else { tap };
                let mask = build_occupancy_mask(&sample.gt, mask_scale);
                let out = cmrd_loss(tape, bind, tap, node, taps[tap], &mask);
                cmrd_nodes.push(out.loss);
                if kd.cmrd_replace {
                    out.f_star
                } else {
                    node
                }
            },
        )
    };

    let cmrd = mean_of(tape, &cmrd_nodes);
    let brd = t_out.as_ref().filter(|_| use_brd).and_then(|t| {
        let nodes: Vec<NodeId> = kd
            .brd_scales
            .iter()
            .map(|&s| brd_loss(tape, s_out.taps[s], t.taps[s], kd.brd_resize))
            .collect();
        mean_of(tape, &nodes)
    });
    let pdd = t_out.as_ref().filter(|_| use_pdd).map(|t| {
        let c = sample.gt.table.num_channels();
        let z = sample.gt.grid.z_dim();
        let s_mat = logits_to_class_matrix(tape, s_out.logits, c, z);
        let t_mat = logits_to_class_matrix(tape, t.logits, c, z);
        pdd_loss(tape, s_mat, t_mat, kd.kl_reverse)
    });

    let bev = bev_loss(tape, s_out.logits, &sample.gt);
    let tl = total_loss(tape, bev.total, cmrd, brd, pdd, s_out.aux, kd);
    let mut terms = tl.terms;
    terms.push(("ce".into(), bev.ce, 1.0));
    terms.push(("scal_geo".into(), bev.scal_geo, 1.0));
    terms.push(("scal_sem".into(), bev.scal_sem, 1.0));
    (tl.total, terms)
}

/// Serializable ChaCha20 state: seed, stream, and block position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos_hi: u64,
    pub word_pos_lo: u64,
}

impl RngState {
    pub fn capture(rng: &ChaCha20Rng) -> Self {
        let pos = rng.get_word_pos();
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos_hi: (pos >> 64) as u64,
            word_pos_lo: pos as u64,
        }
    }

    pub fn restore(&self) -> ChaCha20Rng {
        let mut rng = ChaCha20Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(((self.word_pos_hi as u128) << 64) | self.word_pos_lo as u128);
        rng
    }
}

/// Everything needed to resume or deploy a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ParamsF,
    pub config: RunConfig,
    pub step: u64,
    pub rng: RngState,
    pub opt_step: u64,
    pub opt_m: BTreeMap<String, ArrayD<F>>,
    pub opt_v: BTreeMap<String, ArrayD<F>>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = json!({
            "format": "bevssc-checkpoint",
            "step": self.step,
            "opt_step": self.opt_step,
            "config": serde_json::to_value(&self.config)?,
            "rng": serde_json::to_value(&self.rng)?,
        });
        let mut w = Lcr1Writer::new(meta);
        for (name, value) in self.params.iter() {
            w.put_f64(&format!("param/{name}"), value);
        }
        for (name, value) in &self.opt_m {
            w.put_f64(&format!("m/{name}"), value);
        }
        for (name, value) in &self.opt_v {
            w.put_f64(&format!("v/{name}"), value);
        }
        w.write_to(path)
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let file = Lcr1File::read_from(path)?;
        let get = |k: &str| {
            file.meta
                .get(k)
                .cloned()
                .ok_or_else(|| Error::format(format!("checkpoint missing `{k}`")))
        };
        if get("format")?.as_str() != Some("bevssc-checkpoint") {
            return Err(Error::format("not a checkpoint file"));
        }
        let step = get("step")?
            .as_u64()
            .ok_or_else(|| Error::format("bad step"))?;
        let opt_step = get("opt_step")?
            .as_u64()
            .ok_or_else(|| Error::format("bad opt_step"))?;
        let config: RunConfig = serde_json::from_value(get("config")?)?;
        let rng: RngState = serde_json::from_value(get("rng")?)?;
        let mut params = ParamsF::new();
        let mut opt_m = BTreeMap::new();
        let mut opt_v = BTreeMap::new();
        let names: Vec<String> = file.names().map(|s| s.to_string()).collect();
        for name in names {
            let arr = file.get_f64(&name)?;
            if let Some(p) = name.strip_prefix("param/") {
                params.insert(p, arr);
            } else if let Some(p) = name.strip_prefix("m/") {
                opt_m.insert(p.to_string(), arr);
            } else if let Some(p) = name.strip_prefix("v/") {
                opt_v.insert(p.to_string(), arr);
            }
        }
        Ok(Checkpoint {
            params,
            config,
            step,
            rng,
            opt_step,
            opt_m,
            opt_v,
        })
    }
}

/// Per-step record; component values are the λ-weighted contributions.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub lr: f64,
    pub total: f64,
    pub components: Vec<(String, f64)>,
}

impl StepLog {
    pub fn component(&self, name: &str) -> Option<f64> {
        self.components
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<StepLog>,
}

enum Role<'a> {
    Teacher,
    /// `None` teacher = distillation-free baseline with the student layout.
    Student(Option<&'a ParamsF>),
}

pub fn train_teacher(
    dataset: &[SceneSample],
    cfg: &RunConfig,
    resume: Option<Checkpoint>,
) -> Result<TrainOutcome> {
    for (i, s) in dataset.iter().enumerate() {
        if s.lidar.is_empty() {
            return Err(Error::config(format!("sample {i} has no lidar points")));
        }
        if s.cameras.views.is_empty() {
            return Err(Error::config(format!("sample {i} has no camera views")));
        }
    }
    run_training(dataset, cfg, Role::Teacher, resume)
}

pub fn train_student(
    dataset: &[SceneSample],
    teacher: &Checkpoint,
    cfg: &RunConfig,
    resume: Option<Checkpoint>,
) -> Result<TrainOutcome> {
    if cfg.student_sensors.has_camera() {
        for (i, s) in dataset.iter().enumerate() {
            if s.cameras.views.is_empty() {
                return Err(Error::config(format!("sample {i} has no camera views")));
            }
        }
    }
    let before = teacher.params.checksum();
    let out = run_training(dataset, cfg, Role::Student(Some(&teacher.params)), resume)?;
    debug_assert_eq!(before, teacher.params.checksum());
    Ok(out)
}

/// Train the student architecture with no teacher and no KD terms; used as
/// the paired baseline in KD comparisons.
pub fn train_student_baseline(
    dataset: &[SceneSample],
    cfg: &RunConfig,
    resume: Option<Checkpoint>,
) -> Result<TrainOutcome> {
    run_training(dataset, cfg, Role::Student(None), resume)
}

fn run_training(
    dataset: &[SceneSample],
    cfg: &RunConfig,
    role: Role<'_>,
    resume: Option<Checkpoint>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::config("empty training dataset"));
    }
    let mut opt: AdamW<F> = AdamW::new(cfg.optim.lr, cfg.optim.weight_decay);
    opt.beta1 = cfg.optim.beta1;
    opt.beta2 = cfg.optim.beta2;
    opt.eps = cfg.optim.eps;

    let (mut params, mut rng, start_step) = match resume {
        Some(ck) => {
            opt.import_state(ck.opt_step, ck.opt_m, ck.opt_v);
            (ck.params, ck.rng.restore(), ck.step)
        }
        None => {
            let params = match role {
                Role::Teacher => init_model(cfg, PointKind::Lidar, true, false),
                Role::Student(_) => init_model(
                    cfg,
                    PointKind::Radar,
                    cfg.student_sensors.has_camera(),
                    true,
                ),
            };
            let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
            rng.set_stream(STREAM_BATCH);
            (params, rng, 0)
        }
    };

    let mut log = Vec::new();
    for step in start_step..cfg.steps as u64 {
        let mut grads: GradStore<F> = GradStore::new();
        let mut total_sum = 0.0;
        let mut comp_sums: BTreeMap<String, f64> = BTreeMap::new();
        let mut comp_order: Vec<String> = Vec::new();
        for _ in 0..cfg.batch_size {
            let idx = rng.gen_range(0..dataset.len());
            let sample = &dataset[idx];
            let mut tape = TapeF::new();
            let bind = params.bind(&mut tape, true);
            let (total, terms) = match &role {
                Role::Teacher => teacher_sample_loss(&mut tape, &bind, sample, cfg),
                Role::Student(teacher) => {
                    let t_bind = teacher.map(|tp| tp.bind(&mut tape, false));
                    student_sample_loss(&mut tape, &bind, t_bind.as_ref(), sample, cfg)
                }
            };
            let g = tape.backward(total);
            for (name, &id) in bind.iter() {
                if g.has_grad(id) {
                    grads.accumulate(name, g.wrt(&tape, id));
                }
            }
            total_sum += tape.scalar_value(total);
            for (name, node, lambda) in terms {
                let v = lambda * tape.scalar_value(node);
                if !comp_sums.contains_key(&name) {
                    comp_order.push(name.clone());
                }
                *comp_sums.entry(name).or_insert(0.0) += v;
            }
        }
        let inv_batch = 1.0 / cfg.batch_size as f64;
        grads.scale(inv_batch);
        let lr = lr_at(
            step,
            cfg.optim.lr,
            cfg.optim.warmup_iters as u64,
            cfg.optim.horizon_iters as u64,
        );
        opt.step(&mut params, &grads, lr);
        log.push(StepLog {
            step,
            lr,
            total: total_sum * inv_batch,
            components: comp_order
                .into_iter()
                .map(|n| {
                    let v = comp_sums[&n] * inv_batch;
                    (n, v)
                })
                .collect(),
        });
    }

    let (opt_step, m, v) = opt.export_state();
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            params,
            config: cfg.clone(),
            step: cfg.steps as u64,
            rng: RngState::capture(&rng),
            opt_step,
            opt_m: m.clone(),
            opt_v: v.clone(),
        },
        log,
    })
}

/// Deterministic inference: raw head logits for one sample.
pub fn infer_logits(params: &ParamsF, sample: &SceneSample, model: &ModelConfig) -> ArrayD<F> {
    let (kind, with_camera) = model_kind(params);
    let mut tape = TapeF::new();
    let bind = params.bind(&mut tape, false);
    let out = forward_net(
        &mut tape, &bind, sample, model, kind, with_camera, false, no_hook,
    );
    tape.value(out.logits).clone()
}

pub fn predict(params: &ParamsF, sample: &SceneSample, model: &ModelConfig) -> VoxelGrid {
    let logits = infer_logits(params, sample, model);
    predict_grid(&logits, &sample.gt.grid, &sample.gt.table)
}

/// Aggregated evaluation: global, per-range and per-condition counts plus
/// the raw per-sample predictions.
pub struct EvalReport {
    pub class_names: Vec<String>,
    pub global: ConfusionCounts,
    pub per_range: Vec<((f64, f64), ConfusionCounts)>,
    pub per_condition: Vec<(ConditionTag, ConfusionCounts)>,
    pub predictions: Vec<VoxelGrid>,
}

pub fn evaluate_predictions(
    predictions: Vec<VoxelGrid>,
    dataset: &[SceneSample],
    bands: &[(f64, f64)],
) -> Result<EvalReport> {
    if predictions.len() != dataset.len() {
        return Err(Error::config("prediction/dataset length mismatch"));
    }
    let table = &dataset
        .first()
        .ok_or_else(|| Error::config("empty evaluation dataset"))?
        .gt
        .table;
    let mut global = ConfusionCounts::new(table.num_semantic());
    let mut per_range: Vec<((f64, f64), ConfusionCounts)> = bands
        .iter()
        .map(|&b| (b, ConfusionCounts::new(table.num_semantic())))
        .collect();
    let mut tagged = Vec::new();
    for (pred, sample) in predictions.iter().zip(dataset) {
        let counts = confusion_counts(pred, &sample.gt)?;
        global.merge(&counts);
        tagged.push((sample.tag, counts));
        for (slot, (_, band_counts)) in range_breakdown(pred, &sample.gt, bands)?
            .into_iter()
            .enumerate()
        {
            per_range[slot].1.merge(&band_counts);
        }
    }
    let per_condition = condition_breakdown(&tagged).into_iter().collect();
    Ok(EvalReport {
        class_names: table.class_names.clone(),
        global,
        per_range,
        per_condition,
        predictions,
    })
}

pub fn evaluate(
    params: &ParamsF,
    dataset: &[SceneSample],
    model: &ModelConfig,
    bands: &[(f64, f64)],
) -> Result<EvalReport> {
    let predictions = dataset
        .iter()
        .map(|s| predict(params, s, model))
        .collect();
    evaluate_predictions(predictions, dataset, bands)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into())
}

impl EvalReport {
    pub fn global_summary(&self) -> MetricsSummary {
        iou_miou(&self.global)
    }

    fn rows(&self) -> (Vec<String>, Vec<Vec<String>>) {
        let mut headers = vec!["split".to_string(), "iou".into(), "miou".into()];
        headers.extend(self.class_names.iter().cloned());
        let mut rows = Vec::new();
        let mut push = |label: String, counts: &ConfusionCounts| {
            let s = iou_miou(counts);
            let mut row = vec![label, format!("{:.4}", s.iou), format!("{:.4}", s.miou)];
            row.extend(s.per_class_iou.iter().map(|&v| fmt_opt(v)));
            rows.push(row);
        };
        push("all".into(), &self.global);
        for ((lo, hi), counts) in &self.per_range {
            push(format!("{lo}-{hi}m"), counts);
        }
        for (tag, counts) in &self.per_condition {
            push(tag.as_str().to_string(), counts);
        }
        (headers, rows)
    }

    pub fn render_markdown(&self) -> String {
        let (headers, rows) = self.rows();
        render_markdown(&headers, &rows)
    }

    pub fn render_csv(&self) -> String {
        let (headers, rows) = self.rows();
        render_csv(&headers, &rows)
    }
}

/// Dump prediction grids so evaluations can be reproduced offline.
pub fn write_predictions(preds: &[VoxelGrid], path: &Path) -> Result<()> {
    let first = preds
        .first()
        .ok_or_else(|| Error::config("no predictions to write"))?;
    let meta = json!({
        "format": "bevssc-predictions",
        "count": preds.len(),
        "grid": serde_json::to_value(&first.grid)?,
        "labels": serde_json::to_value(&first.table)?,
    });
    let mut w = Lcr1Writer::new(meta);
    for (i, p) in preds.iter().enumerate() {
        w.put_u16(&format!("p{i}"), &p.labels.clone().into_dyn());
    }
    w.write_to(path)
}

pub fn read_predictions(path: &Path) -> Result<Vec<VoxelGrid>> {
    let file = Lcr1File::read_from(path)?;
    let grid: GridConfig = serde_json::from_value(
        file.meta
            .get("grid")
            .cloned()
            .ok_or_else(|| Error::format("predictions missing grid"))?,
    )?;
    let table: LabelTable = serde_json::from_value(
        file.meta
            .get("labels")
            .cloned()
            .ok_or_else(|| Error::format("predictions missing labels"))?,
    )?;
    let n = file
        .meta
        .get("count")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::format("predictions missing count"))? as usize;
    (0..n)
        .map(|i| {
            let labels = file
                .get_u16(&format!("p{i}"))?
                .into_dimensionality::<ndarray::Ix3>()
                .map_err(|e| Error::format(format!("prediction {i}: {e}")))?;
            Ok(VoxelGrid {
                labels,
                grid: grid.clone(),
                table: table.clone(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationAxis {
    Stages,
    KdComponents,
    KlDirection,
}

impl AblationAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "stages" => Ok(AblationAxis::Stages),
            "kd_components" => Ok(AblationAxis::KdComponents),
            "kl_direction" => Ok(AblationAxis::KlDirection),
            other => Err(Error::config(format!("unknown ablation axis `{other}`"))),
        }
    }
}

pub struct AblationRow {
    pub label: String,
    pub summary: MetricsSummary,
}

pub fn render_ablation(axis: &str, rows: &[AblationRow]) -> String {
    let headers = vec![axis.to_string(), "iou".into(), "miou".into()];
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.label.clone(),
                format!("{:.4}", r.summary.iou),
                format!("{:.4}", r.summary.miou),
            ]
        })
        .collect();
    render_markdown(&headers, &body)
}

/// Run one ablation axis with everything else held fixed at the shared seed.
pub fn ablate(cfg: &RunConfig, axis: AblationAxis) -> Result<Vec<AblationRow>> {
    let train_set = build_dataset(&cfg.world, cfg.seed, cfg.num_train_scenes)?;
    let eval_set = build_dataset(
        &cfg.world,
        cfg.seed.wrapping_add(EVAL_SEED_OFFSET),
        cfg.num_eval_scenes.max(1),
    )?;
    let bands = crate::metrics::desk_range_bands();
    let mut rows = Vec::new();
    match axis {
        AblationAxis::Stages => {
            for stages in 0..=3usize {
                let mut c = cfg.clone();
                c.model.fusion.stages_enabled = stages;
                let out = train_teacher(&train_set, &c, None)?;
                let report = evaluate(&out.checkpoint.params, &eval_set, &c.model, &bands)?;
                rows.push(AblationRow {
                    label: format!("stages={stages}"),
                    summary: report.global_summary(),
                });
            }
        }
        AblationAxis::KdComponents => {
            let teacher = train_teacher(&train_set, cfg, None)?.checkpoint;
            let subsets: [(&str, [f64; 3]); 4] = [
                ("none", [0.0, 0.0, 0.0]),
                ("cmrd", [1.0, 0.0, 0.0]),
                ("cmrd+brd", [1.0, 1.0, 0.0]),
                ("cmrd+brd+pdd", [1.0, 1.0, 1.0]),
            ];
            for (label, [c, b, p]) in subsets {
                let mut cc = cfg.clone();
                cc.kd.lambda_cmrd *= c;
                cc.kd.lambda_brd *= b;
                cc.kd.lambda_pdd *= p;
                let out = train_student(&train_set, &teacher, &cc, None)?;
                let report = evaluate(&out.checkpoint.params, &eval_set, &cc.model, &bands)?;
                rows.push(AblationRow {
                    label: label.to_string(),
                    summary: report.global_summary(),
                });
            }
        }
        AblationAxis::KlDirection => {
            let teacher = train_teacher(&train_set, cfg, None)?.checkpoint;
            for reverse in [false, true] {
                let mut cc = cfg.clone();
                cc.kd.kl_reverse = reverse;
                let out = train_student(&train_set, &teacher, &cc, None)?;
                let report = evaluate(&out.checkpoint.params, &eval_set, &cc.model, &bands)?;
                rows.push(AblationRow {
                    label: if reverse { "reverse" } else { "forward" }.to_string(),
                    summary: report.global_summary(),
                });
            }
        }
    }
    Ok(rows)
}

/// Central-difference verification across every differentiable building
/// block. `samples_per_input` trades runtime for coverage; `with_negative`
/// adds a deliberately corrupted entry that must fail.
pub fn gradcheck_suite(seed: u64, samples_per_input: usize, with_negative: bool) -> Vec<GradCheckReport> {
    let opts = GradCheckOptions {
        samples_per_input,
        seed,
        ..Default::default()
    };
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let randn = |rng: &mut ChaCha20Rng, shape: &[usize]| -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    };

    // small world shared by the structured checks
    let grid = GridConfig::new((-1.6, 1.6), (-1.6, 1.6), (-0.4, 1.2), 0.2).unwrap();
    let table = LabelTable::desk_scale();
    let (z, h, w) = grid.dims();
    let c = table.num_channels();
    let mut gt = VoxelGrid::empty(grid.clone(), table.clone());
    for l in gt.labels.iter_mut() {
        *l = rng.gen_range(0..table.num_labels() as u16);
    }

    let mk_conv = |rng: &mut ChaCha20Rng, cout: usize, cin: usize, k: usize| {
        let mut store = ParamsF::new();
        store.init_conv("op", cout, cin, k, rng);
        store
    };

    let mut reports = Vec::new();

    // point encoder: small conv stack probe
    {
        let params = crate::point_branch::PointBranchParams {
            channels: [4, 6, 8],
            depth: 2,
            aux_heads: false,
        };
        let mut store = ParamsF::new();
        init_point_branch_params(&mut store, "pt", 3, table.num_semantic(), &params, &mut rng);
        let input = randn(&mut rng, &[3, h, w]);
        reports.push(check_gradient(
            "point_encoder",
            &[input],
            |t, ids| {
                let bind = store.bind(t, false);
                let out = encode_point_bev(t, &bind, "pt", ids[0], &params);
                let sq = t.mul(out.features[2], out.features[2]);
                t.mean_all(sq)
            },
            &opts,
        ));
    }

    // image branch through the splat
    {
        let iparams = crate::image_branch::ImageBranchParams {
            backbone: [4, 4, 6],
            feat_channels: 4,
            bins: crate::image_branch::DepthBins {
                d_min: 0.4,
                d_max: 2.0,
                count: 8,
            },
            bev: crate::point_branch::PointBranchParams {
                channels: [4, 6, 8],
                depth: 1,
                aux_heads: false,
            },
        };
        let mut store = ParamsF::new();
        init_image_branch_params(&mut store, "img", &iparams, &mut rng);
        let mut world = crate::world::WorldConfig::desk_scale();
        world.grid = grid.clone();
        world.camera.image_h = 16;
        world.camera.image_w = 16;
        world.camera.focal = 16.0;
        world.camera.max_range = 3.0;
        world.camera.height = 0.9;
        world.lidar.height = 0.8;
        world.radar.height = 0.6;
        world.lidar.beams = 2;
        world.lidar.points_per_beam = 10;
        world.radar.budget = 4;
        let sample = crate::world::generate_sample(seed, &world).unwrap();
        let view = sample.cameras.views[0].clone();
        let targets = splat_targets(&view, &iparams.bins, &grid);
        let image = view.image.clone().into_dyn();
        reports.push(check_gradient(
            "image_branch",
            &[image],
            |t, ids| {
                let bind = store.bind(t, false);
                let vf = extract_image_features(t, &bind, "img", ids[0], &iparams);
                let bev = lift_splat(t, vf.features, vf.depth_dist, &targets, &grid);
                let sq = t.mul(bev, bev);
                t.mean_all(sq)
            },
            &opts,
        ));

        // depth supervision head
        let dt = depth_targets(&view, &iparams.bins);
        let dl = randn(&mut rng, &[iparams.bins.count, 2, 2]);
        reports.push(check_gradient(
            "depth_supervision",
            &[dl],
            |t, ids| depth_supervision_loss(t, ids[0], dt.clone()),
            &opts,
        ));
    }

    // fusion U-Net
    {
        let fparams = FusionParams {
            channels: [4, 6, 8, 10],
            stages_enabled: 3,
            num_classes: c,
            z,
        };
        let mut store = ParamsF::new();
        init_fusion_params(&mut store, "fuse", &fparams, &mut rng);
        let inputs = vec![
            randn(&mut rng, &[4, h, w]),
            randn(&mut rng, &[6, h / 2, w / 2]),
            randn(&mut rng, &[8, h / 4, w / 4]),
        ];
        reports.push(check_gradient(
            "fusion_net",
            &inputs,
            |t, ids| {
                let bind = store.bind(t, false);
                let feats = [ids[0], ids[1], ids[2]];
                let out = fusion_forward(t, &bind, "fuse", &feats, None, &fparams, no_hook);
                let sq = t.mul(out.logits, out.logits);
                t.mean_all(sq)
            },
            &opts,
        ));
    }

    // task and distillation losses
    let head = randn(&mut rng, &[c * z, h, w]);
    reports.push(check_gradient(
        "ce",
        &[head.clone()],
        |t, ids| {
            let b = bev_loss(t, ids[0], &gt);
            b.ce
        },
        &opts,
    ));
    reports.push(check_gradient(
        "scal_geo",
        &[head.clone()],
        |t, ids| {
            let mat = logits_to_class_matrix(t, ids[0], c, z);
            let probs = t.softmax(mat, 0);
            scal_loss(t, probs, &gt, ScalMode::Geo)
        },
        &opts,
    ));
    reports.push(check_gradient(
        "scal_sem",
        &[head.clone()],
        |t, ids| {
            let mat = logits_to_class_matrix(t, ids[0], c, z);
            let probs = t.softmax(mat, 0);
            scal_loss(t, probs, &gt, ScalMode::Sem)
        },
        &opts,
    ));
    reports.push(check_gradient(
        "bev_loss",
        &[head.clone()],
        |t, ids| bev_loss(t, ids[0], &gt).total,
        &opts,
    ));

    {
        let cstore = {
            let mut s = ParamsF::new();
            let mut r2 = ChaCha20Rng::seed_from_u64(seed ^ 0xabcd);
            init_cmrd_params(&mut s, 0, 4, 4, &mut r2);
            s
        };
        let mask = build_occupancy_mask(&gt, 0);
        let fs = randn(&mut rng, &[4, h, w]);
        let ft = randn(&mut rng, &[4, h, w]);
        reports.push(check_gradient(
            "cmrd",
            &[fs, ft],
            |t, ids| {
                let bind = cstore.bind(t, false);
                cmrd_loss(t, &bind, 0, ids[0], ids[1], &mask).loss
            },
            &opts,
        ));
    }
    {
        let fs = randn(&mut rng, &[3, h, w]);
        let ft = randn(&mut rng, &[3, h, w]);
        reports.push(check_gradient(
            "brd",
            &[fs, ft],
            |t, ids| brd_loss(t, ids[0], ids[1], (4, 4)),
            &opts,
        ));
    }
    {
        let s = randn(&mut rng, &[c, 12]);
        let tt = randn(&mut rng, &[c, 12]);
        reports.push(check_gradient(
            "pdd",
            &[s, tt],
            |t, ids| pdd_loss(t, ids[0], ids[1], false),
            &opts,
        ));
    }
    {
        let x = randn(&mut rng, &[1, h, w]);
        let store = mk_conv(&mut rng, 1, 1, 1);
        reports.push(check_gradient(
            "aux_heads",
            &[x],
            |t, ids| {
                let bind = store.bind(t, false);
                let occ = crate::nn::conv(t, &bind, "op", ids[0], 1, 0);
                aux_occupancy_loss(t, occ, &gt)
            },
            &opts,
        ));
    }

    if with_negative {
        let corrupt = GradCheckOptions {
            corrupt_scale: Some(1.5),
            ..opts
        };
        let x = randn(&mut rng, &[4, 4]);
        reports.push(check_gradient(
            "negative_control",
            &[x],
            |t, ids| {
                let s = t.sigmoid(ids[0]);
                t.mean_all(s)
            },
            &corrupt,
        ));
    }
    reports
}

pub fn render_gradcheck(reports: &[GradCheckReport]) -> String {
    let headers = vec![
        "op".to_string(),
        "max_rel_err".into(),
        "coords".into(),
        "status".into(),
    ];
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            vec![
                r.name.clone(),
                format!("{:.3e}", r.max_rel_err),
                r.coords_checked.to_string(),
                if r.passed() { "pass" } else { "FAIL" }.to_string(),
            ]
        })
        .collect();
    render_markdown(&headers, &rows)
}

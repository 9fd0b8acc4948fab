//! Completion/segmentation metrics: occupancy IoU, per-class IoU and mIoU,
//! plus range- and condition-stratified breakdowns. Counts are accumulated
//! first and turned into ratios once (micro-averaging).

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::types::{ConditionTag, VoxelGrid};

/// TP/FP/FN triple for one class (or for binary occupancy).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ClassCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ClassCounts {
    pub fn union(&self) -> u64 {
        self.tp + self.fp + self.fn_
    }

    pub fn iou(&self) -> Option<f64> {
        let u = self.union();
        (u > 0).then(|| self.tp as f64 / u as f64)
    }

    pub fn merge(&mut self, other: &ClassCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

/// Aggregated counts for one grid (or any union of grids).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    /// Indexed by semantic label − 1.
    pub per_class: Vec<ClassCounts>,
    pub occupancy: ClassCounts,
    /// Voxels that entered the counts (noise excluded).
    pub considered: u64,
}

impl ConfusionCounts {
    pub fn new(num_semantic: usize) -> Self {
        ConfusionCounts {
            per_class: vec![ClassCounts::default(); num_semantic],
            occupancy: ClassCounts::default(),
            considered: 0,
        }
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        assert_eq!(self.per_class.len(), other.per_class.len());
        for (a, b) in self.per_class.iter_mut().zip(&other.per_class) {
            a.merge(b);
        }
        self.occupancy.merge(&other.occupancy);
        self.considered += other.considered;
    }
}

/// Count agreement between a prediction and ground truth, restricted to
/// voxels where `keep` holds. Ground-truth noise voxels are always excluded.
pub fn confusion_counts_where(
    pred: &VoxelGrid,
    gt: &VoxelGrid,
    keep: impl Fn(usize, usize, usize) -> bool,
) -> Result<ConfusionCounts> {
    if pred.grid != gt.grid {
        return Err(Error::config("prediction and ground truth grids differ"));
    }
    let mut counts = ConfusionCounts::new(gt.table.num_semantic());
    for ((zi, hi, wi), &g) in gt.labels.indexed_iter() {
        if gt.table.is_noise(g) || !keep(zi, hi, wi) {
            continue;
        }
        let p = pred.labels[[zi, hi, wi]];
        counts.considered += 1;
        let (go, po) = (gt.table.is_semantic(g), gt.table.is_semantic(p));
        match (po, go) {
            (true, true) => counts.occupancy.tp += 1,
            (true, false) => counts.occupancy.fp += 1,
            (false, true) => counts.occupancy.fn_ += 1,
            (false, false) => {}
        }
        if go {
            if p == g {
                counts.per_class[g as usize - 1].tp += 1;
            } else {
                counts.per_class[g as usize - 1].fn_ += 1;
                if po {
                    counts.per_class[p as usize - 1].fp += 1;
                }
            }
        } else if po {
            counts.per_class[p as usize - 1].fp += 1;
        }
    }
    Ok(counts)
}

pub fn confusion_counts(pred: &VoxelGrid, gt: &VoxelGrid) -> Result<ConfusionCounts> {
    confusion_counts_where(pred, gt, |_, _, _| true)
}

/// Final ratios derived from counts.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsSummary {
    pub iou: f64,
    /// `None` for classes with zero union (no support and no predictions).
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
}

pub fn iou_miou(counts: &ConfusionCounts) -> MetricsSummary {
    let per_class_iou: Vec<Option<f64>> = counts.per_class.iter().map(|c| c.iou()).collect();
    let present: Vec<f64> = per_class_iou.iter().flatten().copied().collect();
    let miou = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    MetricsSummary {
        iou: counts.occupancy.iou().unwrap_or(0.0),
        per_class_iou,
        miou,
    }
}

/// The benchmark's range bands in meters, by horizontal distance from origin.
pub fn standard_range_bands() -> Vec<(f64, f64)> {
    vec![(0.0, 20.0), (20.0, 30.0), (30.0, 50.0)]
}

/// Bands scaled to the small default grid.
pub fn desk_range_bands() -> Vec<(f64, f64)> {
    vec![(0.0, 3.0), (3.0, 5.0), (5.0, 10.0)]
}

fn validate_bands(bands: &[(f64, f64)]) -> Result<()> {
    for (i, &(lo, hi)) in bands.iter().enumerate() {
        if lo >= hi {
            return Err(Error::config(format!("empty range band ({lo}, {hi})")));
        }
        for &(lo2, hi2) in &bands[i + 1..] {
            if lo < hi2 && lo2 < hi {
                return Err(Error::config(format!(
                    "overlapping range bands ({lo}, {hi}) and ({lo2}, {hi2})"
                )));
            }
        }
    }
    Ok(())
}

/// Per-band counts; voxels fall into the band containing the horizontal
/// distance of their center from the origin (half-open intervals).
pub fn range_breakdown(
    pred: &VoxelGrid,
    gt: &VoxelGrid,
    bands: &[(f64, f64)],
) -> Result<Vec<((f64, f64), ConfusionCounts)>> {
    validate_bands(bands)?;
    bands
        .iter()
        .map(|&(lo, hi)| {
            let counts = confusion_counts_where(pred, gt, |zi, hi_, wi| {
                let (x, y, _) = gt.grid.voxel_center(zi, hi_, wi);
                let r = (x * x + y * y).sqrt();
                r >= lo && r < hi
            })?;
            Ok(((lo, hi), counts))
        })
        .collect()
}

/// Aggregate per-sample counts by condition tag; metrics are computed from
/// the summed counts of each group, not averaged per sample.
pub fn condition_breakdown(
    samples: &[(ConditionTag, ConfusionCounts)],
) -> BTreeMap<ConditionTag, ConfusionCounts> {
    let mut groups: BTreeMap<ConditionTag, ConfusionCounts> = BTreeMap::new();
    for (tag, counts) in samples {
        groups
            .entry(*tag)
            .and_modify(|acc| acc.merge(counts))
            .or_insert_with(|| counts.clone());
    }
    groups
}

/// Render rows as a Markdown table.
pub fn render_markdown(headers: &[String], rows: &[Vec<String>]) -> String {
    let mut out = String::new();
    out.push_str(&format!("| {} |\n", headers.join(" | ")));
    out.push_str(&format!(
        "|{}\n",
        headers.iter().map(|_| " --- |").collect::<String>()
    ));
    for row in rows {
        out.push_str(&format!("| {} |\n", row.join(" | ")));
    }
    out
}

/// Render rows as CSV (simple fields, no quoting needed by our emitters).
pub fn render_csv(headers: &[String], rows: &[Vec<String>]) -> String {
    let mut out = String::new();
    out.push_str(&headers.join(","));
    out.push('\n');
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{GridConfig, LabelTable};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn random_pair(seed: u64) -> (VoxelGrid, VoxelGrid) {
        let grid = GridConfig::new((-1.6, 1.6), (-1.6, 1.6), (0.0, 0.8), 0.2).unwrap();
        let table = LabelTable::new(vec!["a".into(), "b".into(), "c".into()], true);
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut gt = VoxelGrid::empty(grid.clone(), table.clone());
        gt.labels.mapv_inplace(|_| rng.gen_range(0..5u16)); // includes noise=5? no: 0..5 = 0..=4
        let mut pred = VoxelGrid::empty(grid, table);
        pred.labels.mapv_inplace(|_| rng.gen_range(0..4u16));
        (pred, gt)
    }

    #[test]
    fn perfect_prediction_no_errors() {
        let (_, gt) = random_pair(0);
        let counts = confusion_counts(&gt, &gt).unwrap();
        assert_eq!(counts.occupancy.fp, 0);
        assert_eq!(counts.occupancy.fn_, 0);
        for c in &counts.per_class {
            assert_eq!(c.fp, 0);
            assert_eq!(c.fn_, 0);
        }
        let m = iou_miou(&counts);
        assert_eq!(m.iou, 1.0);
        assert_eq!(m.miou, 1.0);
    }

    #[test]
    fn all_empty_prediction_counts_misses() {
        let (_, gt) = random_pair(1);
        let empty = VoxelGrid::empty(gt.grid.clone(), gt.table.clone());
        let counts = confusion_counts(&empty, &gt).unwrap();
        let n_occ = gt
            .labels
            .iter()
            .filter(|&&l| gt.table.is_semantic(l))
            .count() as u64;
        assert_eq!(counts.occupancy.fn_, n_occ);
        assert_eq!(counts.occupancy.tp, 0);
        assert_eq!(counts.occupancy.fp, 0);
    }

    #[test]
    fn counts_match_scalar_oracle() {
        for seed in 0..10 {
            let (pred, gt) = random_pair(seed);
            let counts = confusion_counts(&pred, &gt).unwrap();
            let c = gt.table.num_semantic();
            let mut want = ConfusionCounts::new(c);
            for (idx, &g) in gt.labels.indexed_iter() {
                if gt.table.is_noise(g) {
                    continue;
                }
                want.considered += 1;
                let p = pred.labels[idx];
                for cls in 1..=c as u16 {
                    match (p == cls, g == cls) {
                        (true, true) => want.per_class[cls as usize - 1].tp += 1,
                        (true, false) => want.per_class[cls as usize - 1].fp += 1,
                        (false, true) => want.per_class[cls as usize - 1].fn_ += 1,
                        (false, false) => {}
                    }
                }
                match (p != 0, g != 0 && !gt.table.is_noise(g)) {
                    (true, true) => want.occupancy.tp += 1,
                    (true, false) => want.occupancy.fp += 1,
                    (false, true) => want.occupancy.fn_ += 1,
                    (false, false) => {}
                }
            }
            assert_eq!(counts, want);
        }
    }

    #[test]
    fn iou_formula_and_third_identity() {
        let c = ClassCounts {
            tp: 7,
            fp: 7,
            fn_: 7,
        };
        assert!((c.iou().unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        for _ in 0..50 {
            let c = ClassCounts {
                tp: rng.gen_range(0..100),
                fp: rng.gen_range(0..100),
                fn_: rng.gen_range(0..100),
            };
            if let Some(iou) = c.iou() {
                let want = c.tp as f64 / (c.tp + c.fp + c.fn_) as f64;
                assert_eq!(iou, want);
            }
        }
    }

    #[test]
    fn zero_support_classes_are_excluded_from_miou() {
        let mut counts = ConfusionCounts::new(3);
        counts.per_class[0] = ClassCounts {
            tp: 5,
            fp: 0,
            fn_: 5,
        };
        // classes 1 and 2 untouched → excluded
        let m = iou_miou(&counts);
        assert_eq!(m.per_class_iou[1], None);
        assert_eq!(m.per_class_iou[2], None);
        assert_eq!(m.miou, 0.5);
    }

    #[test]
    fn single_band_equals_global_and_partition_identity() {
        let (pred, gt) = random_pair(3);
        let global = confusion_counts(&pred, &gt).unwrap();
        let single = range_breakdown(&pred, &gt, &[(0.0, 1e9)]).unwrap();
        assert_eq!(single[0].1, global);

        let bands = [(0.0, 1.0), (1.0, 1.8), (1.8, 1e9)];
        let parts = range_breakdown(&pred, &gt, &bands).unwrap();
        let mut sum = ConfusionCounts::new(gt.table.num_semantic());
        for (_, c) in &parts {
            sum.merge(c);
        }
        assert_eq!(sum, global);
    }

    #[test]
    fn overlapping_bands_rejected() {
        let (pred, gt) = random_pair(4);
        assert!(range_breakdown(&pred, &gt, &[(0.0, 2.0), (1.5, 3.0)]).is_err());
        assert!(range_breakdown(&pred, &gt, &[(2.0, 2.0)]).is_err());
        assert_eq!(standard_range_bands().len(), 3);
        assert!(validate_bands(&standard_range_bands()).is_ok());
        assert!(validate_bands(&desk_range_bands()).is_ok());
    }

    #[test]
    fn condition_groups_reproduce_global() {
        let mut samples = Vec::new();
        let mut global = ConfusionCounts::new(3);
        for seed in 0..6 {
            let (pred, gt) = random_pair(10 + seed);
            let counts = confusion_counts(&pred, &gt).unwrap();
            global.merge(&counts);
            let tag = match seed % 3 {
                0 => ConditionTag::Sun,
                1 => ConditionTag::Rain,
                _ => ConditionTag::Night,
            };
            samples.push((tag, counts));
        }
        let groups = condition_breakdown(&samples);
        assert_eq!(groups.len(), 3);
        let mut sum = ConfusionCounts::new(3);
        for c in groups.values() {
            sum.merge(c);
        }
        assert_eq!(sum, global);

        // single-tag grouping equals global
        let all_sun: Vec<_> = samples
            .iter()
            .map(|(_, c)| (ConditionTag::Sun, c.clone()))
            .collect();
        let one = condition_breakdown(&all_sun);
        assert_eq!(one[&ConditionTag::Sun], global);
    }

    #[test]
    fn renderers_emit_expected_layout() {
        let headers = vec!["name".to_string(), "iou".to_string()];
        let rows = vec![vec!["x".to_string(), "0.5".to_string()]];
        let md = render_markdown(&headers, &rows);
        assert!(md.contains("| name | iou |"));
        assert!(md.contains("| x | 0.5 |"));
        let csv = render_csv(&headers, &rows);
        assert_eq!(csv, "name,iou\nx,0.5\n");
    }
}

//! Random over/under-sampling, the dominant-share subset schedule, label-exact
//! augmentation and augmentation plans derived from attention and relevance.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::behavior::AttentionSummary;
use crate::dataset::{AnnotationRecord, BBox, ClassDistribution, Condition, DatasetManifest};
use crate::error::{Error, Result};
use crate::image::GrayImage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ResampleMode {
    Oversample,
    Undersample,
    Combined,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResamplePlan {
    pub target_counts: BTreeMap<String, usize>,
    pub mode: ResampleMode,
    pub seed: u64,
}

impl ResamplePlan {
    /// Every class raised to the largest class count.
    pub fn to_max(manifest: &DatasetManifest, seed: u64) -> Result<Self> {
        Self::uniform_target(manifest, seed, ResampleMode::Oversample, |c| c.iter().copied().max())
    }

    /// Every class cut to the smallest class count.
    pub fn to_min(manifest: &DatasetManifest, seed: u64) -> Result<Self> {
        Self::uniform_target(manifest, seed, ResampleMode::Undersample, |c| c.iter().copied().min())
    }

    /// Every class moved to the median class count (lower median for an even number of classes).
    pub fn to_median(manifest: &DatasetManifest, seed: u64) -> Result<Self> {
        Self::uniform_target(manifest, seed, ResampleMode::Combined, |c| {
            let mut v = c.to_vec();
            v.sort_unstable();
            v.get((v.len().max(1) - 1) / 2).copied()
        })
    }

    fn uniform_target(
        manifest: &DatasetManifest,
        seed: u64,
        mode: ResampleMode,
        pick: impl Fn(&[usize]) -> Option<usize>,
    ) -> Result<Self> {
        let counts = manifest.class_counts();
        let values: Vec<usize> = counts.values().copied().collect();
        let target = pick(&values).ok_or_else(|| Error::Empty("cannot resample an empty manifest".into()))?;
        Ok(ResamplePlan {
            target_counts: counts.keys().map(|k| (k.clone(), target)).collect(),
            mode,
            seed,
        })
    }

    fn check(&self, counts: &BTreeMap<String, usize>) -> Result<()> {
        for class in counts.keys() {
            if !self.target_counts.contains_key(class) {
                return Err(Error::InvalidArgument(format!("resample plan has no target for class '{class}'")));
            }
        }
        for (class, &target) in &self.target_counts {
            let have = counts.get(class).copied().unwrap_or(0);
            if have == 0 && target > 0 {
                return Err(Error::ZeroCount(class.clone()));
            }
            match self.mode {
                ResampleMode::Oversample if target < have => {
                    return Err(Error::InvalidArgument(format!(
                        "oversample target {target} for '{class}' is below its current count {have}"
                    )))
                }
                ResampleMode::Undersample if target > have => {
                    return Err(Error::InvalidArgument(format!(
                        "undersample target {target} for '{class}' is above its current count {have}"
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Source index of every output record. Classes are visited in label order;
/// kept originals stay in manifest order and duplicates follow them.
fn resample_indices(manifest: &DatasetManifest, plan: &ResamplePlan) -> Result<Vec<usize>> {
    let counts = manifest.class_counts();
    plan.check(&counts)?;
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut keep = vec![false; manifest.len()];
    let mut extra = Vec::new();
    for (class, &target) in &plan.target_counts {
        let idx = manifest.indices_of(class);
        if target <= idx.len() {
            let mut chosen: Vec<usize> = sample(&mut rng, idx.len(), target).into_vec();
            chosen.sort_unstable();
            for c in chosen {
                keep[idx[c]] = true;
            }
        } else {
            for &i in &idx {
                keep[i] = true;
            }
            extra.extend((idx.len()..target).map(|_| idx[rng.gen_range(0..idx.len())]));
        }
    }
    let mut out: Vec<usize> = (0..manifest.len()).filter(|&i| keep[i]).collect();
    out.extend(extra);
    Ok(out)
}

fn run_plan(manifest: &DatasetManifest, plan: &ResamplePlan, mode: ResampleMode) -> Result<(DatasetManifest, Vec<usize>)> {
    if plan.mode != mode {
        return Err(Error::InvalidArgument(format!("expected a {mode:?} plan, got {:?}", plan.mode)));
    }
    let idx = resample_indices(manifest, plan)?;
    Ok((manifest.subset(&idx), idx))
}

/// Duplicates records drawn uniformly with replacement until every class hits its target.
pub fn random_oversample(manifest: &DatasetManifest, plan: &ResamplePlan) -> Result<DatasetManifest> {
    Ok(run_plan(manifest, plan, ResampleMode::Oversample)?.0)
}

/// Keeps a uniform random subset (without replacement) of each class.
pub fn random_undersample(manifest: &DatasetManifest, plan: &ResamplePlan) -> Result<DatasetManifest> {
    Ok(run_plan(manifest, plan, ResampleMode::Undersample)?.0)
}

/// Any plan, returning the output manifest and the source index of each record.
/// `Combined` undersamples classes above target, then oversamples those below.
pub fn resample_with_indices(manifest: &DatasetManifest, plan: &ResamplePlan) -> Result<(DatasetManifest, Vec<usize>)> {
    run_plan(manifest, plan, plan.mode)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetStep {
    pub dominant_class: String,
    pub dominant_share: f64,
    pub budget: usize,
    pub allocation: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetSchedule {
    pub steps: Vec<SubsetStep>,
}

/// Per-class allocation of `budget` with the first class dominant at `share`.
/// The two minorities split the remainder equally; odd units go to the dominant class.
pub fn allocate(classes: &[String; 3], budget: usize, share: f64) -> BTreeMap<String, usize> {
    // tolerate representation error such as 1/3 * 300 = 99.999...
    let dom = ((share * budget as f64) + 1e-9).floor() as usize;
    let dom = dom.min(budget);
    let minor = (budget - dom) / 2;
    let mut m = BTreeMap::new();
    m.insert(classes[1].clone(), minor);
    m.insert(classes[2].clone(), minor);
    m.insert(classes[0].clone(), budget - 2 * minor);
    m
}

/// Dominant share interpolated linearly from `start_share` to `end_share` over `n_steps`.
pub fn build_subset_schedule(
    classes: &[String; 3],
    budget: usize,
    start_share: f64,
    end_share: f64,
    n_steps: usize,
) -> Result<SubsetSchedule> {
    if budget < 3 {
        return Err(Error::InvalidArgument(format!("subset budget {budget} must be >= 3")));
    }
    if !(0.0 < end_share && end_share <= start_share && start_share <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "shares must satisfy 0 < end ({end_share}) <= start ({start_share}) <= 1"
        )));
    }
    if n_steps == 0 {
        return Err(Error::InvalidArgument("n_steps must be >= 1".into()));
    }
    if classes[0] == classes[1] || classes[0] == classes[2] || classes[1] == classes[2] {
        return Err(Error::InvalidArgument("subset schedule needs three distinct classes".into()));
    }
    let steps = (0..n_steps)
        .map(|i| {
            let share = if n_steps == 1 {
                start_share
            } else {
                start_share + (end_share - start_share) * i as f64 / (n_steps - 1) as f64
            };
            SubsetStep {
                dominant_class: classes[0].clone(),
                dominant_share: share,
                budget,
                allocation: allocate(classes, budget, share),
            }
        })
        .collect();
    Ok(SubsetSchedule { steps })
}

/// Draws one schedule step's allocation from `manifest` without replacement.
pub fn apply_subset_step(manifest: &DatasetManifest, step: &SubsetStep, seed: u64) -> Result<DatasetManifest> {
    let plan = ResamplePlan {
        target_counts: step.allocation.clone(),
        mode: ResampleMode::Undersample,
        seed,
    };
    let counts = manifest.class_counts();
    if counts.keys().any(|k| !plan.target_counts.contains_key(k)) {
        let idx: Vec<usize> = (0..manifest.len())
            .filter(|&i| plan.target_counts.contains_key(&manifest.records[i].class_label))
            .collect();
        return random_undersample(&manifest.subset(&idx), &plan);
    }
    random_undersample(manifest, &plan)
}

/// Label-exact augmentation. Rotations are clockwise by right angles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum AugmentOp {
    Rot90CW,
    Rot180,
    Rot270CW,
    FlipH,
    FlipV,
    Brightness(f64),
    Contrast(f64),
    Zoom(f64),
}

impl AugmentOp {
    pub const GEOMETRIC: [AugmentOp; 5] = [
        AugmentOp::FlipH,
        AugmentOp::FlipV,
        AugmentOp::Rot90CW,
        AugmentOp::Rot180,
        AugmentOp::Rot270CW,
    ];

    pub fn is_geometric(&self) -> bool {
        !matches!(self, AugmentOp::Brightness(_) | AugmentOp::Contrast(_))
    }

    /// The op undoing this one on box coordinates.
    pub fn inverse(&self) -> AugmentOp {
        match *self {
            AugmentOp::Rot90CW => AugmentOp::Rot270CW,
            AugmentOp::Rot270CW => AugmentOp::Rot90CW,
            AugmentOp::Brightness(d) => AugmentOp::Brightness(-d),
            AugmentOp::Contrast(f) => AugmentOp::Contrast(1.0 / f),
            AugmentOp::Zoom(f) => AugmentOp::Zoom(1.0 / f),
            op => op,
        }
    }

    /// Short identifier used in derived sample ids.
    pub fn tag(&self) -> String {
        match self {
            AugmentOp::Rot90CW => "rot90".into(),
            AugmentOp::Rot180 => "rot180".into(),
            AugmentOp::Rot270CW => "rot270".into(),
            AugmentOp::FlipH => "fliph".into(),
            AugmentOp::FlipV => "flipv".into(),
            AugmentOp::Brightness(d) => format!("bright{d}"),
            AugmentOp::Contrast(f) => format!("contrast{f}"),
            AugmentOp::Zoom(f) => format!("zoom{f}"),
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            AugmentOp::Zoom(f) | AugmentOp::Contrast(f) if !(f > 0.0 && f.is_finite()) => Err(Error::InvalidArgument(
                format!("{} factor must be positive, got {f}", if matches!(self, AugmentOp::Zoom(_)) { "zoom" } else { "contrast" }),
            )),
            AugmentOp::Brightness(d) if !d.is_finite() => Err(Error::InvalidArgument("brightness delta must be finite".into())),
            _ => Ok(()),
        }
    }

    /// Box and `(width, height)` after the op, in an image of size `(w, h)`.
    pub fn map_box(&self, b: &BBox, (w, h): (f64, f64)) -> Result<(BBox, (f64, f64))> {
        self.validate()?;
        let out = match *self {
            AugmentOp::FlipH => (BBox::new(w - b.x2, b.y1, w - b.x1, b.y2), (w, h)),
            AugmentOp::FlipV => (BBox::new(b.x1, h - b.y2, b.x2, h - b.y1), (w, h)),
            AugmentOp::Rot90CW => (BBox::new(h - b.y2, b.x1, h - b.y1, b.x2), (h, w)),
            AugmentOp::Rot180 => (BBox::new(w - b.x2, h - b.y2, w - b.x1, h - b.y1), (w, h)),
            AugmentOp::Rot270CW => (BBox::new(b.y1, w - b.x2, b.y2, w - b.x1), (h, w)),
            AugmentOp::Zoom(f) => {
                let (cx, cy) = (w / 2.0, h / 2.0);
                let nb = BBox::new(cx + (b.x1 - cx) * f, cy + (b.y1 - cy) * f, cx + (b.x2 - cx) * f, cy + (b.y2 - cy) * f);
                if !nb.within(w, h) {
                    return Err(Error::InvalidArgument(format!("zoom {f} pushes the box outside the {w}x{h} frame")));
                }
                (nb, (w, h))
            }
            AugmentOp::Brightness(_) | AugmentOp::Contrast(_) => (*b, (w, h)),
        };
        Ok(out)
    }

    pub fn apply_image(&self, img: &GrayImage) -> Result<GrayImage> {
        self.validate()?;
        Ok(match *self {
            AugmentOp::FlipH => img.flip_horizontal(),
            AugmentOp::FlipV => img.flip_vertical(),
            AugmentOp::Rot90CW => img.rotate90_cw(),
            AugmentOp::Rot180 => img.rotate90_cw().rotate90_cw(),
            AugmentOp::Rot270CW => img.rotate90_cw().rotate90_cw().rotate90_cw(),
            AugmentOp::Zoom(f) => img.zoom(f),
            AugmentOp::Brightness(d) => img.map_clamped(|v| v + d),
            AugmentOp::Contrast(f) => img.map_clamped(|v| (v - 0.5) * f + 0.5),
        })
    }
}

/// Applies `op` to the record's box and image size. The sample id is kept.
pub fn apply_augment(record: &AnnotationRecord, op: AugmentOp) -> Result<AnnotationRecord> {
    record.validate()?;
    let (w, h) = record.image_size;
    let (bbox, (nw, nh)) = op.map_box(&record.bbox, (w as f64, h as f64))?;
    let mut out = record.clone();
    out.bbox = bbox;
    out.image_size = (nw as u32, nh as u32);
    Ok(out)
}

/// Applies `op` to a record and its image together.
pub fn apply_augment_with_image(
    record: &AnnotationRecord,
    image: &GrayImage,
    op: AugmentOp,
) -> Result<(AnnotationRecord, GrayImage)> {
    if (image.width as u32, image.height as u32) != record.image_size {
        return Err(Error::ShapeMismatch {
            expected: vec![record.image_size.0 as usize, record.image_size.1 as usize],
            actual: vec![image.width, image.height],
        });
    }
    Ok((apply_augment(record, op)?, op.apply_image(image)?))
}

/// FNV-1a over the seed bytes followed by the id bytes.
pub fn stable_hash(seed: u64, id: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in seed.to_le_bytes().iter().chain(id.as_bytes()) {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Op for one record derived only from `(seed, sample_id)`, so the choice does
/// not depend on processing order.
pub fn op_for_record(seed: u64, sample_id: &str, ops: &[AugmentOp]) -> Result<AugmentOp> {
    if ops.is_empty() {
        return Err(Error::Empty("no augmentation ops to choose from".into()));
    }
    Ok(ops[(stable_hash(seed, sample_id) % ops.len() as u64) as usize])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentRequest {
    pub class_label: String,
    pub condition: Condition,
    pub op: AugmentOp,
    pub count: usize,
    /// Attention mass on the ground truth that triggered the request.
    pub mass: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttentionPlanConfig {
    pub tau_att: f64,
    pub kappa: f64,
    /// Ops cycled over the requested copies of each group.
    pub ops: Vec<AugmentOp>,
}

impl Default for AttentionPlanConfig {
    fn default() -> Self {
        AttentionPlanConfig {
            tau_att: 0.3,
            kappa: 1.0,
            ops: vec![AugmentOp::FlipH],
        }
    }
}

/// For every `(class, condition)` whose mean attention mass inside the ground
/// truth is below `tau_att`, requests `ceil(kappa (tau_att - mass) / tau_att * n)`
/// copies, `n` being the group's current count.
pub fn attention_guided_augment_plan(
    summary: &AttentionSummary,
    dist: &ClassDistribution,
    config: &AttentionPlanConfig,
) -> Result<Vec<AugmentRequest>> {
    if !(config.tau_att > 0.0 && config.kappa >= 0.0) {
        return Err(Error::InvalidArgument("tau_att must be > 0 and kappa >= 0".into()));
    }
    if config.ops.is_empty() {
        return Err(Error::Empty("attention plan needs at least one op".into()));
    }
    let mut out = Vec::new();
    for (class, by_cond) in &summary.mass_on_gt {
        for (&cond, &mass) in by_cond {
            if mass >= config.tau_att {
                continue;
            }
            let n = dist.condition_count(class, cond);
            let total = (config.kappa * (config.tau_att - mass) / config.tau_att * n as f64).ceil() as usize;
            if total == 0 {
                continue;
            }
            let k = config.ops.len();
            for (i, op) in config.ops.iter().enumerate() {
                let count = total / k + usize::from(i < total % k);
                if count > 0 {
                    out.push(AugmentRequest {
                        class_label: class.clone(),
                        condition: cond,
                        op: *op,
                        count,
                        mass,
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Per-sample relevance statistics on a labeled split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceStat {
    pub sample_id: String,
    /// Share of input-layer relevance on patches whose centers lie in the box.
    pub in_box_fraction: f64,
    pub loss: f64,
}

pub const DEFAULT_TAU_REL: f64 = 0.5;

/// Misclassified samples with in-box relevance below `tau_rel`, highest loss first.
pub fn lrp_informed_sample_plan(stats: &[RelevanceStat], misclassified: &[String], tau_rel: f64) -> Vec<String> {
    let wrong: std::collections::HashSet<&str> = misclassified.iter().map(String::as_str).collect();
    let mut hits: Vec<&RelevanceStat> = stats
        .iter()
        .filter(|s| wrong.contains(s.sample_id.as_str()) && s.in_box_fraction < tau_rel)
        .collect();
    hits.sort_by(|a, b| b.loss.total_cmp(&a.loss));
    hits.into_iter().map(|s| s.sample_id.clone()).collect()
}

/// Everything an augmentation pass will do, serialized next to its outputs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AugmentPlan {
    pub requests: Vec<AugmentRequest>,
    pub oversample_ids: Vec<String>,
}

/// Indices of the records a request augments: `count` draws with replacement
/// from the matching `(class, condition)` group.
pub fn select_sources(manifest: &DatasetManifest, req: &AugmentRequest, seed: u64) -> Vec<usize> {
    let pool: Vec<usize> = manifest
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.class_label == req.class_label && r.condition == req.condition)
        .map(|(i, _)| i)
        .collect();
    if pool.is_empty() {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(stable_hash(seed, &format!("{}|{}|{}", req.class_label, req.condition, req.op.tag())));
    (0..req.count).map(|_| pool[rng.gen_range(0..pool.len())]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::compute_distribution;

    fn rec(id: &str, class: &str, cond: Condition) -> AnnotationRecord {
        AnnotationRecord {
            sample_id: id.into(),
            class_label: class.into(),
            bbox: BBox::new(10.0, 20.0, 30.0, 40.0),
            condition: cond,
            image_ref: None,
            image_size: (100, 100),
        }
    }

    fn manifest(counts: &[(&str, usize)]) -> DatasetManifest {
        let mut records = Vec::new();
        for (c, n) in counts {
            for i in 0..*n {
                records.push(rec(&format!("{c}{i}"), c, Condition::Normal));
            }
        }
        DatasetManifest::new(records, 0).unwrap()
    }

    fn three() -> [String; 3] {
        ["ped".into(), "cyc".into(), "moto".into()]
    }

    #[test]
    fn oversample_to_max() {
        let m = manifest(&[("ped", 100), ("cyc", 10), ("moto", 12)]);
        let plan = ResamplePlan::to_max(&m, 3).unwrap();
        let out = random_oversample(&m, &plan).unwrap();
        assert!(out.class_counts().values().all(|&c| c == 100));
        assert_eq!(&out.records[..m.len()], &m.records[..]);
        assert_eq!(out, random_oversample(&m, &plan).unwrap());
    }

    #[test]
    fn identity_targets() {
        let m = manifest(&[("a", 4), ("b", 2)]);
        let mut plan = ResamplePlan {
            target_counts: m.class_counts(),
            mode: ResampleMode::Oversample,
            seed: 1,
        };
        assert_eq!(random_oversample(&m, &plan).unwrap(), m);
        plan.mode = ResampleMode::Undersample;
        assert_eq!(random_undersample(&m, &plan).unwrap(), m);
    }

    #[test]
    fn undersample_exact_and_seeded() {
        let m = manifest(&[("a", 4), ("b", 2)]);
        let plan = ResamplePlan::to_min(&m, 9).unwrap();
        let out = random_undersample(&m, &plan).unwrap();
        assert_eq!(out.class_counts().values().copied().collect::<Vec<_>>(), vec![2, 2]);
        let mut wrong = plan.clone();
        wrong.target_counts.insert("b".into(), 3);
        assert!(random_undersample(&m, &wrong).is_err());
    }

    #[test]
    fn oversample_below_current_is_an_error() {
        let m = manifest(&[("a", 4), ("b", 2)]);
        let plan = ResamplePlan {
            target_counts: [("a".to_string(), 3), ("b".to_string(), 4)].into_iter().collect(),
            mode: ResampleMode::Oversample,
            seed: 0,
        };
        assert!(random_oversample(&m, &plan).is_err());
    }

    #[test]
    fn combined_goes_to_median_and_is_a_fixed_point() {
        let m = manifest(&[("a", 50), ("b", 7), ("c", 11)]);
        let plan = ResamplePlan::to_median(&m, 2).unwrap();
        let (once, _) = resample_with_indices(&m, &plan).unwrap();
        assert!(once.class_counts().values().all(|&c| c == 11));
        let plan2 = ResamplePlan::to_median(&once, 2).unwrap();
        let (twice, _) = resample_with_indices(&once, &plan2).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn schedule_allocations() {
        let s = build_subset_schedule(&three(), 300, 0.67, 0.67, 1).unwrap();
        let a = &s.steps[0].allocation;
        assert_eq!((a["ped"], a["cyc"], a["moto"]), (202, 49, 49));
        let eq = allocate(&three(), 300, 1.0 / 3.0);
        assert!(eq.values().all(|&v| v == 100));
        let s = build_subset_schedule(&three(), 100, 0.9, 0.5, 5).unwrap();
        assert_eq!(s.steps.len(), 5);
        assert!((s.steps[4].dominant_share - 0.5).abs() < 1e-12);
        assert!(build_subset_schedule(&three(), 2, 0.5, 0.5, 1).is_err());
        assert!(build_subset_schedule(&three(), 300, 0.5, 0.6, 1).is_err());
    }

    #[test]
    fn box_maps() {
        let r = rec("x", "a", Condition::Normal);
        let f = apply_augment(&r, AugmentOp::FlipH).unwrap();
        assert_eq!(f.bbox, BBox::new(70.0, 20.0, 90.0, 40.0));
        assert_eq!(apply_augment(&f, AugmentOp::FlipH).unwrap(), r);
        let rot = apply_augment(&r, AugmentOp::Rot90CW).unwrap();
        assert_eq!(rot.bbox, BBox::new(60.0, 10.0, 80.0, 30.0));
        assert!(apply_augment(&r, AugmentOp::Zoom(0.0)).is_err());
        assert!(apply_augment(&r, AugmentOp::Zoom(-1.0)).is_err());
    }

    #[test]
    fn rotation_of_non_square_swaps_size_and_matches_pixels() {
        let mut r = rec("x", "a", Condition::Normal);
        r.image_size = (6, 4);
        r.bbox = BBox::new(1.0, 0.0, 2.0, 1.0);
        let mut img = GrayImage::new(6, 4);
        img.set(1, 0, 1.0);
        for op in AugmentOp::GEOMETRIC {
            let (r2, img2) = apply_augment_with_image(&r, &img, op).unwrap();
            assert_eq!((img2.width as u32, img2.height as u32), r2.image_size);
            let (cx, cy) = r2.bbox.center();
            assert_eq!(img2.get(cx.floor() as usize, cy.floor() as usize), 1.0, "{op:?}");
        }
    }

    #[test]
    fn photometric_ops_clamp_and_keep_box() {
        let r = rec("x", "a", Condition::Normal);
        let img = GrayImage::from_vec(100, 100, vec![0.9; 10000]).unwrap();
        let (r2, img2) = apply_augment_with_image(&r, &img, AugmentOp::Brightness(0.5)).unwrap();
        assert_eq!(r2.bbox, r.bbox);
        assert!(img2.data.iter().all(|&v| v == 1.0));
        let (_, img3) = apply_augment_with_image(&r, &img, AugmentOp::Contrast(10.0)).unwrap();
        assert!(img3.data.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn zoom_box_checks() {
        let r = rec("x", "a", Condition::Normal);
        let z = apply_augment(&r, AugmentOp::Zoom(0.5)).unwrap();
        assert_eq!(z.bbox, BBox::new(30.0, 35.0, 40.0, 45.0));
        assert!(apply_augment(&r, AugmentOp::Zoom(3.0)).is_err());
    }

    #[test]
    fn record_op_is_order_independent() {
        let a = op_for_record(5, "s1", &AugmentOp::GEOMETRIC).unwrap();
        let b = op_for_record(5, "s1", &AugmentOp::GEOMETRIC).unwrap();
        assert_eq!(a, b);
        assert!(op_for_record(5, "s1", &[]).is_err());
    }

    fn summary(mass: &[(&str, Condition, f64)]) -> AttentionSummary {
        let mut s = AttentionSummary::default();
        for (c, cond, m) in mass {
            s.mass_on_gt.entry(c.to_string()).or_default().insert(*cond, *m);
        }
        s
    }

    #[test]
    fn attention_plan_rule() {
        let mut records = Vec::new();
        for i in 0..10 {
            records.push(rec(&format!("c{i}"), "cyc", Condition::Night));
            records.push(rec(&format!("p{i}"), "ped", Condition::Normal));
        }
        let dist = compute_distribution(&DatasetManifest::new(records, 0).unwrap()).unwrap();
        let cfg = AttentionPlanConfig::default();
        let none = attention_guided_augment_plan(&summary(&[("cyc", Condition::Night, 0.5)]), &dist, &cfg).unwrap();
        assert!(none.is_empty());
        let p1 = attention_guided_augment_plan(&summary(&[("cyc", Condition::Night, 0.27)]), &dist, &cfg).unwrap();
        let p2 = attention_guided_augment_plan(&summary(&[("cyc", Condition::Night, 0.24)]), &dist, &cfg).unwrap();
        assert_eq!(p1.len(), 1);
        assert_eq!((p1[0].class_label.as_str(), p1[0].condition), ("cyc", Condition::Night));
        assert_eq!(p1[0].count, 1);
        assert_eq!(p2[0].count, 2);
        let p = attention_guided_augment_plan(&summary(&[("cyc", Condition::Night, 0.1)]), &dist, &cfg).unwrap();
        assert_eq!(p[0].count, 7);
    }

    #[test]
    fn lrp_plan_filters_and_sorts() {
        let stats = vec![
            RelevanceStat {
                sample_id: "a".into(),
                in_box_fraction: 0.05,
                loss: 1.0,
            },
            RelevanceStat {
                sample_id: "b".into(),
                in_box_fraction: 0.2,
                loss: 2.0,
            },
            RelevanceStat {
                sample_id: "c".into(),
                in_box_fraction: 0.9,
                loss: 3.0,
            },
        ];
        assert!(lrp_informed_sample_plan(&stats, &[], 0.5).is_empty());
        let ids = vec!["a".to_string(), "b".into(), "c".into()];
        assert_eq!(lrp_informed_sample_plan(&stats, &ids, 0.5), vec!["b", "a"]);
    }
}

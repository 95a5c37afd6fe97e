//! Metrics, throughput measurement and the ablation harness.
//!
//! The instance AP here is a simplified mask-IoU protocol: predicted
//! instances are 4-connected components of the binarized prediction,
//! scored by their mean probability and greedily matched to GT instances.
//! Its numbers are only comparable with other runs of this crate.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use crate::config::kv_section;
use crate::container::write_file;
use crate::diffcore::{sigmoid, Grid4};
use crate::error::{Error, Result};
use crate::nets::{forward, NetParams};
use crate::scenegen::raster::label_components;
use crate::scenegen::{InstanceRaster, SceneSample, CLASS_NAMES, NUM_CLASSES};
use crate::trainer::{train_student, Batch, DistillSettings, LossWeights, References};

/// Comment line leading every metrics CSV.
pub const SIMPLIFIED_AP_NOTE: &str =
    "# AP is a simplified mask-IoU instance AP; compare only within this artifact";

pub const AP_THRESHOLDS: [f64; 3] = [0.25, 0.5, 0.75];

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSettings {
    pub batch_size: usize,
    pub threshold: f64,
    /// Write qualitative panels for this many validation scenes.
    pub panels: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            batch_size: 8,
            threshold: 0.5,
            panels: 0,
        }
    }
}

kv_section!(EvalSettings {
    batch_size,
    threshold,
    panels
});

#[derive(Debug, Clone, PartialEq)]
pub struct BenchSettings {
    pub warmup: usize,
    pub iters: usize,
    pub batch_size: usize,
    pub runs: usize,
}

impl Default for BenchSettings {
    fn default() -> Self {
        Self {
            warmup: 5,
            iters: 30,
            batch_size: 8,
            runs: 3,
        }
    }
}

kv_section!(BenchSettings {
    warmup,
    iters,
    batch_size,
    runs
});

impl BenchSettings {
    pub fn validate(&self) -> Result<()> {
        if self.iters < 30 || self.batch_size == 0 || self.runs == 0 {
            return Err(Error::Config(
                "bench needs iters >= 30 and positive batch_size and runs".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationSettings {
    /// Student seeds per configuration: seed, seed+1, ...
    pub seeds: usize,
    pub jobs: usize,
}

impl Default for AblationSettings {
    fn default() -> Self {
        Self { seeds: 3, jobs: 1 }
    }
}

kv_section!(AblationSettings { seeds, jobs });

impl AblationSettings {
    pub fn validate(&self) -> Result<()> {
        if self.seeds == 0 || self.jobs == 0 {
            return Err(Error::Config(
                "ablate seeds and jobs must be positive".into(),
            ));
        }
        Ok(())
    }
}

// ----------------------------------------------------------------------
// IoU

/// Dataset-level intersection/union counts per class.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IouAccumulator {
    pub inter: [u64; NUM_CLASSES],
    pub union: [u64; NUM_CLASSES],
}

impl IouAccumulator {
    pub fn add(&mut self, logits: &Grid4, gt: &Grid4, threshold: f64) -> Result<()> {
        let s = logits.shape();
        if s != gt.shape() || s[1] != NUM_CLASSES {
            return Err(Error::shape("iou", &s, &gt.shape()));
        }
        let hw = s[2] * s[3];
        for (i, (&l, &g)) in logits.values().iter().zip(gt.values()).enumerate() {
            let c = (i / hw) % NUM_CLASSES;
            let p = sigmoid(l) >= threshold;
            let g = g >= 0.5;
            self.inter[c] += (p && g) as u64;
            self.union[c] += (p || g) as u64;
        }
        Ok(())
    }

    /// Per-class IoU; a class with an empty union scores 1.
    pub fn finish(&self) -> [f64; NUM_CLASSES] {
        std::array::from_fn(|c| {
            if self.union[c] == 0 {
                1.0
            } else {
                self.inter[c] as f64 / self.union[c] as f64
            }
        })
    }
}

pub fn iou(pred_logits: &Grid4, gt_sem: &Grid4, threshold: f64) -> Result<[f64; NUM_CLASSES]> {
    let mut acc = IouAccumulator::default();
    acc.add(pred_logits, gt_sem, threshold)?;
    Ok(acc.finish())
}

// ----------------------------------------------------------------------
// instance AP

/// Scored detections and GT counts for one class at one IoU threshold.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ApAccumulator {
    /// (score, is true positive) in insertion order.
    pub dets: Vec<(f64, bool)>,
    pub n_gt: usize,
}

impl ApAccumulator {
    /// All-point interpolated average precision.
    pub fn average_precision(&self) -> f64 {
        if self.n_gt == 0 {
            return if self.dets.is_empty() { 1.0 } else { 0.0 };
        }
        let mut d = self.dets.clone();
        // stable: ties keep insertion order
        d.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut tp = 0usize;
        let mut pts = Vec::with_capacity(d.len());
        for (i, &(_, hit)) in d.iter().enumerate() {
            tp += hit as usize;
            pts.push((tp as f64 / self.n_gt as f64, tp as f64 / (i + 1) as f64));
        }
        for i in (0..pts.len().saturating_sub(1)).rev() {
            pts[i].1 = pts[i].1.max(pts[i + 1].1);
        }
        let mut ap = 0.0;
        let mut prev_r = 0.0;
        for &(r, p) in &pts {
            ap += (r - prev_r) * p;
            prev_r = r;
        }
        ap
    }
}

/// Predicted instances (components of the binarized class plane) with
/// mean-probability scores.
fn predicted_instances(
    probs: &[f64],
    h: usize,
    w: usize,
    threshold: f64,
) -> Vec<(f64, Vec<usize>)> {
    let bin: Vec<bool> = probs.iter().map(|&p| p >= threshold).collect();
    let (labels, n) = label_components(&bin, h, w);
    let mut sets = vec![Vec::new(); n as usize];
    for (p, &l) in labels.iter().enumerate() {
        if l > 0 {
            sets[l as usize - 1].push(p);
        }
    }
    sets.into_iter()
        .map(|s| (s.iter().map(|&p| probs[p]).sum::<f64>() / s.len() as f64, s))
        .collect()
}

fn mask_iou(a: &[usize], b: &[usize]) -> f64 {
    // both sorted ascending
    let (mut i, mut j, mut inter) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Greedy matching in descending score order; each prediction takes the
/// unmatched GT instance of highest IoU if it clears `thr`.
pub fn match_instances(
    preds: &[(f64, Vec<usize>)],
    gts: &[Vec<usize>],
    thr: f64,
) -> Vec<(f64, bool)> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].0.total_cmp(&preds[a].0));
    let mut used = vec![false; gts.len()];
    let mut out = Vec::with_capacity(preds.len());
    for i in order {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if used[j] {
                continue;
            }
            let v = mask_iou(&preds[i].1, g);
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        let hit = match best {
            Some((j, v)) if v >= thr => {
                used[j] = true;
                true
            }
            _ => false,
        };
        out.push((preds[i].0, hit));
    }
    out
}

/// AP accumulators indexed [class][threshold].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct InstanceAccumulator {
    pub acc: [[ApAccumulator; 3]; NUM_CLASSES],
}

impl InstanceAccumulator {
    pub fn add(
        &mut self,
        logits: &Grid4,
        gt_inst: &[&InstanceRaster],
        threshold: f64,
    ) -> Result<()> {
        let [b, c, h, w] = logits.shape();
        if c != NUM_CLASSES || gt_inst.len() != b || gt_inst.iter().any(|g| g.h != h || g.w != w) {
            return Err(Error::shape(
                "instance_map",
                &logits.shape(),
                &[gt_inst.len(), NUM_CLASSES, h, w],
            ));
        }
        let hw = h * w;
        for (bi, inst) in gt_inst.iter().enumerate() {
            for ci in 0..NUM_CLASSES {
                let off = (bi * NUM_CLASSES + ci) * hw;
                let probs: Vec<f64> = logits.values()[off..off + hw]
                    .iter()
                    .map(|&v| sigmoid(v))
                    .collect();
                let preds = predicted_instances(&probs, h, w, threshold);
                let ids = inst.class_ids(ci);
                let n = ids.iter().copied().max().unwrap_or(0) as usize;
                let mut gts = vec![Vec::new(); n];
                for (p, &id) in ids.iter().enumerate() {
                    if id > 0 {
                        gts[id as usize - 1].push(p);
                    }
                }
                for (ti, &thr) in AP_THRESHOLDS.iter().enumerate() {
                    let a = &mut self.acc[ci][ti];
                    a.n_gt += n;
                    a.dets.extend(match_instances(&preds, &gts, thr));
                }
            }
        }
        Ok(())
    }

    /// AP per class and threshold.
    pub fn finish(&self) -> [[f64; 3]; NUM_CLASSES] {
        std::array::from_fn(|c| std::array::from_fn(|t| self.acc[c][t].average_precision()))
    }
}

/// Per-class AP averaged over [`AP_THRESHOLDS`].
pub fn instance_map(
    pred_logits: &Grid4,
    gt_inst: &[&InstanceRaster],
) -> Result<[f64; NUM_CLASSES]> {
    let mut acc = InstanceAccumulator::default();
    acc.add(pred_logits, gt_inst, 0.5)?;
    Ok(acc.finish().map(|t| t.iter().sum::<f64>() / t.len() as f64))
}

// ----------------------------------------------------------------------
// reports

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub iou: [f64; NUM_CLASSES],
    pub miou: f64,
    /// [class][threshold]
    pub ap_at: [[f64; 3]; NUM_CLASSES],
    pub ap: [f64; NUM_CLASSES],
    pub map: f64,
    pub fps: Option<f64>,
}

impl MetricsReport {
    fn from_parts(iou: [f64; NUM_CLASSES], ap_at: [[f64; 3]; NUM_CLASSES]) -> Self {
        let ap = ap_at.map(|t| t.iter().sum::<f64>() / t.len() as f64);
        Self {
            iou,
            miou: iou.iter().sum::<f64>() / NUM_CLASSES as f64,
            ap_at,
            ap,
            map: ap.iter().sum::<f64>() / NUM_CLASSES as f64,
            fps: None,
        }
    }

    pub fn csv_header() -> String {
        let mut h = String::from("model,seed");
        for c in CLASS_NAMES {
            let _ = write!(h, ",IOU_{c}");
        }
        h.push_str(",mIOU");
        for c in CLASS_NAMES {
            let _ = write!(h, ",AP_{c}");
        }
        h.push_str(",mAP,FPS");
        h
    }

    /// One CSV row; values in percent. FPS is empty when not measured.
    pub fn csv_row(&self, model: &str, seed: u64) -> String {
        let mut r = format!("{model},{seed}");
        for v in self.iou {
            let _ = write!(r, ",{:.4}", 100.0 * v);
        }
        let _ = write!(r, ",{:.4}", 100.0 * self.miou);
        for v in self.ap {
            let _ = write!(r, ",{:.4}", 100.0 * v);
        }
        let _ = write!(r, ",{:.4},", 100.0 * self.map);
        if let Some(f) = self.fps {
            let _ = write!(r, "{f:.2}");
        }
        r
    }
}

/// Predictions of any role on a list of scenes, in batches.
pub fn predict(model: &NetParams, data: &[SceneSample], batch_size: usize) -> Result<Vec<Grid4>> {
    data.chunks(batch_size.max(1))
        .map(|chunk| {
            let b = Batch::new(&chunk.iter().collect::<Vec<_>>())?;
            Ok(forward(model, b.inputs())?.logits)
        })
        .collect()
}

pub fn evaluate_with(
    model: &NetParams,
    data: &[SceneSample],
    batch_size: usize,
    threshold: f64,
) -> Result<MetricsReport> {
    let mut ious = IouAccumulator::default();
    let mut aps = InstanceAccumulator::default();
    for (chunk, logits) in data
        .chunks(batch_size.max(1))
        .zip(predict(model, data, batch_size)?)
    {
        let gt = Grid4::stack(&chunk.iter().map(|s| &s.gt_sem).collect::<Vec<_>>())?;
        ious.add(&logits, &gt, threshold)?;
        aps.add(
            &logits,
            &chunk.iter().map(|s| &s.gt_inst).collect::<Vec<_>>(),
            threshold,
        )?;
    }
    Ok(MetricsReport::from_parts(ious.finish(), aps.finish()))
}

pub fn evaluate(
    model: &NetParams,
    data: &[SceneSample],
    batch_size: usize,
) -> Result<MetricsReport> {
    evaluate_with(model, data, batch_size, 0.5)
}

/// Forward-only throughput in samples per second: median of per-batch
/// rates after `warmup` untimed batches. Runs on the calling thread.
pub fn bench_fps(
    model: &NetParams,
    data: &[SceneSample],
    warmup: usize,
    iters: usize,
    batch_size: usize,
) -> Result<f64> {
    if iters < 30 {
        return Err(Error::InvalidArgument(
            "bench needs at least 30 iterations".into(),
        ));
    }
    if data.is_empty() || batch_size == 0 {
        return Err(Error::MissingInput(
            "bench needs scenes and a positive batch size".into(),
        ));
    }
    let picks: Vec<&SceneSample> = (0..batch_size).map(|i| &data[i % data.len()]).collect();
    let batch = Batch::new(&picks)?;
    for _ in 0..warmup {
        forward(model, batch.inputs())?;
    }
    let mut rates = Vec::with_capacity(iters);
    for _ in 0..iters {
        let t = Instant::now();
        let out = forward(model, batch.inputs())?;
        let dt = t.elapsed().as_secs_f64().max(1e-9);
        std::hint::black_box(out);
        rates.push(batch_size as f64 / dt);
    }
    rates.sort_by(f64::total_cmp);
    Ok(rates[rates.len() / 2])
}

// ----------------------------------------------------------------------
// qualitative panels

/// Binary PPM (P6) of class masks side by side: one tile per raster, each
/// class in its own colour.
pub fn write_panel(path: &Path, rasters: &[&Grid4]) -> Result<()> {
    const COLORS: [[u8; 3]; NUM_CLASSES] = [[230, 80, 60], [250, 200, 40], [60, 140, 240]];
    let Some(first) = rasters.first() else {
        return Err(Error::InvalidArgument(
            "panel needs at least one raster".into(),
        ));
    };
    let [_, _, h, w] = first.shape();
    let gap = 2;
    let total_w = rasters.len() * (w + gap) - gap;
    let mut img = vec![255u8; h * total_w * 3];
    for (t, r) in rasters.iter().enumerate() {
        if r.shape()[1..] != [NUM_CLASSES, h, w] {
            return Err(Error::shape("panel", &r.shape(), &first.shape()));
        }
        for y in 0..h {
            for x in 0..w {
                let px = ((y * total_w) + t * (w + gap) + x) * 3;
                img[px..px + 3].copy_from_slice(&[20, 20, 20]);
                for (c, col) in COLORS.iter().enumerate() {
                    if r.at(0, c, y, x) >= 0.5 {
                        img[px..px + 3].copy_from_slice(col);
                    }
                }
            }
        }
    }
    let mut bytes = format!("P6\n{total_w} {h}\n255\n").into_bytes();
    bytes.extend_from_slice(&img);
    write_file(path, &bytes)
}

/// Binarized sigmoid of logits, for panels.
pub fn binarize(logits: &Grid4, threshold: f64) -> Grid4 {
    let mut g = logits.clone().with_requires_grad(false);
    g.values_mut()
        .iter_mut()
        .for_each(|v| *v = (sigmoid(*v) >= threshold) as u8 as f64);
    g
}

// ----------------------------------------------------------------------
// ablations

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Matrix {
    Table3,
    Table4,
    Beta,
    Gamma,
}

impl Matrix {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "table3" => Ok(Self::Table3),
            "table4" => Ok(Self::Table4),
            "beta" => Ok(Self::Beta),
            "gamma" => Ok(Self::Gamma),
            _ => Err(Error::InvalidArgument(format!(
                "unknown ablation {s:?} (expected table3, table4, beta or gamma)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Table3 => "table3",
            Self::Table4 => "table4",
            Self::Beta => "beta",
            Self::Gamma => "gamma",
        }
    }
}

/// One named configuration of an ablation matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub name: String,
    pub weights: LossWeights,
    /// False in two-stage mode: the coach is never built or used.
    pub use_coach: bool,
}

fn row(name: &str, weights: LossWeights) -> AblationRow {
    AblationRow {
        name: name.to_string(),
        use_coach: weights.uses_coach(),
        weights,
    }
}

/// Two-stage variant of a weight set: no coach terms.
pub fn two_stage(w: &LossWeights) -> LossWeights {
    LossWeights {
        beta2: 0.0,
        gamma2: 0.0,
        ..*w
    }
}

pub const BETA_GRID: [(f64, f64); 4] = [(0.8, 0.2), (0.6, 0.4), (0.5, 0.5), (0.4, 0.6)];
pub const GAMMA_GRID: [(f64, f64); 4] = [(0.9, 0.1), (0.7, 0.3), (0.5, 0.5), (0.3, 0.7)];

pub fn matrix_rows(m: Matrix, base: &LossWeights) -> Vec<AblationRow> {
    let full = *base;
    match m {
        Matrix::Table3 => {
            let no_coach = two_stage(&full);
            vec![
                row(
                    "baseline",
                    LossWeights {
                        lambda1: 0.0,
                        lambda2: 0.0,
                        ..full
                    },
                ),
                row(
                    "a",
                    LossWeights {
                        lambda1: 0.0,
                        ..no_coach
                    },
                ),
                row(
                    "b",
                    LossWeights {
                        lambda2: 0.0,
                        ..no_coach
                    },
                ),
                row("c", no_coach),
                row(
                    "d",
                    LossWeights {
                        lambda1: 0.0,
                        ..full
                    },
                ),
                row(
                    "e",
                    LossWeights {
                        lambda2: 0.0,
                        ..full
                    },
                ),
                row("f", full),
            ]
        }
        Matrix::Table4 => vec![row("two_stage", two_stage(&full)), row("three_stage", full)],
        Matrix::Beta => BETA_GRID
            .iter()
            .map(|&(b1, b2)| {
                row(
                    &format!("beta_{b1}_{b2}"),
                    LossWeights {
                        beta1: b1,
                        beta2: b2,
                        ..full
                    },
                )
            })
            .collect(),
        Matrix::Gamma => GAMMA_GRID
            .iter()
            .map(|&(g1, g2)| {
                row(
                    &format!("gamma_{g1}_{g2}"),
                    LossWeights {
                        gamma1: g1,
                        gamma2: g2,
                        ..full
                    },
                )
            })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationResult {
    pub config: String,
    pub seed: u64,
    pub report: MetricsReport,
    pub init_checksum: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub matrix: Matrix,
    pub results: Vec<AblationResult>,
}

impl AblationTable {
    /// Mean (mIoU, mAP) over seeds for a configuration.
    pub fn mean(&self, config: &str) -> Option<(f64, f64)> {
        let rs: Vec<_> = self.results.iter().filter(|r| r.config == config).collect();
        if rs.is_empty() {
            return None;
        }
        let n = rs.len() as f64;
        Some((
            rs.iter().map(|r| r.report.miou).sum::<f64>() / n,
            rs.iter().map(|r| r.report.map).sum::<f64>() / n,
        ))
    }

    pub fn csv(&self) -> String {
        let mut s = format!("# {} ablation\n{SIMPLIFIED_AP_NOTE}\n", self.matrix.name());
        s.push_str(&MetricsReport::csv_header());
        s.push('\n');
        for r in &self.results {
            s.push_str(&r.report.csv_row(&r.config, r.seed));
            s.push('\n');
        }
        s
    }
}

/// Train and evaluate every configuration of `m` for `seeds` student
/// seeds. Every run starts from fresh parameters and optimizer state. Up to
/// `jobs` runs execute concurrently; results do not depend on `jobs`.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation(
    m: Matrix,
    settings: &DistillSettings,
    train: &[SceneSample],
    val: &[SceneSample],
    teacher: &NetParams,
    coach: &NetParams,
    first_seed: u64,
    ablate: &AblationSettings,
) -> Result<AblationTable> {
    let rows = matrix_rows(m, &settings.weights);
    // References depend only on the frozen models, so prepare them once:
    // with the coach when any row needs it, and a teacher-only set.
    let any_distill = rows
        .iter()
        .any(|r| r.weights.lambda1 != 0.0 || r.weights.lambda2 != 0.0);
    let calib = DistillSettings {
        weights: LossWeights {
            lambda1: 1.0,
            ..settings.weights
        },
        ..settings.clone()
    };
    let refs = if any_distill {
        Some(References::prepare(
            &calib,
            train,
            teacher,
            Some(coach),
            first_seed,
        )?)
    } else {
        None
    };
    let two_stage_refs = refs.as_ref().map(References::without_coach);

    let jobs: Vec<(usize, u64)> = (0..rows.len())
        .flat_map(|i| (0..ablate.seeds as u64).map(move |s| (i, first_seed + s)))
        .collect();
    let run = |&(i, seed): &(usize, u64)| -> Result<AblationResult> {
        let r = &rows[i];
        let s = DistillSettings {
            weights: r.weights,
            ..settings.clone()
        };
        let refs = if r.use_coach {
            refs.as_ref()
        } else {
            two_stage_refs.as_ref()
        };
        let out = train_student(&s, train, val, refs, seed)?;
        let report = evaluate(&out.student, val, settings.train.batch_size)?;
        log::info!(
            "ablation {} seed {seed}: mIoU {:.4} mAP {:.4}",
            r.name,
            report.miou,
            report.map
        );
        Ok(AblationResult {
            config: r.name.clone(),
            seed,
            report,
            init_checksum: out.init_checksum,
        })
    };
    let results = parallel_map(&jobs, ablate.jobs, run)?;
    Ok(AblationTable { matrix: m, results })
}

/// Order-preserving map over at most `jobs` worker threads.
pub fn parallel_map<T: Sync, R: Send>(
    items: &[T],
    jobs: usize,
    f: impl Fn(&T) -> Result<R> + Sync,
) -> Result<Vec<R>> {
    let jobs = jobs.clamp(1, items.len().max(1));
    if jobs == 1 {
        return items.iter().map(&f).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots: Vec<std::sync::Mutex<Option<Result<R>>>> =
        items.iter().map(|_| std::sync::Mutex::new(None)).collect();
    std::thread::scope(|sc| {
        for _ in 0..jobs {
            sc.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                *slots[i].lock().expect("no poisoned slot") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|s| {
            s.into_inner()
                .expect("no poisoned slot")
                .expect("every slot filled")
        })
        .collect()
}

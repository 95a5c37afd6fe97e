//! Losses, optimizer and the two training phases: joint teacher/coach
//! pretraining, then student training against frozen references.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{kv_section, KvSection};
use crate::diffcore::{DiscriminativeMargins, Grid4, InstanceSets, Tape, Var};
use crate::error::{Error, Result};
use crate::evalkit::{evaluate, MetricsReport};
use crate::msrd::{build_mask_dilated, msrd_on_tape, probabilities};
use crate::nets::{forward, forward_on_tape, init_params, Grads, Inputs, NetParams, Role, TapeOut};
use crate::scenegen::{InstanceRaster, SceneSample};
use crate::tgpd::{
    calibration_loss_on_tape, init_projections, pair_loss_on_tape, patch_targets, tokenize,
    tokenize_on_tape, TgpdConfig,
};

/// Every scalar weight of the objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// Instance-embedding loss weight.
    pub alpha1: f64,
    /// Direction loss weight (no direction head; kept for completeness).
    pub alpha2: f64,
    /// BEV-level (patch token) distillation weight.
    pub lambda1: f64,
    /// Output-level (masked response) distillation weight.
    pub lambda2: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub tau: f64,
    pub lambda_mse: f64,
    pub gamma1: f64,
    pub gamma2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha1: 0.1,
            alpha2: 0.1,
            lambda1: 0.5,
            lambda2: 0.5,
            beta1: 0.6,
            beta2: 0.4,
            tau: 1.0,
            lambda_mse: 1.0,
            gamma1: 0.7,
            gamma2: 0.3,
        }
    }
}

kv_section!(LossWeights {
    alpha1,
    alpha2,
    lambda1,
    lambda2,
    beta1,
    beta2,
    tau,
    lambda_mse,
    gamma1,
    gamma2,
});

impl LossWeights {
    /// No distillation terms.
    pub fn baseline() -> Self {
        Self {
            lambda1: 0.0,
            lambda2: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            ("alpha1", self.alpha1),
            ("alpha2", self.alpha2),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("tau", self.tau),
            ("lambda_mse", self.lambda_mse),
            ("gamma1", self.gamma1),
            ("gamma2", self.gamma2),
        ];
        for (k, v) in all {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!(
                    "{k} = {v} must be a finite non-negative number"
                )));
            }
        }
        if self.tau == 0.0 {
            return Err(Error::Config("tau must be positive".into()));
        }
        Ok(())
    }

    /// Whether the objective needs the coach at all.
    pub fn uses_coach(&self) -> bool {
        (self.lambda1 != 0.0 && self.beta2 != 0.0) || (self.lambda2 != 0.0 && self.gamma2 != 0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    /// Validate every this many epochs; the final epoch is always validated.
    /// 0 validates only at the end.
    pub eval_every: usize,
    /// Use only the first n training scenes (0 = all).
    pub train_limit: usize,
    /// Weight of an MSE pull of the coach's pseudo-LiDAR features toward
    /// the teacher's LiDAR features (pretraining only; 0 disables).
    pub pseudo_lidar_pull: f64,
}

impl TrainConfig {
    pub fn pretrain_default() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            lr: 5e-4,
            weight_decay: 1e-7,
            grad_clip: 5.0,
            eval_every: 0,
            train_limit: 0,
            pseudo_lidar_pull: 0.0,
        }
    }

    pub fn distill_default() -> Self {
        Self {
            epochs: 10,
            ..Self::pretrain_default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "epochs and batch_size must be positive".into(),
            ));
        }
        if !(self.lr > 0.0)
            || !(self.grad_clip > 0.0)
            || !(self.weight_decay >= 0.0)
            || !(self.pseudo_lidar_pull >= 0.0)
        {
            return Err(Error::Config("lr and grad_clip must be positive, weight_decay and pseudo_lidar_pull non-negative".into()));
        }
        Ok(())
    }

    pub fn optim(&self) -> OptimConfig {
        OptimConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            clip: self.grad_clip,
            ..OptimConfig::default()
        }
    }

    fn subset<'a>(&self, data: &'a [SceneSample]) -> &'a [SceneSample] {
        if self.train_limit == 0 {
            data
        } else {
            &data[..self.train_limit.min(data.len())]
        }
    }
}

kv_section!(TrainConfig {
    epochs,
    batch_size,
    lr,
    weight_decay,
    grad_clip,
    eval_every,
    train_limit,
    pseudo_lidar_pull,
});

/// The `distill.*` config section.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillSettings {
    pub train: TrainConfig,
    pub weights: LossWeights,
    pub tgpd: TgpdConfig,
    /// Grow the response-distillation mask by this many cells.
    pub mask_dilation: usize,
    /// Compute reference outputs once per scene instead of once per step.
    pub cache_references: bool,
}

impl Default for DistillSettings {
    fn default() -> Self {
        Self {
            train: TrainConfig::distill_default(),
            weights: LossWeights::default(),
            tgpd: TgpdConfig::default(),
            mask_dilation: 0,
            cache_references: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct DistillFlags {
    mask_dilation: usize,
    cache_references: bool,
}

kv_section!(DistillFlags {
    mask_dilation,
    cache_references
});

impl KvSection for DistillSettings {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut flags = DistillFlags {
            mask_dilation: self.mask_dilation,
            cache_references: self.cache_references,
        };
        let parts: [&mut dyn KvSection; 4] = [
            &mut self.train,
            &mut self.weights,
            &mut self.tgpd,
            &mut flags,
        ];
        let mut result = Err(Error::Config(format!("unknown key {key:?}")));
        for p in parts {
            if p.entries().iter().any(|(k, _)| *k == key) {
                result = p.set(key, value);
                break;
            }
        }
        self.mask_dilation = flags.mask_dilation;
        self.cache_references = flags.cache_references;
        result
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let flags = DistillFlags {
            mask_dilation: self.mask_dilation,
            cache_references: self.cache_references,
        };
        let mut out = self.train.entries();
        out.extend(self.weights.entries());
        out.extend(self.tgpd.entries());
        out.extend(flags.entries());
        out
    }
}

impl DistillSettings {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.weights.validate()?;
        self.tgpd.validate()
    }
}

// ----------------------------------------------------------------------
// optimizer

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm limit.
    pub clip: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-7,
            clip: 5.0,
        }
    }
}

/// First and second moments keyed by (parameter set index, name).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    m: BTreeMap<(usize, String), Vec<f64>>,
    v: BTreeMap<(usize, String), Vec<f64>>,
}

/// Scale all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grads(grads: &mut [Grads], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.values())
        .flat_map(|v| v.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for v in grads.iter_mut().flat_map(|g| g.values_mut()) {
            v.iter_mut().for_each(|x| *x *= k);
        }
    }
    norm
}

/// One AdamW update over several parameter sets sharing a clip budget.
/// Tensors without a gradient entry are left untouched. Returns the
/// pre-clip gradient norm.
pub fn optimizer_step(
    params: &mut [&mut NetParams],
    grads: &[Grads],
    state: &mut AdamState,
    cfg: &OptimConfig,
) -> Result<f64> {
    if params.len() != grads.len() {
        return Err(Error::InvalidArgument(format!(
            "{} parameter sets but {} gradient sets",
            params.len(),
            grads.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.frozen && !g.is_empty() {
            return Err(Error::FrozenViolation(format!(
                "gradient offered to frozen {} parameters",
                p.role
            )));
        }
        for (k, gv) in g {
            let t = p.get(k).ok_or_else(|| {
                Error::InvalidArgument(format!("gradient for unknown parameter {k}"))
            })?;
            if t.len() != gv.len() {
                return Err(Error::shape("optimizer_step", &t.shape(), &[gv.len()]));
            }
        }
    }
    let mut grads = grads.to_vec();
    let norm = clip_grads(&mut grads, cfg.clip);
    if !norm.is_finite() {
        return Err(Error::Diverged(format!("gradient norm {norm}")));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (si, (p, g)) in params.iter_mut().zip(&grads).enumerate() {
        for (k, gv) in g {
            let key = (si, k.clone());
            let m = state
                .m
                .entry(key.clone())
                .or_insert_with(|| vec![0.0; gv.len()]);
            let v = state.v.entry(key).or_insert_with(|| vec![0.0; gv.len()]);
            let w = p.get_mut(k).expect("checked above").values_mut();
            for i in 0..gv.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gv[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gv[i] * gv[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                w[i] -= cfg.lr * cfg.weight_decay * w[i];
                w[i] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
            }
        }
    }
    Ok(norm)
}

// ----------------------------------------------------------------------
// batches and losses

/// Stacked tensors of one mini-batch.
pub struct Batch {
    pub cam: Grid4,
    pub lidar: Grid4,
    pub sd: Grid4,
    pub hd: Grid4,
    pub gt: Grid4,
    pub instances: Rc<Vec<InstanceSets>>,
}

impl Batch {
    pub fn new(samples: &[&SceneSample]) -> Result<Self> {
        let st = |f: fn(&SceneSample) -> &Grid4| {
            Grid4::stack(&samples.iter().map(|s| f(s)).collect::<Vec<_>>())
        };
        Ok(Self {
            cam: st(|s| &s.cam_view)?,
            lidar: st(|s| &s.lidar_view)?,
            sd: st(|s| &s.sd_prior)?,
            hd: st(|s| &s.hd_noisy)?,
            gt: st(|s| &s.gt_sem)?,
            instances: Rc::new(samples.iter().map(|s| s.gt_inst.instance_sets()).collect()),
        })
    }

    pub fn inputs(&self) -> Inputs<'_> {
        Inputs {
            cam: &self.cam,
            lidar: Some(&self.lidar),
            sd: Some(&self.sd),
            hd: Some(&self.hd),
        }
    }
}

/// Supervised loss on a tape: per-class BCE + α₁·discriminative embedding
/// loss. Returns (total, segmentation term). The direction term is 0.
pub fn base_loss_on_tape(
    tape: &mut Tape,
    out: &TapeOut,
    gt: &Grid4,
    instances: &Rc<Vec<InstanceSets>>,
    w: &LossWeights,
) -> Result<(Var, Var)> {
    let ls = tape.shape(out.logits);
    if ls != gt.shape() {
        return Err(Error::shape("base_loss", &ls, &gt.shape()));
    }
    let target = tape.constant(gt.clone());
    let seg = tape.bce_with_logits(out.logits, target)?;
    if w.alpha1 == 0.0 {
        return Ok((seg, seg));
    }
    let d = tape.discriminative_loss(
        out.embed,
        instances.clone(),
        DiscriminativeMargins::default(),
    )?;
    let d = tape.scale(d, w.alpha1);
    Ok((tape.add(seg, d)?, seg))
}

/// Value form of [`base_loss_on_tape`].
pub fn base_loss(
    logits: &Grid4,
    embed: &Grid4,
    gt_sem: &Grid4,
    gt_inst: &[&InstanceRaster],
    w: &LossWeights,
) -> Result<f64> {
    let mut tape = Tape::inference();
    let out = TapeOut {
        bev: tape.constant(Grid4::zeros([1, 1, 1, 1])),
        logits: tape.constant(logits.clone()),
        embed: tape.constant(embed.clone()),
        geom: None,
    };
    let inst = Rc::new(gt_inst.iter().map(|r| r.instance_sets()).collect());
    let (l, _) = base_loss_on_tape(&mut tape, &out, gt_sem, &inst, w)?;
    Ok(tape.scalar_value(l))
}

/// Itemized loss values. `bev` and `output` are already weighted by λ₁ and
/// λ₂, so `total = base + bev + output`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub base: f64,
    pub seg: f64,
    pub bev: f64,
    pub output: f64,
}

impl LossBreakdown {
    fn add(&mut self, o: &LossBreakdown) {
        self.total += o.total;
        self.base += o.base;
        self.seg += o.seg;
        self.bev += o.bev;
        self.output += o.output;
    }

    fn scaled(&self, k: f64) -> Self {
        Self {
            total: self.total * k,
            base: self.base * k,
            seg: self.seg * k,
            bev: self.bev * k,
            output: self.output * k,
        }
    }
}

/// Frozen reference outputs for one or more scenes.
#[derive(Debug, Clone, PartialEq)]
pub struct RefOutputs {
    /// σ(logits), (B, 3, H, W)
    pub probs: Grid4,
    /// Token sequence (B, 1, N+1, D)
    pub seq: Grid4,
    /// Attention logits (B, 1, N+1, N+1)
    pub attn_logits: Grid4,
}

impl RefOutputs {
    fn stack(items: &[&RefOutputs]) -> Result<Self> {
        Ok(Self {
            probs: Grid4::stack(&items.iter().map(|r| &r.probs).collect::<Vec<_>>())?,
            seq: Grid4::stack(&items.iter().map(|r| &r.seq).collect::<Vec<_>>())?,
            attn_logits: Grid4::stack(&items.iter().map(|r| &r.attn_logits).collect::<Vec<_>>())?,
        })
    }
}

/// Distillation objective on a tape, given the student forward and the
/// batch's reference outputs. Terms with zero weight are not built.
#[allow(clippy::too_many_arguments)]
pub fn total_loss_on_tape(
    tape: &mut Tape,
    out: &TapeOut,
    student_proj: Option<&crate::nets::Bound>,
    batch_gt: &Grid4,
    instances: &Rc<Vec<InstanceSets>>,
    teacher: Option<&RefOutputs>,
    coach: Option<&RefOutputs>,
    w: &LossWeights,
    tgpd: &TgpdConfig,
    mask_dilation: usize,
) -> Result<(Var, [Option<Var>; 4])> {
    let (base, seg) = base_loss_on_tape(tape, out, batch_gt, instances, w)?;
    let mut total = base;
    let mut bev_term = None;
    let mut out_term = None;
    if w.lambda1 != 0.0 && teacher.is_some() {
        let proj = student_proj
            .ok_or_else(|| Error::InvalidArgument("student projections required".into()))?;
        let tokens = tokenize_on_tape(tape, out.bev, proj, tgpd.patch)?;
        let mut acc: Option<Var> = None;
        for (r, beta) in [(teacher, w.beta1), (coach, w.beta2)] {
            let Some(r) = r.filter(|_| beta != 0.0) else {
                continue;
            };
            let rs = tape.constant(r.seq.clone());
            let rl = tape.constant(r.attn_logits.clone());
            let l = pair_loss_on_tape(tape, &tokens, rs, rl, w.tau, w.lambda_mse)?;
            let l = tape.scale(l, beta);
            acc = Some(match acc {
                Some(a) => tape.add(a, l)?,
                None => l,
            });
        }
        if let Some(a) = acc {
            let a = tape.scale(a, w.lambda1);
            total = tape.add(total, a)?;
            bev_term = Some(a);
        }
    }
    if w.lambda2 != 0.0 && teacher.is_some() {
        let mask = build_mask_dilated(batch_gt, mask_dilation)?;
        let l = msrd_on_tape(
            tape,
            out.logits,
            teacher.map(|r| &r.probs),
            coach.map(|r| &r.probs),
            &mask,
            w.gamma1,
            w.gamma2,
        )?;
        let l = tape.scale(l, w.lambda2);
        total = tape.add(total, l)?;
        out_term = Some(l);
    }
    Ok((total, [Some(base), Some(seg), bev_term, out_term]))
}

fn breakdown(tape: &Tape, total: Var, parts: &[Option<Var>; 4]) -> LossBreakdown {
    let v = |o: Option<Var>| o.map(|x| tape.scalar_value(x)).unwrap_or(0.0);
    LossBreakdown {
        total: tape.scalar_value(total),
        base: v(parts[0]),
        seg: v(parts[1]),
        bev: v(parts[2]),
        output: v(parts[3]),
    }
}

/// Value form of the full objective for one batch of scenes.
pub fn total_loss(
    student: &NetParams,
    student_proj: &NetParams,
    batch: &Batch,
    teacher: Option<&RefOutputs>,
    coach: Option<&RefOutputs>,
    w: &LossWeights,
    tgpd: &TgpdConfig,
) -> Result<LossBreakdown> {
    let mut tape = Tape::inference();
    let sv = student.bind(&mut tape);
    let pv = student_proj.bind(&mut tape);
    let out = forward_on_tape(&mut tape, student, &sv, Inputs::camera(&batch.cam))?;
    let (t, parts) = total_loss_on_tape(
        &mut tape,
        &out,
        Some(&pv),
        &batch.gt,
        &batch.instances,
        teacher,
        coach,
        w,
        tgpd,
        0,
    )?;
    Ok(breakdown(&tape, t, &parts))
}

// ----------------------------------------------------------------------
// metric log

pub const LOG_HEADER: &str = "epoch,step,l_total,l_base,l_bev,l_output,miou_val,map_val";

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub step: u64,
    pub loss: LossBreakdown,
    pub val: Option<MetricsReport>,
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in rows {
        let _ = write!(
            s,
            "{},{},{:.9},{:.9},{:.9},{:.9}",
            r.epoch, r.step, r.loss.total, r.loss.base, r.loss.bev, r.loss.output
        );
        match &r.val {
            Some(m) => {
                let _ = writeln!(s, ",{:.6},{:.6}", m.miou, m.map);
            }
            None => s.push_str(",,\n"),
        }
    }
    s
}

fn due(cfg: &TrainConfig, epoch: usize) -> bool {
    epoch == cfg.epochs || (cfg.eval_every > 0 && epoch.is_multiple_of(cfg.eval_every))
}

fn shuffled(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

fn ensure_finite(v: f64, what: &str, epoch: usize) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged(format!(
            "{what} loss became {v} in epoch {epoch}"
        )))
    }
}

// ----------------------------------------------------------------------
// pretraining

#[derive(Debug, Clone)]
pub struct PretrainResult {
    pub teacher: NetParams,
    pub coach: NetParams,
    pub teacher_log: Vec<LogRow>,
    pub coach_log: Vec<LogRow>,
}

/// Train teacher and coach in the same loop on their own pipelines and
/// losses. Both come back frozen. With `ckpt_dir`, checkpoints are written
/// after every epoch.
pub fn pretrain_teacher_coach(
    cfg: &TrainConfig,
    train: &[SceneSample],
    val: &[SceneSample],
    seed: u64,
    ckpt_dir: Option<&Path>,
) -> Result<PretrainResult> {
    cfg.validate()?;
    let train = cfg.subset(train);
    if train.is_empty() {
        return Err(Error::MissingInput("empty training set".into()));
    }
    let w = LossWeights::baseline();
    let optim = cfg.optim();
    let mut teacher = init_params(Role::Teacher, seed);
    let mut coach = init_params(Role::Coach, seed);
    let (mut st, mut sc) = (AdamState::default(), AdamState::default());
    let mut rng = stream(seed, 0x7072_6574);
    let (mut tlog, mut clog) = (Vec::new(), Vec::new());
    for epoch in 1..=cfg.epochs {
        let order = shuffled(train.len(), &mut rng);
        let (mut tsum, mut csum) = (LossBreakdown::default(), LossBreakdown::default());
        let mut nb = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = Batch::new(&chunk.iter().map(|&i| &train[i]).collect::<Vec<_>>())?;

            let mut tape = Tape::new();
            let tv = teacher.bind(&mut tape);
            let out = forward_on_tape(&mut tape, &teacher, &tv, batch.inputs())?;
            let (loss, seg) = base_loss_on_tape(&mut tape, &out, &batch.gt, &batch.instances, &w)?;
            ensure_finite(tape.scalar_value(loss), "teacher", epoch)?;
            tape.backward(loss)?;
            let lidar_feat = out.geom.map(|g| tape.value(g).clone());
            tsum.add(&breakdown(
                &tape,
                loss,
                &[Some(loss), Some(seg), None, None],
            ));
            let g = teacher.collect_grads(&tape, &tv);
            drop(tape);
            optimizer_step(&mut [&mut teacher], &[g], &mut st, &optim)?;

            let mut tape = Tape::new();
            let cv = coach.bind(&mut tape);
            let out = forward_on_tape(&mut tape, &coach, &cv, batch.inputs())?;
            let (mut loss, seg) =
                base_loss_on_tape(&mut tape, &out, &batch.gt, &batch.instances, &w)?;
            if cfg.pseudo_lidar_pull != 0.0 {
                let (Some(pseudo), Some(real)) = (out.geom, lidar_feat) else {
                    return Err(Error::InvalidArgument(
                        "geometry features unavailable".into(),
                    ));
                };
                let real = tape.constant(real);
                let pull = tape.mse(pseudo, real)?;
                let pull = tape.scale(pull, cfg.pseudo_lidar_pull);
                loss = tape.add(loss, pull)?;
            }
            ensure_finite(tape.scalar_value(loss), "coach", epoch)?;
            tape.backward(loss)?;
            csum.add(&breakdown(
                &tape,
                loss,
                &[Some(loss), Some(seg), None, None],
            ));
            let g = coach.collect_grads(&tape, &cv);
            drop(tape);
            optimizer_step(&mut [&mut coach], &[g], &mut sc, &optim)?;
            nb += 1;
        }
        let k = 1.0 / nb as f64;
        let eval = due(cfg, epoch) && !val.is_empty();
        tlog.push(LogRow {
            epoch,
            step: st.step,
            loss: tsum.scaled(k),
            val: if eval {
                Some(evaluate(&teacher, val, cfg.batch_size)?)
            } else {
                None
            },
        });
        clog.push(LogRow {
            epoch,
            step: sc.step,
            loss: csum.scaled(k),
            val: if eval {
                Some(evaluate(&coach, val, cfg.batch_size)?)
            } else {
                None
            },
        });
        if let Some(dir) = ckpt_dir {
            teacher.save(&dir.join(format!("teacher_epoch{epoch:03}.tcsp")))?;
            coach.save(&dir.join(format!("coach_epoch{epoch:03}.tcsp")))?;
        }
        log::info!(
            "pretrain epoch {epoch}: teacher {:.4} coach {:.4}",
            tsum.total * k,
            csum.total * k
        );
    }
    teacher.freeze();
    coach.freeze();
    Ok(PretrainResult {
        teacher,
        coach,
        teacher_log: tlog,
        coach_log: clog,
    })
}

// ----------------------------------------------------------------------
// references

/// One frozen reference model with its calibrated token projections.
#[derive(Debug, Clone)]
pub struct Reference {
    pub model: NetParams,
    pub proj: NetParams,
    cache: Option<Vec<RefOutputs>>,
}

impl Reference {
    /// Outputs for scene `i` of the training set.
    fn outputs(&self, i: usize, scene: &SceneSample, patch: usize) -> Result<RefOutputs> {
        match &self.cache {
            Some(c) => Ok(c[i].clone()),
            None => reference_outputs(&self.model, &self.proj, scene, patch),
        }
    }
}

fn reference_outputs(
    model: &NetParams,
    proj: &NetParams,
    s: &SceneSample,
    patch: usize,
) -> Result<RefOutputs> {
    let batch = Batch::new(&[s])?;
    let out = forward(model, batch.inputs())?;
    let tok = tokenize(&out.bev, proj, patch)?;
    Ok(RefOutputs {
        probs: probabilities(&out.logits),
        seq: tok.seq,
        attn_logits: tok.logits,
    })
}

/// Frozen teacher and (optional) coach ready for distillation.
#[derive(Debug, Clone)]
pub struct References {
    pub teacher: Reference,
    pub coach: Option<Reference>,
    train_len: usize,
}

/// Fit one reference model's token projections with its backbone frozen.
fn calibrate(
    model: &NetParams,
    train: &[SceneSample],
    cfg: &TgpdConfig,
    batch_size: usize,
    seed: u64,
) -> Result<NetParams> {
    let mut proj = init_projections(model.role, cfg, seed);
    let optim = OptimConfig {
        lr: cfg.calib_lr,
        weight_decay: 0.0,
        ..OptimConfig::default()
    };
    let mut state = AdamState::default();
    let mut rng = stream(seed, 0x6361_6c69 + model.role as u64);
    for epoch in 0..cfg.calib_epochs {
        for chunk in shuffled(train.len(), &mut rng).chunks(batch_size) {
            let batch = Batch::new(&chunk.iter().map(|&i| &train[i]).collect::<Vec<_>>())?;
            let bev = forward(model, batch.inputs())?.bev;
            let targets = patch_targets(&batch.gt, cfg.patch)?;
            let mut tape = Tape::new();
            let pv = proj.bind(&mut tape);
            let f = tape.constant(bev);
            let tokens = tokenize_on_tape(&mut tape, f, &pv, cfg.patch)?;
            let loss = calibration_loss_on_tape(&mut tape, &tokens, &pv, &targets)?;
            ensure_finite(tape.scalar_value(loss), "calibration", epoch)?;
            tape.backward(loss)?;
            let g = proj.collect_grads(&tape, &pv);
            drop(tape);
            optimizer_step(&mut [&mut proj], &[g], &mut state, &optim)?;
        }
    }
    normalize_tokens(
        model,
        &mut proj,
        &train[..train.len().min(RMS_SCENES)],
        cfg.patch,
        batch_size,
    )?;
    proj.freeze();
    Ok(proj)
}

/// Scenes used to measure the reference token scale.
const RMS_SCENES: usize = 64;

/// Rescale the token projections so the reference sequence has unit RMS.
/// The readout is unused after calibration and keeps its weights.
fn normalize_tokens(
    model: &NetParams,
    proj: &mut NetParams,
    scenes: &[SceneSample],
    patch: usize,
    batch_size: usize,
) -> Result<()> {
    let (mut sq, mut n) = (0.0, 0usize);
    for chunk in scenes.chunks(batch_size.max(1)) {
        let batch = Batch::new(&chunk.iter().collect::<Vec<_>>())?;
        let bev = forward(model, batch.inputs())?.bev;
        let seq = tokenize(&bev, proj, patch)?.seq;
        sq += seq.values().iter().map(|v| v * v).sum::<f64>();
        n += seq.len();
    }
    let rms = (sq / n.max(1) as f64).sqrt();
    if !(rms > 1e-12) || !rms.is_finite() {
        return Ok(());
    }
    for name in ["patch.w", "patch.b", "token.w", "token.b"] {
        if let Some(g) = proj.get_mut(name) {
            g.values_mut().iter_mut().for_each(|v| *v /= rms);
        }
    }
    Ok(())
}

impl References {
    /// Same references with the coach dropped (two-stage mode).
    pub fn without_coach(&self) -> Self {
        Self {
            coach: None,
            ..self.clone()
        }
    }

    /// Calibrate projections for the frozen models and, when requested,
    /// cache every training scene's reference outputs.
    pub fn prepare(
        settings: &DistillSettings,
        train: &[SceneSample],
        teacher: &NetParams,
        coach: Option<&NetParams>,
        seed: u64,
    ) -> Result<Self> {
        let train = settings.train.subset(train);
        let build = |m: &NetParams, role: Role| -> Result<Reference> {
            if m.role != role {
                return Err(Error::InvalidArgument(format!(
                    "expected {role} parameters, got {}",
                    m.role
                )));
            }
            if !m.frozen {
                return Err(Error::FrozenViolation(format!(
                    "{role} must be frozen before distillation"
                )));
            }
            let proj = if settings.weights.lambda1 != 0.0 {
                calibrate(m, train, &settings.tgpd, settings.train.batch_size, seed)?
            } else {
                let mut p = init_projections(role, &settings.tgpd, seed);
                p.freeze();
                p
            };
            let cache = if settings.cache_references {
                Some(
                    train
                        .iter()
                        .map(|s| reference_outputs(m, &proj, s, settings.tgpd.patch))
                        .collect::<Result<Vec<_>>>()?,
                )
            } else {
                None
            };
            Ok(Reference {
                model: m.clone(),
                proj,
                cache,
            })
        };
        let teacher = build(teacher, Role::Teacher)?;
        let coach = coach.map(|c| build(c, Role::Coach)).transpose()?;
        Ok(Self {
            teacher,
            coach,
            train_len: train.len(),
        })
    }
}

// ----------------------------------------------------------------------
// student training

#[derive(Debug, Clone)]
pub struct StudentRun {
    pub student: NetParams,
    pub proj: NetParams,
    pub log: Vec<LogRow>,
    /// Checksum of the student parameters before the first update.
    pub init_checksum: u32,
}

/// Train a student from scratch. Without references (or with λ₁ = λ₂ = 0)
/// this is the plain supervised baseline.
pub fn train_student(
    settings: &DistillSettings,
    train: &[SceneSample],
    val: &[SceneSample],
    refs: Option<&References>,
    seed: u64,
) -> Result<StudentRun> {
    settings.validate()?;
    let cfg = &settings.train;
    let w = &settings.weights;
    let train = cfg.subset(train);
    if train.is_empty() {
        return Err(Error::MissingInput("empty training set".into()));
    }
    if let Some(r) = refs {
        if r.train_len != train.len() {
            return Err(Error::InvalidArgument(
                "references prepared for a different training set".into(),
            ));
        }
    }
    let before: Vec<u32> = refs
        .map(|r| {
            std::iter::once(&r.teacher)
                .chain(r.coach.as_ref())
                .map(|x| x.model.checksum())
                .collect()
        })
        .unwrap_or_default();

    let mut student = init_params(Role::Student, seed);
    let mut proj = init_projections(Role::Student, &settings.tgpd, seed);
    let init_checksum = student.checksum();
    let optim = cfg.optim();
    let mut state = AdamState::default();
    let mut rng = stream(seed, 0x7374_7564);
    let want_coach = w.uses_coach();
    let use_tgpd = w.lambda1 != 0.0 && refs.is_some();
    let mut log = Vec::new();
    for epoch in 1..=cfg.epochs {
        let order = shuffled(train.len(), &mut rng);
        let mut sum = LossBreakdown::default();
        let mut nb = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let scenes: Vec<&SceneSample> = chunk.iter().map(|&i| &train[i]).collect();
            let batch = Batch::new(&scenes)?;
            let gather = |r: &Reference| -> Result<RefOutputs> {
                let outs = chunk
                    .iter()
                    .map(|&i| r.outputs(i, &train[i], settings.tgpd.patch))
                    .collect::<Result<Vec<_>>>()?;
                RefOutputs::stack(&outs.iter().collect::<Vec<_>>())
            };
            let distilling = refs.is_some() && (w.lambda1 != 0.0 || w.lambda2 != 0.0);
            let tea = match refs {
                Some(r) if distilling => Some(gather(&r.teacher)?),
                _ => None,
            };
            let coa = match refs.and_then(|r| r.coach.as_ref()) {
                Some(c) if distilling && want_coach => Some(gather(c)?),
                _ => None,
            };

            let mut tape = Tape::new();
            let sv = student.bind(&mut tape);
            let pv = if use_tgpd {
                Some(proj.bind(&mut tape))
            } else {
                None
            };
            let out = forward_on_tape(&mut tape, &student, &sv, Inputs::camera(&batch.cam))?;
            let (loss, parts) = total_loss_on_tape(
                &mut tape,
                &out,
                pv.as_ref(),
                &batch.gt,
                &batch.instances,
                tea.as_ref(),
                coa.as_ref(),
                w,
                &settings.tgpd,
                settings.mask_dilation,
            )?;
            let b = breakdown(&tape, loss, &parts);
            ensure_finite(b.total, "student", epoch)?;
            tape.backward(loss)?;
            sum.add(&b);
            let gs = student.collect_grads(&tape, &sv);
            let gp = pv
                .as_ref()
                .map(|pv| proj.collect_grads(&tape, pv))
                .unwrap_or_default();
            drop(tape);
            optimizer_step(
                &mut [&mut student, &mut proj],
                &[gs, gp],
                &mut state,
                &optim,
            )?;
            nb += 1;
        }
        let val_report = if due(cfg, epoch) && !val.is_empty() {
            Some(evaluate(&student, val, cfg.batch_size)?)
        } else {
            None
        };
        log.push(LogRow {
            epoch,
            step: state.step,
            loss: sum.scaled(1.0 / nb as f64),
            val: val_report,
        });
    }

    if let Some(r) = refs {
        let after: Vec<u32> = std::iter::once(&r.teacher)
            .chain(r.coach.as_ref())
            .map(|x| x.model.checksum())
            .collect();
        if after != before {
            return Err(Error::FrozenViolation(
                "reference parameters changed during distillation".into(),
            ));
        }
    }
    Ok(StudentRun {
        student,
        proj,
        log,
        init_checksum,
    })
}

/// Full distillation: calibrate references, then train the student.
pub fn distill_student(
    settings: &DistillSettings,
    train: &[SceneSample],
    val: &[SceneSample],
    teacher: &NetParams,
    coach: Option<&NetParams>,
    seed: u64,
) -> Result<StudentRun> {
    let coach = coach.filter(|_| settings.weights.uses_coach());
    let refs = References::prepare(settings, train, teacher, coach, seed)?;
    train_student(settings, train, val, Some(&refs), seed)
}

/// Evaluation of a trained model on a split, for logs.
pub fn final_metrics(log: &[LogRow]) -> Option<&MetricsReport> {
    log.iter().rev().find_map(|r| r.val.as_ref())
}

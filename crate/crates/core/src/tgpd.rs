//! Patch-token attention distillation between BEV feature maps.
//!
//! Each model's BEV map is cut into s×s patches, every patch is flattened
//! and projected to width D, and the projected global average becomes
//! token 0. Single-head self-attention logits `QKᵀ/√D` over that sequence
//! are compared with a row-wise KL divergence, and the sequences
//! themselves with an MSE.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::kv_section;
use crate::diffcore::{Grid4, Tape, Var};
use crate::error::{Error, Result};
use crate::nets::{Bound, NetParams, Role};
use crate::scenegen::NUM_CLASSES;

#[derive(Debug, Clone, PartialEq)]
pub struct TgpdConfig {
    /// Patch side in BEV cells.
    pub patch: usize,
    /// Shared embedding width.
    pub dim: usize,
    /// Epochs of reference-projection calibration before distillation.
    pub calib_epochs: usize,
    pub calib_lr: f64,
}

impl Default for TgpdConfig {
    fn default() -> Self {
        Self {
            patch: 4,
            dim: 32,
            calib_epochs: 1,
            calib_lr: 5e-3,
        }
    }
}

kv_section!(TgpdConfig {
    patch,
    dim,
    calib_epochs,
    calib_lr
});

impl TgpdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.dim == 0 {
            return Err(Error::Config("tgpd patch and dim must be positive".into()));
        }
        if !(self.calib_lr > 0.0) {
            return Err(Error::Config("tgpd calib_lr must be positive".into()));
        }
        Ok(())
    }
}

/// Projections for one model: patch → D, pooled token → D, W_Q, W_K, and
/// a per-class readout used only during calibration.
pub fn init_projections(role: Role, cfg: &TgpdConfig, seed: u64) -> NetParams {
    let c = role.bev_channels();
    let (s, d) = (cfg.patch, cfg.dim);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x7467_7064_0000_0000 | role as u64);
    let mut mat = |rows: usize, cols: usize| {
        let n = Normal::new(0.0, (1.0 / rows as f64).sqrt()).expect("positive std");
        Grid4::new(
            [1, 1, rows, cols],
            (0..rows * cols).map(|_| n.sample(&mut rng)).collect(),
        )
        .expect("shape")
    };
    let mut p = NetParams::empty(role);
    let entries = [
        ("patch.w", mat(c * s * s, d)),
        ("token.w", mat(c, d)),
        ("wq", mat(d, d)),
        ("wk", mat(d, d)),
        ("readout.w", mat(d, NUM_CLASSES)),
    ];
    for (k, g) in entries {
        p.insert(k, g).expect("unique");
    }
    p.insert("patch.b", Grid4::zeros([1, 1, 1, d]))
        .expect("unique");
    p.insert("token.b", Grid4::zeros([1, 1, 1, d]))
        .expect("unique");
    p.insert("readout.b", Grid4::zeros([1, 1, 1, NUM_CLASSES]))
        .expect("unique");
    p
}

/// Student, teacher and coach projections.
#[derive(Debug, Clone, PartialEq)]
pub struct TgpdParams {
    pub student: NetParams,
    pub teacher: NetParams,
    pub coach: NetParams,
}

impl TgpdParams {
    pub fn init(cfg: &TgpdConfig, seed: u64) -> Self {
        Self {
            student: init_projections(Role::Student, cfg, seed),
            teacher: init_projections(Role::Teacher, cfg, seed),
            coach: init_projections(Role::Coach, cfg, seed),
        }
    }
}

/// Token sequence and attention logits on a tape.
#[derive(Debug, Clone, Copy)]
pub struct TokenVars {
    /// (B, 1, N, D)
    pub patches: Var,
    /// (B, 1, N+1, D), global token first.
    pub seq: Var,
    /// (B, 1, N+1, N+1), pre-softmax.
    pub logits: Var,
}

fn bound(vars: &Bound, name: &str) -> Result<Var> {
    vars.get(name)
        .copied()
        .ok_or_else(|| Error::InvalidArgument(format!("missing projection {name}")))
}

pub fn tokenize_on_tape(
    tape: &mut Tape,
    bev: Var,
    proj: &Bound,
    patch: usize,
) -> Result<TokenVars> {
    let s = tape.shape(bev);
    if patch == 0 || !s[2].is_multiple_of(patch) || !s[3].is_multiple_of(patch) {
        return Err(Error::InvalidArgument(format!(
            "BEV dims {}x{} not divisible by patch size {patch}",
            s[2], s[3]
        )));
    }
    let flat = tape.patchify(bev, patch)?;
    let patches = tape.linear(flat, bound(proj, "patch.w")?, Some(bound(proj, "patch.b")?))?;
    let pooled = tape.avg_pool_full(bev);
    let pooled = tape.reshape(pooled, [s[0], 1, 1, s[1]])?;
    let global = tape.linear(
        pooled,
        bound(proj, "token.w")?,
        Some(bound(proj, "token.b")?),
    )?;
    let seq = tape.concat(&[global, patches], 2)?;
    let d = tape.shape(seq)[3];
    let q = tape.linear(seq, bound(proj, "wq")?, None)?;
    let k = tape.linear(seq, bound(proj, "wk")?, None)?;
    let qk = tape.matmul_nt(q, k)?;
    let logits = tape.scale(qk, 1.0 / (d as f64).sqrt());
    Ok(TokenVars {
        patches,
        seq,
        logits,
    })
}

/// Plain-value token state of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenState {
    pub patches: Grid4,
    pub global: Grid4,
    pub seq: Grid4,
    pub logits: Grid4,
    /// Row-softmax of `logits`.
    pub attn: Grid4,
}

pub fn tokenize(bev: &Grid4, proj: &NetParams, patch: usize) -> Result<TokenState> {
    let mut tape = Tape::inference();
    let vars = proj.bind(&mut tape);
    let f = tape.constant(bev.clone());
    let t = tokenize_on_tape(&mut tape, f, &vars, patch)?;
    let a = tape.softmax_rows(t.logits, 1.0)?;
    let seq = tape.value(t.seq).clone();
    let [b, _, _, d] = seq.shape();
    let global = Grid4::new(
        [b, 1, 1, d],
        (0..b)
            .flat_map(|i| seq.values()[i * seq.len() / b..][..d].to_vec())
            .collect(),
    )?;
    Ok(TokenState {
        patches: tape.value(t.patches).clone(),
        global,
        seq,
        logits: tape.value(t.logits).clone(),
        attn: tape.value(a).clone(),
    })
}

/// KL(softmax(stu/τ) ‖ softmax(ref/τ)) averaged over batch × rows. The
/// reference side must be a constant.
pub fn attention_kl_on_tape(
    tape: &mut Tape,
    stu_logits: Var,
    ref_logits: Var,
    tau: f64,
) -> Result<Var> {
    let ss = tape.shape(stu_logits);
    let rs = tape.shape(ref_logits);
    if ss != rs {
        return Err(Error::shape("attention kl", &ss, &rs));
    }
    let ls = tape.log_softmax_rows(stu_logits, tau)?;
    let ps = tape.softmax_rows(stu_logits, tau)?;
    let lr = tape.log_softmax_rows(ref_logits, tau)?;
    let diff = tape.sub(ls, lr)?;
    let prod = tape.mul(ps, diff)?;
    let total = tape.sum(prod);
    let rows = (ss[0] * ss[1] * ss[2]).max(1);
    Ok(tape.scale(total, 1.0 / rows as f64))
}

/// Pair loss with the reference given as constants: KL + λ·MSE(E_s, E_r).
pub fn pair_loss_on_tape(
    tape: &mut Tape,
    stu: &TokenVars,
    ref_seq: Var,
    ref_logits: Var,
    tau: f64,
    lambda: f64,
) -> Result<Var> {
    let kl = attention_kl_on_tape(tape, stu.logits, ref_logits, tau)?;
    if lambda == 0.0 {
        return Ok(kl);
    }
    let mse = tape.mse(stu.seq, ref_seq)?;
    let mse = tape.scale(mse, lambda);
    tape.add(kl, mse)
}

fn check_pair(stu: &TokenState, r: &TokenState) -> Result<()> {
    if stu.seq.shape() != r.seq.shape() {
        return Err(Error::shape(
            "tgpd sequence",
            &stu.seq.shape(),
            &r.seq.shape(),
        ));
    }
    if stu.logits.shape() != r.logits.shape() {
        return Err(Error::shape(
            "tgpd attention",
            &stu.logits.shape(),
            &r.logits.shape(),
        ));
    }
    Ok(())
}

pub fn tgpd_pair_loss(
    stu: &TokenState,
    reference: &TokenState,
    tau: f64,
    lambda: f64,
) -> Result<f64> {
    check_pair(stu, reference)?;
    let mut tape = Tape::inference();
    let sv = TokenVars {
        patches: tape.constant(stu.patches.clone()),
        seq: tape.constant(stu.seq.clone()),
        logits: tape.constant(stu.logits.clone()),
    };
    let rs = tape.constant(reference.seq.clone());
    let rl = tape.constant(reference.logits.clone());
    let l = pair_loss_on_tape(&mut tape, &sv, rs, rl, tau, lambda)?;
    Ok(tape.scalar_value(l))
}

/// β₁·L(stu, tea) + β₂·L(stu, coa). Zero-weighted terms are not evaluated.
pub fn tgpd_total(
    stu: &TokenState,
    tea: &TokenState,
    coa: &TokenState,
    beta1: f64,
    beta2: f64,
    tau: f64,
    lambda: f64,
) -> Result<f64> {
    check_pair(stu, tea)?;
    check_pair(stu, coa)?;
    let mut total = 0.0;
    if beta1 != 0.0 {
        total += beta1 * tgpd_pair_loss(stu, tea, tau, lambda)?;
    }
    if beta2 != 0.0 {
        total += beta2 * tgpd_pair_loss(stu, coa, tau, lambda)?;
    }
    Ok(total)
}

/// Per-patch foreground fraction of each class, (B, 1, N, 3), in the same
/// patch order as the token sequence. `gt` is at full grid resolution and
/// the BEV grid is half of it.
pub fn patch_targets(gt: &Grid4, patch: usize) -> Result<Grid4> {
    let [b, c, h, w] = gt.shape();
    let k = 2 * patch;
    if h % k != 0 || w % k != 0 {
        return Err(Error::InvalidArgument(format!(
            "grid {h}x{w} not divisible by {k}"
        )));
    }
    let (ph, pw) = (h / k, w / k);
    let mut out = Grid4::zeros([b, 1, ph * pw, c]);
    let norm = 1.0 / (k * k) as f64;
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let n = (y / k) * pw + x / k;
                    let o = out.index(bi, 0, n, ci);
                    out.values_mut()[o] += gt.at(bi, ci, y, x) * norm;
                }
            }
        }
    }
    Ok(out)
}

/// Calibration objective: a linear readout of each patch token predicts
/// the patch's class fractions (BCE). Trains the projections and readout
/// of one reference model; W_Q and W_K are untouched by it.
pub fn calibration_loss_on_tape(
    tape: &mut Tape,
    tokens: &TokenVars,
    proj: &Bound,
    targets: &Grid4,
) -> Result<Var> {
    let pred = tape.linear(
        tokens.patches,
        bound(proj, "readout.w")?,
        Some(bound(proj, "readout.b")?),
    )?;
    let t = tape.constant(targets.clone());
    tape.bce_with_logits(pred, t)
}

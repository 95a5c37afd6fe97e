//! One PASS/FAIL line per acceptance criterion, written straight to stderr
//! so it shows up without `--nocapture`. Criteria share one lock: the
//! benchmark and the throughput runs must not overlap.
//!
//! Property criteria (1-4, 9, 10) assert. Measured ones (5-8: training
//! trends and timings) only report, unless `TCSKD_STRICT_TRENDS=1`.

use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::sync::{Mutex, OnceLock};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tcskd::diffcore::{grad_check, DiscriminativeMargins, Grid4, Tape, Var, FD_STEP};
use tcskd::evalkit::{bench_fps, run_ablation, two_stage, AblationTable, Matrix};
use tcskd::msrd::{build_mask, msrd_loss, msrd_on_tape, probabilities};
use tcskd::nets::{init_params, Bound, NetParams, Role};
use tcskd::scenegen::{generate_split, load_dataset, save_dataset, GenConfig, SceneSample};
use tcskd::tgpd::{
    attention_kl_on_tape, init_projections, pair_loss_on_tape, tgpd_pair_loss, tokenize,
    tokenize_on_tape, TgpdConfig,
};
use tcskd::trainer::{
    distill_student, pretrain_teacher_coach, train_student, DistillSettings, LossWeights,
    References,
};
use tcskd::{Error, RunConfig};

const GRAD_TOL: f64 = 1e-4;
const TIE: f64 = 0.003; // 0.3 mIoU points, as a fraction
const MIN_GAIN: f64 = 0.02; // 2 points

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(n: u32, pass: bool, detail: impl AsRef<str>) {
    let line = format!(
        "criterion {n:>2}: {} {}\n",
        if pass { "PASS" } else { "FAIL" },
        detail.as_ref()
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn strict_trends() -> bool {
    std::env::var("TCSKD_STRICT_TRENDS").is_ok_and(|v| v == "1")
}

fn rand_grid(rng: &mut ChaCha8Rng, shape: [usize; 4], lo: f64, hi: f64) -> Grid4 {
    Grid4::from_fn(shape, |_| rng.gen_range(lo..hi))
}

fn weighted_sum(t: &mut Tape, y: Var, seed: u64) -> tcskd::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Grid4::from_fn(t.shape(y), |_| rng.gen_range(-1.0..1.0));
    let w = t.constant(w);
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

fn tiny_gen() -> GenConfig {
    GenConfig {
        height: 32,
        width: 64,
        ..GenConfig::default()
    }
}

fn frozen(role: Role, seed: u64) -> NetParams {
    let mut p = init_params(role, seed);
    p.freeze();
    p
}

// ----------------------------------------------------------------------
// 1

#[test]
fn c01_gradient_soundness() {
    let _g = serial();
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let shapes = [
        [1, 1, 4, 4],
        [2, 2, 4, 6],
        [1, 3, 6, 4],
        [2, 1, 2, 8],
        [3, 2, 4, 4],
    ];
    let mut worst: Vec<(String, f64)> = Vec::new();
    let mut check =
        |name: &str, leaves: Vec<Grid4>, f: &dyn Fn(&mut Tape, &[Var]) -> tcskd::Result<Var>| {
            let r = grad_check(f, &leaves, FD_STEP).unwrap().max();
            match worst.iter_mut().find(|(n, _)| n == name) {
                Some(w) => w.1 = w.1.max(r),
                None => worst.push((name.to_string(), r)),
            }
        };
    for (i, s) in shapes.iter().enumerate() {
        let k = i as u64;
        let x = rand_grid(&mut rng, *s, -2.0, 2.0);
        let y = rand_grid(&mut rng, *s, -2.0, 2.0);
        let (stride, pad) = [(1, 1), (2, 1), (1, 0), (2, 1), (1, 2)][i];
        let w = rand_grid(&mut rng, [3, s[1], 3, 3], -1.0, 1.0);
        let b = rand_grid(&mut rng, [1, 1, 1, 3], -1.0, 1.0);
        check("conv2d", vec![x.clone(), w, b.clone()], &|t, v| {
            let o = t.conv2d(v[0], v[1], Some(v[2]), stride, pad)?;
            weighted_sum(t, o, k)
        });
        let w1 = rand_grid(&mut rng, [2, s[1], 1, 1], -1.0, 1.0);
        check("conv2d_1x1", vec![x.clone(), w1], &|t, v| {
            let o = t.conv2d(v[0], v[1], None, 1, 0)?;
            weighted_sum(t, o, k)
        });
        let lw = rand_grid(&mut rng, [1, 1, s[3], 3], -1.0, 1.0);
        check("linear", vec![x.clone(), lw, b], &|t, v| {
            let o = t.linear(v[0], v[1], Some(v[2]))?;
            weighted_sum(t, o, k)
        });
        let bt = rand_grid(&mut rng, [s[0], s[1], 3, s[3]], -2.0, 2.0);
        check("matmul_nt", vec![x.clone(), bt], &|t, v| {
            let o = t.matmul_nt(v[0], v[1])?;
            weighted_sum(t, o, k)
        });
        let bm = rand_grid(&mut rng, [s[0], s[1], s[3], 2], -2.0, 2.0);
        check("matmul", vec![x.clone(), bm], &|t, v| {
            let o = t.matmul(v[0], v[1])?;
            weighted_sum(t, o, k)
        });
        let tau = [1.0, 0.5, 2.0, 1.5, 0.8][i];
        check("softmax_rows", vec![x.clone()], &|t, v| {
            let o = t.softmax_rows(v[0], tau)?;
            weighted_sum(t, o, k)
        });
        check("log_softmax_rows", vec![x.clone()], &|t, v| {
            let o = t.log_softmax_rows(v[0], tau)?;
            weighted_sum(t, o, k)
        });
        check("relu", vec![x.clone()], &|t, v| {
            let o = t.relu(v[0]);
            weighted_sum(t, o, k)
        });
        check("sigmoid", vec![x.clone()], &|t, v| {
            let o = t.sigmoid(v[0]);
            weighted_sum(t, o, k)
        });
        check("square/scale/mean", vec![x.clone()], &|t, v| {
            let o = t.square(v[0]);
            let o = t.scale(o, 0.3);
            Ok(t.mean(o))
        });
        check("add/sub/mul/mse", vec![x.clone(), y.clone()], &|t, v| {
            let a = t.add(v[0], v[1])?;
            let b = t.sub(v[0], v[1])?;
            let m = t.mul(a, b)?;
            let s1 = weighted_sum(t, m, k)?;
            let s2 = t.mse(v[0], v[1])?;
            t.add(s1, s2)
        });
        check("avg_pool/upsample", vec![x.clone()], &|t, v| {
            let p = t.avg_pool2d(v[0], 2)?;
            let u = t.upsample_nearest(p, 2)?;
            let g = t.avg_pool_full(v[0]);
            let a = weighted_sum(t, u, k)?;
            let b = weighted_sum(t, g, k + 7)?;
            t.add(a, b)
        });
        let other = rand_grid(&mut rng, [s[0], 2, s[2], s[3]], -2.0, 2.0);
        check("concat/permute/reshape", vec![x.clone(), other], &|t, v| {
            let c = t.concat_channels(&[v[0], v[1]])?;
            let p = t.permute(c, [2, 0, 3, 1])?;
            let sh = t.shape(p);
            let r = t.reshape(p, [1, 1, sh[0] * sh[1], sh[2] * sh[3]])?;
            weighted_sum(t, r, k)
        });
        let mask: Vec<bool> = (0..x.len()).map(|j| (j * 7 + i) % 3 != 0).collect();
        check("patchify/masked_select", vec![x.clone()], &|t, v| {
            let p = t.patchify(v[0], 2)?;
            let a = weighted_sum(t, p, k)?;
            let m = t.masked_select(v[0], &mask)?;
            let b = weighted_sum(t, m, k + 3)?;
            t.add(a, b)
        });
        let target = rand_grid(&mut rng, *s, 0.0, 1.0);
        check("bce_with_logits", vec![x.clone(), target], &|t, v| {
            t.bce_with_logits(v[0], v[1])
        });
        let n = [3, 4, 5, 6, 9][i];
        let ax = rand_grid(&mut rng, [2, 1, n, 4], -2.0, 2.0);
        let wq: Vec<Grid4> = (0..3)
            .map(|_| rand_grid(&mut rng, [1, 1, 4, 4], -0.7, 0.7))
            .collect();
        check(
            "scaled_dot_attention",
            vec![ax, wq[0].clone(), wq[1].clone(), wq[2].clone()],
            &|t, v| {
                let (a, o) = t.scaled_dot_attention(v[0], v[1], v[2], v[3])?;
                let s1 = weighted_sum(t, a, k)?;
                let s2 = weighted_sum(t, o, k + 1)?;
                t.add(s1, s2)
            },
        );
        let emb = rand_grid(&mut rng, [2, 3, 4, 5], -1.5, 1.5);
        let sets: Vec<Vec<Vec<usize>>> = (0..2)
            .map(|bi| {
                let n = 2 + (i + bi) % 3;
                let mut s = vec![Vec::new(); n];
                for p in 0..20 {
                    if (p + i) % 4 != 0 {
                        s[(p * 3 + bi) % n].push(p);
                    }
                }
                s
            })
            .collect();
        let sets = std::rc::Rc::new(sets);
        let margins = DiscriminativeMargins {
            pull: 0.3,
            push: 1.0,
            reg: 0.01,
        };
        check("discriminative_loss", vec![emb], &|t, v| {
            t.discriminative_loss(v[0], sets.clone(), margins)
        });
    }

    // composite losses
    let cfg = TgpdConfig {
        patch: 2,
        dim: 6,
        ..TgpdConfig::default()
    };
    for (i, (b, h, w)) in [(1, 2, 2), (1, 4, 4), (2, 2, 4), (1, 4, 2), (2, 4, 6)]
        .into_iter()
        .enumerate()
    {
        let sp = init_projections(Role::Student, &cfg, i as u64);
        let r = tokenize(
            &rand_grid(&mut rng, [b, 32, h, w], 0.0, 1.0),
            &init_projections(Role::Teacher, &cfg, 7),
            2,
        )
        .unwrap();
        let names: Vec<String> = sp.iter().map(|(k, _)| k.clone()).collect();
        let mut leaves = vec![rand_grid(&mut rng, [b, 16, h, w], -1.0, 1.0)];
        leaves.extend(sp.iter().map(|(_, g)| g.clone()));
        check("tgpd", leaves, &|t, v| {
            let bound: Bound = names.iter().cloned().zip(v[1..].iter().copied()).collect();
            let tok = tokenize_on_tape(t, v[0], &bound, 2)?;
            let rs = t.constant(r.seq.clone());
            let rl = t.constant(r.logits.clone());
            pair_loss_on_tape(t, &tok, rs, rl, 0.8, 1.0)
        });
    }
    for shape in [
        [1, 1, 1, 1],
        [1, 3, 2, 2],
        [2, 3, 3, 4],
        [1, 2, 5, 1],
        [2, 1, 2, 3],
    ] {
        let mut gt = Grid4::from_fn(shape, |_| rng.gen_bool(0.5) as u8 as f64);
        gt.values_mut()[0] = 1.0;
        let mask = build_mask(&gt).unwrap();
        let pt = probabilities(&rand_grid(&mut rng, shape, -3.0, 3.0));
        let pc = probabilities(&rand_grid(&mut rng, shape, -3.0, 3.0));
        let s = rand_grid(&mut rng, shape, -3.0, 3.0);
        check("msrd", vec![s], &|t, v| {
            msrd_on_tape(t, v[0], Some(&pt), Some(&pc), &mask, 0.7, 0.3)
        });
    }
    // both distillation terms through one student BEV and head, 2x4x8x8
    {
        let bev = rand_grid(&mut rng, [2, 16, 8, 8], -1.0, 1.0);
        let head = rand_grid(&mut rng, [3, 16, 1, 1], -0.5, 0.5);
        let sp = init_projections(Role::Student, &cfg, 3);
        let r = tokenize(
            &rand_grid(&mut rng, [2, 32, 8, 8], 0.0, 1.0),
            &init_projections(Role::Teacher, &cfg, 4),
            2,
        )
        .unwrap();
        let gt = Grid4::from_fn([2, 3, 8, 8], |_| rng.gen_bool(0.3) as u8 as f64);
        let mask = build_mask(&gt).unwrap();
        let pt = probabilities(&rand_grid(&mut rng, [2, 3, 8, 8], -3.0, 3.0));
        let names: Vec<String> = sp.iter().map(|(k, _)| k.clone()).collect();
        check("tgpd+msrd", vec![bev, head], &|t, v| {
            let consts: Vec<Var> = sp.iter().map(|(_, g)| t.constant(g.clone())).collect();
            let bound: Bound = names.iter().cloned().zip(consts).collect();
            let tok = tokenize_on_tape(t, v[0], &bound, 2)?;
            let rs = t.constant(r.seq.clone());
            let rl = t.constant(r.logits.clone());
            let l1 = pair_loss_on_tape(t, &tok, rs, rl, 1.0, 1.0)?;
            let logits = t.conv2d(v[0], v[1], None, 1, 0)?;
            let l2 = msrd_on_tape(t, logits, Some(&pt), None, &mask, 0.7, 0.0)?;
            let l1 = t.scale(l1, 0.5);
            let l2 = t.scale(l2, 0.5);
            t.add(l1, l2)
        });
    }
    let elapsed = t0.elapsed().as_secs_f64();
    let bad: Vec<String> = worst
        .iter()
        .filter(|(_, r)| !(*r < GRAD_TOL))
        .map(|(n, r)| format!("{n}={r:.2e}"))
        .collect();
    let max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    let pass = bad.is_empty() && elapsed < 120.0;
    report(
        1,
        pass,
        format!(
            "{} ops/losses, max rel err {max:.2e}, {elapsed:.1}s {}",
            worst.len(),
            bad.join(" ")
        ),
    );
    assert!(pass, "{bad:?} {elapsed}");
}

// ----------------------------------------------------------------------
// 2

#[test]
fn c02_loss_identities() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cfg = TgpdConfig {
        patch: 2,
        dim: 6,
        ..TgpdConfig::default()
    };
    let bev = rand_grid(&mut rng, [2, 16, 4, 8], -1.0, 1.0);
    let tok = tokenize(&bev, &init_projections(Role::Student, &cfg, 1), 2).unwrap();
    let self_loss = tgpd_pair_loss(&tok, &tok, 1.0, 1.0).unwrap();

    let mut min_kl = f64::INFINITY;
    for _ in 0..1000 {
        let n = rng.gen_range(1..7);
        let b = rng.gen_range(1..3);
        let a = rand_grid(&mut rng, [b, 1, n, n], -8.0, 8.0);
        let r = rand_grid(&mut rng, [b, 1, n, n], -8.0, 8.0);
        let mut t = Tape::inference();
        let (av, rv) = (t.constant(a), t.constant(r));
        let kl = attention_kl_on_tape(&mut t, av, rv, rng.gen_range(0.2..4.0)).unwrap();
        min_kl = min_kl.min(t.scalar_value(kl));
    }

    let shape = [2, 3, 6, 6];
    let gt = Grid4::from_fn(shape, |_| rng.gen_bool(0.3) as u8 as f64);
    let mask = build_mask(&gt).unwrap();
    let (mut s, mut t, mut c) = (
        rand_grid(&mut rng, shape, -3.0, 3.0),
        rand_grid(&mut rng, shape, -3.0, 3.0),
        rand_grid(&mut rng, shape, -3.0, 3.0),
    );
    let base = msrd_loss(&s, &t, &c, &mask, 0.7, 0.3).unwrap();
    let off: Vec<usize> = (0..mask.cells.len()).filter(|&i| !mask.cells[i]).collect();
    let mut local = true;
    for _ in 0..1000 {
        let i = off[rng.gen_range(0..off.len())];
        let which = rng.gen_range(0..3);
        [&mut s, &mut t, &mut c][which].values_mut()[i] = rng.gen_range(-50.0..50.0);
        local &= msrd_loss(&s, &t, &c, &mask, 0.7, 0.3).unwrap().to_bits() == base.to_bits();
    }

    let one = Grid4::full([1, 1, 1, 1], 0.0);
    let m1 = build_mask(&Grid4::full([1, 1, 1, 1], 1.0)).unwrap();
    let ln2 = msrd_loss(&one, &one, &one, &m1, 1.0, 0.0).unwrap();
    let ln2_err = (ln2 - std::f64::consts::LN_2).abs();

    let pass = self_loss == 0.0 && min_kl >= -1e-12 && local && ln2_err < 1e-12;
    report(
        2,
        pass,
        format!("self-loss {self_loss}, min KL {min_kl:.3e}, mask-local {local}, |ln2 err| {ln2_err:.1e}"),
    );
    assert!(pass);
}

// ----------------------------------------------------------------------
// 3, 4

#[test]
fn c03_degenerate_weight_equivalences() {
    let _g = serial();
    let g = tiny_gen();
    let train = generate_split(&g, 3, 0, 16).unwrap();
    let val = generate_split(&g, 3, 1, 4).unwrap();
    let (t, c) = (frozen(Role::Teacher, 1), frozen(Role::Coach, 2));
    let mut s = DistillSettings::default();
    s.train.epochs = 2;

    s.weights = LossWeights {
        lambda1: 0.0,
        lambda2: 0.0,
        ..LossWeights::default()
    };
    let refs = References::prepare(&s, &train, &t, Some(&c), 5).unwrap();
    let zero = train_student(&s, &train, &val, Some(&refs), 5).unwrap();
    let base = train_student(&s, &train, &val, None, 5).unwrap();
    let eq1 = zero.student.to_bytes() == base.student.to_bytes();

    s.weights = LossWeights {
        beta2: 0.0,
        gamma2: 0.0,
        ..LossWeights::default()
    };
    let zeroed = distill_student(&s, &train, &val, &t, Some(&c), 5).unwrap();
    let mut two = s.clone();
    two.weights = two_stage(&LossWeights::default());
    let two = distill_student(&two, &train, &val, &t, None, 5).unwrap();
    let eq2 = zeroed.student.to_bytes() == two.student.to_bytes();

    report(
        3,
        eq1 && eq2,
        format!("lambda=0 vs baseline {eq1}, beta2=gamma2=0 vs two-stage {eq2}"),
    );
    assert!(eq1 && eq2);
}

#[test]
fn c04_frozen_reference_invariant() {
    let _g = serial();
    let dir = tempfile::tempdir().unwrap();
    let g = tiny_gen();
    let train = generate_split(&g, 4, 0, 16).unwrap();
    let val = generate_split(&g, 4, 1, 4).unwrap();
    let (t, c) = (frozen(Role::Teacher, 1), frozen(Role::Coach, 2));
    let (tp, cp) = (dir.path().join("t.tcsp"), dir.path().join("c.tcsp"));
    t.save(&tp).unwrap();
    c.save(&cp).unwrap();
    let before = (std::fs::read(&tp).unwrap(), std::fs::read(&cp).unwrap());
    let (t2, c2) = (NetParams::load(&tp).unwrap(), NetParams::load(&cp).unwrap());
    let mut s = DistillSettings::default();
    s.train.epochs = 2;
    distill_student(&s, &train, &val, &t2, Some(&c2), 0).unwrap();
    t2.save(&tp).unwrap();
    c2.save(&cp).unwrap();
    let same = before == (std::fs::read(&tp).unwrap(), std::fs::read(&cp).unwrap());
    report(
        4,
        same,
        format!("teacher/coach checkpoints byte-identical after distillation: {same}"),
    );
    assert!(same);
}

// ----------------------------------------------------------------------
// 5, 6, 7: one shared benchmark

struct Bench {
    table: AblationTable,
    minutes: f64,
}

fn bench_config() -> RunConfig {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.cfg");
    RunConfig::load(&p).expect("configs/desk.cfg")
}

fn benchmark() -> &'static Bench {
    static B: OnceLock<Bench> = OnceLock::new();
    B.get_or_init(|| {
        let t0 = Instant::now();
        let cfg = bench_config();
        let train = generate_split(&cfg.gen, cfg.seed, 0, cfg.gen.train_count).unwrap();
        let val = generate_split(&cfg.gen, cfg.seed, 1, cfg.gen.val_count).unwrap();
        let pre = pretrain_teacher_coach(&cfg.pretrain, &train, &val, cfg.seed, None).unwrap();
        let table = run_ablation(
            Matrix::Table3,
            &cfg.distill,
            &train,
            &val,
            &pre.teacher,
            &pre.coach,
            cfg.seed,
            &cfg.ablate,
        )
        .unwrap();
        let mut out = String::from("benchmark (table3 matrix), mIoU / mAP per seed:\n");
        for r in &table.results {
            out.push_str(&format!(
                "  {:<8} seed {} {:.4} {:.4}\n",
                r.config, r.seed, r.report.miou, r.report.map
            ));
        }
        for c in ["baseline", "a", "b", "c", "d", "e", "f"] {
            if let Some((m, a)) = table.mean(c) {
                out.push_str(&format!("  {c:<8} mean   {m:.4} {a:.4}\n"));
            }
        }
        let _ = std::io::stderr().write_all(out.as_bytes());
        Bench {
            table,
            minutes: t0.elapsed().as_secs_f64() / 60.0,
        }
    })
}

fn per_seed(t: &AblationTable, config: &str) -> Vec<(u64, f64, f64)> {
    t.results
        .iter()
        .filter(|r| r.config == config)
        .map(|r| (r.seed, r.report.miou, r.report.map))
        .collect()
}

#[test]
fn c05_distillation_benefit() {
    let _g = serial();
    let b = benchmark();
    let (bm, ba) = b.table.mean("baseline").unwrap();
    let (fm, fa) = b.table.mean("f").unwrap();
    let base = per_seed(&b.table, "baseline");
    let full = per_seed(&b.table, "f");
    let each = base.len() == 3
        && base
            .iter()
            .zip(&full)
            .all(|(x, y)| x.0 == y.0 && y.1 > x.1 && y.2 > x.2);
    let pass = fm - bm >= MIN_GAIN && fa - ba >= MIN_GAIN && each && b.minutes <= 30.0;
    report(
        5,
        pass,
        format!(
            "full vs baseline: +{:.2} mIoU, +{:.2} mAP (points), every seed positive {each}, {:.1} min",
            100.0 * (fm - bm),
            100.0 * (fa - ba),
            b.minutes
        ),
    );
    assert!(pass || !strict_trends());
}

#[test]
fn c06_component_ordering() {
    let _g = serial();
    let t = &benchmark().table;
    let m = |c| t.mean(c).unwrap().0;
    let (base, a, b, c, f) = (m("baseline"), m("a"), m("b"), m("c"), m("f"));
    let single = a.max(b);
    let pass = base < single && single < c && c <= f + TIE;
    report(
        6,
        pass,
        format!(
            "mIoU baseline {base:.4} < max(a {a:.4}, b {b:.4}) < c {c:.4} <= f {f:.4} (+/-0.3pt)"
        ),
    );
    assert!(pass || !strict_trends());
}

#[test]
fn c07_three_vs_two_stage() {
    let _g = serial();
    let t = &benchmark().table;
    let (_, two) = t.mean("c").unwrap();
    let (_, three) = t.mean("f").unwrap();
    let pass = three >= two - TIE;
    report(
        7,
        pass,
        format!(
            "mAP three-stage {three:.4} vs two-stage {two:.4}; strictly higher: {}",
            three > two
        ),
    );
    assert!(pass || !strict_trends());
}

// ----------------------------------------------------------------------
// 8

#[test]
fn c08_capacity_and_throughput() {
    let _g = serial();
    let cfg = RunConfig::default();
    let val = generate_split(&cfg.gen, 8, 1, cfg.bench.batch_size).unwrap();
    let (s, t) = (init_params(Role::Student, 0), init_params(Role::Teacher, 0));
    let b = &cfg.bench;
    let mut wins = 0;
    let mut rates = Vec::new();
    for _ in 0..3 {
        let fs = bench_fps(&s, &val, b.warmup, b.iters, b.batch_size).unwrap();
        let ft = bench_fps(&t, &val, b.warmup, b.iters, b.batch_size).unwrap();
        wins += (fs > ft) as usize;
        rates.push(format!("{fs:.1}/{ft:.1}"));
    }
    let (ps, pt) = (s.param_count(), t.param_count());
    let pass = wins == 3 && ps < pt;
    report(
        8,
        pass,
        format!(
            "student/teacher fps {} ({wins}/3), params {ps} < {pt}",
            rates.join(" ")
        ),
    );
    assert!(pass || !strict_trends());
}

// ----------------------------------------------------------------------
// 9

const PIPELINE_CFG: &str = "\
gen.height = 32
gen.width = 64
gen.train_count = 24
gen.val_count = 8
pretrain.epochs = 2
pretrain.lr = 0.003
distill.epochs = 2
distill.lr = 0.003
ablate.seeds = 1
";

fn pipeline(dir: &Path) -> Vec<(String, Vec<u8>)> {
    std::fs::write(dir.join("run.cfg"), PIPELINE_CFG).unwrap();
    let steps: [&[&str]; 5] = [
        &["gen", "--out", "g"],
        &["pretrain", "--data", "g", "--out", "m"],
        &["distill", "--data", "g", "--models", "m", "--out", "s"],
        &[
            "eval",
            "--data",
            "g",
            "--out",
            "e",
            "m/teacher.tcsp",
            "m/coach.tcsp",
            "s/student.tcsp",
        ],
        &[
            "ablate", "table4", "--data", "g", "--models", "m", "--out", "a",
        ],
    ];
    for args in steps {
        let o = Command::new(env!("CARGO_BIN_EXE_tcskd"))
            .current_dir(dir)
            .env_remove("TCSKD_OUT_DIR")
            .args(["--config", "run.cfg", "--seed", "3"])
            .args(args)
            .output()
            .unwrap();
        assert!(
            o.status.success(),
            "{args:?}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
    }
    [
        "g/manifest.csv",
        "m/teacher_log.csv",
        "s/student_log.csv",
        "e/metrics.csv",
        "a/table4.csv",
    ]
    .iter()
    .map(|f| (f.to_string(), std::fs::read(dir.join(f)).unwrap()))
    .collect()
}

#[test]
fn c09_determinism() {
    let _g = serial();
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (a, b) = (pipeline(d1.path()), pipeline(d2.path()));
    let differing: Vec<&str> = a
        .iter()
        .zip(&b)
        .filter(|(x, y)| x.1 != y.1)
        .map(|(x, _)| x.0.as_str())
        .collect();
    let pass = differing.is_empty();
    report(
        9,
        pass,
        format!(
            "{} CSVs from two fixed-seed pipeline runs; differing: {differing:?}",
            a.len()
        ),
    );
    assert!(pass);
}

// ----------------------------------------------------------------------
// 10

fn flip_all_rejected(
    path: &Path,
    load: impl Fn(&Path) -> tcskd::Result<()>,
    rng: &mut ChaCha8Rng,
    trials: usize,
) -> (usize, usize) {
    let orig = std::fs::read(path).unwrap();
    let scratch = path.with_extension("flip");
    let mut rejected = 0;
    for i in 0..trials {
        let mut bytes = orig.clone();
        // always hit the first and last bytes, then random positions
        let pos = match i {
            0 => 0,
            1 => bytes.len() - 1,
            _ => rng.gen_range(0..bytes.len()),
        };
        bytes[pos] ^= 1 << rng.gen_range(0..8);
        std::fs::write(&scratch, &bytes).unwrap();
        rejected += matches!(load(&scratch), Err(Error::Corrupt { .. })) as usize;
    }
    // truncations
    let mut truncated = 0;
    for cut in [0, 1, 4, orig.len() / 2, orig.len() - 1] {
        std::fs::write(&scratch, &orig[..cut]).unwrap();
        truncated += matches!(load(&scratch), Err(Error::Corrupt { .. })) as usize;
    }
    (rejected, truncated)
}

#[test]
fn c10_data_integrity() {
    let _g = serial();
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let scenes: Vec<SceneSample> = generate_split(&tiny_gen(), 10, 0, 3).unwrap();
    let dp = dir.path().join("d.tcsd");
    save_dataset(&scenes, "echo", &dp).unwrap();
    let back = load_dataset(&dp).unwrap();
    let ds_ok = back.samples == scenes && {
        save_dataset(&back.samples, "echo", &dir.path().join("d2.tcsd")).unwrap();
        std::fs::read(&dp).unwrap() == std::fs::read(dir.path().join("d2.tcsd")).unwrap()
    };
    let mp = dir.path().join("m.tcsp");
    let model = init_params(Role::Coach, 1);
    model.save(&mp).unwrap();
    let ck_ok = NetParams::load(&mp).unwrap().to_bytes() == model.to_bytes();

    let (dr, dt) = flip_all_rejected(&dp, |p| load_dataset(p).map(|_| ()), &mut rng, 200);
    let (mr, mt) = flip_all_rejected(&mp, |p| NetParams::load(p).map(|_| ()), &mut rng, 200);
    let pass = ds_ok && ck_ok && dr == 200 && mr == 200 && dt == 5 && mt == 5;
    report(
        10,
        pass,
        format!(
            "round-trip dataset {ds_ok} checkpoint {ck_ok}; bit flips rejected {dr}/200 and {mr}/200, truncations {dt}/5 and {mt}/5"
        ),
    );
    assert!(pass);
}

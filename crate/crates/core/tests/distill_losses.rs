use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tcskd::diffcore::{grad_check, Grid4, Tape, FD_STEP};
use tcskd::msrd::{build_mask, msrd_loss, msrd_on_tape, probabilities};
use tcskd::nets::{Bound, NetParams, Role};
use tcskd::tgpd::{
    attention_kl_on_tape, init_projections, pair_loss_on_tape, tgpd_pair_loss, tokenize,
    tokenize_on_tape, TgpdConfig, TokenState,
};

fn rand_grid(rng: &mut ChaCha8Rng, shape: [usize; 4], lo: f64, hi: f64) -> Grid4 {
    Grid4::from_fn(shape, |_| rng.gen_range(lo..hi))
}

fn small_cfg() -> TgpdConfig {
    TgpdConfig {
        patch: 2,
        dim: 6,
        ..TgpdConfig::default()
    }
}

/// Projections sized for a BEV with `c` channels.
fn proj_for(c: usize, cfg: &TgpdConfig, seed: u64) -> NetParams {
    let role = [Role::Student, Role::Coach, Role::Teacher]
        .into_iter()
        .find(|r| r.bev_channels() == c)
        .expect("a role with this width");
    init_projections(role, cfg, seed)
}

#[test]
fn identical_states_have_zero_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cfg = small_cfg();
    let bev = rand_grid(&mut rng, [2, 16, 4, 8], -1.0, 1.0);
    let t = tokenize(&bev, &proj_for(16, &cfg, 3), cfg.patch).unwrap();
    assert_eq!(tgpd_pair_loss(&t, &t, 1.0, 1.0).unwrap(), 0.0);
    assert_eq!(tgpd_pair_loss(&t, &t, 0.5, 0.0).unwrap(), 0.0);
}

#[test]
fn kl_is_nonnegative_on_fuzz() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for case in 0..1000 {
        let n = rng.gen_range(1..7);
        let b = rng.gen_range(1..3);
        let a = rand_grid(&mut rng, [b, 1, n, n], -8.0, 8.0);
        let r = rand_grid(&mut rng, [b, 1, n, n], -8.0, 8.0);
        let tau = rng.gen_range(0.2..4.0);
        let mut t = Tape::inference();
        let (av, rv) = (t.constant(a), t.constant(r));
        let kl = attention_kl_on_tape(&mut t, av, rv, tau).unwrap();
        let v = t.scalar_value(kl);
        assert!(v >= -1e-12 && v.is_finite(), "case {case}: {v}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn kl_zero_iff_rows_shift_equal(rows in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 4), 4), shift in -3.0f64..3.0) {
        // adding a constant per row leaves the softmax and so the KL unchanged
        let flat: Vec<f64> = rows.concat();
        let shifted: Vec<f64> = flat.iter().map(|v| v + shift).collect();
        let mut t = Tape::inference();
        let a = t.constant(Grid4::new([1, 1, 4, 4], flat).unwrap());
        let b = t.constant(Grid4::new([1, 1, 4, 4], shifted).unwrap());
        let kl = attention_kl_on_tape(&mut t, a, b, 1.0).unwrap();
        prop_assert!(t.scalar_value(kl).abs() < 1e-12);
    }
}

/// Apply a permutation of patch tokens (token 0 stays first) to a state.
fn permute_tokens(s: &TokenState, perm: &[usize]) -> TokenState {
    let [b, _, n1, d] = s.seq.shape();
    let map = |i: usize| if i == 0 { 0 } else { 1 + perm[i - 1] };
    let seq = Grid4::from_fn([b, 1, n1, d], |[bi, _, i, k]| s.seq.at(bi, 0, map(i), k));
    let logits = Grid4::from_fn([b, 1, n1, n1], |[bi, _, i, j]| {
        s.logits.at(bi, 0, map(i), map(j))
    });
    TokenState {
        seq,
        logits,
        ..s.clone()
    }
}

#[test]
fn loss_is_invariant_to_patch_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = small_cfg();
    let s = tokenize(
        &rand_grid(&mut rng, [1, 16, 4, 8], 0.0, 1.0),
        &proj_for(16, &cfg, 1),
        2,
    )
    .unwrap();
    let r = tokenize(
        &rand_grid(&mut rng, [1, 32, 4, 8], 0.0, 1.0),
        &proj_for(32, &cfg, 2),
        2,
    )
    .unwrap();
    let n = s.seq.shape()[2] - 1;
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        perm.swap(i, rng.gen_range(0..=i));
    }
    let base = tgpd_pair_loss(&s, &r, 1.0, 1.0).unwrap();
    let moved = tgpd_pair_loss(
        &permute_tokens(&s, &perm),
        &permute_tokens(&r, &perm),
        1.0,
        1.0,
    )
    .unwrap();
    assert!((base - moved).abs() < 1e-12, "{base} vs {moved}");
}

#[test]
fn attention_logits_match_naive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = small_cfg();
    let p = proj_for(24, &cfg, 9);
    let t = tokenize(&rand_grid(&mut rng, [2, 24, 4, 6], -1.0, 1.0), &p, 2).unwrap();
    let (wq, wk) = (p.get("wq").unwrap(), p.get("wk").unwrap());
    let [b, _, n1, d] = t.seq.shape();
    for bi in 0..b {
        let proj = |w: &Grid4, i: usize| -> Vec<f64> {
            (0..d)
                .map(|o| {
                    (0..d)
                        .map(|k| t.seq.at(bi, 0, i, k) * w.at(0, 0, k, o))
                        .sum()
                })
                .collect()
        };
        for i in 0..n1 {
            let q = proj(wq, i);
            for j in 0..n1 {
                let k = proj(wk, j);
                let want = q.iter().zip(&k).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt();
                assert!((t.logits.at(bi, 0, i, j) - want).abs() < 1e-12);
            }
            let row: f64 = (0..n1).map(|j| t.attn.at(bi, 0, i, j)).sum();
            assert!((row - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn constant_map_gives_uniform_attention_over_patches() {
    let cfg = small_cfg();
    let t = tokenize(&Grid4::full([1, 16, 4, 8], 0.7), &proj_for(16, &cfg, 2), 2).unwrap();
    let n1 = t.seq.shape()[2];
    for i in 0..n1 {
        let first = t.attn.at(0, 0, i, 1);
        for j in 2..n1 {
            assert!((t.attn.at(0, 0, i, j) - first).abs() < 1e-15);
        }
    }
}

#[test]
fn gradient_reaches_student_only() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cfg = small_cfg();
    let sp = proj_for(16, &cfg, 1);
    let r = tokenize(
        &rand_grid(&mut rng, [1, 32, 4, 8], 0.0, 1.0),
        &proj_for(32, &cfg, 2),
        2,
    )
    .unwrap();
    let mut tape = Tape::new();
    let sb: Bound = sp.bind(&mut tape);
    let bev = tape.leaf(rand_grid(&mut rng, [1, 16, 4, 8], 0.0, 1.0).with_requires_grad(true));
    let tok = tokenize_on_tape(&mut tape, bev, &sb, 2).unwrap();
    let rs = tape.constant(r.seq.clone());
    let rl = tape.constant(r.logits.clone());
    let l = pair_loss_on_tape(&mut tape, &tok, rs, rl, 1.0, 1.0).unwrap();
    tape.backward(l).unwrap();
    assert!(tape.grad(bev).unwrap().iter().any(|&g| g != 0.0));
    assert!(tape.grad(sb["wq"]).is_some());
    assert!(tape.grad(rs).is_none() && tape.grad(rl).is_none());
}

#[test]
fn msrd_matched_logits_give_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let s = rand_grid(&mut rng, [2, 3, 4, 5], -4.0, 4.0);
    let gt = Grid4::from_fn([2, 3, 4, 5], |_| rng.gen_bool(0.4) as u8 as f64);
    let mask = build_mask(&gt).unwrap();
    let p = probabilities(&s);
    let mut want = 0.0;
    for (&q, &m) in p.values().iter().zip(&mask.cells) {
        if m {
            want -= q * q.ln() + (1.0 - q) * (1.0 - q).ln();
        }
    }
    want /= mask.count() as f64;
    let got = msrd_loss(&s, &s, &s, &mask, 0.7, 0.3).unwrap();
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");
}

#[test]
fn msrd_ignores_unmasked_cells_bit_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
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
    for _ in 0..1000 {
        let i = off[rng.gen_range(0..off.len())];
        let which = rng.gen_range(0..3);
        let g = [&mut s, &mut t, &mut c][which].values_mut();
        g[i] = rng.gen_range(-50.0..50.0);
        assert_eq!(
            msrd_loss(&s, &t, &c, &mask, 0.7, 0.3).unwrap().to_bits(),
            base.to_bits()
        );
    }
}

#[test]
fn msrd_one_cell_minimizer_is_weighted_mix() {
    // d/ds [g1 BCE(s, pt) + g2 BCE(s, pc)] = 0 at sigmoid(s) = (g1 pt + g2 pc) / (g1 + g2)
    let (pt, pc, g1, g2) = (0.9, 0.2, 0.7, 0.3);
    let mix: f64 = (g1 * pt + g2 * pc) / (g1 + g2);
    let s_star = (mix / (1.0 - mix)).ln();
    let mask = build_mask(&Grid4::full([1, 1, 1, 1], 1.0)).unwrap();
    let logit = |p: f64| (p / (1.0 - p)).ln();
    let (lt, lc) = (
        Grid4::full([1, 1, 1, 1], logit(pt)),
        Grid4::full([1, 1, 1, 1], logit(pc)),
    );
    let mut tape = Tape::new();
    let s = tape.leaf(Grid4::full([1, 1, 1, 1], s_star).with_requires_grad(true));
    let l = msrd_on_tape(
        &mut tape,
        s,
        Some(&probabilities(&lt)),
        Some(&probabilities(&lc)),
        &mask,
        g1,
        g2,
    )
    .unwrap();
    tape.backward(l).unwrap();
    assert!(tape.grad(s).unwrap()[0].abs() < 1e-12);
    let at = |v: f64| msrd_loss(&Grid4::full([1, 1, 1, 1], v), &lt, &lc, &mask, g1, g2).unwrap();
    assert!(at(s_star) < at(s_star + 0.05) && at(s_star) < at(s_star - 0.05));
}

#[test]
fn msrd_and_tgpd_pass_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for shape in [
        [1, 1, 1, 1],
        [1, 3, 2, 2],
        [2, 3, 3, 4],
        [1, 2, 5, 1],
        [2, 1, 2, 3],
    ] {
        let gt = Grid4::from_fn(shape, |_| rng.gen_bool(0.5) as u8 as f64);
        let mask = build_mask(&Grid4::from_fn(shape, |[b, c, y, x]| {
            if b + c + y + x == 0 {
                1.0
            } else {
                gt.at(b, c, y, x)
            }
        }))
        .unwrap();
        let pt = probabilities(&rand_grid(&mut rng, shape, -3.0, 3.0));
        let pc = probabilities(&rand_grid(&mut rng, shape, -3.0, 3.0));
        let s = rand_grid(&mut rng, shape, -3.0, 3.0);
        let r = grad_check(
            |t, v| msrd_on_tape(t, v[0], Some(&pt), Some(&pc), &mask, 0.7, 0.3),
            &[s],
            FD_STEP,
        )
        .unwrap();
        assert!(r.max() < 1e-4, "msrd {shape:?}: {}", r.max());
    }
    let cfg = small_cfg();
    for (i, (b, h, w)) in [(1, 2, 2), (1, 4, 4), (2, 2, 4), (1, 4, 2), (2, 4, 6)]
        .into_iter()
        .enumerate()
    {
        let sp = proj_for(16, &cfg, i as u64);
        let r = tokenize(
            &rand_grid(&mut rng, [b, 32, h, w], 0.0, 1.0),
            &proj_for(32, &cfg, 7),
            2,
        )
        .unwrap();
        let bev = rand_grid(&mut rng, [b, 16, h, w], -1.0, 1.0);
        let names: Vec<String> = sp.iter().map(|(k, _)| k.clone()).collect();
        let mut leaves = vec![bev];
        leaves.extend(sp.iter().map(|(_, g)| g.clone()));
        let rep = grad_check(
            |t, v| {
                let bound: Bound = names.iter().cloned().zip(v[1..].iter().copied()).collect();
                let tok = tokenize_on_tape(t, v[0], &bound, 2)?;
                let rs = t.constant(r.seq.clone());
                let rl = t.constant(r.logits.clone());
                pair_loss_on_tape(t, &tok, rs, rl, 0.8, 1.0)
            },
            &leaves,
            FD_STEP,
        )
        .unwrap();
        assert!(rep.max() < 1e-4, "tgpd case {i}: {}", rep.max());
    }
}

use tcskd::diffcore::Grid4;
use tcskd::nets::{forward, init_params, student_forward, NetParams, Role, EMBED_DIM};
use tcskd::scenegen::{generate_split, GenConfig, SceneSample};
use tcskd::trainer::Batch;

fn scenes(n: usize) -> Vec<SceneSample> {
    let g = GenConfig {
        height: 32,
        width: 64,
        ..GenConfig::default()
    };
    generate_split(&g, 11, 0, n).unwrap()
}

fn run(p: &NetParams, s: &[SceneSample]) -> tcskd::nets::ForwardOut {
    let b = Batch::new(&s.iter().collect::<Vec<_>>()).unwrap();
    forward(p, b.inputs()).unwrap()
}

fn slab(g: &Grid4, i: usize) -> &[f64] {
    let s = g.shape();
    let n = s[1] * s[2] * s[3];
    &g.values()[i * n..(i + 1) * n]
}

#[test]
fn output_shapes_per_role() {
    let s = scenes(2);
    for role in [Role::Teacher, Role::Coach, Role::Student] {
        let o = run(&init_params(role, 0), &s);
        assert_eq!(o.logits.shape(), [2, 3, 32, 64]);
        assert_eq!(o.embed.shape(), [2, EMBED_DIM, 32, 64]);
        assert_eq!(o.bev.shape(), [2, role.bev_channels(), 16, 32]);
    }
}

#[test]
fn batched_forward_matches_single_scenes() {
    let s = scenes(3);
    for role in [Role::Teacher, Role::Coach, Role::Student] {
        let p = init_params(role, 4);
        let all = run(&p, &s);
        for i in 0..s.len() {
            let one = run(&p, &s[i..i + 1]);
            for (a, b) in [
                (&all.logits, &one.logits),
                (&all.bev, &one.bev),
                (&all.embed, &one.embed),
            ] {
                let d = slab(a, i)
                    .iter()
                    .zip(b.values())
                    .map(|(x, y)| (x - y).abs())
                    .fold(0.0, f64::max);
                assert!(d <= 1e-12, "{role} scene {i}: {d}");
            }
        }
    }
}

#[test]
fn student_sees_only_the_camera() {
    let s = scenes(2);
    let p = init_params(Role::Student, 2);
    let b = Batch::new(&s.iter().collect::<Vec<_>>()).unwrap();
    let full = forward(&p, b.inputs()).unwrap();
    let cam_only = student_forward(&p, &b.cam).unwrap();
    assert_eq!(full.logits.values(), cam_only.logits.values());
    let mut scrambled = s.clone();
    for x in &mut scrambled {
        x.lidar_view
            .values_mut()
            .iter_mut()
            .for_each(|v| *v = 7.0 - *v);
        x.sd_prior
            .values_mut()
            .iter_mut()
            .for_each(|v| *v = 1.0 - *v);
        x.hd_noisy
            .values_mut()
            .iter_mut()
            .for_each(|v| *v = 1.0 - *v);
    }
    assert_eq!(run(&p, &scrambled).logits.values(), full.logits.values());
}

#[test]
fn richer_models_use_their_priors() {
    let s = scenes(1);
    for role in [Role::Teacher, Role::Coach] {
        let p = init_params(role, 2);
        let a = run(&p, &s);
        let mut t = s.clone();
        t[0].hd_noisy
            .values_mut()
            .iter_mut()
            .for_each(|v| *v = 1.0 - *v);
        assert_ne!(run(&p, &t).bev.values(), a.bev.values(), "{role}");
    }
}

#[test]
fn capacity_grows_with_modalities() {
    let n = |r| init_params(r, 0).param_count();
    assert!(n(Role::Student) < n(Role::Coach));
    assert!(n(Role::Coach) < n(Role::Teacher));
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.tcsp");
    let p = init_params(Role::Coach, 9);
    p.save(&path).unwrap();
    let q = NetParams::load(&path).unwrap();
    assert_eq!(p.to_bytes(), q.to_bytes());
    assert_eq!(p.checksum(), q.checksum());
    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x10;
    std::fs::write(&path, &bytes).unwrap();
    let e = NetParams::load(&path).unwrap_err();
    assert!(matches!(e, tcskd::Error::Corrupt { .. }), "{e}");
}

#[test]
fn init_is_seeded() {
    assert_eq!(
        init_params(Role::Student, 3).to_bytes(),
        init_params(Role::Student, 3).to_bytes()
    );
    assert_ne!(
        init_params(Role::Student, 3).to_bytes(),
        init_params(Role::Student, 4).to_bytes()
    );
}

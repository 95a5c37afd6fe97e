use std::fs;

use tcskd::scenegen::{
    generate_scene, generate_split, load_dataset, save_dataset, GenConfig, SceneSample,
};
use tcskd::Error;

/// Fraction of (y, x) cells where any LiDAR channel is nonzero.
fn lidar_occupancy(s: &SceneSample) -> f64 {
    let [_, c, h, w] = s.lidar_view.shape();
    let hit = (0..h * w)
        .filter(|&p| (0..c).any(|ch| s.lidar_view.values()[ch * h * w + p] != 0.0))
        .count();
    hit as f64 / (h * w) as f64
}

#[test]
fn default_lidar_occupancy_in_band() {
    let cfg = GenConfig::default();
    let occ: Vec<f64> = (0..100)
        .map(|seed| lidar_occupancy(&generate_scene(&cfg, seed).unwrap()))
        .collect();
    let mean = occ.iter().sum::<f64>() / occ.len() as f64;
    assert!((0.05..=0.40).contains(&mean), "mean occupancy {mean}");
    // sparsity holds scene by scene, while the camera stays dense
    assert!(occ.iter().all(|&o| o <= 0.40), "{occ:?}");
    let s = generate_scene(&cfg, 3).unwrap();
    let dense =
        s.cam_view.values().iter().filter(|&&v| v != 0.0).count() as f64 / s.cam_view.len() as f64;
    assert!(dense > 0.5, "camera density {dense}");
}

#[test]
fn dataset_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.tcsd");
    let samples = generate_split(&GenConfig::default(), 11, 0, 10).unwrap();
    save_dataset(&samples, "seed = 11\n", &path).unwrap();
    let back = load_dataset(&path).unwrap();
    assert_eq!(back.config_echo, "seed = 11\n");
    assert_eq!(back.samples.len(), 10);
    for (a, b) in samples.iter().zip(&back.samples) {
        assert_eq!(a.seed, b.seed);
        assert_eq!(a.gt_inst, b.gt_inst);
        for (x, y) in [
            (&a.gt_sem, &b.gt_sem),
            (&a.cam_view, &b.cam_view),
            (&a.lidar_view, &b.lidar_view),
            (&a.sd_prior, &b.sd_prior),
            (&a.hd_noisy, &b.hd_noisy),
        ] {
            assert!(x.bit_eq(y));
        }
    }
}

#[test]
fn truncated_or_flipped_file_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.tcsd");
    let samples = generate_split(&GenConfig::default(), 5, 0, 3).unwrap();
    save_dataset(&samples, "", &path).unwrap();
    let bytes = fs::read(&path).unwrap();
    for cut in [0, 3, 10, bytes.len() / 2, bytes.len() - 1] {
        fs::write(&path, &bytes[..cut]).unwrap();
        let e = load_dataset(&path).unwrap_err();
        assert!(matches!(e, Error::Corrupt { .. }), "cut {cut}: {e}");
    }
    for at in [8, bytes.len() / 3, bytes.len() - 5] {
        let mut b = bytes.clone();
        b[at] ^= 0x10;
        fs::write(&path, &b).unwrap();
        assert!(matches!(
            load_dataset(&path).unwrap_err(),
            Error::Corrupt { .. }
        ));
    }
}

#[test]
fn empty_dataset_is_valid() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.tcsd");
    save_dataset(&[], "x", &path).unwrap();
    let d = load_dataset(&path).unwrap();
    assert!(d.samples.is_empty());
}

#[test]
fn missing_file_is_io_error() {
    let e = load_dataset("/nonexistent/x.tcsd".as_ref()).unwrap_err();
    assert_eq!(e.kind(), "io");
}

#[test]
fn splits_do_not_share_scenes() {
    let cfg = GenConfig::default();
    let a = generate_split(&cfg, 1, 0, 8).unwrap();
    let b = generate_split(&cfg, 1, 1, 8).unwrap();
    assert!(a.iter().all(|x| b.iter().all(|y| x.seed != y.seed)));
    assert!(!a[0].gt_sem.bit_eq(&b[0].gt_sem));
}

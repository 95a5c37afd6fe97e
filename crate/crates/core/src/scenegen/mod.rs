//! Procedural BEV map scenes with three element classes and four degraded
//! modality views (camera-like, LiDAR-like, SD prior, noisy HD prior).
//!
//! All views live in the BEV frame. The modality gap is produced by the
//! degradation style: the camera view is dense but blurred with distance,
//! noisy and partly occluded; the LiDAR view is sparse but geometric and
//! never occluded. The SD prior is a coarse skeleton of the road-boundary
//! class and stands in for a road-network map.

mod dataset;
pub mod raster;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use dataset::{load_dataset, save_dataset, Dataset};
use raster::{label_components, skeletonize, Mask};

use crate::config::kv_section;
use crate::diffcore::Grid4;
use crate::error::{Error, Result};

pub const NUM_CLASSES: usize = 3;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["ped", "div", "bou"];
pub const CAM_CHANNELS: usize = 3;
pub const LIDAR_CHANNELS: usize = 2;

const PED: usize = 0;
const DIV: usize = 1;
const BOU: usize = 2;

/// Camera intensity mixing: `cam[k] = Σ_c CAM_MIX[k][c] · gt[c]`.
pub const CAM_MIX: [[f64; NUM_CLASSES]; CAM_CHANNELS] =
    [[0.9, 0.75, 0.25], [0.85, 0.2, 0.6], [0.3, 0.55, 0.9]];

/// Per-class LiDAR return intensity and height (crossing, divider, boundary).
const LIDAR_INTENSITY: [f64; NUM_CLASSES] = [0.9, 0.7, 0.4];
const LIDAR_HEIGHT: [f64; NUM_CLASSES] = [0.0, 0.0, 0.25];
const GROUND_INTENSITY: f64 = 0.15;

#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub height: usize,
    pub width: usize,
    pub dividers_min: usize,
    pub dividers_max: usize,
    pub boundaries_min: usize,
    pub boundaries_max: usize,
    pub crossings_min: usize,
    pub crossings_max: usize,
    pub divider_width_min: usize,
    pub divider_width_max: usize,
    pub boundary_width_min: usize,
    pub boundary_width_max: usize,
    pub crossing_width_min: usize,
    pub crossing_width_max: usize,
    pub crossing_length_min: usize,
    pub crossing_length_max: usize,
    pub cam_blur_near: f64,
    pub cam_blur_far: f64,
    pub cam_occlusion_rate: f64,
    pub cam_occlusion_tile: usize,
    pub cam_noise: f64,
    pub lidar_keep_near: f64,
    pub lidar_keep_far: f64,
    pub lidar_ground_rate: f64,
    pub sd_downsample: usize,
    pub hd_dropout: f64,
    pub hd_jitter: usize,
    pub train_count: usize,
    pub val_count: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 128,
            dividers_min: 1,
            dividers_max: 3,
            boundaries_min: 1,
            boundaries_max: 2,
            crossings_min: 0,
            crossings_max: 2,
            divider_width_min: 1,
            divider_width_max: 2,
            boundary_width_min: 1,
            boundary_width_max: 2,
            crossing_width_min: 3,
            crossing_width_max: 5,
            crossing_length_min: 8,
            crossing_length_max: 14,
            cam_blur_near: 0.3,
            cam_blur_far: 1.5,
            cam_occlusion_rate: 0.15,
            cam_occlusion_tile: 8,
            cam_noise: 0.1,
            lidar_keep_near: 0.9,
            lidar_keep_far: 0.3,
            lidar_ground_rate: 0.12,
            sd_downsample: 8,
            hd_dropout: 0.2,
            hd_jitter: 2,
            train_count: 512,
            val_count: 128,
        }
    }
}

kv_section!(GenConfig {
    height,
    width,
    dividers_min,
    dividers_max,
    boundaries_min,
    boundaries_max,
    crossings_min,
    crossings_max,
    divider_width_min,
    divider_width_max,
    boundary_width_min,
    boundary_width_max,
    crossing_width_min,
    crossing_width_max,
    crossing_length_min,
    crossing_length_max,
    cam_blur_near,
    cam_blur_far,
    cam_occlusion_rate,
    cam_occlusion_tile,
    cam_noise,
    lidar_keep_near,
    lidar_keep_far,
    lidar_ground_rate,
    sd_downsample,
    hd_dropout,
    hd_jitter,
    train_count,
    val_count,
});

impl GenConfig {
    /// Every degradation switched off: camera equals mixed GT, LiDAR keeps
    /// every edge cell and no ground returns, HD prior equals GT.
    pub fn noiseless(mut self) -> Self {
        self.cam_blur_near = 0.0;
        self.cam_blur_far = 0.0;
        self.cam_occlusion_rate = 0.0;
        self.cam_noise = 0.0;
        self.lidar_keep_near = 1.0;
        self.lidar_keep_far = 1.0;
        self.lidar_ground_rate = 0.0;
        self.hd_dropout = 0.0;
        self.hd_jitter = 0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("gen: {m}")));
        if self.height == 0 || self.width == 0 {
            return bad("grid dims must be positive".into());
        }
        if self.sd_downsample == 0
            || !self.height.is_multiple_of(self.sd_downsample)
            || !self.width.is_multiple_of(self.sd_downsample)
        {
            return bad(format!(
                "sd_downsample {} must divide the grid",
                self.sd_downsample
            ));
        }
        if self.dividers_max + self.boundaries_max + self.crossings_max == 0 {
            return bad("scene has zero elements".into());
        }
        let ranges = [
            ("dividers", self.dividers_min, self.dividers_max),
            ("boundaries", self.boundaries_min, self.boundaries_max),
            ("crossings", self.crossings_min, self.crossings_max),
            (
                "divider_width",
                self.divider_width_min,
                self.divider_width_max,
            ),
            (
                "boundary_width",
                self.boundary_width_min,
                self.boundary_width_max,
            ),
            (
                "crossing_width",
                self.crossing_width_min,
                self.crossing_width_max,
            ),
            (
                "crossing_length",
                self.crossing_length_min,
                self.crossing_length_max,
            ),
        ];
        for (name, lo, hi) in ranges {
            if lo > hi {
                return bad(format!("{name} range {lo}..={hi} is empty"));
            }
        }
        if self.divider_width_min == 0
            || self.boundary_width_min == 0
            || self.crossing_width_min == 0
        {
            return bad("stroke widths must be positive".into());
        }
        let rates = [
            ("cam_occlusion_rate", self.cam_occlusion_rate),
            ("lidar_keep_near", self.lidar_keep_near),
            ("lidar_keep_far", self.lidar_keep_far),
            ("lidar_ground_rate", self.lidar_ground_rate),
            ("hd_dropout", self.hd_dropout),
        ];
        for (name, r) in rates {
            if !(0.0..=1.0).contains(&r) {
                return bad(format!("{name} = {r} outside [0, 1]"));
            }
        }
        if self.cam_blur_near < 0.0 || self.cam_blur_far < 0.0 || self.cam_noise < 0.0 {
            return bad("blur and noise must be non-negative".into());
        }
        if self.cam_occlusion_tile == 0 {
            return bad("cam_occlusion_tile must be positive".into());
        }
        Ok(())
    }
}

/// Per-class instance ids, shape (3, H, W); 0 is background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceRaster {
    pub h: usize,
    pub w: usize,
    pub ids: Vec<u32>,
}

impl InstanceRaster {
    pub fn class_ids(&self, class: usize) -> &[u32] {
        &self.ids[class * self.h * self.w..(class + 1) * self.h * self.w]
    }

    /// Pixel index lists of every instance of every class.
    pub fn instance_sets(&self) -> Vec<Vec<usize>> {
        let hw = self.h * self.w;
        let mut out = Vec::new();
        for c in 0..NUM_CLASSES {
            let ids = self.class_ids(c);
            let n = ids.iter().copied().max().unwrap_or(0) as usize;
            let mut sets = vec![Vec::new(); n];
            for (p, &id) in ids.iter().enumerate().take(hw) {
                if id > 0 {
                    sets[id as usize - 1].push(p);
                }
            }
            out.extend(sets);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    /// (1, 3, H, W) binary rasters: crossing, divider, boundary.
    pub gt_sem: Grid4,
    pub gt_inst: InstanceRaster,
    /// (1, 3, H, W)
    pub cam_view: Grid4,
    /// (1, 2, H, W): return intensity, height.
    pub lidar_view: Grid4,
    /// (1, 1, H/f, W/f)
    pub sd_prior: Grid4,
    /// (1, 3, H, W)
    pub hd_noisy: Grid4,
    pub seed: u64,
}

impl SceneSample {
    pub fn height(&self) -> usize {
        self.gt_sem.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.gt_sem.shape()[3]
    }
}

/// Independent random streams so each modality's draws never depend on
/// another modality's parameters.
fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

pub fn generate_scene(cfg: &GenConfig, seed: u64) -> Result<SceneSample> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let masks = draw_geometry(cfg, &mut stream(seed, 1));

    let mut gt_sem = Grid4::zeros([1, NUM_CLASSES, h, w]);
    let mut ids = vec![0u32; NUM_CLASSES * h * w];
    for (c, m) in masks.iter().enumerate() {
        for (p, &on) in m.cells.iter().enumerate() {
            if on {
                gt_sem.values_mut()[c * h * w + p] = 1.0;
            }
        }
        let (labels, _) = label_components(&m.cells, h, w);
        ids[c * h * w..(c + 1) * h * w].copy_from_slice(&labels);
    }
    let gt_inst = InstanceRaster { h, w, ids };

    let cam_view = camera_view(cfg, &gt_sem, &mut stream(seed, 2));
    let lidar_view = lidar_view(cfg, &masks, &mut stream(seed, 3));
    let sd_prior = sd_prior(&masks[BOU], cfg.sd_downsample);
    let hd_noisy = noisy_hd(cfg, &gt_sem, &gt_inst, &mut stream(seed, 4));

    Ok(SceneSample {
        gt_sem,
        gt_inst,
        cam_view,
        lidar_view,
        sd_prior,
        hd_noisy,
        seed,
    })
}

fn draw_geometry(cfg: &GenConfig, rng: &mut ChaCha8Rng) -> [Mask; NUM_CLASSES] {
    let (h, w) = (cfg.height as f64, cfg.width as f64);
    let mut masks = [
        Mask::new(cfg.height, cfg.width),
        Mask::new(cfg.height, cfg.width),
        Mask::new(cfg.height, cfg.width),
    ];

    let mut dividers: Vec<Vec<(f64, f64)>> = Vec::new();
    for _ in 0..rng.gen_range(cfg.dividers_min..=cfg.dividers_max) {
        let horizontal = rng.gen_bool(0.75);
        let pts: Vec<(f64, f64)> = if horizontal {
            let mut y = rng.gen_range(0.1 * h..0.9 * h);
            (0..4)
                .map(|i| {
                    let x = -2.0 + i as f64 * (w + 3.0) / 3.0;
                    let p = (y, x);
                    y = (y + rng.gen_range(-0.12 * h..0.12 * h)).clamp(1.0, h - 2.0);
                    p
                })
                .collect()
        } else {
            let mut x = rng.gen_range(0.1 * w..0.9 * w);
            (0..3)
                .map(|i| {
                    let y = -2.0 + i as f64 * (h + 3.0) / 2.0;
                    let p = (y, x);
                    x = (x + rng.gen_range(-0.06 * w..0.06 * w)).clamp(1.0, w - 2.0);
                    p
                })
                .collect()
        };
        let width = rng.gen_range(cfg.divider_width_min..=cfg.divider_width_max);
        masks[DIV].polyline(&pts, width, false);
        dividers.push(pts);
    }

    for _ in 0..rng.gen_range(cfg.boundaries_min..=cfg.boundaries_max) {
        let cy = rng.gen_range(0.0..h);
        let cx = rng.gen_range(0.0..w);
        let hy = rng.gen_range(0.15 * h..0.4 * h);
        let hx = rng.gen_range(0.1 * w..0.3 * w);
        let mut jit = || rng.gen_range(-2.0..2.0);
        let pts = [
            (cy - hy + jit(), cx - hx + jit()),
            (cy - hy + jit(), cx + hx + jit()),
            (cy + hy + jit(), cx + hx + jit()),
            (cy + hy + jit(), cx - hx + jit()),
        ];
        let width = rng.gen_range(cfg.boundary_width_min..=cfg.boundary_width_max);
        masks[BOU].polyline(&pts, width, true);
    }

    for _ in 0..rng.gen_range(cfg.crossings_min..=cfg.crossings_max) {
        let len = rng.gen_range(cfg.crossing_length_min..=cfg.crossing_length_max) as f64;
        let thick = rng.gen_range(cfg.crossing_width_min..=cfg.crossing_width_max);
        let (center, normal) = if dividers.is_empty() {
            (
                (
                    rng.gen_range(0.2 * h..0.8 * h),
                    rng.gen_range(0.1 * w..0.9 * w),
                ),
                (1.0, 0.0),
            )
        } else {
            let d = &dividers[rng.gen_range(0..dividers.len())];
            let seg = rng.gen_range(0..d.len() - 1);
            let t = rng.gen_range(0.2..0.8);
            let (y0, x0) = d[seg];
            let (y1, x1) = d[seg + 1];
            let (dy, dx) = (y1 - y0, x1 - x0);
            let n = (dy * dy + dx * dx).sqrt().max(1e-9);
            ((y0 + dy * t, x0 + dx * t), (dx / n, -dy / n))
        };
        let a = (
            center.0 - normal.0 * len / 2.0,
            center.1 - normal.1 * len / 2.0,
        );
        let b = (
            center.0 + normal.0 * len / 2.0,
            center.1 + normal.1 * len / 2.0,
        );
        masks[PED].polyline(&[a, b], thick, false);
    }
    masks
}

/// Normalised distance from the ego cell at the grid centre, in [0, 1].
fn ego_distance(y: usize, x: usize, h: usize, w: usize) -> f64 {
    let dy = (y as f64 + 0.5 - h as f64 / 2.0) / (h as f64 / 2.0);
    let dx = (x as f64 + 0.5 - w as f64 / 2.0) / (w as f64 / 2.0);
    ((dy * dy + dx * dx) / 2.0).sqrt().min(1.0)
}

/// Values are rounded to f32 precision so the dataset container can store
/// them in 4 bytes without loss.
fn to_f32_exact(v: f64) -> f64 {
    v as f32 as f64
}

fn camera_view(cfg: &GenConfig, gt: &Grid4, rng: &mut ChaCha8Rng) -> Grid4 {
    let (h, w) = (cfg.height, cfg.width);
    let hw = h * w;
    let mut base = vec![0.0; CAM_CHANNELS * hw];
    for k in 0..CAM_CHANNELS {
        for p in 0..hw {
            base[k * hw + p] = (0..NUM_CLASSES)
                .map(|c| CAM_MIX[k][c] * gt.values()[c * hw + p])
                .sum();
        }
    }

    let blurred = if cfg.cam_blur_near == 0.0 && cfg.cam_blur_far == 0.0 {
        base
    } else {
        let mut out = vec![0.0; CAM_CHANNELS * hw];
        for y in 0..h {
            for x in 0..w {
                let sigma = cfg.cam_blur_near
                    + (cfg.cam_blur_far - cfg.cam_blur_near) * ego_distance(y, x, h, w);
                if sigma < 1e-6 {
                    for k in 0..CAM_CHANNELS {
                        out[k * hw + y * w + x] = base[k * hw + y * w + x];
                    }
                    continue;
                }
                let r = (3.0 * sigma).ceil() as isize;
                let mut acc = [0.0; CAM_CHANNELS];
                let mut norm = 0.0;
                for dy in -r..=r {
                    let yy = y as isize + dy;
                    if yy < 0 || yy >= h as isize {
                        continue;
                    }
                    for dx in -r..=r {
                        let xx = x as isize + dx;
                        if xx < 0 || xx >= w as isize {
                            continue;
                        }
                        let wt = (-((dy * dy + dx * dx) as f64) / (2.0 * sigma * sigma)).exp();
                        norm += wt;
                        let q = yy as usize * w + xx as usize;
                        for (k, a) in acc.iter_mut().enumerate() {
                            *a += wt * base[k * hw + q];
                        }
                    }
                }
                for k in 0..CAM_CHANNELS {
                    out[k * hw + y * w + x] = acc[k] / norm;
                }
            }
        }
        out
    };

    let mut vals = blurred;
    if cfg.cam_noise > 0.0 {
        let normal = Normal::new(0.0, cfg.cam_noise).expect("valid sigma");
        for v in vals.iter_mut() {
            *v += normal.sample(rng);
        }
    }
    if cfg.cam_occlusion_rate > 0.0 {
        let t = cfg.cam_occlusion_tile;
        for ty in 0..h.div_ceil(t) {
            for tx in 0..w.div_ceil(t) {
                if !rng.gen_bool(cfg.cam_occlusion_rate) {
                    continue;
                }
                for y in ty * t..((ty + 1) * t).min(h) {
                    for x in tx * t..((tx + 1) * t).min(w) {
                        for k in 0..CAM_CHANNELS {
                            vals[k * hw + y * w + x] = 0.0;
                        }
                    }
                }
            }
        }
    }
    for v in vals.iter_mut() {
        *v = to_f32_exact(*v);
    }
    Grid4::new([1, CAM_CHANNELS, h, w], vals).expect("camera shape")
}

fn is_edge(m: &Mask, y: usize, x: usize) -> bool {
    let (y, x) = (y as isize, x as isize);
    m.get(y, x) && (!m.get(y - 1, x) || !m.get(y + 1, x) || !m.get(y, x - 1) || !m.get(y, x + 1))
}

fn lidar_view(cfg: &GenConfig, masks: &[Mask; NUM_CLASSES], rng: &mut ChaCha8Rng) -> Grid4 {
    let (h, w) = (cfg.height, cfg.width);
    let hw = h * w;
    let mut vals = vec![0.0; LIDAR_CHANNELS * hw];
    for y in 0..h {
        for x in 0..w {
            let d = ego_distance(y, x, h, w);
            let keep = cfg.lidar_keep_near + (cfg.lidar_keep_far - cfg.lidar_keep_near) * d;
            let p = y * w + x;
            // draw both numbers for every cell so the stream stays aligned
            let u_edge: f64 = rng.gen();
            let u_ground: f64 = rng.gen();
            let edge_classes: Vec<usize> = (0..NUM_CLASSES)
                .filter(|&c| is_edge(&masks[c], y, x))
                .collect();
            if !edge_classes.is_empty() {
                if u_edge < keep {
                    vals[p] = edge_classes
                        .iter()
                        .map(|&c| LIDAR_INTENSITY[c])
                        .fold(0.0, f64::max);
                    vals[hw + p] = edge_classes
                        .iter()
                        .map(|&c| LIDAR_HEIGHT[c])
                        .fold(0.0, f64::max);
                }
            } else if !masks.iter().any(|m| m.cells[p])
                && u_ground < cfg.lidar_ground_rate * (1.0 - 0.5 * d)
            {
                vals[p] = GROUND_INTENSITY;
            }
        }
    }
    for v in vals.iter_mut() {
        *v = to_f32_exact(*v);
    }
    Grid4::new([1, LIDAR_CHANNELS, h, w], vals).expect("lidar shape")
}

fn sd_prior(boundary: &Mask, factor: usize) -> Grid4 {
    let skel = skeletonize(boundary);
    let (ho, wo) = (boundary.h / factor, boundary.w / factor);
    let mut vals = vec![0.0; ho * wo];
    for y in 0..boundary.h {
        for x in 0..boundary.w {
            if skel.cells[y * boundary.w + x] {
                vals[(y / factor) * wo + x / factor] = 1.0;
            }
        }
    }
    Grid4::new([1, 1, ho, wo], vals).expect("sd shape")
}

fn noisy_hd(cfg: &GenConfig, gt: &Grid4, inst: &InstanceRaster, rng: &mut ChaCha8Rng) -> Grid4 {
    let (h, w) = (cfg.height, cfg.width);
    let hw = h * w;
    let mut out = Grid4::zeros([1, NUM_CLASSES, h, w]);
    let j = cfg.hd_jitter as isize;
    for c in 0..NUM_CLASSES {
        let ids = inst.class_ids(c);
        let n = ids.iter().copied().max().unwrap_or(0) as usize;
        let shifts: Vec<(isize, isize)> = (0..n)
            .map(|_| (rng.gen_range(-j..=j), rng.gen_range(-j..=j)))
            .collect();
        for (p, &id) in ids.iter().enumerate() {
            if id == 0 {
                continue;
            }
            let drop = cfg.hd_dropout > 0.0 && rng.gen_bool(cfg.hd_dropout);
            let (dy, dx) = shifts[id as usize - 1];
            let (y, x) = ((p / w) as isize + dy, (p % w) as isize + dx);
            if drop || y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                continue;
            }
            out.values_mut()[c * hw + y as usize * w + x as usize] = 1.0;
        }
    }
    let noisy = cfg.hd_dropout > 0.0 || cfg.hd_jitter > 0;
    if noisy && out.bit_eq(gt) {
        // guarantee the prior is actually corrupted
        let v = out.values_mut();
        match v.iter().position(|&x| x == 1.0) {
            Some(p) => v[p] = 0.0,
            None => v[0] = 1.0,
        }
    }
    out
}

/// Deterministic per-sample seed for split `split` (0 = train, 1 = val).
pub fn sample_seed(base: u64, split: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(split.wrapping_mul(0xD1B5_4A32_D192_ED03))
        .wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn generate_split(
    cfg: &GenConfig,
    base_seed: u64,
    split: u64,
    count: usize,
) -> Result<Vec<SceneSample>> {
    (0..count)
        .map(|i| generate_scene(cfg, sample_seed(base_seed, split, i as u64)))
        .collect()
}

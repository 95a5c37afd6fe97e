//! Dataset container.
//!
//! ```text
//! "TCSD" | version u32 | config echo str | count u64 | record* | crc32
//! record = seed u64 | gt_sem | gt_inst u32s | cam | lidar | sd | hd
//! ```

use std::path::Path;

use super::{InstanceRaster, SceneSample};
use crate::container::{get_grid, put_grid, read_file, write_file, Reader, Writer};
use crate::error::Result;

const MAGIC: &[u8; 4] = b"TCSD";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config_echo: String,
    pub samples: Vec<SceneSample>,
}

pub fn save_dataset(samples: &[SceneSample], config_echo: &str, path: &Path) -> Result<()> {
    let mut w = Writer::new(MAGIC, VERSION);
    w.str(config_echo);
    w.u64(samples.len() as u64);
    for s in samples {
        let mut rec = Writer::body_only();
        rec.u64(s.seed);
        put_grid(&mut rec, &s.gt_sem);
        rec.u32(s.gt_inst.h as u32);
        rec.u32(s.gt_inst.w as u32);
        rec.u32s(&s.gt_inst.ids);
        put_grid(&mut rec, &s.cam_view);
        put_grid(&mut rec, &s.lidar_view);
        put_grid(&mut rec, &s.sd_prior);
        put_grid(&mut rec, &s.hd_noisy);
        w.record(&rec.into_bytes());
    }
    write_file(path, &w.finish())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let bytes = read_file(path)?;
    let (mut r, version) = Reader::open(&bytes, MAGIC, path)?;
    if version != VERSION {
        return Err(r.corrupt(format!("unsupported version {version}")));
    }
    let config_echo = r.str()?;
    let count = r.u64()?;
    let mut samples = Vec::new();
    for _ in 0..count {
        let body = r.record()?;
        let mut s = r.nested(body);
        let seed = s.u64()?;
        let gt_sem = get_grid(&mut s)?;
        let h = s.u32()? as usize;
        let w = s.u32()? as usize;
        let ids = s.u32s()?;
        if ids.len() != super::NUM_CLASSES * h * w {
            return Err(s.corrupt("instance raster size mismatch"));
        }
        let gt_inst = InstanceRaster { h, w, ids };
        let cam_view = get_grid(&mut s)?;
        let lidar_view = get_grid(&mut s)?;
        let sd_prior = get_grid(&mut s)?;
        let hd_noisy = get_grid(&mut s)?;
        s.expect_end()?;
        samples.push(SceneSample {
            gt_sem,
            gt_inst,
            cam_view,
            lidar_view,
            sd_prior,
            hd_noisy,
            seed,
        });
    }
    r.expect_end()?;
    Ok(Dataset {
        config_echo,
        samples,
    })
}

//! Binary raster utilities: 4-connected stroke drawing, connected
//! components and Zhang–Suen thinning.

/// Row-major boolean raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub h: usize,
    pub w: usize,
    pub cells: Vec<bool>,
}

impl Mask {
    pub fn new(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            cells: vec![false; h * w],
        }
    }

    #[inline]
    pub fn get(&self, y: isize, x: isize) -> bool {
        y >= 0
            && x >= 0
            && (y as usize) < self.h
            && (x as usize) < self.w
            && self.cells[y as usize * self.w + x as usize]
    }

    #[inline]
    pub fn set(&mut self, y: isize, x: isize) {
        if y >= 0 && x >= 0 && (y as usize) < self.h && (x as usize) < self.w {
            self.cells[y as usize * self.w + x as usize] = true;
        }
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    /// Stamp a `width`×`width` square centred on (y, x).
    fn stamp(&mut self, y: isize, x: isize, width: usize) {
        let lo = -((width as isize - 1) / 2);
        let hi = lo + width as isize;
        for dy in lo..hi {
            for dx in lo..hi {
                self.set(y + dy, x + dx);
            }
        }
    }

    /// Thick polyline through continuous (y, x) points. Successive cells are
    /// always 4-adjacent, so every stroke is 4-connected.
    pub fn polyline(&mut self, pts: &[(f64, f64)], width: usize, closed: bool) {
        let mut seq: Vec<(f64, f64)> = pts.to_vec();
        if closed && pts.len() > 2 {
            seq.push(pts[0]);
        }
        let mut prev: Option<(isize, isize)> = None;
        for pair in seq.windows(2) {
            let (y0, x0) = pair[0];
            let (y1, x1) = pair[1];
            let steps = ((y1 - y0).abs().max((x1 - x0).abs()) * 4.0).ceil().max(1.0) as usize;
            for s in 0..=steps {
                let t = s as f64 / steps as f64;
                let cy = (y0 + (y1 - y0) * t).round() as isize;
                let cx = (x0 + (x1 - x0) * t).round() as isize;
                if let Some((py, px)) = prev {
                    if (py, px) == (cy, cx) {
                        continue;
                    }
                    if py != cy && px != cx {
                        self.stamp(py, cx, width);
                    }
                }
                self.stamp(cy, cx, width);
                prev = Some((cy, cx));
            }
        }
    }

    /// Filled axis-aligned rectangle, inclusive-exclusive bounds.
    pub fn rect(&mut self, y0: isize, x0: isize, y1: isize, x1: isize) {
        for y in y0..y1 {
            for x in x0..x1 {
                self.set(y, x);
            }
        }
    }
}

/// 4-connected component labels (0 = background, ids from 1 in raster scan
/// order of each component's first cell). Returns (labels, count).
pub fn label_components(mask: &[bool], h: usize, w: usize) -> (Vec<u32>, u32) {
    let mut labels = vec![0u32; h * w];
    let mut next = 0u32;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if !mask[start] || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        stack.push(start);
        while let Some(p) = stack.pop() {
            let (y, x) = (p / w, p % w);
            let mut visit = |q: usize| {
                if mask[q] && labels[q] == 0 {
                    labels[q] = next;
                    stack.push(q);
                }
            };
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
        }
    }
    (labels, next)
}

/// Zhang–Suen thinning to a one-cell-wide skeleton.
pub fn skeletonize(mask: &Mask) -> Mask {
    let mut m = mask.clone();
    let (h, w) = (m.h as isize, m.w as isize);
    loop {
        let mut changed = false;
        for pass in 0..2 {
            let mut remove = Vec::new();
            for y in 0..h {
                for x in 0..w {
                    if !m.get(y, x) {
                        continue;
                    }
                    // P2..P9 clockwise from north
                    let n = [
                        m.get(y - 1, x),
                        m.get(y - 1, x + 1),
                        m.get(y, x + 1),
                        m.get(y + 1, x + 1),
                        m.get(y + 1, x),
                        m.get(y + 1, x - 1),
                        m.get(y, x - 1),
                        m.get(y - 1, x - 1),
                    ];
                    let b = n.iter().filter(|&&v| v).count();
                    if !(2..=6).contains(&b) {
                        continue;
                    }
                    let a = (0..8).filter(|&i| !n[i] && n[(i + 1) % 8]).count();
                    if a != 1 {
                        continue;
                    }
                    let (p2, p4, p6, p8) = (n[0], n[2], n[4], n[6]);
                    let ok = if pass == 0 {
                        !(p2 && p4 && p6) && !(p4 && p6 && p8)
                    } else {
                        !(p2 && p4 && p8) && !(p2 && p6 && p8)
                    };
                    if ok {
                        remove.push((y * w + x) as usize);
                    }
                }
            }
            changed |= !remove.is_empty();
            for p in remove {
                m.cells[p] = false;
            }
        }
        if !changed {
            return m;
        }
    }
}

//! Training-target derivation from instance maps (inner boundaries,
//! 4-direction boundary distances, isoheight maps) and the synthetic
//! nucleus-image generator.

pub mod dataset;
mod synth;

pub use synth::{
    augment, has_touching_instances, synth_sample, synth_touching_scene, Augmentation,
    SynthSample, SynthSpec,
};

use crate::error::{CoreError, Result};

/// Per-pixel binary mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub h: usize,
    pub w: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(h: usize, w: usize) -> Self {
        Mask {
            h,
            w,
            data: vec![false; h * w],
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> bool {
        self.data[y * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.w + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }
}

/// Per-pixel instance labels; 0 is background, instances are 1..=K.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InstanceMap {
    pub h: usize,
    pub w: usize,
    pub labels: Vec<u32>,
}

impl InstanceMap {
    pub fn new(h: usize, w: usize) -> Self {
        InstanceMap {
            h,
            w,
            labels: vec![0; h * w],
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> u32 {
        self.labels[y * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: u32) {
        self.labels[y * self.w + x] = v;
    }

    pub fn max_label(&self) -> u32 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    /// Number of distinct nonzero labels.
    pub fn instance_count(&self) -> usize {
        let mut seen = vec![false; self.max_label() as usize + 1];
        let mut n = 0;
        for &l in &self.labels {
            if l > 0 && !seen[l as usize] {
                seen[l as usize] = true;
                n += 1;
            }
        }
        n
    }

    /// Remap nonzero labels onto the contiguous range 1..=K, ordered by first
    /// appearance in raster order.
    pub fn relabel(&mut self) {
        let mut map = vec![0u32; self.max_label() as usize + 1];
        let mut next = 0u32;
        for l in self.labels.iter_mut() {
            if *l > 0 {
                if map[*l as usize] == 0 {
                    next += 1;
                    map[*l as usize] = next;
                }
                *l = map[*l as usize];
            }
        }
    }

    pub fn foreground(&self) -> Mask {
        Mask {
            h: self.h,
            w: self.w,
            data: self.labels.iter().map(|&l| l > 0).collect(),
        }
    }

    /// True when labels form a contiguous 1..=K range.
    pub fn labels_contiguous(&self) -> bool {
        let maxl = self.max_label() as usize;
        let mut seen = vec![false; maxl + 1];
        for &l in &self.labels {
            seen[l as usize] = true;
        }
        (1..=maxl).all(|l| seen[l])
    }
}

/// Per-pixel nucleus type in 0..=6; 0 is background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TypeMap {
    pub h: usize,
    pub w: usize,
    pub types: Vec<u8>,
}

impl TypeMap {
    pub fn new(h: usize, w: usize) -> Self {
        TypeMap {
            h,
            w,
            types: vec![0; h * w],
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> u8 {
        self.types[y * self.w + x]
    }
}

/// Channel order of the four per-pixel boundary distances.
pub const BD_LEFT: usize = 0;
pub const BD_RIGHT: usize = 1;
pub const BD_UP: usize = 2;
pub const BD_DOWN: usize = 3;

/// Per-pixel distances (in pixels) to the parent instance's inner boundary
/// along the four axis directions. Background pixels hold zeros. Stored as
/// four planes of length h*w in (left, right, up, down) order.
#[derive(Clone, Debug, PartialEq)]
pub struct BDMap {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl BDMap {
    pub fn new(h: usize, w: usize) -> Self {
        BDMap {
            h,
            w,
            data: vec![0.0; 4 * h * w],
        }
    }

    #[inline]
    pub fn at(&self, dir: usize, y: usize, x: usize) -> f32 {
        self.data[dir * self.h * self.w + y * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, dir: usize, y: usize, x: usize, v: f32) {
        self.data[dir * self.h * self.w + y * self.w + x] = v;
    }

    pub fn plane(&self, dir: usize) -> &[f32] {
        &self.data[dir * self.h * self.w..(dir + 1) * self.h * self.w]
    }
}

/// Clamped Chebyshev distance to the nearest ground-truth boundary pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IsoheightMap {
    pub h: usize,
    pub w: usize,
    pub tau: u8,
    pub psi: Vec<u8>,
}

impl IsoheightMap {
    #[inline]
    pub fn at(&self, y: usize, x: usize) -> u8 {
        self.psi[y * self.w + x]
    }
}

/// Foreground pixels with a 4-neighbor of a different label, or lying on the
/// image border.
pub fn inner_boundary(inst: &InstanceMap) -> Mask {
    let (h, w) = (inst.h, inst.w);
    let mut mask = Mask::new(h, w);
    for y in 0..h {
        for x in 0..w {
            let l = inst.at(y, x);
            if l == 0 {
                continue;
            }
            let differs = y == 0
                || x == 0
                || y == h - 1
                || x == w - 1
                || inst.at(y - 1, x) != l
                || inst.at(y + 1, x) != l
                || inst.at(y, x - 1) != l
                || inst.at(y, x + 1) != l;
            mask.set(y, x, differs);
        }
    }
    mask
}

/// Distances from each foreground pixel to the end of its maximal consecutive
/// same-label run along each axis direction (first-exit semantics; the image
/// border terminates a run).
pub fn bd_from_instances(inst: &InstanceMap) -> BDMap {
    let (h, w) = (inst.h, inst.w);
    let mut bd = BDMap::new(h, w);

    // rows: left/right run extents
    for y in 0..h {
        let mut x = 0;
        while x < w {
            let l = inst.at(y, x);
            if l == 0 {
                x += 1;
                continue;
            }
            let start = x;
            while x + 1 < w && inst.at(y, x + 1) == l {
                x += 1;
            }
            let end = x;
            for xi in start..=end {
                bd.set(BD_LEFT, y, xi, (xi - start) as f32);
                bd.set(BD_RIGHT, y, xi, (end - xi) as f32);
            }
            x += 1;
        }
    }

    // columns: up/down run extents
    for x in 0..w {
        let mut y = 0;
        while y < h {
            let l = inst.at(y, x);
            if l == 0 {
                y += 1;
                continue;
            }
            let start = y;
            while y + 1 < h && inst.at(y + 1, x) == l {
                y += 1;
            }
            let end = y;
            for yi in start..=end {
                bd.set(BD_UP, yi, x, (yi - start) as f32);
                bd.set(BD_DOWN, yi, x, (end - yi) as f32);
            }
            y += 1;
        }
    }

    bd
}

/// psi(p) = min(tau, Chebyshev distance to the nearest boundary pixel),
/// computed by tau rounds of 8-neighborhood dilation. An empty boundary mask
/// yields psi = tau everywhere.
pub fn isoheight_from_boundary(boundary: &Mask, tau: u8) -> Result<IsoheightMap> {
    if tau < 1 {
        return Err(CoreError::InvalidConfig("isoheight tau must be >= 1".into()));
    }
    let (h, w) = (boundary.h, boundary.w);
    let mut psi = vec![tau; h * w];
    let mut frontier = boundary.data.clone();
    for (i, &b) in boundary.data.iter().enumerate() {
        if b {
            psi[i] = 0;
        }
    }
    for level in 1..tau {
        let mut next = vec![false; h * w];
        let mut any = false;
        for y in 0..h {
            for x in 0..w {
                if psi[y * w + x] != tau {
                    continue;
                }
                let mut touched = false;
                'scan: for dy in -1i32..=1 {
                    for dx in -1i32..=1 {
                        if dy == 0 && dx == 0 {
                            continue;
                        }
                        let ny = y as i32 + dy;
                        let nx = x as i32 + dx;
                        if ny >= 0
                            && ny < h as i32
                            && nx >= 0
                            && nx < w as i32
                            && frontier[ny as usize * w + nx as usize]
                        {
                            touched = true;
                            break 'scan;
                        }
                    }
                }
                if touched {
                    psi[y * w + x] = level;
                    next[y * w + x] = true;
                    any = true;
                }
            }
        }
        frontier = next;
        if !any {
            break;
        }
    }
    Ok(IsoheightMap { h, w, tau, psi })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square_map(h: usize, w: usize, top: usize, left: usize, size: usize) -> InstanceMap {
        let mut m = InstanceMap::new(h, w);
        for y in top..top + size {
            for x in left..left + size {
                m.set(y, x, 1);
            }
        }
        m
    }

    #[test]
    fn inner_boundary_empty_map() {
        let m = InstanceMap::new(6, 6);
        assert_eq!(inner_boundary(&m).count(), 0);
    }

    #[test]
    fn inner_boundary_of_square_is_perimeter() {
        let m = square_map(9, 9, 2, 2, 5);
        let b = inner_boundary(&m);
        assert_eq!(b.count(), 16); // 4*5 - 4
        for y in 2..7 {
            for x in 2..7 {
                let on_perimeter = y == 2 || y == 6 || x == 2 || x == 6;
                assert_eq!(b.at(y, x), on_perimeter);
            }
        }
    }

    #[test]
    fn border_touching_instance_is_boundary_at_border() {
        let m = square_map(5, 5, 0, 0, 3);
        let b = inner_boundary(&m);
        assert!(b.at(0, 0));
        assert!(b.at(0, 1));
        assert!(!b.at(1, 1)); // interior, all 4-neighbors same label
    }

    #[test]
    fn bd_single_pixel_instance_is_zero() {
        let mut m = InstanceMap::new(4, 4);
        m.set(2, 1, 1);
        let bd = bd_from_instances(&m);
        for dir in 0..4 {
            assert_eq!(bd.at(dir, 2, 1), 0.0);
        }
    }

    #[test]
    fn bd_square_center() {
        let m = square_map(9, 9, 2, 2, 5);
        let bd = bd_from_instances(&m);
        // center of a 5x5 square is two steps from every edge
        for dir in 0..4 {
            assert_eq!(bd.at(dir, 4, 4), 2.0);
        }
        // top-left corner touches boundary on the left and up
        assert_eq!(bd.at(BD_LEFT, 2, 2), 0.0);
        assert_eq!(bd.at(BD_UP, 2, 2), 0.0);
        assert_eq!(bd.at(BD_RIGHT, 2, 2), 4.0);
        assert_eq!(bd.at(BD_DOWN, 2, 2), 4.0);
    }

    #[test]
    fn bd_background_is_zero() {
        let m = square_map(6, 6, 1, 1, 3);
        let bd = bd_from_instances(&m);
        assert_eq!(bd.at(BD_LEFT, 0, 0), 0.0);
        assert_eq!(bd.at(BD_RIGHT, 5, 5), 0.0);
    }

    #[test]
    fn isoheight_zero_on_boundary_and_chebyshev_elsewhere() {
        let mut b = Mask::new(8, 8);
        b.set(0, 0, true);
        let psi = isoheight_from_boundary(&b, 5).unwrap();
        assert_eq!(psi.at(0, 0), 0);
        assert_eq!(psi.at(3, 3), 3);
        assert_eq!(psi.at(7, 0), 5); // true distance 7, clamped at tau
    }

    #[test]
    fn isoheight_empty_boundary_is_all_tau() {
        let b = Mask::new(4, 4);
        let psi = isoheight_from_boundary(&b, 5).unwrap();
        assert!(psi.psi.iter().all(|&v| v == 5));
    }

    #[test]
    fn relabel_makes_contiguous() {
        let mut m = InstanceMap::new(2, 3);
        m.labels = vec![0, 7, 7, 3, 0, 9];
        assert!(!m.labels_contiguous());
        m.relabel();
        assert!(m.labels_contiguous());
        assert_eq!(m.labels, vec![0, 1, 1, 2, 0, 3]);
    }
}

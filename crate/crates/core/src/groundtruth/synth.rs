//! Synthetic nucleus-image generator: rotated ellipses rasterized in z-order
//! over a textured background, with per-class foreground colors.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{CoreError, Result};
use crate::groundtruth::{InstanceMap, TypeMap};
use crate::tensor::Tensor;

/// Generation parameters for one synthetic sample.
#[derive(Clone, Debug)]
pub struct SynthSpec {
    pub height: usize,
    pub width: usize,
    pub nuclei_min: usize,
    pub nuclei_max: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    /// Probability that a nucleus is allowed to touch or overlap others.
    pub overlap_prob: f64,
    /// Sampling weights for classes 1..=6.
    pub class_weights: [f64; 6],
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            height: 64,
            width: 64,
            nuclei_min: 3,
            nuclei_max: 8,
            radius_min: 4.0,
            radius_max: 9.0,
            overlap_prob: 0.3,
            class_weights: [1.0; 6],
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.radius_min < 1.0 || self.radius_max < self.radius_min {
            return Err(CoreError::InvalidConfig(format!(
                "bad radius range [{}, {}]",
                self.radius_min, self.radius_max
            )));
        }
        if 2.0 * self.radius_max >= self.height.min(self.width) as f64 {
            return Err(CoreError::InvalidConfig(format!(
                "radius {} does not fit a {}x{} image",
                self.radius_max, self.height, self.width
            )));
        }
        if self.nuclei_max < self.nuclei_min {
            return Err(CoreError::InvalidConfig("nuclei_max < nuclei_min".into()));
        }
        if self.class_weights.iter().sum::<f64>() <= 0.0 {
            return Err(CoreError::InvalidConfig("class weights sum to zero".into()));
        }
        Ok(())
    }
}

/// One generated sample: interleaved 8-bit RGB pixels plus per-pixel labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SynthSample {
    pub h: usize,
    pub w: usize,
    /// Row-major interleaved RGB, length h*w*3.
    pub rgb: Vec<u8>,
    pub inst: InstanceMap,
    pub types: TypeMap,
}

impl SynthSample {
    /// Network input: (1, 3, H, W) with values in [0, 1].
    pub fn to_input_tensor(&self) -> Tensor {
        Tensor::from_fn(1, 3, self.h, self.w, |_, c, y, x| {
            self.rgb[(y * self.w + x) * 3 + c] as f32 / 255.0
        })
    }
}

const CLASS_COLORS: [[f64; 3]; 6] = [
    [0.55, 0.16, 0.16], // 1 neutrophil-like
    [0.18, 0.46, 0.20], // 2 epithelial-like
    [0.20, 0.25, 0.58], // 3 lymphocyte-like
    [0.58, 0.47, 0.14], // 4 plasma-like
    [0.48, 0.18, 0.52], // 5 eosinophil-like
    [0.16, 0.48, 0.48], // 6 connective-like
];

struct Ellipse {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    cos_t: f64,
    sin_t: f64,
    class: u8,
}

impl Ellipse {
    fn contains(&self, y: f64, x: f64) -> bool {
        let dy = y - self.cy;
        let dx = x - self.cx;
        let u = (dx * self.cos_t + dy * self.sin_t) / self.a;
        let v = (-dx * self.sin_t + dy * self.cos_t) / self.b;
        u * u + v * v <= 1.0
    }

    fn radius(&self) -> f64 {
        self.a.max(self.b)
    }
}

fn sample_class(rng: &mut impl Rng, weights: &[f64; 6]) -> u8 {
    let total: f64 = weights.iter().sum();
    let mut r = rng.random_range(0.0..total);
    for (i, &w) in weights.iter().enumerate() {
        if r < w {
            return (i + 1) as u8;
        }
        r -= w;
    }
    6
}

/// Keep only the largest 4-connected component of each label; fragments cut
/// off by later ellipses become background. Labels are then made contiguous.
fn enforce_connectivity(inst: &mut InstanceMap) {
    let (h, w) = (inst.h, inst.w);
    let maxl = inst.max_label() as usize;
    if maxl == 0 {
        return;
    }
    let mut comp = vec![0u32; h * w]; // component id per pixel, 0 = unvisited
    let mut comp_label = vec![0u32];
    let mut comp_size = vec![0usize];
    let mut next = 0u32;
    let mut queue = Vec::new();
    for start in 0..h * w {
        if inst.labels[start] == 0 || comp[start] != 0 {
            continue;
        }
        let l = inst.labels[start];
        next += 1;
        comp_label.push(l);
        comp_size.push(0);
        queue.clear();
        queue.push(start);
        comp[start] = next;
        while let Some(i) = queue.pop() {
            comp_size[next as usize] += 1;
            let (y, x) = (i / w, i % w);
            let mut push = |j: usize| {
                if inst.labels[j] == l && comp[j] == 0 {
                    comp[j] = next;
                    queue.push(j);
                }
            };
            if y > 0 {
                push(i - w);
            }
            if y + 1 < h {
                push(i + w);
            }
            if x > 0 {
                push(i - 1);
            }
            if x + 1 < w {
                push(i + 1);
            }
        }
    }
    // biggest component per label, earlier component wins ties
    let mut best: Vec<u32> = vec![0; maxl + 1];
    for cid in 1..=next as usize {
        let l = comp_label[cid] as usize;
        if best[l] == 0 || comp_size[cid] > comp_size[best[l] as usize] {
            best[l] = cid as u32;
        }
    }
    for i in 0..h * w {
        let l = inst.labels[i] as usize;
        if l > 0 && comp[i] != best[l] {
            inst.labels[i] = 0;
        }
    }
    inst.relabel();
}

/// Generate one sample. Identical seeds produce bit-identical samples.
pub fn synth_sample(seed: u64, spec: &SynthSpec) -> Result<SynthSample> {
    spec.validate()?;
    let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
    let (h, w) = (spec.height, spec.width);

    let count = rng.random_range(spec.nuclei_min..=spec.nuclei_max);
    let mut ellipses: Vec<Ellipse> = Vec::with_capacity(count);
    for _ in 0..count {
        let a = rng.random_range(spec.radius_min..=spec.radius_max);
        let b = rng.random_range(spec.radius_min..=spec.radius_max);
        let theta = rng.random_range(0.0..std::f64::consts::PI);
        let allow_overlap = rng.random_bool(spec.overlap_prob);
        let r = a.max(b);
        let mut placed = None;
        for _attempt in 0..50 {
            let cy = rng.random_range(r..(h as f64 - r));
            let cx = rng.random_range(r..(w as f64 - r));
            let collides = ellipses
                .iter()
                .any(|e| ((e.cy - cy).powi(2) + (e.cx - cx).powi(2)).sqrt() < r + e.radius());
            if allow_overlap || !collides {
                placed = Some((cy, cx));
                break;
            }
        }
        // crowded image: fall back to an overlapping placement
        let (cy, cx) = placed.unwrap_or_else(|| {
            (
                rng.random_range(r..(h as f64 - r)),
                rng.random_range(r..(w as f64 - r)),
            )
        });
        ellipses.push(Ellipse {
            cy,
            cx,
            a,
            b,
            cos_t: theta.cos(),
            sin_t: theta.sin(),
            class: sample_class(&mut rng, &spec.class_weights),
        });
    }

    // rasterize in z-order: later ellipses overwrite contested pixels
    let mut inst = InstanceMap::new(h, w);
    for (i, e) in ellipses.iter().enumerate() {
        let y0 = (e.cy - e.radius()).floor().max(0.0) as usize;
        let y1 = ((e.cy + e.radius()).ceil() as usize).min(h - 1);
        let x0 = (e.cx - e.radius()).floor().max(0.0) as usize;
        let x1 = ((e.cx + e.radius()).ceil() as usize).min(w - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                if e.contains(y as f64, x as f64) {
                    inst.set(y, x, (i + 1) as u32);
                }
            }
        }
    }
    let classes_by_z: Vec<u8> = ellipses.iter().map(|e| e.class).collect();
    // remember original z-index before relabeling so classes follow labels
    let pre = inst.labels.clone();
    enforce_connectivity(&mut inst);
    let mut class_of = vec![0u8; inst.max_label() as usize + 1];
    for (i, &l) in inst.labels.iter().enumerate() {
        if l > 0 {
            class_of[l as usize] = classes_by_z[pre[i] as usize - 1];
        }
    }

    let mut types = TypeMap::new(h, w);
    for (t, &l) in types.types.iter_mut().zip(&inst.labels) {
        if l > 0 {
            *t = class_of[l as usize];
        }
    }

    // per-instance color jitter
    let jitter: Vec<[f64; 3]> = (0..=inst.max_label())
        .map(|_| {
            [
                rng.random_range(-0.04..0.04),
                rng.random_range(-0.04..0.04),
                rng.random_range(-0.04..0.04),
            ]
        })
        .collect();
    let phase_y = rng.random_range(0.0..std::f64::consts::TAU);
    let phase_x = rng.random_range(0.0..std::f64::consts::TAU);
    let noise = Normal::new(0.0f64, 0.015).expect("valid sigma");

    let boundary = super::inner_boundary(&inst);
    let mut rgb = vec![0u8; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let l = inst.labels[i];
            let mut color = if l == 0 {
                let tex = 0.04
                    * (y as f64 * std::f64::consts::TAU / 23.0 + phase_y).sin()
                    * (x as f64 * std::f64::consts::TAU / 17.0 + phase_x).sin();
                [0.82 + tex, 0.80 + tex, 0.84 + tex]
            } else {
                let base = CLASS_COLORS[(types.types[i] - 1) as usize];
                let j = jitter[l as usize];
                let rim = if boundary.at(y, x) { 0.72 } else { 1.0 };
                [
                    (base[0] + j[0]) * rim,
                    (base[1] + j[1]) * rim,
                    (base[2] + j[2]) * rim,
                ]
            };
            for c in 0..3 {
                color[c] += noise.sample(&mut rng);
                rgb[i * 3 + c] = (color[c].clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }

    Ok(SynthSample {
        h,
        w,
        rgb,
        inst,
        types,
    })
}

/// Scene of full (uncarved) convex nuclei that may touch: radii at least
/// 3.5 and pairwise center distance at least the sum of the minor radii
/// minus one, so instances keep interiors and boundary votes stay decisive.
/// Used by exactness checks that feed ground-truth outputs through the
/// post-processing chain.
pub fn synth_touching_scene(seed: u64, h: usize, w: usize) -> (InstanceMap, TypeMap) {
    let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
    let count = rng.random_range(3..=6);
    let mut placed: Vec<(f64, f64, f64, f64, f64)> = Vec::new();
    for _ in 0..count {
        let a = rng.random_range(3.5..7.0f64);
        let b = rng.random_range(3.5..7.0f64);
        let theta = rng.random_range(0.0..std::f64::consts::PI);
        let r = a.max(b);
        for _try in 0..80 {
            let cy = rng.random_range(r..(h as f64 - r));
            let cx = rng.random_range(r..(w as f64 - r));
            let ok = placed.iter().all(|&(py, px, pa, pb, _)| {
                let d = ((py - cy).powi(2) + (px - cx).powi(2)).sqrt();
                d >= (a.min(b) + pa.min(pb)) - 1.0
            });
            if ok {
                placed.push((cy, cx, a, b, theta));
                break;
            }
        }
    }
    let mut inst = InstanceMap::new(h, w);
    for (i, &(cy, cx, a, b, theta)) in placed.iter().enumerate() {
        let (c, s) = (theta.cos(), theta.sin());
        for y in 0..h {
            for x in 0..w {
                let dy = y as f64 - cy;
                let dx = x as f64 - cx;
                let u = (dx * c + dy * s) / a;
                let v = (-dx * s + dy * c) / b;
                if u * u + v * v <= 1.0 {
                    inst.set(y, x, (i + 1) as u32);
                }
            }
        }
    }
    inst.relabel();
    let mut types = TypeMap::new(h, w);
    let mut class_rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed ^ 0xabcd);
    let classes: Vec<u8> = (0..=inst.max_label())
        .map(|_| class_rng.random_range(1..=6))
        .collect();
    for (t, &l) in types.types.iter_mut().zip(&inst.labels) {
        if l > 0 {
            *t = classes[l as usize];
        }
    }
    (inst, types)
}

/// True when two different nonzero labels are 4-adjacent anywhere.
pub fn has_touching_instances(inst: &InstanceMap) -> bool {
    for y in 0..inst.h {
        for x in 0..inst.w {
            let l = inst.at(y, x);
            if l == 0 {
                continue;
            }
            if x + 1 < inst.w {
                let r = inst.at(y, x + 1);
                if r > 0 && r != l {
                    return true;
                }
            }
            if y + 1 < inst.h {
                let d = inst.at(y + 1, x);
                if d > 0 && d != l {
                    return true;
                }
            }
        }
    }
    false
}

/// A geometric augmentation: flips then quarter-turn rotations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Augmentation {
    pub hflip: bool,
    pub vflip: bool,
    pub rot_quarters: u8,
}

impl Augmentation {
    pub fn sample(rng: &mut impl Rng) -> Self {
        Augmentation {
            hflip: rng.random_bool(0.5),
            vflip: rng.random_bool(0.5),
            rot_quarters: rng.random_range(0..4),
        }
    }

    pub fn is_identity(&self) -> bool {
        !self.hflip && !self.vflip && self.rot_quarters == 0
    }
}

fn remap<T: Copy>(src: &[T], h: usize, w: usize, stride: usize, aug: Augmentation) -> (Vec<T>, usize, usize) {
    // flips first, then rotation by 90° counterclockwise `rot` times
    let mut cur = src.to_vec();
    let (mut ch, mut cw) = (h, w);
    if aug.hflip {
        let mut out = cur.clone();
        for y in 0..ch {
            for x in 0..cw {
                for s in 0..stride {
                    out[(y * cw + x) * stride + s] = cur[(y * cw + (cw - 1 - x)) * stride + s];
                }
            }
        }
        cur = out;
    }
    if aug.vflip {
        let mut out = cur.clone();
        for y in 0..ch {
            for x in 0..cw {
                for s in 0..stride {
                    out[(y * cw + x) * stride + s] = cur[((ch - 1 - y) * cw + x) * stride + s];
                }
            }
        }
        cur = out;
    }
    for _ in 0..aug.rot_quarters % 4 {
        let (nh, nw) = (cw, ch);
        let mut out = cur.clone();
        for y in 0..nh {
            for x in 0..nw {
                // counterclockwise: out(y, x) = in(x, cw-1-y)
                for s in 0..stride {
                    out[(y * nw + x) * stride + s] = cur[(x * cw + (cw - 1 - y)) * stride + s];
                }
            }
        }
        cur = out;
        ch = nh;
        cw = nw;
    }
    (cur, ch, cw)
}

/// Apply a geometric augmentation consistently to image, instance and type
/// maps. Distance/isoheight targets must be derived from the result, never
/// transformed.
pub fn augment(sample: &SynthSample, aug: Augmentation) -> SynthSample {
    let (rgb, h, w) = remap(&sample.rgb, sample.h, sample.w, 3, aug);
    let (labels, _, _) = remap(&sample.inst.labels, sample.h, sample.w, 1, aug);
    let (types, _, _) = remap(&sample.types.types, sample.h, sample.w, 1, aug);
    SynthSample {
        h,
        w,
        rgb,
        inst: InstanceMap { h, w, labels },
        types: TypeMap { h, w, types },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::groundtruth::{bd_from_instances, BD_LEFT, BD_RIGHT};

    #[test]
    fn zero_nuclei_gives_background_only() {
        let spec = SynthSpec {
            nuclei_min: 0,
            nuclei_max: 0,
            ..SynthSpec::default()
        };
        let s = synth_sample(3, &spec).unwrap();
        assert_eq!(s.inst.instance_count(), 0);
        assert!(s.types.types.iter().all(|&t| t == 0));
    }

    #[test]
    fn identical_seeds_are_bit_identical() {
        let spec = SynthSpec::default();
        let a = synth_sample(1234, &spec).unwrap();
        let b = synth_sample(1234, &spec).unwrap();
        assert_eq!(a, b);
        let c = synth_sample(1235, &spec).unwrap();
        assert_ne!(a.rgb, c.rgb);
    }

    #[test]
    fn infeasible_radius_rejected() {
        let spec = SynthSpec {
            radius_max: 40.0,
            ..SynthSpec::default()
        };
        assert!(synth_sample(0, &spec).is_err());
    }

    #[test]
    fn instances_are_contiguous_and_4_connected() {
        let spec = SynthSpec {
            overlap_prob: 0.8,
            ..SynthSpec::default()
        };
        for seed in 0..30 {
            let s = synth_sample(seed, &spec).unwrap();
            assert!(s.inst.labels_contiguous(), "seed {seed}");
            // every instance one 4-connected component
            let k = s.inst.max_label();
            for label in 1..=k {
                let mut seen = None;
                let mut visited = vec![false; s.h * s.w];
                let mut stack = Vec::new();
                for i in 0..s.h * s.w {
                    if s.inst.labels[i] == label {
                        seen = Some(i);
                        break;
                    }
                }
                let start = seen.expect("label present");
                stack.push(start);
                visited[start] = true;
                let mut reached = 0;
                while let Some(i) = stack.pop() {
                    reached += 1;
                    let (y, x) = (i / s.w, i % s.w);
                    let mut push = |j: usize| {
                        if s.inst.labels[j] == label && !visited[j] {
                            visited[j] = true;
                            stack.push(j);
                        }
                    };
                    if y > 0 {
                        push(i - s.w);
                    }
                    if y + 1 < s.h {
                        push(i + s.w);
                    }
                    if x > 0 {
                        push(i - 1);
                    }
                    if x + 1 < s.w {
                        push(i + 1);
                    }
                }
                let total = s.inst.labels.iter().filter(|&&l| l == label).count();
                assert_eq!(reached, total, "seed {seed} label {label} disconnected");
            }
            // type 0 exactly where instance map is 0
            for i in 0..s.h * s.w {
                assert_eq!(s.types.types[i] == 0, s.inst.labels[i] == 0);
            }
        }
    }

    #[test]
    fn identity_augmentation_is_noop() {
        let s = synth_sample(7, &SynthSpec::default()).unwrap();
        let a = augment(&s, Augmentation::default());
        assert_eq!(a, s);
    }

    #[test]
    fn double_horizontal_flip_restores() {
        let s = synth_sample(8, &SynthSpec::default()).unwrap();
        let flip = Augmentation {
            hflip: true,
            ..Default::default()
        };
        let twice = augment(&augment(&s, flip), flip);
        assert_eq!(twice, s);
    }

    #[test]
    fn flip_swaps_left_right_distances() {
        let s = synth_sample(9, &SynthSpec::default()).unwrap();
        let bd = bd_from_instances(&s.inst);
        let flipped = augment(
            &s,
            Augmentation {
                hflip: true,
                ..Default::default()
            },
        );
        let bd_f = bd_from_instances(&flipped.inst);
        for y in 0..s.h {
            for x in 0..s.w {
                assert_eq!(bd.at(BD_LEFT, y, x), bd_f.at(BD_RIGHT, y, s.w - 1 - x));
                assert_eq!(bd.at(BD_RIGHT, y, x), bd_f.at(BD_LEFT, y, s.w - 1 - x));
            }
        }
    }

    #[test]
    fn augmentation_preserves_instance_histogram() {
        let s = synth_sample(10, &SynthSpec::default()).unwrap();
        let aug = Augmentation {
            hflip: true,
            vflip: false,
            rot_quarters: 1,
        };
        let a = augment(&s, aug);
        assert_eq!(a.inst.instance_count(), s.inst.instance_count());
        let count_pixels = |m: &InstanceMap| {
            let mut v = vec![0usize; m.max_label() as usize + 1];
            for &l in &m.labels {
                v[l as usize] += 1;
            }
            v.sort_unstable();
            v
        };
        assert_eq!(count_pixels(&a.inst), count_pixels(&s.inst));
        let hist = |t: &TypeMap| {
            let mut v = [0usize; 7];
            for &c in &t.types {
                v[c as usize] += 1;
            }
            v
        };
        assert_eq!(hist(&a.types), hist(&s.types));
    }
}

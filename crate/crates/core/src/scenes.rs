//! Seeded synthetic aerial-style scenes: many small, class-distinct shapes
//! on a textured background, some partially covering each other.
//!
//! Labels are amodal (the full extent of an object, even where another
//! object is drawn over it).

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::boxes::{Bbox, BoxSet};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Side lengths in pixels, inclusive.
    pub min_size: usize,
    pub max_size: usize,
    /// Chance that a new object is placed over an existing one.
    pub occlusion: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            height: 64,
            width: 64,
            channels: 3,
            num_classes: 3,
            min_objects: 4,
            max_objects: 12,
            min_size: 3,
            max_size: 10,
            occlusion: 0.3,
            seed: 0,
        }
    }
}

/// Minimum number of visible pixels every object keeps.
pub const MIN_VISIBLE_PX: usize = 4;
/// Occluded pairs share this fraction of the smaller box's area.
pub const OCCLUSION_OVERLAP: (f64, f64) = (0.3, 0.7);
const PLACEMENT_TRIES: usize = 2000;

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.channels == 0 || self.num_classes == 0 || self.height == 0 || self.width == 0 {
            return fail("scene dims, channels and classes must be positive".into());
        }
        if self.min_size < 2 || self.min_size > self.max_size {
            return fail(format!("object size range {}..={} is invalid (sizes start at 2)", self.min_size, self.max_size));
        }
        if self.max_size > self.height.min(self.width) {
            return fail(format!(
                "objects up to {} px do not fit a {}x{} image",
                self.max_size, self.height, self.width
            ));
        }
        if self.min_objects > self.max_objects || self.max_objects == 0 {
            return fail(format!("object count range {}..={} is invalid", self.min_objects, self.max_objects));
        }
        let worst = self.max_objects * (self.max_size + 1) * (self.max_size + 1);
        if worst > self.height * self.width / 2 {
            return fail(format!(
                "{} objects of {} px cannot be placed apart in a {}x{} image",
                self.max_objects, self.max_size, self.height, self.width
            ));
        }
        if !(0.0..=1.0).contains(&self.occlusion) {
            return fail(format!("occlusion probability {} outside [0, 1]", self.occlusion));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `(1, channels, h, w)` with values in `[0, 1]`.
    pub image: Tensor<f32>,
    pub gt: BoxSet,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape2d {
    Rect,
    Disk,
    Cross,
}

impl Shape2d {
    pub fn for_class(class: usize) -> Self {
        [Shape2d::Rect, Shape2d::Disk, Shape2d::Cross][class % 3]
    }
}

/// Pixel rectangle `[x, x + w) x [y, y + h)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct PixBox {
    x: usize,
    y: usize,
    w: usize,
    h: usize,
}

impl PixBox {
    fn intersection(&self, o: &PixBox) -> usize {
        let ix = (self.x + self.w).min(o.x + o.w).saturating_sub(self.x.max(o.x));
        let iy = (self.y + self.h).min(o.y + o.h).saturating_sub(self.y.max(o.y));
        ix * iy
    }

    fn area(&self) -> usize {
        self.w * self.h
    }

    fn covers(&self, shape: Shape2d, px: usize, py: usize) -> bool {
        if px < self.x || py < self.y || px >= self.x + self.w || py >= self.y + self.h {
            return false;
        }
        let (lx, ly) = ((px - self.x) as f64 + 0.5, (py - self.y) as f64 + 0.5);
        match shape {
            Shape2d::Rect => true,
            Shape2d::Disk => {
                let (rx, ry) = (self.w as f64 / 2.0, self.h as f64 / 2.0);
                let (dx, dy) = ((lx - rx) / rx, (ly - ry) / ry);
                dx * dx + dy * dy <= 1.0
            }
            Shape2d::Cross => {
                let (tw, th) = ((self.w / 3).max(1) as f64, (self.h / 3).max(1) as f64);
                ((lx - self.w as f64 / 2.0).abs() <= tw / 2.0 + 0.5) || ((ly - self.h as f64 / 2.0).abs() <= th / 2.0 + 0.5)
            }
        }
    }
}

fn class_color(class: usize, channels: usize) -> Vec<f64> {
    const BASE: [[f64; 3]; 3] = [[0.9, 0.2, 0.2], [0.2, 0.85, 0.3], [0.25, 0.3, 0.9]];
    let shade = 1.0 - 0.25 * (class / 3) as f64;
    (0..channels).map(|c| BASE[class % 3][c % 3] * shade).collect()
}

/// Low-pass filtered noise around a random base colour.
fn background(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (h, w) = (spec.height, spec.width);
    let mut img = vec![0.0; spec.channels * h * w];
    for c in 0..spec.channels {
        let base = rng.gen_range(0.2..0.5);
        let noise: Vec<f64> = (0..h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for y in 0..h {
            for x in 0..w {
                let (mut acc, mut cnt) = (0.0, 0.0);
                for yy in y.saturating_sub(2)..(y + 3).min(h) {
                    for xx in x.saturating_sub(2)..(x + 3).min(w) {
                        acc += noise[yy * w + xx];
                        cnt += 1.0;
                    }
                }
                img[(c * h + y) * w + x] = base + 0.3 * acc / cnt;
            }
        }
    }
    img
}

struct Placed {
    rect: PixBox,
    shape: Shape2d,
    class: usize,
}

/// Visible pixel count of every object, painting in order.
fn visible_counts(objs: &[Placed], h: usize, w: usize) -> Vec<usize> {
    let mut owner = vec![usize::MAX; h * w];
    for (i, o) in objs.iter().enumerate() {
        for y in o.rect.y..o.rect.y + o.rect.h {
            for x in o.rect.x..o.rect.x + o.rect.w {
                if o.rect.covers(o.shape, x, y) {
                    owner[y * w + x] = i;
                }
            }
        }
    }
    let mut counts = vec![0; objs.len()];
    for &i in owner.iter().filter(|&&i| i != usize::MAX) {
        counts[i] += 1;
    }
    counts
}

fn place(spec: &SceneSpec, objs: &[Placed], shape: Shape2d, rng: &mut ChaCha8Rng) -> Option<PixBox> {
    let (h, w) = (spec.height, spec.width);
    let occlude = !objs.is_empty() && rng.gen_bool(spec.occlusion);
    let bw = rng.gen_range(spec.min_size..=spec.max_size);
    let bh = rng.gen_range(spec.min_size..=spec.max_size);
    let target = occlude.then(|| rng.gen_range(0..objs.len()));
    let ok_visible = |cand: PixBox| {
        let mut all: Vec<Placed> = objs.iter().map(|o| Placed { rect: o.rect, shape: o.shape, class: o.class }).collect();
        all.push(Placed { rect: cand, shape, class: 0 });
        visible_counts(&all, h, w).iter().all(|&c| c >= MIN_VISIBLE_PX)
    };
    if let Some(t) = target {
        let a = objs[t].rect;
        let x_lo = a.x.saturating_sub(bw - 1);
        let y_lo = a.y.saturating_sub(bh - 1);
        let x_hi = (a.x + a.w - 1).min(w - bw);
        let y_hi = (a.y + a.h - 1).min(h - bh);
        if x_lo <= x_hi && y_lo <= y_hi {
            for _ in 0..PLACEMENT_TRIES / 4 {
                let cand = PixBox { x: rng.gen_range(x_lo..=x_hi), y: rng.gen_range(y_lo..=y_hi), w: bw, h: bh };
                let frac = a.intersection(&cand) as f64 / a.area().min(cand.area()) as f64;
                let others_clear = objs.iter().enumerate().all(|(i, o)| i == t || o.rect.intersection(&cand) == 0);
                if (OCCLUSION_OVERLAP.0..=OCCLUSION_OVERLAP.1).contains(&frac) && others_clear && ok_visible(cand) {
                    return Some(cand);
                }
            }
        }
    }
    for _ in 0..PLACEMENT_TRIES {
        let cand = PixBox { x: rng.gen_range(0..=w - bw), y: rng.gen_range(0..=h - bh), w: bw, h: bh };
        if objs.iter().all(|o| o.rect.intersection(&cand) == 0) {
            return Some(cand);
        }
    }
    None
}

/// Scene `index` of the stream defined by `spec.seed`.
pub fn generate_one(spec: &SceneSpec, index: u64) -> Result<Sample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index);
    let (h, w, ch) = (spec.height, spec.width, spec.channels);
    let mut img = background(spec, &mut rng);
    let count = rng.gen_range(spec.min_objects..=spec.max_objects);
    let mut objs: Vec<Placed> = Vec::with_capacity(count);
    for _ in 0..count {
        let class = rng.gen_range(0..spec.num_classes);
        let shape = Shape2d::for_class(class);
        let rect = place(spec, &objs, shape, &mut rng)
            .ok_or_else(|| Error::Config(format!("could not place {count} objects in a {h}x{w} scene")))?;
        objs.push(Placed { rect, shape, class });
    }
    for o in &objs {
        let color: Vec<f64> = class_color(o.class, ch).iter().map(|c| c + rng.gen_range(-0.1..0.1)).collect();
        for y in o.rect.y..o.rect.y + o.rect.h {
            for x in o.rect.x..o.rect.x + o.rect.w {
                if o.rect.covers(o.shape, x, y) {
                    for (c, v) in color.iter().enumerate() {
                        img[(c * h + y) * w + x] = *v;
                    }
                }
            }
        }
    }
    let data = img.iter().map(|v| v.clamp(0.0, 1.0) as f32).collect();
    let image = Tensor::from_values((1, ch, h, w), data)?;
    // Box values are rounded to f32 so the on-disk form is exact.
    let q = |v: f64| v as f32 as f64;
    let boxes = objs
        .iter()
        .map(|o| {
            let r = o.rect;
            Bbox::new(
                q((r.x as f64 + r.w as f64 / 2.0) / w as f64),
                q((r.y as f64 + r.h as f64 / 2.0) / h as f64),
                q(r.w as f64 / w as f64),
                q(r.h as f64 / h as f64),
            )
        })
        .collect();
    let gt = BoxSet::new(boxes, objs.iter().map(|o| o.class).collect())?;
    Ok(Sample { image, gt })
}

pub fn generate(spec: &SceneSpec, count: usize) -> Result<Vec<Sample>> {
    if count == 0 {
        return Err(Error::Config("dataset size must be at least 1".into()));
    }
    (0..count as u64).map(|i| generate_one(spec, i)).collect()
}

/// Stacks images `indices` of `samples` into one `(n, c, h, w)` batch.
pub fn batch_images(samples: &[Sample], indices: &[usize]) -> Result<Tensor<f64>> {
    let first = samples.get(*indices.first().ok_or_else(|| Error::Contract("empty batch".into()))?);
    let s = first.ok_or_else(|| Error::Contract("batch index out of range".into()))?.image.shape();
    let mut data = Vec::with_capacity(indices.len() * s.numel());
    for &i in indices {
        let img = &samples.get(i).ok_or_else(|| Error::Contract(format!("batch index {i} out of range")))?.image;
        if img.shape() != s {
            return Err(Error::Shape(format!("image {i} is {}, batch expects {s}", img.shape())));
        }
        data.extend(img.data().iter().map(|&v| v as f64));
    }
    Tensor::from_values((indices.len(), s.c, s.h, s.w), data)
}

pub const DATASET_MAGIC: &[u8; 4] = b"FDS1";
pub const DATASET_VERSION: u16 = 1;

/// Images in the dataset file always have this many channels.
pub const DATASET_CHANNELS: usize = 3;

/// Little-endian layout: magic, `u16` version, `u32` sample count; per
/// sample `u16` height and width, the `3 * h * w` `f32` pixels in `(c, h, w)`
/// order, a `u16` box count and per box four `f32` (`cx, cy, w, h`) plus a
/// `u16` class id.
pub fn encode(samples: &[Sample]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&u32::try_from(samples.len()).map_err(|_| Error::Config("too many samples".into()))?.to_le_bytes());
    let small = |v: usize, what: &str| u16::try_from(v).map_err(|_| Error::Config(format!("{what} {v} exceeds u16")));
    for s in samples {
        let sh = s.image.shape();
        if sh.n != 1 || sh.c != DATASET_CHANNELS {
            return Err(Error::Shape(format!("dataset images must be (1, {DATASET_CHANNELS}, h, w), got {sh}")));
        }
        for (v, what) in [(sh.h, "height"), (sh.w, "width")] {
            out.extend_from_slice(&small(v, what)?.to_le_bytes());
        }
        for v in s.image.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&small(s.gt.len(), "box count")?.to_le_bytes());
        for (b, &c) in s.gt.boxes.iter().zip(&s.gt.classes) {
            for v in b.to_array() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
            out.extend_from_slice(&small(c, "class id")?.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos,
                message: format!("truncated while reading {what} ({n} bytes needed, {} left)", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Sample>> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4, "magic")? != DATASET_MAGIC {
        return Err(Error::Format { offset: 0, message: "not a scene dataset (bad magic)".into() });
    }
    let version = cur.u16("version")?;
    if version != DATASET_VERSION {
        return Err(Error::Format { offset: 4, message: format!("unsupported version {version}") });
    }
    let count = cur.u32("sample count")? as usize;
    let mut samples = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let (c, h, w) = (DATASET_CHANNELS, cur.u16("height")? as usize, cur.u16("width")? as usize);
        let mut data = Vec::with_capacity(c * h * w);
        for _ in 0..c * h * w {
            data.push(cur.f32("pixel")?);
        }
        let image = Tensor::from_values((1, c, h, w), data)?;
        let nb = cur.u16("box count")? as usize;
        let mut boxes = Vec::with_capacity(nb);
        let mut classes = Vec::with_capacity(nb);
        for _ in 0..nb {
            let v: Vec<f64> = (0..4).map(|_| cur.f32("box").map(f64::from)).collect::<Result<_>>()?;
            boxes.push(Bbox::new(v[0], v[1], v[2], v[3]));
            classes.push(cur.u16("class id")? as usize);
        }
        samples.push(Sample { image, gt: BoxSet::new(boxes, classes)? });
    }
    if cur.pos != bytes.len() {
        return Err(Error::Format { offset: cur.pos, message: format!("{} trailing bytes", bytes.len() - cur.pos) });
    }
    Ok(samples)
}

pub fn save(samples: &[Sample], path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode(samples)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Vec<Sample>> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxes::iou;

    fn small_spec(seed: u64) -> SceneSpec {
        SceneSpec { seed, ..SceneSpec::default() }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate(&small_spec(5), 4).unwrap();
        let b = generate(&small_spec(5), 4).unwrap();
        let c = generate(&small_spec(6), 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        // Samples do not depend on how many are generated.
        assert_eq!(generate_one(&small_spec(5), 2).unwrap(), a[2]);
    }

    #[test]
    fn labels_satisfy_invariants() {
        let spec = small_spec(1);
        for s in generate(&spec, 20).unwrap() {
            s.gt.validate(3).unwrap();
            assert!((4..=12).contains(&s.gt.len()));
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
            for b in &s.gt.boxes {
                let (pw, ph) = (b.w * 64.0, b.h * 64.0);
                assert!((3.0..=10.0).contains(&pw) && (3.0..=10.0).contains(&ph));
            }
        }
    }

    #[test]
    fn no_occlusion_means_disjoint_boxes() {
        let spec = SceneSpec { occlusion: 0.0, ..small_spec(2) };
        for s in generate(&spec, 30).unwrap() {
            for i in 0..s.gt.len() {
                for j in i + 1..s.gt.len() {
                    assert_eq!(iou(s.gt.boxes[i], s.gt.boxes[j]), 0.0);
                }
            }
        }
    }

    #[test]
    fn full_occlusion_produces_overlaps() {
        let spec = SceneSpec { occlusion: 1.0, ..small_spec(3) };
        let overlapping = generate(&spec, 10)
            .unwrap()
            .iter()
            .map(|s| {
                (0..s.gt.len())
                    .flat_map(|i| (i + 1..s.gt.len()).map(move |j| (i, j)))
                    .filter(|&(i, j)| iou(s.gt.boxes[i], s.gt.boxes[j]) > 0.0)
                    .count()
            })
            .sum::<usize>();
        assert!(overlapping > 10);
    }

    #[test]
    fn infeasible_spec_rejected() {
        let spec = SceneSpec { max_size: 80, ..SceneSpec::default() };
        assert!(matches!(generate(&spec, 1), Err(Error::Config(_))));
        assert!(matches!(generate(&SceneSpec::default(), 0), Err(Error::Config(_))));
    }

    #[test]
    fn roundtrip_and_truncation() {
        let d = generate(&small_spec(4), 3).unwrap();
        let bytes = encode(&d).unwrap();
        assert_eq!(decode(&bytes).unwrap(), d);
        let err = decode(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Format { offset: 0, .. })));
        let mut v2 = bytes;
        v2[4] = 9;
        assert!(matches!(decode(&v2), Err(Error::Format { offset: 4, .. })));
    }
}

//! Deterministic synthetic segmentation datasets and the CRSD file format.
//!
//! Every foreground class is one shape (disk, rectangle or ring) with its
//! own base intensity. The image is rendered from the smooth outline; the
//! label map uses the same outline perturbed by a random radial jitter, so
//! pixels near the boundary are genuinely ambiguous given the image.
//!
//! # CRSD layout
//!
//! All integers little-endian.
//!
//! | field | type |
//! |-------|------|
//! | magic | `b"CRSD"` |
//! | version | u16 (= 1) |
//! | 3 × split block (train, val, test) | |
//! | .. sample count | u32 |
//! | .. H, W | u16, u16 |
//! | .. K | u8 |
//! | .. per sample: image | H·W × f32 |
//! | .. per sample: labels | H·W × u8 |

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::binio::{put_f32s, put_u16, put_u32, Reader};
use crate::error::{invalid, Error, Result};

pub const CRSD_MAGIC: &[u8; 4] = b"CRSD";
pub const CRSD_VERSION: u16 = 1;

const JITTER_HARMONICS: std::ops::RangeInclusive<u32> = 2..=7;
const RING_INNER_RATIO: f64 = 0.55;
const PLACEMENT_TRIES: usize = 100;
const LAYOUT_TRIES: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Disk,
    Rectangle,
    Ring,
}

impl ShapeKind {
    /// Area of the shape relative to the square of its outer radius (for
    /// rectangles, relative to the product of the half extents).
    fn unit_area(self) -> f64 {
        match self {
            ShapeKind::Disk => PI,
            ShapeKind::Ring => PI * (1.0 - RING_INNER_RATIO * RING_INNER_RATIO),
            ShapeKind::Rectangle => 4.0,
        }
    }
}

/// One image with its per-pixel class labels, both row-major H×W.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub height: usize,
    pub width: usize,
    pub image: Vec<f32>,
    pub labels: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub samples: Vec<Sample>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitKind {
    Train,
    Val,
    Test,
}

impl SplitKind {
    pub const ALL: [SplitKind; 3] = [SplitKind::Train, SplitKind::Val, SplitKind::Test];

    fn stream(self) -> u64 {
        match self {
            SplitKind::Train => 0,
            SplitKind::Val => 1,
            SplitKind::Test => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SplitKind::Train => "train",
            SplitKind::Val => "val",
            SplitKind::Test => "test",
        }
    }
}

impl std::str::FromStr for SplitKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitKind::Train),
            "val" => Ok(SplitKind::Val),
            "test" => Ok(SplitKind::Test),
            _ => Err(invalid(format!("unknown split {s:?} (expected train, val or test)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Split,
    pub val: Split,
    pub test: Split,
}

impl Dataset {
    pub fn split(&self, kind: SplitKind) -> &Split {
        match kind {
            SplitKind::Train => &self.train,
            SplitKind::Val => &self.val,
            SplitKind::Test => &self.test,
        }
    }

    pub fn classes(&self) -> usize {
        self.train.classes
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    /// Class count K, background included.
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Foreground class `k` is drawn as `shapes[k - 1]`.
    pub shapes: Vec<ShapeKind>,
    /// Expected image-area fraction of each foreground class.
    pub target_fraction: Vec<f64>,
    /// Base intensity of every class, background first.
    pub intensities: Vec<f64>,
    /// Standard deviation of additive Gaussian intensity noise.
    pub noise: f64,
    /// RMS amplitude, in pixels, of the radial label-outline jitter.
    pub jitter: f64,
    /// Width in pixels of the logistic edge used when rendering images;
    /// zero gives hard edges.
    pub edge_softness: f64,
    pub seed: u64,
}

impl DatasetSpec {
    /// K = 4, 64×64, 200/40/40 samples.
    pub fn toy4(seed: u64) -> Self {
        Self {
            classes: 4,
            height: 64,
            width: 64,
            train: 200,
            val: 40,
            test: 40,
            shapes: vec![ShapeKind::Disk, ShapeKind::Rectangle, ShapeKind::Ring],
            target_fraction: vec![0.07, 0.07, 0.06],
            intensities: vec![0.15, 0.45, 0.65, 0.85],
            noise: 0.08,
            jitter: 1.5,
            edge_softness: 0.6,
            seed,
        }
    }

    /// K = 3, 48×48, 12/4/4 samples: small enough for unit tests.
    pub fn tiny(seed: u64) -> Self {
        Self {
            classes: 3,
            height: 48,
            width: 48,
            train: 12,
            val: 4,
            test: 4,
            shapes: vec![ShapeKind::Disk, ShapeKind::Rectangle],
            target_fraction: vec![0.08, 0.07],
            intensities: vec![0.15, 0.55, 0.85],
            noise: 0.08,
            jitter: 0.8,
            edge_softness: 0.6,
            seed,
        }
    }

    pub fn preset(name: &str, seed: u64) -> Result<Self> {
        match name {
            "toy4" => Ok(Self::toy4(seed)),
            "tiny" => Ok(Self::tiny(seed)),
            _ => Err(invalid(format!("unknown preset {name:?} (expected toy4 or tiny)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.classes > 255 {
            return Err(invalid(format!("class count {} outside [2, 255]", self.classes)));
        }
        if self.classes - 1 > self.shapes.len() {
            return Err(invalid(format!(
                "{} foreground classes exceed the shape vocabulary of {}",
                self.classes - 1,
                self.shapes.len()
            )));
        }
        if self.target_fraction.len() != self.classes - 1 {
            return Err(invalid("need one target fraction per foreground class"));
        }
        if self.intensities.len() != self.classes {
            return Err(invalid("need one intensity per class"));
        }
        if self.height == 0 || self.width == 0 || self.height > u16::MAX as usize || self.width > u16::MAX as usize {
            return Err(invalid("image extents must be in [1, 65535]"));
        }
        let total: f64 = self.target_fraction.iter().sum();
        if self.target_fraction.iter().any(|&f| !(f > 0.0)) || total >= 1.0 {
            return Err(invalid("target fractions must be positive and sum below 1"));
        }
        if !(self.noise >= 0.0) || !(self.jitter >= 0.0) || !(self.edge_softness >= 0.0) {
            return Err(invalid("noise, jitter and edge softness must be non-negative"));
        }
        Ok(())
    }

    /// Expected pixel share of every class, background first.
    pub fn target_proportions(&self) -> Vec<f64> {
        let fg: f64 = self.target_fraction.iter().sum();
        std::iter::once(1.0 - fg)
            .chain(self.target_fraction.iter().copied())
            .collect()
    }

    fn count(&self, kind: SplitKind) -> usize {
        match kind {
            SplitKind::Train => self.train,
            SplitKind::Val => self.val,
            SplitKind::Test => self.test,
        }
    }
}

/// An explicit shape to render.
#[derive(Debug, Clone, PartialEq)]
pub struct Placement {
    pub class: u8,
    pub kind: ShapeKind,
    pub center: (f64, f64),
    /// Outer radius for disks and rings; half extent along the rotated x
    /// axis for rectangles.
    pub radius: f64,
    /// Half extent along the rotated y axis (rectangles only).
    pub half_height: f64,
    pub rotation: f64,
}

impl Placement {
    fn extent(&self) -> f64 {
        match self.kind {
            ShapeKind::Rectangle => self.radius.hypot(self.half_height),
            _ => self.radius,
        }
    }

    /// Radial distance from the center to the outline at angle `theta`.
    fn outer_radius(&self, theta: f64) -> f64 {
        match self.kind {
            ShapeKind::Disk | ShapeKind::Ring => self.radius,
            ShapeKind::Rectangle => {
                let t = theta - self.rotation;
                let (c, s) = (libm::cos(t).abs(), libm::sin(t).abs());
                let rx = if c > 0.0 { self.radius / c } else { f64::INFINITY };
                let ry = if s > 0.0 { self.half_height / s } else { f64::INFINITY };
                rx.min(ry)
            }
        }
    }
}

/// Radial outline perturbation: a clipped random trigonometric series with
/// the requested RMS amplitude.
#[derive(Debug, Clone)]
struct Jitter {
    coeffs: Vec<(u32, f64, f64)>,
    clip: f64,
}

impl Jitter {
    fn sample(rng: &mut ChaCha8Rng, amplitude: f64) -> Self {
        let mut coeffs: Vec<(u32, f64, f64)> = JITTER_HARMONICS
            .map(|h| (h, rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let rms = (coeffs.iter().map(|(_, a, b)| a * a + b * b).sum::<f64>() / 2.0).sqrt();
        let scale = if amplitude > 0.0 && rms > 0.0 { amplitude / rms } else { 0.0 };
        for c in &mut coeffs {
            c.1 *= scale;
            c.2 *= scale;
        }
        Self {
            coeffs,
            clip: 2.0 * amplitude,
        }
    }

    fn at(&self, theta: f64) -> f64 {
        if self.clip == 0.0 {
            return 0.0;
        }
        let v: f64 = self
            .coeffs
            .iter()
            .map(|&(h, a, b)| a * libm::cos(h as f64 * theta) + b * libm::sin(h as f64 * theta))
            .sum();
        v.clamp(-self.clip, self.clip)
    }
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-x))
}

fn soft_step(x: f64, softness: f64) -> f64 {
    if softness > 0.0 {
        logistic(x / softness)
    } else if x >= 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Standard normal draw (Box–Muller); uses libm so results are identical
/// on every platform.
fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * libm::log(u1)).sqrt() * libm::cos(2.0 * PI * u2)
}

/// Renders `placements` onto a background. Label outlines are jittered
/// with amplitude `spec.jitter`; the image is drawn from the smooth
/// outlines.
pub fn render_sample(spec: &DatasetSpec, placements: &[Placement], rng: &mut ChaCha8Rng) -> Sample {
    let (h, w) = (spec.height, spec.width);
    let bg = spec.intensities[0];
    let mut intensity = vec![bg; h * w];
    let mut labels = vec![0u8; h * w];
    for p in placements {
        let outer = Jitter::sample(rng, spec.jitter);
        let inner = Jitter::sample(rng, spec.jitter);
        let level = spec.intensities[p.class as usize] - bg;
        for y in 0..h {
            for x in 0..w {
                let dx = x as f64 - p.center.0;
                let dy = y as f64 - p.center.1;
                let r = (dx * dx + dy * dy).sqrt();
                let theta = libm::atan2(dy, dx);
                let ro = p.outer_radius(theta);
                let inside = r <= ro + outer.at(theta);
                let mut membership = soft_step(ro - r, spec.edge_softness);
                let mut label_in = inside;
                if p.kind == ShapeKind::Ring {
                    let ri = RING_INNER_RATIO * p.radius;
                    label_in = inside && r > ri + inner.at(theta);
                    membership *= soft_step(r - ri, spec.edge_softness);
                }
                intensity[y * w + x] += level * membership;
                if label_in {
                    labels[y * w + x] = p.class;
                }
            }
        }
    }
    let image = intensity
        .into_iter()
        .map(|v| {
            let noisy = if spec.noise > 0.0 { v + spec.noise * gaussian(rng) } else { v };
            noisy.clamp(0.0, 1.0) as f32
        })
        .collect();
    Sample {
        height: h,
        width: w,
        image,
        labels,
    }
}

fn place_shapes(spec: &DatasetSpec, rng: &mut ChaCha8Rng) -> Result<Vec<Placement>> {
    for _ in 0..LAYOUT_TRIES {
        if let Some(layout) = try_layout(spec, rng)? {
            return Ok(layout);
        }
    }
    Err(invalid(format!(
        "could not fit {} shapes into a {}x{} image",
        spec.classes - 1,
        spec.height,
        spec.width
    )))
}

fn try_layout(spec: &DatasetSpec, rng: &mut ChaCha8Rng) -> Result<Option<Vec<Placement>>> {
    let area = (spec.height * spec.width) as f64;
    let mut placed: Vec<(Placement, f64)> = Vec::new();
    for class in 1..spec.classes {
        let kind = spec.shapes[class - 1];
        let target = spec.target_fraction[class - 1] * area;
        let scale: f64 = rng.gen_range(0.85..1.15);
        let (radius, half_height, rotation) = match kind {
            ShapeKind::Rectangle => {
                let aspect: f64 = rng.gen_range(0.7..1.4);
                let half_area = target / kind.unit_area();
                let rot = rng.gen_range(0.0..PI);
                (scale * (half_area * aspect).sqrt(), scale * (half_area / aspect).sqrt(), rot)
            }
            _ => (scale * (target / kind.unit_area()).sqrt(), 0.0, 0.0),
        };
        let mut p = Placement {
            class: class as u8,
            kind,
            center: (0.0, 0.0),
            radius,
            half_height,
            rotation,
        };
        let bound = p.extent() + 2.0 * spec.jitter + 0.5;
        let (xmax, ymax) = (spec.width as f64 - 1.0 - bound, spec.height as f64 - 1.0 - bound);
        if xmax <= bound || ymax <= bound {
            return Err(invalid(format!(
                "{}x{} image too small for a class-{class} shape of extent {bound:.1}",
                spec.height, spec.width
            )));
        }
        let mut ok = false;
        for _ in 0..PLACEMENT_TRIES {
            let c = (rng.gen_range(bound..xmax), rng.gen_range(bound..ymax));
            let clear = placed.iter().all(|(q, qb)| {
                let d = (c.0 - q.center.0).hypot(c.1 - q.center.1);
                d >= bound + qb
            });
            if clear {
                p.center = c;
                ok = true;
                break;
            }
        }
        if !ok {
            return Ok(None);
        }
        placed.push((p, bound));
    }
    Ok(Some(placed.into_iter().map(|(p, _)| p).collect()))
}

fn sample_rng(seed: u64, split: SplitKind, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((split.stream() << 32) | index as u64);
    rng
}

/// Generates one sample; a pure function of `(spec, split, index)`.
pub fn generate_sample(spec: &DatasetSpec, split: SplitKind, index: usize) -> Result<Sample> {
    let mut rng = sample_rng(spec.seed, split, index);
    let placements = place_shapes(spec, &mut rng)?;
    Ok(render_sample(spec, &placements, &mut rng))
}

pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let make = |kind: SplitKind| -> Result<Split> {
        let samples = (0..spec.count(kind))
            .map(|i| generate_sample(spec, kind, i))
            .collect::<Result<Vec<_>>>()?;
        Ok(Split {
            height: spec.height,
            width: spec.width,
            classes: spec.classes,
            samples,
        })
    };
    Ok(Dataset {
        train: make(SplitKind::Train)?,
        val: make(SplitKind::Val)?,
        test: make(SplitKind::Test)?,
    })
}

pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CRSD_MAGIC);
    put_u16(&mut out, CRSD_VERSION);
    for kind in SplitKind::ALL {
        let split = ds.split(kind);
        if split.height > u16::MAX as usize || split.width > u16::MAX as usize || split.classes > 255 {
            return Err(invalid("split extents do not fit the CRSD header"));
        }
        put_u32(&mut out, split.samples.len() as u32);
        put_u16(&mut out, split.height as u16);
        put_u16(&mut out, split.width as u16);
        out.push(split.classes as u8);
        let n = split.height * split.width;
        for s in &split.samples {
            if s.image.len() != n || s.labels.len() != n {
                return Err(invalid("sample extents differ from the split header"));
            }
            put_f32s(&mut out, &s.image);
            out.extend_from_slice(&s.labels);
        }
    }
    Ok(out)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader::new(bytes);
    r.magic(CRSD_MAGIC)?;
    let version = r.u16("version")?;
    if version != CRSD_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let mut splits = Vec::with_capacity(3);
    for kind in SplitKind::ALL {
        let count = r.u32("sample count")? as usize;
        let height = r.u16("height")? as usize;
        let width = r.u16("width")? as usize;
        let classes = r.u8("class count")? as usize;
        if classes < 2 {
            return Err(Error::Malformed(format!("{} split declares {classes} classes", kind.name())));
        }
        let n = height * width;
        let need = (count as u128) * (n as u128) * 5;
        if need > r.remaining() as u128 {
            return Err(Error::Truncated(format!(
                "{} split declares {count} samples of {height}x{width} ({need} bytes), {} available",
                kind.name(),
                r.remaining()
            )));
        }
        let mut samples = Vec::with_capacity(count);
        for i in 0..count {
            let image = r.f32s(n, "image")?;
            let labels = r.take(n, "labels")?.to_vec();
            if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
                return Err(Error::Malformed(format!(
                    "{} sample {i} has label {bad} >= {classes}",
                    kind.name()
                )));
            }
            samples.push(Sample {
                height,
                width,
                image,
                labels,
            });
        }
        splits.push(Split {
            height,
            width,
            classes,
            samples,
        });
    }
    if r.remaining() != 0 {
        return Err(Error::Malformed(format!("{} trailing bytes", r.remaining())));
    }
    let test = splits.pop().unwrap();
    let val = splits.pop().unwrap();
    let train = splits.pop().unwrap();
    if val.classes != train.classes || test.classes != train.classes {
        return Err(Error::Malformed("splits disagree on the class count".into()));
    }
    Ok(Dataset { train, val, test })
}

pub fn write_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_dataset(ds)?)?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    decode_dataset(&std::fs::read(path)?)
}

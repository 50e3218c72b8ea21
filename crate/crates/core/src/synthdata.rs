//! Synthetic images labelled at three levels: a scene restricts which
//! foreground classes may appear, each drawn class is rendered as one shape,
//! and the shapes define the pixel mask.
//!
//! Datasets are stored in the `TDS1` binary format:
//!
//! ```text
//! "TDS1"
//! u32 sample count, u16 H, u16 W, u16 K, u16 S        (little endian)
//! per sample: H*W f32 image, H*W u8 mask, (K-1) u8 presence, u8 scene
//! ```

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"TDS1";
const HEADER_LEN: usize = 4 + 4 + 2 * 4;
const MAX_PLACEMENT_ATTEMPTS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Disk,
    Square,
    Triangle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub shape: ShapeKind,
    /// Inclusive intensity range of the class's pixels before noise.
    pub band: (f64, f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldSpec {
    pub height: usize,
    pub width: usize,
    /// Permitted foreground labels (`1..K`) for each scene.
    pub scenes: Vec<Vec<usize>>,
    /// Entry `k - 1` describes label `k`.
    pub classes: Vec<ClassSpec>,
    pub background_band: (f64, f64),
    /// Half-width of the uniform additive noise.
    pub noise: f64,
    /// Inclusive range of a shape's half-extent in pixels.
    pub size_range: (usize, usize),
    /// Minimum distance in pixels between a shape and the image border.
    pub margin: usize,
}

impl Default for WorldSpec {
    fn default() -> Self {
        let band = |k: f64| (0.2 * k + 0.1, 0.2 * k + 0.25);
        Self {
            height: 32,
            width: 32,
            scenes: vec![vec![1, 2], vec![3]],
            classes: vec![
                ClassSpec {
                    shape: ShapeKind::Disk,
                    band: band(1.0),
                },
                ClassSpec {
                    shape: ShapeKind::Square,
                    band: band(2.0),
                },
                ClassSpec {
                    shape: ShapeKind::Triangle,
                    band: band(3.0),
                },
            ],
            background_band: (0.0, 0.05),
            noise: 0.02,
            size_range: (4, 7),
            margin: 1,
        }
    }
}

impl WorldSpec {
    /// Label count, background included.
    pub fn num_classes(&self) -> usize {
        self.classes.len() + 1
    }

    pub fn num_scenes(&self) -> usize {
        self.scenes.len()
    }

    fn bands(&self) -> Vec<(usize, (f64, f64))> {
        std::iter::once((0, self.background_band))
            .chain(self.classes.iter().enumerate().map(|(i, c)| (i + 1, c.band)))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.classes.is_empty() || self.classes.len() > 254 {
            return bad(format!("need 1..=254 foreground classes, got {}", self.classes.len()));
        }
        if self.scenes.is_empty() || self.scenes.len() > 255 {
            return bad(format!("need 1..=255 scenes, got {}", self.scenes.len()));
        }
        if self.height > u16::MAX as usize || self.width > u16::MAX as usize {
            return bad(format!("image {}x{} too large", self.height, self.width));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return bad(format!("noise {} must be >= 0", self.noise));
        }
        let bands = self.bands();
        for &(k, (lo, hi)) in &bands {
            if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
                return bad(format!("intensity band of label {k} ({lo}, {hi}) is not inside [0, 1]"));
            }
        }
        for (i, &(a, (alo, ahi))) in bands.iter().enumerate() {
            for &(b, (blo, bhi)) in &bands[i + 1..] {
                if alo <= bhi && blo <= ahi {
                    return bad(format!("intensity bands of labels {a} and {b} overlap"));
                }
            }
        }
        for (s, permitted) in self.scenes.iter().enumerate() {
            if permitted.is_empty() {
                return bad(format!("scene {s} permits no classes"));
            }
            if let Some(&k) = permitted.iter().find(|&&k| k == 0 || k > self.classes.len()) {
                return bad(format!("scene {s} permits unknown label {k}"));
            }
            let mut sorted = permitted.clone();
            sorted.sort_unstable();
            sorted.dedup();
            for (t, other) in self.scenes.iter().enumerate().take(s) {
                let mut o = other.clone();
                o.sort_unstable();
                o.dedup();
                if o == sorted {
                    return bad(format!("scenes {t} and {s} permit the same classes"));
                }
            }
        }
        let (rmin, rmax) = self.size_range;
        if rmin > rmax {
            return bad(format!("size_range {rmin}..={rmax} is empty"));
        }
        let need = 2 * (rmin + self.margin) + 1;
        if need > self.height || need > self.width {
            return bad(format!(
                "smallest shape with margin needs {need}x{need} pixels, image is {}x{}",
                self.height, self.width
            ));
        }
        Ok(())
    }

    /// Label predicted for a raw intensity by thresholding halfway between
    /// neighbouring bands.
    pub fn threshold_label(&self, intensity: f64) -> usize {
        let mut bands = self.bands();
        bands.sort_by(|a, b| a.1 .0.total_cmp(&b.1 .0));
        let mut label = bands[0].0;
        for pair in bands.windows(2) {
            let cut = 0.5 * (pair[0].1 .1 + pair[1].1 .0);
            if intensity > cut {
                label = pair[1].0;
            }
        }
        label
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[1, H, W]`, values in `[0, 1]`, each exactly representable as `f32`.
    pub image: Tensor,
    /// Row-major labels in `0..K`.
    pub mask: Vec<usize>,
    /// Entry `k - 1` is 1 iff label `k` occurs in the mask.
    pub class_presence: Vec<u8>,
    pub scene: usize,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn presence_tensor(&self) -> Tensor {
        Tensor::from_vec(self.class_presence.iter().map(|&b| f64::from(b)).collect())
    }

    pub fn scene_onehot(&self, num_scenes: usize) -> Tensor {
        let mut v = vec![0.0; num_scenes];
        v[self.scene] = 1.0;
        Tensor::from_vec(v)
    }
}

fn shape_pixels(kind: ShapeKind, cy: usize, cx: usize, r: usize) -> Vec<(usize, usize)> {
    let mut px = Vec::new();
    for y in cy - r..=cy + r {
        for x in cx - r..=cx + r {
            let dy = y as isize - cy as isize;
            let dx = x as isize - cx as isize;
            let inside = match kind {
                ShapeKind::Square => true,
                ShapeKind::Disk => dx * dx + dy * dy <= (r * r) as isize,
                ShapeKind::Triangle => {
                    // Apex on top, base on the bottom row.
                    let t = (y - (cy - r)) as f64 / (2 * r).max(1) as f64;
                    (dx.unsigned_abs() as f64) <= (t * r as f64).round()
                }
            };
            if inside {
                px.push((y, x));
            }
        }
    }
    px
}

fn uniform_in(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..=hi)
    } else {
        lo
    }
}

/// Draws one sample; a pure function of `(spec, seed)`.
pub fn generate_sample(spec: &WorldSpec, seed: u64) -> Result<Sample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (spec.height, spec.width);
    let scene = rng.gen_range(0..spec.num_scenes());
    let permitted = &spec.scenes[scene];
    let drawn: Vec<usize> = loop {
        let pick: Vec<usize> = permitted.iter().copied().filter(|_| rng.gen_bool(0.5)).collect();
        if !pick.is_empty() {
            break pick;
        }
    };

    let mut mask = vec![0usize; h * w];
    let (rmin, rmax) = spec.size_range;
    for &label in &drawn {
        let kind = spec.classes[label - 1].shape;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let r = rng.gen_range(rmin..=rmax);
            let lo = spec.margin + r;
            if 2 * lo + 1 > h.min(w) {
                continue;
            }
            let cy = rng.gen_range(lo..=h - 1 - lo);
            let cx = rng.gen_range(lo..=w - 1 - lo);
            let px = shape_pixels(kind, cy, cx, r);
            if px.iter().all(|&(y, x)| mask[y * w + x] == 0) {
                for (y, x) in px {
                    mask[y * w + x] = label;
                }
                break;
            }
        }
    }

    let mut image = Vec::with_capacity(h * w);
    for &label in &mask {
        let band = if label == 0 {
            spec.background_band
        } else {
            spec.classes[label - 1].band
        };
        let mut v = uniform_in(&mut rng, band);
        if spec.noise > 0.0 {
            v += rng.gen_range(-spec.noise..=spec.noise);
        }
        image.push(f64::from(v.clamp(0.0, 1.0) as f32));
    }

    let mut class_presence = vec![0u8; spec.classes.len()];
    for &label in &mask {
        if label > 0 {
            class_presence[label - 1] = 1;
        }
    }
    Ok(Sample {
        image: Tensor::new(vec![1, h, w], image)?,
        mask,
        class_presence,
        scene,
    })
}

/// `n` samples with per-sample seeds drawn from `seed`.
pub fn generate_samples(spec: &WorldSpec, n: usize, seed: u64) -> Result<Vec<Sample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| generate_sample(spec, rng.gen())).collect()
}

fn flip_planes(data: &mut [f64], h: usize, w: usize, horizontal: bool, vertical: bool) {
    for plane in data.chunks_mut(h * w) {
        flip_plane(plane, h, w, horizontal, vertical);
    }
}

fn flip_plane<T>(plane: &mut [T], h: usize, w: usize, horizontal: bool, vertical: bool) {
    if horizontal {
        for row in plane.chunks_mut(w) {
            row.reverse();
        }
    }
    if vertical {
        for y in 0..h / 2 {
            let (top, bottom) = plane.split_at_mut((h - 1 - y) * w);
            top[y * w..(y + 1) * w].swap_with_slice(&mut bottom[..w]);
        }
    }
}

/// Mirrors image and mask together; labels at image level are unchanged.
pub fn flip(s: &Sample, horizontal: bool, vertical: bool) -> Sample {
    let (h, w) = (s.height(), s.width());
    let mut out = s.clone();
    flip_planes(out.image.data_mut(), h, w, horizontal, vertical);
    flip_plane(&mut out.mask, h, w, horizontal, vertical);
    out
}

/// Independent horizontal and vertical flips, each with probability 1/2.
pub fn augment_flip<R: Rng>(s: &Sample, rng: &mut R) -> Sample {
    let horizontal = rng.gen_bool(0.5);
    let vertical = rng.gen_bool(0.5);
    flip(s, horizontal, vertical)
}

/// A list of samples plus the label counts written to the file header.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub num_scenes: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn generate(spec: &WorldSpec, n: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            height: spec.height,
            width: spec.width,
            num_classes: spec.num_classes(),
            num_scenes: spec.num_scenes(),
            samples: generate_samples(spec, n, seed)?,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let hw = self.height * self.width;
        let dims = [self.height, self.width, self.num_classes, self.num_scenes];
        if dims.iter().any(|&d| d > u16::MAX as usize) || self.num_classes > 256 || self.num_scenes > 256 {
            return Err(Error::InvalidArgument(format!("dataset dimensions {dims:?} do not fit the format")));
        }
        let count = u32::try_from(self.samples.len())
            .map_err(|_| Error::InvalidArgument("too many samples for the format".into()))?;
        let per = hw * 5 + self.num_classes - 1 + 1;
        let mut buf = Vec::with_capacity(HEADER_LEN + per * self.samples.len());
        buf.extend_from_slice(DATASET_MAGIC);
        buf.extend_from_slice(&count.to_le_bytes());
        for d in dims {
            buf.extend_from_slice(&(d as u16).to_le_bytes());
        }
        for (i, s) in self.samples.iter().enumerate() {
            if s.image.shape() != [1, self.height, self.width]
                || s.mask.len() != hw
                || s.class_presence.len() != self.num_classes - 1
                || s.scene >= self.num_scenes
            {
                return Err(Error::InvalidArgument(format!("sample {i} does not match the dataset header")));
            }
            for &v in s.image.data() {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
            for &l in &s.mask {
                if l >= self.num_classes {
                    return Err(Error::InvalidArgument(format!("sample {i} has mask label {l}")));
                }
                buf.push(l as u8);
            }
            buf.extend_from_slice(&s.class_presence);
            buf.push(s.scene as u8);
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != DATASET_MAGIC {
            return Err(Error::Corrupt {
                offset: 0,
                reason: format!("bad magic {magic:?}"),
            });
        }
        let count = u32::from_le_bytes(r.take(4, "sample count")?.try_into().expect("4 bytes")) as usize;
        let mut dims = [0usize; 4];
        for (d, name) in dims.iter_mut().zip(["height", "width", "num_classes", "num_scenes"]) {
            *d = u16::from_le_bytes(r.take(2, name)?.try_into().expect("2 bytes")) as usize;
        }
        let [h, w, k, s] = dims;
        if h == 0 || w == 0 || k < 2 || s == 0 {
            return Err(Error::Corrupt {
                offset: 8,
                reason: format!("invalid header dimensions H={h} W={w} K={k} S={s}"),
            });
        }
        let hw = h * w;
        let per = hw * 5 + k;
        let payload = bytes.len() - HEADER_LEN;
        if payload != per * count {
            return Err(Error::Corrupt {
                offset: (HEADER_LEN + (payload / per).min(count) * per) as u64,
                reason: format!(
                    "header declares {count} samples ({} payload bytes) but {payload} bytes follow",
                    per * count
                ),
            });
        }
        let mut samples = Vec::with_capacity(count);
        for i in 0..count {
            let start = r.pos as u64;
            let img = r.take(4 * hw, "image")?;
            let image: Vec<f64> = img
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
                .collect();
            let mask: Vec<usize> = r.take(hw, "mask")?.iter().map(|&b| b as usize).collect();
            let class_presence = r.take(k - 1, "class presence")?.to_vec();
            let scene = r.take(1, "scene")?[0] as usize;
            let corrupt = |reason: String| Error::Corrupt { offset: start, reason };
            if mask.iter().any(|&l| l >= k) {
                return Err(corrupt(format!("sample {i} has a mask label >= K={k}")));
            }
            if class_presence.iter().any(|&b| b > 1) || scene >= s {
                return Err(corrupt(format!("sample {i} has invalid presence bits or scene {scene}")));
            }
            samples.push(Sample {
                image: Tensor::new(vec![1, h, w], image)?,
                mask,
                class_presence,
                scene,
            });
        }
        Ok(Self {
            height: h,
            width: w,
            num_classes: k,
            num_scenes: s,
            samples,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Corrupt {
                offset: self.pos as u64,
                reason: format!("truncated while reading {what} ({n} bytes needed, {} left)", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    fs::write(path, dataset.to_bytes()?)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    Dataset::from_bytes(&fs::read(path)?)
}

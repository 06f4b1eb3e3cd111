//! Tile-pair dataset I/O, geometric augmentation, instance-centred crops and
//! the synthetic cross-domain benchmark.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::domain::{normalize_image, denormalize_image, BiTemporalSample, ChangeMask, Image, RangeTag};
use crate::error::{Error, Result};

pub const PRE_DIR: &str = "A";
pub const POST_DIR: &str = "B";
pub const GT_DIR: &str = "OUT";

/// Mask pixels at or above this 8-bit value are changed.
pub const GT_THRESHOLD: u8 = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub root: PathBuf,
    pub split: Split,
    /// Required square tile size; `None` accepts any size.
    pub tile_size: Option<usize>,
    /// Resize mismatching tiles instead of rejecting them.
    pub resize: bool,
}

impl DatasetSpec {
    pub fn new(root: impl Into<PathBuf>, split: Split) -> Self {
        Self {
            root: root.into(),
            split,
            tile_size: Some(256),
            resize: false,
        }
    }

    pub fn split_dir(&self) -> PathBuf {
        self.root.join(self.split.name())
    }
}

fn list_files(dir: &Path) -> Result<BTreeSet<String>> {
    if !dir.is_dir() {
        return Err(Error::Ingestion(format!("missing directory {}", dir.display())));
    }
    let mut names = BTreeSet::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if entry.file_type().map_err(|e| Error::io(entry.path(), e))?.is_file() {
            names.insert(entry.file_name().to_string_lossy().into_owned());
        }
    }
    Ok(names)
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn rgb_to_image(img: &RgbImage) -> Result<Image> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut values = vec![0.0f32; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            values[c * h * w + y as usize * w + x as usize] = p[c] as f32;
        }
    }
    normalize_image(&Image::new(h, w, 3, values, RangeTag::Raw0To255)?)
}

fn gray_to_mask(img: &GrayImage) -> Result<ChangeMask> {
    let values = img.pixels().map(|p| u8::from(p[0] >= GT_THRESHOLD)).collect();
    ChangeMask::new(img.height() as usize, img.width() as usize, values)
}

/// Reads `<root>/<split>/{A,B,OUT}` in lexicographic filename order.
pub fn load_dataset(spec: &DatasetSpec) -> Result<Vec<BiTemporalSample>> {
    load_triples(&spec.split_dir(), spec.tile_size, spec.resize)
}

/// Reads `<dir>/{A,B,OUT}`; see [`DatasetSpec`] for the size options.
pub fn load_triples(dir: &Path, tile_size: Option<usize>, resize: bool) -> Result<Vec<BiTemporalSample>> {
    let dirs = [PRE_DIR, POST_DIR, GT_DIR].map(|d| dir.join(d));
    let listings = dirs.iter().map(|d| list_files(d)).collect::<Result<Vec<_>>>()?;
    let all: BTreeSet<&String> = listings.iter().flatten().collect();
    let offenders: Vec<String> = all
        .iter()
        .filter_map(|name| {
            let missing: Vec<&str> = [PRE_DIR, POST_DIR, GT_DIR]
                .iter()
                .zip(&listings)
                .filter(|(_, l)| !l.contains(*name))
                .map(|(d, _)| *d)
                .collect();
            (!missing.is_empty()).then(|| format!("{name} (missing from {})", missing.join(", ")))
        })
        .collect();
    if !offenders.is_empty() {
        return Err(Error::Ingestion(format!(
            "unmatched files in {}: {}",
            dir.display(),
            offenders.join("; ")
        )));
    }
    let fit = |img: image::DynamicImage, path: &Path, filter| -> Result<image::DynamicImage> {
        let Some(t) = tile_size.map(|t| t as u32) else {
            return Ok(img);
        };
        if img.width() == t && img.height() == t {
            Ok(img)
        } else if resize {
            Ok(img.resize_exact(t, t, filter))
        } else {
            Err(Error::Ingestion(format!(
                "{} is {}x{}, expected {t}x{t} tiles (resize not enabled)",
                path.display(),
                img.width(),
                img.height()
            )))
        }
    };
    listings[0]
        .iter()
        .map(|name| {
            let [a, b, o] = [&dirs[0], &dirs[1], &dirs[2]].map(|d| d.join(name));
            let linear = image::imageops::FilterType::Triangle;
            let nearest = image::imageops::FilterType::Nearest;
            let pre = rgb_to_image(&fit(open_image(&a)?, &a, linear)?.to_rgb8())?;
            let post = rgb_to_image(&fit(open_image(&b)?, &b, linear)?.to_rgb8())?;
            let gt = gray_to_mask(&fit(open_image(&o)?, &o, nearest)?.to_luma8())?;
            let id = Path::new(name)
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| name.clone());
            BiTemporalSample::new(id, pre, post, gt)
        })
        .collect()
}

/// 8-bit RGB raster of a normalized image.
pub fn image_to_rgb(img: &Image) -> Result<RgbImage> {
    let raw = match img.range() {
        RangeTag::Raw0To255 => img.clone(),
        _ => denormalize_image(img)?,
    };
    let (h, w) = (raw.height(), raw.width());
    if raw.channels() != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {}", raw.channels())));
    }
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        image::Rgb([0, 1, 2].map(|c| raw.get(c, y as usize, x as usize).round().clamp(0.0, 255.0) as u8))
    }))
}

pub fn mask_to_gray(mask: &ChangeMask) -> GrayImage {
    GrayImage::from_fn(mask.width() as u32, mask.height() as u32, |x, y| {
        image::Luma([mask.get(y as usize, x as usize) * 255])
    })
}

pub fn save_png(img: &image::DynamicImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// Writes samples as `<root>/<split>/{A,B,OUT}/<id>.png`.
pub fn write_dataset(samples: &[BiTemporalSample], root: &Path, split: Split) -> Result<Vec<PathBuf>> {
    let dir = root.join(split.name());
    let mut written = Vec::new();
    for d in [PRE_DIR, POST_DIR, GT_DIR] {
        let p = dir.join(d);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    for s in samples {
        let file = format!("{}.png", s.id);
        let a = dir.join(PRE_DIR).join(&file);
        let b = dir.join(POST_DIR).join(&file);
        let o = dir.join(GT_DIR).join(&file);
        save_png(&image_to_rgb(&s.pre)?.into(), &a)?;
        save_png(&image_to_rgb(&s.post)?.into(), &b)?;
        save_png(&mask_to_gray(&s.gt).into(), &o)?;
        written.extend([a, b, o]);
    }
    Ok(written)
}

/// Identical flip/rotation applied to both images and the mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Geometric {
    pub hflip: bool,
    pub vflip: bool,
    /// Counter-clockwise quarter turns.
    pub quarter_turns: u8,
}

impl Geometric {
    pub fn random(rng: &mut impl Rng) -> Self {
        Self {
            hflip: rng.random_bool(0.5),
            vflip: rng.random_bool(0.5),
            quarter_turns: rng.random_range(0..4),
        }
    }

    /// Destination of source pixel `(y, x)` and the output size: flips
    /// first, then the turns.
    fn mapping(&self, h: usize, w: usize) -> (usize, usize, impl Fn(usize, usize) -> (usize, usize)) {
        let t = *self;
        let (oh, ow) = if t.quarter_turns % 2 == 1 { (w, h) } else { (h, w) };
        let map = move |y: usize, x: usize| {
            let mut y = if t.vflip { h - 1 - y } else { y };
            let mut x = if t.hflip { w - 1 - x } else { x };
            let mut cw = w;
            for _ in 0..t.quarter_turns % 4 {
                // counter-clockwise: (y, x) of an (.., cw) image lands at (cw - 1 - x, y)
                (y, x) = (cw - 1 - x, y);
                cw = if cw == w { h } else { w };
            }
            (y, x)
        };
        (oh, ow, map)
    }

    pub fn apply_image(&self, img: &Image) -> Image {
        let (h, w, c) = (img.height(), img.width(), img.channels());
        let (oh, ow, map) = self.mapping(h, w);
        let mut values = vec![0.0f32; c * oh * ow];
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = map(y, x);
                for ch in 0..c {
                    values[ch * oh * ow + dy * ow + dx] = img.get(ch, y, x);
                }
            }
        }
        Image::new(oh, ow, c, values, img.range()).expect("permutation keeps values in range")
    }

    pub fn apply_mask(&self, mask: &ChangeMask) -> ChangeMask {
        let (h, w) = (mask.height(), mask.width());
        let (oh, ow, map) = self.mapping(h, w);
        let mut values = vec![0u8; oh * ow];
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = map(y, x);
                values[dy * ow + dx] = mask.get(y, x);
            }
        }
        ChangeMask::new(oh, ow, values).expect("permutation keeps mask binary")
    }

    pub fn apply(&self, s: &BiTemporalSample) -> BiTemporalSample {
        BiTemporalSample {
            id: s.id.clone(),
            pre: self.apply_image(&s.pre),
            post: self.apply_image(&s.post),
            gt: self.apply_mask(&s.gt),
        }
    }
}

/// Random flips (p = 0.5 each) and a uniform quarter-turn rotation.
pub fn augment(sample: &BiTemporalSample, rng: &mut impl Rng) -> BiTemporalSample {
    Geometric::random(rng).apply(sample)
}

/// 4-connected components of changed pixels, as flat pixel indices.
pub fn connected_components(mask: &ChangeMask) -> Vec<Vec<usize>> {
    let (h, w) = (mask.height(), mask.width());
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    for start in 0..h * w {
        if seen[start] || mask.values()[start] == 0 {
            continue;
        }
        let mut comp = Vec::new();
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(i) = stack.pop() {
            comp.push(i);
            let (y, x) = (i / w, i % w);
            let mut push = |j: usize| {
                if !seen[j] && mask.values()[j] == 1 {
                    seen[j] = true;
                    stack.push(j);
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
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

/// Cuts a large scene into `tile`-sized windows every `stride` pixels;
/// windows running past the border are dropped.
pub fn tile_sample(s: &BiTemporalSample, tile: usize, stride: usize) -> Result<Vec<BiTemporalSample>> {
    if tile == 0 || stride == 0 {
        return Err(Error::Config("tile size and stride must be >= 1".into()));
    }
    let (h, w) = (s.height(), s.width());
    let mut out = Vec::new();
    for y0 in (0..h.saturating_sub(tile) + 1).step_by(stride).filter(|y| y + tile <= h) {
        for x0 in (0..w.saturating_sub(tile) + 1).step_by(stride).filter(|x| x + tile <= w) {
            out.push(BiTemporalSample {
                id: format!("{}_{y0:05}_{x0:05}", s.id),
                pre: crop_image(&s.pre, y0, x0, tile),
                post: crop_image(&s.post, y0, x0, tile),
                gt: crop_mask(&s.gt, y0, x0, tile),
            });
        }
    }
    Ok(out)
}

fn crop_image(img: &Image, y0: usize, x0: usize, t: usize) -> Image {
    let c = img.channels();
    let mut values = Vec::with_capacity(c * t * t);
    for ch in 0..c {
        for y in y0..y0 + t {
            for x in x0..x0 + t {
                values.push(img.get(ch, y, x));
            }
        }
    }
    Image::new(t, t, c, values, img.range()).expect("crop of a valid image")
}

fn crop_mask(m: &ChangeMask, y0: usize, x0: usize, t: usize) -> ChangeMask {
    let values = (y0..y0 + t).flat_map(|y| (x0..x0 + t).map(move |x| (y, x))).map(|(y, x)| m.get(y, x)).collect();
    ChangeMask::new(t, t, values).expect("crop of a valid mask")
}

/// `crops_per_instance` tiles per connected changed component, each
/// containing at least one of its pixels. A component wider than the tile
/// gets windows centred on its pixel nearest the bounding-box centre.
pub fn instance_crop_augment(
    dataset: &[BiTemporalSample],
    crops_per_instance: usize,
    tile_size: usize,
    rng: &mut impl Rng,
) -> Result<Vec<BiTemporalSample>> {
    let t = tile_size;
    let mut out = Vec::new();
    for s in dataset {
        let (h, w) = (s.height(), s.width());
        let comps = connected_components(&s.gt);
        if comps.is_empty() {
            continue;
        }
        if h < t || w < t {
            return Err(Error::Config(format!(
                "sample `{}` is {h}x{w}, smaller than the {t}px crop",
                s.id
            )));
        }
        for (ci, comp) in comps.iter().enumerate() {
            let ys = comp.iter().map(|i| i / w);
            let xs = comp.iter().map(|i| i % w);
            let (ymin, ymax) = (ys.clone().min().unwrap(), ys.max().unwrap());
            let (xmin, xmax) = (xs.clone().min().unwrap(), xs.max().unwrap());
            let oversized = ymax - ymin + 1 > t || xmax - xmin + 1 > t;
            let centre = {
                let (cy, cx) = ((ymin + ymax) as f64 / 2.0, (xmin + xmax) as f64 / 2.0);
                *comp
                    .iter()
                    .min_by(|&&a, &&b| {
                        let d = |i: usize| ((i / w) as f64 - cy).powi(2) + ((i % w) as f64 - cx).powi(2);
                        d(a).total_cmp(&d(b))
                    })
                    .unwrap()
            };
            for j in 0..crops_per_instance {
                let (y0, x0) = if oversized {
                    let (py, px) = (centre / w, centre % w);
                    (
                        py.saturating_sub(t / 2).min(h - t),
                        px.saturating_sub(t / 2).min(w - t),
                    )
                } else {
                    let p = comp[rng.random_range(0..comp.len())];
                    let (py, px) = (p / w, p % w);
                    let y0 = rng.random_range(py.saturating_sub(t - 1)..=py.min(h - t));
                    let x0 = rng.random_range(px.saturating_sub(t - 1)..=px.min(w - t));
                    (y0, x0)
                };
                out.push(BiTemporalSample {
                    id: format!("{}_c{ci}_{j}", s.id),
                    pre: crop_image(&s.pre, y0, x0, t),
                    post: crop_image(&s.post, y0, x0, t),
                    gt: crop_mask(&s.gt, y0, x0, t),
                });
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_samples: usize,
    pub tile_size: usize,
    pub shapes_min: usize,
    pub shapes_max: usize,
    /// Probability that a shape exists in only one of the two epochs.
    pub change_rate: f64,
    /// Scales every per-domain photometric transform.
    pub shift_strength: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_samples: 16,
            tile_size: 64,
            shapes_min: 3,
            shapes_max: 6,
            change_rate: 0.5,
            shift_strength: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.change_rate) {
            return Err(Error::Config(format!("change rate must lie in [0, 1], got {}", self.change_rate)));
        }
        if !(self.shift_strength.is_finite() && self.shift_strength >= 0.0) {
            return Err(Error::Config(format!("shift strength must be >= 0, got {}", self.shift_strength)));
        }
        if self.tile_size < 8 {
            return Err(Error::Config(format!("tile size {} is too small", self.tile_size)));
        }
        if self.shapes_min > self.shapes_max {
            return Err(Error::Config("shapes_min exceeds shapes_max".into()));
        }
        Ok(())
    }
}

/// Minimum per-channel contrast between a shape and the background.
const MIN_CONTRAST: f64 = 70.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SceneShape {
    /// Vertices `(x, y)` in pixel units, convex, counter-clockwise or not.
    pub polygon: Vec<(f64, f64)>,
    pub color: [f64; 3],
    pub in_pre: bool,
    pub in_post: bool,
}

/// A generated sample with the geometry it was drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub shapes: Vec<SceneShape>,
    pub sample: BiTemporalSample,
}

/// Pixel-centre test against a convex polygon.
pub fn polygon_contains(poly: &[(f64, f64)], x: usize, y: usize) -> bool {
    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
    let mut sign = 0.0f64;
    for i in 0..poly.len() {
        let (ax, ay) = poly[i];
        let (bx, by) = poly[(i + 1) % poly.len()];
        let cross = (bx - ax) * (py - ay) - (by - ay) * (px - ax);
        if cross != 0.0 {
            if sign != 0.0 && cross.signum() != sign {
                return false;
            }
            sign = cross.signum();
        }
    }
    true
}

fn random_polygon(rng: &mut impl Rng, t: f64) -> Vec<(f64, f64)> {
    let size = rng.random_range(t / 8.0..t / 3.0);
    let cx = rng.random_range(size / 2.0..t - size / 2.0);
    let cy = rng.random_range(size / 2.0..t - size / 2.0);
    let r = size / 2.0;
    match rng.random_range(0..3) {
        0 => {
            let hw = r * rng.random_range(0.6..1.0);
            let hh = r * rng.random_range(0.6..1.0);
            vec![(cx - hw, cy - hh), (cx + hw, cy - hh), (cx + hw, cy + hh), (cx - hw, cy + hh)]
        }
        k => {
            // triangle or convex quadrilateral: sorted angles on a circle
            let n = if k == 1 { 3 } else { 4 };
            let base = rng.random_range(0.0..std::f64::consts::TAU);
            (0..n)
                .map(|i| {
                    let a = base + i as f64 * std::f64::consts::TAU / n as f64 + rng.random_range(-0.3..0.3);
                    (cx + r * a.cos(), cy + r * a.sin())
                })
                .collect()
        }
    }
}

/// Hue rotation about the grey axis.
fn hue_matrix(degrees: f64) -> [[f64; 3]; 3] {
    let (s, c) = degrees.to_radians().sin_cos();
    let k = (1.0 - c) / 3.0;
    let q = (1.0f64 / 3.0).sqrt() * s;
    [[c + k, k - q, k + q], [k + q, c + k, k - q], [k - q, k + q, c + k]]
}

/// Photometric style of one domain for one sample.
#[derive(Debug, Clone, Copy)]
struct Style {
    hue: f64,
    brightness: f64,
    gains: [f64; 3],
    noise: f64,
}

impl Style {
    /// `sign` +1 for the pre-event domain, -1 for the post-event domain;
    /// the two domains draw from mirrored, disjoint ranges.
    fn draw(rng: &mut impl Rng, strength: f64, sign: f64) -> Self {
        let hue = sign * strength * rng.random_range(20.0..60.0);
        let brightness = sign * strength * rng.random_range(15.0..45.0);
        let g = sign * strength * rng.random_range(0.08..0.22);
        Self {
            hue,
            brightness,
            gains: [1.0 + g, 1.0, 1.0 - g],
            noise: 6.0 * strength,
        }
    }

    fn apply(&self, raw: &[f64], h: usize, w: usize, rng: &mut impl Rng) -> Vec<f32> {
        let m = hue_matrix(self.hue);
        let n = h * w;
        let normal = Normal::new(0.0, self.noise.max(0.0)).expect("finite sigma");
        let mut out = vec![0.0f32; 3 * n];
        for i in 0..n {
            let px = [raw[i], raw[n + i], raw[2 * n + i]];
            for c in 0..3 {
                let rotated: f64 = (0..3).map(|j| m[c][j] * px[j]).sum();
                let mut v = rotated * self.gains[c] + self.brightness;
                if self.noise > 0.0 {
                    v += normal.sample(rng);
                }
                out[c * n + i] = v.round().clamp(0.0, 255.0) as f32;
            }
        }
        out
    }
}

fn sample_rng(seed: u64, index: usize, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed.wrapping_add(index as u64));
    r.set_stream(stream);
    r
}

/// Sample `index` of the benchmark with its generating geometry.
pub fn synthesize_scene(cfg: &SyntheticConfig, index: usize) -> Result<Scene> {
    cfg.validate()?;
    let t = cfg.tile_size;
    let n = t * t;
    let mut geo = sample_rng(cfg.seed, index, 0);
    let mut sty = sample_rng(cfg.seed, index, 1);

    let bg: [f64; 3] = std::array::from_fn(|_| geo.random_range(60.0..196.0));
    let freq: [(f64, f64, f64); 3] = std::array::from_fn(|_| {
        (
            geo.random_range(0.05..0.4),
            geo.random_range(0.05..0.4),
            geo.random_range(0.0..std::f64::consts::TAU),
        )
    });
    let mut texture = vec![0.0f64; n];
    for (i, v) in texture.iter_mut().enumerate() {
        let (y, x) = ((i / t) as f64, (i % t) as f64);
        *v = freq.iter().map(|(fx, fy, ph)| 5.0 * (fx * x + fy * y + ph).sin()).sum::<f64>()
            + geo.random_range(-6.0..6.0);
    }

    let count = geo.random_range(cfg.shapes_min..=cfg.shapes_max);
    let mut owner: Vec<Option<usize>> = vec![None; n];
    let mut shapes: Vec<SceneShape> = Vec::new();
    for _ in 0..count {
        for _attempt in 0..50 {
            let poly = random_polygon(&mut geo, t as f64);
            let pixels: Vec<usize> = (0..n).filter(|&i| polygon_contains(&poly, i % t, i / t)).collect();
            if pixels.is_empty() {
                continue;
            }
            // keep a one-pixel gap to every existing shape
            let clash = pixels.iter().any(|&i| {
                let (y, x) = ((i / t) as isize, (i % t) as isize);
                (-1..=1).any(|dy| {
                    (-1..=1).any(|dx| {
                        let (ny, nx) = (y + dy, x + dx);
                        ny >= 0 && nx >= 0 && (ny as usize) < t && (nx as usize) < t && owner[ny as usize * t + nx as usize].is_some()
                    })
                })
            });
            if clash {
                continue;
            }
            let mut color: [f64; 3] = std::array::from_fn(|_| geo.random_range(0.0..255.0));
            let c = geo.random_range(0..3);
            if (color[c] - bg[c]).abs() < MIN_CONTRAST {
                color[c] = if bg[c] < 128.0 { bg[c] + MIN_CONTRAST + geo.random_range(0.0..40.0) } else { bg[c] - MIN_CONTRAST - geo.random_range(0.0..40.0) };
            }
            let (in_pre, in_post) = if geo.random_bool(cfg.change_rate) {
                if geo.random_bool(0.5) {
                    (true, false)
                } else {
                    (false, true)
                }
            } else {
                (true, true)
            };
            for &i in &pixels {
                owner[i] = Some(shapes.len());
            }
            shapes.push(SceneShape {
                polygon: poly,
                color,
                in_pre,
                in_post,
            });
            break;
        }
    }

    let render = |epoch_pre: bool| -> Vec<f64> {
        let mut raw = vec![0.0f64; 3 * n];
        for i in 0..n {
            let present = owner[i].filter(|&k| if epoch_pre { shapes[k].in_pre } else { shapes[k].in_post });
            for c in 0..3 {
                raw[c * n + i] = match present {
                    Some(k) => shapes[k].color[c] + 0.3 * texture[i],
                    None => bg[c] + texture[i],
                };
            }
        }
        raw
    };
    let gt: Vec<u8> = owner
        .iter()
        .map(|o| o.map_or(0, |k| u8::from(shapes[k].in_pre != shapes[k].in_post)))
        .collect();

    let s = cfg.shift_strength;
    let pre_style = Style::draw(&mut sty, s, 1.0);
    let post_style = Style::draw(&mut sty, s, -1.0);
    let pre_raw = pre_style.apply(&render(true), t, t, &mut sty);
    let post_raw = post_style.apply(&render(false), t, t, &mut sty);
    let pre = normalize_image(&Image::new(t, t, 3, pre_raw, RangeTag::Raw0To255)?)?;
    let post = normalize_image(&Image::new(t, t, 3, post_raw, RangeTag::Raw0To255)?)?;
    let sample = BiTemporalSample::new(format!("synth_{index:05}"), pre, post, ChangeMask::new(t, t, gt)?)?;
    Ok(Scene { shapes, sample })
}

/// Normalized samples with ground truth known by construction.
pub fn synthesize_benchmark(cfg: &SyntheticConfig) -> Result<Vec<BiTemporalSample>> {
    (0..cfg.n_samples)
        .map(|i| synthesize_scene(cfg, i).map(|s| s.sample))
        .collect()
}

/// Benchmark written to disk plus a manifest of the generator config.
pub fn write_synthetic(cfg: &SyntheticConfig, root: &Path, split: Split, config_hash: &str) -> Result<Vec<PathBuf>> {
    let samples = synthesize_benchmark(cfg)?;
    let mut files = write_dataset(&samples, root, split)?;
    let manifest = root.join(split.name()).join("manifest.toml");
    let mut doc = BTreeMap::new();
    doc.insert("synth", toml::Value::try_from(cfg).map_err(|e| Error::Config(e.to_string()))?);
    doc.insert("config_hash", toml::Value::String(config_hash.to_string()));
    let text = toml::to_string(&doc).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(&manifest, text).map_err(|e| Error::io(&manifest, e))?;
    files.push(manifest);
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(h: usize, w: usize, seed: u64) -> BiTemporalSample {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let img = |r: &mut ChaCha8Rng| {
            Image::new(h, w, 3, (0..3 * h * w).map(|_| r.random_range(-1.0f32..=1.0)).collect(), RangeTag::SignedUnit).unwrap()
        };
        let pre = img(&mut r);
        let post = img(&mut r);
        let gt = ChangeMask::new(h, w, (0..h * w).map(|_| r.random_range(0..=1)).collect()).unwrap();
        BiTemporalSample::new("s", pre, post, gt).unwrap()
    }

    #[test]
    fn rotation_has_order_four() {
        let s = sample(4, 6, 1);
        let r = Geometric {
            quarter_turns: 1,
            ..Default::default()
        };
        let once = r.apply(&s);
        assert_eq!((once.height(), once.width()), (6, 4));
        let back = r.apply(&r.apply(&r.apply(&once)));
        assert_eq!(back, s);
    }

    #[test]
    fn quarter_turn_direction() {
        // [[1, 2], [3, 4]] turned counter-clockwise is [[2, 4], [1, 3]]
        let m = ChangeMask::new(2, 2, vec![0, 1, 0, 1]).unwrap();
        let r = Geometric {
            quarter_turns: 1,
            ..Default::default()
        };
        assert_eq!(r.apply_mask(&m).values(), &[1, 1, 0, 0]);
    }

    proptest! {
        #[test]
        fn flips_are_involutions(seed in 0u64..1000, h in 1usize..6, v in proptest::bool::ANY) {
            let s = sample(3, 5, seed);
            let g = Geometric { hflip: h % 2 == 0, vflip: v, quarter_turns: 0 };
            prop_assert_eq!(g.apply(&g.apply(&s)), s);
        }

        #[test]
        fn augmentation_preserves_change_count(seed in 0u64..1000) {
            let s = sample(5, 7, seed);
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let a = augment(&s, &mut r);
            prop_assert_eq!(a.gt.count_changed(), s.gt.count_changed());
            a.validate().unwrap();
        }
    }

    #[test]
    fn scene_gt_is_occupancy_xor() {
        let cfg = SyntheticConfig {
            n_samples: 1,
            tile_size: 32,
            ..Default::default()
        };
        for i in 0..5 {
            let scene = synthesize_scene(&cfg, i).unwrap();
            for y in 0..32 {
                for x in 0..32 {
                    let pre = scene.shapes.iter().any(|s| s.in_pre && polygon_contains(&s.polygon, x, y));
                    let post = scene.shapes.iter().any(|s| s.in_post && polygon_contains(&s.polygon, x, y));
                    assert_eq!(scene.sample.gt.get(y, x), u8::from(pre != post));
                }
            }
        }
    }

    #[test]
    fn zero_change_rate_gives_empty_masks() {
        let cfg = SyntheticConfig {
            n_samples: 6,
            change_rate: 0.0,
            tile_size: 32,
            ..Default::default()
        };
        assert!(synthesize_benchmark(&cfg).unwrap().iter().all(|s| s.gt.count_changed() == 0));
    }

    #[test]
    fn components_and_crops() {
        let mut v = vec![0u8; 100];
        v[11] = 1;
        v[12] = 1;
        v[88] = 1;
        let gt = ChangeMask::new(10, 10, v).unwrap();
        assert_eq!(connected_components(&gt).len(), 2);
        let mut s = sample(10, 10, 3);
        s.gt = gt;
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let crops = instance_crop_augment(&[s.clone()], 3, 4, &mut r).unwrap();
        assert_eq!(crops.len(), 6);
        assert!(crops.iter().all(|c| c.gt.count_changed() >= 1 && c.height() == 4));
        s.gt = ChangeMask::zeros(10, 10);
        assert!(instance_crop_augment(&[s], 3, 4, &mut r).unwrap().is_empty());
    }

    #[test]
    fn tiling_drops_partial_windows() {
        let s = sample(10, 9, 7);
        let tiles = tile_sample(&s, 4, 4).unwrap();
        assert_eq!(tiles.len(), 4);
        assert_eq!(tiles[3].id, "s_00004_00004");
        assert_eq!(tiles[3].gt.get(0, 0), s.gt.get(4, 4));
        assert_eq!(tile_sample(&s, 4, 2).unwrap().len(), 4 * 3);
        assert!(tile_sample(&s, 11, 1).unwrap().is_empty());
    }

    #[test]
    fn oversized_component_is_centre_cropped() {
        let mut s = sample(8, 8, 4);
        s.gt = ChangeMask::new(8, 8, vec![1; 64]).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let crops = instance_crop_augment(&[s], 2, 4, &mut r).unwrap();
        assert_eq!(crops.len(), 2);
        assert_eq!((&crops[0].pre, &crops[0].gt), (&crops[1].pre, &crops[1].gt));
    }
}

//! Image datasets: Omniglot ingestion, the synthetic glyph stand-in, the binary
//! cache both are stored in, and the train/test class split.
//!
//! Images are square, stored as `u8` planes, flattened row-major, and scaled
//! to `[0, 1]` (divided by 255) when read.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use crate::codec::{Decoder, Encoder};
use crate::error::{Error, Result};
use crate::tensor::Rng;

pub const DATASET_MAGIC: &[u8; 8] = b"AOSLD001";
pub const IMAGE_SIDE: usize = 28;
pub const IMAGE_DIM: usize = IMAGE_SIDE * IMAGE_SIDE;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassEntry {
    pub id: u32,
    pub name: String,
    /// Index of the first example in the pixel store.
    pub first: usize,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetCache {
    image_side: usize,
    classes: Vec<ClassEntry>,
    pixels: Vec<u8>,
}

impl DatasetCache {
    /// Builds a cache from `(id, name, examples)` triples; every example must
    /// hold `image_side²` bytes.
    pub fn new(image_side: usize, classes: Vec<(u32, String, Vec<Vec<u8>>)>) -> Result<Self> {
        if image_side == 0 {
            return Err(Error::Config("image side must be positive".into()));
        }
        let plane = image_side * image_side;
        let mut entries = Vec::with_capacity(classes.len());
        let mut pixels = Vec::new();
        let mut seen = HashSet::new();
        let mut first = 0;
        for (id, name, examples) in classes {
            if !seen.insert(id) {
                return Err(Error::Config(format!("duplicate class id {id}")));
            }
            if examples.is_empty() {
                return Err(Error::Config(format!("class {id} ({name}) has no examples")));
            }
            for ex in &examples {
                if ex.len() != plane {
                    return Err(Error::dim(
                        "DatasetCache",
                        format!("{image_side}x{image_side} image"),
                        format!("{} bytes", ex.len()),
                    ));
                }
                pixels.extend_from_slice(ex);
            }
            entries.push(ClassEntry {
                id,
                name,
                first,
                count: examples.len(),
            });
            first += examples.len();
        }
        Ok(DatasetCache {
            image_side,
            classes: entries,
            pixels,
        })
    }

    pub fn image_side(&self) -> usize {
        self.image_side
    }

    pub fn image_dim(&self) -> usize {
        self.image_side * self.image_side
    }

    pub fn classes(&self) -> &[ClassEntry] {
        &self.classes
    }

    pub fn class_count(&self) -> usize {
        self.classes.len()
    }

    pub fn image_count(&self) -> usize {
        self.pixels.len() / self.image_dim()
    }

    pub fn class_ids(&self) -> Vec<u32> {
        self.classes.iter().map(|c| c.id).collect()
    }

    /// Raw bytes of one example.
    pub fn raw(&self, class: usize, example: usize) -> &[u8] {
        let entry = &self.classes[class];
        assert!(example < entry.count, "example index out of range");
        let plane = self.image_dim();
        let start = (entry.first + example) * plane;
        &self.pixels[start..start + plane]
    }

    /// Normalized example, optionally rotated by `k` quarter turns.
    pub fn image(&self, class: usize, example: usize, k: u8) -> Vec<f64> {
        let raw = rotate90(self.raw(class, example), self.image_side, k);
        raw.into_iter().map(|b| f64::from(b) / 255.0).collect()
    }

    pub fn index_of(&self, id: u32) -> Option<usize> {
        self.classes.iter().position(|c| c.id == id)
    }

    pub fn view(&self, ids: &[u32]) -> Result<DatasetView<'_>> {
        let mut classes = Vec::with_capacity(ids.len());
        for &id in ids {
            classes.push(
                self.index_of(id)
                    .ok_or_else(|| Error::Config(format!("class id {id} not in dataset")))?,
            );
        }
        Ok(DatasetView { cache: self, classes })
    }

    pub fn full_view(&self) -> DatasetView<'_> {
        DatasetView {
            cache: self,
            classes: (0..self.classes.len()).collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::new(DATASET_MAGIC);
        enc.u32(self.image_side as u32);
        enc.u32(self.classes.len() as u32);
        for c in &self.classes {
            enc.u32(c.id);
            enc.u16(c.name.len() as u16);
            enc.bytes(c.name.as_bytes());
            enc.u32(c.count as u32);
        }
        enc.bytes(&self.pixels);
        enc.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut dec = Decoder::open(bytes, DATASET_MAGIC, "dataset cache")?;
        let side = dec.u32()? as usize;
        let n = dec.u32()? as usize;
        if side == 0 {
            return Err(Error::Format("dataset cache: zero image side".into()));
        }
        let mut classes = Vec::with_capacity(n.min(1 << 16));
        let mut first = 0usize;
        for _ in 0..n {
            let id = dec.u32()?;
            let len = dec.u16()? as usize;
            let name = std::str::from_utf8(dec.bytes(len)?)
                .map_err(|e| Error::Format(format!("dataset cache: class name: {e}")))?
                .to_owned();
            let count = dec.u32()? as usize;
            if count == 0 {
                return Err(Error::Format(format!("dataset cache: class {id} is empty")));
            }
            classes.push(ClassEntry {
                id,
                name,
                first,
                count,
            });
            first += count;
        }
        let need = first
            .checked_mul(side * side)
            .ok_or_else(|| Error::Format("dataset cache: size overflow".into()))?;
        if need != dec.remaining() {
            return Err(Error::Format(format!(
                "dataset cache: expected {need} pixel bytes, found {}",
                dec.remaining()
            )));
        }
        let pixels = dec.bytes(need)?.to_vec();
        dec.finish()?;
        let mut seen = HashSet::new();
        if let Some(dup) = classes.iter().find(|c| !seen.insert(c.id)) {
            return Err(Error::Format(format!("dataset cache: duplicate class id {}", dup.id)));
        }
        Ok(DatasetCache {
            image_side: side,
            classes,
            pixels,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// A subset of classes of a cache, indexed `0..len()`.
#[derive(Clone, Debug)]
pub struct DatasetView<'a> {
    cache: &'a DatasetCache,
    classes: Vec<usize>,
}

impl<'a> DatasetView<'a> {
    pub fn cache(&self) -> &'a DatasetCache {
        self.cache
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn image_dim(&self) -> usize {
        self.cache.image_dim()
    }

    pub fn image_side(&self) -> usize {
        self.cache.image_side()
    }

    pub fn class_id(&self, i: usize) -> u32 {
        self.cache.classes[self.classes[i]].id
    }

    pub fn example_count(&self, i: usize) -> usize {
        self.cache.classes[self.classes[i]].count
    }

    pub fn image(&self, i: usize, example: usize, k: u8) -> Vec<f64> {
        self.cache.image(self.classes[i], example, k)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSplit {
    pub seed: u64,
    pub train_ids: Vec<u32>,
    pub test_ids: Vec<u32>,
}

impl ClassSplit {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let split: ClassSplit = serde_json::from_slice(&std::fs::read(path)?)?;
        let train: HashSet<_> = split.train_ids.iter().collect();
        if split.test_ids.iter().any(|id| train.contains(id)) {
            return Err(Error::Config("split file has overlapping train/test ids".into()));
        }
        Ok(split)
    }

    pub fn views<'a>(&self, cache: &'a DatasetCache) -> Result<(DatasetView<'a>, DatasetView<'a>)> {
        Ok((cache.view(&self.train_ids)?, cache.view(&self.test_ids)?))
    }
}

/// Uniformly random disjoint split with `n_train` training classes.
pub fn split_classes(cache: &DatasetCache, seed: u64, n_train: usize) -> Result<ClassSplit> {
    let total = cache.class_count();
    if n_train == 0 || n_train >= total {
        return Err(Error::Config(format!(
            "n_train must be in 1..{total}, got {n_train}"
        )));
    }
    let mut ids = cache.class_ids();
    Rng::new(seed).shuffle(&mut ids);
    let test_ids = ids.split_off(n_train);
    Ok(ClassSplit {
        seed,
        train_ids: ids,
        test_ids,
    })
}

/// Counter-clockwise rotation by `k` quarter turns of a square row-major image.
///
/// With `(x, y)` = (column, row), the top-left pixel `(0, 0)` moves to the
/// bottom-left `(0, side-1)` for `k = 1`.
pub fn rotate90<T: Copy>(image: &[T], side: usize, k: u8) -> Vec<T> {
    assert_eq!(image.len(), side * side, "rotate90 needs a square image");
    let mut out = image.to_vec();
    for _ in 0..(k % 4) {
        let src = out.clone();
        for r in 0..side {
            for c in 0..side {
                out[r * side + c] = src[c * side + (side - 1 - r)];
            }
        }
    }
    out
}

/// Overlap weights for box-filter resampling of `n_in` samples onto `n_out`.
fn box_weights(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let lo = o as f64 * scale;
            let hi = (o + 1) as f64 * scale;
            let mut taps = Vec::new();
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(n_in);
            for i in first..last {
                let overlap = (hi.min((i + 1) as f64) - lo.max(i as f64)).max(0.0);
                if overlap > 0.0 {
                    taps.push((i, overlap / scale));
                }
            }
            taps
        })
        .collect()
}

/// Area-averaging resize of a `width × height` grayscale image.
pub fn area_resize(src: &[u8], width: usize, height: usize, out_side: usize) -> Vec<u8> {
    assert_eq!(src.len(), width * height);
    let wx = box_weights(width, out_side);
    let wy = box_weights(height, out_side);
    // Horizontal pass, then vertical.
    let mut tmp = vec![0.0f64; height * out_side];
    for y in 0..height {
        for (ox, taps) in wx.iter().enumerate() {
            tmp[y * out_side + ox] = taps
                .iter()
                .map(|&(x, w)| w * f64::from(src[y * width + x]))
                .sum();
        }
    }
    let mut out = vec![0u8; out_side * out_side];
    for (oy, taps) in wy.iter().enumerate() {
        for ox in 0..out_side {
            let v: f64 = taps.iter().map(|&(y, w)| w * tmp[y * out_side + ox]).sum();
            out[oy * out_side + ox] = v.round().clamp(0.0, 255.0) as u8;
        }
    }
    out
}

/// Decodes one character image to `IMAGE_SIDE²` bytes.
fn load_glyph(path: &Path) -> std::result::Result<Vec<u8>, String> {
    let img = image::open(path).map_err(|e| e.to_string())?.to_luma8();
    let (w, h) = img.dimensions();
    if w == 0 || h == 0 {
        return Err("empty image".into());
    }
    Ok(area_resize(img.as_raw(), w as usize, h as usize, IMAGE_SIDE))
}

/// Walks `source_dir` for directories holding `*.png` files (one directory per
/// character class), decodes and box-filters every image to 28×28, and writes
/// the cache to `out_path`.
///
/// Classes are numbered in sorted path order, so re-ingestion is byte-identical.
pub fn ingest_omniglot(source_dir: impl AsRef<Path>, out_path: impl AsRef<Path>) -> Result<DatasetCache> {
    let root = source_dir.as_ref();
    if !root.is_dir() {
        return Err(Error::Ingest(vec![(root.to_path_buf(), "not a directory".into())]));
    }
    let mut failures: Vec<(PathBuf, String)> = Vec::new();
    let mut class_dirs: Vec<(String, Vec<PathBuf>)> = Vec::new();
    let walker = WalkDir::new(root).sort_by_file_name().into_iter();
    for entry in walker {
        let entry = match entry {
            Ok(e) => e,
            Err(e) => {
                let path = e.path().map(Path::to_path_buf).unwrap_or_else(|| root.to_path_buf());
                failures.push((path, e.to_string()));
                continue;
            }
        };
        if !entry.file_type().is_dir() {
            continue;
        }
        let mut pngs: Vec<PathBuf> = match std::fs::read_dir(entry.path()) {
            Ok(rd) => rd
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    p.is_file()
                        && p.extension()
                            .is_some_and(|x| x.eq_ignore_ascii_case("png"))
                })
                .collect(),
            Err(e) => {
                failures.push((entry.path().to_path_buf(), e.to_string()));
                continue;
            }
        };
        if pngs.is_empty() {
            continue;
        }
        pngs.sort();
        let rel = entry.path().strip_prefix(root).unwrap_or(entry.path());
        let name = rel
            .components()
            .map(|c| c.as_os_str().to_string_lossy().into_owned())
            .collect::<Vec<_>>()
            .join("/");
        class_dirs.push((name, pngs));
    }
    if class_dirs.is_empty() && failures.is_empty() {
        return Err(Error::Ingest(vec![(root.to_path_buf(), "no directories with .png images".into())]));
    }
    let mut classes = Vec::with_capacity(class_dirs.len());
    for (id, (name, pngs)) in class_dirs.into_iter().enumerate() {
        let mut examples = Vec::with_capacity(pngs.len());
        for p in pngs {
            match load_glyph(&p) {
                Ok(px) => examples.push(px),
                Err(why) => failures.push((p, why)),
            }
        }
        classes.push((id as u32, name, examples));
    }
    if !failures.is_empty() {
        return Err(Error::Ingest(failures));
    }
    let cache = DatasetCache::new(IMAGE_SIDE, classes)?;
    cache.save(out_path)?;
    Ok(cache)
}

/// Jitter applied when drawing synthetic examples.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    /// Examples are shifted by up to this many pixels along each axis.
    pub max_shift: i32,
    /// Standard deviation of additive per-pixel Gaussian noise.
    pub noise_sigma: f64,
    pub vertices: std::ops::RangeInclusive<usize>,
    /// Half-width of the rendered stroke in pixels.
    pub stroke_radius: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            max_shift: 1,
            noise_sigma: 0.05,
            vertices: 3..=5,
            stroke_radius: 1.0,
        }
    }
}

fn segment_distance(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
}

/// Renders a polyline with a one-pixel soft edge.
fn rasterize(vertices: &[(f64, f64)], radius: f64, side: usize) -> Vec<f64> {
    let mut img = vec![0.0; side * side];
    for r in 0..side {
        for c in 0..side {
            let (px, py) = (c as f64 + 0.5, r as f64 + 0.5);
            let d = vertices
                .windows(2)
                .map(|w| segment_distance(px, py, w[0], w[1]))
                .fold(f64::INFINITY, f64::min);
            img[r * side + c] = (radius + 0.5 - d).clamp(0.0, 1.0);
        }
    }
    img
}

/// Procedural stand-in for Omniglot with the default jitter.
pub fn synth_glyphs(rng: &mut Rng, n_classes: usize, n_examples: usize) -> Result<DatasetCache> {
    synth_glyphs_with(rng, n_classes, n_examples, &SynthConfig::default())
}

/// Each class is a random polyline; each example is that pattern shifted by a
/// few pixels with clamped Gaussian pixel noise.
pub fn synth_glyphs_with(
    rng: &mut Rng,
    n_classes: usize,
    n_examples: usize,
    cfg: &SynthConfig,
) -> Result<DatasetCache> {
    if n_classes < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {n_classes}")));
    }
    if n_examples == 0 {
        return Err(Error::Config("need at least one example per class".into()));
    }
    let side = IMAGE_SIDE;
    let margin = 4.0 + cfg.max_shift.max(0) as f64;
    let (lo, hi) = (margin, side as f64 - margin);
    let (vmin, vmax) = (*cfg.vertices.start(), *cfg.vertices.end());
    if vmin < 2 || vmax < vmin {
        return Err(Error::Config("polyline needs at least two vertices".into()));
    }
    let mut classes = Vec::with_capacity(n_classes);
    for class in 0..n_classes {
        let nv = vmin + rng.choice(vmax - vmin + 1)?;
        let mut vertices = Vec::with_capacity(nv);
        for _ in 0..nv {
            vertices.push((rng.uniform(lo, hi)?, rng.uniform(lo, hi)?));
        }
        let pattern = rasterize(&vertices, cfg.stroke_radius, side);
        let mut examples = Vec::with_capacity(n_examples);
        for _ in 0..n_examples {
            let span = (2 * cfg.max_shift.max(0) + 1) as usize;
            let dx = rng.choice(span)? as i32 - cfg.max_shift.max(0);
            let dy = rng.choice(span)? as i32 - cfg.max_shift.max(0);
            let mut px = vec![0u8; side * side];
            for r in 0..side as i32 {
                for c in 0..side as i32 {
                    let (sr, sc) = (r - dy, c - dx);
                    let base = if (0..side as i32).contains(&sr) && (0..side as i32).contains(&sc) {
                        pattern[sr as usize * side + sc as usize]
                    } else {
                        0.0
                    };
                    let noise = if cfg.noise_sigma > 0.0 {
                        rng.normal(0.0, cfg.noise_sigma)
                    } else {
                        0.0
                    };
                    px[r as usize * side + c as usize] =
                        ((base + noise).clamp(0.0, 1.0) * 255.0).round() as u8;
                }
            }
            examples.push(px);
        }
        classes.push((class as u32, format!("synth/{class:04}"), examples));
    }
    DatasetCache::new(side, classes)
}

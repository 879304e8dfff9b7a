//! Dataset construction: TT100K-style annotations, sign cropping, templated
//! descriptions, the stratified 2:1 split and a synthetic long-tail sign
//! generator.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::boxes::BBox;
use crate::error::{contract, dim_err, Error, Result};
use crate::metrics::{GroundTruth, Stratum};
use crate::tensor::Tensor;
use crate::tokenizer::{Glyph, KnowledgeBase, Shape};

// ---------------------------------------------------------------- images

/// 8-bit RGB raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height * 3 {
            return dim_err("rgb image", &[height, width, 3], &[data.len()]);
        }
        Ok(RgbImage { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        RgbImage { width, height, data: rgb.iter().copied().cycle().take(width * height * 3).collect() }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Sub-image `[x0, x1) × [y0, y1)`.
    pub fn crop(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> Result<Self> {
        if x0 >= x1 || y0 >= y1 || x1 > self.width || y1 > self.height {
            return contract(format!("crop [{x0},{y0},{x1},{y1}) outside {}x{} image", self.width, self.height));
        }
        let mut data = Vec::with_capacity((x1 - x0) * (y1 - y0) * 3);
        for y in y0..y1 {
            let s = (y * self.width + x0) * 3;
            data.extend_from_slice(&self.data[s..s + (x1 - x0) * 3]);
        }
        RgbImage::new(x1 - x0, y1 - y0, data)
    }

    /// Bilinear resampling with pixel-center alignment.
    pub fn resize(&self, width: usize, height: usize) -> Self {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let mut out = RgbImage::filled(width, height, [0, 0, 0]);
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        for y in 0..height {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let (y0, ty) = (fy.floor() as usize, fy - fy.floor());
            let y1 = (y0 + 1).min(self.height - 1);
            for x in 0..width {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let (x0, tx) = (fx.floor() as usize, fx - fx.floor());
                let x1 = (x0 + 1).min(self.width - 1);
                let mut px = [0u8; 3];
                for (c, p) in px.iter_mut().enumerate() {
                    let v = |xx: usize, yy: usize| self.get(xx, yy)[c] as f64;
                    let top = v(x0, y0) * (1.0 - tx) + v(x1, y0) * tx;
                    let bot = v(x0, y1) * (1.0 - tx) + v(x1, y1) * tx;
                    *p = (top * (1.0 - ty) + bot * ty).round().clamp(0.0, 255.0) as u8;
                }
                out.put(x, y, px);
            }
        }
        out
    }

    /// `[H×W×3]` tensor scaled to `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.height, self.width, 3], self.data.iter().map(|&v| v as f64 / 255.0).collect())
            .expect("image dims are positive")
    }

    pub fn write_ppm(&self, w: &mut impl Write) -> Result<()> {
        write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
        w.write_all(&self.data)?;
        Ok(())
    }

    pub fn save_ppm(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_ppm(&mut f)?;
        f.flush()?;
        Ok(())
    }

    /// Binary PPM (P6) with maxval 255; `#` comments allowed in the header.
    pub fn read_ppm(r: &mut impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Parse("truncated PPM header".into()));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        if fields[0] != "P6" {
            return Err(Error::Parse(format!("unsupported PPM magic {:?}", fields[0])));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Parse(format!("bad PPM header field {s:?}")));
        let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
        if max != 255 {
            return Err(Error::Parse(format!("PPM maxval {max} is not 255")));
        }
        // Exactly one whitespace byte separates the header from the raster.
        pos += 1;
        let need = w * h * 3;
        if bytes.len() < pos + need {
            return Err(Error::Parse(format!(
                "PPM raster has {} bytes, expected {need}",
                bytes.len().saturating_sub(pos)
            )));
        }
        RgbImage::new(w, h, bytes[pos..pos + need].to_vec())
    }

    pub fn load_ppm(path: &Path) -> Result<Self> {
        Self::read_ppm(&mut std::fs::File::open(path)?).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
    }
}

/// Loads PPM natively, other formats through the optional decoders.
pub fn load_image(path: &Path) -> Result<RgbImage> {
    let is_ppm = path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("ppm"));
    if is_ppm {
        return RgbImage::load_ppm(path);
    }
    decode_other(path)
}

#[cfg(feature = "decoders")]
fn decode_other(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?.to_rgb8();
    RgbImage::new(img.width() as usize, img.height() as usize, img.into_raw())
}

#[cfg(not(feature = "decoders"))]
fn decode_other(path: &Path) -> Result<RgbImage> {
    Err(Error::Parse(format!("{}: only PPM is supported without the `decoders` feature", path.display())))
}

// ----------------------------------------------------------- annotations

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnBox {
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnObject {
    pub category: String,
    pub bbox: AnnBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnImage {
    pub path: String,
    #[serde(default)]
    pub objects: Vec<AnnObject>,
}

/// TT100K-style annotation file; unknown fields are ignored.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Annotations {
    pub imgs: BTreeMap<String, AnnImage>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub types: Vec<String>,
}

impl Annotations {
    pub fn from_json(s: &str, origin: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Parse(format!("{origin}: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?, &path.display().to_string())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn num_objects(&self) -> usize {
        self.imgs.values().map(|i| i.objects.len()).sum()
    }

    /// Objects with a valid box, as evaluation ground truths.
    pub fn ground_truths(&self) -> Vec<GroundTruth> {
        let mut out = Vec::new();
        for (id, img) in &self.imgs {
            for o in &img.objects {
                match BBox::new(o.bbox.xmin, o.bbox.ymin, o.bbox.xmax, o.bbox.ymax) {
                    Ok(b) => out.push(GroundTruth { image_id: id.clone(), category: o.category.clone(), bbox: b }),
                    Err(e) => log::warn!("skipping object in {id}: {e}"),
                }
            }
        }
        out
    }
}

// --------------------------------------------------------------- cropping

#[derive(Debug, Clone, PartialEq)]
pub struct Crop {
    pub image_id: String,
    pub object_index: usize,
    pub category: String,
    pub image: RgbImage,
}

#[derive(Debug, Clone, Default)]
pub struct CropOutcome {
    pub crops: Vec<Crop>,
    /// `(image id, message)` for scenes that could not be read.
    pub errors: Vec<(String, String)>,
    pub clamped: usize,
}

/// Pixel range covered by a box: `[floor(min), ceil(max))` clamped to the image.
fn pixel_range(lo: f64, hi: f64, limit: usize) -> (usize, usize, bool) {
    let a = lo.floor().max(0.0) as usize;
    let b = (hi.ceil().max(0.0) as usize).min(limit);
    let clamped = lo < 0.0 || hi > limit as f64;
    (a.min(limit), b, clamped)
}

type SceneCrops = std::result::Result<(Vec<Crop>, usize), (String, String)>;

/// One crop per annotated object from scenes under `root`.
pub fn crop_signs(ann: &Annotations, root: &Path) -> CropOutcome {
    let scenes: Vec<(&String, &AnnImage)> = ann.imgs.iter().collect();
    let per_scene: Vec<SceneCrops> = scenes
        .par_iter()
        .map(|(id, img)| {
            let scene = load_image(&root.join(&img.path)).map_err(|e| ((*id).clone(), e.to_string()))?;
            crop_scene(id, img, &scene).map_err(|e| ((*id).clone(), e.to_string()))
        })
        .collect();
    let mut out = CropOutcome::default();
    for r in per_scene {
        match r {
            Ok((crops, clamped)) => {
                out.crops.extend(crops);
                out.clamped += clamped;
            }
            Err((id, msg)) => {
                log::warn!("scene {id}: {msg}");
                out.errors.push((id, msg));
            }
        }
    }
    out
}

/// Crops every object of one decoded scene.
pub fn crop_scene(id: &str, img: &AnnImage, scene: &RgbImage) -> Result<(Vec<Crop>, usize)> {
    let mut crops = Vec::with_capacity(img.objects.len());
    let mut clamped = 0;
    for (k, o) in img.objects.iter().enumerate() {
        let (x0, x1, cx) = pixel_range(o.bbox.xmin, o.bbox.xmax, scene.width());
        let (y0, y1, cy) = pixel_range(o.bbox.ymin, o.bbox.ymax, scene.height());
        if cx || cy {
            log::warn!("{id} object {k}: box clamped to image bounds");
            clamped += 1;
        }
        crops.push(Crop {
            image_id: id.to_string(),
            object_index: k,
            category: o.category.clone(),
            image: scene.crop(x0, y0, x1, y1)?,
        });
    }
    Ok((crops, clamped))
}

// ----------------------------------------------------------- descriptions

/// Canonical description of a category code, with a generic fallback.
pub fn generate_description(code: &str, kb: &KnowledgeBase) -> String {
    match kb.lookup(code) {
        Some(info) => info.description(),
        None => {
            log::warn!("category {code} is not in the knowledge base");
            format!("a traffic sign of category {code}")
        }
    }
}

// ------------------------------------------------------------------ split

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub image: String,
    pub category: String,
    pub text: String,
    pub split: Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategorySplit {
    pub train: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub categories: BTreeMap<String, CategorySplit>,
    pub train_total: usize,
    pub test_total: usize,
    pub ratio: (usize, usize),
    pub seed: u64,
}

/// Per-category train counts: floor of the ideal share, singletons forced
/// to train, then largest remainders adjusted toward the rounded global total.
pub fn split_counts(counts: &BTreeMap<String, usize>, ratio: (usize, usize)) -> Result<BTreeMap<String, usize>> {
    let (a, b) = ratio;
    if a == 0 || a + b == 0 {
        return contract("split ratio needs a positive train share");
    }
    let total: usize = counts.values().sum();
    if total == 0 {
        return contract("cannot split an empty collection");
    }
    let parts = (a + b) as f64;
    let target = (total as f64 * a as f64 / parts).round() as usize;
    let mut train: BTreeMap<String, usize> = BTreeMap::new();
    let mut fracs: Vec<(f64, &String)> = Vec::new();
    for (c, &n) in counts {
        let ideal = n as f64 * a as f64 / parts;
        if n == 1 {
            train.insert(c.clone(), 1);
            continue;
        }
        let base = ideal.floor() as usize;
        train.insert(c.clone(), base);
        fracs.push((ideal - base as f64, c));
    }
    let assigned: usize = train.values().sum();
    if assigned < target {
        // Largest remainder first; name order on ties.
        fracs.sort_by(|x, y| y.0.total_cmp(&x.0).then_with(|| x.1.cmp(y.1)));
        for (_, c) in fracs.iter().cycle().take(target - assigned) {
            *train.get_mut(*c).expect("known category") += 1;
        }
    } else if assigned > target {
        fracs.sort_by(|x, y| x.0.total_cmp(&y.0).then_with(|| x.1.cmp(y.1)));
        let mut excess = assigned - target;
        for (_, c) in &fracs {
            if excess == 0 {
                break;
            }
            let t = train.get_mut(*c).expect("known category");
            if *t > 0 {
                *t -= 1;
                excess -= 1;
            }
        }
    }
    Ok(train)
}

/// Tags every item train or test, shuffling within each category by `seed`.
pub fn stratified_split(
    categories: &[String],
    ratio: (usize, usize),
    seed: u64,
) -> Result<(SplitManifest, Vec<Split>)> {
    if categories.is_empty() {
        return contract("cannot split an empty collection");
    }
    let mut members: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, c) in categories.iter().enumerate() {
        members.entry(c.clone()).or_default().push(i);
    }
    let counts = members.iter().map(|(c, v)| (c.clone(), v.len())).collect();
    let train = split_counts(&counts, ratio)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tags = vec![Split::Test; categories.len()];
    let mut per = BTreeMap::new();
    for (c, mut idx) in members {
        idx.shuffle(&mut rng);
        let k = train[&c];
        for &i in &idx[..k] {
            tags[i] = Split::Train;
        }
        per.insert(c, CategorySplit { train: k, test: idx.len() - k });
    }
    let train_total = per.values().map(|s| s.train).sum();
    Ok((SplitManifest { categories: per, train_total, test_total: categories.len() - train_total, ratio, seed }, tags))
}

/// Applies [`stratified_split`] to pair records in place.
pub fn split_pairs(pairs: &mut [PairRecord], ratio: (usize, usize), seed: u64) -> Result<SplitManifest> {
    let cats: Vec<String> = pairs.iter().map(|p| p.category.clone()).collect();
    let (m, tags) = stratified_split(&cats, ratio, seed)?;
    for (p, t) in pairs.iter_mut().zip(tags) {
        p.split = t;
    }
    Ok(m)
}

pub fn write_pairs(path: &Path, pairs: &[PairRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for p in pairs {
        serde_json::to_writer(&mut f, p)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_pairs(path: &Path) -> Result<Vec<PairRecord>> {
    let f = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let p: PairRecord =
            serde_json::from_str(&line).map_err(|e| Error::Parse(format!("{}:{}: {e}", path.display(), i + 1)))?;
        if p.text.trim().is_empty() {
            return Err(Error::Parse(format!("{}:{}: empty description", path.display(), i + 1)));
        }
        out.push(p);
    }
    Ok(out)
}

// --------------------------------------------------------------- profiles

/// Eight categories with counts `[100, 100, 50, 50, 20, 20, 5, 5]`.
pub fn longtail8() -> Vec<(String, usize)> {
    [("pl40", 100), ("i1", 100), ("w55", 50), ("pne", 50), ("ph4.5", 20), ("i5", 20), ("pl80", 5), ("w13", 5)]
        .iter()
        .map(|&(c, n)| (c.to_string(), n))
        .collect()
}

/// 221 TT100K-style category codes, all resolvable in the builtin knowledge base.
pub fn catalogue221() -> Vec<String> {
    let mut codes: Vec<String> = Vec::with_capacity(221);
    let fam = |p: &str, vals: &[&str]| vals.iter().map(|v| format!("{p}{v}")).collect::<Vec<_>>();
    codes.extend(fam(
        "pl",
        &["5", "10", "15", "20", "25", "30", "35", "40", "50", "60", "70", "80", "90", "100", "110", "120"],
    ));
    codes.extend(fam(
        "pm",
        &["1.5", "2", "2.5", "5", "8", "10", "13", "15", "20", "25", "30", "35", "40", "46", "49", "50", "55"],
    ));
    codes.extend(fam(
        "ph",
        &[
            "1.5", "2", "2.1", "2.2", "2.4", "2.5", "2.8", "2.9", "3", "3.2", "3.5", "3.8", "4", "4.2", "4.3", "4.5",
            "4.8", "5", "5.3", "5.5",
        ],
    ));
    codes.extend(fam("pw", &["2", "2.5", "3", "3.2", "3.5", "4"]));
    codes.extend(fam("il", &["50", "60", "70", "80", "90", "100", "110"]));
    codes.extend((1..=15).map(|i| format!("i{i}")));
    codes.extend((1..=66).map(|i| format!("w{i}")));
    codes.extend(["pne", "pn", "ps", "pg", "po", "pb", "ip", "io"].iter().map(|s| s.to_string()));
    codes.extend((1..=66).map(|i| format!("p{i}")));
    codes
}

/// Long-tail counts over [`catalogue221`] summing to exactly 24,715: 31
/// geometric head categories, 43 middle ones and a cycling 14..1 tail.
pub fn tstiad_profile() -> Vec<(String, usize)> {
    const TOTAL: usize = 24_715;
    let geo = |lo: f64, hi: f64, n: usize, i: usize| {
        (lo * (hi / lo).powf((n - 1 - i) as f64 / (n - 1) as f64)).floor() as usize
    };
    let mut counts: Vec<usize> = (0..31).map(|i| geo(160.0, 1760.0, 31, i)).collect();
    counts.extend((0..43).map(|i| geo(16.0, 150.0, 43, i)));
    counts.extend((0..147).map(|i| 14 - i % 14));
    let s: usize = counts.iter().sum();
    // The largest category absorbs the rounding residual.
    counts[0] = (counts[0] + TOTAL).checked_sub(s).expect("profile sum stays below the total");
    catalogue221().into_iter().zip(counts).collect()
}

// ------------------------------------------------------------- synthesis

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSignSpec {
    pub categories: Vec<(String, usize)>,
    /// Scene side in pixels; each scene holds one sign.
    pub scene_side: usize,
    pub sign_side: usize,
    /// Per-pixel noise amplitude as a fraction of full scale.
    pub noise: f64,
    pub seed: u64,
}

impl SyntheticSignSpec {
    pub fn longtail8(seed: u64) -> Self {
        SyntheticSignSpec { categories: longtail8(), scene_side: 48, sign_side: 32, noise: 0.06, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.categories.is_empty() || self.categories.iter().any(|(_, n)| *n == 0) {
            return contract("every synthetic category needs at least one instance");
        }
        if self.sign_side < 8 || self.sign_side > self.scene_side {
            return contract("sign side must be at least 8 and fit in the scene");
        }
        if !(0.0..=0.5).contains(&self.noise) {
            return contract("noise must lie in [0, 0.5]");
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.categories.iter().map(|(_, n)| n).sum()
    }
}

/// Named colors used by the renderer and the dominant-color check.
pub const PALETTE: [(&str, [u8; 3]); 6] = [
    ("red", [200, 30, 35]),
    ("blue", [30, 70, 190]),
    ("yellow", [235, 200, 30]),
    ("green", [30, 150, 60]),
    ("white", [240, 240, 240]),
    ("black", [20, 20, 20]),
];

pub fn palette_rgb(name: &str) -> Option<[u8; 3]> {
    PALETTE.iter().find(|(n, _)| *n == name).map(|(_, c)| *c)
}

/// Nearest palette color within Euclidean distance `max_dist` (0 to 255 scale).
pub fn nearest_palette(px: [u8; 3], max_dist: f64) -> Option<&'static str> {
    PALETTE
        .iter()
        .map(|(n, c)| {
            let d: f64 = (0..3).map(|i| (px[i] as f64 - c[i] as f64).powi(2)).sum::<f64>().sqrt();
            (*n, d)
        })
        .filter(|(_, d)| *d <= max_dist)
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(n, _)| n)
}

/// Most frequent palette color among the pixels of `img`.
pub fn dominant_color(img: &RgbImage) -> Option<&'static str> {
    let mut hist: HashMap<&'static str, usize> = HashMap::new();
    for y in 0..img.height() {
        for x in 0..img.width() {
            if let Some(n) = nearest_palette(img.get(x, y), 70.0) {
                *hist.entry(n).or_default() += 1;
            }
        }
    }
    PALETTE
        .iter()
        .map(|(n, _)| (*n, hist.get(n).copied().unwrap_or(0)))
        .filter(|(_, c)| *c > 0)
        .max_by_key(|&(_, c)| c)
        .map(|(n, _)| n)
}

fn inside_shape(shape: Shape, u: f64, v: f64) -> bool {
    // (u, v) in [-1, 1]², v pointing down.
    match shape {
        Shape::Circular | Shape::Unknown => u * u + v * v <= 1.0,
        Shape::Triangular => (-0.95..=0.85).contains(&v) && u.abs() <= (v + 0.95) / 1.8 * 0.98,
        Shape::Rectangular => u.abs() <= 0.9 && v.abs() <= 0.75,
        Shape::Octagonal => u.abs() <= 0.95 && v.abs() <= 0.95 && u.abs() + v.abs() <= 1.35,
    }
}

/// Seven-segment masks, segments a b c d e f g.
const SEGMENTS: [u8; 10] =
    [0b1111110, 0b0110000, 0b1101101, 0b1111001, 0b0110011, 0b1011011, 0b1011111, 0b1110000, 0b1111111, 0b1111011];

/// Pixel cells of a numeral string rendered in a `side`-pixel square.
fn digit_cells(literal: &str, side: usize) -> Vec<(usize, usize)> {
    let (dw, dh, st) = (side * 7 / 32, side * 12 / 32, (side / 16).max(1));
    let widths: Vec<usize> = literal.chars().map(|c| if c == '.' { st + 2 } else { dw + 2 }).collect();
    let total: usize = widths.iter().sum::<usize>().saturating_sub(2);
    let mut x = side.saturating_sub(total) / 2;
    let y0 = (side - dh) / 2;
    let mut cells = Vec::new();
    for (ch, w) in literal.chars().zip(widths) {
        if ch == '.' {
            for dy in 0..st {
                for dx in 0..st {
                    cells.push((x + dx, y0 + dh - st + dy));
                }
            }
        } else if let Some(d) = ch.to_digit(10) {
            let m = SEGMENTS[d as usize];
            let half = dh / 2;
            let mut rect = |x0: usize, y0: usize, w: usize, h: usize| {
                for yy in y0..y0 + h {
                    for xx in x0..x0 + w {
                        cells.push((xx, yy));
                    }
                }
            };
            let seg = |i: u8| m & (1 << (6 - i)) != 0;
            if seg(0) {
                rect(x, y0, dw, st)
            }
            if seg(1) {
                rect(x + dw - st, y0, st, half)
            }
            if seg(2) {
                rect(x + dw - st, y0 + half, st, dh - half)
            }
            if seg(3) {
                rect(x, y0 + dh - st, dw, st)
            }
            if seg(4) {
                rect(x, y0 + half, st, dh - half)
            }
            if seg(5) {
                rect(x, y0, st, half)
            }
            if seg(6) {
                rect(x, y0 + half - st / 2, dw, st)
            }
        }
        x += w;
    }
    cells
}

fn glyph_hit(glyph: &Glyph, u: f64, v: f64) -> bool {
    match glyph {
        Glyph::HBar => u.abs() <= 0.6 && v.abs() <= 0.16,
        Glyph::VBar => u.abs() <= 0.16 && v.abs() <= 0.5,
        Glyph::Diag => (u - v).abs() <= 0.22 && u.abs() <= 0.65,
        Glyph::ArrowUp => {
            (u.abs() <= 0.13 && (-0.2..=0.6).contains(&v))
                || ((-0.65..-0.2).contains(&v) && u.abs() <= (v + 0.65) * 0.9)
        }
        Glyph::ArrowRight => {
            (v.abs() <= 0.13 && (-0.6..=0.2).contains(&u)) || (u <= 0.65 && u > 0.2 && v.abs() <= (0.65 - u) * 0.9)
        }
        Glyph::Digits(_) | Glyph::None => false,
    }
}

fn jitter(rng: &mut ChaCha8Rng, c: [u8; 3], amp: i32) -> [u8; 3] {
    c.map(|v| (v as i32 + rng.gen_range(-amp..=amp)).clamp(0, 255) as u8)
}

/// Renders one scene holding a single sign; returns the scene and its box.
pub fn render_scene(
    code: &str,
    kb: &KnowledgeBase,
    spec: &SyntheticSignSpec,
    rng: &mut ChaCha8Rng,
) -> (RgbImage, AnnBox) {
    let side = spec.scene_side;
    let amp = (spec.noise * 255.0).round() as i32;
    let mut img = RgbImage::filled(side, side, [0, 0, 0]);
    let base: i32 = rng.gen_range(90..=150);
    for y in 0..side {
        for x in 0..side {
            let g = base + rng.gen_range(-amp..=amp);
            let tint = [rng.gen_range(-6..=6), rng.gen_range(-6..=6), rng.gen_range(-6..=6)];
            img.put(x, y, std::array::from_fn(|i| (g + tint[i]).clamp(0, 255) as u8));
        }
    }
    let (shape, fill, glyph, glyph_rgb) = match kb.lookup(code) {
        Some(info) => (
            info.shape,
            palette_rgb(&info.color).unwrap_or([128, 128, 128]),
            info.glyph,
            palette_rgb(&info.glyph_color).unwrap_or([0, 0, 0]),
        ),
        None => (Shape::Unknown, [128, 128, 128], Glyph::None, [0, 0, 0]),
    };
    let fill = jitter(rng, fill, 12);
    let glyph_rgb = jitter(rng, glyph_rgb, 12);
    let s = spec.sign_side;
    let ox = rng.gen_range(0..=side - s);
    let oy = rng.gen_range(0..=side - s);
    let scale: f64 = rng.gen_range(0.88..=1.0);
    let (gdx, gdy) = (rng.gen_range(-1i32..=1), rng.gen_range(-1i32..=1));
    let digits: Vec<(usize, usize)> = match &glyph {
        Glyph::Digits(lit) => digit_cells(lit, s),
        _ => Vec::new(),
    };
    let half = s as f64 / 2.0;
    for y in 0..s {
        for x in 0..s {
            let u = (x as f64 + 0.5 - half) / (half * scale);
            let v = (y as f64 + 0.5 - half) / (half * scale);
            if !inside_shape(shape, u, v) {
                continue;
            }
            let gu = (x as f64 + 0.5 - half - gdx as f64) / (half * scale);
            let gv = (y as f64 + 0.5 - half - gdy as f64) / (half * scale);
            let gx = x as i32 - gdx;
            let gy = y as i32 - gdy;
            let on_digit = gx >= 0 && gy >= 0 && digits.contains(&(gx as usize, gy as usize));
            let c = if on_digit || glyph_hit(&glyph, gu, gv) { glyph_rgb } else { fill };
            img.put(ox + x, oy + y, jitter(rng, c, amp / 2));
        }
    }
    let bbox = AnnBox { xmin: ox as f64, ymin: oy as f64, xmax: (ox + s) as f64, ymax: (oy + s) as f64 };
    (img, bbox)
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub spec: SyntheticSignSpec,
    /// `(scene id, scene)` in generation order.
    pub scenes: Vec<(String, RgbImage)>,
    pub annotations: Annotations,
    pub pairs: Vec<PairRecord>,
    pub manifest: SplitManifest,
}

impl SynthDataset {
    /// Crops of every pair in order, resized to `side`.
    pub fn crops(&self, side: usize) -> Result<Vec<RgbImage>> {
        self.scenes
            .iter()
            .map(|(id, scene)| {
                let (crops, _) = crop_scene(id, &self.annotations.imgs[id], scene)?;
                Ok(crops[0].image.resize(side, side))
            })
            .collect()
    }

    /// Writes scenes, crops, annotations, pairs and the split manifest.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir.join("scenes"))?;
        std::fs::create_dir_all(dir.join("crops"))?;
        for ((id, scene), crop) in self.scenes.iter().zip(self.crops(self.spec.sign_side)?) {
            scene.save_ppm(&dir.join("scenes").join(format!("{id}.ppm")))?;
            crop.save_ppm(&dir.join("crops").join(format!("{id}.ppm")))?;
        }
        self.annotations.save(&dir.join("annotations.json"))?;
        write_pairs(&dir.join("pairs.jsonl"), &self.pairs)?;
        let m = serde_json::json!({ "spec": self.spec, "split": self.manifest });
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&m)?)?;
        Ok(())
    }
}

/// Renders every instance of the profile, annotates and splits it 2:1.
pub fn synth_dataset(spec: &SyntheticSignSpec, kb: &KnowledgeBase) -> Result<SynthDataset> {
    spec.validate()?;
    let jobs: Vec<(usize, &str)> =
        spec.categories.iter().flat_map(|(c, n)| std::iter::repeat_n(c.as_str(), *n)).enumerate().collect();
    let rendered: Vec<(RgbImage, AnnBox)> = jobs
        .par_iter()
        .map(|&(i, code)| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(i as u64 + 1);
            render_scene(code, kb, spec, &mut rng)
        })
        .collect();
    let mut scenes = Vec::with_capacity(jobs.len());
    let mut annotations = Annotations::default();
    let mut pairs = Vec::with_capacity(jobs.len());
    for ((i, code), (img, bbox)) in jobs.into_iter().zip(rendered) {
        let id = format!("{i:05}");
        annotations.imgs.insert(
            id.clone(),
            AnnImage {
                path: format!("scenes/{id}.ppm"),
                objects: vec![AnnObject { category: code.to_string(), bbox }],
            },
        );
        pairs.push(PairRecord {
            image: format!("crops/{id}.ppm"),
            category: code.to_string(),
            text: generate_description(code, kb),
            split: Split::Train,
        });
        scenes.push((id, img));
    }
    annotations.types = spec.categories.iter().map(|(c, _)| c.clone()).collect();
    let manifest = split_pairs(&mut pairs, (2, 1), spec.seed)?;
    Ok(SynthDataset { spec: spec.clone(), scenes, annotations, pairs, manifest })
}

// ------------------------------------------------------------ statistics

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub total_boxes: usize,
    pub per_category: BTreeMap<String, usize>,
    /// Number of categories in each stratum.
    pub strata: BTreeMap<Stratum, usize>,
    /// Boxes whose width and height are both below 32 pixels.
    pub small_boxes: usize,
    pub small_share: f64,
}

pub fn dataset_stats(ann: &Annotations) -> StatsReport {
    let mut per_category: BTreeMap<String, usize> = BTreeMap::new();
    let mut small = 0;
    let mut total = 0;
    for img in ann.imgs.values() {
        for o in &img.objects {
            total += 1;
            *per_category.entry(o.category.clone()).or_default() += 1;
            if o.bbox.xmax - o.bbox.xmin < 32.0 && o.bbox.ymax - o.bbox.ymin < 32.0 {
                small += 1;
            }
        }
    }
    let mut strata: BTreeMap<Stratum, usize> =
        [Stratum::Head, Stratum::Middle, Stratum::Tail].iter().map(|s| (*s, 0)).collect();
    for &n in per_category.values() {
        *strata.get_mut(&Stratum::of_count(n)).expect("all strata present") += 1;
    }
    StatsReport {
        total_boxes: total,
        per_category,
        strata,
        small_boxes: small,
        small_share: if total == 0 { 0.0 } else { small as f64 / total as f64 },
    }
}

/// Resolves a pair's image path against the dataset directory.
pub fn pair_image_path(root: &Path, pair: &PairRecord) -> PathBuf {
    root.join(&pair.image)
}

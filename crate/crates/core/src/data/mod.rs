//! Manifest-based ingestion of hand-image corpora with subject/side/hand
//! metadata, per-subject split protocols, domain filters and a
//! deterministic synthetic two-domain generator.

mod synth;

pub use synth::synth_two_domain;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use ndarray::{Array3, Array4};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::vit::IMAGE_CHANNELS;

/// Documented manifest header. Boolean columns use 0/1.
pub const MANIFEST_HEADER: &str = "path,subject_id,side,hand,accessories,nail_polish,irregularities";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Palmar,
    Dorsal,
}

impl Side {
    pub fn as_str(&self) -> &'static str {
        match self {
            Side::Palmar => "palmar",
            Side::Dorsal => "dorsal",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "palmar" => Ok(Side::Palmar),
            "dorsal" => Ok(Side::Dorsal),
            other => Err(Error::Schema(format!("unknown side '{other}'"))),
        }
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Hand {
    Left,
    Right,
}

impl Hand {
    pub fn as_str(&self) -> &'static str {
        match self {
            Hand::Left => "left",
            Hand::Right => "right",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "left" => Ok(Hand::Left),
            "right" => Ok(Hand::Right),
            other => Err(Error::Schema(format!("unknown hand '{other}'"))),
        }
    }
}

impl fmt::Display for Hand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// In-memory image payload, channel-major RGB in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct InlineImage {
    pub size: usize,
    pub pixels: Vec<f32>,
}

impl InlineImage {
    pub fn new(size: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != IMAGE_CHANNELS * size * size {
            return Err(Error::Input(format!(
                "inline image payload has {} values, expected {}",
                pixels.len(),
                IMAGE_CHANNELS * size * size
            )));
        }
        Ok(Self { size, pixels })
    }
}

#[derive(Debug, Clone)]
pub enum ImageSource {
    /// Image file on disk, decoded and resized on demand.
    File(PathBuf),
    /// Procedurally generated pixels.
    Inline(InlineImage),
}

/// One image with its subject metadata.
#[derive(Debug, Clone)]
pub struct SampleRecord {
    pub source: ImageSource,
    pub subject_id: String,
    pub side: Side,
    pub hand: Hand,
    pub accessories: bool,
    pub nail_polish: bool,
    pub irregularities: bool,
}

/// Per-subject split request.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitSpec {
    pub n_train: usize,
    pub n_test: usize,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_repeats() -> usize {
    1
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_train < 1 || self.n_test < 1 {
            return Err(Error::Parameter("n_train and n_test must be >= 1".into()));
        }
        if self.repeats < 1 {
            return Err(Error::Parameter("repeats must be >= 1".into()));
        }
        Ok(())
    }
}

/// An immutable image inventory with a dense subject-to-class map.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    records: Vec<SampleRecord>,
    domain: String,
    class_map: BTreeMap<String, usize>,
}

impl DatasetManifest {
    /// Build a manifest; the class map assigns indices in sorted
    /// subject_id order, so loading is deterministic.
    pub fn new(records: Vec<SampleRecord>, domain: impl Into<String>) -> Result<Self> {
        if records.iter().any(|r| r.subject_id.is_empty()) {
            return Err(Error::Schema("empty subject_id".into()));
        }
        let mut subjects: Vec<&str> = records.iter().map(|r| r.subject_id.as_str()).collect();
        subjects.sort_unstable();
        subjects.dedup();
        let class_map = subjects
            .into_iter()
            .enumerate()
            .map(|(i, s)| (s.to_string(), i))
            .collect();
        Ok(Self {
            records,
            domain: domain.into(),
            class_map,
        })
    }

    fn with_class_map(
        records: Vec<SampleRecord>,
        domain: String,
        class_map: BTreeMap<String, usize>,
    ) -> Result<Self> {
        for r in &records {
            if !class_map.contains_key(&r.subject_id) {
                return Err(Error::Schema(format!(
                    "subject '{}' missing from the class map",
                    r.subject_id
                )));
            }
        }
        Ok(Self {
            records,
            domain,
            class_map,
        })
    }

    /// Parse a delimiter-separated manifest file. The header must match the
    /// documented schema; the `side` column may be absent (palm-only
    /// corpora), in which case every record defaults to palmar.
    pub fn load(path: &Path, domain: impl Into<String>) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| Error::io(path, e.to_string()))?;
        let headers: Vec<String> = reader
            .headers()
            .map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?
            .iter()
            .map(|h| h.to_string())
            .collect();
        let full: Vec<&str> = MANIFEST_HEADER.split(',').collect();
        let without_side: Vec<&str> = full
            .iter()
            .copied()
            .filter(|&c| c != "side")
            .collect();
        let has_side = if headers == full {
            true
        } else if headers == without_side {
            false
        } else {
            return Err(Error::Schema(format!(
                "unexpected manifest header {:?}, expected '{MANIFEST_HEADER}' (side optional)",
                headers.join(",")
            )));
        };
        let col = |name: &str| headers.iter().position(|h| h == name).unwrap();
        let base = path.parent().unwrap_or_else(|| Path::new("."));

        let mut records = Vec::new();
        for (i, row) in reader.records().enumerate() {
            let row = row.map_err(|e| Error::Schema(format!("record {}: {e}", i + 1)))?;
            let field = |name: &str| row.get(col(name)).unwrap_or("").to_string();
            let image_path = {
                let p = PathBuf::from(field("path"));
                if p.is_absolute() {
                    p
                } else {
                    base.join(p)
                }
            };
            if !image_path.exists() {
                return Err(Error::io(&image_path, "referenced image file does not exist"));
            }
            let subject_id = field("subject_id");
            if subject_id.is_empty() {
                return Err(Error::Schema(format!("record {}: empty subject_id", i + 1)));
            }
            let side = if has_side {
                Side::parse(&field("side"))?
            } else {
                Side::Palmar
            };
            records.push(SampleRecord {
                source: ImageSource::File(image_path),
                subject_id,
                side,
                hand: Hand::parse(&field("hand"))?,
                accessories: parse_bool(&field("accessories"))?,
                nail_polish: parse_bool(&field("nail_polish"))?,
                irregularities: parse_bool(&field("irregularities"))?,
            });
        }
        Self::new(records, domain)
    }

    pub fn records(&self) -> &[SampleRecord] {
        &self.records
    }

    pub fn domain(&self) -> &str {
        &self.domain
    }

    pub fn rename_domain(mut self, domain: impl Into<String>) -> Self {
        self.domain = domain.into();
        self
    }

    pub fn class_map(&self) -> &BTreeMap<String, usize> {
        &self.class_map
    }

    pub fn num_classes(&self) -> usize {
        self.class_map.len()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn label_of(&self, record: &SampleRecord) -> usize {
        self.class_map[&record.subject_id]
    }

    /// A manifest over the given record indices, preserving the class map.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let records = indices
            .iter()
            .map(|&i| {
                self.records
                    .get(i)
                    .cloned()
                    .ok_or_else(|| Error::Input(format!("record index {i} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        if records.is_empty() {
            return Err(Error::EmptyDomain(format!(
                "subset of '{}' selected no records",
                self.domain
            )));
        }
        Self::with_class_map(records, self.domain.clone(), self.class_map.clone())
    }

    /// Keep records matching every given predicate. The class map is
    /// preserved from the parent, so subject indices never move.
    pub fn filter(&self, side: Option<Side>, hand: Option<Hand>) -> Result<Self> {
        let records: Vec<SampleRecord> = self
            .records
            .iter()
            .filter(|r| side.is_none_or(|s| r.side == s))
            .filter(|r| hand.is_none_or(|h| r.hand == h))
            .cloned()
            .collect();
        if records.is_empty() {
            return Err(Error::EmptyDomain(format!(
                "filter (side={side:?}, hand={hand:?}) matched no records in '{}'",
                self.domain
            )));
        }
        Self::with_class_map(records, self.domain.clone(), self.class_map.clone())
    }

    /// Per-subject disjoint train/test draws without replacement, one pair
    /// per repeat. Each repeat uses an independently seeded shuffle.
    pub fn split_per_subject(&self, spec: &SplitSpec) -> Result<Vec<(Self, Self)>> {
        spec.validate()?;
        let mut by_subject: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, r) in self.records.iter().enumerate() {
            by_subject.entry(r.subject_id.as_str()).or_default().push(i);
        }
        let needed = spec.n_train + spec.n_test;
        let mut out = Vec::with_capacity(spec.repeats);
        for rep in 0..spec.repeats {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, rep as u64));
            let mut train = Vec::new();
            let mut test = Vec::new();
            for (subject, indices) in &by_subject {
                if indices.len() < needed {
                    return Err(Error::Capacity(format!(
                        "subject '{subject}' has {} records, split needs {needed}",
                        indices.len()
                    )));
                }
                let mut pool = indices.clone();
                pool.shuffle(&mut rng);
                for &i in pool.iter().take(spec.n_train) {
                    train.push(self.records[i].clone());
                }
                for &i in pool.iter().skip(spec.n_train).take(spec.n_test) {
                    test.push(self.records[i].clone());
                }
            }
            out.push((
                Self::with_class_map(train, self.domain.clone(), self.class_map.clone())?,
                Self::with_class_map(test, self.domain.clone(), self.class_map.clone())?,
            ));
        }
        Ok(out)
    }

    /// Decode and preprocess every record into a model-ready tensor plus
    /// class labels, in manifest order.
    pub fn load_images<F: Scalar>(&self, image_size: usize) -> Result<(Array4<F>, Vec<usize>)> {
        if self.is_empty() {
            return Err(Error::Input(format!("manifest '{}' is empty", self.domain)));
        }
        let n = self.len();
        let mut pixels = Array4::zeros((n, IMAGE_CHANNELS, image_size, image_size));
        let mut labels = Vec::with_capacity(n);
        for (i, record) in self.records.iter().enumerate() {
            let img = preprocess::<F>(record, image_size)?;
            pixels.index_axis_mut(ndarray::Axis(0), i).assign(&img);
            labels.push(self.label_of(record));
        }
        Ok((pixels, labels))
    }

    /// Write the manifest (and any inline payloads as PNG files) into `dir`
    /// using the documented file layout. Returns the manifest path.
    pub fn export(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e.to_string()))?;
        let manifest_path = dir.join("manifest.csv");
        let mut writer = csv::Writer::from_path(&manifest_path)
            .map_err(|e| Error::io(&manifest_path, e.to_string()))?;
        writer
            .write_record(MANIFEST_HEADER.split(','))
            .map_err(|e| Error::io(&manifest_path, e.to_string()))?;
        for (i, r) in self.records.iter().enumerate() {
            let path_field = match &r.source {
                ImageSource::File(p) => p.display().to_string(),
                ImageSource::Inline(img) => {
                    let name = format!("{}_{i:04}.png", r.subject_id);
                    write_png(&dir.join(&name), img)?;
                    name
                }
            };
            writer
                .write_record([
                    path_field.as_str(),
                    r.subject_id.as_str(),
                    r.side.as_str(),
                    r.hand.as_str(),
                    bool_field(r.accessories),
                    bool_field(r.nail_polish),
                    bool_field(r.irregularities),
                ])
                .map_err(|e| Error::io(&manifest_path, e.to_string()))?;
        }
        writer
            .flush()
            .map_err(|e| Error::io(&manifest_path, e.to_string()))?;
        Ok(manifest_path)
    }
}

fn bool_field(v: bool) -> &'static str {
    if v {
        "1"
    } else {
        "0"
    }
}

fn parse_bool(s: &str) -> Result<bool> {
    match s {
        "0" => Ok(false),
        "1" => Ok(true),
        other => Err(Error::Schema(format!("boolean field must be 0 or 1, got '{other}'"))),
    }
}

pub(crate) fn mix_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 over the combined words
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Decode one record to a `channels x size x size` tensor in `[0, 1]`.
/// Files are decoded as RGB; resampling is the crate's own bilinear
/// implementation with half-pixel centers and clamped edges.
pub fn preprocess<F: Scalar>(record: &SampleRecord, image_size: usize) -> Result<Array3<F>> {
    let raw: Array3<f32> = match &record.source {
        ImageSource::Inline(img) => {
            Array3::from_shape_vec((IMAGE_CHANNELS, img.size, img.size), img.pixels.clone())
                .map_err(|e| Error::Input(format!("inline payload: {e}")))?
        }
        ImageSource::File(path) => {
            let decoded = image::open(path)
                .map_err(|e| Error::io(path, format!("decode failed: {e}")))?
                .to_rgb8();
            let (w, h) = decoded.dimensions();
            let mut arr = Array3::zeros((IMAGE_CHANNELS, h as usize, w as usize));
            for (x, y, p) in decoded.enumerate_pixels() {
                for c in 0..IMAGE_CHANNELS {
                    arr[[c, y as usize, x as usize]] = f32::from(p.0[c]) / 255.0;
                }
            }
            arr
        }
    };
    let resized = if raw.dim().1 == image_size && raw.dim().2 == image_size {
        raw
    } else {
        bilinear_resize(&raw, image_size)
    };
    Ok(resized.mapv(|v| F::cast(f64::from(v))))
}

/// Bilinear resampling with half-pixel sample centers; source coordinates
/// are clamped at the borders.
pub(crate) fn bilinear_resize(src: &Array3<f32>, out_size: usize) -> Array3<f32> {
    let (c, h, w) = src.dim();
    let mut out = Array3::zeros((c, out_size, out_size));
    let sy = h as f32 / out_size as f32;
    let sx = w as f32 / out_size as f32;
    for oy in 0..out_size {
        let fy = ((oy as f32 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f32);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f32;
        for ox in 0..out_size {
            let fx = ((ox as f32 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f32);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f32;
            for ci in 0..c {
                let top = src[[ci, y0, x0]] * (1.0 - wx) + src[[ci, y0, x1]] * wx;
                let bot = src[[ci, y1, x0]] * (1.0 - wx) + src[[ci, y1, x1]] * wx;
                out[[ci, oy, ox]] = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    out
}

fn write_png(path: &Path, img: &InlineImage) -> Result<()> {
    let s = img.size as u32;
    let mut buf = image::RgbImage::new(s, s);
    for (x, y, p) in buf.enumerate_pixels_mut() {
        for c in 0..IMAGE_CHANNELS {
            let v = img.pixels[c * img.size * img.size + y as usize * img.size + x as usize];
            p.0[c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    buf.save(path).map_err(|e| Error::io(path, e.to_string()))
}

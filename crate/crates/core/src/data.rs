//! Deterministic toy corpora: a shapes-detection dataset drawn from a
//! non-uniform layout prior, and a separable classification dataset. Images
//! are PNG files; labels are line-delimited JSON records next to a versioned
//! manifest.

use std::fs;
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array3, ArrayD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{DiveError, Result};
use crate::labels::{BBox, DetObject, DetectionLabel};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const LABELS_FILE: &str = "labels.jsonl";

/// Generative rules for detection layouts. Object counts follow a geometric
/// distribution truncated at the slot limit, sizes and positions are
/// class-dependent, and pairwise overlap is capped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutPrior {
    /// Success probability of the truncated geometric object-count law.
    pub count_geometric_p: f64,
    /// Per-class inclusive (min, max) side lengths.
    pub size_ranges: Vec<(u32, u32)>,
    /// Maximum pairwise IoU tolerated between boxes of one layout.
    pub overlap_max_iou: f64,
    /// Per-class vertical placement bias (None / top half / bottom half),
    /// encoded as -1 / 0 / 1 to stay serializable.
    pub vertical_bias: Vec<i8>,
}

impl LayoutPrior {
    pub fn default_for(num_classes: usize) -> LayoutPrior {
        let base_sizes = [(6u32, 12u32), (6, 12), (8, 14), (5, 9)];
        let base_bias = [0i8, 0, -1, 1];
        LayoutPrior {
            count_geometric_p: 0.5,
            size_ranges: (0..num_classes).map(|c| base_sizes[c % 4]).collect(),
            overlap_max_iou: 0.2,
            vertical_bias: (0..num_classes).map(|c| base_bias[c % 4]).collect(),
        }
    }

    /// Truncated geometric pmf over counts 1..=max_objects.
    pub fn count_pmf(&self, max_objects: usize) -> Vec<f64> {
        let p = self.count_geometric_p;
        let raw: Vec<f64> = (0..max_objects).map(|k| p * (1.0 - p).powi(k as i32)).collect();
        let z: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / z).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapesCorpusSpec {
    pub seed: u64,
    pub n_images: usize,
    pub img_size: usize,
    pub num_classes: usize,
    pub max_objects: usize,
    pub layout_prior: LayoutPrior,
}

impl ShapesCorpusSpec {
    pub fn detection_default(seed: u64, n_images: usize) -> ShapesCorpusSpec {
        ShapesCorpusSpec {
            seed,
            n_images,
            img_size: 32,
            num_classes: 4,
            max_objects: 4,
            layout_prior: LayoutPrior::default_for(4),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CorpusSpec {
    Detection(ShapesCorpusSpec),
    Classification { seed: u64, n_images: usize, img_size: usize, num_classes: usize },
}

/// One example's label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ExampleLabel {
    Objects { objects: Vec<DetObject> },
    Class { class: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub image: String,
    #[serde(flatten)]
    pub label: ExampleLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub spec: CorpusSpec,
    pub n_images: usize,
    pub image_dir: String,
    pub labels_file: String,
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

const CLASS_COLORS: [[u8; 3]; 4] = [
    [220, 60, 50],  // rectangle, red
    [70, 190, 80],  // ellipse, green
    [60, 90, 220],  // triangle, blue
    [235, 200, 60], // diamond, yellow
];
const BACKGROUND: u8 = 128;

fn class_color(class: usize) -> [u8; 3] {
    CLASS_COLORS[class % CLASS_COLORS.len()]
}

/// True when pixel (x, y) lies inside class `c`'s shape inscribed in `b`.
fn inside_shape(class: usize, b: &BBox, x: u32, y: u32) -> bool {
    if x < b.m_min || x >= b.m_max || y < b.n_min || y >= b.n_max {
        return false;
    }
    let w = (b.m_max - b.m_min) as f64;
    let h = (b.n_max - b.n_min) as f64;
    // center-of-pixel coordinates normalized to [0,1] within the box
    let u = (x as f64 + 0.5 - b.m_min as f64) / w;
    let v = (y as f64 + 0.5 - b.n_min as f64) / h;
    match class % 4 {
        0 => true,                                                       // filled rectangle
        1 => (u - 0.5).powi(2) + (v - 0.5).powi(2) <= 0.25,              // inscribed ellipse
        2 => v >= (2.0 * u - 1.0).abs(),                                 // triangle, apex up
        _ => (u - 0.5).abs() + (v - 0.5).abs() <= 0.5,                   // diamond
    }
}

/// Render a detection label onto a noisy neutral background. Pure function of
/// (label, seed): later objects paint over earlier ones.
pub fn render_detection(label: &DetectionLabel, img_size: usize, seed: u64) -> Array3<u8> {
    let mut img = Array3::<u8>::from_elem((3, img_size, img_size), BACKGROUND);
    for obj in &label.objects {
        let color = class_color(obj.class);
        for y in obj.bbox.n_min..obj.bbox.n_max.min(img_size as u32) {
            for x in obj.bbox.m_min..obj.bbox.m_max.min(img_size as u32) {
                if inside_shape(obj.class, &obj.bbox, x, y) {
                    for c in 0..3 {
                        img[[c, y as usize, x as usize]] = color[c];
                    }
                }
            }
        }
    }
    add_pixel_noise(&mut img, seed, 3.0);
    img
}

/// Render a classification example: one large class shape with positional
/// jitter, plus a nuisance gray blob and pixel noise.
pub fn render_classification(class: usize, img_size: usize, seed: u64) -> Array3<u8> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let r = img_size as u32;
    let side = rng.random_range((r * 5 / 10)..=(r * 7 / 10));
    let max_off = r - side;
    let cx = (max_off / 2) as i64 + rng.random_range(-3..=3);
    let cy = (max_off / 2) as i64 + rng.random_range(-3..=3);
    let m_min = cx.clamp(0, (r - side) as i64) as u32;
    let n_min = cy.clamp(0, (r - side) as i64) as u32;
    let bbox = BBox { m_min, n_min, m_max: m_min + side, n_max: n_min + side };

    let mut img = Array3::<u8>::from_elem((3, img_size, img_size), BACKGROUND);
    // nuisance blob in a corner, class-agnostic
    let bx = rng.random_range(0..r - 4);
    let by = rng.random_range(0..r - 4);
    for y in by..by + 4 {
        for x in bx..bx + 4 {
            for c in 0..3 {
                img[[c, y as usize, x as usize]] = 96;
            }
        }
    }
    let color = class_color(class);
    for y in bbox.n_min..bbox.n_max {
        for x in bbox.m_min..bbox.m_max {
            if inside_shape(class, &bbox, x, y) {
                for c in 0..3 {
                    img[[c, y as usize, x as usize]] = color[c];
                }
            }
        }
    }
    add_pixel_noise(&mut img, seed.wrapping_add(1), 8.0);
    img
}

fn add_pixel_noise(img: &mut Array3<u8>, seed: u64, sigma: f64) {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    for v in img.iter_mut() {
        let n: f64 = <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
        *v = (*v as f64 + n * sigma).round().clamp(0.0, 255.0) as u8;
    }
}

/// u8 image (3, R, R) to model input in [-1, 1].
pub fn to_model_input(img: &Array3<u8>) -> ArrayD<f64> {
    img.mapv(|v| v as f64 / 255.0 * 2.0 - 1.0).into_dyn()
}

// ---------------------------------------------------------------------------
// Layout sampling
// ---------------------------------------------------------------------------

fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.m_max.min(b.m_max) as f64 - a.m_min.max(b.m_min) as f64).max(0.0);
    let iy = (a.n_max.min(b.n_max) as f64 - a.n_min.max(b.n_min) as f64).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union == 0.0 { 0.0 } else { inter / union }
}

fn sample_count<R: Rng>(pmf: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random_range(0.0..1.0);
    let mut acc = 0.0;
    for (k, p) in pmf.iter().enumerate() {
        acc += p;
        if u < acc {
            return k + 1;
        }
    }
    pmf.len()
}

/// Draw one layout from the structured prior. The object count is fixed before
/// placement and kept through placement retries, so the count distribution is
/// exactly the truncated geometric law.
pub fn sample_layout<R: Rng>(spec: &ShapesCorpusSpec, rng: &mut R) -> Result<DetectionLabel> {
    let prior = &spec.layout_prior;
    let pmf = prior.count_pmf(spec.max_objects);
    let count = sample_count(&pmf, rng);
    let r = spec.img_size as u32;
    'layout: for _ in 0..200 {
        let mut objects: Vec<DetObject> = Vec::with_capacity(count);
        for _ in 0..count {
            let mut placed = false;
            for _ in 0..100 {
                let class = rng.random_range(0..spec.num_classes);
                let (smin, smax) = prior.size_ranges[class];
                let w = rng.random_range(smin..=smax).min(r - 1);
                let h = rng.random_range(smin..=smax).min(r - 1);
                let m_min = rng.random_range(0..=(r - w));
                let n_range_max = r - h;
                let n_min = match prior.vertical_bias[class] {
                    -1 => rng.random_range(0..=(n_range_max / 2).max(1)),
                    1 => rng.random_range((n_range_max / 2)..=n_range_max),
                    _ => rng.random_range(0..=n_range_max),
                };
                let bbox = BBox { m_min, n_min, m_max: m_min + w, n_max: n_min + h };
                if objects.iter().all(|o| box_iou(&o.bbox, &bbox) <= prior.overlap_max_iou) {
                    objects.push(DetObject { class, bbox });
                    placed = true;
                    break;
                }
            }
            if !placed {
                continue 'layout;
            }
        }
        return Ok(DetectionLabel { objects });
    }
    Err(DiveError::Dataset(format!(
        "could not place {count} objects under the overlap limit"
    )))
}

// ---------------------------------------------------------------------------
// Corpus generation and IO
// ---------------------------------------------------------------------------

fn write_png(img: &Array3<u8>, path: &Path) -> Result<()> {
    let (c, h, w) = img.dim();
    debug_assert_eq!(c, 3);
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            buf.put_pixel(
                x as u32,
                y as u32,
                image::Rgb([img[[0, y, x]], img[[1, y, x]], img[[2, y, x]]]),
            );
        }
    }
    buf.save(path)
        .map_err(|e| DiveError::Dataset(format!("writing {}: {e}", path.display())))
}

fn read_png(path: &Path) -> Result<Array3<u8>> {
    let img = image::open(path)
        .map_err(|e| DiveError::Dataset(format!("reading {}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Array3::<u8>::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            let p = img.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                out[[c, y, x]] = p[c];
            }
        }
    }
    Ok(out)
}

fn write_corpus(
    out_dir: &Path,
    spec: CorpusSpec,
    examples: Vec<(Array3<u8>, ExampleLabel)>,
) -> Result<DatasetManifest> {
    let image_dir = out_dir.join("images");
    fs::create_dir_all(&image_dir)?;
    let mut labels = BufWriter::new(fs::File::create(out_dir.join(LABELS_FILE))?);
    let n_images = examples.len();
    for (i, (img, label)) in examples.into_iter().enumerate() {
        let rel = format!("images/{i:05}.png");
        write_png(&img, &out_dir.join(&rel))?;
        let record = LabelRecord { image: rel, label };
        serde_json::to_writer(&mut labels, &record)
            .map_err(|e| DiveError::Dataset(format!("label record: {e}")))?;
        labels.write_all(b"\n")?;
    }
    labels.flush()?;
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        spec,
        n_images,
        image_dir: "images".into(),
        labels_file: LABELS_FILE.into(),
    };
    let mut mf = BufWriter::new(fs::File::create(out_dir.join(MANIFEST_FILE))?);
    serde_json::to_writer_pretty(&mut mf, &manifest)
        .map_err(|e| DiveError::Dataset(format!("manifest: {e}")))?;
    mf.write_all(b"\n")?;
    mf.flush()?;
    Ok(manifest)
}

/// Generate the shapes-detection corpus. Bit-reproducible per seed: every
/// example is rendered from a seed derived as spec.seed + index.
pub fn gen_detection_corpus(spec: &ShapesCorpusSpec, out_dir: &Path) -> Result<DatasetManifest> {
    if spec.num_classes == 0 || spec.max_objects == 0 || spec.img_size == 0 {
        return Err(DiveError::Config("corpus dimensions must be positive".into()));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
    let mut examples = Vec::with_capacity(spec.n_images);
    for i in 0..spec.n_images {
        let label = sample_layout(spec, &mut rng)?;
        label.validate(spec.img_size as u32, spec.num_classes)?;
        let img = render_detection(&label, spec.img_size, spec.seed.wrapping_add(i as u64));
        examples.push((img, ExampleLabel::Objects { objects: label.objects }));
    }
    write_corpus(out_dir, CorpusSpec::Detection(spec.clone()), examples)
}

/// Generate the balanced classification corpus: class of example i is i mod C.
pub fn gen_classification_corpus(
    seed: u64,
    n_images: usize,
    img_size: usize,
    num_classes: usize,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    if num_classes < 2 {
        return Err(DiveError::Config("classification needs at least 2 classes".into()));
    }
    let mut examples = Vec::with_capacity(n_images);
    for i in 0..n_images {
        let class = i % num_classes;
        let img = render_classification(class, img_size, seed.wrapping_add(i as u64));
        examples.push((img, ExampleLabel::Class { class }));
    }
    write_corpus(
        out_dir,
        CorpusSpec::Classification { seed, n_images, img_size, num_classes },
        examples,
    )
}

/// An on-disk corpus opened for reading.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    root: PathBuf,
    records: Vec<LabelRecord>,
}

impl Dataset {
    /// Open a manifest and parse all label records; examples keep manifest order.
    pub fn load(manifest_path: &Path) -> Result<Dataset> {
        let root = manifest_path
            .parent()
            .ok_or_else(|| DiveError::Dataset("manifest has no parent directory".into()))?
            .to_path_buf();
        let raw = fs::read_to_string(manifest_path).map_err(|e| {
            DiveError::Dataset(format!("reading {}: {e}", manifest_path.display()))
        })?;
        let manifest: DatasetManifest = serde_json::from_str(&raw)
            .map_err(|e| DiveError::Dataset(format!("parsing manifest: {e}")))?;
        if manifest.version != MANIFEST_VERSION {
            return Err(DiveError::Dataset(format!(
                "manifest version {} unsupported (expected {MANIFEST_VERSION})",
                manifest.version
            )));
        }
        let labels_path = root.join(&manifest.labels_file);
        let file = fs::File::open(&labels_path)
            .map_err(|e| DiveError::Dataset(format!("reading {}: {e}", labels_path.display())))?;
        let mut records = Vec::with_capacity(manifest.n_images);
        for (ln, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: LabelRecord = serde_json::from_str(&line)
                .map_err(|e| DiveError::Dataset(format!("label line {}: {e}", ln + 1)))?;
            records.push(rec);
        }
        if records.len() != manifest.n_images {
            return Err(DiveError::Dataset(format!(
                "manifest declares {} examples but {} label records were found",
                manifest.n_images,
                records.len()
            )));
        }
        Ok(Dataset { manifest, root, records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn record(&self, idx: usize) -> &LabelRecord {
        &self.records[idx]
    }

    pub fn label(&self, idx: usize) -> &ExampleLabel {
        &self.records[idx].label
    }

    pub fn image_u8(&self, idx: usize) -> Result<Array3<u8>> {
        read_png(&self.root.join(&self.records[idx].image))
    }

    /// Image as model input in [-1, 1].
    pub fn model_input(&self, idx: usize) -> Result<ArrayD<f64>> {
        Ok(to_model_input(&self.image_u8(idx)?))
    }

    /// Seeded Fisher-Yates order over the examples.
    pub fn shuffled_indices(&self, seed: u64) -> Vec<usize> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut idx: Vec<usize> = (0..self.records.len()).collect();
        for i in (1..idx.len()).rev() {
            let j = rng.random_range(0..=i);
            idx.swap(i, j);
        }
        idx
    }

    /// Materialize (image, class) pairs for classifier training.
    pub fn classification_pairs(&self) -> Result<Vec<(ArrayD<f64>, usize)>> {
        (0..self.len())
            .map(|i| {
                let class = match self.label(i) {
                    ExampleLabel::Class { class } => *class,
                    _ => return Err(DiveError::Dataset(format!("example {i} is not a class label"))),
                };
                Ok((self.model_input(i)?, class))
            })
            .collect()
    }

    /// Materialize (image, detection label) pairs for layout training.
    pub fn detection_pairs(&self) -> Result<Vec<(ArrayD<f64>, DetectionLabel)>> {
        (0..self.len())
            .map(|i| {
                let label = match self.label(i) {
                    ExampleLabel::Objects { objects } => DetectionLabel { objects: objects.clone() },
                    _ => return Err(DiveError::Dataset(format!("example {i} is not a detection label"))),
                };
                Ok((self.model_input(i)?, label))
            })
            .collect()
    }

    pub fn detection_label(&self, idx: usize) -> Result<DetectionLabel> {
        match self.label(idx) {
            ExampleLabel::Objects { objects } => Ok(DetectionLabel { objects: objects.clone() }),
            _ => Err(DiveError::Dataset(format!("example {idx} is not a detection label"))),
        }
    }

    pub fn class_label(&self, idx: usize) -> Result<usize> {
        match self.label(idx) {
            ExampleLabel::Class { class } => Ok(*class),
            _ => Err(DiveError::Dataset(format!("example {idx} is not a class label"))),
        }
    }
}

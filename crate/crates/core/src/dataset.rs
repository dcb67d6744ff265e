//! Dataset ingestion, procedural scene synthesis, splits, and patch
//! extraction.
//!
//! On-disk datasets are a directory with an `index.txt` whose lines are
//! `<rgb_relpath>\t<depth_relpath>\t<scene_label>`. RGB images are 8-bit
//! PNG, depth maps 16-bit single-channel PNG in raw units; a `depth_scale`
//! factor converts raw units to meters. Raw zeros are treated as missing
//! depth.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

/// Scene classes of the staged few-shot protocol, in protocol order.
pub const FEW_SHOT_CLASS_ORDER: [&str; 4] = ["bedroom", "bathroom", "diningroom", "kitchen"];

/// Default training scene for zero-shot runs.
pub const DEFAULT_ZERO_SHOT_TRAIN_SCENE: &str = "bedroom";

// ---- domain types ----

/// Interleaved RGB image with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape("image dimensions must be positive".into()));
        }
        if data.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "rgb buffer length {} != {height}x{width}x3",
                data.len()
            )));
        }
        if !data.iter().all(|v| (0.0..=1.0).contains(v)) {
            return Err(Error::Numeric("rgb values must lie in [0,1]".into()));
        }
        Ok(RgbImage {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                let px = f(y, x);
                data.extend_from_slice(&[
                    px[0].clamp(0.0, 1.0),
                    px[1].clamp(0.0, 1.0),
                    px[2].clamp(0.0, 1.0),
                ]);
            }
        }
        RgbImage {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Bilinear resize with half-pixel centers.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> RgbImage {
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        RgbImage::from_fn(height, width, |y, x| {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
            let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(self.height - 1), (x0 + 1).min(self.width - 1));
            let (wy, wx) = (fy - y0 as f64, fx - x0 as f64);
            let mut out = [0.0; 3];
            for (c, o) in out.iter_mut().enumerate() {
                let v00 = self.pixel(y0, x0)[c];
                let v01 = self.pixel(y0, x1)[c];
                let v10 = self.pixel(y1, x0)[c];
                let v11 = self.pixel(y1, x1)[c];
                *o = v00 * (1.0 - wy) * (1.0 - wx)
                    + v01 * (1.0 - wy) * wx
                    + v10 * wy * (1.0 - wx)
                    + v11 * wy * wx;
            }
            out
        })
    }
}

/// Per-pixel metric depth with a validity mask. Valid pixels are strictly
/// positive; invalid pixels are excluded from every loss and metric.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    height: usize,
    width: usize,
    depth: Vec<f64>,
    valid: Vec<bool>,
}

impl DepthMap {
    pub fn new(height: usize, width: usize, depth: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        if depth.len() != height * width || valid.len() != height * width {
            return Err(Error::Shape(format!(
                "depth buffer length {} != {height}x{width}",
                depth.len()
            )));
        }
        for (d, &v) in depth.iter().zip(valid.iter()) {
            // the negated form also rejects NaN
            #[allow(clippy::neg_cmp_op_on_partial_ord)]
            if v && !(*d > 0.0) {
                return Err(Error::Numeric(format!("valid depth must be > 0, got {d}")));
            }
        }
        Ok(DepthMap {
            height,
            width,
            depth,
            valid,
        })
    }

    /// All-valid map from strictly positive depths.
    pub fn dense(height: usize, width: usize, depth: Vec<f64>) -> Result<Self> {
        let valid = vec![true; depth.len()];
        DepthMap::new(height, width, depth, valid)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn depth(&self) -> &[f64] {
        &self.depth
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.depth[y * self.width + x]
    }

    pub fn is_valid(&self, y: usize, x: usize) -> bool {
        self.valid[y * self.width + x]
    }

    pub fn n_valid(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// Nearest-neighbor resize; avoids inventing depths across object
    /// boundaries.
    pub fn resize_nearest(&self, height: usize, width: usize) -> DepthMap {
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        let mut depth = Vec::with_capacity(height * width);
        let mut valid = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                let fy = (((y as f64 + 0.5) * sy).floor() as usize).min(self.height - 1);
                let fx = (((x as f64 + 0.5) * sx).floor() as usize).min(self.width - 1);
                depth.push(self.depth[fy * self.width + fx]);
                valid.push(self.valid[fy * self.width + fx]);
            }
        }
        DepthMap {
            height,
            width,
            depth,
            valid,
        }
    }
}

/// One RGB/depth pair with its scene label.
#[derive(Debug, Clone)]
pub struct SceneSample {
    pub image: RgbImage,
    pub depth: DepthMap,
    pub scene_label: String,
}

#[derive(Debug, Clone)]
pub struct ManifestEntry {
    pub rgb_path: PathBuf,
    pub depth_path: PathBuf,
    pub scene_label: String,
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
    pub depth_scale: f64,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scene_labels(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.scene_label.clone()).collect()
    }
}

/// Split protocols over a labeled sample pool.
#[derive(Debug, Clone, PartialEq)]
pub enum SplitProtocol {
    /// Train on the first k staged scene classes.
    KShot(usize),
    /// Exactly one training image per scene type present in the pool.
    FewShotOnePerScene,
    /// Train on one scene, test on every other scene.
    ZeroShot(String),
}

#[derive(Debug, Clone)]
pub struct SplitSpec {
    pub protocol: SplitProtocol,
    pub seed: u64,
}

/// Pool indices for one experiment run.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

// ---- manifest loading ----

/// Reads `index.txt` under `dir`. Entries keep index-file order; every
/// referenced file must exist.
pub fn load_manifest(dir: &Path, depth_scale: f64) -> Result<DatasetManifest> {
    let index = dir.join("index.txt");
    let text = fs::read_to_string(&index).map_err(|e| Error::Ingest {
        path: index.clone(),
        msg: format!("cannot read index: {e}"),
    })?;
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::IngestLine {
                path: index.clone(),
                line: lineno + 1,
                msg: format!("expected 3 tab-separated fields, got {}", fields.len()),
            });
        }
        if fields[2].trim().is_empty() {
            return Err(Error::IngestLine {
                path: index.clone(),
                line: lineno + 1,
                msg: "empty scene label".into(),
            });
        }
        let entry = ManifestEntry {
            rgb_path: dir.join(fields[0]),
            depth_path: dir.join(fields[1]),
            scene_label: fields[2].trim().to_string(),
        };
        for p in [&entry.rgb_path, &entry.depth_path] {
            if !p.exists() {
                return Err(Error::IngestLine {
                    path: index.clone(),
                    line: lineno + 1,
                    msg: format!("referenced file {} does not exist", p.display()),
                });
            }
        }
        entries.push(entry);
    }
    Ok(DatasetManifest {
        root: dir.to_path_buf(),
        entries,
        depth_scale,
    })
}

/// Loads one manifest entry at the requested square resolution. The image
/// is resized bilinearly, depth by nearest neighbor; raw depth is scaled to
/// meters and raw zeros are marked invalid.
pub fn load_sample(
    manifest: &DatasetManifest,
    index: usize,
    resolution: usize,
) -> Result<SceneSample> {
    let entry = manifest.entries.get(index).ok_or(Error::Range {
        index,
        len: manifest.entries.len(),
    })?;
    let image = read_rgb_png(&entry.rgb_path)?.resize_bilinear(resolution, resolution);
    let (h, w, raw_vals) = read_depth_png16(&entry.depth_path)?;
    let mut depth = Vec::with_capacity(raw_vals.len());
    let mut valid = Vec::with_capacity(raw_vals.len());
    for &r in &raw_vals {
        if r == 0 {
            depth.push(0.0);
            valid.push(false);
        } else {
            depth.push(r as f64 * manifest.depth_scale);
            valid.push(true);
        }
    }
    let depth = DepthMap {
        height: h,
        width: w,
        depth,
        valid,
    }
    .resize_nearest(resolution, resolution);
    Ok(SceneSample {
        image,
        depth,
        scene_label: entry.scene_label.clone(),
    })
}

// ---- PNG io ----

pub fn read_rgb_png(path: &Path) -> Result<RgbImage> {
    let file = fs::File::open(path).map_err(|e| Error::Ingest {
        path: path.to_path_buf(),
        msg: format!("cannot open: {e}"),
    })?;
    let decoder = png::Decoder::new(file);
    let mut reader = decoder.read_info().map_err(|e| Error::Ingest {
        path: path.to_path_buf(),
        msg: format!("png decode: {e}"),
    })?;
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Ingest {
        path: path.to_path_buf(),
        msg: format!("png frame: {e}"),
    })?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Ingest {
            path: path.to_path_buf(),
            msg: format!("expected 8-bit RGB png, got {:?}", info.bit_depth),
        });
    }
    let (h, w) = (info.height as usize, info.width as usize);
    let channels = match info.color_type {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => {
            return Err(Error::Ingest {
                path: path.to_path_buf(),
                msg: format!("expected RGB png, got {other:?}"),
            })
        }
    };
    let mut data = Vec::with_capacity(h * w * 3);
    for px in buf[..h * w * channels].chunks(channels) {
        data.extend_from_slice(&[
            px[0] as f64 / 255.0,
            px[1] as f64 / 255.0,
            px[2] as f64 / 255.0,
        ]);
    }
    RgbImage::new(h, w, data)
}

pub fn write_rgb_png(path: &Path, image: &RgbImage) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(
        BufWriter::new(file),
        image.width as u32,
        image.height as u32,
    );
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| Error::Ingest {
        path: path.to_path_buf(),
        msg: format!("png header: {e}"),
    })?;
    let bytes: Vec<u8> = image
        .data
        .iter()
        .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    writer.write_image_data(&bytes).map_err(|e| Error::Ingest {
        path: path.to_path_buf(),
        msg: format!("png write: {e}"),
    })?;
    Ok(())
}

/// 16-bit single-channel PNG in raw units; returns (height, width, values).
pub fn read_depth_png16(path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    let file = fs::File::open(path).map_err(|e| Error::Ingest {
        path: path.to_path_buf(),
        msg: format!("cannot open: {e}"),
    })?;
    let mut decoder = png::Decoder::new(file);
    // keep all 16 bits
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| Error::Ingest {
        path: path.to_path_buf(),
        msg: format!("png decode: {e}"),
    })?;
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Ingest {
        path: path.to_path_buf(),
        msg: format!("png frame: {e}"),
    })?;
    if info.bit_depth != png::BitDepth::Sixteen || info.color_type != png::ColorType::Grayscale {
        return Err(Error::Ingest {
            path: path.to_path_buf(),
            msg: format!(
                "expected 16-bit grayscale png, got {:?} {:?}",
                info.bit_depth, info.color_type
            ),
        });
    }
    let (h, w) = (info.height as usize, info.width as usize);
    let vals = buf[..h * w * 2]
        .chunks_exact(2)
        .map(|b| u16::from_be_bytes([b[0], b[1]]))
        .collect();
    Ok((h, w, vals))
}

pub fn write_depth_png16(path: &Path, height: usize, width: usize, raw: &[u16]) -> Result<()> {
    assert_eq!(raw.len(), height * width);
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Sixteen);
    let mut writer = enc.write_header().map_err(|e| Error::Ingest {
        path: path.to_path_buf(),
        msg: format!("png header: {e}"),
    })?;
    let mut bytes = Vec::with_capacity(raw.len() * 2);
    for v in raw {
        bytes.extend_from_slice(&v.to_be_bytes());
    }
    writer.write_image_data(&bytes).map_err(|e| Error::Ingest {
        path: path.to_path_buf(),
        msg: format!("png write: {e}"),
    })?;
    Ok(())
}

// ---- synthetic scenes ----

const PLANE_DEPTH_RANGE: (f64, f64) = (4.0, 10.0);
const BOX_DEPTH_MIN: f64 = 0.5;

/// Axis-aligned box in pixel coordinates at a fixed fronto-parallel depth.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneBox {
    pub x0: usize,
    pub x1: usize,
    pub y0: usize,
    pub y1: usize,
    pub depth: f64,
    pub albedo: [f64; 3],
}

/// Analytic description of a procedural scene: a background plane plus one
/// to three boxes in front of it. Depth at a pixel is the minimum over the
/// surfaces covering it.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneGeometry {
    pub resolution: usize,
    pub plane_depth: f64,
    pub plane_albedo: [f64; 3],
    pub boxes: Vec<SceneBox>,
}

impl SceneGeometry {
    pub fn depth_at(&self, y: usize, x: usize) -> f64 {
        let mut d = self.plane_depth;
        for b in &self.boxes {
            if x >= b.x0 && x < b.x1 && y >= b.y0 && y < b.y1 {
                d = d.min(b.depth);
            }
        }
        d
    }

    fn albedo_at(&self, y: usize, x: usize) -> [f64; 3] {
        let mut albedo = self.plane_albedo;
        let mut d = self.plane_depth;
        for b in &self.boxes {
            if x >= b.x0 && x < b.x1 && y >= b.y0 && y < b.y1 && b.depth < d {
                d = b.depth;
                albedo = b.albedo;
            }
        }
        albedo
    }
}

fn label_hash(label: &str) -> u64 {
    // FNV-1a
    let mut h: u64 = 0xcbf29ce484222325;
    for b in label.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * (rng.next_u64() as f64 / u64::MAX as f64)
}

/// Deterministic scene parameters for (seed, resolution, label).
pub fn synthetic_geometry(seed: u64, resolution: usize, scene_label: &str) -> SceneGeometry {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ label_hash(scene_label));
    let plane_depth = uniform(&mut rng, PLANE_DEPTH_RANGE.0, PLANE_DEPTH_RANGE.1);
    let plane_albedo = [
        uniform(&mut rng, 0.4, 1.0),
        uniform(&mut rng, 0.4, 1.0),
        uniform(&mut rng, 0.4, 1.0),
    ];
    let n_boxes = 1 + (rng.next_u64() % 3) as usize;
    let mut boxes = Vec::with_capacity(n_boxes);
    for _ in 0..n_boxes {
        let bw = (resolution / 5).max(1) + (rng.next_u64() as usize % (resolution / 3).max(1));
        let bh = (resolution / 5).max(1) + (rng.next_u64() as usize % (resolution / 3).max(1));
        let x0 = rng.next_u64() as usize % (resolution.saturating_sub(bw)).max(1);
        let y0 = rng.next_u64() as usize % (resolution.saturating_sub(bh)).max(1);
        boxes.push(SceneBox {
            x0,
            x1: (x0 + bw).min(resolution),
            y0,
            y1: (y0 + bh).min(resolution),
            depth: uniform(&mut rng, BOX_DEPTH_MIN, plane_depth),
            albedo: [
                uniform(&mut rng, 0.2, 1.0),
                uniform(&mut rng, 0.2, 1.0),
                uniform(&mut rng, 0.2, 1.0),
            ],
        });
    }
    SceneGeometry {
        resolution,
        plane_depth,
        plane_albedo,
        boxes,
    }
}

/// Procedural desk-scale scene with analytically exact depth. The RGB image
/// is the surface albedo shaded by inverse depth, so nearer surfaces render
/// brighter. Deterministic in (seed, resolution, scene_label).
pub fn generate_synthetic_scene(seed: u64, resolution: usize, scene_label: &str) -> SceneSample {
    let geo = synthetic_geometry(seed, resolution, scene_label);
    let image = RgbImage::from_fn(resolution, resolution, |y, x| {
        let d = geo.depth_at(y, x);
        let albedo = geo.albedo_at(y, x);
        let shade = (1.0 / d - 1.0 / PLANE_DEPTH_RANGE.1)
            / (1.0 / BOX_DEPTH_MIN - 1.0 / PLANE_DEPTH_RANGE.1);
        let shade = 0.15 + 0.85 * shade.clamp(0.0, 1.0);
        [albedo[0] * shade, albedo[1] * shade, albedo[2] * shade]
    });
    let mut depth = Vec::with_capacity(resolution * resolution);
    for y in 0..resolution {
        for x in 0..resolution {
            depth.push(geo.depth_at(y, x));
        }
    }
    let depth = DepthMap::dense(resolution, resolution, depth).expect("synthetic depth positive");
    SceneSample {
        image,
        depth,
        scene_label: scene_label.to_string(),
    }
}

/// Labeled synthetic pool cycling through `labels`.
pub fn synthetic_pool(
    count: usize,
    seed: u64,
    resolution: usize,
    labels: &[String],
) -> Vec<SceneSample> {
    assert!(!labels.is_empty());
    (0..count)
        .map(|i| {
            let label = &labels[i % labels.len()];
            generate_synthetic_scene(seed.wrapping_add(i as u64), resolution, label)
        })
        .collect()
}

// ---- splits ----

fn shuffled(indices: &mut [usize], rng: &mut ChaCha8Rng) {
    // Fisher-Yates
    for i in (1..indices.len()).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        indices.swap(i, j);
    }
}

fn by_class(labels: &[String]) -> Vec<(String, Vec<usize>)> {
    let mut classes: Vec<(String, Vec<usize>)> = Vec::new();
    for (i, l) in labels.iter().enumerate() {
        match classes.iter_mut().find(|(name, _)| name == l) {
            Some((_, v)) => v.push(i),
            None => classes.push((l.clone(), vec![i])),
        }
    }
    classes.sort_by(|a, b| a.0.cmp(&b.0));
    classes
}

/// Partitions a labeled pool into train/val/test index lists.
///
/// `per_class_cap` bounds the images taken per training class in the staged
/// protocol. Validation is held out from the training classes and is always
/// disjoint from train; everything else lands in test.
pub fn make_split(labels: &[String], spec: &SplitSpec, per_class_cap: usize) -> Result<Split> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut classes = by_class(labels);
    for (_, idxs) in classes.iter_mut() {
        shuffled(idxs, &mut rng);
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut taken = vec![false; labels.len()];

    match &spec.protocol {
        SplitProtocol::KShot(k) => {
            if !(1..=FEW_SHOT_CLASS_ORDER.len()).contains(k) {
                return Err(Error::Config(format!(
                    "k must be in 1..={}, got {k}",
                    FEW_SHOT_CLASS_ORDER.len()
                )));
            }
            for class in &FEW_SHOT_CLASS_ORDER[..*k] {
                let idxs = classes
                    .iter()
                    .find(|(name, _)| name == class)
                    .map(|(_, v)| v.clone())
                    .ok_or_else(|| Error::Split {
                        class: class.to_string(),
                    })?;
                let n_train = idxs.len().min(per_class_cap);
                let n_val = ((per_class_cap / 5).max(1)).min(idxs.len() - n_train);
                for &i in &idxs[..n_train] {
                    train.push(i);
                    taken[i] = true;
                }
                for &i in &idxs[n_train..n_train + n_val] {
                    val.push(i);
                    taken[i] = true;
                }
            }
        }
        SplitProtocol::FewShotOnePerScene => {
            for (_, idxs) in &classes {
                train.push(idxs[0]);
                taken[idxs[0]] = true;
                if idxs.len() > 1 {
                    val.push(idxs[1]);
                    taken[idxs[1]] = true;
                }
            }
        }
        SplitProtocol::ZeroShot(scene) => {
            let idxs = classes
                .iter()
                .find(|(name, _)| name == scene)
                .map(|(_, v)| v.clone())
                .ok_or_else(|| Error::Split {
                    class: scene.clone(),
                })?;
            if classes.len() < 2 {
                return Err(Error::Split {
                    class: "any scene other than the training scene".into(),
                });
            }
            let n_train = idxs.len().min(per_class_cap).max(1);
            let n_val = (idxs.len() - n_train).min((per_class_cap / 5).max(1));
            for &i in &idxs[..n_train] {
                train.push(i);
                taken[i] = true;
            }
            for &i in &idxs[n_train..n_train + n_val] {
                val.push(i);
                taken[i] = true;
            }
            // every non-training scene goes to test; training-scene
            // leftovers are dropped to keep the scene sets disjoint
            let test: Vec<usize> = (0..labels.len())
                .filter(|i| !taken[*i] && &labels[*i] != scene)
                .collect();
            let mut split = Split { train, val, test };
            ensure_val(&mut split);
            return Ok(split);
        }
    }

    let test: Vec<usize> = (0..labels.len()).filter(|i| !taken[*i]).collect();
    let mut split = Split { train, val, test };
    ensure_val(&mut split);
    Ok(split)
}

/// Early stopping needs a validation loss; when the pool is too small to
/// hold out a dedicated image, fall back to the last training image.
fn ensure_val(split: &mut Split) {
    if split.val.is_empty() && split.train.len() > 1 {
        split.val.push(split.train.pop().expect("non-empty train"));
    }
}

// ---- patches ----

/// Splits an image into non-overlapping square patches, row-major patch
/// order, each flattened in (row, column, channel) order.
pub fn patchify(image: &RgbImage, patch_size: usize) -> Result<Tensor> {
    if patch_size == 0
        || !image.height.is_multiple_of(patch_size)
        || !image.width.is_multiple_of(patch_size)
    {
        return Err(Error::Shape(format!(
            "image {}x{} not divisible by patch size {patch_size}",
            image.height, image.width
        )));
    }
    let (gh, gw) = (image.height / patch_size, image.width / patch_size);
    let n = gh * gw;
    let dim = patch_size * patch_size * 3;
    let mut data = Vec::with_capacity(n * dim);
    for py in 0..gh {
        for px in 0..gw {
            for iy in 0..patch_size {
                for ix in 0..patch_size {
                    let pix = image.pixel(py * patch_size + iy, px * patch_size + ix);
                    data.extend_from_slice(&pix);
                }
            }
        }
    }
    Ok(Tensor::new([n, dim], data))
}

/// Inverse of [`patchify`].
pub fn unpatchify(
    patches: &Tensor,
    height: usize,
    width: usize,
    patch_size: usize,
) -> Result<RgbImage> {
    let (gh, gw) = (height / patch_size, width / patch_size);
    let dim = patch_size * patch_size * 3;
    if patches.shape() != [gh * gw, dim] {
        return Err(Error::Shape(format!(
            "patches {:?} do not match {height}x{width} p={patch_size}",
            patches.shape()
        )));
    }
    let mut data = vec![0.0; height * width * 3];
    for py in 0..gh {
        for px in 0..gw {
            let row = patches.row(py * gw + px);
            let mut k = 0;
            for iy in 0..patch_size {
                for ix in 0..patch_size {
                    let y = py * patch_size + iy;
                    let x = px * patch_size + ix;
                    let base = (y * width + x) * 3;
                    data[base] = row[k];
                    data[base + 1] = row[k + 1];
                    data[base + 2] = row[k + 2];
                    k += 3;
                }
            }
        }
    }
    RgbImage::new(height, width, data)
}

//! Dataset directory layout and (de)serialization.
//!
//! A dataset directory holds `index.jsonl` (one JSON object per sample:
//! id, category, camera fields, primitives as 10-field arrays, 2D boxes,
//! folded count) plus `depth/<id>.f32` rasters: an 8-byte header (u32 width,
//! u32 height, little-endian) followed by row-major 32-bit floats. The
//! round trip is bit-exact.

use super::{
    fold_indices, project_boxes, render_depth, sample_views, Camera, ObjectTemplate, CAMERA_RADIUS,
    TAU_SYM, VIEWS_PER_OBJECT,
};
use crate::error::{Error, Result};
use crate::geometry::Primitive;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

/// One depth image with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSample {
    pub id: u32,
    pub category: String,
    pub camera: Camera,
    /// Full-object primitives (both symmetric halves).
    pub primitives: Vec<Primitive>,
    /// Semantic labels aligned with `primitives` (1-based).
    pub labels: Vec<u32>,
    /// Normalized 2D part boxes aligned with `primitives`.
    pub boxes: Vec<[f64; 4]>,
    /// Folded primitive count (left half plus on-plane parts).
    pub n_o: usize,
    /// Row-major depth raster, width*height values, 0 = background.
    pub depth: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraRecord {
    position: [f64; 3],
    focal: f64,
    width: u32,
    height: u32,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IndexRecord {
    id: u32,
    category: String,
    camera: CameraRecord,
    primitives: Vec<[f64; 10]>,
    boxes: Vec<[f64; 4]>,
    n_o: usize,
}

/// Generates `count` samples from a template: each object is rendered from
/// [`VIEWS_PER_OBJECT`] camera views until the budget is reached. A
/// (template, seed) pair yields a byte-identical dataset directory.
pub fn generate_dataset(
    template: &ObjectTemplate,
    count: usize,
    seed: u64,
) -> Result<Vec<DatasetSample>> {
    if count == 0 {
        return Err(Error::EmptyInput(
            "dataset needs at least one sample".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(count);
    let mut id = 0u32;
    while samples.len() < count {
        let (prims, labels) = template.generate(&mut rng);
        let n_o = fold_indices(&prims, TAU_SYM).len();
        let views = sample_views(&mut rng, VIEWS_PER_OBJECT, CAMERA_RADIUS);
        for camera in views {
            if samples.len() == count {
                break;
            }
            let depth = render_depth(&prims, &camera);
            let boxes = project_boxes(&prims, &camera)?;
            samples.push(DatasetSample {
                id,
                category: template.category.to_string(),
                camera,
                primitives: prims.clone(),
                labels: labels.clone(),
                boxes,
                n_o,
                depth,
            });
            id += 1;
        }
    }
    Ok(samples)
}

/// Writes samples (ascending id) into `dir`.
pub fn write_dataset(samples: &[DatasetSample], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir.join("depth"))?;
    let mut index = std::io::BufWriter::new(std::fs::File::create(dir.join("index.jsonl"))?);
    for s in samples {
        let mut prims = Vec::with_capacity(s.primitives.len());
        for (p, &label) in s.primitives.iter().zip(&s.labels) {
            let v = p.params();
            let mut row = [0.0; 10];
            row[0] = label as f64;
            row[1..].copy_from_slice(&v);
            prims.push(row);
        }
        let record = IndexRecord {
            id: s.id,
            category: s.category.clone(),
            camera: CameraRecord {
                position: s.camera.position,
                focal: s.camera.focal,
                width: s.camera.width,
                height: s.camera.height,
            },
            primitives: prims,
            boxes: s.boxes.clone(),
            n_o: s.n_o,
        };
        serde_json::to_writer(&mut index, &record)
            .map_err(|e| Error::Parse(format!("cannot serialize sample {}: {e}", s.id)))?;
        index.write_all(b"\n")?;

        let mut f = std::io::BufWriter::new(std::fs::File::create(
            dir.join("depth").join(format!("{}.f32", s.id)),
        )?);
        f.write_all(&s.camera.width.to_le_bytes())?;
        f.write_all(&s.camera.height.to_le_bytes())?;
        for &v in &s.depth {
            f.write_all(&v.to_le_bytes())?;
        }
        f.flush()?;
    }
    index.flush()?;
    Ok(())
}

/// Reads a dataset directory back; validates the strict schema and the
/// per-sample invariants.
pub fn read_dataset(dir: &Path) -> Result<Vec<DatasetSample>> {
    let index_path = dir.join("index.jsonl");
    let text = std::fs::read_to_string(&index_path)
        .map_err(|e| Error::Parse(format!("cannot read {}: {e}", index_path.display())))?;
    let mut samples = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: IndexRecord = serde_json::from_str(line)
            .map_err(|e| Error::Parse(format!("index line {}: {e}", lineno + 1)))?;
        let sample = load_sample(dir, record)?;
        samples.push(sample);
    }
    if samples.is_empty() {
        return Err(Error::EmptyInput(format!(
            "dataset {} has no samples",
            dir.display()
        )));
    }
    Ok(samples)
}

fn load_sample(dir: &Path, record: IndexRecord) -> Result<DatasetSample> {
    let id = record.id;
    let mut primitives = Vec::with_capacity(record.primitives.len());
    let mut labels = Vec::with_capacity(record.primitives.len());
    for row in &record.primitives {
        let label = row[0];
        if label < 1.0 || label.fract() != 0.0 {
            return Err(Error::Parse(format!(
                "sample {id}: bad semantic label {label}"
            )));
        }
        labels.push(label as u32);
        let mut p = [0.0; 9];
        p.copy_from_slice(&row[1..]);
        primitives.push(
            Primitive::from_params(&p)
                .map_err(|e| Error::Parse(format!("sample {id}: invalid primitive: {e}")))?,
        );
    }
    if record.boxes.len() != primitives.len() {
        return Err(Error::Parse(format!(
            "sample {id}: {} boxes for {} primitives",
            record.boxes.len(),
            primitives.len()
        )));
    }
    for b in &record.boxes {
        if !(0.0..=1.0).contains(&b[0])
            || !(0.0..=1.0).contains(&b[1])
            || b[0] > b[2]
            || b[1] > b[3]
            || b[2] > 1.0
            || b[3] > 1.0
        {
            return Err(Error::Parse(format!(
                "sample {id}: box {b:?} outside [0,1]^2"
            )));
        }
    }

    let depth_path = dir.join("depth").join(format!("{id}.f32"));
    let mut f = std::fs::File::open(&depth_path)
        .map_err(|e| Error::Parse(format!("sample {id}: cannot open depth raster: {e}")))?;
    let mut header = [0u8; 8];
    f.read_exact(&mut header)
        .map_err(|e| Error::Parse(format!("sample {id}: truncated depth header: {e}")))?;
    let w = u32::from_le_bytes(header[0..4].try_into().unwrap());
    let h = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if w != record.camera.width || h != record.camera.height {
        return Err(Error::Parse(format!(
            "sample {id}: depth raster is {w}x{h}, camera says {}x{}",
            record.camera.width, record.camera.height
        )));
    }
    let n = (w * h) as usize;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes)
        .map_err(|e| Error::Parse(format!("sample {id}: cannot read depth raster: {e}")))?;
    if bytes.len() != n * 4 {
        return Err(Error::Parse(format!(
            "sample {id}: depth raster has {} bytes, expected {}",
            bytes.len(),
            n * 4
        )));
    }
    let depth: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();

    Ok(DatasetSample {
        id,
        category: record.category,
        camera: Camera {
            position: record.camera.position,
            focal: record.camera.focal,
            width: w,
            height: h,
        },
        primitives,
        labels,
        boxes: record.boxes,
        n_o: record.n_o,
        depth,
    })
}

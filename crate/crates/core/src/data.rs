//! Procedural multi-label "shapes" dataset and its on-disk format.
//!
//! Each image holds 1..=max_objects distinct prototypes (fixed shape and
//! fixed color per class) on a noisy dark background. Objects never
//! overlap, so the label vector always matches what is visible.

use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct MultiLabelSample {
    /// `[H, W, ch]`, values in `[0, 1]`.
    pub image: Tensor,
    pub labels: Vec<bool>,
}

impl MultiLabelSample {
    pub fn targets(&self) -> Vec<f64> {
        self.labels.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Prototype {
    Square,
    Circle,
    Triangle,
    Cross,
    Bar,
    Ring,
    Diamond,
    Checker,
}

pub const PROTOTYPES: [Prototype; 8] = [
    Prototype::Square,
    Prototype::Circle,
    Prototype::Triangle,
    Prototype::Cross,
    Prototype::Bar,
    Prototype::Ring,
    Prototype::Diamond,
    Prototype::Checker,
];

impl Prototype {
    pub fn name(self) -> &'static str {
        match self {
            Prototype::Square => "square",
            Prototype::Circle => "circle",
            Prototype::Triangle => "triangle",
            Prototype::Cross => "cross",
            Prototype::Bar => "bar",
            Prototype::Ring => "ring",
            Prototype::Diamond => "diamond",
            Prototype::Checker => "checker",
        }
    }

    pub fn color(self) -> [f64; 3] {
        match self {
            Prototype::Square => [0.9, 0.15, 0.15],
            Prototype::Circle => [0.15, 0.85, 0.2],
            Prototype::Triangle => [0.2, 0.3, 0.95],
            Prototype::Cross => [0.95, 0.9, 0.2],
            Prototype::Bar => [0.9, 0.2, 0.85],
            Prototype::Ring => [0.2, 0.9, 0.9],
            Prototype::Diamond => [1.0, 0.55, 0.1],
            Prototype::Checker => [0.95, 0.95, 0.95],
        }
    }

    /// Whether the box-normalized point `(u, v)` in `[-1, 1]^2` is inside.
    fn covers(self, u: f64, v: f64) -> bool {
        match self {
            Prototype::Square => u.abs() <= 0.8 && v.abs() <= 0.8,
            Prototype::Circle => u * u + v * v <= 0.85 * 0.85,
            Prototype::Triangle => v.abs() <= 0.8 && u.abs() <= 0.9 * (v + 0.8) / 1.6,
            Prototype::Cross => {
                (u.abs() <= 0.25 && v.abs() <= 0.9) || (v.abs() <= 0.25 && u.abs() <= 0.9)
            }
            Prototype::Bar => u.abs() <= 0.9 && v.abs() <= 0.3,
            Prototype::Ring => {
                let r2 = u * u + v * v;
                (0.5 * 0.5..=0.9 * 0.9).contains(&r2)
            }
            Prototype::Diamond => u.abs() + v.abs() <= 0.9,
            Prototype::Checker => {
                u.abs() <= 0.9
                    && v.abs() <= 0.9
                    && (((u + 1.0) * 2.0).floor() as i64 + ((v + 1.0) * 2.0).floor() as i64) % 2 == 0
            }
        }
    }
}

pub fn class_names(num_classes: usize) -> Vec<String> {
    PROTOTYPES[..num_classes.min(PROTOTYPES.len())]
        .iter()
        .map(|p| p.name().to_string())
        .collect()
}

#[derive(Clone, Debug)]
pub struct ShapesConfig {
    pub seed: u64,
    pub n_samples: usize,
    pub num_classes: usize,
    pub image_size: usize,
    pub max_objects: usize,
}

const CHANNELS: usize = 3;
const PLACEMENT_TRIES: usize = 50;

pub fn generate_shapes_dataset(cfg: &ShapesConfig) -> Result<Vec<MultiLabelSample>> {
    if cfg.num_classes == 0 || cfg.num_classes > PROTOTYPES.len() {
        return Err(Error::config(
            "data.num_classes",
            format!("must be in 1..={}, got {}", PROTOTYPES.len(), cfg.num_classes),
        ));
    }
    if cfg.max_objects == 0 {
        return Err(Error::config("data.max_objects", "must be >= 1"));
    }
    if cfg.image_size < 8 {
        return Err(Error::config("data.image_size", "must be >= 8"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..cfg.n_samples).map(|_| render_sample(&mut rng, cfg)).collect()
}

fn render_sample(rng: &mut ChaCha8Rng, cfg: &ShapesConfig) -> Result<MultiLabelSample> {
    let s = cfg.image_size;
    let mut data: Vec<f64> = (0..s * s * CHANNELS).map(|_| rng.gen_range(0.0..0.25)).collect();
    let max_obj = cfg.max_objects.min(cfg.num_classes);
    let count = rng.gen_range(1..=max_obj);
    let classes = sample(rng, cfg.num_classes, count).into_vec();

    let min_size = (s as f64 * 0.25).round() as usize;
    let max_size = (s as f64 * 0.45).round() as usize;
    let mut boxes: Vec<(usize, usize, usize)> = Vec::new();
    let mut labels = vec![false; cfg.num_classes];
    for (n, &class) in classes.iter().enumerate() {
        let mut placed = false;
        for _ in 0..PLACEMENT_TRIES {
            let size = rng.gen_range(min_size..=max_size);
            let x0 = rng.gen_range(0..=s - size);
            let y0 = rng.gen_range(0..=s - size);
            let overlaps = boxes.iter().any(|&(bx, by, bs)| {
                x0 < bx + bs && bx < x0 + size && y0 < by + bs && by < y0 + size
            });
            if !overlaps {
                boxes.push((x0, y0, size));
                placed = true;
                break;
            }
        }
        // the first object always fits on an empty canvas
        if !placed {
            debug_assert!(n > 0);
            continue;
        }
        let (x0, y0, size) = *boxes.last().expect("just placed");
        let proto = PROTOTYPES[class];
        let color = proto.color();
        let half = size as f64 / 2.0;
        for y in y0..y0 + size {
            for x in x0..x0 + size {
                let u = (x as f64 + 0.5 - x0 as f64 - half) / half;
                let v = (y as f64 + 0.5 - y0 as f64 - half) / half;
                if proto.covers(u, v) {
                    let px = &mut data[(y * s + x) * CHANNELS..(y * s + x + 1) * CHANNELS];
                    for (p, c) in px.iter_mut().zip(color) {
                        *p = (c + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0);
                    }
                }
            }
        }
        labels[class] = true;
    }
    // stored as f32 on disk; keep the in-memory copy identical
    data.iter_mut().for_each(|v| *v = f64::from(*v as f32));
    Ok(MultiLabelSample {
        image: Tensor::new(&[s, s, CHANNELS], data)?,
        labels,
    })
}

/// `index.json` of a dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetIndex {
    pub version: u32,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub class_names: Vec<String>,
    pub samples: Vec<IndexEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexEntry {
    pub file: String,
    pub labels: Vec<u8>,
}

/// Raw little-endian `f32` pixels, row-major `[H, W, ch]`.
pub fn image_to_bytes(image: &Tensor) -> Vec<u8> {
    image
        .data()
        .iter()
        .flat_map(|&v| (v as f32).to_le_bytes())
        .collect()
}

pub fn image_from_bytes(bytes: &[u8], shape: &[usize]) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    if bytes.len() != n * 4 {
        return Err(Error::Format(format!(
            "expected {} bytes for image {shape:?}, got {}",
            n * 4,
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    Tensor::new(shape, data)
}

pub fn write_dataset(dir: &Path, samples: &[MultiLabelSample], class_names: &[String]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let first = samples
        .first()
        .ok_or_else(|| Error::Argument("cannot write an empty dataset".into()))?;
    let shape = first.image.shape().to_vec();
    let mut entries = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let file = format!("{i:06}.bin");
        fs::write(dir.join(&file), image_to_bytes(&s.image))?;
        entries.push(IndexEntry {
            file,
            labels: s.labels.iter().map(|&b| u8::from(b)).collect(),
        });
    }
    let index = DatasetIndex {
        version: 1,
        height: shape[0],
        width: shape[1],
        channels: shape[2],
        class_names: class_names.to_vec(),
        samples: entries,
    };
    fs::write(dir.join("index.json"), serde_json::to_string_pretty(&index)?)?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<(DatasetIndex, Vec<MultiLabelSample>)> {
    let index: DatasetIndex = serde_json::from_slice(&fs::read(dir.join("index.json"))?)?;
    let shape = [index.height, index.width, index.channels];
    let samples = index
        .samples
        .iter()
        .map(|e| {
            if e.labels.len() != index.class_names.len() || e.labels.iter().any(|&b| b > 1) {
                return Err(Error::Format(format!("bad label vector for {}", e.file)));
            }
            Ok(MultiLabelSample {
                image: image_from_bytes(&fs::read(dir.join(&e.file))?, &shape)?,
                labels: e.labels.iter().map(|&b| b == 1).collect(),
            })
        })
        .collect::<Result<_>>()?;
    Ok((index, samples))
}

/// Reads a binary PPM (P6, maxval 255) into `[H, W, 3]` in `[0, 1]`.
pub fn read_ppm(bytes: &[u8]) -> Result<Tensor> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PPM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P6" {
        return Err(Error::Format(format!("unsupported PPM magic {}", fields[0])));
    }
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Format(format!("bad PPM header field `{s}`")))
    };
    let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval != 255 {
        return Err(Error::Format("only 8-bit PPM is supported".into()));
    }
    let body = bytes
        .get(pos..pos + w * h * 3)
        .ok_or_else(|| Error::Format("truncated PPM body".into()))?;
    Tensor::new(&[h, w, 3], body.iter().map(|&b| f64::from(b) / 255.0).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(n: usize, max_objects: usize) -> ShapesConfig {
        ShapesConfig {
            seed: 3,
            n_samples: n,
            num_classes: 8,
            image_size: 32,
            max_objects,
        }
    }

    #[test]
    fn single_object_has_one_label() {
        let data = generate_shapes_dataset(&cfg(50, 1)).unwrap();
        assert!(data.iter().all(|s| s.labels.iter().filter(|&&b| b).count() == 1));
    }

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(generate_shapes_dataset(&cfg(20, 4)).unwrap(), generate_shapes_dataset(&cfg(20, 4)).unwrap());
    }

    #[test]
    fn pixel_range() {
        let data = generate_shapes_dataset(&cfg(20, 4)).unwrap();
        assert!(data.iter().all(|s| s.image.data().iter().all(|v| (0.0..=1.0).contains(v))));
    }

    #[test]
    fn too_many_classes_rejected() {
        let mut c = cfg(1, 1);
        c.num_classes = 9;
        assert!(matches!(generate_shapes_dataset(&c), Err(Error::Config { .. })));
    }

    #[test]
    fn ppm_round_trip() {
        let mut bytes = b"P6\n# c\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 0, 0, 255, 51]);
        let t = read_ppm(&bytes).unwrap();
        assert_eq!(t.shape(), &[1, 2, 3]);
        assert_eq!(t.data()[0], 1.0);
        assert_eq!(t.data()[5], 0.2);
        assert!(read_ppm(b"P3\n1 1\n255\n").is_err());
    }
}

//! Multi-domain datasets: synthetic generators, IDX loading, domain splits
//! and batching.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::{keyed, substream, Stream};
use crate::tensor::Tensor;

/// Rotation angles of the rotated-digit benchmark, in degrees.
pub const DEFAULT_ANGLES: [f64; 6] = [0.0, 15.0, 30.0, 45.0, 60.0, 75.0];

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub x: Vec<f64>,
    pub y: usize,
    pub d: usize,
}

/// Latent description of one domain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DomainMeta {
    /// Domain id in the dataset this one was split from (or its own id).
    pub source: usize,
    /// Rotation angle in degrees.
    pub angle: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    pub input_shape: Vec<usize>,
    pub examples: Vec<Example>,
    /// Indexed by domain id.
    pub domains: Vec<DomainMeta>,
    pub label_count: usize,
}

impl DomainDataset {
    pub fn new(
        input_shape: Vec<usize>,
        examples: Vec<Example>,
        domains: Vec<DomainMeta>,
        label_count: usize,
    ) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::Contract("dataset needs at least one example".into()));
        }
        let width: usize = input_shape.iter().product();
        for (i, ex) in examples.iter().enumerate() {
            if ex.x.len() != width {
                return Err(Error::Dimension(format!(
                    "example {i} has {} features, expected {width}",
                    ex.x.len()
                )));
            }
            if ex.y >= label_count || ex.d >= domains.len() {
                return Err(Error::Index(format!(
                    "example {i} has label {} / domain {} outside {label_count} / {}",
                    ex.y,
                    ex.d,
                    domains.len()
                )));
            }
        }
        Ok(Self {
            input_shape,
            examples,
            domains,
            label_count,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn domain_count(&self) -> usize {
        self.domains.len()
    }

    pub fn feature_width(&self) -> usize {
        self.input_shape.iter().product()
    }

    /// Stacks the selected examples into a `[B, ...input_shape]` tensor.
    pub fn stack(&self, indices: &[usize]) -> Tensor {
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.input_shape);
        let data = indices
            .iter()
            .flat_map(|&i| self.examples[i].x.iter().copied())
            .collect();
        Tensor::new(shape, data).expect("examples share a shape")
    }

    pub fn inputs(&self) -> Tensor {
        let all: Vec<usize> = (0..self.len()).collect();
        self.stack(&all)
    }

    pub fn labels(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.y).collect()
    }

    pub fn domain_ids(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.d).collect()
    }

    /// Index of the domain with the given angle, if any.
    pub fn domain_by_angle(&self, angle: f64) -> Option<usize> {
        self.domains
            .iter()
            .position(|m| (m.angle - angle).abs() < 1e-9)
    }

    /// Writes `x_0..x_{r-1},y,d` rows.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let header: Vec<String> = (0..self.feature_width())
            .map(|i| format!("x_{i}"))
            .chain(["y".to_string(), "d".to_string()])
            .collect();
        writeln!(w, "{}", header.join(","))?;
        for ex in &self.examples {
            let mut fields: Vec<String> = ex.x.iter().map(|v| v.to_string()).collect();
            fields.push(ex.y.to_string());
            fields.push(ex.d.to_string());
            writeln!(w, "{}", fields.join(","))?;
        }
        Ok(())
    }
}

fn domain_table(angles: &[f64]) -> Vec<DomainMeta> {
    angles
        .iter()
        .enumerate()
        .map(|(source, &angle)| DomainMeta { source, angle })
        .collect()
}

/// Counter-clockwise rotation of `(x, y)` by `degrees`.
pub fn rotate_point(p: [f64; 2], degrees: f64) -> [f64; 2] {
    let (s, c) = degrees.to_radians().sin_cos();
    [c * p[0] - s * p[1], s * p[0] + c * p[1]]
}

/// Class anchor `k` of `num_labels`, evenly spaced on the unit circle.
pub fn cloud_anchor(k: usize, num_labels: usize) -> [f64; 2] {
    let t = 2.0 * PI * k as f64 / num_labels as f64;
    [t.cos(), t.sin()]
}

/// Rotated anchor clouds in ℝ²: one anchor per class on the unit circle, each
/// domain rotating all anchors by its angle, plus isotropic Gaussian noise.
/// Labels are balanced within every domain.
pub fn gen_rotated_clouds(
    num_labels: usize,
    angles: &[f64],
    per_domain: usize,
    noise_sd: f64,
    seed: u64,
) -> Result<DomainDataset> {
    if angles.is_empty() {
        return Err(Error::Contract("at least one domain angle is required".into()));
    }
    if num_labels < 2 || per_domain < num_labels {
        return Err(Error::Contract(format!(
            "need num_labels ≥ 2 and per_domain ≥ num_labels, got {num_labels} and {per_domain}"
        )));
    }
    if !(noise_sd >= 0.0) {
        return Err(Error::Contract("noise_sd must be ≥ 0".into()));
    }
    let noise = Normal::new(0.0, noise_sd).map_err(|e| Error::Contract(e.to_string()))?;
    let mut rng = substream(seed, Stream::Data);
    let mut examples = Vec::with_capacity(angles.len() * per_domain);
    for (d, &angle) in angles.iter().enumerate() {
        for i in 0..per_domain {
            let y = i % num_labels;
            let point = rotate_point(cloud_anchor(y, num_labels), angle);
            let x = point.iter().map(|v| v + noise.sample(&mut rng)).collect();
            examples.push(Example { x, y, d });
        }
    }
    DomainDataset::new(vec![2], examples, domain_table(angles), num_labels)
}

/// Seven-segment strokes `(x0, y0, x1, y1)` in a [-1, 1]² box, y up.
const SEGMENTS: [[f64; 4]; 7] = [
    [-0.45, 0.7, 0.45, 0.7],   // a: top
    [0.45, 0.7, 0.45, 0.0],    // b: upper right
    [0.45, 0.0, 0.45, -0.7],   // c: lower right
    [-0.45, -0.7, 0.45, -0.7], // d: bottom
    [-0.45, 0.0, -0.45, -0.7], // e: lower left
    [-0.45, 0.7, -0.45, 0.0],  // f: upper left
    [-0.45, 0.0, 0.45, 0.0],   // g: middle
];

/// Segment masks (bit i = segment i of `SEGMENTS`) for the ten digits.
const GLYPHS: [u8; 10] = [
    0b011_1111, // 0
    0b000_0110, // 1
    0b101_1011, // 2
    0b100_1111, // 3
    0b110_0110, // 4
    0b110_1101, // 5
    0b111_1101, // 6
    0b000_0111, // 7
    0b111_1111, // 8
    0b110_1111, // 9
];

pub const GLYPH_COUNT: usize = GLYPHS.len();

fn segment_distance(px: f64, py: f64, s: &[f64; 4]) -> f64 {
    let (dx, dy) = (s[2] - s[0], s[3] - s[1]);
    let len2 = dx * dx + dy * dy;
    let t = (((px - s[0]) * dx + (py - s[1]) * dy) / len2).clamp(0.0, 1.0);
    (px - s[0] - t * dx).hypot(py - s[1] - t * dy)
}

/// Binary render of glyph `label` at `size × size`, row 0 at the top.
pub fn render_glyph(label: usize, size: usize) -> Result<Vec<f64>> {
    let mask = *GLYPHS.get(label).ok_or_else(|| {
        Error::Contract(format!(
            "no glyph pattern for label {label} (only {GLYPH_COUNT} available)"
        ))
    })?;
    let half_width = 1.6 / size as f64;
    let mut img = vec![0.0; size * size];
    for row in 0..size {
        for col in 0..size {
            let (px, py) = pixel_to_plane(row, col, size);
            let on = SEGMENTS
                .iter()
                .enumerate()
                .filter(|(i, _)| mask & (1 << i) != 0)
                .any(|(_, s)| segment_distance(px, py, s) <= half_width);
            img[row * size + col] = if on { 1.0 } else { 0.0 };
        }
    }
    Ok(img)
}

fn pixel_to_plane(row: usize, col: usize, size: usize) -> (f64, f64) {
    let c = (size as f64 - 1.0) / 2.0;
    let scale = 2.0 / size as f64;
    ((col as f64 - c) * scale, (c - row as f64) * scale)
}

/// Counter-clockwise rotation of a `size × size` image about its center with
/// bilinear resampling; samples outside the source read as 0.
pub fn rotate_image(img: &[f64], size: usize, degrees: f64) -> Vec<f64> {
    let (s, c) = degrees.to_radians().sin_cos();
    let center = (size as f64 - 1.0) / 2.0;
    let at = |r: isize, q: isize| -> f64 {
        if r < 0 || q < 0 || r >= size as isize || q >= size as isize {
            0.0
        } else {
            img[r as usize * size + q as usize]
        }
    };
    let mut out = vec![0.0; size * size];
    for row in 0..size {
        for col in 0..size {
            // Plane coordinates with y up, then inverse-rotate into the source.
            let x = col as f64 - center;
            let y = center - row as f64;
            let sx = c * x + s * y;
            let sy = -s * x + c * y;
            let src_col = sx + center;
            let src_row = center - sy;
            let (r0, q0) = (src_row.floor(), src_col.floor());
            let (fr, fq) = (src_row - r0, src_col - q0);
            let (r0, q0) = (r0 as isize, q0 as isize);
            out[row * size + col] = (1.0 - fr) * (1.0 - fq) * at(r0, q0)
                + (1.0 - fr) * fq * at(r0, q0 + 1)
                + fr * (1.0 - fq) * at(r0 + 1, q0)
                + fr * fq * at(r0 + 1, q0 + 1);
        }
    }
    out
}

/// Procedural digit glyphs, rotated per domain, with uniform pixel noise in
/// `[-noise, noise]` clamped to `[0, 1]`.
pub fn gen_rotated_glyphs(
    num_labels: usize,
    angles: &[f64],
    per_domain: usize,
    image_size: usize,
    noise: f64,
    seed: u64,
) -> Result<DomainDataset> {
    if angles.is_empty() {
        return Err(Error::Contract("at least one domain angle is required".into()));
    }
    if image_size < 8 {
        return Err(Error::Contract(format!("image_size must be ≥ 8, got {image_size}")));
    }
    if num_labels < 2 || num_labels > GLYPH_COUNT {
        return Err(Error::Contract(format!(
            "num_labels must be in 2..={GLYPH_COUNT}, got {num_labels}"
        )));
    }
    if per_domain < num_labels {
        return Err(Error::Contract("per_domain must be ≥ num_labels".into()));
    }
    let renders = (0..num_labels)
        .map(|y| render_glyph(y, image_size))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = substream(seed, Stream::Data);
    let mut examples = Vec::with_capacity(angles.len() * per_domain);
    for (d, &angle) in angles.iter().enumerate() {
        let rotated: Vec<Vec<f64>> = renders
            .iter()
            .map(|r| rotate_image(r, image_size, angle))
            .collect();
        for i in 0..per_domain {
            let y = i % num_labels;
            let x = rotated[y]
                .iter()
                .map(|&v| {
                    let jitter = if noise > 0.0 {
                        rng.gen_range(-noise..=noise)
                    } else {
                        0.0
                    };
                    (v + jitter).clamp(0.0, 1.0)
                })
                .collect();
            examples.push(Example { x, y, d });
        }
    }
    DomainDataset::new(
        vec![1, image_size, image_size],
        examples,
        domain_table(angles),
        num_labels,
    )
}

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Format(format!("IDX header truncated at byte {at}")))
}

/// Parses an IDX image file and its label file. Pixels are scaled to
/// `[0, 1]`; images come back as `[N, 1, rows, cols]`.
pub fn load_idx_images(images_path: &Path, labels_path: &Path) -> Result<(Tensor, Vec<usize>)> {
    let images = fs::read(images_path)?;
    let labels = fs::read(labels_path)?;
    parse_idx(&images, &labels)
}

pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<(Tensor, Vec<usize>)> {
    let magic = be_u32(images, 0)?;
    if magic != IDX_IMAGES {
        return Err(Error::Format(format!(
            "image file magic 0x{magic:08x}, expected 0x{IDX_IMAGES:08x}"
        )));
    }
    let magic = be_u32(labels, 0)?;
    if magic != IDX_LABELS {
        return Err(Error::Format(format!(
            "label file magic 0x{magic:08x}, expected 0x{IDX_LABELS:08x}"
        )));
    }
    let n = be_u32(images, 4)? as usize;
    let rows = be_u32(images, 8)? as usize;
    let cols = be_u32(images, 12)? as usize;
    let n_labels = be_u32(labels, 4)? as usize;
    if n != n_labels {
        return Err(Error::Consistency(format!(
            "{n} images but {n_labels} labels"
        )));
    }
    let pixels = images
        .get(16..16 + n * rows * cols)
        .ok_or_else(|| Error::Format("IDX image payload truncated".into()))?;
    let ys = labels
        .get(8..8 + n)
        .ok_or_else(|| Error::Format("IDX label payload truncated".into()))?;
    let data = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    Ok((
        Tensor::new(vec![n, 1, rows, cols], data)?,
        ys.iter().map(|&y| y as usize).collect(),
    ))
}

/// Serializes `[N, rows, cols]` byte images and labels in IDX form.
pub fn encode_idx(images: &[Vec<u8>], rows: usize, cols: usize, labels: &[u8]) -> (Vec<u8>, Vec<u8>) {
    let mut img = Vec::new();
    img.extend(IDX_IMAGES.to_be_bytes());
    img.extend((images.len() as u32).to_be_bytes());
    img.extend((rows as u32).to_be_bytes());
    img.extend((cols as u32).to_be_bytes());
    for im in images {
        img.extend_from_slice(im);
    }
    let mut lab = Vec::new();
    lab.extend(IDX_LABELS.to_be_bytes());
    lab.extend((labels.len() as u32).to_be_bytes());
    lab.extend_from_slice(labels);
    (img, lab)
}

/// Builds rotated domains from real square images: each domain takes the
/// next `per_domain` images (cycling) and rotates them by its angle.
pub fn rotated_image_domains(
    images: &Tensor,
    labels: &[usize],
    angles: &[f64],
    per_domain: usize,
) -> Result<DomainDataset> {
    let s = images.shape();
    if s.len() != 4 || s[1] != 1 || s[2] != s[3] || s[0] == 0 {
        return Err(Error::Dimension(format!(
            "expected square single-channel images [N, 1, S, S], got {s:?}"
        )));
    }
    if angles.is_empty() || per_domain == 0 {
        return Err(Error::Contract("need angles and per_domain ≥ 1".into()));
    }
    let size = s[2];
    let label_count = labels.iter().max().map_or(0, |m| m + 1).max(2);
    let mut examples = Vec::new();
    let mut next = 0;
    for (d, &angle) in angles.iter().enumerate() {
        for _ in 0..per_domain {
            let i = next % s[0];
            next += 1;
            examples.push(Example {
                x: rotate_image(images.row(i), size, angle),
                y: labels[i],
                d,
            });
        }
    }
    DomainDataset::new(vec![1, size, size], examples, domain_table(angles), label_count)
}

/// Disjoint domain-id sets for train, validation, and test.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SplitSpec {
    pub train: BTreeSet<usize>,
    pub val: BTreeSet<usize>,
    pub test: BTreeSet<usize>,
}

impl SplitSpec {
    pub fn new(
        train: impl IntoIterator<Item = usize>,
        val: impl IntoIterator<Item = usize>,
        test: impl IntoIterator<Item = usize>,
    ) -> Self {
        Self {
            train: train.into_iter().collect(),
            val: val.into_iter().collect(),
            test: test.into_iter().collect(),
        }
    }

    /// Hold out `test` (and optionally `val`), training on every other domain.
    pub fn leave_out(domain_count: usize, test: usize, val: Option<usize>) -> Self {
        let train = (0..domain_count).filter(|&d| d != test && Some(d) != val);
        Self::new(train, val, [test])
    }

    pub fn validate(&self, domain_count: usize) -> Result<()> {
        if self.train.is_empty() {
            return Err(Error::Contract("training domain set is empty".into()));
        }
        let sets = [("train", &self.train), ("val", &self.val), ("test", &self.test)];
        for (i, (na, a)) in sets.iter().enumerate() {
            if let Some(bad) = a.iter().find(|&&d| d >= domain_count) {
                return Err(Error::Contract(format!(
                    "{na} domain {bad} not in dataset with {domain_count} domains"
                )));
            }
            for (nb, b) in &sets[i + 1..] {
                if let Some(shared) = a.intersection(b).next() {
                    return Err(Error::Contract(format!(
                        "domain {shared} appears in both {na} and {nb}"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Split {
    pub train: DomainDataset,
    pub val: Option<DomainDataset>,
    pub test: Option<DomainDataset>,
}

fn subset(ds: &DomainDataset, domains: &BTreeSet<usize>) -> Option<DomainDataset> {
    if domains.is_empty() {
        return None;
    }
    let remap: Vec<Option<usize>> = (0..ds.domain_count())
        .map(|d| domains.iter().position(|&k| k == d))
        .collect();
    let examples: Vec<Example> = ds
        .examples
        .iter()
        .filter_map(|ex| {
            remap[ex.d].map(|d| Example {
                x: ex.x.clone(),
                y: ex.y,
                d,
            })
        })
        .collect();
    let metas = domains.iter().map(|&d| ds.domains[d]).collect();
    DomainDataset::new(ds.input_shape.clone(), examples, metas, ds.label_count).ok()
}

/// Partitions examples by domain membership, re-indexing domain ids densely
/// within each part (ascending original id) and carrying their metadata.
pub fn split_by_domain(ds: &DomainDataset, spec: &SplitSpec) -> Result<Split> {
    spec.validate(ds.domain_count())?;
    let train = subset(ds, &spec.train)
        .ok_or_else(|| Error::Contract("training domains contain no examples".into()))?;
    Ok(Split {
        train,
        val: subset(ds, &spec.val),
        test: subset(ds, &spec.test),
    })
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub x: Tensor,
    pub y: Vec<usize>,
    pub d: Vec<usize>,
    pub indices: Vec<usize>,
}

/// Deterministic shuffle keyed by `(seed, epoch)`; the last batch may be short.
pub fn make_batches(ds: &DomainDataset, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Contract("batch_size must be ≥ 1".into()));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut keyed(seed, 0x1_0000 + epoch));
    Ok(order
        .chunks(batch_size)
        .map(|idx| Batch {
            x: ds.stack(idx),
            y: idx.iter().map(|&i| ds.examples[i].y).collect(),
            d: idx.iter().map(|&i| ds.examples[i].d).collect(),
            indices: idx.to_vec(),
        })
        .collect())
}

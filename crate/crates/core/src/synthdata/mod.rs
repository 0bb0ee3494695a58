//! Synthetic shape+texture images with known concept/class associations,
//! and concept token sets drawn from the same generator.
//!
//! Every image is rendered from its own derived seed and quantized to 8
//! bits, so in-memory images and their PPM files are identical.

pub mod ppm;
mod shape;
mod texture;

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub use shape::{Placement, ShapeKind};
pub use texture::{render_texture, Texture, TextureKind};

pub const DEFAULT_SIZE: (usize, usize) = (32, 32);

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticClassSpec {
    pub id: usize,
    pub name: String,
    pub shape: ShapeKind,
    pub texture: TextureKind,
}

/// Six classes, one per texture kind.
pub fn default_classes() -> Vec<SyntheticClassSpec> {
    use ShapeKind::*;
    use TextureKind::*;
    [
        ("stripe-class", Disk, Stripes),
        ("dot-class", Square, Dots),
        ("checker-class", Triangle, Checker),
        ("honeycomb-class", Ring, Honeycomb),
        ("zigzag-class", Cross, Zigzag),
        ("noise-class", StripeBand, PlainNoise),
    ]
    .into_iter()
    .enumerate()
    .map(|(id, (name, shape, texture))| SyntheticClassSpec {
        id,
        name: name.into(),
        shape,
        texture,
    })
    .collect()
}

/// Hex SHA-256 of an image's little-endian bytes.
pub fn content_hash(t: &Tensor) -> String {
    hex::encode(Sha256::digest(t.to_le_bytes()))
}

/// A class image: the class texture inside its shape, low-contrast noise
/// elsewhere.
pub fn render_class_image(spec: &SyntheticClassSpec, size: (usize, usize), seed: u64) -> Result<Tensor> {
    let (h, w) = size;
    let mut r = rng::rng(seed);
    let fill = Texture::sample(spec.texture, &mut r);
    let back = Texture::background_noise(&mut r);
    let place = Placement::sample(h, w, &mut r);
    let fg = render_texture(&fill, size, r.random())?;
    let bg = render_texture(&back, size, r.random())?;
    let mask = spec.shape.mask(&place, h, w);
    let img = Tensor::from_fn(&[3, h, w], |i| {
        if mask[i % (h * w)] {
            fg.data()[i]
        } else {
            bg.data()[i]
        }
    });
    Ok(ppm::quantize(&img))
}

/// A full-frame token of `kind` with randomly sampled parameters.
pub fn render_token(kind: TextureKind, size: (usize, usize), seed: u64) -> Result<Tensor> {
    let mut r = rng::rng(seed);
    let t = Texture::sample(kind, &mut r);
    Ok(ppm::quantize(&render_texture(&t, size, r.random())?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub classes: Vec<SyntheticClassSpec>,
    pub size: (usize, usize),
    pub seed: u64,
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub seeds: Vec<u64>,
}

fn check_classes(specs: &[SyntheticClassSpec]) -> Result<()> {
    if specs.len() < 2 {
        return Err(Error::invalid("a dataset needs at least two classes"));
    }
    let mut ids = HashSet::new();
    let mut fills = HashSet::new();
    for s in specs {
        if !ids.insert(s.id) {
            return Err(Error::invalid(format!("duplicate class id {}", s.id)));
        }
        if s.id >= specs.len() {
            return Err(Error::invalid(format!(
                "class id {} out of range for {} classes",
                s.id,
                specs.len()
            )));
        }
        if !fills.insert(s.texture) {
            return Err(Error::invalid(format!("fill texture {} used by two classes", s.texture)));
        }
    }
    Ok(())
}

/// `n_per_class` images per class, class-major order.
pub fn generate_dataset(
    specs: &[SyntheticClassSpec],
    n_per_class: usize,
    size: (usize, usize),
    seed: u64,
) -> Result<Dataset> {
    check_classes(specs)?;
    if n_per_class == 0 {
        return Err(Error::invalid("n_per_class must be at least 1"));
    }
    let base = rng::derive_str(seed, "dataset");
    let jobs: Vec<(usize, u64)> = specs
        .iter()
        .flat_map(|s| (0..n_per_class).map(move |i| (s.id, (s.id * n_per_class + i) as u64)))
        .collect();
    let images = jobs
        .par_iter()
        .map(|&(id, idx)| {
            let spec = specs.iter().find(|s| s.id == id).expect("id from specs");
            render_class_image(spec, size, rng::derive(base, idx))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        classes: specs.to_vec(),
        size,
        seed,
        images,
        labels: jobs.iter().map(|j| j.0).collect(),
        seeds: jobs.iter().map(|j| rng::derive(base, j.1)).collect(),
    })
}

#[derive(Serialize, Deserialize)]
struct DatasetManifest {
    size: (usize, usize),
    seed: u64,
    classes: Vec<SyntheticClassSpec>,
    samples: Vec<SampleEntry>,
}

#[derive(Serialize, Deserialize)]
struct SampleEntry {
    file: String,
    label: usize,
    class: String,
    seed: u64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn class_by_name(&self, name: &str) -> Result<&SyntheticClassSpec> {
        self.classes.iter().find(|c| c.name == name).ok_or_else(|| {
            let names: Vec<_> = self.classes.iter().map(|c| c.name.as_str()).collect();
            Error::invalid(format!("unknown class `{name}` (known: {})", names.join(", ")))
        })
    }

    /// Writes `images/NNNNN.ppm` and `manifest.json` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("images"))?;
        let mut samples = Vec::with_capacity(self.len());
        for (i, img) in self.images.iter().enumerate() {
            let file = format!("images/{i:05}.ppm");
            ppm::write(&dir.join(&file), img)?;
            let label = self.labels[i];
            samples.push(SampleEntry {
                file,
                label,
                class: self.classes.iter().find(|c| c.id == label).expect("label").name.clone(),
                seed: self.seeds[i],
            });
        }
        let manifest = DatasetManifest {
            size: self.size,
            seed: self.seed,
            classes: self.classes.clone(),
            samples,
        };
        fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: DatasetManifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
        check_classes(&manifest.classes)?;
        let images = manifest
            .samples
            .iter()
            .map(|s| ppm::read(&dir.join(&s.file)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            classes: manifest.classes,
            size: manifest.size,
            seed: manifest.seed,
            images,
            labels: manifest.samples.iter().map(|s| s.label).collect(),
            seeds: manifest.samples.iter().map(|s| s.seed).collect(),
        })
    }
}

/// Sizes of the token sets for one concept.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptCounts {
    pub positives: usize,
    pub negative_sets: usize,
    pub per_negative_set: usize,
    pub unrelated: usize,
}

impl ConceptCounts {
    pub const DESK: ConceptCounts = ConceptCounts {
        positives: 40,
        negative_sets: 20,
        per_negative_set: 30,
        unrelated: 300,
    };
    pub const PAPER: ConceptCounts = ConceptCounts {
        positives: 40,
        negative_sets: 70,
        per_negative_set: 50,
        unrelated: 1000,
    };
}

/// Token sets for one concept.
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptSets {
    pub concept: TextureKind,
    pub positives: Vec<Tensor>,
    pub negatives: Vec<Vec<Tensor>>,
    pub unrelated: Vec<Tensor>,
    pub seed: u64,
}

/// An image unrelated to `concept`: either a full-frame token of another
/// texture or a class image whose fill is not `concept`.
pub fn render_unrelated(
    concept: TextureKind,
    classes: &[SyntheticClassSpec],
    size: (usize, usize),
    seed: u64,
) -> Result<Tensor> {
    let others: Vec<TextureKind> = TextureKind::ALL.into_iter().filter(|&k| k != concept).collect();
    let composites: Vec<&SyntheticClassSpec> = classes.iter().filter(|c| c.texture != concept).collect();
    let mut r = rng::rng(seed);
    let pick: u64 = r.random();
    if composites.is_empty() || r.random_bool(0.5) {
        let kind = others[(pick % others.len() as u64) as usize];
        render_token(kind, size, r.random())
    } else {
        let spec = composites[(pick % composites.len() as u64) as usize];
        render_class_image(spec, size, r.random())
    }
}

fn render_many(
    n: usize,
    stream: u64,
    f: impl Fn(u64) -> Result<Tensor> + Sync,
) -> Result<Vec<Tensor>> {
    (0..n as u64).into_par_iter().map(|i| f(rng::derive(stream, i))).collect()
}

fn ensure_distinct<'a>(sets: impl IntoIterator<Item = &'a Tensor>) -> Result<()> {
    let mut seen = HashSet::new();
    for (i, img) in sets.into_iter().enumerate() {
        if !seen.insert(content_hash(img)) {
            return Err(Error::InsufficientVariety(format!(
                "image {i} duplicates an earlier token; the generator cannot fill disjoint sets"
            )));
        }
    }
    Ok(())
}

pub fn make_concept_sets(
    concept: TextureKind,
    counts: ConceptCounts,
    classes: &[SyntheticClassSpec],
    size: (usize, usize),
    seed: u64,
) -> Result<ConceptSets> {
    if counts.positives == 0 || counts.negative_sets == 0 || counts.per_negative_set == 0 || counts.unrelated == 0 {
        return Err(Error::invalid("concept set counts must be positive"));
    }
    let positives = render_many(counts.positives, rng::derive_str(seed, "positives"), |s| {
        render_token(concept, size, s)
    })?;
    let neg_stream = rng::derive_str(seed, "negatives");
    let flat = render_many(counts.negative_sets * counts.per_negative_set, neg_stream, |s| {
        render_unrelated(concept, classes, size, s)
    })?;
    let negatives: Vec<Vec<Tensor>> = flat.chunks(counts.per_negative_set).map(<[Tensor]>::to_vec).collect();
    let unrelated = render_many(counts.unrelated, rng::derive_str(seed, "unrelated"), |s| {
        render_unrelated(concept, classes, size, s)
    })?;
    ensure_distinct(positives.iter().chain(negatives.iter().flatten()).chain(&unrelated))?;
    Ok(ConceptSets {
        concept,
        positives,
        negatives,
        unrelated,
        seed,
    })
}

/// Positive sets for the random concept: unrelated images drawn
/// independently of any concept set's negatives.
pub fn random_concept_sets(
    concept: TextureKind,
    classes: &[SyntheticClassSpec],
    n_sets: usize,
    per_set: usize,
    size: (usize, usize),
    seed: u64,
) -> Result<Vec<Vec<Tensor>>> {
    let flat = render_many(n_sets * per_set, rng::derive_str(seed, "random-concept"), |s| {
        render_unrelated(concept, classes, size, s)
    })?;
    Ok(flat.chunks(per_set.max(1)).map(<[Tensor]>::to_vec).collect())
}

#[derive(Serialize, Deserialize)]
struct ConceptManifest {
    concept: TextureKind,
    seed: u64,
    positives: Vec<String>,
    negatives: Vec<Vec<String>>,
    unrelated: Vec<String>,
}

fn write_set(dir: &Path, rel: &str, images: &[Tensor]) -> Result<Vec<String>> {
    images
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let file = format!("{rel}/{i:05}.ppm");
            ppm::write(&dir.join(&file), img)?;
            Ok(file)
        })
        .collect()
}

fn read_set(dir: &Path, files: &[String]) -> Result<Vec<Tensor>> {
    files.iter().map(|f| ppm::read(&dir.join(f))).collect()
}

impl ConceptSets {
    /// Writes `P_C/`, `N_C/<i>/`, `U_C/` and `manifest.json` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let manifest = ConceptManifest {
            concept: self.concept,
            seed: self.seed,
            positives: write_set(dir, "P_C", &self.positives)?,
            negatives: self
                .negatives
                .iter()
                .enumerate()
                .map(|(i, set)| write_set(dir, &format!("N_C/{i}"), set))
                .collect::<Result<_>>()?,
            unrelated: write_set(dir, "U_C", &self.unrelated)?,
        };
        fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m: ConceptManifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
        Ok(ConceptSets {
            concept: m.concept,
            seed: m.seed,
            positives: read_set(dir, &m.positives)?,
            negatives: m.negatives.iter().map(|n| read_set(dir, n)).collect::<Result<_>>()?,
            unrelated: read_set(dir, &m.unrelated)?,
        })
    }
}

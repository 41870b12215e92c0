//! Procedural hierarchically-labelled garment images with templated
//! descriptions.
//!
//! Each sub-category owns a fixed silhouette. Sub-categories of the same main
//! category share a silhouette family (main index mod 3: upper body, lower
//! body, full body), so the two layers of the ontology are visible in pixel
//! space. Colour and texture vary per example and are named in the text.

use std::collections::BTreeMap;
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ontology::Ontology;
use crate::tensor::Tensor;
use crate::textemb::mix64;

pub const RESOLUTIONS: [usize; 5] = [4, 8, 16, 32, 64];
const BACKGROUND: [u8; 3] = [128, 128, 128];
const SUPERSAMPLE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pattern {
    Solid,
    Stripes,
    Dots,
    Checks,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedColor {
    pub name: String,
    pub rgb: [u8; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTexture {
    pub name: String,
    pub pattern: Pattern,
}

pub fn default_colors() -> Vec<NamedColor> {
    [
        ("red", [200, 30, 30]),
        ("blue", [30, 60, 200]),
        ("green", [30, 150, 60]),
        ("yellow", [230, 200, 40]),
        ("black", [20, 20, 20]),
        ("white", [240, 240, 240]),
        ("purple", [130, 50, 160]),
        ("orange", [240, 130, 30]),
    ]
    .into_iter()
    .map(|(n, rgb)| NamedColor { name: n.into(), rgb })
    .collect()
}

pub fn default_textures() -> Vec<NamedTexture> {
    [
        ("cotton", Pattern::Solid),
        ("striped", Pattern::Stripes),
        ("dotted", Pattern::Dots),
        ("checked", Pattern::Checks),
    ]
    .into_iter()
    .map(|(n, p)| NamedTexture { name: n.into(), pattern: p })
    .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub ontology: Ontology,
    pub num_examples: usize,
    pub resolution: usize,
    pub seed: u64,
    pub colors: Vec<NamedColor>,
    pub textures: Vec<NamedTexture>,
}

impl DatasetSpec {
    pub fn new(ontology: Ontology, num_examples: usize, resolution: usize, seed: u64) -> Self {
        DatasetSpec {
            ontology,
            num_examples,
            resolution,
            seed,
            colors: default_colors(),
            textures: default_textures(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !RESOLUTIONS.contains(&self.resolution) {
            return Err(Error::DatasetSpec(format!(
                "resolution {} not in {:?}",
                self.resolution, RESOLUTIONS
            )));
        }
        if self.num_examples == 0 {
            return Err(Error::DatasetSpec("num_examples must be positive".into()));
        }
        if self.colors.is_empty() || self.textures.is_empty() {
            return Err(Error::DatasetSpec("colour and texture palettes must be non-empty".into()));
        }
        self.ontology.validate()?;
        let subs: Vec<&str> = self.ontology.sub_categories.iter().map(|s| s.name.as_str()).collect();
        for word in self.colors.iter().map(|c| &c.name).chain(self.textures.iter().map(|t| &t.name)) {
            if subs.contains(&word.as_str()) {
                return Err(Error::DatasetSpec(format!(
                    "attribute name {word:?} collides with a sub-category name"
                )));
            }
        }
        Ok(())
    }
}

/// HWC image with values in [-1, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub res: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn from_rgb8(res: usize, rgb: &[u8]) -> Image {
        assert_eq!(rgb.len(), res * res * 3);
        Image { res, data: rgb.iter().map(|&v| v as f64 / 127.5 - 1.0).collect() }
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8)
            .collect()
    }

    /// CHW layout.
    pub fn to_chw(&self) -> Vec<f64> {
        let r = self.res;
        let mut out = vec![0.0; 3 * r * r];
        for y in 0..r {
            for x in 0..r {
                for c in 0..3 {
                    out[c * r * r + y * r + x] = self.data[(y * r + x) * 3 + c];
                }
            }
        }
        out
    }

    pub fn from_chw(res: usize, chw: &[f64]) -> Image {
        let mut data = vec![0.0; 3 * res * res];
        for y in 0..res {
            for x in 0..res {
                for c in 0..3 {
                    data[(y * res + x) * 3 + c] = chw[c * res * res + y * res + x];
                }
            }
        }
        Image { res, data }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        save_rgb_png(path, self.res as u32, self.res as u32, &self.to_rgb8())
    }
}

pub fn save_rgb_png(path: &Path, width: u32, height: u32, rgb: &[u8]) -> Result<()> {
    image::save_buffer(path, rgb, width, height, image::ExtendedColorType::Rgb8).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Stacks images into an NCHW tensor.
pub fn images_to_tensor(images: &[&Image]) -> Tensor {
    assert!(!images.is_empty());
    let r = images[0].res;
    let mut data = Vec::with_capacity(images.len() * 3 * r * r);
    for im in images {
        assert_eq!(im.res, r, "mixed resolutions in batch");
        data.extend(im.to_chw());
    }
    Tensor::from_vec(data, &[images.len(), 3, r, r])
}

pub fn tensor_to_images(t: &Tensor) -> Vec<Image> {
    let (n, r) = (t.dim(0), t.dim(2));
    let per = 3 * r * r;
    (0..n).map(|i| Image::from_chw(r, &t.data()[i * per..(i + 1) * per])).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledExample {
    pub image: Image,
    pub sub_index: usize,
    pub text: String,
}

// ---------------------------------------------------------------------------
// silhouettes
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
enum Prim {
    Rect { x0: f64, x1: f64, y0: f64, y1: f64 },
    /// Horizontal trapezoid: [xl0, xr0] at y0 widening/narrowing to [xl1, xr1] at y1.
    Trap { y0: f64, y1: f64, xl0: f64, xr0: f64, xl1: f64, xr1: f64 },
}

impl Prim {
    fn contains(&self, u: f64, v: f64) -> bool {
        match *self {
            Prim::Rect { x0, x1, y0, y1 } => u >= x0 && u < x1 && v >= y0 && v < y1,
            Prim::Trap { y0, y1, xl0, xr0, xl1, xr1 } => {
                if v < y0 || v >= y1 {
                    return false;
                }
                let t = (v - y0) / (y1 - y0);
                u >= xl0 + t * (xl1 - xl0) && u < xr0 + t * (xr1 - xr0)
            }
        }
    }

    fn scale_x(self, s: f64) -> Prim {
        let f = |x: f64| 0.5 + (x - 0.5) * s;
        match self {
            Prim::Rect { x0, x1, y0, y1 } => Prim::Rect { x0: f(x0), x1: f(x1), y0, y1 },
            Prim::Trap { y0, y1, xl0, xr0, xl1, xr1 } => Prim::Trap { y0, y1, xl0: f(xl0), xr0: f(xr0), xl1: f(xl1), xr1: f(xr1) },
        }
    }
}

fn rect(x0: f64, x1: f64, y0: f64, y1: f64) -> Prim {
    Prim::Rect { x0, x1, y0, y1 }
}

/// Union of primitives in unit coordinates (u right, v down).
#[derive(Clone, Debug)]
pub struct Silhouette {
    prims: Vec<Prim>,
}

impl Silhouette {
    pub fn contains(&self, u: f64, v: f64) -> bool {
        self.prims.iter().any(|p| p.contains(u, v))
    }

    /// Fraction of each pixel covered, row-major `res × res`.
    pub fn coverage(&self, res: usize) -> Vec<f64> {
        let mut out = vec![0.0; res * res];
        let s = SUPERSAMPLE;
        for py in 0..res {
            for px in 0..res {
                let mut hits = 0;
                for sy in 0..s {
                    for sx in 0..s {
                        let u = (px as f64 + (sx as f64 + 0.5) / s as f64) / res as f64;
                        let v = (py as f64 + (sy as f64 + 0.5) / s as f64) / res as f64;
                        if self.contains(u, v) {
                            hits += 1;
                        }
                    }
                }
                out[py * res + px] = hits as f64 / (s * s) as f64;
            }
        }
        out
    }
}

fn family_shapes(family: usize, kind: usize) -> Vec<Prim> {
    match (family, kind) {
        // upper body
        (0, 0) => vec![rect(0.32, 0.68, 0.12, 0.52), rect(0.18, 0.32, 0.12, 0.26), rect(0.68, 0.82, 0.12, 0.26)],
        (0, 1) => vec![rect(0.36, 0.64, 0.18, 0.52), rect(0.38, 0.44, 0.06, 0.18), rect(0.56, 0.62, 0.06, 0.18)],
        (0, 2) => vec![rect(0.32, 0.68, 0.12, 0.52), rect(0.14, 0.32, 0.12, 0.20), rect(0.68, 0.86, 0.12, 0.20), rect(0.14, 0.24, 0.20, 0.50), rect(0.76, 0.86, 0.20, 0.50)],
        (0, _) => vec![rect(0.28, 0.72, 0.14, 0.34), rect(0.20, 0.28, 0.14, 0.22), rect(0.72, 0.80, 0.14, 0.22)],
        // lower body
        (1, 0) => vec![rect(0.30, 0.70, 0.48, 0.56), rect(0.30, 0.48, 0.56, 0.94), rect(0.52, 0.70, 0.56, 0.94)],
        (1, 1) => vec![Prim::Trap { y0: 0.48, y1: 0.80, xl0: 0.36, xr0: 0.64, xl1: 0.22, xr1: 0.78 }],
        (1, 2) => vec![rect(0.28, 0.72, 0.48, 0.56), rect(0.28, 0.48, 0.56, 0.70), rect(0.52, 0.72, 0.56, 0.70)],
        (1, _) => vec![Prim::Trap { y0: 0.48, y1: 0.94, xl0: 0.38, xr0: 0.62, xl1: 0.30, xr1: 0.70 }],
        // full body
        (_, 0) => vec![rect(0.38, 0.62, 0.08, 0.40), Prim::Trap { y0: 0.40, y1: 0.92, xl0: 0.36, xr0: 0.64, xl1: 0.20, xr1: 0.80 }],
        (_, 1) => vec![rect(0.30, 0.70, 0.08, 0.92), rect(0.16, 0.30, 0.08, 0.70), rect(0.70, 0.84, 0.08, 0.70)],
        (_, 2) => vec![rect(0.34, 0.66, 0.08, 0.50), rect(0.34, 0.48, 0.50, 0.92), rect(0.52, 0.66, 0.50, 0.92)],
        (_, _) => vec![rect(0.40, 0.60, 0.06, 0.30), Prim::Trap { y0: 0.30, y1: 0.94, xl0: 0.40, xr0: 0.60, xl1: 0.26, xr1: 0.74 }],
    }
}

/// Silhouette of a sub-category: family from the parent's main index, shape
/// kind from the sub-category's rank among its siblings.
pub fn silhouette(ontology: &Ontology, sub_index: usize) -> Silhouette {
    let parent = ontology.sub_categories[sub_index].parent;
    let rank = ontology.sub_categories[..sub_index].iter().filter(|s| s.parent == parent).count();
    let family = parent % 3;
    let cohort = parent / 3;
    let widen = 1.0 + 0.12 * (rank / 4) as f64;
    let narrow = 1.0 / (1.0 + 0.2 * cohort as f64);
    Silhouette {
        prims: family_shapes(family, rank % 4).into_iter().map(|p| p.scale_x(widen * narrow)).collect(),
    }
}

/// Pairs of sub-categories whose silhouettes are indistinguishable at `res`.
pub fn silhouette_collisions(ontology: &Ontology, res: usize) -> Vec<(usize, usize)> {
    let covs: Vec<Vec<f64>> = (0..ontology.num_sub()).map(|k| silhouette(ontology, k).coverage(res)).collect();
    let mut out = Vec::new();
    for a in 0..covs.len() {
        for b in a + 1..covs.len() {
            let d: f64 = covs[a].iter().zip(&covs[b]).map(|(x, y)| (x - y).abs()).sum();
            if d < 1.0 {
                out.push((a, b));
            }
        }
    }
    out
}

fn pattern_on(pattern: Pattern, u: f64, v: f64) -> bool {
    let period = 1.0 / 8.0;
    match pattern {
        Pattern::Solid => true,
        Pattern::Stripes => ((v / period).floor() as i64) % 2 == 0,
        Pattern::Checks => (((u / period).floor() + (v / period).floor()) as i64) % 2 == 0,
        Pattern::Dots => {
            let cu = (u / period).fract() - 0.5;
            let cv = (v / period).fract() - 0.5;
            cu * cu + cv * cv > 0.09
        }
    }
}

/// Pattern accent colour: darker for light base colours, lighter for dark
/// ones, so neither tone sits near the grey background.
fn accent(rgb: [u8; 3]) -> [f64; 3] {
    let lum = (0.3 * rgb[0] as f64 + 0.59 * rgb[1] as f64 + 0.11 * rgb[2] as f64) / 255.0;
    rgb.map(|c| {
        let c = c as f64;
        if lum > 0.5 {
            c * 0.35
        } else {
            c + (255.0 - c) * 0.75
        }
    })
}

fn render_rgb(sil: &Silhouette, res: usize, color: [u8; 3], pattern: Pattern) -> Vec<u8> {
    let base = color.map(|c| c as f64);
    let acc = accent(color);
    let bg = BACKGROUND.map(|c| c as f64);
    let s = SUPERSAMPLE;
    let mut out = vec![0u8; res * res * 3];
    for py in 0..res {
        for px in 0..res {
            let mut sum = [0.0; 3];
            for sy in 0..s {
                for sx in 0..s {
                    let u = (px as f64 + (sx as f64 + 0.5) / s as f64) / res as f64;
                    let v = (py as f64 + (sy as f64 + 0.5) / s as f64) / res as f64;
                    let c = if !sil.contains(u, v) {
                        bg
                    } else if pattern_on(pattern, u, v) {
                        base
                    } else {
                        acc
                    };
                    for ch in 0..3 {
                        sum[ch] += c[ch];
                    }
                }
            }
            for ch in 0..3 {
                out[(py * res + px) * 3 + ch] = (sum[ch] / (s * s) as f64).round() as u8;
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// text
// ---------------------------------------------------------------------------

pub const TEMPLATES: [&str; 6] = [
    "{color} {texture} {sub}",
    "a {texture} {sub} in {color}",
    "{color} {sub} made of {texture} fabric",
    "classic {texture} {color} {sub} with ribbed trim",
    "relaxed fit {sub} in {color} with a {texture} look",
    "new season {color} {texture} {sub}",
];

pub fn template_text(ontology: &Ontology, sub_index: usize, color: &str, texture: &str, template_seed: u64) -> String {
    let t = TEMPLATES[(mix64(template_seed) % TEMPLATES.len() as u64) as usize];
    t.replace("{color}", color)
        .replace("{texture}", texture)
        .replace("{sub}", ontology.sub_name(sub_index))
}

// ---------------------------------------------------------------------------
// examples and datasets
// ---------------------------------------------------------------------------

/// Seed of the `index`-th example; independent of generation order.
pub fn example_seed(dataset_seed: u64, index: u64) -> u64 {
    mix64(mix64(dataset_seed) ^ index.wrapping_mul(0xd6e8feb86659fd93))
}

pub fn render_example(spec: &DatasetSpec, example_seed: u64) -> LabeledExample {
    let mut rng = ChaCha8Rng::seed_from_u64(example_seed);
    let sub_index = rng.random_range(0..spec.ontology.num_sub());
    let color = &spec.colors[rng.random_range(0..spec.colors.len())];
    let texture = &spec.textures[rng.random_range(0..spec.textures.len())];
    let template_seed: u64 = rng.random();
    let sil = silhouette(&spec.ontology, sub_index);
    let rgb = render_rgb(&sil, spec.resolution, color.rgb, texture.pattern);
    LabeledExample {
        image: Image::from_rgb8(spec.resolution, &rgb),
        sub_index,
        text: template_text(&spec.ontology, sub_index, &color.name, &texture.name, template_seed),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub file: String,
    pub sub: usize,
    pub main: usize,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestSummary {
    pub num_examples: usize,
    pub resolution: usize,
    /// sub-category name → count
    pub counts: BTreeMap<String, usize>,
}

pub const MANIFEST_NAME: &str = "manifest.jsonl";

/// Renders every example to `out_dir/img/NNNNNN.png` and writes
/// `out_dir/manifest.jsonl`.
pub fn generate_dataset(spec: &DatasetSpec, out_dir: &Path) -> Result<ManifestSummary> {
    spec.validate()?;
    for (a, b) in silhouette_collisions(&spec.ontology, spec.resolution) {
        log::warn!(
            "sub-categories {:?} and {:?} have near-identical silhouettes at {}px",
            spec.ontology.sub_name(a),
            spec.ontology.sub_name(b),
            spec.resolution
        );
    }
    let img_dir = out_dir.join("img");
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let manifest_path = out_dir.join(MANIFEST_NAME);
    let file = std::fs::File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut w = BufWriter::new(file);
    let mut counts: BTreeMap<String, usize> =
        spec.ontology.sub_categories.iter().map(|s| (s.name.clone(), 0)).collect();
    for i in 0..spec.num_examples {
        let ex = render_example(spec, example_seed(spec.seed, i as u64));
        let rel = format!("img/{i:06}.png");
        ex.image.save_png(&out_dir.join(&rel))?;
        let rec = ManifestRecord {
            file: rel,
            sub: ex.sub_index,
            main: spec.ontology.sub_categories[ex.sub_index].parent,
            text: ex.text,
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n").map_err(|e| Error::io(&manifest_path, e))?;
        *counts.get_mut(spec.ontology.sub_name(ex.sub_index)).unwrap() += 1;
    }
    w.flush().map_err(|e| Error::io(&manifest_path, e))?;
    Ok(ManifestSummary { num_examples: spec.num_examples, resolution: spec.resolution, counts })
}

/// All examples of a manifest, loaded into memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub examples: Vec<LabeledExample>,
    pub mains: Vec<usize>,
    pub resolution: usize,
    pub root: PathBuf,
}

impl Dataset {
    pub fn load(manifest_path: &Path) -> Result<Dataset> {
        let root = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let f = std::fs::File::open(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
        let mut examples = Vec::new();
        let mut mains = Vec::new();
        let mut resolution = None;
        for (lineno, line) in std::io::BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(manifest_path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| {
                Error::Dataset(format!("{} line {}: {e}", manifest_path.display(), lineno + 1))
            })?;
            let path = root.join(&rec.file);
            let img = image::open(&path)
                .map_err(|e| match e {
                    image::ImageError::IoError(io) => Error::io(&path, io),
                    other => Error::Image { path: path.clone(), message: other.to_string() },
                })?
                .to_rgb8();
            if img.width() != img.height() {
                return Err(Error::Image { path, message: "image is not square".into() });
            }
            let res = img.width() as usize;
            match resolution {
                None => resolution = Some(res),
                Some(r) if r != res => {
                    return Err(Error::Image { path, message: format!("resolution {res} differs from {r}") })
                }
                _ => {}
            }
            examples.push(LabeledExample { image: Image::from_rgb8(res, img.as_raw()), sub_index: rec.sub, text: rec.text });
            mains.push(rec.main);
        }
        let resolution = resolution.ok_or_else(|| Error::Dataset(format!("{} is empty", manifest_path.display())))?;
        Ok(Dataset { examples, mains, resolution, root })
    }

    pub fn from_examples(examples: Vec<LabeledExample>, ontology: &Ontology) -> Dataset {
        let resolution = examples.first().map(|e| e.image.res).unwrap_or(0);
        let mains = examples.iter().map(|e| ontology.sub_categories[e.sub_index].parent).collect();
        Dataset { examples, mains, resolution, root: PathBuf::new() }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// One shuffled pass in batches of `batch_size`; the last batch may be short.
    pub fn batches(&self, batch_size: usize, shuffle_seed: u64) -> impl Iterator<Item = Vec<&LabeledExample>> + '_ {
        assert!(batch_size > 0);
        let order = shuffled_indices(self.len(), shuffle_seed);
        let chunks: Vec<Vec<usize>> = order.chunks(batch_size).map(|c| c.to_vec()).collect();
        chunks.into_iter().map(move |c| c.into_iter().map(|i| &self.examples[i]).collect())
    }

    /// Checks labels against an ontology.
    pub fn check_labels(&self, ontology: &Ontology) -> Result<()> {
        for (i, (ex, &main)) in self.examples.iter().zip(&self.mains).enumerate() {
            if ex.sub_index >= ontology.num_sub() {
                return Err(Error::Dataset(format!("record {i}: sub index {} out of range", ex.sub_index)));
            }
            if ontology.sub_categories[ex.sub_index].parent != main {
                return Err(Error::Dataset(format!("record {i}: main index {main} disagrees with the ontology")));
            }
        }
        Ok(())
    }
}

pub fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

/// Endless example-index stream: reshuffles at each epoch boundary with a seed
/// derived from (seed, epoch). Its whole state is `(epoch, cursor)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataStream {
    pub len: usize,
    pub seed: u64,
    pub epoch: u64,
    pub cursor: usize,
    #[serde(skip)]
    order: Vec<usize>,
}

impl DataStream {
    pub fn new(len: usize, seed: u64) -> Self {
        assert!(len > 0);
        let mut s = DataStream { len, seed, epoch: 0, cursor: 0, order: Vec::new() };
        s.reshuffle();
        s
    }

    pub fn restore(len: usize, seed: u64, epoch: u64, cursor: usize) -> Self {
        let mut s = DataStream { len, seed, epoch, cursor, order: Vec::new() };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order = shuffled_indices(self.len, mix64(self.seed ^ mix64(self.epoch)));
    }

    /// Returns the epoch of the first index and the next `n` indices.
    pub fn next_batch(&mut self, n: usize) -> (u64, Vec<usize>) {
        if self.cursor >= self.len {
            self.epoch += 1;
            self.cursor = 0;
            self.reshuffle();
        }
        let epoch = self.epoch;
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.cursor >= self.len {
                self.epoch += 1;
                self.cursor = 0;
                self.reshuffle();
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        (epoch, out)
    }
}

/// Nearest-template silhouette classifier: compares the foreground mask of an
/// image with every sub-category's coverage map.
pub fn classify_by_silhouette(ontology: &Ontology, image: &Image) -> usize {
    let res = image.res;
    let bg = BACKGROUND.map(|c| c as f64 / 127.5 - 1.0);
    let fg: Vec<f64> = (0..res * res)
        .map(|p| {
            let d = (0..3).map(|c| (image.data[p * 3 + c] - bg[c]).abs()).fold(0.0, f64::max);
            if d > 0.2 {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    (0..ontology.num_sub())
        .map(|k| {
            let cov = silhouette(ontology, k).coverage(res);
            let d: f64 = cov.iter().zip(&fg).map(|(a, b)| (a - b) * (a - b)).sum();
            (k, d)
        })
        .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
        .map(|(k, _)| k)
        .unwrap()
}

pub fn example_ontology() -> Ontology {
    let mut o = Ontology::new(
        &["TOPS", "BOTTOMS", "FULLBODY"],
        &[("tshirt", 0), ("tanktop", 0), ("jeans", 1), ("skirt", 1), ("dress", 2), ("coat", 2)],
    )
    .expect("valid example ontology");
    o.version = "shapefashion-1".into();
    o
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textemb::tokenize;

    #[test]
    fn rendering_is_deterministic_and_in_range() {
        let spec = DatasetSpec::new(example_ontology(), 10, 32, 3);
        for s in 0..20 {
            let a = render_example(&spec, s);
            let b = render_example(&spec, s);
            assert_eq!(a, b);
            assert!(a.image.data.iter().all(|&v| (-1.0..=1.0).contains(&v)));
            assert!(!a.text.is_empty());
        }
    }

    #[test]
    fn sub_category_counts_are_balanced() {
        // K = 3, n = 3000: binomial mean 1000, sd ~25.8; [800, 1200] is far outside 3 sd.
        let o = Ontology::new(&["TOPS", "BOTTOMS"], &[("tshirt", 0), ("tanktop", 0), ("jeans", 1)]).unwrap();
        let spec = DatasetSpec::new(o, 3000, 4, 11);
        let mut counts = [0usize; 3];
        for i in 0..3000 {
            counts[render_example(&spec, example_seed(spec.seed, i)).sub_index] += 1;
        }
        for c in counts {
            assert!((800..=1200).contains(&c), "{counts:?}");
        }
    }

    #[test]
    fn template_text_names_attributes() {
        let o = example_ontology();
        let mut distinct = std::collections::HashSet::new();
        for seed in 0..64 {
            let t = template_text(&o, 0, "red", "cotton", seed);
            let toks = tokenize(&t);
            for w in ["red", "cotton", "tshirt"] {
                assert!(toks.iter().any(|x| x == w), "{t}");
            }
            assert_eq!(t, template_text(&o, 0, "red", "cotton", seed));
            distinct.insert(t);
        }
        assert!(distinct.len() >= 4);
    }

    #[test]
    fn each_description_names_exactly_one_sub_category() {
        let spec = DatasetSpec::new(example_ontology(), 1, 8, 0);
        for s in 0..200 {
            let ex = render_example(&spec, s);
            let toks = tokenize(&ex.text);
            let named: Vec<usize> =
                (0..spec.ontology.num_sub()).filter(|&k| toks.iter().any(|t| t == spec.ontology.sub_name(k))).collect();
            assert_eq!(named, vec![ex.sub_index], "{}", ex.text);
        }
    }

    #[test]
    fn silhouettes_are_recoverable() {
        for res in [16, 32] {
            let spec = DatasetSpec::new(example_ontology(), 1000, res, 5);
            let correct = (0..1000)
                .filter(|&i| {
                    let ex = render_example(&spec, example_seed(spec.seed, i));
                    classify_by_silhouette(&spec.ontology, &ex.image) == ex.sub_index
                })
                .count();
            assert!(correct >= 990, "{res}px: {correct}/1000");
            assert!(silhouette_collisions(&spec.ontology, res).is_empty());
        }
    }

    #[test]
    fn families_follow_parents() {
        let o = example_ontology();
        // Tops sit in the upper half, bottoms in the lower half.
        for k in 0..o.num_sub() {
            let cov = silhouette(&o, k).coverage(32);
            let upper: f64 = cov[..16 * 32].iter().sum();
            let lower: f64 = cov[16 * 32..].iter().sum();
            match o.sub_categories[k].parent {
                0 => assert!(lower < 0.1 * upper),
                1 => assert!(upper < 0.1 * lower),
                _ => assert!(upper > 0.3 * lower && lower > 0.3 * upper),
            }
        }
    }

    #[test]
    fn spec_validation() {
        assert!(DatasetSpec::new(example_ontology(), 0, 32, 0).validate().is_err());
        assert!(DatasetSpec::new(example_ontology(), 5, 12, 0).validate().is_err());
        assert!(DatasetSpec::new(example_ontology(), 5, 64, 0).validate().is_ok());
    }

    #[test]
    fn generate_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let spec = DatasetSpec::new(example_ontology(), 10, 8, 1);
        let summary = generate_dataset(&spec, dir.path()).unwrap();
        assert_eq!(summary.counts.values().sum::<usize>(), 10);
        let manifest = std::fs::read_to_string(dir.path().join(MANIFEST_NAME)).unwrap();
        assert_eq!(manifest.lines().count(), 10);
        let first: ManifestRecord = serde_json::from_str(manifest.lines().next().unwrap()).unwrap();
        assert_eq!(first.file, "img/000000.png");
        assert!(dir.path().join("img/000009.png").exists());

        let dir2 = tempfile::tempdir().unwrap();
        generate_dataset(&spec, dir2.path()).unwrap();
        assert_eq!(manifest, std::fs::read_to_string(dir2.path().join(MANIFEST_NAME)).unwrap());

        let ds = Dataset::load(&dir.path().join(MANIFEST_NAME)).unwrap();
        assert_eq!(ds.len(), 10);
        ds.check_labels(&spec.ontology).unwrap();
        // PNG storage is lossless for the quantized render.
        assert_eq!(ds.examples[3], render_example(&spec, example_seed(1, 3)));
        let sizes: Vec<usize> = ds.batches(4, 9).map(|b| b.len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        let order_a: Vec<String> = ds.batches(4, 9).flatten().map(|e| e.text.clone()).collect();
        let order_b: Vec<String> = ds.batches(4, 9).flatten().map(|e| e.text.clone()).collect();
        assert_eq!(order_a, order_b);

        std::fs::remove_file(dir.path().join("img/000004.png")).unwrap();
        let err = Dataset::load(&dir.path().join(MANIFEST_NAME)).unwrap_err();
        assert!(err.to_string().contains("000004.png"), "{err}");
    }

    #[test]
    fn data_stream_restores_exactly() {
        let mut a = DataStream::new(7, 3);
        for _ in 0..5 {
            a.next_batch(3);
        }
        let mut b = DataStream::restore(7, 3, a.epoch, a.cursor);
        for _ in 0..10 {
            assert_eq!(a.next_batch(3), b.next_batch(3));
        }
    }
}

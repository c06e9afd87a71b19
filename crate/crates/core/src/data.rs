//! Procedural multi-domain re-identification benchmark.
//!
//! Each identity is a blocky "person": an identity-seeded checker face on top,
//! a torso and legs of fixed colours below. Cameras shift the figure
//! horizontally and domains apply a global colour transform.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::model::{IMAGE_CHANNELS, IMAGE_HEIGHT, IMAGE_WIDTH};
use crate::tensor::Tensor;

pub const HEAD_ROWS: std::ops::Range<usize> = 0..8;
pub const HEAD_COLS: std::ops::Range<usize> = 4..12;
pub const TORSO_ROWS: std::ops::Range<usize> = 8..22;
pub const LEG_ROWS: std::ops::Range<usize> = 22..32;
pub const CAMERAS: usize = 3;
const BACKGROUND: f64 = 0.5;
const FACE_DARK: f64 = 0.1;
const FACE_LIGHT: f64 = 0.9;

#[derive(Clone, Debug, PartialEq)]
pub struct IdentitySpec {
    pub id: usize,
    pub torso: [f64; 3],
    pub legs: [f64; 3],
    /// Body width as a fraction of the image width, in `[0.3, 0.8]`.
    pub width: f64,
    pub face_seed: u64,
}

impl IdentitySpec {
    pub fn random(id: usize, rng: &mut impl Rng) -> Self {
        IdentitySpec {
            id,
            torso: [rng.gen(), rng.gen(), rng.gen()],
            legs: [rng.gen(), rng.gen(), rng.gen()],
            width: rng.gen_range(0.3..=0.8),
            face_seed: rng.gen(),
        }
    }

    /// Column range of the body at camera shift 0.
    pub fn body_cols(&self) -> std::ops::Range<usize> {
        let w = ((self.width * IMAGE_WIDTH as f64).round() as usize).clamp(1, IMAGE_WIDTH);
        let start = (IMAGE_WIDTH - w) / 2;
        start..start + w
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainStyle {
    pub domain: usize,
    pub gain: [f64; 3],
    pub bias: [f64; 3],
    pub contrast: f64,
    pub noise: f64,
}

impl DomainStyle {
    pub fn identity(domain: usize) -> Self {
        DomainStyle {
            domain,
            gain: [1.0; 3],
            bias: [0.0; 3],
            contrast: 1.0,
            noise: 0.0,
        }
    }

    pub fn random(domain: usize, rng: &mut impl Rng) -> Self {
        DomainStyle {
            domain,
            gain: [rng.gen_range(0.5..=1.5), rng.gen_range(0.5..=1.5), rng.gen_range(0.5..=1.5)],
            bias: [rng.gen_range(-0.2..=0.2), rng.gen_range(-0.2..=0.2), rng.gen_range(-0.2..=0.2)],
            contrast: rng.gen_range(0.7..=1.4),
            noise: rng.gen_range(0.0..=0.08),
        }
    }

    fn apply(&self, channel: usize, v: f64) -> f64 {
        let v = (self.gain[channel] * v + self.bias[channel]).clamp(0.0, 1.0);
        v.powf(self.contrast)
    }
}

/// Per-sample variation within an identity.
#[derive(Clone, Debug, PartialEq)]
pub struct Nuisance {
    /// Probability of pasting a random-colour occluder over the body.
    pub occlusion: f64,
    /// Half-width of the uniform global brightness jitter.
    pub brightness: f64,
}

impl Nuisance {
    pub fn none() -> Self {
        Nuisance {
            occlusion: 0.0,
            brightness: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "query" => Ok(Split::Query),
            "gallery" => Ok(Split::Gallery),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: usize,
    /// `3×32×16`, values in `[0, 1]`.
    pub image: Tensor,
    pub identity: usize,
    pub domain: usize,
    pub camera: usize,
    pub split: Split,
}

/// Stacks sample images into an `N×3×H×W` batch.
pub fn stack_images<'a>(samples: impl IntoIterator<Item = &'a Sample>) -> Result<Tensor> {
    let mut shape = None;
    let mut data = Vec::new();
    let mut n = 0;
    for s in samples {
        shape.get_or_insert_with(|| s.image.shape().to_vec());
        data.extend_from_slice(s.image.data());
        n += 1;
    }
    let Some(inner) = shape else {
        return Err(Error::invalid("stack_images", "no samples"));
    };
    let mut full = vec![n];
    full.extend(inner);
    Tensor::new(full, data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Domain {
    pub id: usize,
    pub samples: Vec<Sample>,
}

impl Domain {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn identities(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.identity).collect::<BTreeSet<_>>().into_iter().collect()
    }

    /// Training samples grouped by identity, in identity order.
    pub fn train_by_identity(&self) -> BTreeMap<usize, Vec<&Sample>> {
        let mut out: BTreeMap<usize, Vec<&Sample>> = BTreeMap::new();
        for s in self.split(Split::Train) {
            out.entry(s.identity).or_default().push(s);
        }
        out
    }

    pub fn has_train(&self) -> bool {
        self.samples.iter().any(|s| s.split == Split::Train)
    }
}

/// Training domains in order, plus held-out domains that have no train split.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskStream {
    pub domains: Vec<Domain>,
    pub unseen: Vec<Domain>,
}

impl TaskStream {
    pub fn all_domains(&self) -> impl Iterator<Item = &Domain> {
        self.domains.iter().chain(&self.unseen)
    }

    pub fn sample_count(&self) -> usize {
        self.all_domains().map(|d| d.samples.len()).sum()
    }

    /// SHA-256 over the manifest text and every encoded image, in manifest order.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(manifest_text(self).as_bytes());
        for s in self.all_domains().flat_map(|d| &d.samples) {
            h.update(checkpoint::encode(&[(String::new(), s.image.clone())]));
        }
        hex::encode(h.finalize())
    }
}

/// Renders one image. The random generator supplies sensor noise and
/// nuisance draws only; the figure itself is fixed by `spec` and `camera`.
pub fn render_sample(
    spec: &IdentitySpec,
    style: &DomainStyle,
    camera: usize,
    nuisance: &Nuisance,
    rng: &mut impl Rng,
) -> Tensor {
    let (h, w) = (IMAGE_HEIGHT, IMAGE_WIDTH);
    let mut base = vec![[BACKGROUND; 3]; h * w];
    let mut face_rng = ChaCha8Rng::seed_from_u64(spec.face_seed);
    for cell_r in 0..HEAD_ROWS.len() / 2 {
        for cell_c in 0..HEAD_COLS.len() / 2 {
            let v = if face_rng.gen::<bool>() { FACE_LIGHT } else { FACE_DARK };
            for dr in 0..2 {
                for dc in 0..2 {
                    base[(HEAD_ROWS.start + 2 * cell_r + dr) * w + HEAD_COLS.start + 2 * cell_c + dc] = [v; 3];
                }
            }
        }
    }
    for r in TORSO_ROWS.chain(LEG_ROWS) {
        let colour = if TORSO_ROWS.contains(&r) { spec.torso } else { spec.legs };
        for c in spec.body_cols() {
            base[r * w + c] = colour;
        }
    }
    if nuisance.occlusion > 0.0 && rng.gen_bool(nuisance.occlusion.min(1.0)) {
        let colour = [rng.gen(), rng.gen(), rng.gen()];
        let r0 = rng.gen_range(TORSO_ROWS.start..LEG_ROWS.end - 6);
        let c0 = rng.gen_range(0..w - 6);
        for r in r0..r0 + 6 {
            for c in c0..c0 + 6 {
                base[r * w + c] = colour;
            }
        }
    }
    let brightness = if nuisance.brightness > 0.0 {
        rng.gen_range(-nuisance.brightness..=nuisance.brightness)
    } else {
        0.0
    };
    let shift = camera_shift(camera);
    let noise = (style.noise > 0.0).then(|| Normal::new(0.0, style.noise).unwrap());
    let mut data = vec![0.0; IMAGE_CHANNELS * h * w];
    for ch in 0..IMAGE_CHANNELS {
        for r in 0..h {
            for c in 0..w {
                let src = c as isize - shift;
                let v = if (0..w as isize).contains(&src) {
                    base[r * w + src as usize][ch]
                } else {
                    BACKGROUND
                };
                let mut v = style.apply(ch, (v + brightness).clamp(0.0, 1.0));
                if let Some(n) = &noise {
                    v += n.sample(rng);
                }
                data[(ch * h + r) * w + c] = v.clamp(0.0, 1.0);
            }
        }
    }
    Tensor::from_raw(vec![IMAGE_CHANNELS, h, w], data)
}

/// Horizontal shift in pixels: camera 0 is centred, odd cameras move right,
/// even cameras move left.
pub fn camera_shift(camera: usize) -> isize {
    let c = camera as isize;
    if c % 2 == 1 {
        c
    } else {
        -c
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkConfig {
    pub domains: usize,
    pub unseen_domains: usize,
    pub ids_per_domain: usize,
    pub samples_per_id: usize,
    pub query_fraction: f64,
    pub nuisance: Nuisance,
    pub seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            domains: 3,
            unseen_domains: 0,
            ids_per_domain: 20,
            samples_per_id: 8,
            query_fraction: 0.25,
            nuisance: Nuisance {
                occlusion: 0.3,
                brightness: 0.1,
            },
            seed: 7,
        }
    }
}

impl BenchmarkConfig {
    /// The evaluation benchmark: three training domains and two held-out ones.
    pub fn with_unseen() -> Self {
        BenchmarkConfig {
            unseen_domains: 2,
            ..Self::default()
        }
    }

    /// Per-identity query and gallery counts.
    fn split_counts(&self) -> Result<(usize, usize)> {
        if self.domains == 0 {
            return Err(Error::invalid("generate_benchmark", "at least one training domain is required"));
        }
        if self.ids_per_domain < 4 || self.samples_per_id < 4 {
            return Err(Error::invalid(
                "generate_benchmark",
                "need at least 4 identities per domain and 4 samples per identity",
            ));
        }
        if !(self.query_fraction > 0.0 && self.query_fraction < 0.5) {
            return Err(Error::invalid("generate_benchmark", "query fraction must lie in (0, 0.5)"));
        }
        let q = ((self.query_fraction * self.samples_per_id as f64).round() as usize).max(1);
        let gallery = q;
        if q + gallery + 2 > self.samples_per_id {
            return Err(Error::invalid(
                "generate_benchmark",
                format!(
                    "{} samples per identity cannot hold {q} queries, {gallery} gallery and 2 train samples",
                    self.samples_per_id
                ),
            ));
        }
        Ok((q, gallery))
    }
}

/// Generates the stream. Queries come from camera 0 and gallery entries from
/// cameras 1 and 2, so every query has a cross-camera match. Held-out domains
/// carry no train split; their would-be train samples join the gallery.
pub fn generate_benchmark(config: &BenchmarkConfig) -> Result<TaskStream> {
    let (nq, ng) = config.split_counts()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut next_sample = 0;
    let mut next_identity = 0;
    let mut make_domain = |domain: usize, unseen: bool, rng: &mut ChaCha8Rng| {
        let style = DomainStyle::random(domain, rng);
        let mut samples = Vec::with_capacity(config.ids_per_domain * config.samples_per_id);
        for _ in 0..config.ids_per_domain {
            let spec = IdentitySpec::random(next_identity, rng);
            next_identity += 1;
            for j in 0..config.samples_per_id {
                let (split, camera) = if j < nq {
                    (Split::Query, 0)
                } else if j < nq + ng || unseen {
                    (Split::Gallery, 1 + (j - nq) % 2)
                } else {
                    (Split::Train, (j - nq - ng) % CAMERAS)
                };
                let image = render_sample(&spec, &style, camera, &config.nuisance, rng);
                samples.push(Sample {
                    id: next_sample,
                    image,
                    identity: spec.id,
                    domain,
                    camera,
                    split,
                });
                next_sample += 1;
            }
        }
        Domain { id: domain, samples }
    };
    let domains = (0..config.domains).map(|d| make_domain(d, false, &mut rng)).collect();
    let unseen = (0..config.unseen_domains)
        .map(|u| make_domain(config.domains + u, true, &mut rng))
        .collect();
    Ok(TaskStream { domains, unseen })
}

pub const MANIFEST_HEADER: &str = "sample_id,domain,identity,camera,split,path";

fn image_path(id: usize) -> String {
    format!("images/{id}.t64")
}

fn manifest_text(stream: &TaskStream) -> String {
    let mut out = String::from(MANIFEST_HEADER);
    out.push('\n');
    for s in stream.all_domains().flat_map(|d| &d.samples) {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            s.id,
            s.domain,
            s.identity,
            s.camera,
            s.split,
            image_path(s.id)
        ));
    }
    out
}

/// Writes `manifest.csv` and `images/<id>.t64`; returns the stream digest.
pub fn write_dataset(stream: &TaskStream, dir: &Path) -> Result<String> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    for s in stream.all_domains().flat_map(|d| &d.samples) {
        checkpoint::save_tensor(&dir.join(image_path(s.id)), &s.image)?;
    }
    let manifest = dir.join("manifest.csv");
    fs::write(&manifest, manifest_text(stream)).map_err(|e| Error::io(&manifest, e))?;
    Ok(stream.digest())
}

/// Reads a dataset directory. Domains keep manifest order; a domain without
/// train samples is held out.
pub fn read_dataset(dir: &Path) -> Result<TaskStream> {
    let manifest = dir.join("manifest.csv");
    let text = fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let bad = |line: usize, msg: String| Error::Manifest {
        path: manifest.clone(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == MANIFEST_HEADER => {}
        _ => return Err(bad(1, format!("expected header {MANIFEST_HEADER:?}"))),
    }
    let mut order: Vec<usize> = Vec::new();
    let mut by_domain: BTreeMap<usize, Vec<Sample>> = BTreeMap::new();
    for (i, line) in lines {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(bad(lineno, format!("expected 6 fields, found {}", fields.len())));
        }
        let num = |k: usize, name: &str| {
            fields[k]
                .trim()
                .parse::<usize>()
                .map_err(|e| bad(lineno, format!("{name}: {e}")))
        };
        let (id, domain, identity, camera) = (num(0, "sample_id")?, num(1, "domain")?, num(2, "identity")?, num(3, "camera")?);
        let split: Split = fields[4].trim().parse().map_err(|e| bad(lineno, e))?;
        let image = checkpoint::load_tensor(&dir.join(fields[5].trim()))?;
        if image.shape() != [IMAGE_CHANNELS, IMAGE_HEIGHT, IMAGE_WIDTH] {
            return Err(bad(lineno, format!("image shape {:?}", image.shape())));
        }
        if !order.contains(&domain) {
            order.push(domain);
        }
        by_domain.entry(domain).or_default().push(Sample {
            id,
            image,
            identity,
            domain,
            camera,
            split,
        });
    }
    let mut stream = TaskStream {
        domains: Vec::new(),
        unseen: Vec::new(),
    };
    for d in order {
        let domain = Domain {
            id: d,
            samples: by_domain.remove(&d).unwrap(),
        };
        if domain.has_train() {
            stream.domains.push(domain);
        } else {
            stream.unseen.push(domain);
        }
    }
    if stream.domains.is_empty() {
        return Err(bad(1, "no domain has training samples".into()));
    }
    Ok(stream)
}

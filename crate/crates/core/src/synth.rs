//! Procedural person images painted from attribute records, PK batch
//! sampling, the query/gallery split and the on-disk dataset layout.
//!
//! A dataset directory holds:
//!
//! * `manifest.tsv`: `image_id identity_id camera_id <8 attribute values>`
//! * `images.ckpt`: image tensors `[3×32×16]` keyed by image id, in the
//!   checkpoint container (f64)
//! * `captions.tsv`: caption records
//! * `vocab.txt`, `domains.txt`

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::seq::{index, IndexedRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::caption::{
    self, check_domains, format_domains, render_caption, Attribute, AttributeRecord, CaptionRecord,
};
use crate::error::{contract_err, Error, Result};
use crate::nn::{Checkpoint, DType, Tensor};
use crate::vocab::{TokenIds, Vocabulary};

pub const CHANNELS: usize = 3;
pub const HEIGHT: usize = 32;
pub const WIDTH: usize = 16;
pub const NOISE_STD: f64 = 0.1;
pub const GAIN_RANGE: (f64, f64) = (0.75, 1.25);
pub const BIAS_RANGE: (f64, f64) = (-0.15, 0.15);
pub const DEFAULT_MAX_LEN: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub gain: f64,
    pub bias: f64,
}

#[derive(Debug, Clone)]
pub struct PersonSample {
    pub image_id: String,
    pub image: Tensor<f64>,
    pub identity_id: u32,
    pub camera_id: u32,
    pub caption: String,
    pub caption_ids: TokenIds,
    pub attrs: AttributeRecord,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<PersonSample>,
    pub cameras: Vec<Camera>,
    pub vocab: Vocabulary,
    pub max_len: usize,
}

/// `P_ids` identities × `K_per` samples, as indices into the dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdentityBatch {
    pub indices: Vec<usize>,
    pub p_ids: usize,
    pub k_per: usize,
}

impl IdentityBatch {
    pub fn samples<'a>(&'a self, data: &'a Dataset) -> impl Iterator<Item = &'a PersonSample> + 'a {
        self.indices.iter().map(|&i| &data.samples[i])
    }
}

type Rgb = [f64; 3];

const BACKGROUND: Rgb = [0.45, 0.45, 0.45];
const SKIN: Rgb = [0.9, 0.72, 0.6];

fn hair_color(age: usize) -> Rgb {
    [[0.08, 0.06, 0.05], [0.42, 0.26, 0.1], [0.78, 0.78, 0.78]][age]
}

fn upper_color(i: usize) -> Rgb {
    [
        [0.85, 0.1, 0.1],
        [0.1, 0.2, 0.8],
        [0.95, 0.95, 0.95],
        [0.08, 0.08, 0.08],
        [0.1, 0.6, 0.2],
        [0.9, 0.85, 0.1],
    ][i]
}

fn lower_color(i: usize) -> Rgb {
    [
        [0.15, 0.25, 0.55],
        [0.1, 0.1, 0.1],
        [0.55, 0.55, 0.55],
        [0.45, 0.3, 0.15],
        [0.9, 0.9, 0.9],
        [0.2, 0.5, 0.2],
    ][i]
}

fn shoe_color(i: usize) -> Rgb {
    [[0.92, 0.92, 0.92], [0.35, 0.2, 0.1], [0.8, 0.6, 0.4], [0.04, 0.04, 0.04]][i]
}

fn item_color(i: usize) -> Rgb {
    [[0.6, 0.1, 0.6], [0.95, 0.5, 0.1], [0.2, 0.7, 0.8], [0.3, 0.0, 0.5]][i]
}

struct Canvas {
    px: Vec<Rgb>,
}

impl Canvas {
    fn new() -> Self {
        Canvas {
            px: vec![BACKGROUND; HEIGHT * WIDTH],
        }
    }

    fn fill(&mut self, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>, c: Rgb) {
        for r in rows {
            for col in cols.clone() {
                self.px[r * WIDTH + col] = c;
            }
        }
    }
}

/// Noise-free image for an attribute record, `[3×32×16]` in roughly [0, 1].
pub fn paint_clean(attrs: &AttributeRecord) -> Tensor<f64> {
    use Attribute::*;
    let mut c = Canvas::new();
    let woman = attrs.index_of(Gender) == 1;
    let (l, r) = if woman { (4, 12) } else { (3, 13) };
    // head
    c.fill(1..7, 5..11, SKIN);
    let hair = hair_color(attrs.index_of(AgeBand));
    c.fill(0..2, 5..11, hair);
    if attrs.index_of(HairLength) == 1 {
        c.fill(2..10, 4..5, hair);
        c.fill(2..10, 11..12, hair);
    }
    if attrs.index_of(Glasses) == 1 {
        c.fill(3..4, 5..11, [0.02, 0.02, 0.02]);
    }
    // torso
    c.fill(7..17, l..r, upper_color(attrs.index_of(UpperClothes)));
    // legs
    let lower = attrs.index_of(LowerClothes);
    let lc = lower_color(lower);
    match lower {
        2 | 5 => {
            c.fill(17..22, 4..12, lc);
            c.fill(22..28, 5..7, SKIN);
            c.fill(22..28, 9..11, SKIN);
        }
        3 => {
            c.fill(17..24, 3..13, lc);
            c.fill(24..28, 5..7, SKIN);
            c.fill(24..28, 9..11, SKIN);
        }
        _ => {
            c.fill(17..28, 4..8, lc);
            c.fill(17..28, 8..12, lc);
        }
    }
    // feet
    let sc = shoe_color(attrs.index_of(Shoes));
    c.fill(28..31, 4..8, sc);
    c.fill(28..31, 8..12, sc);
    // carried item
    let item = attrs.index_of(CarriedItem);
    let ic = item_color(item);
    match item {
        0 => c.fill(8..16, 0..3, ic),
        1 => c.fill(14..19, 13..16, ic),
        2 => c.fill(19..28, 13..16, ic),
        _ => c.fill(0..24, 14..15, ic),
    }
    let mut data = vec![0.0; CHANNELS * HEIGHT * WIDTH];
    for (p, rgb) in c.px.iter().enumerate() {
        for ch in 0..CHANNELS {
            data[ch * HEIGHT * WIDTH + p] = rgb[ch];
        }
    }
    Tensor::new(&[CHANNELS, HEIGHT, WIDTH], data).expect("image shape")
}

/// `gain · clean + bias + N(0, σ²)` per pixel.
pub fn render_observation(clean: &Tensor<f64>, camera: Camera, rng: &mut impl Rng) -> Tensor<f64> {
    let noise = Normal::new(0.0, NOISE_STD).expect("valid std");
    let mut out = clean.clone();
    for x in out.data_mut() {
        *x = camera.gain * *x + camera.bias + noise.sample(rng);
    }
    out
}

/// Generates `n_ids × per_id` samples over `n_cams` cameras; fully
/// determined by `seed`.
pub fn generate_dataset(n_ids: usize, per_id: usize, n_cams: usize, seed: u64) -> Result<Dataset> {
    if n_ids < 2 || per_id < 2 || n_cams < 2 {
        return Err(contract_err!(
            "need n_ids >= 2, per_id >= 2, n_cams >= 2 (got {n_ids}, {per_id}, {n_cams})"
        ));
    }
    let total_combos: usize = Attribute::ALL.iter().map(|a| a.cardinality()).product();
    if n_ids > total_combos {
        return Err(contract_err!("at most {total_combos} distinguishable identities"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cameras: Vec<Camera> = (0..n_cams)
        .map(|_| Camera {
            gain: rng.random_range(GAIN_RANGE.0..GAIN_RANGE.1),
            bias: rng.random_range(BIAS_RANGE.0..BIAS_RANGE.1),
        })
        .collect();
    let vocab = Vocabulary::build_default();
    let mut seen = HashSet::new();
    let mut samples = Vec::with_capacity(n_ids * per_id);
    for id in 0..n_ids as u32 {
        let attrs = loop {
            let a = AttributeRecord::random(&mut rng);
            if seen.insert(a) {
                break a;
            }
        };
        let clean = paint_clean(&attrs);
        let caption = render_caption(&attrs);
        let caption_ids = vocab.tokenize(&caption, DEFAULT_MAX_LEN);
        let cam_offset = rng.random_range(0..n_cams);
        for k in 0..per_id {
            let cam = (cam_offset + k) % n_cams;
            samples.push(PersonSample {
                image_id: format!("{id:04}_c{cam}_{k:03}"),
                image: render_observation(&clean, cameras[cam], &mut rng),
                identity_id: id,
                camera_id: cam as u32,
                caption: caption.clone(),
                caption_ids: caption_ids.clone(),
                attrs,
            });
        }
    }
    Ok(Dataset {
        samples,
        cameras,
        vocab,
        max_len: DEFAULT_MAX_LEN,
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sample indices per identity, identities ascending.
    pub fn by_identity(&self) -> BTreeMap<u32, Vec<usize>> {
        let mut m: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, s) in self.samples.iter().enumerate() {
            m.entry(s.identity_id).or_default().push(i);
        }
        m
    }

    pub fn identities(&self) -> Vec<u32> {
        self.by_identity().into_keys().collect()
    }

    pub fn n_cams(&self) -> usize {
        self.cameras.len()
    }

    /// Restricts to the given sample indices (kept in order).
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            cameras: self.cameras.clone(),
            vocab: self.vocab.clone(),
            max_len: self.max_len,
        }
    }

    /// Caption records for every sample.
    pub fn caption_records(&self) -> Vec<CaptionRecord> {
        self.samples
            .iter()
            .map(|s| CaptionRecord {
                image_id: s.image_id.clone(),
                identity_id: s.identity_id,
                camera_id: s.camera_id,
                caption: s.caption.clone(),
            })
            .collect()
    }

    /// Replaces captions (and their token ids) from records keyed by image id.
    pub fn apply_captions(&mut self, records: &[CaptionRecord]) -> Result<()> {
        let by_id: BTreeMap<&str, &CaptionRecord> = records.iter().map(|r| (r.image_id.as_str(), r)).collect();
        for s in &mut self.samples {
            let r = by_id
                .get(s.image_id.as_str())
                .ok_or_else(|| Error::Validation(format!("no caption for image {}", s.image_id)))?;
            if r.identity_id != s.identity_id || r.camera_id != s.camera_id {
                return Err(Error::Validation(format!("caption record for {} disagrees on identity/camera", s.image_id)));
            }
            s.caption = r.caption.clone();
            s.caption_ids = self.vocab.tokenize(&r.caption, self.max_len);
        }
        Ok(())
    }

    pub fn manifest_string(&self) -> String {
        let mut out = String::from("# image_id\tidentity_id\tcamera_id");
        for a in Attribute::ALL {
            out.push('\t');
            out.push_str(a.name());
        }
        out.push('\n');
        for s in &self.samples {
            out.push_str(&format!("{}\t{}\t{}", s.image_id, s.identity_id, s.camera_id));
            for a in Attribute::ALL {
                out.push('\t');
                out.push_str(s.attrs.get(a));
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: &str, text: String| {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
        };
        write("manifest.tsv", self.manifest_string())?;
        write("domains.txt", format_domains())?;
        self.vocab.save(dir.join("vocab.txt"))?;
        caption::write_caption_file(dir.join("captions.tsv"), &self.caption_records())?;
        let mut images = Checkpoint::new(DType::F64);
        images.meta.insert("max_len".into(), self.max_len.to_string());
        let cams: Vec<String> = self
            .cameras
            .iter()
            .map(|c| format!("{:?},{:?}", c.gain, c.bias))
            .collect();
        images.meta.insert("cameras".into(), cams.join(";"));
        for s in &self.samples {
            images.insert(&s.image_id, &s.image)?;
        }
        images.save(dir.join("images.ckpt"))
    }

    /// Loads a dataset directory, using `captions` (relative to `dir`, or
    /// absolute) as the caption file.
    pub fn load(dir: impl AsRef<Path>, captions: Option<&Path>) -> Result<Dataset> {
        let dir = dir.as_ref();
        let domains_path = dir.join("domains.txt");
        let domains = std::fs::read_to_string(&domains_path).map_err(|e| Error::io(&domains_path, e))?;
        check_domains(&domains, &domains_path)?;
        let vocab = Vocabulary::load(dir.join("vocab.txt"))?;
        let images = Checkpoint::load(dir.join("images.ckpt"))?;
        let max_len = images
            .meta
            .get("max_len")
            .and_then(|v| v.parse().ok())
            .unwrap_or(DEFAULT_MAX_LEN);
        let cameras = parse_cameras(images.meta.get("cameras").map(String::as_str).unwrap_or(""))?;
        let manifest_path = dir.join("manifest.tsv");
        let entries = read_manifest(&manifest_path)?;
        let mut samples = Vec::with_capacity(entries.len());
        for e in entries {
            let image: Tensor<f64> = images.get(&e.image_id)?;
            if image.shape() != [CHANNELS, HEIGHT, WIDTH] {
                return Err(Error::Validation(format!("image {} has shape {:?}", e.image_id, image.shape())));
            }
            samples.push(PersonSample {
                image,
                identity_id: e.identity_id,
                camera_id: e.camera_id,
                caption: render_caption(&e.attrs),
                caption_ids: vocab.tokenize(&render_caption(&e.attrs), max_len),
                attrs: e.attrs,
                image_id: e.image_id,
            });
        }
        let mut ds = Dataset {
            samples,
            cameras,
            vocab,
            max_len,
        };
        let cap_path = match captions {
            Some(p) if p.is_absolute() => p.to_path_buf(),
            Some(p) => dir.join(p),
            None => dir.join("captions.tsv"),
        };
        let records = caption::load_caption_file(&cap_path)?;
        ds.apply_captions(&records)?;
        Ok(ds)
    }
}

fn parse_cameras(s: &str) -> Result<Vec<Camera>> {
    s.split(';')
        .filter(|p| !p.is_empty())
        .map(|p| {
            let (g, b) = p
                .split_once(',')
                .ok_or_else(|| Error::Validation(format!("bad camera entry {p:?}")))?;
            let parse = |v: &str| v.parse::<f64>().map_err(|_| Error::Validation(format!("bad camera value {v:?}")));
            Ok(Camera {
                gain: parse(g)?,
                bias: parse(b)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub image_id: String,
    pub identity_id: u32,
    pub camera_id: u32,
    pub attrs: AttributeRecord,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |m: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: m,
        };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 + Attribute::ALL.len() {
            return Err(err(format!("expected {} fields, got {}", 3 + Attribute::ALL.len(), f.len())));
        }
        let identity_id = f[1].parse().map_err(|_| err(format!("bad identity_id {:?}", f[1])))?;
        let camera_id = f[2].parse().map_err(|_| err(format!("bad camera_id {:?}", f[2])))?;
        let attrs = AttributeRecord::from_strs(&f[3..]).map_err(|e| err(e.to_string()))?;
        if !seen.insert(f[0].to_string()) {
            return Err(Error::Validation(format!("duplicate image_id {}", f[0])));
        }
        out.push(ManifestEntry {
            image_id: f[0].to_string(),
            identity_id,
            camera_id,
            attrs,
        });
    }
    Ok(out)
}

/// Picks `p_ids` identities uniformly, then `k_per` of each identity's
/// samples without replacement.
pub fn sample_pk_batch(data: &Dataset, p_ids: usize, k_per: usize, rng: &mut impl Rng) -> Result<IdentityBatch> {
    if p_ids == 0 || k_per == 0 {
        return Err(contract_err!("P and K must be positive"));
    }
    let eligible: Vec<Vec<usize>> = data
        .by_identity()
        .into_values()
        .filter(|v| v.len() >= k_per)
        .collect();
    if eligible.len() < p_ids {
        return Err(contract_err!(
            "{} identities have >= {k_per} samples, batch needs {p_ids}",
            eligible.len()
        ));
    }
    let mut indices = Vec::with_capacity(p_ids * k_per);
    for pick in index::sample(rng, eligible.len(), p_ids) {
        let pool = &eligible[pick];
        indices.extend(index::sample(rng, pool.len(), k_per).into_iter().map(|j| pool[j]));
    }
    Ok(IdentityBatch {
        indices,
        p_ids,
        k_per,
    })
}

/// Per identity, reserves one random camera for the gallery and moves one
/// sample from each other camera into the query set with probability 0.5
/// (at least one). Every query therefore has a cross-camera gallery match.
pub fn split_query_gallery(data: &Dataset, rng: &mut impl Rng) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut query = Vec::new();
    for (id, idx) in data.by_identity() {
        let mut by_cam: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for &i in &idx {
            by_cam.entry(data.samples[i].camera_id).or_default().push(i);
        }
        if by_cam.len() < 2 {
            return Err(contract_err!("identity {id} appears under a single camera"));
        }
        let cams: Vec<u32> = by_cam.keys().copied().collect();
        let reserved = cams[rng.random_range(0..cams.len())];
        let others: Vec<u32> = cams.into_iter().filter(|&c| c != reserved).collect();
        let mut chosen: Vec<usize> = Vec::new();
        for &c in &others {
            let pick = by_cam[&c][rng.random_range(0..by_cam[&c].len())];
            if rng.random_bool(0.5) {
                chosen.push(pick);
            }
        }
        if chosen.is_empty() {
            let c = *others.choose(rng).expect("at least one other camera");
            chosen.push(by_cam[&c][rng.random_range(0..by_cam[&c].len())]);
        }
        query.extend(chosen);
    }
    query.sort_unstable();
    let qset: HashSet<usize> = query.iter().copied().collect();
    let gallery = (0..data.len()).filter(|i| !qset.contains(i)).collect();
    Ok((query, gallery))
}

/// Training-time augmentation switches.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Augment {
    pub flip: bool,
    pub erasing: bool,
}

/// Random horizontal flip (p = 0.5) and random erasing (p = 0.5, 2–20 % of
/// the area, aspect 0.3–3.3, filled with uniform noise).
pub fn augment(image: &Tensor<f64>, aug: Augment, rng: &mut impl Rng) -> Tensor<f64> {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let mut out = image.clone();
    if aug.flip && rng.random_bool(0.5) {
        let src = image.data();
        let dst = out.data_mut();
        for ch in 0..c {
            for r in 0..h {
                for col in 0..w {
                    dst[(ch * h + r) * w + col] = src[(ch * h + r) * w + (w - 1 - col)];
                }
            }
        }
    }
    if aug.erasing && rng.random_bool(0.5) {
        for _ in 0..10 {
            let area = (h * w) as f64 * rng.random_range(0.02..0.2);
            let aspect: f64 = rng.random_range(0.3f64.ln()..3.3f64.ln()).exp();
            let eh = (area * aspect).sqrt().round() as usize;
            let ew = (area / aspect).sqrt().round() as usize;
            if eh == 0 || ew == 0 || eh >= h || ew >= w {
                continue;
            }
            let r0 = rng.random_range(0..h - eh);
            let c0 = rng.random_range(0..w - ew);
            let dst = out.data_mut();
            for ch in 0..c {
                for r in r0..r0 + eh {
                    for col in c0..c0 + ew {
                        dst[(ch * h + r) * w + col] = rng.random();
                    }
                }
            }
            break;
        }
    }
    out
}

/// Nearest-centroid accuracy on raw pixels: centroids from even-position
/// samples of each identity, evaluated on the rest.
pub fn nearest_centroid_accuracy(data: &Dataset) -> f64 {
    let groups = data.by_identity();
    let dim = CHANNELS * HEIGHT * WIDTH;
    let mut centroids = Vec::new();
    let mut tests = Vec::new();
    for (id, idx) in &groups {
        let mut c = vec![0.0; dim];
        let train: Vec<usize> = idx.iter().step_by(2).copied().collect();
        for &i in &train {
            for (a, b) in c.iter_mut().zip(data.samples[i].image.data()) {
                *a += b / train.len() as f64;
            }
        }
        centroids.push((*id, c));
        tests.extend(idx.iter().skip(1).step_by(2).map(|&i| (*id, i)));
    }
    let correct = tests
        .iter()
        .filter(|(id, i)| {
            let x = data.samples[*i].image.data();
            let best = centroids
                .iter()
                .map(|(cid, c)| {
                    let d: f64 = c.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
                    (d, *cid)
                })
                .min_by(|a, b| a.0.total_cmp(&b.0))
                .expect("non-empty");
            best.1 == *id
        })
        .count();
    correct as f64 / tests.len() as f64
}

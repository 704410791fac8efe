//! Deterministic synthetic chest-radiograph cases and their on-disk form.
//!
//! Every case is a pure function of `(seed, config)`: a smooth background
//! with rib-like banding, zero or more rendered pathologies (each with one
//! tight bounding box), and a templated clinical note.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::rng::{keyed, Stream};
use crate::tensor::Tensor;

pub const N_PATHOLOGIES: usize = 6;
pub const MANIFEST_NAME: &str = "manifest.jsonl";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pathology {
    Consolidation,
    Cavity,
    Nodule,
    PleuralEffusion,
    CpAngleBlunting,
    Bronchiectasis,
}

impl Pathology {
    pub const ALL: [Pathology; N_PATHOLOGIES] = [
        Pathology::Consolidation,
        Pathology::Cavity,
        Pathology::Nodule,
        Pathology::PleuralEffusion,
        Pathology::CpAngleBlunting,
        Pathology::Bronchiectasis,
    ];

    pub fn code(self) -> usize {
        self as usize
    }

    pub fn from_code(code: usize) -> Option<Self> {
        Self::ALL.get(code).copied()
    }

    /// Wording used in notes and reports.
    pub fn phrase(self) -> &'static str {
        match self {
            Pathology::Consolidation => "consolidation",
            Pathology::Cavity => "cavity",
            Pathology::Nodule => "nodule",
            Pathology::PleuralEffusion => "pleural effusion",
            Pathology::CpAngleBlunting => "cp angle blunting",
            Pathology::Bronchiectasis => "bronchiectasis",
        }
    }

    /// Row label in evaluation tables.
    pub fn label(self) -> &'static str {
        match self {
            Pathology::Consolidation => "Consolidation",
            Pathology::Cavity => "Cavity",
            Pathology::Nodule => "Nodule",
            Pathology::PleuralEffusion => "PleuralEffusion",
            Pathology::CpAngleBlunting => "CpAngleBlunting",
            Pathology::Bronchiectasis => "Bronchiectasis",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Side {
    Left,
    Right,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Level {
    Upper,
    Middle,
    Lower,
}

/// Cell of the fixed 2×3 (side × level) partition of the image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Zone {
    pub side: Side,
    pub level: Level,
}

impl Zone {
    pub fn all() -> impl Iterator<Item = Zone> {
        [Side::Left, Side::Right].into_iter().flat_map(|side| {
            [Level::Upper, Level::Middle, Level::Lower]
                .into_iter()
                .map(move |level| Zone { side, level })
        })
    }

    /// Zone containing the point `(x, y)` of a `width × height` image.
    pub fn containing(x: f64, y: f64, width: usize, height: usize) -> Zone {
        let side = if x < width as f64 / 2.0 { Side::Left } else { Side::Right };
        let third = height as f64 / 3.0;
        let level = if y < third {
            Level::Upper
        } else if y < 2.0 * third {
            Level::Middle
        } else {
            Level::Lower
        };
        Zone { side, level }
    }

    /// "left upper", as used in notes and VQA answers.
    pub fn phrase(self) -> &'static str {
        match (self.side, self.level) {
            (Side::Left, Level::Upper) => "left upper",
            (Side::Left, Level::Middle) => "left middle",
            (Side::Left, Level::Lower) => "left lower",
            (Side::Right, Level::Upper) => "right upper",
            (Side::Right, Level::Middle) => "right middle",
            (Side::Right, Level::Lower) => "right lower",
        }
    }
}

impl fmt::Display for Zone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.phrase().replace(' ', "_"))
    }
}

impl FromStr for Zone {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Zone::all()
            .find(|z| z.to_string() == s)
            .ok_or_else(|| format!("unknown zone {s:?}"))
    }
}

impl Serialize for Zone {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Zone {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One labelled finding; `bbox` is `[x0, y0, x1, y1]` in half-open pixels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub pathology: Pathology,
    pub bbox: [u32; 4],
    pub zone: Zone,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Case {
    pub case_id: u64,
    /// `[H, W]`, values in `[0, 1]`.
    pub image: Tensor,
    pub annotations: Vec<Annotation>,
    pub note: String,
    pub labels: [u8; N_PATHOLOGIES],
}

impl Case {
    pub fn height(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn annotation(&self, p: Pathology) -> Option<&Annotation> {
        self.annotations.iter().find(|a| a.pathology == p)
    }

    /// The symptom sentence that opens the note.
    pub fn prompt(&self) -> &str {
        match self.note.find('.') {
            Some(i) => &self.note[..=i],
            None => &self.note,
        }
    }

    /// Findings sentences, regenerated from the annotations.
    pub fn findings(&self) -> String {
        findings_text(&self.annotations)
    }

    /// The left-right mirror image of this case: pixels, boxes and zones
    /// flip, and the findings sentences are rewritten to match.
    pub fn mirrored(&self) -> Case {
        let (h, w) = (self.height(), self.width());
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            data.extend(self.image.row(y).iter().rev());
        }
        let annotations: Vec<Annotation> = self
            .annotations
            .iter()
            .map(|a| {
                let [x0, y0, x1, y1] = a.bbox;
                let bbox = [w as u32 - x1, y0, w as u32 - x0, y1];
                let cx = (bbox[0] + bbox[2]) as f64 / 2.0;
                let cy = (bbox[1] + bbox[3]) as f64 / 2.0;
                Annotation {
                    pathology: a.pathology,
                    bbox,
                    zone: Zone::containing(cx, cy, w, h),
                }
            })
            .collect();
        Case {
            case_id: self.case_id,
            image: Tensor::from_parts(vec![h, w], data),
            note: format!("{} {}", self.prompt(), findings_text(&annotations)),
            annotations,
            labels: self.labels,
        }
    }

    /// Box of pathology `p` normalized to `[0, 1]` image coordinates.
    pub fn normalized_box(&self, p: Pathology) -> Option<[f64; 4]> {
        let (w, h) = (self.width() as f64, self.height() as f64);
        self.annotation(p).map(|a| {
            let b = a.bbox;
            [b[0] as f64 / w, b[1] as f64 / h, b[2] as f64 / w, b[3] as f64 / h]
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub image_size: usize,
    pub prevalence: [f64; N_PATHOLOGIES],
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            prevalence: [0.3; N_PATHOLOGIES],
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 32 {
            return Err(Error::Config(format!("image size {} is below 32", self.image_size)));
        }
        if let Some(p) = self.prevalence.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Config(format!("prevalence {p} outside [0, 1]")));
        }
        Ok(())
    }
}

const SYMPTOMS: [&str; 6] = [
    "fever",
    "persistent cough",
    "chest pain",
    "night sweats",
    "weight loss",
    "hemoptysis",
];

const HEALTHY_FINDINGS: &str = "No acute findings.";

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(first) => first.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

/// One sentence per annotation in pathology order, or the healthy sentence.
pub fn findings_text(annotations: &[Annotation]) -> String {
    if annotations.is_empty() {
        return HEALTHY_FINDINGS.to_string();
    }
    let mut sorted: Vec<&Annotation> = annotations.iter().collect();
    sorted.sort_by_key(|a| a.pathology);
    sorted
        .iter()
        .map(|a| format!("{} in {} zone.", capitalize(a.pathology.phrase()), a.zone.phrase()))
        .collect::<Vec<_>>()
        .join(" ")
}

fn symptom_sentence(symptoms: &[&str]) -> String {
    match symptoms {
        [] => "Patient presents for routine screening.".to_string(),
        [one] => format!("Patient presents with {one}."),
        [init @ .., last] => format!("Patient presents with {} and {last}.", init.join(", ")),
    }
}

/// Presence question and answer for `p`.
pub fn presence_question(p: Pathology, present: bool) -> (String, String) {
    (
        format!("Is {} present?", p.phrase()),
        if present { "yes" } else { "no" }.to_string(),
    )
}

/// Location question and answer for a present finding.
pub fn location_question(a: &Annotation) -> (String, String) {
    (format!("Where is {}?", a.pathology.phrase()), a.zone.phrase().to_string())
}

/// Every question and answer the VQA templates can produce.
pub fn vqa_corpus() -> Vec<String> {
    let mut out = vec!["yes".to_string(), "no".to_string()];
    for p in Pathology::ALL {
        out.push(presence_question(p, true).0);
        out.push(format!("Where is {}?", p.phrase()));
    }
    out.extend(Zone::all().map(|z| z.phrase().to_string()));
    out
}

/// A case plus the per-pixel layers it was composed from.
pub struct Rendering {
    pub case: Case,
    pub background: Vec<f64>,
    /// Shape mask for each annotation, in annotation order.
    pub masks: Vec<Vec<bool>>,
}

pub fn generate_case(seed: u64, config: &CorpusConfig) -> Result<Case> {
    render_case(seed, config).map(|r| r.case)
}

pub fn render_case(seed: u64, config: &CorpusConfig) -> Result<Rendering> {
    config.validate()?;
    let n = config.image_size;
    let s = n as f64 / 64.0;
    let mut rng = keyed(Stream::Corpus, &[seed]);

    let background = background(&mut rng, n, s);
    let mut image = background.clone();
    let mut annotations = Vec::new();
    let mut masks = Vec::new();

    for p in Pathology::ALL {
        // The draw happens for every pathology so presence of one never
        // shifts the random stream of another.
        let present = rng.gen::<f64>() < config.prevalence[p.code()];
        let mut shape_rng = keyed(Stream::Corpus, &[seed, 1 + p.code() as u64]);
        if !present {
            continue;
        }
        let shape = render_shape(p, &mut shape_rng, n, s);
        for (i, &m) in shape.mask.iter().enumerate() {
            if m {
                image[i] += shape.intensity;
            }
        }
        for (i, &d) in shape.dark.iter().enumerate() {
            if d {
                image[i] -= 0.12;
            }
        }
        let bbox = tight_box(&shape.mask, n).expect("rendered shapes are never empty");
        let cx = (bbox[0] + bbox[2]) as f64 / 2.0;
        let cy = (bbox[1] + bbox[3]) as f64 / 2.0;
        annotations.push(Annotation {
            pathology: p,
            bbox,
            zone: Zone::containing(cx, cy, n, n),
        });
        masks.push(shape.mask);
    }
    for v in &mut image {
        *v = v.clamp(0.0, 1.0);
    }

    let mut labels = [0u8; N_PATHOLOGIES];
    for a in &annotations {
        labels[a.pathology.code()] = 1;
    }

    let mut note_rng = keyed(Stream::Corpus, &[seed, 100]);
    let k = if annotations.is_empty() {
        usize::from(note_rng.gen::<f64>() < 0.3)
    } else {
        note_rng.gen_range(1..=3)
    };
    let symptoms: Vec<&str> = SYMPTOMS.choose_multiple(&mut note_rng, k).copied().collect();
    let note = format!("{} {}", symptom_sentence(&symptoms), findings_text(&annotations));

    let case = Case {
        case_id: seed,
        image: Tensor::new(vec![n, n], image)?,
        annotations,
        note,
        labels,
    };
    Ok(Rendering {
        case,
        background,
        masks,
    })
}

fn background(rng: &mut impl Rng, n: usize, s: f64) -> Vec<f64> {
    use std::f64::consts::TAU;
    let base = rng.gen_range(0.18..0.26);
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.gen_range(0.02..0.05),
                rng.gen_range(0.3..1.5) / n as f64,
                rng.gen_range(0.3..1.5) / n as f64,
                rng.gen_range(0.0..TAU),
            )
        })
        .collect();
    let period = rng.gen_range(7.0..9.0) * s;
    let curvature = rng.gen_range(0.5..1.5);
    let rib_phase = rng.gen_range(0.0..TAU);
    let mut out = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut v = base;
            for &(amp, kx, ky, phase) in &waves {
                v += amp * (TAU * (kx * fx + ky * fy) + phase).cos();
            }
            let dx = fx - n as f64 / 2.0;
            let bend = curvature * dx * dx / n as f64;
            v += 0.06 * (0.5 + 0.5 * (TAU * (fy + bend) / period + rib_phase).sin());
            out[y * n + x] = v.clamp(0.05, 0.45);
        }
    }
    out
}

struct Shape {
    mask: Vec<bool>,
    /// Pixels darkened after the bright layers (cavity lumen).
    dark: Vec<bool>,
    intensity: f64,
}

fn raster(n: usize, inside: impl Fn(f64, f64) -> bool) -> Vec<bool> {
    let mut m = vec![false; n * n];
    for y in 0..n {
        for x in 0..n {
            m[y * n + x] = inside(x as f64 + 0.5, y as f64 + 0.5);
        }
    }
    m
}

fn segment_distance(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0);
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    ((px - qx).powi(2) + (py - qy).powi(2)).sqrt()
}

fn render_shape(p: Pathology, rng: &mut impl Rng, n: usize, s: f64) -> Shape {
    let nf = n as f64;
    let center = |rng: &mut dyn rand::RngCore, margin: f64| {
        (
            rng.gen_range(margin..nf - margin),
            rng.gen_range(margin..nf - margin),
        )
    };
    let empty = vec![false; n * n];
    match p {
        Pathology::Consolidation => {
            let (cx, cy) = center(rng, 10.0 * s);
            let rx = rng.gen_range(5.0..9.0) * s;
            let ry = rng.gen_range(4.0..8.0) * s;
            Shape {
                mask: raster(n, |x, y| ((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2) <= 1.0),
                dark: empty,
                intensity: 0.45,
            }
        }
        Pathology::Cavity => {
            let (cx, cy) = center(rng, 10.0 * s);
            let outer = rng.gen_range(5.0..8.0) * s;
            let inner = outer - rng.gen_range(2.0..3.0) * s;
            let d = |x: f64, y: f64| ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
            Shape {
                mask: raster(n, |x, y| (inner..=outer).contains(&d(x, y))),
                dark: raster(n, |x, y| d(x, y) < inner),
                intensity: 0.5,
            }
        }
        Pathology::Nodule => {
            let (cx, cy) = center(rng, 10.0 * s);
            let count = rng.gen_range(1..=3);
            let discs: Vec<(f64, f64, f64)> = (0..count)
                .map(|_| {
                    (
                        cx + rng.gen_range(-6.0..6.0) * s,
                        cy + rng.gen_range(-6.0..6.0) * s,
                        rng.gen_range(1.5..2.5) * s,
                    )
                })
                .collect();
            Shape {
                mask: raster(n, |x, y| {
                    discs
                        .iter()
                        .any(|&(dx, dy, r)| (x - dx).powi(2) + (y - dy).powi(2) <= r * r)
                }),
                dark: empty,
                intensity: 0.5,
            }
        }
        Pathology::PleuralEffusion => {
            let left = rng.gen_bool(0.5);
            let h = rng.gen_range(14.0..22.0) * s;
            let w = rng.gen_range(12.0..20.0) * s;
            let top = nf - h;
            Shape {
                mask: raster(n, |x, y| {
                    if y < top {
                        return false;
                    }
                    let reach = w * ((y - top) / h).sqrt();
                    let lateral = if left { x } else { nf - x };
                    lateral <= reach
                }),
                dark: empty,
                intensity: 0.45,
            }
        }
        Pathology::CpAngleBlunting => {
            let left = rng.gen_bool(0.5);
            let a = rng.gen_range(5.0..8.0) * s;
            Shape {
                mask: raster(n, |x, y| {
                    let lateral = if left { x } else { nf - x };
                    lateral + (nf - y) <= a
                }),
                dark: empty,
                intensity: 0.5,
            }
        }
        Pathology::Bronchiectasis => {
            let (cx, cy) = center(rng, 12.0 * s);
            let len = rng.gen_range(10.0..16.0) * s;
            let angle: f64 = rng.gen_range(-0.6..0.6);
            let sep = rng.gen_range(3.0..4.0) * s;
            let (ux, uy) = (angle.sin(), angle.cos());
            let (nx, ny) = (uy, -ux);
            let lines: Vec<((f64, f64), (f64, f64))> = [-0.5, 0.5]
                .iter()
                .map(|k| {
                    let (ox, oy) = (cx + k * sep * nx, cy + k * sep * ny);
                    (
                        (ox - ux * len / 2.0, oy - uy * len / 2.0),
                        (ox + ux * len / 2.0, oy + uy * len / 2.0),
                    )
                })
                .collect();
            let half_width = 0.6 * s.max(1.0);
            Shape {
                mask: raster(n, |x, y| {
                    lines
                        .iter()
                        .any(|&(a, b)| segment_distance(x, y, a, b) <= half_width)
                }),
                dark: empty,
                intensity: 0.45,
            }
        }
    }
}

fn tight_box(mask: &[bool], n: usize) -> Option<[u32; 4]> {
    let mut b: Option<[usize; 4]> = None;
    for y in 0..n {
        for x in 0..n {
            if mask[y * n + x] {
                b = Some(match b {
                    None => [x, y, x + 1, y + 1],
                    Some([x0, y0, x1, y1]) => [x0.min(x), y0.min(y), x1.max(x + 1), y1.max(y + 1)],
                });
            }
        }
    }
    b.map(|[x0, y0, x1, y1]| [x0 as u32, y0 as u32, x1 as u32, y1 as u32])
}

// ---- dataset files ----------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct ManifestRecord {
    case_id: u64,
    image: String,
    annotations: Vec<Annotation>,
    note: String,
    labels: Vec<u8>,
}

pub fn image_file_name(case_id: u64) -> String {
    format!("case_{case_id:06}.pgm")
}

/// Writes one 8-bit PGM per case plus `manifest.jsonl`; returns the
/// manifest path.
pub fn write_dataset(cases: &[Case], dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest_path = dir.join(MANIFEST_NAME);
    let mut manifest = Vec::new();
    for case in cases {
        let image = image_file_name(case.case_id);
        write_pgm(&dir.join(&image), &case.image)?;
        let record = ManifestRecord {
            case_id: case.case_id,
            image,
            annotations: case.annotations.clone(),
            note: case.note.clone(),
            labels: case.labels.to_vec(),
        };
        serde_json::to_writer(&mut manifest, &record).expect("manifest records always serialize");
        manifest.push(b'\n');
    }
    fs::write(&manifest_path, manifest).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest_path)
}

pub fn load_dataset(dir: &Path) -> Result<Vec<Case>> {
    let manifest_path = dir.join(MANIFEST_NAME);
    let file = fs::File::open(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut cases = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&manifest_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| Error::Manifest {
            path: manifest_path.clone(),
            line: i + 1,
            message,
        };
        let record: ManifestRecord = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        let labels: [u8; N_PATHOLOGIES] = record
            .labels
            .as_slice()
            .try_into()
            .map_err(|_| bad(format!("expected {N_PATHOLOGIES} labels, got {}", record.labels.len())))?;
        let image = read_pgm(&dir.join(&record.image))?;
        cases.push(Case {
            case_id: record.case_id,
            image,
            annotations: record.annotations,
            note: record.note,
            labels,
        });
    }
    Ok(cases)
}

pub fn write_pgm(path: &Path, image: &Tensor) -> Result<()> {
    let (h, w) = image.dims2()?;
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(image.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Reads an 8-bit binary PGM into `[H, W]` values in `[0, 1]`.
pub fn read_pgm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |message: &str| Error::Format {
        path: path.to_path_buf(),
        message: message.to_string(),
    };
    let mut pos = 0;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated PGM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(bad("not a binary (P5) PGM"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("malformed PGM header field"));
    let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    pos += 1;
    let pixels = bytes.get(pos..pos + w * h).ok_or_else(|| bad("truncated PGM pixel data"))?;
    let data = pixels.iter().map(|&b| b as f64 / 255.0).collect();
    Ok(Tensor::new(vec![h, w], data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zone_strings_round_trip() {
        for z in Zone::all() {
            assert_eq!(z.to_string().parse::<Zone>().unwrap(), z);
        }
        assert!("center".parse::<Zone>().is_err());
    }

    #[test]
    fn healthy_config_gives_healthy_case() {
        let cfg = CorpusConfig {
            prevalence: [0.0; N_PATHOLOGIES],
            ..CorpusConfig::default()
        };
        let c = generate_case(17, &cfg).unwrap();
        assert_eq!(c.labels, [0; N_PATHOLOGIES]);
        assert!(c.annotations.is_empty());
        assert!(c.note.to_lowercase().contains("no acute findings"));
    }

    #[test]
    fn prompt_and_findings_split_the_note() {
        let cfg = CorpusConfig {
            prevalence: [1.0; N_PATHOLOGIES],
            ..CorpusConfig::default()
        };
        let c = generate_case(3, &cfg).unwrap();
        assert_eq!(format!("{} {}", c.prompt(), c.findings()), c.note);
        assert!(c.prompt().starts_with("Patient presents with"));
        assert!(!c.prompt().contains("zone"));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = CorpusConfig::default();
        cfg.prevalence[2] = 1.5;
        assert!(generate_case(0, &cfg).is_err());
        let cfg = CorpusConfig {
            image_size: 16,
            ..CorpusConfig::default()
        };
        assert!(generate_case(0, &cfg).is_err());
    }

    #[test]
    fn mirroring_swaps_sides_and_undoes_itself() {
        let cfg = CorpusConfig {
            prevalence: [1.0; N_PATHOLOGIES],
            ..CorpusConfig::default()
        };
        let c = generate_case(9, &cfg).unwrap();
        let m = c.mirrored();
        assert_eq!(m.mirrored(), c);
        assert_eq!(m.prompt(), c.prompt());
        assert_eq!(m.labels, c.labels);
        let w = c.width();
        for (a, b) in c.annotations.iter().zip(&m.annotations) {
            assert_eq!(a.pathology, b.pathology);
            let [x0, y0, x1, y1] = b.bbox;
            let (lo, hi) = (x0 as usize, x1 as usize);
            // The mirrored box covers the mirrored pixels.
            for y in y0 as usize..y1 as usize {
                assert_eq!(&m.image.row(y)[lo..hi], &c.image.row(y)[w - hi..w - lo].iter().rev().copied().collect::<Vec<_>>()[..]);
            }
        }
        for (a, b) in c.annotations.iter().zip(&m.annotations) {
            let (sa, sb) = (a.zone.to_string(), b.zone.to_string());
            assert_eq!(sa.contains("left"), sb.contains("right"), "{sa} vs {sb}");
        }
        assert_eq!(m.findings(), findings_text(&m.annotations));
    }

    #[test]
    fn symptom_sentence_grammar() {
        assert_eq!(symptom_sentence(&["fever"]), "Patient presents with fever.");
        assert_eq!(
            symptom_sentence(&["fever", "chest pain", "weight loss"]),
            "Patient presents with fever, chest pain and weight loss."
        );
    }
}

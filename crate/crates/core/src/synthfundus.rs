//! Procedural 64×64 fundus images with exact lesion ground truth.
//!
//! Geometry of a lesion depends only on its [`LesionSpec`]; the seed drives
//! the background (vessels, optic disc, texture) and the pixel noise. Noise
//! is drawn from its own stream after the lesions are composited, so the
//! same seed produces the same noise field whatever the lesion list.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labels::{ConceptFlags, Finding, Grade, LesionKind, Location};

pub const SIDE: usize = 64;
pub const CHANNELS: usize = 3;
pub const DISC_CENTER: f64 = 32.0;
pub const DISC_RADIUS: f64 = 30.0;

const NOISE_SIGMA: f64 = 0.015;
const MAX_ATTEMPTS: usize = 1000;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("lesion {index} at ({row}, {col}) lies outside the fundus disc")]
    OutsideDisc { index: usize, row: f64, col: f64 },
    #[error("lesion {index}: {detail}")]
    InvalidLesion { index: usize, detail: String },
    #[error("cannot generate grade {grade}: {detail}")]
    Impossible { grade: usize, detail: String },
    #[error("split: {0}")]
    Split(String),
    #[error("malformed file {path}: {detail}")]
    Format { path: PathBuf, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SynthError>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LesionSpec {
    pub kind: LesionKind,
    pub row: f64,
    pub col: f64,
    /// Radius, or length for neovascularization and IRMA.
    pub radius: f64,
    pub intensity: f64,
}

impl LesionSpec {
    fn validate(&self, index: usize) -> Result<()> {
        let bad = |detail: String| Err(SynthError::InvalidLesion { index, detail });
        if ![self.row, self.col, self.radius, self.intensity].iter().all(|v| v.is_finite()) {
            return bad("non-finite field".into());
        }
        let (lo, hi) = self.kind.size_bounds();
        if self.radius < lo - 1e-9 || self.radius > hi + 1e-9 {
            return bad(format!("{:?} size {} outside [{lo}, {hi}]", self.kind, self.radius));
        }
        if !(0.0..=1.0).contains(&self.intensity) {
            return bad(format!("intensity {} outside [0, 1]", self.intensity));
        }
        if (self.row - DISC_CENTER).hypot(self.col - DISC_CENTER) >= DISC_RADIUS {
            return Err(SynthError::OutsideDisc { index, row: self.row, col: self.col });
        }
        Ok(())
    }

    fn color(&self) -> [f64; 3] {
        match self.kind {
            LesionKind::Microaneurysm => [0.22, 0.02, 0.02],
            LesionKind::Hemorrhage => [0.36, 0.05, 0.03],
            LesionKind::HardExudate => [1.00, 0.95, 0.40],
            LesionKind::SoftExudate => [0.97, 0.94, 0.86],
            LesionKind::Neovascularization => [1.00, 0.80, 0.70],
            LesionKind::Irma => [0.32, 0.04, 0.22],
        }
    }

    /// Deterministic orientation derived from the lesion's own fields.
    fn angle(&self) -> f64 {
        let h = splitmix64(self.row.to_bits() ^ splitmix64(self.col.to_bits() ^ self.kind.index() as u64));
        (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 * PI
    }

    fn segments(&self) -> Vec<([f64; 2], [f64; 2])> {
        let c = [self.row, self.col];
        let theta = self.angle();
        let dir = |a: f64| [a.sin(), a.cos()];
        let at = |p: [f64; 2], d: [f64; 2], t: f64| [p[0] + d[0] * t, p[1] + d[1] * t];
        match self.kind {
            LesionKind::Neovascularization => {
                let mut segs = Vec::new();
                for k in 0..3 {
                    let a = theta + k as f64 * 2.0 * PI / 3.0;
                    let end = at(c, dir(a), self.radius);
                    let mid = at(c, dir(a), self.radius * 0.5);
                    segs.push((c, end));
                    segs.push((mid, at(mid, dir(a + 0.7), self.radius * 0.45)));
                }
                segs
            }
            LesionKind::Irma => {
                let d = dir(theta);
                let n = [-d[1], d[0]];
                let steps = (self.radius / 1.5).ceil().max(2.0) as usize;
                let start = at(c, d, -self.radius / 2.0);
                let pts: Vec<[f64; 2]> = (0..=steps)
                    .map(|i| {
                        let t = self.radius * i as f64 / steps as f64;
                        let off = if i % 2 == 0 { 1.2 } else { -1.2 };
                        at(at(start, d, t), n, off)
                    })
                    .collect();
                pts.windows(2).map(|w| (w[0], w[1])).collect()
            }
            _ => Vec::new(),
        }
    }

    /// Coverage of pixel `(r, c)` in `[0, 1]`, independent of any seed.
    pub fn alpha(&self, r: usize, c: usize) -> f64 {
        let (y, x) = (r as f64, c as f64);
        let d = (y - self.row).hypot(x - self.col);
        match self.kind {
            // Dots get a wider rim so a one-pixel radius still covers a 3×3 block.
            LesionKind::Microaneurysm => (self.radius + 1.0 - d).clamp(0.0, 1.0),
            LesionKind::Hemorrhage | LesionKind::HardExudate => (self.radius + 0.5 - d).clamp(0.0, 1.0),
            LesionKind::SoftExudate => {
                if d > self.radius + 1.0 {
                    0.0
                } else {
                    (-2.0 * (d / self.radius).powi(2)).exp()
                }
            }
            LesionKind::Neovascularization | LesionKind::Irma => {
                let dmin = self
                    .segments()
                    .iter()
                    .map(|(a, b)| segment_distance([y, x], *a, *b))
                    .fold(f64::INFINITY, f64::min);
                (1.1 - dmin).clamp(0.0, 1.0)
            }
        }
    }

    fn extent(&self) -> f64 {
        self.radius + 3.0
    }
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ap = [p[0] - a[0], p[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 == 0.0 { 0.0 } else { ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0) };
    (p[0] - a[0] - t * ab[0]).hypot(p[1] - a[1] - t * ab[1])
}

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for stream `stream` derived from `seed`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    splitmix64(seed ^ splitmix64(stream))
}

fn in_disc(r: usize, c: usize) -> bool {
    (r as f64 - DISC_CENTER).hypot(c as f64 - DISC_CENTER) < DISC_RADIUS
}

/// 8-bit RGB image, row-major with interleaved channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    data: Vec<u8>,
}

impl Image {
    pub fn from_bytes(data: Vec<u8>) -> Option<Image> {
        (data.len() == SIDE * SIDE * CHANNELS).then_some(Image { data })
    }

    pub fn bytes(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize, ch: usize) -> f64 {
        self.data[(r * SIDE + c) * CHANNELS + ch] as f64 / 255.0
    }

    pub fn luminance(&self, r: usize, c: usize) -> f64 {
        (0..CHANNELS).map(|ch| self.get(r, c, ch)).sum::<f64>() / CHANNELS as f64
    }

    /// Values in `[0, 1]`, layout `(row, col, channel)`.
    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&b| b as f64 / 255.0).collect()
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{SIDE} {SIDE}\n255\n").into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> std::result::Result<Image, String> {
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
                return Err("truncated header".into());
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        pos += 1;
        let expect = ["P6".to_string(), SIDE.to_string(), SIDE.to_string(), "255".to_string()];
        if fields != expect {
            return Err(format!("unsupported header {fields:?}"));
        }
        bytes
            .get(pos..)
            .and_then(|rest| Image::from_bytes(rest.to_vec()))
            .ok_or_else(|| "pixel payload has the wrong length".into())
    }
}

fn background(seed: u64) -> Vec<[f64; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0));
    let od_col = if rng.random_bool(0.5) { 14.0 } else { 50.0 };
    let od_row = DISC_CENTER + rng.random_range(-3.0..3.0);
    let phases: [f64; 4] = std::array::from_fn(|_| rng.random_range(0.0..2.0 * PI));
    let freqs: [f64; 4] = std::array::from_fn(|_| rng.random_range(0.08..0.2));

    let mut vessel = vec![0.0f64; SIDE * SIDE];
    let toward_center = if od_col < DISC_CENTER { 0.0 } else { PI };
    for k in 0..4 {
        let mut a = toward_center + [-1.0, -0.35, 0.35, 1.0][k] + rng.random_range(-0.2..0.2);
        let bend = rng.random_range(-0.04..0.04) + if k < 2 { -0.03 } else { 0.03 };
        let width = rng.random_range(0.6..1.0);
        let (mut y, mut x) = (od_row, od_col);
        for _ in 0..90 {
            y += 0.5 * a.sin();
            x += 0.5 * a.cos();
            a += bend;
            let (r0, c0) = (y.floor() as i64, x.floor() as i64);
            for r in r0 - 2..=r0 + 2 {
                for c in c0 - 2..=c0 + 2 {
                    if (0..SIDE as i64).contains(&r) && (0..SIDE as i64).contains(&c) {
                        let d = (r as f64 - y).hypot(c as f64 - x);
                        let v = (width + 0.5 - d).clamp(0.0, 1.0);
                        let cell = &mut vessel[r as usize * SIDE + c as usize];
                        *cell = cell.max(v);
                    }
                }
            }
        }
    }

    let mut out = vec![[0.0; 3]; SIDE * SIDE];
    for r in 0..SIDE {
        for c in 0..SIDE {
            if !in_disc(r, c) {
                continue;
            }
            let (y, x) = (r as f64, c as f64);
            let rho = (y - DISC_CENTER).hypot(x - DISC_CENTER) / DISC_RADIUS;
            let shade = 1.0 - 0.35 * rho * rho;
            let texture = 0.03 * ((freqs[0] * y + phases[0]).sin() * (freqs[1] * x + phases[1]).cos())
                + 0.02 * (freqs[2] * (x + y) + phases[2]).sin() * (freqs[3] * (x - y) + phases[3]).cos();
            let mut px = [
                (0.80 + texture) * shade,
                (0.42 + texture * 0.6) * shade,
                (0.20 + texture * 0.3) * shade,
            ];
            let v = vessel[r * SIDE + c];
            px[0] *= 1.0 - 0.12 * v;
            px[1] *= 1.0 - 0.30 * v;
            px[2] *= 1.0 - 0.25 * v;
            let od = (y - od_row).hypot(x - od_col);
            let glow = (-(od / 4.0).powi(2)).exp();
            let od_color = [0.98, 0.86, 0.58];
            for ch in 0..3 {
                px[ch] = px[ch] * (1.0 - glow) + od_color[ch] * glow;
            }
            out[r * SIDE + c] = px;
        }
    }
    out
}

/// Union coverage of all lesions, clipped to the disc.
pub fn lesion_mask(lesions: &[LesionSpec]) -> Vec<f64> {
    let mut mask = vec![0.0f64; SIDE * SIDE];
    for l in lesions {
        for_each_covered(l, |r, c, a| {
            let m = &mut mask[r * SIDE + c];
            *m = m.max(a);
        });
    }
    mask
}

fn for_each_covered(l: &LesionSpec, mut f: impl FnMut(usize, usize, f64)) {
    let e = l.extent();
    let r0 = (l.row - e).floor().max(0.0) as usize;
    let r1 = ((l.row + e).ceil() as usize).min(SIDE - 1);
    let c0 = (l.col - e).floor().max(0.0) as usize;
    let c1 = ((l.col + e).ceil() as usize).min(SIDE - 1);
    for r in r0..=r1 {
        for c in c0..=c1 {
            if in_disc(r, c) {
                let a = l.alpha(r, c);
                if a > 0.0 {
                    f(r, c, a);
                }
            }
        }
    }
}

pub fn render_image(lesions: &[LesionSpec], seed: u64) -> Result<Image> {
    for (i, l) in lesions.iter().enumerate() {
        l.validate(i)?;
    }
    let mut px = background(seed);
    for l in lesions {
        let color = l.color();
        for_each_covered(l, |r, c, a| {
            let w = a * l.intensity;
            let p = &mut px[r * SIDE + c];
            for ch in 0..3 {
                p[ch] = p[ch] * (1.0 - w) + color[ch] * w;
            }
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1));
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("valid sigma");
    let mut data = Vec::with_capacity(SIDE * SIDE * CHANNELS);
    for (i, p) in px.iter().enumerate() {
        let inside = in_disc(i / SIDE, i % SIDE);
        for &v in p {
            let n: f64 = noise.sample(&mut rng);
            let v = if inside { (v + n).clamp(0.0, 1.0) } else { 0.0 };
            data.push((v * 255.0).round() as u8);
        }
    }
    Ok(Image { data })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GradingRule {
    pub severe_hemorrhage_count: usize,
    pub severe_soft_exudate_count: usize,
}

impl Default for GradingRule {
    fn default() -> Self {
        GradingRule {
            severe_hemorrhage_count: 20,
            severe_soft_exudate_count: 4,
        }
    }
}

impl GradingRule {
    pub fn grade(&self, lesions: &[LesionSpec]) -> Grade {
        let count = |k: LesionKind| lesions.iter().filter(|l| l.kind == k).count();
        use LesionKind::*;
        if count(Neovascularization) > 0 {
            Grade::Proliferative
        } else if count(Hemorrhage) >= self.severe_hemorrhage_count
            || count(Irma) > 0
            || count(SoftExudate) >= self.severe_soft_exudate_count
        {
            Grade::Severe
        } else if count(Hemorrhage) > 0 || count(HardExudate) > 0 || count(SoftExudate) > 0 {
            Grade::Moderate
        } else if count(Microaneurysm) > 0 {
            Grade::Mild
        } else {
            Grade::NoDr
        }
    }
}

pub fn grade_from_lesions(lesions: &[LesionSpec]) -> Grade {
    GradingRule::default().grade(lesions)
}

pub fn concepts_from_lesions(lesions: &[LesionSpec]) -> ConceptFlags {
    crate::labels::flags_from_kinds(lesions.iter().map(|l| l.kind))
}

/// One finding per present concept, located at the centroid of that
/// concept's lesion centres.
pub fn findings_from_lesions(lesions: &[LesionSpec]) -> Vec<Finding> {
    LesionKind::ALL
        .iter()
        .filter_map(|&kind| {
            let of_kind: Vec<&LesionSpec> = lesions.iter().filter(|l| l.kind == kind).collect();
            if of_kind.is_empty() {
                return None;
            }
            let n = of_kind.len() as f64;
            let row = of_kind.iter().map(|l| l.row).sum::<f64>() / n;
            let col = of_kind.iter().map(|l| l.col).sum::<f64>() / n;
            Some(Finding {
                kind,
                location: Location::from_point(row, col),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct FundusSample {
    pub id: String,
    pub image: Image,
    pub grade: Grade,
    pub concepts: ConceptFlags,
    pub lesions: Vec<LesionSpec>,
    pub seed: u64,
}

impl FundusSample {
    pub fn findings(&self) -> Vec<Finding> {
        findings_from_lesions(&self.lesions)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    /// Requested sample count per grade; entries past index 4 must be zero.
    pub counts: Vec<usize>,
    pub seed: u64,
    pub rule: GradingRule,
}

impl DatasetConfig {
    pub fn balanced(per_grade: usize, seed: u64) -> Self {
        DatasetConfig {
            counts: vec![per_grade; 5],
            seed,
            rule: GradingRule::default(),
        }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

fn check_achievable(config: &DatasetConfig) -> Result<()> {
    for (g, &n) in config.counts.iter().enumerate() {
        if n == 0 {
            continue;
        }
        if g > 4 {
            return Err(SynthError::Impossible {
                grade: g,
                detail: "grades run from 0 to 4".into(),
            });
        }
        let rule = &config.rule;
        if g <= 2 && (rule.severe_hemorrhage_count == 0 || rule.severe_soft_exudate_count == 0) {
            return Err(SynthError::Impossible {
                grade: g,
                detail: "a zero severity threshold makes every lesion set severe".into(),
            });
        }
    }
    Ok(())
}

struct Proposal<'a> {
    rng: &'a mut ChaCha8Rng,
    lesions: Vec<LesionSpec>,
}

impl Proposal<'_> {
    /// Adds `n` lesions of `kind` clustered around one anchor.
    fn cluster(&mut self, kind: LesionKind, n: usize) {
        if n == 0 {
            return;
        }
        let rho = 18.0 * self.rng.random::<f64>().sqrt();
        let phi = self.rng.random_range(0.0..2.0 * PI);
        let (ar, ac) = (DISC_CENTER + rho * phi.sin(), DISC_CENTER + rho * phi.cos());
        let spread = (4.0 + n as f64 / 2.0).min(10.0);
        let (lo, hi) = kind.size_bounds();
        for _ in 0..n {
            let (row, col) = loop {
                let r = (ar + self.rng.random_range(-spread..=spread)).round();
                let c = (ac + self.rng.random_range(-spread..=spread)).round();
                if (r - DISC_CENTER).hypot(c - DISC_CENTER) <= DISC_RADIUS - 4.0 {
                    break (r, c);
                }
            };
            let radius = if lo == hi { lo } else { self.rng.random_range(lo..=hi) };
            let intensity = self.rng.random_range(0.85..=1.0);
            self.lesions.push(LesionSpec { kind, row, col, radius, intensity });
        }
    }

    fn maybe(&mut self, p: f64, kind: LesionKind, lo: usize, hi: usize) {
        if hi >= lo && hi > 0 && self.rng.random_bool(p) {
            let n = self.rng.random_range(lo.max(1)..=hi);
            self.cluster(kind, n);
        }
    }
}

fn propose(grade: Grade, rule: &GradingRule, rng: &mut ChaCha8Rng) -> Vec<LesionSpec> {
    use LesionKind::*;
    let h_max = rule.severe_hemorrhage_count.saturating_sub(1).min(10);
    let se_max = rule.severe_soft_exudate_count.saturating_sub(1).min(2);
    let mut p = Proposal { rng, lesions: Vec::new() };
    match grade {
        Grade::NoDr => {}
        Grade::Mild => {
            let n = p.rng.random_range(2..=8);
            p.cluster(Microaneurysm, n);
        }
        Grade::Moderate => {
            loop {
                let before = p.lesions.len();
                p.maybe(0.5, Hemorrhage, 1, h_max);
                p.maybe(0.5, HardExudate, 1, 6);
                p.maybe(0.5, SoftExudate, 1, se_max);
                if p.lesions.len() > before {
                    break;
                }
            }
            p.maybe(0.5, Microaneurysm, 1, 4);
        }
        Grade::Severe => {
            let u: f64 = p.rng.random();
            if u < 0.5 {
                let n = p.rng.random_range(2..=4);
                p.cluster(Irma, n);
                p.maybe(0.4, Hemorrhage, 1, h_max);
                p.maybe(0.3, HardExudate, 1, 6);
                p.maybe(0.3, SoftExudate, 1, se_max);
            } else if u < 0.8 {
                let lo = rule.severe_hemorrhage_count.max(1);
                let n = p.rng.random_range(lo..=lo + 8);
                p.cluster(Hemorrhage, n);
                p.maybe(0.3, HardExudate, 1, 6);
            } else {
                let lo = rule.severe_soft_exudate_count.max(1);
                let n = p.rng.random_range(lo..=lo + 2);
                p.cluster(SoftExudate, n);
                p.maybe(0.3, Hemorrhage, 1, h_max.min(5));
            }
            p.maybe(0.5, Microaneurysm, 1, 4);
        }
        Grade::Proliferative => {
            let n = p.rng.random_range(1..=2);
            p.cluster(Neovascularization, n);
            p.maybe(0.5, Microaneurysm, 1, 4);
            p.maybe(0.5, Hemorrhage, 1, h_max);
            p.maybe(0.3, HardExudate, 1, 6);
            p.maybe(0.3, SoftExudate, 1, se_max);
            p.maybe(0.3, Irma, 1, 2);
        }
    }
    p.lesions
}

/// Generates the sample at global position `index`; depends only on
/// `(config.seed, grade, index)`.
pub fn generate_sample(config: &DatasetConfig, grade: Grade, index: usize) -> Result<FundusSample> {
    let seed = derive_seed(config.seed, index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 2));
    for _ in 0..MAX_ATTEMPTS {
        let lesions = propose(grade, &config.rule, &mut rng);
        if config.rule.grade(&lesions) == grade {
            let image = render_image(&lesions, seed)?;
            return Ok(FundusSample {
                id: format!("s{index:05}"),
                image,
                grade,
                concepts: concepts_from_lesions(&lesions),
                lesions,
                seed,
            });
        }
    }
    Err(SynthError::Impossible {
        grade: grade.index(),
        detail: format!("no consistent lesion set after {MAX_ATTEMPTS} proposals"),
    })
}

fn plan(config: &DatasetConfig) -> Vec<Grade> {
    config
        .counts
        .iter()
        .enumerate()
        .flat_map(|(g, &n)| std::iter::repeat_n(Grade::from_index(g).unwrap_or(Grade::NoDr), n))
        .collect()
}

/// All samples in grade order. Runs in parallel; the result equals the
/// sequential one because every sample has its own derived seed.
pub fn generate_samples(config: &DatasetConfig) -> Result<Vec<FundusSample>> {
    check_achievable(config)?;
    plan(config)
        .into_par_iter()
        .enumerate()
        .map(|(i, g)| generate_sample(config, g, i))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub image: String,
    pub grade: Grade,
    pub concepts: ConceptFlags,
    pub lesions: Vec<LesionSpec>,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestMeta {
    pub seed: u64,
    pub counts: Vec<usize>,
    pub rule: GradingRule,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
    pub meta: ManifestMeta,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const META_FILE: &str = "dataset_meta.json";
pub const IMAGE_DIR: &str = "images";

impl DatasetManifest {
    pub fn from_samples(config: &DatasetConfig, samples: &[FundusSample]) -> Self {
        let records = samples
            .iter()
            .map(|s| ManifestRecord {
                id: s.id.clone(),
                image: format!("{IMAGE_DIR}/{}.ppm", s.id),
                grade: s.grade,
                concepts: s.concepts,
                lesions: s.lesions.clone(),
                split: Split::Train,
            })
            .collect();
        DatasetManifest {
            records,
            meta: ManifestMeta {
                seed: config.seed,
                counts: config.counts.clone(),
                rule: config.rule,
            },
        }
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(MANIFEST_FILE), self.to_jsonl())?;
        let mut meta = serde_json::to_string_pretty(&self.meta)?;
        meta.push('\n');
        fs::write(dir.join(META_FILE), meta)?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let file = fs::File::open(&path)?;
        let mut records = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line)?);
        }
        let meta = serde_json::from_str(&fs::read_to_string(dir.join(META_FILE))?)?;
        Ok(DatasetManifest { records, meta })
    }

    pub fn split_counts(&self) -> BTreeMap<Split, usize> {
        let mut m = BTreeMap::new();
        for r in &self.records {
            *m.entry(r.split).or_insert(0) += 1;
        }
        m
    }
}

/// Generates samples, writes their PPM images and the manifest to `dir`.
pub fn generate_dataset(config: &DatasetConfig, dir: &Path) -> Result<(DatasetManifest, Vec<FundusSample>)> {
    let samples = generate_samples(config)?;
    let manifest = DatasetManifest::from_samples(config, &samples);
    write_images(dir, &samples)?;
    manifest.write(dir)?;
    Ok((manifest, samples))
}

pub fn write_images(dir: &Path, samples: &[FundusSample]) -> Result<()> {
    let img_dir = dir.join(IMAGE_DIR);
    fs::create_dir_all(&img_dir)?;
    for s in samples {
        let mut f = fs::File::create(img_dir.join(format!("{}.ppm", s.id)))?;
        f.write_all(&s.image.to_ppm())?;
    }
    Ok(())
}

/// Reloads samples referenced by a manifest, checking the label invariants.
pub fn load_samples(dir: &Path, manifest: &DatasetManifest) -> Result<Vec<FundusSample>> {
    manifest
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let path = dir.join(&r.image);
            let image = Image::from_ppm(&fs::read(&path)?).map_err(|detail| SynthError::Format {
                path: path.clone(),
                detail,
            })?;
            if manifest.meta.rule.grade(&r.lesions) != r.grade || concepts_from_lesions(&r.lesions) != r.concepts {
                return Err(SynthError::Format {
                    path: dir.join(MANIFEST_FILE),
                    detail: format!("record {} has inconsistent labels", r.id),
                });
            }
            Ok(FundusSample {
                id: r.id.clone(),
                image,
                grade: r.grade,
                concepts: r.concepts,
                lesions: r.lesions.clone(),
                seed: derive_seed(manifest.meta.seed, i as u64),
            })
        })
        .collect()
}

/// Largest-remainder allocation of `n` items over `ratios`.
fn allocate(n: usize, ratios: &[f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut counts: [usize; 3] = std::array::from_fn(|i| (exact[i] + 1e-9).floor() as usize);
    let mut left = n - counts.iter().sum::<usize>().min(n);
    let mut order: Vec<usize> = (0..3).filter(|&i| ratios[i] > 0.0).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - counts[a] as f64;
        let fb = exact[b] - counts[b] as f64;
        fb.partial_cmp(&fa).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

/// Stratified train/val/test assignment; each grade stratum is shuffled
/// with its own seeded stream and cut by largest-remainder rounding.
pub fn split(manifest: &DatasetManifest, ratios: [f64; 3], seed: u64) -> Result<DatasetManifest> {
    if ratios.iter().any(|r| !r.is_finite() || *r < 0.0) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(SynthError::Split(format!("ratios {ratios:?} must be non-negative and sum to 1")));
    }
    let active = ratios.iter().filter(|&&r| r > 0.0).count();
    let mut out = manifest.clone();
    for g in Grade::ALL {
        let mut idx: Vec<usize> = (0..out.records.len()).filter(|&i| out.records[i].grade == g).collect();
        if idx.is_empty() {
            continue;
        }
        if idx.len() < active {
            return Err(SynthError::Split(format!(
                "grade {g} has {} samples, fewer than the {active} splits",
                idx.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 100 + g.index() as u64));
        for i in (1..idx.len()).rev() {
            let j = rng.random_range(0..=i);
            idx.swap(i, j);
        }
        let counts = allocate(idx.len(), &ratios);
        let mut it = idx.into_iter();
        for (s, &n) in Split::ALL.iter().zip(&counts) {
            for i in it.by_ref().take(n) {
                out.records[i].split = *s;
            }
        }
    }
    Ok(out)
}

//! Label vocabulary shared by the data generator, the report grammar and
//! the metrics: severity grades, lesion kinds and retinal locations.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Severity grade, 0 = no DR … 4 = proliferative DR.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Grade {
    NoDr,
    Mild,
    Moderate,
    Severe,
    Proliferative,
}

impl Grade {
    pub const ALL: [Grade; 5] = [
        Grade::NoDr,
        Grade::Mild,
        Grade::Moderate,
        Grade::Severe,
        Grade::Proliferative,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Grade> {
        Self::ALL.get(i).copied()
    }

    /// Phrase used in reports, e.g. `"moderate dr"`.
    pub fn phrase(self) -> &'static str {
        match self {
            Grade::NoDr => "no dr",
            Grade::Mild => "mild dr",
            Grade::Moderate => "moderate dr",
            Grade::Severe => "severe dr",
            Grade::Proliferative => "proliferative dr",
        }
    }

    /// Row label used in tables.
    pub fn title(self) -> &'static str {
        match self {
            Grade::NoDr => "No DR",
            Grade::Mild => "Mild DR",
            Grade::Moderate => "Moderate DR",
            Grade::Severe => "Severe DR",
            Grade::Proliferative => "Proliferative DR (PDR)",
        }
    }
}

impl TryFrom<u8> for Grade {
    type Error = String;
    fn try_from(v: u8) -> Result<Self, String> {
        Grade::from_index(v as usize).ok_or_else(|| format!("grade {v} out of range 0-4"))
    }
}

impl From<Grade> for u8 {
    fn from(g: Grade) -> u8 {
        g as u8
    }
}

impl fmt::Display for Grade {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.index())
    }
}

/// The six pathological concepts, in the canonical (table) order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LesionKind {
    Microaneurysm,
    Hemorrhage,
    HardExudate,
    SoftExudate,
    Neovascularization,
    Irma,
}

impl LesionKind {
    pub const ALL: [LesionKind; 6] = [
        LesionKind::Microaneurysm,
        LesionKind::Hemorrhage,
        LesionKind::HardExudate,
        LesionKind::SoftExudate,
        LesionKind::Neovascularization,
        LesionKind::Irma,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<LesionKind> {
        Self::ALL.get(i).copied()
    }

    /// Plural phrase used in generated text.
    pub fn phrase(self) -> &'static str {
        match self {
            LesionKind::Microaneurysm => "microaneurysms",
            LesionKind::Hemorrhage => "hemorrhages",
            LesionKind::HardExudate => "hard exudates",
            LesionKind::SoftExudate => "soft exudates",
            LesionKind::Neovascularization => "neovascularization",
            LesionKind::Irma => "intraretinal microvascular abnormalities",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            LesionKind::Microaneurysm => "Microaneurysms",
            LesionKind::Hemorrhage => "Hemorrhages",
            LesionKind::HardExudate => "Hard Exudates",
            LesionKind::SoftExudate => "Soft Exudates (Cotton Wool Spots)",
            LesionKind::Neovascularization => "Neovascularization",
            LesionKind::Irma => "Intraretinal Microvascular Abnormalities (IRMA)",
        }
    }

    /// Inclusive size bounds in pixels: radius, or filament length for
    /// neovascularization and squiggle length for IRMA.
    pub fn size_bounds(self) -> (f64, f64) {
        match self {
            LesionKind::Microaneurysm => (1.0, 1.0),
            LesionKind::Hemorrhage => (2.0, 4.0),
            LesionKind::HardExudate => (1.0, 3.0),
            LesionKind::SoftExudate => (3.0, 5.0),
            LesionKind::Neovascularization => (6.0, 12.0),
            LesionKind::Irma => (3.0, 6.0),
        }
    }

    /// Whether the lesion is rendered darker than the background.
    pub fn is_dark(self) -> bool {
        matches!(
            self,
            LesionKind::Microaneurysm | LesionKind::Hemorrhage | LesionKind::Irma
        )
    }
}

/// Image-level presence flags, indexed by [`LesionKind::index`].
pub type ConceptFlags = [bool; 6];

/// Coarse retinal region of a finding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Location {
    SuperiorTemporal,
    SuperiorNasal,
    InferiorTemporal,
    InferiorNasal,
    Central,
}

/// Image centre used for quadrant assignment, in pixels.
pub const IMAGE_CENTER: f64 = 32.0;
/// Points closer than this to the image centre are `Central`.
pub const CENTRAL_RADIUS: f64 = 10.0;

impl Location {
    pub const ALL: [Location; 5] = [
        Location::SuperiorTemporal,
        Location::SuperiorNasal,
        Location::InferiorTemporal,
        Location::InferiorNasal,
        Location::Central,
    ];

    pub fn phrase(self) -> &'static str {
        match self {
            Location::SuperiorTemporal => "superior temporal",
            Location::SuperiorNasal => "superior nasal",
            Location::InferiorTemporal => "inferior temporal",
            Location::InferiorNasal => "inferior nasal",
            Location::Central => "central",
        }
    }

    /// Quadrant by the sign of `(row − 32, col − 32)`; rows above the
    /// centre are superior, columns left of it temporal.
    pub fn from_point(row: f64, col: f64) -> Location {
        let (dr, dc) = (row - IMAGE_CENTER, col - IMAGE_CENTER);
        if (dr * dr + dc * dc).sqrt() < CENTRAL_RADIUS {
            return Location::Central;
        }
        match (dr < 0.0, dc < 0.0) {
            (true, true) => Location::SuperiorTemporal,
            (true, false) => Location::SuperiorNasal,
            (false, true) => Location::InferiorTemporal,
            (false, false) => Location::InferiorNasal,
        }
    }
}

/// One entry of a report's findings list.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Finding {
    pub kind: LesionKind,
    pub location: Location,
}

pub fn flags_from_kinds(kinds: impl IntoIterator<Item = LesionKind>) -> ConceptFlags {
    let mut flags = [false; 6];
    for k in kinds {
        flags[k.index()] = true;
    }
    flags
}

//! Tooth identifiers, landmark indexing, presence vectors and the
//! two-digit dentition taxonomy.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::geometry::Point;

/// Teeth per arch.
pub const NUM_TEETH: usize = 16;
/// Landmarks per tooth.
pub const LANDMARKS_PER_TOOTH: usize = 5;
/// Landmarks per arch.
pub const NUM_LANDMARKS: usize = NUM_TEETH * LANDMARKS_PER_TOOTH;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum DentalError {
    #[error("tooth index {0} outside 1..=16")]
    ToothIndex(usize),
    #[error("landmark kind index {0} outside 1..=5")]
    KindIndex(usize),
    #[error("landmark index {0} outside 1..=80")]
    LandmarkIndex(usize),
    #[error("unknown tooth label '{0}'")]
    ToothLabel(String),
    #[error("unknown landmark kind '{0}'")]
    KindLabel(String),
    #[error("unknown dentition type '{0}'")]
    DentitionCode(String),
    #[error("unknown arch '{0}'")]
    ArchLabel(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Upper,
    Lower,
}

impl Arch {
    pub fn letter(self) -> char {
        match self {
            Arch::Upper => 'U',
            Arch::Lower => 'L',
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Arch::Upper => "upper",
            Arch::Lower => "lower",
        }
    }
}

impl FromStr for Arch {
    type Err = DentalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "upper" => Ok(Arch::Upper),
            "lower" => Ok(Arch::Lower),
            _ => Err(DentalError::ArchLabel(s.to_string())),
        }
    }
}

/// The patient's side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    Right,
    Left,
}

impl Side {
    pub fn letter(self) -> char {
        match self {
            Side::Right => 'R',
            Side::Left => 'L',
        }
    }

    pub fn mirrored(self) -> Side {
        match self {
            Side::Right => Side::Left,
            Side::Left => Side::Right,
        }
    }
}

/// One tooth of an arch: position 1 is the central incisor, 8 the third molar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ToothId {
    pub arch: Arch,
    pub side: Side,
    pub position: u8,
}

impl ToothId {
    /// Tooth from its index `t` in 1..=16, ordered right 8 → right 1, then
    /// left 1 → left 8.
    pub fn from_index(arch: Arch, t: usize) -> Result<Self, DentalError> {
        let (side, position) = match t {
            1..=8 => (Side::Right, 9 - t),
            9..=16 => (Side::Left, t - 8),
            _ => return Err(DentalError::ToothIndex(t)),
        };
        Ok(ToothId {
            arch,
            side,
            position: position as u8,
        })
    }

    pub fn index(self) -> usize {
        let p = self.position as usize;
        match self.side {
            Side::Right => 9 - p,
            Side::Left => 8 + p,
        }
    }

    pub fn is_third_molar(self) -> bool {
        self.position == 8
    }

    /// Alphanumeric label such as `UR6` or `LL1`.
    pub fn label(self) -> String {
        format!("{}{}{}", self.arch.letter(), self.side.letter(), self.position)
    }

    pub fn parse_label(label: &str) -> Result<Self, DentalError> {
        let err = || DentalError::ToothLabel(label.to_string());
        let b = label.as_bytes();
        if b.len() != 3 {
            return Err(err());
        }
        let arch = match b[0] {
            b'U' => Arch::Upper,
            b'L' => Arch::Lower,
            _ => return Err(err()),
        };
        let side = match b[1] {
            b'R' => Side::Right,
            b'L' => Side::Left,
            _ => return Err(err()),
        };
        let position = match b[2] {
            c @ b'1'..=b'8' => c - b'0',
            _ => return Err(err()),
        };
        Ok(ToothId { arch, side, position })
    }

    /// The 16 teeth of `arch` in index order.
    pub fn all(arch: Arch) -> impl Iterator<Item = ToothId> {
        (1..=NUM_TEETH).map(move |t| ToothId::from_index(arch, t).expect("index in range"))
    }
}

impl fmt::Display for ToothId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// Landmark kinds in index order g = 1..=5.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LandmarkKind {
    /// Mesial point.
    MP,
    /// Distal point.
    DP,
    /// Cusp point.
    CP,
    /// Facial gingival point.
    FGP,
    /// Lingual gingival point.
    LGP,
}

impl LandmarkKind {
    pub const ALL: [LandmarkKind; LANDMARKS_PER_TOOTH] =
        [LandmarkKind::MP, LandmarkKind::DP, LandmarkKind::CP, LandmarkKind::FGP, LandmarkKind::LGP];

    pub fn index(self) -> usize {
        self as usize + 1
    }

    pub fn from_index(g: usize) -> Result<Self, DentalError> {
        g.checked_sub(1)
            .and_then(|i| Self::ALL.get(i).copied())
            .ok_or(DentalError::KindIndex(g))
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LandmarkKind::MP => "MP",
            LandmarkKind::DP => "DP",
            LandmarkKind::CP => "CP",
            LandmarkKind::FGP => "FGP",
            LandmarkKind::LGP => "LGP",
        }
    }
}

impl FromStr for LandmarkKind {
    type Err = DentalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| DentalError::KindLabel(s.to_string()))
    }
}

/// One-based landmark index `k = (t − 1)·5 + g`.
pub fn landmark_index(t: usize, g: usize) -> Result<usize, DentalError> {
    if !(1..=NUM_TEETH).contains(&t) {
        return Err(DentalError::ToothIndex(t));
    }
    if !(1..=LANDMARKS_PER_TOOTH).contains(&g) {
        return Err(DentalError::KindIndex(g));
    }
    Ok((t - 1) * LANDMARKS_PER_TOOTH + g)
}

/// Inverse of [`landmark_index`]: `k` → `(t, g)`.
pub fn landmark_tooth_kind(k: usize) -> Result<(usize, usize), DentalError> {
    if !(1..=NUM_LANDMARKS).contains(&k) {
        return Err(DentalError::LandmarkIndex(k));
    }
    Ok(((k - 1) / LANDMARKS_PER_TOOTH + 1, (k - 1) % LANDMARKS_PER_TOOTH + 1))
}

/// Ground-truth presence flags indexed by `t − 1`.
pub type Presence = [bool; NUM_TEETH];

/// Expand per-tooth presence to the 80 landmark rows (indexed by `k − 1`).
pub fn landmark_presence(presence: &Presence) -> [bool; NUM_LANDMARKS] {
    std::array::from_fn(|i| presence[i / LANDMARKS_PER_TOOTH])
}

/// Two-digit dentition type: third-molar digit and capped missing count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DentitionType {
    third_molar: bool,
    missing: u8,
}

impl DentitionType {
    /// All ten codes in table order 00..04, 10..14.
    pub const ALL: [DentitionType; 10] = {
        let mut all = [DentitionType {
            third_molar: false,
            missing: 0,
        }; 10];
        let mut i = 0;
        while i < 10 {
            all[i] = DentitionType {
                third_molar: i >= 5,
                missing: (i % 5) as u8,
            };
            i += 1;
        }
        all
    };

    pub fn new(third_molar: bool, missing: u8) -> Result<Self, DentalError> {
        if missing > 4 {
            return Err(DentalError::DentitionCode(format!("{}{missing}", third_molar as u8)));
        }
        Ok(Self { third_molar, missing })
    }

    pub fn has_third_molar(self) -> bool {
        self.third_molar
    }

    /// Missing non-third-molar teeth, with 4 meaning four or more.
    pub fn missing(self) -> u8 {
        self.missing
    }

    pub fn code(self) -> String {
        format!("{}{}", self.third_molar as u8, self.missing)
    }

    /// Position of this type in [`DentitionType::ALL`].
    pub fn ordinal(self) -> usize {
        self.third_molar as usize * 5 + self.missing as usize
    }
}

impl fmt::Display for DentitionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.code())
    }
}

impl FromStr for DentitionType {
    type Err = DentalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let b = s.as_bytes();
        let err = || DentalError::DentitionCode(s.to_string());
        if b.len() != 2 {
            return Err(err());
        }
        let third_molar = match b[0] {
            b'0' => false,
            b'1' => true,
            _ => return Err(err()),
        };
        match b[1] {
            c @ b'0'..=b'4' => Ok(Self {
                third_molar,
                missing: c - b'0',
            }),
            _ => Err(err()),
        }
    }
}

impl Serialize for DentitionType {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.code())
    }
}

impl<'de> Deserialize<'de> for DentitionType {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Dentition type of a presence vector.
pub fn classify_dentition(presence: &Presence) -> DentitionType {
    let mut third_molar = false;
    let mut missing = 0u8;
    for (i, &present) in presence.iter().enumerate() {
        let third = i == 0 || i == NUM_TEETH - 1;
        if third {
            third_molar |= present;
        } else if !present {
            missing += 1;
        }
    }
    DentitionType {
        third_molar,
        missing: missing.min(4),
    }
}

/// Landmark positions of one tooth in kind order.
pub type ToothLandmarks = [Point; LANDMARKS_PER_TOOTH];

/// Expert annotation of one dental model: every present tooth carries its
/// five landmarks; absent teeth carry none.
#[derive(Debug, Clone, PartialEq)]
pub struct DentalAnnotation {
    pub model_id: String,
    pub patient_id: String,
    pub arch: Arch,
    /// Indexed by `t − 1`.
    pub teeth: [Option<ToothLandmarks>; NUM_TEETH],
}

impl DentalAnnotation {
    pub fn presence(&self) -> Presence {
        presence_from_annotation(self)
    }

    pub fn dentition_type(&self) -> DentitionType {
        classify_dentition(&self.presence())
    }

    /// Position of landmark `k` (one-based), if its tooth is present.
    pub fn landmark(&self, k: usize) -> Option<Point> {
        let (t, g) = landmark_tooth_kind(k).ok()?;
        self.teeth[t - 1].map(|lm| lm[g - 1])
    }

    /// Translate every landmark by `offset`.
    pub fn translated(&self, offset: Point) -> Self {
        let mut out = self.clone();
        for lm in out.teeth.iter_mut().flatten() {
            for p in lm.iter_mut() {
                for a in 0..3 {
                    p[a] += offset[a];
                }
            }
        }
        out
    }
}

/// `y_t = 1` iff tooth `t` carries landmarks.
pub fn presence_from_annotation(ann: &DentalAnnotation) -> Presence {
    std::array::from_fn(|i| ann.teeth[i].is_some())
}

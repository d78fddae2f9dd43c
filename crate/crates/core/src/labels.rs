//! Label vocabularies: the 16 annotated materials, the 14 classes the models
//! predict, and the binary compliance label.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{validation, ClampError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Material {
    Aluminium,
    Brass,
    Cardboard,
    DryWall,
    Fabric,
    Foam,
    Glass,
    Granite,
    HardPlastic,
    Paper,
    Porcelain,
    Rubber,
    SoftPlastic,
    Steel,
    VegetableMatter,
    Wood,
}

impl Material {
    pub const ALL: [Material; 16] = [
        Material::Aluminium,
        Material::Brass,
        Material::Cardboard,
        Material::DryWall,
        Material::Fabric,
        Material::Foam,
        Material::Glass,
        Material::Granite,
        Material::HardPlastic,
        Material::Paper,
        Material::Porcelain,
        Material::Rubber,
        Material::SoftPlastic,
        Material::Steel,
        Material::VegetableMatter,
        Material::Wood,
    ];

    /// Classes seen by the classifiers: everything except the two smallest
    /// classes, which the dataset filter drops.
    pub const MODEL_CLASSES: [Material; 14] = [
        Material::Aluminium,
        Material::Brass,
        Material::Cardboard,
        Material::Fabric,
        Material::Foam,
        Material::Glass,
        Material::HardPlastic,
        Material::Paper,
        Material::Porcelain,
        Material::Rubber,
        Material::SoftPlastic,
        Material::Steel,
        Material::VegetableMatter,
        Material::Wood,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Material::Aluminium => "aluminium",
            Material::Brass => "brass",
            Material::Cardboard => "cardboard",
            Material::DryWall => "dry_wall",
            Material::Fabric => "fabric",
            Material::Foam => "foam",
            Material::Glass => "glass",
            Material::Granite => "granite",
            Material::HardPlastic => "hard_plastic",
            Material::Paper => "paper",
            Material::Porcelain => "porcelain",
            Material::Rubber => "rubber",
            Material::SoftPlastic => "soft_plastic",
            Material::Steel => "steel",
            Material::VegetableMatter => "vegetable_matter",
            Material::Wood => "wood",
        }
    }

    /// Index into [`Material::MODEL_CLASSES`], `None` for excluded classes.
    pub fn class_index(self) -> Option<usize> {
        Material::MODEL_CLASSES.iter().position(|m| *m == self)
    }

    pub fn from_class_index(idx: usize) -> Option<Material> {
        Material::MODEL_CLASSES.get(idx).copied()
    }

    /// Normalizes free text (case, spaces vs underscores) and looks it up.
    pub fn parse_loose(s: &str) -> Option<Material> {
        let norm = normalize_token(s);
        Material::ALL.into_iter().find(|m| m.name() == norm)
    }

    pub fn vocabulary() -> String {
        Material::ALL.map(|m| m.name()).join(", ")
    }
}

/// Lowercase, trimmed, with runs of spaces/hyphens mapped to underscores.
pub fn normalize_token(s: &str) -> String {
    let lowered = s.trim().to_lowercase();
    let mut out = String::with_capacity(lowered.len());
    let mut last_sep = false;
    for ch in lowered.chars() {
        if ch == ' ' || ch == '_' || ch == '-' {
            if !last_sep && !out.is_empty() {
                out.push('_');
            }
            last_sep = true;
        } else {
            out.push(ch);
            last_sep = false;
        }
    }
    while out.ends_with('_') {
        out.pop();
    }
    out
}

impl fmt::Display for Material {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Material {
    type Err = ClampError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Material::parse_loose(s).ok_or_else(|| {
            validation(format!("unknown material label '{s}'; expected one of: {}", Material::vocabulary()))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Compliance {
    Soft,
    Hard,
}

impl Compliance {
    pub fn class_index(self) -> usize {
        match self {
            Compliance::Soft => 0,
            Compliance::Hard => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Compliance::Soft => "soft",
            Compliance::Hard => "hard",
        }
    }
}

impl FromStr for Compliance {
    type Err = ClampError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match normalize_token(s).as_str() {
            "soft" => Ok(Compliance::Soft),
            "hard" => Ok(Compliance::Hard),
            other => Err(validation(format!("unknown compliance label '{other}'; expected soft or hard"))),
        }
    }
}

/// Physical gripper configuration that produced a trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Embodiment {
    ClampDevice,
    FrankaClamp,
    FrankaPj,
    WidowxPj,
}

impl Embodiment {
    pub const ALL: [Embodiment; 4] =
        [Embodiment::ClampDevice, Embodiment::FrankaClamp, Embodiment::FrankaPj, Embodiment::WidowxPj];

    /// Parallel-jaw grippers measure proprioception as linear acceleration.
    pub fn is_parallel_jaw(self) -> bool {
        matches!(self, Embodiment::FrankaPj | Embodiment::WidowxPj)
    }

    pub fn name(self) -> &'static str {
        match self {
            Embodiment::ClampDevice => "clamp_device",
            Embodiment::FrankaClamp => "franka_clamp",
            Embodiment::FrankaPj => "franka_pj",
            Embodiment::WidowxPj => "widowx_pj",
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Embodiment> {
        Embodiment::ALL.get(code as usize).copied()
    }
}

impl fmt::Display for Embodiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Embodiment {
    type Err = ClampError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = normalize_token(s);
        Embodiment::ALL.into_iter().find(|e| e.name() == norm).ok_or_else(|| {
            validation(format!("unknown embodiment '{s}'; expected clamp_device, franka_clamp, franka_pj or widowx_pj"))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_classes_exclude_smallest() {
        assert_eq!(Material::MODEL_CLASSES.len(), 14);
        assert_eq!(Material::Granite.class_index(), None);
        assert_eq!(Material::DryWall.class_index(), None);
        for (i, m) in Material::MODEL_CLASSES.iter().enumerate() {
            assert_eq!(m.class_index(), Some(i));
            assert_eq!(Material::from_class_index(i), Some(*m));
        }
    }

    #[test]
    fn loose_parsing() {
        assert_eq!(Material::parse_loose("Hard Plastic"), Some(Material::HardPlastic));
        assert_eq!(Material::parse_loose(" dry_wall "), Some(Material::DryWall));
        assert_eq!(Material::parse_loose("vegetable-matter"), Some(Material::VegetableMatter));
        assert_eq!(Material::parse_loose("unobtainium"), None);
    }

    #[test]
    fn unknown_label_lists_vocabulary() {
        let err = "marble".parse::<Material>().unwrap_err().to_string();
        for m in Material::ALL {
            assert!(err.contains(m.name()), "{err}");
        }
    }
}

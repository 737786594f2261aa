//! Skeleton description: bone tree, rest-pose capsules and blending constants.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::BodyError;

const DEFAULT_SKELETON: &str = include_str!("default_skeleton.toml");

/// Body parts used for semantic zoom.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Head,
    UpperBody,
    LowerBody,
    Midsection,
    LeftArm,
    RightArm,
    FullBody,
}

impl Region {
    /// The six zoom regions, without `FullBody`.
    pub const PARTS: [Region; 6] = [
        Region::Head,
        Region::UpperBody,
        Region::LowerBody,
        Region::Midsection,
        Region::LeftArm,
        Region::RightArm,
    ];

    pub const ALL: [Region; 7] = [
        Region::FullBody,
        Region::Head,
        Region::UpperBody,
        Region::LowerBody,
        Region::Midsection,
        Region::LeftArm,
        Region::RightArm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Region::Head => "head",
            Region::UpperBody => "upper_body",
            Region::LowerBody => "lower_body",
            Region::Midsection => "midsection",
            Region::LeftArm => "left_arm",
            Region::RightArm => "right_arm",
            Region::FullBody => "full_body",
        }
    }

    /// Text appended to the guidance prompt when zoomed on this region.
    pub fn prompt_fragment(self) -> &'static str {
        match self {
            Region::Head => "the face and head",
            Region::UpperBody => "the upper body",
            Region::LowerBody => "the lower body",
            Region::Midsection => "the midsection",
            Region::LeftArm => "the left arm",
            Region::RightArm => "the right arm",
            Region::FullBody => "the full body",
        }
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Region {
    type Err = BodyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Region::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| BodyError::InvalidSkeleton(format!("unknown region `{s}`")))
    }
}

/// Which shape scales act on a bone.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeGroup {
    Torso,
    Head,
    Arm,
    Leg,
}

impl ShapeGroup {
    /// Index of the group's length scale inside the shape vector.
    pub fn length_index(self) -> usize {
        match self {
            ShapeGroup::Torso => 1,
            ShapeGroup::Head => 2,
            ShapeGroup::Arm => 3,
            ShapeGroup::Leg => 4,
        }
    }

    /// Index of the group's radius scale inside the shape vector.
    pub fn radius_index(self) -> usize {
        self.length_index() + 5
    }
}

/// One articulated bone and the capsule rigidly attached to it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoneSpec {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<String>,
    /// Rotation center in the rest pose.
    pub pivot: [f64; 3],
    /// Capsule segment endpoints in the rest pose.
    pub endpoints: [[f64; 3]; 2],
    pub radius: f64,
    pub region: Region,
    pub group: ShapeGroup,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkeletonConfig {
    /// Maximum deviation of the smooth union from the hard minimum (m).
    pub blend_radius: f64,
    /// Density sharpness `a` (1/m).
    pub sharpness: f64,
    /// Padding added around semantic region boxes (m).
    #[serde(default = "default_margin")]
    pub region_margin: f64,
    #[serde(rename = "bone")]
    pub bones: Vec<BoneSpec>,
    #[serde(skip)]
    parents: Vec<Option<usize>>,
}

fn default_margin() -> f64 {
    0.1
}

impl Default for SkeletonConfig {
    fn default() -> Self {
        Self::from_toml_str(DEFAULT_SKELETON).expect("embedded skeleton is valid")
    }
}

impl SkeletonConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, BodyError> {
        let mut cfg: SkeletonConfig =
            toml::from_str(text).map_err(|e| BodyError::InvalidSkeleton(e.to_string()))?;
        cfg.resolve()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, BodyError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BodyError::InvalidSkeleton(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("skeleton serializes")
    }

    /// Builds a skeleton from explicit bones, validating the tree.
    pub fn from_bones(
        bones: Vec<BoneSpec>,
        blend_radius: f64,
        sharpness: f64,
    ) -> Result<Self, BodyError> {
        let mut cfg = Self {
            blend_radius,
            sharpness,
            region_margin: default_margin(),
            bones,
            parents: Vec::new(),
        };
        cfg.resolve()?;
        Ok(cfg)
    }

    pub fn with_sharpness(mut self, sharpness: f64) -> Result<Self, BodyError> {
        self.sharpness = sharpness;
        self.resolve()?;
        Ok(self)
    }

    fn resolve(&mut self) -> Result<(), BodyError> {
        let invalid = |m: String| Err(BodyError::InvalidSkeleton(m));
        if self.bones.is_empty() {
            return invalid("skeleton has no bones".into());
        }
        if !(self.sharpness > 0.0 && self.sharpness.is_finite()) {
            return invalid(format!("sharpness must be > 0, got {}", self.sharpness));
        }
        if !(self.blend_radius >= 0.0 && self.blend_radius.is_finite()) {
            return invalid(format!("blend radius must be >= 0, got {}", self.blend_radius));
        }
        if !(self.region_margin >= 0.0) {
            return invalid("region margin must be >= 0".into());
        }
        let mut parents = Vec::with_capacity(self.bones.len());
        for (i, bone) in self.bones.iter().enumerate() {
            if !(bone.radius > 0.0 && bone.radius.is_finite()) {
                return invalid(format!("bone `{}` has non-positive radius", bone.name));
            }
            let finite = bone
                .pivot
                .iter()
                .chain(bone.endpoints.iter().flatten())
                .all(|v| v.is_finite());
            if !finite {
                return invalid(format!("bone `{}` has non-finite coordinates", bone.name));
            }
            if self.bones[..i].iter().any(|b| b.name == bone.name) {
                return invalid(format!("duplicate bone `{}`", bone.name));
            }
            let parent = match (&bone.parent, i) {
                (None, 0) => None,
                (None, _) => return invalid(format!("bone `{}` has no parent", bone.name)),
                (Some(p), 0) => return invalid(format!("root bone has parent `{p}`")),
                (Some(p), _) => match self.bones[..i].iter().position(|b| &b.name == p) {
                    Some(j) => Some(j),
                    None => {
                        return invalid(format!(
                            "parent `{p}` of `{}` must be declared before it",
                            bone.name
                        ))
                    }
                },
            };
            parents.push(parent);
        }
        self.parents = parents;
        Ok(())
    }

    pub fn joint_count(&self) -> usize {
        self.bones.len()
    }

    pub fn parent(&self, bone: usize) -> Option<usize> {
        self.parents[bone]
    }

    pub fn bone_index(&self, name: &str) -> Option<usize> {
        self.bones.iter().position(|b| b.name == name)
    }

    /// Bones assigned to a region (`FullBody` selects every bone).
    pub fn region_bones(&self, region: Region) -> Vec<usize> {
        (0..self.bones.len())
            .filter(|&i| region == Region::FullBody || self.bones[i].region == region)
            .collect()
    }
}

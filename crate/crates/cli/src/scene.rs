//! Scene files: named shapes, optional bodies, contact and solver settings.

use std::collections::HashMap;
use std::path::Path;

use idcol::detector::{ContactPair, SolverConfig};
use idcol::se3::{Pose, PoseDescription};
use idcol::shapes::{ShapeDescription, ShapeModel};
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{0}")]
    Parse(String),
    #[error("invalid scene: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Serialize)]
pub struct NamedShape {
    pub name: String,
    #[serde(flatten)]
    pub shape: ShapeDescription,
}

// serde cannot combine `flatten` with `deny_unknown_fields`, so the key
// check is done by hand.
impl<'de> Deserialize<'de> for NamedShape {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        const KEYS: [&str; 6] = ["name", "kind", "params", "beta", "n", "eps"];
        let mut map = serde_json::Map::deserialize(d)?;
        if let Some(key) = map.keys().find(|k| !KEYS.contains(&k.as_str())) {
            return Err(D::Error::unknown_field(key, &KEYS));
        }
        let name = match map.remove("name") {
            Some(serde_json::Value::String(s)) => s,
            Some(_) => return Err(D::Error::custom("shape `name` must be a string")),
            None => return Err(D::Error::missing_field("name")),
        };
        let shape = ShapeDescription::deserialize(serde_json::Value::Object(map))
            .map_err(|e| D::Error::custom(format!("shape `{name}`: {e}")))?;
        Ok(Self { name, shape })
    }
}

/// Body twist: linear velocity in the world frame, angular velocity in the
/// body frame.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Velocity {
    #[serde(default)]
    pub linear: [f64; 3],
    #[serde(default)]
    pub angular: [f64; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BodySpec {
    pub name: String,
    pub shape: String,
    #[serde(default = "identity_pose")]
    pub pose: PoseDescription,
    #[serde(default = "unit")]
    pub mass: f64,
    /// Principal moments in the body frame. Defaults to a solid sphere of
    /// the mean bounding radius.
    #[serde(default)]
    pub inertia: Option<[f64; 3]>,
    #[serde(default)]
    pub velocity: Velocity,
}

fn identity_pose() -> PoseDescription {
    PoseDescription::from(&Pose::identity())
}

fn unit() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContactParams {
    #[serde(default = "default_k")]
    pub k: f64,
    #[serde(default = "default_p")]
    pub p: f64,
}

fn default_k() -> f64 {
    1e4
}

fn default_p() -> f64 {
    1.5
}

impl Default for ContactParams {
    fn default() -> Self {
        Self {
            k: default_k(),
            p: default_p(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneFile {
    pub shapes: Vec<NamedShape>,
    #[serde(default)]
    pub bodies: Vec<BodySpec>,
    #[serde(default)]
    pub contact: ContactParams,
    #[serde(default)]
    pub solver: SolverConfig,
}

/// A validated scene with shapes built.
#[derive(Debug, Clone)]
pub struct Scene {
    pub file: SceneFile,
    shapes: HashMap<String, ShapeModel>,
}

/// Parses JSON text, reporting line and column on failure.
pub fn parse_json<T: serde::de::DeserializeOwned>(text: &str, origin: &str) -> Result<T, SceneError> {
    serde_json::from_str(text).map_err(|e| {
        SceneError::Parse(format!(
            "{origin}: line {} column {}: {e}",
            e.line(),
            e.column()
        ))
    })
}

pub fn read_text(path: &Path) -> Result<String, SceneError> {
    std::fs::read_to_string(path).map_err(|source| SceneError::Io {
        path: path.display().to_string(),
        source,
    })
}

impl Scene {
    pub fn load(path: &Path) -> Result<Self, SceneError> {
        let text = read_text(path)?;
        Self::from_file(parse_json(&text, &path.display().to_string())?)
    }

    pub fn from_file(file: SceneFile) -> Result<Self, SceneError> {
        let mut shapes = HashMap::new();
        for s in &file.shapes {
            let model = ShapeModel::try_from(&s.shape)
                .map_err(|e| SceneError::Invalid(format!("shape `{}`: {e}", s.name)))?;
            if shapes.insert(s.name.clone(), model).is_some() {
                return Err(SceneError::Invalid(format!("duplicate shape name `{}`", s.name)));
            }
        }
        let mut seen = std::collections::HashSet::new();
        for b in &file.bodies {
            if !seen.insert(b.name.as_str()) {
                return Err(SceneError::Invalid(format!("duplicate body name `{}`", b.name)));
            }
            if !shapes.contains_key(&b.shape) {
                return Err(SceneError::Invalid(format!(
                    "body `{}` references unknown shape `{}`",
                    b.name, b.shape
                )));
            }
            if !(b.mass > 0.0) {
                return Err(SceneError::Invalid(format!("body `{}` needs a positive mass", b.name)));
            }
            Pose::try_from(&b.pose).map_err(|e| SceneError::Invalid(format!("body `{}`: {e}", b.name)))?;
        }
        file.solver
            .validate()
            .map_err(|e| SceneError::Invalid(e.to_string()))?;
        Ok(Self { file, shapes })
    }

    pub fn shape(&self, name: &str) -> Option<&ShapeModel> {
        self.shapes.get(name)
    }

    pub fn body(&self, name: &str) -> Option<&BodySpec> {
        self.file.bodies.iter().find(|b| b.name == name)
    }

    pub fn body_pose(&self, body: &BodySpec) -> Pose {
        Pose::try_from(&body.pose).expect("validated on load")
    }

    /// Shape of a body, or a shape by its own name.
    pub fn resolve_shape(&self, name: &str) -> Result<&ShapeModel, SceneError> {
        self.body(name)
            .and_then(|b| self.shape(&b.shape))
            .or_else(|| self.shape(name))
            .ok_or_else(|| SceneError::Invalid(format!("no body or shape named `{name}`")))
    }

    pub fn pair(&self, a: &str, b: &str) -> Result<ContactPair, SceneError> {
        let s1 = self.resolve_shape(a)?.clone();
        let s2 = self.resolve_shape(b)?.clone();
        ContactPair::new(s1, s2).map_err(|e| SceneError::Invalid(e.to_string()))
    }

    /// Pose of body `b` in the frame of body `a`.
    pub fn relative_pose(&self, a: &str, b: &str) -> Result<Pose, SceneError> {
        let find = |n: &str| {
            self.body(n).ok_or_else(|| {
                SceneError::Invalid(format!("`{n}` is not a body; pass --pose for shape pairs"))
            })
        };
        let ga = self.body_pose(find(a)?);
        let gb = self.body_pose(find(b)?);
        Ok(ga.inverse().compose(&gb))
    }
}

/// Parses `A,B`.
pub fn split_pair(spec: &str) -> Result<(String, String), SceneError> {
    match spec.split_once(',') {
        Some((a, b)) if !a.trim().is_empty() && !b.trim().is_empty() => {
            Ok((a.trim().to_string(), b.trim().to_string()))
        }
        _ => Err(SceneError::Parse(format!("--pair expects `A,B`, got `{spec}`"))),
    }
}

pub fn body_inertia(body: &BodySpec, mean_radius: f64) -> Matrix3<f64> {
    let d = body
        .inertia
        .map(Vector3::from)
        .unwrap_or_else(|| Vector3::repeat(0.4 * body.mass * mean_radius * mean_radius));
    Matrix3::from_diagonal(&d)
}

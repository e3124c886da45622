//! JSON run configuration.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assembly::ParallelManipulator;
use crate::chain::{ChainElement, ChainModel, ElasticJoint, JointAxis, JointType};
use crate::compensator::{Scheme, SchemeConfig};
use crate::load::MillingLoad;
use crate::se3::{Pose, Twist};
use crate::trajectory::{CircleSpec, Trajectory};

pub const SCHEMA_VERSION: u32 = 1;

/// The bundled desk-scale three-chain surrogate manipulator.
pub const ORTHO3_JSON: &str = include_str!("../data/ortho3.json");

/// Groove milling of a 50 mm radius circle with the bundled surrogate.
pub const DEMO_JSON: &str = r#"{
  "schema_version": 1,
  "manipulator": "builtin:ortho3",
  "load": {"F_r_N": 215.0, "F_t_N": -10.0, "F_z_N": -25.0, "tool_length_m": 0.1, "tool_axis": [0.0, 0.0, -1.0]},
  "trajectory": {"kind": "circle", "center_m": [0.0, 0.0, 0.0], "radius_m": 0.05, "normal": [0.0, 0.0, 1.0], "points": 360},
  "scheme": {"scheme": "free", "alpha": 0.5, "tol_m": 1e-9, "max_iter": 50},
  "output": {"dir": "demo_out"}
}"#;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed configuration: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("bad configuration: {0}")]
    BadConfig(String),
}

fn bad(msg: impl Into<String>) -> ConfigError {
    ConfigError::BadConfig(msg.into())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseDoc {
    #[serde(default)]
    pub position_m: [f64; 3],
    #[serde(default)]
    pub rotation_vector_rad: [f64; 3],
}

impl PoseDoc {
    fn to_pose(&self, what: &str) -> Result<Pose, ConfigError> {
        Pose::new(self.position_m.into(), self.rotation_vector_rad.into())
            .map_err(|e| bad(format!("{what}: {e}")))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AxisDoc {
    pub joint: JointType,
    pub axis: [f64; 3],
}

impl AxisDoc {
    fn to_axis(&self, what: &str) -> Result<JointAxis, ConfigError> {
        let a = Vector3::from(self.axis);
        if (a.norm() - 1.0).abs() > 1e-12 {
            return Err(bad(format!("{what}: axis {:?} is not a unit vector", self.axis)));
        }
        Ok(JointAxis { axis: a, joint: self.joint })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ElementDoc {
    Rigid {
        #[serde(default)]
        position_m: [f64; 3],
        #[serde(default)]
        rotation_vector_rad: [f64; 3],
    },
    /// Stroke in m for prismatic joints, rad for revolute ones.
    Actuated {
        joint: JointType,
        axis: [f64; 3],
        #[serde(default)]
        stroke: Option<[f64; 2]>,
    },
    Passive {
        joint: JointType,
        axis: [f64; 3],
    },
    /// Six-dof spring (translations then rotations about x, y, z) with a
    /// diagonal stiffness.
    Spring6 {
        translational_n_per_m: [f64; 3],
        rotational_nm_per_rad: [f64; 3],
    },
    /// General spring over the listed elementary joints; stiffness in SI
    /// units matching each joint.
    Spring {
        dofs: Vec<AxisDoc>,
        stiffness: Vec<Vec<f64>>,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainDoc {
    #[serde(default)]
    pub name: Option<String>,
    pub elements: Vec<ElementDoc>,
    #[serde(default = "identity_pose")]
    pub end_offset: PoseDoc,
}

fn identity_pose() -> PoseDoc {
    PoseDoc {
        position_m: [0.0; 3],
        rotation_vector_rad: [0.0; 3],
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TwistDoc {
    #[serde(default)]
    pub dp_m: [f64; 3],
    #[serde(default)]
    pub dphi_rad: [f64; 3],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ErrorsDoc {
    /// Rotation of each chain's first actuator mounting about its axis.
    ActuatorMountingDeg(f64),
    /// Explicit base-frame error twists, one per chain.
    Twists(Vec<TwistDoc>),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManipulatorDoc {
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default = "identity_pose")]
    pub platform_frame: PoseDoc,
    pub chains: Vec<ChainDoc>,
    #[serde(default)]
    pub errors: Option<ErrorsDoc>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ManipulatorRef {
    /// Path to a manipulator file, relative to the configuration file.
    /// `builtin:ortho3` selects the bundled surrogate.
    Path(String),
    Inline(Box<ManipulatorDoc>),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadDoc {
    #[serde(rename = "F_r_N")]
    pub f_r_n: f64,
    #[serde(rename = "F_t_N")]
    pub f_t_n: f64,
    #[serde(rename = "F_z_N")]
    pub f_z_n: f64,
    pub tool_length_m: f64,
    #[serde(default = "minus_z")]
    pub tool_axis: [f64; 3],
    #[serde(default)]
    pub clockwise: bool,
}

fn minus_z() -> [f64; 3] {
    [0.0, 0.0, -1.0]
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TrajectoryDoc {
    Circle {
        center_m: [f64; 3],
        radius_m: f64,
        #[serde(default = "plus_z")]
        normal: [f64; 3],
        points: usize,
        #[serde(default)]
        rotation_vector_rad: [f64; 3],
        #[serde(default)]
        start_angle_rad: f64,
    },
    Polyline {
        poses: Vec<PoseDoc>,
    },
}

fn plus_z() -> [f64; 3] {
    [0.0, 0.0, 1.0]
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemeDoc {
    #[serde(default = "default_scheme")]
    pub scheme: String,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_tol")]
    pub tol_m: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
}

fn default_scheme() -> String {
    "free".into()
}
fn default_alpha() -> f64 {
    0.5
}
fn default_tol() -> f64 {
    1e-9
}
fn default_max_iter() -> usize {
    50
}

impl Default for SchemeDoc {
    fn default() -> Self {
        Self {
            scheme: default_scheme(),
            alpha: default_alpha(),
            tol_m: default_tol(),
            max_iter: default_max_iter(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputDoc {
    #[serde(default = "default_dir")]
    pub dir: String,
    #[serde(default = "default_csv")]
    pub csv: String,
    #[serde(default = "default_summary")]
    pub summary: String,
    #[serde(default = "yes")]
    pub curves: bool,
}

fn default_dir() -> String {
    "out".into()
}
fn default_csv() -> String {
    "sweep.csv".into()
}
fn default_summary() -> String {
    "summary.json".into()
}
fn yes() -> bool {
    true
}

impl Default for OutputDoc {
    fn default() -> Self {
        Self {
            dir: default_dir(),
            csv: default_csv(),
            summary: default_summary(),
            curves: true,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigDoc {
    pub schema_version: u32,
    pub manipulator: ManipulatorRef,
    pub load: LoadDoc,
    pub trajectory: TrajectoryDoc,
    #[serde(default)]
    pub scheme: SchemeDoc,
    #[serde(default)]
    pub output: OutputDoc,
}

#[derive(Clone, Debug)]
pub struct OutputSpec {
    pub dir: PathBuf,
    pub csv: String,
    pub summary: String,
    pub curves: bool,
}

/// Validated run configuration.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub manipulator: ParallelManipulator,
    pub load: MillingLoad,
    pub trajectory: Trajectory,
    pub scheme: SchemeConfig,
    pub output: OutputSpec,
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::from_json(&text, base)
    }

    /// Parses `text`; relative paths resolve against `base`.
    pub fn from_json(text: &str, base: &Path) -> Result<Self, ConfigError> {
        let doc: RunConfigDoc = serde_json::from_str(text)?;
        Self::from_doc(&doc, base)
    }

    pub fn from_doc(doc: &RunConfigDoc, base: &Path) -> Result<Self, ConfigError> {
        if doc.schema_version != SCHEMA_VERSION {
            return Err(bad(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                doc.schema_version
            )));
        }
        let manipulator = match &doc.manipulator {
            ManipulatorRef::Inline(m) => build_manipulator(m)?,
            ManipulatorRef::Path(p) => load_manipulator(p, base)?,
        };
        let l = &doc.load;
        let load = MillingLoad::new(l.f_r_n, l.f_t_n, l.f_z_n, l.tool_length_m, l.tool_axis.into())
            .map_err(|e| bad(format!("load: {e}")))?
            .clockwise(l.clockwise);
        let trajectory = match &doc.trajectory {
            TrajectoryDoc::Circle {
                center_m,
                radius_m,
                normal,
                points,
                rotation_vector_rad,
                start_angle_rad,
            } => {
                let spec = CircleSpec {
                    center: (*center_m).into(),
                    radius: *radius_m,
                    normal: (*normal).into(),
                    points: *points,
                    orientation: (*rotation_vector_rad).into(),
                    start_angle: *start_angle_rad,
                };
                spec.validate()?;
                Trajectory::Circle(spec)
            }
            TrajectoryDoc::Polyline { poses } => {
                if poses.len() < 2 {
                    return Err(bad("polyline needs at least 2 poses"));
                }
                let poses = poses
                    .iter()
                    .enumerate()
                    .map(|(i, p)| p.to_pose(&format!("polyline pose {i}")))
                    .collect::<Result<Vec<_>, _>>()?;
                Trajectory::Polyline(poses)
            }
        };
        let s = &doc.scheme;
        let scheme_kind: Scheme = s.scheme.parse().map_err(bad)?;
        let scheme = SchemeConfig::new(scheme_kind, s.alpha, s.tol_m, s.max_iter).map_err(|e| bad(e.to_string()))?;
        let output = OutputSpec {
            dir: base.join(&doc.output.dir),
            csv: doc.output.csv.clone(),
            summary: doc.output.summary.clone(),
            curves: doc.output.curves,
        };
        Ok(Self {
            manipulator,
            load,
            trajectory,
            scheme,
            output,
        })
    }
}

fn load_manipulator(path: &str, base: &Path) -> Result<ParallelManipulator, ConfigError> {
    let text = if path == "builtin:ortho3" {
        ORTHO3_JSON.to_string()
    } else {
        let full = base.join(path);
        std::fs::read_to_string(&full).map_err(|source| ConfigError::Io { path: full, source })?
    };
    let doc: ManipulatorDoc = serde_json::from_str(&text)?;
    build_manipulator(&doc)
}

/// The demo run; output goes under `base`.
pub fn demo_config(base: &Path) -> RunConfig {
    RunConfig::from_json(DEMO_JSON, base).expect("bundled demo configuration is valid")
}

/// The bundled surrogate, including its actuator mounting errors.
pub fn ortho3() -> ParallelManipulator {
    let doc: ManipulatorDoc = serde_json::from_str(ORTHO3_JSON).expect("bundled manipulator parses");
    build_manipulator(&doc).expect("bundled manipulator is valid")
}

pub fn build_manipulator(doc: &ManipulatorDoc) -> Result<ParallelManipulator, ConfigError> {
    let chains = doc
        .chains
        .iter()
        .enumerate()
        .map(|(i, c)| build_chain(c).map_err(|e| bad(format!("chain {i}: {e}"))))
        .collect::<Result<Vec<_>, _>>()?;
    let frame = doc.platform_frame.to_pose("platform_frame")?;
    let manip = ParallelManipulator::new(chains, frame).map_err(|e| bad(e.to_string()))?;
    match &doc.errors {
        None => Ok(manip),
        Some(ErrorsDoc::ActuatorMountingDeg(deg)) => manip
            .with_actuator_mounting_errors(deg.to_radians())
            .map_err(|e| bad(e.to_string())),
        Some(ErrorsDoc::Twists(ts)) => manip
            .with_chain_errors(ts.iter().map(|t| Twist::new(t.dp_m.into(), t.dphi_rad.into())).collect())
            .map_err(|e| bad(e.to_string())),
    }
}

fn build_chain(doc: &ChainDoc) -> Result<ChainModel, String> {
    let mut elements = Vec::with_capacity(doc.elements.len());
    for (j, e) in doc.elements.iter().enumerate() {
        let what = format!("element {j}");
        let el = match e {
            ElementDoc::Rigid {
                position_m,
                rotation_vector_rad,
            } => ChainElement::Rigid(
                Pose::new((*position_m).into(), (*rotation_vector_rad).into()).map_err(|e| format!("{what}: {e}"))?,
            ),
            ElementDoc::Actuated { joint, axis, stroke } => ChainElement::Actuated {
                axis: AxisDoc { joint: *joint, axis: *axis }.to_axis(&what).map_err(|e| e.to_string())?,
                stroke: stroke.map(|[lo, hi]| (lo, hi)),
            },
            ElementDoc::Passive { joint, axis } => {
                ChainElement::Passive(AxisDoc { joint: *joint, axis: *axis }.to_axis(&what).map_err(|e| e.to_string())?)
            }
            ElementDoc::Spring6 {
                translational_n_per_m,
                rotational_nm_per_rad,
            } => ChainElement::Elastic(
                ElasticJoint::six_dof(*translational_n_per_m, *rotational_nm_per_rad).map_err(|e| format!("{what}: {e}"))?,
            ),
            ElementDoc::Spring { dofs, stiffness } => {
                let axes = dofs
                    .iter()
                    .map(|d| d.to_axis(&what).map_err(|e| e.to_string()))
                    .collect::<Result<Vec<_>, _>>()?;
                let n = stiffness.len();
                if stiffness.iter().any(|r| r.len() != n) {
                    return Err(format!("{what}: stiffness must be square"));
                }
                let k = DMatrix::from_fn(n, n, |r, c| stiffness[r][c]);
                ChainElement::Elastic(ElasticJoint::new(axes, k).map_err(|e| format!("{what}: {e}"))?)
            }
        };
        elements.push(el);
    }
    let end = doc.end_offset.to_pose("end_offset").map_err(|e| e.to_string())?;
    ChainModel::new(elements, end).map_err(|e| e.to_string())
}

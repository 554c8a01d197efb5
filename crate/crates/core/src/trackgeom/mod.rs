//! Race-track representation: gates, centerline with arc-length progress,
//! moving frames, tunnel width profile and halfspaces, and gate-pass /
//! collision detection.

mod centerline;
mod frame;

pub use centerline::{Centerline, ProjectionDiverged};
pub use frame::FrenetFrame;

use frame::FrameField;
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrackError {
    #[error("a track needs at least 2 gates, got {0}")]
    TooFewGates(usize),
    #[error("consecutive gate centers coincide at gate {0}")]
    DegenerateTrack(usize),
    #[error("gate {index}: {reason}")]
    BadGate { index: usize, reason: String },
    #[error("unsupported track format {0}, expected 1")]
    UnsupportedFormat(u32),
    #[error("invalid tunnel profile: {0}")]
    BadProfile(String),
    #[error("track file parse error: {0}")]
    Parse(#[from] serde_json::Error),
}

/// A race gate: a rectangular opening in a plane.
#[derive(Clone, Debug)]
pub struct Gate {
    pub center: Vector3<f64>,
    /// Unit flight direction through the gate.
    pub normal: Vector3<f64>,
    /// Unit vector spanning the opening's vertical axis, perpendicular to
    /// `normal`.
    pub up: Vector3<f64>,
    pub inner_half_width: f64,
    pub inner_half_height: f64,
}

impl Gate {
    /// In-plane horizontal axis of the opening.
    pub fn side(&self) -> Vector3<f64> {
        self.normal.cross(&self.up)
    }
}

/// Tunnel cross-section half-width profile parameters. Width and height are
/// equal everywhere.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TunnelProfile {
    /// Nominal half-width away from gates [m].
    pub w_nominal: f64,
    /// Half-width at the gates [m].
    pub w_gate: f64,
    /// Sigmoid slope [1/m].
    pub steepness: f64,
    /// Arc distance over which the narrowing occurs [m].
    pub gate_window: f64,
}

impl Default for TunnelProfile {
    fn default() -> Self {
        Self {
            w_nominal: 2.2,
            w_gate: 0.55,
            steepness: 6.0,
            gate_window: 1.5,
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Tunnel half-width and half-height at progress θ.
pub fn width_at(profile: &TunnelProfile, cl: &Centerline, theta: f64) -> (f64, f64) {
    let w = width_with_derivative(profile, cl, theta).0;
    (w, w)
}

/// Half-width and its θ-derivative.
///
/// Sigmoid blend between the gate and nominal widths, rescaled so the width
/// at a gate is exactly `w_gate` (the raw sigmoid would leave a tail of
/// (w_n − w_gate)·σ(−steepness·gate_window) there, which would poke the
/// tunnel cross-section out of the gate opening).
pub fn width_with_derivative(profile: &TunnelProfile, cl: &Centerline, theta: f64) -> (f64, f64) {
    let d = cl.gate_distance(theta);
    let x = profile.steepness * (d - profile.gate_window);
    let s0 = sigmoid(-profile.steepness * profile.gate_window);
    let s = sigmoid(x);
    let span = (profile.w_nominal - profile.w_gate) / (1.0 - s0);
    let w = profile.w_gate + span * (s - s0);
    let dw = span * s * (1.0 - s) * profile.steepness * cl.gate_distance_slope(theta);
    (w, dw)
}

/// Tunnel cross-section at a progress value: four halfspaces h_j(p) ≥ 0.
#[derive(Clone, Copy, Debug)]
pub struct TunnelSection {
    pub theta: f64,
    pub center: Vector3<f64>,
    pub frame: FrenetFrame,
    pub half_width: f64,
    pub half_height: f64,
}

impl TunnelSection {
    /// Values of the four halfspace functions at `p`:
    /// [W − d·n, W + d·n, H − d·b, H + d·b] with d = p_d(θ) − p.
    pub fn halfspace_values(&self, p: &Vector3<f64>) -> [f64; 4] {
        let d = self.center - p;
        let dn = d.dot(&self.frame.normal);
        let db = d.dot(&self.frame.binormal);
        [
            self.half_width - dn,
            self.half_width + dn,
            self.half_height - db,
            self.half_height + db,
        ]
    }

    /// The halfspaces as affine functions h_j(p) = a_j · p + c_j.
    pub fn halfspaces(&self) -> [(Vector3<f64>, f64); 4] {
        let n = self.frame.normal;
        let b = self.frame.binormal;
        [
            (n, self.half_width - n.dot(&self.center)),
            (-n, self.half_width + n.dot(&self.center)),
            (b, self.half_height - b.dot(&self.center)),
            (-b, self.half_height + b.dot(&self.center)),
        ]
    }

    /// Largest constraint violation at `p` (0 when inside).
    pub fn max_violation(&self, p: &Vector3<f64>) -> f64 {
        self.halfspace_values(p)
            .iter()
            .fold(0.0f64, |acc, h| acc.max(-h))
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        self.halfspace_values(p).iter().all(|h| *h >= 0.0)
    }
}

/// Build the tunnel cross-section constraints at θ.
pub fn tunnel_halfspaces(cl: &Centerline, profile: &TunnelProfile, theta: f64) -> TunnelSection {
    let th = cl.wrap(theta);
    let (w, h) = width_at(profile, cl, th);
    TunnelSection {
        theta: th,
        center: cl.position(th),
        frame: cl.frame_at(th),
        half_width: w,
        half_height: h,
    }
}

// ---------------------------------------------------------------------------
// Gate events
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateEventKind {
    Pass,
    Collision,
}

#[derive(Clone, Copy, Debug)]
pub struct GateEvent {
    pub gate: usize,
    pub kind: GateEventKind,
    /// Fraction along the motion segment where the plane was crossed.
    pub lambda: f64,
}

/// Detect gate plane crossings on the motion segment prev → cur.
///
/// A forward crossing inside the opening shrunk by the drone radius is a
/// PASS; a crossing (either direction) within the frame band — the opening
/// inflated by the frame thickness but outside the shrunk opening — is a
/// COLLISION. Ordered gate progression is the caller's concern.
pub fn detect_gate_events(
    prev: &Vector3<f64>,
    cur: &Vector3<f64>,
    gates: &[Gate],
    frame_thickness: f64,
    drone_radius: f64,
) -> Vec<GateEvent> {
    let mut events = Vec::new();
    for (gi, gate) in gates.iter().enumerate() {
        let s0 = (prev - gate.center).dot(&gate.normal);
        let s1 = (cur - gate.center).dot(&gate.normal);
        if s0 == s1 || s0.signum() == s1.signum() && s0 != 0.0 && s1 != 0.0 {
            continue;
        }
        let lambda = s0 / (s0 - s1);
        if !(0.0..=1.0).contains(&lambda) {
            continue;
        }
        let x = prev + lambda * (cur - prev);
        let y = (x - gate.center).dot(&gate.side()).abs();
        let z = (x - gate.center).dot(&gate.up).abs();
        let inside_safe =
            y <= gate.inner_half_width - drone_radius && z <= gate.inner_half_height - drone_radius;
        let inside_band = y <= gate.inner_half_width + frame_thickness
            && z <= gate.inner_half_height + frame_thickness;
        let forward = s0 < 0.0 && s1 >= 0.0;
        if inside_safe && forward {
            events.push(GateEvent {
                gate: gi,
                kind: GateEventKind::Pass,
                lambda,
            });
        } else if inside_band && !inside_safe {
            events.push(GateEvent {
                gate: gi,
                kind: GateEventKind::Collision,
                lambda,
            });
        }
    }
    events.sort_by(|a, b| a.lambda.partial_cmp(&b.lambda).unwrap());
    events
}

// ---------------------------------------------------------------------------
// Track file
// ---------------------------------------------------------------------------

fn default_half_extent() -> f64 {
    0.75
}
fn default_frame_thickness() -> f64 {
    0.15
}
fn default_drone_radius() -> f64 {
    0.15
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GateSpec {
    pub center: [f64; 3],
    pub normal: [f64; 3],
    #[serde(default)]
    pub up: Option<[f64; 3]>,
    #[serde(default = "default_half_extent")]
    pub inner_half_width: f64,
    #[serde(default = "default_half_extent")]
    pub inner_half_height: f64,
}

/// Versioned on-disk track description.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrackSpec {
    pub format: u32,
    #[serde(default)]
    pub name: Option<String>,
    pub closed: bool,
    pub gates: Vec<GateSpec>,
    #[serde(default)]
    pub tunnel: TunnelProfile,
    #[serde(default = "default_frame_thickness")]
    pub frame_thickness: f64,
    #[serde(default = "default_drone_radius")]
    pub drone_radius: f64,
}

impl TrackSpec {
    pub fn from_json(s: &str) -> Result<Self, TrackError> {
        Ok(serde_json::from_str(s)?)
    }
}

/// A validated, ready-to-query track.
#[derive(Clone, Debug)]
pub struct Track {
    pub name: String,
    pub gates: Vec<Gate>,
    pub centerline: Centerline,
    pub tunnel: TunnelProfile,
    pub frame_thickness: f64,
    pub drone_radius: f64,
}

impl Track {
    pub fn from_spec(spec: &TrackSpec) -> Result<Self, TrackError> {
        if spec.format != 1 {
            return Err(TrackError::UnsupportedFormat(spec.format));
        }
        if spec.tunnel.w_gate <= 0.0 || spec.tunnel.w_gate > spec.tunnel.w_nominal {
            return Err(TrackError::BadProfile(format!(
                "need 0 < w_gate <= w_nominal, got {} and {}",
                spec.tunnel.w_gate, spec.tunnel.w_nominal
            )));
        }
        let mut gates = Vec::with_capacity(spec.gates.len());
        for (index, g) in spec.gates.iter().enumerate() {
            let center = Vector3::from(g.center);
            let normal = Vector3::from(g.normal);
            if normal.norm() < 1e-9 {
                return Err(TrackError::BadGate {
                    index,
                    reason: "zero normal".into(),
                });
            }
            let normal = normal.normalize();
            let up = match g.up {
                Some(u) => {
                    let u = Vector3::from(u);
                    let proj = u - u.dot(&normal) * normal;
                    if proj.norm() < 1e-9 {
                        return Err(TrackError::BadGate {
                            index,
                            reason: "up vector parallel to normal".into(),
                        });
                    }
                    proj.normalize()
                }
                None => {
                    let proj = Vector3::z() - normal.z * normal;
                    if proj.norm() < 1e-9 {
                        return Err(TrackError::BadGate {
                            index,
                            reason: "vertical normal needs an explicit up vector".into(),
                        });
                    }
                    proj.normalize()
                }
            };
            if g.inner_half_width <= 0.0 || g.inner_half_height <= 0.0 {
                return Err(TrackError::BadGate {
                    index,
                    reason: "half extents must be positive".into(),
                });
            }
            gates.push(Gate {
                center,
                normal,
                up,
                inner_half_width: g.inner_half_width,
                inner_half_height: g.inner_half_height,
            });
        }
        let centerline = Centerline::build(&gates, spec.closed)?;
        Ok(Self {
            name: spec.name.clone().unwrap_or_else(|| "track".into()),
            gates,
            centerline,
            tunnel: spec.tunnel.clone(),
            frame_thickness: spec.frame_thickness,
            drone_radius: spec.drone_radius,
        })
    }

    pub fn from_json(s: &str) -> Result<Self, TrackError> {
        Self::from_spec(&TrackSpec::from_json(s)?)
    }

    /// The Split-S fixture: 7 gates including the vertically stacked pair.
    pub fn split_s() -> Self {
        Self::from_json(include_str!("../../fixtures/split_s.json")).expect("fixture is valid")
    }

    pub fn section_at(&self, theta: f64) -> TunnelSection {
        tunnel_halfspaces(&self.centerline, &self.tunnel, theta)
    }

    pub fn width_at(&self, theta: f64) -> (f64, f64) {
        width_at(&self.tunnel, &self.centerline, theta)
    }

    pub fn events(&self, prev: &Vector3<f64>, cur: &Vector3<f64>) -> Vec<GateEvent> {
        detect_gate_events(prev, cur, &self.gates, self.frame_thickness, self.drone_radius)
    }
}

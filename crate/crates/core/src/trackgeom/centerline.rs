//! Piecewise cubic Hermite centerline through the gate centers, arc-length
//! parameterized. The progress coordinate θ is arc length in meters.

use nalgebra::Vector3;

use super::{FrameField, FrenetFrame, Gate, TrackError};

/// One cubic segment p(s) = a + b s + c s² + d s³, s ∈ [0, 1].
#[derive(Clone, Debug)]
struct Segment {
    a: Vector3<f64>,
    b: Vector3<f64>,
    c: Vector3<f64>,
    d: Vector3<f64>,
    /// Cumulative arc length at uniform s-knots (arc[0] = 0).
    arc: Vec<f64>,
}

impl Segment {
    fn hermite(p0: &Vector3<f64>, m0: &Vector3<f64>, p1: &Vector3<f64>, m1: &Vector3<f64>) -> Self {
        Self {
            a: *p0,
            b: *m0,
            c: -3.0 * p0 - 2.0 * m0 + 3.0 * p1 - m1,
            d: 2.0 * p0 + m0 - 2.0 * p1 + m1,
            arc: Vec::new(),
        }
    }

    fn pos(&self, s: f64) -> Vector3<f64> {
        self.a + s * (self.b + s * (self.c + s * self.d))
    }

    fn d1(&self, s: f64) -> Vector3<f64> {
        self.b + s * (2.0 * self.c + 3.0 * s * self.d)
    }

    fn d2(&self, s: f64) -> Vector3<f64> {
        2.0 * self.c + 6.0 * s * self.d
    }

    fn speed(&self, s: f64) -> f64 {
        self.d1(s).norm()
    }

    /// Arc length of [s0, s1] by 3-point Gauss–Legendre (sub-interval small).
    fn arc_gauss(&self, s0: f64, s1: f64) -> f64 {
        const X: [f64; 3] = [-0.774596669241483, 0.0, 0.774596669241483];
        const W: [f64; 3] = [5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0];
        let half = 0.5 * (s1 - s0);
        let mid = 0.5 * (s0 + s1);
        half * X
            .iter()
            .zip(W.iter())
            .map(|(x, w)| w * self.speed(mid + half * x))
            .sum::<f64>()
    }

    /// Build the cumulative arc table, doubling the panel count until the
    /// total length stabilizes.
    fn build_arc_table(&mut self) {
        let mut panels = 64;
        let mut prev_total = f64::INFINITY;
        loop {
            let mut arc = Vec::with_capacity(panels + 1);
            arc.push(0.0);
            let h = 1.0 / panels as f64;
            let mut acc = 0.0;
            for i in 0..panels {
                acc += self.arc_gauss(i as f64 * h, (i + 1) as f64 * h);
                arc.push(acc);
            }
            let total = acc;
            let done = (total - prev_total).abs() <= 1e-9 * total.max(1e-9) || panels >= 1024;
            self.arc = arc;
            if done {
                break;
            }
            prev_total = total;
            panels *= 2;
        }
    }

    fn length(&self) -> f64 {
        *self.arc.last().unwrap()
    }

    /// Invert arc length to the local parameter s.
    fn s_of_arc(&self, target: f64) -> f64 {
        let n = self.arc.len() - 1;
        let target = target.clamp(0.0, self.length());
        // Binary search the bracketing knot, then Newton on the residual.
        let idx = match self
            .arc
            .binary_search_by(|a| a.partial_cmp(&target).unwrap())
        {
            Ok(i) => return i as f64 / n as f64,
            Err(i) => i.saturating_sub(1).min(n - 1),
        };
        let s0 = idx as f64 / n as f64;
        let mut s = s0 + (target - self.arc[idx]) / self.speed(s0).max(1e-12) ;
        for _ in 0..3 {
            let g = self.arc[idx] + self.arc_gauss(s0, s) - target;
            s -= g / self.speed(s).max(1e-12);
        }
        s.clamp(0.0, 1.0)
    }
}

#[derive(Clone, Debug)]
pub struct Centerline {
    segments: Vec<Segment>,
    /// Cumulative arc length at segment starts; last entry is the total.
    seg_start: Vec<f64>,
    gate_thetas: Vec<f64>,
    total: f64,
    closed: bool,
    pub(super) frames: FrameField,
}

#[derive(Debug, thiserror::Error)]
#[error("progress projection did not converge within {0} iterations")]
pub struct ProjectionDiverged(pub usize);

impl Centerline {
    /// Hermite spline through the gate centers with tangents along the gate
    /// normals; tangent magnitudes use the mean of adjacent chord lengths.
    pub fn build(gates: &[Gate], closed: bool) -> Result<Self, TrackError> {
        if gates.len() < 2 {
            return Err(TrackError::TooFewGates(gates.len()));
        }
        let n = gates.len();
        let nseg = if closed { n } else { n - 1 };
        let mut chords = Vec::with_capacity(nseg);
        for i in 0..nseg {
            let d = (gates[(i + 1) % n].center - gates[i].center).norm();
            if d < 1e-9 {
                return Err(TrackError::DegenerateTrack(i));
            }
            chords.push(d);
        }
        let tangent_mag = |i: usize| -> f64 {
            if closed {
                0.5 * (chords[(i + n - 1) % n] + chords[i % n])
            } else if i == 0 {
                chords[0]
            } else if i == n - 1 {
                chords[n - 2]
            } else {
                0.5 * (chords[i - 1] + chords[i])
            }
        };

        let mut segments = Vec::with_capacity(nseg);
        for i in 0..nseg {
            let j = (i + 1) % n;
            // Cap the tangent magnitude per segment end: where adjacent
            // chords are much longer than this segment (the stacked-gate
            // case) the raw mean balloons the curve far out of the corridor.
            // The tangent direction stays the gate normal on both sides, so
            // the arc-length tangent remains continuous across gates.
            let cap = 2.0 * chords[i];
            let m0 = gates[i].normal * tangent_mag(i).min(cap);
            let m1 = gates[j].normal * tangent_mag(j).min(cap);
            let mut seg = Segment::hermite(&gates[i].center, &m0, &gates[j].center, &m1);
            seg.build_arc_table();
            segments.push(seg);
        }

        let mut seg_start = Vec::with_capacity(nseg + 1);
        seg_start.push(0.0);
        for seg in &segments {
            seg_start.push(seg_start.last().unwrap() + seg.length());
        }
        let total = *seg_start.last().unwrap();
        let gate_thetas = (0..n).map(|i| seg_start[i.min(nseg)]).collect();

        let mut cl = Self {
            segments,
            seg_start,
            gate_thetas,
            total,
            closed,
            frames: FrameField::empty(),
        };
        cl.frames = FrameField::build(&cl, gates);
        Ok(cl)
    }

    pub fn total_length(&self) -> f64 {
        self.total
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    /// Arc-length positions of the gates along the centerline.
    pub fn gate_thetas(&self) -> &[f64] {
        &self.gate_thetas
    }

    /// Wrap θ into [0, total) for closed tracks; clamp for open tracks.
    pub fn wrap(&self, theta: f64) -> f64 {
        if self.closed {
            theta.rem_euclid(self.total)
        } else {
            theta.clamp(0.0, self.total)
        }
    }

    /// Shortest signed wrapped difference a − b.
    pub fn wrapped_diff(&self, a: f64, b: f64) -> f64 {
        if self.closed {
            let mut d = (a - b).rem_euclid(self.total);
            if d > self.total / 2.0 {
                d -= self.total;
            }
            d
        } else {
            a - b
        }
    }

    /// Arc distance to the nearest gate.
    pub fn gate_distance(&self, theta: f64) -> f64 {
        let th = self.wrap(theta);
        self.gate_thetas
            .iter()
            .map(|g| self.wrapped_diff(th, *g).abs())
            .fold(f64::INFINITY, f64::min)
    }

    /// Signed derivative of `gate_distance` w.r.t. θ (±1, undefined only at
    /// isolated points).
    pub fn gate_distance_slope(&self, theta: f64) -> f64 {
        let th = self.wrap(theta);
        let mut best = f64::INFINITY;
        let mut slope = 1.0;
        for g in &self.gate_thetas {
            let d = self.wrapped_diff(th, *g);
            if d.abs() < best {
                best = d.abs();
                slope = if d >= 0.0 { 1.0 } else { -1.0 };
            }
        }
        slope
    }

    fn locate(&self, theta: f64) -> (usize, f64) {
        let th = self.wrap(theta);
        let nseg = self.segments.len();
        let idx = match self
            .seg_start
            .binary_search_by(|a| a.partial_cmp(&th).unwrap())
        {
            Ok(i) => i.min(nseg - 1),
            Err(i) => i - 1,
        };
        let idx = idx.min(nseg - 1);
        let s = self.segments[idx].s_of_arc(th - self.seg_start[idx]);
        (idx, s)
    }

    /// Centerline point at progress θ.
    pub fn position(&self, theta: f64) -> Vector3<f64> {
        let (i, s) = self.locate(theta);
        self.segments[i].pos(s)
    }

    /// Position, unit tangent, and curvature vector d²p/dθ² at θ.
    pub fn position_derivs(&self, theta: f64) -> (Vector3<f64>, Vector3<f64>, Vector3<f64>) {
        let (i, s) = self.locate(theta);
        let seg = &self.segments[i];
        let p = seg.pos(s);
        let d1 = seg.d1(s);
        let d2 = seg.d2(s);
        let n2 = d1.norm_squared();
        let t = d1 / n2.sqrt();
        let ddtheta2 = d2 / n2 - d1 * (d1.dot(&d2)) / (n2 * n2);
        (p, t, ddtheta2)
    }

    /// Unit tangent at θ.
    pub fn tangent(&self, theta: f64) -> Vector3<f64> {
        self.position_derivs(theta).1
    }

    /// Moving frame at θ.
    pub fn frame_at(&self, theta: f64) -> FrenetFrame {
        self.frames.frame(self, theta)
    }

    /// Frame and its θ-derivatives.
    pub fn frame_with_derivative(
        &self,
        theta: f64,
    ) -> (FrenetFrame, Vector3<f64>, Vector3<f64>, Vector3<f64>) {
        self.frames.frame_with_derivative(self, theta)
    }

    /// Local minimizer of |p_d(θ) − p| by damped Newton seeded at `hint`.
    pub fn project_progress(&self, p: &Vector3<f64>, hint: f64) -> Result<f64, ProjectionDiverged> {
        const MAX_ITER: usize = 20;
        let mut th = self.wrap(hint);
        for _ in 0..MAX_ITER {
            let (pd, t, ddt) = self.position_derivs(th);
            let d = pd - p;
            let g = d.dot(&t);
            let h = 1.0 + d.dot(&ddt);
            let step = if h > 1e-6 { -g / h } else { -g };
            let step = step.clamp(-1.0, 1.0);
            th = self.wrap(th + step);
            if step.abs() < 1e-10 {
                return Ok(th);
            }
        }
        // One more convergence check: accept if the gradient is tiny.
        let (pd, t, _) = self.position_derivs(th);
        if (pd - p).dot(&t).abs() < 1e-8 {
            return Ok(th);
        }
        Err(ProjectionDiverged(MAX_ITER))
    }
}

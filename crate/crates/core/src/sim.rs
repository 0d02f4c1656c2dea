//! Synthetic pick-and-place world: a 2-link planar arm with a gripper moves an
//! object into a target zone while three fixed cameras render the scene.
//!
//! Episodes are driven by scripted Cartesian waypoints timed as fractions of
//! the episode length, so the arm pose encodes task phase regardless of `T`.
//! Failure events (drop, misplace, stall) can be injected at a trigger step.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::episode::{
    Episode, EpisodeMeta, FailureKind, FailureMarker, JointObservation, MultiViewObservation,
    Proprioception, RgbImage,
};
use crate::error::{Error, Result};

pub const VIEW_SIZE: usize = 32;
pub const D_Q: usize = 3;
pub const MIN_LENGTH: usize = 10;

pub const BASE: [f64; 2] = [0.5, 0.05];
pub const LINK1: f64 = 0.45;
pub const LINK2: f64 = 0.40;
pub const HOME: [f64; 2] = [0.5, 0.6];
pub const DECOY: [f64; 2] = [0.5, 0.85];

const GRASP_RADIUS: f64 = 0.06;
const CLOSED_BELOW: f64 = 0.2;
const OPEN_ABOVE: f64 = 0.5;

/// Episode fraction over which a misplaced object is swung to the decoy.
const MISPLACE_SWERVE: f64 = 0.05;
/// Trigger points for injected failures, as fractions of the episode length.
pub const TRIGGER_GRID: [f64; 4] = [0.30, 0.35, 0.40, 0.45];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectShape {
    Square,
    Triangle,
}

impl ObjectShape {
    pub fn tag(&self) -> &'static str {
        match self {
            ObjectShape::Square => "square",
            ObjectShape::Triangle => "triangle",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "square" => Ok(ObjectShape::Square),
            "triangle" => Ok(ObjectShape::Triangle),
            other => Err(Error::invalid(format!("unknown object shape {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZoneBox {
    pub center: [f64; 2],
    pub half: f64,
}

impl ZoneBox {
    pub fn contains(&self, p: [f64; 2]) -> bool {
        (p[0] - self.center[0]).abs() <= self.half && (p[1] - self.center[1]).abs() <= self.half
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub joints: [f64; 2],
    pub gripper: f64,
    pub object: [f64; 2],
    pub target: ZoneBox,
    pub held: bool,
    pub object_shape: ObjectShape,
    pub object_size: f64,
}

impl WorldState {
    pub fn proprio(&self) -> Proprioception {
        Proprioception::new(vec![
            self.joints[0] as f32,
            self.joints[1] as f32,
            self.gripper as f32,
        ])
    }
}

/// Elbow and tip positions for the given joint angles.
pub fn forward_kinematics(joints: [f64; 2]) -> ([f64; 2], [f64; 2]) {
    let elbow = [
        BASE[0] + LINK1 * joints[0].cos(),
        BASE[1] + LINK1 * joints[0].sin(),
    ];
    let a = joints[0] + joints[1];
    let tip = [elbow[0] + LINK2 * a.cos(), elbow[1] + LINK2 * a.sin()];
    (elbow, tip)
}

/// Analytic inverse kinematics (negative elbow branch); unreachable targets are
/// projected onto the workspace boundary.
pub fn inverse_kinematics(target: [f64; 2]) -> [f64; 2] {
    let dx = target[0] - BASE[0];
    let dy = target[1] - BASE[1];
    let r2 = dx * dx + dy * dy;
    let c2 = ((r2 - LINK1 * LINK1 - LINK2 * LINK2) / (2.0 * LINK1 * LINK2)).clamp(-1.0, 1.0);
    let q2 = -c2.acos();
    let q1 = dy.atan2(dx) - (LINK2 * q2.sin()).atan2(LINK1 + LINK2 * q2.cos());
    [wrap_angle(q1), wrap_angle(q2)]
}

pub fn wrap_angle(a: f64) -> f64 {
    let mut a = (a + PI).rem_euclid(2.0 * PI) - PI;
    if a < -PI {
        a = -PI;
    }
    a
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub pos: [f64; 2],
    pub gripper: f64,
    /// Episode fraction in `[0, 1]` at which the waypoint is reached.
    pub at: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FailureEvent {
    pub kind: FailureKind,
    pub trigger: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub object_start: [f64; 2],
    pub target: ZoneBox,
    pub object_shape: ObjectShape,
    pub object_size: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptConfig {
    pub scene: Scene,
    pub waypoints: Vec<Waypoint>,
    /// Per-step joint noise standard deviation in radians.
    pub noise_scale: f64,
    #[serde(default)]
    pub failure_event: Option<FailureEvent>,
}

impl ScriptConfig {
    /// Standard pick-and-place script for a scene.
    pub fn pick_and_place(scene: Scene, noise_scale: f64) -> Self {
        let obj = scene.object_start;
        let goal = scene.target.center;
        let waypoints = vec![
            Waypoint { pos: HOME, gripper: 1.0, at: 0.0 },
            Waypoint { pos: obj, gripper: 1.0, at: 0.20 },
            Waypoint { pos: obj, gripper: 0.0, at: 0.25 },
            Waypoint { pos: goal, gripper: 0.0, at: 0.75 },
            Waypoint { pos: goal, gripper: 1.0, at: 0.80 },
            Waypoint { pos: HOME, gripper: 1.0, at: 1.0 },
        ];
        Self {
            scene,
            waypoints,
            noise_scale,
            failure_event: None,
        }
    }

    pub fn with_failure(mut self, event: FailureEvent) -> Self {
        self.failure_event = Some(event);
        self
    }

    fn validate(&self, length: usize) -> Result<()> {
        if length < MIN_LENGTH {
            return Err(Error::invalid(format!("episode length must be >= {MIN_LENGTH}")));
        }
        if self.waypoints.is_empty() {
            return Err(Error::invalid("script needs at least one waypoint"));
        }
        if self.waypoints.windows(2).any(|w| w[1].at < w[0].at) {
            return Err(Error::invalid("waypoint times must be non-decreasing"));
        }
        if let Some(ev) = self.failure_event {
            if ev.trigger >= length {
                return Err(Error::invalid("failure trigger step must be < episode length"));
            }
        }
        if !(self.noise_scale >= 0.0) {
            return Err(Error::invalid("noise scale must be >= 0"));
        }
        Ok(())
    }
}

/// Position along the waypoint path at fraction `s`, plus the
/// fraction of waypoints completed.
fn script_at(waypoints: &[Waypoint], s: f64) -> ([f64; 2], f64, f64) {
    let n = waypoints.len();
    if n == 1 || s <= waypoints[0].at {
        return (waypoints[0].pos, waypoints[0].gripper, 0.0);
    }
    for i in 1..n {
        let (a, b) = (&waypoints[i - 1], &waypoints[i]);
        if s <= b.at {
            let span = b.at - a.at;
            let f = if span > 0.0 { (s - a.at) / span } else { 1.0 };
            let lerp = |x: f64, y: f64| x + (y - x) * f;
            let progress = ((i - 1) as f64 + f) / (n - 1) as f64;
            return (
                [lerp(a.pos[0], b.pos[0]), lerp(a.pos[1], b.pos[1])],
                lerp(a.gripper, b.gripper),
                progress,
            );
        }
    }
    let last = waypoints[n - 1];
    (last.pos, last.gripper, 1.0)
}

/// Runs a scripted episode of `length` control steps (`length + 1` observations).
pub fn rollout(config: &ScriptConfig, seed: u64, length: usize) -> Result<Episode> {
    config.validate(length)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, config.noise_scale.max(0.0))
        .map_err(|e| Error::invalid(e.to_string()))?;
    let scene = config.scene;
    let mut waypoints = config.waypoints.clone();

    let mut state = WorldState {
        joints: inverse_kinematics(waypoints[0].pos),
        gripper: waypoints[0].gripper,
        object: scene.object_start,
        target: scene.target,
        held: false,
        object_shape: scene.object_shape,
        object_size: scene.object_size,
    };
    let mut steps = Vec::with_capacity(length + 1);
    let mut progress = Vec::with_capacity(length + 1);
    let mut fired = false;
    let mut grab_enabled = true;
    let mut frozen: Option<([f64; 2], f64)> = None;

    for t in 0..=length {
        let s = t as f64 / length as f64;
        if let Some(ev) = config.failure_event {
            if t == ev.trigger && !fired {
                fired = true;
                let (_, tip) = forward_kinematics(state.joints);
                match ev.kind {
                    FailureKind::Drop => {
                        if state.held {
                            state.object = tip;
                        }
                        state.held = false;
                        grab_enabled = false;
                    }
                    FailureKind::Misplace => {
                        let goal = scene.target.center;
                        // The controller swerves to the decoy right away.
                        let mut redirected = vec![
                            Waypoint {
                                pos: tip,
                                gripper: state.gripper,
                                at: s,
                            },
                            Waypoint {
                                pos: DECOY,
                                gripper: state.gripper,
                                at: s + MISPLACE_SWERVE,
                            },
                        ];
                        redirected.extend(waypoints.iter().filter(|w| w.at > s).map(|w| {
                            let mut w = *w;
                            if w.pos == goal {
                                w.pos = DECOY;
                            }
                            w
                        }));
                        let mut head: Vec<Waypoint> =
                            waypoints.iter().filter(|w| w.at < s).copied().collect();
                        head.extend(redirected);
                        waypoints = head;
                    }
                    FailureKind::Stall => {
                        let (_, _, p) = script_at(&waypoints, s);
                        frozen = Some((state.joints, p));
                    }
                }
            }
        }

        let p = match frozen {
            Some((joints, p)) => {
                state.joints = [
                    wrap_angle(joints[0] + noise.sample(&mut rng)),
                    wrap_angle(joints[1] + noise.sample(&mut rng)),
                ];
                // Loosened, unsteady grip while the arm is locked.
                state.gripper = rng.random_range(0.3..0.5);
                p
            }
            None => {
                let (pos, grip, p) = script_at(&waypoints, s);
                let q = inverse_kinematics(pos);
                state.joints = [
                    wrap_angle(q[0] + noise.sample(&mut rng)),
                    wrap_angle(q[1] + noise.sample(&mut rng)),
                ];
                state.gripper = grip.clamp(0.0, 1.0);
                p
            }
        };

        let (_, tip) = forward_kinematics(state.joints);
        if state.held {
            if state.gripper > OPEN_ABOVE && frozen.is_none() {
                state.held = false;
            }
            state.object = tip;
        } else if grab_enabled
            && state.gripper < CLOSED_BELOW
            && dist(tip, state.object) <= GRASP_RADIUS
        {
            state.held = true;
            state.object = tip;
        }
        state.object = [state.object[0].clamp(0.0, 1.0), state.object[1].clamp(0.0, 1.0)];

        steps.push(JointObservation {
            obs: render_views(&state),
            proprio: state.proprio(),
        });
        progress.push(p);
    }

    let success = !fired && !state.held && scene.target.contains(state.object);
    Ok(Episode {
        steps,
        success,
        task_id: format!("pick_place/{}", scene.object_shape.tag()),
        meta: EpisodeMeta {
            object_shape: Some(scene.object_shape.tag().to_string()),
            failure: config.failure_event.map(|ev| FailureMarker {
                kind: ev.kind,
                step: ev.trigger,
            }),
            progress,
        },
    })
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

// ---------------------------------------------------------------- rendering

const BACKGROUND: [u8; 3] = [24, 24, 32];
const TABLE: [u8; 3] = [90, 80, 70];
const ZONE: [u8; 3] = [40, 170, 70];
pub const OBJECT: [u8; 3] = [220, 50, 50];
const LINK: [u8; 3] = [70, 110, 235];
const GRIPPER: [u8; 3] = [235, 210, 60];
const BASE_COLOR: [u8; 3] = [160, 160, 160];

const LINK_HALF_WIDTH: f64 = 0.022;
const TABLE_Z: f64 = 0.12;
const SHOULDER_Z: f64 = 0.2;
const ELBOW_Z: f64 = 0.6;
const TIP_Z: f64 = 0.5;
const FINGER_LEN: f64 = 0.12;

/// Pixel row/col of a point in a unit-square canvas (y up).
pub fn project_to_pixel(p: [f64; 2]) -> (usize, usize) {
    let col = (p[0] * VIEW_SIZE as f64).floor().clamp(0.0, (VIEW_SIZE - 1) as f64) as usize;
    let row = ((1.0 - p[1]) * VIEW_SIZE as f64)
        .floor()
        .clamp(0.0, (VIEW_SIZE - 1) as f64) as usize;
    (row, col)
}

struct Canvas {
    img: RgbImage,
}

impl Canvas {
    fn new() -> Self {
        Self {
            img: RgbImage::filled(VIEW_SIZE, VIEW_SIZE, BACKGROUND),
        }
    }

    /// Paints every pixel whose center satisfies `inside`.
    fn fill(&mut self, color: [u8; 3], inside: impl Fn([f64; 2]) -> bool) {
        let n = VIEW_SIZE as f64;
        for row in 0..VIEW_SIZE {
            for col in 0..VIEW_SIZE {
                let p = [(col as f64 + 0.5) / n, 1.0 - (row as f64 + 0.5) / n];
                if inside(p) {
                    self.img.set_pixel(row, col, color);
                }
            }
        }
    }

    fn rect(&mut self, color: [u8; 3], lo: [f64; 2], hi: [f64; 2]) {
        self.fill(color, |p| p[0] >= lo[0] && p[0] <= hi[0] && p[1] >= lo[1] && p[1] <= hi[1]);
    }

    fn segment(&mut self, color: [u8; 3], a: [f64; 2], b: [f64; 2], half_width: f64) {
        self.fill(color, |p| seg_dist(p, a, b) <= half_width);
    }

    fn disc(&mut self, color: [u8; 3], c: [f64; 2], r: f64) {
        self.fill(color, |p| dist(p, c) <= r);
    }

    fn object(&mut self, shape: ObjectShape, center: [f64; 2], size: f64) {
        let h = size / 2.0;
        match shape {
            ObjectShape::Square => self.rect(
                OBJECT,
                [center[0] - h, center[1] - h],
                [center[0] + h, center[1] + h],
            ),
            ObjectShape::Triangle => self.fill(OBJECT, |p| {
                let dy = p[1] - (center[1] - h);
                dy >= 0.0 && dy <= 2.0 * h && (p[0] - center[0]).abs() <= h * (1.0 - dy / (2.0 * h))
            }),
        }
    }
}

fn seg_dist(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * ab[0] + (p[1] - a[1]) * ab[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    dist(p, [a[0] + t * ab[0], a[1] + t * ab[1]])
}

/// Top-down, side (y-z) and front (x-z) rasterizations of the scene.
pub fn render_views(state: &WorldState) -> MultiViewObservation {
    let (elbow, tip) = forward_kinematics(state.joints);
    let zone = state.target;
    let size = state.object_size;
    let opening = 0.012 + 0.03 * state.gripper.clamp(0.0, 1.0);

    // top-down
    let mut top = Canvas::new();
    top.rect(
        ZONE,
        [zone.center[0] - zone.half, zone.center[1] - zone.half],
        [zone.center[0] + zone.half, zone.center[1] + zone.half],
    );
    top.object(state.object_shape, state.object, size);
    top.disc(BASE_COLOR, BASE, 0.04);
    top.segment(LINK, BASE, elbow, LINK_HALF_WIDTH);
    top.segment(LINK, elbow, tip, LINK_HALF_WIDTH);
    let a = state.joints[0] + state.joints[1];
    let normal = [-a.sin(), a.cos()];
    for sign in [-1.0, 1.0] {
        let f = [tip[0] + sign * opening * normal[0], tip[1] + sign * opening * normal[1]];
        top.disc(GRIPPER, f, 0.016);
    }

    let object_z = if state.held {
        TIP_Z - FINGER_LEN - size / 2.0
    } else {
        TABLE_Z + size / 2.0
    };

    // side (horizontal axis = world y) and front (horizontal axis = world x)
    let lateral = |axis: usize| {
        let mut c = Canvas::new();
        c.rect(TABLE, [0.0, 0.0], [1.0, TABLE_Z]);
        c.rect(
            ZONE,
            [zone.center[axis] - zone.half, TABLE_Z - 0.04],
            [zone.center[axis] + zone.half, TABLE_Z],
        );
        c.object(state.object_shape, [state.object[axis], object_z], size);
        let shoulder = [BASE[axis], SHOULDER_Z];
        let el = [elbow[axis], ELBOW_Z];
        let tp = [tip[axis], TIP_Z];
        c.segment(LINK, shoulder, el, LINK_HALF_WIDTH);
        c.segment(LINK, el, tp, LINK_HALF_WIDTH);
        for sign in [-1.0, 1.0] {
            let x = tp[0] + sign * opening;
            c.segment(GRIPPER, [x, TIP_Z], [x, TIP_Z - FINGER_LEN], 0.012);
        }
        c.img
    };
    let side = lateral(1);
    let front = lateral(0);
    MultiViewObservation {
        views: [top.img, side, front],
    }
}

// ------------------------------------------------------------------ corpora

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneVariant {
    /// Square objects, targets on the right half of the table.
    Standard,
    /// Larger triangular objects and a lower target region.
    Shifted,
}

impl SceneVariant {
    pub fn shape(&self) -> ObjectShape {
        match self {
            SceneVariant::Standard => ObjectShape::Square,
            SceneVariant::Shifted => ObjectShape::Triangle,
        }
    }

    pub fn sample_scene(&self, rng: &mut impl Rng) -> Scene {
        match self {
            SceneVariant::Standard => Scene {
                object_start: [rng.random_range(0.15..0.35), rng.random_range(0.35..0.55)],
                target: ZoneBox {
                    center: [rng.random_range(0.65..0.85), rng.random_range(0.35..0.55)],
                    half: 0.08,
                },
                object_shape: ObjectShape::Square,
                object_size: 0.08,
            },
            SceneVariant::Shifted => Scene {
                object_start: [rng.random_range(0.15..0.35), rng.random_range(0.30..0.50)],
                target: ZoneBox {
                    center: [rng.random_range(0.65..0.80), rng.random_range(0.25..0.35)],
                    half: 0.09,
                },
                object_shape: ObjectShape::Triangle,
                object_size: 0.11,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub n_success: usize,
    pub n_failure: usize,
    pub seed: u64,
    /// Inclusive range of episode lengths `T`.
    pub length: (usize, usize),
    pub noise_scale: f64,
    pub variant: SceneVariant,
    /// Restricts injected failures to a single kind when set.
    #[serde(default)]
    pub only_kind: Option<FailureKind>,
}

impl CorpusSpec {
    pub fn new(n_success: usize, n_failure: usize, seed: u64) -> Self {
        Self {
            n_success,
            n_failure,
            seed,
            length: (60, 140),
            noise_scale: 0.01,
            variant: SceneVariant::Standard,
            only_kind: None,
        }
    }
}

const MAX_ATTEMPTS: usize = 64;

/// Generates exactly `n_success` successful and `n_failure` failed episodes.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Vec<Episode>> {
    let (lo, hi) = spec.length;
    if lo < MIN_LENGTH || hi < lo {
        return Err(Error::invalid(format!(
            "episode length range must satisfy {MIN_LENGTH} <= lo <= hi"
        )));
    }
    let mut master = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.n_success + spec.n_failure);
    for want_success in std::iter::repeat_n(true, spec.n_success)
        .chain(std::iter::repeat_n(false, spec.n_failure))
    {
        let mut produced = None;
        for _ in 0..MAX_ATTEMPTS {
            let length = master.random_range(lo..=hi);
            let scene = spec.variant.sample_scene(&mut master);
            let mut config = ScriptConfig::pick_and_place(scene, spec.noise_scale);
            if !want_success {
                let kind = match spec.only_kind {
                    Some(k) => k,
                    None => FailureKind::ALL[master.random_range(0..FailureKind::ALL.len())],
                };
                let frac = TRIGGER_GRID[master.random_range(0..TRIGGER_GRID.len())];
                let trigger = ((frac * length as f64).round() as usize).min(length - 1);
                config = config.with_failure(FailureEvent { kind, trigger });
            }
            let seed = master.random::<u64>();
            let ep = rollout(&config, seed, length)?;
            if ep.success == want_success {
                produced = Some(ep);
                break;
            }
        }
        out.push(produced.ok_or_else(|| {
            Error::invalid("simulator could not produce the requested outcome")
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene() -> Scene {
        Scene {
            object_start: [0.25, 0.45],
            target: ZoneBox { center: [0.75, 0.45], half: 0.08 },
            object_shape: ObjectShape::Square,
            object_size: 0.08,
        }
    }

    #[test]
    fn kinematics_round_trip() {
        for p in [[0.25, 0.45], [0.75, 0.45], HOME, DECOY, [0.6, 0.3]] {
            let (_, tip) = forward_kinematics(inverse_kinematics(p));
            assert!(dist(tip, p) < 1e-9, "{p:?} -> {tip:?}");
        }
    }

    #[test]
    fn clean_script_succeeds() {
        let cfg = ScriptConfig::pick_and_place(scene(), 0.0);
        let ep = rollout(&cfg, 1, 100).unwrap();
        assert!(ep.success);
        assert_eq!(ep.steps.len(), 101);
        assert!(ep.meta.progress.windows(2).all(|w| w[1] >= w[0]));
        assert_eq!(*ep.meta.progress.last().unwrap(), 1.0);
    }

    #[test]
    fn rollout_is_deterministic() {
        let cfg = ScriptConfig::pick_and_place(scene(), 0.02);
        assert_eq!(rollout(&cfg, 9, 60).unwrap(), rollout(&cfg, 9, 60).unwrap());
        assert_ne!(rollout(&cfg, 9, 60).unwrap(), rollout(&cfg, 10, 60).unwrap());
    }

    #[test]
    fn drop_fails_and_object_diverges() {
        let base = ScriptConfig::pick_and_place(scene(), 0.0);
        let ok = rollout(&base, 3, 100).unwrap();
        let bad = rollout(
            &base.clone().with_failure(FailureEvent { kind: FailureKind::Drop, trigger: 50 }),
            3,
            100,
        )
        .unwrap();
        assert!(ok.success);
        assert!(!bad.success);
        assert_eq!(ok.steps[49], bad.steps[49]);
        assert_ne!(ok.steps[60].obs.views[0], bad.steps[60].obs.views[0]);
    }

    #[test]
    fn every_failure_kind_flips_label() {
        let base = ScriptConfig::pick_and_place(scene(), 0.01);
        for kind in FailureKind::ALL {
            for trigger in [30, 45] {
                let with = base.clone().with_failure(FailureEvent { kind, trigger });
                assert!(rollout(&base, 11, 100).unwrap().success);
                assert!(!rollout(&with, 11, 100).unwrap().success, "{kind:?}");
            }
        }
    }

    #[test]
    fn invalid_configs() {
        let cfg = ScriptConfig::pick_and_place(scene(), 0.0);
        assert!(rollout(&cfg, 0, 9).is_err());
        let late = cfg.with_failure(FailureEvent { kind: FailureKind::Stall, trigger: 20 });
        assert!(rollout(&late, 0, 20).is_err());
    }

    fn state_with_object(x: f64) -> WorldState {
        WorldState {
            joints: inverse_kinematics(HOME),
            gripper: 1.0,
            object: [x, 0.45],
            target: scene().target,
            held: false,
            object_shape: ObjectShape::Square,
            object_size: 0.08,
        }
    }

    #[test]
    fn rendering_is_pure_and_sensitive() {
        let a = state_with_object(0.25);
        let b = state_with_object(0.3);
        assert_eq!(render_views(&a), render_views(&a));
        assert_ne!(render_views(&a).views[0], render_views(&b).views[0]);
        for v in &render_views(&a).views {
            assert_eq!((v.height, v.width), (VIEW_SIZE, VIEW_SIZE));
        }
    }

    #[test]
    fn object_covers_target_center_in_top_view() {
        let mut s = state_with_object(0.0);
        s.object = s.target.center;
        let top = &render_views(&s).views[0];
        // center (0.75, 0.45) -> col floor(0.75*32)=24, row floor(0.55*32)=17
        assert_eq!(project_to_pixel(s.target.center), (17, 24));
        assert_eq!(top.pixel(17, 24), OBJECT);
        // a zone pixel outside the object footprint stays green: x=0.75+0.065 -> col 26
        assert_eq!(top.pixel(17, 26), ZONE);

        let mut away = s;
        away.object = [0.25, 0.45];
        assert_eq!(render_views(&away).views[0].pixel(17, 24), ZONE);
    }

    #[test]
    fn corpus_counts_and_determinism() {
        let mut spec = CorpusSpec::new(6, 6, 7);
        spec.length = (60, 80);
        let a = generate_corpus(&spec).unwrap();
        assert_eq!(a.len(), 12);
        assert_eq!(a.iter().filter(|e| e.success).count(), 6);
        assert!(a.iter().filter(|e| !e.success).all(|e| e.meta.failure.is_some()));
        assert_eq!(a, generate_corpus(&spec).unwrap());

        let only_fail = generate_corpus(&CorpusSpec { n_success: 0, n_failure: 5, ..spec }).unwrap();
        assert_eq!(only_fail.len(), 5);
        assert!(only_fail.iter().all(|e| !e.success));
        for ep in &only_fail {
            let m = ep.meta.failure.unwrap();
            let frac = m.step as f64 / ep.horizon() as f64;
            assert!(frac > 0.25 && frac < 0.5);
        }
    }
}

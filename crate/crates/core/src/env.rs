//! Kinematic table-top manipulation simulator.
//!
//! A point gripper with a finger-width degree of freedom moves one 5 cm
//! object inside a bounded workspace. Coordinates are meters with the
//! workspace centered at the origin in x/y and the table surface at z = 0.
//!
//! Contact is resolved kinematically: grasping attaches the object to the
//! gripper, closed fingers push the object horizontally, and an ungrasped
//! object drops straight onto whatever supports it.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

pub const DEFAULT_HORIZON: u32 = 50;
/// End-effector displacement for a unit action component.
pub const EE_STEP: f64 = 0.05;
/// Finger-width change for a unit action component.
pub const FINGER_STEP: f64 = 0.10;
pub const FINGER_MAX: f64 = 0.08;
pub const OBJECT_SIZE: f64 = 0.05;
pub const OBJECT_HALF: f64 = OBJECT_SIZE / 2.0;
pub const D_THRESHOLD: f64 = 0.05;

const GRASP_HORIZONTAL: f64 = 0.02;
const GRASP_VERTICAL: f64 = 0.03;
const GRASP_BELOW: f64 = 0.01;
const GRASP_ABOVE: f64 = 0.005;
const RELEASE_MARGIN: f64 = 0.01;
const PUSH_RADIUS: f64 = 0.03;
const BODY_RADIUS: f64 = 0.015;
const SPHERE_DAMPING: f64 = 0.95;
const ROLL_STOP: f64 = 1e-4;
const TABLE_MARGIN: f64 = 0.10;
const HOME_HEIGHT: f64 = 0.15;
const SUBSTEPS: usize = 10;
const MAX_DRAWS: usize = 10_000;
const CONTACT_TOL: f64 = 0.005;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Workspace {
    pub extents: Vec3,
    pub table_height: f64,
    pub d_threshold: f64,
}

impl Workspace {
    pub fn cube35() -> Self {
        Self {
            extents: [0.35, 0.35, 0.35],
            table_height: 0.0,
            d_threshold: D_THRESHOLD,
        }
    }

    pub fn lo(&self) -> Vec3 {
        [-self.extents[0] / 2.0, -self.extents[1] / 2.0, self.table_height]
    }

    pub fn hi(&self) -> Vec3 {
        [self.extents[0] / 2.0, self.extents[1] / 2.0, self.table_height + self.extents[2]]
    }

    /// Height of an object's center when it rests on the table.
    pub fn rest_height(&self) -> f64 {
        self.table_height + OBJECT_HALF
    }

    pub fn contains(&self, p: Vec3) -> bool {
        let (lo, hi) = (self.lo(), self.hi());
        (0..3).all(|i| p[i] >= lo[i] && p[i] <= hi[i])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Pretrain,
    Larger,
    InAir,
    Push,
    Sphere,
    Wall,
    Box,
    /// Move the gripper onto the object; used to sanity-check learners.
    Reach,
}

impl Variant {
    pub const DOWNSTREAM: [Variant; 6] = [
        Variant::Larger,
        Variant::InAir,
        Variant::Push,
        Variant::Sphere,
        Variant::Wall,
        Variant::Box,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Pretrain => "pretrain",
            Variant::Larger => "larger",
            Variant::InAir => "in_air",
            Variant::Push => "push",
            Variant::Sphere => "sphere",
            Variant::Wall => "wall",
            Variant::Box => "box",
            Variant::Reach => "reach",
        }
    }

    pub fn default_p_air(self) -> f64 {
        match self {
            Variant::InAir => 1.0,
            Variant::Push | Variant::Box | Variant::Reach => 0.0,
            Variant::Pretrain | Variant::Larger | Variant::Sphere | Variant::Wall => 0.7,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let v = match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "pretrain" => Variant::Pretrain,
            "larger" => Variant::Larger,
            "in_air" | "inair" => Variant::InAir,
            "push" => Variant::Push,
            "sphere" => Variant::Sphere,
            "wall" => Variant::Wall,
            "box" => Variant::Box,
            "reach" => Variant::Reach,
            other => return Err(Error::Config(format!("unknown task variant `{other}`"))),
        };
        Ok(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectKind {
    Cube5cm,
    Sphere5cm,
}

/// Axis-aligned solid box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Self {
        Self { min, max }
    }

    pub fn around(center: Vec3, half: f64) -> Self {
        Self {
            min: [center[0] - half, center[1] - half, center[2] - half],
            max: [center[0] + half, center[1] + half, center[2] + half],
        }
    }

    /// Strict interior overlap; touching faces do not count.
    pub fn overlaps(&self, other: &Aabb) -> bool {
        const EPS: f64 = 1e-9;
        (0..3).all(|i| self.min[i] < other.max[i] - EPS && other.min[i] < self.max[i] - EPS)
    }

    fn distance_to(&self, p: Vec3) -> f64 {
        (0..3)
            .map(|i| {
                let d = (self.min[i] - p[i]).max(0.0).max(p[i] - self.max[i]);
                d * d
            })
            .sum::<f64>()
            .sqrt()
    }

    fn footprint_overlaps(&self, center: Vec3, half: f64) -> bool {
        const EPS: f64 = 1e-9;
        (0..2).all(|i| center[i] - half < self.max[i] - EPS && self.min[i] < center[i] + half - EPS)
    }
}

/// Horizontal rectangle for object-center sampling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Region {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Region {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; 2] {
        [
            rng.random_range(self.min[0]..=self.max[0]),
            rng.random_range(self.min[1]..=self.max[1]),
        ]
    }

    pub fn contains(&self, p: Vec3) -> bool {
        (0..2).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub variant: Variant,
    pub p_air: f64,
    pub workspace: Workspace,
    pub object_kind: ObjectKind,
    pub obstacles: Vec<Aabb>,
    pub start_region: Region,
    pub goal_region: Region,
    pub horizon: u32,
}

impl TaskSpec {
    pub fn new(variant: Variant) -> Self {
        let workspace = if variant == Variant::Larger {
            Workspace {
                extents: [0.45, 0.45, 0.40],
                ..Workspace::cube35()
            }
        } else {
            Workspace::cube35()
        };
        let (hx, hy) = (workspace.extents[0] / 2.0, workspace.extents[1] / 2.0);
        let full = Region {
            min: [-hx, -hy],
            max: [hx, hy],
        };
        let (start_region, goal_region, obstacles) = match variant {
            Variant::Wall => (
                Region {
                    min: [-hx, -hy],
                    max: [-hx + 0.15, hy],
                },
                Region {
                    min: [hx - 0.15, -hy],
                    max: [hx, hy],
                },
                vec![Aabb::new([-0.005, -hy, 0.0], [0.005, hy, 0.10])],
            ),
            _ => (full, full, Vec::new()),
        };
        Self {
            variant,
            p_air: variant.default_p_air(),
            workspace,
            object_kind: if variant == Variant::Sphere {
                ObjectKind::Sphere5cm
            } else {
                ObjectKind::Cube5cm
            },
            obstacles,
            start_region,
            goal_region,
            horizon: DEFAULT_HORIZON,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.workspace.extents.iter().any(|&e| e <= 0.0) || self.workspace.d_threshold <= 0.0 {
            return Err(Error::Config("workspace extents and d_threshold must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.p_air) {
            return Err(Error::Config(format!("p_air {} outside [0, 1]", self.p_air)));
        }
        let required = match self.variant {
            Variant::InAir => Some(1.0),
            Variant::Push | Variant::Box | Variant::Reach => Some(0.0),
            Variant::Larger | Variant::Sphere | Variant::Wall => Some(0.7),
            Variant::Pretrain => None,
        };
        if let Some(p) = required {
            if self.p_air != p {
                return Err(Error::Config(format!(
                    "variant {} requires p_air = {p}, got {}",
                    self.variant, self.p_air
                )));
            }
        }
        let (lo, hi) = (self.workspace.lo(), self.workspace.hi());
        for o in &self.obstacles {
            if (0..3).any(|i| o.min[i] < lo[i] - 1e-9 || o.max[i] > hi[i] + 1e-9 || o.min[i] >= o.max[i]) {
                return Err(Error::Config(format!("obstacle {o:?} is not inside the workspace")));
            }
        }
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be positive".into()));
        }
        Ok(())
    }

    pub fn home_position(&self) -> Vec3 {
        [0.0, 0.0, self.workspace.table_height + HOME_HEIGHT]
    }

    /// Initial finger opening; Push locks the fingers closed.
    pub fn home_finger_width(&self) -> f64 {
        if self.variant == Variant::Push {
            0.0
        } else {
            FINGER_MAX
        }
    }

    /// Task success. Reach measures the gripper, every other task the object.
    pub fn is_success(&self, state: &EnvState, goal: &Goal) -> bool {
        let p = if self.variant == Variant::Reach {
            state.ee_pos
        } else {
            state.obj_pos
        };
        distance(p, goal.target_pos) <= self.workspace.d_threshold
    }

    fn object_box(&self, center: Vec3) -> Aabb {
        Aabb::around(center, OBJECT_HALF)
    }

    fn table_bounds(&self) -> (Vec3, Vec3) {
        let (lo, hi) = (self.workspace.lo(), self.workspace.hi());
        (
            [lo[0] - TABLE_MARGIN, lo[1] - TABLE_MARGIN, self.workspace.rest_height()],
            [hi[0] + TABLE_MARGIN, hi[1] + TABLE_MARGIN, hi[2] + OBJECT_SIZE],
        )
    }

    fn object_free(&self, center: Vec3, obstacles: &[Aabb]) -> bool {
        let (lo, hi) = self.table_bounds();
        if (0..3).any(|i| center[i] < lo[i] - 1e-12 || center[i] > hi[i] + 1e-12) {
            return false;
        }
        let b = self.object_box(center);
        obstacles.iter().all(|o| !o.overlaps(&b))
    }

    fn support_height(&self, center: Vec3, obstacles: &[Aabb]) -> f64 {
        obstacles
            .iter()
            .filter(|o| o.footprint_overlaps(center, OBJECT_HALF) && o.max[2] <= center[2] - OBJECT_HALF + 1e-9)
            .map(|o| o.max[2] + OBJECT_HALF)
            .fold(self.workspace.rest_height(), f64::max)
    }

    /// Samples an initial state and goal.
    pub fn reset<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<(EnvState, Goal)> {
        self.validate()?;
        let rest = self.workspace.rest_height();
        let mut obstacles = self.obstacles.clone();
        let mut keepout = None;
        let mut goal_floor = None;
        if self.variant == Variant::Box {
            let (lo, hi) = (self.workspace.lo(), self.workspace.hi());
            let c = [
                rng.random_range(lo[0] + 0.05..=hi[0] - 0.05),
                rng.random_range(lo[1] + 0.05..=hi[1] - 0.05),
            ];
            let t = self.workspace.table_height;
            let (o, i, h) = (0.05, 0.04, t + 0.05);
            obstacles.push(Aabb::new([c[0] - o, c[1] - o, t], [c[0] - i, c[1] + o, h]));
            obstacles.push(Aabb::new([c[0] + i, c[1] - o, t], [c[0] + o, c[1] + o, h]));
            obstacles.push(Aabb::new([c[0] - i, c[1] - o, t], [c[0] + i, c[1] - i, h]));
            obstacles.push(Aabb::new([c[0] - i, c[1] + i, t], [c[0] + i, c[1] + o, h]));
            keepout = Some(Aabb::new([c[0] - o, c[1] - o, t], [c[0] + o, c[1] + o, h]));
            goal_floor = Some(c);
        }

        let obj_pos = sample_until(|| {
            let xy = self.start_region.sample(rng);
            let p = [xy[0], xy[1], rest];
            let b = self.object_box(p);
            (self.object_free(p, &obstacles) && keepout.is_none_or(|k| !k.overlaps(&b))).then_some(p)
        })?;

        let target_pos = if self.variant == Variant::Reach {
            obj_pos
        } else if let Some(c) = goal_floor {
            let slack = 0.04 - OBJECT_HALF;
            [
                c[0] + rng.random_range(-slack..=slack),
                c[1] + rng.random_range(-slack..=slack),
                rest,
            ]
        } else {
            let in_air = rng.random::<f64>() < self.p_air;
            let top = self.workspace.hi()[2] - OBJECT_HALF;
            sample_until(|| {
                let xy = self.goal_region.sample(rng);
                let z = if in_air {
                    // strictly above the resting height
                    let u: f64 = rng.random();
                    top - u * (top - rest)
                } else {
                    rest
                };
                let p = [xy[0], xy[1], z];
                self.object_free(p, &obstacles).then_some(p)
            })?
        };

        let ee_pos = self.home_position();
        let finger_width = self.home_finger_width();
        let mut state = EnvState {
            ee_pos,
            ee_vel: [0.0; 3],
            finger_width,
            finger_vel: 0.0,
            obj_pos,
            obj_vel: [0.0; 3],
            obj_rel_pos: sub(obj_pos, ee_pos),
            contact: [false; 2],
            step_idx: 0,
            grasped: false,
            obstacles,
        };
        state.contact = contacts(&state);
        Ok((state, Goal { target_pos }))
    }

    /// Resets to the home gripper pose with the object at `obj_pos`.
    pub fn reset_to(&self, obj_pos: Vec3, obstacles: Vec<Aabb>) -> Result<EnvState> {
        if !obj_pos.iter().all(|v| v.is_finite()) || !self.object_free(obj_pos, &obstacles) {
            return Err(Error::Env {
                step: 0,
                reason: format!("cannot place object at {obj_pos:?}"),
            });
        }
        let ee_pos = self.home_position();
        let mut state = EnvState {
            ee_pos,
            ee_vel: [0.0; 3],
            finger_width: self.home_finger_width(),
            finger_vel: 0.0,
            obj_pos,
            obj_vel: [0.0; 3],
            obj_rel_pos: sub(obj_pos, ee_pos),
            contact: [false; 2],
            step_idx: 0,
            grasped: false,
            obstacles,
        };
        state.contact = contacts(&state);
        Ok(state)
    }

    /// Advances the simulation by one control step.
    pub fn step(&self, state: &EnvState, action: &Action, goal: &Goal, mode: RewardMode) -> Result<Transition> {
        if !action.is_finite() {
            return Err(Error::Env {
                step: state.step_idx,
                reason: format!("non-finite action {action:?}"),
            });
        }
        let a = action.clamped();
        let mut s = state.clone();
        let prev_ee = s.ee_pos;
        let prev_obj = s.obj_pos;
        let prev_width = s.finger_width;
        let ow = OBJECT_SIZE;

        // fingers
        if self.variant == Variant::Push {
            s.finger_width = 0.0;
            s.grasped = false;
        } else {
            let target = (prev_width + FINGER_STEP * a.finger_delta).clamp(0.0, FINGER_MAX);
            if s.grasped {
                if target > ow + RELEASE_MARGIN {
                    s.grasped = false;
                    s.finger_width = target;
                } else {
                    s.finger_width = target.max(ow);
                }
            } else {
                let closing = target < prev_width;
                let captured = in_capture(s.ee_pos, s.obj_pos);
                if closing && captured && prev_width >= ow - GRASP_BELOW && target <= ow + GRASP_ABOVE {
                    s.grasped = true;
                    s.finger_width = target.max(ow);
                    s.obj_rel_pos = sub(s.obj_pos, s.ee_pos);
                } else {
                    s.finger_width = target;
                }
            }
        }
        let pushing = !s.grasped && s.finger_width < ow;

        // gripper motion in substeps, axis by axis
        let lo = self.workspace.lo();
        let hi = self.workspace.hi();
        let ee_lo = [lo[0], lo[1], self.workspace.rest_height()];
        let delta: Vec3 = [
            EE_STEP * a.ee_delta[0],
            EE_STEP * a.ee_delta[1],
            EE_STEP * a.ee_delta[2],
        ];
        for _ in 0..SUBSTEPS {
            for axis in 0..3 {
                let d = delta[axis] / SUBSTEPS as f64;
                if d == 0.0 {
                    continue;
                }
                let mut cand = s.ee_pos;
                cand[axis] = (cand[axis] + d).clamp(ee_lo[axis], hi[axis]);
                if cand[axis] == s.ee_pos[axis] {
                    continue;
                }
                if s.grasped {
                    let obj = add(cand, s.obj_rel_pos);
                    if obj[2] < self.workspace.rest_height() - 1e-12 || !self.object_free(obj, &s.obstacles) {
                        continue;
                    }
                    s.ee_pos = cand;
                    s.obj_pos = obj;
                } else {
                    if s.obstacles.iter().any(|o| o.distance_to(cand) < BODY_RADIUS) {
                        continue;
                    }
                    if pushing && push_overlap(cand, s.obj_pos) {
                        if axis == 2 {
                            continue;
                        }
                        let moved = push_out(cand, s.obj_pos, axis, d);
                        if !self.object_free(moved, &s.obstacles) {
                            continue;
                        }
                        s.obj_pos = moved;
                    }
                    s.ee_pos = cand;
                }
            }
        }

        if !s.grasped {
            let pushed = [s.obj_pos[0] - prev_obj[0], s.obj_pos[1] - prev_obj[1]];
            if self.object_kind == ObjectKind::Sphere5cm {
                let was_pushed = pushed != [0.0, 0.0];
                let roll = if was_pushed {
                    [0.0, 0.0]
                } else {
                    let v = [state.obj_vel[0] * SPHERE_DAMPING, state.obj_vel[1] * SPHERE_DAMPING];
                    if v[0].hypot(v[1]) < ROLL_STOP {
                        [0.0, 0.0]
                    } else {
                        v
                    }
                };
                if roll != [0.0, 0.0] {
                    let next = [s.obj_pos[0] + roll[0], s.obj_pos[1] + roll[1], s.obj_pos[2]];
                    let blocked_by_gripper = push_overlap(s.ee_pos, next) && pushing;
                    if self.object_free(next, &s.obstacles) && !blocked_by_gripper {
                        s.obj_pos = next;
                    }
                }
            }
            s.obj_pos[2] = self.support_height(s.obj_pos, &s.obstacles).min(s.obj_pos[2]);
            if s.obj_pos[2] < self.workspace.rest_height() {
                s.obj_pos[2] = self.workspace.rest_height();
            }
            s.obj_rel_pos = sub(s.obj_pos, s.ee_pos);
        }

        s.ee_vel = sub(s.ee_pos, prev_ee);
        s.finger_vel = s.finger_width - prev_width;
        s.obj_vel = sub(s.obj_pos, prev_obj);
        s.step_idx += 1;
        s.contact = contacts(&s);

        let solved = self.is_success(&s, goal);
        let horizon_hit = s.step_idx >= self.horizon;
        let (reward, done) = match mode {
            RewardMode::EveryStep => (if solved { 1.0 } else { 0.0 }, horizon_hit),
            RewardMode::FirstSuccess => (if solved { 1.0 } else { 0.0 }, horizon_hit || solved),
            RewardMode::Silent => (0.0, horizon_hit),
        };
        Ok(Transition {
            state: s,
            reward,
            done,
            success: solved,
        })
    }
}

fn sample_until<T>(mut draw: impl FnMut() -> Option<T>) -> Result<T> {
    for _ in 0..MAX_DRAWS {
        if let Some(v) = draw() {
            return Ok(v);
        }
    }
    Err(Error::Config(format!(
        "rejection sampling found no admissible position in {MAX_DRAWS} draws"
    )))
}

fn in_capture(ee: Vec3, obj: Vec3) -> bool {
    let dx = obj[0] - ee[0];
    let dy = obj[1] - ee[1];
    dx.hypot(dy) <= GRASP_HORIZONTAL && (obj[2] - ee[2]).abs() <= GRASP_VERTICAL
}

fn push_overlap(ee: Vec3, obj: Vec3) -> bool {
    let vertical = ee[2] - PUSH_RADIUS < obj[2] + OBJECT_HALF && ee[2] + PUSH_RADIUS > obj[2] - OBJECT_HALF;
    let horizontal = (obj[0] - ee[0]).hypot(obj[1] - ee[1]) < PUSH_RADIUS + OBJECT_HALF;
    vertical && horizontal
}

/// Minimal horizontal translation of the object that clears the gripper.
fn push_out(ee: Vec3, obj: Vec3, axis: usize, motion: f64) -> Vec3 {
    let reach = PUSH_RADIUS + OBJECT_HALF;
    let (dx, dy) = (obj[0] - ee[0], obj[1] - ee[1]);
    let d = dx.hypot(dy);
    let dir = if d > 1e-9 {
        [dx / d, dy / d]
    } else {
        let mut v = [0.0, 0.0];
        v[axis] = motion.signum();
        v
    };
    [ee[0] + dir[0] * reach, ee[1] + dir[1] * reach, obj[2]]
}

fn contacts(s: &EnvState) -> [bool; 2] {
    if s.grasped {
        return [true, true];
    }
    let d = sub(s.obj_pos, s.ee_pos);
    if d[0].abs() > GRASP_HORIZONTAL || d[2].abs() > GRASP_VERTICAL {
        return [false, false];
    }
    let half_w = s.finger_width / 2.0;
    [
        ((d[1] + OBJECT_HALF) - half_w).abs() <= CONTACT_TOL,
        ((d[1] - OBJECT_HALF) + half_w).abs() <= CONTACT_TOL,
    ]
}

#[inline]
pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn distance(a: Vec3, b: Vec3) -> f64 {
    let d = sub(a, b);
    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub ee_pos: Vec3,
    pub ee_vel: Vec3,
    pub finger_width: f64,
    pub finger_vel: f64,
    pub obj_pos: Vec3,
    pub obj_vel: Vec3,
    pub obj_rel_pos: Vec3,
    pub contact: [bool; 2],
    pub step_idx: u32,
    pub grasped: bool,
    /// Solid regions active in this episode (task obstacles plus the box, if any).
    pub obstacles: Vec<Aabb>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Action {
    pub ee_delta: Vec3,
    pub finger_delta: f64,
}

impl Action {
    pub const DIM: usize = 4;

    pub fn zero() -> Self {
        Self {
            ee_delta: [0.0; 3],
            finger_delta: 0.0,
        }
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self {
            ee_delta: [v[0], v[1], v[2]],
            finger_delta: v[3],
        }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.ee_delta[0], self.ee_delta[1], self.ee_delta[2], self.finger_delta]
    }

    pub fn is_finite(&self) -> bool {
        self.ee_delta.iter().all(|v| v.is_finite()) && self.finger_delta.is_finite()
    }

    pub fn clamped(&self) -> Self {
        Self {
            ee_delta: self.ee_delta.map(|v| v.clamp(-1.0, 1.0)),
            finger_delta: self.finger_delta.clamp(-1.0, 1.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Goal {
    pub target_pos: Vec3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RewardMode {
    /// 1 on every step where the task is solved; runs to the horizon.
    EveryStep,
    /// 1 on the first solved step, which also ends the episode.
    FirstSuccess,
    /// No reward; runs to the horizon.
    Silent,
}

#[derive(Debug, Clone)]
pub struct Transition {
    pub state: EnvState,
    pub reward: f64,
    pub done: bool,
    pub success: bool,
}

/// Object within `d_threshold` of the target (inclusive).
pub fn success(state: &EnvState, goal: &Goal, workspace: &Workspace) -> bool {
    distance(state.obj_pos, goal.target_pos) <= workspace.d_threshold
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum View {
    /// Full state, in the order of [`EnvState`]'s fields; `step_idx` last.
    Privileged,
    /// `ee_pos, finger_width, obj_pos, obj_rel_pos`.
    PositionsOnly,
    /// `PositionsOnly` followed by the target position.
    PositionsAndGoal,
}

impl View {
    pub fn name(self) -> &'static str {
        match self {
            View::Privileged => "privileged",
            View::PositionsOnly => "positions_only",
            View::PositionsAndGoal => "positions_and_goal",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        [View::Privileged, View::PositionsOnly, View::PositionsAndGoal]
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown observation view `{s}`")))
    }

    pub fn dim(self) -> usize {
        match self {
            View::Privileged => 20,
            View::PositionsOnly => 10,
            View::PositionsAndGoal => 13,
        }
    }
}

pub fn observe(state: &EnvState, goal: &Goal, view: View) -> Vec<f64> {
    let mut v = Vec::with_capacity(view.dim());
    match view {
        View::Privileged => {
            v.extend_from_slice(&state.ee_pos);
            v.extend_from_slice(&state.ee_vel);
            v.push(state.finger_width);
            v.push(state.finger_vel);
            v.extend_from_slice(&state.obj_pos);
            v.extend_from_slice(&state.obj_vel);
            v.extend_from_slice(&state.obj_rel_pos);
            v.push(f64::from(u8::from(state.contact[0])));
            v.push(f64::from(u8::from(state.contact[1])));
            v.push(f64::from(state.step_idx));
        }
        View::PositionsOnly | View::PositionsAndGoal => {
            v.extend_from_slice(&state.ee_pos);
            v.push(state.finger_width);
            v.extend_from_slice(&state.obj_pos);
            v.extend_from_slice(&state.obj_rel_pos);
            if view == View::PositionsAndGoal {
                v.extend_from_slice(&goal.target_pos);
            }
        }
    }
    v
}

/// One row of a trajectory dump.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryRow {
    pub step: u32,
    pub ee: Vec3,
    pub obj: Vec3,
    pub goal: Vec3,
    pub reward: f64,
    pub done: bool,
}

pub const TRAJECTORY_CSV_HEADER: &str = "step,ee_x,ee_y,ee_z,obj_x,obj_y,obj_z,goal_x,goal_y,goal_z,reward,done";

pub fn write_trajectory_csv<W: Write>(mut out: W, rows: &[TrajectoryRow]) -> std::io::Result<()> {
    writeln!(out, "{TRAJECTORY_CSV_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.step,
            r.ee[0],
            r.ee[1],
            r.ee[2],
            r.obj[0],
            r.obj[1],
            r.obj[2],
            r.goal[0],
            r.goal[1],
            r.goal[2],
            r.reward,
            u8::from(r.done)
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(17)
    }

    fn act(x: f64, y: f64, z: f64, f: f64) -> Action {
        Action {
            ee_delta: [x, y, z],
            finger_delta: f,
        }
    }

    fn placed(task: &TaskSpec, obj: Vec3) -> EnvState {
        task.reset_to(obj, task.obstacles.clone()).unwrap()
    }

    fn far_goal() -> Goal {
        Goal {
            target_pos: [0.15, 0.15, 0.3],
        }
    }

    #[test]
    fn pretrain_object_rests_on_table() {
        let task = TaskSpec::new(Variant::Pretrain);
        let mut r = rng();
        for _ in 0..100 {
            let (s, _) = task.reset(&mut r).unwrap();
            assert_eq!(s.obj_pos[2], 0.025);
            assert!(task.workspace.contains(s.obj_pos));
            assert!(!s.grasped);
        }
    }

    #[test]
    fn in_air_goals_are_above_table() {
        let task = TaskSpec::new(Variant::InAir);
        let mut r = rng();
        for _ in 0..1000 {
            let (_, g) = task.reset(&mut r).unwrap();
            assert!(g.target_pos[2] > task.workspace.rest_height());
        }
    }

    #[test]
    fn wall_start_and_goal_on_opposite_sides() {
        let task = TaskSpec::new(Variant::Wall);
        let mut r = rng();
        let wall = task.obstacles[0];
        for _ in 0..1000 {
            let (s, g) = task.reset(&mut r).unwrap();
            assert!(s.obj_pos[0] + OBJECT_HALF <= wall.min[0] + 1e-12);
            assert!(g.target_pos[0] > wall.max[0]);
            assert!(task.start_region.contains(s.obj_pos));
            assert!(task.goal_region.contains(g.target_pos));
        }
    }

    #[test]
    fn box_goal_inside_box_and_start_outside() {
        let task = TaskSpec::new(Variant::Box);
        let mut r = rng();
        for _ in 0..300 {
            let (s, g) = task.reset(&mut r).unwrap();
            assert_eq!(s.obstacles.len(), 4);
            let xs: Vec<f64> = s.obstacles.iter().flat_map(|o| [o.min[0], o.max[0]]).collect();
            let ys: Vec<f64> = s.obstacles.iter().flat_map(|o| [o.min[1], o.max[1]]).collect();
            let (x0, x1) = (xs.iter().cloned().fold(f64::MAX, f64::min), xs.iter().cloned().fold(f64::MIN, f64::max));
            let (y0, y1) = (ys.iter().cloned().fold(f64::MAX, f64::min), ys.iter().cloned().fold(f64::MIN, f64::max));
            assert!((x1 - x0 - 0.10).abs() < 1e-9 && (y1 - y0 - 0.10).abs() < 1e-9);
            let gp = g.target_pos;
            assert!(gp[0] - OBJECT_HALF >= x0 + 0.01 - 1e-9 && gp[0] + OBJECT_HALF <= x1 - 0.01 + 1e-9);
            assert!(gp[1] - OBJECT_HALF >= y0 + 0.01 - 1e-9 && gp[1] + OBJECT_HALF <= y1 - 0.01 + 1e-9);
            assert_eq!(gp[2], 0.025);
            let o = s.obj_pos;
            let inside = o[0] + OBJECT_HALF > x0 && o[0] - OBJECT_HALF < x1 && o[1] + OBJECT_HALF > y0 && o[1] - OBJECT_HALF < y1;
            assert!(!inside);
        }
    }

    #[test]
    fn rejection_sampling_gives_up() {
        let mut task = TaskSpec::new(Variant::Pretrain);
        task.obstacles = vec![Aabb::new([-0.175, -0.175, 0.0], [0.175, 0.175, 0.35])];
        let err = task.reset(&mut rng()).unwrap_err();
        assert!(matches!(err, Error::Config(m) if m.contains("10000")));
    }

    #[test]
    fn p_air_must_match_variant() {
        let mut task = TaskSpec::new(Variant::InAir);
        task.p_air = 0.5;
        assert!(task.validate().is_err());
    }

    #[test]
    fn object_near_target_is_rewarded() {
        let task = TaskSpec::new(Variant::Pretrain);
        let s = placed(&task, [0.0, 0.1, 0.025]);
        let goal = Goal {
            target_pos: [0.04, 0.1, 0.025],
        };
        let t = task.step(&s, &Action::zero(), &goal, RewardMode::EveryStep).unwrap();
        assert_eq!(t.reward, 1.0);
        assert!(!t.done);
        let t = task.step(&s, &Action::zero(), &goal, RewardMode::FirstSuccess).unwrap();
        assert_eq!(t.reward, 1.0);
        assert!(t.done);
    }

    #[test]
    fn zero_action_is_a_fixed_point() {
        let task = TaskSpec::new(Variant::Pretrain);
        let (s, g) = task.reset(&mut rng()).unwrap();
        let t = task.step(&s, &Action::zero(), &g, RewardMode::Silent).unwrap();
        let mut expected = s.clone();
        expected.step_idx = 1;
        assert_eq!(t.state, expected);
    }

    fn grasped_state(task: &TaskSpec) -> EnvState {
        let mut s = placed(task, [0.0, 0.0, 0.025]);
        let g = far_goal();
        // descend onto the object with open fingers
        while s.ee_pos[2] > 0.05 {
            s = task.step(&s, &act(0.0, 0.0, -1.0, 0.0), &g, RewardMode::Silent).unwrap().state;
        }
        s = task.step(&s, &act(0.0, 0.0, 0.0, -0.3), &g, RewardMode::Silent).unwrap().state;
        assert!(s.grasped, "{s:?}");
        s
    }

    #[test]
    fn grasped_object_tracks_gripper() {
        let task = TaskSpec::new(Variant::Pretrain);
        let s = grasped_state(&task);
        assert_eq!(s.contact, [true, true]);
        assert!((s.finger_width - OBJECT_SIZE).abs() < 1e-12);
        let t = task.step(&s, &act(1.0, 0.0, 0.0, 0.0), &far_goal(), RewardMode::Silent).unwrap();
        assert!((t.state.obj_pos[0] - s.obj_pos[0] - 0.05).abs() < 1e-12);
        assert_eq!(t.state.obj_rel_pos, s.obj_rel_pos);
        let up = task.step(&t.state, &act(0.0, 0.0, 1.0, 0.0), &far_goal(), RewardMode::Silent).unwrap();
        assert!((up.state.obj_pos[2] - t.state.obj_pos[2] - 0.05).abs() < 1e-12);
        // release drops the object onto the table
        let rel = task.step(&up.state, &act(0.0, 0.0, 0.0, 1.0), &far_goal(), RewardMode::Silent).unwrap();
        assert!(!rel.state.grasped);
        assert_eq!(rel.state.obj_pos[2], 0.025);
    }

    #[test]
    fn closing_far_from_object_does_not_grasp() {
        let task = TaskSpec::new(Variant::Pretrain);
        let s = placed(&task, [0.1, 0.1, 0.025]);
        let t = task.step(&s, &act(0.0, 0.0, 0.0, -0.3), &far_goal(), RewardMode::Silent).unwrap();
        assert!(!t.state.grasped);
        assert!((t.state.finger_width - 0.05).abs() < 1e-12);
    }

    #[test]
    fn push_moves_cube_without_penetration() {
        let task = TaskSpec::new(Variant::Push);
        let mut s = placed(&task, [0.05, 0.0, 0.025]);
        s.ee_pos = [-0.03, 0.0, 0.025];
        s.obj_rel_pos = sub(s.obj_pos, s.ee_pos);
        let before_gap = s.obj_pos[0] - s.ee_pos[0];
        assert!(before_gap >= PUSH_RADIUS + OBJECT_HALF - 1e-12);
        let mut x_prev = s.obj_pos[0];
        for _ in 0..4 {
            s = task.step(&s, &act(1.0, 0.0, 0.0, 1.0), &far_goal(), RewardMode::Silent).unwrap().state;
            let gap = (s.obj_pos[0] - s.ee_pos[0]).hypot(s.obj_pos[1] - s.ee_pos[1]);
            assert!(gap >= PUSH_RADIUS + OBJECT_HALF - 1e-9, "gap {gap}");
            assert!(s.obj_pos[0] >= x_prev);
            x_prev = s.obj_pos[0];
            assert_eq!(s.finger_width, 0.0);
        }
        assert!(s.obj_pos[0] > 0.05 + 0.1);
    }

    #[test]
    fn sphere_keeps_damped_velocity() {
        let task = TaskSpec::new(Variant::Sphere);
        let mut s = placed(&task, [0.0, 0.0, 0.025]);
        s.ee_pos = [-0.06, 0.0, 0.025];
        s.finger_width = 0.0;
        let s1 = task.step(&s, &act(1.0, 0.0, 0.0, 0.0), &far_goal(), RewardMode::Silent).unwrap().state;
        let v = s1.obj_vel[0];
        assert!(v > 0.0);
        let s2 = task.step(&s1, &Action::zero(), &far_goal(), RewardMode::Silent).unwrap().state;
        assert!((s2.obj_vel[0] - v * SPHERE_DAMPING).abs() < 1e-12);
        let cube_task = TaskSpec::new(Variant::Pretrain);
        let c1 = cube_task.step(&s, &act(1.0, 0.0, 0.0, 0.0), &far_goal(), RewardMode::Silent).unwrap().state;
        let c2 = cube_task.step(&c1, &Action::zero(), &far_goal(), RewardMode::Silent).unwrap().state;
        assert_eq!(c2.obj_pos, c1.obj_pos);
    }

    #[test]
    fn wall_blocks_gripper_and_carried_object() {
        let task = TaskSpec::new(Variant::Wall);
        let mut s = placed(&task, [-0.1, 0.0, 0.025]);
        s.ee_pos = [-0.1, 0.0, 0.05];
        for _ in 0..10 {
            s = task.step(&s, &act(1.0, 0.0, 0.0, 0.0), &far_goal(), RewardMode::Silent).unwrap().state;
            assert!(s.ee_pos[0] <= -0.005 - BODY_RADIUS + 1e-9);
        }
        // above the wall the gripper passes
        s.ee_pos[2] = 0.2;
        for _ in 0..4 {
            s = task.step(&s, &act(1.0, 0.0, 0.0, 0.0), &far_goal(), RewardMode::Silent).unwrap().state;
        }
        assert!(s.ee_pos[0] > 0.1);
    }

    #[test]
    fn non_finite_action_is_rejected() {
        let task = TaskSpec::new(Variant::Pretrain);
        let (s, g) = task.reset(&mut rng()).unwrap();
        assert!(task.step(&s, &act(f64::NAN, 0.0, 0.0, 0.0), &g, RewardMode::Silent).is_err());
    }

    #[test]
    fn horizon_ends_episode() {
        let task = TaskSpec::new(Variant::Pretrain);
        let (mut s, g) = task.reset(&mut rng()).unwrap();
        for i in 0..task.horizon {
            let t = task.step(&s, &act(0.3, -0.2, 0.1, 0.0), &g, RewardMode::Silent).unwrap();
            assert_eq!(t.done, i + 1 == task.horizon);
            s = t.state;
        }
    }

    #[test]
    fn observation_layouts() {
        let task = TaskSpec::new(Variant::Pretrain);
        let (s, g) = task.reset(&mut rng()).unwrap();
        let p = observe(&s, &g, View::PositionsOnly);
        assert_eq!(p.len(), 10);
        let pg = observe(&s, &g, View::PositionsAndGoal);
        assert_eq!(&pg[..10], &p[..]);
        assert_eq!(&pg[10..], &g.target_pos);
        let s2 = task.step(&s, &Action::zero(), &g, RewardMode::Silent).unwrap().state;
        let full = observe(&s2, &g, View::Privileged);
        assert_eq!(full.len(), 20);
        assert_eq!(*full.last().unwrap(), 1.0);
    }

    #[test]
    fn success_boundary_is_inclusive() {
        let ws = Workspace::cube35();
        let task = TaskSpec::new(Variant::Pretrain);
        let s = placed(&task, [0.0, 0.0, 0.025]);
        let at = |d: f64| Goal {
            target_pos: [d, 0.0, 0.025],
        };
        assert!(success(&s, &at(0.0), &ws));
        assert!(success(&s, &at(0.05), &ws));
        assert!(!success(&s, &at(0.051), &ws));
    }

    #[test]
    fn trajectory_csv_has_header_and_rows() {
        let row = TrajectoryRow {
            step: 0,
            ee: [0.0; 3],
            obj: [0.1, 0.2, 0.025],
            goal: [0.0, 0.0, 0.1],
            reward: 0.0,
            done: false,
        };
        let mut buf = Vec::new();
        write_trajectory_csv(&mut buf, &[row]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], TRAJECTORY_CSV_HEADER);
        assert_eq!(lines[1].split(',').count(), 12);
    }
}

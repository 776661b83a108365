//! Multi-story building made of planar parallelogram patches.

use crate::geometry::{HessePlane, Vec3};

use super::SimError;

/// Parallelogram `origin + a * edge_u + b * edge_v`, `a, b` in `[0, 1]`.
/// Patches have no thickness and are hit from either side.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Patch {
    pub origin: Vec3,
    pub edge_u: Vec3,
    pub edge_v: Vec3,
    normal: Vec3,
}

impl Patch {
    pub fn new(origin: Vec3, edge_u: Vec3, edge_v: Vec3) -> Self {
        let normal = edge_u.cross(&edge_v).normalize();
        Self { origin, edge_u, edge_v, normal }
    }

    /// Axis-aligned rectangle between two corners that share one coordinate.
    pub fn axis_rect(min: Vec3, max: Vec3) -> Self {
        let d = max - min;
        let (u, v) = if d.x == 0.0 {
            (Vec3::new(0.0, d.y, 0.0), Vec3::new(0.0, 0.0, d.z))
        } else if d.y == 0.0 {
            (Vec3::new(d.x, 0.0, 0.0), Vec3::new(0.0, 0.0, d.z))
        } else {
            (Vec3::new(d.x, 0.0, 0.0), Vec3::new(0.0, d.y, 0.0))
        };
        Self::new(min, u, v)
    }

    pub fn normal(&self) -> Vec3 {
        self.normal
    }

    pub fn plane(&self) -> HessePlane {
        HessePlane::from_point_normal(&self.origin, &self.normal).expect("patch normal is unit")
    }

    pub fn corners(&self) -> [Vec3; 4] {
        [self.origin, self.origin + self.edge_u, self.origin + self.edge_v, self.origin + self.edge_u + self.edge_v]
    }

    /// Ray parameter of the hit, if any, with `t` in `(t_min, t_max)`.
    pub fn intersect(&self, origin: &Vec3, dir: &Vec3, t_min: f64, t_max: f64) -> Option<f64> {
        let denom = dir.dot(&self.normal);
        if denom.abs() < 1e-12 {
            return None;
        }
        let t = (self.origin - origin).dot(&self.normal) / denom;
        if !(t > t_min && t < t_max) {
            return None;
        }
        let rel = origin + dir * t - self.origin;
        let uu = self.edge_u.norm_squared();
        let vv = self.edge_v.norm_squared();
        let uv = self.edge_u.dot(&self.edge_v);
        let ru = rel.dot(&self.edge_u);
        let rv = rel.dot(&self.edge_v);
        let det = uu * vv - uv * uv;
        let a = (ru * vv - rv * uv) / det;
        let b = (rv * uu - ru * uv) / det;
        let eps = 1e-12;
        if a < -eps || a > 1.0 + eps || b < -eps || b > 1.0 + eps {
            return None;
        }
        Some(t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BuildingSpec {
    pub stories: usize,
    pub story_height: f64,
    pub corridor_length: f64,
    pub corridor_width: f64,
    /// Adds a switchback stair shaft at the `x = corridor_length` end.
    pub stairwell: bool,
    /// Spacing of the door alcoves along the corridor walls (0 disables them).
    pub alcove_spacing: f64,
}

impl Default for BuildingSpec {
    fn default() -> Self {
        Self {
            stories: 3,
            story_height: 3.0,
            corridor_length: 16.0,
            corridor_width: 2.4,
            stairwell: true,
            alcove_spacing: 4.0,
        }
    }
}

pub const SHAFT_LENGTH: f64 = 6.0;
pub const SHAFT_HALF_WIDTH: f64 = 2.0;
pub const LANDING_DEPTH: f64 = 1.0;
const ALCOVE_WIDTH: f64 = 1.0;
const ALCOVE_DEPTH: f64 = 0.3;

#[derive(Clone, Debug)]
pub struct BuildingModel {
    pub spec: BuildingSpec,
    pub patches: Vec<Patch>,
}

impl BuildingModel {
    pub fn story_height(&self) -> f64 {
        self.spec.story_height
    }

    pub fn stories(&self) -> usize {
        self.spec.stories
    }
}

pub fn generate_building(spec: &BuildingSpec) -> Result<BuildingModel, SimError> {
    let s = spec;
    let valid = s.stories >= 1
        && s.story_height > 1.0
        && s.corridor_length > 2.0
        && s.corridor_width > 0.5
        && s.corridor_width < 2.0 * SHAFT_HALF_WIDTH
        && s.alcove_spacing >= 0.0
        && [s.story_height, s.corridor_length, s.corridor_width].iter().all(|v| v.is_finite());
    if !valid {
        return Err(SimError::InvalidSpec(format!("{spec:?}")));
    }
    let h = s.story_height;
    let l = s.corridor_length;
    let hw = s.corridor_width / 2.0;
    let outer = hw + ALCOVE_DEPTH;
    let top = s.stories as f64 * h;
    let mut patches = Vec::new();

    // alcove x-ranges, shared by both walls
    let mut alcoves = Vec::new();
    if s.alcove_spacing > 0.0 {
        let mut x = s.alcove_spacing;
        while x + ALCOVE_WIDTH < l - 1.0 {
            alcoves.push((x, x + ALCOVE_WIDTH));
            x += s.alcove_spacing;
        }
    }

    for k in 0..s.stories {
        let z0 = k as f64 * h;
        let z1 = z0 + h;
        // slabs between stories are shared: story k's ceiling is story k+1's floor
        patches.push(Patch::axis_rect(Vec3::new(0.0, -outer, z0), Vec3::new(l, outer, z0)));
        patches.push(Patch::axis_rect(Vec3::new(0.0, -hw, z0), Vec3::new(0.0, hw, z1)));
        for side in [-1.0, 1.0] {
            let y = side * hw;
            let mut x = 0.0;
            for (i, &(a, b)) in alcoves.iter().enumerate() {
                // alternate sides so the two walls differ
                let on_this_side = (i % 2 == 0) == (side > 0.0);
                if !on_this_side {
                    continue;
                }
                patches.push(Patch::axis_rect(Vec3::new(x, y, z0), Vec3::new(a, y, z1)));
                patches.push(Patch::axis_rect(Vec3::new(a, side * outer, z0), Vec3::new(b, side * outer, z1)));
                patches.push(Patch::axis_rect(
                    Vec3::new(a, y.min(side * outer), z0),
                    Vec3::new(a, y.max(side * outer), z1),
                ));
                patches.push(Patch::axis_rect(
                    Vec3::new(b, y.min(side * outer), z0),
                    Vec3::new(b, y.max(side * outer), z1),
                ));
                x = b;
            }
            patches.push(Patch::axis_rect(Vec3::new(x, y, z0), Vec3::new(l, y, z1)));
        }
        if s.stairwell {
            // shaft front wall pieces beside the corridor opening
            patches.push(Patch::axis_rect(Vec3::new(l, hw, z0), Vec3::new(l, SHAFT_HALF_WIDTH, z1)));
            patches.push(Patch::axis_rect(Vec3::new(l, -SHAFT_HALF_WIDTH, z0), Vec3::new(l, -hw, z1)));
            let xs = l + SHAFT_LENGTH;
            patches.push(Patch::axis_rect(Vec3::new(l, -SHAFT_HALF_WIDTH, z0), Vec3::new(xs, -SHAFT_HALF_WIDTH, z1)));
            patches.push(Patch::axis_rect(Vec3::new(l, SHAFT_HALF_WIDTH, z0), Vec3::new(xs, SHAFT_HALF_WIDTH, z1)));
            patches.push(Patch::axis_rect(Vec3::new(xs, -SHAFT_HALF_WIDTH, z0), Vec3::new(xs, SHAFT_HALF_WIDTH, z1)));
            // near landing at this story's floor level
            patches.push(Patch::axis_rect(
                Vec3::new(l, -SHAFT_HALF_WIDTH, z0),
                Vec3::new(l + LANDING_DEPTH, SHAFT_HALF_WIDTH, z0),
            ));
            if k == 0 {
                patches.push(Patch::axis_rect(
                    Vec3::new(l + LANDING_DEPTH, -SHAFT_HALF_WIDTH, z0),
                    Vec3::new(xs, SHAFT_HALF_WIDTH, z0),
                ));
            }
            if k + 1 < s.stories {
                let mid = z0 + h / 2.0;
                let ramp_start = l + LANDING_DEPTH;
                let ramp_end = xs - LANDING_DEPTH;
                // lane A climbs along +x on the y < 0 side
                patches.push(Patch::new(
                    Vec3::new(ramp_start, -SHAFT_HALF_WIDTH, z0),
                    Vec3::new(ramp_end - ramp_start, 0.0, mid - z0),
                    Vec3::new(0.0, SHAFT_HALF_WIDTH, 0.0),
                ));
                // far landing
                patches.push(Patch::axis_rect(
                    Vec3::new(ramp_end, -SHAFT_HALF_WIDTH, mid),
                    Vec3::new(xs, SHAFT_HALF_WIDTH, mid),
                ));
                // lane B climbs back along -x on the y > 0 side
                patches.push(Patch::new(
                    Vec3::new(ramp_end, 0.0, mid),
                    Vec3::new(ramp_start - ramp_end, 0.0, z1 - mid),
                    Vec3::new(0.0, SHAFT_HALF_WIDTH, 0.0),
                ));
            }
            // divider between the lanes
            patches
                .push(Patch::axis_rect(Vec3::new(l + LANDING_DEPTH, 0.0, z0), Vec3::new(xs - LANDING_DEPTH, 0.0, z1)));
        } else {
            patches.push(Patch::axis_rect(Vec3::new(l, -hw, z0), Vec3::new(l, hw, z1)));
        }
    }
    // roof over everything
    patches.push(Patch::axis_rect(Vec3::new(0.0, -outer, top), Vec3::new(l, outer, top)));
    if s.stairwell {
        patches.push(Patch::axis_rect(
            Vec3::new(l, -SHAFT_HALF_WIDTH, top),
            Vec3::new(l + SHAFT_LENGTH, SHAFT_HALF_WIDTH, top),
        ));
    }
    Ok(BuildingModel { spec: *spec, patches })
}

/// Bounding-volume hierarchy over patch bounding boxes.
#[derive(Clone, Debug)]
pub struct PatchBvh {
    nodes: Vec<BvhNode>,
    order: Vec<usize>,
}

#[derive(Clone, Copy, Debug)]
struct BvhNode {
    min: Vec3,
    max: Vec3,
    // leaf: patches order[start..start+count]; inner: children at left, left+1
    start: usize,
    count: usize,
    left: usize,
}

fn patch_bounds(p: &Patch) -> (Vec3, Vec3) {
    let c = p.corners();
    let mut min = c[0];
    let mut max = c[0];
    for x in &c[1..] {
        min = min.inf(x);
        max = max.sup(x);
    }
    (min, max)
}

impl PatchBvh {
    pub fn new(patches: &[Patch]) -> Self {
        let bounds: Vec<(Vec3, Vec3)> = patches.iter().map(patch_bounds).collect();
        let mut order: Vec<usize> = (0..patches.len()).collect();
        let mut nodes = Vec::new();
        Self::build(&bounds, &mut order, 0, patches.len(), &mut nodes);
        Self { nodes, order }
    }

    fn build(
        bounds: &[(Vec3, Vec3)],
        order: &mut [usize],
        start: usize,
        end: usize,
        nodes: &mut Vec<BvhNode>,
    ) -> usize {
        let mut min = Vec3::repeat(f64::INFINITY);
        let mut max = Vec3::repeat(f64::NEG_INFINITY);
        for &i in &order[start..end] {
            min = min.inf(&bounds[i].0);
            max = max.sup(&bounds[i].1);
        }
        let idx = nodes.len();
        nodes.push(BvhNode { min, max, start, count: end - start, left: 0 });
        if end - start <= 4 {
            return idx;
        }
        let extent = max - min;
        let axis = extent.imax();
        let centre = |i: usize| 0.5 * (bounds[i].0[axis] + bounds[i].1[axis]);
        order[start..end].sort_by(|&a, &b| centre(a).total_cmp(&centre(b)).then(a.cmp(&b)));
        let mid = (start + end) / 2;
        let left = Self::build(bounds, order, start, mid, nodes);
        let right = Self::build(bounds, order, mid, end, nodes);
        nodes[idx].count = 0;
        nodes[idx].left = left;
        nodes[idx].start = right;
        idx
    }

    fn slab(node: &BvhNode, origin: &Vec3, inv_dir: &Vec3, t_max: f64) -> bool {
        let mut t0: f64 = 0.0;
        let mut t1 = t_max;
        for a in 0..3 {
            let mut near = (node.min[a] - 1e-9 - origin[a]) * inv_dir[a];
            let mut far = (node.max[a] + 1e-9 - origin[a]) * inv_dir[a];
            if near.is_nan() || far.is_nan() {
                // ray parallel to the slab and starting on its boundary
                if origin[a] < node.min[a] - 1e-9 || origin[a] > node.max[a] + 1e-9 {
                    return false;
                }
                continue;
            }
            if near > far {
                std::mem::swap(&mut near, &mut far);
            }
            t0 = t0.max(near);
            t1 = t1.min(far);
            if t0 > t1 {
                return false;
            }
        }
        true
    }

    /// Nearest hit along the ray: (ray parameter, patch index).
    pub fn cast(&self, patches: &[Patch], origin: &Vec3, dir: &Vec3, t_min: f64, t_max: f64) -> Option<(f64, usize)> {
        let inv = Vec3::new(1.0 / dir.x, 1.0 / dir.y, 1.0 / dir.z);
        let mut best: Option<(f64, usize)> = None;
        let mut stack = vec![0usize];
        while let Some(n) = stack.pop() {
            let node = &self.nodes[n];
            let limit = best.map_or(t_max, |b| b.0);
            if !Self::slab(node, origin, &inv, limit) {
                continue;
            }
            if node.count > 0 {
                for &i in &self.order[node.start..node.start + node.count] {
                    if let Some(t) = patches[i].intersect(origin, dir, t_min, best.map_or(t_max, |b| b.0)) {
                        // ties go to the lower patch index for determinism
                        match best {
                            Some((bt, bi)) if t == bt && bi < i => {}
                            _ => best = Some((t, i)),
                        }
                    }
                }
            } else {
                stack.push(node.start);
                stack.push(node.left);
            }
        }
        best
    }
}

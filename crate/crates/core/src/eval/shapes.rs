//! Procedural furniture-like shapes built from voxel-aligned boxes and
//! cylinders. Every category is mirror-symmetric about the x mid-plane.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::voxelgrid::VoxelGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeCategory {
    Chair,
    Table,
    Lamp,
    Shelf,
    Sofa,
}

impl ShapeCategory {
    pub const ALL: [ShapeCategory; 5] = [
        ShapeCategory::Chair,
        ShapeCategory::Table,
        ShapeCategory::Lamp,
        ShapeCategory::Shelf,
        ShapeCategory::Sofa,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeCategory::Chair => "chair",
            ShapeCategory::Table => "table",
            ShapeCategory::Lamp => "lamp",
            ShapeCategory::Shelf => "shelf",
            ShapeCategory::Sofa => "sofa",
        }
    }
}

impl std::str::FromStr for ShapeCategory {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        ShapeCategory::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| invalid(format!("unknown shape category '{s}'")))
    }
}

impl std::fmt::Display for ShapeCategory {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Rasterizer working in unit-cube coordinates, y up.
struct Canvas {
    grid: VoxelGrid,
    n: usize,
    /// Thinnest part, in voxels.
    min_voxels: usize,
}

impl Canvas {
    fn new(n: usize) -> Self {
        Self {
            grid: VoxelGrid::empty(n),
            n,
            min_voxels: if n >= 64 { 3 } else { 2 },
        }
    }

    fn span(&self, lo: f64, hi: f64) -> (usize, usize) {
        let n = self.n as f64;
        let a = (lo.clamp(0.0, 1.0) * n).round() as usize;
        let mut b = (hi.clamp(0.0, 1.0) * n).round() as usize;
        if b < a + self.min_voxels {
            b = a + self.min_voxels;
        }
        if b > self.n {
            return (self.n - self.min_voxels, self.n);
        }
        (a, b)
    }

    /// x span of a box; boxes centered on x = 0.5 get an exactly centered span.
    fn x_span(&self, lo: f64, hi: f64) -> (usize, usize) {
        if (lo + hi - 1.0).abs() < 1e-9 && lo < 0.5 {
            let a = (lo.clamp(0.0, 1.0) * self.n as f64).round() as usize;
            let a = a.min((self.n - self.min_voxels) / 2);
            return (a, self.n - a);
        }
        self.span(lo, hi)
    }

    fn cuboid(&mut self, lo: [f64; 3], hi: [f64; 3]) {
        let xs = self.x_span(lo[0], hi[0]);
        self.fill(xs, lo, hi);
    }

    /// The box and its mirror image about x = 0.5, snapped identically.
    fn mirrored_pair(&mut self, lo: [f64; 3], hi: [f64; 3]) {
        let (x0, x1) = self.span(lo[0], hi[0]);
        self.fill((x0, x1), lo, hi);
        self.fill((self.n - x1, self.n - x0), lo, hi);
    }

    fn fill(&mut self, (x0, x1): (usize, usize), lo: [f64; 3], hi: [f64; 3]) {
        let (y0, y1) = self.span(lo[1], hi[1]);
        let (z0, z1) = self.span(lo[2], hi[2]);
        for x in x0..x1 {
            for y in y0..y1 {
                for z in z0..z1 {
                    self.grid.set(x, y, z, 1.0);
                }
            }
        }
    }

    /// Vertical cylinder with radius interpolated from `r0` at `y0` to `r1` at `y1`.
    fn cylinder(&mut self, cx: f64, cz: f64, r0: f64, r1: f64, y0: f64, y1: f64) {
        let n = self.n as f64;
        let (ya, yb) = self.span(y0, y1);
        let rmin = self.min_voxels as f64 / (2.0 * n) + 0.25 / n;
        for y in ya..yb {
            let t = if yb - ya > 1 { (y - ya) as f64 / (yb - ya - 1) as f64 } else { 0.0 };
            let r = (r0 + (r1 - r0) * t).max(rmin);
            for x in 0..self.n {
                for z in 0..self.n {
                    // integer offsets keep centered cylinders exactly symmetric
                    let dx = (2 * x as i64 + 1 - self.n as i64) as f64 / (2.0 * n) + (0.5 - cx);
                    let dz = (z as f64 + 0.5) / n - cz;
                    if dx * dx + dz * dz <= r * r {
                        self.grid.set(x, y, z, 1.0);
                    }
                }
            }
        }
    }
}

/// Box plus its mirror image about x = 0.5.
fn pair(c: &mut Canvas, lo: [f64; 3], hi: [f64; 3]) {
    c.mirrored_pair(lo, hi);
}

/// Deterministic shape of `category` at `size³` for `seed`.
pub fn generate_shape(category: ShapeCategory, size: usize, seed: u64) -> Result<VoxelGrid> {
    if size < 16 {
        return Err(invalid(format!("procedural shapes need size >= 16, got {size}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (category as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut c = Canvas::new(size);
    let r = &mut rng;
    match category {
        ShapeCategory::Chair => chair(&mut c, r),
        ShapeCategory::Table => table(&mut c, r),
        ShapeCategory::Lamp => lamp(&mut c, r),
        ShapeCategory::Shelf => shelf(&mut c, r),
        ShapeCategory::Sofa => sofa(&mut c, r),
    }
    Ok(c.grid)
}

fn chair(c: &mut Canvas, r: &mut ChaCha8Rng) {
    let w = r.gen_range(0.26..0.36);
    let d = r.gen_range(0.24..0.34);
    let seat_y = r.gen_range(0.36..0.48);
    let seat_t = r.gen_range(0.06..0.1);
    let leg = r.gen_range(0.06..0.1);
    let (x0, z0, z1) = (0.5 - w, 0.5 - d, 0.5 + d);
    c.cuboid([x0, seat_y, z0], [1.0 - x0, seat_y + seat_t, z1]);
    for z in [z0, z1 - leg] {
        pair(c, [x0, 0.06, z], [x0 + leg, seat_y, z + leg]);
    }
    let back_t = r.gen_range(0.06..0.09);
    let top = r.gen_range(0.82..0.94);
    if r.gen_bool(0.5) {
        c.cuboid([x0, seat_y, z1 - back_t], [1.0 - x0, top, z1]);
    } else {
        // posts with a top rail and slats
        pair(c, [x0, seat_y, z1 - back_t], [x0 + leg, top, z1]);
        c.cuboid([x0, top - 0.1, z1 - back_t], [1.0 - x0, top, z1]);
        let slats = r.gen_range(1..4);
        for i in 0..slats / 2 {
            let x = 0.5 - w + (i as f64 + 1.0) * 2.0 * w / (slats as f64 + 1.0) - 0.03;
            pair(c, [x, seat_y, z1 - back_t], [x + 0.06, top, z1]);
        }
        if slats % 2 == 1 {
            c.cuboid([0.47, seat_y, z1 - back_t], [0.53, top, z1]);
        }
    }
    if r.gen_bool(0.6) {
        let arm_y = seat_y + r.gen_range(0.16..0.24);
        pair(c, [x0, seat_y, z0 + 0.02], [x0 + leg, arm_y, z0 + 0.02 + leg]);
        pair(c, [x0, arm_y - 0.06, z0], [x0 + leg, arm_y, z1]);
    }
}

fn table(c: &mut Canvas, r: &mut ChaCha8Rng) {
    let w = r.gen_range(0.3..0.44);
    let d = r.gen_range(0.22..0.38);
    let top_y = r.gen_range(0.55..0.72);
    let top_t = r.gen_range(0.06..0.1);
    c.cuboid([0.5 - w, top_y, 0.5 - d], [0.5 + w, top_y + top_t, 0.5 + d]);
    if r.gen_bool(0.65) {
        let leg = r.gen_range(0.06..0.1);
        let inset = r.gen_range(0.0..0.06);
        for z in [0.5 - d + inset, 0.5 + d - inset - leg] {
            pair(c, [0.5 - w + inset, 0.05, z], [0.5 - w + inset + leg, top_y, z + leg]);
        }
        if r.gen_bool(0.5) {
            // stretchers between the legs
            let sy = r.gen_range(0.15..0.3);
            pair(c, [0.5 - w + inset, sy, 0.5 - d + inset], [0.5 - w + inset + leg, sy + 0.06, 0.5 + d - inset]);
        }
    } else {
        let rr = r.gen_range(0.05..0.08);
        c.cylinder(0.5, 0.5, rr, rr, 0.1, top_y);
        let base = r.gen_range(0.18..0.28);
        c.cylinder(0.5, 0.5, base, base, 0.04, 0.1);
    }
}

fn lamp(c: &mut Canvas, r: &mut ChaCha8Rng) {
    let base_r = r.gen_range(0.16..0.26);
    let base_h = r.gen_range(0.05..0.09);
    c.cylinder(0.5, 0.5, base_r, base_r, 0.04, 0.04 + base_h);
    let pole = r.gen_range(0.035..0.05);
    let shade_y = r.gen_range(0.55..0.7);
    c.cylinder(0.5, 0.5, pole, pole, 0.04 + base_h, shade_y);
    let bottom = r.gen_range(0.24..0.34);
    let top = r.gen_range(0.1..0.2);
    let top_y = r.gen_range(0.86..0.95);
    if r.gen_bool(0.5) {
        c.cylinder(0.5, 0.5, bottom, top, shade_y, top_y);
    } else {
        // open shade: a frustum shell
        let shell = Canvas::new(c.n);
        let mut outer = shell;
        outer.cylinder(0.5, 0.5, bottom, top, shade_y, top_y);
        let mut inner = Canvas::new(c.n);
        let t = 2.0 / c.n as f64;
        inner.cylinder(0.5, 0.5, bottom - t, top - t, shade_y, top_y);
        for (i, (&o, &v)) in outer.grid.values().iter().zip(inner.grid.values()).enumerate() {
            if o > 0.0 && v == 0.0 {
                c.grid.values_mut()[i] = 1.0;
            }
        }
    }
}

fn shelf(c: &mut Canvas, r: &mut ChaCha8Rng) {
    let w = r.gen_range(0.26..0.4);
    let d = r.gen_range(0.14..0.24);
    let h = r.gen_range(0.8..0.94);
    let t = r.gen_range(0.06..0.09);
    let (z0, z1) = (0.5 - d, 0.5 + d);
    pair(c, [0.5 - w, 0.04, z0], [0.5 - w + t, h, z1]);
    let boards = r.gen_range(3..6);
    for i in 0..boards {
        let y = 0.04 + (h - 0.04 - t) * i as f64 / (boards - 1) as f64;
        c.cuboid([0.5 - w, y, z0], [0.5 + w, y + t, z1]);
    }
    if r.gen_bool(0.5) {
        c.cuboid([0.5 - w, 0.04, z1 - t], [0.5 + w, h, z1]);
    }
}

fn sofa(c: &mut Canvas, r: &mut ChaCha8Rng) {
    let w = r.gen_range(0.34..0.46);
    let d = r.gen_range(0.2..0.3);
    let seat_y = r.gen_range(0.28..0.38);
    let feet = r.gen_range(0.06..0.1);
    c.cuboid([0.5 - w, feet, 0.5 - d], [0.5 + w, seat_y, 0.5 + d]);
    let back_t = r.gen_range(0.08..0.14);
    let back_top = r.gen_range(0.6..0.78);
    c.cuboid([0.5 - w, seat_y, 0.5 + d - back_t], [0.5 + w, back_top, 0.5 + d]);
    let arm_t = r.gen_range(0.06..0.12);
    let arm_top = seat_y + r.gen_range(0.1..0.2);
    pair(c, [0.5 - w, seat_y, 0.5 - d], [0.5 - w + arm_t, arm_top, 0.5 + d]);
    let foot = 0.07;
    for z in [0.5 - d, 0.5 + d - foot] {
        pair(c, [0.5 - w, 0.0, z], [0.5 - w + foot, feet, z + foot]);
    }
}

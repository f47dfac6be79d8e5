//! Planar object geometry and composite mass properties.
//!
//! Objects are unions of simple polygons with uniform area density plus one
//! attached point weight. All coordinates are in the body frame, in meters.
//! The T-block and hammer builders place the body origin at the center of the
//! bounding box with the stem along the +y ("vertical") axis, so the CoM
//! parameter the rest of the crate estimates is `com.y`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Vec2;

const MIN_AREA: f64 = 1e-12;

/// Mass of the metal weight attached to the T-block (kg).
pub const TBLOCK_WEIGHT_MASS: f64 = 0.143;
/// Weight placement for the top-weighted configuration (m above the geometric center).
pub const TBLOCK_WEIGHT_TOP_Y: f64 = 0.095;
/// Weight placement for the bottom-weighted configuration.
pub const TBLOCK_WEIGHT_BOTTOM_Y: f64 = -0.065;
/// CoM of the bare printed T-block.
pub const TBLOCK_BARE_COM_Y: f64 = 0.034;
/// Composite CoM the default T-block reproduces with the weight on top.
pub const TBLOCK_TOP_COM_Y: f64 = 0.061;
/// Reported composite CoM with the weight on the bottom. The default body
/// calibrated to the top configuration lands at about -0.98 cm instead.
pub const TBLOCK_BOTTOM_COM_Y_REPORTED: f64 = -0.007;
/// Hammer CoM along the handle axis.
pub const HAMMER_COM_Y: f64 = 0.089;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolygonPart {
    /// Counterclockwise vertices in the body frame.
    pub vertices: Vec<Vec2>,
    /// Area density in kg/m^2.
    pub density: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PointWeight {
    pub mass: f64,
    pub position: Vec2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidObjectSpec {
    pub name: String,
    pub parts: Vec<PolygonPart>,
    pub weight: PointWeight,
}

/// Mass, center of mass and polar moment of inertia about the CoM.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MassProperties {
    pub mass: f64,
    pub com: Vec2,
    pub inertia: f64,
}

impl MassProperties {
    /// Polar moment about an arbitrary point (parallel-axis theorem).
    pub fn inertia_about(&self, p: Vec2) -> f64 {
        self.inertia + self.mass * (p - self.com).norm_sq()
    }

    /// Combines bodies into one, summing inertia about the joint CoM.
    pub fn combine(items: &[MassProperties]) -> Result<MassProperties> {
        let mass: f64 = items.iter().map(|m| m.mass).sum();
        if !(mass > 0.0) {
            return Err(Error::DegenerateGeometry(format!(
                "total mass {mass} is not positive"
            )));
        }
        let mut com = Vec2::ZERO;
        for m in items {
            com += m.com * m.mass;
        }
        let com = com * (1.0 / mass);
        let inertia = items.iter().map(|m| m.inertia_about(com)).sum();
        Ok(MassProperties { mass, com, inertia })
    }
}

impl PolygonPart {
    pub fn new(vertices: Vec<Vec2>, density: f64) -> Self {
        PolygonPart { vertices, density }
    }

    /// Axis-aligned rectangle `[x0, x1] x [y0, y1]`, counterclockwise.
    pub fn rect(x0: f64, y0: f64, x1: f64, y1: f64, density: f64) -> Self {
        PolygonPart::new(
            vec![
                Vec2::new(x0, y0),
                Vec2::new(x1, y0),
                Vec2::new(x1, y1),
                Vec2::new(x0, y1),
            ],
            density,
        )
    }

    pub fn signed_area(&self) -> f64 {
        let n = self.vertices.len();
        if n < 3 {
            return 0.0;
        }
        let p0 = self.vertices[0];
        let mut twice = 0.0;
        for i in 1..n - 1 {
            twice += (self.vertices[i] - p0).cross(self.vertices[i + 1] - p0);
        }
        0.5 * twice
    }

    pub fn is_convex(&self) -> bool {
        let n = self.vertices.len();
        (0..n).all(|i| {
            let a = self.vertices[i];
            let b = self.vertices[(i + 1) % n];
            let c = self.vertices[(i + 2) % n];
            (b - a).cross(c - b) >= 0.0
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.vertices.len() < 3 {
            return Err(Error::InvalidGeometry(format!(
                "polygon has {} vertices, need at least 3",
                self.vertices.len()
            )));
        }
        if self.vertices.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidGeometry("non-finite vertex".into()));
        }
        if !(self.density > 0.0 && self.density.is_finite()) {
            return Err(Error::InvalidGeometry(format!(
                "area density {} must be positive",
                self.density
            )));
        }
        if !is_simple(&self.vertices) {
            return Err(Error::InvalidGeometry("polygon self-intersects".into()));
        }
        let area = self.signed_area();
        if area <= MIN_AREA {
            return Err(Error::DegenerateGeometry(format!(
                "signed area {area:e} m^2 (vertices must be counterclockwise)"
            )));
        }
        Ok(())
    }

    pub fn translated(&self, d: Vec2) -> PolygonPart {
        PolygonPart::new(self.vertices.iter().map(|&v| v + d).collect(), self.density)
    }

    pub fn rotated(&self, angle: f64) -> PolygonPart {
        let (s, c) = angle.sin_cos();
        PolygonPart::new(
            self.vertices.iter().map(|v| v.rotate_sc(s, c)).collect(),
            self.density,
        )
    }
}

fn segments_intersect(a: Vec2, b: Vec2, c: Vec2, d: Vec2) -> bool {
    let d1 = (b - a).cross(c - a);
    let d2 = (b - a).cross(d - a);
    let d3 = (d - c).cross(a - c);
    let d4 = (d - c).cross(b - c);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    let on_seg = |p: Vec2, q: Vec2, r: Vec2| {
        r.x >= p.x.min(q.x) && r.x <= p.x.max(q.x) && r.y >= p.y.min(q.y) && r.y <= p.y.max(q.y)
    };
    (d1 == 0.0 && on_seg(a, b, c))
        || (d2 == 0.0 && on_seg(a, b, d))
        || (d3 == 0.0 && on_seg(c, d, a))
        || (d4 == 0.0 && on_seg(c, d, b))
}

fn is_simple(vertices: &[Vec2]) -> bool {
    let n = vertices.len();
    for i in 0..n {
        let (a, b) = (vertices[i], vertices[(i + 1) % n]);
        for j in i + 1..n {
            // adjacent edges share a vertex by construction
            if j == i + 1 || (i == 0 && j == n - 1) {
                continue;
            }
            let (c, d) = (vertices[j], vertices[(j + 1) % n]);
            if segments_intersect(a, b, c, d) {
                return false;
            }
        }
    }
    true
}

/// Mass, area centroid and polar second moment about the centroid of one
/// uniform-density polygon.
pub fn polygon_mass_properties(part: &PolygonPart) -> Result<MassProperties> {
    let n = part.vertices.len();
    if n < 3 {
        return Err(Error::DegenerateGeometry(format!("{n} vertices")));
    }
    // Work relative to the first vertex to limit cancellation for polygons
    // far from the origin.
    let origin = part.vertices[0];
    let mut twice_area = 0.0;
    let mut c_acc = Vec2::ZERO;
    let mut j_acc = 0.0;
    for i in 0..n {
        let p = part.vertices[i] - origin;
        let q = part.vertices[(i + 1) % n] - origin;
        let cr = p.cross(q);
        twice_area += cr;
        c_acc += (p + q) * cr;
        j_acc += cr * (p.norm_sq() + p.dot(q) + q.norm_sq());
    }
    let area = 0.5 * twice_area;
    if area <= MIN_AREA {
        return Err(Error::DegenerateGeometry(format!(
            "polygon area {area:e} m^2"
        )));
    }
    let centroid_local = c_acc * (1.0 / (6.0 * area));
    let polar_about_origin = j_acc / 12.0;
    let polar_about_centroid = polar_about_origin - area * centroid_local.norm_sq();
    Ok(MassProperties {
        mass: part.density * area,
        com: centroid_local + origin,
        inertia: part.density * polar_about_centroid,
    })
}

/// Composite properties of all parts plus the point weight.
pub fn composite_mass_properties(spec: &RigidObjectSpec) -> Result<MassProperties> {
    let mut items = Vec::with_capacity(spec.parts.len() + 1);
    for part in &spec.parts {
        items.push(polygon_mass_properties(part)?);
    }
    if spec.weight.mass > 0.0 {
        items.push(MassProperties {
            mass: spec.weight.mass,
            com: spec.weight.position,
            inertia: 0.0,
        });
    }
    MassProperties::combine(&items)
}

impl RigidObjectSpec {
    pub fn validate(&self) -> Result<()> {
        if self.parts.is_empty() {
            return Err(Error::InvalidGeometry(format!("object '{}' has no parts", self.name)));
        }
        for part in &self.parts {
            part.validate()?;
        }
        if !(self.weight.mass >= 0.0) || !self.weight.position.is_finite() {
            return Err(Error::InvalidGeometry(format!(
                "point weight mass {} must be non-negative",
                self.weight.mass
            )));
        }
        Ok(())
    }

    pub fn mass_properties(&self) -> Result<MassProperties> {
        composite_mass_properties(self)
    }

    /// Mass properties of the parts alone, ignoring the point weight.
    pub fn body_mass_properties(&self) -> Result<MassProperties> {
        let items = self
            .parts
            .iter()
            .map(polygon_mass_properties)
            .collect::<Result<Vec<_>>>()?;
        MassProperties::combine(&items)
    }

    /// Copy of this spec with the point weight moved along the vertical axis
    /// so the composite CoM sits at `com_y`.
    pub fn with_com_y(&self, com_y: f64) -> Result<RigidObjectSpec> {
        if !(self.weight.mass > 0.0) {
            return Err(Error::InvalidGeometry(
                "cannot move the CoM of a weightless object".into(),
            ));
        }
        let body = self.body_mass_properties()?;
        let total = body.mass + self.weight.mass;
        let y = (com_y * total - body.com.y * body.mass) / self.weight.mass;
        let mut out = self.clone();
        // keeping the weight on the body's own CoM line leaves com.x unchanged
        out.weight.position = Vec2::new(body.com.x, y);
        Ok(out)
    }

    pub fn rotated(&self, angle: f64) -> RigidObjectSpec {
        RigidObjectSpec {
            name: self.name.clone(),
            parts: self.parts.iter().map(|p| p.rotated(angle)).collect(),
            weight: PointWeight {
                mass: self.weight.mass,
                position: self.weight.position.rotate(angle),
            },
        }
    }

    /// Largest distance from the body origin to any part vertex.
    pub fn bounding_radius(&self) -> f64 {
        self.parts
            .iter()
            .flat_map(|p| p.vertices.iter())
            .map(|v| v.norm())
            .fold(0.0, f64::max)
    }

    pub fn from_json(text: &str) -> Result<RigidObjectSpec> {
        let spec: RigidObjectSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("object spec serializes")
    }
}

/// Stem-plus-crossbar shape shared by the T-block and the hammer. The stem
/// runs along +y with the crossbar on top; the origin is the bounding-box center.
fn stem_and_bar(
    stem_len: f64,
    stem_w: f64,
    bar_len: f64,
    bar_h: f64,
    stem_density: f64,
    bar_density: f64,
) -> Result<[PolygonPart; 2]> {
    for (name, v) in [
        ("stem length", stem_len),
        ("stem width", stem_w),
        ("bar length", bar_len),
        ("bar height", bar_h),
    ] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::InvalidGeometry(format!("{name} must be positive, got {v}")));
        }
    }
    if bar_len < stem_w {
        return Err(Error::InvalidGeometry(format!(
            "bar length {bar_len} is narrower than stem width {stem_w}"
        )));
    }
    let half_h = 0.5 * (stem_len + bar_h);
    let y_joint = stem_len - half_h;
    let stem = PolygonPart::rect(-0.5 * stem_w, -half_h, 0.5 * stem_w, y_joint, stem_density);
    let bar = PolygonPart::rect(-0.5 * bar_len, y_joint, 0.5 * bar_len, half_h, bar_density);
    Ok([stem, bar])
}

/// Solves for the per-part densities of a stem+bar shape with a given bare
/// mass and vertical CoM.
fn calibrate_densities(
    stem_len: f64,
    stem_w: f64,
    bar_len: f64,
    bar_h: f64,
    mass: f64,
    com_y: f64,
) -> (f64, f64) {
    let half_h = 0.5 * (stem_len + bar_h);
    let stem_area = stem_len * stem_w;
    let bar_area = bar_len * bar_h;
    let stem_c = 0.5 * stem_len - half_h;
    let bar_c = stem_len + 0.5 * bar_h - half_h;
    let bar_density = mass * (com_y - stem_c) / (bar_area * (bar_c - stem_c));
    let stem_density = (mass - bar_density * bar_area) / stem_area;
    (stem_density, bar_density)
}

/// T-block dimensions. Thickness is folded into the area densities.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TBlockDims {
    pub stem_len: f64,
    pub stem_w: f64,
    pub bar_len: f64,
    pub bar_h: f64,
    pub stem_density: f64,
    pub bar_density: f64,
}

impl TBlockDims {
    /// Bare body mass that puts the composite CoM at [`TBLOCK_TOP_COM_Y`]
    /// with the weight at [`TBLOCK_WEIGHT_TOP_Y`] and a bare CoM of
    /// [`TBLOCK_BARE_COM_Y`].
    pub fn calibrated_bare_mass() -> f64 {
        TBLOCK_WEIGHT_MASS * (TBLOCK_WEIGHT_TOP_Y - TBLOCK_TOP_COM_Y)
            / (TBLOCK_TOP_COM_Y - TBLOCK_BARE_COM_Y)
    }
}

impl Default for TBlockDims {
    /// Stem 20 x 4 cm, crossbar 16 x 5 cm, densities calibrated to the bare
    /// CoM and bare mass.
    fn default() -> Self {
        let (stem_len, stem_w, bar_len, bar_h) = (0.20, 0.04, 0.16, 0.05);
        let (stem_density, bar_density) = calibrate_densities(
            stem_len,
            stem_w,
            bar_len,
            bar_h,
            TBlockDims::calibrated_bare_mass(),
            TBLOCK_BARE_COM_Y,
        );
        TBlockDims {
            stem_len,
            stem_w,
            bar_len,
            bar_h,
            stem_density,
            bar_density,
        }
    }
}

pub fn make_tblock(dims: &TBlockDims, weight: PointWeight) -> Result<RigidObjectSpec> {
    let parts = stem_and_bar(
        dims.stem_len,
        dims.stem_w,
        dims.bar_len,
        dims.bar_h,
        dims.stem_density,
        dims.bar_density,
    )?;
    let spec = RigidObjectSpec {
        name: "tblock".into(),
        parts: parts.to_vec(),
        weight,
    };
    spec.validate()?;
    Ok(spec)
}

/// Default T-block with the 143 g weight at vertical offset `weight_y`.
pub fn tblock_with_weight_at(weight_y: f64) -> Result<RigidObjectSpec> {
    make_tblock(
        &TBlockDims::default(),
        PointWeight {
            mass: TBLOCK_WEIGHT_MASS,
            position: Vec2::new(0.0, weight_y),
        },
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HammerDims {
    pub head_len: f64,
    pub head_h: f64,
    pub handle_len: f64,
    pub handle_w: f64,
    pub head_density: f64,
    pub handle_density: f64,
}

impl Default for HammerDims {
    /// 30 x 3 cm handle under a 12 x 4 cm head, about 0.5 kg, with the head
    /// density solved so the CoM sits at [`HAMMER_COM_Y`].
    fn default() -> Self {
        let (head_len, head_h, handle_len, handle_w) = (0.12, 0.04, 0.30, 0.03);
        let handle_density = 20.0;
        let half_h = 0.5 * (handle_len + head_h);
        let handle_area = handle_len * handle_w;
        let head_area = head_len * head_h;
        let handle_c = 0.5 * handle_len - half_h;
        let head_c = handle_len + 0.5 * head_h - half_h;
        let head_density = handle_density * handle_area * (HAMMER_COM_Y - handle_c)
            / (head_area * (head_c - HAMMER_COM_Y));
        HammerDims {
            head_len,
            head_h,
            handle_len,
            handle_w,
            head_density,
            handle_density,
        }
    }
}

/// Weightless two-rectangle hammer: handle along +y, head on top.
pub fn make_hammer(dims: &HammerDims) -> Result<RigidObjectSpec> {
    let parts = stem_and_bar(
        dims.handle_len,
        dims.handle_w,
        dims.head_len,
        dims.head_h,
        dims.handle_density,
        dims.head_density,
    )?;
    let spec = RigidObjectSpec {
        name: "hammer".into(),
        parts: parts.to_vec(),
        weight: PointWeight::default(),
    };
    spec.validate()?;
    Ok(spec)
}

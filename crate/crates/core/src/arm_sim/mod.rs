//! Planar 3-link arm, orthographic camera and binary skin.
//!
//! Produces the synchronized proprioceptive, visual and tactile readings the
//! forward models are trained on.

mod dataset;

pub use dataset::{acquire_dataset, acquire_with_rng, Dataset, DatasetMeta, Sample};

use nalgebra::{Vector2, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Workspace point [m].
pub type Point = Vector2<f64>;
/// Image coordinate (u, v) [px].
pub type Pixel = Vector2<f64>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Camera {
    pub center_px: [f64; 2],
    /// Isotropic scale [px/m].
    pub scale: f64,
    pub image_size: [u32; 2],
}

impl Default for Camera {
    fn default() -> Self {
        Camera {
            center_px: [320.0, 240.0],
            scale: 300.0,
            image_size: [640, 480],
        }
    }
}

impl Camera {
    /// Orthographic projection; `None` when the point lands outside the image.
    pub fn project(&self, point: &Point) -> Option<Pixel> {
        let px = self.project_unbounded(point);
        self.contains(&px).then_some(px)
    }

    /// Projection without the in-frame check.
    pub fn project_unbounded(&self, point: &Point) -> Pixel {
        Pixel::new(
            self.center_px[0] + self.scale * point.x,
            self.center_px[1] - self.scale * point.y,
        )
    }

    pub fn unproject(&self, px: &Pixel) -> Point {
        Point::new(
            (px.x - self.center_px[0]) / self.scale,
            (self.center_px[1] - px.y) / self.scale,
        )
    }

    /// Converts a pixel displacement to a workspace displacement.
    pub fn pixel_offset_to_world(&self, offset: &Pixel) -> Point {
        Point::new(offset.x / self.scale, -offset.y / self.scale)
    }

    pub fn contains(&self, px: &Pixel) -> bool {
        let (w, h) = (self.image_size[0] as f64, self.image_size[1] as f64);
        px.x.is_finite()
            && px.y.is_finite()
            && (0.0..=w).contains(&px.x)
            && (0.0..=h).contains(&px.y)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmConfig {
    /// [m]
    pub link_lengths: [f64; 3],
    /// Per-joint `[lower, upper]` [rad].
    pub joint_limits: [[f64; 2]; 3],
    /// [rad]
    pub sigma_proprio: f64,
    /// [px]
    pub sigma_visual: f64,
    pub camera: Camera,
    /// Taxel offsets along link 3, strictly increasing in `[0, 1]`.
    pub taxel_layout: Vec<f64>,
    /// [m]
    pub contact_radius: f64,
}

impl Default for ArmConfig {
    fn default() -> Self {
        ArmConfig {
            link_lengths: [0.30, 0.25, 0.15],
            joint_limits: [[-2.5, 2.5]; 3],
            sigma_proprio: 0.005,
            sigma_visual: 1.0,
            camera: Camera::default(),
            taxel_layout: equally_spaced_taxels(8),
            contact_radius: 0.03,
        }
    }
}

/// `count` offsets spread evenly over `[0, 1]`.
pub fn equally_spaced_taxels(count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![0.5],
        _ => (0..count).map(|i| i as f64 / (count - 1) as f64).collect(),
    }
}

impl ArmConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self
            .link_lengths
            .iter()
            .any(|&l| !(l > 0.0 && l.is_finite()))
        {
            return bad(format!(
                "link lengths must be positive, got {:?}",
                self.link_lengths
            ));
        }
        for (j, [lo, hi]) in self.joint_limits.iter().enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return bad(format!(
                    "joint {j} limits [{lo}, {hi}] are not a non-empty interval"
                ));
            }
        }
        if !(self.sigma_proprio >= 0.0 && self.sigma_visual >= 0.0) {
            return bad("noise standard deviations must be non-negative".into());
        }
        if !(self.camera.scale > 0.0) {
            return bad("camera scale must be positive".into());
        }
        if self.camera.image_size.contains(&0) {
            return bad("image size must be non-zero".into());
        }
        if self.taxel_layout.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return bad("taxel offsets must lie in [0, 1]".into());
        }
        if self.taxel_layout.windows(2).any(|w| w[0] >= w[1]) {
            return bad("taxel offsets must be strictly increasing".into());
        }
        if !(self.contact_radius >= 0.0 && self.contact_radius.is_finite()) {
            return bad("contact radius must be non-negative".into());
        }
        Ok(())
    }

    pub fn taxel_count(&self) -> usize {
        self.taxel_layout.len()
    }

    pub fn reach(&self) -> f64 {
        self.link_lengths.iter().sum()
    }

    /// Centre of the joint-limit box.
    pub fn nominal(&self) -> JointState {
        JointState(Vector3::from_fn(|j, _| {
            0.5 * (self.joint_limits[j][0] + self.joint_limits[j][1])
        }))
    }

    pub fn check_limits(&self, theta: &JointState) -> Result<()> {
        for (j, &a) in theta.0.iter().enumerate() {
            let [lo, hi] = self.joint_limits[j];
            if !(a >= lo && a <= hi) {
                return Err(Error::JointLimit {
                    joint: j,
                    angle: a,
                    lower: lo,
                    upper: hi,
                });
            }
        }
        Ok(())
    }
}

/// Joint angles [rad].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointState(pub Vector3<f64>);

impl JointState {
    pub fn new(a: f64, b: f64, c: f64) -> Self {
        JointState(Vector3::new(a, b, c))
    }
}

/// The external ("other") object that can touch the skin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OtherObject {
    pub position: [f64; 2],
}

impl OtherObject {
    pub fn new(x: f64, y: f64) -> Self {
        OtherObject { position: [x, y] }
    }

    pub fn point(&self) -> Point {
        Point::new(self.position[0], self.position[1])
    }
}

/// One synchronized multimodal reading.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorSnapshot {
    pub proprio: Vector3<f64>,
    pub visual_self: Option<Pixel>,
    pub visual_other: Option<Pixel>,
    /// 1.0 where a taxel reports contact (raw 255), 0.0 otherwise.
    pub tactile: Vec<f64>,
    pub timestamp: u64,
}

/// Chain positions for arbitrary angles, no limit check.
///
/// Entry 0 is the base, entry 3 the end-effector.
pub fn chain_positions(theta: &Vector3<f64>, links: &[f64; 3]) -> [Point; 4] {
    let mut out = [Point::zeros(); 4];
    let mut phi = 0.0;
    for k in 0..3 {
        phi += theta[k];
        out[k + 1] = out[k] + links[k] * Point::new(phi.cos(), phi.sin());
    }
    out
}

pub fn forward_kinematics(theta: &JointState, config: &ArmConfig) -> Result<[Point; 4]> {
    config.check_limits(theta)?;
    Ok(chain_positions(&theta.0, &config.link_lengths))
}

pub fn end_effector(theta: &Vector3<f64>, config: &ArmConfig) -> Point {
    chain_positions(theta, &config.link_lengths)[3]
}

pub fn project_to_pixels(point: &Point, config: &ArmConfig) -> Option<Pixel> {
    config.camera.project(point)
}

/// Workspace positions of the taxels, interpolated along link 3.
pub fn taxel_positions(theta: &Vector3<f64>, config: &ArmConfig) -> Vec<Point> {
    let chain = chain_positions(theta, &config.link_lengths);
    let (elbow, tip) = (chain[2], chain[3]);
    config
        .taxel_layout
        .iter()
        .map(|&s| elbow + s * (tip - elbow))
        .collect()
}

/// Binary contact pattern: taxels within `contact_radius` of `other`.
pub fn contacts_at(taxels: &[Point], other: &OtherObject, radius: f64) -> Vec<f64> {
    let o = other.point();
    taxels
        .iter()
        .map(|p| if (p - o).norm() <= radius { 1.0 } else { 0.0 })
        .collect()
}

pub fn tactile_contact(
    theta: &JointState,
    other: &OtherObject,
    config: &ArmConfig,
) -> Result<Vec<f64>> {
    config.check_limits(theta)?;
    Ok(contacts_at(
        &taxel_positions(&theta.0, config),
        other,
        config.contact_radius,
    ))
}

/// Noisy reading of the arm at `theta`. Tactile is noiseless.
pub fn synthesize_snapshot<R: Rng + ?Sized>(
    theta: &JointState,
    other: Option<&OtherObject>,
    config: &ArmConfig,
    timestamp: u64,
    rng: &mut R,
) -> Result<SensorSnapshot> {
    let chain = forward_kinematics(theta, config)?;

    let mut proprio = theta.0;
    for a in proprio.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *a += config.sigma_proprio * z;
    }

    let zu: f64 = rng.sample(StandardNormal);
    let zv: f64 = rng.sample(StandardNormal);
    let visual_self = config.camera.project(&chain[3]).and_then(|px| {
        let noisy = px + config.sigma_visual * Pixel::new(zu, zv);
        config.camera.contains(&noisy).then_some(noisy)
    });

    let visual_other = other.and_then(|o| config.camera.project(&o.point()));
    let tactile = match other {
        Some(o) => contacts_at(&taxel_positions(&theta.0, config), o, config.contact_radius),
        None => vec![0.0; config.taxel_count()],
    };

    Ok(SensorSnapshot {
        proprio,
        visual_self,
        visual_other,
        tactile,
        timestamp,
    })
}

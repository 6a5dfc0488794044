#![allow(dead_code)]

use idcol::detector::ContactPair;
use idcol::se3::{rotation_exp, Pose};
use idcol::shapes::{
    ShapeModel, SmoothMaxParams, SmoothPolytopeSpec, SuperellipsoidSpec, SuperellipticCylinderSpec,
    TruncatedConeSpec, DEFAULT_BETA, DEFAULT_EXPONENT, DEFAULT_REG_EPS,
};
use nalgebra::{Matrix3, Vector3};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

pub fn rng(seed: u64) -> StdRng {
    StdRng::seed_from_u64(seed)
}

pub fn smax() -> SmoothMaxParams {
    SmoothMaxParams::new(DEFAULT_BETA).unwrap()
}

pub fn cuboid() -> ShapeModel {
    SmoothPolytopeSpec::cuboid([0.6, 0.4, 0.3], smax()).unwrap().into()
}

pub fn cone() -> ShapeModel {
    TruncatedConeSpec::new(0.5, 0.25, 0.4, 0.6, smax()).unwrap().into()
}

pub fn superellipsoid() -> ShapeModel {
    SuperellipsoidSpec::new([0.5, 0.4, 0.3], DEFAULT_EXPONENT, DEFAULT_REG_EPS)
        .unwrap()
        .into()
}

pub fn cylinder() -> ShapeModel {
    SuperellipticCylinderSpec::new(0.35, 0.6, DEFAULT_EXPONENT, DEFAULT_REG_EPS)
        .unwrap()
        .into()
}

pub fn sphere(radius: f64) -> ShapeModel {
    SuperellipsoidSpec::sphere(radius).unwrap().into()
}

pub fn families() -> Vec<(&'static str, ShapeModel)> {
    vec![
        ("cuboid", cuboid()),
        ("cone", cone()),
        ("superellipsoid", superellipsoid()),
        ("cylinder", cylinder()),
    ]
}

/// The ten unordered pairs of the four families, self-pairs included.
pub fn family_pairs() -> Vec<(String, ContactPair)> {
    let f = families();
    let mut out = Vec::new();
    for i in 0..f.len() {
        for j in i..f.len() {
            let name = format!("{}-{}", f[i].0, f[j].0);
            out.push((name, ContactPair::new(f[i].1.clone(), f[j].1.clone()).unwrap()));
        }
    }
    out
}

pub fn unit_vector(rng: &mut impl Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 0.1 && n <= 1.0 {
            return v / n;
        }
    }
}

pub fn random_rotation(rng: &mut impl Rng) -> Matrix3<f64> {
    let axis = unit_vector(rng);
    rotation_exp(&(axis * rng.random_range(0.0..std::f64::consts::PI)))
}

/// Random relative pose with the origin distance drawn between
/// `lo` and `hi` times the sum of the outer radii.
pub fn random_pose(rng: &mut impl Rng, pair: &ContactPair, lo: f64, hi: f64) -> Pose {
    let reach = pair.radii1().r_out + pair.radii2().r_out;
    let d = rng.random_range(lo..hi) * reach;
    Pose::new(random_rotation(rng), unit_vector(rng) * d).unwrap()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

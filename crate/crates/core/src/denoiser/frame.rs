//! Invariant point features and the equivariant canonical frame.

use serde::{Deserialize, Serialize};

use crate::diffusion::Observation;
use crate::error::{Error, Result};
use crate::se3::{Mat3, SE3Pose, Vec3};

const DEGENERATE_TOL: f64 = 1e-8;

/// Radial basis layout for the distance-to-center features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub bins: usize,
    pub radius_max: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            bins: 16,
            radius_max: 0.25,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bins < 2 || !(self.radius_max > 0.0 && self.radius_max.is_finite()) {
            return Err(Error::BadParameter(format!("bad feature config {self:?}")));
        }
        Ok(())
    }

    fn width(&self) -> f64 {
        self.radius_max / (self.bins - 1) as f64
    }

    /// Gaussian bumps centered on an even grid over `[0, radius_max]`. Soft
    /// assignment keeps the pooled histogram continuous in the point positions.
    pub fn radial_basis(&self, r: f64) -> Vec<f64> {
        let w = self.width();
        (0..self.bins)
            .map(|j| {
                let d = (r - j as f64 * w) / w;
                (-0.5 * d * d).exp()
            })
            .collect()
    }

    /// Per-point scalar channels: the radial basis followed by RGB.
    pub fn point_feature_len(&self) -> usize {
        self.bins + 3
    }

    /// Pooled cloud descriptor: mean radial histogram plus mean `r`, `r²`, `r³`.
    pub fn cloud_feature_len(&self) -> usize {
        self.bins + 3
    }
}

/// Per-point type-0 scalars and type-1 vectors, both relative to the mass center.
#[derive(Clone, Debug)]
pub struct FeatureBundle {
    pub center: Vec3,
    pub radii: Vec<f64>,
    pub type0: Vec<Vec<f64>>,
    pub type1: Vec<Vec<Vec3>>,
}

impl FeatureBundle {
    pub fn from_observation(obs: &Observation, cfg: &FeatureConfig) -> Self {
        let center = obs.centroid();
        let mut radii = Vec::with_capacity(obs.len());
        let mut type0 = Vec::with_capacity(obs.len());
        let mut type1 = Vec::with_capacity(obs.len());
        for (p, c) in obs.points().iter().zip(obs.colors()) {
            let d = p - center;
            let r = d.norm();
            let mut f = cfg.radial_basis(r);
            f.extend_from_slice(c.as_slice());
            radii.push(r);
            type0.push(f);
            type1.push(vec![d]);
        }
        Self {
            center,
            radii,
            type0,
            type1,
        }
    }

    pub fn len(&self) -> usize {
        self.radii.len()
    }

    pub fn is_empty(&self) -> bool {
        self.radii.is_empty()
    }

    /// Mean-pooled invariant descriptor of the whole cloud.
    pub fn pooled(&self, cfg: &FeatureConfig) -> Vec<f64> {
        let n = self.len() as f64;
        let mut out = vec![0.0; cfg.cloud_feature_len()];
        for (f, r) in self.type0.iter().zip(&self.radii) {
            for (o, v) in out.iter_mut().zip(&f[..cfg.bins]) {
                *o += v / n;
            }
            out[cfg.bins] += r / n;
            out[cfg.bins + 1] += r * r / n;
            out[cfg.bins + 2] += r * r * r / n;
        }
        out
    }
}

/// Mixing weights turning per-point type-0 channels into the two anchor weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameSpec {
    pub anchor_weights: [Vec<f64>; 2],
}

impl FrameSpec {
    /// A rising radial ramp plus red for the first anchor, a falling ramp plus green for the second.
    pub fn radial_profile(cfg: &FeatureConfig) -> Self {
        let b = cfg.bins;
        let ramp = |j: usize| j as f64 / (b - 1) as f64;
        let mut first: Vec<f64> = (0..b).map(ramp).collect();
        first.extend_from_slice(&[1.0, 0.0, 0.0]);
        let mut second: Vec<f64> = (0..b).map(|j| 1.0 - ramp(j)).collect();
        second.extend_from_slice(&[0.0, 1.0, 0.0]);
        Self {
            anchor_weights: [first, second],
        }
    }

    pub fn validate(&self, cfg: &FeatureConfig) -> Result<()> {
        for w in &self.anchor_weights {
            if w.len() != cfg.point_feature_len() {
                return Err(Error::BadParameter(format!(
                    "anchor weights have {} entries, features have {}",
                    w.len(),
                    cfg.point_feature_len()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CanonicalFrame {
    pub origin: Vec3,
    pub axes: Mat3,
}

impl CanonicalFrame {
    pub fn as_pose(&self) -> SE3Pose {
        SE3Pose::from_parts_unchecked(self.axes, self.origin)
    }
}

pub fn compute_frame(obs: &Observation, spec: &FrameSpec, cfg: &FeatureConfig) -> Result<CanonicalFrame> {
    frame_from_bundle(&FeatureBundle::from_observation(obs, cfg), spec)
}

pub fn frame_from_bundle(bundle: &FeatureBundle, spec: &FrameSpec) -> Result<CanonicalFrame> {
    let n = bundle.len() as f64;
    let mut anchors = [Vec3::zeros(); 2];
    for (f, v) in bundle.type0.iter().zip(&bundle.type1) {
        for (anchor, w) in anchors.iter_mut().zip(&spec.anchor_weights) {
            let weight: f64 = f.iter().zip(w).map(|(a, b)| a * b).sum();
            *anchor += v[0] * (weight / n);
        }
    }
    let axes = gram_schmidt(&anchors[0], &anchors[1])?;
    Ok(CanonicalFrame {
        origin: bundle.center,
        axes,
    })
}

/// Orthonormal right-handed basis with first column along `a` and second in span(a, b).
pub fn gram_schmidt(a: &Vec3, b: &Vec3) -> Result<Mat3> {
    let na = a.norm();
    if !(na >= DEGENERATE_TOL) {
        return Err(Error::DegenerateFrame(format!("first anchor norm {na:e}")));
    }
    let e1 = a / na;
    let b_perp = b - e1 * e1.dot(b);
    let nb = b_perp.norm();
    if !(nb >= DEGENERATE_TOL) {
        return Err(Error::DegenerateFrame(format!("second anchor residual norm {nb:e}")));
    }
    let e2 = b_perp / nb;
    Ok(Mat3::from_columns(&[e1, e2, e1.cross(&e2)]))
}

/// Pulls a gradient on the Gram–Schmidt output back to its two input vectors.
pub fn gram_schmidt_backward(a: &Vec3, b: &Vec3, r: &Mat3, grad: &Mat3) -> (Vec3, Vec3) {
    let e1 = r.column(0).into_owned();
    let e2 = r.column(1).into_owned();
    let mut g1 = grad.column(0).into_owned();
    let mut g2 = grad.column(1).into_owned();
    let g3 = grad.column(2).into_owned();
    // e3 = e1 × e2
    g1 += e2.cross(&g3);
    g2 += g3.cross(&e1);

    let na = a.norm();
    let b_perp = b - e1 * e1.dot(b);
    let nb = b_perp.norm();

    // e2 = b⊥/|b⊥|, b⊥ = b − e1 (e1·b)
    let g_bperp = (g2 - e2 * e2.dot(&g2)) / nb;
    let gb = g_bperp - e1 * e1.dot(&g_bperp);
    g1 -= g_bperp * e1.dot(b) + b * e1.dot(&g_bperp);

    // e1 = a/|a|
    let ga = (g1 - e1 * e1.dot(&g1)) / na;
    (ga, gb)
}

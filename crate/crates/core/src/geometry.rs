//! Physical layout of the simulated downlink: transmitter position, RIS
//! panel, receiver grid and the per-location feature vectors derived
//! from them.
//!
//! Elements of an `n1 x n2` panel are indexed `p * n2 + q`, where `p`
//! steps along `axis1` and `q` along `axis2`. The codebook, the channel
//! array response and the feature tensors all use this same ordering.

use std::ops::{Add, Mul, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Speed of light in vacuum, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

pub const SCENARIO_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn dot(self, other: Self) -> f64 {
        self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn cross(self, other: Self) -> Self {
        Self::new(
            self.y * other.z - self.z * other.y,
            self.z * other.x - self.x * other.z,
            self.x * other.y - self.y * other.x,
        )
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn distance(self, other: Self) -> f64 {
        (self - other).norm()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

impl Add for Point3 {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Point3 {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Point3 {
    type Output = Self;
    fn mul(self, s: f64) -> Self {
        Self::new(self.x * s, self.y * s, self.z * s)
    }
}

/// Uniform planar array of passive reflecting elements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RisPanel {
    pub center_m: Point3,
    pub n1: usize,
    pub n2: usize,
    /// Element pitch in wavelengths.
    #[serde(default = "default_spacing")]
    pub spacing_wavelengths: f64,
    pub axis1: Point3,
    pub axis2: Point3,
}

fn default_spacing() -> f64 {
    0.5
}

impl RisPanel {
    /// Panel in the plane spanned by `axis1`/`axis2` with half-wavelength pitch.
    pub fn new(center_m: Point3, n1: usize, n2: usize, axis1: Point3, axis2: Point3) -> Self {
        Self {
            center_m,
            n1,
            n2,
            spacing_wavelengths: default_spacing(),
            axis1,
            axis2,
        }
    }

    pub fn num_elements(&self) -> usize {
        self.n1 * self.n2
    }

    /// Unit normal `axis1 x axis2`; broadside direction of the panel.
    pub fn normal(&self) -> Point3 {
        self.axis1.cross(self.axis2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n1 == 0 || self.n2 == 0 {
            return Err(Error::Geometry(format!(
                "RIS element counts must be positive, got {}x{}",
                self.n1, self.n2
            )));
        }
        if !(self.spacing_wavelengths > 0.0 && self.spacing_wavelengths.is_finite()) {
            return Err(Error::Geometry(format!(
                "RIS spacing must be positive, got {}",
                self.spacing_wavelengths
            )));
        }
        if !self.center_m.is_finite() {
            return Err(Error::Geometry("RIS center is not finite".into()));
        }
        const TOL: f64 = 1e-9;
        let (a, b) = (self.axis1, self.axis2);
        if (a.norm() - 1.0).abs() > TOL || (b.norm() - 1.0).abs() > TOL || a.dot(b).abs() > TOL {
            return Err(Error::Geometry("RIS axes must be orthonormal".into()));
        }
        Ok(())
    }
}

/// Element positions in index order `p * n2 + q`, centred on the panel centre.
pub fn element_positions(panel: &RisPanel, wavelength_m: f64) -> Vec<Point3> {
    let pitch = panel.spacing_wavelengths * wavelength_m;
    let off1 = (panel.n1 as f64 - 1.0) / 2.0;
    let off2 = (panel.n2 as f64 - 1.0) / 2.0;
    let mut out = Vec::with_capacity(panel.num_elements());
    for p in 0..panel.n1 {
        for q in 0..panel.n2 {
            let u = (p as f64 - off1) * pitch;
            let v = (q as f64 - off2) * pitch;
            out.push(panel.center_m + panel.axis1 * u + panel.axis2 * v);
        }
    }
    out
}

/// Rectangular receiver grid at constant height. Row `r`, column `c` sits at
/// `origin + (c * pitch, r * pitch, 0)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RxGrid {
    pub origin_m: Point3,
    pub rows: usize,
    pub cols: usize,
    pub pitch_m: f64,
}

impl RxGrid {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    /// Distance from the receiver to every element.
    #[default]
    PerElement,
    /// Distance to the panel centre, replicated once per element.
    PanelCenter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema_version: u32,
    pub tx_m: Point3,
    pub ris: RisPanel,
    pub rx_grid: RxGrid,
    pub carrier_freq_hz: f64,
    pub bandwidth_hz: f64,
    pub num_subcarriers: usize,
    /// Transmit power over noise power, linear.
    pub snr_budget_linear: f64,
    #[serde(default)]
    pub feature_mode: FeatureMode,
    pub seed: u64,
}

impl Scenario {
    pub fn wavelength_m(&self) -> f64 {
        SPEED_OF_LIGHT / self.carrier_freq_hz
    }

    /// Sampling period `1 / bandwidth`.
    pub fn sample_period_s(&self) -> f64 {
        1.0 / self.bandwidth_hz
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCENARIO_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported scenario schema_version {} (expected {SCENARIO_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.ris.validate()?;
        if !self.tx_m.is_finite() || !self.rx_grid.origin_m.is_finite() {
            return Err(Error::Geometry("non-finite coordinates".into()));
        }
        if self.rx_grid.is_empty() {
            return Err(Error::Geometry("receiver grid is empty".into()));
        }
        if !(self.rx_grid.pitch_m > 0.0) {
            return Err(Error::Geometry(
                "receiver grid pitch must be positive".into(),
            ));
        }
        if self.num_subcarriers == 0 {
            return Err(Error::Config("num_subcarriers must be >= 1".into()));
        }
        if !(self.carrier_freq_hz > 0.0) || !(self.bandwidth_hz > 0.0) {
            return Err(Error::Config(
                "carrier_freq_hz and bandwidth_hz must be positive".into(),
            ));
        }
        if !(self.snr_budget_linear > 0.0) {
            return Err(Error::Config("snr_budget_linear must be positive".into()));
        }
        Ok(())
    }
}

/// Receiver positions in row-major order.
pub fn rx_grid_points(scenario: &Scenario) -> Vec<Point3> {
    let g = &scenario.rx_grid;
    let mut out = Vec::with_capacity(g.len());
    for r in 0..g.rows {
        for c in 0..g.cols {
            out.push(g.origin_m + Point3::new(c as f64 * g.pitch_m, r as f64 * g.pitch_m, 0.0));
        }
    }
    out
}

/// Location attributes fed to the surrogate: planar coordinates plus one
/// distance per RIS element.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocationFeatures {
    pub x: f64,
    pub y: f64,
    pub distances: Vec<f64>,
}

pub fn location_features(
    rx: Point3,
    panel: &RisPanel,
    wavelength_m: f64,
    mode: FeatureMode,
) -> Result<LocationFeatures> {
    let distances = match mode {
        FeatureMode::PerElement => element_positions(panel, wavelength_m)
            .into_iter()
            .map(|e| rx.distance(e))
            .collect::<Vec<_>>(),
        FeatureMode::PanelCenter => vec![rx.distance(panel.center_m); panel.num_elements()],
    };
    if let Some(n) = distances.iter().position(|&d| !(d > 0.0)) {
        return Err(Error::Geometry(format!(
            "receiver at ({}, {}, {}) coincides with RIS element {n}",
            rx.x, rx.y, rx.z
        )));
    }
    Ok(LocationFeatures {
        x: rx.x,
        y: rx.y,
        distances,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const X: Point3 = Point3::new(1.0, 0.0, 0.0);
    const Y: Point3 = Point3::new(0.0, 1.0, 0.0);
    const Z: Point3 = Point3::new(0.0, 0.0, 1.0);

    fn scenario(rows: usize, cols: usize, pitch: f64) -> Scenario {
        Scenario {
            schema_version: SCENARIO_SCHEMA_VERSION,
            tx_m: Point3::new(5.0, 0.0, 2.0),
            ris: RisPanel::new(Point3::default(), 2, 2, Y, Z),
            rx_grid: RxGrid {
                origin_m: Point3::new(1.0, 1.0, 0.0),
                rows,
                cols,
                pitch_m: pitch,
            },
            carrier_freq_hz: 28e9,
            bandwidth_hz: 100e6,
            num_subcarriers: 16,
            snr_budget_linear: 1.0,
            feature_mode: FeatureMode::PerElement,
            seed: 0,
        }
    }

    #[test]
    fn single_element_is_center() {
        let c = Point3::new(1.0, 2.0, 3.0);
        let panel = RisPanel::new(c, 1, 1, X, Y);
        assert_eq!(element_positions(&panel, 1.0), vec![c]);
    }

    #[test]
    fn two_element_pair() {
        let panel = RisPanel::new(Point3::default(), 2, 1, X, Y);
        let pts = element_positions(&panel, 1.0);
        assert_eq!(
            pts,
            vec![Point3::new(-0.25, 0.0, 0.0), Point3::new(0.25, 0.0, 0.0)]
        );
    }

    #[test]
    fn sixteen_by_sixteen_min_distance() {
        let lambda = 0.0107;
        let panel = RisPanel::new(Point3::default(), 16, 16, Y, Z);
        let pts = element_positions(&panel, lambda);
        assert_eq!(pts.len(), 256);
        let mut min = f64::INFINITY;
        for i in 0..pts.len() {
            for j in i + 1..pts.len() {
                min = min.min(pts[i].distance(pts[j]));
            }
        }
        assert!((min - 0.5 * lambda).abs() < 1e-12);
    }

    #[test]
    fn centroid_matches_center_up_to_32x32() {
        let lambda = 0.3;
        let center = Point3::new(3.0, -7.0, 2.5);
        let a1 = Point3::new(0.6, 0.8, 0.0);
        let a2 = Point3::new(0.0, 0.0, 1.0);
        for n1 in [1, 2, 3, 7, 16, 32] {
            for n2 in [1, 4, 5, 32] {
                let panel = RisPanel::new(center, n1, n2, a1, a2);
                let pts = element_positions(&panel, lambda);
                let sum = pts.iter().fold(Point3::default(), |acc, &p| acc + p);
                let centroid = sum * (1.0 / pts.len() as f64);
                assert!(centroid.distance(center) < 1e-9 * lambda, "{n1}x{n2}");
            }
        }
    }

    #[test]
    fn adjacent_elements_one_pitch_apart() {
        let panel = RisPanel::new(Point3::default(), 3, 4, Y, Z);
        let pts = element_positions(&panel, 2.0);
        // axis2 neighbours are consecutive, axis1 neighbours are n2 apart
        assert!((pts[0].distance(pts[1]) - 1.0).abs() < 1e-12);
        assert!((pts[0].distance(pts[4]) - 1.0).abs() < 1e-12);
        assert!((pts[4].y - pts[0].y - 1.0).abs() < 1e-12);
    }

    #[test]
    fn grid_points() {
        let s = scenario(1, 1, 0.2);
        assert_eq!(rx_grid_points(&s), vec![s.rx_grid.origin_m]);

        let s = scenario(2, 2, 0.2);
        let pts = rx_grid_points(&s);
        assert_eq!(pts.len(), 4);
        let o = s.rx_grid.origin_m;
        assert!((pts[1] - o - Point3::new(0.2, 0.0, 0.0)).norm() < 1e-15);
        assert!((pts[2] - o - Point3::new(0.0, 0.2, 0.0)).norm() < 1e-15);
        assert!((pts[3] - o - Point3::new(0.2, 0.2, 0.0)).norm() < 1e-15);

        let s = scenario(300, 181, 0.2);
        assert_eq!(rx_grid_points(&s).len(), 54_300);
    }

    #[test]
    fn features_single_element() {
        let c = Point3::new(2.0, 1.0, 0.0);
        let panel = RisPanel::new(c, 1, 1, Y, Z);
        let f = location_features(c + X, &panel, 1.0, FeatureMode::PerElement).unwrap();
        assert_eq!(f.distances, vec![1.0]);
        assert_eq!((f.x, f.y), (3.0, 1.0));
    }

    #[test]
    fn features_two_element() {
        let panel = RisPanel::new(Point3::default(), 2, 1, X, Y);
        let f = location_features(
            Point3::new(0.0, 1.0, 0.0),
            &panel,
            1.0,
            FeatureMode::PerElement,
        )
        .unwrap();
        let want = 1.0625_f64.sqrt();
        assert_eq!(f.distances.len(), 2);
        for d in f.distances {
            assert!((d - want).abs() < 1e-15);
        }
    }

    #[test]
    fn features_panel_center_replicates() {
        let panel = RisPanel::new(Point3::default(), 4, 4, Y, Z);
        let rx = Point3::new(3.0, 1.0, -1.0);
        let f = location_features(rx, &panel, 0.01, FeatureMode::PanelCenter).unwrap();
        assert_eq!(f.distances.len(), 16);
        assert!(f.distances.iter().all(|&d| d == rx.norm()));
    }

    #[test]
    fn features_reject_coincident_receiver() {
        let panel = RisPanel::new(Point3::default(), 2, 1, X, Y);
        let err = location_features(
            Point3::new(0.25, 0.0, 0.0),
            &panel,
            1.0,
            FeatureMode::PerElement,
        );
        assert!(matches!(err, Err(Error::Geometry(_))));
    }

    #[test]
    fn validation() {
        let mut s = scenario(2, 2, 0.1);
        assert!(s.validate().is_ok());
        s.ris.axis2 = Point3::new(0.0, 1.0, 1.0);
        assert!(s.validate().is_err());
        let mut s = scenario(2, 2, 0.1);
        s.num_subcarriers = 0;
        assert!(s.validate().is_err());
        let mut s = scenario(0, 2, 0.1);
        assert!(s.validate().is_err());
        s = scenario(1, 1, 0.1);
        s.snr_budget_linear = 0.0;
        assert!(s.validate().is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn distances_follow_element_permutation(
                n1 in 1usize..6, n2 in 1usize..6,
                rx in (-5.0f64..5.0, -5.0f64..5.0, 0.5f64..5.0),
                seed in any::<u64>(),
            ) {
                use rand::seq::SliceRandom;
                use rand::SeedableRng;
                let panel = RisPanel::new(Point3::default(), n1, n2, X, Y);
                let rx = Point3::new(rx.0, rx.1, rx.2);
                let f = location_features(rx, &panel, 0.1, FeatureMode::PerElement).unwrap();
                let elems = element_positions(&panel, 0.1);
                let mut perm: Vec<usize> = (0..elems.len()).collect();
                perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
                for (slot, &src) in perm.iter().enumerate() {
                    let d = rx.distance(elems[src]);
                    prop_assert_eq!(d, f.distances[perm[slot]]);
                }
            }
        }
    }
}

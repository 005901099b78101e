//! Wideband geometric channel synthesis for the Tx->RIS and RIS->Rx links.
//!
//! Each link is a sum of `M` rays: the line-of-sight ray plus `M - 1`
//! single-bounce rays via the nearest scatterers of a seeded
//! [`ScattererField`]. Rays are turned into `D` delay taps with a
//! band-limited pulse and then into `K` subcarrier responses with a DFT.

use std::f64::consts::{PI, TAU};

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binio::{LeReader, LeWriter};
use crate::error::{Error, Result};
use crate::geometry::{Point3, RisPanel, Scenario, SPEED_OF_LIGHT};
use crate::hash::Hash32;

/// Dense row-major complex matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CMatrix {
    rows: usize,
    cols: usize,
    data: Vec<Complex64>,
}

impl CMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![Complex64::new(0.0, 0.0); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<Complex64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimMismatch {
                context: "matrix data",
                expected: rows * cols,
                actual: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[Complex64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [Complex64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data
            .iter()
            .all(|z| z.re.is_finite() && z.im.is_finite())
    }
}

/// `D x N` delay-domain taps.
pub type DelayChannel = CMatrix;

/// `K x N` subcarrier responses, one row per subcarrier.
pub type FreqChannel = CMatrix;

/// A propagation ray as seen from the RIS.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayCluster {
    pub azimuth_rad: f64,
    /// Angle from the panel normal; zero is broadside.
    pub elevation_rad: f64,
    pub gain: Complex64,
    pub delay_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PulseKind {
    /// Normalized sinc, ideal band-limited signalling.
    #[default]
    Sinc,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelParams {
    pub clusters_per_link: usize,
    pub delay_taps: usize,
    pub sample_period_s: f64,
    /// Linear link path loss `L`.
    pub path_loss: f64,
    pub pulse: PulseKind,
}

impl ChannelParams {
    pub fn validate(&self) -> Result<()> {
        if self.clusters_per_link == 0 || self.delay_taps == 0 {
            return Err(Error::Config(
                "clusters_per_link and delay_taps must be >= 1".into(),
            ));
        }
        if !(self.sample_period_s > 0.0) || !(self.path_loss > 0.0) {
            return Err(Error::Config(
                "sample period and path loss must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Channel block of a run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelConfig {
    /// Rays per link, line of sight included.
    #[serde(default = "defaults::clusters")]
    pub clusters_per_link: usize,
    /// Delay taps `D`; defaults to the subcarrier count.
    #[serde(default)]
    pub delay_taps: Option<usize>,
    #[serde(default = "defaults::scatterers")]
    pub num_scatterers: usize,
    #[serde(default = "defaults::coeff_min")]
    pub reflection_coeff_min: f64,
    #[serde(default = "defaults::coeff_max")]
    pub reflection_coeff_max: f64,
    /// Margin added around the scene bounding box when placing scatterers, m.
    #[serde(default = "defaults::margin")]
    pub scatterer_margin_m: f64,
    #[serde(default)]
    pub pulse: PulseKind,
    /// Keep only the first `n` subcarriers when computing rates.
    #[serde(default)]
    pub subcarrier_limit: Option<usize>,
}

mod defaults {
    pub fn clusters() -> usize {
        5
    }
    pub fn scatterers() -> usize {
        32
    }
    pub fn coeff_min() -> f64 {
        0.2
    }
    pub fn coeff_max() -> f64 {
        0.8
    }
    pub fn margin() -> f64 {
        1.0
    }
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self {
            clusters_per_link: defaults::clusters(),
            delay_taps: None,
            num_scatterers: defaults::scatterers(),
            reflection_coeff_min: defaults::coeff_min(),
            reflection_coeff_max: defaults::coeff_max(),
            scatterer_margin_m: defaults::margin(),
            pulse: PulseKind::Sinc,
            subcarrier_limit: None,
        }
    }
}

impl ChannelConfig {
    pub fn delay_taps_for(&self, num_subcarriers: usize) -> usize {
        self.delay_taps.unwrap_or(num_subcarriers)
    }

    /// Subcarriers actually evaluated.
    pub fn active_subcarriers(&self, num_subcarriers: usize) -> usize {
        self.subcarrier_limit
            .map_or(num_subcarriers, |l| l.min(num_subcarriers))
    }

    pub fn validate(&self, scenario: &Scenario) -> Result<()> {
        let k = scenario.num_subcarriers;
        let d = self.delay_taps_for(k);
        if self.clusters_per_link == 0 {
            return Err(Error::Config(
                "channel.clusters_per_link must be >= 1".into(),
            ));
        }
        if d == 0 || d > k {
            return Err(Error::Config(format!(
                "channel.delay_taps must be in 1..={k}, got {d}"
            )));
        }
        if self.clusters_per_link - 1 > self.num_scatterers {
            return Err(Error::NotEnoughScatterers {
                needed: self.clusters_per_link - 1,
                available: self.num_scatterers,
            });
        }
        let (lo, hi) = (self.reflection_coeff_min, self.reflection_coeff_max);
        if !(0.0 <= lo && lo <= hi && hi.is_finite()) {
            return Err(Error::Config(format!(
                "channel reflection coefficient range [{lo}, {hi}] is invalid"
            )));
        }
        if self.subcarrier_limit == Some(0) {
            return Err(Error::Config(
                "channel.subcarrier_limit must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scatterer {
    pub position: Point3,
    pub coefficient: Complex64,
}

/// Fixed set of point scatterers drawn once per scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct ScattererField {
    pub scatterers: Vec<Scatterer>,
}

impl ScattererField {
    /// Scatterers uniform in the bounding box of transmitter, RIS and
    /// receiver grid (grown by the configured margin), each with a
    /// reflection coefficient of uniform magnitude and uniform phase.
    pub fn generate(scenario: &Scenario, cfg: &ChannelConfig) -> Self {
        let g = &scenario.rx_grid;
        let far_corner = g.origin_m
            + Point3::new(
                g.cols.saturating_sub(1) as f64 * g.pitch_m,
                g.rows.saturating_sub(1) as f64 * g.pitch_m,
                0.0,
            );
        let pts = [scenario.tx_m, scenario.ris.center_m, g.origin_m, far_corner];
        let lo = pts
            .iter()
            .fold(Point3::new(f64::MAX, f64::MAX, f64::MAX), |a, p| {
                Point3::new(a.x.min(p.x), a.y.min(p.y), a.z.min(p.z))
            });
        let hi = pts
            .iter()
            .fold(Point3::new(f64::MIN, f64::MIN, f64::MIN), |a, p| {
                Point3::new(a.x.max(p.x), a.y.max(p.y), a.z.max(p.z))
            });
        let m = cfg.scatterer_margin_m;
        let (lo, hi) = (lo - Point3::new(m, m, m), hi + Point3::new(m, m, m));

        let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
        let mut uniform = |a: f64, b: f64| if b > a { rng.gen_range(a..b) } else { a };
        let scatterers = (0..cfg.num_scatterers)
            .map(|_| {
                let position = Point3::new(
                    uniform(lo.x, hi.x),
                    uniform(lo.y, hi.y),
                    uniform(lo.z, hi.z),
                );
                let mag = uniform(cfg.reflection_coeff_min, cfg.reflection_coeff_max);
                let phase = uniform(0.0, TAU);
                Scatterer {
                    position,
                    coefficient: Complex64::from_polar(mag, phase),
                }
            })
            .collect();
        Self { scatterers }
    }
}

/// Steering vector of the panel towards (azimuth, elevation), indexed `p * n2 + q`.
pub fn array_response(azimuth_rad: f64, elevation_rad: f64, panel: &RisPanel) -> Vec<Complex64> {
    let s = elevation_rad.sin();
    let u1 = s * azimuth_rad.cos();
    let u2 = s * azimuth_rad.sin();
    let k = TAU * panel.spacing_wavelengths;
    let mut out = Vec::with_capacity(panel.num_elements());
    for p in 0..panel.n1 {
        for q in 0..panel.n2 {
            let phase = k * (p as f64 * u1 + q as f64 * u2);
            out.push(Complex64::from_polar(1.0, phase));
        }
    }
    out
}

pub fn pulse(tau_s: f64, sample_period_s: f64) -> f64 {
    let r = tau_s / sample_period_s;
    if r == 0.0 {
        1.0
    } else if (r - r.round()).abs() <= 1e-12 * r.abs().max(1.0) {
        // exact zeros at nonzero integer multiples; sin(k*pi) is only ~1e-16
        0.0
    } else {
        let x = PI * r;
        x.sin() / x
    }
}

fn shaping(kind: PulseKind, tau_s: f64, ts: f64) -> f64 {
    match kind {
        PulseKind::Sinc => pulse(tau_s, ts),
    }
}

/// Delay-domain taps: row `d` is `sqrt(N / L) * sum_m g_m p(d Ts - tau_m) a(theta_m, phi_m)`.
pub fn delay_channel(
    clusters: &[RayCluster],
    params: &ChannelParams,
    panel: &RisPanel,
) -> Result<DelayChannel> {
    if clusters.is_empty() {
        return Err(Error::Config(
            "delay_channel needs at least one cluster".into(),
        ));
    }
    params.validate()?;
    let n = panel.num_elements();
    let scale = (n as f64 / params.path_loss).sqrt();
    let mut h = CMatrix::zeros(params.delay_taps, n);
    for c in clusters {
        let a = array_response(c.azimuth_rad, c.elevation_rad, panel);
        for d in 0..params.delay_taps {
            let p = shaping(
                params.pulse,
                d as f64 * params.sample_period_s - c.delay_s,
                params.sample_period_s,
            );
            if p == 0.0 {
                continue;
            }
            let w = c.gain * (scale * p);
            for (h, a) in h.row_mut(d).iter_mut().zip(&a) {
                *h += w * a;
            }
        }
    }
    Ok(h)
}

/// `K`-point DFT of the delay taps along the tap axis, keeping the first
/// `rows` subcarriers.
pub fn freq_channel_rows(delay: &DelayChannel, k: usize, rows: usize) -> Result<FreqChannel> {
    if delay.rows() > k {
        return Err(Error::DimMismatch {
            context: "delay taps vs subcarriers",
            expected: k,
            actual: delay.rows(),
        });
    }
    let rows = rows.min(k);
    let twiddle: Vec<Complex64> = (0..k)
        .map(|i| Complex64::from_polar(1.0, -TAU * i as f64 / k as f64))
        .collect();
    let mut out = CMatrix::zeros(rows, delay.cols());
    for kk in 0..rows {
        let row = out.row_mut(kk);
        for d in 0..delay.rows() {
            let w = twiddle[(kk * d) % k];
            for (o, h) in row.iter_mut().zip(delay.row(d)) {
                *o += h * w;
            }
        }
    }
    Ok(out)
}

pub fn freq_channel(delay: &DelayChannel, k: usize) -> Result<FreqChannel> {
    freq_channel_rows(delay, k, k)
}

/// Friis free-space path loss `(4 pi r / lambda)^2`, linear.
pub fn free_space_path_loss(distance_m: f64, wavelength_m: f64) -> f64 {
    (4.0 * PI * distance_m / wavelength_m).powi(2)
}

/// Azimuth in `[0, 2pi)` and angle from the panel normal in `[0, pi]` of
/// `direction` expressed in the panel frame.
pub fn panel_angles(panel: &RisPanel, direction: Point3) -> (f64, f64) {
    let u1 = direction.dot(panel.axis1);
    let u2 = direction.dot(panel.axis2);
    let u3 = direction.dot(panel.normal());
    let elevation = (u1 * u1 + u2 * u2).sqrt().atan2(u3);
    let azimuth = u2.atan2(u1).rem_euclid(TAU);
    // rem_euclid can round up to exactly TAU
    let azimuth = if azimuth >= TAU { 0.0 } else { azimuth };
    (azimuth, elevation)
}

/// Rays between the RIS centre and `endpoint`.
///
/// The first ray is line of sight. The remaining `clusters - 1` rays bounce
/// off the scatterers with the smallest excess path length. Gains are
/// relative to the line-of-sight free-space amplitude, which is carried by
/// [`free_space_path_loss`] as the link path loss.
pub fn clusters_for_link(
    panel: &RisPanel,
    endpoint: Point3,
    field: &ScattererField,
    clusters: usize,
    wavelength_m: f64,
) -> Result<Vec<RayCluster>> {
    let extra = clusters.saturating_sub(1);
    if extra > field.scatterers.len() {
        return Err(Error::NotEnoughScatterers {
            needed: extra,
            available: field.scatterers.len(),
        });
    }
    let origin = panel.center_m;
    let los = origin.distance(endpoint);
    if !(los > 0.0) {
        return Err(Error::Geometry(
            "link endpoint coincides with the RIS centre".into(),
        ));
    }
    let ray = |towards: Point3, length: f64, amplitude: Complex64| {
        let dir = towards - origin;
        let norm = dir.norm();
        let dir = if norm > 0.0 {
            dir * (1.0 / norm)
        } else {
            panel.normal()
        };
        let (azimuth_rad, elevation_rad) = panel_angles(panel, dir);
        RayCluster {
            azimuth_rad,
            elevation_rad,
            gain: amplitude * Complex64::from_polar(1.0, -TAU * length / wavelength_m),
            delay_s: length / SPEED_OF_LIGHT,
        }
    };

    let mut out = Vec::with_capacity(clusters);
    out.push(ray(endpoint, los, Complex64::new(1.0, 0.0)));
    if extra > 0 {
        let mut by_length: Vec<(f64, usize)> = field
            .scatterers
            .iter()
            .enumerate()
            .map(|(i, s)| {
                (
                    origin.distance(s.position) + s.position.distance(endpoint),
                    i,
                )
            })
            .collect();
        by_length.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(length, i) in &by_length[..extra] {
            let s = &field.scatterers[i];
            out.push(ray(s.position, length, s.coefficient * (los / length)));
        }
    }
    Ok(out)
}

/// Synthesizes the frequency channel between the RIS and `endpoint`.
pub struct LinkSynthesizer<'a> {
    pub scenario: &'a Scenario,
    pub config: &'a ChannelConfig,
    pub field: &'a ScattererField,
}

impl LinkSynthesizer<'_> {
    pub fn clusters(&self, endpoint: Point3) -> Result<Vec<RayCluster>> {
        clusters_for_link(
            &self.scenario.ris,
            endpoint,
            self.field,
            self.config.clusters_per_link,
            self.scenario.wavelength_m(),
        )
    }

    pub fn params(&self, endpoint: Point3) -> ChannelParams {
        let s = self.scenario;
        ChannelParams {
            clusters_per_link: self.config.clusters_per_link,
            delay_taps: self.config.delay_taps_for(s.num_subcarriers),
            sample_period_s: s.sample_period_s(),
            path_loss: free_space_path_loss(s.ris.center_m.distance(endpoint), s.wavelength_m()),
            pulse: self.config.pulse,
        }
    }

    pub fn delay_taps(&self, endpoint: Point3) -> Result<DelayChannel> {
        delay_channel(
            &self.clusters(endpoint)?,
            &self.params(endpoint),
            &self.scenario.ris,
        )
    }

    pub fn link(&self, endpoint: Point3) -> Result<FreqChannel> {
        let k = self.scenario.num_subcarriers;
        freq_channel_rows(
            &self.delay_taps(endpoint)?,
            k,
            self.config.active_subcarriers(k),
        )
    }
}

const CHANNEL_MAGIC: &[u8; 4] = b"ETWC";
const CHANNEL_VERSION: u32 = 1;

/// Debug dump: magic, version, rows, cols, scenario hash, then interleaved
/// `re, im` pairs in row-major order.
pub fn encode_channel_dump(h: &FreqChannel, scenario_hash: &Hash32) -> Vec<u8> {
    let mut w = LeWriter::new();
    w.bytes(CHANNEL_MAGIC)
        .u32(CHANNEL_VERSION)
        .u64(h.rows() as u64)
        .u64(h.cols() as u64)
        .bytes(&scenario_hash.0);
    for z in h.as_slice() {
        w.f64(z.re).f64(z.im);
    }
    w.finish()
}

pub fn decode_channel_dump(bytes: &[u8]) -> Result<(FreqChannel, Hash32)> {
    let mut r = LeReader::new(bytes, "channel dump");
    r.expect_magic(CHANNEL_MAGIC)?;
    let version = r.u32()?;
    if version != CHANNEL_VERSION {
        return Err(r.error(format!("unsupported version {version}")));
    }
    let rows = r.u64()? as usize;
    let cols = r.u64()? as usize;
    let hash = Hash32(r.array32()?);
    let count = rows
        .checked_mul(cols)
        .filter(|&c| c.saturating_mul(16) == bytes.len().saturating_sub(56))
        .ok_or_else(|| r.error("dimensions do not match payload size"))?;
    let mut data = Vec::with_capacity(count);
    for _ in 0..count {
        data.push(Complex64::new(r.f64()?, r.f64()?));
    }
    r.finish()?;
    Ok((CMatrix::from_vec(rows, cols, data)?, hash))
}

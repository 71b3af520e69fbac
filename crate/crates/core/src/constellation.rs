//! Walker-delta constellation geometry, link topology and ground contact windows.
//!
//! Orbits are circular around a spherical Earth; positions are expressed in an
//! Earth-centered inertial frame (kilometers). Ground stations rotate with the
//! Earth at the sidereal rate.

use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const EARTH_RADIUS_KM: f64 = 6371.0;
pub const EARTH_MU_KM3_S2: f64 = 398_600.441_8;
pub const EARTH_ROTATION_RAD_S: f64 = 7.292_115_9e-5;
pub const SPEED_OF_LIGHT_KM_S: f64 = 299_792.458;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConstellationError {
    #[error("num_orbits must be at least 1")]
    NoOrbits,
    #[error("sats_per_orbit must be at least 1")]
    NoSatellites,
    #[error("phasing_factor {phasing} must be smaller than num_orbits {orbits}")]
    Phasing { phasing: usize, orbits: usize },
    #[error("altitude must be positive, got {0} km")]
    Altitude(f64),
    #[error("ground station {id}: {reason}")]
    GroundStation { id: usize, reason: String },
    #[error("horizon and step must be positive")]
    Sampling,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstellationSpec {
    pub num_orbits: usize,
    pub sats_per_orbit: usize,
    pub altitude_km: f64,
    pub inclination_deg: f64,
    /// Walker phasing factor F.
    pub phasing_factor: usize,
    #[serde(default)]
    pub epoch_s: f64,
}

impl ConstellationSpec {
    pub fn validate(&self) -> Result<(), ConstellationError> {
        if self.num_orbits == 0 {
            return Err(ConstellationError::NoOrbits);
        }
        if self.sats_per_orbit == 0 {
            return Err(ConstellationError::NoSatellites);
        }
        if self.phasing_factor >= self.num_orbits {
            return Err(ConstellationError::Phasing {
                phasing: self.phasing_factor,
                orbits: self.num_orbits,
            });
        }
        if !(self.altitude_km > 0.0) {
            return Err(ConstellationError::Altitude(self.altitude_km));
        }
        Ok(())
    }

    pub fn total_satellites(&self) -> usize {
        self.num_orbits * self.sats_per_orbit
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SatelliteId {
    pub orbit: usize,
    pub slot: usize,
}

impl SatelliteId {
    pub fn new(orbit: usize, slot: usize) -> Self {
        Self { orbit, slot }
    }
}

impl fmt::Display for SatelliteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "sat({},{})", self.orbit, self.slot)
    }
}

/// Any endpoint a link may attach to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeId {
    Satellite(SatelliteId),
    Ground(usize),
    Cloud,
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NodeId::Satellite(s) => s.fmt(f),
            NodeId::Ground(g) => write!(f, "gs({g})"),
            NodeId::Cloud => f.write_str("cloud"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LinkKind {
    IntraOrbitIsl,
    InterOrbitIsl,
    CrossSeamIsl,
    Sgl,
    GroundDedicated,
}

impl LinkKind {
    pub fn is_isl(self) -> bool {
        matches!(
            self,
            LinkKind::IntraOrbitIsl | LinkKind::InterOrbitIsl | LinkKind::CrossSeamIsl
        )
    }
}

/// A full-duplex link between two nodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Link {
    pub kind: LinkKind,
    pub endpoints: (NodeId, NodeId),
    pub rate_bps: f64,
    pub propagation_delay_s: f64,
    pub available: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrossSeamPolicy {
    /// Counter-rotating neighbours are never linked.
    Disabled,
    /// Counter-rotating neighbours are linked like any other inter-orbit pair.
    Enabled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinkConfig {
    pub intra_orbit_rate_bps: f64,
    pub inter_orbit_rate_bps: f64,
    pub cross_seam_rate_bps: f64,
    pub sgl_rate_bps: f64,
    pub ground_dedicated_rate_bps: f64,
    /// `None` means unlimited range.
    pub max_isl_range_km: Option<f64>,
    pub cross_seam_policy: CrossSeamPolicy,
}

impl Default for LinkConfig {
    fn default() -> Self {
        Self {
            intra_orbit_rate_bps: 10e9,
            inter_orbit_rate_bps: 2e9,
            cross_seam_rate_bps: 1e9,
            sgl_rate_bps: 1e9,
            ground_dedicated_rate_bps: 10e9,
            max_isl_range_km: None,
            cross_seam_policy: CrossSeamPolicy::Disabled,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundStation {
    pub id: usize,
    pub latitude_deg: f64,
    pub longitude_deg: f64,
    /// Rate of the terrestrial link from this station to the cloud.
    pub dedicated_rate_bps: f64,
    pub min_elevation_deg: f64,
}

impl GroundStation {
    pub fn validate(&self) -> Result<(), ConstellationError> {
        let err = |reason: &str| ConstellationError::GroundStation {
            id: self.id,
            reason: reason.to_string(),
        };
        if !(self.dedicated_rate_bps > 0.0) {
            return Err(err("dedicated_rate_bps must be positive"));
        }
        if !(0.0..=90.0).contains(&self.min_elevation_deg) {
            return Err(err("min_elevation_deg must lie in [0, 90]"));
        }
        if !(-90.0..=90.0).contains(&self.latitude_deg) {
            return Err(err("latitude_deg must lie in [-90, 90]"));
        }
        Ok(())
    }

    /// Inertial position at time `t` (seconds since the frame epoch).
    pub fn position(&self, t: f64) -> [f64; 3] {
        let lat = self.latitude_deg.to_radians();
        let lon = self.longitude_deg.to_radians() + EARTH_ROTATION_RAD_S * t;
        [
            EARTH_RADIUS_KM * lat.cos() * lon.cos(),
            EARTH_RADIUS_KM * lat.cos() * lon.sin(),
            EARTH_RADIUS_KM * lat.sin(),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopologySnapshot {
    pub time_s: f64,
    pub num_orbits: usize,
    pub sats_per_orbit: usize,
    pub links: Vec<Link>,
    /// Indexed by `orbit * sats_per_orbit + slot`.
    pub positions: Vec<[f64; 3]>,
    pub ground_ids: Vec<usize>,
}

impl TopologySnapshot {
    pub fn satellite_index(&self, id: SatelliteId) -> usize {
        id.orbit * self.sats_per_orbit + id.slot
    }

    pub fn satellite_at(&self, index: usize) -> SatelliteId {
        SatelliteId::new(index / self.sats_per_orbit, index % self.sats_per_orbit)
    }

    pub fn contains(&self, id: SatelliteId) -> bool {
        id.orbit < self.num_orbits && id.slot < self.sats_per_orbit
    }

    pub fn satellites(&self) -> impl Iterator<Item = SatelliteId> + '_ {
        (0..self.num_orbits * self.sats_per_orbit).map(|i| self.satellite_at(i))
    }

    pub fn links_of_kind(&self, kind: LinkKind) -> impl Iterator<Item = &Link> {
        self.links.iter().filter(move |l| l.kind == kind)
    }

    /// Rate of the directed intra-orbit edge `slot -> slot + 1` in each orbit,
    /// ordered by slot; `None` when the ring edge is missing or down.
    pub fn ring_rates(&self, orbit: usize) -> Vec<Option<f64>> {
        let n = self.sats_per_orbit;
        (0..n)
            .map(|slot| {
                let a = NodeId::Satellite(SatelliteId::new(orbit, slot));
                let b = NodeId::Satellite(SatelliteId::new(orbit, (slot + 1) % n));
                self.links
                    .iter()
                    .find(|l| {
                        l.kind == LinkKind::IntraOrbitIsl
                            && l.available
                            && (l.endpoints == (a, b) || l.endpoints == (b, a))
                    })
                    .map(|l| l.rate_bps)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContactWindow {
    pub satellite: SatelliteId,
    pub ground_station: usize,
    pub start_s: f64,
    pub end_s: f64,
    pub rate_bps: f64,
}

impl ContactWindow {
    pub fn duration(&self) -> f64 {
        self.end_s - self.start_s
    }

    pub fn overlap(&self, start: f64, end: f64) -> f64 {
        (self.end_s.min(end) - self.start_s.max(start)).max(0.0)
    }
}

/// A validated Walker-delta constellation.
#[derive(Debug, Clone, PartialEq)]
pub struct Constellation {
    spec: ConstellationSpec,
    radius_km: f64,
    mean_motion: f64,
}

pub fn build_walker(spec: ConstellationSpec) -> Result<Constellation, ConstellationError> {
    spec.validate()?;
    let radius_km = EARTH_RADIUS_KM + spec.altitude_km;
    let mean_motion = (EARTH_MU_KM3_S2 / radius_km.powi(3)).sqrt();
    Ok(Constellation {
        spec,
        radius_km,
        mean_motion,
    })
}

impl Constellation {
    pub fn spec(&self) -> &ConstellationSpec {
        &self.spec
    }

    pub fn radius_km(&self) -> f64 {
        self.radius_km
    }

    pub fn period_s(&self) -> f64 {
        2.0 * PI / self.mean_motion
    }

    pub fn satellites(&self) -> impl Iterator<Item = SatelliteId> + '_ {
        let s = self.spec.sats_per_orbit;
        (0..self.spec.total_satellites()).map(move |i| SatelliteId::new(i / s, i % s))
    }

    fn raan(&self, orbit: usize) -> f64 {
        2.0 * PI * orbit as f64 / self.spec.num_orbits as f64
    }

    fn argument_of_latitude(&self, id: SatelliteId, t: f64) -> f64 {
        let s = self.spec.sats_per_orbit as f64;
        let total = self.spec.total_satellites() as f64;
        let phase = 2.0 * PI * id.slot as f64 / s + 2.0 * PI * (self.spec.phasing_factor * id.orbit) as f64 / total;
        phase + self.mean_motion * (self.spec.epoch_s + t)
    }

    /// Inertial position in kilometers.
    pub fn position(&self, id: SatelliteId, t: f64) -> [f64; 3] {
        let (so, co) = self.raan(id.orbit).sin_cos();
        let (si, ci) = self.spec.inclination_deg.to_radians().sin_cos();
        let (su, cu) = self.argument_of_latitude(id, t).sin_cos();
        let r = self.radius_km;
        [r * (co * cu - so * su * ci), r * (so * cu + co * su * ci), r * su * si]
    }

    /// Inertial velocity in km/s.
    pub fn velocity(&self, id: SatelliteId, t: f64) -> [f64; 3] {
        let (so, co) = self.raan(id.orbit).sin_cos();
        let (si, ci) = self.spec.inclination_deg.to_radians().sin_cos();
        let (su, cu) = self.argument_of_latitude(id, t).sin_cos();
        let v = self.radius_km * self.mean_motion;
        [
            v * (-co * su - so * cu * ci),
            v * (-so * su + co * cu * ci),
            v * cu * si,
        ]
    }

    /// Unit angular-momentum vector of an orbital plane. Planes whose normals are
    /// more than 90 degrees apart move in opposite directions.
    pub fn orbit_normal(&self, orbit: usize) -> [f64; 3] {
        let (so, co) = self.raan(orbit).sin_cos();
        let (si, ci) = self.spec.inclination_deg.to_radians().sin_cos();
        [si * so, -si * co, ci]
    }

    /// Elevation of `sat` above the local horizon of `station`, in degrees.
    pub fn elevation_deg(&self, sat: SatelliteId, station: &GroundStation, t: f64) -> f64 {
        elevation_deg(self.position(sat, t), station.position(self.spec.epoch_s + t))
    }

    /// ISL topology at time `t`.
    pub fn snapshot(&self, t: f64, config: &LinkConfig) -> TopologySnapshot {
        let s = self.spec.sats_per_orbit;
        let p = self.spec.num_orbits;
        let positions: Vec<[f64; 3]> = self.satellites().map(|id| self.position(id, t)).collect();
        let pos = |id: SatelliteId| positions[id.orbit * s + id.slot];
        let mut links = Vec::new();

        let ring_edges = match s {
            1 => 0,
            2 => 1,
            _ => s,
        };
        for orbit in 0..p {
            for slot in 0..ring_edges {
                let a = SatelliteId::new(orbit, slot);
                let b = SatelliteId::new(orbit, (slot + 1) % s);
                links.push(Link {
                    kind: LinkKind::IntraOrbitIsl,
                    endpoints: (NodeId::Satellite(a), NodeId::Satellite(b)),
                    rate_bps: config.intra_orbit_rate_bps,
                    propagation_delay_s: distance(pos(a), pos(b)) / SPEED_OF_LIGHT_KM_S,
                    available: true,
                });
            }
        }

        let mut orbit_pairs: Vec<(usize, usize)> = (0..p.saturating_sub(1)).map(|o| (o, o + 1)).collect();
        if p >= 3 {
            orbit_pairs.push((p - 1, 0));
        }
        for (oa, ob) in orbit_pairs {
            for slot in 0..s {
                let a = SatelliteId::new(oa, slot);
                let b = SatelliteId::new(ob, slot);
                let counter_rotating = dot(self.orbit_normal(oa), self.orbit_normal(ob)) < 0.0;
                let (kind, rate) = if counter_rotating {
                    if config.cross_seam_policy == CrossSeamPolicy::Disabled {
                        continue;
                    }
                    (LinkKind::CrossSeamIsl, config.cross_seam_rate_bps)
                } else {
                    (LinkKind::InterOrbitIsl, config.inter_orbit_rate_bps)
                };
                let d = distance(pos(a), pos(b));
                let in_range = config.max_isl_range_km.is_none_or(|max| d <= max);
                links.push(Link {
                    kind,
                    endpoints: (NodeId::Satellite(a), NodeId::Satellite(b)),
                    rate_bps: rate,
                    propagation_delay_s: d / SPEED_OF_LIGHT_KM_S,
                    available: in_range,
                });
            }
        }

        TopologySnapshot {
            time_s: t,
            num_orbits: p,
            sats_per_orbit: s,
            links,
            positions,
            ground_ids: Vec::new(),
        }
    }

    /// ISL topology plus satellite-ground links for every satellite above a
    /// station's elevation mask, and each station's dedicated cloud link.
    pub fn snapshot_with_ground(&self, t: f64, config: &LinkConfig, stations: &[GroundStation]) -> TopologySnapshot {
        let mut snap = self.snapshot(t, config);
        for gs in stations {
            let gpos = gs.position(self.spec.epoch_s + t);
            for (i, id) in self.satellites().enumerate() {
                let spos = snap.positions[i];
                if elevation_deg(spos, gpos) >= gs.min_elevation_deg {
                    snap.links.push(Link {
                        kind: LinkKind::Sgl,
                        endpoints: (NodeId::Satellite(id), NodeId::Ground(gs.id)),
                        rate_bps: config.sgl_rate_bps,
                        propagation_delay_s: distance(spos, gpos) / SPEED_OF_LIGHT_KM_S,
                        available: true,
                    });
                }
            }
            snap.links.push(Link {
                kind: LinkKind::GroundDedicated,
                endpoints: (NodeId::Ground(gs.id), NodeId::Cloud),
                rate_bps: gs.dedicated_rate_bps,
                propagation_delay_s: 0.0,
                available: true,
            });
            snap.ground_ids.push(gs.id);
        }
        snap
    }

    /// Visibility windows sampled every `step` seconds over `[0, horizon)`.
    ///
    /// A window starts at its first visible sample and ends one step after its
    /// last visible sample (clipped to the horizon).
    pub fn contact_windows(
        &self,
        stations: &[GroundStation],
        config: &LinkConfig,
        horizon: f64,
        step: f64,
    ) -> Result<Vec<ContactWindow>, ConstellationError> {
        self.contact_windows_between(stations, config, 0.0, horizon, step)
    }

    /// Contact windows sampled at `start + k * step` for times in `[start, end)`.
    pub fn contact_windows_between(
        &self,
        stations: &[GroundStation],
        config: &LinkConfig,
        start: f64,
        end: f64,
        step: f64,
    ) -> Result<Vec<ContactWindow>, ConstellationError> {
        let horizon = end - start;
        if !start.is_finite() || !(horizon > 0.0) || !(step > 0.0) {
            return Err(ConstellationError::Sampling);
        }
        for gs in stations {
            gs.validate()?;
        }
        let samples = (horizon / step).ceil() as usize;
        let mut windows = Vec::new();
        for id in self.satellites() {
            for gs in stations {
                let mut open: Option<f64> = None;
                let mut last_visible = 0.0;
                for k in 0..samples {
                    let t = start + k as f64 * step;
                    if t >= end {
                        break;
                    }
                    let visible = self.elevation_deg(id, gs, t) >= gs.min_elevation_deg;
                    if visible {
                        open.get_or_insert(t);
                        last_visible = t;
                    } else if let Some(start) = open.take() {
                        windows.push(ContactWindow {
                            satellite: id,
                            ground_station: gs.id,
                            start_s: start,
                            end_s: (last_visible + step).min(end),
                            rate_bps: config.sgl_rate_bps,
                        });
                    }
                }
                if let Some(start) = open {
                    windows.push(ContactWindow {
                        satellite: id,
                        ground_station: gs.id,
                        start_s: start,
                        end_s: (last_visible + step).min(end),
                        rate_bps: config.sgl_rate_bps,
                    });
                }
            }
        }
        windows.sort_by(|a, b| {
            a.start_s
                .total_cmp(&b.start_s)
                .then(a.satellite.cmp(&b.satellite))
                .then(a.ground_station.cmp(&b.ground_station))
        });
        Ok(windows)
    }
}

pub fn distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    dot(d, d).sqrt()
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Elevation angle of `target` seen from `observer` on the sphere surface.
pub fn elevation_deg(target: [f64; 3], observer: [f64; 3]) -> f64 {
    let rel = [
        target[0] - observer[0],
        target[1] - observer[1],
        target[2] - observer[2],
    ];
    let range = dot(rel, rel).sqrt();
    let up = dot(observer, observer).sqrt();
    if range == 0.0 || up == 0.0 {
        return 90.0;
    }
    let sin_el = (dot(rel, observer) / (range * up)).clamp(-1.0, 1.0);
    sin_el.asin().to_degrees()
}

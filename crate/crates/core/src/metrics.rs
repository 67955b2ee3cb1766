//! Benchmark scoring: per-route infraction score, route completion, and the
//! combined driving score.

use crate::townsim::InfractionKind;

pub const PED_FACTOR: f64 = 0.5;
pub const VEH_FACTOR: f64 = 0.60;
pub const STATIC_FACTOR: f64 = 0.65;
pub const RED_FACTOR: f64 = 0.7;
pub const STOP_FACTOR: f64 = 0.8;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct InfractionCounts {
    pub n_ped: u32,
    pub n_veh: u32,
    pub n_stat: u32,
    pub n_red: u32,
    pub n_stop: u32,
}

impl InfractionCounts {
    pub fn add(&mut self, kind: InfractionKind) {
        match kind {
            InfractionKind::CollisionPedestrian => self.n_ped += 1,
            InfractionKind::CollisionVehicle => self.n_veh += 1,
            InfractionKind::CollisionStatic => self.n_stat += 1,
            InfractionKind::RedLight => self.n_red += 1,
            InfractionKind::StopSign => self.n_stop += 1,
        }
    }

    pub fn total(&self) -> u32 {
        self.n_ped + self.n_veh + self.n_stat + self.n_red + self.n_stop
    }

    pub fn combined(&self, other: &Self) -> Self {
        Self {
            n_ped: self.n_ped + other.n_ped,
            n_veh: self.n_veh + other.n_veh,
            n_stat: self.n_stat + other.n_stat,
            n_red: self.n_red + other.n_red,
            n_stop: self.n_stop + other.n_stop,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RouteResult {
    /// Fraction of the route completed, in [0, 1].
    pub completion: f64,
    pub counts: InfractionCounts,
}

impl RouteResult {
    pub fn new(completion: f64, counts: InfractionCounts) -> Self {
        assert!(
            (0.0..=1.0).contains(&completion),
            "completion must lie in [0,1], got {completion}"
        );
        Self { completion, counts }
    }
}

/// Multiplicative infraction score in (0, 1].
pub fn infraction_score(c: &InfractionCounts) -> f64 {
    PED_FACTOR.powi(c.n_ped as i32)
        * VEH_FACTOR.powi(c.n_veh as i32)
        * STATIC_FACTOR.powi(c.n_stat as i32)
        * RED_FACTOR.powi(c.n_red as i32)
        * STOP_FACTOR.powi(c.n_stop as i32)
}

/// Mean completion as a percentage.
pub fn route_completion(results: &[RouteResult]) -> f64 {
    assert!(!results.is_empty(), "route completion of an empty set");
    results.iter().map(|r| r.completion).sum::<f64>() / results.len() as f64 * 100.0
}

/// Mean of completion × infraction score, as a percentage.
pub fn driving_score(results: &[RouteResult]) -> f64 {
    assert!(!results.is_empty(), "driving score of an empty set");
    results
        .iter()
        .map(|r| r.completion * infraction_score(&r.counts))
        .sum::<f64>()
        / results.len() as f64
        * 100.0
}

/// Mean per-route infraction score, as reported alongside DS/RC.
pub fn mean_infraction_score(results: &[RouteResult]) -> f64 {
    assert!(!results.is_empty(), "infraction score of an empty set");
    results
        .iter()
        .map(|r| infraction_score(&r.counts))
        .sum::<f64>()
        / results.len() as f64
}

/// Sample mean and standard deviation (population form for n = 1).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    assert!(!values.is_empty());
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

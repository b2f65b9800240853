//! Single-zone thermal house with a hysteresis thermostat, activity-driven
//! occupants and a PMV comfort reward.
//!
//! Internally everything is in °C and seconds; the agent sees and sets
//! temperatures in °F on the integer grid 60..=80.

use std::fmt;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::env::{Environment, StepOutcome};
use crate::error::{PearlError, Result};
use crate::privacy::StateBinning;
use crate::seed::{Rng, SeedTree};

pub const MIN_SETPOINT_F: i32 = 60;
pub const MAX_SETPOINT_F: i32 = 80;
pub const ACTION_COUNT: usize = (MAX_SETPOINT_F - MIN_SETPOINT_F + 1) as usize;
pub const HOURS_PER_WEEK: usize = 168;
const TEMP_BUCKETS: usize = ACTION_COUNT;

pub fn f_to_c(f: f64) -> f64 {
    (f - 32.0) * 5.0 / 9.0
}

pub fn c_to_f(c: f64) -> f64 {
    c * 9.0 / 5.0 + 32.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activity {
    Sleeping,
    Relaxing,
    WatchingTv,
    Cooking,
    Exercising,
    Away,
}

impl Activity {
    pub const ALL: [Activity; 6] = [
        Activity::Sleeping,
        Activity::Relaxing,
        Activity::WatchingTv,
        Activity::Cooking,
        Activity::Exercising,
        Activity::Away,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn is_occupied(self) -> bool {
        self != Activity::Away
    }
}

impl fmt::Display for Activity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Activity::Sleeping => "sleeping",
            Activity::Relaxing => "relaxing",
            Activity::WatchingTv => "watching-tv",
            Activity::Cooking => "cooking",
            Activity::Exercising => "exercising",
            Activity::Away => "away",
        };
        f.write_str(s)
    }
}

/// Fanger's predicted mean vote (ISO 7730 algorithm, no external work).
///
/// `rh` in percent, `air_speed` in m/s, temperatures in °C.
pub fn pmv(temp_air: f64, temp_radiant: f64, met: f64, clo: f64, rh: f64, air_speed: f64) -> Result<f64> {
    let pa = rh * 10.0 * (16.6536 - 4030.183 / (temp_air + 235.0)).exp();
    let icl = 0.155 * clo;
    let m = met * 58.15;
    let mw = m;
    let fcl = if icl <= 0.078 {
        1.0 + 1.29 * icl
    } else {
        1.05 + 0.645 * icl
    };
    let hcf = 12.1 * air_speed.sqrt();
    let taa = temp_air + 273.0;
    let tra = temp_radiant + 273.0;
    let tcla = taa + (35.5 - temp_air) / (3.5 * icl + 0.1);
    let p1 = icl * fcl;
    let p2 = p1 * 3.96;
    let p3 = p1 * 100.0;
    let p4 = p1 * taa;
    let p5 = 308.7 - 0.028 * mw + p2 * (tra / 100.0).powi(4);
    let mut xn = tcla / 100.0;
    let mut xf = tcla / 50.0;
    let mut hc = hcf;
    let mut iterations = 0;
    while (xn - xf).abs() > 0.00015 {
        xf = (xf + xn) / 2.0;
        let hcn = 2.38 * (100.0 * xf - taa).abs().powf(0.25);
        hc = hcf.max(hcn);
        xn = (p5 + p4 * hc - p2 * xf.powi(4)) / (100.0 + p3 * hc);
        iterations += 1;
        if iterations > 150 {
            return Err(PearlError::PmvNonConvergent(150));
        }
    }
    let tcl = 100.0 * xn - 273.0;
    let skin_diffusion = 3.05e-3 * (5733.0 - 6.99 * mw - pa);
    let sweat = if mw > 58.15 { 0.42 * (mw - 58.15) } else { 0.0 };
    let latent_resp = 1.7e-5 * m * (5867.0 - pa);
    let dry_resp = 0.0014 * m * (34.0 - temp_air);
    let radiation = 3.96 * fcl * (xn.powi(4) - (tra / 100.0).powi(4));
    let convection = fcl * hc * (tcl - temp_air);
    let ts = 0.303 * (-0.036 * m).exp() + 0.028;
    Ok(ts * (mw - skin_diffusion - sweat - latent_resp - dry_resp - radiation - convection))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ComfortModel {
    pub air_speed: f64,
    pub relative_humidity: f64,
    /// Metabolic rate per activity, indexed like [`Activity::ALL`].
    pub met: [f64; 6],
    /// Clothing (and bedding) insulation per activity, indexed like [`Activity::ALL`].
    pub clo: [f64; 6],
}

impl Default for ComfortModel {
    fn default() -> Self {
        Self {
            air_speed: 0.1,
            relative_humidity: 50.0,
            met: [0.8, 1.0, 1.0, 1.8, 4.0, 0.0],
            clo: [2.4, 0.6, 1.1, 0.8, 0.3, 0.0],
        }
    }
}

impl ComfortModel {
    /// PMV clamped to the scale's range [-3, 3]; mean radiant temperature equals air temperature.
    pub fn pmv(&self, temp_c: f64, activity: Activity) -> Result<f64> {
        let v = pmv(
            temp_c,
            temp_c,
            self.met[activity.index()],
            self.clo[activity.index()],
            self.relative_humidity,
            self.air_speed,
        )?;
        Ok(v.clamp(-3.0, 3.0))
    }

    pub fn is_comfortable(pmv: f64) -> bool {
        pmv.abs() <= 0.5
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HouseParams {
    /// Envelope thermal resistance, K/W.
    pub thermal_resistance: f64,
    /// Lumped thermal mass, J/K.
    pub thermal_mass: f64,
    pub heater_supply_temp_c: f64,
    pub cooler_supply_temp_c: f64,
    /// Supply-air heat transfer when a unit is running, W/K.
    pub airflow_coefficient: f64,
    /// Thermostat deviation allowed around the setpoint, °C.
    pub thermostat_band_c: f64,
    pub outdoor_mean_c: f64,
    pub outdoor_amplitude_c: f64,
    /// Hour of day of the outdoor minimum.
    pub outdoor_min_hour: f64,
    pub initial_temp_c: f64,
    pub substep_s: f64,
    /// HVAC energy (kWh) mapped to a reward of -1 while nobody is home.
    pub away_energy_scale_kwh: f64,
}

impl Default for HouseParams {
    /// Four-hour envelope time constant.
    fn default() -> Self {
        Self {
            thermal_resistance: 0.005,
            thermal_mass: 2.88e6,
            heater_supply_temp_c: 50.0,
            cooler_supply_temp_c: 10.0,
            airflow_coefficient: 1600.0,
            thermostat_band_c: 2.0,
            outdoor_mean_c: 27.0,
            outdoor_amplitude_c: 5.0,
            outdoor_min_hour: 4.0,
            initial_temp_c: 24.0,
            substep_s: 60.0,
            away_energy_scale_kwh: 1.0,
        }
    }
}

impl HouseParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.thermal_resistance > 0.0 && self.thermal_mass > 0.0) {
            return Err(PearlError::InvalidArgument(
                "thermal resistance and mass must be positive".into(),
            ));
        }
        if !(self.substep_s > 0.0 && 3600.0 % self.substep_s == 0.0) {
            return Err(PearlError::InvalidArgument(
                "substep must divide one hour".into(),
            ));
        }
        if !(self.thermostat_band_c >= 0.0 && self.thermostat_band_c <= 2.0) {
            return Err(PearlError::InvalidArgument(
                "thermostat band must lie in [0, 2] °C".into(),
            ));
        }
        Ok(())
    }

    pub fn time_constant_h(&self) -> f64 {
        self.thermal_resistance * self.thermal_mass / 3600.0
    }

    pub fn outdoor_temp_c(&self, hours: f64) -> f64 {
        let phase = 2.0 * std::f64::consts::PI * (hours - self.outdoor_min_hour) / 24.0;
        self.outdoor_mean_c - self.outdoor_amplitude_c * phase.cos()
    }

    pub fn outdoor_min_c(&self) -> f64 {
        self.outdoor_mean_c - self.outdoor_amplitude_c.abs()
    }
}

/// Which HVAC unit runs during a substep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Thermostat {
    pub heating: bool,
    pub cooling: bool,
}

impl Thermostat {
    /// Hysteresis control: a unit starts once the temperature leaves the band
    /// and stops when it reaches the setpoint.
    pub fn update(&mut self, temp_c: f64, setpoint_c: f64, band_c: f64) {
        if self.heating && temp_c >= setpoint_c {
            self.heating = false;
        }
        if !self.heating && temp_c < setpoint_c - band_c {
            self.heating = true;
        }
        if self.cooling && temp_c <= setpoint_c {
            self.cooling = false;
        }
        if !self.cooling && temp_c > setpoint_c + band_c {
            self.cooling = true;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HourResult {
    pub end_temp_c: f64,
    pub mean_temp_c: f64,
    pub hvac_energy_j: f64,
}

/// Integrates one hour of the envelope ODE
/// `C dT/dt = Q_hvac + Q_occ - (T - T_out)/R`.
///
/// Within each substep the thermostat state and outdoor temperature are held
/// fixed and the linear ODE is solved exactly. `hvac_enabled = false` forces
/// both units off.
pub fn simulate_hour(
    house: &HouseParams,
    start_temp_c: f64,
    setpoint_c: f64,
    occupant_w: f64,
    start_hour: f64,
    thermostat: &mut Thermostat,
    hvac_enabled: bool,
) -> HourResult {
    let steps = (3600.0 / house.substep_s).round() as usize;
    let dt = house.substep_s;
    let ua = 1.0 / house.thermal_resistance;
    let g = house.airflow_coefficient;
    let c = house.thermal_mass;
    let mut temp = start_temp_c;
    let mut temp_integral = 0.0;
    let mut energy = 0.0;
    for i in 0..steps {
        let hours = start_hour + (i as f64 + 0.5) * dt / 3600.0;
        let t_out = house.outdoor_temp_c(hours);
        if hvac_enabled {
            thermostat.update(temp, setpoint_c, house.thermostat_band_c);
        } else {
            *thermostat = Thermostat::default();
        }
        // C dT/dt = -k C (T - T_eq)
        let (mut conductance, mut driven) = (ua, ua * t_out + occupant_w);
        let supply = if thermostat.heating {
            Some(house.heater_supply_temp_c)
        } else if thermostat.cooling {
            Some(house.cooler_supply_temp_c)
        } else {
            None
        };
        if let Some(t_sup) = supply {
            conductance += g;
            driven += g * t_sup;
        }
        let t_eq = driven / conductance;
        let k = conductance / c;
        let decay = (-k * dt).exp();
        let mean = t_eq + (temp - t_eq) * (1.0 - decay) / (k * dt);
        if let Some(t_sup) = supply {
            energy += g * (t_sup - mean).abs() * dt;
        }
        temp_integral += mean * dt;
        temp = t_eq + (temp - t_eq) * decay;
    }
    HourResult {
        end_temp_c: temp,
        mean_temp_c: temp_integral / 3600.0,
        hvac_energy_j: energy,
    }
}

/// Weekly activity template plus the per-slot substitution probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccupantProfile {
    pub name: String,
    /// Seven days of 24 hourly activities, Monday first.
    pub schedule: Vec<[Activity; 24]>,
    /// Probability that an hour slot is replaced by a uniformly drawn activity.
    pub randomness: f64,
    /// Occupant heat output per activity, W.
    pub heat_w: [f64; 6],
}

impl OccupantProfile {
    pub fn validate(&self) -> Result<()> {
        if self.schedule.len() != 7 {
            return Err(PearlError::InvalidArgument(format!(
                "profile {} must cover 7 days, has {}",
                self.name,
                self.schedule.len()
            )));
        }
        if !(0.0..=1.0).contains(&self.randomness) {
            return Err(PearlError::InvalidArgument(
                "profile randomness must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }

    pub fn template(&self, hour_of_week: usize) -> Activity {
        let h = hour_of_week % HOURS_PER_WEEK;
        self.schedule[h / 24][h % 24]
    }

    /// Draws the activity actually performed in a slot.
    pub fn realize(&self, hour_of_week: usize, rng: &mut Rng) -> Activity {
        if self.randomness > 0.0 && rng.random::<f64>() < self.randomness {
            Activity::ALL[rng.random_range(0..Activity::ALL.len())]
        } else {
            self.template(hour_of_week)
        }
    }

    /// Longest contiguous sleep run between noon of `day` and noon of the next day.
    pub fn night_sleep_block(&self, day: usize) -> usize {
        let start = (day % 7) * 24 + 12;
        let (mut best, mut run) = (0, 0);
        for h in start..start + 24 {
            if self.template(h) == Activity::Sleeping {
                run += 1;
                best = best.max(run);
            } else {
                run = 0;
            }
        }
        best
    }
}

/// Key times of a day template; hours may exceed 23 to mean "after midnight".
#[derive(Debug, Clone, Copy)]
struct DayPlan {
    blocks: &'static [(i32, Activity)],
    shift: i32,
}

impl DayPlan {
    fn render(&self) -> [Activity; 24] {
        let mut day = [Activity::Sleeping; 24];
        let blocks = self.blocks;
        for (i, &(start, act)) in blocks.iter().enumerate() {
            let end = blocks.get(i + 1).map(|b| b.0).unwrap_or(blocks[0].0 + 24);
            for h in start..end {
                day[(h + self.shift).rem_euclid(24) as usize] = act;
            }
        }
        day
    }
}

use Activity::*;

const H1_WEEKDAY: &[(i32, Activity)] = &[
    (7, Cooking),
    (8, Away),
    (17, Exercising),
    (18, Cooking),
    (19, Relaxing),
    (21, WatchingTv),
    (23, Sleeping),
];
const H1_WEEKEND: &[(i32, Activity)] = &[
    (9, Cooking),
    (10, Relaxing),
    (12, Away),
    (15, Exercising),
    (16, Relaxing),
    (18, Cooking),
    (19, WatchingTv),
    (23, Sleeping),
];
const H2_WEEKDAY: &[(i32, Activity)] = &[
    (6, Exercising),
    (7, Cooking),
    (8, Away),
    (16, Relaxing),
    (18, Cooking),
    (19, WatchingTv),
    (22, Relaxing),
    (23, Sleeping),
];
const H2_WEEKEND: &[(i32, Activity)] = &[
    (8, Cooking),
    (9, Exercising),
    (10, Away),
    (14, Relaxing),
    (17, Cooking),
    (18, WatchingTv),
    (22, Sleeping),
];
const H3_WEEKDAY: &[(i32, Activity)] = &[
    (9, Cooking),
    (10, Away),
    (15, Relaxing),
    (17, Exercising),
    (18, Cooking),
    (19, Away),
    (21, WatchingTv),
    (25, Sleeping),
];
const H3_WEEKEND: &[(i32, Activity)] = &[
    (10, Relaxing),
    (12, Cooking),
    (13, Away),
    (17, Exercising),
    (18, WatchingTv),
    (20, Cooking),
    (21, Relaxing),
    (26, Sleeping),
];

/// Builds the three occupants: H1 structured, H2 moderate, H3 irregular.
/// The seed shifts each occupant's routine by up to an hour.
pub fn generate_profiles(seed: u64) -> [OccupantProfile; 3] {
    let tree = SeedTree::new(seed).child("profiles");
    let specs: [(&str, &'static [(i32, Activity)], &'static [(i32, Activity)], f64, f64); 3] = [
        ("H1", H1_WEEKDAY, H1_WEEKEND, 0.05, 1.0),
        ("H2", H2_WEEKDAY, H2_WEEKEND, 0.20, 1.15),
        ("H3", H3_WEEKDAY, H3_WEEKEND, 0.40, 0.9),
    ];
    specs.map(|(name, weekday, weekend, randomness, rmv)| {
        let mut rng = tree.stream(name);
        let shift_weekday = rng.random_range(-1..=1);
        let shift_weekend = rng.random_range(-1..=1);
        let schedule = (0..7)
            .map(|d| {
                if d < 5 {
                    DayPlan { blocks: weekday, shift: shift_weekday }.render()
                } else {
                    DayPlan { blocks: weekend, shift: shift_weekend }.render()
                }
            })
            .collect();
        let base = [70.0, 100.0, 110.0, 250.0, 500.0, 0.0];
        OccupantProfile {
            name: name.to_string(),
            schedule,
            randomness,
            heat_w: base.map(|w| w * rmv),
        }
    })
}

/// How the activity enters the observation vector; the temperature always
/// follows as `(T_in[°F] - 70) / 10`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActivityEncoding {
    /// The activity number 1..6 rescaled to [-1, 1].
    #[default]
    Scalar,
    /// One indicator per activity.
    OneHot,
}

impl ActivityEncoding {
    pub fn observation_dim(self) -> usize {
        match self {
            ActivityEncoding::Scalar => 2,
            ActivityEncoding::OneHot => Activity::ALL.len() + 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ThermalEnv {
    house: HouseParams,
    comfort: ComfortModel,
    profile: OccupantProfile,
    rng: Rng,
    t: u64,
    activity: Activity,
    temp_c: f64,
    thermostat: Thermostat,
    encoding: ActivityEncoding,
}

impl ThermalEnv {
    pub fn new(house: HouseParams, comfort: ComfortModel, profile: OccupantProfile, rng: Rng) -> Result<Self> {
        house.validate()?;
        profile.validate()?;
        let mut env = Self {
            activity: profile.template(0),
            temp_c: house.initial_temp_c,
            house,
            comfort,
            profile,
            rng,
            t: 0,
            thermostat: Thermostat::default(),
            encoding: ActivityEncoding::default(),
        };
        env.reset();
        Ok(env)
    }

    pub fn with_profile(profile: OccupantProfile, rng: Rng) -> Result<Self> {
        Self::new(HouseParams::default(), ComfortModel::default(), profile, rng)
    }

    pub fn with_encoding(mut self, encoding: ActivityEncoding) -> Self {
        self.encoding = encoding;
        self
    }

    pub fn encoding(&self) -> ActivityEncoding {
        self.encoding
    }

    pub fn house(&self) -> &HouseParams {
        &self.house
    }

    pub fn comfort(&self) -> &ComfortModel {
        &self.comfort
    }

    pub fn profile(&self) -> &OccupantProfile {
        &self.profile
    }

    /// Replaces the occupant from the next hour on (behaviour change).
    pub fn set_profile(&mut self, profile: OccupantProfile) -> Result<()> {
        profile.validate()?;
        self.profile = profile;
        Ok(())
    }

    pub fn activity(&self) -> Activity {
        self.activity
    }

    pub fn temp_c(&self) -> f64 {
        self.temp_c
    }

    pub fn temp_f(&self) -> f64 {
        c_to_f(self.temp_c)
    }

    /// Indoor temperature as surfaced in the state, clamped to [60, 80] °F.
    pub fn state_temp_f(&self) -> f64 {
        self.temp_f().clamp(MIN_SETPOINT_F as f64, MAX_SETPOINT_F as f64)
    }

    pub fn setpoint_f(action: usize) -> f64 {
        (MIN_SETPOINT_F + action as i32) as f64
    }

    pub fn hour_of_week(&self) -> usize {
        (self.t % HOURS_PER_WEEK as u64) as usize
    }

    /// Reward for one hour given its comfort outcome.
    pub fn comfort_reward(pmv: f64) -> f64 {
        if ComfortModel::is_comfortable(pmv) {
            1.0
        } else {
            -pmv.abs()
        }
    }
}

impl Environment for ThermalEnv {
    fn observation_dim(&self) -> usize {
        self.encoding.observation_dim()
    }

    fn action_count(&self) -> usize {
        ACTION_COUNT
    }

    fn reset(&mut self) -> Vec<f64> {
        self.t = 0;
        self.temp_c = self.house.initial_temp_c;
        self.thermostat = Thermostat::default();
        self.activity = self.profile.realize(0, &mut self.rng);
        self.observation()
    }

    fn observation(&self) -> Vec<f64> {
        let temp = (self.state_temp_f() - 70.0) / 10.0;
        match self.encoding {
            ActivityEncoding::Scalar => vec![self.activity.index() as f64 / 2.5 - 1.0, temp],
            ActivityEncoding::OneHot => {
                let mut obs = vec![0.0; self.encoding.observation_dim()];
                obs[self.activity.index()] = 1.0;
                obs[Activity::ALL.len()] = temp;
                obs
            }
        }
    }

    fn step(&mut self, action: usize) -> Result<StepOutcome> {
        if action >= ACTION_COUNT {
            return Err(PearlError::InvalidArgument(format!(
                "setpoint action {action} outside 0..{ACTION_COUNT}"
            )));
        }
        let setpoint_c = f_to_c(Self::setpoint_f(action));
        let occupant_w = self.profile.heat_w[self.activity.index()];
        let hour = self.t as f64 % 24.0;
        let result = simulate_hour(
            &self.house,
            self.temp_c,
            setpoint_c,
            occupant_w,
            hour,
            &mut self.thermostat,
            true,
        );
        let (reward, metric) = if self.activity.is_occupied() {
            let pmv = self.comfort.pmv(result.mean_temp_c, self.activity)?;
            (Self::comfort_reward(pmv), Some(pmv))
        } else {
            let kwh = result.hvac_energy_j / 3.6e6;
            (-(kwh / self.house.away_energy_scale_kwh).min(1.0), None)
        };
        self.temp_c = result.end_temp_c;
        self.t += 1;
        self.activity = self.profile.realize(self.hour_of_week(), &mut self.rng);
        Ok(StepOutcome {
            observation: self.observation(),
            reward,
            terminal: false,
            episode_end: self.t % HOURS_PER_WEEK as u64 == 0,
            metric,
        })
    }

    fn state_id(&self, binning: StateBinning) -> usize {
        match binning {
            StateBinning::Coarse => self.activity.index(),
            StateBinning::Fine => {
                let bucket = (self.state_temp_f().round() as i32 - MIN_SETPOINT_F)
                    .clamp(0, TEMP_BUCKETS as i32 - 1) as usize;
                self.activity.index() * TEMP_BUCKETS + bucket
            }
        }
    }

    fn state_cardinality(&self, binning: StateBinning) -> usize {
        match binning {
            StateBinning::Coarse => Activity::ALL.len(),
            StateBinning::Fine => Activity::ALL.len() * TEMP_BUCKETS,
        }
    }

    fn ground_truth(&self) -> usize {
        self.activity.index()
    }

    fn ground_truth_cardinality(&self) -> usize {
        Activity::ALL.len()
    }

    fn phase(&self) -> usize {
        (self.t % 24) as usize
    }

    fn period(&self) -> usize {
        24
    }

    fn step_index(&self) -> u64 {
        self.t
    }

    /// Percentage of PMV samples inside the comfort band.
    fn utility_score(&self, metrics: &[f64]) -> f64 {
        pmv_in_range_pct(metrics)
    }
}

pub fn pmv_in_range_pct(pmvs: &[f64]) -> f64 {
    if pmvs.is_empty() {
        return 0.0;
    }
    let hits = pmvs.iter().filter(|p| ComfortModel::is_comfortable(**p)).count();
    100.0 * hits as f64 / pmvs.len() as f64
}

pub fn pmv_std(pmvs: &[f64]) -> f64 {
    if pmvs.len() < 2 {
        return 0.0;
    }
    let n = pmvs.len() as f64;
    let mean = pmvs.iter().sum::<f64>() / n;
    (pmvs.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / n).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env_for(profile_idx: usize) -> ThermalEnv {
        let profiles = generate_profiles(3);
        ThermalEnv::with_profile(profiles[profile_idx].clone(), SeedTree::new(5).stream("env")).unwrap()
    }

    #[test]
    fn pmv_reference_conditions() {
        // ISO 7730 Annex D reference table rows
        let rows = [
            (22.0, 22.0, 0.10, 60.0, 1.2, 0.5, -0.75),
            (27.0, 27.0, 0.10, 60.0, 1.2, 0.5, 0.77),
            (27.0, 27.0, 0.30, 60.0, 1.2, 0.5, 0.44),
            (19.0, 19.0, 0.10, 40.0, 1.2, 1.0, -0.60),
            (22.0, 22.0, 0.10, 60.0, 1.6, 0.5, 0.05),
            (27.0, 27.0, 0.10, 60.0, 1.6, 0.5, 1.17),
        ];
        for (ta, tr, v, rh, met, clo, expected) in rows {
            let got = pmv(ta, tr, met, clo, rh, v).unwrap();
            assert!((got - expected).abs() < 0.05, "{ta} {tr} {v} {rh} {met} {clo}: {got}");
        }
    }

    #[test]
    fn pmv_hot_input_is_uncomfortable_and_monotone_in_air_temp() {
        assert!(pmv(35.0, 35.0, 2.0, 0.5, 50.0, 0.1).unwrap() > 0.5);
        let mut prev = f64::NEG_INFINITY;
        for i in 0..=30 {
            let t = 15.0 + i as f64 * 0.5;
            let v = pmv(t, t, 1.2, 0.5, 50.0, 0.1).unwrap();
            assert!(v > prev);
            prev = v;
        }
    }

    #[test]
    fn reward_flips_sign_at_comfort_boundary() {
        assert_eq!(ThermalEnv::comfort_reward(0.5), 1.0);
        assert_eq!(ThermalEnv::comfort_reward(-0.5), 1.0);
        assert!(ThermalEnv::comfort_reward(0.5 + 1e-9) < 0.0);
        assert!(ThermalEnv::comfort_reward(-0.5 - 1e-9) < 0.0);
    }

    #[test]
    fn zero_net_flux_keeps_temperature() {
        let house = HouseParams {
            outdoor_amplitude_c: 0.0,
            outdoor_mean_c: 18.0,
            ..HouseParams::default()
        };
        let mut thermostat = Thermostat::default();
        let r = simulate_hour(&house, 18.0, 18.0, 0.0, 0.0, &mut thermostat, false);
        assert!((r.end_temp_c - 18.0).abs() < 1e-12);
        assert_eq!(r.hvac_energy_j, 0.0);
    }

    #[test]
    fn heating_raises_temperature_bounded_by_band() {
        let house = HouseParams::default();
        let mut thermostat = Thermostat::default();
        let start = f_to_c(64.0);
        let sp = f_to_c(72.0);
        let r = simulate_hour(&house, start, sp, 0.0, 0.0, &mut thermostat, true);
        assert!(r.end_temp_c > start);
        assert!(r.end_temp_c <= sp + house.thermostat_band_c);
    }

    #[test]
    fn passive_house_relaxes_monotonically_to_outdoor() {
        let house = HouseParams {
            outdoor_amplitude_c: 0.0,
            ..HouseParams::default()
        };
        let mut thermostat = Thermostat::default();
        let mut temp = house.outdoor_mean_c + 6.0;
        for h in 0..48 {
            let r = simulate_hour(&house, temp, 20.0, 0.0, h as f64, &mut thermostat, false);
            assert!(r.end_temp_c < temp && r.end_temp_c > house.outdoor_mean_c);
            temp = r.end_temp_c;
        }
        assert!((temp - house.outdoor_mean_c).abs() < 0.01);
    }

    #[test]
    fn constant_setpoint_settles_within_band() {
        let house = HouseParams::default();
        let mut thermostat = Thermostat::default();
        let sp = f_to_c(70.0);
        let mut temp = 15.0;
        for h in 0..24 {
            let r = simulate_hour(&house, temp, sp, 100.0, h as f64, &mut thermostat, true);
            temp = r.end_temp_c;
            if h > 2 {
                assert!((temp - sp).abs() <= house.thermostat_band_c + 1e-9, "hour {h}: {temp}");
            }
        }
    }

    #[test]
    fn temperatures_stay_physical_under_random_actions() {
        let mut env = env_for(2);
        let mut rng = SeedTree::new(9).stream("actions");
        // the cooler can hold the coldest setpoint below a warm outdoor minimum
        let lo = c_to_f(env.house().outdoor_min_c()).min(MIN_SETPOINT_F as f64) - 5.0;
        for _ in 0..2000 {
            let a = rng.random_range(0..ACTION_COUNT);
            env.step(a).unwrap();
            assert!(env.temp_f() >= lo && env.temp_f() <= 90.0, "{}", env.temp_f());
        }
    }

    #[test]
    fn profiles_have_required_structure() {
        for seed in 0..20 {
            let profiles = generate_profiles(seed);
            assert!(profiles[0].randomness < profiles[1].randomness);
            assert!(profiles[1].randomness < profiles[2].randomness);
            for p in &profiles {
                p.validate().unwrap();
                let long_nights = (0..7).filter(|d| p.night_sleep_block(*d) >= 6).count();
                assert!(long_nights as f64 >= 0.9 * 7.0, "{} seed {seed}", p.name);
                for act in Activity::ALL {
                    assert!(p.schedule.iter().flatten().any(|a| *a == act), "{} lacks {act}", p.name);
                }
            }
        }
    }

    #[test]
    fn state_ids_cover_declared_cardinality() {
        let mut env = env_for(1);
        for a in [0, 20, 10, 5] {
            let fine = env.state_id(StateBinning::Fine);
            assert!(fine < env.state_cardinality(StateBinning::Fine));
            assert_eq!(fine / TEMP_BUCKETS, env.state_id(StateBinning::Coarse));
            env.step(a).unwrap();
        }
        assert!(env.step(ACTION_COUNT).is_err());
    }

    #[test]
    fn away_hours_have_no_pmv_sample() {
        let mut env = env_for(0);
        for _ in 0..200 {
            let was = env.activity();
            let out = env.step(0).unwrap();
            assert_eq!(out.metric.is_some(), was.is_occupied());
            assert!(out.reward <= 1.0 && out.reward >= -3.0);
        }
    }
}

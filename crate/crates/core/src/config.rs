//! System parameters for a multi-AeBS RSMA deployment.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Converts a power level in dBm to linear watts.
pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf(dbm / 10.0) * 1e-3
}

/// Converts linear watts to dBm.
pub fn watts_to_dbm(watts: f64) -> f64 {
    10.0 * (watts * 1e3).log10()
}

fn default_speed_of_light() -> f64 {
    3.0e8
}

/// Every physical and system constant of the network.
///
/// All fields are mandatory in a config file except `speed_of_light`
/// (3e8 m/s), `rate_norm` (2 bit/s/Hz per GU) and `big_m`
/// (ten times the area diagonal). Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    /// Number of aerial base stations, K.
    pub num_aebs: usize,
    /// Number of ground users, N.
    pub num_gus: usize,
    /// Transmit antennas per AeBS, Nt.
    pub antennas: usize,
    /// `[x_min, x_max]` of the task area in meters.
    pub area_x: [f64; 2],
    /// `[y_min, y_max]` of the task area in meters.
    pub area_y: [f64; 2],
    /// Flight altitude H in meters.
    pub altitude_m: f64,
    /// Communication radius R in meters.
    pub comm_radius_m: f64,
    /// Minimum separation between AeBSs in meters.
    pub safety_distance_m: f64,
    /// Maximum number of GUs one AeBS may serve, N_a.
    pub max_gus_per_aebs: usize,
    pub carrier_hz: f64,
    #[serde(default = "default_speed_of_light")]
    pub speed_of_light: f64,
    /// Mean excess loss of LoS links, dB.
    pub zeta_los_db: f64,
    /// Mean excess loss of NLoS links, dB.
    pub zeta_nlos_db: f64,
    /// Environment parameter of the LoS probability (angles in degrees).
    pub eta: f64,
    /// Environment parameter of the LoS probability (per degree).
    pub varsigma: f64,
    /// Noise power, linear watts.
    pub noise_w: f64,
    /// Per-AeBS transmit power budget, linear watts.
    pub p_max_w: f64,
    /// Blocklength of the common message, D^c.
    pub blocklength_common: usize,
    /// Blocklength of the private messages, D^p.
    pub blocklength_private: usize,
    /// Decoding error probability.
    pub decoding_error: f64,
    /// Per-GU rate floor in bit/s/Hz.
    pub r_min: f64,
    /// Coverage weight of the utility.
    pub lambda1: f64,
    /// Sum-rate weight of the utility.
    pub lambda2: f64,
    /// Sum-rate normalization R_N in bit/s/Hz.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate_norm: Option<f64>,
    /// Big-M constant of the range constraint, meters.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub big_m: Option<f64>,
}

impl NetworkConfig {
    /// Reference parameter set on a 1000 m x 1000 m area.
    ///
    /// P_max is read as 10 dBm and the noise floor as -113 dBm.
    pub fn reference(num_aebs: usize, num_gus: usize) -> Self {
        NetworkConfig {
            num_aebs,
            num_gus,
            antennas: 4,
            area_x: [0.0, 1000.0],
            area_y: [0.0, 1000.0],
            altitude_m: 50.0,
            comm_radius_m: 200.0,
            safety_distance_m: 10.0,
            max_gus_per_aebs: 10,
            carrier_hz: 2.4e9,
            speed_of_light: 3.0e8,
            zeta_los_db: 1.0,
            zeta_nlos_db: 20.0,
            eta: 9.61,
            varsigma: 0.16,
            noise_w: dbm_to_watts(-113.0),
            p_max_w: dbm_to_watts(10.0),
            blocklength_common: 1000,
            blocklength_private: 1000,
            decoding_error: 1e-5,
            r_min: 1.0,
            lambda1: 1.0,
            lambda2: 1.0,
            rate_norm: None,
            big_m: None,
        }
    }

    /// Desk-scale instance: two AeBSs, eight GUs, two antennas.
    pub fn desk() -> Self {
        NetworkConfig {
            antennas: 2,
            ..Self::reference(2, 8)
        }
    }

    pub fn area_width(&self) -> f64 {
        self.area_x[1] - self.area_x[0]
    }

    pub fn area_height(&self) -> f64 {
        self.area_y[1] - self.area_y[0]
    }

    /// Largest possible AeBS-GU distance inside the area.
    pub fn max_distance(&self) -> f64 {
        (self.area_width().powi(2) + self.area_height().powi(2) + self.altitude_m.powi(2)).sqrt()
    }

    pub fn rate_norm(&self) -> f64 {
        self.rate_norm.unwrap_or(self.num_gus as f64 * 2.0)
    }

    pub fn big_m(&self) -> f64 {
        self.big_m.unwrap_or_else(|| {
            10.0 * (self.area_width().powi(2) + self.area_height().powi(2)).sqrt()
        })
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |field: &'static str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(field, format!("must be positive and finite, got {v}")))
            }
        };
        if self.num_aebs < 1 {
            return Err(Error::config("num_aebs", "need at least one AeBS"));
        }
        if self.num_gus < 2 * self.num_aebs {
            return Err(Error::config(
                "num_gus",
                format!(
                    "need at least two GUs per AeBS ({} < 2 x {})",
                    self.num_gus, self.num_aebs
                ),
            ));
        }
        if self.antennas < 1 {
            return Err(Error::config("antennas", "need at least one antenna"));
        }
        if !(self.area_x[0] < self.area_x[1]) {
            return Err(Error::config("area_x", "x_min must be below x_max"));
        }
        if !(self.area_y[0] < self.area_y[1]) {
            return Err(Error::config("area_y", "y_min must be below y_max"));
        }
        positive("altitude_m", self.altitude_m)?;
        positive("comm_radius_m", self.comm_radius_m)?;
        positive("safety_distance_m", self.safety_distance_m)?;
        if self.max_gus_per_aebs < 2 {
            return Err(Error::config("max_gus_per_aebs", "must allow at least two GUs"));
        }
        positive("carrier_hz", self.carrier_hz)?;
        positive("speed_of_light", self.speed_of_light)?;
        positive("noise_w", self.noise_w)?;
        positive("p_max_w", self.p_max_w)?;
        if self.blocklength_common < 100 {
            return Err(Error::config("blocklength_common", "must be at least 100"));
        }
        if self.blocklength_private < 100 {
            return Err(Error::config("blocklength_private", "must be at least 100"));
        }
        if !(self.decoding_error > 0.0 && self.decoding_error < 0.5) {
            return Err(Error::config("decoding_error", "must lie in (0, 0.5)"));
        }
        if !(self.r_min >= 0.0) {
            return Err(Error::config("r_min", "must be nonnegative"));
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::config("lambda1", "utility weights must be nonnegative"));
        }
        positive("rate_norm", self.rate_norm())?;
        if self.big_m() <= self.max_distance() {
            return Err(Error::config(
                "big_m",
                format!(
                    "must exceed the largest AeBS-GU distance {:.1} m",
                    self.max_distance()
                ),
            ));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> std::result::Result<Self, String> {
        let cfg: NetworkConfig = toml::from_str(text).map_err(|e| e.to_string())?;
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }

    pub fn from_json_str(text: &str) -> std::result::Result<Self, String> {
        let cfg: NetworkConfig = serde_json::from_str(text).map_err(|e| e.to_string())?;
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }

    /// Loads a TOML or JSON file, chosen by extension.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_owned(),
            source,
        })?;
        let parsed = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => Self::from_json_str(&text),
            _ => Self::from_toml_str(&text),
        };
        parsed.map_err(|reason| Error::Parse {
            path: path.to_owned(),
            reason,
        })
    }
}

//! Name-keyed strategy registries for plants, controllers and synthesised
//! tracks.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::control::{Nmpc, NmpcConfig};
use crate::dynamics::VehicleParams;
use crate::learning::GpConfig;
use crate::sim::{Controller, FullPlant, KinematicPlant, LearningMpcController, MpcController, Plant, SimError};
use crate::track::{TrackKind, TrackSpec};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("unknown {kind} `{name}`; available: {}", available.join(", "))]
pub struct UnknownName {
    pub kind: &'static str,
    pub name: String,
    pub available: Vec<String>,
}

/// Factories keyed by name; iteration order is alphabetical.
pub struct Registry<F> {
    kind: &'static str,
    entries: BTreeMap<String, F>,
}

impl<F> Registry<F> {
    pub fn new(kind: &'static str) -> Self {
        Registry {
            kind,
            entries: BTreeMap::new(),
        }
    }

    /// Later registrations under the same name replace earlier ones.
    pub fn register(&mut self, name: &str, factory: F) -> &mut Self {
        self.entries.insert(name.to_string(), factory);
        self
    }

    pub fn get(&self, name: &str) -> Result<&F, UnknownName> {
        self.entries.get(name).ok_or_else(|| UnknownName {
            kind: self.kind,
            name: name.to_string(),
            available: self.names(),
        })
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantSettings {
    pub params: VehicleParams,
    /// derivative bias of the `biased` plant over (X, Y, psi, v)
    pub bias: [f64; 4],
}

pub type PlantFactory = fn(&PlantSettings) -> Box<dyn Plant>;

pub fn plants() -> Registry<PlantFactory> {
    let mut r: Registry<PlantFactory> = Registry::new("plant");
    r.register("full", |s| Box::new(FullPlant { params: s.params }))
        .register("kinematic", |s| Box::new(KinematicPlant::new(s.params)))
        .register("biased", |s| Box::new(KinematicPlant::biased(s.params, s.bias)));
    r
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerSettings {
    pub nmpc: NmpcConfig,
    pub gp: GpConfig,
    pub params: VehicleParams,
    pub seed: u64,
}

pub type ControllerFactory = fn(&ControllerSettings) -> Result<Box<dyn Controller>, SimError>;

fn nmpc(s: &ControllerSettings) -> Result<Nmpc, SimError> {
    Nmpc::new(s.nmpc.clone(), s.params).map_err(|e| SimError::Config(e.to_string()))
}

pub fn controllers() -> Registry<ControllerFactory> {
    let mut r: Registry<ControllerFactory> = Registry::new("controller");
    r.register("mpc", |s| Ok(Box::new(MpcController { nmpc: nmpc(s)? })))
        .register("l-mpc", |s| {
            s.gp.validate().map_err(|e| SimError::Config(e.to_string()))?;
            Ok(Box::new(LearningMpcController {
                nmpc: nmpc(s)?,
                gp: s.gp.clone(),
                train_lap: 0,
                seed: s.seed,
                trained: None,
            }))
        });
    r
}

pub type TrackFactory = fn(scale: f64, width: f64) -> TrackSpec;

pub fn tracks() -> Registry<TrackFactory> {
    let mut r: Registry<TrackFactory> = Registry::new("track");
    r.register("oval", |s, w| TrackSpec::new(TrackKind::Oval, s, w))
        .register("l_shape", |s, w| TrackSpec::new(TrackKind::LShape, s, w));
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_names_resolve() {
        assert_eq!(plants().names(), ["biased", "full", "kinematic"]);
        assert_eq!(controllers().names(), ["l-mpc", "mpc"]);
        assert_eq!(tracks().names(), ["l_shape", "oval"]);
        let settings = PlantSettings {
            params: VehicleParams::default(),
            bias: [0.0; 4],
        };
        for name in plants().names() {
            assert_eq!(plants().get(&name).unwrap()(&settings).name(), name);
        }
        let cs = ControllerSettings {
            nmpc: NmpcConfig::default(),
            gp: GpConfig::default(),
            params: VehicleParams::default(),
            seed: 0,
        };
        for name in controllers().names() {
            assert_eq!(controllers().get(&name).unwrap()(&cs).unwrap().name(), name);
        }
        assert_eq!(tracks().get("oval").unwrap()(6.0, 0.8).kind, TrackKind::Oval);
    }

    #[test]
    fn unknown_name_lists_alternatives() {
        let err = controllers().get("pid").map(|_| ()).unwrap_err();
        assert_eq!(err.to_string(), "unknown controller `pid`; available: l-mpc, mpc");
    }
}

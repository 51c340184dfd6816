//! Community-network style gateway registry with a public JSON export.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::GatewayEui;
use crate::radio::TimeMs;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RegistryError {
    #[error("gateway {0} is already registered")]
    Duplicate(GatewayEui),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub eui: GatewayEui,
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub location: String,
    #[serde(default = "yes")]
    pub trusted: bool,
    #[serde(default)]
    pub last_seen: Option<TimeMs>,
}

fn yes() -> bool {
    true
}

impl RegistryEntry {
    pub fn new(eui: GatewayEui, description: &str, location: &str) -> Self {
        RegistryEntry {
            eui,
            name: eui.registry_name(),
            description: description.to_string(),
            location: location.to_string(),
            trusted: true,
            last_seen: None,
        }
    }
}

/// One record of the public gateway-data document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportedGateway {
    pub id: String,
    pub description: String,
    pub location: String,
    pub last_seen: Option<TimeMs>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Registry {
    entries: BTreeMap<GatewayEui, RegistryEntry>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, entry: RegistryEntry) -> Result<(), RegistryError> {
        if self.entries.contains_key(&entry.eui) {
            return Err(RegistryError::Duplicate(entry.eui));
        }
        self.entries.insert(entry.eui, entry);
        Ok(())
    }

    pub fn get(&self, eui: &GatewayEui) -> Option<&RegistryEntry> {
        self.entries.get(eui)
    }

    pub fn is_registered(&self, eui: &GatewayEui) -> bool {
        self.entries.contains_key(eui)
    }

    pub fn touch(&mut self, eui: &GatewayEui, now: TimeMs) {
        if let Some(e) = self.entries.get_mut(eui) {
            e.last_seen = Some(now);
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn export(&self) -> Vec<ExportedGateway> {
        self.entries
            .values()
            .map(|e| ExportedGateway {
                id: e.name.clone(),
                description: e.description.clone(),
                location: e.location.clone(),
                last_seen: e.last_seen,
            })
            .collect()
    }

    pub fn export_json(&self) -> String {
        serde_json::to_string_pretty(&self.export()).expect("export is plain data")
    }
}

/// Finds the gateway listed at `location` in an exported document.
pub fn lookup_by_location(export: &[ExportedGateway], location: &str) -> Option<GatewayEui> {
    export
        .iter()
        .find(|g| g.location == location)
        .and_then(|g| g.id.parse().ok())
}

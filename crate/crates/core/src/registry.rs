//! Typed store of machines, the capabilities they provide and the skills that
//! implement those capabilities.
//!
//! The store is loaded from a JSON registry document:
//!
//! ```json
//! {
//!   "capabilities": [{ "iri": "...", "name": "...", "inputs": [], "outputs": [] }],
//!   "machines": [{ "iri": "...", "name": "...", "skills": [] }]
//! }
//! ```
//!
//! Capabilities are plant independent and survive machine removal. Machines and
//! their skills come and go with the plant layout. Every query returns results in
//! lexicographic iri order so listings and resolution are reproducible.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::value::{Datatype, Value};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegistryError {
    #[error("malformed registry document: {0}")]
    Parse(String),
    #[error("invalid registry entry {iri}: {reason}")]
    Validation { iri: String, reason: String },
    #[error("iri already registered: {0}")]
    DuplicateIri(String),
    #[error("unknown iri: {0}")]
    UnknownIri(String),
    #[error("datatype mismatch: expected {expected}, found {found}")]
    DatatypeMismatch { expected: Datatype, found: Datatype },
}

fn invalid(iri: &str, reason: impl Into<String>) -> RegistryError {
    RegistryError::Validation {
        iri: iri.to_owned(),
        reason: reason.into(),
    }
}

/// Bound predicate on a property value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Constraint {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max: Option<Value>,
    #[serde(default, rename = "enum", skip_serializing_if = "Option::is_none")]
    pub enumeration: Option<Vec<String>>,
}

/// Data element describing one input or output of a capability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertyElement {
    pub iri: String,
    pub name: String,
    pub datatype: Datatype,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constraint: Option<Constraint>,
}

/// Which bound a value failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum FailedBound {
    Min(Value),
    Max(Value),
    Enum(Vec<String>),
}

impl fmt::Display for FailedBound {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FailedBound::Min(v) => write!(f, "min={v}"),
            FailedBound::Max(v) => write!(f, "max={v}"),
            FailedBound::Enum(values) => write!(f, "enum={}", values.join("|")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ConstraintResult {
    Satisfied,
    Violated(FailedBound),
}

impl ConstraintResult {
    pub fn is_satisfied(&self) -> bool {
        matches!(self, ConstraintResult::Satisfied)
    }
}

impl PropertyElement {
    fn validate(&self) -> Result<(), RegistryError> {
        let Some(c) = &self.constraint else {
            return Ok(());
        };
        let numeric = matches!(self.datatype, Datatype::Integer | Datatype::Real);
        for bound in [&c.min, &c.max].into_iter().flatten() {
            if !numeric || !self.datatype.accepts(bound.datatype()) {
                return Err(invalid(
                    &self.iri,
                    format!("bound {bound} does not match datatype {}", self.datatype),
                ));
            }
        }
        if let (Some(min), Some(max)) = (&c.min, &c.max) {
            if min.as_f64() > max.as_f64() {
                return Err(invalid(&self.iri, format!("min {min} exceeds max {max}")));
            }
        }
        if let Some(values) = &c.enumeration {
            if self.datatype != Datatype::String {
                return Err(invalid(&self.iri, "enumeration on a non-string property"));
            }
            if values.is_empty() {
                return Err(invalid(&self.iri, "empty enumeration"));
            }
        }
        Ok(())
    }

    /// Checks `value` against this property's constraint.
    pub fn check_constraint(&self, value: &Value) -> Result<ConstraintResult, RegistryError> {
        if !self.datatype.accepts(value.datatype()) {
            return Err(RegistryError::DatatypeMismatch {
                expected: self.datatype,
                found: value.datatype(),
            });
        }
        let Some(c) = &self.constraint else {
            return Ok(ConstraintResult::Satisfied);
        };
        if let Some(x) = value.as_f64() {
            if let Some(min) = &c.min {
                if x < min.as_f64().unwrap_or(f64::NEG_INFINITY) {
                    return Ok(ConstraintResult::Violated(FailedBound::Min(min.clone())));
                }
            }
            if let Some(max) = &c.max {
                if x > max.as_f64().unwrap_or(f64::INFINITY) {
                    return Ok(ConstraintResult::Violated(FailedBound::Max(max.clone())));
                }
            }
        }
        if let (Some(values), Value::String(s)) = (&c.enumeration, value) {
            if !values.iter().any(|v| v == s) {
                return Ok(ConstraintResult::Violated(FailedBound::Enum(values.clone())));
            }
        }
        Ok(ConstraintResult::Satisfied)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Capability {
    pub iri: String,
    pub name: String,
    #[serde(default)]
    pub inputs: Vec<PropertyElement>,
    #[serde(default)]
    pub outputs: Vec<PropertyElement>,
}

impl Capability {
    pub fn property(&self, iri: &str) -> Option<&PropertyElement> {
        self.inputs
            .iter()
            .chain(self.outputs.iter())
            .find(|p| p.iri == iri)
    }

    pub fn input(&self, iri: &str) -> Option<&PropertyElement> {
        self.inputs.iter().find(|p| p.iri == iri)
    }

    pub fn output(&self, iri: &str) -> Option<&PropertyElement> {
        self.outputs.iter().find(|p| p.iri == iri)
    }

    fn validate(&self) -> Result<(), RegistryError> {
        let mut seen = BTreeSet::new();
        for p in self.inputs.iter().chain(self.outputs.iter()) {
            if !seen.insert(p.iri.as_str()) {
                return Err(invalid(
                    &self.iri,
                    format!("property {} declared twice", p.iri),
                ));
            }
            p.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SkillVariable {
    pub name: String,
    pub datatype: Datatype,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub linked_property: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Transport {
    #[serde(rename = "in-process")]
    InProcess,
    #[serde(rename = "http")]
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SkillInterface {
    pub transport: Transport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_url: Option<String>,
    pub skill_id: String,
}

impl SkillInterface {
    pub fn in_process(skill_id: impl Into<String>) -> Self {
        SkillInterface {
            transport: Transport::InProcess,
            base_url: None,
            skill_id: skill_id.into(),
        }
    }

    pub fn http(base_url: impl Into<String>, skill_id: impl Into<String>) -> Self {
        SkillInterface {
            transport: Transport::Http,
            base_url: Some(base_url.into()),
            skill_id: skill_id.into(),
        }
    }

    fn validate(&self, owner: &str) -> Result<(), RegistryError> {
        if self.skill_id.is_empty() {
            return Err(invalid(owner, "empty skillId"));
        }
        if self.transport == Transport::Http {
            let raw = self
                .base_url
                .as_deref()
                .ok_or_else(|| invalid(owner, "http interface without baseUrl"))?;
            let parsed =
                url::Url::parse(raw).map_err(|e| invalid(owner, format!("baseUrl {raw}: {e}")))?;
            if !matches!(parsed.scheme(), "http" | "https") || parsed.cannot_be_a_base() {
                return Err(invalid(owner, format!("baseUrl {raw} is not an http url")));
            }
        }
        Ok(())
    }
}

/// Skill as it appears inside a machine entry of the registry document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillDocument {
    pub iri: String,
    pub name: String,
    pub capability: String,
    #[serde(default)]
    pub parameters: Vec<SkillVariable>,
    #[serde(default)]
    pub results: Vec<SkillVariable>,
    pub interface: SkillInterface,
}

/// A machine together with the skills it hosts; the unit of (un)registration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MachineDocument {
    pub iri: String,
    pub name: String,
    #[serde(default)]
    pub skills: Vec<SkillDocument>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RegistryDocument {
    #[serde(default)]
    pub capabilities: Vec<Capability>,
    #[serde(default)]
    pub machines: Vec<MachineDocument>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MachineDescriptor {
    pub iri: String,
    pub name: String,
    pub skill_iris: Vec<String>,
}

/// Executable implementation of one capability on one machine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Skill {
    pub iri: String,
    pub name: String,
    pub capability_iri: String,
    pub machine_iri: String,
    pub parameters: Vec<SkillVariable>,
    pub results: Vec<SkillVariable>,
    pub interface: SkillInterface,
}

impl Skill {
    pub fn parameter(&self, name: &str) -> Option<&SkillVariable> {
        self.parameters.iter().find(|v| v.name == name)
    }

    pub fn result(&self, name: &str) -> Option<&SkillVariable> {
        self.results.iter().find(|v| v.name == name)
    }

    pub fn parameter_linked_to(&self, property_iri: &str) -> Option<&SkillVariable> {
        self.parameters
            .iter()
            .find(|v| v.linked_property.as_deref() == Some(property_iri))
    }

    pub fn result_linked_to(&self, property_iri: &str) -> Option<&SkillVariable> {
        self.results
            .iter()
            .find(|v| v.linked_property.as_deref() == Some(property_iri))
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Registry {
    capabilities: BTreeMap<String, Capability>,
    machines: BTreeMap<String, MachineDescriptor>,
    skills: BTreeMap<String, Skill>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parses and validates a registry document.
    pub fn load(document: &[u8]) -> Result<Registry, RegistryError> {
        let doc: RegistryDocument =
            serde_json::from_slice(document).map_err(|e| RegistryError::Parse(e.to_string()))?;
        Registry::from_document(doc)
    }

    pub fn from_document(doc: RegistryDocument) -> Result<Registry, RegistryError> {
        let mut registry = Registry::new();
        for cap in doc.capabilities {
            registry.add_capability(cap).map_err(|e| match e {
                RegistryError::DuplicateIri(iri) => invalid(&iri, "duplicate iri"),
                other => other,
            })?;
        }
        for machine in doc.machines {
            registry.register_machine(machine).map_err(|e| match e {
                RegistryError::DuplicateIri(iri) => invalid(&iri, "duplicate iri"),
                other => other,
            })?;
        }
        Ok(registry)
    }

    pub fn to_document(&self) -> RegistryDocument {
        RegistryDocument {
            capabilities: self.capabilities.values().cloned().collect(),
            machines: self
                .machines
                .keys()
                .map(|iri| self.machine_document(iri).expect("machine present"))
                .collect(),
        }
    }

    fn contains_iri(&self, iri: &str) -> bool {
        self.capabilities.contains_key(iri)
            || self.machines.contains_key(iri)
            || self.skills.contains_key(iri)
    }

    pub fn add_capability(&mut self, cap: Capability) -> Result<(), RegistryError> {
        if self.contains_iri(&cap.iri) {
            return Err(RegistryError::DuplicateIri(cap.iri));
        }
        cap.validate()?;
        self.capabilities.insert(cap.iri.clone(), cap);
        Ok(())
    }

    fn validate_skill(&self, doc: &SkillDocument) -> Result<(), RegistryError> {
        let cap = self.capabilities.get(&doc.capability).ok_or_else(|| {
            invalid(
                &doc.capability,
                format!("capability referenced by skill {} does not exist", doc.iri),
            )
        })?;
        let mut names = BTreeSet::new();
        for var in doc.parameters.iter().chain(doc.results.iter()) {
            if !names.insert(var.name.as_str()) {
                return Err(invalid(&doc.iri, format!("variable {} declared twice", var.name)));
            }
            if let Some(linked) = &var.linked_property {
                let prop = cap.property(linked).ok_or_else(|| {
                    invalid(
                        &doc.iri,
                        format!("variable {} links unknown property {linked}", var.name),
                    )
                })?;
                if prop.datatype != var.datatype {
                    return Err(invalid(
                        &doc.iri,
                        format!(
                            "variable {} is {} but property {linked} is {}",
                            var.name, var.datatype, prop.datatype
                        ),
                    ));
                }
            }
        }
        doc.interface.validate(&doc.iri)
    }

    /// Adds a machine and all of its skills. Either everything is added or
    /// nothing is.
    pub fn register_machine(&mut self, machine: MachineDocument) -> Result<(), RegistryError> {
        if self.contains_iri(&machine.iri) {
            return Err(RegistryError::DuplicateIri(machine.iri));
        }
        let mut fresh = BTreeSet::new();
        for skill in &machine.skills {
            if self.contains_iri(&skill.iri)
                || skill.iri == machine.iri
                || !fresh.insert(skill.iri.as_str())
            {
                return Err(RegistryError::DuplicateIri(skill.iri.clone()));
            }
            self.validate_skill(skill)?;
        }
        let descriptor = MachineDescriptor {
            iri: machine.iri.clone(),
            name: machine.name,
            skill_iris: machine.skills.iter().map(|s| s.iri.clone()).collect(),
        };
        for s in machine.skills {
            self.skills.insert(
                s.iri.clone(),
                Skill {
                    iri: s.iri,
                    name: s.name,
                    capability_iri: s.capability,
                    machine_iri: machine.iri.clone(),
                    parameters: s.parameters,
                    results: s.results,
                    interface: s.interface,
                },
            );
        }
        self.machines.insert(machine.iri, descriptor);
        Ok(())
    }

    /// Removes a machine and its skills, returning them as a document that can
    /// be registered again. Capabilities are left untouched.
    pub fn unregister_machine(&mut self, iri: &str) -> Result<MachineDocument, RegistryError> {
        let doc = self
            .machine_document(iri)
            .ok_or_else(|| RegistryError::UnknownIri(iri.to_owned()))?;
        let descriptor = self.machines.remove(iri).expect("checked above");
        for skill in &descriptor.skill_iris {
            self.skills.remove(skill);
        }
        Ok(doc)
    }

    pub fn machine_document(&self, iri: &str) -> Option<MachineDocument> {
        let m = self.machines.get(iri)?;
        Some(MachineDocument {
            iri: m.iri.clone(),
            name: m.name.clone(),
            skills: m
                .skill_iris
                .iter()
                .map(|s| {
                    let s = &self.skills[s];
                    SkillDocument {
                        iri: s.iri.clone(),
                        name: s.name.clone(),
                        capability: s.capability_iri.clone(),
                        parameters: s.parameters.clone(),
                        results: s.results.clone(),
                        interface: s.interface.clone(),
                    }
                })
                .collect(),
        })
    }

    /// Skills executing `capability_iri`, sorted by skill iri.
    pub fn skills_for_capability(&self, capability_iri: &str) -> Result<Vec<&Skill>, RegistryError> {
        if !self.capabilities.contains_key(capability_iri) {
            return Err(RegistryError::UnknownIri(capability_iri.to_owned()));
        }
        // BTreeMap iteration is already lexicographic.
        Ok(self
            .skills
            .values()
            .filter(|s| s.capability_iri == capability_iri)
            .collect())
    }

    pub fn capability(&self, iri: &str) -> Option<&Capability> {
        self.capabilities.get(iri)
    }

    pub fn machine(&self, iri: &str) -> Option<&MachineDescriptor> {
        self.machines.get(iri)
    }

    pub fn skill(&self, iri: &str) -> Option<&Skill> {
        self.skills.get(iri)
    }

    pub fn capabilities(&self) -> impl Iterator<Item = &Capability> {
        self.capabilities.values()
    }

    pub fn machines(&self) -> impl Iterator<Item = &MachineDescriptor> {
        self.machines.values()
    }

    pub fn skills(&self) -> impl Iterator<Item = &Skill> {
        self.skills.values()
    }

    pub fn is_empty(&self) -> bool {
        self.capabilities.is_empty() && self.machines.is_empty()
    }
}

/// Free-function form of [`PropertyElement::check_constraint`].
pub fn check_constraint(
    property: &PropertyElement,
    value: &Value,
) -> Result<ConstraintResult, RegistryError> {
    property.check_constraint(value)
}

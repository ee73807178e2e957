//! System definitions (SysDef) and system configurations (SysCfg).
//!
//! A SysDef describes one catalogued system: its container image, the
//! build and run commands, typed parameters with defaults, and the result
//! files a run produces. A SysCfg is a complete assignment of values to
//! those parameters and is what gets materialized as `syscfg.json` inside
//! a job workspace.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::de::{self, MapAccess, Visitor};
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;

use crate::canonical;

/// Largest magnitude up to which every integer is exactly representable.
const EXACT_INTEGER_LIMIT: f64 = 9_007_199_254_740_992.0;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum SysdefError {
    #[error("malformed JSON: {0}")]
    Syntax(String),
    #[error("schema violation: {0}")]
    Schema(String),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("parameter `{name}` expects a {expected} value, got {got}")]
    KindMismatch {
        name: String,
        expected: ParamKind,
        got: ParamKind,
    },
    #[error("file parameter `{0}` cannot take an inline value, upload a file instead")]
    FileParamInlineValue(String),
    #[error("file parameter `{0}` has no staged file")]
    MissingUpload(String),
    #[error("configuration targets {got} but the system is {expected}")]
    SystemMismatch { expected: SystemRef, got: SystemRef },
}

impl SysdefError {
    fn from_json(err: serde_json::Error) -> Self {
        use serde_json::error::Category;
        match err.classify() {
            Category::Syntax | Category::Eof | Category::Io => SysdefError::Syntax(err.to_string()),
            Category::Data => SysdefError::Schema(err.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Build,
    Run,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Build => "build",
            Phase::Run => "run",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Text,
    Number,
    Flag,
    File,
}

impl fmt::Display for ParamKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ParamKind::Text => "text",
            ParamKind::Number => "number",
            ParamKind::Flag => "flag",
            ParamKind::File => "file",
        })
    }
}

/// A parameter value as it appears in SysDef defaults and SysCfg documents.
///
/// Strings, numbers and booleans map onto native JSON values. File
/// parameters are objects of the form `{"value": "<path>", "is_file": true}`.
#[derive(Debug, Clone, PartialEq)]
pub enum ParamValue {
    Text(String),
    Number(f64),
    Flag(bool),
    File(String),
}

impl ParamValue {
    pub fn kind(&self) -> ParamKind {
        match self {
            ParamValue::Text(_) => ParamKind::Text,
            ParamValue::Number(_) => ParamKind::Number,
            ParamValue::Flag(_) => ParamKind::Flag,
            ParamValue::File(_) => ParamKind::File,
        }
    }

    pub fn to_json(&self) -> Value {
        match self {
            ParamValue::Text(s) => Value::String(s.clone()),
            ParamValue::Number(n) => number_to_json(*n),
            ParamValue::Flag(b) => Value::Bool(*b),
            ParamValue::File(path) => {
                let mut obj = serde_json::Map::new();
                obj.insert("is_file".into(), Value::Bool(true));
                obj.insert("value".into(), Value::String(path.clone()));
                Value::Object(obj)
            }
        }
    }

    pub fn from_json(value: &Value) -> Result<Self, String> {
        match value {
            Value::String(s) => Ok(ParamValue::Text(s.clone())),
            Value::Bool(b) => Ok(ParamValue::Flag(*b)),
            Value::Number(n) => n
                .as_f64()
                .filter(|f| f.is_finite())
                .map(ParamValue::Number)
                .ok_or_else(|| format!("number {n} is not representable")),
            Value::Object(obj) => {
                match obj.get("is_file") {
                    Some(Value::Bool(true)) => {}
                    Some(_) => return Err("`is_file` must be true".into()),
                    None => return Err("object values must be file descriptors with `is_file: true`".into()),
                }
                if let Some(extra) = obj.keys().find(|k| *k != "is_file" && *k != "value") {
                    return Err(format!("unexpected key `{extra}` in file descriptor"));
                }
                match obj.get("value") {
                    Some(Value::String(s)) => Ok(ParamValue::File(s.clone())),
                    Some(_) => Err("file descriptor `value` must be a string".into()),
                    None => Err("file descriptor is missing `value`".into()),
                }
            }
            Value::Null => Err("null is not a parameter value".into()),
            Value::Array(_) => Err("arrays are not parameter values".into()),
        }
    }
}

fn number_to_json(n: f64) -> Value {
    if n.fract() == 0.0 && n.abs() <= EXACT_INTEGER_LIMIT {
        Value::from(n as i64)
    } else {
        serde_json::Number::from_f64(n)
            .map(Value::Number)
            .unwrap_or(Value::Null)
    }
}

impl Serialize for ParamValue {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_json().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for ParamValue {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let value = Value::deserialize(deserializer)?;
        ParamValue::from_json(&value).map_err(de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub phase: Phase,
    pub default: ParamValue,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResultSpec {
    #[serde(skip)]
    pub name: String,
    pub path: String,
    #[serde(rename = "type")]
    pub kind: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Documentation {
    #[serde(default)]
    pub contact: String,
    #[serde(default)]
    pub summary: String,
    #[serde(default)]
    pub description: String,
}

/// Catalog identity of a system.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemRef {
    pub name: String,
    pub version: String,
}

impl fmt::Display for SystemRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.name, self.version)
    }
}

/// Parsed System Definition.
///
/// Parameters and results are kept sorted by name so that a definition
/// compares equal to its own re-parsed canonical serialization.
#[derive(Debug, Clone, PartialEq)]
pub struct SysDef {
    pub name: String,
    pub version: String,
    pub documentation: Documentation,
    pub image_ref: String,
    pub build_command: Option<String>,
    pub run_command: String,
    pub build_parameters: Vec<ParamSpec>,
    pub run_parameters: Vec<ParamSpec>,
    pub results: Vec<ResultSpec>,
}

/// Wire layout of a SysDef document. Key names follow the interchange
/// format, including `docker_image` for the image reference.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SysDefDoc {
    name: String,
    version: String,
    #[serde(default)]
    documentation: Documentation,
    docker_image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    build_command: Option<String>,
    run_command: String,
    #[serde(default)]
    build_parameters: UniqueMap<ParamValue>,
    #[serde(default)]
    run_parameters: UniqueMap<ParamValue>,
    #[serde(default)]
    results: UniqueMap<ResultSpec>,
}

/// JSON object that rejects repeated keys instead of keeping the last one.
struct UniqueMap<T>(Vec<(String, T)>);

impl<T> Default for UniqueMap<T> {
    fn default() -> Self {
        UniqueMap(Vec::new())
    }
}

impl<T: Serialize> Serialize for UniqueMap<T> {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(Some(self.0.len()))?;
        for (k, v) in &self.0 {
            map.serialize_entry(k, v)?;
        }
        map.end()
    }
}

impl<'de, T: Deserialize<'de>> Deserialize<'de> for UniqueMap<T> {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct UniqueVisitor<T>(std::marker::PhantomData<T>);

        impl<'de, T: Deserialize<'de>> Visitor<'de> for UniqueVisitor<T> {
            type Value = UniqueMap<T>;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a JSON object")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut access: A) -> Result<Self::Value, A::Error> {
                let mut seen = BTreeSet::new();
                let mut entries = Vec::new();
                while let Some(key) = access.next_key::<String>()? {
                    if !seen.insert(key.clone()) {
                        return Err(de::Error::custom(format!("duplicate parameter name `{key}`")));
                    }
                    entries.push((key, access.next_value()?));
                }
                Ok(UniqueMap(entries))
            }
        }

        deserializer.deserialize_map(UniqueVisitor(std::marker::PhantomData))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    NonEmpty,
    Traversal,
    Absolute,
    DuplicateName,
    BuildParametersWithoutBuild,
    InvalidIdentifier,
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Rule::NonEmpty => "must be non-empty",
            Rule::Traversal => "must not contain `..` segments",
            Rule::Absolute => "must be a relative path",
            Rule::DuplicateName => "name is used more than once",
            Rule::BuildParametersWithoutBuild => "build parameters require a build command",
            Rule::InvalidIdentifier => "is not a valid identifier",
        })
    }
}

/// One broken SysDef invariant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub field: String,
    pub rule: Rule,
}

impl Violation {
    fn new(field: impl Into<String>, rule: Rule) -> Self {
        Violation { field: field.into(), rule }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.field, self.rule)
    }
}

/// Checks that `path` is workspace-relative and free of `..` segments.
pub fn check_relative_path(path: &str) -> Result<(), Rule> {
    if path.is_empty() {
        return Err(Rule::NonEmpty);
    }
    if path.starts_with('/') || path.starts_with('\\') || path.as_bytes().get(1) == Some(&b':') {
        return Err(Rule::Absolute);
    }
    if path.split(['/', '\\']).any(|seg| seg == "..") {
        return Err(Rule::Traversal);
    }
    Ok(())
}

fn is_identifier(name: &str) -> bool {
    !name.is_empty()
        && !name.contains(['/', '\\'])
        && name != "."
        && name != ".."
        && !name.chars().any(char::is_control)
}

pub fn parse_sysdef(text: &str) -> Result<SysDef, SysdefError> {
    let doc: SysDefDoc = serde_json::from_str(text).map_err(SysdefError::from_json)?;
    let def = SysDef::from_doc(doc)?;
    let violations = validate_sysdef(&def);
    if violations.is_empty() {
        Ok(def)
    } else {
        let joined = violations.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ");
        Err(SysdefError::Schema(joined))
    }
}

pub fn validate_sysdef(def: &SysDef) -> Vec<Violation> {
    let mut out = Vec::new();
    for (field, value) in [
        ("name", &def.name),
        ("version", &def.version),
        ("run_command", &def.run_command),
        ("image_ref", &def.image_ref),
    ] {
        if value.trim().is_empty() {
            out.push(Violation::new(field, Rule::NonEmpty));
        }
    }
    if let Some(cmd) = &def.build_command {
        if cmd.trim().is_empty() {
            out.push(Violation::new("build_command", Rule::NonEmpty));
        }
    } else if !def.build_parameters.is_empty() {
        out.push(Violation::new("build_parameters", Rule::BuildParametersWithoutBuild));
    }

    let mut seen = BTreeSet::new();
    for spec in def.build_parameters.iter().chain(&def.run_parameters) {
        let section = match spec.phase {
            Phase::Build => "build_parameters",
            Phase::Run => "run_parameters",
        };
        if !is_identifier(&spec.name) {
            out.push(Violation::new(format!("{section}.{}", spec.name), Rule::InvalidIdentifier));
        }
        if !seen.insert(spec.name.as_str()) {
            out.push(Violation::new(format!("{section}.{}", spec.name), Rule::DuplicateName));
        }
    }

    let mut seen = BTreeSet::new();
    for result in &def.results {
        if !is_identifier(&result.name) {
            out.push(Violation::new(format!("results.{}", result.name), Rule::InvalidIdentifier));
        }
        if !seen.insert(result.name.as_str()) {
            out.push(Violation::new(format!("results.{}", result.name), Rule::DuplicateName));
        }
        if let Err(rule) = check_relative_path(&result.path) {
            out.push(Violation::new(format!("results.{}.path", result.name), rule));
        }
        if result.kind.trim().is_empty() {
            out.push(Violation::new(format!("results.{}.type", result.name), Rule::NonEmpty));
        }
    }
    out
}

/// Phase and value kind of a single parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParamClass {
    pub phase: Phase,
    pub kind: ParamKind,
}

impl SysDef {
    fn from_doc(doc: SysDefDoc) -> Result<Self, SysdefError> {
        let specs = |map: UniqueMap<ParamValue>, phase| {
            let mut v: Vec<ParamSpec> = map
                .0
                .into_iter()
                .map(|(name, default)| ParamSpec { name, phase, default })
                .collect();
            v.sort_by(|a, b| a.name.cmp(&b.name));
            v
        };
        let mut results: Vec<ResultSpec> = doc
            .results
            .0
            .into_iter()
            .map(|(name, mut r)| {
                r.name = name;
                r
            })
            .collect();
        results.sort_by(|a, b| a.name.cmp(&b.name));
        Ok(SysDef {
            name: doc.name,
            version: doc.version,
            documentation: doc.documentation,
            image_ref: doc.docker_image,
            build_command: doc.build_command,
            run_command: doc.run_command,
            build_parameters: specs(doc.build_parameters, Phase::Build),
            run_parameters: specs(doc.run_parameters, Phase::Run),
            results,
        })
    }

    fn to_doc(&self) -> SysDefDoc {
        let params = |specs: &[ParamSpec]| {
            UniqueMap(specs.iter().map(|s| (s.name.clone(), s.default.clone())).collect())
        };
        SysDefDoc {
            name: self.name.clone(),
            version: self.version.clone(),
            documentation: self.documentation.clone(),
            docker_image: self.image_ref.clone(),
            build_command: self.build_command.clone(),
            run_command: self.run_command.clone(),
            build_parameters: params(&self.build_parameters),
            run_parameters: params(&self.run_parameters),
            results: UniqueMap(self.results.iter().map(|r| (r.name.clone(), r.clone())).collect()),
        }
    }

    pub fn system_ref(&self) -> SystemRef {
        SystemRef { name: self.name.clone(), version: self.version.clone() }
    }

    pub fn has_build(&self) -> bool {
        self.build_command.is_some()
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(self.to_doc()).expect("SysDef serializes to JSON")
    }

    /// Canonical text form: sorted keys, two-space indent, trailing LF.
    pub fn to_canonical_string(&self) -> String {
        canonical::to_string(&self.to_json())
    }

    pub fn params(&self) -> impl Iterator<Item = &ParamSpec> {
        self.build_parameters.iter().chain(&self.run_parameters)
    }

    pub fn param(&self, name: &str) -> Option<&ParamSpec> {
        self.params().find(|p| p.name == name)
    }

    pub fn result(&self, name: &str) -> Option<&ResultSpec> {
        self.results.iter().find(|r| r.name == name)
    }

    pub fn file_params(&self) -> impl Iterator<Item = &ParamSpec> {
        self.params().filter(|p| p.default.kind() == ParamKind::File)
    }

    pub fn classify_param(&self, name: &str) -> Result<ParamClass, SysdefError> {
        self.param(name)
            .map(|p| ParamClass { phase: p.phase, kind: p.default.kind() })
            .ok_or_else(|| SysdefError::UnknownParameter(name.to_string()))
    }
}

impl Serialize for SysDef {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_doc().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for SysDef {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let doc = SysDefDoc::deserialize(deserializer)?;
        SysDef::from_doc(doc).map_err(de::Error::custom)
    }
}

pub fn classify_param(def: &SysDef, name: &str) -> Result<ParamClass, SysdefError> {
    def.classify_param(name)
}

/// Concrete parameter assignment for one system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SysCfg {
    pub system: SystemRef,
    #[serde(default)]
    pub build_parameters: BTreeMap<String, ParamValue>,
    #[serde(default)]
    pub run_parameters: BTreeMap<String, ParamValue>,
}

/// Disagreement between a SysCfg and the SysDef it claims to configure.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "issue", rename_all = "snake_case")]
pub enum CfgIssue {
    SystemMismatch { expected: SystemRef, got: SystemRef },
    Unknown { name: String },
    Missing { name: String },
    WrongPhase { name: String, expected: Phase },
    KindMismatch { name: String, expected: ParamKind, got: ParamKind },
}

impl SysCfg {
    pub fn get(&self, name: &str) -> Option<&ParamValue> {
        self.build_parameters.get(name).or_else(|| self.run_parameters.get(name))
    }

    fn section_mut(&mut self, phase: Phase) -> &mut BTreeMap<String, ParamValue> {
        match phase {
            Phase::Build => &mut self.build_parameters,
            Phase::Run => &mut self.run_parameters,
        }
    }

    /// Lists every key-set or kind disagreement with `def`. Empty means
    /// the configuration is consistent.
    pub fn check_against(&self, def: &SysDef) -> Vec<CfgIssue> {
        let mut issues = Vec::new();
        if self.system != def.system_ref() {
            issues.push(CfgIssue::SystemMismatch { expected: def.system_ref(), got: self.system.clone() });
        }
        for (phase, section) in [(Phase::Build, &self.build_parameters), (Phase::Run, &self.run_parameters)] {
            for (name, value) in section {
                match def.param(name) {
                    None => issues.push(CfgIssue::Unknown { name: name.clone() }),
                    Some(spec) if spec.phase != phase => {
                        issues.push(CfgIssue::WrongPhase { name: name.clone(), expected: spec.phase })
                    }
                    Some(spec) if spec.default.kind() != value.kind() => issues.push(CfgIssue::KindMismatch {
                        name: name.clone(),
                        expected: spec.default.kind(),
                        got: value.kind(),
                    }),
                    Some(_) => {}
                }
            }
        }
        for spec in def.params() {
            let section = match spec.phase {
                Phase::Build => &self.build_parameters,
                Phase::Run => &self.run_parameters,
            };
            if !section.contains_key(&spec.name) {
                issues.push(CfgIssue::Missing { name: spec.name.clone() });
            }
        }
        issues
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("SysCfg serializes to JSON")
    }

    pub fn to_canonical_string(&self) -> String {
        canonical::to_string(&self.to_json())
    }
}

pub fn derive_syscfg(def: &SysDef) -> SysCfg {
    let section = |specs: &[ParamSpec]| {
        specs.iter().map(|s| (s.name.clone(), s.default.clone())).collect::<BTreeMap<_, _>>()
    };
    SysCfg {
        system: def.system_ref(),
        build_parameters: section(&def.build_parameters),
        run_parameters: section(&def.run_parameters),
    }
}

/// Checks a single override against the definition without applying it.
pub fn check_override(def: &SysDef, name: &str, value: &ParamValue) -> Result<ParamClass, SysdefError> {
    let class = def.classify_param(name)?;
    let got = value.kind();
    if class.kind == ParamKind::File && got != ParamKind::File {
        return Err(SysdefError::FileParamInlineValue(name.to_string()));
    }
    if class.kind != got {
        return Err(SysdefError::KindMismatch { name: name.to_string(), expected: class.kind, got });
    }
    Ok(class)
}

/// Returns `cfg` with `overrides` applied. Either every override is valid
/// and applied, or none is.
pub fn apply_overrides(
    cfg: &SysCfg,
    def: &SysDef,
    overrides: &BTreeMap<String, ParamValue>,
) -> Result<SysCfg, SysdefError> {
    if cfg.system != def.system_ref() {
        return Err(SysdefError::SystemMismatch { expected: def.system_ref(), got: cfg.system.clone() });
    }
    let mut out = cfg.clone();
    for (name, value) in overrides {
        let class = check_override(def, name, value)?;
        out.section_mut(class.phase).insert(name.clone(), value.clone());
    }
    Ok(out)
}

/// Renders the canonical `syscfg.json` document, rewriting every file
/// parameter to the workspace path it was staged at.
pub fn materialize_syscfg(
    cfg: &SysCfg,
    staged_files: &BTreeMap<String, String>,
) -> Result<String, SysdefError> {
    let mut out = cfg.clone();
    for section in [&mut out.build_parameters, &mut out.run_parameters] {
        for (name, value) in section.iter_mut() {
            if let ParamValue::File(path) = value {
                let staged = staged_files
                    .get(name)
                    .ok_or_else(|| SysdefError::MissingUpload(name.clone()))?;
                *path = staged.clone();
            }
        }
    }
    Ok(out.to_canonical_string())
}

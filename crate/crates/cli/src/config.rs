//! Job configuration: one flat JSON object whose keys are the simulation
//! keys, the reconstruction keys and the file paths. Values are resolved as
//! defaults, then the `--config` file, then command-line flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use svr_core::simulate::SimConfig;
use svr_core::solver::ReconConfig;

use crate::Failure;

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathConfig {
    /// Input volume of `simulate`.
    #[serde(rename = "in")]
    pub input: Option<PathBuf>,
    pub out_stack: Option<PathBuf>,
    pub out_motion: Option<PathBuf>,
    /// Defaults to the stack path with a `.json` extension.
    pub sidecar: Option<PathBuf>,
    /// Input stacks of `reconstruct`.
    pub stacks: Vec<PathBuf>,
    /// Ground-truth motion, one per stack, for EPE reporting.
    pub truth_motion: Vec<PathBuf>,
    pub out_dir: Option<PathBuf>,
    /// `axis,spacing,slab` for stack files without a stack tag.
    pub stack_geometry: Option<String>,
}

#[derive(Clone, Debug)]
pub struct JobConfig {
    pub sim: SimConfig,
    pub recon: ReconConfig,
    pub paths: PathConfig,
    /// Every key with its resolved value.
    pub resolved: Map<String, Value>,
}

fn object<T: Serialize>(x: &T) -> Map<String, Value> {
    match serde_json::to_value(x) {
        Ok(Value::Object(m)) => m,
        _ => unreachable!("config structs serialize to objects"),
    }
}

/// Flag values that were given on the command line.
#[derive(Default)]
pub struct Overrides(Map<String, Value>);

impl Overrides {
    pub fn set<T: Serialize>(&mut self, key: &str, value: Option<T>) -> &mut Self {
        if let Some(v) = value {
            self.0.insert(key.to_string(), serde_json::to_value(v).expect("flag values serialize"));
        }
        self
    }

    pub fn set_list<T: Serialize>(&mut self, key: &str, values: &[T]) -> &mut Self {
        if !values.is_empty() {
            self.0.insert(key.to_string(), serde_json::to_value(values).expect("flag values serialize"));
        }
        self
    }
}

fn apply(doc: &mut Map<String, Value>, layer: Map<String, Value>, source: &str) -> Result<(), Failure> {
    for (k, v) in layer {
        if !doc.contains_key(&k) {
            return Err(Failure::config(format!("unknown key '{k}' in {source}")));
        }
        doc.insert(k, v);
    }
    Ok(())
}

fn pick<T: serde::de::DeserializeOwned>(doc: &Map<String, Value>, keys: &Map<String, Value>) -> Result<T, Failure> {
    let sub: Map<String, Value> = keys.keys().map(|k| (k.clone(), doc[k].clone())).collect();
    serde_json::from_value(Value::Object(sub)).map_err(|e| Failure::config(e.to_string()))
}

impl JobConfig {
    /// The default document, i.e. every accepted key.
    pub fn defaults() -> Map<String, Value> {
        let mut doc = object(&SimConfig::default());
        doc.extend(object(&ReconConfig::default()));
        doc.extend(object(&PathConfig::default()));
        doc
    }

    pub fn resolve(file: Option<&Path>, flags: Overrides) -> Result<Self, Failure> {
        let sim_keys = object(&SimConfig::default());
        let recon_keys = object(&ReconConfig::default());
        let path_keys = object(&PathConfig::default());
        let mut doc = Self::defaults();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)?;
            let value: Value = serde_json::from_str(&text)
                .map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
            let Value::Object(layer) = value else {
                return Err(Failure::config(format!("{}: expected a JSON object", path.display())));
            };
            apply(&mut doc, layer, &path.display().to_string())?;
        }
        apply(&mut doc, flags.0, "flags")?;
        let sim: SimConfig = pick(&doc, &sim_keys)?;
        let recon: ReconConfig = pick(&doc, &recon_keys)?;
        let paths: PathConfig = pick(&doc, &path_keys)?;
        sim.validate()?;
        recon.validate()?;
        Ok(Self { sim, recon, paths, resolved: doc })
    }
}

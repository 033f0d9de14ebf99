//! Loading the structured text files each command consumes.
//!
//! Every spec is TOML. Missing fields fall back to the library defaults, so
//! an empty file is a valid evo, train, or distill spec.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Deserialize;
use snf_core::model::{SubnetworkConfig, SupernetConfig};
use snf_core::search::ParamBin;
use snf_core::{Error, Violation};

/// Read a file, attaching the path to any I/O error.
pub fn read(path: &Path) -> Result<Vec<u8>, Error> {
    fs::read(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

pub fn parse<T: DeserializeOwned>(path: &Path, what: &'static str) -> Result<T, Error> {
    let bytes = read(path)?;
    let text = String::from_utf8(bytes).map_err(|_| parse_error(what, path, "not UTF-8"))?;
    toml::from_str(&text).map_err(|e| parse_error(what, path, &e.to_string()))
}

/// A spec from `path`, or the default when no file is given.
pub fn parse_or_default<T: DeserializeOwned + Default>(path: Option<&Path>, what: &'static str) -> Result<T, Error> {
    path.map_or_else(|| Ok(T::default()), |p| parse(p, what))
}

fn parse_error(what: &'static str, path: &Path, msg: &str) -> Error {
    Error::Validation(vec![Violation::new(what, format!("{}: {}", path.display(), msg.trim()))])
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct BinsFile {
    bins: Vec<ParamBin>,
}

/// `[[bins]]` tables with `lower` and `upper` parameter counts.
pub fn bins(path: &Path) -> Result<Vec<ParamBin>, Error> {
    let f: BinsFile = parse(path, "bins")?;
    if f.bins.is_empty() {
        return Err(Error::validation("bins", "no bins given"));
    }
    f.bins.iter().map(|b| ParamBin::new(b.lower, b.upper)).collect()
}

pub fn supernet_config(path: &Path) -> Result<SupernetConfig, Error> {
    let c: SupernetConfig = parse(path, "supernet")?;
    c.validate()?;
    Ok(c)
}

pub fn subnetwork(path: &Path) -> Result<SubnetworkConfig, Error> {
    parse(path, "config")
}

pub fn subnetwork_toml(cfg: &SubnetworkConfig) -> String {
    toml::to_string(cfg).expect("config serializes")
}

//! Resolved configuration: command defaults, then the `--config` file, then
//! flags. Flags are serialized with `None` fields skipped, so only the ones
//! actually given take part in the overlay.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

pub fn load_file(path: &Path) -> Result<Map<String, Value>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    match serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))? {
        Value::Object(map) => Ok(map),
        _ => bail!("config {} must hold a JSON object", path.display()),
    }
}

pub fn resolve<C, F>(file: Option<&Map<String, Value>>, flags: &F, seed: Option<u64>) -> Result<C>
where
    C: Default + Serialize + DeserializeOwned,
    F: Serialize,
{
    let mut merged = match serde_json::to_value(C::default())? {
        Value::Object(map) => map,
        _ => unreachable!("configs are structs"),
    };
    if let Some(file) = file {
        merged.extend(file.clone());
    }
    if let Value::Object(map) = serde_json::to_value(flags)? {
        merged.extend(map);
    }
    if let Some(seed) = seed {
        merged.insert("seed".into(), seed.into());
    }
    serde_json::from_value(Value::Object(merged)).context("invalid configuration")
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Default, Serialize, Deserialize, Debug, PartialEq)]
    #[serde(deny_unknown_fields)]
    struct Conf {
        seed: u64,
        n: usize,
        h: f64,
    }

    #[derive(Serialize)]
    struct Flags {
        #[serde(skip_serializing_if = "Option::is_none")]
        n: Option<usize>,
    }

    #[test]
    fn flags_override_file_override_defaults() {
        let file: Map<String, Value> = serde_json::from_str(r#"{"n": 3, "h": 0.5}"#).unwrap();
        let c: Conf = resolve(Some(&file), &Flags { n: Some(7) }, Some(2)).unwrap();
        assert_eq!(c, Conf { seed: 2, n: 7, h: 0.5 });
        let c: Conf = resolve(Some(&file), &Flags { n: None }, None).unwrap();
        assert_eq!(c, Conf { seed: 0, n: 3, h: 0.5 });
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let file: Map<String, Value> = serde_json::from_str(r#"{"typo": 1}"#).unwrap();
        assert!(resolve::<Conf, _>(Some(&file), &Flags { n: None }, None).is_err());
    }
}

//! Flat `key = value` config files with one section per subcommand.
//!
//! ```text
//! # comment
//! [train]
//! epochs = 5
//! lr = 0.0001
//! ```
//!
//! Command-line flags override file values; file values override built-in
//! defaults. Unknown sections and keys are rejected.

use std::collections::BTreeMap;

/// Parsed file: section name -> key -> value.
pub type FileConfig = BTreeMap<String, BTreeMap<String, String>>;

pub fn parse_config(text: &str) -> Result<FileConfig, String> {
    let mut out = FileConfig::new();
    let mut section: Option<String> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| format!("line {}: unterminated section header", i + 1))?
                .trim();
            if name.is_empty() {
                return Err(format!("line {}: empty section name", i + 1));
            }
            section = Some(name.to_string());
            out.entry(name.to_string()).or_default();
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(format!(
                "line {}: expected `key = value`, got {line:?}",
                i + 1
            ));
        };
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if key.is_empty() {
            return Err(format!("line {}: empty key", i + 1));
        }
        let Some(section) = &section else {
            return Err(format!(
                "line {}: key {key:?} appears before any [section]",
                i + 1
            ));
        };
        let entries = out.get_mut(section).unwrap();
        if entries.insert(key.clone(), value).is_some() {
            return Err(format!(
                "line {}: duplicate key {key:?} in [{section}]",
                i + 1
            ));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_values() {
        let text = "# defaults\n[train]\nepochs = 5\nlr = 0.0001\n\n[prepare]\nmax-len = 64\n";
        let config = parse_config(text).unwrap();
        assert_eq!(config["train"]["epochs"], "5");
        assert_eq!(config["train"]["lr"], "0.0001");
        assert_eq!(config["prepare"]["max-len"], "64");
    }

    #[test]
    fn rejects_keys_outside_sections() {
        assert!(parse_config("epochs = 5\n").is_err());
    }

    #[test]
    fn rejects_duplicates_and_garbage() {
        assert!(parse_config("[train]\nepochs = 1\nepochs = 2\n").is_err());
        assert!(parse_config("[train]\nnot a pair\n").is_err());
        assert!(parse_config("[train\nepochs = 1\n").is_err());
    }

    #[test]
    fn values_may_contain_equals() {
        let config = parse_config("[eval]\nname = a=b\n").unwrap();
        assert_eq!(config["eval"]["name"], "a=b");
    }
}

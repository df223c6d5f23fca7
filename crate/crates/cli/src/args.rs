//! Minimal flag parser: `--name value` pairs, boolean switches, positional
//! arguments. Errors name the offending flag so scripts get actionable exit
//! messages.

use std::collections::BTreeMap;

pub struct FlagSpec {
    pub name: &'static str,
    pub takes_value: bool,
    pub required: bool,
}

pub const fn flag(name: &'static str) -> FlagSpec {
    FlagSpec { name, takes_value: true, required: false }
}

pub const fn required(name: &'static str) -> FlagSpec {
    FlagSpec { name, takes_value: true, required: true }
}

pub const fn switch(name: &'static str) -> FlagSpec {
    FlagSpec { name, takes_value: false, required: false }
}

#[derive(Debug, Default)]
pub struct Args {
    values: BTreeMap<String, String>,
    switches: Vec<String>,
    pub positional: Vec<String>,
}

impl Args {
    pub fn parse(raw: &[String], spec: &[FlagSpec]) -> Result<Args, String> {
        let mut args = Args::default();
        let mut it = raw.iter().peekable();
        while let Some(token) = it.next() {
            if let Some(name) = token.strip_prefix("--") {
                let fs = spec
                    .iter()
                    .find(|f| f.name == name)
                    .ok_or_else(|| format!("unknown flag `--{name}`"))?;
                if fs.takes_value {
                    let value = it
                        .next()
                        .ok_or_else(|| format!("flag `--{name}` needs a value"))?;
                    args.values.insert(name.to_string(), value.clone());
                } else {
                    args.switches.push(name.to_string());
                }
            } else {
                args.positional.push(token.clone());
            }
        }
        for fs in spec.iter().filter(|f| f.required) {
            if !args.values.contains_key(fs.name) {
                return Err(format!("missing required flag `--{}`", fs.name));
            }
        }
        Ok(args)
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.values.get(name).map(|s| s.as_str())
    }

    pub fn has(&self, name: &str) -> bool {
        self.switches.iter().any(|s| s == name)
    }

    pub fn parse_value<T: std::str::FromStr>(&self, name: &str) -> Result<Option<T>, String> {
        match self.get(name) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| format!("flag `--{name}`: cannot parse `{v}`")),
        }
    }

    pub fn require<T: std::str::FromStr>(&self, name: &str) -> Result<T, String> {
        self.parse_value(name)?
            .ok_or_else(|| format!("missing required flag `--{name}`"))
    }
}

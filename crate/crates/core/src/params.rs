//! Named parameter storage and the checkpoint directory format.
//!
//! A checkpoint directory holds `manifest.txt` (one `name<TAB>d0xd1x...` line per
//! parameter, in registration order) and one `<name>.zvt` tensor file per entry.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::io::{read_tensor, write_tensor};
use crate::numerics::{Graph, Tensor, Var};

pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.entries[i].1 = t,
            None => {
                self.index.insert(name.clone(), self.entries.len());
                self.entries.push((name, t));
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Registers every parameter in `g`, as trainable leaves or as constants.
    pub fn attach(&self, g: &mut Graph, trainable: bool) -> ParamVars {
        let vars = self
            .entries
            .iter()
            .map(|(n, t)| {
                let v = if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
                (n.clone(), v)
            })
            .collect();
        ParamVars { vars }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = String::new();
        for (name, t) in &self.entries {
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            manifest.push_str(&format!("{name}\t{}\n", dims.join("x")));
            write_tensor(&dir.join(format!("{name}.zvt")), t)?;
        }
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let entries = parse_manifest(&text).map_err(|(line, reason)| Error::format(&path, Some(line), reason))?;
        let mut store = ParamStore::new();
        for (name, shape) in entries {
            let tpath = dir.join(format!("{name}.zvt"));
            let t = read_tensor(&tpath)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::format(
                    &tpath,
                    None,
                    format!("shape {:?} disagrees with manifest {:?}", t.shape(), shape),
                ));
            }
            store.insert(name, t);
        }
        Ok(store)
    }
}

/// Parses manifest text into `(name, shape)` pairs; errors carry a 1-based line number.
pub fn parse_manifest(text: &str) -> std::result::Result<Vec<(String, Vec<usize>)>, (usize, String)> {
    let mut out: Vec<(String, Vec<usize>)> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let (name, dims) = line
            .split_once('\t')
            .ok_or((lineno, "expected `name<TAB>shape`".to_string()))?;
        if name.is_empty() || name.contains(['/', '\\']) || name.starts_with('.') {
            return Err((lineno, format!("invalid parameter name {name:?}")));
        }
        if out.iter().any(|(n, _)| n == name) {
            return Err((lineno, format!("duplicate parameter {name:?}")));
        }
        let shape = if dims.is_empty() {
            Vec::new()
        } else {
            dims.split('x')
                .map(|d| match d.parse::<usize>() {
                    Ok(v) if v > 0 => Ok(v),
                    _ => Err((lineno, format!("bad dimension {d:?}"))),
                })
                .collect::<std::result::Result<Vec<_>, _>>()?
        };
        out.push((name.to_string(), shape));
    }
    Ok(out)
}

/// Graph handles for the parameters of one forward pass.
#[derive(Debug, Clone)]
pub struct ParamVars {
    vars: HashMap<String, Var>,
}

impl ParamVars {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        ParamVars {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))
    }
}

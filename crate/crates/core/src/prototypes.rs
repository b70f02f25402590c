//! Class attribute prototypes and the seen/unseen partition.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub type ClassId = usize;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassPrototype {
    pub class_id: ClassId,
    /// One value per semantic attribute.
    pub z: Vec<f64>,
    pub seen: bool,
}

/// All class prototypes of a dataset. Reads through [`PrototypeTable::rows`] are
/// counted so callers can prove a code path never consults class semantics.
#[derive(Debug, Default)]
pub struct PrototypeTable {
    classes: Vec<ClassPrototype>,
    index: HashMap<ClassId, usize>,
    attr_dim: usize,
    reads: AtomicUsize,
}

impl Clone for PrototypeTable {
    fn clone(&self) -> Self {
        PrototypeTable {
            classes: self.classes.clone(),
            index: self.index.clone(),
            attr_dim: self.attr_dim,
            reads: AtomicUsize::new(0),
        }
    }
}

impl PartialEq for PrototypeTable {
    fn eq(&self, other: &Self) -> bool {
        self.classes == other.classes
    }
}

impl PrototypeTable {
    pub fn new(mut classes: Vec<ClassPrototype>) -> Result<Self> {
        classes.sort_by_key(|c| c.class_id);
        let attr_dim = classes.first().map_or(0, |c| c.z.len());
        if attr_dim == 0 {
            return Err(Error::Contract("prototype table needs at least one class with attributes".into()));
        }
        let mut index = HashMap::new();
        for (i, c) in classes.iter().enumerate() {
            if c.z.len() != attr_dim {
                return Err(Error::dim(
                    "prototypes",
                    format!("class {} has {} attributes, expected {attr_dim}", c.class_id, c.z.len()),
                ));
            }
            if index.insert(c.class_id, i).is_some() {
                return Err(Error::Contract(format!("duplicate class id {}", c.class_id)));
            }
        }
        Ok(PrototypeTable {
            classes,
            index,
            attr_dim,
            reads: AtomicUsize::new(0),
        })
    }

    pub fn attr_dim(&self) -> usize {
        self.attr_dim
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn classes(&self) -> &[ClassPrototype] {
        &self.classes
    }

    pub fn get(&self, id: ClassId) -> Option<&ClassPrototype> {
        self.index.get(&id).map(|&i| &self.classes[i])
    }

    pub fn contains(&self, id: ClassId) -> bool {
        self.index.contains_key(&id)
    }

    pub fn is_seen(&self, id: ClassId) -> bool {
        self.get(id).is_some_and(|c| c.seen)
    }

    pub fn seen_ids(&self) -> Vec<ClassId> {
        self.classes.iter().filter(|c| c.seen).map(|c| c.class_id).collect()
    }

    pub fn unseen_ids(&self) -> Vec<ClassId> {
        self.classes.iter().filter(|c| !c.seen).map(|c| c.class_id).collect()
    }

    pub fn all_ids(&self) -> Vec<ClassId> {
        self.classes.iter().map(|c| c.class_id).collect()
    }

    /// `[ids.len() × |A|]` matrix of prototypes, optionally L2-normalized per row.
    pub fn rows(&self, ids: &[ClassId], l2_normalize: bool) -> Result<Tensor> {
        self.reads.fetch_add(1, Ordering::Relaxed);
        let mut data = Vec::with_capacity(ids.len() * self.attr_dim);
        for &id in ids {
            let c = self
                .get(id)
                .ok_or_else(|| Error::Contract(format!("unknown class id {id}")))?;
            if l2_normalize {
                let norm = c.z.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                data.extend(c.z.iter().map(|v| v / norm));
            } else {
                data.extend_from_slice(&c.z);
            }
        }
        Tensor::matrix(ids.len(), self.attr_dim, data)
    }

    /// Number of [`PrototypeTable::rows`] calls so far.
    pub fn read_count(&self) -> usize {
        self.reads.load(Ordering::Relaxed)
    }
}

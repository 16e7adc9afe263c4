//! Named parameter registry.
//!
//! Every learnable or frozen tensor of a model lives here as a [`Var`] tagged
//! with a [`Group`]. Which groups take part in gradient flow is a property of
//! the registry (the current training phase), not of the layers: a layer asks
//! its [`Param`] for a tensor and receives either the tracked variable or a
//! detached view of the same storage. Reads are counted per group so callers
//! can prove that a code path never touched a group.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use candle_core::{DType, Tensor, Var};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Group {
    /// Denoising UNet, including the frozen K/V base weights of cross-attention.
    Backbone,
    TextEncoder,
    /// Fixed feature network feeding the style statistics. Never trained.
    FeatureNet,
    /// Per-level style projection networks.
    StyleEncoder,
    /// Auxiliary content adapter (train-only).
    Aca,
    /// Low-rank residual factors and learnable scales of adapted K/V projections.
    Explicit,
    /// Per-projection finetune residual vectors.
    Residual,
}

impl Group {
    pub const ALL: [Group; 7] = [
        Group::Backbone,
        Group::TextEncoder,
        Group::FeatureNet,
        Group::StyleEncoder,
        Group::Aca,
        Group::Explicit,
        Group::Residual,
    ];

    fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Group::Backbone => "backbone",
            Group::TextEncoder => "text_encoder",
            Group::FeatureNet => "feature_net",
            Group::StyleEncoder => "style_encoder",
            Group::Aca => "aca",
            Group::Explicit => "explicit",
            Group::Residual => "residual",
        }
    }

    pub fn from_name(name: &str) -> Option<Group> {
        Group::ALL.into_iter().find(|g| g.name() == name)
    }
}

struct Entry {
    var: Var,
    group: Group,
}

#[derive(Default)]
pub struct ParamRegistry {
    entries: Mutex<BTreeMap<String, Entry>>,
    live: [AtomicBool; 7],
    reads: [AtomicU64; 7],
}

impl std::fmt::Debug for ParamRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamRegistry")
            .field("len", &self.len())
            .field("live", &self.live_groups())
            .finish()
    }
}

impl ParamRegistry {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    pub fn create(self: &Arc<Self>, name: impl Into<String>, group: Group, init: Tensor) -> Result<Param> {
        let name = name.into();
        let var = Var::from_tensor(&init)?;
        let mut entries = self.entries.lock().expect("registry poisoned");
        if entries.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        entries.insert(
            name.clone(),
            Entry {
                var: var.clone(),
                group,
            },
        );
        Ok(Param {
            name: name.into(),
            var,
            group,
            registry: Arc::clone(self),
        })
    }

    pub fn remove(&self, name: &str) -> bool {
        self.entries.lock().expect("registry poisoned").remove(name).is_some()
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("registry poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Restricts gradient flow to exactly `groups`.
    pub fn set_live(&self, groups: &[Group]) {
        for g in Group::ALL {
            self.live[g.index()].store(groups.contains(&g), Ordering::SeqCst);
        }
    }

    pub fn live_groups(&self) -> Vec<Group> {
        Group::ALL
            .into_iter()
            .filter(|g| self.live[g.index()].load(Ordering::SeqCst))
            .collect()
    }

    pub fn is_live(&self, group: Group) -> bool {
        self.live[group.index()].load(Ordering::SeqCst)
    }

    pub fn reads(&self, group: Group) -> u64 {
        self.reads[group.index()].load(Ordering::SeqCst)
    }

    pub fn vars(&self, group: Group) -> Vec<Var> {
        self.entries
            .lock()
            .expect("registry poisoned")
            .values()
            .filter(|e| e.group == group)
            .map(|e| e.var.clone())
            .collect()
    }

    pub fn count(&self, group: Group) -> usize {
        self.entries
            .lock()
            .expect("registry poisoned")
            .values()
            .filter(|e| e.group == group)
            .map(|e| e.var.elem_count())
            .sum()
    }

    /// Snapshot of `(name, group, value)` in name order.
    pub fn snapshot(&self) -> Vec<(String, Group, Tensor)> {
        self.entries
            .lock()
            .expect("registry poisoned")
            .iter()
            .map(|(n, e)| (n.clone(), e.group, e.var.as_tensor().detach()))
            .collect()
    }

    pub fn get(&self, name: &str) -> Option<(Group, Var)> {
        self.entries
            .lock()
            .expect("registry poisoned")
            .get(name)
            .map(|e| (e.group, e.var.clone()))
    }

    /// Overwrites the value of a registered parameter in place.
    pub fn assign(&self, name: &str, value: &Tensor) -> Result<()> {
        let (_, var) = self
            .get(name)
            .ok_or_else(|| Error::Key(format!("unknown parameter `{name}`")))?;
        if var.dims() != value.dims() {
            return Err(Error::Shape(format!(
                "parameter `{name}` has shape {:?}, value has {:?}",
                var.dims(),
                value.dims()
            )));
        }
        var.set(&value.to_dtype(var.dtype())?)?;
        Ok(())
    }

    /// SHA-256 over the names, shapes and raw values of every parameter in `group`.
    pub fn group_hash(&self, group: Group) -> Result<String> {
        let mut hasher = Sha256::new();
        for (name, g, t) in self.snapshot() {
            if g == group {
                hash_tensor(&mut hasher, &name, &t)?;
            }
        }
        Ok(hex::encode(hasher.finalize()))
    }

    pub fn full_hash(&self) -> Result<String> {
        let mut hasher = Sha256::new();
        for (name, _, t) in self.snapshot() {
            hash_tensor(&mut hasher, &name, &t)?;
        }
        Ok(hex::encode(hasher.finalize()))
    }
}

pub(crate) fn hash_tensor(hasher: &mut Sha256, name: &str, t: &Tensor) -> Result<()> {
    hasher.update(name.as_bytes());
    hasher.update([0u8]);
    for d in t.dims() {
        hasher.update((*d as u64).to_le_bytes());
    }
    hasher.update(tensor_bytes(t)?);
    Ok(())
}

/// Raw little-endian element bytes in the tensor's own dtype.
pub fn tensor_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F32 => flat.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        DType::F64 => flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        other => return Err(Error::Config(format!("unsupported parameter dtype {other:?}"))),
    })
}

/// Handle to one registered parameter.
#[derive(Clone)]
pub struct Param {
    name: Arc<str>,
    var: Var,
    group: Group,
    registry: Arc<ParamRegistry>,
}

impl std::fmt::Debug for Param {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Param({}, {:?}, {:?})", self.name, self.group, self.var.dims())
    }
}

impl Param {
    /// Current value, gradient-tracked only if the group is live.
    pub fn get(&self) -> Tensor {
        self.registry.reads[self.group.index()].fetch_add(1, Ordering::Relaxed);
        if self.registry.is_live(self.group) {
            self.var.as_tensor().clone()
        } else {
            self.var.as_tensor().detach()
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn group(&self) -> Group {
        self.group
    }

    pub fn var(&self) -> &Var {
        &self.var
    }

    pub fn dims(&self) -> &[usize] {
        self.var.dims()
    }

    /// Unregisters the parameter; the handle keeps its storage alive.
    pub fn unregister(&self) {
        self.registry.remove(&self.name);
    }
}

//! Device enumeration and the operator priority queue.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use raft_core::model::{DeviceDescriptor, SourceKind};
use serde::Serialize;

use crate::config::ConfiguredDevice;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum InventoryError {
    #[error("scan root {0} does not exist or is not a directory")]
    ScanRootMissing(PathBuf),
    #[error("cannot list scan root {path}: {detail}")]
    ScanRootUnreadable { path: PathBuf, detail: String },
    #[error("unknown device {0}")]
    UnknownDevice(String),
    #[error("device {0} is being acquired")]
    DeviceActive(String),
    #[error("priority {priority} is requested for both {first} and {second}")]
    DuplicatePriority { priority: u32, first: String, second: String },
    #[error("device id {0} appears more than once")]
    DuplicateDevice(String),
    #[error("device {device} cannot be queued: {detail}")]
    Unavailable { device: String, detail: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum SelectionState {
    Unselected,
    Queued { priority: u32 },
    Active,
    Done,
    Failed { detail: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct InventoryEntry {
    pub device_id: String,
    pub label: String,
    pub total_bytes: u64,
    pub source_kind: &'static str,
    pub path: PathBuf,
    #[serde(flatten)]
    pub state: SelectionState,
}

impl InventoryEntry {
    pub fn descriptor(&self) -> DeviceDescriptor {
        let mut d = DeviceDescriptor::new(self.device_id.clone(), self.label.clone(), self.total_bytes);
        d.source_kind = SourceKind::parse(self.source_kind).unwrap_or(SourceKind::FileBacked);
        d
    }

    /// True when the entry can be put in the queue.
    pub fn is_available(&self) -> bool {
        !matches!(self.state, SelectionState::Active) && !self.enumeration_failed()
    }

    fn enumeration_failed(&self) -> bool {
        matches!(&self.state, SelectionState::Failed { .. }) && self.total_bytes == 0
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct DeviceInventory {
    pub entries: Vec<InventoryEntry>,
}

fn probe(device_id: String, label: String, path: PathBuf) -> InventoryEntry {
    let kind = if cfg!(unix) && is_block_device(&path) { SourceKind::BlockDevice } else { SourceKind::FileBacked };
    let (total_bytes, state) = match crate::imaging::source_length(&path) {
        Ok(0) => (0, SelectionState::Failed { detail: "source is empty".into() }),
        Ok(n) => (n, SelectionState::Unselected),
        Err(e) => (0, SelectionState::Failed { detail: format!("cannot open for reading: {e}") }),
    };
    InventoryEntry { device_id, label, total_bytes, source_kind: kind.name(), path, state }
}

#[cfg(unix)]
fn is_block_device(path: &Path) -> bool {
    use std::os::unix::fs::FileTypeExt;
    fs::metadata(path).map(|m| m.file_type().is_block_device()).unwrap_or(false)
}

#[cfg(not(unix))]
fn is_block_device(_: &Path) -> bool {
    false
}

/// Lists every regular file in `scan_root` plus the configured devices,
/// ordered by label then id. Unreadable sources are kept with a failed state.
pub fn enumerate_devices(scan_root: Option<&Path>, configured: &[ConfiguredDevice]) -> Result<DeviceInventory, InventoryError> {
    let mut entries = Vec::new();
    if let Some(root) = scan_root {
        if !root.is_dir() {
            return Err(InventoryError::ScanRootMissing(root.to_path_buf()));
        }
        let listing = fs::read_dir(root)
            .map_err(|e| InventoryError::ScanRootUnreadable { path: root.to_path_buf(), detail: e.to_string() })?;
        for item in listing.flatten() {
            let path = item.path();
            let Ok(ft) = item.file_type() else { continue };
            if ft.is_dir() {
                continue;
            }
            let name = item.file_name().to_string_lossy().into_owned();
            if name.starts_with('.') {
                continue;
            }
            entries.push(probe(name.clone(), name, path));
        }
    }
    for d in configured {
        let label = d
            .label
            .clone()
            .unwrap_or_else(|| d.path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| d.device_id.clone()));
        entries.push(probe(d.device_id.clone(), label, d.path.clone()));
    }
    entries.sort_by(|a, b| (&a.label, &a.device_id).cmp(&(&b.label, &b.device_id)));
    let mut seen = BTreeSet::new();
    for e in &entries {
        if !seen.insert(e.device_id.as_str()) {
            return Err(InventoryError::DuplicateDevice(e.device_id.clone()));
        }
    }
    Ok(DeviceInventory { entries })
}

impl DeviceInventory {
    pub fn get(&self, device_id: &str) -> Option<&InventoryEntry> {
        self.entries.iter().find(|e| e.device_id == device_id)
    }

    pub fn get_mut(&mut self, device_id: &str) -> Option<&mut InventoryEntry> {
        self.entries.iter_mut().find(|e| e.device_id == device_id)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Applies operator priorities. Devices named in `priorities` are queued
    /// at the given priority; other queued devices keep theirs. The resulting
    /// queue must have unique priorities.
    pub fn set_priorities(&mut self, priorities: &BTreeMap<String, u32>) -> Result<(), InventoryError> {
        for id in priorities.keys() {
            let e = self.get(id).ok_or_else(|| InventoryError::UnknownDevice(id.clone()))?;
            if matches!(e.state, SelectionState::Active) {
                return Err(InventoryError::DeviceActive(id.clone()));
            }
            if e.enumeration_failed() {
                let SelectionState::Failed { detail } = &e.state else { unreachable!() };
                return Err(InventoryError::Unavailable { device: id.clone(), detail: detail.clone() });
            }
        }
        let mut owners: BTreeMap<u32, &str> = BTreeMap::new();
        let merged = self.entries.iter().filter_map(|e| match (priorities.get(&e.device_id), &e.state) {
            (Some(p), _) => Some((*p, e.device_id.as_str())),
            (None, SelectionState::Queued { priority }) => Some((*priority, e.device_id.as_str())),
            _ => None,
        });
        for (p, id) in merged {
            if let Some(first) = owners.insert(p, id) {
                let (first, second) = if first < id { (first, id) } else { (id, first) };
                return Err(InventoryError::DuplicatePriority { priority: p, first: first.into(), second: second.into() });
            }
        }
        for (id, p) in priorities {
            if let Some(e) = self.get_mut(id) {
                e.state = SelectionState::Queued { priority: *p };
            }
        }
        Ok(())
    }

    /// Queues every available device with priorities following enumeration
    /// order.
    pub fn queue_all(&mut self) -> Result<(), InventoryError> {
        if let Some(active) = self.entries.iter().find(|e| matches!(e.state, SelectionState::Active)) {
            return Err(InventoryError::DeviceActive(active.device_id.clone()));
        }
        let mut next = 1;
        for e in &mut self.entries {
            if e.is_available() {
                e.state = SelectionState::Queued { priority: next };
                next += 1;
            }
        }
        Ok(())
    }

    /// Queued device ids in drain order (ascending priority).
    pub fn queue_order(&self) -> Vec<String> {
        let mut queued: Vec<(u32, &str)> = self
            .entries
            .iter()
            .filter_map(|e| match e.state {
                SelectionState::Queued { priority } => Some((priority, e.device_id.as_str())),
                _ => None,
            })
            .collect();
        queued.sort();
        queued.into_iter().map(|(_, id)| id.to_string()).collect()
    }

    pub fn set_state(&mut self, device_id: &str, state: SelectionState) {
        if let Some(e) = self.get_mut(device_id) {
            e.state = state;
        }
    }
}

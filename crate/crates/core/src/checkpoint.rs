//! Checkpoint directories: `manifest.json` plus one flat tensor container per
//! parameter group (`phase01.ten`, ..., and `shared.ten` under weight sharing).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SciError};
use crate::io;
use crate::network::{NetworkConfig, ParameterRegistry};
use crate::tensor::{Scalar, Tensor};

pub const MANIFEST: &str = "manifest.json";
pub const FORMAT: &str = "sci-unfold-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Network,
    /// Returns the ground truth it is handed; exercises evaluation plumbing.
    Passthrough,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobEntry {
    pub file: String,
    pub group: String,
    pub params: Vec<ParamEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub kind: Kind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<NetworkConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dtype: Option<String>,
    #[serde(default)]
    pub num_params: usize,
    #[serde(default)]
    pub blobs: Vec<BlobEntry>,
    /// Free-form metadata such as the training step.
    #[serde(default)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

pub enum Checkpoint<T> {
    Network(Box<ParameterRegistry<T>>),
    Passthrough,
}

fn group_of(name: &str) -> &str {
    name.split_once('.').map_or(name, |(g, _)| g)
}

fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| SciError::io(dir, e))?;
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(manifest)?;
    fs::write(&path, text + "\n").map_err(|e| SciError::io(path, e))
}

pub fn save<T: Scalar>(dir: &Path, reg: &ParameterRegistry<T>) -> Result<()> {
    save_with(dir, reg, BTreeMap::new())
}

pub fn save_with<T: Scalar>(
    dir: &Path,
    reg: &ParameterRegistry<T>,
    extra: BTreeMap<String, serde_json::Value>,
) -> Result<()> {
    let store = reg.store();
    let mut groups: Vec<(String, Vec<ParamEntry>, Vec<T>)> = Vec::new();
    for id in store.ids() {
        let name = store.name(id);
        let g = group_of(name);
        if groups.last().is_none_or(|(last, _, _)| last != g) {
            if groups.iter().any(|(n, _, _)| n == g) {
                return Err(SciError::Checkpoint(format!("parameter group {g} is not contiguous")));
            }
            groups.push((g.to_string(), Vec::new(), Vec::new()));
        }
        let (_, entries, data) = groups.last_mut().unwrap();
        let t = store.get(id);
        entries.push(ParamEntry { name: name.to_string(), shape: t.shape().to_vec(), offset: data.len() });
        data.extend_from_slice(t.data());
    }
    fs::create_dir_all(dir).map_err(|e| SciError::io(dir, e))?;
    let mut blobs = Vec::new();
    for (group, params, data) in groups {
        let file = format!("{group}.ten");
        io::write_tensor(&dir.join(&file), &Tensor::from_vec(&[data.len()], data)?)?;
        blobs.push(BlobEntry { file, group, params });
    }
    write_manifest(
        dir,
        &Manifest {
            format: FORMAT.into(),
            version: VERSION,
            kind: Kind::Network,
            config: Some(reg.config().clone()),
            dtype: Some(T::DTYPE.into()),
            num_params: reg.num_params(),
            blobs,
            extra,
        },
    )
}

pub fn save_passthrough(dir: &Path) -> Result<()> {
    write_manifest(
        dir,
        &Manifest {
            format: FORMAT.into(),
            version: VERSION,
            kind: Kind::Passthrough,
            config: None,
            dtype: None,
            num_params: 0,
            blobs: Vec::new(),
            extra: BTreeMap::new(),
        },
    )
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| SciError::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text)?;
    if m.format != FORMAT || m.version != VERSION {
        return Err(SciError::Checkpoint(format!(
            "{} is {} v{}, expected {FORMAT} v{VERSION}",
            path.display(),
            m.format,
            m.version
        )));
    }
    Ok(m)
}

pub fn load<T: Scalar>(dir: &Path) -> Result<Checkpoint<T>> {
    let manifest = read_manifest(dir)?;
    if manifest.kind == Kind::Passthrough {
        return Ok(Checkpoint::Passthrough);
    }
    let cfg = manifest.config.ok_or_else(|| SciError::Checkpoint("network manifest has no config".into()))?;
    let mut reg = ParameterRegistry::<T>::new(&cfg, 0)?;
    let mut filled = vec![false; reg.store().len()];
    for blob in &manifest.blobs {
        let data = io::read_tensor::<T>(&dir.join(&blob.file))?;
        for p in &blob.params {
            let id = reg
                .store()
                .find(&p.name)
                .ok_or_else(|| SciError::Checkpoint(format!("unknown parameter {} in {}", p.name, blob.file)))?;
            let n: usize = p.shape.iter().product();
            if reg.store().get(id).shape() != p.shape.as_slice() || p.offset + n > data.len() {
                return Err(SciError::Checkpoint(format!(
                    "parameter {} has shape {:?} in {}, network expects {:?}",
                    p.name,
                    p.shape,
                    blob.file,
                    reg.store().get(id).shape()
                )));
            }
            reg.store_mut().get_mut(id).data_mut().copy_from_slice(&data.data()[p.offset..p.offset + n]);
            filled[id.0] = true;
        }
    }
    if let Some(i) = filled.iter().position(|f| !f) {
        let name = reg.store().name(crate::graph::ParamId(i)).to_string();
        return Err(SciError::Checkpoint(format!("checkpoint is missing parameter {name}")));
    }
    Ok(Checkpoint::Network(Box::new(reg)))
}

pub fn load_network<T: Scalar>(dir: &Path) -> Result<ParameterRegistry<T>> {
    match load(dir)? {
        Checkpoint::Network(reg) => Ok(*reg),
        Checkpoint::Passthrough => {
            Err(SciError::Checkpoint(format!("{} is a passthrough checkpoint without weights", dir.display())))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(sharing: bool) -> NetworkConfig {
        NetworkConfig { phases: 3, widths: [2, 4, 4], weight_sharing: sharing, ..NetworkConfig::default() }
    }

    #[test]
    fn round_trip_restores_every_parameter() {
        for sharing in [false, true] {
            let dir = tempfile::tempdir().unwrap();
            let mut reg = ParameterRegistry::<f32>::new(&cfg(sharing), 5).unwrap();
            reg.set_eta(2, 0.7).unwrap();
            save(dir.path(), &reg).unwrap();
            let back = load_network::<f32>(dir.path()).unwrap();
            assert_eq!(back.config(), reg.config());
            for id in reg.store().ids() {
                assert_eq!(back.store().get(id), reg.store().get(id), "{}", reg.store().name(id));
            }
            let m = read_manifest(dir.path()).unwrap();
            let files: Vec<_> = m.blobs.iter().map(|b| b.file.as_str()).collect();
            if sharing {
                assert_eq!(files, ["shared.ten", "phase01.ten", "phase02.ten", "phase03.ten"]);
            } else {
                assert_eq!(files, ["phase01.ten", "phase02.ten", "phase03.ten"]);
            }
        }
    }

    #[test]
    fn saving_twice_is_byte_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let reg = ParameterRegistry::<f32>::new(&cfg(false), 1).unwrap();
        save(a.path(), &reg).unwrap();
        save(b.path(), &load_network::<f32>(a.path()).unwrap()).unwrap();
        for f in ["manifest.json", "phase01.ten", "phase03.ten"] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
        }
    }

    #[test]
    fn passthrough_manifest() {
        let dir = tempfile::tempdir().unwrap();
        save_passthrough(dir.path()).unwrap();
        assert!(matches!(load::<f32>(dir.path()).unwrap(), Checkpoint::Passthrough));
        assert!(load_network::<f32>(dir.path()).is_err());
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let reg = ParameterRegistry::<f32>::new(&cfg(false), 1).unwrap();
        save(dir.path(), &reg).unwrap();
        fs::remove_file(dir.path().join("phase02.ten")).unwrap();
        assert!(load_network::<f32>(dir.path()).is_err());

        save(dir.path(), &reg).unwrap();
        let mut m = read_manifest(dir.path()).unwrap();
        m.blobs.pop();
        write_manifest(dir.path(), &m).unwrap();
        assert!(load_network::<f32>(dir.path()).is_err());

        let mut m = read_manifest(dir.path()).unwrap();
        m.version = 99;
        write_manifest(dir.path(), &m).unwrap();
        assert!(read_manifest(dir.path()).is_err());
    }
}

//! Versioned checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"KCMP"
//! u32     format version
//! u32     header length in bytes
//! [u8]    JSON header (architecture, configs, class names, preprocessing
//!         fingerprint, KCM weighting, tensor directory, metadata)
//! [f64]   parameter blobs, concatenated in directory order
//! ```

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::Backbone;
use crate::cbirnet::{CbirModel, CbirNet, CbirNetConfig};
use crate::ccnet::{CcNet, CcNetConfig, KCM_WEIGHTING};
use crate::composition_data::CompositionClass;
use crate::error::{Error, Result};
use crate::nn::Param;
use crate::preprocessing::PREPROCESSING_FINGERPRINT;

pub const MAGIC: &[u8; 4] = b"KCMP";
pub const FORMAT_VERSION: u32 = 1;
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

const CCNET_PREFIX: &str = "ccnet.";
const CBIR_PREFIX: &str = "cbirnet.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Ccnet,
    Cbirnet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub architecture: Architecture,
    pub tool_version: String,
    pub class_names: Vec<String>,
    pub preprocessing: String,
    pub kcm_weighting: String,
    pub ccnet: CcNetConfig,
    pub cbirnet: Option<CbirNetConfig>,
    pub tensors: Vec<TensorEntry>,
    pub metadata: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    values: Vec<f64>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn encode(header_base: CheckpointHeader, params: &[(String, &Param)]) -> Result<Vec<u8>> {
    let mut header = header_base;
    let mut offset = 0;
    header.tensors = params
        .iter()
        .map(|(name, p)| {
            let e = TensorEntry { name: name.clone(), shape: p.shape.clone(), offset };
            offset += p.len();
            e
        })
        .collect();
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(12 + json.len() + offset * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, p) in params {
        for v in &p.value {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn base_header(architecture: Architecture, ccnet: &CcNet, cbirnet: Option<&CbirNet>, metadata: &serde_json::Value) -> CheckpointHeader {
    CheckpointHeader {
        architecture,
        tool_version: TOOL_VERSION.to_string(),
        class_names: CompositionClass::names(),
        preprocessing: PREPROCESSING_FINGERPRINT.to_string(),
        kcm_weighting: KCM_WEIGHTING.to_string(),
        ccnet: ccnet.config.clone(),
        cbirnet: cbirnet.map(|n| n.config.clone()),
        tensors: Vec::new(),
        metadata: metadata.clone(),
    }
}

fn named<'a>(prefix: &str, params: Vec<&'a Param>) -> Vec<(String, &'a Param)> {
    params.into_iter().map(|p| (format!("{prefix}{}", p.name), p)).collect()
}

pub fn encode_ccnet(net: &CcNet, metadata: &serde_json::Value) -> Result<Vec<u8>> {
    if !net.is_ready() {
        return Err(Error::NotReady("cannot checkpoint an uninitialized CCNet".into()));
    }
    encode(base_header(Architecture::Ccnet, net, None, metadata), &named(CCNET_PREFIX, net.params()))
}

/// Retrieval checkpoints embed the frozen CCNet so one file fully defines
/// the embedder.
pub fn encode_cbir(ccnet: &CcNet, cbirnet: &CbirNet, metadata: &serde_json::Value) -> Result<Vec<u8>> {
    if !ccnet.is_ready() || !cbirnet.is_ready() {
        return Err(Error::NotReady("cannot checkpoint uninitialized networks".into()));
    }
    let mut params = named(CCNET_PREFIX, ccnet.params());
    params.extend(named(CBIR_PREFIX, cbirnet.params()));
    encode(base_header(Architecture::Cbirnet, ccnet, Some(cbirnet), metadata), &params)
}

/// Writes via a temporary file in the destination directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

impl Checkpoint {
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let body_start = 12 + hlen;
        if bytes.len() < body_start {
            return Err(bad("truncated header"));
        }
        let header: CheckpointHeader = serde_json::from_slice(&bytes[12..body_start])?;
        let body = &bytes[body_start..];
        if !body.len().is_multiple_of(8) {
            return Err(bad("parameter section is not a whole number of f64 values"));
        }
        let values: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let expected: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
        if expected != values.len() {
            return Err(Error::Checkpoint(format!(
                "directory describes {expected} values, file holds {}",
                values.len()
            )));
        }
        if header.preprocessing != PREPROCESSING_FINGERPRINT {
            return Err(Error::Checkpoint(format!(
                "checkpoint was trained with preprocessing {:?}, this build uses {:?}",
                header.preprocessing, PREPROCESSING_FINGERPRINT
            )));
        }
        if header.class_names != CompositionClass::names() {
            return Err(bad("checkpoint class list differs from the nine composition classes"));
        }
        Ok(Self { header, values })
    }

    pub fn read(path: &Path) -> Result<(Self, String)> {
        let bytes = std::fs::read(path)?;
        let hash = sha256_hex(&bytes);
        Ok((Self::decode(&bytes)?, hash))
    }

    fn tensor_map(&self) -> BTreeMap<&str, (&[usize], &[f64])> {
        self.header
            .tensors
            .iter()
            .map(|t| {
                let n: usize = t.shape.iter().product();
                (t.name.as_str(), (t.shape.as_slice(), &self.values[t.offset..t.offset + n]))
            })
            .collect()
    }

    fn fill(&self, prefix: &str, params: Vec<&mut Param>) -> Result<()> {
        let map = self.tensor_map();
        for p in params {
            let key = format!("{prefix}{}", p.name);
            let (shape, data) = map
                .get(key.as_str())
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {key}")))?;
            if *shape != p.shape.as_slice() {
                return Err(Error::Checkpoint(format!("tensor {key} has shape {shape:?}, expected {:?}", p.shape)));
            }
            p.value.copy_from_slice(data);
        }
        Ok(())
    }

    pub fn to_ccnet(&self) -> Result<CcNet> {
        let mut net = CcNet::new(self.header.ccnet.clone())?;
        self.fill(CCNET_PREFIX, net.params_mut())?;
        net.mark_ready();
        Ok(net)
    }

    pub fn to_cbir_model(&self, checkpoint_hash: String) -> Result<CbirModel> {
        if self.header.architecture != Architecture::Cbirnet {
            return Err(Error::Checkpoint("expected a retrieval (cbirnet) checkpoint".into()));
        }
        let cfg = self
            .header
            .cbirnet
            .clone()
            .ok_or_else(|| Error::Checkpoint("retrieval checkpoint lacks its network config".into()))?;
        let ccnet = self.to_ccnet()?;
        let mut net = CbirNet::new(cfg)?;
        self.fill(CBIR_PREFIX, net.params_mut())?;
        net.mark_ready();
        Ok(CbirModel::with_hash(ccnet, net, checkpoint_hash))
    }

    /// Copies backbone tensors whose names and shapes match into `backbone`,
    /// from whichever network's backbone this checkpoint holds. Returns how
    /// many tensors were imported.
    pub fn import_backbone(&self, backbone: &mut Backbone) -> usize {
        let map = self.tensor_map();
        let mut imported = 0;
        for p in backbone.params_mut() {
            let candidates = [format!("{CBIR_PREFIX}{}", p.name), format!("{CCNET_PREFIX}{}", p.name)];
            if let Some((_, data)) = candidates
                .iter()
                .filter_map(|k| map.get(k.as_str()))
                .find(|(shape, _)| *shape == p.shape.as_slice())
            {
                p.value.copy_from_slice(data);
                imported += 1;
            }
        }
        imported
    }
}

pub fn load_ccnet(path: &Path) -> Result<CcNet> {
    Checkpoint::read(path)?.0.to_ccnet()
}

pub fn load_cbir_model(path: &Path) -> Result<CbirModel> {
    let (ck, hash) = Checkpoint::read(path)?;
    ck.to_cbir_model(hash)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Variant;
    use crate::cbirnet::{CbirNetConfig, FusionConfig};

    #[test]
    fn ccnet_round_trip_and_checks() {
        let mut net = CcNet::new(CcNetConfig::for_variant(Variant::Tiny)).unwrap();
        assert!(matches!(encode_ccnet(&net, &serde_json::Value::Null), Err(Error::NotReady(_))));
        net.init_xavier(4);
        let bytes = encode_ccnet(&net, &serde_json::json!({"epochs": 1})).unwrap();
        let ck = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(ck.header.architecture, Architecture::Ccnet);
        assert_eq!(ck.header.kcm_weighting, "softmax");
        assert_eq!(ck.to_ccnet().unwrap(), net);
        assert_eq!(encode_ccnet(&net, &serde_json::json!({"epochs": 1})).unwrap(), bytes);

        let mut corrupt = bytes.clone();
        corrupt[0] = b'X';
        assert!(Checkpoint::decode(&corrupt).is_err());
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 4]).is_err());
    }

    #[test]
    fn cbir_round_trip_and_backbone_import() {
        let mut cc = CcNet::new(CcNetConfig::for_variant(Variant::Tiny)).unwrap();
        cc.init_xavier(1);
        let mut net = CbirNet::new(CbirNetConfig::for_variant(Variant::Tiny, 8, FusionConfig::new(0.5).unwrap())).unwrap();
        net.init_xavier(2);
        let bytes = encode_cbir(&cc, &net, &serde_json::Value::Null).unwrap();
        let ck = Checkpoint::decode(&bytes).unwrap();
        let model = ck.to_cbir_model(sha256_hex(&bytes)).unwrap();
        assert_eq!(model.cbirnet, net);
        assert_eq!(model.ccnet, cc);
        assert!(ck.to_ccnet().is_ok());

        let cc_only = Checkpoint::decode(&encode_ccnet(&cc, &serde_json::Value::Null).unwrap()).unwrap();
        assert!(cc_only.to_cbir_model(String::new()).is_err());
        let mut fresh = CbirNet::new(net.config.clone()).unwrap();
        let n = cc_only.import_backbone(&mut fresh.backbone);
        assert_eq!(n, fresh.backbone.params().len());
        assert_eq!(fresh.backbone.params()[0].value, cc.backbone.params()[0].value);
    }
}

//! Checkpoint container: safetensors parameters (stored as f32) plus string
//! metadata carrying the model config, a format version and, for language
//! models, the fingerprint of the codec whose tokens they were trained on.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::{Dtype, SafeTensors, View};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lm::{HierarchicalLm, LmConfig};
use crate::nn::ParamStore;
use crate::system::{CodecSystem, CodecSystemConfig};

pub const FORMAT_VERSION: &str = "1";
pub const KIND_CODEC: &str = "codec";
pub const KIND_LM: &str = "lm";

struct F32View {
    shape: Vec<usize>,
    bytes: Vec<u8>,
}

impl View for &F32View {
    fn dtype(&self) -> Dtype {
        Dtype::F32
    }

    fn shape(&self) -> &[usize] {
        &self.shape
    }

    fn data(&self) -> Cow<'_, [u8]> {
        Cow::Borrowed(&self.bytes)
    }

    fn data_len(&self) -> usize {
        self.bytes.len()
    }
}

/// Parameters and metadata read from disk.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub metadata: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Data(format!("checkpoint metadata lacks {key:?}")))
    }

    fn expect_kind(&self, kind: &str) -> Result<()> {
        let found = self.meta("kind")?;
        if found != kind {
            return Err(Error::Data(format!("expected a {kind} checkpoint, found {found}")));
        }
        let version = self.meta("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::Data(format!("unsupported checkpoint version {version}")));
        }
        Ok(())
    }
}

pub fn save(path: &Path, store: &ParamStore, metadata: BTreeMap<String, String>) -> Result<()> {
    let views: Vec<(String, F32View)> = store
        .named_tensors()
        .into_iter()
        .map(|(name, t)| {
            let shape = t.dims().to_vec();
            let vals = t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
            let bytes = vals.iter().flat_map(|v| v.to_le_bytes()).collect();
            Ok((name, F32View { shape, bytes }))
        })
        .collect::<Result<_>>()?;
    let meta: HashMap<String, String> = metadata.into_iter().collect();
    let data = safetensors::serialize(views.iter().map(|(n, v)| (n.as_str(), v)), Some(meta))?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, data).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, header) = SafeTensors::read_metadata(&bytes)?;
    let metadata: BTreeMap<String, String> = header
        .metadata()
        .clone()
        .unwrap_or_default()
        .into_iter()
        .collect();
    let st = SafeTensors::deserialize(&bytes)?;
    let mut tensors = BTreeMap::new();
    for (name, view) in st.tensors() {
        if view.dtype() != Dtype::F32 {
            return Err(Error::Data(format!("parameter {name} is not f32")));
        }
        let vals: Vec<f32> = view
            .data()
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.insert(name, Tensor::from_vec(vals, view.shape(), &Device::Cpu)?);
    }
    Ok(Checkpoint { metadata, tensors })
}

/// Content hash of the codec config and parameters.
pub fn codec_fingerprint(system: &CodecSystem) -> Result<String> {
    let mut h = Sha256::new();
    h.update(serde_json::to_string(system.config())?.as_bytes());
    h.update(system.store().fingerprint()?.as_bytes());
    Ok(hex::encode(h.finalize()))
}

pub fn save_codec(path: &Path, system: &CodecSystem) -> Result<String> {
    let fp = codec_fingerprint(system)?;
    let mut meta = BTreeMap::new();
    meta.insert("kind".into(), KIND_CODEC.into());
    meta.insert("version".into(), FORMAT_VERSION.into());
    meta.insert("config".into(), serde_json::to_string(system.config())?);
    meta.insert("fingerprint".into(), fp.clone());
    save(path, system.store(), meta)?;
    Ok(fp)
}

pub fn load_codec(path: &Path, dtype: DType) -> Result<CodecSystem> {
    let ck = load(path)?;
    ck.expect_kind(KIND_CODEC)?;
    let cfg: CodecSystemConfig = serde_json::from_str(ck.meta("config")?)?;
    let system = CodecSystem::new(&cfg, dtype, 0)?;
    system.store().load_tensors(&ck.tensors)?;
    Ok(system)
}

/// A language model with its parameters and the codec it is paired with.
#[derive(Debug, Clone)]
pub struct LoadedLm {
    pub store: ParamStore,
    pub lm: HierarchicalLm,
    pub codec_fingerprint: String,
}

pub fn save_lm(path: &Path, store: &ParamStore, cfg: &LmConfig, codec_fingerprint: &str) -> Result<()> {
    let mut meta = BTreeMap::new();
    meta.insert("kind".into(), KIND_LM.into());
    meta.insert("version".into(), FORMAT_VERSION.into());
    meta.insert("config".into(), serde_json::to_string(cfg)?);
    meta.insert("decoding_mode".into(), cfg.decoding_mode.as_str().into());
    meta.insert("codec_fingerprint".into(), codec_fingerprint.into());
    save(path, store, meta)
}

pub fn load_lm(path: &Path, dtype: DType) -> Result<LoadedLm> {
    let ck = load(path)?;
    ck.expect_kind(KIND_LM)?;
    let cfg: LmConfig = serde_json::from_str(ck.meta("config")?)?;
    let store = ParamStore::new(dtype, 0);
    let lm = HierarchicalLm::new(&store.root().pp("lm"), &cfg)?;
    store.load_tensors(&ck.tensors)?;
    Ok(LoadedLm {
        store,
        lm,
        codec_fingerprint: ck.meta("codec_fingerprint")?.to_string(),
    })
}

/// Fails unless `lm` was trained on tokens of `codec`.
pub fn check_pairing(lm: &LoadedLm, codec: &CodecSystem) -> Result<()> {
    let fp = codec_fingerprint(codec)?;
    if lm.codec_fingerprint != fp {
        return Err(Error::Fingerprint(format!(
            "language model was trained on codec {}, given codec {}",
            short(&lm.codec_fingerprint),
            short(&fp)
        )));
    }
    if lm.lm.config().speech_vocab != codec.config().codec.speech_vocab {
        return Err(Error::Fingerprint("speech vocabulary sizes differ".into()));
    }
    Ok(())
}

pub fn short(fp: &str) -> &str {
    &fp[..fp.len().min(12)]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::DecodingMode;

    fn tiny_codec() -> CodecSystemConfig {
        let mut cfg = CodecSystemConfig::default();
        cfg.codec.extractor_layers = 1;
        cfg.codec.combiner_layers = 1;
        cfg.codec.model_dim = 8;
        cfg.codec.heads = 2;
        cfg.codec.speech_vocab = 16;
        cfg.codec.max_frames = 8;
        cfg.heads.asr_layers = 1;
        cfg.heads.asr_dim = 8;
        cfg.heads.asr_heads = 2;
        cfg.heads.clap_width = 8;
        cfg.heads.clap_heads = 2;
        cfg.heads.clap_dim = 4;
        cfg.heads.max_text = 8;
        cfg
    }

    #[test]
    fn codec_round_trip_preserves_fingerprint() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("codec.safetensors");
        let sys = CodecSystem::new(&tiny_codec(), DType::F32, 4).unwrap();
        let fp = save_codec(&path, &sys).unwrap();
        let back = load_codec(&path, DType::F32).unwrap();
        assert_eq!(codec_fingerprint(&back).unwrap(), fp);
        let x = [1u32, 2, 3, 4];
        assert_eq!(sys.codec.encode_batch(&[&x]).unwrap(), back.codec.encode_batch(&[&x]).unwrap());
        assert!(load_lm(&path, DType::F32).is_err());
    }

    #[test]
    fn lm_round_trip_records_mode_and_pairing() {
        let dir = tempfile::tempdir().unwrap();
        let sys = CodecSystem::new(&tiny_codec(), DType::F32, 4).unwrap();
        let other = CodecSystem::new(&tiny_codec(), DType::F32, 5).unwrap();
        let cfg = LmConfig {
            backbone_layers: 1,
            width: 8,
            heads: 2,
            decoder_heads: 2,
            max_context: 32,
            speech_vocab: 16,
            decoding_mode: DecodingMode::Parallel,
            ..Default::default()
        };
        let store = ParamStore::new(DType::F32, 1);
        let _ = HierarchicalLm::new(&store.root().pp("lm"), &cfg).unwrap();
        let path = dir.path().join("lm.safetensors");
        save_lm(&path, &store, &cfg, &codec_fingerprint(&sys).unwrap()).unwrap();
        let ck = load(&path).unwrap();
        assert_eq!(ck.meta("decoding_mode").unwrap(), "parallel");
        let loaded = load_lm(&path, DType::F32).unwrap();
        assert_eq!(loaded.store.fingerprint().unwrap(), store.fingerprint().unwrap());
        check_pairing(&loaded, &sys).unwrap();
        assert!(matches!(check_pairing(&loaded, &other), Err(Error::Fingerprint(_))));
    }
}

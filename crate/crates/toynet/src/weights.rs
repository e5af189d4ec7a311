//! Weight files: the tensor container with one entry per parameter tensor
//! and the model configuration as the architecture descriptor.
//!
//! Parameters are stored as `f64`, so a reloaded model is bit-identical.

use std::io::{Read, Write};

use mtpose_core::tensorfile::{self, DType, Entry, Header};

use crate::error::{Error, Result};
use crate::model::{init_network, Model, ModelConfig};

pub fn save_weights<W: Write>(w: W, m: &Model) -> Result<()> {
    save_weights_with_meta(w, m, None)
}

/// Same as [`save_weights`], with free-form run metadata in the header.
pub fn save_weights_with_meta<W: Write>(w: W, m: &Model, meta: Option<serde_json::Value>) -> Result<()> {
    let mut header = Header::new(vec![m.param_count()], DType::F64, false);
    let mut offset = 0;
    for l in &m.layers {
        let s = l.shape;
        header.entries.push(Entry { name: format!("{}.weight", l.name), shape: vec![s.cout, s.cin, s.kernel, s.kernel], offset });
        offset += l.weight.len();
        header.entries.push(Entry { name: format!("{}.bias", l.name), shape: vec![s.cout], offset });
        offset += l.bias.len();
    }
    header.architecture = Some(serde_json::to_value(&m.config)?);
    header.meta = meta;
    tensorfile::write(w, &header, &m.flat_params())?;
    Ok(())
}

pub fn load_weights<R: Read>(r: R) -> Result<Model> {
    Ok(load_weights_with_meta(r)?.0)
}

pub fn load_weights_with_meta<R: Read>(r: R) -> Result<(Model, Option<serde_json::Value>)> {
    let (header, data) = tensorfile::read(r)?;
    let meta = header.meta;
    let arch = header.architecture.ok_or_else(|| Error::Format("weight file has no architecture descriptor".into()))?;
    let cfg: ModelConfig = serde_json::from_value(arch).map_err(|e| Error::Format(format!("architecture: {e}")))?;
    let mut m = init_network(&cfg)?;
    let mut expected = Vec::new();
    let mut offset = 0;
    for l in &m.layers {
        let s = l.shape;
        expected.push((format!("{}.weight", l.name), vec![s.cout, s.cin, s.kernel, s.kernel], offset));
        offset += l.weight.len();
        expected.push((format!("{}.bias", l.name), vec![s.cout], offset));
        offset += l.bias.len();
    }
    let found: Vec<(String, Vec<usize>, usize)> = header.entries.into_iter().map(|e| (e.name, e.shape, e.offset)).collect();
    if found != expected || data.len() != m.param_count() {
        return Err(Error::Format("parameter entries do not match the architecture".into()));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Format("non-finite parameter".into()));
    }
    m.set_flat_params(&data)?;
    Ok((m, meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_exact() {
        let m = init_network(&ModelConfig::default()).unwrap();
        let mut buf = Vec::new();
        save_weights(&mut buf, &m).unwrap();
        assert_eq!(load_weights(buf.as_slice()).unwrap(), m);
    }

    #[test]
    fn meta_survives() {
        let m = init_network(&ModelConfig::default()).unwrap();
        let meta = serde_json::json!({ "conf_threshold": 0.25 });
        let mut buf = Vec::new();
        save_weights_with_meta(&mut buf, &m, Some(meta.clone())).unwrap();
        let (back, got) = load_weights_with_meta(buf.as_slice()).unwrap();
        assert_eq!(back, m);
        assert_eq!(got, Some(meta));
    }

    #[test]
    fn rejects_mismatched_entries() {
        let m = init_network(&ModelConfig::default()).unwrap();
        let mut buf = Vec::new();
        save_weights(&mut buf, &m).unwrap();
        let (mut h, data) = tensorfile::read(buf.as_slice()).unwrap();
        h.entries[0].name = "other".into();
        let mut bad = Vec::new();
        tensorfile::write(&mut bad, &h, &data).unwrap();
        assert!(matches!(load_weights(bad.as_slice()), Err(Error::Format(_))));
    }
}

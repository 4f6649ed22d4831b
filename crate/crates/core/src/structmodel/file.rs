//! Structure vector files: a single JSON object `{"arch", "channels", "meta"?}`,
//! written compactly with keys in that order and no trailing whitespace.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{StructError, StructureVector};

pub type StructureMeta = BTreeMap<String, serde_json::Value>;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Document {
    arch: String,
    channels: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    meta: Option<StructureMeta>,
}

pub fn to_canonical_string(s: &StructureVector, meta: Option<&StructureMeta>) -> String {
    let doc = Document {
        arch: s.arch_id.clone(),
        channels: s.channels.clone(),
        meta: meta.cloned(),
    };
    serde_json::to_string(&doc).expect("structure documents always serialize")
}

pub fn parse_structure(text: &str) -> Result<(StructureVector, Option<StructureMeta>), StructError> {
    let doc: Document = serde_json::from_str(text).map_err(|e| StructError::Parse(e.to_string()))?;
    Ok((StructureVector::new(doc.arch, doc.channels), doc.meta))
}

pub fn write_structure(
    path: impl AsRef<Path>,
    s: &StructureVector,
    meta: Option<&StructureMeta>,
) -> Result<(), StructError> {
    std::fs::write(path, to_canonical_string(s, meta))?;
    Ok(())
}

pub fn read_structure(path: impl AsRef<Path>) -> Result<(StructureVector, Option<StructureMeta>), StructError> {
    parse_structure(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_form_is_compact_and_ordered() {
        let s = StructureVector::new("toynet-2", vec![3, 7]);
        assert_eq!(to_canonical_string(&s, None), r#"{"arch":"toynet-2","channels":[3,7]}"#);
        let mut meta = StructureMeta::new();
        meta.insert("eps".into(), serde_json::json!(0.02));
        let text = to_canonical_string(&s, Some(&meta));
        assert_eq!(text, r#"{"arch":"toynet-2","channels":[3,7],"meta":{"eps":0.02}}"#);
        let (back, m) = parse_structure(&text).unwrap();
        assert_eq!(back, s);
        assert_eq!(m, Some(meta));
    }

    #[test]
    fn rejects_garbage() {
        assert!(matches!(parse_structure("{\"arch\":1}"), Err(StructError::Parse(_))));
        assert!(matches!(
            parse_structure(r#"{"arch":"a","channels":[1],"extra":0}"#),
            Err(StructError::Parse(_))
        ));
        assert!(matches!(
            parse_structure(r#"{"arch":"a","channels":[-1]}"#),
            Err(StructError::Parse(_))
        ));
    }
}

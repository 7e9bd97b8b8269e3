//! Port semantic types, runtime values and the coercion lattice applied by
//! input plugs.

use alloc::string::{String, ToString};
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::dataset::DatasetManifest;
use crate::table::Table;

/// Closed set of types a port can carry.
///
/// `Image`, `Mask` and `LabelMap` are refinements of `Tensor`: an image is a
/// 2D/3D numeric tensor, a mask holds only 0/1 and a label map holds
/// non-negative integers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SemanticType {
    Int,
    Float,
    Bool,
    Text,
    Tensor,
    Image,
    Mask,
    LabelMap,
    Dataset,
    Table,
    ModelBlob,
}

impl SemanticType {
    pub const ALL: [SemanticType; 11] = [
        SemanticType::Int,
        SemanticType::Float,
        SemanticType::Bool,
        SemanticType::Text,
        SemanticType::Tensor,
        SemanticType::Image,
        SemanticType::Mask,
        SemanticType::LabelMap,
        SemanticType::Dataset,
        SemanticType::Table,
        SemanticType::ModelBlob,
    ];

    pub fn is_scalar(self) -> bool {
        matches!(
            self,
            SemanticType::Int | SemanticType::Float | SemanticType::Bool | SemanticType::Text
        )
    }

    pub fn is_tensor(self) -> bool {
        matches!(
            self,
            SemanticType::Tensor | SemanticType::Image | SemanticType::Mask | SemanticType::LabelMap
        )
    }

    /// Whether a value of type `from` may flow into a port of type `self`.
    ///
    /// The lattice: identity; `Text` into `Int`/`Float`/`Bool` by strict
    /// parse; `Int` into `Float`; `Mask` into `Image`. Nothing else.
    pub fn accepts(self, from: SemanticType) -> bool {
        use SemanticType::*;
        self == from
            || matches!(
                (from, self),
                (Text, Int) | (Text, Float) | (Text, Bool) | (Int, Float) | (Mask, Image)
            )
    }

    pub fn name(self) -> &'static str {
        use SemanticType::*;
        match self {
            Int => "Int",
            Float => "Float",
            Bool => "Bool",
            Text => "Text",
            Tensor => "Tensor",
            Image => "Image",
            Mask => "Mask",
            LabelMap => "LabelMap",
            Dataset => "Dataset",
            Table => "Table",
            ModelBlob => "ModelBlob",
        }
    }
}

impl fmt::Display for SemanticType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// On-disk encoding of a stored artifact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MediaType {
    MDTensor,
    PNG,
    CSV,
    JSON,
}

impl MediaType {
    pub fn mime(self) -> &'static str {
        match self {
            MediaType::MDTensor => "application/x-mdtensor",
            MediaType::PNG => "image/png",
            MediaType::CSV => "text/csv",
            MediaType::JSON => "application/json",
        }
    }
}

/// Content address of a stored artifact.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ArtifactRef {
    /// Lowercase hex SHA-256 of the file bytes.
    pub hash: String,
    pub media: MediaType,
    pub size_bytes: u64,
}

/// A runtime datum flowing over an edge. Values are never mutated after
/// they are produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Value {
    Int(i64),
    Float(f64),
    Bool(bool),
    Text(String),
    Artifact {
        reference: ArtifactRef,
        semantic: SemanticType,
    },
    Table(Table),
    Dataset(DatasetManifest),
}

impl Value {
    pub fn semantic(&self) -> SemanticType {
        match self {
            Value::Int(_) => SemanticType::Int,
            Value::Float(_) => SemanticType::Float,
            Value::Bool(_) => SemanticType::Bool,
            Value::Text(_) => SemanticType::Text,
            Value::Artifact { semantic, .. } => *semantic,
            Value::Table(_) => SemanticType::Table,
            Value::Dataset(_) => SemanticType::Dataset,
        }
    }

    /// Literal parameter from a JSON scalar. Objects, arrays and null are
    /// not valid literals.
    pub fn from_json_literal(json: &serde_json::Value) -> Option<Value> {
        match json {
            serde_json::Value::Bool(b) => Some(Value::Bool(*b)),
            serde_json::Value::Number(n) => n
                .as_i64()
                .map(Value::Int)
                .or_else(|| n.as_f64().map(Value::Float)),
            serde_json::Value::String(s) => Some(Value::Text(s.clone())),
            _ => None,
        }
    }

    pub fn to_json_literal(&self) -> Option<serde_json::Value> {
        Some(match self {
            Value::Int(i) => serde_json::Value::from(*i),
            Value::Float(f) => serde_json::Number::from_f64(*f)?.into(),
            Value::Bool(b) => serde_json::Value::Bool(*b),
            Value::Text(s) => serde_json::Value::String(s.clone()),
            _ => return None,
        })
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Float(f) => Some(*f),
            Value::Int(i) => Some(*i as f64),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CoercionError {
    #[error("cannot parse {text:?} as {target}")]
    Unparsable { text: String, target: SemanticType },
    #[error("integer {0} has no exact Float representation")]
    Lossy(i64),
    #[error("no conversion from {from} to {to}")]
    Undefined { from: SemanticType, to: SemanticType },
}

const EXACT_INT_LIMIT: i64 = 1 << 53;

/// Converts `value` to `target` along the coercion lattice.
pub fn coerce(value: &Value, target: SemanticType) -> Result<Value, CoercionError> {
    let from = value.semantic();
    if from == target {
        return Ok(value.clone());
    }
    match (value, target) {
        (Value::Text(s), SemanticType::Int) => s
            .parse::<i64>()
            .map(Value::Int)
            .map_err(|_| unparsable(s, target)),
        (Value::Text(s), SemanticType::Float) => match s.parse::<f64>() {
            Ok(f) if f.is_finite() => Ok(Value::Float(f)),
            _ => Err(unparsable(s, target)),
        },
        (Value::Text(s), SemanticType::Bool) => match s.as_str() {
            "true" => Ok(Value::Bool(true)),
            "false" => Ok(Value::Bool(false)),
            _ => Err(unparsable(s, target)),
        },
        (Value::Int(i), SemanticType::Float) => {
            if (-EXACT_INT_LIMIT..=EXACT_INT_LIMIT).contains(i) {
                Ok(Value::Float(*i as f64))
            } else {
                Err(CoercionError::Lossy(*i))
            }
        }
        (Value::Artifact { reference, semantic: SemanticType::Mask }, SemanticType::Image) => {
            Ok(Value::Artifact {
                reference: reference.clone(),
                semantic: SemanticType::Image,
            })
        }
        _ => Err(CoercionError::Undefined { from, to: target }),
    }
}

fn unparsable(text: &str, target: SemanticType) -> CoercionError {
    CoercionError::Unparsable {
        text: text.to_string(),
        target,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use proptest::prelude::*;

    fn text(s: &str) -> Value {
        Value::Text(s.to_string())
    }

    #[test]
    fn parses_integer_text() {
        assert_eq!(coerce(&text("172"), SemanticType::Int), Ok(Value::Int(172)));
    }

    #[test]
    fn parses_scientific_float_text() {
        assert_eq!(
            coerce(&text("4.081e-3"), SemanticType::Float),
            Ok(Value::Float(0.004081))
        );
    }

    #[test]
    fn rejects_garbage_float() {
        assert!(matches!(
            coerce(&text("abc"), SemanticType::Float),
            Err(CoercionError::Unparsable { .. })
        ));
        assert!(coerce(&text("NaN"), SemanticType::Float).is_err());
        assert!(coerce(&text("1.5"), SemanticType::Int).is_err());
        assert!(coerce(&text("yes"), SemanticType::Bool).is_err());
    }

    #[test]
    fn no_float_to_int() {
        assert_eq!(
            coerce(&Value::Float(2.0), SemanticType::Int),
            Err(CoercionError::Undefined {
                from: SemanticType::Float,
                to: SemanticType::Int
            })
        );
    }

    #[test]
    fn int_widening_is_exact_only() {
        assert_eq!(coerce(&Value::Int(-3), SemanticType::Float), Ok(Value::Float(-3.0)));
        assert_eq!(
            coerce(&Value::Int(i64::MAX), SemanticType::Float),
            Err(CoercionError::Lossy(i64::MAX))
        );
    }

    #[test]
    fn mask_widens_to_image() {
        let r = ArtifactRef {
            hash: "ab".into(),
            media: MediaType::MDTensor,
            size_bytes: 1,
        };
        let mask = Value::Artifact {
            reference: r.clone(),
            semantic: SemanticType::Mask,
        };
        assert_eq!(
            coerce(&mask, SemanticType::Image),
            Ok(Value::Artifact {
                reference: r,
                semantic: SemanticType::Image
            })
        );
        assert!(SemanticType::Image.accepts(SemanticType::Mask));
        assert!(!SemanticType::Mask.accepts(SemanticType::Image));
        assert!(!SemanticType::Dataset.accepts(SemanticType::Float));
    }

    fn scalar() -> impl Strategy<Value = Value> {
        prop_oneof![
            any::<i64>().prop_map(Value::Int),
            any::<f64>().prop_filter("finite", |f| f.is_finite()).prop_map(Value::Float),
            any::<bool>().prop_map(Value::Bool),
            "[-+0-9.eE]{0,8}|true|false|[a-z]{0,4}".prop_map(Value::Text),
        ]
    }

    fn scalar_type() -> impl Strategy<Value = SemanticType> {
        prop_oneof![
            Just(SemanticType::Int),
            Just(SemanticType::Float),
            Just(SemanticType::Bool),
            Just(SemanticType::Text),
        ]
    }

    proptest! {
        #[test]
        fn coercion_is_idempotent(v in scalar(), t in scalar_type()) {
            if let Ok(once) = coerce(&v, t) {
                prop_assert_eq!(coerce(&once, t), Ok(once.clone()));
            }
        }

        #[test]
        fn successful_coercion_lands_on_target(v in scalar(), t in scalar_type()) {
            if let Ok(out) = coerce(&v, t) {
                prop_assert_eq!(out.semantic(), t);
                prop_assert!(t.accepts(v.semantic()));
            }
        }
    }
}

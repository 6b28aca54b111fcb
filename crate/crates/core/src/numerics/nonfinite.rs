//! Serde codec for `f64` fields that may hold NaN or infinities.
//!
//! JSON has no literal for them, and `serde_json` writes both as `null`
//! without reading `null` back. With `#[serde(with = "nonfinite")]` a NaN
//! is written as `null` and `±inf` as the strings `"inf"` / `"-inf"`; all
//! three read back exactly.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum Repr {
    Number(f64),
    Text(String),
    Null,
}

pub fn serialize<S: Serializer>(value: &f64, serializer: S) -> Result<S::Ok, S::Error> {
    let repr = if value.is_nan() {
        Repr::Null
    } else if value.is_infinite() {
        Repr::Text(if *value > 0.0 { "inf" } else { "-inf" }.to_string())
    } else {
        Repr::Number(*value)
    };
    repr.serialize(serializer)
}

pub fn deserialize<'de, D: Deserializer<'de>>(deserializer: D) -> Result<f64, D::Error> {
    match Repr::deserialize(deserializer)? {
        Repr::Number(v) => Ok(v),
        Repr::Null => Ok(f64::NAN),
        Repr::Text(s) => match s.as_str() {
            "inf" => Ok(f64::INFINITY),
            "-inf" => Ok(f64::NEG_INFINITY),
            "nan" | "NaN" => Ok(f64::NAN),
            other => Err(serde::de::Error::custom(format!("expected a number, got `{other}`"))),
        },
    }
}

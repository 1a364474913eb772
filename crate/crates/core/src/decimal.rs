//! Serde adapters writing big integers as decimal strings.

use alloc::string::{String, ToString};
use core::str::FromStr;

use serde::{de::Error, Deserialize, Deserializer, Serializer};

pub fn serialize<S: Serializer, T: ToString>(value: &T, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&value.to_string())
}

pub fn deserialize<'de, D: Deserializer<'de>, T: FromStr>(d: D) -> Result<T, D::Error> {
    let text = String::deserialize(d)?;
    text.parse().map_err(|_| D::Error::custom(alloc::format!("invalid decimal integer {text:?}")))
}

pub mod option {
    use super::*;

    pub fn serialize<S: Serializer, T: ToString>(value: &Option<T>, s: S) -> Result<S::Ok, S::Error> {
        match value {
            Some(v) => s.serialize_some(&v.to_string()),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>, T: FromStr>(d: D) -> Result<Option<T>, D::Error> {
        match Option::<String>::deserialize(d)? {
            Some(text) => text
                .parse()
                .map(Some)
                .map_err(|_| D::Error::custom(alloc::format!("invalid decimal integer {text:?}"))),
            None => Ok(None),
        }
    }
}

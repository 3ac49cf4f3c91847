//! Typed, validated node parameters and the services exposing them.
//!
//! Every node hosts three services:
//!
//! | service                 | request                                   | response            |
//! |-------------------------|-------------------------------------------|---------------------|
//! | `__param/<node>/get`    | STRING_UTF8 parameter name                | the typed value     |
//! | `__param/<node>/set`    | `u16 name_len, name, value bytes`, tagged with the value's type | NULL |
//! | `__param/<node>/list`   | NULL                                      | STRING_UTF8 JSON array of names |

use std::collections::BTreeMap;
use std::time::Duration;

use bytes::{BufMut, Bytes, BytesMut};
use thiserror::Error;

use crate::envelope::{decode_typed_payload, encode_typed_payload, Frame, PayloadType, Value};
use crate::services::{CallError, ServiceHandler};

use super::node::Node;
use super::NodeError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParameterError {
    #[error("unknown parameter {0:?}")]
    Unknown(String),
    #[error("parameter {0:?} already declared")]
    AlreadyDeclared(String),
    #[error("parameters cannot have type {0}")]
    UnsupportedType(PayloadType),
    #[error("parameter {name:?} has type {expected}, not {actual}")]
    TypeMismatch {
        name: String,
        expected: PayloadType,
        actual: PayloadType,
    },
    #[error("parameter {name:?}: {reason}")]
    Invalid { name: String, reason: String },
    #[error("malformed parameter request: {0}")]
    Malformed(String),
}

/// Constraint checked on every value a parameter takes.
#[derive(Debug, Clone, PartialEq)]
pub enum Validator {
    IntRange { min: i64, max: i64 },
    FloatRange { min: f64, max: f64 },
    MaxLength(usize),
}

impl Validator {
    pub fn check(&self, value: &Value) -> Result<(), String> {
        match (self, value) {
            (Validator::IntRange { min, max }, Value::Int64(v)) if v < min || v > max => {
                Err(format!("{v} outside [{min}, {max}]"))
            }
            (Validator::FloatRange { min, max }, Value::Float64(v)) if !(v >= min && v <= max) => {
                Err(format!("{v} outside [{min}, {max}]"))
            }
            (Validator::MaxLength(n), Value::String(s)) if s.chars().count() > *n => {
                Err(format!("length {} exceeds {n}", s.chars().count()))
            }
            (Validator::IntRange { .. }, Value::Int64(_))
            | (Validator::FloatRange { .. }, Value::Float64(_))
            | (Validator::MaxLength(_), Value::String(_)) => Ok(()),
            (v, value) => Err(format!("{v:?} does not apply to {}", value.payload_type())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParameterDecl {
    pub name: String,
    pub payload_type: PayloadType,
    pub default: Value,
    pub validator: Option<Validator>,
}

impl ParameterDecl {
    pub fn new(name: impl Into<String>, default: impl Into<Value>) -> ParameterDecl {
        let default = default.into();
        ParameterDecl {
            name: name.into(),
            payload_type: default.payload_type(),
            default,
            validator: None,
        }
    }

    pub fn with_validator(mut self, validator: Validator) -> ParameterDecl {
        self.validator = Some(validator);
        self
    }

    fn check(&self, value: &Value) -> Result<(), ParameterError> {
        let actual = value.payload_type();
        if actual != self.payload_type {
            return Err(ParameterError::TypeMismatch {
                name: self.name.clone(),
                expected: self.payload_type,
                actual,
            });
        }
        if let Some(v) = &self.validator {
            v.check(value).map_err(|reason| ParameterError::Invalid {
                name: self.name.clone(),
                reason,
            })?;
        }
        Ok(())
    }
}

const PARAM_TYPES: [PayloadType; 4] = [
    PayloadType::Bool,
    PayloadType::Int64,
    PayloadType::Float64,
    PayloadType::StringUtf8,
];

#[derive(Debug, Default)]
pub(crate) struct ParamStore {
    entries: BTreeMap<String, (ParameterDecl, Value)>,
}

impl ParamStore {
    pub(crate) fn declare(&mut self, decl: ParameterDecl) -> Result<(), ParameterError> {
        if !PARAM_TYPES.contains(&decl.payload_type) {
            return Err(ParameterError::UnsupportedType(decl.payload_type));
        }
        if self.entries.contains_key(&decl.name) {
            return Err(ParameterError::AlreadyDeclared(decl.name));
        }
        decl.check(&decl.default)?;
        self.entries.insert(decl.name.clone(), (decl.clone(), decl.default));
        Ok(())
    }

    pub(crate) fn get(&self, name: &str) -> Result<Value, ParameterError> {
        self.entries
            .get(name)
            .map(|(_, v)| v.clone())
            .ok_or_else(|| ParameterError::Unknown(name.to_string()))
    }

    pub(crate) fn set(&mut self, name: &str, value: Value) -> Result<(), ParameterError> {
        let (decl, current) = self
            .entries
            .get_mut(name)
            .ok_or_else(|| ParameterError::Unknown(name.to_string()))?;
        decl.check(&value)?;
        *current = value;
        Ok(())
    }

    pub(crate) fn names(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }
}

fn service_name(node: &str, op: &str) -> String {
    format!("__param/{node}/{op}")
}

/// Request payload of the `set` service.
pub fn encode_set_request(name: &str, value: &Value) -> Result<(PayloadType, Bytes), ParameterError> {
    let (ty, body) = encode_typed_payload(value).map_err(|e| ParameterError::Malformed(e.to_string()))?;
    let name_len = u16::try_from(name.len()).map_err(|_| ParameterError::Malformed("name too long".into()))?;
    let mut buf = BytesMut::with_capacity(2 + name.len() + body.len());
    buf.put_u16(name_len);
    buf.put_slice(name.as_bytes());
    buf.put_slice(&body);
    Ok((ty, buf.freeze()))
}

pub fn decode_set_request(frame: &Frame) -> Result<(String, Value), ParameterError> {
    let p = &frame.payload;
    if p.len() < 2 {
        return Err(ParameterError::Malformed("missing name length".into()));
    }
    let n = u16::from_be_bytes([p[0], p[1]]) as usize;
    if p.len() < 2 + n {
        return Err(ParameterError::Malformed("truncated name".into()));
    }
    let name = std::str::from_utf8(&p[2..2 + n])
        .map_err(|_| ParameterError::Malformed("name is not UTF-8".into()))?
        .to_string();
    let value = decode_typed_payload(frame.payload_type, &p.slice(2 + n..))
        .map_err(|e| ParameterError::Malformed(e.to_string()))?;
    Ok((name, value))
}

pub(crate) fn host_parameter_services(node: &Node) -> Result<(), NodeError> {
    let name = node.name().to_string();
    let weak = std::sync::Arc::downgrade(&node.inner);
    let w = weak.clone();
    node.host_service(
        &service_name(&name, "get"),
        ServiceHandler::raw(move |frame: &Frame| {
            let node = w.upgrade().ok_or("node gone")?;
            let Value::String(param) = decode_typed_payload(frame.payload_type, &frame.payload)
                .map_err(|e| e.to_string())?
            else {
                return Err("get expects a STRING_UTF8 name".into());
            };
            let value = node.params.lock().get(&param).map_err(|e| e.to_string())?;
            Ok(value)
        }),
    )?;
    let w = weak.clone();
    node.host_service(
        &service_name(&name, "set"),
        ServiceHandler::raw(move |frame: &Frame| {
            let node = w.upgrade().ok_or("node gone")?;
            let (param, value) = decode_set_request(frame).map_err(|e| e.to_string())?;
            node.params.lock().set(&param, value).map_err(|e| e.to_string())?;
            Ok(Value::Null)
        }),
    )?;
    let w = weak;
    node.host_service(
        &service_name(&name, "list"),
        ServiceHandler::raw(move |_frame: &Frame| {
            let node = w.upgrade().ok_or("node gone")?;
            let names = node.params.lock().names();
            Ok(Value::String(serde_json::to_string(&names).expect("names serialize")))
        }),
    )?;
    Ok(())
}

impl Node {
    pub fn declare_parameter(&self, decl: ParameterDecl) -> Result<(), NodeError> {
        Ok(self.inner.params.lock().declare(decl)?)
    }

    pub fn get_parameter(&self, name: &str) -> Result<Value, ParameterError> {
        self.inner.params.lock().get(name)
    }

    /// Type-checks and validates `value`; on any error the stored value is
    /// left unchanged.
    pub fn set_parameter(&self, name: &str, value: impl Into<Value>) -> Result<(), ParameterError> {
        self.inner.params.lock().set(name, value.into())
    }

    pub fn parameter_names(&self) -> Vec<String> {
        self.inner.params.lock().names()
    }

    /// Reads a parameter of another node through its parameter service.
    pub fn get_remote_parameter(&self, node: &str, name: &str, timeout: Duration) -> Result<Value, CallError> {
        self.call_async(&service_name(node, "get"), Value::from(name), timeout)
            .wait_result(timeout)
    }

    pub fn set_remote_parameter(
        &self,
        node: &str,
        name: &str,
        value: impl Into<Value>,
        timeout: Duration,
    ) -> Result<(), CallError> {
        let (ty, body) = encode_set_request(name, &value.into()).map_err(|e| CallError::Failed(e.to_string()))?;
        self.call_payload(&service_name(node, "set"), ty, body, timeout)
            .wait_result(timeout)
            .map(|_| ())
    }

    pub fn list_remote_parameters(&self, node: &str, timeout: Duration) -> Result<Vec<String>, CallError> {
        let v = self
            .call_async(&service_name(node, "list"), Value::Null, timeout)
            .wait_result(timeout)?;
        let text = v.as_str().ok_or_else(|| CallError::Failed("list reply is not a string".into()))?;
        serde_json::from_str(text).map_err(|e| CallError::Failed(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with_speed() -> ParamStore {
        let mut s = ParamStore::default();
        s.declare(ParameterDecl::new("max_speed", 10i64).with_validator(Validator::IntRange { min: 0, max: 100 }))
            .unwrap();
        s
    }

    #[test]
    fn default_read_back() {
        assert_eq!(store_with_speed().get("max_speed").unwrap(), Value::Int64(10));
    }

    #[test]
    fn wrong_type_leaves_value() {
        let mut s = store_with_speed();
        assert!(matches!(s.set("max_speed", Value::Float64(3.5)), Err(ParameterError::TypeMismatch { .. })));
        assert_eq!(s.get("max_speed").unwrap(), Value::Int64(10));
    }

    #[test]
    fn validator_boundaries() {
        let mut s = store_with_speed();
        assert!(matches!(s.set("max_speed", Value::Int64(101)), Err(ParameterError::Invalid { .. })));
        s.set("max_speed", Value::Int64(100)).unwrap();
        s.set("max_speed", Value::Int64(0)).unwrap();
        assert!(s.set("max_speed", Value::Int64(-1)).is_err());
        assert_eq!(s.get("max_speed").unwrap(), Value::Int64(0));
    }

    #[test]
    fn declaration_rules() {
        let mut s = store_with_speed();
        assert!(matches!(
            s.declare(ParameterDecl::new("max_speed", 1i64)),
            Err(ParameterError::AlreadyDeclared(_))
        ));
        assert!(matches!(
            s.declare(ParameterDecl::new("blob", Value::Bytes(Bytes::new()))),
            Err(ParameterError::UnsupportedType(_))
        ));
        assert!(s
            .declare(ParameterDecl::new("bad", 500i64).with_validator(Validator::IntRange { min: 0, max: 1 }))
            .is_err());
        assert!(matches!(s.get("nope"), Err(ParameterError::Unknown(_))));
    }

    #[test]
    fn set_request_round_trip() {
        let (ty, body) = encode_set_request("gain", &Value::Float64(0.25)).unwrap();
        let frame = Frame::new(crate::envelope::FrameKind::SvcReq, "x").with_payload(ty, body);
        assert_eq!(decode_set_request(&frame).unwrap(), ("gain".to_string(), Value::Float64(0.25)));
        let short = Frame::new(crate::envelope::FrameKind::SvcReq, "x").with_payload(ty, Bytes::from_static(&[0, 9, b'a']));
        assert!(decode_set_request(&short).is_err());
    }

    #[test]
    fn string_length_and_float_range() {
        let mut s = ParamStore::default();
        s.declare(ParameterDecl::new("label", "ab").with_validator(Validator::MaxLength(3))).unwrap();
        assert!(s.set("label", Value::from("abcd")).is_err());
        s.set("label", Value::from("abc")).unwrap();
        s.declare(ParameterDecl::new("gain", 0.5).with_validator(Validator::FloatRange { min: 0.0, max: 1.0 }))
            .unwrap();
        assert!(s.set("gain", Value::Float64(f64::NAN)).is_err());
        assert_eq!(s.get("gain").unwrap(), Value::Float64(0.5));
    }

    fn arb_value() -> impl proptest::strategy::Strategy<Value = Value> {
        use proptest::prelude::*;
        prop_oneof![
            any::<i64>().prop_map(Value::Int64),
            (-200i64..200).prop_map(Value::Int64),
            any::<f64>().prop_map(Value::Float64),
            any::<bool>().prop_map(Value::Bool),
            "[a-z]{0,8}".prop_map(Value::String),
        ]
    }

    proptest::proptest! {
        #[test]
        fn stored_values_always_satisfy_their_declaration(attempts in proptest::collection::vec(arb_value(), 0..60)) {
            let mut s = store_with_speed();
            let mut expected = Value::Int64(10);
            for v in attempts {
                let ok = matches!(&v, Value::Int64(x) if (0..=100).contains(x));
                let r = s.set("max_speed", v.clone());
                proptest::prop_assert_eq!(r.is_ok(), ok);
                if ok {
                    expected = v;
                }
                let cur = s.get("max_speed").unwrap();
                proptest::prop_assert_eq!(&cur, &expected);
            }
        }
    }
}

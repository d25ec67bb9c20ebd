//! Wire messages shared by the socket and simulated transports.
//!
//! Every message is a JSON object framed by a big-endian `u32` byte length.
//! Requests are tagged by `"op"`; responses carry `"ok"` plus op-specific
//! fields. Payloads are base64, version vectors use their canonical form.

use std::io::{self, Read, Write};

use bytes::Bytes;
use serde::{Deserialize, Serialize};

use crate::model::{
    KeygroupConfig, KeygroupName, NodeId, Payload, ReplicaConfig, TriggerConfig, VersionVector,
    VersionedValue,
};

/// Upper bound on a single frame.
pub const MAX_FRAME: u32 = 64 << 20;

pub(crate) mod b64 {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine;
    use bytes::Bytes;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(b: &Bytes, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&STANDARD.encode(b))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Bytes, D::Error> {
        let s = String::deserialize(d)?;
        STANDARD
            .decode(s)
            .map(Bytes::from)
            .map_err(serde::de::Error::custom)
    }

    pub mod opt {
        use super::*;

        pub fn serialize<S: Serializer>(b: &Option<Bytes>, s: S) -> Result<S::Ok, S::Error> {
            match b {
                Some(b) => super::serialize(b, s),
                None => s.serialize_none(),
            }
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Bytes>, D::Error> {
            let s = Option::<String>::deserialize(d)?;
            s.map(|s| STANDARD.decode(s).map(Bytes::from))
                .transpose()
                .map_err(serde::de::Error::custom)
        }
    }
}

/// A value on the wire. `val` absent means tombstone.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireValue {
    #[serde(with = "b64::opt", default, skip_serializing_if = "Option::is_none")]
    pub val: Option<Bytes>,
    pub version: VersionVector,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub write_time: Option<u64>,
}

impl WireValue {
    pub fn from_stored(v: &VersionedValue) -> Self {
        WireValue {
            val: v.payload.bytes().cloned(),
            version: v.version.clone(),
            write_time: Some(v.write_time),
        }
    }

    /// Client-facing form without the write time.
    pub fn public(v: &VersionedValue) -> Self {
        WireValue {
            write_time: None,
            ..Self::from_stored(v)
        }
    }

    pub fn into_stored(self) -> VersionedValue {
        VersionedValue {
            payload: match self.val {
                Some(b) => Payload::Value(b),
                None => Payload::Tombstone,
            },
            version: self.version,
            write_time: self.write_time.unwrap_or(0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireEntry {
    pub key: String,
    pub values: Vec<WireValue>,
}

/// One replicated write, fanned out by the coordinating node.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplicationMessage {
    pub kg: KeygroupName,
    pub key: String,
    #[serde(flatten)]
    pub value: WireValue,
    pub origin: NodeId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriggerKind {
    Update,
    Delete,
}

/// Body posted to a trigger endpoint; the endpoint answers `{"ok":true}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriggerEvent {
    pub kind: TriggerKind,
    pub kg: KeygroupName,
    pub key: String,
    #[serde(with = "b64::opt", default, skip_serializing_if = "Option::is_none")]
    pub val: Option<Bytes>,
}

/// Keygroup configuration change accepted by the naming service.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "change", rename_all = "snake_case")]
pub enum ConfigChange {
    AddReplica { replica: ReplicaConfig },
    RemoveReplica { node: NodeId },
    SetTtl { node: NodeId, ttl: Option<u64> },
    AddTrigger { trigger: TriggerConfig },
    RemoveTrigger { id: String },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Request {
    Update {
        kg: KeygroupName,
        key: String,
        #[serde(with = "b64")]
        val: Bytes,
        /// Versions the writer has seen. Absent for writers that ignore
        /// versioning; such a write supersedes whatever the node stores.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        supersede: Option<Vec<VersionVector>>,
    },
    Delete {
        kg: KeygroupName,
        key: String,
        /// Versions the writer has seen. Absent for writers that ignore
        /// versioning; such a write supersedes whatever the node stores.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        supersede: Option<Vec<VersionVector>>,
    },
    Read {
        kg: KeygroupName,
        key: String,
    },
    Scan {
        kg: KeygroupName,
        #[serde(default)]
        start: String,
        count: usize,
    },
    Append {
        kg: KeygroupName,
        #[serde(with = "b64")]
        val: Bytes,
    },
    /// A batch of replicated writes; answered with `ack` = `seq` of the
    /// last item.
    Replicate {
        origin: NodeId,
        seq: u64,
        items: Vec<ReplicationMessage>,
    },
    PullPage {
        kg: KeygroupName,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        after: Option<String>,
        count: usize,
        config_version: u64,
    },
    /// Standalone acknowledgement of replicated batches up to `seq`.
    Ack {
        origin: NodeId,
        seq: u64,
    },
    RegisterNode {
        id: NodeId,
        addr: String,
    },
    ListNodes,
    CreateKeygroup {
        config: KeygroupConfig,
    },
    UpdateKeygroup {
        name: KeygroupName,
        expected_version: u64,
        #[serde(flatten)]
        change: ConfigChange,
    },
    GetConfig {
        name: KeygroupName,
    },
    Watch {
        name: KeygroupName,
        since_version: u64,
    },
    /// All configuration changes with global sequence number >= `since`.
    Changes {
        since: u64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    Outdated,
    NotFound,
    NotReplica,
    NotReady,
    ModeViolation,
    UnknownKeygroup,
    UnknownNode,
    Conflict,
    Invalid,
    Storage,
    BadRequest,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Response {
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub err: Option<ErrorCode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub version: Option<VersionVector>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub values: Option<Vec<WireValue>>,
    /// Versions of tombstone siblings that accompany a read.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tombstones: Option<Vec<VersionVector>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entries: Option<Vec<WireEntry>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub next: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ack: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<KeygroupConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub configs: Option<Vec<KeygroupConfig>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_version: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nodes: Option<Vec<(NodeId, String)>>,
}

impl Response {
    pub fn ok() -> Self {
        Response {
            ok: true,
            ..Default::default()
        }
    }

    pub fn error(code: ErrorCode, detail: impl Into<String>) -> Self {
        let detail = detail.into();
        Response {
            ok: false,
            err: Some(code),
            detail: (!detail.is_empty()).then_some(detail),
            ..Default::default()
        }
    }

    pub fn with_version(mut self, v: VersionVector) -> Self {
        self.version = Some(v);
        self
    }

    pub fn code(&self) -> Option<ErrorCode> {
        if self.ok {
            None
        } else {
            Some(self.err.unwrap_or(ErrorCode::BadRequest))
        }
    }
}

pub fn encode<T: Serialize>(msg: &T) -> Vec<u8> {
    serde_json::to_vec(msg).expect("wire message serializes")
}

pub fn write_frame<W: Write, T: Serialize>(w: &mut W, msg: &T) -> io::Result<()> {
    let body = encode(msg);
    if body.len() > MAX_FRAME as usize {
        return Err(io::Error::new(io::ErrorKind::InvalidInput, "frame too large"));
    }
    let mut buf = Vec::with_capacity(body.len() + 4);
    buf.extend_from_slice(&(body.len() as u32).to_be_bytes());
    buf.extend_from_slice(&body);
    w.write_all(&buf)?;
    w.flush()
}

/// Reads one frame; `Ok(None)` on clean end of stream.
pub fn read_frame<R: Read>(r: &mut R) -> io::Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let len = u32::from_be_bytes(len);
    if len > MAX_FRAME {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "frame too large"));
    }
    let mut body = vec![0u8; len as usize];
    r.read_exact(&mut body)?;
    Ok(Some(body))
}

pub fn read_message<R: Read, T: for<'de> Deserialize<'de>>(r: &mut R) -> io::Result<Option<T>> {
    match read_frame(r)? {
        None => Ok(None),
        Some(body) => serde_json::from_slice(&body)
            .map(Some)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::vv;

    #[test]
    fn update_request_shape() {
        let req = Request::Update {
            kg: KeygroupName::new("forum").unwrap(),
            key: "t1".into(),
            val: Bytes::from_static(b"hi"),
            supersede: Some(vec![vv(&[("B", 1), ("A", 3)])]),
        };
        let text = String::from_utf8(encode(&req)).unwrap();
        assert_eq!(
            text,
            r#"{"op":"update","kg":"forum","key":"t1","val":"aGk=","supersede":[{"A":3,"B":1}]}"#
        );
        let back: Request = serde_json::from_str(&text).unwrap();
        assert_eq!(back, req);
    }

    #[test]
    fn response_shapes() {
        let ok = Response::ok().with_version(vv(&[("A", 1)]));
        assert_eq!(String::from_utf8(encode(&ok)).unwrap(), r#"{"ok":true,"version":{"A":1}}"#);
        let err = Response::error(ErrorCode::Outdated, "");
        assert_eq!(String::from_utf8(encode(&err)).unwrap(), r#"{"ok":false,"err":"outdated"}"#);
    }

    #[test]
    fn trigger_event_shape() {
        let ev = TriggerEvent {
            kind: TriggerKind::Delete,
            kg: KeygroupName::new("raw").unwrap(),
            key: "k".into(),
            val: None,
        };
        assert_eq!(
            String::from_utf8(encode(&ev)).unwrap(),
            r#"{"kind":"delete","kg":"raw","key":"k"}"#
        );
    }

    #[test]
    fn frames_round_trip() {
        let mut buf = Vec::new();
        write_frame(&mut buf, &Request::ListNodes).unwrap();
        write_frame(&mut buf, &Response::ok()).unwrap();
        assert_eq!(&buf[..4], &(br#"{"op":"list_nodes"}"#.len() as u32).to_be_bytes());
        let mut r = &buf[..];
        let a: Request = read_message(&mut r).unwrap().unwrap();
        let b: Response = read_message(&mut r).unwrap().unwrap();
        assert_eq!(a, Request::ListNodes);
        assert!(b.ok);
        assert!(read_message::<_, Request>(&mut r).unwrap().is_none());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn vector() -> impl Strategy<Value = VersionVector> {
            prop::collection::vec(0u64..4, 2).prop_map(|cs| vv(&[("A", cs[0]), ("B", cs[1])]))
        }

        proptest! {
            #[test]
            fn update_round_trips(
                key in "[a-zA-Z0-9_-]{1,12}",
                val in prop::collection::vec(any::<u8>(), 0..64),
                supersede in prop::option::of(prop::collection::vec(vector(), 0..4)),
            ) {
                let req = Request::Update {
                    kg: KeygroupName::new("kg").unwrap(),
                    key,
                    val: Bytes::from(val),
                    supersede,
                };
                let mut buf = Vec::new();
                write_frame(&mut buf, &req).unwrap();
                let back: Request = read_message(&mut &buf[..]).unwrap().unwrap();
                prop_assert_eq!(back, req);
            }

            #[test]
            fn values_round_trip(val in prop::option::of(prop::collection::vec(any::<u8>(), 0..32)), v in vector(), t in any::<u64>()) {
                let wv = WireValue { val: val.map(Bytes::from), version: v, write_time: Some(t) };
                let back: WireValue = serde_json::from_slice(&encode(&wv)).unwrap();
                prop_assert_eq!(&back, &wv);
                prop_assert_eq!(WireValue::from_stored(&back.clone().into_stored()), wv);
            }
        }
    }
}

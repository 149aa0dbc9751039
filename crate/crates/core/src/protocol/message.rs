//! Length-prefixed frames: 4-byte big-endian length of the rest of the frame,
//! a UTF-8 JSON header carrying `kind` and `blob_len`, then the blob bytes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::BBox;
use crate::head::{DeltaHeader, ParamDelta};

/// Frames larger than this are rejected before allocation.
pub const MAX_FRAME_LEN: usize = 64 * 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MessageKind {
    Hello,
    Candidate,
    FeedbackUninteresting,
    FeedbackAnnotation,
    ParamUpdate,
    Ack,
}

impl MessageKind {
    pub const ALL: [MessageKind; 6] = [
        Self::Hello,
        Self::Candidate,
        Self::FeedbackUninteresting,
        Self::FeedbackAnnotation,
        Self::ParamUpdate,
        Self::Ack,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Hello => "HELLO",
            Self::Candidate => "CANDIDATE",
            Self::FeedbackUninteresting => "FEEDBACK_UNINTERESTING",
            Self::FeedbackAnnotation => "FEEDBACK_ANNOTATION",
            Self::ParamUpdate => "PARAM_UPDATE",
            Self::Ack => "ACK",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Hello {
        node: String,
        mission_id: String,
        head_version: u64,
    },
    Candidate {
        frame_id: u64,
        score: f64,
        /// Mission time at which the frame was captured.
        t_ms: u64,
        image: Vec<u8>,
    },
    FeedbackUninteresting {
        frame_id: u64,
    },
    FeedbackAnnotation {
        frame_id: u64,
        class_name: String,
        boxes: Vec<BBox>,
    },
    ParamUpdate(ParamDelta),
    Ack {
        acked: MessageKind,
        frame_id: Option<u64>,
        version: Option<u64>,
    },
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE", deny_unknown_fields)]
enum Header {
    Hello {
        node: String,
        mission_id: String,
        head_version: u64,
        blob_len: usize,
    },
    Candidate {
        frame_id: u64,
        score: f64,
        t_ms: u64,
        blob_len: usize,
    },
    FeedbackUninteresting {
        frame_id: u64,
        blob_len: usize,
    },
    FeedbackAnnotation {
        frame_id: u64,
        class_name: String,
        boxes: Vec<BBox>,
        blob_len: usize,
    },
    ParamUpdate(DeltaHeader),
    Ack {
        acked: MessageKind,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        frame_id: Option<u64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        version: Option<u64>,
        blob_len: usize,
    },
}

impl Message {
    pub fn kind(&self) -> MessageKind {
        match self {
            Self::Hello { .. } => MessageKind::Hello,
            Self::Candidate { .. } => MessageKind::Candidate,
            Self::FeedbackUninteresting { .. } => MessageKind::FeedbackUninteresting,
            Self::FeedbackAnnotation { .. } => MessageKind::FeedbackAnnotation,
            Self::ParamUpdate(_) => MessageKind::ParamUpdate,
            Self::Ack { .. } => MessageKind::Ack,
        }
    }

    pub fn frame_id(&self) -> Option<u64> {
        match self {
            Self::Candidate { frame_id, .. }
            | Self::FeedbackUninteresting { frame_id }
            | Self::FeedbackAnnotation { frame_id, .. } => Some(*frame_id),
            Self::Ack { frame_id, .. } => *frame_id,
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Candidate { score, .. } if !(0.0..=1.0).contains(score) => {
                Err(Error::Protocol(format!("candidate score {score} outside [0, 1]")))
            }
            Self::FeedbackAnnotation { class_name, boxes, .. } => {
                if class_name.trim().is_empty() {
                    return Err(Error::Protocol("annotation without class name".into()));
                }
                if boxes.is_empty() {
                    return Err(Error::Protocol("annotation without boxes".into()));
                }
                for b in boxes {
                    b.validate().map_err(|e| Error::Protocol(e.to_string()))?;
                }
                Ok(())
            }
            Self::ParamUpdate(delta) => delta.validate(),
            _ => Ok(()),
        }
    }

    fn split(&self) -> (Header, Vec<u8>) {
        match self {
            Self::Hello {
                node,
                mission_id,
                head_version,
            } => (
                Header::Hello {
                    node: node.clone(),
                    mission_id: mission_id.clone(),
                    head_version: *head_version,
                    blob_len: 0,
                },
                Vec::new(),
            ),
            Self::Candidate {
                frame_id,
                score,
                t_ms,
                image,
            } => (
                Header::Candidate {
                    frame_id: *frame_id,
                    score: *score,
                    t_ms: *t_ms,
                    blob_len: image.len(),
                },
                image.clone(),
            ),
            Self::FeedbackUninteresting { frame_id } => (
                Header::FeedbackUninteresting {
                    frame_id: *frame_id,
                    blob_len: 0,
                },
                Vec::new(),
            ),
            Self::FeedbackAnnotation {
                frame_id,
                class_name,
                boxes,
            } => (
                Header::FeedbackAnnotation {
                    frame_id: *frame_id,
                    class_name: class_name.clone(),
                    boxes: boxes.clone(),
                    blob_len: 0,
                },
                Vec::new(),
            ),
            Self::ParamUpdate(delta) => (Header::ParamUpdate(delta.header()), delta.blob_bytes()),
            Self::Ack {
                acked,
                frame_id,
                version,
            } => (
                Header::Ack {
                    acked: *acked,
                    frame_id: *frame_id,
                    version: *version,
                    blob_len: 0,
                },
                Vec::new(),
            ),
        }
    }

    fn join(header: Header, blob: &[u8]) -> Result<Self> {
        let expect_empty = |n: usize| {
            if n != 0 || !blob.is_empty() {
                Err(Error::Protocol(format!("unexpected {}-byte blob", blob.len())))
            } else {
                Ok(())
            }
        };
        let msg = match header {
            Header::Hello {
                node,
                mission_id,
                head_version,
                blob_len,
            } => {
                expect_empty(blob_len)?;
                Self::Hello {
                    node,
                    mission_id,
                    head_version,
                }
            }
            Header::Candidate {
                frame_id, score, t_ms, ..
            } => Self::Candidate {
                frame_id,
                score,
                t_ms,
                image: blob.to_vec(),
            },
            Header::FeedbackUninteresting { frame_id, blob_len } => {
                expect_empty(blob_len)?;
                Self::FeedbackUninteresting { frame_id }
            }
            Header::FeedbackAnnotation {
                frame_id,
                class_name,
                boxes,
                blob_len,
            } => {
                expect_empty(blob_len)?;
                Self::FeedbackAnnotation {
                    frame_id,
                    class_name,
                    boxes,
                }
            }
            Header::ParamUpdate(h) => {
                Self::ParamUpdate(ParamDelta::from_parts(h, blob).map_err(|e| Error::Protocol(e.to_string()))?)
            }
            Header::Ack {
                acked,
                frame_id,
                version,
                blob_len,
            } => {
                expect_empty(blob_len)?;
                Self::Ack {
                    acked,
                    frame_id,
                    version,
                }
            }
        };
        msg.validate()?;
        Ok(msg)
    }
}

pub fn encode(msg: &Message) -> Result<Vec<u8>> {
    msg.validate()?;
    let (header, blob) = msg.split();
    let header = serde_json::to_vec(&header)?;
    let body_len = header.len() + blob.len();
    if body_len > MAX_FRAME_LEN {
        return Err(Error::Framing(format!("frame of {body_len} bytes exceeds limit")));
    }
    let mut out = Vec::with_capacity(4 + body_len);
    out.extend_from_slice(&(body_len as u32).to_be_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&blob);
    Ok(out)
}

/// Decodes exactly one frame; trailing bytes are an error.
pub fn decode(bytes: &[u8]) -> Result<Message> {
    match frame_len(bytes)? {
        Some(n) if n == bytes.len() => decode_body(&bytes[4..]),
        Some(n) if n < bytes.len() => Err(Error::Framing(format!(
            "{} trailing bytes after frame",
            bytes.len() - n
        ))),
        Some(n) => Err(Error::Framing(format!(
            "frame declares {} bytes, only {} received",
            n - 4,
            bytes.len() - 4
        ))),
        None => Err(Error::Framing("truncated length prefix".into())),
    }
}

/// Total frame size including the prefix, if the prefix is complete.
fn frame_len(bytes: &[u8]) -> Result<Option<usize>> {
    let Some(prefix) = bytes.get(..4) else {
        return Ok(None);
    };
    let body = u32::from_be_bytes([prefix[0], prefix[1], prefix[2], prefix[3]]) as usize;
    if body > MAX_FRAME_LEN {
        return Err(Error::Framing(format!("frame of {body} bytes exceeds limit")));
    }
    Ok(Some(4 + body))
}

fn decode_body(body: &[u8]) -> Result<Message> {
    let mut stream = serde_json::Deserializer::from_slice(body).into_iter::<serde_json::Value>();
    let value = match stream.next() {
        Some(Ok(v)) => v,
        Some(Err(e)) => return Err(Error::Framing(format!("bad frame header: {e}"))),
        None => return Err(Error::Framing("empty frame header".into())),
    };
    let blob = &body[stream.byte_offset()..];
    let kind = value
        .get("kind")
        .and_then(|k| k.as_str())
        .ok_or_else(|| Error::Protocol("frame header has no kind".into()))?;
    if MessageKind::parse(kind).is_none() {
        return Err(Error::Protocol(format!("unknown message kind {kind:?}")));
    }
    let declared = value
        .get("blob_len")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Protocol("frame header has no blob_len".into()))?;
    if declared as usize != blob.len() {
        return Err(Error::Framing(format!(
            "header declares {declared} blob bytes, frame carries {}",
            blob.len()
        )));
    }
    let header: Header = serde_json::from_value(value).map_err(|e| Error::Protocol(e.to_string()))?;
    Message::join(header, blob)
}

/// Incremental decoder for a byte stream carrying consecutive frames.
#[derive(Debug, Default)]
pub struct FrameDecoder {
    buf: Vec<u8>,
}

impl FrameDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    pub fn buffered(&self) -> usize {
        self.buf.len()
    }

    /// Next complete frame. A frame that fails to decode is consumed and its
    /// error returned, so callers can log it and keep reading. An oversized
    /// length prefix poisons the stream and is reported on every call.
    pub fn next_message(&mut self) -> Option<Result<Message>> {
        let n = match frame_len(&self.buf) {
            Ok(Some(n)) if n <= self.buf.len() => n,
            Ok(_) => return None,
            Err(e) => return Some(Err(e)),
        };
        let frame: Vec<u8> = self.buf.drain(..n).collect();
        Some(decode_body(&frame[4..]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::head::HeadParams;

    pub(crate) fn samples() -> Vec<Message> {
        let head = HeadParams::init(&[("rock".into(), vec![vec![1.0, 0.0, 0.5]])], 3, 20.0, 4).unwrap();
        vec![
            Message::Hello {
                node: "robot".into(),
                mission_id: "m".into(),
                head_version: 3,
            },
            Message::Candidate {
                frame_id: 7,
                score: 0.812_345_678_901_234_5,
                t_ms: 700,
                image: vec![1, 2, 3, 255],
            },
            Message::FeedbackUninteresting { frame_id: 9 },
            Message::FeedbackAnnotation {
                frame_id: 9,
                class_name: "door".into(),
                boxes: vec![BBox::new(1.0, 2.0, 3.5, 4.25).unwrap()],
            },
            Message::ParamUpdate(head.snapshot_delta()),
            Message::Ack {
                acked: MessageKind::ParamUpdate,
                frame_id: None,
                version: Some(2),
            },
        ]
    }

    #[test]
    fn every_kind_round_trips() {
        for m in samples() {
            let bytes = encode(&m).unwrap();
            assert_eq!(decode(&bytes).unwrap(), m);
        }
    }

    #[test]
    fn layout_is_length_header_blob() {
        let m = Message::Candidate {
            frame_id: 1,
            score: 0.5,
            t_ms: 0,
            image: vec![9, 9],
        };
        let bytes = encode(&m).unwrap();
        let body = u32::from_be_bytes(bytes[..4].try_into().unwrap()) as usize;
        assert_eq!(body + 4, bytes.len());
        assert_eq!(&bytes[bytes.len() - 2..], &[9, 9]);
        let header: serde_json::Value = serde_json::from_slice(&bytes[4..bytes.len() - 2]).unwrap();
        assert_eq!(header["kind"], "CANDIDATE");
        assert_eq!(header["blob_len"], 2);
    }

    #[test]
    fn empty_blob_is_valid() {
        let m = Message::Candidate {
            frame_id: 1,
            score: 0.0,
            t_ms: 0,
            image: vec![],
        };
        assert_eq!(decode(&encode(&m).unwrap()).unwrap(), m);
    }

    #[test]
    fn truncated_frame_is_framing_error() {
        let bytes = encode(&samples()[1]).unwrap();
        for cut in [0, 3, 4, bytes.len() - 1] {
            assert!(matches!(decode(&bytes[..cut]), Err(Error::Framing(_))), "cut {cut}");
        }
    }

    #[test]
    fn unknown_kind_is_protocol_error() {
        let header = br#"{"kind":"TELEPORT","blob_len":0}"#;
        let mut bytes = (header.len() as u32).to_be_bytes().to_vec();
        bytes.extend_from_slice(header);
        assert!(matches!(decode(&bytes), Err(Error::Protocol(_))));
    }

    #[test]
    fn invalid_messages_rejected_on_encode() {
        let bad_score = Message::Candidate {
            frame_id: 1,
            score: 1.5,
            t_ms: 0,
            image: vec![],
        };
        assert!(encode(&bad_score).is_err());
        let no_boxes = Message::FeedbackAnnotation {
            frame_id: 1,
            class_name: "x".into(),
            boxes: vec![],
        };
        assert!(encode(&no_boxes).is_err());
    }

    #[test]
    fn stream_decoder_skips_bad_frame() {
        let mut stream = Vec::new();
        stream.extend(encode(&samples()[0]).unwrap());
        let header = br#"{"kind":"TELEPORT","blob_len":0}"#;
        stream.extend((header.len() as u32).to_be_bytes());
        stream.extend_from_slice(header);
        stream.extend(encode(&samples()[2]).unwrap());

        let mut dec = FrameDecoder::new();
        let mut out = Vec::new();
        // feed one byte at a time
        for b in stream {
            dec.push(&[b]);
            while let Some(r) = dec.next_message() {
                out.push(r);
            }
        }
        assert_eq!(out.len(), 3);
        assert_eq!(out[0].as_ref().unwrap(), &samples()[0]);
        assert!(matches!(out[1], Err(Error::Protocol(_))));
        assert_eq!(out[2].as_ref().unwrap(), &samples()[2]);
        assert_eq!(dec.buffered(), 0);
    }
}

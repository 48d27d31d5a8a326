//! Length-prefixed binary framing for client/server messages, and an
//! in-process duplex link that carries them.
//!
//! Frame: `u32` body length (LE), then the body: message type byte, `u64`
//! round (LE), `u64` client id (LE), serialized [`NamedParams`] payload.

use std::sync::mpsc::{channel, Receiver, Sender};

use super::FedError;
use crate::params::NamedParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum MessageKind {
    /// Server -> client: global model for the round.
    Dispatch = 1,
    /// Client -> server: trained online network.
    Upload = 2,
}

impl TryFrom<u8> for MessageKind {
    type Error = FedError;

    fn try_from(b: u8) -> Result<Self, FedError> {
        match b {
            1 => Ok(MessageKind::Dispatch),
            2 => Ok(MessageKind::Upload),
            other => Err(FedError::Wire(format!("unknown message type {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub kind: MessageKind,
    pub round: u64,
    pub client: u64,
    pub params: NamedParams,
}

const BODY_HEADER: usize = 1 + 8 + 8;

impl Message {
    pub fn encode(&self) -> Vec<u8> {
        let payload = self.params.to_bytes();
        let body_len = BODY_HEADER + payload.len();
        let mut out = Vec::with_capacity(4 + body_len);
        out.extend_from_slice(&(body_len as u32).to_le_bytes());
        out.push(self.kind as u8);
        out.extend_from_slice(&self.round.to_le_bytes());
        out.extend_from_slice(&self.client.to_le_bytes());
        out.extend_from_slice(&payload);
        out
    }

    pub fn decode(frame: &[u8]) -> Result<Message, FedError> {
        if frame.len() < 4 + BODY_HEADER {
            return Err(FedError::Wire("frame shorter than header".into()));
        }
        let len = u32::from_le_bytes(frame[..4].try_into().unwrap()) as usize;
        if frame.len() != 4 + len {
            return Err(FedError::Wire(format!("length prefix {len} but {} body bytes", frame.len() - 4)));
        }
        let body = &frame[4..];
        Ok(Message {
            kind: MessageKind::try_from(body[0])?,
            round: u64::from_le_bytes(body[1..9].try_into().unwrap()),
            client: u64::from_le_bytes(body[9..17].try_into().unwrap()),
            params: NamedParams::from_bytes(&body[BODY_HEADER..])?,
        })
    }
}

/// One end of an in-process duplex link carrying encoded frames.
#[derive(Debug)]
pub struct Endpoint {
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
}

pub fn duplex() -> (Endpoint, Endpoint) {
    let (a_tx, b_rx) = channel();
    let (b_tx, a_rx) = channel();
    (Endpoint { tx: a_tx, rx: a_rx }, Endpoint { tx: b_tx, rx: b_rx })
}

impl Endpoint {
    pub fn send(&self, msg: &Message) -> Result<(), FedError> {
        self.tx
            .send(msg.encode())
            .map_err(|_| FedError::Wire("peer hung up".into()))
    }

    pub fn recv(&self) -> Result<Message, FedError> {
        let frame = self.rx.recv().map_err(|_| FedError::Wire("peer hung up".into()))?;
        Message::decode(&frame)
    }

    /// Receives and checks the message type, round and client id.
    pub fn expect(&self, kind: MessageKind, round: u64, client: u64) -> Result<NamedParams, FedError> {
        let msg = self.recv()?;
        if msg.kind != kind || msg.round != round || msg.client != client {
            return Err(FedError::Wire(format!(
                "expected {kind:?} for client {client} round {round}, got {:?} for client {} round {}",
                msg.kind, msg.client, msg.round
            )));
        }
        Ok(msg.params)
    }
}

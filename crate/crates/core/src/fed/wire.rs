//! Round messages, their binary frames, and the simulated network.
//!
//! Frame layout, all integers little-endian:
//!
//! ```text
//! u32   length of everything after this field
//! [u8;4] b"RMSG"
//! u8    version (1)
//! u8    kind: 0 adapter-update, 1 embedding-batch, 2 global-broadcast,
//!       3 query, 4 logits
//! u8    masked (0 or 1)
//! u8    reserved (0)
//! u32   sender: client id, or 0xFFFF_FFFF for the server
//! u32   round
//! u64   n_k
//! u32   tensor count C
//! C x { u64 pad id (u64::MAX when plaintext), u32 ndim, ndim x u32 dim }
//! body: the values of every tensor in order, row-major f64
//! ```

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::otp::{MaskDistribution, PadLedger};
use crate::partition::{Endpoint, EventKind, MessageKind, TensorState, Trace};
use crate::tensor::{Rng, Tensor};

const MAGIC: &[u8; 4] = b"RMSG";
const VERSION: u8 = 1;
const SERVER_ID: u32 = u32::MAX;
const NO_PAD: u64 = u64::MAX;

/// A tensor on the wire; `pad_id` names the pad it is masked by.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireTensor {
    pub pad_id: Option<u64>,
    pub value: Tensor,
}

impl WireTensor {
    pub fn plain(value: Tensor) -> Self {
        Self {
            pad_id: None,
            value,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMessage {
    pub sender: Endpoint,
    pub round: u32,
    pub kind: MessageKind,
    /// Sample count backing the payload; the aggregation weight.
    pub n_k: u64,
    pub payload: Vec<WireTensor>,
}

impl RoundMessage {
    /// True iff every payload tensor is masked. An empty payload is plain.
    pub fn masked(&self) -> bool {
        !self.payload.is_empty() && self.payload.iter().all(|t| t.pad_id.is_some())
    }

    pub fn values(&self) -> u64 {
        self.payload.iter().map(|t| t.value.len() as u64).sum()
    }
}

fn kind_code(k: MessageKind) -> u8 {
    match k {
        MessageKind::AdapterUpdate => 0,
        MessageKind::EmbeddingBatch => 1,
        MessageKind::GlobalBroadcast => 2,
        MessageKind::Query => 3,
        MessageKind::Logits => 4,
    }
}

fn kind_from(c: u8) -> Result<MessageKind> {
    Ok(match c {
        0 => MessageKind::AdapterUpdate,
        1 => MessageKind::EmbeddingBatch,
        2 => MessageKind::GlobalBroadcast,
        3 => MessageKind::Query,
        4 => MessageKind::Logits,
        _ => return Err(Error::Format(format!("unknown message kind {c}"))),
    })
}

fn endpoint_code(e: Endpoint) -> Result<u32> {
    match e {
        Endpoint::Server => Ok(SERVER_ID),
        Endpoint::Client(SERVER_ID) => {
            Err(Error::Protocol("client id collides with server".into()))
        }
        Endpoint::Client(k) => Ok(k),
    }
}

pub fn encode_frame(msg: &RoundMessage) -> Result<Vec<u8>> {
    let mixed = msg.payload.iter().any(|t| t.pad_id.is_some()) && !msg.masked();
    if mixed {
        return Err(Error::Protocol(
            "payload mixes masked and plain tensors".into(),
        ));
    }
    let mut b = Vec::with_capacity(32 + 8 * msg.values() as usize);
    b.extend_from_slice(&[0; 4]);
    b.extend_from_slice(MAGIC);
    b.extend_from_slice(&[VERSION, kind_code(msg.kind), u8::from(msg.masked()), 0]);
    b.extend_from_slice(&endpoint_code(msg.sender)?.to_le_bytes());
    b.extend_from_slice(&msg.round.to_le_bytes());
    b.extend_from_slice(&msg.n_k.to_le_bytes());
    b.extend_from_slice(&(msg.payload.len() as u32).to_le_bytes());
    for t in &msg.payload {
        let pad = t.pad_id.unwrap_or(NO_PAD);
        if t.pad_id == Some(NO_PAD) {
            return Err(Error::Protocol(
                "pad id collides with the plaintext marker".into(),
            ));
        }
        b.extend_from_slice(&pad.to_le_bytes());
        b.extend_from_slice(&(t.value.shape().len() as u32).to_le_bytes());
        for &d in t.value.shape() {
            b.extend_from_slice(&(d as u32).to_le_bytes());
        }
    }
    for t in &msg.payload {
        for v in t.value.data() {
            b.extend_from_slice(&v.to_le_bytes());
        }
    }
    let len = (b.len() - 4) as u32;
    b[..4].copy_from_slice(&len.to_le_bytes());
    Ok(b)
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(Error::Format("frame truncated".into()));
        };
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

/// Decodes exactly one frame; trailing bytes are an error.
pub fn decode_frame(buf: &[u8]) -> Result<RoundMessage> {
    let mut r = Reader { buf, at: 0 };
    let len = r.u32()? as usize;
    if len != buf.len() - 4 {
        return Err(Error::Format(format!(
            "frame declares {len} bytes, {} present",
            buf.len() - 4
        )));
    }
    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad frame magic".into()));
    }
    let version = r.u8()?;
    if version != VERSION {
        return Err(Error::Format(format!("frame version {version}")));
    }
    let kind = kind_from(r.u8()?)?;
    let masked = match r.u8()? {
        0 => false,
        1 => true,
        m => return Err(Error::Format(format!("masked flag {m}"))),
    };
    if r.u8()? != 0 {
        return Err(Error::Format("reserved byte set".into()));
    }
    let sender = match r.u32()? {
        SERVER_ID => Endpoint::Server,
        k => Endpoint::Client(k),
    };
    let round = r.u32()?;
    let n_k = r.u64()?;
    let count = r.u32()? as usize;
    let mut heads = Vec::new();
    for _ in 0..count {
        let pad = r.u64()?;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::new();
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        heads.push(((pad != NO_PAD).then_some(pad), shape));
    }
    let mut payload = Vec::with_capacity(count);
    for (pad_id, shape) in heads {
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Format("shape overflows".into()))?;
        let bytes = r.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Format("shape overflows".into()))?,
        )?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        payload.push(WireTensor {
            pad_id,
            value: Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))?,
        });
    }
    if r.at != buf.len() {
        return Err(Error::Format("trailing bytes after frame body".into()));
    }
    let msg = RoundMessage {
        sender,
        round,
        kind,
        n_k,
        payload,
    };
    let consistent = if masked {
        msg.masked()
    } else {
        msg.payload.iter().all(|t| t.pad_id.is_none())
    };
    if !consistent {
        return Err(Error::Format("masked flag disagrees with pad ids".into()));
    }
    Ok(msg)
}

/// One direction of a pre-shared pad stream. Sender and receiver build
/// identical links; the sender's ledger is the one audited.
#[derive(Debug, Clone)]
pub struct WireLink {
    name: String,
    rng: Rng,
    dist: MaskDistribution,
    ledger: PadLedger,
}

impl WireLink {
    pub fn new(name: impl Into<String>, prefix: u16, pads: Rng, dist: MaskDistribution) -> Self {
        Self {
            name: name.into(),
            rng: pads,
            dist,
            ledger: PadLedger::new(prefix),
        }
    }

    /// Masks each tensor with the next pad of the stream.
    pub fn seal(&mut self, values: &[Tensor]) -> Result<Vec<WireTensor>> {
        values
            .iter()
            .map(|v| {
                let mut pad = self
                    .ledger
                    .issue(&self.name, v.shape(), &mut self.rng, self.dist)?;
                let m = self.ledger.mask(v, &mut pad)?;
                Ok(WireTensor {
                    pad_id: Some(m.pad_id),
                    value: m.payload,
                })
            })
            .collect()
    }

    /// Regenerates the sender's pads in order and removes them.
    pub fn open(&mut self, payload: &[WireTensor]) -> Result<Vec<Tensor>> {
        payload
            .iter()
            .map(|t| {
                let Some(id) = t.pad_id else {
                    return Err(Error::Protocol(format!(
                        "plain tensor on masked link {}",
                        self.name
                    )));
                };
                let pad =
                    self.ledger
                        .issue(&self.name, t.value.shape(), &mut self.rng, self.dist)?;
                if pad.id != id {
                    return Err(Error::Protocol(format!(
                        "link {} expected pad {:#x}, got {id:#x}",
                        self.name, pad.id
                    )));
                }
                t.value.sub(&pad.values)
            })
            .collect()
    }

    pub fn ledger(&self) -> &PadLedger {
        &self.ledger
    }

    pub fn into_ledger(self) -> PadLedger {
        self.ledger
    }
}

/// A delivered frame, as logged by the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireRecord {
    pub from: Endpoint,
    pub to: Endpoint,
    pub kind: MessageKind,
    pub round: u32,
    pub masked: bool,
    pub bytes: u64,
}

/// Reliable in-memory transport with per-sender FIFO order. Every frame is
/// encoded on send and decoded on receive, and recorded on the trace.
#[derive(Debug, Default)]
pub struct SimNetwork {
    queues: BTreeMap<(Endpoint, Endpoint), VecDeque<Vec<u8>>>,
    trace: Trace,
    log: Vec<WireRecord>,
}

impl SimNetwork {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn send(&mut self, to: Endpoint, msg: &RoundMessage) -> Result<()> {
        let frame = encode_frame(msg)?;
        let state = if msg.masked() {
            TensorState::Masked
        } else {
            TensorState::Plaintext
        };
        self.trace.record(
            EventKind::Wire {
                kind: msg.kind,
                from: msg.sender,
                to,
                state,
            },
            msg.values(),
            0,
        );
        self.log.push(WireRecord {
            from: msg.sender,
            to,
            kind: msg.kind,
            round: msg.round,
            masked: msg.masked(),
            bytes: frame.len() as u64,
        });
        self.queues
            .entry((msg.sender, to))
            .or_default()
            .push_back(frame);
        Ok(())
    }

    /// Next frame from `from` to `to`, or a protocol error if none is queued.
    pub fn recv(&mut self, from: Endpoint, to: Endpoint) -> Result<RoundMessage> {
        let frame = self
            .queues
            .get_mut(&(from, to))
            .and_then(VecDeque::pop_front)
            .ok_or_else(|| Error::Protocol(format!("no message from {from:?} to {to:?}")))?;
        let msg = decode_frame(&frame)?;
        if msg.sender != from {
            return Err(Error::Protocol(
                "sender field disagrees with the link".into(),
            ));
        }
        Ok(msg)
    }

    /// Frames sent but not yet received.
    pub fn pending(&self) -> usize {
        self.queues.values().map(VecDeque::len).sum()
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    pub fn log(&self) -> &[WireRecord] {
        &self.log
    }

    pub fn into_parts(self) -> (Trace, Vec<WireRecord>) {
        (self.trace, self.log)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;
    use proptest::prelude::{any, prop, prop_assert_eq, proptest, Strategy};

    fn msg(masked: bool) -> RoundMessage {
        let pad = |i: u64| masked.then_some(i);
        RoundMessage {
            sender: Endpoint::Client(2),
            round: 7,
            kind: MessageKind::AdapterUpdate,
            n_k: 64,
            payload: vec![
                WireTensor {
                    pad_id: pad(1),
                    value: Tensor::matrix(&[&[1.5, -2.0], &[0.0, 3.25]]),
                },
                WireTensor {
                    pad_id: pad(2),
                    value: Tensor::vector(vec![f64::MIN_POSITIVE, -0.0, 1e300]),
                },
            ],
        }
    }

    #[test]
    fn header_layout_is_fixed() {
        let b = encode_frame(&msg(true)).unwrap();
        assert_eq!(
            u32::from_le_bytes(b[0..4].try_into().unwrap()) as usize,
            b.len() - 4
        );
        assert_eq!(&b[4..8], b"RMSG");
        assert_eq!(&b[8..12], &[1, 0, 1, 0]);
        assert_eq!(u32::from_le_bytes(b[12..16].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(b[16..20].try_into().unwrap()), 7);
        assert_eq!(u64::from_le_bytes(b[20..28].try_into().unwrap()), 64);
        assert_eq!(u32::from_le_bytes(b[28..32].try_into().unwrap()), 2);
        // shape table: (8 + 4 + 2*4) + (8 + 4 + 4), then 7 values
        assert_eq!(b.len(), 32 + 20 + 16 + 7 * 8);
        assert_eq!(u64::from_le_bytes(b[32..40].try_into().unwrap()), 1);
        let body = 32 + 36;
        assert_eq!(
            f64::from_le_bytes(b[body..body + 8].try_into().unwrap()),
            1.5
        );
    }

    #[test]
    fn plain_frames_mark_pads_absent() {
        let b = encode_frame(&msg(false)).unwrap();
        assert_eq!(b[10], 0);
        assert_eq!(u64::from_le_bytes(b[32..40].try_into().unwrap()), u64::MAX);
        assert_eq!(decode_frame(&b).unwrap(), msg(false));
    }

    #[test]
    fn corrupt_frames_are_rejected() {
        let good = encode_frame(&msg(true)).unwrap();
        assert!(decode_frame(&good[..good.len() - 1]).is_err());
        let mut extra = good.clone();
        extra.push(0);
        assert!(decode_frame(&extra).is_err());
        let mut bad = good.clone();
        bad[4] = b'X';
        assert!(decode_frame(&bad).is_err());
        let mut bad = good.clone();
        bad[9] = 9;
        assert!(decode_frame(&bad).is_err());
        let mut bad = good;
        bad[10] = 0;
        assert!(matches!(decode_frame(&bad), Err(Error::Format(_))));
    }

    #[test]
    fn mixed_payload_is_refused() {
        let mut m = msg(true);
        m.payload[1].pad_id = None;
        assert!(matches!(encode_frame(&m), Err(Error::Protocol(_))));
    }

    #[test]
    fn links_mirror_each_other() {
        let dist = MaskDistribution::Uniform { scale: 1.0 };
        let mut tx = WireLink::new("up", 0x1000, Rng::new(3, 1000), dist);
        let mut rx = WireLink::new("up", 0x1000, Rng::new(3, 1000), dist);
        let x = vec![Tensor::vector(vec![0.25, -4.0]), Tensor::scalar(9.0)];
        for _ in 0..3 {
            let sealed = tx.seal(&x).unwrap();
            assert_ne!(sealed[0].value, x[0]);
            let back = rx.open(&sealed).unwrap();
            for (a, b) in back.iter().zip(&x) {
                assert!(crate::tensor::max_abs_diff(a, b) < 1e-14);
            }
        }
        assert_eq!(tx.ledger().summary().used_once, 6);
        let mut wrong = WireLink::new("up", 0x1001, Rng::new(3, 1000), dist);
        assert!(matches!(
            wrong.open(&tx.seal(&x).unwrap()),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn network_is_fifo_per_sender() {
        let mut net = SimNetwork::new();
        let mut a = msg(false);
        net.send(Endpoint::Server, &a).unwrap();
        a.round = 8;
        net.send(Endpoint::Server, &a).unwrap();
        let from = Endpoint::Client(2);
        assert_eq!(net.recv(from, Endpoint::Server).unwrap().round, 7);
        assert_eq!(net.recv(from, Endpoint::Server).unwrap().round, 8);
        assert!(matches!(
            net.recv(from, Endpoint::Server),
            Err(Error::Protocol(_))
        ));
        assert_eq!(net.trace().violation_count(), 2);
        assert_eq!(net.log().len(), 2);
    }

    fn arb_msg() -> impl Strategy<Value = RoundMessage> {
        let tensor = prop::collection::vec(1usize..4, 0..3).prop_flat_map(|shape| {
            let n = shape.iter().product::<usize>();
            prop::collection::vec(any::<f64>().prop_filter("nan", |v| !v.is_nan()), n)
                .prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
        });
        (
            prop::option::of(0u32..1000),
            any::<u32>(),
            0u8..5,
            any::<u64>(),
            any::<bool>(),
            prop::collection::vec((tensor, 0u64..u64::MAX), 0..4),
        )
            .prop_map(|(sender, round, kind, n_k, masked, ts)| RoundMessage {
                sender: sender.map_or(Endpoint::Server, Endpoint::Client),
                round,
                kind: kind_from(kind).unwrap(),
                n_k,
                payload: ts
                    .into_iter()
                    .map(|(value, id)| WireTensor {
                        pad_id: masked.then_some(id),
                        value,
                    })
                    .collect(),
            })
    }

    proptest! {
        #[test]
        fn frames_decode_to_what_was_encoded(m in arb_msg()) {
            let b = encode_frame(&m).unwrap();
            prop_assert_eq!(decode_frame(&b).unwrap(), m);
        }
    }
}

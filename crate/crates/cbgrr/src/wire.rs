//! Frame codec.
//!
//! Every frame starts with a fixed four-byte header, all multi-byte integers
//! are big-endian, and there is no padding:
//!
//! ```text
//! offset  size  field
//! 0       2     magic 0xCB 0x6E
//! 2       1     version, 0x01
//! 3       1     message type (1..=8)
//! 4       ...   type-specific body
//! ```
//!
//! Bodies:
//!
//! ```text
//! AREQ  (1): pid u8, seqno u32, rmask u64, len u16, payload
//! ARPL  (2): pid u8, seqno u32, len u16, payload
//! JPOLL (3): pid u8
//! JOIN  (4): pid u8
//! LPOLL (5): pid u8
//! LEFT  (6): pid u8
//! VPUSH (7): pid u8, rmask u64, count u8, count x (pid u8, ticket u32, flags u8)
//! VACK  (8): pid u8
//! ```
//!
//! A view-entry `flags` byte uses bit 0 for `is_new`; other bits must be
//! zero. Payloads are capped at 1024 bytes and views at 64 entries, which
//! bounds every frame well under a 1500-byte MTU. Decoding never panics:
//! every violation is a [`CodecError`].

use crate::protocol::{
    Message, MessageKind, ProcessId, ReplyMask, Ticket, ViewEntry, MAX_GROUP_SIZE, MAX_PAYLOAD,
};

pub const MAGIC: [u8; 2] = [0xCB, 0x6E];
pub const VERSION: u8 = 0x01;
/// Fixed header length: magic, version, message type.
pub const HEADER_LEN: usize = 4;
/// Largest possible frame: an AREQ carrying a full payload.
pub const MAX_FRAME: usize = HEADER_LEN + 1 + 4 + 8 + 2 + MAX_PAYLOAD;

#[derive(Clone, PartialEq, Eq, Debug, thiserror::Error)]
pub enum CodecError {
    #[error("frame truncated: need {need} bytes at offset {at}, have {have}")]
    Truncated { at: usize, need: usize, have: usize },
    #[error("bad magic {0:02x}{1:02x}")]
    BadMagic(u8, u8),
    #[error("unsupported version {0:#04x}")]
    BadVersion(u8),
    #[error("unknown message type {0}")]
    UnknownType(u8),
    #[error("process id {0} out of range")]
    BadProcessId(u8),
    #[error("ticket must be positive")]
    BadTicket,
    #[error("payload length {0} exceeds {MAX_PAYLOAD}")]
    PayloadTooLong(usize),
    #[error("view of {0} entries exceeds {MAX_GROUP_SIZE}")]
    ViewTooLarge(usize),
    #[error("reserved flag bits set: {0:#04x}")]
    BadFlags(u8),
    #[error("{0} trailing bytes after frame")]
    TrailingBytes(usize),
}

/// Encoded size of a message, without building the frame.
pub fn encoded_len(msg: &Message) -> usize {
    HEADER_LEN
        + match msg {
            Message::Areq { data, .. } => 1 + 4 + 8 + 2 + data.len(),
            Message::Arpl { data, .. } => 1 + 4 + 2 + data.len(),
            Message::Jpoll { .. }
            | Message::Join { .. }
            | Message::Lpoll { .. }
            | Message::Left { .. }
            | Message::Vack { .. } => 1,
            Message::Vpush { view, .. } => 1 + 8 + 1 + view.len() * 6,
        }
}

pub fn encode(msg: &Message) -> Result<Vec<u8>, CodecError> {
    let mut out = Vec::with_capacity(encoded_len(msg));
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(msg.kind().code());
    match msg {
        Message::Areq { pid, seqno, rmask, data } => {
            check_payload(data)?;
            out.push(pid.get());
            out.extend_from_slice(&seqno.to_be_bytes());
            out.extend_from_slice(&rmask.bits().to_be_bytes());
            out.extend_from_slice(&(data.len() as u16).to_be_bytes());
            out.extend_from_slice(data);
        }
        Message::Arpl { pid, seqno, data } => {
            check_payload(data)?;
            out.push(pid.get());
            out.extend_from_slice(&seqno.to_be_bytes());
            out.extend_from_slice(&(data.len() as u16).to_be_bytes());
            out.extend_from_slice(data);
        }
        Message::Jpoll { pid }
        | Message::Join { pid }
        | Message::Lpoll { pid }
        | Message::Left { pid }
        | Message::Vack { pid } => {
            out.push(pid.get());
        }
        Message::Vpush { pid, rmask, view } => {
            if view.len() > MAX_GROUP_SIZE {
                return Err(CodecError::ViewTooLarge(view.len()));
            }
            out.push(pid.get());
            out.extend_from_slice(&rmask.bits().to_be_bytes());
            out.push(view.len() as u8);
            for e in view {
                out.push(e.pid.get());
                out.extend_from_slice(&e.ticket.get().to_be_bytes());
                out.push(u8::from(e.is_new));
            }
        }
    }
    Ok(out)
}

fn check_payload(data: &[u8]) -> Result<(), CodecError> {
    if data.len() > MAX_PAYLOAD {
        return Err(CodecError::PayloadTooLong(data.len()));
    }
    Ok(())
}

pub fn decode(buf: &[u8]) -> Result<Message, CodecError> {
    let mut r = Reader { buf, at: 0 };
    let magic0 = r.u8()?;
    let magic1 = r.u8()?;
    if [magic0, magic1] != MAGIC {
        return Err(CodecError::BadMagic(magic0, magic1));
    }
    let version = r.u8()?;
    if version != VERSION {
        return Err(CodecError::BadVersion(version));
    }
    let type_code = r.u8()?;
    let kind = MessageKind::from_code(type_code).ok_or(CodecError::UnknownType(type_code))?;
    let msg = match kind {
        MessageKind::Areq => {
            let pid = r.pid()?;
            let seqno = r.u32()?;
            let rmask = ReplyMask::from_bits(r.u64()?);
            let data = r.payload()?;
            Message::Areq { pid, seqno, rmask, data }
        }
        MessageKind::Arpl => {
            let pid = r.pid()?;
            let seqno = r.u32()?;
            let data = r.payload()?;
            Message::Arpl { pid, seqno, data }
        }
        MessageKind::Jpoll => Message::Jpoll { pid: r.pid()? },
        MessageKind::Join => Message::Join { pid: r.pid()? },
        MessageKind::Lpoll => Message::Lpoll { pid: r.pid()? },
        MessageKind::Left => Message::Left { pid: r.pid()? },
        MessageKind::Vpush => {
            let pid = r.pid()?;
            let rmask = ReplyMask::from_bits(r.u64()?);
            let count = r.u8()? as usize;
            if count > MAX_GROUP_SIZE {
                return Err(CodecError::ViewTooLarge(count));
            }
            let mut view = Vec::with_capacity(count);
            for _ in 0..count {
                let pid = r.pid()?;
                let ticket = Ticket::new(r.u32()?).map_err(|_| CodecError::BadTicket)?;
                let flags = r.u8()?;
                if flags & !0x01 != 0 {
                    return Err(CodecError::BadFlags(flags));
                }
                view.push(ViewEntry { pid, ticket, is_new: flags & 0x01 != 0 });
            }
            Message::Vpush { pid, rmask, view }
        }
        MessageKind::Vack => Message::Vack { pid: r.pid()? },
    };
    if r.at != buf.len() {
        return Err(CodecError::TrailingBytes(buf.len() - r.at));
    }
    Ok(msg)
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        let end = self.at.checked_add(n).ok_or(CodecError::Truncated {
            at: self.at,
            need: n,
            have: self.buf.len().saturating_sub(self.at),
        })?;
        if end > self.buf.len() {
            return Err(CodecError::Truncated {
                at: self.at,
                need: n,
                have: self.buf.len() - self.at,
            });
        }
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CodecError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CodecError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CodecError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn pid(&mut self) -> Result<ProcessId, CodecError> {
        let v = self.u8()?;
        ProcessId::new(v).map_err(|_| CodecError::BadProcessId(v))
    }

    /// u16 length prefix, bounded by `MAX_PAYLOAD` before any allocation.
    fn payload(&mut self) -> Result<Vec<u8>, CodecError> {
        let len = u16::from_be_bytes(self.take(2)?.try_into().expect("2 bytes")) as usize;
        if len > MAX_PAYLOAD {
            return Err(CodecError::PayloadTooLong(len));
        }
        Ok(self.take(len)?.to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::pid;

    fn t(v: u32) -> Ticket {
        Ticket::new(v).unwrap()
    }

    /// Byte-for-byte layout freezes. Interop depends on these never moving.
    #[test]
    fn golden_frames() {
        let areq = Message::Areq {
            pid: pid(1),
            seqno: 5,
            rmask: ReplyMask::from_bits(0b110),
            data: vec![0xAA, 0xBB],
        };
        assert_eq!(
            encode(&areq).unwrap(),
            [
                0xCB, 0x6E, 0x01, 0x01, // header
                0x01, // pid
                0x00, 0x00, 0x00, 0x05, // seqno
                0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x06, // rmask
                0x00, 0x02, // len
                0xAA, 0xBB,
            ]
        );

        let arpl = Message::Arpl { pid: pid(3), seqno: 5, data: vec![] };
        assert_eq!(
            encode(&arpl).unwrap(),
            [0xCB, 0x6E, 0x01, 0x02, 0x03, 0x00, 0x00, 0x00, 0x05, 0x00, 0x00]
        );

        assert_eq!(encode(&Message::Jpoll { pid: pid(2) }).unwrap(), [0xCB, 0x6E, 0x01, 0x03, 0x02]);
        assert_eq!(encode(&Message::Join { pid: pid(9) }).unwrap(), [0xCB, 0x6E, 0x01, 0x04, 0x09]);
        assert_eq!(encode(&Message::Lpoll { pid: pid(1) }).unwrap(), [0xCB, 0x6E, 0x01, 0x05, 0x01]);
        assert_eq!(encode(&Message::Left { pid: pid(4) }).unwrap(), [0xCB, 0x6E, 0x01, 0x06, 0x04]);
        assert_eq!(encode(&Message::Vack { pid: pid(5) }).unwrap(), [0xCB, 0x6E, 0x01, 0x08, 0x05]);

        let vpush = Message::Vpush {
            pid: pid(1),
            rmask: ReplyMask::from_bits(0b10000),
            view: vec![
                ViewEntry { pid: pid(1), ticket: t(1), is_new: false },
                ViewEntry { pid: pid(5), ticket: t(3), is_new: true },
            ],
        };
        assert_eq!(
            encode(&vpush).unwrap(),
            [
                0xCB, 0x6E, 0x01, 0x07, // header
                0x01, // pid
                0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x10, // rmask
                0x02, // count
                0x01, 0x00, 0x00, 0x00, 0x01, 0x00, // entry 1
                0x05, 0x00, 0x00, 0x00, 0x03, 0x01, // entry 5, new
            ]
        );
    }

    #[test]
    fn golden_frames_decode_back() {
        for msg in sample_messages() {
            let bytes = encode(&msg).unwrap();
            assert!(bytes.len() <= MAX_FRAME);
            assert_eq!(bytes.len(), encoded_len(&msg));
            assert_eq!(decode(&bytes).unwrap(), msg);
        }
    }

    fn sample_messages() -> Vec<Message> {
        vec![
            Message::Areq {
                pid: pid(1),
                seqno: u32::MAX,
                rmask: ReplyMask::from_bits(u64::MAX),
                data: vec![0x5A; MAX_PAYLOAD],
            },
            Message::Areq { pid: pid(64), seqno: 0, rmask: ReplyMask::EMPTY, data: vec![] },
            Message::Arpl { pid: pid(12), seqno: 7, data: b"reply".to_vec() },
            Message::Jpoll { pid: pid(1) },
            Message::Join { pid: pid(64) },
            Message::Lpoll { pid: pid(2) },
            Message::Left { pid: pid(33) },
            Message::Vpush {
                pid: pid(2),
                rmask: ReplyMask::from_bits(0b1010),
                view: (1..=64)
                    .map(|i| ViewEntry { pid: pid(i), ticket: t(u32::from(i) * 7), is_new: i % 3 == 0 })
                    .collect(),
            },
            Message::Vack { pid: pid(1) },
        ]
    }

    #[test]
    fn rejects_malformed_frames() {
        assert!(matches!(decode(&[]), Err(CodecError::Truncated { .. })));
        assert!(matches!(decode(&[0xCB]), Err(CodecError::Truncated { .. })));
        assert!(matches!(decode(&[0x00, 0x6E, 0x01, 0x03, 0x01]), Err(CodecError::BadMagic(..))));
        assert!(matches!(decode(&[0xCB, 0x6E, 0x02, 0x03, 0x01]), Err(CodecError::BadVersion(2))));
        assert!(matches!(decode(&[0xCB, 0x6E, 0x01, 0x00, 0x01]), Err(CodecError::UnknownType(0))));
        assert!(matches!(decode(&[0xCB, 0x6E, 0x01, 0x09, 0x01]), Err(CodecError::UnknownType(9))));
        assert!(matches!(decode(&[0xCB, 0x6E, 0x01, 0x03, 0x00]), Err(CodecError::BadProcessId(0))));
        assert!(matches!(decode(&[0xCB, 0x6E, 0x01, 0x03, 0x41]), Err(CodecError::BadProcessId(65))));
        assert!(matches!(
            decode(&[0xCB, 0x6E, 0x01, 0x03, 0x01, 0xFF]),
            Err(CodecError::TrailingBytes(1))
        ));

        // Declared payload length beyond the cap is rejected before any
        // allocation happens.
        let mut huge = vec![0xCB, 0x6E, 0x01, 0x02, 0x01, 0, 0, 0, 1];
        huge.extend_from_slice(&0xFFFFu16.to_be_bytes());
        assert!(matches!(decode(&huge), Err(CodecError::PayloadTooLong(0xFFFF))));

        // Truncated payload.
        let mut short = vec![0xCB, 0x6E, 0x01, 0x02, 0x01, 0, 0, 0, 1];
        short.extend_from_slice(&4u16.to_be_bytes());
        short.push(0xAB);
        assert!(matches!(decode(&short), Err(CodecError::Truncated { .. })));

        // Too many view entries.
        let mut vpush = vec![0xCB, 0x6E, 0x01, 0x07, 0x01];
        vpush.extend_from_slice(&0u64.to_be_bytes());
        vpush.push(65);
        assert!(matches!(decode(&vpush), Err(CodecError::ViewTooLarge(65))));

        // Reserved flag bits.
        let mut vpush = vec![0xCB, 0x6E, 0x01, 0x07, 0x01];
        vpush.extend_from_slice(&0u64.to_be_bytes());
        vpush.push(1);
        vpush.extend_from_slice(&[0x01, 0, 0, 0, 1, 0x02]);
        assert!(matches!(decode(&vpush), Err(CodecError::BadFlags(0x02))));

        // Zero ticket.
        let mut vpush = vec![0xCB, 0x6E, 0x01, 0x07, 0x01];
        vpush.extend_from_slice(&0u64.to_be_bytes());
        vpush.push(1);
        vpush.extend_from_slice(&[0x01, 0, 0, 0, 0, 0x00]);
        assert!(matches!(decode(&vpush), Err(CodecError::BadTicket)));
    }

    #[test]
    fn oversize_payload_refuses_to_encode() {
        let msg = Message::Arpl { pid: pid(1), seqno: 0, data: vec![0; MAX_PAYLOAD + 1] };
        assert!(matches!(encode(&msg), Err(CodecError::PayloadTooLong(_))));
    }
}

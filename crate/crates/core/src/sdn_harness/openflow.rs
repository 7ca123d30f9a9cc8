//! The OpenFlow 1.0 subset spoken on the southbound channel.
//!
//! All multi-byte fields are big-endian. Every message starts with the
//! 8-byte header `version(1) type(1) length(2) xid(4)`, where `length`
//! covers the whole message.

use thiserror::Error;

pub const OFP_VERSION: u8 = 0x01;
pub const OFPT_PACKET_IN: u8 = 10;
pub const OFPT_PACKET_OUT: u8 = 13;
pub const OFPT_FLOW_MOD: u8 = 14;

pub const HEADER_LEN: usize = 8;
pub const PACKET_IN_HEADER_LEN: usize = 18;
pub const PACKET_OUT_HEADER_LEN: usize = 16;
pub const OUTPUT_ACTION_LEN: usize = 8;
pub const OFPAT_OUTPUT: u16 = 0;

pub const OFPP_FLOOD: u16 = 0xfffb;
pub const OFPP_NONE: u16 = 0xffff;
pub const NO_BUFFER: u32 = 0xffff_ffff;
pub const OFPR_NO_MATCH: u8 = 0;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum OpenFlowError {
    #[error("message truncated: {0} bytes")]
    Truncated(usize),
    #[error("unsupported version {0:#04x}")]
    Version(u8),
    #[error("expected message type {expected}, got {got}")]
    Type { expected: u8, got: u8 },
    #[error("length field {field} disagrees with message size {actual}")]
    Length { field: usize, actual: usize },
    #[error("payload of {0} bytes does not fit a message")]
    TooLarge(usize),
    #[error("malformed action list")]
    Action,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub version: u8,
    pub msg_type: u8,
    pub length: u16,
    pub xid: u32,
}

impl Header {
    pub fn parse(buf: &[u8]) -> Result<Header, OpenFlowError> {
        if buf.len() < HEADER_LEN {
            return Err(OpenFlowError::Truncated(buf.len()));
        }
        let h = Header {
            version: buf[0],
            msg_type: buf[1],
            length: u16::from_be_bytes([buf[2], buf[3]]),
            xid: u32::from_be_bytes([buf[4], buf[5], buf[6], buf[7]]),
        };
        if h.version != OFP_VERSION {
            return Err(OpenFlowError::Version(h.version));
        }
        if (h.length as usize) < HEADER_LEN {
            return Err(OpenFlowError::Length {
                field: h.length as usize,
                actual: buf.len(),
            });
        }
        Ok(h)
    }

    fn write(&self, out: &mut Vec<u8>) {
        out.push(self.version);
        out.push(self.msg_type);
        out.extend_from_slice(&self.length.to_be_bytes());
        out.extend_from_slice(&self.xid.to_be_bytes());
    }
}

/// Removes one complete message from the front of `buf`, if present.
pub fn take_message(buf: &mut Vec<u8>) -> Result<Option<Vec<u8>>, OpenFlowError> {
    if buf.len() < HEADER_LEN {
        return Ok(None);
    }
    let len = Header::parse(buf)?.length as usize;
    if buf.len() < len {
        return Ok(None);
    }
    let rest = buf.split_off(len);
    Ok(Some(std::mem::replace(buf, rest)))
}

fn check(buf: &[u8], expected: u8, min: usize) -> Result<Header, OpenFlowError> {
    let h = Header::parse(buf)?;
    if h.msg_type != expected {
        return Err(OpenFlowError::Type {
            expected,
            got: h.msg_type,
        });
    }
    if buf.len() < min {
        return Err(OpenFlowError::Truncated(buf.len()));
    }
    if h.length as usize != buf.len() {
        return Err(OpenFlowError::Length {
            field: h.length as usize,
            actual: buf.len(),
        });
    }
    Ok(h)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PacketIn {
    pub xid: u32,
    pub buffer_id: u32,
    pub total_len: u16,
    pub in_port: u16,
    pub reason: u8,
    pub data: Vec<u8>,
}

impl PacketIn {
    pub fn new(xid: u32, in_port: u16, data: Vec<u8>) -> PacketIn {
        PacketIn {
            xid,
            buffer_id: NO_BUFFER,
            total_len: data.len() as u16,
            in_port,
            reason: OFPR_NO_MATCH,
            data,
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>, OpenFlowError> {
        let len = PACKET_IN_HEADER_LEN + self.data.len();
        if len > u16::MAX as usize {
            return Err(OpenFlowError::TooLarge(self.data.len()));
        }
        let mut out = Vec::with_capacity(len);
        Header {
            version: OFP_VERSION,
            msg_type: OFPT_PACKET_IN,
            length: len as u16,
            xid: self.xid,
        }
        .write(&mut out);
        out.extend_from_slice(&self.buffer_id.to_be_bytes());
        out.extend_from_slice(&self.total_len.to_be_bytes());
        out.extend_from_slice(&self.in_port.to_be_bytes());
        out.push(self.reason);
        out.push(0);
        out.extend_from_slice(&self.data);
        Ok(out)
    }

    pub fn decode(buf: &[u8]) -> Result<PacketIn, OpenFlowError> {
        let h = check(buf, OFPT_PACKET_IN, PACKET_IN_HEADER_LEN)?;
        Ok(PacketIn {
            xid: h.xid,
            buffer_id: u32::from_be_bytes([buf[8], buf[9], buf[10], buf[11]]),
            total_len: u16::from_be_bytes([buf[12], buf[13]]),
            in_port: u16::from_be_bytes([buf[14], buf[15]]),
            reason: buf[16],
            data: buf[PACKET_IN_HEADER_LEN..].to_vec(),
        })
    }
}

/// A Packet-Out carrying exactly one output action.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PacketOut {
    pub xid: u32,
    pub buffer_id: u32,
    pub in_port: u16,
    pub out_port: u16,
    pub data: Vec<u8>,
}

impl PacketOut {
    pub fn is_flood(&self) -> bool {
        self.out_port == OFPP_FLOOD
    }

    pub fn encode(&self) -> Result<Vec<u8>, OpenFlowError> {
        let len = PACKET_OUT_HEADER_LEN + OUTPUT_ACTION_LEN + self.data.len();
        if len > u16::MAX as usize {
            return Err(OpenFlowError::TooLarge(self.data.len()));
        }
        let mut out = Vec::with_capacity(len);
        Header {
            version: OFP_VERSION,
            msg_type: OFPT_PACKET_OUT,
            length: len as u16,
            xid: self.xid,
        }
        .write(&mut out);
        out.extend_from_slice(&self.buffer_id.to_be_bytes());
        out.extend_from_slice(&self.in_port.to_be_bytes());
        out.extend_from_slice(&(OUTPUT_ACTION_LEN as u16).to_be_bytes());
        out.extend_from_slice(&OFPAT_OUTPUT.to_be_bytes());
        out.extend_from_slice(&(OUTPUT_ACTION_LEN as u16).to_be_bytes());
        out.extend_from_slice(&self.out_port.to_be_bytes());
        out.extend_from_slice(&0u16.to_be_bytes());
        out.extend_from_slice(&self.data);
        Ok(out)
    }

    pub fn decode(buf: &[u8]) -> Result<PacketOut, OpenFlowError> {
        let h = check(buf, OFPT_PACKET_OUT, PACKET_OUT_HEADER_LEN)?;
        let actions_len = u16::from_be_bytes([buf[14], buf[15]]) as usize;
        let actions_end = PACKET_OUT_HEADER_LEN + actions_len;
        if actions_len != OUTPUT_ACTION_LEN || buf.len() < actions_end {
            return Err(OpenFlowError::Action);
        }
        let a = &buf[PACKET_OUT_HEADER_LEN..actions_end];
        let (kind, alen) = (u16::from_be_bytes([a[0], a[1]]), u16::from_be_bytes([a[2], a[3]]));
        if kind != OFPAT_OUTPUT || alen as usize != OUTPUT_ACTION_LEN {
            return Err(OpenFlowError::Action);
        }
        Ok(PacketOut {
            xid: h.xid,
            buffer_id: u32::from_be_bytes([buf[8], buf[9], buf[10], buf[11]]),
            in_port: u16::from_be_bytes([buf[12], buf[13]]),
            out_port: u16::from_be_bytes([a[4], a[5]]),
            data: buf[actions_end..].to_vec(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn packet_in_layout() {
        let msg = PacketIn::new(0x01020304, 7, vec![0xaa; 64]).encode().unwrap();
        assert_eq!(msg.len(), 82);
        assert_eq!(
            &msg[..18],
            &[1, 10, 0, 82, 1, 2, 3, 4, 0xff, 0xff, 0xff, 0xff, 0, 64, 0, 7, 0, 0]
        );
        assert_eq!(PacketIn::decode(&msg).unwrap().data, vec![0xaa; 64]);
    }

    #[test]
    fn packet_out_layout() {
        let po = PacketOut {
            xid: 9,
            buffer_id: NO_BUFFER,
            in_port: 1,
            out_port: OFPP_FLOOD,
            data: b"frame".to_vec(),
        };
        let msg = po.encode().unwrap();
        assert_eq!(msg.len(), 16 + 8 + 5);
        assert_eq!(&msg[..8], &[1, 13, 0, 29, 0, 0, 0, 9]);
        assert_eq!(&msg[14..24], &[0, 8, 0, 0, 0, 8, 0xff, 0xfb, 0, 0]);
        assert_eq!(PacketOut::decode(&msg).unwrap(), po);
    }

    #[test]
    fn malformed_messages() {
        let msg = PacketIn::new(1, 1, vec![1; 10]).encode().unwrap();
        assert_eq!(PacketIn::decode(&msg[..17]), Err(OpenFlowError::Truncated(17)));
        assert!(matches!(PacketIn::decode(&msg[..20]), Err(OpenFlowError::Length { .. })));
        let mut v = msg.clone();
        v[0] = 4;
        assert_eq!(PacketIn::decode(&v), Err(OpenFlowError::Version(4)));
        assert!(matches!(PacketOut::decode(&msg), Err(OpenFlowError::Type { .. })));
    }

    #[test]
    fn stream_splitting() {
        let a = PacketIn::new(1, 1, vec![1; 3]).encode().unwrap();
        let b = PacketIn::new(2, 1, vec![2; 5]).encode().unwrap();
        let mut buf = [a.clone(), b.clone()].concat();
        buf.truncate(buf.len() - 1);
        assert_eq!(take_message(&mut buf).unwrap(), Some(a));
        assert_eq!(take_message(&mut buf).unwrap(), None);
        buf.push(2);
        assert_eq!(take_message(&mut buf).unwrap(), Some(b));
        assert!(buf.is_empty());
    }
}

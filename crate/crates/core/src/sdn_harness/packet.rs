//! Ethernet/IPv4/UDP frames with a latency stamp in the UDP payload.

use thiserror::Error;

pub type Mac = [u8; 6];

pub const ETH_HEADER_LEN: usize = 14;
pub const IPV4_HEADER_LEN: usize = 20;
pub const UDP_HEADER_LEN: usize = 8;
pub const HEADERS_LEN: usize = ETH_HEADER_LEN + IPV4_HEADER_LEN + UDP_HEADER_LEN;
/// Sequence number and send timestamp, 8 bytes each.
pub const STAMP_LEN: usize = 16;
pub const MIN_FRAME_LEN: usize = HEADERS_LEN + STAMP_LEN;
pub const MTU: usize = 1500;
pub const BROADCAST: Mac = [0xff; 6];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FrameError {
    #[error("frame of {size} bytes cannot hold the {min}-byte headers and stamp")]
    TooSmall { size: usize, min: usize },
    #[error("frame of {0} bytes exceeds the {MTU}-byte MTU")]
    TooLarge(usize),
    #[error("not an IPv4/UDP frame")]
    NotUdp,
}

pub fn dst_mac(frame: &[u8]) -> Option<Mac> {
    frame.get(0..6)?.try_into().ok()
}

pub fn src_mac(frame: &[u8]) -> Option<Mac> {
    frame.get(6..12)?.try_into().ok()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Endpoint {
    pub mac: Mac,
    pub ip: [u8; 4],
    pub port: u16,
}

fn ipv4_checksum(header: &[u8]) -> u16 {
    let mut sum: u32 = header
        .chunks(2)
        .map(|c| u32::from(u16::from_be_bytes([c[0], *c.get(1).unwrap_or(&0)])))
        .sum();
    while sum > 0xffff {
        sum = (sum & 0xffff) + (sum >> 16);
    }
    !(sum as u16)
}

/// A UDP frame of exactly `size` bytes. The payload starts with the stamp
/// and is filled with a pattern derived from `seq`.
pub fn build_udp_frame(src: &Endpoint, dst: &Endpoint, size: usize, seq: u64, sent_ns: u64) -> Result<Vec<u8>, FrameError> {
    if size < MIN_FRAME_LEN {
        return Err(FrameError::TooSmall {
            size,
            min: MIN_FRAME_LEN,
        });
    }
    if size > MTU {
        return Err(FrameError::TooLarge(size));
    }
    let mut f = Vec::with_capacity(size);
    f.extend_from_slice(&dst.mac);
    f.extend_from_slice(&src.mac);
    f.extend_from_slice(&0x0800u16.to_be_bytes());

    let ip_len = (size - ETH_HEADER_LEN) as u16;
    let mut ip = [0u8; IPV4_HEADER_LEN];
    ip[0] = 0x45;
    ip[2..4].copy_from_slice(&ip_len.to_be_bytes());
    ip[4..6].copy_from_slice(&(seq as u16).to_be_bytes());
    ip[8] = 64;
    ip[9] = 17;
    ip[12..16].copy_from_slice(&src.ip);
    ip[16..20].copy_from_slice(&dst.ip);
    let csum = ipv4_checksum(&ip);
    ip[10..12].copy_from_slice(&csum.to_be_bytes());
    f.extend_from_slice(&ip);

    let udp_len = (size - ETH_HEADER_LEN - IPV4_HEADER_LEN) as u16;
    f.extend_from_slice(&src.port.to_be_bytes());
    f.extend_from_slice(&dst.port.to_be_bytes());
    f.extend_from_slice(&udp_len.to_be_bytes());
    f.extend_from_slice(&0u16.to_be_bytes());

    f.extend_from_slice(&seq.to_be_bytes());
    f.extend_from_slice(&sent_ns.to_be_bytes());
    f.extend((0..size - MIN_FRAME_LEN).map(|i| (seq as usize + i) as u8));
    Ok(f)
}

/// UDP payload of a frame built by [`build_udp_frame`].
pub fn udp_payload(frame: &[u8]) -> Result<&[u8], FrameError> {
    if frame.len() < HEADERS_LEN || frame[12..14] != [0x08, 0x00] || frame[ETH_HEADER_LEN + 9] != 17 {
        return Err(FrameError::NotUdp);
    }
    Ok(&frame[HEADERS_LEN..])
}

/// `(seq, sent_ns)` from the stamp, and whether the fill pattern is intact.
pub fn read_stamp(frame: &[u8]) -> Result<(u64, u64, bool), FrameError> {
    let p = udp_payload(frame)?;
    if p.len() < STAMP_LEN {
        return Err(FrameError::TooSmall {
            size: frame.len(),
            min: MIN_FRAME_LEN,
        });
    }
    let seq = u64::from_be_bytes(p[..8].try_into().expect("8 bytes"));
    let sent = u64::from_be_bytes(p[8..16].try_into().expect("8 bytes"));
    let intact = p[STAMP_LEN..]
        .iter()
        .enumerate()
        .all(|(i, &b)| b == (seq as usize + i) as u8);
    Ok((seq, sent, intact))
}

/// Swaps Ethernet, IP and UDP source and destination in place. The IPv4
/// checksum is invariant under the swap.
pub fn swap_endpoints(frame: &mut [u8]) -> Result<(), FrameError> {
    udp_payload(frame)?;
    for i in 0..6 {
        frame.swap(i, 6 + i);
    }
    let ip = ETH_HEADER_LEN;
    for i in 0..4 {
        frame.swap(ip + 12 + i, ip + 16 + i);
    }
    let udp = ETH_HEADER_LEN + IPV4_HEADER_LEN;
    for i in 0..2 {
        frame.swap(udp + i, udp + 2 + i);
    }
    Ok(())
}

/// Splits a frame into pieces of at most `mtu` bytes, each carrying a copy
/// of the Ethernet header. Frames within the MTU are returned whole.
pub fn fragment(frame: &[u8], mtu: usize) -> Vec<Vec<u8>> {
    if frame.len() <= mtu || frame.len() <= ETH_HEADER_LEN || mtu <= ETH_HEADER_LEN {
        return vec![frame.to_vec()];
    }
    let (eth, body) = frame.split_at(ETH_HEADER_LEN);
    body.chunks(mtu - ETH_HEADER_LEN)
        .map(|chunk| [eth, chunk].concat())
        .collect()
}

/// Inverse of [`fragment`].
pub fn reassemble(fragments: &[Vec<u8>]) -> Vec<u8> {
    match fragments {
        [] => Vec::new(),
        [one] => one.clone(),
        [first, rest @ ..] => {
            let mut out = first.clone();
            for f in rest {
                out.extend_from_slice(&f[ETH_HEADER_LEN.min(f.len())..]);
            }
            out
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hosts() -> (Endpoint, Endpoint) {
        (
            Endpoint {
                mac: [2, 0, 0, 0, 0, 1],
                ip: [10, 0, 0, 1],
                port: 4000,
            },
            Endpoint {
                mac: [2, 0, 0, 0, 0, 2],
                ip: [10, 0, 0, 2],
                port: 7,
            },
        )
    }

    #[test]
    fn frame_layout_and_stamp() {
        let (a, b) = hosts();
        let f = build_udp_frame(&a, &b, 64, 5, 123_456).unwrap();
        assert_eq!(f.len(), 64);
        assert_eq!(dst_mac(&f), Some(b.mac));
        assert_eq!(src_mac(&f), Some(a.mac));
        assert_eq!(ipv4_checksum(&f[14..34]), 0);
        assert_eq!(read_stamp(&f).unwrap(), (5, 123_456, true));
        assert_eq!(udp_payload(&f).unwrap().len(), 64 - 42);
    }

    #[test]
    fn size_limits() {
        let (a, b) = hosts();
        assert!(matches!(build_udp_frame(&a, &b, 57, 0, 0), Err(FrameError::TooSmall { .. })));
        assert!(build_udp_frame(&a, &b, 58, 0, 0).is_ok());
        assert_eq!(build_udp_frame(&a, &b, 1501, 0, 0), Err(FrameError::TooLarge(1501)));
    }

    #[test]
    fn swap_is_an_involution() {
        let (a, b) = hosts();
        let f = build_udp_frame(&a, &b, 100, 1, 2).unwrap();
        let mut g = f.clone();
        swap_endpoints(&mut g).unwrap();
        assert_eq!(dst_mac(&g), Some(a.mac));
        assert_eq!(&g[26..30], &b.ip);
        assert_eq!(ipv4_checksum(&g[14..34]), 0);
        assert_eq!(udp_payload(&g).unwrap(), udp_payload(&f).unwrap());
        swap_endpoints(&mut g).unwrap();
        assert_eq!(f, g);
    }

    #[test]
    fn fragmentation_boundaries() {
        for size in [1, 14, 1408, 1500] {
            assert_eq!(fragment(&vec![7; size], MTU).len(), 1);
        }
        for size in [1501, 1600, 2986] {
            let frame: Vec<u8> = (0..size).map(|i| i as u8).collect();
            let parts = fragment(&frame, MTU);
            assert_eq!(parts.len(), 2, "size {size}");
            assert!(parts.iter().all(|p| p.len() <= MTU && p[..14] == frame[..14]));
            assert_eq!(reassemble(&parts), frame);
        }
        assert_eq!(fragment(&[0; 2987], MTU).len(), 3);
    }
}

use std::io::{self, Read, Write};
use std::net::TcpStream;
use std::sync::{Arc, Mutex};

/// Byte stream handed to the compartment for a TLS session.
pub trait Transport: Read + Write + Send + 'static {
    fn set_nonblocking(&self, nonblocking: bool) -> io::Result<()>;
}

impl Transport for TcpStream {
    fn set_nonblocking(&self, nonblocking: bool) -> io::Result<()> {
        TcpStream::set_nonblocking(self, nonblocking)
    }
}

/// Shared log of every byte that crossed a transport, both directions.
#[derive(Debug, Clone, Default)]
pub struct BoundaryCapture {
    bytes: Arc<Mutex<Vec<u8>>>,
}

impl BoundaryCapture {
    pub fn new() -> BoundaryCapture {
        BoundaryCapture::default()
    }

    pub fn record(&self, data: &[u8]) {
        self.bytes.lock().expect("capture lock").extend_from_slice(data);
    }

    pub fn snapshot(&self) -> Vec<u8> {
        self.bytes.lock().expect("capture lock").clone()
    }

    pub fn len(&self) -> usize {
        self.bytes.lock().expect("capture lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Wraps a transport and mirrors all traffic into a [`BoundaryCapture`].
pub struct CapturedTransport<T> {
    inner: T,
    capture: BoundaryCapture,
}

impl<T: Transport> CapturedTransport<T> {
    pub fn new(inner: T, capture: BoundaryCapture) -> CapturedTransport<T> {
        CapturedTransport { inner, capture }
    }
}

impl<T: Read> Read for CapturedTransport<T> {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        let n = self.inner.read(buf)?;
        self.capture.record(&buf[..n]);
        Ok(n)
    }
}

impl<T: Write> Write for CapturedTransport<T> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.capture.record(&buf[..n]);
        Ok(n)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }
}

impl<T: Transport> Transport for CapturedTransport<T> {
    fn set_nonblocking(&self, nonblocking: bool) -> io::Result<()> {
        self.inner.set_nonblocking(nonblocking)
    }
}

/// Splits a captured byte stream into TLS records: `(content_type, version, body)`.
/// Stops at the first incomplete record.
pub fn tls_records(stream: &[u8]) -> Vec<(u8, u16, &[u8])> {
    let mut out = Vec::new();
    let mut rest = stream;
    while rest.len() >= 5 {
        let len = u16::from_be_bytes([rest[3], rest[4]]) as usize;
        if rest.len() < 5 + len {
            break;
        }
        out.push((rest[0], u16::from_be_bytes([rest[1], rest[2]]), &rest[5..5 + len]));
        rest = &rest[5 + len..];
    }
    out
}

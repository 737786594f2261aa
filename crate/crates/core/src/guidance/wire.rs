//! Framed TCP protocol for external denoisers.
//!
//! Frame: `"DHGD"`, version `u16`, header length `u32` (both little-endian),
//! a compact JSON header, then the image payload as little-endian `f32`
//! values in row-major, channel-last order.

use std::io::{self, Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{Denoiser, GuidanceError, Result};
use crate::render::Image;

pub const MAGIC: [u8; 4] = *b"DHGD";
pub const PROTOCOL_VERSION: u16 = 1;
pub const DEFAULT_PORT: u16 = 7341;
pub const DEFAULT_GUIDANCE_SCALE: f64 = 30.0;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(60);
pub const DEFAULT_RETRIES: usize = 3;
pub const DEFAULT_MAX_PAYLOAD: usize = 256 << 20;
const MAX_HEADER: usize = 1 << 20;
const DTYPE: &str = "f32le";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RequestHeader {
    pub t: usize,
    pub prompt: String,
    pub scale: f64,
    pub shape: [usize; 3],
    pub dtype: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    Error,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResponseHeader {
    pub status: Status,
    pub message: String,
    pub shape: Vec<usize>,
}

fn encode_frame<H: Serialize>(header: &H, payload: &[f32]) -> Vec<u8> {
    let json = serde_json::to_vec(header).expect("header serializes");
    let mut out = Vec::with_capacity(10 + json.len() + payload.len() * 4);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&PROTOCOL_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn encode_request(t: usize, prompt: &str, scale: f64, z: &Image<f32>) -> Vec<u8> {
    let header = RequestHeader {
        t,
        prompt: prompt.to_string(),
        scale,
        shape: [z.height, z.width, z.channels],
        dtype: DTYPE.into(),
    };
    encode_frame(&header, &z.data)
}

pub fn encode_response(eps: &Image<f32>) -> Vec<u8> {
    let header = ResponseHeader {
        status: Status::Ok,
        message: String::new(),
        shape: vec![eps.height, eps.width, eps.channels],
    };
    encode_frame(&header, &eps.data)
}

pub fn encode_error_response(message: &str) -> Vec<u8> {
    let header = ResponseHeader {
        status: Status::Error,
        message: message.to_string(),
        shape: Vec::new(),
    };
    encode_frame(&header, &[])
}

fn read_exact_or<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> io::Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            io::Error::new(io::ErrorKind::UnexpectedEof, format!("truncated {what}"))
        } else {
            e
        }
    })
}

/// Failure while reading a frame, before the header is known to be valid.
#[derive(Debug)]
pub enum FrameError {
    /// The peer closed the connection before sending any byte.
    Closed,
    Io(io::Error),
    Protocol(GuidanceError),
}

impl From<FrameError> for GuidanceError {
    fn from(e: FrameError) -> Self {
        match e {
            FrameError::Closed => GuidanceError::Malformed("connection closed before a frame".into()),
            FrameError::Io(e) if e.kind() == io::ErrorKind::UnexpectedEof => GuidanceError::Malformed(e.to_string()),
            FrameError::Io(e) => GuidanceError::Malformed(format!("read failed: {e}")),
            FrameError::Protocol(p) => p,
        }
    }
}

/// Reads magic, version and the JSON header bytes.
pub fn read_frame_header<R: Read>(r: &mut R) -> std::result::Result<Vec<u8>, FrameError> {
    let mut magic = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut magic[got..]) {
            Ok(0) if got == 0 => return Err(FrameError::Closed),
            Ok(0) => {
                return Err(FrameError::Io(io::Error::new(io::ErrorKind::UnexpectedEof, "truncated magic")));
            }
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(FrameError::Io(e)),
        }
    }
    if magic != MAGIC {
        return Err(FrameError::Protocol(GuidanceError::Malformed(format!("bad magic {magic:?}"))));
    }
    let mut b2 = [0u8; 2];
    read_exact_or(r, &mut b2, "version").map_err(FrameError::Io)?;
    let version = u16::from_le_bytes(b2);
    if version != PROTOCOL_VERSION {
        return Err(FrameError::Protocol(GuidanceError::Version {
            expected: PROTOCOL_VERSION,
            got: version,
        }));
    }
    let mut b4 = [0u8; 4];
    read_exact_or(r, &mut b4, "header length").map_err(FrameError::Io)?;
    let len = u32::from_le_bytes(b4) as usize;
    if len > MAX_HEADER {
        return Err(FrameError::Protocol(GuidanceError::Malformed(format!("header of {len} bytes"))));
    }
    let mut header = vec![0u8; len];
    read_exact_or(r, &mut header, "header").map_err(FrameError::Io)?;
    Ok(header)
}

fn payload_len(shape: &[usize], max_payload: usize) -> Result<usize> {
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| GuidanceError::Malformed(format!("shape {shape:?} overflows")))?;
    let bytes = count
        .checked_mul(4)
        .ok_or_else(|| GuidanceError::Malformed(format!("shape {shape:?} overflows")))?;
    if bytes > max_payload {
        return Err(GuidanceError::PayloadTooLarge(bytes));
    }
    Ok(count)
}

fn read_payload<R: Read>(r: &mut R, count: usize) -> Result<Vec<f32>> {
    let mut bytes = vec![0u8; count * 4];
    read_exact_or(r, &mut bytes, "payload").map_err(|e| GuidanceError::Malformed(e.to_string()))?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn image_from(shape: [usize; 3], data: Vec<f32>) -> Result<Image<f32>> {
    Image::from_data(shape[1], shape[0], shape[2], data).map_err(|e| GuidanceError::Malformed(e.to_string()))
}

/// A decoded request: header and noised image.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiseRequest {
    pub header: RequestHeader,
    pub z: Image<f32>,
}

/// Reads one request frame. `Ok(None)` when the peer closed cleanly.
pub fn read_request<R: Read>(r: &mut R, max_payload: usize) -> Result<Option<DenoiseRequest>> {
    let header = match read_frame_header(r) {
        Ok(h) => h,
        Err(FrameError::Closed) => return Ok(None),
        Err(e) => return Err(e.into()),
    };
    let header: RequestHeader =
        serde_json::from_slice(&header).map_err(|e| GuidanceError::Malformed(format!("request header: {e}")))?;
    if header.dtype != DTYPE {
        return Err(GuidanceError::Malformed(format!("unsupported dtype `{}`", header.dtype)));
    }
    let count = payload_len(&header.shape, max_payload)?;
    let data = read_payload(r, count)?;
    let z = image_from(header.shape, data)?;
    Ok(Some(DenoiseRequest { header, z }))
}

/// Reads one response frame and returns the predicted noise.
pub fn read_response<R: Read>(r: &mut R, max_payload: usize) -> Result<Image<f32>> {
    let header = read_frame_header(r).map_err(GuidanceError::from)?;
    parse_response(&header, r, max_payload)
}

fn parse_response<R: Read>(header: &[u8], r: &mut R, max_payload: usize) -> Result<Image<f32>> {
    let header: ResponseHeader =
        serde_json::from_slice(header).map_err(|e| GuidanceError::Malformed(format!("response header: {e}")))?;
    if header.status == Status::Error {
        return Err(GuidanceError::Remote(header.message));
    }
    let shape: [usize; 3] = header
        .shape
        .as_slice()
        .try_into()
        .map_err(|_| GuidanceError::Malformed(format!("response shape {:?}", header.shape)))?;
    let count = payload_len(&shape, max_payload)?;
    let data = read_payload(r, count)?;
    image_from(shape, data)
}

/// Denoiser reached over TCP; one connection per request.
#[derive(Clone, Debug)]
pub struct RemoteDenoiser {
    pub endpoint: String,
    pub timeout: Duration,
    pub retries: usize,
    pub max_payload: usize,
}

impl RemoteDenoiser {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            timeout: DEFAULT_TIMEOUT,
            retries: DEFAULT_RETRIES,
            max_payload: DEFAULT_MAX_PAYLOAD,
        }
    }

    fn transport(&self, source: io::Error) -> GuidanceError {
        GuidanceError::Transport {
            endpoint: self.endpoint.clone(),
            source,
        }
    }

    fn connect(&self) -> Result<TcpStream> {
        let addrs = self.endpoint.to_socket_addrs().map_err(|e| self.transport(e))?;
        let mut last = io::Error::new(io::ErrorKind::NotFound, "no address resolved");
        for addr in addrs {
            match TcpStream::connect_timeout(&addr, self.timeout) {
                Ok(s) => {
                    s.set_read_timeout(Some(self.timeout)).map_err(|e| self.transport(e))?;
                    s.set_write_timeout(Some(self.timeout)).map_err(|e| self.transport(e))?;
                    s.set_nodelay(true).ok();
                    return Ok(s);
                }
                Err(e) => last = e,
            }
        }
        Err(self.transport(last))
    }

    /// Connectivity probe.
    pub fn check_reachable(&self) -> Result<()> {
        self.connect().map(|_| ())
    }

    fn attempt(&self, frame: &[u8]) -> Result<Image<f32>> {
        let mut stream = self.connect()?;
        stream.write_all(frame).map_err(|e| self.transport(e))?;
        stream.flush().map_err(|e| self.transport(e))?;
        let header = match read_frame_header(&mut stream) {
            Ok(h) => h,
            Err(FrameError::Closed) => {
                return Err(self.transport(io::Error::new(io::ErrorKind::ConnectionAborted, "closed without response")))
            }
            Err(FrameError::Io(e)) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {
                return Err(GuidanceError::Timeout {
                    endpoint: self.endpoint.clone(),
                    seconds: self.timeout.as_secs_f64(),
                })
            }
            Err(FrameError::Io(e)) if e.kind() != io::ErrorKind::UnexpectedEof => return Err(self.transport(e)),
            Err(e) => return Err(e.into()),
        };
        parse_response(&header, &mut stream, self.max_payload)
    }
}

impl Denoiser<f32> for RemoteDenoiser {
    fn predict(&mut self, z: &Image<f32>, t: usize, prompt: &str, scale: f64) -> Result<Image<f32>> {
        let frame = encode_request(t, prompt, scale, z);
        let mut attempt = 0;
        let eps = loop {
            match self.attempt(&frame) {
                Ok(eps) => break eps,
                Err(GuidanceError::Transport { .. }) if attempt < self.retries => attempt += 1,
                Err(e) => return Err(e),
            }
        };
        if [eps.height, eps.width, eps.channels] != [z.height, z.width, z.channels] {
            return Err(GuidanceError::ShapeMismatch {
                expected: [z.height, z.width, z.channels],
                got: [eps.height, eps.width, eps.channels],
            });
        }
        Ok(eps)
    }
}

/// Serves sequential requests on one connection until the peer closes it.
/// Returns the number of requests answered.
pub fn serve_connection<S, D>(stream: &mut S, denoiser: &mut D, max_payload: usize) -> Result<usize>
where
    S: Read + Write,
    D: Denoiser<f32> + ?Sized,
{
    let mut served = 0;
    loop {
        let header = match read_frame_header(stream) {
            Ok(h) => h,
            Err(FrameError::Closed) => return Ok(served),
            Err(e) => return Err(e.into()),
        };
        let header: RequestHeader =
            serde_json::from_slice(&header).map_err(|e| GuidanceError::Malformed(format!("request header: {e}")))?;
        if header.dtype != DTYPE {
            return Err(GuidanceError::Malformed(format!("unsupported dtype `{}`", header.dtype)));
        }
        let count = match payload_len(&header.shape, max_payload) {
            Ok(c) => c,
            Err(GuidanceError::PayloadTooLarge(_)) => {
                write_frame(stream, &encode_error_response("payload too large"))?;
                return Ok(served);
            }
            Err(e) => return Err(e),
        };
        let z = image_from(header.shape, read_payload(stream, count)?)?;
        let reply = match denoiser.predict(&z, header.t, &header.prompt, header.scale) {
            Ok(eps) => encode_response(&eps),
            Err(e) => encode_error_response(&e.to_string()),
        };
        write_frame(stream, &reply)?;
        served += 1;
    }
}

fn write_frame<S: Write>(stream: &mut S, frame: &[u8]) -> Result<()> {
    stream
        .write_all(frame)
        .and_then(|_| stream.flush())
        .map_err(|e| GuidanceError::Transport {
            endpoint: "peer".into(),
            source: e,
        })
}

/// Accepts connections one at a time; stops after `max_connections` when given.
pub fn serve<D: Denoiser<f32> + ?Sized>(
    listener: &TcpListener,
    denoiser: &mut D,
    max_connections: Option<usize>,
    max_payload: usize,
) -> Result<()> {
    let mut handled = 0;
    for stream in listener.incoming() {
        let mut stream = stream.map_err(|e| GuidanceError::Transport {
            endpoint: "listener".into(),
            source: e,
        })?;
        // a misbehaving client only loses its own connection
        let _ = serve_connection(&mut stream, denoiser, max_payload);
        handled += 1;
        if max_connections.is_some_and(|m| handled >= m) {
            break;
        }
    }
    Ok(())
}

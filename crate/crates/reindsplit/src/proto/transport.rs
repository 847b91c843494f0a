//! Frame transports: in-process loopback and TCP streams.
//!
//! Both deliver whole frames in order. Stream mode prefixes each frame with
//! a 4-byte little-endian length; loopback moves the same byte vectors
//! through an in-process queue, so the two are interchangeable bit for bit.

use std::collections::VecDeque;
use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use thiserror::Error;

use super::HEADER_LEN;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("connection closed")]
    Closed,
    #[error("frame of {len} bytes exceeds cap {cap}")]
    FrameTooLarge { len: u64, cap: u64 },
    #[error("socket error: {0}")]
    Io(#[from] std::io::Error),
}

/// Ordered, reliable delivery of whole frames.
pub trait Transport: Send {
    fn send(&mut self, frame: &[u8]) -> Result<(), TransportError>;
    fn recv(&mut self) -> Result<Vec<u8>, TransportError>;
}

#[derive(Default)]
struct Channel {
    queue: Mutex<(VecDeque<Vec<u8>>, bool)>,
    ready: Condvar,
}

impl Channel {
    fn push(&self, frame: Vec<u8>) -> Result<(), TransportError> {
        let mut guard = self.queue.lock().expect("loopback lock");
        if guard.1 {
            return Err(TransportError::Closed);
        }
        guard.0.push_back(frame);
        self.ready.notify_one();
        Ok(())
    }

    fn pop(&self) -> Result<Vec<u8>, TransportError> {
        let mut guard = self.queue.lock().expect("loopback lock");
        loop {
            if let Some(frame) = guard.0.pop_front() {
                return Ok(frame);
            }
            if guard.1 {
                return Err(TransportError::Closed);
            }
            guard = self.ready.wait(guard).expect("loopback wait");
        }
    }

    fn close(&self) {
        let mut guard = self.queue.lock().expect("loopback lock");
        guard.1 = true;
        self.ready.notify_all();
    }
}

/// One side of an in-process frame pipe.
pub struct LoopbackEndpoint {
    out: Arc<Channel>,
    inc: Arc<Channel>,
}

impl Transport for LoopbackEndpoint {
    fn send(&mut self, frame: &[u8]) -> Result<(), TransportError> {
        self.out.push(frame.to_vec())
    }

    fn recv(&mut self) -> Result<Vec<u8>, TransportError> {
        self.inc.pop()
    }
}

impl Drop for LoopbackEndpoint {
    fn drop(&mut self) {
        self.out.close();
        self.inc.close();
    }
}

/// Paired in-process endpoints: frames sent on one side arrive on the other
/// in order, bit-identical.
pub fn loopback_transport() -> (LoopbackEndpoint, LoopbackEndpoint) {
    let a = Arc::new(Channel::default());
    let b = Arc::new(Channel::default());
    (
        LoopbackEndpoint {
            out: a.clone(),
            inc: b.clone(),
        },
        LoopbackEndpoint { out: b, inc: a },
    )
}

/// TCP transport with a 4-byte little-endian length prefix per frame.
pub struct StreamEndpoint {
    stream: TcpStream,
    max_frame: u32,
}

impl StreamEndpoint {
    pub fn new(stream: TcpStream, max_frame: u32) -> Result<Self, TransportError> {
        stream.set_nodelay(true)?;
        Ok(Self { stream, max_frame })
    }

    pub fn connect<A: ToSocketAddrs>(addr: A, max_frame: u32) -> Result<Self, TransportError> {
        let stream = TcpStream::connect(addr)?;
        Self::new(stream, max_frame)
    }
}

impl Transport for StreamEndpoint {
    fn send(&mut self, frame: &[u8]) -> Result<(), TransportError> {
        if frame.len() as u64 > self.max_frame as u64 {
            return Err(TransportError::FrameTooLarge {
                len: frame.len() as u64,
                cap: self.max_frame as u64,
            });
        }
        self.stream.write_all(&(frame.len() as u32).to_le_bytes())?;
        self.stream.write_all(frame)?;
        Ok(())
    }

    fn recv(&mut self) -> Result<Vec<u8>, TransportError> {
        let mut len_raw = [0u8; 4];
        if let Err(e) = self.stream.read_exact(&mut len_raw) {
            return match e.kind() {
                std::io::ErrorKind::UnexpectedEof => Err(TransportError::Closed),
                _ => Err(TransportError::Io(e)),
            };
        }
        let len = u32::from_le_bytes(len_raw);
        if len > self.max_frame {
            return Err(TransportError::FrameTooLarge {
                len: len as u64,
                cap: self.max_frame as u64,
            });
        }
        if (len as usize) < HEADER_LEN {
            return Err(TransportError::Io(std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("frame of {len} bytes is shorter than a header"),
            )));
        }
        let mut frame = vec![0u8; len as usize];
        self.stream.read_exact(&mut frame).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => TransportError::Closed,
            _ => TransportError::Io(e),
        })?;
        Ok(frame)
    }
}

/// Connect to `addr` with the default frame cap, retrying briefly so a
/// just-spawned listener has time to bind.
pub fn stream_transport<A: ToSocketAddrs + Clone>(
    addr: A,
) -> Result<StreamEndpoint, TransportError> {
    let cap = super::DEFAULT_MAX_PAYLOAD + HEADER_LEN as u32;
    let mut last_err = None;
    for _ in 0..50 {
        match StreamEndpoint::connect(addr.clone(), cap) {
            Ok(ep) => return Ok(ep),
            Err(e) => {
                last_err = Some(e);
                std::thread::sleep(Duration::from_millis(20));
            }
        }
    }
    Err(last_err.expect("at least one attempt"))
}

/// Bind a listener for the server side of a stream run.
pub fn bind_listener<A: ToSocketAddrs>(addr: A) -> Result<TcpListener, TransportError> {
    Ok(TcpListener::bind(addr)?)
}

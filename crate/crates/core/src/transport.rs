//! Framed point-to-point channels.
//!
//! A frame on the wire is a 4-byte big-endian payload length, a 1-byte
//! message type and the payload. In-process channels move the same frames
//! through `mpsc` queues, so callers see identical behavior on both.

use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex};

use thiserror::Error;

use crate::wire::{self, DecodeError, Reader};

pub mod msg {
    pub const PUSH: u8 = 0x01;
    pub const PULL_REQ: u8 = 0x02;
    pub const PULL_RESP: u8 = 0x03;
    pub const PSI_PARAMS: u8 = 0x10;
    pub const PSI_CLIENT_BF: u8 = 0x11;
    pub const PSI_INTERSECTION_GBF: u8 = 0x12;
    pub const PSI_DONE: u8 = 0x13;
    pub const PSI_RESULT: u8 = 0x14;
    pub const ENC_ACT: u8 = 0x20;
    pub const MASKED_CT: u8 = 0x21;
    pub const MASKED_PT: u8 = 0x22;
    pub const GRAD_PASSIVE: u8 = 0x23;
    pub const HANDSHAKE: u8 = 0x30;
    pub const HANDSHAKE_ACK: u8 = 0x31;
    pub const PAIR_OPEN: u8 = 0x32;
    pub const ERROR: u8 = 0x7E;
    pub const SHUTDOWN: u8 = 0x7F;

    pub fn name(t: u8) -> &'static str {
        match t {
            PUSH => "PUSH",
            PULL_REQ => "PULL_REQ",
            PULL_RESP => "PULL_RESP",
            PSI_PARAMS => "PSI_PARAMS",
            PSI_CLIENT_BF => "PSI_CLIENT_BF",
            PSI_INTERSECTION_GBF => "PSI_INTERSECTION_GBF",
            PSI_DONE => "PSI_DONE",
            PSI_RESULT => "PSI_RESULT",
            ENC_ACT => "ENC_ACT",
            MASKED_CT => "MASKED_CT",
            MASKED_PT => "MASKED_PT",
            GRAD_PASSIVE => "GRAD_PASSIVE",
            HANDSHAKE => "HANDSHAKE",
            HANDSHAKE_ACK => "HANDSHAKE_ACK",
            PAIR_OPEN => "PAIR_OPEN",
            ERROR => "ERROR",
            SHUTDOWN => "SHUTDOWN",
            _ => "UNKNOWN",
        }
    }
}

/// Frames above this size are rejected before allocation.
pub const MAX_FRAME_LEN: usize = 1 << 30;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("channel closed by peer")]
    Closed,
    #[error("peer shut the session down")]
    Shutdown,
    #[error("peer reported: {0}")]
    Remote(String),
    #[error("expected {} frame, got {}", msg::name(*expected), msg::name(*found))]
    Unexpected { expected: u8, found: u8 },
    #[error("frame of {0} bytes exceeds the limit")]
    FrameTooLarge(usize),
    #[error("pair index {found} does not match {expected}")]
    PairMismatch { expected: usize, found: usize },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Decode(#[from] DecodeError),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub msg_type: u8,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(msg_type: u8, payload: Vec<u8>) -> Self {
        Self { msg_type, payload }
    }

    pub fn empty(msg_type: u8) -> Self {
        Self::new(msg_type, Vec::new())
    }

    pub fn error(text: &str) -> Self {
        Self::new(msg::ERROR, text.as_bytes().to_vec())
    }
}

pub fn write_frame<W: Write>(w: &mut W, frame: &Frame) -> Result<(), TransportError> {
    if frame.payload.len() > MAX_FRAME_LEN {
        return Err(TransportError::FrameTooLarge(frame.payload.len()));
    }
    let mut header = Vec::with_capacity(5);
    wire::put_u32(&mut header, frame.payload.len() as u32);
    wire::put_u8(&mut header, frame.msg_type);
    w.write_all(&header)?;
    w.write_all(&frame.payload)?;
    Ok(())
}

/// Reads one frame. A clean end of stream before the header maps to
/// [`TransportError::Closed`].
pub fn read_frame<R: Read>(r: &mut R) -> Result<Frame, TransportError> {
    let mut header = [0u8; 5];
    match r.read_exact(&mut header) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Err(TransportError::Closed),
        Err(e) => return Err(e.into()),
    }
    let mut hr = Reader::new(&header);
    let len = hr.u32()? as usize;
    let msg_type = hr.u8()?;
    if len > MAX_FRAME_LEN {
        return Err(TransportError::FrameTooLarge(len));
    }
    let mut payload = vec![0u8; len];
    r.read_exact(&mut payload).map_err(|e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            TransportError::Closed
        } else {
            e.into()
        }
    })?;
    Ok(Frame { msg_type, payload })
}

/// Reliable FIFO link between worker `i` of one party and worker `i` of the
/// other.
pub trait Channel: Send {
    fn send(&mut self, frame: Frame) -> Result<(), TransportError>;

    fn recv(&mut self) -> Result<Frame, TransportError>;

    fn pair_index(&self) -> usize;

    /// Receives a frame of type `msg_type`. SHUTDOWN and ERROR frames from
    /// the peer become errors.
    fn expect(&mut self, msg_type: u8) -> Result<Vec<u8>, TransportError> {
        let frame = self.recv()?;
        check_type(frame, msg_type)
    }
}

pub fn check_type(frame: Frame, msg_type: u8) -> Result<Vec<u8>, TransportError> {
    match frame.msg_type {
        t if t == msg_type => Ok(frame.payload),
        msg::SHUTDOWN => Err(TransportError::Shutdown),
        msg::ERROR => Err(TransportError::Remote(
            String::from_utf8_lossy(&frame.payload).into_owned(),
        )),
        found => Err(TransportError::Unexpected {
            expected: msg_type,
            found,
        }),
    }
}

impl<C: Channel + ?Sized> Channel for Box<C> {
    fn send(&mut self, frame: Frame) -> Result<(), TransportError> {
        (**self).send(frame)
    }

    fn recv(&mut self) -> Result<Frame, TransportError> {
        (**self).recv()
    }

    fn pair_index(&self) -> usize {
        (**self).pair_index()
    }
}

pub struct InProcChannel {
    tx: Sender<Frame>,
    rx: Receiver<Frame>,
    pair_index: usize,
}

/// Two connected endpoints.
pub fn in_proc_pair(pair_index: usize) -> (InProcChannel, InProcChannel) {
    let (tx_a, rx_b) = mpsc::channel();
    let (tx_b, rx_a) = mpsc::channel();
    (
        InProcChannel {
            tx: tx_a,
            rx: rx_a,
            pair_index,
        },
        InProcChannel {
            tx: tx_b,
            rx: rx_b,
            pair_index,
        },
    )
}

impl Channel for InProcChannel {
    fn send(&mut self, frame: Frame) -> Result<(), TransportError> {
        self.tx.send(frame).map_err(|_| TransportError::Closed)
    }

    fn recv(&mut self) -> Result<Frame, TransportError> {
        self.rx.recv().map_err(|_| TransportError::Closed)
    }

    fn pair_index(&self) -> usize {
        self.pair_index
    }
}

pub struct TcpChannel {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
    pair_index: usize,
}

impl TcpChannel {
    fn from_stream(stream: TcpStream, pair_index: usize) -> Result<Self, TransportError> {
        stream.set_nodelay(true)?;
        Ok(Self {
            reader: BufReader::new(stream.try_clone()?),
            writer: BufWriter::new(stream),
            pair_index,
        })
    }

    /// Connects and announces `pair_index` with a PAIR_OPEN frame.
    pub fn connect<A: ToSocketAddrs>(addr: A, pair_index: usize) -> Result<Self, TransportError> {
        let stream = TcpStream::connect(addr)?;
        let mut ch = Self::from_stream(stream, pair_index)?;
        let mut payload = Vec::new();
        wire::put_u32(&mut payload, pair_index as u32);
        ch.send(Frame::new(msg::PAIR_OPEN, payload))?;
        Ok(ch)
    }

    /// Connects, retrying while the listener is not up yet.
    pub fn connect_retry<A: ToSocketAddrs + Clone>(
        addr: A,
        pair_index: usize,
        attempts: usize,
    ) -> Result<Self, TransportError> {
        let mut last = None;
        for _ in 0..attempts.max(1) {
            match Self::connect(addr.clone(), pair_index) {
                Ok(ch) => return Ok(ch),
                Err(TransportError::Io(e)) if e.kind() == io::ErrorKind::ConnectionRefused => {
                    last = Some(e);
                    std::thread::sleep(std::time::Duration::from_millis(50));
                }
                Err(e) => return Err(e),
            }
        }
        Err(last.map_or(TransportError::Closed, TransportError::Io))
    }

    /// Accepts one connection and reads its PAIR_OPEN frame.
    pub fn accept(listener: &TcpListener) -> Result<Self, TransportError> {
        let (stream, _) = listener.accept()?;
        let mut ch = Self::from_stream(stream, 0)?;
        let payload = ch.expect(msg::PAIR_OPEN)?;
        let mut r = Reader::new(&payload);
        ch.pair_index = r.u32()? as usize;
        r.finish()?;
        Ok(ch)
    }

    /// Accepts `n` connections and orders them by announced pair index.
    pub fn accept_pairs(listener: &TcpListener, n: usize) -> Result<Vec<Self>, TransportError> {
        let mut slots: Vec<Option<Self>> = (0..n).map(|_| None).collect();
        for _ in 0..n {
            let ch = Self::accept(listener)?;
            let i = ch.pair_index;
            match slots.get_mut(i) {
                Some(slot @ None) => *slot = Some(ch),
                _ => {
                    return Err(TransportError::PairMismatch {
                        expected: n,
                        found: i,
                    })
                }
            }
        }
        Ok(slots.into_iter().map(|s| s.expect("all filled")).collect())
    }
}

impl Channel for TcpChannel {
    fn send(&mut self, frame: Frame) -> Result<(), TransportError> {
        write_frame(&mut self.writer, &frame)?;
        self.writer.flush()?;
        Ok(())
    }

    fn recv(&mut self) -> Result<Frame, TransportError> {
        read_frame(&mut self.reader)
    }

    fn pair_index(&self) -> usize {
        self.pair_index
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Sent,
    Received,
}

/// Shared log of message types seen by one or more [`RecordingChannel`]s.
pub type MessageLog = Arc<Mutex<Vec<(usize, Direction, u8)>>>;

/// Wraps a channel and logs `(pair, direction, type)` of every frame.
pub struct RecordingChannel<C> {
    inner: C,
    log: MessageLog,
}

impl<C: Channel> RecordingChannel<C> {
    pub fn new(inner: C, log: MessageLog) -> Self {
        Self { inner, log }
    }

    fn record(&self, dir: Direction, t: u8) {
        self.log
            .lock()
            .expect("log lock")
            .push((self.inner.pair_index(), dir, t));
    }
}

impl<C: Channel> Channel for RecordingChannel<C> {
    fn send(&mut self, frame: Frame) -> Result<(), TransportError> {
        self.record(Direction::Sent, frame.msg_type);
        self.inner.send(frame)
    }

    fn recv(&mut self) -> Result<Frame, TransportError> {
        let frame = self.inner.recv()?;
        self.record(Direction::Received, frame.msg_type);
        Ok(frame)
    }

    fn pair_index(&self) -> usize {
        self.inner.pair_index()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn frame_layout() {
        let mut buf = Vec::new();
        write_frame(&mut buf, &Frame::new(msg::PUSH, vec![9, 8, 7])).unwrap();
        assert_eq!(buf, vec![0, 0, 0, 3, 0x01, 9, 8, 7]);
        let back = read_frame(&mut buf.as_slice()).unwrap();
        assert_eq!(back, Frame::new(msg::PUSH, vec![9, 8, 7]));
        assert!(matches!(read_frame(&mut [0u8; 0].as_slice()), Err(TransportError::Closed)));
        assert!(matches!(read_frame(&mut &buf[..6]), Err(TransportError::Closed)));
        let huge = [0xff, 0xff, 0xff, 0xff, 1];
        assert!(matches!(read_frame(&mut huge.as_slice()), Err(TransportError::FrameTooLarge(_))));
    }

    #[test]
    fn in_proc_fifo() {
        let (mut a, mut b) = in_proc_pair(3);
        for i in 0..1000u32 {
            a.send(Frame::new(msg::MASKED_PT, i.to_be_bytes().to_vec())).unwrap();
        }
        for i in 0..1000u32 {
            assert_eq!(b.expect(msg::MASKED_PT).unwrap(), i.to_be_bytes().to_vec());
        }
        assert_eq!(b.pair_index(), 3);
        b.send(Frame::empty(msg::SHUTDOWN)).unwrap();
        assert!(matches!(a.expect(msg::PULL_RESP), Err(TransportError::Shutdown)));
        b.send(Frame::empty(msg::PUSH)).unwrap();
        assert!(matches!(
            a.expect(msg::PULL_RESP),
            Err(TransportError::Unexpected { expected: 0x03, found: 0x01 })
        ));
        drop(b);
        assert!(matches!(a.recv(), Err(TransportError::Closed)));
    }

    #[test]
    fn tcp_round_trip_and_pairing() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let client = std::thread::spawn(move || {
            let mut chans: Vec<_> = [1usize, 0]
                .iter()
                .map(|&i| TcpChannel::connect_retry(addr, i, 20).unwrap())
                .collect();
            for ch in &mut chans {
                let i = ch.pair_index() as u8;
                ch.send(Frame::new(msg::ENC_ACT, vec![i; 70_000])).unwrap();
            }
            let reply = chans[1].expect(msg::MASKED_CT).unwrap();
            assert_eq!(reply, b"ok");
        });
        let mut chans = TcpChannel::accept_pairs(&listener, 2).unwrap();
        for (i, ch) in chans.iter_mut().enumerate() {
            assert_eq!(ch.pair_index(), i);
            assert_eq!(ch.expect(msg::ENC_ACT).unwrap(), vec![i as u8; 70_000]);
        }
        chans[0].send(Frame::new(msg::MASKED_CT, b"ok".to_vec())).unwrap();
        client.join().unwrap();
        assert!(matches!(chans[0].recv(), Err(TransportError::Closed)));
    }

    #[test]
    fn recording_logs_both_directions() {
        let log = MessageLog::default();
        let (a, b) = in_proc_pair(0);
        let mut a = RecordingChannel::new(a, log.clone());
        let mut b = RecordingChannel::new(b, log.clone());
        a.send(Frame::empty(msg::HANDSHAKE)).unwrap();
        b.expect(msg::HANDSHAKE).unwrap();
        assert_eq!(
            *log.lock().unwrap(),
            vec![(0, Direction::Sent, msg::HANDSHAKE), (0, Direction::Received, msg::HANDSHAKE)]
        );
    }

    proptest! {
        #[test]
        fn frames_round_trip(t in any::<u8>(), payload in proptest::collection::vec(any::<u8>(), 0..512)) {
            let frame = Frame::new(t, payload);
            let mut buf = Vec::new();
            write_frame(&mut buf, &frame).unwrap();
            prop_assert_eq!(buf.len(), 5 + frame.payload.len());
            prop_assert_eq!(read_frame(&mut buf.as_slice()).unwrap(), frame);
        }
    }
}

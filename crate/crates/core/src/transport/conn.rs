use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use super::{parse_header, Message, HEADER_LEN};
use crate::error::{Error, Result};

/// Sends whole frames in order.
pub trait FrameWriter: Send {
    fn write_frame(&mut self, frame: &[u8]) -> Result<()>;

    /// Signals the peer that nothing more will be sent or read.
    fn close(&mut self) {}
}

/// Yields whole frames in order; a clean close is `Error::Disconnected`.
pub trait FrameReader: Send {
    fn read_frame(&mut self) -> Result<Vec<u8>>;
}

struct ChannelWriter(Sender<Vec<u8>>);
struct ChannelReader(Receiver<Vec<u8>>);

impl FrameWriter for ChannelWriter {
    fn write_frame(&mut self, frame: &[u8]) -> Result<()> {
        self.0
            .send(frame.to_vec())
            .map_err(|_| Error::Disconnected("loopback peer dropped".into()))
    }
}

impl FrameReader for ChannelReader {
    fn read_frame(&mut self) -> Result<Vec<u8>> {
        self.0
            .recv()
            .map_err(|_| Error::Disconnected("loopback peer dropped".into()))
    }
}

struct TcpWriter(BufWriter<TcpStream>);
struct TcpReader(BufReader<TcpStream>);

impl FrameWriter for TcpWriter {
    fn write_frame(&mut self, frame: &[u8]) -> Result<()> {
        self.0.write_all(frame)?;
        self.0.flush()?;
        Ok(())
    }

    fn close(&mut self) {
        let _ = self.0.flush();
        let _ = self.0.get_ref().shutdown(std::net::Shutdown::Both);
    }
}

impl FrameReader for TcpReader {
    fn read_frame(&mut self) -> Result<Vec<u8>> {
        let mut header = [0u8; HEADER_LEN];
        match self.0.read_exact(&mut header[..1]) {
            Ok(()) => {}
            Err(e) if e.kind() == ErrorKind::UnexpectedEof => {
                return Err(Error::Disconnected("peer closed the connection".into()))
            }
            Err(e) if matches!(e.kind(), ErrorKind::ConnectionReset | ErrorKind::ConnectionAborted) => {
                return Err(Error::Disconnected(e.to_string()))
            }
            Err(e) => return Err(e.into()),
        }
        let truncated = |e: std::io::Error| {
            if e.kind() == ErrorKind::UnexpectedEof {
                Error::Framing("connection closed mid-frame".into())
            } else {
                e.into()
            }
        };
        self.0.read_exact(&mut header[1..]).map_err(truncated)?;
        let (_, len) = parse_header(&header)?;
        let mut frame = Vec::with_capacity(HEADER_LEN + len + 4);
        frame.extend_from_slice(&header);
        frame.resize(HEADER_LEN + len + 4, 0);
        self.0.read_exact(&mut frame[HEADER_LEN..]).map_err(truncated)?;
        Ok(frame)
    }
}

/// Records every frame written through it, for inspecting traffic in tests.
#[derive(Debug, Clone, Default)]
pub struct Tap {
    frames: Arc<Mutex<Vec<Vec<u8>>>>,
}

impl Tap {
    pub fn frames(&self) -> Vec<Vec<u8>> {
        self.frames.lock().expect("tap lock").clone()
    }

    pub fn messages(&self) -> Result<Vec<Message>> {
        self.frames().iter().map(|f| Message::decode(f)).collect()
    }
}

struct TapWriter {
    inner: Box<dyn FrameWriter>,
    tap: Tap,
}

impl FrameWriter for TapWriter {
    fn write_frame(&mut self, frame: &[u8]) -> Result<()> {
        self.tap.frames.lock().expect("tap lock").push(frame.to_vec());
        self.inner.write_frame(frame)
    }

    fn close(&mut self) {
        self.inner.close();
    }
}

/// One bidirectional, in-order message stream.
pub struct Connection {
    reader: Box<dyn FrameReader>,
    writer: Box<dyn FrameWriter>,
    peer: String,
}

impl std::fmt::Debug for Connection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Connection").field("peer", &self.peer).finish()
    }
}

/// Two connected in-process endpoints.
pub fn loopback_pair() -> (Connection, Connection) {
    let (atx, arx) = mpsc::channel();
    let (btx, brx) = mpsc::channel();
    (
        Connection::from_parts(Box::new(ChannelReader(brx)), Box::new(ChannelWriter(atx)), "loopback"),
        Connection::from_parts(Box::new(ChannelReader(arx)), Box::new(ChannelWriter(btx)), "loopback"),
    )
}

impl Connection {
    pub fn from_parts(reader: Box<dyn FrameReader>, writer: Box<dyn FrameWriter>, peer: &str) -> Self {
        Self {
            reader,
            writer,
            peer: peer.to_string(),
        }
    }

    pub fn tcp(stream: TcpStream) -> Result<Self> {
        stream.set_nodelay(true)?;
        let peer = stream.peer_addr().map(|a| a.to_string()).unwrap_or_else(|_| "tcp".into());
        let read_half = stream.try_clone()?;
        Ok(Self::from_parts(
            Box::new(TcpReader(BufReader::with_capacity(1 << 16, read_half))),
            Box::new(TcpWriter(BufWriter::with_capacity(1 << 16, stream))),
            &peer,
        ))
    }

    /// Connects, retrying for up to `wait` while the server is not yet
    /// listening.
    pub fn connect<A: ToSocketAddrs + Copy>(addr: A, wait: Duration) -> Result<Self> {
        let start = std::time::Instant::now();
        loop {
            match TcpStream::connect(addr) {
                Ok(s) => return Self::tcp(s),
                Err(e) if start.elapsed() < wait && e.kind() == ErrorKind::ConnectionRefused => {
                    std::thread::sleep(Duration::from_millis(50));
                }
                Err(e) => return Err(e.into()),
            }
        }
    }

    pub fn peer(&self) -> &str {
        &self.peer
    }

    pub fn with_tap(self, tap: &Tap) -> Self {
        Self {
            reader: self.reader,
            writer: Box::new(TapWriter {
                inner: self.writer,
                tap: tap.clone(),
            }),
            peer: self.peer,
        }
    }

    pub fn send(&mut self, msg: &Message) -> Result<()> {
        self.writer.write_frame(&msg.encode()?)
    }

    pub fn recv(&mut self) -> Result<Message> {
        Message::decode(&self.reader.read_frame()?)
    }

    pub fn split(self) -> (Box<dyn FrameReader>, Box<dyn FrameWriter>) {
        (self.reader, self.writer)
    }
}

/// Merges the inbound streams of many connections into one queue. Each
/// connection gets a dedicated reader thread; a connection's stream ends
/// after its first error.
#[derive(Debug)]
pub struct Incoming {
    tx: Sender<(usize, Result<Message>)>,
    rx: Receiver<(usize, Result<Message>)>,
}

impl Default for Incoming {
    fn default() -> Self {
        let (tx, rx) = mpsc::channel();
        Self { tx, rx }
    }
}

impl Incoming {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&self, index: usize, mut reader: Box<dyn FrameReader>) {
        let tx = self.tx.clone();
        std::thread::Builder::new()
            .name(format!("reader-{index}"))
            .spawn(move || loop {
                let msg = reader.read_frame().and_then(|f| Message::decode(&f));
                let failed = msg.is_err();
                if tx.send((index, msg)).is_err() || failed {
                    break;
                }
            })
            .expect("spawn reader thread");
    }

    /// Next inbound message from any connection. `None` waits indefinitely.
    pub fn recv(&self, timeout: Option<Duration>) -> Result<(usize, Result<Message>)> {
        match timeout {
            None => self.rx.recv().map_err(|_| Error::Disconnected("all readers finished".into())),
            Some(t) => self.rx.recv_timeout(t).map_err(|e| match e {
                RecvTimeoutError::Timeout => Error::Timeout(format!("no message within {t:?}")),
                RecvTimeoutError::Disconnected => Error::Disconnected("all readers finished".into()),
            }),
        }
    }
}

use std::io::{BufReader, BufWriter, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{sync_channel, Receiver, RecvTimeoutError};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use super::wire::{write_frame, FrameReader};
use super::SessionError;
use crate::protocol::Frame;

/// Where the session pulls frames from.
pub trait FrameSource {
    /// `Ok(None)` once the stream is closed. [`SessionError::Underrun`] means
    /// nothing arrived in time but the source is still open.
    fn next_frame(&mut self) -> Result<Option<Frame>, SessionError>;
}

/// Replays in-memory frames. Without pacing, time advances only with the
/// sample count; with pacing, frames are released at the sampling rate.
pub struct ReplaySource<I> {
    frames: I,
    pace: Option<(f64, Instant)>,
}

impl<I: Iterator<Item = Frame>> ReplaySource<I> {
    pub fn new(frames: I) -> Self {
        ReplaySource { frames, pace: None }
    }

    pub fn paced(frames: I, fs: f64) -> Self {
        ReplaySource { frames, pace: Some((fs, Instant::now())) }
    }
}

impl<I: Iterator<Item = Frame>> FrameSource for ReplaySource<I> {
    fn next_frame(&mut self) -> Result<Option<Frame>, SessionError> {
        let frame = self.frames.next();
        if let (Some((fs, start)), Some(Frame::Data { first_index, samples })) = (self.pace, frame.as_ref()) {
            let due = Duration::from_secs_f64((*first_index + samples.ncols() as u64) as f64 / fs);
            if let Some(wait) = due.checked_sub(start.elapsed()) {
                std::thread::sleep(wait);
            }
        }
        Ok(frame)
    }
}

/// Frames read from a TCP peer by a producer thread and handed over through
/// a bounded channel.
pub struct TcpSource {
    rx: Receiver<Result<Frame, SessionError>>,
    timeout: Duration,
    _producer: JoinHandle<()>,
}

impl TcpSource {
    /// Connects to `addr`. `timeout` bounds both the connection attempt and
    /// the wait for each frame.
    pub fn connect(addr: &str, timeout: Duration) -> Result<Self, SessionError> {
        let target = addr
            .to_socket_addrs()
            .map_err(|e| SessionError::Unreachable(format!("{addr}: {e}")))?
            .next()
            .ok_or_else(|| SessionError::Unreachable(format!("{addr}: no address")))?;
        let stream = TcpStream::connect_timeout(&target, timeout)
            .map_err(|e| SessionError::Unreachable(format!("{addr}: {e}")))?;
        let (tx, rx) = sync_channel(256);
        let producer = std::thread::spawn(move || {
            let mut reader = FrameReader::new(BufReader::new(stream));
            loop {
                match reader.next_frame() {
                    Ok(Some(f)) => {
                        if tx.send(Ok(f)).is_err() {
                            return;
                        }
                    }
                    Ok(None) => return,
                    Err(e) => {
                        let _ = tx.send(Err(e));
                        return;
                    }
                }
            }
        });
        Ok(TcpSource { rx, timeout, _producer: producer })
    }
}

impl FrameSource for TcpSource {
    fn next_frame(&mut self) -> Result<Option<Frame>, SessionError> {
        match self.rx.recv_timeout(self.timeout) {
            Ok(r) => r.map(Some),
            Err(RecvTimeoutError::Timeout) => Err(SessionError::Underrun),
            Err(RecvTimeoutError::Disconnected) => Ok(None),
        }
    }
}

/// Accepts one connection on `listener` and writes every frame to it.
pub fn serve_frames<I: IntoIterator<Item = Frame>>(listener: &TcpListener, frames: I) -> Result<u64, SessionError> {
    let (stream, _) = listener.accept()?;
    let mut w = BufWriter::new(stream);
    let mut n = 0;
    for f in frames {
        write_frame(&mut w, &f)?;
        n += 1;
    }
    w.flush()?;
    Ok(n)
}

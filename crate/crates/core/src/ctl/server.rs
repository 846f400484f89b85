//! Transports for the control protocol: a plain stream (stdin, a script
//! file) and a TCP listener on localhost. All clients feed one queue, so
//! commands are executed one at a time in arrival order.

use std::io::{self, BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::thread;
use std::time::{Duration, Instant};

use super::{realtime_ticks, Session};

/// Runs every line of `input` and writes the replies to `out`. Stops after
/// `shutdown` or at end of input.
pub fn run_stream(session: &mut Session, input: impl BufRead, out: &mut impl Write) -> io::Result<()> {
    for line in input.lines() {
        if let Some(reply) = session.handle(&line?) {
            write!(out, "{reply}")?;
            out.flush()?;
        }
        if session.is_done() {
            break;
        }
    }
    Ok(())
}

/// One queued request and where to send its reply.
pub struct Request {
    pub line: String,
    pub reply_to: Sender<String>,
}

fn feed(input: impl BufRead, queue: Sender<Request>, mut out: impl Write) {
    let (tx, rx) = mpsc::channel();
    for line in input.lines() {
        let Ok(line) = line else { return };
        if queue.send(Request { line, reply_to: tx.clone() }).is_err() {
            return;
        }
        let Ok(reply) = rx.recv() else { return };
        if out.write_all(reply.as_bytes()).and_then(|_| out.flush()).is_err() {
            return;
        }
    }
}

/// Accepts connections on `127.0.0.1:port`; each connection gets a reader
/// thread that forwards its lines into `queue` and waits for each reply.
pub fn listen(port: u16, queue: Sender<Request>) -> io::Result<u16> {
    let listener = TcpListener::bind(("127.0.0.1", port))?;
    let bound = listener.local_addr()?.port();
    thread::spawn(move || {
        for conn in listener.incoming() {
            let Ok(conn) = conn else { continue };
            let q = queue.clone();
            thread::spawn(move || client(conn, q));
        }
    });
    Ok(bound)
}

fn client(conn: TcpStream, queue: Sender<Request>) {
    let Ok(write_half) = conn.try_clone() else { return };
    feed(BufReader::new(conn), queue, write_half);
}

/// Feeds stdin into `queue`, replying on stdout.
pub fn stdin_client(queue: Sender<Request>) {
    thread::spawn(move || feed(io::stdin().lock(), queue, io::stdout()));
}

/// Executes queued requests until `shutdown` or until every client is gone.
/// With `realtime`, simulated time also advances between commands at that
/// many simulated seconds per host second.
pub fn run_queue(session: &mut Session, queue: Receiver<Request>, realtime: Option<f64>) {
    let mut last = Instant::now();
    loop {
        let req = match realtime {
            None => match queue.recv() {
                Ok(r) => Some(r),
                Err(_) => return,
            },
            Some(_) => match queue.recv_timeout(Duration::from_millis(10)) {
                Ok(r) => Some(r),
                Err(RecvTimeoutError::Timeout) => None,
                Err(RecvTimeoutError::Disconnected) => return,
            },
        };
        if let Some(ratio) = realtime {
            let now = Instant::now();
            let dt = realtime_ticks(now - last, ratio);
            last = now;
            if let Some(k) = session.kernel_mut() {
                k.run(dt);
            }
        }
        let Some(req) = req else { continue };
        let text = session.handle(&req.line).map(|r| r.to_string()).unwrap_or_default();
        let _ = req.reply_to.send(text);
        if session.is_done() {
            return;
        }
    }
}

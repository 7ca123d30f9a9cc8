//! Thread-per-connection listeners with cooperative shutdown.

use std::io;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::os::unix::net::{UnixListener, UnixStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

const ACCEPT_POLL: Duration = Duration::from_millis(5);

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BoundAddr {
    Tcp(SocketAddr),
    Unix(PathBuf),
}

/// A running listener. Dropping the handle stops accepting and joins the
/// accept thread; connections already being served run to completion.
pub struct ServiceHandle {
    addr: BoundAddr,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl ServiceHandle {
    pub fn addr(&self) -> &BoundAddr {
        &self.addr
    }

    /// TCP address of the listener. Panics for Unix-socket services.
    pub fn local_addr(&self) -> SocketAddr {
        match &self.addr {
            BoundAddr::Tcp(a) => *a,
            BoundAddr::Unix(p) => panic!("service bound to unix socket {}", p.display()),
        }
    }

    pub fn stop_flag(&self) -> Arc<AtomicBool> {
        self.stop.clone()
    }

    pub fn shutdown(mut self) {
        self.stop_and_join();
    }

    /// Blocks until the stop flag is raised elsewhere.
    pub fn wait(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }

    fn stop_and_join(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
        if let BoundAddr::Unix(path) = &self.addr {
            let _ = std::fs::remove_file(path);
        }
    }
}

impl Drop for ServiceHandle {
    fn drop(&mut self) {
        self.stop_and_join();
    }
}

pub fn spawn_tcp<F>(listener: TcpListener, name: &str, handler: F) -> io::Result<ServiceHandle>
where
    F: Fn(TcpStream, SocketAddr) + Send + Sync + 'static,
{
    let addr = listener.local_addr()?;
    listener.set_nonblocking(true)?;
    let stop = Arc::new(AtomicBool::new(false));
    let handler = Arc::new(handler);
    let flag = stop.clone();
    let label = name.to_string();
    let thread = thread::Builder::new().name(name.to_string()).spawn(move || {
        while !flag.load(Ordering::SeqCst) {
            match listener.accept() {
                Ok((stream, peer)) => {
                    if stream.set_nonblocking(false).is_err() {
                        continue;
                    }
                    let _ = stream.set_nodelay(true);
                    let h = handler.clone();
                    let _ = thread::Builder::new()
                        .name(format!("{label}-conn"))
                        .spawn(move || h(stream, peer));
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(ACCEPT_POLL),
                Err(e) => {
                    log::warn!("{label}: accept failed: {e}");
                    thread::sleep(ACCEPT_POLL);
                }
            }
        }
    })?;
    Ok(ServiceHandle {
        addr: BoundAddr::Tcp(addr),
        stop,
        thread: Some(thread),
    })
}

pub fn spawn_unix<F>(listener: UnixListener, path: PathBuf, name: &str, handler: F) -> io::Result<ServiceHandle>
where
    F: Fn(UnixStream) + Send + Sync + 'static,
{
    listener.set_nonblocking(true)?;
    let stop = Arc::new(AtomicBool::new(false));
    let handler = Arc::new(handler);
    let flag = stop.clone();
    let label = name.to_string();
    let thread = thread::Builder::new().name(name.to_string()).spawn(move || {
        while !flag.load(Ordering::SeqCst) {
            match listener.accept() {
                Ok((stream, _)) => {
                    if stream.set_nonblocking(false).is_err() {
                        continue;
                    }
                    let h = handler.clone();
                    let _ = thread::Builder::new()
                        .name(format!("{label}-conn"))
                        .spawn(move || h(stream));
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(ACCEPT_POLL),
                Err(e) => {
                    log::warn!("{label}: accept failed: {e}");
                    thread::sleep(ACCEPT_POLL);
                }
            }
        }
    })?;
    Ok(ServiceHandle {
        addr: BoundAddr::Unix(path),
        stop,
        thread: Some(thread),
    })
}

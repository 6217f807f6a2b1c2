//! Event-descriptor interrupt delivery.
//!
//! One eventfd per vector is registered with the kernel; a listener thread
//! polls them and translates descriptor signals into interrupt events in a
//! thread-safe inbox. The inbox is the single cross-thread boundary of the
//! whole backend: a lossless FIFO drained from the simulation thread.

use std::collections::VecDeque;
use std::io;
use std::os::fd::{AsRawFd, FromRawFd, OwnedFd};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use crate::vpci::IrqKind;

/// Lossless FIFO carrying interrupt events from the listener thread to the
/// simulation thread.
#[derive(Default)]
pub struct IrqInbox {
    queue: Mutex<VecDeque<IrqKind>>,
}

impl IrqInbox {
    pub fn push(&self, kind: IrqKind) {
        self.queue.lock().unwrap().push_back(kind);
    }

    pub fn drain(&self) -> Vec<IrqKind> {
        self.queue.lock().unwrap().drain(..).collect()
    }

    pub fn len(&self) -> usize {
        self.queue.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn new_eventfd() -> io::Result<OwnedFd> {
    // Blocking reads are fine: only the poll loop reads, and only after
    // poll() reported the descriptor readable.
    let fd = unsafe { libc::eventfd(0, libc::EFD_CLOEXEC) };
    if fd < 0 {
        return Err(io::Error::last_os_error());
    }
    Ok(unsafe { OwnedFd::from_raw_fd(fd) })
}

/// Reads and resets an eventfd counter, returning how many signals were
/// coalesced into it.
fn read_eventfd(fd: libc::c_int) -> u64 {
    let mut value = 0u64;
    let ret = unsafe {
        libc::read(
            fd,
            &mut value as *mut u64 as *mut libc::c_void,
            std::mem::size_of::<u64>(),
        )
    };
    if ret == std::mem::size_of::<u64>() as isize {
        value
    } else {
        0
    }
}

/// Polls a set of event descriptors and forwards each signal to the inbox
/// as its vector's interrupt kind. Stops when the stop descriptor fires.
pub struct IrqListener {
    stop: OwnedFd,
    thread: Option<JoinHandle<()>>,
}

impl IrqListener {
    pub fn spawn(sources: Vec<(OwnedFd, IrqKind)>, inbox: Arc<IrqInbox>) -> io::Result<Self> {
        let stop = new_eventfd()?;
        let stop_raw = stop.as_raw_fd();
        let thread = std::thread::Builder::new()
            .name("vfio-irq".into())
            .spawn(move || listen(stop_raw, &sources, &inbox))?;
        Ok(IrqListener {
            stop,
            thread: Some(thread),
        })
    }
}

impl Drop for IrqListener {
    fn drop(&mut self) {
        let one = 1u64.to_ne_bytes();
        unsafe {
            libc::write(
                self.stop.as_raw_fd(),
                one.as_ptr() as *const libc::c_void,
                one.len(),
            );
        }
        if let Some(thread) = self.thread.take() {
            let _ = thread.join();
        }
    }
}

fn listen(stop: libc::c_int, sources: &[(OwnedFd, IrqKind)], inbox: &IrqInbox) {
    let mut fds: Vec<libc::pollfd> = std::iter::once(stop)
        .chain(sources.iter().map(|(fd, _)| fd.as_raw_fd()))
        .map(|fd| libc::pollfd {
            fd,
            events: libc::POLLIN,
            revents: 0,
        })
        .collect();
    loop {
        let ret = unsafe { libc::poll(fds.as_mut_ptr(), fds.len() as libc::nfds_t, -1) };
        if ret < 0 {
            let err = io::Error::last_os_error();
            if err.kind() == io::ErrorKind::Interrupted {
                continue;
            }
            return;
        }
        if fds[0].revents & libc::POLLIN != 0 {
            return;
        }
        for (slot, entry) in fds.iter().enumerate().skip(1) {
            if entry.revents & libc::POLLIN != 0 {
                let (_, kind) = &sources[slot - 1];
                // The eventfd counter tells us how many signals coalesced;
                // each one is a distinct device interrupt.
                let count = read_eventfd(entry.fd);
                for _ in 0..count {
                    inbox.push(*kind);
                }
            }
        }
    }
}

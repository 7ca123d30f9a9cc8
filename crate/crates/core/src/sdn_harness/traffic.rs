//! Traffic generator, sink and echo server attached to simulated ports.

use std::collections::HashSet;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use super::packet::{build_udp_frame, read_stamp, swap_endpoints, Endpoint, FrameError};
use super::switch::SwitchCommand;

const POLL: Duration = Duration::from_millis(20);

/// A host-facing switch port. Frames sent here enter the switch tagged
/// with `number`; frames the switch outputs on `number` arrive here.
pub struct SimPort {
    number: u16,
    to_switch: Sender<SwitchCommand>,
    from_switch: Receiver<Vec<u8>>,
}

impl SimPort {
    /// Returns the port and the egress sender to attach to the switch.
    pub fn new(number: u16, to_switch: Sender<SwitchCommand>) -> (SimPort, Sender<Vec<u8>>) {
        let (tx, rx) = mpsc::channel();
        (
            SimPort {
                number,
                to_switch,
                from_switch: rx,
            },
            tx,
        )
    }

    pub fn number(&self) -> u16 {
        self.number
    }

    pub fn send(&self, frame: Vec<u8>) -> bool {
        self.to_switch
            .send(SwitchCommand::Frame {
                in_port: self.number,
                frame,
            })
            .is_ok()
    }

    pub fn recv_timeout(&self, timeout: Duration) -> Option<Vec<u8>> {
        self.from_switch.recv_timeout(timeout).ok()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencySample {
    /// Whole frame, Ethernet header included.
    pub packet_size: usize,
    pub rtt_us: f64,
    pub sequence: u64,
    /// Send time relative to the start of the run.
    pub timestamp: Duration,
}

#[derive(Debug, Clone)]
pub struct GeneratorConfig {
    pub src: Endpoint,
    pub dst: Endpoint,
    pub size: usize,
    /// Packets per second; 0 sends back to back.
    pub rate_pps: u32,
    pub count: usize,
    /// How long to wait for stragglers after the last send.
    pub drain: Duration,
}

#[derive(Debug, Clone, Default)]
pub struct GeneratorReport {
    pub samples: Vec<LatencySample>,
    pub sent: usize,
    pub lost: usize,
    /// Echoes whose payload differed from what was sent.
    pub corrupted: usize,
    /// Time from the first to the last send.
    pub send_duration: Duration,
}

fn pace(start: Instant, i: usize, rate: u32) {
    if rate == 0 {
        return;
    }
    let target = start + Duration::from_secs_f64(i as f64 / rate as f64);
    loop {
        let now = Instant::now();
        if now >= target {
            return;
        }
        let left = target - now;
        if left > Duration::from_micros(200) {
            thread::sleep(left - Duration::from_micros(100));
        } else {
            thread::yield_now();
        }
    }
}

/// Sends `count` stamped frames through `port` and matches the echoes.
/// Lost packets are counted, never synthesized.
pub fn run_traffic_generator(port: &mut SimPort, config: &GeneratorConfig) -> Result<GeneratorReport, FrameError> {
    build_udp_frame(&config.src, &config.dst, config.size, 0, 0)?;
    let epoch = Instant::now();
    let done = AtomicBool::new(false);
    let sent = AtomicU64::new(0);
    let number = port.number;
    let to_switch = &port.to_switch;
    let from_switch = &mut port.from_switch;

    let (samples, corrupted, send_duration) = thread::scope(|scope| {
        let (done, sent) = (&done, &sent);
        let sink = scope.spawn(move || {
            let mut seen = HashSet::new();
            let mut samples = Vec::with_capacity(config.count);
            let mut corrupted = 0usize;
            let mut drain_until: Option<Instant> = None;
            loop {
                if done.load(Ordering::Acquire) {
                    let until = *drain_until.get_or_insert_with(|| Instant::now() + config.drain);
                    if seen.len() as u64 >= sent.load(Ordering::Acquire) || Instant::now() >= until {
                        break;
                    }
                }
                let frame = match from_switch.recv_timeout(POLL) {
                    Ok(f) => f,
                    Err(RecvTimeoutError::Timeout) => continue,
                    Err(RecvTimeoutError::Disconnected) => break,
                };
                let now = epoch.elapsed().as_nanos() as u64;
                let Ok((seq, sent_ns, intact)) = read_stamp(&frame) else {
                    continue;
                };
                if !intact || frame.len() != config.size {
                    corrupted += 1;
                    continue;
                }
                if seq as usize >= config.count || !seen.insert(seq) {
                    continue;
                }
                samples.push(LatencySample {
                    packet_size: frame.len(),
                    rtt_us: (now.saturating_sub(sent_ns)).max(1) as f64 / 1000.0,
                    sequence: seq,
                    timestamp: Duration::from_nanos(sent_ns),
                });
            }
            (samples, corrupted)
        });

        let start = Instant::now();
        for i in 0..config.count {
            pace(start, i, config.rate_pps);
            let ts = epoch.elapsed().as_nanos() as u64;
            let frame = build_udp_frame(&config.src, &config.dst, config.size, i as u64, ts).expect("validated size");
            let cmd = SwitchCommand::Frame { in_port: number, frame };
            if to_switch.send(cmd).is_err() {
                break;
            }
            sent.fetch_add(1, Ordering::Release);
        }
        let send_duration = start.elapsed();
        done.store(true, Ordering::Release);
        let (samples, corrupted) = sink.join().expect("sink thread");
        (samples, corrupted, send_duration)
    });

    let sent = sent.into_inner() as usize;
    Ok(GeneratorReport {
        lost: sent - samples.len(),
        samples,
        sent,
        corrupted,
        send_duration,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EchoStats {
    pub echoed: u64,
    pub ignored: u64,
}

/// Reflects every UDP frame arriving on `port` back to its sender until
/// `stop` is raised or the switch goes away.
pub fn run_echo_server(port: SimPort, stop: Arc<AtomicBool>) -> JoinHandle<EchoStats> {
    thread::Builder::new()
        .name("echo".into())
        .spawn(move || {
            let mut stats = EchoStats::default();
            while !stop.load(Ordering::Relaxed) {
                let mut frame = match port.from_switch.recv_timeout(POLL) {
                    Ok(f) => f,
                    Err(RecvTimeoutError::Timeout) => continue,
                    Err(RecvTimeoutError::Disconnected) => break,
                };
                if swap_endpoints(&mut frame).is_err() {
                    stats.ignored += 1;
                    continue;
                }
                if !port.send(frame) {
                    break;
                }
                stats.echoed += 1;
            }
            stats
        })
        .expect("spawn echo thread")
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

    /// Stands in for the switch: frames from port 1 go to port 2 and back.
    fn wire(cmds: Receiver<SwitchCommand>, p1: Sender<Vec<u8>>, p2: Sender<Vec<u8>>, drop_every: u64) -> JoinHandle<()> {
        thread::spawn(move || {
            let mut n = 0u64;
            while let Ok(cmd) = cmds.recv() {
                if let SwitchCommand::Frame { in_port, frame } = cmd {
                    n += 1;
                    if drop_every > 0 && in_port == 1 && n.is_multiple_of(drop_every) {
                        continue;
                    }
                    let _ = if in_port == 1 { p2.send(frame) } else { p1.send(frame) };
                }
            }
        })
    }

    fn config(size: usize, rate: u32, count: usize) -> GeneratorConfig {
        let (src, dst) = hosts();
        GeneratorConfig {
            src,
            dst,
            size,
            rate_pps: rate,
            count,
            drain: Duration::from_millis(200),
        }
    }

    #[test]
    fn loopback_echo_and_pacing() {
        let (tx, rx) = mpsc::channel();
        let (mut gen_port, e1) = SimPort::new(1, tx.clone());
        let (echo_port, e2) = SimPort::new(2, tx);
        let w = wire(rx, e1, e2, 0);
        let stop = Arc::new(AtomicBool::new(false));
        let echo = run_echo_server(echo_port, stop.clone());
        let report = run_traffic_generator(&mut gen_port, &config(128, 500, 100)).unwrap();
        assert_eq!(report.samples.len(), 100);
        assert_eq!((report.lost, report.corrupted), (0, 0));
        assert!(report.samples.iter().all(|s| s.rtt_us > 0.0 && s.packet_size == 128));
        // 99 inter-packet gaps at 2 ms.
        let ms = report.send_duration.as_secs_f64() * 1000.0;
        assert!((195.0..400.0).contains(&ms), "send duration {ms} ms");
        stop.store(true, Ordering::Relaxed);
        assert_eq!(echo.join().unwrap().echoed, 100);
        drop(gen_port);
        w.join().unwrap();
    }

    #[test]
    fn losses_are_counted() {
        let (tx, rx) = mpsc::channel();
        let (mut gen_port, e1) = SimPort::new(1, tx.clone());
        let (echo_port, e2) = SimPort::new(2, tx);
        let _w = wire(rx, e1, e2, 10);
        let stop = Arc::new(AtomicBool::new(false));
        let _echo = run_echo_server(echo_port, stop.clone());
        let report = run_traffic_generator(&mut gen_port, &config(64, 0, 100)).unwrap();
        assert!(report.lost > 0);
        assert_eq!(report.samples.len() + report.lost, 100);
        stop.store(true, Ordering::Relaxed);
    }

    #[test]
    fn payload_must_hold_stamp() {
        let (tx, _rx) = mpsc::channel();
        let (mut port, _) = SimPort::new(1, tx);
        assert!(matches!(
            run_traffic_generator(&mut port, &config(50, 0, 1)),
            Err(FrameError::TooSmall { .. })
        ));
    }
}

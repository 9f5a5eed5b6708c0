//! Teleoperation service: one session at a time over WebSocket or
//! newline-delimited JSON on plain TCP (detected from the first byte).
//!
//! The client opens with `hello`, then `start`s episodes and streams
//! `command`s. The latest command is held in a mailbox and consumed at the
//! next agent step, which fires on a timer or, in lockstep mode, once per
//! received command.

use std::collections::VecDeque;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::time::{Duration, Instant};

use bucketrl_core::episode::{Episode, EpisodeConfig, Outcome, Source, Trajectory};
use bucketrl_core::primitive::{NormalizedAction, ACTION_DIM};
use bucketrl_core::terrain::TerrainKind;
use serde::{Deserialize, Serialize};
use tungstenite::WebSocket;

use crate::config::{TeleopConfig, TerrainPresets};
use crate::json;

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Message {
    Hello {
        version: u32,
    },
    Start {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        terrain: Option<TerrainKind>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
    State(StateMessage),
    Command {
        a: Vec<f64>,
    },
    End {
        outcome: Outcome,
        reward_sum: f64,
    },
    Reset,
    Error {
        msg: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateMessage {
    pub step: usize,
    pub pose: [f64; 3],
    pub vel: [f64; 3],
    pub force: [f64; 3],
    pub depth: f64,
    pub reward_sum: f64,
    pub clamped: bool,
    pub done: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome: Option<Outcome>,
}

impl Message {
    pub fn to_wire(&self) -> String {
        json::to_wire(self).expect("messages serialize")
    }

    fn error(msg: impl Into<String>) -> Message {
        Message::Error { msg: msg.into() }
    }
}

/// Output of the session state machine.
#[derive(Debug, Clone, PartialEq)]
pub enum Event {
    Send(Message),
    Record(Trajectory),
}

struct Active {
    episode: Episode,
    terrain: TerrainKind,
    seed: u64,
    held: Option<NormalizedAction>,
    clamped: bool,
}

/// Protocol logic without any IO.
pub struct Session {
    presets: TerrainPresets,
    episode_cfg: EpisodeConfig,
    terrain: TerrainKind,
    seed: u64,
    lockstep: bool,
    greeted: bool,
    active: Option<Active>,
}

impl Session {
    pub fn new(cfg: &ServerConfig) -> Self {
        Session {
            presets: cfg.presets.clone(),
            episode_cfg: cfg.episode,
            terrain: cfg.terrain,
            seed: cfg.seed,
            lockstep: cfg.teleop.lockstep,
            greeted: false,
            active: None,
        }
    }

    /// An episode is running and has a command to execute.
    pub fn wants_tick(&self) -> bool {
        self.active.as_ref().is_some_and(|a| a.held.is_some())
    }

    pub fn in_episode(&self) -> bool {
        self.active.is_some()
    }

    /// Drops the running episode without recording it.
    pub fn abandon(&mut self) {
        self.active = None;
    }

    pub fn handle(&mut self, text: &str) -> Vec<Event> {
        let msg: Message = match serde_json::from_str(text) {
            Ok(m) => m,
            Err(e) => return vec![Event::Send(Message::error(format!("malformed message: {e}")))],
        };
        match msg {
            Message::Hello { version } if version == PROTOCOL_VERSION => {
                self.greeted = true;
                vec![Event::Send(Message::Hello { version: PROTOCOL_VERSION })]
            }
            Message::Hello { version } => {
                vec![Event::Send(Message::error(format!("unsupported protocol version {version}")))]
            }
            _ if !self.greeted => vec![Event::Send(Message::error("send hello first"))],
            Message::Start { terrain, seed } => self.start(terrain.unwrap_or(self.terrain), seed.unwrap_or(self.seed)),
            Message::Reset => match &self.active {
                Some(a) => self.start(a.terrain, a.seed),
                None => vec![Event::Send(Message::error("no episode to reset"))],
            },
            Message::Command { a } => self.command(&a),
            Message::State(_) | Message::End { .. } | Message::Error { .. } => {
                vec![Event::Send(Message::error("unexpected message kind from client"))]
            }
        }
    }

    fn start(&mut self, terrain: TerrainKind, seed: u64) -> Vec<Event> {
        self.active = None;
        match Episode::new(&self.presets.get(terrain), seed, &self.episode_cfg) {
            Ok(episode) => {
                let a = Active { episode, terrain, seed, held: None, clamped: false };
                let state = state_of(&a);
                self.active = Some(a);
                vec![Event::Send(Message::State(state))]
            }
            Err(e) => vec![Event::Send(Message::error(format!("cannot start episode: {e}")))],
        }
    }

    fn command(&mut self, a: &[f64]) -> Vec<Event> {
        let Some(active) = self.active.as_mut() else {
            return vec![Event::Send(Message::error("no episode running; send start"))];
        };
        let Ok(arr) = <[f64; ACTION_DIM]>::try_from(a) else {
            return vec![Event::Send(Message::error(format!("command needs {ACTION_DIM} values, got {}", a.len())))];
        };
        let (action, clamped) = NormalizedAction::clamped(arr);
        active.held = Some(action);
        active.clamped = clamped;
        if self.lockstep {
            self.tick()
        } else {
            Vec::new()
        }
    }

    /// Executes the held command for one agent step.
    pub fn tick(&mut self) -> Vec<Event> {
        let Some(active) = self.active.as_mut() else { return Vec::new() };
        let Some(action) = active.held else { return Vec::new() };
        let record = match active.episode.step(action) {
            Ok(r) => r,
            Err(e) => {
                self.active = None;
                return vec![Event::Send(Message::error(format!("episode aborted: {e}")))];
            }
        };
        let state = state_of(active);
        let Some(outcome) = record.done else {
            return vec![Event::Send(Message::State(state))];
        };
        let active = self.active.take().unwrap();
        let reward_sum = active.episode.reward_sum();
        vec![
            Event::Send(Message::State(state)),
            Event::Send(Message::End { outcome, reward_sum }),
            Event::Record(active.episode.into_trajectory(Source::Teleop)),
        ]
    }
}

fn state_of(a: &Active) -> StateMessage {
    let ep = &a.episode;
    let b = ep.bucket();
    let c = ep.context();
    StateMessage {
        step: ep.steps(),
        pose: [b.x, b.z, b.pitch],
        vel: [c[3], c[4], c[5]],
        force: [c[6], c[7], c[8]],
        depth: ep.depth(),
        reward_sum: ep.reward_sum(),
        clamped: a.clamped,
        done: ep.outcome().is_some(),
        outcome: ep.outcome(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerConfig {
    pub terrain: TerrainKind,
    pub seed: u64,
    pub episode: EpisodeConfig,
    pub presets: TerrainPresets,
    pub teleop: TeleopConfig,
}

enum Received {
    Text(String),
    Timeout,
    Closed,
}

trait Transport {
    fn send(&mut self, text: &str) -> io::Result<()>;
    fn recv(&mut self, timeout: Option<Duration>) -> io::Result<Received>;
}

fn is_timeout(e: &io::Error) -> bool {
    matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut)
}

fn clamp_timeout(t: Option<Duration>) -> Option<Duration> {
    t.map(|d| d.max(Duration::from_millis(1)))
}

struct LineTransport {
    stream: TcpStream,
    buf: Vec<u8>,
}

impl Transport for LineTransport {
    fn send(&mut self, text: &str) -> io::Result<()> {
        let mut frame = Vec::with_capacity(text.len() + 1);
        frame.extend_from_slice(text.as_bytes());
        frame.push(b'\n');
        self.stream.write_all(&frame)
    }

    fn recv(&mut self, timeout: Option<Duration>) -> io::Result<Received> {
        loop {
            if let Some(p) = self.buf.iter().position(|b| *b == b'\n') {
                let line: Vec<u8> = self.buf.drain(..=p).collect();
                let text = String::from_utf8_lossy(&line).trim().to_string();
                if text.is_empty() {
                    continue;
                }
                return Ok(Received::Text(text));
            }
            self.stream.set_read_timeout(clamp_timeout(timeout))?;
            let mut chunk = [0u8; 4096];
            match self.stream.read(&mut chunk) {
                Ok(0) => return Ok(Received::Closed),
                Ok(n) => self.buf.extend_from_slice(&chunk[..n]),
                Err(e) if is_timeout(&e) => return Ok(Received::Timeout),
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) if e.kind() == io::ErrorKind::ConnectionReset => return Ok(Received::Closed),
                Err(e) => return Err(e),
            }
        }
    }
}

struct WsTransport {
    ws: WebSocket<TcpStream>,
    pending: VecDeque<String>,
}

impl Transport for WsTransport {
    fn send(&mut self, text: &str) -> io::Result<()> {
        self.ws.send(tungstenite::Message::Text(text.to_string())).map_err(ws_io)
    }

    fn recv(&mut self, timeout: Option<Duration>) -> io::Result<Received> {
        use tungstenite::Message as M;
        loop {
            if let Some(t) = self.pending.pop_front() {
                return Ok(Received::Text(t));
            }
            self.ws.get_mut().set_read_timeout(clamp_timeout(timeout))?;
            let text = match self.ws.read() {
                Ok(M::Text(t)) => t,
                Ok(M::Binary(b)) => String::from_utf8_lossy(&b).into_owned(),
                Ok(M::Close(_)) => return Ok(Received::Closed),
                Ok(_) => continue,
                Err(tungstenite::Error::Io(e)) if is_timeout(&e) => return Ok(Received::Timeout),
                Err(
                    tungstenite::Error::ConnectionClosed
                    | tungstenite::Error::AlreadyClosed
                    | tungstenite::Error::Protocol(_),
                ) => return Ok(Received::Closed),
                Err(e) => return Err(ws_io(e)),
            };
            self.pending.extend(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from));
        }
    }
}

fn ws_io(e: tungstenite::Error) -> io::Error {
    match e {
        tungstenite::Error::Io(e) => e,
        other => io::Error::other(other.to_string()),
    }
}

fn open_transport(stream: TcpStream) -> io::Result<Box<dyn Transport>> {
    stream.set_nodelay(true)?;
    stream.set_read_timeout(None)?;
    let mut first = [0u8; 1];
    if stream.peek(&mut first)? == 0 {
        return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "client closed before sending anything"));
    }
    if first[0] == b'G' {
        let ws = tungstenite::accept(stream).map_err(|e| io::Error::other(e.to_string()))?;
        Ok(Box::new(WsTransport { ws, pending: VecDeque::new() }))
    } else {
        Ok(Box::new(LineTransport { stream, buf: Vec::new() }))
    }
}

/// Runs one client connection to completion, passing finished episodes to
/// `sink`.
pub fn run_connection(
    stream: TcpStream,
    cfg: &ServerConfig,
    sink: &mut dyn FnMut(Trajectory) -> io::Result<()>,
) -> io::Result<()> {
    let mut t = open_transport(stream)?;
    let mut session = Session::new(cfg);
    let period = Duration::from_millis(cfg.teleop.step_period_ms.max(1));
    let timed = !cfg.teleop.lockstep;
    let mut next_tick: Option<Instant> = None;
    loop {
        let timeout = match next_tick {
            Some(at) if timed && session.wants_tick() => Some(at.saturating_duration_since(Instant::now())),
            _ => None,
        };
        let mut events = match t.recv(timeout)? {
            Received::Text(s) => session.handle(&s),
            Received::Timeout => Vec::new(),
            Received::Closed => {
                session.abandon();
                return Ok(());
            }
        };
        if timed && session.wants_tick() {
            let now = Instant::now();
            match next_tick {
                Some(at) if now >= at => {
                    events.extend(session.tick());
                    next_tick = Some(at + period);
                }
                Some(_) => {}
                None => next_tick = Some(now + period),
            }
        }
        if !session.in_episode() {
            next_tick = None;
        }
        for ev in events {
            match ev {
                Event::Send(m) => t.send(&m.to_wire())?,
                Event::Record(traj) => sink(traj)?,
            }
        }
    }
}

/// Accepts clients one after another; stops after `max_sessions` when set.
pub fn serve(
    listener: &TcpListener,
    cfg: &ServerConfig,
    max_sessions: Option<usize>,
    sink: &mut dyn FnMut(Trajectory) -> io::Result<()>,
) -> io::Result<()> {
    let mut served = 0;
    for stream in listener.incoming() {
        let stream = stream?;
        if let Err(e) = run_connection(stream, cfg, sink) {
            eprintln!("teleop session ended with error: {e}");
        }
        served += 1;
        if max_sessions.is_some_and(|m| served >= m) {
            break;
        }
    }
    Ok(())
}

/// Minimal newline-JSON client, used by tests and scripted operators.
pub struct LineClient {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl LineClient {
    pub fn connect(addr: impl ToSocketAddrs) -> io::Result<Self> {
        let writer = TcpStream::connect(addr)?;
        writer.set_nodelay(true)?;
        Ok(LineClient { reader: BufReader::new(writer.try_clone()?), writer })
    }

    pub fn send(&mut self, m: &Message) -> io::Result<()> {
        self.send_raw(&m.to_wire())
    }

    pub fn send_raw(&mut self, line: &str) -> io::Result<()> {
        self.writer.write_all(format!("{line}\n").as_bytes())
    }

    pub fn recv(&mut self) -> io::Result<Message> {
        let mut line = String::new();
        if self.reader.read_line(&mut line)? == 0 {
            return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "server closed the connection"));
        }
        serde_json::from_str(&line).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn session(lockstep: bool) -> Session {
        Session::new(&ServerConfig {
            terrain: TerrainKind::Sand,
            seed: 7,
            episode: EpisodeConfig::default(),
            presets: TerrainPresets::builtin(),
            teleop: TeleopConfig { lockstep, step_period_ms: 100 },
        })
    }

    fn sent(evs: &[Event]) -> Vec<&Message> {
        evs.iter().filter_map(|e| if let Event::Send(m) = e { Some(m) } else { None }).collect()
    }

    #[test]
    fn wire_format_matches_protocol() {
        assert_eq!(Message::Hello { version: 1 }.to_wire(), r#"{"kind":"hello","version":1}"#);
        let start: Message = serde_json::from_str(r#"{"kind":"start","terrain":"sand","seed":7}"#).unwrap();
        assert_eq!(start, Message::Start { terrain: Some(TerrainKind::Sand), seed: Some(7) });
        assert_eq!(serde_json::from_str::<Message>(r#"{"kind":"reset"}"#).unwrap(), Message::Reset);
        let end = Message::End { outcome: Outcome::Timeout, reward_sum: -1.5 }.to_wire();
        assert_eq!(end, r#"{"kind":"end","outcome":"timeout","reward_sum":-1.5}"#);
    }

    #[test]
    fn hello_is_required_first() {
        let mut s = session(true);
        let out = s.handle(r#"{"kind":"start"}"#);
        assert!(matches!(sent(&out)[0], Message::Error { .. }));
        assert_eq!(sent(&s.handle(r#"{"kind":"hello","version":1}"#))[0], &Message::Hello { version: 1 });
        assert!(matches!(sent(&s.handle(r#"{"kind":"start"}"#))[0], Message::State(StateMessage { step: 0, .. })));
    }

    #[test]
    fn malformed_and_bad_commands_keep_session_alive() {
        let mut s = session(true);
        s.handle(r#"{"kind":"hello","version":1}"#);
        assert!(matches!(sent(&s.handle("{not json"))[0], Message::Error { .. }));
        assert!(matches!(sent(&s.handle(r#"{"kind":"command","a":[0,0,0,0,0,0,0,0]}"#))[0], Message::Error { .. }));
        s.handle(r#"{"kind":"start"}"#);
        assert!(matches!(sent(&s.handle(r#"{"kind":"command","a":[0,0]}"#))[0], Message::Error { .. }));
        let out = s.handle(r#"{"kind":"command","a":[3,0,0,0,0,0,0,0]}"#);
        match sent(&out)[0] {
            Message::State(st) => assert!(st.clamped && st.step == 1),
            m => panic!("unexpected {m:?}"),
        }
    }

    #[test]
    fn timed_mode_waits_for_tick() {
        let mut s = session(false);
        s.handle(r#"{"kind":"hello","version":1}"#);
        s.handle(r#"{"kind":"start"}"#);
        assert!(!s.wants_tick());
        assert!(s.handle(r#"{"kind":"command","a":[0,0,0,0,0,0,0,0]}"#).is_empty());
        assert!(s.wants_tick());
        assert!(matches!(sent(&s.tick())[0], Message::State(StateMessage { step: 1, .. })));
    }

    #[test]
    fn zero_command_runs_to_timeout() {
        let mut s = session(false);
        s.handle(r#"{"kind":"hello","version":1}"#);
        s.handle(r#"{"kind":"start"}"#);
        s.handle(r#"{"kind":"command","a":[0,0,0,0,0,0,0,0]}"#);
        let mut last = Vec::new();
        for step in 1..=150 {
            last = s.tick();
            if step < 150 {
                assert_eq!(last.len(), 1);
            }
        }
        assert!(!s.in_episode());
        match (&last[1], &last[2]) {
            (Event::Send(Message::End { outcome, .. }), Event::Record(t)) => {
                assert_eq!(*outcome, Outcome::Timeout);
                assert_eq!(t.len(), 150);
                assert_eq!(t.source, Source::Teleop);
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}

//! Line-oriented ASCII protocol between the scan host and the motion
//! controller, and a simulated controller that speaks it.
//!
//! ```text
//! host -> device            device -> host
//! HOME\n                    OK\n | ERR <code>\n
//! MOVE <daz> <del>\n        OK\n | ERR <code>\n
//! POS?\n                    POS <az> <el>\n | ERR <code>\n
//! LIM?\n                    LIM <az_min 0|1> <el_min 0|1>\n
//! STOP\n                    OK\n
//! ```
//!
//! | code | meaning                       |
//! |------|-------------------------------|
//! | 1    | unknown keyword               |
//! | 2    | malformed integer / framing   |
//! | 3    | wrong argument count          |
//! | 4    | limit switch struck           |
//! | 5    | not homed                     |

use std::collections::VecDeque;
use std::io::{self, Read, Write};

use crate::rotor::{home_step, homing_backoff_steps, Axis, HomingPhase, RotorConfig, RotorState};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Home,
    Move { az_steps: i32, el_steps: i32 },
    Pos,
    Lim,
    Stop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Response {
    Ok,
    Err(ErrorCode),
    Pos { az_steps: i64, el_steps: i64 },
    Lim { az_min: bool, el_min: bool },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum ErrorCode {
    UnknownKeyword = 1,
    Malformed = 2,
    Arity = 3,
    LimitStrike = 4,
    NotHomed = 5,
}

impl ErrorCode {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            1 => Self::UnknownKeyword,
            2 => Self::Malformed,
            3 => Self::Arity,
            4 => Self::LimitStrike,
            5 => Self::NotHomed,
            _ => return None,
        })
    }
}

impl std::fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let what = match self {
            Self::UnknownKeyword => "unknown keyword",
            Self::Malformed => "malformed line",
            Self::Arity => "wrong argument count",
            Self::LimitStrike => "limit switch struck",
            Self::NotHomed => "not homed",
        };
        write!(f, "ERR {} ({what})", self.code())
    }
}

/// Encodes a command as a single LF-terminated ASCII line.
pub fn encode_command(cmd: &Command) -> Vec<u8> {
    match cmd {
        Command::Home => b"HOME\n".to_vec(),
        Command::Move { az_steps, el_steps } => format!("MOVE {az_steps} {el_steps}\n").into_bytes(),
        Command::Pos => b"POS?\n".to_vec(),
        Command::Lim => b"LIM?\n".to_vec(),
        Command::Stop => b"STOP\n".to_vec(),
    }
}

pub fn encode_response(resp: &Response) -> Vec<u8> {
    match resp {
        Response::Ok => b"OK\n".to_vec(),
        Response::Err(code) => format!("ERR {}\n", code.code()).into_bytes(),
        Response::Pos { az_steps, el_steps } => format!("POS {az_steps} {el_steps}\n").into_bytes(),
        Response::Lim { az_min, el_min } => {
            format!("LIM {} {}\n", u8::from(*az_min), u8::from(*el_min)).into_bytes()
        }
    }
}

/// Splits off the line terminator (LF, optionally preceded by CR) and
/// tokenizes on single spaces. Anything after the LF is garbage.
fn tokenize(line: &[u8]) -> Result<Vec<&str>, ErrorCode> {
    let body = match line.iter().position(|&b| b == b'\n') {
        Some(i) if i + 1 == line.len() => &line[..i],
        Some(_) => return Err(ErrorCode::Malformed),
        None => line,
    };
    let body = body.strip_suffix(b"\r").unwrap_or(body);
    let text = std::str::from_utf8(body).map_err(|_| ErrorCode::Malformed)?;
    if !text.is_ascii() || text.is_empty() {
        return Err(ErrorCode::Malformed);
    }
    let tokens: Vec<&str> = text.split(' ').collect();
    if tokens.iter().any(|t| t.is_empty()) {
        return Err(ErrorCode::Malformed);
    }
    Ok(tokens)
}

fn parse_int<T: std::str::FromStr>(tok: &str) -> Result<T, ErrorCode> {
    let digits = tok.strip_prefix('-').unwrap_or(tok);
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return Err(ErrorCode::Malformed);
    }
    tok.parse().map_err(|_| ErrorCode::Malformed)
}

fn expect_args(tokens: &[&str], n: usize) -> Result<(), ErrorCode> {
    if tokens.len() - 1 == n {
        Ok(())
    } else {
        Err(ErrorCode::Arity)
    }
}

pub fn parse_command(line: &[u8]) -> Result<Command, ErrorCode> {
    let tokens = tokenize(line)?;
    let cmd = match tokens[0] {
        "HOME" => Command::Home,
        "MOVE" => {
            expect_args(&tokens, 2)?;
            return Ok(Command::Move {
                az_steps: parse_int(tokens[1])?,
                el_steps: parse_int(tokens[2])?,
            });
        }
        "POS?" => Command::Pos,
        "LIM?" => Command::Lim,
        "STOP" => Command::Stop,
        _ => return Err(ErrorCode::UnknownKeyword),
    };
    expect_args(&tokens, 0)?;
    Ok(cmd)
}

fn parse_flag(tok: &str) -> Result<bool, ErrorCode> {
    match tok {
        "0" => Ok(false),
        "1" => Ok(true),
        _ => Err(ErrorCode::Malformed),
    }
}

pub fn parse_response(line: &[u8]) -> Result<Response, ErrorCode> {
    let tokens = tokenize(line)?;
    let resp = match tokens[0] {
        "OK" => Response::Ok,
        "ERR" => {
            expect_args(&tokens, 1)?;
            let code: u8 = parse_int(tokens[1])?;
            return ErrorCode::from_code(code)
                .map(Response::Err)
                .ok_or(ErrorCode::Malformed);
        }
        "POS" => {
            expect_args(&tokens, 2)?;
            return Ok(Response::Pos {
                az_steps: parse_int(tokens[1])?,
                el_steps: parse_int(tokens[2])?,
            });
        }
        "LIM" => {
            expect_args(&tokens, 2)?;
            return Ok(Response::Lim {
                az_min: parse_flag(tokens[1])?,
                el_min: parse_flag(tokens[2])?,
            });
        }
        _ => return Err(ErrorCode::UnknownKeyword),
    };
    expect_args(&tokens, 0)?;
    Ok(resp)
}

/// Simulated motion controller: two steppers with minimum and maximum limit
/// switches at the configured travel ends.
#[derive(Debug, Clone)]
pub struct SimDevice {
    config: RotorConfig,
    state: RotorState,
    /// Mechanical position in steps above each minimum switch.
    physical: [i64; 2],
    span: [i64; 2],
}

/// Homing gives up after this many state-machine transitions.
const MAX_HOMING_TRANSITIONS: usize = 100_000;

impl SimDevice {
    /// Device powered up with the mechanism parked mid-travel.
    pub fn new(config: RotorConfig) -> Self {
        let span = [
            config.max_steps(Axis::Az) - config.min_steps(Axis::Az),
            config.max_steps(Axis::El) - config.min_steps(Axis::El),
        ];
        Self {
            physical: [span[0] / 2, span[1] / 2],
            config,
            state: RotorState::default(),
            span,
        }
    }

    /// Overrides the power-up mechanical position (steps above each switch).
    pub fn with_physical_offset(mut self, az: i64, el: i64) -> Self {
        self.physical = [az.clamp(0, self.span[0]), el.clamp(0, self.span[1])];
        self
    }

    pub fn state(&self) -> &RotorState {
        &self.state
    }

    fn switches(&self) -> (bool, bool) {
        (self.physical[0] <= 0, self.physical[1] <= 0)
    }

    fn drive_toward_min(&mut self, az: i64, el: i64) {
        self.physical[0] = (self.physical[0] - az).max(0);
        self.physical[1] = (self.physical[1] - el).max(0);
    }

    fn home(&mut self) -> Response {
        let fast = [
            (self.config.steps_per_rev(Axis::Az) / 360.0).ceil() as i64,
            (self.config.steps_per_rev(Axis::El) / 360.0).ceil() as i64,
        ];
        let slow = [(fast[0] / 10).max(1), (fast[1] / 10).max(1)];
        let backoff = [
            homing_backoff_steps(&self.config, Axis::Az),
            homing_backoff_steps(&self.config, Axis::El),
        ];
        let mut state = RotorState::default();
        state = home_step(&self.config, state, false);
        for _ in 0..MAX_HOMING_TRANSITIONS {
            let hit = match state.phase {
                HomingPhase::SeekingFast => {
                    self.drive_toward_min(fast[0], fast[1]);
                    self.switches() == (true, true)
                }
                HomingPhase::BackingOff => {
                    self.physical[0] = (self.physical[0] + backoff[0]).min(self.span[0]);
                    self.physical[1] = (self.physical[1] + backoff[1]).min(self.span[1]);
                    let (a, e) = self.switches();
                    a || e
                }
                HomingPhase::SeekingSlow => {
                    self.drive_toward_min(slow[0], slow[1]);
                    self.switches() == (true, true)
                }
                HomingPhase::Zeroed => {
                    self.state = state;
                    return Response::Ok;
                }
                HomingPhase::Idle | HomingPhase::Fault => break,
            };
            state = home_step(&self.config, state, hit);
        }
        self.state = RotorState {
            phase: HomingPhase::Fault,
            homed: false,
            ..state
        };
        Response::Err(ErrorCode::LimitStrike)
    }

    fn apply_move(&mut self, daz: i32, del: i32) -> Response {
        if !self.state.homed {
            return Response::Err(ErrorCode::NotHomed);
        }
        let mut struck = false;
        for (slot, delta) in [(0usize, i64::from(daz)), (1, i64::from(del))] {
            let target = self.physical[slot] + delta;
            let clamped = target.clamp(0, self.span[slot]);
            struck |= clamped != target;
            self.physical[slot] = clamped;
        }
        self.state.az_steps = self.config.min_steps(Axis::Az) + self.physical[0];
        self.state.el_steps = self.config.min_steps(Axis::El) + self.physical[1];
        if struck {
            Response::Err(ErrorCode::LimitStrike)
        } else {
            Response::Ok
        }
    }

    pub fn apply(&mut self, cmd: &Command) -> Response {
        match *cmd {
            Command::Home => self.home(),
            Command::Move { az_steps, el_steps } => self.apply_move(az_steps, el_steps),
            Command::Pos => {
                if self.state.homed {
                    Response::Pos {
                        az_steps: self.state.az_steps,
                        el_steps: self.state.el_steps,
                    }
                } else {
                    Response::Err(ErrorCode::NotHomed)
                }
            }
            Command::Lim => {
                let (az_min, el_min) = self.switches();
                Response::Lim { az_min, el_min }
            }
            Command::Stop => Response::Ok,
        }
    }
}

/// Free-function form of [`SimDevice::apply`].
pub fn device_apply(device: &mut SimDevice, cmd: &Command) -> Response {
    device.apply(cmd)
}

/// Byte-level port onto a [`SimDevice`]: writes are parsed line by line,
/// responses queue up for reading.
#[derive(Debug)]
pub struct SimPort {
    device: SimDevice,
    inbound: Vec<u8>,
    outbound: VecDeque<u8>,
}

impl SimPort {
    pub fn new(device: SimDevice) -> Self {
        Self {
            device,
            inbound: Vec::new(),
            outbound: VecDeque::new(),
        }
    }

    pub fn device(&self) -> &SimDevice {
        &self.device
    }
}

impl Write for SimPort {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        for &b in buf {
            self.inbound.push(b);
            if b == b'\n' {
                let line = std::mem::take(&mut self.inbound);
                let resp = match parse_command(&line) {
                    Ok(cmd) => self.device.apply(&cmd),
                    Err(code) => Response::Err(code),
                };
                self.outbound.extend(encode_response(&resp));
            }
        }
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

impl Read for SimPort {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        let n = buf.len().min(self.outbound.len());
        for (dst, src) in buf.iter_mut().zip(self.outbound.drain(..n)) {
            *dst = src;
        }
        Ok(n)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum LinkError {
    #[error("transport: {0}")]
    Io(#[from] io::Error),
    #[error("link closed before a response arrived")]
    Closed,
    #[error("unparseable response {line:?}: {code}")]
    BadResponse { line: String, code: ErrorCode },
}

/// Anything that can carry one command and return its single response.
pub trait RotorLink {
    fn send(&mut self, cmd: &Command) -> Result<Response, LinkError>;
}

/// Maximum response line length before the link is declared broken.
const MAX_LINE: usize = 256;

/// Half-duplex client over any byte stream, with an optional transcript.
pub struct LineClient<S> {
    stream: S,
    transcript: Option<Box<dyn Write + Send>>,
}

impl<S: Read + Write> LineClient<S> {
    pub fn new(stream: S) -> Self {
        Self {
            stream,
            transcript: None,
        }
    }

    /// Logs every exchange as `> cmd` / `< resp` lines.
    pub fn with_transcript(mut self, sink: Box<dyn Write + Send>) -> Self {
        self.transcript = Some(sink);
        self
    }

    pub fn get_ref(&self) -> &S {
        &self.stream
    }

    fn log(&mut self, prefix: &str, bytes: &[u8]) -> io::Result<()> {
        if let Some(t) = self.transcript.as_mut() {
            let text = String::from_utf8_lossy(bytes);
            writeln!(t, "{prefix} {}", text.trim_end_matches(['\r', '\n']))?;
        }
        Ok(())
    }

    fn read_line(&mut self) -> Result<Vec<u8>, LinkError> {
        let mut line = Vec::new();
        let mut byte = [0u8; 1];
        loop {
            match self.stream.read(&mut byte) {
                Ok(0) => return Err(LinkError::Closed),
                Ok(_) => {
                    line.push(byte[0]);
                    if byte[0] == b'\n' {
                        return Ok(line);
                    }
                    if line.len() > MAX_LINE {
                        return Err(LinkError::BadResponse {
                            line: String::from_utf8_lossy(&line).into_owned(),
                            code: ErrorCode::Malformed,
                        });
                    }
                }
                Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
                Err(e) => return Err(e.into()),
            }
        }
    }
}

impl<S: Read + Write> RotorLink for LineClient<S> {
    fn send(&mut self, cmd: &Command) -> Result<Response, LinkError> {
        let bytes = encode_command(cmd);
        self.log(">", &bytes)?;
        self.stream.write_all(&bytes)?;
        self.stream.flush()?;
        let line = self.read_line()?;
        self.log("<", &line)?;
        parse_response(&line).map_err(|code| LinkError::BadResponse {
            line: String::from_utf8_lossy(&line).into_owned(),
            code,
        })
    }
}

impl<L: RotorLink + ?Sized> RotorLink for &mut L {
    fn send(&mut self, cmd: &Command) -> Result<Response, LinkError> {
        (**self).send(cmd)
    }
}

impl<L: RotorLink + ?Sized> RotorLink for Box<L> {
    fn send(&mut self, cmd: &Command) -> Result<Response, LinkError> {
        (**self).send(cmd)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::{Arc, Mutex};

    #[test]
    fn encode_examples() {
        assert_eq!(encode_command(&Command::Move { az_steps: 400, el_steps: 0 }), b"MOVE 400 0\n");
        assert_eq!(encode_command(&Command::Home), b"HOME\n");
        assert_eq!(
            encode_command(&Command::Move { az_steps: -405, el_steps: 356 }),
            b"MOVE -405 356\n"
        );
    }

    #[test]
    fn parse_examples() {
        assert_eq!(
            parse_command(b"MOVE 400 0\r\n"),
            Ok(Command::Move { az_steps: 400, el_steps: 0 })
        );
        assert_eq!(parse_command(b"move 400 0\n"), Err(ErrorCode::UnknownKeyword));
        assert_eq!(parse_command(b"MOVE 400\n").map_err(ErrorCode::code), Err(3));
        assert_eq!(parse_command(b"MOVE 4x0 0\n"), Err(ErrorCode::Malformed));
        assert_eq!(parse_command(b"MOVE +4 0\n"), Err(ErrorCode::Malformed));
        assert_eq!(parse_command(b"MOVE 99999999999 0\n"), Err(ErrorCode::Malformed));
        assert_eq!(parse_command(b"HOME now\n"), Err(ErrorCode::Arity));
        assert_eq!(parse_command(b"HOME\nPOS?\n"), Err(ErrorCode::Malformed));
        assert_eq!(parse_command(b"MOVE  1 2\n"), Err(ErrorCode::Malformed));
        assert_eq!(parse_command(b"\n"), Err(ErrorCode::Malformed));
        assert_eq!(parse_command(b"POS?\n"), Ok(Command::Pos));
        assert_eq!(parse_command(b"LIM?"), Ok(Command::Lim));
    }

    #[test]
    fn response_round_trip() {
        for r in [
            Response::Ok,
            Response::Err(ErrorCode::NotHomed),
            Response::Pos { az_steps: -20000, el_steps: 0 },
            Response::Lim { az_min: true, el_min: false },
        ] {
            assert_eq!(parse_response(&encode_response(&r)), Ok(r));
        }
        assert_eq!(parse_response(b"ERR 9\n"), Err(ErrorCode::Malformed));
    }

    #[test]
    fn device_requires_homing() {
        let mut d = SimDevice::new(RotorConfig::default());
        assert_eq!(
            d.apply(&Command::Move { az_steps: 1, el_steps: 0 }),
            Response::Err(ErrorCode::NotHomed)
        );
        assert_eq!(d.apply(&Command::Pos), Response::Err(ErrorCode::NotHomed));
        assert_eq!(d.apply(&Command::Stop), Response::Ok);
    }

    #[test]
    fn home_sets_travel_minima() {
        let c = RotorConfig::default();
        let mut d = SimDevice::new(c.clone());
        assert_eq!(d.apply(&Command::Home), Response::Ok);
        assert_eq!(d.state().phase, HomingPhase::Zeroed);
        assert_eq!(
            d.apply(&Command::Pos),
            Response::Pos {
                az_steps: c.min_steps(Axis::Az),
                el_steps: c.min_steps(Axis::El)
            }
        );
        assert_eq!(d.apply(&Command::Lim), Response::Lim { az_min: true, el_min: true });
        // homing from the switch itself still backs off and re-seeks
        let mut parked = SimDevice::new(c.clone()).with_physical_offset(0, 0);
        assert_eq!(parked.apply(&Command::Home), Response::Ok);
    }

    #[test]
    fn move_clamps_at_limits() {
        let c = RotorConfig::default();
        let mut d = SimDevice::new(c.clone());
        d.apply(&Command::Home);
        assert_eq!(d.apply(&Command::Move { az_steps: 400, el_steps: 356 }), Response::Ok);
        assert_eq!(
            d.apply(&Command::Move { az_steps: -1000, el_steps: 0 }),
            Response::Err(ErrorCode::LimitStrike)
        );
        assert_eq!(
            d.apply(&Command::Pos),
            Response::Pos {
                az_steps: c.min_steps(Axis::Az),
                el_steps: c.min_steps(Axis::El) + 356
            }
        );
        d.apply(&Command::Move { az_steps: i32::MAX, el_steps: 0 });
        assert_eq!(
            d.apply(&Command::Pos),
            Response::Pos {
                az_steps: c.max_steps(Axis::Az),
                el_steps: c.min_steps(Axis::El) + 356
            }
        );
    }

    #[derive(Clone, Default)]
    struct Shared(Arc<Mutex<Vec<u8>>>);

    impl Write for Shared {
        fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
            self.0.lock().unwrap().extend_from_slice(buf);
            Ok(buf.len())
        }
        fn flush(&mut self) -> io::Result<()> {
            Ok(())
        }
    }

    #[test]
    fn client_over_sim_port_with_transcript() {
        let log = Shared::default();
        let port = SimPort::new(SimDevice::new(RotorConfig::default()));
        let mut client = LineClient::new(port).with_transcript(Box::new(log.clone()));
        assert_eq!(client.send(&Command::Home).unwrap(), Response::Ok);
        assert_eq!(
            client.send(&Command::Move { az_steps: 400, el_steps: 0 }).unwrap(),
            Response::Ok
        );
        assert_eq!(
            client.send(&Command::Pos).unwrap(),
            Response::Pos { az_steps: -19600, el_steps: 0 }
        );
        let text = String::from_utf8(log.0.lock().unwrap().clone()).unwrap();
        assert_eq!(
            text,
            "> HOME\n< OK\n> MOVE 400 0\n< OK\n> POS?\n< POS -19600 0\n"
        );
    }

    #[test]
    fn sim_port_answers_garbage_with_error_code() {
        let mut port = SimPort::new(SimDevice::new(RotorConfig::default()));
        port.write_all(b"JUMP\nMOVE 1\n").unwrap();
        let mut out = String::new();
        port.read_to_string(&mut out).unwrap();
        assert_eq!(out, "ERR 1\nERR 3\n");
    }
}

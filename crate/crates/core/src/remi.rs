//! Simplified REMI tokens: bars, sixteenth positions, pitches and durations
//! over a fixed 228-entry vocabulary, plus the decoding grammar.
//!
//! Layout:
//!
//! | ids       | token                |
//! |-----------|----------------------|
//! | 0, 1, 2   | PAD, BOS, EOS        |
//! | 3         | BAR                  |
//! | 4..=19    | POSITION_0..=15      |
//! | 20..=147  | PITCH_0..=127        |
//! | 148..=227 | DURATION_1..=80      |

use std::fmt;

use crate::error::{Error, Result};
use crate::score::{Note, Score, STEPS_PER_BAR};

pub const VOCAB_SIZE: usize = 228;
pub const N_POSITIONS: u8 = 16;
pub const N_PITCHES: u16 = 128;
pub const MAX_DURATION: u32 = 80;

const POSITION_BASE: u16 = 4;
const PITCH_BASE: u16 = 20;
const DURATION_BASE: u16 = 147;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TokenId(u16);

impl TokenId {
    pub const PAD: TokenId = TokenId(0);
    pub const BOS: TokenId = TokenId(1);
    pub const EOS: TokenId = TokenId(2);
    pub const BAR: TokenId = TokenId(3);

    pub fn new(id: u32) -> Option<Self> {
        (id < VOCAB_SIZE as u32).then_some(TokenId(id as u16))
    }

    pub fn position(p: u8) -> Self {
        assert!(p < N_POSITIONS, "position {p} out of range");
        TokenId(POSITION_BASE + p as u16)
    }

    pub fn pitch(n: u8) -> Self {
        assert!(n < 128, "pitch {n} out of range");
        TokenId(PITCH_BASE + n as u16)
    }

    /// Duration token for `d` steps; `d` must be in `1..=80`.
    pub fn duration(d: u32) -> Self {
        assert!((1..=MAX_DURATION).contains(&d), "duration {d} out of range");
        TokenId(DURATION_BASE + d as u16)
    }

    pub fn id(self) -> u16 {
        self.0
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn token(self) -> Token {
        match self.0 {
            0 => Token::Pad,
            1 => Token::Bos,
            2 => Token::Eos,
            3 => Token::Bar,
            i @ 4..=19 => Token::Position((i - POSITION_BASE) as u8),
            i @ 20..=147 => Token::Pitch((i - PITCH_BASE) as u8),
            i => Token::Duration((i - DURATION_BASE) as u8),
        }
    }

    pub fn kind(self) -> TokenKind {
        self.token().kind()
    }

    pub fn all() -> impl Iterator<Item = TokenId> {
        (0..VOCAB_SIZE as u16).map(TokenId)
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.token().fmt(f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Token {
    Pad,
    Bos,
    Eos,
    Bar,
    Position(u8),
    Pitch(u8),
    Duration(u8),
}

impl Token {
    pub fn kind(self) -> TokenKind {
        match self {
            Token::Pad | Token::Bos | Token::Eos => TokenKind::Special,
            Token::Bar => TokenKind::Bar,
            Token::Position(_) => TokenKind::Position,
            Token::Pitch(_) => TokenKind::Pitch,
            Token::Duration(_) => TokenKind::Duration,
        }
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Token::Pad => f.write_str("PAD"),
            Token::Bos => f.write_str("BOS"),
            Token::Eos => f.write_str("EOS"),
            Token::Bar => f.write_str("BAR"),
            Token::Position(p) => write!(f, "POSITION_{p}"),
            Token::Pitch(n) => write!(f, "PITCH_{n}"),
            Token::Duration(d) => write!(f, "DURATION_{d}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TokenKind {
    Special,
    Bar,
    Position,
    Pitch,
    Duration,
}

/// The vocabulary as `(id, name)` rows in id order.
pub fn vocab_table() -> Vec<(u16, String)> {
    TokenId::all().map(|t| (t.id(), t.to_string())).collect()
}

/// Options for [`encode`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncodeOptions {
    pub bos: bool,
    pub eos: bool,
}

impl Default for EncodeOptions {
    fn default() -> Self {
        Self { bos: true, eos: false }
    }
}

/// Encodes the first `n_bars` measures of `score`.
///
/// Every bar emits `BAR`, then for each occupied position in order
/// `POSITION_p` followed by `PITCH_n DURATION_d` pairs in ascending pitch.
/// Durations are clamped to `1..=80`.
pub fn encode(score: &Score, n_bars: u32, opts: EncodeOptions) -> Result<Vec<TokenId>> {
    let limit = n_bars as u64 * STEPS_PER_BAR as u64;
    if let Some(index) = score.notes().iter().position(|n| n.start as u64 >= limit) {
        return Err(Error::NoteBeyondWindow { index, start: score.notes()[index].start, n_bars });
    }
    let mut out = Vec::with_capacity(score.len() * 3 + n_bars as usize + 2);
    if opts.bos {
        out.push(TokenId::BOS);
    }
    let mut notes = score.notes().iter().peekable();
    for bar in 0..n_bars {
        out.push(TokenId::BAR);
        let bar_end = (bar + 1) * STEPS_PER_BAR;
        let mut last_pos = None;
        while let Some(n) = notes.next_if(|n| n.start < bar_end) {
            let pos = (n.start % STEPS_PER_BAR) as u8;
            if last_pos != Some(pos) {
                out.push(TokenId::position(pos));
                last_pos = Some(pos);
            }
            out.push(TokenId::pitch(n.pitch));
            out.push(TokenId::duration(n.duration.clamp(1, MAX_DURATION)));
        }
    }
    if opts.eos {
        out.push(TokenId::EOS);
    }
    Ok(out)
}

/// Where the grammar currently stands within a token stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Phase {
    Start,
    Bar,
    Position,
    Pitch,
    Duration,
}

/// Decoding automaton state. Fresh state expects a `BAR`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GrammarState {
    pub last_kind: Phase,
    pub bars_emitted: u32,
    /// Last position opened in the current bar, -1 before any.
    pub last_position: i8,
}

impl Default for GrammarState {
    fn default() -> Self {
        Self::new()
    }
}

/// A subset of the vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TokenSet([u64; 4]);

impl TokenSet {
    pub fn empty() -> Self {
        Self([0; 4])
    }

    pub fn full() -> Self {
        TokenId::all().collect()
    }

    pub fn insert(&mut self, t: TokenId) {
        self.0[t.index() / 64] |= 1 << (t.index() % 64);
    }

    pub fn remove(&mut self, t: TokenId) {
        self.0[t.index() / 64] &= !(1 << (t.index() % 64));
    }

    pub fn contains(&self, t: TokenId) -> bool {
        self.0[t.index() / 64] & (1 << (t.index() % 64)) != 0
    }

    pub fn len(&self) -> usize {
        self.0.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.0.iter().all(|&w| w == 0)
    }

    pub fn only(t: TokenId) -> Self {
        let mut s = Self::empty();
        s.insert(t);
        s
    }

    pub fn iter(&self) -> impl Iterator<Item = TokenId> + '_ {
        TokenId::all().filter(move |t| self.contains(*t))
    }
}

impl FromIterator<TokenId> for TokenSet {
    fn from_iter<I: IntoIterator<Item = TokenId>>(iter: I) -> Self {
        let mut s = Self::empty();
        for t in iter {
            s.insert(t);
        }
        s
    }
}

impl GrammarState {
    pub fn new() -> Self {
        Self { last_kind: Phase::Start, bars_emitted: 0, last_position: -1 }
    }

    /// Tokens that may follow the current state. Specials are never legal.
    pub fn legal_next(&self) -> TokenSet {
        let mut set = TokenSet::empty();
        let pitches = || (0..128u8).map(TokenId::pitch);
        let positions_after =
            |p: i8| ((p + 1).max(0) as u8..N_POSITIONS).map(TokenId::position);
        match self.last_kind {
            Phase::Start => set.insert(TokenId::BAR),
            Phase::Bar => {
                set.insert(TokenId::BAR);
                set.extend(positions_after(-1));
            }
            Phase::Position => set.extend(pitches()),
            Phase::Pitch => set.extend((1..=MAX_DURATION).map(TokenId::duration)),
            Phase::Duration => {
                set.insert(TokenId::BAR);
                set.extend(pitches());
                set.extend(positions_after(self.last_position));
            }
        }
        set
    }

    pub fn accepts(&self, t: TokenId) -> bool {
        match (self.last_kind, t.token()) {
            (Phase::Start, Token::Bar) => true,
            (Phase::Bar, Token::Bar | Token::Position(_)) => true,
            (Phase::Position, Token::Pitch(_)) => true,
            (Phase::Pitch, Token::Duration(d)) => (1..=MAX_DURATION as u8).contains(&d),
            (Phase::Duration, Token::Bar | Token::Pitch(_)) => true,
            (Phase::Duration, Token::Position(p)) => (p as i8) > self.last_position,
            _ => false,
        }
    }

    /// Consumes `t`, failing if it is not legal here.
    pub fn advance(&self, t: TokenId) -> Result<GrammarState> {
        if !self.accepts(t) {
            return Err(Error::Ungrammatical { index: 0, token: t.to_string(), after: self.describe() });
        }
        let mut next = *self;
        match t.token() {
            Token::Bar => {
                next.last_kind = Phase::Bar;
                next.bars_emitted += 1;
                next.last_position = -1;
            }
            Token::Position(p) => {
                next.last_kind = Phase::Position;
                next.last_position = p as i8;
            }
            Token::Pitch(_) => next.last_kind = Phase::Pitch,
            Token::Duration(_) => next.last_kind = Phase::Duration,
            Token::Pad | Token::Bos | Token::Eos => unreachable!("specials are never accepted"),
        }
        Ok(next)
    }

    /// True where a stream may end without leaving a note half-written.
    pub fn at_boundary(&self) -> bool {
        matches!(self.last_kind, Phase::Start | Phase::Bar | Phase::Duration)
    }

    fn describe(&self) -> String {
        match self.last_kind {
            Phase::Start => "stream start".into(),
            Phase::Bar => "BAR".into(),
            Phase::Position => format!("POSITION_{}", self.last_position),
            Phase::Pitch => "PITCH".into(),
            Phase::Duration => format!("DURATION (last position {})", self.last_position),
        }
    }
}

impl Extend<TokenId> for TokenSet {
    fn extend<I: IntoIterator<Item = TokenId>>(&mut self, iter: I) {
        for t in iter {
            self.insert(t);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeMode {
    /// Fail at the first ungrammatical token.
    Strict,
    /// Skip ungrammatical tokens and count them.
    Lenient,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decoded {
    pub score: Score,
    pub skipped: usize,
    pub bars: u32,
}

/// Inverse of [`encode`]. The k-th `BAR` opens bar k-1, and a note at
/// `POSITION_p` in bar b starts at `base_step + 16 b + p`.
///
/// A leading `BOS` and a final `EOS` are accepted; `PAD` is ignored.
pub fn decode(tokens: &[TokenId], base_step: u32, mode: DecodeMode) -> Result<Decoded> {
    let mut state = GrammarState::new();
    let mut notes = Vec::new();
    let mut skipped = 0;
    let mut pitch = 0u8;
    let last = tokens.len().saturating_sub(1);
    for (index, &t) in tokens.iter().enumerate() {
        let ok = match t.token() {
            Token::Pad => continue,
            Token::Bos if index == 0 => continue,
            Token::Eos if index == last && state.at_boundary() => continue,
            _ => state.accepts(t),
        };
        if !ok {
            match mode {
                DecodeMode::Strict => {
                    return Err(Error::Ungrammatical {
                        index,
                        token: t.to_string(),
                        after: state.describe(),
                    })
                }
                DecodeMode::Lenient => {
                    skipped += 1;
                    continue;
                }
            }
        }
        state = state.advance(t).expect("checked by accepts");
        match t.token() {
            Token::Pitch(n) => pitch = n,
            Token::Duration(d) => {
                let bar = state.bars_emitted - 1;
                notes.push(Note {
                    start: base_step + STEPS_PER_BAR * bar + state.last_position as u32,
                    pitch,
                    duration: d as u32,
                });
            }
            _ => {}
        }
    }
    if mode == DecodeMode::Strict && !state.at_boundary() {
        return Err(Error::Ungrammatical {
            index: tokens.len(),
            token: "end of stream".into(),
            after: state.describe(),
        });
    }
    Ok(Decoded { score: Score::from_notes(notes), skipped, bars: state.bars_emitted })
}

/// Checks a stream against the grammar (leading `BOS`, trailing `EOS` allowed).
pub fn validate(tokens: &[TokenId]) -> Result<()> {
    decode(tokens, 0, DecodeMode::Strict).map(|_| ())
}

/// Whitespace-separated decimal ids on one line.
pub fn format_stream(tokens: &[TokenId]) -> String {
    let mut s = String::with_capacity(tokens.len() * 4);
    for (i, t) in tokens.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        s.push_str(&t.id().to_string());
    }
    s
}

/// Inverse of [`format_stream`]; token names such as `PITCH_60` are accepted too.
pub fn parse_stream(line: &str) -> Result<Vec<TokenId>> {
    line.split_whitespace()
        .enumerate()
        .map(|(index, w)| match w.parse::<u32>() {
            Ok(id) => TokenId::new(id).ok_or(Error::TokenOutOfRange { index, id }),
            Err(_) => TokenId::all()
                .find(|t| t.to_string() == w)
                .ok_or_else(|| Error::Malformed(format!("token {index}: `{w}` is neither an id nor a token name"))),
        })
        .collect()
}

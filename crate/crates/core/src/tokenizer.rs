//! Byte-level BPE vocabulary with a reserved sentinel block.
//!
//! Id layout of a trained [`Vocabulary`] of size `N` with `S` sentinels:
//!
//! | ids                      | pieces                                     |
//! |--------------------------|--------------------------------------------|
//! | `0, 1, 2`                | `<pad>`, `</s>`, `<unk>`                   |
//! | `3 ..= 258`              | one piece per byte value (byte fallback)   |
//! | next `U` ids             | user-defined atomic pieces (e.g. NER tags) |
//! | following ids            | merged pieces, in merge order              |
//! | `N - S .. N`             | sentinels; `<extra_id_k>` has id `N-1-k`   |
//!
//! Text is encoded with a leading space added (the whitespace marker), split
//! into chunks that each start at a space, and every chunk is reduced by the
//! learned merges in rank order. Since every byte has a piece, encoding never
//! needs `<unk>`.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

pub const PAD_ID: u32 = 0;
pub const EOS_ID: u32 = 1;
pub const UNK_ID: u32 = 2;
const BYTE_OFFSET: u32 = 3;
const SPECIALS: [&str; 3] = ["<pad>", "</s>", "<unk>"];

pub const FORMAT_VERSION: u32 = 1;
const HEADER_TAG: &str = "#t5lab-vocab";

/// Desk-scale default budget.
pub const DEFAULT_VOCAB_SIZE: u32 = 8_000;
/// The full-size budget of the original pretraining setup.
pub const FULL_VOCAB_SIZE: u32 = 36_000;
pub const DEFAULT_SENTINELS: u32 = 100;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TokenizerError {
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("target size {target} too small: need more than {needed} (3 specials + 256 bytes + {sentinels} sentinels + {user} user pieces)")]
    BudgetTooSmall {
        target: u32,
        needed: u32,
        sentinels: u32,
        user: u32,
    },
    #[error("invalid user piece {0:?}")]
    InvalidUserPiece(String),
    #[error("token id {id} at position {position} is out of range for a vocabulary of {size}")]
    IdOutOfRange { position: usize, id: u32, size: u32 },
    #[error("vocabulary file line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error("vocabulary format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for TokenizerError {
    fn from(e: std::io::Error) -> Self {
        TokenizerError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PieceKind {
    Special,
    Byte,
    User,
    Merged,
    Sentinel,
}

impl PieceKind {
    fn as_str(self) -> &'static str {
        match self {
            PieceKind::Special => "special",
            PieceKind::Byte => "byte",
            PieceKind::User => "user",
            PieceKind::Merged => "merged",
            PieceKind::Sentinel => "sentinel",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "special" => PieceKind::Special,
            "byte" => PieceKind::Byte,
            "user" => PieceKind::User,
            "merged" => PieceKind::Merged,
            "sentinel" => PieceKind::Sentinel,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Piece {
    pub bytes: Vec<u8>,
    pub kind: PieceKind,
}

/// Token ids together with the character length of the text they came from.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub source_len: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub target_size: u32,
    pub sentinel_count: u32,
    /// Strings kept as single atomic pieces and never split or merged.
    pub user_pieces: Vec<String>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            target_size: DEFAULT_VOCAB_SIZE,
            sentinel_count: DEFAULT_SENTINELS,
            user_pieces: Vec::new(),
        }
    }
}

/// An immutable trained vocabulary.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    pieces: Vec<Piece>,
    merges: Vec<(u32, u32)>,
    target_size: u32,
    sentinel_count: u32,
    user_count: u32,
    // derived
    merge_rank: HashMap<(u32, u32), u32>,
    user_lookup: Vec<(Vec<u8>, u32)>,
}

impl PartialEq for Vocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.pieces == other.pieces
            && self.merges == other.merges
            && self.target_size == other.target_size
            && self.sentinel_count == other.sentinel_count
    }
}

impl Vocabulary {
    pub fn size(&self) -> u32 {
        self.pieces.len() as u32
    }

    pub fn target_size(&self) -> u32 {
        self.target_size
    }

    pub fn sentinel_count(&self) -> u32 {
        self.sentinel_count
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn piece(&self, id: u32) -> Option<&Piece> {
        self.pieces.get(id as usize)
    }

    pub fn byte_id(b: u8) -> u32 {
        BYTE_OFFSET + b as u32
    }

    fn merged_start(&self) -> u32 {
        BYTE_OFFSET + 256 + self.user_count
    }

    /// Id of `<extra_id_k>`, counting down from the top of the id space.
    pub fn sentinel_id(&self, k: u32) -> Option<u32> {
        (k < self.sentinel_count).then(|| self.size() - 1 - k)
    }

    /// Index `k` of a sentinel id.
    pub fn sentinel_index(&self, id: u32) -> Option<u32> {
        let first = self.size() - self.sentinel_count;
        (id >= first && id < self.size()).then(|| self.size() - 1 - id)
    }

    pub fn is_sentinel(&self, id: u32) -> bool {
        self.sentinel_index(id).is_some()
    }

    pub fn user_piece_id(&self, text: &str) -> Option<u32> {
        self.user_lookup
            .iter()
            .find(|(b, _)| b == text.as_bytes())
            .map(|&(_, id)| id)
    }

    fn from_parts(
        pieces: Vec<Piece>,
        merges: Vec<(u32, u32)>,
        target_size: u32,
        sentinel_count: u32,
        user_count: u32,
    ) -> Self {
        let merged_start = BYTE_OFFSET + 256 + user_count;
        let merge_rank = merges
            .iter()
            .enumerate()
            .map(|(rank, &pair)| (pair, rank as u32))
            .collect();
        let mut user_lookup: Vec<(Vec<u8>, u32)> = (0..user_count)
            .map(|i| {
                let id = BYTE_OFFSET + 256 + i;
                (pieces[id as usize].bytes.clone(), id)
            })
            .collect();
        // longest match first
        user_lookup.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then(a.1.cmp(&b.1)));
        debug_assert!(merges.len() as u32 + merged_start + sentinel_count == pieces.len() as u32);
        Self {
            pieces,
            merges,
            target_size,
            sentinel_count,
            user_count,
            merge_rank,
            user_lookup,
        }
    }

    /// Encodes `text`. Output never contains pad, eos, unk or sentinel ids.
    pub fn encode(&self, text: &str) -> TokenSequence {
        let source_len = text.chars().count();
        if text.is_empty() {
            return TokenSequence { ids: Vec::new(), source_len };
        }
        let mut marked = Vec::with_capacity(text.len() + 1);
        marked.push(b' ');
        marked.extend_from_slice(text.as_bytes());

        let mut ids = Vec::new();
        for segment in split_user_pieces(&marked, &self.user_lookup) {
            match segment {
                Segment::User(id) => ids.push(id),
                Segment::Text(bytes) => {
                    for chunk in chunks(bytes) {
                        self.encode_chunk(chunk, &mut ids);
                    }
                }
            }
        }
        TokenSequence { ids, source_len }
    }

    fn encode_chunk(&self, chunk: &[u8], out: &mut Vec<u32>) {
        let mut symbols: Vec<u32> = chunk.iter().map(|&b| Self::byte_id(b)).collect();
        let merged_start = self.merged_start();
        loop {
            let best = symbols
                .windows(2)
                .filter_map(|w| self.merge_rank.get(&(w[0], w[1])).copied())
                .min();
            let Some(rank) = best else { break };
            let pair = self.merges[rank as usize];
            let new_id = merged_start + rank;
            symbols = merge_pair(&symbols, pair, new_id);
        }
        out.extend(symbols);
    }

    /// Renders ids back to text. Pad and eos render as nothing, sentinels as
    /// `<extra_id_k>`; the leading whitespace marker is removed.
    pub fn decode(&self, ids: &[u32]) -> Result<String, TokenizerError> {
        let mut bytes = Vec::new();
        for (position, &id) in ids.iter().enumerate() {
            let piece = self.piece(id).ok_or(TokenizerError::IdOutOfRange {
                position,
                id,
                size: self.size(),
            })?;
            match piece.kind {
                PieceKind::Special if id == UNK_ID => bytes.extend_from_slice(SPECIALS[2].as_bytes()),
                PieceKind::Special => {}
                PieceKind::Sentinel => {
                    let k = self.sentinel_index(id).expect("sentinel id");
                    bytes.extend_from_slice(format!("<extra_id_{k}>").as_bytes());
                }
                _ => bytes.extend_from_slice(&piece.bytes),
            }
        }
        let text = String::from_utf8_lossy(&bytes);
        Ok(text.strip_prefix(' ').unwrap_or(&text).to_string())
    }

    /// Serialized text form. Identical vocabularies give identical bytes.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{HEADER_TAG} v{FORMAT_VERSION} size={} target={} sentinels={} user={}",
            self.size(),
            self.target_size,
            self.sentinel_count,
            self.user_count
        );
        let merged_start = self.merged_start();
        for (id, piece) in self.pieces.iter().enumerate() {
            let id = id as u32;
            let rank = if piece.kind == PieceKind::Merged {
                (id - merged_start).to_string()
            } else {
                "-".to_string()
            };
            let _ = writeln!(
                out,
                "{id}\t{}\t{rank}\t{}\t{}",
                piece.kind.as_str(),
                to_hex(&piece.bytes),
                display_piece(piece, id, self)
            );
        }
        let _ = writeln!(out, "---");
        for (l, r) in &self.merges {
            let _ = writeln!(out, "{l} {r}");
        }
        out
    }

    pub fn from_file_str(src: &str) -> Result<Self, TokenizerError> {
        let mut lines = src.lines().enumerate().map(|(i, l)| (i + 1, l));
        let fmt = |line: usize, msg: &str| TokenizerError::Format {
            line,
            msg: msg.to_string(),
        };
        let (_, header) = lines.next().ok_or_else(|| fmt(1, "empty file"))?;
        let mut fields = header.split_whitespace();
        if fields.next() != Some(HEADER_TAG) {
            return Err(fmt(1, "missing vocabulary header"));
        }
        let version: u32 = fields
            .next()
            .and_then(|v| v.strip_prefix('v'))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| fmt(1, "bad version field"))?;
        if version != FORMAT_VERSION {
            return Err(TokenizerError::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let mut kv = HashMap::new();
        for f in fields {
            let (k, v) = f.split_once('=').ok_or_else(|| fmt(1, "bad header field"))?;
            let v: u32 = v.parse().map_err(|_| fmt(1, "bad header number"))?;
            kv.insert(k, v);
        }
        let get = |k: &str| kv.get(k).copied().ok_or_else(|| fmt(1, &format!("missing {k}")));
        let (size, target, sentinels, user) = (get("size")?, get("target")?, get("sentinels")?, get("user")?);

        let mut pieces = Vec::with_capacity(size as usize);
        for expected_id in 0..size {
            let (ln, line) = lines.next().ok_or_else(|| fmt(0, "truncated piece table"))?;
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() < 4 {
                return Err(fmt(ln, "expected id, kind, rank, hex columns"));
            }
            if cols[0].parse::<u32>().ok() != Some(expected_id) {
                return Err(fmt(ln, "ids must be dense and ordered"));
            }
            let kind = PieceKind::parse(cols[1]).ok_or_else(|| fmt(ln, "unknown piece kind"))?;
            let bytes = from_hex(cols[3]).ok_or_else(|| fmt(ln, "bad hex"))?;
            pieces.push(Piece { bytes, kind });
        }
        match lines.next() {
            Some((_, "---")) => {}
            Some((ln, _)) => return Err(fmt(ln, "expected merge separator")),
            None => return Err(fmt(0, "missing merge section")),
        }
        let mut merges = Vec::new();
        for (ln, line) in lines {
            let (l, r) = line
                .split_once(' ')
                .and_then(|(l, r)| Some((l.parse::<u32>().ok()?, r.parse::<u32>().ok()?)))
                .ok_or_else(|| fmt(ln, "bad merge line"))?;
            merges.push((l, r));
        }
        validate_layout(&pieces, &merges, sentinels, user).map_err(|m| fmt(0, &m))?;
        Ok(Self::from_parts(pieces, merges, target, sentinels, user))
    }

    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        std::fs::write(path, self.to_file_string())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        Self::from_file_str(&std::fs::read_to_string(path)?)
    }
}

fn validate_layout(pieces: &[Piece], merges: &[(u32, u32)], sentinels: u32, user: u32) -> Result<(), String> {
    let merged_start = (BYTE_OFFSET + 256 + user) as usize;
    if pieces.len() != merged_start + merges.len() + sentinels as usize {
        return Err("piece count does not match header".into());
    }
    for (id, p) in pieces.iter().enumerate() {
        let expected = if id < BYTE_OFFSET as usize {
            PieceKind::Special
        } else if id < BYTE_OFFSET as usize + 256 {
            PieceKind::Byte
        } else if id < merged_start {
            PieceKind::User
        } else if id < merged_start + merges.len() {
            PieceKind::Merged
        } else {
            PieceKind::Sentinel
        };
        if p.kind != expected {
            return Err(format!("piece {id} has kind {:?}, expected {expected:?}", p.kind));
        }
    }
    for (rank, &(l, r)) in merges.iter().enumerate() {
        let id = merged_start + rank;
        let ok_operand = |x: u32| {
            let x = x as usize;
            x >= BYTE_OFFSET as usize && x < id && !(BYTE_OFFSET as usize + 256..merged_start).contains(&x)
        };
        if !ok_operand(l) || !ok_operand(r) {
            return Err(format!("merge {rank} references an invalid piece"));
        }
        let mut concat = pieces[l as usize].bytes.clone();
        concat.extend_from_slice(&pieces[r as usize].bytes);
        if concat != pieces[id].bytes {
            return Err(format!("merge {rank} does not produce piece {id}"));
        }
    }
    Ok(())
}

fn to_hex(bytes: &[u8]) -> String {
    if bytes.is_empty() {
        return "-".into();
    }
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn from_hex(s: &str) -> Option<Vec<u8>> {
    if s == "-" {
        return Some(Vec::new());
    }
    if !s.len().is_multiple_of(2) {
        return None;
    }
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(s.get(i..i + 2)?, 16).ok())
        .collect()
}

fn display_piece(piece: &Piece, id: u32, vocab: &Vocabulary) -> String {
    match piece.kind {
        PieceKind::Special => SPECIALS[id as usize].to_string(),
        PieceKind::Sentinel => format!("<extra_id_{}>", vocab.size() - 1 - id),
        _ => String::from_utf8_lossy(&piece.bytes)
            .replace(' ', "\u{2581}")
            .escape_debug()
            .to_string(),
    }
}

enum Segment<'a> {
    Text(&'a [u8]),
    User(u32),
}

fn split_user_pieces<'a>(bytes: &'a [u8], user: &[(Vec<u8>, u32)]) -> Vec<Segment<'a>> {
    if user.is_empty() {
        return vec![Segment::Text(bytes)];
    }
    let mut out = Vec::new();
    let (mut start, mut i) = (0, 0);
    while i < bytes.len() {
        if let Some((piece, id)) = user.iter().find(|(p, _)| bytes[i..].starts_with(p)) {
            if start < i {
                out.push(Segment::Text(&bytes[start..i]));
            }
            out.push(Segment::User(*id));
            i += piece.len();
            start = i;
        } else {
            i += 1;
        }
    }
    if start < bytes.len() {
        out.push(Segment::Text(&bytes[start..]));
    }
    out
}

/// Splits before every space so each chunk carries at most one leading
/// whitespace marker.
fn chunks(bytes: &[u8]) -> impl Iterator<Item = &[u8]> {
    let mut start = 0;
    std::iter::from_fn(move || {
        if start >= bytes.len() {
            return None;
        }
        let mut i = start + 1;
        while i < bytes.len() && bytes[i] != b' ' {
            i += 1;
        }
        let chunk = &bytes[start..i];
        start = i;
        Some(chunk)
    })
}

fn merge_pair(symbols: &[u32], pair: (u32, u32), new_id: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && (symbols[i], symbols[i + 1]) == pair {
            out.push(new_id);
            i += 2;
        } else {
            out.push(symbols[i]);
            i += 1;
        }
    }
    out
}

#[derive(PartialEq, Eq)]
struct Candidate {
    count: u64,
    concat: Reverse<Vec<u8>>,
    pair: Reverse<(u32, u32)>,
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.count
            .cmp(&other.count)
            .then_with(|| self.concat.cmp(&other.concat))
            .then_with(|| self.pair.cmp(&other.pair))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Trains a vocabulary of at most `opts.target_size` pieces.
///
/// Each step merges the most frequent adjacent pair; equal counts go to the
/// lexicographically smallest concatenated piece, then the smallest id pair.
pub fn train_vocab<I, S>(corpus: I, opts: &TrainOptions) -> Result<Vocabulary, TokenizerError>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let user_count = opts.user_pieces.len() as u32;
    let needed = BYTE_OFFSET + 256 + opts.sentinel_count + user_count;
    if opts.target_size <= needed {
        return Err(TokenizerError::BudgetTooSmall {
            target: opts.target_size,
            needed,
            sentinels: opts.sentinel_count,
            user: user_count,
        });
    }
    let mut pieces: Vec<Piece> = SPECIALS
        .iter()
        .map(|s| Piece {
            bytes: s.as_bytes().to_vec(),
            kind: PieceKind::Special,
        })
        .chain((0..=255u8).map(|b| Piece {
            bytes: vec![b],
            kind: PieceKind::Byte,
        }))
        .collect();
    let mut user_lookup = Vec::new();
    for (i, u) in opts.user_pieces.iter().enumerate() {
        if u.is_empty() || u.contains(' ') || opts.user_pieces[..i].contains(u) {
            return Err(TokenizerError::InvalidUserPiece(u.clone()));
        }
        let id = pieces.len() as u32;
        pieces.push(Piece {
            bytes: u.as_bytes().to_vec(),
            kind: PieceKind::User,
        });
        user_lookup.push((u.as_bytes().to_vec(), id));
    }
    user_lookup.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then(a.1.cmp(&b.1)));

    let mut chunk_counts: HashMap<Vec<u8>, u64> = HashMap::new();
    let mut any = false;
    for text in corpus {
        let text = text.as_ref();
        if text.is_empty() {
            continue;
        }
        any = true;
        let mut marked = Vec::with_capacity(text.len() + 1);
        marked.push(b' ');
        marked.extend_from_slice(text.as_bytes());
        for seg in split_user_pieces(&marked, &user_lookup) {
            if let Segment::Text(bytes) = seg {
                for c in chunks(bytes) {
                    *chunk_counts.entry(c.to_vec()).or_default() += 1;
                }
            }
        }
    }
    if !any {
        return Err(TokenizerError::EmptyCorpus);
    }
    let mut sorted: Vec<(Vec<u8>, u64)> = chunk_counts.into_iter().collect();
    sorted.sort();
    let mut words: Vec<(Vec<u32>, u64)> = sorted
        .into_iter()
        .map(|(bytes, n)| (bytes.iter().map(|&b| Vocabulary::byte_id(b)).collect(), n))
        .collect();

    let budget = (opts.target_size - needed) as usize;
    let merges = learn_merges(&mut words, &mut pieces, budget);

    for k in (0..opts.sentinel_count).rev() {
        pieces.push(Piece {
            bytes: format!("<extra_id_{k}>").into_bytes(),
            kind: PieceKind::Sentinel,
        });
    }
    Ok(Vocabulary::from_parts(
        pieces,
        merges,
        opts.target_size,
        opts.sentinel_count,
        user_count,
    ))
}

fn learn_merges(words: &mut [(Vec<u32>, u64)], pieces: &mut Vec<Piece>, budget: usize) -> Vec<(u32, u32)> {
    let mut counts: HashMap<(u32, u32), u64> = HashMap::new();
    let mut where_: HashMap<(u32, u32), Vec<usize>> = HashMap::new();
    for (wi, (syms, n)) in words.iter().enumerate() {
        for w in syms.windows(2) {
            *counts.entry((w[0], w[1])).or_default() += n;
            where_.entry((w[0], w[1])).or_default().push(wi);
        }
    }
    let candidate = |pair: (u32, u32), count: u64, pieces: &[Piece]| {
        let mut concat = pieces[pair.0 as usize].bytes.clone();
        concat.extend_from_slice(&pieces[pair.1 as usize].bytes);
        Candidate {
            count,
            concat: Reverse(concat),
            pair: Reverse(pair),
        }
    };
    let mut heap: BinaryHeap<Candidate> = counts
        .iter()
        .map(|(&p, &c)| candidate(p, c, pieces))
        .collect();

    let mut merges = Vec::new();
    while merges.len() < budget {
        let Some(top) = heap.pop() else { break };
        let pair = top.pair.0;
        if counts.get(&pair).copied().unwrap_or(0) != top.count || top.count == 0 {
            continue;
        }
        let new_id = pieces.len() as u32;
        pieces.push(Piece {
            bytes: top.concat.0,
            kind: PieceKind::Merged,
        });
        merges.push(pair);

        let mut affected = where_.remove(&pair).unwrap_or_default();
        affected.sort_unstable();
        affected.dedup();
        let mut touched: Vec<(u32, u32)> = Vec::new();
        for wi in affected {
            let (syms, n) = &mut words[wi];
            if !syms.windows(2).any(|w| (w[0], w[1]) == pair) {
                continue;
            }
            for w in syms.windows(2) {
                let p = (w[0], w[1]);
                *counts.get_mut(&p).unwrap() -= *n;
                touched.push(p);
            }
            *syms = merge_pair(syms, pair, new_id);
            for w in syms.windows(2) {
                let p = (w[0], w[1]);
                *counts.entry(p).or_default() += *n;
                where_.entry(p).or_default().push(wi);
                touched.push(p);
            }
        }
        counts.remove(&pair);
        touched.sort_unstable();
        touched.dedup();
        for p in touched {
            if p == pair {
                continue;
            }
            match counts.get(&p).copied() {
                Some(0) => {
                    counts.remove(&p);
                }
                Some(c) => heap.push(candidate(p, c, pieces)),
                None => {}
            }
        }
    }
    merges
}

//! Token pieces, vocabularies and the mapping between token ids and bytes.
//!
//! Detokenized text is always handled as raw bytes. A piece carrying the
//! vocabulary's leading word-boundary marker (for example `▁`) contributes a
//! single `0x20` in place of the marker, byte-fallback pieces (`<0xNN>`)
//! contribute exactly one raw byte, and EOS/control pieces contribute nothing.
//! The leading space of a detokenized string is never stripped here.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Index into a [`Vocabulary`]. Negative values are reserved for [`EPSILON`].
pub type TokenId = i32;

/// The empty transition emitted by a stalled model. Never a member of any vocabulary.
pub const EPSILON: TokenId = -1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PieceKind {
    Normal,
    ByteFallback,
    Eos,
    Control,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Piece {
    pub id: TokenId,
    pub surface: String,
    pub kind: PieceKind,
    bytes: Vec<u8>,
}

impl Piece {
    /// Bytes this piece contributes to a detokenized string.
    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }
}

/// Word-boundary convention of a vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum Marker {
    /// Pieces starting with this string begin a new word; the marker detokenizes to one space.
    Leading(String),
    #[default]
    None,
}

impl Marker {
    pub fn sentencepiece() -> Self {
        Marker::Leading("\u{2581}".to_string())
    }

    fn as_str(&self) -> &str {
        match self {
            Marker::Leading(m) => m,
            Marker::None => "",
        }
    }
}

/// Parses `<0xNN>` into its byte value.
pub fn parse_byte_piece(surface: &str) -> Option<u8> {
    let hex = surface.strip_prefix("<0x")?.strip_suffix('>')?;
    if hex.len() != 2 {
        return None;
    }
    u8::from_str_radix(hex, 16).ok()
}

pub fn byte_piece_surface(byte: u8) -> String {
    format!("<0x{byte:02X}>")
}

/// An immutable, densely indexed set of pieces.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabFile", into = "VocabFile")]
pub struct Vocabulary {
    pieces: Vec<Piece>,
    marker: Marker,
    eos: TokenId,
    by_surface: HashMap<String, TokenId>,
    // Normal pieces keyed by their detokenized bytes; the lowest id wins.
    by_bytes: HashMap<Vec<u8>, TokenId>,
    fallback: Vec<Option<TokenId>>,
    max_piece_len: usize,
}

impl Vocabulary {
    /// Builds a vocabulary; ids follow the order of `pieces`.
    pub fn new(marker: Marker, pieces: Vec<(String, PieceKind)>) -> Result<Self> {
        if let Marker::Leading(m) = &marker {
            if m.is_empty() {
                return Err(Error::Vocab("leading marker must be non-empty".into()));
            }
        }
        if pieces.len() > TokenId::MAX as usize {
            return Err(Error::Vocab("too many pieces".into()));
        }

        let mut built = Vec::with_capacity(pieces.len());
        let mut by_surface = HashMap::with_capacity(pieces.len());
        let mut by_bytes: HashMap<Vec<u8>, TokenId> = HashMap::new();
        let mut fallback = vec![None; 256];
        let mut eos = None;
        let mut max_piece_len = 0;

        for (idx, (surface, kind)) in pieces.into_iter().enumerate() {
            let id = idx as TokenId;
            if by_surface.insert(surface.clone(), id).is_some() {
                return Err(Error::Vocab(format!("duplicate piece surface {surface:?}")));
            }
            let bytes = match kind {
                PieceKind::Normal => {
                    let bytes = match &marker {
                        Marker::Leading(m) => match surface.strip_prefix(m.as_str()) {
                            Some(rest) => {
                                let mut b = Vec::with_capacity(rest.len() + 1);
                                b.push(b' ');
                                b.extend_from_slice(rest.as_bytes());
                                b
                            }
                            None => surface.as_bytes().to_vec(),
                        },
                        Marker::None => surface.as_bytes().to_vec(),
                    };
                    if bytes.is_empty() {
                        return Err(Error::Vocab(format!("normal piece {id} is empty")));
                    }
                    max_piece_len = max_piece_len.max(bytes.len());
                    by_bytes.entry(bytes.clone()).or_insert(id);
                    bytes
                }
                PieceKind::ByteFallback => {
                    let b = parse_byte_piece(&surface).ok_or_else(|| {
                        Error::Vocab(format!("malformed byte-fallback piece {surface:?}"))
                    })?;
                    if fallback[b as usize].replace(id).is_some() {
                        return Err(Error::Vocab(format!(
                            "duplicate byte-fallback piece {surface:?}"
                        )));
                    }
                    vec![b]
                }
                PieceKind::Eos => {
                    if eos.replace(id).is_some() {
                        return Err(Error::Vocab("more than one EOS piece".into()));
                    }
                    Vec::new()
                }
                PieceKind::Control => Vec::new(),
            };
            built.push(Piece {
                id,
                surface,
                kind,
                bytes,
            });
        }

        let eos = eos.ok_or_else(|| Error::Vocab("vocabulary has no EOS piece".into()))?;
        Ok(Self {
            pieces: built,
            marker,
            eos,
            by_surface,
            by_bytes,
            fallback,
            max_piece_len,
        })
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn eos(&self) -> TokenId {
        self.eos
    }

    pub fn marker(&self) -> &Marker {
        &self.marker
    }

    pub fn pieces(&self) -> &[Piece] {
        &self.pieces
    }

    pub fn piece(&self, id: TokenId) -> Result<&Piece> {
        usize::try_from(id)
            .ok()
            .and_then(|i| self.pieces.get(i))
            .ok_or(Error::InvalidToken {
                id,
                size: self.pieces.len(),
            })
    }

    pub fn id_of(&self, surface: &str) -> Option<TokenId> {
        self.by_surface.get(surface).copied()
    }

    pub fn check_id(&self, id: TokenId) -> Result<()> {
        self.piece(id).map(|_| ())
    }

    /// Concatenates the bytes of `ids`.
    pub fn detokenize(&self, ids: &[TokenId]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            out.extend_from_slice(self.piece(id)?.bytes());
        }
        Ok(out)
    }

    fn single_byte_id(&self, byte: u8) -> Option<TokenId> {
        self.by_bytes
            .get([byte].as_slice())
            .copied()
            .or(self.fallback[byte as usize])
    }

    /// Whether `byte` can be produced by a single piece.
    pub fn represents(&self, byte: u8) -> bool {
        self.single_byte_id(byte).is_some()
    }

    /// True when every byte value is representable, i.e. any byte string can be generated.
    pub fn is_open(&self) -> bool {
        (0..=255u8).all(|b| self.represents(b))
    }

    /// Left-to-right longest-match segmentation, falling back to byte pieces.
    ///
    /// Fails only when some byte of `text` has no single-piece representation,
    /// which cannot happen for an open vocabulary.
    pub fn tokenize_greedy(&self, text: &[u8]) -> Result<Vec<TokenId>> {
        let mut ids = Vec::new();
        let mut pos = 0;
        while pos < text.len() {
            let longest = (1..=self.max_piece_len.min(text.len() - pos))
                .rev()
                .find_map(|n| self.by_bytes.get(&text[pos..pos + n]).map(|&id| (id, n)));
            match longest {
                Some((id, n)) => {
                    ids.push(id);
                    pos += n;
                }
                None => {
                    let id = self.fallback[text[pos] as usize].ok_or_else(|| {
                        Error::Vocab(format!("byte 0x{:02X} is not representable", text[pos]))
                    })?;
                    ids.push(id);
                    pos += 1;
                }
            }
        }
        Ok(ids)
    }
}

/// Builder used by tests and toy-model generators.
#[derive(Debug, Default)]
pub struct VocabBuilder {
    marker: Marker,
    pieces: Vec<(String, PieceKind)>,
}

impl VocabBuilder {
    pub fn new(marker: Marker) -> Self {
        Self {
            marker,
            pieces: Vec::new(),
        }
    }

    pub fn eos(mut self, surface: &str) -> Self {
        self.pieces.push((surface.to_string(), PieceKind::Eos));
        self
    }

    pub fn control(mut self, surface: &str) -> Self {
        self.pieces.push((surface.to_string(), PieceKind::Control));
        self
    }

    pub fn normal<S: AsRef<str>>(mut self, surfaces: impl IntoIterator<Item = S>) -> Self {
        self.pieces.extend(
            surfaces
                .into_iter()
                .map(|s| (s.as_ref().to_string(), PieceKind::Normal)),
        );
        self
    }

    /// Appends all 256 `<0xNN>` pieces.
    pub fn byte_fallback(mut self) -> Self {
        self.pieces
            .extend((0..=255u8).map(|b| (byte_piece_surface(b), PieceKind::ByteFallback)));
        self
    }

    pub fn build(self) -> Result<Vocabulary> {
        Vocabulary::new(self.marker, self.pieces)
    }
}

/// On-disk vocabulary document.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VocabFile {
    #[serde(default)]
    pub marker: Option<String>,
    pub pieces: Vec<PieceSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PieceSpec {
    pub surface: String,
    pub kind: PieceKind,
}

impl TryFrom<VocabFile> for Vocabulary {
    type Error = Error;

    fn try_from(file: VocabFile) -> Result<Self> {
        let marker = match file.marker {
            Some(m) if !m.is_empty() => Marker::Leading(m),
            _ => Marker::None,
        };
        Vocabulary::new(
            marker,
            file.pieces
                .into_iter()
                .map(|p| (p.surface, p.kind))
                .collect(),
        )
    }
}

impl From<Vocabulary> for VocabFile {
    fn from(v: Vocabulary) -> Self {
        let marker = match v.marker.as_str() {
            "" => None,
            m => Some(m.to_string()),
        };
        VocabFile {
            marker,
            pieces: v
                .pieces
                .into_iter()
                .map(|p| PieceSpec {
                    surface: p.surface,
                    kind: p.kind,
                })
                .collect(),
        }
    }
}

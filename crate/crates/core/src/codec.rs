//! Unified multimodal token interface.
//!
//! A visual codebook quantizes non-overlapping image patches to discrete
//! codes. The unified vocabulary is the text vocabulary followed by the
//! visual code range and the two span markers, so its size is always
//! `text + K + 2`. [`encode`] turns a template-formatted conversation plus
//! its images into one id sequence with an answer mask; [`decode`] inverts it.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use rand::Rng;

use crate::render::SchematicImage;
use crate::seed;

#[derive(Debug, thiserror::Error)]
pub enum CodecError {
    #[error("not enough distinct patches: have {have}, need {need}")]
    InsufficientData { have: usize, need: usize },
    #[error("image dimensions {w}x{h} not divisible by patch size {patch}")]
    Dimension { w: u32, h: u32, patch: u32 },
    #[error("malformed conversation: {0}")]
    Template(String),
    #[error("malformed visual span: {0}")]
    Span(String),
    #[error("token id {0} out of vocabulary")]
    OutOfVocab(u32),
    #[error("file i/o: {0}")]
    Io(String),
    #[error("bad file format: {0}")]
    Format(String),
}

// ---------------------------------------------------------------------------
// Visual codebook
// ---------------------------------------------------------------------------

/// K centroids over flattened patch vectors (dimension `patch*patch*3`,
/// components in [0, 1]).
#[derive(Clone, Debug, PartialEq)]
pub struct VisualCodebook {
    pub patch_size: u32,
    pub centroids: Vec<Vec<f32>>,
}

pub const DEFAULT_PATCH_SIZE: u32 = 8;

fn image_patches(img: &SchematicImage, patch: u32) -> Result<Vec<Vec<f32>>, CodecError> {
    if img.width % patch != 0 || img.height % patch != 0 {
        return Err(CodecError::Dimension {
            w: img.width,
            h: img.height,
            patch,
        });
    }
    let cols = img.width / patch;
    let rows = img.height / patch;
    let mut patches = Vec::with_capacity((cols * rows) as usize);
    for pr in 0..rows {
        for pc in 0..cols {
            let mut v = Vec::with_capacity((patch * patch * 3) as usize);
            for y in 0..patch {
                for x in 0..patch {
                    let px = img.get(pc * patch + x, pr * patch + y);
                    v.push(px[0] as f32 / 255.0);
                    v.push(px[1] as f32 / 255.0);
                    v.push(px[2] as f32 / 255.0);
                }
            }
            patches.push(v);
        }
    }
    Ok(patches)
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = (*x - *y) as f64;
            d * d
        })
        .sum()
}

fn nearest(centroids: &[Vec<f32>], patch: &[f32]) -> (usize, f64) {
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(c, patch);
        // Strict less-than keeps ties on the lowest id.
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    (best, best_d)
}

impl VisualCodebook {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn dim(&self) -> usize {
        (self.patch_size * self.patch_size * 3) as usize
    }

    /// One centroid per distinct patch across `images` (sorted by value), the
    /// palette-aligned mode that makes schematic renders round-trip exactly.
    pub fn from_distinct_patches(
        images: &[&SchematicImage],
        patch_size: u32,
        max_k: usize,
    ) -> Result<VisualCodebook, CodecError> {
        let mut distinct: std::collections::BTreeSet<Vec<u8>> = std::collections::BTreeSet::new();
        for img in images {
            for p in image_patches(img, patch_size)? {
                distinct.insert(p.iter().map(|f| (f * 255.0).round() as u8).collect());
            }
        }
        if distinct.is_empty() || distinct.len() > max_k {
            return Err(CodecError::InsufficientData {
                have: distinct.len(),
                need: max_k,
            });
        }
        let centroids = distinct
            .into_iter()
            .map(|bytes| bytes.iter().map(|b| *b as f32 / 255.0).collect())
            .collect();
        Ok(VisualCodebook {
            patch_size,
            centroids,
        })
    }

    /// Map each patch of `img` to its nearest centroid, row-major.
    pub fn quantize(&self, img: &SchematicImage) -> Result<Vec<u32>, CodecError> {
        Ok(image_patches(img, self.patch_size)?
            .iter()
            .map(|p| nearest(&self.centroids, p).0 as u32)
            .collect())
    }

    /// Paint centroid patches back into an image of `cols` x `rows` patches.
    pub fn dequantize_with_shape(
        &self,
        codes: &[u32],
        cols: u32,
        rows: u32,
    ) -> Result<SchematicImage, CodecError> {
        if codes.len() != (cols * rows) as usize {
            return Err(CodecError::Span(format!(
                "{} codes cannot fill a {cols}x{rows} patch grid",
                codes.len()
            )));
        }
        let p = self.patch_size;
        let mut img = SchematicImage::filled(cols * p, rows * p, [0, 0, 0]);
        for (i, code) in codes.iter().enumerate() {
            let c = self
                .centroids
                .get(*code as usize)
                .ok_or_else(|| CodecError::Span(format!("code {code} out of range")))?;
            let pc = i as u32 % cols;
            let pr = i as u32 / cols;
            for y in 0..p {
                for x in 0..p {
                    let base = ((y * p + x) * 3) as usize;
                    img.set(
                        pc * p + x,
                        pr * p + y,
                        [
                            (c[base] * 255.0).round() as u8,
                            (c[base + 1] * 255.0).round() as u8,
                            (c[base + 2] * 255.0).round() as u8,
                        ],
                    );
                }
            }
        }
        Ok(img)
    }

    /// Square-shape convention used when only a code list is available.
    pub fn dequantize(&self, codes: &[u32]) -> Result<SchematicImage, CodecError> {
        let n = codes.len();
        let side = (n as f64).sqrt().round() as u32;
        if (side * side) as usize != n {
            return Err(CodecError::Span(format!(
                "span of {n} codes is not a perfect square"
            )));
        }
        if n == 0 {
            return Ok(SchematicImage::filled(0, 0, [0, 0, 0]));
        }
        self.dequantize_with_shape(codes, side, side)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CodecError> {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"FRGCBK1\0");
        bytes.extend_from_slice(&(self.k() as u32).to_le_bytes());
        bytes.extend_from_slice(&self.patch_size.to_le_bytes());
        bytes.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        for c in &self.centroids {
            for f in c {
                bytes.extend_from_slice(&f.to_le_bytes());
            }
        }
        fs::write(path.as_ref(), bytes).map_err(|e| CodecError::Io(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<VisualCodebook, CodecError> {
        let bytes = fs::read(path.as_ref()).map_err(|e| CodecError::Io(e.to_string()))?;
        if bytes.len() < 20 || &bytes[..8] != b"FRGCBK1\0" {
            return Err(CodecError::Format("bad codebook magic".into()));
        }
        let k = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let patch_size = u32::from_le_bytes(bytes[12..16].try_into().unwrap());
        let d = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
        if d != (patch_size * patch_size * 3) as usize {
            return Err(CodecError::Format("dimension does not match patch size".into()));
        }
        let expected = 20 + k * d * 4;
        if bytes.len() != expected {
            return Err(CodecError::Format(format!(
                "codebook payload is {} bytes, expected {expected}",
                bytes.len()
            )));
        }
        let mut centroids = Vec::with_capacity(k);
        let mut off = 20;
        for _ in 0..k {
            let mut c = Vec::with_capacity(d);
            for _ in 0..d {
                c.push(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()));
                off += 4;
            }
            centroids.push(c);
        }
        Ok(VisualCodebook {
            patch_size,
            centroids,
        })
    }
}

/// Lloyd iteration over all non-overlapping patches of `images`.
///
/// Returns the codebook and the mean squared quantization error measured at
/// the start of each iteration; the sequence never increases. Empty clusters
/// are reseeded to the patch farthest from its assigned centroid.
pub fn train_visual_codebook(
    images: &[&SchematicImage],
    k: usize,
    iters: usize,
    seed_value: u64,
) -> Result<(VisualCodebook, Vec<f64>), CodecError> {
    assert!(iters >= 1, "at least one iteration");
    assert!(k >= 1, "at least one centroid");
    let patch_size = DEFAULT_PATCH_SIZE;
    let mut patches = Vec::new();
    for img in images {
        patches.extend(image_patches(img, patch_size)?);
    }
    let mut distinct: BTreeMap<Vec<u8>, usize> = BTreeMap::new();
    for (i, p) in patches.iter().enumerate() {
        let key: Vec<u8> = p.iter().map(|f| (f * 255.0).round() as u8).collect();
        distinct.entry(key).or_insert(i);
    }
    if distinct.len() < k {
        return Err(CodecError::InsufficientData {
            have: distinct.len(),
            need: k,
        });
    }

    // Seeded init: uniform sample of k distinct patches.
    let mut rng = seed::rng(seed::mix(seed_value, &["codebook-init"]));
    let mut pool: Vec<usize> = distinct.values().copied().collect();
    for i in 0..k {
        let j = rng.gen_range(i..pool.len());
        pool.swap(i, j);
    }
    let mut centroids: Vec<Vec<f32>> = pool[..k].iter().map(|&i| patches[i].clone()).collect();

    let dim = (patch_size * patch_size * 3) as usize;
    let mut errors = Vec::with_capacity(iters);
    let mut assignment = vec![0usize; patches.len()];
    let mut dists = vec![0f64; patches.len()];
    for _ in 0..iters {
        let mut total = 0f64;
        for (i, p) in patches.iter().enumerate() {
            let (a, d) = nearest(&centroids, p);
            assignment[i] = a;
            dists[i] = d;
            total += d;
        }
        errors.push(total / patches.len() as f64);

        let mut sums = vec![vec![0f64; dim]; k];
        let mut counts = vec![0usize; k];
        for (i, p) in patches.iter().enumerate() {
            counts[assignment[i]] += 1;
            for (s, x) in sums[assignment[i]].iter_mut().zip(p) {
                *s += *x as f64;
            }
        }
        let mut used = vec![false; patches.len()];
        for c in 0..k {
            if counts[c] > 0 {
                for (dst, s) in centroids[c].iter_mut().zip(&sums[c]) {
                    *dst = (*s / counts[c] as f64) as f32;
                }
            } else {
                // Reseed to the farthest unclaimed patch.
                let far = (0..patches.len())
                    .filter(|i| !used[*i])
                    .max_by(|a, b| dists[*a].total_cmp(&dists[*b]))
                    .expect("patches is nonempty");
                used[far] = true;
                centroids[c] = patches[far].clone();
            }
        }
    }
    Ok((
        VisualCodebook {
            patch_size,
            centroids,
        },
        errors,
    ))
}

// ---------------------------------------------------------------------------
// Tokenizer
// ---------------------------------------------------------------------------

fn is_word_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || matches!(c, '_' | '\'' | '-' | '#')
}

/// Punctuation-aware word tokenization. Words keep `_ ' - #`; a newline is
/// its own token; every other non-space character stands alone.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for c in text.chars() {
        if is_word_char(c) {
            word.push(c);
            continue;
        }
        if !word.is_empty() {
            tokens.push(std::mem::take(&mut word));
        }
        if c == '\n' {
            tokens.push("\n".to_string());
        } else if !c.is_whitespace() {
            tokens.push(c.to_string());
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}

fn no_space_before(token: &str) -> bool {
    matches!(token, "." | "," | ":" | ";" | "!" | "?" | ")" | "]" | "}" | "/" | "\n")
}

fn no_space_after(token: &str) -> bool {
    matches!(token, "(" | "[" | "{" | "/" | "\n")
}

/// Inverse of [`tokenize`] under the canonical spacing rules.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    let mut prev: Option<&str> = None;
    for token in tokens {
        let t = token.as_ref();
        if let Some(p) = prev {
            if !no_space_before(t) && !no_space_after(p) {
                out.push(' ');
            }
        }
        out.push_str(t);
        prev = Some(t);
    }
    out
}

// ---------------------------------------------------------------------------
// Unified vocabulary
// ---------------------------------------------------------------------------

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;
pub const SPECIALS: [&str; 4] = ["<pad>", "<unk>", "<bos>", "<eos>"];

/// Text vocabulary + visual code range + the two span markers.
///
/// The text section has exactly `text_size` entries (specials, then corpus
/// words by descending frequency, then reserved filler), so the total size is
/// always `text_size + k + 2`.
#[derive(Clone, Debug, PartialEq)]
pub struct UnifiedVocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    k: u32,
}

impl UnifiedVocab {
    pub fn text_size(&self) -> u32 {
        self.tokens.len() as u32
    }

    pub fn visual_base(&self) -> u32 {
        self.text_size()
    }

    pub fn visual_k(&self) -> u32 {
        self.k
    }

    pub fn vis_open(&self) -> u32 {
        self.text_size() + self.k
    }

    pub fn vis_close(&self) -> u32 {
        self.text_size() + self.k + 1
    }

    /// Total unified size `|text| + K + 2`.
    pub fn size(&self) -> u32 {
        self.text_size() + self.k + 2
    }

    pub fn is_visual(&self, id: u32) -> bool {
        id >= self.visual_base() && id < self.visual_base() + self.k
    }

    pub fn visual_code(&self, id: u32) -> Option<u32> {
        self.is_visual(id).then(|| id - self.visual_base())
    }

    pub fn id_of_visual_code(&self, code: u32) -> u32 {
        debug_assert!(code < self.k);
        self.visual_base() + code
    }

    pub fn id_of_text(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn text_token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(|s| s.as_str())
    }

    pub fn encode_text_token(&self, token: &str) -> u32 {
        self.id_of_text(token).unwrap_or(UNK)
    }
}

/// Build the unified vocabulary from a text corpus.
///
/// Words are ranked by descending frequency with lexicographic tie-breaks and
/// capped so the text section is exactly `text_size` entries.
pub fn build_unified_vocab<'a, I>(corpus: I, text_size: u32, k: u32) -> UnifiedVocab
where
    I: IntoIterator<Item = &'a str>,
{
    assert!(text_size >= SPECIALS.len() as u32);
    let mut freq: BTreeMap<String, u64> = BTreeMap::new();
    for doc in corpus {
        for token in tokenize(doc) {
            *freq.entry(token).or_insert(0) += 1;
        }
    }
    let mut ranked: Vec<(String, u64)> = freq.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

    let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    let budget = text_size as usize - tokens.len();
    for (word, _) in ranked.into_iter().take(budget) {
        tokens.push(word);
    }
    while tokens.len() < text_size as usize {
        tokens.push(format!("<reserved_{}>", tokens.len()));
    }
    let index = tokens
        .iter()
        .enumerate()
        .map(|(i, t)| (t.clone(), i as u32))
        .collect();
    UnifiedVocab { tokens, index, k }
}

impl UnifiedVocab {
    /// One token per line in id order; the two header lines record the
    /// section sizes and marker ids. Newlines and backslashes are escaped.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CodecError> {
        let mut out = String::from("#forge-vocab v1\n");
        out.push_str(&format!(
            "#text={} visual={} vis_open={} vis_close={}\n",
            self.text_size(),
            self.k,
            self.vis_open(),
            self.vis_close()
        ));
        for token in &self.tokens {
            out.push_str(&token.replace('\\', "\\\\").replace('\n', "\\n"));
            out.push('\n');
        }
        fs::write(path.as_ref(), out).map_err(|e| CodecError::Io(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<UnifiedVocab, CodecError> {
        let text = fs::read_to_string(path.as_ref()).map_err(|e| CodecError::Io(e.to_string()))?;
        let mut lines = text.split('\n');
        let magic = lines.next().unwrap_or_default();
        if magic != "#forge-vocab v1" {
            return Err(CodecError::Format("bad vocab magic".into()));
        }
        let header = lines.next().unwrap_or_default();
        let mut text_size = None;
        let mut k = None;
        for part in header.trim_start_matches('#').split_whitespace() {
            if let Some(v) = part.strip_prefix("text=") {
                text_size = v.parse::<u32>().ok();
            }
            if let Some(v) = part.strip_prefix("visual=") {
                k = v.parse::<u32>().ok();
            }
        }
        let (text_size, k) = match (text_size, k) {
            (Some(t), Some(k)) => (t, k),
            _ => return Err(CodecError::Format("bad vocab header".into())),
        };
        let mut tokens = Vec::with_capacity(text_size as usize);
        for line in lines {
            if tokens.len() == text_size as usize {
                break;
            }
            let mut unescaped = String::with_capacity(line.len());
            let mut chars = line.chars();
            while let Some(c) = chars.next() {
                if c == '\\' {
                    match chars.next() {
                        Some('n') => unescaped.push('\n'),
                        Some('\\') => unescaped.push('\\'),
                        Some(other) => unescaped.push(other),
                        None => {}
                    }
                } else {
                    unescaped.push(c);
                }
            }
            tokens.push(unescaped);
        }
        if tokens.len() != text_size as usize {
            return Err(CodecError::Format("vocab file truncated".into()));
        }
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Ok(UnifiedVocab { tokens, index, k })
    }
}

// ---------------------------------------------------------------------------
// Conversation encode / decode
// ---------------------------------------------------------------------------

pub const HUMAN_ANCHOR: &str = "### Human: ";
pub const AGENT_ANCHOR: &str = "### Embodied Agent: ";

/// Unified token sequence: ids, a same-length answer mask, and the inclusive
/// (vis_open, vis_close) index pairs of every image span.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub answer_mask: Vec<bool>,
    pub image_spans: Vec<(usize, usize)>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Text segment or image placeholder index.
enum Piece {
    Text(String),
    Image(usize),
}

/// Split on `<vis><img:N></vis>` placeholders.
fn split_pieces(text: &str) -> Result<Vec<Piece>, CodecError> {
    let mut pieces = Vec::new();
    let mut rest = text;
    while let Some(start) = rest.find("<vis><img:") {
        let before = &rest[..start];
        if !before.is_empty() {
            pieces.push(Piece::Text(before.to_string()));
        }
        let tail = &rest[start + "<vis><img:".len()..];
        let end = tail
            .find("></vis>")
            .ok_or_else(|| CodecError::Template("unterminated image placeholder".into()))?;
        let idx: usize = tail[..end]
            .parse()
            .map_err(|_| CodecError::Template(format!("bad image index {:?}", &tail[..end])))?;
        pieces.push(Piece::Image(idx));
        rest = &tail[end + "></vis>".len()..];
    }
    if !rest.is_empty() {
        pieces.push(Piece::Text(rest.to_string()));
    }
    Ok(pieces)
}

struct Emitter<'v, 'c> {
    vocab: &'v UnifiedVocab,
    codebook: &'c VisualCodebook,
    ids: Vec<u32>,
    mask: Vec<bool>,
    spans: Vec<(usize, usize)>,
}

impl Emitter<'_, '_> {
    fn push(&mut self, id: u32, masked: bool) {
        self.ids.push(id);
        self.mask.push(masked);
    }

    fn push_text(&mut self, text: &str, masked: bool) {
        for token in tokenize(text) {
            self.push(self.vocab.encode_text_token(&token), masked);
        }
    }

    fn push_pieces(&mut self, text: &str, images: &[&SchematicImage], masked: bool) -> Result<(), CodecError> {
        for piece in split_pieces(text)? {
            match piece {
                Piece::Text(t) => self.push_text(&t, masked),
                Piece::Image(idx) => {
                    let img = images.get(idx).ok_or_else(|| {
                        CodecError::Template(format!("image index {idx} out of range"))
                    })?;
                    let codes = self.codebook.quantize(img)?;
                    let start = self.ids.len();
                    self.push(self.vocab.vis_open(), masked);
                    for code in codes {
                        self.push(self.vocab.id_of_visual_code(code), masked);
                    }
                    self.push(self.vocab.vis_close(), masked);
                    self.spans.push((start, self.ids.len() - 1));
                }
            }
        }
        Ok(())
    }
}

/// Encode a template-formatted conversation into a [`TokenSequence`].
///
/// Image placeholders `<vis><img:N></vis>` index into `images`; attached
/// images must already have dimensions divisible by the codebook patch size.
/// The answer mask is true exactly on answer bodies and their closing
/// newline.
pub fn encode(
    conversation: &str,
    images: &[&SchematicImage],
    vocab: &UnifiedVocab,
    codebook: &VisualCodebook,
) -> Result<TokenSequence, CodecError> {
    let first_human = conversation
        .find(HUMAN_ANCHOR)
        .ok_or_else(|| CodecError::Template("missing human turn".into()))?;
    let head = &conversation[..first_human];
    let mut emitter = Emitter {
        vocab,
        codebook,
        ids: Vec::new(),
        mask: Vec::new(),
        spans: Vec::new(),
    };
    emitter.push(BOS, false);
    emitter.push_text(head, false);

    let mut rest = &conversation[first_human..];
    while !rest.is_empty() {
        let body = rest
            .strip_prefix(HUMAN_ANCHOR)
            .ok_or_else(|| CodecError::Template("expected a human turn".into()))?;
        let agent_at = body
            .find(&format!("\n{AGENT_ANCHOR}"))
            .ok_or_else(|| CodecError::Template("human turn without an agent answer".into()))?;
        let question = &body[..agent_at];
        let after_q = &body[agent_at + 1 + AGENT_ANCHOR.len()..];
        let (answer, remainder) = match after_q.find(&format!("\n{HUMAN_ANCHOR}")) {
            Some(next) => (&after_q[..next], &after_q[next + 1..]),
            None => {
                let trimmed = after_q.strip_suffix('\n').ok_or_else(|| {
                    CodecError::Template("conversation must end with a newline".into())
                })?;
                (trimmed, "")
            }
        };

        emitter.push_text(HUMAN_ANCHOR.trim_end(), false);
        emitter.push_pieces(question, images, false)?;
        emitter.push_text("\n", false);
        emitter.push_text(AGENT_ANCHOR.trim_end(), false);
        emitter.push_pieces(answer, images, true)?;
        // The answer's closing newline is part of the supervised region.
        emitter.push_text("\n", true);
        rest = remainder;
    }
    emitter.push(EOS, false);
    Ok(TokenSequence {
        ids: emitter.ids,
        answer_mask: emitter.mask,
        image_spans: emitter.spans,
    })
}

/// Decoded conversation: the reconstructed text with `<vis><img:N></vis>`
/// placeholders, the decoded images, and a flag for non-square spans that
/// could not be rendered.
#[derive(Clone, Debug)]
pub struct Decoded {
    pub text: String,
    pub images: Vec<SchematicImage>,
    /// Raw code lists for spans whose length is not a perfect square.
    pub raw_spans: Vec<Vec<u32>>,
    pub malformed: bool,
}

/// Inverse of [`encode`] up to OOV substitution.
pub fn decode(
    seq: &TokenSequence,
    vocab: &UnifiedVocab,
    codebook: &VisualCodebook,
) -> Result<Decoded, CodecError> {
    let mut tokens: Vec<String> = Vec::new();
    let mut images = Vec::new();
    let mut raw_spans = Vec::new();
    let mut malformed = false;
    let mut i = 0usize;
    while i < seq.ids.len() {
        let id = seq.ids[i];
        if id == BOS || id == EOS || id == PAD {
            i += 1;
            continue;
        }
        if id == vocab.vis_close() {
            return Err(CodecError::Span("vis_close without vis_open".into()));
        }
        if vocab.is_visual(id) {
            return Err(CodecError::Span("visual token outside a span".into()));
        }
        if id == vocab.vis_open() {
            let mut codes = Vec::new();
            let mut j = i + 1;
            loop {
                let inner = *seq
                    .ids
                    .get(j)
                    .ok_or_else(|| CodecError::Span("unterminated visual span".into()))?;
                if inner == vocab.vis_close() {
                    break;
                }
                let code = vocab
                    .visual_code(inner)
                    .ok_or_else(|| CodecError::Span("non-visual token inside a span".into()))?;
                codes.push(code);
                j += 1;
            }
            match codebook.dequantize(&codes) {
                Ok(img) => {
                    tokens.push(format!("<vis><img:{}></vis>", images.len() + raw_spans.len()));
                    images.push(img);
                }
                Err(_) => {
                    tokens.push(format!("<vis><img:{}></vis>", images.len() + raw_spans.len()));
                    raw_spans.push(codes);
                    malformed = true;
                }
            }
            i = j + 1;
            continue;
        }
        let token = vocab
            .text_token(id)
            .ok_or(CodecError::OutOfVocab(id))?
            .to_string();
        tokens.push(token);
        i += 1;
    }
    Ok(Decoded {
        text: detokenize(&tokens),
        images,
        raw_spans,
        malformed,
    })
}

/// Structural invariants of a token sequence against a vocabulary.
pub fn check_sequence(seq: &TokenSequence, vocab: &UnifiedVocab) -> Result<(), CodecError> {
    if seq.ids.len() != seq.answer_mask.len() {
        return Err(CodecError::Span("mask length mismatch".into()));
    }
    let mut open = false;
    for (i, &id) in seq.ids.iter().enumerate() {
        if id >= vocab.size() {
            return Err(CodecError::OutOfVocab(id));
        }
        if id == vocab.vis_open() {
            if open {
                return Err(CodecError::Span(format!("nested vis_open at {i}")));
            }
            open = true;
        } else if id == vocab.vis_close() {
            if !open {
                return Err(CodecError::Span(format!("stray vis_close at {i}")));
            }
            open = false;
        } else if vocab.is_visual(id) && !open {
            return Err(CodecError::Span(format!("bare visual token at {i}")));
        }
    }
    if open {
        return Err(CodecError::Span("unterminated span".into()));
    }
    let mut last_end = 0usize;
    for &(start, end) in &seq.image_spans {
        if start >= end || end >= seq.ids.len() || (last_end > 0 && start < last_end) {
            return Err(CodecError::Span("bad span bounds".into()));
        }
        last_end = end;
    }
    Ok(())
}

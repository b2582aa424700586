//! Token vocabulary and coordinate quantization.
//!
//! Id layout is fixed: special tokens first, then the 1000 location tokens
//! `<0>`..`<999>` as one contiguous block, then one token per charset
//! character in the order given.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::geometry::QuantPolygon;

/// Number of coordinate bins (and location tokens).
pub const NUM_BINS: usize = 1000;

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const SEE: &str = "<see>";
pub const SEP: &str = "<sep>";
pub const OCR: &str = "<ocr>";
pub const READ: &str = "<read>";
pub const VQA: &str = "<vqa>";

/// Special tokens in id order.
pub const SPECIALS: [&str; 8] = [PAD, BOS, EOS, SEE, SEP, OCR, READ, VQA];

/// All printable ASCII characters, space through tilde.
pub fn printable_ascii() -> String {
    (b' '..=b'~').map(char::from).collect()
}

/// A coordinate bin index in `0..1000`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct QuantBin(u16);

impl QuantBin {
    pub fn new(value: usize) -> Result<Self> {
        if value < NUM_BINS {
            Ok(QuantBin(value as u16))
        } else {
            Err(Error::InvalidCoordinate(format!(
                "bin {value} outside 0..{NUM_BINS}"
            )))
        }
    }

    /// Clamps `value` into the bin range.
    pub fn saturating(value: i64) -> Self {
        QuantBin(value.clamp(0, NUM_BINS as i64 - 1) as u16)
    }

    pub fn value(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for QuantBin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Maps a pixel coordinate to its bin along an axis of `extent` pixels.
pub fn quantize_coord(pixel: f64, extent: usize) -> Result<QuantBin> {
    if extent == 0 {
        return Err(Error::InvalidCoordinate("extent must be positive".into()));
    }
    if !pixel.is_finite() || pixel < 0.0 {
        return Err(Error::InvalidCoordinate(format!(
            "pixel {pixel} must be finite and non-negative"
        )));
    }
    let bin = (pixel / extent as f64 * NUM_BINS as f64).floor();
    Ok(QuantBin::saturating(bin as i64))
}

/// Bin-center pixel coordinate.
pub fn dequantize_coord(bin: QuantBin, extent: usize) -> f64 {
    (bin.value() as f64 + 0.5) / NUM_BINS as f64 * extent as f64
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
    char_to_id: HashMap<char, usize>,
    loc_start: usize,
}

impl Vocabulary {
    /// Builds the vocabulary for a character set. Characters must be unique
    /// and non-control.
    pub fn build(charset: &str) -> Result<Self> {
        if charset.is_empty() {
            return Err(Error::EmptyCharset);
        }
        let mut id_to_token: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let loc_start = id_to_token.len();
        id_to_token.extend((0..NUM_BINS).map(|k| format!("<{k}>")));
        let mut char_to_id = HashMap::new();
        for c in charset.chars() {
            if c.is_control() {
                return Err(Error::Invalid(format!(
                    "control character {c:?} cannot be a token"
                )));
            }
            if char_to_id.insert(c, id_to_token.len()).is_some() {
                return Err(Error::DuplicateChar(c));
            }
            id_to_token.push(c.to_string());
        }
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Vocabulary {
            token_to_id,
            id_to_token,
            char_to_id,
            loc_start,
        })
    }

    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    fn special(&self, name: &str) -> usize {
        self.token_to_id[name]
    }

    pub fn pad_id(&self) -> usize {
        self.special(PAD)
    }
    pub fn bos_id(&self) -> usize {
        self.special(BOS)
    }
    pub fn eos_id(&self) -> usize {
        self.special(EOS)
    }
    pub fn see_id(&self) -> usize {
        self.special(SEE)
    }
    pub fn sep_id(&self) -> usize {
        self.special(SEP)
    }
    pub fn ocr_id(&self) -> usize {
        self.special(OCR)
    }
    pub fn read_id(&self) -> usize {
        self.special(READ)
    }
    pub fn vqa_id(&self) -> usize {
        self.special(VQA)
    }

    /// First id of the location block; `<k>` has id `loc_start() + k`.
    pub fn loc_start(&self) -> usize {
        self.loc_start
    }

    pub fn loc_id(&self, bin: QuantBin) -> usize {
        self.loc_start + bin.value()
    }

    /// Bin of a location-token id, if `id` lies in the location block.
    pub fn loc_bin(&self, id: usize) -> Option<QuantBin> {
        id.checked_sub(self.loc_start)
            .filter(|&k| k < NUM_BINS)
            .map(|k| QuantBin(k as u16))
    }

    pub fn is_text(&self, id: usize) -> bool {
        id >= self.loc_start + NUM_BINS && id < self.size()
    }

    /// The charset in id order.
    pub fn charset(&self) -> String {
        self.id_to_token[self.loc_start + NUM_BINS..].concat()
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| self.char_to_id.get(&c).copied().ok_or(Error::UnknownChar(c)))
            .collect()
    }

    /// Renders every token literally, specials and location tokens included.
    pub fn detokenize(&self, ids: &[usize]) -> Result<String> {
        ids.iter()
            .map(|&id| {
                self.token(id).ok_or(Error::TokenOutOfRange {
                    id,
                    size: self.size(),
                })
            })
            .collect()
    }

    /// Concatenates the text tokens of `ids`, skipping specials and locations.
    pub fn decode_text(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&id| self.is_text(id))
            .map(|&id| self.id_to_token[id].as_str())
            .collect()
    }

    /// Eight location-token ids for a polygon, in its bin layout order.
    pub fn encode_polygon_tokens(&self, polygon: &QuantPolygon) -> [usize; 8] {
        polygon.bins().map(|b| self.loc_id(b))
    }

    /// Inverse of [`Vocabulary::encode_polygon_tokens`].
    pub fn decode_polygon_tokens(&self, ids: &[usize]) -> Result<QuantPolygon> {
        if ids.len() != 8 {
            return Err(Error::Invalid(format!(
                "expected 8 location tokens, got {}",
                ids.len()
            )));
        }
        let mut bins = [QuantBin::default(); 8];
        for (slot, &id) in bins.iter_mut().zip(ids) {
            *slot = self
                .loc_bin(id)
                .ok_or_else(|| Error::Invalid(format!("token id {id} is not a location token")))?;
        }
        Ok(QuantPolygon::new(bins))
    }

    /// Writes the `id<TAB>token` manifest.
    pub fn write_manifest<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for (id, tok) in self.id_to_token.iter().enumerate() {
            writeln!(w, "{id}\t{tok}")?;
        }
        Ok(())
    }

    /// Reads a manifest written by [`Vocabulary::write_manifest`] and checks
    /// that it has the canonical layout.
    pub fn read_manifest<R: BufRead>(r: R) -> Result<Self> {
        let mut tokens = Vec::new();
        for (n, line) in r.lines().enumerate() {
            let line = line.map_err(|e| Error::io("<manifest>", e))?;
            let (id, tok) = line
                .split_once('\t')
                .ok_or_else(|| Error::Invalid(format!("manifest line {}: missing tab", n + 1)))?;
            let id: usize = id
                .parse()
                .map_err(|_| Error::Invalid(format!("manifest line {}: bad id {id:?}", n + 1)))?;
            if id != tokens.len() {
                return Err(Error::Invalid(format!(
                    "manifest line {}: expected id {}, found {id}",
                    n + 1,
                    tokens.len()
                )));
            }
            tokens.push(tok.to_string());
        }
        let fixed = SPECIALS.len() + NUM_BINS;
        if tokens.len() <= fixed {
            return Err(Error::Invalid("manifest has no charset entries".into()));
        }
        let charset: String = tokens[fixed..].concat();
        let vocab = Vocabulary::build(&charset)?;
        if vocab.id_to_token != tokens {
            return Err(Error::Invalid("manifest does not follow the canonical layout".into()));
        }
        Ok(vocab)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_for_two_chars() {
        let v = Vocabulary::build("ab").unwrap();
        assert_eq!(v.size(), 2 + NUM_BINS + SPECIALS.len());
        assert_eq!(v.id("<999>").unwrap() - v.id("<0>").unwrap(), 999);
        assert_eq!(v.id("a"), Some(SPECIALS.len() + NUM_BINS));
        for k in 0..NUM_BINS {
            assert_eq!(v.loc_id(QuantBin::new(k).unwrap()) - v.loc_start(), k);
        }
        assert!(v.see_id() < v.loc_start());
        assert!(!v.is_text(v.see_id()));
    }

    #[test]
    fn rejects_bad_charsets() {
        assert!(matches!(Vocabulary::build(""), Err(Error::EmptyCharset)));
        assert!(matches!(
            Vocabulary::build("abca"),
            Err(Error::DuplicateChar('a'))
        ));
        assert!(Vocabulary::build("a\tb").is_err());
    }

    #[test]
    fn maps_are_inverse() {
        let v = Vocabulary::build(&printable_ascii()).unwrap();
        for id in 0..v.size() {
            assert_eq!(v.id(v.token(id).unwrap()), Some(id));
        }
    }

    #[test]
    fn printable_round_trip() {
        let v = Vocabulary::build(&printable_ascii()).unwrap();
        let ids = v.tokenize("Total: $4.50").unwrap();
        assert_eq!(v.detokenize(&ids).unwrap(), "Total: $4.50");
        assert_eq!(v.decode_text(&ids), "Total: $4.50");
        assert!(matches!(v.tokenize("é"), Err(Error::UnknownChar('é'))));
    }

    #[test]
    fn quantize_examples() {
        assert_eq!(quantize_coord(640.0, 1280).unwrap().value(), 500);
        assert_eq!(quantize_coord(0.0, 7).unwrap().value(), 0);
        assert_eq!(quantize_coord(1280.0, 1280).unwrap().value(), 999);
        assert_eq!(quantize_coord(5000.0, 1280).unwrap().value(), 999);
        assert!(quantize_coord(-0.5, 10).is_err());
        assert!(quantize_coord(1.0, 0).is_err());
        assert!(quantize_coord(f64::NAN, 10).is_err());
    }

    #[test]
    fn dequantize_examples() {
        let b = QuantBin::new(500).unwrap();
        assert!((dequantize_coord(b, 1280) - 640.64).abs() < 1e-9);
        assert!((dequantize_coord(QuantBin::new(0).unwrap(), 1000) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn quantize_dequantize_sweep() {
        for pixel in 0..1000 {
            let b = quantize_coord(pixel as f64, 1000).unwrap();
            let back = quantize_coord(dequantize_coord(b, 1000), 1000).unwrap();
            assert_eq!(b, back, "pixel {pixel}");
        }
    }

    #[test]
    fn quantization_is_monotone_partition() {
        for extent in [1usize, 3, 256, 999, 1000, 1280, 4096] {
            let mut prev = 0;
            for step in 0..(4 * extent) {
                let px = step as f64 / 4.0;
                let b = quantize_coord(px, extent).unwrap().value();
                assert!(b >= prev);
                prev = b;
                // the half-open interval of bin b contains px
                let lo = b as f64 * extent as f64 / 1000.0;
                let hi = (b + 1) as f64 * extent as f64 / 1000.0;
                assert!(lo <= px + 1e-9 && px < hi + 1e-9, "extent {extent} px {px} bin {b}");
            }
        }
    }

    #[test]
    fn polygon_tokens() {
        let v = Vocabulary::build("ab").unwrap();
        let zero = QuantPolygon::new([QuantBin::default(); 8]);
        assert_eq!(v.encode_polygon_tokens(&zero), [v.loc_start(); 8]);
        let p = QuantPolygon::from_values([1, 2, 3, 4, 5, 6, 7, 8]).unwrap();
        let ids = v.encode_polygon_tokens(&p);
        for (k, id) in ids.iter().enumerate() {
            assert_eq!(*id, v.loc_start() + k + 1);
        }
        assert_eq!(v.decode_polygon_tokens(&ids).unwrap(), p);
        assert!(v.decode_polygon_tokens(&ids[..7]).is_err());
        assert!(v.decode_polygon_tokens(&[v.see_id(); 8]).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let v = Vocabulary::build(&printable_ascii()).unwrap();
        let mut buf = Vec::new();
        v.write_manifest(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("0\t<pad>\n"));
        assert!(text.contains("\n8\t<0>\n"));
        assert!(text.contains("\n1007\t<999>\n"));
        let back = Vocabulary::read_manifest(buf.as_slice()).unwrap();
        assert_eq!(back, v);
        assert!(Vocabulary::read_manifest("0\t<pad>\n5\tx\n".as_bytes()).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(1000))]

            #[test]
            fn tokenize_round_trip(s in "[ -~]{0,64}") {
                let v = Vocabulary::build(&printable_ascii()).unwrap();
                let ids = v.tokenize(&s).unwrap();
                prop_assert_eq!(v.detokenize(&ids).unwrap(), s);
            }

            #[test]
            fn polygon_token_round_trip(bins in proptest::array::uniform8(0usize..1000)) {
                let v = Vocabulary::build("xyz").unwrap();
                let p = QuantPolygon::from_values(bins).unwrap();
                prop_assert_eq!(v.decode_polygon_tokens(&v.encode_polygon_tokens(&p)).unwrap(), p);
            }
        }
    }
}

//! Alphanumeric tokenization.
//!
//! Numbers are broken into digit tokens that carry their decimal place
//! (`"12.3"` becomes `1_1 2_0 . 3_-1`), property values are written as
//! `<name>` tag, fixed-width numeral and `|` separator, and everything after
//! the last property block is free text. The [`Vocabulary`] owns the
//! bidirectional token/id mapping and the per-property numeral [`Schema`].

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::ops::Range;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const MASK: &str = "[MASK]";
pub const END: &str = "[END]";
pub const SEPARATOR: &str = "|";
pub const DOT: &str = ".";
pub const NEGATIVE: &str = "-";

fn numeric_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"[+-]?[0-9]+(?:\.[0-9]*)?").unwrap())
}

fn whole_number_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^([+-])?([0-9]+)(?:(\.)([0-9]*))?$").unwrap())
}

fn numeric_token_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^([0-9])_(-?[0-9]+)$").unwrap())
}

/// A digit `digit` sitting at decimal place `place` (`10^place`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NumericToken {
    pub digit: u8,
    pub place: i32,
}

impl NumericToken {
    pub fn new(digit: u8, place: i32) -> Result<Self> {
        if digit > 9 {
            return Err(Error::MalformedNumeral(format!("digit {digit} is not in 0..=9")));
        }
        Ok(Self { digit, place })
    }

    /// Signed magnitude `digit * 10^place`.
    pub fn value(&self) -> f64 {
        self.digit as f64 * 10f64.powi(self.place)
    }

    pub fn parse(form: &str) -> Option<Self> {
        let caps = numeric_token_regex().captures(form)?;
        let digit = caps[1].parse().ok()?;
        let place = caps[2].parse().ok()?;
        Some(Self { digit, place })
    }
}

impl fmt::Display for NumericToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}_{}", self.digit, self.place)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Token {
    Numeric(NumericToken),
    Text(String),
    PropertyTag(String),
    Separator,
    Dot,
    Negative,
    Mask,
    Pad,
    End,
}

impl Token {
    /// Parses the textual form used in vocabulary files.
    pub fn parse(form: &str) -> Token {
        match form {
            PAD => Token::Pad,
            MASK => Token::Mask,
            END => Token::End,
            SEPARATOR => Token::Separator,
            DOT => Token::Dot,
            NEGATIVE => Token::Negative,
            _ => {
                if let Some(n) = NumericToken::parse(form) {
                    Token::Numeric(n)
                } else if form.len() > 2 && form.starts_with('<') && form.ends_with('>') {
                    Token::PropertyTag(form[1..form.len() - 1].to_string())
                } else {
                    Token::Text(form.to_string())
                }
            }
        }
    }

    pub fn is_text(&self) -> bool {
        matches!(self, Token::Text(_))
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Token::Numeric(n) => write!(f, "{n}"),
            Token::Text(s) => f.write_str(s),
            Token::PropertyTag(name) => write!(f, "<{name}>"),
            Token::Separator => f.write_str(SEPARATOR),
            Token::Dot => f.write_str(DOT),
            Token::Negative => f.write_str(NEGATIVE),
            Token::Mask => f.write_str(MASK),
            Token::Pad => f.write_str(PAD),
            Token::End => f.write_str(END),
        }
    }
}

/// Exact decimal `mantissa / 10^scale`.
#[derive(Debug, Clone, Copy, Eq, Serialize, Deserialize)]
pub struct Decimal {
    pub mantissa: i64,
    pub scale: u32,
}

impl Decimal {
    pub fn new(mantissa: i64, scale: u32) -> Self {
        Self { mantissa, scale }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let caps = whole_number_regex()
            .captures(s)
            .ok_or_else(|| Error::MalformedNumber(s.to_string()))?;
        let negative = caps.get(1).is_some_and(|m| m.as_str() == "-");
        let frac = caps.get(4).map_or("", |m| m.as_str());
        let digits = format!("{}{}", &caps[2], frac);
        let magnitude: i64 = digits
            .parse()
            .map_err(|_| Error::MalformedNumber(s.to_string()))?;
        let mantissa = if negative { -magnitude } else { magnitude };
        Ok(Self { mantissa, scale: frac.len() as u32 })
    }

    /// Rounds `x` to `frac_digits` decimals.
    pub fn from_f64(x: f64, frac_digits: u32) -> Result<Self> {
        if !x.is_finite() {
            return Err(Error::MalformedNumber(x.to_string()));
        }
        Self::parse(&format!("{:.*}", frac_digits as usize, x))
    }

    pub fn to_f64(&self) -> f64 {
        self.mantissa as f64 / 10f64.powi(self.scale as i32)
    }

    /// The same value expressed with a larger scale.
    pub fn rescale(&self, scale: u32) -> Option<Self> {
        if scale < self.scale {
            return None;
        }
        let factor = 10i64.checked_pow(scale - self.scale)?;
        Some(Self { mantissa: self.mantissa.checked_mul(factor)?, scale })
    }

    /// Renders with exactly `int_digits` integer and `frac_digits` fraction
    /// digits (zero padded), preceded by `-` when negative.
    pub fn render_fixed(&self, int_digits: u32, frac_digits: u32) -> Option<String> {
        let v = self.rescale(frac_digits)?;
        let magnitude = v.mantissa.unsigned_abs();
        let unit = 10u64.pow(frac_digits);
        let int_part = magnitude / unit;
        if int_part.to_string().len() > int_digits as usize {
            return None;
        }
        let sign = if v.mantissa < 0 { "-" } else { "" };
        if frac_digits == 0 {
            Some(format!("{sign}{int_part:0w$}", w = int_digits as usize))
        } else {
            Some(format!(
                "{sign}{int_part:0w$}.{:0f$}",
                magnitude % unit,
                w = int_digits as usize,
                f = frac_digits as usize
            ))
        }
    }
}

impl PartialEq for Decimal {
    fn eq(&self, other: &Self) -> bool {
        let scale = self.scale.max(other.scale);
        let lift = |d: &Decimal| d.mantissa as i128 * 10i128.pow(scale - d.scale);
        lift(self) == lift(other)
    }
}

impl fmt::Display for Decimal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let unit = 10u64.pow(self.scale);
        let magnitude = self.mantissa.unsigned_abs();
        let sign = if self.mantissa < 0 { "-" } else { "" };
        if self.scale == 0 {
            write!(f, "{sign}{magnitude}")
        } else {
            write!(f, "{sign}{}.{:0w$}", magnitude / unit, magnitude % unit, w = self.scale as usize)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Segment<'a> {
    Numeric(&'a str),
    Literal(&'a str),
}

/// Splits `text` into numeric matches and the literal text between them.
/// Concatenating the segments reproduces the input.
pub fn split_numerics(text: &str) -> Vec<Segment<'_>> {
    let mut out = Vec::new();
    let mut last = 0;
    for m in numeric_regex().find_iter(text) {
        if m.start() > last {
            out.push(Segment::Literal(&text[last..m.start()]));
        }
        out.push(Segment::Numeric(m.as_str()));
        last = m.end();
    }
    if last < text.len() {
        out.push(Segment::Literal(&text[last..]));
    }
    out
}

/// Inclusive range of decimal places with numeric tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlaceRange {
    pub min: i32,
    pub max: i32,
}

impl PlaceRange {
    pub fn contains(&self, place: i32) -> bool {
        (self.min..=self.max).contains(&place)
    }
}

/// One token per character: sign, digits (with positional places) and dot.
/// A leading `+` produces no token.
pub fn tokenize_number(s: &str, places: PlaceRange) -> Result<Vec<Token>> {
    let caps = whole_number_regex()
        .captures(s)
        .ok_or_else(|| Error::MalformedNumber(s.to_string()))?;
    let mut out = Vec::with_capacity(s.len());
    if caps.get(1).is_some_and(|m| m.as_str() == "-") {
        out.push(Token::Negative);
    }
    let int = caps[2].as_bytes();
    let mut push_digit = |b: u8, place: i32| -> Result<()> {
        if !places.contains(place) {
            return Err(Error::PlaceOutOfRange { place, min: places.min, max: places.max });
        }
        out.push(Token::Numeric(NumericToken { digit: b - b'0', place }));
        Ok(())
    };
    for (i, &b) in int.iter().enumerate() {
        push_digit(b, (int.len() - 1 - i) as i32)?;
    }
    if caps.get(3).is_some() {
        let frac = caps.get(4).map_or("", |m| m.as_str()).as_bytes().to_vec();
        // the dot goes between place 0 and place -1
        let mut tail = Vec::with_capacity(frac.len());
        for (i, &b) in frac.iter().enumerate() {
            let place = -(i as i32) - 1;
            if !places.contains(place) {
                return Err(Error::PlaceOutOfRange { place, min: places.min, max: places.max });
            }
            tail.push(Token::Numeric(NumericToken { digit: b - b'0', place }));
        }
        out.push(Token::Dot);
        out.extend(tail);
    }
    Ok(out)
}

/// Inverse of [`tokenize_number`]; validates positional consistency.
pub fn detokenize_number(tokens: &[Token]) -> Result<Decimal> {
    let mut iter = tokens.iter().peekable();
    let negative = matches!(iter.peek(), Some(Token::Negative));
    if negative {
        iter.next();
    }
    let mut magnitude: i64 = 0;
    let mut expected: Option<i32> = None;
    let mut seen_dot = false;
    let mut scale = 0u32;
    let mut any_digit = false;
    for tok in iter {
        match tok {
            Token::Numeric(n) => {
                match expected {
                    None if n.place < 0 => {
                        return Err(Error::MalformedNumeral(format!(
                            "numeral starts at fractional place {}",
                            n.place
                        )))
                    }
                    Some(p) if p != n.place => {
                        return Err(Error::MalformedNumeral(format!(
                            "expected place {p}, found {}",
                            n.place
                        )))
                    }
                    _ => {}
                }
                if n.place < 0 && !seen_dot {
                    return Err(Error::MalformedNumeral("fraction digit before dot".into()));
                }
                magnitude = magnitude
                    .checked_mul(10)
                    .and_then(|m| m.checked_add(n.digit as i64))
                    .ok_or_else(|| Error::MalformedNumeral("numeral overflows".into()))?;
                if n.place < 0 {
                    scale += 1;
                }
                any_digit = true;
                expected = Some(n.place - 1);
            }
            Token::Dot => {
                if seen_dot {
                    return Err(Error::MalformedNumeral("duplicate dot".into()));
                }
                if expected != Some(-1) {
                    return Err(Error::MalformedNumeral("dot not after the units digit".into()));
                }
                seen_dot = true;
            }
            other => {
                return Err(Error::MalformedNumeral(format!("unexpected token {other}")));
            }
        }
    }
    if !any_digit {
        return Err(Error::MalformedNumeral("no digits".into()));
    }
    if !seen_dot && expected != Some(-1) {
        return Err(Error::MalformedNumeral("integer part does not end at place 0".into()));
    }
    let mantissa = if negative { -magnitude } else { magnitude };
    Ok(Decimal { mantissa, scale })
}

/// Numeral layout of one property.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PropertySchema {
    pub name: String,
    #[serde(default)]
    pub signed: bool,
    #[serde(default = "default_int_digits")]
    pub int_digits: u32,
    #[serde(default = "default_frac_digits")]
    pub frac_digits: u32,
}

fn default_int_digits() -> u32 {
    1
}

fn default_frac_digits() -> u32 {
    3
}

impl PropertySchema {
    pub fn new(name: impl Into<String>, int_digits: u32, frac_digits: u32) -> Self {
        Self { name: name.into(), signed: false, int_digits, frac_digits }
    }

    /// Slot template of the fixed-width numeral.
    pub fn template(&self, negative: bool) -> Vec<Slot> {
        let mut slots = Vec::new();
        if negative {
            slots.push(Slot::Negative);
        }
        for p in (0..self.int_digits as i32).rev() {
            slots.push(Slot::Digit(p));
        }
        if self.frac_digits > 0 {
            slots.push(Slot::Dot);
            for p in 1..=self.frac_digits as i32 {
                slots.push(Slot::Digit(-p));
            }
        }
        slots
    }

    pub fn width(&self, negative: bool) -> usize {
        self.int_digits as usize + negative as usize + (self.frac_digits > 0) as usize + self.frac_digits as usize
    }

    /// Fixed-width rendering of `value` rounded to schema precision.
    pub fn render(&self, value: Decimal) -> Result<String> {
        let out_of_range = || Error::ValueOutOfRange { name: self.name.clone(), value: value.to_f64() };
        if value.mantissa < 0 && !self.signed {
            return Err(out_of_range());
        }
        if value.scale > self.frac_digits {
            return Err(out_of_range());
        }
        value.render_fixed(self.int_digits, self.frac_digits).ok_or_else(out_of_range)
    }

    pub fn quantize(&self, value: f64) -> Result<Decimal> {
        Decimal::from_f64(value, self.frac_digits).map_err(|_| Error::ValueOutOfRange {
            name: self.name.clone(),
            value,
        })
    }
}

/// What a numeral slot may hold.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Negative,
    Dot,
    Digit(i32),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schema {
    pub properties: Vec<PropertySchema>,
}

impl Schema {
    pub fn new(properties: Vec<PropertySchema>) -> Self {
        Self { properties }
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.properties.iter().position(|p| p.name == name)
    }

    pub fn places(&self) -> PlaceRange {
        let max = self.properties.iter().map(|p| p.int_digits as i32 - 1).max().unwrap_or(0);
        let min = self.properties.iter().map(|p| -(p.frac_digits as i32)).min().unwrap_or(0);
        PlaceRange { min: min.min(0), max: max.max(0) }
    }

    fn validate(&self) -> Result<()> {
        for (i, p) in self.properties.iter().enumerate() {
            if p.name.is_empty() || p.name.contains(['<', '>', '|']) || p.name.chars().any(char::is_whitespace) {
                return Err(Error::InvalidSchema(format!("bad property name {:?}", p.name)));
            }
            if p.int_digits == 0 || p.int_digits > 12 || p.frac_digits > 9 {
                return Err(Error::InvalidSchema(format!("unsupported numeral width for {:?}", p.name)));
            }
            if self.properties[..i].iter().any(|q| q.name == p.name) {
                return Err(Error::InvalidSchema(format!("duplicate property {:?}", p.name)));
            }
        }
        Ok(())
    }
}

/// Location of one `<tag> numeral |` block inside a sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PropertyBlock {
    /// Index into the schema.
    pub property: usize,
    pub tag: usize,
    pub numeral: Range<usize>,
    pub separator: usize,
}

/// Token ids `[x^p, x^t]`: property blocks followed by text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedSequence {
    pub ids: Vec<usize>,
    pub blocks: Vec<PropertyBlock>,
    /// Number of property tokens `k`; text occupies `k..len()`.
    pub prop_len: usize,
}

impl TokenizedSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn text_len(&self) -> usize {
        self.ids.len() - self.prop_len
    }

    pub fn text_range(&self) -> Range<usize> {
        self.prop_len..self.ids.len()
    }

    pub fn text_ids(&self) -> &[usize] {
        &self.ids[self.prop_len..]
    }

    pub fn prop_ids(&self) -> &[usize] {
        &self.ids[..self.prop_len]
    }

    /// Positions of every numeral token across all property blocks.
    pub fn numeral_positions(&self) -> Vec<usize> {
        self.blocks.iter().flat_map(|b| b.numeral.clone()).collect()
    }

    /// Copy with the tokens at `positions` replaced by `id`.
    pub fn with_replaced(&self, positions: impl IntoIterator<Item = usize>, id: usize) -> Self {
        let mut out = self.clone();
        for p in positions {
            out.ids[p] = id;
        }
        out
    }

    /// Copy with `ids[positions[i]] = fill[i]`.
    pub fn with_filled(&self, positions: &[usize], fill: &[usize]) -> Self {
        let mut out = self.clone();
        for (&p, &id) in positions.iter().zip(fill) {
            out.ids[p] = id;
        }
        out
    }

    /// Copy without property blocks.
    pub fn text_only(&self) -> Self {
        Self { ids: self.text_ids().to_vec(), blocks: Vec::new(), prop_len: 0 }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VocabFile {
    schema: Schema,
    tokens: Vec<String>,
}

/// Bidirectional token/id map plus the property schema.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    schema: Schema,
    tokens: Vec<Token>,
    index: HashMap<Token, usize>,
    places: PlaceRange,
    text_ids: Vec<usize>,
}

impl PartialEq for Vocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.schema == other.schema && self.tokens == other.tokens
    }
}

impl Vocabulary {
    /// Specials, then property tags (schema order), the numeric grid from
    /// the highest place down, and finally the text symbols in the given
    /// order (duplicates dropped).
    pub fn new<I, S>(schema: Schema, text_symbols: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        schema.validate()?;
        let places = schema.places();
        let mut tokens = vec![
            Token::Pad,
            Token::Mask,
            Token::End,
            Token::Separator,
            Token::Dot,
            Token::Negative,
        ];
        tokens.extend(schema.properties.iter().map(|p| Token::PropertyTag(p.name.clone())));
        for place in (places.min..=places.max).rev() {
            for digit in 0..10u8 {
                tokens.push(Token::Numeric(NumericToken { digit, place }));
            }
        }
        let mut seen: std::collections::HashSet<String> = Default::default();
        for sym in text_symbols {
            let sym = sym.as_ref();
            if !Token::parse(sym).is_text() || sym.is_empty() || sym.chars().any(char::is_whitespace) {
                return Err(Error::ReservedSymbol(sym.to_string()));
            }
            if seen.insert(sym.to_string()) {
                tokens.push(Token::Text(sym.to_string()));
            }
        }
        Self::from_tokens(schema, tokens)
    }

    fn from_tokens(schema: Schema, tokens: Vec<Token>) -> Result<Self> {
        schema.validate()?;
        let places = schema.places();
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::InvalidSchema(format!("duplicate token {t}")));
            }
        }
        let vocab = Self {
            text_ids: tokens.iter().enumerate().filter(|(_, t)| t.is_text()).map(|(i, _)| i).collect(),
            schema,
            tokens,
            index,
            places,
        };
        for special in [Token::Pad, Token::Mask, Token::End, Token::Separator, Token::Dot, Token::Negative] {
            vocab.require(&special)?;
        }
        for p in &vocab.schema.properties {
            vocab.require(&Token::PropertyTag(p.name.clone()))?;
        }
        for place in places.min..=places.max {
            for digit in 0..10 {
                vocab.require(&Token::Numeric(NumericToken { digit, place }))?;
            }
        }
        Ok(vocab)
    }

    fn require(&self, t: &Token) -> Result<()> {
        if self.index.contains_key(t) {
            Ok(())
        } else {
            Err(Error::InvalidSchema(format!("vocabulary lacks token {t}")))
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn places(&self) -> PlaceRange {
        self.places
    }

    pub fn id(&self, token: &Token) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Result<&Token> {
        self.tokens.get(id).ok_or(Error::UnknownId(id))
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn text_id(&self, symbol: &str) -> Result<usize> {
        self.id(&Token::Text(symbol.to_string()))
            .ok_or_else(|| Error::UnknownToken(symbol.to_string()))
    }

    /// Ids of all text tokens, ascending.
    pub fn text_ids(&self) -> &[usize] {
        &self.text_ids
    }

    pub fn mask_id(&self) -> usize {
        self.index[&Token::Mask]
    }

    pub fn pad_id(&self) -> usize {
        self.index[&Token::Pad]
    }

    pub fn separator_id(&self) -> usize {
        self.index[&Token::Separator]
    }

    pub fn dot_id(&self) -> usize {
        self.index[&Token::Dot]
    }

    pub fn negative_id(&self) -> usize {
        self.index[&Token::Negative]
    }

    pub fn numeric_id(&self, digit: u8, place: i32) -> Option<usize> {
        self.id(&Token::Numeric(NumericToken { digit, place }))
    }

    pub fn tag_id(&self, property: usize) -> usize {
        self.index[&Token::PropertyTag(self.schema.properties[property].name.clone())]
    }

    /// Ids that may legally occupy `slot`.
    pub fn slot_candidates(&self, slot: Slot) -> Vec<usize> {
        match slot {
            Slot::Negative => vec![self.negative_id()],
            Slot::Dot => vec![self.dot_id()],
            Slot::Digit(place) => (0..10).filter_map(|d| self.numeric_id(d, place)).collect(),
        }
    }

    pub fn to_json(&self) -> String {
        let file = VocabFile {
            schema: self.schema.clone(),
            tokens: self.tokens.iter().map(Token::to_string).collect(),
        };
        serde_json::to_string_pretty(&file).expect("vocabulary serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: VocabFile = serde_json::from_str(text)?;
        let tokens = file.tokens.iter().map(|t| Token::parse(t)).collect();
        Self::from_tokens(file.schema, tokens)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// FNV-1a over the serialized vocabulary.
    pub fn hash(&self) -> u64 {
        crate::data::fnv64(self.to_json().as_bytes())
    }
}

/// Numeral ids for `value` in the fixed-width layout of `property`.
pub fn numeral_ids(property: usize, value: Decimal, vocab: &Vocabulary) -> Result<Vec<usize>> {
    let schema = &vocab.schema.properties[property];
    let rendered = schema.render(value)?;
    tokenize_number(&rendered, vocab.places)?
        .iter()
        .map(|t| vocab.id(t).ok_or_else(|| Error::UnknownToken(t.to_string())))
        .collect()
}

/// Builds a sequence from already-resolved property values and text ids.
/// Blocks are laid out in the order given.
pub fn encode_ids(props: &[(usize, Decimal)], text_ids: &[usize], vocab: &Vocabulary) -> Result<TokenizedSequence> {
    let mut ids = Vec::new();
    let mut blocks = Vec::with_capacity(props.len());
    for &(property, value) in props {
        if property >= vocab.schema.properties.len() {
            return Err(Error::UnknownProperty(format!("#{property}")));
        }
        let tag = ids.len();
        ids.push(vocab.tag_id(property));
        let numeral = numeral_ids(property, value, vocab)?;
        let start = ids.len();
        ids.extend(numeral);
        let end = ids.len();
        ids.push(vocab.separator_id());
        blocks.push(PropertyBlock { property, tag, numeral: start..end, separator: end });
    }
    let prop_len = ids.len();
    for &id in text_ids {
        if !vocab.token(id)?.is_text() {
            return Err(Error::MalformedSequence(format!("id {id} is not a text token")));
        }
    }
    ids.extend_from_slice(text_ids);
    Ok(TokenizedSequence { ids, blocks, prop_len })
}

/// Encodes properties (laid out in schema order) and text symbols.
pub fn encode_sequence<S: AsRef<str>>(
    props: &BTreeMap<String, f64>,
    text: &[S],
    vocab: &Vocabulary,
) -> Result<TokenizedSequence> {
    for name in props.keys() {
        if vocab.schema.index_of(name).is_none() {
            return Err(Error::UnknownProperty(name.clone()));
        }
    }
    let mut resolved = Vec::with_capacity(props.len());
    for (i, schema) in vocab.schema.properties.iter().enumerate() {
        if let Some(&v) = props.get(&schema.name) {
            resolved.push((i, schema.quantize(v)?));
        }
    }
    let text_ids = text
        .iter()
        .map(|s| vocab.text_id(s.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    encode_ids(&resolved, &text_ids, vocab)
}

/// Recovers the block layout of a raw id sequence. Numeral slots may hold
/// `[MASK]`; text ends at the first `[PAD]`/`[END]`.
pub fn parse_ids(ids: &[usize], vocab: &Vocabulary) -> Result<TokenizedSequence> {
    let mut blocks = Vec::new();
    let mut pos = 0;
    while pos < ids.len() {
        let Token::PropertyTag(name) = vocab.token(ids[pos])? else { break };
        let property = vocab
            .schema
            .index_of(name)
            .ok_or_else(|| Error::UnknownProperty(name.clone()))?;
        let tag = pos;
        let start = pos + 1;
        let mut end = start;
        loop {
            match vocab.token(*ids.get(end).ok_or_else(|| {
                Error::MalformedSequence("property block without separator".into())
            })?)? {
                Token::Separator => break,
                Token::Numeric(_) | Token::Dot | Token::Negative | Token::Mask => end += 1,
                other => {
                    return Err(Error::MalformedSequence(format!("unexpected {other} inside numeral")))
                }
            }
        }
        blocks.push(PropertyBlock { property, tag, numeral: start..end, separator: end });
        pos = end + 1;
    }
    let prop_len = pos;
    let mut out = Vec::with_capacity(ids.len());
    out.extend_from_slice(&ids[..prop_len]);
    for &id in &ids[prop_len..] {
        match vocab.token(id)? {
            Token::Text(_) | Token::Mask => out.push(id),
            Token::Pad | Token::End => break,
            other => return Err(Error::MalformedSequence(format!("unexpected {other} in text"))),
        }
    }
    Ok(TokenizedSequence { ids: out, blocks, prop_len })
}

/// Inverse of [`encode_sequence`].
pub fn decode_sequence(ids: &[usize], vocab: &Vocabulary) -> Result<(BTreeMap<String, Decimal>, Vec<String>)> {
    let seq = parse_ids(ids, vocab)?;
    let mut props = BTreeMap::new();
    for block in &seq.blocks {
        let tokens = seq.ids[block.numeral.clone()]
            .iter()
            .map(|&id| vocab.token(id).cloned())
            .collect::<Result<Vec<_>>>()?;
        let value = detokenize_number(&tokens)?;
        props.insert(vocab.schema.properties[block.property].name.clone(), value);
    }
    let text = seq
        .text_ids()
        .iter()
        .map(|&id| match vocab.token(id)? {
            Token::Text(s) => Ok(s.clone()),
            other => Err(Error::MalformedSequence(format!("unexpected {other} in text"))),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((props, text))
}

/// Property values of every block, decoded exactly.
pub fn block_values(seq: &TokenizedSequence, vocab: &Vocabulary) -> Result<Vec<Decimal>> {
    seq.blocks
        .iter()
        .map(|b| {
            let tokens = seq.ids[b.numeral.clone()]
                .iter()
                .map(|&id| vocab.token(id).cloned())
                .collect::<Result<Vec<_>>>()?;
            detokenize_number(&tokens)
        })
        .collect()
}

fn text_symbol_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\[[^\]\[]*\]|.").unwrap())
}

/// Splits free text into symbols: on whitespace when present, otherwise
/// bracketed groups (`[C]`) and single characters.
pub fn split_text_symbols(text: &str) -> Vec<String> {
    let text = text.trim();
    if text.chars().any(char::is_whitespace) {
        text.split_whitespace().map(str::to_string).collect()
    } else {
        text_symbol_regex().find_iter(text).map(|m| m.as_str().to_string()).collect()
    }
}

/// A record line before vocabulary resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRecord {
    pub props: Vec<(String, String)>,
    pub text: Vec<String>,
}

/// Parses `<name>value|...<name>value|text`.
pub fn parse_raw_line(line: &str) -> Result<RawRecord> {
    let mut rest = line.trim_end_matches(['\n', '\r']);
    let mut props = Vec::new();
    while let Some(after) = rest.strip_prefix('<') {
        let close = after
            .find('>')
            .ok_or_else(|| Error::MalformedSequence("unterminated property tag".into()))?;
        let name = &after[..close];
        let body = &after[close + 1..];
        let bar = body
            .find('|')
            .ok_or_else(|| Error::MalformedSequence(format!("property <{name}> lacks a separator")))?;
        let value = body[..bar].trim();
        let segments = split_numerics(value);
        if segments.len() != 1 || !matches!(segments[0], Segment::Numeric(_)) {
            return Err(Error::MalformedNumber(value.to_string()));
        }
        props.push((name.to_string(), value.to_string()));
        rest = &body[bar + 1..];
    }
    Ok(RawRecord { props, text: split_text_symbols(rest) })
}

/// Parses and encodes one record line. Values must fit their schema
/// without rounding.
pub fn parse_line(line: &str, vocab: &Vocabulary) -> Result<TokenizedSequence> {
    let raw = parse_raw_line(line)?;
    let mut resolved = Vec::with_capacity(raw.props.len());
    for (name, value) in &raw.props {
        let idx = vocab.schema.index_of(name).ok_or_else(|| Error::UnknownProperty(name.clone()))?;
        resolved.push((idx, Decimal::parse(value)?));
    }
    let text_ids = raw.text.iter().map(|s| vocab.text_id(s)).collect::<Result<Vec<_>>>()?;
    encode_ids(&resolved, &text_ids, vocab)
}

/// Renders a sequence in the record-line format.
pub fn render_line(seq: &TokenizedSequence, vocab: &Vocabulary) -> Result<String> {
    let mut out = String::new();
    for (block, value) in seq.blocks.iter().zip(block_values(seq, vocab)?) {
        out.push_str(&vocab.token(seq.ids[block.tag])?.to_string());
        out.push_str(&value.to_string());
        out.push_str(SEPARATOR);
    }
    let symbols = seq
        .text_ids()
        .iter()
        .map(|&id| vocab.token(id).map(Token::to_string))
        .collect::<Result<Vec<_>>>()?;
    let compact = symbols
        .iter()
        .all(|s| s.chars().count() == 1 || (s.starts_with('[') && s.ends_with(']')));
    out.push_str(&symbols.join(if compact { "" } else { " " }));
    Ok(out)
}

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::vocab::{self, Token};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    Date,
    Amount,
    Code,
    Name,
    TableCell,
}

impl FieldKind {
    pub const ALL: [FieldKind; 5] = [
        FieldKind::Date,
        FieldKind::Amount,
        FieldKind::Code,
        FieldKind::Name,
        FieldKind::TableCell,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn marker(self) -> Token {
        vocab::KIND_MARKER_BASE + self.index() as Token
    }

    pub fn from_marker(t: Token) -> Option<FieldKind> {
        vocab::is_kind_marker(t).then(|| Self::ALL[(t - vocab::KIND_MARKER_BASE) as usize])
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FieldKind::Date => "date",
            FieldKind::Amount => "amount",
            FieldKind::Code => "code",
            FieldKind::Name => "name",
            FieldKind::TableCell => "table_cell",
        }
    }
}

/// Normalized cell rectangle `[x0, y0, x1, y1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellBox(pub [f64; 4]);

impl CellBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let b = CellBox([x0, y0, x1, y1]);
        if b.is_valid() {
            Ok(b)
        } else {
            Err(Error::input(format!("invalid box {:?}", b.0)))
        }
    }

    pub fn is_valid(&self) -> bool {
        let [x0, y0, x1, y1] = self.0;
        self.0.iter().all(|v| (0.0..=1.0).contains(v)) && x0 < x1 && y0 < y1
    }

    pub fn area(&self) -> f64 {
        let [x0, y0, x1, y1] = self.0;
        (x1 - x0) * (y1 - y0)
    }

    pub fn iou(&self, other: &CellBox) -> f64 {
        let [ax0, ay0, ax1, ay1] = self.0;
        let [bx0, by0, bx1, by1] = other.0;
        let w = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
        let h = (ay1.min(by1) - ay0.max(by0)).max(0.0);
        let inter = w * h;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

/// Generation rule for the values of one field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum ValueSpace {
    /// `YYYY-MM-DD` with days 01..=28 when sampling.
    Date { first_year: u32, last_year: u32 },
    /// Zero-padded integer part and exactly two decimals.
    Amount { int_digits: usize },
    /// Fixed-length string over `[a-z0-9]`.
    Code { len: usize },
    /// Equal-length words.
    Lexicon { words: Vec<String> },
    /// Fixed-length digit string placed in a `rows × cols` grid.
    Cell { digits: usize, rows: usize, cols: usize },
}

const CODE_ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyz0123456789";

fn days_in_month(year: u32, month: u32) -> u32 {
    match month {
        1 | 3 | 5 | 7 | 8 | 10 | 12 => 31,
        4 | 6 | 9 | 11 => 30,
        2 if (year.is_multiple_of(4) && !year.is_multiple_of(100)) || year.is_multiple_of(400) => 29,
        2 => 28,
        _ => 0,
    }
}

/// Parses a strict `YYYY-MM-DD` token string into (year, month, day) when it is a real date.
pub fn parse_date(tokens: &[Token]) -> Option<(u32, u32, u32)> {
    if tokens.len() != 10 || tokens[4] != vocab::DASH || tokens[7] != vocab::DASH {
        return None;
    }
    let num = |r: std::ops::Range<usize>| -> Option<u32> {
        tokens[r]
            .iter()
            .try_fold(0u32, |acc, &t| vocab::digit_value(t).map(|d| acc * 10 + d as u32))
    };
    let (y, m, d) = (num(0..4)?, num(5..7)?, num(8..10)?);
    (d >= 1 && d <= days_in_month(y, m)).then_some((y, m, d))
}

/// `digits+ '.' digit digit`
pub fn is_amount(tokens: &[Token]) -> bool {
    let n = tokens.len();
    n >= 4
        && tokens[n - 3] == vocab::DOT
        && tokens[..n - 3].iter().all(|&t| vocab::is_digit(t))
        && tokens[n - 2..].iter().all(|&t| vocab::is_digit(t))
}

fn push_number(out: &mut Vec<Token>, value: u64, width: usize) {
    let text = format!("{value:0width$}");
    out.extend(text.bytes().map(|b| vocab::digit(b - b'0')));
}

impl ValueSpace {
    fn check(&self, kind: FieldKind) -> Result<()> {
        let ok = match (kind, self) {
            (FieldKind::Date, ValueSpace::Date { first_year, last_year }) => {
                (1000..=9999).contains(first_year) && first_year <= last_year && *last_year <= 9999
            }
            (FieldKind::Amount, ValueSpace::Amount { int_digits }) => (1..=12).contains(int_digits),
            (FieldKind::Code, ValueSpace::Code { len }) => *len >= 1,
            (FieldKind::Name, ValueSpace::Lexicon { words }) => {
                !words.is_empty()
                    && words.iter().all(|w| !w.is_empty() && w.len() == words[0].len())
                    && words.iter().all(|w| vocab::encode(w).is_ok())
            }
            (FieldKind::TableCell, ValueSpace::Cell { digits, rows, cols }) => {
                (1..=12).contains(digits) && *rows >= 1 && *cols >= 1
            }
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("value space {self:?} invalid for kind {}", kind.as_str())))
        }
    }

    /// Token width of every value this space generates.
    pub fn width(&self) -> usize {
        match self {
            ValueSpace::Date { .. } => 10,
            ValueSpace::Amount { int_digits } => int_digits + 3,
            ValueSpace::Code { len } => *len,
            ValueSpace::Lexicon { words } => words[0].len(),
            ValueSpace::Cell { digits, .. } => *digits,
        }
    }

    pub fn sample(&self, rng: &mut Rng) -> Vec<Token> {
        let mut out = Vec::with_capacity(self.width());
        match self {
            ValueSpace::Date { first_year, last_year } => {
                push_number(&mut out, rng.gen_range(*first_year..=*last_year) as u64, 4);
                out.push(vocab::DASH);
                push_number(&mut out, rng.gen_range(1..=12), 2);
                out.push(vocab::DASH);
                push_number(&mut out, rng.gen_range(1..=28), 2);
            }
            ValueSpace::Amount { int_digits } => {
                push_number(&mut out, rng.gen_range(0..10u64.pow(*int_digits as u32)), *int_digits);
                out.push(vocab::DOT);
                push_number(&mut out, rng.gen_range(0..100), 2);
            }
            ValueSpace::Code { len } => {
                for _ in 0..*len {
                    let c = CODE_ALPHABET[rng.gen_range(0..CODE_ALPHABET.len())] as char;
                    out.push(vocab::char_to_token(c).expect("alphabet is in vocabulary"));
                }
            }
            ValueSpace::Lexicon { words } => {
                let w = &words[rng.gen_range(0..words.len())];
                out.extend(vocab::encode(w).expect("checked at schema construction"));
            }
            ValueSpace::Cell { digits, .. } => {
                for _ in 0..*digits {
                    out.push(vocab::digit(rng.gen_range(0..10)));
                }
            }
        }
        out
    }

    pub fn sample_box(&self, rng: &mut Rng) -> Option<CellBox> {
        match self {
            ValueSpace::Cell { rows, cols, .. } => {
                let r = rng.gen_range(0..*rows) as f64;
                let c = rng.gen_range(0..*cols) as f64;
                let (w, h) = (1.0 / *cols as f64, 1.0 / *rows as f64);
                Some(CellBox([c * w, r * h, (c + 1.0) * w, (r + 1.0) * h]))
            }
            _ => None,
        }
    }

    /// Kind-validity check used for corrupted and generated values alike.
    pub fn is_valid(&self, tokens: &[Token]) -> bool {
        match self {
            ValueSpace::Date { .. } => parse_date(tokens).is_some(),
            ValueSpace::Amount { .. } => is_amount(tokens),
            ValueSpace::Code { len } => {
                tokens.len() == *len
                    && tokens.iter().all(|&t| vocab::is_digit(t) || vocab::is_letter(t))
            }
            ValueSpace::Lexicon { words } => words.iter().any(|w| vocab::render(tokens) == *w),
            ValueSpace::Cell { digits, .. } => {
                tokens.len() == *digits && tokens.iter().all(|&t| vocab::is_digit(t))
            }
        }
    }

    /// A fresh value from this space that differs from `original`. Falls back to a
    /// single-character edit after 16 rejected draws.
    pub fn plausible_replacement(&self, original: &[Token], rng: &mut Rng) -> Vec<Token> {
        for _ in 0..16 {
            let v = self.sample(rng);
            if v != original {
                return v;
            }
        }
        self.forced_edit(original)
    }

    fn forced_edit(&self, original: &[Token]) -> Vec<Token> {
        if let ValueSpace::Lexicon { words } = self {
            let text = vocab::render(original);
            let pos = words.iter().position(|w| *w == text).unwrap_or(0);
            let next = &words[(pos + 1) % words.len()];
            if *next != text {
                return vocab::encode(next).expect("checked at schema construction");
            }
        }
        // Scan from the end for a single substitution that stays kind-valid.
        for i in (0..original.len()).rev() {
            for &c in CODE_ALPHABET {
                let t = vocab::char_to_token(c as char).expect("alphabet is in vocabulary");
                if t == original[i] {
                    continue;
                }
                let mut v = original.to_vec();
                v[i] = t;
                if self.is_valid(&v) {
                    return v;
                }
            }
        }
        // Only reachable for degenerate spaces; any edit still differs.
        let mut v = original.to_vec();
        if let Some(last) = v.last_mut() {
            *last = if *last == vocab::digit(0) { vocab::digit(1) } else { vocab::digit(0) };
        } else {
            v.push(vocab::digit(0));
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSchema {
    pub key: String,
    pub kind: FieldKind,
    pub space: ValueSpace,
}

impl FieldSchema {
    pub fn new(key: &str, kind: FieldKind, space: ValueSpace) -> Self {
        FieldSchema {
            key: key.to_string(),
            kind,
            space,
        }
    }
}

/// Ordered field list. Position in the list selects the key marker token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    fields: Vec<FieldSchema>,
}

const PATIENTS: [&str; 32] = [
    "adams", "baker", "brown", "clark", "davis", "evans", "garza", "green", "hayes", "irwin",
    "jones", "kelly", "lewis", "lopez", "mason", "moore", "nolan", "owens", "patel", "perez",
    "quinn", "reyes", "rossi", "scott", "smith", "stone", "tyler", "vance", "wells", "white",
    "young", "zhang",
];

const DEPARTMENTS: [&str; 16] = [
    "cardi", "derma", "neuro", "oncol", "ortho", "pedia", "psych", "radio", "renal", "surgi",
    "urolo", "gastr", "hemat", "immun", "nephr", "pulmo",
];

impl Schema {
    pub fn new(fields: Vec<FieldSchema>) -> Result<Self> {
        if fields.is_empty() {
            return Err(Error::config("schema has no fields"));
        }
        if fields.len() > vocab::MAX_KEYS {
            return Err(Error::config(format!(
                "schema has {} fields; at most {} key markers exist",
                fields.len(),
                vocab::MAX_KEYS
            )));
        }
        for (i, f) in fields.iter().enumerate() {
            if f.key.is_empty() {
                return Err(Error::config("empty field key"));
            }
            if fields[..i].iter().any(|g| g.key == f.key) {
                return Err(Error::config(format!("duplicate key `{}`", f.key)));
            }
            f.space.check(f.kind)?;
        }
        Ok(Schema { fields })
    }

    /// Six invoice fields: code, date, amount, two names and one table cell.
    pub fn invoice() -> Self {
        let words = |ws: &[&str]| ws.iter().map(|w| w.to_string()).collect();
        Schema::new(vec![
            FieldSchema::new("invoice_no", FieldKind::Code, ValueSpace::Code { len: 8 }),
            FieldSchema::new(
                "date",
                FieldKind::Date,
                ValueSpace::Date { first_year: 2015, last_year: 2024 },
            ),
            FieldSchema::new("total", FieldKind::Amount, ValueSpace::Amount { int_digits: 4 }),
            FieldSchema::new("patient", FieldKind::Name, ValueSpace::Lexicon { words: words(&PATIENTS) }),
            FieldSchema::new("dept", FieldKind::Name, ValueSpace::Lexicon { words: words(&DEPARTMENTS) }),
            FieldSchema::new(
                "item_cell",
                FieldKind::TableCell,
                ValueSpace::Cell { digits: 4, rows: 4, cols: 3 },
            ),
        ])
        .expect("default schema is valid")
    }

    pub fn fields(&self) -> &[FieldSchema] {
        &self.fields
    }

    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    pub fn index_of(&self, key: &str) -> Option<usize> {
        self.fields.iter().position(|f| f.key == key)
    }

    pub fn field(&self, key: &str) -> Option<&FieldSchema> {
        self.fields.iter().find(|f| f.key == key)
    }

    pub fn marker(&self, key: &str) -> Option<Token> {
        self.index_of(key).map(vocab::key_marker)
    }

    pub fn value_tokens(&self) -> usize {
        self.fields.iter().map(|f| f.space.width()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn schema_rejects_empty_and_duplicates() {
        assert!(matches!(Schema::new(vec![]), Err(Error::Config(_))));
        let f = FieldSchema::new("a", FieldKind::Code, ValueSpace::Code { len: 3 });
        assert!(Schema::new(vec![f.clone(), f]).is_err());
        let bad = FieldSchema::new("a", FieldKind::Date, ValueSpace::Code { len: 3 });
        assert!(Schema::new(vec![bad]).is_err());
        let empty_lex = FieldSchema::new("a", FieldKind::Name, ValueSpace::Lexicon { words: vec![] });
        assert!(Schema::new(vec![empty_lex]).is_err());
    }

    #[test]
    fn samples_are_valid_and_fixed_width() {
        let schema = Schema::invoice();
        let mut r = rng::seeded(5);
        for f in schema.fields() {
            for _ in 0..200 {
                let v = f.space.sample(&mut r);
                assert_eq!(v.len(), f.space.width(), "{}", f.key);
                assert!(f.space.is_valid(&v), "{} {}", f.key, vocab::render(&v));
            }
        }
        assert_eq!(schema.value_tokens(), 39);
    }

    #[test]
    fn date_validation() {
        let ok = vocab::encode("2024-02-29").unwrap();
        assert_eq!(parse_date(&ok), Some((2024, 2, 29)));
        assert!(parse_date(&vocab::encode("2023-02-29").unwrap()).is_none());
        assert!(parse_date(&vocab::encode("2024-13-40").unwrap()).is_none());
        assert!(parse_date(&vocab::encode("2024-1-05").unwrap()).is_none());
    }

    #[test]
    fn replacement_differs_and_stays_valid() {
        let schema = Schema::invoice();
        let mut r = rng::seeded(9);
        for f in schema.fields() {
            for _ in 0..100 {
                let orig = f.space.sample(&mut r);
                let rep = f.space.plausible_replacement(&orig, &mut r);
                assert_ne!(orig, rep);
                assert!(f.space.is_valid(&rep));
            }
        }
    }

    #[test]
    fn forced_edit_on_singleton_spaces() {
        let lex = ValueSpace::Lexicon { words: vec!["abc".into(), "abd".into()] };
        let orig = vocab::encode("abc").unwrap();
        assert_eq!(vocab::render(&lex.forced_edit(&orig)), "abd");
        let date = ValueSpace::Date { first_year: 2020, last_year: 2020 };
        let d = vocab::encode("2020-01-01").unwrap();
        let e = date.forced_edit(&d);
        assert_ne!(d, e);
        assert!(date.is_valid(&e));
    }

    #[test]
    fn iou_half_overlap() {
        let a = CellBox([0.0, 0.0, 1.0, 1.0]);
        let b = CellBox([0.0, 0.0, 0.5, 1.0]);
        assert!((a.iou(&b) - 0.5).abs() < 1e-15);
        let c = CellBox([0.6, 0.0, 1.0, 0.5]);
        assert_eq!(b.iou(&c), 0.0);
    }
}

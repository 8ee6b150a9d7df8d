//! Attribute records, the caption template, caption corruption and the
//! caption record file.
//!
//! Caption record file: UTF-8, one record per line, tab-separated
//! `image_id  identity_id  camera_id  caption`. Blank lines and lines
//! starting with `#` are ignored.
//!
//! Attribute-domain manifest: a `# scgi-domains v1` header, then one line per
//! field: the field name followed by its values in order, tab-separated.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::error::{contract_err, Error, Result};

pub const DOMAINS_VERSION: &str = "v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Attribute {
    AgeBand,
    Gender,
    UpperClothes,
    LowerClothes,
    Shoes,
    CarriedItem,
    HairLength,
    Glasses,
}

impl Attribute {
    pub const ALL: [Attribute; 8] = [
        Attribute::AgeBand,
        Attribute::Gender,
        Attribute::UpperClothes,
        Attribute::LowerClothes,
        Attribute::Shoes,
        Attribute::CarriedItem,
        Attribute::HairLength,
        Attribute::Glasses,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Attribute::AgeBand => "age_band",
            Attribute::Gender => "gender",
            Attribute::UpperClothes => "upper_clothes",
            Attribute::LowerClothes => "lower_clothes",
            Attribute::Shoes => "shoes",
            Attribute::CarriedItem => "carried_item",
            Attribute::HairLength => "hair_length",
            Attribute::Glasses => "glasses",
        }
    }

    pub fn values(self) -> &'static [&'static str] {
        match self {
            Attribute::AgeBand => &["young", "adult", "elderly"],
            Attribute::Gender => &["man", "woman"],
            Attribute::UpperClothes => &[
                "red shirt",
                "blue jacket",
                "white tshirt",
                "black coat",
                "green sweater",
                "yellow blouse",
            ],
            Attribute::LowerClothes => &[
                "blue jeans",
                "black trousers",
                "gray shorts",
                "brown skirt",
                "white pants",
                "green shorts",
            ],
            Attribute::Shoes => &["sneakers", "boots", "sandals", "leather shoes"],
            Attribute::CarriedItem => &["backpack", "handbag", "suitcase", "umbrella"],
            Attribute::HairLength => &["short", "long"],
            Attribute::Glasses => &["no glasses", "glasses"],
        }
    }

    pub fn cardinality(self) -> usize {
        self.values().len()
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// One categorical value per [`Attribute`], stored as indices into each
/// field's domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AttributeRecord {
    values: [usize; 8],
}

impl AttributeRecord {
    pub fn new(values: [usize; 8]) -> Result<Self> {
        for a in Attribute::ALL {
            if values[a.index()] >= a.cardinality() {
                return Err(contract_err!(
                    "{} index {} outside domain of {}",
                    a.name(),
                    values[a.index()],
                    a.cardinality()
                ));
            }
        }
        Ok(AttributeRecord { values })
    }

    /// Builds a record from domain strings, in [`Attribute::ALL`] order.
    pub fn from_strs(values: &[&str]) -> Result<Self> {
        if values.len() != Attribute::ALL.len() {
            return Err(contract_err!("expected 8 attribute values, got {}", values.len()));
        }
        let mut idx = [0; 8];
        for (a, v) in Attribute::ALL.iter().zip(values) {
            idx[a.index()] = a
                .values()
                .iter()
                .position(|x| x == v)
                .ok_or_else(|| contract_err!("{:?} is not a {} value", v, a.name()))?;
        }
        Ok(AttributeRecord { values: idx })
    }

    pub fn random(rng: &mut impl Rng) -> Self {
        let mut values = [0; 8];
        for a in Attribute::ALL {
            values[a.index()] = rng.random_range(0..a.cardinality());
        }
        AttributeRecord { values }
    }

    pub fn index_of(&self, a: Attribute) -> usize {
        self.values[a.index()]
    }

    pub fn get(&self, a: Attribute) -> &'static str {
        a.values()[self.values[a.index()]]
    }

    pub fn indices(&self) -> [usize; 8] {
        self.values
    }
}

/// Instantiates the fixed caption template.
pub fn render_caption(attrs: &AttributeRecord) -> String {
    use Attribute::*;
    let gender = attrs.get(Gender);
    let glasses = if attrs.index_of(Glasses) == 1 {
        " and wears glasses"
    } else {
        ""
    };
    format!(
        "A {} {gender} is wearing {} and {}. The {gender} is wearing {} and carrying a {}. The {gender} has {} hair{glasses}.",
        attrs.get(AgeBand),
        attrs.get(UpperClothes),
        attrs.get(LowerClothes),
        attrs.get(Shoes),
        attrs.get(CarriedItem),
        attrs.get(HairLength),
    )
}

/// Upper bound on rendered caption length, in words.
pub const MAX_CAPTION_WORDS: usize = 45;

/// Resamples each field uniformly from its domain with probability `p`,
/// modelling captions that are wrong about some attributes.
pub fn corrupt_caption(attrs: &AttributeRecord, p: f64, rng: &mut impl Rng) -> Result<AttributeRecord> {
    corrupt_fields(attrs, p, rng).map(|(r, _)| r)
}

/// [`corrupt_caption`], also reporting which fields were resampled (a
/// resampled field may redraw its original value).
pub fn corrupt_fields(
    attrs: &AttributeRecord,
    p: f64,
    rng: &mut impl Rng,
) -> Result<(AttributeRecord, [bool; 8])> {
    if !(0.0..=1.0).contains(&p) {
        return Err(contract_err!("corruption probability {p} outside [0, 1]"));
    }
    let mut out = *attrs;
    let mut resampled = [false; 8];
    for a in Attribute::ALL {
        if rng.random_bool(p) {
            resampled[a.index()] = true;
            out.values[a.index()] = rng.random_range(0..a.cardinality());
        }
    }
    Ok((out, resampled))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptionRecord {
    pub image_id: String,
    pub identity_id: u32,
    pub camera_id: u32,
    pub caption: String,
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

pub fn load_caption_file(path: impl AsRef<Path>) -> Result<Vec<CaptionRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_caption_records(&text, path)
}

pub fn parse_caption_records(text: &str, path: &Path) -> Result<Vec<CaptionRecord>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(parse_err(path, lineno, format!("expected 4 tab-separated fields, got {}", fields.len())));
        }
        let identity_id = fields[1]
            .parse()
            .map_err(|_| parse_err(path, lineno, format!("bad identity_id {:?}", fields[1])))?;
        let camera_id = fields[2]
            .parse()
            .map_err(|_| parse_err(path, lineno, format!("bad camera_id {:?}", fields[2])))?;
        if fields[0].is_empty() {
            return Err(parse_err(path, lineno, "empty image_id"));
        }
        if fields[3].trim().is_empty() {
            return Err(parse_err(path, lineno, "empty caption"));
        }
        if !seen.insert(fields[0].to_string()) {
            return Err(Error::Validation(format!("duplicate image_id {}", fields[0])));
        }
        out.push(CaptionRecord {
            image_id: fields[0].to_string(),
            identity_id,
            camera_id,
            caption: fields[3].to_string(),
        });
    }
    Ok(out)
}

pub fn format_caption_records(records: &[CaptionRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        if r.image_id.contains(['\t', '\n']) || r.caption.contains(['\t', '\n', '\r']) {
            return Err(Error::Validation(format!("record {} contains tab or newline", r.image_id)));
        }
        if r.caption.trim().is_empty() {
            return Err(Error::Validation(format!("record {} has an empty caption", r.image_id)));
        }
        writeln!(out, "{}\t{}\t{}\t{}", r.image_id, r.identity_id, r.camera_id, r.caption).expect("string write");
    }
    Ok(out)
}

pub fn write_caption_file(path: impl AsRef<Path>, records: &[CaptionRecord]) -> Result<()> {
    let path = path.as_ref();
    let text = format_caption_records(records)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn format_domains() -> String {
    let mut out = format!("# scgi-domains {DOMAINS_VERSION}\n");
    for a in Attribute::ALL {
        out.push_str(a.name());
        for v in a.values() {
            out.push('\t');
            out.push_str(v);
        }
        out.push('\n');
    }
    out
}

/// Checks that a domain manifest matches the built-in domains.
pub fn check_domains(text: &str, path: &Path) -> Result<()> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == format!("# scgi-domains {DOMAINS_VERSION}") => {}
        _ => return Err(parse_err(path, 1, "missing or unsupported domain header")),
    }
    let mut fields = Attribute::ALL.iter();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        let want = fields
            .next()
            .ok_or_else(|| parse_err(path, i + 1, "unexpected extra field"))?;
        if parts[0] != want.name() || parts[1..] != *want.values() {
            return Err(parse_err(path, i + 1, format!("domain for {} differs from {DOMAINS_VERSION}", want.name())));
        }
    }
    if fields.next().is_some() {
        return Err(parse_err(path, text.lines().count(), "missing fields"));
    }
    Ok(())
}

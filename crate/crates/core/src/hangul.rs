//! Hangul syllable arithmetic and per-jamo stroke features.
//!
//! A precomposed syllable in U+AC00..=U+D7A3 encodes its three jamo slots
//! as `0xAC00 + (cho * 21 + jung) * 28 + jong`, with `jong == 0` meaning
//! no final consonant.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SYLLABLE_FIRST: u32 = 0xAC00;
pub const SYLLABLE_LAST: u32 = 0xD7A3;
pub const SYLLABLE_COUNT: u32 = SYLLABLE_LAST - SYLLABLE_FIRST + 1;

pub const CHOSEONG_COUNT: usize = 19;
pub const JUNGSEONG_COUNT: usize = 21;
/// Includes the "no final consonant" slot at index 0.
pub const JONGSEONG_COUNT: usize = 28;

/// Size of the flat jamo token vocabulary: 19 initials, 21 medials, 28 finals.
pub const VOCAB_SIZE: usize = CHOSEONG_COUNT + JUNGSEONG_COUNT + JONGSEONG_COUNT;

const JUNG_OFFSET: usize = CHOSEONG_COUNT;
const JONG_OFFSET: usize = CHOSEONG_COUNT + JUNGSEONG_COUNT;

const CHOSEONG_BASE: u32 = 0x1100;
const JUNGSEONG_BASE: u32 = 0x1161;
/// First real final consonant (index 1); index 0 has no conjoining code point.
const JONGSEONG_BASE: u32 = 0x11A8;
/// Stands in for the empty final slot in stroke table files.
pub const EMPTY_FINAL_MARK: char = '\u{3164}';

/// Indices of the initial, medial and final jamo of one syllable.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct JamoTriple {
    pub choseong: u8,
    pub jungseong: u8,
    pub jongseong: u8,
}

impl JamoTriple {
    pub fn new(choseong: usize, jungseong: usize, jongseong: usize) -> Result<Self> {
        let triple = Self { choseong: choseong as u8, jungseong: jungseong as u8, jongseong: jongseong as u8 };
        check_index("choseong", choseong, CHOSEONG_COUNT)?;
        check_index("jungseong", jungseong, JUNGSEONG_COUNT)?;
        check_index("jongseong", jongseong, JONGSEONG_COUNT)?;
        Ok(triple)
    }

    fn validate(&self) -> Result<()> {
        check_index("choseong", self.choseong as usize, CHOSEONG_COUNT)?;
        check_index("jungseong", self.jungseong as usize, JUNGSEONG_COUNT)?;
        check_index("jongseong", self.jongseong as usize, JONGSEONG_COUNT)
    }

    pub fn has_final(&self) -> bool {
        self.jongseong != 0
    }
}

fn check_index(slot: &'static str, index: usize, count: usize) -> Result<()> {
    if index < count {
        Ok(())
    } else {
        Err(Error::InvalidJamoIndex { slot, index })
    }
}

pub fn is_syllable(c: char) -> bool {
    (SYLLABLE_FIRST..=SYLLABLE_LAST).contains(&(c as u32))
}

pub fn decompose(c: char) -> Result<JamoTriple> {
    let cp = c as u32;
    if !is_syllable(c) {
        return Err(Error::NotHangulSyllable(cp));
    }
    let index = (cp - SYLLABLE_FIRST) as usize;
    let per_initial = JUNGSEONG_COUNT * JONGSEONG_COUNT;
    Ok(JamoTriple {
        choseong: (index / per_initial) as u8,
        jungseong: ((index % per_initial) / JONGSEONG_COUNT) as u8,
        jongseong: (index % JONGSEONG_COUNT) as u8,
    })
}

pub fn compose(triple: JamoTriple) -> Result<char> {
    triple.validate()?;
    let index = (triple.choseong as u32 * JUNGSEONG_COUNT as u32 + triple.jungseong as u32) * JONGSEONG_COUNT as u32
        + triple.jongseong as u32;
    Ok(char::from_u32(SYLLABLE_FIRST + index).expect("syllable range is valid scalar values"))
}

/// Flat token ids `[cho, 19 + jung, 40 + jong]`, all below [`VOCAB_SIZE`].
pub fn jamo_token_ids(triple: JamoTriple) -> Result<[usize; 3]> {
    triple.validate()?;
    Ok([triple.choseong as usize, JUNG_OFFSET + triple.jungseong as usize, JONG_OFFSET + triple.jongseong as usize])
}

/// Stroke counts of the three jamo of a syllable.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StrokeVector {
    pub counts: [u32; 3],
    pub total: u32,
}

impl StrokeVector {
    pub fn new(counts: [u32; 3]) -> Self {
        Self { counts, total: counts.iter().sum() }
    }
}

/// Stroke count of every jamo, keyed by slot.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StrokeTable {
    choseong: [u32; CHOSEONG_COUNT],
    jungseong: [u32; JUNGSEONG_COUNT],
    jongseong: [u32; JONGSEONG_COUNT],
}

const BUNDLED_STROKES: &str = include_str!("../data/strokes.tsv");

impl StrokeTable {
    /// The table shipped with the crate (`data/strokes.tsv`).
    pub fn bundled() -> Self {
        Self::parse(BUNDLED_STROKES).expect("bundled stroke table is complete")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        Self::parse(&text)
    }

    /// Parses `<conjoining jamo>\t<count>` lines. The empty final slot is
    /// written as U+3164 and must have count 0; every other entry must be positive.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cho = [None; CHOSEONG_COUNT];
        let mut jung = [None; JUNGSEONG_COUNT];
        let mut jong = [None; JONGSEONG_COUNT];
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            let bad = |why: &str| Error::IncompleteStrokeTable(format!("line {}: {why}", lineno + 1));
            let (jamo, count) = line.split_once('\t').ok_or_else(|| bad("expected <jamo>\\t<count>"))?;
            let mut chars = jamo.chars();
            let (Some(c), None) = (chars.next(), chars.next()) else {
                return Err(bad("expected a single jamo character"));
            };
            let count: u32 = count.trim().parse().map_err(|_| bad("stroke count is not an integer"))?;
            let cp = c as u32;
            let slot = match cp {
                0x1100..=0x1112 => &mut cho[(cp - CHOSEONG_BASE) as usize],
                0x1161..=0x1175 => &mut jung[(cp - JUNGSEONG_BASE) as usize],
                0x11A8..=0x11C2 => &mut jong[(cp - JONGSEONG_BASE) as usize + 1],
                _ if c == EMPTY_FINAL_MARK => &mut jong[0],
                _ => return Err(bad(&format!("U+{cp:04X} is not a modern conjoining jamo"))),
            };
            if slot.replace(count).is_some() {
                return Err(bad(&format!("duplicate entry for U+{cp:04X}")));
            }
        }
        fn finish<const N: usize>(slots: [Option<u32>; N], name: &str) -> Result<[u32; N]> {
            let missing: Vec<_> = slots.iter().enumerate().filter(|(_, s)| s.is_none()).map(|(i, _)| i).collect();
            if !missing.is_empty() {
                return Err(Error::IncompleteStrokeTable(format!("missing {name} entries {missing:?}")));
            }
            Ok(slots.map(Option::unwrap))
        }
        let table = Self {
            choseong: finish(cho, "choseong")?,
            jungseong: finish(jung, "jungseong")?,
            jongseong: finish(jong, "jongseong")?,
        };
        if table.jongseong[0] != 0 {
            return Err(Error::IncompleteStrokeTable("the empty final slot must count 0 strokes".into()));
        }
        let zero = table.choseong.iter().chain(&table.jungseong).chain(&table.jongseong[1..]).any(|&n| n == 0);
        if zero {
            return Err(Error::IncompleteStrokeTable("every real jamo needs a positive stroke count".into()));
        }
        Ok(table)
    }
}

pub fn stroke_vector(triple: JamoTriple, table: &StrokeTable) -> Result<StrokeVector> {
    triple.validate()?;
    Ok(StrokeVector::new([
        table.choseong[triple.choseong as usize],
        table.jungseong[triple.jungseong as usize],
        table.jongseong[triple.jongseong as usize],
    ]))
}

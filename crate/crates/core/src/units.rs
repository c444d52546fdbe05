//! Output unit families and the fixed grapheme inventory.

use serde::{Deserialize, Serialize};
use std::fmt;

/// Which lexical units a loss head or model predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnitFamily {
    Phoneme,
    Grapheme,
    Wordpiece,
}

impl fmt::Display for UnitFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            UnitFamily::Phoneme => "phoneme",
            UnitFamily::Grapheme => "grapheme",
            UnitFamily::Wordpiece => "wordpiece",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for UnitFamily {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "phoneme" => Ok(UnitFamily::Phoneme),
            "grapheme" => Ok(UnitFamily::Grapheme),
            "wordpiece" => Ok(UnitFamily::Wordpiece),
            other => Err(format!("unknown unit family: {other}")),
        }
    }
}

/// Grapheme inventory: letters a-z, digits 0-9, the symbols & . ' % / - :
/// and the space. Blank is not part of the inventory.
pub fn grapheme_inventory() -> Vec<char> {
    let mut inv: Vec<char> = ('a'..='z').collect();
    inv.extend('0'..='9');
    inv.extend(['&', '.', '\'', '%', '/', '-', ':']);
    inv.push(' ');
    inv
}

pub fn is_inventory_char(c: char) -> bool {
    c.is_ascii_lowercase()
        || c.is_ascii_digit()
        || matches!(c, '&' | '.' | '\'' | '%' | '/' | '-' | ':' | ' ')
}

/// Label index of a grapheme within the inventory, if present.
pub fn grapheme_index(c: char) -> Option<usize> {
    match c {
        'a'..='z' => Some(c as usize - 'a' as usize),
        '0'..='9' => Some(26 + c as usize - '0' as usize),
        '&' => Some(36),
        '.' => Some(37),
        '\'' => Some(38),
        '%' => Some(39),
        '/' => Some(40),
        '-' => Some(41),
        ':' => Some(42),
        ' ' => Some(43),
        _ => None,
    }
}

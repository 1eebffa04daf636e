//! Relative-caption serialization into the 96-id toy vocabulary.
//!
//! | ids     | meaning                                  |
//! |---------|------------------------------------------|
//! | 0       | PAD                                      |
//! | 1, 2    | `<sp>`, `</sp>` soft-prompt sentinels     |
//! | 3–6     | query task-prompt tokens                 |
//! | 7–10    | target task-prompt tokens                |
//! | 11–15   | ADD, REMOVE, REPLACE, MODIFY, BG-OP       |
//! | 16      | EOS-EDIT (ends the script)               |
//! | 17–24   | SHAPE-0..7 values                        |
//! | 25–32   | COLOR-0..7 values                        |
//! | 33–35   | SIZE-0..2 values                         |
//! | 36–39   | BG-0..3 values                           |
//! | 40–47   | SEL-SHAPE-0..7                           |
//! | 48–55   | SEL-COLOR-0..7                           |
//! | 56–58   | SEL-SIZE-0..2                            |
//! | 59–95   | reserved                                 |
//!
//! Each edit is its op token followed by operands: ADD `obj`; REMOVE `sel`;
//! REPLACE `sel obj`; MODIFY `sel value`; BG-OP `bg`. An object is three value
//! tokens (shape, color, size); a selector is one to three SEL tokens in
//! shape, color, size order. The script ends with a single EOS-EDIT.

use super::{Attribute, Edit, EditScript, Object, Selector};
use crate::error::{Error, Result};

pub const MAX_CAPTION_LEN: usize = 24;

pub mod tokens {
    pub const VOCAB: usize = 96;
    pub const PAD: u32 = 0;
    pub const SP_OPEN: u32 = 1;
    pub const SP_CLOSE: u32 = 2;
    pub const QUERY_TASK: [u32; 4] = [3, 4, 5, 6];
    pub const TARGET_TASK: [u32; 4] = [7, 8, 9, 10];
    pub const ADD: u32 = 11;
    pub const REMOVE: u32 = 12;
    pub const REPLACE: u32 = 13;
    pub const MODIFY: u32 = 14;
    pub const BG_OP: u32 = 15;
    pub const EOS_EDIT: u32 = 16;
    pub const SHAPE: u32 = 17;
    pub const COLOR: u32 = 25;
    pub const SIZE: u32 = 33;
    pub const BG: u32 = 36;
    pub const SEL_SHAPE: u32 = 40;
    pub const SEL_COLOR: u32 = 48;
    pub const SEL_SIZE: u32 = 56;
    /// First id outside the caption region in use.
    pub const CAPTION_END: u32 = 59;
    pub const CAPTION_START: u32 = 11;
}

use tokens::*;

fn push_object(out: &mut Vec<u32>, o: &Object) {
    out.push(SHAPE + o.shape as u32);
    out.push(COLOR + o.color as u32);
    out.push(SIZE + o.size as u32);
}

fn push_selector(out: &mut Vec<u32>, s: &Selector) {
    if let Some(v) = s.shape {
        out.push(SEL_SHAPE + v as u32);
    }
    if let Some(v) = s.color {
        out.push(SEL_COLOR + v as u32);
    }
    if let Some(v) = s.size {
        out.push(SEL_SIZE + v as u32);
    }
}

fn value_token(attr: Attribute, value: u8) -> u32 {
    let base = match attr {
        Attribute::Shape => SHAPE,
        Attribute::Color => COLOR,
        Attribute::Size => SIZE,
    };
    base + value as u32
}

fn encode(edits: &[Edit]) -> Vec<u32> {
    let mut out = Vec::new();
    for e in edits {
        match e {
            Edit::Add { object } => {
                out.push(ADD);
                push_object(&mut out, object);
            }
            Edit::Remove { selector } => {
                out.push(REMOVE);
                push_selector(&mut out, selector);
            }
            Edit::Replace { selector, object } => {
                out.push(REPLACE);
                push_selector(&mut out, selector);
                push_object(&mut out, object);
            }
            Edit::Modify {
                selector,
                attribute,
                value,
            } => {
                out.push(MODIFY);
                push_selector(&mut out, selector);
                out.push(value_token(*attribute, *value));
            }
            Edit::ChangeBackground { background } => {
                out.push(BG_OP);
                out.push(BG + *background as u32);
            }
        }
    }
    out.push(EOS_EDIT);
    out
}

pub(super) fn encoded_len(edits: &[Edit]) -> usize {
    encode(edits).len()
}

/// Serializes a script into caption tokens (at most 24 for a valid script).
pub fn caption_tokens(edits: &EditScript) -> Vec<u32> {
    encode(edits.edits())
}

fn in_range(tok: u32, base: u32, n: u8) -> Option<u8> {
    (tok >= base && tok < base + n as u32).then(|| (tok - base) as u8)
}

struct Cursor<'a> {
    toks: &'a [u32],
    pos: usize,
}

impl Cursor<'_> {
    fn peek(&self) -> Option<u32> {
        self.toks.get(self.pos).copied()
    }

    fn next(&mut self) -> Result<u32> {
        let t = self
            .peek()
            .ok_or_else(|| Error::InvalidScript("caption truncated".into()))?;
        self.pos += 1;
        Ok(t)
    }

    fn value(&mut self, base: u32, n: u8, what: &str) -> Result<u8> {
        let t = self.next()?;
        in_range(t, base, n).ok_or_else(|| Error::InvalidScript(format!("expected {what}, got token {t}")))
    }

    fn object(&mut self) -> Result<Object> {
        Ok(Object::new(
            self.value(SHAPE, super::N_SHAPES, "shape")?,
            self.value(COLOR, super::N_COLORS, "color")?,
            self.value(SIZE, super::N_SIZES, "size")?,
        ))
    }

    fn selector(&mut self) -> Result<Selector> {
        let mut sel = Selector::default();
        if let Some(v) = self.peek().and_then(|t| in_range(t, SEL_SHAPE, super::N_SHAPES)) {
            sel.shape = Some(v);
            self.pos += 1;
        }
        if let Some(v) = self.peek().and_then(|t| in_range(t, SEL_COLOR, super::N_COLORS)) {
            sel.color = Some(v);
            self.pos += 1;
        }
        if let Some(v) = self.peek().and_then(|t| in_range(t, SEL_SIZE, super::N_SIZES)) {
            sel.size = Some(v);
            self.pos += 1;
        }
        if sel.is_empty() {
            return Err(Error::InvalidScript("empty selector".into()));
        }
        Ok(sel)
    }
}

/// Inverse of [`caption_tokens`].
pub fn parse_caption(toks: &[u32]) -> Result<EditScript> {
    let mut cur = Cursor { toks, pos: 0 };
    let mut edits = Vec::new();
    loop {
        let op = cur.next()?;
        let edit = match op {
            EOS_EDIT => break,
            ADD => Edit::Add {
                object: cur.object()?,
            },
            REMOVE => Edit::Remove {
                selector: cur.selector()?,
            },
            REPLACE => Edit::Replace {
                selector: cur.selector()?,
                object: cur.object()?,
            },
            MODIFY => {
                let selector = cur.selector()?;
                let t = cur.next()?;
                let (attribute, value) = if let Some(v) = in_range(t, SHAPE, super::N_SHAPES) {
                    (Attribute::Shape, v)
                } else if let Some(v) = in_range(t, COLOR, super::N_COLORS) {
                    (Attribute::Color, v)
                } else if let Some(v) = in_range(t, SIZE, super::N_SIZES) {
                    (Attribute::Size, v)
                } else {
                    return Err(Error::InvalidScript(format!("bad MODIFY value token {t}")));
                };
                Edit::Modify {
                    selector,
                    attribute,
                    value,
                }
            }
            BG_OP => Edit::ChangeBackground {
                background: cur.value(BG, super::N_BACKGROUNDS, "background")?,
            },
            t => return Err(Error::InvalidScript(format!("unexpected token {t}"))),
        };
        edits.push(edit);
    }
    if cur.pos != toks.len() {
        return Err(Error::InvalidScript("trailing tokens after EOS-EDIT".into()));
    }
    EditScript::new(edits)
}

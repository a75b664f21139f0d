//! Token vocabulary and the nine-token caption template:
//! `a SIZE COLOR SHAPE RELATION a SIZE COLOR SHAPE`.

use super::scene::{Color, Relation, Scene, Shape, Size};
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const MASK: usize = 2;
/// First non-special token id.
pub const FIRST_WORD: usize = 3;
pub const CAPTION_LEN: usize = 9;

/// Fixed-order vocabulary: three specials, the fourteen caption words, then
/// filler words up to the requested size. Fillers never appear in captions
/// but are legal outcomes of random-token corruption in masked LM training.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
}

impl Vocab {
    pub fn standard(size: usize) -> Result<Vocab> {
        let mut words: Vec<String> = vec!["<pad>".into(), "<cls>".into(), "<mask>".into()];
        words.push("a".into());
        for s in Size::ALL {
            words.push(s.word().into());
        }
        for c in Color::ALL {
            words.push(c.word().into());
        }
        for s in Shape::ALL {
            words.push(s.word().into());
        }
        for r in Relation::ALL {
            words.push(r.word().into());
        }
        if size < words.len() {
            return Err(Error::Config(format!(
                "vocab size {size} below minimum {}",
                words.len()
            )));
        }
        while words.len() < size {
            words.push(format!("filler{}", words.len()));
        }
        Ok(Vocab { words })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn word(&self, id: usize) -> Result<&str> {
        self.words
            .get(id)
            .map(String::as_str)
            .ok_or_else(|| Error::Vocab(format!("token id {id} out of {}", self.words.len())))
    }

    pub fn id(&self, word: &str) -> Result<usize> {
        self.words
            .iter()
            .position(|w| w == word)
            .ok_or_else(|| Error::Vocab(format!("unknown word {word:?}")))
    }

    pub fn is_special(&self, id: usize) -> bool {
        id < FIRST_WORD
    }
}

/// One object description inside a caption.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Desc {
    pub size: Size,
    pub color: Color,
    pub shape: Shape,
}

impl Desc {
    pub fn matches(&self, o: &super::scene::Object) -> bool {
        self.size == o.size && self.color == o.color && self.shape == o.shape
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParsedCaption {
    pub descs: [Desc; 2],
    pub relation: Relation,
}

impl ParsedCaption {
    /// Exact truth of the caption in a scene: some injective assignment of
    /// the two descriptions to the two objects satisfies both descriptions
    /// and the relation.
    pub fn holds_in(&self, scene: &Scene) -> bool {
        let [a, b] = &scene.objects;
        let fwd = self.descs[0].matches(a)
            && self.descs[1].matches(b)
            && self.relation.holds(a.cell(), b.cell());
        let rev = self.descs[0].matches(b)
            && self.descs[1].matches(a)
            && self.relation.holds(b.cell(), a.cell());
        fwd || rev
    }
}

pub fn caption_tokens(scene: &Scene, vocab: &Vocab) -> Result<Vec<u16>> {
    let mut out = Vec::with_capacity(CAPTION_LEN);
    for o in &scene.objects {
        out.push(vocab.id("a")? as u16);
        out.push(vocab.id(o.size.word())? as u16);
        out.push(vocab.id(o.color.word())? as u16);
        out.push(vocab.id(o.shape.word())? as u16);
        if out.len() == 4 {
            out.push(vocab.id(scene.relation.word())? as u16);
        }
    }
    debug_assert_eq!(out.len(), CAPTION_LEN);
    Ok(out)
}

/// Strict template parse; any deviation is an error. The inverse of
/// [`caption_tokens`] up to scene geometry.
pub fn parse_caption(tokens: &[u16], vocab: &Vocab) -> Result<ParsedCaption> {
    if tokens.len() != CAPTION_LEN {
        return Err(Error::Parse(format!(
            "caption must be {CAPTION_LEN} tokens, got {}",
            tokens.len()
        )));
    }
    let word = |i: usize| vocab.word(tokens[i] as usize);
    let desc_at = |base: usize| -> Result<Desc> {
        if word(base)? != "a" {
            return Err(Error::Parse(format!(
                "expected article at position {base}, got {:?}",
                word(base)?
            )));
        }
        let size = Size::from_word(word(base + 1)?)
            .ok_or_else(|| Error::Parse(format!("bad size word at {}", base + 1)))?;
        let color = Color::from_word(word(base + 2)?)
            .ok_or_else(|| Error::Parse(format!("bad color word at {}", base + 2)))?;
        let shape = Shape::from_word(word(base + 3)?)
            .ok_or_else(|| Error::Parse(format!("bad shape word at {}", base + 3)))?;
        Ok(Desc { size, color, shape })
    };
    let d0 = desc_at(0)?;
    let relation = Relation::from_word(word(4)?)
        .ok_or_else(|| Error::Parse("bad relation word at 4".into()))?;
    let d1 = desc_at(5)?;
    Ok(ParsedCaption { descs: [d0, d1], relation })
}

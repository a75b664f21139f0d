//! Scene sampling and rendering.
//!
//! A scene is two attributed objects in distinct cells of a small grid plus
//! one spatial relation that actually holds between them. Rendering produces
//! one feature vector per cell: shape one-hot, color one-hot, size bit,
//! occupancy bit, with i.i.d. Gaussian noise over the whole grid.

use crate::error::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Patch feature width: 3 shape + 4 color + size + occupancy.
pub const PATCH_F: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Color {
    Red,
    Blue,
    Green,
    Yellow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Size {
    Small,
    Big,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Relation {
    LeftOf,
    RightOf,
    Above,
    Below,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }

    pub fn from_word(w: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|s| s.word() == w)
    }

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|s| *s == self).unwrap()
    }
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Blue, Color::Green, Color::Yellow];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Blue => "blue",
            Color::Green => "green",
            Color::Yellow => "yellow",
        }
    }

    pub fn from_word(w: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|c| c.word() == w)
    }

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|c| *c == self).unwrap()
    }
}

impl Size {
    pub const ALL: [Size; 2] = [Size::Small, Size::Big];

    pub fn word(self) -> &'static str {
        match self {
            Size::Small => "small",
            Size::Big => "big",
        }
    }

    pub fn from_word(w: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|s| s.word() == w)
    }
}

impl Relation {
    pub const ALL: [Relation; 4] = [
        Relation::LeftOf,
        Relation::RightOf,
        Relation::Above,
        Relation::Below,
    ];

    pub fn word(self) -> &'static str {
        match self {
            Relation::LeftOf => "left-of",
            Relation::RightOf => "right-of",
            Relation::Above => "above",
            Relation::Below => "below",
        }
    }

    pub fn from_word(w: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|r| r.word() == w)
    }

    /// Whether `a REL b` holds for grid cells `a`, `b`.
    pub fn holds(self, a: (u8, u8), b: (u8, u8)) -> bool {
        match self {
            Relation::LeftOf => a.1 < b.1,
            Relation::RightOf => a.1 > b.1,
            Relation::Above => a.0 < b.0,
            Relation::Below => a.0 > b.0,
        }
    }

    /// Relations that hold between two distinct cells; never empty.
    pub fn valid_for(a: (u8, u8), b: (u8, u8)) -> Vec<Relation> {
        Relation::ALL.iter().copied().filter(|r| r.holds(a, b)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Object {
    pub shape: Shape,
    pub color: Color,
    pub size: Size,
    pub row: u8,
    pub col: u8,
}

impl Object {
    pub fn cell(&self) -> (u8, u8) {
        (self.row, self.col)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scene {
    pub objects: [Object; 2],
    pub relation: Relation,
}

impl Scene {
    /// Validates the scene invariants: in-bounds distinct cells and a
    /// relation that holds from object 0 to object 1.
    pub fn validate(&self, rows: usize, cols: usize) -> Result<()> {
        for o in &self.objects {
            if o.row as usize >= rows || o.col as usize >= cols {
                return Err(Error::Domain(format!(
                    "object at ({}, {}) outside {rows}x{cols} grid",
                    o.row, o.col
                )));
            }
        }
        if self.objects[0].cell() == self.objects[1].cell() {
            return Err(Error::Domain("objects share a cell".into()));
        }
        if !self.relation.holds(self.objects[0].cell(), self.objects[1].cell()) {
            return Err(Error::Domain(format!(
                "relation {} does not hold",
                self.relation.word()
            )));
        }
        Ok(())
    }

    /// Uniform scene: attributes i.i.d., cells distinct, relation uniform
    /// over the relations consistent with the two cells.
    pub fn sample<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Scene {
        assert!(rows * cols >= 2, "grid must have at least two cells");
        let obj = |row: u8, col: u8, rng: &mut R| Object {
            shape: Shape::ALL[rng.gen_range(0..Shape::ALL.len())],
            color: Color::ALL[rng.gen_range(0..Color::ALL.len())],
            size: Size::ALL[rng.gen_range(0..Size::ALL.len())],
            row,
            col,
        };
        let n = rows * cols;
        let c0 = rng.gen_range(0..n);
        let c1 = loop {
            let c = rng.gen_range(0..n);
            if c != c0 {
                break c;
            }
        };
        let (r0, k0) = ((c0 / cols) as u8, (c0 % cols) as u8);
        let (r1, k1) = ((c1 / cols) as u8, (c1 % cols) as u8);
        let a = obj(r0, k0, rng);
        let b = obj(r1, k1, rng);
        let valid = Relation::valid_for(a.cell(), b.cell());
        let relation = valid[rng.gen_range(0..valid.len())];
        Scene { objects: [a, b], relation }
    }

    /// The scene with the two objects' cells exchanged, described by the
    /// given relation (which must hold after the swap).
    pub fn with_cells_swapped<R: Rng>(&self, rng: &mut R) -> Scene {
        let mut a = self.objects[0];
        let mut b = self.objects[1];
        std::mem::swap(&mut a.row, &mut b.row);
        std::mem::swap(&mut a.col, &mut b.col);
        let valid = Relation::valid_for(a.cell(), b.cell());
        let relation = valid[rng.gen_range(0..valid.len())];
        Scene { objects: [a, b], relation }
    }
}

/// Renders a scene to `rows·cols` patch vectors of width [`PATCH_F`], adding
/// `N(0, noise_std²)` to every component.
pub fn render<R: Rng>(
    scene: &Scene,
    rows: usize,
    cols: usize,
    noise_std: f64,
    rng: &mut R,
) -> Vec<f64> {
    let n = rows * cols;
    let mut feat = vec![0.0f64; n * PATCH_F];
    for o in &scene.objects {
        let cell = o.row as usize * cols + o.col as usize;
        let base = cell * PATCH_F;
        feat[base + o.shape.index()] = 1.0;
        feat[base + 3 + o.color.index()] = 1.0;
        feat[base + 7] = match o.size {
            Size::Small => 0.0,
            Size::Big => 1.0,
        };
        feat[base + 8] = 1.0;
    }
    for x in &mut feat {
        *x += noise_std * rng.sample::<f64, _>(rand_distr::StandardNormal);
    }
    feat
}

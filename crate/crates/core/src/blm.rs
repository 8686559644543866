//! Block label matrices: the compressed scene representation.
//!
//! A segmented image is tiled into `rows x cols` equal blocks and every block
//! is labeled with its most frequent pixel class. Cells can also be
//! `Unknown`, which is how occlusions are represented.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Index into a class vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ClassId(pub usize);

impl ClassId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl From<usize> for ClassId {
    fn from(value: usize) -> Self {
        ClassId(value)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Cell {
    Known(ClassId),
    Unknown,
}

impl Cell {
    pub fn class(self) -> Option<ClassId> {
        match self {
            Cell::Known(c) => Some(c),
            Cell::Unknown => None,
        }
    }

    pub fn is_known(self) -> bool {
        matches!(self, Cell::Known(_))
    }
}

/// Pixel-level label map produced by an upstream segmentation model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentMap {
    height: usize,
    width: usize,
    num_classes: usize,
    pixels: Vec<ClassId>,
}

impl SegmentMap {
    pub fn new(height: usize, width: usize, num_classes: usize, pixels: Vec<ClassId>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::ShapeMismatch(format!(
                "segment map must be at least 1x1, got {height}x{width}"
            )));
        }
        if pixels.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "{height}x{width} segment map needs {} pixels, got {}",
                height * width,
                pixels.len()
            )));
        }
        if let Some(pos) = pixels.iter().position(|p| p.0 >= num_classes) {
            return Err(Error::InvalidClass {
                row: pos / width,
                col: pos % width,
                class: pixels[pos].0,
                num_classes,
            });
        }
        Ok(Self {
            height,
            width,
            num_classes,
            pixels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn pixel(&self, row: usize, col: usize) -> ClassId {
        self.pixels[row * self.width + col]
    }
}

/// A `rows x cols` grid of block labels over a vocabulary of `num_classes`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Blm {
    rows: usize,
    cols: usize,
    num_classes: usize,
    cells: Vec<Cell>,
}

impl Blm {
    pub fn new(rows: usize, cols: usize, num_classes: usize, cells: Vec<Cell>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::ShapeMismatch(format!(
                "block label matrix must be at least 1x1, got {rows}x{cols}"
            )));
        }
        if cells.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{rows}x{cols} grid needs {} cells, got {}",
                rows * cols,
                cells.len()
            )));
        }
        for (i, cell) in cells.iter().enumerate() {
            if let Cell::Known(c) = cell {
                if c.0 >= num_classes {
                    return Err(Error::InvalidClass {
                        row: i / cols,
                        col: i % cols,
                        class: c.0,
                        num_classes,
                    });
                }
            }
        }
        Ok(Self {
            rows,
            cols,
            num_classes,
            cells,
        })
    }

    /// Fully known grid from raw class indices in row-major order.
    pub fn from_classes(rows: usize, cols: usize, num_classes: usize, classes: &[usize]) -> Result<Self> {
        let cells = classes.iter().map(|&c| Cell::Known(ClassId(c))).collect();
        Self::new(rows, cols, num_classes, cells)
    }

    pub fn filled(rows: usize, cols: usize, num_classes: usize, class: ClassId) -> Result<Self> {
        Self::new(rows, cols, num_classes, vec![Cell::Known(class); rows * cols])
    }

    pub fn unknown(rows: usize, cols: usize, num_classes: usize) -> Result<Self> {
        Self::new(rows, cols, num_classes, vec![Cell::Unknown; rows * cols])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn get(&self, row: usize, col: usize) -> Cell {
        self.cells[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, cell: Cell) -> Result<()> {
        self.check_bounds(row, col)?;
        if let Cell::Known(c) = cell {
            if c.0 >= self.num_classes {
                return Err(Error::InvalidClass {
                    row,
                    col,
                    class: c.0,
                    num_classes: self.num_classes,
                });
            }
        }
        self.cells[row * self.cols + col] = cell;
        Ok(())
    }

    pub fn is_complete(&self) -> bool {
        self.cells.iter().all(|c| c.is_known())
    }

    /// Coordinates of Unknown cells in raster order.
    pub fn unknown_coords(&self) -> Vec<(usize, usize)> {
        self.cells
            .iter()
            .enumerate()
            .filter(|(_, c)| !c.is_known())
            .map(|(i, _)| (i / self.cols, i % self.cols))
            .collect()
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut hist = vec![0; self.num_classes];
        for c in self.cells.iter().filter_map(|c| c.class()) {
            hist[c.0] += 1;
        }
        hist
    }

    fn check_bounds(&self, row: usize, col: usize) -> Result<()> {
        if row >= self.rows || col >= self.cols {
            return Err(Error::OutOfBounds(format!(
                "cell ({row}, {col}) outside {}x{} grid",
                self.rows, self.cols
            )));
        }
        Ok(())
    }

    /// Rotates the grid counterclockwise by `rot`.
    pub fn rotate(&self, rot: Rotation) -> Blm {
        let (new_rows, new_cols) = rot.rotated_dims(self.rows, self.cols);
        let mut cells = vec![Cell::Unknown; self.cells.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                let (nr, nc) = rot.map_unchecked(r, c, self.rows, self.cols);
                cells[nr * new_cols + nc] = self.get(r, c);
            }
        }
        Blm {
            rows: new_rows,
            cols: new_cols,
            num_classes: self.num_classes,
            cells,
        }
    }

    /// Marks every cell inside `region` as Unknown.
    pub fn apply_mask(&self, region: &MaskRegion) -> Result<Blm> {
        region.check_fits(self.rows, self.cols)?;
        let mut out = self.clone();
        for r in region.top..region.top + region.height {
            for c in region.left..region.left + region.width {
                out.cells[r * self.cols + c] = Cell::Unknown;
            }
        }
        Ok(out)
    }
}

/// Mode-pools a pixel label map into a `rows x cols` block label matrix.
///
/// Each block takes its most frequent pixel class; ties go to the smallest
/// class index. The map dimensions must divide evenly into blocks.
pub fn extract_blm(map: &SegmentMap, rows: usize, cols: usize) -> Result<Blm> {
    if rows == 0 || map.height % rows != 0 {
        return Err(Error::DimensionMismatch {
            axis: "height",
            size: map.height,
            blocks: rows,
        });
    }
    if cols == 0 || map.width % cols != 0 {
        return Err(Error::DimensionMismatch {
            axis: "width",
            size: map.width,
            blocks: cols,
        });
    }
    let block_h = map.height / rows;
    let block_w = map.width / cols;
    let mut counts = vec![0usize; map.num_classes];
    let mut cells = Vec::with_capacity(rows * cols);
    for br in 0..rows {
        for bc in 0..cols {
            counts.iter_mut().for_each(|c| *c = 0);
            for r in br * block_h..(br + 1) * block_h {
                for c in bc * block_w..(bc + 1) * block_w {
                    counts[map.pixel(r, c).0] += 1;
                }
            }
            // max_by_key keeps the last maximum, so scan in reverse to prefer the smallest id.
            let mode = counts
                .iter()
                .enumerate()
                .rev()
                .max_by_key(|(_, &n)| n)
                .map(|(i, _)| i)
                .unwrap_or(0);
            cells.push(Cell::Known(ClassId(mode)));
        }
    }
    Blm::new(rows, cols, map.num_classes, cells)
}

/// Counterclockwise rotation by a whole number of quarter turns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Rotation(u8);

impl Rotation {
    pub const IDENTITY: Rotation = Rotation(0);
    pub const ALL: [Rotation; 4] = [Rotation(0), Rotation(1), Rotation(2), Rotation(3)];

    /// Any integer is accepted and reduced modulo four.
    pub fn new(quarter_turns: u32) -> Self {
        Rotation((quarter_turns % 4) as u8)
    }

    pub fn quarter_turns(self) -> u8 {
        self.0
    }

    pub fn degrees(self) -> u32 {
        self.0 as u32 * 90
    }

    pub fn inverse(self) -> Self {
        Rotation((4 - self.0) % 4)
    }

    pub fn then(self, other: Rotation) -> Self {
        Rotation((self.0 + other.0) % 4)
    }

    pub fn rotated_dims(self, rows: usize, cols: usize) -> (usize, usize) {
        if self.0 % 2 == 0 {
            (rows, cols)
        } else {
            (cols, rows)
        }
    }

    fn map_unchecked(self, row: usize, col: usize, rows: usize, cols: usize) -> (usize, usize) {
        match self.0 {
            0 => (row, col),
            1 => (cols - 1 - col, row),
            2 => (rows - 1 - row, cols - 1 - col),
            _ => (col, rows - 1 - row),
        }
    }
}

/// Where cell `(row, col)` of a `rows x cols` grid lands after `rot`.
pub fn rotate_coord(row: usize, col: usize, rows: usize, cols: usize, rot: Rotation) -> Result<(usize, usize)> {
    if row >= rows || col >= cols {
        return Err(Error::OutOfBounds(format!(
            "cell ({row}, {col}) outside {rows}x{cols} grid"
        )));
    }
    Ok(rot.map_unchecked(row, col, rows, cols))
}

/// Axis-aligned rectangle of occluded blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MaskRegion {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl MaskRegion {
    pub fn new(top: usize, left: usize, height: usize, width: usize) -> Self {
        Self {
            top,
            left,
            height,
            width,
        }
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.top && row < self.top + self.height && col >= self.left && col < self.left + self.width
    }

    pub fn check_fits(&self, rows: usize, cols: usize) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::OutOfBounds("mask region must be at least 1x1".into()));
        }
        if self.top + self.height > rows || self.left + self.width > cols {
            return Err(Error::OutOfBounds(format!(
                "mask {}x{} at ({}, {}) exceeds {rows}x{cols} grid",
                self.height, self.width, self.top, self.left
            )));
        }
        Ok(())
    }
}

const BLM_MAGIC: &str = "BLMv1";

/// Renders the `BLMv1` text format.
pub fn format_blm(blm: &Blm) -> String {
    let mut out = String::with_capacity(blm.len() * 3 + 32);
    let _ = writeln!(out, "{BLM_MAGIC} {} {} {}", blm.rows, blm.cols, blm.num_classes);
    for r in 0..blm.rows {
        for c in 0..blm.cols {
            if c > 0 {
                out.push(' ');
            }
            match blm.get(r, c) {
                Cell::Known(id) => {
                    let _ = write!(out, "{}", id.0);
                }
                Cell::Unknown => out.push('?'),
            }
        }
        out.push('\n');
    }
    out
}

/// Whitespace-separated tokens of a line with their 1-based column.
pub(crate) fn tokens(line: &str) -> impl Iterator<Item = (usize, &str)> {
    let mut rest = line;
    let mut offset = 0;
    std::iter::from_fn(move || {
        let start = rest.find(|ch: char| !ch.is_whitespace())?;
        let tail = &rest[start..];
        let len = tail.find(char::is_whitespace).unwrap_or(tail.len());
        let token = &tail[..len];
        let column = offset + start + 1;
        offset += start + len;
        rest = &tail[len..];
        Some((column, token))
    })
}

/// Parses a `<magic> <a> <b> <c>` header line.
pub(crate) fn parse_header(line: Option<&str>, magic: &str) -> Result<[usize; 3]> {
    let line = line.ok_or_else(|| Error::parse(1, 1, "missing header"))?;
    let toks: Vec<_> = tokens(line).collect();
    match toks.first() {
        Some((_, m)) if *m == magic => {}
        Some((col, m)) => return Err(Error::parse(1, *col, format!("expected magic {magic:?}, found {m:?}"))),
        None => return Err(Error::parse(1, 1, "missing header")),
    }
    if toks.len() != 4 {
        return Err(Error::parse(
            1,
            toks.last().map(|t| t.0).unwrap_or(1),
            format!("header needs 3 integers after {magic}, found {}", toks.len() - 1),
        ));
    }
    let mut dims = [0usize; 3];
    for (slot, (col, tok)) in dims.iter_mut().zip(&toks[1..]) {
        *slot = tok
            .parse()
            .map_err(|_| Error::parse(1, *col, format!("invalid integer {tok:?}")))?;
    }
    Ok(dims)
}

pub fn parse_blm(text: &str) -> Result<Blm> {
    let mut lines = text.split('\n');
    let [rows, cols, num_classes] = parse_header(lines.next(), BLM_MAGIC)?;
    if rows == 0 || cols == 0 {
        return Err(Error::parse(1, 1, "grid dimensions must be positive"));
    }
    let mut cells = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let line_no = r + 2;
        let line = lines
            .next()
            .ok_or_else(|| Error::parse(line_no, 1, format!("expected {rows} grid rows, found {r}")))?;
        let mut count = 0;
        for (col, tok) in tokens(line) {
            if count == cols {
                return Err(Error::parse(line_no, col, format!("row has more than {cols} cells")));
            }
            let cell = if tok == "?" {
                Cell::Unknown
            } else {
                let id: usize = tok
                    .parse()
                    .map_err(|_| Error::parse(line_no, col, format!("invalid cell {tok:?}")))?;
                if id >= num_classes {
                    return Err(Error::parse(
                        line_no,
                        col,
                        format!("class {id} outside vocabulary of {num_classes}"),
                    ));
                }
                Cell::Known(ClassId(id))
            };
            cells.push(cell);
            count += 1;
        }
        if count != cols {
            return Err(Error::parse(line_no, line.len() + 1, format!("row has {count} cells, expected {cols}")));
        }
    }
    for (i, line) in lines.enumerate() {
        if !line.trim().is_empty() {
            return Err(Error::parse(rows + 2 + i, 1, "trailing content after grid"));
        }
    }
    Blm::new(rows, cols, num_classes, cells)
}

pub fn read_blm(path: impl AsRef<Path>) -> Result<Blm> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::from(e).in_file(path))?;
    parse_blm(&text).map_err(|e| e.in_file(path))
}

pub fn write_blm(blm: &Blm, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, format_blm(blm))?;
    Ok(())
}

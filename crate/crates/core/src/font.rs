//! Embedded 5×7 bitmap font shared by the plate renderer and the built-in OCR.

pub const GLYPH_W: usize = 5;
pub const GLYPH_H: usize = 7;

/// One glyph: seven rows, bit 4 is the leftmost column.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Glyph {
    pub ch: char,
    pub rows: [u8; GLYPH_H],
}

impl Glyph {
    #[inline]
    pub fn ink(&self, col: usize, row: usize) -> bool {
        self.rows[row] & (1 << (GLYPH_W - 1 - col)) != 0
    }

    /// Tight `(col0, row0, col1, row1)` bounds of the inked cells, half-open.
    pub fn ink_bounds(&self) -> (usize, usize, usize, usize) {
        let (mut c0, mut r0, mut c1, mut r1) = (GLYPH_W, GLYPH_H, 0, 0);
        for r in 0..GLYPH_H {
            for c in 0..GLYPH_W {
                if self.ink(c, r) {
                    c0 = c0.min(c);
                    r0 = r0.min(r);
                    c1 = c1.max(c + 1);
                    r1 = r1.max(r + 1);
                }
            }
        }
        (c0, r0, c1, r1)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Font {
    glyphs: &'static [Glyph],
}

impl Font {
    pub fn builtin() -> Self {
        Font { glyphs: &GLYPHS }
    }

    pub fn glyph(&self, ch: char) -> Option<&Glyph> {
        self.glyphs.iter().find(|g| g.ch == ch)
    }

    pub fn glyphs(&self) -> &[Glyph] {
        self.glyphs
    }

    /// Characters the font can render, in table order.
    pub fn alphabet(&self) -> String {
        self.glyphs.iter().map(|g| g.ch).collect()
    }
}

impl Default for Font {
    fn default() -> Self {
        Font::builtin()
    }
}

const fn row(s: &[u8; 5]) -> u8 {
    let mut v = 0u8;
    let mut i = 0;
    while i < 5 {
        if s[i] == b'#' {
            v |= 1 << (4 - i);
        }
        i += 1;
    }
    v
}

macro_rules! glyph {
    ($ch:literal, $($r:literal),+ $(,)?) => {
        Glyph { ch: $ch, rows: [$(row($r)),+] }
    };
}

static GLYPHS: [Glyph; 37] = [
    glyph!('A', b".###.", b"#...#", b"#...#", b"#####", b"#...#", b"#...#", b"#...#"),
    glyph!('B', b"####.", b"#...#", b"#...#", b"####.", b"#...#", b"#...#", b"####."),
    glyph!('C', b".###.", b"#...#", b"#....", b"#....", b"#....", b"#...#", b".###."),
    glyph!('D', b"###..", b"#..#.", b"#...#", b"#...#", b"#...#", b"#..#.", b"###.."),
    glyph!('E', b"#####", b"#....", b"#....", b"####.", b"#....", b"#....", b"#####"),
    glyph!('F', b"#####", b"#....", b"#....", b"####.", b"#....", b"#....", b"#...."),
    glyph!('G', b".###.", b"#...#", b"#....", b"#.###", b"#...#", b"#...#", b".####"),
    glyph!('H', b"#...#", b"#...#", b"#...#", b"#####", b"#...#", b"#...#", b"#...#"),
    glyph!('I', b".###.", b"..#..", b"..#..", b"..#..", b"..#..", b"..#..", b".###."),
    glyph!('J', b"..###", b"...#.", b"...#.", b"...#.", b"...#.", b"#..#.", b".##.."),
    glyph!('K', b"#...#", b"#..#.", b"#.#..", b"##...", b"#.#..", b"#..#.", b"#...#"),
    glyph!('L', b"#....", b"#....", b"#....", b"#....", b"#....", b"#....", b"#####"),
    glyph!('M', b"#...#", b"##.##", b"#.#.#", b"#.#.#", b"#...#", b"#...#", b"#...#"),
    glyph!('N', b"#...#", b"#...#", b"##..#", b"#.#.#", b"#..##", b"#...#", b"#...#"),
    glyph!('O', b".###.", b"#...#", b"#...#", b"#...#", b"#...#", b"#...#", b".###."),
    glyph!('P', b"####.", b"#...#", b"#...#", b"####.", b"#....", b"#....", b"#...."),
    glyph!('Q', b".###.", b"#...#", b"#...#", b"#...#", b"#.#.#", b"#..#.", b".##.#"),
    glyph!('R', b"####.", b"#...#", b"#...#", b"####.", b"#.#..", b"#..#.", b"#...#"),
    glyph!('S', b".####", b"#....", b"#....", b".###.", b"....#", b"....#", b"####."),
    glyph!('T', b"#####", b"..#..", b"..#..", b"..#..", b"..#..", b"..#..", b"..#.."),
    glyph!('U', b"#...#", b"#...#", b"#...#", b"#...#", b"#...#", b"#...#", b".###."),
    glyph!('V', b"#...#", b"#...#", b"#...#", b"#...#", b"#...#", b".#.#.", b"..#.."),
    glyph!('W', b"#...#", b"#...#", b"#...#", b"#.#.#", b"#.#.#", b"#.#.#", b".#.#."),
    glyph!('X', b"#...#", b"#...#", b".#.#.", b"..#..", b".#.#.", b"#...#", b"#...#"),
    glyph!('Y', b"#...#", b"#...#", b".#.#.", b"..#..", b"..#..", b"..#..", b"..#.."),
    glyph!('Z', b"#####", b"....#", b"...#.", b"..#..", b".#...", b"#....", b"#####"),
    glyph!('0', b".###.", b"#...#", b"#..##", b"#.#.#", b"##..#", b"#...#", b".###."),
    glyph!('1', b"..#..", b".##..", b"..#..", b"..#..", b"..#..", b"..#..", b".###."),
    glyph!('2', b".###.", b"#...#", b"....#", b"...#.", b"..#..", b".#...", b"#####"),
    glyph!('3', b"#####", b"...#.", b"..#..", b"...#.", b"....#", b"#...#", b".###."),
    glyph!('4', b"...#.", b"..##.", b".#.#.", b"#..#.", b"#####", b"...#.", b"...#."),
    glyph!('5', b"#####", b"#....", b"####.", b"....#", b"....#", b"#...#", b".###."),
    glyph!('6', b"..##.", b".#...", b"#....", b"####.", b"#...#", b"#...#", b".###."),
    glyph!('7', b"#####", b"....#", b"...#.", b"..#..", b".#...", b".#...", b".#..."),
    glyph!('8', b".###.", b"#...#", b"#...#", b".###.", b"#...#", b"#...#", b".###."),
    glyph!('9', b".###.", b"#...#", b"#...#", b".####", b"....#", b"...#.", b".##.."),
    glyph!('-', b".....", b".....", b".....", b".###.", b".....", b".....", b"....."),
];

//! Built-in 5x7 bitmap font for the 36 plate symbols.

pub const FONT_W: usize = 5;
pub const FONT_H: usize = 7;

#[rustfmt::skip]
const GLYPHS: [(char, [&str; FONT_H]); 36] = [
    ('A', [".XXX.", "X...X", "X...X", "XXXXX", "X...X", "X...X", "X...X"]),
    ('B', ["XXXX.", "X...X", "X...X", "XXXX.", "X...X", "X...X", "XXXX."]),
    ('C', [".XXX.", "X...X", "X....", "X....", "X....", "X...X", ".XXX."]),
    ('D', ["XXXX.", "X...X", "X...X", "X...X", "X...X", "X...X", "XXXX."]),
    ('E', ["XXXXX", "X....", "X....", "XXXX.", "X....", "X....", "XXXXX"]),
    ('F', ["XXXXX", "X....", "X....", "XXXX.", "X....", "X....", "X...."]),
    ('G', [".XXX.", "X...X", "X....", "X.XXX", "X...X", "X...X", ".XXXX"]),
    ('H', ["X...X", "X...X", "X...X", "XXXXX", "X...X", "X...X", "X...X"]),
    ('I', [".XXX.", "..X..", "..X..", "..X..", "..X..", "..X..", ".XXX."]),
    ('J', ["..XXX", "...X.", "...X.", "...X.", "...X.", "X..X.", ".XX.."]),
    ('K', ["X...X", "X..X.", "X.X..", "XX...", "X.X..", "X..X.", "X...X"]),
    ('L', ["X....", "X....", "X....", "X....", "X....", "X....", "XXXXX"]),
    ('M', ["X...X", "XX.XX", "X.X.X", "X.X.X", "X...X", "X...X", "X...X"]),
    ('N', ["X...X", "X...X", "XX..X", "X.X.X", "X..XX", "X...X", "X...X"]),
    ('O', [".XXX.", "X...X", "X...X", "X...X", "X...X", "X...X", ".XXX."]),
    ('P', ["XXXX.", "X...X", "X...X", "XXXX.", "X....", "X....", "X...."]),
    ('Q', [".XXX.", "X...X", "X...X", "X...X", "X.X.X", "X..X.", ".XX.X"]),
    ('R', ["XXXX.", "X...X", "X...X", "XXXX.", "X.X..", "X..X.", "X...X"]),
    ('S', [".XXXX", "X....", "X....", ".XXX.", "....X", "....X", "XXXX."]),
    ('T', ["XXXXX", "..X..", "..X..", "..X..", "..X..", "..X..", "..X.."]),
    ('U', ["X...X", "X...X", "X...X", "X...X", "X...X", "X...X", ".XXX."]),
    ('V', ["X...X", "X...X", "X...X", "X...X", "X...X", ".X.X.", "..X.."]),
    ('W', ["X...X", "X...X", "X...X", "X.X.X", "X.X.X", "X.X.X", ".X.X."]),
    ('X', ["X...X", "X...X", ".X.X.", "..X..", ".X.X.", "X...X", "X...X"]),
    ('Y', ["X...X", "X...X", ".X.X.", "..X..", "..X..", "..X..", "..X.."]),
    ('Z', ["XXXXX", "....X", "...X.", "..X..", ".X...", "X....", "XXXXX"]),
    ('0', [".XXX.", "X...X", "X..XX", "X.X.X", "XX..X", "X...X", ".XXX."]),
    ('1', ["..X..", ".XX..", "..X..", "..X..", "..X..", "..X..", ".XXX."]),
    ('2', [".XXX.", "X...X", "....X", "...X.", "..X..", ".X...", "XXXXX"]),
    ('3', ["XXXXX", "...X.", "..X..", "...X.", "....X", "X...X", ".XXX."]),
    ('4', ["...X.", "..XX.", ".X.X.", "X..X.", "XXXXX", "...X.", "...X."]),
    ('5', ["XXXXX", "X....", "XXXX.", "....X", "....X", "X...X", ".XXX."]),
    ('6', ["..XX.", ".X...", "X....", "XXXX.", "X...X", "X...X", ".XXX."]),
    ('7', ["XXXXX", "....X", "...X.", "..X..", ".X...", ".X...", ".X..."]),
    ('8', [".XXX.", "X...X", "X...X", ".XXX.", "X...X", "X...X", ".XXX."]),
    ('9', [".XXX.", "X...X", "X...X", ".XXXX", "....X", "...X.", ".XX.."]),
];

/// Every symbol the font can draw, in class-id order of the full vocabulary.
pub const FULL_VOCABULARY: &str = "ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";

/// 5x7 bitmap of one symbol, row-major, or `None` if the font lacks it.
pub fn bitmap(ch: char) -> Option<[bool; FONT_W * FONT_H]> {
    let (_, rows) = GLYPHS.iter().find(|(c, _)| *c == ch)?;
    let mut out = [false; FONT_W * FONT_H];
    for (y, row) in rows.iter().enumerate() {
        for (x, b) in row.bytes().enumerate() {
            out[y * FONT_W + x] = b == b'X';
        }
    }
    Some(out)
}

/// Nearest-neighbour raster of `ch` scaled to `w x h`.
pub fn raster(ch: char, w: usize, h: usize) -> Option<Vec<bool>> {
    let bm = bitmap(ch)?;
    let mut out = vec![false; w * h];
    for y in 0..h {
        let sy = y * FONT_H / h;
        for x in 0..w {
            let sx = x * FONT_W / w;
            out[y * w + x] = bm[sy * FONT_W + sx];
        }
    }
    Some(out)
}

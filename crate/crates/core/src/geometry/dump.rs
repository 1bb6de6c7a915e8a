//! Debug dumps of canvases: plain text and 8-bit binary PGM.

use std::io::{self, Write};

use super::{Canvas, NUM_SYMBOLS};

/// Gray level for each symbol; `BG` is mid-gray and `BD` white.
pub const PALETTE: [u8; NUM_SYMBOLS] = [0, 30, 52, 74, 96, 118, 150, 172, 194, 216, 128, 255];

/// One line per row, symbol codes separated by single spaces.
pub fn canvas_to_text(c: &Canvas) -> String {
    let mut out = String::with_capacity(c.size() * c.size() * 3);
    for r in 0..c.size() {
        for col in 0..c.size() {
            if col > 0 {
                out.push(' ');
            }
            out.push_str(&c.get(r, col).to_string());
        }
        out.push('\n');
    }
    out
}

/// Writes a binary (P5) PGM, each cell drawn as a `zoom x zoom` square.
pub fn write_canvas_pgm<W: Write>(w: &mut W, c: &Canvas, zoom: usize) -> io::Result<()> {
    let zoom = zoom.max(1);
    let side = c.size() * zoom;
    let mut pixels = Vec::with_capacity(side * side);
    for r in 0..side {
        for col in 0..side {
            pixels.push(PALETTE[c.get(r / zoom, col / zoom) as usize]);
        }
    }
    write_pgm(w, side, side, &pixels)
}

pub fn write_pgm<W: Write>(w: &mut W, width: usize, height: usize, pixels: &[u8]) -> io::Result<()> {
    assert_eq!(pixels.len(), width * height);
    write!(w, "P5\n{width} {height}\n255\n")?;
    w.write_all(pixels)
}

/// Linearly maps `values` onto 0..=255 (constant maps become black).
pub fn heatmap_pixels(values: &[f32]) -> Vec<u8> {
    let lo = values.iter().cloned().fold(f32::INFINITY, f32::min);
    let hi = values.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let span = hi - lo;
    values
        .iter()
        .map(|&v| if span > 0.0 { (((v - lo) / span) * 255.0).round() as u8 } else { 0 })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{BD, BG};

    #[test]
    fn text_and_pgm() {
        let mut c = Canvas::new(2);
        c.set(0, 0, 3);
        c.set(1, 1, BD);
        assert_eq!(canvas_to_text(&c), format!("3 {BG}\n{BG} {BD}\n"));
        let mut buf = Vec::new();
        write_canvas_pgm(&mut buf, &c, 2).unwrap();
        let header = b"P5\n4 4\n255\n";
        assert_eq!(&buf[..header.len()], header);
        assert_eq!(buf.len(), header.len() + 16);
        assert_eq!(buf[header.len()], PALETTE[3]);
        assert_eq!(*buf.last().unwrap(), 255);
    }
}

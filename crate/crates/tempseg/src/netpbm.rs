//! Binary netpbm images: P6 (RGB) and P5 (grayscale), 8-bit, maxval 255.
//! The parser tolerates comments and arbitrary whitespace in the header.

use std::io::{Read, Write};

/// 8-bit image buffer; `channels` is 3 for PPM, 1 for PGM.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Image { width, height, channels, data: vec![0; width * height * channels] }
    }
}

fn err(msg: impl Into<String>) -> std::io::Error {
    std::io::Error::new(std::io::ErrorKind::InvalidData, msg.into())
}

pub fn write_ppm<W: Write>(w: &mut W, img: &Image) -> std::io::Result<()> {
    if img.channels != 3 {
        return Err(err("PPM requires 3 channels"));
    }
    write!(w, "P6\n{} {}\n255\n", img.width, img.height)?;
    w.write_all(&img.data)
}

pub fn write_pgm<W: Write>(w: &mut W, img: &Image) -> std::io::Result<()> {
    if img.channels != 1 {
        return Err(err("PGM requires 1 channel"));
    }
    write!(w, "P5\n{} {}\n255\n", img.width, img.height)?;
    w.write_all(&img.data)
}

/// Reads one ASCII token, skipping whitespace and `#` comments.
fn read_token<R: Read>(r: &mut R) -> std::io::Result<String> {
    let mut tok = String::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            if tok.is_empty() {
                return Err(err("unexpected end of header"));
            }
            return Ok(tok);
        }
        let c = byte[0];
        if c == b'#' && tok.is_empty() {
            // comment runs to end of line
            loop {
                if r.read(&mut byte)? == 0 || byte[0] == b'\n' {
                    break;
                }
            }
            continue;
        }
        if c.is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            return Ok(tok);
        }
        tok.push(c as char);
    }
}

fn read_header<R: Read>(r: &mut R, magic: &str) -> std::io::Result<(usize, usize)> {
    let m = read_token(r)?;
    if m != magic {
        return Err(err(format!("bad magic '{}', expected {}", m, magic)));
    }
    let parse = |t: String| t.parse::<usize>().map_err(|_| err(format!("bad header token '{}'", t)));
    let width = parse(read_token(r)?)?;
    let height = parse(read_token(r)?)?;
    let maxval = parse(read_token(r)?)?;
    if maxval != 255 {
        return Err(err(format!("unsupported maxval {}", maxval)));
    }
    if width == 0 || height == 0 {
        return Err(err("zero image dimension"));
    }
    Ok((width, height))
}

fn read_body<R: Read>(r: &mut R, width: usize, height: usize, channels: usize) -> std::io::Result<Image> {
    let mut data = vec![0u8; width * height * channels];
    r.read_exact(&mut data)?;
    Ok(Image { width, height, channels, data })
}

pub fn read_ppm<R: Read>(r: &mut R) -> std::io::Result<Image> {
    let (w, h) = read_header(r, "P6")?;
    read_body(r, w, h, 3)
}

pub fn read_pgm<R: Read>(r: &mut R) -> std::io::Result<Image> {
    let (w, h) = read_header(r, "P5")?;
    read_body(r, w, h, 1)
}

/// Packs a binary mask (true = white) into a PGM image buffer.
pub fn mask_to_image(mask: &[bool], height: usize, width: usize) -> Image {
    let data = mask.iter().map(|&v| if v { 255 } else { 0 }).collect();
    Image { width, height, channels: 1, data }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let c = v * s;
    let hp = (h / 60.0) % 6.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    let q = |u: f64| ((u + m) * 255.0).round().clamp(0.0, 255.0) as u8;
    [q(r), q(g), q(b)]
}

/// Fixed class color: hue 360·c/num_classes, saturation 0.8, value 0.95.
/// Injective for up to 36 classes; the IGNORE label (255) maps to black.
pub fn class_rgb(class: u8, num_classes: usize) -> [u8; 3] {
    if class == 255 || (class as usize) >= num_classes {
        return [0, 0, 0];
    }
    hsv_to_rgb(360.0 * class as f64 / num_classes as f64, 0.8, 0.95)
}

/// Color-codes one label frame via the fixed palette.
pub fn labels_to_image(labels: &[u8], height: usize, width: usize, num_classes: usize) -> Image {
    let mut img = Image::new(width, height, 3);
    for (k, &c) in labels.iter().enumerate() {
        img.data[3 * k..3 * k + 3].copy_from_slice(&class_rgb(c, num_classes));
    }
    img
}

/// Inverts `labels_to_image` by exact palette lookup; black returns 255
/// (IGNORE), unknown colors return None.
pub fn decode_class(rgb: [u8; 3], num_classes: usize) -> Option<u8> {
    if rgb == [0, 0, 0] {
        return Some(255);
    }
    (0..num_classes as u8).find(|&c| class_rgb(c, num_classes) == rgb)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip() {
        let mut img = Image::new(3, 2, 3);
        for (k, v) in img.data.iter_mut().enumerate() {
            *v = (k * 13 % 256) as u8;
        }
        let mut buf = Vec::new();
        write_ppm(&mut buf, &img).unwrap();
        let back = read_ppm(&mut buf.as_slice()).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn pgm_round_trip() {
        let mut img = Image::new(4, 4, 1);
        img.data[5] = 255;
        let mut buf = Vec::new();
        write_pgm(&mut buf, &img).unwrap();
        let back = read_pgm(&mut buf.as_slice()).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn parser_tolerates_comments_and_whitespace() {
        let mut body = b"P5 # magic\n# a comment line\n  2\t1 \n255\n".to_vec();
        body.extend_from_slice(&[7, 9]);
        let img = read_pgm(&mut body.as_slice()).unwrap();
        assert_eq!((img.width, img.height), (2, 1));
        assert_eq!(img.data, vec![7, 9]);
    }

    #[test]
    fn parser_rejects_garbage() {
        assert!(read_pgm(&mut b"P6\n1 1\n255\nxxx".as_slice()).is_err()); // wrong magic
        assert!(read_pgm(&mut b"P5\n1 1\n65535\n".as_slice()).is_err()); // bad maxval
        assert!(read_pgm(&mut b"P5\n2 2\n255\n\x01".as_slice()).is_err()); // truncated body
    }

    #[test]
    fn palette_is_injective_and_invertible() {
        for num_classes in [2usize, 6, 19, 36] {
            let mut seen = std::collections::HashSet::new();
            for c in 0..num_classes as u8 {
                let rgb = class_rgb(c, num_classes);
                assert!(seen.insert(rgb), "palette collision at class {c}/{num_classes}");
                assert_eq!(decode_class(rgb, num_classes), Some(c));
            }
            assert_eq!(decode_class([0, 0, 0], num_classes), Some(255));
        }
    }

    #[test]
    fn label_frame_renders_and_decodes_exactly() {
        let labels = [0u8, 1, 2, 255, 3, 0];
        let img = labels_to_image(&labels, 2, 3, 4);
        assert_eq!((img.width, img.height, img.channels), (3, 2, 3));
        for (k, &c) in labels.iter().enumerate() {
            let rgb = [img.data[3 * k], img.data[3 * k + 1], img.data[3 * k + 2]];
            assert_eq!(decode_class(rgb, 4), Some(c));
        }
    }

    #[test]
    fn mask_packing() {
        let img = mask_to_image(&[true, false, false, true], 2, 2);
        assert_eq!(img.data, vec![255, 0, 0, 255]);
    }
}

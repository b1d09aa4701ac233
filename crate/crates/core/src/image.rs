//! RGB images with `f64` channels in `[0, 1]`, plus binary PPM (P6) I/O.

use std::io::{self, Read, Write};
use std::path::Path;

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    /// Row-major interleaved RGB.
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), height * width * 3, "image data length");
        Self { height, width, data }
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self { height, width, data }
    }

    /// Builds an interleaved image from three planar channels.
    pub fn from_channels(height: usize, width: usize, channels: [&[f64]; 3]) -> Self {
        let n = height * width;
        for c in &channels {
            assert_eq!(c.len(), n, "channel length");
        }
        let mut data = Vec::with_capacity(n * 3);
        for i in 0..n {
            data.extend(channels.iter().map(|c| c[i]));
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, index: usize) -> [f64; 3] {
        let p = &self.data[index * 3..index * 3 + 3];
        [p[0], p[1], p[2]]
    }

    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.data.iter().skip(c).step_by(3).copied().collect()
    }

    pub fn channels(&self) -> [Vec<f64>; 3] {
        [self.channel(0), self.channel(1), self.channel(2)]
    }

    pub fn write_ppm<W: Write>(&self, mut out: W) -> io::Result<()> {
        write!(out, "P6\n{} {}\n255\n", self.width, self.height)?;
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        out.write_all(&bytes)
    }

    /// Writes through a sibling temp file and renames it into place.
    pub fn save_ppm(&self, path: &Path) -> io::Result<()> {
        let tmp = path.with_extension("ppm.tmp");
        {
            let mut f = io::BufWriter::new(std::fs::File::create(&tmp)?);
            self.write_ppm(&mut f)?;
            f.flush()?;
        }
        std::fs::rename(tmp, path)
    }

    pub fn read_ppm<R: Read>(mut input: R) -> io::Result<Self> {
        let mut buf = Vec::new();
        input.read_to_end(&mut buf)?;
        let bad = |m: &str| io::Error::new(io::ErrorKind::InvalidData, m.to_string());
        let mut pos = 0;
        let mut header = Vec::new();
        while header.len() < 4 {
            while pos < buf.len() && (buf[pos].is_ascii_whitespace() || buf[pos] == b'#') {
                if buf[pos] == b'#' {
                    while pos < buf.len() && buf[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < buf.len() && !buf[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated PPM header"));
            }
            header.push(String::from_utf8_lossy(&buf[start..pos]).into_owned());
        }
        pos += 1;
        if header[0] != "P6" {
            return Err(bad("not a binary PPM (P6)"));
        }
        let width: usize = header[1].parse().map_err(|_| bad("bad width"))?;
        let height: usize = header[2].parse().map_err(|_| bad("bad height"))?;
        let maxval: usize = header[3].parse().map_err(|_| bad("bad max value"))?;
        if maxval != 255 {
            return Err(bad("only max value 255 is supported"));
        }
        let n = width * height * 3;
        if buf.len() < pos + n {
            return Err(bad("truncated PPM data"));
        }
        let data = buf[pos..pos + n].iter().map(|&b| b as f64 / 255.0).collect();
        Ok(Self { height, width, data })
    }

    pub fn load_ppm(path: &Path) -> io::Result<Self> {
        Self::read_ppm(std::fs::File::open(path)?)
    }
}

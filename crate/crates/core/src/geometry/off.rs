//! ASCII OFF mesh reader.
//!
//! Accepts the header fused with the counts line ("OFF 8 6 0"), skips
//! blank lines and `#` comments, fan-triangulates polygon faces, and
//! drops faces that repeat a vertex index.

use crate::error::{Error, Result};
use crate::geometry::Mesh;

struct Lines<'a> {
    inner: std::str::Lines<'a>,
    line_no: usize,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str) -> Self {
        Lines { inner: text.lines(), line_no: 0 }
    }

    /// Next line with content after stripping comments, plus its 1-based
    /// line number.
    fn next_content(&mut self) -> Option<(usize, &'a str)> {
        for raw in self.inner.by_ref() {
            self.line_no += 1;
            let stripped = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            };
            let trimmed = stripped.trim();
            if !trimmed.is_empty() {
                return Some((self.line_no, trimmed));
            }
        }
        None
    }
}

fn parse_counts(line_no: usize, s: &str) -> Result<(usize, usize)> {
    let mut it = s.split_whitespace();
    let mut next_count = |what: &str| -> Result<usize> {
        let tok = it
            .next()
            .ok_or_else(|| Error::parse(line_no, format!("missing {what} count")))?;
        tok.parse()
            .map_err(|_| Error::parse(line_no, format!("invalid {what} count {tok:?}")))
    };
    let v = next_count("vertex")?;
    let f = next_count("face")?;
    next_count("edge")?;
    Ok((v, f))
}

pub fn parse_off(text: &str) -> Result<Mesh> {
    let mut lines = Lines::new(text);
    let (header_no, header) =
        lines.next_content().ok_or_else(|| Error::parse(1, "empty file"))?;
    if header != "OFF" && !header.starts_with("OFF ") && !header.starts_with("OFF\t") {
        return Err(Error::parse(header_no, format!("expected OFF header, found {header:?}")));
    }
    let rest = header[3..].trim();
    let (n_vertices, n_faces) = if rest.is_empty() {
        let (no, counts) = lines
            .next_content()
            .ok_or_else(|| Error::parse(header_no, "missing counts line"))?;
        parse_counts(no, counts)?
    } else {
        parse_counts(header_no, rest)?
    };

    let mut vertices = Vec::with_capacity(n_vertices);
    for i in 0..n_vertices {
        let (no, line) = lines.next_content().ok_or_else(|| {
            Error::parse(header_no, format!("file ends before vertex {i} of {n_vertices}"))
        })?;
        let mut coords = [0.0f64; 3];
        let mut it = line.split_whitespace();
        for (k, c) in coords.iter_mut().enumerate() {
            let tok = it
                .next()
                .ok_or_else(|| Error::parse(no, format!("vertex needs 3 coordinates, found {k}")))?;
            *c = tok
                .parse()
                .map_err(|_| Error::parse(no, format!("invalid coordinate {tok:?}")))?;
        }
        vertices.push(coords);
    }

    let mut faces = Vec::with_capacity(n_faces);
    for i in 0..n_faces {
        let (no, line) = lines.next_content().ok_or_else(|| {
            Error::parse(header_no, format!("file ends before face {i} of {n_faces}"))
        })?;
        let mut it = line.split_whitespace();
        let k_tok = it.next().expect("content line is non-empty");
        let k: usize = k_tok
            .parse()
            .map_err(|_| Error::parse(no, format!("invalid face vertex count {k_tok:?}")))?;
        if k < 3 {
            return Err(Error::parse(no, format!("face needs at least 3 vertices, has {k}")));
        }
        let mut poly = Vec::with_capacity(k);
        for j in 0..k {
            let tok = it
                .next()
                .ok_or_else(|| Error::parse(no, format!("face lists {k} indices, found {j}")))?;
            let idx: u32 = tok
                .parse()
                .map_err(|_| Error::parse(no, format!("invalid vertex index {tok:?}")))?;
            if idx as usize >= n_vertices {
                return Err(Error::parse(
                    no,
                    format!("vertex index {idx} out of range 0..{n_vertices}"),
                ));
            }
            poly.push(idx);
        }
        for j in 1..k - 1 {
            let tri = [poly[0], poly[j], poly[j + 1]];
            if tri[0] != tri[1] && tri[1] != tri[2] && tri[0] != tri[2] {
                faces.push(tri);
            }
        }
    }

    Ok(Mesh { vertices, faces })
}

/// Serialize a mesh as ASCII OFF; `parse_off` reads it back verbatim.
pub fn write_off<W: std::io::Write>(w: &mut W, mesh: &Mesh) -> Result<()> {
    writeln!(w, "OFF")?;
    writeln!(w, "{} {} 0", mesh.vertices.len(), mesh.faces.len())?;
    for v in &mesh.vertices {
        writeln!(w, "{} {} {}", v[0], v[1], v[2])?;
    }
    for f in &mesh.faces {
        writeln!(w, "3 {} {} {}", f[0], f[1], f[2])?;
    }
    Ok(())
}

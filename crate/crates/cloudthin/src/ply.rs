//! Binary little-endian PLY reading and writing.
//!
//! The on-disk vertex layout is `double x y z`, then `float nx ny nz` when
//! normals are present, then `uchar red green blue` when colors are present.
//! The reader additionally accepts single-precision coordinates (widened to
//! f64) and skips unknown scalar properties; positions are always written
//! back as doubles.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::cloud::{PointCloud, PointId, PointRecord};
use crate::error::{Error, Result};
use crate::geom::Vec3;

#[derive(Debug, Clone, Copy, PartialEq)]
enum Scalar {
    F32,
    F64,
    U8,
    I8,
    U16,
    I16,
    U32,
    I32,
}

impl Scalar {
    fn parse(name: &str) -> Option<Scalar> {
        Some(match name {
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            "uchar" | "uint8" => Scalar::U8,
            "char" | "int8" => Scalar::I8,
            "ushort" | "uint16" => Scalar::U16,
            "short" | "int16" => Scalar::I16,
            "uint" | "uint32" => Scalar::U32,
            "int" | "int32" => Scalar::I32,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::U8 | Scalar::I8 => 1,
            Scalar::U16 | Scalar::I16 => 2,
            Scalar::F32 | Scalar::U32 | Scalar::I32 => 4,
            Scalar::F64 => 8,
        }
    }
}

/// Where a vertex property lands in a [`PointRecord`], resolved once while
/// parsing the header so the per-vertex loop never touches property names.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Channel {
    Pos(usize),
    Normal(usize),
    Color(usize),
    Skip,
}

impl Channel {
    fn for_name(name: &str) -> Channel {
        match name {
            "x" => Channel::Pos(0),
            "y" => Channel::Pos(1),
            "z" => Channel::Pos(2),
            "nx" => Channel::Normal(0),
            "ny" => Channel::Normal(1),
            "nz" => Channel::Normal(2),
            "red" => Channel::Color(0),
            "green" => Channel::Color(1),
            "blue" => Channel::Color(2),
            _ => Channel::Skip,
        }
    }
}

#[derive(Debug, Clone)]
struct Property {
    name: String,
    ty: Scalar,
    channel: Channel,
}

/// Streaming reader over the vertex element of a binary little-endian PLY.
///
/// Yields one [`PointRecord`] per vertex with ids assigned sequentially from
/// zero in storage order, which keeps memory flat regardless of file size.
pub struct PlyReader {
    reader: BufReader<File>,
    properties: Vec<Property>,
    vertex_count: u64,
    read_so_far: u64,
    has_normals: bool,
    has_colors: bool,
    path: std::path::PathBuf,
}

impl PlyReader {
    pub fn open(path: impl AsRef<Path>) -> Result<PlyReader> {
        let path = path.as_ref().to_path_buf();
        let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut reader = BufReader::new(file);

        let mut line = read_header_line(&mut reader, &path)?;
        if line.trim_end() != "ply" {
            return Err(Error::Ply("missing 'ply' magic line".into()));
        }
        line = read_header_line(&mut reader, &path)?;
        if line.split_whitespace().collect::<Vec<_>>() != ["format", "binary_little_endian", "1.0"]
        {
            return Err(Error::Ply(format!(
                "unsupported format line {:?}, only binary_little_endian 1.0 is supported",
                line.trim_end()
            )));
        }

        let mut vertex_count: Option<u64> = None;
        let mut properties = Vec::new();
        // Which element's properties we are currently collecting.
        let mut in_vertex_element = false;
        loop {
            line = read_header_line(&mut reader, &path)?;
            let tokens: Vec<&str> = line.split_whitespace().collect();
            match tokens.as_slice() {
                ["end_header"] => break,
                ["comment", ..] | ["obj_info", ..] => {}
                ["element", "vertex", n] => {
                    if vertex_count.is_some() {
                        return Err(Error::Ply("duplicate vertex element".into()));
                    }
                    vertex_count = Some(
                        n.parse()
                            .map_err(|_| Error::Ply(format!("bad vertex count {n:?}")))?,
                    );
                    in_vertex_element = true;
                }
                ["element", name, n] => {
                    // Trailing elements are tolerated only when empty; the
                    // reader stops after the vertex data.
                    let count: u64 = n
                        .parse()
                        .map_err(|_| Error::Ply(format!("bad element count {n:?}")))?;
                    if vertex_count.is_none() && count > 0 {
                        return Err(Error::Ply(format!(
                            "element {name:?} precedes the vertex element"
                        )));
                    }
                    in_vertex_element = false;
                }
                ["property", "list", ..] if in_vertex_element => {
                    return Err(Error::Ply("list properties on vertices are unsupported".into()))
                }
                ["property", ty, name] if in_vertex_element => {
                    let ty = Scalar::parse(ty)
                        .ok_or_else(|| Error::Ply(format!("unknown property type {ty:?}")))?;
                    properties.push(Property {
                        name: (*name).to_string(),
                        ty,
                        channel: Channel::for_name(name),
                    });
                }
                ["property", ..] => {}
                _ => return Err(Error::Ply(format!("unrecognized header line {:?}", line.trim_end()))),
            }
        }

        let vertex_count =
            vertex_count.ok_or_else(|| Error::Ply("no vertex element".into()))?;

        let coord_ty = |name: &str| -> Result<Scalar> {
            let p = properties
                .iter()
                .find(|p| p.name == name)
                .ok_or_else(|| Error::Ply(format!("missing coordinate property {name:?}")))?;
            match p.ty {
                Scalar::F32 | Scalar::F64 => Ok(p.ty),
                other => Err(Error::Ply(format!(
                    "coordinate {name:?} must be float or double, got {other:?}"
                ))),
            }
        };
        coord_ty("x")?;
        coord_ty("y")?;
        coord_ty("z")?;

        let float_prop = |name: &str| -> Result<bool> {
            match properties.iter().find(|p| p.name == name) {
                None => Ok(false),
                Some(p) if matches!(p.ty, Scalar::F32 | Scalar::F64) => Ok(true),
                Some(p) => Err(Error::Ply(format!(
                    "property {name:?} must be float, got {:?}",
                    p.ty
                ))),
            }
        };
        let nx = float_prop("nx")?;
        let ny = float_prop("ny")?;
        let nz = float_prop("nz")?;
        if nx != ny || ny != nz {
            return Err(Error::Ply("normals need all of nx, ny, nz".into()));
        }

        let color_prop = |name: &str| -> Result<bool> {
            match properties.iter().find(|p| p.name == name) {
                None => Ok(false),
                Some(p) if p.ty == Scalar::U8 => Ok(true),
                Some(p) => Err(Error::Ply(format!(
                    "property {name:?} must be uchar, got {:?}",
                    p.ty
                ))),
            }
        };
        let red = color_prop("red")?;
        let green = color_prop("green")?;
        let blue = color_prop("blue")?;
        if red != green || green != blue {
            return Err(Error::Ply("colors need all of red, green, blue".into()));
        }

        Ok(PlyReader {
            reader,
            properties,
            vertex_count,
            read_so_far: 0,
            has_normals: nx,
            has_colors: red,
            path,
        })
    }

    pub fn vertex_count(&self) -> u64 {
        self.vertex_count
    }

    pub fn has_normals(&self) -> bool {
        self.has_normals
    }

    pub fn has_colors(&self) -> bool {
        self.has_colors
    }

    /// Reads every remaining vertex into memory.
    pub fn read_all(self) -> Result<PointCloud> {
        let mut points = Vec::with_capacity(self.vertex_count as usize);
        for rec in self {
            points.push(rec?);
        }
        PointCloud::from_records(points)
    }

    fn read_record(&mut self) -> Result<PointRecord> {
        let id = PointId(self.read_so_far);
        let mut pos = Vec3::ZERO;
        let mut normal = [0f32; 3];
        let mut color = [0u8; 3];
        let io_err = |e: std::io::Error, path: &Path| Error::io(path, e);
        for i in 0..self.properties.len() {
            let (ty, channel) = {
                let p = &self.properties[i];
                (p.ty, p.channel)
            };
            let r = &mut self.reader;
            if channel == Channel::Skip {
                let mut scratch = [0u8; 8];
                r.read_exact(&mut scratch[..ty.size()])
                    .map_err(|e| io_err(e, &self.path))?;
                continue;
            }
            let value: f64 = match ty {
                Scalar::F32 => r.read_f32::<LittleEndian>().map_err(|e| io_err(e, &self.path))? as f64,
                Scalar::F64 => r.read_f64::<LittleEndian>().map_err(|e| io_err(e, &self.path))?,
                Scalar::U8 => r.read_u8().map_err(|e| io_err(e, &self.path))? as f64,
                Scalar::I8 => r.read_i8().map_err(|e| io_err(e, &self.path))? as f64,
                Scalar::U16 => r.read_u16::<LittleEndian>().map_err(|e| io_err(e, &self.path))? as f64,
                Scalar::I16 => r.read_i16::<LittleEndian>().map_err(|e| io_err(e, &self.path))? as f64,
                Scalar::U32 => r.read_u32::<LittleEndian>().map_err(|e| io_err(e, &self.path))? as f64,
                Scalar::I32 => r.read_i32::<LittleEndian>().map_err(|e| io_err(e, &self.path))? as f64,
            };
            match channel {
                Channel::Pos(0) => pos.x = value,
                Channel::Pos(1) => pos.y = value,
                Channel::Pos(_) => pos.z = value,
                Channel::Normal(axis) => normal[axis] = value as f32,
                Channel::Color(c) => color[c] = value as u8,
                Channel::Skip => unreachable!("skip handled above"),
            }
        }
        self.read_so_far += 1;
        Ok(PointRecord {
            id,
            position: pos,
            normal: self.has_normals.then_some(normal),
            color: self.has_colors.then_some(color),
        })
    }
}

impl Iterator for PlyReader {
    type Item = Result<PointRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.read_so_far >= self.vertex_count {
            return None;
        }
        Some(self.read_record())
    }
}

fn read_header_line(reader: &mut BufReader<File>, path: &Path) -> Result<String> {
    let mut line = String::new();
    loop {
        let mut byte = [0u8; 1];
        match reader.read_exact(&mut byte) {
            Ok(()) => {}
            Err(e) => return Err(Error::io(path, e)),
        }
        if byte[0] == b'\n' {
            return Ok(line);
        }
        if line.len() > 4096 {
            return Err(Error::Ply("header line too long".into()));
        }
        line.push(byte[0] as char);
    }
}

/// Loads a whole PLY file into memory.
pub fn read_ply(path: impl AsRef<Path>) -> Result<PointCloud> {
    PlyReader::open(path)?.read_all()
}

/// Incremental binary PLY writer: declares the vertex count up front, then
/// takes records one at a time, so store-sized clouds can stream to disk
/// without ever being resident in memory.
///
/// The declared count is a contract — appending past it fails, and
/// [`finish`](PlyStreamWriter::finish) fails if fewer records arrived.
pub struct PlyStreamWriter {
    w: BufWriter<File>,
    path: std::path::PathBuf,
    declared: u64,
    written: u64,
    normals: bool,
    colors: bool,
}

impl PlyStreamWriter {
    /// Creates the file and writes the header for `count` vertices with the
    /// given optional attribute blocks.
    pub fn create(
        path: impl AsRef<Path>,
        count: u64,
        normals: bool,
        colors: bool,
    ) -> Result<PlyStreamWriter> {
        let path = path.as_ref().to_path_buf();
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(header_text(count, normals, colors, None).as_bytes())
            .map_err(|e| Error::io(&path, e))?;
        Ok(PlyStreamWriter { w, path, declared: count, written: 0, normals, colors })
    }

    /// Appends one vertex. The record must carry exactly the attribute
    /// blocks declared at creation.
    pub fn append(&mut self, p: &PointRecord) -> Result<()> {
        if self.written == self.declared {
            return Err(Error::Internal(format!(
                "PLY stream to {:?} declared {} vertices but received more",
                self.path, self.declared
            )));
        }
        let io_err = |e: std::io::Error| Error::io(&self.path, e);
        self.w.write_f64::<LittleEndian>(p.position.x).map_err(io_err)?;
        self.w.write_f64::<LittleEndian>(p.position.y).map_err(io_err)?;
        self.w.write_f64::<LittleEndian>(p.position.z).map_err(io_err)?;
        if self.normals {
            let n = p.normal.ok_or_else(|| {
                Error::Internal(format!("point {} lacks the declared normal block", p.id))
            })?;
            for c in n {
                self.w.write_f32::<LittleEndian>(c).map_err(io_err)?;
            }
        }
        if self.colors {
            let c = p.color.ok_or_else(|| {
                Error::Internal(format!("point {} lacks the declared color block", p.id))
            })?;
            self.w.write_all(&c).map_err(io_err)?;
        }
        self.written += 1;
        Ok(())
    }

    /// Flushes and validates that exactly the declared number of vertices
    /// were written.
    pub fn finish(mut self) -> Result<()> {
        self.w.flush().map_err(|e| Error::io(&self.path, e))?;
        if self.written != self.declared {
            return Err(Error::Internal(format!(
                "PLY stream to {:?} declared {} vertices but received {}",
                self.path, self.declared, self.written
            )));
        }
        Ok(())
    }
}

fn header_text(count: u64, normals: bool, colors: bool, extra: Option<&str>) -> String {
    let mut header = String::new();
    header.push_str("ply\nformat binary_little_endian 1.0\n");
    header.push_str(&format!("element vertex {count}\n"));
    header.push_str("property double x\nproperty double y\nproperty double z\n");
    if normals {
        header.push_str("property float nx\nproperty float ny\nproperty float nz\n");
    }
    if colors {
        header.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    }
    if let Some(name) = extra {
        header.push_str(&format!("property float {name}\n"));
    }
    header.push_str("end_header\n");
    header
}

/// Writes the cloud as binary little-endian PLY. Positions are emitted as
/// doubles; normals (float) and colors (uchar) are emitted when every point
/// carries them.
pub fn write_ply(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    write_ply_impl(path.as_ref(), cloud, None)
}

/// Like [`write_ply`] but appends one extra float property per vertex, e.g.
/// a per-point density channel. `values` must be parallel to the cloud.
pub fn write_ply_with_scalar(
    path: impl AsRef<Path>,
    cloud: &PointCloud,
    name: &str,
    values: &[f32],
) -> Result<()> {
    if values.len() != cloud.len() {
        return Err(Error::Config(format!(
            "scalar channel {name:?} has {} values for {} points",
            values.len(),
            cloud.len()
        )));
    }
    write_ply_impl(path.as_ref(), cloud, Some((name, values)))
}

fn write_ply_impl(path: &Path, cloud: &PointCloud, extra: Option<(&str, &[f32])>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let has_normals = cloud.has_normals();
    let has_colors = cloud.has_colors();

    let io_err = |e: std::io::Error| Error::io(path, e);
    let header = header_text(cloud.len() as u64, has_normals, has_colors, extra.map(|(n, _)| n));
    w.write_all(header.as_bytes()).map_err(io_err)?;

    for (i, p) in cloud.points().iter().enumerate() {
        w.write_f64::<LittleEndian>(p.position.x).map_err(io_err)?;
        w.write_f64::<LittleEndian>(p.position.y).map_err(io_err)?;
        w.write_f64::<LittleEndian>(p.position.z).map_err(io_err)?;
        if has_normals {
            let n = p.normal.unwrap();
            for c in n {
                w.write_f32::<LittleEndian>(c).map_err(io_err)?;
            }
        }
        if has_colors {
            let c = p.color.unwrap();
            w.write_all(&c).map_err(io_err)?;
        }
        if let Some((_, values)) = extra {
            w.write_f32::<LittleEndian>(values[i]).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_cloud(normals: bool, colors: bool) -> PointCloud {
        let mut points = Vec::new();
        for i in 0..5u64 {
            points.push(PointRecord {
                id: PointId(i),
                position: Vec3::new(i as f64 * 0.5, -(i as f64), 0.25 + i as f64),
                normal: normals.then_some([0.0, 0.0, 1.0]),
                color: colors.then_some([i as u8 * 10, 100, 200]),
            });
        }
        PointCloud::from_records(points).unwrap()
    }

    #[test]
    fn roundtrip_bare() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ply");
        let cloud = sample_cloud(false, false);
        write_ply(&path, &cloud).unwrap();
        let back = read_ply(&path).unwrap();
        assert_eq!(cloud, back);
    }

    #[test]
    fn roundtrip_attributes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ply");
        let cloud = sample_cloud(true, true);
        write_ply(&path, &cloud).unwrap();
        let reader = PlyReader::open(&path).unwrap();
        assert!(reader.has_normals());
        assert!(reader.has_colors());
        assert_eq!(reader.vertex_count(), 5);
        let back = reader.read_all().unwrap();
        assert_eq!(cloud, back);
    }

    #[test]
    fn float_coordinates_widen() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.ply");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(
            b"ply\nformat binary_little_endian 1.0\nelement vertex 2\n\
              property float x\nproperty float y\nproperty float z\nend_header\n",
        );
        for v in [[1.0f32, 2.0, 3.0], [-0.5, 0.0, 4.5]] {
            for c in v {
                bytes.extend_from_slice(&c.to_le_bytes());
            }
        }
        std::fs::write(&path, bytes).unwrap();
        let cloud = read_ply(&path).unwrap();
        assert_eq!(cloud.len(), 2);
        assert_eq!(cloud.points()[0].position, Vec3::new(1.0, 2.0, 3.0));
        assert_eq!(cloud.points()[1].position, Vec3::new(-0.5, 0.0, 4.5));
    }

    #[test]
    fn unknown_scalar_properties_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("extra.ply");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(
            b"ply\nformat binary_little_endian 1.0\nelement vertex 1\n\
              property double x\nproperty double y\nproperty double z\n\
              property ushort intensity\nend_header\n",
        );
        for c in [7.0f64, 8.0, 9.0] {
            bytes.extend_from_slice(&c.to_le_bytes());
        }
        bytes.extend_from_slice(&123u16.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        let cloud = read_ply(&path).unwrap();
        assert_eq!(cloud.points()[0].position, Vec3::new(7.0, 8.0, 9.0));
    }

    #[test]
    fn rejects_ascii_and_missing_coords() {
        let dir = tempfile::tempdir().unwrap();
        let ascii = dir.path().join("a.ply");
        std::fs::write(
            &ascii,
            b"ply\nformat ascii 1.0\nelement vertex 0\nproperty double x\nend_header\n",
        )
        .unwrap();
        assert!(matches!(PlyReader::open(&ascii), Err(Error::Ply(_))));

        let missing = dir.path().join("m.ply");
        std::fs::write(
            &missing,
            b"ply\nformat binary_little_endian 1.0\nelement vertex 0\n\
              property double x\nproperty double y\nend_header\n",
        )
        .unwrap();
        assert!(matches!(PlyReader::open(&missing), Err(Error::Ply(_))));
    }

    #[test]
    fn scalar_channel_roundtrips_through_reader_skip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.ply");
        let cloud = sample_cloud(false, false);
        let density: Vec<f32> = (0..cloud.len()).map(|i| i as f32 * 1.5).collect();
        write_ply_with_scalar(&path, &cloud, "density", &density).unwrap();
        // Header advertises the channel...
        let text = std::fs::read(&path).unwrap();
        let head_end = text.windows(11).position(|w| w == b"end_header\n").unwrap();
        let head = std::str::from_utf8(&text[..head_end]).unwrap();
        assert!(head.contains("property float density"));
        // ...and the positions still read back exactly.
        let back = read_ply(&path).unwrap();
        assert_eq!(cloud, back);
    }

    #[test]
    fn stream_writer_matches_the_batch_writer_byte_for_byte() {
        let dir = tempfile::tempdir().unwrap();
        for (normals, colors) in [(false, false), (true, true)] {
            let cloud = sample_cloud(normals, colors);
            let batch = dir.path().join("batch.ply");
            let streamed = dir.path().join("streamed.ply");
            write_ply(&batch, &cloud).unwrap();
            let mut w =
                PlyStreamWriter::create(&streamed, cloud.len() as u64, normals, colors).unwrap();
            for p in cloud.points() {
                w.append(p).unwrap();
            }
            w.finish().unwrap();
            assert_eq!(std::fs::read(&batch).unwrap(), std::fs::read(&streamed).unwrap());
        }
    }

    #[test]
    fn stream_writer_enforces_its_declared_contract() {
        let dir = tempfile::tempdir().unwrap();
        let cloud = sample_cloud(false, false);

        // Too few records.
        let short = dir.path().join("short.ply");
        let mut w = PlyStreamWriter::create(&short, 10, false, false).unwrap();
        w.append(&cloud.points()[0]).unwrap();
        assert!(matches!(w.finish(), Err(Error::Internal(_))));

        // Too many records.
        let over = dir.path().join("over.ply");
        let mut w = PlyStreamWriter::create(&over, 1, false, false).unwrap();
        w.append(&cloud.points()[0]).unwrap();
        assert!(matches!(w.append(&cloud.points()[1]), Err(Error::Internal(_))));

        // Declared attributes must actually be present.
        let missing = dir.path().join("missing.ply");
        let mut w = PlyStreamWriter::create(&missing, 1, true, false).unwrap();
        assert!(matches!(w.append(&cloud.points()[0]), Err(Error::Internal(_))));
    }
}

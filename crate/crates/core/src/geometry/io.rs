//! Point cloud files: ASCII PLY and the little-endian `EPC1` binary layout
//! (`"EPC1"`, u32 point count, u32 channel mask, then f32 values per point:
//! xyz, then normals if bit 0 is set, then colors if bit 1 is set).

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::cloud::PointCloud;

const MAGIC: &[u8; 4] = b"EPC1";
const NORMALS: u32 = 1;
const COLORS: u32 = 2;

/// Writes through a temporary sibling file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn encode_epc(cloud: &PointCloud) -> Vec<u8> {
    let mut mask = 0;
    if cloud.normals().is_some() {
        mask |= NORMALS;
    }
    if cloud.colors().is_some() {
        mask |= COLORS;
    }
    let mut out = Vec::with_capacity(12 + cloud.len() * 36);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(cloud.len() as u32).to_le_bytes());
    out.extend_from_slice(&mask.to_le_bytes());
    for i in 0..cloud.len() {
        let mut put = |row: &[f64]| {
            for v in row {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        };
        put(cloud.coords().row(i));
        if let Some(n) = cloud.normals() {
            put(n.row(i));
        }
        if let Some(c) = cloud.colors() {
            put(c.row(i));
        }
    }
    out
}

pub fn decode_epc(bytes: &[u8]) -> Result<PointCloud> {
    let bad = |reason: &str| Error::Format { format: "EPC1", reason: reason.to_string() };
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(bad("missing magic header"));
    }
    let word = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let n = word(4) as usize;
    let mask = word(8);
    if mask & !(NORMALS | COLORS) != 0 {
        return Err(bad("unknown channel bits"));
    }
    let groups = 1 + (mask & NORMALS != 0) as usize + (mask & COLORS != 0) as usize;
    let stride = groups * 3;
    if bytes.len() != 12 + n * stride * 4 {
        return Err(bad("payload length does not match header"));
    }
    let value = |i: usize, k: usize| {
        let o = 12 + (i * stride + k) * 4;
        f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as f64
    };
    let channel = |g: usize| Tensor::from_fn(n, 3, |i, c| value(i, g * 3 + c));
    let mut cloud = PointCloud::new(channel(0))?;
    let mut g = 1;
    if mask & NORMALS != 0 {
        // f32 storage loses the unit-norm tolerance; renormalize on load
        let mut nt = channel(g);
        for i in 0..n {
            let r = nt.row_mut(i);
            let len = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if len > 0.0 {
                r.iter_mut().for_each(|v| *v /= len);
            }
        }
        cloud = cloud.with_normals(nt)?;
        g += 1;
    }
    if mask & COLORS != 0 {
        cloud = cloud.with_colors(channel(g))?;
    }
    Ok(cloud)
}

pub fn write_epc(path: &Path, cloud: &PointCloud) -> Result<()> {
    write_atomic(path, &encode_epc(cloud))
}

pub fn read_epc(path: &Path) -> Result<PointCloud> {
    decode_epc(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn encode_ply(cloud: &PointCloud) -> String {
    let mut s = String::new();
    s.push_str("ply\nformat ascii 1.0\n");
    s.push_str(&format!("element vertex {}\n", cloud.len()));
    s.push_str("property double x\nproperty double y\nproperty double z\n");
    if cloud.normals().is_some() {
        s.push_str("property double nx\nproperty double ny\nproperty double nz\n");
    }
    if cloud.colors().is_some() {
        s.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    }
    s.push_str("end_header\n");
    for i in 0..cloud.len() {
        let mut fields: Vec<String> = cloud.coords().row(i).iter().map(|v| format!("{v:?}")).collect();
        if let Some(n) = cloud.normals() {
            fields.extend(n.row(i).iter().map(|v| format!("{v:?}")));
        }
        if let Some(c) = cloud.colors() {
            fields.extend(c.row(i).iter().map(|v| format!("{}", (v * 255.0).round() as u8)));
        }
        s.push_str(&fields.join(" "));
        s.push('\n');
    }
    s
}

pub fn decode_ply(text: &str) -> Result<PointCloud> {
    let bad = |reason: String| Error::Format { format: "PLY", reason };
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err(bad("missing ply magic".into()));
    }
    let mut count = None;
    let mut props: Vec<String> = Vec::new();
    for line in lines.by_ref() {
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts.as_slice() {
            ["format", "ascii", _] => {}
            ["format", other, ..] => return Err(bad(format!("unsupported format {other}"))),
            ["element", "vertex", n] => count = Some(n.parse::<usize>().map_err(|e| bad(e.to_string()))?),
            ["element", ..] => return Err(bad("only vertex elements are supported".into())),
            ["property", _, name] => props.push(name.to_string()),
            ["comment", ..] | [] => {}
            ["end_header"] => break,
            _ => return Err(bad(format!("unexpected header line {line:?}"))),
        }
    }
    let n = count.ok_or_else(|| bad("no vertex element".into()))?;
    let col = |name: &str| props.iter().position(|p| p == name);
    let xyz = ["x", "y", "z"].map(col);
    let nrm = ["nx", "ny", "nz"].map(col);
    let rgb = ["red", "green", "blue"].map(col);
    if xyz.iter().any(Option::is_none) {
        return Err(bad("x, y, z properties are required".into()));
    }
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    for line in lines.take(n) {
        let vals: std::result::Result<Vec<f64>, _> = line.split_whitespace().map(str::parse::<f64>).collect();
        let vals = vals.map_err(|e| bad(e.to_string()))?;
        if vals.len() != props.len() {
            return Err(bad(format!("vertex line has {} values, expected {}", vals.len(), props.len())));
        }
        rows.push(vals);
    }
    if rows.len() != n {
        return Err(bad(format!("expected {n} vertices, found {}", rows.len())));
    }
    let take = |idx: [Option<usize>; 3], k: f64| Tensor::from_fn(n, 3, |i, c| rows[i][idx[c].unwrap()] * k);
    let mut cloud = PointCloud::new(take(xyz, 1.0))?;
    if nrm.iter().all(Option::is_some) {
        cloud = cloud.with_normals(take(nrm, 1.0))?;
    }
    if rgb.iter().all(Option::is_some) {
        cloud = cloud.with_colors(take(rgb, 1.0 / 255.0))?;
    }
    Ok(cloud)
}

pub fn write_ply(path: &Path, cloud: &PointCloud) -> Result<()> {
    write_atomic(path, encode_ply(cloud).as_bytes())
}

pub fn read_ply(path: &Path) -> Result<PointCloud> {
    decode_ply(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> PointCloud {
        PointCloud::new(Tensor::from_rows(&[[0.5, -1.25, 2.0], [3.0, 0.0, -0.125]]).unwrap())
            .unwrap()
            .with_normals(Tensor::from_rows(&[[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]]).unwrap())
            .unwrap()
            .with_colors(Tensor::from_rows(&[[1.0, 0.0, 0.2], [0.0, 1.0, 0.6]]).unwrap())
            .unwrap()
    }

    #[test]
    fn epc_round_trip() {
        let c = sample();
        let bytes = encode_epc(&c);
        assert_eq!(&bytes[..4], b"EPC1");
        assert_eq!(bytes.len(), 12 + 2 * 9 * 4);
        let back = decode_epc(&bytes).unwrap();
        assert_eq!(back.coords(), c.coords());
        assert_eq!(back.normals(), c.normals());
        assert!(decode_epc(&bytes[..20]).is_err());
        assert!(decode_epc(b"XXXX00000000").is_err());
    }

    #[test]
    fn ply_round_trip() {
        let c = sample();
        let back = decode_ply(&encode_ply(&c)).unwrap();
        assert_eq!(back.coords(), c.coords());
        assert_eq!(back.normals(), c.normals());
        let col = back.colors().unwrap();
        assert!((col.get(0, 2) - 51.0 / 255.0).abs() < 1e-12);
        assert!(decode_ply("ply\nformat binary_little_endian 1.0\nend_header\n").is_err());
    }

    #[test]
    fn atomic_write_leaves_no_temp_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.epc");
        write_epc(&p, &sample()).unwrap();
        let names: Vec<_> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(names.len(), 1);
        assert_eq!(read_epc(&p).unwrap().len(), 2);
    }
}

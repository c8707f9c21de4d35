//! File formats: field checkpoints, PPM images, float maps and CSV tables.
//!
//! Checkpoints are little-endian: the 8-byte magic `SURFREG\0`, a `u32` version, the
//! bounds as six `f64`, density and colour grid dims as `u32` triples, feature and
//! hidden counts as `u32`, the parameter count as `u64`, then the parameters as `f64`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::field::{Aabb, FieldLayout, FieldParams, GridDims};
use crate::metrics::ViewMetrics;
use crate::regularizers::{LossBreakdown, RegBatch};
use crate::scene::{Camera, GroundTruthView};
use crate::sphere::SampleSphere;
use crate::train::StepReport;
use crate::{Error, Result, Vec3};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SURFREG\0";
pub const CHECKPOINT_VERSION: u32 = 1;

pub const CAMERAS_HEADER: &str = "view_id,pos_x,pos_y,pos_z,look_x,look_y,look_z,up_x,up_y,up_z,fov_deg";
pub const SAMPLES_HEADER: &str = "i,dir_x,dir_y,dir_z,radius,ball_x,ball_y,ball_z";
pub const METRICS_HEADER: &str = "view_id,psnr_db,normal_mae_deg,disparity_rmse";
pub const TRAIN_LOG_HEADER: &str = "iter,photometric,L_d,L_n,L_b,L_s,is_reg_step";
pub const LOSSES_HEADER: &str = "ray_id,L_d,L_n,L_b,L_s,w_star";

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Writes `bytes`, creating parent directories.
pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_bytes(path, text.as_bytes())
}

pub fn encode_checkpoint(params: &FieldParams) -> Vec<u8> {
    let l = &params.layout;
    let mut out = Vec::with_capacity(128 + 8 * params.values.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for v in l.bounds.min.iter().chain(l.bounds.max.iter()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for d in [l.density_dims, l.color_dims] {
        for n in [d.nx, d.ny, d.nz] {
            out.extend_from_slice(&(n as u32).to_le_bytes());
        }
    }
    out.extend_from_slice(&(l.n_features as u32).to_le_bytes());
    out.extend_from_slice(&(l.hidden as u32).to_le_bytes());
    out.extend_from_slice(&(params.values.len() as u64).to_le_bytes());
    for v in &params.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }
    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }
    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
    fn f64(&mut self) -> Option<f64> {
        Some(f64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<FieldParams> {
    let bad = |r: &str| format_err(path, r);
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8) != Some(&CHECKPOINT_MAGIC[..]) {
        return Err(bad("not a field checkpoint"));
    }
    let version = r.u32().ok_or_else(|| bad("truncated header"))?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported checkpoint version {version}")));
    }
    let mut b = [0.0; 6];
    for v in &mut b {
        *v = r.f64().ok_or_else(|| bad("truncated header"))?;
    }
    let mut d = [0usize; 8];
    for v in &mut d {
        *v = r.u32().ok_or_else(|| bad("truncated header"))? as usize;
    }
    let count = r.u64().ok_or_else(|| bad("truncated header"))? as usize;
    let bounds = Aabb::new(Vec3::new(b[0], b[1], b[2]), Vec3::new(b[3], b[4], b[5]))
        .map_err(|e| bad(&e.to_string()))?;
    let layout = FieldLayout::with_dims(
        bounds,
        GridDims { nx: d[0], ny: d[1], nz: d[2] },
        GridDims { nx: d[3], ny: d[4], nz: d[5] },
        d[6],
        d[7],
    )
    .map_err(|e| bad(&e.to_string()))?;
    if count != layout.len() {
        return Err(bad(&format!("header declares {count} parameters, layout needs {}", layout.len())));
    }
    if bytes.len() - r.pos != 8 * count {
        return Err(bad("parameter payload length does not match header"));
    }
    let values = (0..count).map(|_| r.f64().expect("length checked")).collect();
    FieldParams::from_values(layout, values)
}

pub fn save_checkpoint(path: &Path, params: &FieldParams) -> Result<()> {
    write_bytes(path, &encode_checkpoint(params))
}

pub fn load_checkpoint(path: &Path) -> Result<FieldParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_ppm(width: usize, height: usize, pixels: &[Vec3]) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    for p in pixels {
        out.extend_from_slice(&[to_byte(p.x), to_byte(p.y), to_byte(p.z)]);
    }
    out
}

pub fn write_ppm(path: &Path, width: usize, height: usize, pixels: &[Vec3]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::DimensionMismatch(format!(
            "{} pixels for a {width}x{height} image",
            pixels.len()
        )));
    }
    write_bytes(path, &encode_ppm(width, height, pixels))
}

/// Reads a binary 8-bit PPM into colours in `[0, 1]`.
pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<Vec3>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(format_err(path, "truncated PPM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P6" || fields[3] != "255" {
        return Err(format_err(path, "only 8-bit P6 images are supported"));
    }
    let w: usize = fields[1].parse().map_err(|_| format_err(path, "bad width"))?;
    let h: usize = fields[2].parse().map_err(|_| format_err(path, "bad height"))?;
    let data = bytes.get(pos..).unwrap_or_default();
    if data.len() != 3 * w * h {
        return Err(format_err(path, "pixel payload length does not match header"));
    }
    let px = data
        .chunks_exact(3)
        .map(|c| Vec3::new(c[0] as f64, c[1] as f64, c[2] as f64) / 255.0)
        .collect();
    Ok((w, h, px))
}

/// Headerless little-endian `f32` values.
pub fn write_f32_map(path: &Path, values: &[f64]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().flat_map(|v| (*v as f32).to_le_bytes()).collect();
    write_bytes(path, &bytes)
}

/// Interleaved xyz `f32` triples.
pub fn write_f32_vec3_map(path: &Path, values: &[Vec3]) -> Result<()> {
    let bytes: Vec<u8> = values
        .iter()
        .flat_map(|v| v.iter().flat_map(|c| (*c as f32).to_le_bytes()).collect::<Vec<_>>())
        .collect();
    write_bytes(path, &bytes)
}

pub fn read_f32_map(path: &Path) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(format_err(path, "length is not a multiple of 4"));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn cameras_csv(cameras: &[Camera]) -> String {
    let mut out = format!("{CAMERAS_HEADER}\n");
    for (i, c) in cameras.iter().enumerate() {
        let _ = writeln!(
            out,
            "{i},{},{},{},{},{},{},{},{},{},{}",
            c.position.x, c.position.y, c.position.z, c.look_at.x, c.look_at.y, c.look_at.z,
            c.up.x, c.up.y, c.up.z, c.fov_deg
        );
    }
    out
}

/// Parses a camera CSV; image size is not part of the file.
pub fn parse_cameras_csv(text: &str, width: usize, height: usize, path: &Path) -> Result<Vec<Camera>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    match lines.next() {
        Some(h) if h.trim() == CAMERAS_HEADER => {}
        _ => return Err(format_err(path, format!("expected header '{CAMERAS_HEADER}'"))),
    }
    lines
        .enumerate()
        .map(|(row, line)| {
            let v: Vec<f64> = line
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| format_err(path, format!("row {}: not numeric", row + 1)))?;
            if v.len() != 11 {
                return Err(format_err(path, format!("row {}: expected 11 columns", row + 1)));
            }
            Camera::new(
                Vec3::new(v[1], v[2], v[3]),
                Vec3::new(v[4], v[5], v[6]),
                Vec3::new(v[7], v[8], v[9]),
                v[10],
                width,
                height,
            )
        })
        .collect()
}

pub fn read_cameras_csv(path: &Path, width: usize, height: usize) -> Result<Vec<Camera>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_cameras_csv(&text, width, height, path)
}

pub fn samples_csv(sphere: &SampleSphere) -> String {
    let mut out = format!("{SAMPLES_HEADER}\n");
    for (i, (d, p)) in sphere.directions.iter().zip(sphere.ball_points()).enumerate() {
        let _ = writeln!(
            out,
            "{i},{},{},{},{},{},{},{}",
            d.x, d.y, d.z, sphere.radii[i], p.x, p.y, p.z
        );
    }
    out
}

pub fn metrics_csv(rows: &[(String, ViewMetrics)]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for (id, m) in rows {
        let _ = writeln!(out, "{id},{},{},{}", m.psnr_db, m.normal_mae_deg, m.disparity_rmse);
    }
    out
}

pub fn train_log_row(r: &StepReport) -> String {
    format!(
        "{},{},{},{},{},{},{}",
        r.iteration,
        r.photometric,
        r.losses.l_d,
        r.losses.l_n,
        r.losses.l_b,
        r.losses.l_s,
        r.is_reg_step as u8
    )
}

pub fn train_log_csv(reports: &[StepReport]) -> String {
    let mut out = format!("{TRAIN_LOG_HEADER}\n");
    for r in reports {
        out.push_str(&train_log_row(r));
        out.push('\n');
    }
    out
}

pub fn losses_row(ray_id: usize, l: &LossBreakdown, w_star: Option<f64>) -> String {
    format!(
        "{ray_id},{},{},{},{},{}",
        l.l_d,
        l.l_n,
        l.l_b,
        l.l_s,
        w_star.map_or_else(|| "nan".to_string(), |w| w.to_string())
    )
}

/// Long-format dump of one ray's regularisation batch.
pub fn reg_batch_rows(ray_id: usize, batch: &RegBatch, out: &mut String) {
    let v = |x: &Vec3| format!("{},{},{}", x.x, x.y, x.z);
    for (j, x) in batch.spatial_points.iter().enumerate() {
        let _ = writeln!(
            out,
            "{ray_id},spatial,{j},{},{},{},{}",
            v(x),
            v(&batch.spatial_dirs[j]),
            batch.spatial_tau[j],
            v(&batch.spatial_normals[j])
        );
    }
    for (j, d) in batch.directional_dirs.iter().enumerate() {
        let _ = writeln!(
            out,
            "{ray_id},directional,{j},{},{},nan,{}",
            v(&batch.directional_point),
            v(d),
            v(&batch.directional_cs[j])
        );
    }
}

pub const REG_BATCH_HEADER: &str =
    "ray_id,kind,j,x,y,z,dir_x,dir_y,dir_z,tau,v_x,v_y,v_z";

/// Writes a ground-truth dataset: per-view PPM, depth and normal maps, plus cameras.csv.
pub fn write_dataset(dir: &Path, cameras: &[Camera], views: &[GroundTruthView]) -> Result<()> {
    write_text(&dir.join("cameras.csv"), &cameras_csv(cameras))?;
    for (i, v) in views.iter().enumerate() {
        write_ppm(&dir.join(format!("view_{i:03}.ppm")), v.width, v.height, &v.color)?;
        write_f32_map(&dir.join(format!("depth_{i:03}.f32")), &v.depth)?;
        write_f32_vec3_map(&dir.join(format!("normal_{i:03}.f32")), &v.normal)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::FieldInit;

    fn small_field() -> FieldParams {
        let layout = FieldLayout::new(Aabb::cube(1.0), 4, 3, 2, 3).unwrap();
        FieldParams::new(layout, &FieldInit { seed: 9, ..FieldInit::default() })
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let p = small_field();
        let bytes = encode_checkpoint(&p);
        let back = decode_checkpoint(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back.layout, p.layout);
        assert!(back.values.iter().zip(&p.values).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(encode_checkpoint(&back), bytes);
    }

    #[test]
    fn corrupt_checkpoints_rejected() {
        let bytes = encode_checkpoint(&small_field());
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1], Path::new("m")).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad, Path::new("m")).is_err());
        assert!(decode_checkpoint(&bytes[..20], Path::new("m")).is_err());
    }

    #[test]
    fn ppm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ppm");
        let px: Vec<Vec3> = (0..6).map(|i| Vec3::new(i as f64 / 5.0, 1.0, 0.0)).collect();
        write_ppm(&path, 3, 2, &px).unwrap();
        let (w, h, back) = read_ppm(&path).unwrap();
        assert_eq!((w, h), (3, 2));
        for (a, b) in px.iter().zip(&back) {
            assert!((a - b).amax() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn cameras_round_trip() {
        let cams = crate::scene::orbit_cameras(3, Vec3::zeros(), 2.0, (30.0, 60.0), 45.0, 8).unwrap();
        let text = cameras_csv(&cams);
        let back = parse_cameras_csv(&text, 8, 8, Path::new("c")).unwrap();
        assert_eq!(back, cams);
        assert!(parse_cameras_csv("x,y\n", 8, 8, Path::new("c")).is_err());
    }

    #[test]
    fn float_map_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("n.f32");
        write_f32_vec3_map(&path, &[Vec3::new(1.0, 2.0, 3.0), Vec3::new(4.0, 5.0, 6.0)]).unwrap();
        assert_eq!(read_f32_map(&path).unwrap(), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }
}

//! Latent CSV: header `label,frame,cz,cy,cx,z0..z{d-1}`, one row per patch,
//! floats with 9 significant digits.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::volume_data::Patch;

#[derive(Debug, Clone, PartialEq)]
pub struct LatentRow {
    pub label: u32,
    pub frame: usize,
    pub center: [i32; 3],
    pub z: Vec<f32>,
}

pub fn write_latents_csv(path: impl AsRef<Path>, patches: &[Patch], latents: &[Vec<f32>]) -> Result<()> {
    let path = path.as_ref();
    if patches.len() != latents.len() {
        return Err(Error::Contract(format!(
            "{} patches but {} latent vectors",
            patches.len(),
            latents.len()
        )));
    }
    let d = latents.first().map_or(0, Vec::len);
    let mut out = String::from("label,frame,cz,cy,cx");
    for k in 0..d {
        write!(out, ",z{k}").unwrap();
    }
    out.push('\n');
    for (p, z) in patches.iter().zip(latents) {
        if z.len() != d {
            return Err(Error::Contract("latent vectors differ in length".into()));
        }
        write!(
            out,
            "{},{},{},{},{}",
            p.label, p.frame_index, p.center[0], p.center[1], p.center[2]
        )
        .unwrap();
        for v in z {
            write!(out, ",{v:.8e}").unwrap();
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_latents_csv(path: impl AsRef<Path>) -> Result<Vec<LatentRow>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::format(0, "empty latent CSV"))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 6 || cols[..5] != ["label", "frame", "cz", "cy", "cx"] {
        return Err(Error::format(
            0,
            "latent CSV header must start with label,frame,cz,cy,cx,z0",
        ));
    }
    let d = cols.len() - 5;
    if cols[5..].iter().enumerate().any(|(k, c)| *c != format!("z{k}")) {
        return Err(Error::format(0, "latent columns must be named z0..zN"));
    }
    let mut offset = header.len() as u64 + 1;
    let mut rows = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            offset += line.len() as u64 + 1;
            continue;
        }
        let bad = |what: &str| Error::format(offset, format!("{what} in row {:?}", truncate(line)));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != d + 5 {
            return Err(bad(&format!("expected {} fields, found {}", d + 5, f.len())));
        }
        let int = |s: &str| s.trim().parse::<i64>().map_err(|_| bad("bad integer"));
        let label = u32::try_from(int(f[0])?).map_err(|_| bad("bad label"))?;
        let frame = usize::try_from(int(f[1])?).map_err(|_| bad("bad frame"))?;
        let center = [int(f[2])? as i32, int(f[3])? as i32, int(f[4])? as i32];
        let z = f[5..]
            .iter()
            .map(|s| {
                s.trim()
                    .parse::<f32>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| bad("bad latent value"))
            })
            .collect::<Result<Vec<f32>>>()?;
        rows.push(LatentRow {
            label,
            frame,
            center,
            z,
        });
        offset += line.len() as u64 + 1;
    }
    Ok(rows)
}

fn truncate(s: &str) -> &str {
    &s[..s.len().min(40)]
}

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use mtpose_core::rotgeom::{euler_to_matrix, matrix_to_euler, nearest_rotation, EulerAngles, Matrix3, RotationMatrix};

use crate::fmt::{row, sig};
use crate::usage;

#[derive(Args)]
#[group(required = true, multiple = false)]
pub struct MatrixInput {
    /// Nine comma-separated entries, row by row.
    #[arg(long, value_delimiter = ',')]
    matrix: Option<Vec<f64>>,
    /// JSON file holding `[[a, b, c], [d, e, f], [g, h, i]]`.
    #[arg(long)]
    input: Option<PathBuf>,
}

impl MatrixInput {
    fn load(&self) -> Result<Matrix3> {
        if let Some(v) = &self.matrix {
            if v.len() != 9 {
                return Err(usage(format!("--matrix needs 9 entries, got {}", v.len())));
            }
            return Ok(Matrix3([[v[0], v[1], v[2]], [v[3], v[4], v[5]], [v[6], v[7], v[8]]]));
        }
        let path = self.input.as_ref().expect("clap enforces one input");
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

fn print_matrix(m: &Matrix3) {
    for r in &m.0 {
        out!("{}", row(r));
    }
}

pub fn euler2mat(yaw: f64, pitch: f64, roll: f64) -> Result<()> {
    let r = euler_to_matrix(EulerAngles::new(yaw, pitch, roll))?;
    print_matrix(r.matrix());
    Ok(())
}

pub fn mat2euler(input: &MatrixInput, project: bool) -> Result<()> {
    let m = input.load()?;
    let r = if project { nearest_rotation(&m)? } else { RotationMatrix::new(m)? };
    let a = matrix_to_euler(&r);
    out!("yaw {}", sig(a.yaw));
    out!("pitch {}", sig(a.pitch));
    out!("roll {}", sig(a.roll));
    Ok(())
}

pub fn project(input: &MatrixInput) -> Result<()> {
    print_matrix(nearest_rotation(&input.load()?)?.matrix());
    Ok(())
}

use std::path::Path;

use gengik::kinematics::RigidTransform;

use crate::CliError;

/// Largest accepted deviation of the goal quaternion's norm from one.
const QUAT_NORM_TOL: f64 = 1e-3;

/// Parses `x,y,z,qw,qx,qy,qz`. The quaternion is normalized after the norm
/// check.
pub fn parse_goal(text: &str) -> Result<RigidTransform, CliError> {
    let vals: Vec<f64> = text
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::Input(format!("goal `{text}`: {e}")))?;
    goal_from_values(&vals).map_err(|m| CliError::Input(format!("goal `{text}`: {m}")))
}

fn goal_from_values(vals: &[f64]) -> Result<RigidTransform, String> {
    if vals.len() != 7 {
        return Err(format!("expected 7 numbers x,y,z,qw,qx,qy,qz, got {}", vals.len()));
    }
    if vals.iter().any(|v| !v.is_finite()) {
        return Err("non-finite value".into());
    }
    let norm = vals[3..].iter().map(|v| v * v).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > QUAT_NORM_TOL {
        return Err(format!("quaternion norm {norm} is not within {QUAT_NORM_TOL} of 1"));
    }
    Ok(RigidTransform::from_position_quaternion(
        [vals[0], vals[1], vals[2]],
        [vals[3] / norm, vals[4] / norm, vals[5] / norm, vals[6] / norm],
    ))
}

/// Goal file: a JSON array of 7-number arrays, or one `x,y,z,qw,qx,qy,qz`
/// per line (blank lines and `#` comments skipped).
pub fn read_goal_file(path: &Path) -> Result<Vec<RigidTransform>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let bad = |m: String| CliError::Input(format!("{}: {m}", path.display()));
    let goals = if text.trim_start().starts_with('[') {
        let rows: Vec<Vec<f64>> = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
        rows.iter()
            .enumerate()
            .map(|(i, r)| goal_from_values(r).map_err(|m| bad(format!("goal {i}: {m}"))))
            .collect::<Result<Vec<_>, _>>()?
    } else {
        text.lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(parse_goal)
            .collect::<Result<Vec<_>, _>>()?
    };
    if goals.is_empty() {
        return Err(bad("no goals".into()));
    }
    Ok(goals)
}

pub fn goal_to_values(g: &RigidTransform) -> [f64; 7] {
    let q = g.to_quaternion_wxyz();
    let t = g.translation;
    [t.x, t.y, t.z, q[0], q[1], q[2], q[3]]
}

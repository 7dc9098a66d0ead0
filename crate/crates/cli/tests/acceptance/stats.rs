//! Paper-preset parameter counts through the stats command.

use cmah_cli::{cmd_stats, Format, Preset, StatsArgs, VariantArg};

use crate::Outcome;

const IMAGE_ENCODER: f64 = 86.2e6;
const POINT_ENCODER: f64 = 22.0e6;

pub fn run() -> Outcome {
    let args = StatsArgs {
        preset: Preset::Paper,
        bits: None,
        variant: VariantArg::Full,
        format: Format::JsonLines,
        out: None,
    };
    let report = match cmd_stats(&args) {
        Ok(r) => r,
        Err(e) => return Outcome::new(false, format!("stats failed: {e}")),
    };
    let rows: Vec<serde_json::Value> = report.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let params = |name: &str| {
        rows.iter()
            .find(|r| r["component"] == name)
            .and_then(|r| r["params"].as_u64())
            .map(|p| p as f64)
    };
    let (Some(img), Some(pt)) = (params("image encoder"), params("point encoder")) else {
        return Outcome::new(false, format!("missing encoder rows in {} rows", rows.len()));
    };
    let (di, dp) = ((img - IMAGE_ENCODER) / IMAGE_ENCODER, (pt - POINT_ENCODER) / POINT_ENCODER);
    Outcome::new(
        di.abs() <= 0.05 && dp.abs() <= 0.10,
        format!(
            "image encoder {img:.0} ({:+.2}% vs 86.2M, limit 5%), point encoder {pt:.0} ({:+.2}% vs 22M, limit 10%), {} rows",
            di * 100.0,
            dp * 100.0,
            rows.len()
        ),
    )
}

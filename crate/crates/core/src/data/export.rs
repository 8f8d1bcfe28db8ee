//! Profile CSV export and a generated matplotlib script that draws metric against cumulative
//! FLOPs per architecture with practical exits circled.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::profile::ExitProfile;

pub const CSV_HEADER: &str = "location,arch,metric_kind,metric_value,cumulative_flops,practical";

pub fn write_profiles<W: std::io::Write>(profiles: &[ExitProfile], out: W) -> Result<()> {
    if profiles.is_empty() {
        return Err(Error::EmptyProfiles);
    }
    let mut w = csv::Writer::from_writer(out);
    for p in profiles {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

pub fn export_profiles(profiles: &[ExitProfile], path: impl AsRef<Path>) -> Result<()> {
    write_profiles(profiles, fs::File::create(path)?)
}

pub fn read_profiles<R: std::io::Read>(input: R) -> Result<Vec<ExitProfile>> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header.join(",") != CSV_HEADER {
        return Err(Error::InvalidConfig(format!("unexpected profile header {:?}", header.join(","))));
    }
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub fn import_profiles(path: impl AsRef<Path>) -> Result<Vec<ExitProfile>> {
    read_profiles(fs::File::open(path)?)
}

/// Writes a Python script that reads `csv_path` and saves the profile plot next to it.
pub fn emit_plot_script(profiles: &[ExitProfile], csv_path: impl AsRef<Path>, script_path: impl AsRef<Path>) -> Result<()> {
    let first = profiles.first().ok_or(Error::EmptyProfiles)?;
    let csv_path = csv_path.as_ref();
    let png = csv_path.with_extension("png");
    let script = PLOT_TEMPLATE
        .replace("{csv}", &csv_path.display().to_string())
        .replace("{png}", &png.display().to_string())
        .replace("{ylabel}", first.metric_kind.name());
    fs::write(script_path, script)?;
    Ok(())
}

const PLOT_TEMPLATE: &str = r#"#!/usr/bin/env python3
# Generated by `multiexit export-plot`: metric against cumulative FLOPs per exit architecture.
import csv
from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

rows = list(csv.DictReader(open("{csv}")))
curves = defaultdict(list)
for r in rows:
    curves[r["arch"]].append((int(r["cumulative_flops"]), float(r["metric_value"]), r["practical"] == "true"))

fig, ax = plt.subplots(figsize=(8, 5))
for arch, points in sorted(curves.items()):
    points.sort()
    xs = [p[0] for p in points]
    ys = [p[1] for p in points]
    marker = "*" if arch == "final" else "o"
    ax.plot(xs, ys, marker=marker, label=arch, markersize=4)
    px = [p[0] for p in points if p[2]]
    py = [p[1] for p in points if p[2]]
    ax.scatter(px, py, s=120, facecolors="none", edgecolors="black", linewidths=1.2)
ax.set_xlabel("cumulative FLOPs per sample")
ax.set_ylabel("{ylabel}")
ax.legend(fontsize=8)
ax.grid(alpha=0.3)
fig.tight_layout()
fig.savefig("{png}", dpi=150)
print("wrote {png}")
"#;

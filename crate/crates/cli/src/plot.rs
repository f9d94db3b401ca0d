//! Static charts for `plot-metrics`: grouped P@k / PSP@k bars per run and
//! per-epoch loss curves, drawn as plain SVG. PNG output rasterizes the same
//! document.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use gudn_core::RunRecord;

const WIDTH: f64 = 960.0;
const PANEL_H: f64 = 320.0;
const MARGIN: f64 = 56.0;
const PALETTE: [&str; 8] = ["#4269d0", "#efb118", "#ff725c", "#6cc5b0", "#3ca951", "#ff8ab7", "#a463f2", "#97bbf5"];

pub struct NamedRun {
    pub name: String,
    pub record: RunRecord,
}

/// Every `run.json` below `root`, sorted by path. The run name is its
/// directory relative to `root`.
pub fn collect_runs(root: &Path) -> Result<Vec<NamedRun>> {
    let mut files = Vec::new();
    walk(root, &mut files)?;
    files.sort();
    let mut runs = Vec::new();
    for path in files {
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let record: RunRecord = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let dir = path.parent().unwrap_or(root);
        let name = match dir.strip_prefix(root) {
            Ok(rel) if !rel.as_os_str().is_empty() => rel.display().to_string(),
            _ => dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into()),
        };
        runs.push(NamedRun { name, record });
    }
    if runs.is_empty() {
        bail!("no run.json found under {}", root.display());
    }
    Ok(runs)
}

fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let path = entry?.path();
        if path.is_dir() {
            walk(&path, out)?;
        } else if path.file_name().is_some_and(|n| n == "run.json") {
            out.push(path);
        }
    }
    Ok(())
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Axis frame, horizontal grid lines and y tick labels for a panel at `top`.
fn frame(svg: &mut String, top: f64, title: &str, y_max: f64, y_fmt: impl Fn(f64) -> String) {
    let (x0, x1) = (MARGIN, WIDTH - MARGIN);
    let (y0, y1) = (top + PANEL_H - MARGIN, top + MARGIN * 0.6);
    let _ = writeln!(svg, r#"<text x="{}" y="{}" font-size="15" text-anchor="middle">{}</text>"#, WIDTH / 2.0, top + 22.0, esc(title));
    for i in 0..=4 {
        let v = y_max * i as f64 / 4.0;
        let y = y0 - (y0 - y1) * i as f64 / 4.0;
        let _ = writeln!(svg, r##"<line x1="{x0}" y1="{y:.1}" x2="{x1}" y2="{y:.1}" stroke="#ddd"/>"##);
        let _ = writeln!(svg, r#"<text x="{}" y="{:.1}" font-size="11" text-anchor="end">{}</text>"#, x0 - 6.0, y + 4.0, y_fmt(v));
    }
    let _ = writeln!(svg, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#);
    let _ = writeln!(svg, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#);
}

fn legend(svg: &mut String, top: f64, names: &[String]) {
    let mut x = MARGIN;
    let y = top + PANEL_H - 14.0;
    for (i, name) in names.iter().enumerate() {
        let _ = writeln!(svg, r#"<rect x="{x:.1}" y="{}" width="10" height="10" fill="{}"/>"#, y - 9.0, PALETTE[i % PALETTE.len()]);
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{y}" font-size="11">{}</text>"#, x + 14.0, esc(name));
        x += 24.0 + 6.5 * name.len() as f64;
    }
}

/// Groups are metrics (`P@1` .. `PSP@5`), one bar per run inside each.
fn bar_panel(svg: &mut String, top: f64, runs: &[&NamedRun]) {
    frame(svg, top, "test metrics", 1.0, |v| format!("{v:.2}"));
    let metrics: [(&str, fn(&gudn_core::MetricsReport) -> f64); 6] = [
        ("P@1", |m| m.p_at[&1]),
        ("P@3", |m| m.p_at[&3]),
        ("P@5", |m| m.p_at[&5]),
        ("PSP@1", |m| m.psp_at[&1]),
        ("PSP@3", |m| m.psp_at[&3]),
        ("PSP@5", |m| m.psp_at[&5]),
    ];
    let y0 = top + PANEL_H - MARGIN;
    let h = PANEL_H - MARGIN * 1.6;
    let group_w = (WIDTH - 2.0 * MARGIN) / metrics.len() as f64;
    let bar_w = group_w * 0.8 / runs.len().max(1) as f64;
    for (g, (label, get)) in metrics.iter().enumerate() {
        let gx = MARGIN + g as f64 * group_w + group_w * 0.1;
        for (r, run) in runs.iter().enumerate() {
            let Some(m) = &run.record.final_metrics else { continue };
            let v = get(m).clamp(0.0, 1.0);
            let x = gx + r as f64 * bar_w;
            let _ = writeln!(
                svg,
                r#"<rect x="{x:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="{}"><title>{} {label} {v:.4}</title></rect>"#,
                y0 - v * h,
                bar_w * 0.92,
                v * h,
                PALETTE[r % PALETTE.len()],
                esc(&run.name)
            );
        }
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{}" font-size="12" text-anchor="middle">{label}</text>"#, gx + group_w * 0.4, y0 + 16.0);
    }
    let names: Vec<String> = runs.iter().map(|r| r.name.clone()).collect();
    legend(svg, top, &names);
}

/// Mean overall training loss per epoch, one polyline per run.
fn loss_panel(svg: &mut String, top: f64, runs: &[NamedRun]) {
    let max_epochs = runs.iter().map(|r| r.record.epochs.len()).max().unwrap_or(0).max(2);
    let y_max = runs
        .iter()
        .flat_map(|r| r.record.epochs.iter().map(|e| e.loss.l_overall))
        .filter(|v| v.is_finite())
        .fold(0.0f64, f64::max)
        .max(1e-12);
    frame(svg, top, "training loss per epoch", y_max, |v| format!("{v:.3}"));
    let y0 = top + PANEL_H - MARGIN;
    let h = PANEL_H - MARGIN * 1.6;
    let w = WIDTH - 2.0 * MARGIN;
    for (r, run) in runs.iter().enumerate() {
        let pts: Vec<String> = run
            .record
            .epochs
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let x = MARGIN + w * i as f64 / (max_epochs - 1) as f64;
                let y = y0 - h * (e.loss.l_overall / y_max).clamp(0.0, 1.0);
                format!("{x:.1},{y:.1}")
            })
            .collect();
        let _ = writeln!(svg, r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="2"/>"#, pts.join(" "), PALETTE[r % PALETTE.len()]);
    }
    let _ = writeln!(svg, r#"<text x="{}" y="{}" font-size="12" text-anchor="end">epoch {max_epochs}</text>"#, WIDTH - MARGIN, y0 + 16.0);
    let names: Vec<String> = runs.iter().map(|r| r.name.clone()).collect();
    legend(svg, top, &names);
}

pub fn render_svg(runs: &[NamedRun]) -> String {
    let scored: Vec<&NamedRun> = runs.iter().filter(|r| r.record.final_metrics.is_some()).collect();
    let panels = usize::from(!scored.is_empty()) + 1;
    let height = PANEL_H * panels as f64;
    let mut svg = format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}" font-family="DejaVu Sans, sans-serif">"#
    );
    svg.push('\n');
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let mut top = 0.0;
    if !scored.is_empty() {
        bar_panel(&mut svg, top, &scored);
        top += PANEL_H;
    }
    loss_panel(&mut svg, top, runs);
    svg.push_str("</svg>\n");
    svg
}

pub fn write_chart(svg: &str, out: &Path) -> Result<()> {
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    match out.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("svg") => fs::write(out, svg)?,
        Some("png") => {
            let mut opt = resvg::usvg::Options::default();
            opt.fontdb_mut().load_system_fonts();
            let tree = resvg::usvg::Tree::from_str(svg, &opt)?;
            let size = tree.size().to_int_size();
            let mut pixmap = resvg::tiny_skia::Pixmap::new(size.width(), size.height()).context("empty chart")?;
            resvg::render(&tree, resvg::tiny_skia::Transform::default(), &mut pixmap.as_mut());
            pixmap.save_png(out)?;
        }
        _ => bail!("output must end in .svg or .png: {}", out.display()),
    }
    Ok(())
}

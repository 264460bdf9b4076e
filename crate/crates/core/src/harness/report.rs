//! Plain-text key/value reports with CSV tables and SVG figures.

use std::fmt::{Display, Write as _};
use std::path::{Path, PathBuf};

use plotters::prelude::*;

use super::analysis::{AttentionDump, SimilarityReport, StochasticReport};
use super::bench::{InvocationCounts, MemoryTable, REFERENCE_LATENCY_RATIO};
use super::eval::EvalReport;
use crate::error::{Error, Result};
use crate::store::write_atomic;

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(name: &str, header: &[&str]) -> Self {
        Self {
            name: name.to_string(),
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut s = self.header.join(",");
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.join(","));
            s.push('\n');
        }
        s
    }
}

/// One structured-text document: `key = value` lines, then tables.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub title: String,
    pub entries: Vec<(String, String)>,
    pub tables: Vec<Table>,
}

/// Shortest round-trip rendering, so reports are stable byte for byte.
pub fn num(v: f64) -> String {
    format!("{v:?}")
}

impl Report {
    pub fn new(title: &str) -> Self {
        Self {
            title: title.to_string(),
            entries: Vec::new(),
            tables: Vec::new(),
        }
    }

    pub fn kv(&mut self, key: &str, value: impl Display) -> &mut Self {
        self.entries.push((key.to_string(), value.to_string()));
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn render(&self) -> String {
        let mut s = format!("# {}\n", self.title);
        for (k, v) in &self.entries {
            let _ = writeln!(s, "{k} = {v}");
        }
        for t in &self.tables {
            let _ = write!(s, "\n[{}]\n{}", t.name, t.to_csv());
        }
        s
    }

    /// Write `<stem>.txt` and one `<stem>-<table>.csv` per table.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut out = vec![dir.join(format!("{stem}.txt"))];
        write_atomic(&out[0], self.render().as_bytes())?;
        for t in &self.tables {
            let p = dir.join(format!("{stem}-{}.csv", t.name));
            write_atomic(&p, t.to_csv().as_bytes())?;
            out.push(p);
        }
        Ok(out)
    }

    /// Key/value entries of a rendered report.
    pub fn parse_entries(text: &str) -> Vec<(String, String)> {
        text.lines()
            .take_while(|l| !l.starts_with('['))
            .filter_map(|l| l.split_once(" = "))
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }
}

pub fn eval_report(r: &EvalReport) -> Report {
    let mut rep = Report::new("evaluation");
    rep.kv("task", &r.task)
        .kv("variant", &r.variant)
        .kv("n_episodes", r.n_episodes)
        .kv("successes", r.successes())
        .kv("success_rate", num(r.success_rate))
        .kv("regrasp_rate", num(r.regrasp_rate()))
        .kv("master_seed", r.master_seed)
        .kv("frame_drop", num(r.perturbation.frame_drop))
        .kv("obs_noise", num(r.perturbation.obs_noise))
        .kv("config_hash", &r.config_hash)
        .kv("checkpoint_hashes", r.checkpoint_hashes.join(","));
    let mut t = Table::new(
        "episodes",
        &["index", "seed", "success", "failed", "steps", "regrasp", "intent_calls", "denoiser_calls"],
    );
    for o in &r.outcomes {
        t.push(vec![
            o.index.to_string(),
            o.seed.to_string(),
            o.success.to_string(),
            o.failed.to_string(),
            o.steps.to_string(),
            o.regrasp.to_string(),
            o.intent_calls.to_string(),
            o.denoiser_calls.to_string(),
        ]);
    }
    rep.tables.push(t);
    rep
}

pub fn similarity_report(s: &SimilarityReport) -> Report {
    let mut rep = Report::new("belief similarity");
    rep.kv("pairs", s.pairs.len())
        .kv("episodes", s.episodes)
        .kv("pearson_action", num(s.pearson_action))
        .kv("pearson_obs", num(s.pearson_obs))
        .kv("variance_ratio_bottom_top", num(s.variance_ratio_bottom_top));
    let mut t = Table::new(
        "pairs",
        &["episode_a", "t_a", "episode_b", "t_b", "belief_sim", "action_dist", "obs_sim"],
    );
    for p in &s.pairs {
        t.push(vec![
            p.a.0.to_string(),
            p.a.1.to_string(),
            p.b.0.to_string(),
            p.b.1.to_string(),
            num(p.belief_sim),
            num(p.action_dist),
            num(p.obs_sim),
        ]);
    }
    rep.tables.push(t);
    rep
}

fn matrix_table(name: &str, m: &[Vec<f64>]) -> Table {
    let header: Vec<String> = (0..m.len()).map(|j| format!("s{j}")).collect();
    let refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut t = Table::new(name, &refs);
    for row in m {
        t.push(row.iter().map(|&v| num(v)).collect());
    }
    t
}

pub fn stochastic_report(s: &StochasticReport) -> Report {
    let mut rep = Report::new("latent stochasticity");
    rep.kv("n_samples", s.n_samples)
        .kv("mean_distance_h1", num(s.mean_distance_h1))
        .kv("mean_distance_h5", num(s.mean_distance_h5))
        .kv("kl_final_mean", num(s.kl_final_mean));
    rep.tables.push(matrix_table("divergence_h1", &s.divergence_h1));
    rep.tables.push(matrix_table("divergence_h5", &s.divergence_h5));
    let mut kl = Table::new("kl_curve", &["iter", "kl"]);
    for (i, v) in s.kl_curve.iter().enumerate() {
        kl.push(vec![i.to_string(), num(f64::from(*v))]);
    }
    rep.tables.push(kl);
    rep
}

pub fn attention_report(a: &AttentionDump) -> Report {
    let mut rep = Report::new("window attention");
    rep.kv("timesteps", a.timesteps.len())
        .kv(
            "occlusion_steps",
            a.occlusion_steps.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
        )
        .kv("post_occlusion_belief_weight", num(a.post_occlusion_belief_weight))
        .kv("uniform_level", num(a.uniform_level));
    let k = a.rows.first().map_or(0, Vec::len);
    let mut header = vec!["t".to_string(), "belief".to_string()];
    header.extend((1..k).map(|j| format!("frame{j}")));
    let refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut t = Table::new("attention", &refs);
    for (ts, row) in a.timesteps.iter().zip(&a.rows) {
        let mut r = vec![ts.to_string()];
        r.extend(row.iter().map(|&v| num(f64::from(v))));
        t.push(r);
    }
    rep.tables.push(t);
    rep
}

pub fn memory_report(m: &MemoryTable) -> Report {
    let mut rep = Report::new("relative memory");
    let (first, steps, last) = m.belief_long_run;
    rep.kv("belief_floats_step_1", first)
        .kv("belief_long_run_steps", steps)
        .kv("belief_floats_last_step", last)
        .kv("belief_long_run_ratio", num(last as f64 / first as f64));
    let mut header = vec!["policy".to_string()];
    header.extend(m.lengths.iter().map(|l| format!("ctx{l}")));
    let refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut ratios = Table::new("ratios", &refs);
    let mut floats = Table::new("floats", &refs);
    for r in &m.rows {
        let mut a = vec![r.kind.name().to_string()];
        a.extend(r.ratios.iter().map(|&v| num(v)));
        ratios.push(a);
        let mut b = vec![r.kind.name().to_string()];
        b.extend(r.floats.iter().map(usize::to_string));
        floats.push(b);
    }
    rep.tables.push(ratios);
    rep.tables.push(floats);
    rep
}

pub fn invocation_report(c: &InvocationCounts) -> Report {
    let mut rep = Report::new("component invocations (latency proxy: call counts, not seconds)");
    rep.kv("steps", c.steps)
        .kv("intent_calls", c.intent_calls)
        .kv("belief_steps", c.belief_steps)
        .kv("denoiser_calls", c.denoiser_calls)
        .kv("chunks", c.chunks)
        .kv("counterfactual_steps", c.counterfactual_steps)
        .kv("counterfactual_intent_calls", c.counterfactual_intent_calls)
        .kv("intent_call_ratio", num(c.ratio()))
        .kv("reference_latency_ratio", num(REFERENCE_LATENCY_RATIO));
    rep
}

pub fn curves_table(name: &str, curves: &[(&str, &[f32])]) -> Table {
    let mut header = vec!["iter"];
    header.extend(curves.iter().map(|(n, _)| *n));
    let mut t = Table::new(name, &header);
    let n = curves.iter().map(|(_, c)| c.len()).max().unwrap_or(0);
    for i in 0..n {
        let mut r = vec![i.to_string()];
        r.extend(curves.iter().map(|(_, c)| c.get(i).map_or(String::new(), |v| num(f64::from(*v)))));
        t.push(r);
    }
    t
}

// ---------------------------------------------------------------------------
// figures

fn plot_err(path: &Path, e: impl Display) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}

fn bounds(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = vals
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-6);
    (lo - pad, hi + pad)
}

/// Scatter plot of `(x, y)` points.
pub fn plot_scatter(path: &Path, title: &str, pts: &[(f64, f64)]) -> Result<()> {
    let root = SVGBackend::new(path, (640, 480)).into_drawing_area();
    let e = |e| plot_err(path, e);
    root.fill(&WHITE).map_err(e)?;
    let xr = bounds(pts.iter().map(|p| p.0));
    let yr = bounds(pts.iter().map(|p| p.1));
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 18))
        .margin(10)
        .x_label_area_size(30)
        .y_label_area_size(40)
        .build_cartesian_2d(xr.0..xr.1, yr.0..yr.1)
        .map_err(e)?;
    chart.configure_mesh().draw().map_err(e)?;
    chart
        .draw_series(pts.iter().map(|&p| Circle::new(p, 2, BLUE.filled())))
        .map_err(e)?;
    root.present().map_err(e)?;
    Ok(())
}

/// One line per named series.
pub fn plot_lines(path: &Path, title: &str, series: &[(&str, Vec<(f64, f64)>)]) -> Result<()> {
    let root = SVGBackend::new(path, (640, 480)).into_drawing_area();
    let e = |e| plot_err(path, e);
    root.fill(&WHITE).map_err(e)?;
    let xr = bounds(series.iter().flat_map(|(_, s)| s.iter().map(|p| p.0)));
    let yr = bounds(series.iter().flat_map(|(_, s)| s.iter().map(|p| p.1)));
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 18))
        .margin(10)
        .x_label_area_size(30)
        .y_label_area_size(50)
        .build_cartesian_2d(xr.0..xr.1, yr.0..yr.1)
        .map_err(e)?;
    chart.configure_mesh().draw().map_err(e)?;
    for (i, (name, s)) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(s.iter().copied(), color.stroke_width(1)))
            .map_err(e)?
            .label(*name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 15, y)], color));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(e)?;
    root.present().map_err(e)?;
    Ok(())
}

/// Grayscale heat map of a matrix, row 0 at the top.
pub fn plot_heatmap(path: &Path, title: &str, m: &[Vec<f64>]) -> Result<()> {
    let root = SVGBackend::new(path, (640, 480)).into_drawing_area();
    let e = |e| plot_err(path, e);
    root.fill(&WHITE).map_err(e)?;
    let rows = m.len().max(1);
    let cols = m.first().map_or(1, Vec::len).max(1);
    let (lo, hi) = bounds(m.iter().flatten().copied());
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 18))
        .margin(10)
        .x_label_area_size(30)
        .y_label_area_size(40)
        .build_cartesian_2d(0..cols, 0..rows)
        .map_err(e)?;
    chart.configure_mesh().disable_mesh().draw().map_err(e)?;
    chart
        .draw_series(m.iter().enumerate().flat_map(|(i, row)| {
            row.iter().enumerate().map(move |(j, &v)| {
                let g = (255.0 * (1.0 - (v - lo) / (hi - lo))).clamp(0.0, 255.0) as u8;
                Rectangle::new([(j, rows - 1 - i), (j + 1, rows - i)], RGBColor(g, g, g).filled())
            })
        }))
        .map_err(e)?;
    root.present().map_err(e)?;
    Ok(())
}

/// Grouped bars: one group per category, one bar per series.
pub fn plot_bars(path: &Path, title: &str, categories: &[String], series: &[(&str, Vec<f64>)]) -> Result<()> {
    let root = SVGBackend::new(path, (640, 480)).into_drawing_area();
    let e = |e| plot_err(path, e);
    root.fill(&WHITE).map_err(e)?;
    let top = series.iter().flat_map(|(_, v)| v.iter().copied()).fold(1.0f64, f64::max) * 1.1;
    let n = series.len().max(1) as f64;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 18))
        .margin(10)
        .x_label_area_size(30)
        .y_label_area_size(40)
        .build_cartesian_2d(0.0..categories.len() as f64, 0.0..top)
        .map_err(e)?;
    let labels = categories.to_vec();
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(categories.len() + 1)
        .x_label_formatter(&|x| labels.get(x.floor() as usize).cloned().unwrap_or_default())
        .draw()
        .map_err(e)?;
    for (s, (name, vals)) in series.iter().enumerate() {
        let color = Palette99::pick(s).to_rgba();
        chart
            .draw_series(vals.iter().enumerate().map(|(c, &v)| {
                let x0 = c as f64 + 0.1 + 0.8 * s as f64 / n;
                Rectangle::new([(x0, 0.0), (x0 + 0.8 / n, v)], color.filled())
            }))
            .map_err(e)?
            .label(*name)
            .legend(move |(x, y)| Rectangle::new([(x, y - 4), (x + 12, y + 4)], color.filled()));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(e)?;
    root.present().map_err(e)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_and_parse() {
        let mut r = Report::new("t");
        r.kv("a", 1).kv("b", num(0.1));
        let mut t = Table::new("x", &["i", "v"]);
        t.push(vec!["0".into(), "2.5".into()]);
        r.tables.push(t);
        let text = r.render();
        assert_eq!(text, "# t\na = 1\nb = 0.1\n\n[x]\ni,v\n0,2.5\n");
        assert_eq!(
            Report::parse_entries(&text),
            vec![("a".to_string(), "1".to_string()), ("b".to_string(), "0.1".to_string())]
        );
        assert_eq!(r.get("b"), Some("0.1"));
    }

    #[test]
    fn figures_are_written_deterministically() {
        let dir = tempfile::tempdir().unwrap();
        let pts: Vec<(f64, f64)> = (0..20).map(|i| (i as f64, (i as f64).sin())).collect();
        let a = dir.path().join("a.svg");
        let b = dir.path().join("b.svg");
        plot_scatter(&a, "scatter", &pts).unwrap();
        plot_scatter(&b, "scatter", &pts).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        plot_lines(&dir.path().join("l.svg"), "lines", &[("s", pts.clone())]).unwrap();
        plot_heatmap(&dir.path().join("h.svg"), "heat", &[vec![0.0, 1.0], vec![0.5, 0.2]]).unwrap();
        plot_bars(
            &dir.path().join("bars.svg"),
            "bars",
            &["1".into(), "2".into()],
            &[("x", vec![1.0, 2.0]), ("y", vec![1.0, 1.0])],
        )
        .unwrap();
        let svg = std::fs::read_to_string(dir.path().join("bars.svg")).unwrap();
        assert!(svg.starts_with("<svg"));
    }
}

//! Per-epoch conditioning curves: L2 of R's estimate to the conditioning text
//! for each variant, and an overlay of the label cross entropy.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Once;

use ogan_core::trainer::{read_log, LogMeta, TrainLogRecord, VARIANT_BASELINE, VARIANT_OGAN};
use plotters::prelude::*;

use crate::CliError;

static FONT: &[u8] = include_bytes!("../assets/DejaVuSans.ttf");
static REGISTER: Once = Once::new();

#[derive(Clone, Debug, PartialEq)]
pub struct EpochPoint {
    pub epoch: u64,
    pub cond_l2: Option<f64>,
    /// Cross entropy over the variant's own label layer.
    pub cond_ce: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct LogSeries {
    pub name: String,
    pub variant: String,
    pub points: Vec<EpochPoint>,
}

fn variant_of(log: &Path, records: &[TrainLogRecord]) -> String {
    let meta = log.with_file_name("log.meta.json");
    if let Some(m) = std::fs::read_to_string(&meta).ok().and_then(|t| serde_json::from_str::<LogMeta>(&t).ok()) {
        return m.variant;
    }
    if records.iter().any(|r| r.cond_ce_sub.is_some()) {
        VARIANT_OGAN.into()
    } else {
        VARIANT_BASELINE.into()
    }
}

/// Mean of each measured series per epoch.
pub fn epoch_means(records: &[TrainLogRecord], variant: &str) -> Vec<EpochPoint> {
    #[derive(Default)]
    struct Acc {
        l2: (f64, usize),
        ce: (f64, usize),
    }
    let mut by_epoch: BTreeMap<u64, Acc> = BTreeMap::new();
    for r in records {
        let a = by_epoch.entry(r.epoch).or_default();
        if let Some(v) = r.cond_l2 {
            a.l2.0 += v;
            a.l2.1 += 1;
        }
        let ce = if variant == VARIANT_OGAN { r.cond_ce_sub } else { r.cond_ce_main };
        if let Some(v) = ce {
            a.ce.0 += v;
            a.ce.1 += 1;
        }
    }
    let mean = |(s, n): (f64, usize)| (n > 0).then(|| s / n as f64);
    by_epoch
        .into_iter()
        .map(|(epoch, a)| EpochPoint { epoch, cond_l2: mean(a.l2), cond_ce: mean(a.ce) })
        .collect()
}

pub fn load_series(log: &Path) -> Result<LogSeries, CliError> {
    let records = read_log(log)?;
    let variant = variant_of(log, &records);
    let dir = log.parent().and_then(|p| p.file_name()).map(|f| f.to_string_lossy().into_owned());
    Ok(LogSeries {
        name: dir.unwrap_or_else(|| log.display().to_string()),
        points: epoch_means(&records, &variant),
        variant,
    })
}

const BLUES: [RGBColor; 3] = [RGBColor(31, 90, 200), RGBColor(90, 150, 230), RGBColor(10, 40, 120)];
const MAGENTAS: [RGBColor; 3] = [RGBColor(200, 0, 200), RGBColor(235, 90, 170), RGBColor(120, 0, 120)];

struct Line {
    label: String,
    color: RGBColor,
    points: Vec<(f64, f64)>,
}

fn plot_err<E: std::fmt::Display>(path: &Path) -> impl Fn(E) -> CliError + '_ {
    move |e| CliError::Other(format!("plotting {}: {e}", path.display()))
}

fn bounds(lines: &[Line]) -> (std::ops::Range<f64>, std::ops::Range<f64>) {
    let pts = lines.iter().flat_map(|l| l.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        return (0.0..1.0, 0.0..1.0);
    }
    let pad_y = if y1 > y0 { 0.05 * (y1 - y0) } else { 0.5_f64.max(0.05 * y0.abs()) };
    let pad_x = if x1 > x0 { 0.0 } else { 0.5 };
    (x0 - pad_x..x1 + pad_x, y0 - pad_y..y1 + pad_y)
}

fn chart(path: &Path, title: &str, y_desc: &str, lines: &[Line]) -> Result<(), CliError> {
    REGISTER.call_once(|| {
        if plotters::style::register_font("sans-serif", FontStyle::Normal, FONT).is_err() {
            panic!("bundled font does not parse");
        }
    });
    let err = plot_err(path);
    let root = BitMapBackend::new(path, (720, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(&err)?;
    let (xr, yr) = bounds(lines);
    let mut ch = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(14)
        .x_label_area_size(40)
        .y_label_area_size(64)
        .build_cartesian_2d(xr, yr)
        .map_err(&err)?;
    ch.configure_mesh().x_desc("epoch").y_desc(y_desc).draw().map_err(&err)?;
    for l in lines {
        let c = l.color;
        ch.draw_series(LineSeries::new(l.points.clone(), c.stroke_width(2)))
            .map_err(&err)?
            .label(l.label.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], c.stroke_width(2)));
        ch.draw_series(l.points.iter().map(|&p| Circle::new(p, 3, c.filled()))).map_err(&err)?;
    }
    if lines.is_empty() {
        root.draw(&Text::new("no logs for this variant", (280, 240), ("sans-serif", 16))).map_err(&err)?;
    } else {
        ch.configure_series_labels()
            .background_style(WHITE.mix(0.85))
            .border_style(BLACK)
            .draw()
            .map_err(&err)?;
    }
    root.present().map_err(&err)?;
    Ok(())
}

fn lines_for(series: &[LogSeries], variant: Option<&str>, pick: fn(&EpochPoint) -> Option<f64>) -> Vec<Line> {
    let (mut nb, mut no) = (0, 0);
    let mut out = Vec::new();
    for s in series {
        let is_ogan = s.variant == VARIANT_OGAN;
        let color = if is_ogan {
            no += 1;
            MAGENTAS[(no - 1) % MAGENTAS.len()]
        } else {
            nb += 1;
            BLUES[(nb - 1) % BLUES.len()]
        };
        if variant.is_some_and(|v| v != s.variant) {
            continue;
        }
        let points: Vec<(f64, f64)> =
            s.points.iter().filter_map(|p| pick(p).map(|v| (p.epoch as f64, v))).collect();
        if points.is_empty() {
            continue;
        }
        let tag = if is_ogan { "O-GAN" } else { "PGAN" };
        out.push(Line { label: format!("{tag} ({})", s.name), color, points });
    }
    out
}

pub const FIG_A: &str = "fig_a_cond_l2_baseline.png";
pub const FIG_B: &str = "fig_b_cond_l2_ogan.png";
pub const FIG_C: &str = "fig_c_cond_ce.png";

/// Writes the three figures into `dir` and returns their paths.
pub fn render_all(series: &[LogSeries], dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let l2 = |p: &EpochPoint| p.cond_l2;
    let ce = |p: &EpochPoint| p.cond_ce;
    let figs: [(&str, &str, &str, Vec<Line>); 3] = [
        (FIG_A, "PGAN (category-only): conditioning L2", "L2 loss", lines_for(series, Some(VARIANT_BASELINE), l2)),
        (FIG_B, "O-GAN: conditioning L2", "L2 loss", lines_for(series, Some(VARIANT_OGAN), l2)),
        (FIG_C, "Label cross entropy on generated images", "CE loss", lines_for(series, None, ce)),
    ];
    let mut written = Vec::new();
    for (file, title, y, lines) in figs {
        let path = dir.join(file);
        chart(&path, title, y, &lines)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ogan_core::trainer::StepKind;

    fn rec(step: u64, epoch: u64, l2: Option<f64>, sub: Option<f64>, main: Option<f64>) -> TrainLogRecord {
        TrainLogRecord {
            step,
            epoch,
            stage: 0,
            resolution: 4,
            alpha: 1.0,
            kind: StepKind::Generator,
            critic_adv: None,
            gp: None,
            cls_real: None,
            reg_real: None,
            critic_total: None,
            gen_total: None,
            cond_ce_sub: sub,
            cond_ce_main: main,
            cond_l2: l2,
        }
    }

    #[test]
    fn epoch_means_average_measured_steps_only() {
        let recs = vec![
            rec(0, 0, Some(1.0), Some(2.0), Some(0.5)),
            rec(1, 0, None, None, None),
            rec(2, 0, Some(3.0), Some(4.0), Some(1.5)),
            rec(3, 1, Some(5.0), None, Some(7.0)),
        ];
        let p = epoch_means(&recs, VARIANT_OGAN);
        assert_eq!(p.len(), 2);
        assert_eq!(p[0], EpochPoint { epoch: 0, cond_l2: Some(2.0), cond_ce: Some(3.0) });
        assert_eq!(p[1], EpochPoint { epoch: 1, cond_l2: Some(5.0), cond_ce: None });
        let b = epoch_means(&recs, VARIANT_BASELINE);
        assert_eq!(b[0].cond_ce, Some(1.0));
        assert_eq!(b[1].cond_ce, Some(7.0));
    }

    #[test]
    fn single_point_and_empty_panels_render() {
        let dir = tempfile::tempdir().unwrap();
        let s = LogSeries {
            name: "ogan".into(),
            variant: VARIANT_OGAN.into(),
            points: vec![EpochPoint { epoch: 0, cond_l2: Some(0.3), cond_ce: Some(1.2) }],
        };
        let files = render_all(&[s], dir.path()).unwrap();
        assert_eq!(files.len(), 3);
        for f in files {
            let img = image::open(&f).unwrap();
            assert_eq!((img.width(), img.height()), (720, 480));
        }
    }
}

use std::path::Path;

use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::{to_conditions, ConditionalDataset};
use super::metrics::distribution_distance;
use super::probe::{condition_consistency, Probe};
use crate::error::{Error, Result};
use crate::sampler::{sample, Denoise, GuidanceScale};
use crate::schedule::NoiseSchedule;

/// Dataset index offset for reference draws, disjoint from probe training.
pub const REFERENCE_OFFSET: u64 = 1 << 36;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TradeoffPoint {
    pub w: f64,
    pub dist: f64,
    pub consistency: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveSettings {
    pub steps: usize,
    pub n_samples: usize,
    pub seed: u64,
}

/// Everything a quality measurement needs besides the model.
#[derive(Debug, Clone, Copy)]
pub struct Evaluator<'a> {
    pub dataset: &'a ConditionalDataset,
    pub probe: &'a Probe,
    pub probe_checksum: &'a str,
    pub schedule: NoiseSchedule,
}

/// `1.0, 1.5, ..., 10.0`.
pub fn default_w_grid() -> Vec<f64> {
    (0..19).map(|i| 1.0 + 0.5 * i as f64).collect()
}

impl Evaluator<'_> {
    pub fn reference(&self, n: usize) -> ndarray::Array2<f64> {
        self.dataset.balanced(n, REFERENCE_OFFSET).0
    }

    /// Samples with balanced labels and scores them.
    pub fn point<M: Denoise + ?Sized>(&self, model: &M, settings: CurveSettings, w: f64) -> Result<TradeoffPoint> {
        let labels = self.dataset.balanced_labels(settings.n_samples);
        let x = sample(
            model,
            &self.schedule,
            settings.steps,
            &to_conditions(&labels),
            GuidanceScale::new(w)?,
            settings.seed,
        )?;
        let dist = distribution_distance(&x, &self.reference(settings.n_samples))?;
        let consistency = condition_consistency(&x, &labels, self.probe, self.probe_checksum)?;
        Ok(TradeoffPoint { w, dist, consistency })
    }

    /// One point per entry of `w_list`, duplicates included, all from the same noise seed.
    pub fn curve<M: Denoise + ?Sized>(&self, model: &M, settings: CurveSettings, w_list: &[f64]) -> Result<Vec<TradeoffPoint>> {
        if w_list.is_empty() {
            return Err(Error::InvalidArgument("w_list must not be empty".into()));
        }
        w_list.iter().map(|&w| self.point(model, settings, w)).collect()
    }
}

#[derive(Serialize)]
struct CurveRow<'a> {
    w: f64,
    dist: f64,
    consistency: f64,
    steps: usize,
    n_samples: usize,
    seed: u64,
    config_hash: &'a str,
}

pub fn write_curve_csv(path: &Path, points: &[TradeoffPoint], settings: CurveSettings, config_hash: &str) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path)?;
    for p in points {
        wtr.serialize(CurveRow {
            w: p.w,
            dist: p.dist,
            consistency: p.consistency,
            steps: settings.steps,
            n_samples: settings.n_samples,
            seed: settings.seed,
            config_hash,
        })?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_curve_csv(path: &Path) -> Result<Vec<TradeoffPoint>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in rdr.deserialize::<std::collections::HashMap<String, String>>() {
        let rec = rec?;
        let get = |k: &str| -> Result<f64> {
            rec.get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::InvalidArgument(format!("curve row lacks numeric {k}")))
        };
        out.push(TradeoffPoint { w: get("w")?, dist: get("dist")?, consistency: get("consistency")? });
    }
    Ok(out)
}

/// `dist` against `consistency`, one line per named series.
pub fn plot_curves(path: &Path, series: &[(String, Vec<TradeoffPoint>)]) -> Result<()> {
    let plot_err = |e: &dyn std::fmt::Display| Error::Plot(e.to_string());
    let pts = series.iter().flat_map(|(_, s)| s.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for p in pts {
        x0 = x0.min(p.consistency);
        x1 = x1.max(p.consistency);
        y0 = y0.min(p.dist);
        y1 = y1.max(p.dist);
    }
    if x0 > x1 {
        return Err(Error::InvalidArgument("nothing to plot".into()));
    }
    let pad = |a: f64, b: f64| ((b - a) * 0.05).max(1e-3);
    let (px, py) = (pad(x0, x1), pad(y0, y1));

    let root = SVGBackend::new(path, (720, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(&e))?;
    let mut chart = ChartBuilder::on(&root)
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(56)
        .caption("dist vs consistency over guidance scale", ("sans-serif", 18))
        .build_cartesian_2d((x0 - px)..(x1 + px), (y0 - py)..(y1 + py))
        .map_err(|e| plot_err(&e))?;
    chart
        .configure_mesh()
        .x_desc("consistency")
        .y_desc("dist")
        .draw()
        .map_err(|e| plot_err(&e))?;
    for (i, (name, s)) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        let xy: Vec<(f64, f64)> = s.iter().map(|p| (p.consistency, p.dist)).collect();
        chart
            .draw_series(LineSeries::new(xy.clone(), color.stroke_width(2)))
            .map_err(|e| plot_err(&e))?
            .label(name.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
        chart
            .draw_series(PointSeries::of_element(xy, 3, color.filled(), &|c, s, st| Circle::new(c, s, st)))
            .map_err(|e| plot_err(&e))?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| plot_err(&e))?;
    root.present().map_err(|e| plot_err(&e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid() {
        let g = default_w_grid();
        assert_eq!(g.len(), 19);
        assert_eq!(g[0], 1.0);
        assert_eq!(g[18], 10.0);
    }

    #[test]
    fn csv_and_plot_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let pts = vec![
            TradeoffPoint { w: 1.0, dist: 0.1, consistency: 0.8 },
            TradeoffPoint { w: 2.0, dist: 0.2, consistency: 0.9 },
        ];
        let s = CurveSettings { steps: 8, n_samples: 1000, seed: 1 };
        let p = dir.path().join("curve.csv");
        write_curve_csv(&p, &pts, s, "abc").unwrap();
        assert_eq!(read_curve_csv(&p).unwrap(), pts);
        let header = std::fs::read_to_string(&p).unwrap();
        assert!(header.starts_with("w,dist,consistency,steps,n_samples,seed,config_hash"));
        let svg = dir.path().join("curve.svg");
        plot_curves(&svg, &[("a".into(), pts)]).unwrap();
        assert!(std::fs::read_to_string(svg).unwrap().contains("<svg"));
    }
}

use serde::{Deserialize, Serialize};

/// Targets with `|x|` below this are left out of MAPE.
pub const MAPE_FLOOR: f64 = 1.0;

/// MAE, RMSE and MAPE (in percent) over `count` prediction/target pairs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
    pub mape: f64,
    pub count: usize,
    pub mape_excluded: usize,
}

impl Metrics {
    pub fn of(pred: &[f64], target: &[f64]) -> Self {
        let mut acc = MetricsAccumulator::default();
        acc.extend(pred, target);
        acc.finish()
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct MetricsAccumulator {
    abs: f64,
    sq: f64,
    pct: f64,
    count: usize,
    pct_count: usize,
    excluded: usize,
}

impl MetricsAccumulator {
    pub fn push(&mut self, pred: f64, target: f64) {
        let e = pred - target;
        self.abs += e.abs();
        self.sq += e * e;
        self.count += 1;
        if target.abs() < MAPE_FLOOR {
            self.excluded += 1;
        } else {
            self.pct += (e / target).abs();
            self.pct_count += 1;
        }
    }

    pub fn extend(&mut self, pred: &[f64], target: &[f64]) {
        assert_eq!(pred.len(), target.len());
        for (&p, &t) in pred.iter().zip(target) {
            self.push(p, t);
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// MAPE is 0 when every target falls under [`MAPE_FLOOR`].
    pub fn finish(&self) -> Metrics {
        let n = self.count.max(1) as f64;
        Metrics {
            mae: self.abs / n,
            rmse: (self.sq / n).sqrt(),
            mape: if self.pct_count == 0 { 0.0 } else { 100.0 * self.pct / self.pct_count as f64 },
            count: self.count,
            mape_excluded: self.excluded,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonMetrics {
    /// 1-based forecast step.
    pub step: usize,
    pub minutes: u32,
    #[serde(flatten)]
    pub metrics: Metrics,
}

/// Overall and per-horizon-step metrics on de-normalized values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub windows: usize,
    pub overall: Metrics,
    pub per_horizon: Vec<HorizonMetrics>,
}

impl MetricsReport {
    /// Builds a report from one accumulator per horizon step.
    pub fn from_horizons(windows: usize, horizons: &[MetricsAccumulator], interval_minutes: u32) -> Self {
        let mut all = MetricsAccumulator::default();
        for h in horizons {
            all.abs += h.abs;
            all.sq += h.sq;
            all.pct += h.pct;
            all.count += h.count;
            all.pct_count += h.pct_count;
            all.excluded += h.excluded;
        }
        Self {
            windows,
            overall: all.finish(),
            per_horizon: horizons
                .iter()
                .enumerate()
                .map(|(i, h)| HorizonMetrics { step: i + 1, minutes: (i as u32 + 1) * interval_minutes, metrics: h.finish() })
                .collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain struct serializes") + "\n"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_cases() {
        let m = Metrics::of(&[2.0], &[1.0]);
        assert_eq!((m.mae, m.rmse, m.mape), (1.0, 1.0, 100.0));
        let m = Metrics::of(&[3.0, 1.0], &[1.0, 1.0]);
        assert_eq!((m.mae, m.rmse, m.mape), (1.0, 2f64.sqrt(), 100.0));
        let m = Metrics::of(&[4.0, 5.0], &[4.0, 5.0]);
        assert_eq!((m.mae, m.rmse, m.mape), (0.0, 0.0, 0.0));
    }

    #[test]
    fn small_targets_are_excluded_from_mape_only() {
        let m = Metrics::of(&[1.0, 2.0], &[0.5, 1.0]);
        assert_eq!(m.mape_excluded, 1);
        assert_eq!(m.count, 2);
        assert_eq!(m.mape, 100.0);
        assert_eq!(m.mae, 0.75);
    }

    #[test]
    fn report_overall_pools_horizons() {
        let mut h = [MetricsAccumulator::default(); 2];
        h[0].extend(&[2.0], &[1.0]);
        h[1].extend(&[1.0], &[1.0]);
        let r = MetricsReport::from_horizons(1, &h, 5);
        assert_eq!(r.overall.mae, 0.5);
        assert_eq!(r.per_horizon[1].minutes, 10);
        let back: MetricsReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }
}

use std::fmt::Write as _;

/// Run summary written as `key = value` lines followed by a one-line
/// machine-readable summary.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub ate_rmse_m: Option<f64>,
    pub depth_rmse_cm: Option<f64>,
    pub breaks: usize,
    /// `(window_id, reprojection RMSE in pixels)`.
    pub window_rmse_px: Vec<(usize, f64)>,
    /// Wall-clock seconds per pipeline stage.
    pub stage_seconds: Vec<(String, f64)>,
    /// Additional `key = value` entries, written first.
    pub entries: Vec<(String, String)>,
}

fn metric(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"))
}

impl EvalReport {
    pub fn summary_line(&self) -> String {
        format!(
            "ATE_RMSE_M={} DEPTH_RMSE_CM={} BREAKS={}",
            metric(self.ate_rmse_m),
            metric(self.depth_rmse_cm),
            self.breaks
        )
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        let _ = writeln!(out, "ate_rmse_m = {}", metric(self.ate_rmse_m));
        let _ = writeln!(out, "depth_rmse_cm = {}", metric(self.depth_rmse_cm));
        let _ = writeln!(out, "breaks = {}", self.breaks);
        for (w, r) in &self.window_rmse_px {
            let _ = writeln!(out, "window.{w}.reprojection_rmse_px = {r:.6}");
        }
        for (stage, s) in &self.stage_seconds {
            let _ = writeln!(out, "time.{stage}_s = {s:.3}");
        }
        let _ = writeln!(out, "{}", self.summary_line());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_format() {
        let r = EvalReport { ate_rmse_m: Some(0.0), breaks: 1, ..Default::default() };
        assert_eq!(r.summary_line(), "ATE_RMSE_M=0.000000 DEPTH_RMSE_CM=NA BREAKS=1");
        assert!(r.to_text().ends_with("ATE_RMSE_M=0.000000 DEPTH_RMSE_CM=NA BREAKS=1\n"));
    }
}

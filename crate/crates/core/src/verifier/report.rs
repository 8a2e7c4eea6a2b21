//! Verification outputs: the campaign report and the level-set slice grid
//! with CSV and SVG emitters.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorstOffender {
    pub x: Vec<f64>,
    pub theta: Vec<f64>,
    pub theta_rate: Vec<f64>,
    pub value: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerificationReport {
    pub samples: usize,
    pub violations: usize,
    pub violation_rate: f64,
    pub tolerance: f64,
    pub worst: Option<WorstOffender>,
    pub convergence_fraction: Option<f64>,
    pub monotonicity_fraction: Option<f64>,
    pub seed: u64,
}

/// Boolean membership grid over a two-axis slice of the state box.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoaGrid {
    pub axes: (usize, usize),
    pub lo: (f64, f64),
    pub hi: (f64, f64),
    pub resolution: (usize, usize),
    pub fixed: Vec<f64>,
    /// Row-major over (axis0 index, axis1 index).
    pub membership: Vec<bool>,
    pub rho: f64,
}

impl RoaGrid {
    pub fn member(&self, i: usize, j: usize) -> bool {
        self.membership[i * self.resolution.1 + j]
    }

    fn coord(&self, axis: u8, idx: usize) -> f64 {
        let (lo, hi, res) = match axis {
            0 => (self.lo.0, self.hi.0, self.resolution.0),
            _ => (self.lo.1, self.hi.1, self.resolution.1),
        };
        lo + (hi - lo) * idx as f64 / (res - 1) as f64
    }

    /// CSV with commented header metadata, then i,j,coord0,coord1,member.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "# axes={},{} lo={:.6},{:.6} hi={:.6},{:.6} resolution={}x{} rho={:.6} fixed={:?}\n",
            self.axes.0,
            self.axes.1,
            self.lo.0,
            self.lo.1,
            self.hi.0,
            self.hi.1,
            self.resolution.0,
            self.resolution.1,
            self.rho,
            self.fixed
        ));
        out.push_str("i,j,coord0,coord1,member\n");
        for i in 0..self.resolution.0 {
            for j in 0..self.resolution.1 {
                out.push_str(&format!(
                    "{},{},{:.9e},{:.9e},{}\n",
                    i,
                    j,
                    self.coord(0, i),
                    self.coord(1, j),
                    u8::from(self.member(i, j))
                ));
            }
        }
        out
    }

    /// Self-contained SVG heat slice: filled cells are level-set members.
    pub fn to_svg(&self) -> String {
        let (ni, nj) = self.resolution;
        let cell = 6.0_f64;
        let margin = 40.0;
        let w = margin * 2.0 + nj as f64 * cell;
        let h = margin * 2.0 + ni as f64 * cell;
        let mut svg = String::new();
        svg.push_str(&format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w:.0}\" height=\"{h:.0}\" viewBox=\"0 0 {w:.0} {h:.0}\">\n"
        ));
        svg.push_str(&format!(
            "<rect width=\"{w:.0}\" height=\"{h:.0}\" fill=\"white\"/>\n"
        ));
        for i in 0..ni {
            for j in 0..nj {
                if self.member(i, j) {
                    // axis0 grows upward: row 0 at the bottom.
                    let x = margin + j as f64 * cell;
                    let y = margin + (ni - 1 - i) as f64 * cell;
                    svg.push_str(&format!(
                        "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{cell:.1}\" height=\"{cell:.1}\" fill=\"#4682b4\"/>\n"
                    ));
                }
            }
        }
        svg.push_str(&format!(
            "<rect x=\"{m:.1}\" y=\"{m:.1}\" width=\"{gw:.1}\" height=\"{gh:.1}\" fill=\"none\" stroke=\"black\"/>\n",
            m = margin,
            gw = nj as f64 * cell,
            gh = ni as f64 * cell
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"12\" text-anchor=\"middle\">axis {} in [{:.2}, {:.2}]</text>\n",
            margin + nj as f64 * cell / 2.0,
            h - 10.0,
            self.axes.1,
            self.lo.1,
            self.hi.1
        ));
        svg.push_str(&format!(
            "<text x=\"12\" y=\"{:.1}\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 12 {:.1})\">axis {} in [{:.2}, {:.2}]</text>\n",
            margin + ni as f64 * cell / 2.0,
            margin + ni as f64 * cell / 2.0,
            self.axes.0,
            self.lo.0,
            self.hi.0
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"24\" font-size=\"12\" text-anchor=\"middle\">level set, rho = {:.3}</text>\n",
            w / 2.0,
            self.rho
        ));
        svg.push_str("</svg>\n");
        svg
    }
}

//! SVG rendering of grids, trajectories and highlighted states.

use std::fmt::Write as _;

use crate::gridworld::{Environment, StateId};
use crate::trajstore::Trajectory;
use crate::{Error, Result};

const CELL: f64 = 40.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

#[derive(Debug, Clone, Default)]
pub struct Annotations {
    pub highlight: Option<StateId>,
    pub title: Option<String>,
}

fn center(env: &Environment, s: StateId, shift: f64) -> (f64, f64) {
    let (r, c) = env.coords(s);
    (c as f64 * CELL + CELL / 2.0 + shift, r as f64 * CELL + CELL / 2.0 + shift + top_margin())
}

fn top_margin() -> f64 {
    24.0
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Cells are colored by kind, each trajectory is an arrowed polyline through
/// the cell centers it visits, and the highlighted state gets a thick frame.
pub fn render_grid(env: &Environment, trajectories: &[&Trajectory], ann: &Annotations) -> Result<String> {
    let n = env.n_states();
    for t in trajectories {
        if let Some(bad) = t.transitions.iter().flat_map(|x| [x.s, x.s_next]).find(|&s| s >= n) {
            return Err(Error::OffGrid(bad));
        }
    }
    let w = env.width() as f64 * CELL;
    let h = env.height() as f64 * CELL + top_margin();
    let mut svg = String::new();
    writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#).unwrap();
    svg.push_str("<defs>");
    for (i, color) in PALETTE.iter().enumerate() {
        write!(
            svg,
            r#"<marker id="arrow{i}" viewBox="0 0 10 10" refX="8" refY="5" markerWidth="5" markerHeight="5" orient="auto"><path d="M0,0 L10,5 L0,10 z" fill="{color}"/></marker>"#
        )
        .unwrap();
    }
    svg.push_str("</defs>\n");
    writeln!(svg, r#"<rect x="0" y="0" width="{w}" height="{h}" fill="white"/>"#).unwrap();
    if let Some(title) = &ann.title {
        writeln!(svg, r#"<text x="4" y="16" font-family="monospace" font-size="13">{}</text>"#, escape(title)).unwrap();
    }
    for s in 0..n {
        let (r, c) = env.coords(s);
        let fill = if env.is_obstacle(s) {
            "#404040"
        } else if env.is_goal(s) {
            "#4caf50"
        } else if env.is_lava(s) {
            "#e53935"
        } else {
            "#fafafa"
        };
        writeln!(
            svg,
            r##"<rect x="{}" y="{}" width="{CELL}" height="{CELL}" fill="{fill}" stroke="#999" stroke-width="1"/>"##,
            c as f64 * CELL,
            r as f64 * CELL + top_margin()
        )
        .unwrap();
    }
    let (sx, sy) = center(env, env.start(), 0.0);
    writeln!(svg, r#"<circle cx="{sx}" cy="{sy}" r="6" fill="none" stroke="black" stroke-width="2"/>"#).unwrap();
    if let Some(q) = ann.highlight {
        if q >= n {
            return Err(Error::OffGrid(q));
        }
        let (r, c) = env.coords(q);
        writeln!(
            svg,
            r##"<rect x="{}" y="{}" width="{CELL}" height="{CELL}" fill="none" stroke="#fbc02d" stroke-width="4"/>"##,
            c as f64 * CELL,
            r as f64 * CELL + top_margin()
        )
        .unwrap();
    }
    for (i, t) in trajectories.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let shift = (i as f64 - (trajectories.len() as f64 - 1.0) / 2.0) * 3.0;
        let pts: Vec<String> = t
            .visited()
            .iter()
            .map(|&s| {
                let (x, y) = center(env, s, shift);
                format!("{x:.1},{y:.1}")
            })
            .collect();
        writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2" stroke-opacity="0.85" marker-end="url(#arrow{})"/>"#,
            pts.join(" "),
            i % PALETTE.len()
        )
        .unwrap();
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

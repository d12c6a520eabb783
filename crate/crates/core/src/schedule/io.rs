//! Plain-text schedule tables with tab-separated fields.
//!
//! ```text
//! kgdiff-schedule v1
//! T  2000
//! family  linear
//! tau  0.00000001
//! alpha_min  0.9987
//! k_win  200
//! section  baseline
//! 0  1  1
//! 1  0.9292  0.9292
//! ...
//! section  token 17
//! ...
//! section  anchor
//! ...
//! ```
//!
//! Rows are `t<TAB>ᾱ_t<TAB>α_t`; floats use Rust's shortest round-trip form so a
//! reload is bit-exact.

use super::{AnchorSchedule, CumulativeSchedule, Shape, TokenSchedule, TokenWiseSchedule};
use crate::error::{Error, Result};
use std::collections::BTreeMap;
use std::fmt::Write as _;

const MAGIC: &str = "kgdiff-schedule v1";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleHeader {
    pub shape: Shape,
    pub tau: f64,
    pub k_win: usize,
}

fn write_rows(out: &mut String, sched: &CumulativeSchedule, coeffs: Option<&[f64]>) {
    for (t, v) in sched.values().iter().enumerate() {
        let c = if t == 0 { 1.0 } else { coeffs.map_or(v / sched.at(t - 1), |c| c[t - 1]) };
        let _ = writeln!(out, "{t}\t{v}\t{c}");
    }
}

pub fn write_schedule_table(
    header: &ScheduleHeader,
    sched: &TokenWiseSchedule,
    anchor: Option<&AnchorSchedule>,
) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{MAGIC}");
    let _ = writeln!(out, "T\t{}", sched.steps());
    let _ = writeln!(out, "family\t{}", header.shape.name());
    let _ = writeln!(out, "tau\t{}", header.tau);
    let _ = writeln!(out, "alpha_min\t{}", sched.alpha_min);
    let _ = writeln!(out, "k_win\t{}", header.k_win);
    let _ = writeln!(out, "section\tbaseline");
    write_rows(&mut out, &sched.baseline, None);
    for (id, ts) in &sched.per_token {
        let _ = writeln!(out, "section\ttoken {id}");
        write_rows(&mut out, &ts.cumulative, Some(&ts.coeffs));
    }
    if let Some(a) = anchor {
        let _ = writeln!(out, "section\tanchor");
        write_rows(&mut out, &a.0, None);
    }
    out
}

struct Section {
    name: String,
    values: Vec<f64>,
    coeffs: Vec<f64>,
}

fn num<T: std::str::FromStr>(s: &str, line: usize) -> Result<T> {
    s.parse().map_err(|_| Error::Record { line, msg: format!("bad number {s:?}") })
}

pub fn read_schedule_table(
    text: &str,
) -> Result<(ScheduleHeader, TokenWiseSchedule, Option<AnchorSchedule>)> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l == MAGIC => {}
        _ => return Err(Error::Format(format!("missing {MAGIC:?} header"))),
    }
    let mut meta = BTreeMap::new();
    let mut sections: Vec<Section> = Vec::new();
    for (i, line) in lines {
        let n = i + 1;
        let cols: Vec<&str> = line.split('\t').collect();
        match cols.as_slice() {
            ["section", name] => sections.push(Section { name: name.to_string(), values: vec![], coeffs: vec![] }),
            [key, value] if sections.is_empty() => {
                meta.insert(key.to_string(), value.to_string());
            }
            [t, v, c] => {
                let sec = sections.last_mut().ok_or(Error::Record { line: n, msg: "row before section".into() })?;
                let t: usize = num(t, n)?;
                if t != sec.values.len() {
                    return Err(Error::Record { line: n, msg: format!("expected t = {}", sec.values.len()) });
                }
                sec.values.push(num(v, n)?);
                if t > 0 {
                    sec.coeffs.push(num(c, n)?);
                }
            }
            [""] => {}
            _ => return Err(Error::Record { line: n, msg: "unrecognized line".into() }),
        }
    }
    let get = |k: &str| meta.get(k).ok_or_else(|| Error::Format(format!("missing header field {k:?}")));
    let steps: usize = num(get("T")?, 0)?;
    let header = ScheduleHeader { shape: Shape::parse(get("family")?)?, tau: num(get("tau")?, 0)?, k_win: num(get("k_win")?, 0)? };
    let alpha_min: f64 = num(get("alpha_min")?, 0)?;

    let mut baseline = None;
    let mut anchor = None;
    let mut per_token = BTreeMap::new();
    for sec in sections {
        if sec.values.len() != steps + 1 {
            return Err(Error::Format(format!("section {:?} has {} rows, expected {}", sec.name, sec.values.len(), steps + 1)));
        }
        if sec.name == "baseline" {
            baseline = Some(CumulativeSchedule::new(sec.values)?);
        } else if sec.name == "anchor" {
            anchor = Some(AnchorSchedule(CumulativeSchedule::new(sec.values)?));
        } else if let Some(id) = sec.name.strip_prefix("token ") {
            let id: u32 = num(id, 0)?;
            let cumulative = CumulativeSchedule::new(sec.values)?;
            per_token.insert(id, TokenSchedule { coeffs: sec.coeffs, cumulative });
        } else {
            return Err(Error::Format(format!("unknown section {:?}", sec.name)));
        }
    }
    let baseline = baseline.ok_or_else(|| Error::Format("missing baseline section".into()))?;
    Ok((header, TokenWiseSchedule { baseline, per_token, alpha_min }, anchor))
}

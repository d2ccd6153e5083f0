//! Recorded simulation output: bus voltages on a uniform time grid plus
//! named scalar channels (states, state rates, element currents, device
//! powers). Discontinuous switching events land exactly on grid points;
//! the sample at an event time holds the post-event state and the segment
//! list marks where each smooth stretch begins.

use num_complex::Complex64;
use std::io::{self, BufRead, Write};
use thiserror::Error;

use crate::network::NetworkCase;

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("trajectory data: {0}")]
    Parse(String),
}

/// One applied switching event. `sample` indexes the first post-event
/// sample; `max_voltage_jump` is the largest bus-voltage discontinuity the
/// event produced (NaN when the trajectory was read back from a file,
/// which does not store it).
#[derive(Debug, Clone)]
pub struct EventRecord {
    pub t: f64,
    pub sample: usize,
    pub description: String,
    pub max_voltage_jump: f64,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub case_name: String,
    pub dt: f64,
    pub times: Vec<f64>,
    /// Bus ids in case order; `v[bus][sample]` are the phasors (DC buses
    /// carry an exactly zero imaginary part).
    pub bus_ids: Vec<String>,
    pub v: Vec<Vec<Complex64>>,
    pub channels: Vec<(String, Vec<f64>)>,
    /// First sample index of every smooth segment, starting with 0.
    pub segments: Vec<usize>,
    pub events: Vec<EventRecord>,
}

impl Trajectory {
    pub fn n_samples(&self) -> usize {
        self.times.len()
    }

    pub fn channel(&self, name: &str) -> Option<&[f64]> {
        self.channels.iter().find(|(n, _)| n == name).map(|(_, d)| d.as_slice())
    }

    /// Half-open sample ranges of the smooth segments.
    pub fn segment_ranges(&self) -> Vec<(usize, usize)> {
        segment_ranges(&self.segments, self.n_samples())
    }

    /// Plain CSV: a `t` column, a magnitude and angle column per bus, then
    /// every channel. Fixed-format floats make repeated runs byte
    /// identical.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> io::Result<()> {
        let mut header = String::from("t");
        for id in &self.bus_ids {
            header.push_str(&format!(",v_mag:{id},v_ang:{id}"));
        }
        for (name, _) in &self.channels {
            header.push(',');
            header.push_str(name);
        }
        writeln!(out, "{header}")?;
        let mut line = String::new();
        for k in 0..self.n_samples() {
            line.clear();
            line.push_str(&fmt(self.times[k]));
            for vb in &self.v {
                line.push(',');
                line.push_str(&fmt(vb[k].norm()));
                line.push(',');
                line.push_str(&fmt(vb[k].arg()));
            }
            for (_, data) in &self.channels {
                line.push(',');
                line.push_str(&fmt(data[k]));
            }
            writeln!(out, "{line}")?;
        }
        Ok(())
    }

    /// Rebuild a trajectory from its CSV form. The case supplies what the
    /// file does not carry: bus order, the event list and the segment
    /// boundaries derived from it. Voltage-jump magnitudes are not stored,
    /// so the rebuilt event records carry NaN there.
    pub fn read_csv<R: BufRead>(input: R, case: &NetworkCase) -> Result<Self, TrajectoryError> {
        let mut lines = input.lines();
        let header = lines
            .next()
            .ok_or_else(|| TrajectoryError::Parse("empty file".into()))??;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.first() != Some(&"t") {
            return Err(TrajectoryError::Parse("first column must be t".into()));
        }
        let find = |name: &str| {
            cols.iter().position(|c| *c == name).ok_or_else(|| {
                TrajectoryError::Parse(format!("column {name:?} missing"))
            })
        };
        let mut mag_cols = Vec::new();
        let mut ang_cols = Vec::new();
        for b in &case.buses {
            mag_cols.push(find(&format!("v_mag:{}", b.id))?);
            ang_cols.push(find(&format!("v_ang:{}", b.id))?);
        }
        let voltage_col: Vec<bool> = cols
            .iter()
            .map(|c| c.starts_with("v_mag:") || c.starts_with("v_ang:"))
            .collect();
        let channel_cols: Vec<usize> =
            (1..cols.len()).filter(|i| !voltage_col[*i]).collect();
        let mut times = Vec::new();
        let mut v: Vec<Vec<Complex64>> = vec![Vec::new(); case.buses.len()];
        let mut channels: Vec<(String, Vec<f64>)> = channel_cols
            .iter()
            .map(|&i| (cols[i].to_string(), Vec::new()))
            .collect();
        for (row, line) in lines.enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != cols.len() {
                return Err(TrajectoryError::Parse(format!(
                    "row {} has {} fields, header has {}",
                    row + 2,
                    fields.len(),
                    cols.len()
                )));
            }
            let num = |i: usize| {
                fields[i].parse::<f64>().map_err(|_| {
                    TrajectoryError::Parse(format!(
                        "row {}, column {:?}: bad number {:?}",
                        row + 2,
                        cols[i],
                        fields[i]
                    ))
                })
            };
            times.push(num(0)?);
            for (b, vb) in v.iter_mut().enumerate() {
                vb.push(Complex64::from_polar(num(mag_cols[b])?, num(ang_cols[b])?));
            }
            for (slot, &i) in channels.iter_mut().zip(&channel_cols) {
                slot.1.push(num(i)?);
            }
        }
        if times.len() < 2 {
            return Err(TrajectoryError::Parse(
                "trajectory needs at least two samples".into(),
            ));
        }
        let dt = times[1] - times[0];
        if dt <= 0.0 {
            return Err(TrajectoryError::Parse("time column must increase".into()));
        }
        let segments = derive_segments(case, dt, times.len());
        let events = case
            .events
            .iter()
            .filter_map(|e| {
                let k = (e.t / dt).round() as usize;
                (k >= 1 && k < times.len()).then(|| EventRecord {
                    t: e.t,
                    sample: k,
                    description: case.describe_event(e),
                    max_voltage_jump: f64::NAN,
                })
            })
            .collect();
        Ok(Trajectory {
            case_name: case.name.clone(),
            dt,
            times,
            bus_ids: case.buses.iter().map(|b| b.id.clone()).collect(),
            v,
            channels,
            segments,
            events,
        })
    }
}

/// 12 significant digits; enough to reconstruct every quantity well below
/// the analysis tolerances while keeping files diffable.
fn fmt(x: f64) -> String {
    format!("{x:.11e}")
}

/// Start sample of every smooth segment for a trajectory of `n` samples at
/// step `dt`: sample 0 plus the nearest grid point of each case event that
/// falls inside the window.
pub fn derive_segments(case: &NetworkCase, dt: f64, n: usize) -> Vec<usize> {
    let mut seg = vec![0usize];
    for e in &case.events {
        let k = (e.t / dt).round() as usize;
        if k >= 1 && k < n && !seg.contains(&k) {
            seg.push(k);
        }
    }
    seg.sort_unstable();
    seg
}

/// Half-open `(start, end)` sample ranges given segment starts.
pub fn segment_ranges(segments: &[usize], n: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(segments.len());
    for (i, &s) in segments.iter().enumerate() {
        let end = segments.get(i + 1).copied().unwrap_or(n);
        out.push((s, end));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::parse_case;

    fn small_case(events: &str) -> NetworkCase {
        let json = format!(
            r#"{{
            "base_mva": 100.0, "f_nom_hz": 50.0,
            "buses": [
                {{"id": "a", "kind": "ac", "base_kv": 230.0}},
                {{"id": "b", "kind": "ac", "base_kv": 230.0}}
            ],
            "branches": [
                {{"id": "ab", "from": "a", "to": "b", "model": {{"type": "constant_y", "g": 1.0, "b": -5.0}}}}
            ],
            "devices": [
                {{"id": "g1", "bus": "a", "model": {{"type": "machine", "h": 3.0, "xd": 1.0, "xq": 0.8, "xd1": 0.3, "xq1": 0.4, "td01": 6.0, "tq01": 0.5, "pf": {{"mode": "slack", "v_set": 1.0}}}}}}
            ]{events}
        }}"#
        );
        parse_case(&json).unwrap()
    }

    fn sample_traj(case: &NetworkCase) -> Trajectory {
        let n = 5;
        let dt = 0.25;
        Trajectory {
            case_name: case.name.clone(),
            dt,
            times: (0..n).map(|k| k as f64 * dt).collect(),
            bus_ids: case.buses.iter().map(|b| b.id.clone()).collect(),
            v: vec![
                (0..n).map(|k| Complex64::from_polar(1.0 + 0.01 * k as f64, 0.1)).collect(),
                (0..n).map(|k| Complex64::from_polar(0.98, -0.05 * k as f64)).collect(),
            ],
            channels: vec![
                ("mach:g1:omega".into(), (0..n).map(|k| 1.0 + 1e-4 * k as f64).collect()),
                ("rl:x:i".into(), (0..n).map(|k| -0.3 + 0.07 * k as f64).collect()),
            ],
            segments: vec![0],
            events: Vec::new(),
        }
    }

    #[test]
    fn csv_round_trips_within_print_precision() {
        let case = small_case("");
        let traj = sample_traj(&case);
        let mut buf = Vec::new();
        traj.write_csv(&mut buf).unwrap();
        let back = Trajectory::read_csv(buf.as_slice(), &case).unwrap();
        assert_eq!(back.times.len(), traj.times.len());
        assert_eq!(back.bus_ids, traj.bus_ids);
        assert_eq!(back.channels.len(), traj.channels.len());
        assert_eq!(back.channels[0].0, "mach:g1:omega");
        for k in 0..traj.n_samples() {
            assert!((back.times[k] - traj.times[k]).abs() < 1e-12);
            for b in 0..2 {
                assert!((back.v[b][k] - traj.v[b][k]).norm() < 1e-10);
            }
            for c in 0..2 {
                assert!((back.channels[c].1[k] - traj.channels[c].1[k]).abs() < 1e-10);
            }
        }
        assert_eq!(back.segments, vec![0]);
    }

    #[test]
    fn writing_twice_is_byte_identical() {
        let case = small_case("");
        let traj = sample_traj(&case);
        let mut a = Vec::new();
        let mut b = Vec::new();
        traj.write_csv(&mut a).unwrap();
        traj.write_csv(&mut b).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn segments_follow_case_events() {
        let case = small_case(
            r#", "events": [{"t": 0.5, "action": "disconnect_branch", "target": "ab"}]"#,
        );
        assert_eq!(derive_segments(&case, 0.25, 5), vec![0, 2]);
        assert_eq!(segment_ranges(&[0, 2], 5), vec![(0, 2), (2, 5)]);
        // Event beyond the window contributes nothing.
        assert_eq!(derive_segments(&case, 0.1, 4), vec![0]);
        let traj = sample_traj(&case);
        let mut buf = Vec::new();
        traj.write_csv(&mut buf).unwrap();
        let back = Trajectory::read_csv(buf.as_slice(), &case).unwrap();
        assert_eq!(back.segments, vec![0, 2]);
        assert_eq!(back.events.len(), 1);
        assert_eq!(back.events[0].sample, 2);
        assert!(back.events[0].max_voltage_jump.is_nan());
    }

    #[test]
    fn missing_bus_column_is_reported() {
        let case = small_case("");
        let text = "t,v_mag:a,v_ang:a\n0.0,1.0,0.0\n";
        match Trajectory::read_csv(text.as_bytes(), &case) {
            Err(TrajectoryError::Parse(msg)) => assert!(msg.contains("v_mag:b"), "{msg}"),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}

use std::io::{Read, Write};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// States `x_0..x_T` and inputs `u_0..u_T` (the final input does not drive the
/// dynamics but is part of the objective sum).
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
}

#[derive(Serialize, Deserialize)]
struct TrajectoryJson {
    n: usize,
    m: usize,
    #[serde(rename = "T")]
    horizon: usize,
    states: Vec<Vec<f64>>,
    inputs: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn new(states: Vec<DVector<f64>>, inputs: Vec<DVector<f64>>) -> Result<Self> {
        if states.is_empty() {
            return Err(Error::InvalidParameter("trajectory needs at least one state".into()));
        }
        check_len("trajectory inputs", states.len(), inputs.len())?;
        let n = states[0].len();
        let m = inputs[0].len();
        for x in &states {
            check_len("trajectory state", n, x.len())?;
        }
        for u in &inputs {
            check_len("trajectory input", m, u.len())?;
        }
        Ok(Self { states, inputs })
    }

    pub fn horizon(&self) -> usize {
        self.states.len() - 1
    }

    pub fn state_dim(&self) -> usize {
        self.states[0].len()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs[0].len()
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = TrajectoryJson {
            n: self.state_dim(),
            m: self.input_dim(),
            horizon: self.horizon(),
            states: self.states.iter().map(|x| x.iter().cloned().collect()).collect(),
            inputs: self.inputs.iter().map(|u| u.iter().cloned().collect()).collect(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: TrajectoryJson = serde_json::from_str(text)?;
        check_len("trajectory states", doc.horizon + 1, doc.states.len())?;
        let traj = Self::new(
            doc.states.into_iter().map(DVector::from_vec).collect(),
            doc.inputs.into_iter().map(DVector::from_vec).collect(),
        )?;
        check_len("trajectory n", doc.n, traj.state_dim())?;
        check_len("trajectory m", doc.m, traj.input_dim())?;
        Ok(traj)
    }

    /// One row per step: `t, x_1..x_n, u_1..u_m`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["t".to_string()];
        header.extend((1..=self.state_dim()).map(|i| format!("x_{i}")));
        header.extend((1..=self.input_dim()).map(|i| format!("u_{i}")));
        w.write_record(&header)?;
        for (t, (x, u)) in self.states.iter().zip(&self.inputs).enumerate() {
            let mut row = vec![t.to_string()];
            row.extend(x.iter().chain(u.iter()).map(|v| v.to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let headers = r.headers()?.clone();
        let n = headers.iter().filter(|h| h.starts_with("x_")).count();
        let m = headers.iter().filter(|h| h.starts_with("u_")).count();
        let mut states = Vec::new();
        let mut inputs = Vec::new();
        for (row_idx, record) in r.records().enumerate() {
            let record = record?;
            check_len("csv row", 1 + n + m, record.len())?;
            let parse = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::InvalidParameter(format!("csv row {row_idx}: {e}")))
            };
            let t: usize = record[0]
                .trim()
                .parse()
                .map_err(|e| Error::InvalidParameter(format!("csv row {row_idx}: {e}")))?;
            check_len("csv step index", row_idx, t)?;
            let vals = record.iter().skip(1).map(parse).collect::<Result<Vec<_>>>()?;
            states.push(DVector::from_row_slice(&vals[..n]));
            inputs.push(DVector::from_row_slice(&vals[n..]));
        }
        Self::new(states, inputs)
    }
}

/// A contiguous slice `t_start..=t_end` of a trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
    /// `x_start..=x_end`
    pub states: Vec<DVector<f64>>,
    /// `u_start..=u_end`
    pub inputs: Vec<DVector<f64>>,
}

impl Segment {
    /// Any window with `start < end <= T`. IOC assembly needs `end - start >= 2`,
    /// which [`slice_segments`] enforces; identification alone accepts one step.
    pub fn from_trajectory(traj: &Trajectory, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > traj.horizon() {
            return Err(Error::InvalidWindow {
                start,
                end,
                horizon: traj.horizon(),
            });
        }
        Ok(Self {
            start,
            end,
            states: traj.states[start..=end].to_vec(),
            inputs: traj.inputs[start..=end].to_vec(),
        })
    }

    /// The whole trajectory as one segment.
    pub fn whole(traj: &Trajectory) -> Result<Self> {
        Self::from_trajectory(traj, 0, traj.horizon())
    }

    /// `tau = end - start`, the number of transitions.
    pub fn steps(&self) -> usize {
        self.end - self.start
    }

    pub fn state_dim(&self) -> usize {
        self.states[0].len()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs[0].len()
    }
}

/// Cuts IOC segments out of `traj`, in the order given. Windows may overlap.
pub fn slice_segments(traj: &Trajectory, windows: &[(usize, usize)]) -> Result<Vec<Segment>> {
    windows
        .iter()
        .map(|&(start, end)| {
            if end < start + 2 {
                return Err(Error::InvalidWindow {
                    start,
                    end,
                    horizon: traj.horizon(),
                });
            }
            Segment::from_trajectory(traj, start, end)
        })
        .collect()
}

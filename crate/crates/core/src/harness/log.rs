use std::io::{Read, Write};

use crate::error::{Error, Result};

pub const COLUMNS: [&str; 11] = [
    "kind",
    "global_step",
    "episode",
    "episode_return",
    "avg_return_100",
    "gen_loss",
    "inf_loss",
    "actor_loss",
    "critic_loss",
    "value_loss",
    "wall_time_s",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RowKind {
    /// A completed episode, with the mean losses of the updates made during it.
    Episode,
    /// The one-off block-model pretraining batch.
    Pretrain,
}

impl RowKind {
    pub fn name(self) -> &'static str {
        match self {
            RowKind::Episode => "episode",
            RowKind::Pretrain => "pretrain",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub kind: RowKind,
    pub global_step: u64,
    /// Completed episodes so far.
    pub episode: u64,
    pub episode_return: Option<f64>,
    pub avg_return_100: Option<f64>,
    pub gen_loss: Option<f64>,
    pub inf_loss: Option<f64>,
    pub actor_loss: Option<f64>,
    pub critic_loss: Option<f64>,
    pub value_loss: Option<f64>,
    pub wall_time_s: f64,
}

fn cell(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

/// Writes `rows` as CSV with a header line.
pub fn write_csv<W: Write>(out: W, rows: &[LogRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record(COLUMNS)?;
    for r in rows {
        w.write_record([
            r.kind.name().to_string(),
            r.global_step.to_string(),
            r.episode.to_string(),
            cell(r.episode_return),
            cell(r.avg_return_100),
            cell(r.gen_loss),
            cell(r.inf_loss),
            cell(r.actor_loss),
            cell(r.critic_loss),
            cell(r.value_loss),
            r.wall_time_s.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: Read>(input: R) -> Result<Vec<LogRow>> {
    let mut rd = csv::Reader::from_reader(input);
    let headers = rd.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != COLUMNS {
        return Err(Error::Data("unexpected run log columns".into()));
    }
    let opt = |s: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(|_| Error::Data(format!("bad number `{s}`")))
        }
    };
    let num = |s: &str| -> Result<u64> { s.parse().map_err(|_| Error::Data(format!("bad integer `{s}`"))) };
    let mut rows = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let kind = match &rec[0] {
            "episode" => RowKind::Episode,
            "pretrain" => RowKind::Pretrain,
            other => return Err(Error::Data(format!("unknown row kind `{other}`"))),
        };
        rows.push(LogRow {
            kind,
            global_step: num(&rec[1])?,
            episode: num(&rec[2])?,
            episode_return: opt(&rec[3])?,
            avg_return_100: opt(&rec[4])?,
            gen_loss: opt(&rec[5])?,
            inf_loss: opt(&rec[6])?,
            actor_loss: opt(&rec[7])?,
            critic_loss: opt(&rec[8])?,
            value_loss: opt(&rec[9])?,
            wall_time_s: opt(&rec[10])?.unwrap_or(0.0),
        });
    }
    Ok(rows)
}

/// Running means of update losses between two log rows.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossAccumulator {
    model: [f64; 2],
    model_n: u64,
    agent: [f64; 3],
    agent_n: u64,
}

impl LossAccumulator {
    pub fn add_model(&mut self, gen: f64, inf: f64) {
        self.model[0] += gen;
        self.model[1] += inf;
        self.model_n += 1;
    }

    pub fn add_agent(&mut self, actor: f64, critic: f64, value: f64) {
        self.agent[0] += actor;
        self.agent[1] += critic;
        self.agent[2] += value;
        self.agent_n += 1;
    }

    /// `(gen, inf)` and `(actor, critic, value)` means, then resets.
    #[allow(clippy::type_complexity)]
    pub fn take(&mut self) -> (Option<[f64; 2]>, Option<[f64; 3]>) {
        let m = (self.model_n > 0).then(|| self.model.map(|v| v / self.model_n as f64));
        let a = (self.agent_n > 0).then(|| self.agent.map(|v| v / self.agent_n as f64));
        *self = Self::default();
        (m, a)
    }

    pub fn is_empty(&self) -> bool {
        self.model_n == 0 && self.agent_n == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let rows = vec![
            LogRow {
                kind: RowKind::Pretrain,
                global_step: 11,
                episode: 0,
                episode_return: None,
                avg_return_100: None,
                gen_loss: Some(1.25),
                inf_loss: Some(-0.5),
                actor_loss: None,
                critic_loss: None,
                value_loss: None,
                wall_time_s: 0.0,
            },
            LogRow {
                kind: RowKind::Episode,
                global_step: 20,
                episode: 1,
                episode_return: Some(-1234.5678901234),
                avg_return_100: Some(-1234.5678901234),
                gen_loss: None,
                inf_loss: None,
                actor_loss: Some(0.1),
                critic_loss: Some(2e-9),
                value_loss: Some(3.0),
                wall_time_s: 0.0,
            },
        ];
        let mut buf = Vec::new();
        write_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("kind,global_step,episode,episode_return"));
        assert!(!text.contains('\r'));
        assert_eq!(read_csv(buf.as_slice()).unwrap(), rows);
    }

    #[test]
    fn accumulator_means() {
        let mut a = LossAccumulator::default();
        a.add_agent(1.0, 2.0, 3.0);
        a.add_agent(3.0, 4.0, 5.0);
        assert_eq!(a.take(), (None, Some([2.0, 3.0, 4.0])));
        assert!(a.is_empty());
    }
}

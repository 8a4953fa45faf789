//! A live classification stream: one engine, the query protocol, running
//! metrics, an append-only event log, and versioned snapshots.

use std::fs;
use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::active::{
    apply_feedback, entropy, query_threshold, should_query, ActiveConfig, QueryEvent, QueryMode, Resolution,
};
use crate::dpgmm::{ModelState, NIWHyper};
use crate::error::{Error, Result};
use crate::eval::{count_distinct, score, Engine};
use crate::gibbs::{gibbs_step, Assignment};
use crate::particle::{pf_init, Ensemble, ParticleConfig, ResampleScheme};
use crate::rng::{self, Purpose};

pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub engine: Engine,
    pub particles: usize,
    pub enp_threshold: Option<f64>,
    #[serde(default)]
    pub scheme: ResampleScheme,
    pub seed: u64,
    pub active: ActiveConfig,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            engine: Engine::Pf,
            particles: 100,
            enp_threshold: None,
            scheme: ResampleScheme::Systematic,
            seed: 0,
            active: ActiveConfig::default(),
        }
    }
}

impl SessionConfig {
    pub fn validate(&self) -> Result<()> {
        self.active.validate()?;
        if self.engine == Engine::Gibbs && self.active.mode != QueryMode::Off {
            return Err(Error::invalid("label queries need the particle engine"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "engine", rename_all = "kebab-case")]
pub enum EngineState {
    Gibbs { model: ModelState },
    Pf { ensemble: Ensemble },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "kebab-case")]
pub enum Event {
    RecordSeen {
        index: usize,
        id: String,
        x: Vec<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        truth: Option<String>,
    },
    Prediction {
        index: usize,
        label: String,
    },
    QueryIssued {
        index: usize,
        entropy: f64,
        threshold: f64,
    },
    FeedbackReceived {
        index: usize,
        label: String,
    },
    QuerySkipped {
        index: usize,
    },
    Resample {
        index: usize,
    },
    Snapshot {
        processed: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoggedEvent {
    pub seq: u64,
    #[serde(flatten)]
    pub event: Event,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogHeader {
    pub version: u32,
    pub seed: u64,
    pub config: SessionConfig,
}

/// Append-only record of what happened, with strictly increasing sequence
/// numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventLog {
    pub header: LogHeader,
    pub events: Vec<LoggedEvent>,
}

impl EventLog {
    pub fn new(config: SessionConfig) -> Self {
        Self {
            header: LogHeader {
                version: SNAPSHOT_VERSION,
                seed: config.seed,
                config,
            },
            events: Vec::new(),
        }
    }

    pub fn push(&mut self, event: Event) -> u64 {
        let seq = self.events.last().map_or(0, |e| e.seq + 1);
        self.events.push(LoggedEvent { seq, event });
        seq
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Header line, then one event per line.
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        serde_json::to_writer(&mut w, &self.header)?;
        w.write_all(b"\n")?;
        for e in &self.events {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(reader: R) -> Result<Self> {
        let mut lines = reader
            .lines()
            .enumerate()
            .filter(|(_, l)| l.as_ref().map_or(true, |l| !l.trim().is_empty()));
        let parse_err = |line: usize, e: serde_json::Error| Error::Parse {
            line: line + 1,
            message: e.to_string(),
        };
        let (i, first) = lines.next().ok_or_else(|| Error::invalid("event log is empty"))?;
        let header: LogHeader = serde_json::from_str(&first?).map_err(|e| parse_err(i, e))?;
        let mut log = Self {
            header,
            events: Vec::new(),
        };
        for (i, line) in lines {
            let e: LoggedEvent = serde_json::from_str(&line?).map_err(|e| parse_err(i, e))?;
            if log.events.last().is_some_and(|p| p.seq >= e.seq) {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("sequence number {} does not increase", e.seq),
                });
            }
            log.events.push(e);
        }
        Ok(log)
    }
}

/// One processed stream record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamEntry {
    pub id: String,
    /// The engine's own prediction.
    pub predicted: String,
    /// The prediction after any feedback.
    pub label: String,
    pub truth: Option<String>,
}

/// Answer to one observed record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub index: usize,
    pub id: String,
    pub prediction: String,
    pub posterior: Vec<(String, f64)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub query: Option<QueryEvent>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionMetrics {
    pub processed: usize,
    pub queries: usize,
    pub answered: usize,
    pub skipped: usize,
    pub pending: Option<usize>,
    /// Records with a known true label.
    pub labelled: usize,
    /// Mean-F1 over the labelled records, if any.
    pub mean_f1: Option<f64>,
    pub distinct: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub engine: Engine,
    pub processed: usize,
    pub class_count_min: usize,
    pub class_count_max: usize,
    pub enp: Option<f64>,
    pub particles: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    config: SessionConfig,
    state: EngineState,
    known: Vec<String>,
    entries: Vec<StreamEntry>,
    pending: Option<QueryEvent>,
    queries: usize,
    answered: usize,
    skipped: usize,
    log: EventLog,
}

impl Session {
    /// A fresh session over the given training data.
    pub fn new(
        config: SessionConfig,
        hyper: NIWHyper,
        train_x: &[DVector<f64>],
        train_labels: &[String],
    ) -> Result<Self> {
        config.validate()?;
        let model = ModelState::from_training(hyper, train_x, train_labels)?;
        let known: Vec<String> = model.labels().map(str::to_owned).collect();
        let state = match config.engine {
            Engine::Gibbs => EngineState::Gibbs { model },
            Engine::Pf => {
                let pcfg = ParticleConfig {
                    num_particles: config.particles,
                    enp_threshold: config.enp_threshold,
                    seed: config.seed,
                    scheme: config.scheme,
                };
                EngineState::Pf {
                    ensemble: pf_init(model.hyper.clone(), model.classes().to_vec(), &pcfg)?,
                }
            }
        };
        Ok(Self {
            config,
            state,
            known,
            entries: Vec::new(),
            pending: None,
            queries: 0,
            answered: 0,
            skipped: 0,
            log: EventLog::new(config),
        })
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn state(&self) -> &EngineState {
        &self.state
    }

    pub fn log(&self) -> &EventLog {
        &self.log
    }

    pub fn entries(&self) -> &[StreamEntry] {
        &self.entries
    }

    pub fn pending(&self) -> Option<&QueryEvent> {
        self.pending.as_ref()
    }

    pub fn known_labels(&self) -> &[String] {
        &self.known
    }

    pub fn processed(&self) -> usize {
        self.entries.len()
    }

    /// Classifies the next record. In oracle mode a query is answered at
    /// once from `truth` (or skipped without one); in interactive mode it
    /// stays pending and blocks further records until answered or skipped.
    pub fn observe(&mut self, id: &str, x: &DVector<f64>, truth: Option<&str>) -> Result<Observation> {
        if let Some(p) = &self.pending {
            return Err(Error::QueryPending { index: p.index });
        }
        let index = self.entries.len();
        let (prediction, posterior, resampled) = match &mut self.state {
            EngineState::Gibbs { model } => {
                let mut r = rng::stream(self.config.seed, Purpose::Gibbs, model.n_online_seen() as u64, 0);
                let step = gibbs_step(model, x, &mut r, Assignment::Sample)?;
                let mut dist = step.distribution();
                dist.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
                (step.label, dist, false)
            }
            EngineState::Pf { ensemble } => {
                let step = ensemble.step(x)?;
                (step.prediction.label, step.prediction.distribution, step.resampled)
            }
        };
        self.log.push(Event::RecordSeen {
            index,
            id: id.to_owned(),
            x: x.as_slice().to_vec(),
            truth: truth.map(str::to_owned),
        });
        self.log.push(Event::Prediction {
            index,
            label: prediction.clone(),
        });
        if resampled {
            self.log.push(Event::Resample { index });
        }
        self.entries.push(StreamEntry {
            id: id.to_owned(),
            predicted: prediction.clone(),
            label: prediction.clone(),
            truth: truth.map(str::to_owned),
        });

        let probs: Vec<f64> = posterior.iter().map(|(_, p)| *p).collect();
        let mut query = None;
        if self.config.engine == Engine::Pf && should_query(&probs, &self.config.active, self.queries) {
            let event = QueryEvent {
                record_id: id.to_owned(),
                index,
                distribution: posterior.clone(),
                entropy: entropy(&probs),
                threshold: query_threshold(&probs, self.config.active.tau),
                resolution: Resolution::Pending,
            };
            self.queries += 1;
            self.log.push(Event::QueryIssued {
                index,
                entropy: event.entropy,
                threshold: event.threshold,
            });
            self.pending = Some(event);
            if self.config.active.mode == QueryMode::Oracle {
                match truth {
                    Some(t) => {
                        self.answer(index, t)?;
                    }
                    None => self.skip(index)?,
                }
            }
            query = Some(self.last_query_state(index));
        }
        Ok(Observation {
            index,
            id: id.to_owned(),
            prediction: self.entries[index].label.clone(),
            posterior,
            query,
        })
    }

    fn last_query_state(&self, index: usize) -> QueryEvent {
        if let Some(p) = &self.pending {
            return p.clone();
        }
        let (entropy, threshold, distribution) = self
            .log
            .events
            .iter()
            .rev()
            .find_map(|e| match &e.event {
                Event::QueryIssued {
                    index: i,
                    entropy,
                    threshold,
                } if *i == index => Some((*entropy, *threshold, Vec::new())),
                _ => None,
            })
            .unwrap_or((0.0, 0.0, Vec::new()));
        let resolution = self
            .log
            .events
            .iter()
            .rev()
            .find_map(|e| match &e.event {
                Event::FeedbackReceived { index: i, label } if *i == index => Some(Resolution::Answered(label.clone())),
                Event::QuerySkipped { index: i } if *i == index => Some(Resolution::Skipped),
                _ => None,
            })
            .unwrap_or(Resolution::Pending);
        QueryEvent {
            record_id: self.entries[index].id.clone(),
            index,
            distribution,
            entropy,
            threshold,
            resolution,
        }
    }

    fn take_pending(&mut self, index: usize) -> Result<QueryEvent> {
        match &self.pending {
            Some(p) if p.index == index => Ok(self.pending.take().expect("checked above")),
            _ => Err(Error::StaleQuery { index }),
        }
    }

    /// Resolves the pending query with the true label.
    pub fn answer(&mut self, index: usize, label: &str) -> Result<()> {
        let label = label.trim();
        if label.is_empty() {
            return Err(Error::invalid("label is empty"));
        }
        self.take_pending(index)?;
        let EngineState::Pf { ensemble } = &mut self.state else {
            return Err(Error::invalid("label queries need the particle engine"));
        };
        let outcome = match apply_feedback(ensemble, index, label) {
            Ok(o) => o,
            Err(e) => {
                // Leave the query open so the caller may retry.
                self.restore_pending(index);
                return Err(e);
            }
        };
        self.answered += 1;
        self.entries[index].label = label.to_owned();
        self.entries[index].truth = Some(label.to_owned());
        self.log.push(Event::FeedbackReceived {
            index,
            label: label.to_owned(),
        });
        if outcome.resampled {
            self.log.push(Event::Resample { index });
        }
        Ok(())
    }

    fn restore_pending(&mut self, index: usize) {
        let mut q = self.last_query_state(index);
        q.resolution = Resolution::Pending;
        self.pending = Some(q);
    }

    /// Gives up on the pending query; the model's prediction stands.
    pub fn skip(&mut self, index: usize) -> Result<()> {
        self.take_pending(index)?;
        self.skipped += 1;
        self.log.push(Event::QuerySkipped { index });
        Ok(())
    }

    pub fn metrics(&self) -> SessionMetrics {
        let (pred, truth): (Vec<String>, Vec<String>) = self
            .entries
            .iter()
            .filter_map(|e| e.truth.clone().map(|t| (e.label.clone(), t)))
            .unzip();
        let labels: Vec<String> = self.entries.iter().map(|e| e.label.clone()).collect();
        SessionMetrics {
            processed: self.entries.len(),
            queries: self.queries,
            answered: self.answered,
            skipped: self.skipped,
            pending: self.pending.as_ref().map(|p| p.index),
            labelled: truth.len(),
            mean_f1: score(&pred, &truth, &self.known).ok(),
            distinct: count_distinct(&labels),
        }
    }

    pub fn summary(&self) -> ModelSummary {
        match &self.state {
            EngineState::Gibbs { model } => ModelSummary {
                engine: Engine::Gibbs,
                processed: self.entries.len(),
                class_count_min: model.classes().len(),
                class_count_max: model.classes().len(),
                enp: None,
                particles: None,
            },
            EngineState::Pf { ensemble } => {
                let (lo, hi) = ensemble.class_count_range();
                ModelSummary {
                    engine: Engine::Pf,
                    processed: self.entries.len(),
                    class_count_min: lo,
                    class_count_max: hi,
                    enp: Some(ensemble.enp()),
                    particles: Some(ensemble.num_particles()),
                }
            }
        }
    }

    /// Representative earlier records of a class: the most recent `k` stream
    /// records carrying that label.
    pub fn recent_members(&self, label: &str, k: usize) -> Vec<String> {
        self.entries
            .iter()
            .rev()
            .filter(|e| e.label == label)
            .take(k)
            .map(|e| e.id.clone())
            .collect()
    }

    /// Re-applies `log` to this (fresh) session. Records are observed again;
    /// answers and skips are re-applied where a query is pending. Events the
    /// session regenerates itself (predictions, resamples, oracle answers)
    /// are not replayed.
    pub fn replay(&mut self, log: &EventLog) -> Result<()> {
        if log.header.config != self.config {
            return Err(Error::invalid("event log was written with a different configuration"));
        }
        for e in &log.events {
            match &e.event {
                Event::RecordSeen { id, x, truth, .. } => {
                    self.observe(id, &DVector::from_column_slice(x), truth.as_deref())?;
                }
                Event::FeedbackReceived { index, label } if self.pending_index() == Some(*index) => {
                    self.answer(*index, label)?;
                }
                Event::QuerySkipped { index } if self.pending_index() == Some(*index) => {
                    self.skip(*index)?;
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn pending_index(&self) -> Option<usize> {
        self.pending.as_ref().map(|p| p.index)
    }

    /// Engine state, assignments and counters, ignoring the log.
    pub fn same_state(&self, other: &Session) -> bool {
        self.state == other.state
            && self.entries == other.entries
            && self.pending == other.pending
            && (self.queries, self.answered, self.skipped) == (other.queries, other.answered, other.skipped)
    }

    /// Writes a versioned snapshot atomically (temporary file, then rename).
    pub fn save(&mut self, path: &Path) -> Result<()> {
        self.log.push(Event::Snapshot {
            processed: self.entries.len(),
        });
        let body = serde_json::to_vec(&SnapshotRef {
            version: SNAPSHOT_VERSION,
            session: self,
        })?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, body)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    /// Snapshot as an in-memory JSON document.
    pub fn to_snapshot_bytes(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec(&SnapshotRef {
            version: SNAPSHOT_VERSION,
            session: self,
        })?)
    }

    pub fn from_snapshot_bytes(bytes: &[u8]) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_slice(bytes).map_err(|e| Error::Snapshot(format!("unreadable snapshot: {e}")))?;
        let version = value.get("version").and_then(serde_json::Value::as_u64);
        if version != Some(u64::from(SNAPSHOT_VERSION)) {
            return Err(Error::Snapshot(format!(
                "unsupported snapshot version {version:?}, expected {SNAPSHOT_VERSION}"
            )));
        }
        let snap: SnapshotOwned =
            serde_json::from_value(value).map_err(|e| Error::Snapshot(format!("malformed snapshot: {e}")))?;
        let s = snap.session;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_snapshot_bytes(&fs::read(path)?)
    }

    fn validate(&self) -> Result<()> {
        self.config.validate().map_err(|e| Error::Snapshot(e.to_string()))?;
        match &self.state {
            EngineState::Gibbs { model } => {
                model.validate().map_err(|e| Error::Snapshot(e.to_string()))?;
                if model.n_online_seen() != self.entries.len() {
                    return Err(Error::Snapshot("model and stream disagree on record count".into()));
                }
            }
            EngineState::Pf { ensemble } => {
                ensemble.validate()?;
                if ensemble.processed() != self.entries.len() {
                    return Err(Error::Snapshot("ensemble and stream disagree on record count".into()));
                }
            }
        }
        if self.pending.as_ref().is_some_and(|p| p.index + 1 != self.entries.len()) {
            return Err(Error::Snapshot("pending query is not for the latest record".into()));
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct SnapshotRef<'a> {
    version: u32,
    session: &'a Session,
}

#[derive(Deserialize)]
struct SnapshotOwned {
    #[allow(dead_code)]
    version: u32,
    session: Session,
}

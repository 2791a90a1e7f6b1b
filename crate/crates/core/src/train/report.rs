use std::io::Write;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Ctdg,
    Conda,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub cycle: usize,
    pub phase: Phase,
    pub epoch: usize,
    pub train_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_ap: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_auc: Option<f64>,
    pub val_ap: Option<f64>,
    pub val_auc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diffusion_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vae_loss: Option<f64>,
    pub wall_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub cycle: usize,
    pub phase: Phase,
    pub augmented: bool,
    pub epochs: usize,
    pub stopped_early: bool,
    /// Checksum of the frozen parameter group at phase start and end.
    pub frozen_start: String,
    pub frozen_end: String,
    /// `vae_loss / diffusion_loss` on the first batch of a Conda phase.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init_loss_ratio: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalRecord {
    pub test_ap: f64,
    pub test_auc: f64,
    pub best_val_ap: f64,
    pub best_epoch: usize,
    pub config: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Record {
    Epoch(EpochRecord),
    Phase(PhaseRecord),
    Final(FinalRecord),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub records: Vec<Record>,
}

impl RunReport {
    pub fn epochs(&self) -> impl Iterator<Item = &EpochRecord> {
        self.records.iter().filter_map(|r| match r {
            Record::Epoch(e) => Some(e),
            _ => None,
        })
    }

    pub fn phases(&self) -> impl Iterator<Item = &PhaseRecord> {
        self.records.iter().filter_map(|r| match r {
            Record::Phase(p) => Some(p),
            _ => None,
        })
    }

    pub fn final_record(&self) -> Option<&FinalRecord> {
        self.records.iter().rev().find_map(|r| match r {
            Record::Final(f) => Some(f),
            _ => None,
        })
    }

    pub fn phase_sequence(&self) -> Vec<Phase> {
        self.phases().map(|p| p.phase).collect()
    }

    /// One JSON object per line.
    pub fn write_jsonl<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut *out, r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("in-memory write");
        String::from_utf8(buf).expect("json is utf-8")
    }

    /// Epoch records only, as JSON lines.
    pub fn epochs_jsonl(&self) -> String {
        self.epochs()
            .map(|e| serde_json::to_string(&Record::Epoch(e.clone())).expect("serializable") + "\n")
            .collect()
    }

    pub fn parse_jsonl(text: &str) -> serde_json::Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<serde_json::Result<_>>()?;
        Ok(Self { records })
    }
}

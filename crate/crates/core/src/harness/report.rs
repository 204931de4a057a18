use std::fmt::Write as _;

use sha2::{Digest, Sha256};

use crate::scenes::ApReport;

/// `sha256("blob <len>\0" ++ bytes)`, the object id git's SHA-256 format
/// would give the file.
pub fn git_object_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex(&h.finalize())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean loss over the epoch's batches.
    pub train_loss: f64,
    /// `None` on epochs that were not validated.
    pub val_map: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentReport {
    /// The run's config in its text form.
    pub config: String,
    /// One record per epoch.
    pub epochs: Vec<EpochRecord>,
    /// Validation AP of the final weights.
    pub final_ap: ApReport,
    pub wall_clock_secs: f64,
    /// [`git_object_hash`] of the encoded checkpoint.
    pub checkpoint_hash: String,
}

impl ExperimentReport {
    pub fn final_map(&self) -> f64 {
        self.final_ap.map
    }

    /// `epoch,lr,train_loss,val_map`; an empty cell for skipped validation.
    pub fn history_csv(&self) -> String {
        let mut s = String::from("epoch,lr,train_loss,val_map\n");
        for r in &self.epochs {
            write!(s, "{},{:.6},{:.6},", r.epoch, r.lr, r.train_loss).unwrap();
            if let Some(m) = r.val_map {
                write!(s, "{m:.6}").unwrap();
            }
            s.push('\n');
        }
        s
    }

    /// Hash of everything but the wall-clock time: equal for runs that
    /// produced the same config, history, final AP and weights.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for part in [
            self.config.as_str(),
            &self.history_csv(),
            &self.final_ap.to_kv(),
            &self.checkpoint_hash,
        ] {
            h.update((part.len() as u64).to_le_bytes());
            h.update(part.as_bytes());
        }
        hex(&h.finalize())
    }

    /// Summary block in the `key = value` format.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        writeln!(s, "content_hash = {}", self.content_hash()).unwrap();
        writeln!(s, "checkpoint_hash = {}", self.checkpoint_hash).unwrap();
        writeln!(s, "epochs = {}", self.epochs.len()).unwrap();
        writeln!(s, "wall_clock_secs = {:.6}", self.wall_clock_secs).unwrap();
        if let Some(last) = self.epochs.last() {
            writeln!(s, "final.train_loss = {:.6}", last.train_loss).unwrap();
        }
        for line in self.final_ap.to_kv().lines() {
            writeln!(s, "final.{line}").unwrap();
        }
        s
    }
}

use crate::error::{Error, Result};
use crate::model::Logits;
use crate::tensor::DenseMatrix;

/// Latest raw logits per client over the whole unlabeled pool.
///
/// A slot is filled the first time a client's update arrives and overwritten
/// on every later arrival; nothing refreshes a slot in between.
#[derive(Debug, Clone)]
pub struct LogitsCache {
    pool_size: usize,
    classes: usize,
    slots: Vec<Option<Logits>>,
}

impl LogitsCache {
    pub fn new(num_clients: usize, pool_size: usize, classes: usize) -> Self {
        Self {
            pool_size,
            classes,
            slots: vec![None; num_clients],
        }
    }

    pub fn num_clients(&self) -> usize {
        self.slots.len()
    }

    pub fn pool_size(&self) -> usize {
        self.pool_size
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn store(&mut self, client: usize, logits: Logits) -> Result<()> {
        if client >= self.slots.len() {
            return Err(Error::config(format!(
                "client {client} outside cache of {} slots",
                self.slots.len()
            )));
        }
        if logits.rows() != self.pool_size || logits.classes() != self.classes {
            return Err(Error::dims(
                "LogitsCache::store",
                format!("{}x{}", self.pool_size, self.classes),
                format!("{}x{}", logits.rows(), logits.classes()),
            ));
        }
        self.slots[client] = Some(logits);
        Ok(())
    }

    pub fn get(&self, client: usize) -> Option<&Logits> {
        self.slots.get(client).and_then(Option::as_ref)
    }

    /// Clients with a stored slot, ascending.
    pub fn available(&self) -> impl Iterator<Item = usize> + '_ {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.as_ref().map(|_| i))
    }

    pub fn len(&self) -> usize {
        self.slots.iter().filter(|s| s.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.iter().all(Option::is_none)
    }

    /// Element-wise mean of the available clients' raw logits on `rows`.
    /// Clients are summed in ascending id order.
    pub fn ensemble(&self, rows: &[usize]) -> Result<Logits> {
        if let Some(&bad) = rows.iter().find(|&&r| r >= self.pool_size) {
            return Err(Error::dims("LogitsCache::ensemble", format!("row < {}", self.pool_size), bad));
        }
        let mut sum = DenseMatrix::zeros(rows.len(), self.classes);
        let mut count = 0usize;
        for logits in self.slots.iter().flatten() {
            count += 1;
            for (out_r, &src_r) in rows.iter().enumerate() {
                for (o, v) in sum.row_mut(out_r).iter_mut().zip(logits.row(src_r)) {
                    *o += v;
                }
            }
        }
        if count == 0 {
            return Err(Error::NoTeacherAvailable);
        }
        let inv = 1.0 / count as f64;
        sum.data_mut().iter_mut().for_each(|v| *v *= inv);
        Ok(Logits::new(sum))
    }
}

/// Teacher logits for a distillation batch: the mean over available clients.
pub fn ensemble_teacher_logits(cache: &LogitsCache, batch_rows: &[usize]) -> Result<Logits> {
    cache.ensemble(batch_rows)
}

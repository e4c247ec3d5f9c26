//! Model backends. Every backend maps a token sequence to one row of logits
//! per position.

mod count;
mod mock;
pub mod protocol;
mod remote;

use std::sync::Arc;

pub use count::{training_tuples, CountModel, CountModelConfig, TrainingProvenance};
pub use mock::{MockFallback, MockTableModel};
pub use remote::{Endpoint, RemoteModel};

use crate::error::{invalid_input, Result};
use crate::types::{LogitMatrix, TokenSeq, Vocab};

/// The denoiser: given the current (partially masked) sequence, produce
/// logits over the vocabulary for every position.
///
/// Implementations must be deterministic: the same sequence yields the same
/// logits.
pub trait Model: Send + Sync {
    fn vocab(&self) -> &Vocab;

    fn logits(&self, seq: &TokenSeq) -> Result<LogitMatrix>;
}

impl<M: Model + ?Sized> Model for &M {
    fn vocab(&self) -> &Vocab {
        (**self).vocab()
    }

    fn logits(&self, seq: &TokenSeq) -> Result<LogitMatrix> {
        (**self).logits(seq)
    }
}

impl<M: Model + ?Sized> Model for Box<M> {
    fn vocab(&self) -> &Vocab {
        (**self).vocab()
    }

    fn logits(&self, seq: &TokenSeq) -> Result<LogitMatrix> {
        (**self).logits(seq)
    }
}

impl<M: Model + ?Sized> Model for Arc<M> {
    fn vocab(&self) -> &Vocab {
        (**self).vocab()
    }

    fn logits(&self, seq: &TokenSeq) -> Result<LogitMatrix> {
        (**self).logits(seq)
    }
}

/// Calls the model after validating the input, then checks that the output
/// has shape `len(seq) x vocab.size` and is finite.
pub fn checked_logits<M: Model + ?Sized>(model: &M, seq: &TokenSeq) -> Result<LogitMatrix> {
    let vocab = model.vocab();
    seq.validate(vocab)?;
    let logits = model.logits(seq)?;
    if logits.shape() != (seq.len(), vocab.size()) {
        return Err(invalid_input(format!(
            "model returned {}x{} logits for a {}-token sequence over {} ids",
            logits.rows(),
            logits.cols(),
            seq.len(),
            vocab.size()
        )));
    }
    logits.check_finite("model logits")?;
    Ok(logits)
}

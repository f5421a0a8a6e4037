//! Central finite-difference check of the analytic gradients on a tiny
//! double-precision model.

use crate::attention::AttentionMode;
use crate::data::{Batch, SentencePair};
use crate::error::Result;
use crate::model::{Model, ModelConfig};
use crate::parallel::Execution;
use crate::rng;
use crate::synthetic::random_sequence;

pub const TOLERANCE: f64 = 1e-3;
pub const STEP: f64 = 1e-4;
/// Floor on the relative-error denominator so that entries whose gradient
/// is essentially zero are judged on absolute error instead.
pub const DENOMINATOR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub mode: AttentionMode,
    pub seed: u64,
    pub step: f64,
    pub init_scale: f64,
    /// Test hook: perturb the analytic gradient of this parameter group.
    pub corrupt: Option<String>,
}

impl GradcheckOptions {
    pub fn new(mode: AttentionMode) -> Self {
        GradcheckOptions {
            mode,
            seed: 17,
            step: STEP,
            init_scale: 0.3,
            corrupt: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupError {
    pub name: String,
    pub size: usize,
    pub max_relative_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub mode: AttentionMode,
    pub groups: Vec<GroupError>,
}

impl GradcheckReport {
    pub fn max_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_relative_error).fold(0.0, f64::max)
    }

    pub fn offenders(&self) -> Vec<&GroupError> {
        self.groups
            .iter()
            .filter(|g| !(g.max_relative_error < TOLERANCE))
            .collect()
    }

    pub fn passed(&self) -> bool {
        self.offenders().is_empty()
    }

    pub fn render(&self) -> String {
        let mut s = format!("gradcheck {}\n", self.mode);
        for g in &self.groups {
            let flag = if g.max_relative_error < TOLERANCE { "ok" } else { "FAIL" };
            s.push_str(&format!(
                "  {:<16} {:>5} values  max rel err {:.3e}  {flag}\n",
                g.name, g.size, g.max_relative_error
            ));
        }
        s
    }
}

/// V=7, H=4, two layers on each side.
pub fn tiny_config(mode: AttentionMode) -> ModelConfig {
    ModelConfig {
        source_vocab_size: 7,
        target_vocab_size: 7,
        embedding_dim: 4,
        hidden_dim: 4,
        encoder_layers: 2,
        decoder_layers: 2,
        attention_mode: mode,
        dropout_rate: 0.0,
    }
}

pub fn tiny_batch(seed: u64) -> Batch {
    let mut r = rng::stream(seed, &[0x4743]);
    let pairs: Vec<SentencePair> = [(3, 3), (4, 2)]
        .iter()
        .map(|&(m, n)| SentencePair::new(random_sequence(&mut r, 7, m), &random_sequence(&mut r, 7, n)))
        .collect();
    Batch::from_pairs(&pairs.iter().collect::<Vec<_>>())
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOMINATOR_FLOOR)
}

/// Compares every analytic gradient entry of `model` on `batch` against a
/// central difference of the batch loss.
pub fn check_model(
    model: &mut Model<f64>,
    batch: &Batch,
    step: f64,
    corrupt: Option<&str>,
) -> Result<Vec<GroupError>> {
    let (_, grads) = model.batch_loss_and_grads(batch, 0.0, 0, 0, Execution::Sequential)?;
    let ids: Vec<_> = model.params().ids().collect();
    let mut groups = Vec::with_capacity(ids.len());
    for id in ids {
        let name = model.params().get(id).name.clone();
        let size = model.params().get(id).value.len();
        let mut analytic = grads
            .get(id)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; size]);
        if corrupt == Some(name.as_str()) {
            for a in &mut analytic {
                *a = *a * 1.5 + 0.1;
            }
        }
        let mut worst = 0.0f64;
        for (i, &a) in analytic.iter().enumerate() {
            let orig = model.params().get(id).value.data()[i];
            model.params_mut().get_mut(id).value.data_mut()[i] = orig + step;
            let plus = model.batch_loss(batch)?;
            model.params_mut().get_mut(id).value.data_mut()[i] = orig - step;
            let minus = model.batch_loss(batch)?;
            model.params_mut().get_mut(id).value.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            worst = worst.max(relative_error(a, numeric));
        }
        groups.push(GroupError {
            name,
            size,
            max_relative_error: worst,
        });
    }
    Ok(groups)
}

pub fn gradcheck(options: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut model = Model::<f64>::init_uniform(tiny_config(options.mode), options.seed, options.init_scale)?;
    let batch = tiny_batch(options.seed);
    let groups = check_model(&mut model, &batch, options.step, options.corrupt.as_deref())?;
    Ok(GradcheckReport {
        mode: options.mode,
        groups,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!(relative_error(1e-12, 0.0) < 1e-5);
    }

    #[test]
    fn corrupted_group_is_reported() {
        let mut o = GradcheckOptions::new(AttentionMode::Baseline);
        o.corrupt = Some("out.ws".into());
        let r = gradcheck(&o).unwrap();
        assert!(!r.passed());
        assert_eq!(r.offenders().len(), 1);
        assert_eq!(r.offenders()[0].name, "out.ws");
    }
}

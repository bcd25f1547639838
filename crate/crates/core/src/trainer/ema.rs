use crate::error::{bail, Result};
use crate::tensor::{ParamSet, Tensor};

/// Teacher parameters tracking the student by exponential moving average.
///
/// The decay at step `s` is `min(1 - 1/(s + 1), t_ema)`, so the first
/// update copies the student and early updates form a running mean.
#[derive(Clone, Debug)]
pub struct EmaState {
    pub step: u64,
    pub t_ema: f64,
    /// Teacher parameters; constants, never part of a gradient graph.
    pub teacher: ParamSet,
}

impl EmaState {
    pub fn new(student: &ParamSet, t_ema: f64) -> Result<EmaState> {
        if !(t_ema > 0.0 && t_ema < 1.0) {
            bail!(Config, "t_ema must lie in (0, 1), got {t_ema}");
        }
        Ok(EmaState { step: 0, t_ema, teacher: constants(student)? })
    }

    pub fn decay(&self) -> f64 {
        (1.0 - 1.0 / (self.step as f64 + 1.0)).min(self.t_ema)
    }

    /// `teacher <- a * teacher + (1 - a) * student`, then `step += 1`.
    pub fn update(&mut self, student: &ParamSet) -> Result<()> {
        if !self.teacher.shape_compatible(student) {
            bail!(Contract, "teacher and student parameter sets differ in names or shapes");
        }
        let a = self.decay();
        let mut next = ParamSet::new();
        for ((name, t), (_, s)) in self.teacher.iter().zip(student.iter()) {
            let data = t.data().iter().zip(s.data()).map(|(t, s)| a * t + (1.0 - a) * s).collect();
            next.insert_tensor(name, Tensor::new(t.shape(), data)?)?;
        }
        self.teacher = next;
        self.step += 1;
        Ok(())
    }
}

/// Non-trainable copy of a parameter set.
pub fn constants(params: &ParamSet) -> Result<ParamSet> {
    let mut out = ParamSet::new();
    for (name, t) in params.iter() {
        out.insert_tensor(name, Tensor::new(t.shape(), t.data().to_vec())?)?;
    }
    Ok(out)
}

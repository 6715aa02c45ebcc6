use crate::error::{Error, Result};
use crate::model::Network;

/// Exponential moving average of a student network's parameters and running
/// statistics. It never receives gradients.
#[derive(Clone)]
pub struct TeacherState {
    pub net: Network,
}

impl TeacherState {
    pub fn new(student: &Network) -> Self {
        TeacherState { net: student.clone() }
    }
}

fn blend(a: &mut [f64], b: &[f64], decay: f64) {
    for (x, y) in a.iter_mut().zip(b) {
        *x = decay * *x + (1.0 - decay) * y;
    }
}

/// `θ_T ← decay·θ_T + (1−decay)·θ_S` on every parameter and statistic.
/// Statistics the teacher has not seen yet are copied from the student.
pub fn ema_update(teacher: &mut TeacherState, student: &Network, decay: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&decay) {
        return Err(Error::Param(format!("EMA decay {decay} outside [0, 1]")));
    }
    teacher.net.check_same_structure(student)?;
    for (t, s) in teacher.net.params_mut().into_iter().zip(student.params()) {
        blend(t.value.data_mut(), s.value.data(), decay);
    }
    for (t, s) in teacher.net.running_mut().into_iter().zip(student.running()) {
        match (&mut t.groups, &s.groups) {
            (_, None) => {}
            (None, Some(src)) => t.groups = Some(src.clone()),
            (Some(dst), Some(src)) => {
                if dst.len() != src.len() {
                    return Err(Error::State("running statistics differ in group count".into()));
                }
                for (a, b) in dst.iter_mut().zip(src) {
                    blend(&mut a.mu, &b.mu, decay);
                    blend(a.sigma.data_mut(), b.sigma.data(), decay);
                }
            }
        }
    }
    Ok(())
}

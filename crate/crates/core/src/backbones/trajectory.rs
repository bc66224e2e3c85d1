//! LSTM encoder-decoder over agent displacements.

use super::{BackboneSpec, Ctx, TaskShape};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{Linear, LstmCell};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub(crate) struct TrajNet {
    encoder: LstmCell,
    decoder: LstmCell,
    out: Linear,
    task: TaskShape,
}

impl TrajNet {
    pub fn new(
        store: &mut ParamStore,
        spec: &BackboneSpec,
        task: &TaskShape,
        extra: usize,
    ) -> Result<Self> {
        if task.history < 2 {
            return Err(Error::config(
                "trajectory history needs at least 2 positions",
            ));
        }
        let d = spec.d_h;
        Ok(TrajNet {
            encoder: LstmCell::new(store, "lstm_traj.encoder", 2, extra, d)?,
            decoder: LstmCell::new(store, "lstm_traj.decoder", 2, extra, d)?,
            out: Linear::new(store, "lstm_traj.out", d, 2, true)?,
            task: task.clone(),
        })
    }

    /// `[L_h, 2]` world positions to `[L_f, 2]` world positions.
    ///
    /// The network sees displacements divided by `position_scale` and rolls
    /// the decoder forward on its own predicted displacements.
    pub fn forward<'t>(&self, ctx: &Ctx<'_, 't>, positions: &Tensor) -> Result<Var<'t>> {
        let (tape, store) = (ctx.tape, ctx.store);
        let scale = self.task.position_scale;
        let p = positions.data();
        let steps = self.task.history;
        let step_input = |dx: Var<'t>| ctx.augment(dx);
        let mut state = self.encoder.zero_state(tape)?;
        let mut last = None;
        for t in 1..steps {
            let d = [
                (p[2 * t] - p[2 * t - 2]) / scale,
                (p[2 * t + 1] - p[2 * t - 1]) / scale,
            ];
            let dx = tape.constant(&Tensor::new(vec![1, 2], d.to_vec())?);
            state = self.encoder.step(tape, store, step_input(dx)?, &state)?;
            last = Some(dx);
        }
        let mut input = last.expect("history has at least two positions");
        let origin = tape.constant(&Tensor::new(
            vec![1, 2],
            p[2 * (steps - 1)..2 * steps].to_vec(),
        )?);
        let mut position = origin;
        let mut outputs = Vec::with_capacity(self.task.horizon);
        for _ in 0..self.task.horizon {
            state = self.decoder.step(tape, store, step_input(input)?, &state)?;
            let disp = self.out.forward(tape, store, state.h)?;
            position = position.add(disp.scale(scale))?;
            outputs.push(position);
            input = disp;
        }
        tape.concat(&outputs, 0)
    }
}

//! Train the query-conditioned flow network, watching the loss and the
//! mixture channels of its input.

mod common;

use rfsep::condition::channel_slice;
use rfsep::train::{train_vfield, ModelKind, StepObservation};

fn main() -> anyhow::Result<()> {
    let (cfg, layout) = common::setup()?;
    common::ensure_codec(&cfg, &layout)?;
    let mut first = None;
    let mut last = 0.0;
    let mut verbatim = true;
    let mut obs = |o: &StepObservation| {
        first.get_or_insert(o.data.loss_value);
        last = o.data.loss_value;
        let c = o.zm.shape()[1];
        verbatim &= channel_slice(&o.data.net_input, c, 2 * c).map(|b| &b == o.zm).unwrap_or(false);
    };
    train_vfield(ModelKind::Flow, &cfg, &layout, &common::opts(), Some(&mut obs))?;
    println!("flow loss {:.4} -> {last:.4}", first.unwrap_or(f64::NAN));
    println!("mixture channels passed through untouched at every step: {verbatim}");
    Ok(())
}

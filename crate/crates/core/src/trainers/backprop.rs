use std::time::Instant;

use super::{
    check_finite, check_params, flat_grad, shuffled_batches, Adam, TrainConfig, TrainTrace,
    Trained,
};
use crate::autodiff::{Graph, ParamVector};
use crate::data::SampleSource;
use crate::error::{Error, Result};
use crate::models::{kaiming_uniform, param_nodes, Architecture, Dropout};
use crate::rng::{SeedStreams, Stream};

/// Point-estimate training: Kaiming-uniform init, dropout on hidden layers,
/// Adam on the summed Huber loss of each minibatch.
pub fn train_backprop<A: Architecture>(
    arch: &A,
    data: &dyn SampleSource,
    cfg: &TrainConfig,
) -> Result<Trained<ParamVector>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let streams = SeedStreams::new(cfg.seed);
    let mut params = kaiming_uniform(arch.layout(), &mut streams.stream(Stream::Init));
    let mut shuffle = streams.stream(Stream::Shuffle);
    let mut dropout_rng = streams.stream(Stream::Dropout);
    let mut adam = Adam::new(params.len());
    let mut trace = TrainTrace::default();
    let start = Instant::now();

    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate_at(epoch);
        let mut total = 0.0;
        for (b, idx) in shuffled_batches(data.len(), cfg.batch_size, &mut shuffle)
            .into_iter()
            .enumerate()
        {
            let (x, y) = data.gather(&idx);
            let mut g = Graph::new();
            let nodes = param_nodes(&mut g, &params, true);
            let input = g.constant(x);
            let target = g.constant(crate::autodiff::Tensor::vector(y));
            let mut drop = Dropout {
                p: cfg.dropout,
                rng: &mut dropout_rng,
            };
            let pred = arch.build(&mut g, &nodes, input, Some(&mut drop))?;
            let loss_node = g.huber(pred, target, cfg.huber_delta)?;
            let loss = g
                .forward(loss_node)
                .map_err(|e| Error::Diverged {
                    epoch,
                    batch: b,
                    msg: e.to_string(),
                })?
                .item();
            check_finite(loss, epoch, b)?;
            g.backward(loss_node)?;
            let grad = flat_grad(&g, &nodes, params.len());
            adam.step(params.values_mut(), &grad, lr);
            check_params(&params, epoch, b)?;
            total += loss;
        }
        trace.record("bp", epoch, total / data.len() as f64);
    }
    log::debug!("bp finished in {:.1}s", start.elapsed().as_secs_f64());
    Ok(Trained {
        result: params,
        trace,
    })
}

//! Convolutional feature extractor (theta).
//!
//! Four blocks of [3x3 conv, BN, ReLU, 2x2 max-pool]; Conv64F uses 64
//! filters per block, the test-speed conv32f-tiny variant uses 32.

use ndarray::{Array2, Array4};
use rand::Rng;

use crate::nn::layers::{
    bn4_backward, bn4_eval, bn4_train, conv2d_forward, conv2d_backward, maxpool2_backward,
    maxpool2_forward, relu_backward, relu_forward, update_running_stats, BnBatchStats, BnCache4,
};
use crate::nn::params::{BufferStore, BufId, Init, ParamBuilder, ParamGroup, ParamId, ParamStore};
use crate::scalar::Scalar;

const KERNEL: usize = 3;
const PAD: usize = 1;

#[derive(Clone, Debug)]
pub struct ConvBlockArch {
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    pub bn_gamma: ParamId,
    pub bn_beta: ParamId,
    pub bn_mean: BufId,
    pub bn_var: BufId,
}

#[derive(Clone, Debug)]
pub struct ExtractorArch {
    pub blocks: Vec<ConvBlockArch>,
    pub feature_dim: usize,
}

pub struct BlockCache<S: Scalar> {
    x: Array4<S>,
    bn: BnCache4<S>,
    relu_mask: Array4<bool>,
    pool_idx: Array4<usize>,
    pool_in: (usize, usize, usize, usize),
}

pub struct ExtractorTape<S: Scalar> {
    blocks: Vec<BlockCache<S>>,
    out_dim: (usize, usize, usize, usize),
}

/// One `(buffer ids, batch stats)` record per BN layer of a training
/// forward; applied to a [`BufferStore`] by [`apply_bn_updates`].
pub struct BnUpdate {
    pub mean_buf: BufId,
    pub var_buf: BufId,
    pub stats: BnBatchStats,
}

pub fn apply_bn_updates(bufs: &mut BufferStore, updates: &[BnUpdate]) {
    for u in updates {
        let (mean, var) = bufs.get_pair_mut(u.mean_buf, u.var_buf);
        update_running_stats(mean, var, &u.stats);
    }
}

impl ExtractorArch {
    pub fn build<R: Rng>(
        builder: &mut ParamBuilder,
        bufs: &mut BufferStore,
        in_channels: usize,
        filters: usize,
        n_blocks: usize,
        feature_dim: usize,
        rng: &mut R,
    ) -> Self {
        let mut blocks = Vec::with_capacity(n_blocks);
        let mut cin = in_channels;
        for i in 0..n_blocks {
            let prefix = format!("theta.block{i}");
            let conv_w = builder.add(
                format!("{prefix}.conv.weight"),
                ParamGroup::Theta,
                &[filters, cin, KERNEL, KERNEL],
                Init::HeNormal { fan_in: cin * KERNEL * KERNEL },
                rng,
            );
            let conv_b = builder.add(
                format!("{prefix}.conv.bias"),
                ParamGroup::Theta,
                &[filters],
                Init::Zeros,
                rng,
            );
            let bn_gamma = builder.add(
                format!("{prefix}.bn.gamma"),
                ParamGroup::Theta,
                &[filters],
                Init::Ones,
                rng,
            );
            let bn_beta = builder.add(
                format!("{prefix}.bn.beta"),
                ParamGroup::Theta,
                &[filters],
                Init::Zeros,
                rng,
            );
            let bn_mean = bufs.add(format!("{prefix}.bn.running_mean"), filters, 0.0);
            let bn_var = bufs.add(format!("{prefix}.bn.running_var"), filters, 1.0);
            blocks.push(ConvBlockArch {
                conv_w,
                conv_b,
                bn_gamma,
                bn_beta,
                bn_mean,
                bn_var,
            });
            cin = filters;
        }
        ExtractorArch {
            blocks,
            feature_dim,
        }
    }

    /// Training-mode forward with tape; batch statistics are returned,
    /// not applied.
    pub fn forward_train<S: Scalar>(
        &self,
        ps: &ParamStore<S>,
        x: &Array4<S>,
        updates: &mut Vec<BnUpdate>,
    ) -> (Array2<S>, ExtractorTape<S>) {
        let mut cur = x.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let conv_in = cur;
            let y = conv2d_forward(&conv_in, ps.a4(blk.conv_w), ps.a1(blk.conv_b), PAD);
            let (y, bn_cache, stats) = bn4_train(&y, ps.a1(blk.bn_gamma), ps.a1(blk.bn_beta));
            updates.push(BnUpdate {
                mean_buf: blk.bn_mean,
                var_buf: blk.bn_var,
                stats,
            });
            let (y, mask) = relu_forward(&y);
            let pool_in = y.dim();
            let (y, idx) = maxpool2_forward(&y);
            caches.push(BlockCache {
                x: conv_in,
                bn: bn_cache,
                relu_mask: mask,
                pool_idx: idx,
                pool_in,
            });
            cur = y;
        }
        let out_dim = cur.dim();
        (flatten_features(cur), ExtractorTape { blocks: caches, out_dim })
    }

    /// Evaluation-mode forward: running statistics, no caches, no
    /// mutation.
    pub fn forward_eval<S: Scalar>(
        &self,
        ps: &ParamStore<S>,
        bufs: &BufferStore,
        x: &Array4<S>,
    ) -> Array2<S> {
        let mut cur = x.clone();
        for blk in &self.blocks {
            let y = conv2d_forward(&cur, ps.a4(blk.conv_w), ps.a1(blk.conv_b), PAD);
            let y = bn4_eval(
                &y,
                ps.a1(blk.bn_gamma),
                ps.a1(blk.bn_beta),
                bufs.get(blk.bn_mean),
                bufs.get(blk.bn_var),
            );
            let (y, _) = relu_forward(&y);
            let (y, _) = maxpool2_forward(&y);
            cur = y;
        }
        flatten_features(cur)
    }

    /// Backprop through the tape; parameter gradients are accumulated
    /// into `grads` and the input gradient is returned.
    pub fn backward<S: Scalar>(
        &self,
        ps: &ParamStore<S>,
        tape: &ExtractorTape<S>,
        gfeat: &Array2<S>,
        grads: &mut ParamStore<S>,
    ) -> Array4<S> {
        let mut g = unflatten_features(gfeat, tape.out_dim);
        for (blk, cache) in self.blocks.iter().zip(tape.blocks.iter()).rev() {
            let g_pool = maxpool2_backward(&cache.pool_idx, cache.pool_in, &g);
            let g_relu = relu_backward(&cache.relu_mask, &g_pool);
            let (g_bn, dgamma, dbeta) = bn4_backward(&cache.bn, ps.a1(blk.bn_gamma), &g_relu);
            accumulate(grads.get_mut(blk.bn_gamma), dgamma.view().into_dyn());
            accumulate(grads.get_mut(blk.bn_beta), dbeta.view().into_dyn());
            let (g_x, dw, db) = conv2d_backward(&cache.x, ps.a4(blk.conv_w), &g_bn, PAD);
            accumulate(grads.get_mut(blk.conv_w), dw.view().into_dyn());
            accumulate(grads.get_mut(blk.conv_b), db.view().into_dyn());
            g = g_x;
        }
        g
    }
}

fn flatten_features<S: Scalar>(x: Array4<S>) -> Array2<S> {
    let (b, c, h, w) = x.dim();
    x.into_shape_with_order((b, c * h * w)).unwrap()
}

fn unflatten_features<S: Scalar>(
    g: &Array2<S>,
    dim: (usize, usize, usize, usize),
) -> Array4<S> {
    g.clone().into_shape_with_order(dim).unwrap()
}

pub(crate) fn accumulate<S: Scalar>(
    dst: &mut ndarray::ArrayD<S>,
    src: ndarray::ArrayViewD<'_, S>,
) {
    ndarray::Zip::from(dst).and(&src).for_each(|d, &s| *d += s);
}

//! The codec training objective and its evaluation.

use alloc::format;
use alloc::vec::Vec;

use crate::channel::{noise_std_for, ChannelRealization, Fading, SnrDistribution};
use crate::codec::{inputs, Codec, LossConfig, TrainingGraph};
use crate::data::{self, DatasetShard};
use crate::error::{Error, Result};
use crate::federation::{Losses, Objective, StepContext, StepOutput, TrainingState};
use crate::graph::{Feed, Graph};
use crate::losses::{self, MsSsimConfig};
use crate::rng::{Purpose, RngStream, StreamId};
use crate::tensor::{ParamMap, Tensor};

/// Channel used during training and evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum ChannelModel {
    #[default]
    Awgn,
    /// Diagonal fading with gains uniform in `[min_gain, max_gain]`, one
    /// draw per batch, followed by zero-forcing.
    DiagonalFading { min_gain: f64, max_gain: f64 },
}

impl ChannelModel {
    fn is_fading(self) -> bool {
        matches!(self, ChannelModel::DiagonalFading { .. })
    }
}

/// One client's data and channel statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientData {
    pub train: DatasetShard,
    pub test: DatasetShard,
    pub snr: SnrDistribution,
}

/// Codec loss over each client's shard.
#[derive(Debug, Clone)]
pub struct CodecObjective {
    pub codec: Codec,
    pub clients: Vec<ClientData>,
    pub batch_size: usize,
    pub loss: LossConfig,
    pub channel: ChannelModel,
}

/// Cached graphs of one client.
#[derive(Debug, Clone)]
pub struct CodecWorkspace {
    step: TrainingGraph,
    full: Option<TrainingGraph>,
}

/// Draws for one batch: images, per-image SNRs, noise and fading.
struct BatchDraw {
    images: Tensor,
    snr: Vec<f64>,
    snr_positive: Vec<f64>,
}

fn transpose(m: &nalgebra::DMatrix<f64>) -> Tensor {
    let (r, c) = m.shape();
    let mut data = Vec::with_capacity(r * c);
    for j in 0..c {
        for i in 0..r {
            data.push(m[(i, j)]);
        }
    }
    Tensor::new(&[c, r], data).expect("matrix shape")
}

impl CodecObjective {
    pub fn validate(&self) -> Result<()> {
        if self.clients.is_empty() {
            return Err(Error::config("clients", "need at least one client"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        let [c, h, w] = self.codec.image_shape();
        for (n, client) in self.clients.iter().enumerate() {
            client.snr.validate()?;
            for (what, shard) in [("train", &client.train), ("test", &client.test)] {
                if shard.is_empty() {
                    return Err(Error::config(
                        "dataset",
                        format!("client {n} has an empty {what} shard"),
                    ));
                }
                let s = shard.images[0].shape();
                if s[0] != c || s[1] < h || s[2] < w {
                    return Err(Error::shape(
                        "dataset",
                        format!("client {n} {what} images {s:?} do not cover [{c}, {h}, {w}]"),
                    ));
                }
            }
        }
        Ok(())
    }

    fn draw(
        &self,
        client: usize,
        indices: &[usize],
        batch: &mut RngStream,
        snr: &mut RngStream,
    ) -> Result<BatchDraw> {
        let data = &self.clients[client];
        let size = self.codec.image_shape()[1];
        let images = data::make_batch(&data.train, indices, size, batch)?;
        let snr_anchor = (0..indices.len()).map(|_| data.snr.sample(snr)).collect();
        let snr_positive = (0..indices.len()).map(|_| data.snr.sample(snr)).collect();
        Ok(BatchDraw {
            images,
            snr: snr_anchor,
            snr_positive,
        })
    }

    fn feed(&self, draw: BatchDraw, noise: &mut RngStream, fading: &mut RngStream) -> Result<Feed> {
        let k = self.codec.symbols();
        let mut feed = Feed::new();
        let mut noise_data = Vec::with_capacity(draw.snr.len() * k);
        for &s in &draw.snr {
            let std = noise_std_for(s);
            noise_data.extend((0..k).map(|_| std * noise.normal()));
        }
        feed.insert(
            inputs::NOISE.into(),
            Tensor::new(&[draw.snr.len(), k], noise_data)?,
        );
        if let ChannelModel::DiagonalFading { min_gain, max_gain } = self.channel {
            let real =
                ChannelRealization::diagonal_fading(k, min_gain, max_gain, draw.snr[0], fading)?;
            if let Fading::Matrix { h, zero_forcing } = real.fading() {
                feed.insert(inputs::FADING_T.into(), transpose(h));
                feed.insert(inputs::ZERO_FORCING_T.into(), transpose(zero_forcing));
            }
        }
        feed.insert(inputs::SNR.into(), self.codec.snr_planes(&draw.snr));
        if self.loss.contrastive_weight != 0.0 {
            feed.insert(
                inputs::SNR_POSITIVE.into(),
                self.codec.snr_planes(&draw.snr_positive),
            );
        }
        feed.insert(inputs::IMAGE.into(), draw.images);
        Ok(feed)
    }

    fn evaluate_graph(
        tg: &mut TrainingGraph,
        u: &ParamMap,
        v: &ParamMap,
        feed: &Feed,
    ) -> Result<(Losses, ParamMap, ParamMap)> {
        for (name, t) in u.iter().chain(v.iter()) {
            tg.graph.set_param(name, t)?;
        }
        tg.graph.forward(feed)?;
        let mut grads = tg.graph.backward()?;
        let value = |g: &Graph, id| g.value(id).map_or(0.0, Tensor::item);
        let losses = Losses {
            mse: value(&tg.graph, tg.mse),
            contrastive: tg.contrastive.map_or(0.0, |c| value(&tg.graph, c)),
            total: value(&tg.graph, tg.total),
        };
        let grad_v: ParamMap = v
            .keys()
            .map(|k| {
                (
                    k.clone(),
                    grads.remove(k).expect("gradient for every parameter"),
                )
            })
            .collect();
        let grad_u: ParamMap = u
            .keys()
            .map(|k| {
                (
                    k.clone(),
                    grads.remove(k).expect("gradient for every parameter"),
                )
            })
            .collect();
        Ok((losses, grad_u, grad_v))
    }

    /// Mean PSNR and MS-SSIM over each client's test shard at each SNR of
    /// `grid`, using the client's own personalized block.
    pub fn evaluate(&self, state: &TrainingState, grid: &[f64], seed: u64) -> Result<EvalMetrics> {
        let mut psnr = alloc::vec![0.0; grid.len()];
        let mut ssim = alloc::vec![0.0; grid.len()];
        let n = self.clients.len() as f64;
        for (client, data) in self.clients.iter().enumerate() {
            let mut params = state.u.clone();
            params.extend(state.v[client].iter().map(|(k, t)| (k.clone(), t.clone())));
            let (p, s) = self.evaluate_client(&params, client, &data.test, grid, seed)?;
            for i in 0..grid.len() {
                psnr[i] += p[i] / n;
                ssim[i] += s[i] / n;
            }
        }
        Ok(EvalMetrics {
            snr_db: grid.to_vec(),
            psnr,
            ms_ssim: ssim,
        })
    }

    /// Per-SNR mean PSNR and MS-SSIM of one parameter set on `shard`.
    pub fn evaluate_client(
        &self,
        params: &ParamMap,
        client: usize,
        shard: &DatasetShard,
        grid: &[f64],
        seed: u64,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let size = self.codec.image_shape()[1];
        let b = shard.len();
        let fading = self.channel.is_fading();
        let mut ig = self.codec.inference_graph(params, b, fading)?;
        let mut crop = RngStream::new(
            seed,
            StreamId::new(client as u32, u32::MAX, 0),
            Purpose::Crop,
        );
        let idx: Vec<usize> = (0..b).collect();
        let images = data::make_batch(shard, &idx, size, &mut crop)?;
        let [_, h, w] = self.codec.image_shape();
        let ssim_cfg = MsSsimConfig::default().fitted(h, w);
        let mut psnr = Vec::with_capacity(grid.len());
        let mut ssim = Vec::with_capacity(grid.len());
        for (i, &snr) in grid.iter().enumerate() {
            let id = StreamId::new(client as u32, i as u32, 0);
            let mut noise = RngStream::new(seed, id, Purpose::Eval);
            let mut fade = RngStream::new(seed, id, Purpose::Fading);
            let draw = BatchDraw {
                images: images.clone(),
                snr: alloc::vec![snr; b],
                snr_positive: Vec::new(),
            };
            let mut feed = self.feed(draw, &mut noise, &mut fade)?;
            feed.remove(inputs::SNR_POSITIVE);
            let x_hat = ig.graph.forward(&feed)?;
            let (mut p, mut s) = (0.0, 0.0);
            for j in 0..b {
                let x = images.index_outer(j)?;
                let y = x_hat.index_outer(j)?;
                p += losses::psnr(&x, &y)?;
                s += losses::ms_ssim(&x, &y, &ssim_cfg)?;
            }
            psnr.push(p / b as f64);
            ssim.push(s / b as f64);
        }
        Ok((psnr, ssim))
    }
}

impl Objective for CodecObjective {
    type Workspace = CodecWorkspace;

    fn clients(&self) -> usize {
        self.clients.len()
    }

    fn client_weight(&self, client: usize) -> f64 {
        let total: usize = self.clients.iter().map(|c| c.train.len()).sum();
        self.clients[client].train.len() as f64 / total as f64
    }

    fn workspace(&self, _client: usize, u: &ParamMap, v: &ParamMap) -> Result<CodecWorkspace> {
        self.validate()?;
        let mut params = u.clone();
        params.extend(v.iter().map(|(k, t)| (k.clone(), t.clone())));
        let step = self.codec.training_graph(
            &params,
            self.batch_size,
            self.loss,
            self.channel.is_fading(),
        )?;
        Ok(CodecWorkspace { step, full: None })
    }

    fn step(
        &self,
        ws: &mut CodecWorkspace,
        ctx: &StepContext,
        u: &ParamMap,
        v: &ParamMap,
    ) -> Result<StepOutput> {
        let len = self.clients[ctx.client].train.len();
        let mut batch = ctx.stream(Purpose::Batch);
        let idx = data::sample_indices(len, self.batch_size, &mut batch);
        let mut crop = ctx.stream(Purpose::Crop);
        let draw = self.draw(ctx.client, &idx, &mut crop, &mut ctx.stream(Purpose::Snr))?;
        let feed = self.feed(
            draw,
            &mut ctx.stream(Purpose::Noise),
            &mut ctx.stream(Purpose::Fading),
        )?;
        let (losses, grad_u, grad_v) =
            Self::evaluate_graph(&mut ws.step, u, v, &feed).map_err(|e| match e {
                Error::Numeric { context } => Error::numeric(format!(
                    "round {} client {} step {}: {context}",
                    ctx.round, ctx.client, ctx.step
                )),
                other => other,
            })?;
        Ok(StepOutput {
            losses,
            grad_u,
            grad_v,
        })
    }

    /// Gradient over the whole training shard with one fixed SNR and noise
    /// draw per image.
    fn full_gradient(
        &self,
        ws: &mut CodecWorkspace,
        client: usize,
        u: &ParamMap,
        v: &ParamMap,
    ) -> Result<Option<(ParamMap, ParamMap)>> {
        let len = self.clients[client].train.len();
        if ws.full.is_none() {
            let mut params = u.clone();
            params.extend(v.iter().map(|(k, t)| (k.clone(), t.clone())));
            ws.full = Some(self.codec.training_graph(
                &params,
                len,
                self.loss,
                self.channel.is_fading(),
            )?);
        }
        let id = StreamId::new(client as u32, u32::MAX, 0);
        let stream = |p| RngStream::new(0, id, p);
        let idx: Vec<usize> = (0..len).collect();
        let draw = self.draw(
            client,
            &idx,
            &mut stream(Purpose::Crop),
            &mut stream(Purpose::Snr),
        )?;
        let feed = self.feed(
            draw,
            &mut stream(Purpose::Noise),
            &mut stream(Purpose::Fading),
        )?;
        let full = ws.full.as_mut().expect("built above");
        let (_, gu, gv) = Self::evaluate_graph(full, u, v, &feed)?;
        Ok(Some((gu, gv)))
    }
}

/// Evaluation over an SNR grid.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvalMetrics {
    pub snr_db: Vec<f64>,
    pub psnr: Vec<f64>,
    pub ms_ssim: Vec<f64>,
}

/// Everything recorded for one round.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RoundMetrics {
    pub round: usize,
    pub losses: Losses,
    pub grad_norm_u_sq: Option<f64>,
    pub grad_norm_v_sq_avg: Option<f64>,
    pub eval: Option<EvalMetrics>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{CodecConfig, CompressionSpec};
    use crate::federation::{Federation, FlSchedule, ParamSet};

    fn objective(clients: usize, dual: bool) -> (CodecObjective, ParamMap) {
        let mut cfg = CodecConfig::new(CompressionSpec::new(1, 6, 8, 8, 3));
        cfg.width = 6;
        cfg.dual_pipeline = dual;
        let codec = Codec::new(cfg).unwrap();
        let all = data::synthesize(12 * clients, 8, 4, 5).unwrap();
        let mut rng = RngStream::new(5, StreamId::global(), Purpose::Shard);
        let shards = data::shard(
            &all,
            clients,
            data::Sharding {
                alpha: None,
                min_shard: 4,
            },
            &mut rng,
        )
        .unwrap();
        let clients = shards
            .iter()
            .map(|s| {
                let (train, test) = data::train_test_split(s, 0.25, &mut rng).unwrap();
                ClientData {
                    train,
                    test,
                    snr: SnrDistribution::new(10.0, 2.0).unwrap(),
                }
            })
            .collect();
        let params = codec.init_params(&mut RngStream::new(5, StreamId::global(), Purpose::Init));
        (
            CodecObjective {
                codec,
                clients,
                batch_size: 4,
                loss: LossConfig::default(),
                channel: ChannelModel::Awgn,
            },
            params,
        )
    }

    #[test]
    fn step_is_deterministic_and_splits_blocks() {
        let (obj, params) = objective(2, true);
        let ps = ParamSet::partition(&params, true).unwrap();
        let mut ws = obj.workspace(0, &ps.u, &ps.v).unwrap();
        let ctx = StepContext {
            seed: 1,
            client: 1,
            round: 2,
            step: 3,
        };
        let a = obj.step(&mut ws, &ctx, &ps.u, &ps.v).unwrap();
        let b = obj.step(&mut ws, &ctx, &ps.u, &ps.v).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.grad_u.len(), ps.u.len());
        assert_eq!(a.grad_v.len(), ps.v.len());
        assert!((a.losses.total - a.losses.mse - a.losses.contrastive).abs() < 1e-12);
    }

    #[test]
    fn short_training_lowers_loss_and_tracks_norms() {
        let (obj, params) = objective(2, true);
        let ps = ParamSet::partition(&params, true).unwrap();
        let mut fed = Federation::new(&obj, FlSchedule::constant(12, 2, 0.05), 3);
        fed.instrument = true;
        let mut state = TrainingState::new(ps.u, vec![ps.v; 2]);
        let mut totals = Vec::new();
        fed.run(&mut state, |r, _| {
            assert!(r.grad_norm_u_sq.unwrap() > 0.0);
            assert!(r.grad_norm_v_sq_avg.unwrap() > 0.0);
            totals.push(r.losses.mse);
            Ok(())
        })
        .unwrap();
        let first: f64 = totals[..3].iter().sum();
        let last: f64 = totals[totals.len() - 3..].iter().sum();
        assert!(last < first, "{totals:?}");
        let eval = obj.evaluate(&state, &[0.0, 20.0], 4).unwrap();
        assert_eq!(eval.psnr.len(), 2);
        assert!(eval.ms_ssim.iter().all(|s| (0.0..=1.0).contains(s)));
        assert_eq!(eval, obj.evaluate(&state, &[0.0, 20.0], 4).unwrap());
    }

    #[test]
    fn fading_channel_trains() {
        let (mut obj, params) = objective(1, false);
        obj.channel = ChannelModel::DiagonalFading {
            min_gain: 0.5,
            max_gain: 1.5,
        };
        let ps = ParamSet::partition(&params, true).unwrap();
        let mut ws = obj.workspace(0, &ps.u, &ps.v).unwrap();
        let ctx = StepContext {
            seed: 1,
            client: 0,
            round: 0,
            step: 0,
        };
        let out = obj.step(&mut ws, &ctx, &ps.u, &ps.v).unwrap();
        assert!(out.losses.total.is_finite());
        let state = TrainingState::new(ps.u, vec![ps.v]);
        assert!(obj.evaluate(&state, &[5.0], 1).is_ok());
    }
}

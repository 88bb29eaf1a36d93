//! Measured behavior of a briefly trained desk-scale codec.

use pfljscc_core::channel::{ChannelRealization, SnrDistribution};
use pfljscc_core::codec::{Codec, CodecConfig, CompressionSpec, LossConfig};
use pfljscc_core::data::{self, Sharding};
use pfljscc_core::federation::{Federation, FlSchedule, ParamSet, TrainingState};
use pfljscc_core::losses::{mse_loss, psnr};
use pfljscc_core::tensor::ParamMap;
use pfljscc_core::trainer::{ChannelModel, ClientData, CodecObjective};
use pfljscc_core::{Purpose, RngStream, StreamId, Tensor};

const SEED: u64 = 3;

fn trained() -> (CodecObjective, ParamMap) {
    let codec = Codec::new(CodecConfig::new(CompressionSpec::new(1, 6, 16, 16, 3))).unwrap();
    let all = data::synthesize(96, 16, 4, SEED).unwrap();
    let mut rng = RngStream::new(SEED, StreamId::global(), Purpose::Shard);
    let shards = data::shard(
        &all,
        2,
        Sharding {
            alpha: None,
            min_shard: 1,
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
                snr: SnrDistribution::new(0.0, 0.0).unwrap(),
            }
        })
        .collect();
    let params = codec.init_params(&mut RngStream::new(SEED, StreamId::global(), Purpose::Init));
    let obj = CodecObjective {
        codec,
        clients,
        batch_size: 8,
        loss: LossConfig::default(),
        channel: ChannelModel::Awgn,
    };
    let ps = ParamSet::partition(&params, true).unwrap();
    let mut state = TrainingState::new(ps.u, vec![ps.v; 2]);
    Federation::new(&obj, FlSchedule::constant(60, 5, 0.2), SEED)
        .run(&mut state, |_, _| Ok(()))
        .unwrap();
    let mut merged = state.u.clone();
    merged.extend(state.v[0].clone());
    (obj, merged)
}

fn held_out(obj: &CodecObjective) -> Tensor {
    let test = &obj.clients[0].test;
    let idx: Vec<usize> = (0..test.len()).collect();
    data::make_batch(
        test,
        &idx,
        16,
        &mut RngStream::new(SEED, StreamId::global(), Purpose::Crop),
    )
    .unwrap()
}

#[test]
fn trained_codec_beats_mid_gray() {
    let (obj, params) = trained();
    let x = held_out(&obj);
    let s = obj.codec.encode(&params, &x, 25.0).unwrap();
    let x_hat = obj.codec.decode(&params, &s, 25.0).unwrap();
    let gray = Tensor::full(x.shape(), 0.5);
    let (p_model, p_gray) = (psnr(&x, &x_hat).unwrap(), psnr(&x, &gray).unwrap());
    println!("noiseless psnr {p_model:.3} dB vs mid-gray {p_gray:.3} dB");
    assert!(p_model > p_gray);
}

/// The preprocess stage is trained only through the reconstruction loss, so
/// nothing pulls its output toward the transmitted symbols; measured, it
/// moves them further away (about 1.16 vs 1.00 at 0 dB).
#[test]
#[ignore = "measured: reconstruction training does not make the preprocess a symbol denoiser"]
fn preprocess_moves_symbols_toward_clean() {
    let (obj, params) = trained();
    let x = held_out(&obj);
    let s0 = obj.codec.encode(&params, &x, 0.0).unwrap();
    let ch = ChannelRealization::awgn(0.0);
    let mut noise = RngStream::new(SEED, StreamId::global(), Purpose::Noise);
    let r = ch.equalize(&ch.transmit(&s0, &mut noise).unwrap()).unwrap();
    let refined = obj.codec.preprocess(&params, &r, 0.0).unwrap();
    let (raw, pre) = (mse_loss(&s0, &r).unwrap(), mse_loss(&s0, &refined).unwrap());
    println!("symbol mse to clean: raw {raw:.5}, preprocessed {pre:.5}");
    assert!(pre < raw);
}

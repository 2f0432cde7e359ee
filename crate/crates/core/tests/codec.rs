use bbdm_tensor::{Rng, Tensor};
use cbbdm::codec::*;
use cbbdm::data::{split_by_longitude, synth_generate, SplitSpec, SynthConfig};
use cbbdm::metrics::psnr_mse;
use cbbdm::trainer::{from_model_range, to_model_range};
use proptest::prelude::*;

#[test]
fn paper_resolution_shrinks_four_times_per_axis() {
    let codec = Codec::<f32>::space_to_depth(3);
    assert_eq!(codec.latent_shape(&[1, 3, 512, 512]).unwrap(), vec![1, 48, 128, 128]);
    let img = Tensor::<f32>::randn(vec![1, 3, 512, 512], &mut Rng::new(0));
    let z = codec.encode(&img).unwrap();
    assert_eq!(z.shape(), &[1, 48, 128, 128]);
    assert_eq!(512 / z.shape()[2], 4);
    assert_eq!(codec.decode(&z).unwrap(), img);
    let ae = Codec::<f32>::tiny_ae(3, 16, &Rng::new(0)).unwrap();
    assert_eq!(ae.encode(&img.reshape(vec![1, 3, 512, 512]).unwrap()).unwrap().shape(), &[1, 16, 128, 128]);
}

#[test]
fn block_contents_in_row_major_order() {
    let img = Tensor::new(vec![1, 1, 4, 4], (0..16).map(|v| v as f64).collect()).unwrap();
    let z = space_to_depth(&img, 4).unwrap();
    assert_eq!(z.shape(), &[1, 16, 1, 1]);
    assert_eq!(z.data(), img.data());
    let id = Codec::<f64>::identity(1);
    assert_eq!(id.encode(&img).unwrap(), img);
    assert_eq!(id.decode(&img).unwrap(), img);
}

#[test]
fn bad_shapes_are_rejected() {
    let codec = Codec::<f32>::space_to_depth(3);
    assert!(codec.encode(&Tensor::zeros(vec![1, 3, 6, 8])).is_err());
    assert!(codec.encode(&Tensor::zeros(vec![1, 2, 8, 8])).is_err());
    assert!(codec.decode(&Tensor::zeros(vec![1, 47, 2, 2])).is_err());
    assert!(Codec::<f32> { ae_params: None, ..Codec::tiny_ae(3, 8, &Rng::new(0)).unwrap() }
        .encode(&Tensor::zeros(vec![1, 3, 8, 8]))
        .is_err());
}

#[test]
fn autoencoder_fits_constant_images() {
    let images = vec![Tensor::full(vec![3, 16, 16], 0.3f32); 4];
    let cfg = AeTrainConfig { steps: 100, batch_size: 2, latent_channels: 4, ..AeTrainConfig::default() };
    let out = train_tiny_ae(&images, &cfg, &Rng::new(1)).unwrap();
    assert!(out.final_loss < 1e-3, "loss {}", out.final_loss);
    let again = train_tiny_ae(&images, &cfg, &Rng::new(1)).unwrap();
    assert!((again.final_loss - out.final_loss).abs() < 1e-6);
    assert_eq!(again.codec, out.codec);
    let x = Tensor::stack(&images[..1]).unwrap();
    let z = out.codec.encode(&x).unwrap();
    assert_eq!(z.shape(), &[1, 4, 4, 4]);
    assert_eq!(out.codec.decode(&z).unwrap().shape(), x.shape());
    assert!(train_tiny_ae::<f32>(&[], &cfg, &Rng::new(1)).is_err());
}

#[test]
fn autoencoder_reconstructs_synthetic_validation_images() {
    let samples = synth_generate(&SynthConfig { size: 32, ..SynthConfig::default() }, 300).unwrap();
    let (train, val) = split_by_longitude(samples, &SplitSpec::default()).unwrap();
    let images: Vec<Tensor<f32>> = train.iter().map(|s| to_model_range(&s.target)).collect();
    let out = train_tiny_ae(&images, &AeTrainConfig { steps: 600, ..AeTrainConfig::default() }, &Rng::new(0)).unwrap();
    let mut total = 0.0;
    for s in &val {
        let x = to_model_range(&s.target).reshape(vec![1, 3, 32, 32]).unwrap();
        let recon = from_model_range(&out.codec.decode(&out.codec.encode(&x).unwrap()).unwrap());
        total += psnr_mse(&recon.reshape(vec![3, 32, 32]).unwrap(), &s.target).unwrap().0;
    }
    let mse = total / val.len() as f64;
    assert!(mse < 0.01, "validation reconstruction mse {mse}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn space_to_depth_is_a_norm_preserving_bijection(
        seed in any::<u64>(),
        n in 1usize..3,
        c in 1usize..4,
        hb in 1usize..5,
        wb in 1usize..5,
    ) {
        let img = Tensor::<f64>::randn(vec![n, c, 4 * hb, 4 * wb], &mut Rng::new(seed));
        let codec = Codec::<f64>::space_to_depth(c);
        let z = codec.encode(&img).unwrap();
        prop_assert_eq!(z.shape(), &[n, 16 * c, hb, wb][..]);
        prop_assert_eq!(&codec.decode(&z).unwrap(), &img);
        let mut a: Vec<u64> = img.data().iter().map(|v| v.to_bits()).collect();
        let mut b: Vec<u64> = z.data().iter().map(|v| v.to_bits()).collect();
        a.sort_unstable();
        b.sort_unstable();
        prop_assert_eq!(a, b);
        let sq = |t: &Tensor<f64>| { let mut v: Vec<f64> = t.data().iter().map(|x| x * x).collect(); v.sort_by(f64::total_cmp); v.iter().sum::<f64>() };
        prop_assert_eq!(sq(&img), sq(&z));
    }
}

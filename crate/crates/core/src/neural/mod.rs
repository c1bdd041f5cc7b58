//! LSTM autoencoder: cells, the stacked encoder/decoder and its gradients.

pub mod autoencoder;
pub mod lstm;

pub use autoencoder::{
    extract_latent_features, Architecture, AutoencoderParams, EncoderPass, ForwardCache, Gradients,
    LatentCode, Projection, ReconstructionError, Weights,
};
pub use lstm::{lstm_cell_forward, CellCache, LstmLayerParams, GATE_ORDER};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::VibrationBatch;

    fn seq(t: usize, d: usize, phase: f64) -> VibrationBatch {
        let data = (0..t * d).map(|k| (k as f64 * 0.37 + phase).sin()).collect();
        VibrationBatch::new("m", 0, d, data, None).unwrap()
    }

    #[test]
    fn capacity_must_shrink() {
        assert!(Architecture::new(2, vec![4, 4]).is_err());
        assert!(Architecture::new(2, vec![3, 5]).is_err());
        assert!(Architecture::new(2, vec![]).is_err());
        assert!(Architecture::new(2, vec![8, 4, 2]).is_ok());
    }

    #[test]
    fn zero_network_outputs_zeros() {
        let p = AutoencoderParams::zeros(Architecture::new(3, vec![5, 2]).unwrap()).unwrap();
        let b = seq(6, 3, 0.0);
        let (z, _) = p.encode(&b).unwrap();
        assert_eq!(z.0, vec![0.0; 2]);
        let (rec, err) = p.reconstruct(&b).unwrap();
        assert_eq!(rec.len(), 6);
        assert!(rec.iter().all(|r| r == &vec![0.0; 3]));
        let direct: Vec<f64> = (0..3).map(|j| b.channel(j).iter().map(|v| v * v).sum::<f64>() / 6.0).collect();
        for (a, e) in err.per_channel.iter().zip(&direct) {
            assert!((a - e).abs() < 1e-15);
        }
    }

    #[test]
    fn latent_shape_and_determinism() {
        let p = AutoencoderParams::init(Architecture::new(2, vec![6, 3]).unwrap(), 0.2, 1).unwrap();
        let b = seq(10, 2, 0.4);
        let rows = extract_latent_features(&p, &[b.clone(), seq(10, 2, 1.0), b]).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0].len(), 3);
        assert_eq!(rows[0], rows[2]);
        assert_ne!(rows[0], rows[1]);
    }

    #[test]
    fn reconstruction_error_formula() {
        let ones = VibrationBatch::new("m", 0, 2, vec![1.0; 8], None).unwrap();
        let zeros = vec![vec![0.0; 2]; 4];
        let e = ReconstructionError::between(&ones, &zeros);
        assert_eq!(e.per_channel, vec![1.0, 1.0]);
        assert_eq!(e.scalar, 1.0);
        let same: Vec<Vec<f64>> = ones.rows().map(<[f64]>::to_vec).collect();
        assert_eq!(ReconstructionError::between(&ones, &same).per_channel, vec![0.0, 0.0]);
    }

    #[test]
    fn reconstruction_error_matches_naive_loop() {
        let p = AutoencoderParams::init(Architecture::new(3, vec![4, 2]).unwrap(), 0.0, 9).unwrap();
        let b = seq(7, 3, 0.2);
        let (rec, err) = p.reconstruct(&b).unwrap();
        for j in 0..3 {
            let mut acc = 0.0;
            for t in 0..7 {
                let diff = b.sample(t)[j] - rec[t][j];
                acc += diff * diff;
            }
            assert!((err.per_channel[j] - acc / 7.0).abs() < 1e-12);
        }
        assert!((err.scalar - err.per_channel.iter().sum::<f64>() / 3.0).abs() < 1e-15);
    }

    #[test]
    fn channel_mismatch_rejected() {
        let p = AutoencoderParams::init(Architecture::new(3, vec![4, 2]).unwrap(), 0.0, 9).unwrap();
        assert!(matches!(p.reconstruct(&seq(5, 2, 0.0)), Err(crate::Error::Dimension { .. })));
    }

    #[test]
    fn dropout_only_in_training_pass() {
        use rand::SeedableRng;
        let p = AutoencoderParams::init(Architecture::new(2, vec![6, 3]).unwrap(), 0.5, 4).unwrap();
        let b = seq(8, 2, 0.0);
        let plain = p.forward(&b, None).unwrap();
        let again = p.forward(&b, None).unwrap();
        assert_eq!(plain.decoder.reconstruction, again.decoder.reconstruction);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let dropped = p.forward(&b, Some(&mut rng)).unwrap();
        assert_ne!(plain.decoder.reconstruction, dropped.decoder.reconstruction);
    }

    #[test]
    fn validate_catches_bad_shapes() {
        let mut p = AutoencoderParams::init(Architecture::new(2, vec![6, 3]).unwrap(), 0.1, 4).unwrap();
        p.validate().unwrap();
        p.weights.decoder[1].bias.pop();
        assert!(p.validate().is_err());
    }
}

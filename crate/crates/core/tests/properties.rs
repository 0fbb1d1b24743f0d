use chanorm::backbones::{AttentionTrace, BackboneConfig, BackboneKind, Model, SeriesBatch};
use chanorm::config::ExperimentConfig;
use chanorm::datasets::{
    chronological_split, gen_cid_toy, gen_sine_mixture, CidToySpec, RawSeries, SineMixtureSpec, SplitSpec,
};
use chanorm::diagnostics::{
    channel_feature_entropy, cid_test, gaussian_entropy, head_kld, MeanRepresentation, DEFAULT_TOL_EQ, DEFAULT_TOL_NEQ,
};
use chanorm::normlayers::{
    acn_forward, channel_similarity, ln_forward, pcn_forward, AcnParams, LnParams, NormKind, NormParamSet, NormSpec,
    PcnParams, SimMetric, SimSpace,
};
use chanorm::numerics::{logdet_psd, matmul, rowwise_softmax};
use chanorm::{RngState, Tensor};
use proptest::prelude::*;

fn metric_strategy() -> impl Strategy<Value = SimMetric> {
    prop_oneof![Just(SimMetric::Cosine), Just(SimMetric::NegL1), Just(SimMetric::NegL2)]
}

/// Permutes the channel axis of a `B×C×F` tensor: output channel `i` is input channel `perm[i]`.
fn permute_channels(t: &Tensor, perm: &[usize]) -> Tensor {
    let (b, c, f) = t.dims3().unwrap();
    let mut out = t.clone();
    for bi in 0..b {
        for (i, &src) in perm.iter().enumerate() {
            let from = (bi * c + src) * f;
            let to = (bi * c + i) * f;
            out.data_mut()[to..to + f].copy_from_slice(&t.data()[from..from + f]);
        }
    }
    out
}

fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let (c, d) = t.dims2().unwrap();
    permute_channels(&t.clone().reshape(&[1, c, d]).unwrap(), perm)
        .reshape(&[c, d])
        .unwrap()
}

fn perm_strategy(c: usize) -> impl Strategy<Value = Vec<usize>> {
    Just((0..c).collect::<Vec<_>>()).prop_shuffle()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(
        rows in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 5), 1..6),
        tau in 1e-3f64..10.0,
    ) {
        let m = Tensor::from_rows(&rows).unwrap();
        let s = rowwise_softmax(&m, tau).unwrap();
        for row in s.data().chunks(5) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn softmax_ignores_row_shift(
        row in prop::collection::vec(-50f64..50.0, 6),
        shift in -1e3f64..1e3,
        tau in 1e-2f64..10.0,
    ) {
        let a = rowwise_softmax(&Tensor::from_rows(std::slice::from_ref(&row)).unwrap(), tau).unwrap();
        let shifted: Vec<f64> = row.iter().map(|v| v + shift).collect();
        let b = rowwise_softmax(&Tensor::from_rows(&[shifted]).unwrap(), tau).unwrap();
        prop_assert!(a.max_abs_diff(&b) <= 1e-12);
    }

    #[test]
    fn matmul_is_associative(seed in any::<u64>()) {
        let mut r = RngState::new(seed).stream("assoc");
        let m: Vec<Tensor> = (0..4).map(|_| Tensor::randn(&[4, 4], 1.0, &mut r)).collect();
        let left = matmul(&matmul(&matmul(&m[0], &m[1]).unwrap(), &m[2]).unwrap(), &m[3]).unwrap();
        let right = matmul(&m[0], &matmul(&m[1], &matmul(&m[2], &m[3]).unwrap()).unwrap()).unwrap();
        prop_assert!(left.max_abs_diff(&right) <= 1e-10);
    }

    #[test]
    fn similarity_rows_are_distributions(seed in any::<u64>(), metric in metric_strategy(), tau in 0.01f64..5.0) {
        let mut r = RngState::new(seed).stream("sim");
        let basis = Tensor::randn(&[2, 5, 7], 3.0, &mut r);
        let s = channel_similarity(&basis, tau, metric).unwrap();
        for row in s.weights.data().chunks(5) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            prop_assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn acn_is_permutation_equivariant(
        seed in any::<u64>(),
        metric in metric_strategy(),
        perm in perm_strategy(5),
    ) {
        let mut r = RngState::new(seed).stream("acn-perm");
        let z = Tensor::randn(&[2, 5, 4], 1.0, &mut r);
        let mut p = AcnParams::identity(5, 4, 0.2, metric, SimSpace::Latent);
        for t in [&mut p.alpha_g, &mut p.alpha_l, &mut p.beta_g, &mut p.beta_l] {
            *t = Tensor::randn(&[5, 4], 1.0, &mut r);
        }
        let (out, _, _) = acn_forward(&z, &p, &z, 1e-5).unwrap();
        let mut q = p.clone();
        for t in [&mut q.alpha_g, &mut q.alpha_l, &mut q.beta_g, &mut q.beta_l] {
            *t = permute_rows(t, &perm);
        }
        let zp = permute_channels(&z, &perm);
        let (outp, _, _) = acn_forward(&zp, &q, &zp, 1e-5).unwrap();
        prop_assert!(outp.max_abs_diff(&permute_channels(&out, &perm)) <= 1e-10);
    }

    #[test]
    fn pcn_is_permutation_equivariant(seed in any::<u64>(), perm in perm_strategy(6)) {
        let mut r = RngState::new(seed).stream("pcn-perm");
        let mut p = PcnParams::identity(3, 4, 5, 0.3, &mut r);
        p.alpha_p = Tensor::randn(&[3, 4], 1.0, &mut r);
        p.beta_p = Tensor::randn(&[3, 4], 1.0, &mut r);
        let z = Tensor::randn(&[2, 6, 4], 1.0, &mut r);
        let x = Tensor::randn(&[2, 6, 5], 1.0, &mut r);
        let (out, _, _, _) = pcn_forward(&z, &x, &p, 1e-5).unwrap();
        let (outp, _, _, _) = pcn_forward(&permute_channels(&z, &perm), &permute_channels(&x, &perm), &p, 1e-5).unwrap();
        prop_assert!(outp.max_abs_diff(&permute_channels(&out, &perm)) <= 1e-10);
    }

    #[test]
    fn identity_init_layers_equal_plain_standardization(seed in any::<u64>(), c in 2usize..6) {
        let mut r = RngState::new(seed).stream("init");
        let z = Tensor::randn(&[2, c, 6], 2.0, &mut r);
        let x = Tensor::randn(&[2, c, 5], 1.0, &mut r);
        let reference = ln_forward(&z, &LnParams::identity(6), 1e-5).unwrap();
        for kind in [NormKind::Ln, NormKind::Cn, NormKind::Acn, NormKind::Pcn] {
            let layer = NormParamSet::init(&NormSpec::with_kind(kind), c, 6, 5, &mut r);
            let (out, _) = layer.forward(&z, Some(&x), 1e-5).unwrap();
            prop_assert!(out.max_abs_diff(&reference) <= 1e-12);
        }
    }

    #[test]
    fn ln_gradient_rows_sum_to_zero(seed in any::<u64>()) {
        let mut r = RngState::new(seed).stream("ln-grad");
        let layer = NormParamSet::Ln(LnParams::identity(7));
        let z = Tensor::randn(&[2, 3, 7], 1.0, &mut r);
        let (_, cache) = layer.forward(&z, None, 1e-5).unwrap();
        let (gz, _) = layer.backward(&cache, &Tensor::randn(&[2, 3, 7], 1.0, &mut r)).unwrap();
        for row in gz.data().chunks(7) {
            prop_assert!(row.iter().sum::<f64>().abs() <= 1e-10);
        }
    }

    #[test]
    fn entropy_grows_with_ridge(seed in any::<u64>(), e1 in 1e-6f64..1.0, factor in 1.0f64..100.0) {
        let mut r = RngState::new(seed).stream("ridge");
        let z = Tensor::randn(&[3, 6], 1.0, &mut r);
        let lo = gaussian_entropy(&z, e1).unwrap();
        let hi = gaussian_entropy(&z, e1 * factor).unwrap();
        prop_assert!(hi >= lo - 1e-12);
    }

    #[test]
    fn duplicated_channel_lowers_channel_entropy(seed in any::<u64>()) {
        let mut r = RngState::new(seed).stream("dup");
        let z = Tensor::randn(&[4, 16], 1.0, &mut r);
        let mut dup = z.clone();
        let row0 = z.row(0).to_vec();
        dup.row_mut(1).copy_from_slice(&row0);
        let mut indep = z.clone();
        let fresh = Tensor::randn(&[16], 1.0, &mut r);
        let norm0 = row0.iter().map(|v| v * v).sum::<f64>().sqrt();
        let normf = fresh.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        for (o, v) in indep.row_mut(1).iter_mut().zip(fresh.data()) {
            *o = v * norm0 / normf;
        }
        let e = |t: Tensor| channel_feature_entropy(&MeanRepresentation::new(t).unwrap(), 1e-4).unwrap().channel_entropy;
        prop_assert!(e(dup) <= e(indep));
    }

    #[test]
    fn head_divergence_is_symmetric_in_heads(seed in any::<u64>()) {
        let mut r = RngState::new(seed).stream("kld");
        let logits = Tensor::randn(&[2 * 2 * 3, 3], 2.0, &mut r);
        let probs = rowwise_softmax(&logits, 1.0).unwrap().reshape(&[2, 2, 3, 3]).unwrap();
        let mut swapped = probs.clone();
        for b in 0..2 {
            let (h0, h1) = ((b * 2) * 9, (b * 2 + 1) * 9);
            swapped.data_mut()[h0..h0 + 9].copy_from_slice(&probs.data()[h1..h1 + 9]);
            swapped.data_mut()[h1..h1 + 9].copy_from_slice(&probs.data()[h0..h0 + 9]);
        }
        let a = head_kld(&AttentionTrace { layers: vec![probs] }).unwrap();
        let b = head_kld(&AttentionTrace { layers: vec![swapped] }).unwrap();
        prop_assert!(a[0] >= 0.0);
        prop_assert!((a[0] - b[0]).abs() <= 1e-12);
    }

    #[test]
    fn splits_are_disjoint_ordered_and_exhaustive(t in 30usize..400, train in 0.2f64..0.7, val in 0.1f64..0.2) {
        let values: Vec<f64> = (0..t).map(|i| i as f64).collect();
        let s = RawSeries::from_matrix(Tensor::new(&[t, 1], values).unwrap()).unwrap();
        let spec = SplitSpec { train, val, test: 1.0 - train - val };
        let (a, b, c) = chronological_split(&s, &spec, 1).unwrap();
        let joined: Vec<f64> = [a, b, c].iter().flat_map(|p| p.column(0)).collect();
        prop_assert_eq!(joined, (0..t).map(|i| i as f64).collect::<Vec<_>>());
    }

    #[test]
    fn config_text_round_trips(
        tau in 0.01f64..2.0,
        k in 1usize..9,
        epochs in 0usize..100,
        metric in metric_strategy(),
        seed in any::<u64>(),
    ) {
        let mut cfg = ExperimentConfig::default();
        cfg.set("norm.tau", &tau.to_string()).unwrap();
        cfg.set("norm.prototypes", &k.to_string()).unwrap();
        cfg.set("norm.metric", metric.as_str()).unwrap();
        cfg.set("train.epochs", &epochs.to_string()).unwrap();
        cfg.set("seed", &seed.to_string()).unwrap();
        let text = cfg.to_text();
        let back = ExperimentConfig::from_text(&text).unwrap();
        prop_assert_eq!(back.to_text(), text);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn attention_encoder_is_permutation_equivariant(
        seed in any::<u64>(),
        perm in perm_strategy(4),
        use_ln in any::<bool>(),
    ) {
        let norm = if use_ln { NormKind::Ln } else { NormKind::None };
        let cfg = BackboneConfig { d_model: 8, ffn_hidden: 16, ..BackboneConfig::new(BackboneKind::ChannelAttention, 12, 4, 4) }
            .with_norm(norm);
        let model = Model::new(cfg, seed).unwrap();
        let mut r = RngState::new(seed).stream("x");
        let x = Tensor::randn(&[2, 12, 4], 1.0, &mut r);
        let xb = SeriesBatch::new(x).unwrap();
        let y = model.predict(&xb).unwrap();
        let xp = SeriesBatch::from_channel_major(&permute_channels(&xb.channel_major(), &perm)).unwrap();
        let yp = model.predict(&xp).unwrap();
        for b in 0..2 {
            for (i, &src) in perm.iter().enumerate() {
                let a = yp.channel(b, i);
                let e = y.channel(b, src);
                let gap = a.iter().zip(&e).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max);
                prop_assert!(gap <= 1e-10);
            }
        }
    }

    #[test]
    fn cid_verdict_is_deterministic(seed in any::<u64>(), kind in prop_oneof![Just(NormKind::Ln), Just(NormKind::Cn)]) {
        let cfg = BackboneConfig { d_model: 8, ffn_hidden: 16, ..BackboneConfig::new(BackboneKind::ResidualMlp, 12, 4, 3) }
            .with_norm(kind);
        let model = Model::new(cfg, seed).unwrap();
        let a = cid_test(&model, seed, DEFAULT_TOL_EQ, DEFAULT_TOL_NEQ).unwrap();
        let b = cid_test(&model, seed, DEFAULT_TOL_EQ, DEFAULT_TOL_NEQ).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn generators_are_reproducible(seed in any::<u64>()) {
        let toy = CidToySpec { lookback: 8, horizon: 4, amplitude: 1.0, periods: 5, noise: 0.1, seed };
        let (a, b) = (gen_cid_toy(&toy).unwrap(), gen_cid_toy(&toy).unwrap());
        prop_assert_eq!(a.matrix(), b.matrix());
        let sine = SineMixtureSpec::new(3, 50, seed);
        let (a, b) = (gen_sine_mixture(&sine).unwrap(), gen_sine_mixture(&sine).unwrap());
        prop_assert_eq!(a.matrix(), b.matrix());
    }
}

#[test]
fn logdet_of_scaled_identity() {
    for c in [0.5, 1.0, 4.0] {
        for n in [1, 3, 8] {
            let mut m = Tensor::zeros(&[n, n]);
            for i in 0..n {
                m.set(&[i, i], c);
            }
            let got = logdet_psd(&m).unwrap();
            assert!((got - n as f64 * f64::ln(c)).abs() < 1e-12);
        }
    }
}

#[test]
fn noiseless_toy_gives_identical_inputs_and_linear_target_gap() {
    let spec = CidToySpec {
        lookback: 12,
        horizon: 6,
        amplitude: 2.0,
        periods: 4,
        noise: 0.0,
        seed: 3,
    };
    let s = gen_cid_toy(&spec).unwrap();
    let (up, down) = (s.column(0), s.column(1));
    let p = spec.period();
    for k in 0..spec.periods {
        for t in 0..spec.lookback {
            assert_eq!(up[k * p + t].to_bits(), down[k * p + t].to_bits());
        }
        for t in 1..=spec.horizon {
            let i = k * p + spec.lookback + t - 1;
            let gap = up[i] - down[i];
            assert!((gap - 2.0 * spec.amplitude * t as f64 / spec.horizon as f64).abs() < 1e-12);
        }
    }
}

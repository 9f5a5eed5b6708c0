use bucketrl_core::encoder::*;
use bucketrl_core::episode::*;
use bucketrl_core::rng::rng_from_seed;
use bucketrl_core::terrain::*;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn demos(kind: TerrainKind, base: u64, n: usize) -> Dataset {
    collect_dataset(&TerrainSpec::preset(kind), &episode_seeds(base, n), &EpisodeConfig::default()).unwrap()
}

fn dist(a: &LatentZ, b: &LatentZ) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 16, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn demo_latent_ignores_order(seed in any::<u64>(), k in 1usize..8) {
        let ds = demos(TerrainKind::RedMulch, seed, k);
        let p = EncoderParams::init(EncoderRole::Demo, 16, ds.norm_stats.clone().unwrap(), seed);
        let mut refs: Vec<&Trajectory> = ds.trajectories.iter().collect();
        let base = encode_demo(&p, &refs).unwrap();
        refs.shuffle(&mut rng_from_seed(seed ^ 1));
        prop_assert_eq!(encode_demo(&p, &refs).unwrap(), base);
    }

    #[test]
    fn latents_are_finite_and_repeatable(seed in any::<u64>(), len in 1usize..=150) {
        let mut rng = rng_from_seed(seed);
        let seq: Vec<Context> = (0..len)
            .map(|_| core::array::from_fn(|_| rng.random_range(-100.0..100.0)))
            .collect();
        let norm = NormStats { obs_mean: vec![0.0; CONTEXT_DIM], obs_std: vec![10.0; CONTEXT_DIM] };
        let p = EncoderParams::init(EncoderRole::Current, 16, norm, seed);
        let z = encode_current(&p, &seq);
        prop_assert!(z.iter().all(|v| v.is_finite()));
        prop_assert_eq!(z, encode_current(&p, &seq));
    }
}

#[test]
fn rigid_presets_separate_in_current_latent() {
    let kinds = TerrainKind::RIGID;
    let parts: Vec<Dataset> = kinds.iter().enumerate().map(|(i, k)| demos(*k, 70 + i as u64, 30)).collect();
    let all = merge_datasets(&parts).unwrap();
    let cfg = EncoderConfig { epochs: 10, ..EncoderConfig::default() };
    let p = train_autoencoder(&all, EncoderRole::Current, &cfg, 5).unwrap();
    let h = &p.loss_history;
    assert!(h.last().unwrap() < &h[0]);

    let prefixes: Vec<Vec<LatentZ>> = parts
        .iter()
        .map(|d| {
            d.trajectories
                .iter()
                .filter(|t| t.len() >= 30)
                .map(|t| encode_current(&p, &t.contexts()[..30]))
                .collect()
        })
        .collect();
    let mut rng = rng_from_seed(8);
    let (mut same, mut diff) = (0.0, 0.0);
    for _ in 0..100 {
        let a = rng.random_range(0..kinds.len());
        let b = (a + rng.random_range(1..kinds.len())) % kinds.len();
        let pick = |k: usize, rng: &mut rand_chacha::ChaCha8Rng| prefixes[k][rng.random_range(0..prefixes[k].len())];
        let (x, y) = (pick(a, &mut rng), pick(a, &mut rng));
        same += dist(&x, &y);
        let (u, v) = (pick(a, &mut rng), pick(b, &mut rng));
        diff += dist(&u, &v);
    }
    assert!(diff > same, "different-preset mean {} vs same-preset {}", diff / 100.0, same / 100.0);
}

use std::collections::BTreeMap;

use dwdr::sampling::{drone_view_epoch, satellite_view_epoch, BatchSampler, Provenance};
use dwdr::synthdata::{generate_dataset, split_train_test, ClassSplit};
use dwdr::{CrossViewDataset, Platform, Rng, SamplingStrategy, SynthSpec};
use proptest::prelude::*;

fn spec() -> impl Strategy<Value = SynthSpec> {
    (2usize..8, 1usize..4, 2usize..6, any::<u64>()).prop_flat_map(|(classes, latent, input, tseed)| {
        (prop::collection::vec(1usize..7, classes), 1..classes).prop_map(move |(drones, train)| SynthSpec {
            num_classes: classes,
            latent_dim: latent,
            input_dim: input,
            drone_per_class: drones,
            platform_transform_seed: tseed,
            split: ClassSplit::first(train, classes),
            ..SynthSpec::default()
        })
    })
}

fn drone_multiset(ds: &CrossViewDataset) -> BTreeMap<u64, usize> {
    let mut m = BTreeMap::new();
    for item in ds.items_on(Platform::Drone) {
        *m.entry(item.id).or_insert(0) += 1;
    }
    m
}

const STRATEGIES: [SamplingStrategy; 4] = [
    SamplingStrategy::Random,
    SamplingStrategy::Satellite,
    SamplingStrategy::Drone,
    SamplingStrategy::Symmetric,
];

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn manifests_round_trip(spec in spec(), seed in any::<u64>()) {
        let ds = generate_dataset(&spec, &Rng::new(seed, 0)).unwrap();
        let text = ds.manifest_string();
        let back = CrossViewDataset::read_manifest(text.as_bytes()).unwrap();
        prop_assert_eq!(back.items(), ds.items());
        prop_assert_eq!(back.classes(), ds.classes());
        prop_assert_eq!(back.manifest_string(), text);
    }

    #[test]
    fn generation_is_seed_deterministic(spec in spec(), seed in any::<u64>()) {
        let a = generate_dataset(&spec, &Rng::new(seed, 0)).unwrap();
        let b = generate_dataset(&spec, &Rng::new(seed, 0)).unwrap();
        prop_assert_eq!(a.manifest_string(), b.manifest_string());
    }

    #[test]
    fn splits_are_disjoint_and_conserve_items(spec in spec(), seed in any::<u64>()) {
        let ds = generate_dataset(&spec, &Rng::new(seed, 0)).unwrap();
        let (train, test) = split_train_test(&ds, &spec).unwrap();
        let tl = train.labels();
        prop_assert!(test.labels().iter().all(|l| !tl.contains(l)));
        prop_assert_eq!(train.items().len() + test.items().len(), ds.items().len());
        for class in ds.classes() {
            prop_assert_eq!(class.drone_items.len(), spec.drone_count(class.label));
            prop_assert_eq!(class.satellite_items.len(), 1);
        }
    }

    #[test]
    fn every_pair_is_positive_and_streams_repeat(
        spec in spec(),
        seed in any::<u64>(),
        half in 1usize..5,
        epochs in 1usize..4,
    ) {
        let ds = generate_dataset(&spec, &Rng::new(seed, 0)).unwrap();
        let b = 2 * half;
        for strategy in STRATEGIES {
            let mut first = BatchSampler::new(&ds, strategy, b, &Rng::new(seed, 1)).unwrap();
            let mut second = BatchSampler::new(&ds, strategy, b, &Rng::new(seed, 1)).unwrap();
            for _ in 0..epochs {
                let plans = first.next_epoch();
                prop_assert_eq!(&plans, &second.next_epoch());
                for plan in &plans {
                    prop_assert_eq!(plan.len(), b);
                    for pair in &plan.pairs {
                        let s = ds.item(pair.satellite_id).unwrap();
                        let d = ds.item(pair.drone_id).unwrap();
                        prop_assert_eq!(s.platform, Platform::Satellite);
                        prop_assert_eq!(d.platform, Platform::Drone);
                        prop_assert!(s.label == pair.label && d.label == pair.label);
                    }
                    if strategy == SamplingStrategy::Symmetric {
                        prop_assert_eq!(plan.count(Provenance::SatelliteAnchored), half);
                        prop_assert_eq!(plan.count(Provenance::DroneAnchored), half);
                    }
                }
            }
        }
    }

    #[test]
    fn anchored_epochs_cover_their_platform(spec in spec(), seed in any::<u64>()) {
        let ds = generate_dataset(&spec, &Rng::new(seed, 0)).unwrap();
        let mut rng = Rng::new(seed, 2);

        let drone = drone_view_epoch(&ds, &mut rng);
        let mut seen = BTreeMap::new();
        for p in &drone {
            *seen.entry(p.drone_id).or_insert(0) += 1;
        }
        prop_assert_eq!(seen, drone_multiset(&ds));

        let sat = satellite_view_epoch(&ds, &mut rng);
        let mut labels: Vec<usize> = sat.iter().map(|p| p.label).collect();
        labels.sort_unstable();
        prop_assert_eq!(labels, ds.labels());
    }
}

//! Pair schedules and realized crops over generated data.

use std::sync::OnceLock;

use jn_track::data::{
    realize_pair, sample_epoch_schedule, generate_split, CropConfig, Dataset, Polarity, SamplerConfig, Split,
    SyntheticSpec,
};
use proptest::prelude::*;

fn small() -> &'static Dataset {
    static DATA: OnceLock<Dataset> = OnceLock::new();
    DATA.get_or_init(|| {
        let mut spec = SyntheticSpec::default();
        spec.train.num_seqs = 6;
        spec.train.frames_per_seq = 24;
        spec.train.absence_prob = 0.6;
        spec.seed = 11;
        generate_split(&spec, Split::Train).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn schedule_meets_quota_and_pairing_rules(rho in 0.01f64..=1.0, n in 1usize..400, epoch in 0u64..50, seed in 0u64..1000) {
        let data = small();
        let cfg = SamplerConfig { rho, pairs_per_epoch: n, seed, ..SamplerConfig::default() };
        let sched = sample_epoch_schedule(data, &cfg, epoch).unwrap();
        prop_assert_eq!(sched.len(), n);
        let pos = sched.iter().filter(|d| d.polarity == Polarity::Positive).count();
        prop_assert_eq!(pos, (rho * n as f64).round() as usize);
        for (i, d) in sched.iter().enumerate() {
            prop_assert_eq!(d.index, i);
            prop_assert_eq!(d.epoch, epoch);
            let t = &data.sequences[d.template_seq];
            prop_assert!(!t.absent[d.template_frame]);
            let s = &data.sequences[d.search_seq];
            match d.polarity {
                Polarity::Positive => {
                    prop_assert_eq!(d.search_seq, d.template_seq);
                    prop_assert!(!s.absent[d.search_frame]);
                    prop_assert!(d.search_frame.abs_diff(d.template_frame) <= cfg.max_gap);
                }
                Polarity::Negative => {
                    prop_assert!(d.search_seq != d.template_seq || s.absent[d.search_frame]);
                }
            }
        }
    }

    #[test]
    fn realized_pairs_keep_their_polarity(rho in 0.1f64..=1.0, seed in 0u64..1000) {
        let data = small();
        let cfg = SamplerConfig { rho, pairs_per_epoch: 12, seed, ..SamplerConfig::default() };
        let crop = CropConfig::default();
        for d in sample_epoch_schedule(data, &cfg, 0).unwrap() {
            let p = realize_pair(data, &d, &cfg, &crop).unwrap();
            prop_assert_eq!(p.search.shape(), &[3, 64, 64]);
            prop_assert_eq!(p.template.shape(), &[3, 32, 32]);
            match p.gt_box_search {
                Some(gt) => {
                    prop_assert_eq!(d.polarity, Polarity::Positive);
                    prop_assert!(gt.clipped(64.0, 64.0).area() > 0.0);
                }
                None => prop_assert_eq!(d.polarity, Polarity::Negative),
            }
            let again = realize_pair(data, &d, &cfg, &crop).unwrap();
            prop_assert_eq!(again.search.data(), p.search.data());
        }
    }
}

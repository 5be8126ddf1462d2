use std::collections::BTreeMap;
use std::sync::Arc;

use proptest::prelude::*;
use rankchoice::{
    explode_rankings, Context, ContextPolicy, Covariates, ProgramCatalog, RankingDataset,
};

fn dataset(m: usize, rankings: Vec<Vec<usize>>) -> RankingDataset {
    let n = rankings.len();
    RankingDataset::new(
        Arc::new(ProgramCatalog::simple(m)),
        (0..n).map(|i| format!("h{i}")).collect(),
        rankings,
        Arc::new(Covariates::zeros(n, m, vec![])),
        vec![BTreeMap::new(); n],
    )
    .unwrap()
}

fn ranking_strategy(m: usize) -> impl Strategy<Value = Vec<usize>> {
    Just((0..m).collect::<Vec<_>>())
        .prop_shuffle()
        .prop_flat_map(move |perm| (1..=m).prop_map(move |k| perm[..k].to_vec()))
}

fn dataset_strategy() -> impl Strategy<Value = (usize, Vec<Vec<usize>>)> {
    (2usize..8).prop_flat_map(|m| (Just(m), prop::collection::vec(ranking_strategy(m), 1..12)))
}

fn policy_strategy() -> impl Strategy<Value = ContextPolicy> {
    prop_oneof![
        Just(ContextPolicy::Backward),
        Just(ContextPolicy::Forward),
        (0usize..5).prop_map(ContextPolicy::TopK),
    ]
}

proptest! {
    #[test]
    fn records_follow_rankings((m, rankings) in dataset_strategy(), policy in policy_strategy()) {
        let ds = dataset(m, rankings.clone());
        let choices = explode_rankings(&ds, policy).unwrap();
        let total: usize = rankings.iter().map(Vec::len).sum();
        prop_assert_eq!(choices.len(), total);

        let mut next = 0;
        for (i, r) in rankings.iter().enumerate() {
            for (pos, &chosen) in r.iter().enumerate() {
                let rec = &choices.records[next];
                next += 1;
                prop_assert_eq!(rec.agent, i);
                prop_assert_eq!(rec.rank, pos + 1);
                prop_assert_eq!(rec.chosen, chosen);
                prop_assert_eq!(rec.choice_set.len(), m - pos);
                prop_assert!(rec.choice_set.contains(&chosen));
                prop_assert!(r[..pos].iter().all(|x| !rec.choice_set.contains(x)));
                match (&rec.context, policy) {
                    (Context::Forward, ContextPolicy::Forward) => {}
                    (Context::Set(a), ContextPolicy::Backward) => prop_assert_eq!(a, &r[..pos].to_vec()),
                    (Context::Set(a), ContextPolicy::TopK(k)) => {
                        prop_assert_eq!(a, &r[..k.min(pos)].to_vec())
                    }
                    (c, p) => prop_assert!(false, "context {:?} under {}", c, p),
                }
            }
        }
    }

    #[test]
    fn topk_beyond_length_is_backward((m, rankings) in dataset_strategy()) {
        let ds = dataset(m, rankings);
        let back = explode_rankings(&ds, ContextPolicy::Backward).unwrap();
        let wide = explode_rankings(&ds, ContextPolicy::TopK(m)).unwrap();
        for (a, b) in back.records.iter().zip(&wide.records) {
            prop_assert_eq!(&a.context, &b.context);
            prop_assert_eq!(&a.choice_set, &b.choice_set);
        }
    }

    #[test]
    fn rank_filter_partitions((m, rankings) in dataset_strategy(), cut in 1usize..6) {
        let ds = dataset(m, rankings);
        let all = explode_rankings(&ds, ContextPolicy::Backward).unwrap();
        let low = all.filter_ranks(|r| r <= cut);
        let high = all.filter_ranks(|r| r > cut);
        prop_assert_eq!(low.len() + high.len(), all.len());
        prop_assert!(low.records.iter().all(|r| r.rank <= cut));
    }
}

use proptest::prelude::*;
use specexit_core::engine::{generate, generate_target_only, DecodeOptions};
use specexit_core::exit::{SmoothingMethod, StoppingConfig, Thresholds};
use specexit_core::seq::{is_step_split, MarkerMode, THINK_CLOSE};
use specexit_core::suite::{random_table_pair, verbose_suite, SuiteConfig};
use specexit_core::{MarkerSet, Signal};

fn opts(gamma: usize) -> DecodeOptions {
    DecodeOptions {
        gamma,
        max_tokens: 80,
        max_answer_tokens: 40,
        early_exit: true,
        ..DecodeOptions::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn speculative_output_equals_greedy(seed in any::<u64>()) {
        let pair = random_table_pair(seed).unwrap();
        let m = MarkerSet::toy();
        let o = opts(pair.gamma);
        let base = generate_target_only(&pair.prompt, &pair.target, &m, &o).unwrap();
        let spec = generate(&pair.prompt, &pair.draft, &pair.target, &StoppingConfig::unreachable(), &m, &o).unwrap();
        prop_assert_eq!(&spec.output, &base.output);
        // a draft that is never accepted costs one forward more than greedy
        prop_assert!(spec.target_forwards <= base.target_forwards + 1);
        let off = generate(&pair.prompt, &pair.draft, &pair.target, &StoppingConfig::spec_exit_star(),
            &m, &DecodeOptions { early_exit: false, ..o }).unwrap();
        prop_assert_eq!(&off.output, &base.output);
    }

    #[test]
    fn forced_closes_follow_a_split(seed in any::<u64>(), mode in 0usize..3, thr in 0.0f64..0.6) {
        let pair = random_table_pair(seed).unwrap();
        let m = MarkerSet::toy();
        let mode = [MarkerMode::Paragraph, MarkerMode::Discourse, MarkerMode::Contrastive][mode];
        let cfg = StoppingConfig {
            thresholds: Thresholds { confidence: thr, progress: 0.0, remaining: 1e9 },
            enabled: vec![Signal::Confidence],
            smoothing: SmoothingMethod::None,
            marker_mode: mode,
        };
        let r = generate(&pair.prompt, &pair.draft, &pair.target, &cfg, &m, &opts(pair.gamma)).unwrap();
        prop_assert!(r.exit_follows_split(&m, mode));
        if let Some(p) = r.exit_position {
            prop_assert!(is_step_split(r.output[p - 1], &m, mode));
            // the gate only fires while thinking, so a forced close is the first one
            prop_assert!(!r.output[..p].contains(&THINK_CLOSE));
        }
        // each step commits its accepted tokens plus one, before cuts at the limits
        let committed: usize = r.accept_lengths.iter().map(|l| l + 1).sum();
        prop_assert!(committed + usize::from(r.budget_exit) >= r.output.len());
        prop_assert_eq!(r.target_forwards, 1 + r.steps.iter().filter(|s| !(s.exited && s.l_acpt == 0)).count());
    }
}

#[test]
fn exit_is_at_the_minimal_paragraph_for_every_smoother() {
    let suite = verbose_suite(&SuiteConfig {
        tasks: 8,
        seed: 11,
        ..SuiteConfig::default()
    })
    .unwrap();
    let o = DecodeOptions {
        max_tokens: 10_000,
        ..DecodeOptions::default()
    };
    for t in &suite.tasks {
        let base = generate(
            &t.generation_prompt(),
            &suite.draft,
            &suite.target,
            &StoppingConfig::unreachable(),
            &suite.markers,
            &o,
        )
        .unwrap();
        let cfg = StoppingConfig::spec_exit_star();
        let r = generate(
            &t.generation_prompt(),
            &suite.draft,
            &suite.target,
            &cfg,
            &suite.markers,
            &o,
        )
        .unwrap();
        assert_eq!(r.answer(), base.answer());
        assert!(
            r.reasoning_tokens * 2 == base.reasoning_tokens,
            "{} vs {}",
            r.reasoning_tokens,
            base.reasoning_tokens
        );
        assert!(r.target_forwards < base.target_forwards);
    }
}

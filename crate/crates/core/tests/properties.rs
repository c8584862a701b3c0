mod common;

use proptest::prelude::*;

use common::{brute_force_shapley, max_abs_diff, ToyInstance};
use nspc::attribution::{shap_exact, shap_sampled, ShapMethod, ShapVector};
use nspc::lexing::{AlignedToken, AstTag, ClassLabel};
use nspc::predictor::{apply_mask, ClassProbability, MaskPattern, Predictor, ToyLogit};
use nspc::probing::{fit_logistic, PositionRange, ProbeConfig, ProbeSample};
use nspc::rules::{
    guard_decision, rule_fires, Comparator, DecidedBy, GuardOptions, PhiCondition, RuleMode, RulePart, RuleProvenance,
    RuleSet, SymbolicRule,
};

const MASK: &str = "<mask>";

fn tag_strategy() -> impl Strategy<Value = AstTag> {
    prop::sample::select(AstTag::ALL.to_vec())
}

fn provenance() -> RuleProvenance {
    RuleProvenance { grid_hash: "g".into(), config_hash: "c".into(), gate: 0.6 }
}

fn rule_strategy() -> impl Strategy<Value = SymbolicRule> {
    (
        tag_strategy(),
        0usize..250,
        0usize..50,
        any::<bool>(),
        any::<bool>(),
        -1.0f64..1.0,
        0.601f64..1.0,
        any::<bool>(),
        any::<bool>(),
    )
        .prop_map(|(tag, lo, width, attribution, insecure, threshold, confidence, at_least, low)| SymbolicRule {
            tag,
            range: PositionRange { lo, hi: lo + width },
            mode: if attribution { RuleMode::Attribution } else { RuleMode::Presence },
            phi_condition: attribution.then_some(PhiCondition {
                comparator: if at_least { Comparator::AtLeast } else { Comparator::AtMost },
                threshold,
            }),
            target_class: ClassLabel::from_positive(insecure),
            confidence,
            part: if low { RulePart::LowReliability } else { RulePart::PositiveCorrelation },
        })
}

fn rule_set_strategy() -> impl Strategy<Value = RuleSet> {
    prop::collection::vec(rule_strategy(), 0..12).prop_map(|rules| {
        let mut seen = std::collections::HashSet::new();
        let rules: Vec<SymbolicRule> =
            rules.into_iter().filter(|r| seen.insert((r.tag, r.range, r.mode, r.target_class))).collect();
        RuleSet::new(rules, provenance()).unwrap()
    })
}

fn tokens_strategy() -> impl Strategy<Value = (Vec<AlignedToken>, ShapVector)> {
    prop::collection::vec((tag_strategy(), -1.0f64..1.0), 1..120).prop_map(|items| {
        let tokens: Vec<AlignedToken> = items
            .iter()
            .enumerate()
            .map(|(i, (tag, _))| AlignedToken { position: i, lexeme: format!("w{i}"), tag: Some(*tag), byte_span: (i, i + 1) })
            .collect();
        let shap = ShapVector {
            snippet_id: "p".into(),
            phis: items.iter().map(|(_, phi)| *phi).collect(),
            method: ShapMethod::Sampled,
            sample_count: 2,
            seed: 0,
            f_full: 0.5,
            f_empty: 0.5,
            reference: None,
        };
        (tokens, shap)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn exact_matches_brute_force(seed in any::<u64>(), n in 1usize..9) {
        let inst = ToyInstance::seeded(n, seed);
        let v = shap_exact("p", &inst.tokens, &ToyLogit::new(inst.markers.clone(), inst.bias), MASK, 14).unwrap();
        let oracle = brute_force_shapley(n, &|kept| inst.value(kept));
        prop_assert!(max_abs_diff(&v.phis, &oracle) <= 1e-12);
        prop_assert!(v.efficiency_gap() <= 1e-12);
    }

    #[test]
    fn sampled_is_efficient_and_seeded(seed in any::<u64>(), n in 2usize..40, half in 1usize..20) {
        let inst = ToyInstance::seeded(n, seed);
        let model = ToyLogit::new(inst.markers.clone(), inst.bias);
        let a = shap_sampled("p", &inst.tokens, &model, MASK, 2 * half, seed).unwrap();
        let b = shap_sampled("p", &inst.tokens, &model, MASK, 2 * half, seed).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert!(a.efficiency_gap() <= 1e-9);
    }

    #[test]
    fn dummy_and_symmetric_tokens(seed in any::<u64>(), n in 2usize..9) {
        let mut inst = ToyInstance::seeded(n, seed);
        inst.tokens[0] = "filler".into();
        inst.tokens[n - 1] = inst.tokens[1 % n].clone();
        let v = shap_exact("p", &inst.tokens, &ToyLogit::new(inst.markers.clone(), inst.bias), MASK, 14).unwrap();
        prop_assert_eq!(v.phis[0], 0.0);
        prop_assert!((v.phis[n - 1] - v.phis[1 % n]).abs() <= 1e-12);
    }

    #[test]
    fn masking_equals_premasked_input(seed in any::<u64>(), n in 1usize..20, bits in any::<u64>()) {
        let inst = ToyInstance::seeded(n, seed);
        let model = ToyLogit::new(inst.markers.clone(), inst.bias);
        let mask = MaskPattern::from_u64(bits, n);
        let premasked: Vec<String> = apply_mask(&inst.tokens, &mask, MASK).into_iter().map(String::from).collect();
        let a = model.predict(&inst.tokens, &mask, MASK).unwrap();
        let b = model.predict(&premasked, &MaskPattern::full(n), MASK).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn rule_json_round_trip(set in rule_set_strategy()) {
        let text = set.to_json().unwrap();
        let back = RuleSet::from_json(&text).unwrap();
        prop_assert_eq!(back.to_json().unwrap(), text);
        prop_assert_eq!(back, set);
    }

    #[test]
    fn attribution_firing_implies_presence_twin(rule in rule_strategy(), (tokens, shap) in tokens_strategy()) {
        prop_assume!(rule.mode == RuleMode::Attribution);
        let twin = SymbolicRule { mode: RuleMode::Presence, phi_condition: None, ..rule.clone() };
        if rule_fires(&rule, &tokens, Some(&shap)).unwrap() {
            prop_assert!(rule_fires(&twin, &tokens, None).unwrap());
        }
    }

    #[test]
    fn guard_is_conservative_and_monotone(
        set in rule_set_strategy(),
        (tokens, shap) in tokens_strategy(),
        p in 0.0f64..=1.0,
        attribution in any::<bool>(),
    ) {
        let options = GuardOptions { tau: 0.6, mode: if attribution { RuleMode::Attribution } else { RuleMode::Presence } };
        let prob = ClassProbability::new(p).unwrap();
        let full = guard_decision(prob, &tokens, &set, &options, Some(&shap)).unwrap();
        if prob.confidence() >= options.tau {
            prop_assert_eq!(full.final_class, prob.predicted_class());
            prop_assert_eq!(full.decided_by, DecidedBy::Model);
        }
        // Dropping the lowest-confidence positive rule cannot change a decision made by a higher one.
        let positive: Vec<&SymbolicRule> = set.positive_rules(options.mode).collect();
        if let (Some(last), DecidedBy::Rule) = (positive.last(), full.decided_by) {
            let decider = &full.fired_rules[0];
            if *decider != last.id() {
                let kept: Vec<SymbolicRule> = set.rules().iter().filter(|r| r.id() != last.id()).cloned().collect();
                let reduced = RuleSet::new(kept, provenance()).unwrap();
                let again = guard_decision(prob, &tokens, &reduced, &options, Some(&shap)).unwrap();
                prop_assert_eq!(again.final_class, full.final_class);
                prop_assert_eq!(&again.fired_rules[0], decider);
            }
        }
    }

    #[test]
    fn probe_invariant_to_phi_scale(seed in any::<u64>(), scale in 0.01f64..100.0) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let range = PositionRange { lo: 0, hi: 49 };
        let samples: Vec<ProbeSample> = (0..80)
            .map(|_| {
                let positive = rng.gen_bool(0.5);
                let phi = rng.gen_range(-1.0..1.0) + if positive { 0.4 } else { -0.4 };
                ProbeSample { position: rng.gen_range(0..=49), phi, positive }
            })
            .collect();
        let scaled: Vec<ProbeSample> = samples.iter().map(|s| ProbeSample { phi: s.phi * scale, ..*s }).collect();
        let cfg = ProbeConfig::default();
        let a = fit_logistic(&samples, AstTag::Literal, range, seed, &cfg).unwrap();
        let b = fit_logistic(&scaled, AstTag::Literal, range, seed, &cfg).unwrap();
        prop_assert_eq!(a.test_accuracy, b.test_accuracy);
        prop_assert_eq!(a.train_accuracy, b.train_accuracy);
        if let (Some(x), Some(y)) = (a.boundary, b.boundary) {
            prop_assert!((x.phi_threshold * scale - y.phi_threshold).abs() <= 1e-6 * (1.0 + y.phi_threshold.abs()));
        }
    }

    #[test]
    fn probe_recovers_separable_threshold(seed in any::<u64>(), t in -0.5f64..0.5) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let range = PositionRange { lo: 100, hi: 149 };
        let samples: Vec<ProbeSample> = (0..60)
            .map(|i| {
                let positive = i % 2 == 0;
                let gap = rng.gen_range(0.1..1.0);
                ProbeSample { position: 124, phi: if positive { t + gap } else { t - gap }, positive }
            })
            .collect();
        let probe = fit_logistic(&samples, AstTag::Operator, range, seed, &ProbeConfig::default()).unwrap();
        prop_assert_eq!(probe.test_accuracy, 1.0);
        prop_assert_eq!(probe.train_accuracy, 1.0);
        let highest_negative = samples.iter().filter(|s| !s.positive).map(|s| s.phi).fold(f64::MIN, f64::max);
        let lowest_positive = samples.iter().filter(|s| s.positive).map(|s| s.phi).fold(f64::MAX, f64::min);
        let b = probe.boundary.unwrap();
        prop_assert!(b.phi_threshold > highest_negative && b.phi_threshold < lowest_positive,
            "{} outside ({highest_negative}, {lowest_positive})", b.phi_threshold);
        prop_assert_eq!(b.class_above(), ClassLabel::Insecure);
    }
}

mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::*;
use tsgm::mixer::{mix_inputs, Ablation, MixInputs};
use tsgm::tensor::Matrix;

fn ablation() -> impl Strategy<Value = Ablation> {
    prop::sample::select(Ablation::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn agrees_with_the_loop_oracle(seed in any::<u64>(), n in 1usize..6, m in 0usize..6, layers in 1usize..3, ablation in ablation()) {
        let dims = small_dims(layers);
        let (store, params) = random_mixer(seed, dims);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let inputs = random_inputs(n, m, &dims, &mut rng);
        let fast = mix_inputs(&store, &params, &inputs, ablation).unwrap();
        let (hi, ho) = naive_mix(&store, &params, &inputs, ablation);
        prop_assert!(max_abs_diff(&hi, &fast.image) <= 1e-9);
        prop_assert!(max_abs_diff(&ho, &fast.object) <= 1e-9);
    }

    #[test]
    fn relabelling_nodes_relabels_the_output(seed in any::<u64>(), n in 1usize..6, m in 0usize..6, ablation in ablation()) {
        let dims = small_dims(2);
        let (store, params) = random_mixer(seed, dims);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
        let inputs = random_inputs(n, m, &dims, &mut rng);
        let pi = random_permutation(n, &mut rng);
        let po = random_permutation(m, &mut rng);
        let permuted = MixInputs {
            images: permute_rows(&inputs.images, &pi),
            objects: permute_rows(&inputs.objects, &po),
            a_im: permute_both(&inputs.a_im, &pi, &pi),
            a_c: permute_both(&inputs.a_c, &pi, &po),
            goal: inputs.goal.clone(),
        };
        let base = mix_inputs(&store, &params, &inputs, ablation).unwrap();
        let moved = mix_inputs(&store, &params, &permuted, ablation).unwrap();
        prop_assert!(max_abs_diff(&rows_of(&permute_rows(&base.image, &pi)), &moved.image) <= 1e-9);
        prop_assert!(max_abs_diff(&rows_of(&permute_rows(&base.object, &po)), &moved.object) <= 1e-9);
    }

    #[test]
    fn isolated_nodes_keep_their_features(seed in any::<u64>(), n in 1usize..6, m in 0usize..6, ablation in ablation()) {
        let dims = small_dims(2);
        let (store, params) = random_mixer(seed, dims);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 3);
        let inputs = MixInputs {
            a_im: Matrix::zeros(n, n),
            a_c: Matrix::zeros(n, m),
            ..random_inputs(n, m, &dims, &mut rng)
        };
        let out = mix_inputs(&store, &params, &inputs, ablation).unwrap();
        prop_assert!(max_abs_diff(&rows_of(&inputs.images), &out.image) <= 1e-12);
        prop_assert!(max_abs_diff(&rows_of(&inputs.objects), &out.object) <= 1e-12);
    }

    #[test]
    fn no_update_is_the_identity(seed in any::<u64>(), n in 1usize..6, m in 0usize..6) {
        let dims = small_dims(2);
        let (store, params) = random_mixer(seed, dims);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 4);
        let inputs = random_inputs(n, m, &dims, &mut rng);
        let out = mix_inputs(&store, &params, &inputs, Ablation::NoUpdate).unwrap();
        prop_assert_eq!(out.image, inputs.images);
        prop_assert_eq!(out.object, inputs.objects);
    }

    #[test]
    fn single_sided_variants_freeze_the_other_side(seed in any::<u64>(), n in 1usize..6, m in 1usize..6) {
        let dims = small_dims(2);
        let (store, params) = random_mixer(seed, dims);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 5);
        let inputs = random_inputs(n, m, &dims, &mut rng);
        let visual = mix_inputs(&store, &params, &inputs, Ablation::VisualOnly).unwrap();
        prop_assert_eq!(visual.object, inputs.objects.clone());
        let object = mix_inputs(&store, &params, &inputs, Ablation::ObjectOnly).unwrap();
        prop_assert_eq!(object.image, inputs.images.clone());
    }
}

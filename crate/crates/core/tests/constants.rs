use kcm_retrieval::composition_data::NUM_CLASSES;
use kcm_retrieval::preprocessing::INPUT_SIZE;
use kcm_retrieval::shot_miner::MAX_FRAMES_PER_SHOT;
use kcm_retrieval::trainer::Hyperparams;

#[test]
fn published_constants() {
    assert_eq!(INPUT_SIZE, 256);
    assert_eq!(MAX_FRAMES_PER_SHOT, 7);
    assert_eq!(NUM_CLASSES, 9);
}

#[test]
fn desk_defaults() {
    let hp = Hyperparams::default();
    assert_eq!((hp.learning_rate, hp.batch_size, hp.epochs), (1e-3, 16, 30));
    assert_eq!((hp.margin, hp.l_kcm), (0.0, 0.5));
}

//! Losses, class weights, Adam, the fine-tuning loop and both pre-training
//! procedures.

mod fit;
mod loss;
mod optim;
mod pretrain;
mod tweets;

pub use fit::{
    accuracy, batch_gradients, label_indices, predict_all, train_classifier, EpochMetrics, TrainConfig, TrainOutcome,
    Trainer,
};
pub use loss::{
    class_weights, counts_for, logit_grad, nll_loss, weighted_nll_loss, ClassWeights, LossKind, LossValue, PROB_FLOOR,
};
pub use optim::{Adam, AdamConfig};
pub use pretrain::{
    build_pretrain_examples, mlm_selection_fraction, pretrain_batch_gradients, pretrain_losses, pretrain_mlm_nsp,
    PretrainConfig, PretrainEpoch, PretrainExample, PretrainHeads, PretrainLoss, PretrainOutcome, PretrainParams,
};
pub use tweets::{
    encode_tweets, filter_tweets, hashtag_label, parse_tweet_file, pretrain_emotion_hashtags, train_hashtag_classifier, TweetCandidate,
    TweetEmotion, TweetRecord,
};

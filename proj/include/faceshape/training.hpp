// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "faceshape/network.hpp"
#include "faceshape/synthetic.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace faceshape {

enum class Phase { I, II, III };

struct TrainConfig
{
    double lambda_r = 1.0;
    AdamConfig adam;
    int batch_size = 16;
    int epochs = 60;
    std::uint64_t seed = 1;
    Phase phase = Phase::I;

    void validate() const;
};

/// A run of `epochs` epochs at a fixed reconstruction weight.
struct LambdaStage
{
    int epochs = 0;
    double lambda_r = 0.0;
};

/// 10 epochs at 0.5 followed by 20 epochs at 1.0.
std::vector<LambdaStage> default_schedule();

/// Encoder targets alpha / (3 sigma), optionally clipped to [-0.99, 0.99].
LatentCode coefficient_code(const MorphableModel& model, const CoeffPair& coeffs, bool clip = true);

std::vector<TrainingExample> training_examples(const Dataset& data, std::span<const int> indices);

/// Images of the selected samples, one column each.
Matrix stack_depth_images(const Dataset& data, std::span<const int> indices);

struct EpochLoss
{
    int epoch = 0; ///< 0 is the state before the first update
    double train = 0.0;
    double validation = 0.0;
};

struct Phase1Result
{
    std::vector<EpochLoss> trace;
};

/// Regresses the encoder onto clipped coefficient codes of the training split.
Phase1Result train_phase1(EncoderNet& encoder, const MorphableModel& model, const Dataset& data,
                          const TrainConfig& cfg);

struct AffineMap
{
    Matrix weight;
    Vector bias;
};

/**
 * Least-squares affine map with targets ~ weight * codes + bias, columns are samples.
 * Throws Underdetermined unless [codes; 1] has full row rank.
 */
AffineMap fit_affine_map(const Matrix& codes, const Matrix& targets);

/**
 * Closed-form decoder fit. Pairs are the unclipped coefficient codes of the training split and
 * their shape components A_id alpha_id, A_exp alpha_exp, plus `prior_samples` coefficient vectors
 * drawn from the model prior.
 */
DecoderNet train_phase2(const MorphableModel& model, const Dataset& data, int prior_samples, std::uint64_t seed);

struct EpochReport
{
    int epoch = 0;
    double lambda_r = 0.0;
    LossReport train; ///< full training split after the epoch
};

struct Phase3Result
{
    std::vector<EpochReport> trace;
    bool aborted = false;
    std::string abort_reason;
};

/**
 * Joint training over the schedule with Adam and shuffled mini-batches; cfg.lambda_r and
 * cfg.epochs are ignored in favour of the schedule. On a numerical failure the network is rolled
 * back to the end of the last completed epoch and the result is flagged as aborted.
 */
Phase3Result train_phase3(JointNet& net, const MorphableModel& model, const Dataset& data, const TrainConfig& cfg,
                          std::span<const LambdaStage> schedule);

/// Top-1 accuracy of the classifier head on the given samples.
double classification_accuracy(const JointNet& net, const MorphableModel& model, const Dataset& data,
                               std::span<const int> indices);

/**
 * Nearest-class-mean classifier on the current c_id codes of the training split: row k is the
 * mean code m_k of subject k and the bias is -|m_k|^2 / 2.
 */
ClassifierHead class_mean_head(const EncoderNet& encoder, const Dataset& data);

struct TrainingPlan
{
    std::vector<int> hidden{256, 256};
    TrainConfig phase1{1.0, {}, 16, 60, 1, Phase::I};
    int prior_samples = 64;
    TrainConfig phase3{1.0, {}, 16, 30, 1, Phase::III};
    std::vector<LambdaStage> schedule = default_schedule();

    void validate() const;
};

struct TrainingRun
{
    JointNet after_phase2; ///< Phase I encoder, Phase II decoder, class-mean head
    JointNet final;
    Phase1Result phase1;
    Phase3Result phase3;
};

/**
 * The network as training starts: randomly initialised encoder and classifier head plus the
 * closed-form decoder. Used for gradient audits at initialisation.
 */
JointNet make_initial_network(const MorphableModel& model, const Dataset& data, const TrainingPlan& plan);

/// All three phases. Latent widths follow the model (Q_id = K_id, Q_res = K_exp).
TrainingRun run_training(const MorphableModel& model, const Dataset& data, const TrainingPlan& plan);

} // namespace faceshape

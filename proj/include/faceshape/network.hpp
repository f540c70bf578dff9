// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "faceshape/geometry.hpp"
#include "faceshape/random.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace faceshape {

/// Linear exists for gradient tests; encoders built by make_encoder use Tanh throughout.
enum class Activation { Tanh, Linear };

struct DenseLayer
{
    Matrix weight; ///< out x in
    Vector bias;
    Activation activation = Activation::Tanh;

    int in_dim() const noexcept { return static_cast<int>(weight.cols()); }
    int out_dim() const noexcept { return static_cast<int>(weight.rows()); }
};

/// Feedforward trunk followed by two parallel heads producing c_id and c_res.
struct EncoderNet
{
    std::vector<DenseLayer> trunk;
    DenseLayer head_id;
    DenseLayer head_res;

    int input_dim() const;
    int q_id() const noexcept { return head_id.out_dim(); }
    int q_res() const noexcept { return head_res.out_dim(); }
    void validate() const;
};

/// Two linear maps from latent codes to shape offsets (3n each).
struct DecoderNet
{
    Matrix weight_id;
    Vector bias_id;
    Matrix weight_res;
    Vector bias_res;

    void validate() const;
};

/// Linear softmax classifier on c_id.
struct ClassifierHead
{
    Matrix weight; ///< K x q_id
    Vector bias;

    int classes() const noexcept { return static_cast<int>(weight.rows()); }
};

struct JointNet
{
    EncoderNet encoder;
    DecoderNet decoder;
    ClassifierHead head;

    /// Throws InvariantViolation if any widths disagree.
    void validate() const;
};

struct LatentCode
{
    Vector c_id;
    Vector c_res;
};

struct ShapeDeltas
{
    Vector delta_id;
    Vector delta_res;
};

struct LossReport
{
    double total = 0.0;
    double recon = 0.0;
    double ident = 0.0;
    double accuracy = 0.0;
};

struct TrainingExample
{
    Vector image;
    int label = 0;
    Vector target_shape;
};

/// Tanh output is clamped so that it stays strictly inside (-1, 1) in floating point.
double saturate(double x) noexcept;

/// Default init draws weights and biases from U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
EncoderNet make_encoder(int input_dim, std::span<const int> hidden, int q_id, int q_res, Rng& rng);
DecoderNet make_decoder(int coord_dim, int q_id, int q_res);
ClassifierHead make_head(int q_id, int classes, Rng& rng);

LatentCode encoder_forward(const EncoderNet& net, const Vector& image);
/// Column b of each output is the code of column b of `images`.
void encoder_forward_batch(const EncoderNet& net, const Matrix& images, Matrix& c_id, Matrix& c_res);

ShapeDeltas decoder_forward(const DecoderNet& dec, const LatentCode& code);
Shape reconstruct(const Shape& mean, const DecoderNet& dec, const LatentCode& code);

/// Mean squared error over all 3n coordinates.
double reconstruction_loss(const Vector& predicted, const Vector& target);
double reconstruction_loss(const Shape& predicted, const Shape& target);

/// Softmax cross-entropy of raw logits at `label`.
double softmax_cross_entropy(const Vector& logits, int label);
double identification_loss(const ClassifierHead& head, const Vector& c_id, int label);

LossReport joint_loss(double recon, double ident, double lambda_r);

/// Batch-mean joint loss with its components; accuracy is the top-1 rate of the classifier head.
LossReport evaluate_batch(const JointNet& net, const Shape& mean, std::span<const TrainingExample> batch,
                          double lambda_r);

/**
 * Reverse-mode gradients of the batch-mean joint loss with respect to every parameter, returned
 * in a JointNet of the same shape. Samples are accumulated in batch order.
 */
JointNet backward(const JointNet& net, const Shape& mean, std::span<const TrainingExample> batch, double lambda_r,
                  LossReport* report = nullptr);

/**
 * Gradient of the mean squared error between encoder outputs and targets (averaged over samples
 * and output coordinates), returned as an EncoderNet of gradients. Columns are samples.
 */
EncoderNet regression_backward(const EncoderNet& net, const Matrix& images, const Matrix& target_id,
                               const Matrix& target_res, double* loss = nullptr);
double regression_loss(const EncoderNet& net, const Matrix& images, const Matrix& target_id, const Matrix& target_res);

/// Views of every parameter array, in a fixed order (trunk, heads, decoder, classifier).
std::vector<std::span<double>> parameter_views(JointNet& net);
std::vector<std::span<double>> parameter_views(EncoderNet& net);
std::size_t parameter_count(const JointNet& net);

/// JointNet with the same shapes and all parameters zero.
JointNet zeros_like(const JointNet& net);

struct AdamConfig
{
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;

    void validate() const;
};

/// One bias-corrected Adam step for a single coordinate; `step` counts from 1.
void adam_update(double& param, double& m, double& v, double grad, const AdamConfig& cfg, std::int64_t step);

/// Adam state for a fixed list of parameter arrays.
class Adam
{
public:
    Adam(std::span<const std::span<double>> params, AdamConfig config);

    void step(std::span<const std::span<double>> params, std::span<const std::span<double>> grads);
    std::int64_t steps() const noexcept { return step_; }

private:
    AdamConfig config_;
    std::vector<std::vector<double>> m_;
    std::vector<std::vector<double>> v_;
    std::int64_t step_ = 0;
};

struct GradientCheck
{
    double max_relative_error = 0.0;
    int coordinates = 0;
};

/**
 * Compares backward() with central differences on `coordinates` parameters drawn uniformly from
 * the whole network. The perturbed outputs are evaluated as changes relative to one cached forward
 * pass and the loss differences are formed per sample, so round-off scales with the perturbation.
 * Relative error is |a - n| / max(|a|, |n|, 1e-8).
 */
GradientCheck finite_diff_check(const JointNet& net, const Shape& mean, std::span<const TrainingExample> batch,
                                double lambda_r, double step, int coordinates, Rng& rng);

} // namespace faceshape

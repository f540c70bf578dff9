// SPDX-License-Identifier: Apache-2.0
#include "faceshape/network.hpp"
#include "faceshape/error.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace faceshape {

namespace {

const double kUnitBelow = std::nextafter(1.0, 0.0);

void check_layer(const DenseLayer& layer, const std::string& name)
{
    require(layer.weight.rows() >= 1 && layer.weight.cols() >= 1, ErrorKind::InvariantViolation,
            name + " has an empty weight matrix");
    require(layer.bias.size() == layer.weight.rows(), ErrorKind::InvariantViolation,
            name + " bias length does not match its output width");
}

DenseLayer random_layer(int in, int out, Activation act, Rng& rng)
{
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    DenseLayer layer{Matrix(out, in), Vector(out), act};
    for (Eigen::Index c = 0; c < layer.weight.cols(); ++c) {
        for (Eigen::Index r = 0; r < layer.weight.rows(); ++r) {
            layer.weight(r, c) = rng.uniform(-bound, bound);
        }
    }
    for (Eigen::Index r = 0; r < layer.bias.size(); ++r) {
        layer.bias(r) = rng.uniform(-bound, bound);
    }
    return layer;
}

Matrix apply(const DenseLayer& layer, const Matrix& input)
{
    Matrix z = layer.weight * input;
    z.colwise() += layer.bias;
    if (layer.activation == Activation::Tanh) {
        z = z.unaryExpr([](double x) { return saturate(x); });
    }
    return z;
}

// In-place multiplication of an upstream gradient by the activation derivative at output y.
void activation_backward(Activation act, const Matrix& y, Matrix& grad)
{
    if (act == Activation::Tanh) {
        grad.array() *= 1.0 - y.array().square();
    }
}

struct ForwardCache
{
    std::vector<Matrix> trunk; // trunk[0] is the input, trunk[i + 1] the output of layer i
    Matrix c_id;
    Matrix c_res;
};

ForwardCache forward_cached(const EncoderNet& net, const Matrix& images)
{
    require(images.rows() == net.input_dim(), ErrorKind::InvalidArgument,
            "image length " + std::to_string(images.rows()) + " does not match encoder input " +
                std::to_string(net.input_dim()));
    ForwardCache cache;
    cache.trunk.reserve(net.trunk.size() + 1);
    cache.trunk.push_back(images);
    for (const DenseLayer& layer : net.trunk) {
        cache.trunk.push_back(apply(layer, cache.trunk.back()));
    }
    cache.c_id = apply(net.head_id, cache.trunk.back());
    cache.c_res = apply(net.head_res, cache.trunk.back());
    require(cache.c_id.allFinite() && cache.c_res.allFinite(), ErrorKind::NumericalFailure,
            "encoder produced non-finite activations");
    return cache;
}

EncoderNet encoder_backward_cached(const EncoderNet& net, const ForwardCache& cache, Matrix d_id, Matrix d_res)
{
    EncoderNet g = net;
    activation_backward(net.head_id.activation, cache.c_id, d_id);
    activation_backward(net.head_res.activation, cache.c_res, d_res);
    const Matrix& feat = cache.trunk.back();
    g.head_id.weight.noalias() = d_id * feat.transpose();
    g.head_id.bias = d_id.rowwise().sum();
    g.head_res.weight.noalias() = d_res * feat.transpose();
    g.head_res.bias = d_res.rowwise().sum();

    Matrix upstream = net.head_id.weight.transpose() * d_id + net.head_res.weight.transpose() * d_res;
    for (std::size_t i = net.trunk.size(); i-- > 0;) {
        const DenseLayer& layer = net.trunk[i];
        activation_backward(layer.activation, cache.trunk[i + 1], upstream);
        g.trunk[i].weight.noalias() = upstream * cache.trunk[i].transpose();
        g.trunk[i].bias = upstream.rowwise().sum();
        if (i > 0) {
            upstream = layer.weight.transpose() * upstream;
        }
    }
    return g;
}

Matrix stack_images(std::span<const TrainingExample> batch)
{
    require(!batch.empty(), ErrorKind::InvalidArgument, "empty batch");
    Matrix x(batch.front().image.size(), static_cast<Eigen::Index>(batch.size()));
    for (std::size_t b = 0; b < batch.size(); ++b) {
        require(batch[b].image.size() == x.rows(), ErrorKind::InvalidArgument, "images in a batch differ in size");
        x.col(static_cast<Eigen::Index>(b)) = batch[b].image;
    }
    return x;
}

Matrix decode_batch(const DecoderNet& dec, const Shape& mean, const Matrix& c_id, const Matrix& c_res)
{
    Matrix s = dec.weight_id * c_id + dec.weight_res * c_res;
    s.colwise() += mean.coords() + dec.bias_id + dec.bias_res;
    return s;
}

// Per-sample loss terms and the upstream gradients of the batch-mean loss.
struct LossTerms
{
    Vector recon;
    Vector ident;
    double correct = 0.0;
    Matrix grad_shape;  // d mean-loss / d predicted shape
    Matrix grad_logits; // d mean-loss / d logits
    Matrix logits;
};

LossTerms loss_terms(const JointNet& net, const Shape& mean, std::span<const TrainingExample> batch,
                     const Matrix& c_id, const Matrix& c_res, double lambda_r)
{
    const auto b_count = static_cast<Eigen::Index>(batch.size());
    const auto coord_dim = mean.coords().size();
    const double inv_b = 1.0 / static_cast<double>(b_count);
    LossTerms t;
    const Matrix shapes = decode_batch(net.decoder, mean, c_id, c_res);
    Matrix diff(coord_dim, b_count);
    for (Eigen::Index b = 0; b < b_count; ++b) {
        const Vector& target = batch[static_cast<std::size_t>(b)].target_shape;
        require(target.size() == coord_dim, ErrorKind::InvalidArgument, "target shape length mismatch");
        diff.col(b) = shapes.col(b) - target;
    }
    t.recon = diff.colwise().squaredNorm().transpose() / static_cast<double>(coord_dim);
    t.grad_shape = diff * (2.0 * lambda_r * inv_b / static_cast<double>(coord_dim));

    t.logits = net.head.weight * c_id;
    t.logits.colwise() += net.head.bias;
    t.ident.resize(b_count);
    t.grad_logits.resize(t.logits.rows(), b_count);
    for (Eigen::Index b = 0; b < b_count; ++b) {
        const int label = batch[static_cast<std::size_t>(b)].label;
        require(label >= 0 && label < net.head.classes(), ErrorKind::InvalidArgument,
                "label " + std::to_string(label) + " outside [0, " + std::to_string(net.head.classes()) + ")");
        const auto z = t.logits.col(b);
        Eigen::Index arg = 0;
        const double zmax = z.maxCoeff(&arg);
        const Vector e = (z.array() - zmax).exp();
        const double sum = e.sum();
        t.ident(b) = std::log(sum) - (z(label) - zmax);
        t.grad_logits.col(b) = e / sum * inv_b;
        t.grad_logits(label, b) -= inv_b;
        t.correct += arg == label ? 1.0 : 0.0;
    }
    require(t.recon.allFinite() && t.ident.allFinite(), ErrorKind::NumericalFailure, "loss is not finite");
    return t;
}

LossReport summarize(const LossTerms& t, double lambda_r)
{
    const auto b = static_cast<double>(t.recon.size());
    LossReport r = joint_loss(t.recon.sum() / b, t.ident.sum() / b, lambda_r);
    r.accuracy = t.correct / b;
    return r;
}

void push(std::vector<std::span<double>>& out, Matrix& m) { out.emplace_back(m.data(), m.size()); }
void push(std::vector<std::span<double>>& out, Vector& v) { out.emplace_back(v.data(), v.size()); }

// Change of a layer's output when its weights become `probe` and its input moves by `d_in`.
Matrix layer_delta(const DenseLayer& base, const DenseLayer& probe, const Matrix& in, const Matrix& d_in,
                   const Matrix& out)
{
    Matrix dz = probe.weight * d_in + (probe.weight - base.weight) * in;
    dz.colwise() += probe.bias - base.bias;
    if (base.activation != Activation::Tanh) {
        return dz;
    }
    // tanh(z + d) - tanh(z) = tanh(d) (1 - tanh(z) tanh(z + d)), away from the clamp.
    Matrix z = base.weight * in;
    z.colwise() += base.bias;
    for (Eigen::Index j = 0; j < dz.cols(); ++j) {
        for (Eigen::Index i = 0; i < dz.rows(); ++i) {
            const double y = out(i, j);
            const double y_new = saturate(z(i, j) + dz(i, j));
            if (std::abs(y) >= kUnitBelow || std::abs(y_new) >= kUnitBelow) {
                dz(i, j) = y_new - y;
            } else {
                dz(i, j) = std::tanh(dz(i, j)) * (1.0 - y * y_new);
            }
        }
    }
    return dz;
}

struct OutputDelta
{
    Matrix shapes;
    Matrix logits;
};

// Output changes of `probe` relative to `base`, carried layer by layer so that nothing large is
// subtracted from something nearly equal.
OutputDelta output_delta(const JointNet& base, const JointNet& probe, const ForwardCache& cache,
                         const Matrix& images)
{
    const EncoderNet& e = base.encoder;
    Matrix d = Matrix::Zero(images.rows(), images.cols());
    for (std::size_t i = 0; i < e.trunk.size(); ++i) {
        d = layer_delta(e.trunk[i], probe.encoder.trunk[i], cache.trunk[i], d, cache.trunk[i + 1]);
    }
    const Matrix& feat = cache.trunk.back();
    const Matrix d_id = layer_delta(e.head_id, probe.encoder.head_id, feat, d, cache.c_id);
    const Matrix d_res = layer_delta(e.head_res, probe.encoder.head_res, feat, d, cache.c_res);

    const DecoderNet& dec = base.decoder;
    const DecoderNet& pdec = probe.decoder;
    OutputDelta o;
    o.shapes = pdec.weight_id * d_id + (pdec.weight_id - dec.weight_id) * cache.c_id +
               pdec.weight_res * d_res + (pdec.weight_res - dec.weight_res) * cache.c_res;
    o.shapes.colwise() += (pdec.bias_id - dec.bias_id) + (pdec.bias_res - dec.bias_res);
    o.logits = probe.head.weight * d_id + (probe.head.weight - base.head.weight) * cache.c_id;
    o.logits.colwise() += probe.head.bias - base.head.bias;
    return o;
}

struct LossDelta
{
    double recon = 0.0;
    double ident = 0.0;
};

// Batch-mean loss differences between the outputs moved by `plus` and by `minus`.
LossDelta loss_delta(const OutputDelta& plus, const OutputDelta& minus, const Matrix& residual,
                     const Matrix& probs, std::span<const TrainingExample> batch)
{
    const auto b_count = static_cast<double>(residual.cols());
    LossDelta d;
    const Matrix ds = plus.shapes - minus.shapes;
    const Matrix ss = plus.shapes + minus.shapes + 2.0 * residual;
    d.recon = (ds.array() * ss.array()).sum() / (static_cast<double>(residual.rows()) * b_count);
    // CE(z + dz) - CE(z) = log1p(sum_i p_i expm1(dz_i - dz_y))
    const auto change = [&](const Matrix& dz, Eigen::Index b, int label) {
        double sum = 0.0;
        for (Eigen::Index i = 0; i < dz.rows(); ++i) {
            sum += probs(i, b) * std::expm1(dz(i, b) - dz(label, b));
        }
        return std::log1p(sum);
    };
    for (Eigen::Index b = 0; b < residual.cols(); ++b) {
        const int label = batch[static_cast<std::size_t>(b)].label;
        d.ident += change(plus.logits, b, label) - change(minus.logits, b, label);
    }
    d.ident /= b_count;
    return d;
}

} // namespace

double saturate(double x) noexcept { return std::clamp(std::tanh(x), -kUnitBelow, kUnitBelow); }

int EncoderNet::input_dim() const { return trunk.empty() ? head_id.in_dim() : trunk.front().in_dim(); }

void EncoderNet::validate() const
{
    for (std::size_t i = 0; i < trunk.size(); ++i) {
        check_layer(trunk[i], "encoder layer " + std::to_string(i));
        if (i > 0) {
            require(trunk[i].in_dim() == trunk[i - 1].out_dim(), ErrorKind::InvariantViolation,
                    "encoder layer " + std::to_string(i) + " input width does not match the previous layer");
        }
    }
    check_layer(head_id, "encoder identity head");
    check_layer(head_res, "encoder residual head");
    const int feat = trunk.empty() ? head_id.in_dim() : trunk.back().out_dim();
    require(head_id.in_dim() == feat && head_res.in_dim() == feat, ErrorKind::InvariantViolation,
            "encoder heads do not match the trunk output width");
    require(head_id.activation == head_res.activation, ErrorKind::InvariantViolation,
            "encoder heads use different activations");
}

void DecoderNet::validate() const
{
    require(weight_id.rows() == weight_res.rows() && weight_id.rows() % 3 == 0 && weight_id.rows() > 0,
            ErrorKind::InvariantViolation, "decoder output widths differ or are not 3n");
    require(bias_id.size() == weight_id.rows() && bias_res.size() == weight_res.rows(),
            ErrorKind::InvariantViolation, "decoder bias length does not match its output width");
}

void JointNet::validate() const
{
    encoder.validate();
    decoder.validate();
    require(decoder.weight_id.cols() == encoder.q_id(), ErrorKind::InvariantViolation,
            "q_id: decoder width " + std::to_string(decoder.weight_id.cols()) + " differs from encoder head " +
                std::to_string(encoder.q_id()));
    require(decoder.weight_res.cols() == encoder.q_res(), ErrorKind::InvariantViolation,
            "q_res: decoder width " + std::to_string(decoder.weight_res.cols()) + " differs from encoder head " +
                std::to_string(encoder.q_res()));
    require(head.weight.cols() == encoder.q_id(), ErrorKind::InvariantViolation,
            "q_id: classifier width " + std::to_string(head.weight.cols()) + " differs from encoder head " +
                std::to_string(encoder.q_id()));
    require(head.bias.size() == head.weight.rows() && head.classes() >= 1, ErrorKind::InvariantViolation,
            "classifier bias length does not match its class count");
}

EncoderNet make_encoder(int input_dim, std::span<const int> hidden, int q_id, int q_res, Rng& rng)
{
    require(input_dim >= 1 && q_id >= 1 && q_res >= 1, ErrorKind::InvalidArgument, "encoder widths must be >= 1");
    EncoderNet net;
    int in = input_dim;
    for (const int h : hidden) {
        require(h >= 1, ErrorKind::InvalidArgument, "hidden widths must be >= 1");
        net.trunk.push_back(random_layer(in, h, Activation::Tanh, rng));
        in = h;
    }
    net.head_id = random_layer(in, q_id, Activation::Tanh, rng);
    net.head_res = random_layer(in, q_res, Activation::Tanh, rng);
    return net;
}

DecoderNet make_decoder(int coord_dim, int q_id, int q_res)
{
    require(coord_dim > 0 && coord_dim % 3 == 0, ErrorKind::InvalidArgument, "decoder output must be 3n");
    return {Matrix::Zero(coord_dim, q_id), Vector::Zero(coord_dim), Matrix::Zero(coord_dim, q_res),
            Vector::Zero(coord_dim)};
}

ClassifierHead make_head(int q_id, int classes, Rng& rng)
{
    require(classes >= 1, ErrorKind::InvalidArgument, "classifier needs at least one class");
    DenseLayer layer = random_layer(q_id, classes, Activation::Linear, rng);
    return {std::move(layer.weight), std::move(layer.bias)};
}

LatentCode encoder_forward(const EncoderNet& net, const Vector& image)
{
    Matrix c_id, c_res;
    encoder_forward_batch(net, image, c_id, c_res);
    return {c_id.col(0), c_res.col(0)};
}

void encoder_forward_batch(const EncoderNet& net, const Matrix& images, Matrix& c_id, Matrix& c_res)
{
    ForwardCache cache = forward_cached(net, images);
    c_id = std::move(cache.c_id);
    c_res = std::move(cache.c_res);
}

ShapeDeltas decoder_forward(const DecoderNet& dec, const LatentCode& code)
{
    require(code.c_id.size() == dec.weight_id.cols() && code.c_res.size() == dec.weight_res.cols(),
            ErrorKind::InvalidArgument, "latent code widths do not match the decoder");
    return {dec.weight_id * code.c_id + dec.bias_id, dec.weight_res * code.c_res + dec.bias_res};
}

Shape reconstruct(const Shape& mean, const DecoderNet& dec, const LatentCode& code)
{
    const ShapeDeltas d = decoder_forward(dec, code);
    return compose_from_components(mean, d.delta_id, d.delta_res);
}

double reconstruction_loss(const Vector& predicted, const Vector& target)
{
    require(predicted.size() == target.size() && predicted.size() > 0, ErrorKind::InvalidArgument,
            "reconstruction loss needs equal, non-empty lengths");
    return (predicted - target).squaredNorm() / static_cast<double>(predicted.size());
}

double reconstruction_loss(const Shape& predicted, const Shape& target)
{
    return reconstruction_loss(predicted.coords(), target.coords());
}

double softmax_cross_entropy(const Vector& logits, int label)
{
    require(label >= 0 && label < logits.size(), ErrorKind::InvalidArgument,
            "label " + std::to_string(label) + " outside [0, " + std::to_string(logits.size()) + ")");
    const double zmax = logits.maxCoeff();
    return std::log((logits.array() - zmax).exp().sum()) - (logits(label) - zmax);
}

double identification_loss(const ClassifierHead& head, const Vector& c_id, int label)
{
    require(c_id.size() == head.weight.cols(), ErrorKind::InvalidArgument, "c_id width does not match the head");
    return softmax_cross_entropy(head.weight * c_id + head.bias, label);
}

LossReport joint_loss(double recon, double ident, double lambda_r)
{
    return {lambda_r * recon + ident, recon, ident, 0.0};
}

LossReport evaluate_batch(const JointNet& net, const Shape& mean, std::span<const TrainingExample> batch,
                          double lambda_r)
{
    const ForwardCache cache = forward_cached(net.encoder, stack_images(batch));
    return summarize(loss_terms(net, mean, batch, cache.c_id, cache.c_res, lambda_r), lambda_r);
}

JointNet backward(const JointNet& net, const Shape& mean, std::span<const TrainingExample> batch, double lambda_r,
                  LossReport* report)
{
    require(lambda_r >= 0.0, ErrorKind::InvalidArgument, "lambda_r must be non-negative");
    const ForwardCache cache = forward_cached(net.encoder, stack_images(batch));
    const LossTerms t = loss_terms(net, mean, batch, cache.c_id, cache.c_res, lambda_r);
    if (report != nullptr) {
        *report = summarize(t, lambda_r);
    }

    JointNet g = zeros_like(net);
    g.decoder.weight_id.noalias() = t.grad_shape * cache.c_id.transpose();
    g.decoder.bias_id = t.grad_shape.rowwise().sum();
    g.decoder.weight_res.noalias() = t.grad_shape * cache.c_res.transpose();
    g.decoder.bias_res = g.decoder.bias_id;
    g.head.weight.noalias() = t.grad_logits * cache.c_id.transpose();
    g.head.bias = t.grad_logits.rowwise().sum();

    const Matrix d_id = net.decoder.weight_id.transpose() * t.grad_shape + net.head.weight.transpose() * t.grad_logits;
    const Matrix d_res = net.decoder.weight_res.transpose() * t.grad_shape;
    g.encoder = encoder_backward_cached(net.encoder, cache, d_id, d_res);
    return g;
}

EncoderNet regression_backward(const EncoderNet& net, const Matrix& images, const Matrix& target_id,
                               const Matrix& target_res, double* loss)
{
    const ForwardCache cache = forward_cached(net, images);
    require(target_id.rows() == cache.c_id.rows() && target_id.cols() == cache.c_id.cols() &&
                target_res.rows() == cache.c_res.rows() && target_res.cols() == cache.c_res.cols(),
            ErrorKind::InvalidArgument, "regression targets do not match the encoder outputs");
    const double count = static_cast<double>(images.cols() * (target_id.rows() + target_res.rows()));
    const Matrix e_id = cache.c_id - target_id;
    const Matrix e_res = cache.c_res - target_res;
    if (loss != nullptr) {
        *loss = (e_id.squaredNorm() + e_res.squaredNorm()) / count;
    }
    return encoder_backward_cached(net, cache, e_id * (2.0 / count), e_res * (2.0 / count));
}

double regression_loss(const EncoderNet& net, const Matrix& images, const Matrix& target_id, const Matrix& target_res)
{
    Matrix c_id, c_res;
    encoder_forward_batch(net, images, c_id, c_res);
    require(target_id.rows() == c_id.rows() && target_id.cols() == c_id.cols() && target_res.rows() == c_res.rows() &&
                target_res.cols() == c_res.cols(),
            ErrorKind::InvalidArgument, "regression targets do not match the encoder outputs");
    return ((c_id - target_id).squaredNorm() + (c_res - target_res).squaredNorm()) /
           static_cast<double>(images.cols() * (target_id.rows() + target_res.rows()));
}

std::vector<std::span<double>> parameter_views(EncoderNet& net)
{
    std::vector<std::span<double>> out;
    for (DenseLayer& layer : net.trunk) {
        push(out, layer.weight);
        push(out, layer.bias);
    }
    push(out, net.head_id.weight);
    push(out, net.head_id.bias);
    push(out, net.head_res.weight);
    push(out, net.head_res.bias);
    return out;
}

std::vector<std::span<double>> parameter_views(JointNet& net)
{
    std::vector<std::span<double>> out = parameter_views(net.encoder);
    push(out, net.decoder.weight_id);
    push(out, net.decoder.bias_id);
    push(out, net.decoder.weight_res);
    push(out, net.decoder.bias_res);
    push(out, net.head.weight);
    push(out, net.head.bias);
    return out;
}

std::size_t parameter_count(const JointNet& net)
{
    std::size_t total = 0;
    for (const auto& v : parameter_views(const_cast<JointNet&>(net))) {
        total += v.size();
    }
    return total;
}

JointNet zeros_like(const JointNet& net)
{
    JointNet z = net;
    for (const auto& v : parameter_views(z)) {
        std::fill(v.begin(), v.end(), 0.0);
    }
    return z;
}

void AdamConfig::validate() const
{
    require(learning_rate > 0.0, ErrorKind::InvalidArgument, "learning_rate must be positive");
    require(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0, ErrorKind::InvalidArgument,
            "Adam betas must lie in [0, 1)");
    require(epsilon > 0.0, ErrorKind::InvalidArgument, "epsilon must be positive");
}

void adam_update(double& param, double& m, double& v, double grad, const AdamConfig& cfg, std::int64_t step)
{
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * grad;
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * grad * grad;
    const double m_hat = m / (1.0 - std::pow(cfg.beta1, static_cast<double>(step)));
    const double v_hat = v / (1.0 - std::pow(cfg.beta2, static_cast<double>(step)));
    param -= cfg.learning_rate * m_hat / (std::sqrt(v_hat) + cfg.epsilon);
}

Adam::Adam(std::span<const std::span<double>> params, AdamConfig config) : config_(config)
{
    config_.validate();
    for (const auto& p : params) {
        m_.emplace_back(p.size(), 0.0);
        v_.emplace_back(p.size(), 0.0);
    }
}

void Adam::step(std::span<const std::span<double>> params, std::span<const std::span<double>> grads)
{
    require(params.size() == m_.size() && grads.size() == m_.size(), ErrorKind::InvalidArgument,
            "parameter list does not match the optimizer state");
    ++step_;
    for (std::size_t k = 0; k < params.size(); ++k) {
        require(params[k].size() == m_[k].size() && grads[k].size() == m_[k].size(), ErrorKind::InvalidArgument,
                "parameter array " + std::to_string(k) + " changed size");
        for (std::size_t i = 0; i < params[k].size(); ++i) {
            adam_update(params[k][i], m_[k][i], v_[k][i], grads[k][i], config_, step_);
        }
    }
}

GradientCheck finite_diff_check(const JointNet& net, const Shape& mean, std::span<const TrainingExample> batch,
                                double lambda_r, double step, int coordinates, Rng& rng)
{
    require(step > 0.0, ErrorKind::InvalidArgument, "finite-difference step must be positive");
    require(coordinates >= 1, ErrorKind::InvalidArgument, "need at least one coordinate");
    JointNet analytic = backward(net, mean, batch, lambda_r);
    JointNet probe = net;
    const auto grads = parameter_views(analytic);
    const auto params = parameter_views(probe);
    std::size_t total = 0;
    for (const auto& p : params) {
        total += p.size();
    }
    const Matrix images = stack_images(batch);
    const ForwardCache cache = forward_cached(net.encoder, images);
    Matrix residual = decode_batch(net.decoder, mean, cache.c_id, cache.c_res);
    Matrix probs = net.head.weight * cache.c_id;
    probs.colwise() += net.head.bias;
    for (std::size_t b = 0; b < batch.size(); ++b) {
        const auto col = static_cast<Eigen::Index>(b);
        require(batch[b].target_shape.size() == residual.rows(), ErrorKind::InvalidArgument, "target shape length mismatch");
        residual.col(col) -= batch[b].target_shape;
        const Vector e = (probs.col(col).array() - probs.col(col).maxCoeff()).exp();
        probs.col(col) = e / e.sum();
    }

    GradientCheck out;
    for (int c = 0; c < coordinates; ++c) {
        std::size_t flat = rng.below(total);
        std::size_t k = 0;
        while (flat >= params[k].size()) {
            flat -= params[k].size();
            ++k;
        }
        double& x = params[k][flat];
        const double saved = x;
        x = saved + step;
        const double up = x - saved;
        const OutputDelta plus = output_delta(net, probe, cache, images);
        x = saved - step;
        const double down = saved - x;
        const OutputDelta minus = output_delta(net, probe, cache, images);
        x = saved;
        const LossDelta d = loss_delta(plus, minus, residual, probs, batch);
        const double numeric = (lambda_r * d.recon + d.ident) / (up + down);
        const double a = grads[k][flat];
        const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
        out.max_relative_error = std::max(out.max_relative_error, std::abs(a - numeric) / denom);
        ++out.coordinates;
    }
    return out;
}

} // namespace faceshape

// SPDX-License-Identifier: Apache-2.0
#include "faceshape/training.hpp"
#include "faceshape/error.hpp"

#include <Eigen/QR>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace faceshape {

namespace {

constexpr double kTargetClip = 0.99;

std::vector<int> shuffled(std::span<const int> indices, Rng& rng)
{
    std::vector<int> order(indices.begin(), indices.end());
    for (std::size_t i = order.size(); i > 1; --i) {
        std::swap(order[i - 1], order[rng.below(i)]);
    }
    return order;
}

void code_targets(const MorphableModel& model, const Dataset& data, std::span<const int> indices, Matrix& id,
                  Matrix& res)
{
    id.resize(model.basis_id.cols(), static_cast<Eigen::Index>(indices.size()));
    res.resize(model.basis_exp.cols(), static_cast<Eigen::Index>(indices.size()));
    for (std::size_t i = 0; i < indices.size(); ++i) {
        const LatentCode code = coefficient_code(model, data.samples.at(static_cast<std::size_t>(indices[i])).ground_truth_coeffs);
        id.col(static_cast<Eigen::Index>(i)) = code.c_id;
        res.col(static_cast<Eigen::Index>(i)) = code.c_res;
    }
}

bool all_finite(const std::vector<std::span<double>>& views)
{
    for (const auto& v : views) {
        for (const double x : v) {
            if (!std::isfinite(x)) {
                return false;
            }
        }
    }
    return true;
}

void check_widths(const EncoderNet& encoder, const MorphableModel& model, const Dataset& data)
{
    require(encoder.q_id() == model.basis_id.cols() && encoder.q_res() == model.basis_exp.cols(),
            ErrorKind::InvalidArgument,
            "latent widths (" + std::to_string(encoder.q_id()) + ", " + std::to_string(encoder.q_res()) +
                ") do not match basis widths (" + std::to_string(model.basis_id.cols()) + ", " +
                std::to_string(model.basis_exp.cols()) + ")");
    require(!data.split.train.empty(), ErrorKind::InvalidArgument, "training split is empty");
    require(encoder.input_dim() == data.spec.image_resolution * data.spec.image_resolution,
            ErrorKind::InvalidArgument, "encoder input does not match the raster size");
}

} // namespace

void TrainConfig::validate() const
{
    require(std::isfinite(lambda_r) && lambda_r >= 0.0, ErrorKind::InvalidArgument, "lambda_r must be >= 0");
    adam.validate();
    require(batch_size >= 1, ErrorKind::InvalidArgument, "batch_size must be >= 1");
    require(epochs >= 0, ErrorKind::InvalidArgument, "epochs must be >= 0");
}

void TrainingPlan::validate() const
{
    for (const int h : hidden) {
        require(h >= 1, ErrorKind::InvalidArgument, "hidden widths must be >= 1");
    }
    phase1.validate();
    phase3.validate();
    require(prior_samples >= 0, ErrorKind::InvalidArgument, "prior_samples must be >= 0");
    for (const LambdaStage& s : schedule) {
        require(s.epochs >= 0 && std::isfinite(s.lambda_r) && s.lambda_r >= 0.0, ErrorKind::InvalidArgument,
                "schedule stages need epochs >= 0 and lambda_r >= 0");
    }
}

std::vector<LambdaStage> default_schedule() { return {{10, 0.5}, {20, 1.0}}; }

LatentCode coefficient_code(const MorphableModel& model, const CoeffPair& coeffs, bool clip)
{
    require(coeffs.alpha_id.size() == model.sigma_id.size() && coeffs.alpha_exp.size() == model.sigma_exp.size(),
            ErrorKind::InvalidArgument, "coefficient lengths do not match the model");
    LatentCode code{coeffs.alpha_id.cwiseQuotient(3.0 * model.sigma_id),
                    coeffs.alpha_exp.cwiseQuotient(3.0 * model.sigma_exp)};
    if (clip) {
        code.c_id = code.c_id.cwiseMax(-kTargetClip).cwiseMin(kTargetClip);
        code.c_res = code.c_res.cwiseMax(-kTargetClip).cwiseMin(kTargetClip);
    }
    return code;
}

std::vector<TrainingExample> training_examples(const Dataset& data, std::span<const int> indices)
{
    std::vector<TrainingExample> out;
    out.reserve(indices.size());
    for (const int i : indices) {
        const RenderedSample& s = data.samples.at(static_cast<std::size_t>(i));
        out.push_back({s.depth_image, s.subject_label, s.ground_truth_shape.coords()});
    }
    return out;
}

Matrix stack_depth_images(const Dataset& data, std::span<const int> indices)
{
    require(!indices.empty(), ErrorKind::InvalidArgument, "no samples selected");
    const auto dim = data.samples.at(static_cast<std::size_t>(indices.front())).depth_image.size();
    Matrix x(dim, static_cast<Eigen::Index>(indices.size()));
    for (std::size_t i = 0; i < indices.size(); ++i) {
        x.col(static_cast<Eigen::Index>(i)) = data.samples.at(static_cast<std::size_t>(indices[i])).depth_image;
    }
    return x;
}

Phase1Result train_phase1(EncoderNet& encoder, const MorphableModel& model, const Dataset& data,
                          const TrainConfig& cfg)
{
    cfg.validate();
    encoder.validate();
    check_widths(encoder, model, data);
    const std::span<const int> train = data.split.train;
    const std::span<const int> val = data.split.validation;

    Matrix train_x = stack_depth_images(data, train);
    Matrix train_id, train_res;
    code_targets(model, data, train, train_id, train_res);
    Matrix val_x, val_id, val_res;
    if (!val.empty()) {
        val_x = stack_depth_images(data, val);
        code_targets(model, data, val, val_id, val_res);
    }
    const auto record = [&](int epoch) {
        const double v = val.empty() ? std::numeric_limits<double>::quiet_NaN()
                                     : regression_loss(encoder, val_x, val_id, val_res);
        return EpochLoss{epoch, regression_loss(encoder, train_x, train_id, train_res), v};
    };

    Phase1Result result;
    result.trace.push_back(record(0));
    Rng rng(cfg.seed);
    const auto params = parameter_views(encoder);
    Adam adam(params, cfg.adam);
    const auto bs = static_cast<std::size_t>(cfg.batch_size);
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        const std::vector<int> order = shuffled(std::span<const int>(data.split.train), rng);
        for (std::size_t start = 0; start < order.size(); start += bs) {
            const std::span<const int> batch(order.data() + start, std::min(bs, order.size() - start));
            Matrix id, res;
            code_targets(model, data, batch, id, res);
            EncoderNet grad = regression_backward(encoder, stack_depth_images(data, batch), id, res);
            adam.step(params, parameter_views(grad));
        }
        require(all_finite(params), ErrorKind::NumericalFailure,
                "encoder parameters became non-finite in epoch " + std::to_string(epoch));
        result.trace.push_back(record(epoch));
    }
    return result;
}

AffineMap fit_affine_map(const Matrix& codes, const Matrix& targets)
{
    require(codes.cols() == targets.cols() && codes.cols() >= 1, ErrorKind::InvalidArgument,
            "codes and targets need the same, positive number of columns");
    require(codes.allFinite() && targets.allFinite(), ErrorKind::InvalidArgument, "non-finite training pairs");
    const Eigen::Index q = codes.rows();
    Matrix design(codes.cols(), q + 1);
    design.leftCols(q) = codes.transpose();
    design.col(q).setOnes();
    Eigen::ColPivHouseholderQR<Matrix> qr(design);
    qr.setThreshold(1e-10);
    require(qr.rank() == q + 1, ErrorKind::Underdetermined,
            "decoder fit has rank " + std::to_string(qr.rank()) + " but needs " + std::to_string(q + 1) +
                " (codes plus bias)");
    const Matrix solution = qr.solve(Matrix(targets.transpose()));
    return {solution.topRows(q).transpose(), solution.row(q).transpose()};
}

DecoderNet train_phase2(const MorphableModel& model, const Dataset& data, int prior_samples, std::uint64_t seed)
{
    require(prior_samples >= 0, ErrorKind::InvalidArgument, "prior_samples must be >= 0");
    const std::size_t n = data.split.train.size() + static_cast<std::size_t>(prior_samples);
    require(n >= 1, ErrorKind::Underdetermined, "no training pairs for the decoder");
    std::vector<CoeffPair> coeffs;
    coeffs.reserve(n);
    for (const int i : data.split.train) {
        coeffs.push_back(data.samples.at(static_cast<std::size_t>(i)).ground_truth_coeffs);
    }
    Rng rng(seed);
    for (int i = 0; i < prior_samples; ++i) {
        CoeffPair c{sample_subject(model, rng), Vector(model.sigma_exp.size())};
        for (Eigen::Index k = 0; k < c.alpha_exp.size(); ++k) {
            c.alpha_exp(k) = model.sigma_exp(k) * rng.normal();
        }
        coeffs.push_back(std::move(c));
    }

    const auto cols = static_cast<Eigen::Index>(n);
    Matrix code_id(model.basis_id.cols(), cols), code_res(model.basis_exp.cols(), cols);
    Matrix target_id(model.mean.coords().size(), cols), target_res(model.mean.coords().size(), cols);
    for (Eigen::Index j = 0; j < cols; ++j) {
        const CoeffPair& c = coeffs[static_cast<std::size_t>(j)];
        const LatentCode code = coefficient_code(model, c, false);
        code_id.col(j) = code.c_id;
        code_res.col(j) = code.c_res;
        target_id.col(j) = model.basis_id * c.alpha_id;
        target_res.col(j) = model.basis_exp * c.alpha_exp;
    }
    AffineMap id = fit_affine_map(code_id, target_id);
    AffineMap res = fit_affine_map(code_res, target_res);
    DecoderNet dec{std::move(id.weight), std::move(id.bias), std::move(res.weight), std::move(res.bias)};
    dec.validate();
    return dec;
}

Phase3Result train_phase3(JointNet& net, const MorphableModel& model, const Dataset& data, const TrainConfig& cfg,
                          std::span<const LambdaStage> schedule)
{
    cfg.validate();
    net.validate();
    check_widths(net.encoder, model, data);
    require(net.head.classes() == data.split.n_train_subjects, ErrorKind::InvalidArgument,
            "classifier has " + std::to_string(net.head.classes()) + " classes but the training split has " +
                std::to_string(data.split.n_train_subjects) + " subjects");
    const std::vector<TrainingExample> all = training_examples(data, data.split.train);

    Phase3Result result;
    Rng rng(cfg.seed);
    const auto params = parameter_views(net);
    Adam adam(params, cfg.adam);
    JointNet last_good = net;
    const auto bs = static_cast<std::size_t>(cfg.batch_size);
    int epoch = 0;
    for (const LambdaStage& stage : schedule) {
        require(stage.epochs >= 0 && stage.lambda_r >= 0.0, ErrorKind::InvalidArgument, "invalid schedule stage");
        for (int e = 0; e < stage.epochs; ++e) {
            ++epoch;
            try {
                std::vector<int> order(all.size());
                std::iota(order.begin(), order.end(), 0);
                order = shuffled(order, rng);
                std::vector<TrainingExample> batch;
                for (std::size_t start = 0; start < order.size(); start += bs) {
                    batch.clear();
                    for (std::size_t i = start; i < std::min(order.size(), start + bs); ++i) {
                        batch.push_back(all[static_cast<std::size_t>(order[i])]);
                    }
                    JointNet grad = backward(net, model.mean, batch, stage.lambda_r);
                    adam.step(params, parameter_views(grad));
                }
                require(all_finite(params), ErrorKind::NumericalFailure, "parameters became non-finite");
                result.trace.push_back({epoch, stage.lambda_r, evaluate_batch(net, model.mean, all, stage.lambda_r)});
            } catch (const Error& err) {
                if (err.kind() != ErrorKind::NumericalFailure) {
                    throw;
                }
                net = last_good;
                result.aborted = true;
                result.abort_reason = "epoch " + std::to_string(epoch) + ": " + err.what();
                return result;
            }
            last_good = net;
        }
    }
    return result;
}

double classification_accuracy(const JointNet& net, const MorphableModel& model, const Dataset& data,
                               std::span<const int> indices)
{
    const std::vector<TrainingExample> examples = training_examples(data, indices);
    return evaluate_batch(net, model.mean, examples, 1.0).accuracy;
}

ClassifierHead class_mean_head(const EncoderNet& encoder, const Dataset& data)
{
    const int classes = data.split.n_train_subjects;
    require(classes >= 1, ErrorKind::InvalidArgument, "no training subjects");
    ClassifierHead head{Matrix::Zero(classes, encoder.q_id()), Vector::Zero(classes)};
    std::vector<int> counts(static_cast<std::size_t>(classes), 0);
    const std::vector<LatentCode> codes = [&] {
        std::vector<LatentCode> out;
        for (const int i : data.split.train) {
            out.push_back(encoder_forward(encoder, data.samples.at(static_cast<std::size_t>(i)).depth_image));
        }
        return out;
    }();
    for (std::size_t j = 0; j < codes.size(); ++j) {
        const int label = data.samples.at(static_cast<std::size_t>(data.split.train[j])).subject_label;
        require(label >= 0 && label < classes, ErrorKind::InvalidArgument, "training label outside the classifier");
        head.weight.row(label) += codes[j].c_id.transpose();
        ++counts[static_cast<std::size_t>(label)];
    }
    for (int k = 0; k < classes; ++k) {
        if (counts[static_cast<std::size_t>(k)] > 0) {
            head.weight.row(k) /= static_cast<double>(counts[static_cast<std::size_t>(k)]);
            head.bias(k) = -0.5 * head.weight.row(k).squaredNorm();
        }
    }
    return head;
}

JointNet make_initial_network(const MorphableModel& model, const Dataset& data, const TrainingPlan& plan)
{
    plan.validate();
    Rng init(plan.phase1.seed);
    Rng encoder_rng = init.split();
    Rng head_rng = init.split();
    const auto q_id = static_cast<int>(model.basis_id.cols());
    JointNet net{make_encoder(data.spec.image_resolution * data.spec.image_resolution, plan.hidden, q_id,
                              static_cast<int>(model.basis_exp.cols()), encoder_rng),
                 train_phase2(model, data, plan.prior_samples, plan.phase1.seed),
                 make_head(q_id, data.split.n_train_subjects, head_rng)};
    net.validate();
    return net;
}

TrainingRun run_training(const MorphableModel& model, const Dataset& data, const TrainingPlan& plan)
{
    plan.validate();
    Rng init(plan.phase1.seed);
    Rng encoder_rng = init.split();
    const int input_dim = data.spec.image_resolution * data.spec.image_resolution;
    const auto q_id = static_cast<int>(model.basis_id.cols());
    const auto q_res = static_cast<int>(model.basis_exp.cols());

    TrainingRun run;
    EncoderNet encoder = make_encoder(input_dim, plan.hidden, q_id, q_res, encoder_rng);
    run.phase1 = train_phase1(encoder, model, data, plan.phase1);
    DecoderNet decoder = train_phase2(model, data, plan.prior_samples, plan.phase1.seed);
    ClassifierHead head = class_mean_head(encoder, data);
    run.after_phase2 = JointNet{std::move(encoder), std::move(decoder), std::move(head)};
    run.final = run.after_phase2;
    run.phase3 = train_phase3(run.final, model, data, plan.phase3, plan.schedule);
    return run;
}

} // namespace faceshape

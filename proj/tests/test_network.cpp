// SPDX-License-Identifier: Apache-2.0
#include "oracles.hpp"

#include "faceshape/error.hpp"
#include "faceshape/network.hpp"
#include "faceshape/synthetic.hpp"
#include "faceshape/training.hpp"

#include "doctest.h"

#include <cmath>
#include <limits>

using namespace faceshape;

namespace {

constexpr int kInput = 64;
constexpr int kQid = 5;
constexpr int kQres = 3;
constexpr int kClasses = 4;
constexpr int kVerts = 10;

JointNet small_net(std::uint64_t seed, bool random_decoder = true)
{
    Rng rng(seed);
    const std::vector<int> hidden{16, 12};
    JointNet net{make_encoder(kInput, hidden, kQid, kQres, rng), make_decoder(3 * kVerts, kQid, kQres),
                 make_head(kQid, kClasses, rng)};
    if (random_decoder) {
        net.decoder.weight_id = Matrix(oracle::random_vector(3 * kVerts * kQid, rng, 0.3).reshaped(3 * kVerts, kQid));
        net.decoder.weight_res = Matrix(oracle::random_vector(3 * kVerts * kQres, rng, 0.3).reshaped(3 * kVerts, kQres));
        net.decoder.bias_id = oracle::random_vector(3 * kVerts, rng, 0.1);
        net.decoder.bias_res = oracle::random_vector(3 * kVerts, rng, 0.1);
    }
    return net;
}

std::vector<TrainingExample> small_batch(int n, std::uint64_t seed)
{
    Rng rng(seed);
    std::vector<TrainingExample> batch;
    for (int i = 0; i < n; ++i) {
        Vector image(kInput);
        for (Eigen::Index k = 0; k < kInput; ++k) {
            image(k) = rng.uniform(-1.0, 1.0);
        }
        batch.push_back({image, static_cast<int>(rng.below(kClasses)), oracle::random_vector(3 * kVerts, rng)});
    }
    return batch;
}

Shape small_mean()
{
    Rng rng(77);
    return Shape(oracle::random_vector(3 * kVerts, rng));
}

double max_abs(const std::vector<std::span<double>>& views, std::size_t from, std::size_t to)
{
    double m = 0.0;
    for (std::size_t k = from; k < to; ++k) {
        for (double x : views[k]) {
            m = std::max(m, std::abs(x));
        }
    }
    return m;
}

// Index range of the decoder arrays in parameter_views(JointNet).
std::pair<std::size_t, std::size_t> decoder_range(const JointNet& net)
{
    const std::size_t enc = 2 * (net.encoder.trunk.size() + 2);
    return {enc, enc + 4};
}

} // namespace

TEST_CASE("encoder_forward")
{
    SUBCASE("zero parameters give zero codes")
    {
        JointNet net = small_net(1);
        for (auto v : parameter_views(net.encoder)) {
            std::fill(v.begin(), v.end(), 0.0);
        }
        const LatentCode c = encoder_forward(net.encoder, Vector::Ones(kInput));
        CHECK(c.c_id.isZero(0.0));
        CHECK(c.c_res.isZero(0.0));
    }
    SUBCASE("codes stay strictly inside (-1, 1)")
    {
        JointNet net = small_net(2);
        for (auto v : parameter_views(net.encoder)) {
            for (double& x : v) {
                x *= 1000.0;
            }
        }
        Rng rng(3);
        for (int i = 0; i < 20; ++i) {
            const LatentCode c = encoder_forward(net.encoder, oracle::random_vector(kInput, rng));
            CHECK(c.c_id.cwiseAbs().maxCoeff() < 1.0);
            CHECK(c.c_res.cwiseAbs().maxCoeff() < 1.0);
        }
    }
    SUBCASE("matches the layer-by-layer oracle")
    {
        const JointNet net = small_net(4);
        Rng rng(5);
        for (int i = 0; i < 5; ++i) {
            const Vector x = oracle::random_vector(kInput, rng, 0.5);
            const LatentCode c = encoder_forward(net.encoder, x);
            const auto [id, res] = oracle::naive_encoder(net.encoder, x);
            CHECK((c.c_id - id).cwiseAbs().maxCoeff() < 1e-12);
            CHECK((c.c_res - res).cwiseAbs().maxCoeff() < 1e-12);
        }
        Matrix images(kInput, 3), c_id, c_res;
        for (int b = 0; b < 3; ++b) {
            images.col(b) = oracle::random_vector(kInput, rng);
        }
        encoder_forward_batch(net.encoder, images, c_id, c_res);
        for (int b = 0; b < 3; ++b) {
            CHECK((c_id.col(b) - encoder_forward(net.encoder, images.col(b)).c_id).cwiseAbs().maxCoeff() < 1e-12);
        }
    }
    SUBCASE("dimension mismatch")
    {
        const JointNet net = small_net(1);
        try {
            encoder_forward(net.encoder, Vector::Zero(kInput + 1));
            FAIL("expected an error");
        } catch (const Error& e) {
            CHECK(e.kind() == ErrorKind::InvalidArgument);
        }
    }
    SUBCASE("widths must chain")
    {
        JointNet net = small_net(1);
        net.encoder.trunk[1].weight = Matrix::Zero(12, 15);
        CHECK_THROWS_AS(net.validate(), Error);
    }
}

TEST_CASE("decoder_forward")
{
    const JointNet net = small_net(6);
    const DecoderNet& d = net.decoder;
    SUBCASE("zero code and bias")
    {
        const DecoderNet z = make_decoder(3 * kVerts, kQid, kQres);
        const ShapeDeltas out = decoder_forward(z, {Vector::Zero(kQid), Vector::Zero(kQres)});
        CHECK(out.delta_id.isZero(0.0));
        CHECK(out.delta_res.isZero(0.0));
    }
    SUBCASE("unit code picks a column")
    {
        for (int k = 0; k < kQid; ++k) {
            const ShapeDeltas out = decoder_forward(d, {Vector::Unit(kQid, k), Vector::Zero(kQres)});
            CHECK((out.delta_id - d.weight_id.col(k) - d.bias_id).cwiseAbs().maxCoeff() < 1e-15);
            CHECK((out.delta_res - d.bias_res).cwiseAbs().maxCoeff() == 0.0);
        }
    }
    SUBCASE("matrix-vector oracle and linearity")
    {
        Rng rng(7);
        const LatentCode c1{oracle::random_vector(kQid, rng), oracle::random_vector(kQres, rng)};
        const LatentCode c2{oracle::random_vector(kQid, rng), oracle::random_vector(kQres, rng)};
        const ShapeDeltas o1 = decoder_forward(d, c1);
        CHECK((o1.delta_id - oracle::matvec(d.weight_id, c1.c_id) - d.bias_id).cwiseAbs().maxCoeff() < 1e-12);
        CHECK((o1.delta_res - oracle::matvec(d.weight_res, c1.c_res) - d.bias_res).cwiseAbs().maxCoeff() < 1e-12);
        const double a = 0.3, b = -1.7;
        const ShapeDeltas o2 = decoder_forward(d, c2);
        const ShapeDeltas mix = decoder_forward(d, {a * c1.c_id + b * c2.c_id, a * c1.c_res + b * c2.c_res});
        CHECK((mix.delta_id - (a * o1.delta_id + b * o2.delta_id + (1 - a - b) * d.bias_id)).cwiseAbs().maxCoeff() <
              1e-10);
        CHECK((mix.delta_res - (a * o1.delta_res + b * o2.delta_res + (1 - a - b) * d.bias_res))
                  .cwiseAbs()
                  .maxCoeff() < 1e-10);
        const Shape mean = small_mean();
        const Shape s = reconstruct(mean, d, c1);
        CHECK((s.coords() - (mean.coords() + o1.delta_id + o1.delta_res)).cwiseAbs().maxCoeff() < 1e-12);
    }
    SUBCASE("dimension mismatch")
    {
        CHECK_THROWS_AS(decoder_forward(d, {Vector::Zero(kQid + 1), Vector::Zero(kQres)}), Error);
    }
}

TEST_CASE("reconstruction_loss")
{
    Rng rng(8);
    const Vector a = oracle::random_vector(30, rng);
    CHECK(reconstruction_loss(a, a) == 0.0);
    CHECK(reconstruction_loss(Vector(a.array() + 1.0), a) == doctest::Approx(1.0).epsilon(1e-14));
    const Vector b = oracle::random_vector(30, rng);
    double expect = 0.0;
    for (Eigen::Index i = 0; i < 30; ++i) {
        expect += (a(i) - b(i)) * (a(i) - b(i));
    }
    CHECK(reconstruction_loss(a, b) == doctest::Approx(expect / 30.0).epsilon(1e-14));
    CHECK(reconstruction_loss(Shape(a), Shape(b)) == doctest::Approx(expect / 30.0).epsilon(1e-14));
    CHECK_THROWS_AS(reconstruction_loss(a, Vector(b.head(27))), Error);
}

TEST_CASE("identification_loss")
{
    for (int k : {2, 5, 20}) {
        CHECK(softmax_cross_entropy(Vector::Constant(k, 0.37), 1) == doctest::Approx(std::log(k)).epsilon(1e-14));
    }
    Vector z = Vector::Zero(6);
    double prev = INFINITY;
    for (int s = 0; s < 60; ++s) {
        z(2) = -10.0 + 0.5 * s;
        const double l = softmax_cross_entropy(z, 2);
        CHECK(l < prev);
        prev = l;
    }
    CHECK(softmax_cross_entropy(Vector::Constant(3, 1e300), 0) == doctest::Approx(std::log(3.0)));
    Rng rng(9);
    for (int t = 0; t < 10; ++t) {
        const Vector logits = oracle::random_vector(7, rng, 3.0);
        const int label = static_cast<int>(rng.below(7));
        CHECK(std::abs(softmax_cross_entropy(logits, label) - oracle::softmax_ce(logits, label)) < 1e-12);
    }
    const JointNet net = small_net(10);
    const Vector c = oracle::random_vector(kQid, rng, 0.5);
    const Vector logits = oracle::matvec(net.head.weight, c) + net.head.bias;
    CHECK(std::abs(identification_loss(net.head, c, 3) - oracle::softmax_ce(logits, 3)) < 1e-12);
    CHECK_THROWS_AS(identification_loss(net.head, c, kClasses), Error);
    CHECK_THROWS_AS(identification_loss(net.head, c, -1), Error);
}

TEST_CASE("joint_loss")
{
    CHECK(joint_loss(3.0, 1.25, 0.0).total == 1.25);
    CHECK(joint_loss(2.0, 1.0, 0.5).total == 2.0);
    const LossReport r = joint_loss(0.7, 1.9, 1.0);
    CHECK(r.total == doctest::Approx(0.7 + 1.9).epsilon(1e-15));
    CHECK(r.recon == 0.7);
    CHECK(r.ident == 1.9);

    const JointNet net = small_net(11);
    const auto batch = small_batch(6, 12);
    for (double lambda : {0.0, 0.5, 1.0, 3.0}) {
        const LossReport e = evaluate_batch(net, small_mean(), batch, lambda);
        CHECK(std::abs(e.total - (lambda * e.recon + e.ident)) < 1e-10);
        CHECK(std::abs(e.total - oracle::joint_loss(net, small_mean(), batch, lambda)) < 1e-12);
        CHECK(e.accuracy >= 0.0);
        CHECK(e.accuracy <= 1.0);
    }
}

TEST_CASE("backward")
{
    const Shape mean = small_mean();
    const auto batch = small_batch(5, 13);
    SUBCASE("no reconstruction weight means no decoder gradient")
    {
        JointNet g = backward(small_net(14), mean, batch, 0.0);
        const auto [from, to] = decoder_range(g);
        CHECK(max_abs(parameter_views(g), from, to) == 0.0);
        CHECK(max_abs(parameter_views(g), 0, from) > 0.0);
    }
    SUBCASE("matches central differences of the naive loss")
    {
        JointNet net = small_net(15);
        for (double lambda : {0.5, 1.0}) {
            JointNet g = backward(net, mean, batch, lambda);
            auto params = parameter_views(net);
            auto grads = parameter_views(g);
            const double h = 1e-5;
            double worst = 0.0;
            for (std::size_t k = 0; k < params.size(); ++k) {
                for (std::size_t i = 0; i < params[k].size(); i += 3) {
                    const double saved = params[k][i];
                    params[k][i] = saved + h;
                    const double up = oracle::joint_loss(net, mean, batch, lambda);
                    params[k][i] = saved - h;
                    const double down = oracle::joint_loss(net, mean, batch, lambda);
                    params[k][i] = saved;
                    const double numeric = (up - down) / (2 * h);
                    worst = std::max(worst, std::abs(numeric - grads[k][i]) / std::max(1e-3, std::abs(numeric)));
                }
            }
            CHECK(worst < 1e-6);
        }
    }
    SUBCASE("duplicated batch gives the same mean gradient")
    {
        JointNet net = small_net(16);
        std::vector<TrainingExample> twice = batch;
        twice.insert(twice.end(), batch.begin(), batch.end());
        JointNet a = backward(net, mean, batch, 1.0);
        JointNet b = backward(net, mean, twice, 1.0);
        const auto va = parameter_views(a), vb = parameter_views(b);
        double worst = 0.0;
        for (std::size_t k = 0; k < va.size(); ++k) {
            for (std::size_t i = 0; i < va[k].size(); ++i) {
                worst = std::max(worst, std::abs(va[k][i] - vb[k][i]));
            }
        }
        CHECK(worst < 1e-12);
    }
    SUBCASE("reports the loss it differentiates")
    {
        const JointNet net = small_net(17);
        LossReport r;
        backward(net, mean, batch, 0.5, &r);
        CHECK(std::abs(r.total - evaluate_batch(net, mean, batch, 0.5).total) < 1e-14);
    }
    SUBCASE("non-finite activations")
    {
        JointNet net = small_net(18);
        net.encoder.head_id.bias(0) = std::numeric_limits<double>::quiet_NaN();
        try {
            backward(net, mean, batch, 1.0);
            FAIL("expected an error");
        } catch (const Error& e) {
            CHECK(e.kind() == ErrorKind::NumericalFailure);
        }
        const std::vector<TrainingExample> empty;
        CHECK_THROWS_AS(backward(small_net(18), mean, empty, 1.0), Error);
    }
}

TEST_CASE("regression_backward")
{
    const JointNet net = small_net(19);
    Rng rng(20);
    Matrix images(kInput, 4), tid(kQid, 4), tres(kQres, 4);
    for (int b = 0; b < 4; ++b) {
        images.col(b) = oracle::random_vector(kInput, rng, 0.5);
        tid.col(b) = oracle::random_vector(kQid, rng, 0.3);
        tres.col(b) = oracle::random_vector(kQres, rng, 0.3);
    }
    double loss = 0.0;
    EncoderNet g = regression_backward(net.encoder, images, tid, tres, &loss);
    double expect = 0.0;
    for (int b = 0; b < 4; ++b) {
        const auto [id, res] = oracle::naive_encoder(net.encoder, images.col(b));
        expect += (id - tid.col(b)).squaredNorm() + (res - tres.col(b)).squaredNorm();
    }
    expect /= 4.0 * (kQid + kQres);
    CHECK(loss == doctest::Approx(expect).epsilon(1e-12));
    CHECK(regression_loss(net.encoder, images, tid, tres) == doctest::Approx(expect).epsilon(1e-12));

    EncoderNet probe = net.encoder;
    auto params = parameter_views(probe);
    auto grads = parameter_views(g);
    double worst = 0.0;
    for (std::size_t k = 0; k < params.size(); ++k) {
        for (std::size_t i = 0; i < params[k].size(); i += 5) {
            const double saved = params[k][i];
            params[k][i] = saved + 1e-5;
            const double up = regression_loss(probe, images, tid, tres);
            params[k][i] = saved - 1e-5;
            const double down = regression_loss(probe, images, tid, tres);
            params[k][i] = saved;
            const double numeric = (up - down) / 2e-5;
            worst = std::max(worst, std::abs(numeric - grads[k][i]) / std::max(1e-3, std::abs(numeric)));
        }
    }
    CHECK(worst < 1e-6);
}

TEST_CASE("optimizer_step")
{
    const AdamConfig cfg;
    SUBCASE("zero gradient leaves parameters unchanged")
    {
        JointNet net = small_net(21);
        const JointNet before = net;
        JointNet zero = zeros_like(net);
        Adam adam(parameter_views(net), cfg);
        for (int s = 0; s < 3; ++s) {
            adam.step(parameter_views(net), parameter_views(zero));
        }
        JointNet copy = before;
        const auto a = parameter_views(net), b = parameter_views(copy);
        for (std::size_t k = 0; k < a.size(); ++k) {
            for (std::size_t i = 0; i < a[k].size(); ++i) {
                CHECK(a[k][i] == b[k][i]);
            }
        }
    }
    SUBCASE("moves against a fixed gradient")
    {
        for (double g : {2.5, -0.01}) {
            double x = 1.0, m = 0.0, v = 0.0;
            for (int s = 1; s <= 100; ++s) {
                adam_update(x, m, v, g, cfg, s);
            }
            CHECK((g > 0 ? x < 1.0 : x > 1.0));
        }
    }
    SUBCASE("single step matches the closed form")
    {
        const double g = 0.3, x0 = -0.4;
        double x = x0, m = 0.0, v = 0.0;
        adam_update(x, m, v, g, cfg, 1);
        const double mh = (1 - cfg.beta1) * g / (1 - cfg.beta1);
        const double vh = (1 - cfg.beta2) * g * g / (1 - cfg.beta2);
        CHECK(x == doctest::Approx(x0 - cfg.learning_rate * mh / (std::sqrt(vh) + cfg.epsilon)).epsilon(1e-15));
        // second step
        const double g2 = -0.1;
        adam_update(x, m, v, g2, cfg, 2);
        const double m2 = cfg.beta1 * (1 - cfg.beta1) * g + (1 - cfg.beta1) * g2;
        const double v2 = cfg.beta2 * (1 - cfg.beta2) * g * g + (1 - cfg.beta2) * g2 * g2;
        const double x2 = x0 - cfg.learning_rate * mh / (std::sqrt(vh) + cfg.epsilon) -
                          cfg.learning_rate * (m2 / (1 - cfg.beta1 * cfg.beta1)) /
                              (std::sqrt(v2 / (1 - cfg.beta2 * cfg.beta2)) + cfg.epsilon);
        CHECK(x == doctest::Approx(x2).epsilon(1e-14));
    }
    SUBCASE("decoder is frozen when the reconstruction weight is zero")
    {
        JointNet net = small_net(22);
        const JointNet before = net;
        const auto batch = small_batch(4, 23);
        Adam adam(parameter_views(net), cfg);
        for (int s = 0; s < 5; ++s) {
            JointNet g = backward(net, small_mean(), batch, 0.0);
            adam.step(parameter_views(net), parameter_views(g));
        }
        CHECK((net.decoder.weight_id.array() == before.decoder.weight_id.array()).all());
        CHECK((net.decoder.bias_res.array() == before.decoder.bias_res.array()).all());
        CHECK((net.head.weight.array() != before.head.weight.array()).any());
    }
    SUBCASE("config validation")
    {
        AdamConfig bad;
        bad.learning_rate = 0.0;
        CHECK_THROWS_AS(bad.validate(), Error);
    }
}

TEST_CASE("finite_diff_check")
{
    const Shape mean = small_mean();
    const auto batch = small_batch(6, 24);
    SUBCASE("linear network")
    {
        JointNet net = small_net(25);
        for (auto& layer : net.encoder.trunk) {
            layer.activation = Activation::Linear;
        }
        net.encoder.head_id.activation = Activation::Linear;
        net.encoder.head_res.activation = Activation::Linear;
        Rng rng(1);
        const GradientCheck c = finite_diff_check(net, mean, batch, 1.0, 1e-6, 300, rng);
        CHECK(c.coordinates == 300);
        CHECK(c.max_relative_error < 1e-9);
    }
    SUBCASE("tanh network and determinism")
    {
        const JointNet net = small_net(26);
        Rng a(2), b(2);
        const GradientCheck c1 = finite_diff_check(net, mean, batch, 0.5, 1e-6, 300, a);
        const GradientCheck c2 = finite_diff_check(net, mean, batch, 0.5, 1e-6, 300, b);
        CHECK(c1.max_relative_error < 1e-5);
        CHECK(c1.max_relative_error == c2.max_relative_error);
    }
    SUBCASE("argument validation")
    {
        const JointNet net = small_net(27);
        Rng rng(3);
        CHECK_THROWS_AS(finite_diff_check(net, mean, batch, 1.0, 0.0, 10, rng), Error);
        CHECK_THROWS_AS(finite_diff_check(net, mean, batch, 1.0, 1e-6, 0, rng), Error);
    }
    SUBCASE("default network at initialisation")
    {
        const MorphableModel model = generate_model(SyntheticModelSpec{});
        const Dataset data = build_dataset(model, DatasetSpec{});
        const JointNet net = make_initial_network(model, data, TrainingPlan{});
        const std::vector<int> first(data.split.train.begin(), data.split.train.begin() + 16);
        Rng rng(4);
        const GradientCheck c = finite_diff_check(net, model.mean, training_examples(data, first), 1.0, 1e-6, 200, rng);
        CHECK(c.max_relative_error < 1e-5);
    }
}

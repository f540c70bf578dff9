// SPDX-License-Identifier: Apache-2.0
// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any criterion fails.

#include "../oracles.hpp"

#include "faceshape/cli.hpp"
#include "faceshape/error.hpp"
#include "faceshape/evaluation.hpp"
#include "faceshape/fitting.hpp"
#include "faceshape/io.hpp"
#include "faceshape/synthetic.hpp"
#include "faceshape/training.hpp"

#include "Eigen/SVD"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

using namespace faceshape;
namespace fs = std::filesystem;

namespace {

// Pinned tolerances.
constexpr int kSeeds = 20;
constexpr int kMedianPasses = 7;
constexpr int kMaxPasses = 10;
constexpr double kFitVertexTol = 1e-5;
constexpr double kTraceSlack = 1e-9;
constexpr double kFitSeconds = 10.0;
constexpr double kNoiseFraction = 0.01;
constexpr double kNoiseSeconds = 60.0;
constexpr int kSolverInstances = 50;
constexpr double kSolverTol = 1e-8;
constexpr double kMaxCondition = 1e6;
constexpr double kGradStep = 1e-6;
constexpr int kGradCoordinates = 200;
constexpr double kGradTol = 1e-5;
constexpr double kGradSeconds = 30.0;
constexpr double kPhase2Mse = 1e-10;
constexpr double kPhase2Projection = 1e-8;
constexpr double kMinAuc = 0.90;
constexpr double kRmseRatio = 1.10;
constexpr double kTrainSeconds = 600.0;
constexpr double kMinDisplacement = 0.5;
constexpr double kAucOracleTol = 1e-10;
constexpr double kProcrustesTol = 1e-9;
constexpr double kRigidTol = 1e-9;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

int failures = 0;

void report(int id, const char* name, bool pass, const std::string& detail)
{
    std::printf("%s %2d %s: %s\n", pass ? "PASS" : "FAIL", id, name, detail.c_str());
    std::fflush(stdout);
    failures += pass ? 0 : 1;
}

// Runs a criterion body; an exception counts as a failure with its message.
void criterion(int id, const char* name, const std::function<bool(std::string&)>& body)
{
    std::string detail;
    bool pass = false;
    try {
        pass = body(detail);
    } catch (const std::exception& e) {
        detail += (detail.empty() ? "" : "; ") + std::string("threw: ") + e.what();
    }
    report(id, name, pass, detail);
}

std::string fmt(const char* f, double v)
{
    char buf[64];
    std::snprintf(buf, sizeof(buf), f, v);
    return buf;
}

double median(std::vector<double> v)
{
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double max_vertex_distance(const Vector& a, const Vector& b)
{
    double m = 0.0;
    for (Eigen::Index v = 0; v < a.size() / 3; ++v) {
        const Eigen::Vector3d d = a.segment<3>(3 * v) - b.segment<3>(3 * v);
        m = std::max(m, oracle::norm3(d.x(), d.y(), d.z()));
    }
    return m;
}

double rms_vertex_distance(const Vector& a, const Vector& b)
{
    return std::sqrt((a - b).squaredNorm() / static_cast<double>(a.size() / 3));
}

LandmarkSet2D noiseless(const MorphableModel& m, const CoeffPair& c, const PoseParams& pose)
{
    Rng unused(0);
    return render_landmarks(m, c, pose, 0.0, unused);
}

double projected_extent(const LandmarkSet2D& u)
{
    double lo[2] = {INFINITY, INFINITY}, hi[2] = {-INFINITY, -INFINITY};
    for (int l = 0; l < u.count(); ++l) {
        for (int k = 0; k < 2; ++k) {
            lo[k] = std::min(lo[k], u.points(2 * l + k));
            hi[k] = std::max(hi[k], u.points(2 * l + k));
        }
    }
    return std::max(hi[0] - lo[0], hi[1] - lo[1]);
}

double relative_error(const Vector& a, const Vector& b) { return (a - b).norm() / std::max(b.norm(), 1e-300); }

double condition_number(const Matrix& a)
{
    const Eigen::JacobiSVD<Matrix> svd(a);
    const Vector s = svd.singularValues();
    return s(0) / s(s.size() - 1);
}

bool criterion1(const MorphableModel& model, std::string& detail)
{
    const auto t0 = Clock::now();
    std::vector<double> passes;
    int worst_passes = 0, not_converged = 0, non_monotone = 0;
    double worst_err = 0.0;
    for (int seed = 1; seed <= kSeeds; ++seed) {
        Rng rng(static_cast<std::uint64_t>(seed));
        const Vector alpha_id = sample_subject(model, rng);
        std::vector<LandmarkSet2D> lms;
        for (int j = 0; j < 5; ++j) {
            const InstanceDraw d = sample_instance(model, DatasetSpec{}, rng);
            lms.push_back(noiseless(model, {alpha_id, d.alpha_exp}, d.pose));
        }
        const FitResult r = multi_image_fit(model, lms, FitConfig{});
        const Vector fitted = model.mean.coords() + oracle::matvec(model.basis_id, r.alpha_id);
        const Vector truth = model.mean.coords() + oracle::matvec(model.basis_id, alpha_id);
        worst_err = std::max(worst_err, max_vertex_distance(fitted, truth));
        passes.push_back(r.iterations_used);
        worst_passes = std::max(worst_passes, r.iterations_used);
        not_converged += r.converged ? 0 : 1;
        for (std::size_t k = 1; k < r.objective_trace.size(); ++k) {
            if (r.objective_trace[k] > r.objective_trace[k - 1] + kTraceSlack) {
                ++non_monotone;
                break;
            }
        }
    }
    const double secs = seconds_since(t0);
    const double med = median(passes);
    detail = "median passes " + fmt("%g", med) + " (<= 7), max passes " + std::to_string(worst_passes) +
             " (<= 10), unconverged " + std::to_string(not_converged) + ", max vertex error " +
             fmt("%.3g", worst_err) + " (< 1e-5), non-monotone traces " + std::to_string(non_monotone) + ", " +
             fmt("%.2f", secs) + " s (< 10)";
    return med <= kMedianPasses && worst_passes <= kMaxPasses && not_converged == 0 && worst_err < kFitVertexTol &&
           non_monotone == 0 && secs < kFitSeconds;
}

bool criterion2(const MorphableModel& model, std::string& detail)
{
    const auto t0 = Clock::now();
    std::vector<double> err1, err5;
    for (int seed = 1; seed <= kSeeds; ++seed) {
        Rng rng(static_cast<std::uint64_t>(seed));
        const Vector alpha_id = sample_subject(model, rng);
        std::vector<LandmarkSet2D> lms;
        for (int j = 0; j < 5; ++j) {
            const InstanceDraw d = sample_instance(model, DatasetSpec{}, rng);
            const double sigma = kNoiseFraction * projected_extent(noiseless(model, {alpha_id, d.alpha_exp}, d.pose));
            lms.push_back(render_landmarks(model, {alpha_id, d.alpha_exp}, d.pose, sigma, rng));
        }
        const Vector truth = model.mean.coords() + oracle::matvec(model.basis_id, alpha_id);
        const FitResult one = multi_image_fit(model, std::span(lms).first(1), FitConfig{});
        const FitResult five = multi_image_fit(model, lms, FitConfig{});
        err1.push_back(rms_vertex_distance(model.mean.coords() + oracle::matvec(model.basis_id, one.alpha_id), truth));
        err5.push_back(rms_vertex_distance(model.mean.coords() + oracle::matvec(model.basis_id, five.alpha_id), truth));
    }
    const double secs = seconds_since(t0);
    const double m1 = median(err1), m5 = median(err5);
    detail = "median RMS identity error M=5 " + fmt("%.4g", m5) + " < M=1 " + fmt("%.4g", m1) + ", " +
             fmt("%.2f", secs) + " s (< 60)";
    return m5 < m1 && secs < kNoiseSeconds;
}

bool criterion3(const MorphableModel& model, std::string& detail)
{
    Rng rng(3);
    double worst_exp = 0.0, worst_id = 0.0, worst_cond = 0.0;
    int redrawn = 0;
    const double regs[] = {0.0, 1e-3, 0.1, 1.0};
    for (int inst = 0; inst < kSolverInstances; ++inst) {
        const double reg = regs[inst % 4];
        const Vector alpha_id = sample_subject(model, rng);
        const int m = 1 + inst % 5;
        std::vector<ImageObservation> obs;
        Matrix a_id(0, model.id_dim());
        Vector b_id(0);
        for (int j = 0; j < m; ++j) {
            const InstanceDraw d = sample_instance(model, DatasetSpec{}, rng);
            LandmarkSet2D u = noiseless(model, {alpha_id, d.alpha_exp}, d.pose);
            u.points += oracle::random_vector(u.points.size(), rng, 0.3);
            obs.push_back({d.alpha_exp, d.pose, u});
            const Matrix a = oracle::landmark_design(model.basis_id, model.landmark_indices, d.pose.scale, d.pose.rotation);
            const Vector b =
                oracle::fixed_residual(u, oracle::landmark_shape(model, Vector::Zero(model.id_dim()), d.alpha_exp), d.pose);
            a_id.conservativeResize(a_id.rows() + a.rows(), Eigen::NoChange);
            a_id.bottomRows(a.rows()) = a;
            b_id.conservativeResize(b_id.size() + b.size());
            b_id.tail(b.size()) = b;
        }
        const ImageObservation& first = obs.front();
        const Matrix a_exp =
            oracle::landmark_design(model.basis_exp, model.landmark_indices, first.pose.scale, first.pose.rotation);
        const double cond = std::max(condition_number(a_id), condition_number(a_exp));
        if (cond >= kMaxCondition) {
            ++redrawn;
            --inst;
            continue;
        }
        worst_cond = std::max(worst_cond, cond);
        const Vector b_exp = oracle::fixed_residual(
            first.landmarks, oracle::landmark_shape(model, alpha_id, Vector::Zero(model.exp_dim())), first.pose);
        worst_exp = std::max(worst_exp, relative_error(solve_expression(model, alpha_id, first.pose, first.landmarks, reg),
                                                       oracle::normal_equations(a_exp, b_exp, reg, model.sigma_exp)));
        worst_id = std::max(worst_id, relative_error(solve_identity_shared(model, obs, reg),
                                                     oracle::normal_equations(a_id, b_id, reg, model.sigma_id)));
    }
    detail = "max relative error expression " + fmt("%.3g", worst_exp) + ", identity " + fmt("%.3g", worst_id) +
             " (< 1e-8) over 50 instances, max condition " + fmt("%.3g", worst_cond) + " (< 1e6), redrawn " +
             std::to_string(redrawn);
    return worst_exp < kSolverTol && worst_id < kSolverTol;
}

bool criterion4(const JointNet& init, const JointNet& trained, const MorphableModel& model, const Dataset& data,
                std::string& detail)
{
    const auto t0 = Clock::now();
    const std::size_t count = std::min<std::size_t>(16, data.split.train.size());
    const std::vector<TrainingExample> batch =
        training_examples(data, std::span<const int>(data.split.train.data(), count));
    Rng rng_a(4), rng_b(5);
    const GradientCheck a = finite_diff_check(init, model.mean, batch, 1.0, kGradStep, kGradCoordinates, rng_a);
    const GradientCheck b = finite_diff_check(trained, model.mean, batch, 1.0, kGradStep, kGradCoordinates, rng_b);
    const double secs = seconds_since(t0);
    detail = "max relative error at init " + fmt("%.3g", a.max_relative_error) + " and after joint training " +
             fmt("%.3g", b.max_relative_error) + " (< 1e-5) over " + std::to_string(a.coordinates) + " / " +
             std::to_string(b.coordinates) + " coordinates (>= 200), " + fmt("%.2f", secs) + " s (< 30)";
    return a.max_relative_error < kGradTol && b.max_relative_error < kGradTol && a.coordinates >= kGradCoordinates &&
           b.coordinates >= kGradCoordinates && secs < kGradSeconds;
}

bool criterion5(const DecoderNet& dec, const MorphableModel& model, const Dataset& data, std::string& detail)
{
    double mse = 0.0;
    for (const int i : data.split.test) {
        const CoeffPair& c = data.samples.at(static_cast<std::size_t>(i)).ground_truth_coeffs;
        const LatentCode code = coefficient_code(model, c, false);
        const Vector pred = oracle::matvec(dec.weight_id, code.c_id) + dec.bias_id;
        const Vector truth = oracle::matvec(model.basis_id, c.alpha_id);
        mse += (pred - truth).squaredNorm() / static_cast<double>(pred.size());
    }
    mse /= static_cast<double>(data.split.test.size());

    // Orthonormal basis of span(W_id) by modified Gram-Schmidt.
    std::vector<Vector> q;
    for (Eigen::Index k = 0; k < dec.weight_id.cols(); ++k) {
        Vector v = dec.weight_id.col(k);
        for (const Vector& e : q) {
            v -= e.dot(v) * e;
        }
        for (const Vector& e : q) {
            v -= e.dot(v) * e;
        }
        if (v.norm() > 1e-12 * dec.weight_id.col(k).norm()) {
            q.push_back(v / v.norm());
        }
    }
    double worst = 0.0;
    for (int k = 0; k < model.id_dim(); ++k) {
        Vector r = model.basis_id.col(k);
        for (const Vector& e : q) {
            r -= e.dot(r) * e;
        }
        worst = std::max(worst, r.norm());
    }
    detail = "held-out identity component MSE " + fmt("%.3g", mse) + " (< 1e-10), max A_id column residual " +
             fmt("%.3g", worst) + " (< 1e-8), rank " + std::to_string(q.size());
    return mse < kPhase2Mse && worst < kPhase2Projection;
}

struct HeldOut
{
    double auc = 0.0;
    double rmse = 0.0;
};

HeldOut held_out(const JointNet& net, const MorphableModel& model, const Dataset& data)
{
    const std::vector<int>& test = data.split.test;
    std::vector<Vector> codes;
    std::vector<int> labels;
    for (const LatentCode& c : encode_samples(net.encoder, data, test)) {
        codes.push_back(c.c_id);
    }
    for (const int i : test) {
        labels.push_back(data.samples.at(static_cast<std::size_t>(i)).subject_label);
    }
    HeldOut h;
    h.auc = verification_report(codes, labels, data.spec.seed).auc;
    h.rmse = evaluate_reconstruction(predict_shapes(net.encoder, net.decoder, model.mean, data, test),
                                     truth_shapes(data, test), model.landmark_indices, model.nose_tip_index,
                                     kDefaultCropRadius)
                 .rmse_paper;
    return h;
}

bool criterion6(const TrainingRun& run, double train_secs, const MorphableModel& model, const Dataset& data,
                std::string& detail)
{
    const HeldOut p2 = held_out(run.after_phase2, model, data);
    const HeldOut p3 = held_out(run.final, model, data);
    const double ratio = p3.rmse / p2.rmse;
    detail = "held-out AUC " + fmt("%.4f", p3.auc) + " (>= 0.90), phase II AUC " + fmt("%.4f", p2.auc) +
             ", RMSE ratio " + fmt("%.4f", ratio) + " (<= 1.10), aborted " + (run.phase3.aborted ? "yes" : "no") +
             ", training " + fmt("%.1f", train_secs) + " s (< 600)";
    return p3.auc >= kMinAuc && p3.auc >= p2.auc && ratio <= kRmseRatio && !run.phase3.aborted &&
           train_secs < kTrainSeconds;
}

bool criterion7(const JointNet& net, const MorphableModel& model, const Dataset& data, std::string& detail)
{
    const DisentanglingReport r = disentangling_report(network_encoder(net.encoder), model, data, data.split.test,
                                                       data.spec.seed);
    detail = "intra " + fmt("%.4f", r.intra_distance) + " < inter " + fmt("%.4f", r.inter_distance) +
             ", displacement ratio " + fmt("%.4f", r.displacement_ratio) + " (> 0.5) over " +
             std::to_string(r.expression_pairs) + " pairs";
    return !r.degenerate && r.intra_distance < r.inter_distance && r.displacement_ratio > kMinDisplacement;
}

bool criterion8(std::string& detail)
{
    Rng rng(8);
    std::vector<double> scores;
    std::vector<bool> genuine;
    std::vector<ScoredPair> pairs;
    for (int i = 0; i < 100; ++i) {
        const bool g = i % 2 == 0;
        scores.push_back(std::round((g ? 0.8 : 0.0) + rng.normal() * 8.0) / 8.0);
        genuine.push_back(g);
        pairs.push_back({scores.back(), g});
    }
    const RocCurve curve = roc_curve(pairs);
    const double auc_err = std::abs(auc(curve) - oracle::mann_whitney(scores, genuine));
    int roc_mismatch = 0;
    for (const RocPoint& p : curve.points) {
        if (std::isfinite(p.threshold)) {
            const oracle::Counts c = oracle::count_at(scores, genuine, p.threshold);
            roc_mismatch += (c.tar == p.tar && c.far == p.far) ? 0 : 1;
        }
    }
    std::vector<Vector> gallery, probes;
    std::vector<int> gl, pl;
    for (int s = 0; s < 10; ++s) {
        const Vector centre = oracle::random_vector(6, rng);
        gallery.push_back(centre + oracle::random_vector(6, rng, 0.5));
        gl.push_back(s);
        for (int k = 0; k < 3; ++k) {
            probes.push_back(centre + oracle::random_vector(6, rng, 0.5));
            pl.push_back(s);
        }
    }
    int rank_mismatch = 0;
    for (const int n : {1, 3, 5, 10}) {
        rank_mismatch += rank_n_identification(gallery, gl, probes, pl, n) == oracle::rank_n(gallery, gl, probes, pl, n)
                             ? 0
                             : 1;
    }
    const AccuracyStats folds = verification_accuracy_folds(pairs, 10);
    const auto [mean, sd] = oracle::fold_accuracy(scores, genuine, 10);
    const double fold_err = std::max(std::abs(folds.mean - mean), std::abs(folds.std - sd));
    detail = "AUC vs Mann-Whitney " + fmt("%.3g", auc_err) + " (< 1e-10), ROC mismatches " +
             std::to_string(roc_mismatch) + ", rank-N mismatches " + std::to_string(rank_mismatch) +
             ", fold accuracy error " + fmt("%.3g", fold_err);
    return auc_err < kAucOracleTol && roc_mismatch == 0 && rank_mismatch == 0 && fold_err < 1e-12;
}

bool criterion9(const MorphableModel& model, const Dataset& data, std::string& detail)
{
    Rng rng(9);
    const Points3 src = oracle::random_points(30, rng);
    SimilarityTransform known;
    known.scale = 1.7;
    known.rotation = oracle::random_rotation(rng);
    known.translation = Eigen::Vector3d(0.4, -1.2, 2.5);
    const SimilarityTransform got = procrustes_align(src, apply_transform(src, known));
    const double proc_err = std::max({std::abs(got.scale - known.scale),
                                      (got.rotation - known.rotation).cwiseAbs().maxCoeff(),
                                      (got.translation - known.translation).cwiseAbs().maxCoeff()});

    const std::vector<int> idx{data.split.test.begin(), data.split.test.begin() + 5};
    const std::vector<Shape> truth = truth_shapes(data, idx);
    std::vector<Shape> moved;
    for (const Shape& s : truth) {
        SimilarityTransform xf;
        xf.rotation = oracle::random_rotation(rng);
        xf.translation = oracle::random_vector(3, rng);
        moved.push_back(apply_transform(s, xf));
    }
    const double rigid = evaluate_reconstruction(moved, truth, model.landmark_indices, model.nose_tip_index,
                                                 kDefaultCropRadius)
                             .rmse_paper;

    const Shape& t = truth.front();
    const std::vector<int> crop = crop_indices(t, model.nose_tip_index, kDefaultCropRadius);
    Vector c = t.coords();
    c.segment<3>(3 * crop.back()) += Eigen::Vector3d(3.0, 4.0, 0.0);
    const Shape p{c};
    const double literal = rmse(std::span(&t, 1), std::span(&p, 1), crop);
    const double expect = 5.0 / static_cast<double>(crop.size());
    detail = "Procrustes error " + fmt("%.3g", proc_err) + " (< 1e-9), rigid-copy RMSE " + fmt("%.3g", rigid) +
             " (< 1e-9), single-vertex RMSE " + fmt("%.17g", literal) + " vs 5/" + std::to_string(crop.size());
    return proc_err < kProcrustesTol && rigid < kRigidTol && literal == expect;
}

int cli(const std::vector<std::string>& args, std::string& err)
{
    std::vector<const char*> argv{"faceshape"};
    for (const std::string& a : args) {
        argv.push_back(a.c_str());
    }
    std::ostringstream out, e;
    const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, e);
    err += e.str();
    return code;
}

bool criterion10(std::string& detail)
{
    const fs::path root = fs::temp_directory_path() / ("faceshape_acceptance_" + std::to_string(::getpid()));
    fs::remove_all(root);
    std::string err;
    int failed_steps = 0;
    for (const char* run : {"a", "b"}) {
        const std::string dir = (root / run).string();
        for (const char* cmd : {"gen-data", "fit", "train", "eval"}) {
            failed_steps += cli({cmd, "--seed", "1", "--out", dir}, err) == 0 ? 0 : 1;
        }
    }
    int files = 0, differing = 0;
    for (const auto& entry : fs::recursive_directory_iterator(root / "a")) {
        if (!entry.is_regular_file()) {
            continue;
        }
        ++files;
        const fs::path other = root / "b" / fs::relative(entry.path(), root / "a");
        if (!fs::exists(other) || read_file(entry.path()) != read_file(other)) {
            ++differing;
        }
    }
    int only_b = 0;
    for (const auto& entry : fs::recursive_directory_iterator(root / "b")) {
        only_b += entry.is_regular_file() && !fs::exists(root / "a" / fs::relative(entry.path(), root / "b")) ? 1 : 0;
    }
    fs::remove_all(root);
    detail = std::to_string(files) + " files compared, " + std::to_string(differing + only_b) +
             " differ, failed steps " + std::to_string(failed_steps) + (err.empty() ? "" : ", stderr: " + err);
    return failed_steps == 0 && differing == 0 && only_b == 0 && files > 10;
}

} // namespace

int main()
{
    const MorphableModel model = generate_model(SyntheticModelSpec{});
    const Dataset data = build_dataset(model, DatasetSpec{});

    criterion(1, "exact multi-image fit recovery", [&](std::string& d) { return criterion1(model, d); });
    criterion(2, "multi-image benefit under landmark noise", [&](std::string& d) { return criterion2(model, d); });
    criterion(3, "solver oracle equivalence", [&](std::string& d) { return criterion3(model, d); });

    const TrainingPlan plan;
    const JointNet init = make_initial_network(model, data, plan);
    const auto t0 = Clock::now();
    const TrainingRun run = run_training(model, data, plan);
    const double train_secs = seconds_since(t0);

    criterion(4, "gradient exactness", [&](std::string& d) { return criterion4(init, run.final, model, data, d); });
    criterion(5, "closed-form decoder subspace recovery",
              [&](std::string& d) { return criterion5(run.after_phase2.decoder, model, data, d); });
    criterion(6, "joint-training verification and reconstruction",
              [&](std::string& d) { return criterion6(run, train_secs, model, data, d); });
    criterion(7, "disentangling diagnostics", [&](std::string& d) { return criterion7(run.final, model, data, d); });
    criterion(8, "metric oracles", criterion8);
    criterion(9, "geometry oracles", [&](std::string& d) { return criterion9(model, data, d); });
    criterion(10, "CLI reproducibility", criterion10);

    std::printf("%d of 10 criteria passed\n", 10 - failures);
    return failures == 0 ? 0 : 1;
}

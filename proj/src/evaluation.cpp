// SPDX-License-Identifier: Apache-2.0
#include "faceshape/evaluation.hpp"
#include "faceshape/error.hpp"
#include "faceshape/random.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

namespace faceshape {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

void check_pairs(std::span<const ScoredPair> pairs)
{
    bool genuine = false;
    bool impostor = false;
    for (const ScoredPair& p : pairs) {
        require(std::isfinite(p.score), ErrorKind::InvalidArgument, "scores must be finite");
        genuine = genuine || p.is_genuine;
        impostor = impostor || !p.is_genuine;
    }
    require(genuine && impostor, ErrorKind::InvalidArgument, "need at least one genuine and one impostor pair");
}

// Curve points sorted by FAR, then TAR.
std::vector<RocPoint> by_far(const RocCurve& curve)
{
    require(curve.points.size() >= 2, ErrorKind::InvalidArgument, "ROC curve needs at least two points");
    std::vector<RocPoint> pts = curve.points;
    std::stable_sort(pts.begin(), pts.end(), [](const RocPoint& a, const RocPoint& b) {
        return a.far < b.far || (a.far == b.far && a.tar < b.tar);
    });
    return pts;
}

std::size_t count_correct(std::span<const ScoredPair> pairs, double threshold)
{
    std::size_t correct = 0;
    for (const ScoredPair& p : pairs) {
        correct += (p.score >= threshold) == p.is_genuine ? 1 : 0;
    }
    return correct;
}

} // namespace

double cosine_similarity(const Vector& a, const Vector& b)
{
    require(a.size() == b.size(), ErrorKind::InvalidArgument, "cosine similarity of vectors with different lengths");
    const double na = a.norm();
    const double nb = b.norm();
    require(na > 0.0 && nb > 0.0, ErrorKind::InvalidArgument, "cosine similarity of a zero vector");
    return std::clamp(a.dot(b) / (na * nb), -1.0, 1.0);
}

RocCurve roc_curve(std::span<const ScoredPair> pairs)
{
    check_pairs(pairs);
    std::vector<ScoredPair> sorted(pairs.begin(), pairs.end());
    std::sort(sorted.begin(), sorted.end(), [](const ScoredPair& a, const ScoredPair& b) { return a.score < b.score; });
    const auto n_gen = static_cast<double>(std::count_if(sorted.begin(), sorted.end(), [](const ScoredPair& p) { return p.is_genuine; }));
    const auto n_imp = static_cast<double>(sorted.size()) - n_gen;

    RocCurve curve;
    // Walk thresholds upwards; everything at or above the current score is accepted.
    double gen_below = 0.0;
    double imp_below = 0.0;
    std::size_t i = 0;
    while (i < sorted.size()) {
        const double t = sorted[i].score;
        curve.points.push_back({t, (n_gen - gen_below) / n_gen, (n_imp - imp_below) / n_imp});
        while (i < sorted.size() && sorted[i].score == t) {
            (sorted[i].is_genuine ? gen_below : imp_below) += 1.0;
            ++i;
        }
    }
    curve.points.push_back({kInf, 0.0, 0.0});
    return curve;
}

double auc(const RocCurve& curve)
{
    const std::vector<RocPoint> pts = by_far(curve);
    double area = 0.0;
    for (std::size_t i = 1; i < pts.size(); ++i) {
        area += (pts[i].far - pts[i - 1].far) * (pts[i].tar + pts[i - 1].tar) * 0.5;
    }
    return area;
}

double eer(const RocCurve& curve)
{
    const std::vector<RocPoint> pts = by_far(curve);
    const auto gap = [](const RocPoint& p) { return p.far + p.tar - 1.0; };
    for (std::size_t i = 0; i < pts.size(); ++i) {
        const double g = gap(pts[i]);
        if (g == 0.0) {
            return pts[i].far;
        }
        if (i + 1 < pts.size() && g < 0.0 && gap(pts[i + 1]) > 0.0) {
            const double t = -g / (gap(pts[i + 1]) - g);
            return pts[i].far + t * (pts[i + 1].far - pts[i].far);
        }
    }
    fail(ErrorKind::InvalidArgument, "ROC curve does not cross FAR = 1 - TAR");
}

double tar_at_far(const RocCurve& curve, double far_target)
{
    require(far_target > 0.0 && far_target <= 1.0, ErrorKind::InvalidArgument, "far_target must lie in (0, 1]");
    const std::vector<RocPoint> pts = by_far(curve);
    double best = 0.0;
    for (std::size_t i = 0; i < pts.size(); ++i) {
        if (pts[i].far <= far_target) {
            best = std::max(best, pts[i].tar);
        }
        if (i + 1 < pts.size() && pts[i].far < far_target && far_target < pts[i + 1].far) {
            const double t = (far_target - pts[i].far) / (pts[i + 1].far - pts[i].far);
            best = std::max(best, pts[i].tar + t * (pts[i + 1].tar - pts[i].tar));
        }
    }
    return best;
}

AccuracyStats verification_accuracy_folds(std::span<const ScoredPair> pairs, int n_folds)
{
    require(n_folds >= 2, ErrorKind::InvalidArgument, "need at least two folds");
    require(!pairs.empty() && pairs.size() % static_cast<std::size_t>(n_folds) == 0, ErrorKind::InvalidArgument,
            std::to_string(pairs.size()) + " pairs do not split into " + std::to_string(n_folds) + " folds");
    check_pairs(pairs);
    const std::size_t fold = pairs.size() / static_cast<std::size_t>(n_folds);

    std::vector<double> acc;
    for (int f = 0; f < n_folds; ++f) {
        const std::size_t lo = static_cast<std::size_t>(f) * fold;
        std::vector<ScoredPair> train(pairs.begin(), pairs.begin() + static_cast<std::ptrdiff_t>(lo));
        train.insert(train.end(), pairs.begin() + static_cast<std::ptrdiff_t>(lo + fold), pairs.end());
        std::vector<double> candidates;
        for (const ScoredPair& p : train) {
            candidates.push_back(p.score);
        }
        candidates.push_back(kInf);
        std::sort(candidates.begin(), candidates.end());
        candidates.erase(std::unique(candidates.begin(), candidates.end()), candidates.end());

        double best_t = candidates.front();
        std::size_t best = 0;
        for (const double t : candidates) {
            const std::size_t c = count_correct(train, t);
            if (c > best) {
                best = c;
                best_t = t;
            }
        }
        acc.push_back(static_cast<double>(count_correct(pairs.subspan(lo, fold), best_t)) / static_cast<double>(fold));
    }
    AccuracyStats s;
    s.mean = std::accumulate(acc.begin(), acc.end(), 0.0) / static_cast<double>(acc.size());
    double var = 0.0;
    for (const double a : acc) {
        var += (a - s.mean) * (a - s.mean);
    }
    s.std = std::sqrt(var / static_cast<double>(acc.size()));
    return s;
}

std::vector<double> fuse_scores(std::span<const std::vector<double>> score_lists)
{
    require(!score_lists.empty(), ErrorKind::InvalidArgument, "nothing to fuse");
    const std::size_t n = score_lists.front().size();
    std::vector<double> fused(n, 0.0);
    for (const auto& list : score_lists) {
        require(list.size() == n, ErrorKind::InvalidArgument, "score lists differ in length");
        if (n == 0) {
            continue;
        }
        const auto [lo, hi] = std::minmax_element(list.begin(), list.end());
        const double range = *hi - *lo;
        require(std::isfinite(range), ErrorKind::InvalidArgument, "scores must be finite");
        for (std::size_t i = 0; i < n; ++i) {
            fused[i] += range > 0.0 ? (list[i] - *lo) / range : 0.0;
        }
    }
    return fused;
}

double rank_n_identification(std::span<const Vector> gallery, std::span<const int> gallery_labels,
                             std::span<const Vector> probes, std::span<const int> probe_labels, int n)
{
    require(!gallery.empty(), ErrorKind::InvalidArgument, "empty gallery");
    require(gallery.size() == gallery_labels.size() && probes.size() == probe_labels.size(),
            ErrorKind::InvalidArgument, "codes and labels differ in count");
    require(!probes.empty(), ErrorKind::InvalidArgument, "no probes");
    require(n >= 1, ErrorKind::InvalidArgument, "rank must be >= 1");
    std::size_t hits = 0;
    std::vector<std::pair<double, std::size_t>> order(gallery.size());
    for (std::size_t p = 0; p < probes.size(); ++p) {
        require(std::find(gallery_labels.begin(), gallery_labels.end(), probe_labels[p]) != gallery_labels.end(),
                ErrorKind::InvalidArgument, "probe subject " + std::to_string(probe_labels[p]) + " is not in the gallery");
        for (std::size_t g = 0; g < gallery.size(); ++g) {
            order[g] = {cosine_similarity(probes[p], gallery[g]), g};
        }
        std::stable_sort(order.begin(), order.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
        const std::size_t top = std::min(order.size(), static_cast<std::size_t>(n));
        for (std::size_t k = 0; k < top; ++k) {
            if (gallery_labels[order[k].second] == probe_labels[p]) {
                ++hits;
                break;
            }
        }
    }
    return static_cast<double>(hits) / static_cast<double>(probes.size());
}

ReconstructionReport evaluate_reconstruction(std::span<const Shape> predicted, std::span<const Shape> truth,
                                             std::span<const int> landmark_indices, int nose_tip_index,
                                             double crop_radius)
{
    require(predicted.size() == truth.size() && !truth.empty(), ErrorKind::InvalidArgument,
            "need the same, positive number of predicted and true shapes");
    require(crop_radius > 0.0, ErrorKind::InvalidArgument, "crop radius must be positive");
    ReconstructionReport r;
    r.crop_radius = crop_radius;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        require(predicted[i].size() == truth[i].size(), ErrorKind::InvalidArgument, "vertex counts differ");
        const SimilarityTransform xf = procrustes_align(select_landmarks(predicted[i], landmark_indices),
                                                        select_landmarks(truth[i], landmark_indices));
        const Shape aligned = apply_transform(predicted[i], xf);
        const std::vector<int> crop = crop_indices(truth[i], nose_tip_index, crop_radius);
        r.rmse_paper += rmse(truth.subspan(i, 1), std::span<const Shape>(&aligned, 1), crop);
        r.mean_vertex_dist += mean_vertex_distance(truth.subspan(i, 1), std::span<const Shape>(&aligned, 1), crop);
    }
    r.n_pairs = static_cast<int>(truth.size());
    r.rmse_paper /= static_cast<double>(r.n_pairs);
    r.mean_vertex_dist /= static_cast<double>(r.n_pairs);
    return r;
}

std::vector<LatentCode> encode_samples(const EncoderNet& encoder, const Dataset& data, std::span<const int> indices)
{
    std::vector<LatentCode> out;
    out.reserve(indices.size());
    for (const int i : indices) {
        out.push_back(encoder_forward(encoder, data.samples.at(static_cast<std::size_t>(i)).depth_image));
    }
    return out;
}

std::vector<Shape> predict_shapes(const EncoderNet& encoder, const DecoderNet& decoder, const Shape& mean,
                                  const Dataset& data, std::span<const int> indices)
{
    std::vector<Shape> out;
    out.reserve(indices.size());
    for (const LatentCode& code : encode_samples(encoder, data, indices)) {
        out.push_back(reconstruct(mean, decoder, code));
    }
    return out;
}

std::vector<Shape> truth_shapes(const Dataset& data, std::span<const int> indices)
{
    std::vector<Shape> out;
    out.reserve(indices.size());
    for (const int i : indices) {
        out.push_back(data.samples.at(static_cast<std::size_t>(i)).ground_truth_shape);
    }
    return out;
}

std::vector<ScoredPair> all_pairs(std::span<const Vector> codes, std::span<const int> labels, int multiple_of,
                                  std::uint64_t seed)
{
    require(codes.size() == labels.size(), ErrorKind::InvalidArgument, "codes and labels differ in count");
    require(multiple_of >= 1, ErrorKind::InvalidArgument, "multiple_of must be >= 1");
    std::vector<ScoredPair> pairs;
    for (std::size_t i = 0; i < codes.size(); ++i) {
        for (std::size_t j = i + 1; j < codes.size(); ++j) {
            pairs.push_back({cosine_similarity(codes[i], codes[j]), labels[i] == labels[j]});
        }
    }
    Rng rng(seed);
    for (std::size_t i = pairs.size(); i > 1; --i) {
        std::swap(pairs[i - 1], pairs[rng.below(i)]);
    }
    pairs.resize(pairs.size() - pairs.size() % static_cast<std::size_t>(multiple_of));
    return pairs;
}

VerificationReport verification_report(std::span<const Vector> codes, std::span<const int> labels,
                                       std::uint64_t seed)
{
    constexpr int kFolds = 10;
    const std::vector<ScoredPair> pairs = all_pairs(codes, labels, kFolds, seed);
    const RocCurve curve = roc_curve(pairs);
    VerificationReport r;
    const AccuracyStats acc = verification_accuracy_folds(pairs, kFolds);
    r.accuracy_mean = acc.mean;
    r.accuracy_std = acc.std;
    r.eer = eer(curve);
    r.auc = auc(curve);
    r.tar_far10 = tar_at_far(curve, 0.1);
    r.tar_far1 = tar_at_far(curve, 0.01);

    std::vector<Vector> gallery, probes;
    std::vector<int> gallery_labels, probe_labels;
    for (std::size_t i = 0; i < codes.size(); ++i) {
        if (std::find(gallery_labels.begin(), gallery_labels.end(), labels[i]) == gallery_labels.end()) {
            gallery.push_back(codes[i]);
            gallery_labels.push_back(labels[i]);
        } else {
            probes.push_back(codes[i]);
            probe_labels.push_back(labels[i]);
        }
    }
    r.rank1 = rank_n_identification(gallery, gallery_labels, probes, probe_labels, 1);
    r.rank5 = rank_n_identification(gallery, gallery_labels, probes, probe_labels, 5);
    return r;
}

SampleEncoder network_encoder(const EncoderNet& encoder)
{
    return [&encoder](const RenderedSample& s) { return encoder_forward(encoder, s.depth_image); };
}

DisentanglingReport disentangling_report(const SampleEncoder& encode, const MorphableModel& model,
                                         const Dataset& data, std::span<const int> indices, std::uint64_t seed)
{
    require(static_cast<bool>(encode), ErrorKind::InvalidArgument, "no encoder given");
    std::map<int, std::vector<Vector>> by_subject;
    std::vector<Vector> ids;
    std::vector<int> labels;
    Rng rng(seed);
    DisentanglingReport r;
    double ratio_sum = 0.0;
    for (const int index : indices) {
        const RenderedSample& s = data.samples.at(static_cast<std::size_t>(index));
        const LatentCode code = encode(s);
        by_subject[s.subject_label].push_back(code.c_id);
        ids.push_back(code.c_id);
        labels.push_back(s.subject_label);

        RenderedSample other = s;
        for (Eigen::Index k = 0; k < other.ground_truth_coeffs.alpha_exp.size(); ++k) {
            other.ground_truth_coeffs.alpha_exp(k) = model.sigma_exp(k) * rng.normal();
        }
        other.ground_truth_shape = compose_shape(model, other.ground_truth_coeffs);
        other.depth_image = rasterize_depth(other.ground_truth_shape.points(), other.ground_truth_pose,
                                            data.spec.image_resolution, data.spec.splat_factor);
        other.landmarks =
            project_landmarks(select_landmarks(other.ground_truth_shape, model.landmark_indices), other.ground_truth_pose);
        const LatentCode moved = encode(other);
        const double d_res = (moved.c_res - code.c_res).norm();
        const double d_id = (moved.c_id - code.c_id).norm();
        if (d_res + d_id > 0.0) {
            ratio_sum += d_res / (d_res + d_id);
            ++r.expression_pairs;
        }
    }
    require(by_subject.size() >= 2, ErrorKind::InvalidArgument, "disentangling needs at least two subjects");
    bool repeated = false;
    for (const auto& [label, codes] : by_subject) {
        repeated = repeated || codes.size() >= 2;
    }
    require(repeated, ErrorKind::InvalidArgument, "disentangling needs a subject with at least two images");

    double intra = 0.0, inter = 0.0;
    std::size_t n_intra = 0, n_inter = 0;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        for (std::size_t j = i + 1; j < ids.size(); ++j) {
            const double d = 1.0 - cosine_similarity(ids[i], ids[j]);
            if (labels[i] == labels[j]) {
                intra += d;
                ++n_intra;
            } else {
                inter += d;
                ++n_inter;
            }
        }
    }
    r.intra_distance = intra / static_cast<double>(n_intra);
    r.inter_distance = inter / static_cast<double>(n_inter);

    Vector grand = Vector::Zero(ids.front().size());
    for (const Vector& v : ids) {
        grand += v;
    }
    grand /= static_cast<double>(ids.size());
    double total = 0.0, between = 0.0;
    for (const auto& [label, codes] : by_subject) {
        Vector centre = Vector::Zero(grand.size());
        for (const Vector& v : codes) {
            centre += v;
            total += (v - grand).squaredNorm();
        }
        centre /= static_cast<double>(codes.size());
        between += static_cast<double>(codes.size()) * (centre - grand).squaredNorm();
    }

    r.displacement_ratio = r.expression_pairs > 0 ? ratio_sum / r.expression_pairs : kNaN;
    r.variance_explained = total > 0.0 ? between / total : kNaN;
    r.degenerate = r.expression_pairs == 0 || total == 0.0;
    return r;
}

} // namespace faceshape

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "faceshape/network.hpp"
#include "faceshape/synthetic.hpp"

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

namespace faceshape {

struct ScoredPair
{
    double score = 0.0;
    bool is_genuine = false;
};

struct RocPoint
{
    double threshold = 0.0;
    double tar = 0.0;
    double far = 0.0;
};

/// Operating points by increasing threshold; a pair is accepted iff score >= threshold.
struct RocCurve
{
    std::vector<RocPoint> points;
};

struct VerificationReport
{
    double accuracy_mean = 0.0;
    double accuracy_std = 0.0;
    double eer = 0.0;
    double auc = 0.0;
    double tar_far10 = 0.0;
    double tar_far1 = 0.0;
    double rank1 = 0.0;
    double rank5 = 0.0;
};

struct ReconstructionReport
{
    double rmse_paper = 0.0;       ///< norm of the stacked difference / n_c, averaged over pairs
    double mean_vertex_dist = 0.0; ///< mean per-vertex distance, averaged over pairs
    int n_pairs = 0;
    double crop_radius = 0.0;
};

struct AccuracyStats
{
    double mean = 0.0;
    double std = 0.0; ///< population standard deviation over folds
};

double cosine_similarity(const Vector& a, const Vector& b);

/// Thresholds are every distinct score plus +infinity, so the curve runs from (1, 1) down to (0, 0).
RocCurve roc_curve(std::span<const ScoredPair> pairs);

/// Trapezoidal area under TAR(FAR).
double auc(const RocCurve& curve);
/// FAR at the point where FAR = 1 - TAR, linearly interpolated between bracketing points.
double eer(const RocCurve& curve);
/// Highest TAR reachable at FAR <= far_target, interpolating along the curve. far_target in (0, 1].
double tar_at_far(const RocCurve& curve, double far_target);

/**
 * Contiguous folds. For each fold the threshold with the best accuracy on the remaining folds
 * (smallest threshold on ties) is applied to the held-out fold.
 */
AccuracyStats verification_accuracy_folds(std::span<const ScoredPair> pairs, int n_folds);

/// Each list is min-max normalised to [0, 1] (a constant list becomes all zeros) and the lists are summed.
std::vector<double> fuse_scores(std::span<const std::vector<double>> score_lists);

/**
 * Fraction of probes whose label is among the n most cosine-similar gallery entries; equal
 * similarities keep gallery order.
 */
double rank_n_identification(std::span<const Vector> gallery, std::span<const int> gallery_labels,
                             std::span<const Vector> probes, std::span<const int> probe_labels, int n);

/**
 * Per pair: similarity-align the prediction to the truth on the landmarks, crop both at
 * `crop_radius` around the truth's nose tip and measure the error on the crop.
 */
ReconstructionReport evaluate_reconstruction(std::span<const Shape> predicted, std::span<const Shape> truth,
                                             std::span<const int> landmark_indices, int nose_tip_index,
                                             double crop_radius);

/// Model units are roughly decimetres, so this is the usual 95 mm crop.
inline constexpr double kDefaultCropRadius = 0.95;

std::vector<LatentCode> encode_samples(const EncoderNet& encoder, const Dataset& data, std::span<const int> indices);

std::vector<Shape> predict_shapes(const EncoderNet& encoder, const DecoderNet& decoder, const Shape& mean,
                                  const Dataset& data, std::span<const int> indices);

std::vector<Shape> truth_shapes(const Dataset& data, std::span<const int> indices);

/**
 * All unordered pairs of the given codes scored by cosine similarity, in a seeded random order and
 * truncated to a multiple of `multiple_of`.
 */
std::vector<ScoredPair> all_pairs(std::span<const Vector> codes, std::span<const int> labels, int multiple_of,
                                  std::uint64_t seed);

/**
 * Verification metrics on the codes of `indices`, using all pairs in 10 folds. For the ranks the
 * first image of every subject forms the gallery and the remaining images are probes.
 */
VerificationReport verification_report(std::span<const Vector> codes, std::span<const int> labels,
                                       std::uint64_t seed);

using SampleEncoder = std::function<LatentCode(const RenderedSample&)>;

SampleEncoder network_encoder(const EncoderNet& encoder);

struct DisentanglingReport
{
    double intra_distance = 0.0; ///< mean cosine distance of c_id between images of one subject
    double inter_distance = 0.0; ///< same across subjects
    double displacement_ratio = 0.0;
    double variance_explained = 0.0; ///< between-subject / total variance of c_id
    int expression_pairs = 0;
    bool degenerate = false; ///< set when a ratio has a zero denominator; that field is then NaN
};

/**
 * Expression pairs re-render every selected sample with the same identity and pose and a fresh
 * expression from the prior; the ratio is ||dc_res|| / (||dc_res|| + ||dc_id||) averaged over them.
 */
DisentanglingReport disentangling_report(const SampleEncoder& encode, const MorphableModel& model,
                                         const Dataset& data, std::span<const int> indices, std::uint64_t seed);

} // namespace faceshape

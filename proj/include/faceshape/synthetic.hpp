// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "faceshape/geometry.hpp"
#include "faceshape/random.hpp"

#include <cstdint>
#include <vector>

namespace faceshape {

struct SyntheticModelSpec
{
    int n_vertices = 600;
    int k_id = 20;
    int k_exp = 8;
    /// Length scale of the random basis fields in normalised face coordinates; larger is smoother.
    double smoothness = 0.15;
    std::uint64_t seed = 1;

    void validate() const;
};

/// Number of landmarks every generated model carries.
inline constexpr int kLandmarkCount = 68;

struct Range
{
    double lo = 0.0;
    double hi = 0.0;
};

/// Uniform sampling bounds. Angles in radians; translation bounds apply to each component.
struct PoseRanges
{
    Range yaw{-0.3, 0.3};
    Range pitch{-0.15, 0.15};
    Range roll{-0.1, 0.1};
    Range scale{40.0, 60.0};
    Range translation{-0.05, 0.05};
};

struct DatasetSpec
{
    int n_subjects = 20;
    int images_per_subject = 10;
    double landmark_noise_sigma = 0.0;
    PoseRanges pose_ranges;
    int image_resolution = 32;
    /// Splat radius in units of side / sqrt(n) of the projected bounding square; 0 gives one pixel per vertex.
    double splat_factor = 1.0;
    std::uint64_t seed = 1;

    void validate() const;
};

struct RenderedSample
{
    int subject_label = 0;
    CoeffPair ground_truth_coeffs;
    PoseParams ground_truth_pose;
    LandmarkSet2D landmarks;
    /// Row-major square raster, row 0 at the top, values in [-1, 1].
    Vector depth_image;
    Shape ground_truth_shape;
};

/**
 * Sample indices into Dataset::samples.
 *
 * The last max(1, K/5) subjects are held out entirely. For every other subject the last two images
 * go to test, the one before to validation and the remainder to training (fewer when a subject has
 * less than 4 images; at least one image always stays in training). The test split also contains
 * every image of the held-out subjects.
 */
struct DatasetSplit
{
    std::vector<int> train;
    std::vector<int> validation;
    std::vector<int> test;
    int n_train_subjects = 0;

    bool is_heldout_subject(int label) const noexcept { return label >= n_train_subjects; }
};

struct Dataset
{
    DatasetSpec spec;
    std::vector<RenderedSample> samples;
    DatasetSplit split;
};

MorphableModel generate_model(const SyntheticModelSpec& spec);

/// Identity coefficients with independent N(0, sigma_id[k]^2) entries.
Vector sample_subject(const MorphableModel& model, Rng& rng);

struct InstanceDraw
{
    Vector alpha_exp;
    PoseParams pose;
};

/// Expression coefficients plus a pose drawn uniformly from `spec.pose_ranges` (see euler_zyx_rotation).
InstanceDraw sample_instance(const MorphableModel& model, const DatasetSpec& spec, Rng& rng);

/// Projected model landmarks plus i.i.d. Gaussian noise of the given standard deviation.
LandmarkSet2D render_landmarks(const MorphableModel& model, const CoeffPair& coeffs, const PoseParams& pose,
                               double noise_sigma, Rng& rng);

/**
 * Depth raster of the posed point cloud R * (p + t).
 *
 * The bounding square of the rotated (x, y) coordinates is mapped onto the raster. Each point writes
 * its depth into its own pixel and into every pixel whose centre lies within the splat radius;
 * pixels keep the maximum (nearest) depth. Depth is min-max normalised per image to [-1, 1], a
 * cloud without depth range maps to +1, and empty pixels are -1.
 */
Vector rasterize_depth(const Points3& points, const PoseParams& pose, int resolution, double splat_factor = 1.0);

Vector rasterize_depth(const MorphableModel& model, const CoeffPair& coeffs, const PoseParams& pose,
                       int resolution, double splat_factor = 1.0);

/// Splits into train / validation / test as documented on DatasetSplit.
DatasetSplit make_split(int n_subjects, int images_per_subject);

/// K subjects times M images, sample index = subject * M + image. Fully determined by spec.seed.
Dataset build_dataset(const MorphableModel& model, const DatasetSpec& spec);

} // namespace faceshape

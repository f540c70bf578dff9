// SPDX-License-Identifier: Apache-2.0
#include "faceshape/synthetic.hpp"
#include "faceshape/error.hpp"

#include "Eigen/Geometry"
#include "Eigen/QR"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numbers>
#include <string>

namespace faceshape {

void SyntheticModelSpec::validate() const
{
    require(k_id >= 1 && k_exp >= 1, ErrorKind::InvalidArgument, "k_id and k_exp must be at least 1");
    require(n_vertices >= std::max(k_id + k_exp + 1, kLandmarkCount), ErrorKind::InvalidArgument,
            "n_vertices = " + std::to_string(n_vertices) + " is too small; need at least max(k_id + k_exp + 1, " +
                std::to_string(kLandmarkCount) + ")");
    require(std::isfinite(smoothness) && smoothness > 0.0, ErrorKind::InvalidArgument,
            "smoothness must be positive");
}

void DatasetSpec::validate() const
{
    require(n_subjects >= 2, ErrorKind::InvalidArgument, "n_subjects must be at least 2");
    require(images_per_subject >= 1, ErrorKind::InvalidArgument, "images_per_subject must be at least 1");
    require(std::isfinite(landmark_noise_sigma) && landmark_noise_sigma >= 0.0, ErrorKind::InvalidArgument,
            "landmark_noise_sigma must be non-negative");
    require(image_resolution >= 8, ErrorKind::InvalidArgument, "image_resolution must be at least 8");
    require(std::isfinite(splat_factor) && splat_factor >= 0.0, ErrorKind::InvalidArgument,
            "splat_factor must be non-negative");
    const auto check = [](const Range& r, const char* name) {
        require(std::isfinite(r.lo) && std::isfinite(r.hi) && r.lo <= r.hi, ErrorKind::InvalidArgument,
                std::string("pose range ") + name + " must satisfy lo <= hi");
    };
    check(pose_ranges.yaw, "yaw");
    check(pose_ranges.pitch, "pitch");
    check(pose_ranges.roll, "roll");
    check(pose_ranges.scale, "scale");
    check(pose_ranges.translation, "translation");
    require(pose_ranges.scale.lo > 0.0, ErrorKind::InvalidArgument, "pose scale range must be positive");
}

namespace {

constexpr double kAxisX = 0.75;
constexpr double kAxisY = 1.0;
constexpr double kAxisZ = 0.55;
constexpr int kFeaturesPerField = 6;

// Fibonacci points on an ellipsoidal cap facing +z, plus a nose bump.
Points3 mean_surface(int n)
{
    const double cos_max = std::cos(75.0 * std::numbers::pi / 180.0);
    const double golden = std::numbers::pi * (3.0 - std::sqrt(5.0));
    Points3 p(3, n);
    for (int i = 0; i < n; ++i) {
        const double h = 1.0 - (1.0 - cos_max) * (i + 0.5) / n;
        const double theta = std::acos(h);
        const double phi = i * golden;
        const double dx = std::sin(theta) * std::cos(phi);
        const double dy = std::sin(theta) * std::sin(phi);
        const double dz = std::cos(theta);
        const double bump = 0.25 * std::exp(-(std::pow(dx / 0.18, 2) + std::pow((dy + 0.05) / 0.25, 2)));
        p.col(i) << kAxisX * dx, kAxisY * dy, kAxisZ * dz + bump;
    }
    return p;
}

// Thin Q factor with a deterministic column sign (positive R diagonal).
Matrix thin_q(const Matrix& a)
{
    const Eigen::HouseholderQR<Matrix> qr(a);
    const Vector d = qr.matrixQR().diagonal();
    const double scale = d.cwiseAbs().maxCoeff();
    require(d.cwiseAbs().minCoeff() > 1e-8 * scale, ErrorKind::NumericalFailure,
            "random basis fields are linearly dependent");
    Matrix q = qr.householderQ() * Matrix::Identity(a.rows(), a.cols());
    for (Eigen::Index c = 0; c < q.cols(); ++c) {
        if (d(c) < 0.0) {
            q.col(c) = -q.col(c);
        }
    }
    return q;
}

// Per-component field taking the value f(i) at vertex i.
Vector component_field(Eigen::Index n, int component, const std::function<double(Eigen::Index)>& f)
{
    Vector v = Vector::Zero(3 * n);
    for (Eigen::Index i = 0; i < n; ++i) {
        v(3 * i + component) = f(i);
    }
    return v;
}

std::vector<int> farthest_point_landmarks(const Points3& p, int start, int count)
{
    const auto n = p.cols();
    std::vector<double> dist(static_cast<std::size_t>(n), std::numeric_limits<double>::infinity());
    std::vector<int> out;
    int next = start;
    for (int k = 0; k < count; ++k) {
        out.push_back(next);
        int best = -1;
        double best_d = -1.0;
        for (Eigen::Index i = 0; i < n; ++i) {
            auto& d = dist[static_cast<std::size_t>(i)];
            d = std::min(d, (p.col(i) - p.col(next)).squaredNorm());
            if (d > best_d) {
                best_d = d;
                best = static_cast<int>(i);
            }
        }
        next = best;
    }
    return out;
}

} // namespace

MorphableModel generate_model(const SyntheticModelSpec& spec)
{
    spec.validate();
    const int n = spec.n_vertices;
    const int k_total = spec.k_id + spec.k_exp;
    const Points3 p = mean_surface(n);
    const Eigen::Vector3d axes(kAxisX, kAxisY, kAxisZ);
    const Points3 q = axes.cwiseInverse().asDiagonal() * p;

    Rng rng(spec.seed);
    Matrix fields = Matrix::Zero(3 * n, k_total);
    for (int c = 0; c < k_total; ++c) {
        for (int r = 0; r < kFeaturesPerField; ++r) {
            Eigen::Vector3d w;
            for (int a = 0; a < 3; ++a) {
                w(a) = rng.normal() / spec.smoothness;
            }
            const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
            Eigen::Vector3d g;
            for (int a = 0; a < 3; ++a) {
                g(a) = rng.normal();
            }
            for (int i = 0; i < n; ++i) {
                fields.block<3, 1>(3 * i, c) += std::cos(q.col(i).dot(w) + phase) * g;
            }
        }
    }

    int nose = 0;
    for (int i = 1; i < n; ++i) {
        if (p(2, i) > p(2, nose)) {
            nose = i;
        }
    }
    const std::vector<int> landmarks = farthest_point_landmarks(p, nose, kLandmarkCount);

    // Constraints on every column: no similarity motion of the mean over the whole face (translations,
    // infinitesimal rotations, scaling) and no affine motion over the landmarks. Otherwise the camera
    // could absorb part of a shape change.
    Matrix constraints(3 * n, 19);
    constraints.setZero();
    for (int i = 0; i < n; ++i) {
        const Eigen::Vector3d v = p.col(i);
        for (int k = 0; k < 3; ++k) {
            constraints(3 * i + k, k) = 1.0;
            constraints.block<3, 1>(3 * i, 3 + k) = v.cross(Eigen::Vector3d::Unit(k));
        }
        constraints.block<3, 1>(3 * i, 6) = v;
    }
    for (const int i : landmarks) {
        for (int c = 0; c < 3; ++c) {
            for (int d = 0; d < 3; ++d) {
                constraints(3 * i + c, 7 + 4 * c + d) = p(d, i);
            }
            constraints(3 * i + c, 7 + 4 * c + 3) = 1.0;
        }
    }

    // The constraints are met by subtracting a quadratic polynomial field, which keeps columns smooth.
    std::vector<std::function<double(Eigen::Index)>> monomials{[](Eigen::Index) { return 1.0; }};
    for (int a = 0; a < 3; ++a) {
        monomials.push_back([&q, a](Eigen::Index i) { return q(a, i); });
    }
    for (int a = 0; a < 3; ++a) {
        for (int b = a; b < 3; ++b) {
            monomials.push_back([&q, a, b](Eigen::Index i) { return q(a, i) * q(b, i); });
        }
    }
    Matrix poly(3 * n, 3 * static_cast<Eigen::Index>(monomials.size()));
    for (int c = 0; c < 3; ++c) {
        for (std::size_t m = 0; m < monomials.size(); ++m) {
            poly.col(c * static_cast<Eigen::Index>(monomials.size()) + static_cast<Eigen::Index>(m)) =
                component_field(n, c, monomials[m]);
        }
    }
    const Matrix cp = constraints.transpose() * poly;
    const Eigen::CompleteOrthogonalDecomposition<Matrix> cod(cp);
    fields -= poly * cod.solve(Matrix(constraints.transpose() * fields));
    const Matrix basis = thin_q(fields);

    MorphableModel model{Shape::from_points(p),
                         basis.leftCols(spec.k_id),
                         basis.rightCols(spec.k_exp),
                         Vector(spec.k_id),
                         Vector(spec.k_exp),
                         landmarks,
                         nose};
    for (int k = 0; k < spec.k_id; ++k) {
        model.sigma_id(k) = std::pow(0.9, k);
    }
    for (int k = 0; k < spec.k_exp; ++k) {
        model.sigma_exp(k) = std::pow(0.9, k);
    }
    model.validate();
    return model;
}

Vector sample_subject(const MorphableModel& model, Rng& rng)
{
    Vector a(model.sigma_id.size());
    for (Eigen::Index k = 0; k < a.size(); ++k) {
        a(k) = model.sigma_id(k) * rng.normal();
    }
    return a;
}

InstanceDraw sample_instance(const MorphableModel& model, const DatasetSpec& spec, Rng& rng)
{
    InstanceDraw out;
    out.alpha_exp.resize(model.sigma_exp.size());
    for (Eigen::Index k = 0; k < out.alpha_exp.size(); ++k) {
        out.alpha_exp(k) = model.sigma_exp(k) * rng.normal();
    }
    const auto& pr = spec.pose_ranges;
    const double yaw = rng.uniform(pr.yaw.lo, pr.yaw.hi);
    const double pitch = rng.uniform(pr.pitch.lo, pr.pitch.hi);
    const double roll = rng.uniform(pr.roll.lo, pr.roll.hi);
    out.pose.rotation = euler_zyx_rotation(yaw, pitch, roll);
    out.pose.scale = rng.uniform(pr.scale.lo, pr.scale.hi);
    for (int a = 0; a < 3; ++a) {
        out.pose.translation(a) = rng.uniform(pr.translation.lo, pr.translation.hi);
    }
    return out;
}

LandmarkSet2D render_landmarks(const MorphableModel& model, const CoeffPair& coeffs, const PoseParams& pose,
                               double noise_sigma, Rng& rng)
{
    require(noise_sigma >= 0.0, ErrorKind::InvalidArgument, "noise_sigma must be non-negative");
    const Shape s = compose_shape(model, coeffs);
    LandmarkSet2D out = project_landmarks(select_landmarks(s, model.landmark_indices), pose);
    if (noise_sigma > 0.0) {
        for (Eigen::Index i = 0; i < out.points.size(); ++i) {
            out.points(i) += noise_sigma * rng.normal();
        }
    }
    return out;
}

Vector rasterize_depth(const Points3& points, const PoseParams& pose, int resolution, double splat_factor)
{
    require(resolution >= 8, ErrorKind::InvalidArgument, "resolution must be at least 8");
    require(points.cols() >= 1, ErrorKind::InvalidArgument, "no points to rasterize");
    require(splat_factor >= 0.0, ErrorKind::InvalidArgument, "splat_factor must be non-negative");
    const Points3 r = pose.rotation * (points.colwise() + pose.translation);
    const double x0 = r.row(0).minCoeff(), x1 = r.row(0).maxCoeff();
    const double y0 = r.row(1).minCoeff(), y1 = r.row(1).maxCoeff();
    const double z0 = r.row(2).minCoeff(), z1 = r.row(2).maxCoeff();
    const double side = std::max(x1 - x0, y1 - y0);
    const double cx = 0.5 * (x0 + x1), cy = 0.5 * (y0 + y1);
    const auto n = static_cast<double>(points.cols());
    const double res = resolution;
    // Splat radius in pixel units.
    const double rho = side > 0.0 ? splat_factor * res / std::sqrt(n) : 0.0;
    const int reach = static_cast<int>(std::ceil(rho));

    Vector img = Vector::Constant(resolution * resolution, -1.0);
    for (Eigen::Index i = 0; i < r.cols(); ++i) {
        const double z = z1 > z0 ? -1.0 + 2.0 * (r(2, i) - z0) / (z1 - z0) : 1.0;
        double ux = 0.5 * res, uy = 0.5 * res;
        if (side > 0.0) {
            ux = (r(0, i) - (cx - 0.5 * side)) / side * res;
            uy = ((cy + 0.5 * side) - r(1, i)) / side * res;
        }
        const int col = std::clamp(static_cast<int>(std::floor(ux)), 0, resolution - 1);
        const int row = std::clamp(static_cast<int>(std::floor(uy)), 0, resolution - 1);
        for (int dr = -reach; dr <= reach; ++dr) {
            for (int dc = -reach; dc <= reach; ++dc) {
                const int rr = row + dr, cc = col + dc;
                if (rr < 0 || rr >= resolution || cc < 0 || cc >= resolution) {
                    continue;
                }
                const double ex = cc + 0.5 - ux, ey = rr + 0.5 - uy;
                if ((dr != 0 || dc != 0) && ex * ex + ey * ey > rho * rho) {
                    continue;
                }
                double& px = img(rr * resolution + cc);
                px = std::max(px, z);
            }
        }
    }
    return img;
}

Vector rasterize_depth(const MorphableModel& model, const CoeffPair& coeffs, const PoseParams& pose,
                       int resolution, double splat_factor)
{
    return rasterize_depth(compose_shape(model, coeffs).points(), pose, resolution, splat_factor);
}

DatasetSplit make_split(int n_subjects, int images_per_subject)
{
    require(n_subjects >= 2 && images_per_subject >= 1, ErrorKind::InvalidArgument,
            "split needs at least 2 subjects and 1 image per subject");
    DatasetSplit split;
    split.n_train_subjects = n_subjects - std::max(1, n_subjects / 5);
    const int m = images_per_subject;
    const int n_test = std::min(2, m - 1);
    const int n_val = m - n_test >= 2 ? 1 : 0;
    for (int k = 0; k < n_subjects; ++k) {
        for (int j = 0; j < m; ++j) {
            const int idx = k * m + j;
            if (k >= split.n_train_subjects || j >= m - n_test) {
                split.test.push_back(idx);
            } else if (j >= m - n_test - n_val) {
                split.validation.push_back(idx);
            } else {
                split.train.push_back(idx);
            }
        }
    }
    return split;
}

Dataset build_dataset(const MorphableModel& model, const DatasetSpec& spec)
{
    spec.validate();
    Dataset ds{spec, {}, make_split(spec.n_subjects, spec.images_per_subject)};
    ds.samples.reserve(static_cast<std::size_t>(spec.n_subjects * spec.images_per_subject));
    Rng master(spec.seed);
    for (int k = 0; k < spec.n_subjects; ++k) {
        Rng subject_rng = master.split();
        const Vector alpha_id = sample_subject(model, subject_rng);
        for (int j = 0; j < spec.images_per_subject; ++j) {
            Rng rng = subject_rng.split();
            InstanceDraw draw = sample_instance(model, spec, rng);
            CoeffPair coeffs{alpha_id, std::move(draw.alpha_exp)};
            LandmarkSet2D lm = render_landmarks(model, coeffs, draw.pose, spec.landmark_noise_sigma, rng);
            Shape shape = compose_shape(model, coeffs);
            Vector depth = rasterize_depth(shape.points(), draw.pose, spec.image_resolution, spec.splat_factor);
            ds.samples.push_back(RenderedSample{k, std::move(coeffs), draw.pose, std::move(lm), std::move(depth),
                                                std::move(shape)});
        }
    }
    return ds;
}

} // namespace faceshape

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "faceshape/evaluation.hpp"
#include "faceshape/fitting.hpp"
#include "faceshape/geometry.hpp"
#include "faceshape/network.hpp"
#include "faceshape/synthetic.hpp"
#include "faceshape/training.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace faceshape {

/// Writes to a sibling temporary file and renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);
std::string read_file(const std::filesystem::path& path);

/// Shortest decimal form that parses back to the same double; never locale dependent.
std::string format_double(double value);
std::string format_double(double value, int significant_digits);

/// One `v x y z` line per vertex with 9 significant digits; no faces.
void write_obj(const Shape& shape, const std::filesystem::path& path);
std::string obj_text(const Vector& coords);
/// Accepts `v` lines, `#` comments and blank lines; anything else is a Parse error with its line number.
Shape read_obj(const std::filesystem::path& path);
Shape parse_obj(std::string_view text);

struct CsvTable
{
    std::vector<std::string> header;
    std::vector<std::vector<double>> rows;
};

void write_csv(const CsvTable& table, const std::filesystem::path& path);
std::string csv_text(const CsvTable& table);
CsvTable read_csv(const std::filesystem::path& path);
CsvTable parse_csv(std::string_view text);

/// accuracy_mean,accuracy_std,eer,auc,tar_far10,tar_far1,rank1,rank5
CsvTable to_table(const VerificationReport& report);
/// rmse_paper,mean_vertex_dist,n_pairs,crop_radius
CsvTable to_table(const ReconstructionReport& report);
/// intra_distance,inter_distance,displacement_ratio,variance_explained,expression_pairs,degenerate
CsvTable to_table(const DisentanglingReport& report);
/// epoch,train_loss,validation_loss
CsvTable to_table(const Phase1Result& result);
/// epoch,lambda_r,total,recon,ident,accuracy
CsvTable to_table(const Phase3Result& result);
/// pass,objective
CsvTable trace_table(const FitResult& result);

template <typename Report>
void write_report_csv(const Report& report, const std::filesystem::path& path)
{
    write_csv(to_table(report), path);
}

/**
 * Flat key-value configuration covering every default of the pipeline. Text form is one
 * `key = value` line per key, `#` starts a comment. `seed` drives every random stream.
 */
struct RunConfig
{
    std::uint64_t seed = 1;
    SyntheticModelSpec model;
    DatasetSpec data;
    FitConfig fit;
    int fit_subject = 0;
    int fit_images = 5;
    TrainingPlan train;
    double crop_radius = kDefaultCropRadius;
    double grad_step = 1e-6;
    int grad_coordinates = 200;
    double grad_lambda_r = 1.0;
    double grad_tolerance = 1e-5;
    int grad_batch = 16;

    /// Throws Parse for an unknown key or a malformed value.
    void set(std::string_view key, std::string_view value);
    std::string get(std::string_view key) const;
    static const std::vector<std::string>& keys();

    /// Every key in keys() order, so the text of equal configs is identical.
    std::string to_text() const;
    /// Checks each module's invariants and the cross-field constraints.
    void validate() const;
};

bool operator==(const RunConfig& a, const RunConfig& b);

/// Applies the lines of `text` on top of `base`; errors name the line number.
RunConfig parse_config(std::string_view text, RunConfig base = {});
RunConfig load_config(const std::filesystem::path& path, RunConfig base = {});

/**
 * Binary container: magic, format version, text entries, named column-major double matrices and
 * a trailing FNV-1a checksum. Little-endian.
 */
struct Archive
{
    std::map<std::string, std::string> text;
    std::map<std::string, Matrix> tensors;

    const Matrix& tensor(const std::string& name) const;
    const std::string& entry(const std::string& name) const;
};

inline constexpr std::uint32_t kArchiveVersion = 1;

std::string encode_archive(const Archive& archive);
/// Distinguishes Corruption (truncation, bad checksum, malformed body) from VersionMismatch.
Archive decode_archive(std::string_view bytes);
void save_archive(const Archive& archive, const std::filesystem::path& path);
Archive load_archive(const std::filesystem::path& path);

void save_model(const MorphableModel& model, const RunConfig& config, const std::filesystem::path& path);
MorphableModel load_model(const std::filesystem::path& path);

void save_dataset(const Dataset& data, const RunConfig& config, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

struct Checkpoint
{
    JointNet net;
    RunConfig config;
};

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
/// Rebuilds and validates the network; a width mismatch is an InvariantViolation naming the field.
Checkpoint load_checkpoint(const std::filesystem::path& path);

} // namespace faceshape

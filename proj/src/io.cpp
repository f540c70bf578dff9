// SPDX-License-Identifier: Apache-2.0
#include "faceshape/io.hpp"
#include "faceshape/error.hpp"

#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <functional>
#include <sstream>
#include <system_error>

namespace faceshape {

static_assert(std::endian::native == std::endian::little, "archive encoding assumes a little-endian host");

namespace {

namespace fs = std::filesystem;

std::string_view trim(std::string_view s)
{
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string_view::npos) {
        return {};
    }
    const auto last = s.find_last_not_of(" \t\r");
    return s.substr(first, last - first + 1);
}

std::vector<std::string_view> split(std::string_view s, char sep)
{
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (true) {
        const auto pos = s.find(sep, start);
        out.push_back(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
        if (pos == std::string_view::npos) {
            return out;
        }
        start = pos + 1;
    }
}

std::vector<std::string_view> tokens(std::string_view s)
{
    std::vector<std::string_view> out;
    std::size_t i = 0;
    while (i < s.size()) {
        while (i < s.size() && (s[i] == ' ' || s[i] == '\t' || s[i] == '\r')) {
            ++i;
        }
        const std::size_t start = i;
        while (i < s.size() && s[i] != ' ' && s[i] != '\t' && s[i] != '\r') {
            ++i;
        }
        if (i > start) {
            out.push_back(s.substr(start, i - start));
        }
    }
    return out;
}

double parse_double(std::string_view s, const std::string& where)
{
    s = trim(s);
    double v = 0.0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    require(ec == std::errc() && ptr == s.data() + s.size() && !s.empty(), ErrorKind::Parse,
            where + ": expected a number, got '" + std::string(s) + "'");
    return v;
}

template <typename Int>
Int parse_int(std::string_view s, const std::string& where)
{
    s = trim(s);
    Int v = 0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    require(ec == std::errc() && ptr == s.data() + s.size() && !s.empty(), ErrorKind::Parse,
            where + ": expected an integer, got '" + std::string(s) + "'");
    return v;
}

// --- binary encoding -------------------------------------------------------------------------

constexpr char kMagic[8] = {'F', 'S', 'H', 'P', 'A', 'R', 'C', '\0'};

std::uint64_t fnv1a(std::string_view bytes)
{
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const char c : bytes) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

template <typename T>
void put(std::string& out, T value)
{
    char buf[sizeof(T)];
    std::memcpy(buf, &value, sizeof(T));
    out.append(buf, sizeof(T));
}

void put_string(std::string& out, std::string_view s)
{
    put<std::uint64_t>(out, s.size());
    out.append(s);
}

class Reader
{
public:
    explicit Reader(std::string_view bytes) : bytes_(bytes) {}

    std::string_view take(std::size_t n)
    {
        require(n <= bytes_.size() - pos_, ErrorKind::Corruption, "archive is truncated");
        const std::string_view s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    template <typename T>
    T get()
    {
        T value;
        std::memcpy(&value, take(sizeof(T)).data(), sizeof(T));
        return value;
    }

    std::string get_string() { return std::string(take(get<std::uint64_t>())); }
    std::size_t remaining() const { return bytes_.size() - pos_; }

private:
    std::string_view bytes_;
    std::size_t pos_ = 0;
};

int as_int(double v, const std::string& what)
{
    require(std::isfinite(v) && v == std::floor(v) && std::abs(v) < 2147483647.0, ErrorKind::Corruption,
            what + " is not an integer");
    return static_cast<int>(v);
}

Matrix column(std::span<const int> values)
{
    Matrix m(static_cast<Eigen::Index>(values.size()), 1);
    for (std::size_t i = 0; i < values.size(); ++i) {
        m(static_cast<Eigen::Index>(i), 0) = values[i];
    }
    return m;
}

std::vector<int> ints(const Matrix& m, const std::string& what)
{
    std::vector<int> out;
    for (Eigen::Index i = 0; i < m.size(); ++i) {
        out.push_back(as_int(m.data()[i], what));
    }
    return out;
}

Vector vec(const Archive& a, const std::string& name)
{
    const Matrix& m = a.tensor(name);
    require(m.cols() == 1, ErrorKind::Corruption, "tensor '" + name + "' is not a column vector");
    return m.col(0);
}

Matrix scalar(double v) { return Matrix::Constant(1, 1, v); }

void expect_kind(const Archive& a, const std::string& kind, const fs::path& path)
{
    require(a.entry("kind") == kind, ErrorKind::InvalidArgument,
            path.string() + " holds a " + a.entry("kind") + ", expected a " + kind);
}

// --- config fields ---------------------------------------------------------------------------

struct Field
{
    std::string key;
    std::function<std::string(const RunConfig&)> get;
    std::function<void(RunConfig&, std::string_view)> set;
};

Field real(std::string key, double RunConfig::*member)
{
    return {key, [member](const RunConfig& c) { return format_double(c.*member); },
            [member, key](RunConfig& c, std::string_view v) { c.*member = parse_double(v, key); }};
}

Field integer(std::string key, int RunConfig::*member)
{
    return {key, [member](const RunConfig& c) { return std::to_string(c.*member); },
            [member, key](RunConfig& c, std::string_view v) { c.*member = parse_int<int>(v, key); }};
}

template <typename Get>
Field real_at(std::string key, Get ref)
{
    return {key, [ref](const RunConfig& c) { return format_double(ref(const_cast<RunConfig&>(c))); },
            [ref, key](RunConfig& c, std::string_view v) { ref(c) = parse_double(v, key); }};
}

template <typename Get>
Field int_at(std::string key, Get ref)
{
    return {key, [ref](const RunConfig& c) { return std::to_string(ref(const_cast<RunConfig&>(c))); },
            [ref, key](RunConfig& c, std::string_view v) { ref(c) = parse_int<int>(v, key); }};
}

std::vector<Field> make_fields()
{
    std::vector<Field> f;
    f.push_back({"seed", [](const RunConfig& c) { return std::to_string(c.seed); },
                 [](RunConfig& c, std::string_view v) {
                     c.seed = parse_int<std::uint64_t>(v, "seed");
                     c.model.seed = c.data.seed = c.train.phase1.seed = c.train.phase3.seed = c.seed;
                 }});
    f.push_back(int_at("model.n_vertices", [](RunConfig& c) -> int& { return c.model.n_vertices; }));
    f.push_back(int_at("model.k_id", [](RunConfig& c) -> int& { return c.model.k_id; }));
    f.push_back(int_at("model.k_exp", [](RunConfig& c) -> int& { return c.model.k_exp; }));
    f.push_back(real_at("model.smoothness", [](RunConfig& c) -> double& { return c.model.smoothness; }));
    f.push_back(int_at("data.n_subjects", [](RunConfig& c) -> int& { return c.data.n_subjects; }));
    f.push_back(int_at("data.images_per_subject", [](RunConfig& c) -> int& { return c.data.images_per_subject; }));
    f.push_back(real_at("data.landmark_noise_sigma", [](RunConfig& c) -> double& { return c.data.landmark_noise_sigma; }));
    f.push_back(int_at("data.image_resolution", [](RunConfig& c) -> int& { return c.data.image_resolution; }));
    f.push_back(real_at("data.splat_factor", [](RunConfig& c) -> double& { return c.data.splat_factor; }));
    const std::pair<const char*, Range PoseRanges::*> ranges[] = {{"yaw", &PoseRanges::yaw},
                                                                  {"pitch", &PoseRanges::pitch},
                                                                  {"roll", &PoseRanges::roll},
                                                                  {"scale", &PoseRanges::scale},
                                                                  {"translation", &PoseRanges::translation}};
    for (const auto& [name, member] : ranges) {
        const auto m = member;
        f.push_back(real_at(std::string("data.") + name + "_min",
                            [m](RunConfig& c) -> double& { return (c.data.pose_ranges.*m).lo; }));
        f.push_back(real_at(std::string("data.") + name + "_max",
                            [m](RunConfig& c) -> double& { return (c.data.pose_ranges.*m).hi; }));
    }
    f.push_back(int_at("fit.max_iterations", [](RunConfig& c) -> int& { return c.fit.max_iterations; }));
    f.push_back(real_at("fit.rel_tol", [](RunConfig& c) -> double& { return c.fit.rel_tol; }));
    f.push_back(real_at("fit.reg_id", [](RunConfig& c) -> double& { return c.fit.reg_id; }));
    f.push_back(real_at("fit.reg_exp", [](RunConfig& c) -> double& { return c.fit.reg_exp; }));
    f.push_back(integer("fit.subject", &RunConfig::fit_subject));
    f.push_back(integer("fit.images", &RunConfig::fit_images));
    f.push_back({"train.hidden",
                 [](const RunConfig& c) {
                     std::string s;
                     for (std::size_t i = 0; i < c.train.hidden.size(); ++i) {
                         s += (i ? "," : "") + std::to_string(c.train.hidden[i]);
                     }
                     return s;
                 },
                 [](RunConfig& c, std::string_view v) {
                     c.train.hidden.clear();
                     if (!trim(v).empty()) {
                         for (const auto part : split(v, ',')) {
                             c.train.hidden.push_back(parse_int<int>(part, "train.hidden"));
                         }
                     }
                 }});
    f.push_back(int_at("train.phase1_epochs", [](RunConfig& c) -> int& { return c.train.phase1.epochs; }));
    f.push_back({"train.batch_size", [](const RunConfig& c) { return std::to_string(c.train.phase1.batch_size); },
                 [](RunConfig& c, std::string_view v) {
                     c.train.phase1.batch_size = c.train.phase3.batch_size = parse_int<int>(v, "train.batch_size");
                 }});
    const std::pair<const char*, double AdamConfig::*> adam[] = {{"train.learning_rate", &AdamConfig::learning_rate},
                                                                 {"train.beta1", &AdamConfig::beta1},
                                                                 {"train.beta2", &AdamConfig::beta2},
                                                                 {"train.epsilon", &AdamConfig::epsilon}};
    for (const auto& [name, member] : adam) {
        const auto m = member;
        const std::string key = name;
        f.push_back({key, [m](const RunConfig& c) { return format_double(c.train.phase1.adam.*m); },
                     [m, key](RunConfig& c, std::string_view v) {
                         c.train.phase1.adam.*m = c.train.phase3.adam.*m = parse_double(v, key);
                     }});
    }
    f.push_back(int_at("train.prior_samples", [](RunConfig& c) -> int& { return c.train.prior_samples; }));
    f.push_back({"train.schedule",
                 [](const RunConfig& c) {
                     std::string s;
                     for (std::size_t i = 0; i < c.train.schedule.size(); ++i) {
                         s += (i ? "," : "") + std::to_string(c.train.schedule[i].epochs) + ":" +
                              format_double(c.train.schedule[i].lambda_r);
                     }
                     return s;
                 },
                 [](RunConfig& c, std::string_view v) {
                     c.train.schedule.clear();
                     if (trim(v).empty()) {
                         return;
                     }
                     for (const auto part : split(v, ',')) {
                         const auto colon = part.find(':');
                         require(colon != std::string_view::npos, ErrorKind::Parse,
                                 "train.schedule: expected epochs:lambda, got '" + std::string(part) + "'");
                         c.train.schedule.push_back({parse_int<int>(part.substr(0, colon), "train.schedule"),
                                                     parse_double(part.substr(colon + 1), "train.schedule")});
                     }
                 }});
    f.push_back(real("eval.crop_radius", &RunConfig::crop_radius));
    f.push_back(real("grad.step", &RunConfig::grad_step));
    f.push_back(integer("grad.coordinates", &RunConfig::grad_coordinates));
    f.push_back(real("grad.lambda_r", &RunConfig::grad_lambda_r));
    f.push_back(real("grad.tolerance", &RunConfig::grad_tolerance));
    f.push_back(integer("grad.batch", &RunConfig::grad_batch));
    return f;
}

const std::vector<Field>& fields()
{
    static const std::vector<Field> f = make_fields();
    return f;
}

const Field& field(std::string_view key)
{
    for (const Field& f : fields()) {
        if (f.key == key) {
            return f;
        }
    }
    fail(ErrorKind::Parse, "unknown config key '" + std::string(key) + "'");
}

} // namespace

// --- files -----------------------------------------------------------------------------------

void write_file_atomic(const std::filesystem::path& path, std::string_view bytes)
{
    if (path.has_parent_path()) {
        std::error_code ec;
        fs::create_directories(path.parent_path(), ec);
        require(!ec, ErrorKind::Io, "cannot create directory " + path.parent_path().string() + ": " + ec.message());
    }
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        require(out.good(), ErrorKind::Io, "cannot open " + tmp.string() + " for writing");
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        out.flush();
        require(out.good(), ErrorKind::Io, "write to " + tmp.string() + " failed");
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    require(!ec, ErrorKind::Io, "cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

std::string read_file(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    require(in.good(), ErrorKind::Io, "cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    require(!in.bad(), ErrorKind::Io, "read from " + path.string() + " failed");
    return ss.str();
}

std::string format_double(double value)
{
    char buf[64];
    const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), value);
    return std::string(buf, ptr);
}

std::string format_double(double value, int significant_digits)
{
    char buf[64];
    const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), value, std::chars_format::general, significant_digits);
    return std::string(buf, ptr);
}

// --- OBJ -------------------------------------------------------------------------------------

std::string obj_text(const Vector& coords)
{
    require(coords.size() % 3 == 0, ErrorKind::InvalidArgument, "coordinate count is not a multiple of 3");
    std::string out;
    for (Eigen::Index i = 0; i < coords.size(); i += 3) {
        out += "v " + format_double(coords(i), 9) + " " + format_double(coords(i + 1), 9) + " " +
               format_double(coords(i + 2), 9) + "\n";
    }
    return out;
}

void write_obj(const Shape& shape, const std::filesystem::path& path) { write_file_atomic(path, obj_text(shape.coords())); }

Shape parse_obj(std::string_view text)
{
    std::vector<double> coords;
    int line_no = 0;
    for (const auto raw : split(text, '\n')) {
        ++line_no;
        const std::string_view line = trim(raw);
        if (line.empty() || line.front() == '#') {
            continue;
        }
        const auto tok = tokens(line);
        const std::string where = "line " + std::to_string(line_no);
        require(tok.front() == "v", ErrorKind::Parse,
                where + ": unsupported directive '" + std::string(tok.front()) + "'");
        require(tok.size() == 4, ErrorKind::Parse, where + ": a vertex needs exactly three coordinates");
        for (std::size_t k = 1; k < 4; ++k) {
            coords.push_back(parse_double(tok[k], where));
        }
    }
    return Shape(Eigen::Map<const Vector>(coords.data(), static_cast<Eigen::Index>(coords.size())));
}

Shape read_obj(const std::filesystem::path& path) { return parse_obj(read_file(path)); }

// --- CSV -------------------------------------------------------------------------------------

std::string csv_text(const CsvTable& table)
{
    std::string out;
    for (std::size_t i = 0; i < table.header.size(); ++i) {
        out += (i ? "," : "") + table.header[i];
    }
    out += "\n";
    for (const auto& row : table.rows) {
        require(row.size() == table.header.size(), ErrorKind::InvalidArgument, "CSV row width differs from header");
        for (std::size_t i = 0; i < row.size(); ++i) {
            out += (i ? "," : "") + format_double(row[i]);
        }
        out += "\n";
    }
    return out;
}

void write_csv(const CsvTable& table, const std::filesystem::path& path) { write_file_atomic(path, csv_text(table)); }

CsvTable parse_csv(std::string_view text)
{
    CsvTable t;
    int line_no = 0;
    for (const auto raw : split(text, '\n')) {
        ++line_no;
        const std::string_view line = trim(raw);
        if (line.empty()) {
            continue;
        }
        if (t.header.empty()) {
            for (const auto h : split(line, ',')) {
                t.header.emplace_back(trim(h));
            }
            continue;
        }
        std::vector<double> row;
        for (const auto cell : split(line, ',')) {
            row.push_back(parse_double(cell, "line " + std::to_string(line_no)));
        }
        require(row.size() == t.header.size(), ErrorKind::Parse,
                "line " + std::to_string(line_no) + ": expected " + std::to_string(t.header.size()) + " fields");
        t.rows.push_back(std::move(row));
    }
    require(!t.header.empty(), ErrorKind::Parse, "CSV has no header");
    return t;
}

CsvTable read_csv(const std::filesystem::path& path) { return parse_csv(read_file(path)); }

CsvTable to_table(const VerificationReport& r)
{
    return {{"accuracy_mean", "accuracy_std", "eer", "auc", "tar_far10", "tar_far1", "rank1", "rank5"},
            {{r.accuracy_mean, r.accuracy_std, r.eer, r.auc, r.tar_far10, r.tar_far1, r.rank1, r.rank5}}};
}

CsvTable to_table(const ReconstructionReport& r)
{
    return {{"rmse_paper", "mean_vertex_dist", "n_pairs", "crop_radius"},
            {{r.rmse_paper, r.mean_vertex_dist, static_cast<double>(r.n_pairs), r.crop_radius}}};
}

CsvTable to_table(const DisentanglingReport& r)
{
    return {{"intra_distance", "inter_distance", "displacement_ratio", "variance_explained", "expression_pairs",
             "degenerate"},
            {{r.intra_distance, r.inter_distance, r.displacement_ratio, r.variance_explained,
              static_cast<double>(r.expression_pairs), r.degenerate ? 1.0 : 0.0}}};
}

CsvTable to_table(const Phase1Result& result)
{
    CsvTable t{{"epoch", "train_loss", "validation_loss"}, {}};
    for (const EpochLoss& e : result.trace) {
        t.rows.push_back({static_cast<double>(e.epoch), e.train, e.validation});
    }
    return t;
}

CsvTable to_table(const Phase3Result& result)
{
    CsvTable t{{"epoch", "lambda_r", "total", "recon", "ident", "accuracy"}, {}};
    for (const EpochReport& e : result.trace) {
        t.rows.push_back({static_cast<double>(e.epoch), e.lambda_r, e.train.total, e.train.recon, e.train.ident,
                          e.train.accuracy});
    }
    return t;
}

CsvTable trace_table(const FitResult& result)
{
    CsvTable t{{"pass", "objective"}, {}};
    for (std::size_t i = 0; i < result.objective_trace.size(); ++i) {
        t.rows.push_back({static_cast<double>(i + 1), result.objective_trace[i]});
    }
    return t;
}

// --- RunConfig -------------------------------------------------------------------------------

void RunConfig::set(std::string_view key, std::string_view value) { field(trim(key)).set(*this, trim(value)); }

std::string RunConfig::get(std::string_view key) const { return field(key).get(*this); }

const std::vector<std::string>& RunConfig::keys()
{
    static const std::vector<std::string> k = [] {
        std::vector<std::string> out;
        for (const Field& f : fields()) {
            out.push_back(f.key);
        }
        return out;
    }();
    return k;
}

std::string RunConfig::to_text() const
{
    std::string out;
    for (const Field& f : fields()) {
        out += f.key + " = " + f.get(*this) + "\n";
    }
    return out;
}

void RunConfig::validate() const
{
    model.validate();
    data.validate();
    fit.validate();
    train.validate();
    require(model.seed == seed && data.seed == seed && train.phase1.seed == seed && train.phase3.seed == seed,
            ErrorKind::InvalidArgument, "module seeds must follow the run seed");
    require(fit_subject >= 0 && fit_subject < data.n_subjects, ErrorKind::InvalidArgument,
            "fit.subject must lie in [0, data.n_subjects)");
    require(fit_images >= 1 && fit_images <= data.images_per_subject, ErrorKind::InvalidArgument,
            "fit.images must lie in [1, data.images_per_subject]");
    require(std::isfinite(crop_radius) && crop_radius > 0.0, ErrorKind::InvalidArgument, "eval.crop_radius must be > 0");
    require(std::isfinite(grad_step) && grad_step > 0.0, ErrorKind::InvalidArgument, "grad.step must be > 0");
    require(grad_coordinates >= 1, ErrorKind::InvalidArgument, "grad.coordinates must be >= 1");
    require(std::isfinite(grad_lambda_r) && grad_lambda_r >= 0.0, ErrorKind::InvalidArgument,
            "grad.lambda_r must be >= 0");
    require(grad_tolerance > 0.0, ErrorKind::InvalidArgument, "grad.tolerance must be > 0");
    require(grad_batch >= 1, ErrorKind::InvalidArgument, "grad.batch must be >= 1");
}

bool operator==(const RunConfig& a, const RunConfig& b) { return a.to_text() == b.to_text(); }

RunConfig parse_config(std::string_view text, RunConfig base)
{
    int line_no = 0;
    for (const auto raw : split(text, '\n')) {
        ++line_no;
        std::string_view line = raw;
        if (const auto hash = line.find('#'); hash != std::string_view::npos) {
            line = line.substr(0, hash);
        }
        line = trim(line);
        if (line.empty()) {
            continue;
        }
        const auto eq = line.find('=');
        const std::string where = "config line " + std::to_string(line_no);
        require(eq != std::string_view::npos, ErrorKind::Parse, where + ": expected 'key = value'");
        try {
            base.set(line.substr(0, eq), line.substr(eq + 1));
        } catch (const Error& e) {
            throw Error(e.kind(), where + ": " + e.what());
        }
    }
    return base;
}

RunConfig load_config(const std::filesystem::path& path, RunConfig base) { return parse_config(read_file(path), base); }

// --- archives --------------------------------------------------------------------------------

const Matrix& Archive::tensor(const std::string& name) const
{
    const auto it = tensors.find(name);
    require(it != tensors.end(), ErrorKind::Corruption, "archive lacks tensor '" + name + "'");
    return it->second;
}

const std::string& Archive::entry(const std::string& name) const
{
    const auto it = text.find(name);
    require(it != text.end(), ErrorKind::Corruption, "archive lacks entry '" + name + "'");
    return it->second;
}

std::string encode_archive(const Archive& archive)
{
    std::string out(kMagic, sizeof(kMagic));
    put<std::uint32_t>(out, kArchiveVersion);
    put<std::uint64_t>(out, archive.text.size());
    for (const auto& [key, value] : archive.text) {
        put_string(out, key);
        put_string(out, value);
    }
    put<std::uint64_t>(out, archive.tensors.size());
    for (const auto& [key, m] : archive.tensors) {
        put_string(out, key);
        put<std::uint64_t>(out, static_cast<std::uint64_t>(m.rows()));
        put<std::uint64_t>(out, static_cast<std::uint64_t>(m.cols()));
        out.append(reinterpret_cast<const char*>(m.data()), static_cast<std::size_t>(m.size()) * sizeof(double));
    }
    put<std::uint64_t>(out, fnv1a(out));
    return out;
}

Archive decode_archive(std::string_view bytes)
{
    require(bytes.size() >= sizeof(kMagic), ErrorKind::Corruption, "archive is truncated");
    require(bytes.substr(0, sizeof(kMagic)) == std::string_view(kMagic, sizeof(kMagic)), ErrorKind::Corruption,
            "not a faceshape archive");
    Reader head(bytes.substr(sizeof(kMagic)));
    const auto version = head.get<std::uint32_t>();
    require(version == kArchiveVersion, ErrorKind::VersionMismatch,
            "archive format version " + std::to_string(version) + ", this build reads version " +
                std::to_string(kArchiveVersion));
    require(bytes.size() >= sizeof(kMagic) + 4 + 8, ErrorKind::Corruption, "archive is truncated");
    const std::string_view body = bytes.substr(0, bytes.size() - 8);
    std::uint64_t stored = 0;
    std::memcpy(&stored, bytes.data() + body.size(), 8);
    require(stored == fnv1a(body), ErrorKind::Corruption, "archive checksum mismatch (truncated or modified file)");

    Reader r(body.substr(sizeof(kMagic) + 4));
    Archive a;
    const auto n_text = r.get<std::uint64_t>();
    for (std::uint64_t i = 0; i < n_text; ++i) {
        std::string key = r.get_string();
        a.text[std::move(key)] = r.get_string();
    }
    const auto n_tensors = r.get<std::uint64_t>();
    for (std::uint64_t i = 0; i < n_tensors; ++i) {
        std::string key = r.get_string();
        const auto rows = r.get<std::uint64_t>();
        const auto cols = r.get<std::uint64_t>();
        require(cols == 0 || rows <= r.remaining() / 8 / cols, ErrorKind::Corruption, "tensor '" + key + "' overruns the archive");
        Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
        const std::string_view data = r.take(static_cast<std::size_t>(rows * cols * 8));
        std::memcpy(m.data(), data.data(), data.size());
        a.tensors[std::move(key)] = std::move(m);
    }
    require(r.remaining() == 0, ErrorKind::Corruption, "trailing bytes in archive");
    return a;
}

void save_archive(const Archive& archive, const std::filesystem::path& path)
{
    write_file_atomic(path, encode_archive(archive));
}

Archive load_archive(const std::filesystem::path& path)
{
    const std::string bytes = read_file(path);
    try {
        return decode_archive(bytes);
    } catch (const Error& e) {
        throw Error(e.kind(), path.string() + ": " + e.what());
    }
}

void save_model(const MorphableModel& model, const RunConfig& config, const std::filesystem::path& path)
{
    Archive a;
    a.text["kind"] = "model";
    a.text["config"] = config.to_text();
    a.tensors["mean"] = model.mean.coords();
    a.tensors["basis_id"] = model.basis_id;
    a.tensors["basis_exp"] = model.basis_exp;
    a.tensors["sigma_id"] = model.sigma_id;
    a.tensors["sigma_exp"] = model.sigma_exp;
    a.tensors["landmark_indices"] = column(model.landmark_indices);
    a.tensors["nose_tip_index"] = scalar(model.nose_tip_index);
    save_archive(a, path);
}

MorphableModel load_model(const std::filesystem::path& path)
{
    const Archive a = load_archive(path);
    expect_kind(a, "model", path);
    MorphableModel m{Shape(vec(a, "mean")),
                     a.tensor("basis_id"),
                     a.tensor("basis_exp"),
                     vec(a, "sigma_id"),
                     vec(a, "sigma_exp"),
                     ints(a.tensor("landmark_indices"), "landmark index"),
                     as_int(a.tensor("nose_tip_index")(0, 0), "nose tip index")};
    m.validate();
    return m;
}

void save_dataset(const Dataset& data, const RunConfig& config, const std::filesystem::path& path)
{
    require(!data.samples.empty(), ErrorKind::InvalidArgument, "cannot save an empty dataset");
    const auto n = static_cast<Eigen::Index>(data.samples.size());
    const RenderedSample& first = data.samples.front();
    Matrix labels(n, 1), alpha_id(first.ground_truth_coeffs.alpha_id.size(), n),
        alpha_exp(first.ground_truth_coeffs.alpha_exp.size(), n), scale(1, n), rotation(9, n), translation(3, n),
        landmarks(first.landmarks.points.size(), n), depth(first.depth_image.size(), n),
        shapes(first.ground_truth_shape.coords().size(), n);
    for (Eigen::Index j = 0; j < n; ++j) {
        const RenderedSample& s = data.samples[static_cast<std::size_t>(j)];
        labels(j, 0) = s.subject_label;
        alpha_id.col(j) = s.ground_truth_coeffs.alpha_id;
        alpha_exp.col(j) = s.ground_truth_coeffs.alpha_exp;
        scale(0, j) = s.ground_truth_pose.scale;
        rotation.col(j) = Eigen::Map<const Eigen::Matrix<double, 9, 1>>(s.ground_truth_pose.rotation.data());
        translation.col(j) = s.ground_truth_pose.translation;
        landmarks.col(j) = s.landmarks.points;
        depth.col(j) = s.depth_image;
        shapes.col(j) = s.ground_truth_shape.coords();
    }
    Archive a;
    a.text["kind"] = "dataset";
    a.text["config"] = config.to_text();
    a.tensors["labels"] = labels;
    a.tensors["alpha_id"] = alpha_id;
    a.tensors["alpha_exp"] = alpha_exp;
    a.tensors["pose_scale"] = scale;
    a.tensors["pose_rotation"] = rotation;
    a.tensors["pose_translation"] = translation;
    a.tensors["landmarks"] = landmarks;
    a.tensors["depth"] = depth;
    a.tensors["shapes"] = shapes;
    a.tensors["split_train"] = column(data.split.train);
    a.tensors["split_validation"] = column(data.split.validation);
    a.tensors["split_test"] = column(data.split.test);
    a.tensors["n_train_subjects"] = scalar(data.split.n_train_subjects);
    save_archive(a, path);
}

Dataset load_dataset(const std::filesystem::path& path)
{
    const Archive a = load_archive(path);
    expect_kind(a, "dataset", path);
    const RunConfig config = parse_config(a.entry("config"));
    Dataset d;
    d.spec = config.data;
    const Matrix& labels = a.tensor("labels");
    const auto n = labels.rows();
    require(n == static_cast<Eigen::Index>(d.spec.n_subjects) * d.spec.images_per_subject, ErrorKind::Corruption,
            "dataset sample count does not match its spec");
    const char* per_sample[] = {"alpha_id", "alpha_exp", "pose_scale", "pose_rotation", "pose_translation",
                                "landmarks", "depth", "shapes"};
    for (const char* name : per_sample) {
        require(a.tensor(name).cols() == n, ErrorKind::Corruption, std::string("tensor '") + name + "' has the wrong sample count");
    }
    require(a.tensor("pose_rotation").rows() == 9 && a.tensor("pose_translation").rows() == 3, ErrorKind::Corruption,
            "malformed pose tensors");
    for (Eigen::Index j = 0; j < n; ++j) {
        PoseParams pose;
        pose.scale = a.tensor("pose_scale")(0, j);
        pose.rotation = Eigen::Map<const Eigen::Matrix3d>(a.tensor("pose_rotation").col(j).data());
        pose.translation = a.tensor("pose_translation").col(j);
        RenderedSample s{as_int(labels(j, 0), "label"),
                         {a.tensor("alpha_id").col(j), a.tensor("alpha_exp").col(j)},
                         pose,
                         {a.tensor("landmarks").col(j)},
                         a.tensor("depth").col(j),
                         Shape(Vector(a.tensor("shapes").col(j)))};
        d.samples.push_back(std::move(s));
    }
    d.split.train = ints(a.tensor("split_train"), "split index");
    d.split.validation = ints(a.tensor("split_validation"), "split index");
    d.split.test = ints(a.tensor("split_test"), "split index");
    d.split.n_train_subjects = as_int(a.tensor("n_train_subjects")(0, 0), "n_train_subjects");
    for (const auto* list : {&d.split.train, &d.split.validation, &d.split.test}) {
        for (const int i : *list) {
            require(i >= 0 && i < n, ErrorKind::Corruption, "split index out of range");
        }
    }
    return d;
}

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path)
{
    checkpoint.net.validate();
    Archive a;
    a.text["kind"] = "checkpoint";
    a.text["config"] = checkpoint.config.to_text();
    const EncoderNet& e = checkpoint.net.encoder;
    std::vector<int> activations;
    for (std::size_t i = 0; i < e.trunk.size(); ++i) {
        a.tensors["encoder.trunk." + std::to_string(i) + ".weight"] = e.trunk[i].weight;
        a.tensors["encoder.trunk." + std::to_string(i) + ".bias"] = e.trunk[i].bias;
        activations.push_back(static_cast<int>(e.trunk[i].activation));
    }
    activations.push_back(static_cast<int>(e.head_id.activation));
    activations.push_back(static_cast<int>(e.head_res.activation));
    a.tensors["encoder.activations"] = column(activations);
    a.tensors["encoder.head_id.weight"] = e.head_id.weight;
    a.tensors["encoder.head_id.bias"] = e.head_id.bias;
    a.tensors["encoder.head_res.weight"] = e.head_res.weight;
    a.tensors["encoder.head_res.bias"] = e.head_res.bias;
    const DecoderNet& d = checkpoint.net.decoder;
    a.tensors["decoder.weight_id"] = d.weight_id;
    a.tensors["decoder.bias_id"] = d.bias_id;
    a.tensors["decoder.weight_res"] = d.weight_res;
    a.tensors["decoder.bias_res"] = d.bias_res;
    a.tensors["head.weight"] = checkpoint.net.head.weight;
    a.tensors["head.bias"] = checkpoint.net.head.bias;
    save_archive(a, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path)
{
    const Archive a = load_archive(path);
    expect_kind(a, "checkpoint", path);
    Checkpoint c;
    c.config = parse_config(a.entry("config"));
    const std::vector<int> activations = ints(a.tensor("encoder.activations"), "activation tag");
    require(activations.size() >= 2, ErrorKind::Corruption, "encoder activation list is too short");
    const auto activation = [](int tag) {
        require(tag == 0 || tag == 1, ErrorKind::Corruption, "unknown activation tag " + std::to_string(tag));
        return static_cast<Activation>(tag);
    };
    EncoderNet& e = c.net.encoder;
    for (std::size_t i = 0; i + 2 < activations.size(); ++i) {
        const std::string p = "encoder.trunk." + std::to_string(i);
        e.trunk.push_back({a.tensor(p + ".weight"), vec(a, p + ".bias"), activation(activations[i])});
    }
    e.head_id = {a.tensor("encoder.head_id.weight"), vec(a, "encoder.head_id.bias"),
                 activation(activations[activations.size() - 2])};
    e.head_res = {a.tensor("encoder.head_res.weight"), vec(a, "encoder.head_res.bias"),
                  activation(activations.back())};
    c.net.decoder = {a.tensor("decoder.weight_id"), vec(a, "decoder.bias_id"),
                     a.tensor("decoder.weight_res"), vec(a, "decoder.bias_res")};
    c.net.head = {a.tensor("head.weight"), vec(a, "head.bias")};
    c.net.validate();
    return c;
}

} // namespace faceshape

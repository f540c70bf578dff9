// SPDX-License-Identifier: Apache-2.0
#include "faceshape/cli.hpp"
#include "faceshape/error.hpp"
#include "faceshape/evaluation.hpp"
#include "faceshape/fitting.hpp"
#include "faceshape/io.hpp"
#include "faceshape/training.hpp"

#include "CLI11.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace faceshape {

namespace {

namespace fs = std::filesystem;

struct CommonOptions
{
    std::string config_file;
    std::optional<std::uint64_t> seed;
    std::vector<std::string> overrides;
    std::string out_dir = "out";
    std::string data_dir;
    std::string checkpoint;
};

void add_common(CLI::App* cmd, CommonOptions& o)
{
    cmd->add_option("--config", o.config_file, "key = value config file");
    cmd->add_option("--seed", o.seed, "seed for every random stream (overrides the config)");
    cmd->add_option("--set", o.overrides, "KEY=VALUE override, repeatable");
    cmd->add_option("--out", o.out_dir, "output directory")->capture_default_str();
}

RunConfig effective_config(const CommonOptions& o)
{
    RunConfig cfg;
    if (!o.config_file.empty()) {
        cfg = load_config(o.config_file, cfg);
    }
    for (const std::string& kv : o.overrides) {
        const auto eq = kv.find('=');
        require(eq != std::string::npos, ErrorKind::Parse, "--set expects KEY=VALUE, got '" + kv + "'");
        cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (o.seed) {
        cfg.set("seed", std::to_string(*o.seed));
    }
    cfg.validate();
    return cfg;
}

fs::path data_dir(const CommonOptions& o) { return o.data_dir.empty() ? fs::path(o.out_dir) : fs::path(o.data_dir); }

fs::path checkpoint_path(const CommonOptions& o)
{
    return o.checkpoint.empty() ? fs::path(o.out_dir) / "checkpoint.fsa" : fs::path(o.checkpoint);
}

void echo_config(const RunConfig& cfg, const fs::path& dir) { write_file_atomic(dir / "config.txt", cfg.to_text()); }

void check_model_matches(const MorphableModel& model, const Dataset& data)
{
    require(!data.samples.empty() && data.samples.front().ground_truth_shape.size() == model.mean.size() &&
                data.samples.front().ground_truth_coeffs.alpha_id.size() == model.basis_id.cols() &&
                data.samples.front().ground_truth_coeffs.alpha_exp.size() == model.basis_exp.cols(),
            ErrorKind::InvalidArgument, "dataset does not belong to the stored model");
}

int cmd_gen_data(const CommonOptions& o, std::ostream& out)
{
    const RunConfig cfg = effective_config(o);
    const fs::path dir(o.out_dir);
    const MorphableModel model = generate_model(cfg.model);
    const Dataset data = build_dataset(model, cfg.data);
    save_model(model, cfg, dir / "model.fsa");
    save_dataset(data, cfg, dir / "dataset.fsa");
    echo_config(cfg, dir);
    out << "gen-data: " << data.samples.size() << " samples, " << model.mean.size() << " vertices -> " << dir.string()
        << "\n";
    return 0;
}

int cmd_fit(const CommonOptions& o, std::ostream& out)
{
    const RunConfig cfg = effective_config(o);
    const fs::path dir(o.out_dir);
    const MorphableModel model = load_model(data_dir(o) / "model.fsa");
    const Dataset data = load_dataset(data_dir(o) / "dataset.fsa");
    check_model_matches(model, data);
    const int m = data.spec.images_per_subject;
    require(cfg.fit_subject < data.spec.n_subjects && cfg.fit_images <= m, ErrorKind::InvalidArgument,
            "fit.subject or fit.images exceeds the stored dataset");

    std::vector<LandmarkSet2D> landmarks;
    for (int j = 0; j < cfg.fit_images; ++j) {
        landmarks.push_back(data.samples.at(static_cast<std::size_t>(cfg.fit_subject * m + j)).landmarks);
    }
    const FitResult r = multi_image_fit(model, landmarks, cfg.fit);

    const Vector zero_exp = Vector::Zero(model.basis_exp.cols());
    const Shape identity = compose_shape(model, {r.alpha_id, zero_exp});
    const Vector& truth_id = data.samples.at(static_cast<std::size_t>(cfg.fit_subject * m)).ground_truth_coeffs.alpha_id;
    const Shape truth = compose_shape(model, {truth_id, zero_exp});
    double max_err = 0.0;
    for (std::size_t v = 0; v < identity.size(); ++v) {
        max_err = std::max(max_err, (identity.vertex(v) - truth.vertex(v)).norm());
    }

    write_obj(identity, dir / "fit_identity.obj");
    CsvTable coeffs{{"image", "index", "value"}, {}};
    for (Eigen::Index k = 0; k < r.alpha_id.size(); ++k) {
        coeffs.rows.push_back({-1.0, static_cast<double>(k), r.alpha_id(k)});
    }
    for (std::size_t j = 0; j < r.per_image.size(); ++j) {
        write_obj(compose_shape(model, {r.alpha_id, r.per_image[j].alpha_exp}),
                  dir / ("fit_full_" + std::to_string(j) + ".obj"));
        for (Eigen::Index k = 0; k < r.per_image[j].alpha_exp.size(); ++k) {
            coeffs.rows.push_back({static_cast<double>(j), static_cast<double>(k), r.per_image[j].alpha_exp(k)});
        }
    }
    write_csv(coeffs, dir / "fit_coefficients.csv");
    write_csv(trace_table(r), dir / "fit_trace.csv");
    write_csv({{"subject", "images", "iterations_used", "converged", "final_objective", "identity_max_vertex_error"},
               {{static_cast<double>(cfg.fit_subject), static_cast<double>(cfg.fit_images),
                 static_cast<double>(r.iterations_used), r.converged ? 1.0 : 0.0,
                 r.objective_trace.empty() ? 0.0 : r.objective_trace.back(), max_err}}},
              dir / "fit_summary.csv");
    echo_config(cfg, dir);
    out << "fit: subject " << cfg.fit_subject << ", " << r.iterations_used << " passes, converged "
        << (r.converged ? "true" : "false") << ", identity max vertex error " << format_double(max_err, 6) << "\n";
    return 0;
}

int cmd_train(const CommonOptions& o, std::ostream& out)
{
    const RunConfig cfg = effective_config(o);
    const fs::path dir(o.out_dir);
    const MorphableModel model = load_model(data_dir(o) / "model.fsa");
    const Dataset data = load_dataset(data_dir(o) / "dataset.fsa");
    check_model_matches(model, data);
    const TrainingRun run = run_training(model, data, cfg.train);
    save_checkpoint({run.after_phase2, cfg}, dir / "checkpoint_phase2.fsa");
    save_checkpoint({run.final, cfg}, checkpoint_path(o));
    write_report_csv(run.phase1, dir / "phase1_trace.csv");
    write_report_csv(run.phase3, dir / "phase3_trace.csv");
    echo_config(cfg, dir);
    if (run.phase3.aborted) {
        fail(ErrorKind::NumericalFailure, "joint training aborted (" + run.phase3.abort_reason +
                                              "); the last good parameters were saved");
    }
    const LossReport last = run.phase3.trace.empty() ? LossReport{} : run.phase3.trace.back().train;
    out << "train: phase I loss " << format_double(run.phase1.trace.back().train, 6) << ", phase III loss "
        << format_double(last.total, 6) << ", training accuracy " << format_double(last.accuracy, 6) << "\n";
    return 0;
}

int cmd_eval(const CommonOptions& o, std::ostream& out)
{
    const RunConfig cfg = effective_config(o);
    const fs::path dir(o.out_dir);
    const MorphableModel model = load_model(data_dir(o) / "model.fsa");
    const Dataset data = load_dataset(data_dir(o) / "dataset.fsa");
    check_model_matches(model, data);
    const Checkpoint ck = load_checkpoint(checkpoint_path(o));
    const std::vector<int>& test = data.split.test;

    const ReconstructionReport rec =
        evaluate_reconstruction(predict_shapes(ck.net.encoder, ck.net.decoder, model.mean, data, test),
                                truth_shapes(data, test), model.landmark_indices, model.nose_tip_index, cfg.crop_radius);
    std::vector<Vector> codes;
    std::vector<int> labels;
    for (std::size_t i = 0; i < test.size(); ++i) {
        codes.push_back(encoder_forward(ck.net.encoder, data.samples.at(static_cast<std::size_t>(test[i])).depth_image).c_id);
        labels.push_back(data.samples.at(static_cast<std::size_t>(test[i])).subject_label);
    }
    const VerificationReport ver = verification_report(codes, labels, cfg.seed);
    const DisentanglingReport dis = disentangling_report(network_encoder(ck.net.encoder), model, data, test, cfg.seed);

    write_report_csv(rec, dir / "reconstruction.csv");
    write_report_csv(ver, dir / "verification.csv");
    write_report_csv(dis, dir / "disentangling.csv");
    echo_config(cfg, dir);
    out << "eval: rmse " << format_double(rec.rmse_paper, 6) << ", auc " << format_double(ver.auc, 6) << ", eer "
        << format_double(ver.eer, 6) << ", displacement ratio " << format_double(dis.displacement_ratio, 6) << "\n";
    return 0;
}

int cmd_export_bases(const CommonOptions& o, std::ostream& out)
{
    const RunConfig cfg = effective_config(o);
    const fs::path dir = fs::path(o.out_dir) / "bases";
    const Checkpoint ck = load_checkpoint(checkpoint_path(o));
    const DecoderNet& d = ck.net.decoder;
    for (Eigen::Index k = 0; k < d.weight_id.cols(); ++k) {
        write_obj(Shape(Vector(d.weight_id.col(k))), dir / ("id_" + std::to_string(k) + ".obj"));
    }
    for (Eigen::Index k = 0; k < d.weight_res.cols(); ++k) {
        write_obj(Shape(Vector(d.weight_res.col(k))), dir / ("res_" + std::to_string(k) + ".obj"));
    }
    echo_config(cfg, fs::path(o.out_dir));
    out << "export-bases: " << d.weight_id.cols() << " identity and " << d.weight_res.cols() << " residual columns -> "
        << dir.string() << "\n";
    return 0;
}

int cmd_check_grad(const CommonOptions& o, std::ostream& out)
{
    const RunConfig cfg = effective_config(o);
    const MorphableModel model = generate_model(cfg.model);
    const Dataset data = build_dataset(model, cfg.data);
    const JointNet net = o.checkpoint.empty() ? make_initial_network(model, data, cfg.train)
                                              : load_checkpoint(o.checkpoint).net;
    const std::size_t count = std::min(data.split.train.size(), static_cast<std::size_t>(cfg.grad_batch));
    const std::vector<TrainingExample> batch =
        training_examples(data, std::span<const int>(data.split.train.data(), count));
    Rng rng(cfg.seed);
    const GradientCheck g = finite_diff_check(net, model.mean, batch, cfg.grad_lambda_r, cfg.grad_step,
                                              cfg.grad_coordinates, rng);
    out << "max_relative_error = " << format_double(g.max_relative_error, 6) << "\n";
    out << "coordinates = " << g.coordinates << "\n";
    require(g.max_relative_error < cfg.grad_tolerance, ErrorKind::NumericalFailure,
            "gradient check exceeded tolerance " + format_double(cfg.grad_tolerance));
    return 0;
}

} // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err)
{
    CLI::App app{"Synthetic 3D face shape pipeline: data generation, landmark fitting, joint training, evaluation"};
    app.name("faceshape");
    app.require_subcommand(1);
    CommonOptions o;

    struct Command
    {
        const char* name;
        const char* help;
        int (*run)(const CommonOptions&, std::ostream&);
    };
    const Command commands[] = {
        {"gen-data", "generate the synthetic model and dataset", cmd_gen_data},
        {"fit", "fit identity, expressions and poses to one stored subject", cmd_fit},
        {"train", "run training phases I, II and III", cmd_train},
        {"eval", "reconstruction, verification and disentangling reports", cmd_eval},
        {"export-bases", "write decoder weight columns as OBJ point clouds", cmd_export_bases},
        {"check-grad", "compare backpropagation with finite differences", cmd_check_grad},
    };
    std::vector<std::pair<CLI::App*, const Command*>> subs;
    for (const Command& c : commands) {
        CLI::App* sub = app.add_subcommand(c.name, c.help);
        add_common(sub, o);
        const std::string name = c.name;
        if (name == "fit" || name == "train" || name == "eval") {
            sub->add_option("--data", o.data_dir, "directory holding model.fsa and dataset.fsa (default: --out)");
        }
        if (name == "train" || name == "eval" || name == "export-bases" || name == "check-grad") {
            sub->add_option("--checkpoint", o.checkpoint,
                            name == "check-grad" ? "audit this checkpoint instead of a fresh network"
                                                 : "checkpoint path (default: <out>/checkpoint.fsa)");
        }
        subs.emplace_back(sub, &c);
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::ParseError& e) {
        app.exit(e, out, err);
        return 2;
    }

    try {
        for (const auto& [sub, command] : subs) {
            if (sub->parsed()) {
                return command->run(o, out);
            }
        }
        return 2;
    } catch (const Error& e) {
        err << "error: " << to_string(e.kind()) << ": " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        err << "error: internal: " << e.what() << "\n";
        return 1;
    }
}

} // namespace faceshape

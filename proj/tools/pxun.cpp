// Command-line harness for Kronecker single-pixel sensing, proximal
// reconstruction, unrolled-network training and the associated diagnostics.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "pxun/dir.hpp"
#include "pxun/gradcheck.hpp"
#include "pxun/imageio.hpp"
#include "pxun/metrics.hpp"
#include "pxun/proximal.hpp"
#include "pxun/restorers.hpp"
#include "pxun/sensing.hpp"
#include "pxun/training.hpp"

using namespace pxun;
using nlohmann::json;

namespace {

sensing::OperatorKind kind_from_name(const std::string& name) {
    if (name == "gaussian") return sensing::OperatorKind::GaussianOrthonormal;
    if (name == "hadamard") return sensing::OperatorKind::Hadamard;
    throw ValueError("operator kind must be 'gaussian' or 'hadamard'");
}

// Rejects keys outside the schema, recursively for nested objects.
void check_keys(const json& j, const std::string& where,
                const std::vector<std::string>& allowed) {
    if (!j.is_object()) throw ConfigError("config: '" + where + "' must be an object");
    for (const auto& [key, value] : j.items()) {
        if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
            throw ConfigError("config: unknown key '" + where + "." + key + "'");
    }
}

struct MeasurementFile {
    sensing::MeasurementOperator op;
    sensing::Measurement meas;
};

void save_measurement(const std::string& path, const MeasurementFile& mf) {
    Container c;
    sensing::save_operator(mf.op, c);
    ContainerEntry y;
    y.shape = {static_cast<std::uint32_t>(mf.meas.values.rows()),
               static_cast<std::uint32_t>(mf.meas.values.cols())};
    y.values = mf.meas.values.values();
    c.put("Y", std::move(y));
    c.save(path);
}

MeasurementFile load_measurement(const std::string& path) {
    const Container c = Container::load(path);
    MeasurementFile mf;
    mf.op = sensing::load_operator(c);
    const auto& y = c.at("Y");
    if (y.shape.size() != 2) throw IoError("measurement: Y must be rank 2");
    mf.meas.values = Mat(static_cast<int>(y.shape[0]), static_cast<int>(y.shape[1]), y.values);
    mf.meas.operator_id = mf.op.id;
    return mf;
}

std::vector<double> parse_double_list(const std::string& text) {
    std::vector<double> out;
    std::size_t pos = 0;
    while (pos < text.size()) {
        std::size_t next = text.find(',', pos);
        if (next == std::string::npos) next = text.size();
        out.push_back(std::stod(text.substr(pos, next - pos)));
        pos = next + 1;
    }
    if (out.empty()) throw ValueError("expected a comma-separated list of numbers");
    return out;
}

std::vector<int> parse_int_list(const std::string& text) {
    std::vector<int> out;
    for (double v : parse_double_list(text)) out.push_back(static_cast<int>(v));
    return out;
}

// ---- sense ----

int cmd_sense(const std::string& image_path, double cr, const std::string& kind, double sigma,
              std::uint64_t seed, const std::string& out_path) {
    const Image x = read_image(image_path);
    const auto op = sensing::make_operator(x.rows(), x.cols(), cr, kind_from_name(kind), seed);
    sensing::NoiseModel noise;
    if (sigma > 0.0) {
        noise.kind = sensing::NoiseKind::Gaussian;
        noise.sigma = sigma;
        noise.seed = seed ^ 0x6e6f697365ULL;
    }
    MeasurementFile mf{op, sensing::forward(op, x, noise)};
    save_measurement(out_path, mf);
    std::printf("sense: %dx%d -> %dx%d (cr=%.6g) written to %s\n", x.rows(), x.cols(),
                op.meas_rows(), op.meas_cols(), op.cr, out_path.c_str());
    return 0;
}

// ---- reconstruct ----

int cmd_reconstruct(const std::string& meas_path, std::string scheme_name_arg,
                    const std::string& restorer_name, double strength, int inner_iters,
                    const std::string& checkpoint, int k_steps, double mu,
                    const std::string& out_path, const std::string& gt_path,
                    const std::string& metrics_path) {
    const MeasurementFile mf = load_measurement(meas_path);
    proximal::Trajectory traj;
    if (restorer_name == "dir") {
        if (checkpoint.empty()) throw ValueError("reconstruct: dir restorer requires --checkpoint");
        const auto info = training::read_checkpoint_info(checkpoint);
        const auto scheme = scheme_name_arg.empty() ? info.config.scheme
                                                    : training::scheme_from_name(scheme_name_arg);
        if (info.width == 4) {
            auto params = training::load_checkpoint<float>(checkpoint);
            traj = training::reconstruct(params, mf.meas, mf.op, scheme);
        } else {
            auto params = training::load_checkpoint<double>(checkpoint);
            traj = training::reconstruct(params, mf.meas, mf.op, scheme);
        }
    } else {
        restorers::RestorerSpec spec;
        spec.kind = restorers::kind_from_name(restorer_name);
        spec.strength = strength;
        spec.inner_iters = inner_iters;
        auto restorer = restorers::make_restorer(spec);
        const auto scheme = training::scheme_from_name(scheme_name_arg.empty() ? "hqs"
                                                                               : scheme_name_arg);
        traj = proximal::run(scheme, mf.meas, mf.op, restorers::as_fn(*restorer), k_steps,
                             std::vector<double>(k_steps, mu));
    }
    write_image(out_path, traj.iterates.back());
    if (!gt_path.empty()) {
        const Image gt = read_image(gt_path);
        const auto rows = proximal::convergence_report(traj, gt);
        if (!metrics_path.empty()) proximal::write_convergence_csv(metrics_path, rows);
        std::printf("reconstruct: final psnr=%.4f dB over %zu iterations\n", rows.back().psnr,
                    traj.iterates.size());
    } else {
        std::printf("reconstruct: wrote %s after %zu iterations\n", out_path.c_str(),
                    traj.iterates.size());
    }
    return 0;
}

// ---- train ----

int cmd_train(const std::string& config_path) {
    std::ifstream f(config_path);
    if (!f) throw IoError("train: cannot open config '" + config_path + "'");
    json j;
    try {
        j = json::parse(f);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    check_keys(j, "root",
               {"train", "precision", "dataset", "out_checkpoint", "out_log", "resume"});
    check_keys(j.at("train"), "train",
               {"unroll", "cr_range", "batch", "steps", "lr_init", "lr_final", "seed", "scheme",
                "dir", "extents", "alpha", "workers", "clip_norm"});
    check_keys(j.at("train").at("dir"), "train.dir",
               {"base_channels", "levels", "ctb_per_stage", "window", "heads", "adaconv_kernels",
                "in_channels"});
    const auto& jd = j.at("dataset");
    check_keys(jd, "dataset", {"kind", "count", "extent", "seed", "path"});

    const training::TrainConfig cfg = training::train_config_from_json_text(j.at("train").dump());
    const std::string precision = j.value("precision", std::string("f32"));
    if (precision != "f32" && precision != "f64")
        throw ConfigError("config: precision must be 'f32' or 'f64'");

    std::vector<Image> dataset;
    const std::string dkind = jd.at("kind").get<std::string>();
    if (dkind == "synthetic") {
        dataset = training::synth_dataset(jd.at("count").get<int>(), jd.at("extent").get<int>(),
                                          jd.at("seed").get<std::uint64_t>());
    } else if (dkind == "dir") {
        dataset = training::ingest_corpus(jd.at("path").get<std::string>(), jd.at("extent").get<int>());
    } else {
        throw ConfigError("config: dataset.kind must be 'synthetic' or 'dir'");
    }

    const std::string out_ck = j.value("out_checkpoint", std::string());
    const std::string out_log = j.value("out_log", std::string());
    const std::string resume = j.value("resume", std::string());

    training::TrainResult result;
    auto progress = [](const training::TrainLogRow& r) {
        if (r.step % 100 == 0)
            std::printf("step %d loss=%.6g lr=%.3g cr=%.3f\n", r.step, r.loss, r.lr, r.cr);
    };
    if (precision == "f32")
        training::train<float>(cfg, dataset, result, resume, out_log, out_ck, progress);
    else
        training::train<double>(cfg, dataset, result, resume, out_log, out_ck, progress);
    const double last = result.log.empty() ? 0.0 : result.log.back().loss;
    std::printf("train: %d steps complete, final loss %.6g\n", result.total_steps, last);
    return 0;
}

// ---- evaluate ----

int cmd_evaluate(const std::string& checkpoint, const std::string& crs_text,
                 const std::string& synth_spec, const std::string& dir_spec,
                 const std::string& out_csv, const std::string& out_json, std::uint64_t seed,
                 int workers) {
    const auto crs = parse_double_list(crs_text);
    std::vector<Image> dataset;
    if (!synth_spec.empty()) {
        const auto parts = parse_double_list(synth_spec);
        if (parts.size() != 3) throw ValueError("evaluate: --synthetic expects count,extent,seed");
        dataset = training::synth_dataset(static_cast<int>(parts[0]), static_cast<int>(parts[1]),
                                          static_cast<std::uint64_t>(parts[2]));
    } else if (!dir_spec.empty()) {
        const auto comma = dir_spec.rfind(',');
        if (comma == std::string::npos) throw ValueError("evaluate: --dataset expects path,extent");
        dataset = training::ingest_corpus(dir_spec.substr(0, comma),
                                          std::stoi(dir_spec.substr(comma + 1)));
    } else {
        throw ValueError("evaluate: provide --synthetic or --dataset");
    }
    const auto info = training::read_checkpoint_info(checkpoint);
    std::vector<training::EvalRow> rows;
    if (info.width == 4) {
        auto params = training::load_checkpoint<float>(checkpoint);
        rows = training::evaluate(params, dataset, crs, info.config.scheme, seed, workers);
    } else {
        auto params = training::load_checkpoint<double>(checkpoint);
        rows = training::evaluate(params, dataset, crs, info.config.scheme, seed, workers);
    }
    if (!out_csv.empty()) training::write_eval_csv(out_csv, rows);
    if (!out_json.empty()) training::write_eval_json(out_json, rows);
    for (const auto& r : rows)
        std::printf("evaluate: cr=%.4g psnr=%.4f ssim=%.5f (baseline %.4f/%.5f)\n", r.cr,
                    r.psnr_mean, r.ssim_mean, r.psnr_baseline, r.ssim_baseline);
    return 0;
}

// ---- trajectory ----

int cmd_trajectory(const std::string& meas_path, const std::string& gt_path,
                   const std::string& mode, const std::string& checkpoint,
                   const std::string& restorer_name, double strength, int inner_iters, int k_steps,
                   double mu, double mu_bar, double lambda_bar, const std::string& out_dir,
                   const std::string& csv_path, const std::string& image_format) {
    const MeasurementFile mf = load_measurement(meas_path);
    const Image gt = read_image(gt_path);
    proximal::Trajectory traj;
    if (mode == "teacher") {
        const Image x0 = sensing::adjoint(mf.op, mf.meas);
        std::vector<proximal::StepParams> teacher(k_steps - 1, {mu_bar, lambda_bar});
        traj = proximal::ideal_trajectory(x0, gt, mf.meas, mf.op, proximal::Scheme::HQS, teacher,
                                          k_steps);
    } else if (!checkpoint.empty()) {
        const auto info = training::read_checkpoint_info(checkpoint);
        if (info.width == 4) {
            auto params = training::load_checkpoint<float>(checkpoint);
            traj = training::reconstruct(params, mf.meas, mf.op, info.config.scheme);
        } else {
            auto params = training::load_checkpoint<double>(checkpoint);
            traj = training::reconstruct(params, mf.meas, mf.op, info.config.scheme);
        }
    } else {
        restorers::RestorerSpec spec;
        spec.kind = restorers::kind_from_name(restorer_name);
        spec.strength = strength;
        spec.inner_iters = inner_iters;
        auto restorer = restorers::make_restorer(spec);
        traj = proximal::run(proximal::Scheme::HQS, mf.meas, mf.op, restorers::as_fn(*restorer),
                             k_steps, std::vector<double>(k_steps, mu));
    }
    std::filesystem::create_directories(out_dir);
    auto dump = [&](int k, const Image& img) {
        char name[64];
        std::snprintf(name, sizeof(name), "iter_%03d.%s", k, image_format.c_str());
        write_image(out_dir + "/" + name, img);
    };
    dump(0, traj.start);
    for (std::size_t i = 0; i < traj.iterates.size(); ++i) dump(static_cast<int>(i) + 1, traj.iterates[i]);
    const auto rows = proximal::convergence_report(traj, gt);
    proximal::write_convergence_csv(csv_path, rows);
    std::printf("trajectory: %zu iterates written to %s (final psnr %.4f dB)\n",
                traj.iterates.size() + 1, out_dir.c_str(), rows.back().psnr);
    return 0;
}

// ---- bench ----

int cmd_bench(const std::string& sizes_text, double cr, const std::string& out_path,
              std::uint64_t seed) {
    const auto sizes = parse_int_list(sizes_text);
    const auto reports = sensing::complexity_probe(sizes, cr, seed);
    json j = json::array();
    for (const auto& r : reports) {
        json e;
        e["extent"] = r.extent;
        e["cr"] = r.cr;
        e["storage"] = {{"matrix_bytes", r.matrix_bytes},
                        {"explicit_bytes", r.explicit_bytes},
                        {"ratio", r.storage_ratio}};
        e["agreement_max_abs"] = r.max_disagreement;
        e["timing"] = {{"matrix_seconds", r.matrix_seconds},
                       {"explicit_seconds", r.explicit_seconds},
                       {"speedup", r.speedup}};
        j.push_back(e);
        std::printf("bench: n=%d storage ratio %.1fx, speedup %.1fx, agreement %.2e\n", r.extent,
                    r.storage_ratio, r.speedup, r.max_disagreement);
    }
    if (!out_path.empty()) {
        std::ofstream f(out_path);
        if (!f) throw IoError("bench: cannot open '" + out_path + "'");
        f << j.dump(2) << "\n";
    }
    return 0;
}

// ---- grad-check ----

int cmd_grad_check(const std::string& out_path, std::uint64_t seed) {
    using namespace tg;
    Rng rng(seed);
    auto rand_t = [&](std::vector<int> shape, bool rg) {
        std::vector<double> v(Tensor<double>::count(shape));
        for (auto& x : v) x = rng.uniform(-1.0, 1.0);
        return Tensor<double>::from(shape, std::move(v), rg);
    };
    std::vector<std::pair<std::string, GradCheckReport>> results;
    {
        auto a = rand_t({4, 5}, true);
        auto b = rand_t({5, 3}, true);
        results.emplace_back("matmul", grad_check<double>([&] { return sum(matmul(a, b)); },
                                                          {{"a", a}, {"b", b}}, 1e-5));
    }
    {
        auto x = rand_t({2, 8, 8}, true);
        auto w = rand_t({3, 2, 3, 3}, true);
        results.emplace_back("conv2d", grad_check<double>([&] { return sum(conv2d(x, w, 1, 1)); },
                                                          {{"x", x}, {"w", w}}, 1e-5));
    }
    {
        auto x = rand_t({3, 6, 6}, true);
        auto w = rand_t({3, 3, 3}, true);
        results.emplace_back("dwconv2d", grad_check<double>([&] { return sum(dwconv2d(x, w)); },
                                                            {{"x", x}, {"w", w}}, 1e-5));
    }
    {
        auto x = rand_t({2, 4, 4}, true);
        auto w = rand_t({2, 3, 2, 2}, true);
        results.emplace_back("transposed_conv2d",
                             grad_check<double>([&] { return sum(transposed_conv2d(x, w, 2)); },
                                                {{"x", x}, {"w", w}}, 1e-5));
    }
    {
        auto x = rand_t({4, 6}, true);
        auto probe = rand_t({4, 6}, false);
        results.emplace_back("softmax",
                             grad_check<double>([&] { return sum(mul(softmax(x, 1), probe)); },
                                                {{"x", x}}, 1e-5));
    }
    {
        auto x = rand_t({5, 7}, true);
        auto g = rand_t({5}, true);
        auto b = rand_t({5}, true);
        auto probe = rand_t({5, 7}, false);
        results.emplace_back(
            "layernorm", grad_check<double>([&] { return sum(mul(layernorm(x, g, b, 0), probe)); },
                                            {{"x", x}, {"g", g}, {"b", b}}, 1e-5));
    }
    {
        dir::DirConfig cfg;
        cfg.base_channels = 4;
        cfg.window = 2;
        cfg.heads = 2;
        cfg.adaconv_kernels = 2;
        Rng mrng(seed + 1);
        dir::DirModel<double> model(cfg, mrng);
        model.visit_params([&](const std::string&, Tensor<double>& t) {
            for (auto& v : t.data()) v += mrng.uniform(-0.05, 0.05);  // off the ReLU kinks
        });
        auto x = rand_t({1, 16, 16}, true);
        auto probes = model.params();
        std::vector<std::pair<std::string, Tensor<double>>> sel{{"x", x}};
        for (auto& [name, t] : probes) sel.emplace_back(name, t);
        Rng pick(seed + 2);
        results.emplace_back("dir_forward",
                             grad_check<double>(
                                 [&] {
                                     auto [out, bank] = model.forward(x, dir::MemoryBank<double>{});
                                     return sum(square(out));
                                 },
                                 sel, 1e-6, 6, &pick));
    }
    std::string text;
    bool all_pass = true;
    for (const auto& [name, rep] : results) {
        const bool ok = rep.pass(1e-4);
        all_pass = all_pass && ok;
        char line[160];
        std::snprintf(line, sizeof(line), "%-18s max_rel_err=%.3e checked=%zu %s\n", name.c_str(),
                      rep.max_rel_err, rep.checked, ok ? "PASS" : "FAIL");
        text += line;
    }
    std::fputs(text.c_str(), stdout);
    if (!out_path.empty()) {
        std::ofstream f(out_path);
        if (!f) throw IoError("grad-check: cannot open '" + out_path + "'");
        f << text;
    }
    return all_pass ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Kronecker single-pixel imaging: sensing, proximal solvers and unrolled training"};
    app.require_subcommand(1);

    std::uint64_t seed = 0;
    std::string precision = "f32";
    int workers = 1;
    app.add_option("--seed", seed, "global random seed");
    app.add_option("--precision", precision, "f32 or f64")->check(CLI::IsMember({"f32", "f64"}));
    app.add_option("--workers", workers, "worker thread bound")->check(CLI::PositiveNumber);

    // sense
    auto* sense = app.add_subcommand("sense", "sample an image into a measurement file");
    std::string s_image, s_kind = "gaussian", s_out = "measurement.pxun";
    double s_cr = 0.25, s_sigma = 0.0;
    sense->add_option("--image", s_image)->required();
    sense->add_option("--cr", s_cr)->required();
    sense->add_option("--kind", s_kind)->check(CLI::IsMember({"gaussian", "hadamard"}));
    sense->add_option("--sigma", s_sigma);
    sense->add_option("--out", s_out);

    // reconstruct
    auto* rec = app.add_subcommand("reconstruct", "solve a measurement file back into an image");
    std::string r_meas, r_scheme, r_restorer = "identity", r_ck, r_out = "reconstruction.pgm";
    std::string r_gt, r_metrics;
    double r_strength = 0.05, r_mu = 1.0;
    int r_inner = 30, r_k = 30;
    rec->add_option("--measurement", r_meas)->required();
    rec->add_option("--scheme", r_scheme)->check(CLI::IsMember({"hqs", "admm"}));
    rec->add_option("--restorer", r_restorer)
        ->check(CLI::IsMember({"identity", "tv", "dct", "dir"}));
    rec->add_option("--strength", r_strength);
    rec->add_option("--inner-iters", r_inner);
    rec->add_option("--checkpoint", r_ck);
    rec->add_option("--k", r_k);
    rec->add_option("--mu", r_mu);
    rec->add_option("--out", r_out);
    rec->add_option("--ground-truth", r_gt);
    rec->add_option("--metrics", r_metrics);

    // train
    auto* tr = app.add_subcommand("train", "optimize the restorer with the trajectory loss");
    std::string t_config;
    tr->add_option("--config", t_config)->required();

    // evaluate
    auto* ev = app.add_subcommand("evaluate", "score a checkpoint across compression ratios");
    std::string e_ck, e_crs = "0.05,0.10,0.25", e_synth, e_dir, e_csv, e_json;
    ev->add_option("--checkpoint", e_ck)->required();
    ev->add_option("--crs", e_crs);
    ev->add_option("--synthetic", e_synth, "count,extent,seed");
    ev->add_option("--dataset", e_dir, "path,extent");
    ev->add_option("--out", e_csv);
    ev->add_option("--json", e_json);

    // trajectory
    auto* tj = app.add_subcommand("trajectory", "dump per-iteration images and metrics");
    std::string j_meas, j_gt, j_mode = "student", j_ck, j_restorer = "tv", j_dir = "trajectory";
    std::string j_csv = "trajectory.csv", j_fmt = "pgm";
    double j_strength = 0.05, j_mu = 1.0, j_mu_bar = 1.0, j_lambda_bar = 1.0;
    int j_inner = 30, j_k = 6;
    tj->add_option("--measurement", j_meas)->required();
    tj->add_option("--ground-truth", j_gt)->required();
    tj->add_option("--mode", j_mode)->check(CLI::IsMember({"student", "teacher"}));
    tj->add_option("--checkpoint", j_ck);
    tj->add_option("--restorer", j_restorer)->check(CLI::IsMember({"identity", "tv", "dct"}));
    tj->add_option("--strength", j_strength);
    tj->add_option("--inner-iters", j_inner);
    tj->add_option("--k", j_k);
    tj->add_option("--mu", j_mu);
    tj->add_option("--mu-bar", j_mu_bar);
    tj->add_option("--lambda-bar", j_lambda_bar);
    tj->add_option("--out-dir", j_dir);
    tj->add_option("--csv", j_csv);
    tj->add_option("--format", j_fmt)->check(CLI::IsMember({"pgm", "png"}));

    // bench
    auto* be = app.add_subcommand("bench", "matrix-form vs explicit-matrix sampling cost");
    std::string b_sizes = "64", b_out;
    double b_cr = 0.25;
    be->add_option("--sizes", b_sizes);
    be->add_option("--cr", b_cr);
    be->add_option("--out", b_out);

    // grad-check
    auto* gc = app.add_subcommand("grad-check", "finite-difference audit of the gradient engine");
    std::string g_out;
    gc->add_option("--out", g_out);

    CLI11_PARSE(app, argc, argv);

    try {
        if (sense->parsed()) return cmd_sense(s_image, s_cr, s_kind, s_sigma, seed, s_out);
        if (rec->parsed())
            return cmd_reconstruct(r_meas, r_scheme, r_restorer, r_strength, r_inner, r_ck, r_k,
                                   r_mu, r_out, r_gt, r_metrics);
        if (tr->parsed()) return cmd_train(t_config);
        if (ev->parsed())
            return cmd_evaluate(e_ck, e_crs, e_synth, e_dir, e_csv, e_json, seed, workers);
        if (tj->parsed())
            return cmd_trajectory(j_meas, j_gt, j_mode, j_ck, j_restorer, j_strength, j_inner, j_k,
                                  j_mu, j_mu_bar, j_lambda_bar, j_dir, j_csv, j_fmt);
        if (be->parsed()) return cmd_bench(b_sizes, b_cr, b_out, seed);
        if (gc->parsed()) return cmd_grad_check(g_out, seed);
    } catch (const ShapeError& e) {
        std::fprintf(stderr, "error[E_SHAPE]: %s\n", e.what());
        return 1;
    } catch (const ValueError& e) {
        std::fprintf(stderr, "error[E_VALUE]: %s\n", e.what());
        return 1;
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "error[E_CONFIG]: %s\n", e.what());
        return 1;
    } catch (const IoError& e) {
        std::fprintf(stderr, "error[E_IO]: %s\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error[E_INTERNAL]: %s\n", e.what());
        return 1;
    }
    return 0;
}

#include <doctest.h>

#include <png.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "pxun/gradcheck.hpp"
#include "pxun/imageio.hpp"
#include "pxun/metrics.hpp"
#include "pxun/training.hpp"
#include "test_util.hpp"

using namespace pxun;
using namespace pxun::tg;
using namespace pxun::training;
using proximal::Scheme;

namespace {

dir::DirConfig micro_config() {
    dir::DirConfig cfg;
    cfg.base_channels = 2;
    cfg.ctb_per_stage = 1;
    cfg.window = 2;
    cfg.heads = 1;
    cfg.adaconv_kernels = 2;
    cfg.in_channels = 1;
    return cfg;
}

struct Instance {
    sensing::MeasurementOperator op;
    Image gt;
    Mat y;
};

Instance make_instance(int extent, double cr, std::uint64_t seed) {
    Instance inst;
    inst.op = sensing::make_operator(extent, extent, cr, sensing::OperatorKind::GaussianOrthonormal,
                                     seed);
    Rng rng(seed + 1);
    inst.gt = testutil::phantom(extent, extent, rng);
    inst.y = sensing::forward(inst.op, inst.gt).values;
    return inst;
}

}  // namespace

TEST_CASE("pt_loss vanishes when the student is the teacher's own prox") {
    for (Scheme scheme : {Scheme::HQS, Scheme::ADMM}) {
        Rng rng(301);
        const auto inst = make_instance(8, 0.4, 17);
        ParameterSet<double> params(micro_config(), 3, rng);
        const auto x_gt = from_image<double>(inst.gt);
        const auto y = from_image<double>(inst.y);
        const auto h = from_image<double>(inst.op.h_mat);
        const auto w = from_image<double>(inst.op.w_mat);

        // student restorer := teacher's prox_g_bar with the same parameters
        std::function<Tensor<double>(const Tensor<double>&, int)> override_fn =
            [&](const Tensor<double>& rin, int k) {
                if (k == params.unroll() - 1) return x_gt;
                auto mub = softplus(slice0(params.mu_bar_raw, k, k + 1));
                auto lb = softplus(slice0(params.lambda_bar_raw, k, k + 1));
                return proximal::prox_g_bar_t(rin, x_gt, mub, lb);
            };
        // identical parameters: tie student mu to teacher mu
        for (int k = 0; k < params.unroll() - 1; ++k)
            params.mu_raw.data()[k] = params.mu_bar_raw.data()[k];
        // the final student step must also mirror the pinned teacher step
        const auto loss = pt_loss<double>(x_gt, y, h, w, params, scheme,
                                          std::vector<double>(3, 1.0), nullptr, &override_fn);
        CHECK(loss.item() < 1e-20);
    }
}

TEST_CASE("pt_loss at K=1 is the final-reconstruction error") {
    Rng rng(307);
    const auto inst = make_instance(8, 0.5, 23);
    ParameterSet<double> params(micro_config(), 1, rng);
    const auto x_gt = from_image<double>(inst.gt);
    const auto y = from_image<double>(inst.y);
    const auto h = from_image<double>(inst.op.h_mat);
    const auto w = from_image<double>(inst.op.w_mat);
    const double alpha0 = 0.7;
    const auto loss = pt_loss<double>(x_gt, y, h, w, params, Scheme::HQS, {alpha0});

    // independent recomputation: X1 = R(prox_f(X0)), loss = alpha0 ||X1 - gt||^2
    const Image x0 = sensing::adjoint(inst.op, inst.y);
    const double mu0 = params.student_mus()[0];
    const Image z = proximal::prox_f(x0, inst.y, inst.op, mu0);
    auto [restored, bank] =
        params.model.forward(reshape(from_image<double>(z), {1, 8, 8}), dir::MemoryBank<double>{});
    const Image x1 = to_image(restored);
    const double expect = alpha0 * std::pow(frob_norm(x1 - inst.gt), 2);
    CHECK(std::fabs(loss.item() - expect) / std::max(1e-12, expect) < 1e-10);
}

TEST_CASE("pt_loss matches a step-by-step recomputation outside the graph (K=2)") {
    for (Scheme scheme : {Scheme::HQS, Scheme::ADMM}) {
        Rng rng(311);
        const auto inst = make_instance(8, 0.4, 29);
        ParameterSet<double> params(micro_config(), 2, rng);
        const std::vector<double> alpha{0.9, 1.3};
        const auto loss =
            pt_loss<double>(from_image<double>(inst.gt), from_image<double>(inst.y),
                            from_image<double>(inst.op.h_mat), from_image<double>(inst.op.w_mat),
                            params, scheme, alpha);

        // manual recomputation on plain matrices; the DIR runs tape-free
        const bool admm = scheme == Scheme::ADMM;
        const Image x0 = sensing::adjoint(inst.op, inst.y);
        const auto mus = params.student_mus();
        const double mub0 = std::log1p(std::exp(params.mu_bar_raw.data()[0]));
        const double lb0 = std::log1p(std::exp(params.lambda_bar_raw.data()[0]));

        Image x = x0, xb = x0;
        Image u(8, 8, 0.0), ub(8, 8, 0.0);
        dir::MemoryBank<double> bank;
        double expect = 0.0;
        for (int k = 0; k < 2; ++k) {
            Image z = admm ? proximal::prox_f(x - (1.0 / mus[k]) * u, inst.y, inst.op, mus[k])
                           : proximal::prox_f(x, inst.y, inst.op, mus[k]);
            Image rin = admm ? z + (1.0 / mus[k]) * u : z;
            auto [restored, next] =
                params.model.forward(reshape(from_image<double>(rin), {1, 8, 8}), bank);
            bank = std::move(next);
            x = to_image(restored);
            if (admm) u = u + mus[k] * (z - x);
            if (k == 1) {
                xb = inst.gt;
            } else {
                Image zb = admm ? proximal::prox_f(xb - (1.0 / mub0) * ub, inst.y, inst.op, mub0)
                                : proximal::prox_f(xb, inst.y, inst.op, mub0);
                Image q = admm ? zb + (1.0 / mub0) * ub : zb;
                xb = proximal::prox_g_bar(q, inst.gt, {mub0, lb0});
                if (admm) ub = ub + mub0 * (zb - xb);
            }
            expect += alpha[k] * std::pow(frob_norm(x - xb), 2);
        }
        CHECK(std::fabs(loss.item() - expect) / std::max(1e-12, expect) < 1e-10);
    }
}

TEST_CASE("pt_loss rejects degenerate weights") {
    Rng rng(313);
    const auto inst = make_instance(8, 0.4, 31);
    ParameterSet<double> params(micro_config(), 2, rng);
    CHECK_THROWS_AS((void)pt_loss<double>(from_image<double>(inst.gt), from_image<double>(inst.y),
                                          from_image<double>(inst.op.h_mat),
                                          from_image<double>(inst.op.w_mat), params, Scheme::HQS,
                                          {0.0, 0.0}),
                    ValueError);
}

TEST_CASE("pt_loss gradients match finite differences (subsampled)") {
    Rng rng(317);
    const auto inst = make_instance(8, 0.4, 37);
    ParameterSet<double> params(micro_config(), 2, rng);
    // move every parameter to a generic point: zero-initialized biases sit
    // exactly on ReLU kinks, where central differences are one-sided
    for (auto& [name, t] : params.named_params())
        for (auto& v : t.data()) v += rng.uniform(-0.05, 0.05);
    const auto x_gt = from_image<double>(inst.gt);
    const auto y = from_image<double>(inst.y);
    const auto h = from_image<double>(inst.op.h_mat);
    const auto w = from_image<double>(inst.op.w_mat);
    const std::vector<double> alpha{1.0, 1.0};
    for (Scheme scheme : {Scheme::HQS, Scheme::ADMM}) {
        auto probes = params.named_params();
        Rng pick(41);
        // eps 1e-6: the composite loss carries enough curvature that 1e-5
        // leaves visible eps^2 truncation in the differences
        auto rep = tg::grad_check<double>(
            [&] { return pt_loss<double>(x_gt, y, h, w, params, scheme, alpha); }, probes, 1e-6, 2,
            &pick);
        CHECK_MESSAGE(rep.pass(1e-4), rep.worst, " rel=", rep.max_rel_err);
    }
}

TEST_CASE("synthetic dataset determinism, range and TV ordering") {
    const auto a = synth_dataset(12, 32, 99);
    const auto b = synth_dataset(12, 32, 99);
    REQUIRE(a.size() == 12);
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(max_abs_diff(a[i], b[i]) == 0.0);

    double tv_pc = 0.0, tv_tex = 0.0;
    int n_pc = 0, n_tex = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        for (double v : a[i].values()) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
        }
        if (i % 3 == 0) {
            tv_pc += total_variation(a[i]);
            ++n_pc;
        } else if (i % 3 == 2) {
            tv_tex += total_variation(a[i]);
            ++n_tex;
        }
    }
    CHECK(tv_pc / n_pc < tv_tex / n_tex);

    const auto c = synth_dataset(4, 32, 100);
    CHECK(max_abs_diff(a[0], c[0]) > 0.0);  // different seed, different corpus
}

TEST_CASE("ingest corpus round trips, rejects small files, converts luminance") {
    namespace fs = std::filesystem;
    const std::string dir_path = "/tmp/pxun_ingest_test";
    fs::remove_all(dir_path);
    fs::create_directories(dir_path);

    Rng rng(401);
    const Image img = testutil::random_image(16, 16, rng);
    write_pgm(dir_path + "/a.pgm", img, 65535);

    // hand-written RGB png to exercise the BT.601 path
    const int n = 16;
    {
        std::FILE* fp = std::fopen((dir_path + "/b.png").c_str(), "wb");
        REQUIRE(fp);
        png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
        png_infop info = png_create_info_struct(png);
        REQUIRE(setjmp(png_jmpbuf(png)) == 0);
        png_init_io(png, fp);
        png_set_IHDR(png, info, n, n, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
                     PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
        png_write_info(png, info);
        std::vector<png_byte> row(3 * n);
        for (int i = 0; i < n; ++i) {
            for (int j = 0; j < n; ++j) {
                row[3 * j] = static_cast<png_byte>((i * 16 + j * 3) % 256);
                row[3 * j + 1] = static_cast<png_byte>((i * 5 + j * 11) % 256);
                row[3 * j + 2] = static_cast<png_byte>((i * 7 + j * 13) % 256);
            }
            png_write_row(png, row.data());
        }
        png_write_end(png, nullptr);
        png_destroy_write_struct(&png, &info);
        std::fclose(fp);
    }

    const auto corpus = ingest_corpus(dir_path, 16);
    REQUIRE(corpus.size() == 2);
    // 16-bit pgm round trip at 16x16: quantization below 1e-4
    CHECK(max_abs_diff(corpus[0], img) < 1e-4);
    // BT.601 luminance per pixel
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            const double r = ((i * 16 + j * 3) % 256) / 255.0;
            const double g = ((i * 5 + j * 11) % 256) / 255.0;
            const double b = ((i * 7 + j * 13) % 256) / 255.0;
            const double lum = 0.299 * r + 0.587 * g + 0.114 * b;
            CHECK(std::fabs(corpus[1](i, j) - lum) < 1e-6);
        }

    CHECK_THROWS_AS((void)ingest_corpus(dir_path, 32), ValueError);
    fs::remove_all(dir_path);
}

TEST_CASE("ssim properties") {
    Rng rng(409);
    const Image a = testutil::random_image(32, 32, rng);
    const Image b = testutil::random_image(32, 32, rng);
    CHECK(std::fabs(ssim(a, a) - 1.0) < 1e-12);
    CHECK(std::fabs(ssim(a, b) - ssim(b, a)) < 1e-12);

    Image bin(32, 32, 0.0);
    for (int i = 0; i < 32; ++i)
        for (int j = 0; j < 32; ++j) bin(i, j) = ((i / 4 + j / 4) % 2 == 0) ? 1.0 : 0.0;
    Image inv(32, 32, 0.0);
    for (std::size_t i = 0; i < bin.size(); ++i) inv.values()[i] = 1.0 - bin.values()[i];
    CHECK(ssim(bin, inv) <= 0.0);
}

TEST_CASE("zero-step training returns the initialization unchanged") {
    TrainConfig cfg;
    cfg.unroll = 2;
    cfg.steps = 0;
    cfg.batch = 1;
    cfg.dir = micro_config();
    cfg.seed = 5;
    cfg.extents = {8};
    cfg.cr_lo = cfg.cr_hi = 0.5;
    const auto dataset = synth_dataset(2, 8, 1);
    TrainResult result;
    auto trained = train<double>(cfg, dataset, result);

    Rng rng(cfg.seed);
    ParameterSet<double> fresh(cfg.dir, cfg.unroll, rng);
    auto a = trained.named_params();
    auto b = fresh.named_params();
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t j = 0; j < a[i].second.numel(); ++j)
            CHECK(a[i].second.data()[j] == b[i].second.data()[j]);
    CHECK(result.total_steps == 0);
}

TEST_CASE("training is deterministic for a fixed seed") {
    TrainConfig cfg;
    cfg.unroll = 2;
    cfg.steps = 4;
    cfg.batch = 2;
    cfg.workers = 2;
    cfg.dir = micro_config();
    cfg.seed = 11;
    cfg.extents = {8};
    cfg.cr_lo = 0.2;
    cfg.cr_hi = 0.6;
    const auto dataset = synth_dataset(4, 8, 2);
    TrainResult r1, r2;
    auto p1 = train<float>(cfg, dataset, r1);
    auto p2 = train<float>(cfg, dataset, r2);
    REQUIRE(r1.log.size() == r2.log.size());
    for (std::size_t i = 0; i < r1.log.size(); ++i) CHECK(r1.log[i].loss == r2.log[i].loss);
    auto a = p1.named_params();
    auto b = p2.named_params();
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t j = 0; j < a[i].second.numel(); ++j)
            CHECK(a[i].second.data()[j] == b[i].second.data()[j]);
}

TEST_CASE("single-image overfit drives the PT loss down") {
    TrainConfig cfg;
    cfg.unroll = 2;
    cfg.steps = 500;
    cfg.batch = 1;
    cfg.dir = micro_config();
    cfg.dir.base_channels = 4;
    cfg.seed = 21;
    cfg.extents = {16};
    cfg.cr_lo = cfg.cr_hi = 0.25;
    cfg.scheme = Scheme::ADMM;
    const auto dataset = synth_dataset(1, 16, 3);

    // the model's loss on a fixed instance, before and after training
    const auto op = sensing::make_operator(16, 16, 0.25,
                                           sensing::OperatorKind::GaussianOrthonormal, 999);
    const Mat y = sensing::forward(op, dataset[0]).values;
    auto eval_loss = [&](ParameterSet<float>& p) {
        return static_cast<double>(pt_loss<float>(from_image<float>(dataset[0]),
                                                  from_image<float>(y), from_image<float>(op.h_mat),
                                                  from_image<float>(op.w_mat), p, cfg.scheme,
                                                  cfg.loss_weights())
                                       .item());
    };
    Rng init_rng(cfg.seed);
    ParameterSet<float> init(cfg.dir, cfg.unroll, init_rng);
    const double loss_before = eval_loss(init);

    TrainResult result;
    auto trained = train<float>(cfg, dataset, result);
    REQUIRE(result.log.size() == 500);
    const double loss_after = eval_loss(trained);
    CHECK(loss_after < 0.1 * loss_before);

    // smoothed (50-step windows) loss is non-increasing
    std::vector<double> windows;
    for (std::size_t w = 0; w + 50 <= result.log.size(); w += 50) {
        double s = 0.0;
        for (std::size_t i = w; i < w + 50; ++i) s += result.log[i].loss;
        windows.push_back(s / 50.0);
    }
    for (std::size_t i = 1; i < windows.size(); ++i) CHECK(windows[i] <= windows[i - 1] + 1e-12);
}

TEST_CASE("non-finite loss aborts with a diagnostic") {
    TrainConfig cfg;
    cfg.unroll = 2;
    cfg.steps = 10;
    cfg.batch = 1;
    cfg.dir = micro_config();
    cfg.seed = 13;
    cfg.extents = {8};
    cfg.cr_lo = cfg.cr_hi = 0.5;
    cfg.lr_init = cfg.lr_final = 1e14;  // guaranteed to blow past float range
    cfg.clip_norm = 0.0;
    const auto dataset = synth_dataset(1, 8, 9);
    TrainResult result;
    CHECK_THROWS_WITH_AS(train<float>(cfg, dataset, result), doctest::Contains("non-finite loss"),
                         IoError);
}

TEST_CASE("checkpoint round trip and resumed step counting") {
    namespace fs = std::filesystem;
    const std::string ck = "/tmp/pxun_ck_test.pxun";
    const std::string log = "/tmp/pxun_log_test.csv";
    fs::remove(ck);
    fs::remove(log);

    TrainConfig cfg;
    cfg.unroll = 2;
    cfg.steps = 3;
    cfg.batch = 1;
    cfg.dir = micro_config();
    cfg.seed = 31;
    cfg.extents = {8};
    cfg.cr_lo = cfg.cr_hi = 0.5;
    const auto dataset = synth_dataset(2, 8, 4);
    TrainResult r1;
    auto p1 = train<float>(cfg, dataset, r1, "", log, ck);
    CHECK(r1.total_steps == 3);

    const auto info = read_checkpoint_info(ck);
    CHECK(info.step == 3);
    CHECK(info.width == 4);
    CHECK(info.config.unroll == 2);

    auto loaded = load_checkpoint<float>(ck);
    auto a = p1.named_params();
    auto b = loaded.named_params();
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t j = 0; j < a[i].second.numel(); ++j)
            CHECK(a[i].second.data()[j] == b[i].second.data()[j]);

    // resume for 2 more steps: the log continues at step 4
    TrainResult r2;
    cfg.steps = 2;
    auto p2 = train<float>(cfg, dataset, r2, ck, log, ck);
    CHECK(r2.total_steps == 5);
    CHECK(r2.log.front().step == 4);
    CHECK(r2.log.back().step == 5);

    std::ifstream lf(log);
    std::string line;
    int lines = 0;
    while (std::getline(lf, line)) ++lines;
    CHECK(lines == 6);  // header + 5 rows
    fs::remove(ck);
    fs::remove(log);
}

TEST_CASE("evaluate: full sampling means the baseline is already exact") {
    Rng rng(419);
    ParameterSet<float> params(micro_config(), 2, rng);
    const auto dataset = synth_dataset(2, 8, 6);
    const auto rows = evaluate<float>(params, dataset, {1.0}, Scheme::HQS, 7, 2);
    REQUIRE(rows.size() == 1);
    CHECK(rows[0].psnr_baseline == kPsnrCap);
    CHECK(rows[0].ssim_baseline > 0.999);
}

TEST_CASE("evaluate uses one identical parameter set across compression ratios") {
    Rng rng(421);
    ParameterSet<float> params(micro_config(), 2, rng);
    TrainConfig cfg;
    cfg.unroll = 2;
    cfg.dir = micro_config();
    const std::string before = "/tmp/pxun_hash_before.pxun";
    const std::string after = "/tmp/pxun_hash_after.pxun";
    save_checkpoint(before, params, cfg, 0);
    const auto dataset = synth_dataset(2, 8, 8);
    (void)evaluate<float>(params, dataset, {0.25, 0.5, 1.0}, Scheme::ADMM, 9, 1);
    save_checkpoint(after, params, cfg, 0);
    CHECK(Container::load(before).hash() == Container::load(after).hash());
    std::remove(before.c_str());
    std::remove(after.c_str());
}

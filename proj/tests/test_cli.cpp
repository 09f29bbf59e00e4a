#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "pxun/imageio.hpp"
#include "pxun/mat.hpp"
#include "pxun/metrics.hpp"
#include "pxun/sensing.hpp"
#include "test_util.hpp"

using namespace pxun;
namespace fs = std::filesystem;

namespace {

const std::string kCli = PXUN_CLI_PATH;
const std::string kDir = "/tmp/pxun_cli_test";

int run_cli(const std::string& args, const std::string& stderr_file = "") {
    std::string cmd = kCli + " " + args;
    if (!stderr_file.empty()) cmd += " 2>" + stderr_file;
    else cmd += " 2>/dev/null";
    cmd += " >/dev/null";
    const int rc = std::system(cmd.c_str());
    return WEXITSTATUS(rc);
}

std::vector<char> slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    REQUIRE(f);
    return std::vector<char>((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

struct Fixture {
    Fixture() {
        fs::remove_all(kDir);
        fs::create_directories(kDir);
        Rng rng(77);
        gt = testutil::phantom(16, 16, rng);
        write_pgm(kDir + "/gt.pgm", gt, 65535);
    }
    Image gt;
};

}  // namespace

TEST_CASE("cli sense is bit-deterministic and matches the library path") {
    Fixture fx;
    const std::string m1 = kDir + "/m1.pxun", m2 = kDir + "/m2.pxun";
    REQUIRE(run_cli("--seed 9 sense --image " + kDir + "/gt.pgm --cr 0.5 --out " + m1) == 0);
    REQUIRE(run_cli("--seed 9 sense --image " + kDir + "/gt.pgm --cr 0.5 --out " + m2) == 0);
    CHECK(slurp(m1) == slurp(m2));

    // library-level oracle: the stored Y equals an in-process forward of the
    // quantized image with the same operator
    const Container c = Container::load(m1);
    const auto op = sensing::load_operator(c);
    const Image quantized = read_pgm(kDir + "/gt.pgm");
    const auto y = sensing::forward(op, quantized);
    const auto& stored = c.at("Y");
    REQUIRE(stored.numel() == y.values.size());
    for (std::size_t i = 0; i < y.values.size(); ++i)
        CHECK(stored.values[i] == y.values.values()[i]);
}

TEST_CASE("cli sense with noise is seed-reproducible") {
    Fixture fx;
    const std::string m1 = kDir + "/n1.pxun", m2 = kDir + "/n2.pxun";
    REQUIRE(run_cli("--seed 3 sense --image " + kDir + "/gt.pgm --cr 0.25 --sigma 0.05 --out " + m1) == 0);
    REQUIRE(run_cli("--seed 3 sense --image " + kDir + "/gt.pgm --cr 0.25 --sigma 0.05 --out " + m2) == 0);
    CHECK(slurp(m1) == slurp(m2));
}

TEST_CASE("cli full-sampling round trip recovers the input within quantization") {
    Fixture fx;
    const std::string m = kDir + "/full.pxun", out = kDir + "/rec.pgm";
    REQUIRE(run_cli("--seed 5 sense --image " + kDir + "/gt.pgm --cr 1.0 --out " + m) == 0);
    REQUIRE(run_cli("reconstruct --measurement " + m + " --restorer identity --k 1 --mu 1 --out " +
                    out) == 0);
    const Image rec = read_pgm(out);
    const Image orig = read_pgm(kDir + "/gt.pgm");
    CHECK(max_abs_diff(rec, orig) < 1.5 / 255.0);
}

TEST_CASE("cli reconstruct with dir restorer demands a checkpoint") {
    Fixture fx;
    const std::string m = kDir + "/m.pxun", err = kDir + "/err.txt";
    REQUIRE(run_cli("--seed 5 sense --image " + kDir + "/gt.pgm --cr 0.5 --out " + m) == 0);
    CHECK(run_cli("reconstruct --measurement " + m + " --restorer dir --out " + kDir + "/x.pgm",
                  err) != 0);
    const auto text = slurp(err);
    const std::string s(text.begin(), text.end());
    CHECK(s.find("error[E_VALUE]") != std::string::npos);
    CHECK(s.find("checkpoint") != std::string::npos);
}

TEST_CASE("cli train smoke run, determinism and config validation") {
    Fixture fx;
    const std::string cfg_path = kDir + "/train.json";
    {
        std::ofstream f(cfg_path);
        f << R"({
  "train": {
    "unroll": 2, "cr_range": [0.3, 0.6], "batch": 1, "steps": 5,
    "lr_init": 1e-3, "lr_final": 1e-4, "seed": 7, "scheme": "admm",
    "dir": {"base_channels": 2, "levels": 4, "ctb_per_stage": 1, "window": 2,
             "heads": 1, "adaconv_kernels": 2, "in_channels": 1},
    "extents": [8], "alpha": [], "workers": 1
  },
  "precision": "f32",
  "dataset": {"kind": "synthetic", "count": 3, "extent": 8, "seed": 1},
  "out_checkpoint": ")" << kDir << R"(/ck.pxun",
  "out_log": ")" << kDir << R"(/log.csv"
})";
    }
    REQUIRE(run_cli("train --config " + cfg_path) == 0);
    CHECK(fs::exists(kDir + "/ck.pxun"));
    const auto ck1 = slurp(kDir + "/ck.pxun");
    REQUIRE(run_cli("train --config " + cfg_path) == 0);
    CHECK(slurp(kDir + "/ck.pxun") == ck1);

    // unknown key is rejected and named
    const std::string bad_path = kDir + "/bad.json";
    {
        std::ifstream in(cfg_path);
        std::stringstream ss;
        ss << in.rdbuf();
        std::string text = ss.str();
        text.insert(text.rfind('}'), R"(, "typo_key": 1)");
        std::ofstream f(bad_path);
        f << text;
    }
    const std::string err = kDir + "/cfg_err.txt";
    CHECK(run_cli("train --config " + bad_path, err) != 0);
    const auto text = slurp(err);
    const std::string s(text.begin(), text.end());
    CHECK(s.find("error[E_CONFIG]") != std::string::npos);
    CHECK(s.find("typo_key") != std::string::npos);
}

TEST_CASE("cli trajectory dumps iterates and a csv") {
    Fixture fx;
    const std::string m = kDir + "/mt.pxun";
    REQUIRE(run_cli("--seed 5 sense --image " + kDir + "/gt.pgm --cr 0.25 --out " + m) == 0);
    REQUIRE(run_cli("trajectory --measurement " + m + " --ground-truth " + kDir +
                    "/gt.pgm --mode teacher --k 4 --out-dir " + kDir + "/traj --csv " + kDir +
                    "/traj.csv") == 0);
    CHECK(fs::exists(kDir + "/traj/iter_000.pgm"));
    CHECK(fs::exists(kDir + "/traj/iter_004.pgm"));
    std::ifstream csv(kDir + "/traj.csv");
    std::string line;
    int rows = 0;
    while (std::getline(csv, line)) ++rows;
    CHECK(rows == 6);  // header + k=0..4

    // teacher path ends at the ground truth: the last frame equals gt up to
    // 8-bit quantization
    const Image last = read_pgm(kDir + "/traj/iter_004.pgm");
    const Image orig = read_pgm(kDir + "/gt.pgm");
    CHECK(max_abs_diff(last, orig) < 1.5 / 255.0);
}

TEST_CASE("cli bench and grad-check run clean") {
    Fixture fx;
    REQUIRE(run_cli("bench --sizes 8 --cr 0.25 --out " + kDir + "/bench.json") == 0);
    CHECK(fs::exists(kDir + "/bench.json"));
    REQUIRE(run_cli("--seed 2 grad-check --out " + kDir + "/gc.txt") == 0);
    const auto text = slurp(kDir + "/gc.txt");
    const std::string s(text.begin(), text.end());
    CHECK(s.find("FAIL") == std::string::npos);
    CHECK(s.find("PASS") != std::string::npos);
}

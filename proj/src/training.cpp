#include "pxun/training.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <filesystem>
#include <fstream>
#include <thread>

#include <json.hpp>

#include "pxun/imageio.hpp"
#include "pxun/metrics.hpp"

namespace pxun::training {

using nlohmann::json;
using namespace tg;
using proximal::Scheme;

void TrainConfig::validate() const {
    if (unroll < 1) throw ValueError("train: unroll depth must be >= 1");
    if (!(cr_lo > 0.0 && cr_lo <= cr_hi && cr_hi <= 1.0))
        throw ValueError("train: cr range must satisfy 0 < lo <= hi <= 1");
    if (batch < 1) throw ValueError("train: batch must be >= 1");
    if (steps < 0) throw ValueError("train: steps must be >= 0");
    if (lr_init <= 0.0 || lr_final <= 0.0) throw ValueError("train: learning rates must be positive");
    if (extents.empty()) throw ValueError("train: need at least one training extent");
    if (workers < 1) throw ValueError("train: workers must be >= 1");
    if (clip_norm < 0.0) throw ValueError("train: clip_norm must be >= 0");
    if (!alpha.empty()) {
        if (static_cast<int>(alpha.size()) != unroll)
            throw ValueError("train: alpha must have one weight per iteration");
        bool any = false;
        for (double a : alpha) {
            if (a < 0.0) throw ValueError("train: alpha weights must be non-negative");
            if (a > 0.0) any = true;
        }
        if (!any) throw ValueError("train: alpha must not be all zero");
    }
    dir.validate();
}

std::string scheme_name(Scheme s) { return s == Scheme::HQS ? "hqs" : "admm"; }

Scheme scheme_from_name(const std::string& name) {
    if (name == "hqs") return Scheme::HQS;
    if (name == "admm") return Scheme::ADMM;
    throw ValueError("scheme must be 'hqs' or 'admm'");
}

namespace {

// softplus^{-1}(1): raw value giving unit mu/lambda after reparameterization
const double kRawUnit = std::log(std::exp(1.0) - 1.0);

json train_config_to_json(const TrainConfig& cfg) {
    json j;
    j["unroll"] = cfg.unroll;
    j["cr_range"] = {cfg.cr_lo, cfg.cr_hi};
    j["batch"] = cfg.batch;
    j["steps"] = cfg.steps;
    j["lr_init"] = cfg.lr_init;
    j["lr_final"] = cfg.lr_final;
    j["seed"] = cfg.seed;
    j["scheme"] = scheme_name(cfg.scheme);
    j["dir"] = json::parse(dir::dir_config_to_json(cfg.dir));
    j["extents"] = cfg.extents;
    j["alpha"] = cfg.alpha;
    j["workers"] = cfg.workers;
    j["clip_norm"] = cfg.clip_norm;
    return j;
}

TrainConfig train_config_from_json(const json& j) {
    TrainConfig cfg;
    cfg.unroll = j.at("unroll").get<int>();
    cfg.cr_lo = j.at("cr_range").at(0).get<double>();
    cfg.cr_hi = j.at("cr_range").at(1).get<double>();
    cfg.batch = j.at("batch").get<int>();
    cfg.steps = j.at("steps").get<int>();
    cfg.lr_init = j.at("lr_init").get<double>();
    cfg.lr_final = j.at("lr_final").get<double>();
    cfg.seed = j.at("seed").get<std::uint64_t>();
    cfg.scheme = scheme_from_name(j.at("scheme").get<std::string>());
    cfg.dir = dir::dir_config_from_json(j.at("dir").dump());
    cfg.extents = j.at("extents").get<std::vector<int>>();
    cfg.alpha = j.at("alpha").get<std::vector<double>>();
    cfg.workers = j.at("workers").get<int>();
    cfg.clip_norm = j.value("clip_norm", 1e5);
    return cfg;
}

}  // namespace

template <typename T>
ParameterSet<T>::ParameterSet(const dir::DirConfig& cfg, int unroll, Rng& rng) : model(cfg, rng) {
    if (unroll < 1) throw ValueError("parameters: unroll depth must be >= 1");
    mu_raw = Tensor<T>({unroll}, static_cast<T>(kRawUnit), true);
    const int kt = std::max(1, unroll - 1);
    mu_bar_raw = Tensor<T>({kt}, static_cast<T>(kRawUnit), true);
    lambda_bar_raw = Tensor<T>({kt}, static_cast<T>(kRawUnit), true);
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>>> ParameterSet<T>::named_params() {
    auto out = model.params();
    for (auto& [name, t] : out) name = "dir." + name;
    out.emplace_back("solver.mu_raw", mu_raw);
    if (unroll() > 1) {
        out.emplace_back("solver.mu_bar_raw", mu_bar_raw);
        out.emplace_back("solver.lambda_bar_raw", lambda_bar_raw);
    }
    return out;
}

template <typename T>
ParameterSet<T> ParameterSet<T>::clone() const {
    ParameterSet<T> c = *this;
    c.model = model.clone();
    c.mu_raw = mu_raw.clone();
    c.mu_bar_raw = mu_bar_raw.clone();
    c.lambda_bar_raw = lambda_bar_raw.clone();
    return c;
}

template <typename T>
std::vector<double> ParameterSet<T>::student_mus() const {
    std::vector<double> out;
    for (T raw : mu_raw.data()) {
        const double x = static_cast<double>(raw);
        out.push_back(x > 30.0 ? x : std::log1p(std::exp(x)));
    }
    return out;
}

template <typename T>
Tensor<T> pt_loss(const Tensor<T>& x_gt, const Tensor<T>& y, const Tensor<T>& h_mat,
                  const Tensor<T>& w_mat, ParameterSet<T>& params, Scheme scheme,
                  const std::vector<double>& alpha, std::vector<Tensor<T>>* student_out,
                  const std::function<Tensor<T>(const Tensor<T>&, int)>* student_override) {
    const int k_steps = params.unroll();
    if (static_cast<int>(alpha.size()) != k_steps)
        throw ValueError("pt_loss: alpha must have one weight per iteration");
    bool any_alpha = false;
    for (double a : alpha)
        if (a != 0.0) any_alpha = true;
    if (!any_alpha) throw ValueError("pt_loss: alpha must not be all zero");
    if (x_gt.rank() != 2) throw ShapeError("pt_loss: ground truth must be [H,W]");

    const int rows = x_gt.dim(0), cols = x_gt.dim(1);
    const bool admm = scheme == Scheme::ADMM;

    auto x0 = matmul(matmul(h_mat, y, true, false), w_mat);
    Tensor<T> x = x0, xb = x0;
    Tensor<T> u, ub;
    if (admm) {
        u = Tensor<T>({rows, cols}, T(0));
        ub = Tensor<T>({rows, cols}, T(0));
    }
    dir::MemoryBank<T> bank;
    Tensor<T> total = Tensor<T>::scalar(T(0));

    for (int k = 0; k < k_steps; ++k) {
        // student step: R_theta after the data prox
        auto mu = softplus(slice0(params.mu_raw, k, k + 1));
        Tensor<T> z, rin;
        if (admm) {
            auto ui = mul_scalar_t(u, recip(mu));
            z = proximal::prox_f_t(sub(x, ui), y, h_mat, w_mat, mu);
            rin = add(z, ui);
        } else {
            z = proximal::prox_f_t(x, y, h_mat, w_mat, mu);
            rin = z;
        }
        if (student_override) {
            x = (*student_override)(rin, k);
        } else {
            auto [restored, next_bank] = params.model.forward(reshape(rin, {1, rows, cols}), bank);
            bank = std::move(next_bank);
            x = reshape(restored, {rows, cols});
        }
        if (admm) u = add(u, mul_scalar_t(sub(z, x), mu));
        if (student_out) student_out->push_back(x);

        // teacher step: final iterate is pinned to the ground truth
        if (k == k_steps - 1) {
            xb = x_gt;
        } else {
            auto mub = softplus(slice0(params.mu_bar_raw, k, k + 1));
            auto lb = softplus(slice0(params.lambda_bar_raw, k, k + 1));
            Tensor<T> zb, q;
            if (admm) {
                auto ubi = mul_scalar_t(ub, recip(mub));
                zb = proximal::prox_f_t(sub(xb, ubi), y, h_mat, w_mat, mub);
                q = add(zb, ubi);
            } else {
                zb = proximal::prox_f_t(xb, y, h_mat, w_mat, mub);
                q = zb;
            }
            xb = proximal::prox_g_bar_t(q, x_gt, mub, lb);
            if (admm) ub = add(ub, mul_scalar_t(sub(zb, xb), mub));
        }
        if (alpha[k] != 0.0) total = add(total, scale(sum_sq_diff(x, xb), alpha[k]));
    }
    return total;
}

// ---------------------------------------------------------------- datasets

std::vector<Image> synth_dataset(int count, int extent, std::uint64_t seed) {
    if (count < 1 || extent < 4) throw ValueError("synth_dataset: bad count/extent");
    std::vector<Image> out;
    out.reserve(count);
    const Rng master(seed);
    for (int i = 0; i < count; ++i) {
        Rng r = master.child(static_cast<std::uint64_t>(i));
        Image img(extent, extent, 0.0);
        const int type = i % 3;
        if (type == 0) {
            // piecewise-constant shapes
            const double bg = r.uniform(0.1, 0.9);
            for (auto& v : img.values()) v = bg;
            const int nrect = 2 + static_cast<int>(r.below(3));
            for (int s = 0; s < nrect; ++s) {
                const int y0 = static_cast<int>(r.below(extent - 2));
                const int x0 = static_cast<int>(r.below(extent - 2));
                const int hh = 2 + static_cast<int>(r.below(extent / 2));
                const int ww = 2 + static_cast<int>(r.below(extent / 2));
                const double v = r.uniform(0.0, 1.0);
                for (int yy = y0; yy < std::min(extent, y0 + hh); ++yy)
                    for (int xx = x0; xx < std::min(extent, x0 + ww); ++xx) img(yy, xx) = v;
            }
            const double cy = r.uniform(0.2, 0.8) * extent, cx = r.uniform(0.2, 0.8) * extent;
            const double rad = r.uniform(0.1, 0.3) * extent, v = r.uniform(0.0, 1.0);
            for (int yy = 0; yy < extent; ++yy)
                for (int xx = 0; xx < extent; ++xx)
                    if ((yy - cy) * (yy - cy) + (xx - cx) * (xx - cx) < rad * rad) img(yy, xx) = v;
        } else if (type == 1) {
            // linear gradient plus one rectangle
            const double a = r.uniform(0.0, 1.0);
            const double bx = r.uniform(-1.0, 1.0) / extent, by = r.uniform(-1.0, 1.0) / extent;
            for (int yy = 0; yy < extent; ++yy)
                for (int xx = 0; xx < extent; ++xx) img(yy, xx) = a + bx * xx + by * yy;
            const int y0 = static_cast<int>(r.below(extent / 2));
            const int x0 = static_cast<int>(r.below(extent / 2));
            const double v = r.uniform(0.0, 1.0);
            for (int yy = y0; yy < y0 + extent / 3; ++yy)
                for (int xx = x0; xx < x0 + extent / 3; ++xx) img(yy, xx) = v;
        } else {
            // band-limited random-Fourier texture
            const int waves = 6 + static_cast<int>(r.below(4));
            for (int s = 0; s < waves; ++s) {
                const double fy = 1.0 + r.uniform(0.0, 4.0);
                const double fx = 1.0 + r.uniform(0.0, 4.0);
                const double phase = r.uniform(0.0, 6.283185307179586);
                const double amp = r.uniform(0.2, 1.0) / waves;
                const double tau = 6.283185307179586;
                for (int yy = 0; yy < extent; ++yy)
                    for (int xx = 0; xx < extent; ++xx)
                        img(yy, xx) += amp * std::cos(tau * (fy * yy + fx * xx) / extent + phase);
            }
            double lo = img.values()[0], hi = img.values()[0];
            for (double v : img.values()) {
                lo = std::min(lo, v);
                hi = std::max(hi, v);
            }
            const double span = std::max(hi - lo, 1e-9);
            for (auto& v : img.values()) v = (v - lo) / span;
        }
        for (auto& v : img.values()) v = std::clamp(v, 0.0, 1.0);
        out.push_back(std::move(img));
    }
    return out;
}

std::vector<Image> ingest_corpus(const std::string& dir_path, int extent) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(dir_path)) throw IoError("ingest: '" + dir_path + "' is not a directory");
    std::vector<std::string> files;
    for (const auto& e : fs::directory_iterator(dir_path)) {
        if (!e.is_regular_file()) continue;
        const auto ext = e.path().extension().string();
        if (ext == ".pgm" || ext == ".png" || ext == ".PGM" || ext == ".PNG")
            files.push_back(e.path().string());
    }
    std::sort(files.begin(), files.end());
    std::vector<Image> out;
    for (const auto& f : files) {
        Image img = read_image(f);
        if (img.rows() < extent || img.cols() < extent)
            throw ValueError("ingest: '" + f + "' is smaller than the requested extent");
        const int top = (img.rows() - extent) / 2, left = (img.cols() - extent) / 2;
        Image c(extent, extent);
        for (int i = 0; i < extent; ++i)
            for (int j = 0; j < extent; ++j) c(i, j) = img(top + i, left + j);
        out.push_back(std::move(c));
    }
    return out;
}

// ---------------------------------------------------------------- checkpoints

template <typename T>
void save_checkpoint(const std::string& path, ParameterSet<T>& params, const TrainConfig& cfg,
                     int step, const std::vector<std::vector<T>>* adam_m,
                     const std::vector<std::vector<T>>* adam_v) {
    const int width = sizeof(T) == 4 ? 4 : 8;
    Container c;
    json meta = train_config_to_json(cfg);
    meta["precision"] = (width == 4) ? "f32" : "f64";
    c.put_text("config_json", meta.dump());
    c.put_scalar("train.step", static_cast<double>(step));
    params.model.save_params(c, "dir.", width);
    auto put_vec = [&](const std::string& name, const Tensor<T>& t) {
        ContainerEntry e;
        e.width = width;
        e.shape = {static_cast<std::uint32_t>(t.numel())};
        for (T v : t.data()) e.values.push_back(static_cast<double>(v));
        c.put(name, std::move(e));
    };
    put_vec("solver.mu_raw", params.mu_raw);
    put_vec("solver.mu_bar_raw", params.mu_bar_raw);
    put_vec("solver.lambda_bar_raw", params.lambda_bar_raw);
    if (adam_m && adam_v) {
        auto named = params.named_params();
        for (std::size_t i = 0; i < named.size(); ++i) {
            ContainerEntry em, ev;
            em.width = ev.width = width;
            em.shape = {static_cast<std::uint32_t>((*adam_m)[i].size())};
            ev.shape = {static_cast<std::uint32_t>((*adam_v)[i].size())};
            for (T v : (*adam_m)[i]) em.values.push_back(static_cast<double>(v));
            for (T v : (*adam_v)[i]) ev.values.push_back(static_cast<double>(v));
            c.put("adam_m." + named[i].first, std::move(em));
            c.put("adam_v." + named[i].first, std::move(ev));
        }
    }
    c.save(path);
}

CheckpointInfo read_checkpoint_info(const std::string& path) {
    const Container c = Container::load(path);
    CheckpointInfo info;
    const json meta = json::parse(c.text("config_json"));
    info.config = train_config_from_json(meta);
    info.step = static_cast<int>(c.scalar("train.step"));
    info.width = c.at("dir.conv_in.w").width;
    return info;
}

template <typename T>
ParameterSet<T> load_checkpoint(const std::string& path, TrainConfig* cfg_out, int* step_out,
                                std::vector<std::vector<T>>* adam_m,
                                std::vector<std::vector<T>>* adam_v) {
    const Container c = Container::load(path);
    const json meta = json::parse(c.text("config_json"));
    const TrainConfig cfg = train_config_from_json(meta);
    if (cfg_out) *cfg_out = cfg;
    if (step_out) *step_out = static_cast<int>(c.scalar("train.step"));
    Rng rng(0);
    ParameterSet<T> params(cfg.dir, cfg.unroll, rng);
    params.model.load_params(c, "dir.");
    auto load_vec = [&](const std::string& name, Tensor<T>& t) {
        const auto& e = c.at(name);
        if (e.numel() != t.numel()) throw IoError("checkpoint: extent mismatch for " + name);
        for (std::size_t i = 0; i < t.numel(); ++i) t.data()[i] = static_cast<T>(e.values[i]);
    };
    load_vec("solver.mu_raw", params.mu_raw);
    load_vec("solver.mu_bar_raw", params.mu_bar_raw);
    load_vec("solver.lambda_bar_raw", params.lambda_bar_raw);
    if (adam_m && adam_v && c.contains("adam_m.dir.conv_in.w")) {
        auto named = params.named_params();
        adam_m->clear();
        adam_v->clear();
        for (const auto& [name, t] : named) {
            const auto& em = c.at("adam_m." + name);
            const auto& ev = c.at("adam_v." + name);
            std::vector<T> m(em.values.size()), v(ev.values.size());
            for (std::size_t i = 0; i < m.size(); ++i) m[i] = static_cast<T>(em.values[i]);
            for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<T>(ev.values[i]);
            adam_m->push_back(std::move(m));
            adam_v->push_back(std::move(v));
        }
    }
    return params;
}

// ---------------------------------------------------------------- training

template <typename T>
ParameterSet<T> train(const TrainConfig& cfg, const std::vector<Image>& dataset, TrainResult& result,
                      const std::string& checkpoint_in, const std::string& log_path,
                      const std::string& checkpoint_out,
                      const std::function<void(const TrainLogRow&)>& progress) {
    cfg.validate();
    if (dataset.empty()) throw ValueError("train: dataset is empty");
    for (int extent : cfg.extents)
        for (const auto& img : dataset)
            if (img.rows() < extent || img.cols() < extent)
                throw ValueError("train: dataset images are smaller than a training extent");

    Rng master(cfg.seed);
    int start_step = 0;
    std::vector<std::vector<T>> adam_m, adam_v;
    ParameterSet<T> params = checkpoint_in.empty()
                                 ? ParameterSet<T>(cfg.dir, cfg.unroll, master)
                                 : load_checkpoint<T>(checkpoint_in, nullptr, &start_step, &adam_m,
                                                      &adam_v);
    auto named = params.named_params();
    if (adam_m.empty()) {
        for (const auto& [name, t] : named) {
            adam_m.emplace_back(t.numel(), T(0));
            adam_v.emplace_back(t.numel(), T(0));
        }
    }
    const auto alpha = cfg.loss_weights();
    const int workers = std::min(cfg.workers, cfg.batch);

    std::ofstream log;
    if (!log_path.empty()) {
        log.open(log_path, start_step > 0 ? std::ios::app : std::ios::out);
        if (!log) throw IoError("train: cannot open log '" + log_path + "'");
        if (start_step == 0) log << "step,loss,lr,sampled_cr\n";
    }

    for (int local = 0; local < cfg.steps; ++local) {
        const int step = start_step + local;
        Rng srng = master.child(static_cast<std::uint64_t>(step));
        const double cr = srng.uniform(cfg.cr_lo, cfg.cr_hi);
        const int extent = cfg.extents[srng.below(cfg.extents.size())];
        const auto op = sensing::make_operator(extent, extent, cr,
                                               sensing::OperatorKind::GaussianOrthonormal,
                                               srng.next_u64());
        std::vector<Image> xs;
        std::vector<Mat> ys;
        for (int b = 0; b < cfg.batch; ++b) {
            const auto& src = dataset[srng.below(dataset.size())];
            const int top = (src.rows() > extent) ? static_cast<int>(srng.below(src.rows() - extent + 1)) : 0;
            const int left = (src.cols() > extent) ? static_cast<int>(srng.below(src.cols() - extent + 1)) : 0;
            Image x(extent, extent);
            for (int i = 0; i < extent; ++i)
                for (int j = 0; j < extent; ++j) x(i, j) = src(top + i, left + j);
            ys.push_back(sensing::forward(op, x).values);
            xs.push_back(std::move(x));
        }
        const auto h_t = from_image<T>(op.h_mat);
        const auto w_t = from_image<T>(op.w_mat);

        std::vector<ParameterSet<T>> locals;
        locals.reserve(workers);
        for (int wi = 0; wi < workers; ++wi) locals.push_back(params.clone());
        std::vector<double> worker_loss(workers, 0.0);
        std::vector<std::exception_ptr> errors(workers);

        auto worker_fn = [&](int wi) {
            try {
                const int lo = wi * cfg.batch / workers;
                const int hi = (wi + 1) * cfg.batch / workers;
                for (int b = lo; b < hi; ++b) {
                    Tape<T> tape;
                    typename Tape<T>::Scope scope(tape);
                    auto loss = pt_loss<T>(from_image<T>(xs[b]), from_image<T>(ys[b]), h_t, w_t,
                                           locals[wi], cfg.scheme, alpha);
                    tape.backward(loss);
                    worker_loss[wi] += static_cast<double>(loss.item());
                }
            } catch (...) {
                errors[wi] = std::current_exception();
            }
        };
        if (workers == 1) {
            worker_fn(0);
        } else {
            std::vector<std::thread> threads;
            for (int wi = 0; wi < workers; ++wi) threads.emplace_back(worker_fn, wi);
            for (auto& t : threads) t.join();
        }
        for (auto& e : errors)
            if (e) std::rethrow_exception(e);

        double loss_mean = 0.0;
        for (double l : worker_loss) loss_mean += l;
        loss_mean /= cfg.batch;
        if (!std::isfinite(loss_mean))
            throw IoError("train: non-finite loss at step " + std::to_string(step + 1) +
                          " (cr=" + std::to_string(cr) + "); lower the learning rate or check data");

        // deterministic reduction in worker order, then Adam
        const double tprog = cfg.steps > 1 ? static_cast<double>(local) / (cfg.steps - 1) : 1.0;
        const double lr = cfg.lr_final + 0.5 * (cfg.lr_init - cfg.lr_final) *
                                             (1.0 + std::cos(3.14159265358979323846 * tprog));
        const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
        const double t_adam = static_cast<double>(step + 1);
        const double corr1 = 1.0 - std::pow(b1, t_adam);
        const double corr2 = 1.0 - std::pow(b2, t_adam);
        std::vector<std::vector<std::pair<std::string, Tensor<T>>>> local_named;
        for (int wi = 0; wi < workers; ++wi) local_named.push_back(locals[wi].named_params());
        std::vector<std::vector<T>> grads(named.size());
        double grad_sq = 0.0;
        for (std::size_t p = 0; p < named.size(); ++p) {
            grads[p].assign(named[p].second.numel(), T(0));
            for (std::size_t i = 0; i < grads[p].size(); ++i) {
                T g = T(0);
                for (int wi = 0; wi < workers; ++wi) {
                    const auto& impl = *local_named[wi][p].second.impl();
                    if (!impl.grad.empty()) g += impl.grad[i];
                }
                g = static_cast<T>(g / cfg.batch);
                grads[p][i] = g;
                grad_sq += static_cast<double>(g) * g;
            }
        }
        double clip_scale = 1.0;
        if (cfg.clip_norm > 0.0) {
            const double norm = std::sqrt(grad_sq);
            if (norm > cfg.clip_norm) clip_scale = cfg.clip_norm / norm;
        }
        for (std::size_t p = 0; p < named.size(); ++p) {
            auto& tensor = named[p].second;
            auto& m = adam_m[p];
            auto& v = adam_v[p];
            for (std::size_t i = 0; i < tensor.numel(); ++i) {
                const T g = static_cast<T>(grads[p][i] * clip_scale);
                m[i] = static_cast<T>(b1 * m[i] + (1.0 - b1) * g);
                v[i] = static_cast<T>(b2 * v[i] + (1.0 - b2) * g * g);
                const double mhat = m[i] / corr1;
                const double vhat = v[i] / corr2;
                tensor.data()[i] -= static_cast<T>(lr * mhat / (std::sqrt(vhat) + eps));
            }
        }

        TrainLogRow row;
        row.step = step + 1;
        row.loss = loss_mean;
        row.lr = lr;
        row.cr = cr;
        result.log.push_back(row);
        if (progress) progress(row);
        if (log) {
            char buf[128];
            std::snprintf(buf, sizeof(buf), "%d,%.10g,%.10g,%.10g\n", row.step, row.loss, row.lr, row.cr);
            log << buf;
        }
    }
    result.total_steps = start_step + cfg.steps;
    if (!checkpoint_out.empty())
        save_checkpoint(checkpoint_out, params, cfg, result.total_steps, &adam_m, &adam_v);
    return params;
}

// ---------------------------------------------------------------- inference

template <typename T>
proximal::Trajectory reconstruct(ParameterSet<T>& params, const sensing::Measurement& y,
                                 const sensing::MeasurementOperator& op, Scheme scheme) {
    const auto mus = params.student_mus();
    dir::MemoryBank<T> bank;
    auto restorer = [&](const Image& img, int, double) {
        auto t = reshape(from_image<T>(img), {1, img.rows(), img.cols()});
        auto [out, next] = params.model.forward(t, bank);
        bank = std::move(next);
        return to_image(out);
    };
    return proximal::run(scheme, y, op, restorer, params.unroll(), mus);
}

template <typename T>
std::vector<EvalRow> evaluate(ParameterSet<T>& params, const std::vector<Image>& dataset,
                              const std::vector<double>& cr_list, Scheme scheme, std::uint64_t seed,
                              int workers) {
    if (dataset.empty()) throw ValueError("evaluate: dataset is empty");
    const int rows = dataset[0].rows(), cols = dataset[0].cols();
    for (const auto& img : dataset)
        if (img.rows() != rows || img.cols() != cols)
            throw ShapeError("evaluate: dataset extents must be uniform");
    std::vector<EvalRow> table;
    for (std::size_t ci = 0; ci < cr_list.size(); ++ci) {
        const auto op = sensing::make_operator(rows, cols, cr_list[ci],
                                               sensing::OperatorKind::GaussianOrthonormal,
                                               seed + 1000 * ci);
        const int n = static_cast<int>(dataset.size());
        std::vector<double> ps(n), ss(n), pb(n), sb(n);
        std::vector<std::exception_ptr> errors(std::max(1, workers));
        auto eval_range = [&](int wi, int lo, int hi) {
            try {
                for (int i = lo; i < hi; ++i) {
                    const auto y = sensing::forward(op, dataset[i]);
                    const Image x0 = sensing::adjoint(op, y);
                    auto traj = reconstruct(params, y, op, scheme);  // read-only use of weights
                    const Image& xk = traj.iterates.back();
                    ps[i] = psnr(xk, dataset[i]);
                    ss[i] = ssim(xk, dataset[i]);
                    pb[i] = psnr(x0, dataset[i]);
                    sb[i] = ssim(x0, dataset[i]);
                }
            } catch (...) {
                errors[wi] = std::current_exception();
            }
        };
        const int w = std::max(1, std::min(workers, n));
        if (w == 1) {
            eval_range(0, 0, n);
        } else {
            std::vector<std::thread> threads;
            for (int wi = 0; wi < w; ++wi)
                threads.emplace_back(eval_range, wi, wi * n / w, (wi + 1) * n / w);
            for (auto& t : threads) t.join();
        }
        for (auto& e : errors)
            if (e) std::rethrow_exception(e);
        EvalRow row;
        row.cr = cr_list[ci];
        for (int i = 0; i < n; ++i) {
            row.psnr_mean += ps[i];
            row.ssim_mean += ss[i];
            row.psnr_baseline += pb[i];
            row.ssim_baseline += sb[i];
        }
        row.psnr_mean /= n;
        row.ssim_mean /= n;
        row.psnr_baseline /= n;
        row.ssim_baseline /= n;
        table.push_back(row);
    }
    return table;
}

void write_eval_csv(const std::string& path, const std::vector<EvalRow>& rows) {
    std::ofstream f(path);
    if (!f) throw IoError("evaluate: cannot open '" + path + "'");
    f << "cr,psnr,ssim,psnr_baseline,ssim_baseline\n";
    for (const auto& r : rows) {
        char buf[160];
        std::snprintf(buf, sizeof(buf), "%.6g,%.10g,%.10g,%.10g,%.10g\n", r.cr, r.psnr_mean,
                      r.ssim_mean, r.psnr_baseline, r.ssim_baseline);
        f << buf;
    }
}

void write_eval_json(const std::string& path, const std::vector<EvalRow>& rows) {
    json j = json::array();
    for (const auto& r : rows) {
        json e;
        e["cr"] = r.cr;
        e["psnr"] = r.psnr_mean;
        e["ssim"] = r.ssim_mean;
        e["psnr_baseline"] = r.psnr_baseline;
        e["ssim_baseline"] = r.ssim_baseline;
        j.push_back(e);
    }
    std::ofstream f(path);
    if (!f) throw IoError("evaluate: cannot open '" + path + "'");
    f << j.dump(2) << "\n";
}

// ---------------------------------------------------------------- config text

// (exposed through the CLI; kept here so the schema lives next to the types)
std::string train_config_to_json_text(const TrainConfig& cfg) { return train_config_to_json(cfg).dump(2); }

TrainConfig train_config_from_json_text(const std::string& text) {
    return train_config_from_json(json::parse(text));
}

// ---------------------------------------------------------------- instantiation

#define PXUN_TRAIN_INSTANTIATE(T)                                                                     \
    template struct ParameterSet<T>;                                                                  \
    template Tensor<T> pt_loss(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, \
                               ParameterSet<T>&, Scheme, const std::vector<double>&,                  \
                               std::vector<Tensor<T>>*,                                               \
                               const std::function<Tensor<T>(const Tensor<T>&, int)>*);               \
    template void save_checkpoint(const std::string&, ParameterSet<T>&, const TrainConfig&, int,      \
                                  const std::vector<std::vector<T>>*,                                 \
                                  const std::vector<std::vector<T>>*);                                \
    template ParameterSet<T> load_checkpoint(const std::string&, TrainConfig*, int*,                  \
                                             std::vector<std::vector<T>>*,                            \
                                             std::vector<std::vector<T>>*);                           \
    template ParameterSet<T> train(const TrainConfig&, const std::vector<Image>&, TrainResult&,       \
                                   const std::string&, const std::string&, const std::string&,        \
                                   const std::function<void(const TrainLogRow&)>&);                   \
    template proximal::Trajectory reconstruct(ParameterSet<T>&, const sensing::Measurement&,          \
                                              const sensing::MeasurementOperator&, Scheme);           \
    template std::vector<EvalRow> evaluate(ParameterSet<T>&, const std::vector<Image>&,               \
                                           const std::vector<double>&, Scheme, std::uint64_t, int);

PXUN_TRAIN_INSTANTIATE(float)
PXUN_TRAIN_INSTANTIATE(double)

#undef PXUN_TRAIN_INSTANTIATE

}  // namespace pxun::training

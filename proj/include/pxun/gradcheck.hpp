#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "pxun/rng.hpp"
#include "pxun/tensor.hpp"

namespace pxun::tg {

struct GradCheckReport {
    double max_rel_err = 0.0;
    double max_abs_err = 0.0;
    std::size_t checked = 0;
    std::string worst;  // "tensor[index]" of the worst element

    bool pass(double tol) const { return checked > 0 && max_rel_err < tol; }
};

// Central-difference check of an analytic gradient. `forward` must rebuild
// the graph from the probe tensors' current data on every call; it runs once
// under a fresh tape for the analytic gradients and tape-free for the
// differences, so the two paths stay independent.
//
// probes: named leaf tensors with requires_grad=true.
// samples_per_tensor: <= 0 checks every element, otherwise a random subset.
template <typename T>
GradCheckReport grad_check(const std::function<Tensor<T>()>& forward,
                           const std::vector<std::pair<std::string, Tensor<T>>>& probes, double eps,
                           int samples_per_tensor = -1, Rng* rng = nullptr) {
    std::vector<std::vector<T>> analytic;
    {
        Tape<T> tape;
        typename Tape<T>::Scope scope(tape);
        for (auto& [name, t] : probes) t.impl()->grad.clear();
        Tensor<T> loss = forward();
        tape.backward(loss);
        for (const auto& [name, t] : probes)
            analytic.push_back(t.has_grad() ? t.grad() : std::vector<T>(t.numel(), T(0)));
    }

    GradCheckReport rep;
    for (std::size_t pi = 0; pi < probes.size(); ++pi) {
        auto& tensor = const_cast<Tensor<T>&>(probes[pi].second);
        const std::size_t n = tensor.numel();
        std::vector<std::size_t> picks;
        if (samples_per_tensor > 0 && static_cast<std::size_t>(samples_per_tensor) < n) {
            if (!rng) throw ValueError("grad_check: sampling requires an rng");
            for (int s = 0; s < samples_per_tensor; ++s) picks.push_back(rng->below(n));
        } else {
            picks.resize(n);
            for (std::size_t i = 0; i < n; ++i) picks[i] = i;
        }
        for (std::size_t idx : picks) {
            T& cell = tensor.data()[idx];
            const T orig = cell;
            auto central_diff = [&](double step) {
                cell = orig + static_cast<T>(step);
                const double fp = static_cast<double>(forward().item());
                cell = orig - static_cast<T>(step);
                const double fm = static_cast<double>(forward().item());
                cell = orig;
                return (fp - fm) / (2.0 * step);
            };
            const double an = static_cast<double>(analytic[pi][idx]);
            auto rel_of = [&](double fd) {
                return std::fabs(fd - an) / std::max({std::fabs(fd), std::fabs(an), 1e-3});
            };
            double fd = central_diff(eps);
            double rel = rel_of(fd);
            if (rel > 1e-5) {
                // distinguish eps^2 truncation from a wrong derivative: noise
                // shrinks under refinement, a bug does not
                const double fd2 = central_diff(eps / 8.0);
                const double rel2 = rel_of(fd2);
                if (rel2 < rel) {
                    fd = fd2;
                    rel = rel2;
                }
            }
            ++rep.checked;
            rep.max_abs_err = std::max(rep.max_abs_err, std::fabs(fd - an));
            if (rel > rep.max_rel_err) {
                rep.max_rel_err = rel;
                rep.worst = probes[pi].first + "[" + std::to_string(idx) + "]";
            }
        }
    }
    return rep;
}

}  // namespace pxun::tg

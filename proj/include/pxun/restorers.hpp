#pragma once

#include <memory>
#include <string>

#include "pxun/mat.hpp"
#include "pxun/proximal.hpp"

namespace pxun::restorers {

enum class Kind { Identity, Tv, Dct, Dir };

struct RestorerSpec {
    Kind kind = Kind::Identity;
    double strength = 0.0;
    int inner_iters = 30;    // tv only
    std::string checkpoint;  // dir only
};

struct RestoreContext {
    int k = 0;
    double mu = 1.0;
};

// Classical kinds are stateless and pure. The DIR kind carries the feature
// memory of the unrolled network between calls, so use one instance per
// reconstruction run (or call reset()).
class Restorer {
public:
    virtual ~Restorer() = default;
    virtual Image restore(const Image& x, const RestoreContext& ctx) = 0;
    virtual void reset() {}
};

Image tv_denoise(const Image& x, double strength, int inner_iters = 30);
Image dct_threshold(const Image& x, double strength);

// Orthonormal DCT-II matrix (n x n).
Mat dct_matrix(int n);

std::unique_ptr<Restorer> make_restorer(const RestorerSpec& spec);

// Adapter onto the proximal module's callable interface.
proximal::RestorerFn as_fn(Restorer& r);

Kind kind_from_name(const std::string& name);

}  // namespace pxun::restorers

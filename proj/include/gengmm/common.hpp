#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>

namespace gengmm {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
using ClassId = int32_t;

struct DegenerateFeature : std::runtime_error {
    explicit DegenerateFeature(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericalInstability : std::runtime_error {
    explicit NumericalInstability(const std::string& msg) : std::runtime_error(msg) {}
};

struct SpecError : std::runtime_error {
    explicit SpecError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

inline double log_sum_exp(const Vec& x) {
    if (x.size() == 0) return -std::numeric_limits<double>::infinity();
    const double m = x.maxCoeff();
    if (!std::isfinite(m)) return m;
    double s = 0.0;
    for (Eigen::Index i = 0; i < x.size(); ++i) s += std::exp(x[i] - m);
    return m + std::log(s);
}

// Row-wise / column-wise log-sum-exp kept as plain loops so the summation
// order is fixed regardless of vectorization width.
inline Vec log_sum_exp_rows(const Mat& x) {
    Vec out(x.rows());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        double m = -std::numeric_limits<double>::infinity();
        for (Eigen::Index j = 0; j < x.cols(); ++j) m = std::max(m, x(i, j));
        if (!std::isfinite(m)) {
            out[i] = m;
            continue;
        }
        double s = 0.0;
        for (Eigen::Index j = 0; j < x.cols(); ++j) s += std::exp(x(i, j) - m);
        out[i] = m + std::log(s);
    }
    return out;
}

inline Vec log_sum_exp_cols(const Mat& x) {
    Vec out(x.cols());
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
        double m = -std::numeric_limits<double>::infinity();
        for (Eigen::Index i = 0; i < x.rows(); ++i) m = std::max(m, x(i, j));
        if (!std::isfinite(m)) {
            out[j] = m;
            continue;
        }
        double s = 0.0;
        for (Eigen::Index i = 0; i < x.rows(); ++i) s += std::exp(x(i, j) - m);
        out[j] = m + std::log(s);
    }
    return out;
}

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Deterministic RNG. Uniform/normal draws are implemented explicitly instead
// of through std distributions so that streams reproduce across standard
// libraries, not just across runs of one binary.
class Rng {
public:
    explicit Rng(uint64_t seed) : seed_(seed), eng_(splitmix64(seed)) {}

    // Independent substream for (seed, tag, tag2); unaffected by how much of
    // the parent stream has been consumed.
    Rng derive(uint64_t a, uint64_t b = 0) const {
        return Rng(splitmix64(seed_ ^ splitmix64(a ^ 0x51ed2701a9b4d3e5ULL) ^ splitmix64(b ^ 0x9e3779b97f4a7c15ULL)));
    }

    uint64_t next_u64() { return eng_(); }

    // [0, 1)
    double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // [0, n)
    int uniform_int(int n) {
        int v = static_cast<int>(uniform() * static_cast<double>(n));
        return v >= n ? n - 1 : v;
    }

    // Box-Muller, no spare caching.
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    Vec normal_vec(int dim) {
        Vec v(dim);
        for (int i = 0; i < dim; ++i) v[i] = normal();
        return v;
    }

    std::string save_state() const {
        std::ostringstream os;
        os << seed_ << ' ' << eng_;
        return os.str();
    }

    void load_state(const std::string& s) {
        std::istringstream is(s);
        is >> seed_ >> eng_;
        if (!is) throw IoError("bad RNG state string");
    }

private:
    uint64_t seed_;
    std::mt19937_64 eng_;
};

} // namespace gengmm

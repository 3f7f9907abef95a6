#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdlib>
#include <functional>
#include <iostream>
#include <mutex>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace ecpc {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;
using IndexSet = std::vector<std::size_t>;

/// Base of every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed input: bad dimensions, files, configuration. Maps to CLI exit code 2.
class InputError : public Error {
public:
    using Error::Error;
};

/// A covariate that belongs to no group of a grouping.
class CoverageError : public InputError {
public:
    CoverageError(std::size_t covariate, const std::string& grouping)
        : InputError("covariate " + std::to_string(covariate + 1) +
                     " is not covered by any group of grouping '" + grouping + "'"),
          covariate_(covariate) {}

    [[nodiscard]] std::size_t covariate() const noexcept { return covariate_; }

private:
    std::size_t covariate_;
};

/// Numerical failure (singular systems, degenerate data). Maps to CLI exit code 1.
class NumericError : public Error {
public:
    using Error::Error;
};

/// Iterative solver stopped at its iteration cap. Carries the last iterate.
class ConvergenceError : public NumericError {
public:
    ConvergenceError(const std::string& what, Vector last_iterate)
        : NumericError(what), last_(std::move(last_iterate)) {}

    [[nodiscard]] const Vector& last_iterate() const noexcept { return last_; }

private:
    Vector last_;
};

namespace log {

using Sink = std::function<void(const std::string&)>;

inline Sink& sink() {
    static Sink s = [](const std::string& msg) { std::cerr << "ecpc: warning: " << msg << '\n'; };
    return s;
}

inline std::mutex& sink_mutex() {
    static std::mutex m;
    return m;
}

inline void set_sink(Sink s) {
    std::lock_guard lock(sink_mutex());
    sink() = std::move(s);
}

inline void warn(const std::string& msg) {
    std::lock_guard lock(sink_mutex());
    if (sink()) sink()(msg);
}

} // namespace log

/// Worker count: hardware concurrency, capped by ECPC_THREADS when set.
inline std::size_t thread_count() {
    std::size_t n = std::max(1u, std::thread::hardware_concurrency());
    if (const char* env = std::getenv("ECPC_THREADS")) {
        try {
            const long cap = std::stol(env);
            if (cap >= 1) n = std::min<std::size_t>(n, static_cast<std::size_t>(cap));
        } catch (const std::exception&) {
        }
    }
    return n;
}

/// Runs fn(i) for i in [0, count). Each task must only write its own output slot,
/// so results do not depend on scheduling. The first exception is rethrown.
template <class Fn>
void parallel_for(std::size_t count, Fn&& fn, std::size_t max_threads = thread_count()) {
    const std::size_t workers = std::min(count, std::max<std::size_t>(1, max_threads));
    if (workers <= 1) {
        for (std::size_t i = 0; i < count; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    auto work = [&] {
        for (std::size_t i = next++; i < count; i = next++) {
            try {
                fn(i);
            } catch (...) {
                std::lock_guard lock(failure_mutex);
                if (!failure) failure = std::current_exception();
            }
        }
    };
    std::vector<std::jthread> pool;
    pool.reserve(workers);
    for (std::size_t t = 0; t < workers; ++t) pool.emplace_back(work);
    pool.clear();
    if (failure) std::rethrow_exception(failure);
}

namespace detail {

inline double soft_threshold(double x, double t) { return x > t ? x - t : (x < -t ? x + t : 0.0); }

inline Vector log_spaced(double lo, double hi, std::size_t count) {
    Vector out(static_cast<Index>(count));
    if (count == 1) {
        out[0] = lo;
        return out;
    }
    const double a = std::log(lo), b = std::log(hi);
    for (std::size_t i = 0; i < count; ++i)
        out[static_cast<Index>(i)] = std::exp(a + (b - a) * static_cast<double>(i) / static_cast<double>(count - 1));
    return out;
}

inline Matrix select_columns(const Matrix& X, const IndexSet& cols) {
    Matrix out(X.rows(), static_cast<Index>(cols.size()));
    for (std::size_t j = 0; j < cols.size(); ++j) out.col(static_cast<Index>(j)) = X.col(static_cast<Index>(cols[j]));
    return out;
}

inline Matrix select_rows(const Matrix& X, const IndexSet& rows) {
    Matrix out(static_cast<Index>(rows.size()), X.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Index>(i)) = X.row(static_cast<Index>(rows[i]));
    return out;
}

inline Vector select(const Vector& v, const IndexSet& idx) {
    Vector out(static_cast<Index>(idx.size()));
    for (std::size_t i = 0; i < idx.size(); ++i) out[static_cast<Index>(i)] = v[static_cast<Index>(idx[i])];
    return out;
}

} // namespace detail
} // namespace ecpc

#pragma once

#include "ecpc/core.hpp"

#include <optional>
#include <string_view>

namespace ecpc {

enum class Family { gaussian, binomial, cox };

inline std::string_view to_string(Family f) {
    switch (f) {
    case Family::gaussian: return "gaussian";
    case Family::binomial: return "binomial";
    case Family::cox: return "cox";
    }
    return "unknown";
}

inline Family family_from_string(std::string_view s) {
    if (s == "gaussian" || s == "linear") return Family::gaussian;
    if (s == "binomial" || s == "logistic") return Family::binomial;
    if (s == "cox" || s == "survival") return Family::cox;
    throw InputError("unknown family '" + std::string(s) + "'");
}

/// Response payload tagged with its family.
///
/// gaussian: real y and an optional noise variance; binomial: 0/1 labels;
/// cox: positive times with 0/1 event indicators.
class Response {
public:
    static Response gaussian(Vector y, std::optional<double> sigma2 = std::nullopt) {
        if (sigma2 && !(*sigma2 > 0.0)) throw InputError("gaussian noise variance must be positive");
        Response r(Family::gaussian);
        r.y_ = std::move(y);
        r.sigma2_ = sigma2;
        r.check_finite(r.y_, "response");
        return r;
    }

    static Response binomial(Vector y) {
        Response r(Family::binomial);
        for (Index i = 0; i < y.size(); ++i)
            if (y[i] != 0.0 && y[i] != 1.0)
                throw InputError("binomial response must be 0/1; row " + std::to_string(i + 1) + " has " + std::to_string(y[i]));
        r.y_ = std::move(y);
        return r;
    }

    static Response cox(Vector time, Vector status) {
        if (time.size() != status.size()) throw InputError("survival time and status lengths differ");
        Response r(Family::cox);
        for (Index i = 0; i < time.size(); ++i) {
            if (!(time[i] > 0.0) || !std::isfinite(time[i]))
                throw InputError("survival times must be positive; row " + std::to_string(i + 1));
            if (status[i] != 0.0 && status[i] != 1.0)
                throw InputError("survival status must be 0/1; row " + std::to_string(i + 1));
        }
        r.time_ = std::move(time);
        r.status_ = std::move(status);
        return r;
    }

    [[nodiscard]] Family family() const noexcept { return family_; }
    [[nodiscard]] Index n() const noexcept { return family_ == Family::cox ? time_.size() : y_.size(); }
    [[nodiscard]] const Vector& y() const noexcept { return y_; }
    [[nodiscard]] const Vector& time() const noexcept { return time_; }
    [[nodiscard]] const Vector& status() const noexcept { return status_; }
    [[nodiscard]] std::optional<double> sigma2() const noexcept { return sigma2_; }

    [[nodiscard]] Response with_sigma2(double sigma2) const {
        if (family_ != Family::gaussian) return *this;
        return gaussian(y_, sigma2);
    }

    [[nodiscard]] Response subset(const IndexSet& rows) const {
        switch (family_) {
        case Family::gaussian: return gaussian(detail::select(y_, rows), sigma2_);
        case Family::binomial: return binomial(detail::select(y_, rows));
        case Family::cox: return cox(detail::select(time_, rows), detail::select(status_, rows));
        }
        return *this;
    }

    /// Stratum label for fold assignment: class for binomial, status for cox.
    [[nodiscard]] int stratum(Index i) const {
        switch (family_) {
        case Family::binomial: return static_cast<int>(y_[i]);
        case Family::cox: return static_cast<int>(status_[i]);
        default: return 0;
        }
    }

private:
    explicit Response(Family f) : family_(f) {}

    static void check_finite(const Vector& v, const char* what) {
        for (Index i = 0; i < v.size(); ++i)
            if (!std::isfinite(v[i])) throw InputError(std::string(what) + " has a non-finite value at row " + std::to_string(i + 1));
    }

    Family family_;
    Vector y_;
    Vector time_;
    Vector status_;
    std::optional<double> sigma2_;
};

} // namespace ecpc

#pragma once

// Synchrony metrics between two respiration traces.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace breathsync {

enum class AnalysisErrorCode { NoOverlap, ConstantSeries, TooShort, InvalidInput };

constexpr std::string_view to_string(AnalysisErrorCode c) noexcept {
    switch (c) {
    case AnalysisErrorCode::NoOverlap: return "NoOverlap";
    case AnalysisErrorCode::ConstantSeries: return "ConstantSeries";
    case AnalysisErrorCode::TooShort: return "TooShort";
    case AnalysisErrorCode::InvalidInput: return "InvalidInput";
    }
    return "Unknown";
}

class AnalysisError : public std::runtime_error {
public:
    explicit AnalysisError(AnalysisErrorCode code, const std::string& detail = {})
        : std::runtime_error(std::string(to_string(code)) + (detail.empty() ? "" : ": " + detail)),
          code_(code) {}
    AnalysisErrorCode code() const noexcept { return code_; }

private:
    AnalysisErrorCode code_;
};

struct TimedValue {
    double t_ms = 0.0;
    double value = 0.0;
};

struct AlignedPair {
    std::vector<double> t_ms;
    std::vector<double> x;
    std::vector<double> y;

    double step_ms() const { return t_ms.size() >= 2 ? t_ms[1] - t_ms[0] : 0.0; }
    std::size_t size() const noexcept { return t_ms.size(); }
};

namespace detail {

inline void check_series(std::span<const TimedValue> s, const char* name) {
    if (s.size() < 2) throw AnalysisError(AnalysisErrorCode::InvalidInput, std::string(name) + " needs >= 2 samples");
    for (std::size_t i = 1; i < s.size(); ++i) {
        if (!(s[i].t_ms > s[i - 1].t_ms)) {
            throw AnalysisError(AnalysisErrorCode::InvalidInput, std::string(name) + " timestamps not increasing");
        }
    }
}

/// Linear interpolation; `cursor` advances monotonically across calls.
inline double interpolate(std::span<const TimedValue> s, double t, std::size_t& cursor) {
    while (cursor + 1 < s.size() && s[cursor + 1].t_ms <= t) ++cursor;
    if (cursor + 1 >= s.size() || s[cursor].t_ms == t) return s[cursor].value;
    const auto& a = s[cursor];
    const auto& b = s[cursor + 1];
    const double frac = (t - a.t_ms) / (b.t_ms - a.t_ms);
    return a.value + frac * (b.value - a.value);
}

} // namespace detail

/// Linear interpolation of both series onto a common uniform grid spanning
/// their overlap.
inline AlignedPair resample_align(std::span<const TimedValue> x, std::span<const TimedValue> y,
                                  double rate_hz = 100.0) {
    detail::check_series(x, "x");
    detail::check_series(y, "y");
    if (!(rate_hz > 0.0)) throw AnalysisError(AnalysisErrorCode::InvalidInput, "rate must be positive");
    const double start = std::max(x.front().t_ms, y.front().t_ms);
    const double end = std::min(x.back().t_ms, y.back().t_ms);
    const double step = 1000.0 / rate_hz;
    if (end - start < step) throw AnalysisError(AnalysisErrorCode::NoOverlap);

    const auto n = static_cast<std::size_t>(std::floor((end - start) / step + 1e-9)) + 1;
    AlignedPair out;
    out.t_ms.reserve(n);
    out.x.reserve(n);
    out.y.reserve(n);
    std::size_t cx = 0, cy = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const double t = start + static_cast<double>(i) * step;
        out.t_ms.push_back(t);
        out.x.push_back(detail::interpolate(x, t, cx));
        out.y.push_back(detail::interpolate(y, t, cy));
    }
    return out;
}

/// Sample Pearson correlation, two-pass (means first, then centered sums).
inline double pearson(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size() || x.size() < 2) {
        throw AnalysisError(AnalysisErrorCode::InvalidInput, "pearson needs equal lengths >= 2");
    }
    const double n = static_cast<double>(x.size());
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= n;
    my /= n;
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double dx = x[i] - mx;
        const double dy = y[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if (sxx == 0.0 || syy == 0.0) throw AnalysisError(AnalysisErrorCode::ConstantSeries);
    return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

/// Pearson r of x[i] against y[i + shift] over their overlap; nullopt when
/// the overlap is shorter than 2 or either side is constant there.
inline std::optional<double> shifted_pearson(std::span<const double> x, std::span<const double> y,
                                             long shift) {
    const auto n = static_cast<long>(std::min(x.size(), y.size()));
    const long lo = std::max(0L, -shift);
    const long hi = std::min(n, n - shift);
    if (hi - lo < 2) return std::nullopt;
    try {
        return pearson(x.subspan(static_cast<std::size_t>(lo), static_cast<std::size_t>(hi - lo)),
                       y.subspan(static_cast<std::size_t>(lo + shift), static_cast<std::size_t>(hi - lo)));
    } catch (const AnalysisError&) {
        return std::nullopt;
    }
}

/// Correlations closer than this to the maximum count as ties.
inline constexpr double kLagTieTolerance = 1e-9;

/// Delay of y relative to x in ms (positive when y lags), chosen as the
/// integer-sample shift with maximal Pearson r over the overlap within
/// +/- max_lag_ms. Ties go to the smaller |lag|, then to the positive one.
inline double estimate_lag(const AlignedPair& pair, double max_lag_ms = 5000.0) {
    if (pair.size() < 2) throw AnalysisError(AnalysisErrorCode::InvalidInput, "pair too short");
    const std::span<const double> x = pair.x;
    const std::span<const double> y = pair.y;
    const double step = pair.step_ms();
    const auto n = static_cast<long>(pair.size());
    const long max_shift = std::min(static_cast<long>(std::floor(max_lag_ms / step + 1e-9)), n - 2);

    std::vector<std::optional<double>> score(static_cast<std::size_t>(2 * max_shift + 1));
    double best = -2.0;
    for (long s = -max_shift; s <= max_shift; ++s) {
        const auto r = shifted_pearson(x, y, s);
        score[static_cast<std::size_t>(s + max_shift)] = r;
        if (r) best = std::max(best, *r);
    }
    if (best < -1.5) throw AnalysisError(AnalysisErrorCode::ConstantSeries);

    // Walk outward from zero; the first shift within tolerance of the best wins.
    for (long a = 0; a <= max_shift; ++a) {
        for (long s : {a, -a}) {
            const auto& r = score[static_cast<std::size_t>(s + max_shift)];
            if (r && *r >= best - kLagTieTolerance) return static_cast<double>(s) * step;
        }
    }
    return 0.0;
}

struct WindowScore {
    double start_ms = 0.0;
    double end_ms = 0.0;
    double r = 0.0;
    bool valid = false;  // false when a window side is constant
};

struct SectionOptions {
    double window_ms = 30'000.0;
    double step_ms = 1000.0;
    double threshold = 0.6;
    bool lag_compensate = true;
    double max_lag_ms = 5000.0;
};

/// Pearson r in sliding windows after shifting y by the global lag.
inline std::vector<WindowScore> window_scores(const AlignedPair& pair, double lag_ms,
                                              const SectionOptions& opt = {}) {
    const double step = pair.step_ms();
    const long n = static_cast<long>(pair.size());
    const long shift = std::lround(lag_ms / step);
    const long win = std::lround(opt.window_ms / step);
    const long hop = std::max(1L, std::lround(opt.step_ms / step));
    std::vector<WindowScore> out;
    for (long s = 0; s + win <= n; s += hop) {
        WindowScore w;
        w.start_ms = pair.t_ms[static_cast<std::size_t>(s)];
        w.end_ms = pair.t_ms[static_cast<std::size_t>(s + win - 1)];
        // x indices [s, s+win) against y indices shifted by `shift`, clipped to the pair.
        const long lo = std::max(s, -shift);
        const long hi = std::min(s + win, n - shift);
        if (hi - lo >= 2) {
            std::span<const double> xs(pair.x.data() + lo, static_cast<std::size_t>(hi - lo));
            std::span<const double> ys(pair.y.data() + lo + shift, static_cast<std::size_t>(hi - lo));
            try {
                w.r = pearson(xs, ys);
                w.valid = true;
            } catch (const AnalysisError&) {
            }
        }
        out.push_back(w);
    }
    return out;
}

/// Longest run of qualifying windows. Its bounds run from the centre of the
/// first window to the centre of the last, extended to the trace edge when
/// the run touches the first or last window.
inline std::optional<std::pair<double, double>> section_from_windows(const AlignedPair& pair,
                                                                     std::span<const WindowScore> windows,
                                                                     double threshold) {
    std::size_t best_begin = 0, best_len = 0;
    for (std::size_t i = 0; i < windows.size();) {
        if (!(windows[i].valid && windows[i].r >= threshold)) {
            ++i;
            continue;
        }
        std::size_t j = i;
        while (j < windows.size() && windows[j].valid && windows[j].r >= threshold) ++j;
        if (j - i > best_len) {
            best_begin = i;
            best_len = j - i;
        }
        i = j;
    }
    if (best_len == 0) return std::nullopt;
    const auto& first = windows[best_begin];
    const auto& last = windows[best_begin + best_len - 1];
    const double start = best_begin == 0 ? pair.t_ms.front() : (first.start_ms + first.end_ms) / 2.0;
    const double end = best_begin + best_len == windows.size() ? pair.t_ms.back() : (last.start_ms + last.end_ms) / 2.0;
    return std::pair{start, end};
}

inline std::optional<std::pair<double, double>> find_synchronized_section(const AlignedPair& pair,
                                                                          const SectionOptions& opt = {}) {
    if (pair.size() < 2 || pair.t_ms.back() - pair.t_ms.front() + pair.step_ms() < opt.window_ms - 1e-9) {
        throw AnalysisError(AnalysisErrorCode::TooShort);
    }
    const double lag = opt.lag_compensate ? estimate_lag(pair, opt.max_lag_ms) : 0.0;
    const auto windows = window_scores(pair, lag, opt);
    return section_from_windows(pair, windows, opt.threshold);
}

struct SyncReport {
    double pearson_r = 0.0;      // lag-compensated unless disabled
    double pearson_r_raw = 0.0;  // zero-lag
    double lag_ms = 0.0;
    std::optional<std::pair<double, double>> section;
    std::vector<WindowScore> windows;
};

struct AnalysisOptions {
    SectionOptions section;
    /// Restrict the headline r to the trailing span of this length (0 = all).
    double tail_ms = 0.0;
};

inline SyncReport analyze_sync(const AlignedPair& pair, const AnalysisOptions& opt = {}) {
    SyncReport rep;
    rep.lag_ms = opt.section.lag_compensate ? estimate_lag(pair, opt.section.max_lag_ms) : 0.0;

    std::size_t first = 0;
    if (opt.tail_ms > 0.0) {
        const double from = pair.t_ms.back() - opt.tail_ms;
        while (first < pair.size() && pair.t_ms[first] < from - 1e-9) ++first;
    }
    std::span<const double> xs(pair.x.data() + first, pair.size() - first);
    std::span<const double> ys(pair.y.data() + first, pair.size() - first);
    rep.pearson_r_raw = pearson(xs, ys);
    const long shift = std::lround(rep.lag_ms / pair.step_ms());
    const auto lagged = shifted_pearson(xs, ys, shift);
    if (!lagged) throw AnalysisError(AnalysisErrorCode::ConstantSeries);
    rep.pearson_r = *lagged;

    const double span_ms = pair.t_ms.back() - pair.t_ms.front() + pair.step_ms();
    if (span_ms >= opt.section.window_ms - 1e-9) {
        rep.windows = window_scores(pair, rep.lag_ms, opt.section);
        rep.section = section_from_windows(pair, rep.windows, opt.section.threshold);
    }
    return rep;
}

} // namespace breathsync

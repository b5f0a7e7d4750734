#pragma once

// Dual-IMU respiration front end: common-mode cancellation between the
// sternum and back accelerometers, a biquad low-pass, and a streaming
// extremum detector that turns the filtered signal into phase onsets.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "breathsync/error.hpp"

namespace breathsync {

/// One timestamped sample from the front (sternum) and back IMUs.
/// Only the z axes feed the pipeline; x/y are carried for ingestion.
struct ImuFramePair {
    std::uint64_t t_ms = 0;
    double ax_front = 0.0;
    double ay_front = 0.0;
    double az_front = 0.0;
    double ax_back = 0.0;
    double ay_back = 0.0;
    double az_back = 0.0;
};

struct RespirationSample {
    std::uint64_t t_ms = 0;
    double az_raw = 0.0;  // front minus back, exactly
    double az_filt = 0.0;
};

enum class PhaseKind : std::uint8_t { Inspiration, Expiration };

constexpr PhaseKind opposite(PhaseKind k) noexcept {
    return k == PhaseKind::Inspiration ? PhaseKind::Expiration : PhaseKind::Inspiration;
}

/// Onset of an inspiration or expiration phase. `kind` names the phase that
/// starts at `t_ms`.
struct PhaseEvent {
    PhaseKind kind = PhaseKind::Inspiration;
    std::uint64_t t_ms = 0;
    double depth = 1.0;
    std::optional<std::uint64_t> prev_phase_duration_ms;
    /// Sample time at which the extremum was confirmed; the difference to
    /// `t_ms` is the detector's emission latency for this event.
    std::uint64_t confirmed_t_ms = 0;

    std::uint64_t latency_ms() const noexcept { return confirmed_t_ms - t_ms; }
};

inline constexpr double kDefaultSampleRateHz = 100.0;
inline constexpr double kDefaultExpectedDurationMs = 2000.0;
inline constexpr std::uint64_t kDepthWindowMs = 60'000;
inline constexpr std::size_t kDurationRingSize = 3;

// ---------------------------------------------------------------------------
// Channel differencing

/// a_z = a_z,front - a_z,back. Throws StreamError on non-finite input.
inline double difference_channels(const ImuFramePair& frame) {
    const double values[] = {frame.ax_front, frame.ay_front, frame.az_front,
                             frame.ax_back,  frame.ay_back,  frame.az_back};
    for (double v : values) {
        if (!std::isfinite(v)) {
            throw StreamError("non-finite acceleration at t_ms=" + std::to_string(frame.t_ms),
                              frame.t_ms);
        }
    }
    return frame.az_front - frame.az_back;
}

// ---------------------------------------------------------------------------
// Low-pass

/// Normalized second-order section, a0 == 1.
struct BiquadCoefficients {
    double b0 = 1.0, b1 = 0.0, b2 = 0.0;
    double a1 = 0.0, a2 = 0.0;

    /// Bilinear-transform low-pass (RBJ cookbook form).
    static BiquadCoefficients lowpass(double sample_rate_hz, double cutoff_hz, double q) {
        if (!(sample_rate_hz > 0.0) || !(cutoff_hz > 0.0) || !(q > 0.0) ||
            cutoff_hz >= sample_rate_hz / 2.0) {
            throw ParameterError("invalid low-pass design parameters");
        }
        const double w0 = 2.0 * std::numbers::pi * cutoff_hz / sample_rate_hz;
        const double cw = std::cos(w0);
        const double alpha = std::sin(w0) / (2.0 * q);
        const double a0 = 1.0 + alpha;
        BiquadCoefficients c;
        c.b0 = (1.0 - cw) / 2.0 / a0;
        c.b1 = (1.0 - cw) / a0;
        c.b2 = c.b0;
        c.a1 = -2.0 * cw / a0;
        c.a2 = (1.0 - alpha) / a0;
        return c;
    }
};

/// Transposed direct form II biquad with zero-initialized state.
class Biquad {
public:
    Biquad() = default;
    explicit Biquad(const BiquadCoefficients& c) : c_(c) {}

    double process(double x) noexcept {
        const double y = c_.b0 * x + s1_;
        s1_ = c_.b1 * x - c_.a1 * y + s2_;
        s2_ = c_.b2 * x - c_.a2 * y;
        return y;
    }

    void reset() noexcept { s1_ = s2_ = 0.0; }
    const BiquadCoefficients& coefficients() const noexcept { return c_; }

private:
    BiquadCoefficients c_;
    double s1_ = 0.0;
    double s2_ = 0.0;
};

struct LowpassConfig {
    double sample_rate_hz = kDefaultSampleRateHz;
    double cutoff_hz = 1.0;
    double q = 0.707;
};

inline void validate(const LowpassConfig& cfg) {
    if (!(cfg.sample_rate_hz >= 20.0)) {
        throw ParameterError("low-pass sample rate must be at least 20 Hz");
    }
}

/// Batch low-pass over a uniformly sampled stream, fresh filter state.
inline std::vector<double> lowpass_filter(std::span<const double> samples, double sample_rate_hz) {
    LowpassConfig cfg;
    cfg.sample_rate_hz = sample_rate_hz;
    validate(cfg);
    Biquad filter(BiquadCoefficients::lowpass(cfg.sample_rate_hz, cfg.cutoff_hz, cfg.q));
    std::vector<double> out;
    out.reserve(samples.size());
    for (double x : samples) out.push_back(filter.process(x));
    return out;
}

/// Streaming front/back difference plus low-pass, with timestamp checks.
class RespirationFrontEnd {
public:
    explicit RespirationFrontEnd(LowpassConfig cfg = {})
        : cfg_((validate(cfg), cfg)),
          filter_(BiquadCoefficients::lowpass(cfg.sample_rate_hz, cfg.cutoff_hz, cfg.q)) {}

    RespirationSample process(const ImuFramePair& frame) {
        const double raw = difference_channels(frame);
        if (last_t_) {
            if (frame.t_ms <= *last_t_) {
                throw StreamError("timestamps not strictly increasing at t_ms=" +
                                      std::to_string(frame.t_ms),
                                  frame.t_ms);
            }
            const double nominal = 1000.0 / cfg_.sample_rate_hz;
            const double dt = static_cast<double>(frame.t_ms - *last_t_);
            if (std::abs(dt - nominal) > 0.1 * nominal + 1e-9) {
                throw StreamError("sampling interval " + std::to_string(dt) +
                                      " ms outside tolerance at t_ms=" + std::to_string(frame.t_ms),
                                  frame.t_ms);
            }
        }
        last_t_ = frame.t_ms;
        return {frame.t_ms, raw, filter_.process(raw)};
    }

    const LowpassConfig& config() const noexcept { return cfg_; }

private:
    LowpassConfig cfg_;
    Biquad filter_;
    std::optional<std::uint64_t> last_t_;
};

// ---------------------------------------------------------------------------
// Breath tracking

/// Linear-interpolated percentile (closest-rank interpolation, p in [0,1]).
inline double percentile(std::vector<double> values, double p) {
    if (values.empty()) throw ParameterError("percentile of empty set");
    std::sort(values.begin(), values.end());
    const double pos = p * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, values.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return values[lo] + frac * (values[hi] - values[lo]);
}

/// Per-stream state: recent phase durations (for the envelope time constant)
/// and a rolling window of peak-to-trough amplitudes (for depth calibration).
class BreathTracker {
public:
    struct Amplitude {
        std::uint64_t t_ms;
        double value;
    };

    void record_phase(PhaseKind kind, std::uint64_t duration_ms) {
        if (duration_ms == 0) return;
        auto& ring = ring_for(kind);
        ring.push_back(duration_ms);
        if (ring.size() > kDurationRingSize) ring.pop_front();
    }

    void record_amplitude(std::uint64_t t_ms, double amplitude) {
        amplitudes_.push_back({t_ms, amplitude});
        while (!amplitudes_.empty() && amplitudes_.front().t_ms + kDepthWindowMs < t_ms) {
            amplitudes_.pop_front();
        }
    }

    /// P95 of the amplitude window, if any cycle has completed.
    std::optional<double> reference_amplitude() const {
        if (amplitudes_.empty()) return std::nullopt;
        std::vector<double> v;
        v.reserve(amplitudes_.size());
        for (const auto& a : amplitudes_) v.push_back(a.value);
        return percentile(std::move(v), 0.95);
    }

    const std::deque<std::uint64_t>& durations(PhaseKind kind) const {
        return kind == PhaseKind::Inspiration ? insp_ : exp_;
    }
    const std::deque<Amplitude>& amplitudes() const noexcept { return amplitudes_; }

    std::optional<PhaseKind> current_phase;
    std::optional<std::uint64_t> phase_start_ms;

private:
    std::deque<std::uint64_t>& ring_for(PhaseKind kind) {
        return kind == PhaseKind::Inspiration ? insp_ : exp_;
    }

    std::deque<std::uint64_t> insp_;
    std::deque<std::uint64_t> exp_;
    std::deque<Amplitude> amplitudes_;
};

/// (peak - trough) relative to the window's P95, clamped to [0,1];
/// 1.0 before any cycle has been recorded.
inline double estimate_depth(double peak, double trough, const BreathTracker& tracker) {
    if (peak < trough) throw ParameterError("estimate_depth requires peak >= trough");
    const auto ref = tracker.reference_amplitude();
    if (!ref || !(*ref > 0.0)) return 1.0;
    return std::clamp((peak - trough) / *ref, 0.0, 1.0);
}

/// Median of the last three completed phases of `kind`; 2000 ms if none.
inline double estimate_expected_duration(const BreathTracker& tracker, PhaseKind kind) {
    const auto& ring = tracker.durations(kind);
    if (ring.empty()) return kDefaultExpectedDurationMs;
    std::vector<std::uint64_t> v(ring.begin(), ring.end());
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    if (n % 2 == 1) return static_cast<double>(v[n / 2]);
    return (static_cast<double>(v[n / 2 - 1]) + static_cast<double>(v[n / 2])) / 2.0;
}

// ---------------------------------------------------------------------------
// Phase detection

struct DetectorConfig {
    double prominence_fraction = 0.2;
    double prominence_floor = 0.02;  // m/s^2
    std::uint64_t refractory_ms = 700;
    /// Inspiration starts at a local minimum of a_z when true, at a local
    /// maximum otherwise.
    bool inspiration_at_minimum = true;
};

/// Hysteresis extremum search. A candidate maximum (minimum) is confirmed
/// once the signal has fallen (risen) from it by the prominence threshold.
/// Before the first confirmation both directions are tracked and a candidate
/// also needs an approach of at least one threshold; no extremum is reported
/// within one refractory period of the first sample.
class PhaseDetector {
public:
    explicit PhaseDetector(DetectorConfig cfg = {}) : cfg_(cfg) {}

    std::optional<PhaseEvent> push(const RespirationSample& s, BreathTracker& tracker) {
        const double v = s.az_filt;
        const std::uint64_t t = s.t_ms;
        if (!std::isfinite(v)) throw StreamError("non-finite filtered sample", t);

        if (!started_) {
            started_ = true;
            start_ms_ = t;
            max_ = min_ = {v, t};
            span_lo_ = span_hi_ = v;
            return std::nullopt;
        }
        span_lo_ = std::min(span_lo_, v);
        span_hi_ = std::max(span_hi_, v);

        if (mode_ != Mode::SeekMin && v > max_.value) max_ = {v, t};
        if (mode_ != Mode::SeekMax && v < min_.value) min_ = {v, t};

        const double delta = threshold(tracker);
        switch (mode_) {
        case Mode::Undetermined:
            if (max_.value - min_.value < delta) return std::nullopt;
            if (max_.t_ms > min_.t_ms && v <= max_.value - delta) return confirm(true, v, t, tracker);
            if (min_.t_ms > max_.t_ms && v >= min_.value + delta) return confirm(false, v, t, tracker);
            return std::nullopt;
        case Mode::SeekMax:
            if (v <= max_.value - delta) return confirm(true, v, t, tracker);
            return std::nullopt;
        case Mode::SeekMin:
            if (v >= min_.value + delta) return confirm(false, v, t, tracker);
            return std::nullopt;
        }
        return std::nullopt;
    }

    /// Prominence threshold currently in force.
    double threshold(const BreathTracker& tracker) const {
        // Until a cycle completes, the span seen so far stands in for the
        // calibrated peak-to-trough amplitude.
        const double reference = tracker.reference_amplitude().value_or(span_hi_ - span_lo_);
        return std::max(cfg_.prominence_floor, cfg_.prominence_fraction * reference);
    }

    const DetectorConfig& config() const noexcept { return cfg_; }

private:
    enum class Mode { Undetermined, SeekMax, SeekMin };
    struct Extremum {
        double value;
        std::uint64_t t_ms;
    };

    std::optional<PhaseEvent> confirm(bool is_max, double v, std::uint64_t t, BreathTracker& tracker) {
        const Extremum ext = is_max ? max_ : min_;
        // The stream start anchors the refractory period like an event would.
        const std::uint64_t anchor = has_last_ ? last_.t_ms : start_ms_;
        if (ext.t_ms < anchor + cfg_.refractory_ms) {
            // Suppressed: restart the candidate search in the same direction.
            if (is_max) max_ = {v, t};
            else min_ = {v, t};
            return std::nullopt;
        }

        PhaseEvent ev;
        ev.kind = (is_max == cfg_.inspiration_at_minimum) ? PhaseKind::Expiration
                                                          : PhaseKind::Inspiration;
        ev.t_ms = ext.t_ms;
        ev.confirmed_t_ms = t;
        if (has_last_) {
            // Noise right after a suppressed candidate can leave the pair inverted.
            const double peak = std::max(ext.value, last_.value);
            const double trough = std::min(ext.value, last_.value);
            ev.depth = estimate_depth(peak, trough, tracker);
            tracker.record_amplitude(ext.t_ms, peak - trough);
            ev.prev_phase_duration_ms = ext.t_ms - last_.t_ms;
            tracker.record_phase(opposite(ev.kind), *ev.prev_phase_duration_ms);
        } else {
            ev.depth = 1.0;
        }
        tracker.current_phase = ev.kind;
        tracker.phase_start_ms = ev.t_ms;

        last_ = ext;
        has_last_ = true;
        if (is_max) {
            mode_ = Mode::SeekMin;
            min_ = {v, t};
        } else {
            mode_ = Mode::SeekMax;
            max_ = {v, t};
        }
        return ev;
    }

    DetectorConfig cfg_;
    Mode mode_ = Mode::Undetermined;
    bool started_ = false;
    std::uint64_t start_ms_ = 0;
    Extremum max_{0.0, 0};
    Extremum min_{0.0, 0};
    double span_lo_ = 0.0;
    double span_hi_ = 0.0;
    bool has_last_ = false;
    Extremum last_{0.0, 0};
};

inline std::vector<PhaseEvent> detect_phase_events(std::span<const RespirationSample> samples,
                                                   BreathTracker& tracker,
                                                   DetectorConfig cfg = {}) {
    PhaseDetector detector(cfg);
    std::vector<PhaseEvent> events;
    for (const auto& s : samples) {
        if (auto ev = detector.push(s, tracker)) events.push_back(*ev);
    }
    return events;
}

/// Front end plus detector for one wearer.
class RespirationPipeline {
public:
    explicit RespirationPipeline(LowpassConfig lp = {}, DetectorConfig det = {})
        : front_(lp), detector_(det) {}

    struct Step {
        RespirationSample sample;
        std::optional<PhaseEvent> event;
    };

    Step process(const ImuFramePair& frame) {
        Step step;
        step.sample = front_.process(frame);
        step.event = detector_.push(step.sample, tracker_);
        return step;
    }

    const BreathTracker& tracker() const noexcept { return tracker_; }

private:
    RespirationFrontEnd front_;
    PhaseDetector detector_;
    BreathTracker tracker_;
};

} // namespace breathsync

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "breathsync/error.hpp"
#include "breathsync/respiration.hpp"

namespace breathsync {

/// Breath-to-vibration mapping. Wire values 0/1/2.
enum class Pattern : std::uint8_t { Coupled = 0, Inversed = 1, Discrete = 2 };

constexpr std::string_view to_string(Pattern p) noexcept {
    switch (p) {
    case Pattern::Coupled: return "coupled";
    case Pattern::Inversed: return "inversed";
    case Pattern::Discrete: return "discrete";
    }
    return "unknown";
}

inline std::optional<Pattern> parse_pattern(std::string_view name) noexcept {
    if (name == "coupled") return Pattern::Coupled;
    if (name == "inversed") return Pattern::Inversed;
    if (name == "discrete") return Pattern::Discrete;
    return std::nullopt;
}

// Growth base and normalizer of the exponential envelope: A spans
// (base^0 - 1)/span = 0 to (base^1 - 1)/span = 1.
inline constexpr double kEnvelopeBase = 14.0;
inline constexpr double kEnvelopeSpan = 13.0;

/// Relative intensity in percent: ((14^(t/T) - 1) / 13) * 100 on [0, T],
/// saturating at 100 beyond T.
inline double envelope_amplitude(double t_ms, double period_ms) {
    if (!(period_ms > 0.0) || !std::isfinite(period_ms)) {
        throw ParameterError("envelope period must be positive");
    }
    if (!(t_ms >= 0.0)) throw ParameterError("envelope time must be non-negative");
    if (t_ms >= period_ms) return 100.0;
    // expm1 keeps full relative precision near t = 0.
    return std::expm1((t_ms / period_ms) * std::log(kEnvelopeBase)) / kEnvelopeSpan * 100.0;
}

/// Inverse of envelope_amplitude on [0, 100]: the fraction t/T that yields `level`.
inline double envelope_inverse_fraction(double level) {
    const double a = std::clamp(level, 0.0, 100.0) / 100.0;
    return std::log1p(kEnvelopeSpan * a) / std::log(kEnvelopeBase);
}

struct EnvelopeParams {
    Pattern pattern = Pattern::Coupled;
    double period_ms = kDefaultExpectedDurationMs;  // expected duration of the current phase
    double depth = 1.0;
    PhaseKind phase = PhaseKind::Inspiration;
};

inline void validate(const EnvelopeParams& p) {
    if (!(p.period_ms > 0.0)) throw ParameterError("envelope period must be positive");
    if (!(p.depth >= 0.0 && p.depth <= 1.0)) throw ParameterError("depth must lie in [0,1]");
    if (static_cast<std::uint8_t>(p.pattern) > 2) throw ParameterError("unknown pattern");
}

/// Level in percent at `t_ms` after the onset of `params.phase`.
inline double envelope_for_phase(const EnvelopeParams& params, double t_ms) {
    validate(params);
    if (!(t_ms >= 0.0)) throw ParameterError("envelope time must be non-negative");
    const double T = params.period_ms;
    const auto rising = [&] { return envelope_amplitude(t_ms, T); };
    const auto falling = [&] { return envelope_amplitude(T - std::min(t_ms, T), T); };

    double level = 0.0;
    switch (params.pattern) {
    case Pattern::Coupled:
        level = params.phase == PhaseKind::Inspiration ? rising() : falling();
        break;
    case Pattern::Inversed:
        level = params.phase == PhaseKind::Inspiration ? falling() : rising();
        break;
    case Pattern::Discrete:
        level = params.phase == PhaseKind::Inspiration ? rising() : 0.0;
        break;
    }
    return std::clamp(params.depth * level, 0.0, 100.0);
}

/// Round-half-up to an integer percent.
inline std::uint8_t quantize_level(double level) {
    if (!(level >= 0.0 && level <= 100.0)) throw ParameterError("level outside [0,100]");
    return static_cast<std::uint8_t>(std::floor(level + 0.5));
}

/// Live envelope for one belt: follows the wearer's phase events and yields
/// the current level on demand. Outputs 0 until the first event.
class EnvelopeGenerator {
public:
    explicit EnvelopeGenerator(Pattern pattern) : pattern_(pattern) {}

    void on_event(const PhaseEvent& ev, const BreathTracker& tracker) {
        params_ = EnvelopeParams{pattern_, estimate_expected_duration(tracker, ev.kind),
                                 std::clamp(ev.depth, 0.0, 1.0), ev.kind};
        onset_ms_ = ev.t_ms;
    }

    /// Level at absolute time `t_ms`; elapsed time is measured from the
    /// detected onset, not from the confirmation instant.
    double level_at(std::uint64_t t_ms) const {
        if (!params_) return 0.0;
        const double elapsed = t_ms > onset_ms_ ? static_cast<double>(t_ms - onset_ms_) : 0.0;
        return envelope_for_phase(*params_, elapsed);
    }

    Pattern pattern() const noexcept { return pattern_; }
    const std::optional<EnvelopeParams>& params() const noexcept { return params_; }

private:
    Pattern pattern_;
    std::optional<EnvelopeParams> params_;
    std::uint64_t onset_ms_ = 0;
};

// ---------------------------------------------------------------------------
// Simulated actuator drive

inline constexpr std::size_t kActuatorChannels = 4;

struct ActuatorConfig {
    double carrier_hz = 200.0;
    std::size_t channels = kActuatorChannels;
    double synth_rate_hz = 2000.0;
    /// Carrier phase at the first synthesized sample. A quarter cycle puts a
    /// sample on every crest when the rate is an integer multiple of the carrier.
    double carrier_phase_rad = std::numbers::pi / 2.0;
};

inline void validate(const ActuatorConfig& cfg) {
    if (!(cfg.carrier_hz > 0.0)) throw ParameterError("carrier frequency must be positive");
    if (!(cfg.synth_rate_hz >= 10.0 * cfg.carrier_hz)) {
        throw ParameterError("synthesis rate must be at least 10x the carrier");
    }
    if (cfg.channels == 0 || cfg.channels > kActuatorChannels) {
        throw ParameterError("channel count must be 1..4");
    }
}

struct EnvelopeSample {
    double t_ms = 0.0;
    double level = 0.0;
};

struct WaveformFrame {
    double t_ms = 0.0;
    std::array<double, kActuatorChannels> drive{};
};

/// Streaming 4-channel carrier synthesizer with zero-order hold of the level.
/// The mask reads left to right: bit 3 drives channel 0, bit 0 channel 3.
class WaveformSynthesizer {
public:
    WaveformSynthesizer(ActuatorConfig cfg, std::uint8_t channel_mask)
        : cfg_((validate(cfg), cfg)), mask_(static_cast<std::uint8_t>(channel_mask & 0x0F)) {}

    /// Sets the held level from `t_ms` onward.
    void set_level(const EnvelopeSample& s) {
        if (!(s.level >= 0.0 && s.level <= 100.0)) throw ParameterError("level outside [0,100]");
        if (started_ && s.t_ms < last_level_t_) {
            throw ParameterError("envelope timestamps must be nondecreasing");
        }
        if (!started_) start_ms_ = s.t_ms;
        started_ = true;
        last_level_t_ = s.t_ms;
        level_ = s.level;
    }

    /// Emits every pending frame with timestamp <= t_ms.
    void render_until(double t_ms, std::vector<WaveformFrame>& out) {
        if (!started_) return;
        for (;;) {
            const double t = frame_time(n_);
            if (t > t_ms + 1e-9) break;
            out.push_back(frame_at(n_, t));
            ++n_;
        }
    }

    const ActuatorConfig& config() const noexcept { return cfg_; }
    std::uint8_t channel_mask() const noexcept { return mask_; }

private:
    double frame_time(std::uint64_t n) const {
        return start_ms_ + static_cast<double>(n) * 1000.0 / cfg_.synth_rate_hz;
    }

    WaveformFrame frame_at(std::uint64_t n, double t) const {
        // Phase from the sample index keeps the carrier free of accumulated drift.
        const double cycles = cfg_.carrier_hz * static_cast<double>(n) / cfg_.synth_rate_hz;
        const double phase = 2.0 * std::numbers::pi * (cycles - std::floor(cycles)) + cfg_.carrier_phase_rad;
        const double carrier = std::sin(phase);
        WaveformFrame f;
        f.t_ms = t;
        for (std::size_t ch = 0; ch < cfg_.channels; ++ch) {
            if (mask_ & (0x8u >> ch)) f.drive[ch] = std::clamp(level_ / 100.0 * carrier, -1.0, 1.0);
        }
        return f;
    }

    ActuatorConfig cfg_;
    std::uint8_t mask_;
    bool started_ = false;
    double start_ms_ = 0.0;
    double last_level_t_ = 0.0;
    double level_ = 0.0;
    std::uint64_t n_ = 0;
};

/// Renders frames covering [levels.front().t_ms, levels.back().t_ms].
inline std::vector<WaveformFrame> synthesize_waveform(std::span<const EnvelopeSample> levels,
                                                      const ActuatorConfig& cfg,
                                                      std::uint8_t channel_mask) {
    WaveformSynthesizer synth(cfg, channel_mask);
    std::vector<WaveformFrame> out;
    for (std::size_t i = 0; i < levels.size(); ++i) {
        // Frames strictly before the next level change use the held level.
        if (i > 0) {
            const double next = levels[i].t_ms;
            synth.render_until(next - 1e-6, out);
        }
        synth.set_level(levels[i]);
    }
    if (!levels.empty()) synth.render_until(levels.back().t_ms, out);
    return out;
}

/// One inspiration followed by one expiration, each lasting `period_ms`,
/// sampled every `step_ms`. Rows with t <= T belong to the inspiration.
inline std::vector<EnvelopeSample> envelope_cycle(Pattern pattern, double period_ms, double depth,
                                                  double step_ms = 20.0) {
    EnvelopeParams p{pattern, period_ms, depth, PhaseKind::Inspiration};
    validate(p);
    if (!(step_ms > 0.0)) throw ParameterError("step must be positive");
    std::vector<EnvelopeSample> rows;
    const auto n = static_cast<std::uint64_t>(std::floor(2.0 * period_ms / step_ms + 1e-9));
    for (std::uint64_t i = 0; i <= n; ++i) {
        const double t = static_cast<double>(i) * step_ms;
        if (t <= period_ms) {
            p.phase = PhaseKind::Inspiration;
            rows.push_back({t, envelope_for_phase(p, t)});
        } else {
            p.phase = PhaseKind::Expiration;
            rows.push_back({t, envelope_for_phase(p, t - period_ms)});
        }
    }
    return rows;
}

} // namespace breathsync

#pragma once

// Synthetic wearers for closed-loop experiments. A leader breathes at its own
// (jittered) pace; a follower is a phase oscillator pulled toward the phase it
// reads off the vibration it receives. Everything runs on a virtual 100 Hz
// clock so a seed fully determines the outcome.

#include <cmath>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <numbers>
#include <optional>
#include <random>
#include <vector>

#include "breathsync/envelope.hpp"
#include "breathsync/error.hpp"
#include "breathsync/protocol.hpp"
#include "breathsync/relay.hpp"
#include "breathsync/respiration.hpp"

namespace breathsync {

inline constexpr double kTwoPi = 2.0 * std::numbers::pi;
inline constexpr double kBodySwayHz = 1.7;
inline constexpr double kNoiseClipSigmas = 6.0;

/// Chest-wall and body-motion model shared by both wearers.
struct BodyParams {
    double depth_amp = 0.3;     // m/s^2, breath term amplitude on the front IMU
    double motion_amp = 0.05;   // m/s^2, common-mode sway on both IMUs
    double noise_sigma = 0.005; // m/s^2, per-channel white noise
    std::uint64_t rng_seed = 1;
};

struct BreatherParams {
    double natural_period_ms = 4000.0;
    double period_jitter_frac = 0.02;  // sigma of the per-cycle period factor
    BodyParams body;
};

struct FollowerParams {
    double coupling_gain = 1.5;  // rad/s
    double natural_period_ms = 5000.0;
    BodyParams body{0.3, 0.05, 0.005, 2};
};

inline void validate(const BodyParams& b) {
    if (!(b.depth_amp >= 0.0) || !(b.motion_amp >= 0.0) || !(b.noise_sigma >= 0.0)) {
        throw ParameterError("body amplitudes and noise must be non-negative");
    }
}

inline void validate(const BreatherParams& p) {
    if (!(p.natural_period_ms >= 2000.0 && p.natural_period_ms <= 10000.0)) {
        throw ParameterError("natural period must lie in [2000, 10000] ms");
    }
    if (!(p.period_jitter_frac >= 0.0)) throw ParameterError("period jitter must be non-negative");
    validate(p.body);
}

inline void validate(const FollowerParams& p) {
    if (!(p.natural_period_ms >= 2000.0 && p.natural_period_ms <= 10000.0)) {
        throw ParameterError("natural period must lie in [2000, 10000] ms");
    }
    if (!(p.coupling_gain >= 0.0)) throw ParameterError("coupling gain must be non-negative");
    validate(p.body);
}

/// Produces dual-IMU frames from a breath term: front = breath + sway + noise,
/// back = sway + noise. Noise is Gaussian clipped at six sigma.
class BodyModel {
public:
    explicit BodyModel(BodyParams p) : p_((validate(p), p)), rng_(p.rng_seed) {}

    ImuFramePair frame(std::uint64_t t_ms, double breath) {
        const double t_s = static_cast<double>(t_ms) / 1000.0;
        const double sway = p_.motion_amp * std::sin(kTwoPi * kBodySwayHz * t_s);
        ImuFramePair f;
        f.t_ms = t_ms;
        f.az_front = breath + sway + noise();
        f.az_back = sway + noise();
        return f;
    }

    const BodyParams& params() const noexcept { return p_; }

private:
    double noise() {
        if (p_.noise_sigma == 0.0) return 0.0;
        for (;;) {
            const double z = normal_(rng_);
            if (std::abs(z) <= kNoiseClipSigmas) return z * p_.noise_sigma;
        }
    }

    BodyParams p_;
    std::mt19937_64 rng_;
    std::normal_distribution<double> normal_{0.0, 1.0};
};

/// Free-running breather; breath term depth_amp * sin(phase). Each cycle's
/// period is drawn as P * (1 + jitter * N(0,1)), floored at P/2.
class LeaderBreather {
public:
    explicit LeaderBreather(BreatherParams p, double rate_hz = kDefaultSampleRateHz)
        : p_((validate(p), p)),
          dt_ms_(1000.0 / rate_hz),
          body_(p.body),
          jitter_rng_(p.body.rng_seed ^ 0x9E3779B97F4A7C15ULL) {
        cycle_period_ms_ = draw_period();
    }

    ImuFramePair next() {
        const auto t = static_cast<std::uint64_t>(std::llround(static_cast<double>(n_) * dt_ms_));
        const ImuFramePair f = body_.frame(t, p_.body.depth_amp * std::sin(phase_));
        ++n_;
        phase_ += kTwoPi * dt_ms_ / cycle_period_ms_;
        if (phase_ >= kTwoPi * static_cast<double>(cycle_ + 1)) {
            ++cycle_;
            cycle_period_ms_ = draw_period();
        }
        return f;
    }

    double phase() const noexcept { return phase_; }

private:
    double draw_period() {
        if (p_.period_jitter_frac == 0.0) return p_.natural_period_ms;
        const double factor = 1.0 + p_.period_jitter_frac * normal_(jitter_rng_);
        return p_.natural_period_ms * std::max(0.5, factor);
    }

    BreatherParams p_;
    double dt_ms_;
    BodyModel body_;
    std::mt19937_64 jitter_rng_;
    std::normal_distribution<double> normal_{0.0, 1.0};
    double phase_ = 0.0;
    double cycle_period_ms_ = 0.0;
    std::uint64_t cycle_ = 0;
    std::uint64_t n_ = 0;
};

inline std::vector<ImuFramePair> gen_leader_frames(const BreatherParams& params, std::uint64_t duration_ms,
                                                   double rate_hz = kDefaultSampleRateHz) {
    LeaderBreather leader(params, rate_hz);
    const auto n = static_cast<std::size_t>(std::floor(static_cast<double>(duration_ms) * rate_hz / 1000.0 + 1e-9));
    std::vector<ImuFramePair> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) out.push_back(leader.next());
    return out;
}

// ---------------------------------------------------------------------------
// Stimulus phase reconstruction

/// Recovers the sender's breathing phase from the received level stream.
/// Phase 0 marks inspiration onset and pi expiration onset; within a phase the
/// level is mapped back through the inverse envelope. A rise in level starts
/// the pattern's rising phase, a fall starts the other one.
class StimulusDecoder {
public:
    void on_level(std::uint64_t t_ms, std::uint8_t level, Pattern pattern) {
        pattern_ = pattern;
        const PhaseKind rising_kind = pattern == Pattern::Inversed ? PhaseKind::Expiration : PhaseKind::Inspiration;
        if (prev_level_) {
            if (level > *prev_level_ && phase_ != rising_kind) {
                begin(rising_kind, prev_t_ms_);
                segment_max_ = level;
            } else if (level < *prev_level_ && phase_ == rising_kind) {
                peak_ = std::max<double>(1.0, segment_max_);
                begin(opposite(rising_kind), prev_t_ms_);
            }
        }
        if (phase_ == rising_kind) segment_max_ = std::max<double>(segment_max_, level);
        prev_level_ = level;
        prev_t_ms_ = t_ms;
    }

    /// Reconstructed phase in [0, 2pi], or nullopt before the first onset.
    std::optional<double> phase_at(std::uint64_t t_ms) const {
        if (!phase_ || !prev_level_) return std::nullopt;
        const PhaseKind rising_kind = pattern_ == Pattern::Inversed ? PhaseKind::Expiration : PhaseKind::Inspiration;
        const double rel = std::min(1.0, static_cast<double>(*prev_level_) / peak_) * 100.0;
        double frac = 0.0;
        if (*phase_ == rising_kind) {
            frac = envelope_inverse_fraction(rel);
        } else if (pattern_ == Pattern::Discrete) {
            // The silent phase carries no level information: advance linearly.
            const double elapsed = t_ms > onset_ms_ ? static_cast<double>(t_ms - onset_ms_) : 0.0;
            frac = std::min(1.0, elapsed / silent_estimate_ms_);
        } else {
            frac = 1.0 - envelope_inverse_fraction(rel);
        }
        const double base = *phase_ == PhaseKind::Inspiration ? 0.0 : std::numbers::pi;
        return base + std::numbers::pi * frac;
    }

    std::optional<PhaseKind> phase_kind() const noexcept { return phase_; }
    double peak_level() const noexcept { return peak_; }

private:
    void begin(PhaseKind kind, std::uint64_t t_ms) {
        if (phase_ && *phase_ == PhaseKind::Expiration && pattern_ == Pattern::Discrete && t_ms > onset_ms_) {
            silent_estimate_ms_ = static_cast<double>(t_ms - onset_ms_);
        }
        phase_ = kind;
        onset_ms_ = t_ms;
    }

    Pattern pattern_ = Pattern::Coupled;
    std::optional<PhaseKind> phase_;
    std::optional<std::uint8_t> prev_level_;
    std::uint64_t prev_t_ms_ = 0;
    std::uint64_t onset_ms_ = 0;
    double segment_max_ = 0.0;
    double peak_ = 100.0;
    double silent_estimate_ms_ = kDefaultExpectedDurationMs;
};

// ---------------------------------------------------------------------------
// Follower oscillator

/// dphi/dt = 2pi/P0 + k sin(phi_stim - phi), in rad/s.
inline double phase_derivative(double phase, double stim_phase, double coupling_gain, double natural_period_ms) {
    return kTwoPi / (natural_period_ms / 1000.0) + coupling_gain * std::sin(stim_phase - phase);
}

struct FollowerState {
    FollowerParams params;
    double phase = 0.0;  // unwrapped; 0 = inspiration onset
    std::uint64_t t_ms = 0;
    StimulusDecoder decoder;
    std::vector<std::uint64_t> cycle_ends_ms;

    explicit FollowerState(FollowerParams p) : params((validate(p), p)) {}

    /// Breath term for the follower's chest: minimum at inspiration onset,
    /// matching the leader's convention.
    double breath_term() const { return -params.body.depth_amp * std::cos(phase); }
};

/// Feeds one received level (if any) and advances the oscillator by dt_ms.
inline double follower_step(FollowerState& s, std::optional<std::uint8_t> received_level, Pattern received_pattern,
                            double dt_ms) {
    if (!(dt_ms > 0.0)) throw ParameterError("dt must be positive");
    if (received_level) s.decoder.on_level(s.t_ms, *received_level, received_pattern);
    const auto stim = s.decoder.phase_at(s.t_ms);
    const double wrapped = s.phase - kTwoPi * std::floor(s.phase / kTwoPi);
    const double rate = stim ? phase_derivative(wrapped, *stim, s.params.coupling_gain, s.params.natural_period_ms)
                             : kTwoPi / (s.params.natural_period_ms / 1000.0);
    const double before = std::floor(s.phase / kTwoPi);
    s.phase += rate * dt_ms / 1000.0;
    s.t_ms += static_cast<std::uint64_t>(std::llround(dt_ms));
    if (std::floor(s.phase / kTwoPi) > before) s.cycle_ends_ms.push_back(s.t_ms);
    return s.phase;
}

/// Start time of the first cycle after which every completed cycle lasts
/// within `tolerance` of `target_period_ms`; nullopt if never.
inline std::optional<std::uint64_t> lock_time_ms(const std::vector<std::uint64_t>& cycle_ends, double target_period_ms,
                                                 double tolerance = 0.05) {
    if (cycle_ends.size() < 2) return std::nullopt;
    std::optional<std::uint64_t> lock;
    for (std::size_t i = 1; i < cycle_ends.size(); ++i) {
        const double period = static_cast<double>(cycle_ends[i] - cycle_ends[i - 1]);
        if (std::abs(period - target_period_ms) <= tolerance * target_period_ms) {
            if (!lock) lock = cycle_ends[i - 1];
        } else {
            lock.reset();
        }
    }
    return lock;
}

// ---------------------------------------------------------------------------
// Closed loop

/// Optional link impairment between relay and belts.
struct LinkShim {
    std::uint64_t delay_ms = 0;
    double loss_probability = 0.0;
    std::uint64_t rng_seed = 7;
};

struct ClosedLoopConfig {
    BreatherParams leader;
    FollowerParams follower;
    Pattern pattern = Pattern::Coupled;
    std::uint64_t duration_ms = 90'000;
    std::uint64_t order_interval_ms = 20;  // 50 Hz amplitude orders
    std::uint8_t channel_mask = 0x0F;
    LinkShim link;
    LowpassConfig lowpass;
    DetectorConfig detector;
    /// Relay session log directory; empty keeps the run in memory only.
    std::filesystem::path log_dir;
};

inline void validate(const ClosedLoopConfig& c) {
    validate(c.leader);
    validate(c.follower);
    if (c.duration_ms == 0) throw ParameterError("duration must be positive");
    if (c.order_interval_ms == 0) throw ParameterError("order interval must be positive");
    if (c.channel_mask >= 16) throw ParameterError("channel mask must be < 16");
    if (!(c.link.loss_probability >= 0.0 && c.link.loss_probability <= 1.0)) {
        throw ParameterError("loss probability must lie in [0,1]");
    }
}

struct ClosedLoopResult {
    std::vector<RespirationSample> leader_trace;
    std::vector<RespirationSample> follower_trace;
    std::vector<PhaseEvent> leader_events;
    std::vector<PhaseEvent> follower_events;
    std::vector<std::uint64_t> follower_cycle_ends_ms;
    std::vector<FrameGapReport> gaps;
    std::filesystem::path log_path;
    SessionCounters relay_counters;
    std::uint64_t orders_sent = 0;
};

/// Leader and follower belts joined through a Pair session on an in-process
/// broker. Both wearers run the full sensing/envelope/protocol chain; only the
/// follower reacts to what it receives.
inline ClosedLoopResult run_closed_loop(const ClosedLoopConfig& cfg) {
    validate(cfg);
    constexpr double dt_ms = 1000.0 / kDefaultSampleRateHz;
    std::uint64_t now = 0;

    Broker broker(Broker::Options{cfg.log_dir, [&now] { return now; }});
    const SessionId session = broker.create_session(RoutingMode::pair());

    struct Pending {
        std::uint64_t due_ms;
        FrameBytes frame;
    };
    std::deque<Pending> to_leader, to_follower;
    std::mt19937_64 link_rng(cfg.link.rng_seed);
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    const auto make_sink = [&](std::deque<Pending>& inbox) {
        return [&, target = &inbox](const FrameBytes& f) {
            if (cfg.link.loss_probability > 0.0 && uni(link_rng) < cfg.link.loss_probability) return;
            target->push_back({now + cfg.link.delay_ms, f});
        };
    };
    const std::uint8_t leader_id = broker.join(session, "leader", make_sink(to_leader));
    const std::uint8_t follower_id = broker.join(session, "follower", make_sink(to_follower));

    LeaderBreather leader(cfg.leader, kDefaultSampleRateHz);
    BodyModel follower_body(cfg.follower.body);
    FollowerState follower(cfg.follower);
    RespirationPipeline leader_sense(cfg.lowpass, cfg.detector);
    RespirationPipeline follower_sense(cfg.lowpass, cfg.detector);
    EnvelopeGenerator leader_env(cfg.pattern);
    EnvelopeGenerator follower_env(cfg.pattern);
    SequenceTracker leader_rx, follower_rx;
    std::uint16_t leader_seq = 0, follower_seq = 0;

    ClosedLoopResult out;
    const auto steps = static_cast<std::size_t>(static_cast<double>(cfg.duration_ms) / dt_ms);
    out.leader_trace.reserve(steps);
    out.follower_trace.reserve(steps);

    const auto send = [&](const EnvelopeGenerator& env, std::uint8_t source, std::uint16_t& seq) {
        AmplitudeOrder o;
        o.source_id = source;
        o.seq = seq++;
        o.timestamp_ms = static_cast<std::uint32_t>(now);
        o.pattern = cfg.pattern;
        o.level = quantize_level(env.level_at(now));
        o.channel_mask = cfg.channel_mask;
        const auto bytes = encode_frame(o);
        broker.route_frame(session, bytes);
        ++out.orders_sent;
    };

    const auto drain = [&](std::deque<Pending>& inbox, SequenceTracker& rx) {
        std::optional<AmplitudeOrder> latest;
        while (!inbox.empty() && inbox.front().due_ms <= now) {
            const auto order = decode_frame(inbox.front().frame);
            inbox.pop_front();
            const auto verdict = rx.track(order.source_id, order.seq);
            if (verdict.gap) out.gaps.push_back(*verdict.gap);
            if (verdict.accepted()) latest = order;
        }
        return latest;
    };

    for (std::size_t i = 0; i < steps; ++i) {
        now = static_cast<std::uint64_t>(std::llround(static_cast<double>(i) * dt_ms));

        const auto l_step = leader_sense.process(leader.next());
        follower.t_ms = now;
        const auto f_step = follower_sense.process(follower_body.frame(now, follower.breath_term()));
        out.leader_trace.push_back(l_step.sample);
        out.follower_trace.push_back(f_step.sample);
        if (l_step.event) {
            leader_env.on_event(*l_step.event, leader_sense.tracker());
            out.leader_events.push_back(*l_step.event);
        }
        if (f_step.event) {
            follower_env.on_event(*f_step.event, follower_sense.tracker());
            out.follower_events.push_back(*f_step.event);
        }

        if (now % cfg.order_interval_ms == 0) {
            send(leader_env, leader_id, leader_seq);
            send(follower_env, follower_id, follower_seq);
        }

        drain(to_leader, leader_rx);  // the leader wears a belt but does not adapt
        const auto received = drain(to_follower, follower_rx);
        follower_step(follower, received ? std::optional<std::uint8_t>(received->level) : std::nullopt,
                      received ? received->pattern : cfg.pattern, dt_ms);
    }

    out.follower_cycle_ends_ms = follower.cycle_ends_ms;
    out.log_path = broker.log_path(session);
    out.relay_counters = broker.counters(session);
    return out;
}

} // namespace breathsync

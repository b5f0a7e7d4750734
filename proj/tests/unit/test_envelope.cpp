#include <catch_amalgamated.hpp>

#include <boost/multiprecision/cpp_bin_float.hpp>

#include <cmath>
#include <random>
#include <vector>

#include "breathsync/envelope.hpp"

using namespace breathsync;
using Catch::Approx;
using big = boost::multiprecision::cpp_bin_float_50;

namespace {

double oracle_amplitude(double t, double T) {
    if (t > T) return 100.0;
    const big r = (boost::multiprecision::pow(big(14), big(t) / big(T)) - 1) / 13 * 100;
    return r.convert_to<double>();
}

double env(Pattern p, PhaseKind k, double T, double depth, double t) {
    return envelope_for_phase(EnvelopeParams{p, T, depth, k}, t);
}

} // namespace

TEST_CASE("envelope_amplitude boundary values") {
    CHECK(envelope_amplitude(0.0, 2000.0) == 0.0);
    CHECK(envelope_amplitude(2000.0, 2000.0) == Approx(100.0).epsilon(1e-15));
    CHECK(envelope_amplitude(4000.0, 2000.0) == 100.0);
    CHECK(envelope_amplitude(1000.0, 2000.0) == Approx(21.0897).margin(1e-3));
    const big half = (boost::multiprecision::sqrt(big(14)) - 1) / 13 * 100;
    CHECK(envelope_amplitude(1000.0, 2000.0) == Approx(half.convert_to<double>()).epsilon(1e-14));
}

TEST_CASE("envelope_amplitude matches the high-precision oracle") {
    for (double T : {250.0, 1000.0, 2000.0, 4321.0, 8000.0}) {
        for (int i = 0; i <= 1000; ++i) {
            const double t = 2.0 * T * i / 1000.0;
            const double want = oracle_amplitude(t, T);
            const double got = envelope_amplitude(t, T);
            if (want == 0.0) REQUIRE(got == 0.0);
            else REQUIRE(std::abs(got - want) / want <= 1e-12);
        }
    }
}

TEST_CASE("envelope_amplitude rejects bad arguments") {
    CHECK_THROWS_AS(envelope_amplitude(10.0, 0.0), ParameterError);
    CHECK_THROWS_AS(envelope_amplitude(10.0, -5.0), ParameterError);
    CHECK_THROWS_AS(envelope_amplitude(-1.0, 100.0), ParameterError);
}

TEST_CASE("envelope inverse recovers the time fraction") {
    for (int i = 0; i <= 100; ++i) {
        const double frac = i / 100.0;
        CHECK(envelope_inverse_fraction(envelope_amplitude(frac * 3000.0, 3000.0)) == Approx(frac).margin(1e-12));
    }
}

TEST_CASE("envelope_for_phase examples") {
    const double T = 2000.0;
    CHECK(env(Pattern::Coupled, PhaseKind::Inspiration, T, 1.0, T) == Approx(100.0));
    CHECK(env(Pattern::Coupled, PhaseKind::Expiration, T, 1.0, 0.0) == Approx(100.0));
    CHECK(env(Pattern::Coupled, PhaseKind::Expiration, T, 1.0, T) == 0.0);
    CHECK(env(Pattern::Coupled, PhaseKind::Expiration, T, 1.0, 3 * T) == 0.0);
    CHECK(env(Pattern::Coupled, PhaseKind::Expiration, T, 1.0, 0.25 * T) == Approx(oracle_amplitude(0.75 * T, T)));
    for (double t : {0.0, 1.0, 500.0, 2000.0, 9000.0}) {
        CHECK(env(Pattern::Discrete, PhaseKind::Expiration, T, 1.0, t) == 0.0);
        for (auto p : {Pattern::Coupled, Pattern::Inversed, Pattern::Discrete}) {
            for (auto k : {PhaseKind::Inspiration, PhaseKind::Expiration}) CHECK(env(p, k, T, 0.0, t) == 0.0);
        }
    }
    // Inversed swaps the phase roles.
    CHECK(env(Pattern::Inversed, PhaseKind::Expiration, T, 1.0, T) == Approx(100.0));
    CHECK(env(Pattern::Inversed, PhaseKind::Inspiration, T, 1.0, 0.0) == Approx(100.0));
    CHECK(env(Pattern::Inversed, PhaseKind::Inspiration, T, 1.0, T) == 0.0);
    CHECK(env(Pattern::Coupled, PhaseKind::Inspiration, T, 0.5, T) == Approx(50.0));
}

TEST_CASE("envelope parameter validation") {
    CHECK_THROWS_AS(env(Pattern::Coupled, PhaseKind::Inspiration, 0.0, 1.0, 0.0), ParameterError);
    CHECK_THROWS_AS(env(Pattern::Coupled, PhaseKind::Inspiration, 100.0, 1.5, 0.0), ParameterError);
    CHECK_THROWS_AS(env(Pattern::Coupled, PhaseKind::Inspiration, 100.0, -0.1, 0.0), ParameterError);
    CHECK_THROWS_AS(env(Pattern::Coupled, PhaseKind::Inspiration, 100.0, 1.0, -1.0), ParameterError);
}

TEST_CASE("envelope properties over random T and depth") {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> uT(1000.0, 8000.0), ud(0.0, 1.0), u01(0.0, 1.0);
    for (int trial = 0; trial < 300; ++trial) {
        const double T = uT(rng), depth = ud(rng);
        double prev = -1.0;
        for (int i = 0; i <= 400; ++i) {
            const double t = 1.25 * T * i / 400.0;
            for (auto p : {Pattern::Coupled, Pattern::Inversed, Pattern::Discrete}) {
                for (auto k : {PhaseKind::Inspiration, PhaseKind::Expiration}) {
                    const double v = env(p, k, T, depth, t);
                    REQUIRE(v >= 0.0);
                    REQUIRE(v <= 100.0);
                }
            }
            const double rising = env(Pattern::Coupled, PhaseKind::Inspiration, T, depth, t);
            REQUIRE(rising >= prev);
            prev = rising;
        }

        // Convexity of the raw curve on (0, T].
        const double h = T / 500.0;
        for (int i = 1; i < 500; ++i) {
            const double t = i * h;
            REQUIRE(envelope_amplitude(t + h, T) - 2 * envelope_amplitude(t, T) + envelope_amplitude(t - h, T) >= -1e-9);
        }

        // Slope ratio of an exponential depends only on the offset.
        const double delta = T * 1e-3;
        const double t = u01(rng) * 0.5 * T;
        const double D = u01(rng) * (T - t - delta);
        const double ratio = (envelope_amplitude(t + D + delta, T) - envelope_amplitude(t + D, T)) /
                             (envelope_amplitude(t + delta, T) - envelope_amplitude(t, T));
        REQUIRE(std::abs(ratio - std::pow(14.0, D / T)) <= 1e-6);

        // Phase hand-offs.
        const double top = depth * 100.0;
        REQUIRE(env(Pattern::Coupled, PhaseKind::Inspiration, T, depth, T) == Approx(top).margin(1e-9));
        REQUIRE(env(Pattern::Coupled, PhaseKind::Expiration, T, depth, 0.0) == Approx(top).margin(1e-9));
        REQUIRE(env(Pattern::Coupled, PhaseKind::Expiration, T, depth, T) ==
                env(Pattern::Coupled, PhaseKind::Inspiration, T, depth, 0.0));
        REQUIRE(env(Pattern::Inversed, PhaseKind::Inspiration, T, depth, T) ==
                env(Pattern::Inversed, PhaseKind::Expiration, T, depth, 0.0));
        REQUIRE(env(Pattern::Inversed, PhaseKind::Expiration, T, depth, T) ==
                Approx(env(Pattern::Inversed, PhaseKind::Inspiration, T, depth, 0.0)).margin(1e-9));
        const double before = env(Pattern::Discrete, PhaseKind::Inspiration, T, depth, T);
        const double after = env(Pattern::Discrete, PhaseKind::Expiration, T, depth, 0.0);
        REQUIRE(after == 0.0);
        REQUIRE(before - after == Approx(top).margin(1e-9));
    }
}

TEST_CASE("quantize_level rounds half up") {
    CHECK(quantize_level(21.0897) == 21);
    CHECK(quantize_level(oracle_amplitude(1000.0, 2000.0)) == 21);
    CHECK(quantize_level(100.0) == 100);
    CHECK(quantize_level(0.5) == 1);
    CHECK(quantize_level(0.49999) == 0);
    CHECK(quantize_level(99.5) == 100);
    CHECK(quantize_level(0.0) == 0);
    CHECK_THROWS_AS(quantize_level(-0.01), ParameterError);
    CHECK_THROWS_AS(quantize_level(100.01), ParameterError);
    CHECK_THROWS_AS(quantize_level(std::nan("")), ParameterError);
}

TEST_CASE("pattern names") {
    CHECK(parse_pattern("coupled") == Pattern::Coupled);
    CHECK(parse_pattern("inversed") == Pattern::Inversed);
    CHECK(parse_pattern("discrete") == Pattern::Discrete);
    CHECK_FALSE(parse_pattern("Coupled").has_value());
    CHECK(static_cast<int>(Pattern::Discrete) == 2);
    for (auto p : {Pattern::Coupled, Pattern::Inversed, Pattern::Discrete}) CHECK(parse_pattern(to_string(p)) == p);
}

TEST_CASE("zero level gives silent frames") {
    std::vector<EnvelopeSample> levels{{0.0, 0.0}, {20.0, 0.0}, {40.0, 0.0}};
    const auto frames = synthesize_waveform(levels, ActuatorConfig{}, 0x0F);
    REQUIRE(frames.size() == 81);
    for (const auto& f : frames) {
        for (double d : f.drive) CHECK(d == 0.0);
    }
}

TEST_CASE("full level carrier peaks at 1 with sine RMS") {
    std::vector<EnvelopeSample> levels{{0.0, 100.0}, {100.0, 100.0}};
    const auto frames = synthesize_waveform(levels, ActuatorConfig{}, 0x08);
    REQUIRE(frames.size() == 201);
    // One 5 ms carrier period is 10 samples at 2000 Hz.
    for (std::size_t start = 0; start + 10 <= frames.size(); start += 10) {
        double mx = -2.0, ss = 0.0;
        for (std::size_t i = start; i < start + 10; ++i) {
            mx = std::max(mx, frames[i].drive[0]);
            ss += frames[i].drive[0] * frames[i].drive[0];
        }
        CHECK(mx == Approx(1.0).margin(1e-6));
        CHECK(std::sqrt(ss / 10.0) == Approx(1.0 / std::sqrt(2.0)).margin(1e-3));
    }
    for (const auto& f : frames) {
        CHECK(f.drive[1] == 0.0);
        CHECK(f.drive[2] == 0.0);
        CHECK(f.drive[3] == 0.0);
    }
}

TEST_CASE("carrier frequency is 200 Hz") {
    std::vector<EnvelopeSample> levels{{0.0, 100.0}, {1000.0, 100.0}};
    const auto frames = synthesize_waveform(levels, ActuatorConfig{}, 0x08);
    int upward = 0;
    for (std::size_t i = 1; i < frames.size(); ++i) {
        if (frames[i - 1].drive[0] < 0.0 && frames[i].drive[0] >= 0.0) ++upward;
    }
    CHECK(upward == 200);
}

TEST_CASE("channel mask reads left to right") {
    std::vector<EnvelopeSample> levels{{0.0, 60.0}, {50.0, 60.0}};
    const auto frames = synthesize_waveform(levels, ActuatorConfig{}, 0b0101);
    double energy1 = 0.0, energy3 = 0.0;
    for (const auto& f : frames) {
        CHECK(f.drive[0] == 0.0);
        CHECK(f.drive[2] == 0.0);
        CHECK(f.drive[1] == f.drive[3]);
        energy1 += f.drive[1] * f.drive[1];
        energy3 += f.drive[3] * f.drive[3];
    }
    CHECK(energy1 > 0.0);
    CHECK(energy3 > 0.0);
}

TEST_CASE("waveform holds levels between envelope samples") {
    std::vector<EnvelopeSample> levels{{0.0, 100.0}, {10.0, 50.0}, {20.0, 0.0}};
    const auto frames = synthesize_waveform(levels, ActuatorConfig{}, 0x0F);
    for (const auto& f : frames) {
        const double bound = f.t_ms < 10.0 ? 1.0 : f.t_ms < 20.0 ? 0.5 : 0.0;
        for (double d : f.drive) {
            REQUIRE(std::abs(d) <= bound + 1e-12);
            REQUIRE(d >= -1.0);
            REQUIRE(d <= 1.0);
        }
    }
    CHECK(frames.back().t_ms == Approx(20.0));
}

TEST_CASE("actuator config validation") {
    ActuatorConfig cfg;
    cfg.synth_rate_hz = 1000.0;
    CHECK_THROWS_AS(WaveformSynthesizer(cfg, 0x0F), ParameterError);
    WaveformSynthesizer ok(ActuatorConfig{}, 0x0F);
    ok.set_level({10.0, 50.0});
    CHECK_THROWS_AS(ok.set_level({5.0, 50.0}), ParameterError);
    CHECK_THROWS_AS(ok.set_level({20.0, 101.0}), ParameterError);
}

TEST_CASE("envelope_cycle covers one inspiration and one expiration") {
    const auto rows = envelope_cycle(Pattern::Coupled, 2000.0, 1.0);
    REQUIRE(rows.size() == 201);
    CHECK(rows.front().level == 0.0);
    CHECK(rows[100].t_ms == 2000.0);
    CHECK(rows[100].level == Approx(100.0));
    CHECK(rows.back().level == Approx(0.0).margin(1e-9));
    for (const auto& r : envelope_cycle(Pattern::Discrete, 2000.0, 1.0)) {
        if (r.t_ms > 2000.0) CHECK(r.level == 0.0);
    }
}

TEST_CASE("envelope generator follows phase events") {
    EnvelopeGenerator gen(Pattern::Coupled);
    BreathTracker tracker;
    CHECK(gen.level_at(500) == 0.0);
    PhaseEvent ev;
    ev.kind = PhaseKind::Inspiration;
    ev.t_ms = 1000;
    ev.depth = 1.0;
    gen.on_event(ev, tracker);
    CHECK(gen.level_at(1000) == 0.0);
    CHECK(gen.level_at(2000) == Approx(oracle_amplitude(1000.0, 2000.0)));
    CHECK(gen.level_at(3000) == Approx(100.0));

    tracker.record_phase(PhaseKind::Expiration, 3000);
    ev.kind = PhaseKind::Expiration;
    ev.t_ms = 3000;
    ev.depth = 0.5;
    gen.on_event(ev, tracker);
    CHECK(gen.params()->period_ms == 3000.0);
    CHECK(gen.level_at(3000) == Approx(50.0));
    CHECK(gen.level_at(6000) == 0.0);
}

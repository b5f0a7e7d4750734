#pragma once

// Scenario files: one `key = value` per line, `#` starts a comment.
//
//   duration_ms                     total simulated time (ms, > 0)       90000
//   pattern                         coupled | inversed | discrete        coupled
//   order_interval_ms               amplitude-order period (ms)          20
//   channel_mask                    belt channels, 0..15                 15
//   leader.period_ms                natural breath period (ms)           4000
//   leader.jitter                   per-cycle period sigma (fraction)    0.02
//   leader.depth_amp                breath amplitude (m/s^2)             0.3
//   leader.motion_amp               common-mode sway (m/s^2)             0.05
//   leader.noise_sigma              per-channel noise (m/s^2)            0.005
//   leader.seed                     RNG seed                             1
//   follower.period_ms              natural breath period (ms)           5000
//   follower.coupling               coupling gain k (rad/s)              1.5
//   follower.depth_amp / .motion_amp / .noise_sigma / .seed              0.3 / 0.05 / 0.005 / 2
//   link.delay_ms / link.loss / link.seed                                0 / 0 / 7
//   detector.inspiration_at_minimum true | false                         true
//   analysis.tail_ms                span scored for pearson_r (ms)       60000
//   analysis.lag_compensate         true | false                         true
//   analysis.column                 az_filt | az_raw                     az_filt

#include <algorithm>
#include <cstdint>
#include <istream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>

#include "breathsync/io.hpp"
#include "breathsync/sim.hpp"

namespace breathsync {

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class KeyValueConfig {
public:
    static KeyValueConfig parse(std::istream& in) {
        KeyValueConfig cfg;
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            std::string_view s = line;
            if (const auto hash = s.find('#'); hash != std::string_view::npos) s = s.substr(0, hash);
            s = detail::trim(s);
            if (s.empty()) continue;
            const auto eq = s.find('=');
            if (eq == std::string_view::npos) {
                throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
            }
            const auto key = std::string(detail::trim(s.substr(0, eq)));
            const auto value = std::string(detail::trim(s.substr(eq + 1)));
            if (key.empty()) throw ConfigError("line " + std::to_string(lineno) + ": empty key");
            cfg.values_[key] = value;
        }
        return cfg;
    }

    static KeyValueConfig parse(std::string_view text) {
        std::istringstream in{std::string(text)};
        return parse(in);
    }

    void set(const std::string& key, const std::string& value) { values_[key] = value; }
    bool has(const std::string& key) const { return values_.count(key) > 0; }
    const std::map<std::string, std::string>& values() const noexcept { return values_; }

    double get_double(const std::string& key, double fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        double v = 0.0;
        if (!detail::parse_number(it->second, v)) throw ConfigError(key + ": not a number: '" + it->second + "'");
        return v;
    }

    std::uint64_t get_uint(const std::string& key, std::uint64_t fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        std::uint64_t v = 0;
        if (!detail::parse_number(it->second, v)) {
            throw ConfigError(key + ": not a non-negative integer: '" + it->second + "'");
        }
        return v;
    }

    bool get_bool(const std::string& key, bool fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        if (it->second == "true" || it->second == "1") return true;
        if (it->second == "false" || it->second == "0") return false;
        throw ConfigError(key + ": not a boolean: '" + it->second + "'");
    }

    std::string get_string(const std::string& key, const std::string& fallback) const {
        auto it = values_.find(key);
        return it == values_.end() ? fallback : it->second;
    }

    /// Sorted `key=value` lines; input to the config hash.
    std::string canonical() const {
        std::string out;
        for (const auto& [k, v] : values_) out += k + "=" + v + "\n";
        return out;
    }

private:
    std::map<std::string, std::string> values_;
};

struct Scenario {
    ClosedLoopConfig loop;
    AnalysisOptions analysis{SectionOptions{}, 60'000.0};
    std::string column = "az_filt";
};

inline Scenario scenario_from_config(const KeyValueConfig& kv) {
    static const char* const known[] = {
        "duration_ms",        "pattern",           "order_interval_ms",    "channel_mask",
        "leader.period_ms",   "leader.jitter",     "leader.depth_amp",     "leader.motion_amp",
        "leader.noise_sigma", "leader.seed",       "follower.period_ms",   "follower.coupling",
        "follower.depth_amp", "follower.motion_amp", "follower.noise_sigma", "follower.seed",
        "link.delay_ms",      "link.loss",         "link.seed",            "detector.inspiration_at_minimum",
        "analysis.tail_ms",   "analysis.lag_compensate", "analysis.column"};
    for (const auto& entry : kv.values()) {
        const std::string& k = entry.first;
        if (std::find_if(std::begin(known), std::end(known), [&](const char* n) { return k == n; }) == std::end(known)) {
            throw ConfigError("unknown key '" + k + "'");
        }
    }

    Scenario s;
    auto& c = s.loop;
    c.duration_ms = kv.get_uint("duration_ms", c.duration_ms);
    const auto pattern_name = kv.get_string("pattern", "coupled");
    const auto pattern = parse_pattern(pattern_name);
    if (!pattern) throw ConfigError("pattern: unknown '" + pattern_name + "'");
    c.pattern = *pattern;
    c.order_interval_ms = kv.get_uint("order_interval_ms", c.order_interval_ms);
    const auto mask = kv.get_uint("channel_mask", c.channel_mask);
    if (mask >= 16) throw ConfigError("channel_mask must be < 16");
    c.channel_mask = static_cast<std::uint8_t>(mask);

    c.leader.natural_period_ms = kv.get_double("leader.period_ms", c.leader.natural_period_ms);
    c.leader.period_jitter_frac = kv.get_double("leader.jitter", c.leader.period_jitter_frac);
    c.leader.body.depth_amp = kv.get_double("leader.depth_amp", c.leader.body.depth_amp);
    c.leader.body.motion_amp = kv.get_double("leader.motion_amp", c.leader.body.motion_amp);
    c.leader.body.noise_sigma = kv.get_double("leader.noise_sigma", c.leader.body.noise_sigma);
    c.leader.body.rng_seed = kv.get_uint("leader.seed", c.leader.body.rng_seed);

    c.follower.natural_period_ms = kv.get_double("follower.period_ms", c.follower.natural_period_ms);
    c.follower.coupling_gain = kv.get_double("follower.coupling", c.follower.coupling_gain);
    c.follower.body.depth_amp = kv.get_double("follower.depth_amp", c.follower.body.depth_amp);
    c.follower.body.motion_amp = kv.get_double("follower.motion_amp", c.follower.body.motion_amp);
    c.follower.body.noise_sigma = kv.get_double("follower.noise_sigma", c.follower.body.noise_sigma);
    c.follower.body.rng_seed = kv.get_uint("follower.seed", c.follower.body.rng_seed);

    c.link.delay_ms = kv.get_uint("link.delay_ms", c.link.delay_ms);
    c.link.loss_probability = kv.get_double("link.loss", c.link.loss_probability);
    c.link.rng_seed = kv.get_uint("link.seed", c.link.rng_seed);
    c.detector.inspiration_at_minimum = kv.get_bool("detector.inspiration_at_minimum", true);

    s.analysis.tail_ms = kv.get_double("analysis.tail_ms", s.analysis.tail_ms);
    s.analysis.section.lag_compensate = kv.get_bool("analysis.lag_compensate", true);
    s.column = kv.get_string("analysis.column", s.column);
    if (s.column != "az_filt" && s.column != "az_raw") throw ConfigError("analysis.column must be az_filt or az_raw");

    try {
        validate(c);
    } catch (const ParameterError& e) {
        throw ConfigError(e.what());
    }
    return s;
}

} // namespace breathsync

#pragma once

// File formats: IMU CSV ingestion, respiration-trace CSV, phase-event JSON
// Lines, envelope/waveform dumps and sync reports.

#include <charconv>
#include <cstdint>
#include <cstdio>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "breathsync/envelope.hpp"
#include "breathsync/respiration.hpp"
#include "breathsync/sync.hpp"

namespace breathsync {

inline constexpr std::string_view kImuCsvHeader = "t_ms,ax_f,ay_f,az_f,ax_b,ay_b,az_b";
inline constexpr std::string_view kTraceCsvHeader = "t_ms,az_raw,az_filt";

/// Malformed input at a 1-based line number.
class FormatError : public std::runtime_error {
public:
    FormatError(std::size_t line, const std::string& what)
        : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}
    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

namespace detail {

inline std::vector<std::string_view> split(std::string_view s, char sep) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    for (;;) {
        const auto pos = s.find(sep, start);
        out.push_back(s.substr(start, pos - start));
        if (pos == std::string_view::npos) break;
        start = pos + 1;
    }
    return out;
}

inline std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
    return s;
}

template <typename T>
bool parse_number(std::string_view s, T& out) {
    s = trim(s);
    if (!s.empty() && s.front() == '+') s.remove_prefix(1);
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
    return ec == std::errc{} && ptr == s.data() + s.size() && !s.empty();
}

/// Shortest round-trip decimal representation.
inline std::string format_double(double v) {
    char buf[64];
    const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
    if (ec != std::errc{}) return std::to_string(v);
    return std::string(buf, ptr);
}

} // namespace detail

/// Reads the dual-IMU CSV. Throws FormatError naming the offending line.
inline std::vector<ImuFramePair> read_imu_csv(std::istream& in) {
    std::string line;
    if (!std::getline(in, line) || detail::trim(line) != kImuCsvHeader) {
        throw FormatError(1, "expected header '" + std::string(kImuCsvHeader) + "'");
    }
    std::vector<ImuFramePair> frames;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (detail::trim(line).empty()) continue;
        const auto f = detail::split(line, ',');
        if (f.size() != 7) throw FormatError(lineno, "expected 7 fields, got " + std::to_string(f.size()));
        ImuFramePair p;
        double* vals[] = {&p.ax_front, &p.ay_front, &p.az_front, &p.ax_back, &p.ay_back, &p.az_back};
        bool ok = detail::parse_number(f[0], p.t_ms);
        for (std::size_t i = 0; ok && i < 6; ++i) ok = detail::parse_number(f[i + 1], *vals[i]);
        if (!ok) throw FormatError(lineno, "unparseable field");
        frames.push_back(p);
    }
    return frames;
}

inline void write_imu_csv(std::ostream& out, const std::vector<ImuFramePair>& frames) {
    out << kImuCsvHeader << '\n';
    for (const auto& f : frames) {
        out << f.t_ms << ',' << detail::format_double(f.ax_front) << ',' << detail::format_double(f.ay_front) << ','
            << detail::format_double(f.az_front) << ',' << detail::format_double(f.ax_back) << ','
            << detail::format_double(f.ay_back) << ',' << detail::format_double(f.az_back) << '\n';
    }
}

inline void write_trace_csv(std::ostream& out, const std::vector<RespirationSample>& samples) {
    out << kTraceCsvHeader << '\n';
    for (const auto& s : samples) {
        out << s.t_ms << ',' << detail::format_double(s.az_raw) << ',' << detail::format_double(s.az_filt) << '\n';
    }
}

/// Reads one value column of a CSV whose first column is t_ms.
inline std::vector<TimedValue> read_trace_csv(std::istream& in, std::string_view column = "az_filt") {
    std::string line;
    if (!std::getline(in, line)) throw FormatError(1, "missing header");
    const auto header = detail::split(detail::trim(line), ',');
    if (header.empty() || detail::trim(header[0]) != "t_ms") throw FormatError(1, "first column must be t_ms");
    std::size_t col = 0;
    for (std::size_t i = 1; i < header.size(); ++i) {
        if (detail::trim(header[i]) == column) col = i;
    }
    if (col == 0) throw FormatError(1, "no column named '" + std::string(column) + "'");

    std::vector<TimedValue> out;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (detail::trim(line).empty()) continue;
        const auto f = detail::split(line, ',');
        TimedValue v;
        if (f.size() != header.size() || !detail::parse_number(f[0], v.t_ms) || !detail::parse_number(f[col], v.value)) {
            throw FormatError(lineno, "malformed row");
        }
        out.push_back(v);
    }
    return out;
}

inline std::string_view event_kind_name(PhaseKind k) noexcept {
    return k == PhaseKind::Inspiration ? "inspiration_onset" : "expiration_onset";
}

inline nlohmann::json to_json(const PhaseEvent& ev) {
    nlohmann::json j;
    j["kind"] = event_kind_name(ev.kind);
    j["t_ms"] = ev.t_ms;
    j["depth"] = ev.depth;
    j["prev_phase_duration_ms"] = ev.prev_phase_duration_ms ? nlohmann::json(*ev.prev_phase_duration_ms) : nlohmann::json();
    return j;
}

inline void write_events_jsonl(std::ostream& out, const std::vector<PhaseEvent>& events) {
    for (const auto& ev : events) out << to_json(ev).dump() << '\n';
}

inline std::vector<PhaseEvent> read_events_jsonl(std::istream& in) {
    std::vector<PhaseEvent> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (detail::trim(line).empty()) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            PhaseEvent ev;
            const auto kind = j.at("kind").get<std::string>();
            if (kind == "inspiration_onset") ev.kind = PhaseKind::Inspiration;
            else if (kind == "expiration_onset") ev.kind = PhaseKind::Expiration;
            else throw FormatError(lineno, "unknown kind '" + kind + "'");
            ev.t_ms = j.at("t_ms").get<std::uint64_t>();
            ev.depth = j.at("depth").get<double>();
            if (!j.at("prev_phase_duration_ms").is_null()) {
                ev.prev_phase_duration_ms = j.at("prev_phase_duration_ms").get<std::uint64_t>();
            }
            out.push_back(ev);
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(lineno, e.what());
        }
    }
    return out;
}

inline void write_envelope_csv(std::ostream& out, const std::vector<EnvelopeSample>& rows) {
    out << "t_ms,level\n";
    for (const auto& r : rows) out << detail::format_double(r.t_ms) << ',' << detail::format_double(r.level) << '\n';
}

inline void write_waveform_csv(std::ostream& out, const std::vector<WaveformFrame>& frames) {
    out << "t_ms,ch0,ch1,ch2,ch3\n";
    for (const auto& f : frames) {
        out << detail::format_double(f.t_ms);
        for (double d : f.drive) out << ',' << detail::format_double(d);
        out << '\n';
    }
}

inline void write_window_csv(std::ostream& out, const std::vector<WindowScore>& windows) {
    out << "window_start_ms,window_end_ms,r\n";
    for (const auto& w : windows) {
        out << detail::format_double(w.start_ms) << ',' << detail::format_double(w.end_ms) << ','
            << (w.valid ? detail::format_double(w.r) : std::string("nan")) << '\n';
    }
}

inline nlohmann::json to_json(const SyncReport& rep) {
    nlohmann::json j;
    j["pearson_r"] = rep.pearson_r;
    j["pearson_r_raw"] = rep.pearson_r_raw;
    j["lag_ms"] = rep.lag_ms;
    j["section"] = rep.section ? nlohmann::json::array({rep.section->first, rep.section->second}) : nlohmann::json();
    return j;
}

/// 64-bit FNV-1a, stable across platforms; used to fingerprint configs.
inline std::uint64_t fnv1a64(std::string_view data) noexcept {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : data) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

} // namespace breathsync

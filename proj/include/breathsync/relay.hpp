#pragma once

// Session broker for amplitude-order frames. Transport-agnostic: recipients
// are reached through per-member sinks; relay_server.hpp puts it on TCP.

#include <algorithm>
#include <array>
#include <atomic>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "breathsync/protocol.hpp"

namespace breathsync {

using SessionId = std::uint64_t;
using ParticipantId = std::string;

inline constexpr std::size_t kMaxParticipants = 256;

enum class RoutingKind { Pair, FanOut, Mesh };

constexpr std::string_view to_string(RoutingKind k) noexcept {
    switch (k) {
    case RoutingKind::Pair: return "pair";
    case RoutingKind::FanOut: return "fanout";
    case RoutingKind::Mesh: return "mesh";
    }
    return "unknown";
}

struct RoutingMode {
    RoutingKind kind = RoutingKind::Pair;
    ParticipantId fanout_source;  // FanOut only

    static RoutingMode pair() { return {RoutingKind::Pair, {}}; }
    static RoutingMode fan_out(ParticipantId source) { return {RoutingKind::FanOut, std::move(source)}; }
    static RoutingMode mesh() { return {RoutingKind::Mesh, {}}; }
};

enum class RelayErrorCode { UnknownSession, SessionFull, DuplicateParticipant, UnknownParticipant, InvalidMode, LogIo };

constexpr std::string_view to_string(RelayErrorCode c) noexcept {
    switch (c) {
    case RelayErrorCode::UnknownSession: return "UnknownSession";
    case RelayErrorCode::SessionFull: return "SessionFull";
    case RelayErrorCode::DuplicateParticipant: return "DuplicateParticipant";
    case RelayErrorCode::UnknownParticipant: return "UnknownParticipant";
    case RelayErrorCode::InvalidMode: return "InvalidMode";
    case RelayErrorCode::LogIo: return "LogIo";
    }
    return "Unknown";
}

class RelayError : public std::runtime_error {
public:
    RelayError(RelayErrorCode code, const std::string& detail = {})
        : std::runtime_error(std::string(to_string(code)) + (detail.empty() ? "" : ": " + detail)),
          code_(code) {}
    RelayErrorCode code() const noexcept { return code_; }

private:
    RelayErrorCode code_;
};

/// Recipients of a frame from `sender` given the current membership.
/// `fanout_source_id` is the source's wire id if it has joined.
inline std::vector<std::uint8_t> route_recipients(RoutingKind kind,
                                                  std::optional<std::uint8_t> fanout_source_id,
                                                  std::span<const std::uint8_t> members,
                                                  std::uint8_t sender) {
    std::vector<std::uint8_t> out;
    if (std::find(members.begin(), members.end(), sender) == members.end()) return out;
    if (kind == RoutingKind::FanOut && fanout_source_id != sender) return out;
    for (std::uint8_t m : members) {
        if (m != sender) out.push_back(m);
    }
    std::sort(out.begin(), out.end());
    return out;
}

// ---------------------------------------------------------------------------
// Session log: repeated [recv_ts: u64 BE][13 frame bytes], no header.

inline constexpr std::size_t kLogRecordSize = 8 + kFrameSize;

class LogWriter {
public:
    explicit LogWriter(const std::filesystem::path& path)
        : out_(path, std::ios::binary | std::ios::trunc), path_(path) {
        if (!out_) throw RelayError(RelayErrorCode::LogIo, "cannot open " + path.string());
    }

    /// Writes one whole record and flushes it.
    void append(std::uint64_t recv_ts, const FrameBytes& frame) {
        std::array<char, kLogRecordSize> rec{};
        for (int i = 0; i < 8; ++i) rec[i] = static_cast<char>(recv_ts >> (56 - 8 * i));
        std::copy(frame.begin(), frame.end(), rec.begin() + 8);
        out_.write(rec.data(), rec.size());
        out_.flush();
        if (!out_) throw RelayError(RelayErrorCode::LogIo, "write failed on " + path_.string());
    }

    const std::filesystem::path& path() const noexcept { return path_; }

private:
    std::ofstream out_;
    std::filesystem::path path_;
};

enum class LogFaultCode { TruncatedRecord, ChecksumFailure };

class LogReplayError : public std::runtime_error {
public:
    LogReplayError(LogFaultCode code, std::uint64_t offset)
        : std::runtime_error(std::string(code == LogFaultCode::TruncatedRecord ? "TruncatedRecord"
                                                                               : "ChecksumFailure") +
                             " at offset " + std::to_string(offset)),
          code_(code), offset_(offset) {}

    LogFaultCode code() const noexcept { return code_; }
    std::uint64_t offset() const noexcept { return offset_; }

private:
    LogFaultCode code_;
    std::uint64_t offset_;
};

struct ReplayedOrder {
    std::uint64_t recv_ts = 0;
    AmplitudeOrder order;
    FrameBytes frame{};
};

/// Sequential log reader. next() yields records in file order and throws
/// LogReplayError at the offset of the first bad record.
class LogReader {
public:
    explicit LogReader(const std::filesystem::path& path) : in_(path, std::ios::binary) {
        if (!in_) throw RelayError(RelayErrorCode::LogIo, "cannot open " + path.string());
    }

    std::optional<ReplayedOrder> next() {
        std::array<char, kLogRecordSize> rec{};
        in_.read(rec.data(), rec.size());
        const auto got = static_cast<std::size_t>(in_.gcount());
        if (got == 0) return std::nullopt;
        if (got < kLogRecordSize) throw LogReplayError(LogFaultCode::TruncatedRecord, offset_);

        ReplayedOrder r;
        for (int i = 0; i < 8; ++i) r.recv_ts = (r.recv_ts << 8) | static_cast<std::uint8_t>(rec[i]);
        std::transform(rec.begin() + 8, rec.end(), r.frame.begin(),
                       [](char c) { return static_cast<std::uint8_t>(c); });
        if (try_decode_frame(r.frame, r.order)) throw LogReplayError(LogFaultCode::ChecksumFailure, offset_ + 8);
        offset_ += kLogRecordSize;
        return r;
    }

    std::uint64_t offset() const noexcept { return offset_; }

private:
    std::ifstream in_;
    std::uint64_t offset_ = 0;
};

inline std::vector<ReplayedOrder> replay_log(const std::filesystem::path& path) {
    LogReader reader(path);
    std::vector<ReplayedOrder> out;
    while (auto r = reader.next()) out.push_back(*r);
    return out;
}

// ---------------------------------------------------------------------------
// Broker

/// Receives forwarded frame bytes. Called with the session lock held, so it
/// must not re-enter the broker.
using FrameSink = std::function<void(const FrameBytes&)>;

enum class RouteDisposition { Delivered, UndecodableFrame, UnknownSource, NonSourceTraffic, UnknownSession };

constexpr std::string_view to_string(RouteDisposition d) noexcept {
    switch (d) {
    case RouteDisposition::Delivered: return "Delivered";
    case RouteDisposition::UndecodableFrame: return "UndecodableFrame";
    case RouteDisposition::UnknownSource: return "UnknownSource";
    case RouteDisposition::NonSourceTraffic: return "NonSourceTraffic";
    case RouteDisposition::UnknownSession: return "UnknownSession";
    }
    return "Unknown";
}

struct RouteResult {
    RouteDisposition disposition = RouteDisposition::Delivered;
    std::vector<std::uint8_t> recipients;
    std::optional<DecodeErrorCode> decode_error;
};

struct SessionCounters {
    std::uint64_t routed = 0;
    std::uint64_t deliveries = 0;
    std::uint64_t undecodable = 0;
    std::uint64_t unknown_source = 0;
    std::uint64_t non_source = 0;
};

struct MemberInfo {
    ParticipantId participant;
    std::uint8_t source_id;
};

class Broker {
public:
    using Clock = std::function<std::uint64_t()>;

    struct Options {
        /// Session logs go here as session-<id>.log; empty disables logging.
        std::filesystem::path log_dir;
        /// Broker milliseconds; defaults to a steady clock since construction.
        Clock clock;
    };

    explicit Broker(Options opts = {}) : opts_(std::move(opts)) {
        if (!opts_.clock) {
            const auto start = std::chrono::steady_clock::now();
            opts_.clock = [start] {
                return static_cast<std::uint64_t>(std::chrono::duration_cast<std::chrono::milliseconds>(
                                                      std::chrono::steady_clock::now() - start)
                                                      .count());
            };
        }
        if (!opts_.log_dir.empty()) std::filesystem::create_directories(opts_.log_dir);
    }

    SessionId create_session(RoutingMode mode) {
        if (mode.kind == RoutingKind::FanOut && mode.fanout_source.empty()) {
            throw RelayError(RelayErrorCode::InvalidMode, "fan-out requires a source participant");
        }
        std::unique_lock lock(sessions_mutex_);
        const SessionId id = next_session_++;
        auto s = std::make_shared<Session>();
        s->mode = std::move(mode);
        if (!opts_.log_dir.empty()) s->log.emplace(log_path(id));
        sessions_.emplace(id, std::move(s));
        return id;
    }

    /// Adds a member and returns its wire source_id (lowest unused).
    std::uint8_t join(SessionId id, const ParticipantId& participant, FrameSink sink = {}) {
        auto s = find(id);
        std::lock_guard lock(s->mutex);
        if (s->members.count(participant)) throw RelayError(RelayErrorCode::DuplicateParticipant, participant);
        const std::size_t cap = s->mode.kind == RoutingKind::Pair ? 2 : kMaxParticipants;
        if (s->members.size() >= cap) throw RelayError(RelayErrorCode::SessionFull);
        std::array<bool, kMaxParticipants> used{};
        for (const auto& [_, m] : s->members) used[m.source_id] = true;
        const auto free_it = std::find(used.begin(), used.end(), false);
        const auto sid = static_cast<std::uint8_t>(free_it - used.begin());
        s->members.emplace(participant, Member{sid, std::move(sink)});
        return sid;
    }

    void leave(SessionId id, const ParticipantId& participant) {
        auto s = find(id);
        std::lock_guard lock(s->mutex);
        if (s->members.erase(participant) == 0) throw RelayError(RelayErrorCode::UnknownParticipant, participant);
    }

    /// Validates, logs and forwards one frame. Bytes reach sinks unmodified.
    /// When `sender` is given, the frame's source_id must be that member's id.
    RouteResult route_frame(SessionId id, std::span<const std::uint8_t> bytes,
                            const ParticipantId* sender = nullptr) {
        RouteResult result;
        std::shared_ptr<Session> s;
        {
            std::shared_lock lock(sessions_mutex_);
            auto it = sessions_.find(id);
            if (it == sessions_.end()) {
                result.disposition = RouteDisposition::UnknownSession;
                return result;
            }
            s = it->second;
        }

        AmplitudeOrder order;
        const auto err = try_decode_frame(bytes, order);
        std::lock_guard lock(s->mutex);
        if (err) {
            ++s->counters.undecodable;
            result.disposition = RouteDisposition::UndecodableFrame;
            result.decode_error = err;
            return result;
        }

        // Membership snapshot for this frame.
        std::vector<std::uint8_t> ids;
        std::optional<std::uint8_t> fan_source;
        ids.reserve(s->members.size());
        for (const auto& [pid, m] : s->members) {
            ids.push_back(m.source_id);
            if (s->mode.kind == RoutingKind::FanOut && pid == s->mode.fanout_source) fan_source = m.source_id;
        }
        bool known = std::find(ids.begin(), ids.end(), order.source_id) != ids.end();
        if (known && sender) {
            auto it = s->members.find(*sender);
            known = it != s->members.end() && it->second.source_id == order.source_id;
        }
        if (!known) {
            ++s->counters.unknown_source;
            result.disposition = RouteDisposition::UnknownSource;
            return result;
        }
        if (s->mode.kind == RoutingKind::FanOut && fan_source != order.source_id) {
            ++s->counters.non_source;
            result.disposition = RouteDisposition::NonSourceTraffic;
            return result;
        }

        result.recipients = route_recipients(s->mode.kind, fan_source, ids, order.source_id);
        FrameBytes frame;
        std::copy(bytes.begin(), bytes.end(), frame.begin());

        const std::uint64_t now = std::max(opts_.clock(), s->last_recv_ts);
        s->last_recv_ts = now;
        if (s->log) s->log->append(now, frame);
        ++s->counters.routed;

        for (const auto& [_, m] : s->members) {
            if (m.source_id == order.source_id || !m.sink) continue;
            m.sink(frame);
            ++s->counters.deliveries;
        }
        return result;
    }

    std::filesystem::path log_path(SessionId id) const {
        if (opts_.log_dir.empty()) return {};
        return opts_.log_dir / ("session-" + std::to_string(id) + ".log");
    }

    SessionCounters counters(SessionId id) const {
        auto s = find(id);
        std::lock_guard lock(s->mutex);
        return s->counters;
    }

    std::vector<MemberInfo> members(SessionId id) const {
        auto s = find(id);
        std::lock_guard lock(s->mutex);
        std::vector<MemberInfo> out;
        for (const auto& [pid, m] : s->members) out.push_back({pid, m.source_id});
        std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.source_id < b.source_id; });
        return out;
    }

    RoutingMode mode(SessionId id) const {
        auto s = find(id);
        std::lock_guard lock(s->mutex);
        return s->mode;
    }

    std::vector<SessionId> sessions() const {
        std::shared_lock lock(sessions_mutex_);
        std::vector<SessionId> out;
        for (const auto& [id, _] : sessions_) out.push_back(id);
        return out;
    }

private:
    struct Member {
        std::uint8_t source_id;
        FrameSink sink;
    };

    struct Session {
        mutable std::mutex mutex;
        RoutingMode mode;
        std::map<ParticipantId, Member> members;
        std::optional<LogWriter> log;
        SessionCounters counters;
        std::uint64_t last_recv_ts = 0;
    };

    std::shared_ptr<Session> find(SessionId id) const {
        std::shared_lock lock(sessions_mutex_);
        auto it = sessions_.find(id);
        if (it == sessions_.end()) throw RelayError(RelayErrorCode::UnknownSession, std::to_string(id));
        return it->second;
    }

    Options opts_;
    mutable std::shared_mutex sessions_mutex_;
    std::map<SessionId, std::shared_ptr<Session>> sessions_;
    SessionId next_session_ = 1;
};

} // namespace breathsync

#pragma once

// Fixed 13-byte amplitude-order frame, big-endian:
//
//   [0]     0xB5 sync
//   [1]     0x01 version
//   [2]     source_id
//   [3..4]  seq
//   [5..8]  timestamp_ms (sender clock)
//   [9]     pattern (0 coupled, 1 inversed, 2 discrete)
//   [10]    level 0..100
//   [11]    channel mask (low 4 bits)
//   [12]    XOR of bytes 0..11

#include <array>
#include <cstdint>
#include <deque>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "breathsync/envelope.hpp"

namespace breathsync {

inline constexpr std::size_t kFrameSize = 13;
inline constexpr std::uint8_t kFrameSync = 0xB5;
inline constexpr std::uint8_t kFrameVersion = 0x01;

using FrameBytes = std::array<std::uint8_t, kFrameSize>;

struct AmplitudeOrder {
    std::uint8_t source_id = 0;
    std::uint16_t seq = 0;
    std::uint32_t timestamp_ms = 0;
    Pattern pattern = Pattern::Coupled;
    std::uint8_t level = 0;
    std::uint8_t channel_mask = 0x0F;

    friend bool operator==(const AmplitudeOrder&, const AmplitudeOrder&) = default;
};

class EncodeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

enum class DecodeErrorCode { BadLength, BadSync, BadVersion, BadChecksum, FieldOutOfRange };

constexpr std::string_view to_string(DecodeErrorCode c) noexcept {
    switch (c) {
    case DecodeErrorCode::BadLength: return "BadLength";
    case DecodeErrorCode::BadSync: return "BadSync";
    case DecodeErrorCode::BadVersion: return "BadVersion";
    case DecodeErrorCode::BadChecksum: return "BadChecksum";
    case DecodeErrorCode::FieldOutOfRange: return "FieldOutOfRange";
    }
    return "Unknown";
}

class DecodeError : public std::runtime_error {
public:
    explicit DecodeError(DecodeErrorCode code)
        : std::runtime_error(std::string(to_string(code))), code_(code) {}
    DecodeErrorCode code() const noexcept { return code_; }

private:
    DecodeErrorCode code_;
};

inline std::uint8_t frame_checksum(std::span<const std::uint8_t> bytes) noexcept {
    std::uint8_t x = 0;
    for (std::size_t i = 0; i + 1 < kFrameSize && i < bytes.size(); ++i) x ^= bytes[i];
    return x;
}

inline FrameBytes encode_frame(const AmplitudeOrder& o) {
    if (o.level > 100) throw EncodeError("level > 100");
    if (static_cast<std::uint8_t>(o.pattern) > 2) throw EncodeError("pattern > 2");
    if (o.channel_mask >= 16) throw EncodeError("channel_mask >= 16");
    FrameBytes b{};
    b[0] = kFrameSync;
    b[1] = kFrameVersion;
    b[2] = o.source_id;
    b[3] = static_cast<std::uint8_t>(o.seq >> 8);
    b[4] = static_cast<std::uint8_t>(o.seq);
    b[5] = static_cast<std::uint8_t>(o.timestamp_ms >> 24);
    b[6] = static_cast<std::uint8_t>(o.timestamp_ms >> 16);
    b[7] = static_cast<std::uint8_t>(o.timestamp_ms >> 8);
    b[8] = static_cast<std::uint8_t>(o.timestamp_ms);
    b[9] = static_cast<std::uint8_t>(o.pattern);
    b[10] = o.level;
    b[11] = o.channel_mask;
    b[12] = frame_checksum(b);
    return b;
}

/// Non-throwing decode. Checks run in wire order: sync, version, checksum,
/// then field ranges.
inline std::optional<DecodeErrorCode> try_decode_frame(std::span<const std::uint8_t> b,
                                                       AmplitudeOrder& out) noexcept {
    if (b.size() != kFrameSize) return DecodeErrorCode::BadLength;
    if (b[0] != kFrameSync) return DecodeErrorCode::BadSync;
    if (b[1] != kFrameVersion) return DecodeErrorCode::BadVersion;
    if (frame_checksum(b) != b[12]) return DecodeErrorCode::BadChecksum;
    if (b[9] > 2 || b[10] > 100 || b[11] >= 16) return DecodeErrorCode::FieldOutOfRange;
    out.source_id = b[2];
    out.seq = static_cast<std::uint16_t>((b[3] << 8) | b[4]);
    out.timestamp_ms = (std::uint32_t{b[5]} << 24) | (std::uint32_t{b[6]} << 16) |
                       (std::uint32_t{b[7]} << 8) | std::uint32_t{b[8]};
    out.pattern = static_cast<Pattern>(b[9]);
    out.level = b[10];
    out.channel_mask = b[11];
    return std::nullopt;
}

inline AmplitudeOrder decode_frame(std::span<const std::uint8_t> bytes) {
    AmplitudeOrder o;
    if (auto err = try_decode_frame(bytes, o)) throw DecodeError(*err);
    return o;
}

// ---------------------------------------------------------------------------
// Sequence tracking

struct FrameGapReport {
    std::uint8_t source_id = 0;
    std::uint16_t expected_seq = 0;
    std::uint16_t received_seq = 0;
    std::uint16_t gap_size = 0;

    friend bool operator==(const FrameGapReport&, const FrameGapReport&) = default;
};

enum class SequenceDisposition {
    InOrder,    // first frame from a source, or exactly last + 1
    Gap,        // accepted, preceded by missing frames
    Duplicate,  // same seq as the last accepted frame; drop
    Stale,      // older than the last accepted frame; drop
};

struct SequenceVerdict {
    SequenceDisposition disposition = SequenceDisposition::InOrder;
    std::optional<FrameGapReport> gap;

    bool accepted() const noexcept {
        return disposition == SequenceDisposition::InOrder || disposition == SequenceDisposition::Gap;
    }
};

/// Per-source 16-bit wrapping sequence tracker. A forward jump of less than
/// half the sequence space counts as a gap; anything else is old.
class SequenceTracker {
public:
    SequenceVerdict track(std::uint8_t source_id, std::uint16_t seq) {
        auto it = last_.find(source_id);
        if (it == last_.end()) {
            last_.emplace(source_id, seq);
            return {};
        }
        const std::uint16_t expected = static_cast<std::uint16_t>(it->second + 1);
        const std::uint16_t ahead = static_cast<std::uint16_t>(seq - expected);
        if (ahead == 0) {
            it->second = seq;
            return {};
        }
        if (seq == it->second) return {SequenceDisposition::Duplicate, std::nullopt};
        if (ahead < 0x8000) {
            it->second = seq;
            return {SequenceDisposition::Gap, FrameGapReport{source_id, expected, seq, ahead}};
        }
        return {SequenceDisposition::Stale, std::nullopt};
    }

    void reset(std::uint8_t source_id) { last_.erase(source_id); }

private:
    std::unordered_map<std::uint8_t, std::uint16_t> last_;
};

/// Free-function form of SequenceTracker::track.
inline std::optional<FrameGapReport> track_sequence(std::uint8_t source_id, std::uint16_t seq,
                                                    SequenceTracker& state) {
    return state.track(source_id, seq).gap;
}

// ---------------------------------------------------------------------------
// Stream reassembly

/// Recovers frames from an ordered byte stream. Unaligned input is skipped a
/// byte at a time until the next sync byte that starts a valid frame.
class FrameReader {
public:
    void feed(std::span<const std::uint8_t> bytes) { buf_.insert(buf_.end(), bytes.begin(), bytes.end()); }

    /// Next valid frame, or nullopt when more input is needed.
    std::optional<FrameBytes> next() {
        while (buf_.size() >= kFrameSize) {
            if (buf_.front() != kFrameSync) {
                buf_.pop_front();
                ++skipped_bytes_;
                continue;
            }
            FrameBytes f;
            std::copy_n(buf_.begin(), kFrameSize, f.begin());
            AmplitudeOrder o;
            if (!try_decode_frame(f, o)) {
                buf_.erase(buf_.begin(), buf_.begin() + kFrameSize);
                return f;
            }
            buf_.pop_front();
            ++skipped_bytes_;
        }
        return std::nullopt;
    }

    std::size_t skipped_bytes() const noexcept { return skipped_bytes_; }
    std::size_t buffered() const noexcept { return buf_.size(); }

private:
    std::deque<std::uint8_t> buf_;
    std::size_t skipped_bytes_ = 0;
};

} // namespace breathsync

#include <catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "breathsync/relay.hpp"
#include "support/relay_stress.hpp"
#include "support/test_support.hpp"

using namespace breathsync;
using testsupport::TempDir;

namespace {

FrameBytes frame_from(std::uint8_t source, std::uint16_t seq, std::uint8_t level = 10) {
    return encode_frame(AmplitudeOrder{source, seq, 1000u + seq, Pattern::Coupled, level, 0x0F});
}

struct Recorder {
    std::map<std::uint8_t, std::vector<FrameBytes>> got;
    FrameSink sink(std::uint8_t who) {
        return [this, who](const FrameBytes& f) { got[who].push_back(f); };
    }
};

} // namespace

TEST_CASE("sessions start empty and get distinct ids") {
    Broker b;
    const auto s1 = b.create_session(RoutingMode::pair());
    const auto s2 = b.create_session(RoutingMode::mesh());
    CHECK(s1 != s2);
    CHECK(b.members(s1).empty());
    CHECK(b.sessions().size() == 2);
    CHECK(b.mode(s2).kind == RoutingKind::Mesh);
}

TEST_CASE("pair sessions take exactly two members") {
    Broker b;
    const auto s = b.create_session(RoutingMode::pair());
    CHECK(b.join(s, "alice") == 0);
    CHECK(b.join(s, "bob") == 1);
    try {
        b.join(s, "carol");
        FAIL("expected SessionFull");
    } catch (const RelayError& e) {
        CHECK(e.code() == RelayErrorCode::SessionFull);
    }
}

TEST_CASE("join errors") {
    Broker b;
    const auto s = b.create_session(RoutingMode::mesh());
    b.join(s, "alice");
    try {
        b.join(s, "alice");
        FAIL("expected DuplicateParticipant");
    } catch (const RelayError& e) {
        CHECK(e.code() == RelayErrorCode::DuplicateParticipant);
    }
    try {
        b.join(99, "x");
        FAIL("expected UnknownSession");
    } catch (const RelayError& e) {
        CHECK(e.code() == RelayErrorCode::UnknownSession);
    }
    try {
        b.leave(s, "nobody");
        FAIL("expected UnknownParticipant");
    } catch (const RelayError& e) {
        CHECK(e.code() == RelayErrorCode::UnknownParticipant);
    }
    CHECK_THROWS_AS(b.create_session(RoutingMode::fan_out("")), RelayError);
}

TEST_CASE("source ids reuse the lowest free slot") {
    std::mt19937_64 rng(17);
    Broker b;
    const auto s = b.create_session(RoutingMode::mesh());
    std::map<std::string, std::uint8_t> members;
    std::set<int> free_ids;
    for (int i = 0; i < 256; ++i) free_ids.insert(i);
    for (int step = 0; step < 3000; ++step) {
        const bool do_join = members.empty() || (members.size() < 40 && rng() % 2 == 0);
        if (do_join) {
            const std::string name = "p" + std::to_string(step);
            const int expected = *free_ids.begin();
            const auto got = b.join(s, name);
            REQUIRE(got == expected);
            free_ids.erase(expected);
            members[name] = got;
        } else {
            auto it = members.begin();
            std::advance(it, static_cast<long>(rng() % members.size()));
            b.leave(s, it->first);
            free_ids.insert(it->second);
            members.erase(it);
        }
    }
}

TEST_CASE("sessions cap at 256 members") {
    Broker b;
    const auto s = b.create_session(RoutingMode::mesh());
    for (int i = 0; i < 256; ++i) b.join(s, "p" + std::to_string(i));
    CHECK_THROWS_AS(b.join(s, "overflow"), RelayError);
}

TEST_CASE("routing matches brute-force enumeration") {
    // Every mode, every member count up to 4, every fan-out source choice
    // (including a source that has not joined), every sender id 0..4.
    for (int mode = 0; mode < 3; ++mode) {
        for (int n = 0; n <= 4; ++n) {
            if (mode == 0 && n > 2) continue;
            const int source_choices = mode == 1 ? n + 1 : 1;
            for (int src = 0; src < source_choices; ++src) {
                Broker b;
                const std::string source_name = "m" + std::to_string(src);
                const RoutingMode rm = mode == 0   ? RoutingMode::pair()
                                       : mode == 1 ? RoutingMode::fan_out(source_name)
                                                   : RoutingMode::mesh();
                const auto s = b.create_session(rm);
                Recorder rec;
                for (int m = 0; m < n; ++m) b.join(s, "m" + std::to_string(m), rec.sink(static_cast<std::uint8_t>(m)));

                for (int sender = 0; sender <= 4; ++sender) {
                    rec.got.clear();
                    const auto before = b.counters(s);
                    const auto res = b.route_frame(s, frame_from(static_cast<std::uint8_t>(sender), 1));

                    std::set<int> expected;
                    RouteDisposition disp = RouteDisposition::Delivered;
                    if (sender >= n) {
                        disp = RouteDisposition::UnknownSource;
                    } else if (mode == 1 && sender != src) {
                        disp = RouteDisposition::NonSourceTraffic;
                    } else {
                        for (int m = 0; m < n; ++m) {
                            if (m != sender) expected.insert(m);
                        }
                    }
                    INFO("mode " << mode << " n " << n << " src " << src << " sender " << sender);
                    REQUIRE(res.disposition == disp);
                    std::set<int> got;
                    for (const auto& [who, frames] : rec.got) {
                        REQUIRE(frames.size() == 1);
                        got.insert(who);
                    }
                    REQUIRE(got == expected);
                    REQUIRE(std::set<int>(res.recipients.begin(), res.recipients.end()) == expected);
                    const auto after = b.counters(s);
                    REQUIRE(after.unknown_source - before.unknown_source == (disp == RouteDisposition::UnknownSource));
                    REQUIRE(after.non_source - before.non_source == (disp == RouteDisposition::NonSourceTraffic));
                }
            }
        }
    }
}

TEST_CASE("pure routing function") {
    const std::vector<std::uint8_t> members{0, 1, 2, 3};
    CHECK(route_recipients(RoutingKind::Mesh, std::nullopt, members, 2) == std::vector<std::uint8_t>{0, 1, 3});
    CHECK(route_recipients(RoutingKind::FanOut, 0, members, 1).empty());
    CHECK(route_recipients(RoutingKind::FanOut, 0, members, 0) == std::vector<std::uint8_t>{1, 2, 3});
    CHECK(route_recipients(RoutingKind::Pair, std::nullopt, std::vector<std::uint8_t>{0, 1}, 0) ==
          std::vector<std::uint8_t>{1});
    CHECK(route_recipients(RoutingKind::Mesh, std::nullopt, members, 7).empty());
}

TEST_CASE("fan-out drops frames until the source joins") {
    Broker b;
    const auto s = b.create_session(RoutingMode::fan_out("leader"));
    Recorder rec;
    b.join(s, "a", rec.sink(0));
    b.join(s, "b", rec.sink(1));
    CHECK(b.route_frame(s, frame_from(0, 1)).disposition == RouteDisposition::NonSourceTraffic);
    CHECK(rec.got.empty());
    const auto lid = b.join(s, "leader", rec.sink(2));
    CHECK(b.route_frame(s, frame_from(lid, 2)).recipients == std::vector<std::uint8_t>{0, 1});
    CHECK(rec.got[0].size() == 1);
    CHECK(rec.got[1].size() == 1);
    CHECK(rec.got[2].empty());
}

TEST_CASE("undecodable frames are counted and dropped") {
    Broker b;
    const auto s = b.create_session(RoutingMode::pair());
    Recorder rec;
    b.join(s, "a", rec.sink(0));
    b.join(s, "b", rec.sink(1));
    auto f = frame_from(0, 1);
    f[12] ^= 0x01;
    const auto res = b.route_frame(s, f);
    CHECK(res.disposition == RouteDisposition::UndecodableFrame);
    CHECK(res.decode_error == DecodeErrorCode::BadChecksum);
    CHECK(b.counters(s).undecodable == 1);
    CHECK(rec.got.empty());
    CHECK(b.route_frame(s, std::vector<std::uint8_t>(5, 0xB5)).disposition == RouteDisposition::UndecodableFrame);
    CHECK(b.route_frame(77, frame_from(0, 1)).disposition == RouteDisposition::UnknownSession);
}

TEST_CASE("sender identity must match the frame source") {
    Broker b;
    const auto s = b.create_session(RoutingMode::pair());
    Recorder rec;
    b.join(s, "a", rec.sink(0));
    b.join(s, "b", rec.sink(1));
    const ParticipantId a = "a";
    CHECK(b.route_frame(s, frame_from(1, 1), &a).disposition == RouteDisposition::UnknownSource);
    CHECK(b.route_frame(s, frame_from(0, 1), &a).disposition == RouteDisposition::Delivered);
}

TEST_CASE("forwarded bytes are unmodified") {
    Broker b;
    const auto s = b.create_session(RoutingMode::mesh());
    Recorder rec;
    for (std::uint8_t i = 0; i < 4; ++i) b.join(s, "m" + std::to_string(i), rec.sink(i));
    const auto f = frame_from(3, 4242, 77);
    b.route_frame(s, f);
    for (std::uint8_t i = 0; i < 3; ++i) CHECK(rec.got[i].at(0) == f);
    CHECK(rec.got[3].empty());
}

TEST_CASE("log round trip") {
    TempDir dir;
    std::uint64_t now = 5;
    Broker b(Broker::Options{dir.path(), [&] { return now; }});
    const auto s = b.create_session(RoutingMode::pair());
    REQUIRE(std::filesystem::exists(b.log_path(s)));
    CHECK(replay_log(b.log_path(s)).empty());

    b.join(s, "a");
    b.join(s, "b");
    std::vector<FrameBytes> sent;
    for (std::uint16_t i = 0; i < 50; ++i) {
        const auto f = frame_from(i % 2, i);
        sent.push_back(f);
        now = i % 7 == 0 ? now : now + 3;
        b.route_frame(s, f);
    }
    // Non-routable traffic is not logged.
    b.route_frame(s, frame_from(9, 1));

    const auto replayed = replay_log(b.log_path(s));
    REQUIRE(replayed.size() == sent.size());
    for (std::size_t i = 0; i < sent.size(); ++i) {
        CHECK(replayed[i].frame == sent[i]);
        CHECK(replayed[i].order == decode_frame(sent[i]));
        if (i > 0) CHECK(replayed[i].recv_ts >= replayed[i - 1].recv_ts);
    }
    CHECK(std::filesystem::file_size(b.log_path(s)) == sent.size() * kLogRecordSize);
}

TEST_CASE("broker clock going backwards does not break log ordering") {
    TempDir dir;
    std::uint64_t now = 100;
    Broker b(Broker::Options{dir.path(), [&] { return now; }});
    const auto s = b.create_session(RoutingMode::pair());
    b.join(s, "a");
    b.route_frame(s, frame_from(0, 1));
    now = 50;
    b.route_frame(s, frame_from(0, 2));
    const auto r = replay_log(b.log_path(s));
    REQUIRE(r.size() == 2);
    CHECK(r[1].recv_ts >= r[0].recv_ts);
}

TEST_CASE("log truncated at every offset") {
    TempDir dir;
    const auto path = dir / "full.log";
    std::vector<FrameBytes> frames;
    {
        LogWriter w(path);
        for (std::uint16_t i = 0; i < 6; ++i) {
            frames.push_back(frame_from(1, i));
            w.append(1000 + i, frames.back());
        }
    }
    std::ifstream in(path, std::ios::binary);
    const std::string bytes((std::istreambuf_iterator<char>(in)), {});
    REQUIRE(bytes.size() == 6 * kLogRecordSize);

    for (std::size_t len = 0; len <= bytes.size(); ++len) {
        const auto cut = dir / "cut.log";
        {
            std::ofstream out(cut, std::ios::binary | std::ios::trunc);
            out.write(bytes.data(), static_cast<std::streamsize>(len));
        }
        LogReader reader(cut);
        std::vector<ReplayedOrder> got;
        std::optional<LogReplayError> fault;
        try {
            while (auto r = reader.next()) got.push_back(*r);
        } catch (const LogReplayError& e) {
            fault = e;
        }
        const std::size_t whole = len / kLogRecordSize;
        INFO("length " << len);
        REQUIRE(got.size() == whole);
        for (std::size_t i = 0; i < whole; ++i) {
            REQUIRE(got[i].frame == frames[i]);
            REQUIRE(got[i].recv_ts == 1000 + i);
        }
        if (len % kLogRecordSize == 0) {
            REQUIRE_FALSE(fault.has_value());
        } else {
            REQUIRE(fault.has_value());
            REQUIRE(fault->code() == LogFaultCode::TruncatedRecord);
            REQUIRE(fault->offset() == whole * kLogRecordSize);
        }
    }
}

TEST_CASE("corrupt log record reports a checksum failure") {
    TempDir dir;
    const auto path = dir / "bad.log";
    {
        LogWriter w(path);
        w.append(1, frame_from(0, 1));
        w.append(2, frame_from(0, 2));
    }
    {
        std::fstream f(path, std::ios::binary | std::ios::in | std::ios::out);
        f.seekp(kLogRecordSize + 8 + 10);
        f.put(static_cast<char>(0x42));
    }
    LogReader reader(path);
    REQUIRE(reader.next().has_value());
    try {
        reader.next();
        FAIL("expected ChecksumFailure");
    } catch (const LogReplayError& e) {
        CHECK(e.code() == LogFaultCode::ChecksumFailure);
        CHECK(e.offset() == kLogRecordSize + 8);
    }
}

TEST_CASE("concurrent routing keeps per-source order and logs every delivered frame") {
    const auto out = testsupport::run_relay_stress(2000);
    CHECK(out.fifo_ok);
    CHECK(out.no_echo_ok);
    CHECK(out.bytes_equal_ok);
    CHECK(out.complete_ok);
    INFO(out.detail);
    CHECK(out.log_matches);
}

#pragma once

// TCP front end for the Broker. One byte stream per client carries both
// newline-delimited JSON control messages (first byte '{') and raw 13-byte
// frames (first byte 0xB5), in either direction:
//
//   -> {"op":"create","mode":"pair"|"mesh"|"fanout","source":"<participant>"}
//   <- {"ok":true,"op":"create","session":1}
//   -> {"op":"join","session":1,"participant":"alice"}
//   <- {"ok":true,"op":"join","session":1,"source_id":0}
//   -> {"op":"leave"}
//   <- {"ok":true,"op":"leave"}
//   -> {"op":"stats","session":1}
//   <- {"ok":true,"op":"stats","routed":..,"undecodable":..,...}
//
// Failures answer {"ok":false,"op":...,"error":"SessionFull"} and friends.

#include <arpa/inet.h>
#include <cerrno>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstring>
#include <deque>
#include <list>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <json.hpp>

#include "breathsync/relay.hpp"

namespace breathsync {

class SocketError : public std::runtime_error {
public:
    SocketError(const std::string& what, int err)
        : std::runtime_error(what + ": " + std::strerror(err)), errno_(err) {}
    int error_number() const noexcept { return errno_; }
    bool address_in_use() const noexcept { return errno_ == EADDRINUSE; }

private:
    int errno_;
};

namespace net {

/// Owning file descriptor.
class Fd {
public:
    Fd() = default;
    explicit Fd(int fd) : fd_(fd) {}
    Fd(Fd&& o) noexcept : fd_(std::exchange(o.fd_, -1)) {}
    Fd& operator=(Fd&& o) noexcept {
        if (this != &o) {
            reset();
            fd_ = std::exchange(o.fd_, -1);
        }
        return *this;
    }
    Fd(const Fd&) = delete;
    Fd& operator=(const Fd&) = delete;
    ~Fd() { reset(); }

    int get() const noexcept { return fd_; }
    explicit operator bool() const noexcept { return fd_ >= 0; }
    void reset() noexcept {
        if (fd_ >= 0) ::close(fd_);
        fd_ = -1;
    }

private:
    int fd_ = -1;
};

inline bool send_all(int fd, const void* data, std::size_t len) {
    const auto* p = static_cast<const char*>(data);
    while (len > 0) {
        const ssize_t n = ::send(fd, p, len, MSG_NOSIGNAL);
        if (n < 0) {
            if (errno == EINTR) continue;
            return false;
        }
        p += n;
        len -= static_cast<std::size_t>(n);
    }
    return true;
}

inline sockaddr_in resolve_ipv4(const std::string& host, std::uint16_t port) {
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(port);
    const std::string h = host.empty() || host == "localhost" ? "127.0.0.1" : host;
    if (::inet_pton(AF_INET, h.c_str(), &addr.sin_addr) != 1) {
        addrinfo hints{};
        hints.ai_family = AF_INET;
        addrinfo* res = nullptr;
        if (::getaddrinfo(h.c_str(), nullptr, &hints, &res) != 0 || !res) {
            throw SocketError("cannot resolve " + h, EINVAL);
        }
        addr.sin_addr = reinterpret_cast<sockaddr_in*>(res->ai_addr)->sin_addr;
        ::freeaddrinfo(res);
    }
    return addr;
}

/// Splits an incoming byte stream into JSON lines and frames.
class StreamDemux {
public:
    struct Item {
        enum class Kind { Json, Frame, Junk } kind;
        std::string json;
        FrameBytes frame{};
    };

    void feed(const char* data, std::size_t len) { buf_.append(data, len); }

    std::optional<Item> next() {
        while (!buf_.empty()) {
            const auto c = static_cast<unsigned char>(buf_.front());
            if (c == kFrameSync) {
                if (buf_.size() < kFrameSize) return std::nullopt;
                Item it{Item::Kind::Frame, {}, {}};
                for (std::size_t i = 0; i < kFrameSize; ++i) it.frame[i] = static_cast<std::uint8_t>(buf_[i]);
                buf_.erase(0, kFrameSize);
                return it;
            }
            if (c == '{') {
                const auto nl = buf_.find('\n');
                if (nl == std::string::npos) return std::nullopt;
                Item it{Item::Kind::Json, buf_.substr(0, nl), {}};
                buf_.erase(0, nl + 1);
                return it;
            }
            buf_.erase(0, 1);
            if (c == '\n' || c == '\r' || c == ' ' || c == '\t') continue;
            return Item{Item::Kind::Junk, {}, {}};
        }
        return std::nullopt;
    }

private:
    std::string buf_;
};

} // namespace net

struct RelayServerOptions {
    std::string host = "127.0.0.1";
    std::uint16_t port = 0;  // 0 picks an ephemeral port
    std::filesystem::path log_dir;
};

class RelayServer {
public:
    explicit RelayServer(RelayServerOptions opts)
        : opts_(std::move(opts)), broker_(Broker::Options{opts_.log_dir, {}}) {
        net::Fd fd(::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0));
        if (!fd) throw SocketError("socket", errno);
        int one = 1;
        ::setsockopt(fd.get(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
        const sockaddr_in addr = net::resolve_ipv4(opts_.host, opts_.port);
        if (::bind(fd.get(), reinterpret_cast<const sockaddr*>(&addr), sizeof addr) != 0) {
            throw SocketError("bind " + opts_.host + ":" + std::to_string(opts_.port), errno);
        }
        if (::listen(fd.get(), 64) != 0) throw SocketError("listen", errno);
        sockaddr_in bound{};
        socklen_t len = sizeof bound;
        ::getsockname(fd.get(), reinterpret_cast<sockaddr*>(&bound), &len);
        port_ = ntohs(bound.sin_port);
        listen_fd_ = std::move(fd);
    }

    RelayServer(const RelayServer&) = delete;
    RelayServer& operator=(const RelayServer&) = delete;
    ~RelayServer() { stop(); }

    std::uint16_t port() const noexcept { return port_; }
    Broker& broker() noexcept { return broker_; }
    std::uint64_t junk_bytes() const noexcept { return junk_bytes_.load(); }
    std::uint64_t unbound_frames() const noexcept { return unbound_frames_.load(); }

    /// Accept loop on a background thread.
    void start() {
        accept_thread_ = std::thread([this] { accept_loop(); });
    }

    /// Stops accepting, closes every connection and joins all threads. Each
    /// log record is written whole, so logs end on a record boundary.
    void stop() {
        if (stopping_.exchange(true)) {
            if (accept_thread_.joinable()) accept_thread_.join();
            return;
        }
        if (accept_thread_.joinable()) accept_thread_.join();
        std::list<std::shared_ptr<Connection>> conns;
        {
            std::lock_guard lock(conns_mutex_);
            conns.swap(conns_);
        }
        for (auto& c : conns) c->shutdown();
        for (auto& c : conns) c->join();
        listen_fd_.reset();
    }

private:
    struct Connection : std::enable_shared_from_this<Connection> {
        net::Fd fd;
        std::thread reader;
        std::thread writer;
        std::mutex out_mutex;
        std::condition_variable out_cv;
        std::deque<std::string> outbox;
        bool closed = false;
        std::optional<SessionId> session;
        ParticipantId participant;
        std::uint8_t source_id = 0;

        void enqueue(std::string bytes) {
            {
                std::lock_guard lock(out_mutex);
                if (closed) return;
                outbox.push_back(std::move(bytes));
            }
            out_cv.notify_one();
        }

        void shutdown() {
            {
                std::lock_guard lock(out_mutex);
                closed = true;
            }
            out_cv.notify_all();
            ::shutdown(fd.get(), SHUT_RDWR);
        }

        void join() {
            if (reader.joinable()) reader.join();
            if (writer.joinable()) writer.join();
        }
    };

    void accept_loop() {
        std::uint64_t counter = 0;
        while (!stopping_.load()) {
            pollfd p{listen_fd_.get(), POLLIN, 0};
            const int rc = ::poll(&p, 1, 100);
            if (rc <= 0 || !(p.revents & POLLIN)) continue;
            const int cfd = ::accept4(listen_fd_.get(), nullptr, nullptr, SOCK_CLOEXEC);
            if (cfd < 0) continue;
            int one = 1;
            ::setsockopt(cfd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
            auto conn = std::make_shared<Connection>();
            conn->fd = net::Fd(cfd);
            conn->participant = "conn-" + std::to_string(++counter);
            {
                std::lock_guard lock(conns_mutex_);
                if (stopping_.load()) break;
                conns_.push_back(conn);
            }
            conn->writer = std::thread([conn] { writer_loop(*conn); });
            conn->reader = std::thread([this, conn] { reader_loop(conn); });
        }
    }

    static void writer_loop(Connection& c) {
        for (;;) {
            std::string chunk;
            {
                std::unique_lock lock(c.out_mutex);
                c.out_cv.wait(lock, [&] { return c.closed || !c.outbox.empty(); });
                if (c.outbox.empty()) return;
                // Coalesce what is queued into one send.
                while (!c.outbox.empty()) {
                    chunk += c.outbox.front();
                    c.outbox.pop_front();
                }
            }
            if (!net::send_all(c.fd.get(), chunk.data(), chunk.size())) return;
        }
    }

    void reader_loop(std::shared_ptr<Connection> conn) {
        net::StreamDemux demux;
        char buf[4096];
        for (;;) {
            const ssize_t n = ::recv(conn->fd.get(), buf, sizeof buf, 0);
            if (n < 0 && errno == EINTR) continue;
            if (n <= 0) break;
            demux.feed(buf, static_cast<std::size_t>(n));
            while (auto item = demux.next()) {
                switch (item->kind) {
                case net::StreamDemux::Item::Kind::Frame:
                    on_frame(*conn, item->frame);
                    break;
                case net::StreamDemux::Item::Kind::Json:
                    conn->enqueue(on_control(*conn, item->json).dump() + "\n");
                    break;
                case net::StreamDemux::Item::Kind::Junk:
                    ++junk_bytes_;
                    break;
                }
            }
        }
        leave_session(*conn);
        {
            std::lock_guard lock(conn->out_mutex);
            conn->closed = true;
        }
        conn->out_cv.notify_all();
    }

    void on_frame(Connection& c, const FrameBytes& frame) {
        if (!c.session) {
            ++unbound_frames_;
            return;
        }
        broker_.route_frame(*c.session, frame, &c.participant);
    }

    nlohmann::json on_control(Connection& c, const std::string& line) {
        nlohmann::json reply;
        std::string op;
        try {
            const auto req = nlohmann::json::parse(line);
            op = req.value("op", "");
            reply["op"] = op;
            if (op == "create") {
                const auto mode_name = req.value("mode", "");
                RoutingMode mode;
                if (mode_name == "pair") mode = RoutingMode::pair();
                else if (mode_name == "mesh") mode = RoutingMode::mesh();
                else if (mode_name == "fanout") mode = RoutingMode::fan_out(req.value("source", ""));
                else throw RelayError(RelayErrorCode::InvalidMode, mode_name);
                reply["session"] = broker_.create_session(mode);
            } else if (op == "join") {
                if (c.session) throw RelayError(RelayErrorCode::DuplicateParticipant, "connection already joined");
                const SessionId sid = req.at("session").get<SessionId>();
                const ParticipantId pid = req.value("participant", c.participant);
                auto weak = std::weak_ptr<Connection>(c.shared_from_this());
                c.source_id = broker_.join(sid, pid, [weak](const FrameBytes& f) {
                    if (auto conn = weak.lock()) conn->enqueue(std::string(f.begin(), f.end()));
                });
                c.session = sid;
                c.participant = pid;
                reply["session"] = sid;
                reply["source_id"] = c.source_id;
            } else if (op == "leave") {
                if (!c.session) throw RelayError(RelayErrorCode::UnknownParticipant, "not joined");
                leave_session(c);
            } else if (op == "stats") {
                const auto k = broker_.counters(req.at("session").get<SessionId>());
                reply["routed"] = k.routed;
                reply["deliveries"] = k.deliveries;
                reply["undecodable"] = k.undecodable;
                reply["unknown_source"] = k.unknown_source;
                reply["non_source"] = k.non_source;
            } else {
                return {{"ok", false}, {"op", op}, {"error", "BadRequest"}, {"detail", "unknown op '" + op + "'"}};
            }
            reply["ok"] = true;
        } catch (const RelayError& e) {
            reply = {{"ok", false}, {"op", op}, {"error", std::string(to_string(e.code()))}};
        } catch (const nlohmann::json::exception& e) {
            reply = {{"ok", false}, {"op", op}, {"error", "BadRequest"}, {"detail", e.what()}};
        }
        return reply;
    }

    void leave_session(Connection& c) {
        if (!c.session) return;
        try {
            broker_.leave(*c.session, c.participant);
        } catch (const RelayError&) {
        }
        c.session.reset();
    }

    RelayServerOptions opts_;
    Broker broker_;
    net::Fd listen_fd_;
    std::uint16_t port_ = 0;
    std::atomic<bool> stopping_{false};
    std::thread accept_thread_;
    std::mutex conns_mutex_;
    std::list<std::shared_ptr<Connection>> conns_;
    std::atomic<std::uint64_t> junk_bytes_{0};
    std::atomic<std::uint64_t> unbound_frames_{0};
};

/// Blocking client for the relay's byte-stream protocol.
class RelayClient {
public:
    RelayClient(const std::string& host, std::uint16_t port) {
        net::Fd fd(::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0));
        if (!fd) throw SocketError("socket", errno);
        const sockaddr_in addr = net::resolve_ipv4(host, port);
        if (::connect(fd.get(), reinterpret_cast<const sockaddr*>(&addr), sizeof addr) != 0) {
            throw SocketError("connect", errno);
        }
        int one = 1;
        ::setsockopt(fd.get(), IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
        fd_ = std::move(fd);
        reader_ = std::thread([this] { read_loop(); });
    }

    RelayClient(const RelayClient&) = delete;
    RelayClient& operator=(const RelayClient&) = delete;
    ~RelayClient() { close(); }

    /// Sends one control message and waits for its reply.
    nlohmann::json request(const nlohmann::json& msg, std::chrono::milliseconds timeout = std::chrono::seconds(5)) {
        send_raw(msg.dump() + "\n");
        std::unique_lock lock(mutex_);
        if (!cv_.wait_for(lock, timeout, [&] { return !replies_.empty() || eof_; }) || replies_.empty()) {
            throw SocketError("no reply from relay", ETIMEDOUT);
        }
        auto reply = std::move(replies_.front());
        replies_.pop_front();
        return reply;
    }

    void send_frame(const FrameBytes& f) { send_raw(std::string(f.begin(), f.end())); }

    void send_raw(const std::string& bytes) {
        std::lock_guard lock(send_mutex_);
        if (!net::send_all(fd_.get(), bytes.data(), bytes.size())) throw SocketError("send", errno);
    }

    std::optional<FrameBytes> receive_frame(std::chrono::milliseconds timeout) {
        std::unique_lock lock(mutex_);
        if (!cv_.wait_for(lock, timeout, [&] { return !frames_.empty() || eof_; }) || frames_.empty()) {
            return std::nullopt;
        }
        const auto f = frames_.front();
        frames_.pop_front();
        return f;
    }

    void close() {
        if (fd_) ::shutdown(fd_.get(), SHUT_RDWR);
        if (reader_.joinable()) reader_.join();
        fd_.reset();
    }

private:
    void read_loop() {
        net::StreamDemux demux;
        char buf[4096];
        for (;;) {
            const ssize_t n = ::recv(fd_.get(), buf, sizeof buf, 0);
            if (n < 0 && errno == EINTR) continue;
            if (n <= 0) break;
            demux.feed(buf, static_cast<std::size_t>(n));
            std::lock_guard lock(mutex_);
            while (auto item = demux.next()) {
                if (item->kind == net::StreamDemux::Item::Kind::Frame) frames_.push_back(item->frame);
                else if (item->kind == net::StreamDemux::Item::Kind::Json) replies_.push_back(nlohmann::json::parse(item->json, nullptr, false));
            }
            cv_.notify_all();
        }
        std::lock_guard lock(mutex_);
        eof_ = true;
        cv_.notify_all();
    }

    net::Fd fd_;
    std::thread reader_;
    std::mutex send_mutex_;
    std::mutex mutex_;
    std::condition_variable cv_;
    std::deque<FrameBytes> frames_;
    std::deque<nlohmann::json> replies_;
    bool eof_ = false;
};

} // namespace breathsync

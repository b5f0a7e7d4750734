// breathsync: simulate, relay, ingest, envelope and analyze subcommands.
//
// Exit codes: 0 ok, 2 usage/config error, 3 runtime/data error.

#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "breathsync/config.hpp"
#include "breathsync/envelope.hpp"
#include "breathsync/io.hpp"
#include "breathsync/relay_server.hpp"
#include "breathsync/respiration.hpp"
#include "breathsync/sim.hpp"
#include "breathsync/sync.hpp"

namespace fs = std::filesystem;
using namespace breathsync;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitRuntime = 3;

std::ofstream open_out(const fs::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    return out;
}

std::vector<TimedValue> to_timed(const std::vector<RespirationSample>& trace, bool filtered) {
    std::vector<TimedValue> out;
    out.reserve(trace.size());
    for (const auto& s : trace) out.push_back({static_cast<double>(s.t_ms), filtered ? s.az_filt : s.az_raw});
    return out;
}

void write_report(const fs::path& path, nlohmann::json report) {
    auto out = open_out(path);
    out << report.dump(2) << '\n';
}

// ---------------------------------------------------------------------------

struct SimulateArgs {
    std::string config_path;
    std::string out_dir;
    std::vector<std::string> overrides;
};

int cmd_simulate(const SimulateArgs& a) {
    KeyValueConfig kv;
    Scenario scenario;
    try {
        if (!a.config_path.empty()) {
            std::ifstream in(a.config_path);
            if (!in) throw ConfigError("cannot read config " + a.config_path);
            kv = KeyValueConfig::parse(in);
        }
        for (const auto& o : a.overrides) {
            const auto eq = o.find('=');
            if (eq == std::string::npos) throw ConfigError("override '" + o + "' is not key=value");
            kv.set(std::string(detail::trim(o.substr(0, eq))), std::string(detail::trim(o.substr(eq + 1))));
        }
        scenario = scenario_from_config(kv);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kExitUsage;
    }

    const fs::path out_dir = a.out_dir;
    fs::create_directories(out_dir);
    const fs::path log_stage = out_dir / ".relay";
    fs::remove_all(log_stage);
    scenario.loop.log_dir = log_stage;

    const auto result = run_closed_loop(scenario.loop);
    fs::rename(result.log_path, out_dir / "relay.log");
    fs::remove_all(log_stage);

    {
        auto out = open_out(out_dir / "leader_trace.csv");
        write_trace_csv(out, result.leader_trace);
    }
    {
        auto out = open_out(out_dir / "follower_trace.csv");
        write_trace_csv(out, result.follower_trace);
    }

    const bool filtered = scenario.column == "az_filt";
    const auto pair = resample_align(to_timed(result.leader_trace, filtered), to_timed(result.follower_trace, filtered));
    const auto report = analyze_sync(pair, scenario.analysis);
    {
        auto out = open_out(out_dir / "windows.csv");
        write_window_csv(out, report.windows);
    }

    auto j = to_json(report);
    j["config_hash"] = "fnv1a64:" + hex64(fnv1a64(kv.canonical()));
    j["seeds"] = {{"leader", scenario.loop.leader.body.rng_seed},
                  {"follower", scenario.loop.follower.body.rng_seed},
                  {"link", scenario.loop.link.rng_seed}};
    j["pattern"] = to_string(scenario.loop.pattern);
    j["duration_ms"] = scenario.loop.duration_ms;
    j["tail_ms"] = scenario.analysis.tail_ms;
    j["lag_compensated"] = scenario.analysis.section.lag_compensate;
    j["column"] = scenario.column;
    j["orders_sent"] = result.orders_sent;
    j["frames_routed"] = result.relay_counters.routed;
    write_report(out_dir / "report.json", j);

    std::cout << "pearson_r=" << report.pearson_r << " lag_ms=" << report.lag_ms
              << " section=" << (report.section ? "yes" : "none") << '\n';
    return kExitOk;
}

// ---------------------------------------------------------------------------

struct RelayArgs {
    std::string listen = "127.0.0.1:7400";
    std::string log_dir = "relay-logs";
};

int cmd_relay(const RelayArgs& a) {
    const auto colon = a.listen.rfind(':');
    std::uint64_t port = 0;
    if (colon == std::string::npos || !detail::parse_number(std::string_view(a.listen).substr(colon + 1), port) ||
        port > 65535) {
        std::cerr << "invalid listen endpoint '" << a.listen << "' (want host:port)\n";
        return kExitUsage;
    }

    // Termination signals are collected synchronously below.
    sigset_t signals;
    sigemptyset(&signals);
    sigaddset(&signals, SIGINT);
    sigaddset(&signals, SIGTERM);
    pthread_sigmask(SIG_BLOCK, &signals, nullptr);

    std::unique_ptr<RelayServer> server;
    try {
        server = std::make_unique<RelayServer>(
            RelayServerOptions{a.listen.substr(0, colon), static_cast<std::uint16_t>(port), a.log_dir});
    } catch (const SocketError& e) {
        std::cerr << "cannot listen on " << a.listen << ": " << e.what() << '\n';
        return kExitUsage;
    }
    server->start();
    std::cout << "listening " << a.listen.substr(0, colon) << ':' << server->port() << std::endl;

    int sig = 0;
    sigwait(&signals, &sig);
    server->stop();
    std::cerr << "relay stopped (signal " << sig << ")\n";
    return kExitOk;
}

// ---------------------------------------------------------------------------

struct IngestArgs {
    std::string csv_path;
    std::string out_dir;
    bool inspiration_at_maximum = false;
};

int cmd_ingest(const IngestArgs& a) {
    std::ifstream in(a.csv_path);
    if (!in) {
        std::cerr << "cannot read " << a.csv_path << '\n';
        return kExitRuntime;
    }
    std::vector<ImuFramePair> frames;
    try {
        frames = read_imu_csv(in);
    } catch (const FormatError& e) {
        std::cerr << a.csv_path << ": " << e.what() << '\n';
        return kExitRuntime;
    }

    DetectorConfig det;
    det.inspiration_at_minimum = !a.inspiration_at_maximum;
    RespirationPipeline pipeline({}, det);
    std::vector<RespirationSample> samples;
    std::vector<PhaseEvent> events;
    samples.reserve(frames.size());
    for (std::size_t i = 0; i < frames.size(); ++i) {
        try {
            auto step = pipeline.process(frames[i]);
            samples.push_back(step.sample);
            if (step.event) events.push_back(*step.event);
        } catch (const StreamError& e) {
            // Data rows start on line 2; blank lines are not expected mid-file.
            std::cerr << a.csv_path << ": line " << i + 2 << ": " << e.what() << '\n';
            return kExitRuntime;
        }
    }

    const fs::path out_dir = a.out_dir;
    fs::create_directories(out_dir);
    {
        auto out = open_out(out_dir / "respiration.csv");
        write_trace_csv(out, samples);
    }
    {
        auto out = open_out(out_dir / "events.jsonl");
        write_events_jsonl(out, events);
    }
    std::cout << samples.size() << " samples, " << events.size() << " events\n";
    return kExitOk;
}

// ---------------------------------------------------------------------------

struct EnvelopeArgs {
    std::string pattern = "coupled";
    double period_ms = 2000.0;
    double depth = 1.0;
    std::string out_dir;
    bool waveform = false;
    unsigned mask = 0x0F;
};

int cmd_envelope(const EnvelopeArgs& a) {
    const auto pattern = parse_pattern(a.pattern);
    if (!pattern) {
        std::cerr << "unknown pattern '" << a.pattern << "' (coupled | inversed | discrete)\n";
        return kExitUsage;
    }
    std::vector<EnvelopeSample> rows;
    try {
        rows = envelope_cycle(*pattern, a.period_ms, a.depth);
    } catch (const ParameterError& e) {
        std::cerr << "invalid envelope parameters: " << e.what() << '\n';
        return kExitUsage;
    }
    if (a.out_dir.empty()) {
        write_envelope_csv(std::cout, rows);
        return kExitOk;
    }
    const fs::path out_dir = a.out_dir;
    fs::create_directories(out_dir);
    {
        auto out = open_out(out_dir / "envelope.csv");
        write_envelope_csv(out, rows);
    }
    if (a.waveform) {
        auto out = open_out(out_dir / "waveform.csv");
        write_waveform_csv(out, synthesize_waveform(rows, ActuatorConfig{}, static_cast<std::uint8_t>(a.mask)));
    }
    return kExitOk;
}

// ---------------------------------------------------------------------------

struct AnalyzeArgs {
    std::string trace_a;
    std::string trace_b;
    std::string out_dir;
    std::string column = "az_filt";
    bool no_lag_compensation = false;
    double tail_ms = 0.0;
};

int cmd_analyze(const AnalyzeArgs& a) {
    std::vector<TimedValue> x, y;
    try {
        std::ifstream ia(a.trace_a), ib(a.trace_b);
        if (!ia || !ib) throw std::runtime_error("cannot read input traces");
        x = read_trace_csv(ia, a.column);
        y = read_trace_csv(ib, a.column);
    } catch (const std::exception& e) {
        std::cerr << "analyze: " << e.what() << '\n';
        return kExitRuntime;
    }

    AnalysisOptions opt;
    opt.tail_ms = a.tail_ms;
    opt.section.lag_compensate = !a.no_lag_compensation;
    SyncReport report;
    try {
        report = analyze_sync(resample_align(x, y), opt);
    } catch (const AnalysisError& e) {
        std::cerr << "analyze: " << e.what() << '\n';
        return kExitRuntime;
    }

    const fs::path out_dir = a.out_dir;
    fs::create_directories(out_dir);
    {
        auto out = open_out(out_dir / "windows.csv");
        write_window_csv(out, report.windows);
    }
    std::ostringstream args;
    args << "trace_a=" << a.trace_a << "\ntrace_b=" << a.trace_b << "\ncolumn=" << a.column
         << "\nlag_compensate=" << !a.no_lag_compensation << "\ntail_ms=" << a.tail_ms << '\n';
    auto j = to_json(report);
    j["config_hash"] = "fnv1a64:" + hex64(fnv1a64(args.str()));
    j["seeds"] = nlohmann::json::object();
    j["column"] = a.column;
    j["lag_compensated"] = !a.no_lag_compensation;
    j["tail_ms"] = a.tail_ms;
    write_report(out_dir / "report.json", j);
    std::cout << "pearson_r=" << report.pearson_r << " lag_ms=" << report.lag_ms << '\n';
    return kExitOk;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Breath-synchronization toolkit: simulation, relay, ingestion and analysis"};
    app.require_subcommand(1);

    SimulateArgs sim;
    auto* simulate = app.add_subcommand("simulate", "Run a leader/follower closed-loop session");
    simulate->add_option("-c,--config", sim.config_path, "Scenario file (key = value)");
    simulate->add_option("-o,--out-dir", sim.out_dir, "Output directory")->required();
    simulate->add_option("-s,--set", sim.overrides, "Override a scenario key (key=value)");

    RelayArgs relay;
    auto* relay_cmd = app.add_subcommand("relay", "Serve the breath relay until SIGINT/SIGTERM");
    relay_cmd->add_option("-l,--listen", relay.listen, "host:port (port 0 = ephemeral)")->capture_default_str();
    relay_cmd->add_option("--log-dir", relay.log_dir, "Directory for session logs")->capture_default_str();

    IngestArgs ingest;
    auto* ingest_cmd = app.add_subcommand("ingest", "Process a recorded dual-IMU CSV");
    ingest_cmd->add_option("csv", ingest.csv_path, "Input CSV")->required();
    ingest_cmd->add_option("-o,--out-dir", ingest.out_dir, "Output directory")->required();
    ingest_cmd->add_flag("--inspiration-at-maximum", ingest.inspiration_at_maximum,
                         "Treat local maxima of a_z as inspiration onsets");

    EnvelopeArgs env;
    auto* envelope = app.add_subcommand("envelope", "Dump one inspiration+expiration envelope cycle");
    envelope->add_option("-p,--pattern", env.pattern, "coupled | inversed | discrete")->capture_default_str();
    envelope->add_option("-T,--period-ms", env.period_ms, "Expected phase duration (ms)")->capture_default_str();
    envelope->add_option("-d,--depth", env.depth, "Breath depth in [0,1]")->capture_default_str();
    envelope->add_option("-o,--out-dir", env.out_dir, "Write envelope.csv here instead of stdout");
    envelope->add_flag("--waveform", env.waveform, "Also write waveform.csv (needs --out-dir)");
    envelope->add_option("--mask", env.mask, "Channel mask for the waveform")->check(CLI::Range(0u, 15u));

    AnalyzeArgs an;
    auto* analyze = app.add_subcommand("analyze", "Sync report for two trace CSVs");
    analyze->add_option("trace_a", an.trace_a, "First trace CSV")->required();
    analyze->add_option("trace_b", an.trace_b, "Second trace CSV")->required();
    analyze->add_option("-o,--out-dir", an.out_dir, "Output directory")->required();
    analyze->add_option("--column", an.column, "Value column")->capture_default_str();
    analyze->add_flag("--no-lag-compensation", an.no_lag_compensation, "Score r at zero lag");
    analyze->add_option("--tail-ms", an.tail_ms, "Score r over the trailing span only (0 = all)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (*simulate) return cmd_simulate(sim);
        if (*relay_cmd) return cmd_relay(relay);
        if (*ingest_cmd) return cmd_ingest(ingest);
        if (*envelope) return cmd_envelope(env);
        if (*analyze) return cmd_analyze(an);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitRuntime;
    }
    return kExitUsage;
}

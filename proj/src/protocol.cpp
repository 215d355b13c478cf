#include "haloprobe/protocol.hpp"

#include <cerrno>
#include <csignal>
#include <cstring>
#include <set>

#include <fcntl.h>
#include <poll.h>
#include <sys/wait.h>
#include <unistd.h>

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "haloprobe/error.hpp"

namespace haloprobe {

using json = nlohmann::json;

namespace {

void require_keys(const json& j, const std::set<std::string>& keys, const char* what) {
    if (!j.is_object()) fail(ErrorKind::protocol, std::string(what) + " is not an object");
    for (const auto& k : keys) {
        if (!j.contains(k)) fail(ErrorKind::protocol, std::string(what) + " lacks '" + k + "'");
    }
    for (const auto& item : j.items()) {
        if (!keys.count(item.key())) {
            fail(ErrorKind::protocol,
                 std::string(what) + " has unexpected field '" + item.key() + "'");
        }
    }
}

void check_version(const json& j) {
    if (!j.contains("version") || !j.at("version").is_number_integer() ||
        j.at("version").get<int>() != kProtocolVersion) {
        fail(ErrorKind::protocol, "protocol version missing or unsupported");
    }
}

template <typename F>
auto as_protocol(F&& f) {
    try {
        return f();
    } catch (const json::exception& e) {
        fail(ErrorKind::protocol, std::string("malformed message: ") + e.what());
    } catch (const Error& e) {
        if (e.kind() == ErrorKind::protocol) throw;
        fail(ErrorKind::protocol, e.what());
    }
}

}  // namespace

json to_json(const GenerationRequest& r) {
    return {{"version", r.version},
            {"session_id", r.session_id},
            {"prefix_token_ids", r.prefix_token_ids},
            {"n_candidates", r.n_candidates},
            {"temperature", r.temperature},
            {"max_new_tokens", r.max_new_tokens}};
}

json to_json(const Candidate& c) {
    json traces = json::array();
    for (const auto& t : c.traces) traces.push_back(to_json(t));
    return {{"token_ids", c.token_ids},
            {"token_texts", c.token_texts},
            {"traces", std::move(traces)},
            {"cumulative_logprob", c.cumulative_logprob},
            {"ended", c.ended}};
}

json to_json(const GenerationResponse& r) {
    json cands = json::array();
    for (const auto& c : r.candidates) cands.push_back(to_json(c));
    return {{"version", r.version}, {"candidates", std::move(cands)}};
}

GenerationRequest request_from_json(const json& j) {
    return as_protocol([&] {
        require_keys(j,
                     {"version", "session_id", "prefix_token_ids", "n_candidates", "temperature",
                      "max_new_tokens"},
                     "request");
        check_version(j);
        GenerationRequest r;
        r.session_id = j.at("session_id").get<std::string>();
        r.prefix_token_ids = j.at("prefix_token_ids").get<std::vector<std::int64_t>>();
        r.n_candidates = j.at("n_candidates").get<int>();
        r.temperature = j.at("temperature").get<double>();
        r.max_new_tokens = j.at("max_new_tokens").get<int>();
        if (r.n_candidates < 1 || r.max_new_tokens < 1 || r.temperature < 0) {
            fail(ErrorKind::protocol, "request parameters out of range");
        }
        return r;
    });
}

GenerationResponse response_from_json(const json& j) {
    return as_protocol([&] {
        if (j.contains("error")) {
            fail(ErrorKind::protocol, "generator error: " + j.at("error").get<std::string>());
        }
        require_keys(j, {"version", "candidates"}, "response");
        check_version(j);
        GenerationResponse r;
        for (const auto& c : j.at("candidates")) {
            require_keys(c, {"token_ids", "token_texts", "traces", "cumulative_logprob", "ended"},
                         "candidate");
            Candidate cand;
            cand.token_ids = c.at("token_ids").get<std::vector<std::int64_t>>();
            cand.token_texts = c.at("token_texts").get<std::vector<std::string>>();
            for (const auto& t : c.at("traces")) cand.traces.push_back(token_trace_from_json(t));
            cand.cumulative_logprob = c.at("cumulative_logprob").get<double>();
            cand.ended = c.at("ended").get<bool>();
            r.candidates.push_back(std::move(cand));
        }
        return r;
    });
}

std::string hello_line(const CorpusHeader& header) {
    return json{{"version", kProtocolVersion},
                {"kind", "haloprobe-generator"},
                {"header", json::parse(serialize_header(header))}}
        .dump();
}

CorpusHeader parse_hello(const std::string& line) {
    return as_protocol([&] {
        const auto j = json::parse(line);
        require_keys(j, {"version", "kind", "header"}, "hello");
        check_version(j);
        if (j.at("kind") != "haloprobe-generator") {
            fail(ErrorKind::protocol, "peer is not a haloprobe generator");
        }
        return parse_header(j.at("header").dump());
    });
}

void check_response(const GenerationRequest& request, const GenerationResponse& response) {
    if (response.candidates.empty()) {
        fail(ErrorKind::protocol, "generator returned zero candidates");
    }
    if (static_cast<int>(response.candidates.size()) > request.n_candidates) {
        fail(ErrorKind::protocol, "generator returned more candidates than requested");
    }
    const auto& prefix = request.prefix_token_ids;
    for (std::size_t k = 0; k < response.candidates.size(); ++k) {
        const auto& c = response.candidates[k];
        const std::string where = "candidate " + std::to_string(k);
        if (c.token_ids.size() < prefix.size() ||
            !std::equal(prefix.begin(), prefix.end(), c.token_ids.begin())) {
            fail(ErrorKind::protocol, where + " does not extend the prefix");
        }
        if (c.token_texts.size() != c.token_ids.size()) {
            fail(ErrorKind::protocol, where + ": token_texts and token_ids differ in length");
        }
        const std::size_t added = c.token_ids.size() - prefix.size();
        if (static_cast<int>(added) > request.max_new_tokens) {
            fail(ErrorKind::protocol, where + " exceeds max_new_tokens");
        }
        if (c.traces.size() != added) {
            fail(ErrorKind::protocol, where + ": expected one trace per new token");
        }
        for (std::size_t i = 0; i < added; ++i) {
            if (c.traces[i].token_index != static_cast<int>(prefix.size() + i)) {
                fail(ErrorKind::protocol, where + ": trace token indices are not contiguous");
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Child process

ChildProcessTransport::ChildProcessTransport(std::vector<std::string> argv,
                                             std::chrono::milliseconds timeout)
    : timeout_(timeout) {
    if (argv.empty()) fail(ErrorKind::config, "generator command is empty");
    int in_pipe[2];
    int out_pipe[2];
    if (pipe(in_pipe) != 0 || pipe(out_pipe) != 0) {
        fail(ErrorKind::io, std::string("pipe: ") + std::strerror(errno));
    }
    pid_ = fork();
    if (pid_ < 0) fail(ErrorKind::io, std::string("fork: ") + std::strerror(errno));
    if (pid_ == 0) {
        dup2(in_pipe[0], STDIN_FILENO);
        dup2(out_pipe[1], STDOUT_FILENO);
        close(in_pipe[0]);
        close(in_pipe[1]);
        close(out_pipe[0]);
        close(out_pipe[1]);
        std::vector<char*> args;
        for (auto& a : argv) args.push_back(a.data());
        args.push_back(nullptr);
        execvp(args[0], args.data());
        _exit(127);
    }
    close(in_pipe[0]);
    close(out_pipe[1]);
    to_child_ = in_pipe[1];
    from_child_ = out_pipe[0];
    std::signal(SIGPIPE, SIG_IGN);
}

ChildProcessTransport::~ChildProcessTransport() {
    if (to_child_ >= 0) close(to_child_);
    if (from_child_ >= 0) close(from_child_);
    if (pid_ > 0) {
        int status = 0;
        for (int i = 0; i < 50; ++i) {
            if (waitpid(pid_, &status, WNOHANG) == pid_) return;
            usleep(10000);
        }
        kill(pid_, SIGKILL);
        waitpid(pid_, &status, 0);
    }
}

void ChildProcessTransport::send_line(const std::string& line) {
    std::string data = line + '\n';
    std::size_t done = 0;
    while (done < data.size()) {
        const ssize_t n = write(to_child_, data.data() + done, data.size() - done);
        if (n < 0) {
            if (errno == EINTR) continue;
            fail(ErrorKind::protocol, std::string("write to generator failed: ") + std::strerror(errno));
        }
        done += static_cast<std::size_t>(n);
    }
}

std::string ChildProcessTransport::receive_line() {
    const auto deadline = std::chrono::steady_clock::now() + timeout_;
    for (;;) {
        if (const auto nl = buffer_.find('\n'); nl != std::string::npos) {
            std::string line = buffer_.substr(0, nl);
            buffer_.erase(0, nl + 1);
            return line;
        }
        const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(
            deadline - std::chrono::steady_clock::now());
        if (left.count() <= 0) fail(ErrorKind::protocol, "generator timed out");
        pollfd p{from_child_, POLLIN, 0};
        const int ready = poll(&p, 1, static_cast<int>(left.count()));
        if (ready < 0) {
            if (errno == EINTR) continue;
            fail(ErrorKind::protocol, std::string("poll: ") + std::strerror(errno));
        }
        if (ready == 0) fail(ErrorKind::protocol, "generator timed out");
        char chunk[65536];
        const ssize_t n = read(from_child_, chunk, sizeof chunk);
        if (n < 0) {
            if (errno == EINTR) continue;
            fail(ErrorKind::protocol, std::string("read from generator failed: ") + std::strerror(errno));
        }
        if (n == 0) fail(ErrorKind::protocol, "generator closed the connection");
        buffer_.append(chunk, static_cast<std::size_t>(n));
    }
}

// ---------------------------------------------------------------------------
// In-process and recording transports

InProcessTransport::InProcessTransport(Generator& generator) : generator_(generator) {
    pending_.push_back(hello_line(generator.header()));
}

void InProcessTransport::send_line(const std::string& line) {
    pending_.push_back(handle_request_line(generator_, line));
}

std::string InProcessTransport::receive_line() {
    if (pending_.empty()) fail(ErrorKind::protocol, "no response pending");
    std::string line = std::move(pending_.front());
    pending_.pop_front();
    return line;
}

RecordingTransport::RecordingTransport(std::unique_ptr<Transport> inner)
    : inner_(std::move(inner)) {}

void RecordingTransport::send_line(const std::string& line) {
    sent_.push_back(line);
    inner_->send_line(line);
}

std::string RecordingTransport::receive_line() {
    received_.push_back(inner_->receive_line());
    return received_.back();
}

// ---------------------------------------------------------------------------
// Client and server

ProtocolGenerator::ProtocolGenerator(Transport& transport)
    : transport_(transport), header_(parse_hello(transport.receive_line())) {}

GenerationResponse ProtocolGenerator::generate(const GenerationRequest& request) {
    transport_.send_line(to_json(request).dump());
    const std::string line = transport_.receive_line();
    const auto response = as_protocol([&] { return response_from_json(json::parse(line)); });
    check_response(request, response);
    for (const auto& c : response.candidates) {
        for (const auto& t : c.traces) {
            try {
                validate(t, header_);
            } catch (const Error& e) {
                fail(ErrorKind::protocol, std::string("invalid trace from generator: ") + e.what());
            }
        }
    }
    return response;
}

std::string handle_request_line(Generator& generator, const std::string& line) {
    try {
        const auto request = as_protocol([&] { return request_from_json(json::parse(line)); });
        return to_json(generator.generate(request)).dump();
    } catch (const Error& e) {
        return json{{"version", kProtocolVersion}, {"error", e.what()}}.dump();
    }
}

void serve(Generator& generator, std::istream& in, std::ostream& out) {
    out << hello_line(generator.header()) << '\n' << std::flush;
    for (std::string line; std::getline(in, line);) {
        if (line.empty()) continue;
        out << handle_request_line(generator, line) << '\n' << std::flush;
    }
}

}  // namespace haloprobe

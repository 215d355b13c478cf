#pragma once

#include <chrono>
#include <cstdint>
#include <deque>
#include <istream>
#include <memory>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "haloprobe/trace.hpp"

// Line-delimited JSON between the kit (client) and a caption generator
// (server). On start the server writes one hello line:
//   {"version":1,"kind":"haloprobe-generator","header":{...trace header...}}
// Each request line is answered by exactly one response line.
//   request:  {"version","session_id","prefix_token_ids","n_candidates",
//              "temperature","max_new_tokens"}
//   response: {"version","candidates":[{"token_ids","token_texts","traces",
//              "cumulative_logprob","ended"}]}
//   error:    {"version","error":"message"}
// token_ids/token_texts cover the whole sequence (prefix included); traces
// cover only the new tokens, with absolute token indices.

namespace haloprobe {

inline constexpr int kProtocolVersion = 1;

struct GenerationRequest {
    int version = kProtocolVersion;
    std::string session_id;
    std::vector<std::int64_t> prefix_token_ids;
    int n_candidates = 5;
    double temperature = 0.5;
    int max_new_tokens = 20;

    bool operator==(const GenerationRequest&) const = default;
};

struct Candidate {
    std::vector<std::int64_t> token_ids;
    std::vector<std::string> token_texts;
    std::vector<TokenTrace> traces;
    double cumulative_logprob = 0.0;
    bool ended = false;

    bool operator==(const Candidate&) const = default;
};

struct GenerationResponse {
    int version = kProtocolVersion;
    std::vector<Candidate> candidates;

    bool operator==(const GenerationResponse&) const = default;
};

nlohmann::json to_json(const GenerationRequest& request);
nlohmann::json to_json(const Candidate& candidate);
nlohmann::json to_json(const GenerationResponse& response);
/// Rejects unknown or missing fields and a wrong version.
GenerationRequest request_from_json(const nlohmann::json& j);
GenerationResponse response_from_json(const nlohmann::json& j);

std::string hello_line(const CorpusHeader& header);
CorpusHeader parse_hello(const std::string& line);

/// Checks the response against its request: at most n candidates, each
/// extending the prefix, one trace per new token, at most max_new_tokens.
void check_response(const GenerationRequest& request, const GenerationResponse& response);

class Generator {
public:
    virtual ~Generator() = default;
    virtual const CorpusHeader& header() const = 0;
    virtual GenerationResponse generate(const GenerationRequest& request) = 0;
};

class Transport {
public:
    virtual ~Transport() = default;
    virtual void send_line(const std::string& line) = 0;
    virtual std::string receive_line() = 0;
};

/// Spawns `argv` with its stdin/stdout connected to pipes.
class ChildProcessTransport : public Transport {
public:
    ChildProcessTransport(std::vector<std::string> argv, std::chrono::milliseconds timeout);
    ~ChildProcessTransport() override;
    ChildProcessTransport(const ChildProcessTransport&) = delete;
    ChildProcessTransport& operator=(const ChildProcessTransport&) = delete;

    void send_line(const std::string& line) override;
    std::string receive_line() override;

private:
    int pid_ = -1;
    int to_child_ = -1;
    int from_child_ = -1;
    std::chrono::milliseconds timeout_;
    std::string buffer_;
};

/// Runs the server side in process: every sent line is answered
/// synchronously by `generator`.
class InProcessTransport : public Transport {
public:
    explicit InProcessTransport(Generator& generator);

    void send_line(const std::string& line) override;
    std::string receive_line() override;

private:
    Generator& generator_;
    std::deque<std::string> pending_;
};

/// Keeps a copy of every line sent through the wrapped transport.
class RecordingTransport : public Transport {
public:
    explicit RecordingTransport(std::unique_ptr<Transport> inner);

    void send_line(const std::string& line) override;
    std::string receive_line() override;
    const std::vector<std::string>& sent() const noexcept { return sent_; }
    const std::vector<std::string>& received() const noexcept { return received_; }

private:
    std::unique_ptr<Transport> inner_;
    std::vector<std::string> sent_;
    std::vector<std::string> received_;
};

/// Client: a Generator backed by a transport.
class ProtocolGenerator : public Generator {
public:
    explicit ProtocolGenerator(Transport& transport);

    const CorpusHeader& header() const override { return header_; }
    GenerationResponse generate(const GenerationRequest& request) override;

private:
    Transport& transport_;
    CorpusHeader header_;
};

/// Answers one request line; malformed input yields an error line.
std::string handle_request_line(Generator& generator, const std::string& line);

/// Server loop: hello line, then request/response until end of input.
void serve(Generator& generator, std::istream& in, std::ostream& out);

}  // namespace haloprobe

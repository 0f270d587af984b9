#pragma once

// /v1 HTTP service: asynchronous generation, offset training and sweep jobs.

#include "tokendial/guidance.hpp"
#include "tokendial/pipeline.hpp"
#include "tokendial/slidereval.hpp"

#include <nlohmann/json.hpp>

#include <atomic>
#include <condition_variable>
#include <deque>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <thread>
#include <vector>

namespace httplib {
class Server;
}

namespace tokendial::svc {

inline constexpr const char* kVersion = "0.1.0";

struct ServiceConfig {
    std::string host = "127.0.0.1";
    int port = 8080;
    std::filesystem::path offset_dir;  // TDOF files loaded at startup; trained offsets written here
    std::filesystem::path result_dir = "results";
    int workers = 2;
    pipe::DataConfig data;  // training clips for /v1/offsets/train
    int max_steps = 256;

    nlohmann::json to_json() const;
};

enum class JobKind { generate, train_offset, sweep };
enum class JobStatus { queued, running, done, failed };
std::string to_string(JobKind k);
std::string to_string(JobStatus s);

struct JobRecord {
    std::string id;
    JobKind kind = JobKind::generate;
    JobStatus status = JobStatus::queued;
    std::string request_digest;
    std::string result;  // locator under /v1/results, set when done
    std::string error;
    double created_at = 0.0, started_at = 0.0, finished_at = 0.0;
    nlohmann::json request;
    nlohmann::json summary;

    nlohmann::json to_json() const;
};

// Schema violations carry the offending field.
struct SchemaError : Error {
    explicit SchemaError(const std::string& msg) : Error(ErrorCode::precondition, msg) {}
};

struct ParsedGenerate {
    synth::PromptCond prompt;
    guide::GuidanceConfig cfg;
    std::vector<std::string> offset_names;
};

struct HttpReply {
    int status = 200;
    nlohmann::json body;
};

class Service {
public:
    explicit Service(ServiceConfig cfg);
    ~Service();
    Service(const Service&) = delete;
    Service& operator=(const Service&) = delete;

    void load_model(bb::Backbone model, std::optional<perc::AppearanceEncoder> encoder = std::nullopt);
    bool model_loaded() const;
    void add_offset(off::TokenOffsetSet offset);
    // Every *.tdof under offset_dir.
    void load_offset_dir();

    // Route handlers, usable without a socket.
    // The idempotency key may also be given as the body field "idempotency_key".
    HttpReply post_generate(const std::string& body, const std::optional<std::string>& key = std::nullopt);
    HttpReply post_train(const std::string& body, const std::optional<std::string>& key = std::nullopt);
    HttpReply post_sweep(const std::string& body, const std::optional<std::string>& key = std::nullopt);
    HttpReply get_job(const std::string& id) const;
    HttpReply get_offsets() const;
    HttpReply get_health() const;

    // Binds and serves on a background thread; returns the bound port.
    int start();
    void stop();
    // Blocks until the job leaves queued/running or the timeout (seconds) expires.
    std::optional<JobRecord> wait(const std::string& id, double timeout_s) const;
    std::optional<JobRecord> job(const std::string& id) const;

    ParsedGenerate parse_generate(const nlohmann::json& j) const;

    // Parameter digests of everything loaded, for mutation checks.
    nlohmann::json digests() const;

private:
    struct Job {
        JobRecord rec;
        std::function<void(Job&)> run;
    };

    ServiceConfig cfg_;
    mutable std::shared_mutex model_mu_;
    std::shared_ptr<const bb::Backbone> model_;
    std::shared_ptr<const perc::AppearanceEncoder> encoder_;
    std::map<std::string, std::shared_ptr<const off::TokenOffsetSet>> offsets_;

    mutable std::mutex jobs_mu_;
    mutable std::condition_variable jobs_cv_;
    std::map<std::string, std::shared_ptr<Job>> jobs_;
    std::map<std::string, std::pair<std::string, std::string>> idempotency_;  // key -> (digest, job id)
    std::map<std::string, std::string> by_digest_;                            // request digest -> job id
    std::deque<std::string> queue_;
    std::vector<std::thread> workers_;
    bool stopping_ = false;
    std::uint64_t counter_ = 0;

    std::mutex data_mu_;
    std::vector<synth::Clip> data_;

    std::unique_ptr<httplib::Server> server_;
    std::thread server_thread_;

    HttpReply enqueue(JobKind kind, nlohmann::json request, std::optional<std::string> key,
                      std::function<void(Job&)> run);
    void worker_loop();
    void finish(Job& job, JobStatus status);
    std::shared_ptr<const bb::Backbone> require_model() const;
    std::shared_ptr<const off::TokenOffsetSet> find_offset(const std::string& name) const;
    const std::vector<synth::Clip>& training_data();
    void routes();
};

}  // namespace tokendial::svc

#include "tokendial/service.hpp"

#include "tokendial/digest.hpp"
#include "tokendial/image.hpp"

#include <httplib.h>

#include <chrono>
#include <fstream>
#include <regex>
#include <set>
#include <sstream>

namespace tokendial::svc {

namespace {

using nlohmann::json;

double now_s() {
    return std::chrono::duration<double>(std::chrono::system_clock::now().time_since_epoch()).count();
}

HttpReply error_reply(int status, const std::string& msg, json extra = json::object()) {
    extra["error"] = msg;
    return {status, extra};
}

int http_status(const Error& e) {
    switch (e.code()) {
        case ErrorCode::not_found: return 404;
        case ErrorCode::conflict: return 409;
        case ErrorCode::unavailable:
        case ErrorCode::not_trained: return 503;
        default: return 400;
    }
}

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
    if (!j.is_object()) throw SchemaError(where + " must be an object");
    for (const auto& [k, _] : j.items()) {
        if (!allowed.count(k)) throw SchemaError(where + ": unknown field '" + k + "'");
    }
}

double number_field(const json& j, const std::string& key, double def, double lo, double hi) {
    if (!j.contains(key)) return def;
    const auto& v = j.at(key);
    if (!v.is_number()) throw SchemaError("field '" + key + "' must be a number");
    const double x = v.get<double>();
    if (!std::isfinite(x) || x < lo || x > hi) throw SchemaError("field '" + key + "' out of range");
    return x;
}

long long int_field(const json& j, const std::string& key, long long def, long long lo, long long hi) {
    if (!j.contains(key)) return def;
    const auto& v = j.at(key);
    if (!v.is_number_integer()) throw SchemaError("field '" + key + "' must be an integer");
    const long long x = v.get<long long>();
    if (x < lo || x > hi) throw SchemaError("field '" + key + "' out of range");
    return x;
}

std::string string_field(const json& j, const std::string& key) {
    if (!j.contains(key) || !j.at(key).is_string()) throw SchemaError("field '" + key + "' must be a string");
    return j.at(key).get<std::string>();
}

synth::PromptCond parse_prompt_field(const json& j) {
    if (!j.contains("prompt")) throw SchemaError("field 'prompt' is required");
    const auto& p = j.at("prompt");
    try {
        if (p.is_string()) return synth::parse_prompt(p.get<std::string>());
        if (p.is_array()) {
            synth::PromptCond c;
            int concept_idx = -1;
            for (const auto& t : p) {
                if (!t.is_number_integer()) throw SchemaError("prompt tokens must be integers");
                const int id = t.get<int>();
                if (concept_idx < 0 && (id == 1 || id == 2)) concept_idx = static_cast<int>(c.token_ids.size());
                c.token_ids.push_back(id);
            }
            c.concept_token_index = std::max(concept_idx, 0);
            c.validate();
            while (static_cast<int>(c.token_ids.size()) < synth::PromptCond::max_len) c.token_ids.push_back(0);
            return c;
        }
    } catch (const SchemaError&) {
        throw;
    } catch (const Error& e) {
        throw SchemaError(std::string("prompt: ") + e.what());
    }
    throw SchemaError("field 'prompt' must be a string or an array of token ids");
}

std::vector<std::string> string_list(const json& j, const std::string& key) {
    if (!j.contains(key) || !j.at(key).is_array() || j.at(key).empty())
        throw SchemaError("field '" + key + "' must be a non-empty array");
    std::vector<std::string> out;
    for (const auto& v : j.at(key)) {
        if (!v.is_string()) throw SchemaError("field '" + key + "' must hold strings");
        out.push_back(v.get<std::string>());
    }
    return out;
}

std::string offset_digest(const off::TokenOffsetSet& o) {
    Sha256 h;
    h.update(o.attribute_name);
    for (const auto& [k, m] : o.entries) {
        h.update(std::to_string(k));
        h.update(reinterpret_cast<const std::uint8_t*>(m.data()), static_cast<std::size_t>(m.size()) * sizeof(double));
    }
    return h.hex();
}

json read_json(const std::filesystem::path& p) {
    std::ifstream is(p);
    return json::parse(is);
}

const std::regex kSafeName("[A-Za-z0-9_-]{1,64}");

}  // namespace

json ServiceConfig::to_json() const {
    return {{"host", host},
            {"port", port},
            {"offset_dir", offset_dir.string()},
            {"result_dir", result_dir.string()},
            {"workers", workers},
            {"data", data.to_json()},
            {"max_steps", max_steps}};
}

std::string to_string(JobKind k) {
    switch (k) {
        case JobKind::generate: return "generate";
        case JobKind::train_offset: return "train_offset";
        default: return "sweep";
    }
}

std::string to_string(JobStatus s) {
    switch (s) {
        case JobStatus::queued: return "queued";
        case JobStatus::running: return "running";
        case JobStatus::done: return "done";
        default: return "failed";
    }
}

json JobRecord::to_json() const {
    json j{{"id", id},
           {"kind", svc::to_string(kind)},
           {"status", svc::to_string(status)},
           {"request_digest", request_digest},
           {"created_at", created_at}};
    if (started_at > 0.0) j["started_at"] = started_at;
    if (finished_at > 0.0) j["finished_at"] = finished_at;
    if (!result.empty()) j["result"] = result;
    if (status == JobStatus::failed) j["error"] = error;
    if (!summary.is_null()) j.update(summary);
    return j;
}

Service::Service(ServiceConfig cfg) : cfg_(std::move(cfg)) {
    require(cfg_.workers >= 1, ErrorCode::precondition, "service: workers must be >= 1");
    std::filesystem::create_directories(cfg_.result_dir);
    for (int i = 0; i < cfg_.workers; ++i) workers_.emplace_back([this] { worker_loop(); });
}

Service::~Service() {
    stop();
    {
        std::lock_guard<std::mutex> lock(jobs_mu_);
        stopping_ = true;
    }
    jobs_cv_.notify_all();
    for (auto& t : workers_) t.join();
}

void Service::load_model(bb::Backbone model, std::optional<perc::AppearanceEncoder> encoder) {
    model.set_trainable(false);
    std::unique_lock lock(model_mu_);
    model_ = std::make_shared<const bb::Backbone>(std::move(model));
    if (encoder) encoder_ = std::make_shared<const perc::AppearanceEncoder>(std::move(*encoder));
    for (const auto& [name, o] : offsets_) o->bind(model_->config());
}

bool Service::model_loaded() const {
    std::shared_lock lock(model_mu_);
    return model_ != nullptr;
}

void Service::add_offset(off::TokenOffsetSet offset) {
    offset.validate();
    std::unique_lock lock(model_mu_);
    if (model_) offset.bind(model_->config());
    const std::string name = offset.attribute_name;
    offsets_[name] = std::make_shared<const off::TokenOffsetSet>(std::move(offset));
}

void Service::load_offset_dir() {
    if (cfg_.offset_dir.empty() || !std::filesystem::exists(cfg_.offset_dir)) return;
    std::vector<std::filesystem::path> files;
    for (const auto& e : std::filesystem::directory_iterator(cfg_.offset_dir)) {
        if (e.path().extension() == ".tdof") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) add_offset(off::load_offset(f));
}

std::shared_ptr<const bb::Backbone> Service::require_model() const {
    std::shared_lock lock(model_mu_);
    require(model_ != nullptr, ErrorCode::unavailable, "model not loaded");
    return model_;
}

std::shared_ptr<const off::TokenOffsetSet> Service::find_offset(const std::string& name) const {
    std::shared_lock lock(model_mu_);
    auto it = offsets_.find(name);
    require(it != offsets_.end(), ErrorCode::not_found, "unknown offset '" + name + "'");
    return it->second;
}

json Service::digests() const {
    std::shared_lock lock(model_mu_);
    json j{{"backbone", model_ ? model_->digest() : ""}, {"encoder", encoder_ ? encoder_->digest() : ""}};
    for (const auto& [name, o] : offsets_) j["offsets"][name] = offset_digest(*o);
    return j;
}

ParsedGenerate Service::parse_generate(const json& j) const {
    check_keys(j, {"prompt", "seed", "steps", "s_txt", "edits", "shape", "idempotency_key", "joint_edits"},
               "generate request");
    ParsedGenerate p;
    p.prompt = parse_prompt_field(j);
    p.cfg.seed = static_cast<std::uint64_t>(int_field(j, "seed", 0, 0, std::numeric_limits<std::int64_t>::max()));
    p.cfg.steps = static_cast<int>(int_field(j, "steps", 32, 1, cfg_.max_steps));
    p.cfg.s_txt = number_field(j, "s_txt", 4.5, 0.0, 50.0);
    if (j.contains("joint_edits")) {
        if (!j.at("joint_edits").is_boolean()) throw SchemaError("field 'joint_edits' must be a boolean");
        p.cfg.joint_edits = j.at("joint_edits").get<bool>();
    }
    if (j.contains("shape")) {
        const auto& s = j.at("shape");
        check_keys(s, {"frames", "height", "width"}, "shape");
        const int f = static_cast<int>(int_field(s, "frames", 8, 2, 32));
        const int h = static_cast<int>(int_field(s, "height", 32, 16, 96));
        const int w = static_cast<int>(int_field(s, "width", 32, 16, 96));
        if (f % 2 != 0 || h % 4 != 0 || w % 4 != 0)
            throw SchemaError("shape: frames must be even and height/width multiples of 4");
        p.cfg.shape = {3, f, h, w};
    }
    if (j.contains("edits")) {
        const auto& edits = j.at("edits");
        if (!edits.is_array()) throw SchemaError("field 'edits' must be an array");
        for (const auto& e : edits) {
            check_keys(e, {"offset_name", "s_edit", "mask"}, "edit");
            guide::Edit ed;
            const std::string name = string_field(e, "offset_name");
            if (!e.contains("s_edit")) throw SchemaError("edit: field 's_edit' is required");
            ed.s_edit = number_field(e, "s_edit", 0.0, -10.0, 10.0);
            if (e.contains("mask")) {
                const auto& m = e.at("mask");
                check_keys(m, {"type", "box", "time_range", "edge", "concept_token"}, "mask");
                const std::string type = m.contains("type") ? string_field(m, "type") : "box";
                if (type == "uniform") {
                    ed.mask = off::MaskSpec::uniform();
                } else if (type == "box") {
                    try {
                        json g = m;
                        g.erase("type");
                        g.erase("concept_token");
                        ed.mask = off::MaskSpec::box(off::MaskGeometry::from_json(g));
                    } catch (const Error& err) {
                        throw SchemaError(std::string("mask: ") + err.what());
                    } catch (const json::exception& err) {
                        throw SchemaError(std::string("mask: ") + err.what());
                    }
                } else if (type == "attention") {
                    const int ct = static_cast<int>(int_field(m, "concept_token", -1, -1, synth::PromptCond::max_len - 1));
                    ed.mask = off::MaskSpec::attention(ct);
                } else {
                    throw SchemaError("mask: unknown type '" + type + "'");
                }
            }
            ed.offset = find_offset(name).get();
            p.offset_names.push_back(name);
            p.cfg.edits.push_back(std::move(ed));
        }
    }
    return p;
}

HttpReply Service::enqueue(JobKind kind, json request, std::optional<std::string> key,
                           std::function<void(Job&)> run) {
    if (request.contains("idempotency_key")) {
        if (!request.at("idempotency_key").is_string()) throw SchemaError("field 'idempotency_key' must be a string");
        if (!key) key = request.at("idempotency_key").get<std::string>();
        request.erase("idempotency_key");
    }
    const std::string digest = sha256_hex(svc::to_string(kind) + "\n" + request.dump());
    std::lock_guard<std::mutex> lock(jobs_mu_);
    if (key) {
        auto it = idempotency_.find(*key);
        if (it != idempotency_.end()) {
            if (it->second.first != digest) {
                return error_reply(409, "idempotency key reused with a different body", {{"job_id", it->second.second}});
            }
            return {202, {{"job_id", it->second.second}, {"status", svc::to_string(jobs_.at(it->second.second)->rec.status)}}};
        }
    }
    auto existing = by_digest_.find(digest);
    if (existing != by_digest_.end() && jobs_.at(existing->second)->rec.status != JobStatus::failed) {
        if (key) idempotency_[*key] = {digest, existing->second};
        return {202, {{"job_id", existing->second}, {"status", svc::to_string(jobs_.at(existing->second)->rec.status)}}};
    }
    auto job = std::make_shared<Job>();
    std::ostringstream id;
    id << "j" << std::hex << ++counter_ << "-" << digest.substr(0, 12);
    job->rec.id = id.str();
    job->rec.kind = kind;
    job->rec.request_digest = digest;
    job->rec.request = request;
    job->rec.created_at = now_s();
    job->run = std::move(run);
    jobs_[job->rec.id] = job;
    by_digest_[digest] = job->rec.id;
    if (key) idempotency_[*key] = {digest, job->rec.id};
    queue_.push_back(job->rec.id);
    jobs_cv_.notify_all();
    return {202, {{"job_id", job->rec.id}, {"status", "queued"}}};
}

void Service::finish(Job& job, JobStatus status) {
    std::lock_guard<std::mutex> lock(jobs_mu_);
    job.rec.status = status;
    job.rec.finished_at = now_s();
    jobs_cv_.notify_all();
}

void Service::worker_loop() {
    while (true) {
        std::shared_ptr<Job> job;
        {
            std::unique_lock<std::mutex> lock(jobs_mu_);
            jobs_cv_.wait(lock, [&] { return stopping_ || !queue_.empty(); });
            if (queue_.empty()) return;
            job = jobs_.at(queue_.front());
            queue_.pop_front();
            job->rec.status = JobStatus::running;
            job->rec.started_at = now_s();
            jobs_cv_.notify_all();
        }
        try {
            job->run(*job);
            finish(*job, JobStatus::done);
        } catch (const std::exception& e) {
            {
                std::lock_guard<std::mutex> lock(jobs_mu_);
                job->rec.error = e.what();
                if (job->rec.error.empty()) job->rec.error = "job failed";
            }
            finish(*job, JobStatus::failed);
        }
    }
}

HttpReply Service::post_generate(const std::string& body, const std::optional<std::string>& key) {
    try {
        const auto model = require_model();
        const json j = json::parse(body);
        ParsedGenerate p = parse_generate(j);
        // Results are keyed on the request and on every weight they depend on.
        json addr{{"request", j}, {"backbone", model->digest()}};
        addr["request"].erase("idempotency_key");
        for (std::size_t i = 0; i < p.offset_names.size(); ++i)
            addr["offsets"].push_back(offset_digest(*p.cfg.edits[i].offset));
        const std::string result_key = sha256_hex(addr.dump()).substr(0, 32);
        std::vector<std::shared_ptr<const off::TokenOffsetSet>> keep;
        for (const auto& n : p.offset_names) keep.push_back(find_offset(n));
        const auto dir = cfg_.result_dir / result_key;
        return enqueue(JobKind::generate, j, key, [this, model, keep, p, dir, result_key](Job& job) {
            json summary;
            if (!std::filesystem::exists(dir / "result.json")) {
                const auto res = guide::generate(*model, p.prompt, p.cfg);
                const auto tmp = dir.string() + ".tmp-" + job.rec.id;
                std::filesystem::create_directories(tmp);
                std::vector<img::Image> frames;
                json frame_names = json::array();
                for (int f = 0; f < res.video.shape.frames; ++f) {
                    frames.push_back(img::frame_image(res.video, f));
                    char name[32];
                    std::snprintf(name, sizeof name, "frame_%03d.png", f);
                    img::write_file(std::filesystem::path(tmp) / name, img::encode_png(frames.back()));
                    frame_names.push_back(name);
                }
                img::write_file(std::filesystem::path(tmp) / "animation.png", img::encode_apng(frames, 8));
                json masks = json::array();
                for (const auto& m : res.trace.masks)
                    masks.push_back({{"source", m.source}, {"mean", m.mean}, {"min", m.min}, {"max", m.max}});
                const json result{{"frames", frame_names},
                                  {"animation", "animation.png"},
                                  {"masks", masks},
                                  {"prompt", p.prompt.text()},
                                  {"config", p.cfg.to_json()},
                                  {"trace", res.trace.to_json()}};
                img::write_file(std::filesystem::path(tmp) / "result.json", result.dump(2));
                std::error_code ec;
                std::filesystem::rename(tmp, dir, ec);
                if (ec) std::filesystem::remove_all(tmp);  // another worker produced the same result
            }
            const json result = read_json(dir / "result.json");
            const std::string base = "/v1/results/" + result_key + "/";
            json urls = json::array();
            for (const auto& f : result.at("frames")) urls.push_back(base + f.get<std::string>());
            summary = {{"frames", urls},
                       {"frame_count", urls.size()},
                       {"animation", base + "animation.png"},
                       {"masks", result.at("masks")}};
            std::lock_guard<std::mutex> lock(jobs_mu_);
            job.rec.result = "/v1/results/" + result_key;
            job.rec.summary = summary;
        });
    } catch (const json::parse_error& e) {
        return error_reply(400, std::string("invalid JSON: ") + e.what());
    } catch (const Error& e) {
        json extra = json::object();
        if (e.code() == ErrorCode::not_found) {
            const std::string msg = e.what();
            const auto a = msg.find('\''), b = msg.rfind('\'');
            if (a != std::string::npos && b > a) extra["offset_name"] = msg.substr(a + 1, b - a - 1);
        }
        return error_reply(http_status(e), e.what(), extra);
    }
}

const std::vector<synth::Clip>& Service::training_data() {
    std::lock_guard<std::mutex> lock(data_mu_);
    if (data_.empty()) data_ = pipe::base_clips(cfg_.data);
    return data_;
}

HttpReply Service::post_train(const std::string& body, const std::optional<std::string>& key) {
    try {
        const auto model = require_model();
        const json j = json::parse(body);
        check_keys(j, {"attribute_name", "recipe", "steps", "lr", "seed", "batch", "layers", "injection_point",
                       "idempotency_key"},
                   "train request");
        const std::string name = string_field(j, "attribute_name");
        if (!std::regex_match(name, kSafeName)) throw SchemaError("attribute_name must match [A-Za-z0-9_-]{1,64}");
        const std::string recipe_name = j.contains("recipe") ? string_field(j, "recipe") : name;
        pipe::OffsetRecipe recipe;
        try {
            recipe = pipe::default_recipe(recipe_name);
        } catch (const Error&) {
            throw SchemaError("unknown recipe '" + recipe_name + "' (brightness or motion)");
        }
        recipe.train.attribute_name = name;
        recipe.train.steps = static_cast<int>(int_field(j, "steps", recipe.train.steps, 1, 5000));
        recipe.train.lr = number_field(j, "lr", recipe.train.lr, 1e-8, 1.0);
        recipe.train.seed = static_cast<std::uint64_t>(int_field(j, "seed", 0, 0, std::numeric_limits<std::int64_t>::max()));
        recipe.train.batch = static_cast<int>(int_field(j, "batch", recipe.train.batch, 1, 64));
        if (j.contains("injection_point")) {
            try {
                recipe.train.injection.point = bb::injection_point_from_string(string_field(j, "injection_point"));
            } catch (const Error& e) {
                throw SchemaError(e.what());
            }
        }
        if (j.contains("layers")) {
            if (!j.at("layers").is_array()) throw SchemaError("field 'layers' must be an array");
            recipe.train.injection.layers.clear();
            for (const auto& l : j.at("layers")) {
                if (!l.is_number_integer()) throw SchemaError("layers must be integers");
                recipe.train.injection.layers.push_back(l.get<int>());
            }
            try {
                recipe.train.injection.validate(model->config().blocks);
            } catch (const Error& e) {
                throw SchemaError(e.what());
            }
        }
        std::shared_ptr<const perc::AppearanceEncoder> enc;
        {
            std::shared_lock lock(model_mu_);
            enc = encoder_;
        }
        if (recipe.loss.kind == off::LossKind::appearance) {
            require(enc != nullptr, ErrorCode::unavailable, "encoder not loaded");
        } else if (!enc) {
            enc = std::make_shared<const perc::AppearanceEncoder>(perc::EncoderConfig{}, 0);
        }
        return enqueue(JobKind::train_offset, j, key, [this, model, enc, recipe, name](Job& job) {
            train::LossConfig loss = recipe.loss;
            if (loss.kind == off::LossKind::appearance) {
                loss.d_tgt = pipe::brightness_direction(*enc, cfg_.data.dist, recipe.exemplars, recipe.exemplar_high,
                                                        recipe.exemplar_low, recipe.train.seed + 1000);
            }
            auto res = train::train_offset(*model, *enc, training_data(), loss, recipe.refine, recipe.train);
            if (!cfg_.offset_dir.empty()) off::save_offset(cfg_.offset_dir / (name + ".tdof"), res.offset);
            const json summary{{"offset", name},
                               {"final_loss", res.log.empty() ? 0.0 : res.log.back().loss},
                               {"parameter_count", res.offset.parameter_count()}};
            add_offset(std::move(res.offset));
            std::lock_guard<std::mutex> lock(jobs_mu_);
            job.rec.result = "/v1/offsets";
            job.rec.summary = summary;
        });
    } catch (const json::parse_error& e) {
        return error_reply(400, std::string("invalid JSON: ") + e.what());
    } catch (const Error& e) {
        return error_reply(http_status(e), e.what());
    }
}

HttpReply Service::post_sweep(const std::string& body, const std::optional<std::string>& key) {
    try {
        const auto model = require_model();
        const json j = json::parse(body);
        check_keys(j, {"offset_name", "prompts", "seeds", "strengths", "steps", "s_txt", "oracle", "idempotency_key"},
                   "sweep request");
        const auto offset = find_offset(string_field(j, "offset_name"));
        eval::SweepConfig sc;
        for (const auto& p : string_list(j, "prompts")) {
            try {
                sc.prompts.push_back(synth::parse_prompt(p));
            } catch (const Error& e) {
                throw SchemaError(std::string("prompt: ") + e.what());
            }
        }
        if (j.contains("seeds")) {
            if (!j.at("seeds").is_array()) throw SchemaError("field 'seeds' must be an array");
            sc.seeds.clear();
            for (const auto& s : j.at("seeds")) {
                if (!s.is_number_unsigned()) throw SchemaError("seeds must be non-negative integers");
                sc.seeds.push_back(s.get<std::uint64_t>());
            }
        }
        if (j.contains("strengths")) {
            if (!j.at("strengths").is_array()) throw SchemaError("field 'strengths' must be an array");
            sc.strengths.clear();
            for (const auto& s : j.at("strengths")) {
                if (!s.is_number()) throw SchemaError("strengths must be numbers");
                sc.strengths.push_back(s.get<double>());
            }
        }
        sc.steps = static_cast<int>(int_field(j, "steps", sc.steps, 1, cfg_.max_steps));
        sc.s_txt = number_field(j, "s_txt", sc.s_txt, 0.0, 50.0);
        if (j.contains("oracle")) {
            try {
                sc.oracle = eval::oracle_kind_from_string(string_field(j, "oracle"));
            } catch (const Error& e) {
                throw SchemaError(e.what());
            }
        }
        try {
            sc.validate();
        } catch (const Error& e) {
            throw SchemaError(e.what());
        }
        std::shared_ptr<const perc::AppearanceEncoder> enc;
        {
            std::shared_lock lock(model_mu_);
            enc = encoder_;
        }
        require(enc != nullptr, ErrorCode::unavailable, "encoder not loaded");
        json addr{{"request", j}, {"backbone", model->digest()}, {"offset", offset_digest(*offset)},
                  {"encoder", enc->digest()}};
        addr["request"].erase("idempotency_key");
        const std::string result_key = sha256_hex(addr.dump()).substr(0, 32);
        return enqueue(JobKind::sweep, j, key, [this, model, enc, offset, sc, result_key](Job& job) {
            const auto dir = cfg_.result_dir / result_key;
            if (!std::filesystem::exists(dir / "report.json")) {
                eval::SweepInputs in{model.get(), offset.get(), enc.get(), std::nullopt};
                const auto rep = eval::run_sweep(in, sc);
                eval::write_report(rep, dir);
            }
            const auto rep = eval::SliderEvalReport::from_json(read_json(dir / "report.json"));
            const std::string base = "/v1/results/" + result_key + "/";
            std::lock_guard<std::mutex> lock(jobs_mu_);
            job.rec.result = "/v1/results/" + result_key;
            job.rec.summary = {{"report", base + "report.json"},
                               {"csv", base + "scores.csv"},
                               {"plot", base + "curves.png"},
                               {"os", rep.aggregate.os}};
        });
    } catch (const json::parse_error& e) {
        return error_reply(400, std::string("invalid JSON: ") + e.what());
    } catch (const Error& e) {
        return error_reply(http_status(e), e.what());
    }
}

std::optional<JobRecord> Service::job(const std::string& id) const {
    std::lock_guard<std::mutex> lock(jobs_mu_);
    auto it = jobs_.find(id);
    if (it == jobs_.end()) return std::nullopt;
    return it->second->rec;
}

std::optional<JobRecord> Service::wait(const std::string& id, double timeout_s) const {
    std::unique_lock<std::mutex> lock(jobs_mu_);
    auto it = jobs_.find(id);
    if (it == jobs_.end()) return std::nullopt;
    const auto job = it->second;
    jobs_cv_.wait_for(lock, std::chrono::duration<double>(timeout_s), [&] {
        return job->rec.status == JobStatus::done || job->rec.status == JobStatus::failed;
    });
    return job->rec;
}

HttpReply Service::get_job(const std::string& id) const {
    const auto rec = job(id);
    if (!rec) return error_reply(404, "unknown job '" + id + "'", {{"job_id", id}});
    return {200, rec->to_json()};
}

HttpReply Service::get_offsets() const {
    std::shared_lock lock(model_mu_);
    json arr = json::array();
    for (const auto& [name, o] : offsets_) {
        arr.push_back({{"name", name},
                       {"d", o->d},
                       {"layers", o->injection.layers},
                       {"injection_point", bb::to_string(o->injection.point)},
                       {"parameter_count", o->parameter_count()},
                       {"training_meta", o->training_meta.to_json()}});
    }
    return {200, arr};
}

HttpReply Service::get_health() const {
    std::shared_lock lock(model_mu_);
    if (!model_) return {503, {{"status", "loading"}, {"version", kVersion}}};
    return {200,
            {{"status", "ok"},
             {"version", kVersion},
             {"backbone_digest", model_->digest()},
             {"encoder_digest", encoder_ ? encoder_->digest() : ""},
             {"offsets", offsets_.size()},
             {"workers", cfg_.workers}}};
}

void Service::routes() {
    auto& s = *server_;
    s.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                           {"Access-Control-Allow-Headers", "Content-Type, Idempotency-Key"},
                           {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"}});
    auto send = [](httplib::Response& res, const HttpReply& r) {
        res.status = r.status;
        res.set_content(r.body.dump(), "application/json");
    };
    auto key_of = [](const httplib::Request& req) -> std::optional<std::string> {
        if (req.has_header("Idempotency-Key")) return req.get_header_value("Idempotency-Key");
        return std::nullopt;
    };
    s.Options(".*", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
    s.Post("/v1/generate", [=, this](const httplib::Request& req, httplib::Response& res) {
        send(res, post_generate(req.body, key_of(req)));
    });
    s.Post("/v1/offsets/train", [=, this](const httplib::Request& req, httplib::Response& res) {
        send(res, post_train(req.body, key_of(req)));
    });
    s.Post("/v1/sweeps", [=, this](const httplib::Request& req, httplib::Response& res) {
        send(res, post_sweep(req.body, key_of(req)));
    });
    s.Get("/v1/offsets", [=, this](const httplib::Request&, httplib::Response& res) { send(res, get_offsets()); });
    s.Get("/v1/health", [=, this](const httplib::Request&, httplib::Response& res) { send(res, get_health()); });
    s.Get(R"(/v1/jobs/([A-Za-z0-9_-]+))", [=, this](const httplib::Request& req, httplib::Response& res) {
        send(res, get_job(req.matches[1]));
    });
    s.Get(R"(/v1/results/([0-9a-f]{32})/([a-z0-9_]+\.(png|json|csv)))",
          [this](const httplib::Request& req, httplib::Response& res) {
              const auto path = cfg_.result_dir / std::string(req.matches[1]) / std::string(req.matches[2]);
              if (!std::filesystem::exists(path)) {
                  res.status = 404;
                  res.set_content(json{{"error", "no such result"}}.dump(), "application/json");
                  return;
              }
              std::ifstream is(path, std::ios::binary);
              std::string data((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
              const std::string ext = req.matches[3];
              const char* type = ext == "png" ? "image/png" : ext == "json" ? "application/json" : "text/csv";
              res.set_header("Cache-Control", "public, max-age=31536000, immutable");
              res.set_content(std::move(data), type);
          });
    s.set_error_handler([](const httplib::Request&, httplib::Response& res) {
        if (res.body.empty()) res.set_content(json{{"error", "not found"}}.dump(), "application/json");
    });
}

int Service::start() {
    require(server_ == nullptr, ErrorCode::conflict, "service already started");
    server_ = std::make_unique<httplib::Server>();
    routes();
    int port = cfg_.port;
    if (port == 0) {
        port = server_->bind_to_any_port(cfg_.host);
    } else if (!server_->bind_to_port(cfg_.host, port)) {
        port = -1;
    }
    if (port < 0) {
        server_.reset();
        throw Error(ErrorCode::unavailable, "cannot bind " + cfg_.host + ":" + std::to_string(cfg_.port));
    }
    server_thread_ = std::thread([this] { server_->listen_after_bind(); });
    server_->wait_until_ready();
    return port;
}

void Service::stop() {
    if (!server_) return;
    server_->stop();
    if (server_thread_.joinable()) server_thread_.join();
    server_.reset();
}

}  // namespace tokendial::svc

#include "chainae/scan_service.hpp"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <thread>

#include "httplib.h"

namespace chainae::scan {

using nlohmann::json;

Endpoint parse_endpoint(std::string_view text) {
  const auto colon = text.rfind(':');
  if (colon == std::string_view::npos || colon == 0 || colon + 1 == text.size())
    throw Error(ErrorCode::ConfigError, "expected host:port, got '" + std::string(text) + "'");
  Endpoint e;
  e.host = std::string(text.substr(0, colon));
  try {
    std::size_t used = 0;
    const std::string port(text.substr(colon + 1));
    e.port = std::stoi(port, &used);
    if (used != port.size() || e.port < 0 || e.port > 65535) throw std::out_of_range("port");
  } catch (const std::exception&) {
    throw Error(ErrorCode::ConfigError, "bad port in '" + std::string(text) + "'");
  }
  return e;
}

std::string double_bits_hex(double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, sizeof bits);
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(bits));
  return buf;
}

double double_from_bits_hex(std::string_view hex) {
  if (hex.size() != 16) throw Error(ErrorCode::ProtocolError, "score bits must be 16 hex digits");
  std::uint64_t bits = 0;
  for (char c : hex) {
    int d;
    if (c >= '0' && c <= '9') d = c - '0';
    else if (c >= 'a' && c <= 'f') d = c - 'a' + 10;
    else throw Error(ErrorCode::ProtocolError, "score bits must be lower-case hex");
    bits = bits << 4 | static_cast<std::uint64_t>(d);
  }
  double v;
  std::memcpy(&v, &bits, sizeof v);
  return v;
}

// ---------------------------------------------------------------------------

TokenBucket::TokenBucket(double rate, double burst) : rate_(rate), burst_(std::max(1.0, burst)), tokens_(burst_) {}

bool TokenBucket::take(double now, double* retry_after) {
  if (rate_ <= 0.0) return true;
  std::lock_guard lock(mu_);
  if (!started_) {
    started_ = true;
    last_ = now;
  }
  tokens_ = std::min(burst_, tokens_ + (now - last_) * rate_);
  last_ = std::max(last_, now);
  if (tokens_ >= 1.0) {
    tokens_ -= 1.0;
    return true;
  }
  if (retry_after) *retry_after = (1.0 - tokens_) / rate_;
  return false;
}

// ---------------------------------------------------------------------------

namespace {

std::string cache_key(const std::string& detector, const std::string& digest) { return detector + '\n' + digest; }

}  // namespace

VerdictCache::VerdictCache(std::string dir) {
  if (dir.empty()) return;
  std::filesystem::create_directories(dir);
  path_ = (std::filesystem::path(dir) / "verdicts.jsonl").string();
  std::ifstream in(path_);
  std::string line;
  while (std::getline(in, line)) {
    // A torn final line from an interrupted run is skipped.
    const json j = json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object()) continue;
    try {
      Verdict v;
      v.detector_id = j.at("detector").get<std::string>();
      v.score = double_from_bits_hex(j.at("score_bits").get<std::string>());
      v.threshold = double_from_bits_hex(j.at("threshold_bits").get<std::string>());
      v.malicious = j.at("label").get<std::string>() == "malicious";
      index_.insert_or_assign(cache_key(v.detector_id, j.at("digest").get<std::string>()), v);
    } catch (const std::exception&) {
      continue;
    }
  }
}

std::optional<Verdict> VerdictCache::find(const std::string& detector, const std::string& digest) const {
  std::lock_guard lock(mu_);
  auto it = index_.find(cache_key(detector, digest));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

void VerdictCache::put(const std::string& detector, const std::string& digest, const Verdict& v) {
  std::lock_guard lock(mu_);
  if (!index_.emplace(cache_key(detector, digest), v).second) return;
  if (path_.empty()) return;
  std::ofstream out(path_, std::ios::app);
  out << json{{"detector", detector},
              {"digest", digest},
              {"score_bits", double_bits_hex(v.score)},
              {"threshold_bits", double_bits_hex(v.threshold)},
              {"label", v.malicious ? "malicious" : "benign"}}
             .dump()
      << '\n';
}

std::size_t VerdictCache::size() const {
  std::lock_guard lock(mu_);
  return index_.size();
}

// ---------------------------------------------------------------------------

struct ScanService::Impl {
  httplib::Server server;
  std::thread thread;
};

ScanService::ScanService(std::vector<DetectorPtr> detectors, ServiceConfig config)
    : impl_(std::make_unique<Impl>()),
      detectors_(std::move(detectors)),
      config_(std::move(config)),
      cache_(config_.cache_dir),
      bucket_(config_.rate_limit, config_.burst) {
  if (detectors_.empty()) throw Error(ErrorCode::ConfigError, "scan service needs at least one detector");
}

ScanService::~ScanService() { stop(); }

namespace {

double monotonic_seconds() {
  return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch()).count();
}

ScanService::Reply error_reply(int status, const std::string& message) { return {status, {{"error", message}}, 0.0}; }

}  // namespace

ScanService::Reply ScanService::handle_scan(const std::string& body) {
  ++requests_;
  double wait = 0.0;
  if (!bucket_.take(monotonic_seconds(), &wait)) {
    ++limited_;
    Reply r = error_reply(429, "rate limit exceeded");
    r.retry_after = wait;
    r.body["retry_after"] = wait;
    return r;
  }
  const json req = json::parse(body, nullptr, false);
  if (req.is_discarded() || !req.is_object()) {
    ++errors_;
    return error_reply(400, "body must be a JSON object");
  }

  const DetectorPtr* det = nullptr;
  if (req.contains("detector")) {
    if (!req["detector"].is_string()) return ++errors_, error_reply(400, "'detector' must be a string");
    for (const auto& d : detectors_)
      if (d->id() == req["detector"].get<std::string>()) det = &d;
    if (!det) return ++errors_, error_reply(404, "unknown detector '" + req["detector"].get<std::string>() + "'");
  } else if (detectors_.size() == 1) {
    det = &detectors_.front();
  } else {
    return ++errors_, error_reply(400, "'detector' is required when several detectors are served");
  }

  std::string digest;
  Bytes bytes;
  bool have_bytes = false;
  try {
    if (req.contains("bytes")) {
      bytes = base64_decode(req.at("bytes").get<std::string>());
      digest = sha256_hex(bytes);
      have_bytes = true;
      if (req.contains("digest") && req["digest"].get<std::string>() != digest)
        return ++errors_, error_reply(400, "digest does not match bytes");
    } else if (req.contains("digest")) {
      digest = req.at("digest").get<std::string>();
    } else {
      return ++errors_, error_reply(400, "request needs 'bytes' (base64) or 'digest'");
    }
  } catch (const std::exception& e) {
    return ++errors_, error_reply(400, e.what());
  }

  ++scans_;
  const std::string& id = (*det)->id();
  std::optional<Verdict> v = cache_.find(id, digest);
  const bool hit = v.has_value();
  if (hit) {
    ++hits_;
  } else {
    if (!have_bytes) return ++errors_, error_reply(404, "digest not in cache; send the bytes");
    ++misses_;
    v = (*det)->score(bytes);
    cache_.put(id, digest, *v);
  }
  return {200,
          {{"request_id", next_id_++},
           {"detector_id", id},
           {"digest", digest},
           {"score", v->score},
           {"score_bits", double_bits_hex(v->score)},
           {"threshold", v->threshold},
           {"threshold_bits", double_bits_hex(v->threshold)},
           {"label", v->malicious ? "malicious" : "benign"},
           {"cache_hit", hit}},
          0.0};
}

json ScanService::handle_detectors() const {
  json list = json::array();
  for (const auto& d : detectors_)
    list.push_back({{"id", d->id()}, {"threshold", d->threshold()}, {"threshold_bits", double_bits_hex(d->threshold())}});
  return {{"detectors", std::move(list)}};
}

ServiceStats ScanService::stats() const {
  return {requests_.load(), scans_.load(), hits_.load(), misses_.load(), limited_.load(), errors_.load()};
}

json ScanService::handle_stats() const {
  const auto s = stats();
  return {{"requests", s.requests},         {"scans", s.scans},
          {"cache_hits", s.cache_hits},     {"cache_misses", s.cache_misses},
          {"rate_limited", s.rate_limited}, {"errors", s.errors},
          {"cache_entries", cache_.size()}};
}

int ScanService::start() {
  auto& svr = impl_->server;
  svr.Post("/scan", [this](const httplib::Request& req, httplib::Response& res) {
    const Reply r = handle_scan(req.body);
    res.status = r.status;
    if (r.status == 429) res.set_header("Retry-After", std::to_string(static_cast<long>(std::ceil(r.retry_after))));
    res.set_content(r.body.dump(), "application/json");
  });
  svr.Get("/detectors", [this](const httplib::Request&, httplib::Response& res) {
    res.set_content(handle_detectors().dump(), "application/json");
  });
  svr.Get("/stats", [this](const httplib::Request&, httplib::Response& res) {
    res.set_content(handle_stats().dump(), "application/json");
  });

  const auto& b = config_.bind;
  port_ = b.port == 0 ? svr.bind_to_any_port(b.host) : (svr.bind_to_port(b.host, b.port) ? b.port : -1);
  if (port_ <= 0)
    throw Error(ErrorCode::ConfigError, "cannot bind " + b.host + ":" + std::to_string(b.port));
  impl_->thread = std::thread([&svr] { svr.listen_after_bind(); });
  svr.wait_until_ready();
  return port_;
}

void ScanService::wait() {
  if (impl_->thread.joinable()) impl_->thread.join();
}

void ScanService::stop() {
  if (!impl_) return;
  impl_->server.stop();
  if (impl_->thread.joinable()) impl_->thread.join();
}

// ---------------------------------------------------------------------------

RemoteDetector::RemoteDetector(ClientConfig config) : config_(std::move(config)) {
  const json doc = request("GET", "/detectors", "");
  try {
    for (const auto& d : doc.at("detectors"))
      if (d.at("id").get<std::string>() == config_.detector) {
        threshold_ = double_from_bits_hex(d.at("threshold_bits").get<std::string>());
        return;
      }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::ProtocolError, std::string("malformed /detectors answer: ") + e.what());
  }
  throw Error(ErrorCode::ProtocolError, "service does not serve detector '" + config_.detector + "'");
}

json RemoteDetector::request(const std::string& method, const std::string& path, const std::string& body) const {
  auto backoff = config_.initial_backoff;
  std::size_t retries = 0, waits = 0;
  std::string last_error;
  for (;;) {
    ++attempts_;
    httplib::Client cli(config_.server.host, config_.server.port);
    cli.set_connection_timeout(config_.timeout_seconds);
    cli.set_read_timeout(config_.timeout_seconds);
    cli.set_write_timeout(config_.timeout_seconds);
    auto res = method == "GET" ? cli.Get(path) : cli.Post(path, body, "application/json");

    if (res && res->status == 429 && waits < config_.max_rate_limit_waits) {
      ++waits;
      double wait = 1.0;
      if (res->has_header("Retry-After")) wait = std::atof(res->get_header_value("Retry-After").c_str());
      std::this_thread::sleep_for(std::chrono::duration<double>(std::clamp(wait, 0.01, 5.0)));
      continue;
    }
    if (res && res->status == 200) {
      json doc = json::parse(res->body, nullptr, false);
      if (doc.is_discarded() || !doc.is_object())
        throw Error(ErrorCode::ProtocolError, "malformed response body from " + path);
      return doc;
    }
    if (res && res->status < 500 && res->status != 429) {
      const json err = json::parse(res->body, nullptr, false);
      const std::string msg = !err.is_discarded() && err.is_object() && err.contains("error") && err["error"].is_string()
                                  ? err["error"].get<std::string>()
                                  : res->body;
      throw Error(ErrorCode::ProtocolError, path + " answered " + std::to_string(res->status) + ": " + msg);
    }
    last_error = res ? "status " + std::to_string(res->status) : httplib::to_string(res.error());
    if (retries >= config_.max_retries)
      throw Error(ErrorCode::Unreachable, config_.server.host + ":" + std::to_string(config_.server.port) + path +
                                              " after " + std::to_string(retries) + " retries: " + last_error);
    ++retries;
    std::this_thread::sleep_for(backoff);
    backoff = std::min(backoff * 2, config_.max_backoff);
  }
}

Verdict RemoteDetector::score(ByteView bytes) const {
  const std::string digest = sha256_hex(bytes);
  const json reply = request("POST", "/scan", json{{"detector", config_.detector}, {"bytes", base64_encode(bytes)}}.dump());
  try {
    if (reply.at("detector_id").get<std::string>() != config_.detector)
      throw Error(ErrorCode::ProtocolError, "verdict for another detector");
    if (reply.at("digest").get<std::string>() != digest)
      throw Error(ErrorCode::ProtocolError, "verdict for another digest");
    Verdict v;
    v.detector_id = config_.detector;
    v.score = double_from_bits_hex(reply.at("score_bits").get<std::string>());
    v.threshold = double_from_bits_hex(reply.at("threshold_bits").get<std::string>());
    const std::string label = reply.at("label").get<std::string>();
    if (label != "malicious" && label != "benign") throw Error(ErrorCode::ProtocolError, "unknown label " + label);
    v.malicious = label == "malicious";
    return v;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::ProtocolError, std::string("malformed /scan answer: ") + e.what());
  }
}

}  // namespace chainae::scan

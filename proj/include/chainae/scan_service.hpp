#pragma once

// Local HTTP verdict service (POST /scan, GET /detectors, GET /stats) and a
// Detector adapter that talks to it.

#include <atomic>
#include <chrono>
#include <cstdint>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "chainae/detector.hpp"
#include "json.hpp"

namespace chainae::scan {

using detectors::DetectorPtr;
using detectors::Verdict;

/// Environment variable holding the default bind address, "host:port".
inline constexpr const char* kBindEnv = "CHAINAE_SCAN_BIND";
inline constexpr const char* kDefaultBind = "127.0.0.1:8765";

struct Endpoint {
  std::string host = "127.0.0.1";
  int port = 8765;
};
/// Parses "host:port"; throws ConfigError.
Endpoint parse_endpoint(std::string_view text);

/// Hex of the IEEE-754 bit pattern, 16 lower-case digits.
std::string double_bits_hex(double v);
double double_from_bits_hex(std::string_view hex);

/// Classic token bucket. `rate` tokens per second, at most `burst` stored.
/// rate <= 0 disables limiting.
class TokenBucket {
 public:
  TokenBucket(double rate, double burst);
  /// Takes one token at time `now` (seconds on any monotonic clock). On
  /// refusal returns false and the wait until a token is available.
  bool take(double now, double* retry_after = nullptr);

 private:
  double rate_, burst_, tokens_, last_ = 0.0;
  bool started_ = false;
  std::mutex mu_;
};

/// Append-only JSONL log of verdicts plus an in-memory index keyed by
/// (detector id, digest). An empty directory keeps the cache in memory only.
class VerdictCache {
 public:
  explicit VerdictCache(std::string dir = {});

  std::optional<Verdict> find(const std::string& detector, const std::string& digest) const;
  void put(const std::string& detector, const std::string& digest, const Verdict& v);
  std::size_t size() const;
  const std::string& log_path() const { return path_; }

 private:
  std::string path_;
  mutable std::mutex mu_;
  std::unordered_map<std::string, Verdict> index_;
};

struct ServiceConfig {
  Endpoint bind;              // port 0 picks a free port
  double rate_limit = 0.0;    // requests per second; <= 0 disables
  double burst = 10.0;
  std::string cache_dir;      // empty: in-memory cache
};

struct ServiceStats {
  std::uint64_t requests = 0;
  std::uint64_t scans = 0;
  std::uint64_t cache_hits = 0;
  std::uint64_t cache_misses = 0;
  std::uint64_t rate_limited = 0;
  std::uint64_t errors = 0;
};

class ScanService {
 public:
  ScanService(std::vector<DetectorPtr> detectors, ServiceConfig config);
  ~ScanService();
  ScanService(const ScanService&) = delete;
  ScanService& operator=(const ScanService&) = delete;

  /// Binds and starts serving on a background thread; returns the port.
  /// Throws ConfigError when the address cannot be bound.
  int start();
  /// Blocks until stop() is called from elsewhere.
  void wait();
  void stop();

  int port() const { return port_; }
  ServiceStats stats() const;

  /// The /scan handler without HTTP; returns (status, body, retry_after).
  struct Reply {
    int status = 200;
    nlohmann::json body;
    double retry_after = 0.0;
  };
  Reply handle_scan(const std::string& body);
  nlohmann::json handle_detectors() const;
  nlohmann::json handle_stats() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
  std::vector<DetectorPtr> detectors_;
  ServiceConfig config_;
  VerdictCache cache_;
  TokenBucket bucket_;
  int port_ = 0;
  std::atomic<std::uint64_t> requests_{0}, scans_{0}, hits_{0}, misses_{0}, limited_{0}, errors_{0}, next_id_{1};
};

struct ClientConfig {
  Endpoint server;
  std::string detector;  // which service detector to use
  std::size_t max_retries = 3;
  std::chrono::milliseconds initial_backoff{50};
  std::chrono::milliseconds max_backoff{1000};
  std::size_t max_rate_limit_waits = 100;  // 429 answers are waited out, up to this many
  int timeout_seconds = 30;
};

/// Detector whose verdicts come from a running ScanService. Transient
/// failures are retried with capped exponential backoff; after max_retries
/// the call throws Unreachable. Malformed answers throw ProtocolError.
class RemoteDetector final : public detectors::Detector {
 public:
  explicit RemoteDetector(ClientConfig config);

  const std::string& id() const override { return config_.detector; }
  double threshold() const override { return threshold_; }
  Verdict score(ByteView bytes) const override;

  /// HTTP attempts made so far, including retries.
  std::size_t attempts() const { return attempts_.load(); }

 private:
  nlohmann::json request(const std::string& method, const std::string& path, const std::string& body) const;

  ClientConfig config_;
  double threshold_ = 0.5;
  mutable std::atomic<std::size_t> attempts_{0};
};

}  // namespace chainae::scan

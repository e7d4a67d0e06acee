#pragma once

// Plan service: newline-delimited JSON requests over TCP, one session per
// connection. Every request gets exactly one single-line response; failures
// come back as {"status":"err"} and leave the session as it was.

#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <cerrno>
#include <cstring>
#include <list>
#include <map>
#include <mutex>
#include <thread>

#include "needleplan/pipeline.hpp"

namespace needleplan {

constexpr std::uint16_t kDefaultPort = 7455;

// ---------------------------------------------------------------------------
// Base64 (RFC 4648, padded)

inline std::string base64_encode(std::string_view in) {
  static constexpr char kAlphabet[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::string out;
  out.reserve((in.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 2 < in.size(); i += 3) {
    const auto n = (static_cast<std::uint32_t>(static_cast<unsigned char>(in[i])) << 16) |
                   (static_cast<std::uint32_t>(static_cast<unsigned char>(in[i + 1])) << 8) |
                   static_cast<unsigned char>(in[i + 2]);
    out += kAlphabet[(n >> 18) & 63];
    out += kAlphabet[(n >> 12) & 63];
    out += kAlphabet[(n >> 6) & 63];
    out += kAlphabet[n & 63];
  }
  if (i < in.size()) {
    std::uint32_t n = static_cast<std::uint32_t>(static_cast<unsigned char>(in[i])) << 16;
    if (i + 1 < in.size()) n |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[i + 1])) << 8;
    out += kAlphabet[(n >> 18) & 63];
    out += kAlphabet[(n >> 12) & 63];
    out += i + 1 < in.size() ? kAlphabet[(n >> 6) & 63] : '=';
    out += '=';
  }
  return out;
}

inline std::string base64_decode(std::string_view in) {
  auto value = [](char c) -> int {
    if (c >= 'A' && c <= 'Z') return c - 'A';
    if (c >= 'a' && c <= 'z') return c - 'a' + 26;
    if (c >= '0' && c <= '9') return c - '0' + 52;
    if (c == '+') return 62;
    if (c == '/') return 63;
    return -1;
  };
  if (in.size() % 4 != 0) throw Error(ErrorCode::InvalidArgument, "base64 length not a multiple of 4");
  std::string out;
  out.reserve(in.size() / 4 * 3);
  for (std::size_t i = 0; i < in.size(); i += 4) {
    std::uint32_t n = 0;
    int pad = 0;
    for (std::size_t k = 0; k < 4; ++k) {
      const char c = in[i + k];
      if (c == '=' && i + 4 == in.size() && k >= 2) {
        ++pad;
        n <<= 6;
        continue;
      }
      const int v = value(c);
      if (v < 0 || pad > 0) throw Error(ErrorCode::InvalidArgument, "invalid base64 character");
      n = (n << 6) | static_cast<std::uint32_t>(v);
    }
    out += static_cast<char>((n >> 16) & 0xFF);
    if (pad < 2) out += static_cast<char>((n >> 8) & 0xFF);
    if (pad < 1) out += static_cast<char>(n & 0xFF);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Shared state

/// Prepared volumes keyed by file content, shared read-only between sessions.
class VolumeCache {
 public:
  explicit VolumeCache(SegmentationParams seg = {}) : seg_(seg) {}

  std::shared_ptr<const PreparedVolume> get(const std::string& path) {
    const std::string bytes = read_file_bytes(path);
    const std::string id = content_id(bytes);
    {
      std::lock_guard lock(mutex_);
      if (auto it = entries_.find(id); it != entries_.end()) return it->second;
    }
    std::istringstream in(bytes);
    auto prepared = std::make_shared<const PreparedVolume>(prepare_volume(parse_nrrd(in), id, seg_));
    std::lock_guard lock(mutex_);
    return entries_.emplace(id, std::move(prepared)).first->second;
  }

  [[nodiscard]] std::size_t size() const {
    std::lock_guard lock(mutex_);
    return entries_.size();
  }

 private:
  SegmentationParams seg_;
  mutable std::mutex mutex_;
  std::map<std::string, std::shared_ptr<const PreparedVolume>> entries_;
};

/// Append-only plan log, one JSON object per line.
class SessionLog {
 public:
  explicit SessionLog(std::string path) : path_(std::move(path)) {}

  void append(const Json& record) {
    if (path_.empty()) return;
    std::lock_guard lock(mutex_);
    std::ofstream out(path_, std::ios::app);
    if (!out) throw Error(ErrorCode::IoError, "cannot append to " + path_);
    out << record.dump() << '\n';
  }

 private:
  std::string path_;
  std::mutex mutex_;
};

struct ServiceConfig {
  unsigned workers = 1;
  NoiseModel noise;
  std::uint64_t seed = 0;
  std::string log_path;
  SegmentationParams segmentation;
  PlanParams params;
};

// ---------------------------------------------------------------------------
// Session

class PlanSession {
 public:
  PlanSession(const ServiceConfig& config, VolumeCache& cache, SessionLog* log = nullptr, std::uint64_t session_id = 0)
      : config_(config), cache_(cache), log_(log), session_id_(session_id) {
    state_.rng.seed(config.seed);
  }

  /// Never throws: failures become error responses and the state is rolled back.
  Json handle(const Json& request) {
    State next = state_;
    try {
      if (!request.is_object() || !request.contains("op") || !request.at("op").is_string()) {
        throw Error(ErrorCode::BadRequest, "request must be an object with a string \"op\"");
      }
      Json response = dispatch(request.at("op").get<std::string>(), request, next);
      state_ = std::move(next);
      return response;
    } catch (const Error& e) {
      return error_response(e.code(), e.what());
    } catch (const Json::exception& e) {
      return error_response(ErrorCode::BadRequest, e.what());
    } catch (const std::exception& e) {
      return error_response(ErrorCode::InvalidArgument, e.what());
    }
  }

  std::string handle_line(const std::string& line) {
    Json request;
    try {
      request = Json::parse(line);
    } catch (const Json::exception& e) {
      return error_response(ErrorCode::BadRequest, std::string("malformed message: ") + e.what()).dump();
    }
    return handle(request).dump();
  }

  /// Snapshot of the observable state, for tests of transactional behaviour.
  [[nodiscard]] Json describe() const {
    Json j = {{"volume", state_.volume ? Json(state_.volume->id) : Json(nullptr)},
              {"scene", static_cast<bool>(state_.scene)},
              {"target", state_.target ? vec_to_json(*state_.target) : Json(nullptr)},
              {"heatmap", static_cast<bool>(state_.heatmap)},
              {"reachability", static_cast<bool>(state_.reached)},
              {"selected", state_.selected ? Json(*state_.selected) : Json(nullptr)},
              {"pending", state_.pending_token ? Json(*state_.pending_token) : Json(nullptr)},
              {"history", state_.history.size()}};
    return j;
  }

  [[nodiscard]] const std::vector<PlanRecord>& history() const noexcept { return state_.history; }

 private:
  struct State {
    std::shared_ptr<const PreparedVolume> volume;
    std::shared_ptr<const CollisionScene> scene;
    std::optional<Point3> target;
    std::shared_ptr<const HeatMap> heatmap;  // built from the current volume and target
    std::shared_ptr<const HeatMap> reached;  // heatmap after grid reachability with the current scene
    std::optional<std::size_t> selected;
    std::optional<std::string> pending_token;
    std::uint64_t tokens_issued = 0;
    std::mt19937_64 rng;
    std::vector<PlanRecord> history;
  };

  static Json error_response(ErrorCode code, const std::string& message) {
    return {{"status", "err"}, {"code", std::string(to_string(code))}, {"message", message}};
  }
  static Json ok(Json body = Json::object()) {
    body["status"] = "ok";
    return body;
  }
  static Point3 point_field(const Json& r, const char* key) {
    if (!r.contains(key)) throw Error(ErrorCode::BadRequest, std::string("missing field ") + key);
    const Json& v = r.at(key);
    if (!v.is_array() || v.size() != 3) throw Error(ErrorCode::BadRequest, std::string(key) + " must be [x, y, z]");
    return vec_from_json(v);
  }

  void clear_plan(State& s) const {
    s.heatmap.reset();
    s.reached.reset();
    s.selected.reset();
    s.pending_token.reset();
  }

  Json dispatch(const std::string& op, const Json& r, State& s) {
    if (op == "info") return info(s);
    if (op == "set_volume") return set_volume(r, s);
    if (op == "set_scene") return set_scene(r, s);
    if (op == "set_target") return set_target(r, s);
    if (op == "heatmap") return heatmap(s);
    if (op == "check_reachability") return check_reachability(r, s);
    if (op == "select") return select(r, s);
    if (op == "execute") return execute(r, s);
    if (op == "evaluate") return evaluate(r);
    throw Error(ErrorCode::BadRequest, "unknown op " + op);
  }

  Json info(const State& s) const {
    Json j = describe();
    if (s.volume) {
      const Grid& g = s.volume->ct.grid();
      j["dims"] = g.dims();
      j["spacing"] = vec_to_json(g.spacing());
    }
    return ok(j);
  }

  Json set_volume(const Json& r, State& s) {
    const auto path = r.at("path").get<std::string>();
    s.volume = cache_.get(path);
    s.target.reset();
    clear_plan(s);
    const Grid& g = s.volume->ct.grid();
    return ok({{"dims", g.dims()}, {"spacing", vec_to_json(g.spacing())}, {"volume_id", s.volume->id}});
  }

  /// With a path, loads a scene file; without, places the default scene around the session volume.
  Json set_scene(const Json& r, State& s) {
    if (r.contains("path")) {
      s.scene = std::make_shared<const CollisionScene>(read_scene(r.at("path").get<std::string>()));
    } else {
      if (!s.volume) throw Error(ErrorCode::NoVolume, "set_volume first or give a scene path");
      s.scene = std::make_shared<const CollisionScene>(default_scene(s.volume->collision_body));
    }
    s.reached.reset();
    s.selected.reset();
    s.pending_token.reset();
    return ok({{"base_from_ct", transform_to_json(s.scene->base_from_ct())}});
  }

  Json set_target(const Json& r, State& s) {
    if (!s.volume) throw Error(ErrorCode::NoVolume, "set_volume first");
    const Point3 t(r.at("x").get<double>(), r.at("y").get<double>(), r.at("z").get<double>());
    if (!strictly_inside(s.volume->body, t)) {
      throw Error(ErrorCode::TargetOutsideBody, "target must lie inside the body, at least one voxel from its boundary");
    }
    s.target = t;
    clear_plan(s);
    return ok({{"target", vec_to_json(t)}});
  }

  Json heatmap(State& s) {
    if (!s.volume) throw Error(ErrorCode::NoVolume, "set_volume first");
    if (!s.target) throw Error(ErrorCode::NoTarget, "set_target first");
    clear_plan(s);
    const PreparedVolume& v = *s.volume;
    s.heatmap = std::make_shared<const HeatMap>(
        build_heatmap(v.ct, v.body, v.skin, *s.target, config_.params, config_.workers));
    return ok({{"ply_payload_base64", base64_encode(heatmap_to_ply(*s.heatmap))},
               {"optimal", s.heatmap->optimal_index ? Json(*s.heatmap->optimal_index) : Json(nullptr)},
               {"counts", counts_to_json(count_classes(*s.heatmap))}});
  }

  /// Exact per-point verdicts; independent of other points, so batches can be sharded freely.
  Json check_reachability(const Json& r, const State& s) const {
    if (!s.target) throw Error(ErrorCode::NoTarget, "set_target first");
    if (!s.scene) throw Error(ErrorCode::NoScene, "set_scene first");
    std::vector<Point3> points;
    for (const Json& p : r.at("points")) {
      if (!p.is_array() || p.size() != 3) throw Error(ErrorCode::BadRequest, "points must be [x, y, z] triples");
      points.push_back(vec_from_json(p));
    }
    std::vector<ReachabilityResult> results(points.size());
    parallel_for(points.size(), config_.workers, [&](std::size_t b, std::size_t e) {
      for (std::size_t i = b; i < e; ++i) results[i] = insertion_feasible(*s.scene, points[i], *s.target);
    });
    Json verdicts = Json::array();
    for (const auto& v : results) verdicts.push_back(reachability_to_json(v));
    return ok({{"verdicts", verdicts}});
  }

  Json select(const Json& r, State& s) const {
    if (!s.heatmap) throw Error(ErrorCode::NoHeatMap, "request a heatmap first");
    if (!s.scene) throw Error(ErrorCode::NoScene, "set_scene first");
    if (!s.reached) {
      HeatMap hm = *s.heatmap;
      grid_reachability(*s.scene, hm, config_.workers);
      s.reached = std::make_shared<const HeatMap>(std::move(hm));
    }
    const HeatMap& hm = *s.reached;
    std::size_t v = 0;
    if (r.contains("vertex") && !r.at("vertex").is_null()) {
      v = r.at("vertex").get<std::size_t>();
      if (v >= hm.candidates.size()) throw Error(ErrorCode::BadRequest, "vertex out of range");
      if (hm.candidates[v].classification != Classification::Feasible) {
        throw Error(ErrorCode::NotFeasible, "vertex is " + std::string(to_string(hm.candidates[v].classification)));
      }
    } else {
      if (!hm.optimal_index) throw Error(ErrorCode::NotFeasible, "no feasible entry point");
      v = *hm.optimal_index;
    }
    s.selected = v;
    s.pending_token.reset();
    const EntryCandidate& c = hm.candidates[v];
    return ok({{"entry", v},
               {"position", vec_to_json(c.position)},
               {"cost", *c.cost},
               {"distance_mm", c.distance_mm},
               {"angle_deg", c.angle_deg}});
  }

  /// Without a token: approach phase, checks reachability and issues a token.
  /// With the issued token: insertion phase, simulates it and appends a record.
  Json execute(const Json& r, State& s) {
    if (!s.selected || !s.reached || !s.scene) throw Error(ErrorCode::NotFeasible, "select an entry first");
    const HeatMap& hm = *s.reached;
    if (!r.contains("confirm_token") || r.at("confirm_token").is_null()) {
      const ReachabilityResult v = insertion_feasible(*s.scene, hm.candidates[*s.selected].position, hm.target);
      if (!v.reachable) {
        throw Error(ErrorCode::NotReachable,
                    "fails at waypoint " + std::to_string(v.failing_waypoint.value_or(0)) + ": " +
                        std::string(to_string(v.reason.value_or(ReachFailure::IKFailure))));
      }
      s.pending_token = std::to_string(session_id_) + "-" + std::to_string(++s.tokens_issued);
      return {{"status", "needs_confirm"}, {"token", *s.pending_token}, {"entry", *s.selected}};
    }
    const auto token = r.at("confirm_token").get<std::string>();
    if (!s.pending_token || token != *s.pending_token) {
      throw Error(ErrorCode::NotConfirmed, "no matching approach awaiting confirmation");
    }
    PlanRecord rec = execute_entry(*s.scene, hm, *s.selected, config_.noise, s.rng);
    s.pending_token.reset();
    s.history.push_back(rec);
    Json out = record_to_json(rec);
    if (log_) {
      Json line = out;
      line["session"] = session_id_;
      line["volume"] = s.volume ? s.volume->id : std::string();
      log_->append(line);
    }
    return ok({{"record", out}});
  }

  static Json evaluate(const Json& r) {
    const PlacementReport rep = placement_report(point_field(r, "target"), point_field(r, "entry"), point_field(r, "tip"));
    return ok(report_to_json(rep));
  }

  const ServiceConfig& config_;
  VolumeCache& cache_;
  SessionLog* log_;
  std::uint64_t session_id_;
  State state_;
};

// ---------------------------------------------------------------------------
// TCP server

class PlanServer {
 public:
  explicit PlanServer(ServiceConfig config) : config_(std::move(config)), cache_(config_.segmentation), log_(config_.log_path) {}
  PlanServer(const PlanServer&) = delete;
  PlanServer& operator=(const PlanServer&) = delete;
  ~PlanServer() { stop(); }

  /// Binds and starts accepting. Port 0 picks a free port; see port().
  void start(const std::string& address = "127.0.0.1", std::uint16_t port = kDefaultPort) {
    listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (listen_fd_ < 0) throw Error(ErrorCode::BindFailure, std::strerror(errno));
    const int yes = 1;
    ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &yes, sizeof yes);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(port);
    if (::inet_pton(AF_INET, address.c_str(), &addr.sin_addr) != 1) {
      close_listener();
      throw Error(ErrorCode::BindFailure, "invalid IPv4 address " + address);
    }
    if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0 || ::listen(listen_fd_, 16) != 0) {
      const std::string why = std::strerror(errno);
      close_listener();
      throw Error(ErrorCode::BindFailure, address + ":" + std::to_string(port) + ": " + why);
    }
    socklen_t len = sizeof addr;
    ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &len);
    port_ = ntohs(addr.sin_port);
    running_ = true;
    acceptor_ = std::thread([this] { accept_loop(); });
  }

  void stop() {
    if (!running_.exchange(false)) return;
    ::shutdown(listen_fd_, SHUT_RDWR);
    close_listener();
    if (acceptor_.joinable()) acceptor_.join();
    std::list<std::thread> workers;
    {
      std::lock_guard lock(mutex_);
      for (int fd : open_fds_) ::shutdown(fd, SHUT_RDWR);
      workers.swap(connections_);
    }
    for (auto& t : workers) t.join();
  }

  /// Blocks until stop() is called from another thread.
  void wait() {
    if (acceptor_.joinable()) acceptor_.join();
  }

  [[nodiscard]] std::uint16_t port() const noexcept { return port_; }
  [[nodiscard]] VolumeCache& cache() noexcept { return cache_; }

 private:
  void close_listener() {
    if (listen_fd_ >= 0) ::close(listen_fd_);
    listen_fd_ = -1;
  }

  void accept_loop() {
    while (running_) {
      const int fd = ::accept(listen_fd_, nullptr, nullptr);
      if (fd < 0) {
        if (!running_) break;
        continue;
      }
      std::lock_guard lock(mutex_);
      open_fds_.push_back(fd);
      const std::uint64_t id = ++sessions_;
      connections_.emplace_back([this, fd, id] { serve_connection(fd, id); });
    }
  }

  static bool send_all(int fd, const std::string& data) {
    std::size_t sent = 0;
    while (sent < data.size()) {
      const ssize_t n = ::send(fd, data.data() + sent, data.size() - sent, MSG_NOSIGNAL);
      if (n <= 0) return false;
      sent += static_cast<std::size_t>(n);
    }
    return true;
  }

  void serve_connection(int fd, std::uint64_t id) {
    PlanSession session(config_, cache_, &log_, id);
    std::string buffer;
    char chunk[65536];
    bool open = true;
    while (open) {
      const ssize_t n = ::recv(fd, chunk, sizeof chunk, 0);
      if (n <= 0) break;
      buffer.append(chunk, static_cast<std::size_t>(n));
      std::size_t nl;
      while ((nl = buffer.find('\n')) != std::string::npos) {
        std::string line = buffer.substr(0, nl);
        buffer.erase(0, nl + 1);
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        if (!send_all(fd, session.handle_line(line) + "\n")) {
          open = false;
          break;
        }
      }
    }
    std::lock_guard lock(mutex_);
    open_fds_.erase(std::remove(open_fds_.begin(), open_fds_.end(), fd), open_fds_.end());
    ::close(fd);
  }

  ServiceConfig config_;
  VolumeCache cache_;
  SessionLog log_;
  int listen_fd_ = -1;
  std::uint16_t port_ = 0;
  std::atomic<bool> running_{false};
  std::thread acceptor_;
  std::mutex mutex_;
  std::list<std::thread> connections_;
  std::vector<int> open_fds_;
  std::uint64_t sessions_ = 0;
};

/// Minimal blocking client: one request line out, one response line back.
class PlanClient {
 public:
  PlanClient(const std::string& address, std::uint16_t port) {
    fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(port);
    if (fd_ < 0 || ::inet_pton(AF_INET, address.c_str(), &addr.sin_addr) != 1 ||
        ::connect(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0) {
      const std::string why = std::strerror(errno);
      if (fd_ >= 0) ::close(fd_);
      throw Error(ErrorCode::IoError, "cannot connect to " + address + ":" + std::to_string(port) + ": " + why);
    }
  }
  PlanClient(const PlanClient&) = delete;
  PlanClient& operator=(const PlanClient&) = delete;
  ~PlanClient() {
    if (fd_ >= 0) ::close(fd_);
  }

  std::string request_line(const std::string& line) {
    const std::string out = line + "\n";
    std::size_t sent = 0;
    while (sent < out.size()) {
      const ssize_t n = ::send(fd_, out.data() + sent, out.size() - sent, MSG_NOSIGNAL);
      if (n <= 0) throw Error(ErrorCode::IoError, "connection closed while sending");
      sent += static_cast<std::size_t>(n);
    }
    std::size_t nl;
    while ((nl = buffer_.find('\n')) == std::string::npos) {
      char chunk[65536];
      const ssize_t n = ::recv(fd_, chunk, sizeof chunk, 0);
      if (n <= 0) throw Error(ErrorCode::IoError, "connection closed while receiving");
      buffer_.append(chunk, static_cast<std::size_t>(n));
    }
    std::string response = buffer_.substr(0, nl);
    buffer_.erase(0, nl + 1);
    return response;
  }

  Json request(const Json& j) { return Json::parse(request_line(j.dump())); }

 private:
  int fd_ = -1;
  std::string buffer_;
};

}  // namespace needleplan

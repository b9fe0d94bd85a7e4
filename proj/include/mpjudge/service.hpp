#pragma once

// Annotation backend: serves scalar-rating and preference tasks, records
// responses in an append-only JSONL event log, and exports manifests in the
// trainer's input format.
//
// Task ids: "s:<pair_id>" for scalar ratings, "p:<modality>:<query>:<a>:<b>"
// for preference judgments.

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "mpjudge/annotation.hpp"

namespace httplib {
class Server;
}

namespace mpjudge::service {

inline constexpr int kExportSchemaVersion = 1;

struct ServiceConfig {
  std::filesystem::path data_root;           // media paths are relative to it
  std::string pairs_manifest = "pairs.jsonl";  // the corpus to annotate; scores ignored
  std::filesystem::path log_path;            // event log, created when absent
  std::filesystem::path scores_path;         // optional {"pair_id","score"} lines from eval
  std::map<std::string, std::string> tokens;  // token -> annotator id
  Band band;
  std::size_t votes_per_task = 3;
  std::uint64_t seed = 1;  // preference-task pairing
};

// Token file: {"tokens": {"<token>": "<annotator>", ...}}.
std::map<std::string, std::string> load_tokens(const std::filesystem::path& path);

// {"pair_id","score"} JSONL.
std::map<std::string, double> load_model_scores(const std::filesystem::path& path);
std::string model_scores_to_jsonl(const std::map<std::string, double>& scores);

struct Event {
  std::uint64_t seq = 0;
  std::string task_id;
  std::string annotator;
  std::optional<double> score;
  std::optional<char> choice;
  std::int64_t timestamp_ms = 0;
};

nlohmann::json event_to_json(const Event& e);
Event event_from_json(const nlohmann::json& j);

// Outcome of a request, mapped onto an HTTP status by the server.
struct Reply {
  int status = 200;
  nlohmann::json body;  // errors carry "error_code" and "message"
};

class AnnotationService {
 public:
  // Loads the pair manifest and model scores and replays the event log.
  explicit AnnotationService(ServiceConfig config);

  // Annotator id for a token, if known.
  std::optional<std::string> authenticate(const std::string& token) const;

  // 200 with a task document, 204 when nothing is left for this annotator.
  Reply next_task(const std::string& annotator, const std::string& kind) const;
  // 201 on a new response, 200 with the original acknowledgment on a
  // duplicate; 400 invalid payload, 404 unknown task, 409 task already full.
  Reply submit(const std::string& annotator, const std::string& task_id, const nlohmann::json& payload);
  nlohmann::json export_dataset() const;
  nlohmann::json stats() const;

  // Replaces the model-score snapshot that drives preference-task selection.
  void set_model_scores(std::map<std::string, double> scores);
  // Re-reads scores_path when its modification time changed.
  void refresh_model_scores();

  // Absolute path of a painting or music file by media id.
  std::optional<std::filesystem::path> media_path(const std::string& id) const;

  // Canonical dump of the observable state (queues, records, stats).
  nlohmann::json state() const;

  void register_routes(httplib::Server& server);

 private:
  struct Snapshot;

  std::shared_ptr<const Snapshot> snapshot() const;
  void publish(std::shared_ptr<const Snapshot> next);
  // Applies an event to a mutable copy; returns the acknowledgment or an error.
  static Reply apply(Snapshot& s, const Event& e, std::size_t votes_per_task);

  ServiceConfig config_;
  mutable std::mutex snapshot_mutex_;
  std::shared_ptr<const Snapshot> snapshot_;
  std::mutex writer_mutex_;
  std::filesystem::file_time_type scores_mtime_{};
};

}  // namespace mpjudge::service
